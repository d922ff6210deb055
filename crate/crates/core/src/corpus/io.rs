use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Label, LabeledText};
use crate::{DebiasError, Result};

/// Writes `label<TAB>text` lines.
pub fn write_corpus_tsv(path: &Path, docs: &[LabeledText]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        if d.text.contains(['\t', '\n']) {
            return Err(DebiasError::Corpus("document text contains a tab or newline".into()));
        }
        let _ = writeln!(out, "{}\t{}", d.label.as_str(), d.text);
    }
    std::fs::write(path, out).map_err(|e| DebiasError::io(path, e))
}

pub fn read_corpus_tsv(path: &Path) -> Result<Vec<LabeledText>> {
    let text = std::fs::read_to_string(path).map_err(|e| DebiasError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let (label, body) = line.split_once('\t').ok_or_else(|| DebiasError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: missing tab", i + 1),
            })?;
            let label = Label::parse(label).ok_or_else(|| DebiasError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: unknown label `{label}`", i + 1),
            })?;
            Ok(LabeledText {
                label,
                text: body.to_string(),
            })
        })
        .collect()
}
