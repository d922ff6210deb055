use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TemplateTag, TokenId};
use crate::{DebiasError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IdeologyTag {
    #[serde(rename = "none")]
    None,
    L,
    C,
}

impl From<TemplateTag> for IdeologyTag {
    fn from(t: TemplateTag) -> Self {
        match t {
            TemplateTag::Indirect => IdeologyTag::None,
            TemplateTag::DirectL => IdeologyTag::L,
            TemplateTag::DirectC => IdeologyTag::C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Vanilla,
    Emb,
    Cls,
    Naive,
}

impl GenerationMode {
    pub const ALL: [GenerationMode; 4] = [Self::Vanilla, Self::Emb, Self::Cls, Self::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Emb => "emb",
            Self::Cls => "cls",
            Self::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl std::fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One generated sample. `token_ids` and `text` cover prompt and
/// continuation; the continuation starts at `prompt_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub attribute: String,
    pub option: String,
    pub keyword: String,
    pub template_id: usize,
    pub ideology_tag: IdeologyTag,
    pub mode: GenerationMode,
    pub lambda: f64,
    pub rng_seed: u64,
    pub token_ids: Vec<TokenId>,
    pub prompt_len: usize,
    pub text: String,
    pub judge_score: Option<f64>,
}

impl GenerationRecord {
    pub fn continuation(&self) -> &[TokenId] {
        &self.token_ids[self.prompt_len.min(self.token_ids.len())..]
    }
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| DebiasError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| DebiasError::io(path, e))?;
    }
    w.flush().map_err(|e| DebiasError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<GenerationRecord>> {
    let f = File::open(path).map_err(|e| DebiasError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DebiasError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DebiasError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_uses_listed_field_names() {
        let r = GenerationRecord {
            attribute: "gender".into(),
            option: "male".into(),
            keyword: "Jake".into(),
            template_id: 2,
            ideology_tag: IdeologyTag::None,
            mode: GenerationMode::Cls,
            lambda: 0.6,
            rng_seed: 42,
            token_ids: vec![5, 6, 7],
            prompt_len: 2,
            text: "a b c".into(),
            judge_score: Some(0.25),
        };
        let json = serde_json::to_string(&r).unwrap();
        for key in ["attribute", "option", "keyword", "template_id", "ideology_tag", "mode", "lambda", "rng_seed", "token_ids", "text", "judge_score"] {
            assert!(json.contains(&format!("\"{key}\":")), "{key}");
        }
        assert!(json.contains("\"ideology_tag\":\"none\"") && json.contains("\"mode\":\"cls\""));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        write_records(&p, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_records(&p).unwrap(), vec![r.clone(), r]);
    }
}
