use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bias::AttributeBias;
use crate::lm::GenerationMode;
use crate::{DebiasError, Result};

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub attribute: String,
    pub lambda: f64,
    pub indirect_bias: f64,
    pub direct_bias: f64,
    pub ppl: f64,
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub tsv: PathBuf,
    pub markdown: PathBuf,
    pub tradeoff_tsv: PathBuf,
    pub histogram_csv: PathBuf,
}

fn baseline_for<'r>(results: &'r [AttributeBias], attribute: &str) -> Result<&'r AttributeBias> {
    results
        .iter()
        .find(|r| r.attribute == attribute && r.mode == GenerationMode::Vanilla)
        .ok_or_else(|| DebiasError::InvalidInput(format!("no vanilla baseline run for attribute `{attribute}`")))
}

fn fmt_ppl(p: Option<f64>) -> String {
    p.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One row per option plus an `overall` row per result. The delta column is
/// baseline indirect bias minus this row's indirect bias.
pub fn render_tsv(results: &[AttributeBias]) -> Result<String> {
    let mut out = String::from("attribute\toption\tmode\tlambda\tindirect_bias\tdirect_bias\tppl\tdelta_vs_baseline\n");
    for r in results {
        let base = baseline_for(results, &r.attribute)?;
        for (o, b) in r.options.iter().zip(&base.options) {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
                r.attribute,
                o.option,
                r.mode,
                r.lambda,
                o.indirect,
                o.direct,
                fmt_ppl(r.ppl),
                b.indirect - o.indirect
            )
            .expect("string write");
        }
        writeln!(
            out,
            "{}\toverall\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}",
            r.attribute,
            r.mode,
            r.lambda,
            r.overall_indirect,
            r.overall_direct,
            fmt_ppl(r.ppl),
            base.overall_indirect - r.overall_indirect
        )
        .expect("string write");
    }
    Ok(out)
}

fn render_tradeoff_tsv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("attribute\tlambda\tindirect_bias\tdirect_bias\tppl\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.attribute, r.lambda, r.indirect_bias, r.direct_bias, r.ppl
        )
        .expect("string write");
    }
    out
}

fn with_delta(value: f64, baseline: f64, is_baseline: bool) -> String {
    if is_baseline {
        format!("{value:.4}")
    } else {
        let d = baseline - value;
        let arrow = if d >= 0.0 { "↓" } else { "↑" };
        format!("{value:.4} ({arrow}{:.4})", d.abs())
    }
}

pub fn render_markdown(run_id: &str, results: &[AttributeBias], tradeoff: &[TradeoffRow], notes: &[String]) -> Result<String> {
    let mut out = format!("# Bias report, run `{run_id}`\n\nBaseline: vanilla decoding. Deltas are baseline minus current.\n");
    for n in notes {
        write!(out, "\n- {n}").expect("string write");
    }
    if !notes.is_empty() {
        out.push('\n');
    }
    let mut attributes: Vec<&str> = Vec::new();
    for r in results {
        if !attributes.contains(&r.attribute.as_str()) {
            attributes.push(&r.attribute);
        }
    }
    for attr in attributes {
        let base = baseline_for(results, attr)?;
        write!(out, "\n## {attr}\n\n| mode | lambda |").expect("string write");
        for o in &base.options {
            write!(out, " {} ind. | {} dir. |", o.option, o.option).expect("string write");
        }
        out.push_str(" overall ind. | overall dir. | ppl |\n|---|---|");
        out.push_str(&"---|---|".repeat(base.options.len()));
        out.push_str("---|---|---|\n");
        for r in results.iter().filter(|r| r.attribute == attr) {
            let is_base = std::ptr::eq(r, base);
            write!(out, "| {} | {:.2} |", r.mode, r.lambda).expect("string write");
            for o in &r.options {
                write!(out, " {:.4} | {:.4} |", o.indirect, o.direct).expect("string write");
            }
            writeln!(
                out,
                " {} | {} | {} |",
                with_delta(r.overall_indirect, base.overall_indirect, is_base),
                with_delta(r.overall_direct, base.overall_direct, is_base),
                r.ppl.map_or_else(|| "NA".to_string(), |p| format!("{p:.2}"))
            )
            .expect("string write");
        }
        let rows: Vec<&TradeoffRow> = tradeoff.iter().filter(|t| t.attribute == attr).collect();
        if !rows.is_empty() {
            out.push_str("\n### Trade-off\n\n| lambda | ind. | dir. | ppl |\n|---|---|---|---|\n");
            for t in rows {
                writeln!(out, "| {:.1} | {:.4} | {:.4} | {:.2} |", t.lambda, t.indirect_bias, t.direct_bias, t.ppl)
                    .expect("string write");
            }
        }
    }
    Ok(out)
}

/// Counts over [`HISTOGRAM_BINS`] equal bins of `[0, 1]`; 1.0 falls in the
/// last bin.
pub fn histogram(scores: &[f64]) -> [usize; HISTOGRAM_BINS] {
    let mut bins = [0usize; HISTOGRAM_BINS];
    for s in scores {
        let i = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        bins[i] += 1;
    }
    bins
}

fn render_histograms(by_mode: &[(GenerationMode, Vec<f64>)]) -> String {
    let mut out = String::from("mode,bin_left,bin_right,count\n");
    for (mode, scores) in by_mode {
        for (i, c) in histogram(scores).iter().enumerate() {
            let w = 1.0 / HISTOGRAM_BINS as f64;
            writeln!(out, "{mode},{:.2},{:.2},{c}", i as f64 * w, (i + 1) as f64 * w).expect("string write");
        }
    }
    out
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| DebiasError::io(&path, e))?;
    Ok(path)
}

/// Writes `report.tsv`, `report.md`, `tradeoff.tsv` and `histogram.csv`
/// under `dir`. Output depends only on the arguments.
pub fn emit_report(
    dir: &Path,
    run_id: &str,
    results: &[AttributeBias],
    tradeoff: &[TradeoffRow],
    histograms: &[(GenerationMode, Vec<f64>)],
    notes: &[String],
) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| DebiasError::io(dir, e))?;
    Ok(ReportFiles {
        tsv: write(dir.join("report.tsv"), &render_tsv(results)?)?,
        markdown: write(dir.join("report.md"), &render_markdown(run_id, results, tradeoff, notes)?)?,
        tradeoff_tsv: write(dir.join("tradeoff.tsv"), &render_tradeoff_tsv(tradeoff))?,
        histogram_csv: write(dir.join("histogram.csv"), &render_histograms(histograms))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::OptionBias;

    fn result(mode: GenerationMode, ind: [f64; 2]) -> AttributeBias {
        AttributeBias {
            attribute: "gender".into(),
            mode,
            lambda: if mode == GenerationMode::Vanilla { 0.0 } else { 0.6 },
            options: vec![
                OptionBias { option: "male".into(), indirect: ind[0], direct: 0.1, samples: 4 },
                OptionBias { option: "female".into(), indirect: ind[1], direct: 0.3, samples: 4 },
            ],
            overall_indirect: (ind[0] + ind[1]) / 2.0,
            overall_direct: 0.2,
            ppl: Some(12.0),
        }
    }

    #[test]
    fn tsv_shape_and_delta() {
        let rs = vec![result(GenerationMode::Vanilla, [0.5, 0.3]), result(GenerationMode::Cls, [0.2, 0.2])];
        let tsv = render_tsv(&rs).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert_eq!(lines[6], "gender\toverall\tcls\t0.600000\t0.200000\t0.200000\t12.000000\t0.200000");
    }

    #[test]
    fn missing_baseline_is_an_error() {
        assert!(render_tsv(&[result(GenerationMode::Cls, [0.2, 0.2])]).is_err());
    }

    #[test]
    fn emission_is_byte_identical() {
        let rs = vec![result(GenerationMode::Vanilla, [0.5, 0.3]), result(GenerationMode::Emb, [0.4, 0.3])];
        let trade = vec![TradeoffRow { attribute: "gender".into(), lambda: 0.0, indirect_bias: 0.4, direct_bias: 0.2, ppl: 9.0 }];
        let hist = vec![(GenerationMode::Vanilla, vec![0.0, 0.5, 1.0])];
        let dir = tempfile::tempdir().unwrap();
        let a = emit_report(&dir.path().join("a"), "r1", &rs, &trade, &hist, &[]).unwrap();
        let b = emit_report(&dir.path().join("b"), "r1", &rs, &trade, &hist, &[]).unwrap();
        for (x, y) in [(a.tsv, b.tsv), (a.markdown, b.markdown), (a.tradeoff_tsv, b.tradeoff_tsv), (a.histogram_csv, b.histogram_csv)] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 0.019, 0.02, 1.0]);
        assert_eq!((h[0], h[1], h[49]), (2, 1, 1));
        assert_eq!(h.iter().sum::<usize>(), 4);
    }
}
