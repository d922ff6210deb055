use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiment::{
    bias_lexicon, evaluate_mode, files, generate_records, generation_plan, naive_records, split_corpus, synth_corpus,
    tradeoff_sweep, train_debias_head, train_judge, train_language_model, vanilla_ngram, Artifacts, Splits,
};
use crate::calibration::{resolve_bias_words, write_trace, CalibrationMode};
use crate::checkpoint::Checkpoint;
use crate::corpus::{read_corpus_tsv, write_corpus_tsv, AttributeRegistry, Vocab};
use crate::lm::{read_records, write_records, GenerationMode, GenerationRecord, TransformerLm};
use crate::metrics::{emit_report, AttributeBias, TradeoffRow};
use crate::seed::derive_seed;
use crate::{DebiasError, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SynthCorpus,
    TrainLm,
    TrainJudge,
    TrainDebiasHead,
    ExtractBiasWords,
    Generate,
    EvaluateBias,
    EvaluateTradeoff,
    Report,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 9] = [
        Stage::SynthCorpus,
        Stage::TrainLm,
        Stage::TrainJudge,
        Stage::TrainDebiasHead,
        Stage::ExtractBiasWords,
        Stage::Generate,
        Stage::EvaluateBias,
        Stage::EvaluateTradeoff,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SynthCorpus => "synth-corpus",
            Stage::TrainLm => "train-lm",
            Stage::TrainJudge => "train-judge",
            Stage::TrainDebiasHead => "train-debias-head",
            Stage::ExtractBiasWords => "extract-bias-words",
            Stage::Generate => "generate",
            Stage::EvaluateBias => "evaluate-bias",
            Stage::EvaluateTradeoff => "evaluate-tradeoff",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Seeds drawn by the stage, keyed by their derivation `stage/index`.
    /// Per-sample generation seeds are logged on each generation record.
    pub seeds: BTreeMap<String, u64>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
    pub at_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// SHA-256 of the stored `config.toml` bytes.
    pub config_hash: String,
    pub tool_version: String,
    pub created_unix: u64,
    /// Completed stages in pipeline order. A stage's record is dropped when
    /// an earlier stage is re-executed.
    pub stages: Vec<StageRecord>,
    pub last_completed: Option<Stage>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.iter().any(|r| r.stage == stage)
    }
}

/// Options of a single generation stage invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub mode: GenerationMode,
    /// Overrides the mode's starting `λ`.
    pub lambda: Option<f64>,
    /// Overrides the mode's KL threshold.
    pub sigma: Option<f64>,
}

impl GenerateOptions {
    pub fn mode(mode: GenerationMode) -> Self {
        Self {
            mode,
            lambda: None,
            sigma: None,
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DebiasError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DebiasError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| DebiasError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DebiasError::io(path, e))
}

pub fn generations_file(mode: GenerationMode) -> String {
    format!("{}/{}.jsonl", files::GENERATIONS, mode.as_str())
}

pub fn traces_file(mode: GenerationMode) -> String {
    format!("{}/{}.jsonl", files::TRACES, mode.as_str())
}

/// A run directory: stored config, manifest, and every stage's artifacts.
#[derive(Debug)]
pub struct Run {
    dir: PathBuf,
    config: ExperimentConfig,
    registry: AttributeRegistry,
    manifest: RunManifest,
}

impl Run {
    /// Opens `dir`, creating it with `config` or checking that the stored
    /// config is byte-identical. `base` resolves a relative registry path.
    pub fn open(dir: &Path, config: &ExperimentConfig, base: &Path) -> Result<Self> {
        let problems = config.validate(base);
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        let registry = config.load_registry(base)?;
        let mut stored = config.clone();
        if let Some(p) = &config.registry {
            stored.registry = Some(std::path::absolute(base.join(p)).map_err(|e| DebiasError::io(base.join(p), e))?);
        }
        let text = stored.to_toml();
        let hash = config_hash(text.as_bytes());
        mkdir(dir)?;
        let manifest_path = dir.join(files::MANIFEST);
        let manifest = if manifest_path.exists() {
            let m: RunManifest = read_json(&manifest_path)?;
            let on_disk = std::fs::read(dir.join(files::CONFIG)).map_err(|e| DebiasError::io(dir.join(files::CONFIG), e))?;
            if config_hash(&on_disk) != m.config_hash {
                return Err(DebiasError::Config(format!(
                    "{}: stored config no longer matches the manifest hash",
                    dir.join(files::CONFIG).display()
                )));
            }
            if m.config_hash != hash {
                return Err(DebiasError::Config(format!(
                    "{} holds a run with a different config; choose another output directory",
                    dir.display()
                )));
            }
            m
        } else {
            let p = dir.join(files::CONFIG);
            std::fs::write(&p, &text).map_err(|e| DebiasError::io(p, e))?;
            let m = RunManifest {
                run_id: hash[..12].to_string(),
                config_hash: hash,
                tool_version: TOOL_VERSION.to_string(),
                created_unix: now(),
                stages: Vec::new(),
                last_completed: None,
                failure: None,
            };
            write_json(&manifest_path, &m)?;
            m
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config: stored,
            registry,
            manifest,
        })
    }

    /// Opens an existing run directory with its stored config.
    pub fn resume(dir: &Path) -> Result<Self> {
        let p = dir.join(files::CONFIG);
        let text = std::fs::read_to_string(&p).map_err(|e| DebiasError::io(&p, e))?;
        let config = ExperimentConfig::from_toml(&text).map_err(|message| DebiasError::Parse { path: p, message })?;
        Self::open(dir, &config, dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Worker count for generation. Not part of the stored config, since it
    /// does not change any output.
    pub fn set_jobs(&mut self, jobs: usize) {
        self.config.generation.jobs = jobs.max(1);
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.path(files::MANIFEST), &self.manifest)
    }

    /// Runs `stage` and records it. Records of later stages are dropped
    /// first, since their inputs are about to change.
    pub fn execute(&mut self, stage: Stage, generate: Option<GenerateOptions>) -> Result<()> {
        self.manifest.stages.retain(|r| r.stage < stage);
        self.manifest.last_completed = self.manifest.stages.last().map(|r| r.stage);
        self.manifest.failure = None;
        let started = now();
        let mut seeds = BTreeMap::new();
        let outcome = match stage {
            Stage::SynthCorpus => self.synth_corpus(&mut seeds),
            Stage::TrainLm => self.train_lm(&mut seeds),
            Stage::TrainJudge => self.train_judge(&mut seeds),
            Stage::TrainDebiasHead => self.train_head(&mut seeds),
            Stage::ExtractBiasWords => self.extract_bias_words(),
            Stage::Generate => match generate {
                Some(opts) => self.generate(opts),
                None => self.generate_all(),
            },
            Stage::EvaluateBias => self.evaluate_bias(),
            Stage::EvaluateTradeoff => self.evaluate_tradeoff(),
            Stage::Report => self.report(),
        };
        match outcome {
            Ok(outputs) => {
                self.manifest.stages.push(StageRecord {
                    stage,
                    started_unix: started,
                    finished_unix: now(),
                    seeds,
                    outputs,
                });
                self.manifest.last_completed = Some(stage);
                self.save_manifest()
            }
            Err(e) => {
                self.manifest.failure = Some(StageFailure {
                    stage,
                    message: e.to_string(),
                    at_unix: now(),
                });
                self.save_manifest()?;
                Err(e)
            }
        }
    }

    /// Runs every stage not yet recorded as complete, in order.
    pub fn run_all(&mut self) -> Result<&RunManifest> {
        for stage in Stage::ALL {
            if !self.manifest.is_complete(stage) {
                self.execute(stage, None)?;
            }
        }
        Ok(&self.manifest)
    }

    fn vocab(&self) -> Result<Vocab> {
        let p = self.path(files::VOCAB);
        Vocab::from_lines(&std::fs::read_to_string(&p).map_err(|e| DebiasError::io(&p, e))?)
    }

    fn splits(&self) -> Result<(Vocab, Splits)> {
        let vocab = self.vocab()?;
        let docs = read_corpus_tsv(&self.path(files::CORPUS))?;
        let splits = split_corpus(&self.config, &docs, &vocab)?;
        Ok((vocab, splits))
    }

    fn artifacts(&self) -> Result<Artifacts> {
        Artifacts::load(&self.dir, self.registry.clone())
    }

    fn synth_corpus(&self, seeds: &mut BTreeMap<String, u64>) -> Result<Vec<String>> {
        let (docs, vocab) = synth_corpus(&self.config, &self.registry)?;
        seeds.insert("synth-corpus/0".into(), derive_seed(self.config.seed, "synth-corpus", 0));
        seeds.insert("split/0".into(), derive_seed(self.config.seed, "split", 0));
        write_corpus_tsv(&self.path(files::CORPUS), &docs)?;
        let p = self.path(files::VOCAB);
        std::fs::write(&p, vocab.to_lines()).map_err(|e| DebiasError::io(p, e))?;
        Ok(vec![files::CORPUS.into(), files::VOCAB.into()])
    }

    fn train_lm(&self, seeds: &mut BTreeMap<String, u64>) -> Result<Vec<String>> {
        let (vocab, splits) = self.splits()?;
        let (lm, report) = train_language_model(&self.config, &vocab, &splits)?;
        seeds.insert("train-lm/0".into(), derive_seed(self.config.seed, "train-lm", 0));
        lm.to_checkpoint().save(&self.path(files::LM))?;
        write_json(&self.path(files::LM_REPORT), &report)?;
        Ok(vec![files::LM.into(), files::LM_REPORT.into()])
    }

    fn train_judge(&self, seeds: &mut BTreeMap<String, u64>) -> Result<Vec<String>> {
        let (vocab, splits) = self.splits()?;
        let (judge, report) = train_judge(&self.config, &vocab, &splits)?;
        seeds.insert("train-judge/0".into(), derive_seed(self.config.seed, "train-judge", 0));
        judge.to_checkpoint().save(&self.path(files::JUDGE))?;
        write_json(&self.path(files::JUDGE_REPORT), &report)?;
        Ok(vec![files::JUDGE.into(), files::JUDGE_REPORT.into()])
    }

    fn train_head(&self, seeds: &mut BTreeMap<String, u64>) -> Result<Vec<String>> {
        let (_, splits) = self.splits()?;
        let lm = TransformerLm::from_checkpoint(Checkpoint::load(&self.path(files::LM))?)?;
        let (head, report) = train_debias_head(&self.config, &lm, &splits)?;
        seeds.insert(
            "train-debias-head/0".into(),
            derive_seed(self.config.seed, "train-debias-head", 0),
        );
        head.to_checkpoint().save(&self.path(files::HEAD))?;
        write_json(&self.path(files::HEAD_REPORT), &report)?;
        Ok(vec![files::HEAD.into(), files::HEAD_REPORT.into()])
    }

    fn extract_bias_words(&self) -> Result<Vec<String>> {
        let (vocab, splits) = self.splits()?;
        let words = bias_lexicon(&self.config, &vocab, &splits)?;
        write_json(&self.path(files::BIAS_WORDS), &words)?;
        Ok(vec![files::BIAS_WORDS.into()])
    }

    /// Generates one mode over every configured attribute.
    fn generate(&self, opts: GenerateOptions) -> Result<Vec<String>> {
        mkdir(&self.path(files::GENERATIONS))?;
        mkdir(&self.path(files::TRACES))?;
        let out = self.path(&generations_file(opts.mode));
        if opts.mode == GenerationMode::Naive {
            let vanilla = read_records(&self.path(&generations_file(GenerationMode::Vanilla)))?;
            let records = naive_records(&self.artifacts()?, &vanilla)?;
            write_records(&out, &records)?;
            return Ok(vec![generations_file(opts.mode)]);
        }
        let artifacts = self.artifacts()?;
        let cal = match opts.mode {
            GenerationMode::Emb | GenerationMode::Cls => {
                let m = if opts.mode == GenerationMode::Emb { CalibrationMode::Emb } else { CalibrationMode::Cls };
                let mut c = self.config.calibration.for_mode(m).clone();
                if let Some(l) = opts.lambda {
                    c.lambda0 = l;
                    c.lambda_min = c.lambda_min.min(l);
                    c.lambda_max = c.lambda_max.max(l);
                }
                if let Some(s) = opts.sigma {
                    c.sigma = Some(s);
                }
                let problems = c.validate();
                if !problems.is_empty() {
                    return Err(DebiasError::Config(problems.join("; ")));
                }
                Some(c)
            }
            _ => None,
        };
        let mut records = Vec::new();
        let mut traces = Vec::new();
        for attribute in &self.config.attributes {
            let plan = generation_plan(&artifacts, attribute, self.config.generation.samples_per_prompt, self.config.seed)?;
            let (r, mut t) = generate_records(&artifacts, &plan, opts.mode, cal.as_ref(), &self.config.generation)?;
            t.iter_mut().for_each(|e| e.sample += records.len());
            records.extend(r);
            traces.extend(t);
        }
        write_records(&out, &records)?;
        let mut outputs = vec![generations_file(opts.mode)];
        if cal.is_some() {
            write_trace(&self.path(&traces_file(opts.mode)), &traces)?;
            outputs.push(traces_file(opts.mode));
        }
        Ok(outputs)
    }

    fn generate_all(&self) -> Result<Vec<String>> {
        let mut outputs = Vec::new();
        for mode in [GenerationMode::Vanilla, GenerationMode::Emb, GenerationMode::Cls, GenerationMode::Naive] {
            outputs.extend(self.generate(GenerateOptions::mode(mode))?);
        }
        Ok(outputs)
    }

    fn vanilla_records(&self) -> Result<Vec<GenerationRecord>> {
        read_records(&self.path(&generations_file(GenerationMode::Vanilla)))
    }

    fn own(records: &[GenerationRecord], attribute: &str) -> Vec<GenerationRecord> {
        records.iter().filter(|r| r.attribute == attribute).cloned().collect()
    }

    /// Bias of every mode with a generation log; the vanilla log is required.
    fn evaluate_bias(&self) -> Result<Vec<String>> {
        let vanilla = self.vanilla_records()?;
        let artifacts = self.artifacts()?;
        let mut results: Vec<AttributeBias> = Vec::new();
        for attribute in &self.config.attributes {
            let reference = vanilla_ngram(&self.config, &artifacts.vocab, &Self::own(&vanilla, attribute))?;
            for mode in [GenerationMode::Vanilla, GenerationMode::Emb, GenerationMode::Cls, GenerationMode::Naive] {
                let p = self.path(&generations_file(mode));
                if mode != GenerationMode::Vanilla && !p.exists() {
                    continue;
                }
                let records = read_records(&p)?;
                results.push(evaluate_mode(&artifacts, attribute, mode, &Self::own(&records, attribute), &reference)?);
            }
        }
        write_json(&self.path(files::BIAS), &results)?;
        Ok(vec![files::BIAS.into()])
    }

    fn evaluate_tradeoff(&self) -> Result<Vec<String>> {
        let vanilla = self.vanilla_records()?;
        let artifacts = self.artifacts()?;
        let mut rows: Vec<TradeoffRow> = Vec::new();
        for attribute in &self.config.attributes {
            let own = Self::own(&vanilla, attribute);
            let reference = vanilla_ngram(&self.config, &artifacts.vocab, &own)?;
            let plan = generation_plan(&artifacts, attribute, self.config.generation.samples_per_prompt, self.config.seed)?;
            let sweep = tradeoff_sweep(&artifacts, &self.config, attribute, &plan, &own, &reference)?;
            rows.extend(sweep.into_iter().map(|(row, _)| row));
        }
        write_json(&self.path(files::TRADEOFF), &rows)?;
        Ok(vec![files::TRADEOFF.into()])
    }

    /// Renders `bias.json` (required) and `tradeoff.json` (when present)
    /// plus per-mode score histograms.
    fn report(&self) -> Result<Vec<String>> {
        let results: Vec<AttributeBias> = read_json(&self.path(files::BIAS))?;
        let tp = self.path(files::TRADEOFF);
        let tradeoff: Vec<TradeoffRow> = if tp.exists() { read_json(&tp)? } else { Vec::new() };
        let mut histograms = Vec::new();
        for mode in [GenerationMode::Vanilla, GenerationMode::Emb, GenerationMode::Cls, GenerationMode::Naive] {
            let p = self.path(&generations_file(mode));
            if p.exists() {
                let scores = read_records(&p)?.iter().filter_map(|r| r.judge_score).collect();
                histograms.push((mode, scores));
            }
        }
        let mut notes = Vec::new();
        let bw = self.path(files::BIAS_WORDS);
        if bw.exists() {
            let (_, _, skipped) = resolve_bias_words(&read_json(&bw)?, &self.vocab()?);
            if skipped > 0 {
                notes.push(format!("{skipped} bias words are outside the vocabulary and were skipped"));
            }
        }
        let dir = self.path(files::REPORT);
        let written = emit_report(&dir, &self.manifest.run_id, &results, &tradeoff, &histograms, &notes)?;
        Ok([written.tsv, written.markdown, written.tradeoff_tsv, written.histogram_csv]
            .iter()
            .map(|p| p.strip_prefix(&self.dir).unwrap_or(p).display().to_string())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_are_kebab_case_and_ordered() {
        let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
        assert_eq!(names[0], "synth-corpus");
        assert_eq!(names[8], "report");
        for (s, n) in Stage::ALL.iter().zip(&names) {
            assert_eq!(serde_json::to_string(s).unwrap(), format!("\"{n}\""));
        }
        assert!(Stage::ALL.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_hash_is_sha256_hex() {
        assert_eq!(
            config_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn a_different_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig::default();
        let run = Run::open(dir.path(), &c, Path::new(".")).unwrap();
        assert_eq!(run.manifest().run_id.len(), 12);
        assert!(Run::open(dir.path(), &c, Path::new(".")).is_ok());
        let other = ExperimentConfig { seed: 7, ..c };
        assert!(Run::open(dir.path(), &other, Path::new(".")).is_err());
    }

    #[test]
    fn missing_vanilla_log_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::open(dir.path(), &ExperimentConfig::default(), Path::new(".")).unwrap();
        let err = run.execute(Stage::EvaluateBias, None).unwrap_err().to_string();
        assert!(err.contains("generations/vanilla.jsonl"), "{err}");
        let m: RunManifest = read_json(&dir.path().join(files::MANIFEST)).unwrap();
        assert_eq!(m.failure.unwrap().stage, Stage::EvaluateBias);
        assert_eq!(m.last_completed, None);
    }
}
