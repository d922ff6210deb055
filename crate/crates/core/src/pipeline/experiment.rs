use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GenerationConfig};
use crate::calibration::{resolve_bias_words, Calibrator, CalibrationConfig, CalibrationMode, ModeInputs, TraceEntry};
use crate::corpus::{
    encode_all, extract_bias_words, generate_synthetic_corpus, split_dataset, Attribute, AttributeRegistry, BiasWords,
    Document, LabeledText, Prompt, TemplateTag, TokenId, Vocab,
};
use crate::checkpoint::Checkpoint;
use crate::judge::{BiasClassifier, ClassifierReport, DebiasHead};
use crate::lm::{
    generate_vanilla, perplexity, train_lm, train_ngram, GenerationMode, GenerationRecord, LmConfig, LmTrainReport,
    NGramLm, TransformerLm,
};
use crate::metrics::{evaluate_attribute, AttributeBias, NaiveSwap, TradeoffRow};
use crate::seed::{derive_seed, key_index};
use crate::{DebiasError, Result};

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.json";
    pub const CORPUS: &str = "corpus.tsv";
    pub const VOCAB: &str = "vocab.txt";
    pub const LM: &str = "lm.ckpt";
    pub const LM_REPORT: &str = "lm_report.json";
    pub const JUDGE_REPORT: &str = "judge_report.json";
    pub const HEAD_REPORT: &str = "head_report.json";
    pub const JUDGE: &str = "judge.ckpt";
    pub const HEAD: &str = "head.ckpt";
    pub const BIAS_WORDS: &str = "bias_words.json";
    pub const GENERATIONS: &str = "generations";
    pub const TRACES: &str = "traces";
    pub const BIAS: &str = "bias.json";
    pub const TRADEOFF: &str = "tradeoff.json";
    pub const REPORT: &str = "report";
}

/// Encoded corpus splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub test: Vec<Document>,
}

pub fn synth_corpus(config: &ExperimentConfig, registry: &AttributeRegistry) -> Result<(Vec<LabeledText>, Vocab)> {
    let mut corpus_cfg = config.corpus.clone();
    corpus_cfg.rng_seed = derive_seed(config.seed, "synth-corpus", 0);
    let docs = generate_synthetic_corpus(&corpus_cfg, registry)?;
    let vocab = Vocab::build(docs.iter().map(|d| d.text.as_str()))?;
    Ok((docs, vocab))
}

pub fn split_corpus(config: &ExperimentConfig, docs: &[LabeledText], vocab: &Vocab) -> Result<Splits> {
    let encoded = encode_all(docs, vocab, config.lm.context_length)?;
    let (train, valid, test) = split_dataset(&encoded, |d| d.label, config.split, derive_seed(config.seed, "split", 0))?;
    Ok(Splits { train, valid, test })
}

pub fn lm_config(config: &ExperimentConfig, vocab: &Vocab) -> LmConfig {
    LmConfig {
        vocab_size: vocab.len(),
        context_length: config.lm.context_length,
        width: config.lm.width,
        layers: config.lm.layers,
        heads: config.lm.heads,
        mlp_ratio: config.lm.mlp_ratio,
    }
}

pub fn train_language_model(config: &ExperimentConfig, vocab: &Vocab, splits: &Splits) -> Result<(TransformerLm, LmTrainReport)> {
    let mut tc = config.lm_train.clone();
    tc.seed = derive_seed(config.seed, "train-lm", 0);
    let (lm, report) = train_lm(&splits.train, &splits.valid, lm_config(config, vocab), &tc)?;
    if report.valid_losses.is_empty() {
        return Err(DebiasError::Diverged {
            step: report.diverged_at_step.unwrap_or(0),
        });
    }
    Ok((lm, report))
}

pub fn train_judge(config: &ExperimentConfig, vocab: &Vocab, splits: &Splits) -> Result<(BiasClassifier, ClassifierReport)> {
    let mut tc = config.judge.clone();
    tc.seed = derive_seed(config.seed, "train-judge", 0);
    BiasClassifier::train(vocab, &splits.train, &splits.valid, &splits.test, &tc)
}

pub fn train_debias_head(config: &ExperimentConfig, lm: &TransformerLm, splits: &Splits) -> Result<(DebiasHead, ClassifierReport)> {
    let mut tc = config.debias_head.clone();
    tc.seed = derive_seed(config.seed, "train-debias-head", 0);
    DebiasHead::train(lm, &splits.train, &splits.valid, &splits.test, config.head_prefix_stride, &tc)
}

pub fn bias_lexicon(config: &ExperimentConfig, vocab: &Vocab, splits: &Splits) -> Result<BiasWords> {
    extract_bias_words(&splits.train, vocab, config.bias_words_per_class)
}

/// Trained models and lexicons shared by every generation stage.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub registry: AttributeRegistry,
    pub vocab: Vocab,
    pub lm: TransformerLm,
    pub judge: BiasClassifier,
    pub head: DebiasHead,
    pub bias_words: BiasWords,
}

/// Quality figures gathered while building [`Artifacts`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub lm: LmTrainReport,
    pub judge: ClassifierReport,
    pub head: ClassifierReport,
}

impl Artifacts {
    /// Runs every training stage in memory.
    pub fn build(config: &ExperimentConfig, base: &Path) -> Result<(Self, TrainingSummary)> {
        let problems = config.validate(base);
        if !problems.is_empty() {
            return Err(DebiasError::Config(problems.join("; ")));
        }
        let registry = config.load_registry(base)?;
        let (docs, vocab) = synth_corpus(config, &registry)?;
        let splits = split_corpus(config, &docs, &vocab)?;
        let (lm, lm_report) = train_language_model(config, &vocab, &splits)?;
        let (judge, judge_report) = train_judge(config, &vocab, &splits)?;
        let (head, head_report) = train_debias_head(config, &lm, &splits)?;
        let bias_words = bias_lexicon(config, &vocab, &splits)?;
        Ok((
            Self {
                registry,
                vocab,
                lm,
                judge,
                head,
                bias_words,
            },
            TrainingSummary {
                lm: lm_report,
                judge: judge_report,
                head: head_report,
            },
        ))
    }

    /// Writes the vocabulary, checkpoints and lexicon under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DebiasError::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| DebiasError::io(p, e))
        };
        write(files::VOCAB, self.vocab.to_lines().as_bytes())?;
        self.lm.to_checkpoint().save(&dir.join(files::LM))?;
        self.judge.to_checkpoint().save(&dir.join(files::JUDGE))?;
        self.head.to_checkpoint().save(&dir.join(files::HEAD))?;
        let words = serde_json::to_string_pretty(&self.bias_words).expect("lexicon serializes");
        write(files::BIAS_WORDS, words.as_bytes())
    }

    /// Reads what [`Artifacts::save`] wrote.
    pub fn load(dir: &Path, registry: AttributeRegistry) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| DebiasError::io(p, e))
        };
        let vocab = Vocab::from_lines(&read(files::VOCAB)?)?;
        let lm = TransformerLm::from_checkpoint(Checkpoint::load(&dir.join(files::LM))?)?;
        let judge = BiasClassifier::from_checkpoint(Checkpoint::load(&dir.join(files::JUDGE))?)?;
        let head = DebiasHead::from_checkpoint(Checkpoint::load(&dir.join(files::HEAD))?)?;
        let bias_words = serde_json::from_str(&read(files::BIAS_WORDS)?).map_err(|e| DebiasError::Parse {
            path: dir.join(files::BIAS_WORDS),
            message: e.to_string(),
        })?;
        if lm.config().vocab_size != vocab.len() {
            return Err(DebiasError::Checkpoint("language model and vocabulary sizes differ".into()));
        }
        Ok(Self {
            registry,
            vocab,
            lm,
            judge,
            head,
            bias_words,
        })
    }

    pub fn attribute(&self, name: &str) -> Result<&Attribute> {
        self.registry
            .attribute(name)
            .ok_or_else(|| DebiasError::InvalidInput(format!("unknown attribute `{name}`")))
    }

    pub fn mode_inputs(&self, mode: CalibrationMode) -> Result<ModeInputs> {
        match mode {
            CalibrationMode::Emb => {
                let (l, c, _) = resolve_bias_words(&self.bias_words, &self.vocab);
                ModeInputs::emb(self.vocab.len(), l, c)
            }
            CalibrationMode::Cls => Ok(ModeInputs::cls(self.head.clone())),
        }
    }

    /// Judge score of a record's continuation, or of the whole text when the
    /// continuation is empty.
    pub fn score(&self, record: &GenerationRecord) -> Result<f64> {
        let cont = record.continuation();
        let ids = if cont.is_empty() { &record.token_ids[..] } else { cont };
        self.judge.judge_score(&self.vocab.detokenize(ids))
    }
}

/// One prompt instance of the generation protocol.
#[derive(Debug, Clone)]
pub struct PlanItem {
    pub prompt: Prompt,
    pub sample: usize,
    pub seed: u64,
    pub prompt_ids: Vec<TokenId>,
}

/// Every prompt of `attribute` (neutral and both ideology-injected tags),
/// each repeated `samples_per_prompt` times. Seeds depend on the prompt and
/// sample index but not on the decoding mode.
pub fn generation_plan(artifacts: &Artifacts, attribute: &str, samples_per_prompt: usize, seed: u64) -> Result<Vec<PlanItem>> {
    let mut plan = Vec::new();
    for tag in TemplateTag::ALL {
        for prompt in artifacts.registry.prompts(attribute, tag)? {
            let prompt_ids = artifacts.vocab.tokenize(&prompt.text);
            for sample in 0..samples_per_prompt {
                let key = format!(
                    "{}/{}/{}/{}/{}",
                    prompt.attribute, prompt.option, prompt.keyword, prompt.template_id, sample
                );
                plan.push(PlanItem {
                    prompt: prompt.clone(),
                    sample,
                    seed: derive_seed(seed, "generate", key_index(&key)),
                    prompt_ids: prompt_ids.clone(),
                });
            }
        }
    }
    Ok(plan)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| DebiasError::InvalidInput(format!("worker pool: {e}")))
}

/// Generates and scores the whole plan in `mode` (vanilla, emb or cls).
/// Records keep plan order; trace entries carry their plan index.
pub fn generate_records(
    artifacts: &Artifacts,
    plan: &[PlanItem],
    mode: GenerationMode,
    calibration: Option<&CalibrationConfig>,
    generation: &GenerationConfig,
) -> Result<(Vec<GenerationRecord>, Vec<TraceEntry>)> {
    let (inputs, cal_mode) = match (mode, calibration) {
        (GenerationMode::Vanilla, _) => (None, None),
        (GenerationMode::Emb, Some(c)) | (GenerationMode::Cls, Some(c)) => {
            let m = if mode == GenerationMode::Emb { CalibrationMode::Emb } else { CalibrationMode::Cls };
            if c.mode != m {
                return Err(DebiasError::Config(format!("calibration config is for mode {}, not {mode}", c.mode.as_str())));
            }
            (Some(artifacts.mode_inputs(m)?), Some(c))
        }
        (GenerationMode::Naive, _) => {
            return Err(DebiasError::InvalidInput("naive records are derived from vanilla ones".into()))
        }
        (_, None) => return Err(DebiasError::Config(format!("mode {mode} needs a calibration config"))),
    };
    let calibrator = match (&inputs, cal_mode) {
        (Some(i), Some(c)) => Some(Calibrator::new(&artifacts.lm, i, c)?),
        _ => None,
    };
    let lambda = cal_mode.map_or(0.0, |c| c.lambda0);
    let run = |(idx, item): (usize, &PlanItem)| -> Result<(GenerationRecord, Vec<TraceEntry>)> {
        let t = generation.max_new_tokens;
        let (cont, mut trace) = match &calibrator {
            None => (generate_vanilla(&artifacts.lm, &item.prompt_ids, t, &generation.decode, item.seed)?, Vec::new()),
            Some(c) => c.generate(&item.prompt_ids, t, &generation.decode, item.seed)?,
        };
        trace.iter_mut().for_each(|e| e.sample = idx);
        let mut token_ids = item.prompt_ids.clone();
        token_ids.extend(&cont);
        let mut record = GenerationRecord {
            attribute: item.prompt.attribute.clone(),
            option: item.prompt.option.clone(),
            keyword: item.prompt.keyword.clone(),
            template_id: item.prompt.template_id,
            ideology_tag: item.prompt.tag.into(),
            mode,
            lambda,
            rng_seed: item.seed,
            text: artifacts.vocab.detokenize(&token_ids),
            prompt_len: item.prompt_ids.len(),
            token_ids,
            judge_score: None,
        };
        record.judge_score = Some(artifacts.score(&record)?);
        Ok((record, trace))
    };
    let results: Vec<(GenerationRecord, Vec<TraceEntry>)> =
        pool(generation.jobs)?.install(|| plan.par_iter().enumerate().map(run).collect::<Result<Vec<_>>>())?;
    let mut records = Vec::with_capacity(results.len());
    let mut traces = Vec::new();
    for (r, t) in results {
        records.push(r);
        traces.extend(t);
    }
    Ok((records, traces))
}

/// Naive baseline: bias words in each vanilla continuation are swapped for
/// their nearest non-bias neighbours in the language model's embedding
/// space, then rescored.
pub fn naive_records(artifacts: &Artifacts, vanilla: &[GenerationRecord]) -> Result<Vec<GenerationRecord>> {
    let (l, c, _) = resolve_bias_words(&artifacts.bias_words, &artifacts.vocab);
    let ids: Vec<TokenId> = l.into_iter().chain(c).collect();
    let swap = NaiveSwap::new(artifacts.lm.token_embeddings(), &ids)?;
    vanilla
        .iter()
        .map(|r| {
            let mut out = r.clone();
            let cut = r.prompt_len.min(r.token_ids.len());
            out.token_ids = r.token_ids[..cut].iter().copied().chain(swap.apply(&r.token_ids[cut..])).collect();
            out.text = artifacts.vocab.detokenize(&out.token_ids);
            out.mode = GenerationMode::Naive;
            out.judge_score = Some(artifacts.score(&out)?);
            Ok(out)
        })
        .collect()
}

pub fn continuation_texts(vocab: &Vocab, records: &[GenerationRecord]) -> Vec<String> {
    records.iter().map(|r| vocab.detokenize(r.continuation())).collect()
}

/// The perplexity reference: an n-gram model of the vanilla continuations.
pub fn vanilla_ngram(config: &ExperimentConfig, vocab: &Vocab, vanilla: &[GenerationRecord]) -> Result<NGramLm> {
    train_ngram(&continuation_texts(vocab, vanilla), config.ngram.order, config.ngram.k)
}

/// Bias of one mode's records plus their perplexity under `reference`.
pub fn evaluate_mode(
    artifacts: &Artifacts,
    attribute: &str,
    mode: GenerationMode,
    records: &[GenerationRecord],
    reference: &NGramLm,
) -> Result<AttributeBias> {
    let attr = artifacts.attribute(attribute)?;
    let lambda = records.first().map_or(0.0, |r| r.lambda);
    let mut bias = evaluate_attribute(attr, mode, lambda, records)?;
    let own: Vec<GenerationRecord> = records.iter().filter(|r| r.attribute == attribute).cloned().collect();
    bias.ppl = Some(perplexity(reference, &continuation_texts(&artifacts.vocab, &own))?);
    Ok(bias)
}

/// Calibration settings for one trade-off row: cls mode with `λ` as both the
/// starting value and the cap.
pub fn tradeoff_calibration(base: &CalibrationConfig, lambda: f64) -> CalibrationConfig {
    let mut c = base.clone();
    c.lambda0 = lambda;
    c.lambda_max = lambda;
    c.lambda_min = c.lambda_min.min(lambda);
    c
}

/// One trade-off row per `λ`; `λ = 0` reuses the vanilla records.
pub fn tradeoff_sweep(
    artifacts: &Artifacts,
    config: &ExperimentConfig,
    attribute: &str,
    plan: &[PlanItem],
    vanilla: &[GenerationRecord],
    reference: &NGramLm,
) -> Result<Vec<(TradeoffRow, Vec<GenerationRecord>)>> {
    let mut rows = Vec::new();
    for &lambda in &config.lambda_grid {
        let (mode, records) = if lambda == 0.0 {
            (GenerationMode::Vanilla, vanilla.to_vec())
        } else {
            let cal = tradeoff_calibration(&config.calibration.cls, lambda);
            (
                GenerationMode::Cls,
                generate_records(artifacts, plan, GenerationMode::Cls, Some(&cal), &config.generation)?.0,
            )
        };
        let bias = evaluate_mode(artifacts, attribute, mode, &records, reference)?;
        rows.push((
            TradeoffRow {
                attribute: attribute.to_string(),
                lambda,
                indirect_bias: bias.overall_indirect,
                direct_bias: bias.overall_direct,
                ppl: bias.ppl.expect("evaluate_mode sets perplexity"),
            },
            records,
        ));
    }
    Ok(rows)
}
