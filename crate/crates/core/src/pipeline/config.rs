use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationConfig, CalibrationMode};
use crate::corpus::{AttributeRegistry, SplitRatios, SyntheticCorpusConfig, TemplateTag};
use crate::judge::ClassifierTrainConfig;
use crate::lm::{DecodeConfig, LmTrainConfig};

/// Transformer dimensions; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmDims {
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        Self {
            context_length: 128,
            width: 64,
            layers: 2,
            heads: 2,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub samples_per_prompt: usize,
    pub decode: DecodeConfig,
    pub jobs: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            samples_per_prompt: 4,
            decode: DecodeConfig::default(),
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramConfig {
    pub order: usize,
    pub k: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self { order: 3, k: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub emb: CalibrationConfig,
    pub cls: CalibrationConfig,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            emb: CalibrationConfig::new(CalibrationMode::Emb),
            cls: CalibrationConfig::new(CalibrationMode::Cls),
        }
    }
}

impl CalibrationSection {
    pub fn for_mode(&self, mode: CalibrationMode) -> &CalibrationConfig {
        match mode {
            CalibrationMode::Emb => &self.emb,
            CalibrationMode::Cls => &self.cls,
        }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Attribute registry file; the built-in registry when absent. Relative
    /// paths resolve against the config file's directory.
    pub registry: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Attributes whose bias is generated and evaluated.
    pub attributes: Vec<String>,
    pub bias_words_per_class: usize,
    /// Prefix stride for the debias head's training states.
    pub head_prefix_stride: usize,
    pub lambda_grid: Vec<f64>,
    pub corpus: SyntheticCorpusConfig,
    pub split: SplitRatios,
    pub lm: LmDims,
    pub lm_train: LmTrainConfig,
    pub judge: ClassifierTrainConfig,
    pub debias_head: ClassifierTrainConfig,
    pub generation: GenerationConfig,
    pub calibration: CalibrationSection,
    pub ngram: NGramConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            registry: None,
            out_dir: None,
            attributes: vec!["gender".into()],
            bias_words_per_class: 20,
            head_prefix_stride: 4,
            lambda_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            corpus: SyntheticCorpusConfig::default(),
            split: SplitRatios::default(),
            lm: LmDims::default(),
            lm_train: LmTrainConfig::default(),
            judge: ClassifierTrainConfig::default(),
            debias_head: ClassifierTrainConfig::default(),
            generation: GenerationConfig::default(),
            calibration: CalibrationSection::default(),
            ngram: NGramConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads the configured registry, or the built-in one.
    pub fn load_registry(&self, base: &Path) -> crate::Result<AttributeRegistry> {
        match &self.registry {
            None => Ok(AttributeRegistry::builtin()),
            Some(p) => AttributeRegistry::load(&base.join(p)),
        }
    }

    /// Every violated invariant across all sections. `base` resolves a
    /// relative registry path.
    pub fn validate(&self, base: &Path) -> Vec<String> {
        let mut errs = Vec::new();
        let registry = match self.load_registry(base) {
            Ok(r) => Some(r),
            Err(e) => {
                errs.push(format!("registry: {e}"));
                None
            }
        };
        if self.attributes.is_empty() {
            errs.push("attributes must name at least one attribute".into());
        }
        if let Some(reg) = &registry {
            for a in &self.attributes {
                if reg.attribute(a).is_none() {
                    errs.push(format!("attribute `{a}` is not in the registry"));
                }
            }
        }
        let headers = &self.corpus.header_attributes;
        for a in &self.attributes {
            if !headers.is_empty() && !headers.contains(a) {
                errs.push(format!("attribute `{a}` is evaluated but never appears in corpus.header_attributes"));
            }
        }
        if self.bias_words_per_class == 0 {
            errs.push("bias_words_per_class must be >= 1".into());
        }
        if self.head_prefix_stride == 0 {
            errs.push("head_prefix_stride must be >= 1".into());
        }
        if self.lambda_grid.is_empty() {
            errs.push("lambda_grid must not be empty".into());
        }
        for l in &self.lambda_grid {
            if !(0.0..=1.0).contains(l) {
                errs.push(format!("lambda_grid value {l} must be in [0,1]"));
            }
        }
        errs.extend(self.corpus.validate().into_iter().map(|e| format!("corpus: {e}")));
        errs.extend(self.split.validate().into_iter().map(|e| format!("split: {e}")));
        let dims = crate::lm::LmConfig {
            vocab_size: 4,
            context_length: self.lm.context_length,
            width: self.lm.width,
            layers: self.lm.layers,
            heads: self.lm.heads,
            mlp_ratio: self.lm.mlp_ratio,
        };
        errs.extend(dims.validate());
        if self.lm.context_length < self.corpus.doc_length {
            errs.push(format!(
                "lm.context_length {} is shorter than corpus.doc_length {}",
                self.lm.context_length, self.corpus.doc_length
            ));
        }
        errs.extend(self.lm_train.validate());
        errs.extend(self.judge.validate("judge"));
        errs.extend(self.debias_head.validate("debias_head"));
        let g = &self.generation;
        if g.samples_per_prompt == 0 {
            errs.push("generation.samples_per_prompt must be >= 1".into());
        }
        if g.jobs == 0 {
            errs.push("generation.jobs must be >= 1".into());
        }
        errs.extend(g.decode.validate());
        if let Some(reg) = &registry {
            let longest = reg
                .attributes
                .iter()
                .filter(|a| self.attributes.contains(&a.name))
                .flat_map(|a| {
                    TemplateTag::ALL.into_iter().flat_map(move |t| reg.prompts(&a.name, t).unwrap_or_default())
                })
                .map(|p| p.text.split_whitespace().count())
                .max()
                .unwrap_or(0);
            if longest + g.max_new_tokens > self.lm.context_length {
                errs.push(format!(
                    "longest prompt ({longest} tokens) plus generation.max_new_tokens {} exceeds lm.context_length {}",
                    g.max_new_tokens, self.lm.context_length
                ));
            }
        }
        for (name, c) in [("emb", &self.calibration.emb), ("cls", &self.calibration.cls)] {
            errs.extend(c.validate().into_iter().map(|e| format!("calibration.{name}: {e}")));
        }
        if self.calibration.emb.mode != CalibrationMode::Emb || self.calibration.cls.mode != CalibrationMode::Cls {
            errs.push("calibration sections must carry their own mode".into());
        }
        if self.ngram.order == 0 {
            errs.push("ngram.order must be >= 1".into());
        }
        if !(self.ngram.k >= 0.0 && self.ngram.k.is_finite()) {
            errs.push("ngram.k must be >= 0".into());
        }
        errs
    }
}

/// Reads, parses and validates a config file, returning every problem found.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let config = ExperimentConfig::from_toml(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let base = path.parent().unwrap_or(Path::new("."));
    let errs = config.validate(base);
    if errs.is_empty() {
        Ok(config)
    } else {
        Err(errs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes_and_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(c.validate(Path::new(".")), Vec::<String>::new());
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn gamma_out_of_range_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let mut c = ExperimentConfig::default();
        c.calibration.cls.gamma = 1.2;
        std::fs::write(&p, c.to_toml()).unwrap();
        let errs = validate_config(&p).unwrap_err();
        assert_eq!(errs, vec!["calibration.cls: gamma must be in (0,1)".to_string()]);
    }

    #[test]
    fn two_violations_give_two_errors() {
        let mut c = ExperimentConfig::default();
        c.calibration.emb.gamma = 0.0;
        c.generation.samples_per_prompt = 0;
        assert_eq!(c.validate(Path::new(".")).len(), 2);
    }

    #[test]
    fn missing_registry_names_the_path() {
        let c = ExperimentConfig {
            registry: Some("nowhere/registry.toml".into()),
            ..Default::default()
        };
        let errs = c.validate(Path::new("/tmp"));
        assert!(errs.iter().any(|e| e.contains("nowhere/registry.toml")), "{errs:?}");
    }

    #[test]
    fn unreadable_file_is_an_error() {
        assert!(validate_config(Path::new("/definitely/not/here.toml")).is_err());
    }
}
