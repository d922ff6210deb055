use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::registry::{fill_prompt, AttributeRegistry, TemplateTag};
use crate::corpus::{Label, LabeledText};
use crate::{DebiasError, Result};

/// Words that signal one ideology, with their share of marker slots in each
/// class of document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerSet {
    pub words: Vec<String>,
    pub rate_in_l: f64,
    pub rate_in_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub docs_per_class: usize,
    /// Tokens per document, prompt header included.
    pub doc_length: usize,
    pub neutral_vocab_size: usize,
    /// Strength in `[0, 1]` of the mild class preference each neutral word gets.
    pub neutral_class_skew: f64,
    /// Probability that a neutral word follows one of its predecessor's successors.
    pub neutral_chain_prob: f64,
    /// Fraction of body tokens drawn from the marker sets.
    pub marker_density: f64,
    pub liberal_markers: MarkerSet,
    pub conservative_markers: MarkerSet,
    /// Probability that a document opens with a filled writing prompt.
    pub header_rate: f64,
    /// Attributes whose templates may open a document; empty means all.
    pub header_attributes: Vec<String>,
    /// Share of prompt headers that use an ideology-injected template.
    pub direct_header_share: f64,
    /// Probability that an L document's injected header uses an L trigger.
    pub direct_fidelity_l: f64,
    /// Probability that a C document's injected header uses a C trigger.
    pub direct_fidelity_c: f64,
    /// `"attribute/option"` → probability that a document mentioning one of the
    /// option's keywords is liberal. Unlisted options default to 0.5.
    pub option_rates: BTreeMap<String, f64>,
    /// Per-keyword overrides of `option_rates`.
    pub keyword_rates: BTreeMap<String, f64>,
    /// Derived from the experiment seed when run through the pipeline.
    #[serde(skip)]
    pub rng_seed: u64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        let option_rates = [
            ("gender/male", 0.2),
            ("gender/female", 0.8),
            ("location/blue", 0.75),
            ("location/red", 0.25),
            ("location/leaning-blue", 0.6),
            ("location/leaning-red", 0.4),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            docs_per_class: 1200,
            doc_length: 40,
            neutral_vocab_size: 240,
            neutral_class_skew: 0.5,
            neutral_chain_prob: 0.6,
            marker_density: 0.2,
            liberal_markers: MarkerSet {
                words: words(&[
                    "progressive", "climate", "equality", "unions", "diversity", "renewable",
                    "inclusive", "activists", "medicaid", "refugees", "transit", "feminist",
                ]),
                rate_in_l: 0.9,
                rate_in_c: 0.1,
            },
            conservative_markers: MarkerSet {
                words: words(&[
                    "patriots", "liberty", "taxpayers", "faith", "sovereignty", "troops",
                    "heritage", "lawful", "constitution", "deregulation", "enterprise", "sheriffs",
                ]),
                rate_in_l: 0.1,
                rate_in_c: 0.9,
            },
            header_rate: 0.85,
            header_attributes: vec!["gender".to_string()],
            direct_header_share: 0.4,
            direct_fidelity_l: 0.6,
            direct_fidelity_c: 0.99,
            option_rates,
            keyword_rates: BTreeMap::new(),
            rng_seed: 17,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.docs_per_class == 0 {
            errs.push("corpus.docs_per_class must be positive".to_string());
        }
        if self.doc_length == 0 {
            errs.push("corpus.doc_length must be positive".to_string());
        }
        if self.neutral_vocab_size == 0 {
            errs.push("corpus.neutral_vocab_size must be positive".to_string());
        }
        let probs = [
            ("neutral_class_skew", self.neutral_class_skew),
            ("neutral_chain_prob", self.neutral_chain_prob),
            ("marker_density", self.marker_density),
            ("header_rate", self.header_rate),
            ("direct_header_share", self.direct_header_share),
            ("direct_fidelity_l", self.direct_fidelity_l),
            ("direct_fidelity_c", self.direct_fidelity_c),
            ("liberal_markers.rate_in_l", self.liberal_markers.rate_in_l),
            ("liberal_markers.rate_in_c", self.liberal_markers.rate_in_c),
            ("conservative_markers.rate_in_l", self.conservative_markers.rate_in_l),
            ("conservative_markers.rate_in_c", self.conservative_markers.rate_in_c),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("corpus.{name} must be in [0,1], got {p}"));
            }
        }
        for (k, p) in self.option_rates.iter().chain(&self.keyword_rates) {
            if !(0.0..=1.0).contains(p) {
                errs.push(format!("corpus rate for `{k}` must be in [0,1], got {p}"));
            }
        }
        if self.liberal_markers.words.is_empty() || self.conservative_markers.words.is_empty() {
            errs.push("corpus: both classes need at least one marker word".to_string());
        }
        for (label, m) in [(Label::L, &self.liberal_markers), (Label::C, &self.conservative_markers)] {
            if self.marker_density > 0.0 && m.rate_in_l + m.rate_in_c == 0.0 {
                errs.push(format!("corpus: {} markers are never emitted", label.as_str()));
            }
        }
        errs
    }

    /// Probability that a document mentioning `keyword` is liberal.
    pub fn keyword_rate(&self, attribute: &str, option: &str, keyword: &str) -> f64 {
        self.keyword_rates
            .get(keyword)
            .or_else(|| self.option_rates.get(&format!("{attribute}/{option}")))
            .copied()
            .unwrap_or(0.5)
    }
}

struct NeutralLexicon {
    words: Vec<String>,
    /// Per-class sampling weights, index 0 = L.
    weights: [Vec<f64>; 2],
    successors: Vec<[usize; 3]>,
}

fn pseudo_words(n: usize, taken: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut seen = taken.clone();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl NeutralLexicon {
    fn new(config: &SyntheticCorpusConfig, taken: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> Self {
        let n = config.neutral_vocab_size;
        let words = pseudo_words(n, taken, rng);
        let mut wl = Vec::with_capacity(n);
        let mut wc = Vec::with_capacity(n);
        for rank in 0..n {
            let base = 1.0 / ((rank + 1) as f64).powf(0.8);
            let skew: f64 = rng.gen_range(-1.0..1.0) * config.neutral_class_skew;
            wl.push(base * (1.0 + skew));
            wc.push(base * (1.0 - skew));
        }
        let successors = (0..n)
            .map(|_| [rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n)])
            .collect();
        Self {
            words,
            weights: [wl, wc],
            successors,
        }
    }

    fn sample(&self, label: Label, prev: Option<usize>, chain_prob: f64, rng: &mut ChaCha8Rng) -> usize {
        if let Some(p) = prev {
            if rng.gen_bool(chain_prob) {
                return self.successors[p][rng.gen_range(0..3)];
            }
        }
        weighted_index(&self.weights[label.index()], rng)
    }
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates `docs_per_class` documents per ideology with planted markers
/// and keyword/ideology co-occurrence. Deterministic in `rng_seed`.
pub fn generate_synthetic_corpus(
    config: &SyntheticCorpusConfig,
    registry: &AttributeRegistry,
) -> Result<Vec<LabeledText>> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(DebiasError::Config(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let mut taken: BTreeSet<String> = BTreeSet::new();
    for m in [&config.liberal_markers, &config.conservative_markers] {
        taken.extend(m.words.iter().cloned());
    }
    for a in &registry.attributes {
        for t in &a.templates {
            taken.extend(t.text.split_whitespace().map(str::to_string));
        }
        for o in &a.options {
            for k in &o.keywords {
                taken.extend(k.split_whitespace().map(str::to_string));
            }
        }
    }
    let lexicon = NeutralLexicon::new(config, &taken, &mut rng);
    for name in &config.header_attributes {
        if registry.attribute(name).is_none() {
            return Err(DebiasError::Config(format!("corpus.header_attributes: unknown attribute `{name}`")));
        }
    }

    // Keyword sampling weights per attribute and class.
    let keyword_table: Vec<Vec<(String, [f64; 2])>> = registry
        .attributes
        .iter()
        .map(|a| {
            a.options
                .iter()
                .flat_map(|o| {
                    o.keywords.iter().map(move |k| {
                        let r = config.keyword_rate(&a.name, &o.name, k);
                        (k.clone(), [r, 1.0 - r])
                    })
                })
                .collect()
        })
        .collect();

    let mut docs = Vec::with_capacity(2 * config.docs_per_class);
    for label in [Label::L, Label::C] {
        for _ in 0..config.docs_per_class {
            let mut tokens: Vec<String> = Vec::with_capacity(config.doc_length);
            if rng.gen_bool(config.header_rate) {
                if let Some(header) = sample_header(config, registry, &keyword_table, label, &mut rng)? {
                    tokens.extend(header.split_whitespace().map(str::to_string));
                }
            }
            let mut prev = None;
            while tokens.len() < config.doc_length {
                if rng.gen_bool(config.marker_density) {
                    let set = sample_marker_set(config, label, &mut rng);
                    tokens.push(set.words.choose(&mut rng).expect("validated non-empty").clone());
                    prev = None;
                } else {
                    let w = lexicon.sample(label, prev, config.neutral_chain_prob, &mut rng);
                    tokens.push(lexicon.words[w].clone());
                    prev = Some(w);
                }
            }
            tokens.truncate(config.doc_length);
            docs.push(LabeledText {
                label,
                text: tokens.join(" "),
            });
        }
    }
    Ok(docs)
}

fn sample_marker_set<'a>(config: &'a SyntheticCorpusConfig, label: Label, rng: &mut ChaCha8Rng) -> &'a MarkerSet {
    let (l, c) = (&config.liberal_markers, &config.conservative_markers);
    let (wl, wc) = match label {
        Label::L => (l.rate_in_l, c.rate_in_l),
        Label::C => (l.rate_in_c, c.rate_in_c),
    };
    if wl + wc == 0.0 || rng.gen_range(0.0..wl + wc) < wl {
        l
    } else {
        c
    }
}

fn sample_header(
    config: &SyntheticCorpusConfig,
    registry: &AttributeRegistry,
    keyword_table: &[Vec<(String, [f64; 2])>],
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Result<Option<String>> {
    let usable: Vec<usize> = (0..registry.attributes.len())
        .filter(|&i| {
            config.header_attributes.is_empty() || config.header_attributes.contains(&registry.attributes[i].name)
        })
        .filter(|&i| keyword_table[i].iter().any(|(_, w)| w[label.index()] > 0.0))
        .collect();
    let Some(&attr_idx) = usable.choose(rng) else {
        return Ok(None);
    };
    let attribute = &registry.attributes[attr_idx];
    let weights: Vec<f64> = keyword_table[attr_idx].iter().map(|(_, w)| w[label.index()]).collect();
    let keyword = &keyword_table[attr_idx][weighted_index(&weights, rng)].0;

    let tag = if rng.gen_bool(config.direct_header_share) {
        let fidelity = match label {
            Label::L => config.direct_fidelity_l,
            Label::C => config.direct_fidelity_c,
        };
        let own = if rng.gen_bool(fidelity) { label } else { label.flipped() };
        match own {
            Label::L => TemplateTag::DirectL,
            Label::C => TemplateTag::DirectC,
        }
    } else {
        TemplateTag::Indirect
    };
    let templates: Vec<_> = attribute.templates_tagged(tag).map(|(_, t)| t).collect();
    let template = templates.choose(rng).expect("registry validated");
    fill_prompt(&template.text, keyword).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            docs_per_class: 100,
            ..Default::default()
        }
    }

    #[test]
    fn count_contract() {
        let docs = generate_synthetic_corpus(&small(), &AttributeRegistry::builtin()).unwrap();
        assert_eq!(docs.len(), 200);
        assert_eq!(docs.iter().filter(|d| d.label == Label::L).count(), 100);
        assert!(docs.iter().all(|d| d.text.split_whitespace().count() == 40));
    }

    #[test]
    fn same_seed_same_corpus() {
        let reg = AttributeRegistry::builtin();
        assert_eq!(
            generate_synthetic_corpus(&small(), &reg).unwrap(),
            generate_synthetic_corpus(&small(), &reg).unwrap()
        );
        let other = SyntheticCorpusConfig { rng_seed: 99, ..small() };
        assert_ne!(
            generate_synthetic_corpus(&small(), &reg).unwrap(),
            generate_synthetic_corpus(&other, &reg).unwrap()
        );
    }

    #[test]
    fn degenerate_rate_pins_keyword_to_class() {
        let mut cfg = small();
        cfg.keyword_rates.insert("Jake".into(), 1.0);
        cfg.header_rate = 1.0;
        let docs = generate_synthetic_corpus(&cfg, &AttributeRegistry::builtin()).unwrap();
        let with_jake: Vec<_> = docs
            .iter()
            .filter(|d| d.text.split_whitespace().any(|w| w == "Jake"))
            .collect();
        assert!(!with_jake.is_empty());
        assert!(with_jake.iter().all(|d| d.label == Label::L));
    }

    #[test]
    fn zero_docs_or_vocab_is_an_error() {
        let reg = AttributeRegistry::builtin();
        let cfg = SyntheticCorpusConfig { docs_per_class: 0, ..small() };
        assert!(generate_synthetic_corpus(&cfg, &reg).is_err());
        let cfg = SyntheticCorpusConfig { neutral_vocab_size: 0, ..small() };
        assert!(generate_synthetic_corpus(&cfg, &reg).is_err());
    }

    #[test]
    fn validation_collects_every_violation() {
        let cfg = SyntheticCorpusConfig {
            marker_density: 1.5,
            header_rate: -0.1,
            ..small()
        };
        assert_eq!(cfg.validate().len(), 2);
    }
}
