use serde::{Deserialize, Serialize};

use super::wasserstein::w2_distance;
use crate::corpus::Attribute;
use crate::lm::{GenerationMode, GenerationRecord, IdeologyTag};
use crate::{DebiasError, Result};

fn scores<'r>(records: impl Iterator<Item = &'r GenerationRecord>) -> Result<Vec<f64>> {
    records
        .map(|r| {
            r.judge_score.ok_or_else(|| {
                DebiasError::InvalidInput(format!(
                    "generation for keyword `{}` (template {}) has no judge score",
                    r.keyword, r.template_id
                ))
            })
        })
        .collect()
}

fn check_coverage(attribute: &Attribute, records: &[&GenerationRecord]) -> Result<()> {
    for opt in &attribute.options {
        let missing: Vec<String> = opt
            .keywords
            .iter()
            .filter(|k| !records.iter().any(|r| r.option == opt.name && &r.keyword == *k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(DebiasError::MissingCoverage {
                option: opt.name.clone(),
                missing,
            });
        }
    }
    Ok(())
}

/// W2 distance between the base rate of `option`'s generations and the base
/// rate of all generations for the attribute (the option's own included).
/// Only records of `attribute` are considered.
pub fn indirect_bias(option: &str, attribute: &Attribute, generations: &[GenerationRecord]) -> Result<f64> {
    if attribute.option(option).is_none() {
        return Err(DebiasError::InvalidInput(format!(
            "attribute `{}` has no option `{option}`",
            attribute.name
        )));
    }
    let own: Vec<&GenerationRecord> = generations.iter().filter(|r| r.attribute == attribute.name).collect();
    check_coverage(attribute, &own)?;
    let x_o = scores(own.iter().copied().filter(|r| r.option == option))?;
    let x_all = scores(own.iter().copied())?;
    w2_distance(&x_o, &x_all)
}

/// `|B(L-prompted) − B(C-prompted)|`, symmetric in its two sets.
pub fn direct_bias(
    option: &str,
    attribute: &Attribute,
    generations_l: &[GenerationRecord],
    generations_c: &[GenerationRecord],
) -> Result<f64> {
    let bl = indirect_bias(option, attribute, generations_l)?;
    let bc = indirect_bias(option, attribute, generations_c)?;
    Ok((bl - bc).abs())
}

/// Unweighted mean of per-option values.
pub fn aggregate_overall(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DebiasError::InvalidInput("no option values to aggregate".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionBias {
    pub option: String,
    pub indirect: f64,
    pub direct: f64,
    pub samples: usize,
}

/// Bias of one generation run for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeBias {
    pub attribute: String,
    pub mode: GenerationMode,
    pub lambda: f64,
    pub options: Vec<OptionBias>,
    pub overall_indirect: f64,
    pub overall_direct: f64,
    pub ppl: Option<f64>,
}

/// Splits `records` by prompt tag (neutral prompts for indirect bias,
/// ideology-injected prompts for direct bias) and evaluates every option.
pub fn evaluate_attribute(
    attribute: &Attribute,
    mode: GenerationMode,
    lambda: f64,
    records: &[GenerationRecord],
) -> Result<AttributeBias> {
    let pick = |tag: IdeologyTag| -> Vec<GenerationRecord> {
        records
            .iter()
            .filter(|r| r.attribute == attribute.name && r.ideology_tag == tag)
            .cloned()
            .collect()
    };
    let (neutral, gl, gc) = (pick(IdeologyTag::None), pick(IdeologyTag::L), pick(IdeologyTag::C));
    let mut options = Vec::with_capacity(attribute.options.len());
    for opt in &attribute.options {
        options.push(OptionBias {
            option: opt.name.clone(),
            indirect: indirect_bias(&opt.name, attribute, &neutral)?,
            direct: direct_bias(&opt.name, attribute, &gl, &gc)?,
            samples: records
                .iter()
                .filter(|r| r.attribute == attribute.name && r.option == opt.name)
                .count(),
        });
    }
    let ind: Vec<f64> = options.iter().map(|o| o.indirect).collect();
    let dir: Vec<f64> = options.iter().map(|o| o.direct).collect();
    Ok(AttributeBias {
        attribute: attribute.name.clone(),
        mode,
        lambda,
        overall_indirect: aggregate_overall(&ind)?,
        overall_direct: aggregate_overall(&dir)?,
        options,
        ppl: None,
    })
}
