use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::{DebiasError, Result};

/// Slot markers recognized in templates. The registry file uses `[ATTR]`;
/// the single-letter forms are accepted for hand-written templates.
pub const PLACEHOLDERS: [&str; 4] = ["[ATTR]", "[G]", "[L]", "[T]"];

const DEFAULT_REGISTRY: &str = include_str!("../../data/registry.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateTag {
    #[serde(rename = "indirect")]
    Indirect,
    #[serde(rename = "direct-L")]
    DirectL,
    #[serde(rename = "direct-C")]
    DirectC,
}

impl TemplateTag {
    /// Ideology carried by the prompt, if any.
    pub fn ideology(self) -> Option<Label> {
        match self {
            TemplateTag::Indirect => None,
            TemplateTag::DirectL => Some(Label::L),
            TemplateTag::DirectC => Some(Label::C),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateTag::Indirect => "indirect",
            TemplateTag::DirectL => "direct-L",
            TemplateTag::DirectC => "direct-C",
        }
    }

    pub const ALL: [TemplateTag; 3] = [TemplateTag::Indirect, TemplateTag::DirectL, TemplateTag::DirectC];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub tag: TemplateTag,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub name: String,
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub options: Vec<OptionSpec>,
    pub templates: Vec<Template>,
}

impl Attribute {
    pub fn option(&self, name: &str) -> Option<&OptionSpec> {
        self.options.iter().find(|o| o.name == name)
    }

    /// Templates with the given tag, paired with their index in `templates`.
    pub fn templates_tagged(&self, tag: TemplateTag) -> impl Iterator<Item = (usize, &Template)> {
        self.templates.iter().enumerate().filter(move |(_, t)| t.tag == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRegistry {
    pub attributes: Vec<Attribute>,
}

/// A filled writing prompt and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub attribute: String,
    pub option: String,
    pub keyword: String,
    pub template_id: usize,
    pub tag: TemplateTag,
    pub text: String,
}

fn count_placeholders(text: &str) -> usize {
    PLACEHOLDERS.iter().map(|p| text.matches(p).count()).sum()
}

/// Substitutes `keyword` for the single placeholder in `template`.
pub fn fill_prompt(template: &str, keyword: &str) -> Result<String> {
    let found = count_placeholders(template);
    if found != 1 {
        return Err(DebiasError::Placeholder {
            template: template.to_string(),
            found,
        });
    }
    let slot = PLACEHOLDERS
        .iter()
        .find(|p| template.contains(*p))
        .expect("one placeholder present");
    Ok(template.replacen(slot, keyword, 1))
}

impl AttributeRegistry {
    /// The bundled registry with the three studied attributes.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REGISTRY, Path::new("<builtin registry>"))
            .expect("bundled registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DebiasError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let reg: AttributeRegistry = toml::from_str(text).map_err(|e| DebiasError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let problems = reg.validate();
        if !problems.is_empty() {
            return Err(DebiasError::Parse {
                path: origin.to_path_buf(),
                message: problems.join("; "),
            });
        }
        Ok(reg)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.attributes.is_empty() {
            problems.push("registry has no attributes".to_string());
        }
        for a in &self.attributes {
            if a.options.is_empty() {
                problems.push(format!("attribute `{}` has no options", a.name));
            }
            for o in &a.options {
                if o.keywords.is_empty() {
                    problems.push(format!("option `{}/{}` has no keywords", a.name, o.name));
                }
            }
            for tag in TemplateTag::ALL {
                if a.templates_tagged(tag).next().is_none() {
                    problems.push(format!("attribute `{}` has no {} template", a.name, tag.as_str()));
                }
            }
            for t in &a.templates {
                let n = count_placeholders(&t.text);
                if n != 1 {
                    problems.push(format!(
                        "template `{}` of `{}` has {n} placeholders",
                        t.text, a.name
                    ));
                }
            }
        }
        problems
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn all_keywords(&self) -> impl Iterator<Item = (&Attribute, &OptionSpec, &String)> {
        self.attributes.iter().flat_map(|a| {
            a.options
                .iter()
                .flat_map(move |o| o.keywords.iter().map(move |k| (a, o, k)))
        })
    }

    /// Every filled prompt of `attribute` with the given tag, in registry order
    /// (options, then keywords, then templates).
    pub fn prompts(&self, attribute: &str, tag: TemplateTag) -> Result<Vec<Prompt>> {
        let a = self
            .attribute(attribute)
            .ok_or_else(|| DebiasError::InvalidInput(format!("unknown attribute `{attribute}`")))?;
        let mut out = Vec::new();
        for o in &a.options {
            for k in &o.keywords {
                for (template_id, t) in a.templates_tagged(tag) {
                    out.push(Prompt {
                        attribute: a.name.clone(),
                        option: o.name.clone(),
                        keyword: k.clone(),
                        template_id,
                        tag,
                        text: fill_prompt(&t.text, k)?,
                    });
                }
            }
        }
        Ok(out)
    }
}
