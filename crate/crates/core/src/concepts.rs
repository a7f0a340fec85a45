//! Per-category concept lists, captions, and the concept-elicitation prompt.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DealError, Result};

pub const CATEGORY_PLACEHOLDER: &str = "[CATEGORY]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryConcepts {
    pub name: String,
    pub concepts: Vec<String>,
}

/// Ordered categories, each with its `K ≥ 1` distinct concepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSet {
    pub categories: Vec<CategoryConcepts>,
}

impl ConceptSet {
    pub fn new(categories: Vec<CategoryConcepts>) -> Result<Self> {
        let set = ConceptSet { categories };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for cat in &self.categories {
            let fail = |msg: &str| DealError::ConceptValidation {
                category: cat.name.clone(),
                msg: msg.to_string(),
            };
            if cat.name.trim().is_empty() {
                return Err(fail("empty category name"));
            }
            if !names.insert(cat.name.as_str()) {
                return Err(fail("category listed twice"));
            }
            if cat.concepts.is_empty() {
                return Err(fail("no concepts"));
            }
            let mut seen = HashSet::new();
            for c in &cat.concepts {
                if c.trim().is_empty() {
                    return Err(fail("empty concept string"));
                }
                if !seen.insert(c.as_str()) {
                    return Err(fail(&format!("duplicate concept {c:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == category)
    }

    pub fn get(&self, category: &str) -> Option<&CategoryConcepts> {
        self.categories.iter().find(|c| c.name == category)
    }

    /// Every distinct concept string, in first-appearance order.
    pub fn unique_concepts(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.categories
            .iter()
            .flat_map(|c| c.concepts.iter())
            .filter(|c| seen.insert(c.as_str()))
            .map(String::as_str)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("concept set serializes");
        s.push('\n');
        s
    }
}

pub fn parse_concepts(text: &str, origin: &str) -> Result<ConceptSet> {
    let set: ConceptSet = serde_json::from_str(text).map_err(|e| DealError::ConceptParse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    set.validate()?;
    Ok(set)
}

pub fn load_concepts(path: &Path) -> Result<ConceptSet> {
    let text = fs::read_to_string(path).map_err(DealError::io(path))?;
    parse_concepts(&text, &path.display().to_string())
}

pub fn save_concepts(set: &ConceptSet, path: &Path) -> Result<()> {
    fs::write(path, set.to_json()).map_err(DealError::io(path))
}

/// `"An image of {category} with c1, c2, …, and cK"`.
pub fn build_caption(category: &str, concepts: &[String]) -> Result<String> {
    let list = match concepts {
        [] => {
            return Err(DealError::ConceptValidation {
                category: category.to_string(),
                msg: "caption needs at least one concept".into(),
            })
        }
        [only] => only.clone(),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    };
    Ok(format!("An image of {category} with {list}"))
}

/// Two-line question/answer prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub question: String,
    pub answer_prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            question: "Q: What are the discriminative visual features with minimum overlap for identifying a [CATEGORY] in an image?".into(),
            answer_prefix: "A: The discriminative visual features that identify a [CATEGORY] in an image are:".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, category: &str) -> Result<String> {
        if category.trim().is_empty() {
            return Err(DealError::ConceptValidation {
                category: category.to_string(),
                msg: "prompt needs a non-empty category".into(),
            });
        }
        Ok(format!(
            "{}\n{}",
            self.question.replace(CATEGORY_PLACEHOLDER, category),
            self.answer_prefix.replace(CATEGORY_PLACEHOLDER, category)
        ))
    }
}

pub fn build_llm_prompt(category: &str) -> Result<String> {
    PromptTemplate::default().render(category)
}

/// The texts a sample is explained against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionVariants {
    pub category_only: String,
    pub per_concept: Vec<String>,
    pub full_caption: String,
}

pub fn caption_variants(category: &str, concepts: &[String]) -> Result<CaptionVariants> {
    Ok(CaptionVariants {
        category_only: category.to_string(),
        per_concept: concepts.to_vec(),
        full_caption: build_caption(category, concepts)?,
    })
}
