use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};

pub const QUESTION: &str = "{question}";
pub const CONTEXT: &str = "{context}";

/// Shipped French prompt for generation without retrieval.
pub const BASE_FR: &str = include_str!("../../prompts/base_fr.txt");
/// Shipped French prompt for retrieval-augmented generation.
pub const RAG_FR: &str = include_str!("../../prompts/rag_fr.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub mode: Mode,
    pub language: String,
    pub template: String,
}

impl PromptTemplate {
    pub fn new(mode: Mode, language: &str, template: &str) -> Result<Self> {
        let t = PromptTemplate {
            mode,
            language: language.to_string(),
            template: template.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn base_fr() -> Self {
        Self::new(Mode::BaseSlm, "fr", BASE_FR).expect("shipped template is valid")
    }

    pub fn rag_fr() -> Self {
        Self::new(Mode::Rag, "fr", RAG_FR).expect("shipped template is valid")
    }

    pub fn from_file(mode: Mode, language: &str, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(mode, language, &text)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.template.matches(QUESTION).count();
        let c = self.template.matches(CONTEXT).count();
        let expected_c = match self.mode {
            Mode::BaseSlm => 0,
            Mode::Rag => 1,
        };
        if q != 1 {
            return Err(Error::Template(format!(
                "expected exactly one {QUESTION} placeholder, found {q}"
            )));
        }
        if c != expected_c {
            return Err(Error::Template(format!(
                "{} template needs {expected_c} {CONTEXT} placeholder(s), found {c}",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Number of context items that made it into the prompt.
    pub context_used: usize,
    pub truncated: bool,
}

fn substitute(template: &str, question: &str, context: &str) -> String {
    // Single pass, so placeholder-like text inside the inputs is left alone.
    let mut out = String::with_capacity(template.len() + question.len() + context.len());
    let mut rest = template;
    loop {
        let q = rest.find(QUESTION);
        let c = rest.find(CONTEXT);
        let (pos, len, value) = match (q, c) {
            (Some(q), Some(c)) if c < q => (c, CONTEXT.len(), context),
            (Some(q), _) => (q, QUESTION.len(), question),
            (None, Some(c)) => (c, CONTEXT.len(), context),
            (None, None) => break,
        };
        out.push_str(&rest[..pos]);
        out.push_str(value);
        rest = &rest[pos + len..];
    }
    out.push_str(rest);
    out
}

/// Fills the template. Context items are joined by blank lines in the order
/// given (retrieval rank). With a `char_budget`, lowest-ranked items are
/// dropped until the prompt fits; if the top item alone overflows it is cut
/// at a character boundary.
pub fn render_prompt(
    tpl: &PromptTemplate,
    question: &str,
    context: Option<&[String]>,
    char_budget: Option<usize>,
) -> Result<RenderedPrompt> {
    tpl.validate()?;
    match (tpl.mode, context) {
        (Mode::BaseSlm, None) => {
            return Ok(RenderedPrompt {
                text: substitute(&tpl.template, question, ""),
                context_used: 0,
                truncated: false,
            })
        }
        (Mode::BaseSlm, Some(_)) => {
            return Err(Error::Template("base prompts take no context".into()))
        }
        (Mode::Rag, None) => return Err(Error::Template("rag prompts require context".into())),
        (Mode::Rag, Some([])) => {
            return Err(Error::Template(
                "rag prompts require at least one context item".into(),
            ))
        }
        (Mode::Rag, Some(_)) => {}
    }
    let items = context.expect("checked above");
    let fits = |text: &str| char_budget.is_none_or(|b| text.chars().count() <= b);

    for used in (1..=items.len()).rev() {
        let text = substitute(&tpl.template, question, &items[..used].join("\n\n"));
        if fits(&text) {
            return Ok(RenderedPrompt {
                text,
                context_used: used,
                truncated: used < items.len(),
            });
        }
    }
    let budget = char_budget.expect("unbounded budget always fits");
    let overhead = substitute(&tpl.template, question, "").chars().count();
    let room = budget.saturating_sub(overhead);
    let cut: String = items[0].chars().take(room).collect();
    Ok(RenderedPrompt {
        text: substitute(&tpl.template, question, &cut),
        context_used: 1,
        truncated: true,
    })
}
