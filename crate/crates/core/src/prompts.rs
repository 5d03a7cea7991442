//! Versioned prompt templates.
//!
//! Templates use `{name}` placeholders. `{images}` expands to one
//! `Image i [img]` line per image and `{candidates}` to one `i: {candidate_answer_i}`
//! line per candidate; substitution is single-pass, so inserted text is never
//! re-interpreted as a placeholder.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PROMPT_VERSION: &str = "v1";

const NAMES: [&str; 7] = [
    "system",
    "evidence",
    "visual_qa",
    "view_selection",
    "verification",
    "answer",
    "llm_match",
];

/// Appended to a request whose reply could not be parsed.
pub const REPROMPT_INDEX: &str = "\n\nYour previous reply could not be parsed. Reply with a single integer index only.";
pub const REPROMPT_ANSWER: &str =
    "\n\nYour previous reply did not follow the output format. Start your reply with \"Image i\" on its own line, then the answer.";
pub const REPROMPT_GRADE: &str =
    "\n\nYour previous reply could not be parsed. Reply with a single integer between 1 and 5 only.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    templates: HashMap<&'static str, String>,
}

impl Default for Prompts {
    fn default() -> Self {
        let builtin = [
            include_str!("../assets/prompts/v1/system.txt"),
            include_str!("../assets/prompts/v1/evidence.txt"),
            include_str!("../assets/prompts/v1/visual_qa.txt"),
            include_str!("../assets/prompts/v1/view_selection.txt"),
            include_str!("../assets/prompts/v1/verification.txt"),
            include_str!("../assets/prompts/v1/answer.txt"),
            include_str!("../assets/prompts/v1/llm_match.txt"),
        ];
        Prompts {
            templates: NAMES
                .iter()
                .zip(builtin)
                .map(|(n, t)| (*n, t.trim_end().to_string()))
                .collect(),
        }
    }
}

impl Prompts {
    /// Built-in templates, overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Validation(format!(
                "prompt directory {} does not exist",
                dir.display()
            )));
        }
        let mut p = Prompts::default();
        for name in NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                p.templates.insert(name, text.trim_end().to_string());
            }
        }
        Ok(p)
    }

    fn get(&self, name: &str) -> &str {
        &self.templates[name]
    }

    pub fn system(&self) -> &str {
        self.get("system")
    }

    pub fn evidence(&self, question: &str, vocab: &[String], k: usize) -> String {
        fill(
            self.get("evidence"),
            &[
                ("question", question),
                ("categories", &vocab.join(", ")),
                ("k", &k.to_string()),
            ],
        )
    }

    pub fn visual_qa(&self, question: &str, n_images: usize) -> String {
        let t = self.get("visual_qa").replace("{images}", &image_lines(n_images));
        fill(&t, &[("question", question)])
    }

    pub fn view_selection(&self, question: &str, answers: &[String]) -> String {
        self.with_candidates("view_selection", question, answers)
    }

    pub fn verification(&self, question: &str, initial: &str, adjusted: &str) -> String {
        self.with_candidates("verification", question, &[initial.to_string(), adjusted.to_string()])
    }

    pub fn answer(&self, question: &str, n_images: usize) -> String {
        let t = self.get("answer").replace("{images}", &image_lines(n_images));
        fill(&t, &[("question", question)])
    }

    pub fn llm_match(&self, question: &str, answer: &str, response: &str) -> String {
        fill(
            self.get("llm_match"),
            &[("question", question), ("answer", answer), ("response", response)],
        )
    }

    fn with_candidates(&self, name: &str, question: &str, answers: &[String]) -> String {
        let lines: Vec<String> = (0..answers.len())
            .map(|i| format!("{i}: {{candidate_answer_{i}}}"))
            .collect();
        let t = self.get(name).replace("{candidates}", &lines.join("\n"));
        let keys: Vec<String> = (0..answers.len()).map(|i| format!("candidate_answer_{i}")).collect();
        let mut vars: Vec<(&str, &str)> = vec![("question", question)];
        vars.extend(keys.iter().map(String::as_str).zip(answers.iter().map(String::as_str)));
        fill(&t, &vars)
    }
}

fn image_lines(n: usize) -> String {
    (0..n)
        .map(|i| format!("Image {i} [img]"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Single-pass `{name}` substitution; unknown placeholders are left verbatim.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let key = &after[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(key);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
