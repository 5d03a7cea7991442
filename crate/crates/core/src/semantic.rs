//! Evidence extraction and Gaussian activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway};
use crate::prompts::Prompts;
use crate::scene::{GaussianId, Scene};
use crate::sidecar::EmbeddingMatrix;

/// Categories a language model picked as evidence for a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceQuery {
    pub question: String,
    /// Vocabulary indices, most useful first, at most `k` of them.
    pub selected: Vec<usize>,
    pub k: usize,
}

impl EvidenceQuery {
    pub fn new(question: &str, selected: Vec<usize>, k: usize) -> Result<Self> {
        if selected.len() > k {
            return Err(Error::Validation(format!(
                "{} categories selected, cap is {k}",
                selected.len()
            )));
        }
        Ok(EvidenceQuery {
            question: question.to_string(),
            selected,
            k,
        })
    }

    pub fn names<'a>(&self, vocab: &'a [String]) -> Vec<&'a str> {
        self.selected.iter().map(|&c| vocab[c].as_str()).collect()
    }
}

/// Maps a free-text reply onto vocabulary indices: tokens are split on commas,
/// semicolons and newlines, matched case-insensitively, de-duplicated and capped at `k`.
pub fn parse_evidence(reply: &str, vocab: &[String], k: usize) -> Vec<usize> {
    let lowered: Vec<String> = vocab.iter().map(|v| v.trim().to_lowercase()).collect();
    let mut out = Vec::new();
    for token in reply.split([',', ';', '\n']) {
        if out.len() == k {
            break;
        }
        let token = token
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')' || c == '-' || c == '*')
            .trim_matches(|c: char| c.is_whitespace() || "\"'`.*".contains(c))
            .to_lowercase();
        if token.is_empty() {
            continue;
        }
        if let Some(idx) = lowered.iter().position(|v| *v == token) {
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
    }
    out
}

/// Asks the evidence model for up to `k` helpful categories.
pub fn extract_evidence_categories(
    gateway: &Gateway,
    prompts: &Prompts,
    question: &str,
    vocab: &[String],
    k: usize,
) -> Result<EvidenceQuery> {
    if vocab.is_empty() {
        return Err(Error::Validation("category vocabulary is empty".into()));
    }
    if k == 0 {
        return Err(Error::Validation("evidence cap k must be at least 1".into()));
    }
    let req = ChatRequest::text(
        prompts.system(),
        prompts.evidence(question, vocab, k),
        &gateway.tags().evidence,
    );
    let reply = gateway.chat(&req)?;
    let selected = parse_evidence(&reply.text, vocab, k);
    if selected.is_empty() {
        return Err(Error::EmptyEvidence(format!(
            "no vocabulary category in evidence reply {:?}",
            reply.text
        )));
    }
    log::info!(
        "evidence for {question:?}: {:?}",
        selected.iter().map(|&c| &vocab[c]).collect::<Vec<_>>()
    );
    EvidenceQuery::new(question, selected, k)
}

/// Ids of Gaussians whose category is among the selected ones, ascending.
pub fn activate_by_category(scene: &Scene, q: &EvidenceQuery) -> Result<Vec<GaussianId>> {
    if !scene.has_categories() {
        return Err(Error::Mode("scene has no category labels".into()));
    }
    Ok(scene
        .gaussians()
        .iter()
        .filter(|g| g.category.is_some_and(|c| q.selected.contains(&c)))
        .map(|g| g.id)
        .collect())
}

/// How per-category similarities combine into an activation decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityRule {
    /// `sum_c cos(f_j, t_c) >= tau`.
    #[default]
    Sum,
    /// `max_c cos(f_j, t_c) >= tau`.
    PerCategory,
}

/// Text embeddings of the selected categories, taken from a matrix with one row per vocabulary entry.
pub fn select_text_embeddings(matrix: &EmbeddingMatrix, q: &EvidenceQuery, vocab_len: usize) -> Result<Vec<Vec<f32>>> {
    if matrix.rows() != vocab_len {
        return Err(Error::Validation(format!(
            "text embedding matrix has {} rows for a vocabulary of {vocab_len}",
            matrix.rows()
        )));
    }
    Ok(q.selected.iter().map(|&c| matrix.row(c).to_vec()).collect())
}

fn unit(v: &[f32], what: &str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Validation(format!("{what} has zero or non-finite norm")));
    }
    Ok(v.iter().map(|&x| x as f64 / norm).collect())
}

/// Ids whose embedding similarity to the evidence categories reaches `tau`, ascending.
pub fn activate_by_similarity(
    scene: &Scene,
    text_embeds: &[Vec<f32>],
    tau: f64,
    rule: SimilarityRule,
) -> Result<Vec<GaussianId>> {
    let dim = scene
        .embedding_dim()
        .ok_or_else(|| Error::Mode("scene has no embeddings".into()))?;
    let texts = text_embeds
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.len() != dim {
                return Err(Error::Validation(format!(
                    "text embedding {i} has dimension {}, scene uses {dim}",
                    t.len()
                )));
            }
            unit(t, &format!("text embedding {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for g in scene.gaussians() {
        let Some(f) = &g.embedding else { continue };
        let sims = texts
            .iter()
            .map(|t| f.iter().zip(t).map(|(&a, &b)| a as f64 * b).sum::<f64>());
        let score = match rule {
            SimilarityRule::Sum => sims.sum::<f64>(),
            SimilarityRule::PerCategory => sims.fold(f64::NEG_INFINITY, f64::max),
        };
        if score >= tau {
            out.push(g.id);
        }
    }
    Ok(out)
}
