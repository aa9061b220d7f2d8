//! Probe-versus-template scoring, 1:1 verification and 1:N identification.
//!
//! A template's score is the maximum cosine similarity between the probe and
//! any of its entries. Decision thresholds are inclusive (`score >= t`), the
//! same convention the evaluation module uses to calibrate thresholds.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("dimension mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("template is empty")]
    EmptyTemplate,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("threshold {0} outside [-1, 1]")]
    InvalidThreshold(f32),
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f32, MatchError> {
    if a.dim() != b.dim() {
        return Err(MatchError::Shape(a.dim(), b.dim()));
    }
    let dot: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    // adding +0.0 turns a -0.0 into +0.0 so equal scores also compare equal under total_cmp
    Ok(dot.clamp(-1.0, 1.0) as f32 + 0.0)
}

/// Max-fusion score of `probe` against every entry of a template.
pub fn template_score<'a, I>(probe: &Embedding, template: I) -> Result<f32, MatchError>
where
    I: IntoIterator<Item = &'a Embedding>,
{
    let mut best: Option<f32> = None;
    for entry in template {
        let s = cosine_similarity(probe, entry)?;
        best = Some(best.map_or(s, |b| b.max(s)));
    }
    best.ok_or(MatchError::EmptyTemplate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub accept: bool,
    pub score: f32,
}

fn check_threshold(t: f32) -> Result<(), MatchError> {
    if (-1.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(MatchError::InvalidThreshold(t))
    }
}

pub fn verify<'a, I>(probe: &Embedding, template: I, threshold: f32) -> Result<Verification, MatchError>
where
    I: IntoIterator<Item = &'a Embedding>,
{
    check_threshold(threshold)?;
    let score = template_score(probe, template)?;
    Ok(Verification {
        accept: score >= threshold,
        score,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub individual_id: String,
    pub score: f32,
    /// 1-based position in the ranking.
    pub rank: usize,
    /// False when an open-set threshold was given and the score fell below it.
    pub accepted: bool,
}

/// Orders by descending score, then ascending id.
pub fn rank_order(a: (&str, f32), b: (&str, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Ranks every candidate template and returns the top `k`. With a
/// threshold, results scoring below it are marked as rejected.
pub fn identify<'a, I, T>(
    probe: &Embedding,
    gallery: I,
    k: usize,
    threshold: Option<f32>,
) -> Result<Vec<MatchResult>, MatchError>
where
    I: IntoIterator<Item = (&'a str, T)>,
    T: IntoIterator<Item = &'a Embedding>,
{
    if k == 0 {
        return Err(MatchError::InvalidK);
    }
    if let Some(t) = threshold {
        check_threshold(t)?;
    }
    let mut scored = Vec::new();
    for (id, template) in gallery {
        scored.push((id, template_score(probe, template)?));
    }
    if scored.is_empty() {
        return Err(MatchError::EmptyGallery);
    }
    scored.sort_by(|a, b| rank_order(*a, *b));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| MatchResult {
            individual_id: id.to_string(),
            score,
            rank: i + 1,
            accepted: threshold.is_none_or(|t| score >= t),
        })
        .collect())
}
