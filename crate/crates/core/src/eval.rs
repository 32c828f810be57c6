//! Test-time-augmentation embeddings, all-to-all matching, and the
//! verification metrics: EER, FRR at fixed FAR, Rank-1, and ROC points.
//!
//! Scores are distances: smaller means more similar, and a pair is accepted
//! iff its distance is <= the threshold.

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{tta_set, AugmentParams};
use crate::backbone::{forward_embed, BackboneModel, ModelError};
use crate::image::LabeledImage;
use crate::triplet::{l2_distance, Metric};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 embeddings (got {0})")]
    TooFewEmbeddings(usize),
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("cosine distance undefined for zero vector at index {0}")]
    ZeroVector(usize),
    #[error("genuine score list is empty (need same-class pairs)")]
    EmptyGenuine,
    #[error("impostor score list is empty (need at least 2 classes)")]
    EmptyImpostor,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("far target must lie strictly between 0 and 1 (got {0})")]
    BadFarTarget(f64),
    #[error("every probe lacks a same-class partner; rank-1 undefined")]
    AllProbesExcluded,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A labeled feature vector for matching. Built by [`tta_embed`] the value
/// length is 6 x embedding_dim; plain embeddings can be wrapped with
/// [`TtaEmbedding::from_parts`] for non-TTA matching.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaEmbedding {
    pub values: Vec<f64>,
    pub source_id: String,
    pub class_id: String,
}

impl TtaEmbedding {
    pub fn from_parts(
        values: Vec<f64>,
        source_id: impl Into<String>,
        class_id: impl Into<String>,
    ) -> Self {
        Self {
            values,
            source_id: source_id.into(),
            class_id: class_id.into(),
        }
    }

    /// Scales the vector to unit L2 norm (optional pre-matching step).
    pub fn l2_normalize(&mut self) {
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut self.values {
                *v /= norm;
            }
        }
    }
}

/// Concatenates the embeddings of the six canonical augmentations in
/// canonical order; segment 0 is the plain embedding.
pub fn tta_embed(
    model: &BackboneModel,
    image: &LabeledImage,
    params: &AugmentParams,
) -> Result<TtaEmbedding, EvalError> {
    let variants = tta_set(image, params);
    let embeddings: Vec<Vec<f64>> = variants
        .par_iter()
        .map(|v| forward_embed(model, v).map(|e| e.values))
        .collect::<Result<_, _>>()?;
    let mut values = Vec::with_capacity(6 * model.config().embedding_dim);
    for e in embeddings {
        values.extend(e);
    }
    Ok(TtaEmbedding {
        values,
        source_id: image.source_id().to_string(),
        class_id: image.class_id().to_string(),
    })
}

/// Genuine (same-class) and impostor (different-class) pair distances; the
/// two lists together cover every unordered pair exactly once.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self, EvalError> {
        for &s in genuine.iter().chain(&impostor) {
            if !s.is_finite() {
                return Err(EvalError::NonFiniteScore(s));
            }
        }
        Ok(Self { genuine, impostor })
    }

    pub fn total(&self) -> usize {
        self.genuine.len() + self.impostor.len()
    }
}

/// All-to-all matching: every unordered pair distance, routed by class
/// equality.
pub fn all_to_all(embeddings: &[TtaEmbedding], metric: Metric) -> Result<ScoreSet, EvalError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(EvalError::TooFewEmbeddings(n));
    }
    let dim = embeddings[0].values.len();
    for (index, e) in embeddings.iter().enumerate() {
        if e.values.len() != dim {
            return Err(EvalError::DimensionMismatch {
                index,
                got: e.values.len(),
                expected: dim,
            });
        }
    }
    let norms: Vec<f64> = match metric {
        Metric::Cosine => {
            let norms: Vec<f64> = embeddings
                .iter()
                .map(|e| e.values.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                return Err(EvalError::ZeroVector(i));
            }
            norms
        }
        Metric::EuclideanL2 => Vec::new(),
    };

    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = match metric {
                Metric::EuclideanL2 => l2_distance(&embeddings[i].values, &embeddings[j].values),
                Metric::Cosine => {
                    let dot: f64 = embeddings[i]
                        .values
                        .iter()
                        .zip(&embeddings[j].values)
                        .map(|(a, b)| a * b)
                        .sum();
                    (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
                }
            };
            if embeddings[i].class_id == embeddings[j].class_id {
                genuine.push(d);
            } else {
                impostor.push(d);
            }
        }
    }
    Ok(ScoreSet { genuine, impostor })
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at every distinct score value, in ascending threshold order.
/// FAR(t) = fraction of impostor <= t; FRR(t) = fraction of genuine > t.
fn sweep(scores: &ScoreSet) -> Result<Vec<SweepPoint>, EvalError> {
    if scores.genuine.is_empty() {
        return Err(EvalError::EmptyGenuine);
    }
    if scores.impostor.is_empty() {
        return Err(EvalError::EmptyImpostor);
    }
    for &s in scores.genuine.iter().chain(&scores.impostor) {
        if !s.is_finite() {
            return Err(EvalError::NonFiniteScore(s));
        }
    }
    let mut genuine = scores.genuine.clone();
    let mut impostor = scores.impostor.clone();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = genuine.iter().chain(&impostor).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (n, m) = (genuine.len(), impostor.len());
    let mut points = Vec::with_capacity(thresholds.len());
    let (mut gi, mut ii) = (0usize, 0usize);
    for t in thresholds {
        while gi < n && genuine[gi] <= t {
            gi += 1;
        }
        while ii < m && impostor[ii] <= t {
            ii += 1;
        }
        points.push(SweepPoint {
            threshold: t,
            far: ii as f64 / m as f64,
            frr: (n - gi) as f64 / n as f64,
        });
    }
    Ok(points)
}

/// Crossing of the FAR and FRR curves: the first sweep point with
/// FAR >= FRR brackets the crossing against its predecessor, and the two
/// step functions are linearly interpolated between them.
fn eer_from_points(points: &[(f64, f64, f64)]) -> (f64, f64) {
    // points are (threshold, far, frr); a virtual (-inf, 0, 1) precedes them.
    let mut prev = (f64::NEG_INFINITY, 0.0, 1.0);
    for &p in points {
        let (t1, far1, frr1) = p;
        let (t0, far0, frr0) = prev;
        if far1 >= frr1 {
            if far0 >= frr0 {
                // Already crossed at the virtual start: degenerate, all mass
                // at the first point.
                return (far1.min(frr0), t1);
            }
            let denom = (far1 - far0) + (frr0 - frr1);
            if denom == 0.0 {
                return (far1, t1);
            }
            let s = (frr0 - far0) / denom;
            let eer = far0 + s * (far1 - far0);
            let threshold = if t0.is_finite() { t0 + s * (t1 - t0) } else { t1 };
            return (eer, threshold);
        }
        prev = p;
    }
    // FAR never reaches FRR within the sweep; the final point has FAR = 1,
    // FRR = 0, so this is unreachable for nonempty inputs.
    let last = points.last().copied().unwrap_or((0.0, 0.0, 0.0));
    (last.1.max(last.2), last.0)
}

/// Equal error rate and the distance threshold attaining it.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64), EvalError> {
    let points = sweep(scores)?;
    let tuples: Vec<(f64, f64, f64)> =
        points.iter().map(|p| (p.threshold, p.far, p.frr)).collect();
    Ok(eer_from_points(&tuples))
}

/// FRR at the largest threshold whose FAR stays <= `far_target`
/// (conservative step convention). Returns 1.0 when even the smallest
/// threshold overshoots the target.
pub fn compute_frr_at_far(scores: &ScoreSet, far_target: f64) -> Result<f64, EvalError> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(EvalError::BadFarTarget(far_target));
    }
    let points = sweep(scores)?;
    let mut frr = 1.0;
    for p in &points {
        if p.far <= far_target {
            frr = p.frr;
        } else {
            break;
        }
    }
    Ok(frr)
}

/// ROC points: (0,1), one point per distinct threshold, ending at (1,0).
/// FAR is non-decreasing and FRR non-increasing along the list.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<(f64, f64)>, EvalError> {
    let points = sweep(scores)?;
    let mut roc = Vec::with_capacity(points.len() + 2);
    roc.push((0.0, 1.0));
    for p in &points {
        roc.push((p.far, p.frr));
    }
    if roc.last() != Some(&(1.0, 0.0)) {
        roc.push((1.0, 0.0));
    }
    Ok(roc)
}

/// Rank-1 outcome. Probes with no same-class partner are excluded from the
/// rate and tallied separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rank1 {
    pub rate: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Fraction of probes whose nearest neighbor (excluding itself, ties to the
/// lowest index) shares their class.
pub fn compute_rank1(embeddings: &[TtaEmbedding], metric: Metric) -> Result<Rank1, EvalError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(EvalError::TooFewEmbeddings(n));
    }
    let norms: Vec<f64> = match metric {
        Metric::Cosine => {
            let norms: Vec<f64> = embeddings
                .iter()
                .map(|e| e.values.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            if let Some(i) = norms.iter().position(|&v| v == 0.0) {
                return Err(EvalError::ZeroVector(i));
            }
            norms
        }
        Metric::EuclideanL2 => Vec::new(),
    };
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for probe in 0..n {
        let has_partner = (0..n)
            .any(|j| j != probe && embeddings[j].class_id == embeddings[probe].class_id);
        if !has_partner {
            excluded += 1;
            continue;
        }
        let mut best = f64::INFINITY;
        let mut best_idx = usize::MAX;
        for j in 0..n {
            if j == probe {
                continue;
            }
            let d = match metric {
                Metric::EuclideanL2 => {
                    l2_distance(&embeddings[probe].values, &embeddings[j].values)
                }
                Metric::Cosine => {
                    let dot: f64 = embeddings[probe]
                        .values
                        .iter()
                        .zip(&embeddings[j].values)
                        .map(|(a, b)| a * b)
                        .sum();
                    (1.0 - dot / (norms[probe] * norms[j])).clamp(0.0, 2.0)
                }
            };
            if d < best {
                best = d;
                best_idx = j;
            }
        }
        evaluated += 1;
        if embeddings[best_idx].class_id == embeddings[probe].class_id {
            correct += 1;
        }
    }
    if evaluated == 0 {
        return Err(EvalError::AllProbesExcluded);
    }
    Ok(Rank1 {
        rate: correct as f64 / evaluated as f64,
        evaluated,
        excluded,
    })
}

/// Full evaluation over a set of labeled embeddings.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metric: Metric,
    pub eer: f64,
    pub threshold_at_eer: f64,
    pub far_target: f64,
    pub frr_at_far: f64,
    pub rank1: Rank1,
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub roc: Vec<(f64, f64)>,
}

pub fn evaluate(
    embeddings: &[TtaEmbedding],
    metric: Metric,
    far_target: f64,
) -> Result<EvalReport, EvalError> {
    let scores = all_to_all(embeddings, metric)?;
    let (eer, threshold_at_eer) = compute_eer(&scores)?;
    let frr_at_far = compute_frr_at_far(&scores, far_target)?;
    let rank1 = compute_rank1(embeddings, metric)?;
    let roc = roc_points(&scores)?;
    Ok(EvalReport {
        metric,
        eer,
        threshold_at_eer,
        far_target,
        frr_at_far,
        rank1,
        genuine_count: scores.genuine.len(),
        impostor_count: scores.impostor.len(),
        roc,
    })
}

impl EvalReport {
    /// Structured text form, stable field order.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("metric = {}\n", self.metric.name()));
        s.push_str(&format!(
            "pairs = {} genuine, {} impostor\n",
            self.genuine_count, self.impostor_count
        ));
        s.push_str(&format!("eer = {}\n", self.eer));
        s.push_str(&format!("threshold_at_eer = {}\n", self.threshold_at_eer));
        s.push_str(&format!(
            "frr_at_far = {} (far_target = {})\n",
            self.frr_at_far, self.far_target
        ));
        s.push_str(&format!(
            "rank1 = {} ({} probes, {} excluded)\n",
            self.rank1.rate, self.rank1.evaluated, self.rank1.excluded
        ));
        s.push_str(&format!("roc_points = {}\n", self.roc.len()));
        s
    }

    /// `far,frr` CSV with a one-line header.
    pub fn render_roc_csv(&self) -> String {
        let mut s = String::from("far,frr\n");
        for (far, frr) in &self.roc {
            s.push_str(&format!("{far},{frr}\n"));
        }
        s
    }
}
