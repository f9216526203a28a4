//! Forward evaluation of the loss family.
//!
//! Classification losses compare features with class weight vectors:
//! plain softmax over raw inner products, and a scaled cosine softmax with
//! an optional margin on the target logit (no margin, CosFace-style cosine
//! margin, ArcFace-style angular margin). Metric losses compare features
//! pairwise: N-pair over raw inner products and SN-pair over cosines.
//! MixFace is the sum of ArcFace and SN-pair; its two scales can be derived
//! from a single ε via [`derive_unified_scale`].

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cosine_matrix, lse, safe_arccos, ClassWeightMatrix, EmbeddingBatch, SimilarityMatrix};

/// Scales and margin shared by the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Classification scale.
    pub s1: f64,
    /// Metric scale.
    pub s2: f64,
    /// Margin; radians for the angular variant, cosine units for CosFace.
    pub m: f64,
}

impl MarginConfig {
    pub fn new(s1: f64, s2: f64, m: f64) -> Result<Self> {
        let cfg = Self { s1, s2, m };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for s in [self.s1, self.s2] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidScale(s));
            }
        }
        check_margin(self.m)
    }
}

impl Default for MarginConfig {
    /// ArcFace and SN-pair settings used for the K-FACE baselines.
    fn default() -> Self {
        Self {
            s1: 16.0,
            s2: 16.0,
            m: 0.25,
        }
    }
}

fn check_margin(m: f64) -> Result<()> {
    if m.is_finite() && (0.0..FRAC_PI_2).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidMargin(m))
    }
}

/// How the target-class logit is penalized in [`cosine_softmax_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginKind {
    None,
    AdditiveCosine,
    AdditiveAngle,
}

impl MarginKind {
    /// Target logit before scaling, as a function of the target cosine.
    pub(crate) fn target(self, cos: f64, m: f64) -> f64 {
        match self {
            MarginKind::None => cos,
            MarginKind::AdditiveCosine => cos - m,
            MarginKind::AdditiveAngle => (safe_arccos(cos) + m).cos(),
        }
    }
}

/// Every loss the lab can train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    #[serde(rename = "norm-softmax")]
    NormSoftmax,
    CosFace,
    ArcFace,
    NPair,
    SnPair,
    MixFace,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Softmax,
        LossKind::NormSoftmax,
        LossKind::CosFace,
        LossKind::ArcFace,
        LossKind::NPair,
        LossKind::SnPair,
        LossKind::MixFace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::NormSoftmax => "norm-softmax",
            LossKind::CosFace => "cosface",
            LossKind::ArcFace => "arcface",
            LossKind::NPair => "npair",
            LossKind::SnPair => "snpair",
            LossKind::MixFace => "mixface",
        }
    }

    /// Whether the loss reads a [`ClassWeightMatrix`].
    pub fn uses_class_weights(self) -> bool {
        matches!(
            self,
            LossKind::Softmax
                | LossKind::NormSoftmax
                | LossKind::CosFace
                | LossKind::ArcFace
                | LossKind::MixFace
        )
    }

    /// Whether the loss needs positive and negative pairs in its batch.
    pub fn uses_pairs(self) -> bool {
        matches!(self, LossKind::NPair | LossKind::SnPair | LossKind::MixFace)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match key.as_str() {
            "softmax" => LossKind::Softmax,
            "normsoftmax" | "fixcos" => LossKind::NormSoftmax,
            "cosface" => LossKind::CosFace,
            "arcface" => LossKind::ArcFace,
            "npair" => LossKind::NPair,
            "snpair" => LossKind::SnPair,
            "mixface" => LossKind::MixFace,
            _ => return Err(Error::InvalidConfig(format!("unknown loss `{s}`"))),
        })
    }
}

/// Upper-triangle similarities split by whether the two labels agree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl PairSet {
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    fn require_both(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::NoPositives);
        }
        if self.negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        Ok(())
    }
}

/// Scale factors derived from one ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnifiedScale {
    pub epsilon: f64,
    pub s1: f64,
    pub s2: f64,
}

pub(crate) type IndexPairs = Vec<(usize, usize)>;

/// Index pairs `(i, j)`, `i < j`, in row-major upper-triangle order, split
/// into same-label and different-label lists.
pub(crate) fn pair_indices(labels: &[usize]) -> (IndexPairs, IndexPairs) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    (pos, neg)
}

fn gather(m: &Array2<f64>, idx: &[(usize, usize)]) -> Vec<f64> {
    idx.iter().map(|&(i, j)| m[[i, j]]).collect()
}

fn check_classification(batch: &EmbeddingBatch, weights: &ClassWeightMatrix) -> Result<()> {
    if batch.dim() != weights.dim() {
        return Err(Error::DimensionMismatch {
            expected: weights.dim(),
            actual: batch.dim(),
        });
    }
    batch.check_labels(weights.num_classes())
}

/// Mean cross-entropy of `-log softmax(logits)[target]`.
pub(crate) fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| lse(row.iter().copied()) - row[y])
        .sum();
    total / labels.len() as f64
}

/// Softmax cross-entropy over raw inner products `w_j · x_i`.
pub fn softmax_loss(batch: &EmbeddingBatch, weights: &ClassWeightMatrix) -> Result<f64> {
    check_classification(batch, weights)?;
    let logits = batch.vectors().dot(&weights.weights().t());
    Ok(mean_cross_entropy(&logits, batch.labels()))
}

/// Scaled cosine logits with the margin applied to each target entry.
pub(crate) fn margin_logits(
    cos: &Array2<f64>,
    labels: &[usize],
    s: f64,
    m: f64,
    kind: MarginKind,
) -> Array2<f64> {
    let mut logits = cos * s;
    for (i, &y) in labels.iter().enumerate() {
        logits[[i, y]] = s * kind.target(cos[[i, y]], m);
    }
    logits
}

/// Softmax over `s · cos θ` logits with a margin on the target class.
///
/// `MarginKind::None` gives the normalized-softmax (fixed-scale cosine)
/// baseline, `AdditiveCosine` gives CosFace and `AdditiveAngle` ArcFace.
pub fn cosine_softmax_loss(
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    s: f64,
    m: f64,
    kind: MarginKind,
) -> Result<f64> {
    check_classification(batch, weights)?;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::InvalidScale(s));
    }
    match kind {
        MarginKind::AdditiveAngle => check_margin(m)?,
        _ if !m.is_finite() || m < 0.0 => return Err(Error::InvalidMargin(m)),
        _ => {}
    }
    let cos = cosine_matrix(batch, weights)?;
    let logits = margin_logits(&cos, batch.labels(), s, m, kind);
    Ok(mean_cross_entropy(&logits, batch.labels()))
}

/// Splits the strict upper triangle of `sim` into positive and negative
/// pair similarities.
pub fn extract_pairs(sim: &SimilarityMatrix, labels: &[usize]) -> Result<PairSet> {
    if labels.len() != sim.len() {
        return Err(Error::DimensionMismatch {
            expected: sim.len(),
            actual: labels.len(),
        });
    }
    let (pos, neg) = pair_indices(labels);
    Ok(PairSet {
        positives: gather(sim.values(), &pos),
        negatives: gather(sim.values(), &neg),
    })
}

/// `log(1 + e^t)` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Shared body of N-pair and SN-pair:
/// `(1/K) Σ_k log(1 + Σ_l exp(s·n_l − s·p_k))`.
///
/// The inner sum factors as `exp(A − s·p_k)` with `A = logΣ_l exp(s·n_l)`.
pub(crate) fn pair_softplus_loss(pairs: &PairSet, s: f64) -> Result<f64> {
    pairs.require_both()?;
    let a = lse(pairs.negatives.iter().map(|&n| s * n));
    let total: f64 = pairs.positives.iter().map(|&p| softplus(a - s * p)).sum();
    Ok(total / pairs.positives.len() as f64)
}

/// SN-pair loss over cosine pair similarities.
pub fn sn_pair_loss(pairs: &PairSet, s2: f64) -> Result<f64> {
    if !(s2.is_finite() && s2 > 0.0) {
        return Err(Error::InvalidScale(s2));
    }
    pair_softplus_loss(pairs, s2)
}

/// SN-pair loss written as a softmax cross-entropy: each positive competes
/// with every negative, `−(1/K) Σ_k log(e^{s p_k} / (e^{s p_k} + Σ_l e^{s n_l}))`.
///
/// Algebraically equal to [`sn_pair_loss`]; evaluated independently.
pub fn sn_pair_loss_softmax_form(pairs: &PairSet, s2: f64) -> Result<f64> {
    pairs.require_both()?;
    let total: f64 = pairs
        .positives
        .iter()
        .map(|&p| {
            let target = s2 * p;
            let denom = lse(std::iter::once(target).chain(pairs.negatives.iter().map(|&n| s2 * n)));
            denom - target
        })
        .sum();
    Ok(total / pairs.positives.len() as f64)
}

/// SN-pair loss of a labeled batch.
pub fn sn_pair_loss_batch(batch: &EmbeddingBatch, s2: f64) -> Result<f64> {
    let sim = SimilarityMatrix::from_batch(batch)?;
    sn_pair_loss(&extract_pairs(&sim, batch.labels())?, s2)
}

/// Raw inner products `x_j · x_i` of a batch split into positive and
/// negative pairs.
pub fn inner_product_pairs(batch: &EmbeddingBatch) -> PairSet {
    let gram = batch.vectors().dot(&batch.vectors().t());
    let (pos, neg) = pair_indices(batch.labels());
    PairSet {
        positives: gather(&gram, &pos),
        negatives: gather(&gram, &neg),
    }
}

/// N-pair loss: the SN-pair form over unnormalized inner products, no scale.
pub fn n_pair_loss(batch: &EmbeddingBatch) -> Result<f64> {
    pair_softplus_loss(&inner_product_pairs(batch), 1.0)
}

/// ArcFace plus SN-pair, evaluated on the same batch.
pub fn mixface_loss(batch: &EmbeddingBatch, weights: &ClassWeightMatrix, cfg: &MarginConfig) -> Result<f64> {
    let (arc, pair) = mixface_parts(batch, weights, cfg)?;
    Ok(arc + pair)
}

/// The ArcFace and SN-pair terms of [`mixface_loss`], in that order.
pub fn mixface_parts(
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    cfg: &MarginConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let sim = SimilarityMatrix::from_batch(batch)?;
    let pairs = extract_pairs(&sim, batch.labels())?;
    pairs.require_both()?;
    let arc = cosine_softmax_loss(batch, weights, cfg.s1, cfg.m, MarginKind::AdditiveAngle)?;
    let pair = sn_pair_loss(&pairs, cfg.s2)?;
    Ok((arc, pair))
}

/// Evaluates any loss of the family. `weights` is required for the
/// classification losses and ignored otherwise.
pub fn evaluate(
    kind: LossKind,
    batch: &EmbeddingBatch,
    weights: Option<&ClassWeightMatrix>,
    cfg: &MarginConfig,
) -> Result<f64> {
    let need = || weights.ok_or(Error::MissingWeights(kind.name()));
    match kind {
        LossKind::Softmax => softmax_loss(batch, need()?),
        LossKind::NormSoftmax => cosine_softmax_loss(batch, need()?, cfg.s1, 0.0, MarginKind::None),
        LossKind::CosFace => cosine_softmax_loss(batch, need()?, cfg.s1, cfg.m, MarginKind::AdditiveCosine),
        LossKind::ArcFace => cosine_softmax_loss(batch, need()?, cfg.s1, cfg.m, MarginKind::AdditiveAngle),
        LossKind::NPair => n_pair_loss(batch),
        LossKind::SnPair => sn_pair_loss_batch(batch, cfg.s2),
        LossKind::MixFace => mixface_loss(batch, need()?, cfg),
    }
}

/// Scales for which an ideal ArcFace target (`cos(θ + m) → 1` against
/// `C − 1` orthogonal classes) and an ideal SN-pair positive (against `L`
/// orthogonal negatives) both reach probability `1 − ε`.
pub fn derive_unified_scale(epsilon: f64, classes: usize, negatives: usize, m: f64) -> Result<UnifiedScale> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    check_margin(m)?;
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if negatives < 1 {
        return Err(Error::InvalidConfig("need at least 1 negative pair".into()));
    }
    let odds = (1.0 - epsilon).ln() - epsilon.ln();
    Ok(UnifiedScale {
        epsilon,
        s1: (odds + ((classes - 1) as f64).ln()) / m.cos(),
        s2: odds + (negatives as f64).ln(),
    })
}

impl UnifiedScale {
    /// Ideal target probabilities `(ArcFace, SN-pair)` under these scales.
    pub fn ideal_probabilities(&self, classes: usize, negatives: usize, m: f64) -> (f64, f64) {
        let arc = 1.0 / (1.0 + (classes - 1) as f64 * (-self.s1 * m.cos()).exp());
        let pair = 1.0 / (1.0 + negatives as f64 * (-self.s2).exp());
        (arc, pair)
    }

    pub fn margin_config(&self, m: f64) -> MarginConfig {
        MarginConfig {
            s1: self.s1,
            s2: self.s2,
            m,
        }
    }
}
