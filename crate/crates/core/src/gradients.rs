//! Hand-derived backward passes for the loss family and a central-difference
//! oracle to check them.
//!
//! The oracle only calls the forward functions in [`crate::losses`]; it never
//! touches the derivative code below.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    cosine_matrix, lse, normalize_rows, normalize_rows_backward, safe_arccos, safe_arccos_derivative,
    softmax_row, ClassWeightMatrix, EmbeddingBatch,
};
use crate::losses::{self, margin_logits, pair_indices, LossKind, MarginConfig, MarginKind, PairSet};

/// Loss value with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    /// Present exactly when the loss reads class weights.
    pub grad_weights: Option<Array2<f64>>,
}

/// Value and analytic gradients of `kind` at `batch` (and `weights`).
///
/// `value` is the forward function's output, bit for bit.
pub fn backward(
    kind: LossKind,
    batch: &EmbeddingBatch,
    weights: Option<&ClassWeightMatrix>,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    let value = losses::evaluate(kind, batch, weights, cfg)?;
    let need = || weights.ok_or(Error::MissingWeights(kind.name()));
    let (grad_embeddings, grad_weights) = match kind {
        LossKind::Softmax => {
            let (gx, gw) = softmax_grad(batch, need()?);
            (gx, Some(gw))
        }
        LossKind::NormSoftmax => {
            let (gx, gw) = cosine_softmax_grad(batch, need()?, cfg.s1, 0.0, MarginKind::None)?;
            (gx, Some(gw))
        }
        LossKind::CosFace => {
            let (gx, gw) = cosine_softmax_grad(batch, need()?, cfg.s1, cfg.m, MarginKind::AdditiveCosine)?;
            (gx, Some(gw))
        }
        LossKind::ArcFace => {
            let (gx, gw) = cosine_softmax_grad(batch, need()?, cfg.s1, cfg.m, MarginKind::AdditiveAngle)?;
            (gx, Some(gw))
        }
        LossKind::NPair => (n_pair_grad(batch), None),
        LossKind::SnPair => (sn_pair_grad(batch, cfg.s2)?, None),
        LossKind::MixFace => {
            let (gx, gw) = cosine_softmax_grad(batch, need()?, cfg.s1, cfg.m, MarginKind::AdditiveAngle)?;
            (gx + sn_pair_grad(batch, cfg.s2)?, Some(gw))
        }
    };
    Ok(LossResult {
        value,
        grad_embeddings,
        grad_weights,
    })
}

/// dL/dlogits for mean softmax cross-entropy: `(p − onehot) / N`.
fn cross_entropy_logit_grad(logits: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax_row(logits.row(i));
        for (j, pj) in p.into_iter().enumerate() {
            grad[[i, j]] = (pj - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    grad
}

fn softmax_grad(batch: &EmbeddingBatch, weights: &ClassWeightMatrix) -> (Array2<f64>, Array2<f64>) {
    let x = batch.vectors();
    let w = weights.weights();
    let dz = cross_entropy_logit_grad(&x.dot(&w.t()), batch.labels());
    (dz.dot(w), dz.t().dot(x))
}

fn cosine_softmax_grad(
    batch: &EmbeddingBatch,
    weights: &ClassWeightMatrix,
    s: f64,
    m: f64,
    kind: MarginKind,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let x = batch.vectors().view();
    let w = weights.weights().view();
    let xn = normalize_rows(x)?;
    let wn = normalize_rows(w)?;
    let raw_cos = xn.dot(&wn.t());
    let cos = cosine_matrix(batch, weights)?;
    let labels = batch.labels();

    let dz = cross_entropy_logit_grad(&margin_logits(&cos, labels, s, m, kind), labels);
    let mut dcos = dz * s;
    for (i, &y) in labels.iter().enumerate() {
        let c = cos[[i, y]];
        let slope = match kind {
            MarginKind::None | MarginKind::AdditiveCosine => 1.0,
            MarginKind::AdditiveAngle => -(safe_arccos(c) + m).sin() * safe_arccos_derivative(c),
        };
        dcos[[i, y]] *= slope;
    }
    // Entries clamped to ±1 after the division carry no gradient.
    ndarray::Zip::from(&mut dcos).and(&raw_cos).for_each(|g, &r| {
        if r.abs() > 1.0 {
            *g = 0.0;
        }
    });

    let gx = normalize_rows_backward(x, &dcos.dot(&wn))?;
    let gw = normalize_rows_backward(w, &dcos.t().dot(&xn))?;
    Ok((gx, gw))
}

/// Gradients of the pair form w.r.t. each positive and negative similarity.
fn pair_form_grad(pairs: &PairSet, s: f64) -> (Vec<f64>, Vec<f64>) {
    let k = pairs.positives.len() as f64;
    let a = lse(pairs.negatives.iter().map(|&n| s * n));
    let sig: Vec<f64> = pairs.positives.iter().map(|&p| sigmoid(a - s * p)).collect();
    let sig_total: f64 = sig.iter().sum();
    let dpos = sig.iter().map(|&g| -s * g / k).collect();
    let dneg = pairs
        .negatives
        .iter()
        .map(|&n| s * sig_total / k * (s * n - a).exp())
        .collect();
    (dpos, dneg)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Scatters per-pair gradients into a symmetric N×N similarity gradient.
fn scatter_pairs(
    n: usize,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    dpos: &[f64],
    dneg: &[f64],
) -> Array2<f64> {
    let mut g = Array2::zeros((n, n));
    for (&(i, j), &d) in pos.iter().zip(dpos).chain(neg.iter().zip(dneg)) {
        g[[i, j]] += d;
        g[[j, i]] += d;
    }
    g
}

fn require_pairs(pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<()> {
    if pos.is_empty() {
        Err(Error::NoPositives)
    } else if neg.is_empty() {
        Err(Error::NoNegatives)
    } else {
        Ok(())
    }
}

fn sn_pair_grad(batch: &EmbeddingBatch, s2: f64) -> Result<Array2<f64>> {
    let x = batch.vectors().view();
    let (pos, neg) = pair_indices(batch.labels());
    require_pairs(&pos, &neg)?;
    let xn = normalize_rows(x)?;
    let raw = xn.dot(&xn.t());
    let sim = raw.mapv(|c| c.clamp(-1.0, 1.0));
    let pairs = PairSet {
        positives: pos.iter().map(|&(i, j)| sim[[i, j]]).collect(),
        negatives: neg.iter().map(|&(i, j)| sim[[i, j]]).collect(),
    };
    let (dpos, dneg) = pair_form_grad(&pairs, s2);
    let mut dsim = scatter_pairs(batch.len(), &pos, &neg, &dpos, &dneg);
    ndarray::Zip::from(&mut dsim).and(&raw).for_each(|g, &r| {
        if r.abs() > 1.0 {
            *g = 0.0;
        }
    });
    normalize_rows_backward(x, &dsim.dot(&xn))
}

fn n_pair_grad(batch: &EmbeddingBatch) -> Array2<f64> {
    let pairs = losses::inner_product_pairs(batch);
    let (pos, neg) = pair_indices(batch.labels());
    let (dpos, dneg) = pair_form_grad(&pairs, 1.0);
    let dgram = scatter_pairs(batch.len(), &pos, &neg, &dpos, &dneg);
    dgram.dot(batch.vectors())
}

/// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates, with central differences of step `h·(1 + |x_i|)`.
///
/// `f` must be defined at every perturbed point; a failure there is
/// reported as [`Error::PerturbationOutOfDomain`].
pub fn central_difference_error<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if x.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    let errors: Result<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let step = h * (1.0 + x[i].abs());
            let mut probe = x.to_vec();
            let out_of_domain = |source| Error::PerturbationOutOfDomain {
                coordinate: i,
                source: Box::new(source),
            };
            probe[i] = x[i] + step;
            let up = f(&probe).map_err(out_of_domain)?;
            probe[i] = x[i] - step;
            let down = f(&probe).map_err(out_of_domain)?;
            let numeric = (up - down) / (2.0 * step);
            let denom = 1f64.max(analytic[i].abs()).max(numeric.abs());
            Ok((analytic[i] - numeric).abs() / denom)
        })
        .collect();
    Ok(errors?.into_iter().fold(0.0, f64::max))
}

/// Checks [`backward`] for `kind` against central differences of the
/// forward loss, over embeddings and (when used) class weights jointly.
pub fn finite_difference_check(
    kind: LossKind,
    batch: &EmbeddingBatch,
    weights: Option<&ClassWeightMatrix>,
    cfg: &MarginConfig,
    h: f64,
) -> Result<f64> {
    let analytic = backward(kind, batch, weights, cfg)?;
    let (n, d) = batch.vectors().dim();
    let split = n * d;

    let mut point: Vec<f64> = batch.vectors().iter().copied().collect();
    let mut grad: Vec<f64> = analytic.grad_embeddings.iter().copied().collect();
    let weight_shape = match (weights, &analytic.grad_weights) {
        (Some(w), Some(gw)) if kind.uses_class_weights() => {
            point.extend(w.weights().iter().copied());
            grad.extend(gw.iter().copied());
            Some(w.weights().dim())
        }
        _ => None,
    };
    let labels = batch.labels().to_vec();

    let forward = |p: &[f64]| -> Result<f64> {
        let xs = Array2::from_shape_vec((n, d), p[..split].to_vec())
            .map_err(|e| Error::InvalidBatch(e.to_string()))?;
        let b = EmbeddingBatch::new(xs, labels.clone())?;
        match weight_shape {
            Some(shape) => {
                let ws = Array2::from_shape_vec(shape, p[split..].to_vec())
                    .map_err(|e| Error::InvalidBatch(e.to_string()))?;
                losses::evaluate(kind, &b, Some(&ClassWeightMatrix::new(ws)?), cfg)
            }
            None => losses::evaluate(kind, &b, None, cfg),
        }
    };
    central_difference_error(forward, &point, &grad, h)
}

/// Largest |cos θ| that enters `kind` at this point: feature-to-weight
/// cosines for the classification losses and off-diagonal feature cosines
/// for SN-pair. Used to skip instances sitting on the arccos clamp.
pub fn max_abs_cosine(
    kind: LossKind,
    batch: &EmbeddingBatch,
    weights: Option<&ClassWeightMatrix>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    if let (true, Some(w)) = (kind.uses_class_weights() && kind != LossKind::Softmax, weights) {
        worst = cosine_matrix(batch, w)?.iter().fold(worst, |a, c| a.max(c.abs()));
    }
    if matches!(kind, LossKind::SnPair | LossKind::MixFace) {
        let sim = cosine_matrix(batch, batch)?;
        for i in 0..sim.nrows() {
            for j in (i + 1)..sim.ncols() {
                worst = worst.max(sim[[i, j]].abs());
            }
        }
    }
    Ok(worst)
}
