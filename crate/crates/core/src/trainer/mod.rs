//! Encoder training: SGD with momentum and L2 weight decay, linear warmup
//! into cosine annealing, and loss-dependent batch composition.

mod checkpoint;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{Encoder, EncoderGrads, ForwardCache};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator;
use crate::geometry::{normalize_rows, row_norms, ClassWeightMatrix, EmbeddingBatch};
use crate::gradients;
use crate::losses::{derive_unified_scale, LossKind, MarginConfig};
use crate::synth::{derive_seed, DatasetSplit, Sample, TestId, TrainId};

/// Noted in every metric log header.
pub const PROTOCOL_NOTE: &str =
    "test embeddings are single views; horizontal-flip concatenation is not applied";

/// How batches are drawn from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// `batch_size` distinct samples, uniformly.
    Uniform,
    /// `batch_size / 2` distinct identities with two samples each.
    PositivePair,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::PositivePair => "positive_pair",
        }
    }

    /// Classification losses sample uniformly; anything reading pairs gets
    /// guaranteed positives.
    pub fn default_for(loss: LossKind) -> Self {
        if loss.uses_pairs() {
            SamplerKind::PositivePair
        } else {
            SamplerKind::Uniform
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "uniform" => Ok(SamplerKind::Uniform),
            "positive_pair" | "pairs" => Ok(SamplerKind::PositivePair),
            _ => Err(Error::InvalidConfig(format!("unknown sampler `{s}`"))),
        }
    }
}

/// Either explicit scales or a single ε from which both are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScaleSpec {
    Fixed(MarginConfig),
    Unified { epsilon: f64, m: f64 },
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Fixed(MarginConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub scale: ScaleSpec,
    /// `None` picks [`SamplerKind::default_for`] the loss.
    pub sampler: Option<SamplerKind>,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            epochs: 20,
            warmup_epochs: 3,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: LossKind::ArcFace,
            scale: ScaleSpec::default(),
            sampler: None,
            seed: 0,
            hidden_dim: 64,
            embedding_dim: 16,
        }
    }
}

impl TrainConfig {
    /// Defaults sized for the synthetic desk dataset.
    pub fn desk() -> Self {
        Self {
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn sampler_kind(&self) -> SamplerKind {
        self.sampler
            .unwrap_or_else(|| SamplerKind::default_for(self.loss))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.hidden_dim == 0 || self.embedding_dim < 2 {
            return bad("hidden_dim >= 1 and embedding_dim >= 2 required".into());
        }
        match self.scale {
            ScaleSpec::Fixed(m) => m.validate(),
            ScaleSpec::Unified { epsilon, m } => derive_unified_scale(epsilon, 2, 1, m).map(drop),
        }
    }
}

/// Learning rate at `progress ∈ [0, 1]` through training: a linear ramp
/// from 0 to `lr0` over the warmup epochs, then half-cosine decay to 0.
pub fn lr_schedule(progress: f64, cfg: &TrainConfig) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    let w = cfg.warmup_epochs as f64 / cfg.epochs as f64;
    if p < w {
        return cfg.lr0 * p / w;
    }
    let t = if w < 1.0 { (p - w) / (1.0 - w) } else { 1.0 };
    cfg.lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// Expected number of negative pairs in one batch of `batch_size` drawn
/// by `sampler` from `classes` balanced identities.
pub fn expected_negatives(sampler: SamplerKind, batch_size: usize, classes: usize) -> f64 {
    let n = batch_size as f64;
    let all = n * (n - 1.0) / 2.0;
    match sampler {
        SamplerKind::Uniform => all * (1.0 - 1.0 / classes.max(1) as f64),
        SamplerKind::PositivePair => all - (batch_size / 2) as f64,
    }
}

/// Feature rows with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Samples labelled by identity.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        num_classes: usize,
    ) -> Result<Self> {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let labels = samples.iter().map(|s| s.identity).collect();
        Self::new(feature_matrix(&samples)?, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `idx`, in order, with their labels.
    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), idx);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    fn members_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }
}

fn feature_matrix(samples: &[&Sample]) -> Result<Array2<f64>> {
    let dim = samples.first().ok_or(Error::EmptyInput)?.features.len();
    let mut flat = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: s.features.len(),
            });
        }
        flat.extend_from_slice(&s.features);
    }
    Ok(Array2::from_shape_vec((samples.len(), dim), flat).expect("rows checked"))
}

/// Verification pairs as two aligned feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationSet {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub same: Vec<bool>,
}

impl VerificationSet {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Sample, &'a Sample, bool)>) -> Result<Self> {
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut same = Vec::new();
        for (a, b, s) in pairs {
            left.push(a);
            right.push(b);
            same.push(s);
        }
        if same.is_empty() {
            return Err(Error::EmptyPairs);
        }
        Ok(Self {
            left: feature_matrix(&left)?,
            right: feature_matrix(&right)?,
            same,
        })
    }

    pub fn from_split(split: &DatasetSplit, id: TestId) -> Result<Self> {
        Self::from_pairs(
            split
                .test_set(id)
                .iter()
                .map(|p| (&split.samples[p.a], &split.samples[p.b], p.same)),
        )
    }

    pub fn len(&self) -> usize {
        self.same.len()
    }

    pub fn is_empty(&self) -> bool {
        self.same.is_empty()
    }
}

/// Training set `T_i` of a split, labelled by train identity.
pub fn train_set(split: &DatasetSplit, id: TrainId) -> Result<LabeledSet> {
    LabeledSet::from_samples(
        split.train_set(id).iter().map(|&i| &split.samples[i]),
        split.train_identities,
    )
}

/// Row indices of one batch.
///
/// Uniform draws `min(batch_size, |set|)` distinct rows. Positive-pair
/// draws `batch_size / 2` distinct classes and two rows of each; every
/// class present must then have at least two rows.
pub fn sample_batch(
    set: &LabeledSet,
    sampler: SamplerKind,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::EmptyInput);
    }
    match sampler {
        SamplerKind::Uniform => Ok(index::sample(rng, set.len(), batch_size.min(set.len())).into_vec()),
        SamplerKind::PositivePair => {
            let groups: Vec<Vec<usize>> = set.members_by_class().into_values().collect();
            positive_pair_batch(&groups, batch_size, rng)
        }
    }
}

fn positive_pair_batch(groups: &[Vec<usize>], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(Error::InsufficientSamples(format!(
            "positive-pair sampling needs two samples per identity; row {} has one",
            g[0]
        )));
    }
    let k = batch_size / 2;
    if groups.len() < k {
        return Err(Error::InsufficientSamples(format!(
            "positive-pair batch of {batch_size} needs {k} identities, set has {}",
            groups.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * k);
    for g in index::sample(rng, groups.len(), k) {
        let members = &groups[g];
        out.extend(index::sample(rng, members.len(), 2).iter().map(|j| members[j]));
    }
    Ok(out)
}

/// Encoder plus whatever the loss trained alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub loss: LossKind,
    pub margin: MarginConfig,
    pub encoder: Encoder,
    /// Unit-row class weights, for the classification losses.
    pub weights: Option<ClassWeightMatrix>,
}

/// First line of a metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub s1: f64,
    pub s2: f64,
    pub m: f64,
    /// Set when the scales were derived from ε.
    pub epsilon: Option<f64>,
    pub classes: usize,
    pub expected_negatives: f64,
    pub train_id: Option<String>,
    pub train_samples: usize,
    pub steps_per_epoch: usize,
    pub config: TrainConfig,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub mean_loss: f64,
    /// Verification accuracy per evaluation set.
    #[serde(flatten)]
    pub accuracy: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricLog {
    pub header: LogHeader,
    pub epochs: Vec<EpochRecord>,
}

impl MetricLog {
    /// JSON lines: the header, then one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Accuracy on `set` after the final epoch.
    pub fn final_accuracy(&self, set: &str) -> Option<f64> {
        self.last().and_then(|e| e.accuracy.get(set).copied())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: MetricLog,
}

/// Mutable parameters and momentum buffers of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: Encoder,
    pub weights: Option<ClassWeightMatrix>,
    loss: LossKind,
    margin: MarginConfig,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    weight_velocity: Vec<f64>,
    steps: usize,
}

fn unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Result<ClassWeightMatrix> {
    let raw = Array2::from_shape_fn((rows, dim), |_| rng.sample::<f64, _>(StandardNormal));
    ClassWeightMatrix::new(normalize_rows(raw.view())?)
}

impl TrainState {
    pub fn new(input_dim: usize, classes: usize, margin: MarginConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        margin.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x1417]));
        let encoder = Encoder::new(input_dim, cfg.hidden_dim, cfg.embedding_dim, &mut rng)?;
        let weights = if cfg.loss.uses_class_weights() {
            Some(unit_rows(&mut rng, classes, cfg.embedding_dim)?)
        } else {
            None
        };
        let velocity = [
            encoder.w1.len(),
            encoder.b1.len(),
            encoder.w2.len(),
            encoder.b2.len(),
        ]
        .iter()
        .map(|&n| vec![0.0; n])
        .collect();
        let weight_velocity = vec![0.0; weights.as_ref().map_or(0, |w| w.weights().len())];
        Ok(Self {
            encoder,
            weights,
            loss: cfg.loss,
            margin,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity,
            weight_velocity,
            steps: 0,
        })
    }

    /// Loss value with gradients for the encoder and class weights.
    pub fn gradients(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
    ) -> Result<(f64, EncoderGrads, Option<Array2<f64>>)> {
        let (emb, cache) = self.encoder.forward(x)?;
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        let batch = EmbeddingBatch::new(emb, labels.to_vec())?;
        // A collapsed embedding leaves the cosine losses undefined.
        let res = gradients::backward(self.loss, &batch, self.weights.as_ref(), &self.margin).map_err(
            |e| match e {
                Error::ZeroVector { .. } => Error::NonFiniteLoss { step: self.steps },
                e => e,
            },
        )?;
        if !res.value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        let grads = self.encoder.backward(x, &cache, &res.grad_embeddings);
        Ok((res.value, grads, res.grad_weights))
    }

    /// One SGD step: `v ← μv + g + λθ`, `θ ← θ − lr·v`, then class weight
    /// rows are put back on the unit sphere. Returns the pre-step loss.
    pub fn step(&mut self, x: ArrayView2<'_, f64>, labels: &[usize], lr: f64) -> Result<f64> {
        let (value, grads, grad_w) = self.gradients(x, labels)?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let update = |theta: &mut [f64], g: &[f64], v: &mut [f64]| {
            for ((t, &g), v) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g + wd * *t;
                *t -= lr * *v;
            }
        };
        for ((theta, g), v) in self
            .encoder
            .params_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.velocity.iter_mut())
        {
            update(theta, g, v);
        }
        if let (Some(w), Some(gw)) = (self.weights.take(), grad_w) {
            let mut w = w.into_inner();
            update(
                w.as_slice_mut().expect("standard layout"),
                gw.as_slice().expect("standard layout"),
                &mut self.weight_velocity,
            );
            let diverged = Error::NonFiniteLoss { step: self.steps };
            let overflow = row_norms(w.view()).map_or(true, |n| n.iter().any(|x| !x.is_finite()));
            if overflow {
                return Err(diverged);
            }
            let w = normalize_rows(w.view()).map_err(|_| diverged)?;
            self.weights = Some(ClassWeightMatrix::new(w)?);
        }
        if self
            .encoder
            .params_mut()
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        self.steps += 1;
        Ok(value)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            loss: self.loss,
            margin: self.margin,
            encoder: self.encoder,
            weights: self.weights,
        }
    }
}

/// Scales used for `cfg` on a set with `classes` identities, and the
/// sampler's expected negatives per batch.
pub fn resolve_margin(cfg: &TrainConfig, classes: usize) -> Result<(MarginConfig, Option<f64>, f64)> {
    let negatives = expected_negatives(cfg.sampler_kind(), cfg.batch_size, classes);
    match cfg.scale {
        ScaleSpec::Fixed(m) => Ok((m, None, negatives)),
        ScaleSpec::Unified { epsilon, m } => {
            let l = (negatives.round() as usize).max(1);
            let scale = derive_unified_scale(epsilon, classes, l, m)?;
            Ok((scale.margin_config(m), Some(epsilon), negatives))
        }
    }
}

/// Trains on `set`, scoring every entry of `evals` after each epoch.
pub fn fit(set: &LabeledSet, evals: &[(String, VerificationSet)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (margin, epsilon, expected) = resolve_margin(cfg, set.num_classes)?;
    let sampler = cfg.sampler_kind();
    let mut state = TrainState::new(set.input_dim(), set.num_classes, margin, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xBA7C]));

    let steps_per_epoch = (set.len() / cfg.batch_size).max(1);
    let total = steps_per_epoch * cfg.epochs;
    let header = LogHeader {
        loss: cfg.loss,
        sampler,
        s1: margin.s1,
        s2: margin.s2,
        m: margin.m,
        epsilon,
        classes: set.num_classes,
        expected_negatives: expected,
        train_id: None,
        train_samples: set.len(),
        steps_per_epoch,
        config: cfg.clone(),
        note: PROTOCOL_NOTE.into(),
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for k in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + k;
            lr = lr_schedule(step as f64 / total as f64, cfg);
            let idx = sample_batch(set, sampler, cfg.batch_size, &mut rng)?;
            let (x, labels) = set.gather(&idx);
            loss_sum += state.step(x.view(), &labels, lr)?;
        }
        let mut accuracy = BTreeMap::new();
        for (name, pairs) in evals {
            accuracy.insert(name.clone(), evaluator::accuracy(&state.encoder, pairs)?);
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            mean_loss: loss_sum / steps_per_epoch as f64,
            accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome {
        model: state.into_model(),
        log: MetricLog { header, epochs },
    })
}

/// Trains on `T_i` of `split` and scores Q1..Q4 after every epoch.
pub fn train(split: &DatasetSplit, id: TrainId, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let set = train_set(split, id)?;
    let evals = TestId::ALL
        .iter()
        .map(|&q| {
            Ok((
                q.to_string().to_lowercase(),
                VerificationSet::from_split(split, q)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = fit(&set, &evals, cfg)?;
    out.log.header.train_id = Some(id.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests;
