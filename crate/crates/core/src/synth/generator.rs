use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Condition, ConditionSpec, Sample, NUM_ACCESSORIES, NUM_EXPRESSIONS, NUM_POSES};
use crate::error::{Error, Result};

/// Pose treated as frontal (no rotation).
const FRONTAL_POSE: u8 = 7;

/// Strength of each condition's effect on the rendered features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEffects {
    /// Rotation angle (radians) at the most extreme pose.
    pub pose_angle: f64,
    /// Norm of the additive offset for E2 and E3.
    pub expression_offset: f64,
    /// Coordinates zeroed by each of A2..A6.
    pub accessory_mask_dims: usize,
    /// Gain exponent: `gain = (lux / 1000)^gamma`.
    pub lux_gamma: f64,
    /// Weight of the shared dark-frame vector at zero gain.
    pub dark_level: f64,
    /// Extra noise standard deviation at zero gain.
    pub low_lux_noise: f64,
}

impl Default for ConditionEffects {
    fn default() -> Self {
        Self {
            pose_angle: 0.6,
            expression_offset: 0.25,
            accessory_mask_dims: 6,
            lux_gamma: 0.5,
            dark_level: 0.6,
            low_lux_noise: 0.1,
        }
    }
}

impl ConditionEffects {
    /// Conditions leave the features untouched.
    pub fn none() -> Self {
        Self {
            pose_angle: 0.0,
            expression_offset: 0.0,
            accessory_mask_dims: 0,
            lux_gamma: 0.0,
            dark_level: 0.0,
            low_lux_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub input_dim: usize,
    pub noise: f64,
    /// Conditions drawn per identity for each table row (capped by the
    /// row's lattice size).
    pub samples_per_identity: usize,
    pub seed: u64,
    pub effects: ConditionEffects,
}

impl Default for SynthConfig {
    /// Desk scale: a fifth of the 370/30 identity split.
    fn default() -> Self {
        Self {
            train_identities: 74,
            test_identities: 6,
            input_dim: 32,
            noise: 0.05,
            samples_per_identity: 48,
            seed: 0,
            effects: ConditionEffects::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.train_identities < 2 || self.test_identities < 2 {
            return bad("need at least 2 train and 2 test identities".into());
        }
        if self.input_dim < 4 {
            return bad(format!("input_dim {} < 4", self.input_dim));
        }
        if self.effects.accessory_mask_dims >= self.input_dim {
            return bad("accessory mask covers the whole input".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if self.samples_per_identity < 2 {
            return bad("samples_per_identity must be >= 2".into());
        }
        Ok(())
    }

    pub fn num_identities(&self) -> usize {
        self.train_identities + self.test_identities
    }
}

/// Deterministic renderer: identity prototypes plus fixed per-condition
/// transforms. Every feature vector is a pure function of
/// `(identity, condition, draw)`.
#[derive(Debug, Clone)]
pub struct ConditionModel {
    config: SynthConfig,
    prototypes: Array2<f64>,
    pose_basis: Array2<f64>,
    expression_offsets: Vec<Array1<f64>>,
    accessory_masks: Vec<Vec<usize>>,
    dark_frame: Array1<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| splitmix(acc ^ splitmix(p)))
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.sample(StandardNormal))
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Orthonormal basis from Gram-Schmidt on a Gaussian matrix (columns).
fn random_orthonormal(rng: &mut impl Rng, n: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((n, n));
    let mut col = 0;
    while col < n {
        let mut v = gaussian_vec(rng, n);
        for k in 0..col {
            let proj = v.dot(&q.column(k));
            v.scaled_add(-proj, &q.column(k));
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            q.column_mut(col).assign(&(v / norm));
            col += 1;
        }
    }
    q
}

impl ConditionModel {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0xC0DE]));

        let mut prototypes = Array2::zeros((config.num_identities(), d));
        for mut row in prototypes.outer_iter_mut() {
            row.assign(&unit_vec(&mut rng, d));
        }
        let pose_basis = random_orthonormal(&mut rng, d);
        let expression_offsets = (0..NUM_EXPRESSIONS)
            .map(|e| {
                if e == 0 {
                    Array1::zeros(d)
                } else {
                    unit_vec(&mut rng, d) * config.effects.expression_offset
                }
            })
            .collect();
        let accessory_masks = (0..NUM_ACCESSORIES)
            .map(|a| {
                if a == 0 {
                    Vec::new()
                } else {
                    let mut dims = index::sample(&mut rng, d, config.effects.accessory_mask_dims).into_vec();
                    dims.sort_unstable();
                    dims
                }
            })
            .collect();
        let dark_frame = unit_vec(&mut rng, d);

        Ok(Self {
            config,
            prototypes,
            pose_basis,
            expression_offsets,
            accessory_masks,
            dark_frame,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn is_train_identity(&self, identity: usize) -> bool {
        identity < self.config.train_identities
    }

    /// Multiplicative gain at a lux level, in (0, 1].
    pub fn lux_gain(&self, c: &Condition) -> f64 {
        (c.lux_value() / 1000.0).powf(self.config.effects.lux_gamma)
    }

    fn pose_rotate(&self, v: &Array1<f64>, pose: u8) -> Array1<f64> {
        let span = f64::from(NUM_POSES - FRONTAL_POSE);
        let angle = self.config.effects.pose_angle * (f64::from(pose) - f64::from(FRONTAL_POSE)) / span;
        if angle == 0.0 {
            return v.clone();
        }
        let (s, c) = angle.sin_cos();
        let mut u = self.pose_basis.t().dot(v);
        // Rotate the first half of the basis in consecutive planes.
        let planes = self.config.input_dim / 4;
        for p in 0..planes {
            let (a, b) = (u[2 * p], u[2 * p + 1]);
            u[2 * p] = c * a - s * b;
            u[2 * p + 1] = s * a + c * b;
        }
        self.pose_basis.dot(&u)
    }

    /// Features of `identity` under `condition`; `draw` selects the noise
    /// realization.
    pub fn render(&self, identity: usize, condition: &Condition, draw: u64) -> Vec<f64> {
        let fx = &self.config.effects;
        let base =
            &self.prototypes.row(identity) + &self.expression_offsets[usize::from(condition.expression - 1)];
        let gain = self.lux_gain(condition);
        let mut v = self.pose_rotate(&base, condition.pose) * gain;
        v.scaled_add((1.0 - gain) * fx.dark_level, &self.dark_frame);
        for &k in &self.accessory_masks[usize::from(condition.accessory - 1)] {
            v[k] = 0.0;
        }
        let sigma = self.config.noise + fx.low_lux_noise * (1.0 - gain);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.config.seed,
            identity as u64,
            condition.code(),
            draw,
        ]));
        v.iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                x + sigma * z
            })
            .collect()
    }

    pub fn sample(&self, identity: usize, condition: Condition, draw: u64) -> Sample {
        Sample {
            identity,
            features: self.render(identity, &condition, draw),
            condition,
        }
    }
}

/// Rendered samples for every identity and table row, plus the renderer
/// that produced them.
#[derive(Debug, Clone)]
pub struct Universe {
    pub model: ConditionModel,
    pub samples: Vec<Sample>,
    /// Table row (1..=4) each sample was drawn for.
    pub origins: Vec<u8>,
}

impl Universe {
    pub fn config(&self) -> &SynthConfig {
        self.model.config()
    }
}

/// Renders, for every identity and each table row, up to
/// `samples_per_identity` distinct conditions drawn uniformly from that
/// row's sub-lattice.
pub fn generate_dataset(config: SynthConfig) -> Result<Universe> {
    let model = ConditionModel::new(config)?;
    let cfg = model.config().clone();
    let rows: Vec<ConditionSpec> = (1..=4).map(ConditionSpec::table_row).collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut origins = Vec::new();
    for identity in 0..cfg.num_identities() {
        for (r, spec) in rows.iter().enumerate() {
            let lattice = spec.lattice();
            let take = cfg.samples_per_identity.min(lattice.len());
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, identity as u64, r as u64, 0xD1CE]));
            let mut picks = index::sample(&mut rng, lattice.len(), take).into_vec();
            picks.sort_unstable();
            for i in picks {
                samples.push(model.sample(identity, lattice[i], r as u64 + 1));
                origins.push(r as u8 + 1);
            }
        }
    }
    Ok(Universe {
        model,
        samples,
        origins,
    })
}
