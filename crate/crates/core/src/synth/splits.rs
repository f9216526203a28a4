use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::derive_seed;
use super::{Attribute, Condition, Sample, TestId, TrainId, Universe, NUM_POSES};
use crate::error::{Error, Result};

/// Pair counts of Q1..Q4 before scaling.
pub const PAPER_PAIR_COUNTS: [usize; 4] = [1_000, 100_000, 100_000, 100_000];

/// Two sample indices and whether they share an identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Materialized T1..T4 index sets and Q1..Q4 pair lists over one sample
/// store.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
    pub train_identities: usize,
    pub train_sets: [Vec<usize>; 4],
    pub test_sets: [Vec<VerificationPair>; 4],
}

impl DatasetSplit {
    pub fn train_set(&self, id: TrainId) -> &[usize] {
        &self.train_sets[id.index()]
    }

    pub fn test_set(&self, id: TestId) -> &[VerificationPair] {
        &self.test_sets[id.index()]
    }

    pub fn is_train_identity(&self, identity: usize) -> bool {
        identity < self.train_identities
    }
}

/// Groups of sample indices, one group per identity.
struct Groups {
    members: Vec<Vec<usize>>,
}

impl Groups {
    fn new(by_identity: BTreeMap<usize, Vec<usize>>) -> Self {
        Self {
            members: by_identity.into_values().collect(),
        }
    }

    fn positive_total(&self) -> usize {
        self.members
            .iter()
            .map(|g| g.len() * g.len().saturating_sub(1) / 2)
            .sum()
    }

    fn negative_total(&self) -> usize {
        let n: usize = self.members.iter().map(Vec::len).sum();
        n * n.saturating_sub(1) / 2 - self.positive_total()
    }

    /// The `rank`-th same-group pair.
    fn positive_at(&self, mut rank: usize) -> (usize, usize) {
        for g in &self.members {
            let count = g.len() * g.len().saturating_sub(1) / 2;
            if rank < count {
                let (i, j) = unrank_triangle(rank, g.len());
                return (g[i], g[j]);
            }
            rank -= count;
        }
        unreachable!("rank beyond positive pair count")
    }

    /// The `rank`-th cross-group pair.
    fn negative_at(&self, mut rank: usize) -> (usize, usize) {
        for (gi, g) in self.members.iter().enumerate() {
            for h in &self.members[gi + 1..] {
                let count = g.len() * h.len();
                if rank < count {
                    return (g[rank / h.len()], h[rank % h.len()]);
                }
                rank -= count;
            }
        }
        unreachable!("rank beyond negative pair count")
    }
}

/// Maps `rank < n(n-1)/2` to the pair `(i, j)`, `i < j`, in row-major order.
fn unrank_triangle(mut rank: usize, n: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - i - 1;
        if rank < row {
            return (i, i + 1 + rank);
        }
        rank -= row;
    }
    unreachable!("rank beyond triangle")
}

/// Draws `positives` same-identity and `negatives` cross-identity pairs,
/// each uniformly without replacement.
fn sample_pairs(
    groups: &Groups,
    positives: usize,
    negatives: usize,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<Vec<(usize, usize, bool)>> {
    let (pos_total, neg_total) = (groups.positive_total(), groups.negative_total());
    if positives > pos_total || negatives > neg_total {
        return Err(Error::InsufficientSamples(format!(
            "{what}: requested {positives}+/{negatives}- pairs, only {pos_total}+/{neg_total}- exist"
        )));
    }
    let mut out = Vec::with_capacity(positives + negatives);
    let mut pos = index::sample(rng, pos_total, positives).into_vec();
    pos.sort_unstable();
    out.extend(pos.into_iter().map(|r| {
        let (a, b) = groups.positive_at(r);
        (a, b, true)
    }));
    let mut neg = index::sample(rng, neg_total, negatives).into_vec();
    neg.sort_unstable();
    out.extend(neg.into_iter().map(|r| {
        let (a, b) = groups.negative_at(r);
        (a, b, false)
    }));
    Ok(out)
}

fn split_counts(total: usize) -> (usize, usize) {
    let positives = total / 2;
    (positives, total - positives)
}

/// Builds T1..T4 from the train identities' samples of each row and draws
/// Q1..Q4 from the test identities' samples, with pair counts
/// `PAPER_PAIR_COUNTS · scaling` split 1:1.
pub fn build_splits(universe: &Universe, scaling: f64) -> Result<DatasetSplit> {
    if !(scaling.is_finite() && scaling > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "pair scaling {scaling} must be positive"
        )));
    }
    let cfg = universe.config();
    let mut train_sets: [Vec<usize>; 4] = Default::default();
    let mut test_groups: [BTreeMap<usize, Vec<usize>>; 4] = Default::default();
    for (i, (s, &origin)) in universe.samples.iter().zip(&universe.origins).enumerate() {
        let row = usize::from(origin) - 1;
        if universe.model.is_train_identity(s.identity) {
            train_sets[row].push(i);
        } else {
            test_groups[row].entry(s.identity).or_default().push(i);
        }
    }

    let mut test_sets: [Vec<VerificationPair>; 4] = Default::default();
    for (row, groups) in test_groups.into_iter().enumerate() {
        let total = (PAPER_PAIR_COUNTS[row] as f64 * scaling).round() as usize;
        let (pos, neg) = split_counts(total);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, row as u64, 0x9A1B]));
        let name = TestId::from_index(row).map(|q| q.to_string()).unwrap_or_default();
        test_sets[row] = sample_pairs(&Groups::new(groups), pos, neg, &mut rng, &name)?
            .into_iter()
            .map(|(a, b, same)| VerificationPair { a, b, same })
            .collect();
    }

    Ok(DatasetSplit {
        samples: universe.samples.clone(),
        train_identities: cfg.train_identities,
        train_sets,
        test_sets,
    })
}

/// Knobs for [`single_condition_grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleConditionOptions {
    /// Attribute values on both axes; `None` picks a default per attribute.
    pub values: Option<Vec<u8>>,
    /// Test pairs per cell.
    pub pair_budget: usize,
    /// Noise draws per (train identity, pose).
    pub train_draws: usize,
}

impl Default for SingleConditionOptions {
    fn default() -> Self {
        Self {
            values: None,
            pair_budget: 500,
            train_draws: 1,
        }
    }
}

impl SingleConditionOptions {
    pub fn resolved_values(&self, attribute: Attribute) -> Result<Vec<u8>> {
        let values = match &self.values {
            Some(v) => v.clone(),
            None => match attribute {
                Attribute::Lux => vec![1, 10, 20, 29],
                _ => (1..=attribute.domain_size()).collect(),
            },
        };
        if values.is_empty() || values.iter().any(|&v| v == 0 || v > attribute.domain_size()) {
            return Err(Error::InvalidConfig(format!(
                "{attribute} values must lie in 1..={}",
                attribute.domain_size()
            )));
        }
        Ok(values)
    }
}

/// Training sets fixed at one attribute value and a shared test pair
/// template converted to each value. Cell `(i, j)` pairs
/// `train_sets[i]` with `test_sets[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleConditionGrid {
    pub attribute: Attribute,
    pub base: Condition,
    pub values: Vec<u8>,
    pub train_identities: usize,
    pub train_sets: Vec<Vec<Sample>>,
    pub test_sets: Vec<Vec<(Sample, Sample, bool)>>,
}

impl SingleConditionGrid {
    pub fn cell(&self, train: usize, test: usize) -> (&[Sample], &[(Sample, Sample, bool)]) {
        (&self.train_sets[train], &self.test_sets[test])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Holds every attribute at `base` except `attribute`, lets poses range over
/// C1..C20, and renders one training set per value plus one test pair set
/// per value from a single template of unique (identity, pose) pairs.
pub fn single_condition_grid(
    universe: &Universe,
    attribute: Attribute,
    base: Condition,
    options: &SingleConditionOptions,
) -> Result<SingleConditionGrid> {
    let values = options.resolved_values(attribute)?;
    if options.pair_budget < 2 || options.train_draws == 0 {
        return Err(Error::InvalidConfig(
            "pair_budget >= 2 and train_draws >= 1 required".into(),
        ));
    }
    let model = &universe.model;
    let cfg = model.config();
    let poses: Vec<u8> = (1..=NUM_POSES).collect();

    let train_sets = values
        .iter()
        .map(|&v| {
            let mut set = Vec::new();
            for identity in 0..cfg.train_identities {
                for &pose in &poses {
                    let cond = Condition {
                        pose,
                        ..base.with(attribute, v)
                    };
                    for draw in 0..options.train_draws {
                        set.push(model.sample(identity, cond, 100 + draw as u64));
                    }
                }
            }
            set
        })
        .collect();

    // Slots are (test identity, pose); group them by identity.
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut slots = Vec::new();
    for identity in cfg.train_identities..cfg.num_identities() {
        for &pose in &poses {
            by_identity.entry(identity).or_default().push(slots.len());
            slots.push((identity, pose));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, attribute as u64, base.code(), 0x51C0]));
    let (pos, neg) = split_counts(options.pair_budget);
    let template = sample_pairs(&Groups::new(by_identity), pos, neg, &mut rng, "condition grid")?;

    let test_sets = values
        .iter()
        .map(|&v| {
            let render = |slot: usize| {
                let (identity, pose) = slots[slot];
                model.sample(
                    identity,
                    Condition {
                        pose,
                        ..base.with(attribute, v)
                    },
                    200,
                )
            };
            template
                .iter()
                .map(|&(a, b, same)| (render(a), render(b), same))
                .collect()
        })
        .collect();

    Ok(SingleConditionGrid {
        attribute,
        base,
        values,
        train_identities: cfg.train_identities,
        train_sets,
        test_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, ConditionSpec, SynthConfig};
    use std::collections::HashSet;

    fn universe(seed: u64) -> Universe {
        generate_dataset(SynthConfig {
            train_identities: 10,
            test_identities: 4,
            samples_per_identity: 24,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn unrank_covers_triangle() {
        let n = 6;
        let pairs: Vec<_> = (0..15).map(|r| unrank_triangle(r, n)).collect();
        let unique: HashSet<_> = pairs.iter().collect();
        assert_eq!(unique.len(), 15);
        assert!(pairs.iter().all(|&(i, j)| i < j && j < n));
    }

    #[test]
    fn splits_respect_row_specs() {
        let u = universe(1);
        let split = build_splits(&u, 0.01).unwrap();
        for t in TrainId::ALL {
            let spec = t.spec();
            for &i in split.train_set(t) {
                let s = &split.samples[i];
                assert!(spec.contains(&s.condition));
                assert!(split.is_train_identity(s.identity));
            }
        }
        let t1 = ConditionSpec::table_row(1).unwrap();
        assert_eq!(split.train_set(TrainId::T1).len(), 10 * t1.size());
    }

    #[test]
    fn pair_counts_and_balance() {
        let u = universe(2);
        let split = build_splits(&u, 0.01).unwrap();
        let counts: Vec<_> = TestId::ALL.iter().map(|&q| split.test_set(q).len()).collect();
        assert_eq!(counts, vec![10, 1000, 1000, 1000]);
        for q in TestId::ALL {
            let set = split.test_set(q);
            let pos = set.iter().filter(|p| p.same).count();
            assert_eq!(2 * pos, set.len());
            let spec = q.spec();
            let mut seen = HashSet::new();
            for p in set {
                let (a, b) = (&split.samples[p.a], &split.samples[p.b]);
                assert_eq!(p.same, a.identity == b.identity);
                assert!(!split.is_train_identity(a.identity));
                assert!(!split.is_train_identity(b.identity));
                assert!(spec.contains(&a.condition) && spec.contains(&b.condition));
                assert!(seen.insert((p.a.min(p.b), p.a.max(p.b))), "duplicate pair");
            }
        }
    }

    #[test]
    fn too_many_pairs_is_an_error() {
        let u = universe(3);
        assert!(matches!(
            build_splits(&u, 1.0),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn expression_grid_shape() {
        let u = universe(4);
        let base = Condition::new(1, 1, 1, 1).unwrap();
        let opts = SingleConditionOptions {
            pair_budget: 40,
            ..Default::default()
        };
        let grid = single_condition_grid(&u, Attribute::Expression, base, &opts).unwrap();
        assert_eq!(grid.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let (train, test) = grid.cell(i, j);
                assert_eq!(test.len(), 40);
                assert!(train.iter().all(|s| s.condition.expression == grid.values[i]));
                assert!(test
                    .iter()
                    .all(|(a, b, _)| a.condition.expression == grid.values[j]
                        && b.condition.expression == grid.values[j]));
                assert!(train
                    .iter()
                    .all(|s| s.condition.accessory == 1 && s.condition.lux == 1));
            }
        }
        // One template: identities and poses agree across converted sets.
        for (x, y) in grid.test_sets[0].iter().zip(&grid.test_sets[2]) {
            assert_eq!(x.0.identity, y.0.identity);
            assert_eq!(x.1.condition.pose, y.1.condition.pose);
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn grid_rejects_bad_values() {
        let u = universe(5);
        let base = Condition::new(1, 1, 1, 1).unwrap();
        let opts = SingleConditionOptions {
            values: Some(vec![1, 4]),
            ..Default::default()
        };
        assert!(single_condition_grid(&u, Attribute::Expression, base, &opts).is_err());
    }
}
