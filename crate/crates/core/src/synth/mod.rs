//! Synthetic identities under a fine-grained condition lattice
//! (accessory × lux × expression × pose) and the four nested train/test
//! rows built from it.

mod generator;
mod splits;
mod store;

pub(crate) use generator::derive_seed;
pub use generator::{generate_dataset, ConditionEffects, ConditionModel, SynthConfig, Universe};
pub use splits::{
    build_splits, single_condition_grid, DatasetSplit, SingleConditionGrid, SingleConditionOptions,
    VerificationPair, PAPER_PAIR_COUNTS,
};
pub use store::{load_dataset, save_dataset, DatasetMeta};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACCESSORIES: u8 = 6;
pub const NUM_LUX_LEVELS: u8 = 29;
pub const NUM_EXPRESSIONS: u8 = 3;
pub const NUM_POSES: u8 = 20;

const LUX_FLOOR: f64 = 40.0;
const LUX_CEILING: f64 = 1000.0;

/// Lux value of level `L{level}`; L1 is the brightest (1000 lux) and L29 the
/// darkest (40 lux), log-spaced in between.
pub fn lux_value(level: u8) -> f64 {
    let steps = f64::from(NUM_LUX_LEVELS - 1);
    let k = f64::from(NUM_LUX_LEVELS - level);
    LUX_FLOOR * (LUX_CEILING / LUX_FLOOR).powf(k / steps)
}

/// Level whose lux value is closest to `lux`.
pub fn lux_level(lux: f64) -> u8 {
    (1..=NUM_LUX_LEVELS)
        .min_by(|&a, &b| (lux_value(a) - lux).abs().total_cmp(&(lux_value(b) - lux).abs()))
        .unwrap_or(1)
}

/// One cell of the lattice. All members are 1-based labels: `A1..A6`,
/// `L1..L29`, `E1..E3`, `C1..C20`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub accessory: u8,
    pub lux: u8,
    pub expression: u8,
    pub pose: u8,
}

impl Condition {
    pub fn new(accessory: u8, lux: u8, expression: u8, pose: u8) -> Result<Self> {
        let c = Self {
            accessory,
            lux,
            expression,
            pose,
        };
        ConditionSpec::full().check(&c)?;
        Ok(c)
    }

    pub fn lux_value(&self) -> f64 {
        lux_value(self.lux)
    }

    pub fn get(&self, attribute: Attribute) -> u8 {
        match attribute {
            Attribute::Accessory => self.accessory,
            Attribute::Lux => self.lux,
            Attribute::Expression => self.expression,
        }
    }

    pub fn with(mut self, attribute: Attribute, value: u8) -> Self {
        match attribute {
            Attribute::Accessory => self.accessory = value,
            Attribute::Lux => self.lux = value,
            Attribute::Expression => self.expression = value,
        }
        self
    }

    /// Packs the condition into one integer (used for seeding).
    pub(crate) fn code(&self) -> u64 {
        u64::from(self.accessory) << 24
            | u64::from(self.lux) << 16
            | u64::from(self.expression) << 8
            | u64::from(self.pose)
    }
}

/// Attributes that a single-condition grid can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Accessory,
    Lux,
    Expression,
}

impl Attribute {
    pub fn domain_size(self) -> u8 {
        match self {
            Attribute::Accessory => NUM_ACCESSORIES,
            Attribute::Lux => NUM_LUX_LEVELS,
            Attribute::Expression => NUM_EXPRESSIONS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Accessory => "accessory",
            Attribute::Lux => "lux",
            Attribute::Expression => "expression",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accessory" | "accessories" | "a" => Ok(Attribute::Accessory),
            "lux" | "illumination" | "light" | "l" => Ok(Attribute::Lux),
            "expression" | "e" => Ok(Attribute::Expression),
            _ => Err(Error::InvalidConfig(format!("unknown attribute `{s}`"))),
        }
    }
}

/// A sub-lattice: one ordered value set per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub accessories: Vec<u8>,
    pub lux_levels: Vec<u8>,
    pub expressions: Vec<u8>,
    pub poses: Vec<u8>,
}

fn normalized_set(values: &[u8], max: u8, what: &str) -> Result<Vec<u8>> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} set is empty")));
    }
    if v[0] == 0 || v[v.len() - 1] > max {
        return Err(Error::InvalidConfig(format!(
            "{what} values must lie in 1..={max}"
        )));
    }
    Ok(v)
}

impl ConditionSpec {
    pub fn new(accessories: &[u8], lux_levels: &[u8], expressions: &[u8], poses: &[u8]) -> Result<Self> {
        Ok(Self {
            accessories: normalized_set(accessories, NUM_ACCESSORIES, "accessory")?,
            lux_levels: normalized_set(lux_levels, NUM_LUX_LEVELS, "lux")?,
            expressions: normalized_set(expressions, NUM_EXPRESSIONS, "expression")?,
            poses: normalized_set(poses, NUM_POSES, "pose")?,
        })
    }

    pub fn full() -> Self {
        Self {
            accessories: (1..=NUM_ACCESSORIES).collect(),
            lux_levels: (1..=NUM_LUX_LEVELS).collect(),
            expressions: (1..=NUM_EXPRESSIONS).collect(),
            poses: (1..=NUM_POSES).collect(),
        }
    }

    /// Row `row` (1..=4) of the nested train/test table:
    ///
    /// | row | A    | lux       | E    | pose    |
    /// |-----|------|-----------|------|---------|
    /// | 1   | A1   | 1000      | E1   | C4-10   |
    /// | 2   | A1-2 | 400-1000  | E1   | C4-10   |
    /// | 3   | A1-4 | 200-1000  | E1-2 | C4-13   |
    /// | 4   | A1-6 | 40-1000   | E1-3 | C1-20   |
    pub fn table_row(row: usize) -> Result<Self> {
        let (acc, lux_floor, expr, poses) = match row {
            1 => (1, 1000.0, 1, 4..=10),
            2 => (2, 400.0, 1, 4..=10),
            3 => (4, 200.0, 2, 4..=13),
            4 => (6, 40.0, 3, 1..=20),
            _ => return Err(Error::InvalidConfig(format!("table row {row} not in 1..=4"))),
        };
        let lux: Vec<u8> = (1..=NUM_LUX_LEVELS)
            .filter(|&l| lux_value(l) >= lux_floor * (1.0 - 1e-12))
            .collect();
        Self::new(
            &(1..=acc).collect::<Vec<_>>(),
            &lux,
            &(1..=expr).collect::<Vec<_>>(),
            &poses.collect::<Vec<_>>(),
        )
    }

    pub fn contains(&self, c: &Condition) -> bool {
        self.accessories.contains(&c.accessory)
            && self.lux_levels.contains(&c.lux)
            && self.expressions.contains(&c.expression)
            && self.poses.contains(&c.pose)
    }

    fn check(&self, c: &Condition) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("condition {c} outside the lattice")))
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        let sub = |a: &[u8], b: &[u8]| a.iter().all(|v| b.contains(v));
        sub(&self.accessories, &other.accessories)
            && sub(&self.lux_levels, &other.lux_levels)
            && sub(&self.expressions, &other.expressions)
            && sub(&self.poses, &other.poses)
    }

    pub fn size(&self) -> usize {
        self.accessories.len() * self.lux_levels.len() * self.expressions.len() * self.poses.len()
    }

    /// Every condition of the sub-lattice in lexicographic order.
    pub fn lattice(&self) -> Vec<Condition> {
        let mut out = Vec::with_capacity(self.size());
        for &accessory in &self.accessories {
            for &lux in &self.lux_levels {
                for &expression in &self.expressions {
                    for &pose in &self.poses {
                        out.push(Condition {
                            accessory,
                            lux,
                            expression,
                            pose,
                        });
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(A{}, L{}, E{}, C{})",
            self.accessory, self.lux, self.expression, self.pose
        )
    }
}

/// One rendered observation of an identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub identity: usize,
    pub condition: Condition,
    pub features: Vec<f64>,
}

/// The four training rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainId {
    T1,
    T2,
    T3,
    T4,
}

/// The four test rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestId {
    Q1,
    Q2,
    Q3,
    Q4,
}

macro_rules! row_id {
    ($ty:ident, $prefix:literal, [$($v:ident),*]) => {
        impl $ty {
            pub const ALL: [$ty; 4] = [$($ty::$v),*];

            /// Zero-based row index.
            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn spec(self) -> ConditionSpec {
                ConditionSpec::table_row(self.index() + 1).expect("rows 1..=4 exist")
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.index() + 1)
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let digits = s
                    .strip_prefix($prefix)
                    .or_else(|| s.strip_prefix(&$prefix.to_ascii_lowercase()))
                    .unwrap_or(s);
                digits
                    .parse::<usize>()
                    .ok()
                    .and_then(|n| n.checked_sub(1))
                    .and_then(Self::from_index)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown id `{s}`")))
            }
        }
    };
}

row_id!(TrainId, "T", [T1, T2, T3, T4]);
row_id!(TestId, "Q", [Q1, Q2, Q3, Q4]);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_endpoints_and_monotonicity() {
        assert!((lux_value(1) - 1000.0).abs() < 1e-9);
        assert!((lux_value(29) - 40.0).abs() < 1e-9);
        for l in 1..29 {
            assert!(lux_value(l) > lux_value(l + 1));
            assert_eq!(lux_level(lux_value(l)), l);
        }
    }

    #[test]
    fn table_rows_are_nested() {
        let rows: Vec<_> = (1..=4).map(|r| ConditionSpec::table_row(r).unwrap()).collect();
        for w in rows.windows(2) {
            assert!(w[0].is_subset_of(&w[1]));
            assert!(!w[1].is_subset_of(&w[0]));
        }
        assert_eq!(rows[3], ConditionSpec::full());
        let t1 = &rows[0];
        assert_eq!(t1.accessories, vec![1]);
        assert_eq!(t1.lux_levels, vec![1]);
        assert_eq!(t1.expressions, vec![1]);
        assert_eq!(t1.poses, (4..=10).collect::<Vec<_>>());
        assert_eq!(t1.size(), 7);
        assert_eq!(rows[3].size(), 6 * 29 * 3 * 20);
    }

    #[test]
    fn spec_validation() {
        assert!(ConditionSpec::new(&[], &[1], &[1], &[1]).is_err());
        assert!(ConditionSpec::new(&[7], &[1], &[1], &[1]).is_err());
        assert!(ConditionSpec::new(&[1], &[0], &[1], &[1]).is_err());
        assert!(Condition::new(1, 30, 1, 1).is_err());
        let s = ConditionSpec::new(&[2, 1, 2], &[3], &[1], &[5]).unwrap();
        assert_eq!(s.accessories, vec![1, 2]);
    }

    #[test]
    fn row_ids_parse() {
        assert_eq!("T3".parse::<TrainId>().unwrap(), TrainId::T3);
        assert_eq!("q2".parse::<TestId>().unwrap(), TestId::Q2);
        assert!("T5".parse::<TrainId>().is_err());
        assert!("T0".parse::<TrainId>().is_err());
        assert_eq!(TestId::Q4.to_string(), "Q4");
    }
}
