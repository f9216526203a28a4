//! On-disk dataset layout:
//!
//! ```text
//! meta.json          generator config, pair scaling, row specs, counts
//! samples.csv        id,accessory,lux,expression,pose,f0..f{D-1}
//! pairs_Q{1..4}.csv  idx_a,idx_b,same_flag
//! train_sets.csv     train_id,sample_idx
//! identities.csv     identity,role
//! ```
//!
//! UTF-8, LF line endings, floats printed with 9 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    lux_level, Condition, ConditionSpec, DatasetSplit, Sample, SynthConfig, TestId, TrainId, VerificationPair,
};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub synth: SynthConfig,
    pub pair_scaling: f64,
    pub train_rows: Vec<ConditionSpec>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub num_samples: usize,
}

impl DatasetMeta {
    pub fn describe(split: &DatasetSplit, synth: &SynthConfig, pair_scaling: f64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            synth: synth.clone(),
            pair_scaling,
            train_rows: TrainId::ALL.iter().map(|t| t.spec()).collect(),
            train_counts: split.train_sets.iter().map(Vec::len).collect(),
            test_counts: split.test_sets.iter().map(Vec::len).collect(),
            num_samples: split.samples.len(),
        }
    }
}

/// Decimal rendering with 9 significant digits.
pub(crate) fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn read_file(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

pub fn save_dataset(dir: &Path, split: &DatasetSplit, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, "meta.json", &(serde_json::to_string_pretty(meta)? + "\n"))?;

    let dim = split.samples.first().map_or(0, |s| s.features.len());
    let mut out = String::from("id,accessory,lux,expression,pose");
    for k in 0..dim {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for s in &split.samples {
        let c = &s.condition;
        let _ = write!(
            out,
            "{},A{},{},E{},C{}",
            s.identity,
            c.accessory,
            fmt_sig9(c.lux_value()),
            c.expression,
            c.pose
        );
        for &v in &s.features {
            out.push(',');
            out.push_str(&fmt_sig9(v));
        }
        out.push('\n');
    }
    write_file(dir, "samples.csv", &out)?;

    for q in TestId::ALL {
        let mut out = String::from("idx_a,idx_b,same_flag\n");
        for p in split.test_set(q) {
            let _ = writeln!(out, "{},{},{}", p.a, p.b, u8::from(p.same));
        }
        write_file(dir, &format!("pairs_{q}.csv"), &out)?;
    }

    let mut out = String::from("train_id,sample_idx\n");
    for t in TrainId::ALL {
        for &i in split.train_set(t) {
            let _ = writeln!(out, "{t},{i}");
        }
    }
    write_file(dir, "train_sets.csv", &out)?;

    let mut out = String::from("identity,role\n");
    for id in 0..meta.synth.num_identities() {
        let role = if split.is_train_identity(id) {
            "train"
        } else {
            "test"
        };
        let _ = writeln!(out, "{id},{role}");
    }
    write_file(dir, "identities.csv", &out)
}

fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| (n + 1, l.split(',').collect()))
}

fn parse<T: std::str::FromStr>(field: &str, file: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(file, format!("line {line}: cannot parse `{field}`")))
}

fn parse_label(field: &str, prefix: char, file: &str, line: usize) -> Result<u8> {
    let digits = field.trim().strip_prefix(prefix).unwrap_or(field);
    parse(digits, file, line)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&read_file(dir, "meta.json")?)
        .map_err(|e| Error::format("meta.json", e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "meta.json",
            format!("unsupported format version {}", meta.format_version),
        ));
    }

    let text = read_file(dir, "samples.csv")?;
    let mut samples = Vec::with_capacity(meta.num_samples);
    for (line, f) in rows(&text) {
        if f.len() < 6 {
            return Err(Error::format(
                "samples.csv",
                format!("line {line}: too few columns"),
            ));
        }
        let condition = Condition::new(
            parse_label(f[1], 'A', "samples.csv", line)?,
            lux_level(parse(f[2], "samples.csv", line)?),
            parse_label(f[3], 'E', "samples.csv", line)?,
            parse_label(f[4], 'C', "samples.csv", line)?,
        )?;
        let features = f[5..]
            .iter()
            .map(|v| parse(v, "samples.csv", line))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            identity: parse(f[0], "samples.csv", line)?,
            condition,
            features,
        });
    }
    if samples.len() != meta.num_samples {
        return Err(Error::format(
            "samples.csv",
            format!("expected {} samples, found {}", meta.num_samples, samples.len()),
        ));
    }

    let check_index = |i: usize, file: &str, line: usize| {
        if i < samples.len() {
            Ok(i)
        } else {
            Err(Error::format(
                file,
                format!("line {line}: sample index {i} out of range"),
            ))
        }
    };

    let mut test_sets: [Vec<VerificationPair>; 4] = Default::default();
    for q in TestId::ALL {
        let name = format!("pairs_{q}.csv");
        let text = read_file(dir, &name)?;
        for (line, f) in rows(&text) {
            if f.len() != 3 {
                return Err(Error::format(&name, format!("line {line}: expected 3 columns")));
            }
            test_sets[q.index()].push(VerificationPair {
                a: check_index(parse(f[0], &name, line)?, &name, line)?,
                b: check_index(parse(f[1], &name, line)?, &name, line)?,
                same: parse::<u8>(f[2], &name, line)? == 1,
            });
        }
    }

    let mut train_sets: [Vec<usize>; 4] = Default::default();
    let text = read_file(dir, "train_sets.csv")?;
    for (line, f) in rows(&text) {
        if f.len() != 2 {
            return Err(Error::format(
                "train_sets.csv",
                format!("line {line}: expected 2 columns"),
            ));
        }
        let t: TrainId = f[0].parse()?;
        train_sets[t.index()].push(check_index(
            parse(f[1], "train_sets.csv", line)?,
            "train_sets.csv",
            line,
        )?);
    }

    Ok((
        DatasetSplit {
            samples,
            train_identities: meta.synth.train_identities,
            train_sets,
            test_sets,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_splits, generate_dataset};

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1000.0), "1000.00000");
        assert_eq!(fmt_sig9(-0.012345678912), "-0.0123456789");
        assert_eq!(fmt_sig9(1.23456789012), "1.23456789");
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SynthConfig {
            train_identities: 5,
            test_identities: 3,
            samples_per_identity: 12,
            input_dim: 8,
            effects: crate::synth::ConditionEffects {
                accessory_mask_dims: 2,
                ..Default::default()
            },
            ..SynthConfig::default()
        };
        let universe = generate_dataset(cfg.clone()).unwrap();
        let split = build_splits(&universe, 0.001).unwrap();
        let meta = DatasetMeta::describe(&split, &cfg, 0.001);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &split, &meta).unwrap();
        let (loaded, loaded_meta) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.train_sets, split.train_sets);
        assert_eq!(loaded.test_sets, split.test_sets);
        for (a, b) in loaded.samples.iter().zip(&split.samples) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.condition, b.condition);
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() <= 1e-8 * y.abs().max(1e-3));
            }
        }
        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 8);
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/mixlab")),
            Err(Error::Io { .. })
        ));
    }
}
