//! Evaluation metrics comparing an original model with forged ones: parameter
//! distance, membership-prediction and score differences, and the
//! mini-batch uniformity statistic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attacks::{Attack, AttackSuite};
use crate::data::MiniBatchSpec;
use crate::error::{io_err, Error, Result};
use crate::model::ParamVector;
use crate::rng::{self, Domain};

/// `‖a − b‖² / dim`.
pub fn model_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    if a.is_empty() {
        return Err(Error::Empty("parameter vector".into()));
    }
    Ok(a.distance_sq(b) / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// The group's own samples.
    Diff,
    /// Random other training samples.
    Common,
    /// Random held-out samples.
    Validation,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Diff, Setting::Common, Setting::Validation];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Diff => "diff",
            Setting::Common => "common",
            Setting::Validation => "validation",
        }
    }
}

/// Probe sets (pool indices) for one forged group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub group: usize,
    pub diff: Vec<usize>,
    pub common: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Probe {
    pub fn samples(&self, setting: Setting) -> &[usize] {
        match setting {
            Setting::Diff => &self.diff,
            Setting::Common => &self.common,
            Setting::Validation => &self.validation,
        }
    }
}

/// Builds probes for each `(group id, members)` pair. Training samples are
/// pool indices `0..n_train`, held-out samples `n_train..n_train + n_val`.
pub fn make_probes(groups: &[(usize, Vec<usize>)], n_train: usize, n_val: usize, size: usize, seed: u64) -> Result<Vec<Probe>> {
    if size == 0 || n_val < size {
        return Err(Error::InvalidConfig(format!("cannot draw {size} validation probes from {n_val} samples")));
    }
    groups
        .iter()
        .map(|(g, members)| {
            let others: Vec<usize> = (0..n_train).filter(|i| !members.contains(i)).collect();
            if others.len() < size || members.is_empty() {
                return Err(Error::InvalidConfig(format!("group {g} leaves too few samples for probing")));
            }
            let mut rng = rng::stream(seed, Domain::Probes, *g as u64);
            let mut common: Vec<usize> = sample(&mut rng, others.len(), size).into_iter().map(|i| others[i]).collect();
            let mut validation: Vec<usize> = sample(&mut rng, n_val, size).into_iter().map(|i| n_train + i).collect();
            common.sort_unstable();
            validation.sort_unstable();
            Ok(Probe { group: *g, diff: members.clone(), common, validation })
        })
        .collect()
}

/// Percentage of pairs whose prediction vectors differ anywhere.
pub fn percent_differing(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no model pairs".into()));
    }
    let differing = pairs
        .iter()
        .filter(|(a, b)| a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x != y))
        .count();
    Ok(100.0 * differing as f64 / pairs.len() as f64)
}

/// Membership prediction difference per setting for one attack. Each entry
/// of `forged` pairs a probe with the forged model for its group.
pub fn prediction_diff(
    suite: &AttackSuite,
    attack: Attack,
    theta_star: &ParamVector,
    forged: &[(&Probe, &ParamVector)],
) -> Result<BTreeMap<Setting, f64>> {
    Setting::ALL
        .into_iter()
        .map(|setting| {
            let pairs = forged
                .iter()
                .map(|(probe, theta)| {
                    let u = probe.samples(setting);
                    if u.is_empty() {
                        return Err(Error::Empty(format!("{} probe set of group {}", setting.name(), probe.group)));
                    }
                    let bits = |p: &ParamVector| -> Result<Vec<bool>> {
                        Ok(suite.score_many(attack, p, u)?.into_iter().map(|s| s.prediction).collect())
                    };
                    Ok((bits(theta_star)?, bits(theta)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((setting, percent_differing(&pairs)?))
        })
        .collect()
}

/// `|score(θ_minus) − score(θ_star)|` for pool sample `i`.
pub fn score_diff(suite: &AttackSuite, attack: Attack, theta_star: &ParamVector, theta_minus: &ParamVector, i: usize) -> Result<f64> {
    Ok((suite.score(attack, theta_minus, i)?.score - suite.score(attack, theta_star, i)?.score).abs())
}

fn counts<'a>(batches: impl IntoIterator<Item = &'a MiniBatchSpec>, n: usize) -> Result<(Vec<u64>, u64)> {
    let mut counts = vec![0u64; n];
    let mut total = 0;
    for batch in batches {
        for &i in &batch.indices {
            *counts.get_mut(i).ok_or(Error::IndexOutOfRange { index: i, n })? += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("batch sequence".into()));
    }
    Ok((counts, total))
}

/// `Σ_i |f_i − 1/n|` over per-sample slot frequencies. Flip flags are ignored.
pub fn uniformity<'a>(batches: impl IntoIterator<Item = &'a MiniBatchSpec>, n: usize) -> Result<f64> {
    let (counts, total) = counts(batches, n)?;
    let uniform = 1.0 / n as f64;
    Ok(counts.iter().map(|&c| (c as f64 / total as f64 - uniform).abs()).sum())
}

/// `steps` batches, each drawn uniformly without replacement and
/// independently of the others: the reference process for [`uniformity`].
pub fn independent_batches(n: usize, batch_size: usize, steps: u64, seed: u64) -> Result<Vec<MiniBatchSpec>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidConfig(format!("batch size {batch_size} outside 1..={n}")));
    }
    let mut rng = rng::stream(seed, Domain::Synthetic, 0x5eed);
    Ok((0..steps).map(|_| MiniBatchSpec::unflipped(sample(&mut rng, n, batch_size).into_vec())).collect())
}

/// Per-sample frequencies sorted in descending order; they sum to 1.
pub fn freq_profile<'a>(batches: impl IntoIterator<Item = &'a MiniBatchSpec>, n: usize) -> Result<Vec<f64>> {
    let (counts, total) = counts(batches, n)?;
    let mut f: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    f.sort_by(|a, b| b.total_cmp(a));
    Ok(f)
}

/// Count, mean, standard error and quartiles of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        use crate::attacks::quantile;
        if values.is_empty() {
            return Err(Error::Empty("summary of no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            count: values.len(),
            mean,
            stderr,
            min: quantile(values, 0.0)?,
            q25: quantile(values, 0.25)?,
            median: quantile(values, 0.5)?,
            q75: quantile(values, 0.75)?,
            max: quantile(values, 1.0)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistance {
    pub group: usize,
    pub d_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: serde_json::Value,
    /// SHA-256 digests of the inputs, keyed by name.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    pub d_theta: Vec<GroupDistance>,
    pub d_theta_summary: Summary,
    /// Percentages per attack and setting.
    pub prediction_diff: BTreeMap<Attack, BTreeMap<Setting, f64>>,
    pub score_diff: BTreeMap<Attack, Summary>,
    pub uniformity: Summary,
    pub pairs: usize,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Long-format CSV: `metric,attack,setting,statistic,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,attack,setting,statistic,value\n");
        let mut row = |metric: &str, attack: &str, setting: &str, stat: &str, value: f64| {
            let _ = writeln!(out, "{metric},{attack},{setting},{stat},{}", fmt_f64(value));
        };
        let summary = |row: &mut dyn FnMut(&str, &str, &str, &str, f64), metric: &str, attack: &str, s: &Summary| {
            row(metric, attack, "", "count", s.count as f64);
            for (name, v) in
                [("mean", s.mean), ("stderr", s.stderr), ("min", s.min), ("q25", s.q25), ("median", s.median), ("q75", s.q75), ("max", s.max)]
            {
                row(metric, attack, "", name, v);
            }
        };
        for g in &self.d_theta {
            row("d_theta", "", "", &format!("group_{}", g.group), g.d_theta);
        }
        summary(&mut row, "d_theta", "", &self.d_theta_summary);
        for (attack, settings) in &self.prediction_diff {
            for (setting, pct) in settings {
                row("prediction_diff_pct", attack.name(), setting.name(), "value", *pct);
            }
        }
        for (attack, s) in &self.score_diff {
            summary(&mut row, "score_diff", attack.name(), s);
        }
        summary(&mut row, "uniformity_l1", "", &self.uniformity);
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [("metrics.json", self.to_json()?), ("metrics.csv", self.to_csv())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Gnuplot-friendly TSV: one row per rank, one column per profile.
pub fn profiles_tsv(profiles: &[(&str, &[f64])]) -> String {
    let mut out = String::from("rank");
    for (name, _) in profiles {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    let rows = profiles.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    for r in 0..rows {
        out.push_str(&r.to_string());
        for (_, p) in profiles {
            out.push('\t');
            if let Some(v) = p.get(r) {
                out.push_str(&fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_schedule;

    #[test]
    fn distance_examples() {
        let a = ParamVector::new(vec![1.0, 0.0]).unwrap();
        let b = ParamVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(model_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(model_distance(&a, &a).unwrap(), 0.0);
        assert!(model_distance(&a, &ParamVector::zeros(3)).is_err());
    }

    #[test]
    fn dataloader_schedule_is_uniform() {
        let s = make_schedule(50, 5, 3, 1, false).unwrap();
        assert_eq!(uniformity(&s.batches, 50).unwrap(), 0.0);
        let p = freq_profile(&s.batches, 50).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&f| f == p[0]));
    }

    #[test]
    fn independent_batches_match_half_normal_baseline() {
        // Slot counts are ~Binomial(bτ, 1/n); E|f - 1/n| summed gives sqrt(2/(π m)) with m = bτ/n.
        let batches = independent_batches(2000, 20, 2000, 4).unwrap();
        let u = uniformity(&batches, 2000).unwrap();
        let expected = (2.0 / (std::f64::consts::PI * 20.0)).sqrt();
        assert!((u - expected).abs() < 0.01, "{u} vs {expected}");
    }

    #[test]
    fn uniformity_is_bounded_by_two() {
        let b = vec![MiniBatchSpec::unflipped(vec![0]); 10];
        let u = uniformity(&b, 1000).unwrap();
        assert!(u <= 2.0 && u > 1.99);
    }

    #[test]
    fn one_flipped_pair_counts_once() {
        let same = (vec![true, false], vec![true, false]);
        let flipped = (vec![true, false], vec![true, true]);
        let pairs = vec![same.clone(), flipped, same.clone(), same];
        assert_eq!(percent_differing(&pairs).unwrap(), 25.0);
    }

    #[test]
    fn probes_avoid_group_and_are_seeded() {
        let groups = vec![(0, vec![1, 2]), (1, vec![3, 4])];
        let a = make_probes(&groups, 10, 6, 5, 3).unwrap();
        assert_eq!(a, make_probes(&groups, 10, 6, 5, 3).unwrap());
        for p in &a {
            assert!(p.common.iter().all(|i| !p.diff.contains(i) && *i < 10));
            assert!(p.validation.iter().all(|&i| (10..16).contains(&i)));
        }
    }
}
