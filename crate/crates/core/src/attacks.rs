//! Membership-inference attacks: loss threshold (Xent), modified entropy
//! (MEntr), offline likelihood ratio (LiRA), and the population-quantile loss
//! attack (EnhancedMIA).
//!
//! Every score is oriented so that larger means "more likely a member", and a
//! prediction is `score >= threshold`.
//!
//! Attacks see a *pool* of labelled samples (the target's training set
//! followed by held-out data). Shadow models train on random halves of the
//! pool, so each pool sample is IN for about half of them.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict, sample_cross_entropy, steps_for, Hyperparams, ModelSpec, ParamVector};
use crate::pol::{record_training, RecordConfig};
use crate::rng::{self, Domain};

/// Probabilities are clamped away from 0 and 1 before taking logarithms.
const PROB_FLOOR: f64 = 1e-12;
/// Minimum standard deviation of a fitted shadow Gaussian.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    Xent,
    Mentr,
    Lira,
    EnhancedMia,
}

impl Attack {
    pub const ALL: [Attack; 4] = [Attack::Xent, Attack::Mentr, Attack::Lira, Attack::EnhancedMia];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Xent => "xent",
            Attack::Mentr => "mentr",
            Attack::Lira => "lira",
            Attack::EnhancedMia => "enhanced_mia",
        }
    }
}

impl std::fmt::Display for Attack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub sample: usize,
    pub score: f64,
    pub prediction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    MaxAccuracy,
    FixedFpr { rate: f64 },
    /// Likelihood-ratio test at ratio 1 (LiRA only).
    Ratio,
}

/// Decision thresholds: one per label, or a single global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub method: Method,
    pub thresholds: Vec<f64>,
    pub per_label: bool,
    pub shadow_seed: u64,
}

impl Calibration {
    pub fn global(method: Method, threshold: f64, shadow_seed: u64) -> Result<Self> {
        if let Method::FixedFpr { rate } = method {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::InvalidConfig(format!("false positive rate {rate} outside (0, 1)")));
            }
        }
        Ok(Self { method, thresholds: vec![threshold], per_label: false, shadow_seed })
    }

    pub fn threshold(&self, label: usize) -> Result<f64> {
        let t = if self.per_label { self.thresholds.get(label) } else { self.thresholds.first() };
        t.copied().ok_or_else(|| Error::Uncalibrated(format!("no threshold for label {label}")))
    }
}

/// `-CE(p, y)`.
pub fn xent_score(params: &ParamVector, spec: &ModelSpec, x: &[f64], y: usize) -> Result<f64> {
    Ok(-sample_cross_entropy(params, spec, x, y)?)
}

/// Modified entropy `-(1-p_y) ln p_y - Σ_{i≠y} p_i ln(1-p_i)`.
pub fn mentr(probs: &[f64], y: usize) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let py = clamp(probs[y]);
    let mut out = -(1.0 - probs[y]) * py.ln();
    for (i, &p) in probs.iter().enumerate() {
        if i != y {
            out -= p * (1.0 - clamp(p)).ln();
        }
    }
    out
}

/// Logit-scaled confidence `ln p_y - ln Σ_{j≠y} p_j`.
pub fn lira_phi(probs: &[f64], y: usize) -> f64 {
    let rest: f64 = probs.iter().enumerate().filter(|&(i, _)| i != y).map(|(_, p)| p).sum();
    probs[y].max(PROB_FLOOR).ln() - rest.max(PROB_FLOOR).ln()
}

/// Mean and (floored) standard deviation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Uncalibrated(format!("{} shadow values, need at least 2", values.len())));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt().max(VARIANCE_FLOOR) })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// `log N(φ; in) - log N(φ; out)`.
pub fn lira_score(phi: f64, inside: &Gaussian, outside: &Gaussian) -> f64 {
    inside.log_density(phi) - outside.log_density(phi)
}

/// Type-7 (linear interpolation) quantile of `values` at `q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Threshold maximizing the accuracy of `score >= threshold` on labelled
/// scores. Candidates are every observed score plus `+∞` (predict nothing);
/// ties go to the smallest threshold.
pub fn max_accuracy_threshold(members: &[f64], non_members: &[f64]) -> Result<(f64, f64)> {
    let total = members.len() + non_members.len();
    if total == 0 {
        return Err(Error::Empty("no calibration scores".into()));
    }
    let mut all: Vec<(f64, bool)> =
        members.iter().map(|&s| (s, true)).chain(non_members.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Threshold at all[i].0 predicts member for all[i..]; start with everything predicted member.
    let mut correct = members.len();
    let mut best = (all[0].0, correct);
    let mut i = 0;
    while i < all.len() {
        let value = all[i].0;
        while i < all.len() && all[i].0 == value {
            if all[i].1 {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let next = if i < all.len() { all[i].0 } else { f64::INFINITY };
        if correct > best.1 {
            best = (next, correct);
        }
    }
    Ok((best.0, best.1 as f64 / total as f64))
}

/// A shadow model and the pool indices it trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Shadow {
    pub params: ParamVector,
    pub members: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowSet {
    pub spec: ModelSpec,
    pub hyper: Hyperparams,
    pub seed: u64,
    pub shadows: Vec<Shadow>,
}

impl ShadowSet {
    /// Number of shadows that trained on pool sample `i`.
    pub fn in_count(&self, i: usize) -> usize {
        self.shadows.iter().filter(|s| s.members[i]).count()
    }
}

/// Trains `count` shadows, each on an independent random half of `pool`.
/// `hyper.total_steps` is recomputed for the half size.
pub fn train_shadows(pool: &Dataset, count: usize, spec: &ModelSpec, hyper: &Hyperparams, seed: u64) -> Result<ShadowSet> {
    if count < 2 {
        return Err(Error::InvalidConfig("need at least two shadow models".into()));
    }
    let half = pool.len() / 2;
    if half < hyper.batch_size {
        return Err(Error::InvalidConfig(format!("pool of {} is too small for batch size {}", pool.len(), hyper.batch_size)));
    }
    let hyper = Hyperparams { total_steps: steps_for(half, hyper.batch_size, hyper.epochs), ..*hyper };
    let shadows = (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng::stream(seed, Domain::Shadows, s as u64);
            let mut chosen = sample(&mut rng, pool.len(), half).into_vec();
            chosen.sort_unstable();
            let data = pool.subset(&chosen)?;
            let cfg = RecordConfig {
                model: spec.clone(),
                hyper,
                init_seed: rng.random(),
                schedule_seed: rng.random(),
                augment: false,
                checkpoint_interval: hyper.total_steps,
            };
            let (_, params) = record_training(&data, &cfg)?;
            let mut members = vec![false; pool.len()];
            chosen.iter().for_each(|&i| members[i] = true);
            Ok(Shadow { params, members })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShadowSet { spec: spec.clone(), hyper, seed, shadows })
}

/// Raw (uncalibrated) score of one labelled input.
pub fn raw_score(attack: Attack, params: &ParamVector, spec: &ModelSpec, x: &[f64], y: usize) -> Result<f64> {
    match attack {
        Attack::Xent | Attack::EnhancedMia => xent_score(params, spec, x, y),
        Attack::Mentr => Ok(-mentr(&predict(params, spec, x)?, y)),
        Attack::Lira => Ok(lira_phi(&predict(params, spec, x)?, y)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiraThreshold {
    #[default]
    MaxAccuracy,
    Ratio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub lira_threshold: LiraThreshold,
    pub enhanced_fpr: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { lira_threshold: LiraThreshold::MaxAccuracy, enhanced_fpr: 0.1 }
    }
}

/// All four attacks calibrated against one shadow set and one population.
/// The same suite scores both the original and the forged models.
#[derive(Debug, Clone)]
pub struct AttackSuite {
    pub spec: ModelSpec,
    pub pool: Dataset,
    pub xent: Calibration,
    pub mentr: Calibration,
    pub lira: Calibration,
    /// Per pool sample: Gaussians over IN and OUT shadow confidences.
    pub lira_stats: Vec<(Gaussian, Gaussian)>,
    /// Pool samples with fewer than two IN or OUT shadows; they use
    /// Gaussians pooled over every sample's shadow confidences.
    pub lira_fallbacks: Vec<usize>,
    pub enhanced: Calibration,
}

/// Per-label MaxAccuracy thresholds from shadow scores of every pool sample.
fn per_label_thresholds(attack: Attack, pool: &Dataset, shadows: &ShadowSet) -> Result<Calibration> {
    let classes = pool.classes();
    let mut members = vec![Vec::new(); classes];
    let mut others = vec![Vec::new(); classes];
    for shadow in &shadows.shadows {
        let scores = (0..pool.len())
            .into_par_iter()
            .map(|i| raw_score(attack, &shadow.params, &shadows.spec, pool.features(i), pool.label(i)))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in scores.into_iter().enumerate() {
            let y = pool.label(i);
            if shadow.members[i] { &mut members[y] } else { &mut others[y] }.push(s);
        }
    }
    let thresholds = (0..classes)
        .map(|y| {
            if members[y].is_empty() && others[y].is_empty() {
                Ok(f64::INFINITY)
            } else {
                Ok(max_accuracy_threshold(&members[y], &others[y])?.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration { method: Method::MaxAccuracy, thresholds, per_label: true, shadow_seed: shadows.seed })
}

impl AttackSuite {
    /// Calibrates every attack. `population` holds non-members of the target;
    /// `target` fixes the EnhancedMIA threshold.
    pub fn calibrate(
        pool: &Dataset,
        shadows: &ShadowSet,
        population: &Dataset,
        target: &ParamVector,
        cfg: &SuiteConfig,
    ) -> Result<Self> {
        if shadows.shadows.iter().any(|s| s.members.len() != pool.len()) {
            return Err(Error::InvalidConfig("shadow membership does not match the pool".into()));
        }
        if population.is_empty() {
            return Err(Error::Empty("population set".into()));
        }
        let spec = shadows.spec.clone();
        let xent = per_label_thresholds(Attack::Xent, pool, shadows)?;
        let mentr = per_label_thresholds(Attack::Mentr, pool, shadows)?;

        let phis: Vec<Vec<f64>> = shadows
            .shadows
            .par_iter()
            .map(|s| (0..pool.len()).map(|i| raw_score(Attack::Lira, &s.params, &spec, pool.features(i), pool.label(i))).collect())
            .collect::<Result<_>>()?;
        let split = |i: usize, skip: Option<usize>| {
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for (j, s) in shadows.shadows.iter().enumerate() {
                if Some(j) == skip {
                    continue;
                }
                if s.members[i] { &mut inside } else { &mut outside }.push(phis[j][i]);
            }
            (inside, outside)
        };
        let pooled = {
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for (j, s) in shadows.shadows.iter().enumerate() {
                for i in 0..pool.len() {
                    if s.members[i] { &mut inside } else { &mut outside }.push(phis[j][i]);
                }
            }
            (Gaussian::fit(&inside)?, Gaussian::fit(&outside)?)
        };
        let fit_pair = |inside: &[f64], outside: &[f64]| match (Gaussian::fit(inside), Gaussian::fit(outside)) {
            (Ok(a), Ok(b)) => Some((a, b)),
            _ => None,
        };
        let mut lira_fallbacks = Vec::new();
        let lira_stats = (0..pool.len())
            .map(|i| {
                let (inside, outside) = split(i, None);
                fit_pair(&inside, &outside).unwrap_or_else(|| {
                    lira_fallbacks.push(i);
                    pooled
                })
            })
            .collect::<Vec<_>>();
        let lira = match cfg.lira_threshold {
            LiraThreshold::Ratio => Calibration::global(Method::Ratio, 0.0, shadows.seed)?,
            LiraThreshold::MaxAccuracy => {
                // Leave-one-shadow-out: score each shadow's confidences against Gaussians fitted on the rest.
                let (mut members, mut others) = (Vec::new(), Vec::new());
                for (j, s) in shadows.shadows.iter().enumerate() {
                    for i in 0..pool.len() {
                        let (inside, outside) = split(i, Some(j));
                        let (gi, go) = fit_pair(&inside, &outside).unwrap_or(pooled);
                        let score = lira_score(phis[j][i], &gi, &go);
                        if s.members[i] { &mut members } else { &mut others }.push(score);
                    }
                }
                let (threshold, _) = max_accuracy_threshold(&members, &others)?;
                Calibration::global(Method::MaxAccuracy, threshold, shadows.seed)?
            }
        };

        let population_scores = (0..population.len())
            .into_par_iter()
            .map(|i| xent_score(target, &spec, population.features(i), population.label(i)))
            .collect::<Result<Vec<_>>>()?;
        let rate = cfg.enhanced_fpr;
        let enhanced = Calibration::global(Method::FixedFpr { rate }, quantile(&population_scores, 1.0 - rate)?, shadows.seed)?;

        Ok(Self { spec, pool: pool.clone(), xent, mentr, lira, lira_stats, lira_fallbacks, enhanced })
    }

    pub fn calibration(&self, attack: Attack) -> &Calibration {
        match attack {
            Attack::Xent => &self.xent,
            Attack::Mentr => &self.mentr,
            Attack::Lira => &self.lira,
            Attack::EnhancedMia => &self.enhanced,
        }
    }

    /// Scores pool sample `i` under `params`.
    pub fn score(&self, attack: Attack, params: &ParamVector, i: usize) -> Result<AttackScore> {
        self.pool.check_index(i)?;
        let (x, y) = (self.pool.features(i), self.pool.label(i));
        let raw = raw_score(attack, params, &self.spec, x, y)?;
        let score = match attack {
            Attack::Lira => {
                let (inside, outside) = &self.lira_stats[i];
                lira_score(raw, inside, outside)
            }
            _ => raw,
        };
        let threshold = self.calibration(attack).threshold(y)?;
        Ok(AttackScore { sample: i, score, prediction: score >= threshold })
    }

    pub fn score_many(&self, attack: Attack, params: &ParamVector, indices: &[usize]) -> Result<Vec<AttackScore>> {
        indices.iter().map(|&i| self.score(attack, params, i)).collect()
    }
}

/// Samples on which two sets of attack outputs disagree. Two models are
/// equivalent for the attack on these samples iff the result is empty.
pub fn disagreement(a: &[AttackScore], b: &[AttackScore]) -> Result<BTreeSet<usize>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.sample != y.sample {
                return Err(Error::InvalidConfig("score lists cover different samples".into()));
            }
            Ok((x.prediction != y.prediction).then_some(x.sample))
        })
        .filter_map(Result::transpose)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mentr_examples() {
        assert_eq!(mentr(&[0.0, 1.0], 1), 0.0);
        assert!((mentr(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
        assert!(mentr(&[1.0 - 1e-9, 1e-9], 1) > 15.0);
    }

    #[test]
    fn lira_fixture() {
        let g = |mean| Gaussian { mean, std: 1.0 };
        assert!(lira_score(1.0, &g(2.0), &g(0.0)).abs() < 1e-15);
        assert!(lira_score(2.0, &g(2.0), &g(0.0)) > 0.0);
        assert_eq!(lira_score(0.3, &g(1.0), &g(1.0)), 0.0);
        assert_eq!(Gaussian::fit(&[1.0, 1.0]).unwrap().std, VARIANCE_FLOOR);
    }

    #[test]
    fn quantile_matches_median() {
        assert_eq!(quantile(&[5.0, 1.0, 3.0], 0.5).unwrap(), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.5);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn max_accuracy_separates_clean_split() {
        let (t, acc) = max_accuracy_threshold(&[3.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!((t, acc), (3.0, 1.0));
        let (_, acc) = max_accuracy_threshold(&[1.0], &[2.0, 3.0]).unwrap();
        assert!(acc >= 0.5);
    }

    #[test]
    fn disagreement_lists_flipped_samples() {
        let s = |sample, prediction| AttackScore { sample, score: 0.0, prediction };
        let a = [s(0, true), s(1, false), s(2, true)];
        let b = [s(0, true), s(1, true), s(2, true)];
        assert_eq!(disagreement(&a, &b).unwrap().into_iter().collect::<Vec<_>>(), vec![1]);
    }
}
