//! Forging proof-of-learning logs: per-point substitution, the shared-split
//! variant that serves every group from one candidate pool per step, PoR
//! reconstruction, member insertion, and the off-subspace lower bound.
//!
//! All gradients are taken on the original trajectory: at step `t` the
//! forger compares candidate gradients against the gradient of the recorded
//! batch `B_*^(t)` at the recorded checkpoint `θ^(t-1)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_split_plan, Dataset, MiniBatchSpec, SplitPlan, SubspaceDataset};
use crate::error::{io_err, Error, Result};
use crate::model::{self, loss_and_grad, ModelSpec, OptimizerState, ParamVector};
use crate::pol::{PoLLog, PoLManifest, StepRecord};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// Candidate mini-batches per (split, step).
    pub candidates: usize,
    pub splits: usize,
    pub group_size: usize,
    pub seed: u64,
    /// Draw random flip flags for candidates (full variant only).
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "yes")]
    pub count_costs: bool,
}

fn yes() -> bool {
    true
}

impl ForgeConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::InvalidConfig("candidate count must be >= 1".into()));
        }
        if self.splits == 0 || self.group_size == 0 {
            return Err(Error::InvalidConfig("split count and group size must be >= 1".into()));
        }
        if n % (self.splits * self.group_size) != 0 {
            return Err(Error::InvalidConfig(format!(
                "group_size * splits = {} does not divide n = {n}",
                self.splits * self.group_size
            )));
        }
        Ok(())
    }

    pub fn split_plan(&self, n: usize, steps: u64) -> Result<SplitPlan> {
        make_split_plan(n, self.group_size, self.splits, steps, self.seed)
    }
}

/// Gradient-evaluation counters, one unit per mini-batch gradient.
#[derive(Debug, Default)]
pub struct CostCounters {
    phase1: AtomicU64,
    phase2: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub phase1: u64,
    pub phase2: u64,
}

impl CostCounters {
    pub fn add_phase1(&self, count: u64) {
        self.phase1.fetch_add(count, Ordering::Relaxed);
    }

    pub fn add_phase2(&self, count: u64) {
        self.phase2.fetch_add(count, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> Costs {
        Costs { phase1: self.phase1.load(Ordering::Relaxed), phase2: self.phase2.load(Ordering::Relaxed) }
    }
}

/// Closed-form phase-1 count: `κ·μ·τ + τ`.
pub fn phase1_cost(cfg: &ForgeConfig, steps: u64) -> u64 {
    (cfg.splits * cfg.candidates) as u64 * steps + steps
}

/// Closed-form phase-2 count for reconstructing every group: `n·τ/λ`.
pub fn phase2_cost(n: usize, cfg: &ForgeConfig, steps: u64) -> u64 {
    (n / cfg.group_size) as u64 * steps
}

/// Cost of forging every sample separately: `n·μ·τ`.
pub fn naive_cost(n: usize, cfg: &ForgeConfig, steps: u64) -> u64 {
    (n * cfg.candidates) as u64 * steps
}

fn require_dense_log(log: &PoLLog, dataset: &Dataset) -> Result<()> {
    log.validate()?;
    if log.manifest.checkpoint_interval != 1 {
        return Err(Error::InvalidConfig("forging needs a log with a checkpoint at every step".into()));
    }
    if dataset.len() != log.manifest.n {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} samples but the log was recorded on {}",
            dataset.len(),
            log.manifest.n
        )));
    }
    Ok(())
}

fn grad_distance_sq(a: &ParamVector, b: &ParamVector) -> f64 {
    a.distance_sq(b)
}

/// Squared gradient distance of every candidate to `orig_grad` at `params`.
pub fn candidate_distances(
    params: &ParamVector,
    spec: &ModelSpec,
    orig_grad: &ParamVector,
    candidates: &[MiniBatchSpec],
    dataset: &Dataset,
    weight_decay: f64,
) -> Result<Vec<f64>> {
    candidates
        .par_iter()
        .map(|c| Ok(grad_distance_sq(&loss_and_grad(params, spec, c, dataset, weight_decay)?.1, orig_grad)))
        .collect()
}

/// Index and squared gradient distance of the best candidate; ties go to the lowest index.
pub fn candidate_argmin(
    params: &ParamVector,
    spec: &ModelSpec,
    orig_grad: &ParamVector,
    candidates: &[MiniBatchSpec],
    dataset: &Dataset,
    weight_decay: f64,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list".into()));
    }
    let distances = candidate_distances(params, spec, orig_grad, candidates, dataset, weight_decay)?;
    Ok(argmin(&distances))
}

fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Draws `count` batches of size `b` from `pool`, each without replacement;
/// different candidates may coincide.
fn draw_candidates(
    pool: &[usize],
    b: usize,
    count: usize,
    rng: &mut impl Rng,
    flip_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Vec<MiniBatchSpec> {
    let mut out: Vec<MiniBatchSpec> = if b == 1 && count <= pool.len() {
        // Single-sample batches are drawn distinct, so `μ = |pool|` is exhaustive.
        sample(rng, pool.len(), count).into_iter().map(|i| MiniBatchSpec::unflipped(vec![pool[i]])).collect()
    } else {
        (0..count)
            .map(|_| MiniBatchSpec::unflipped(sample(rng, pool.len(), b).into_iter().map(|i| pool[i]).collect()))
            .collect()
    };
    if let Some(flip_rng) = flip_rng {
        for batch in &mut out {
            batch.flips = (0..b).map(|_| flip_rng.random_bool(0.5)).collect();
        }
    }
    out
}

/// One step of a per-point forgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseStep {
    pub t: u64,
    pub batch: MiniBatchSpec,
    /// Squared gradient distance to the recorded batch.
    pub distance: f64,
}

/// Replaces every step's batch by the best of `μ` batches drawn from `D ∖ {x_minus}`.
pub fn forge_pointwise(log: &PoLLog, dataset: &Dataset, x_minus: usize, cfg: &ForgeConfig) -> Result<Vec<PointwiseStep>> {
    require_dense_log(log, dataset)?;
    dataset.check_index(x_minus)?;
    let b = log.manifest.batch_size;
    if b > dataset.len() - 1 {
        return Err(Error::InvalidConfig(format!("batch size {b} exceeds the {} remaining samples", dataset.len() - 1)));
    }
    if cfg.candidates == 0 {
        return Err(Error::InvalidConfig("candidate count must be >= 1".into()));
    }
    let spec = &log.manifest.model;
    let pool: Vec<usize> = (0..dataset.len()).filter(|&i| i != x_minus).collect();
    let mut rng = rng::stream(cfg.seed, Domain::Candidates, x_minus as u64);
    let mut out = Vec::with_capacity(log.steps.len());
    for record in &log.steps {
        let params = log.checkpoint(record.t - 1)?;
        let (_, orig) = loss_and_grad(params, spec, &record.batch, dataset, 0.0)?;
        let candidates = draw_candidates(&pool, b, cfg.candidates, &mut rng, None);
        let (best, distance) = candidate_argmin(params, spec, &orig, &candidates, dataset, 0.0)?;
        out.push(PointwiseStep { t: record.t, batch: candidates[best].clone(), distance });
    }
    Ok(out)
}

/// A replaced `(group, step)` entry. Groups of one split share the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgedEntry {
    pub batch: Arc<MiniBatchSpec>,
    pub distance: f64,
}

/// What a group trains on at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedEntry<'a> {
    pub batch: &'a MiniBatchSpec,
    pub replaced: bool,
    pub distance: f64,
}

/// Forged batches for every group and step.
///
/// Only replaced entries are stored; every other `(g, t)` resolves to the
/// recorded batch `B_*^(t)` of the source log.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgedBatchStore {
    pub config: ForgeConfig,
    pub full: bool,
    pub n: usize,
    pub steps: u64,
    entries: Vec<BTreeMap<u64, ForgedEntry>>,
    pub costs: Costs,
}

impl ForgedBatchStore {
    pub fn group_count(&self) -> usize {
        self.entries.len()
    }

    pub fn plan(&self) -> Result<SplitPlan> {
        self.config.split_plan(self.n, self.steps)
    }

    pub fn replaced(&self, g: usize) -> &BTreeMap<u64, ForgedEntry> {
        &self.entries[g]
    }

    pub fn replaced_count(&self) -> usize {
        self.entries.iter().map(BTreeMap::len).sum()
    }

    pub fn resolve<'a>(&'a self, log: &'a PoLLog, g: usize, t: u64) -> Result<ResolvedEntry<'a>> {
        let entries = self.entries.get(g).ok_or(Error::MissingEntry { group: g, t })?;
        if t == 0 || t > self.steps {
            return Err(Error::MissingEntry { group: g, t });
        }
        Ok(match entries.get(&t) {
            Some(e) => ResolvedEntry { batch: &e.batch, replaced: true, distance: e.distance },
            None => ResolvedEntry { batch: &log.step(t)?.batch, replaced: false, distance: 0.0 },
        })
    }
}

/// Shared-split forging that ignores weight decay and augmentation.
pub fn forge_all(log: &PoLLog, dataset: &Dataset, plan: &SplitPlan, cfg: &ForgeConfig) -> Result<ForgedBatchStore> {
    forge_store(log, dataset, plan, cfg, false)
}

/// Shared-split forging under the log's own update rule: weight decay in the
/// candidate loss and, with `cfg.augment`, random flip flags on every candidate.
pub fn forge_all_full(log: &PoLLog, dataset: &Dataset, plan: &SplitPlan, cfg: &ForgeConfig) -> Result<ForgedBatchStore> {
    forge_store(log, dataset, plan, cfg, true)
}

fn forge_store(log: &PoLLog, dataset: &Dataset, plan: &SplitPlan, cfg: &ForgeConfig, full: bool) -> Result<ForgedBatchStore> {
    require_dense_log(log, dataset)?;
    let n = dataset.len();
    cfg.validate(n)?;
    if plan.n() != n || plan.group_size() != cfg.group_size || plan.splits() != cfg.splits || plan.seed() != cfg.seed {
        return Err(Error::InvalidConfig("split plan does not match the forge configuration".into()));
    }
    if plan.steps() != log.manifest.total_steps {
        return Err(Error::InvalidConfig("split plan covers a different number of steps".into()));
    }
    let b = log.manifest.batch_size;
    if b > n - n / cfg.splits {
        return Err(Error::InvalidConfig(format!("batch size {b} exceeds the candidate pool of {}", n - n / cfg.splits)));
    }
    let augment = full && cfg.augment;
    if augment && dataset.image_shape().is_none() {
        return Err(Error::FlipOnNonImage);
    }
    let spec = &log.manifest.model;
    let wd = if full { log.manifest.hyper.weight_decay } else { 0.0 };
    let counters = CostCounters::default();
    let mut entries: Vec<BTreeMap<u64, ForgedEntry>> = vec![BTreeMap::new(); plan.group_count()];
    let mut in_batch = vec![false; n];
    for record in &log.steps {
        let t = record.t;
        let params = log.checkpoint(t - 1)?;
        let (_, orig) = loss_and_grad(params, spec, &record.batch, dataset, wd)?;
        if cfg.count_costs {
            counters.add_phase1(1);
        }
        record.batch.indices.iter().for_each(|&i| in_batch[i] = true);
        let split = plan.step(t);
        for (k, groups) in split.members.iter().enumerate() {
            let own: Vec<usize> = plan.split_samples(&split, k);
            let pool = complement(n, &own);
            let stream_id = t * cfg.splits as u64 + k as u64;
            let mut rng = rng::stream(cfg.seed, Domain::Candidates, stream_id);
            let mut flip_rng = augment.then(|| rng::stream(cfg.seed, Domain::CandidateFlips, stream_id));
            let candidates = draw_candidates(&pool, b, cfg.candidates, &mut rng, flip_rng.as_mut());
            let (best, distance) = candidate_argmin(params, spec, &orig, &candidates, dataset, wd)?;
            if cfg.count_costs {
                counters.add_phase1(cfg.candidates as u64);
            }
            let batch = Arc::new(candidates[best].clone());
            for &g in groups {
                if plan.group(g).iter().any(|&i| in_batch[i]) {
                    entries[g].insert(t, ForgedEntry { batch: Arc::clone(&batch), distance });
                }
            }
        }
        record.batch.indices.iter().for_each(|&i| in_batch[i] = false);
    }
    Ok(ForgedBatchStore {
        config: cfg.clone(),
        full,
        n,
        steps: log.manifest.total_steps,
        entries,
        costs: counters.snapshot(),
    })
}

fn complement(n: usize, sorted_excluded: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted_excluded.len());
    let mut ex = sorted_excluded.iter().peekable();
    for i in 0..n {
        if ex.peek() == Some(&&i) {
            ex.next();
        } else {
            out.push(i);
        }
    }
    out
}

/// A proof of repudiation for one group: a genuine training trajectory that never touches it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoR {
    pub group: Vec<usize>,
    pub log: PoLLog,
    pub params: ParamVector,
    /// Largest squared gradient distance among the substituted steps.
    pub max_distance: f64,
    pub replaced_steps: usize,
    pub gradient_evaluations: u64,
}

impl PoR {
    /// Number of batch slots in the forged log that hold a target sample.
    pub fn exclusion_violations(&self) -> usize {
        self.log
            .steps
            .iter()
            .map(|s| s.batch.indices.iter().filter(|i| self.group.binary_search(i).is_ok()).count())
            .sum()
    }
}

/// Replays training from `θ^(0)` on the stored batches of group `g`.
///
/// The forged log keeps the source manifest and recorded learning rates but
/// takes checkpoints every `checkpoint_interval` steps of the new trajectory.
pub fn reconstruct_por(
    log: &PoLLog,
    dataset: &Dataset,
    store: &ForgedBatchStore,
    g: usize,
    checkpoint_interval: u64,
) -> Result<PoR> {
    if dataset.len() != store.n || log.manifest.n != store.n || log.manifest.total_steps != store.steps {
        return Err(Error::InvalidConfig("store, log and dataset disagree".into()));
    }
    if g >= store.group_count() {
        return Err(Error::MissingEntry { group: g, t: 0 });
    }
    let group = store.plan()?.group(g).to_vec();
    let batches = (1..=store.steps).map(|t| {
        let e = store.resolve(log, g, t)?;
        Ok(e.batch.clone())
    });
    let (forged, params) = replay_batches(log, dataset, batches, checkpoint_interval)?;
    let replaced = store.replaced(g);
    Ok(PoR {
        group,
        log: forged,
        params,
        max_distance: replaced.values().map(|e| e.distance).fold(0.0, f64::max),
        replaced_steps: replaced.len(),
        gradient_evaluations: store.steps,
    })
}

/// Trains from the log's `θ^(0)` on the given batches, reusing its manifest and learning rates.
fn replay_batches(
    log: &PoLLog,
    dataset: &Dataset,
    batches: impl Iterator<Item = Result<MiniBatchSpec>>,
    checkpoint_interval: u64,
) -> Result<(PoLLog, ParamVector)> {
    if checkpoint_interval == 0 {
        return Err(Error::InvalidConfig("checkpoint_interval must be >= 1".into()));
    }
    let manifest = PoLManifest { checkpoint_interval, n: dataset.len(), ..log.manifest.clone() };
    let ckpts = manifest.checkpoint_steps();
    let momentum = manifest.uses_momentum();
    let mut params = log.checkpoint(0)?.clone();
    let mut state = OptimizerState::new(params.len());
    if momentum {
        state.velocity = log
            .velocities
            .get(&0)
            .cloned()
            .ok_or_else(|| Error::CorruptLog("missing velocity snapshot at step 0".into()))?;
    }
    let mut checkpoints = BTreeMap::from([(0, params.clone())]);
    let mut velocities = BTreeMap::new();
    if momentum {
        velocities.insert(0, state.velocity.clone());
    }
    let mut steps = Vec::with_capacity(log.steps.len());
    let mut next = 1;
    for (record, batch) in log.steps.iter().zip(batches) {
        let batch = batch?;
        let out = model::replay_step(&params, &state, &batch, dataset, &manifest.model, &manifest.hyper, record.lr)?;
        params = out.params;
        state = out.state;
        let t = record.t;
        let snapshot = ckpts.get(next) == Some(&t);
        if snapshot {
            next += 1;
            checkpoints.insert(t, params.clone());
            if momentum {
                velocities.insert(t, state.velocity.clone());
            }
        }
        steps.push(StepRecord { t, batch, lr: record.lr, velocity_ckpt: (snapshot && momentum).then_some(t) });
    }
    if steps.len() != log.steps.len() {
        return Err(Error::CorruptLog("batch sequence shorter than the log".into()));
    }
    Ok((PoLLog { manifest, steps, checkpoints, velocities }, params))
}

/// The original checkpoints paired with group `g`'s forged batches. Its
/// verification errors measure how well each substitution mimics the
/// recorded update.
pub fn substituted_log(log: &PoLLog, store: &ForgedBatchStore, g: usize) -> Result<PoLLog> {
    let mut out = log.clone();
    for (t, e) in store.replaced(g) {
        out.steps[*t as usize - 1].batch = (*e.batch).clone();
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreHeader {
    config: ForgeConfig,
    plan_seed: u64,
    full: bool,
    n: usize,
    steps: u64,
    costs: Costs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreLine {
    group: usize,
    t: u64,
    #[serde(flatten)]
    batch: MiniBatchSpec,
    replaced: bool,
    distance: f64,
}

/// Writes `forge.jsonl`: a header line, then one line per replaced `(group, t)` in group-major order.
pub fn write_store(store: &ForgedBatchStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = StoreHeader {
        config: store.config.clone(),
        plan_seed: store.config.seed,
        full: store.full,
        n: store.n,
        steps: store.steps,
        costs: store.costs,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for (group, entries) in store.entries.iter().enumerate() {
        for (&t, e) in entries {
            let line = StoreLine { group, t, batch: (*e.batch).clone(), replaced: true, distance: e.distance };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<ForgedBatchStore> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header: StoreHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line.map_err(io_err(path))?)?,
        None => return Err(Error::Empty(format!("{}", path.display()))),
    };
    header.config.validate(header.n)?;
    let groups = header.n / header.config.group_size;
    let mut entries = vec![BTreeMap::new(); groups];
    let mut shared: BTreeMap<(u64, Vec<usize>, Vec<bool>), Arc<MiniBatchSpec>> = BTreeMap::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoreLine = serde_json::from_str(&line)?;
        if rec.group >= groups || rec.t == 0 || rec.t > header.steps || !rec.replaced {
            return Err(Error::CorruptLog(format!("bad forge entry for group {} at step {}", rec.group, rec.t)));
        }
        rec.batch.validate(header.n)?;
        let key = (rec.t, rec.batch.indices.clone(), rec.batch.flips.clone());
        let batch = Arc::clone(shared.entry(key).or_insert_with(|| Arc::new(rec.batch)));
        entries[rec.group].insert(rec.t, ForgedEntry { batch, distance: rec.distance });
    }
    Ok(ForgedBatchStore { config: header.config, full: header.full, n: header.n, steps: header.steps, entries, costs: header.costs })
}

/// Result of inserting an external sample into a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    /// The training set with the new sample appended at index `n`.
    pub dataset: Dataset,
    pub log: PoLLog,
    pub params: ParamVector,
    /// Substituted steps with their squared gradient distances.
    pub replaced: Vec<(u64, f64)>,
}

/// Default insertion rate: a member appears in `b/n` of all steps.
pub fn default_insert_fraction(n: usize, batch_size: usize) -> f64 {
    batch_size as f64 / n as f64
}

/// Forges a trajectory in which `x_star` appears: on `⌈hτ⌉` random steps the
/// batch is replaced by the best of `μ` candidates that each contain `x_star`.
pub fn forge_insert(
    log: &PoLLog,
    dataset: &Dataset,
    x_star: &[f64],
    label: usize,
    fraction: f64,
    cfg: &ForgeConfig,
) -> Result<Insertion> {
    require_dense_log(log, dataset)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("insertion fraction {fraction} outside [0, 1]")));
    }
    if cfg.candidates == 0 {
        return Err(Error::InvalidConfig("candidate count must be >= 1".into()));
    }
    let n = dataset.len();
    if (0..n).any(|i| dataset.features(i) == x_star && dataset.label(i) == label) {
        return Err(Error::InvalidConfig("x_star is already in the dataset".into()));
    }
    let extended = dataset.with_appended(x_star, label)?;
    let b = log.manifest.batch_size;
    let tau = log.manifest.total_steps;
    let count = (fraction * tau as f64).ceil() as usize;
    let mut rng = rng::stream(cfg.seed, Domain::Insert, 0);
    let mut chosen: Vec<u64> = (1..=tau).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(count.min(tau as usize));
    chosen.sort_unstable();
    let spec = &log.manifest.model;
    let pool: Vec<usize> = (0..n).collect();
    let mut substitutes = BTreeMap::new();
    let mut replaced = Vec::with_capacity(chosen.len());
    for &t in &chosen {
        let params = log.checkpoint(t - 1)?;
        let record = log.step(t)?;
        let (_, orig) = loss_and_grad(params, spec, &record.batch, &extended, 0.0)?;
        let mut cand_rng = rng::stream(cfg.seed, Domain::Insert, t);
        let candidates: Vec<MiniBatchSpec> = draw_candidates(&pool, b - 1, cfg.candidates, &mut cand_rng, None)
            .into_iter()
            .map(|mut c| {
                c.indices.push(n);
                c.flips.push(false);
                c
            })
            .collect();
        let (best, distance) = candidate_argmin(params, spec, &orig, &candidates, &extended, 0.0)?;
        substitutes.insert(t, candidates[best].clone());
        replaced.push((t, distance));
    }
    let batches = log
        .steps
        .iter()
        .map(|s| Ok(substitutes.remove(&s.t).unwrap_or_else(|| s.batch.clone())));
    let (forged, params) = replay_batches(log, &extended, batches, log.manifest.checkpoint_interval)?;
    Ok(Insertion { dataset: extended, log: forged, params, replaced })
}

/// Minimum gradient distance from the off-subspace sample to any other sample, and its analytic lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Bound {
    pub min_distance: f64,
    pub bound: f64,
    /// The sample attaining the minimum.
    pub nearest: usize,
}

impl Thm1Bound {
    pub fn holds(&self, slack: f64) -> bool {
        self.min_distance + slack >= self.bound
    }
}

/// For a binary logistic model with batch size one, compares the weight
/// gradient of the outlier against every other sample's and evaluates
/// `|σ(wᵀx₁ + c) − y₁| · dist(x₁, Γ)`.
pub fn thm1_bound(data: &SubspaceDataset, w: &ParamVector) -> Result<Thm1Bound> {
    let ds = &data.dataset;
    let dim = ds.dim();
    let spec = ModelSpec::logreg(dim, 2)?;
    spec.check_params(w)?;
    if ds.len() < 2 {
        return Err(Error::PremiseViolated("need at least two samples".into()));
    }
    let outlier = data.outlier;
    ds.check_index(outlier)?;
    let x1 = ds.features(outlier);
    let dist = crate::data::dist_to_subspace(x1, &data.basis)?;
    if dist <= 1e-12 {
        return Err(Error::PremiseViolated("the outlier lies in the subspace".into()));
    }
    for i in (0..ds.len()).filter(|&i| i != outlier) {
        if crate::data::dist_to_subspace(ds.features(i), &data.basis)? > 1e-9 {
            return Err(Error::PremiseViolated(format!("sample {i} lies outside the subspace")));
        }
    }
    let weight_grad = |i: usize| -> Result<Vec<f64>> {
        let (_, g) = loss_and_grad(w, &spec, &MiniBatchSpec::unflipped(vec![i]), ds, 0.0)?;
        Ok(g.as_slice()[..dim].to_vec())
    };
    let g1 = weight_grad(outlier)?;
    let mut best = (usize::MAX, f64::INFINITY);
    for i in (0..ds.len()).filter(|&i| i != outlier) {
        let gi = weight_grad(i)?;
        let d = g1.iter().zip(&gi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if d < best.1 {
            best = (i, d);
        }
    }
    let p = w.as_slice();
    let z = p[dim] + p[..dim].iter().zip(x1).map(|(a, b)| a * b).sum::<f64>();
    let residual = (1.0 / (1.0 + (-z).exp()) - ds.label(outlier) as f64).abs();
    Ok(Thm1Bound { min_distance: best.1, bound: residual * dist, nearest: best.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian;
    use crate::model::Hyperparams;
    use crate::pol::{record_training, verify_full, RecordConfig};

    fn setup(n: usize, b: usize, epochs: usize) -> (Dataset, PoLLog) {
        let ds = synth_gaussian(n, 3, 2, 9, 2.0).unwrap();
        let cfg = RecordConfig {
            model: ModelSpec::logreg(3, 2).unwrap(),
            hyper: Hyperparams::plain(0.3, b, epochs, n),
            init_seed: 4,
            schedule_seed: 5,
            augment: false,
            checkpoint_interval: 1,
        };
        let (log, _) = record_training(&ds, &cfg).unwrap();
        (ds, log)
    }

    fn fcfg(mu: usize, kappa: usize, lambda: usize) -> ForgeConfig {
        ForgeConfig { candidates: mu, splits: kappa, group_size: lambda, seed: 11, augment: false, count_costs: true }
    }

    #[test]
    fn argmin_prefers_the_original_batch() {
        let (ds, log) = setup(20, 4, 1);
        let rec = log.step(1).unwrap();
        let theta = log.checkpoint(0).unwrap();
        let spec = &log.manifest.model;
        let (_, orig) = loss_and_grad(theta, spec, &rec.batch, &ds, 0.0).unwrap();
        let others = MiniBatchSpec::unflipped(vec![0, 1, 2, 3]);
        let cands = vec![others.clone(), rec.batch.clone(), others];
        assert_eq!(candidate_argmin(theta, spec, &orig, &cands, &ds, 0.0).unwrap(), (1, 0.0));
        let single = vec![MiniBatchSpec::unflipped(vec![5, 6, 7, 8])];
        assert_eq!(candidate_argmin(theta, spec, &orig, &single, &ds, 0.0).unwrap().0, 0);
    }

    #[test]
    fn argmin_ties_go_to_lowest_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0, 3.0]), (1, 1.0));
    }

    #[test]
    fn pointwise_excludes_target() {
        let (ds, log) = setup(20, 4, 2);
        let steps = forge_pointwise(&log, &ds, 7, &fcfg(6, 1, 1)).unwrap();
        assert_eq!(steps.len(), log.steps.len());
        assert!(steps.iter().all(|s| !s.batch.contains(7)));
    }

    #[test]
    fn store_respects_group_rules() {
        let (ds, log) = setup(20, 4, 2);
        let cfg = fcfg(5, 2, 2);
        let plan = cfg.split_plan(20, log.manifest.total_steps).unwrap();
        let store = forge_all(&log, &ds, &plan, &cfg).unwrap();
        for g in 0..store.group_count() {
            let members = plan.group(g);
            for t in 1..=store.steps {
                let e = store.resolve(&log, g, t).unwrap();
                let recorded = &log.step(t).unwrap().batch;
                let hit = members.iter().any(|&i| recorded.contains(i));
                assert_eq!(e.replaced, hit);
                assert!(members.iter().all(|&i| !e.batch.contains(i)));
            }
        }
        assert_eq!(store.costs.phase1, phase1_cost(&cfg, store.steps));
    }

    #[test]
    fn full_variant_reduces_to_simplified() {
        let (ds, log) = setup(20, 4, 2);
        let cfg = fcfg(5, 2, 1);
        let plan = cfg.split_plan(20, log.manifest.total_steps).unwrap();
        let a = forge_all(&log, &ds, &plan, &cfg).unwrap();
        let mut b = forge_all_full(&log, &ds, &plan, &cfg).unwrap();
        b.full = false;
        assert_eq!(a, b);
    }

    #[test]
    fn untouched_group_reproduces_original_model() {
        let (ds, log) = setup(20, 4, 1);
        let cfg = fcfg(5, 2, 1);
        let plan = cfg.split_plan(20, log.manifest.total_steps).unwrap();
        let store = forge_all(&log, &ds, &plan, &cfg).unwrap();
        // With one epoch every sample is used, so fabricate an empty group.
        let mut empty = store.clone();
        empty.entries[0].clear();
        let por = reconstruct_por(&log, &ds, &empty, 0, 1).unwrap();
        assert_eq!(&por.params, log.final_params().unwrap());
        let por = reconstruct_por(&log, &ds, &store, 3, 2).unwrap();
        assert_eq!(por.exclusion_violations(), 0);
        assert_eq!(verify_full(&por.log, &ds, 0.0).unwrap().max_error, 0.0);
    }

    #[test]
    fn store_round_trips_through_jsonl() {
        let (ds, log) = setup(20, 4, 2);
        let cfg = fcfg(5, 2, 2);
        let plan = cfg.split_plan(20, log.manifest.total_steps).unwrap();
        let store = forge_all(&log, &ds, &plan, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forge.jsonl");
        write_store(&store, &path).unwrap();
        assert_eq!(read_store(&path).unwrap(), store);
    }

    #[test]
    fn insertion_places_sample_once_per_replaced_step() {
        let (ds, log) = setup(20, 4, 2);
        let out = forge_insert(&log, &ds, &[0.1, 0.2, 0.3], 1, 0.5, &fcfg(5, 1, 1)).unwrap();
        assert_eq!(out.replaced.len(), 5);
        let hits: usize = out.log.steps.iter().map(|s| s.batch.indices.iter().filter(|&&i| i == 20).count()).sum();
        assert_eq!(hits, 5);
        let none = forge_insert(&log, &ds, &[0.1, 0.2, 0.3], 1, 0.0, &fcfg(5, 1, 1)).unwrap();
        assert_eq!(&none.params, log.final_params().unwrap());
    }

    #[test]
    fn bound_plug_in_value() {
        let ds = Dataset::new(vec![0.0, 1.0, 1.0, 0.0, -2.0, 0.0], vec![1, 0, 1], 2, 2, None).unwrap();
        let data = SubspaceDataset { dataset: ds, outlier: 0, basis: vec![vec![1.0, 0.0]] };
        let r = thm1_bound(&data, &ParamVector::zeros(3)).unwrap();
        assert!((r.bound - 0.5).abs() < 1e-15);
        assert!(r.holds(0.0));
    }
}
