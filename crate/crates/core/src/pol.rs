//! Proof-of-learning logs: the recorder, the replay verifier, and the
//! on-disk directory format.
//!
//! A log directory contains
//!
//! ```text
//! manifest.json            training configuration (pretty JSON)
//! steps.jsonl              one {"t", "indices", "flips", "lr"} record per step
//! checkpoints/ckpt_<t>.bin parameter snapshots
//! checkpoints/vel_<t>.bin  velocity snapshots (momentum runs only)
//! ```
//!
//! Each `.bin` blob is a 20-byte little-endian header (`t: u64`,
//! `length: u64`, `crc32: u32` over the payload) followed by `length`
//! little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_schedule, Dataset, MiniBatchSpec};
use crate::error::{io_err, Error, Result};
use crate::model::{self, init_params, steps_for, Hyperparams, ModelSpec, OptimizerState, ParamVector};

pub const FORMAT_VERSION: u32 = 1;
const BLOB_HEADER_LEN: usize = 20;

/// Everything a verifier needs to re-run the update rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoLManifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub hyper: Hyperparams,
    pub init_seed: u64,
    pub schedule_seed: u64,
    pub n: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub augment: bool,
    pub checkpoint_interval: u64,
}

impl PoLManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion { found: self.format_version, expected: FORMAT_VERSION });
        }
        self.hyper.validate()?;
        if self.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig("checkpoint_interval must be >= 1".into()));
        }
        if self.batch_size != self.hyper.batch_size || self.total_steps != self.hyper.total_steps {
            return Err(Error::InvalidConfig("manifest batch size / step count disagree with hyperparameters".into()));
        }
        Ok(())
    }

    /// Checkpoint steps: 0, every multiple of the interval, and the final step.
    pub fn checkpoint_steps(&self) -> Vec<u64> {
        let mut out: Vec<u64> = (0..=self.total_steps).step_by(self.checkpoint_interval as usize).collect();
        if *out.last().unwrap() != self.total_steps {
            out.push(self.total_steps);
        }
        out
    }

    pub fn uses_momentum(&self) -> bool {
        self.hyper.momentum != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    #[serde(flatten)]
    pub batch: MiniBatchSpec,
    pub lr: f64,
    /// Step of the velocity snapshot stored alongside this step's checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_ckpt: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoLLog {
    pub manifest: PoLManifest,
    pub steps: Vec<StepRecord>,
    pub checkpoints: BTreeMap<u64, ParamVector>,
    /// Optimizer velocity at each checkpoint; empty unless momentum is used.
    pub velocities: BTreeMap<u64, Vec<f64>>,
}

impl PoLLog {
    /// Checks structural invariants: contiguous steps, required checkpoints, valid indices.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.steps.len() as u64 != self.manifest.total_steps {
            return Err(Error::CorruptLog(format!(
                "{} step records for {} steps",
                self.steps.len(),
                self.manifest.total_steps
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.t != i as u64 + 1 {
                return Err(Error::CorruptLog(format!("step record {i} has t = {}", step.t)));
            }
            step.batch.validate(self.manifest.n)?;
        }
        for t in [0, self.manifest.total_steps] {
            if !self.checkpoints.contains_key(&t) {
                return Err(Error::MissingCheckpoint(t));
            }
        }
        let count = self.manifest.model.param_count();
        if let Some((t, p)) = self.checkpoints.iter().find(|(_, p)| p.len() != count) {
            return Err(Error::CorruptLog(format!("checkpoint {t} has {} entries, expected {count}", p.len())));
        }
        Ok(())
    }

    pub fn step(&self, t: u64) -> Result<&StepRecord> {
        t.checked_sub(1)
            .and_then(|i| self.steps.get(i as usize))
            .ok_or(Error::StepOutOfRange { t, total: self.manifest.total_steps })
    }

    pub fn checkpoint(&self, t: u64) -> Result<&ParamVector> {
        self.checkpoints.get(&t).ok_or(Error::MissingCheckpoint(t))
    }

    pub fn final_params(&self) -> Result<&ParamVector> {
        self.checkpoint(self.manifest.total_steps)
    }

    pub fn batches(&self) -> impl Iterator<Item = &MiniBatchSpec> {
        self.steps.iter().map(|s| &s.batch)
    }

    /// Consecutive checkpoint pairs `(start, end)`.
    pub fn segments(&self) -> Vec<(u64, u64)> {
        let keys: Vec<u64> = self.checkpoints.keys().copied().collect();
        keys.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn state_at(&self, t: u64) -> Result<OptimizerState> {
        let len = self.manifest.model.param_count();
        let velocity = if self.manifest.uses_momentum() {
            self.velocities
                .get(&t)
                .cloned()
                .ok_or_else(|| Error::CorruptLog(format!("missing velocity snapshot at step {t}")))?
        } else {
            vec![0.0; len]
        };
        Ok(OptimizerState { velocity, step: t })
    }

    /// Replays steps `start + 1 ..= end` from the checkpoint at `start`.
    pub fn replay_segment(&self, dataset: &Dataset, start: u64, end: u64) -> Result<ParamVector> {
        let mut params = self.checkpoint(start)?.clone();
        let mut state = self.state_at(start)?;
        for t in start + 1..=end {
            let record = self.step(t)?;
            let out = model::replay_step(
                &params,
                &state,
                &record.batch,
                dataset,
                &self.manifest.model,
                &self.manifest.hyper,
                record.lr,
            )?;
            params = out.params;
            state = out.state;
        }
        Ok(params)
    }
}

/// Training inputs that, with a dataset, fully determine a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordConfig {
    pub model: ModelSpec,
    pub hyper: Hyperparams,
    pub init_seed: u64,
    pub schedule_seed: u64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "one")]
    pub checkpoint_interval: u64,
}

fn one() -> u64 {
    1
}

impl RecordConfig {
    pub fn manifest(&self, n: usize) -> PoLManifest {
        PoLManifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            hyper: self.hyper,
            init_seed: self.init_seed,
            schedule_seed: self.schedule_seed,
            n,
            batch_size: self.hyper.batch_size,
            total_steps: self.hyper.total_steps,
            augment: self.augment,
            checkpoint_interval: self.checkpoint_interval,
        }
    }
}

/// Runs the training loop and records every step, returning the log and the final parameters.
pub fn record_training(dataset: &Dataset, config: &RecordConfig) -> Result<(PoLLog, ParamVector)> {
    let manifest = config.manifest(dataset.len());
    manifest.validate()?;
    config.model.check_dataset(dataset)?;
    let hp = &config.hyper;
    if hp.total_steps != steps_for(dataset.len(), hp.batch_size, hp.epochs) {
        return Err(Error::InvalidConfig(format!(
            "total_steps {} != epochs * floor(n / b) = {}",
            hp.total_steps,
            steps_for(dataset.len(), hp.batch_size, hp.epochs)
        )));
    }
    let schedule = make_schedule(dataset.len(), hp.batch_size, hp.epochs, config.schedule_seed, config.augment)?;
    let checkpoint_steps = manifest.checkpoint_steps();
    let mut params = init_params(&config.model, config.init_seed);
    let mut state = OptimizerState::new(params.len());
    let mut checkpoints = BTreeMap::new();
    let mut velocities = BTreeMap::new();
    let mut steps = Vec::with_capacity(schedule.batches.len());
    let momentum = manifest.uses_momentum();
    checkpoints.insert(0, params.clone());
    if momentum {
        velocities.insert(0, state.velocity.clone());
    }
    let mut next_ckpt = 1;
    for (i, batch) in schedule.batches.into_iter().enumerate() {
        let t = i as u64 + 1;
        let out = model::training_step(&params, &state, &batch, dataset, &config.model, hp)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {t}")));
        }
        params = out.params;
        state = out.state;
        let snapshot = checkpoint_steps.get(next_ckpt) == Some(&t);
        if snapshot {
            next_ckpt += 1;
            checkpoints.insert(t, params.clone());
            if momentum {
                velocities.insert(t, state.velocity.clone());
            }
        }
        steps.push(StepRecord { t, batch, lr: out.lr, velocity_ckpt: (snapshot && momentum).then_some(t) });
    }
    let log = PoLLog { manifest, steps, checkpoints, velocities };
    Ok((log, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentError {
    pub start: u64,
    pub end: u64,
    pub error: f64,
}

/// Outcome of replay verification. `pass` holds iff every checked error is within the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub segments: Vec<SegmentError>,
    pub max_error: f64,
    pub threshold: f64,
    pub pass: bool,
    pub steps_checked: u64,
    pub segments_total: usize,
    pub partial: bool,
}

fn verify_segments(log: &PoLLog, dataset: &Dataset, epsilon: f64, chosen: &[(u64, u64)], total: usize) -> Result<VerificationReport> {
    if dataset.len() != log.manifest.n {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} samples but the log was recorded on {}",
            dataset.len(),
            log.manifest.n
        )));
    }
    log.validate()?;
    let segments = chosen
        .par_iter()
        .map(|&(start, end)| {
            let replayed = log.replay_segment(dataset, start, end)?;
            Ok(SegmentError { start, end, error: replayed.distance(log.checkpoint(end)?) })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_error = segments.iter().map(|s| s.error).fold(0.0, f64::max);
    Ok(VerificationReport {
        max_error,
        threshold: epsilon,
        pass: segments.iter().all(|s| s.error <= epsilon),
        steps_checked: segments.iter().map(|s| s.end - s.start).sum(),
        segments_total: total,
        partial: segments.len() < total,
        segments,
    })
}

/// Replays every checkpoint segment and reports the l2 verification errors.
pub fn verify_full(log: &PoLLog, dataset: &Dataset, epsilon: f64) -> Result<VerificationReport> {
    let segments = log.segments();
    verify_segments(log, dataset, epsilon, &segments, segments.len())
}

/// Verifies only the `k` segments with the largest parameter updates.
pub fn verify_subset(log: &PoLLog, dataset: &Dataset, epsilon: f64, k: usize) -> Result<VerificationReport> {
    let segments = log.segments();
    if k == 0 || k > segments.len() {
        return Err(Error::InvalidConfig(format!("subset size {k} outside 1..={}", segments.len())));
    }
    let mut ranked = segments
        .iter()
        .map(|&(s, e)| Ok((log.checkpoint(e)?.distance(log.checkpoint(s)?), s, e)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<(u64, u64)> = ranked.into_iter().take(k).map(|(_, s, e)| (s, e)).collect();
    chosen.sort_unstable();
    verify_segments(log, dataset, epsilon, &chosen, segments.len())
}

fn encode_blob(t: u64, values: &[f64]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(values.len() * 4);
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + payload.len());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn decode_blob(path: &Path, expected_t: u64) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < BLOB_HEADER_LEN {
        return Err(Error::CorruptLog(format!("{} is truncated", path.display())));
    }
    let t = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let payload = &bytes[BLOB_HEADER_LEN..];
    if t != expected_t {
        return Err(Error::CorruptLog(format!("{} holds step {t}, expected {expected_t}", path.display())));
    }
    if payload.len() != len * 4 {
        return Err(Error::CorruptLog(format!("{} payload is {} bytes, header says {}", path.display(), payload.len(), len * 4)));
    }
    if crc32fast::hash(payload) != crc {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok(payload.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))).collect())
}

pub fn checkpoint_path(dir: &Path, t: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("ckpt_{t}.bin"))
}

pub fn velocity_path(dir: &Path, t: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("vel_{t}.bin"))
}

/// Writes the step records as JSON lines.
pub fn write_steps(steps: &[StepRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for step in steps {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the log directory. Checkpoints are stored as `f32`.
pub fn write_log(log: &PoLLog, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    log.validate()?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let manifest_path = dir.join("manifest.json");
    let mut manifest = serde_json::to_string_pretty(&log.manifest)?;
    manifest.push('\n');
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    write_steps(&log.steps, &dir.join("steps.jsonl"))?;
    for (&t, params) in &log.checkpoints {
        let path = checkpoint_path(dir, t);
        fs::write(&path, encode_blob(t, params.as_slice())).map_err(io_err(&path))?;
    }
    for (&t, velocity) in &log.velocities {
        let path = velocity_path(dir, t);
        fs::write(&path, encode_blob(t, velocity)).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<PoLManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::CorruptLog(format!("{} has no manifest.json", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersion { found: version, expected: FORMAT_VERSION });
    }
    let manifest: PoLManifest = serde_json::from_value(raw)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Reads a log directory written by [`write_log`].
pub fn read_log(dir: impl AsRef<Path>) -> Result<PoLLog> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let steps_path = dir.join("steps.jsonl");
    let file = fs::File::open(&steps_path).map_err(io_err(&steps_path))?;
    let mut steps = Vec::with_capacity(manifest.total_steps as usize);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&steps_path))?;
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str::<StepRecord>(&line)?);
    }
    let mut checkpoints = BTreeMap::new();
    let mut velocities = BTreeMap::new();
    for t in manifest.checkpoint_steps() {
        let path = checkpoint_path(dir, t);
        if !path.exists() {
            return Err(Error::MissingCheckpoint(t));
        }
        checkpoints.insert(t, ParamVector::new(decode_blob(&path, t)?)?);
        if manifest.uses_momentum() {
            velocities.insert(t, decode_blob(&velocity_path(dir, t), t)?);
        }
    }
    let log = PoLLog { manifest, steps, checkpoints, velocities };
    log.validate()?;
    Ok(log)
}
