//! Subcommand implementations. Each stage reads the artifacts of earlier
//! stages from the output directory:
//!
//! ```text
//! <out>/config.json             resolved configuration
//! <out>/log/                    honest PoL log
//! <out>/train.json              final loss and accuracy
//! <out>/forge.jsonl             forged batch store
//! <out>/forge_stats.json        gradient-evaluation counters
//! <out>/por/group_<g>/          reconstructed PoR logs plus por.json
//! <out>/attacks/scores.csv      sample_id, attack, score, prediction, model_id
//! <out>/attacks/calibration.json
//! <out>/metrics/                metrics.json, metrics.csv, profiles.tsv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use repudiate_core::data::{make_schedule, synth_subspace};
use repudiate_core::forge::{naive_cost, phase1_cost, phase2_cost, read_store, thm1_bound, write_store, Costs, ForgedBatchStore};
use repudiate_core::metrics::{freq_profile, independent_batches, profiles_tsv, uniformity};
use repudiate_core::model::ParamVector;
use repudiate_core::pol::{read_log, verify_full, verify_subset, write_log, PoLLog, VerificationReport};
use repudiate_core::rng::{self, Domain};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::io::{sha256_file, write_atomic, write_dir_atomic, write_json};
use crate::pipeline::{self, ForgedModel, ScoreRow};

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.out.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.out.join("log")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.out.join("train.json")
    }

    pub fn forge(&self) -> PathBuf {
        self.out.join("forge.jsonl")
    }

    pub fn forge_stats(&self) -> PathBuf {
        self.out.join("forge_stats.json")
    }

    pub fn por(&self, group: usize) -> PathBuf {
        self.out.join("por").join(format!("group_{group}"))
    }

    pub fn scores(&self) -> PathBuf {
        self.out.join("attacks").join("scores.csv")
    }

    pub fn calibration(&self) -> PathBuf {
        self.out.join("attacks").join("calibration.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics")
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} not found at {} (run the earlier stage first)", path.display())))
    }
}

fn load_log(path: &Path) -> CliResult<PoLLog> {
    require(path, "log directory")?;
    Ok(read_log(path)?)
}

fn load_store(layout: &Layout) -> CliResult<ForgedBatchStore> {
    require(&layout.forge(), "forged batch store")?;
    Ok(read_store(layout.forge())?)
}

pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<pipeline::TrainSummary> {
    let splits = pipeline::prepare_data(cfg)?;
    let (log, summary) = pipeline::train(cfg, &splits)?;
    write_json(&layout.config(), cfg)?;
    write_dir_atomic(&layout.log(), |dir| Ok(write_log(&log, dir)?))?;
    write_json(&layout.train_summary(), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ForgeStats {
    pub costs: Costs,
    pub expected_phase1: u64,
    /// Cost of reconstructing every group.
    pub expected_phase2: u64,
    pub naive: u64,
    /// `naive / (phase1 + phase2)`.
    pub speedup: f64,
    pub replaced_entries: usize,
}

pub fn forge_stats(cfg: &ExperimentConfig, store: &ForgedBatchStore) -> ForgeStats {
    let fcfg = cfg.forge_config();
    let (n, steps) = (store.n, store.steps);
    let expected_phase1 = phase1_cost(&fcfg, steps);
    let expected_phase2 = phase2_cost(n, &fcfg, steps);
    let naive = naive_cost(n, &fcfg, steps);
    ForgeStats {
        costs: store.costs,
        expected_phase1,
        expected_phase2,
        naive,
        speedup: naive as f64 / (expected_phase1 + expected_phase2) as f64,
        replaced_entries: store.replaced_count(),
    }
}

pub fn cmd_forge(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<ForgeStats> {
    let log = load_log(&layout.log())?;
    let splits = pipeline::prepare_data(cfg)?;
    let store = pipeline::forge(cfg, &log, &splits.train)?;
    let stats = forge_stats(cfg, &store);
    let tmp = tempfile::NamedTempFile::new_in(&layout.out)?;
    write_store(&store, tmp.path())?;
    tmp.persist(layout.forge()).map_err(|e| CliError::failure(e.to_string()))?;
    write_json(&layout.forge_stats(), &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct PorSummary {
    pub group: usize,
    pub members: Vec<usize>,
    pub exclusion_violations: usize,
    pub replaced_steps: usize,
    pub max_distance: f64,
    pub gradient_evaluations: u64,
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig, layout: &Layout, group: Option<usize>) -> CliResult<Vec<PorSummary>> {
    let log = load_log(&layout.log())?;
    let store = load_store(layout)?;
    let groups = match group {
        Some(g) if g >= store.group_count() => {
            return Err(CliError::usage(format!("unknown group {g}; there are {}", store.group_count())))
        }
        Some(g) => vec![g],
        None => pipeline::select_groups(cfg),
    };
    let splits = pipeline::prepare_data(cfg)?;
    let mut out = Vec::with_capacity(groups.len());
    // Dense PoR logs are large; only one chunk is held in memory at a time.
    for chunk in groups.chunks(rayon::current_num_threads().max(1)) {
        let pors = pipeline::reconstruct(cfg, &log, &splits.train, &store, chunk)?;
        for (&group, por) in chunk.iter().zip(pors) {
            let summary = PorSummary {
                group,
                members: por.group.clone(),
                exclusion_violations: por.exclusion_violations(),
                replaced_steps: por.replaced_steps,
                max_distance: por.max_distance,
                gradient_evaluations: por.gradient_evaluations,
            };
            write_dir_atomic(&layout.por(group), |dir| {
                write_log(&por.log, dir)?;
                write_json(&dir.join("por.json"), &summary)
            })?;
            out.push(summary);
        }
    }
    Ok(out)
}

/// Verifies a log directory (honest or PoR) against the training split.
pub fn cmd_verify(cfg: &ExperimentConfig, log_dir: &Path, epsilon: f64, subset_k: Option<usize>) -> CliResult<VerificationReport> {
    let log = load_log(log_dir)?;
    let splits = pipeline::prepare_data(cfg)?;
    Ok(match subset_k {
        Some(k) => verify_subset(&log, &splits.train, epsilon, k)?,
        None => verify_full(&log, &splits.train, epsilon)?,
    })
}

/// θ_* and every θ_{-g} of the selected groups, read back from disk.
fn load_models(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<(PoLLog, Vec<(usize, PoLLog)>)> {
    let log = load_log(&layout.log())?;
    let pors = pipeline::select_groups(cfg)
        .into_iter()
        .map(|g| Ok((g, load_log(&layout.por(g))?)))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((log, pors))
}

pub fn cmd_attack(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<usize> {
    let splits = pipeline::prepare_data(cfg)?;
    let store = load_store(layout)?;
    let (log, pors) = load_models(cfg, layout)?;
    let theta_star = log.final_params()?.clone();
    let forged: Vec<(usize, ParamVector)> =
        pors.iter().map(|(g, l)| Ok((*g, l.final_params()?.clone()))).collect::<CliResult<_>>()?;
    let groups: Vec<usize> = forged.iter().map(|f| f.0).collect();
    let probes = pipeline::probes(cfg, &store, &groups)?;
    let suite = pipeline::calibrate(cfg, &splits, &theta_star)?;
    let rows = pipeline::attack_rows(cfg, &suite, &theta_star, &forged, &probes)?;
    write_scores(&layout.scores(), &rows)?;
    let calibration: BTreeMap<String, _> =
        cfg.attacks.roster.iter().map(|&a| (a.name().to_string(), suite.calibration(a).clone())).collect();
    write_json(&layout.calibration(), &calibration)?;
    Ok(rows.len())
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::failure(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_scores(path: &Path) -> CliResult<Vec<ScoreRow>> {
    require(path, "attack scores")?;
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ScoreRow>, _>>()?)
}

pub fn cmd_metrics(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<repudiate_core::metrics::MetricReport> {
    cfg.validate()?;
    let store = load_store(layout)?;
    let rows = read_scores(&layout.scores())?;
    let (log, pors) = load_models(cfg, layout)?;
    let groups: Vec<usize> = pors.iter().map(|p| p.0).collect();
    let probes = pipeline::probes(cfg, &store, &groups)?;
    let forged: Vec<ForgedModel<'_>> = pors
        .iter()
        .map(|(g, l)| Ok(ForgedModel { group: *g, params: l.final_params()?, batches: l.batches().collect() }))
        .collect::<CliResult<_>>()?;
    let mut inputs = BTreeMap::new();
    for (name, path) in [
        ("config.json", layout.config()),
        ("log/steps.jsonl", layout.log().join("steps.jsonl")),
        ("forge.jsonl", layout.forge()),
        ("attacks/scores.csv", layout.scores()),
    ] {
        if path.exists() {
            inputs.insert(name.to_string(), sha256_file(&path)?);
        }
    }
    let report = pipeline::metrics(cfg, &rows, &probes, log.final_params()?, &forged, inputs)?;

    let n = cfg.data.train;
    let steps = log.manifest.total_steps;
    let honest = freq_profile(log.batches(), n)?;
    let iid = freq_profile(&independent_batches(n, log.manifest.batch_size, steps, cfg.seeds().probes)?, n)?;
    let forged_profile = freq_profile(forged[0].batches.iter().copied(), n)?;
    let tsv = profiles_tsv(&[("honest", &honest), ("forged", &forged_profile), ("independent", &iid)]);
    write_dir_atomic(&layout.metrics(), |dir| {
        report.write(dir)?;
        write_atomic(&dir.join("profiles.tsv"), tsv.as_bytes())
    })?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DemoRow {
    pub trial: usize,
    pub min_distance: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Random weights against random subspace datasets; every row must satisfy the bound.
pub fn demo_impossibility(n: usize, d: usize, trials: usize, seed: u64) -> CliResult<Vec<DemoRow>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    (0..trials)
        .map(|trial| {
            let data = synth_subspace(n, d, seed.wrapping_add(trial as u64))?;
            let mut rng = rng::stream(seed, Domain::Synthetic, trial as u64);
            let w: Vec<f64> = (0..=d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let r = thm1_bound(&data, &ParamVector::new(w)?)?;
            Ok(DemoRow { trial, min_distance: r.min_distance, bound: r.bound, holds: r.holds(1e-12) })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub train: pipeline::TrainSummary,
    pub forge: ForgeStats,
    pub honest_verification: VerificationReport,
    pub por_verification_max_error: f64,
    pub por_verification_pass: bool,
    pub exclusion_violations: usize,
    pub score_rows: usize,
    pub uniformity_honest: f64,
    pub metrics: repudiate_core::metrics::MetricReport,
}

/// Runs every stage through the on-disk artifacts and verifies the results.
pub fn cmd_report(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<PipelineReport> {
    fs::create_dir_all(&layout.out)?;
    let train = cmd_train(cfg, layout)?;
    info!("trained: {train:?}");
    let forge = cmd_forge(cfg, layout)?;
    let pors = cmd_reconstruct(cfg, layout, None)?;
    let honest_verification = cmd_verify(cfg, &layout.log(), cfg.epsilon, None)?;
    let mut por_max = 0.0f64;
    let mut por_pass = true;
    for p in &pors {
        let r = cmd_verify(cfg, &layout.por(p.group), cfg.epsilon, None)?;
        por_max = por_max.max(r.max_error);
        por_pass &= r.pass;
    }
    let score_rows = cmd_attack(cfg, layout)?;
    let metrics = cmd_metrics(cfg, layout)?;
    let log = load_log(&layout.log())?;
    let report = PipelineReport {
        train,
        forge,
        honest_verification,
        por_verification_max_error: por_max,
        por_verification_pass: por_pass,
        exclusion_violations: pors.iter().map(|p| p.exclusion_violations).sum(),
        score_rows,
        uniformity_honest: uniformity(log.batches(), cfg.data.train)?,
        metrics,
    };
    write_json(&layout.out.join("report.json"), &report)?;
    Ok(report)
}

/// Uniformity of the dataloader schedule a config would produce.
pub fn schedule_uniformity(cfg: &ExperimentConfig) -> CliResult<f64> {
    let t = &cfg.training;
    let s = make_schedule(cfg.data.train, t.batch_size, t.epochs, cfg.seeds().schedule, t.augment)?;
    Ok(uniformity(&s.batches, cfg.data.train)?)
}
