//! In-memory experiment stages. The subcommands wrap these with file I/O;
//! tests call them directly.

use std::collections::BTreeMap;

use log::info;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use repudiate_core::attacks::{train_shadows, Attack, AttackSuite};
use repudiate_core::data::{load_idx, read_container, synth_gaussian, Dataset, MiniBatchSpec};
use repudiate_core::forge::{forge_all, forge_all_full, reconstruct_por, ForgedBatchStore, PoR};
use repudiate_core::metrics::{
    make_probes, model_distance, percent_differing, uniformity, GroupDistance, MetricReport, Probe, Setting, Summary,
};
use repudiate_core::model::{accuracy, mean_loss, ParamVector};
use repudiate_core::pol::{record_training, PoLLog};
use repudiate_core::rng::{self, Domain};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Disjoint data splits. The attack pool is `train` followed by `validation`.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub population: Dataset,
    pub pool: Dataset,
}

pub fn load_source(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let d = &cfg.data;
    let total = d.train + d.validation + d.population;
    let data_seed = cfg.seeds().data;
    Ok(match &d.source {
        DataSource::Synthetic { dim, classes, separation } => synth_gaussian(total, *dim, *classes, data_seed, *separation)?,
        DataSource::Idx { images, labels } => {
            let (images, labels) = (cfg.resolve(images), cfg.resolve(labels));
            for p in [&images, &labels] {
                if !p.is_file() {
                    return Err(CliError::usage(format!("dataset file {} does not exist", p.display())));
                }
            }
            load_idx(images, labels)?
        }
        DataSource::Container { path } => {
            let path = cfg.resolve(path);
            if !path.is_file() {
                return Err(CliError::usage(format!("dataset file {} does not exist", path.display())));
            }
            read_container(path)?.0
        }
    })
}

/// Loads the source and splits a seeded permutation into train / validation / population.
pub fn prepare_data(cfg: &ExperimentConfig) -> CliResult<Splits> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let d = &cfg.data;
    let total = d.train + d.validation + d.population;
    if source.len() < total {
        return Err(CliError::usage(format!("data source has {} samples, config needs {total}", source.len())));
    }
    cfg.model.check_dataset(&source).map_err(CliError::from_core_usage)?;
    if cfg.training.augment && source.image_shape().is_none() {
        return Err(CliError::usage("augmentation needs image-shaped data"));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seeds().split, Domain::Synthetic, 0));
    let train_idx = &order[..d.train];
    let val_idx = &order[d.train..d.train + d.validation];
    let pop_idx = &order[d.train + d.validation..total];
    let pool_idx: Vec<usize> = train_idx.iter().chain(val_idx).copied().collect();
    Ok(Splits {
        train: source.subset(train_idx)?,
        validation: source.subset(val_idx)?,
        population: source.subset(pop_idx)?,
        pool: source.subset(&pool_idx)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

pub fn train(cfg: &ExperimentConfig, splits: &Splits) -> CliResult<(PoLLog, TrainSummary)> {
    let record = cfg.record_config();
    info!("training {} steps on {} samples", record.hyper.total_steps, splits.train.len());
    let (log, params) = record_training(&splits.train, &record)?;
    let summary = TrainSummary {
        steps: record.hyper.total_steps,
        train_loss: mean_loss(&params, &cfg.model, &splits.train)?,
        train_accuracy: accuracy(&params, &cfg.model, &splits.train)?,
        validation_accuracy: accuracy(&params, &cfg.model, &splits.validation)?,
    };
    Ok((log, summary))
}

pub fn forge(cfg: &ExperimentConfig, log: &PoLLog, train: &Dataset) -> CliResult<ForgedBatchStore> {
    if log.manifest.checkpoint_interval != 1 {
        return Err(CliError::usage(format!(
            "forging needs a log with checkpoint_interval 1, this one has {}",
            log.manifest.checkpoint_interval
        )));
    }
    let fcfg = cfg.forge_config();
    let plan = fcfg.split_plan(train.len(), log.manifest.total_steps)?;
    info!("forging: {} steps, {} splits, {} candidates", log.manifest.total_steps, fcfg.splits, fcfg.candidates);
    Ok(if cfg.forge.full { forge_all_full(log, train, &plan, &fcfg)? } else { forge_all(log, train, &plan, &fcfg)? })
}

/// The seeded random selection of groups that get reconstructed and evaluated.
pub fn select_groups(cfg: &ExperimentConfig) -> Vec<usize> {
    let total = cfg.data.train / cfg.forge.group_size;
    let mut rng = rng::stream(cfg.seeds().probes, Domain::Probes, u64::MAX);
    let mut groups = sample(&mut rng, total, cfg.probe.groups.min(total)).into_vec();
    groups.sort_unstable();
    groups
}

pub fn reconstruct(cfg: &ExperimentConfig, log: &PoLLog, train: &Dataset, store: &ForgedBatchStore, groups: &[usize]) -> CliResult<Vec<PoR>> {
    info!("reconstructing {} PoRs", groups.len());
    groups
        .par_iter()
        .map(|&g| {
            let por = reconstruct_por(log, train, store, g, cfg.por_checkpoint_interval)?;
            if por.exclusion_violations() != 0 {
                return Err(CliError::failure(format!("PoR for group {g} contains its own samples")));
            }
            Ok(por)
        })
        .collect()
}

pub fn probes(cfg: &ExperimentConfig, store: &ForgedBatchStore, groups: &[usize]) -> CliResult<Vec<Probe>> {
    let plan = store.plan()?;
    let members: Vec<(usize, Vec<usize>)> = groups.iter().map(|&g| (g, plan.group(g).to_vec())).collect();
    Ok(make_probes(&members, cfg.data.train, cfg.data.validation, cfg.probe.size, cfg.seeds().probes)?)
}

pub fn calibrate(cfg: &ExperimentConfig, splits: &Splits, theta_star: &ParamVector) -> CliResult<AttackSuite> {
    info!("training {} shadow models", cfg.attacks.shadows);
    let shadows = train_shadows(&splits.pool, cfg.attacks.shadows, &cfg.model, &cfg.hyper(), cfg.seeds().shadows)?;
    Ok(AttackSuite::calibrate(&splits.pool, &shadows, &splits.population, theta_star, &cfg.suite_config())?)
}

pub const ORIGINAL: &str = "original";

pub fn por_model_id(group: usize) -> String {
    format!("por_{group}")
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub attack: Attack,
    pub score: f64,
    pub prediction: u8,
    pub model_id: String,
}

/// Every probed sample across all groups, sorted and deduplicated.
pub fn probe_union(probes: &[Probe]) -> Vec<usize> {
    let mut union: Vec<usize> =
        probes.iter().flat_map(|p| Setting::ALL.iter().flat_map(move |&s| p.samples(s).iter().copied())).collect();
    union.sort_unstable();
    union.dedup();
    union
}

/// Scores the original and every forged model on the union of all probes, so
/// the row count is `|probes| * |attacks| * |models|`.
pub fn attack_rows(
    cfg: &ExperimentConfig,
    suite: &AttackSuite,
    theta_star: &ParamVector,
    forged: &[(usize, ParamVector)],
    probes: &[Probe],
) -> CliResult<Vec<ScoreRow>> {
    let union = probe_union(probes);
    let mut jobs: Vec<(String, &ParamVector)> = vec![(ORIGINAL.to_string(), theta_star)];
    jobs.extend(forged.iter().map(|(g, theta)| (por_model_id(*g), theta)));
    let rows = jobs
        .par_iter()
        .map(|(id, theta)| {
            let mut rows = Vec::with_capacity(union.len() * cfg.attacks.roster.len());
            for &attack in &cfg.attacks.roster {
                for s in suite.score_many(attack, theta, &union)? {
                    rows.push(ScoreRow { sample_id: s.sample, attack, score: s.score, prediction: u8::from(s.prediction), model_id: id.clone() });
                }
            }
            Ok(rows)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// A reconstructed model with what the metrics need from its log.
pub struct ForgedModel<'a> {
    pub group: usize,
    pub params: &'a ParamVector,
    pub batches: Vec<&'a MiniBatchSpec>,
}

/// Builds the metric report from attack score rows and forged models.
pub fn metrics(
    cfg: &ExperimentConfig,
    rows: &[ScoreRow],
    probes: &[Probe],
    theta_star: &ParamVector,
    forged: &[ForgedModel<'_>],
    inputs: BTreeMap<String, String>,
) -> CliResult<MetricReport> {
    if forged.is_empty() {
        return Err(CliError::failure("no forged models to evaluate"));
    }
    let mut table: BTreeMap<(&str, Attack, usize), (f64, bool)> = BTreeMap::new();
    for r in rows {
        table.insert((r.model_id.as_str(), r.attack, r.sample_id), (r.score, r.prediction != 0));
    }
    let lookup = |model: &str, attack: Attack, sample: usize| {
        table
            .get(&(model, attack, sample))
            .copied()
            .ok_or_else(|| CliError::failure(format!("scores lack {model}/{attack}/sample {sample}")))
    };
    let probe_of: BTreeMap<usize, &Probe> = probes.iter().map(|p| (p.group, p)).collect();

    let mut d_theta = Vec::with_capacity(forged.len());
    let mut uniform = Vec::with_capacity(forged.len());
    for f in forged {
        d_theta.push(GroupDistance { group: f.group, d_theta: model_distance(theta_star, f.params)? });
        uniform.push(uniformity(f.batches.iter().copied(), cfg.data.train)?);
    }

    let mut prediction_diff = BTreeMap::new();
    let mut score_diff = BTreeMap::new();
    for &attack in &cfg.attacks.roster {
        let mut per_setting = BTreeMap::new();
        for setting in Setting::ALL {
            let pairs = forged
                .iter()
                .map(|f| {
                    let probe = probe_of.get(&f.group).ok_or_else(|| CliError::failure(format!("no probe for group {}", f.group)))?;
                    let id = por_model_id(f.group);
                    let mut a = Vec::new();
                    let mut b = Vec::new();
                    for &s in probe.samples(setting) {
                        a.push(lookup(ORIGINAL, attack, s)?.1);
                        b.push(lookup(&id, attack, s)?.1);
                    }
                    Ok((a, b))
                })
                .collect::<CliResult<Vec<_>>>()?;
            per_setting.insert(setting, percent_differing(&pairs)?);
        }
        prediction_diff.insert(attack, per_setting);
        let mut diffs = Vec::new();
        for f in forged {
            let id = por_model_id(f.group);
            for &s in &probe_of[&f.group].diff {
                diffs.push((lookup(&id, attack, s)?.0 - lookup(ORIGINAL, attack, s)?.0).abs());
            }
        }
        score_diff.insert(attack, Summary::of(&diffs)?);
    }
    let values: Vec<f64> = d_theta.iter().map(|g| g.d_theta).collect();
    Ok(MetricReport {
        config: serde_json::to_value(cfg)?,
        inputs,
        d_theta_summary: Summary::of(&values)?,
        d_theta,
        prediction_diff,
        score_diff,
        uniformity: Summary::of(&uniform)?,
        pairs: forged.len(),
    })
}
