use repudiate_core::data::{make_schedule, synth_gaussian, synth_subspace, Dataset, MiniBatchSpec, SubspaceDataset};
use repudiate_core::forge::{
    candidate_argmin, candidate_distances, forge_all, forge_all_full, forge_insert, forge_pointwise, phase1_cost, reconstruct_por,
    substituted_log, thm1_bound, ForgeConfig,
};
use repudiate_core::model::{init_params, loss_and_grad, sgd_step, Hyperparams, ModelSpec, ParamVector};
use repudiate_core::pol::{record_training, verify_full, verify_subset, PoLLog, RecordConfig};

fn logreg_run(n: usize, b: usize, epochs: usize, seed: u64) -> (Dataset, PoLLog) {
    let ds = synth_gaussian(n, 4, 2, seed, 2.0).unwrap();
    let cfg = RecordConfig {
        model: ModelSpec::logreg(4, 2).unwrap(),
        hyper: Hyperparams::plain(0.5, b, epochs, n),
        init_seed: seed + 1,
        schedule_seed: seed + 2,
        augment: false,
        checkpoint_interval: 1,
    };
    let (log, _) = record_training(&ds, &cfg).unwrap();
    (ds, log)
}

fn forge_cfg(mu: usize, kappa: usize, lambda: usize) -> ForgeConfig {
    ForgeConfig { candidates: mu, splits: kappa, group_size: lambda, seed: 21, augment: false, count_costs: true }
}

#[test]
fn final_checkpoint_matches_standalone_loop() {
    let (ds, log) = logreg_run(40, 5, 3, 1);
    let spec = ModelSpec::logreg(4, 2).unwrap();
    let mut theta = init_params(&spec, 2);
    for batch in make_schedule(40, 5, 3, 3, false).unwrap().batches {
        let (_, g) = loss_and_grad(&theta, &spec, &batch, &ds, 0.0).unwrap();
        theta = sgd_step(&theta, &g, 0.5);
    }
    assert_eq!(log.final_params().unwrap(), &theta);
}

#[test]
fn substituted_log_error_is_step_times_gradient_gap() {
    let (ds, log) = logreg_run(40, 5, 2, 4);
    let cfg = forge_cfg(6, 2, 1);
    let plan = cfg.split_plan(40, log.manifest.total_steps).unwrap();
    let store = forge_all(&log, &ds, &plan, &cfg).unwrap();
    let g = (0..store.group_count()).find(|&g| !store.replaced(g).is_empty()).unwrap();
    let report = verify_full(&substituted_log(&log, &store, g).unwrap(), &ds, f64::INFINITY).unwrap();
    for seg in &report.segments {
        let e = store.resolve(&log, g, seg.end).unwrap();
        let expected = 0.5 * e.distance.sqrt();
        assert!((seg.error - expected).abs() <= 1e-12 * (1.0 + expected), "step {}: {} vs {}", seg.end, seg.error, expected);
    }
}

#[test]
fn subset_check_catches_scaled_largest_update() {
    let (ds, log) = logreg_run(40, 5, 2, 7);
    assert!(verify_subset(&log, &ds, 0.0, 3).unwrap().pass);
    let mut tampered = log.clone();
    let (start, end) = tampered.segments()[4];
    let before = tampered.checkpoint(start).unwrap().clone();
    let after = tampered.checkpoints.get_mut(&end).unwrap();
    for (a, b) in after.as_mut_slice().iter_mut().zip(before.as_slice()) {
        *a = b + 50.0 * (*a - b);
    }
    let report = verify_subset(&tampered, &ds, 1e-6, 1).unwrap();
    assert_eq!(report.segments.len(), 1);
    assert!(!report.pass);
}

#[test]
fn argmin_matches_exhaustive_loop() {
    let (ds, log) = logreg_run(20, 4, 1, 10);
    let spec = &log.manifest.model;
    let theta = log.checkpoint(2).unwrap();
    let (_, orig) = loss_and_grad(theta, spec, &log.step(3).unwrap().batch, &ds, 0.0).unwrap();
    let candidates: Vec<MiniBatchSpec> =
        (0..8).map(|k| MiniBatchSpec::unflipped((0..4).map(|j| (k * 3 + j * 5) % 20).collect())).collect();
    let (idx, dist) = candidate_argmin(theta, spec, &orig, &candidates, &ds, 0.0).unwrap();
    // Independent per-sample gradient for the logistic model.
    let grad = |batch: &MiniBatchSpec| {
        let p = theta.as_slice();
        let mut g = [0.0; 5];
        for &i in &batch.indices {
            let x = ds.features(i);
            let z = p[4] + (0..4).map(|k| p[k] * x[k]).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - ds.label(i) as f64;
            (0..4).for_each(|k| g[k] += r * x[k] / 4.0);
            g[4] += r / 4.0;
        }
        g
    };
    let o = grad(&log.step(3).unwrap().batch);
    let brute: Vec<f64> = candidates.iter().map(|c| grad(c).iter().zip(&o).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    let best = brute.iter().enumerate().fold(0, |m, (i, v)| if *v < brute[m] { i } else { m });
    assert_eq!(idx, best);
    assert!((dist - brute[best]).abs() < 1e-12);
}

#[test]
fn pointwise_on_three_points_picks_nearest_gradient() {
    let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0], vec![1, 0, 1], 2, 2, None).unwrap();
    let cfg = RecordConfig {
        model: ModelSpec::logreg(2, 2).unwrap(),
        hyper: Hyperparams::plain(0.1, 1, 2, 3),
        init_seed: 3,
        schedule_seed: 4,
        augment: false,
        checkpoint_interval: 1,
    };
    let (log, _) = record_training(&ds, &cfg).unwrap();
    for x_minus in 0..3 {
        let steps = forge_pointwise(&log, &ds, x_minus, &forge_cfg(2, 1, 1)).unwrap();
        for s in &steps {
            let theta = log.checkpoint(s.t - 1).unwrap();
            let spec = &log.manifest.model;
            let (_, orig) = loss_and_grad(theta, spec, &log.step(s.t).unwrap().batch, &ds, 0.0).unwrap();
            let best = (0..3)
                .filter(|&i| i != x_minus)
                .map(|i| {
                    let (_, g) = loss_and_grad(theta, spec, &MiniBatchSpec::unflipped(vec![i]), &ds, 0.0).unwrap();
                    g.distance_sq(&orig)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(!s.batch.contains(x_minus));
            assert_eq!(s.distance, best);
        }
    }
}

#[test]
fn weight_decay_cancels_in_gradient_gap() {
    let (ds, log) = logreg_run(20, 4, 1, 12);
    let spec = &log.manifest.model;
    let theta = log.checkpoint(1).unwrap();
    let batch = &log.step(2).unwrap().batch;
    let cands: Vec<MiniBatchSpec> = (0..6).map(|k| MiniBatchSpec::unflipped(vec![k, k + 6, k + 12, 19 - k])).collect();
    let d0 = {
        let (_, o) = loss_and_grad(theta, spec, batch, &ds, 0.0).unwrap();
        candidate_distances(theta, spec, &o, &cands, &ds, 0.0).unwrap()
    };
    let d1 = {
        let (_, o) = loss_and_grad(theta, spec, batch, &ds, 0.3).unwrap();
        candidate_distances(theta, spec, &o, &cands, &ds, 0.3).unwrap()
    };
    for (a, b) in d0.iter().zip(&d1) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }
    let argmin = |d: &[f64]| d.iter().enumerate().fold(0, |m, (i, v)| if *v < d[m] { i } else { m });
    assert_eq!(argmin(&d0), argmin(&d1));
}

#[test]
fn full_store_with_flips_carries_b_bits() {
    let ds = synth_gaussian(24, 4, 2, 3, 2.0).unwrap();
    // Treat the 4 features as a 2x2 single-channel image so flips are defined.
    let img = Dataset::new(
        (0..24).flat_map(|i| ds.features(i).to_vec()).collect(),
        ds.labels().to_vec(),
        4,
        2,
        Some(repudiate_core::ImageShape { height: 2, width: 2, channels: 1 }),
    )
    .unwrap();
    let mut hyper = Hyperparams::plain(0.2, 4, 2, 24);
    hyper.weight_decay = 1e-3;
    hyper.momentum = 0.9;
    let cfg = RecordConfig { model: ModelSpec::logreg(4, 2).unwrap(), hyper, init_seed: 1, schedule_seed: 2, augment: true, checkpoint_interval: 1 };
    let (log, _) = record_training(&img, &cfg).unwrap();
    let fcfg = ForgeConfig { augment: true, ..forge_cfg(4, 2, 2) };
    let plan = fcfg.split_plan(24, log.manifest.total_steps).unwrap();
    let store = forge_all_full(&log, &img, &plan, &fcfg).unwrap();
    assert_eq!(store.costs.phase1, phase1_cost(&fcfg, log.manifest.total_steps));
    for g in 0..store.group_count() {
        for e in store.replaced(g).values() {
            assert_eq!(e.batch.flips.len(), 4);
        }
        let por = reconstruct_por(&log, &img, &store, g, 1).unwrap();
        assert_eq!(por.exclusion_violations(), 0);
        assert_eq!(verify_full(&por.log, &img, 0.0).unwrap().max_error, 0.0);
    }
}

#[test]
fn off_subspace_bound_holds_and_scales() {
    for seed in 0..20 {
        let data = synth_subspace(30, 5, seed).unwrap();
        let w = ParamVector::new((0..6).map(|k| ((seed as f64 + 1.0) * 0.37 * (k as f64 + 1.0)).sin()).collect()).unwrap();
        let r = thm1_bound(&data, &w).unwrap();
        assert!(r.holds(1e-12), "seed {seed}: {} < {}", r.min_distance, r.bound);
    }
    let fixture = |s: f64| {
        let ds = Dataset::new(vec![0.0, s, 1.0, 0.0, -2.0, 0.0, 0.5, 0.0], vec![1, 0, 1, 0], 2, 2, None).unwrap();
        SubspaceDataset { dataset: ds, outlier: 0, basis: vec![vec![1.0, 0.0]] }
    };
    let w = ParamVector::zeros(3);
    let base = thm1_bound(&fixture(1.0), &w).unwrap();
    assert!((base.bound - 0.5).abs() < 1e-15);
    assert!(base.min_distance >= 0.5);
    let scaled = thm1_bound(&fixture(3.0), &w).unwrap();
    assert!((scaled.bound - 3.0 * base.bound).abs() < 1e-14);
    let inside = Dataset::new(vec![1.0, 0.0, 1.0, 0.0, -2.0, 0.0], vec![1, 0, 1], 2, 2, None).unwrap();
    assert!(thm1_bound(&SubspaceDataset { dataset: inside, outlier: 0, basis: vec![vec![1.0, 0.0]] }, &w).is_err());
}

#[test]
fn outlier_insertion_costs_more_than_in_distribution() {
    let (ds, log) = logreg_run(40, 5, 2, 13);
    let cfg = forge_cfg(10, 1, 1);
    let typical = forge_insert(&log, &ds, &[1.4, 0.0, 0.1, -0.1], 0, 0.5, &cfg).unwrap();
    // A far point labelled against the model's own prediction keeps a large gradient.
    let far = [60.0, -60.0, 60.0, -60.0];
    let p = repudiate_core::model::predict(log.final_params().unwrap(), &log.manifest.model, &far).unwrap();
    let outlier = forge_insert(&log, &ds, &far, usize::from(p[1] < 0.5), 0.5, &cfg).unwrap();
    let median = |v: &[(u64, f64)]| {
        let mut d: Vec<f64> = v.iter().map(|x| x.1).collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    };
    assert!(median(&outlier.replaced) > 10.0 * median(&typical.replaced));
    for s in &outlier.log.steps {
        assert!(s.batch.indices.iter().filter(|&&i| i == 40).count() <= 1);
    }
}
