use repudiate_core::attacks::{
    max_accuracy_threshold, quantile, raw_score, train_shadows, xent_score, Attack, AttackSuite, SuiteConfig,
};
use repudiate_core::data::{make_schedule, synth_gaussian, Dataset, MiniBatchSpec};
use repudiate_core::metrics::{freq_profile, make_probes, prediction_diff, score_diff, uniformity};
use repudiate_core::model::{sample_cross_entropy, Hyperparams, ModelSpec, ParamVector};
use repudiate_core::pol::{record_training, RecordConfig};

struct World {
    pool: Dataset,
    population: Dataset,
    spec: ModelSpec,
    theta: ParamVector,
    suite: AttackSuite,
}

fn world() -> World {
    let all = synth_gaussian(200, 6, 3, 31, 1.5).unwrap();
    let pool = all.subset(&(0..120).collect::<Vec<_>>()).unwrap();
    let population = all.subset(&(120..200).collect::<Vec<_>>()).unwrap();
    let train = pool.subset(&(0..80).collect::<Vec<_>>()).unwrap();
    let spec = ModelSpec::mlp(vec![6, 8, 3]).unwrap();
    let hyper = Hyperparams::plain(0.1, 10, 10, 80);
    let cfg = RecordConfig { model: spec.clone(), hyper, init_seed: 1, schedule_seed: 2, augment: false, checkpoint_interval: hyper.total_steps };
    let (_, theta) = record_training(&train, &cfg).unwrap();
    let shadows = train_shadows(&pool, 8, &spec, &hyper, 5).unwrap();
    let suite = AttackSuite::calibrate(&pool, &shadows, &population, &theta, &SuiteConfig::default()).unwrap();
    World { pool, population, spec, theta, suite }
}

#[test]
fn shadow_membership_is_balanced_and_deterministic() {
    let pool = synth_gaussian(60, 3, 2, 2, 2.0).unwrap();
    let spec = ModelSpec::logreg(3, 2).unwrap();
    let hyper = Hyperparams::plain(0.2, 5, 2, 60);
    let a = train_shadows(&pool, 16, &spec, &hyper, 9).unwrap();
    assert_eq!(a, train_shadows(&pool, 16, &spec, &hyper, 9).unwrap());
    for i in 0..60 {
        let k = a.in_count(i) as f64;
        assert!((k - 8.0).abs() <= 4.0 * 2.0, "sample {i} in {k} shadows");
    }
    assert!(a.shadows.iter().all(|s| s.members.iter().filter(|&&m| m).count() == 30));
}

#[test]
fn max_accuracy_equals_exhaustive_sweep() {
    let w = world();
    let pool = &w.pool;
    // Rebuild label-0 shadow score sets and sweep every threshold by hand.
    let shadows = train_shadows(pool, 8, &w.spec, &Hyperparams::plain(0.1, 10, 10, 80), 5).unwrap();
    let (mut ins, mut outs) = (Vec::new(), Vec::new());
    for s in &shadows.shadows {
        for i in (0..pool.len()).filter(|&i| pool.label(i) == 0) {
            let v = raw_score(Attack::Xent, &s.params, &w.spec, pool.features(i), 0).unwrap();
            if s.members[i] { ins.push(v) } else { outs.push(v) }
        }
    }
    let accuracy = |t: f64| {
        let hits = ins.iter().filter(|&&v| v >= t).count() + outs.iter().filter(|&&v| v < t).count();
        hits as f64 / (ins.len() + outs.len()) as f64
    };
    let best = ins.iter().chain(&outs).copied().chain([f64::INFINITY]).map(accuracy).fold(0.0, f64::max);
    let (t, acc) = max_accuracy_threshold(&ins, &outs).unwrap();
    assert_eq!(acc, best);
    assert_eq!(accuracy(t), best);
    assert_eq!(w.suite.xent.threshold(0).unwrap(), t);
    assert!(acc >= 0.5);
}

#[test]
fn xent_limits() {
    let spec = ModelSpec::logreg(2, 2).unwrap();
    let zero = ParamVector::zeros(3);
    assert!((xent_score(&zero, &spec, &[1.0, 1.0], 1).unwrap() + 2f64.ln()).abs() < 1e-15);
    let confident = ParamVector::new(vec![40.0, 0.0, 0.0]).unwrap();
    assert!(xent_score(&confident, &spec, &[1.0, 0.0], 1).unwrap() > -1e-15);
}

#[test]
fn enhanced_threshold_hits_target_fpr() {
    let w = world();
    let scores: Vec<f64> = (0..w.population.len())
        .map(|i| xent_score(&w.theta, &w.spec, w.population.features(i), w.population.label(i)).unwrap())
        .collect();
    let t = w.suite.enhanced.threshold(0).unwrap();
    let above = scores.iter().filter(|&&s| s >= t).count() as f64;
    assert!((above - 0.1 * scores.len() as f64).abs() <= 1.0, "{above} of {}", scores.len());
    assert_eq!(quantile(&scores, 0.5).unwrap(), {
        let mut s = scores.clone();
        s.sort_by(f64::total_cmp);
        (s[39] + s[40]) / 2.0
    });
    let best = (0..w.pool.len())
        .max_by(|&a, &b| {
            let s = |i: usize| xent_score(&w.theta, &w.spec, w.pool.features(i), w.pool.label(i)).unwrap();
            s(a).total_cmp(&s(b))
        })
        .unwrap();
    if scores.iter().all(|&s| s < w.suite.score(Attack::EnhancedMia, &w.theta, best).unwrap().score) {
        assert!(w.suite.score(Attack::EnhancedMia, &w.theta, best).unwrap().prediction);
    }
}

#[test]
fn score_differences_and_identity() {
    let w = world();
    let mut other = w.theta.clone();
    other.as_mut_slice()[3] += 0.05;
    for i in [0, 7, 50] {
        let x = w.pool.features(i);
        let y = w.pool.label(i);
        let loss_gap = (sample_cross_entropy(&other, &w.spec, x, y).unwrap() - sample_cross_entropy(&w.theta, &w.spec, x, y).unwrap()).abs();
        assert_eq!(score_diff(&w.suite, Attack::EnhancedMia, &w.theta, &other, i).unwrap(), loss_gap);
        for attack in Attack::ALL {
            assert_eq!(score_diff(&w.suite, attack, &w.theta, &w.theta, i).unwrap(), 0.0);
            let ab = score_diff(&w.suite, attack, &w.theta, &other, i).unwrap();
            assert_eq!(ab, score_diff(&w.suite, attack, &other, &w.theta, i).unwrap());
        }
    }
    let groups: Vec<(usize, Vec<usize>)> = (0..10).map(|g| (g, vec![g])).collect();
    let probes = make_probes(&groups, 80, 40, 5, 1).unwrap();
    let pairs: Vec<_> = probes.iter().map(|p| (p, &w.theta)).collect();
    for attack in Attack::ALL {
        let pct = prediction_diff(&w.suite, attack, &w.theta, &pairs).unwrap();
        assert!(pct.values().all(|&v| v == 0.0));
    }
}

#[test]
fn forged_like_profile_lies_between_flat_and_replacement() {
    let n = 100;
    let flat = make_schedule(n, 10, 5, 3, false).unwrap().batches;
    // Half the steps resampled from a subset, mimicking forged substitution.
    let mut forged = flat.clone();
    for (t, b) in forged.iter_mut().enumerate().filter(|(t, _)| t % 2 == 0) {
        *b = MiniBatchSpec::unflipped((0..10).map(|j| (t * 7 + j * 3) % n).collect());
    }
    use rand::Rng;
    let mut rng = repudiate_core::rng::stream(1, repudiate_core::rng::Domain::Synthetic, 99);
    let with_replacement: Vec<MiniBatchSpec> =
        (0..50).map(|_| MiniBatchSpec::unflipped((0..10).map(|_| rng.random_range(0..n)).collect())).collect();
    let u_flat = uniformity(&flat, n).unwrap();
    let u_forged = uniformity(&forged, n).unwrap();
    let u_repl = uniformity(&with_replacement, n).unwrap();
    assert_eq!(u_flat, 0.0);
    assert!(u_flat <= u_forged && u_forged <= u_repl, "{u_flat} {u_forged} {u_repl}");
    let p = freq_profile(&forged, n).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.windows(2).all(|w| w[0] >= w[1]));
}
