//! Acceptance suite. Each test prints one verdict line to stderr
//! (`criterion N [PASS|FAIL|SKIP] ...`), written directly so it shows even
//! when libtest captures output, and then asserts the verdict.
//!
//! Criterion 5 runs full-resolution presets for hours; it only executes
//! with `MCL_EXTENDED=1` and `MCL_MNIST_DIR` set to the official IDX files.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use metacl::classifier::{self, ClassifierParams, GradStats};
use metacl::engine::{
    continual_learn, ewc_baseline_step, meta_train, median, sgd_step, MetaTrainConfig, RuleRegistry, RuleParams,
    TaskContext,
};
use metacl::experiment::{checkpoint_path, run_config, Checkpoint, ExperimentConfig, Summary};
use metacl::ndcore::{FlatVector, LayoutMap, Matrix, Rng};
use metacl::predictor::{apply_update, meta_gradient, predict_steps, FeatureTransform, PredictorParams};
use metacl::tasks::{make_synthetic_task, SequenceKind, TaskSequence};

use common::*;

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} [{tag}] {title}: {detail}");
}

fn skip(id: u32, title: &str, why: &str) {
    let _ = writeln!(std::io::stderr(), "criterion {id} [SKIP] {title}: {why}");
}

fn quiet(_: &str) {}

fn run_preset(cfg: ExperimentConfig) -> Summary {
    run_config(&cfg.resolve().unwrap(), quiet).unwrap()
}

/// Per-seed `learned − sgd` differences of `metric`.
fn paired_gaps(summary: &Summary, metric: impl Fn(&[f64], f64) -> f64) -> Vec<f64> {
    let learned = &summary.rules["learned"].runs;
    let sgd = &summary.rules["sgd"].runs;
    learned
        .iter()
        .zip(sgd)
        .map(|(l, s)| {
            assert_eq!(l.seed, s.seed);
            metric(&l.accuracies, l.average) - metric(&s.accuracies, s.average)
        })
        .collect()
}

fn pct(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:+.1}", 100.0 * x)).collect();
    format!("[{}]", parts.join(", "))
}

#[test]
fn criterion_1_classifier_gradient_oracle() {
    let start = Instant::now();
    let worst = (0..50).map(classifier_gradient_check).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && secs < 30.0;
    verdict(
        1,
        "classifier gradient vs central differences",
        pass,
        &format!("50 nets, max rel err {worst:.2e} (≤ 1e-6), {secs:.2}s (< 30s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_meta_gradient_oracle() {
    let start = Instant::now();
    let worst = (0..20).map(meta_gradient_check).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && secs < 60.0;
    verdict(
        2,
        "one-step meta-gradient vs central differences",
        pass,
        &format!("20 instances, max rel err {worst:.2e} (≤ 1e-6), {secs:.2}s (< 60s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_desk_permuted_retention() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = run_preset(preset("desk-permuted.toml", dir.path()));
    let secs = start.elapsed().as_secs_f64();
    let gaps = paired_gaps(&summary, |_, avg| avg);
    let med = median(&gaps);
    let pass = med >= 0.10 && secs <= 600.0;
    verdict(
        3,
        "desk permuted pair, learned avg − SGD avg",
        pass,
        &format!(
            "median gap {:+.1} pts (≥ +10), per seed {}, learned {:.1}, sgd {:.1}, {secs:.0}s (≤ 600s)",
            100.0 * med,
            pct(&gaps),
            100.0 * summary.rules["learned"].average_mean,
            100.0 * summary.rules["sgd"].average_mean,
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_desk_disjoint_task1_retention() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let summary = run_preset(preset("desk-disjoint.toml", dir.path()));
    let secs = start.elapsed().as_secs_f64();
    let gaps = paired_gaps(&summary, |accs, _| accs[0]);
    let med = median(&gaps);
    let pass = med >= 0.40;
    verdict(
        4,
        "desk disjoint pair, learned task-1 − SGD task-1",
        pass,
        &format!(
            "median gap {:+.1} pts (≥ +40), per seed {}, learned task-1 {:.1}, sgd task-1 {:.1}, {secs:.0}s",
            100.0 * med,
            pct(&gaps),
            100.0 * summary.rules["learned"].per_task_mean[0],
            100.0 * summary.rules["sgd"].per_task_mean[0],
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_extended_full_scale() {
    let title = "full-scale disjoint and three-task permuted presets";
    let extended = std::env::var("MCL_EXTENDED").is_ok_and(|v| v == "1");
    let Some(mnist) = std::env::var_os("MCL_MNIST_DIR").filter(|_| extended) else {
        skip(5, title, "set MCL_EXTENDED=1 and MCL_MNIST_DIR to run (hours of CPU)");
        return;
    };
    let mut details = Vec::new();
    let mut pass = true;
    for (file, target, tol) in [("table1-full.toml", 0.823, 0.06), ("table2-full.toml", 0.955, 0.03)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = preset(file, dir.path());
        cfg.data.mnist_dir = mnist.clone().into();
        let summary = run_preset(cfg);
        let got = summary.rules["learned"].average_mean;
        let ok = (got - target).abs() <= tol;
        pass &= ok;
        details.push(format!("{file}: {:.1} vs {:.1} ± {:.0}", 100.0 * got, 100.0 * target, 100.0 * tol));
    }
    verdict(5, title, pass, &details.join("; "));
    assert!(pass);
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn criterion_6_invariants() {
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, what: &'static str| {
        if !ok {
            failures.push(what);
        }
    };
    let mut rng = Rng::new(6);

    // η = 0: parameters frozen, meta-gradient exactly zero, meta-training a no-op on φ.
    let inst = meta_instance(6);
    let steps = predict_steps(&inst.phi, &inst.feats).unwrap();
    check(
        bits(apply_update(inst.theta.theta(), &steps, 0.0).unwrap().as_slice()) == bits(inst.theta.theta().as_slice()),
        "eta=0 update moves theta",
    );
    let upstream = random_vector(&mut rng, inst.theta.num_params(), 1.0);
    check(
        meta_gradient(&inst.phi, &inst.feats, &upstream, 0.0).unwrap().iter().all(|g| *g == 0.0),
        "eta=0 meta-gradient nonzero",
    );
    let a = make_synthetic_task(1, 8, 3, 20, 2.0).unwrap();
    let b = make_synthetic_task(2, 8, 3, 20, 2.0).unwrap();
    let seq = TaskSequence::new(vec![a.clone(), b.clone()], SequenceKind::Meta).unwrap();
    let phi0 = PredictorParams::init_dense(&[5, 4, 4, 1], FeatureTransform::Log, &mut rng).unwrap();
    let cfg = MetaTrainConfig {
        eta: 0.0,
        meta_epochs: 2,
        minibatch: 16,
        ..MetaTrainConfig::default()
    };
    let out = meta_train(&[8, 6, 3], &phi0, &seq, &cfg).unwrap();
    check(bits(out.predictor.phi().as_slice()) == bits(phi0.phi().as_slice()), "eta=0 meta-training changed phi");

    // Zero output layer: identity update, and task-1 parameters survive continual learning.
    let zero_phi = PredictorParams::init(&[5, 10, 10, 1], FeatureTransform::Log, &mut rng).unwrap();
    let mut rule = RuleRegistry::builtin()
        .create("learned", &RuleParams::default(), Some(&zero_phi))
        .unwrap();
    let theta = random_vector(&mut rng, 20, 1.0);
    let stats = GradStats {
        avg_sq_grad: random_vector(&mut rng, 20, 1.0),
    };
    rule.begin_task(&TaskContext {
        theta_star: &theta,
        prev_stats: Some(&stats),
    })
    .unwrap();
    let stepped = rule.step(&theta, &random_vector(&mut rng, 20, 1.0)).unwrap();
    check(bits(stepped.as_slice()) == bits(theta.as_slice()), "zero-output predictor moved theta");
    let targets = TaskSequence::new(vec![a.clone(), b], SequenceKind::Target).unwrap();
    let init = ClassifierParams::init(&[8, 6, 3], &mut rng).unwrap();
    let ccfg = metacl::engine::ContinualConfig {
        first_task_epochs: 2,
        epochs: 2,
        minibatch: 16,
        ..Default::default()
    };
    let (_, m) = continual_learn(&init, &zero_phi, &targets, &ccfg).unwrap();
    let after_first = &m.rows[ccfg.first_task_epochs - 1].accuracies;
    check(m.final_accuracies[0] == after_first[0], "zero-output predictor changed task-1 accuracy");

    // Softmax rows sum to one, including extreme logits.
    let params = ClassifierParams::from_flat(&[8, 6, 3], random_vector(&mut rng, 8 * 6 + 6 + 6 * 3 + 3, 40.0)).unwrap();
    let probs = classifier::forward(&params, a.test.inputs()).unwrap();
    let worst = (0..probs.rows())
        .map(|r| (probs.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-9, "softmax row sum off by more than 1e-9");

    // Element-wise predictor: batched equals row-at-a-time, bit for bit.
    let batched = predict_steps(&inst.phi, &inst.feats).unwrap();
    let single: Vec<f64> = (0..inst.feats.num_params())
        .map(|i| predict_steps(&inst.phi, &inst.feats.select_rows(&[i])).unwrap().steps[0])
        .collect();
    check(bits(batched.steps.as_slice()) == bits(&single), "batched steps differ from row-at-a-time");

    // EWC with λ = 0 is SGD.
    for _ in 0..20 {
        let n = 1 + rng.below(30);
        let th = random_vector(&mut rng, n, 1.0);
        let g = random_vector(&mut rng, n, 1.0);
        let star = random_vector(&mut rng, n, 1.0);
        let fisher = GradStats {
            avg_sq_grad: random_vector(&mut rng, n, 1.0),
        };
        let lr = rng.uniform();
        let ewc = ewc_baseline_step(&th, &g, &fisher, &star, lr, 0.0).unwrap();
        check(bits(ewc.as_slice()) == bits(sgd_step(&th, &g, lr).unwrap().as_slice()), "ewc(λ=0) != sgd");
    }

    // Flatten/unflatten and checkpoint round-trips.
    let mut layout = LayoutMap::new();
    layout.push("w", 3, 4);
    layout.push("b", 1, 4);
    let flat = random_vector(&mut rng, layout.total_len(), 3.0);
    let parts = layout.unflatten(&flat).unwrap();
    let back = layout.flatten(&parts.iter().collect::<Vec<&Matrix>>()).unwrap();
    check(bits(back.as_slice()) == bits(flat.as_slice()), "flatten(unflatten(x)) != x");
    let mut ckpt = Checkpoint::new();
    ckpt.push_layers("theta", params.layout(), params.theta()).unwrap();
    ckpt.push_layers("phi", inst.phi.layout(), inst.phi.phi()).unwrap();
    let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let theta_back: FlatVector = loaded.layers("theta", params.layout()).unwrap();
    let phi_back = loaded.layers("phi", inst.phi.layout()).unwrap();
    check(
        bits(theta_back.as_slice()) == bits(params.theta().as_slice())
            && bits(phi_back.as_slice()) == bits(inst.phi.phi().as_slice()),
        "checkpoint round-trip not bit-exact",
    );

    let pass = failures.is_empty();
    let detail = if pass {
        "eta=0, zero-output identity, softmax, element-wise purity, ewc(0)=sgd, round-trips".to_string()
    } else {
        failures.join("; ")
    };
    verdict(6, "invariant suite", pass, &detail);
    assert!(pass);
}

/// Short variants of the MNIST presets: one seed, fewer meta-epochs.
fn shortened(name: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = preset(name, out);
    cfg.seeds = Some(vec![0]);
    cfg.meta.meta_epochs = 2;
    cfg.predictor.candidates = Some(2);
    cfg
}

#[test]
fn criterion_7_determinism() {
    let mut mismatches = Vec::new();
    let configs: [(&str, fn(&Path) -> ExperimentConfig); 3] = [
        ("synthetic-smoke", |p| preset("synthetic-smoke.toml", p)),
        ("desk-permuted (short)", |p| shortened("desk-permuted.toml", p)),
        ("desk-disjoint (short)", |p| shortened("desk-disjoint.toml", p)),
    ];
    for (name, make) in configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_preset(make(a.path()));
        let cfg = make(b.path()).resolve().unwrap();
        run_config(&cfg, quiet).unwrap();
        if fs::read(a.path().join("metrics.csv")).unwrap() != fs::read(b.path().join("metrics.csv")).unwrap() {
            mismatches.push(format!("{name}: metrics.csv"));
        }
        for &seed in cfg.seeds() {
            if fs::read(checkpoint_path(a.path(), seed)).unwrap() != fs::read(checkpoint_path(b.path(), seed)).unwrap()
            {
                mismatches.push(format!("{name}: checkpoint seed {seed}"));
            }
        }
    }
    let pass = mismatches.is_empty();
    let detail = if pass {
        "metrics.csv and checkpoints byte-identical across two runs of 3 presets".to_string()
    } else {
        mismatches.join("; ")
    };
    verdict(7, "determinism", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_8_step_histogram_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = shortened("desk-permuted.toml", dir.path());
    cfg.meta.meta_epochs = 4;
    cfg.predictor.candidates = Some(1);
    let cfg = cfg.resolve().unwrap();
    let summary = run_config(&cfg, quiet).unwrap();
    let text = fs::read_to_string(dir.path().join("histograms.csv")).unwrap();
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let bins = cfg.meta.histogram.bins;
    let zero_bin = 2 + 1 + bins / 2;
    let total = |r: &Vec<usize>| r[2..].iter().sum::<usize>();
    let p = total(&rows[0]);
    let epoch0: Vec<&Vec<usize>> = rows.iter().filter(|r| r[1] == 0).collect();
    let pass = rows.len() == cfg.meta.meta_epochs
        && rows.iter().all(|r| total(r) == p)
        && !epoch0.is_empty()
        && epoch0.iter().all(|r| r[zero_bin] == p);
    let modes: Vec<String> = summary
        .predictors
        .iter()
        .map(|s| s.final_histogram_modes.map_or("n/a".into(), |m| m.to_string()))
        .collect();
    verdict(
        8,
        "step histogram series",
        pass,
        &format!(
            "{} rows for {} meta-epochs, each summing to P={p}; epoch-0 mass in zero bin {}/{p}; \
             final-histogram modes (reported, not gated): {}",
            rows.len(),
            cfg.meta.meta_epochs,
            epoch0.first().map_or(0, |r| r[zero_bin]),
            modes.join(", ")
        ),
    );
    assert!(pass);
}
