//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Run with `cargo test -p nwhead --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nwhead::calibration::{
    expected_calibration_error, nll_sweep, TemperatureGrid, DEFAULT_LABEL_SMOOTHING,
};
use nwhead::checkpoint::Checkpoint;
use nwhead::data::{blob_centers, generate_blobs, split, write_support_csv, Dataset, Split};
use nwhead::head::{argmax, euclidean, nw_predict_batch};
use nwhead::model::{layer_params, layer_params_mut, ExtractorModel};
use nwhead::report::{calibrate, evaluate, influence_report, sweep_k, EmbeddedDataset};
use nwhead::trainer::{nw_loss_and_grad, sample_episode, train, Episode, TrainConfig, TrainedModel};
use nwhead::{
    build_support, loo_predict, nw_predict, rank_influence, support_influence,
    InferenceMode, LabeledExample, SupportSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

struct Instance {
    support: SupportSet,
    query: LabeledExample,
    tau: f64,
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random support and query with N_s in [2, 50], C in [2, 10], d in [1, 16].
/// The query label is always present in the support; a share of instances
/// give it a single same-class entry so the `+inf` path is exercised.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let ns = rng.random_range(2..=50);
    let c = rng.random_range(2..=10);
    let d = rng.random_range(1..=16);
    let tau = rng.random_range(0.5..2.0);
    let query_label = rng.random_range(0..c);
    let sole = rng.random_bool(0.3);
    let anchor = rng.random_range(0..ns);
    let examples = (0..ns)
        .map(|i| {
            let label = if i == anchor {
                query_label
            } else if sole {
                let other = rng.random_range(0..c - 1);
                if other >= query_label { other + 1 } else { other }
            } else {
                rng.random_range(0..c)
            };
            LabeledExample::new(format!("s{i}"), normal_vec(rng, d), label)
        })
        .collect();
    let support = SupportSet::from_examples(examples, c).expect("valid support");
    let query = LabeledExample::new("q", normal_vec(rng, d), query_label);
    Instance { support, query, tau }
}

fn loo_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut removals = 0;
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let pred = nw_predict("q", &inst.query.features, &inst.support, inst.tau).unwrap();
        for s in 0..inst.support.len() {
            let closed = loo_predict(&pred, &inst.support, s).unwrap();
            let reduced = inst.support.without(s).unwrap();
            let direct = nw_predict("q", &inst.query.features, &reduced, inst.tau).unwrap();
            for (a, b) in closed.iter().zip(&direct.probs) {
                worst = worst.max((a - b).abs());
            }
            removals += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "leave-one-out identity",
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("200 instances, {removals} removals, max |diff| {worst:.3e} (<= 1e-12), {:.2} s (< 5 s)", elapsed.as_secs_f64()),
    )
}

fn influence_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut inf_cases = 0;
    let mut inf_mismatch = 0;
    for _ in 0..200 {
        let inst = random_instance(&mut rng);
        let y = inst.query.label;
        let pred = nw_predict("q", &inst.query.features, &inst.support, inst.tau).unwrap();
        let base = -pred.probs[y].ln();
        for s in 0..inst.support.len() {
            let closed = support_influence(&pred, &inst.support, s, y).unwrap().influence;
            let reduced = inst.support.without(s).unwrap();
            let direct_pred = nw_predict("q", &inst.query.features, &reduced, inst.tau).unwrap();
            let direct = -direct_pred.probs[y].ln() - base;
            if closed.is_infinite() || direct.is_infinite() {
                inf_cases += 1;
                if closed != direct {
                    inf_mismatch += 1;
                }
            } else {
                worst = worst.max((closed - direct).abs());
            }
        }
    }
    outcome(
        "influence exactness",
        worst <= 1e-10 && inf_mismatch == 0 && inf_cases > 0,
        format!("max |diff| {worst:.3e} (<= 1e-10), {inf_cases} +inf cases, {inf_mismatch} mismatched"),
    )
}

fn influence_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut sign_violations = 0;
    let mut order_violations = 0;
    let mut pairs = 0usize;
    for _ in 0..1000 {
        let inst = random_instance(&mut rng);
        let ranked = rank_influence(&inst.query, &inst.support, inst.tau).unwrap();
        for r in &ranked {
            if (r.same_class && r.influence < 0.0) || (!r.same_class && r.influence > 0.0) {
                sign_violations += 1;
            }
        }
        for a in &ranked {
            for b in &ranked {
                if a.same_class != b.same_class || a.weight <= b.weight {
                    continue;
                }
                pairs += 1;
                let agrees = if a.same_class {
                    a.influence >= b.influence
                } else {
                    a.influence <= b.influence
                };
                if !agrees {
                    order_violations += 1;
                }
            }
        }
    }
    outcome(
        "influence sign and ordering",
        sign_violations == 0 && order_violations == 0,
        format!("1000 instances, {sign_violations} sign violations, {order_violations} ordering violations over {pairs} pairs"),
    )
}

fn set_params(model: &mut ExtractorModel, values: &[f64]) {
    for (p, v) in layer_params_mut(model.layers.iter_mut().collect()).into_iter().zip(values) {
        *p = *v;
    }
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let train: Vec<LabeledExample> = (0..12)
            .map(|i| {
                let label = i % 3;
                let f = normal_vec(&mut rng, 3).iter().map(|v| v + label as f64).collect();
                LabeledExample::new(format!("t{i}"), f, label)
            })
            .collect();
        let mut model = ExtractorModel::new(&[3, 4, 2], &mut rng).unwrap();
        let episodes: Vec<Episode> = (0..3)
            .map(|q| sample_episode(&train, q * 4, 3, &mut rng).unwrap())
            .collect();
        let loss = |m: &ExtractorModel| nw_loss_and_grad(m, &train, &episodes, 1.0, 0.0, 3).unwrap();
        let analytic = layer_params(&loss(&model).1.layers.iter().collect::<Vec<_>>());
        let theta = layer_params(&model.layers.iter().collect::<Vec<_>>());
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            set_params(&mut model, &t);
            let up = loss(&model).0;
            t[i] = theta[i] - h;
            set_params(&mut model, &t);
            let down = loss(&model).0;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    outcome(
        "gradient check",
        worst <= 1e-4,
        format!("10 models (3-4-2, N_s = 3), max relative error {worst:.3e} (<= 1e-4)"),
    )
}

fn cluster_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (classes, per_class, d) = (4, 7, 3);
    let train: Vec<LabeledExample> = (0..classes * per_class)
        .map(|i| LabeledExample::new(format!("t{i}"), normal_vec(&mut rng, d), i % classes))
        .collect();
    let full = build_support(&train, classes, &InferenceMode::Full).unwrap();
    let cluster = build_support(&train, classes, &InferenceMode::Cluster { k: per_class, seed: 9 }).unwrap();
    let queries: Vec<LabeledExample> = (0..100)
        .map(|i| LabeledExample::new(format!("q{i}"), normal_vec(&mut rng, d).iter().map(|v| 1.5 * v).collect(), 0))
        .collect();
    let a = nw_predict_batch(&queries, &full, 1.0).unwrap();
    let b = nw_predict_batch(&queries, &cluster, 1.0).unwrap();
    let worst = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| x.probs.iter().zip(&y.probs).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    outcome(
        "cluster-mode degeneracy",
        worst <= 1e-12 && cluster.len() == full.len(),
        format!("100 queries, {} centroids, max |diff| {worst:.3e} (<= 1e-12)", cluster.len()),
    )
}

/// 3-class blobs, separation 6, unit noise; 300 train / 300 val / 300 test.
fn blob_data() -> Dataset {
    let ds = generate_blobs(3, 300, 2, 6.0, 1.0, 7).unwrap();
    split(&ds, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 7).unwrap()
}

fn blob_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embed_dim: 2,
        steps: 2000,
        seed,
        ..TrainConfig::default()
    }
}

fn train_blobs(data: &Dataset, seed: u64) -> TrainedModel {
    let train_set = data.subset(Split::Train);
    let val = data.subset(Split::Val);
    train(&train_set, &val, data.class_count, &blob_config(seed)).unwrap().0
}

fn nearest_centroid_oracle() -> Outcome {
    let centers = blob_centers(3, 2, 6.0, 7).unwrap();
    let sample = generate_blobs(3, 334, 2, 6.0, 1.0, 7).unwrap();
    let wrong = sample
        .examples
        .iter()
        .filter(|e| {
            let d: Vec<f64> = centers.iter().map(|c| -euclidean(c, &e.features)).collect();
            argmax(&d) != e.label
        })
        .count();
    let err = wrong as f64 / sample.len() as f64;
    outcome(
        "blob nearest-centroid oracle",
        err <= 0.02,
        format!("{} samples, error {err:.4} (<= 0.02)", sample.len()),
    )
}

fn blob_end_to_end(data: &Dataset) -> (Outcome, TrainedModel) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let (model, report) = pool.install(|| {
        let model = train_blobs(data, 3);
        let embedded = EmbeddedDataset::new(&model, data.clone()).unwrap();
        let report = evaluate(&model, &embedded, Split::Test, &InferenceMode::Full, 1.0, 15).unwrap();
        (model, report)
    });
    let elapsed = start.elapsed();
    let o = outcome(
        "synthetic end-to-end",
        report.error_rate <= 0.05 && elapsed <= Duration::from_secs(60),
        format!(
            "Full-mode test error {:.4} (<= 0.05) on {} queries, {:.1} s single-threaded (<= 60 s)",
            report.error_rate,
            report.n_queries,
            elapsed.as_secs_f64()
        ),
    );
    (o, model)
}

fn support_size_trend(data: &Dataset, model: &TrainedModel) -> Outcome {
    let embedded = EmbeddedDataset::new(model, data.clone()).unwrap();
    let mut e1 = 0.0;
    let mut e8 = 0.0;
    for seed in 0..5 {
        let r1 = evaluate(model, &embedded, Split::Test, &InferenceMode::Random { k: 1, seed }, 1.0, 15).unwrap();
        let r8 = evaluate(model, &embedded, Split::Test, &InferenceMode::Random { k: 8, seed }, 1.0, 15).unwrap();
        e1 += r1.error_rate / 5.0;
        e8 += r8.error_rate / 5.0;
    }
    outcome(
        "support-size trend",
        e8 <= e1 + 0.02,
        format!("mean error Random k=8 {e8:.4} <= k=1 {e1:.4} + 0.02"),
    )
}

fn calibration_constants(data: &Dataset, model: &TrainedModel) -> Outcome {
    let grid = TemperatureGrid::default();
    let taus = grid.values().unwrap();
    let step = 2.5 / 99.0;
    let grid_ok = taus.len() == 100
        && taus[0] == 0.5
        && taus[99] == 3.0
        && taus.iter().enumerate().all(|(i, t)| (t - (0.5 + step * i as f64)).abs() <= 1e-12);
    let eps_ok = DEFAULT_LABEL_SMOOTHING == 0.1;

    let embedded = EmbeddedDataset::new(model, data.clone()).unwrap();
    let mut modes = vec![InferenceMode::Full];
    for seed in 0..5 {
        modes.push(InferenceMode::Random { k: 1, seed });
        modes.push(InferenceMode::Random { k: 8, seed });
        modes.push(InferenceMode::Cluster { k: 4, seed });
    }
    let mut argmax_changes = 0;
    let mut nll_violations = 0;
    for mode in &modes {
        let report = calibrate(&embedded, mode, &grid, 15).unwrap();
        argmax_changes += report.argmax_changes;
        let val = embedded.require(Split::Val).unwrap();
        let support = embedded.support(mode).unwrap();
        let at_one = nll_sweep(&val, &support, &[1.0]).unwrap()[0];
        if report.val_nll_at_tau_star > at_one {
            nll_violations += 1;
        }
    }
    outcome(
        "calibration protocol constants",
        grid_ok && eps_ok && argmax_changes == 0 && nll_violations == 0,
        format!(
            "grid 100 on [0.5, 3]: {grid_ok}, default smoothing 0.1: {eps_ok}, over {} runs: {argmax_changes} test argmax changes, {nll_violations} runs with NLL(tau*) > NLL(1)",
            modes.len()
        ),
    )
}

/// Brute-force ECE: for each bin, scan every prediction.
fn ece_oracle(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let n = probs.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let (mut count, mut conf, mut correct) = (0.0, 0.0, 0.0);
        for (p, &y) in probs.iter().zip(labels) {
            let mut best = 0;
            for c in 1..p.len() {
                if p[c] > p[best] {
                    best = c;
                }
            }
            let top = p[best];
            if (top > lo && top <= hi) || (b == 0 && top == 0.0) {
                count += 1.0;
                conf += top;
                if best == y {
                    correct += 1.0;
                }
            }
        }
        if count > 0.0 {
            ece += count / n * (correct / count - conf / count).abs();
        }
    }
    ece
}

fn ece_oracle_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(2..=10);
        let probs: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..c)).collect();
        for bins in [1, 10, 15] {
            let lib = expected_calibration_error(&probs, &labels, bins).unwrap().ece;
            worst = worst.max((lib - ece_oracle(&probs, &labels, bins)).abs());
        }
    }
    // Each bin's accuracy equals its confidence; dyadic confidences keep the
    // bin means exact.
    let mut perfect = Vec::new();
    let mut perfect_labels = Vec::new();
    for (conf, total, correct) in [(0.75, 8, 6), (0.5, 4, 2), (1.0, 3, 3)] {
        for i in 0..total {
            perfect.push(vec![conf, 1.0 - conf]);
            perfect_labels.push(if i < correct { 0 } else { 1 });
        }
    }
    let perfect_ece = expected_calibration_error(&perfect, &perfect_labels, 15).unwrap().ece;
    let wrong = vec![vec![1.0, 0.0, 0.0]; 20];
    let wrong_ece = expected_calibration_error(&wrong, &[1; 20], 15).unwrap().ece;
    outcome(
        "ECE oracle",
        worst <= 1e-12 && perfect_ece == 0.0 && wrong_ece == 1.0,
        format!("100 fixtures of 50, max |diff| {worst:.3e} (<= 1e-12), perfect {perfect_ece}, all-wrong {wrong_ece}"),
    )
}

fn determinism(data: &Dataset) -> Outcome {
    let run = || -> Vec<String> {
        let cfg = TrainConfig { steps: 300, ..blob_config(11) };
        let (model, log) = train(&data.subset(Split::Train), &data.subset(Split::Val), 3, &cfg).unwrap();
        let ck = Checkpoint::from_model(&model, 3, &cfg).to_json().unwrap();
        let embedded = EmbeddedDataset::new(&model, data.clone()).unwrap();
        let mut out = vec![ck, serde_json::to_string(&log).unwrap()];
        for mode in [
            InferenceMode::Random { k: 5, seed: 2 },
            InferenceMode::Cluster { k: 5, seed: 2 },
            InferenceMode::ClosestCluster { k: 5, seed: 2 },
        ] {
            let mut buf = Vec::new();
            write_support_csv(&embedded.support(&mode).unwrap(), &mut buf).unwrap();
            out.push(String::from_utf8(buf).unwrap());
        }
        let eval = evaluate(&model, &embedded, Split::Test, &InferenceMode::Full, 1.0, 15).unwrap();
        let sweep = sweep_k(&model, &embedded, Split::Test, &["random", "cluster", "cc"], &[1, 4], 2, 1.0, 15).unwrap();
        let test = embedded.require(Split::Test).unwrap();
        let support = embedded.support(&InferenceMode::Full).unwrap();
        let infl = influence_report(&test[0], &support, 1.0, 5).unwrap();
        let cal = calibrate(&embedded, &InferenceMode::Full, &TemperatureGrid::default(), 15).unwrap();
        out.push(serde_json::to_string(&eval).unwrap());
        out.push(serde_json::to_string(&sweep).unwrap());
        out.push(serde_json::to_string(&infl).unwrap());
        out.push(serde_json::to_string(&cal).unwrap());
        out
    };
    let a = run();
    let b = run();
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    outcome(
        "determinism",
        a == b,
        format!("{same}/{} artifacts byte-identical (checkpoint, log, 3 support sets, 4 reports)", a.len()),
    )
}

fn main() -> ExitCode {
    let data = blob_data();
    let mut results = vec![
        loo_identity(),
        influence_exactness(),
        influence_properties(),
        gradient_check(),
        cluster_degeneracy(),
        nearest_centroid_oracle(),
    ];
    let (e2e, model) = blob_end_to_end(&data);
    results.push(e2e);
    results.push(support_size_trend(&data, &model));
    results.push(calibration_constants(&data, &model));
    results.push(ece_oracle_check());
    results.push(determinism(&data));

    println!();
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
