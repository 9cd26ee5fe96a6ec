//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (no libtest harness) so the summary is always
//! printed. The training criteria need ten default-length runs and take
//! roughly half an hour on one core.

use std::time::{Duration, Instant};

use probprompt::gradsuite;
use probprompt::losses::{deterministic_baseline_loss, mc_predict, pixel_text_scores};
use probprompt::model::{ForwardOptions, ModelDims, Noise, PplModel};
use probprompt::numcore::{seeded_rng, Graph, ParamStore, RngStream, Tensor};
use probprompt::oracles;
use probprompt::synth::{generate_scene, stack_images, Scene, SceneSpec};
use probprompt::trainer::{analyze_uncertainty, heldout_scenes, metrics_csv, Checkpoint, Confusion, TrainConfig, Trainer};
use probprompt::{LossWeights, SamplingMode};

struct Outcome {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, title: &'static str, pass: bool, detail: String) -> Outcome {
    eprintln!("criterion {id} done: {}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, title, pass, detail }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = gradsuite::run_suite(gradsuite::TRIALS, 0).expect("gradient suite runs");
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        1,
        "gradient suite",
        pass,
        format!(
            "{} operations x {} trials, max rel err {worst:.2e} (tol {:.0e}), {:.1} s (limit 120 s){}",
            reports.len(),
            gradsuite::TRIALS,
            gradsuite::TOLERANCE,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) }
        ),
    )
}

fn moment_oracle() -> Outcome {
    let reports = oracles::moment_suite(oracles::MIXTURES, oracles::MOMENT_SAMPLES, 0).expect("moment suite runs");
    let worst_mean = reports.iter().map(|r| r.mean_rel_err).fold(0.0, f64::max);
    let worst_var = reports.iter().map(|r| r.var_rel_err).fold(0.0, f64::max);
    let pass = reports.len() == 20 && reports.iter().all(|r| r.passed());
    outcome(
        2,
        "MoG moment oracle",
        pass,
        format!(
            "{} mixtures, {} stratified samples each, max rel err mean {worst_mean:.2e} var {worst_var:.2e} (tol 1e-2)",
            reports.len(),
            oracles::MOMENT_SAMPLES
        ),
    )
}

fn kl_oracle() -> Outcome {
    let reports = oracles::kl_suite(20, 0).expect("kl suite runs");
    let worked = &reports[0];
    let worst = reports.iter().map(|r| r.abs_err()).fold(0.0, f64::max);
    let worked_ok = (worked.closed_form - 0.15343).abs() < 5e-6 && worked.passed();
    let pass = reports.len() == 20 && reports.iter().all(|r| r.passed()) && worked_ok;
    outcome(
        3,
        "KL oracle",
        pass,
        format!(
            "{} pairs, max |closed - quadrature| {worst:.2e} (tol 1e-3); KL(N(0,2)||N(0,1)) = {:.5} closed, {:.5} quadrature",
            reports.len(),
            worked.closed_form,
            worked.numeric
        ),
    )
}

fn small_dims(k: usize) -> ModelDims {
    ModelDims {
        k,
        l: 3,
        d: 16,
        classes: 4,
        height: 8,
        width: 8,
        channels: 4,
        patch: 4,
        heads: 4,
        text_blocks: 1,
        image_blocks: 1,
        decoder_blocks: 2,
        mlp_ratio: 2,
    }
}

fn small_spec(d: &ModelDims) -> SceneSpec {
    SceneSpec {
        height: d.height,
        width: d.width,
        classes: d.classes,
        channels: d.channels,
        max_classes: 3,
        ..SceneSpec::default()
    }
}

fn random_model(seed: u64, dims: ModelDims) -> (ParamStore, PplModel) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, 0);
    let model = PplModel::new(&mut store, &mut rng, dims).unwrap();
    // spread parameters beyond the small init so scores are far from uniform
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    (store, model)
}

fn path_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let instances = 20;
    for seed in 0..instances {
        let dims = small_dims(1);
        let (store, model) = random_model(seed, dims);
        let spec = small_spec(&dims);
        let mut rng = seeded_rng(seed, 1);
        let scenes: Vec<Scene> = (0..3).map(|_| generate_scene(&spec, &spec.palette(), &mut rng).unwrap()).collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let weights = LossWeights::default();

        let mut g = Graph::with_params(&store);
        let fwd = model
            .forward(
                &mut g,
                &refs,
                ForwardOptions {
                    samples: 1,
                    mode: SamplingMode::Stratified,
                    weights,
                    noise: Noise::Zero,
                    zero_sigma: true,
                },
            )
            .unwrap();
        let ppl = g.value(fwd.pixel).item();

        // deterministic path: plain features and the single prompt's class embeddings
        let mut h = Graph::with_params(&store);
        let images = h.constant(stack_images(&refs).unwrap());
        let v = model.image.forward(&mut h, images, refs.len()).unwrap();
        let w = model.text.encode(&mut h).unwrap();
        let feat = h.value(v).clone();
        let class_embs = h.value(w).clone();
        let p = feat.outer() / refs.len();
        let mut baseline = 0.0;
        for (i, s) in refs.iter().enumerate() {
            let rows: Vec<Vec<f64>> = (0..p).map(|r| feat.row(i * p + r).to_vec()).collect();
            let labels = model.patch_labels(s);
            baseline += deterministic_baseline_loss(&Tensor::from_rows(&rows), &class_embs, &labels, weights.tau).unwrap();
        }
        baseline /= refs.len() as f64;
        worst = worst.max((ppl - baseline).abs());
    }
    outcome(
        4,
        "path equivalence",
        worst <= 1e-10,
        format!("{instances} random instances (K=1, sigma=0, N=1, eps=0), max |L_ppl - L_det| {worst:.2e} (tol 1e-10)"),
    )
}

fn random_unit_rows(rng: &mut RngStream, rows: usize, d: usize) -> Tensor {
    let mut t = rng.normal_tensor(&[rows, d], 1.0);
    for r in 0..rows {
        let row = t.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Worst row-sum error over a corpus of random score maps and Monte-Carlo
/// predictions, plus the trained model's held-out probabilities.
fn normalization(trained: &Trainer) -> Outcome {
    let mut rng = seeded_rng(10, 0);
    let mut worst = 0.0f64;
    let mut maps = 0usize;
    for i in 0..200 {
        let (p, c, d) = (rng.int_inclusive(1, 80), rng.int_inclusive(2, 10), rng.int_inclusive(2, 64));
        let tau = [0.07, 0.01, 1.0, 5.0][i % 4];
        let feat = random_unit_rows(&mut rng, p, d);
        let embs = random_unit_rows(&mut rng, c, d);
        worst = worst.max(pixel_text_scores(&feat, &embs, tau).unwrap().max_row_sum_error());
        let n = rng.int_inclusive(1, 20);
        let samples = random_unit_rows(&mut rng, n * c, d).reshape(&[n, c, d]).unwrap();
        worst = worst.max(mc_predict(&feat, &samples, tau).unwrap().max_row_sum_error());
        maps += 2;
    }
    // extreme logits
    let feat = Tensor::from_rows(&[vec![1e3, 0.0], vec![-1e3, 1e3]]);
    let embs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
    worst = worst.max(pixel_text_scores(&feat, &embs, 0.01).unwrap().max_row_sum_error());
    maps += 1;

    let cfg = trained.config();
    let mut noise = seeded_rng(11, 0);
    for chunk in trained.heldout.chunks(25) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let mut g = Graph::with_params(&trained.state.params);
        let fwd = trained
            .model
            .forward(
                &mut g,
                &refs,
                ForwardOptions {
                    samples: cfg.n,
                    mode: cfg.sampling_mode,
                    weights: cfg.weights,
                    noise: Noise::Draw(&mut noise),
                    zero_sigma: false,
                },
            )
            .unwrap();
        let probs = g.value(fwd.probs);
        for r in 0..probs.outer() {
            worst = worst.max((probs.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        maps += chunk.len();
    }
    outcome(
        10,
        "score-map normalization",
        worst <= 1e-10,
        format!("{maps} score maps, max |row sum - 1| {worst:.2e} (tol 1e-10)"),
    )
}

fn determinism() -> Outcome {
    let cfg = TrainConfig {
        steps: 40,
        eval_every: 20,
        heldout_scenes: 50,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(&cfg).unwrap();
        t.run_to(cfg.steps).unwrap();
        (metrics_csv(&t.eval_log), metrics_csv(&t.train_log))
    };
    let a = run();
    let b = run();
    let identical = a == b;

    let mut t = Trainer::new(&cfg).unwrap();
    t.run_to(20).unwrap();
    let json = t.checkpoint().to_json();
    drop(t);
    let mut resumed = Checkpoint::from_json(&json).unwrap().restore().unwrap();
    resumed.run_to(cfg.steps).unwrap();
    let resume_exact = (metrics_csv(&resumed.eval_log), metrics_csv(&resumed.train_log)) == a;
    outcome(
        9,
        "determinism",
        identical && resume_exact,
        format!(
            "two {}-step runs byte-identical: {identical}; resume at step 20 byte-identical: {resume_exact}",
            cfg.steps
        ),
    )
}

struct RunSummary {
    trainer: Trainer,
    elapsed: Duration,
}

fn default_run(k: usize, seed: u64) -> RunSummary {
    let cfg = TrainConfig {
        k,
        seed,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.run_to(cfg.steps).unwrap();
    let elapsed = t.elapsed();
    eprintln!(
        "  K={k} seed={seed}: held-out acc {:.4} in {:.0} s",
        trainer.eval_log.last().unwrap().acc,
        elapsed.as_secs_f64()
    );
    RunSummary { trainer, elapsed }
}

fn label_marginal(scenes: &[Scene], classes: usize) -> f64 {
    let mut conf = Confusion::new(classes);
    for s in scenes {
        conf.add(&s.labels, &s.labels);
    }
    conf.majority_fraction()
}

fn training_smoke(run: &RunSummary) -> Outcome {
    let t = &run.trainer;
    let first = &t.eval_log[0];
    let last = t.eval_log.last().unwrap();
    let marginal = label_marginal(&t.heldout, t.config().classes);
    let margin = last.acc - marginal;
    let pass = run.elapsed < Duration::from_secs(600) && last.loss_total < first.loss_total && margin >= 0.10;
    outcome(
        5,
        "training smoke",
        pass,
        format!(
            "{} steps in {:.0} s (limit 600 s); held-out total loss {:.4} -> {:.4}; acc {:.4} vs label marginal {:.4} (margin {:+.1} points, need +10)",
            t.state.step,
            run.elapsed.as_secs_f64(),
            first.loss_total,
            last.loss_total,
            last.acc,
            marginal,
            100.0 * margin
        ),
    )
}

fn uncertainty_vs_classes(run: &RunSummary) -> Outcome {
    let t = &run.trainer;
    let cfg = t.config();
    let scenes = heldout_scenes(cfg).unwrap();
    let report = analyze_uncertainty(&t.model, &t.state.params, cfg, &scenes).unwrap();
    let (rho, p) = (report.spearman_rho, report.p_value);
    let pass = matches!((rho, p), (Some(r), Some(p)) if r > 0.0 && p < 0.05);
    outcome(
        7,
        "uncertainty vs classes per scene",
        pass,
        format!(
            "{} scenes, spearman rho {}, permutation p {} (need rho > 0, p < 0.05)",
            scenes.len(),
            rho.map_or("undefined".into(), |r| format!("{r:.4}")),
            p.map_or("undefined".into(), |p| format!("{p:.2e}"))
        ),
    )
}

fn uncertainty_trend(run: &RunSummary) -> Outcome {
    let log = &run.trainer.train_log;
    let tenth = (log.len() / 10).max(1);
    let mean = |rows: &[probprompt::Metrics]| rows.iter().map(|m| m.uncertainty).sum::<f64>() / rows.len() as f64;
    let early = mean(&log[..tenth]);
    let late = mean(&log[log.len() - tenth..]);
    outcome(
        8,
        "uncertainty decreases during training",
        late < early,
        format!("mean log uncertainty^2 first 10% {early:.4}, final 10% {late:.4}"),
    )
}

fn k_ablation(k3: &[f64], k1: &[f64]) -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m3, m1) = (mean(k3), mean(k1));
    let wins = k3.iter().zip(k1).filter(|(a, b)| a >= b).count();
    let pass = m3 >= m1 || wins * 2 > k3.len();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");
    outcome(
        6,
        "K ablation direction",
        pass,
        format!(
            "mean held-out acc K=3 {m3:.4} vs K=1 {m1:.4}; K=3 >= K=1 on {wins}/{} seeds; K=3 [{}] K=1 [{}]",
            k3.len(),
            fmt(k3),
            fmt(k1)
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results = vec![gradient_suite(), moment_oracle(), kl_oracle(), path_equivalence(), determinism()];

    let seeds: Vec<u64> = (0..5).collect();
    let main_run = default_run(3, seeds[0]);
    results.push(training_smoke(&main_run));
    results.push(uncertainty_vs_classes(&main_run));
    results.push(uncertainty_trend(&main_run));
    results.push(normalization(&main_run.trainer));

    let final_acc = |r: &RunSummary| r.trainer.eval_log.last().unwrap().acc;
    let mut k3 = vec![final_acc(&main_run)];
    drop(main_run);
    for &s in &seeds[1..] {
        k3.push(final_acc(&default_run(3, s)));
    }
    let k1: Vec<f64> = seeds.iter().map(|&s| final_acc(&default_run(1, s))).collect();
    results.push(k_ablation(&k3, &k1));

    results.sort_by_key(|r| r.id);
    println!();
    for r in &results {
        println!(
            "criterion {:>2} {} {}: {}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.title,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
