//! Acceptance suite: criteria 1–8 are property checks on small models,
//! 9–12 run the synthetic end-to-end benchmark (three 30-epoch trainings on
//! 2,000 images, roughly 15 minutes on one CPU core).
//!
//! Every criterion prints one `PASS`/`FAIL` line; the test fails if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vaeloc::data::{
    apply_stats, augment, fit_stats, generate_synthetic_normal, inject_dataset, normalize_dataset, AnomalySpec,
    AugmentConfig, SyntheticConfig,
};
use vaeloc::ensemble::{fit_and_evaluate, LogisticConfig, SplitSpec, DEFAULT_FEATURES};
use vaeloc::losses::{beta_elbo_loss, kl_divergence, kl_per_sample, vae_loss, LossTerm};
use vaeloc::metrics::{auroc_bruteforce_oracle, compute_maps, evaluate_dataset, pixel_auroc, EvalRequest, ProjectionSweep};
use vaeloc::optim::AdamConfig;
use vaeloc::predictors::{AnomalyMap, MapKind, PredictorConfig, PredictorKind, Scorer};
use vaeloc::projection::{project_batch, ProjectionConfig};
use vaeloc::trainer::{train, Checkpoint, TrainConfig};
use vaeloc::{ImageBatch, LatentMode, ModelConfig, Vae};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        latent_dim: 4,
        encoder_channels: vec![3, 5],
        ..ModelConfig::default()
    }
}

fn random_images(b: usize, size: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((b, 1, size, size), || rng.random_range(-1.5..1.5))
}

// 1. KL closed form vs Monte Carlo.
fn kl_monte_carlo() -> Outcome {
    const DRAWS: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut tested = 0;
    while tested < 20 {
        let l = 4;
        let mu: Vec<f64> = (0..l).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..0.7)).collect();
        let (closed, _) = kl_divergence(ndarray::aview1(&mu), ndarray::aview1(&ls)).unwrap();
        if closed <= 0.1 {
            continue;
        }
        tested += 1;
        // E_q[log q(z) − log p(z)] with z = mu + σ·ε.
        let mut sum = 0.0;
        for _ in 0..DRAWS {
            let mut log_ratio = 0.0;
            for j in 0..l {
                let eps: f64 = rng.sample(StandardNormal);
                let z = mu[j] + ls[j].exp() * eps;
                log_ratio += -ls[j] - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += log_ratio;
        }
        let mc = sum / DRAWS as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    check(worst < 0.01, format!("20 latents, max relative error {:.3}%", 100.0 * worst))
}

fn scalar_loss(model: &Vae<f64>, term: LossTerm, x: &Array4<f64>) -> f64 {
    let out = model.forward(x.view(), LatentMode::Mean).unwrap();
    let rec = 0.5 * x.iter().zip(out.reconstruction.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let kl: f64 = kl_per_sample(&out.latent).unwrap().sum();
    match term {
        LossTerm::Rec => rec,
        LossTerm::Kl => kl,
        LossTerm::Elbo => rec + kl,
    }
}

// 2. Input gradient vs central finite differences.
fn gradient_finite_differences() -> Outcome {
    let model = Vae::<f64>::new(tiny_config(), 202).unwrap();
    let x = random_images(1, 8, 203);
    let h = 1e-6;
    let mut failures = 0;
    let mut worst = 0.0f64;
    for term in [LossTerm::Elbo, LossTerm::Kl, LossTerm::Rec] {
        let grad = model.input_gradient(term, x.view(), LatentMode::Mean).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut xp = x.clone();
                xp[[0, 0, i, j]] += h;
                let mut xm = x.clone();
                xm[[0, 0, i, j]] -= h;
                let fd = (scalar_loss(&model, term, &xp) - scalar_loss(&model, term, &xm)) / (2.0 * h);
                let g = grad[[0, 0, i, j]];
                let abs = (g - fd).abs();
                let rel = abs / g.abs().max(fd.abs());
                if !(rel <= 1e-3 || abs <= 1e-8) {
                    failures += 1;
                }
                if abs > 1e-8 {
                    worst = worst.max(rel);
                }
            }
        }
    }
    check(
        failures == 0,
        format!("3 terms x 64 pixels, {failures} outside tolerance, max relative error {worst:.2e}"),
    )
}

// 3. elbo-grad = kl-grad + rec-grad.
fn gradient_additivity() -> Outcome {
    let mut worst = 0.0f64;
    let cases: [(ModelConfig, usize, u64); 2] = [(tiny_config(), 8, 301), (ModelConfig::default().with_latent_dim(32), 64, 302)];
    for (cfg, size, seed) in cases {
        let model = Vae::<f64>::new(cfg, seed).unwrap();
        let x = random_images(2, size, seed + 10);
        let g = |t| model.input_gradient(t, x.view(), LatentMode::Mean).unwrap();
        let (e, k, r) = (g(LossTerm::Elbo), g(LossTerm::Kl), g(LossTerm::Rec));
        for ((e, k), r) in e.iter().zip(k.iter()).zip(r.iter()) {
            let err = (e - (k + r)).abs();
            if err > 1e-300 {
                worst = worst.max(err / e.abs().max(1e-12));
            }
        }
    }
    check(worst <= 1e-5, format!("8x8 and 64x64 models, max relative deviation {worst:.2e}"))
}

// 4. β = 1 total equals the VAE loss; total is affine in β.
fn beta_loss_identities() -> Outcome {
    let model = Vae::<f64>::new(tiny_config(), 401).unwrap();
    let x = random_images(3, 8, 402);
    let out = model.forward(x.view(), LatentMode::Mean).unwrap();
    let one = beta_elbo_loss(x.view(), &out, 1.0).unwrap();
    let bitwise = one.total.to_bits() == vae_loss(x.view(), &out).unwrap().to_bits();
    let betas = [0.1, 0.5, 1.0, 2.0, 10.0];
    let totals: Vec<f64> = betas.iter().map(|&b| beta_elbo_loss(x.view(), &out, b).unwrap().total).collect();
    let slope = (totals[4] - totals[0]) / (betas[4] - betas[0]);
    let mut worst = 0.0f64;
    for (b, t) in betas.iter().zip(&totals) {
        let line = totals[0] + slope * (b - betas[0]);
        worst = worst.max((t - line).abs() / t.abs());
    }
    check(
        bitwise && worst < 1e-12 && (slope - one.kl).abs() <= 1e-12 * one.kl,
        format!("bit-identical at beta=1: {bitwise}, max deviation from line {worst:.1e}, slope = kl"),
    )
}

// 5. Rank AUROC vs pairwise oracle.
fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=2000);
        let levels = rng.random_range(2..50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.1).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let fast = pixel_auroc(&scores, &labels).unwrap();
        let slow = auroc_bruteforce_oracle(&scores, &labels).unwrap();
        worst = worst.max((fast - slow).abs());
    }
    let example = pixel_auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    check(
        worst <= 1e-12 && example == 0.75,
        format!("200 tied instances, max |rank - oracle| {worst:.1e}; worked example = {example}"),
    )
}

fn toy_trained_model() -> Vae<f64> {
    let raw = generate_synthetic_normal(&SyntheticConfig {
        n_images: 128,
        image_size: 8,
        seed: 601,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let data = normalize_dataset(raw.view()).unwrap();
    let batch = ImageBatch::new(data.data.mapv(f64::from), data.stats).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        adam: AdamConfig::default().with_learning_rate(1e-3),
        seed: 602,
        ..TrainConfig::default()
    };
    train(&tiny_config(), &batch, &cfg, None).unwrap().model
}

// 6. Projection invariants.
fn projection_properties() -> Outcome {
    let model = toy_trained_model();
    let x0 = random_images(8, 8, 603);
    let zero = project_batch(&model, x0.view(), &ProjectionConfig { max_iters: 0, ..Default::default() }).unwrap();
    let identity = zero.iter().enumerate().all(|(i, t)| t.best_iterate == x0.slice(s![i, 0, .., ..]));

    let mut monotone = true;
    for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
        for alpha in [0.03, 0.3] {
            let cfg = ProjectionConfig { lambda, alpha, ..Default::default() };
            monotone &= project_batch(&model, x0.view(), &cfg).unwrap().iter().all(|t| t.best_energy <= t.energies[0]);
        }
    }

    let cfg = ProjectionConfig { lambda: 1e6, max_iters: 50, early_stop_patience: 50, ..Default::default() };
    let pinned = project_batch(&model, x0.view(), &cfg).unwrap();
    let mut displacement = 0.0f64;
    for (i, t) in pinned.iter().enumerate() {
        let d = (&t.best_iterate - &x0.slice(s![i, 0, .., ..])).mapv(f64::abs);
        displacement = displacement.max(d.iter().cloned().fold(0.0, f64::max));
    }
    check(
        identity && monotone && displacement < 1e-3,
        format!("N=0 identity: {identity}; best <= initial: {monotone}; lambda=1e6 L_inf displacement {displacement:.1e}"),
    )
}

// 7. Combi = kl-grad ⊙ rec-error; magnitude maps nonnegative.
fn combi_and_signs() -> Outcome {
    let model = Vae::<f64>::new(tiny_config(), 701).unwrap();
    let x = random_images(4, 8, 702);
    let scorer = Scorer::new(&model, PredictorConfig::default());
    let maps = scorer.score_many(x.view(), &PredictorKind::ALL).unwrap();
    let get = |k: PredictorKind| &maps[PredictorKind::ALL.iter().position(|&p| p == k).unwrap()];
    let mut exact = true;
    for i in 0..4 {
        exact &= get(PredictorKind::Combi)[i].scores == &get(PredictorKind::KlGrad)[i].scores * &get(PredictorKind::RecError)[i].scores;
        let single = scorer.combi_map(x.slice(s![i..i + 1, .., .., ..])).unwrap();
        let kl = scorer.score(x.slice(s![i..i + 1, .., .., ..]), PredictorKind::KlGrad).unwrap();
        let rec = scorer.rec_error_map(x.slice(s![i..i + 1, .., .., ..])).unwrap();
        exact &= single[0].scores == &kl[0].scores * &rec[0].scores;
    }
    let nonneg = maps.iter().flatten().all(|m| m.scores.iter().all(|&v| v >= 0.0));
    check(exact && nonneg, format!("exact product: {exact}; all five maps nonnegative: {nonneg}"))
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn f64_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

/// Runs every seeded stage once and returns the serialized outputs.
fn pipeline_outputs() -> Vec<(&'static str, Vec<u8>)> {
    let mut out = Vec::new();
    let raw = generate_synthetic_normal(&SyntheticConfig {
        n_images: 24,
        image_size: 16,
        seed: 801,
        ..SyntheticConfig::default()
    })
    .unwrap();
    out.push(("synthetic", f32_bytes(raw.iter())));
    let data = normalize_dataset(raw.view()).unwrap();
    let (injected, masks) = inject_dataset(data.data.view(), &AnomalySpec { seed: 802, radius_range: [2.0, 4.0], ..Default::default() }).unwrap();
    out.push(("anomalies", [f32_bytes(injected.iter()), masks.iter().copied().collect()].concat()));
    let aug_cfg = AugmentConfig { noise_std: 0.1, rotation_degrees_max: 10.0, intensity_jitter: 0.1, seed: 803 };
    let mut rng = ChaCha8Rng::seed_from_u64(aug_cfg.seed);
    let augmented = augment(data.data.slice(s![0, 0, .., ..]), &aug_cfg, &mut rng).unwrap();
    out.push(("augment", f32_bytes(augmented.iter())));

    let model_cfg = ModelConfig { image_size: 16, latent_dim: 4, encoder_channels: vec![4, 8], ..ModelConfig::default() };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 804,
        augment: aug_cfg,
        ..TrainConfig::default()
    };
    let trained = train(&model_cfg, &data, &cfg, None).unwrap();
    let ckpt = Checkpoint {
        model: trained.model.clone(),
        normalization_stats: data.stats,
        train_fingerprint: trained.train_fingerprint.clone(),
        train_config: serde_json::to_value(&cfg).unwrap(),
    };
    out.push(("checkpoint", ckpt.to_bytes().unwrap()));
    let model = trained.model;

    let test = ImageBatch::new(injected, data.stats).unwrap();
    let sampled = PredictorConfig { sample_gradients: true, seed: 805, ..Default::default() };
    for (name, pcfg) in [("maps", PredictorConfig::default()), ("sampled maps", sampled)] {
        let maps = compute_maps(&model, test.view(), &PredictorKind::ALL, &pcfg, 8).unwrap();
        out.push((name, f64_bytes(maps.iter().flatten().flat_map(|m| m.scores.iter()))));
    }
    let traces = project_batch(&model, test.view(), &ProjectionConfig { max_iters: 10, ..Default::default() }).unwrap();
    out.push(("projection", f32_bytes(traces.iter().flat_map(|t| t.best_iterate.iter()))));

    let maps = compute_maps(&model, test.view(), &PredictorKind::ALL, &PredictorConfig::default(), 8).unwrap();
    let per_image = per_image_maps(&maps);
    let split = SplitSpec { labeled_fraction: 0.25, seed: 806, stratify_by_image: true };
    let ens = fit_and_evaluate(&per_image, &masks, &DEFAULT_FEATURES, &split, &LogisticConfig::default()).unwrap();
    out.push(("ensemble", serde_json::to_vec(&ens).unwrap()));

    let request = EvalRequest {
        projection: Some(ProjectionSweep {
            base: ProjectionConfig { max_iters: 5, ..Default::default() },
            lambdas: vec![0.1, 1.0],
        }),
        seed: 807,
        ..EvalRequest::default()
    };
    let report = evaluate_dataset(&model, &test, Some(&masks), &request).unwrap();
    out.push(("report", serde_json::to_vec(&report).unwrap()));
    out
}

// 8. Byte-identical reruns.
fn determinism() -> Outcome {
    let a = pipeline_outputs();
    let b = pipeline_outputs();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let stages: Vec<&str> = a.iter().map(|x| x.0).collect();
    check(
        differing.is_empty(),
        format!("stages {stages:?}; differing: {differing:?}"),
    )
}

fn per_image_maps(maps: &[Vec<AnomalyMap>]) -> Vec<Vec<AnomalyMap>> {
    (0..maps[0].len()).map(|i| maps.iter().map(|m| m[i].clone()).collect()).collect()
}

/// Synthetic end-to-end benchmark shared by criteria 9–12.
struct Benchmark {
    train: ImageBatch<f32>,
    test: ImageBatch<f32>,
    masks: Array4<u8>,
    report: Option<vaeloc::metrics::EvalReport>,
    maps: Option<Vec<Vec<AnomalyMap>>>,
    final_kl: Vec<(f64, f64)>,
}

const BENCH_TRAIN_IMAGES: usize = 2000;
const BENCH_TEST_IMAGES: usize = 200;
const BENCH_EPOCHS: usize = 30;
const BENCH_LATENT: usize = 32;

fn bench_train_config(beta: f64) -> TrainConfig {
    TrainConfig {
        epochs: BENCH_EPOCHS,
        batch_size: 32,
        adam: AdamConfig::default().with_learning_rate(1e-3),
        beta,
        seed: 7,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn bench_model_config() -> ModelConfig {
    ModelConfig::default().with_latent_dim(BENCH_LATENT)
}

fn benchmark_data() -> Benchmark {
    let raw = generate_synthetic_normal(&SyntheticConfig { n_images: BENCH_TRAIN_IMAGES, seed: 1, ..Default::default() }).unwrap();
    let stats = fit_stats(raw.view()).unwrap();
    let train = apply_stats(raw.view(), stats).unwrap();
    let test_raw = generate_synthetic_normal(&SyntheticConfig { n_images: BENCH_TEST_IMAGES, seed: 2, ..Default::default() }).unwrap();
    let test_clean = apply_stats(test_raw.view(), stats).unwrap();
    // Normalized units: shifts of 2–3 are 2–3 dataset standard deviations.
    let spec = AnomalySpec { seed: 3, ..Default::default() };
    let (injected, masks) = inject_dataset(test_clean.data.view(), &spec).unwrap();
    Benchmark {
        train,
        test: ImageBatch::new(injected, stats).unwrap(),
        masks,
        report: None,
        maps: None,
        final_kl: Vec::new(),
    }
}

fn run_benchmark(bench: &mut Benchmark) {
    for beta in [0.1, 1.0, 10.0] {
        let start = Instant::now();
        let outcome = train(&bench_model_config(), &bench.train, &bench_train_config(beta), None).unwrap();
        let last = *outcome.history.last().unwrap();
        println!(
            "  trained beta={beta}: rec_nll {:.2}, kl {:.2} ({:.0?})",
            last.rec_nll,
            last.kl,
            start.elapsed()
        );
        bench.final_kl.push((beta, last.kl));
        if beta == 1.0 {
            let start = Instant::now();
            let request = EvalRequest {
                projection: Some(ProjectionSweep::default()),
                seed: 9,
                ..EvalRequest::default()
            };
            let report = evaluate_dataset(&outcome.model, &bench.test, Some(&bench.masks), &request).unwrap();
            print!("{}", report.to_markdown());
            println!("  evaluated in {:.0?}", start.elapsed());
            let maps = compute_maps(&outcome.model, bench.test.view(), &PredictorKind::ALL, &PredictorConfig::default(), 32).unwrap();
            bench.maps = Some(per_image_maps(&maps));
            bench.report = Some(report);
        }
    }
}

// 9. Pooled AUROC floors.
fn predictor_floors(bench: &Benchmark) -> Outcome {
    let report = bench.report.as_ref().ok_or("benchmark did not run")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, floor) in [
        (PredictorKind::RecError, 0.70),
        (PredictorKind::ElboGrad, 0.70),
        (PredictorKind::KlGrad, 0.70),
        (PredictorKind::RecGrad, 0.70),
        (PredictorKind::Combi, 0.60),
    ] {
        let auc = report.auroc(MapKind::Predictor(kind)).ok_or("missing predictor")?;
        ok &= auc > floor;
        parts.push(format!("{kind} {auc:.3} (>{floor})"));
    }
    check(ok, parts.join(", "))
}

// 10. Projection does not lose to plain reconstruction error.
fn projection_trend(bench: &Benchmark) -> Outcome {
    let report = bench.report.as_ref().ok_or("benchmark did not run")?;
    let rec = report.auroc(MapKind::Predictor(PredictorKind::RecError)).ok_or("missing rec_error")?;
    let proj = report.auroc(MapKind::ProjRecError).ok_or("missing proj_rec_error")?;
    check(
        proj >= rec - 0.01,
        format!(
            "proj_rec_error {proj:.4} (best lambda {:?}, sweep {:?}) vs rec_error {rec:.4} - 0.01",
            report.best_lambda, report.projection_sweep
        ),
    )
}

// 11. Ensemble close to the best single predictor on held-out images.
fn ensemble_trend(bench: &Benchmark) -> Outcome {
    let per_image = bench.maps.as_ref().ok_or("benchmark did not run")?;
    let report = fit_and_evaluate(per_image, &bench.masks, &DEFAULT_FEATURES, &SplitSpec::default(), &LogisticConfig::default())
        .map_err(|e| e.to_string())?;
    let ens = report.heldout_auroc["ensemble"];
    let (best_name, best) = report.best_single().ok_or("no single predictor")?;
    check(
        ens >= best - 0.02,
        format!(
            "ensemble {ens:.4} vs best single {best_name} {best:.4} - 0.02 on {} held-out pixels; weights {:?}",
            report.heldout_pixels, report.weights.weights
        ),
    )
}

// 12. Final KL nonincreasing in β.
fn beta_sweep(bench: &Benchmark) -> Outcome {
    let kl = &bench.final_kl;
    if kl.len() != 3 {
        return Err("benchmark did not run".into());
    }
    let monotone = kl.windows(2).all(|w| w[1].1 <= w[0].1);
    check(monotone, format!("final KL by beta: {kl:?}"))
}

fn run(results: &mut Vec<(usize, &'static str, Outcome)>, id: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id:>2} {tag} {name}: {detail} [{:.1?}]", start.elapsed());
    results.push((id, name, outcome));
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    run(&mut results, 1, "KL closed form vs Monte Carlo", kl_monte_carlo);
    run(&mut results, 2, "input gradients vs finite differences", gradient_finite_differences);
    run(&mut results, 3, "gradient additivity", gradient_additivity);
    run(&mut results, 4, "beta loss identities", beta_loss_identities);
    run(&mut results, 5, "AUROC vs brute-force oracle", auroc_oracle);
    run(&mut results, 6, "projection invariants", projection_properties);
    run(&mut results, 7, "combi product and nonnegative maps", combi_and_signs);
    run(&mut results, 8, "seeded determinism", determinism);

    let mut bench = benchmark_data();
    let start = Instant::now();
    if let Err(p) = catch_unwind(AssertUnwindSafe(|| run_benchmark(&mut bench))) {
        println!("benchmark aborted: {p:?}");
    }
    println!("benchmark finished in {:.0?}", start.elapsed());
    run(&mut results, 9, "predictor AUROC floors", || predictor_floors(&bench));
    run(&mut results, 10, "proj_rec_error vs rec_error", || projection_trend(&bench));
    run(&mut results, 11, "ensemble vs best single predictor", || ensemble_trend(&bench));
    run(&mut results, 12, "final KL monotone in beta", || beta_sweep(&bench));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("\n{} of {} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

