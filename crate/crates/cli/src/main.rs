//! `vaeloc`: train VAE anomaly localizers and score, project, stack and
//! evaluate pixel-wise anomaly maps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Failures print a
//! single line `error[<category>]: <message>` to stderr.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};
use vaeloc::data::{
    apply_stats, denormalize, fit_stats, generate_synthetic_normal, inject_dataset, load_image_dir, write_dataset_dir,
    AnomalySpec, AugmentConfig, DatasetManifest, LoadedDataset, Normalization, SyntheticConfig,
};
use vaeloc::ensemble::{fit_and_evaluate, predict_map, LogisticConfig, SplitSpec, DEFAULT_FEATURES};
use vaeloc::grid::{read_grid, write_grid, write_heatmap};
use vaeloc::metrics::{compute_maps, evaluate_dataset, EvalRequest, ProjectionSweep};
use vaeloc::optim::AdamConfig;
use vaeloc::predictors::{AnomalyMap, MapKind, PredictorConfig, PredictorKind};
use vaeloc::projection::{maps_from_traces, project_batch, ProjectionConfig};
use vaeloc::trainer::{train, Checkpoint, TrainConfig};
use vaeloc::{ImageBatch, ModelConfig, Vae};

use settings::{Selection, Settings};

/// Invalid invocation or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "vaeloc", version, about = "Pixel-wise anomaly localization with VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a directory of normal images.
    Train(CommonArgs),
    /// Generate a synthetic dataset (optionally with injected anomalies).
    Synth(CommonArgs),
    /// Write per-image anomaly maps and heatmaps.
    Score(CommonArgs),
    /// Project images onto the normal manifold and write Proj-Rec-Error maps.
    Project(CommonArgs),
    /// Fit a logistic stack on score maps and evaluate it on held-out images.
    Ensemble(CommonArgs),
    /// Pixel-pooled AUROC of each predictor on a masked test set.
    Evaluate(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat TOML file with run settings (see config/defaults.toml).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image directory (PNG or .amap grids, masks in `masks/`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Map directory written by `score` (ensemble input).
    #[arg(long)]
    maps: Option<PathBuf>,
    /// Comma-separated predictor names.
    #[arg(long, value_delimiter = ',')]
    predictors: Option<Vec<String>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// One value, or a comma-separated sweep.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    labeled_fraction: Option<f64>,
    /// Threads for image-level parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    n_images: Option<usize>,
    /// Inject anomalies into synthetic images.
    #[arg(long)]
    anomalies: bool,
}

impl CommonArgs {
    fn settings(&self) -> anyhow::Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { s.$field = v.clone(); })*
            };
        }
        apply!(seed, predictors, beta, latent_dim, lambda, alpha, iters, labeled_fraction, workers, epochs, batch_size, learning_rate, n_images);
        if self.anomalies {
            s.anomalies = true;
        }
        if s.workers == 0 {
            return Err(UsageError("workers must be at least 1".into()).into());
        }
        Ok(s)
    }

    fn data_dir(&self) -> anyhow::Result<&Path> {
        self.data.as_deref().ok_or_else(|| UsageError("--data is required".into()).into())
    }

    fn checkpoint_path(&self) -> anyhow::Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| UsageError("--checkpoint is required".into()).into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = classify(&e);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{category}]: {message}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return (2, "usage");
        }
        if let Some(err) = cause.downcast_ref::<vaeloc::Error>() {
            return match err {
                vaeloc::Error::Config(_) => (2, "config"),
                other => (1, other.category()),
            };
        }
    }
    (1, "runtime")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Synth(a) => ("synth", a),
        Command::Score(a) => ("score", a),
        Command::Project(a) => ("project", a),
        Command::Ensemble(a) => ("ensemble", a),
        Command::Evaluate(a) => ("evaluate", a),
    };
    let settings = args.settings()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build_global()
        .context("starting worker pool")?;
    settings.write_resolved(&args.out, name)?;
    match cli.command {
        Command::Train(_) => cmd_train(args, &settings),
        Command::Synth(_) => cmd_synth(args, &settings),
        Command::Score(_) => cmd_score(args, &settings),
        Command::Project(_) => cmd_project(args, &settings),
        Command::Ensemble(_) => cmd_ensemble(args, &settings),
        Command::Evaluate(_) => cmd_evaluate(args, &settings),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    let data = load_image_dir(args.data_dir()?, s.image_size, Normalization::Fit)?;
    if data.masks.is_some() {
        log::warn!("training directory has a masks/ subdirectory; the model should see normal images only");
    }
    let model_cfg = ModelConfig {
        image_size: s.image_size,
        ..ModelConfig::default().with_latent_dim(s.latent_dim)
    };
    let cfg = TrainConfig {
        epochs: s.epochs,
        adam: AdamConfig::default().with_learning_rate(s.learning_rate),
        batch_size: s.batch_size,
        beta: s.beta,
        seed: s.seed,
        checkpoint_every: s.checkpoint_every,
        augment: AugmentConfig {
            noise_std: s.noise_std,
            rotation_degrees_max: s.rotation_degrees_max,
            intensity_jitter: s.intensity_jitter,
            seed: s.seed.wrapping_add(2),
        },
    };
    log::info!("training on {} images for {} epochs", data.batch.len(), cfg.epochs);
    let outcome = train(&model_cfg, &data.batch, &cfg, Some(&args.out))?;
    if let Some(last) = outcome.history.last() {
        log::info!(
            "final epoch: rec_nll {:.3}, kl {:.3}, total {:.3}",
            last.rec_nll,
            last.kl,
            last.total
        );
    }
    Ok(())
}

fn cmd_synth(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        n_images: s.n_images,
        image_size: s.image_size,
        texture: s.texture,
        seed: s.seed,
        ..SyntheticConfig::default()
    };
    let raw = generate_synthetic_normal(&cfg)?;
    let mut manifest = DatasetManifest {
        synthetic: Some(cfg),
        ..DatasetManifest::default()
    };
    manifest.seeds.insert("synthetic".into(), s.seed);
    let (images, masks) = if s.anomalies {
        // Shifts are specified in dataset stds, so inject in normalized units.
        let stats = fit_stats(raw.view())?;
        let spec = AnomalySpec {
            shape: s.anomaly_shape,
            radius_range: s.anomaly_radius,
            intensity_shift_range: s.anomaly_shift,
            polarity: s.anomaly_polarity,
            per_image_count: s.anomaly_count,
            seed: s.seed.wrapping_add(1),
        };
        let normalized = apply_stats(raw.view(), stats)?;
        let (injected, masks) = inject_dataset(normalized.data.view(), &spec)?;
        manifest.seeds.insert("anomalies".into(), spec.seed);
        manifest.anomalies = Some(spec);
        manifest.stats = Some(stats);
        let batch = ImageBatch::new(injected, stats)?;
        (denormalize(&batch), Some(masks))
    } else {
        (raw, None)
    };
    let manifest = write_dataset_dir(&args.out, images.view(), masks.as_ref().map(|m| m.view()), manifest)?;
    log::info!("wrote {} images to {}", manifest.files.len(), args.out.display());
    Ok(())
}

struct Loaded {
    model: Vae<f32>,
    data: LoadedDataset,
}

fn load_model_and_data(args: &CommonArgs) -> anyhow::Result<Loaded> {
    let ckpt = Checkpoint::<f32>::load(args.checkpoint_path()?)?;
    let size = ckpt.model.config().image_size;
    let data = load_image_dir(args.data_dir()?, size, Normalization::Reuse(ckpt.normalization_stats))?;
    Ok(Loaded { model: ckpt.model, data })
}

fn write_maps(out: &Path, names: &[String], maps: &[AnomalyMap]) -> anyhow::Result<()> {
    let Some(first) = maps.first() else {
        return Ok(());
    };
    let kind = first.kind.to_string();
    let grid_dir = out.join("maps").join(&kind);
    let png_dir = out.join("heatmaps").join(&kind);
    fs::create_dir_all(&grid_dir).with_context(|| format!("creating {}", grid_dir.display()))?;
    fs::create_dir_all(&png_dir).with_context(|| format!("creating {}", png_dir.display()))?;
    for (name, map) in names.iter().zip(maps) {
        write_grid(&grid_dir.join(format!("{name}.amap")), map.scores.view())?;
        write_heatmap(&png_dir.join(format!("{name}.png")), map.scores.view())?;
    }
    Ok(())
}

/// Index written beside score maps so `ensemble` can reload them.
#[derive(Debug, Serialize, Deserialize)]
struct MapIndex {
    model_fingerprint: String,
    predictors: Vec<String>,
    images: Vec<String>,
}

const MAP_INDEX_FILE: &str = "maps.json";

fn predictor_config(s: &Settings) -> PredictorConfig {
    PredictorConfig {
        abs_rec_grad: s.abs_rec_grad,
        sample_gradients: s.sample_gradients,
        seed: s.seed,
    }
}

fn cmd_score(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    let kinds = s.predictor_kinds(false)?;
    let Loaded { model, data } = load_model_and_data(args)?;
    let maps = compute_maps(&model, data.batch.view(), &kinds, &predictor_config(s), s.eval_batch_size)?;
    for m in &maps {
        write_maps(&args.out, &data.names, m)?;
    }
    let index = MapIndex {
        model_fingerprint: maps[0][0].model_fingerprint.clone(),
        predictors: kinds.iter().map(|k| k.to_string()).collect(),
        images: data.names.clone(),
    };
    write_json(&args.out.join("maps").join(MAP_INDEX_FILE), &index)?;
    log::info!("scored {} images with {} predictor(s)", data.names.len(), kinds.len());
    Ok(())
}

fn projection_config(s: &Settings, lambda: f64) -> ProjectionConfig {
    ProjectionConfig {
        alpha: s.alpha,
        lambda,
        max_iters: s.iters,
        early_stop_patience: s.early_stop_patience,
        seed: s.seed,
        record_iterates: false,
        map: s.projection_map,
    }
}

fn lambda_dir(out: &Path, lambda: f64) -> PathBuf {
    out.join(format!("lambda_{lambda}"))
}

fn cmd_project(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    if s.lambda.is_empty() {
        return Err(UsageError("--lambda needs at least one value".into()).into());
    }
    let Loaded { model, data } = load_model_and_data(args)?;
    let images = data.batch.view();
    let n = data.batch.len();
    for &lambda in &s.lambda {
        let cfg = projection_config(s, lambda);
        cfg.validate()?;
        let dir = lambda_dir(&args.out, lambda);
        let proj_dir = dir.join("projected");
        let trace_dir = dir.join("traces");
        fs::create_dir_all(&proj_dir).with_context(|| format!("creating {}", proj_dir.display()))?;
        fs::create_dir_all(&trace_dir).with_context(|| format!("creating {}", trace_dir.display()))?;
        let chunk = s.eval_batch_size.max(1);
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let results: Vec<_> = {
            use rayon::prelude::*;
            starts
                .par_iter()
                .map(|&a| {
                    let x = images.slice(s![a..(a + chunk).min(n), .., .., ..]);
                    let traces = project_batch(&model, x, &cfg)?;
                    let maps = maps_from_traces(&model, x, &traces, cfg.map)?;
                    Ok::<_, vaeloc::Error>((traces, maps))
                })
                .collect::<Result<_, _>>()?
        };
        let mut maps = Vec::with_capacity(n);
        let mut diverged = 0;
        let mut i = 0;
        for (traces, chunk_maps) in results {
            for tr in traces {
                let name = &data.names[i];
                write_grid(&proj_dir.join(format!("{name}.amap")), tr.best_iterate.view())?;
                let path = trace_dir.join(format!("{name}.csv"));
                fs::write(&path, tr.to_csv()).with_context(|| format!("writing {}", path.display()))?;
                diverged += usize::from(tr.diverged);
                i += 1;
            }
            maps.extend(chunk_maps);
        }
        if diverged > 0 {
            log::warn!("lambda {lambda}: {diverged} projection(s) hit a non-finite energy; best iterates kept");
        }
        write_maps(&dir, &data.names, &maps)?;
        log::info!("lambda {lambda}: projected {n} images into {}", dir.display());
    }
    Ok(())
}

fn cmd_ensemble(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    let maps_dir = args
        .maps
        .as_deref()
        .ok_or_else(|| UsageError("--maps is required (the maps/ directory written by `score`)".into()))?;
    let index: MapIndex = serde_json::from_str(
        &fs::read_to_string(maps_dir.join(MAP_INDEX_FILE))
            .with_context(|| format!("reading {}", maps_dir.join(MAP_INDEX_FILE).display()))?,
    )
    .context("parsing map index")?;
    let data_dir = args.data_dir()?;
    let masks_ds = load_image_dir(data_dir, probe_size(maps_dir, &index)?, Normalization::Fit)?;
    let masks = masks_ds
        .masks
        .ok_or_else(|| vaeloc::Error::Data(format!("{} has no masks/ subdirectory", data_dir.display())))?;
    if masks_ds.names != index.images {
        bail!(vaeloc::Error::Data("image names in --data do not match the score maps".into()));
    }

    let kinds: Vec<PredictorKind> = index
        .predictors
        .iter()
        .map(|p| p.parse::<PredictorKind>())
        .collect::<Result<_, _>>()?;
    for f in DEFAULT_FEATURES {
        if !kinds.contains(&f) {
            bail!(vaeloc::Error::Data(format!("score maps lack the `{f}` feature")));
        }
    }
    let mut per_image = Vec::with_capacity(index.images.len());
    for name in &index.images {
        let mut maps = Vec::with_capacity(kinds.len());
        for k in &kinds {
            let grid = read_grid(&maps_dir.join(k.to_string()).join(format!("{name}.amap")))?;
            maps.push(AnomalyMap {
                scores: grid.mapv(f64::from),
                kind: MapKind::Predictor(*k),
                model_fingerprint: index.model_fingerprint.clone(),
            });
        }
        per_image.push(maps);
    }
    let split = SplitSpec {
        labeled_fraction: s.labeled_fraction,
        seed: s.seed,
        stratify_by_image: true,
    };
    let cfg = LogisticConfig {
        l2: s.l2,
        max_iters: s.fit_max_iters,
        tolerance: 1e-6,
        standardize: s.standardize,
    };
    let report = fit_and_evaluate(&per_image, &masks, &DEFAULT_FEATURES, &split, &cfg)?;
    report.weights.save(&args.out.join("weights.json"))?;
    write_json(&args.out.join("ensemble_report.json"), &report)?;
    let ens: Vec<AnomalyMap> = per_image
        .iter()
        .map(|maps| predict_map(&report.weights, maps))
        .collect::<Result<_, _>>()?;
    write_maps(&args.out, &index.images, &ens)?;
    let auc = report.heldout_auroc.get("ensemble").copied().unwrap_or(f64::NAN);
    log::info!("held-out ensemble AUROC {auc:.4}; weights {:?}, bias {:.4}", report.weights.weights, report.weights.bias);
    Ok(())
}

/// Side length of the stored maps.
fn probe_size(maps_dir: &Path, index: &MapIndex) -> anyhow::Result<usize> {
    let (Some(p), Some(name)) = (index.predictors.first(), index.images.first()) else {
        bail!(vaeloc::Error::Data("map index is empty".into()));
    };
    Ok(read_grid(&maps_dir.join(p).join(format!("{name}.amap")))?.nrows())
}

fn cmd_evaluate(args: &CommonArgs, s: &Settings) -> anyhow::Result<()> {
    let selections = s.selections(true)?;
    let Loaded { model, data } = load_model_and_data(args)?;
    let projection = selections.contains(&Selection::ProjRecError).then(|| ProjectionSweep {
        base: projection_config(s, 1.0),
        lambdas: s.lambda.clone(),
    });
    if projection.as_ref().is_some_and(|p| p.lambdas.is_empty()) {
        return Err(UsageError("--lambda needs at least one value".into()).into());
    }
    let request = EvalRequest {
        predictors: s.predictor_kinds(true)?,
        predictor_cfg: predictor_config(s),
        projection,
        batch_size: s.eval_batch_size.max(1),
        seed: s.seed,
    };
    let masks: Option<&Array4<u8>> = data.masks.as_ref();
    let report = evaluate_dataset(&model, &data.batch, masks, &request)?;
    write_json(&args.out.join("report.json"), &report)?;
    let md = report.to_markdown();
    fs::write(args.out.join("report.md"), &md).context("writing report.md")?;
    print!("{md}");
    Ok(())
}
