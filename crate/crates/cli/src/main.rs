use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mmagg_core::checkpoint::{
    load_model, model_from_table, optimizer_from_table, preprocess_set_from_table, preprocess_set_to_table, save_model, TensorTable,
};
use mmagg_core::datastore::{load_manifest, load_video, read_predictions, write_predictions, Manifest, VideoFeatures};
use mmagg_core::eval::{ensemble_average, map_eval};
use mmagg_core::introspect::{
    assignment_histogram, export_reports, modality_contribution, probability_timeline, render_reports, top_frames_for_cluster,
    ExportFormat, Report, DEFAULT_TIMELINE_STEP,
};
use mmagg_core::preprocess::{apply_manifest, fit_manifest};
use mmagg_core::sampling::predict_videos;
use mmagg_core::synthgen::{generate, SynthSpec};
use mmagg_core::trainer::{gradient_check_random, init_model, load_labeled_videos, shape_for_manifest, train, train_from};
use mmagg_core::{AggregationModel, RunConfig};

#[derive(Parser)]
#[command(name = "mmagg", version, about = "Multi-modal video classification with learnable VLAD pooling")]
struct Cli {
    /// Seed for every random choice; defaults to the config's seed (42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training; 1 is the bit-reproducible baseline.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-modality PCA/whitening on a manifest's features.
    FitPreprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Split to fit on; every non-test video by default.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transform a manifest's features with fitted preprocessing.
    ApplyPreprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        preprocess: PathBuf,
        /// Output directory for features and the new manifest.
        #[arg(long)]
        out: PathBuf,
        /// Store 8-bit codes instead of raw values.
        #[arg(long)]
        quantize: bool,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Split to train on; every non-test video by default.
        #[arg(long)]
        split: Option<String>,
        /// Continue from a checkpoint saved by `train`, including its optimizer state.
        #[arg(long, requires = "first_epoch")]
        resume: Option<PathBuf>,
        /// Index of the first epoch to run when resuming (the earlier run's epoch count).
        #[arg(long, requires = "resume")]
        first_epoch: Option<usize>,
    },
    /// Write repeated-test-averaged predictions as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Overrides the sample size stored in the checkpoint.
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute mAP of a predictions file against a manifest's labels.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Named class subset from the manifest.
        #[arg(long)]
        subset: Option<String>,
        /// Per-class AP table; defaults to `<predictions>.ap.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average several prediction files.
    Ensemble {
        #[arg(required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-pad contribution of each modality to one class.
    Ablate {
        #[command(flatten)]
        target: ModelInput,
        #[arg(long)]
        video: String,
        #[arg(long = "class")]
        class_index: usize,
        #[command(flatten)]
        export: ExportArgs,
    },
    /// Soft-assignment histogram of one modality on one video.
    Histogram {
        #[command(flatten)]
        target: ModelInput,
        #[arg(long)]
        video: String,
        #[arg(long)]
        modality: String,
        #[command(flatten)]
        export: ExportArgs,
    },
    /// Frames with the largest assignment to one cluster.
    InspectClusters {
        #[command(flatten)]
        target: ModelInput,
        #[arg(long)]
        modality: String,
        #[arg(long)]
        cluster: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        export: ExportArgs,
    },
    /// Class probability over growing prefixes of a video.
    Timeline {
        #[command(flatten)]
        target: ModelInput,
        #[arg(long)]
        video: String,
        #[arg(long = "class")]
        class_index: usize,
        #[arg(long, default_value_t = DEFAULT_TIMELINE_STEP)]
        step: f64,
        #[command(flatten)]
        export: ExportArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck,
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelInput {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// csv, json or svg.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    let seed = config.seed;

    match cli.command {
        Command::FitPreprocess { manifest, split, out } => {
            let manifest = load_checked(&manifest, &config)?;
            let models = fit_manifest(&manifest, split.as_deref(), &config.preprocess, seed)?;
            preprocess_set_to_table(&models).save(&out)?;
            for (name, m) in &models {
                println!("{name}: {} -> {}", m.input_dim(), m.output_dim());
            }
        }
        Command::ApplyPreprocess { manifest, preprocess, out, quantize } => {
            let manifest = load_manifest(&manifest)?;
            let models = preprocess_set_from_table(&TensorTable::load(&preprocess)?)?;
            println!("{}", apply_manifest(&manifest, &models, &out, quantize)?.display());
        }
        Command::Train { manifest, out, epochs, sample_size, batch_size, split, resume, first_epoch } => {
            config.epochs = epochs.unwrap_or(config.epochs);
            config.sample_size = sample_size.unwrap_or(config.sample_size);
            config.batch_size = batch_size.unwrap_or(config.batch_size);
            config.validate()?;
            let manifest = load_checked(&manifest, &config)?;
            let data = load_labeled_videos(&manifest, split.as_deref())?;
            let train_cfg = config.train_config();
            let shape = shape_for_manifest(&manifest, &train_cfg, &config.clusters);
            let outcome = match resume {
                Some(path) => {
                    let table = TensorTable::load(&path)?;
                    let model = model_from_table(&table)?;
                    model.check_manifest(&manifest)?;
                    let optimizer = optimizer_from_table(&table, &model, train_cfg.optimizer)?
                        .with_context(|| format!("{} has no optimizer state", path.display()))?;
                    train_from(model, optimizer, &data, &train_cfg, seed, first_epoch.unwrap_or(0))?
                }
                None => train(init_model(&shape, &train_cfg, seed)?, &data, &train_cfg, seed)?,
            };
            for e in &outcome.log {
                println!("epoch {} loss {:.6} steps {} skipped {}", e.epoch, e.mean_loss, e.steps, e.skipped_steps);
            }
            save_model(&outcome.model, Some(&outcome.optimizer), &out)?;
            println!("checkpoint {} sha256 {}", out.display(), file_digest(&out)?);
        }
        Command::Predict { ckpt, manifest, split, repeats, sample_size, out } => {
            let (mut model, manifest) = load_pair(&ckpt, &manifest)?;
            if let Some(s) = sample_size {
                model.sample_size = s;
            }
            let videos = load_videos(&manifest, split.as_deref())?;
            let preds = predict_videos(&model, &videos, repeats.unwrap_or(config.repeats), seed)?;
            write_predictions(&preds, &out)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Evaluate { predictions, manifest, subset, out } => {
            let manifest = load_manifest(&manifest)?;
            let preds = read_predictions(&predictions)?;
            let classes = match &subset {
                Some(name) => Some(
                    manifest
                        .subsets
                        .get(name)
                        .with_context(|| format!("manifest has no subset {name:?}"))?
                        .clone(),
                ),
                None => None,
            };
            let report = map_eval(&preds, &manifest.ground_truth(), classes.as_deref())?;
            let out = out.unwrap_or_else(|| predictions.with_extension("ap.csv"));
            let mut text = String::from("class_index,class_name,ap,num_positives\n");
            for c in &report.per_class {
                let ap = c.ap.map(|v| v.to_string()).unwrap_or_default();
                let name = manifest.vocabulary.name(c.class_index).unwrap_or("");
                text.push_str(&format!("{},{},{},{}\n", c.class_index, csv_field(name), ap, c.num_positives));
            }
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            if !report.excluded.is_empty() {
                eprintln!("classes without positives (excluded): {:?}", report.excluded);
            }
            println!("mAP {}", report.map);
        }
        Command::Ensemble { inputs, out } => {
            let sets = inputs.iter().map(|p| read_predictions(p)).collect::<mmagg_core::Result<Vec<_>>>()?;
            let merged = ensemble_average(&sets)?;
            write_predictions(&merged, &out)?;
            println!("wrote {} predictions to {}", merged.len(), out.display());
        }
        Command::Ablate { target, video, class_index, export } => {
            let (model, manifest) = load_pair(&target.ckpt, &target.manifest)?;
            let v = load_one(&manifest, &video)?;
            emit(&[Report::Ablation(modality_contribution(&model, &v, class_index, seed)?)], &export)?;
        }
        Command::Histogram { target, video, modality, export } => {
            let (model, manifest) = load_pair(&target.ckpt, &target.manifest)?;
            let v = load_one(&manifest, &video)?;
            emit(&[Report::Histogram(assignment_histogram(&model, &v, &modality, seed)?)], &export)?;
        }
        Command::InspectClusters { target, modality, cluster, top, split, export } => {
            let (model, manifest) = load_pair(&target.ckpt, &target.manifest)?;
            let videos = load_videos(&manifest, split.as_deref())?;
            emit(&[Report::TopFrames(top_frames_for_cluster(&model, &videos, &modality, cluster, top, seed)?)], &export)?;
        }
        Command::Timeline { target, video, class_index, step, export } => {
            let (model, manifest) = load_pair(&target.ckpt, &target.manifest)?;
            let v = load_one(&manifest, &video)?;
            emit(&[Report::Timeline(probability_timeline(&model, &v, class_index, step, seed)?)], &export)?;
        }
        Command::Gradcheck => {
            let report = gradient_check_random(&config.gradcheck)?;
            for e in &report.entries {
                println!(
                    "{:<16} max_rel {:.3e} max_abs {:.3e} n {} {}",
                    e.name,
                    e.max_rel_error,
                    e.max_abs_error,
                    e.checked,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            println!("worst {:.3e} tolerance {:.1e}", report.worst(), report.tolerance);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            println!("{}", generate(&spec, &out)?.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_checked(path: &Path, config: &RunConfig) -> Result<Manifest> {
    let manifest = load_manifest(path)?;
    config.check_manifest(&manifest)?;
    Ok(manifest)
}

fn load_pair(ckpt: &Path, manifest: &Path) -> Result<(AggregationModel, Manifest)> {
    let model = load_model(ckpt)?;
    let manifest = load_manifest(manifest)?;
    model.check_manifest(&manifest)?;
    Ok((model, manifest))
}

fn load_videos(manifest: &Manifest, split: Option<&str>) -> Result<Vec<VideoFeatures>> {
    let videos = manifest
        .videos_in_split(split)
        .map(|r| load_video(manifest, r))
        .collect::<mmagg_core::Result<Vec<_>>>()?;
    if videos.is_empty() {
        bail!("no videos selected");
    }
    Ok(videos)
}

fn load_one(manifest: &Manifest, id: &str) -> Result<VideoFeatures> {
    let record = manifest.video(id).with_context(|| format!("unknown video {id:?}"))?;
    Ok(load_video(manifest, record)?)
}

fn emit(reports: &[Report], export: &ExportArgs) -> Result<()> {
    let format: ExportFormat = export.format.parse()?;
    match &export.out {
        Some(path) => export_reports(reports, path, format)?,
        None => print!("{}", render_reports(reports, format)?),
    }
    Ok(())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
