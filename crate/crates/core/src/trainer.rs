//! Mini-batch Adam training, optimizer state and finite-difference
//! gradient checking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{load_video, Manifest, VideoFeatures};
use crate::error::{ensure, Error, Result};
use crate::model::{targets_from_labels, AggregationModel, ModelModality, ModelShape};
use crate::rng::{derive_seed, SeededRng};
use crate::sampling::{sample_segment, segment_seed, usable_segments, Segment};
use crate::tensor::{Matrix, Tensor};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494E_4954;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter tensor in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(model: &AggregationModel, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = model.named_tensors().iter().map(|(_, t)| t.zeros_like()).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            config,
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was non-finite; nothing changed.
    Skipped,
}

/// One bias-corrected Adam update. Parameters and moments are rounded to
/// `f32` afterwards so the in-memory state always equals its checkpoint.
pub fn adam_step(state: &mut OptimizerState, params: &mut AggregationModel, grads: &AggregationModel) -> Result<StepOutcome> {
    let grad_tensors: Vec<&Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut param_tensors = params.tensors_mut();
    ensure!(
        grad_tensors.len() == param_tensors.len() && state.first_moment.len() == param_tensors.len(),
        Error::Shape("optimizer, parameter and gradient tensor counts differ".into())
    );
    for ((p, g), m) in param_tensors.iter().zip(&grad_tensors).zip(&state.first_moment) {
        ensure!(
            p.dims() == g.dims() && p.dims() == m.dims(),
            Error::Shape(format!("optimizer shape mismatch: {:?} vs {:?}", p.dims(), g.dims()))
        );
    }
    if !grad_tensors.iter().all(|g| g.is_finite()) {
        return Ok(StepOutcome::Skipped);
    }

    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in param_tensors.iter_mut().enumerate() {
        let g = grad_tensors[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.round_to_f32();
        state.first_moment[i].round_to_f32();
        state.second_moment[i].round_to_f32();
    }
    Ok(StepOutcome::Applied)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub experts: usize,
    pub sample_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub threads: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: crate::head::DEFAULT_HIDDEN,
            experts: crate::head::DEFAULT_EXPERTS,
            sample_size: crate::sampling::DEFAULT_SAMPLE_SIZE,
            batch_size: 64,
            epochs: 10,
            threads: 1,
            optimizer: AdamConfig::default(),
        }
    }
}

/// A video's features with its multi-hot targets.
#[derive(Debug, Clone)]
pub struct LabeledVideo {
    pub features: VideoFeatures,
    pub targets: Vec<f64>,
}

/// Loads the videos of `split` (every non-test video when `None`).
pub fn load_labeled_videos(manifest: &Manifest, split: Option<&str>) -> Result<Vec<LabeledVideo>> {
    manifest
        .videos_in_split(split)
        .filter(|v| split.is_some() || !v.is_test())
        .map(|record| {
            Ok(LabeledVideo {
                features: load_video(manifest, record)?,
                targets: targets_from_labels(&record.labels, manifest.num_classes()),
            })
        })
        .collect()
}

/// Model shape for a manifest; `clusters` overrides per-modality cluster counts.
pub fn shape_for_manifest(manifest: &Manifest, config: &TrainConfig, clusters: &std::collections::BTreeMap<String, usize>) -> ModelShape {
    ModelShape {
        modalities: manifest
            .modalities
            .iter()
            .map(|m| ModelModality {
                name: m.name.clone(),
                dim: m.dim,
                clusters: clusters.get(&m.name).copied().unwrap_or(m.clusters),
            })
            .collect(),
        hidden: config.hidden,
        experts: config.experts,
        classes: manifest.num_classes(),
    }
}

/// Fresh model seeded from the training seed.
pub fn init_model(shape: &ModelShape, config: &TrainConfig, seed: u64) -> Result<AggregationModel> {
    AggregationModel::init(shape, config.sample_size, derive_seed(seed, &[INIT_STREAM]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AggregationModel,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochStats>,
}

struct Example<'a> {
    video: &'a LabeledVideo,
    segment: Segment,
}

/// Trains `model` on every usable segment of `data`.
///
/// Everything random derives from `seed`: the per-epoch shuffle and each
/// (video, segment, epoch) frame sample. Per-example gradients may be
/// computed on `config.threads` workers but are always summed in batch order.
pub fn train(model: AggregationModel, data: &[LabeledVideo], config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let optimizer = OptimizerState::new(&model, config.optimizer);
    train_from(model, optimizer, data, config, seed, 0)
}

/// Continues training from existing optimizer state, starting at `first_epoch`.
pub fn train_from(
    mut model: AggregationModel,
    mut optimizer: OptimizerState,
    data: &[LabeledVideo],
    config: &TrainConfig,
    seed: u64,
    first_epoch: usize,
) -> Result<TrainOutcome> {
    ensure!(!data.is_empty(), Error::InvalidArgument("training set is empty".into()));
    ensure!(config.batch_size >= 1, Error::InvalidArgument("batch size must be >= 1".into()));
    for v in data {
        ensure!(
            v.features.streams.len() == model.modalities.len()
                && v.features.streams.iter().zip(&model.modalities).all(|(s, m)| s.dim() == m.dim),
            Error::Shape(format!("video {} does not match the model's modalities", v.features.video_id))
        );
        ensure!(
            v.targets.len() == model.num_classes(),
            Error::Shape(format!("video {} has {} targets", v.features.video_id, v.targets.len()))
        );
    }
    let mut examples = Vec::new();
    for v in data {
        for segment in usable_segments(&v.features)? {
            examples.push(Example { video: v, segment });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in first_epoch..first_epoch + config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        SeededRng::new(derive_seed(seed, &[SHUFFLE_STREAM, epoch as u64])).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut skipped = 0;
        for batch in order.chunks(config.batch_size) {
            let run = |&i: &usize| -> Result<(f64, AggregationModel)> {
                let ex = &examples[i];
                let s = segment_seed(seed, &ex.video.features.video_id, ex.segment.index, epoch as u64 + 1);
                let input = sample_segment(&ex.video.features, &ex.segment, model.sample_size, s)?;
                let g = model.loss_and_gradients(&input.frames, &ex.video.targets)?;
                Ok((g.loss, g.params))
            };
            let results: Vec<Result<(f64, AggregationModel)>> = if config.threads <= 1 {
                batch.iter().map(run).collect()
            } else {
                pool.install(|| batch.par_iter().map(run).collect())
            };
            let mut total = model.zeros_like();
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            match adam_step(&mut optimizer, &mut model, &total)? {
                StepOutcome::Applied => steps += 1,
                StepOutcome::Skipped => skipped += 1,
            }
        }
        ensure!(
            model.is_finite(),
            Error::Degenerate(format!("parameters became non-finite in epoch {epoch}"))
        );
        log.push(EpochStats {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            steps,
            skipped_steps: skipped,
        });
    }
    Ok(TrainOutcome { model, optimizer, log })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error with magnitudes floored at this value, so gradients that
/// are zero up to rounding compare by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares analytic gradients of the example loss with central differences
/// for every parameter tensor and every modality's input frames.
pub fn gradient_check(
    model: &AggregationModel,
    inputs: &[Matrix],
    targets: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = model.loss_and_gradients(inputs, targets)?;
    let mut entries = Vec::new();

    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Tensor> = analytic.params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let mut probe = model.clone();
    for (t, name) in names.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: grads[t].len(),
            passed: true,
        };
        for idx in 0..grads[t].len() {
            let original = probe.tensors_mut()[t].data()[idx];
            probe.tensors_mut()[t].data_mut()[idx] = original + step;
            let plus = probe.loss(inputs, targets)?;
            probe.tensors_mut()[t].data_mut()[idx] = original - step;
            let minus = probe.loss(inputs, targets)?;
            probe.tensors_mut()[t].data_mut()[idx] = original;
            record(&mut check, grads[t].data()[idx], (plus - minus) / (2.0 * step));
        }
        check.passed = check.max_rel_error < tolerance;
        entries.push(check);
    }

    let mut probe_inputs = inputs.to_vec();
    for (m, modality) in model.modalities.iter().enumerate() {
        let mut check = TensorCheck {
            name: format!("input.{}", modality.name),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: inputs[m].data().len(),
            passed: true,
        };
        for idx in 0..inputs[m].data().len() {
            let original = probe_inputs[m].data()[idx];
            probe_inputs[m].data_mut()[idx] = original + step;
            let plus = model.loss(&probe_inputs, targets)?;
            probe_inputs[m].data_mut()[idx] = original - step;
            let minus = model.loss(&probe_inputs, targets)?;
            probe_inputs[m].data_mut()[idx] = original;
            record(&mut check, analytic.inputs[m].data()[idx], (plus - minus) / (2.0 * step));
        }
        check.passed = check.max_rel_error < tolerance;
        entries.push(check);
    }
    Ok(GradCheckReport { step, tolerance, entries })
}

fn record(check: &mut TensorCheck, analytic: f64, numeric: f64) {
    let rel = rel_error(analytic, numeric);
    // NaN compares false everywhere; make it fail loudly instead.
    check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { check.max_rel_error.max(rel) };
    check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
}

/// Small random configuration for gradient checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// `(dim, clusters)` per modality.
    pub modalities: Vec<(usize, usize)>,
    pub hidden: usize,
    pub experts: usize,
    pub classes: usize,
    pub sample_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub zero_input: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            modalities: vec![(4, 3), (4, 3)],
            hidden: 8,
            experts: 2,
            classes: 5,
            sample_size: 6,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 7,
            zero_input: false,
        }
    }
}

/// Builds a random model, sample and targets from `config` and checks them.
pub fn gradient_check_random(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let shape = ModelShape {
        modalities: config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, &(dim, clusters))| ModelModality { name: format!("m{i}"), dim, clusters })
            .collect(),
        hidden: config.hidden,
        experts: config.experts,
        classes: config.classes,
    };
    let mut model = AggregationModel::init(&shape, config.sample_size, config.seed)?;
    let mut rng = SeededRng::new(derive_seed(config.seed, &[1]));
    // Non-zero biases so every code path carries signal.
    for v in &mut model.vlad {
        v.assign_bias.data_mut().iter_mut().for_each(|b| *b = 0.5 * rng.normal());
    }
    for (name, t) in model.head.tensors_mut() {
        if name.ends_with(".b") || name.ends_with("bias") || name == "cg.g" {
            t.data_mut().iter_mut().for_each(|b| *b = 0.5 * rng.normal());
        }
    }
    let inputs: Vec<Matrix> = shape
        .modalities
        .iter()
        .map(|m| {
            let data = (0..config.sample_size * m.dim)
                .map(|_| if config.zero_input { 0.0 } else { rng.normal() })
                .collect();
            Matrix::from_vec(config.sample_size, m.dim, data)
        })
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = (0..config.classes).map(|_| rng.below(2) as f64).collect();
    gradient_check(&model, &inputs, &targets, config.step, config.tolerance)
}
