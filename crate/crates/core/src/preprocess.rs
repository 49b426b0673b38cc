//! Per-modality feature preprocessing: PCA projection, whitening, clipping
//! and 8-bit uniform quantization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::PreprocessConfig;
use crate::datastore::{read_features, write_features, FeatureSequence, Manifest, Storage};
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Matrix;

pub const DEFAULT_CLIP_BOUND: f64 = 2.5;
pub const DEFAULT_LEVELS: u32 = 256;
pub const DEFAULT_WHITEN_EPS: f64 = 1e-6;
pub const DEFAULT_MAX_FIT_SAMPLES: usize = 100_000;

/// Uniform scalar quantizer over `[-clip_bound, clip_bound]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    clip_bound: f64,
    levels: u32,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self {
            clip_bound: DEFAULT_CLIP_BOUND,
            levels: DEFAULT_LEVELS,
        }
    }
}

impl Quantizer {
    pub fn new(clip_bound: f64, levels: u32) -> Result<Self> {
        ensure!(
            clip_bound.is_finite() && clip_bound > 0.0,
            Error::InvalidArgument(format!("clip bound must be positive, got {clip_bound}"))
        );
        ensure!(
            (2..=256).contains(&levels),
            Error::InvalidArgument(format!("levels must be in 2..=256, got {levels}"))
        );
        Ok(Self { clip_bound, levels })
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Distance between adjacent reconstruction values.
    pub fn step(&self) -> f64 {
        2.0 * self.clip_bound / (self.levels - 1) as f64
    }

    pub fn clip(&self, y: f64) -> f64 {
        y.clamp(-self.clip_bound, self.clip_bound)
    }

    /// Rounds half away from zero; out-of-range inputs are clipped first.
    pub fn quantize_value(&self, y: f64) -> u8 {
        let b = self.clip_bound;
        let top = (self.levels - 1) as f64;
        let scaled = (self.clip(y) + b) / (2.0 * b) * top;
        scaled.round().clamp(0.0, top) as u8
    }

    pub fn dequantize_code(&self, code: u8) -> Result<f64> {
        ensure!(
            (code as u32) < self.levels,
            Error::InvalidArgument(format!("code {code} out of range for {} levels", self.levels))
        );
        let b = self.clip_bound;
        Ok(code as f64 / (self.levels - 1) as f64 * (2.0 * b) - b)
    }

    pub fn quantize(&self, y: &[f64]) -> Vec<u8> {
        y.iter().map(|&v| self.quantize_value(v)).collect()
    }

    pub fn dequantize(&self, codes: &[u8]) -> Result<Vec<f64>> {
        codes.iter().map(|&c| self.dequantize_code(c)).collect()
    }
}

/// Fitted PCA + whitening + clipping model for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessModel {
    pub mean: Vec<f64>,
    /// `input_dim × output_dim`; column `j` is the j-th eigenvector.
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
    pub whiten_eps: f64,
    pub quantizer: Quantizer,
}

#[derive(Debug, Clone, Copy)]
pub struct PcaOptions {
    pub whiten_eps: f64,
    pub quantizer: Quantizer,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self {
            whiten_eps: DEFAULT_WHITEN_EPS,
            quantizer: Quantizer::default(),
        }
    }
}

/// Fits PCA on `samples` (one row per frame) keeping `target_dim` components.
///
/// Covariance uses the `N - 1` divisor. Components are ordered by
/// non-increasing eigenvalue and each eigenvector is signed so that its
/// largest-magnitude entry is positive.
pub fn fit_pca(samples: &Matrix, target_dim: usize, options: PcaOptions) -> Result<PreprocessModel> {
    let n = samples.rows();
    let dim = samples.cols();
    ensure!(n >= 2, Error::Degenerate(format!("PCA needs at least 2 samples, got {n}")));
    ensure!(
        target_dim >= 1 && target_dim <= dim.min(n - 1),
        Error::InvalidArgument(format!(
            "target dim {target_dim} must be in 1..={}",
            dim.min(n - 1)
        ))
    );
    ensure!(
        samples.data().iter().all(|v| v.is_finite()),
        Error::InvalidArgument("PCA samples contain non-finite values".into())
    );
    ensure!(
        options.whiten_eps > 0.0,
        Error::InvalidArgument("whiten_eps must be positive".into())
    );

    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| samples.get(i, j) - mean[j]);
    let mut cov = centered.tr_mul(&centered) / (n - 1) as f64;
    // Symmetrize away rounding asymmetry before the symmetric solver.
    for i in 0..dim {
        for j in 0..i {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut basis = Matrix::zeros(dim, target_dim);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    for (out_col, &src) in order.iter().take(target_dim).enumerate() {
        let column = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for r in 1..dim {
            if column[r].abs() > column[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if column[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            basis.set(r, out_col, sign * column[r]);
        }
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }

    Ok(PreprocessModel {
        mean,
        basis,
        eigenvalues,
        whiten_eps: options.whiten_eps,
        quantizer: options.quantizer,
    })
}

impl PreprocessModel {
    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.cols()
    }

    /// Projected and whitened values before clipping.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.input_dim(),
            Error::Shape(format!(
                "expected a {}-vector, got {}",
                self.input_dim(),
                x.len()
            ))
        );
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = vec![0.0; self.output_dim()];
        for (r, c) in centered.iter().enumerate() {
            let row = self.basis.row(r);
            for (o, b) in out.iter_mut().zip(row) {
                *o += b * c;
            }
        }
        for (o, ev) in out.iter_mut().zip(&self.eigenvalues) {
            *o /= (ev + self.whiten_eps).sqrt();
        }
        Ok(out)
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.whiten(x)?;
        y.iter_mut().for_each(|v| *v = self.quantizer.clip(*v));
        Ok(y)
    }

    pub fn transform_matrix(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let y = self.transform(x.row(i))?;
            out.row_mut(i).copy_from_slice(&y);
        }
        Ok(out)
    }
}

/// Seeded uniform subsample (without replacement) of at most `max` row
/// indices out of `total`, returned ascending.
pub fn subsample_indices(total: usize, max: usize, seed: u64) -> Vec<usize> {
    if total <= max {
        return (0..total).collect();
    }
    let mut rng = SeededRng::new(seed);
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..max {
        let j = i + rng.below_usize(total - i);
        pool.swap(i, j);
    }
    pool.truncate(max);
    pool.sort_unstable();
    pool
}

/// Fits one preprocessing model per modality on the frames of the videos in
/// `split` (every non-test video when `None`). Modalities absent from
/// `config.dims` keep their input dimension.
pub fn fit_manifest(manifest: &Manifest, split: Option<&str>, config: &PreprocessConfig, seed: u64) -> Result<BTreeMap<String, PreprocessModel>> {
    let options = PcaOptions {
        whiten_eps: config.whiten_eps,
        quantizer: Quantizer::new(config.clip_bound, config.levels)?,
    };
    let records: Vec<_> = manifest.videos_in_split(split).filter(|v| split.is_some() || !v.is_test()).collect();
    ensure!(!records.is_empty(), Error::InvalidArgument("no videos to fit preprocessing on".into()));
    let mut models = BTreeMap::new();
    for (m, spec) in manifest.modalities.iter().enumerate() {
        let mut rows: Vec<f64> = Vec::new();
        for rec in &records {
            let path = &rec.features[&spec.name];
            let seq = read_features(path)?;
            ensure!(
                seq.dim() == spec.dim,
                Error::FeatureFormat { path: path.clone(), message: format!("dim {} != manifest dim {}", seq.dim(), spec.dim) }
            );
            rows.extend_from_slice(seq.data.data());
        }
        let all = Matrix::from_vec(rows.len() / spec.dim, spec.dim, rows)?;
        let picked = subsample_indices(all.rows(), config.max_fit_samples, derive_seed(seed, &[m as u64]));
        let target = config.dims.get(&spec.name).copied().unwrap_or(spec.dim);
        let model = fit_pca(&all.select_rows(&picked), target, options)?;
        models.insert(spec.name.clone(), model);
    }
    Ok(models)
}

/// Transforms every video's features, writes them under `out_dir/features`
/// (quantized when `quantize`) and saves the updated manifest at
/// `out_dir/manifest.json`.
pub fn apply_manifest(manifest: &Manifest, models: &BTreeMap<String, PreprocessModel>, out_dir: &Path, quantize: bool) -> Result<PathBuf> {
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut out = manifest.clone();
    for spec in &mut out.modalities {
        let model = models
            .get(&spec.name)
            .ok_or_else(|| Error::InvalidArgument(format!("no preprocessing model for modality {:?}", spec.name)))?;
        ensure!(
            model.input_dim() == spec.dim,
            Error::Shape(format!("modality {}: model expects dim {}, manifest has {}", spec.name, model.input_dim(), spec.dim))
        );
        spec.dim = model.output_dim();
    }
    for rec in &mut out.videos {
        for (name, path) in rec.features.iter_mut() {
            let model = &models[name];
            let seq = read_features(path)?;
            let transformed = FeatureSequence::new(name.clone(), seq.fps, model.transform_matrix(&seq.data)?)?;
            let target = feature_dir.join(format!("{}.{}.mmf", rec.id, name));
            let storage = if quantize { Storage::Quantized(model.quantizer) } else { Storage::Raw };
            write_features(&transformed, &target, storage)?;
            *path = target;
        }
    }
    out.validate(true)?;
    let path = out_dir.join("manifest.json");
    out.save(&path)?;
    Ok(path)
}
