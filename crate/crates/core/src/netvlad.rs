//! Learnable VLAD aggregation with soft cluster assignment.
//!
//! For frames `X` (S×d), logits `a_ik = X_i·W_k + b_k` are softmaxed over
//! clusters to give `α`. Residuals `R_jk = Σ_i α_ik (X_ij − C_jk)` are
//! L2-normalized per cluster, then globally, and flattened cluster-major
//! (`V[k·d + j]`). Frame sums always run in ascending row order.

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{dot, softmax_into, Matrix, Tensor};

pub const DEFAULT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct VladParams {
    /// `d × K` assignment weights.
    pub assign_weights: Tensor,
    /// `K` assignment biases.
    pub assign_bias: Tensor,
    /// `d × K` cluster centers.
    pub centers: Tensor,
    pub norm_eps: f64,
}

impl VladParams {
    pub fn zeros(dim: usize, clusters: usize) -> Self {
        Self {
            assign_weights: Tensor::zeros(&[dim, clusters]),
            assign_bias: Tensor::zeros(&[clusters]),
            centers: Tensor::zeros(&[dim, clusters]),
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    /// Weights and centers from `N(0, 1/d)`, zero biases.
    pub fn init(dim: usize, clusters: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(dim, clusters);
        let scale = 1.0 / (dim as f64).sqrt();
        p.centers.data_mut().iter_mut().for_each(|v| *v = rng.normal() * scale);
        p.assign_weights
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.normal() * scale);
        p
    }

    pub fn dim(&self) -> usize {
        self.assign_weights.dims()[0]
    }

    pub fn clusters(&self) -> usize {
        self.assign_weights.dims()[1]
    }

    pub fn output_len(&self) -> usize {
        self.dim() * self.clusters()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.clusters())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        ensure!(
            x.cols() == self.dim(),
            Error::Shape(format!("VLAD expects {}-dim frames, got {}", self.dim(), x.cols()))
        );
        ensure!(x.rows() >= 1, Error::Shape("VLAD needs at least one frame".into()));
        Ok(())
    }
}

/// Per-frame cluster probabilities, `S × K`.
pub fn soft_assign(params: &VladParams, x: &Matrix) -> Result<Matrix> {
    ensure!(
        x.cols() == params.dim(),
        Error::Shape(format!("VLAD expects {}-dim frames, got {}", params.dim(), x.cols()))
    );
    let k = params.clusters();
    let d = params.dim();
    let w = params.assign_weights.data();
    let mut alpha = Matrix::zeros(x.rows(), k);
    let mut logits = vec![0.0; k];
    for i in 0..x.rows() {
        logits.copy_from_slice(params.assign_bias.data());
        for (j, &xij) in x.row(i).iter().enumerate().take(d) {
            let wrow = &w[j * k..(j + 1) * k];
            for (l, wv) in logits.iter_mut().zip(wrow) {
                *l += xij * wv;
            }
        }
        softmax_into(&logits, alpha.row_mut(i));
    }
    Ok(alpha)
}

/// Intermediates needed by [`vlad_backward`].
#[derive(Debug, Clone)]
pub struct VladCache {
    pub alpha: Matrix,
    /// Unnormalized residual sums, cluster-major `K × d`.
    pub residual: Vec<f64>,
    pub cluster_norms: Vec<f64>,
    /// After intra-normalization, cluster-major.
    pub intra: Vec<f64>,
    pub global_norm: f64,
    pub output: Vec<f64>,
}

/// Row visiting order for sums over frames: rows sorted by their bit
/// patterns, so any permutation of the same frames sums identically.
pub fn canonical_order(x: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

pub fn vlad_forward(params: &VladParams, x: &Matrix) -> Result<Vec<f64>> {
    Ok(vlad_forward_cached(params, x)?.output)
}

pub fn vlad_forward_cached(params: &VladParams, x: &Matrix) -> Result<VladCache> {
    params.check_input(x)?;
    let d = params.dim();
    let k = params.clusters();
    let alpha = soft_assign(params, x)?;
    let centers = params.centers.data();

    let mut residual = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for i in canonical_order(x) {
        let row = x.row(i);
        let a = alpha.row(i);
        for c in 0..k {
            let ac = a[c];
            mass[c] += ac;
            let col = &mut residual[c * d..(c + 1) * d];
            for (r, xv) in col.iter_mut().zip(row) {
                *r += ac * xv;
            }
        }
    }
    for c in 0..k {
        for j in 0..d {
            residual[c * d + j] -= mass[c] * centers[j * k + c];
        }
    }

    let eps = params.norm_eps;
    let mut intra = residual.clone();
    let mut cluster_norms = vec![0.0; k];
    for c in 0..k {
        let col = &mut intra[c * d..(c + 1) * d];
        let n = dot(col, col).sqrt();
        cluster_norms[c] = n;
        let denom = n.max(eps);
        col.iter_mut().for_each(|v| *v /= denom);
    }
    let global_norm = dot(&intra, &intra).sqrt();
    let denom = global_norm.max(eps);
    let output = intra.iter().map(|v| v / denom).collect();

    Ok(VladCache {
        alpha,
        residual,
        cluster_norms,
        intra,
        global_norm,
        output,
    })
}

/// Gradient of `y = x / max(‖x‖, eps)` given `y`, `‖x‖` and `dy`.
fn normalize_backward(y: &[f64], norm: f64, eps: f64, dy: &[f64], dx: &mut [f64]) {
    if norm > eps {
        let proj = dot(y, dy);
        for ((g, yv), dyv) in dx.iter_mut().zip(y).zip(dy) {
            *g = (dyv - yv * proj) / norm;
        }
    } else {
        for (g, dyv) in dx.iter_mut().zip(dy) {
            *g = dyv / eps;
        }
    }
}

/// Backpropagates `grad_v` through [`vlad_forward`]. Returns parameter
/// gradients (in a `VladParams` of the same shape) and the frame gradient.
pub fn vlad_backward(
    params: &VladParams,
    x: &Matrix,
    cache: &VladCache,
    grad_v: &[f64],
) -> Result<(VladParams, Matrix)> {
    params.check_input(x)?;
    let d = params.dim();
    let k = params.clusters();
    let s = x.rows();
    ensure!(
        grad_v.len() == k * d,
        Error::Shape(format!("grad_v has {} values, expected {}", grad_v.len(), k * d))
    );
    ensure!(
        cache.alpha.rows() == s && cache.alpha.cols() == k,
        Error::Shape("VLAD cache does not match input".into())
    );
    let eps = params.norm_eps;

    let mut d_intra = vec![0.0; k * d];
    normalize_backward(&cache.output, cache.global_norm, eps, grad_v, &mut d_intra);

    let mut d_res = vec![0.0; k * d];
    for c in 0..k {
        let range = c * d..(c + 1) * d;
        normalize_backward(
            &cache.intra[range.clone()],
            cache.cluster_norms[c],
            eps,
            &d_intra[range.clone()],
            &mut d_res[range],
        );
    }

    let mut grads = params.zeros_like();
    let order = canonical_order(x);
    let centers = params.centers.data();
    let w = params.assign_weights.data();
    let mut grad_x = Matrix::zeros(s, d);

    {
        let dc = grads.centers.data_mut();
        for c in 0..k {
            let mass: f64 = order.iter().map(|&i| cache.alpha.get(i, c)).sum();
            for j in 0..d {
                dc[j * k + c] = -d_res[c * d + j] * mass;
            }
        }
    }

    let mut d_alpha = vec![0.0; k];
    let mut d_logit = vec![0.0; k];
    for &i in &order {
        let row = x.row(i);
        let a = cache.alpha.row(i);
        for c in 0..k {
            let dr = &d_res[c * d..(c + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += dr[j] * (row[j] - centers[j * k + c]);
            }
            d_alpha[c] = acc;
        }
        let weighted = dot(a, &d_alpha);
        for c in 0..k {
            d_logit[c] = a[c] * (d_alpha[c] - weighted);
        }

        let gx = grad_x.row_mut(i);
        for j in 0..d {
            let mut acc = 0.0;
            for c in 0..k {
                acc += d_res[c * d + j] * a[c] + w[j * k + c] * d_logit[c];
            }
            gx[j] = acc;
        }
        let dw = grads.assign_weights.data_mut();
        for j in 0..d {
            for c in 0..k {
                dw[j * k + c] += row[j] * d_logit[c];
            }
        }
        let db = grads.assign_bias.data_mut();
        for c in 0..k {
            db[c] += d_logit[c];
        }
    }
    Ok((grads, grad_x))
}
