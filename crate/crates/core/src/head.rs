//! Classifier head: concatenated VLAD codes → fully connected ReLU layer →
//! per-class mixture of experts → context gating.

use crate::error::{ensure, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{dot, sigmoid, softmax_into, Tensor};

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_EXPERTS: usize = 2;
/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `M × H`
    pub fc_weight: Tensor,
    /// `H`
    pub fc_bias: Tensor,
    /// `C × E × H`
    pub expert_weight: Tensor,
    /// `C × E`
    pub expert_bias: Tensor,
    /// `C × E × H`
    pub gate_weight: Tensor,
    /// `C × C`
    pub context_weight: Tensor,
    /// `C`
    pub context_bias: Tensor,
}

impl HeadParams {
    pub fn zeros(input: usize, hidden: usize, experts: usize, classes: usize) -> Self {
        Self {
            fc_weight: Tensor::zeros(&[input, hidden]),
            fc_bias: Tensor::zeros(&[hidden]),
            expert_weight: Tensor::zeros(&[classes, experts, hidden]),
            expert_bias: Tensor::zeros(&[classes, experts]),
            gate_weight: Tensor::zeros(&[classes, experts, hidden]),
            context_weight: Tensor::zeros(&[classes, classes]),
            context_bias: Tensor::zeros(&[classes]),
        }
    }

    /// Weights from `N(0, 1/fan_in)`, zero biases.
    pub fn init(input: usize, hidden: usize, experts: usize, classes: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(input, hidden, experts, classes);
        let mut fill = |t: &mut Tensor, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal() * scale);
        };
        fill(&mut p.fc_weight, input);
        fill(&mut p.expert_weight, hidden);
        fill(&mut p.gate_weight, hidden);
        fill(&mut p.context_weight, classes);
        p
    }

    pub fn input_len(&self) -> usize {
        self.fc_weight.dims()[0]
    }

    pub fn hidden(&self) -> usize {
        self.fc_weight.dims()[1]
    }

    pub fn experts(&self) -> usize {
        self.expert_bias.dims()[1]
    }

    pub fn classes(&self) -> usize {
        self.context_bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_len(), self.hidden(), self.experts(), self.classes())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("fc.W", &self.fc_weight),
            ("fc.b", &self.fc_bias),
            ("moe.U", &self.expert_weight),
            ("moe.bias", &self.expert_bias),
            ("moe.A", &self.gate_weight),
            ("cg.G", &self.context_weight),
            ("cg.g", &self.context_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("fc.W", &mut self.fc_weight),
            ("fc.b", &mut self.fc_bias),
            ("moe.U", &mut self.expert_weight),
            ("moe.bias", &mut self.expert_bias),
            ("moe.A", &mut self.gate_weight),
            ("cg.G", &mut self.context_weight),
            ("cg.g", &mut self.context_bias),
        ]
    }
}

/// Forward intermediates for [`head_backward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub slice_lens: Vec<usize>,
    pub input: Vec<f64>,
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    /// `C × E`
    pub gates: Vec<f64>,
    /// `C × E`
    pub experts: Vec<f64>,
    pub mixture: Vec<f64>,
    pub context: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn head_forward(params: &HeadParams, vlads: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(head_forward_cached(params, vlads)?.output)
}

pub fn head_forward_cached(params: &HeadParams, vlads: &[Vec<f64>]) -> Result<HeadCache> {
    let slice_lens: Vec<usize> = vlads.iter().map(Vec::len).collect();
    let m: usize = slice_lens.iter().sum();
    ensure!(
        m == params.input_len(),
        Error::Shape(format!("head expects {} inputs, got {m}", params.input_len()))
    );
    let h = params.hidden();
    let e = params.experts();
    let c = params.classes();
    let input: Vec<f64> = vlads.iter().flatten().copied().collect();

    let mut pre_hidden = params.fc_bias.data().to_vec();
    let w = params.fc_weight.data();
    for (r, &z) in input.iter().enumerate() {
        let row = &w[r * h..(r + 1) * h];
        for (acc, wv) in pre_hidden.iter_mut().zip(row) {
            *acc += z * wv;
        }
    }
    let hidden: Vec<f64> = pre_hidden.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();

    let mut gates = vec![0.0; c * e];
    let mut experts = vec![0.0; c * e];
    let mut mixture = vec![0.0; c];
    let mut logits = vec![0.0; e];
    let u = params.expert_weight.data();
    let a = params.gate_weight.data();
    let ub = params.expert_bias.data();
    for class in 0..c {
        for x in 0..e {
            let off = (class * e + x) * h;
            logits[x] = dot(&a[off..off + h], &hidden);
            experts[class * e + x] = sigmoid(dot(&u[off..off + h], &hidden) + ub[class * e + x]);
        }
        softmax_into(&logits, &mut gates[class * e..(class + 1) * e]);
        mixture[class] = (0..e)
            .map(|x| gates[class * e + x] * experts[class * e + x])
            .sum();
    }

    let g = params.context_weight.data();
    let context: Vec<f64> = (0..c)
        .map(|row| sigmoid(dot(&g[row * c..(row + 1) * c], &mixture) + params.context_bias.data()[row]))
        .collect();
    let output = context.iter().zip(&mixture).map(|(s, p)| s * p).collect();

    Ok(HeadCache {
        slice_lens,
        input,
        pre_hidden,
        hidden,
        gates,
        experts,
        mixture,
        context,
        output,
    })
}

/// Mean binary cross-entropy over classes on clamped probabilities.
pub fn bce_loss(y: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = y
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    total / y.len() as f64
}

/// `∂ bce_loss / ∂ y`; zero where the clamp is active.
pub fn bce_grad(y: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    y.iter()
        .zip(targets)
        .map(|(&p, &t)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect()
}

/// Backpropagates `grad_y` through the head. Returns parameter gradients and
/// one gradient vector per input VLAD slice.
pub fn head_backward(params: &HeadParams, cache: &HeadCache, grad_y: &[f64]) -> Result<(HeadParams, Vec<Vec<f64>>)> {
    let h = params.hidden();
    let e = params.experts();
    let c = params.classes();
    ensure!(
        grad_y.len() == c,
        Error::Shape(format!("grad_y has {} values, expected {c}", grad_y.len()))
    );
    ensure!(
        cache.input.len() == params.input_len() && cache.hidden.len() == h,
        Error::Shape("head cache does not match parameters".into())
    );
    let mut grads = params.zeros_like();

    // Context gating: y = s ⊙ p, s = sigmoid(G p + g).
    let g = params.context_weight.data();
    let mut d_mixture: Vec<f64> = (0..c).map(|i| grad_y[i] * cache.context[i]).collect();
    let d_context: Vec<f64> = (0..c)
        .map(|i| grad_y[i] * cache.mixture[i] * cache.context[i] * (1.0 - cache.context[i]))
        .collect();
    {
        let dg = grads.context_weight.data_mut();
        for row in 0..c {
            for col in 0..c {
                dg[row * c + col] = d_context[row] * cache.mixture[col];
                d_mixture[col] += d_context[row] * g[row * c + col];
            }
        }
        grads.context_bias.data_mut().copy_from_slice(&d_context);
    }

    // Mixture of experts.
    let u = params.expert_weight.data();
    let a = params.gate_weight.data();
    let mut d_hidden = vec![0.0; h];
    let mut d_gate = vec![0.0; e];
    for class in 0..c {
        let dp = d_mixture[class];
        let gates = &cache.gates[class * e..(class + 1) * e];
        let experts = &cache.experts[class * e..(class + 1) * e];
        for x in 0..e {
            d_gate[x] = dp * experts[x];
        }
        let weighted = dot(gates, &d_gate);
        for x in 0..e {
            let off = (class * e + x) * h;
            let d_expert_logit = dp * gates[x] * experts[x] * (1.0 - experts[x]);
            let d_gate_logit = gates[x] * (d_gate[x] - weighted);
            grads.expert_bias.data_mut()[class * e + x] = d_expert_logit;
            let du = &mut grads.expert_weight.data_mut()[off..off + h];
            for (dst, hv) in du.iter_mut().zip(&cache.hidden) {
                *dst = d_expert_logit * hv;
            }
            let da = &mut grads.gate_weight.data_mut()[off..off + h];
            for (dst, hv) in da.iter_mut().zip(&cache.hidden) {
                *dst = d_gate_logit * hv;
            }
            for j in 0..h {
                d_hidden[j] += d_expert_logit * u[off + j] + d_gate_logit * a[off + j];
            }
        }
    }

    // Fully connected ReLU layer.
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&cache.pre_hidden)
        .map(|(d, &p)| if p > 0.0 { *d } else { 0.0 })
        .collect();
    grads.fc_bias.data_mut().copy_from_slice(&d_pre);
    let w = params.fc_weight.data();
    let mut d_input = vec![0.0; cache.input.len()];
    {
        let dw = grads.fc_weight.data_mut();
        for (r, &z) in cache.input.iter().enumerate() {
            let row = &w[r * h..(r + 1) * h];
            let drow = &mut dw[r * h..(r + 1) * h];
            for ((dst, dp), _) in drow.iter_mut().zip(&d_pre).zip(row) {
                *dst = z * dp;
            }
            d_input[r] = dot(row, &d_pre);
        }
    }

    let mut slices = Vec::with_capacity(cache.slice_lens.len());
    let mut start = 0;
    for &len in &cache.slice_lens {
        slices.push(d_input[start..start + len].to_vec());
        start += len;
    }
    Ok((grads, slices))
}
