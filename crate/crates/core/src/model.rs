//! The full aggregation model: one VLAD layer per modality feeding the head.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::head::{bce_grad, bce_loss, head_backward, head_forward_cached, HeadCache, HeadParams};
use crate::netvlad::{vlad_backward, vlad_forward_cached, VladCache, VladParams};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelModality {
    pub name: String,
    pub dim: usize,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub modalities: Vec<ModelModality>,
    pub hidden: usize,
    pub experts: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.modalities.is_empty(), Error::InvalidArgument("model needs at least one modality".into()));
        ensure!(self.hidden >= 1, Error::InvalidArgument("hidden size must be >= 1".into()));
        ensure!(self.experts >= 1, Error::InvalidArgument("expert count must be >= 1".into()));
        ensure!(self.classes >= 1, Error::InvalidArgument("class count must be >= 1".into()));
        for m in &self.modalities {
            ensure!(
                m.dim >= 1 && m.clusters >= 1,
                Error::InvalidArgument(format!("modality {}: dim and clusters must be >= 1", m.name))
            );
        }
        Ok(())
    }

    pub fn head_input_len(&self) -> usize {
        self.modalities.iter().map(|m| m.dim * m.clusters).sum()
    }
}

/// All learnable parameters. Gradients reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationModel {
    pub modalities: Vec<ModelModality>,
    pub vlad: Vec<VladParams>,
    pub head: HeadParams,
    pub sample_size: usize,
}

/// Forward intermediates for one example.
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub vlad: Vec<VladCache>,
    pub head: HeadCache,
}

impl ModelCache {
    pub fn output(&self) -> &[f64] {
        &self.head.output
    }
}

/// Loss, parameter gradients and per-modality frame gradients for one example.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    pub loss: f64,
    pub params: AggregationModel,
    pub inputs: Vec<Matrix>,
}

impl AggregationModel {
    /// Seeded initialization; values are rounded to `f32`, the checkpoint precision.
    pub fn init(shape: &ModelShape, sample_size: usize, seed: u64) -> Result<Self> {
        shape.validate()?;
        ensure!(sample_size >= 1, Error::InvalidArgument("sample size must be >= 1".into()));
        let mut rng = SeededRng::new(seed);
        let vlad = shape
            .modalities
            .iter()
            .map(|m| VladParams::init(m.dim, m.clusters, &mut rng))
            .collect();
        let head = HeadParams::init(shape.head_input_len(), shape.hidden, shape.experts, shape.classes, &mut rng);
        let mut model = Self {
            modalities: shape.modalities.clone(),
            vlad,
            head,
            sample_size,
        };
        model.round_to_f32();
        Ok(model)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            modalities: self.modalities.clone(),
            hidden: self.head.hidden(),
            experts: self.head.experts(),
            classes: self.head.classes(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Requires the manifest's modalities to match the model's, in order.
    pub fn check_manifest(&self, manifest: &crate::datastore::Manifest) -> Result<()> {
        let ours: Vec<(&str, usize)> = self.modalities.iter().map(|m| (m.name.as_str(), m.dim)).collect();
        let theirs: Vec<(&str, usize)> = manifest.modalities.iter().map(|m| (m.name.as_str(), m.dim)).collect();
        ensure!(
            ours == theirs,
            Error::Shape(format!("model modalities {ours:?} do not match manifest modalities {theirs:?}"))
        );
        ensure!(
            self.num_classes() == manifest.num_classes(),
            Error::Shape(format!("model has {} classes, manifest has {}", self.num_classes(), manifest.num_classes()))
        );
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            modalities: self.modalities.clone(),
            vlad: self.vlad.iter().map(VladParams::zeros_like).collect(),
            head: self.head.zeros_like(),
            sample_size: self.sample_size,
        }
    }

    /// Parameter tensors with their checkpoint names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (m, v) in self.modalities.iter().zip(&self.vlad) {
            out.push((format!("vlad.{}.W", m.name), &v.assign_weights));
            out.push((format!("vlad.{}.b", m.name), &v.assign_bias));
            out.push((format!("vlad.{}.C", m.name), &v.centers));
        }
        for (n, t) in self.head.tensors() {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for v in &mut self.vlad {
            out.push(&mut v.assign_weights);
            out.push(&mut v.assign_bias);
            out.push(&mut v.centers);
        }
        for (_, t) in self.head.tensors_mut() {
            out.push(t);
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::round_to_f32);
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    fn check_inputs(&self, inputs: &[Matrix]) -> Result<()> {
        ensure!(
            inputs.len() == self.modalities.len(),
            Error::Shape(format!("model has {} modalities, got {} inputs", self.modalities.len(), inputs.len()))
        );
        Ok(())
    }

    pub fn forward_cached(&self, inputs: &[Matrix]) -> Result<ModelCache> {
        self.check_inputs(inputs)?;
        let vlad = self
            .vlad
            .iter()
            .zip(inputs)
            .map(|(p, x)| vlad_forward_cached(p, x))
            .collect::<Result<Vec<_>>>()?;
        let codes: Vec<Vec<f64>> = vlad.iter().map(|c| c.output.clone()).collect();
        let head = head_forward_cached(&self.head, &codes)?;
        Ok(ModelCache { vlad, head })
    }

    /// Class probabilities for one sampled example.
    pub fn forward(&self, inputs: &[Matrix]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(inputs)?.head.output)
    }

    pub fn backward(&self, inputs: &[Matrix], cache: &ModelCache, grad_y: &[f64]) -> Result<(AggregationModel, Vec<Matrix>)> {
        self.check_inputs(inputs)?;
        let (head_grads, slice_grads) = head_backward(&self.head, &cache.head, grad_y)?;
        let mut grads = self.zeros_like();
        grads.head = head_grads;
        let mut input_grads = Vec::with_capacity(inputs.len());
        for (i, ((p, x), c)) in self.vlad.iter().zip(inputs).zip(&cache.vlad).enumerate() {
            let (g, gx) = vlad_backward(p, x, c, &slice_grads[i])?;
            grads.vlad[i] = g;
            input_grads.push(gx);
        }
        Ok((grads, input_grads))
    }

    /// Binary cross-entropy of one example and its gradients.
    pub fn loss_and_gradients(&self, inputs: &[Matrix], targets: &[f64]) -> Result<ExampleGradients> {
        ensure!(
            targets.len() == self.num_classes(),
            Error::Shape(format!("{} targets for {} classes", targets.len(), self.num_classes()))
        );
        let cache = self.forward_cached(inputs)?;
        let loss = bce_loss(cache.output(), targets);
        let grad_y = bce_grad(cache.output(), targets);
        let (params, inputs) = self.backward(inputs, &cache, &grad_y)?;
        Ok(ExampleGradients { loss, params, inputs })
    }

    pub fn loss(&self, inputs: &[Matrix], targets: &[f64]) -> Result<f64> {
        Ok(bce_loss(&self.forward(inputs)?, targets))
    }

    /// Accumulates `other` into `self` tensor by tensor.
    pub fn add_assign(&mut self, other: &AggregationModel) {
        let others: Vec<&Tensor> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (a, b) in self.tensors_mut().into_iter().zip(others) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }
}

/// Multi-hot target vector.
pub fn targets_from_labels<'a>(labels: impl IntoIterator<Item = &'a usize>, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    for &l in labels {
        if l < classes {
            t[l] = 1.0;
        }
    }
    t
}
