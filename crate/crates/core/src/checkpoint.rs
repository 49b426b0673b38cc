//! Named tensor-table checkpoints.
//!
//! Layout (little-endian): magic `MMCK`, version u32, tensor count u64,
//! then per tensor: name length u16, name bytes, dtype u8 (0 = f32),
//! rank u32, dims as u64 each, payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datastore::{write_bytes, ByteCursor};
use crate::error::{ensure, Error, Result};
use crate::head::HeadParams;
use crate::model::{AggregationModel, ModelModality};
use crate::netvlad::VladParams;
use crate::preprocess::{PreprocessModel, Quantizer};
use crate::tensor::{Matrix, Tensor};
use crate::trainer::{AdamConfig, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    entries: Vec<(String, Tensor)>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        ensure!(t.len() == 1, Error::Checkpoint(format!("{name} is not a scalar")));
        Ok(t.data()[0])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let trunc = || Error::Checkpoint("truncated checkpoint".into());
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4).ok_or_else(trunc)?;
        ensure!(magic == CHECKPOINT_MAGIC, Error::Checkpoint("bad magic".into()));
        let version = cur.u32().ok_or_else(trunc)?;
        ensure!(
            version == CHECKPOINT_VERSION,
            Error::Checkpoint(format!("unsupported version {version}"))
        );
        let count = cur.u64().ok_or_else(trunc)?;
        let mut table = Self::new();
        for _ in 0..count {
            let len = cur.u16().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(trunc)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let dtype = cur.u8().ok_or_else(trunc)?;
            ensure!(dtype == DTYPE_F32, Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            let rank = cur.u32().ok_or_else(trunc)? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(cur.u64().ok_or_else(trunc)? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
            let payload = cur.take(n.checked_mul(4).ok_or_else(trunc)?).ok_or_else(trunc)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            table.push(name, Tensor::from_vec(&dims, data)?);
        }
        ensure!(cur.remaining() == 0, Error::Checkpoint("trailing bytes".into()));
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Model parameters plus, optionally, optimizer state for resuming.
pub fn model_to_table(model: &AggregationModel, optimizer: Option<&OptimizerState>) -> TensorTable {
    let mut table = TensorTable::new();
    table.push("config.sample_size", Tensor::scalar(model.sample_size as f64));
    for (name, t) in model.named_tensors() {
        table.push(name, t.clone());
    }
    if let Some(opt) = optimizer {
        table.push("adam.step", Tensor::scalar(opt.step as f64));
        for ((name, _), (m, v)) in model
            .named_tensors()
            .into_iter()
            .zip(opt.first_moment.iter().zip(&opt.second_moment))
        {
            table.push(format!("adam.m.{name}"), m.clone());
            table.push(format!("adam.v.{name}"), v.clone());
        }
    }
    table
}

pub fn model_from_table(table: &TensorTable) -> Result<AggregationModel> {
    let sample_size = table.scalar("config.sample_size")? as usize;
    let mut names = Vec::new();
    for (n, _) in table.entries() {
        if let Some(m) = n.strip_prefix("vlad.").and_then(|r| r.strip_suffix(".W")) {
            names.push(m.to_string());
        }
    }
    ensure!(!names.is_empty(), Error::Checkpoint("no VLAD tensors".into()));

    let mut modalities = Vec::new();
    let mut vlad = Vec::new();
    for name in names {
        let w = table.require(&format!("vlad.{name}.W"))?.clone();
        let b = table.require(&format!("vlad.{name}.b"))?.clone();
        let c = table.require(&format!("vlad.{name}.C"))?.clone();
        ensure!(
            w.dims().len() == 2 && c.dims() == w.dims() && b.dims() == [w.dims()[1]],
            Error::Checkpoint(format!("inconsistent VLAD shapes for {name}"))
        );
        modalities.push(ModelModality {
            name,
            dim: w.dims()[0],
            clusters: w.dims()[1],
        });
        let mut p = VladParams::zeros(w.dims()[0], w.dims()[1]);
        p.assign_weights = w;
        p.assign_bias = b;
        p.centers = c;
        vlad.push(p);
    }

    let fc = table.require("head.fc.W")?;
    let moe = table.require("head.moe.U")?;
    ensure!(
        fc.dims().len() == 2 && moe.dims().len() == 3,
        Error::Checkpoint("bad head tensor rank".into())
    );
    let mut head = HeadParams::zeros(fc.dims()[0], fc.dims()[1], moe.dims()[1], moe.dims()[0]);
    for (name, slot) in head.tensors_mut() {
        let t = table.require(&format!("head.{name}"))?;
        ensure!(
            t.dims() == slot.dims(),
            Error::Checkpoint(format!("head.{name} has dims {:?}, expected {:?}", t.dims(), slot.dims()))
        );
        *slot = t.clone();
    }
    let expected: usize = modalities.iter().map(|m| m.dim * m.clusters).sum();
    ensure!(
        expected == head.input_len(),
        Error::Checkpoint(format!("head input {} does not match VLAD output {expected}", head.input_len()))
    );

    Ok(AggregationModel {
        modalities,
        vlad,
        head,
        sample_size,
    })
}

/// Optimizer state stored alongside `model`, if present.
pub fn optimizer_from_table(table: &TensorTable, model: &AggregationModel, config: AdamConfig) -> Result<Option<OptimizerState>> {
    let Some(step) = table.get("adam.step") else {
        return Ok(None);
    };
    let mut state = OptimizerState::new(model, config);
    state.step = step.data()[0] as u64;
    for (i, (name, t)) in model.named_tensors().into_iter().enumerate() {
        for (prefix, slot) in [("m", &mut state.first_moment[i]), ("v", &mut state.second_moment[i])] {
            let stored = table.require(&format!("adam.{prefix}.{name}"))?;
            ensure!(
                stored.dims() == t.dims(),
                Error::Checkpoint(format!("adam.{prefix}.{name} shape mismatch"))
            );
            *slot = stored.clone();
        }
    }
    Ok(Some(state))
}

pub fn save_model(model: &AggregationModel, optimizer: Option<&OptimizerState>, path: &Path) -> Result<()> {
    model_to_table(model, optimizer).save(path)
}

pub fn load_model(path: &Path) -> Result<AggregationModel> {
    model_from_table(&TensorTable::load(path)?)
}

pub fn preprocess_to_table(model: &PreprocessModel) -> TensorTable {
    let mut table = TensorTable::new();
    table.push("mean", Tensor::from_vec(&[model.mean.len()], model.mean.clone()).expect("length matches"));
    table.push(
        "basis",
        Tensor::from_vec(&[model.basis.rows(), model.basis.cols()], model.basis.data().to_vec()).expect("length matches"),
    );
    table.push(
        "eigenvalues",
        Tensor::from_vec(&[model.eigenvalues.len()], model.eigenvalues.clone()).expect("length matches"),
    );
    table.push("whiten_eps", Tensor::scalar(model.whiten_eps));
    table.push("clip_bound", Tensor::scalar(model.quantizer.clip_bound()));
    table.push("levels", Tensor::scalar(model.quantizer.levels() as f64));
    table
}

pub fn preprocess_from_table(table: &TensorTable) -> Result<PreprocessModel> {
    let mean = table.require("mean")?.data().to_vec();
    let basis = table.require("basis")?;
    ensure!(
        basis.dims().len() == 2 && basis.dims()[0] == mean.len(),
        Error::Checkpoint("basis shape does not match mean".into())
    );
    let eigenvalues = table.require("eigenvalues")?.data().to_vec();
    ensure!(
        eigenvalues.len() == basis.dims()[1],
        Error::Checkpoint("eigenvalue count does not match basis".into())
    );
    Ok(PreprocessModel {
        mean,
        basis: Matrix::from_vec(basis.dims()[0], basis.dims()[1], basis.data().to_vec())?,
        eigenvalues,
        whiten_eps: table.scalar("whiten_eps")?,
        quantizer: Quantizer::new(table.scalar("clip_bound")?, table.scalar("levels")? as u32)?,
    })
}

/// Preprocessing models for several modalities, tensor names prefixed by
/// `<modality>.`.
pub fn preprocess_set_to_table(models: &BTreeMap<String, PreprocessModel>) -> TensorTable {
    let mut table = TensorTable::new();
    for (name, model) in models {
        for (tensor, value) in preprocess_to_table(model).entries {
            table.push(format!("{name}.{tensor}"), value);
        }
    }
    table
}

pub fn preprocess_set_from_table(table: &TensorTable) -> Result<BTreeMap<String, PreprocessModel>> {
    let mut grouped: BTreeMap<String, TensorTable> = BTreeMap::new();
    for (name, tensor) in &table.entries {
        let (modality, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor name {name:?}")))?;
        grouped.entry(modality.to_string()).or_default().push(field, tensor.clone());
    }
    ensure!(!grouped.is_empty(), Error::Checkpoint("no preprocessing models in table".into()));
    grouped.iter().map(|(m, t)| Ok((m.clone(), preprocess_from_table(t)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use crate::preprocess::{fit_pca, PcaOptions};
    use crate::rng::SeededRng;

    fn model() -> AggregationModel {
        let shape = ModelShape {
            modalities: vec![
                ModelModality { name: "visual".into(), dim: 4, clusters: 3 },
                ModelModality { name: "audio".into(), dim: 2, clusters: 2 },
            ],
            hidden: 5,
            experts: 2,
            classes: 3,
        };
        AggregationModel::init(&shape, 7, 11).unwrap()
    }

    #[test]
    fn preprocess_set_round_trip() {
        let mut rng = SeededRng::new(3);
        let samples = Matrix::from_vec(40, 3, (0..120).map(|_| rng.normal()).collect()).unwrap();
        let mut models = BTreeMap::new();
        models.insert("rgb".to_string(), fit_pca(&samples, 2, PcaOptions::default()).unwrap());
        models.insert("audio.v2".to_string(), fit_pca(&samples, 3, PcaOptions::default()).unwrap());
        let table = preprocess_set_to_table(&models);
        let back = preprocess_set_from_table(&TensorTable::from_bytes(&table.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.keys().collect::<Vec<_>>(), models.keys().collect::<Vec<_>>());
        for (name, m) in &back {
            assert_eq!(m.basis.cols(), models[name].basis.cols());
            for (a, b) in m.basis.data().iter().zip(models[name].basis.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = model();
        let table = model_to_table(&m, None);
        let back = model_from_table(&TensorTable::from_bytes(&table.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let m = model();
        let opt = OptimizerState::new(&m, AdamConfig::default());
        save_model(&m, Some(&opt), &a).unwrap();
        let table = TensorTable::load(&a).unwrap();
        let loaded = model_from_table(&table).unwrap();
        let loaded_opt = optimizer_from_table(&table, &loaded, AdamConfig::default()).unwrap().unwrap();
        save_model(&loaded, Some(&loaded_opt), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_bytes_follow_layout() {
        let mut t = TensorTable::new();
        t.push("x", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"MMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[16..18].try_into().unwrap()), 1);
        assert_eq!(bytes[18], b'x');
        assert_eq!(bytes[19], 0);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = model_to_table(&model(), None).to_bytes().unwrap();
        assert!(TensorTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorTable::from_bytes(&bad).is_err());
        let mut table = TensorTable::new();
        table.push("config.sample_size", Tensor::scalar(5.0));
        assert!(model_from_table(&table).is_err());
    }

    #[test]
    fn preprocess_model_round_trips_through_f32() {
        let mut rng = SeededRng::new(2);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let pm = fit_pca(&Matrix::from_rows(&rows).unwrap(), 2, PcaOptions::default()).unwrap();
        let back = preprocess_from_table(&TensorTable::from_bytes(&preprocess_to_table(&pm).to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.quantizer, pm.quantizer);
        assert_eq!(back.basis.cols(), 2);
        for (a, b) in back.basis.data().iter().zip(pm.basis.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
