//! Deterministic synthetic multi-modal datasets with class identity encoded
//! in chosen modalities.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datastore::{write_features, FeatureSequence, LabelVocabulary, Manifest, ModalitySpec, Storage, VideoRecord};
use crate::error::{ensure, Error, Result};
use crate::preprocess::{Quantizer, DEFAULT_CLIP_BOUND, DEFAULT_LEVELS};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Matrix;

const CLASS_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const VIDEO_STREAM: u64 = 3;
const PROJECTION_STREAM: u64 = 4;

/// How a modality's stream relates to the latent frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    /// Each row is one latent frame.
    #[default]
    Frames,
    /// Each row mixes a window of consecutive latent frames through fixed
    /// random projections, like a feature computed over a short clip.
    Windowed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthModality {
    pub name: String,
    pub dim: usize,
    pub fps: f64,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    /// Classes whose signal this modality carries.
    #[serde(default)]
    pub informative: Vec<usize>,
    #[serde(default)]
    pub kind: StreamKind,
}

fn default_clusters() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    pub duration_s: f64,
    pub noise_scale: f64,
    /// Norm of each class (or motif) signal vector.
    pub signal_scale: f64,
    /// Fraction of frames carrying signal in an informative modality.
    pub signal_fraction: f64,
    /// Encode classes as ordered motifs whose frames are shared by every class.
    pub temporal: bool,
    pub motif_length: usize,
    /// Per class, this fraction of videos goes to the "val" split.
    pub val_fraction: f64,
    pub solvable: bool,
    pub quantize: bool,
    pub seed: u64,
    pub modalities: Vec<SynthModality>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            videos_per_class: 50,
            duration_s: 120.0,
            noise_scale: 1.0,
            signal_scale: 3.0,
            signal_fraction: 0.2,
            temporal: false,
            motif_length: 4,
            val_fraction: 0.2,
            solvable: true,
            quantize: false,
            seed: 1,
            modalities: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::parse("synth spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::InvalidArgument(format!("synth spec: {m}"));
        ensure!(self.classes >= 1, bad("classes must be >= 1".into()));
        ensure!(self.videos_per_class >= 1, bad("videos_per_class must be >= 1".into()));
        ensure!(self.duration_s > 0.0 && self.duration_s.is_finite(), bad("duration_s must be > 0".into()));
        ensure!(self.noise_scale >= 0.0 && self.signal_scale >= 0.0, bad("scales must be >= 0".into()));
        ensure!(
            self.signal_fraction > 0.0 && self.signal_fraction <= 1.0,
            bad("signal_fraction must lie in (0, 1]".into())
        );
        ensure!((0.0..1.0).contains(&self.val_fraction), bad("val_fraction must lie in [0, 1)".into()));
        ensure!(!self.modalities.is_empty(), bad("at least one modality is required".into()));
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            ensure!(names.insert(m.name.as_str()), bad(format!("duplicate modality {:?}", m.name)));
            ModalitySpec { name: m.name.clone(), dim: m.dim, fps: m.fps, clusters: m.clusters }
                .validate()
                .map_err(|e| bad(e.to_string()))?;
            ensure!(
                m.informative.iter().all(|&c| c < self.classes),
                bad(format!("modality {:?} names a class out of range", m.name))
            );
            ensure!(
                m.kind == StreamKind::Frames || self.temporal,
                bad(format!("modality {:?}: windowed streams need temporal = true", m.name))
            );
        }
        if self.temporal {
            ensure!(self.motif_length >= 2, bad("motif_length must be >= 2".into()));
            let orders: usize = (1..=self.motif_length.min(20)).product();
            ensure!(
                self.classes <= orders,
                bad(format!("{} classes need more than {} motif orders", self.classes, orders))
            );
        }
        if self.solvable {
            for c in 0..self.classes {
                ensure!(
                    self.modalities.iter().any(|m| m.informative.contains(&c)),
                    bad(format!("class {c} is not encoded in any modality"))
                );
            }
        }
        Ok(())
    }

    fn rows(&self, fps: f64) -> usize {
        // Rows i with i / fps < duration.
        let mut n = (self.duration_s * fps).ceil() as usize;
        while n > 0 && (n - 1) as f64 / fps >= self.duration_s {
            n -= 1;
        }
        n.max(1)
    }
}

fn random_direction(dim: usize, norm: f64, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-6 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

/// Fixed per-modality generation state.
struct ModalityPlan {
    /// Frame mode: one mean vector per class.
    class_means: Vec<Vec<f64>>,
    /// Temporal mode: shared motif frames and one order per class.
    motif: Vec<Vec<f64>>,
    orders: Vec<Vec<usize>>,
    /// Windowed kind: one `dim × dim` projection per window offset.
    projections: Vec<Matrix>,
}

fn plan_modality(spec: &SynthSpec, m: usize) -> ModalityPlan {
    let md = &spec.modalities[m];
    let mut rng = SeededRng::new(derive_seed(spec.seed, &[CLASS_STREAM, m as u64]));
    let class_means = (0..spec.classes).map(|_| random_direction(md.dim, spec.signal_scale, &mut rng)).collect();
    let motif = (0..spec.motif_length).map(|_| random_direction(md.dim, spec.signal_scale, &mut rng)).collect();

    let mut orders: Vec<Vec<usize>> = Vec::new();
    if spec.temporal {
        let mut rng = SeededRng::new(derive_seed(spec.seed, &[ORDER_STREAM, m as u64]));
        while orders.len() < spec.classes {
            let mut p: Vec<usize> = (0..spec.motif_length).collect();
            rng.shuffle(&mut p);
            if !orders.contains(&p) {
                orders.push(p);
            }
        }
    }

    let mut projections = Vec::new();
    if md.kind == StreamKind::Windowed {
        let mut rng = SeededRng::new(derive_seed(spec.seed, &[PROJECTION_STREAM, m as u64]));
        let std = 1.0 / ((md.dim * spec.motif_length) as f64).sqrt();
        for _ in 0..spec.motif_length {
            let data = (0..md.dim * md.dim).map(|_| std * rng.normal()).collect();
            projections.push(Matrix::from_vec(md.dim, md.dim, data).expect("square projection"));
        }
    }
    ModalityPlan { class_means, motif, orders, projections }
}

/// Noise frames with the signal of each class in `classes` added.
fn latent_frames(spec: &SynthSpec, plan: &ModalityPlan, dim: usize, rows: usize, classes: &[usize], rng: &mut SeededRng) -> Matrix {
    let data = (0..rows * dim).map(|_| spec.noise_scale * rng.normal()).collect();
    let mut x = Matrix::from_vec(rows, dim, data).expect("rows × dim");
    if !spec.temporal {
        let n = ((spec.signal_fraction * rows as f64).round() as usize).clamp(1, rows);
        for &c in classes {
            let mut idx: Vec<usize> = (0..rows).collect();
            rng.shuffle(&mut idx);
            for &i in &idx[..n] {
                for (v, mu) in x.row_mut(i).iter_mut().zip(&plan.class_means[c]) {
                    *v += mu;
                }
            }
        }
        return x;
    }
    // Motif occurrences fill aligned, non-overlapping slots of L frames.
    let l = spec.motif_length;
    let mut slots: Vec<usize> = (0..rows / l).collect();
    rng.shuffle(&mut slots);
    let n = ((spec.signal_fraction * rows as f64 / l as f64).round() as usize).max(1);
    for (&c, chunk) in classes.iter().zip(slots.chunks(n)) {
        for &s in chunk {
            for w in 0..l {
                let part = &plan.motif[plan.orders[c][w]];
                for (v, mu) in x.row_mut(s * l + w).iter_mut().zip(part) {
                    *v += mu;
                }
            }
        }
    }
    x
}

fn windowed(latent: &Matrix, projections: &[Matrix], rows: usize) -> Matrix {
    let d = latent.cols();
    let mut out = Matrix::zeros(rows, d);
    for i in 0..rows {
        for (w, p) in projections.iter().enumerate() {
            let f = latent.row(i + w);
            let o = out.row_mut(i);
            for (r, ov) in o.iter_mut().enumerate() {
                *ov += p.row(r).iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

/// Writes feature files under `out_dir/features` and the manifest at
/// `out_dir/manifest.json`, returning the manifest path.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;

    let plans: Vec<ModalityPlan> = (0..spec.modalities.len()).map(|m| plan_modality(spec, m)).collect();

    let total = spec.classes * spec.videos_per_class;
    let mut order: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, spec.videos_per_class)).collect();
    SeededRng::new(derive_seed(spec.seed, &[VIDEO_STREAM])).shuffle(&mut order);
    let val_per_class = (spec.val_fraction * spec.videos_per_class as f64).round() as usize;
    let mut seen = vec![0usize; spec.classes];

    let storage = if spec.quantize {
        Storage::Quantized(Quantizer::new(DEFAULT_CLIP_BOUND, DEFAULT_LEVELS)?)
    } else {
        Storage::Raw
    };
    let mut videos = Vec::with_capacity(total);
    for (v, &class) in order.iter().enumerate() {
        let id = format!("vid{v:05}");
        let split = if seen[class] < val_per_class { "val" } else { "train" };
        seen[class] += 1;
        let mut features = BTreeMap::new();
        for (m, md) in spec.modalities.iter().enumerate() {
            let mut rng = SeededRng::new(derive_seed(spec.seed, &[VIDEO_STREAM, v as u64, m as u64]));
            let rows = spec.rows(md.fps);
            let informative: Vec<usize> = md.informative.iter().copied().filter(|&c| c == class).collect();
            let data = match md.kind {
                StreamKind::Frames => latent_frames(spec, &plans[m], md.dim, rows, &informative, &mut rng),
                StreamKind::Windowed if !informative.is_empty() => {
                    let latent = latent_frames(spec, &plans[m], md.dim, rows + spec.motif_length - 1, &informative, &mut rng);
                    windowed(&latent, &plans[m].projections, rows)
                }
                StreamKind::Windowed => latent_frames(spec, &plans[m], md.dim, rows, &[], &mut rng),
            };
            let path = feature_dir.join(format!("{id}.{}.mmf", md.name));
            write_features(&FeatureSequence::new(md.name.clone(), md.fps, data)?, &path, storage)?;
            features.insert(md.name.clone(), path);
        }
        videos.push(VideoRecord {
            id,
            duration_s: spec.duration_s,
            labels: BTreeSet::from([class]),
            features,
            split: Some(split.to_string()),
        });
    }
    let manifest = Manifest {
        modalities: spec
            .modalities
            .iter()
            .map(|m| ModalitySpec { name: m.name.clone(), dim: m.dim, fps: m.fps, clusters: m.clusters })
            .collect(),
        videos,
        vocabulary: LabelVocabulary::new((0..spec.classes).map(|c| format!("class{c}")).collect()),
        subsets: BTreeMap::new(),
    };
    manifest.validate(true)?;
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{load_manifest, load_video, read_features};

    fn modality(name: &str, informative: Vec<usize>) -> SynthModality {
        SynthModality { name: name.into(), dim: 6, fps: 1.0, clusters: 4, informative, kind: StreamKind::Frames }
    }

    fn small(classes: usize, per_class: usize) -> SynthSpec {
        SynthSpec {
            classes,
            videos_per_class: per_class,
            duration_s: 40.0,
            modalities: vec![modality("a", (0..classes).collect()), modality("b", vec![])],
            ..SynthSpec::default()
        }
    }

    #[test]
    fn structure_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate(&small(2, 20), dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.videos.len(), 40);
        assert_eq!(m.num_classes(), 2);
        for c in 0..2 {
            assert_eq!(m.videos.iter().filter(|v| v.labels.contains(&c)).count(), 20);
            assert_eq!(m.videos.iter().filter(|v| v.labels.contains(&c) && v.split.as_deref() == Some("val")).count(), 4);
        }
        let v = load_video(&m, &m.videos[0]).unwrap();
        assert_eq!(v.streams[0].count(), 40);
    }

    #[test]
    fn byte_identical_across_runs() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small(3, 4);
        generate(&spec, a.path()).unwrap();
        generate(&spec, b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path().join("features")).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 24);
        for n in names {
            assert_eq!(
                std::fs::read(a.path().join("features").join(&n)).unwrap(),
                std::fs::read(b.path().join("features").join(&n)).unwrap()
            );
        }
        let other = tempfile::tempdir().unwrap();
        generate(&SynthSpec { seed: 2, ..spec }, other.path()).unwrap();
        assert_ne!(
            std::fs::read(a.path().join("features/vid00000.a.mmf")).unwrap(),
            std::fs::read(other.path().join("features/vid00000.a.mmf")).unwrap()
        );
    }

    #[test]
    fn generated_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate(&SynthSpec { quantize: true, ..small(2, 2) }, dir.path()).unwrap();
        let m = load_manifest(&path).unwrap();
        for v in &m.videos {
            for p in v.features.values() {
                let seq = read_features(p).unwrap();
                let copy = dir.path().join("copy.mmf");
                write_features(&seq, &copy, Storage::Quantized(Quantizer::new(2.5, 256).unwrap())).unwrap();
                assert_eq!(std::fs::read(p).unwrap(), std::fs::read(&copy).unwrap());
            }
        }
    }

    fn mean_pooled(m: &Manifest, modality: usize) -> Vec<(usize, Vec<f64>)> {
        m.videos
            .iter()
            .map(|rec| {
                let v = load_video(m, rec).unwrap();
                let s = &v.streams[modality];
                let mut mean = vec![0.0; s.dim()];
                for i in 0..s.count() {
                    for (a, b) in mean.iter_mut().zip(s.data.row(i)) {
                        *a += b / s.count() as f64;
                    }
                }
                (*rec.labels.iter().next().unwrap(), mean)
            })
            .collect()
    }

    /// Leave-one-out nearest-class-mean accuracy.
    fn ncm_accuracy(data: &[(usize, Vec<f64>)], classes: usize) -> f64 {
        let mut correct = 0;
        for (i, (label, x)) in data.iter().enumerate() {
            let best = (0..classes)
                .map(|c| {
                    let members: Vec<&Vec<f64>> = data.iter().enumerate().filter(|(j, (l, _))| *j != i && *l == c).map(|(_, (_, v))| v).collect();
                    let dist: f64 = (0..x.len())
                        .map(|k| {
                            let mu = members.iter().map(|v| v[k]).sum::<f64>() / members.len() as f64;
                            (x[k] - mu).powi(2)
                        })
                        .sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += (best == *label) as usize;
        }
        correct as f64 / data.len() as f64
    }

    #[test]
    fn linear_probe_separates_informative_modality_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(4, 15);
        let m = load_manifest(&generate(&spec, dir.path()).unwrap()).unwrap();
        assert!(ncm_accuracy(&mean_pooled(&m, 0), 4) >= 0.9);
        assert!(ncm_accuracy(&mean_pooled(&m, 1), 4) <= 0.25 + 0.1);
    }

    #[test]
    fn temporal_control_frames_share_marginal() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            temporal: true,
            noise_scale: 0.0,
            modalities: vec![modality("raw", vec![0, 1, 2, 3]), SynthModality { kind: StreamKind::Windowed, ..modality("win", vec![0, 1, 2, 3]) }],
            ..small(4, 6)
        };
        let m = load_manifest(&generate(&spec, dir.path()).unwrap()).unwrap();
        // Without noise, every class shows the same multiset of raw frames.
        let mut per_class: Vec<Option<Vec<Vec<u64>>>> = vec![None; 4];
        for rec in &m.videos {
            let v = load_video(&m, rec).unwrap();
            let mut rows: Vec<Vec<u64>> = (0..v.streams[0].count())
                .map(|i| v.streams[0].data.row(i).iter().map(|x| (x + 0.0).to_bits()).collect())
                .collect();
            rows.sort();
            let c = *rec.labels.iter().next().unwrap();
            match &per_class[c] {
                Some(prev) => assert_eq!(prev, &rows),
                None => per_class[c] = Some(rows),
            }
        }
        assert!(per_class.windows(2).all(|w| w[0] == w[1]));
        let pooled = mean_pooled(&m, 0);
        assert!(ncm_accuracy(&pooled, 4) <= 0.25 + 0.1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small(2, 2);
        s.modalities[0].informative = vec![0];
        assert!(s.validate().is_err());
        assert!(SynthSpec { solvable: false, ..s.clone() }.validate().is_ok());
        let mut w = small(2, 2);
        w.modalities[0].kind = StreamKind::Windowed;
        assert!(w.validate().is_err());
        assert!(SynthSpec { temporal: true, motif_length: 2, ..small(3, 2) }.validate().is_err());
        assert!(SynthSpec { modalities: vec![], ..small(2, 2) }.validate().is_err());
        assert!(SynthSpec::parse("classes = 2\nbogus = 1").is_err());
    }

    #[test]
    fn parses_text_spec() {
        let text = r#"
classes = 2
videos_per_class = 3
duration_s = 30.0
seed = 9

[[modalities]]
name = "rgb"
dim = 4
fps = 1.0
informative = [0, 1]

[[modalities]]
name = "audio"
dim = 2
fps = 2.0
clusters = 3
"#;
        let spec = SynthSpec::parse(text).unwrap();
        assert_eq!(spec.modalities[0].clusters, 8);
        assert_eq!(spec.modalities[1].informative, Vec::<usize>::new());
        assert_eq!(spec.signal_fraction, 0.2);
        let dir = tempfile::tempdir().unwrap();
        assert!(generate(&spec, &dir.path().join("nested/out")).is_ok());
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        assert!(generate(&small(2, 2), &file.join("sub")).is_err());
    }
}
