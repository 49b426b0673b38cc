//! Dataset manifest, binary feature files and prediction CSV persistence.
//!
//! Feature file layout (little-endian):
//!
//! | field   | type | notes                                   |
//! |---------|------|-----------------------------------------|
//! | magic   | 4 B  | `MMF1`                                  |
//! | dtype   | u8   | 0 = f32 payload, 1 = 8-bit codes        |
//! | dim     | u32  | values per row, ≥ 1                     |
//! | fps     | f64  | feature rate                            |
//! | count   | u64  | number of rows                          |
//! | bound   | f32  | clip bound, only present when dtype = 1 |
//! | payload |      | `count × dim` values, row-major         |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::{Prediction, PredictionSet};
use crate::preprocess::Quantizer;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMF1";
const DTYPE_RAW: u8 = 0;
const DTYPE_QUANTIZED: u8 = 1;

/// Per-modality metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub fps: f64,
    pub clusters: usize,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.name.is_empty(),
            Error::Manifest("modality name is empty".into())
        );
        ensure!(
            self.dim >= 1,
            Error::Manifest(format!("modality {}: dim must be >= 1", self.name))
        );
        ensure!(
            self.clusters >= 1,
            Error::Manifest(format!("modality {}: clusters must be >= 1", self.name))
        );
        ensure!(
            self.fps.is_finite() && self.fps > 0.0,
            Error::Manifest(format!("modality {}: fps must be positive", self.name))
        );
        Ok(())
    }
}

/// One video's features for one modality. Row `i` has timestamp `i / fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: String,
    pub fps: f64,
    pub data: Matrix,
}

impl FeatureSequence {
    pub fn new(modality: impl Into<String>, fps: f64, data: Matrix) -> Result<Self> {
        ensure!(
            fps.is_finite() && fps > 0.0,
            Error::InvalidArgument(format!("fps must be positive, got {fps}"))
        );
        ensure!(
            data.cols() >= 1,
            Error::InvalidArgument("feature dim must be >= 1".into())
        );
        ensure!(
            data.data().iter().all(|v| v.is_finite()),
            Error::InvalidArgument("feature values must be finite".into())
        );
        Ok(Self {
            modality: modality.into(),
            fps,
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn timestamp(&self, row: usize) -> f64 {
        row as f64 / self.fps
    }
}

/// How `write_features` encodes the payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Storage {
    /// 32-bit floats; values are narrowed from `f64`.
    Raw,
    /// Clipped and quantized to 256 levels.
    Quantized(Quantizer),
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bad = |message: String| Error::FeatureFormat {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    let mut cursor = ByteCursor::new(&bytes);
    let magic = cursor.take(4).ok_or_else(|| bad("truncated header".into()))?;
    ensure!(magic == FEATURE_MAGIC, bad(format!("bad magic {magic:?}")));
    let dtype = cursor.u8().ok_or_else(|| bad("truncated header".into()))?;
    let dim = cursor.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
    let fps = cursor.f64().ok_or_else(|| bad("truncated header".into()))?;
    let count = cursor.u64().ok_or_else(|| bad("truncated header".into()))? as usize;
    ensure!(dim >= 1, bad("dim is 0".into()));
    ensure!(fps.is_finite() && fps > 0.0, bad(format!("invalid fps {fps}")));

    let values = count
        .checked_mul(dim)
        .ok_or_else(|| bad("row count overflows".into()))?;
    let data = match dtype {
        DTYPE_RAW => {
            let payload = cursor
                .take(values * 4)
                .ok_or_else(|| bad(format!("truncated payload: expected {values} f32 values")))?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            ensure!(
                data.iter().all(|v| v.is_finite()),
                bad("non-finite value in payload".into())
            );
            data
        }
        DTYPE_QUANTIZED => {
            let bound = cursor.f32().ok_or_else(|| bad("truncated header".into()))? as f64;
            let quantizer = Quantizer::new(bound, 256).map_err(|e| bad(e.to_string()))?;
            let payload = cursor
                .take(values)
                .ok_or_else(|| bad(format!("truncated payload: expected {values} codes")))?;
            quantizer.dequantize(payload)?
        }
        other => return Err(bad(format!("unknown dtype {other}"))),
    };
    ensure!(
        cursor.remaining() == 0,
        bad(format!("{} trailing bytes", cursor.remaining()))
    );

    Ok(FeatureSequence {
        modality: String::new(),
        fps,
        data: Matrix::from_vec(count, dim, data)?,
    })
}

pub fn write_features(seq: &FeatureSequence, path: &Path, storage: Storage) -> Result<()> {
    let mut out = Vec::with_capacity(32 + seq.data.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    let dim = u32::try_from(seq.dim())
        .map_err(|_| Error::InvalidArgument("feature dim exceeds u32".into()))?;
    match storage {
        Storage::Raw => {
            out.push(DTYPE_RAW);
            out.extend_from_slice(&dim.to_le_bytes());
            out.extend_from_slice(&seq.fps.to_le_bytes());
            out.extend_from_slice(&(seq.count() as u64).to_le_bytes());
            for v in seq.data.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Storage::Quantized(q) => {
            ensure!(
                q.levels() == 256,
                Error::InvalidArgument("feature files store 256-level codes only".into())
            );
            out.push(DTYPE_QUANTIZED);
            out.extend_from_slice(&dim.to_le_bytes());
            out.extend_from_slice(&seq.fps.to_le_bytes());
            out.extend_from_slice(&(seq.count() as u64).to_le_bytes());
            // The bound is stored as f32; quantize against the same value the reader sees.
            let stored = Quantizer::new(q.clip_bound() as f32 as f64, 256)?;
            out.extend_from_slice(&(stored.clip_bound() as f32).to_le_bytes());
            out.extend(stored.quantize(seq.data.data()));
        }
    }
    write_bytes(path, &out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.array::<1>().map(|a| a[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

/// A labelled (or unlabelled test) video entry.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration_s: f64,
    pub labels: BTreeSet<usize>,
    /// Modality name to resolved feature-file path.
    pub features: BTreeMap<String, PathBuf>,
    pub split: Option<String>,
}

impl VideoRecord {
    pub fn is_test(&self) -> bool {
        self.split.as_deref() == Some("test")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i, n.as_str()))
    }
}

/// A fully validated dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub modalities: Vec<ModalitySpec>,
    pub videos: Vec<VideoRecord>,
    pub vocabulary: LabelVocabulary,
    /// Named class subsets (e.g. food classes) for subset mAP.
    pub subsets: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    num_classes: usize,
    modalities: Vec<ModalitySpec>,
    videos: Vec<VideoFile>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    subsets: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VideoFile {
    id: String,
    duration_s: f64,
    labels: Vec<usize>,
    features: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Videos whose split equals `split`; `None` selects every video.
    pub fn videos_in_split<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a VideoRecord> {
        self.videos
            .iter()
            .filter(move |v| split.is_none() || v.split.as_deref() == split)
    }

    /// Ground-truth label sets keyed by video id.
    pub fn ground_truth(&self) -> BTreeMap<String, BTreeSet<usize>> {
        self.videos
            .iter()
            .map(|v| (v.id.clone(), v.labels.clone()))
            .collect()
    }

    /// Writes the manifest as JSON, storing feature paths relative to the
    /// manifest's directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new(""));
        let file = ManifestFile {
            num_classes: self.num_classes(),
            modalities: self.modalities.clone(),
            labels: self.vocabulary.names.clone(),
            subsets: self.subsets.clone(),
            videos: self
                .videos
                .iter()
                .map(|v| VideoFile {
                    id: v.id.clone(),
                    duration_s: v.duration_s,
                    labels: v.labels.iter().copied().collect(),
                    split: v.split.clone(),
                    features: v
                        .features
                        .iter()
                        .map(|(m, p)| {
                            let rel = p.strip_prefix(root).unwrap_or(p);
                            (m.clone(), rel.to_string_lossy().into_owned())
                        })
                        .collect(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::parse("manifest", e))?;
        write_bytes(path, text.as_bytes())
    }

    /// Checks every manifest invariant. `check_files` additionally requires
    /// every referenced feature file to exist.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut names = BTreeSet::new();
        for m in &self.modalities {
            m.validate()?;
            ensure!(
                names.insert(m.name.as_str()),
                Error::Manifest(format!("duplicate modality name {}", m.name))
            );
        }
        let num_classes = self.num_classes();
        ensure!(num_classes >= 1, Error::Manifest("num_classes must be >= 1".into()));
        for (name, classes) in &self.subsets {
            for &c in classes {
                ensure!(
                    c < num_classes,
                    Error::Manifest(format!("subset {name}: class {c} out of range"))
                );
            }
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            ensure!(!v.id.is_empty(), Error::Manifest("empty video id".into()));
            ensure!(
                ids.insert(v.id.as_str()),
                Error::Manifest(format!("duplicate video id {}", v.id))
            );
            ensure!(
                v.duration_s.is_finite() && v.duration_s > 0.0,
                Error::Manifest(format!("video {}: duration must be positive", v.id))
            );
            for &l in &v.labels {
                ensure!(
                    l < num_classes,
                    Error::Manifest(format!(
                        "video {}: label index {l} out of range (num_classes = {num_classes})",
                        v.id
                    ))
                );
            }
            ensure!(
                !v.labels.is_empty() || v.is_test(),
                Error::Manifest(format!("video {}: labels are empty", v.id))
            );
            for m in v.features.keys() {
                ensure!(
                    names.contains(m.as_str()),
                    Error::Manifest(format!("video {}: modality {m} is not declared", v.id))
                );
            }
            for m in &self.modalities {
                let path = v.features.get(&m.name).ok_or_else(|| {
                    Error::Manifest(format!("video {}: missing feature path for {}", v.id, m.name))
                })?;
                ensure!(
                    !check_files || path.is_file(),
                    Error::Manifest(format!(
                        "video {}: feature file {} does not exist",
                        v.id,
                        path.display()
                    ))
                );
            }
        }
        Ok(())
    }
}

/// Parses manifest JSON; relative feature paths resolve against `root`.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest> {
    let file: ManifestFile = serde_json::from_str(text).map_err(|e| Error::parse("manifest", e))?;
    ensure!(
        file.labels.len() == file.num_classes,
        Error::Manifest(format!(
            "num_classes is {} but {} label names are listed",
            file.num_classes,
            file.labels.len()
        ))
    );
    let videos = file
        .videos
        .into_iter()
        .map(|v| VideoRecord {
            id: v.id,
            duration_s: v.duration_s,
            labels: v.labels.into_iter().collect(),
            split: v.split,
            features: v
                .features
                .into_iter()
                .map(|(m, p)| (m, root.join(p)))
                .collect(),
        })
        .collect();
    Ok(Manifest {
        modalities: file.modalities,
        videos,
        vocabulary: LabelVocabulary::new(file.labels),
        subsets: file.subsets,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new(""));
    let manifest = parse_manifest(&text, root)?;
    manifest.validate(true)?;
    Ok(manifest)
}

/// All modality streams of one video, in manifest modality order.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub video_id: String,
    pub duration_s: f64,
    pub streams: Vec<FeatureSequence>,
}

/// Reads every modality of `record` and checks it against the manifest.
pub fn load_video(manifest: &Manifest, record: &VideoRecord) -> Result<VideoFeatures> {
    let mut streams = Vec::with_capacity(manifest.modalities.len());
    for spec in &manifest.modalities {
        let path = record.features.get(&spec.name).ok_or_else(|| {
            Error::Manifest(format!("video {}: missing feature path for {}", record.id, spec.name))
        })?;
        let mut seq = read_features(path)?;
        ensure!(
            seq.dim() == spec.dim,
            Error::Shape(format!(
                "{}: file dim {} does not match manifest dim {} for {}",
                path.display(),
                seq.dim(),
                spec.dim,
                spec.name
            ))
        );
        ensure!(
            seq.fps == spec.fps,
            Error::Shape(format!(
                "{}: file fps {} does not match manifest fps {} for {}",
                path.display(),
                seq.fps,
                spec.fps,
                spec.name
            ))
        );
        seq.modality = spec.name.clone();
        streams.push(seq);
    }
    Ok(VideoFeatures {
        video_id: record.id.clone(),
        duration_s: record.duration_s,
        streams,
    })
}

/// Writes `video_id,class_index,score` rows ordered by video then class.
pub fn write_predictions(preds: &PredictionSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("predictions csv", e))?;
    w.write_record(["video_id", "class_index", "score"])
        .map_err(|e| Error::parse("predictions csv", e))?;
    for p in preds.predictions() {
        for (c, score) in p.probs.iter().enumerate() {
            w.write_record([p.video_id.as_str(), &c.to_string(), &score.to_string()])
                .map_err(|e| Error::parse("predictions csv", e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse("predictions csv", e))?;
    let headers = r.headers().map_err(|e| Error::parse("predictions csv", e))?;
    ensure!(
        headers.iter().collect::<Vec<_>>() == ["video_id", "class_index", "score"],
        Error::parse("predictions csv", format!("unexpected header {headers:?}"))
    );
    let mut cells: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::parse("predictions csv", e))?;
        let id = row[0].to_string();
        let class: usize = row[1]
            .parse()
            .map_err(|e| Error::parse("predictions csv class_index", e))?;
        let score: f64 = row[2]
            .parse()
            .map_err(|e| Error::parse("predictions csv score", e))?;
        ensure!(
            (0.0..=1.0).contains(&score),
            Error::parse("predictions csv", format!("score {score} outside [0, 1]"))
        );
        ensure!(
            cells.entry(id.clone()).or_default().insert(class, score).is_none(),
            Error::parse("predictions csv", format!("duplicate row for ({id}, {class})"))
        );
    }
    let num_classes = cells
        .values()
        .flat_map(|m| m.keys())
        .max()
        .map_or(0, |m| m + 1);
    let mut predictions = Vec::with_capacity(cells.len());
    for (id, row) in cells {
        ensure!(
            row.len() == num_classes,
            Error::parse(
                "predictions csv",
                format!("video {id} has {} of {num_classes} classes", row.len())
            )
        );
        predictions.push(Prediction {
            video_id: id,
            probs: row.into_values().collect(),
        });
    }
    PredictionSet::new(num_classes, predictions)
}
