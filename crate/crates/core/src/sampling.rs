//! Segmentation of untrimmed videos into 10-minute splits, random frame
//! sampling within a split, and repeated-test averaging.

use std::ops::Range;

use crate::datastore::{FeatureSequence, VideoFeatures};
use crate::error::{ensure, Error, Result};
use crate::eval::{stable_mean, Prediction, PredictionSet};
use crate::model::AggregationModel;
use crate::rng::{derive_seed, hash_str, SeededRng};
use crate::tensor::Matrix;

pub const SEGMENT_SECONDS: f64 = 600.0;
pub const DEFAULT_SAMPLE_SIZE: usize = 50;
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_SEED: u64 = 42;

/// A ≤ 600 s window of one video with each modality's row range.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: String,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// Rows of each modality (manifest order) whose timestamp lies in `[start_s, end_s)`.
    pub ranges: Vec<Range<usize>>,
}

impl Segment {
    /// True when every modality has at least one row.
    pub fn is_usable(&self) -> bool {
        self.ranges.iter().all(|r| !r.is_empty())
    }
}

/// `[start, end)` boundaries of the 600 s splits covering `[0, duration)`.
pub fn segment_bounds(duration_s: f64) -> Vec<(f64, f64)> {
    if !(duration_s > 0.0) {
        return Vec::new();
    }
    let count = (duration_s / SEGMENT_SECONDS).ceil().max(1.0) as usize;
    (0..count)
        .map(|i| {
            let start = i as f64 * SEGMENT_SECONDS;
            (start, (start + SEGMENT_SECONDS).min(duration_s))
        })
        .collect()
}

/// Smallest row index whose timestamp `i / fps` is at least `t`.
fn first_row_at_or_after(t: f64, fps: f64) -> usize {
    let mut i = (t * fps).ceil().max(0.0) as usize;
    while i > 0 && (i - 1) as f64 / fps >= t {
        i -= 1;
    }
    while (i as f64 / fps) < t {
        i += 1;
    }
    i
}

pub fn row_range(seq: &FeatureSequence, start_s: f64, end_s: f64) -> Range<usize> {
    let lo = first_row_at_or_after(start_s, seq.fps).min(seq.count());
    let hi = first_row_at_or_after(end_s, seq.fps).min(seq.count());
    lo..hi.max(lo)
}

pub fn segment_video(video: &VideoFeatures) -> Vec<Segment> {
    segment_bounds(video.duration_s)
        .into_iter()
        .enumerate()
        .map(|(index, (start_s, end_s))| Segment {
            video_id: video.video_id.clone(),
            index,
            start_s,
            end_s,
            ranges: video.streams.iter().map(|s| row_range(s, start_s, end_s)).collect(),
        })
        .collect()
}

/// Draws `sample_size` row indices from `range`, returned ascending.
///
/// Without replacement when the range holds at least `sample_size` rows,
/// otherwise with replacement.
pub fn sample_frames(range: Range<usize>, sample_size: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    let available = range.len();
    ensure!(available > 0, Error::InvalidArgument("cannot sample from an empty segment".into()));
    ensure!(sample_size > 0, Error::InvalidArgument("sample size must be positive".into()));
    let mut picked: Vec<usize> = if available >= sample_size {
        let mut pool: Vec<usize> = range.clone().collect();
        for i in 0..sample_size {
            let j = i + rng.below_usize(available - i);
            pool.swap(i, j);
        }
        pool.truncate(sample_size);
        pool
    } else {
        (0..sample_size)
            .map(|_| range.start + rng.below_usize(available))
            .collect()
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Seed of one (video, segment, epoch) sampling stream.
pub fn segment_seed(base_seed: u64, video_id: &str, segment_index: usize, epoch: u64) -> u64 {
    derive_seed(base_seed, &[hash_str(video_id), segment_index as u64, epoch])
}

/// Fixed-size per-modality frame samples of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInput {
    pub frames: Vec<Matrix>,
    pub indices: Vec<Vec<usize>>,
}

/// Samples every modality of `segment`; modality `m` draws from stream
/// `derive_seed(seed, [m])`.
pub fn sample_segment(video: &VideoFeatures, segment: &Segment, sample_size: usize, seed: u64) -> Result<SampledInput> {
    let mut frames = Vec::with_capacity(video.streams.len());
    let mut indices = Vec::with_capacity(video.streams.len());
    for (m, (stream, range)) in video.streams.iter().zip(&segment.ranges).enumerate() {
        let mut rng = SeededRng::new(derive_seed(seed, &[m as u64]));
        let idx = sample_frames(range.clone(), sample_size, &mut rng).map_err(|_| {
            Error::InvalidArgument(format!(
                "video {} segment {}: modality {} has no features",
                video.video_id, segment.index, stream.modality
            ))
        })?;
        frames.push(stream.data.select_rows(&idx));
        indices.push(idx);
    }
    Ok(SampledInput { frames, indices })
}

pub fn usable_segments(video: &VideoFeatures) -> Result<Vec<Segment>> {
    let segments: Vec<Segment> = segment_video(video).into_iter().filter(Segment::is_usable).collect();
    ensure!(
        !segments.is_empty(),
        Error::InvalidArgument(format!("video {} has no segment with features for every modality", video.video_id))
    );
    Ok(segments)
}

/// One seeded forward pass over every usable segment, averaged into a
/// video-level probability vector. `edit` may rewrite the sampled frames
/// (used for zero-pad ablation) before the forward pass.
pub fn single_pass_with<F>(model: &AggregationModel, video: &VideoFeatures, seed: u64, mut edit: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut SampledInput),
{
    let segments = usable_segments(video)?;
    let mut outputs = Vec::with_capacity(segments.len());
    for seg in &segments {
        let mut input = sample_segment(video, seg, model.sample_size, segment_seed(seed, &video.video_id, seg.index, 0))?;
        edit(&mut input);
        outputs.push(model.forward(&input.frames)?);
    }
    Ok(mean_vectors(&outputs))
}

pub fn single_pass(model: &AggregationModel, video: &VideoFeatures, seed: u64) -> Result<Vec<f64>> {
    single_pass_with(model, video, seed, |_| {})
}

/// Mean of `repeats` single passes seeded `base_seed .. base_seed + repeats`.
pub fn repeated_eval_average(model: &AggregationModel, video: &VideoFeatures, repeats: usize, base_seed: u64) -> Result<Vec<f64>> {
    ensure!(repeats >= 1, Error::InvalidArgument("repeats must be >= 1".into()));
    let passes = (0..repeats as u64)
        .map(|r| single_pass(model, video, base_seed.wrapping_add(r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_vectors(&passes))
}

/// Repeated-test-averaged predictions for every video.
pub fn predict_videos(model: &AggregationModel, videos: &[VideoFeatures], repeats: usize, base_seed: u64) -> Result<PredictionSet> {
    let predictions = videos
        .iter()
        .map(|v| {
            Ok(Prediction {
                video_id: v.video_id.clone(),
                probs: repeated_eval_average(model, v, repeats, base_seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(model.num_classes(), predictions)
}

/// Elementwise [`stable_mean`] of equal-length vectors.
pub fn mean_vectors(vectors: &[Vec<f64>]) -> Vec<f64> {
    let len = vectors.first().map_or(0, Vec::len);
    (0..len)
        .map(|c| stable_mean(vectors.iter().map(|v| v[c])))
        .collect()
}
