//! Non-interpolated average precision, mAP and prediction ensembling.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{ensure, Error, Result};

/// Per-class probabilities for one video.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub video_id: String,
    pub probs: Vec<f64>,
}

/// Predictions for a set of videos, kept sorted by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    num_classes: usize,
    predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(num_classes: usize, mut predictions: Vec<Prediction>) -> Result<Self> {
        predictions.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        for w in predictions.windows(2) {
            ensure!(
                w[0].video_id != w[1].video_id,
                Error::Eval(format!("duplicate prediction for video {}", w[0].video_id))
            );
        }
        for p in &predictions {
            ensure!(
                p.probs.len() == num_classes,
                Error::Eval(format!(
                    "video {} has {} scores, expected {num_classes}",
                    p.video_id,
                    p.probs.len()
                ))
            );
            ensure!(
                p.probs.iter().all(|v| (0.0..=1.0).contains(v)),
                Error::Eval(format!("video {} has a score outside [0, 1]", p.video_id))
            );
        }
        Ok(Self {
            num_classes,
            predictions,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn predictions(&self) -> &[Prediction] {
        &self.predictions
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&Prediction> {
        self.predictions
            .binary_search_by(|p| p.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.predictions[i])
    }
}

/// Non-interpolated AP of one ranking.
///
/// Scores are sorted descending with ties broken by ascending video id; AP
/// averages the precision at the rank of each positive.
pub fn average_precision(scores: &[(&str, f64)], positives: &BTreeSet<&str>) -> Result<f64> {
    ensure!(
        !positives.is_empty(),
        Error::Eval("average precision needs at least one positive".into())
    );
    let mut ranked: Vec<&(&str, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, (id, _)) in ranked.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    ensure!(
        hits == positives.len(),
        Error::Eval(format!(
            "{} positives have no score",
            positives.len() - hits
        ))
    );
    Ok(total / positives.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_index: usize,
    /// `None` when the class has no positive video.
    pub ap: Option<f64>,
    pub num_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    /// Every evaluated class in class-index order (subset only, when given).
    pub per_class: Vec<ClassAp>,
    /// Classes left out of the mean because no video is positive.
    pub excluded: Vec<usize>,
}

/// mAP over classes with at least one positive; `subset` restricts the classes.
pub fn map_eval(
    preds: &PredictionSet,
    truth: &BTreeMap<String, BTreeSet<usize>>,
    subset: Option<&[usize]>,
) -> Result<MapReport> {
    let classes: Vec<usize> = match subset {
        Some(s) => {
            let set: BTreeSet<usize> = s.iter().copied().collect();
            for &c in &set {
                ensure!(
                    c < preds.num_classes(),
                    Error::Eval(format!("subset class {c} out of range"))
                );
            }
            set.into_iter().collect()
        }
        None => (0..preds.num_classes()).collect(),
    };
    let mut labels = Vec::with_capacity(preds.len());
    for p in preds.predictions() {
        let l = truth
            .get(&p.video_id)
            .ok_or_else(|| Error::Eval(format!("no ground truth for video {}", p.video_id)))?;
        labels.push(l);
    }

    let mut per_class = Vec::with_capacity(classes.len());
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    for &c in &classes {
        let scores: Vec<(&str, f64)> = preds
            .predictions()
            .iter()
            .map(|p| (p.video_id.as_str(), p.probs[c]))
            .collect();
        let positives: BTreeSet<&str> = preds
            .predictions()
            .iter()
            .zip(&labels)
            .filter(|(_, l)| l.contains(&c))
            .map(|(p, _)| p.video_id.as_str())
            .collect();
        if positives.is_empty() {
            excluded.push(c);
            per_class.push(ClassAp {
                class_index: c,
                ap: None,
                num_positives: 0,
            });
            continue;
        }
        let ap = average_precision(&scores, &positives)?;
        sum += ap;
        evaluated += 1;
        per_class.push(ClassAp {
            class_index: c,
            ap: Some(ap),
            num_positives: positives.len(),
        });
    }
    ensure!(
        evaluated > 0,
        Error::Eval("no class has a positive video".into())
    );
    Ok(MapReport {
        map: sum / evaluated as f64,
        per_class,
        excluded,
    })
}

/// Mean of `values`, taken as offsets from the first value so that
/// identical inputs reproduce that value exactly.
pub fn stable_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut iter = values.into_iter();
    let Some(first) = iter.next() else {
        return f64::NAN;
    };
    let mut offset = 0.0;
    let mut n = 1usize;
    for v in iter {
        offset += v - first;
        n += 1;
    }
    first + offset / n as f64
}

/// Per-video, per-class mean of several prediction sets over the same videos.
pub fn ensemble_average(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Eval("ensemble needs at least one prediction set".into()))?;
    for (i, s) in sets.iter().enumerate().skip(1) {
        ensure!(
            s.num_classes() == first.num_classes(),
            Error::Eval(format!("set {i} has {} classes, expected {}", s.num_classes(), first.num_classes()))
        );
        ensure!(
            s.len() == first.len()
                && s.predictions()
                    .iter()
                    .zip(first.predictions())
                    .all(|(a, b)| a.video_id == b.video_id),
            Error::Eval(format!("set {i} covers a different set of videos"))
        );
    }
    let predictions = first
        .predictions()
        .iter()
        .enumerate()
        .map(|(v, p)| Prediction {
            video_id: p.video_id.clone(),
            probs: (0..first.num_classes())
                .map(|c| stable_mean(sets.iter().map(|s| s.predictions()[v].probs[c])).clamp(0.0, 1.0))
                .collect(),
        })
        .collect();
    PredictionSet::new(first.num_classes(), predictions)
}
