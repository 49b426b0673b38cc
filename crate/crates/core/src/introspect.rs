//! Model introspection: zero-pad modality ablation, cluster-assignment
//! histograms, probability timelines and top frames per cluster, with
//! CSV / JSON / SVG export.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datastore::VideoFeatures;
use crate::error::{ensure, Error, Result};
use crate::model::AggregationModel;
use crate::netvlad::soft_assign;
use crate::rng::{derive_seed, SeededRng};
use crate::sampling::{sample_frames, sample_segment, segment_seed, single_pass_with, usable_segments, SampledInput};
use crate::tensor::{softmax_into, Matrix};

pub const DEFAULT_TIMELINE_STEP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAblation {
    pub modality: String,
    pub padded_probability: f64,
    /// Full probability minus the padded one.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub video_id: String,
    pub class_index: usize,
    pub full_probability: f64,
    pub modalities: Vec<ModalityAblation>,
}

impl AblationReport {
    pub fn contribution(&self, modality: &str) -> Option<f64> {
        self.modalities.iter().find(|m| m.modality == modality).map(|m| m.contribution)
    }
}

fn check_video(model: &AggregationModel, video: &VideoFeatures) -> Result<()> {
    ensure!(
        video.streams.len() == model.modalities.len()
            && video.streams.iter().zip(&model.modalities).all(|(s, m)| s.dim() == m.dim),
        Error::Shape(format!("video {} does not match the model's modalities", video.video_id))
    );
    Ok(())
}

fn check_class(model: &AggregationModel, class_index: usize) -> Result<()> {
    ensure!(
        class_index < model.num_classes(),
        Error::InvalidArgument(format!("class {class_index} out of range for {} classes", model.num_classes()))
    );
    Ok(())
}

fn zero_modality(input: &mut SampledInput, m: usize) {
    input.frames[m].data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Contribution of each modality to `class_index`: the seeded video-level
/// probability minus the same pass with that modality's sampled frames
/// replaced by zeros (same sampled indices).
pub fn modality_contribution(model: &AggregationModel, video: &VideoFeatures, class_index: usize, seed: u64) -> Result<AblationReport> {
    check_class(model, class_index)?;
    check_video(model, video)?;
    let full = single_pass_with(model, video, seed, |_| {})?[class_index];
    let modalities = (0..model.modalities.len())
        .map(|m| {
            let padded = single_pass_with(model, video, seed, |input| zero_modality(input, m))?[class_index];
            Ok(ModalityAblation {
                modality: model.modalities[m].name.clone(),
                padded_probability: padded,
                contribution: full - padded,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport { video_id: video.video_id.clone(), class_index, full_probability: full, modalities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentHistogram {
    pub modality: String,
    pub video_id: String,
    /// Sampled frames summed over; `S` per usable segment.
    pub frame_count: usize,
    pub mass: Vec<f64>,
    /// Histogram of the same frames after zero-padding the modality.
    pub padded_mass: Vec<f64>,
}

impl AssignmentHistogram {
    pub fn delta(&self) -> Vec<f64> {
        self.mass.iter().zip(&self.padded_mass).map(|(a, b)| a - b).collect()
    }
}

/// Column sums of the soft assignments over the seeded sample of every
/// usable segment.
pub fn assignment_histogram(model: &AggregationModel, video: &VideoFeatures, modality: &str, seed: u64) -> Result<AssignmentHistogram> {
    let m = model
        .modality_index(modality)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {modality:?}")))?;
    check_video(model, video)?;
    let params = &model.vlad[m];
    let k = params.clusters();
    let mut mass = vec![0.0; k];
    let mut frame_count = 0;
    for seg in usable_segments(video)? {
        let input = sample_segment(video, &seg, model.sample_size, segment_seed(seed, &video.video_id, seg.index, 0))?;
        let alpha = soft_assign(params, &input.frames[m])?;
        for i in 0..alpha.rows() {
            for (h, a) in mass.iter_mut().zip(alpha.row(i)) {
                *h += a;
            }
        }
        frame_count += alpha.rows();
    }
    // A zero frame's assignment is softmax(b) whatever the weights.
    let mut zero_alpha = vec![0.0; k];
    softmax_into(params.assign_bias.data(), &mut zero_alpha);
    let padded_mass = zero_alpha.iter().map(|a| a * frame_count as f64).collect();
    Ok(AssignmentHistogram { modality: modality.to_string(), video_id: video.video_id.clone(), frame_count, mass, padded_mass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub t: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub video_id: String,
    pub class_index: usize,
    pub points: Vec<TimelinePoint>,
}

/// Probability of `class_index` given only the features seen up to each
/// prefix time `step_s, 2·step_s, …, ≤ duration`.
///
/// Each prefix uses all of its rows when there are at most `S`, otherwise a
/// seeded sample of `S`. A modality with no rows yet contributes one zero
/// frame.
pub fn probability_timeline(model: &AggregationModel, video: &VideoFeatures, class_index: usize, step_s: f64, seed: u64) -> Result<Timeline> {
    ensure!(step_s > 0.0 && step_s.is_finite(), Error::InvalidArgument("timeline step must be > 0".into()));
    check_class(model, class_index)?;
    check_video(model, video)?;
    let mut points = Vec::new();
    let mut n = 1u64;
    loop {
        let t = n as f64 * step_s;
        if t > video.duration_s + 1e-9 {
            break;
        }
        let inputs = video
            .streams
            .iter()
            .enumerate()
            .map(|(m, s)| {
                // Rows with timestamp i / fps <= t.
                let mut rows = ((t * s.fps).floor().max(0.0) as usize + 1).min(s.count());
                while rows > 0 && s.timestamp(rows - 1) > t {
                    rows -= 1;
                }
                if rows == 0 {
                    return Ok(Matrix::zeros(1, s.dim()));
                }
                if rows <= model.sample_size {
                    let idx: Vec<usize> = (0..rows).collect();
                    return Ok(s.data.select_rows(&idx));
                }
                let mut rng = SeededRng::new(derive_seed(seed, &[m as u64, n]));
                Ok(s.data.select_rows(&sample_frames(0..rows, model.sample_size, &mut rng)?))
            })
            .collect::<Result<Vec<_>>>()?;
        points.push(TimelinePoint { t, probability: model.forward(&inputs)?[class_index] });
        n += 1;
    }
    Ok(Timeline { video_id: video.video_id.clone(), class_index, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFrame {
    pub video_id: String,
    pub timestamp: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFrames {
    pub modality: String,
    pub cluster: usize,
    pub frames: Vec<TopFrame>,
}

/// The `n` sampled frames with the largest assignment to `cluster`, over the
/// seeded samples of every usable segment of every video. A frame drawn more
/// than once counts once. Ties go to the smaller (video id, timestamp).
pub fn top_frames_for_cluster(
    model: &AggregationModel,
    videos: &[VideoFeatures],
    modality: &str,
    cluster: usize,
    n: usize,
    seed: u64,
) -> Result<TopFrames> {
    ensure!(!videos.is_empty(), Error::InvalidArgument("dataset is empty".into()));
    let m = model
        .modality_index(modality)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {modality:?}")))?;
    let params = &model.vlad[m];
    ensure!(
        cluster < params.clusters(),
        Error::InvalidArgument(format!("cluster {cluster} out of range for {} clusters", params.clusters()))
    );
    let mut all = Vec::new();
    for video in videos {
        check_video(model, video)?;
        let stream = &video.streams[m];
        let mut rows = Vec::new();
        for seg in usable_segments(video)? {
            let input = sample_segment(video, &seg, model.sample_size, segment_seed(seed, &video.video_id, seg.index, 0))?;
            rows.extend_from_slice(&input.indices[m]);
        }
        rows.sort_unstable();
        rows.dedup();
        let alpha = soft_assign(params, &stream.data.select_rows(&rows))?;
        for (i, &row) in rows.iter().enumerate() {
            all.push(TopFrame {
                video_id: video.video_id.clone(),
                timestamp: stream.timestamp(row),
                alpha: alpha.get(i, cluster),
            });
        }
    }
    all.sort_by(|a, b| {
        b.alpha
            .total_cmp(&a.alpha)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.timestamp.total_cmp(&b.timestamp))
    });
    all.truncate(n);
    Ok(TopFrames { modality: modality.to_string(), cluster, frames: all })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Ablation(AblationReport),
    Histogram(AssignmentHistogram),
    Timeline(Timeline),
    TopFrames(TopFrames),
}

impl Report {
    fn kind(&self) -> &'static str {
        match self {
            Report::Ablation(_) => "ablation",
            Report::Histogram(_) => "histogram",
            Report::Timeline(_) => "timeline",
            Report::TopFrames(_) => "top_frames",
        }
    }

    fn csv_header(&self) -> &'static [&'static str] {
        match self {
            Report::Ablation(_) => &["video_id", "class_index", "full_probability", "modality", "padded_probability", "contribution"],
            Report::Histogram(_) => &["video_id", "modality", "frame_count", "cluster", "mass", "padded_mass", "delta"],
            Report::Timeline(_) => &["video_id", "class_index", "t", "probability"],
            Report::TopFrames(_) => &["modality", "cluster", "rank", "video_id", "timestamp", "alpha"],
        }
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        match self {
            Report::Ablation(r) => r
                .modalities
                .iter()
                .map(|m| {
                    vec![
                        r.video_id.clone(),
                        r.class_index.to_string(),
                        r.full_probability.to_string(),
                        m.modality.clone(),
                        m.padded_probability.to_string(),
                        m.contribution.to_string(),
                    ]
                })
                .collect(),
            Report::Histogram(h) => {
                let delta = h.delta();
                (0..h.mass.len())
                    .map(|k| {
                        vec![
                            h.video_id.clone(),
                            h.modality.clone(),
                            h.frame_count.to_string(),
                            k.to_string(),
                            h.mass[k].to_string(),
                            h.padded_mass[k].to_string(),
                            delta[k].to_string(),
                        ]
                    })
                    .collect()
            }
            Report::Timeline(tl) => tl
                .points
                .iter()
                .map(|p| vec![tl.video_id.clone(), tl.class_index.to_string(), p.t.to_string(), p.probability.to_string()])
                .collect(),
            Report::TopFrames(tf) => tf
                .frames
                .iter()
                .enumerate()
                .map(|(rank, f)| {
                    vec![
                        tf.modality.clone(),
                        tf.cluster.to_string(),
                        (rank + 1).to_string(),
                        f.video_id.clone(),
                        f.timestamp.to_string(),
                        f.alpha.to_string(),
                    ]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    Svg,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            "svg" => Ok(ExportFormat::Svg),
            other => Err(Error::InvalidArgument(format!("unknown export format {other:?} (csv, json, svg)"))),
        }
    }
}

/// Renders reports in `format`. CSV output requires reports of one kind.
pub fn render_reports(reports: &[Report], format: ExportFormat) -> Result<String> {
    ensure!(!reports.is_empty(), Error::InvalidArgument("no reports to export".into()));
    match format {
        ExportFormat::Csv => {
            let kind = reports[0].kind();
            ensure!(
                reports.iter().all(|r| r.kind() == kind),
                Error::InvalidArgument("CSV export needs reports of a single kind".into())
            );
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
            w.write_record(reports[0].csv_header()).map_err(csv_err)?;
            for r in reports {
                for row in r.csv_rows() {
                    w.write_record(&row).map_err(csv_err)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).map_err(|e| Error::InvalidArgument(format!("json: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        ExportFormat::Svg => Ok(render_svg(reports)),
    }
}

pub fn export_reports(reports: &[Report], path: &Path, format: ExportFormat) -> Result<()> {
    let text = render_reports(reports, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses the CSV written for ablation reports.
pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationReport>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out: Vec<AblationReport> = Vec::new();
    let bad = |m: String| Error::parse("ablation csv", m);
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        ensure!(rec.len() == 6, bad(format!("expected 6 fields, got {}", rec.len())));
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
        let class_index: usize = rec[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let entry = ModalityAblation { modality: rec[3].to_string(), padded_probability: num(4)?, contribution: num(5)? };
        match out.last_mut() {
            Some(last) if last.video_id == rec[0] && last.class_index == class_index => last.modalities.push(entry),
            _ => out.push(AblationReport {
                video_id: rec[0].to_string(),
                class_index,
                full_probability: num(2)?,
                modalities: vec![entry],
            }),
        }
    }
    Ok(out)
}

const CHART_W: f64 = 480.0;
const CHART_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Chart {
    title: String,
    x_label: &'static str,
    y_label: &'static str,
    body: Body,
}

enum Body {
    Bars(Vec<(String, f64)>),
    Line(Vec<(f64, f64)>),
}

fn charts(report: &Report) -> Vec<Chart> {
    match report {
        Report::Ablation(r) => vec![Chart {
            title: format!("{} class {}: contribution per modality", r.video_id, r.class_index),
            x_label: "modality",
            y_label: "contribution",
            body: Body::Bars(r.modalities.iter().map(|m| (m.modality.clone(), m.contribution)).collect()),
        }],
        Report::Histogram(h) => vec![
            Chart {
                title: format!("{} {}: cluster assignment mass", h.video_id, h.modality),
                x_label: "cluster",
                y_label: "mass",
                body: Body::Bars(h.mass.iter().enumerate().map(|(k, v)| (k.to_string(), *v)).collect()),
            },
            Chart {
                title: format!("{} {}: full minus zero-padded mass", h.video_id, h.modality),
                x_label: "cluster",
                y_label: "delta",
                body: Body::Bars(h.delta().into_iter().enumerate().map(|(k, v)| (k.to_string(), v)).collect()),
            },
        ],
        Report::Timeline(tl) => vec![Chart {
            title: format!("{} class {}: probability over time", tl.video_id, tl.class_index),
            x_label: "time (s)",
            y_label: "probability",
            body: Body::Line(tl.points.iter().map(|p| (p.t, p.probability)).collect()),
        }],
        Report::TopFrames(tf) => vec![Chart {
            title: format!("{} cluster {}: top assignments", tf.modality, tf.cluster),
            x_label: "frame",
            y_label: "assignment",
            body: Body::Bars(tf.frames.iter().map(|f| (format!("{}@{}", f.video_id, f.timestamp), f.alpha)).collect()),
        }],
    }
}

fn render_chart(out: &mut String, chart: &Chart, top: f64) {
    let (x0, y0) = (MARGIN, top + MARGIN);
    let (w, h) = (CHART_W - 2.0 * MARGIN, CHART_H - 2.0 * MARGIN);
    let _ = writeln!(out, r#"<g class="chart">"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">{}</text>"#, x0, top + 20.0, escape(&chart.title));
    let values: Vec<f64> = match &chart.body {
        Body::Bars(b) => b.iter().map(|(_, v)| *v).collect(),
        Body::Line(p) => p.iter().map(|(_, v)| *v).collect(),
    };
    let lo = values.iter().copied().fold(0.0, f64::min);
    let mut hi = values.iter().copied().fold(0.0, f64::max);
    if hi - lo <= 0.0 {
        hi = lo + 1.0;
    }
    let ypos = |v: f64| y0 + h - (v - lo) / (hi - lo) * h;
    let base = ypos(0.0);
    let _ = writeln!(out, r#"<line class="axis" x1="{x0}" y1="{}" x2="{x0}" y2="{}" stroke="black"/>"#, y0, y0 + h);
    let _ = writeln!(out, r#"<line class="axis" x1="{x0}" y1="{base:.2}" x2="{}" y2="{base:.2}" stroke="black"/>"#, x0 + w);
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{}</text>"#, x0 + w / 2.0, y0 + h + 32.0, chart.x_label);
    let _ = writeln!(
        out,
        r#"<text x="12" y="{}" font-size="10" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        y0 + h / 2.0,
        y0 + h / 2.0,
        chart.y_label
    );
    let _ = writeln!(out, r#"<text x="{}" y="{:.2}" font-size="9" text-anchor="end">{}</text>"#, x0 - 4.0, ypos(hi), fmt_tick(hi));
    let _ = writeln!(out, r#"<text x="{}" y="{:.2}" font-size="9" text-anchor="end">{}</text>"#, x0 - 4.0, ypos(lo), fmt_tick(lo));
    match &chart.body {
        Body::Bars(bars) => {
            let slot = w / bars.len().max(1) as f64;
            for (i, (label, v)) in bars.iter().enumerate() {
                let x = x0 + i as f64 * slot + slot * 0.1;
                let (y, bh) = if *v >= 0.0 { (ypos(*v), base - ypos(*v)) } else { (base, ypos(*v) - base) };
                let _ = writeln!(
                    out,
                    r#"<rect class="bar" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="steelblue"><title>{}: {}</title></rect>"#,
                    slot * 0.8,
                    escape(label),
                    v
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
                    x + slot * 0.4,
                    y0 + h + 14.0,
                    escape(label)
                );
            }
        }
        Body::Line(pts) => {
            let tmin = pts.first().map_or(0.0, |p| p.0).min(0.0);
            let tmax = pts.last().map_or(1.0, |p| p.0).max(tmin + 1e-12);
            let coords: Vec<String> = pts
                .iter()
                .map(|(t, v)| format!("{:.2},{:.2}", x0 + (t - tmin) / (tmax - tmin) * w, ypos(*v)))
                .collect();
            let _ = writeln!(out, r#"<polyline class="line" fill="none" stroke="steelblue" points="{}"/>"#, coords.join(" "));
            let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="9" text-anchor="end">{}</text>"#, x0 + w, y0 + h + 14.0, fmt_tick(tmax));
        }
    }
    let _ = writeln!(out, "</g>");
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.3}")
}

fn render_svg(reports: &[Report]) -> String {
    let all: Vec<Chart> = reports.iter().flat_map(charts).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{}" font-family="sans-serif">"#,
        CHART_H * all.len() as f64
    );
    for (i, chart) in all.iter().enumerate() {
        render_chart(&mut out, chart, i as f64 * CHART_H);
    }
    out.push_str("</svg>\n");
    out
}
