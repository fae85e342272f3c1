//! Detection and segmentation mean average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::json;

use crate::data::{make_windows, ActionInstance, VideoRecord};
use crate::decoder::{Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::tiou;

/// Detections per video, in seconds.
pub type VideoPredictions = BTreeMap<String, DetectionSet>;
/// Ground truth per video, in seconds.
pub type VideoAnnotations = BTreeMap<String, Vec<ActionInstance>>;

/// Default tIoU thresholds `0.1, 0.2, …, 0.9`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Window-local detections mapped to video seconds and concatenated.
/// Each entry is `(offset_seconds, span_seconds, detections)`.
pub fn assemble_predictions(windows: &[(f64, f64, DetectionSet)]) -> DetectionSet {
    windows
        .iter()
        .flat_map(|(offset, span, dets)| {
            dets.iter().map(move |d| Detection {
                start: offset + d.start * span,
                end: offset + d.end * span,
                scores: d.scores.clone(),
            })
        })
        .collect()
}

/// All-point interpolated average precision of a ranked list. Items with
/// equal scores form one operating point. `ranked` holds `(score, is_tp)`
/// sorted by descending score; `positives` is the number of ground truths.
pub fn average_precision(ranked: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let s = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == s {
            tp += usize::from(ranked[i].1);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Windowed inference over a whole video, detections in seconds.
pub fn predict_video(model: &Model, video: &VideoRecord, window: usize, stride_ratio: f64) -> Result<DetectionSet> {
    let per_window = make_windows(video, window, stride_ratio)?
        .iter()
        .map(|w| Ok((w.offset_seconds(), w.span_seconds(), model.predict(&w.features, w.valid)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_predictions(&per_window))
}

/// Detection and segmentation mAP of `model` over annotated videos.
pub fn evaluate(model: &Model, videos: &[VideoRecord], window: usize, stride_ratio: f64, frame_rate: f64) -> Result<EvalReport> {
    let mut preds = VideoPredictions::new();
    let mut gts = VideoAnnotations::new();
    let mut durations = BTreeMap::new();
    for v in videos {
        preds.insert(v.video_id.clone(), predict_video(model, v, window, stride_ratio)?);
        gts.insert(v.video_id.clone(), v.annotations.clone());
        durations.insert(v.video_id.clone(), v.duration_seconds);
    }
    let nc = model.cfg.num_classes;
    let mut report = det_map(&preds, &gts, nc, &default_thresholds())?;
    report.seg_map = Some(seg_map(&preds, &gts, &durations, nc, frame_rate)?);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub per_threshold_map: Vec<f64>,
    pub average_map: f64,
    /// `[threshold][class]`; `None` for classes without ground truth.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub seg_map: Option<f64>,
}

/// Per-class AP at one tIoU threshold.
fn class_ap(preds: &VideoPredictions, gts: &VideoAnnotations, class: usize, thr: f64) -> Result<f64> {
    let positives: usize = gts.values().map(|g| g.iter().filter(|a| a.class == class).count()).sum();
    let mut cands: Vec<(f64, &str, &Detection)> = Vec::new();
    for (vid, dets) in preds {
        for d in dets {
            let s = *d
                .scores
                .get(class)
                .ok_or_else(|| Error::Eval(format!("detection in {vid} lacks a score for class {class}")))?;
            cands.push((s, vid.as_str(), d));
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut ranked = Vec::with_capacity(cands.len());
    for (score, vid, d) in cands {
        let video_gts: Vec<&ActionInstance> = gts.get(vid).map_or(Vec::new(), |g| g.iter().collect());
        let flags = used.entry(vid).or_insert_with(|| vec![false; video_gts.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in video_gts.iter().enumerate() {
            if g.class != class || flags[j] {
                continue;
            }
            let iou = tiou((d.start.min(d.end), d.start.max(d.end)), (g.start, g.end))?;
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            flags[j] = true;
        }
        ranked.push((score, best.is_some()));
    }
    Ok(average_precision(&ranked, positives))
}

/// Detection mAP at each threshold and averaged over thresholds. Classes
/// without ground truth are left out of the mean.
pub fn det_map(preds: &VideoPredictions, gts: &VideoAnnotations, num_classes: usize, thresholds: &[f64]) -> Result<EvalReport> {
    let present: Vec<bool> = (0..num_classes)
        .map(|c| gts.values().flatten().any(|a| a.class == c))
        .collect();
    if !present.iter().any(|&p| p) {
        return Err(Error::Eval("no ground truth instances; mAP is undefined".into()));
    }
    if let Some(a) = gts.values().flatten().find(|a| a.class >= num_classes) {
        return Err(Error::Eval(format!("ground truth class {} outside {num_classes} classes", a.class)));
    }
    let mut per_class_ap = Vec::with_capacity(thresholds.len());
    let mut per_threshold_map = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let row: Vec<Option<f64>> = (0..num_classes)
            .map(|c| present[c].then(|| class_ap(preds, gts, c, thr)).transpose())
            .collect::<Result<_>>()?;
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        per_threshold_map.push(vals.iter().sum::<f64>() / vals.len() as f64);
        per_class_ap.push(row);
    }
    let average_map = per_threshold_map.iter().sum::<f64>() / per_threshold_map.len().max(1) as f64;
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        per_threshold_map,
        average_map,
        per_class_ap,
        seg_map: None,
    })
}

/// Frame-level mAP after max-pooling detection scores onto frames sampled
/// at `frame_rate`. Frames no detection covers score 0 and are never
/// ranked. Videos of zero duration are skipped.
pub fn seg_map(
    preds: &VideoPredictions,
    gts: &VideoAnnotations,
    durations: &BTreeMap<String, f64>,
    num_classes: usize,
    frame_rate: f64,
) -> Result<f64> {
    if !(frame_rate > 0.0) {
        return Err(Error::Eval("frame rate must be positive".into()));
    }
    let empty = Vec::new();
    let mut frames: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    let mut positives = vec![0usize; num_classes];
    for (vid, &dur) in durations {
        let n = (dur * frame_rate).round() as usize;
        let dets = preds.get(vid).unwrap_or(&empty);
        let vg = gts.get(vid).map_or(&[][..], Vec::as_slice);
        for i in 0..n {
            let t = (i as f64 + 0.5) / frame_rate;
            let covering: Vec<&Detection> = dets.iter().filter(|d| d.start <= t && t <= d.end).collect();
            for c in 0..num_classes {
                let label = vg.iter().any(|a| a.class == c && a.start <= t && t < a.end);
                positives[c] += usize::from(label);
                let score = covering.iter().map(|d| d.scores[c]).fold(0.0, f64::max);
                if score > 0.0 {
                    frames[c].push((score, label));
                }
            }
        }
    }
    let aps: Vec<f64> = (0..num_classes)
        .filter(|&c| positives[c] > 0)
        .map(|c| {
            let mut r = std::mem::take(&mut frames[c]);
            r.sort_by(|a, b| b.0.total_cmp(&a.0));
            average_precision(&r, positives[c])
        })
        .collect();
    if aps.is_empty() {
        return Err(Error::Eval("no positive frames; seg-mAP is undefined".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

impl EvalReport {
    fn threshold_key(t: f64) -> String {
        format!("det_map@{t:.1}")
    }

    /// `key = value` lines with four decimals, preceded by `# ` echo lines.
    pub fn to_text(&self, echo: &str) -> String {
        let mut s: String = echo.lines().map(|l| format!("# {l}\n")).collect();
        for (t, m) in self.thresholds.iter().zip(&self.per_threshold_map) {
            let _ = writeln!(s, "{} = {m:.4}", Self::threshold_key(*t));
        }
        let _ = writeln!(s, "det_map_avg = {:.4}", self.average_map);
        if let Some(v) = self.seg_map {
            let _ = writeln!(s, "seg_map = {v:.4}");
        }
        s
    }

    /// One JSON record per line: per threshold, per class, and the summaries.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (i, (t, m)) in self.thresholds.iter().zip(&self.per_threshold_map).enumerate() {
            let _ = writeln!(s, "{}", json!({"metric": "det_map", "threshold": t, "value": m}));
            for (c, ap) in self.per_class_ap[i].iter().enumerate() {
                if let Some(ap) = ap {
                    let _ = writeln!(s, "{}", json!({"metric": "ap", "threshold": t, "class": c, "value": ap}));
                }
            }
        }
        let _ = writeln!(s, "{}", json!({"metric": "det_map_avg", "value": self.average_map}));
        if let Some(v) = self.seg_map {
            let _ = writeln!(s, "{}", json!({"metric": "seg_map", "value": v}));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(start: f64, end: f64, scores: Vec<f64>) -> Detection {
        Detection { start, end, scores }
    }

    fn gt(start: f64, end: f64, class: usize) -> ActionInstance {
        ActionInstance { start, end, class }
    }

    fn one(v: Vec<Detection>) -> VideoPredictions {
        BTreeMap::from([("v".to_string(), v)])
    }

    fn ones(v: Vec<ActionInstance>) -> VideoAnnotations {
        BTreeMap::from([("v".to_string(), v)])
    }

    #[test]
    fn assembly_maps_to_seconds() {
        let d = vec![det(0.5, 0.75, vec![0.3])];
        let out = assemble_predictions(&[(64.0, 64.0, d.clone())]);
        assert_eq!(out[0].start, 96.0);
        assert_eq!(out[0].end, 112.0);
        assert_eq!(assemble_predictions(&[(0.0, 1.0, d.clone())]), d);
        assert_eq!(assemble_predictions(&[(0.0, 1.0, d.clone()), (1.0, 1.0, d)]).len(), 2);
    }

    #[test]
    fn single_pair_with_tiou_055() {
        // gt [0, 1], prediction [0, 0.55] has tIoU 0.55
        let r = det_map(&one(vec![det(0.0, 0.55, vec![0.9])]), &ones(vec![gt(0.0, 1.0, 0)]), 1, &default_thresholds()).unwrap();
        for (i, m) in r.per_threshold_map.iter().enumerate() {
            assert_eq!(*m, if i < 5 { 1.0 } else { 0.0 });
        }
        assert!((r.average_map - 5.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn exact_prediction_scores_one() {
        let r = det_map(&one(vec![det(2.0, 5.0, vec![0.2, 0.7])]), &ones(vec![gt(2.0, 5.0, 1)]), 2, &default_thresholds()).unwrap();
        assert_eq!(r.average_map, 1.0);
        assert_eq!(r.per_class_ap[0][0], None);
    }

    #[test]
    fn duplicate_after_match_is_false_positive() {
        let p = one(vec![det(0.0, 1.0, vec![0.9]), det(0.0, 1.0, vec![0.5])]);
        let r = det_map(&p, &ones(vec![gt(0.0, 1.0, 0)]), 1, &[0.5]).unwrap();
        assert_eq!(r.average_map, 1.0);
        // duplicate ranked first: precision 1/2 at full recall
        let p = one(vec![det(0.0, 0.1, vec![0.9]), det(0.0, 1.0, vec![0.5])]);
        let r = det_map(&p, &ones(vec![gt(0.0, 1.0, 0)]), 1, &[0.5]).unwrap();
        assert_eq!(r.average_map, 0.5);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        assert!(det_map(&one(vec![]), &ones(vec![]), 1, &[0.5]).is_err());
    }

    #[test]
    fn seg_map_examples() {
        let dur = BTreeMap::from([("v".to_string(), 10.0)]);
        let g = ones(vec![gt(2.0, 6.0, 0)]);
        let tile = one(vec![det(2.0, 6.0, vec![1.0]), det(0.0, 1.99, vec![0.0]), det(6.01, 10.0, vec![0.0])]);
        assert_eq!(seg_map(&tile, &g, &dur, 1, 1.0).unwrap(), 1.0);
        assert_eq!(seg_map(&one(vec![]), &g, &dur, 1, 1.0).unwrap(), 0.0);
        let half = one(vec![det(2.0, 4.0, vec![1.0])]);
        assert_eq!(seg_map(&half, &g, &dur, 1, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn ap_handles_ties_as_one_point() {
        // tied pair: one TP one FP, recall jumps to 1 at precision 1/2
        assert_eq!(average_precision(&[(0.5, true), (0.5, false)], 1), 0.5);
        assert_eq!(average_precision(&[(0.5, false), (0.5, true)], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn report_formatting() {
        let r = det_map(&one(vec![det(0.0, 0.55, vec![0.9])]), &ones(vec![gt(0.0, 1.0, 0)]), 1, &default_thresholds()).unwrap();
        let text = r.to_text("seed = 42");
        assert!(text.starts_with("# seed = 42\n"));
        assert!(text.contains("det_map@0.5 = 1.0000\n"));
        assert!(text.contains("det_map_avg = 0.5556\n"));
        let jsonl = r.to_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 9 * 2 + 1);
        for l in lines {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
    }
}
