//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dualdetr::data::ActionInstance;
use dualdetr::decoder::Detection;
use dualdetr::eval::{VideoAnnotations, VideoPredictions};
use rand::Rng;

/// Minimum total cost over all injective maps from columns to rows.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    fn go(cost: &[Vec<f64>], col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == cost[0].len() {
            *best = best.min(acc);
            return;
        }
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                go(cost, col + 1, used, acc + cost[r][col], best);
                used[r] = false;
            }
        }
    }
    if m == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        // two identical points
        if a == b {
            1.0
        } else {
            0.0
        }
    } else {
        inter / union
    }
}

/// Interpolated AP from explicit operating points: for every distinct
/// score threshold count TP and predictions at or above it, then sum,
/// over each newly reached recall level, the best precision at any
/// threshold reaching at least that recall.
fn reference_ap(items: &[(f64, bool)], positives: usize) -> f64 {
    let mut thresholds: Vec<f64> = items.iter().map(|x| x.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(usize, f64)> = thresholds
        .iter()
        .map(|&t| {
            let above: Vec<&(f64, bool)> = items.iter().filter(|x| x.0 >= t).collect();
            let tp = above.iter().filter(|x| x.1).count();
            (tp, tp as f64 / above.len() as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0usize;
    for &(tp, _) in &points {
        if tp > prev {
            let best = points.iter().filter(|p| p.0 >= tp).map(|p| p.1).fold(0.0, f64::max);
            ap += (tp as f64 / positives as f64 - prev as f64 / positives as f64) * best;
            prev = tp;
        }
    }
    ap
}

/// Detection mAP per threshold, computed directly from the definition.
pub fn reference_det_map(preds: &VideoPredictions, gts: &VideoAnnotations, nc: usize, thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&thr| {
            let mut aps = Vec::new();
            for c in 0..nc {
                let positives = gts.values().flatten().filter(|a| a.class == c).count();
                if positives == 0 {
                    continue;
                }
                let mut all: Vec<(f64, &String, &Detection)> = Vec::new();
                for (v, ds) in preds {
                    for d in ds {
                        all.push((d.scores[c], v, d));
                    }
                }
                // stable descending order
                let mut order: Vec<usize> = (0..all.len()).collect();
                order.sort_by(|&i, &j| all[j].0.partial_cmp(&all[i].0).unwrap().then(i.cmp(&j)));
                let mut taken: BTreeMap<(&String, usize), bool> = BTreeMap::new();
                let mut items = Vec::new();
                for i in order {
                    let (score, v, d) = all[i];
                    let mut pick: Option<usize> = None;
                    let mut pick_iou = -1.0;
                    for (j, g) in gts.get(v).map(|x| x.as_slice()).unwrap_or(&[]).iter().enumerate() {
                        if g.class != c || taken.contains_key(&(v, j)) {
                            continue;
                        }
                        let o = overlap((d.start.min(d.end), d.start.max(d.end)), (g.start, g.end));
                        if o >= thr && o > pick_iou {
                            pick = Some(j);
                            pick_iou = o;
                        }
                    }
                    if let Some(j) = pick {
                        taken.insert((v, j), true);
                    }
                    items.push((score, pick.is_some()));
                }
                aps.push(reference_ap(&items, positives));
            }
            aps.iter().sum::<f64>() / aps.len() as f64
        })
        .collect()
}

/// Frame-level mAP computed from explicit dense score and label arrays.
pub fn reference_seg_map(
    preds: &VideoPredictions,
    gts: &VideoAnnotations,
    durations: &BTreeMap<String, f64>,
    nc: usize,
    fps: f64,
) -> f64 {
    let mut aps = Vec::new();
    for c in 0..nc {
        let mut items = Vec::new();
        let mut positives = 0;
        for (v, &dur) in durations {
            let frames = (dur * fps).round() as usize;
            let mut score = vec![0.0f64; frames];
            let mut label = vec![false; frames];
            for (f, s) in score.iter_mut().enumerate() {
                let t = (f as f64 + 0.5) / fps;
                for d in preds.get(v).into_iter().flatten() {
                    if d.start <= t && t <= d.end && d.scores[c] > *s {
                        *s = d.scores[c];
                    }
                }
                label[f] = gts.get(v).into_iter().flatten().any(|a| a.class == c && a.start <= t && t < a.end);
            }
            positives += label.iter().filter(|&&l| l).count();
            items.extend(score.into_iter().zip(label).filter(|x| x.0 > 0.0));
        }
        if positives > 0 {
            aps.push(reference_ap(&items, positives));
        }
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// A metric micro-instance: up to 5 videos of 10 s, up to 8 predictions,
/// scores on a coarse grid so ties occur.
pub struct MicroInstance {
    pub preds: VideoPredictions,
    pub gts: VideoAnnotations,
    pub durations: BTreeMap<String, f64>,
    pub num_classes: usize,
}

pub fn random_micro_instance(rng: &mut impl Rng) -> MicroInstance {
    let nc = rng.random_range(1..=3);
    let nv = rng.random_range(1..=5);
    let ids: Vec<String> = (0..nv).map(|i| format!("v{i}")).collect();
    let interval = |rng: &mut dyn rand::RngCore| {
        let s = (rng.random_range(0..40) as f64) * 0.25;
        let len = (rng.random_range(1..=16) as f64) * 0.25;
        (s, (s + len).min(10.0))
    };
    let mut gts = VideoAnnotations::new();
    let mut durations = BTreeMap::new();
    for id in &ids {
        let n = rng.random_range(0..=3);
        let anns = (0..n)
            .map(|_| {
                let (start, end) = interval(rng);
                ActionInstance { start, end, class: rng.random_range(0..nc) }
            })
            .collect();
        gts.insert(id.clone(), anns);
        durations.insert(id.clone(), 10.0);
    }
    if gts.values().all(Vec::is_empty) {
        let (start, end) = interval(rng);
        gts.get_mut(&ids[0]).unwrap().push(ActionInstance { start, end, class: 0 });
    }
    let mut preds: VideoPredictions = ids.iter().map(|id| (id.clone(), Vec::new())).collect();
    for _ in 0..rng.random_range(0..=8) {
        let id = &ids[rng.random_range(0..nv)];
        let (start, end) = interval(rng);
        let scores = (0..nc).map(|_| rng.random_range(0..=4) as f64 / 4.0).collect();
        preds.get_mut(id).unwrap().push(Detection { start, end, scores });
    }
    MicroInstance { preds, gts, durations, num_classes: nc }
}
