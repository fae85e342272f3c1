//! Matching-based detection loss over every supervised stage.

use crate::decoder::{IntervalVars, LayerPrediction};
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::numerics::{Graph, Var};

use super::matching::{cost_matrix, hungarian, share_targets, CostWeights, MatchResult, Target, FOCAL_ALPHA, FOCAL_GAMMA};

/// Weights of the classification, IoU and L1 loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            iou: 2.0,
            l1: 5.0,
        }
    }
}

/// Unweighted terms of one supervised stage, already normalized by the
/// matched-query count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageLoss {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub total: f64,
    /// Decoder layers in order, then the encoder stage last.
    pub per_layer: Vec<StageLoss>,
}

impl LossBreakdown {
    /// Elementwise mean of several breakdowns with the same stage count.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let stages = items.first().map_or(0, |b| b.per_layer.len());
        let mut out = LossBreakdown {
            per_layer: vec![StageLoss::default(); stages],
            ..Default::default()
        };
        for b in items {
            out.cls += b.cls / n;
            out.iou += b.iou / n;
            out.l1 += b.l1 / n;
            out.total += b.total / n;
            for (o, s) in out.per_layer.iter_mut().zip(&b.per_layer) {
                o.cls += s.cls / n;
                o.iou += s.iou / n;
                o.l1 += s.l1 / n;
                o.total += s.total / n;
            }
        }
        out
    }
}

/// Sigmoid focal loss summed over queries and classes. Query `k` is positive
/// for the class of its assigned target only.
pub fn classification_loss<'g>(logits: Var<'g>, assignment: &[Option<usize>], targets: &[Target]) -> Var<'g> {
    let c = logits.cols();
    let mut labels = vec![false; logits.rows() * c];
    for (k, a) in assignment.iter().enumerate() {
        if let Some(j) = a {
            labels[k * c + targets[*j].class] = true;
        }
    }
    logits.sigmoid_focal(labels, FOCAL_ALPHA, FOCAL_GAMMA).sum()
}

/// `(Σ (1 − tIoU), Σ L1)` over the assigned queries, or `None` if nothing
/// is assigned.
pub fn localization_loss<'g>(
    g: &'g Graph,
    iv: IntervalVars<'g>,
    assignment: &[Option<usize>],
    targets: &[Target],
) -> Option<(Var<'g>, Var<'g>)> {
    let (rows, tgt): (Vec<usize>, Vec<Target>) = assignment
        .iter()
        .enumerate()
        .filter_map(|(k, a)| a.map(|j| (k, targets[j])))
        .unzip();
    if rows.is_empty() {
        return None;
    }
    let m = rows.len();
    let s = iv.start.gather(rows.clone(), &[m]);
    let e = iv.end.gather(rows, &[m]);
    let ts = g.constant(crate::numerics::Tensor::vector(tgt.iter().map(|t| t.start).collect()));
    let te = g.constant(crate::numerics::Tensor::vector(tgt.iter().map(|t| t.end).collect()));
    let l1 = s.sub(ts).abs().add(e.sub(te).abs()).sum();
    let inter = e.minimum(te).sub(s.maximum(ts)).relu();
    let union = e.sub(s).add(te.sub(ts)).sub(inter);
    let iou = inter.div(union);
    let iou_loss = iou.scale(-1.0).sum().affine(1.0, m as f64);
    Some((iou_loss, l1))
}

/// Matches one stage's detections against the targets.
pub fn match_stage(pred: &LayerPrediction<'_>, targets: &[Target], w: CostWeights) -> Result<MatchResult> {
    let dets = pred.detections();
    let cost = cost_matrix(&dets, targets, w)?;
    if targets.is_empty() {
        return Ok(MatchResult {
            assignment: vec![None; dets.len()],
            total_cost: 0.0,
        });
    }
    hungarian(&cost)
}

/// Loss of one stage given its assignment. The assignment supervises the
/// instance interval and is shared with the boundary interval.
pub fn stage_loss<'g>(
    g: &'g Graph,
    pred: &LayerPrediction<'g>,
    m: &MatchResult,
    targets: &[Target],
    w: LossWeights,
) -> (Var<'g>, StageLoss) {
    let norm = m.num_matched().max(1) as f64;
    let shared = share_targets(m);
    let cls = classification_loss(pred.logits, &m.assignment, targets).scale(1.0 / norm);
    let mut iou_terms = Vec::new();
    let mut l1_terms = Vec::new();
    for (iv, assign) in [(pred.instance, &shared.instance), (pred.boundary, &shared.boundary)] {
        if let Some(iv) = iv {
            if let Some((iou, l1)) = localization_loss(g, iv, assign, targets) {
                iou_terms.push(iou);
                l1_terms.push(l1);
            }
        }
    }
    let zero = || g.constant(crate::numerics::Tensor::scalar(0.0));
    let sum = |v: Vec<Var<'g>>| v.into_iter().reduce(|a, b| a.add(b)).unwrap_or_else(zero);
    let iou = sum(iou_terms).scale(1.0 / norm);
    let l1 = sum(l1_terms).scale(1.0 / norm);
    let total = cls.scale(w.cls).add(iou.scale(w.iou)).add(l1.scale(w.l1));
    let stats = StageLoss {
        cls: cls.item(),
        iou: iou.item(),
        l1: l1.item(),
        total: total.item(),
    };
    (total, stats)
}

/// Sum of every decoder layer's loss plus the encoder stage, each matched
/// independently. Returns the scalar loss node and its breakdown.
pub fn total_loss<'g>(
    g: &'g Graph,
    out: &ForwardOutput<'g>,
    targets: &[Target],
    cost_w: CostWeights,
    loss_w: LossWeights,
) -> Result<(Var<'g>, LossBreakdown)> {
    let stages: Vec<&LayerPrediction<'g>> = out.decode.layers.iter().chain([&out.encoder_pred]).collect();
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var<'g>> = None;
    for pred in stages {
        let m = match_stage(pred, targets, cost_w)?;
        let (v, s) = stage_loss(g, pred, &m, targets, loss_w);
        breakdown.cls += s.cls;
        breakdown.iou += s.iou;
        breakdown.l1 += s.l1;
        breakdown.per_layer.push(s);
        total = Some(match total {
            Some(t) => t.add(v),
            None => v,
        });
    }
    let total = total.ok_or_else(|| Error::Train("no supervised stages".into()))?;
    breakdown.total = total.item();
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn pred<'g>(g: &'g Graph, logits: Vec<f64>, c: usize, iv: &[(f64, f64)]) -> LayerPrediction<'g> {
        let n = iv.len();
        LayerPrediction {
            logits: g.variable(Tensor::new(&[n, c], logits).unwrap()),
            instance: Some(IntervalVars {
                start: g.variable(Tensor::vector(iv.iter().map(|x| x.0).collect())),
                end: g.variable(Tensor::vector(iv.iter().map(|x| x.1).collect())),
            }),
            boundary: None,
        }
    }

    #[test]
    fn no_targets_gives_classification_only() {
        let g = Graph::new();
        let p = pred(&g, vec![0.0, 1.0, -1.0, 0.5], 2, &[(0.1, 0.2), (0.3, 0.6)]);
        let m = match_stage(&p, &[], CostWeights::default()).unwrap();
        let (_, s) = stage_loss(&g, &p, &m, &[], LossWeights::default());
        assert_eq!(s.iou, 0.0);
        assert_eq!(s.l1, 0.0);
        assert!(s.cls > 0.0);
    }

    #[test]
    fn perfect_prediction_has_vanishing_loss() {
        let g = Graph::new();
        let t = [Target {
            start: 0.2,
            end: 0.6,
            class: 1,
        }];
        let p = pred(&g, vec![-30.0, 30.0, -30.0, -30.0], 2, &[(0.2, 0.6), (0.7, 0.9)]);
        let m = match_stage(&p, &t, CostWeights::default()).unwrap();
        assert_eq!(m.assignment, vec![Some(0), None]);
        let (_, s) = stage_loss(&g, &p, &m, &t, LossWeights::default());
        assert!(s.iou.abs() < 1e-12);
        assert!(s.l1.abs() < 1e-12);
        assert!(s.cls < 1e-10);
    }

    #[test]
    fn localization_terms_match_hand_values() {
        let g = Graph::new();
        let t = [Target {
            start: 0.4,
            end: 1.0,
            class: 0,
        }];
        let p = pred(&g, vec![0.0], 1, &[(0.0, 0.6)]);
        let m = MatchResult {
            assignment: vec![Some(0)],
            total_cost: 0.0,
        };
        let (_, s) = stage_loss(&g, &p, &m, &t, LossWeights::default());
        assert!((s.iou - 0.8).abs() < 1e-12);
        assert!((s.l1 - 0.8).abs() < 1e-12);
        // p = 0.5 positive: 0.25 · 0.25 · ln 2
        assert!((s.cls - 0.043_321_698_784_996_57).abs() < 1e-12);
        assert!((s.total - (2.0 * s.cls + 2.0 * 0.8 + 5.0 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn boundary_level_receives_shared_targets() {
        let g = Graph::new();
        let t = [Target {
            start: 0.2,
            end: 0.4,
            class: 0,
        }];
        let mut p = pred(&g, vec![0.0, 0.0], 1, &[(0.2, 0.4), (0.5, 0.9)]);
        p.boundary = Some(IntervalVars {
            start: g.variable(Tensor::vector(vec![0.3, 0.5])),
            end: g.variable(Tensor::vector(vec![0.4, 0.9])),
        });
        let m = match_stage(&p, &t, CostWeights::default()).unwrap();
        assert_eq!(m.assignment, vec![Some(0), None]);
        let (_, s) = stage_loss(&g, &p, &m, &t, LossWeights::default());
        // only the boundary start of query 0 is off, by 0.1
        assert!((s.l1 - 0.1).abs() < 1e-12);
        assert!((s.iou - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_defaults() {
        assert_eq!(
            LossWeights::default(),
            LossWeights {
                cls: 2.0,
                iou: 2.0,
                l1: 5.0
            }
        );
        assert_eq!(
            CostWeights::default(),
            CostWeights {
                cls: 6.0,
                iou: 2.0,
                l1: 5.0
            }
        );
    }
}
