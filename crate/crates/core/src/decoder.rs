//! Two-branch decoder with mutual position refinement.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{DeformAttn, DeformAttnConfig, RefKind, RefPoints, SelfAttention};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::numerics::layers::{sine_embed, LayerNorm, Linear, Mlp};
use crate::numerics::{sigmoid, Graph, ParamStore, Tensor, Var};
use crate::queries::{span_embed, BoundaryQueries, InstanceQueries, Queries, QueryLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefineMode {
    /// Both levels update simultaneously from pre-update values.
    #[default]
    Parallel,
    BoundaryFirst,
    InstanceFirst,
    Off,
    /// Parallel position update plus a content exchange through a
    /// feed-forward block over the concatenated contents.
    PositionAndContent,
}

impl FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "boundary-first" => Ok(Self::BoundaryFirst),
            "instance-first" => Ok(Self::InstanceFirst),
            "off" => Ok(Self::Off),
            "position-and-content" => Ok(Self::PositionAndContent),
            _ => Err(Error::Config(format!(
                "unknown refine mode `{s}` (expected parallel, boundary-first, instance-first, off or position-and-content)"
            ))),
        }
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Parallel => "parallel",
            Self::BoundaryFirst => "boundary-first",
            Self::InstanceFirst => "instance-first",
            Self::Off => "off",
            Self::PositionAndContent => "position-and-content",
        })
    }
}

/// Positions of one aligned query: start, end, center, duration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPositions {
    pub s: f64,
    pub e: f64,
    pub c: f64,
    pub d: f64,
}

/// Synchronizes boundary and instance positions, clipping to `[0, 1]`.
pub fn mutual_refine(p: QueryPositions, mode: RefineMode) -> QueryPositions {
    let inst = |s: f64, e: f64, c: f64, d: f64| ((c + (s + e) / 2.0) / 2.0, (d + (e - s)) / 2.0);
    let bound = |s: f64, e: f64, c: f64, d: f64| ((s + (c - d / 2.0)) / 2.0, (e + (c + d / 2.0)) / 2.0);
    let QueryPositions { s, e, c, d } = p;
    let (s, e, c, d) = match mode {
        RefineMode::Off => return p,
        RefineMode::Parallel | RefineMode::PositionAndContent => {
            let (c2, d2) = inst(s, e, c, d);
            let (s2, e2) = bound(s, e, c, d);
            (s2, e2, c2, d2)
        }
        RefineMode::BoundaryFirst => {
            let (s2, e2) = bound(s, e, c, d);
            let (c2, d2) = inst(s2, e2, c, d);
            (s2, e2, c2, d2)
        }
        RefineMode::InstanceFirst => {
            let (c2, d2) = inst(s, e, c, d);
            let (s2, e2) = bound(s, e, c2, d2);
            (s2, e2, c2, d2)
        }
    };
    QueryPositions {
        s: s.clamp(0.0, 1.0),
        e: e.clamp(0.0, 1.0),
        c: c.clamp(0.0, 1.0),
        d: d.clamp(0.0, 1.0),
    }
}

/// Position vectors `[N]` of one aligned query set on the graph.
#[derive(Clone, Copy)]
struct PosVars<'g> {
    s: Var<'g>,
    e: Var<'g>,
    c: Var<'g>,
    d: Var<'g>,
}

fn refine_vars<'g>(p: PosVars<'g>, mode: RefineMode) -> PosVars<'g> {
    let inst = |s: Var<'g>, e: Var<'g>, c: Var<'g>, d: Var<'g>| {
        (
            c.add(s.add(e).scale(0.5)).scale(0.5),
            d.add(e.sub(s)).scale(0.5),
        )
    };
    let bound = |s: Var<'g>, e: Var<'g>, c: Var<'g>, d: Var<'g>| {
        let half = d.scale(0.5);
        (s.add(c.sub(half)).scale(0.5), e.add(c.add(half)).scale(0.5))
    };
    let PosVars { s, e, c, d } = p;
    let (s, e, c, d) = match mode {
        RefineMode::Off => return p,
        RefineMode::Parallel | RefineMode::PositionAndContent => {
            let (c2, d2) = inst(s, e, c, d);
            let (s2, e2) = bound(s, e, c, d);
            (s2, e2, c2, d2)
        }
        RefineMode::BoundaryFirst => {
            let (s2, e2) = bound(s, e, c, d);
            let (c2, d2) = inst(s2, e2, c, d);
            (s2, e2, c2, d2)
        }
        RefineMode::InstanceFirst => {
            let (c2, d2) = inst(s, e, c, d);
            let (s2, e2) = bound(s, e, c2, d2);
            (s2, e2, c2, d2)
        }
    };
    PosVars {
        s: s.clamp(0.0, 1.0),
        e: e.clamp(0.0, 1.0),
        c: c.clamp(0.0, 1.0),
        d: d.clamp(0.0, 1.0),
    }
}

/// Sigmoid-space update `σ(Δ + σ⁻¹(pos))`.
pub fn shift_position(pos: f64, delta: f64) -> f64 {
    sigmoid(delta + crate::numerics::inverse_sigmoid(pos))
}

fn shift_var<'g>(pos: Var<'g>, delta: Var<'g>) -> Var<'g> {
    delta.add(pos.inverse_sigmoid()).sigmoid()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Branching {
    #[default]
    TwoBranch,
    /// One decoder over the whole feature map for every query group.
    Shared,
}

impl FromStr for Branching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-branch" => Ok(Self::TwoBranch),
            "shared" => Ok(Self::Shared),
            _ => Err(Error::Config(format!("unknown branch mode `{s}` (expected two-branch or shared)"))),
        }
    }
}

impl fmt::Display for Branching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoBranch => "two-branch",
            Self::Shared => "shared",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub layout: QueryLayout,
    pub branching: Branching,
    pub refine: RefineMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.layout;
        if !l.boundary && !l.instance {
            return Err(Error::Config("decoder needs at least one query level".into()));
        }
        if self.branching == Branching::Shared && (l.split || !l.boundary || !l.instance) {
            return Err(Error::Config(
                "shared branching needs both query levels over the unpartitioned feature map".into(),
            ));
        }
        if self.refine == RefineMode::PositionAndContent && !(l.split && l.boundary && l.instance) {
            return Err(Error::Config(
                "refine=position-and-content needs both levels over partitioned features".into(),
            ));
        }
        for w in [l.boundary_width(), l.instance_width()] {
            if w % self.heads != 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "query width {w} must be divisible by 4 and by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    fn class_width(&self) -> usize {
        if self.layout.instance {
            self.layout.instance_width()
        } else {
            2 * self.layout.boundary_width()
        }
    }
}

/// Self-attention, deformable cross-attention and feed-forward block shared
/// by every query group routed through it.
#[derive(Clone, Debug)]
struct Branch {
    self_attn: SelfAttention,
    norm_sa: LayerNorm,
    cross: DeformAttn,
    norm_ca: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

struct GroupInput<'g> {
    con: Var<'g>,
    pos_embed: Tensor,
    refs: RefPoints<'g>,
    value: Var<'g>,
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        cfg: &DecoderConfig,
        kind: RefKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attn_cfg = DeformAttnConfig {
            heads: cfg.heads,
            points: cfg.points,
            channels: width,
        };
        Ok(Self {
            self_attn: SelfAttention::new(store, &format!("{name}.self_attn"), width, cfg.heads, rng)?,
            norm_sa: LayerNorm::new(store, &format!("{name}.norm_sa"), width),
            cross: DeformAttn::new(store, &format!("{name}.cross"), attn_cfg, kind, rng)?,
            norm_ca: LayerNorm::new(store, &format!("{name}.norm_ca"), width),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[width, cfg.ffn_dim, width], false, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width),
        })
    }

    fn forward<'g>(&self, g: &'g Graph, groups: Vec<GroupInput<'g>>, valid: usize) -> Result<Vec<Var<'g>>> {
        let sizes: Vec<usize> = groups.iter().map(|x| x.con.rows()).collect();
        let x = Var::concat_rows(&groups.iter().map(|x| x.con).collect::<Vec<_>>());
        let pe_all = Tensor::concat_rows(&groups.iter().map(|x| &x.pos_embed).collect::<Vec<_>>())?;
        let sa = self.self_attn.forward(g, x, g.constant(pe_all))?;
        let x = self.norm_sa.forward(g, x.add(sa));
        let mut out = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (grp, n) in groups.into_iter().zip(sizes) {
            let rows: Vec<usize> = (offset..offset + n).collect();
            offset += n;
            let con = x.index_rows(&rows);
            let pe = g.constant(grp.pos_embed);
            let ca = self.cross.forward(g, con.add(pe), grp.refs, grp.value, valid)?;
            let con = self.norm_ca.forward(g, con.add(ca));
            let f = self.ffn.forward(g, con);
            out.push(self.norm_ffn.forward(g, con.add(f)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct ContentMix {
    ffn: Mlp,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    boundary: Option<Branch>,
    instance: Option<Branch>,
    shared: Option<Branch>,
    boundary_reg: Option<Mlp>,
    instance_reg: Option<Mlp>,
    classifier: Linear,
    mix: Option<ContentMix>,
}

/// Differentiable `[N]` interval endpoints.
#[derive(Clone, Copy, Debug)]
pub struct IntervalVars<'g> {
    pub start: Var<'g>,
    pub end: Var<'g>,
}

impl IntervalVars<'_> {
    /// Clipped, ordered values.
    pub fn values(&self) -> Vec<(f64, f64)> {
        let s = self.start.value();
        let e = self.end.value();
        s.data()
            .iter()
            .zip(e.data())
            .map(|(&a, &b)| (a.min(b).clamp(0.0, 1.0), a.max(b).clamp(0.0, 1.0)))
            .collect()
    }
}

/// Output of one decoder layer (or of the encoder's dense head, restricted
/// to the selected proposals), ready for matching and loss.
#[derive(Clone, Debug)]
pub struct LayerPrediction<'g> {
    /// `[N, num_classes]`
    pub logits: Var<'g>,
    pub instance: Option<IntervalVars<'g>>,
    pub boundary: Option<IntervalVars<'g>>,
}

impl<'g> LayerPrediction<'g> {
    /// Interval used for matching and reporting: instance level when present.
    pub fn reported(&self) -> IntervalVars<'g> {
        self.instance.or(self.boundary).expect("at least one level")
    }

    pub fn detections(&self) -> DetectionSet {
        let logits = self.logits.value();
        self.reported()
            .values()
            .into_iter()
            .enumerate()
            .map(|(k, (start, end))| Detection {
                start,
                end,
                scores: logits.row(k).iter().map(|&x| sigmoid(x)).collect(),
            })
            .collect()
    }
}

/// One predicted action candidate in window-normalized time.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub scores: Vec<f64>,
}

pub type DetectionSet = Vec<Detection>;

/// Every layer's predictions plus the positions after each layer.
#[derive(Clone, Debug)]
pub struct DecodeOutput<'g> {
    pub layers: Vec<LayerPrediction<'g>>,
    /// Per layer, per query: `(s, e, c, d)`, absent levels reported as NaN.
    pub positions: Vec<Vec<QueryPositions>>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.layout;
        let (bw, iw, d) = (l.boundary_width(), l.instance_width(), cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("{name}.layer{i}");
            let (mut boundary, mut instance, mut shared) = (None, None, None);
            match cfg.branching {
                Branching::Shared => {
                    shared = Some(Branch::new(store, &format!("{p}.shared"), d, &cfg, RefKind::Span, rng)?);
                }
                Branching::TwoBranch => {
                    if l.boundary {
                        boundary = Some(Branch::new(store, &format!("{p}.boundary"), bw, &cfg, RefKind::Boundary, rng)?);
                    }
                    if l.instance {
                        instance = Some(Branch::new(store, &format!("{p}.instance"), iw, &cfg, RefKind::Span, rng)?);
                    }
                }
            }
            let boundary_reg = l
                .boundary
                .then(|| Mlp::new(store, &format!("{p}.boundary_reg"), &[bw, d, d, 1], true, rng));
            let instance_reg = l
                .instance
                .then(|| Mlp::new(store, &format!("{p}.instance_reg"), &[iw, d, d, 2], true, rng));
            let classifier = Linear::new(store, &format!("{p}.cls"), cfg.class_width(), cfg.num_classes, rng);
            let prior = -((1.0 - crate::encoder::CLASS_PRIOR) / crate::encoder::CLASS_PRIOR).ln();
            store.set(classifier.bias, Tensor::full(&[cfg.num_classes], prior))?;
            let mix = (cfg.refine == RefineMode::PositionAndContent).then(|| ContentMix {
                ffn: Mlp::new(store, &format!("{p}.mix"), &[d, cfg.ffn_dim, d], false, rng),
                norm: LayerNorm::new(store, &format!("{p}.mix_norm"), d),
            });
            layers.push(DecoderLayer {
                boundary,
                instance,
                shared,
                boundary_reg,
                instance_reg,
                classifier,
                mix,
            });
        }
        Ok(Self { cfg, layers })
    }

    /// Runs every layer; returns per-layer predictions and positions.
    pub fn decode<'g>(&self, g: &'g Graph, queries: Queries<'g>, enc: &EncoderOutput<'g>) -> Result<DecodeOutput<'g>> {
        if queries.is_empty() {
            return Err(Error::EmptyInput("decoder received no queries".into()));
        }
        let mut q = queries;
        let mut out = DecodeOutput {
            layers: Vec::with_capacity(self.layers.len()),
            positions: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let (next, pred, pos) = self.layer_forward(g, layer, q, enc)?;
            out.layers.push(pred);
            out.positions.push(pos);
            q = next;
        }
        Ok(out)
    }

    fn layer_forward<'g>(
        &self,
        g: &'g Graph,
        layer: &DecoderLayer,
        q: Queries<'g>,
        enc: &EncoderOutput<'g>,
    ) -> Result<(Queries<'g>, LayerPrediction<'g>, Vec<QueryPositions>)> {
        let l = self.cfg.layout;
        let (bw, iw) = (l.boundary_width(), l.instance_width());
        let (vs, ve, vi) = if l.split {
            (enc.x_s, enc.x_e, enc.x_i)
        } else {
            (enc.x_enc, enc.x_enc, enc.x_enc)
        };
        let vals = |v: Var<'g>| v.value().data().to_vec();
        let bgroups = q.boundary.map(|b| {
            [
                GroupInput {
                    con: b.s_con,
                    pos_embed: sine_embed(&vals(b.s_pos), bw),
                    refs: RefPoints::Boundary(b.s_pos),
                    value: vs,
                },
                GroupInput {
                    con: b.e_con,
                    pos_embed: sine_embed(&vals(b.e_pos), bw),
                    refs: RefPoints::Boundary(b.e_pos),
                    value: ve,
                },
            ]
        });
        let igroup = q.instance.map(|i| GroupInput {
            con: i.con,
            pos_embed: span_embed(&vals(i.center), &vals(i.duration), iw),
            refs: RefPoints::Span {
                center: i.center,
                duration: i.duration,
            },
            value: vi,
        });

        let valid = enc.valid;
        let (mut bcon, mut icon): (Option<(Var<'g>, Var<'g>)>, Option<Var<'g>>) = (None, None);
        if let Some(shared) = &layer.shared {
            let mut groups: Vec<GroupInput<'g>> = bgroups.into_iter().flatten().collect();
            groups.extend(igroup);
            let o = shared.forward(g, groups, valid)?;
            bcon = Some((o[0], o[1]));
            icon = Some(o[2]);
        } else {
            if let (Some(br), Some(gr)) = (&layer.boundary, bgroups) {
                let o = br.forward(g, gr.into(), valid)?;
                bcon = Some((o[0], o[1]));
            }
            if let (Some(br), Some(gr)) = (&layer.instance, igroup) {
                icon = Some(br.forward(g, vec![gr], valid)?[0]);
            }
        }

        let n = q.len();
        let boundary = match (q.boundary, bcon, &layer.boundary_reg) {
            (Some(b), Some((s_con, e_con)), Some(reg)) => {
                let ds = reg.forward(g, s_con).reshape(&[n]);
                let de = reg.forward(g, e_con).reshape(&[n]);
                Some(BoundaryQueries {
                    s_con,
                    e_con,
                    s_pos: shift_var(b.s_pos, ds),
                    e_pos: shift_var(b.e_pos, de),
                })
            }
            _ => None,
        };
        let instance = match (q.instance, icon, &layer.instance_reg) {
            (Some(i), Some(con), Some(reg)) => {
                let delta = reg.forward(g, con);
                Some(InstanceQueries {
                    con,
                    center: shift_var(i.center, delta.narrow_cols(0, 1).reshape(&[n])),
                    duration: shift_var(i.duration, delta.narrow_cols(1, 1).reshape(&[n])),
                })
            }
            _ => None,
        };

        let (mut boundary, mut instance) = (boundary, instance);
        if let (Some(b), Some(i)) = (boundary.as_mut(), instance.as_mut()) {
            if let Some(mix) = &layer.mix {
                let z = Var::concat_cols(&[b.s_con, b.e_con, i.con]);
                let z = mix.norm.forward(g, z.add(mix.ffn.forward(g, z)));
                b.s_con = z.narrow_cols(0, bw);
                b.e_con = z.narrow_cols(bw, bw);
                i.con = z.narrow_cols(2 * bw, iw);
            }
            let r = refine_vars(
                PosVars {
                    s: b.s_pos,
                    e: b.e_pos,
                    c: i.center,
                    d: i.duration,
                },
                self.cfg.refine,
            );
            b.s_pos = r.s;
            b.e_pos = r.e;
            i.center = r.c;
            i.duration = r.d;
        }

        let class_in = match (&instance, &boundary) {
            (Some(i), _) => i.con,
            (None, Some(b)) => Var::concat_cols(&[b.s_con, b.e_con]),
            (None, None) => unreachable!("validated"),
        };
        let logits = layer.classifier.forward(g, class_in);
        let pred = LayerPrediction {
            logits,
            instance: instance.map(|i| {
                let half = i.duration.scale(0.5);
                IntervalVars {
                    start: i.center.sub(half),
                    end: i.center.add(half),
                }
            }),
            boundary: boundary.map(|b| IntervalVars {
                start: b.s_pos.minimum(b.e_pos),
                end: b.s_pos.maximum(b.e_pos),
            }),
        };

        let nan = vec![f64::NAN; n];
        let (s, e) = boundary.map_or((nan.clone(), nan.clone()), |b| (vals(b.s_pos), vals(b.e_pos)));
        let (c, d) = instance.map_or((nan.clone(), nan), |i| (vals(i.center), vals(i.duration)));
        let positions = (0..n)
            .map(|k| QueryPositions {
                s: s[k],
                e: e[k],
                c: c[k],
                d: d[k],
            })
            .collect();

        let next = Queries {
            boundary: boundary.map(|b| BoundaryQueries {
                s_pos: b.s_pos.detach(),
                e_pos: b.e_pos.detach(),
                ..b
            }),
            instance: instance.map(|i| InstanceQueries {
                center: i.center.detach(),
                duration: i.duration.detach(),
                ..i
            }),
            provenance: q.provenance,
        };
        Ok((next, pred, positions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(s: f64, e: f64, c: f64, d: f64) -> QueryPositions {
        QueryPositions { s, e, c, d }
    }

    #[test]
    fn consistent_state_is_fixed_point() {
        let p = pos(0.2, 0.6, 0.4, 0.4);
        let r = mutual_refine(p, RefineMode::Parallel);
        assert!((r.s - 0.2).abs() < 1e-12);
        assert!((r.e - 0.6).abs() < 1e-12);
        assert!((r.c - 0.4).abs() < 1e-12);
        assert!((r.d - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_parallel_update() {
        let r = mutual_refine(pos(0.2, 0.7, 0.5, 0.4), RefineMode::Parallel);
        assert!((r.c - 0.475).abs() < 1e-15);
        assert!((r.d - 0.45).abs() < 1e-15);
        assert!((r.s - 0.25).abs() < 1e-15);
        assert!((r.e - 0.7).abs() < 1e-15);
    }

    #[test]
    fn sequential_variants_use_updated_values() {
        let p = pos(0.2, 0.7, 0.5, 0.4);
        // boundary first: s=0.25, e=0.7, then c=(0.5+0.475)/2, d=(0.4+0.45)/2
        let b = mutual_refine(p, RefineMode::BoundaryFirst);
        assert!((b.c - 0.4875).abs() < 1e-12 && (b.d - 0.425).abs() < 1e-12);
        // instance first: c=0.475, d=0.45, then s=(0.2+0.25)/2, e=(0.7+0.7)/2
        let i = mutual_refine(p, RefineMode::InstanceFirst);
        assert!((i.s - 0.225).abs() < 1e-12 && (i.e - 0.7).abs() < 1e-12);
        assert_eq!(mutual_refine(p, RefineMode::Off), p);
    }

    #[test]
    fn graph_refine_matches_scalar() {
        let p = pos(0.1, 0.8, 0.3, 0.5);
        for mode in [
            RefineMode::Parallel,
            RefineMode::BoundaryFirst,
            RefineMode::InstanceFirst,
            RefineMode::Off,
        ] {
            let g = Graph::new();
            let v = |x: f64| g.constant(Tensor::vector(vec![x]));
            let r = refine_vars(
                PosVars {
                    s: v(p.s),
                    e: v(p.e),
                    c: v(p.c),
                    d: v(p.d),
                },
                mode,
            );
            let expect = mutual_refine(p, mode);
            assert!((r.s.value().data()[0] - expect.s).abs() < 1e-15);
            assert!((r.e.value().data()[0] - expect.e).abs() < 1e-15);
            assert!((r.c.value().data()[0] - expect.c).abs() < 1e-15);
            assert!((r.d.value().data()[0] - expect.d).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_space_shift() {
        assert!((shift_position(0.3, 0.0) - 0.3).abs() < 1e-12);
        assert!((shift_position(0.5, 3f64.ln()) - 0.75).abs() < 1e-12);
        for d in [-1e6, -30.0, 30.0, 1e6] {
            let p = shift_position(0.5, d);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn refine_mode_parses() {
        for m in [
            RefineMode::Parallel,
            RefineMode::BoundaryFirst,
            RefineMode::InstanceFirst,
            RefineMode::Off,
            RefineMode::PositionAndContent,
        ] {
            assert_eq!(m.to_string().parse::<RefineMode>().unwrap(), m);
        }
        assert_eq!("shared".parse::<Branching>().unwrap(), Branching::Shared);
        assert!("both".parse::<Branching>().is_err());
    }
}
