//! Aligned instance-level and boundary-level decoder queries.
//!
//! Query `k` of every group is tied to the same origin: either the `k`-th
//! selected encoder proposal or the `k`-th learned embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{EncoderOutput, EncoderProposal};
use crate::error::{Error, Result};
use crate::numerics::layers::sine_embed;
use crate::numerics::{init, inverse_sigmoid, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Positions from proposal timestamps, content from split proposal features.
    #[default]
    Joint,
    /// Positions from proposals, content from learned embeddings.
    PositionOnly,
    /// Positions from proposals, content from the sine embedding of those positions.
    FullPosition,
    /// Positions and content both learned.
    Learned,
}

impl InitMode {
    pub fn uses_proposals(self) -> bool {
        self != InitMode::Learned
    }

    fn learned_content(self) -> bool {
        matches!(self, InitMode::PositionOnly | InitMode::Learned)
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "position-only" => Ok(Self::PositionOnly),
            "full-position" => Ok(Self::FullPosition),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::Config(format!(
                "unknown init mode `{s}` (expected joint, position-only, full-position or learned)"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::PositionOnly => "position-only",
            Self::FullPosition => "full-position",
            Self::Learned => "learned",
        })
    }
}

/// Where query `k` came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    /// Snippet index of the encoder proposal.
    Proposal(usize),
    /// Slot of the learned embedding.
    Learned(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Instance,
    Boundary,
}

/// Which query groups exist and how wide their content vectors are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryLayout {
    pub d_model: usize,
    pub boundary: bool,
    pub instance: bool,
    /// Content comes from the channel partition (`D/4`, `D/4`, `D/2`)
    /// rather than the whole feature.
    pub split: bool,
}

impl QueryLayout {
    pub fn dual(d_model: usize) -> Self {
        Self {
            d_model,
            boundary: true,
            instance: true,
            split: true,
        }
    }

    pub fn boundary_width(&self) -> usize {
        if self.split {
            self.d_model / 4
        } else {
            self.d_model
        }
    }

    pub fn instance_width(&self) -> usize {
        if self.split {
            self.d_model / 2
        } else {
            self.d_model
        }
    }
}

/// Plain-value snapshot of a query set.
#[derive(Clone, Debug, PartialEq)]
pub struct DualQuerySet {
    pub i_con: Option<Tensor>,
    /// `(center, duration)` per query.
    pub i_pos: Option<Vec<(f64, f64)>>,
    pub s_con: Option<Tensor>,
    pub e_con: Option<Tensor>,
    pub s_pos: Option<Vec<f64>>,
    pub e_pos: Option<Vec<f64>>,
    pub provenance: Vec<QuerySource>,
}

impl DualQuerySet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

fn check_proposal(p: &EncoderProposal) -> Result<()> {
    if !(p.start.is_finite() && p.end.is_finite()) || p.end < p.start {
        return Err(Error::Data(format!(
            "proposal at snippet {} has end {} before start {}",
            p.source_index, p.end, p.start
        )));
    }
    Ok(())
}

fn span_of(p: &EncoderProposal) -> (f64, f64) {
    ((p.start + p.end) / 2.0, p.end - p.start)
}

/// Sine embedding of a span: center and duration each fill half the width.
pub fn span_embed(center: &[f64], duration: &[f64], width: usize) -> Tensor {
    let c = sine_embed(center, width / 2);
    let d = sine_embed(duration, width / 2);
    Tensor::concat_cols(&[&c, &d]).expect("same row count")
}

/// Builds the query set from proposals without any learned state. Supports
/// the proposal-driven content modes (`Joint`, `FullPosition`).
pub fn init_queries(selected: &[EncoderProposal], mode: InitMode, layout: QueryLayout) -> Result<DualQuerySet> {
    if mode.learned_content() {
        return Err(Error::Config(format!("init mode `{mode}` needs learned embeddings")));
    }
    for p in selected {
        check_proposal(p)?;
    }
    let d = layout.d_model;
    if selected.iter().any(|p| p.feature.len() != d) {
        return Err(Error::Shape(format!("proposal features must have {d} channels")));
    }
    let feats = Tensor::from_rows(&selected.iter().map(|p| p.feature.clone()).collect::<Vec<_>>())?;
    let starts: Vec<f64> = selected.iter().map(|p| p.start).collect();
    let ends: Vec<f64> = selected.iter().map(|p| p.end).collect();
    let spans: Vec<(f64, f64)> = selected.iter().map(span_of).collect();
    let (bw, iw) = (layout.boundary_width(), layout.instance_width());
    let (s_con, e_con, i_con) = match mode {
        InitMode::Joint if layout.split => {
            let q = d / 4;
            (feats.narrow_cols(0, q), feats.narrow_cols(q, q), feats.narrow_cols(2 * q, d - 2 * q))
        }
        InitMode::Joint => (feats.clone(), feats.clone(), feats),
        InitMode::FullPosition => {
            let (c, w): (Vec<f64>, Vec<f64>) = spans.iter().copied().unzip();
            (sine_embed(&starts, bw), sine_embed(&ends, bw), span_embed(&c, &w, iw))
        }
        InitMode::PositionOnly | InitMode::Learned => unreachable!(),
    };
    let boundary = layout.boundary;
    let instance = layout.instance;
    Ok(DualQuerySet {
        i_con: instance.then_some(i_con),
        i_pos: instance.then_some(spans),
        s_con: boundary.then_some(s_con),
        e_con: boundary.then_some(e_con),
        s_pos: boundary.then_some(starts),
        e_pos: boundary.then_some(ends),
        provenance: selected.iter().map(|p| QuerySource::Proposal(p.source_index)).collect(),
    })
}

/// Converts an instance span to a clipped interval.
pub fn span_to_interval(center: f64, duration: f64) -> (f64, f64) {
    (
        (center - duration / 2.0).clamp(0.0, 1.0),
        (center + duration / 2.0).clamp(0.0, 1.0),
    )
}

/// Orders and clips a boundary pair.
pub fn boundary_to_interval(s: f64, e: f64) -> (f64, f64) {
    (s.min(e).clamp(0.0, 1.0), s.max(e).clamp(0.0, 1.0))
}

/// Interval of query `k` at `level`, or `None` if that level is absent.
pub fn positions_to_interval(q: &DualQuerySet, k: usize, level: Level) -> Option<(f64, f64)> {
    match level {
        Level::Instance => q.i_pos.as_ref().map(|p| span_to_interval(p[k].0, p[k].1)),
        Level::Boundary => match (&q.s_pos, &q.e_pos) {
            (Some(s), Some(e)) => Some(boundary_to_interval(s[k], e[k])),
            _ => None,
        },
    }
}

/// Boundary query group attached to a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryQueries<'g> {
    pub s_con: Var<'g>,
    pub e_con: Var<'g>,
    /// `[N]`
    pub s_pos: Var<'g>,
    /// `[N]`
    pub e_pos: Var<'g>,
}

/// Instance query group attached to a graph.
#[derive(Clone, Copy, Debug)]
pub struct InstanceQueries<'g> {
    pub con: Var<'g>,
    /// `[N]`
    pub center: Var<'g>,
    /// `[N]`
    pub duration: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Queries<'g> {
    pub boundary: Option<BoundaryQueries<'g>>,
    pub instance: Option<InstanceQueries<'g>>,
    pub provenance: Vec<QuerySource>,
}

impl Queries<'_> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn snapshot(&self) -> DualQuerySet {
        let vals = |v: Var<'_>| v.value().data().to_vec();
        DualQuerySet {
            i_con: self.instance.map(|q| (*q.con.value()).clone()),
            i_pos: self
                .instance
                .map(|q| vals(q.center).into_iter().zip(vals(q.duration)).collect()),
            s_con: self.boundary.map(|q| (*q.s_con.value()).clone()),
            e_con: self.boundary.map(|q| (*q.e_con.value()).clone()),
            s_pos: self.boundary.map(|q| vals(q.s_pos)),
            e_pos: self.boundary.map(|q| vals(q.e_pos)),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct LearnedContent {
    s: ParamId,
    e: ParamId,
    i: ParamId,
}

#[derive(Clone, Debug)]
struct LearnedPositions {
    s: ParamId,
    e: ParamId,
    /// `[N, 2]` logits of (center, duration).
    i: ParamId,
}

/// Owns whatever learned state an init mode needs and builds the query set
/// for one window.
#[derive(Clone, Debug)]
pub struct QueryInit {
    pub layout: QueryLayout,
    pub mode: InitMode,
    pub num_queries: usize,
    content: Option<LearnedContent>,
    positions: Option<LearnedPositions>,
}

impl QueryInit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: QueryLayout,
        mode: InitMode,
        num_queries: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let n = num_queries;
        let content = mode.learned_content().then(|| {
            let (bw, iw) = (layout.boundary_width(), layout.instance_width());
            LearnedContent {
                s: store.add(format!("{name}.start_content"), init::normal(rng, &[n, bw], 1.0)),
                e: store.add(format!("{name}.end_content"), init::normal(rng, &[n, bw], 1.0)),
                i: store.add(format!("{name}.instance_content"), init::normal(rng, &[n, iw], 1.0)),
            }
        });
        let positions = (mode == InitMode::Learned).then(|| {
            let mut logit = |lo: f64, hi: f64| inverse_sigmoid(rng.random_range(lo..hi));
            let s: Vec<f64> = (0..n).map(|_| logit(0.0, 1.0)).collect();
            let e: Vec<f64> = (0..n).map(|_| logit(0.0, 1.0)).collect();
            let mut i = Vec::with_capacity(2 * n);
            for _ in 0..n {
                i.push(logit(0.05, 0.95));
                i.push(inverse_sigmoid(0.1));
            }
            LearnedPositions {
                s: store.add(format!("{name}.start_logit"), Tensor::vector(s)),
                e: store.add(format!("{name}.end_logit"), Tensor::vector(e)),
                i: store.add(format!("{name}.instance_logit"), Tensor::new(&[n, 2], i).expect("shape")),
            }
        });
        Self {
            layout,
            mode,
            num_queries,
            content,
            positions,
        }
    }

    /// Builds queries for one window from the encoder output and the
    /// selected proposal indices (ignored by `Learned`).
    pub fn build<'g>(&self, g: &'g Graph, enc: &EncoderOutput<'g>, selected: &[usize]) -> Result<Queries<'g>> {
        let n = self.num_queries;
        let layout = self.layout;
        let (bw, iw) = (layout.boundary_width(), layout.instance_width());

        let (s_pos, e_pos, center, duration, provenance) = if self.mode.uses_proposals() {
            if selected.len() != n {
                return Err(Error::Shape(format!("expected {n} proposals, got {}", selected.len())));
            }
            let props = enc.proposals(selected);
            for p in &props {
                check_proposal(p)?;
            }
            let s: Vec<f64> = props.iter().map(|p| p.start).collect();
            let e: Vec<f64> = props.iter().map(|p| p.end).collect();
            let (c, d): (Vec<f64>, Vec<f64>) = props.iter().map(span_of).unzip();
            let prov = props.iter().map(|p| QuerySource::Proposal(p.source_index)).collect();
            let k = |v: Vec<f64>| g.constant(Tensor::vector(v));
            (k(s), k(e), k(c), k(d), prov)
        } else {
            let p = self.positions.as_ref().expect("learned positions");
            let i = g.param(p.i).sigmoid();
            (
                g.param(p.s).sigmoid(),
                g.param(p.e).sigmoid(),
                i.narrow_cols(0, 1).reshape(&[n]),
                i.narrow_cols(1, 1).reshape(&[n]),
                (0..n).map(QuerySource::Learned).collect(),
            )
        };

        let (s_con, e_con, i_con) = match self.mode {
            InitMode::Joint => {
                if layout.split {
                    (
                        enc.x_s.index_rows(selected),
                        enc.x_e.index_rows(selected),
                        enc.x_i.index_rows(selected),
                    )
                } else {
                    let f = enc.x_enc.index_rows(selected);
                    (f, f, f)
                }
            }
            InitMode::FullPosition => {
                let vals = |v: Var<'g>| v.value().data().to_vec();
                (
                    g.constant(sine_embed(&vals(s_pos), bw)),
                    g.constant(sine_embed(&vals(e_pos), bw)),
                    g.constant(span_embed(&vals(center), &vals(duration), iw)),
                )
            }
            InitMode::PositionOnly | InitMode::Learned => {
                let c = self.content.as_ref().expect("learned content");
                (g.param(c.s), g.param(c.e), g.param(c.i))
            }
        };

        Ok(Queries {
            boundary: layout.boundary.then_some(BoundaryQueries {
                s_con,
                e_con,
                s_pos,
                e_pos,
            }),
            instance: layout.instance.then_some(InstanceQueries {
                con: i_con,
                center,
                duration,
            }),
            provenance,
        })
    }
}
