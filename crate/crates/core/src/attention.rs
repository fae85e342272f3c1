//! Multi-head self-attention and 1-D deformable cross-attention.
//!
//! Deformable attention computes, for each query `q`,
//! `sum_m W_m [ sum_k A_mqk * W'_m * X(t_q + dt_mqk) ]` where the weights
//! `A` come from a softmax over the `K` points of each head and both `A`
//! and the offsets `dt` are linear maps of the query feature. `W'_m` and
//! `W_m` are the per-head column blocks of one value projection and one
//! output projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::Linear;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Base sampling window for boundary queries, in normalized time.
pub const BOUNDARY_BASE_WINDOW: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformAttnConfig {
    pub heads: usize,
    pub points: usize,
    pub channels: usize,
}

impl DeformAttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.channels == 0 {
            return Err(Error::Config("deformable attention sizes must be positive".into()));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// Which reference-point convention a module is built for. Determines the
/// initial spread of sampling offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefKind {
    Snippet,
    Boundary,
    Span,
}

/// Reference points for a batch of queries.
#[derive(Clone, Copy, Debug)]
pub enum RefPoints<'g> {
    /// One normalized position per query on a grid of `len` rows; offsets
    /// are measured in rows.
    Snippet { pos: Var<'g>, len: usize },
    /// One normalized position per query; offsets are scaled by a learned
    /// per-head factor times [`BOUNDARY_BASE_WINDOW`].
    Boundary(Var<'g>),
    /// `(center, duration)` per query; offsets are fractions of the
    /// duration added to the center.
    Span { center: Var<'g>, duration: Var<'g> },
}

impl RefPoints<'_> {
    fn count(&self) -> usize {
        match self {
            RefPoints::Snippet { pos, .. } | RefPoints::Boundary(pos) => pos.value().numel(),
            RefPoints::Span { center, .. } => center.value().numel(),
        }
    }
}

/// Learned state of one deformable attention block.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub cfg: DeformAttnConfig,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub output_proj: Linear,
    pub head_scale: ParamId,
}

impl DeformAttn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DeformAttnConfig,
        kind: RefKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, m, k) = (cfg.channels, cfg.heads, cfg.points);
        let value_proj = Linear::new(store, &format!("{name}.value_proj"), c, c, rng);
        let offsets = Linear::zeros(store, &format!("{name}.offsets"), c, m * k);
        let weights = Linear::zeros(store, &format!("{name}.weights"), c, m * k);
        let output_proj = Linear::new(store, &format!("{name}.output_proj"), c, c, rng);
        let head_scale = store.add(format!("{name}.head_scale"), Tensor::full(&[m], 1.0));

        // Spread initial sampling points to either side of the reference,
        // alternating direction between heads.
        let half_heads = m.div_ceil(2) as f64;
        let bias = store.value_mut(offsets.bias);
        for h in 0..m {
            let dir = if h % 2 == 0 { 1.0 } else { -1.0 };
            let reach = (h / 2 + 1) as f64 / half_heads;
            for p in 0..k {
                let unit = dir * reach * (p + 1) as f64 / k as f64;
                bias.data_mut()[h * k + p] = match kind {
                    RefKind::Snippet => unit * 2.0 * k as f64,
                    RefKind::Boundary => unit,
                    RefKind::Span => unit * k as f64,
                };
            }
        }
        Ok(Self {
            cfg,
            value_proj,
            offsets,
            weights,
            output_proj,
            head_scale,
        })
    }

    /// Normalized sampling positions and attention weights, each
    /// `[Q, heads * points]`.
    pub fn sampling<'g>(&self, g: &'g Graph, query: Var<'g>, refs: RefPoints<'g>) -> (Var<'g>, Var<'g>) {
        let (m, k) = (self.cfg.heads, self.cfg.points);
        let nq = query.rows();
        let off = self.offsets.forward(g, query);
        let attn = self
            .weights
            .forward(g, query)
            .reshape(&[nq * m, k])
            .softmax_rows()
            .reshape(&[nq, m * k]);
        let loc = match refs {
            RefPoints::Snippet { pos, len } => off.scale(1.0 / len.saturating_sub(1).max(1) as f64).add_col(pos),
            RefPoints::Boundary(pos) => {
                let idx: Vec<usize> = (0..m * k).map(|i| i / k).collect();
                let scale = g.param(self.head_scale).gather(idx, &[m * k]);
                off.mul_row(scale).scale(BOUNDARY_BASE_WINDOW).add_col(pos)
            }
            RefPoints::Span { center, duration } => off.mul_col(duration).scale(0.5 / k as f64).add_col(center),
        };
        (loc, attn)
    }

    /// Attends from `query` (`[Q, C]`) into `value` (`[T, C]`) around
    /// `refs`. Only the first `valid` rows of `value` are ever read.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        query: Var<'g>,
        refs: RefPoints<'g>,
        value: Var<'g>,
        valid: usize,
    ) -> Result<Var<'g>> {
        let c = self.cfg.channels;
        if query.cols() != c || value.cols() != c {
            return Err(Error::Config(format!(
                "deformable attention expects {c} channels, got query {} and value {}",
                query.cols(),
                value.cols()
            )));
        }
        if value.rows() == 0 || valid == 0 {
            return Err(Error::EmptyInput("deformable attention value map".into()));
        }
        if refs.count() != query.rows() {
            return Err(Error::Shape("one reference point per query required".into()));
        }
        let (loc, attn) = self.sampling(g, query, refs);
        let v = self.value_proj.forward(g, value);
        let sampled = v.deform_sample(loc, attn, self.cfg.heads, valid.min(value.rows()));
        Ok(self.output_proj.forward(g, sampled))
    }
}

/// Scaled dot-product self-attention. Queries and keys see
/// `content + position`; values see content only.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>, pos: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(g, x, pos)?.0)
    }

    /// Also returns each head's `[N, N]` attention matrix.
    pub fn forward_with_weights<'g>(
        &self,
        g: &'g Graph,
        x: Var<'g>,
        pos: Var<'g>,
    ) -> Result<(Var<'g>, Vec<Tensor>)> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput("self-attention over zero elements".into()));
        }
        if x.shape() != pos.shape() {
            return Err(Error::Shape(format!(
                "content {:?} and position {:?} disagree",
                x.shape(),
                pos.shape()
            )));
        }
        let dim = x.cols();
        let dh = dim / self.heads;
        let qk_in = x.add(pos);
        let q = self.q.forward(g, qk_in);
        let k = self.k.forward(g, qk_in);
        let v = self.v.forward(g, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow_cols(h * dh, dh);
            let kh = k.narrow_cols(h * dh, dh);
            let vh = v.narrow_cols(h * dh, dh);
            let a = qh.matmul_nt(kh).scale(scale).softmax_rows();
            weights.push((*a.value()).clone());
            outs.push(a.matmul(vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs) };
        Ok((self.o.forward(g, merged), weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    fn set_identity(store: &mut ParamStore, attn: &DeformAttn) {
        let c = attn.cfg.channels;
        store.set(attn.value_proj.weight, identity(c)).unwrap();
        store.set(attn.output_proj.weight, identity(c)).unwrap();
    }

    #[test]
    fn config_rejects_indivisible_channels() {
        let cfg = DeformAttnConfig {
            heads: 3,
            points: 2,
            channels: 8,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_point_zero_offset_is_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = DeformAttnConfig {
            heads: 1,
            points: 1,
            channels: 4,
        };
        let attn = DeformAttn::new(&mut store, "d", cfg, RefKind::Boundary, &mut rng).unwrap();
        set_identity(&mut store, &attn);
        store.set(attn.offsets.bias, Tensor::zeros(&[1])).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(init::normal(&mut rng, &[5, 4], 1.0));
        let z = g.constant(init::normal(&mut rng, &[2, 4], 1.0));
        let t = g.constant(Tensor::vector(vec![0.3, 0.81]));
        let out = attn.forward(&g, z, RefPoints::Boundary(t), x, 5).unwrap().value();
        let expect = x.linear_sample(t, 5).value();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn two_points_equal_weights_average_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = DeformAttnConfig {
            heads: 1,
            points: 2,
            channels: 2,
        };
        let attn = DeformAttn::new(&mut store, "d", cfg, RefKind::Snippet, &mut rng).unwrap();
        set_identity(&mut store, &attn);
        // reference 0 on a 2-row grid; offsets of 0 and 1 rows
        store.set(attn.offsets.bias, Tensor::vector(vec![0.0, 1.0])).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 3.0, 5.0, -1.0]).unwrap());
        let z = g.constant(init::normal(&mut rng, &[1, 2], 1.0));
        let pos = g.constant(Tensor::vector(vec![0.0]));
        let out = attn
            .forward(&g, z, RefPoints::Snippet { pos, len: 2 }, x, 2)
            .unwrap()
            .value();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn per_head_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DeformAttnConfig {
            heads: 4,
            points: 3,
            channels: 8,
        };
        let attn = DeformAttn::new(&mut store, "d", cfg, RefKind::Span, &mut rng).unwrap();
        let w = init::normal(&mut rng, &[8, 12], 1.0);
        store.set(attn.weights.weight, w).unwrap();
        let g = Graph::with_params(&store);
        let z = g.constant(init::normal(&mut rng, &[6, 8], 1.0));
        let center = g.constant(Tensor::vector(vec![0.5; 6]));
        let duration = g.constant(Tensor::vector(vec![0.2; 6]));
        let (_, a) = attn.sampling(&g, z, RefPoints::Span { center, duration });
        let a = a.value();
        for q in 0..6 {
            for h in 0..4 {
                let s: f64 = (0..3).map(|p| a.get2(q, h * 3 + p)).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!((0..3).all(|p| a.get2(q, h * 3 + p) >= 0.0));
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = DeformAttnConfig {
            heads: 2,
            points: 2,
            channels: 4,
        };
        let attn = DeformAttn::new(&mut store, "d", cfg, RefKind::Boundary, &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[3, 6]));
        let z = g.constant(Tensor::zeros(&[1, 4]));
        let t = g.constant(Tensor::vector(vec![0.5]));
        assert!(matches!(
            attn.forward(&g, z, RefPoints::Boundary(t), x, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn self_attention_singleton_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 4, 2, &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(init::normal(&mut rng, &[1, 4], 1.0));
        let pos = g.constant(init::normal(&mut rng, &[1, 4], 1.0));
        let (out, w) = sa.forward_with_weights(&g, x, pos).unwrap();
        assert!(w.iter().all(|a| (a.item() - 1.0).abs() < 1e-15));
        let expect = sa.o.forward(&g, sa.v.forward(&g, x)).value();
        assert!(out.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn self_attention_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 4, 2, &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[0, 4]));
        assert!(matches!(sa.forward(&g, x, x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn self_attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 4, &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(init::normal(&mut rng, &[5, 8], 2.0));
        let pos = g.constant(init::normal(&mut rng, &[5, 8], 1.0));
        let (_, w) = sa.forward_with_weights(&g, x, pos).unwrap();
        for a in &w {
            for r in 0..5 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 8, 2, &mut rng).unwrap();
        let x = init::normal(&mut rng, &[4, 8], 1.0);
        let pos = init::normal(&mut rng, &[4, 8], 1.0);
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let g = Graph::with_params(&store);
        let a = sa.forward(&g, g.constant(x.clone()), g.constant(pos.clone())).unwrap().value();
        let b = sa
            .forward(&g, g.constant(permute(&x)), g.constant(permute(&pos)))
            .unwrap()
            .value();
        assert!(permute(&a).max_abs_diff(&b) < 1e-12);
    }
}
