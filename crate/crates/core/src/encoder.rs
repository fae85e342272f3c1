//! Snippet-level encoder, auxiliary dense detection head, and channel
//! partition of the encoded feature map.

use rand::Rng;

use crate::attention::{DeformAttn, DeformAttnConfig, RefKind, RefPoints};
use crate::error::{Error, Result};
use crate::numerics::layers::{sine_embed, LayerNorm, Linear, Mlp};
use crate::numerics::{inverse_sigmoid, sigmoid, Graph, ParamStore, Tensor, Var};

/// Prior probability used to bias classifier logits at initialization.
pub const CLASS_PRIOR: f64 = 0.01;
/// Initial duration proposed by the dense head at every position.
pub const INITIAL_DURATION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: DeformAttn,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

/// Classifier plus center/duration regressor applied at every snippet.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub classifier: Linear,
    pub regressor: Mlp,
}

impl DenseHead {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let classifier = Linear::new(store, &format!("{name}.cls"), d, num_classes, rng);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        store
            .set(classifier.bias, Tensor::full(&[num_classes], prior))
            .expect("bias shape");
        let regressor = Mlp::new(store, &format!("{name}.reg"), &[d, d, 2], true, rng);
        store
            .set(regressor.last().bias, Tensor::vector(vec![0.0, inverse_sigmoid(INITIAL_DURATION)]))
            .expect("bias shape");
        Self { classifier, regressor }
    }

    /// Dense proposals over all `T` rows of `x_enc`.
    pub fn forward<'g>(&self, g: &'g Graph, x_enc: Var<'g>) -> DenseProposals<'g> {
        let t = x_enc.rows();
        let logits = self.classifier.forward(g, x_enc);
        let reg = self.regressor.forward(g, x_enc);
        let anchors: Vec<f64> = (0..t).map(|i| inverse_sigmoid(grid_position(i, t))).collect();
        let center = reg
            .narrow_cols(0, 1)
            .reshape(&[t])
            .add(g.constant(Tensor::vector(anchors)))
            .sigmoid();
        let duration = reg.narrow_cols(1, 1).reshape(&[t]).sigmoid();
        DenseProposals {
            logits,
            center,
            duration,
        }
    }
}

/// Normalized position of row `i` on a grid of `len` rows.
pub fn grid_position(i: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        i as f64 / (len - 1) as f64
    }
}

/// Per-position outputs of the dense head, still attached to the graph.
#[derive(Clone, Copy, Debug)]
pub struct DenseProposals<'g> {
    /// `[T, num_classes]`
    pub logits: Var<'g>,
    /// `[T]`
    pub center: Var<'g>,
    /// `[T]`
    pub duration: Var<'g>,
}

impl DenseProposals<'_> {
    /// `(start, end)` per position, clipped to `[0, 1]`.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        let c = self.center.value();
        let d = self.duration.value();
        c.data()
            .iter()
            .zip(d.data())
            .map(|(&c, &d)| ((c - d / 2.0).clamp(0.0, 1.0), (c + d / 2.0).clamp(0.0, 1.0)))
            .collect()
    }

    /// Class probabilities `[T, num_classes]`.
    pub fn scores(&self) -> Tensor {
        let l = self.logits.value();
        Tensor::new(l.shape(), l.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape")
    }
}

/// Encoded features plus dense proposals for one window.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    pub x_enc: Var<'g>,
    pub x_s: Var<'g>,
    pub x_e: Var<'g>,
    pub x_i: Var<'g>,
    pub dense: DenseProposals<'g>,
    /// Rows of the window holding real (unpadded) snippets.
    pub valid: usize,
}

/// One dense proposal chosen for query initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderProposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub feature: Vec<f64>,
    pub source_index: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<EncoderLayer>,
    pub head: DenseHead,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        if !d.is_multiple_of(4) {
            return Err(Error::Config(format!("feature width {d} must be divisible by 4")));
        }
        let attn_cfg = DeformAttnConfig {
            heads: cfg.heads,
            points: cfg.points,
            channels: d,
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(EncoderLayer {
                    attn: DeformAttn::new(store, &format!("{p}.attn"), attn_cfg, RefKind::Snippet, rng)?,
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    ffn: Mlp::new(store, &format!("{p}.ffn"), &[d, cfg.ffn_dim, d], false, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = DenseHead::new(store, &format!("{name}.dense"), d, cfg.num_classes, rng);
        Ok(Self { cfg, layers, head })
    }

    /// Refines `x` (`[T, D]`, of which the first `valid` rows are real) and
    /// runs the dense head.
    pub fn encode<'g>(&self, g: &'g Graph, x: Var<'g>, valid: usize) -> Result<EncoderOutput<'g>> {
        let (t, d) = (x.rows(), x.cols());
        if t == 0 || valid == 0 {
            return Err(Error::EmptyInput("encoder input has no snippets".into()));
        }
        if d != self.cfg.d_model {
            return Err(Error::Config(format!(
                "encoder expects {} channels, input has {d}",
                self.cfg.d_model
            )));
        }
        let grid: Vec<f64> = (0..t).map(|i| grid_position(i, t)).collect();
        let mut h = x;
        if !self.layers.is_empty() {
            let pos = g.constant(sine_embed(&grid, d));
            let refs = g.constant(Tensor::vector(grid));
            for layer in &self.layers {
                let q = h.add(pos);
                let a = layer
                    .attn
                    .forward(g, q, RefPoints::Snippet { pos: refs, len: t }, h, valid)?;
                h = layer.norm1.forward(g, h.add(a));
                let f = layer.ffn.forward(g, h);
                h = layer.norm2.forward(g, h.add(f));
            }
        }
        let (x_s, x_e, x_i) = partition(h);
        let dense = self.head.forward(g, h);
        Ok(EncoderOutput {
            x_enc: h,
            x_s,
            x_e,
            x_i,
            dense,
            valid: valid.min(t),
        })
    }
}

/// Splits channels into start `[0, D/4)`, end `[D/4, D/2)` and instance
/// `[D/2, D)` groups.
pub fn partition(x: Var<'_>) -> (Var<'_>, Var<'_>, Var<'_>) {
    let d = x.cols();
    let q = d / 4;
    (x.narrow_cols(0, q), x.narrow_cols(q, q), x.narrow_cols(2 * q, d - 2 * q))
}

/// Tensor form of [`partition`].
pub fn partition_tensor(x: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = x.cols();
    let q = d / 4;
    (x.narrow_cols(0, q), x.narrow_cols(q, q), x.narrow_cols(2 * q, d - 2 * q))
}

/// Indices of the `n` highest-scoring positions, ranked by the maximum class
/// score, descending, ties to the lower index. Only the first `valid`
/// positions compete unless fewer than `n` of them exist.
pub fn select_topk(scores: &Tensor, valid: usize, n: usize) -> Result<Vec<usize>> {
    let t = scores.rows();
    if n > t {
        return Err(Error::Config(format!("cannot select {n} proposals from {t} positions")));
    }
    let pool = if valid >= n { valid.min(t) } else { t };
    let mut keyed: Vec<(usize, f64)> = (0..pool)
        .map(|i| (i, scores.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    keyed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(keyed.into_iter().take(n).map(|(i, _)| i).collect())
}

impl EncoderOutput<'_> {
    /// Materializes the proposals at `indices`.
    pub fn proposals(&self, indices: &[usize]) -> Vec<EncoderProposal> {
        let scores = self.dense.scores();
        let intervals = self.dense.intervals();
        let feats = self.x_enc.value();
        indices
            .iter()
            .map(|&i| EncoderProposal {
                start: intervals[i].0,
                end: intervals[i].1,
                score: scores.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max),
                feature: feats.row(i).to_vec(),
                source_index: i,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, d: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: d,
            layers,
            heads: 2,
            points: 2,
            ffn_dim: 2 * d,
            num_classes: 3,
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", cfg(0, 8), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = init::normal(&mut rng, &[6, 8], 1.0);
        let out = enc.encode(&g, g.constant(x.clone()), 6).unwrap();
        assert_eq!(*out.x_enc.value(), x);
    }

    #[test]
    fn rejects_width_not_divisible_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        assert!(matches!(
            Encoder::new(&mut store, "enc", cfg(1, 6), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn paper_scale_partition_widths() {
        let x = Tensor::zeros(&[256, 256]);
        let (s, e, i) = partition_tensor(&x);
        assert_eq!(s.shape(), &[256, 64]);
        assert_eq!(e.shape(), &[256, 64]);
        assert_eq!(i.shape(), &[256, 128]);
    }

    #[test]
    fn partition_layout_and_reconstruction() {
        let x = Tensor::new(&[1, 8], (0..8).map(f64::from).collect()).unwrap();
        let (s, e, i) = partition_tensor(&x);
        assert_eq!(s.data(), &[0.0, 1.0]);
        assert_eq!(e.data(), &[2.0, 3.0]);
        assert_eq!(i.data(), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(Tensor::concat_cols(&[&s, &e, &i]).unwrap(), x);
    }

    #[test]
    fn initial_dense_proposals_are_centered_with_prior_duration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", cfg(1, 8), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let x = g.constant(init::normal(&mut rng, &[11, 8], 1.0));
        let out = enc.encode(&g, x, 11).unwrap();
        let c = out.dense.center.value();
        let d = out.dense.duration.value();
        for i in 0..11 {
            let expect = sigmoid(inverse_sigmoid(grid_position(i, 11)));
            assert!((c.data()[i] - expect).abs() < 1e-9);
            assert!((d.data()[i] - 0.1).abs() < 1e-12);
        }
        // position 0: centered at ~0, so the start clips to 0
        let iv = out.dense.intervals();
        assert_eq!(iv[0].0, 0.0);
        assert!((iv[0].1 - (c.data()[0] + 0.05)).abs() < 1e-12);
        for (s, e) in iv {
            assert!(0.0 <= s && s <= e && e <= 1.0);
        }
    }

    #[test]
    fn encoder_output_is_finite() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, "enc", cfg(2, 16), &mut rng).unwrap();
            let g = Graph::with_params(&store);
            let x = g.constant(init::normal(&mut rng, &[20, 16], 3.0));
            let out = enc.encode(&g, x, 20).unwrap();
            assert!(out.x_enc.value().is_finite());
            let s = out.dense.scores();
            assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::new(&[3, 1], vec![0.9, 0.1, 0.5]).unwrap();
        assert_eq!(select_topk(&s, 3, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&s, 3, 3).unwrap(), vec![0, 2, 1]);
        let eq = Tensor::full(&[4, 2], 0.3);
        assert_eq!(select_topk(&eq, 4, 3).unwrap(), vec![0, 1, 2]);
        assert!(select_topk(&s, 3, 4).is_err());
    }

    #[test]
    fn topk_uses_max_over_classes_and_skips_padding() {
        let s = Tensor::new(&[4, 2], vec![0.1, 0.2, 0.05, 0.6, 0.3, 0.3, 0.99, 0.99]).unwrap();
        // row 3 is padding
        assert_eq!(select_topk(&s, 3, 2).unwrap(), vec![1, 2]);
        // not enough real rows: padding competes
        assert_eq!(select_topk(&s, 1, 2).unwrap(), vec![3, 1]);
    }
}
