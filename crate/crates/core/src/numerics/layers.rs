//! Small parameterized building blocks.

use rand::Rng;

use super::{init, Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init::xavier_uniform(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.matmul(g.param(self.weight)).add_row(g.param(self.bias))
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.layer_norm_rows(Self::EPS)
            .mul_row(g.param(self.gain))
            .add_row(g.param(self.shift))
    }
}

/// Perceptron with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output. With `zero_last` the
    /// final layer starts at zero so the initial output is its bias.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], zero_last: bool, rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has layers")
    }

    pub fn forward<'g>(&self, g: &'g Graph, mut x: Var<'g>) -> Var<'g> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < n {
                x = x.relu();
            }
        }
        x
    }
}

/// Fixed sinusoidal embedding of normalized scalars, `[n, dim]`.
///
/// Frequencies are geometric from `2π` to `2π·64` so one period of the
/// slowest pair spans the whole unit interval.
pub fn sine_embed(positions: &[f64], dim: usize) -> Tensor {
    assert!(dim.is_multiple_of(2) && dim > 0, "sine embedding needs an even width");
    let pairs = dim / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|i| {
            let e = if pairs > 1 { i as f64 / (pairs - 1) as f64 } else { 0.0 };
            2.0 * std::f64::consts::PI * 64f64.powf(e)
        })
        .collect();
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for &w in &freqs {
            data.push((w * p).sin());
            data.push((w * p).cos());
        }
    }
    Tensor::from_parts(vec![positions.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_last_mlp_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 8, 2], true, &mut rng);
        store.value_mut(mlp.last().bias).data_mut()[1] = 0.7;
        let g = Graph::with_params(&store);
        let x = g.constant(init::normal(&mut rng, &[3, 4], 1.0));
        let y = mlp.forward(&g, x).value();
        for i in 0..3 {
            assert_eq!(y.get2(i, 0), 0.0);
            assert_eq!(y.get2(i, 1), 0.7);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap());
        let y = ln.forward(&g, x).value();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn sine_embed_shape_and_range() {
        let e = sine_embed(&[0.0, 0.5, 1.0], 8);
        assert_eq!(e.shape(), &[3, 8]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(e.get2(0, 1), 1.0);
    }
}
