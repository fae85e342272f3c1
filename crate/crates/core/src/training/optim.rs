//! Parameter updates: AdamW, gradient clipping, learning-rate schedule and
//! parameter averaging.

use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
        for (id, trainable) in ids {
            let i = id.index();
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !trainable {
                continue;
            }
            let p = store.value_mut(id);
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Learning rate for zero-based `epoch`: `base` until the final `drop_epochs`
/// epochs, then `base · factor`.
pub fn learning_rate(epoch: usize, epochs: usize, base: f64, drop_epochs: usize, factor: f64) -> f64 {
    if epoch + drop_epochs >= epochs && drop_epochs > 0 {
        base * factor
    } else {
        base
    }
}

/// Exponential moving average of parameters with a warm-up ramp on the
/// decay: `decay · (1 − exp(−updates / ramp))`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub ramp: f64,
    updates: u64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Self {
            decay,
            ramp: 2000.0,
            updates: 0,
            shadow: store.iter().map(|(_, p)| (*p.value).clone()).collect(),
        }
    }

    pub fn current_decay(&self) -> f64 {
        self.decay * (1.0 - (-(self.updates as f64) / self.ramp).exp())
    }

    pub fn update(&mut self, store: &ParamStore) {
        self.updates += 1;
        let d = self.current_decay();
        for (s, (_, p)) in self.shadow.iter_mut().zip(store.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(p.value.data()) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }

    /// Copy of `store` holding the averaged values.
    pub fn averaged(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, s) in ids.into_iter().zip(&self.shadow) {
            out.set(id, s.clone()).expect("shadow shapes match");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let b = store.add("b", Tensor::vector(vec![1.0]));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = vec![
            Some(Tensor::new(&[1, 2], vec![0.5, -2.0]).unwrap()),
            Some(Tensor::vector(vec![3.0])),
        ];
        opt.step(&mut store, &grads, 0.1);
        let wv = store.value(w).data().to_vec();
        // bias-corrected first step is sign(g), plus decoupled decay on matrices
        assert!((wv[0] - (1.0 - 0.1 * (1.0 + 0.05))).abs() < 1e-6);
        assert!((wv[1] - (-1.0 + 0.1 * (1.0 + 0.05))).abs() < 1e-6);
        assert!((store.value(b).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 4.0])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        let mut small = vec![Some(Tensor::vector(vec![0.3]))];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data()[0], 0.3);
    }

    #[test]
    fn lr_drops_for_final_epochs() {
        let lrs: Vec<f64> = (0..5).map(|e| learning_rate(e, 5, 2e-4, 3, 0.1)).collect();
        assert_eq!(lrs[0], 2e-4);
        assert_eq!(lrs[1], 2e-4);
        assert!((lrs[2] - 2e-5).abs() < 1e-20);
        assert!((lrs[4] - 2e-5).abs() < 1e-20);
        assert_eq!(learning_rate(4, 5, 1.0, 0, 0.1), 1.0);
    }

    #[test]
    fn ema_tracks_parameters() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.0]));
        let mut ema = Ema::new(&store, 0.999);
        *store.value_mut(w) = Tensor::vector(vec![1.0]);
        ema.update(&store);
        let d = 0.999 * (1.0 - (-1.0f64 / 2000.0).exp());
        let avg = ema.averaged(&store);
        assert!((avg.value(w).data()[0] - (1.0 - d)).abs() < 1e-12);
    }
}
