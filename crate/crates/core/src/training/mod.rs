//! Label assignment, losses and the optimization loop.

pub mod checkpoint;
mod loss;
mod matching;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use loss::{
    classification_loss, localization_loss, match_stage, stage_loss, total_loss, LossBreakdown, LossWeights, StageLoss,
};
pub use matching::{
    class_cost, cost_matrix, hungarian, share_targets, tiou, CostWeights, MatchResult, SharedTargets, Target,
    FOCAL_ALPHA, FOCAL_GAMMA,
};
pub use optim::{clip_grad_norm, learning_rate, AdamW, AdamWConfig, Ema};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Window;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Final epochs run at `lr · lr_drop_factor`.
    pub lr_drop_epochs: usize,
    pub lr_drop_factor: f64,
    pub clip_norm: f64,
    pub ema: bool,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cost: CostWeights,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.05,
            epochs: 30,
            lr_drop_epochs: 3,
            lr_drop_factor: 0.1,
            clip_norm: 1.0,
            ema: true,
            ema_decay: 0.999,
            batch_size: 8,
            seed: 42,
            cost: CostWeights::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's windows.
    pub loss: LossBreakdown,
    pub windows: usize,
    /// Windows skipped because they hold more actions than queries.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Averaged parameters, when enabled.
    pub ema: Option<ParamStore>,
}

/// Loss and parameter gradients for one window.
pub fn window_gradients(model: &Model, w: &Window, cfg: &TrainConfig) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let g = Graph::with_params(&model.store);
    let out = model.forward(&g, &w.features, w.valid)?;
    let (loss, breakdown) = match total_loss(&g, &out, &w.targets, cfg.cost, cfg.loss) {
        Err(Error::NonFinite(_)) => return Err(non_finite(w, None)),
        r => r?,
    };
    let grads = g.backward(loss)?.into_param_grads();
    if grads.iter().flatten().any(|t| !t.is_finite()) {
        return Err(non_finite(w, Some(&breakdown)));
    }
    Ok((breakdown, grads))
}

fn non_finite(w: &Window, loss: Option<&LossBreakdown>) -> Error {
    let f = w.features.data();
    let (lo, hi) = f
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    Error::NonFinite(format!(
        "training diverged on window {}@{} (valid {}, {} targets {:?}, feature range [{lo}, {hi}], loss {:?})",
        w.video_id,
        w.start,
        w.valid,
        w.targets.len(),
        w.targets,
        loss.map(|l| (l.cls, l.iou, l.l1, l.total)),
    ))
}

/// Trains `model` in place over `windows`. `on_epoch` observes each
/// epoch's log as it completes.
pub fn train(
    model: &mut Model,
    windows: &[Window],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_q = model.cfg.num_queries;
    let usable: Vec<usize> = (0..windows.len()).filter(|&i| windows[i].targets.len() <= n_q).collect();
    let skipped = windows.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Train("no trainable windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut ema = cfg.ema.then(|| Ema::new(&model.store, cfg.ema_decay));
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate(epoch, cfg.epochs, cfg.lr, cfg.lr_drop_epochs, cfg.lr_drop_factor);
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; model.store.len()];
            for &i in batch {
                let (b, grads) = window_gradients(model, &windows[i], cfg)?;
                losses.push(b);
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            clip_grad_norm(&mut acc, cfg.clip_norm);
            opt.step(&mut model.store, &acc, lr);
            if let Some(e) = ema.as_mut() {
                e.update(&model.store);
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: LossBreakdown::mean(&losses),
            windows: losses.len(),
            skipped,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        log,
        ema: ema.map(|e| e.averaged(&model.store)),
    })
}
