//! Full detector: encoder, query construction and decoder.
//!
//! Ablation settings and the detector variant each one yields:
//!
//! | level    | branch     | align | init          | variant                         |
//! |----------|------------|-------|---------------|---------------------------------|
//! | instance | two-branch | on    | joint         | instance-level queries only     |
//! | boundary | two-branch | on    | joint         | boundary-level queries only     |
//! | dual     | shared     | off   | learned       | simple combine                  |
//! | dual     | two-branch | off   | learned       | plus two-branch decoding        |
//! | dual     | two-branch | on    | position-only | plus query alignment            |
//! | dual     | two-branch | on    | joint         | plus joint initialization (default) |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Branching, DecodeOutput, Decoder, DecoderConfig, DetectionSet, IntervalVars, LayerPrediction, RefineMode};
use crate::encoder::{select_topk, Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::queries::{InitMode, QueryInit, QueryLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QueryLevel {
    #[default]
    Dual,
    Instance,
    Boundary,
}

impl FromStr for QueryLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "instance" => Ok(Self::Instance),
            "boundary" => Ok(Self::Boundary),
            _ => Err(Error::Config(format!("unknown level `{s}` (expected dual, instance or boundary)"))),
        }
    }
}

impl fmt::Display for QueryLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dual => "dual",
            Self::Instance => "instance",
            Self::Boundary => "boundary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub level: QueryLevel,
    pub branching: Branching,
    /// Queries are tied one-to-one to selected encoder proposals.
    pub align: bool,
    pub init: InitMode,
    pub refine: RefineMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            level: QueryLevel::Dual,
            branching: Branching::TwoBranch,
            align: true,
            init: InitMode::Joint,
            refine: RefineMode::Parallel,
        }
    }
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.align && self.init == InitMode::Learned {
            return Err(Error::Config(
                "conflicting fields: align=on requires proposal-based init, but init=learned".into(),
            ));
        }
        if !self.align && self.init != InitMode::Learned {
            return Err(Error::Config(format!(
                "conflicting fields: align=off requires init=learned, but init={}",
                self.init
            )));
        }
        if self.branching == Branching::Shared && self.level != QueryLevel::Dual {
            return Err(Error::Config(format!(
                "conflicting fields: branch=shared requires level=dual, but level={}",
                self.level
            )));
        }
        if self.refine == RefineMode::PositionAndContent
            && (self.level != QueryLevel::Dual || self.branching != Branching::TwoBranch)
        {
            return Err(Error::Config(
                "conflicting fields: refine=position-and-content requires level=dual and branch=two-branch".into(),
            ));
        }
        Ok(())
    }

    pub fn layout(&self, d_model: usize) -> QueryLayout {
        let split = self.level == QueryLevel::Dual && self.branching == Branching::TwoBranch;
        QueryLayout {
            d_model,
            boundary: self.level != QueryLevel::Instance,
            instance: self.level != QueryLevel::Boundary,
            split,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            enc_layers: 6,
            dec_layers: 5,
            num_queries: 150,
            heads: 8,
            points: 4,
            ffn_dim: 1024,
            num_classes: 65,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used for synthetic end-to-end checks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 20,
            heads: 4,
            points: 2,
            ffn_dim: 128,
            num_classes,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(self, ablation: Ablation) -> Self {
        Self { ablation, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || !d.is_multiple_of(8) {
            return Err(Error::Config(format!("d_model {d} must be a positive multiple of 8")));
        }
        if self.heads == 0 || !(d / 4).is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide the boundary width d_model/4 = {}",
                self.heads,
                d / 4
            )));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("num_queries must be at least 1".into()));
        }
        if self.dec_layers == 0 {
            return Err(Error::Config("dec_layers must be at least 1".into()));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be at least 1".into()));
        }
        self.ablation.validate()
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            layers: self.enc_layers,
            heads: self.heads,
            points: self.points,
            ffn_dim: self.ffn_dim,
            num_classes: self.num_classes,
        }
    }

    fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            layers: self.dec_layers,
            heads: self.heads,
            points: self.points,
            ffn_dim: self.ffn_dim,
            num_classes: self.num_classes,
            layout: self.ablation.layout(self.d_model),
            branching: self.ablation.branching,
            refine: self.ablation.refine,
        }
    }
}

/// Everything a forward pass produces for one window.
#[derive(Clone, Debug)]
pub struct ForwardOutput<'g> {
    pub encoder: EncoderOutput<'g>,
    /// Snippet indices of the selected proposals.
    pub selected: Vec<usize>,
    /// Dense-head predictions at the selected proposals.
    pub encoder_pred: LayerPrediction<'g>,
    pub decode: DecodeOutput<'g>,
}

impl ForwardOutput<'_> {
    /// Final-layer detections in window-normalized time.
    pub fn detections(&self) -> DetectionSet {
        self.decode.layers.last().expect("at least one layer").detections()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    queries: QueryInit,
    decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", cfg.encoder_config(), &mut rng)?;
        let queries = QueryInit::new(
            &mut store,
            "queries",
            cfg.ablation.layout(cfg.d_model),
            cfg.ablation.init,
            cfg.num_queries,
            &mut rng,
        );
        let decoder = Decoder::new(&mut store, "decoder", cfg.decoder_config(), &mut rng)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            queries,
            decoder,
        })
    }

    /// Runs the detector on one window of `[W, D]` features whose first
    /// `valid` rows are real. `g` must be built over `self.store`.
    pub fn forward<'g>(&self, g: &'g Graph, features: &Tensor, valid: usize) -> Result<ForwardOutput<'g>> {
        if features.shape().len() != 2 || features.cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "features {:?} do not match model width {}",
                features.shape(),
                self.cfg.d_model
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("input features".into()));
        }
        let t = features.rows();
        let n = self.cfg.num_queries;
        if n > t {
            return Err(Error::Config(format!("num_queries {n} exceeds window length {t}")));
        }
        let encoder = self.encoder.encode(g, g.constant(features.clone()), valid)?;
        let selected = select_topk(&encoder.dense.scores(), encoder.valid, n)?;

        let dense = encoder.dense;
        let center = dense.center.gather(selected.clone(), &[n]);
        let duration = dense.duration.gather(selected.clone(), &[n]);
        let half = duration.scale(0.5);
        let encoder_pred = LayerPrediction {
            logits: dense.logits.index_rows(&selected),
            instance: Some(IntervalVars {
                start: center.sub(half),
                end: center.add(half),
            }),
            boundary: None,
        };

        let q = self.queries.build(g, &encoder, &selected)?;
        let decode = self.decoder.decode(g, q, &encoder)?;
        Ok(ForwardOutput {
            encoder,
            selected,
            encoder_pred,
            decode,
        })
    }

    /// Final-layer detections for one window.
    pub fn predict(&self, features: &Tensor, valid: usize) -> Result<DetectionSet> {
        let g = Graph::with_params(&self.store);
        Ok(self.forward(&g, features, valid)?.detections())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init;

    fn micro(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 2,
            num_queries: 4,
            heads: 2,
            points: 2,
            ffn_dim: 16,
            num_classes: 3,
            ablation,
        }
    }

    fn features(seed: u64, t: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init::normal(&mut rng, &[t, d], 1.0)
    }

    fn variants() -> Vec<Ablation> {
        let base = Ablation::default();
        vec![
            base,
            Ablation {
                level: QueryLevel::Instance,
                ..base
            },
            Ablation {
                level: QueryLevel::Boundary,
                ..base
            },
            Ablation {
                branching: Branching::Shared,
                align: false,
                init: InitMode::Learned,
                ..base
            },
            Ablation {
                align: false,
                init: InitMode::Learned,
                ..base
            },
            Ablation {
                init: InitMode::PositionOnly,
                ..base
            },
            Ablation {
                init: InitMode::FullPosition,
                ..base
            },
            Ablation {
                refine: RefineMode::BoundaryFirst,
                ..base
            },
            Ablation {
                refine: RefineMode::InstanceFirst,
                ..base
            },
            Ablation {
                refine: RefineMode::Off,
                ..base
            },
            Ablation {
                refine: RefineMode::PositionAndContent,
                ..base
            },
        ]
    }

    #[test]
    fn every_variant_runs_and_emits_one_detection_per_query() {
        for ab in variants() {
            let model = Model::new(micro(ab), 7).unwrap();
            let dets = model.predict(&features(1, 12, 16), 10).unwrap();
            assert_eq!(dets.len(), 4, "{ab:?}");
            for d in dets {
                assert!(0.0 <= d.start && d.start <= d.end && d.end <= 1.0);
                assert!(d.scores.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn conflicting_ablations_rejected() {
        let base = Ablation::default();
        let bad = [
            Ablation {
                init: InitMode::Learned,
                ..base
            },
            Ablation { align: false, ..base },
            Ablation {
                level: QueryLevel::Instance,
                branching: Branching::Shared,
                ..base
            },
            Ablation {
                level: QueryLevel::Instance,
                refine: RefineMode::PositionAndContent,
                ..base
            },
        ];
        for ab in bad {
            let err = ab.validate().unwrap_err();
            assert!(err.to_string().contains("conflicting fields"), "{err}");
        }
    }

    #[test]
    fn instance_level_has_no_boundary_parameters() {
        let model = Model::new(
            micro(Ablation {
                level: QueryLevel::Instance,
                ..Ablation::default()
            }),
            1,
        )
        .unwrap();
        assert!(model.store.iter().all(|(_, p)| !p.name.contains("boundary")));
        let full = Model::new(micro(Ablation::default()), 1).unwrap();
        assert!(full.store.iter().any(|(_, p)| p.name.contains("boundary")));
    }

    #[test]
    fn joint_init_queries_are_aligned_to_proposals() {
        let model = Model::new(micro(Ablation::default()), 3).unwrap();
        let g = Graph::with_params(&model.store);
        let x = features(2, 12, 16);
        let out = model.forward(&g, &x, 12).unwrap();
        let q = model.queries.build(&g, &out.encoder, &out.selected).unwrap();
        let snap = q.snapshot();
        let props = out.encoder.proposals(&out.selected);
        for (k, p) in props.iter().enumerate() {
            assert_eq!(snap.provenance[k], crate::queries::QuerySource::Proposal(p.source_index));
            let row = Tensor::concat_cols(&[
                &snap.s_con.as_ref().unwrap().narrow_cols(0, 4),
                &snap.e_con.as_ref().unwrap().narrow_cols(0, 4),
                &snap.i_con.as_ref().unwrap().narrow_cols(0, 8),
            ])
            .unwrap();
            assert_eq!(row.row(k), &p.feature[..]);
            assert_eq!(snap.s_pos.as_ref().unwrap()[k], p.start);
            assert_eq!(snap.e_pos.as_ref().unwrap()[k], p.end);
        }
    }

    #[test]
    fn rejects_mismatched_features() {
        let model = Model::new(micro(Ablation::default()), 3).unwrap();
        assert!(matches!(model.predict(&features(1, 12, 8), 12), Err(Error::Shape(_))));
        assert!(matches!(model.predict(&features(1, 3, 16), 3), Err(Error::Config(_))));
    }

    #[test]
    fn positions_stay_in_unit_interval() {
        let model = Model::new(micro(Ablation::default()), 5).unwrap();
        for seed in 0..10 {
            let g = Graph::with_params(&model.store);
            let out = model.forward(&g, &features(seed, 12, 16), 12).unwrap();
            for layer in &out.decode.positions {
                for p in layer {
                    for v in [p.s, p.e, p.c, p.d] {
                        assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}
