use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ActionInstance, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the synthetic multi-label feature generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub num_classes: usize,
    /// Snippets per video.
    pub length: usize,
    pub dim: usize,
    /// Most actions active at any one snippet.
    pub overlap_level: usize,
    pub noise_sigma: f64,
    pub snippet_stride_seconds: f64,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Instance duration bounds as fractions of the video length.
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_videos: 200,
            num_classes: 3,
            length: 128,
            dim: 64,
            overlap_level: 2,
            noise_sigma: 0.1,
            snippet_stride_seconds: 0.5,
            min_instances: 3,
            max_instances: 12,
            min_duration: 0.05,
            max_duration: 0.2,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

impl SynthConfig {
    fn duration_range(&self) -> Result<(usize, usize)> {
        let lo = ((self.min_duration * self.length as f64).ceil() as usize).max(1);
        let hi = (self.max_duration * self.length as f64).floor() as usize;
        if hi < lo || hi < 1 || hi > self.length {
            return Err(Error::Config(format!(
                "duration range [{}, {}] of {} snippets holds no whole snippet count",
                self.min_duration, self.max_duration, self.length
            )));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.dim == 0 || self.length == 0 {
            return Err(Error::Config("length and dim must be positive".into()));
        }
        if self.overlap_level == 0 {
            return Err(Error::Config("overlap_level 0 admits no actions".into()));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::Config(format!(
                "instance count range [{}, {}] is empty",
                self.min_instances, self.max_instances
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        if !(self.snippet_stride_seconds > 0.0) {
            return Err(Error::Config("snippet stride must be positive".into()));
        }
        self.duration_range().map(|_| ())
    }
}

/// Raised-cosine weight of snippet `t` inside the instance `[s, e)`.
pub fn envelope(t: usize, s: usize, e: usize) -> f64 {
    if t < s || t >= e {
        return 0.0;
    }
    let x = (t - s) as f64 + 0.5;
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * x / (e - s) as f64).cos())
}

/// Generates `num_videos` sequences whose features are sums of per-class
/// unit signatures shaped by each active instance's envelope, plus noise.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    let (dmin, dmax) = cfg.duration_range()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (t_len, d) = (cfg.length, cfg.dim);

    (0..cfg.num_videos)
        .map(|vi| {
            let want = rng.random_range(cfg.min_instances..=cfg.max_instances);
            let mut active = vec![0usize; t_len];
            let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(want);
            for _ in 0..want {
                for _ in 0..PLACEMENT_ATTEMPTS {
                    let class = rng.random_range(0..cfg.num_classes);
                    let len = rng.random_range(dmin..=dmax);
                    let s = rng.random_range(0..=t_len - len);
                    let e = s + len;
                    let same_class = spans.iter().any(|&(c, a, b)| c == class && a < e && s < b);
                    if same_class || active[s..e].iter().any(|&n| n >= cfg.overlap_level) {
                        continue;
                    }
                    active[s..e].iter_mut().for_each(|n| *n += 1);
                    spans.push((class, s, e));
                    break;
                }
            }
            if spans.len() < cfg.min_instances {
                return Err(Error::Config(format!(
                    "could only place {} of at least {} instances in video {vi}; overlap constraints are infeasible",
                    spans.len(),
                    cfg.min_instances
                )));
            }
            spans.sort_by_key(|&(c, s, e)| (s, e, c));
            let mut data = vec![0.0; t_len * d];
            for &(c, s, e) in &spans {
                for t in s..e {
                    let w = envelope(t, s, e);
                    for (x, u) in data[t * d..(t + 1) * d].iter_mut().zip(&signatures[c]) {
                        *x += w * u;
                    }
                }
            }
            if cfg.noise_sigma > 0.0 {
                for x in data.iter_mut() {
                    *x += noise.sample(&mut rng);
                }
            }
            let stride = cfg.snippet_stride_seconds;
            Ok(VideoRecord {
                video_id: format!("video_{vi:05}"),
                features: Tensor::new(&[t_len, d], data)?,
                annotations: spans
                    .iter()
                    .map(|&(class, s, e)| ActionInstance {
                        start: s as f64 * stride,
                        end: e as f64 * stride,
                        class,
                    })
                    .collect(),
                duration_seconds: t_len as f64 * stride,
                snippet_stride_seconds: stride,
            })
        })
        .collect()
}
