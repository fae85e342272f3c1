//! Videos, annotations and fixed-length windows.

mod io;
mod synth;

pub use io::{
    load_annotations, load_dataset, load_features, load_vocabulary, save_features, write_dataset, Dataset,
    ManifestEntry, ANNOTATIONS_FILE, CLASSES_FILE, FEATURES_DIR, FEATURE_MAGIC, MANIFEST_FILE,
};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::Target;

/// Ground-truth action in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `[T, D]` snippet features.
    pub features: Tensor,
    pub annotations: Vec<ActionInstance>,
    pub duration_seconds: f64,
    pub snippet_stride_seconds: f64,
}

impl VideoRecord {
    pub fn num_snippets(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for a in &self.annotations {
            if !(0.0 <= a.start && a.start < a.end && a.end <= self.duration_seconds + 1e-9) {
                return Err(Error::Data(format!(
                    "{}: annotation ({}, {}) outside [0, {}] or empty",
                    self.video_id, a.start, a.end, self.duration_seconds
                )));
            }
            if a.class >= num_classes {
                return Err(Error::Data(format!(
                    "{}: class {} outside vocabulary of {num_classes}",
                    self.video_id, a.class
                )));
            }
        }
        Ok(())
    }
}

/// Fixed-length slice of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub video_id: String,
    /// First snippet index.
    pub start: usize,
    /// Window length `W` in snippets.
    pub length: usize,
    /// Leading rows holding real snippets; the rest is zero padding.
    pub valid: usize,
    /// `[W, D]`
    pub features: Tensor,
    /// Clipped annotations in window-normalized time.
    pub targets: Vec<Target>,
    pub snippet_stride_seconds: f64,
}

impl Window {
    pub fn offset_seconds(&self) -> f64 {
        self.start as f64 * self.snippet_stride_seconds
    }

    pub fn span_seconds(&self) -> f64 {
        self.length as f64 * self.snippet_stride_seconds
    }

    /// Maps window-normalized time to video seconds.
    pub fn to_seconds(&self, u: f64) -> f64 {
        self.offset_seconds() + u * self.span_seconds()
    }
}

/// Start indices of the windows over `t` snippets.
pub fn window_starts(t: usize, w: usize, stride_ratio: f64) -> Result<Vec<usize>> {
    if w == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let stride = (w as f64 * stride_ratio).round();
    if !(stride >= 1.0) {
        return Err(Error::Config(format!(
            "stride ratio {stride_ratio} gives a stride below one snippet for window {w}"
        )));
    }
    let stride = stride as usize;
    if t <= w {
        return Ok(vec![0]);
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + w <= t).collect();
    let last = *starts.last().expect("t > w so start 0 fits");
    if last + w < t {
        starts.push(t - w);
    }
    Ok(starts)
}

/// Cuts a video into windows of `w` snippets, padding short videos.
pub fn make_windows(video: &VideoRecord, w: usize, stride_ratio: f64) -> Result<Vec<Window>> {
    let t = video.num_snippets();
    if t == 0 {
        return Err(Error::EmptyInput(format!("{} has no snippets", video.video_id)));
    }
    let d = video.features.cols();
    let stride_s = video.snippet_stride_seconds;
    window_starts(t, w, stride_ratio)?
        .into_iter()
        .map(|start| {
            let valid = w.min(t - start);
            let mut data = vec![0.0; w * d];
            data[..valid * d].copy_from_slice(&video.features.data()[start * d..(start + valid) * d]);
            let features = Tensor::new(&[w, d], data)?;
            let lo = start as f64 * stride_s;
            let span = w as f64 * stride_s;
            let hi = lo + valid as f64 * stride_s;
            let targets = video
                .annotations
                .iter()
                .filter_map(|a| {
                    let s = a.start.max(lo);
                    let e = a.end.min(hi);
                    (e - s >= stride_s - 1e-9).then(|| Target {
                        start: (s - lo) / span,
                        end: (e - lo) / span,
                        class: a.class,
                    })
                })
                .collect();
            Ok(Window {
                video_id: video.video_id.clone(),
                start,
                length: w,
                valid,
                features,
                targets,
                snippet_stride_seconds: stride_s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(t: usize, annotations: Vec<ActionInstance>) -> VideoRecord {
        VideoRecord {
            video_id: "v".into(),
            features: Tensor::new(&[t, 2], (0..2 * t).map(|x| x as f64).collect()).unwrap(),
            annotations,
            duration_seconds: t as f64,
            snippet_stride_seconds: 1.0,
        }
    }

    #[test]
    fn window_starts_examples() {
        assert_eq!(window_starts(1000, 256, 0.75).unwrap(), vec![0, 192, 384, 576, 744]);
        assert_eq!(window_starts(100, 256, 0.75).unwrap(), vec![0]);
        let s = window_starts(1000, 256, 0.25).unwrap();
        assert_eq!(s[1] - s[0], 64);
        assert_eq!(window_starts(512, 256, 0.5).unwrap(), vec![0, 128, 256]);
        assert!(window_starts(10, 0, 0.5).is_err());
        assert!(window_starts(10, 4, 0.01).is_err());
    }

    #[test]
    fn short_video_is_padded() {
        let w = make_windows(&video(100, vec![]), 256, 0.75).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].valid, 100);
        assert_eq!(w[0].features.shape(), &[256, 2]);
        assert_eq!(w[0].features.row(99), &[198.0, 199.0]);
        assert!(w[0].features.data()[200..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn annotations_clipped_and_normalized() {
        let v = video(
            20,
            vec![
                ActionInstance {
                    start: 2.0,
                    end: 6.0,
                    class: 1,
                },
                ActionInstance {
                    start: 9.5,
                    end: 14.0,
                    class: 0,
                },
            ],
        );
        let w = make_windows(&v, 10, 1.0).unwrap();
        assert_eq!(w.iter().map(|x| x.start).collect::<Vec<_>>(), vec![0, 10]);
        // first window keeps the whole first action; the second is clipped to 0.5 s and dropped
        assert_eq!(w[0].targets.len(), 1);
        assert!((w[0].targets[0].start - 0.2).abs() < 1e-12);
        assert!((w[0].targets[0].end - 0.6).abs() < 1e-12);
        assert_eq!(w[1].targets.len(), 1);
        assert_eq!(w[1].targets[0].class, 0);
        assert!((w[1].targets[0].end - 0.4).abs() < 1e-12);
        assert!((w[1].to_seconds(0.4) - 14.0).abs() < 1e-12);
    }
}
