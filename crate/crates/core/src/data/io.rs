//! On-disk feature, annotation and dataset formats.
//!
//! A dataset directory holds:
//!
//! ```text
//! classes.txt        one class name per line, line order = class id
//! annotations.csv    video_id,start_seconds,end_seconds,class_id
//! manifest.csv       video_id,num_snippets,dim,stride_seconds,duration_seconds,sha256
//! features/<id>.feat binary feature matrix
//! ```
//!
//! Feature files are `"DDTRFEAT"`, `u32` T, `u32` D, then `T·D` `f32`
//! values, all little-endian, row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{ActionInstance, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"DDTRFEAT";
pub const FEATURES_DIR: &str = "features";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "video_id,num_snippets,dim,stride_seconds,duration_seconds,sha256";

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn feature_bytes(features: &Tensor) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::Shape(format!("features must be 2-D, got {:?}", features.shape())));
    }
    let (t, d) = (features.rows(), features.cols());
    let to_u32 = |x: usize| u32::try_from(x).map_err(|_| Error::Shape(format!("dimension {x} exceeds u32")));
    let mut b = Vec::with_capacity(16 + 4 * t * d);
    b.extend_from_slice(FEATURE_MAGIC);
    b.extend_from_slice(&to_u32(t)?.to_le_bytes());
    b.extend_from_slice(&to_u32(d)?.to_le_bytes());
    for &x in features.data() {
        b.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(b)
}

pub fn save_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, feature_bytes(features)?).map_err(|e| Error::io(path, e))
}

pub fn parse_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated magic: file has {} bytes, expected at least 16", bytes.len()),
        ));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected DDTRFEAT"));
    }
    if bytes.len() < 16 {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated header: file has {} bytes, expected at least 16", bytes.len()),
        ));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(Error::EmptyInput(format!(
            "{}: feature sequence has T={t}, D={d}",
            path.display()
        )));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| format_err(path, 8, format!("T·D = {t}·{d} overflows")))?;
    if bytes.len() != expected {
        let what = if bytes.len() < expected { "truncated payload" } else { "trailing bytes" };
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("{what}: expected {expected} bytes for {t}×{d}, file has {}", bytes.len()),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(&[t, d], data)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &bytes)
}

/// Meaningful lines with their 1-based numbers; blank lines and `#`
/// comments are skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names = Vec::new();
    for (line, name) in content_lines(&text) {
        if names.iter().any(|n| n == name) {
            return Err(parse_err(path, line, format!("duplicate class `{name}`")));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::Data(format!("{}: empty class vocabulary", path.display())));
    }
    Ok(names)
}

pub fn parse_annotations(path: &Path, text: &str, num_classes: usize) -> Result<BTreeMap<String, Vec<ActionInstance>>> {
    let mut out: BTreeMap<String, Vec<ActionInstance>> = BTreeMap::new();
    for (line, l) in content_lines(text) {
        let fields: Vec<&str> = l.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                line,
                format!("expected video_id,start,end,class_id, found {} fields", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("invalid {what} `{s}`")))
        };
        let start = num(fields[1], "start")?;
        let end = num(fields[2], "end")?;
        let class: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(path, line, format!("invalid class id `{}`", fields[3])))?;
        if end <= start {
            return Err(parse_err(path, line, format!("end {end} not after start {start}")));
        }
        if start < 0.0 {
            return Err(parse_err(path, line, format!("negative start {start}")));
        }
        if class >= num_classes {
            return Err(parse_err(
                path,
                line,
                format!("unknown class {class}, vocabulary has {num_classes}"),
            ));
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push(ActionInstance { start, end, class });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, num_classes: usize) -> Result<BTreeMap<String, Vec<ActionInstance>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(path, &text, num_classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub num_snippets: usize,
    pub dim: usize,
    pub stride_seconds: f64,
    pub duration_seconds: f64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
    pub manifest: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes a dataset directory. A non-empty `dir` is refused unless
/// `overwrite` is set. `echo` lines are written as manifest comments.
pub fn write_dataset(dir: &Path, classes: &[String], videos: &[VideoRecord], echo: &str, overwrite: bool) -> Result<Vec<ManifestEntry>> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite to replace it)",
                dir.display()
            )));
        }
    }
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let write = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io(&p, e));

    write(dir.join(CLASSES_FILE), classes.iter().map(|c| format!("{c}\n")).collect())?;

    let mut ann = String::from("# video_id,start_seconds,end_seconds,class_id\n");
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        v.validate(classes.len())?;
        let bytes = feature_bytes(&v.features)?;
        let p = feat_dir.join(format!("{}.feat", v.video_id));
        fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        for a in &v.annotations {
            ann.push_str(&format!("{},{},{},{}\n", v.video_id, a.start, a.end, a.class));
        }
        entries.push(ManifestEntry {
            video_id: v.video_id.clone(),
            num_snippets: v.num_snippets(),
            dim: v.features.cols(),
            stride_seconds: v.snippet_stride_seconds,
            duration_seconds: v.duration_seconds,
            sha256: sha256_hex(&bytes),
        });
    }
    write(dir.join(ANNOTATIONS_FILE), ann)?;

    let mut manifest: String = echo.lines().map(|l| format!("# {l}\n")).collect();
    manifest.push_str(MANIFEST_HEADER);
    manifest.push('\n');
    for e in &entries {
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.video_id, e.num_snippets, e.dim, e.stride_seconds, e.duration_seconds, e.sha256
        ));
    }
    write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(entries)
}

fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        if l == MANIFEST_HEADER {
            continue;
        }
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(parse_err(path, line, format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, line, format!("invalid integer `{s}`")));
        let real = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| parse_err(path, line, format!("invalid positive number `{s}`")))
        };
        out.push(ManifestEntry {
            video_id: f[0].to_string(),
            num_snippets: int(f[1])?,
            dim: int(f[2])?,
            stride_seconds: real(f[3])?,
            duration_seconds: real(f[4])?,
            sha256: f[5].to_string(),
        });
    }
    Ok(out)
}

/// Loads and cross-checks a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let classes = load_vocabulary(&dir.join(CLASSES_FILE))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = parse_manifest(&mpath, &mtext)?;
    let mut ann = load_annotations(&dir.join(ANNOTATIONS_FILE), classes.len())?;
    let mut videos = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let p = dir.join(FEATURES_DIR).join(format!("{}.feat", e.video_id));
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(Error::Data(format!("{}: digest does not match manifest", p.display())));
        }
        let features = parse_features(&p, &bytes)?;
        if features.rows() != e.num_snippets || features.cols() != e.dim {
            return Err(Error::Data(format!(
                "{}: shape {:?} disagrees with manifest {}×{}",
                p.display(),
                features.shape(),
                e.num_snippets,
                e.dim
            )));
        }
        let v = VideoRecord {
            video_id: e.video_id.clone(),
            features,
            annotations: ann.remove(&e.video_id).unwrap_or_default(),
            duration_seconds: e.duration_seconds,
            snippet_stride_seconds: e.stride_seconds,
        };
        v.validate(classes.len())?;
        videos.push(v);
    }
    if let Some(id) = ann.keys().next() {
        return Err(Error::Data(format!("annotations reference unknown video `{id}`")));
    }
    Ok(Dataset {
        classes,
        videos,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f32ish: Vec<f64> = init::normal(&mut rng, &[7, 5], 1.0)
            .data()
            .iter()
            .map(|&x| f64::from(x as f32))
            .collect();
        let t = Tensor::new(&[7, 5], f32ish).unwrap();
        save_features(&p, &t).unwrap();
        assert_eq!(load_features(&p).unwrap(), t);
    }

    #[test]
    fn truncated_and_bad_files() {
        let p = Path::new("f.feat");
        let err = parse_features(p, FEATURE_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");
        assert!(err.to_string().contains("16"));
        let err = parse_features(p, b"NOTMAGIC\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let mut b = feature_bytes(&Tensor::zeros(&[2, 3])).unwrap();
        b.pop();
        let err = parse_features(p, &b).unwrap_err();
        assert!(err.to_string().contains("expected 40 bytes"), "{err}");
        let mut empty = FEATURE_MAGIC.to_vec();
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(parse_features(p, &empty), Err(Error::EmptyInput(_))));
        let mut huge = FEATURE_MAGIC.to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(parse_features(p, &huge), Err(Error::Format { .. })));
    }

    #[test]
    fn annotation_parsing() {
        let p = Path::new("a.csv");
        let a = parse_annotations(p, "# header\nv1,2.0,5.5,3\n\nv1,6,7,0\n", 4).unwrap();
        assert_eq!(
            a["v1"][0],
            ActionInstance {
                start: 2.0,
                end: 5.5,
                class: 3
            }
        );
        assert_eq!(a["v1"].len(), 2);
        let err = parse_annotations(p, "v1,1,2,0\nv1,5.0,5.0,3\n", 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_annotations(p, "v1,1,2,9\n", 4), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_annotations(p, "v1,1,x,0\n", 4), Err(Error::Parse { .. })));
    }

    #[test]
    fn dataset_round_trip_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let videos = vec![VideoRecord {
            video_id: "a".into(),
            features: Tensor::new(&[3, 2], vec![0.5, 1.0, -2.0, 0.25, 0.0, 8.0]).unwrap(),
            annotations: vec![ActionInstance {
                start: 0.5,
                end: 1.0,
                class: 1,
            }],
            duration_seconds: 1.5,
            snippet_stride_seconds: 0.5,
        }];
        let classes = vec!["x".to_string(), "y".to_string()];
        write_dataset(&root, &classes, &videos, "seed = 1", false).unwrap();
        let ds = load_dataset(&root).unwrap();
        assert_eq!(ds.videos, videos);
        assert_eq!(ds.classes, classes);
        assert!(write_dataset(&root, &classes, &videos, "", false).is_err());
        write_dataset(&root, &classes, &videos, "", true).unwrap();
    }
}
