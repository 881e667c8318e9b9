//! Paired vision/tactile datasets: directory loading, preprocessing,
//! stratified splitting, and a synthetic texture generator for desk-scale
//! end-to-end runs.

pub mod synth;

use crate::features::{gray_from_rgb8, FeatureError, GrayImage};
use crate::rng::rng_from;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

pub use synth::{synth_generate, write_to_directory, SynthSpec};

#[derive(Debug)]
pub enum DataError {
    /// Missing, empty, or structurally unusable dataset root.
    Dataset(String),
    /// A specific file failed to decode; names the path.
    Format { path: PathBuf, message: String },
    /// A class has too few samples for the requested split.
    Stratification(String),
    /// Bad generator or preprocessing parameters.
    Config(String),
    Io(std::io::Error),
    Feature(FeatureError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Dataset(msg) => write!(f, "dataset error: {msg}"),
            DataError::Format { path, message } => {
                write!(f, "format error in {}: {message}", path.display())
            }
            DataError::Stratification(msg) => write!(f, "stratification error: {msg}"),
            DataError::Config(msg) => write!(f, "configuration error: {msg}"),
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Feature(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<FeatureError> for DataError {
    fn from(e: FeatureError) -> Self {
        DataError::Feature(e)
    }
}

/// Interleaved 8-bit RGB image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != 3 * width * height {
            return Err(DataError::Config(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn to_gray(&self) -> Result<GrayImage, DataError> {
        Ok(gray_from_rgb8(&self.data, self.height, self.width)?)
    }
}

/// Where a sample's pixels live.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(RgbImage),
}

impl ImageSource {
    pub fn load(&self) -> Result<RgbImage, DataError> {
        match self {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::Path(path) => load_rgb(path),
        }
    }
}

/// One (vision image, tactile image, label) triple.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub vision: ImageSource,
    pub tactile: ImageSource,
    pub label: usize,
    pub class_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum DatasetSource {
    Directory(PathBuf),
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    /// Class names in label order.
    pub classes: Vec<String>,
    pub samples: Vec<PairedSample>,
    pub source: DatasetSource,
}

impl DatasetManifest {
    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Decode a PNG or JPEG file into interleaved RGB8.
pub fn load_rgb(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::open(path).map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    RgbImage::new(w, h, rgb.into_raw())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| DataError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "PNG"];

/// Load a `root/<class>/{vision,tactile}/<id>.png` tree.
///
/// Classes are directory names sorted lexicographically; samples pair by
/// file stem. Unpaired or non-image files are skipped and reported in the
/// returned warning list.
pub fn load_directory(root: &Path) -> Result<(DatasetManifest, Vec<String>), DataError> {
    if !root.is_dir() {
        return Err(DataError::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DataError::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    let mut samples = Vec::new();

    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let vision = collect_stems(&dir.join("vision"), &mut warnings)?;
        let tactile = collect_stems(&dir.join("tactile"), &mut warnings)?;
        let mut count = 0;
        for (stem, vpath) in &vision {
            match tactile.get(stem) {
                Some(tpath) => {
                    samples.push(PairedSample {
                        id: stem.clone(),
                        vision: ImageSource::Path(vpath.clone()),
                        tactile: ImageSource::Path(tpath.clone()),
                        label,
                        class_name: class_name.clone(),
                    });
                    count += 1;
                }
                None => warnings.push(format!(
                    "vision file {} has no tactile pair; excluded",
                    vpath.display()
                )),
            }
        }
        for (stem, tpath) in &tactile {
            if !vision.contains_key(stem) {
                warnings.push(format!(
                    "tactile file {} has no vision pair; excluded",
                    tpath.display()
                ));
            }
        }
        if count == 0 {
            return Err(DataError::Dataset(format!(
                "class {class_name:?} has no complete vision/tactile pairs"
            )));
        }
        classes.push(class_name);
    }

    if samples.is_empty() {
        return Err(DataError::Dataset("no complete pairs found".into()));
    }
    Ok((
        DatasetManifest {
            classes,
            samples,
            source: DatasetSource::Directory(root.to_path_buf()),
        },
        warnings,
    ))
}

fn collect_stems(
    dir: &Path,
    warnings: &mut Vec<String>,
) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    for path in paths {
        let ext_ok = path
            .extension()
            .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
            .unwrap_or(false);
        if !ext_ok {
            warnings.push(format!("skipping non-image file {}", path.display()));
            continue;
        }
        if let Some(stem) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) {
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Vision preprocessing constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    /// Target square extent, default 224.
    pub size: usize,
    /// Per-channel mean subtracted after scaling to [0, 1].
    pub mean: [f64; 3],
    /// Per-channel divisor.
    pub std: [f64; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            size: 224,
            mean: [0.5, 0.5, 0.5],
            std: [0.5, 0.5, 0.5],
        }
    }
}

/// Bilinear resize with half-pixel centers; the identity when sizes match.
pub fn bilinear_resize(img: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    if img.width == out_w && img.height == out_h {
        return img.clone();
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut data = vec![0u8; 3 * out_w * out_h];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let p = |x: usize, y: usize| img.data[(y * img.width + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                data[(oy * out_w + ox) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Resize, scale to [0, 1], standardize per channel; yields `[3, size, size]`.
pub fn preprocess_image<S: Scalar>(img: &RgbImage, pp: &Preprocess) -> Tensor<S> {
    let resized = bilinear_resize(img, pp.size, pp.size);
    let n = pp.size * pp.size;
    let mut out = vec![S::zero(); 3 * n];
    for c in 0..3 {
        let mean = pp.mean[c];
        let std = pp.std[c];
        let plane = &mut out[c * n..(c + 1) * n];
        for (i, slot) in plane.iter_mut().enumerate() {
            let v = resized.data[i * 3 + c] as f64 / 255.0;
            *slot = S::from_f64((v - mean) / std);
        }
    }
    Tensor::new(vec![3, pp.size, pp.size], out).expect("shape is consistent by construction")
}

/// Per-class seeded shuffle, first `round(ratio·n)` to train (half-up).
pub fn stratified_split(
    manifest: &DatasetManifest,
    train_ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(DataError::Config(format!(
            "train ratio {train_ratio} outside [0, 1]"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.classes.len()];
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = rng_from(seed, "stratified-split");
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (label, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < 2 {
            return Err(DataError::Stratification(format!(
                "class {:?} has {} sample(s); at least 2 required",
                manifest.classes[label],
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let n_train = (train_ratio * indices.len() as f64 + 0.5).floor() as usize;
        train_idx.extend_from_slice(&indices[..n_train]);
        test_idx.extend_from_slice(&indices[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| DatasetManifest {
        classes: manifest.classes.clone(),
        samples: idx.iter().map(|&i| manifest.samples[i].clone()).collect(),
        source: manifest.source.clone(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}
