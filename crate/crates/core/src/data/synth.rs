//! Procedural paired-texture generator.
//!
//! Vision images are oriented band-limited gratings with a class-specific
//! orientation, frequency, and color tint; tactile images are bump fields
//! whose density, radius, amplitude sign, and background level vary by
//! class, so the seven handcrafted features separate the classes. Fully
//! determined by the seed.

use super::{DataError, DatasetManifest, DatasetSource, ImageSource, PairedSample, RgbImage};
use crate::rng::rng_from_indexed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Generated image extent; matches the vision branch input.
pub const SYNTH_IMAGE_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Replace vision images with uniform noise (modality ablation).
    #[serde(default)]
    pub vision_noise: bool,
    /// Replace tactile images with uniform noise.
    #[serde(default)]
    pub tactile_noise: bool,
}

impl SynthSpec {
    pub fn new(n_classes: usize, per_class: usize, seed: u64) -> Self {
        SynthSpec {
            n_classes,
            per_class,
            seed,
            vision_noise: false,
            tactile_noise: false,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_classes < 2 {
            return Err(DataError::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.per_class < 10 {
            return Err(DataError::Config(format!(
                "need at least 10 samples per class, got {}",
                self.per_class
            )));
        }
        Ok(())
    }
}

/// Generate an in-memory paired dataset.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    let classes: Vec<String> = (0..spec.n_classes).map(|c| format!("class_{c:02}")).collect();
    let mut samples = Vec::with_capacity(spec.n_classes * spec.per_class);
    for (class, class_name) in classes.iter().enumerate() {
        for i in 0..spec.per_class {
            let global = (class * spec.per_class + i) as u64;
            let mut rng = rng_from_indexed(spec.seed, "synth-sample", global);
            let vision = if spec.vision_noise {
                noise_image(&mut rng)
            } else {
                vision_texture(class, spec.n_classes, &mut rng)
            };
            let tactile = if spec.tactile_noise {
                noise_image(&mut rng)
            } else {
                tactile_texture(class, spec.n_classes, &mut rng)
            };
            samples.push(PairedSample {
                id: format!("s{i:05}"),
                vision: ImageSource::Memory(vision),
                tactile: ImageSource::Memory(tactile),
                label: class,
                class_name: class_name.clone(),
            });
        }
    }
    Ok(DatasetManifest {
        classes,
        samples,
        source: DatasetSource::Synthetic(spec.clone()),
    })
}

/// Oriented grating plus tint and pixel noise.
fn vision_texture(class: usize, n_classes: usize, rng: &mut impl Rng) -> RgbImage {
    let n = SYNTH_IMAGE_SIZE;
    let theta = PI * class as f64 / n_classes as f64;
    let freq = 6.0 + 4.0 * class as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let tint = hsv_to_rgb(360.0 * class as f64 / n_classes as f64, 0.55, 1.0);
    let mut data = Vec::with_capacity(3 * n * n);
    for y in 0..n {
        for x in 0..n {
            let u = x as f64 * ct + y as f64 * st;
            let wave = 0.55 + 0.30 * (2.0 * PI * freq * u / n as f64 + phase).sin();
            let noise: f64 = rng.gen_range(-0.05..0.05);
            let v = (wave + noise).clamp(0.0, 1.0);
            for t in tint {
                data.push((v * t * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage {
        width: n,
        height: n,
        data,
    }
}

/// Bump field over a class-specific background level. Channels are equal,
/// so the grayscale pipeline sees the field unchanged.
fn tactile_texture(class: usize, n_classes: usize, rng: &mut impl Rng) -> RgbImage {
    let n = SYNTH_IMAGE_SIZE;
    let background = 0.15 + 0.70 * class as f64 / (n_classes - 1).max(1) as f64;
    let bumps = 40 + 70 * class;
    let radius = 3.0 + 1.5 * (class % 3) as f64;
    let amplitude = if class.is_multiple_of(2) { 0.35 } else { -0.30 };

    let mut field = vec![background; n * n];
    for _ in 0..bumps {
        let cx: f64 = rng.gen_range(0.0..n as f64);
        let cy: f64 = rng.gen_range(0.0..n as f64);
        let reach = (3.0 * radius).ceil() as isize;
        let (ix, iy) = (cx as isize, cy as isize);
        for y in (iy - reach).max(0)..(iy + reach + 1).min(n as isize) {
            for x in (ix - reach).max(0)..(ix + reach + 1).min(n as isize) {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let d2 = dx * dx + dy * dy;
                field[y as usize * n + x as usize] +=
                    amplitude * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
    let mut data = Vec::with_capacity(3 * n * n);
    for &v in &field {
        let noise: f64 = rng.gen_range(-0.02..0.02);
        let byte = ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        data.extend_from_slice(&[byte, byte, byte]);
    }
    RgbImage {
        width: n,
        height: n,
        data,
    }
}

fn noise_image(rng: &mut impl Rng) -> RgbImage {
    let n = SYNTH_IMAGE_SIZE;
    let data: Vec<u8> = (0..3 * n * n).map(|_| rng.gen::<u8>()).collect();
    RgbImage {
        width: n,
        height: n,
        data,
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h_deg.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Manifest JSON written beside generated data.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthManifestFile {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub spec: SynthSpec,
}

/// Write the dataset as `root/<class>/{vision,tactile}/<id>.png` plus a
/// `manifest.json` recording the generator spec and seed.
pub fn write_to_directory(manifest: &DatasetManifest, root: &Path) -> Result<(), DataError> {
    for class in &manifest.classes {
        std::fs::create_dir_all(root.join(class).join("vision"))?;
        std::fs::create_dir_all(root.join(class).join("tactile"))?;
    }
    for s in &manifest.samples {
        let class = &manifest.classes[s.label];
        let vpath = root.join(class).join("vision").join(format!("{}.png", s.id));
        let tpath = root.join(class).join("tactile").join(format!("{}.png", s.id));
        super::save_png(&vpath, &s.vision.load()?)?;
        super::save_png(&tpath, &s.tactile.load()?)?;
    }
    if let DatasetSource::Synthetic(spec) = &manifest.source {
        let file = SynthManifestFile {
            classes: manifest.classes.clone(),
            per_class: spec.per_class,
            spec: spec.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| DataError::Config(e.to_string()))?;
        std::fs::write(root.join("manifest.json"), json)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, FEATURE_DIM};

    #[test]
    fn generation_counts_and_determinism() {
        let spec = SynthSpec::new(3, 10, 7);
        let a = synth_generate(&spec).unwrap();
        assert_eq!(a.samples.len(), 30);
        assert_eq!(a.per_class_counts(), vec![10, 10, 10]);
        let b = synth_generate(&spec).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let (xi, yi) = (x.vision.load().unwrap(), y.vision.load().unwrap());
            assert_eq!(xi.data, yi.data);
            let (xt, yt) = (x.tactile.load().unwrap(), y.tactile.load().unwrap());
            assert_eq!(xt.data, yt.data);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(synth_generate(&SynthSpec::new(1, 10, 0)).is_err());
        assert!(synth_generate(&SynthSpec::new(3, 5, 0)).is_err());
    }

    fn class_features(manifest: &DatasetManifest) -> Vec<(usize, [f64; FEATURE_DIM])> {
        manifest
            .samples
            .iter()
            .map(|s| {
                let gray = s.tactile.load().unwrap().to_gray().unwrap();
                (s.label, extract_features(&gray).unwrap().0)
            })
            .collect()
    }

    #[test]
    fn tactile_features_are_class_separable() {
        let spec = SynthSpec::new(5, 12, 11);
        let manifest = synth_generate(&spec).unwrap();
        let feats = class_features(&manifest);

        // between-class vs within-class variance, per feature
        let mut separable = 0;
        for d in 0..FEATURE_DIM {
            let mut class_means = vec![0.0; spec.n_classes];
            let mut class_counts = vec![0usize; spec.n_classes];
            for (label, f) in &feats {
                class_means[*label] += f[d];
                class_counts[*label] += 1;
            }
            for (m, &c) in class_means.iter_mut().zip(&class_counts) {
                *m /= c as f64;
            }
            let grand: f64 = class_means.iter().sum::<f64>() / spec.n_classes as f64;
            let between: f64 = class_means
                .iter()
                .map(|m| (m - grand) * (m - grand))
                .sum::<f64>()
                / spec.n_classes as f64;
            let mut within = 0.0;
            for (label, f) in &feats {
                let d2 = f[d] - class_means[*label];
                within += d2 * d2;
            }
            within /= feats.len() as f64;
            if between > within {
                separable += 1;
            }
        }
        assert!(separable >= 3, "only {separable} of 7 features separable");
    }

    #[test]
    fn nearest_centroid_on_raw_features_beats_60_percent() {
        let train = synth_generate(&SynthSpec::new(5, 12, 11)).unwrap();
        let fresh = synth_generate(&SynthSpec::new(5, 12, 12)).unwrap();

        let train_feats = class_features(&train);
        let mut centroids = vec![[0.0; FEATURE_DIM]; 5];
        let mut counts = vec![0usize; 5];
        for (label, f) in &train_feats {
            for d in 0..FEATURE_DIM {
                centroids[*label][d] += f[d];
            }
            counts[*label] += 1;
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }

        let fresh_feats = class_features(&fresh);
        let mut correct = 0;
        for (label, f) in &fresh_feats {
            let mut best = (f64::INFINITY, 0usize);
            for (ci, c) in centroids.iter().enumerate() {
                let dist: f64 = (0..FEATURE_DIM).map(|d| (f[d] - c[d]) * (f[d] - c[d])).sum();
                if dist < best.0 {
                    best = (dist, ci);
                }
            }
            if best.1 == *label {
                correct += 1;
            }
        }
        let acc = correct as f64 / fresh_feats.len() as f64;
        assert!(acc > 0.6, "nearest-centroid accuracy {acc}");
    }
}
