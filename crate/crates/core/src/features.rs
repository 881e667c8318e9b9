//! Handcrafted tactile descriptors: a grayscale conversion, a fixed 7-feature
//! extractor, and a dataset-fitted standardizer.
//!
//! Feature order is part of the checkpoint contract and must not change:
//! mean, standard deviation, skewness, excess kurtosis, histogram entropy
//! (bits, 256 bins), Sobel edge density, mean Sobel gradient magnitude.

use crate::rng::rng_from;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const FEATURE_DIM: usize = 7;

/// Canonical feature names, in extraction order.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "mean_intensity",
    "std_intensity",
    "skewness",
    "excess_kurtosis",
    "entropy_bits",
    "edge_density",
    "mean_gradient",
];

/// Edge threshold on the raw (unnormalized) Sobel magnitude of a [0,1] image.
pub const SOBEL_EDGE_THRESHOLD: f64 = 0.1;

/// Intensity histogram resolution for the entropy feature.
pub const HISTOGRAM_BINS: usize = 256;

/// Normalizer statistics never use more than this many samples.
pub const NORMALIZER_SAMPLE_LIMIT: usize = 1000;

/// Guard against zero-variance features when standardizing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureError {
    /// Wrong channel structure for grayscale conversion.
    Format(String),
    /// Image too small for the Sobel window.
    TooSmall { height: usize, width: usize },
    /// Pixel outside [0, 1].
    Range { value: f64 },
    /// Fewer than two samples offered to the normalizer.
    InsufficientData { got: usize },
}

impl fmt::Display for FeatureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureError::Format(msg) => write!(f, "format error: {msg}"),
            FeatureError::TooSmall { height, width } => {
                write!(f, "image {height}x{width} is smaller than the 3x3 minimum")
            }
            FeatureError::Range { value } => {
                write!(f, "pixel value {value} outside [0, 1]")
            }
            FeatureError::InsufficientData { got } => {
                write!(f, "normalizer needs at least 2 samples, got {got}")
            }
        }
    }
}

impl std::error::Error for FeatureError {}

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, FeatureError> {
        if pixels.len() != height * width {
            return Err(FeatureError::Format(format!(
                "expected {} pixels for {height}x{width}, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(FeatureError::Range { value: bad });
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

/// The normalized (or raw) 7-dimensional tactile descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn values(&self) -> &[f64; FEATURE_DIM] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// ITU-R BT.601 luma: `0.299·R + 0.587·G + 0.114·B`.
///
/// Expects exactly three planes of `height·width` values in [0, 1].
pub fn to_grayscale(
    channels: &[Vec<f64>],
    height: usize,
    width: usize,
) -> Result<GrayImage, FeatureError> {
    if channels.len() != 3 {
        return Err(FeatureError::Format(format!(
            "grayscale conversion needs 3 channels, got {}",
            channels.len()
        )));
    }
    let n = height * width;
    for (i, plane) in channels.iter().enumerate() {
        if plane.len() != n {
            return Err(FeatureError::Format(format!(
                "channel {i} has {} values, expected {n}",
                plane.len()
            )));
        }
    }
    let (r, g, b) = (&channels[0], &channels[1], &channels[2]);
    let mut pixels = Vec::with_capacity(n);
    for i in 0..n {
        pixels.push(0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]);
    }
    GrayImage::new(height, width, pixels)
}

/// Grayscale from interleaved 8-bit RGB rows (as decoded image buffers are).
pub fn gray_from_rgb8(data: &[u8], height: usize, width: usize) -> Result<GrayImage, FeatureError> {
    let n = height * width;
    if data.len() != 3 * n {
        return Err(FeatureError::Format(format!(
            "expected {} interleaved RGB bytes, got {}",
            3 * n,
            data.len()
        )));
    }
    let mut pixels = Vec::with_capacity(n);
    for px in data.chunks_exact(3) {
        let r = px[0] as f64 / 255.0;
        let g = px[1] as f64 / 255.0;
        let b = px[2] as f64 / 255.0;
        pixels.push(0.299 * r + 0.587 * g + 0.114 * b);
    }
    GrayImage::new(height, width, pixels)
}

/// Raw (pre-normalization) feature extraction.
///
/// Moments use population denominators; skewness and excess kurtosis of a
/// zero-variance image are defined as 0. Requires at least 3x3 pixels for
/// the Sobel window.
pub fn extract_features(img: &GrayImage) -> Result<FeatureVector, FeatureError> {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return Err(FeatureError::TooSmall {
            height: h,
            width: w,
        });
    }
    let n = (h * w) as f64;
    let mean = img.pixels.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &p in &img.pixels {
        let d = p - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let (skew, kurt) = if std < 1e-12 {
        (0.0, 0.0)
    } else {
        (m3 / (std * std * std), m4 / (m2 * m2) - 3.0)
    };

    // Shannon entropy of the 256-bin intensity histogram, in bits.
    let mut hist = vec![0u64; HISTOGRAM_BINS];
    for &p in &img.pixels {
        let bin = ((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[bin] += 1;
    }
    let mut entropy = 0.0;
    for &count in &hist {
        if count > 0 {
            let q = count as f64 / n;
            entropy -= q * q.log2();
        }
    }

    // Sobel over interior pixels, unnormalized 3x3 kernels.
    let mut edges = 0u64;
    let mut grad_sum = 0.0;
    let interior = ((h - 2) * (w - 2)) as f64;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let gx = img.at(i - 1, j + 1) + 2.0 * img.at(i, j + 1) + img.at(i + 1, j + 1)
                - img.at(i - 1, j - 1)
                - 2.0 * img.at(i, j - 1)
                - img.at(i + 1, j - 1);
            let gy = img.at(i + 1, j - 1) + 2.0 * img.at(i + 1, j) + img.at(i + 1, j + 1)
                - img.at(i - 1, j - 1)
                - 2.0 * img.at(i - 1, j)
                - img.at(i - 1, j + 1);
            let mag = (gx * gx + gy * gy).sqrt();
            grad_sum += mag;
            if mag > SOBEL_EDGE_THRESHOLD {
                edges += 1;
            }
        }
    }
    let edge_density = edges as f64 / interior;
    let mean_gradient = grad_sum / interior;

    Ok(FeatureVector([
        mean,
        std,
        skew,
        kurt,
        entropy,
        edge_density,
        mean_gradient,
    ]))
}

/// Per-feature standardization statistics fitted from training samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: [f64; FEATURE_DIM],
    pub std: [f64; FEATURE_DIM],
    pub n_fitted: usize,
    pub cap: usize,
    pub seed: u64,
}

impl FeatureNormalizer {
    /// Fit from images: uniform sample (without replacement) of
    /// `min(cap, len, 1000)` entries, then per-feature mean/std with the
    /// std floored at [`STD_FLOOR`].
    pub fn fit(
        samples: &[GrayImage],
        cap: usize,
        seed: u64,
    ) -> Result<FeatureNormalizer, FeatureError> {
        if samples.len() < 2 {
            return Err(FeatureError::InsufficientData { got: samples.len() });
        }
        let cap = cap.min(NORMALIZER_SAMPLE_LIMIT);
        let mut indices: Vec<usize> = (0..samples.len()).collect();
        let mut rng = rng_from(seed, "feature-normalizer");
        indices.shuffle(&mut rng);
        indices.truncate(cap.min(samples.len()));
        let feats = indices
            .iter()
            .map(|&i| extract_features(&samples[i]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_stats(&feats, cap, seed))
    }

    /// Fit from already-extracted raw features, sampling the same way.
    pub fn fit_from_features(features: &[FeatureVector], cap: usize, seed: u64) -> Result<FeatureNormalizer, FeatureError> {
        if features.len() < 2 {
            return Err(FeatureError::InsufficientData {
                got: features.len(),
            });
        }
        let cap = cap.min(NORMALIZER_SAMPLE_LIMIT);
        let mut indices: Vec<usize> = (0..features.len()).collect();
        let mut rng = rng_from(seed, "feature-normalizer");
        indices.shuffle(&mut rng);
        indices.truncate(cap.min(features.len()));
        let picked: Vec<FeatureVector> = indices.iter().map(|&i| features[i]).collect();
        Ok(Self::from_stats(&picked, cap, seed))
    }

    fn from_stats(feats: &[FeatureVector], cap: usize, seed: u64) -> FeatureNormalizer {
        let n = feats.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        let mut std = [0.0; FEATURE_DIM];
        for f in feats {
            for (m, v) in mean.iter_mut().zip(f.0) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for f in feats {
            for ((s, v), m) in std.iter_mut().zip(f.0).zip(mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt().max(STD_FLOOR);
        }
        FeatureNormalizer {
            mean,
            std,
            n_fitted: feats.len(),
            cap,
            seed,
        }
    }

    pub fn normalize(&self, v: &FeatureVector) -> FeatureVector {
        let mut out = [0.0; FEATURE_DIM];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (v.0[i] - self.mean[i]) / self.std[i];
        }
        FeatureVector(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn constant_image(h: usize, w: usize, v: f64) -> GrayImage {
        GrayImage::new(h, w, vec![v; h * w]).unwrap()
    }

    fn checkerboard(h: usize, w: usize) -> GrayImage {
        let pixels = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                ((r + c) % 2) as f64
            })
            .collect();
        GrayImage::new(h, w, pixels).unwrap()
    }

    #[test]
    fn grayscale_coefficients() {
        let n = 4;
        let r = to_grayscale(&[vec![1.0; n], vec![0.0; n], vec![0.0; n]], 2, 2).unwrap();
        assert!(r.pixels().iter().all(|&p| (p - 0.299).abs() < 1e-15));
        let g = to_grayscale(&[vec![0.0; n], vec![1.0; n], vec![0.0; n]], 2, 2).unwrap();
        assert!(g.pixels().iter().all(|&p| (p - 0.587).abs() < 1e-15));
        let b = to_grayscale(&[vec![0.0; n], vec![0.0; n], vec![1.0; n]], 2, 2).unwrap();
        assert!(b.pixels().iter().all(|&p| (p - 0.114).abs() < 1e-15));
    }

    #[test]
    fn grayscale_is_identity_on_gray_inputs() {
        for v in [0.0, 0.25, 0.5, 1.0] {
            let g = to_grayscale(&[vec![v; 4], vec![v; 4], vec![v; 4]], 2, 2).unwrap();
            assert!(g.pixels().iter().all(|&p| (p - v).abs() < 1e-12));
        }
    }

    #[test]
    fn grayscale_rejects_wrong_channel_count() {
        let err = to_grayscale(&[vec![0.0; 4], vec![0.0; 4]], 2, 2).unwrap_err();
        assert!(matches!(err, FeatureError::Format(_)));
    }

    #[test]
    fn constant_image_features() {
        let f = extract_features(&constant_image(8, 8, 0.5)).unwrap();
        assert_eq!(f.0, [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkerboard_features_match_closed_form() {
        let f = extract_features(&checkerboard(16, 16)).unwrap();
        assert!((f.0[0] - 0.5).abs() < 1e-12, "mean {}", f.0[0]);
        assert!((f.0[1] - 0.5).abs() < 1e-12, "std {}", f.0[1]);
        assert!((f.0[4] - 1.0).abs() < 1e-12, "entropy {}", f.0[4]);

        // brute-force histogram oracle
        let img = checkerboard(16, 16);
        let mut hist = [0u64; HISTOGRAM_BINS];
        for &p in img.pixels() {
            hist[((p * 256.0) as usize).min(255)] += 1;
        }
        let n = img.pixels().len() as f64;
        let oracle: f64 = hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let q = c as f64 / n;
                -q * q.log2()
            })
            .sum();
        assert!((f.0[4] - oracle).abs() < 1e-12);
    }

    #[test]
    fn feature_bounds_on_random_images() {
        let mut rng = crate::rng::rng_from(9, "feature-bounds");
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(3..40), rng.gen_range(3..40));
            let pixels: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let f = extract_features(&GrayImage::new(h, w, pixels).unwrap()).unwrap();
            assert!(f.is_finite());
            assert!((0.0..=8.0).contains(&f.0[4]), "entropy {}", f.0[4]);
            assert!((0.0..=1.0).contains(&f.0[5]), "edge density {}", f.0[5]);
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let err = extract_features(&constant_image(2, 5, 0.1)).unwrap_err();
        assert!(matches!(err, FeatureError::TooSmall { height: 2, width: 5 }));
        assert!(extract_features(&constant_image(3, 3, 0.1)).is_ok());
    }

    #[test]
    fn extraction_is_deterministic_and_storage_independent() {
        // same logical image built through two different fill orders
        let (h, w) = (9, 7);
        let value = |r: usize, c: usize| ((r * 31 + c * 17) % 11) as f64 / 10.0;
        let row_major: Vec<f64> = (0..h * w).map(|i| value(i / w, i % w)).collect();
        let mut col_built = vec![0.0; h * w];
        for c in 0..w {
            for r in 0..h {
                col_built[r * w + c] = value(r, c);
            }
        }
        let a = extract_features(&GrayImage::new(h, w, row_major).unwrap()).unwrap();
        let b = extract_features(&GrayImage::new(h, w, col_built).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalizer_sampling_cap() {
        let imgs: Vec<GrayImage> = (0..500)
            .map(|i| constant_image(3, 3, (i % 10) as f64 / 10.0))
            .collect();
        let norm = FeatureNormalizer::fit(&imgs, 1000, 7).unwrap();
        assert_eq!(norm.n_fitted, 500);

        let feats: Vec<FeatureVector> = (0..5000)
            .map(|i| FeatureVector([(i % 100) as f64; FEATURE_DIM]))
            .collect();
        let norm = FeatureNormalizer::fit_from_features(&feats, 1000, 7).unwrap();
        assert_eq!(norm.n_fitted, 1000);
        assert!(norm.n_fitted <= NORMALIZER_SAMPLE_LIMIT);
    }

    #[test]
    fn normalizer_requires_two_samples() {
        let imgs = vec![constant_image(3, 3, 0.5)];
        assert!(matches!(
            FeatureNormalizer::fit(&imgs, 1000, 7),
            Err(FeatureError::InsufficientData { got: 1 })
        ));
    }

    #[test]
    fn identical_images_floor_the_std() {
        let imgs: Vec<GrayImage> = (0..10).map(|_| constant_image(4, 4, 0.3)).collect();
        let norm = FeatureNormalizer::fit(&imgs, 1000, 7).unwrap();
        for s in norm.std {
            assert_eq!(s, STD_FLOOR);
        }
        // normalizing the common feature vector must not blow up
        let f = extract_features(&imgs[0]).unwrap();
        let z = norm.normalize(&f);
        assert!(z.is_finite());
        for v in z.0 {
            assert!(v.abs() < 1e-6, "normalized constant feature {v}");
        }
    }

    #[test]
    fn normalize_identities() {
        let norm = FeatureNormalizer {
            mean: [0.0; FEATURE_DIM],
            std: [1.0; FEATURE_DIM],
            n_fitted: 2,
            cap: 1000,
            seed: 0,
        };
        let v = FeatureVector([0.3, -2.0, 5.0, 0.1, 7.5, 0.9, 3.3]);
        assert_eq!(norm.normalize(&v), v);

        let norm = FeatureNormalizer {
            mean: v.0,
            std: [2.0; FEATURE_DIM],
            n_fitted: 2,
            cap: 1000,
            seed: 0,
        };
        assert_eq!(norm.normalize(&v).0, [0.0; FEATURE_DIM]);
    }

    #[test]
    fn fitted_set_is_standardized_after_normalize() {
        let mut rng = crate::rng::rng_from(21, "norm-oracle");
        let feats: Vec<FeatureVector> = (0..300)
            .map(|_| {
                let mut f = [0.0; FEATURE_DIM];
                for (i, v) in f.iter_mut().enumerate() {
                    *v = rng.gen_range(-1.0..1.0) * (i as f64 + 1.0) + i as f64;
                }
                FeatureVector(f)
            })
            .collect();
        let norm = FeatureNormalizer::fit_from_features(&feats, 1000, 3).unwrap();
        assert_eq!(norm.n_fitted, 300);

        // recomputation oracle over the full fitted set
        let normalized: Vec<FeatureVector> = feats.iter().map(|f| norm.normalize(f)).collect();
        for i in 0..FEATURE_DIM {
            let n = normalized.len() as f64;
            let mean: f64 = normalized.iter().map(|f| f.0[i]).sum::<f64>() / n;
            let var: f64 = normalized
                .iter()
                .map(|f| (f.0[i] - mean) * (f.0[i] - mean))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-6, "feature {i} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-3, "feature {i} std {}", var.sqrt());
        }
    }
}
