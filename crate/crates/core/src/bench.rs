//! Single-thread inference latency measurement on a monotonic clock.
//!
//! Two scopes: `ModelOnly` times forward passes on pre-built tensors;
//! `FullPipeline` starts from raw decoded image bytes and includes vision
//! preprocessing and the tactile grayscale/feature/normalize path, which is
//! the deployment-relevant number.

use crate::data::{preprocess_image, Preprocess, RgbImage};
use crate::features::{extract_features, FeatureNormalizer, FEATURE_DIM};
use crate::model::{predict, Mode, SurformerModel};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorResult};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchScope {
    FullPipeline,
    ModelOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
}

impl LatencyStats {
    fn from_samples(samples: &[f64]) -> LatencyStats {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let n = sorted.len();
        let median = if n.is_multiple_of(2) {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        } else {
            sorted[n / 2]
        };
        let p95_idx = ((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1;
        LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: sorted[p95_idx],
            min_ms: sorted[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub scope: BenchScope,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Per-sample totals across both branches and fusion.
    pub total: LatencyStats,
    pub vision_branch: LatencyStats,
    pub tactile_branch: LatencyStats,
    pub fuse_and_predict: LatencyStats,
}

/// Batch-1 latency over `samples`, cycling when `iters` exceeds the sample
/// count. Warmup iterations are excluded from the statistics.
pub fn bench_inference<S: Scalar>(
    model: &SurformerModel<S>,
    normalizer: &FeatureNormalizer,
    pp: &Preprocess,
    samples: &[(RgbImage, RgbImage)],
    warmup: usize,
    iters: usize,
    scope: BenchScope,
) -> TensorResult<LatencyReport> {
    if iters < 10 {
        return Err(TensorError::Config(format!(
            "need at least 10 timed iterations, got {iters}"
        )));
    }
    if samples.is_empty() {
        return Err(TensorError::Config("no samples to benchmark".into()));
    }

    // Pre-built tensors for the model-only scope.
    let prepared: Vec<(Tensor<S>, Tensor<S>)> = samples
        .iter()
        .map(|(vision, tactile)| -> TensorResult<(Tensor<S>, Tensor<S>)> {
            let img = preprocess_image::<S>(vision, pp);
            let img = img.reshaped(vec![1, 3, pp.size, pp.size])?;
            let gray = tactile
                .to_gray()
                .map_err(|e| TensorError::Config(e.to_string()))?;
            let raw = extract_features(&gray).map_err(|e| TensorError::Config(e.to_string()))?;
            let z = normalizer.normalize(&raw);
            let feats = Tensor::from_f64_slice(vec![1, FEATURE_DIM], &z.0)?;
            Ok((img, feats))
        })
        .collect::<TensorResult<_>>()?;

    let mut vision_ms = Vec::with_capacity(iters);
    let mut tactile_ms = Vec::with_capacity(iters);
    let mut fuse_ms = Vec::with_capacity(iters);
    let mut total_ms = Vec::with_capacity(iters);

    for i in 0..warmup + iters {
        let idx = i % samples.len();
        let mut tape = Tape::new();

        let t0 = Instant::now();
        let (vision_logits, t1, tactile_logits, t2) = match scope {
            BenchScope::ModelOnly => {
                let (img, feats) = &prepared[idx];
                let v = model.vision_forward(&mut tape, img, &mut Mode::Eval)?;
                let t1 = Instant::now();
                let t = model.tactile_forward(&mut tape, feats, &mut Mode::Eval)?;
                (v, t1, t, Instant::now())
            }
            BenchScope::FullPipeline => {
                let (vision_raw, tactile_raw) = &samples[idx];
                let img = preprocess_image::<S>(vision_raw, pp)
                    .reshaped(vec![1, 3, pp.size, pp.size])?;
                let v = model.vision_forward(&mut tape, &img, &mut Mode::Eval)?;
                let t1 = Instant::now();
                let gray = tactile_raw
                    .to_gray()
                    .map_err(|e| TensorError::Config(e.to_string()))?;
                let raw = extract_features(&gray)
                    .map_err(|e| TensorError::Config(e.to_string()))?;
                let z = normalizer.normalize(&raw);
                let feats = Tensor::from_f64_slice(vec![1, FEATURE_DIM], &z.0)?;
                let t = model.tactile_forward(&mut tape, &feats, &mut Mode::Eval)?;
                (v, t1, t, Instant::now())
            }
        };
        let fused = model.fuse(&mut tape, vision_logits, tactile_logits)?;
        let _ = predict(tape.value(fused))?;
        let t3 = Instant::now();

        if i >= warmup {
            vision_ms.push((t1 - t0).as_secs_f64() * 1e3);
            tactile_ms.push((t2 - t1).as_secs_f64() * 1e3);
            fuse_ms.push((t3 - t2).as_secs_f64() * 1e3);
            total_ms.push((t3 - t0).as_secs_f64() * 1e3);
        }
    }

    Ok(LatencyReport {
        scope,
        warmup_iters: warmup,
        timed_iters: iters,
        total: LatencyStats::from_samples(&total_ms),
        vision_branch: LatencyStats::from_samples(&vision_ms),
        tactile_branch: LatencyStats::from_samples(&tactile_ms),
        fuse_and_predict: LatencyStats::from_samples(&fuse_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_configs;

    fn sample_pair() -> (RgbImage, RgbImage) {
        let img = RgbImage::new(8, 8, (0..192).map(|v| (v % 251) as u8).collect()).unwrap();
        (img.clone(), img)
    }

    fn setup() -> (SurformerModel<f32>, FeatureNormalizer, Preprocess) {
        let (v, t) = tiny_configs(3);
        let model = SurformerModel::new(v, t, 1).unwrap();
        let norm = FeatureNormalizer {
            mean: [0.0; 7],
            std: [1.0; 7],
            n_fitted: 2,
            cap: 1000,
            seed: 0,
        };
        let pp = Preprocess {
            size: 8,
            ..Preprocess::default()
        };
        (model, norm, pp)
    }

    #[test]
    fn report_invariants_hold_in_both_scopes() {
        let (model, norm, pp) = setup();
        let samples = vec![sample_pair()];
        for scope in [BenchScope::ModelOnly, BenchScope::FullPipeline] {
            let report = bench_inference(&model, &norm, &pp, &samples, 2, 12, scope).unwrap();
            assert_eq!(report.timed_iters, 12);
            assert_eq!(report.warmup_iters, 2);
            for stats in [
                &report.total,
                &report.vision_branch,
                &report.tactile_branch,
                &report.fuse_and_predict,
            ] {
                assert!(stats.min_ms > 0.0);
                assert!(stats.min_ms <= stats.median_ms);
                assert!(stats.median_ms <= stats.p95_ms);
            }
        }
    }

    #[test]
    fn too_few_iterations_rejected() {
        let (model, norm, pp) = setup();
        let samples = vec![sample_pair()];
        assert!(matches!(
            bench_inference(&model, &norm, &pp, &samples, 0, 9, BenchScope::ModelOnly),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn stats_from_known_samples() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.min_ms, 1.0);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.p95_ms, 4.0);
    }
}
