//! Full-dataset evaluation: confusion matrix, precision/recall/F1,
//! one-vs-rest ROC/AUC, and parameter counts assembled into one report.
//! Latency is measured by the separate benchmark path, so the report stays
//! byte-reproducible.

use crate::bench::LatencyReport;
use crate::data::{preprocess_image, DatasetManifest, Preprocess};
use crate::features::{extract_features, FeatureNormalizer, FEATURE_DIM};
use crate::metrics::{confusion, prf1, roc_auc, ConfusionMatrix, PrfReport, RocReport};
use crate::model::{predict, Mode, ParamCounts, SurformerModel};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::TrainError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub n_samples: usize,
    pub confusion: ConfusionMatrix,
    pub prf: PrfReport,
    pub roc: RocReport,
    pub parameter_counts: ParamCounts,
    /// Filled only by the benchmark command; wall-clock values would break
    /// byte-level reproducibility of evaluation outputs.
    pub latency: Option<LatencyReport>,
}

/// Evaluate in eval mode over a manifest, batch by batch.
pub fn evaluate<S: Scalar>(
    model: &SurformerModel<S>,
    manifest: &DatasetManifest,
    normalizer: &FeatureNormalizer,
    pp: &Preprocess,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if manifest.samples.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    let n_classes = manifest.classes.len();
    let input_hw = model.vision_cfg.input_hw;
    if pp.size != input_hw {
        return Err(TrainError::Config(format!(
            "preprocess size {} does not match vision input {input_hw}",
            pp.size
        )));
    }

    let mut y_true = Vec::with_capacity(manifest.samples.len());
    let mut y_pred = Vec::with_capacity(manifest.samples.len());
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(manifest.samples.len());

    for chunk in manifest.samples.chunks(batch_size.max(1)) {
        let b = chunk.len();
        let img_len = 3 * input_hw * input_hw;
        let mut images = vec![S::zero(); b * img_len];
        let mut feats = vec![S::zero(); b * FEATURE_DIM];
        for (row, sample) in chunk.iter().enumerate() {
            let vision = sample.vision.load()?;
            let img = preprocess_image::<S>(&vision, pp);
            images[row * img_len..(row + 1) * img_len].copy_from_slice(img.data());
            let gray = sample.tactile.load()?.to_gray()?;
            let raw = extract_features(&gray)?;
            let z = normalizer.normalize(&raw);
            for (j, v) in z.0.iter().enumerate() {
                feats[row * FEATURE_DIM + j] = S::from_f64(*v);
            }
            y_true.push(sample.label);
        }
        let images = Tensor::new(vec![b, 3, input_hw, input_hw], images)?;
        let feats = Tensor::new(vec![b, FEATURE_DIM], feats)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &images, &feats, &mut Mode::Eval)?;
        let pred = predict(tape.value(out.fused))?;
        y_pred.extend_from_slice(&pred.classes);
        for row in pred.probabilities.data().chunks(n_classes) {
            scores.push(row.iter().map(|v| v.as_f64()).collect());
        }
    }

    let cm = confusion(&y_true, &y_pred, n_classes)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let prf = prf1(&cm);
    let roc = roc_auc(&scores, &y_true, n_classes)
        .map_err(|e| TrainError::Config(e.to_string()))?;

    Ok(EvalReport {
        classes: manifest.classes.clone(),
        n_samples: manifest.samples.len(),
        confusion: cm,
        prf,
        roc,
        parameter_counts: model.count_parameters(),
        latency: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetSource, ImageSource, PairedSample, RgbImage};
    use crate::model::tiny_configs;
    use std::path::PathBuf;

    #[test]
    fn evaluate_produces_consistent_report() {
        let (mut vcfg, tcfg) = tiny_configs(3);
        vcfg.input_hw = 8;
        let model = SurformerModel::<f64>::new(vcfg, tcfg, 2).unwrap();
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
        let classes: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let mut samples = Vec::new();
        for label in 0..3usize {
            for i in 0..4usize {
                let v = ((label * 60 + i) % 255) as u8;
                let img = RgbImage::new(8, 8, vec![v; 192]).unwrap();
                samples.push(PairedSample {
                    id: format!("{label}_{i}"),
                    vision: ImageSource::Memory(img.clone()),
                    tactile: ImageSource::Memory(img),
                    label,
                    class_name: classes[label].clone(),
                });
            }
        }
        let manifest = DatasetManifest {
            classes,
            samples,
            source: DatasetSource::Directory(PathBuf::from("/memory")),
        };
        let report = evaluate(&model, &manifest, &norm, &pp, 5).unwrap();
        assert_eq!(report.n_samples, 12);
        assert_eq!(report.confusion.total(), 12);
        assert!((report.prf.accuracy - report.confusion.accuracy()).abs() < 1e-12);
        assert!(report.latency.is_none());
        assert_eq!(report.parameter_counts.fusion_total, 2);
        // probabilities well formed: report serializes deterministically
        let a = serde_json::to_string(&report).unwrap();
        let report2 = evaluate(&model, &manifest, &norm, &pp, 5).unwrap();
        let b = serde_json::to_string(&report2).unwrap();
        assert_eq!(a, b);
    }
}
