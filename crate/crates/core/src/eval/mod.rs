//! Test-time scoring, heatmaps, detection metrics and the synthetic benchmark.

pub mod data;
pub mod heatmap;
pub mod metrics;
pub mod scoring;

pub use data::{dirichlet_partition, synth_dataset, LabeledSample, SynthData, SynthSpec};
pub use heatmap::{gaussian_blur, gaussian_kernel, min_max, postprocess_heatmap, Heatmap};
pub use metrics::{auroc, connected_components, pro};
pub use scoring::{image_score, pixel_scores, ScoreMode};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientModel, MemoryBank};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Neighbours retrieved per test patch.
    pub k: usize,
    pub score_mode: ScoreMode,
    pub sigma: f64,
    pub fpr_budget: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            score_mode: ScoreMode::Min,
            sigma: 4.0,
            fpr_budget: 0.3,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config_key("k", "must be >= 1"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config_key("sigma", "must be >= 0"));
        }
        if !(self.fpr_budget > 0.0 && self.fpr_budget <= 1.0) {
            return Err(Error::config_key("fpr_budget", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A test sample reduced to what scoring needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TestItem {
    pub fused: Tensor<f32>,
    pub label: u8,
    /// Image resolution for the heatmap.
    pub image_dims: (usize, usize),
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub i_auroc: f64,
    /// `None` when no test pixel is anomalous.
    pub p_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub image_scores: Vec<f64>,
}

/// Per-sample patch map, image score and full-resolution heatmap.
pub fn score_item(model: &ClientModel<f32>, bank: &MemoryBank, item: &TestItem, cfg: &EvalConfig) -> Result<(Tensor<f32>, f64, Heatmap)> {
    let (m, _) = model.forward(&item.fused)?;
    let a = pixel_scores(&m, &bank.patches, cfg.k, cfg.score_mode)?;
    let score = image_score(&a)?;
    let hm = postprocess_heatmap(&a, item.image_dims, cfg.sigma)?;
    Ok((a, score, hm))
}

/// Image AUROC, pixel AUROC and PRO of one model against one bank. Pixel
/// metrics use the blurred maps before per-image normalization so that
/// thresholds compare across images.
pub fn evaluate(model: &ClientModel<f32>, bank: &MemoryBank, test: &[TestItem], cfg: &EvalConfig) -> Result<EvalReport> {
    let scored: Vec<(f64, Tensor<f32>)> = test
        .par_iter()
        .map(|it| score_item(model, bank, it, cfg).map(|(_, s, hm)| (s, hm.blurred)))
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = test.iter().map(|t| t.label).collect();
    let image_scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let i_auroc = auroc(&image_scores, &labels)?;

    let masks: Vec<Tensor<f32>> = test
        .iter()
        .zip(&scored)
        .map(|(t, (_, hm))| t.mask.clone().unwrap_or_else(|| Tensor::zeros_like(hm)))
        .collect();
    let any_anomalous = masks.iter().any(|m| m.data().iter().any(|&v| v > 0.5));
    let (p_auroc, pro_value) = if any_anomalous {
        let mut px_scores = Vec::new();
        let mut px_labels = Vec::new();
        for ((_, hm), m) in scored.iter().zip(&masks) {
            hm.same_dims(m)?;
            px_scores.extend(hm.data().iter().map(|&v| v as f64));
            px_labels.extend(m.data().iter().map(|&v| (v > 0.5) as u8));
        }
        let heatmaps: Vec<Tensor<f32>> = scored.into_iter().map(|s| s.1).collect();
        (
            Some(auroc(&px_scores, &px_labels)?),
            Some(pro(&heatmaps, &masks, cfg.fpr_budget)?),
        )
    } else {
        (None, None)
    };
    Ok(EvalReport {
        i_auroc,
        p_auroc,
        pro: pro_value,
        image_scores,
    })
}
