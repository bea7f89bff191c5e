use serde::{Deserialize, Serialize};

use crate::client::knn_lookup;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How the `K` retrieved neighbour distances become one patch score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Smallest of the `K` distances (the 1-NN distance).
    #[default]
    Min,
    Mean,
}

/// Per-patch scores as an `H×W` map.
pub fn pixel_scores(m: &Tensor<f32>, bank: &Tensor<f32>, k: usize, mode: ScoreMode) -> Result<Tensor<f32>> {
    let (h, w, c) = m.hwc()?;
    let (_, cb) = bank.as_rows();
    if c != cb {
        return Err(Error::dim(format!(
            "test memory has {c} channels, bank patches have {cb}"
        )));
    }
    let nn = knn_lookup(m, bank, k)?;
    let scores = (0..h * w)
        .map(|p| {
            let (_, d) = nn.of(p);
            match mode {
                ScoreMode::Min => d[0],
                ScoreMode::Mean => d.iter().sum::<f32>() / k as f32,
            }
        })
        .collect();
    Tensor::new(&[h, w], scores)
}

/// `max_p a_p · softmax(a)_p`, with the softmax shifted by `max a`.
pub fn image_score(a: &Tensor<f32>) -> Result<f64> {
    if a.is_empty() || !a.all_finite() {
        return Err(Error::numeric("anomaly map must be nonempty and finite"));
    }
    let vals: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = vals.iter().map(|v| (v - top).exp()).sum();
    Ok(vals
        .iter()
        .map(|v| v * (v - top).exp() / z)
        .fold(f64::NEG_INFINITY, f64::max))
}
