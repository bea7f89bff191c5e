use crate::error::{Error, Result};
use super::knn::knn_lookup;
use crate::numerics::{pairwise_sum, Tensor};

/// Fixed-size `H×W×C` bank of memory patches.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub patches: Tensor<f32>,
    /// Round that produced this bank.
    pub round: u64,
}

impl MemoryBank {
    pub fn new(patches: Tensor<f32>, round: u64) -> Result<Self> {
        patches.hwc()?;
        if !patches.all_finite() {
            return Err(Error::numeric("memory bank holds non-finite values"));
        }
        Ok(Self { patches, round })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.patches.hwc().expect("bank is rank 3")
    }

    pub fn size(&self) -> usize {
        let (h, w, _) = self.dims();
        h * w
    }

    /// Largest Euclidean norm over the bank patches.
    pub fn max_patch_norm(&self) -> f64 {
        max_patch_norm(&self.patches)
    }
}

pub fn max_patch_norm(t: &Tensor<f32>) -> f64 {
    let (n, _) = t.as_rows();
    (0..n)
        .map(|r| t.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `Σ wᵢ Mᵢ / Σ wᵢ`, summed per element with pairwise reduction in `f64`.
/// A zero weight sum falls back to uniform weights.
pub fn weighted_average(memories: &[Tensor<f32>], weights: &[f64]) -> Result<Tensor<f32>> {
    let first = memories
        .first()
        .ok_or_else(|| Error::contract("memory list is empty"))?;
    if weights.len() != memories.len() {
        return Err(Error::contract(format!(
            "{} weights for {} memories",
            weights.len(),
            memories.len()
        )));
    }
    for m in memories {
        first.same_dims(m)?;
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::numeric("memory weights must be finite and non-negative"));
    }
    let total = pairwise_sum(weights);
    let uniform;
    let (w, total) = if total > 0.0 {
        (weights, total)
    } else {
        uniform = vec![1.0; memories.len()];
        (&uniform[..], memories.len() as f64)
    };
    let mut terms = vec![0.0; memories.len()];
    let data = (0..first.len())
        .map(|e| {
            for (i, m) in memories.iter().enumerate() {
                terms[i] = w[i] * m.data()[e] as f64;
            }
            (pairwise_sum(&terms) / total) as f32
        })
        .collect();
    let out = Tensor::new(first.dims(), data)?;
    if !out.all_finite() {
        return Err(Error::numeric("weighted average overflowed"));
    }
    Ok(out)
}

/// Frobenius distance of each memory to the previous bank.
pub fn dynamic_weights(memories: &[Tensor<f32>], prev: &Tensor<f32>) -> Result<Vec<f64>> {
    memories
        .iter()
        .map(|m| {
            m.same_dims(prev)?;
            let sq: Vec<f64> = m
                .data()
                .iter()
                .zip(prev.data())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .collect();
            Ok(pairwise_sum(&sq).sqrt())
        })
        .collect()
}

/// Reduces one client's memories into its bank for round `t`: uniform weights
/// at `t = 0`, distance weights and an EMA with `α = 1/(t+1)` afterwards.
pub fn memory_reduce(memories: &[Tensor<f32>], prev: Option<&MemoryBank>, t: u64) -> Result<MemoryBank> {
    if memories.is_empty() {
        return Err(Error::contract("memory list is empty"));
    }
    match (t, prev) {
        (0, None) => {
            let avg = weighted_average(memories, &vec![1.0; memories.len()])?;
            MemoryBank::new(avg, 0)
        }
        (0, Some(_)) => Err(Error::contract("round 0 takes no previous bank")),
        (_, None) => Err(Error::contract(format!("round {t} needs the previous bank"))),
        (_, Some(prev)) => {
            let w = dynamic_weights(memories, &prev.patches)?;
            let avg = weighted_average(memories, &w)?;
            let alpha = 1.0 / (t as f64 + 1.0);
            let data = avg
                .data()
                .iter()
                .zip(prev.patches.data())
                .map(|(&a, &p)| (alpha * a as f64 + (1.0 - alpha) * p as f64) as f32)
                .collect();
            MemoryBank::new(Tensor::new(avg.dims(), data)?, t)
        }
    }
}

/// The received bank re-indexed onto the client's own positions: position
/// `(h, w)` takes the bank patch nearest to the client's mean memory there.
/// Loss and scoring treat a bank as a patch set; this only decides which
/// patch the EMA blends into each position.
pub fn align_bank(prev: &MemoryBank, memories: &[Tensor<f32>]) -> Result<MemoryBank> {
    if memories.is_empty() {
        return Err(Error::contract("memory list is empty"));
    }
    let mean = weighted_average(memories, &vec![1.0; memories.len()])?;
    mean.same_dims(&prev.patches)?;
    let nn = knn_lookup(&mean, &prev.patches, 1)?;
    let mut data = Vec::with_capacity(prev.patches.len());
    for p in 0..prev.size() {
        data.extend_from_slice(prev.patches.row(nn.of(p).0[0]));
    }
    MemoryBank::new(Tensor::new(prev.patches.dims(), data)?, prev.round)
}
