use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{adam::AdamConfig, pairwise_sum, squared_euclidean, Real, Tensor};

/// Local training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Hinge margin on each neighbour distance.
    pub th: f64,
    pub k_knn: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub optimizer: AdamConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            th: 0.01,
            k_knn: 3,
            batch_size: 10,
            local_epochs: 1,
            optimizer: AdamConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self, bank_size: usize) -> Result<()> {
        if !(self.th >= 0.0) {
            return Err(Error::config_key("th", "hinge margin must be >= 0"));
        }
        if self.k_knn == 0 || self.k_knn > bank_size {
            return Err(Error::config_key(
                "k_knn",
                format!("k_knn must lie in 1..={bank_size}"),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config_key("batch_size", "batch size must be >= 1"));
        }
        self.optimizer.validate()
    }
}

/// `K` nearest bank rows per query, ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors<T> {
    pub k: usize,
    /// Row-major `P×K` bank indices.
    pub indices: Vec<usize>,
    /// Row-major `P×K` Euclidean distances.
    pub dists: Vec<T>,
}

impl<T: Real> Neighbors<T> {
    pub fn of(&self, p: usize) -> (&[usize], &[T]) {
        (
            &self.indices[p * self.k..(p + 1) * self.k],
            &self.dists[p * self.k..(p + 1) * self.k],
        )
    }
}

/// Nearest-`K` search; ties go to the lower bank index.
pub fn knn_lookup<T: Real>(patches: &Tensor<T>, bank: &Tensor<T>, k: usize) -> Result<Neighbors<T>> {
    let (p, c) = patches.as_rows();
    let (q, cb) = bank.as_rows();
    if c != cb {
        return Err(Error::dim(format!(
            "patch dim {c} does not match bank patch dim {cb}"
        )));
    }
    if k == 0 || k > q {
        return Err(Error::contract(format!("K={k} but bank holds {q} patches")));
    }
    let mut indices = Vec::with_capacity(p * k);
    let mut dists = Vec::with_capacity(p * k);
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for i in 0..p {
        best.clear();
        let row = patches.row(i);
        for j in 0..q {
            let d2 = squared_euclidean(row, bank.row(j));
            if best.len() == k && d2 >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d2);
            best.insert(pos, (d2, j));
            best.truncate(k);
        }
        for &(d2, j) in &best {
            indices.push(j);
            dists.push(d2.sqrt());
        }
    }
    Ok(Neighbors { k, indices, dists })
}

/// Hinged mean distance of every memory patch to its `K` nearest bank
/// patches, with its gradient w.r.t. the memory map. Neighbour selection and
/// the bank are treated as constants.
pub fn metric_loss<T: Real>(m: &Tensor<T>, bank: &Tensor<T>, cfg: &LossConfig) -> Result<(f64, Tensor<T>)> {
    let (h, w, c) = m.hwc()?;
    let (_, cb) = bank.as_rows();
    if c != cb {
        return Err(Error::dim(format!(
            "memory has {c} channels, bank patches have {cb}"
        )));
    }
    let k = cfg.k_knn;
    let nn = knn_lookup(m, bank, k)?;
    let th = T::lit(cfg.th);
    let norm = 1.0 / (h * w * k) as f64;
    let scale = T::lit(norm);
    let mut terms = Vec::with_capacity(h * w * k);
    let mut grad = Tensor::zeros_like(m);
    for p in 0..h * w {
        let (idx, ds) = nn.of(p);
        let row = m.row(p).to_vec();
        let g = &mut grad.data_mut()[p * c..(p + 1) * c];
        for (&j, &d) in idx.iter().zip(ds) {
            let hinge = d - th;
            if hinge > T::zero() {
                terms.push(hinge.as_f64());
                if d > T::zero() {
                    let b = bank.row(j);
                    for ch in 0..c {
                        g[ch] = g[ch] + scale * (row[ch] - b[ch]) / d;
                    }
                }
            }
        }
    }
    Ok((pairwise_sum(&terms) * norm, grad))
}
