//! Server side: k-means aggregation of client banks and byte accounting.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{weighted_average, MemoryBank};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClusterPolicy {
    /// Move the point farthest from its center in the largest cluster.
    #[default]
    FarthestOfLargest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub max_iters: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final SSE wins.
    pub n_init: usize,
    pub empty_cluster: EmptyClusterPolicy,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            n_init: 10,
            empty_cluster: EmptyClusterPolicy::FarthestOfLargest,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config_key("max_iters", "must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config_key("tol", "must be > 0"));
        }
        if self.n_init == 0 {
            return Err(Error::config_key("n_init", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `K×C` centers.
    pub centers: Tensor<f32>,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(pts: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = pts[pick].clone();
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(pts: &[Vec<f64>], centers: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (a, p) in out.iter_mut().zip(pts) {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centers.iter().enumerate() {
            let d = sq(p, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        *a = best.1;
        sse += best.0;
    }
    sse
}

fn lloyd(pts: &[Vec<f64>], k: usize, cfg: &AggregationConfig, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let dim = pts[0].len();
    let mut centers = seed_plus_plus(pts, k, rng);
    let mut assignments = vec![0; pts.len()];
    let mut history = Vec::new();
    for _ in 0..cfg.max_iters {
        history.push(assign(pts, &centers, &mut assignments));
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // Repair empty clusters before the update so every center keeps a member.
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("k >= 1");
            if counts[largest] < 2 {
                break;
            }
            let far = (0..pts.len())
                .filter(|&i| assignments[i] == largest)
                .max_by(|&a, &b| {
                    sq(&pts[a], &centers[largest])
                        .total_cmp(&sq(&pts[b], &centers[largest]))
                        .then(b.cmp(&a))
                })
                .expect("largest cluster is nonempty");
            assignments[far] = empty;
            counts[largest] -= 1;
            counts[empty] += 1;
            centers[empty] = pts[far].clone();
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in pts.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(sq(&new, &centers[j]).sqrt());
            centers[j] = new;
        }
        if shift < cfg.tol {
            break;
        }
    }
    (centers, assignments, history)
}

/// Lloyd's algorithm from k-means++ seeding on the rows of `points`.
pub fn kmeans(points: &Tensor<f32>, k: usize, cfg: &AggregationConfig, rng: &mut impl Rng) -> Result<KMeans> {
    let (n, c) = points.as_rows();
    if n == 0 || points.is_empty() {
        return Err(Error::contract("k-means input is empty"));
    }
    if k == 0 || k > n {
        return Err(Error::contract(format!("K={k} but only {n} points")));
    }
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| points.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> = None;
    for _ in 0..cfg.n_init {
        let run = lloyd(&pts, k, cfg, rng);
        let better = match &best {
            None => true,
            Some(b) => run.2.last() < b.2.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (centers, assignments, sse_history) = best.expect("n_init >= 1");
    let data = centers.iter().flatten().map(|&v| v as f32).collect();
    Ok(KMeans {
        centers: Tensor::new(&[k, c], data)?,
        assignments,
        iterations: sse_history.len(),
        sse_history,
    })
}

fn check_shapes(banks: &[MemoryBank]) -> Result<(usize, usize, usize)> {
    let first = banks.first().ok_or_else(|| Error::contract("no banks to aggregate"))?;
    let dims = first.dims();
    for b in banks {
        if b.dims() != dims {
            return Err(Error::dim(format!(
                "bank shapes differ: {:?} vs {:?}",
                dims,
                b.dims()
            )));
        }
    }
    Ok(dims)
}

/// Pools every client's patches and clusters them into `H·W` centers laid
/// out row-major as the new `H×W×C` bank.
pub fn aggregate(banks: &[MemoryBank], cfg: &AggregationConfig, round: u64, rng: &mut impl Rng) -> Result<(MemoryBank, KMeans)> {
    let (h, w, c) = check_shapes(banks)?;
    let mut pooled = Vec::with_capacity(banks.len() * h * w * c);
    for b in banks {
        pooled.extend_from_slice(b.patches.data());
    }
    let points = Tensor::new(&[banks.len() * h * w, c], pooled)?;
    let km = kmeans(&points, h * w, cfg, rng)?;
    let bank = MemoryBank::new(km.centers.clone().reshape(&[h, w, c])?, round)?;
    Ok((bank, km))
}

/// Elementwise mean of the client banks.
pub fn plain_average(banks: &[MemoryBank], round: u64) -> Result<MemoryBank> {
    check_shapes(banks)?;
    let tensors: Vec<_> = banks.iter().map(|b| b.patches.clone()).collect();
    MemoryBank::new(weighted_average(&tensors, &vec![1.0; tensors.len()])?, round)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Exchange {
    pub round: u64,
    pub client: usize,
    pub direction: Direction,
    pub bytes: u64,
}

/// Every simulated message with its serialized size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    pub entries: Vec<Exchange>,
}

impl CommLedger {
    pub fn record_exchange(&mut self, round: u64, client: usize, direction: Direction, bytes: u64) {
        self.entries.push(Exchange {
            round,
            client,
            direction,
            bytes,
        });
    }

    /// `(uploaded, downloaded)` bytes over all rounds.
    pub fn totals(&self) -> (u64, u64) {
        self.sum(|_| true)
    }

    pub fn round_totals(&self, round: u64) -> (u64, u64) {
        self.sum(|e| e.round == round)
    }

    pub fn message_count(&self, round: u64) -> usize {
        self.entries.iter().filter(|e| e.round == round).count()
    }

    fn sum(&self, keep: impl Fn(&Exchange) -> bool) -> (u64, u64) {
        self.entries.iter().filter(|e| keep(e)).fold((0, 0), |(u, d), e| match e.direction {
            Direction::Up => (u + e.bytes, d),
            Direction::Down => (u, d + e.bytes),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,client,dir,bytes\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.round, e.client, e.direction.as_str(), e.bytes);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::io::encoded_len;
    use crate::numerics::SeedStream;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        SeedStream::new(seed).rng(0)
    }

    fn pts(rows: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn(&[rows, c], |_| r.random_range(-1.0..1.0))
    }

    fn cfg() -> AggregationConfig {
        AggregationConfig::default()
    }

    #[test]
    fn identical_points_single_cluster() {
        let p = Tensor::new(&[4, 2], vec![0.5f32, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let km = kmeans(&p, 1, &cfg(), &mut rng(1)).unwrap();
        assert_eq!(km.centers.data(), &[0.5, -1.0]);
    }

    #[test]
    fn two_symmetric_clusters() {
        let p = Tensor::new(&[4, 1], vec![0.0f32, 0.0, 10.0, 10.0]).unwrap();
        let km = kmeans(&p, 2, &cfg(), &mut rng(2)).unwrap();
        let mut c = km.centers.data().to_vec();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert!(kmeans(&p, 5, &cfg(), &mut rng(2)).is_err());
    }

    /// Brute-force optimum over all two-way labelings.
    fn exhaustive_k2(p: &Tensor<f32>) -> f64 {
        let (n, c) = p.as_rows();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut sse = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..n).filter(|&i| (mask >> i & 1) == side).collect();
                let mean: Vec<f64> = (0..c)
                    .map(|ch| members.iter().map(|&i| p.row(i)[ch] as f64).sum::<f64>() / members.len() as f64)
                    .collect();
                for &i in &members {
                    sse += (0..c).map(|ch| (p.row(i)[ch] as f64 - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            best = best.min(sse);
        }
        best
    }

    #[test]
    fn reaches_exhaustive_optimum_in_most_trials() {
        let mut hits = 0;
        for trial in 0..100 {
            let p = pts(8, 2, 1000 + trial);
            let km = kmeans(&p, 2, &cfg(), &mut rng(trial)).unwrap();
            if km.sse() <= exhaustive_k2(&p) * (1.0 + 1e-9) + 1e-12 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "{hits}/100");
    }

    fn distinct_bank(seed: u64) -> MemoryBank {
        MemoryBank::new(pts(12, 3, seed).reshape(&[3, 4, 3]).unwrap(), 0).unwrap()
    }

    fn hausdorff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let one_way = |x: &Tensor<f32>, y: &Tensor<f32>| {
            let (n, _) = x.as_rows();
            let (m, _) = y.as_rows();
            (0..n)
                .map(|i| {
                    (0..m)
                        .map(|j| crate::numerics::euclidean(x.row(i), y.row(j)) as f64)
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        one_way(a, b).max(one_way(b, a))
    }

    #[test]
    fn single_and_duplicated_banks_reproduce_patch_set() {
        let b = distinct_bank(3);
        let (g1, _) = aggregate(std::slice::from_ref(&b), &cfg(), 1, &mut rng(4)).unwrap();
        assert_eq!(hausdorff(&g1.patches, &b.patches), 0.0);
        let (g3, _) = aggregate(&[b.clone(), b.clone(), b.clone()], &cfg(), 1, &mut rng(5)).unwrap();
        assert_eq!(g3.dims(), (3, 4, 3));
        assert_eq!(hausdorff(&g3.patches, &b.patches), 0.0);
    }

    #[test]
    fn separated_blobs_give_blob_means() {
        // HW=4 blob centres far apart; two clients each sample every blob.
        let centres = [[0.0f32, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0]];
        let mut r = rng(6);
        let make = |r: &mut ChaCha8Rng| {
            let mut v = Vec::new();
            for c in &centres {
                v.push(c[0] + r.random_range(-0.5..0.5));
                v.push(c[1] + r.random_range(-0.5..0.5));
            }
            MemoryBank::new(Tensor::new(&[2, 2, 2], v).unwrap(), 0).unwrap()
        };
        let banks = [make(&mut r), make(&mut r)];
        let (g, _) = aggregate(&banks, &cfg(), 1, &mut rng(7)).unwrap();
        for (b, c) in centres.iter().enumerate() {
            let want: Vec<f64> = (0..2)
                .map(|ch| {
                    (banks[0].patches.row(b)[ch] as f64 + banks[1].patches.row(b)[ch] as f64) / 2.0
                })
                .collect();
            let (n, _) = g.patches.as_rows();
            let got = (0..n)
                .map(|j| g.patches.row(j))
                .find(|row| (row[0] - c[0]).abs() < 5.0 && (row[1] - c[1]).abs() < 5.0)
                .expect("one center per blob");
            for ch in 0..2 {
                assert!((got[ch] as f64 - want[ch]).abs() < 1e-5 * want[ch].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let a = distinct_bank(8);
        let b = MemoryBank::new(pts(12, 3, 9).reshape(&[4, 3, 3]).unwrap(), 0).unwrap();
        assert!(matches!(aggregate(&[a, b], &cfg(), 1, &mut rng(0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn plain_average_is_elementwise_mean() {
        let a = distinct_bank(10);
        let b = distinct_bank(11);
        let g = plain_average(&[a.clone(), b.clone()], 2).unwrap();
        for i in 0..a.patches.len() {
            let want = (a.patches.data()[i] as f64 + b.patches.data()[i] as f64) / 2.0;
            assert_eq!(g.patches.data()[i], want as f32);
        }
    }

    #[test]
    fn ledger_arithmetic() {
        let mut l = CommLedger::default();
        assert_eq!(l.totals(), (0, 0));
        let bank_bytes = encoded_len(&[14, 14, 16]) as u64;
        assert_eq!(bank_bytes, 14 * 14 * 16 * 4 + 17);
        for n in 0..5 {
            l.record_exchange(1, n, Direction::Up, bank_bytes);
            l.record_exchange(1, n, Direction::Down, bank_bytes);
        }
        assert_eq!(l.round_totals(1), (5 * bank_bytes, 5 * bank_bytes));
        assert_eq!(l.message_count(1), 10);
        assert_eq!(l.to_csv().lines().count(), 11);
        assert!(l.to_csv().starts_with("round,client,dir,bytes\n1,0,up,"));
    }

    proptest! {
        #[test]
        fn sse_nonincreasing_and_centers_in_hull(seed in any::<u64>(), n in 4usize..40, k in 1usize..6) {
            let k = k.min(n);
            let p = pts(n, 3, seed);
            let km = kmeans(&p, k, &cfg(), &mut rng(seed ^ 1)).unwrap();
            for w in km.sse_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            for ch in 0..3 {
                let col: Vec<f32> = (0..n).map(|i| p.row(i)[ch]).collect();
                let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for j in 0..k {
                    let v = km.centers.row(j)[ch];
                    prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }

        #[test]
        fn aggregation_shape_and_determinism(seed in any::<u64>(), n_clients in 1usize..5) {
            let banks: Vec<_> = (0..n_clients).map(|i| distinct_bank(seed ^ i as u64)).collect();
            let (a, _) = aggregate(&banks, &cfg(), 3, &mut rng(seed)).unwrap();
            let (b, _) = aggregate(&banks, &cfg(), 3, &mut rng(seed)).unwrap();
            prop_assert_eq!(a.dims(), (3, 4, 3));
            prop_assert_eq!(a, b);
        }
    }
}
