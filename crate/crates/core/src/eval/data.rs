use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, rng::tags, SeedStream, Tensor};

/// One image with its label and optional pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub product_type: usize,
    /// `H×W×3` image.
    pub image: Tensor<f32>,
    pub label: u8,
    /// `H×W` binary mask, present only for anomalies.
    pub mask: Option<Tensor<f32>>,
}

/// Splits each type's sample indices across `n` clients with proportions
/// drawn from `Dirichlet(α·1)`, rounded by largest remainder. Sample
/// indices are global, numbering type 0 first.
pub fn dirichlet_partition(type_counts: &[usize], n: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::contract("need at least one client"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| Error::contract(format!("invalid Dirichlet α={alpha}")))?;
    let mut clients = vec![Vec::new(); n];
    let mut offset = 0;
    for &count in type_counts {
        let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // Every draw underflowed; the limit is a point mass on one client.
            let pick = rng.random_range(0..n);
            p = (0..n).map(|i| (i == pick) as u8 as f64).collect();
        } else {
            p.iter_mut().for_each(|v| *v /= total);
        }
        let quotas: Vec<f64> = p.iter().map(|v| v * count as f64).collect();
        let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = count - shares.iter().sum::<usize>();
        let mut by_rem: Vec<usize> = (0..n).collect();
        by_rem.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor())
                .total_cmp(&(quotas[a] - quotas[a].floor()))
                .then(a.cmp(&b))
        });
        for &i in by_rem.iter().cycle() {
            if left == 0 {
                break;
            }
            shares[i] += 1;
            left -= 1;
        }
        let mut idx: Vec<usize> = (offset..offset + count).collect();
        idx.shuffle(rng);
        let mut start = 0;
        for (client, &s) in shares.iter().enumerate() {
            clients[client].extend_from_slice(&idx[start..start + s]);
            start += s;
        }
        offset += count;
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

/// Synthetic multi-type image benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub types: usize,
    /// Normal training images per type (partitioned over clients).
    pub train_per_type: usize,
    pub test_normal_per_type: usize,
    pub test_anomalous_per_type: usize,
    pub image: [usize; 2],
    pub channels: usize,
    /// Per-channel offset scale inside the anomalous patch.
    pub anomaly_magnitude: f64,
    /// Side lengths of the anomalous patch.
    pub anomaly_extent: [usize; 2],
    /// Amplitude of the smooth per-sample noise.
    pub noise: f64,
    pub alpha: f64,
    pub clients: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            types: 3,
            train_per_type: 24,
            test_normal_per_type: 10,
            test_anomalous_per_type: 10,
            image: [16, 16],
            channels: 3,
            anomaly_magnitude: 0.5,
            anomaly_extent: [4, 4],
            noise: 0.1,
            alpha: 0.1,
            clients: 5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.types == 0 {
            return Err(Error::config_key("types", "need at least one product type"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config_key("alpha", "Dirichlet α must be > 0"));
        }
        if self.clients == 0 {
            return Err(Error::config_key("clients", "need at least one client"));
        }
        if self.types * self.train_per_type < self.clients {
            return Err(Error::config_key("train_per_type", "fewer training samples than clients"));
        }
        if self.image.iter().any(|&d| d == 0) || self.channels == 0 {
            return Err(Error::config_key("image", "image dims must be positive"));
        }
        if self.anomaly_extent[0] > self.image[0] || self.anomaly_extent[1] > self.image[1] || self.anomaly_extent.contains(&0) {
            return Err(Error::config_key("anomaly_extent", "patch must fit inside the image"));
        }
        if !(self.anomaly_magnitude >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::config_key("anomaly_magnitude", "magnitudes must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    /// Normal training samples per client.
    pub clients: Vec<Vec<LabeledSample>>,
    pub test: Vec<LabeledSample>,
}

struct Prototype {
    /// Per channel: (amplitude, fx, fy, phase) waves plus an offset.
    waves: Vec<Vec<(f64, f64, f64, f64)>>,
    offsets: Vec<f64>,
}

impl Prototype {
    fn draw(channels: usize, rng: &mut impl Rng) -> Self {
        let waves = (0..channels)
            .map(|_| {
                (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.3..1.0),
                            rng.random_range(0.3..2.0),
                            rng.random_range(0.3..2.0),
                            rng.random_range(0.0..2.0 * PI),
                        )
                    })
                    .collect()
            })
            .collect();
        let offsets = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self { waves, offsets }
    }

    fn render(&self, h: usize, w: usize) -> Tensor<f32> {
        let c = self.offsets.len();
        Tensor::from_fn(&[h, w, c], |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let s: f64 = self.waves[ch]
                .iter()
                .map(|&(a, fx, fy, ph)| a * (2.0 * PI * (fx * u + fy * v) + ph).sin())
                .sum();
            (self.offsets[ch] + s / 3.0) as f32
        })
    }
}

fn smooth_noise(h: usize, w: usize, c: usize, amp: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let coarse = Tensor::from_fn(&[4, 4, c], |_| rng.random_range(-1.0f32..1.0));
    let mut up = bilinear_resize(&coarse, (h, w))?;
    up.scale(amp as f32);
    Ok(up)
}

fn anomalize(img: &mut Tensor<f32>, spec: &SynthSpec, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let (h, w, c) = img.hwc()?;
    let [ph, pw] = spec.anomaly_extent;
    let y0 = rng.random_range(0..=h - ph);
    let x0 = rng.random_range(0..=w - pw);
    let delta: Vec<f32> = (0..c)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (sign * rng.random_range(0.5..1.0) * spec.anomaly_magnitude) as f32
        })
        .collect();
    let mut mask = Tensor::zeros(&[h, w]);
    for y in y0..y0 + ph {
        for x in x0..x0 + pw {
            mask.data_mut()[y * w + x] = 1.0;
            for (ch, d) in delta.iter().enumerate() {
                img.data_mut()[(y * w + x) * c + ch] += d;
            }
        }
    }
    Ok(mask)
}

/// Prototype-plus-noise images per type, Dirichlet-split training normals,
/// and a shared test set with square anomalies. The partition is redrawn
/// until every client holds at least one sample.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed).fork(tags::DATA);
    let [h, w] = spec.image;
    let protos: Vec<Prototype> = (0..spec.types)
        .map(|t| Prototype::draw(spec.channels, &mut root.path(&[0, t as u64]).rng(0)))
        .collect();
    let normal = |t: usize, stream: u64, k: usize| -> Result<Tensor<f32>> {
        let mut rng = root.path(&[stream, t as u64, k as u64]).rng(0);
        let mut img = protos[t].render(h, w);
        img.add_assign(&smooth_noise(h, w, spec.channels, spec.noise, &mut rng)?)?;
        Ok(img)
    };

    let mut train = Vec::new();
    for t in 0..spec.types {
        for k in 0..spec.train_per_type {
            train.push(LabeledSample {
                id: format!("train_t{t}_{k:04}"),
                product_type: t,
                image: normal(t, 1, k)?,
                label: 0,
                mask: None,
            });
        }
    }
    let counts = vec![spec.train_per_type; spec.types];
    let mut parts = None;
    for attempt in 0..1000u64 {
        let p = dirichlet_partition(&counts, spec.clients, spec.alpha, &mut root.path(&[3, attempt]).rng(0))?;
        if p.iter().all(|c| !c.is_empty()) {
            parts = Some(p);
            break;
        }
    }
    let parts = parts.ok_or_else(|| Error::contract("could not give every client a sample"))?;
    let clients = parts
        .iter()
        .map(|idx| idx.iter().map(|&i| train[i].clone()).collect())
        .collect();

    let mut test = Vec::new();
    for t in 0..spec.types {
        for k in 0..spec.test_normal_per_type {
            test.push(LabeledSample {
                id: format!("test_t{t}_good_{k:04}"),
                product_type: t,
                image: normal(t, 2, k)?,
                label: 0,
                mask: None,
            });
        }
        for k in 0..spec.test_anomalous_per_type {
            let mut img = normal(t, 4, k)?;
            let mask = anomalize(&mut img, spec, &mut root.path(&[5, t as u64, k as u64]).rng(0))?;
            test.push(LabeledSample {
                id: format!("test_t{t}_bad_{k:04}"),
                product_type: t,
                image: img,
                label: 1,
                mask: Some(mask),
            });
        }
    }
    Ok(SynthData { clients, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fingerprint;

    #[test]
    fn single_client_takes_everything() {
        let p = dirichlet_partition(&[3, 4], 1, 0.1, &mut SeedStream::new(1).rng(0)).unwrap();
        assert_eq!(p, vec![(0..7).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_covers_each_type_exactly_once() {
        for seed in 0..50 {
            let counts = [7, 0, 13, 5];
            let p = dirichlet_partition(&counts, 4, 0.3, &mut SeedStream::new(seed).rng(0)).unwrap();
            let mut all: Vec<usize> = p.concat();
            all.sort_unstable();
            assert_eq!(all, (0..25).collect::<Vec<_>>());
            let mut offset = 0;
            for &c in &counts {
                let per_type: usize = p.iter().map(|cl| cl.iter().filter(|&&i| i >= offset && i < offset + c).count()).sum();
                assert_eq!(per_type, c);
                offset += c;
            }
        }
    }

    #[test]
    fn partition_frozen_seed() {
        let p = dirichlet_partition(&[6, 6], 3, 0.1, &mut SeedStream::new(2024).rng(0)).unwrap();
        assert_eq!(p, FROZEN_PARTITION.iter().map(|c| c.to_vec()).collect::<Vec<_>>());
    }

    const FROZEN_PARTITION: [&[usize]; 3] = [&[6, 7, 8, 9, 10, 11], &[0, 1, 2, 3, 4, 5], &[]];

    #[test]
    fn small_alpha_is_skewed() {
        // Mean over seeds of the largest single-client share of each type.
        let mut total = 0.0;
        let trials = 200;
        for seed in 0..trials {
            let counts = vec![100; 10];
            let p = dirichlet_partition(&counts, 5, 0.1, &mut SeedStream::new(seed).rng(0)).unwrap();
            let mut share = 0.0;
            for t in 0..10 {
                let max = p.iter().map(|c| c.iter().filter(|&&i| i / 100 == t).count()).max().unwrap();
                share += max as f64 / 100.0;
            }
            total += share / 10.0;
        }
        let mean = total / trials as f64;
        assert!(mean > 0.6 && mean < 1.0, "{mean}");
    }

    #[test]
    fn synth_labels_masks_and_train_normals() {
        let spec = SynthSpec::default();
        let d = synth_dataset(&spec).unwrap();
        assert_eq!(d.clients.len(), 5);
        assert!(d.clients.iter().all(|c| !c.is_empty()));
        assert_eq!(d.clients.iter().map(Vec::len).sum::<usize>(), 72);
        assert!(d.clients.iter().flatten().all(|s| s.label == 0 && s.mask.is_none()));
        for s in &d.test {
            match &s.mask {
                Some(m) => {
                    assert_eq!(s.label, 1);
                    assert!(m.data().iter().any(|&v| v == 1.0));
                }
                None => assert_eq!(s.label, 0),
            }
        }
        assert_eq!(d, synth_dataset(&spec).unwrap());
    }

    #[test]
    fn zero_magnitude_anomalies_are_normals() {
        let spec = SynthSpec {
            anomaly_magnitude: 0.0,
            ..SynthSpec::default()
        };
        let d = synth_dataset(&spec).unwrap();
        // Same generator as test normals, only the noise draw differs.
        let bad = d.test.iter().find(|s| s.label == 1).unwrap();
        let proto_dist = |s: &LabeledSample| {
            let good = d.test.iter().find(|g| g.label == 0 && g.product_type == s.product_type).unwrap();
            s.image.data().iter().zip(good.image.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
        };
        assert!(proto_dist(bad) <= 4.0 * spec.noise as f32);
    }

    #[test]
    fn synth_frozen_seed() {
        let d = synth_dataset(&SynthSpec::default()).unwrap();
        assert_eq!(fingerprint(&d.test[0].image), FROZEN_TEST0);
        let sizes: Vec<usize> = d.clients.iter().map(Vec::len).collect();
        assert_eq!(sizes, FROZEN_SIZES);
    }

    const FROZEN_TEST0: &str = "c0db650b5b3d3fa46022e087bb96036497dfe544a061a65864475101956bb25c";
    const FROZEN_SIZES: [usize; 5] = [26, 14, 14, 10, 8];
}
