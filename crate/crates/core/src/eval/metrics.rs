use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Area under the ROC curve, `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, computed exactly
/// from integer counts over tie groups.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U statistic.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// 4-connected foreground components of a binary `H×W` mask, as pixel index lists.
pub fn connected_components(mask: &Tensor<f32>) -> Result<Vec<Vec<usize>>> {
    let (h, w) = mask.rows_cols()?;
    let fg: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut region = Vec::new();
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    Ok(regions)
}

/// Per-region overlap averaged over FPR ∈ [0, budget].
///
/// Thresholds sweep every distinct score (a pixel is flagged when its score is
/// at least the threshold), starting from the flag-nothing point `(0, 0)`.
/// The curve is integrated with trapezoids over points whose FPR is within
/// the budget, the last such value is held up to the budget, and the area is
/// divided by the budget.
pub fn pro(heatmaps: &[Tensor<f32>], masks: &[Tensor<f32>], budget: f64) -> Result<f64> {
    if heatmaps.len() != masks.len() {
        return Err(Error::contract("heatmap and mask counts differ"));
    }
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::contract("FPR budget must lie in (0, 1]"));
    }
    // (score, region id or None for a normal pixel)
    let mut pixels: Vec<(f32, Option<usize>)> = Vec::new();
    let mut region_sizes = Vec::new();
    for (hm, mask) in heatmaps.iter().zip(masks) {
        hm.same_dims(mask)?;
        let mut owner: Vec<Option<usize>> = vec![None; hm.len()];
        for region in connected_components(mask)? {
            for &p in &region {
                owner[p] = Some(region_sizes.len());
            }
            region_sizes.push(region.len());
        }
        for (p, &s) in hm.data().iter().enumerate() {
            if s.is_nan() {
                return Err(Error::numeric("heatmap contains NaN"));
            }
            pixels.push((s, owner[p]));
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::contract("no anomalous regions in the masks"));
    }
    let normals = pixels.iter().filter(|p| p.1.is_none()).count();
    if normals == 0 {
        return Err(Error::contract("no normal pixels to measure false positives"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_regions = region_sizes.len() as f64;
    let mut hits = vec![0usize; region_sizes.len()];
    let mut overlap_sum = 0.0;
    let mut false_pos = 0usize;
    let (mut last_fpr, mut last_pro) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            match pixels[i].1 {
                None => false_pos += 1,
                Some(r) => {
                    hits[r] += 1;
                    overlap_sum += 1.0 / region_sizes[r] as f64;
                }
            }
            i += 1;
        }
        let fpr = false_pos as f64 / normals as f64;
        let pro = overlap_sum / n_regions;
        if fpr > budget {
            break;
        }
        area += (fpr - last_fpr) * (pro + last_pro) / 2.0;
        last_fpr = fpr;
        last_pro = pro;
    }
    area += (budget - last_fpr) * last_pro;
    Ok((area / budget).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedStream;
    use rand::Rng;

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.7], &[1, 0]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.1], &[1, 0, 0]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auroc_matches_pair_counting_exactly() {
        let mut rng = SeedStream::new(11).rng(0);
        for _ in 0..1000 {
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 * 0.25).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auroc(&scores, &labels).unwrap(), brute_auroc(&scores, &labels));
        }
    }

    #[test]
    fn auroc_invariant_to_increasing_transform() {
        let mut rng = SeedStream::new(12).rng(0);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..50).map(|i| (i % 3 == 0) as u8).collect();
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&t, &labels).unwrap());
    }

    fn grid(h: usize, w: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::new(&[h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn components_are_four_connected() {
        let m = grid(3, 3, &[1., 0., 1., 0., 1., 0., 1., 1., 0.]);
        let cc = connected_components(&m).unwrap();
        assert_eq!(cc, vec![vec![0], vec![2], vec![4, 6, 7]]);
    }

    #[test]
    fn pro_degenerate_heatmaps() {
        let mask = grid(2, 3, &[1., 1., 0., 0., 0., 0.]);
        assert_eq!(pro(&[mask.clone()], &[mask.clone()], 0.3).unwrap(), 1.0);
        assert_eq!(pro(&[Tensor::zeros(&[2, 3])], &[mask.clone()], 0.3).unwrap(), 0.0);
        assert!(pro(&[mask.clone()], &[Tensor::zeros(&[2, 3])], 0.3).is_err());
    }

    #[test]
    fn pro_two_region_hand_value() {
        // Regions {0} and {4,5}; normals {1,2,3} with scores 0.5, 0.1, 0.1.
        // Sweep: v=0.9 → fpr 0, pro ½(1+0)=0.5; v=0.7 → fpr 0, pro ½(1+½)=0.75;
        // v=0.5 → fpr ⅓ > 0.3 stops. Area = 0.75·0.3 → normalized 0.75.
        let hm = grid(2, 3, &[0.9, 0.5, 0.1, 0.1, 0.7, 0.2]);
        let mask = grid(2, 3, &[1., 0., 0., 0., 1., 1.]);
        let v = pro(&[hm], &[mask], 0.3).unwrap();
        assert!((v - 0.75).abs() < 1e-12, "{v}");
    }

    /// Independent labeling by union-find and per-threshold recount.
    fn brute_pro(hms: &[Tensor<f32>], masks: &[Tensor<f32>], budget: f64) -> f64 {
        let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
        for (img, m) in masks.iter().enumerate() {
            let (h, w) = m.rows_cols().unwrap();
            let mut parent: Vec<usize> = (0..h * w).collect();
            fn find(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            let on = |i: usize| m.data()[i] > 0.5;
            for i in 0..h * w {
                if !on(i) {
                    continue;
                }
                if i % w + 1 < w && on(i + 1) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
                    parent[a] = b;
                }
                if i + w < h * w && on(i + w) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + w));
                    parent[a] = b;
                }
            }
            let mut roots: Vec<usize> = (0..h * w).filter(|&i| on(i)).map(|i| find(&mut parent, i)).collect();
            roots.sort_unstable();
            roots.dedup();
            for r in roots {
                let px = (0..h * w).filter(|&i| on(i) && find(&mut parent, i) == r).collect();
                regions.push((img, px));
            }
        }
        let mut thresholds: Vec<f32> = hms.iter().flat_map(|h| h.data().iter().cloned()).collect();
        thresholds.push(f32::INFINITY);
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut curve = Vec::new();
        for &v in &thresholds {
            let (mut fp, mut nn) = (0, 0);
            for (h, m) in hms.iter().zip(masks) {
                for (s, mv) in h.data().iter().zip(m.data()) {
                    if *mv <= 0.5 {
                        nn += 1;
                        if *s >= v {
                            fp += 1;
                        }
                    }
                }
            }
            let overlap: f64 = regions
                .iter()
                .map(|(img, px)| px.iter().filter(|&&p| hms[*img].data()[p] >= v).count() as f64 / px.len() as f64)
                .sum::<f64>()
                / regions.len() as f64;
            curve.push((fp as f64 / nn as f64, overlap));
        }
        let mut area = 0.0;
        let mut last = (0.0, 0.0);
        for &(f, p) in &curve {
            if f > budget {
                break;
            }
            area += (f - last.0) * (p + last.1) / 2.0;
            last = (f, p);
        }
        area += (budget - last.0) * last.1;
        area / budget
    }

    #[test]
    fn pro_matches_exhaustive_sweep_on_toy_cases() {
        let mut rng = SeedStream::new(13).rng(0);
        for _ in 0..200 {
            let (h, w) = (4, 5);
            let mut masks = Vec::new();
            let mut hms = Vec::new();
            for _ in 0..2 {
                // Two disjoint rectangles per mask.
                let mut m = Tensor::zeros(&[h, w]);
                for (r0, c0) in [(0usize, rng.random_range(0..2usize)), (rng.random_range(2..4usize), 3)] {
                    m.data_mut()[r0 * w + c0] = 1.0;
                    m.data_mut()[r0 * w + c0 + 1] = 1.0;
                }
                hms.push(Tensor::from_fn(&[h, w], |_| rng.random_range(0..8) as f32 / 8.0));
                masks.push(m);
            }
            let budget = rng.random_range(0.05..1.0);
            let a = pro(&hms, &masks, budget).unwrap();
            let b = brute_pro(&hms, &masks, budget);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
