use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};

/// Normalized 1-D Gaussian taps over `[-⌈4σ⌉, ⌈4σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) of an index.
fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m < n as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur of an `H×W` map with reflected borders.
pub fn gaussian_blur(map: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (h, w) = map.rows_cols()?;
    if !(sigma >= 0.0) {
        return Err(Error::contract("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * src[y * w + reflect(x as i64 + t as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(y as i64 + t as i64 - r, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    Tensor::new(&[h, w], out)
}

/// `(x − min)/(max − min)`; a constant map becomes all zeros.
pub fn min_max(map: &Tensor<f32>) -> Tensor<f32> {
    let lo = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return Tensor::zeros_like(map);
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Upsampled and blurred map plus its min-max normalized version.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub blurred: Tensor<f32>,
    pub normalized: Tensor<f32>,
}

/// Bilinear upsampling to the image size, Gaussian blur, min-max scaling.
pub fn postprocess_heatmap(a: &Tensor<f32>, image: (usize, usize), sigma: f64) -> Result<Heatmap> {
    let (h, w) = a.rows_cols()?;
    if image.0 < h || image.1 < w {
        return Err(Error::contract(format!(
            "target {image:?} is smaller than the {h}×{w} map"
        )));
    }
    let up = bilinear_resize(&a.clone().reshape(&[h, w, 1])?, image)?.reshape(&[image.0, image.1])?;
    let blurred = gaussian_blur(&up, sigma)?;
    let normalized = min_max(&blurred);
    Ok(Heatmap { blurred, normalized })
}
