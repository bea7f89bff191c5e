//! Frozen feature pyramid, multi-level fusion, and the trainable projection.
//!
//! The pretrained CNN backbone is replaced by a deterministic synthetic
//! extractor (fixed random 1×1 mixing, 2×2 mean pooling, tanh per level) or
//! by precomputed pyramids loaded from disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{self, Container};
use crate::numerics::rng::tags;
use crate::numerics::{
    bilinear_resize, conv1x1_backward, conv1x1_forward, relu_backward, xavier_uniform, Real,
    SeedStream, Tensor,
};

/// Where a pyramid came from.
#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File(PathBuf),
}

/// Per-level feature maps `H_l×W_l×C_l`, level 0 the finest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<f32>>,
    pub provenance: Provenance,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor<f32>>, provenance: Provenance) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::dim("feature pyramid needs at least one level"));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (l, t) in levels.iter().enumerate() {
            let (h, w, c) = t.hwc()?;
            if c == 0 || h == 0 || w == 0 {
                return Err(Error::dim(format!("level {l} has a zero extent")));
            }
            if let Some((ph, pw)) = prev {
                if h > ph || w > pw {
                    return Err(Error::dim(format!("level {l} is larger than level {}", l - 1)));
                }
            }
            prev = Some((h, w));
        }
        Ok(Self { levels, provenance })
    }

    pub fn base_dims(&self) -> (usize, usize) {
        let d = self.levels[0].dims();
        (d[0], d[1])
    }

    pub fn total_channels(&self) -> usize {
        self.levels.iter().map(|t| t.dims()[2]).sum()
    }

    /// Container with sections `level0`, `level1`, ...
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (l, t) in self.levels.iter().enumerate() {
            c.push(format!("level{l}"), t.clone());
        }
        c
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let levels = c.sections().iter().map(|(_, t)| t.clone()).collect();
        Self::new(levels, Provenance::File(path.to_path_buf()))
    }
}

fn default_image_channels() -> usize {
    3
}

/// How pyramids are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Synthetic {
        seed: u64,
        levels: usize,
        /// `(H₀, W₀)` of the input image and of level 0.
        base: [usize; 2],
        channels: Vec<usize>,
        #[serde(default = "default_image_channels")]
        image_channels: usize,
    },
    /// Precomputed pyramids: manifest paths are resolved against `dir`.
    File { dir: PathBuf },
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ExtractorSpec::Synthetic {
                levels,
                base,
                channels,
                image_channels,
                ..
            } => {
                if *levels == 0 || channels.len() != *levels {
                    return Err(Error::config_key(
                        "channels",
                        format!("need one channel count per level ({levels} levels)"),
                    ));
                }
                if channels.iter().any(|&c| c == 0) || *image_channels == 0 {
                    return Err(Error::config_key("channels", "channel counts must be >= 1"));
                }
                if base[0] == 0 || base[1] == 0 {
                    return Err(Error::config_key("base", "base dims must be >= 1"));
                }
                Ok(())
            }
            ExtractorSpec::File { .. } => Ok(()),
        }
    }

    /// Level-0 spatial dims for synthetic extractors.
    pub fn base_dims(&self) -> Option<(usize, usize)> {
        match self {
            ExtractorSpec::Synthetic { base, .. } => Some((base[0], base[1])),
            ExtractorSpec::File { .. } => None,
        }
    }

    pub fn fused_channels(&self) -> Option<usize> {
        match self {
            ExtractorSpec::Synthetic { channels, .. } => Some(channels.iter().sum()),
            ExtractorSpec::File { .. } => None,
        }
    }
}

/// Input handed to an extractor.
#[derive(Clone, Debug)]
pub enum SampleInput {
    Image(Tensor<f32>),
    Path(PathBuf),
}

/// The frozen synthetic backbone. Its weights are drawn once at construction.
#[derive(Clone, Debug)]
pub struct SyntheticExtractor {
    seed: u64,
    base: (usize, usize),
    image_channels: usize,
    mixes: Vec<(Tensor<f32>, Tensor<f32>)>,
}

/// 2×2 mean pooling; odd trailing rows/columns pool over the pixels present.
fn mean_pool2(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = x.hwc()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            let mut n = 0.0f32;
            let o = &mut out[(i * wo + j) * c..][..c];
            for y in 2 * i..(2 * i + 2).min(h) {
                for xx in 2 * j..(2 * j + 2).min(w) {
                    n += 1.0;
                    for (ch, v) in o.iter_mut().enumerate() {
                        *v += x.at3(y, xx, ch);
                    }
                }
            }
            for v in o.iter_mut() {
                *v /= n;
            }
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

impl SyntheticExtractor {
    pub fn new(seed: u64, base: (usize, usize), image_channels: usize, channels: &[usize]) -> Self {
        let root = SeedStream::new(seed).fork(tags::EXTRACTOR);
        let mut rng = root.rng(0);
        let mut cin = image_channels;
        let mut mixes = Vec::with_capacity(channels.len());
        for &cout in channels {
            // Unit-variance mixing keeps tanh in its curved but unsaturated range.
            let mut w = xavier_uniform::<f32>(cin, cout, &mut rng);
            let gain = ((cin + cout) as f32 / (2.0 * cin as f32)).sqrt() * 1.5;
            w.scale(gain);
            let b = Tensor::from_fn(&[cout], |_| rng.random_range(-0.1f32..0.1));
            mixes.push((w, b));
            cin = cout;
        }
        Self {
            seed,
            base,
            image_channels,
            mixes,
        }
    }

    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        spec.validate()?;
        match spec {
            ExtractorSpec::Synthetic {
                seed,
                base,
                channels,
                image_channels,
                ..
            } => Ok(Self::new(*seed, (base[0], base[1]), *image_channels, channels)),
            ExtractorSpec::File { .. } => Err(Error::contract("not a synthetic spec")),
        }
    }

    /// Number of frozen scalars (for communication comparisons).
    pub fn parameter_count(&self) -> usize {
        self.mixes.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn parameters(&self) -> Vec<&Tensor<f32>> {
        self.mixes.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn extract(&self, image: &Tensor<f32>) -> Result<FeaturePyramid> {
        let (h, w, c) = image.hwc()?;
        if (h, w) != self.base || c != self.image_channels {
            return Err(Error::dim(format!(
                "sample is {h}×{w}×{c}, extractor expects {}×{}×{}",
                self.base.0, self.base.1, self.image_channels
            )));
        }
        let mut levels = Vec::with_capacity(self.mixes.len());
        let mut cur = image.clone();
        for (l, (wt, b)) in self.mixes.iter().enumerate() {
            if l > 0 {
                cur = mean_pool2(&cur)?;
            }
            cur = conv1x1_forward(&cur, wt, b)?.map(f32::tanh);
            levels.push(cur.clone());
        }
        FeaturePyramid::new(levels, Provenance::Synthetic { seed: self.seed })
    }
}

/// Either backend behind one interface.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    Synthetic(SyntheticExtractor),
    File { dir: PathBuf },
}

impl FeatureExtractor {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        match spec {
            ExtractorSpec::File { dir } => Ok(FeatureExtractor::File { dir: dir.clone() }),
            _ => Ok(FeatureExtractor::Synthetic(SyntheticExtractor::from_spec(spec)?)),
        }
    }

    pub fn extract(&self, input: &SampleInput) -> Result<FeaturePyramid> {
        match (self, input) {
            (FeatureExtractor::Synthetic(ex), SampleInput::Image(img)) => ex.extract(img),
            (FeatureExtractor::Synthetic(ex), SampleInput::Path(p)) => {
                ex.extract(&io::read_tensor(p)?)
            }
            (FeatureExtractor::File { dir }, SampleInput::Path(p)) => {
                FeaturePyramid::read(&dir.join(p))
            }
            (FeatureExtractor::File { .. }, SampleInput::Image(_)) => Err(Error::contract(
                "file extractor needs a pyramid path, got an in-memory image",
            )),
        }
    }
}

/// `f_concat(f_up(F^l, (H₀,W₀)))` over all levels, in level order.
pub fn fuse_pyramid(p: &FeaturePyramid) -> Result<Tensor<f32>> {
    let first = p
        .levels
        .first()
        .ok_or_else(|| Error::dim("cannot fuse an empty pyramid"))?;
    let (h0, w0, _) = first.hwc()?;
    let mut fused = first.clone();
    for level in &p.levels[1..] {
        let up = bilinear_resize(level, (h0, w0))?;
        fused = Tensor::concat_channels(&fused, &up)?;
    }
    Ok(fused)
}

/// Activation after the projection conv.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Trainable `Cin → C` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ProjectionParams<T> {
    pub fn init(cin: usize, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: xavier_uniform(cin, c, rng),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Forward values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectionCache<T> {
    pub fused: Tensor<T>,
    pub pre: Tensor<T>,
}

pub fn project<T: Real>(
    fused: &Tensor<T>,
    params: &ProjectionParams<T>,
    act: Activation,
) -> Result<(Tensor<T>, ProjectionCache<T>)> {
    let (_, _, cin) = fused.hwc()?;
    if cin != params.input_channels() {
        return Err(Error::dim(format!(
            "fused map has {cin} channels, projection expects {}",
            params.input_channels()
        )));
    }
    let pre = conv1x1_forward(fused, &params.weight, &params.bias)?;
    let out = match act {
        Activation::Relu => pre.map(|v| v.max(T::zero())),
        Activation::Identity => pre.clone(),
    };
    Ok((
        out,
        ProjectionCache {
            fused: fused.clone(),
            pre,
        },
    ))
}

/// Gradients of the projection parameters given `dL/dP`.
pub fn project_backward<T: Real>(
    cache: &ProjectionCache<T>,
    params: &ProjectionParams<T>,
    act: Activation,
    grad_out: &Tensor<T>,
) -> Result<ProjectionParams<T>> {
    let g = match act {
        Activation::Relu => relu_backward(&cache.pre, grad_out)?,
        Activation::Identity => grad_out.clone(),
    };
    let grads = conv1x1_backward(&cache.fused, &params.weight, &g)?;
    Ok(ProjectionParams {
        weight: grads.grad_weight,
        bias: grads.grad_bias,
    })
}

/// One row of a feature manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fingerprint;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = SeedStream::new(seed).rng(0);
        Tensor::from_fn(&[h, w, 3], |_| rng.random_range(-1.0..1.0))
    }

    fn spec() -> ExtractorSpec {
        ExtractorSpec::Synthetic {
            seed: 3,
            levels: 3,
            base: [32, 32],
            channels: vec![4, 6, 8],
            image_channels: 3,
        }
    }

    #[test]
    fn synthetic_levels_halve() {
        let ex = SyntheticExtractor::from_spec(&spec()).unwrap();
        let p = ex.extract(&image(1, 32, 32)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![32, 32, 4], vec![16, 16, 6], vec![8, 8, 8]]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = image(2, 32, 32);
        let a = SyntheticExtractor::from_spec(&spec()).unwrap().extract(&img).unwrap();
        let b = SyntheticExtractor::from_spec(&spec()).unwrap().extract(&img).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(fingerprint(x), fingerprint(y));
        }
    }

    #[test]
    fn rejects_wrong_sample_dims() {
        let ex = SyntheticExtractor::from_spec(&spec()).unwrap();
        assert!(matches!(ex.extract(&image(1, 16, 32)), Err(Error::Dimension(_))));
    }

    #[test]
    fn pyramid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = SyntheticExtractor::from_spec(&spec()).unwrap();
        let p = ex.extract(&image(4, 32, 32)).unwrap();
        let path = dir.path().join("p.fdm");
        p.write(&path).unwrap();
        let fx = FeatureExtractor::File {
            dir: dir.path().to_path_buf(),
        };
        let back = fx.extract(&SampleInput::Path("p.fdm".into())).unwrap();
        assert_eq!(back.levels, p.levels);
        assert!(fx.extract(&SampleInput::Path("missing.fdm".into())).is_err());
    }

    #[test]
    fn fuse_single_level_is_identity() {
        let t = image(5, 4, 4);
        let p = FeaturePyramid::new(vec![t.clone()], Provenance::Synthetic { seed: 0 }).unwrap();
        assert_eq!(fuse_pyramid(&p).unwrap(), t);
    }

    #[test]
    fn fuse_constant_levels_stay_constant() {
        let a = Tensor::full(&[4, 4, 2], 0.5f32);
        let b = Tensor::full(&[2, 2, 1], -1.25f32);
        let p = FeaturePyramid::new(vec![a, b], Provenance::Synthetic { seed: 0 }).unwrap();
        let f = fuse_pyramid(&p).unwrap();
        assert_eq!(f.dims(), &[4, 4, 3]);
        for px in 0..16 {
            assert_eq!(f.row(px), &[0.5, 0.5, -1.25]);
        }
    }

    #[test]
    fn fuse_matches_independent_resizes() {
        let ex = SyntheticExtractor::from_spec(&spec()).unwrap();
        let p = ex.extract(&image(6, 32, 32)).unwrap();
        let f = fuse_pyramid(&p).unwrap();
        let (blk0, rest) = f.split_channels(4).unwrap();
        let (blk1, blk2) = rest.split_channels(6).unwrap();
        assert_eq!(blk0, p.levels[0]);
        assert_eq!(blk1, bilinear_resize(&p.levels[1], (32, 32)).unwrap());
        assert_eq!(blk2, bilinear_resize(&p.levels[2], (32, 32)).unwrap());
    }

    #[test]
    fn empty_pyramid_is_an_error() {
        assert!(FeaturePyramid::new(vec![], Provenance::Synthetic { seed: 0 }).is_err());
    }

    #[test]
    fn projection_relu_passthrough_and_floor() {
        let x = image(7, 3, 3).map(f32::abs);
        let mut w = Tensor::zeros(&[3, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let params = ProjectionParams {
            weight: w,
            bias: Tensor::zeros(&[2]),
        };
        let (out, _) = project(&x, &params, Activation::Relu).unwrap();
        for px in 0..9 {
            assert_eq!(out.row(px), &x.row(px)[..2]);
        }
        let floor = ProjectionParams {
            weight: params.weight.clone(),
            bias: Tensor::full(&[2], -1e6),
        };
        let (out, _) = project(&x, &floor, Activation::Relu).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_conv_then_relu_and_is_homogeneous() {
        let x = image(8, 4, 4);
        let mut rng = SeedStream::new(9).rng(0);
        let params = ProjectionParams::<f32>::init(3, 5, &mut rng);
        let params = ProjectionParams {
            bias: Tensor::from_fn(&[5], |i| (i as f32 - 2.0) * 0.1),
            ..params
        };
        let (out, _) = project(&x, &params, Activation::Relu).unwrap();
        let oracle = conv1x1_forward(&x, &params.weight, &params.bias)
            .unwrap()
            .map(|v| v.max(0.0));
        assert_eq!(out, oracle);

        let mut scaled = params.clone();
        scaled.weight.scale(2.0);
        scaled.bias.scale(2.0);
        let (out2, _) = project(&x, &scaled, Activation::Relu).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        assert!(project(&image(1, 4, 4).reshape(&[4, 4, 3]).unwrap(), &ProjectionParams::<f32>::init(4, 2, &mut rng), Activation::Relu).is_err());
    }
}
