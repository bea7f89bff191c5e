//! Trainable memory generator: coordinate convolution, coordinate mapping,
//! bilinear sampling from a learned grid space, and the output fusion conv,
//! each with a hand-written backward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    conv1x1_backward, conv1x1_forward, relu_backward, xavier_normal, xavier_uniform, Real, Tensor,
};

/// Learned `H^G×W^G×C` feature lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpace<T = f32> {
    pub grid: Tensor<T>,
}

impl<T: Real> GridSpace<T> {
    pub fn new(grid: Tensor<T>) -> Result<Self> {
        let (hg, wg, _) = grid.hwc()?;
        if hg < 2 || wg < 2 {
            return Err(Error::dim(format!(
                "grid space needs at least 2×2 support points, got {hg}×{wg}"
            )));
        }
        Ok(Self { grid })
    }

    /// `(H^G, W^G, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.grid.hwc().expect("rank checked at construction")
    }
}

/// All generator weights. `version` is bumped on every optimizer update so a
/// backward pass can detect a cache from older weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T = f32> {
    pub coord_w: Tensor<T>,
    pub coord_b: Tensor<T>,
    pub phi1_w: Tensor<T>,
    pub phi1_b: Tensor<T>,
    pub phi2_w: Tensor<T>,
    pub phi2_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub grid: GridSpace<T>,
    pub version: u64,
}

impl<T: Real> GeneratorParams<T> {
    /// Xavier-uniform convs with zero biases; Xavier-normal grid.
    pub fn init(c: usize, hidden: usize, grid_h: usize, grid_w: usize, rng: &mut impl Rng) -> Result<Self> {
        let coord_w = xavier_uniform(c + 2, c, rng);
        let phi1_w = xavier_uniform(c, hidden, rng);
        let phi2_w = xavier_uniform(hidden, 2, rng);
        let out_w = xavier_uniform(2 * c, c, rng);
        let grid = xavier_normal(&[grid_h, grid_w, c], grid_h * grid_w, c, rng);
        Ok(Self {
            coord_w,
            coord_b: Tensor::zeros(&[c]),
            phi1_w,
            phi1_b: Tensor::zeros(&[hidden]),
            phi2_w,
            phi2_b: Tensor::zeros(&[2]),
            out_w,
            out_b: Tensor::zeros(&[c]),
            grid: GridSpace::new(grid)?,
            version: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.out_b.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            coord_w: Tensor::zeros_like(&self.coord_w),
            coord_b: Tensor::zeros_like(&self.coord_b),
            phi1_w: Tensor::zeros_like(&self.phi1_w),
            phi1_b: Tensor::zeros_like(&self.phi1_b),
            phi2_w: Tensor::zeros_like(&self.phi2_w),
            phi2_b: Tensor::zeros_like(&self.phi2_b),
            out_w: Tensor::zeros_like(&self.out_w),
            out_b: Tensor::zeros_like(&self.out_b),
            grid: GridSpace {
                grid: Tensor::zeros_like(&self.grid.grid),
            },
            version: self.version,
        }
    }
}

/// Normalized Cartesian coordinates, `X` across width and `Y` down height,
/// linear in the pixel index over `[−1, 1]`; a single row/column sits at 0.
pub fn coordinate_channels<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let axis = |i: usize, n: usize| {
        if n == 1 {
            T::zero()
        } else {
            T::lit(-1.0 + 2.0 * i as f64 / (n - 1) as f64)
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(axis(x, w));
            data.push(axis(y, h));
        }
    }
    Tensor::new(&[h, w, 2], data).expect("dims match")
}

/// `P̂ = conv(concat{P, X, Y})`. Returns `(P̂, concat input)`.
pub fn coord_conv<T: Real>(p: &Tensor<T>, params: &GeneratorParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = p.hwc()?;
    if params.coord_w.dims()[0] != c + 2 {
        return Err(Error::dim(format!(
            "coord conv expects {} input channels, P has {c} (+2 coordinates)",
            params.coord_w.dims()[0]
        )));
    }
    let cin = Tensor::concat_channels(p, &coordinate_channels(h, w))?;
    let out = conv1x1_forward(&cin, &params.coord_w, &params.coord_b)?;
    Ok((out, cin))
}

/// Intermediates of the coordinate mapping `φ`.
#[derive(Clone, Debug)]
pub struct CoordMapCache<T> {
    pub h1_pre: Tensor<T>,
    pub h1: Tensor<T>,
}

/// `Ṗ = tanh(conv₂(relu(conv₁(P̂))))`, an `H×W×2` map of `(p_x, p_y)`.
pub fn map_coords<T: Real>(
    p_hat: &Tensor<T>,
    params: &GeneratorParams<T>,
) -> Result<(Tensor<T>, CoordMapCache<T>)> {
    let h1_pre = conv1x1_forward(p_hat, &params.phi1_w, &params.phi1_b)?;
    let h1 = h1_pre.map(|v| v.max(T::zero()));
    let z = conv1x1_forward(&h1, &params.phi2_w, &params.phi2_b)?;
    Ok((z.map(|v| v.tanh()), CoordMapCache { h1_pre, h1 }))
}

/// Maps `(p_x, p_y) ∈ [−1,1]²` onto grid index space `[0, W^G−1]×[0, H^G−1]`.
pub fn normalize_coords<T: Real>(px: T, py: T, grid_h: usize, grid_w: usize) -> (T, T) {
    let half = T::lit(0.5);
    (
        (px + T::one()) * half * T::lit((grid_w - 1) as f64),
        (py + T::one()) * half * T::lit((grid_h - 1) as f64),
    )
}

fn normalize_map<T: Real>(pdot: &Tensor<T>, grid_h: usize, grid_w: usize) -> Tensor<T> {
    let mut out = pdot.clone();
    for px in out.data_mut().chunks_exact_mut(2) {
        let (x, y) = normalize_coords(px[0], px[1], grid_h, grid_w);
        px[0] = x;
        px[1] = y;
    }
    out
}

/// Lower corner and fractional offset along one grid axis. The corner is
/// pulled back one cell at the exact upper boundary so `lo + 1` stays valid.
fn corner<T: Real>(p: T, extent: usize) -> Result<(usize, T)> {
    let last = T::lit((extent - 1) as f64);
    let tol = T::lit(1e-6) * last.max(T::one());
    if !(p >= -tol && p <= last + tol) {
        return Err(Error::contract(format!(
            "sample coordinate {p:?} outside [0, {}]",
            extent - 1
        )));
    }
    let p = p.max(T::zero()).min(last);
    let lo = p.floor().to_usize().expect("non-negative").min(extent - 2);
    Ok((lo, p - T::lit(lo as f64)))
}

/// Four-corner bilinear sampling of `grid` at normalized `coords` (`H×W×2`,
/// channel 0 = x along `W^G`, channel 1 = y along `H^G`).
pub fn grid_sample<T: Real>(grid: &GridSpace<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (hg, wg, c) = grid.dims();
    let (h, w, two) = coords.hwc()?;
    if two != 2 {
        return Err(Error::dim("coordinate map must have 2 channels"));
    }
    let g = grid.grid.data();
    let mut out = Vec::with_capacity(h * w * c);
    for xy in coords.data().chunks_exact(2) {
        let (x0, fx) = corner(xy[0], wg)?;
        let (y0, fy) = corner(xy[1], hg)?;
        let one = T::one();
        let weights = [
            ((y0, x0), (one - fx) * (one - fy)),
            ((y0, x0 + 1), fx * (one - fy)),
            ((y0 + 1, x0), (one - fx) * fy),
            ((y0 + 1, x0 + 1), fx * fy),
        ];
        let start = out.len();
        out.resize(start + c, T::zero());
        let o = &mut out[start..];
        for ((gy, gx), wt) in weights {
            if wt == T::zero() {
                continue;
            }
            let cell = &g[(gy * wg + gx) * c..][..c];
            for (ov, &gv) in o.iter_mut().zip(cell) {
                *ov = *ov + wt * gv;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Gradients of [`grid_sample`] w.r.t. the grid and the normalized coords.
pub fn grid_sample_backward<T: Real>(
    grid: &GridSpace<T>,
    coords: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (hg, wg, c) = grid.dims();
    let (h, w, _) = coords.hwc()?;
    if grad_out.dims() != [h, w, c] {
        return Err(Error::dim(format!(
            "grid_sample backward: grad {:?} vs expected [{h}, {w}, {c}]",
            grad_out.dims()
        )));
    }
    let g = grid.grid.data();
    let mut dgrid = vec![T::zero(); g.len()];
    let mut dcoords = Vec::with_capacity(h * w * 2);
    let one = T::one();
    for (p, xy) in coords.data().chunks_exact(2).enumerate() {
        let (x0, fx) = corner(xy[0], wg)?;
        let (y0, fy) = corner(xy[1], hg)?;
        let go = &grad_out.data()[p * c..][..c];
        let idx = |y: usize, x: usize| (y * wg + x) * c;
        let (i00, i01, i10, i11) = (idx(y0, x0), idx(y0, x0 + 1), idx(y0 + 1, x0), idx(y0 + 1, x0 + 1));
        let (w00, w01, w10, w11) = ((one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy);
        let mut dx = T::zero();
        let mut dy = T::zero();
        for ch in 0..c {
            let gv = go[ch];
            dgrid[i00 + ch] = dgrid[i00 + ch] + w00 * gv;
            dgrid[i01 + ch] = dgrid[i01 + ch] + w01 * gv;
            dgrid[i10 + ch] = dgrid[i10 + ch] + w10 * gv;
            dgrid[i11 + ch] = dgrid[i11 + ch] + w11 * gv;
            let (g00, g01, g10, g11) = (g[i00 + ch], g[i01 + ch], g[i10 + ch], g[i11 + ch]);
            dx = dx + gv * ((one - fy) * (g01 - g00) + fy * (g11 - g10));
            dy = dy + gv * ((one - fx) * (g10 - g00) + fx * (g11 - g01));
        }
        dcoords.push(dx);
        dcoords.push(dy);
    }
    Ok((
        Tensor::new(grid.grid.dims(), dgrid)?,
        Tensor::new(&[h, w, 2], dcoords)?,
    ))
}

/// Everything [`generator_backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct GeneratorCache<T> {
    pub version: u64,
    pub cin: Tensor<T>,
    pub p_hat: Tensor<T>,
    pub coord_map: CoordMapCache<T>,
    pub pdot: Tensor<T>,
    pub coords: Tensor<T>,
    pub cat: Tensor<T>,
}

/// `M = conv(concat(s(G, norm(φ(P̂))), P̂))` with `P̂ = coord_conv(P)`.
pub fn generate_memory<T: Real>(
    p: &Tensor<T>,
    params: &GeneratorParams<T>,
) -> Result<(Tensor<T>, GeneratorCache<T>)> {
    let (hg, wg, gc) = params.grid.dims();
    let (_, _, c) = p.hwc()?;
    if gc != c || params.channels() != c {
        return Err(Error::dim(format!(
            "generator built for {} channels (grid {gc}), input has {c}",
            params.channels()
        )));
    }
    let (p_hat, cin) = coord_conv(p, params)?;
    let (pdot, coord_map) = map_coords(&p_hat, params)?;
    let coords = normalize_map(&pdot, hg, wg);
    let sampled = grid_sample(&params.grid, &coords)?;
    let cat = Tensor::concat_channels(&sampled, &p_hat)?;
    let m = conv1x1_forward(&cat, &params.out_w, &params.out_b)?;
    Ok((
        m,
        GeneratorCache {
            version: params.version,
            cin,
            p_hat,
            coord_map,
            pdot,
            coords,
            cat,
        },
    ))
}

/// Parameter gradients (same layout as the params) and `dL/dP`.
pub fn generator_backward<T: Real>(
    cache: &GeneratorCache<T>,
    params: &GeneratorParams<T>,
    grad_m: &Tensor<T>,
) -> Result<(GeneratorParams<T>, Tensor<T>)> {
    if cache.version != params.version {
        return Err(Error::StaleCache {
            cached: cache.version,
            current: params.version,
        });
    }
    let (hg, wg, c) = params.grid.dims();
    let out = conv1x1_backward(&cache.cat, &params.out_w, grad_m)?;
    let (d_sampled, mut d_phat) = out.grad_x.split_channels(c)?;

    let (d_grid, d_coords) = grid_sample_backward(&params.grid, &cache.coords, &d_sampled)?;
    let sx = T::lit((wg - 1) as f64 * 0.5);
    let sy = T::lit((hg - 1) as f64 * 0.5);
    let dz: Vec<T> = d_coords
        .data()
        .chunks_exact(2)
        .zip(cache.pdot.data().chunks_exact(2))
        .flat_map(|(d, pd)| {
            [
                d[0] * sx * (T::one() - pd[0] * pd[0]),
                d[1] * sy * (T::one() - pd[1] * pd[1]),
            ]
        })
        .collect();
    let dz = Tensor::new(cache.pdot.dims(), dz)?;
    let phi2 = conv1x1_backward(&cache.coord_map.h1, &params.phi2_w, &dz)?;
    let dh1_pre = relu_backward(&cache.coord_map.h1_pre, &phi2.grad_x)?;
    let phi1 = conv1x1_backward(&cache.p_hat, &params.phi1_w, &dh1_pre)?;
    d_phat.add_assign(&phi1.grad_x)?;

    let coord = conv1x1_backward(&cache.cin, &params.coord_w, &d_phat)?;
    let (d_p, _) = coord.grad_x.split_channels(c)?;

    Ok((
        GeneratorParams {
            coord_w: coord.grad_weight,
            coord_b: coord.grad_bias,
            phi1_w: phi1.grad_weight,
            phi1_b: phi1.grad_bias,
            phi2_w: phi2.grad_weight,
            phi2_b: phi2.grad_bias,
            out_w: out.grad_weight,
            out_b: out.grad_bias,
            grid: GridSpace { grid: d_grid },
            version: params.version,
        },
        d_p,
    ))
}
