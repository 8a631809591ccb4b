//! Trainable 2D feature grids.
//!
//! Texel `(i, j)` (column `i`, row `j`) has its center at
//! `((i + 0.5) / res, (j + 0.5) / res)` and lookups wrap with period 1 in
//! both coordinates. Data is stored row-major with channels innermost.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Texture coordinate in tile units; any real value is accepted.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Uv<T> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Uv<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    /// Both coordinates reduced into `[0, 1)`.
    pub fn wrapped(self) -> Self {
        Self::new(self.u - self.u.floor(), self.v - self.v.floor())
    }
}

impl<T: Real> std::ops::Add for Uv<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.u + rhs.u, self.v + rhs.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTexture<T> {
    resolution: usize,
    channels: usize,
    data: Vec<T>,
}

/// The four texels touched by a bilinear lookup and their weights.
///
/// Tap order is `(x0, y0), (x1, y0), (x0, y1), (x1, y1)`; `texels` holds
/// texel indices (multiply by the channel count for the data offset).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps<T> {
    pub texels: [usize; 4],
    pub weights: [T; 4],
    pub fx: T,
    pub fy: T,
}

impl<T: Real> Taps<T> {
    /// Adds `scale * weight_i * upstream` into the dense gradient buffer of each tap.
    #[inline]
    pub fn scatter(&self, upstream: &[T], scale: T, grad: &mut [T]) {
        let c = upstream.len();
        for (&t, &w) in self.texels.iter().zip(&self.weights) {
            let w = w * scale;
            let dst = &mut grad[t * c..(t + 1) * c];
            for (d, &g) in dst.iter_mut().zip(upstream) {
                *d += w * g;
            }
        }
    }
}

impl<T: Real> FeatureTexture<T> {
    /// All-zero texture. `resolution` must be a power of two and `channels` ≥ 1.
    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        Self::from_data(resolution, channels, vec![T::zero(); resolution * resolution * channels])
    }

    pub fn constant(resolution: usize, value: &[T]) -> Result<Self> {
        let mut data = Vec::with_capacity(resolution * resolution * value.len());
        for _ in 0..resolution * resolution {
            data.extend_from_slice(value);
        }
        Self::from_data(resolution, value.len(), data)
    }

    pub fn from_data(resolution: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if !resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "texture resolution {resolution} is not a power of two"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("texture needs at least one channel".into()));
        }
        let expected = resolution * resolution * channels;
        if data.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            resolution,
            channels,
            data,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn texel(&self, i: usize, j: usize) -> &[T] {
        let t = j * self.resolution + i;
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear taps for `p`. A point exactly on a cell boundary belongs to
    /// the cell starting there (floor convention).
    #[inline]
    pub fn taps(&self, p: Uv<T>) -> Taps<T> {
        let n = self.resolution;
        let nf = T::from_usize(n);
        let half = T::cst(0.5);
        let x = p.u * nf - half;
        let y = p.v * nf - half;
        let xf = x.floor();
        let yf = y.floor();
        let fx = x - xf;
        let fy = y - yf;
        let n_i = n as i64;
        let x0 = xf.to_i64().unwrap_or(0).rem_euclid(n_i) as usize;
        let y0 = yf.to_i64().unwrap_or(0).rem_euclid(n_i) as usize;
        let x1 = if x0 + 1 == n { 0 } else { x0 + 1 };
        let y1 = if y0 + 1 == n { 0 } else { y0 + 1 };
        let one = T::one();
        Taps {
            texels: [y0 * n + x0, y0 * n + x1, y1 * n + x0, y1 * n + x1],
            weights: [
                (one - fx) * (one - fy),
                fx * (one - fy),
                (one - fx) * fy,
                fx * fy,
            ],
            fx,
            fy,
        }
    }

    /// Writes the bilinear blend at `p` into `out` (length = channels).
    #[inline]
    pub fn lookup_into(&self, p: Uv<T>, out: &mut [T]) {
        let taps = self.taps(p);
        self.blend_into(&taps, out);
    }

    #[inline]
    pub fn blend_into(&self, taps: &Taps<T>, out: &mut [T]) {
        let c = self.channels;
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for (&t, &w) in taps.texels.iter().zip(&taps.weights) {
            for (o, &v) in out.iter_mut().zip(&self.data[t * c..(t + 1) * c]) {
                *o += w * v;
            }
        }
    }

    pub fn bilinear_lookup(&self, p: Uv<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.channels];
        self.lookup_into(p, &mut out);
        out
    }

    /// Gradient of `upstream · lookup(p)` with respect to `p` for precomputed taps.
    #[inline]
    pub fn coord_grad(&self, taps: &Taps<T>, upstream: &[T]) -> [T; 2] {
        let c = self.channels;
        let one = T::one();
        let [t00, t10, t01, t11] = taps.texels.map(|t| &self.data[t * c..(t + 1) * c]);
        let (mut du, mut dv) = (T::zero(), T::zero());
        for ch in 0..c {
            let g = upstream[ch];
            du += g * ((one - taps.fy) * (t10[ch] - t00[ch]) + taps.fy * (t11[ch] - t01[ch]));
            dv += g * ((one - taps.fx) * (t01[ch] - t00[ch]) + taps.fx * (t11[ch] - t10[ch]));
        }
        let nf = T::from_usize(self.resolution);
        [du * nf, dv * nf]
    }

    /// Adjoint of [`bilinear_lookup`](Self::bilinear_lookup).
    ///
    /// Returns the taps (the gradient of texel `taps.texels[i]` is
    /// `taps.weights[i] * upstream`) and the coordinate gradient.
    pub fn bilinear_backward(&self, p: Uv<T>, upstream: &[T]) -> (Taps<T>, [T; 2]) {
        assert_eq!(upstream.len(), self.channels, "upstream length must equal channel count");
        let taps = self.taps(p);
        let coord = self.coord_grad(&taps, upstream);
        (taps, coord)
    }

    /// Separable wrap-around Gaussian blur, `sigma` in texels.
    pub fn gaussian_blur(&self, sigma: T) -> Self {
        let mut out = self.clone();
        if sigma > T::zero() {
            let kernel = gaussian_kernel(sigma);
            let mut scratch = Vec::new();
            blur_in_place(&mut out.data, self.resolution, self.channels, &kernel, &mut scratch);
        }
        out
    }
}

/// Adjoint of [`FeatureTexture::gaussian_blur`]. The kernel is symmetric, so
/// this is the same convolution applied to the gradient field.
pub fn blur_backward<T: Real>(upstream: &FeatureTexture<T>, sigma: T) -> FeatureTexture<T> {
    upstream.gaussian_blur(sigma)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    if sigma <= T::zero() {
        return vec![T::one()];
    }
    let r = (T::cst(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let denom = T::cst(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * r)
        .map(|i| {
            let d = T::from_usize(i) - T::from_usize(r);
            (-(d * d) / denom).exp()
        })
        .collect();
    let sum: T = k.iter().copied().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Convolves a `res × res × channels` field with `kernel` along both axes.
pub(crate) fn blur_in_place<T: Real>(
    data: &mut [T],
    res: usize,
    channels: usize,
    kernel: &[T],
    scratch: &mut Vec<T>,
) {
    if kernel.len() <= 1 {
        return;
    }
    let r = (kernel.len() / 2) as i64;
    let n = res as i64;
    let c = channels;
    scratch.clear();
    scratch.resize(data.len(), T::zero());
    // horizontal: data -> scratch
    for j in 0..res {
        let row = j * res;
        for i in 0..res {
            let dst = (row + i) * c;
            for (ki, &w) in kernel.iter().enumerate() {
                let src_i = (i as i64 + ki as i64 - r).rem_euclid(n) as usize;
                let src = (row + src_i) * c;
                for ch in 0..c {
                    scratch[dst + ch] += w * data[src + ch];
                }
            }
        }
    }
    // vertical: scratch -> data
    for v in data.iter_mut() {
        *v = T::zero();
    }
    for j in 0..res {
        for (ki, &w) in kernel.iter().enumerate() {
            let src_j = (j as i64 + ki as i64 - r).rem_euclid(n) as usize;
            let src_row = &scratch[src_j * res * c..(src_j + 1) * res * c];
            let dst_row = &mut data[j * res * c..(j + 1) * res * c];
            for (d, &s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
}
