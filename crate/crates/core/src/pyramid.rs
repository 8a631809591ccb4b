//! Neural texture pyramid with continuous level-of-detail lookup.
//!
//! Level `s` has resolution `2^s`; level 0 is a single texel. A query
//! footprint `sigma` (Gaussian std-dev in tile units) selects the continuous
//! level `l = clamp(-log2(sigma), 0, k)`, so `sigma = 1` is the 1×1 level
//! and `sigma = 2^-k` is one texel of the finest level.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::texture::{FeatureTexture, Taps, Uv};

/// Query footprint radius in tile units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSize<T>(T);

impl<T: Real> KernelSize<T> {
    pub fn new(sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::KernelDomain(sigma.as_f64()));
        }
        Ok(Self(sigma))
    }

    /// Kernel clamped into the range representable by a pyramid with max level `k`.
    pub fn clamped(sigma: T, k: usize) -> Result<Self> {
        let s = Self::new(sigma)?;
        let lo = T::cst(2f64.powi(-(k as i32 + 1)));
        Ok(Self(s.0.max(lo).min(T::one())))
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// Continuous level for a footprint: `clamp(-log2(sigma), 0, k)`.
pub fn level_of_detail<T: Real>(sigma: T, k: usize) -> Result<T> {
    let s = KernelSize::new(sigma)?;
    Ok((-s.get().log2()).max(T::zero()).min(T::from_usize(k)))
}

/// Two-level blend derived from a continuous level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelBlend<T> {
    pub lo: usize,
    pub hi: usize,
    pub w_lo: T,
    pub w_hi: T,
}

impl<T: Real> LevelBlend<T> {
    pub fn from_level(l: T) -> Self {
        let lo_f = l.floor();
        let hi_f = l.ceil();
        let lo = lo_f.to_usize().unwrap_or(0);
        let hi = hi_f.to_usize().unwrap_or(0);
        if lo == hi {
            Self {
                lo,
                hi,
                w_lo: T::one(),
                w_hi: T::zero(),
            }
        } else {
            Self {
                lo,
                hi,
                w_lo: hi_f - l,
                w_hi: l - lo_f,
            }
        }
    }

    fn single(&self) -> bool {
        self.lo == self.hi
    }
}

/// Sparse record of every texel a trilinear lookup touched.
#[derive(Clone, Copy, Debug)]
pub struct PyramidTaps<T> {
    pub blend: LevelBlend<T>,
    pub lo: Taps<T>,
    pub hi: Taps<T>,
}

impl<T: Real> PyramidTaps<T> {
    /// Accumulates `upstream` into per-level dense gradient buffers.
    #[inline]
    pub fn scatter(&self, upstream: &[T], grads: &mut [Vec<T>]) {
        self.lo.scatter(upstream, self.blend.w_lo, &mut grads[self.blend.lo]);
        if !self.blend.single() {
            self.hi.scatter(upstream, self.blend.w_hi, &mut grads[self.blend.hi]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPyramid<T> {
    levels: Vec<FeatureTexture<T>>,
}

impl<T: Real> NeuralPyramid<T> {
    pub fn zeros(k: usize, channels: usize) -> Result<Self> {
        let levels = (0..=k)
            .map(|s| FeatureTexture::zeros(1 << s, channels))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    /// Texels drawn from `N(0, std)`.
    pub fn random_normal<R: Rng>(k: usize, channels: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(k, channels)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for level in &mut p.levels {
            for v in level.data_mut() {
                *v = T::cst(normal.sample(rng));
            }
        }
        Ok(p)
    }

    pub fn from_levels(levels: Vec<FeatureTexture<T>>) -> Result<Self> {
        let c = levels
            .first()
            .ok_or_else(|| Error::InvalidArgument("pyramid needs at least one level".into()))?
            .channels();
        for (s, l) in levels.iter().enumerate() {
            if l.resolution() != 1 << s || l.channels() != c {
                return Err(Error::InvalidArgument(format!(
                    "level {s} is {}x{}x{}, expected {}x{}x{c}",
                    l.resolution(),
                    l.resolution(),
                    l.channels(),
                    1 << s,
                    1 << s
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Maximum level index.
    pub fn k(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn levels(&self) -> &[FeatureTexture<T>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FeatureTexture<T>] {
        &mut self.levels
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(|l| l.data().len()).sum()
    }

    pub fn blend(&self, sigma: T) -> Result<LevelBlend<T>> {
        Ok(LevelBlend::from_level(level_of_detail(sigma, self.k())?))
    }

    /// Trilinear lookup writing into `out`; returns the touched taps.
    #[inline]
    pub fn lookup_into(&self, p: Uv<T>, blend: LevelBlend<T>, out: &mut [T]) -> PyramidTaps<T> {
        let lo_tex = &self.levels[blend.lo];
        let lo = lo_tex.taps(p);
        lo_tex.blend_into(&lo, out);
        if blend.single() {
            return PyramidTaps { blend, lo, hi: lo };
        }
        let hi_tex = &self.levels[blend.hi];
        let hi = hi_tex.taps(p);
        let c = out.len();
        for o in out.iter_mut() {
            *o *= blend.w_lo;
        }
        for (&t, &w) in hi.texels.iter().zip(&hi.weights) {
            let w = w * blend.w_hi;
            for (o, &v) in out.iter_mut().zip(&hi_tex.data()[t * c..(t + 1) * c]) {
                *o += w * v;
            }
        }
        PyramidTaps { blend, lo, hi }
    }

    pub fn trilinear_lookup(&self, p: Uv<T>, sigma: T) -> Result<Vec<T>> {
        let blend = self.blend(sigma)?;
        let mut out = vec![T::zero(); self.channels()];
        self.lookup_into(p, blend, &mut out);
        Ok(out)
    }

    /// Coordinate gradient of `upstream · lookup` for precomputed taps.
    #[inline]
    pub fn coord_grad(&self, taps: &PyramidTaps<T>, upstream: &[T]) -> [T; 2] {
        let b = taps.blend;
        let g_lo = self.levels[b.lo].coord_grad(&taps.lo, upstream);
        if b.single() {
            return g_lo;
        }
        let g_hi = self.levels[b.hi].coord_grad(&taps.hi, upstream);
        [
            b.w_lo * g_lo[0] + b.w_hi * g_hi[0],
            b.w_lo * g_lo[1] + b.w_hi * g_hi[1],
        ]
    }

    /// Adjoint of [`trilinear_lookup`](Self::trilinear_lookup). No gradient
    /// flows to `sigma`.
    pub fn trilinear_backward(
        &self,
        p: Uv<T>,
        sigma: T,
        upstream: &[T],
    ) -> Result<(PyramidTaps<T>, [T; 2])> {
        if upstream.len() != self.channels() {
            return Err(Error::Dimension {
                expected: self.channels(),
                got: upstream.len(),
            });
        }
        let blend = self.blend(sigma)?;
        let mut scratch = vec![T::zero(); self.channels()];
        let taps = self.lookup_into(p, blend, &mut scratch);
        let coord = self.coord_grad(&taps, upstream);
        Ok((taps, coord))
    }

    /// Zeroed per-level gradient buffers matching this pyramid's layout.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.levels.iter().map(|l| vec![T::zero(); l.data().len()]).collect()
    }
}
