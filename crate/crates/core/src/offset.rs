//! Neural offset: a view-dependent shift of the pyramid lookup position.
//!
//! A bilinear lookup in the offset texture feeds a small MLP that predicts a
//! scalar ray depth `r`; the fixed map `H(r, wo) = r / wo.z * (wo.x, wo.y)`
//! turns it into a UV offset, as if the ray continued `r` below the
//! reference plane.

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::scalar::Real;
use crate::texture::{FeatureTexture, Taps, Uv};

/// Lower bound applied to `wo.z` inside `H`.
pub const GRAZING_Z_MIN: f64 = 0.1;

/// Slack on `x² + y² ≤ 1` to absorb rounding of stored directions.
const DISK_SLACK: f64 = 1e-5;

/// Hidden width of the offset MLP.
pub const OFFSET_HIDDEN: usize = 25;

/// Upper-hemisphere direction in projected-hemisphere form.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Direction<T> {
    x: T,
    y: T,
}

impl<T: Real> Direction<T> {
    pub fn new(x: T, y: T) -> Result<Self> {
        let r2 = x * x + y * y;
        if !(r2 <= T::one() + T::cst(DISK_SLACK)) {
            return Err(Error::InvalidDirection(x.as_f64(), y.as_f64()));
        }
        Ok(Self { x, y })
    }

    /// Normal incidence.
    pub fn normal() -> Self {
        Self {
            x: T::zero(),
            y: T::zero(),
        }
    }

    /// From a 3D vector in the local frame (z along the normal).
    pub fn from_vector(v: [T; 3]) -> Result<Self> {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(len > T::zero()) || v[2] < T::zero() {
            return Err(Error::InvalidDirection(v[0].as_f64(), v[1].as_f64()));
        }
        Self::new(v[0] / len, v[1] / len)
    }

    pub fn x(&self) -> T {
        self.x
    }

    pub fn y(&self) -> T {
        self.y
    }

    pub fn z(&self) -> T {
        (T::one() - self.x * self.x - self.y * self.y).max(T::zero()).sqrt()
    }

    pub fn to_vector(&self) -> [T; 3] {
        [self.x, self.y, self.z()]
    }

    pub fn cast<U: Real>(&self) -> Direction<U> {
        Direction {
            x: U::cst(self.x.as_f64()),
            y: U::cst(self.y.as_f64()),
        }
    }
}

/// `d offset / d r`, i.e. `(wo.x, wo.y) / max(wo.z, z_min)`.
#[inline]
pub fn depth_to_offset_scale<T: Real>(wo: Direction<T>) -> [T; 2] {
    let z = wo.z().max(T::cst(GRAZING_Z_MIN));
    [wo.x / z, wo.y / z]
}

/// The fixed function `H`.
#[inline]
pub fn offset_from_depth<T: Real>(r: T, wo: Direction<T>) -> [T; 2] {
    let s = depth_to_offset_scale(wo);
    [r * s[0], r * s[1]]
}

/// Intermediate values of one offset evaluation, kept for backprop.
#[derive(Clone, Debug, Default)]
pub struct OffsetScratch<T> {
    pub input: Vec<T>,
    pub cache: MlpCache<T>,
    pub taps: Option<Taps<T>>,
    pub depth: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetModule<T> {
    texture: FeatureTexture<T>,
    mlp: Mlp<T>,
}

/// Gradients of an offset module, laid out like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetGradients<T> {
    pub texture: Vec<T>,
    pub mlp: Vec<T>,
}

impl<T: Real> OffsetModule<T> {
    pub fn offset_mlp_dims(channels: usize) -> Vec<usize> {
        vec![channels + 2, OFFSET_HIDDEN, OFFSET_HIDDEN, OFFSET_HIDDEN, 1]
    }

    /// All-zero module: `r = 0` everywhere.
    pub fn zeros(resolution: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            texture: FeatureTexture::zeros(resolution, channels)?,
            mlp: Mlp::zeros(&Self::offset_mlp_dims(channels), false)?,
        })
    }

    pub fn new(texture: FeatureTexture<T>, mlp: Mlp<T>) -> Result<Self> {
        if mlp.input_dim() != texture.channels() + 2 || mlp.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "offset MLP {:?} does not fit a {}-channel offset texture",
                mlp.dims(),
                texture.channels()
            )));
        }
        if mlp.final_relu() {
            return Err(Error::InvalidArgument("offset MLP must not clamp its output".into()));
        }
        Ok(Self { texture, mlp })
    }

    pub fn texture(&self) -> &FeatureTexture<T> {
        &self.texture
    }

    pub fn texture_mut(&mut self) -> &mut FeatureTexture<T> {
        &mut self.texture
    }

    pub fn mlp(&self) -> &Mlp<T> {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        &mut self.mlp
    }

    pub fn channels(&self) -> usize {
        self.texture.channels()
    }

    /// Ray depth with an explicit (possibly blurred) texture in place of the
    /// module's own.
    pub(crate) fn depth_with(
        &self,
        texture: &FeatureTexture<T>,
        p: Uv<T>,
        wo: Direction<T>,
        scratch: &mut OffsetScratch<T>,
    ) -> T {
        let c = texture.channels();
        scratch.input.resize(c + 2, T::zero());
        let taps = texture.taps(p);
        texture.blend_into(&taps, &mut scratch.input[..c]);
        scratch.input[c] = wo.x;
        scratch.input[c + 1] = wo.y;
        let r = self.mlp.forward_cached(&scratch.input, &mut scratch.cache)[0];
        scratch.taps = Some(taps);
        scratch.depth = r;
        r
    }

    pub fn ray_depth(&self, p: Uv<T>, wo: Direction<T>) -> T {
        let mut s = OffsetScratch::default();
        self.depth_with(&self.texture, p, wo, &mut s)
    }

    pub fn apply_offset(&self, p: Uv<T>, wo: Direction<T>) -> Uv<T> {
        let d = offset_from_depth(self.ray_depth(p, wo), wo);
        Uv::new(p.u + d[0], p.v + d[1])
    }

    /// Backprop of a gradient on the shifted lookup position recorded in
    /// `scratch`; accumulates into texture and MLP gradient buffers.
    pub(crate) fn backward_accumulate(
        &self,
        wo: Direction<T>,
        coord_grad: [T; 2],
        scratch: &mut OffsetScratch<T>,
        feat_grad: &mut Vec<T>,
        tex_grad: &mut [T],
        mlp_grad: &mut [T],
    ) {
        let s = depth_to_offset_scale(wo);
        let dr = coord_grad[0] * s[0] + coord_grad[1] * s[1];
        if dr == T::zero() {
            return;
        }
        let c = self.channels();
        feat_grad.resize(c + 2, T::zero());
        self.mlp
            .backward_accumulate(&mut scratch.cache, &[dr], mlp_grad, Some(feat_grad));
        if let Some(taps) = &scratch.taps {
            taps.scatter(&feat_grad[..c], T::one(), tex_grad);
        }
    }

    /// Gradients of `coord_grad · apply_offset(p, wo)` with respect to the
    /// module's parameters.
    pub fn offset_backward(&self, p: Uv<T>, wo: Direction<T>, coord_grad: [T; 2]) -> OffsetGradients<T> {
        let mut scratch = OffsetScratch::default();
        self.depth_with(&self.texture, p, wo, &mut scratch);
        let mut grads = OffsetGradients {
            texture: vec![T::zero(); self.texture.data().len()],
            mlp: vec![T::zero(); self.mlp.param_count()],
        };
        let mut fg = Vec::new();
        self.backward_accumulate(wo, coord_grad, &mut scratch, &mut fg, &mut grads.texture, &mut grads.mlp);
        grads
    }

    pub fn param_count(&self) -> usize {
        self.texture.data().len() + self.mlp.param_count()
    }
}
