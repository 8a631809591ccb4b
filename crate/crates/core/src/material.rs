//! The deployable neural material: pyramid, optional neural offset and
//! decoder MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::offset::{offset_from_depth, Direction, OffsetModule, OffsetScratch};
use crate::pyramid::{NeuralPyramid, PyramidTaps};
use crate::scalar::Real;
use crate::texture::{FeatureTexture, Uv};

/// Hidden width of the decoder.
pub const DECODER_HIDDEN: usize = 25;

/// Std-dev of the initial texel values.
pub const TEXTURE_INIT_STD: f64 = 0.01;
/// Scale applied to the fan-in decoder weights at initialization.
pub const DECODER_INIT_GAIN: f64 = 0.5;

/// One MBTF query: position, footprint, light and view directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query<T> {
    pub p: Uv<T>,
    pub sigma: T,
    pub wi: Direction<T>,
    pub wo: Direction<T>,
}

impl<T: Real> Query<T> {
    pub fn new(p: Uv<T>, sigma: T, wi: Direction<T>, wo: Direction<T>) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::KernelDomain(sigma.as_f64()));
        }
        Ok(Self { p, sigma, wi, wo })
    }
}

/// Shape of a material.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    /// Finest pyramid level; the finest texture is `2^k` texels wide.
    pub k: usize,
    /// Pyramid feature channels.
    pub channels: usize,
    /// Offset texture channels.
    pub offset_channels: usize,
    pub with_offset: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            k: 9,
            channels: 7,
            offset_channels: 7,
            with_offset: true,
        }
    }
}

/// Where a material came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Provenance {
    pub iterations: u64,
    pub dataset_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MbtfMaterial<T> {
    pyramid: NeuralPyramid<T>,
    offset: Option<OffsetModule<T>>,
    decoder: Mlp<T>,
    pub provenance: Provenance,
}

/// Borrowed textures used for one evaluation; the trainer swaps in blurred
/// copies here.
#[derive(Clone, Copy)]
pub(crate) struct TextureView<'a, T> {
    pub pyramid: &'a NeuralPyramid<T>,
    pub offset: Option<&'a FeatureTexture<T>>,
}

/// Gradients for every trainable parameter of a material.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGrads<T> {
    pub pyramid: Vec<Vec<T>>,
    pub offset_texture: Vec<T>,
    pub offset_mlp: Vec<T>,
    pub decoder: Vec<T>,
}

impl<T: Real> MaterialGrads<T> {
    pub fn zero(&mut self) {
        for v in self
            .pyramid
            .iter_mut()
            .chain([&mut self.offset_texture, &mut self.offset_mlp, &mut self.decoder])
        {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        let pairs = self
            .pyramid
            .iter_mut()
            .zip(&other.pyramid)
            .chain([
                (&mut self.offset_texture, &other.offset_texture),
                (&mut self.offset_mlp, &other.offset_mlp),
                (&mut self.decoder, &other.decoder),
            ]);
        for (a, b) in pairs {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Per-thread buffers for a forward/backward evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalScratch<T> {
    offset: OffsetScratch<T>,
    uv: Uv<T>,
    taps: Option<PyramidTaps<T>>,
    dec_input: Vec<T>,
    dec_cache: MlpCache<T>,
    dec_in_grad: Vec<T>,
    feat_grad: Vec<T>,
}

impl<T: Real> MbtfMaterial<T> {
    pub fn decoder_dims(channels: usize) -> Vec<usize> {
        vec![channels + 4, DECODER_HIDDEN, DECODER_HIDDEN, DECODER_HIDDEN, 3]
    }

    /// Every parameter zero; evaluates to black everywhere.
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        let offset = if shape.with_offset {
            Some(OffsetModule::zeros(1 << shape.k, shape.offset_channels)?)
        } else {
            None
        };
        Ok(Self {
            pyramid: NeuralPyramid::zeros(shape.k, shape.channels)?,
            offset,
            decoder: Mlp::zeros(&Self::decoder_dims(shape.channels), true)?,
            provenance: Provenance::default(),
        })
    }

    /// Training initialization: texels from `N(0, 0.01)`, fan-in uniform MLP
    /// weights. Decoder weights are then halved, which keeps the initial
    /// output small and makes early training far less seed dependent. The
    /// last offset-MLP layer starts at zero so that the initial offset is the
    /// identity.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pyramid = NeuralPyramid::random_normal(shape.k, shape.channels, TEXTURE_INIT_STD, &mut rng)?;
        let mut decoder = Mlp::init(&Self::decoder_dims(shape.channels), true, rng.random())?;
        for l in 0..decoder.dims().len() - 1 {
            decoder.layer_mut(l).0.iter_mut().for_each(|w| *w *= T::cst(DECODER_INIT_GAIN));
        }
        let offset = if shape.with_offset {
            let mut tex = FeatureTexture::zeros(1 << shape.k, shape.offset_channels)?;
            let normal = Normal::new(0.0, TEXTURE_INIT_STD).unwrap();
            for v in tex.data_mut() {
                *v = T::cst(normal.sample(&mut rng));
            }
            let mut mlp = Mlp::init(&OffsetModule::<T>::offset_mlp_dims(shape.offset_channels), false, rng.random())?;
            let last = mlp.dims().len() - 2;
            let (w, b) = mlp.layer_mut(last);
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = T::zero());
            Some(OffsetModule::new(tex, mlp)?)
        } else {
            None
        };
        Ok(Self {
            pyramid,
            offset,
            decoder,
            provenance: Provenance::default(),
        })
    }

    pub fn from_parts(
        pyramid: NeuralPyramid<T>,
        offset: Option<OffsetModule<T>>,
        decoder: Mlp<T>,
        provenance: Provenance,
    ) -> Result<Self> {
        let c = pyramid.channels();
        if decoder.dims() != Self::decoder_dims(c).as_slice() || !decoder.final_relu() {
            return Err(Error::InvalidArgument(format!(
                "decoder {:?} does not match {c} pyramid channels",
                decoder.dims()
            )));
        }
        if let Some(o) = &offset {
            if o.texture().resolution() != 1 << pyramid.k() {
                return Err(Error::InvalidArgument(
                    "offset texture must match the finest pyramid level".into(),
                ));
            }
        }
        Ok(Self {
            pyramid,
            offset,
            decoder,
            provenance,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            k: self.pyramid.k(),
            channels: self.pyramid.channels(),
            offset_channels: self.offset.as_ref().map_or(0, |o| o.channels()),
            with_offset: self.offset.is_some(),
        }
    }

    pub fn pyramid(&self) -> &NeuralPyramid<T> {
        &self.pyramid
    }

    pub fn pyramid_mut(&mut self) -> &mut NeuralPyramid<T> {
        &mut self.pyramid
    }

    pub fn offset(&self) -> Option<&OffsetModule<T>> {
        self.offset.as_ref()
    }

    pub fn offset_mut(&mut self) -> Option<&mut OffsetModule<T>> {
        self.offset.as_mut()
    }

    pub fn decoder(&self) -> &Mlp<T> {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp<T> {
        &mut self.decoder
    }

    pub fn is_finite(&self) -> bool {
        self.pyramid.levels().iter().all(|l| l.is_finite())
            && self.decoder.is_finite()
            && self
                .offset
                .as_ref()
                .is_none_or(|o| o.texture().is_finite() && o.mlp().is_finite())
    }

    /// Total trainable parameters split as (textures, network weights).
    pub fn param_counts(&self) -> (usize, usize) {
        let tex = self.pyramid.param_count() + self.offset.as_ref().map_or(0, |o| o.texture().data().len());
        let net = self.decoder.param_count() + self.offset.as_ref().map_or(0, |o| o.mlp().param_count());
        (tex, net)
    }

    pub fn zero_grads(&self) -> MaterialGrads<T> {
        MaterialGrads {
            pyramid: self.pyramid.zero_grads(),
            offset_texture: vec![T::zero(); self.offset.as_ref().map_or(0, |o| o.texture().data().len())],
            offset_mlp: vec![T::zero(); self.offset.as_ref().map_or(0, |o| o.mlp().param_count())],
            decoder: vec![T::zero(); self.decoder.param_count()],
        }
    }

    pub(crate) fn own_view(&self) -> TextureView<'_, T> {
        TextureView {
            pyramid: &self.pyramid,
            offset: self.offset.as_ref().map(|o| o.texture()),
        }
    }

    /// Forward pass recording everything the backward pass needs.
    pub(crate) fn forward_with(
        &self,
        view: TextureView<'_, T>,
        q: &Query<T>,
        use_offset: bool,
        s: &mut EvalScratch<T>,
    ) -> [T; 3] {
        let mut uv = q.p;
        s.offset.taps = None;
        if let (true, Some(module), Some(tex)) = (use_offset, &self.offset, view.offset) {
            let r = module.depth_with(tex, q.p, q.wo, &mut s.offset);
            let d = offset_from_depth(r, q.wo);
            uv = Uv::new(uv.u + d[0], uv.v + d[1]);
        }
        s.uv = uv;
        let c = self.pyramid.channels();
        s.dec_input.resize(c + 4, T::zero());
        let blend = view
            .pyramid
            .blend(q.sigma)
            .expect("query kernel size validated at construction");
        let taps = view.pyramid.lookup_into(uv, blend, &mut s.dec_input[..c]);
        s.taps = Some(taps);
        s.dec_input[c] = q.wi.x();
        s.dec_input[c + 1] = q.wi.y();
        s.dec_input[c + 2] = q.wo.x();
        s.dec_input[c + 3] = q.wo.y();
        let out = self.decoder.forward_cached(&s.dec_input, &mut s.dec_cache);
        [out[0], out[1], out[2]]
    }

    /// Backprop of `dy` (gradient w.r.t. the RGB output) through the pass
    /// recorded in `s`; accumulates into `grads`.
    pub(crate) fn backward_with(
        &self,
        view: TextureView<'_, T>,
        q: &Query<T>,
        s: &mut EvalScratch<T>,
        dy: [T; 3],
        grads: &mut MaterialGrads<T>,
    ) {
        let c = self.pyramid.channels();
        s.dec_in_grad.resize(c + 4, T::zero());
        self.decoder
            .backward_accumulate(&mut s.dec_cache, &dy, &mut grads.decoder, Some(&mut s.dec_in_grad));
        let taps = s.taps.expect("forward pass recorded pyramid taps");
        let feat_up = &s.dec_in_grad[..c];
        taps.scatter(feat_up, &mut grads.pyramid);
        if s.offset.taps.is_some() {
            if let Some(module) = &self.offset {
                let coord = view.pyramid.coord_grad(&taps, feat_up);
                module.backward_accumulate(
                    q.wo,
                    coord,
                    &mut s.offset,
                    &mut s.feat_grad,
                    &mut grads.offset_texture,
                    &mut grads.offset_mlp,
                );
            }
        }
    }

    /// Full model: offset, pyramid lookup, decoder.
    pub fn eval(&self, q: &Query<T>) -> [T; 3] {
        let mut s = EvalScratch::default();
        self.forward_with(self.own_view(), q, true, &mut s)
    }

    /// Same as [`eval`](Self::eval) with the offset module bypassed.
    pub fn eval_baseline(&self, q: &Query<T>) -> [T; 3] {
        let mut s = EvalScratch::default();
        self.forward_with(self.own_view(), q, false, &mut s)
    }

    /// Evaluates many queries, reusing one scratch buffer.
    pub fn eval_batch(&self, queries: &[Query<T>], out: &mut Vec<[T; 3]>) {
        let mut s = EvalScratch::default();
        out.clear();
        out.extend(queries.iter().map(|q| self.forward_with(self.own_view(), q, true, &mut s)));
    }

    /// Gradient of `dy · eval(q)` with respect to every parameter.
    pub fn eval_backward(&self, q: &Query<T>, dy: [T; 3]) -> MaterialGrads<T> {
        let mut s = EvalScratch::default();
        let mut g = self.zero_grads();
        self.forward_with(self.own_view(), q, true, &mut s);
        self.backward_with(self.own_view(), q, &mut s, dy, &mut g);
        g
    }

    /// Visits every parameter block with its gradient counterpart, in a
    /// fixed order.
    pub fn for_each_block<'a>(
        &'a mut self,
        grads: &'a MaterialGrads<T>,
        mut f: impl FnMut(usize, &mut [T], &[T]),
    ) {
        let mut idx = 0;
        for (level, g) in self.pyramid.levels_mut().iter_mut().zip(&grads.pyramid) {
            f(idx, level.data_mut(), g);
            idx += 1;
        }
        if let Some(o) = &mut self.offset {
            f(idx, o.texture_mut().data_mut(), &grads.offset_texture);
            f(idx + 1, o.mlp_mut().params_mut(), &grads.offset_mlp);
            idx += 2;
        }
        f(idx, self.decoder.params_mut(), &grads.decoder);
    }

    pub fn cast<U: Real>(&self) -> MbtfMaterial<U> {
        let cast_tex = |t: &FeatureTexture<T>| {
            FeatureTexture::from_data(
                t.resolution(),
                t.channels(),
                t.data().iter().map(|v| U::cst(v.as_f64())).collect(),
            )
            .unwrap()
        };
        MbtfMaterial {
            pyramid: NeuralPyramid::from_levels(self.pyramid.levels().iter().map(cast_tex).collect()).unwrap(),
            offset: self
                .offset
                .as_ref()
                .map(|o| OffsetModule::new(cast_tex(o.texture()), o.mlp().cast()).unwrap()),
            decoder: self.decoder.cast(),
            provenance: self.provenance,
        }
    }
}

/// Cosine-weighted hemisphere sample: a uniform point on the unit disk is
/// already the projected-hemisphere encoding. Returns the direction and its
/// solid-angle pdf `cos(theta) / pi`.
pub fn sample_outgoing<T: Real, R: Rng + ?Sized>(rng: &mut R) -> (Direction<T>, T) {
    let r = rng.random::<f64>().sqrt();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    let (x, y) = (r * phi.cos(), r * phi.sin());
    let z = (1.0 - r * r).max(0.0).sqrt();
    let d = Direction::new(T::cst(x), T::cst(y)).expect("point inside unit disk");
    (d, T::cst(z * std::f64::consts::FRAC_1_PI))
}
