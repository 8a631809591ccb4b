//! Small fully connected networks with hand-written backprop.
//!
//! Parameters live in one flat vector. Layer `l` maps `n_l -> n_{l+1}` and
//! stores its weight matrix row-major as `W[i * n_out + o]` (input-major)
//! followed by its `n_out` biases. Hidden layers use ReLU; the last layer
//! uses ReLU only when `final_relu` is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    final_relu: bool,
    params: Vec<T>,
}

/// Activations recorded by a forward pass, reused across calls.
#[derive(Clone, Debug, Default)]
pub struct MlpCache<T> {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_next: Vec<T>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Number of parameters of a network with the given layer widths.
pub fn param_count_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl<T: Real> Mlp<T> {
    pub fn zeros(dims: &[usize], final_relu: bool) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            final_relu,
            params: vec![T::zero(); param_count_for(dims)],
        })
    }

    /// Fan-in scaled uniform weights in `±sqrt(6 / n_in)`, zero biases.
    pub fn init(dims: &[usize], final_relu: bool, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(dims, final_relu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in dims.windows(2) {
            let bound = (6.0 / w[0] as f64).sqrt();
            for p in &mut m.params[off..off + w[0] * w[1]] {
                *p = T::cst(rng.random_range(-bound..bound));
            }
            off += (w[0] + 1) * w[1];
        }
        Ok(m)
    }

    pub fn from_params(dims: &[usize], final_relu: bool, params: Vec<T>) -> Result<Self> {
        let mut m = Self::zeros(dims, final_relu)?;
        if params.len() != m.params.len() {
            return Err(Error::Dimension {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn final_relu(&self) -> bool {
        self.final_relu
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Weight matrix and bias slice of layer `l`.
    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let off: usize = param_count_for(&self.dims[..=l]);
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [T], &mut [T]) {
        let off: usize = param_count_for(&self.dims[..=l]);
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let (w, b) = self.params[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
        (w, b)
    }

    fn relu_at(&self, l: usize) -> bool {
        l + 2 < self.dims.len() || self.final_relu
    }

    /// Forward pass into a reusable cache; returns the output slice.
    pub fn forward_cached<'c>(&self, input: &[T], cache: &'c mut MlpCache<T>) -> &'c [T] {
        assert_eq!(input.len(), self.dims[0], "mlp input dimension mismatch");
        let layers = self.dims.len() - 1;
        if cache.acts.len() != layers + 1 {
            cache.acts = self.dims.iter().map(|&d| vec![T::zero(); d]).collect();
            cache.pre = self.dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
        }
        cache.acts[0].copy_from_slice(input);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + (n_in + 1) * n_out];
            off += (n_in + 1) * n_out;
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let x = &head[l];
            let pre = &mut cache.pre[l];
            pre.copy_from_slice(b);
            for (i, &xi) in x.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let row = &w[i * n_out..(i + 1) * n_out];
                for (p, &wv) in pre.iter_mut().zip(row) {
                    *p += xi * wv;
                }
            }
            let y = &mut tail[0];
            if self.relu_at(l) {
                for (o, &p) in y.iter_mut().zip(pre.iter()) {
                    *o = p.max(T::zero());
                }
            } else {
                y.copy_from_slice(pre);
            }
        }
        cache.output()
    }

    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, MlpCache<T>)> {
        if input.len() != self.dims[0] {
            return Err(Error::Dimension {
                expected: self.dims[0],
                got: input.len(),
            });
        }
        let mut cache = MlpCache::default();
        let out = self.forward_cached(input, &mut cache).to_vec();
        Ok((out, cache))
    }

    /// Backprop of `upstream` (gradient w.r.t. the output) through the pass
    /// recorded in `cache`. Parameter gradients are accumulated into
    /// `param_grad`; the input gradient overwrites `input_grad` when given.
    /// The ReLU derivative at 0 is 0.
    pub fn backward_accumulate(
        &self,
        cache: &mut MlpCache<T>,
        upstream: &[T],
        param_grad: &mut [T],
        input_grad: Option<&mut [T]>,
    ) {
        assert_eq!(upstream.len(), self.output_dim(), "mlp upstream dimension mismatch");
        assert_eq!(param_grad.len(), self.params.len());
        let layers = self.dims.len() - 1;
        let MlpCache {
            acts,
            pre,
            delta,
            delta_next,
        } = cache;
        delta.clear();
        delta.extend_from_slice(upstream);
        let mut off = self.params.len();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            off -= (n_in + 1) * n_out;
            if self.relu_at(l) {
                for (d, &p) in delta.iter_mut().zip(pre[l].iter()) {
                    if p <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            let (gw, gb) = param_grad[off..off + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            for (g, &d) in gb.iter_mut().zip(delta.iter()) {
                *g += d;
            }
            let x = &acts[l];
            delta_next.clear();
            delta_next.resize(n_in, T::zero());
            for i in 0..n_in {
                let xi = x[i];
                let row_g = &mut gw[i * n_out..(i + 1) * n_out];
                if xi != T::zero() {
                    for (g, &d) in row_g.iter_mut().zip(delta.iter()) {
                        *g += xi * d;
                    }
                }
                let row = &w[i * n_out..(i + 1) * n_out];
                let mut s = T::zero();
                for (&wv, &d) in row.iter().zip(delta.iter()) {
                    s += wv * d;
                }
                delta_next[i] = s;
            }
            std::mem::swap(delta, delta_next);
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(delta);
        }
    }

    /// Returns `(parameter gradient, input gradient)`.
    pub fn backward(&self, cache: &mut MlpCache<T>, upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut pg = vec![T::zero(); self.params.len()];
        let mut ig = vec![T::zero(); self.input_dim()];
        self.backward_accumulate(cache, upstream, &mut pg, Some(&mut ig));
        Ok((pg, ig))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            dims: self.dims.clone(),
            final_relu: self.final_relu,
            params: self.params.iter().map(|p| U::cst(p.as_f64())).collect(),
        }
    }
}
