//! End-to-end fitting of a material to a query dataset.
//!
//! Each step draws a batch with replacement, evaluates the material through
//! Gaussian-blurred copies of its textures (the blur radius decays with a
//! fixed half-life), backpropagates the mean squared error through the
//! blur, and applies one Adam update to every parameter.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::dataset::{QueryDataset, QueryRecord};
use crate::error::{Error, FormatError, Result};
use crate::io::{LeReader, LeWriter};
use crate::material::{EvalScratch, MaterialGrads, MbtfMaterial, ModelShape, Query, TextureView};
use crate::pyramid::NeuralPyramid;
use crate::scalar::Real;
use crate::texture::{blur_in_place, gaussian_kernel, FeatureTexture};

pub const DEFAULT_BLUR_SIGMA: f64 = 8.0;
pub const DEFAULT_BLUR_HALF_LIFE: f64 = 3333.0;
/// Below this many texels the training blur is switched off.
pub const BLUR_CUTOFF: f64 = 0.1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const OPTIMIZER_MAGIC: [u8; 4] = *b"NOPT";
pub const OPTIMIZER_VERSION: u32 = 1;

/// Gradient reduction is split into at most this many fixed chunks, summed
/// in order, so results do not depend on the worker count.
const MAX_CHUNKS: usize = 16;
const MIN_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub shape: ModelShape,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Initial training blur, in texels of each level.
    pub blur_sigma_init: f64,
    pub blur_half_life: f64,
    pub seed: u64,
    /// Train without the neural offset module.
    pub baseline_only: bool,
    /// Write a checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            batch_size: 1 << 14,
            iterations: 30_000,
            learning_rate: 1e-3,
            blur_sigma_init: DEFAULT_BLUR_SIGMA,
            blur_half_life: DEFAULT_BLUR_HALF_LIFE,
            seed: 0,
            baseline_only: false,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.blur_sigma_init >= 0.0) || !(self.blur_half_life > 0.0) {
            return bad("blur sigma must be >= 0 and half-life > 0");
        }
        if self.shape.channels == 0 || (self.shape.with_offset && self.shape.offset_channels == 0) {
            return bad("channel counts must be positive");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be positive");
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            with_offset: self.shape.with_offset && !self.baseline_only,
            ..self.shape
        }
    }

    pub fn blur_sigma(&self, t: usize) -> f64 {
        blur_sigma(t, self.blur_sigma_init, self.blur_half_life)
    }
}

/// Training blur in texels at iteration `t`: `sigma_init * 2^(-t / half_life)`,
/// or 0 once it falls below [`BLUR_CUTOFF`].
pub fn blur_sigma(t: usize, sigma_init: f64, half_life: f64) -> f64 {
    let s = sigma_init * (-(t as f64) / half_life).exp2();
    if s < BLUR_CUTOFF {
        0.0
    } else {
        s
    }
}

/// Mean squared error over the three channels.
#[inline]
pub fn loss<T: Real>(pred: &[T; 3], target: &[T; 3]) -> T {
    let mut s = T::zero();
    for c in 0..3 {
        let d = pred[c] - target[c];
        s += d * d;
    }
    s / T::cst(3.0)
}

/// Adam moments for every parameter block of a material.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(material: &MbtfMaterial<T>) -> Self {
        let mut sizes = Vec::new();
        let mut probe = material.clone();
        let g = material.zero_grads();
        probe.for_each_block(&g, |_, p, _| sizes.push(p.len()));
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One bias-corrected Adam update of every block.
    pub fn update(&mut self, material: &mut MbtfMaterial<T>, grads: &MaterialGrads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::cst(ADAM_BETA1), T::cst(ADAM_BETA2));
        let c1 = T::one() - T::cst(ADAM_BETA1.powi(t));
        let c2 = T::one() - T::cst(ADAM_BETA2.powi(t));
        let lr = T::cst(lr);
        let eps = T::cst(ADAM_EPS);
        let (ms, vs) = (&mut self.m, &mut self.v);
        material.for_each_block(grads, |i, params, g| {
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for j in 0..params.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                params[j] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }

    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let mut w = LeWriter::default();
        w.bytes(&OPTIMIZER_MAGIC);
        w.u32(OPTIMIZER_VERSION);
        w.u64(self.step);
        w.u32(self.m.len() as u32);
        for (m, v) in self.m.iter().zip(&self.v) {
            w.u64(m.len() as u64);
            w.reals(m, "first moment")?;
            w.reals(v, "second moment")?;
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = LeReader::new(bytes);
        r.magic(OPTIMIZER_MAGIC)?;
        r.version(OPTIMIZER_VERSION)?;
        let step = r.u64()?;
        let blocks = r.u32()? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..blocks.min(1 << 16) {
            let n = usize::try_from(r.u64()?).map_err(|_| FormatError::Truncated)?;
            m.push(r.reals(n, "first moment")?);
            v.push(r.reals(n, "second moment")?);
        }
        r.finish()?;
        Ok(Self { step, m, v })
    }
}

/// Blurred copies of whichever textures are large enough for the kernel.
struct BlurredTextures<T> {
    pyramid: NeuralPyramid<T>,
    offset: Option<FeatureTexture<T>>,
    kernel: Vec<T>,
}

impl<T: Real> BlurredTextures<T> {
    fn build(material: &MbtfMaterial<T>, sigma: f64) -> Option<Self> {
        if sigma <= 0.0 {
            return None;
        }
        let kernel: Vec<T> = gaussian_kernel(T::cst(sigma));
        let mut scratch = Vec::new();
        let mut pyramid = material.pyramid().clone();
        for level in pyramid.levels_mut() {
            if level.resolution() >= kernel.len() {
                let (res, c) = (level.resolution(), level.channels());
                blur_in_place(level.data_mut(), res, c, &kernel, &mut scratch);
            }
        }
        let offset = material.offset().map(|o| {
            let mut t = o.texture().clone();
            if t.resolution() >= kernel.len() {
                let (res, c) = (t.resolution(), t.channels());
                blur_in_place(t.data_mut(), res, c, &kernel, &mut scratch);
            }
            t
        });
        Some(Self { pyramid, offset, kernel })
    }

    /// Applies the blur adjoint to gradients taken w.r.t. the blurred copies.
    fn backprop(&self, grads: &mut MaterialGrads<T>) {
        let mut scratch = Vec::new();
        for (level, g) in self.pyramid.levels().iter().zip(grads.pyramid.iter_mut()) {
            if level.resolution() >= self.kernel.len() {
                blur_in_place(g, level.resolution(), level.channels(), &self.kernel, &mut scratch);
            }
        }
        if let Some(t) = &self.offset {
            if t.resolution() >= self.kernel.len() {
                blur_in_place(&mut grads.offset_texture, t.resolution(), t.channels(), &self.kernel, &mut scratch);
            }
        }
    }
}

/// Batch loss and its gradient with respect to every parameter, evaluated
/// through textures blurred by `blur` texels.
pub fn batch_gradients<T: Real>(
    material: &MbtfMaterial<T>,
    batch: &[QueryRecord],
    blur: f64,
) -> (f64, MaterialGrads<T>) {
    let blurred = BlurredTextures::build(material, blur);
    let view = match &blurred {
        Some(b) => TextureView {
            pyramid: &b.pyramid,
            offset: b.offset.as_ref(),
        },
        None => material.own_view(),
    };
    let use_offset = material.offset().is_some();
    let n = batch.len();
    let chunk = n.div_ceil(MAX_CHUNKS).max(MIN_CHUNK);
    let scale = T::cst(2.0 / (3.0 * n as f64));
    let partials: Vec<(f64, MaterialGrads<T>)> = batch
        .par_chunks(chunk)
        .map(|records| {
            let mut grads = material.zero_grads();
            let mut scratch = EvalScratch::default();
            let mut total = 0.0;
            for r in records {
                let q: Query<T> = r.query();
                let target = r.target::<T>();
                let y = material.forward_with(view, &q, use_offset, &mut scratch);
                total += loss(&y, &target).as_f64();
                let dy = [0, 1, 2].map(|c| (y[c] - target[c]) * scale);
                material.backward_with(view, &q, &mut scratch, dy, &mut grads);
            }
            (total, grads)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut total, mut grads) = iter.next().unwrap_or_else(|| (0.0, material.zero_grads()));
    for (l, g) in iter {
        total += l;
        grads.add_assign(&g);
    }
    if let Some(b) = &blurred {
        b.backprop(&mut grads);
    }
    (total / n.max(1) as f64, grads)
}

/// Mean per-record loss of `material` over `records`.
pub fn dataset_mse<T: Real>(material: &MbtfMaterial<T>, records: &[QueryRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let chunk = records.len().div_ceil(MAX_CHUNKS).max(MIN_CHUNK);
    let sums: Vec<f64> = records
        .par_chunks(chunk)
        .map(|rs| {
            rs.iter()
                .map(|r| loss(&material.eval(&r.query()), &r.target()).as_f64())
                .sum()
        })
        .collect();
    sums.iter().sum::<f64>() / records.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEntry {
    pub iteration: usize,
    pub loss: f64,
    pub blur_sigma: f64,
}

/// Optional files written while training.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Loss log: one `iteration<TAB>loss<TAB>blur_sigma` line per step.
    pub loss_log: Option<PathBuf>,
    /// Checkpoints go to `<stem>.iter<N>.neumat` / `.nopt` next to this path.
    pub checkpoint_base: Option<PathBuf>,
}

pub struct TrainOutcome<T> {
    pub material: MbtfMaterial<T>,
    pub optimizer: AdamState<T>,
    pub losses: Vec<LossEntry>,
    /// Loss of the final material over the whole training set.
    pub final_mse: f64,
}

pub struct Trainer<T> {
    pub material: MbtfMaterial<T>,
    pub optimizer: AdamState<T>,
    pub config: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let material = MbtfMaterial::init(config.model_shape(), config.seed)?;
        let optimizer = AdamState::new(&material);
        Ok(Self {
            material,
            optimizer,
            config,
        })
    }

    /// One optimization step at iteration `t`; returns the batch loss.
    pub fn step(&mut self, batch: &[QueryRecord], t: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let (l, grads) = batch_gradients(&self.material, batch, self.config.blur_sigma(t));
        if !l.is_finite() {
            let mean_target =
                batch.iter().map(|r| r.rgb.iter().map(|&c| c as f64).sum::<f64>() / 3.0).sum::<f64>() / batch.len() as f64;
            return Err(Error::NonFiniteLoss {
                iteration: t,
                loss: l,
                batch: batch.len(),
                mean_target,
            });
        }
        self.optimizer.update(&mut self.material, &grads, self.config.learning_rate);
        Ok(l)
    }
}

fn checkpoint_paths(base: &Path, iteration: usize) -> (PathBuf, PathBuf) {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    let dir = base.parent().unwrap_or(Path::new("."));
    (
        dir.join(format!("{stem}.iter{iteration}.neumat")),
        dir.join(format!("{stem}.iter{iteration}.nopt")),
    )
}

pub fn save_checkpoint<T: Real>(material: &MbtfMaterial<T>, opt: &AdamState<T>, material_path: &Path, opt_path: &Path) -> Result<()> {
    crate::io::save_material(material, material_path)?;
    crate::io::write_file(opt_path, &opt.encode()?)
}

pub fn load_optimizer<T: Real>(path: impl AsRef<Path>) -> Result<AdamState<T>> {
    Ok(AdamState::decode(&crate::io::read_file(path.as_ref())?)?)
}

/// Runs `config.iterations` steps on batches drawn uniformly with
/// replacement. Deterministic for a given seed.
pub fn train<T: Real>(dataset: &QueryDataset, config: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() && config.iterations > 0 {
        return Err(Error::InvalidArgument("dataset has no records".into()));
    }
    for (i, r) in dataset.records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::InvalidArgument(format!("record {i}: {e}")))?;
    }
    if dataset.k as usize != config.shape.k {
        return Err(Error::InvalidArgument(format!(
            "dataset was generated for k = {}, model has k = {}",
            dataset.k, config.shape.k
        )));
    }
    let hash = dataset.content_hash()?;
    let mut trainer = Trainer::<T>::new(config.clone())?;
    trainer.material.provenance.dataset_hash = hash;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut losses = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        batch.clear();
        batch.extend((0..config.batch_size).map(|_| dataset.records[rng.random_range(0..dataset.len())]));
        let l = trainer.step(&batch, t)?;
        losses.push(LossEntry {
            iteration: t,
            loss: l,
            blur_sigma: config.blur_sigma(t),
        });
        trainer.material.provenance.iterations = (t + 1) as u64;
        if let (Some(every), Some(base)) = (config.checkpoint_every, &outputs.checkpoint_base) {
            if (t + 1) % every == 0 {
                let (mp, op) = checkpoint_paths(base, t + 1);
                save_checkpoint(&trainer.material, &trainer.optimizer, &mp, &op)?;
            }
        }
    }
    if let Some(path) = &outputs.loss_log {
        crate::image::write_lines(
            path,
            losses.iter().map(|e| format!("{}\t{:e}\t{}", e.iteration, e.loss, e.blur_sigma)),
        )?;
    }
    let final_mse = dataset_mse(&trainer.material, &dataset.records);
    Ok(TrainOutcome {
        material: trainer.material,
        optimizer: trainer.optimizer,
        losses,
        final_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Mlp;

    fn micro_shape() -> ModelShape {
        ModelShape {
            k: 2,
            channels: 3,
            offset_channels: 3,
            with_offset: true,
        }
    }

    fn random_records(n: usize, seed: u64, k: usize) -> Vec<QueryRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut dir = || {
                    let r: f32 = rng.random_range(0.0..0.9);
                    let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                    [r * a.cos(), r * a.sin()]
                };
                let (wi, wo) = (dir(), dir());
                QueryRecord {
                    uv: [rng.random(), rng.random()],
                    sigma: (-1.0 - rng.random::<f32>() * k as f32).exp2(),
                    wi,
                    wo,
                    rgb: [rng.random(), rng.random(), rng.random()],
                }
            })
            .collect()
    }

    fn nontrivial_micro(seed: u64) -> MbtfMaterial<f64> {
        let mut m = MbtfMaterial::<f64>::init(micro_shape(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        for l in m.pyramid_mut().levels_mut() {
            l.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let o = m.offset_mut().unwrap();
        o.texture_mut().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let dims = o.mlp().dims().to_vec();
        *o.mlp_mut() = Mlp::init(&dims, false, seed + 3).unwrap();
        o.mlp_mut().params_mut().iter_mut().for_each(|v| *v *= 0.3);
        // keep the output ReLU active
        let n = m.decoder().param_count();
        for b in &mut m.decoder_mut().params_mut()[n - 3..] {
            *b = 2.0;
        }
        m
    }

    fn blocks(m: &mut MbtfMaterial<f64>) -> Vec<Vec<f64>> {
        let g = m.zero_grads();
        let mut out = Vec::new();
        m.for_each_block(&g, |_, p, _| out.push(p.to_vec()));
        out
    }

    fn nudge(m: &mut MbtfMaterial<f64>, block: usize, j: usize, h: f64) {
        let g = m.zero_grads();
        m.for_each_block(&g, |i, p, _| {
            if i == block {
                p[j] += h;
            }
        });
    }

    #[test]
    fn blur_schedule_halves_every_half_life() {
        assert_eq!(blur_sigma(0, 8.0, 3333.0), 8.0);
        assert_eq!(blur_sigma(3333, 8.0, 3333.0), 4.0);
        assert_eq!(blur_sigma(6666, 8.0, 3333.0), 2.0);
        // 8 * 2^-6.32... < 0.1 after about 21000 iterations
        assert!(blur_sigma(21_000, 8.0, 3333.0) > 0.0);
        assert_eq!(blur_sigma(22_000, 8.0, 3333.0), 0.0);
        assert_eq!(blur_sigma(0, 0.0, 3333.0), 0.0);
    }

    #[test]
    fn loss_is_channel_mean_square() {
        assert_eq!(loss(&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0]), 13.0 / 3.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = TrainConfig {
            shape: micro_shape(),
            batch_size: 64,
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::<f32>::new(cfg).unwrap();
        let before = tr.material.clone();
        let recs = random_records(64, 1, 2);
        for t in 0..5 {
            tr.step(&recs, t).unwrap();
        }
        assert_eq!(tr.material, before);
        assert_eq!(tr.optimizer.step, 5);
    }

    #[test]
    fn every_block_moves_after_one_step() {
        let cfg = TrainConfig {
            shape: micro_shape(),
            batch_size: 256,
            blur_sigma_init: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        // a non-identity offset so its texture receives gradient
        tr.material = nontrivial_micro(4);
        let before = blocks(&mut tr.material.clone());
        // some records on the coarsest level so every level is read
        let mut recs = random_records(256, 2, 2);
        recs.iter_mut().step_by(3).for_each(|r| r.sigma = 1.0);
        tr.step(&recs, 0).unwrap();
        let after = blocks(&mut tr.material);
        assert_eq!(before.len(), 2 + 1 + 2 + 1);
        for (i, (b, a)) in before.iter().zip(&after).enumerate() {
            assert!(b != a, "block {i} unchanged");
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_blur() {
        // sigma 0.3 -> 3-wide kernel: the 4x4 level and offset texture are
        // blurred, the 1x1 and 2x2 levels are not
        let m0 = nontrivial_micro(9);
        let recs = random_records(24, 5, 2);
        let blur = 0.3;
        let (_, g) = batch_gradients(&m0, &recs, blur);
        let mut probe = m0.clone();
        let mut analytic = Vec::new();
        probe.for_each_block(&g, |_, _, gb| analytic.push(gb.to_vec()));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut checked = 0;
        for (b, ga) in analytic.iter().enumerate() {
            for _ in 0..12 {
                let j = rng.random_range(0..ga.len());
                let mut mp = m0.clone();
                nudge(&mut mp, b, j, h);
                let mut mm = m0.clone();
                nudge(&mut mm, b, j, -h);
                let fd = (batch_gradients(&mp, &recs, blur).0 - batch_gradients(&mm, &recs, blur).0) / (2.0 * h);
                let tol = 1e-3 * fd.abs().max(ga[j].abs()).max(1e-3);
                assert!((fd - ga[j]).abs() < tol, "block {b} param {j}: fd {fd} vs {}", ga[j]);
                checked += 1;
            }
        }
        assert_eq!(checked, 6 * 12);
    }

    #[test]
    fn blur_adjoint_is_skipped_on_small_levels() {
        let m = nontrivial_micro(3);
        let recs = random_records(8, 1, 2);
        // sigma 2 -> kernel of 13 taps, wider than every level
        let (l_blur, g_blur) = batch_gradients(&m, &recs, 2.0);
        let (l, g) = batch_gradients(&m, &recs, 0.0);
        assert_eq!(l_blur, l);
        assert_eq!(g_blur, g);
    }

    #[test]
    fn reduction_does_not_depend_on_thread_count() {
        let m = nontrivial_micro(2).cast::<f32>();
        let recs = random_records(3000, 8, 2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| batch_gradients(&m, &recs, 0.3))
        };
        let (l1, g1) = run(1);
        let (l3, g3) = run(3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }

    #[test]
    fn loss_decreases_on_constant_target() {
        let recs: Vec<_> = random_records(2048, 3, 2)
            .into_iter()
            .map(|r| QueryRecord { rgb: [0.5, 0.5, 0.5], ..r })
            .collect();
        let ds = QueryDataset {
            k: 2,
            flags: 0,
            records: recs,
        };
        let cfg = TrainConfig {
            shape: micro_shape(),
            batch_size: 512,
            iterations: 600,
            seed: 1,
            ..Default::default()
        };
        let out = train::<f32>(&ds, &cfg, &TrainOutputs::default()).unwrap();
        let first: f64 = out.losses[..20].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        let last: f64 = out.losses[580..].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        assert!(last < 0.1 * first, "{first} -> {last}");
        assert!(out.final_mse < 1e-3, "{}", out.final_mse);
        assert!((dataset_mse(&out.material, &ds.records) - out.final_mse).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible_and_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = QueryDataset {
            k: 2,
            flags: 0,
            records: random_records(500, 4, 2),
        };
        let cfg = TrainConfig {
            shape: micro_shape(),
            batch_size: 64,
            iterations: 20,
            checkpoint_every: Some(10),
            seed: 5,
            ..Default::default()
        };
        let outputs = TrainOutputs {
            loss_log: Some(dir.path().join("loss.tsv")),
            checkpoint_base: Some(dir.path().join("m.neumat")),
        };
        let a = train::<f32>(&ds, &cfg, &outputs).unwrap();
        let b = train::<f32>(&ds, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(a.material, b.material);
        assert_eq!(a.material.provenance.iterations, 20);
        assert_eq!(a.material.provenance.dataset_hash, ds.content_hash().unwrap());

        let log = std::fs::read_to_string(dir.path().join("loss.tsv")).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines.len(), 20);
        let fields: Vec<_> = lines[3].split('\t').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0], "3");
        assert_eq!(fields[1].parse::<f64>().unwrap(), a.losses[3].loss);

        let m20 = crate::io::load_material::<f32>(dir.path().join("m.iter20.neumat")).unwrap();
        assert_eq!(m20, a.material);
        let o20 = load_optimizer::<f32>(dir.path().join("m.iter20.nopt")).unwrap();
        assert_eq!(o20, a.optimizer);
        assert!(dir.path().join("m.iter10.neumat").exists());
    }

    #[test]
    fn optimizer_state_rejects_corruption() {
        let st = AdamState {
            step: 3,
            m: vec![vec![1.0f32, 2.0]],
            v: vec![vec![3.0, 4.0]],
        };
        let bytes = st.encode().unwrap();
        assert_eq!(AdamState::<f32>::decode(&bytes).unwrap(), st);
        assert!(AdamState::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(AdamState::<f32>::decode(&bad), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut tr = Trainer::<f32>::new(TrainConfig {
            shape: micro_shape(),
            batch_size: 4,
            ..Default::default()
        })
        .unwrap();
        let mut recs = random_records(4, 1, 2);
        recs[2].rgb[1] = f32::INFINITY;
        match tr.step(&recs, 7) {
            Err(Error::NonFiniteLoss { iteration, batch, .. }) => {
                assert_eq!((iteration, batch), (7, 4));
            }
            other => panic!("expected NonFiniteLoss, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn train_rejects_mismatched_k() {
        let ds = QueryDataset {
            k: 3,
            flags: 0,
            records: random_records(10, 1, 3),
        };
        let cfg = TrainConfig {
            shape: micro_shape(),
            iterations: 1,
            batch_size: 4,
            ..Default::default()
        };
        assert!(matches!(train::<f32>(&ds, &cfg, &TrainOutputs::default()), Err(Error::InvalidArgument(_))));
    }
}
