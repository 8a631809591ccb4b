//! Error of a material against its heightfield reference, level by level.
//!
//! For every requested pyramid level `l` the material and the reference are
//! rendered over a uv-space grid covering one tile at footprint `2^-l` for a
//! fixed set of light/view pairs, and the image MSE is averaged over pairs.

use rayon::prelude::*;

use crate::datagen::{record_rng, Heightfield, OracleOptions};
use crate::error::{Error, Result};
use crate::image::{image_mse, Image};
use crate::material::{sample_outgoing, MbtfMaterial, Query};
use crate::offset::Direction;
use crate::scalar::Real;
use crate::texture::Uv;

#[derive(Clone, Debug, PartialEq)]
pub struct LodConfig {
    /// Grid side in pixels.
    pub resolution: usize,
    /// Light/view pairs per level.
    pub directions: usize,
    /// Reference samples per pixel.
    pub samples: usize,
    pub seed: u64,
    pub oracle: OracleOptions,
}

impl Default for LodConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            directions: 4,
            samples: 256,
            seed: 0,
            oracle: OracleOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LodRow {
    pub level: usize,
    pub sigma: f64,
    pub mse: f64,
}

/// Fixed cosine-distributed `(wi, wo)` pairs for `seed`.
pub fn direction_pairs(n: usize, seed: u64) -> Vec<(Direction<f64>, Direction<f64>)> {
    let mut rng = record_rng(seed, u64::MAX);
    (0..n)
        .map(|_| {
            let (wi, _) = sample_outgoing::<f64, _>(&mut rng);
            let (wo, _) = sample_outgoing::<f64, _>(&mut rng);
            (wi, wo)
        })
        .collect()
}

/// Material and reference images of one tile at footprint `sigma`.
pub fn uv_images<T: Real>(
    material: &MbtfMaterial<T>,
    hf: &Heightfield,
    sigma: f64,
    wi: Direction<f64>,
    wo: Direction<f64>,
    cfg: &LodConfig,
    stream: u64,
) -> Result<(Image, Image)> {
    let n = cfg.resolution;
    let q_wi = wi.cast::<T>();
    let q_wo = wo.cast::<T>();
    let pixels: Vec<([f32; 3], [f32; 3])> = (0..n * n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % n, i / n);
            let (u, v) = ((x as f64 + 0.5) / n as f64, 1.0 - (y as f64 + 0.5) / n as f64);
            let q = Query {
                p: Uv::new(T::cst(u), T::cst(v)),
                sigma: T::cst(sigma),
                wi: q_wi,
                wo: q_wo,
            };
            let pred = material.eval(&q).map(|c| c.as_f32());
            let mut rng = record_rng(cfg.seed, (stream << 32) | i as u64);
            let truth = hf.mbtf_oracle(
                Uv::new(u, v),
                sigma,
                wi.to_vector(),
                wo.to_vector(),
                cfg.samples,
                &cfg.oracle,
                &mut rng,
            );
            (pred, truth.map(|c| c as f32))
        })
        .collect();
    let (pred, truth): (Vec<_>, Vec<_>) = pixels.into_iter().unzip();
    Ok((Image::from_pixels(n, n, pred)?, Image::from_pixels(n, n, truth)?))
}

/// One row per requested level, in the order given.
pub fn lod_mse_table<T: Real>(
    material: &MbtfMaterial<T>,
    hf: &Heightfield,
    levels: &[usize],
    cfg: &LodConfig,
) -> Result<Vec<LodRow>> {
    let k = material.shape().k;
    if let Some(&bad) = levels.iter().find(|&&l| l > k) {
        return Err(Error::InvalidArgument(format!("level {bad} exceeds pyramid depth {k}")));
    }
    if cfg.resolution == 0 || cfg.directions == 0 {
        return Err(Error::InvalidArgument("empty evaluation grid".into()));
    }
    let pairs = direction_pairs(cfg.directions, cfg.seed);
    levels
        .iter()
        .map(|&level| {
            let sigma = (-(level as f64)).exp2();
            let mut total = 0.0;
            for (j, &(wi, wo)) in pairs.iter().enumerate() {
                let (a, b) = uv_images(material, hf, sigma, wi, wo, cfg, (level * pairs.len() + j) as u64)?;
                total += image_mse(&a, &b)?;
            }
            Ok(LodRow {
                level,
                sigma,
                mse: total / pairs.len() as f64,
            })
        })
        .collect()
}

/// Mean MSE over the coarser and the finer half of `rows` (sorted by
/// level); with an odd count the middle row is left out.
pub fn coarse_fine_means(rows: &[LodRow]) -> (f64, f64) {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.level);
    let half = sorted.len() / 2;
    let mean = |rs: &[LodRow]| rs.iter().map(|r| r.mse).sum::<f64>() / rs.len().max(1) as f64;
    (mean(&sorted[..half]), mean(&sorted[sorted.len() - half..]))
}

pub fn lod_csv(rows: &[LodRow]) -> String {
    let mut s = String::from("level,sigma,mse\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.level, r.sigma, r.mse));
    }
    s
}
