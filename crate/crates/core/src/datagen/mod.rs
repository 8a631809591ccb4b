//! Synthetic training data from heightfield microgeometry.

pub mod dataset;
pub mod heightfield;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use dataset::{DatasetReader, DatasetWriter, QueryDataset, QueryRecord};
pub use heightfield::{Heightfield, Preset};
pub use oracle::{OracleOptions, DEFAULT_SAMPLES};

use crate::material::sample_outgoing;
use crate::texture::Uv;

/// Recommended queries per finest-level texel.
pub const RECOMMENDED_PER_TEXEL: std::ops::RangeInclusive<usize> = 200..=400;
pub const DEFAULT_PER_TEXEL: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateConfig {
    /// Finest pyramid level the data targets.
    pub k: usize,
    pub per_texel: usize,
    /// Oracle samples per query.
    pub samples: usize,
    pub seed: u64,
    pub oracle: OracleOptions,
}

impl GenerateConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            per_texel: DEFAULT_PER_TEXEL,
            samples: DEFAULT_SAMPLES,
            seed,
            oracle: OracleOptions::default(),
        }
    }

    pub fn record_count(&self) -> usize {
        (1usize << (2 * self.k)) * self.per_texel
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.oracle.indirect {
            f |= dataset::FLAG_INDIRECT;
        }
        if self.oracle.light_cone_deg > 0.0 {
            f |= dataset::FLAG_LIGHT_CONE;
        }
        f
    }
}

/// Independent generator for record `index`, so output does not depend on
/// scheduling.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one query: uniform position, cosine-distributed directions and a
/// log-uniform footprint in `[2^-(k+1), 2^-1]`, labelled by the oracle.
pub fn sample_record<R: Rng>(hf: &Heightfield, cfg: &GenerateConfig, rng: &mut R) -> QueryRecord {
    let p = Uv::new(rng.random::<f64>(), rng.random::<f64>());
    let (wi, _) = sample_outgoing::<f64, _>(rng);
    let (wo, _) = sample_outgoing::<f64, _>(rng);
    let log2_sigma = -1.0 - rng.random::<f64>() * cfg.k as f64;
    let sigma = log2_sigma.exp2();
    let rgb = hf.mbtf_oracle(p, sigma, wi.to_vector(), wo.to_vector(), cfg.samples, &cfg.oracle, rng);
    QueryRecord {
        uv: [p.u as f32, p.v as f32],
        sigma: sigma as f32,
        wi: [wi.x() as f32, wi.y() as f32],
        wo: [wo.x() as f32, wo.y() as f32],
        rgb: rgb.map(|c| c as f32),
    }
}

pub fn sample_queries(hf: &Heightfield, cfg: &GenerateConfig) -> QueryDataset {
    let records = (0..cfg.record_count() as u64)
        .into_par_iter()
        .map(|i| sample_record(hf, cfg, &mut record_rng(cfg.seed, i)))
        .collect();
    QueryDataset {
        k: cfg.k as u32,
        flags: cfg.flags(),
        records,
    }
}
