//! Tileable heightfield microgeometry with per-texel albedo.

use std::path::Path;

use crate::error::{Error, Result};

/// Square, tileable heightfield. Heights are in tile units above the
/// reference plane `z = 0`; albedo is linear RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Heightfield {
    resolution: usize,
    heights: Vec<f64>,
    albedo: Vec<[f64; 3]>,
    roughness: Option<Vec<f64>>,
    min_height: f64,
    max_height: f64,
}

/// Built-in procedural microgeometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Height 0, albedo 0.5.
    Flat,
    /// A raised plateau over `u ∈ [1/16, 15/16)` carrying an 8×8 checker
    /// albedo, with a floor strip in between; the parallax test material.
    Step,
    /// Sawtooth ramp along `u`.
    Ramp,
    /// Flat, 8×8 two-tone checkerboard albedo.
    Checker,
    /// Grid of colored bumps.
    Bumps,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Flat, Preset::Step, Preset::Ramp, Preset::Checker, Preset::Bumps];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Flat => "flat",
            Preset::Step => "step",
            Preset::Ramp => "ramp",
            Preset::Checker => "checker",
            Preset::Bumps => "bumps",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset {s:?} (flat, step, ramp, checker, bumps)")))
    }
}

/// Height of the step preset's plateau.
pub const STEP_HEIGHT: f64 = 0.1;
/// Width of the floor strip on each side of the plateau.
pub const STEP_EDGE: f64 = 1.0 / 16.0;
/// Checker cells per tile side on the plateau.
pub const STEP_CHECKS: usize = 8;
/// Rise of the ramp preset over one tile.
pub const RAMP_HEIGHT: f64 = 0.05;
/// Bumps per tile side in the bumps preset.
pub const BUMP_GRID: usize = 8;
/// Peak height of the bumps preset.
pub const BUMP_HEIGHT: f64 = 0.04;

fn hash01(i: usize, j: usize, salt: u64) -> f64 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

impl Heightfield {
    pub fn new(resolution: usize, heights: Vec<f64>, albedo: Vec<[f64; 3]>, roughness: Option<Vec<f64>>) -> Result<Self> {
        let n = resolution * resolution;
        if resolution == 0 || heights.len() != n || albedo.len() != n {
            return Err(Error::InvalidArgument(format!(
                "heightfield {resolution}x{resolution} needs {n} heights and albedos"
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidArgument("heightfield contains non-finite heights".into()));
        }
        if albedo.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidArgument("albedo must lie in [0, 1]".into()));
        }
        if let Some(r) = &roughness {
            if r.len() != n || r.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(Error::InvalidArgument("roughness must lie in (0, 1]".into()));
            }
        }
        let min_height = heights.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            resolution,
            heights,
            albedo,
            roughness,
            min_height,
            max_height,
        })
    }

    pub fn from_fn(resolution: usize, mut f: impl FnMut(f64, f64) -> (f64, [f64; 3])) -> Result<Self> {
        let mut heights = Vec::with_capacity(resolution * resolution);
        let mut albedo = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            for i in 0..resolution {
                let u = (i as f64 + 0.5) / resolution as f64;
                let v = (j as f64 + 0.5) / resolution as f64;
                let (h, a) = f(u, v);
                heights.push(h);
                albedo.push(a);
            }
        }
        Self::new(resolution, heights, albedo, None)
    }

    pub fn flat(resolution: usize, albedo: f64) -> Self {
        Self::from_fn(resolution, |_, _| (0.0, [albedo; 3])).expect("valid flat heightfield")
    }

    pub fn preset(preset: Preset, resolution: usize) -> Self {
        let hf = match preset {
            Preset::Flat => Self::from_fn(resolution, |_, _| (0.0, [0.5; 3])),
            Preset::Step => Self::from_fn(resolution, |u, v| {
                if (STEP_EDGE..1.0 - STEP_EDGE).contains(&u) {
                    let n = STEP_CHECKS as f64;
                    let c = ((u * n) as usize + (v * n) as usize) % 2;
                    (STEP_HEIGHT, if c == 0 { [0.85, 0.7, 0.4] } else { [0.25, 0.2, 0.1] })
                } else {
                    (0.0, [0.3, 0.4, 0.6])
                }
            }),
            Preset::Ramp => Self::from_fn(resolution, |u, _| (RAMP_HEIGHT * u, [0.5; 3])),
            Preset::Checker => Self::from_fn(resolution, |u, v| {
                let c = ((u * 8.0) as usize + (v * 8.0) as usize) % 2;
                (0.0, if c == 0 { [0.2; 3] } else { [0.8; 3] })
            }),
            Preset::Bumps => Self::from_fn(resolution, |u, v| {
                let g = BUMP_GRID as f64;
                let (ci, cj) = ((u * g) as usize, (v * g) as usize);
                let (fu, fv) = (u * g - ci as f64 - 0.5, v * g - cj as f64 - 0.5);
                let d2 = (fu * fu + fv * fv) / (0.3 * 0.3);
                let bump = (1.0 - d2).max(0.0);
                let h = BUMP_HEIGHT * bump * bump;
                let tint = hash01(ci, cj, 17);
                let top = [0.85, 0.55 + 0.3 * tint, 0.2 + 0.2 * tint];
                let base = [0.1, 0.12, 0.3];
                let t = if bump > 0.0 { 0.5 + 0.5 * bump } else { 0.0 };
                let a = [0, 1, 2].map(|c| base[c] + (top[c] - base[c]) * t);
                (h, a)
            }),
        };
        hf.expect("presets are valid")
    }

    /// Loads a 16-bit grayscale height PNG (scaled by `height_scale` tile
    /// units at full white) and an optional 8-bit sRGB albedo PNG.
    pub fn from_png(heights: &Path, albedo: Option<&Path>, height_scale: f64) -> Result<Self> {
        let (w, h, hdata) = crate::image::read_png_channels(heights, 1, true)?;
        if w != h {
            return Err(Error::Image {
                path: heights.into(),
                message: format!("heightfield must be square, got {w}x{h}"),
            });
        }
        let hs: Vec<f64> = hdata.iter().map(|&v| v * height_scale).collect();
        let albedo = match albedo {
            Some(p) => {
                let (aw, ah, a) = crate::image::read_png_channels(p, 3, false)?;
                if (aw, ah) != (w, h) {
                    return Err(Error::Image {
                        path: p.into(),
                        message: format!("albedo is {aw}x{ah}, heightfield is {w}x{h}"),
                    });
                }
                a.chunks_exact(3)
                    .map(|c| [0, 1, 2].map(|i| crate::image::srgb_to_linear(c[i])))
                    .collect()
            }
            None => vec![[0.5; 3]; w * h],
        };
        Self::new(w, hs, albedo, None)
    }

    pub fn with_roughness(mut self, roughness: Vec<f64>) -> Result<Self> {
        let n = self.resolution * self.resolution;
        if roughness.len() != n || roughness.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::InvalidArgument("roughness must lie in (0, 1]".into()));
        }
        self.roughness = Some(roughness);
        Ok(self)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn min_height(&self) -> f64 {
        self.min_height
    }

    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    pub fn is_flat(&self) -> bool {
        self.min_height == self.max_height
    }

    #[inline]
    fn texel_index(&self, u: f64, v: f64) -> usize {
        let n = self.resolution;
        let i = ((u - u.floor()) * n as f64) as usize;
        let j = ((v - v.floor()) * n as f64) as usize;
        j.min(n - 1) * n + i.min(n - 1)
    }

    /// Bilinear, wrap-around height.
    #[inline]
    pub fn height(&self, u: f64, v: f64) -> f64 {
        if self.is_flat() {
            return self.min_height;
        }
        let n = self.resolution;
        let x = u * n as f64 - 0.5;
        let y = v * n as f64 - 0.5;
        let (xf, yf) = (x.floor(), y.floor());
        let (fx, fy) = (x - xf, y - yf);
        let ni = n as i64;
        let x0 = (xf as i64).rem_euclid(ni) as usize;
        let y0 = (yf as i64).rem_euclid(ni) as usize;
        let x1 = (x0 + 1) % n;
        let y1 = (y0 + 1) % n;
        let h = &self.heights;
        let a = h[y0 * n + x0] + (h[y0 * n + x1] - h[y0 * n + x0]) * fx;
        let b = h[y1 * n + x0] + (h[y1 * n + x1] - h[y1 * n + x0]) * fx;
        a + (b - a) * fy
    }

    /// Nearest-texel albedo.
    #[inline]
    pub fn albedo(&self, u: f64, v: f64) -> [f64; 3] {
        self.albedo[self.texel_index(u, v)]
    }

    #[inline]
    pub fn roughness(&self, u: f64, v: f64) -> Option<f64> {
        self.roughness.as_ref().map(|r| r[self.texel_index(u, v)])
    }

    /// Mean albedo over the tile.
    pub fn mean_albedo(&self) -> [f64; 3] {
        let n = self.albedo.len() as f64;
        let mut m = [0.0; 3];
        for a in &self.albedo {
            for c in 0..3 {
                m[c] += a[c] / n;
            }
        }
        m
    }

    /// Unit normal from central differences of the height, one texel apart.
    pub fn normal(&self, u: f64, v: f64) -> [f64; 3] {
        if self.is_flat() {
            return [0.0, 0.0, 1.0];
        }
        let e = 1.0 / self.resolution as f64;
        let dhdu = (self.height(u + e, v) - self.height(u - e, v)) / (2.0 * e);
        let dhdv = (self.height(u, v + e) - self.height(u, v - e)) / (2.0 * e);
        let len = (dhdu * dhdu + dhdv * dhdv + 1.0).sqrt();
        [-dhdu / len, -dhdv / len, 1.0 / len]
    }
}
