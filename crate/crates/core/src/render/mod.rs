//! CPU renderer for a single textured plane.
//!
//! Every pixel sample intersects the plane, turns the hit into a material
//! query (position, footprint radius, light and view directions in the
//! plane's tangent frame) and pushes it into a per-row query buffer. Full
//! buffers are shaded in one batch and scattered back to their pixels in
//! submission order, so the batch size never changes the result.

pub mod scene;

use rand::Rng;
use rayon::prelude::*;

use crate::datagen::{record_rng, Heightfield, OracleOptions};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::material::{sample_outgoing, MbtfMaterial, Query};
use crate::offset::Direction;
use crate::pyramid::KernelSize;
use crate::scalar::Real;
use crate::texture::Uv;

pub use scene::{Camera, Light, Plane, PlaneHit, Scene, Vec3};
use scene::{add_scaled, dot, normalize, sub};

/// Ratio between the footprint's Gaussian std-dev and the pixel extent.
pub const FOOTPRINT_SCALE: f64 = 0.5;
pub const DEFAULT_BATCH: usize = 4096;

/// One material query with everything a shader needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadeQuery {
    pub uv: [f64; 2],
    pub sigma: f64,
    /// Light and view directions in the plane's tangent frame.
    pub wi: Vec3,
    pub wo: Vec3,
    /// Unique per query; shaders that need randomness seed from it.
    pub stream: u64,
}

/// Maps queries to reflectance under unit irradiance.
pub trait Shader: Sync {
    fn shade(&self, queries: &[ShadeQuery], out: &mut Vec<[f64; 3]>);
}

pub struct MaterialShader<'a, T> {
    pub material: &'a MbtfMaterial<T>,
}

impl<T: Real> MaterialShader<'_, T> {
    fn query(q: &ShadeQuery) -> Query<T> {
        let dir = |v: Vec3| Direction::from_vector(v.map(T::cst)).unwrap_or_else(|_| Direction::normal());
        Query {
            p: Uv::new(T::cst(q.uv[0]), T::cst(q.uv[1])),
            sigma: T::cst(q.sigma),
            wi: dir(q.wi),
            wo: dir(q.wo),
        }
    }
}

impl<T: Real> Shader for MaterialShader<'_, T> {
    fn shade(&self, queries: &[ShadeQuery], out: &mut Vec<[f64; 3]>) {
        let qs: Vec<Query<T>> = queries.iter().map(Self::query).collect();
        let mut vals = Vec::with_capacity(qs.len());
        self.material.eval_batch(&qs, &mut vals);
        out.clear();
        out.extend(vals.iter().map(|v| v.map(|c| c.as_f64())));
    }
}

/// Shades with the heightfield reference instead of a trained material.
pub struct OracleShader<'a> {
    pub heightfield: &'a Heightfield,
    pub samples: usize,
    pub options: OracleOptions,
    pub seed: u64,
}

impl Shader for OracleShader<'_> {
    fn shade(&self, queries: &[ShadeQuery], out: &mut Vec<[f64; 3]>) {
        out.clear();
        out.extend(queries.iter().map(|q| {
            let mut rng = record_rng(self.seed, q.stream);
            self.heightfield.mbtf_oracle(
                Uv::new(q.uv[0], q.uv[1]),
                q.sigma,
                q.wi,
                q.wo,
                self.samples,
                &self.options,
                &mut rng,
            )
        }));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Queries shaded per batch; 1 evaluates every query on its own.
    pub batch_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
        }
    }
}

/// Unclamped footprint std-dev in tile units around continuous pixel
/// position `(x, y)`, from rays offset by one pixel in x and in y. An
/// offset ray that misses the plane falls back to the analytic derivative
/// of the plane projection. `None` when the ray at `(x, y)` misses.
pub fn footprint_sigma_at(scene: &Scene, x: f64, y: f64) -> Option<f64> {
    let cam = &scene.camera;
    let plane = &scene.plane;
    let d0 = cam.ray_dir(x, y);
    let h0 = plane.intersect_unbounded(cam.position, d0)?;
    let n = plane.normal();
    let mut extent: f64 = 0.0;
    for (dx, dy) in [(1.0, 0.0), (0.0, 1.0)] {
        let d1 = cam.ray_dir(x + dx, y + dy);
        let dab = match plane.intersect_unbounded(cam.position, d1) {
            Some(h1) => [h1.ab[0] - h0.ab[0], h1.ab[1] - h0.ab[1]],
            None => {
                let dd = sub(d1, d0);
                let k = dot(n, dd) / dot(n, d0);
                let dp = add_scaled(dd, d0, -k).map(|c| c * h0.t);
                let a = plane.coords(add_scaled(plane.origin, dp, 1.0));
                let b = plane.coords(plane.origin);
                [a[0] - b[0], a[1] - b[1]]
            }
        };
        extent = extent.max((dab[0] * dab[0] + dab[1] * dab[1]).sqrt());
    }
    Some(FOOTPRINT_SCALE * extent * plane.tiling)
}

/// Footprint of pixel `(px, py)` clamped to the range of a `k`-level pyramid.
pub fn pixel_footprint_sigma(scene: &Scene, px: usize, py: usize, k: usize) -> Option<KernelSize<f64>> {
    let s = footprint_sigma_at(scene, px as f64 + 0.5, py as f64 + 0.5)?;
    KernelSize::clamped(s, k).ok()
}

struct RowBuffer {
    queries: Vec<ShadeQuery>,
    owners: Vec<(usize, Vec3)>,
    values: Vec<[f64; 3]>,
}

impl RowBuffer {
    fn drain<S: Shader>(&mut self, shader: &S, sums: &mut [Vec3]) {
        if self.queries.is_empty() {
            return;
        }
        shader.shade(&self.queries, &mut self.values);
        for (&(x, w), v) in self.owners.iter().zip(&self.values) {
            for c in 0..3 {
                sums[x][c] += w[c] * v[c];
            }
        }
        self.queries.clear();
        self.owners.clear();
    }
}

/// Renders `scene` with any shader over a pyramid with `k` levels.
pub fn render_with<S: Shader>(scene: &Scene, k: usize, shader: &S, opts: &RenderOptions) -> Result<Image> {
    scene.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let (w, h) = (scene.camera.width, scene.camera.height);
    let spp = scene.spp;
    let wi = normalize(scene.plane.to_local(normalize(scene.light.direction)));
    let ambient = scene.light.ambient;
    let bounce = scene.indirect && ambient.iter().any(|&a| a > 0.0);
    let rows: Vec<Vec<[f32; 3]>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut buf = RowBuffer {
                queries: Vec::with_capacity(opts.batch_size),
                owners: Vec::with_capacity(opts.batch_size),
                values: Vec::new(),
            };
            let mut sums = vec![[0.0; 3]; w];
            for px in 0..w {
                let pixel = (py * w + px) as u64;
                let mut rng = record_rng(scene.seed, pixel);
                let center_sigma = pixel_footprint_sigma(scene, px, py, k);
                for s in 0..spp {
                    let (jx, jy) = if spp == 1 {
                        (0.5, 0.5)
                    } else {
                        (rng.random::<f64>(), rng.random::<f64>())
                    };
                    let (x, y) = (px as f64 + jx, py as f64 + jy);
                    let dir = scene.camera.ray_dir(x, y);
                    let Some(hit) = scene.plane.intersect(scene.camera.position, dir) else {
                        continue;
                    };
                    let sigma = match center_sigma {
                        Some(s) => s.get(),
                        None => footprint_sigma_at(scene, x, y)
                            .and_then(|s| KernelSize::clamped(s, k).ok())
                            .map_or(1.0, |s| s.get()),
                    };
                    let wo = normalize(scene.plane.to_local(dir.map(|c| -c)));
                    let uv = hit.ab.map(|c| c * scene.plane.tiling);
                    let stream = (pixel * spp as u64 + s as u64) * 2;
                    buf.queries.push(ShadeQuery {
                        uv,
                        sigma,
                        wi,
                        wo,
                        stream,
                    });
                    buf.owners.push((px, scene.light.irradiance));
                    if bounce {
                        // cosine-sampled sky bounce: eval * L * cos / pdf
                        let (d, pdf) = sample_outgoing::<f64, _>(&mut rng);
                        let weight = ambient.map(|a| a * d.z() / pdf);
                        buf.queries.push(ShadeQuery {
                            uv,
                            sigma,
                            wi: d.to_vector(),
                            wo,
                            stream: stream + 1,
                        });
                        buf.owners.push((px, weight));
                    }
                    if buf.queries.len() >= opts.batch_size {
                        buf.drain(shader, &mut sums);
                    }
                }
            }
            buf.drain(shader, &mut sums);
            sums.iter().map(|s| s.map(|c| (c / spp as f64) as f32)).collect()
        })
        .collect();
    Image::from_pixels(w, h, rows.into_iter().flatten().collect())
}

/// Renders with a trained material.
pub fn render<T: Real>(scene: &Scene, material: &MbtfMaterial<T>, opts: &RenderOptions) -> Result<Image> {
    render_with(scene, material.shape().k, &MaterialShader { material }, opts)
}

/// Ground-truth render that shades each query with `samples` oracle
/// samples of the heightfield, using the same footprints as [`render`].
pub fn render_reference(
    scene: &Scene,
    heightfield: &Heightfield,
    k: usize,
    samples: usize,
    options: OracleOptions,
    opts: &RenderOptions,
) -> Result<Image> {
    let shader = OracleShader {
        heightfield,
        samples,
        options,
        seed: scene.seed,
    };
    render_with(scene, k, &shader, opts)
}

/// Learned UV offset at every texel of a `resolution`² grid for view `wo`,
/// coloured as `0.5 + scale * delta` in red (u) and green (v). `None` for
/// materials without an offset module.
pub fn offset_visualization<T: Real>(
    material: &MbtfMaterial<T>,
    wo: Direction<T>,
    scale: f64,
    resolution: usize,
) -> Option<Image> {
    let offset = material.offset()?;
    let mut img = Image::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let p = Uv::new(
                T::cst((x as f64 + 0.5) / resolution as f64),
                T::cst((y as f64 + 0.5) / resolution as f64),
            );
            let q = offset.apply_offset(p, wo);
            let du = (q.u - p.u).as_f64();
            let dv = (q.v - p.v).as_f64();
            // image rows run top to bottom, v runs bottom to top
            img.set(
                x,
                resolution - 1 - y,
                [(0.5 + scale * du) as f32, (0.5 + scale * dv) as f32, 0.0],
            );
        }
    }
    Some(img)
}
