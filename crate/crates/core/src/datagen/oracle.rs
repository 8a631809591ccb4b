//! Reference reflectance of heightfield microgeometry.
//!
//! A camera ray arrives from direction `wo` aimed at surface position `p`
//! on the reference plane, is marched against the heightfield and shaded
//! with a distant light from `wi` that delivers unit irradiance onto the
//! reference plane. A flat Lambertian heightfield therefore returns exactly
//! `albedo / pi`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::heightfield::Heightfield;
use crate::texture::Uv;

/// Fixed march step, in heightfield texels.
pub const MARCH_STEP_TEXELS: f64 = 0.25;
/// Bisection refinements after the surface is crossed.
pub const BISECTION_STEPS: usize = 8;
/// Default half-angle of the smoothed distant light.
pub const DEFAULT_LIGHT_CONE_DEG: f64 = 5.0;
/// Default Monte Carlo samples per footprint query.
pub const DEFAULT_SAMPLES: usize = 64;

/// Smallest `z` used for a ray direction; keeps grazing marches finite.
const MIN_DIR_Z: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    /// Half-angle of the light cone in degrees; 0 disables jitter.
    pub light_cone_deg: f64,
    /// Adds one cosine-sampled interreflection bounce.
    pub indirect: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            light_cone_deg: DEFAULT_LIGHT_CONE_DEG,
            indirect: false,
        }
    }
}

impl OracleOptions {
    /// Direct light only, no light jitter.
    pub fn exact() -> Self {
        Self {
            light_cone_deg: 0.0,
            indirect: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Hit position wrapped into the tile.
    pub uv: Uv<f64>,
    pub height: f64,
    pub normal: [f64; 3],
    /// Unwrapped 3D position.
    pub position: [f64; 3],
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn normalize(a: [f64; 3]) -> [f64; 3] {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Orthonormal tangents for a unit vector.
pub(crate) fn basis(n: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let sign = 1f64.copysign(n[2]);
    let a = -1.0 / (sign + n[2]);
    let b = n[0] * n[1] * a;
    (
        [1.0 + sign * n[0] * n[0] * a, sign * b, -sign * n[0]],
        [b, sign + n[1] * n[1] * a, -n[1]],
    )
}

fn to_world(local: [f64; 3], n: [f64; 3]) -> [f64; 3] {
    let (t, b) = basis(n);
    [0, 1, 2].map(|i| t[i] * local[0] + b[i] * local[1] + n[i] * local[2])
}

impl Heightfield {
    /// `z - h(x, y)` along the ray.
    #[inline]
    fn gap(&self, o: [f64; 3], d: [f64; 3], t: f64) -> f64 {
        o[2] + d[2] * t - self.height(o[0] + d[0] * t, o[1] + d[1] * t)
    }

    fn step_len(&self, d: [f64; 3]) -> f64 {
        let dxy = (d[0] * d[0] + d[1] * d[1]).sqrt();
        MARCH_STEP_TEXELS / self.resolution() as f64 / dxy.max(d[2].abs())
    }

    /// Marches from `o` along `d` starting at parameter `t0`; returns the
    /// parameter where the ray first passes below the surface. Rising rays
    /// that clear the highest point return `None`.
    fn march(&self, o: [f64; 3], d: [f64; 3], t0: f64) -> Option<f64> {
        let dt = self.step_len(d);
        let mut t_prev = t0;
        if self.gap(o, d, t0) <= 0.0 {
            return Some(t0);
        }
        let mut t = t0;
        loop {
            t += dt;
            let z = o[2] + d[2] * t;
            let g = self.gap(o, d, t);
            if g < 0.0 {
                let (mut lo, mut hi) = (t_prev, t);
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if self.gap(o, d, mid) < 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            if d[2] >= 0.0 && z > self.max_height() {
                return None;
            }
            t_prev = t;
        }
    }

    fn hit_at(&self, o: [f64; 3], d: [f64; 3], t: f64) -> Hit {
        let pos = [o[0] + d[0] * t, o[1] + d[1] * t, o[2] + d[2] * t];
        let uv = Uv::new(pos[0], pos[1]).wrapped();
        Hit {
            uv,
            height: self.height(uv.u, uv.v),
            normal: self.normal(uv.u, uv.v),
            position: pos,
        }
    }

    /// Intersects a descending ray (`dir.z < 0`). Always hits: below the
    /// lowest point the ray is under the surface.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        if !(dir[2] < 0.0) {
            return None;
        }
        let d = normalize(dir);
        // skip the empty slab above the highest point
        let t0 = if origin[2] > self.max_height() {
            (self.max_height() - origin[2]) / d[2]
        } else {
            0.0
        };
        let t = self.march(origin, d, t0)?;
        Some(self.hit_at(origin, d, t))
    }

    /// Whether the upward ray from a surface point is blocked.
    pub fn occluded(&self, hit: &Hit, dir: [f64; 3]) -> bool {
        self.trace_up(hit, dir).is_some()
    }

    /// First surface hit of a ray leaving `hit` upward.
    fn trace_up(&self, hit: &Hit, dir: [f64; 3]) -> Option<Hit> {
        if dir[2] <= 0.0 {
            return Some(*hit);
        }
        let eps = 1e-3 / self.resolution() as f64;
        let o = [0, 1, 2].map(|i| hit.position[i] + hit.normal[i] * eps);
        let o = [o[0], o[1], o[2].max(self.height(o[0], o[1]) + eps * 1e-3)];
        let d = normalize(dir);
        let start = self.step_len(d) * 0.5;
        self.march(o, d, start).map(|t| self.hit_at(o, d, t))
    }

    /// Radiance toward the viewer from `hit`, lit by `light` (unit vector)
    /// carrying unit irradiance onto the reference plane.
    fn direct(&self, hit: &Hit, light: [f64; 3], view: [f64; 3]) -> [f64; 3] {
        if light[2] <= 0.0 {
            return [0.0; 3];
        }
        let cos_n = dot(hit.normal, light);
        if cos_n <= 0.0 || self.occluded(hit, light) {
            return [0.0; 3];
        }
        let e = cos_n / light[2];
        let a = self.albedo(hit.uv.u, hit.uv.v);
        let spec = self
            .roughness(hit.uv.u, hit.uv.v)
            .map_or(0.0, |alpha| ggx_specular(hit.normal, light, view, alpha));
        a.map(|c| (c * std::f64::consts::FRAC_1_PI + spec) * e)
    }

    /// One light sample: its reflectance and the irradiance the sampled
    /// light direction puts on the reference plane, used as its weight.
    fn light_sample<R: Rng + ?Sized>(
        &self,
        p: Uv<f64>,
        wi: [f64; 3],
        wo: [f64; 3],
        opts: &OracleOptions,
        rng: &mut R,
    ) -> ([f64; 3], f64) {
        let light = jitter_cone(normalize(wi), opts.light_cone_deg, rng);
        let irradiance = light[2].max(0.0);
        let wo = normalize([wo[0], wo[1], wo[2].max(MIN_DIR_Z)]);
        let lift = self.max_height().max(0.0) / wo[2];
        let origin = [p.u + wo[0] * lift, p.v + wo[1] * lift, wo[2] * lift];
        let dir = [-wo[0], -wo[1], -wo[2]];
        let Some(hit) = self.intersect(origin, dir) else {
            return ([0.0; 3], irradiance);
        };
        let mut l = self.direct(&hit, light, wo);
        if opts.indirect {
            // cosine-sampled bounce: f * L * cos / pdf = albedo * L
            let r = rng.random::<f64>().sqrt();
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            let local = [r * phi.cos(), r * phi.sin(), (1.0 - r * r).max(0.0).sqrt()];
            let bounce = to_world(local, hit.normal);
            if let Some(second) = self.trace_up(&hit, bounce) {
                if second.position != hit.position {
                    let back = [-bounce[0], -bounce[1], -bounce[2]];
                    let l2 = self.direct(&second, light, back);
                    let a = self.albedo(hit.uv.u, hit.uv.v);
                    for c in 0..3 {
                        l[c] += a[c] * l2[c];
                    }
                }
            }
        }
        (l, irradiance)
    }

    /// Single-point reflectance of the microgeometry seen at `p`.
    pub fn btf_eval_oracle<R: Rng + ?Sized>(
        &self,
        p: Uv<f64>,
        wi: [f64; 3],
        wo: [f64; 3],
        opts: &OracleOptions,
        rng: &mut R,
    ) -> [f64; 3] {
        self.light_sample(p, wi, wo, opts, rng).0
    }

    /// Gaussian-footprint average of [`btf_eval_oracle`](Self::btf_eval_oracle)
    /// over `n_samples` positions drawn around `p` with std-dev `sigma`.
    ///
    /// Samples are weighted by the irradiance of their jittered light, so the
    /// cone as a whole delivers unit irradiance and a direction just above
    /// the horizon cannot blow up the estimate.
    pub fn mbtf_oracle<R: Rng + ?Sized>(
        &self,
        p: Uv<f64>,
        sigma: f64,
        wi: [f64; 3],
        wo: [f64; 3],
        n_samples: usize,
        opts: &OracleOptions,
        rng: &mut R,
    ) -> [f64; 3] {
        // irradiance-weighted running mean: a constant integrand reproduces
        // its value exactly
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for _ in 0..n_samples.max(1) {
            let q = if sigma > 0.0 {
                let du: f64 = StandardNormal.sample(rng);
                let dv: f64 = StandardNormal.sample(rng);
                Uv::new(p.u + sigma * du, p.v + sigma * dv)
            } else {
                p
            };
            let (l, e) = self.light_sample(q, wi, wo, opts, rng);
            if e > 0.0 {
                total += e;
                for c in 0..3 {
                    acc[c] += e / total * (l[c] - acc[c]);
                }
            }
        }
        acc
    }
}

/// Uniform direction within a cone of half-angle `deg` around `axis`.
pub fn jitter_cone<R: Rng + ?Sized>(axis: [f64; 3], deg: f64, rng: &mut R) -> [f64; 3] {
    if deg <= 0.0 {
        return axis;
    }
    let cos_max = deg.to_radians().cos();
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_max);
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    to_world([sin_t * phi.cos(), sin_t * phi.sin(), cos_t], axis)
}

/// GGX microfacet specular (F0 = 0.04, Smith shadowing).
fn ggx_specular(n: [f64; 3], l: [f64; 3], v: [f64; 3], alpha: f64) -> f64 {
    let nl = dot(n, l);
    let nv = dot(n, v);
    if nl <= 0.0 || nv <= 0.0 {
        return 0.0;
    }
    let h = normalize([l[0] + v[0], l[1] + v[1], l[2] + v[2]]);
    let nh = dot(n, h).max(0.0);
    let a2 = alpha * alpha;
    let denom = nh * nh * (a2 - 1.0) + 1.0;
    let d = a2 / (std::f64::consts::PI * denom * denom);
    let g1 = |c: f64| 2.0 * c / (c + (a2 + (1.0 - a2) * c * c).sqrt());
    let f0 = 0.04;
    let f = f0 + (1.0 - f0) * (1.0 - dot(h, v).max(0.0)).powi(5);
    d * g1(nl) * g1(nv) * f / (4.0 * nl * nv)
}
