//! Scene description: a pinhole camera looking at one textured plane lit by
//! a distant light.
//!
//! Scenes are stored as flat `key = value` text files. Vectors are written
//! as three numbers separated by spaces or commas, `#` starts a comment.
//!
//! | key | default |
//! |---|---|
//! | `camera.position`, `camera.look_at` | required |
//! | `camera.up` | `0 0 1` |
//! | `camera.vfov` (degrees) | `40` |
//! | `camera.width`, `camera.height` | `256` |
//! | `plane.origin` | `0 0 0` |
//! | `plane.u`, `plane.v` | `1 0 0`, `0 1 0` |
//! | `plane.tiling` | `1` |
//! | `plane.extent` (plane units, 0 = infinite) | `0` |
//! | `light.direction` (towards the light) | required |
//! | `light.irradiance` | `1 1 1` |
//! | `light.ambient` (sky radiance for the indirect bounce) | `0 0 0` |
//! | `material` | none |
//! | `spp`, `seed` | `1`, `0` |
//! | `indirect` | `false` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

#[inline]
pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub vfov: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub origin: Vec3,
    /// World-space vector spanning one plane unit along u.
    pub u: Vec3,
    pub v: Vec3,
    /// Material tiles per plane unit.
    pub tiling: f64,
    /// Side of the quad in plane units; 0 for an unbounded plane.
    pub extent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Light {
    /// Direction towards the light.
    pub direction: Vec3,
    /// Irradiance delivered onto the reference plane.
    pub irradiance: Vec3,
    /// Uniform sky radiance seen by the indirect bounce.
    pub ambient: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub plane: Plane,
    pub light: Light,
    pub material: Option<PathBuf>,
    pub spp: usize,
    pub seed: u64,
    pub indirect: bool,
}

/// Primary-ray intersection with the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneHit {
    pub t: f64,
    pub position: Vec3,
    /// Plane coordinates, before tiling.
    pub ab: [f64; 2],
}

impl Plane {
    pub fn normal(&self) -> Vec3 {
        normalize(cross(self.u, self.v))
    }

    /// Orthonormal tangent frame `(t, b, n)` with `t` along `u`.
    pub fn frame(&self) -> [Vec3; 3] {
        let n = self.normal();
        let t = normalize(self.u);
        [t, cross(n, t), n]
    }

    pub fn to_local(&self, d: Vec3) -> Vec3 {
        let [t, b, n] = self.frame();
        [dot(d, t), dot(d, b), dot(d, n)]
    }

    /// Plane coordinates of a point lying on the plane.
    pub fn coords(&self, p: Vec3) -> [f64; 2] {
        let d = sub(p, self.origin);
        let (uu, uv, vv) = (dot(self.u, self.u), dot(self.u, self.v), dot(self.v, self.v));
        let (du, dv) = (dot(d, self.u), dot(d, self.v));
        let det = uu * vv - uv * uv;
        [(du * vv - dv * uv) / det, (dv * uu - du * uv) / det]
    }

    /// Ray intersection ignoring the extent.
    pub fn intersect_unbounded(&self, origin: Vec3, dir: Vec3) -> Option<PlaneHit> {
        let n = self.normal();
        let denom = dot(dir, n);
        if denom.abs() < 1e-300 {
            return None;
        }
        let t = dot(sub(self.origin, origin), n) / denom;
        if !(t > 0.0) || !t.is_finite() {
            return None;
        }
        let position = add_scaled(origin, dir, t);
        Some(PlaneHit {
            t,
            position,
            ab: self.coords(position),
        })
    }

    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<PlaneHit> {
        let hit = self.intersect_unbounded(origin, dir)?;
        if self.extent > 0.0 && !hit.ab.iter().all(|&c| (0.0..=self.extent).contains(&c)) {
            return None;
        }
        Some(hit)
    }
}

impl Camera {
    /// Unnormalized direction through continuous pixel position `(x, y)`,
    /// measured from the top-left image corner.
    pub fn ray_dir(&self, x: f64, y: f64) -> Vec3 {
        let f = normalize(sub(self.look_at, self.position));
        let r = normalize(cross(f, self.up));
        let up = cross(r, f);
        let tan = (self.vfov.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let sx = (2.0 * x / self.width as f64 - 1.0) * tan * aspect;
        let sy = (1.0 - 2.0 * y / self.height as f64) * tan;
        [f[0] + sx * r[0] + sy * up[0], f[1] + sx * r[1] + sy * up[1], f[2] + sx * r[2] + sy * up[2]]
    }
}

impl Default for Scene {
    /// Unit plane seen from 45 degrees, light from straight above.
    fn default() -> Self {
        Self {
            camera: Camera {
                position: [0.5, -1.0, 1.5],
                look_at: [0.5, 0.5, 0.0],
                up: [0.0, 0.0, 1.0],
                vfov: 40.0,
                width: 256,
                height: 256,
            },
            plane: Plane {
                origin: [0.0; 3],
                u: [1.0, 0.0, 0.0],
                v: [0.0, 1.0, 0.0],
                tiling: 1.0,
                extent: 0.0,
            },
            light: Light {
                direction: [0.0, 0.0, 1.0],
                irradiance: [1.0; 3],
                ambient: [0.0; 3],
            },
            material: None,
            spp: 1,
            seed: 0,
            indirect: false,
        }
    }
}

fn scene_err(line: usize, message: impl Into<String>) -> Error {
    Error::Scene {
        line,
        message: message.into(),
    }
}

fn parse_vec3(line: usize, s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| scene_err(line, format!("bad number `{p}`"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [x] => Ok([x; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(scene_err(line, format!("expected 3 numbers, got `{s}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| scene_err(line, format!("bad value `{s}`")))
}

fn fmt_vec(v: Vec3) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

impl Scene {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Scene::default();
        let mut seen_position = false;
        let mut seen_look_at = false;
        let mut seen_light = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(scene_err(line, "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "camera.position" => {
                    s.camera.position = parse_vec3(line, value)?;
                    seen_position = true;
                }
                "camera.look_at" => {
                    s.camera.look_at = parse_vec3(line, value)?;
                    seen_look_at = true;
                }
                "camera.up" => s.camera.up = parse_vec3(line, value)?,
                "camera.vfov" => s.camera.vfov = parse_num(line, value)?,
                "camera.width" => s.camera.width = parse_num(line, value)?,
                "camera.height" => s.camera.height = parse_num(line, value)?,
                "plane.origin" => s.plane.origin = parse_vec3(line, value)?,
                "plane.u" => s.plane.u = parse_vec3(line, value)?,
                "plane.v" => s.plane.v = parse_vec3(line, value)?,
                "plane.tiling" => s.plane.tiling = parse_num(line, value)?,
                "plane.extent" => s.plane.extent = parse_num(line, value)?,
                "light.direction" => {
                    s.light.direction = parse_vec3(line, value)?;
                    seen_light = true;
                }
                "light.irradiance" => s.light.irradiance = parse_vec3(line, value)?,
                "light.ambient" => s.light.ambient = parse_vec3(line, value)?,
                "material" => s.material = Some(PathBuf::from(value)),
                "spp" => s.spp = parse_num(line, value)?,
                "seed" => s.seed = parse_num(line, value)?,
                "indirect" => s.indirect = parse_num(line, value)?,
                _ => return Err(scene_err(line, format!("unknown key `{key}`"))),
            }
        }
        for (seen, key) in [
            (seen_position, "camera.position"),
            (seen_look_at, "camera.look_at"),
            (seen_light, "light.direction"),
        ] {
            if !seen {
                return Err(scene_err(0, format!("missing required key `{key}`")));
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Reads a scene; a relative `material` path is resolved against the
    /// scene file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::parse(&text)?;
        if let (Some(m), Some(dir)) = (&s.material, path.parent()) {
            if m.is_relative() {
                s.material = Some(dir.join(m));
            }
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.camera;
        let p = &self.plane;
        let l = &self.light;
        let _ = writeln!(out, "camera.position = {}", fmt_vec(c.position));
        let _ = writeln!(out, "camera.look_at = {}", fmt_vec(c.look_at));
        let _ = writeln!(out, "camera.up = {}", fmt_vec(c.up));
        let _ = writeln!(out, "camera.vfov = {}", c.vfov);
        let _ = writeln!(out, "camera.width = {}", c.width);
        let _ = writeln!(out, "camera.height = {}", c.height);
        let _ = writeln!(out, "plane.origin = {}", fmt_vec(p.origin));
        let _ = writeln!(out, "plane.u = {}", fmt_vec(p.u));
        let _ = writeln!(out, "plane.v = {}", fmt_vec(p.v));
        let _ = writeln!(out, "plane.tiling = {}", p.tiling);
        let _ = writeln!(out, "plane.extent = {}", p.extent);
        let _ = writeln!(out, "light.direction = {}", fmt_vec(l.direction));
        let _ = writeln!(out, "light.irradiance = {}", fmt_vec(l.irradiance));
        let _ = writeln!(out, "light.ambient = {}", fmt_vec(l.ambient));
        if let Some(m) = &self.material {
            let _ = writeln!(out, "material = {}", m.display());
        }
        let _ = writeln!(out, "spp = {}", self.spp);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "indirect = {}", self.indirect);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(scene_err(0, m));
        let c = &self.camera;
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        let all = [
            c.position,
            c.look_at,
            c.up,
            self.plane.origin,
            self.plane.u,
            self.plane.v,
            self.light.direction,
            self.light.irradiance,
            self.light.ambient,
        ];
        if !all.iter().all(finite) {
            return bad("non-finite vector");
        }
        if c.width == 0 || c.height == 0 {
            return bad("image size must be positive");
        }
        if !(c.vfov > 0.0 && c.vfov < 180.0) {
            return bad("camera.vfov must be in (0, 180)");
        }
        let f = sub(c.look_at, c.position);
        if dot(f, f) == 0.0 || dot(cross(f, c.up), cross(f, c.up)) == 0.0 {
            return bad("camera looks along its up vector or at itself");
        }
        let n = cross(self.plane.u, self.plane.v);
        if dot(n, n) == 0.0 {
            return bad("plane.u and plane.v are parallel");
        }
        if dot(sub(c.position, self.plane.origin), n) <= 0.0 {
            return bad("camera is not above the plane");
        }
        if dot(self.light.direction, n) <= 0.0 {
            return bad("light is not in the upper hemisphere of the plane");
        }
        if self.light.irradiance.iter().chain(&self.light.ambient).any(|&x| x < 0.0) {
            return bad("light values must be non-negative");
        }
        if !(self.plane.tiling > 0.0 && self.plane.tiling.is_finite()) {
            return bad("plane.tiling must be positive");
        }
        if !(self.plane.extent >= 0.0) {
            return bad("plane.extent must be non-negative");
        }
        if self.spp == 0 {
            return bad("spp must be at least 1");
        }
        Ok(())
    }

    /// Same scene with the camera moved `factor` times further from its
    /// look-at point.
    pub fn with_camera_distance_scale(&self, factor: f64) -> Self {
        let mut s = self.clone();
        let d = sub(s.camera.position, s.camera.look_at);
        s.camera.position = add_scaled(s.camera.look_at, d, factor);
        s
    }
}
