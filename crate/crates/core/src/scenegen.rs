//! Procedural multi-view scenes rendered by analytic ray casting.

use noise::{NoiseFn, Perlin};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{quantize, Image, SceneDataset, Split, View};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3] },
    /// Square patch of side `2 * half_size` through `center`.
    Plane { center: [f64; 3], normal: [f64; 3], half_size: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    Solid,
    /// 3D checkerboard with cells of side `1 / frequency`.
    Checker { frequency: f64 },
    Perlin { frequency: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Primary color; patterned textures blend toward `albedo2`.
    pub albedo: [f64; 3],
    #[serde(default)]
    pub albedo2: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
    pub test_views: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Direction towards the light.
    pub light: [f64; 3],
    pub ambient: f64,
    #[serde(default)]
    pub background: [f64; 3],
    pub camera_ring: CameraRing,
    pub resolution: (usize, usize),
    pub near: f64,
    pub far: f64,
    pub seed: u64,
}

pub const PRESETS: [&str; 2] = ["plane+sphere", "micro"];

impl SceneSpec {
    /// Textured ground patch with a checkered sphere, ten cameras on a ring.
    pub fn plane_sphere(seed: u64) -> Self {
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Plane {
                        center: [0.0, 0.0, 0.0],
                        normal: [0.0, 0.0, 1.0],
                        half_size: 1.8,
                    },
                    texture: Texture::Perlin { frequency: 2.5 },
                    albedo: [0.85, 0.7, 0.35],
                    albedo2: [0.15, 0.35, 0.6],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, 0.7],
                        radius: 0.7,
                    },
                    texture: Texture::Checker { frequency: 3.0 },
                    albedo: [0.9, 0.2, 0.2],
                    albedo2: [0.95, 0.95, 0.9],
                },
            ],
            light: [0.4, -0.3, 0.85],
            ambient: 0.3,
            background: [0.0, 0.0, 0.0],
            camera_ring: CameraRing {
                count: 10,
                radius: 4.5,
                height: 2.5,
                look_at: [0.0, 0.0, 0.3],
                fov_deg: 45.0,
                test_views: vec![2, 7],
            },
            resolution: (64, 64),
            near: 2.0,
            far: 8.0,
            seed,
        }
    }

    /// The default scene at 32×32.
    pub fn micro(seed: u64) -> Self {
        Self {
            resolution: (32, 32),
            ..Self::plane_sphere(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "plane+sphere" | "plane-sphere" => Ok(Self::plane_sphere(seed)),
            "micro" => Ok(Self::micro(seed)),
            _ => Err(Error::invalid(format!("unknown scene preset '{name}' (known: {})", PRESETS.join(", ")))),
        }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let ring = &self.camera_ring;
        if ring.count < 3 {
            return Err(Error::invalid(format!("camera ring needs at least 3 cameras, got {}", ring.count)));
        }
        let (w, h) = self.resolution;
        let f = 0.5 * w as f64 / (0.5 * ring.fov_deg.to_radians()).tan();
        let k = Camera::intrinsics(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let target = Vec3::from(ring.look_at);
        (0..ring.count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / ring.count as f64;
                let eye = Vec3::new(ring.radius * a.cos(), ring.radius * a.sin(), ring.height);
                Camera::look_at(eye, target, Vec3::z(), k, w, h, self.near, self.far)
            })
            .collect()
    }
}

struct Hit {
    dist: f64,
    point: Vec3,
    normal: Vec3,
    prim: usize,
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    perlin: Perlin,
    light: Vec3,
}

impl Scene<'_> {
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            if let Some((dist, normal)) = intersect_shape(&p.shape, origin, dir) {
                if best.as_ref().is_none_or(|b| dist < b.dist) {
                    best = Some(Hit {
                        dist,
                        point: origin + dir * dist,
                        normal,
                        prim: i,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, dir: &Vec3) -> Vec3 {
        let prim = &self.spec.primitives[hit.prim];
        let local = hit.point - shape_center(&prim.shape);
        let t = match prim.texture {
            Texture::Solid => 0.0,
            Texture::Checker { frequency } => {
                let c = local * frequency;
                let parity = (c.x.floor() + c.y.floor() + c.z.floor()) as i64;
                parity.rem_euclid(2) as f64
            }
            Texture::Perlin { frequency } => {
                let p = local * frequency;
                let n = self.perlin.get([p.x, p.y, p.z]) + 0.5 * self.perlin.get([2.0 * p.x, 2.0 * p.y, 2.0 * p.z]);
                (0.5 + 0.8 * n).clamp(0.0, 1.0)
            }
        };
        let albedo = Vec3::from(prim.albedo) * (1.0 - t) + Vec3::from(prim.albedo2) * t;
        // Shade the side facing the viewer.
        let n = if hit.normal.dot(dir) > 0.0 { -hit.normal } else { hit.normal };
        let amb = self.spec.ambient;
        albedo * (amb + (1.0 - amb) * n.dot(&self.light).max(0.0))
    }
}

fn shape_center(s: &Shape) -> Vec3 {
    match s {
        Shape::Sphere { center, .. } | Shape::Box { center, .. } | Shape::Plane { center, .. } => Vec3::from(*center),
    }
}

fn intersect_shape(s: &Shape, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    const EPS: f64 = 1e-9;
    match s {
        Shape::Sphere { center, radius } => {
            let c = Vec3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > EPS)?;
            Some((t, (o + d * t - c) / *radius))
        }
        Shape::Box { center, half_extents } => {
            let c = Vec3::from(*center);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
            for a in 0..3 {
                let lo = c[a] - half_extents[a];
                let hi = c[a] + half_extents[a];
                if d[a].abs() < 1e-15 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                let mut na = Vec3::zeros();
                na[a] = -1.0;
                let mut nb = -na;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    std::mem::swap(&mut na, &mut nb);
                }
                if ta > t0 {
                    t0 = ta;
                    n0 = na;
                }
                if tb < t1 {
                    t1 = tb;
                    n1 = nb;
                }
            }
            if t0 > t1 {
                return None;
            }
            if t0 > EPS {
                Some((t0, n0))
            } else if t1 > EPS {
                Some((t1, n1))
            } else {
                None
            }
        }
        Shape::Plane { center, normal, half_size } => {
            let c = Vec3::from(*center);
            let n = Vec3::from(*normal).normalize();
            let denom = n.dot(d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = n.dot(&(c - o)) / denom;
            if t <= EPS {
                return None;
            }
            let (e1, e2) = tangent_basis(&n);
            let rel = o + d * t - c;
            if rel.dot(&e1).abs() > *half_size || rel.dot(&e2).abs() > *half_size {
                return None;
            }
            Some((t, n))
        }
    }
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let e1 = helper.cross(n).normalize();
    (e1, n.cross(&e1))
}

fn contains(s: &Shape, p: &Vec3) -> bool {
    match s {
        Shape::Sphere { center, radius } => (p - Vec3::from(*center)).norm() < *radius,
        Shape::Box { center, half_extents } => (0..3).all(|a| (p[a] - center[a]).abs() < half_extents[a]),
        Shape::Plane { .. } => false,
    }
}

/// Renders every camera of the ring. Colors are averaged over a 2×2 grid of
/// sub-pixel rays and quantized to 8 bits; depth comes from the center ray.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneDataset> {
    if !(spec.near > 0.0 && spec.near < spec.far) {
        return Err(Error::invalid("scene requires 0 < near < far"));
    }
    let cameras = spec.cameras()?;
    for (i, cam) in cameras.iter().enumerate() {
        let c = cam.center();
        if let Some(p) = spec.primitives.iter().position(|p| contains(&p.shape, &c)) {
            return Err(Error::DegenerateScene(format!("camera {i} is inside primitive {p}")));
        }
    }
    let light = Vec3::from(spec.light)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::invalid("light direction must be nonzero"))?;
    let scene = Scene {
        spec,
        perlin: Perlin::new(spec.seed as u32 ^ (spec.seed >> 32) as u32),
        light,
    };
    let bg = Vec3::from(spec.background);
    let mut views = Vec::with_capacity(cameras.len());
    for (id, cam) in cameras.into_iter().enumerate() {
        let (w, h) = (cam.width, cam.height);
        let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rgb = Vec::with_capacity(3 * w);
                let mut depth = Vec::with_capacity(w);
                for x in 0..w {
                    let mut acc = Vec3::zeros();
                    for (dx, dy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                        let ray = cam.ray_for_pixel(x as f64 + dx, y as f64 + dy);
                        acc += match scene.intersect(&ray.origin, &ray.dir) {
                            Some(hit) => scene.shade(&hit, &ray.dir),
                            None => bg,
                        };
                    }
                    acc /= 4.0;
                    rgb.extend(acc.iter().map(|&v| quantize(v as f32) as f32 / 255.0));
                    let ray = cam.ray_for_pixel(x as f64, y as f64);
                    depth.push(match scene.intersect(&ray.origin, &ray.dir) {
                        Some(hit) => cam.project(&hit.point).depth as f32,
                        None => 0.0,
                    });
                }
                (rgb, depth)
            })
            .collect();
        let mut image = Image::new(w, h);
        let mut depth = Vec::with_capacity(w * h);
        for (y, (rgb, d)) in rows.into_iter().enumerate() {
            image.data[3 * w * y..3 * w * (y + 1)].copy_from_slice(&rgb);
            depth.extend(d);
        }
        if let Some(&z) = depth
            .iter()
            .find(|&&z| z != 0.0 && (f64::from(z) < spec.near || f64::from(z) > spec.far))
        {
            return Err(Error::DegenerateScene(format!(
                "view {id}: surface at depth {z} outside [{}, {}]",
                spec.near, spec.far
            )));
        }
        let split = if spec.camera_ring.test_views.contains(&id) {
            Split::Test
        } else {
            Split::Train
        };
        views.push(View {
            id,
            image,
            camera: cam,
            depth,
            split,
        });
    }
    Ok(SceneDataset {
        views,
        near: spec.near,
        far: spec.far,
    })
}
