//! Ground-truth scenes: analytic SDF primitives shaded with discrete lights
//! (Lambertian plus a Schlick-weighted normalised Phong lobe) and sphere
//! traced into posed images and masks.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::mesh::{extract_function, TriMesh};
use crate::Vec3;

pub const HIT_EPSILON: f64 = 1e-5;
pub const MAX_TRACE_STEPS: usize = 1024;
pub const MAX_TRACE_DISTANCE: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extent: [f64; 3] },
    /// Torus around the y axis.
    Torus { center: [f64; 3], major: f64, minor: f64 },
}

impl Shape {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - Vec3::from(center)).norm() - radius,
            Shape::Box { center, half_extent } => {
                let q = (p - Vec3::from(center)).abs() - Vec3::from(half_extent);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
            Shape::Torus { center, major, minor } => {
                let q = p - Vec3::from(center);
                let ring = (q.x * q.x + q.z * q.z).sqrt() - major;
                (ring * ring + q.y * q.y).sqrt() - minor
            }
        }
    }

    /// Analytic outward unit normal at (or near) the surface.
    pub fn normal(&self, p: &Vec3) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } => (p - Vec3::from(center)).normalize(),
            Shape::Box { center, half_extent } => {
                let d = p - Vec3::from(center);
                let q = d.abs() - Vec3::from(half_extent);
                if q.max() > 0.0 {
                    let outside = q.sup(&Vec3::zeros());
                    Vec3::from_fn(|i, _| outside[i] * d[i].signum()).normalize()
                } else {
                    let axis = q.imax();
                    let mut n = Vec3::zeros();
                    n[axis] = d[axis].signum();
                    n
                }
            }
            Shape::Torus { center, major, .. } => {
                let q = p - Vec3::from(center);
                let radial = Vec3::new(q.x, 0.0, q.z);
                let r = radial.norm();
                let ring_point = if r > 0.0 { radial * (major / r) } else { Vec3::new(major, 0.0, 0.0) };
                (q - ring_point).normalize()
            }
        }
    }

    /// Uniform sample on the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            Shape::Sphere { center, radius } => Vec3::from(center) + unit_direction(rng) * radius,
            Shape::Box { center, half_extent } => {
                let h = Vec3::from(half_extent);
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut x = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if x < *area {
                        axis = a;
                        break;
                    }
                    x -= area;
                }
                let mut p = Vec3::from_fn(|i, _| rng.gen_range(-h[i]..h[i]));
                p[axis] = if rng.gen::<bool>() { h[axis] } else { -h[axis] };
                Vec3::from(center) + p
            }
            Shape::Torus { center, major, minor } => loop {
                // Rejection on the tube angle for uniform area density.
                let u: f64 = rng.gen_range(0.0..2.0 * PI);
                let v: f64 = rng.gen_range(0.0..2.0 * PI);
                let w: f64 = rng.gen();
                if w <= (major + minor * v.cos()) / (major + minor) {
                    let r = major + minor * v.cos();
                    break Vec3::from(center) + Vec3::new(r * u.cos(), minor * v.sin(), r * u.sin());
                }
            },
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn unit_direction(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Schlick reflectance at normal incidence.
    pub r0: f64,
    /// Phong exponent `e`.
    pub exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(flatten)]
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Light {
    /// Radiant intensity falling off with the squared distance.
    Point { position: [f64; 3], intensity: [f64; 3] },
    /// `direction` points from the scene towards the light.
    Directional { direction: [f64; 3], irradiance: [f64; 3] },
}

impl Light {
    /// Unit direction towards the light and incident radiance at `p`.
    pub fn incident(&self, p: &Vec3) -> (Vec3, [f64; 3]) {
        match *self {
            Light::Point { position, intensity } => {
                let d = Vec3::from(position) - p;
                let r2 = d.norm_squared();
                (d / r2.sqrt(), intensity.map(|i| i / r2))
            }
            Light::Directional { direction, irradiance } => (Vec3::from(direction).normalize(), irradiance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Evenly spaced around the y axis at a fixed height.
    Ring,
    /// Spread over the sphere around the origin.
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    pub resolution: usize,
    pub placement: Placement,
    pub radius: f64,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
    /// Ring height (ring placement only).
    #[serde(default)]
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    #[serde(rename = "primitive")]
    pub primitives: Vec<Primitive>,
    #[serde(rename = "light")]
    pub lights: Vec<Light>,
    #[serde(default)]
    pub background: [f64; 3],
    pub cameras: CameraRig,
}

/// Fresnel reflectance `R₀ + (1 − R₀)(1 − cos θ)⁵`.
pub fn schlick(r0: f64, cos_theta: f64) -> f64 {
    r0 + (1.0 - r0) * (1.0 - cos_theta.clamp(0.0, 1.0)).powi(5)
}

/// Outgoing radiance at a surface point with unit normal `n`, towards the
/// unit direction `v` (surface to eye). Clipped to `[0, 1]`.
pub fn shade(p: &Vec3, n: &Vec3, v: &Vec3, material: &Material, lights: &[Light]) -> [f64; 3] {
    shade_unclipped(p, n, v, material, lights).map(|c| c.clamp(0.0, 1.0))
}

pub fn shade_unclipped(p: &Vec3, n: &Vec3, v: &Vec3, material: &Material, lights: &[Light]) -> [f64; 3] {
    let mut c = [0.0; 3];
    let r = n * (2.0 * n.dot(v)) - v;
    let e = material.exponent;
    for light in lights {
        let (w, radiance) = light.incident(p);
        let cos_i = w.dot(n);
        if cos_i <= 0.0 {
            continue;
        }
        let h = (w + v).normalize();
        let fresnel = schlick(material.r0, v.dot(&h));
        let lobe = r.dot(&w).max(0.0).powf(e);
        let specular = fresnel * (e + 2.0) / (2.0 * PI) * lobe;
        for k in 0..3 {
            let f_r = material.albedo[k] / PI + specular;
            c[k] += f_r * radiance[k] * cos_i;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub primitive: usize,
}

impl AnalyticScene {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: AnalyticScene = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        let c = &self.cameras;
        if c.count == 0 || c.resolution == 0 || !(c.radius > 0.0) || !(c.fov_degrees > 0.0 && c.fov_degrees < 180.0) {
            return Err(Error::Config("invalid camera rig".into()));
        }
        Ok(())
    }

    /// Union SDF and the index of the closest primitive.
    pub fn sdf_with_id(&self, p: &Vec3) -> (f64, usize) {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| (prim.shape.sdf(p), i))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.sdf_with_id(p).0
    }

    /// Sphere tracing from the ray origin.
    pub fn trace(&self, ray: &Ray) -> Option<Hit> {
        let mut t = 0.0;
        for _ in 0..MAX_TRACE_STEPS {
            let p = ray.origin + ray.dir * t;
            let (d, id) = self.sdf_with_id(&p);
            if d < HIT_EPSILON {
                return Some(Hit {
                    t,
                    point: p,
                    primitive: id,
                });
            }
            t += d;
            if t > MAX_TRACE_DISTANCE {
                break;
            }
        }
        None
    }

    /// Colour image, hit mask and ray depth (infinite on misses).
    pub fn raytrace(&self, camera: &Camera) -> (Image, Mask, Vec<f64>) {
        let (w, h) = (camera.width, camera.height);
        let pixels: Vec<([f64; 3], bool, f64)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let ray = camera.pixel_ray(i % w, i / w);
                match self.trace(&ray) {
                    Some(hit) => {
                        let prim = &self.primitives[hit.primitive];
                        let n = prim.shape.normal(&hit.point);
                        let rgb = shade(&hit.point, &n, &(-ray.dir), &prim.material, &self.lights);
                        (rgb, true, hit.t)
                    }
                    None => (self.background, false, f64::INFINITY),
                }
            })
            .collect();
        let mut image = Image::new(w, h, [0.0; 3]);
        let mut mask = Mask::new(w, h, false);
        let mut depth = vec![0.0; w * h];
        for (i, (c, m, d)) in pixels.into_iter().enumerate() {
            image.data[i] = c;
            mask.data[i] = m;
            depth[i] = d;
        }
        (image, mask, depth)
    }

    /// Uniform samples on the visible union surface (points inside another
    /// primitive are rejected).
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n);
        let mut guard = 0usize;
        while out.len() < n && guard < 100 * n + 1000 {
            guard += 1;
            let prim = &self.primitives[rng.gen_range(0..self.primitives.len())];
            let p = prim.shape.sample_surface(rng);
            if self.sdf(&p) > -1e-9 {
                out.push(p);
            }
        }
        out
    }

    /// Marching-cubes mesh of the analytic SDF on an `n³` lattice.
    pub fn reference_mesh(&self, min: Vec3, max: Vec3, n: usize) -> TriMesh {
        extract_function(|p| self.sdf(p), min, max, n)
    }
}

/// Camera positions for the rig, looking at the origin.
pub fn place_cameras(rig: &CameraRig, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let n = rig.count;
    let fov = rig.fov_degrees.to_radians();
    (0..n)
        .map(|i| {
            let eye = match rig.placement {
                Placement::Ring => {
                    let a = phase + 2.0 * PI * i as f64 / n as f64;
                    let flat = (rig.radius * rig.radius - rig.height * rig.height).max(0.0).sqrt();
                    Vec3::new(flat * a.cos(), rig.height, flat * a.sin())
                }
                Placement::Sphere => {
                    // Fibonacci lattice with a seeded azimuth offset.
                    let golden = PI * (3.0 - 5f64.sqrt());
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let a = phase + golden * i as f64;
                    Vec3::new(r * a.cos(), y, r * a.sin()) * rig.radius
                }
            };
            let up = if eye.normalize().y.abs() > 0.99 { Vec3::z() } else { Vec3::y() };
            Camera::look_at(i, eye, Vec3::zeros(), up, rig.resolution, fov)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub points_gt: Vec<Vec3>,
}

/// Renders every camera of the rig and samples reference surface points.
pub fn make_dataset(scene: &AnalyticScene, seed: u64, gt_points: usize) -> SynthDataset {
    let cameras = place_cameras(&scene.cameras, seed);
    let (images, masks) = cameras
        .iter()
        .map(|c| {
            let (img, mask, _) = scene.raytrace(c);
            (img, mask)
        })
        .unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let points_gt = scene.sample_surface(gt_points, &mut rng);
    SynthDataset {
        cameras,
        images,
        masks,
        points_gt,
    }
}
