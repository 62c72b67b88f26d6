//! Procedural scenes with closed-form density and colour, and a brute-force
//! renderer for them.
//!
//! Each primitive contributes `A · smoothstep(0, f·r, inside)` where
//! `inside` is the distance from the point to the primitive's surface
//! measured inwards (negative outside), `r` the radius (smallest half-extent
//! for boxes) and `f` the falloff fraction. The density ramps up over a thin
//! shell just inside the surface and is exactly `A` deeper in. Colour is the
//! density-weighted mean of the albedos.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Bounds, CameraPose, Intrinsics, Vec3};
use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_FALLOFF: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
}

impl Shape {
    fn inside_distance(&self, x: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => radius - camera::norm(camera::sub(x, center)),
            Shape::Box { center, half } => (0..3)
                .map(|i| half[i] - (x[i] - center[i]).abs())
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn size(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => radius,
            Shape::Box { half, .. } => half.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Radius of a ball around the origin that contains the shape.
    fn extent(&self) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => camera::norm(center) + radius,
            Shape::Box { center, half } => camera::norm(center) + camera::norm(half),
        }
    }
}

fn default_falloff() -> f64 {
    DEFAULT_FALLOFF
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
    pub density: f64,
    /// Shell width as a fraction of the primitive's radius.
    #[serde(default = "default_falloff")]
    pub falloff: f64,
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, albedo: [f64; 3], density: f64) -> Self {
        Self {
            shape: Shape::Sphere { center, radius },
            albedo,
            density,
            falloff: DEFAULT_FALLOFF,
        }
    }

    pub fn cuboid(center: Vec3, half: Vec3, albedo: [f64; 3], density: f64) -> Self {
        Self {
            shape: Shape::Box { center, half },
            albedo,
            density,
            falloff: DEFAULT_FALLOFF,
        }
    }

    pub fn with_falloff(self, falloff: f64) -> Self {
        Self { falloff, ..self }
    }

    pub fn sigma(&self, x: Vec3) -> f64 {
        let d = self.shape.inside_distance(x);
        if d <= 0.0 {
            return 0.0;
        }
        let w = self.falloff * self.shape.size();
        self.density * smoothstep(d / w)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    White,
    Black,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: Background,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let bad_shape = match p.shape {
                Shape::Sphere { radius, .. } => !(radius > 0.0),
                Shape::Box { half, .. } => half.iter().any(|h| !(*h > 0.0)),
            };
            if bad_shape || !(p.density >= 0.0) || !(p.falloff > 0.0) {
                return Err(Error::invalid(format!(
                    "primitive {i} has a nonpositive size, density or falloff"
                )));
            }
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::invalid(format!("primitive {i} albedo outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Radius of a ball around the origin holding every primitive.
    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(|p| p.shape.extent()).fold(0.0, f64::max)
    }

    /// Three primitives of different colour, shape and size.
    pub fn three_primitives() -> Self {
        Self {
            primitives: vec![
                Primitive::sphere([-0.35, -0.05, 0.05], 0.38, [0.85, 0.2, 0.15], 40.0),
                Primitive::cuboid([0.38, 0.22, -0.1], [0.2, 0.24, 0.32], [0.15, 0.7, 0.25], 40.0),
                Primitive::sphere([0.12, -0.42, 0.42], 0.17, [0.2, 0.3, 0.9], 40.0),
            ],
            background: Background::White,
        }
    }

    pub fn white_background(&self) -> bool {
        self.background == Background::White
    }
}

/// Density and colour at `x`. Outside every primitive the colour is black.
pub fn scene_field(scene: &AnalyticScene, x: Vec3) -> ([f64; 3], f64) {
    let mut sigma = 0.0;
    let mut rgb = [0.0; 3];
    for p in &scene.primitives {
        let s = p.sigma(x);
        if s > 0.0 {
            sigma += s;
            for c in 0..3 {
                rgb[c] += s * p.albedo[c];
            }
        }
    }
    if sigma > 0.0 {
        for v in &mut rgb {
            *v /= sigma;
        }
    }
    (rgb, sigma)
}

pub const MIN_ORACLE_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRender {
    pub image: Image,
    /// Expected termination depth per pixel; rays that hit nothing are 0.
    pub depth: Vec<f64>,
    pub acc: Vec<f64>,
}

/// Midpoint-rule compositing of one ray over `[near, far]` in `steps` equal
/// intervals; returns colour (with background), depth and opacity.
pub fn oracle_ray(
    scene: &AnalyticScene,
    origin: Vec3,
    dir: Vec3,
    bounds: Bounds,
    steps: usize,
) -> ([f64; 3], f64, f64) {
    let h = (bounds.far - bounds.near) / steps as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut wt = 0.0;
    for i in 0..steps {
        let t = bounds.near + (i as f64 + 0.5) * h;
        let (rgb, sigma) = scene_field(scene, camera::add(origin, camera::scale(dir, t)));
        if sigma == 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * h).exp();
        let w = trans * alpha;
        for c in 0..3 {
            color[c] += w * rgb[c];
        }
        wt += w * t;
        trans *= 1.0 - alpha;
        if trans < 1e-15 {
            trans = 0.0;
            break;
        }
    }
    let acc = 1.0 - trans;
    if scene.white_background() {
        for c in &mut color {
            *c += trans;
        }
    }
    (color, wt / acc.max(crate::render::DEPTH_EPS), acc)
}

/// Dense-quadrature render of every pixel centre.
pub fn oracle_render(
    scene: &AnalyticScene,
    pose: &CameraPose,
    intr: &Intrinsics,
    bounds: Bounds,
    steps: usize,
) -> Result<OracleRender> {
    if steps < MIN_ORACLE_STEPS {
        return Err(Error::invalid(format!(
            "oracle needs at least {MIN_ORACLE_STEPS} steps"
        )));
    }
    scene.validate()?;
    let (w, h) = (intr.width, intr.height);
    let rows = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = camera::ray_for_point(pose, intr, (x as f64 + 0.5, y as f64 + 0.5), bounds)?;
                    Ok(oracle_ray(scene, ray.origin, ray.dir, bounds, steps))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut acc = Vec::with_capacity(w * h);
    for (c, d, a) in rows.into_iter().flatten() {
        data.extend_from_slice(&c);
        depth.push(d);
        acc.push(a);
    }
    Ok(OracleRender {
        image: Image::from_clamped(w, h, data)?,
        depth,
        acc,
    })
}

/// Camera on the upper hemisphere of radius `distance`, looking at the origin.
pub fn hemisphere_pose(distance: f64, azimuth: f64, elevation: f64) -> Result<CameraPose> {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let eye = [distance * ce * ca, distance * ce * sa, distance * se];
    CameraPose::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])
}
