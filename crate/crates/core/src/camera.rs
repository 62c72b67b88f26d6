//! Pinhole cameras, pixel and sub-pixel rays, and projection.
//!
//! Conventions: pixel `(i, j)` covers `[i, i+1) × [j, j+1)` with its centre
//! at `(i + 0.5, j + 0.5)`; image `x` grows right and `y` grows down. In
//! camera space the camera looks down `−z` with `+y` up, so an image point
//! `(u, v)` back-projects to `((u − cx)/f, −(v − cy)/f, −1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Centred principal point with the given horizontal field of view.
    pub fn from_fov(width: usize, height: usize, fov_x_radians: f64) -> Result<Self> {
        let focal = 0.5 * width as f64 / (0.5 * fov_x_radians).tan();
        Self::new(focal, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid(format!("focal must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// The same camera sampled `s` times more densely per axis.
    pub fn scaled(&self, s: usize) -> Self {
        let k = s as f64;
        Self {
            focal: self.focal * k,
            cx: self.cx * k,
            cy: self.cy * k,
            width: self.width * s,
            height: self.height * s,
        }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= self.width as f64 && p.1 <= self.height as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct CameraPose {
    m: [[f64; 4]; 4],
}

const ORTHO_TOL: f64 = 1e-9;

impl TryFrom<[[f64; 4]; 4]> for CameraPose {
    type Error = Error;
    fn try_from(m: [[f64; 4]; 4]) -> Result<Self> {
        CameraPose::new(m)
    }
}

impl From<CameraPose> for [[f64; 4]; 4] {
    fn from(p: CameraPose) -> Self {
        p.m
    }
}

impl CameraPose {
    /// Validates `RᵀR = I`, `det R = +1` and the homogeneous last row.
    pub fn new(m: [[f64; 4]; 4]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera pose"));
        }
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("pose last row must be [0, 0, 0, 1]"));
        }
        let pose = Self { m };
        for a in 0..3 {
            for b in 0..3 {
                let d = dot(pose.column(a), pose.column(b));
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > ORTHO_TOL {
                    return Err(Error::invalid("pose rotation is not orthonormal"));
                }
            }
        }
        if (pose.det() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("pose rotation has determinant != +1"));
        }
        Ok(pose)
    }

    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { m }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let back = sub(eye, target);
        if norm(back) == 0.0 {
            return Err(Error::invalid("look_at: eye equals target"));
        }
        let z = normalize(back);
        let x = cross(up, z);
        if norm(x) < 1e-12 {
            return Err(Error::invalid("look_at: up is parallel to the view axis"));
        }
        let x = normalize(x);
        let y = cross(z, x);
        Self::from_parts([x, y, z], eye)
    }

    /// Builds from rotation columns and a translation.
    pub fn from_parts(cols: [Vec3; 3], t: Vec3) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            for (c, col) in cols.iter().enumerate() {
                m[r][c] = col[r];
            }
            m[r][3] = t[r];
        }
        m[3][3] = 1.0;
        Self::new(m)
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.m
    }

    pub fn column(&self, c: usize) -> Vec3 {
        [self.m[0][c], self.m[1][c], self.m[2][c]]
    }

    pub fn center(&self) -> Vec3 {
        self.column(3)
    }

    fn det(&self) -> f64 {
        dot(self.column(0), cross(self.column(1), self.column(2)))
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn to_world(&self, p_cam: Vec3) -> Vec3 {
        add(self.rotate(p_cam), self.center())
    }

    pub fn to_camera(&self, p_world: Vec3) -> Vec3 {
        let d = sub(p_world, self.center());
        [dot(self.column(0), d), dot(self.column(1), d), dot(self.column(2), d)]
    }

    /// `self` followed by `other`: the pose of this camera after the world
    /// is moved by the rigid transform `other`.
    pub fn then(&self, other: &CameraPose) -> CameraPose {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| other.m[r][k] * self.m[k][c]).sum();
            }
        }
        CameraPose { m }
    }
}

/// Depth range along a ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub near: f64,
    pub far: f64,
}

impl Bounds {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near.is_finite() && far.is_finite() && near >= 0.0 && near < far) {
            return Err(Error::invalid(format!("bad bounds [{near}, {far}]")));
        }
        Ok(Self { near, far })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3, bounds: Bounds) -> Result<Self> {
        let n = norm(dir);
        if !(n.is_finite() && n > 0.0) || origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ray"));
        }
        Ok(Self {
            origin,
            dir: scale(dir, 1.0 / n),
            t_near: bounds.near,
            t_far: bounds.far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

/// Everything needed to shoot rays for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: CameraPose,
    pub intr: Intrinsics,
    pub bounds: Bounds,
}

impl Camera {
    pub fn ray(&self, p: (f64, f64)) -> Result<Ray> {
        ray_for_point(&self.pose, &self.intr, p, self.bounds)
    }

    /// Same view at `s` times the resolution.
    pub fn scaled(&self, s: usize) -> Self {
        Self {
            intr: self.intr.scaled(s),
            ..*self
        }
    }
}

/// Centres of the `s × s` sub-pixel grid of pixel `(i, j)`, x fastest.
pub fn subpixel_grid(pixel: (usize, usize), s: usize) -> Result<Vec<(f64, f64)>> {
    if s < 1 {
        return Err(Error::invalid("scale factor must be >= 1"));
    }
    let k = s as f64;
    let (i, j) = (pixel.0 as f64, pixel.1 as f64);
    let mut out = Vec::with_capacity(s * s);
    for b in 0..s {
        for a in 0..s {
            out.push((i + (a as f64 + 0.5) / k, j + (b as f64 + 0.5) / k));
        }
    }
    Ok(out)
}

/// Ray through the continuous image point `p`.
pub fn ray_for_point(pose: &CameraPose, intr: &Intrinsics, p: (f64, f64), bounds: Bounds) -> Result<Ray> {
    if !intr.contains(p) {
        return Err(Error::OutsideImage {
            x: p.0,
            y: p.1,
            width: intr.width,
            height: intr.height,
        });
    }
    Ray::new(pose.center(), pose.rotate(camera_direction(intr, p)), bounds)
}

fn camera_direction(intr: &Intrinsics, p: (f64, f64)) -> Vec3 {
    [(p.0 - intr.cx) / intr.focal, -(p.1 - intr.cy) / intr.focal, -1.0]
}

/// World-space unit direction through the image point `p`. Unlike
/// [`ray_for_point`], `p` may lie outside the image.
pub fn pixel_direction(pose: &CameraPose, intr: &Intrinsics, p: (f64, f64)) -> Vec3 {
    normalize(pose.rotate(camera_direction(intr, p)))
}

/// Pinhole projection; returns image coordinates and depth along the
/// optical axis. Points at or behind the camera plane are rejected.
pub fn project(x_world: Vec3, pose: &CameraPose, intr: &Intrinsics) -> Result<((f64, f64), f64)> {
    let c = pose.to_camera(x_world);
    let depth = -c[2];
    if !(depth > 0.0) {
        return Err(Error::BehindCamera(depth));
    }
    let u = intr.cx + intr.focal * c[0] / depth;
    let v = intr.cy - intr.focal * c[1] / depth;
    Ok(((u, v), depth))
}
