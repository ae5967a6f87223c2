//! Dense 2D-grid representation of 3D point clouds.
//!
//! Unordered point sets are pixelized through a pinhole model: each
//! surviving point is stored as its raw (x, y, z) at the grid cell it
//! projects to. Empty cells hold (0, 0, 0) plus an explicit validity
//! bit, since a genuine point at the origin is otherwise
//! indistinguishable from an empty cell.

use crate::error::{Error, Result};

/// Pinhole calibration and grid dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f32).contains(&self.cx)
            || !(0.0..self.height as f32).contains(&self.cy)
        {
            return Err(Error::InvalidArgument(
                "principal point must lie inside the grid".into(),
            ));
        }
        Ok(())
    }

    /// Pixel rule: round-to-nearest via floor(·+0.5). Requires z > 0.
    /// Returns (u, v) possibly outside the grid bounds.
    pub fn pixel_of(&self, p: [f32; 3]) -> Option<(i64, i64)> {
        if p[2] <= 0.0 {
            return None;
        }
        let u = (self.fx * p[0] / p[2] + self.cx + 0.5).floor() as i64;
        let v = (self.fy * p[1] / p[2] + self.cy + 0.5).floor() as i64;
        Some((u, v))
    }

    /// Continuous (unrounded) pinhole map in f64, for 2D flow and metrics.
    pub fn pixel_continuous(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx as f64 * p[0] / p[2] + self.cx as f64,
            self.fy as f64 * p[1] / p[2] + self.cy as f64,
        )
    }

    pub fn contains(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && (u as usize) < self.width && (v as usize) < self.height
    }
}

/// H×W grid of 3D coordinates plus a validity mask.
///
/// Output of [`project_points`] additionally satisfies: every valid cell
/// has z > 0 and re-projects (via the pixel rule) into its own cell;
/// every invalid cell stores exactly (0, 0, 0).
#[derive(Clone, Debug, PartialEq)]
pub struct PointImage {
    pub h: usize,
    pub w: usize,
    coords: Vec<f32>, // h*w*3 row-major
    valid: Vec<bool>,
}

impl PointImage {
    pub fn new_invalid(h: usize, w: usize) -> Self {
        PointImage {
            h,
            w,
            coords: vec![0.0; h * w * 3],
            valid: vec![false; h * w],
        }
    }

    #[inline]
    pub fn idx(&self, v: usize, u: usize) -> usize {
        v * self.w + u
    }

    #[inline]
    pub fn get(&self, i: usize) -> [f32; 3] {
        [self.coords[3 * i], self.coords[3 * i + 1], self.coords[3 * i + 2]]
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn set(&mut self, i: usize, p: [f32; 3]) {
        self.coords[3 * i..3 * i + 3].copy_from_slice(&p);
        self.valid[i] = true;
    }

    pub fn clear(&mut self, i: usize) {
        self.coords[3 * i..3 * i + 3].copy_from_slice(&[0.0; 3]);
        self.valid[i] = false;
    }

    pub fn n_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn coords_flat(&self) -> &[f32] {
        &self.coords
    }

    /// Raw constructor for file ingestion; enforces the sentinel rule.
    pub fn from_parts(h: usize, w: usize, coords: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if coords.len() != h * w * 3 || valid.len() != h * w {
            return Err(Error::Shape("point image buffer sizes".into()));
        }
        let mut img = PointImage { h, w, coords, valid };
        for i in 0..h * w {
            if !img.valid[i] {
                img.coords[3 * i..3 * i + 3].copy_from_slice(&[0.0; 3]);
            }
        }
        Ok(img)
    }
}

/// Unordered point set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCloud {
    pub points: Vec<[f32; 3]>,
}

impl RawCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        RawCloud { points }
    }
}

/// Pixelize a cloud onto the grid. Points with z ≤ 0, z > depth_max or a
/// projection outside the grid are dropped; collisions keep the
/// nearest-z point.
pub fn project_points(
    cloud: &RawCloud,
    intr: &CameraIntrinsics,
    depth_max: f32,
) -> Result<PointImage> {
    intr.validate()?;
    if depth_max <= 0.0 {
        return Err(Error::InvalidArgument("depth_max must be positive".into()));
    }
    let mut img = PointImage::new_invalid(intr.height, intr.width);
    for &p in &cloud.points {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(Error::NonFinite("cloud point".into()));
        }
        if p[2] <= 0.0 || p[2] > depth_max {
            continue;
        }
        let (u, v) = match intr.pixel_of(p) {
            Some(uv) => uv,
            None => continue,
        };
        if !intr.contains(u, v) {
            continue;
        }
        let i = img.idx(v as usize, u as usize);
        if !img.is_valid(i) || p[2] < img.get(i)[2] {
            img.set(i, p);
        }
    }
    Ok(img)
}

/// Coordinates of all valid cells in row-major order.
pub fn lift_valid(img: &PointImage) -> RawCloud {
    let mut points = Vec::with_capacity(img.n_valid());
    for i in 0..img.n_cells() {
        if img.is_valid(i) {
            points.push(img.get(i));
        }
    }
    RawCloud { points }
}

/// Optical flow induced by a 3D flow field: per valid cell the continuous
/// pixel displacement of p + f relative to p. Cells whose warped z ≤ 0
/// are flagged invalid for 2D evaluation. Returns (h*w*2 flow, mask).
pub fn project_flow_2d(
    img: &PointImage,
    flow3d: &[f32],
    intr: &CameraIntrinsics,
) -> Result<(Vec<f32>, Vec<bool>)> {
    if flow3d.len() != img.n_cells() * 3 {
        return Err(Error::Shape("flow3d must match the grid".into()));
    }
    let mut out = vec![0.0f32; img.n_cells() * 2];
    let mut valid = vec![false; img.n_cells()];
    for i in 0..img.n_cells() {
        if !img.is_valid(i) {
            continue;
        }
        let p = img.get(i);
        let q = [
            p[0] as f64 + flow3d[3 * i] as f64,
            p[1] as f64 + flow3d[3 * i + 1] as f64,
            p[2] as f64 + flow3d[3 * i + 2] as f64,
        ];
        if q[2] <= 0.0 {
            continue;
        }
        let (u0, v0) = intr.pixel_continuous([p[0] as f64, p[1] as f64, p[2] as f64]);
        let (u1, v1) = intr.pixel_continuous(q);
        out[2 * i] = (u1 - u0) as f32;
        out[2 * i + 1] = (v1 - v0) as f32;
        valid[i] = true;
    }
    Ok((out, valid))
}
