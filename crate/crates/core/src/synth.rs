//! Synthetic rigid-motion scenes with exact ground-truth flow.
//!
//! Each scene raycasts a background plane plus a few spheres and boxes
//! through the pixel grid, once per frame. Spheres carry a full rigid
//! motion (small rotation about their center plus a translation), boxes
//! translate only, the background is static. Points land exactly on
//! pixel-center rays, so re-projection is self-consistent by
//! construction. Images are colored by object id so appearance carries
//! a correspondence signal that geometry alone does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{CameraIntrinsics, PointImage};

const DEPTH_MAX: f32 = 35.0;
const MAX_ROT_DEG: f32 = 5.0;
const MAX_TRANS: f32 = 0.5;

#[derive(Clone, Debug)]
struct Sphere {
    center: [f32; 3],
    radius: f32,
    rot: [[f32; 3]; 3],
    trans: [f32; 3],
    color: [f32; 3],
}

#[derive(Clone, Debug)]
struct Box3 {
    half: [f32; 3],
    center: [f32; 3],
    trans: [f32; 3],
    color: [f32; 3],
}

pub struct SyntheticScene {
    pub intr: CameraIntrinsics,
    pub pc1: PointImage,
    pub pc2: PointImage,
    /// H×W×3 row-major RGB in [0,1].
    pub img1: Vec<f32>,
    pub img2: Vec<f32>,
    /// H×W×3 flow defined at valid pc1 cells.
    pub gt_flow: Vec<f32>,
    pub gt_valid: Vec<bool>,
    pub seed: u64,
}

fn sub3(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add3(a: [f32; 3], b: [f32; 3]) -> [f32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn dot3(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn matvec(m: &[[f32; 3]; 3], v: [f32; 3]) -> [f32; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// Rodrigues rotation matrix for a unit axis and angle in radians.
fn axis_angle(axis: [f32; 3], angle: f32) -> [[f32; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f32; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n2 = dot3(v, v);
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Smallest positive ray parameter hitting the sphere, for ray p = s·d.
fn ray_sphere(d: [f32; 3], center: [f32; 3], radius: f32) -> Option<f32> {
    let a = dot3(d, d);
    let b = -2.0 * dot3(d, center);
    let c = dot3(center, center) - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = (-b - disc.sqrt()) / (2.0 * a);
    (s > 0.0).then_some(s)
}

/// Slab test against an axis-aligned box, for ray p = s·d from origin.
fn ray_box(d: [f32; 3], center: [f32; 3], half: [f32; 3]) -> Option<f32> {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        let (lo, hi) = (center[a] - half[a], center[a] + half[a]);
        if d[a].abs() < 1e-12 {
            if lo > 0.0 || hi < 0.0 {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = (lo / d[a], hi / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Owner {
    Background,
    Sphere(usize),
    Box(usize),
}

struct World {
    spheres: Vec<Sphere>,
    boxes: Vec<Box3>,
    z_bg: f32,
    bg_color: [f32; 3],
}

impl World {
    /// Nearest hit along the pixel-center ray, as (depth parameter, owner).
    fn cast(&self, d: [f32; 3], frame2: bool) -> (f32, Owner) {
        let mut best = (self.z_bg, Owner::Background); // d.z = 1 so s = z
        for (i, s) in self.spheres.iter().enumerate() {
            let c = if frame2 { add3(s.center, s.trans) } else { s.center };
            if let Some(t) = ray_sphere(d, c, s.radius) {
                if t < best.0 {
                    best = (t, Owner::Sphere(i));
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let c = if frame2 { add3(b.center, b.trans) } else { b.center };
            if let Some(t) = ray_box(d, c, b.half) {
                if t < best.0 {
                    best = (t, Owner::Box(i));
                }
            }
        }
        best
    }

    fn color(&self, owner: Owner) -> [f32; 3] {
        match owner {
            Owner::Background => self.bg_color,
            Owner::Sphere(i) => self.spheres[i].color,
            Owner::Box(i) => self.boxes[i].color,
        }
    }

    /// Rigid motion of the owning object applied to a frame-1 point.
    fn moved(&self, owner: Owner, p: [f32; 3]) -> [f32; 3] {
        match owner {
            Owner::Background => p,
            Owner::Sphere(i) => {
                let s = &self.spheres[i];
                add3(add3(matvec(&s.rot, sub3(p, s.center)), s.center), s.trans)
            }
            Owner::Box(i) => add3(p, self.boxes[i].trans),
        }
    }
}

fn render(world: &World, intr: &CameraIntrinsics, frame2: bool) -> (PointImage, Vec<f32>, Vec<Owner>) {
    let (h, w) = (intr.height, intr.width);
    let mut img = PointImage::new_invalid(h, w);
    let mut rgb = vec![0.0f32; h * w * 3];
    let mut owners = vec![Owner::Background; h * w];
    for v in 0..h {
        for u in 0..w {
            let d = [
                (u as f32 - intr.cx) / intr.fx,
                (v as f32 - intr.cy) / intr.fy,
                1.0,
            ];
            let (s, owner) = world.cast(d, frame2);
            let i = img.idx(v, u);
            owners[i] = owner;
            if s <= DEPTH_MAX {
                img.set(i, [s * d[0], s * d[1], s]);
            }
            let c = world.color(owner);
            rgb[3 * i..3 * i + 3].copy_from_slice(&c);
        }
    }
    (img, rgb, owners)
}

/// Deterministic scene: background plane plus `n_objects` spheres and
/// boxes (alternating) inside the frustum. `motion_scale` multiplies
/// every rotation angle and translation; 1.0 keeps them within 5
/// degrees and 0.5 m.
pub fn synth_scaled(
    seed: u64,
    h: usize,
    w: usize,
    n_objects: usize,
    motion_scale: f32,
) -> Result<SyntheticScene> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!(
            "scene grid {h}x{w} too small, need at least 16x16"
        )));
    }
    let f = 0.9 * w as f32; // keeps the frustum non-degenerate for any aspect
    let intr = CameraIntrinsics {
        fx: f,
        fy: f,
        cx: (w as f32 - 1.0) / 2.0,
        cy: (h as f32 - 1.0) / 2.0,
        width: w,
        height: h,
    };
    intr.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_bg = rng.gen_range(15.0f32..30.0);
    let mut world = World {
        spheres: Vec::new(),
        boxes: Vec::new(),
        z_bg,
        bg_color: [0.15, 0.15, 0.2],
    };
    let palette = |rng: &mut ChaCha8Rng| -> [f32; 3] {
        [
            rng.gen_range(0.2f32..1.0),
            rng.gen_range(0.2..1.0),
            rng.gen_range(0.2..1.0),
        ]
    };
    for obj in 0..n_objects {
        let z = rng.gen_range(2.0f32..10.0);
        // keep the object center well inside the frustum at its depth
        let xr = 0.6 * z * (w as f32 / 2.0) / f;
        let yr = 0.6 * z * (h as f32 / 2.0) / f;
        let center = [rng.gen_range(-xr..xr), rng.gen_range(-yr..yr), z];
        let t_dir = unit_vector(&mut rng);
        let t_len = rng.gen_range(0.1f32..MAX_TRANS) * motion_scale;
        let trans = [t_dir[0] * t_len, t_dir[1] * t_len, t_dir[2] * t_len];
        let color = palette(&mut rng);
        if obj % 2 == 0 {
            let angle =
                rng.gen_range(-MAX_ROT_DEG..MAX_ROT_DEG).to_radians() * motion_scale;
            let axis = unit_vector(&mut rng);
            world.spheres.push(Sphere {
                center,
                radius: rng.gen_range(0.3f32..(0.12 * z).max(0.45)),
                rot: axis_angle(axis, angle),
                trans,
                color,
            });
        } else {
            world.boxes.push(Box3 {
                half: {
                    let hi = (0.08 * z).max(0.3);
                    [
                        rng.gen_range(0.2f32..hi),
                        rng.gen_range(0.2f32..hi),
                        rng.gen_range(0.2f32..hi),
                    ]
                },
                center,
                trans,
                color,
            });
        }
    }

    let (pc1, img1, owners) = render(&world, &intr, false);
    let (pc2, img2, _) = render(&world, &intr, true);

    let n = pc1.n_cells();
    let mut gt_flow = vec![0.0f32; n * 3];
    let mut gt_valid = vec![false; n];
    for i in 0..n {
        if !pc1.is_valid(i) {
            continue;
        }
        gt_valid[i] = true;
        let p = pc1.get(i);
        let q = world.moved(owners[i], p);
        gt_flow[3 * i] = q[0] - p[0];
        gt_flow[3 * i + 1] = q[1] - p[1];
        gt_flow[3 * i + 2] = q[2] - p[2];
    }
    Ok(SyntheticScene {
        intr,
        pc1,
        pc2,
        img1,
        img2,
        gt_flow,
        gt_valid,
        seed,
    })
}

/// Standard scene with the default motion bounds.
pub fn synth(seed: u64, h: usize, w: usize, n_objects: usize) -> Result<SyntheticScene> {
    synth_scaled(seed, h, w, n_objects, 1.0)
}
