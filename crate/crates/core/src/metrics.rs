//! Scene-flow evaluation metrics over valid cells.

use crate::error::{Error, Result};
use crate::grid::{project_flow_2d, CameraIntrinsics, PointImage};

/// Aggregate metrics; all means are over valid cells only.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Mean 3D endpoint error (meters).
    pub epe3d: f64,
    /// Fraction with error < 0.05 m or relative error < 5%.
    pub acc_strict: f64,
    /// Fraction with error < 0.10 m or relative error < 10%.
    pub acc_relax: f64,
    /// Fraction with error > 0.30 m or relative error > 10%.
    pub outliers: f64,
    /// Mean 2D endpoint error (pixels), over cells whose ground-truth
    /// motion stays in front of the camera.
    pub epe2d: f64,
    /// Fraction with 2D error < 1 px or 2D relative error < 5%.
    pub acc1px: f64,
    pub n_valid: usize,
}

fn norm3(v: &[f32]) -> f64 {
    let (x, y, z) = (v[0] as f64, v[1] as f64, v[2] as f64);
    (x * x + y * y + z * z).sqrt()
}

/// Compare predicted flow against ground truth on the cells where both
/// the point image and the ground-truth mask are valid. Flow buffers
/// are H·W×3, row-major, aligned with `img`.
pub fn evaluate(
    img: &PointImage,
    pred: &[f32],
    gt: &[f32],
    gt_valid: &[bool],
    intr: &CameraIntrinsics,
) -> Result<EvalReport> {
    let n = img.n_cells();
    if pred.len() != n * 3 || gt.len() != n * 3 || gt_valid.len() != n {
        return Err(Error::Shape("evaluate: buffer sizes".into()));
    }
    let (pred2d, pok) = project_flow_2d(img, pred, intr)?;
    let (gt2d, gok) = project_flow_2d(img, gt, intr)?;

    let mut r = EvalReport::default();
    let mut n2d = 0usize;
    for i in 0..n {
        if !img.is_valid(i) || !gt_valid[i] {
            continue;
        }
        r.n_valid += 1;
        let diff = [
            pred[3 * i] - gt[3 * i],
            pred[3 * i + 1] - gt[3 * i + 1],
            pred[3 * i + 2] - gt[3 * i + 2],
        ];
        let e = norm3(&diff);
        let gt_norm = norm3(&gt[3 * i..3 * i + 3]);
        let rel = e / gt_norm.max(1e-12);
        r.epe3d += e;
        if e < 0.05 || rel < 0.05 {
            r.acc_strict += 1.0;
        }
        if e < 0.10 || rel < 0.10 {
            r.acc_relax += 1.0;
        }
        if e > 0.30 || rel > 0.10 {
            r.outliers += 1.0;
        }
        if pok[i] && gok[i] {
            n2d += 1;
            let du = (pred2d[2 * i] - gt2d[2 * i]) as f64;
            let dv = (pred2d[2 * i + 1] - gt2d[2 * i + 1]) as f64;
            let e2 = (du * du + dv * dv).sqrt();
            let g2 = {
                let (u, v) = (gt2d[2 * i] as f64, gt2d[2 * i + 1] as f64);
                (u * u + v * v).sqrt()
            };
            r.epe2d += e2;
            if e2 < 1.0 || e2 / g2.max(1e-12) < 0.05 {
                r.acc1px += 1.0;
            }
        }
    }
    if r.n_valid == 0 {
        return Err(Error::InvalidArgument("evaluate: no valid cells".into()));
    }
    let m = r.n_valid as f64;
    r.epe3d /= m;
    r.acc_strict /= m;
    r.acc_relax /= m;
    r.outliers /= m;
    if n2d > 0 {
        r.epe2d /= n2d as f64;
        r.acc1px /= n2d as f64;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{project_points, RawCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 16.0,
            cy: 12.0,
            width: 32,
            height: 24,
        }
    }

    fn two_cell_setup() -> (PointImage, Vec<f32>, Vec<f32>, Vec<bool>) {
        let ci = intr();
        let img = project_points(
            &RawCloud::new(vec![[0.0, 0.0, 2.0], [0.4, 0.0, 4.0]]),
            &ci,
            35.0,
        )
        .unwrap();
        assert_eq!(img.n_valid(), 2);
        let n = img.n_cells();
        let mut pred = vec![0.0f32; n * 3];
        let mut gt = vec![0.0f32; n * 3];
        let gt_valid = vec![true; n];
        // cell A: gt (1,0,0), pred (1.04,0,0): e=0.04 < 0.05, rel=0.04
        // cell B: gt (1,0,0), pred (1.2,0,0):  e=0.20, rel=0.20
        for i in 0..n {
            if !img.is_valid(i) {
                continue;
            }
            gt[3 * i] = 1.0;
            pred[3 * i] = if img.get(i)[2] < 3.0 { 1.04 } else { 1.2 };
        }
        (img, pred, gt, gt_valid)
    }

    #[test]
    fn two_cell_hand_case() {
        // EPE3D = (0.04 + 0.20) / 2 = 0.12; strict accuracy hits only the
        // first cell; outliers: 0.20 > 0.3? no, but rel 0.20 > 0.10 yes,
        // so exactly one of two.
        let (img, pred, gt, gt_valid) = two_cell_setup();
        let r = evaluate(&img, &pred, &gt, &gt_valid, &intr()).unwrap();
        assert_eq!(r.n_valid, 2);
        assert!((r.epe3d - 0.12).abs() < 1e-7, "epe3d={}", r.epe3d);
        assert_eq!(r.acc_strict, 0.5);
        assert_eq!(r.outliers, 0.5);
        // relax: 0.04 < 0.10 yes; 0.20 with rel 0.20: no. 0.5 as well.
        assert_eq!(r.acc_relax, 0.5);
    }

    #[test]
    fn perfect_prediction_is_all_accurate() {
        let (img, _, gt, gt_valid) = two_cell_setup();
        let r = evaluate(&img, &gt, &gt, &gt_valid, &intr()).unwrap();
        assert_eq!(r.epe3d, 0.0);
        assert_eq!(r.acc_strict, 1.0);
        assert_eq!(r.acc_relax, 1.0);
        assert_eq!(r.outliers, 0.0);
        assert_eq!(r.epe2d, 0.0);
        assert_eq!(r.acc1px, 1.0);
    }

    #[test]
    fn epe2d_single_point_oracle() {
        // p=(0,0,2), flow (0.2,0,0), fx=100: gt 2D flow (10,0).
        // pred flow (0.2,0.04,0): pred 2D (10,2): e2d = 2 px.
        let ci = intr();
        let img = project_points(&RawCloud::new(vec![[0.0, 0.0, 2.0]]), &ci, 35.0).unwrap();
        let n = img.n_cells();
        let i = (0..n).find(|&i| img.is_valid(i)).unwrap();
        let mut gt = vec![0.0f32; n * 3];
        let mut pred = vec![0.0f32; n * 3];
        gt[3 * i] = 0.2;
        pred[3 * i] = 0.2;
        pred[3 * i + 1] = 0.04;
        let r = evaluate(&img, &pred, &gt, &vec![true; n], &ci).unwrap();
        assert!((r.epe2d - 2.0).abs() < 1e-5, "epe2d={}", r.epe2d);
        assert_eq!(r.acc1px, 0.0); // 2 px and rel 0.2
    }

    #[test]
    fn error_monotone_under_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ci = intr();
        let pts: Vec<[f32; 3]> = (0..200)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(2.0..8.0),
                ]
            })
            .collect();
        let img = project_points(&RawCloud::new(pts), &ci, 35.0).unwrap();
        let n = img.n_cells();
        let gt: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let noise: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = 0.0;
        for &scale in &[0.01f32, 0.05, 0.2, 1.0] {
            let pred: Vec<f32> = (0..n * 3).map(|j| gt[j] + scale * noise[j]).collect();
            let r = evaluate(&img, &pred, &gt, &vec![true; n], &ci).unwrap();
            assert!(r.epe3d >= prev);
            prev = r.epe3d;
        }
    }

    #[test]
    fn invalid_and_masked_cells_ignored() {
        let (img, mut pred, gt, mut gt_valid) = two_cell_setup();
        // garbage outside the valid mask must not change anything
        let r0 = evaluate(&img, &pred, &gt, &gt_valid, &intr()).unwrap();
        for i in 0..img.n_cells() {
            if !img.is_valid(i) {
                pred[3 * i] = 1.0e6;
            }
        }
        let r1 = evaluate(&img, &pred, &gt, &gt_valid, &intr()).unwrap();
        assert_eq!(r0, r1);
        // masking one of the two cells drops it from the mean
        for i in 0..img.n_cells() {
            if img.is_valid(i) && img.get(i)[2] > 3.0 {
                gt_valid[i] = false;
            }
        }
        let r2 = evaluate(&img, &pred, &gt, &gt_valid, &intr()).unwrap();
        assert_eq!(r2.n_valid, 1);
        assert!((r2.epe3d - 0.04).abs() < 1e-7);
    }

    #[test]
    fn rejects_empty_and_misshapen_input() {
        let ci = intr();
        let img = PointImage::new_invalid(ci.height, ci.width);
        let n = img.n_cells();
        assert!(evaluate(&img, &vec![0.0; n * 3], &vec![0.0; n * 3], &vec![true; n], &ci).is_err());
        let (img2, pred, gt, gt_valid) = two_cell_setup();
        assert!(evaluate(&img2, &pred[..3], &gt, &gt_valid, &ci).is_err());
    }
}
