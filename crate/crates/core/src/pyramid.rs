//! Point-feature pyramid: strided center selection, set-conv
//! downsampling (relative-coordinate MLP + max over neighbors) and
//! learned upsampling used by the refinement path.

use std::rc::Rc;

use crate::grid::PointImage;
use crate::grouping::{brute_force_group, group_neighbors, GridMap, KernelSpec};
use crate::params::{mlp_forward, MlpVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One level of the pyramid: a strided point grid with aligned features
/// living on a tape.
pub struct PyramidLevel {
    pub level: usize,
    /// Cumulative stride relative to the full-resolution grid.
    pub stride: usize,
    pub points: PointImage,
    pub features: Var,
}

/// Strided center selection: output cell (i, j) takes source cell
/// (i·s + s/2, j·s + s/2); coordinates and validity are inherited, never
/// resampled.
pub fn select_centers(src: &PointImage, stride: usize) -> PointImage {
    assert!(stride >= 2);
    let (oh, ow) = (src.h / stride, src.w / stride);
    let mut out = PointImage::new_invalid(oh, ow);
    for i in 0..oh {
        for j in 0..ow {
            let (sv, su) = (i * stride + stride / 2, j * stride + stride / 2);
            let si = src.idx(sv, su);
            if src.is_valid(si) {
                out.set(out.idx(i, j), src.get(si));
            }
        }
    }
    out
}

/// Relative neighbor coordinates (x_ik − x_i) as an n×K×3 constant.
/// Invalid slots hold zeros.
pub(crate) fn relative_coords(
    centers: &PointImage,
    source: &PointImage,
    table: &crate::grouping::NeighborTable,
) -> Tensor {
    let (n, k) = (table.n_centers, table.k);
    let mut data = vec![0.0f64; n * k * 3];
    for i in 0..n {
        if !centers.is_valid(i) {
            continue;
        }
        let c = centers.get(i);
        for s in 0..k {
            let slot = i * k + s;
            if table.valid[slot] {
                let p = source.get(table.indices[slot] as usize);
                for d in 0..3 {
                    data[slot * 3 + d] = (p[d] - c[d]) as f64;
                }
            }
        }
    }
    Tensor::from_vec(&[n, k, 3], data).unwrap()
}

/// Set-conv downsampling: strided centers, windowed neighbor grouping
/// against the finer source, then per-channel max of
/// MLP(relative coordinate ⊕ neighbor feature). Centers with zero
/// valid neighbors become invalid with zero features.
#[allow(clippy::too_many_arguments)]
pub fn setconv_down(
    tape: &mut Tape,
    src_points: &PointImage,
    src_features: Var,
    level: usize,
    stride: usize,
    spec: &KernelSpec,
    mlp: &MlpVars,
    whole_grid: bool,
) -> PyramidLevel {
    let mut centers = select_centers(src_points, stride);
    let eff_spec = if whole_grid {
        KernelSpec::whole_grid(src_points.h, src_points.w, spec.k, spec.max_dist)
    } else {
        *spec
    };
    let map = GridMap::Strided { stride };
    let table = if whole_grid {
        brute_force_group(&centers, src_points, &eff_spec, map)
    } else {
        group_neighbors(&centers, src_points, &eff_spec, map)
    };
    let rel = tape.constant(relative_coords(&centers, src_points, &table));
    let gathered = crate::grouping::gather(tape, src_features, &table);
    let cat = tape.concat_last(&[rel, gathered]);
    let h = mlp_forward(tape, mlp, cat);
    let (pooled, rows_ok) = tape.maxpool_k(h, table.valid_rc());
    // centers whose window held no qualifying neighbor drop out
    let mut mask = vec![false; centers.n_cells()];
    for i in 0..centers.n_cells() {
        mask[i] = centers.is_valid(i) && rows_ok[i];
        if !mask[i] && centers.is_valid(i) {
            centers.clear(i);
        }
    }
    let features = tape.mask_rows(pooled, Rc::new(mask));
    PyramidLevel {
        level,
        stride,
        points: centers,
        features,
    }
}

/// Learned upsampling (Set Upconv): for each valid fine point, aggregate
/// coarse neighbors in a window around its strided position via
/// MLP(w1) + max, then mix with the skip features through MLP(w2).
/// Fine points with no coarse neighbor in reach get a zero aggregate.
#[allow(clippy::too_many_arguments)]
pub fn set_upconv(
    tape: &mut Tape,
    coarse_points: &PointImage,
    coarse_features: Var,
    fine_points: &PointImage,
    fine_skip: Var,
    stride: usize,
    spec: &KernelSpec,
    w1: &MlpVars,
    w2: &MlpVars,
) -> Var {
    let map = GridMap::Inverse { stride };
    let table = group_neighbors(fine_points, coarse_points, spec, map);
    let rel = tape.constant(relative_coords(fine_points, coarse_points, &table));
    let gathered = crate::grouping::gather(tape, coarse_features, &table);
    let cat = tape.concat_last(&[rel, gathered]);
    let h = mlp_forward(tape, w1, cat);
    let (b, _) = tape.maxpool_k(h, table.valid_rc());
    let mixed = tape.concat_last(&[b, fine_skip]);
    let out = mlp_forward(tape, w2, mixed);
    tape.mask_rows(out, Rc::new(fine_points.valid_mask().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::params::MlpVars;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64, h: usize, w: usize, density: f64) -> PointImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = PointImage::new_invalid(h, w);
        for i in 0..h * w {
            if rng.gen_bool(density) {
                img.set(
                    i,
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(1.0..5.0),
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn stride2_on_4x4_picks_odd_cells() {
        let mut src = PointImage::new_invalid(4, 4);
        for v in 0..4 {
            for u in 0..4 {
                src.set(src.idx(v, u), [u as f32, v as f32, 1.0]);
            }
        }
        let c = select_centers(&src, 2);
        assert_eq!((c.h, c.w), (2, 2));
        assert_eq!(c.get(c.idx(0, 0)), [1.0, 1.0, 1.0]);
        assert_eq!(c.get(c.idx(0, 1)), [3.0, 1.0, 1.0]);
        assert_eq!(c.get(c.idx(1, 0)), [1.0, 3.0, 1.0]);
        assert_eq!(c.get(c.idx(1, 1)), [3.0, 3.0, 1.0]);
    }

    #[test]
    fn all_invalid_src_gives_all_invalid_centers() {
        let src = PointImage::new_invalid(8, 8);
        assert_eq!(select_centers(&src, 2).n_valid(), 0);
    }

    #[test]
    fn stride4_centers_appear_in_source() {
        let src = random_grid(3, 16, 16, 0.7);
        let c = select_centers(&src, 4);
        for i in 0..c.h {
            for j in 0..c.w {
                let ci = c.idx(i, j);
                let si = src.idx(i * 4 + 2, j * 4 + 2);
                assert_eq!(c.is_valid(ci), src.is_valid(si));
                if c.is_valid(ci) {
                    assert_eq!(c.get(ci), src.get(si));
                }
            }
        }
    }

    #[test]
    fn setconv_identity_mlp_maxes_relative_coords() {
        // features zero, MLP = identity on the coordinate block: output is
        // the per-channel max of relative coordinates, each within max_dist
        let src = random_grid(11, 8, 8, 0.8);
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::zeros(&[64, 2]));
        // weight (3+2)x3 picking out the first 3 input channels
        let mut wdata = vec![0.0; 5 * 3];
        for d in 0..3 {
            wdata[d * 3 + d] = 1.0;
        }
        let w = tape.var(Tensor::from_vec(&[5, 3], wdata).unwrap());
        let b = tape.var(Tensor::zeros(&[3]));
        let mlp = MlpVars {
            layers: vec![(w, b)],
            activate_last: false,
        };
        let max_dist = 2.5f32;
        let spec = KernelSpec::new(3, 3, 4, max_dist);
        let level = setconv_down(&mut tape, &src, feats, 1, 2, &spec, &mlp, false);

        // scalar oracle
        let centers = select_centers(&src, 2);
        let table = brute_force_group(&centers, &src, &spec, GridMap::Strided { stride: 2 });
        let out = tape.value(level.features).data();
        for i in 0..centers.n_cells() {
            if !level.points.is_valid(i) {
                for d in 0..3 {
                    assert_eq!(out[i * 3 + d], 0.0);
                }
                continue;
            }
            let c = centers.get(i);
            for d in 0..3 {
                let mut want = f64::NEG_INFINITY;
                for s in 0..table.k {
                    if table.valid[i * table.k + s] {
                        let p = src.get(table.indices[i * table.k + s] as usize);
                        want = want.max((p[d] - c[d]) as f64);
                    }
                }
                assert!((out[i * 3 + d] - want).abs() < 1e-9);
                assert!(out[i * 3 + d].abs() <= max_dist as f64 + 1e-6);
            }
        }
    }

    #[test]
    fn lone_point_pools_its_own_feature() {
        let mut src = PointImage::new_invalid(8, 8);
        src.set(src.idx(5, 5), [0.3, -0.2, 2.0]); // cell picked by stride 2 at (2,2)
        let mut tape = Tape::new();
        let mut fdata = vec![0.0; 64 * 2];
        fdata[src.idx(5, 5) * 2] = 7.0;
        fdata[src.idx(5, 5) * 2 + 1] = -3.0;
        let feats = tape.constant(Tensor::from_vec(&[64, 2], fdata).unwrap());
        // identity on the feature block
        let mut wdata = vec![0.0; 5 * 2];
        wdata[3 * 2] = 1.0;
        wdata[4 * 2 + 1] = 1.0;
        let w = tape.var(Tensor::from_vec(&[5, 2], wdata).unwrap());
        let b = tape.var(Tensor::zeros(&[2]));
        let mlp = MlpVars {
            layers: vec![(w, b)],
            activate_last: false,
        };
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let level = setconv_down(&mut tape, &src, feats, 1, 2, &spec, &mlp, false);
        let ci = level.points.idx(2, 2);
        assert!(level.points.is_valid(ci));
        // K self-duplicates, relative coordinate zero: output = MLP(0 ⊕ f)
        let out = tape.value(level.features).data();
        assert_eq!(out[ci * 2], 7.0);
        assert_eq!(out[ci * 2 + 1], -3.0);
    }

    #[test]
    fn operator_level_translation_invariance() {
        // translate all coordinates WITHOUT re-projecting: outputs unchanged
        let src = random_grid(17, 8, 8, 0.8);
        let mut shifted = src.clone();
        for i in 0..64 {
            if shifted.is_valid(i) {
                let p = shifted.get(i);
                shifted.set(i, [p[0] + 3.5, p[1] - 1.25, p[2] + 10.0]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fdata: Vec<f64> = (0..64 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wdata: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |points: &PointImage| -> Vec<f64> {
            let mut tape = Tape::new();
            let feats = tape.constant(Tensor::from_vec(&[64, 2], fdata.clone()).unwrap());
            let w = tape.var(Tensor::from_vec(&[5, 4], wdata.clone()).unwrap());
            let b = tape.var(Tensor::zeros(&[4]));
            let mlp = MlpVars {
                layers: vec![(w, b)],
                activate_last: true,
            };
            let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
            let level = setconv_down(&mut tape, points, feats, 1, 2, &spec, &mlp, false);
            tape.value(level.features).data().to_vec()
        };
        // exact invariance up to f32 rounding of the shifted coordinates
        let (a, b) = (run(&src), run(&shifted));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn upconv_zero_coarse_passes_skip_through_identity() {
        let coarse = random_grid(23, 4, 4, 0.9);
        let fine = random_grid(24, 8, 8, 0.9);
        let mut tape = Tape::new();
        let cf = tape.constant(Tensor::zeros(&[16, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let skip_data: Vec<f64> = (0..64 * 2).map(|_| rng.gen_range(0.1..1.0)).collect();
        let skip = tape.constant(Tensor::from_vec(&[64, 2], skip_data.clone()).unwrap());
        let w1v = tape.var(Tensor::zeros(&[5, 2]));
        let b1v = tape.var(Tensor::zeros(&[2]));
        let w1 = MlpVars {
            layers: vec![(w1v, b1v)],
            activate_last: true,
        };
        // w2 = identity on the skip block (last 2 of 4 inputs)
        let mut w2data = vec![0.0; 4 * 2];
        w2data[2 * 2] = 1.0;
        w2data[3 * 2 + 1] = 1.0;
        let w2v = tape.var(Tensor::from_vec(&[4, 2], w2data).unwrap());
        let b2v = tape.var(Tensor::zeros(&[2]));
        let w2 = MlpVars {
            layers: vec![(w2v, b2v)],
            activate_last: false,
        };
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let out = set_upconv(&mut tape, &coarse, cf, &fine, skip, 2, &spec, &w1, &w2);
        let od = tape.value(out).data();
        for i in 0..64 {
            for c in 0..2 {
                let want = if fine.is_valid(i) { skip_data[i * 2 + c] } else { 0.0 };
                assert!((od[i * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_coarse_point_broadcasts_uniform_aggregate() {
        let mut coarse = PointImage::new_invalid(4, 4);
        coarse.set(coarse.idx(1, 1), [0.0, 0.0, 2.0]);
        let fine = random_grid(31, 8, 8, 1.0);
        let mut tape = Tape::new();
        let mut cdata = vec![0.0; 16 * 2];
        cdata[coarse.idx(1, 1) * 2] = 4.0;
        cdata[coarse.idx(1, 1) * 2 + 1] = -2.0;
        let cf = tape.constant(Tensor::from_vec(&[16, 2], cdata).unwrap());
        let skip = tape.constant(Tensor::zeros(&[64, 1]));
        // w1 = identity on the coarse-feature block
        let mut w1data = vec![0.0; 5 * 2];
        w1data[3 * 2] = 1.0;
        w1data[4 * 2 + 1] = 1.0;
        let w1v = tape.var(Tensor::from_vec(&[5, 2], w1data).unwrap());
        let b1v = tape.var(Tensor::zeros(&[2]));
        let w1 = MlpVars {
            layers: vec![(w1v, b1v)],
            activate_last: false,
        };
        // w2 = identity on the aggregate block (first 2 of 3 inputs)
        let mut w2data = vec![0.0; 3 * 2];
        w2data[0] = 1.0;
        w2data[1 * 2 + 1] = 1.0;
        let w2v = tape.var(Tensor::from_vec(&[3, 2], w2data).unwrap());
        let b2v = tape.var(Tensor::zeros(&[2]));
        let w2 = MlpVars {
            layers: vec![(w2v, b2v)],
            activate_last: false,
        };
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let out = set_upconv(&mut tape, &coarse, cf, &fine, skip, 2, &spec, &w1, &w2);
        let od = tape.value(out).data();
        // every fine point whose window reaches the lone coarse cell gets (4, -2)
        let table = group_neighbors(&fine, &coarse, &spec, GridMap::Inverse { stride: 2 });
        for i in 0..64 {
            if !fine.is_valid(i) {
                continue;
            }
            let reached = table.valid[i * 4..(i + 1) * 4].iter().any(|&b| b);
            if reached {
                assert!((od[i * 2] - 4.0).abs() < 1e-12);
                assert!((od[i * 2 + 1] + 2.0).abs() < 1e-12);
            } else {
                assert_eq!(&od[i * 2..i * 2 + 2], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn upconv_grad_check() {
        let coarse = random_grid(41, 4, 4, 0.9);
        let fine = random_grid(42, 8, 8, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut rt = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = vec![
            rt(&[16, 2]), // coarse features
            rt(&[64, 2]), // skip features
            rt(&[5, 3]),
            rt(&[3]),
            rt(&[5, 2]),
            rt(&[2]),
        ];
        let err = grad_check(
            |tape, v| {
                let w1 = MlpVars {
                    layers: vec![(v[2], v[3])],
                    activate_last: true,
                };
                let w2 = MlpVars {
                    layers: vec![(v[4], v[5])],
                    activate_last: false,
                };
                let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
                let out = set_upconv(tape, &coarse, v[0], &fine, v[1], 2, &spec, &w1, &w2);
                tape.sum_all(out)
            },
            &inputs,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn downsampled_validity_is_monotone() {
        let src = random_grid(51, 16, 16, 0.5);
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::zeros(&[256, 2]));
        let w = tape.var(Tensor::zeros(&[5, 2]));
        let b = tape.var(Tensor::zeros(&[2]));
        let mlp = MlpVars {
            layers: vec![(w, b)],
            activate_last: false,
        };
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let level = setconv_down(&mut tape, &src, feats, 1, 2, &spec, &mlp, false);
        for i in 0..level.points.h {
            for j in 0..level.points.w {
                let ci = level.points.idx(i, j);
                if level.points.is_valid(ci) {
                    assert!(src.is_valid(src.idx(i * 2 + 1, j * 2 + 1)));
                }
            }
        }
    }
}
