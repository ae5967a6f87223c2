//! Attentive feature correlation with warping projection.
//!
//! Warped coordinates stay at their ORIGINAL grid slots; a separate
//! H×W×2 warp index holds each warped point's projected position and is
//! used only to center the correspondence window on PC2. Nothing is
//! merged, so the PC1 validity mask is preserved bit-exactly — the
//! mechanism the reproject-merge ablation arm deliberately breaks.

use std::rc::Rc;

use crate::grid::{CameraIntrinsics, PointImage};
use crate::grouping::{group_windowed, KernelSpec, NeighborTable};
use crate::params::{mlp_forward, MlpVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Projected integer coordinates of warped points.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpIndex {
    pub h: usize,
    pub w: usize,
    /// (u, v) per cell; defined only where the source cell is valid.
    pub uv: Vec<[i32; 2]>,
    pub in_frame: Vec<bool>,
}

/// Flow embedding features at PC1 slots (never re-binned).
pub struct FlowEmbedding {
    pub e: Var,
    pub valid: Vec<bool>,
}

/// Add the coarse flow to PC1. Warped coordinates are stored at the
/// original slots; the validity mask is identical to PC1's. The warp
/// index applies the pixel rule to the warped coordinates; `in_frame`
/// is false when the projection leaves the grid or warped z ≤ 0.
pub fn warp(
    pc1: &PointImage,
    coarse_flow: &[f32],
    intr: &CameraIntrinsics,
) -> (PointImage, WarpIndex) {
    assert_eq!(coarse_flow.len(), pc1.n_cells() * 3, "warp: flow shape");
    let mut warped = PointImage::new_invalid(pc1.h, pc1.w);
    let mut widx = WarpIndex {
        h: pc1.h,
        w: pc1.w,
        uv: vec![[0, 0]; pc1.n_cells()],
        in_frame: vec![false; pc1.n_cells()],
    };
    for i in 0..pc1.n_cells() {
        if !pc1.is_valid(i) {
            continue;
        }
        let p = pc1.get(i);
        let q = [
            p[0] + coarse_flow[3 * i],
            p[1] + coarse_flow[3 * i + 1],
            p[2] + coarse_flow[3 * i + 2],
        ];
        warped.set(i, q);
        if let Some((u, v)) = intr.pixel_of(q) {
            if intr.contains(u, v) {
                widx.uv[i] = [u as i32, v as i32];
                widx.in_frame[i] = true;
            }
        }
    }
    (warped, widx)
}

/// A warp index that points every valid cell at itself (zero-flow /
/// no-warp search centering).
pub fn identity_warp_index(pc1: &PointImage) -> WarpIndex {
    let mut widx = WarpIndex {
        h: pc1.h,
        w: pc1.w,
        uv: vec![[0, 0]; pc1.n_cells()],
        in_frame: vec![false; pc1.n_cells()],
    };
    for v in 0..pc1.h {
        for u in 0..pc1.w {
            let i = pc1.idx(v, u);
            if pc1.is_valid(i) {
                widx.uv[i] = [u as i32, v as i32];
                widx.in_frame[i] = true;
            }
        }
    }
    widx
}

/// Stage-1 candidate search: PC2 neighbors in a window centered at each
/// slot's warp index, filtered by 3D distance from the given center
/// coordinates. Public so the oracle-equivalence property can call it
/// with brute-force sorting.
pub fn correspondence_search(
    center_img: &PointImage,
    widx: &WarpIndex,
    pc2: &PointImage,
    spec: &KernelSpec,
    full_sort: bool,
) -> NeighborTable {
    let n = center_img.n_cells();
    let xyz: Vec<[f32; 3]> = (0..n).map(|i| center_img.get(i)).collect();
    let valid: Vec<bool> = (0..n)
        .map(|i| center_img.is_valid(i) && widx.in_frame[i])
        .collect();
    let pos: Vec<(i64, i64)> = (0..n)
        .map(|i| (widx.uv[i][1] as i64, widx.uv[i][0] as i64))
        .collect();
    group_windowed(&xyz, &valid, &pos, pc2, spec, full_sort)
}

fn neighbor_geometry(
    centers: &PointImage,
    source: &PointImage,
    table: &NeighborTable,
) -> (Tensor, Tensor) {
    let (n, k) = (table.n_centers, table.k);
    let mut dir = vec![0.0f64; n * k * 3];
    let mut dist = vec![0.0f64; n * k];
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
                    dir[slot * 3 + d] = (p[d] - c[d]) as f64;
                }
                dist[slot] = table.dists[slot] as f64;
            }
        }
    }
    (
        Tensor::from_vec(&[n, k, 3], dir).unwrap(),
        Tensor::from_vec(&[n, k, 1], dist).unwrap(),
    )
}

/// One attentive aggregation stage: scores from
/// MLP(direction ⊕ distance ⊕ center feature ⊕ neighbor feature),
/// masked softmax over valid neighbors, weighted sum of per-neighbor
/// values.
#[allow(clippy::too_many_arguments)]
fn attentive_stage(
    tape: &mut Tape,
    centers: &PointImage,
    source: &PointImage,
    table: &NeighborTable,
    center_f: Var,
    source_f: Var,
    w_att: &MlpVars,
    values: StageValues,
) -> Var {
    let k = table.k;
    let (dir_t, dist_t) = neighbor_geometry(centers, source, table);
    let dir = tape.constant(dir_t);
    let dist = tape.constant(dist_t);
    let f_n = crate::grouping::gather(tape, source_f, table);
    let f_c = tape.expand_k(center_f, k);
    let score_in = tape.concat_last(&[dir, dist, f_c, f_n]);
    let scores = mlp_forward(tape, w_att, score_in);
    let scores = tape.reshape(scores, &[table.n_centers, k]);
    let att = tape.softmax_k(scores, table.valid_rc());
    let vals = match values {
        StageValues::Mlp(w_val) => {
            let val_in = tape.concat_last(&[f_n, dir]);
            mlp_forward(tape, &w_val, val_in)
        }
        StageValues::Neighbors => f_n,
    };
    tape.weighted_sum_k(att, vals)
}

enum StageValues {
    /// Values are MLP(neighbor feature ⊕ direction).
    Mlp(MlpVars),
    /// Values are the gathered neighbor features themselves.
    Neighbors,
}

/// Double attentive flow embedding. Stage 1 searches PC2 in a window
/// centered at each slot's warp index with distances measured from the
/// warped coordinates; stage 2 re-aggregates stage-1 embeddings over
/// PC1 self-neighbors around the original slots. Slots that are not
/// in-frame or found no PC2 neighbor receive a zero embedding and are
/// flagged.
#[allow(clippy::too_many_arguments)]
pub fn correlate(
    tape: &mut Tape,
    warped: &PointImage,
    widx: &WarpIndex,
    pc1: &PointImage,
    pc2: &PointImage,
    f1: Var,
    f2: Var,
    spec: &KernelSpec,
    spec2: &KernelSpec,
    w_att1: &MlpVars,
    w_att2: &MlpVars,
    w_val: &MlpVars,
) -> FlowEmbedding {
    let n = pc1.n_cells();
    // stage 1: correspondence window on PC2 at the warp index
    let table1 = correspondence_search(warped, widx, pc2, spec, false);
    let e1 = attentive_stage(
        tape,
        warped,
        pc2,
        &table1,
        f1,
        f2,
        w_att1,
        StageValues::Mlp(w_val.clone()),
    );
    let has_corr = table1.rows_with_neighbors();
    let flags1: Vec<bool> = (0..n)
        .map(|i| pc1.is_valid(i) && widx.in_frame[i] && has_corr[i])
        .collect();
    let e1 = tape.mask_rows(e1, Rc::new(flags1.clone()));

    // stage 2: self-neighbors on the PC1 grid, original coordinates,
    // restricted to cells that actually carry a stage-1 embedding
    let mut emb_src = pc1.clone();
    for i in 0..n {
        if !flags1[i] {
            emb_src.clear(i);
        }
    }
    let table2 = crate::grouping::group_neighbors(
        pc1,
        &emb_src,
        spec2,
        crate::grouping::GridMap::Identity,
    );
    let e2 = attentive_stage(
        tape,
        pc1,
        &emb_src,
        &table2,
        e1,
        e1,
        w_att2,
        StageValues::Neighbors,
    );
    let e2 = tape.mask_rows(e2, Rc::new(flags1.clone()));
    FlowEmbedding {
        e: e2,
        valid: flags1,
    }
}

/// Warping-mode arms shared by the network and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpMode {
    /// Warping projection: warped coords at original slots, warp-index
    /// window centering.
    Full,
    /// No warping: window centered at the original cell, distances from
    /// original coordinates; coarse flow still added at refine time.
    NoWarp,
    /// Re-project warped points into a fresh grid, merging collisions
    /// by nearest z; merged-away points take the winning point's
    /// embedding (nearest-valid-neighbor copy).
    Reproject,
}

/// Ablation arm A ("w/o warping operation"): ignore the coarse flow in
/// the search entirely.
#[allow(clippy::too_many_arguments)]
pub fn correlate_no_warp(
    tape: &mut Tape,
    pc1: &PointImage,
    pc2: &PointImage,
    f1: Var,
    f2: Var,
    spec: &KernelSpec,
    spec2: &KernelSpec,
    w_att1: &MlpVars,
    w_att2: &MlpVars,
    w_val: &MlpVars,
) -> FlowEmbedding {
    let widx = identity_warp_index(pc1);
    correlate(
        tape, pc1, &widx, pc1, pc2, f1, f2, spec, spec2, w_att1, w_att2, w_val,
    )
}

/// Ablation arm B ("w/o warping projection"): re-project the warped
/// points into a new grid with z-buffer merging, correlate there, then
/// copy embeddings back through the merge map.
#[allow(clippy::too_many_arguments)]
pub fn correlate_reproject(
    tape: &mut Tape,
    warped: &PointImage,
    pc1: &PointImage,
    pc2: &PointImage,
    f1: Var,
    f2: Var,
    intr: &CameraIntrinsics,
    spec: &KernelSpec,
    spec2: &KernelSpec,
    w_att1: &MlpVars,
    w_att2: &MlpVars,
    w_val: &MlpVars,
) -> FlowEmbedding {
    let n = pc1.n_cells();
    // z-buffer re-projection; remember which original slot won each cell
    let mut merged = PointImage::new_invalid(pc1.h, pc1.w);
    let mut winner: Vec<u32> = vec![0; n];
    let mut target: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        if !pc1.is_valid(i) {
            continue;
        }
        let q = warped.get(i);
        let (u, v) = match intr.pixel_of(q) {
            Some(uv) => uv,
            None => continue,
        };
        if !intr.contains(u, v) {
            continue;
        }
        let cell = merged.idx(v as usize, u as usize);
        target[i] = Some(cell);
        if !merged.is_valid(cell) || q[2] < merged.get(cell)[2] {
            merged.set(cell, q);
            winner[cell] = i as u32;
        }
    }
    // pull features of winning points onto the merged grid
    let merged_valid: Vec<bool> = (0..n).map(|i| merged.is_valid(i)).collect();
    let f_merged = tape.gather_rows(
        f1,
        Rc::new(winner.clone()),
        Rc::new(merged_valid.clone()),
        n,
        1,
    );
    let f_merged = {
        let c = tape.value(f_merged).shape()[2];
        tape.reshape(f_merged, &[n, c])
    };
    let widx = identity_warp_index(&merged);
    let emb = correlate(
        tape, &merged, &widx, &merged, pc2, f_merged, f2, spec, spec2, w_att1, w_att2, w_val,
    );
    // interpolate embeddings back: each original point takes the
    // embedding computed at the cell it projected into
    let mut back_idx = vec![0u32; n];
    let mut back_valid = vec![false; n];
    for i in 0..n {
        if let Some(cell) = target[i] {
            if emb.valid[cell] {
                back_idx[i] = cell as u32;
                back_valid[i] = true;
            }
        }
    }
    let e_back = tape.gather_rows(emb.e, Rc::new(back_idx), Rc::new(back_valid.clone()), n, 1);
    let e_back = {
        let c = tape.value(e_back).shape()[2];
        tape.reshape(e_back, &[n, c])
    };
    FlowEmbedding {
        e: e_back,
        valid: back_valid,
    }
}

/// Residual flow prediction: refined embedding =
/// MLP(warped PC1 features ⊕ embedding ⊕ upsampled coarse embedding);
/// residual = MLP_flow(refined embedding). Flagged slots get a zero
/// residual.
pub fn predict_residual(
    tape: &mut Tape,
    warped_f1: Var,
    emb: &FlowEmbedding,
    up_emb: Var,
    w_pred: &MlpVars,
    w_flow: &MlpVars,
) -> (Var, Var) {
    let cat = tape.concat_last(&[warped_f1, emb.e, up_emb]);
    let refined = mlp_forward(tape, w_pred, cat);
    let residual = mlp_forward(tape, w_flow, refined);
    let residual = tape.mask_rows(residual, Rc::new(emb.valid.clone()));
    (residual, refined)
}

/// Refined flow = coarse + residual, elementwise, exact.
pub fn refine(tape: &mut Tape, coarse: Var, residual: Var) -> Var {
    tape.add(coarse, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{project_points, RawCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 60.0,
            fy: 60.0,
            cx: 16.0,
            cy: 12.0,
            width: 32,
            height: 24,
        }
    }

    fn random_scene(seed: u64, n: usize) -> PointImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.5..1.5),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(2.0..8.0),
                ]
            })
            .collect();
        project_points(&RawCloud::new(points), &intr(), 35.0).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let pc1 = random_scene(1, 300);
        let flow = vec![0.0f32; pc1.n_cells() * 3];
        let (warped, widx) = warp(&pc1, &flow, &intr());
        assert_eq!(warped, pc1);
        for v in 0..pc1.h {
            for u in 0..pc1.w {
                let i = pc1.idx(v, u);
                if pc1.is_valid(i) {
                    assert!(widx.in_frame[i]);
                    assert_eq!(widx.uv[i], [u as i32, v as i32]);
                }
            }
        }
    }

    #[test]
    fn many_to_one_warp_preserves_validity_mask() {
        // two cells warped onto the same target pixel: BOTH retained
        let ci = intr();
        let pc1 = {
            let pts = vec![[0.0, 0.0, 2.0], [0.5, 0.0, 2.0]];
            project_points(&RawCloud::new(pts), &ci, 35.0).unwrap()
        };
        assert_eq!(pc1.n_valid(), 2);
        let mut flow = vec![0.0f32; pc1.n_cells() * 3];
        // move the second point exactly onto the first
        for i in 0..pc1.n_cells() {
            if pc1.is_valid(i) && pc1.get(i)[0] > 0.1 {
                flow[3 * i] = -0.5;
            }
        }
        let (warped, widx) = warp(&pc1, &flow, &ci);
        assert_eq!(warped.valid_mask(), pc1.valid_mask());
        assert_eq!(warped.n_valid(), 2);
        // both warp indices point at the same cell
        let mut uvs: Vec<[i32; 2]> = (0..pc1.n_cells())
            .filter(|&i| pc1.is_valid(i))
            .map(|i| widx.uv[i])
            .collect();
        uvs.dedup();
        assert_eq!(uvs.len(), 1);
        let _ = widx;
    }

    #[test]
    fn behind_camera_flow_flagged_but_slot_stays_valid() {
        let ci = intr();
        let pc1 = project_points(&RawCloud::new(vec![[0.0, 0.0, 2.0]]), &ci, 35.0).unwrap();
        let mut flow = vec![0.0f32; pc1.n_cells() * 3];
        let i = (0..pc1.n_cells()).find(|&i| pc1.is_valid(i)).unwrap();
        flow[3 * i + 2] = -3.0; // z + fz <= 0
        let (warped, widx) = warp(&pc1, &flow, &ci);
        assert!(warped.is_valid(i));
        assert!(!widx.in_frame[i]);
        // oracle re-projection agrees: pixel rule refuses z <= 0
        assert!(ci.pixel_of(warped.get(i)).is_none());
    }

    #[test]
    fn warp_mask_preserved_on_random_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..50 {
            let pc1 = random_scene(seed, 400);
            let flow: Vec<f32> = (0..pc1.n_cells() * 3)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let (warped, _) = warp(&pc1, &flow, &intr());
            assert_eq!(warped.valid_mask(), pc1.valid_mask());
        }
    }

    fn tiny_mlps(tape: &mut Tape, c: usize, e: usize, seed: u64) -> (MlpVars, MlpVars, MlpVars) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rt = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
        };
        let att1_w = tape.var(rt(&[4 + 2 * c, 1]));
        let att1_b = tape.var(rt(&[1]));
        let att2_w = tape.var(rt(&[4 + 2 * e, 1]));
        let att2_b = tape.var(rt(&[1]));
        let val_w = tape.var(rt(&[c + 3, e]));
        let val_b = tape.var(rt(&[e]));
        (
            MlpVars {
                layers: vec![(att1_w, att1_b)],
                activate_last: false,
            },
            MlpVars {
                layers: vec![(att2_w, att2_b)],
                activate_last: false,
            },
            MlpVars {
                layers: vec![(val_w, val_b)],
                activate_last: false,
            },
        )
    }

    #[test]
    fn identity_frame_pair_nearest_neighbor_is_self() {
        let pc1 = random_scene(3, 300);
        let pc2 = pc1.clone();
        let flow = vec![0.0f32; pc1.n_cells() * 3];
        let (warped, widx) = warp(&pc1, &flow, &intr());
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let table = correspondence_search(&warped, &widx, &pc2, &spec, false);
        for i in 0..pc1.n_cells() {
            if pc1.is_valid(i) && widx.in_frame[i] {
                assert_eq!(table.indices[i * 4], i as u32);
                assert_eq!(table.dists[i * 4], 0.0);
            }
        }
    }

    #[test]
    fn stage1_window_matches_brute_force_at_warp_index() {
        let pc1 = random_scene(5, 350);
        let pc2 = random_scene(6, 350);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flow: Vec<f32> = (0..pc1.n_cells() * 3)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let (warped, widx) = warp(&pc1, &flow, &intr());
        let spec = KernelSpec::new(5, 5, 8, 3.0);
        let fast = correspondence_search(&warped, &widx, &pc2, &spec, false);
        let brute = correspondence_search(&warped, &widx, &pc2, &spec, true);
        assert_eq!(fast, brute);
    }

    #[test]
    fn stage1_attention_rows_sum_to_one() {
        let pc1 = random_scene(9, 300);
        let pc2 = random_scene(10, 300);
        let n = pc1.n_cells();
        let c = 3;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f1 = tape.constant(
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let f2 = tape.constant(
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let (w_att1, _w_att2, _w_val) = tiny_mlps(&mut tape, c, 2, 12);
        let flow = vec![0.0f32; n * 3];
        let (warped, widx) = warp(&pc1, &flow, &intr());
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let table = correspondence_search(&warped, &widx, &pc2, &spec, false);
        let (dir_t, dist_t) = neighbor_geometry(&warped, &pc2, &table);
        let dir = tape.constant(dir_t);
        let dist = tape.constant(dist_t);
        let f_n = crate::grouping::gather(&mut tape, f2, &table);
        let f_c = tape.expand_k(f1, 4);
        let score_in = tape.concat_last(&[dir, dist, f_c, f_n]);
        let scores = mlp_forward(&mut tape, &w_att1, score_in);
        let scores = tape.reshape(scores, &[n, 4]);
        let att = tape.softmax_k(scores, table.valid_rc());
        let ad = tape.value(att).data();
        for i in 0..n {
            let any = table.valid[i * 4..(i + 1) * 4].iter().any(|&b| b);
            let sum: f64 = ad[i * 4..(i + 1) * 4].iter().sum();
            if any {
                assert!((sum - 1.0).abs() < 1e-9);
            } else {
                assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn zero_flow_head_keeps_coarse_flow() {
        let pc1 = random_scene(13, 200);
        let pc2 = pc1.clone();
        let n = pc1.n_cells();
        let c = 2;
        let e = 2;
        let mut tape = Tape::new();
        let f1 = tape.constant(Tensor::zeros(&[n, c]));
        let f2 = tape.constant(Tensor::zeros(&[n, c]));
        let (w_att1, w_att2, w_val) = tiny_mlps(&mut tape, c, e, 14);
        let flow = vec![0.0f32; n * 3];
        let (warped, widx) = warp(&pc1, &flow, &intr());
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let spec2 = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let emb = correlate(
            &mut tape, &warped, &widx, &pc1, &pc2, f1, f2, &spec, &spec2, &w_att1, &w_att2,
            &w_val,
        );
        // zero weights in the flow head => zero residual => refined = coarse
        let w_pred = MlpVars {
            layers: vec![
                (tape.var(Tensor::zeros(&[c + 2 * e, e])), tape.var(Tensor::zeros(&[e]))),
            ],
            activate_last: false,
        };
        let w_flow = MlpVars {
            layers: vec![(tape.var(Tensor::zeros(&[e, 3])), tape.var(Tensor::zeros(&[3])))],
            activate_last: false,
        };
        let up = tape.constant(Tensor::zeros(&[n, e]));
        let (residual, _) = predict_residual(&mut tape, f1, &emb, up, &w_pred, &w_flow);
        assert!(tape.value(residual).data().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let coarse = tape.constant(
            Tensor::from_vec(&[n, 3], (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let refined = refine(&mut tape, coarse, residual);
        assert_eq!(tape.value(refined).data(), tape.value(coarse).data());
    }

    #[test]
    fn flagged_slot_gets_zero_residual() {
        let ci = intr();
        let pc1 = project_points(
            &RawCloud::new(vec![[0.0, 0.0, 2.0], [0.3, 0.3, 3.0]]),
            &ci,
            35.0,
        )
        .unwrap();
        let pc2 = PointImage::new_invalid(ci.height, ci.width); // no correspondences at all
        let n = pc1.n_cells();
        let (c, e) = (2, 2);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let f1 = tape.constant(
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let f2 = tape.constant(Tensor::zeros(&[n, c]));
        let (w_att1, w_att2, w_val) = tiny_mlps(&mut tape, c, e, 17);
        let flow = vec![0.0f32; n * 3];
        let (warped, widx) = warp(&pc1, &flow, &ci);
        let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
        let emb = correlate(
            &mut tape, &warped, &widx, &pc1, &pc2, f1, f2, &spec, &spec, &w_att1, &w_att2, &w_val,
        );
        assert!(emb.valid.iter().all(|&b| !b));
        let mut rng2 = ChaCha8Rng::seed_from_u64(18);
        let mut rt = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng2.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let w_pred = MlpVars {
            layers: vec![(tape.var(rt(&[c + 2 * e, e])), tape.var(rt(&[e])))],
            activate_last: false,
        };
        let w_flow = MlpVars {
            layers: vec![(tape.var(rt(&[e, 3])), tape.var(rt(&[3])))],
            activate_last: false,
        };
        let up = tape.constant(Tensor::zeros(&[n, e]));
        let (residual, _) = predict_residual(&mut tape, f1, &emb, up, &w_pred, &w_flow);
        assert!(tape.value(residual).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_accumulates_left_to_right_exactly() {
        let mut tape = Tape::new();
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut rt = || {
            Tensor::from_vec(
                &[n, 3],
                (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (c0, r1, r2, r3) = (rt(), rt(), rt(), rt());
        let coarse = tape.constant(c0.clone());
        let rv1 = tape.constant(r1.clone());
        let rv2 = tape.constant(r2.clone());
        let rv3 = tape.constant(r3.clone());
        let f1 = refine(&mut tape, coarse, rv1);
        let f2 = refine(&mut tape, f1, rv2);
        let f3 = refine(&mut tape, f2, rv3);
        let got = tape.value(f3).data();
        for i in 0..n * 3 {
            let want = ((c0.data()[i] + r1.data()[i]) + r2.data()[i]) + r3.data()[i];
            assert_eq!(got[i], want);
        }
    }

    #[test]
    fn no_warp_arm_equals_full_at_zero_flow() {
        let pc1 = random_scene(21, 250);
        let pc2 = random_scene(22, 250);
        let n = pc1.n_cells();
        let (c, e) = (2, 2);
        let run = |arm_a: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let f1 = tape.constant(
                Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
            let f2 = tape.constant(
                Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
            let (w_att1, w_att2, w_val) = tiny_mlps(&mut tape, c, e, 24);
            let spec = KernelSpec::new(3, 3, 4, f32::INFINITY);
            let emb = if arm_a {
                correlate_no_warp(
                    &mut tape, &pc1, &pc2, f1, f2, &spec, &spec, &w_att1, &w_att2, &w_val,
                )
            } else {
                let flow = vec![0.0f32; n * 3];
                let (warped, widx) = warp(&pc1, &flow, &intr());
                correlate(
                    &mut tape, &warped, &widx, &pc1, &pc2, f1, f2, &spec, &spec, &w_att1,
                    &w_att2, &w_val,
                )
            };
            tape.value(emb.e).data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn reproject_collision_copies_winner_embedding() {
        let ci = intr();
        // two points one ray apart in z: after a warp pushing them together
        // they re-project into the same cell and one merges away
        let pc1 = project_points(
            &RawCloud::new(vec![[0.0, 0.0, 2.0], [0.5, 0.0, 2.0]]),
            &ci,
            35.0,
        )
        .unwrap();
        assert_eq!(pc1.n_valid(), 2);
        let n = pc1.n_cells();
        let mut flow = vec![0.0f32; n * 3];
        for i in 0..n {
            if pc1.is_valid(i) && pc1.get(i)[0] > 0.25 {
                flow[3 * i] = -0.5;
                flow[3 * i + 2] = 0.5; // lands behind the other point
            }
        }
        let pc2 = pc1.clone();
        let (c, e) = (2, 2);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let f1 = tape.constant(
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let f2 = tape.constant(
            Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
        );
        let (w_att1, w_att2, w_val) = tiny_mlps(&mut tape, c, e, 26);
        let spec = KernelSpec::new(5, 5, 4, f32::INFINITY);
        let (warped, _) = warp(&pc1, &flow, &ci);
        let emb = correlate_reproject(
            &mut tape, &warped, &pc1, &pc2, f1, f2, &ci, &spec, &spec, &w_att1, &w_att2, &w_val,
        );
        // validity popcount preserved only via the copy
        let n_emb = emb.valid.iter().filter(|&&b| b).count();
        assert_eq!(n_emb, 2);
        let ed = tape.value(emb.e).data();
        let cells: Vec<usize> = (0..n).filter(|&i| pc1.is_valid(i)).collect();
        // both original slots carry the SAME embedding (one computed, one copied)
        assert_eq!(
            &ed[cells[0] * e..(cells[0] + 1) * e],
            &ed[cells[1] * e..(cells[1] + 1) * e]
        );
    }
}
