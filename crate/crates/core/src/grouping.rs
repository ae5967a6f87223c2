//! Kernel Based Grouping: K nearest 3D neighbors of each center, found
//! by scanning only a k_h×k_w window on the 2D grid, with 3D distance
//! filtering of outliers. Reduces the O(n²) whole-cloud search to
//! O(n·k_s); `candidate_count` makes the bound a measured quantity.

use std::rc::Rc;

use rayon::prelude::*;

use crate::grid::PointImage;
use crate::tape::{Tape, Var};

/// Grouping window and neighbor budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    /// Window height in cells; odd.
    pub k_h: usize,
    /// Window width in cells; odd.
    pub k_w: usize,
    /// Number of neighbors to select.
    pub k: usize,
    /// Outlier radius in meters; may be infinite.
    pub max_dist: f32,
}

impl KernelSpec {
    pub fn new(k_h: usize, k_w: usize, k: usize, max_dist: f32) -> Self {
        assert!(k_h % 2 == 1 && k_w % 2 == 1, "window dims must be odd");
        assert!(k_h >= 1 && k_w >= 1 && k >= 1);
        KernelSpec { k_h, k_w, k, max_dist }
    }

    /// A window guaranteed to cover the whole source grid from any
    /// center: the "w/o kernel-based grouping" arm.
    pub fn whole_grid(h: usize, w: usize, k: usize, max_dist: f32) -> Self {
        KernelSpec::new(2 * h + 1, 2 * w + 1, k, max_dist)
    }

    pub fn window_cells(&self) -> usize {
        self.k_h * self.k_w
    }
}

/// How center-grid cells map onto source-grid cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridMap {
    /// Same grid.
    Identity,
    /// Centers are a strided subgrid of the source (downsampling):
    /// center (i, j) sits at source (i·s + s/2, j·s + s/2).
    Strided { stride: usize },
    /// Centers are finer than the source (upsampling): center (i, j)
    /// maps to source (i/s, j/s).
    Inverse { stride: usize },
}

impl GridMap {
    #[inline]
    pub fn source_pos(&self, v: usize, u: usize) -> (i64, i64) {
        match *self {
            GridMap::Identity => (v as i64, u as i64),
            GridMap::Strided { stride } => (
                (v * stride + stride / 2) as i64,
                (u * stride + stride / 2) as i64,
            ),
            GridMap::Inverse { stride } => ((v / stride) as i64, (u / stride) as i64),
        }
    }
}

/// Per-center list of K neighbor indices into the source grid.
///
/// Validity, distances and the total number of distance evaluations
/// performed ride along. Rows are distance-sorted ascending with ties
/// broken by smaller row-major source index; when fewer than K
/// candidates qualify the nearest one is duplicated to fill, and a
/// center with zero candidates gets an all-invalid row.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub n_centers: usize,
    pub k: usize,
    /// Row-major source indices, n_centers×K.
    pub indices: Vec<u32>,
    pub valid: Vec<bool>,
    pub dists: Vec<f32>,
    pub candidate_count: u64,
}

impl NeighborTable {
    fn empty(n_centers: usize, k: usize) -> Self {
        NeighborTable {
            n_centers,
            k,
            indices: vec![0; n_centers * k],
            valid: vec![false; n_centers * k],
            dists: vec![0.0; n_centers * k],
            candidate_count: 0,
        }
    }

    pub fn indices_rc(&self) -> Rc<Vec<u32>> {
        Rc::new(self.indices.clone())
    }

    pub fn valid_rc(&self) -> Rc<Vec<bool>> {
        Rc::new(self.valid.clone())
    }

    /// True per center when at least one neighbor slot is valid.
    pub fn rows_with_neighbors(&self) -> Vec<bool> {
        (0..self.n_centers)
            .map(|i| self.valid[i * self.k..(i + 1) * self.k].iter().any(|&b| b))
            .collect()
    }
}

#[inline]
fn dist3(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
fn better(d0: f32, i0: u32, d1: f32, i1: u32) -> bool {
    d0 < d1 || (d0 == d1 && i0 < i1)
}

struct RowOut {
    indices: Vec<u32>,
    valid: Vec<bool>,
    dists: Vec<f32>,
    candidates: u64,
}

fn empty_row(k: usize) -> RowOut {
    RowOut {
        indices: vec![0; k],
        valid: vec![false; k],
        dists: vec![0.0; k],
        candidates: 0,
    }
}

fn fill_row(k: usize, selected: &[(f32, u32)]) -> Vec<(f32, u32, bool)> {
    let mut out = Vec::with_capacity(k);
    if selected.is_empty() {
        return out;
    }
    for s in 0..k {
        let (d, i) = if s < selected.len() {
            selected[s]
        } else {
            selected[0] // duplicate the nearest qualifying neighbor
        };
        out.push((d, i, true));
    }
    out
}

/// Shared inner loop: per-center windowed candidate scan with an
/// explicit window center per center cell. Both public grouping routes
/// and the cost-volume correspondence search go through this.
pub(crate) fn group_windowed(
    center_xyz: &[[f32; 3]],
    center_valid: &[bool],
    window_pos: &[(i64, i64)], // (v, u) on the source grid
    source: &PointImage,
    spec: &KernelSpec,
    full_sort: bool,
) -> NeighborTable {
    let n = center_xyz.len();
    assert_eq!(center_valid.len(), n);
    assert_eq!(window_pos.len(), n);
    let k = spec.k;
    let (hh, hw) = ((spec.k_h / 2) as i64, (spec.k_w / 2) as i64);
    let (sh, sw) = (source.h as i64, source.w as i64);

    let rows: Vec<RowOut> = (0..n)
        .into_par_iter()
        .map(|ci| {
            if !center_valid[ci] {
                return empty_row(k);
            }
            let c = center_xyz[ci];
            let (wv, wu) = window_pos[ci];
            let v0 = (wv - hh).max(0);
            let v1 = (wv + hh).min(sh - 1);
            let u0 = (wu - hw).max(0);
            let u1 = (wu + hw).min(sw - 1);
            let mut candidates: u64 = 0;
            let mut selected: Vec<(f32, u32)> = Vec::new();
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let si = (v * sw + u) as usize;
                    if !source.is_valid(si) {
                        continue;
                    }
                    candidates += 1;
                    let d = dist3(c, source.get(si));
                    if d > spec.max_dist {
                        continue;
                    }
                    let cand = (d, si as u32);
                    if full_sort {
                        selected.push(cand);
                    } else {
                        // bounded insertion keeping the K best by (dist, index)
                        if selected.len() < k {
                            let pos = selected
                                .iter()
                                .position(|&(d0, i0)| better(cand.0, cand.1, d0, i0))
                                .unwrap_or(selected.len());
                            selected.insert(pos, cand);
                        } else if better(
                            cand.0,
                            cand.1,
                            selected[k - 1].0,
                            selected[k - 1].1,
                        ) {
                            let pos = selected
                                .iter()
                                .position(|&(d0, i0)| better(cand.0, cand.1, d0, i0))
                                .unwrap();
                            selected.insert(pos, cand);
                            selected.pop();
                        }
                    }
                }
            }
            if full_sort {
                selected.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                });
                selected.truncate(k);
            }
            let filled = fill_row(k, &selected);
            let mut row = empty_row(k);
            row.candidates = candidates;
            for (s, &(d, i, ok)) in filled.iter().enumerate() {
                row.dists[s] = d;
                row.indices[s] = i;
                row.valid[s] = ok;
            }
            row
        })
        .collect();

    let mut table = NeighborTable::empty(n, k);
    for (ci, row) in rows.into_iter().enumerate() {
        table.indices[ci * k..(ci + 1) * k].copy_from_slice(&row.indices);
        table.valid[ci * k..(ci + 1) * k].copy_from_slice(&row.valid);
        table.dists[ci * k..(ci + 1) * k].copy_from_slice(&row.dists);
        table.candidate_count += row.candidates;
    }
    table
}

fn grid_window_positions(centers: &PointImage, map: GridMap) -> Vec<(i64, i64)> {
    let mut pos = Vec::with_capacity(centers.n_cells());
    for v in 0..centers.h {
        for u in 0..centers.w {
            pos.push(map.source_pos(v, u));
        }
    }
    pos
}

fn centers_as_slices(centers: &PointImage) -> (Vec<[f32; 3]>, Vec<bool>) {
    let xyz: Vec<[f32; 3]> = (0..centers.n_cells()).map(|i| centers.get(i)).collect();
    (xyz, centers.valid_mask().to_vec())
}

/// Windowed K-nearest-neighbor grouping (bounded selection).
pub fn group_neighbors(
    centers: &PointImage,
    source: &PointImage,
    spec: &KernelSpec,
    map: GridMap,
) -> NeighborTable {
    let (xyz, valid) = centers_as_slices(centers);
    let pos = grid_window_positions(centers, map);
    group_windowed(&xyz, &valid, &pos, source, spec, false)
}

/// Oracle with an identical contract: collect every in-window candidate
/// and fully sort. With a whole-grid window this is the O(n²) arm.
pub fn brute_force_group(
    centers: &PointImage,
    source: &PointImage,
    spec: &KernelSpec,
    map: GridMap,
) -> NeighborTable {
    let (xyz, valid) = centers_as_slices(centers);
    let pos = grid_window_positions(centers, map);
    group_windowed(&xyz, &valid, &pos, source, spec, true)
}

/// Differentiable gather of per-cell features through a neighbor table.
/// `features` must be S×C aligned with the table's source grid.
pub fn gather(tape: &mut Tape, features: Var, table: &NeighborTable) -> Var {
    tape.gather_rows(
        features,
        table.indices_rc(),
        table.valid_rc(),
        table.n_centers,
        table.k,
    )
}
