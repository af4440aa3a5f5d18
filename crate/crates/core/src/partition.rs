//! Ground-plane scene partitioning: a uniform x–y grid of blocks (unbounded
//! in z), per-block training-view assignment by visible-point counting, and
//! per-(block, view) image-space visibility masks.
//!
//! Cell membership convention, shared with the fusion vote: a coordinate
//! exactly on an interior cell boundary belongs to the lower-index cell, so
//! cell i owns (lo, hi] on each axis except cell 0, which also owns its own
//! minimum. Masks come from a deterministic splat → box-dilate → hole-fill
//! segmentation of the reprojected block points.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Bitmap;
use crate::scene::{CameraView, SceneBundle, SparsePoint};

/// Uniform ground-plane grid tiling the cloud's x–y bounding box exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub cell_size: [f64; 2],
}

/// Half-open ground-plane rectangle of one block, carrying the boundary
/// convention: (lo, hi] per axis, closed at lo only for index-0 cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundRect {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
    pub closed_min: [bool; 2],
}

impl GroundRect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let above = |v: f64, lo: f64, closed: bool| if closed { v >= lo } else { v > lo };
        above(x, self.lo.x, self.closed_min[0])
            && above(y, self.lo.y, self.closed_min[1])
            && x <= self.hi.x
            && y <= self.hi.y
    }
}

impl BlockGrid {
    /// Grid cell of a ground-plane position; boundary coordinates go to the
    /// lower-index cell, and out-of-bbox positions clamp into range.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let idx = |v: f64, o: f64, c: f64, n: usize| -> usize {
            let raw = ((v - o) / c).ceil() as i64 - 1;
            raw.clamp(0, n as i64 - 1) as usize
        };
        (
            idx(x, self.origin[0], self.cell_size[0], self.nx),
            idx(y, self.origin[1], self.cell_size[1], self.ny),
        )
    }

    /// Exact extent of one block, including which boundaries it owns.
    pub fn rect(&self, ix: usize, iy: usize) -> GroundRect {
        GroundRect {
            lo: Vector2::new(
                self.origin[0] + ix as f64 * self.cell_size[0],
                self.origin[1] + iy as f64 * self.cell_size[1],
            ),
            hi: Vector2::new(
                self.origin[0] + (ix + 1) as f64 * self.cell_size[0],
                self.origin[1] + (iy + 1) as f64 * self.cell_size[1],
            ),
            closed_min: [ix == 0, iy == 0],
        }
    }

    pub fn linear(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }
}

/// One block: its points, assigned training views, and visibility masks.
#[derive(Debug, Clone)]
pub struct BlockData {
    /// (ix, iy) grid index.
    pub block: (usize, usize),
    pub points: Vec<SparsePoint>,
    pub assigned_views: Vec<u32>,
    /// Per-view visibility bitmaps, filled by `build_visibility_mask`.
    pub masks: BTreeMap<u32, Bitmap>,
}

/// Partition the cloud on the ground plane. Every point lands in exactly one
/// block; empty blocks are kept (with empty point lists) so indices stay
/// aligned with the grid.
pub fn partition_uniform(
    bundle: &SceneBundle,
    nx: usize,
    ny: usize,
) -> Result<(BlockGrid, Vec<BlockData>)> {
    if nx == 0 || ny == 0 {
        return Err(Error::Config("block grid needs nx, ny >= 1".into()));
    }
    if bundle.cloud.is_empty() {
        return Err(Error::Config("cannot partition an empty point cloud".into()));
    }
    let (lo, hi) = (bundle.bbox.min, bundle.bbox.max);
    let extent = [hi.x - lo.x, hi.y - lo.y];
    if (extent[0] <= 0.0 && nx > 1) || (extent[1] <= 0.0 && ny > 1) {
        return Err(Error::Config(format!(
            "ground-plane extent {:.3}x{:.3} cannot be split into {}x{} blocks",
            extent[0], extent[1], nx, ny
        )));
    }
    // degenerate axes with a single cell get a unit-size cell so the grid
    // stays well-formed
    let cell = [
        if extent[0] > 0.0 { extent[0] / nx as f64 } else { 1.0 },
        if extent[1] > 0.0 { extent[1] / ny as f64 } else { 1.0 },
    ];
    let grid = BlockGrid { nx, ny, origin: [lo.x, lo.y], cell_size: cell };
    let mut blocks: Vec<BlockData> = (0..nx * ny)
        .map(|i| BlockData {
            block: (i % nx, i / nx),
            points: Vec::new(),
            assigned_views: Vec::new(),
            masks: BTreeMap::new(),
        })
        .collect();
    for p in &bundle.cloud {
        let (ix, iy) = grid.cell_of(p.position.x, p.position.y);
        blocks[grid.linear(ix, iy)].points.push(p.clone());
    }
    Ok((grid, blocks))
}

/// Visibility of a point in a view: track membership when the point has a
/// track, otherwise a frustum fallback (in front of the camera and within the
/// image rectangle).
pub fn is_point_visible(p: &SparsePoint, view: &CameraView) -> bool {
    if !p.track.is_empty() {
        return p.track.contains(&view.id);
    }
    let (u, v, depth) = view.project_point(&p.position);
    depth > 0.0 && u >= 0.0 && u <= view.width as f64 && v >= 0.0 && v <= view.height as f64
}

/// Fill each block's training set: view i joins block j iff strictly more
/// than `tau_p` of the block's points are visible in it.
pub fn assign_views(blocks: &mut [BlockData], views: &[CameraView], tau_p: usize) {
    for b in blocks.iter_mut() {
        b.assigned_views.clear();
        for view in views {
            let visible = b.points.iter().filter(|p| is_point_visible(p, view)).count();
            if visible > tau_p {
                b.assigned_views.push(view.id);
            }
        }
    }
}

fn dilate(mask: &Bitmap, radius: usize) -> Bitmap {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let mut rows = Bitmap::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(radius);
            let x1 = (x + radius).min(w - 1);
            rows.bits[y * w + x] = (x0..=x1).any(|i| mask.bits[y * w + i]);
        }
    }
    let mut out = Bitmap::new(w, h, false);
    for y in 0..h {
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(h - 1);
        for x in 0..w {
            out.bits[y * w + x] = (y0..=y1).any(|i| rows.bits[i * w + x]);
        }
    }
    out
}

fn fill_holes(mask: &mut Bitmap) {
    let (w, h) = (mask.width, mask.height);
    // flood the exterior zeros from the border; remaining zeros are holes
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for x in 0..w {
        for y in [0, h - 1] {
            if !mask.bits[y * w + x] && !outside[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    for y in 0..h {
        for x in [0, w - 1] {
            if !mask.bits[y * w + x] && !outside[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut push = |nx: usize, ny: usize, queue: &mut VecDeque<(usize, usize)>| {
            let i = ny * w + nx;
            if !mask.bits[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y, &mut queue);
        }
        if x + 1 < w {
            push(x + 1, y, &mut queue);
        }
        if y > 0 {
            push(x, y - 1, &mut queue);
        }
        if y + 1 < h {
            push(x, y + 1, &mut queue);
        }
    }
    for i in 0..w * h {
        if !mask.bits[i] && !outside[i] {
            mask.bits[i] = true;
        }
    }
}

/// Image-space visibility mask of a block in a view: visible points splat
/// into `cell_px`-sized cells, the occupied region dilates by `dilation_px`
/// pixels, and enclosed holes are filled.
pub fn build_visibility_mask(
    block: &BlockData,
    view: &CameraView,
    cell_px: usize,
    dilation_px: usize,
) -> Bitmap {
    let (w, h) = (view.width, view.height);
    let mut mask = Bitmap::new(w, h, false);
    let cell = cell_px.max(1);
    let mut any = false;
    let mut occupied = vec![false; w.div_ceil(cell) * h.div_ceil(cell)];
    let cw = w.div_ceil(cell);
    for p in &block.points {
        if !is_point_visible(p, view) {
            continue;
        }
        let (u, v, depth) = view.project_point(&p.position);
        if depth <= 0.0 || u < 0.0 || u >= w as f64 || v < 0.0 || v >= h as f64 {
            continue;
        }
        occupied[(v as usize / cell) * cw + u as usize / cell] = true;
        any = true;
    }
    if !any {
        return mask;
    }
    for cy in 0..h.div_ceil(cell) {
        for cx in 0..cw {
            if occupied[cy * cw + cx] {
                for y in cy * cell..((cy + 1) * cell).min(h) {
                    for x in cx * cell..((cx + 1) * cell).min(w) {
                        mask.bits[y * w + x] = true;
                    }
                }
            }
        }
    }
    let mut mask = dilate(&mask, dilation_px);
    fill_holes(&mut mask);
    mask
}

/// One line of the partition manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block: (usize, usize),
    pub point_count: usize,
    pub views: Vec<u32>,
    /// Mask file path per view id, when masks were written to disk.
    pub mask_files: BTreeMap<u32, String>,
}
