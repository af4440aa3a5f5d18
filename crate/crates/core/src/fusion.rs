//! Fuse independently trained blocks into one scene: each block's anchors are
//! refiltered by a ground-plane vote (keep an anchor if its center sits in the
//! block, or a strict majority of its decoded Gaussian positions do), then all
//! blocks render together through the shared multi-block path with one global
//! depth sort.

use nalgebra::Vector3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{psnr, ssim_index};
use crate::model::{decoded_positions, render_blocks, BlockModel};
use crate::octree::{Anchor, AnchorSet};
use crate::rasterize::{FrameBuffer, RasterOpts};
use crate::scene::CameraView;

/// Independently trained blocks stitched into one renderable scene.
#[derive(Debug, Clone)]
pub struct FusedScene {
    pub blocks: Vec<BlockModel>,
    pub background: Vector3<f64>,
}

fn anchor_votes_inside(model: &BlockModel, anchor: &Anchor) -> bool {
    if model.bounds.contains(anchor.position.x, anchor.position.y) {
        return true;
    }
    let inside = decoded_positions(anchor)
        .iter()
        .filter(|p| model.bounds.contains(p.x, p.y))
        .count();
    // strict majority of the k decoded positions
    2 * inside > anchor.offsets.len()
}

/// Ground-plane vote: retain anchors centered in the block, or whose decoded
/// Gaussians put a strict majority of their centers inside it. Never adds.
pub fn refilter_anchors(model: &BlockModel) -> AnchorSet {
    let mut retained = model.anchors.clone();
    retained.anchors.retain(|a| anchor_votes_inside(model, a));
    retained
}

/// Refilter every block and collect the survivors into one scene.
pub fn fuse(models: Vec<BlockModel>, background: Vector3<f64>) -> Result<FusedScene> {
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            if a.block == b.block {
                return Err(Error::Contract(format!("duplicate block id {:?} in fusion", a.block)));
            }
        }
    }
    let blocks = models
        .into_iter()
        .map(|mut m| {
            let before = m.anchors.anchors.len();
            m.anchors = refilter_anchors(&m);
            log::info!(
                "block {:?}: refilter kept {} of {} anchors",
                m.block,
                m.anchors.anchors.len(),
                before
            );
            m
        })
        .collect();
    Ok(FusedScene { blocks, background })
}

/// Render the fused scene: per-block selection and decoding, one global
/// depth-sorted compositing pass.
pub fn render_global(
    scene: &FusedScene,
    view: &CameraView,
    guard_band: f64,
    opts: &RasterOpts,
) -> Result<FrameBuffer> {
    let refs: Vec<&BlockModel> = scene.blocks.iter().collect();
    render_blocks(&refs, view, guard_band, scene.background, opts)
}

/// Per-view quality metrics of a fused render against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub view_id: u32,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean metrics over a view set, with the per-view records.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub views: Vec<EvalRecord>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Render every test view and score it against its ground-truth image.
pub fn evaluate(
    scene: &FusedScene,
    test_views: &[CameraView],
    guard_band: f64,
    opts: &RasterOpts,
) -> Result<EvalReport> {
    if test_views.is_empty() {
        return Err(Error::Contract("evaluation needs at least one test view".into()));
    }
    let mut records = Vec::with_capacity(test_views.len());
    for view in test_views {
        let gt = view.pixels.as_ref().ok_or_else(|| {
            Error::Contract(format!("test view {} carries no ground-truth image", view.id))
        })?;
        let render = render_global(scene, view, guard_band, opts)?.into_image();
        records.push(EvalRecord {
            view_id: view.id,
            psnr: psnr(gt, &render)?,
            ssim: ssim_index(gt, &render)?,
        });
    }
    let n = records.len() as f64;
    let mean_psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(EvalReport { views: records, mean_psnr, mean_ssim })
}
