//! Trained per-block unit: anchors, decoder weights and the level-of-detail
//! context, plus the shared render path that turns any set of blocks into one
//! image. Both single-block evaluation and fused-scene rendering go through
//! [`render_blocks`], so they are pixel-identical by construction: anchors are
//! selected per block, decoded with that block's weights, then every Gaussian
//! enters a single global depth sort keyed by an intrinsic id.

use nalgebra::Vector3;

use crate::binio::{ByteReader, ByteWriter};
use crate::decoder::{decode, read_decoder, write_decoder, DecoderWeights};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::octree::{
    read_anchor_set, select_anchors, write_anchor_set, Anchor, AnchorSet, LodContext,
};
use crate::partition::GroundRect;
use crate::rasterize::{render_forward_with_ids, FrameBuffer, RasterOpts};
use crate::scene::CameraView;

/// One trained block, self-contained for rendering.
#[derive(Debug, Clone)]
pub struct BlockModel {
    /// (ix, iy) grid index.
    pub block: (usize, usize),
    /// Row-major linear block index; tags decoded Gaussians and sort ids.
    pub block_lin: u32,
    /// Ground-plane cell the block was trained on.
    pub bounds: GroundRect,
    pub anchors: AnchorSet,
    pub decoder: DecoderWeights,
    pub ctx: LodContext,
}

/// Intrinsic compositing tie-break id: block, then anchor, then offset slot.
/// Independent of enumeration order, so renders are too.
pub fn pack_sort_id(block_lin: u32, anchor_id: u64, slot: usize) -> u64 {
    debug_assert!(anchor_id < 1 << 40, "anchor id overflows sort packing");
    debug_assert!(slot < 256);
    ((block_lin as u64) << 48) | (anchor_id << 8) | slot as u64
}

/// View-independent positions of an anchor's decoded Gaussians.
pub fn decoded_positions(anchor: &Anchor) -> Vec<Vector3<f64>> {
    anchor
        .offsets
        .iter()
        .map(|o| anchor.position + o.component_mul(&anchor.scaling))
        .collect()
}

/// Decoded Gaussians of every selected anchor of one block, each tagged with
/// its intrinsic sort id and anchor of origin.
pub fn decode_block_for_view(
    model: &BlockModel,
    view: &CameraView,
    guard_band: f64,
) -> Result<(Vec<Gaussian3D>, Vec<u64>, Vec<u64>)> {
    let selected = select_anchors(&model.anchors, view, &model.ctx, guard_band);
    let center = view.camera_center();
    let mut gs = Vec::with_capacity(selected.len() * model.anchors.k_offsets);
    let mut sort_ids = Vec::with_capacity(gs.capacity());
    let mut anchor_ids = Vec::with_capacity(gs.capacity());
    for aid in selected {
        let anchor = model.anchors.by_id(aid).expect("selected id exists");
        let dec = decode(anchor, &center, &model.decoder)?;
        for (slot, g) in dec.gaussians.into_iter().enumerate() {
            gs.push(g);
            sort_ids.push(pack_sort_id(model.block_lin, aid, slot));
            anchor_ids.push(aid);
        }
    }
    Ok((gs, sort_ids, anchor_ids))
}

/// Render any number of blocks into one frame: per-block selection and
/// decoding, one global depth sort, one compositing pass.
pub fn render_blocks(
    models: &[&BlockModel],
    view: &CameraView,
    guard_band: f64,
    background: Vector3<f64>,
    opts: &RasterOpts,
) -> Result<FrameBuffer> {
    let mut gs = Vec::new();
    let mut ids = Vec::new();
    for m in models {
        let (g, s, _) = decode_block_for_view(m, view, guard_band)?;
        gs.extend(g);
        ids.extend(s);
    }
    render_forward_with_ids(&gs, Some(&ids), view, background, opts)
}

const MODEL_MAGIC: &[u8; 4] = b"BLKM";
const MODEL_VERSION: u32 = 1;

pub fn write_block_model(model: &BlockModel, w: &mut ByteWriter) {
    w.magic(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u64(model.block.0 as u64);
    w.u64(model.block.1 as u64);
    w.u32(model.block_lin);
    w.f64(model.bounds.lo.x);
    w.f64(model.bounds.lo.y);
    w.f64(model.bounds.hi.x);
    w.f64(model.bounds.hi.y);
    w.u32(model.bounds.closed_min[0] as u32);
    w.u32(model.bounds.closed_min[1] as u32);
    model.ctx.write_to(w);
    write_anchor_set(&model.anchors, w);
    write_decoder(&model.decoder, w);
}

pub fn read_block_model(r: &mut ByteReader) -> Result<BlockModel> {
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let block = (r.u64()? as usize, r.u64()? as usize);
    let block_lin = r.u32()?;
    let bounds = GroundRect {
        lo: nalgebra::Vector2::new(r.f64()?, r.f64()?),
        hi: nalgebra::Vector2::new(r.f64()?, r.f64()?),
        closed_min: [r.u32()? != 0, r.u32()? != 0],
    };
    let ctx = LodContext::read_from(r)?;
    let anchors = read_anchor_set(r)?;
    let decoder = read_decoder(r)?;
    if decoder.feature_dim != anchors.feature_dim || decoder.k_offsets != anchors.k_offsets {
        return Err(Error::Shape(format!(
            "decoder ({}, {}) does not match anchors ({}, {})",
            decoder.feature_dim, decoder.k_offsets, anchors.feature_dim, anchors.k_offsets
        )));
    }
    Ok(BlockModel { block, block_lin, bounds, anchors, decoder, ctx })
}
