//! Per-block optimization: anchor selection, decoding, full and per-level
//! rendering, hierarchically weighted image supervision, adaptive-moment
//! parameter updates, and the windowed anchor lifecycle (prune, split, level
//! transition).
//!
//! Lifecycle ordering at each window boundary: pruning runs first on the
//! completed window's visibility counts, then splitting (fresh children carry
//! no counts yet and would be wiped out if pruning ran after them), then the
//! level transition folds the window's gradient events. All gradient
//! statistics reset afterwards so each window's decisions see only its own
//! iterations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adam::ParamAdam;
use crate::binio::ByteWriter;
use crate::config::PipelineConfig;
use crate::decoder::{
    decode, decoder_backward, init_weights, DecoderGrads, DecoderWeights, Mlp2,
};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian3D, Gaussian3DGrad};
use crate::image::Bitmap;
use crate::loss::{hierarchical_loss, LossBreakdown};
use crate::model::{decoded_positions, pack_sort_id, write_block_model, BlockModel};
use crate::octree::{
    compute_lod_context, dynamic_threshold, init_anchors, prune_by_visibility, select_anchors,
    split_anchors, transition_levels, AnchorSet, AnchorStats, LodContext,
};
use crate::partition::{build_visibility_mask, BlockData, BlockGrid};
use crate::rasterize::{
    extract_opacity_mask, render_backward_with_ids, render_forward_with_ids, RasterOpts,
    RenderGrads,
};
use crate::scene::{CameraView, SceneBundle};

/// Smallest per-axis anchor scaling; keeps decoded Gaussians non-degenerate.
const SCALING_FLOOR: f64 = 1e-8;

/// One line of the training metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub view_id: u32,
    pub loss: LossBreakdown,
    pub anchor_count: usize,
    pub tau_g: f64,
}

/// Adaptive-moment state for one two-layer MLP.
#[derive(Debug, Clone)]
struct MlpAdam {
    w1: ParamAdam,
    b1: ParamAdam,
    w2: ParamAdam,
    b2: ParamAdam,
}

impl MlpAdam {
    fn new(m: &Mlp2) -> Self {
        MlpAdam {
            w1: ParamAdam::new(m.w1.len()),
            b1: ParamAdam::new(m.b1.len()),
            w2: ParamAdam::new(m.w2.len()),
            b2: ParamAdam::new(m.b2.len()),
        }
    }

    fn step(&mut self, p: &mut Mlp2, g: &Mlp2, lr: f64) {
        self.w1.step(p.w1.as_mut_slice(), g.w1.as_slice(), lr);
        self.b1.step(p.b1.as_mut_slice(), g.b1.as_slice(), lr);
        self.w2.step(p.w2.as_mut_slice(), g.w2.as_slice(), lr);
        self.b2.step(p.b2.as_mut_slice(), g.b2.as_slice(), lr);
    }
}

/// Adaptive-moment state for one anchor's parameters.
#[derive(Debug, Clone)]
struct AnchorOpt {
    feature: ParamAdam,
    offsets: ParamAdam,
    scaling: ParamAdam,
}

impl AnchorOpt {
    fn new(feature_dim: usize, k_offsets: usize) -> Self {
        AnchorOpt {
            feature: ParamAdam::new(feature_dim),
            offsets: ParamAdam::new(3 * k_offsets),
            scaling: ParamAdam::new(3),
        }
    }
}

/// Everything that evolves while a block trains.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub anchors: AnchorSet,
    pub stats: AnchorStats,
    pub decoder: DecoderWeights,
    pub ctx: LodContext,
    pub loss_history: Vec<f64>,
    pub block: (usize, usize),
    pub block_lin: u32,
    anchor_opt: BTreeMap<u64, AnchorOpt>,
    dec_opt_opacity: MlpAdam,
    dec_opt_color: MlpAdam,
    dec_opt_cov: MlpAdam,
    rng: ChaCha8Rng,
}

/// Stream-mixing of the master seed with the block index, so blocks get
/// distinct but reproducible randomness.
pub fn block_seed(seed: u64, block_lin: u32) -> u64 {
    seed ^ (block_lin as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrainState {
    /// Build the initial state: LOD context from the block's points and
    /// assigned views, anchors on the octree grid, fresh decoder weights.
    pub fn init(
        block: &BlockData,
        grid: &BlockGrid,
        views: &[CameraView],
        cfg: &PipelineConfig,
    ) -> Result<TrainState> {
        if views.is_empty() {
            return Err(Error::Contract(format!(
                "block {:?} has no assigned views to train on",
                block.block
            )));
        }
        if block.points.is_empty() {
            return Err(Error::Contract(format!("block {:?} has no points", block.block)));
        }
        let block_lin = grid.linear(block.block.0, block.block.1) as u32;
        let seed = block_seed(cfg.seed, block_lin);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = compute_lod_context(&block.points, views)?;
        let anchors = init_anchors(&block.points, &ctx, cfg.feature_dim, cfg.k_offsets, &mut rng);
        let decoder =
            init_weights(seed, block_lin, cfg.feature_dim, cfg.hidden_dim, cfg.k_offsets, ctx.d_max);
        let dec_opt_opacity = MlpAdam::new(&decoder.opacity);
        let dec_opt_color = MlpAdam::new(&decoder.color);
        let dec_opt_cov = MlpAdam::new(&decoder.cov);
        Ok(TrainState {
            iteration: 0,
            anchors,
            stats: AnchorStats::default(),
            decoder,
            ctx,
            loss_history: Vec::new(),
            block: block.block,
            block_lin,
            anchor_opt: BTreeMap::new(),
            dec_opt_opacity,
            dec_opt_color,
            dec_opt_cov,
            rng,
        })
    }

    /// Package the trained parameters for fusion and rendering.
    pub fn into_model(self, grid: &BlockGrid) -> BlockModel {
        BlockModel {
            block: self.block,
            block_lin: self.block_lin,
            bounds: grid.rect(self.block.0, self.block.1),
            anchors: self.anchors,
            decoder: self.decoder,
            ctx: self.ctx,
        }
    }
}

fn assert_finite(state: &TrainState) {
    for a in &state.anchors.anchors {
        assert!(
            a.feature.iter().all(|v| v.is_finite())
                && a.scaling.iter().all(|v| v.is_finite())
                && a.offsets.iter().all(|o| o.iter().all(|v| v.is_finite())),
            "anchor {} has non-finite parameters at iteration {}",
            a.id,
            state.iteration
        );
    }
    for m in [&state.decoder.opacity, &state.decoder.color, &state.decoder.cov] {
        assert!(
            m.w1.iter().all(|v| v.is_finite())
                && m.b1.iter().all(|v| v.is_finite())
                && m.w2.iter().all(|v| v.is_finite())
                && m.b2.iter().all(|v| v.is_finite()),
            "decoder has non-finite weights at iteration {}",
            state.iteration
        );
    }
}

/// Add a backward pass's per-Gaussian gradients into the full-list
/// accumulator; `idx` maps the pass's positions to full-list positions.
fn scatter_add(acc: &mut RenderGrads, rg: &RenderGrads, idx: Option<&[usize]>) {
    for i in 0..rg.d_mean.len() {
        let o = idx.map_or(i, |m| m[i]);
        acc.d_mean[o] += rg.d_mean[i];
        acc.d_scale[o] += rg.d_scale[i];
        for c in 0..4 {
            acc.d_rotation[o][c] += rg.d_rotation[i][c];
        }
        acc.d_opacity[o] += rg.d_opacity[i];
        acc.d_color[o] += rg.d_color[i];
        acc.d_mean2[o] += rg.d_mean2[i];
    }
}

/// One optimization iteration on one assigned view. Returns the loss
/// breakdown; every mutation happens on `state`.
pub fn train_step(
    state: &mut TrainState,
    view: &CameraView,
    block_mask: &Bitmap,
    cfg: &PipelineConfig,
) -> Result<LossBreakdown> {
    let gt = view
        .pixels
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("view {} carries no training image", view.id)))?;
    let opts = RasterOpts {
        near_plane: cfg.near_plane,
        support_sigma: cfg.support_sigma,
        min_transmittance: cfg.min_transmittance,
    };
    let bg = cfg.background();
    let levels = state.ctx.levels;
    let k = state.anchors.k_offsets;

    let selected = select_anchors(&state.anchors, view, &state.ctx, cfg.guard_band);
    state.stats.record_visibility(&selected);

    // decode once; the full render and the per-level renders share the result
    let center = view.camera_center();
    let mut gs: Vec<Gaussian3D> = Vec::with_capacity(selected.len() * k);
    let mut ids: Vec<u64> = Vec::with_capacity(selected.len() * k);
    let mut eff = Vec::with_capacity(selected.len());
    for &aid in &selected {
        let anchor = state.anchors.by_id(aid).expect("selected anchor exists");
        eff.push(anchor.effective_level(levels));
        let dec = decode(anchor, &center, &state.decoder)?;
        for (slot, g) in dec.gaussians.into_iter().enumerate() {
            gs.push(g);
            ids.push(pack_sort_id(state.block_lin, aid, slot));
        }
    }

    let full = render_forward_with_ids(&gs, Some(&ids), view, bg, &opts)?;
    let full_img = full.into_image();

    // level render k uses exactly the anchors whose effective level is K−k
    let mut level_renders = Vec::with_capacity(levels);
    let mut level_sets: Vec<(Vec<usize>, Vec<Gaussian3D>, Vec<u64>)> = Vec::with_capacity(levels);
    for kk in 1..=levels {
        let lv = levels - kk;
        let mut idx = Vec::new();
        for (ai, _) in selected.iter().enumerate() {
            if eff[ai] == lv {
                idx.extend(ai * k..(ai + 1) * k);
            }
        }
        let sub_gs: Vec<Gaussian3D> = idx.iter().map(|&i| gs[i]).collect();
        let sub_ids: Vec<u64> = idx.iter().map(|&i| ids[i]).collect();
        let fb = render_forward_with_ids(&sub_gs, Some(&sub_ids), view, bg, &opts)?;
        let mask = extract_opacity_mask(&fb, cfg.opacity_mask_threshold);
        level_renders.push((fb.into_image(), mask));
        level_sets.push((idx, sub_gs, sub_ids));
    }

    let (breakdown, grads) =
        hierarchical_loss(gt, &full_img, &level_renders, block_mask, cfg, levels, true)?;
    let (d_full, d_levels) = grads.expect("gradients were requested");

    let mut acc = RenderGrads::zeros(gs.len());
    if !gs.is_empty() {
        let rg = render_backward_with_ids(&gs, Some(&ids), view, bg, &d_full, &opts)?;
        scatter_add(&mut acc, &rg, None);
        for (kk, (idx, sub_gs, sub_ids)) in level_sets.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let rg =
                render_backward_with_ids(sub_gs, Some(sub_ids), view, bg, &d_levels[kk], &opts)?;
            scatter_add(&mut acc, &rg, Some(idx));
        }
    }

    // densification statistic: per anchor, the mean norm of its Gaussians'
    // total image-space positional gradients
    let tau_i = dynamic_threshold(state.iteration, cfg.tau_g0, cfg.eta, cfg.window_m);
    let dg: Vec<(u64, f64)> = selected
        .iter()
        .enumerate()
        .map(|(ai, &aid)| {
            let mean =
                (ai * k..(ai + 1) * k).map(|i| acc.d_mean2[i].norm()).sum::<f64>() / k as f64;
            (aid, mean)
        })
        .collect();
    state.stats.record_gradients(&dg, cfg.beta * tau_i);

    // pull the image gradients back through the decoder per anchor
    let mut dec_grads = DecoderGrads::zeros(&state.decoder);
    let mut anchor_grads: BTreeMap<u64, (Vec<f64>, Vec<f64>, [f64; 3])> = BTreeMap::new();
    for (ai, &aid) in selected.iter().enumerate() {
        let d_gaussians: Vec<Gaussian3DGrad> =
            (ai * k..(ai + 1) * k).map(|i| acc.gaussian(i)).collect();
        let anchor = state.anchors.by_id(aid).expect("selected anchor exists");
        let (dg_dec, d_feature, d_offsets, d_scaling) =
            decoder_backward(anchor, &center, &state.decoder, &d_gaussians)?;
        dec_grads.accumulate(&dg_dec);
        let mut flat_off = Vec::with_capacity(3 * k);
        for o in &d_offsets {
            flat_off.extend_from_slice(&[o.x, o.y, o.z]);
        }
        anchor_grads.insert(
            aid,
            (d_feature.as_slice().to_vec(), flat_off, [d_scaling.x, d_scaling.y, d_scaling.z]),
        );
    }

    // every anchor steps every iteration; unselected ones see zero gradients
    // so their momentum decays instead of freezing
    let fdim = state.anchors.feature_dim;
    for anchor in state.anchors.anchors.iter_mut() {
        let opt = state
            .anchor_opt
            .entry(anchor.id)
            .or_insert_with(|| AnchorOpt::new(fdim, k));
        let (d_f, d_o, d_s) = anchor_grads
            .remove(&anchor.id)
            .unwrap_or_else(|| (vec![0.0; fdim], vec![0.0; 3 * k], [0.0; 3]));
        opt.feature.step(anchor.feature.as_mut_slice(), &d_f, cfg.lr_features);
        let mut flat: Vec<f64> = anchor.offsets.iter().flat_map(|o| [o.x, o.y, o.z]).collect();
        opt.offsets.step(&mut flat, &d_o, cfg.lr_offsets);
        for (j, o) in anchor.offsets.iter_mut().enumerate() {
            *o = Vector3::new(flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]);
        }
        let mut s = [anchor.scaling.x, anchor.scaling.y, anchor.scaling.z];
        opt.scaling.step(&mut s, &d_s, cfg.lr_scaling);
        anchor.scaling = Vector3::new(
            s[0].max(SCALING_FLOOR),
            s[1].max(SCALING_FLOOR),
            s[2].max(SCALING_FLOOR),
        );
    }
    state.dec_opt_opacity.step(&mut state.decoder.opacity, &dec_grads.opacity, cfg.lr_decoder);
    state.dec_opt_color.step(&mut state.decoder.color, &dec_grads.color, cfg.lr_decoder);
    state.dec_opt_cov.step(&mut state.decoder.cov, &dec_grads.cov, cfg.lr_decoder);

    assert_finite(state);
    state.iteration += 1;
    state.loss_history.push(breakdown.total);
    Ok(breakdown)
}

/// Window-boundary lifecycle: prune by the window's visibility, split by its
/// accumulated gradients, fold transition events, then reset the statistics.
/// Returns (pruned, split) counts.
pub fn lifecycle_pass(state: &mut TrainState, cfg: &PipelineConfig) -> (usize, usize) {
    let last = state.iteration.saturating_sub(1);
    let tau_w = dynamic_threshold(last, cfg.tau_g0, cfg.eta, cfg.window_m);
    let pruned = prune_by_visibility(&mut state.anchors, &mut state.stats, cfg.eps_c);
    let means: BTreeMap<u64, Vector3<f64>> = state
        .anchors
        .anchors
        .iter()
        .map(|a| {
            let ps = decoded_positions(a);
            (a.id, ps.iter().sum::<Vector3<f64>>() / ps.len().max(1) as f64)
        })
        .collect();
    let split =
        split_anchors(&mut state.anchors, &mut state.stats, tau_w, &means, &state.ctx, &mut state.rng);
    transition_levels(&mut state.anchors, &mut state.stats);
    state.stats.begin_window();
    let live: BTreeSet<u64> = state.anchors.anchors.iter().map(|a| a.id).collect();
    state.anchor_opt.retain(|id, _| live.contains(id));
    (pruned, split)
}

/// Train one block to completion: seeded shuffled view epochs, a lifecycle
/// pass every `window_m` iterations, optional checkpoints under `out_dir`.
pub fn train_block(
    bundle: &SceneBundle,
    block: &BlockData,
    grid: &BlockGrid,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<(BlockModel, Vec<IterationRecord>)> {
    let mut views = Vec::with_capacity(block.assigned_views.len());
    for id in &block.assigned_views {
        let v = bundle
            .view_by_id(*id)
            .ok_or_else(|| Error::Contract(format!("assigned view {} not in bundle", id)))?;
        views.push(v.clone());
    }
    let mut state = TrainState::init(block, grid, &views, cfg)?;
    let masks: BTreeMap<u32, Bitmap> = views
        .iter()
        .map(|v| {
            let m = block.masks.get(&v.id).cloned().unwrap_or_else(|| {
                build_visibility_mask(block, v, cfg.mask_cell_px, cfg.mask_dilation_px)
            });
            (v.id, m)
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.iterations);
    let mut order: Vec<usize> = Vec::new();
    for i in 0..cfg.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut state.rng);
        }
        let view = &views[order.pop().expect("refilled above")];
        let breakdown = train_step(&mut state, view, &masks[&view.id], cfg)?;
        records.push(IterationRecord {
            iteration: i,
            view_id: view.id,
            loss: breakdown,
            anchor_count: state.anchors.len(),
            tau_g: dynamic_threshold(i, cfg.tau_g0, cfg.eta, cfg.window_m),
        });
        if (i + 1) % cfg.window_m == 0 {
            let (pruned, split) = lifecycle_pass(&mut state, cfg);
            log::info!(
                "block {:?} iter {}: lifecycle pruned {}, split {}, {} anchors",
                block.block,
                i + 1,
                pruned,
                split,
                state.anchors.len()
            );
            if let Some(dir) = out_dir {
                write_checkpoint(&state, grid, dir, i + 1)?;
            }
        }
    }
    let model = state.into_model(grid);
    if let Some(dir) = out_dir {
        let path = dir.join(format!("block_{}_{}.bin", model.block.0, model.block.1));
        let mut w = ByteWriter::new();
        write_block_model(&model, &mut w);
        std::fs::write(&path, w.finish()).map_err(|e| Error::io(&path, e))?;
    }
    Ok((model, records))
}

fn write_checkpoint(
    state: &TrainState,
    grid: &BlockGrid,
    dir: &Path,
    iteration: usize,
) -> Result<()> {
    let model = state.clone().into_model(grid);
    let path =
        dir.join(format!("block_{}_{}_iter{:06}.bin", model.block.0, model.block.1, iteration));
    let mut w = ByteWriter::new();
    write_block_model(&model, &mut w);
    std::fs::write(&path, w.finish()).map_err(|e| Error::io(&path, e))
}
