//! Temporary diagnostics for the end-to-end scene. Not part of the suite.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;

use lodsplat_core::config::PipelineConfig;
use lodsplat_core::fusion::{evaluate, fuse};
use lodsplat_core::image::ImageBuf;
use lodsplat_core::loss::psnr;
use lodsplat_core::model::BlockModel;
use lodsplat_core::partition::{assign_views, partition_uniform, BlockData};
use lodsplat_core::rasterize::RasterOpts;
use lodsplat_core::scene::CameraView;
use lodsplat_core::synth::{generate_synthetic_scene, SynthSpec};
use lodsplat_core::trainer::{train_block, IterationRecord, TrainState};

#[test]
#[ignore]
fn probe_end_to_end_scene() {
    let spec = SynthSpec { n_points: 500, n_views: 36, width: 64, height: 64, seed: 9, ..SynthSpec::default() };
    let bundle = generate_synthetic_scene(&spec).unwrap();
    let test_ids: BTreeSet<u32> = [1u32, 13, 25, 35].into_iter().collect();
    let train_views: Vec<CameraView> =
        bundle.views.iter().filter(|v| !test_ids.contains(&v.id)).cloned().collect();
    let test_views: Vec<CameraView> =
        bundle.views.iter().filter(|v| test_ids.contains(&v.id)).cloned().collect();

    // ground-truth statistics
    for v in &test_views {
        let gt = v.pixels.as_ref().unwrap();
        let n = gt.pixels.len() as f64;
        let mean: Vector3<f64> = gt.pixels.iter().sum::<Vector3<f64>>() / n;
        let lum: Vec<f64> = gt.pixels.iter().map(|p| (p.x + p.y + p.z) / 3.0).collect();
        let dark = lum.iter().filter(|l| **l < 0.05).count() as f64 / n;
        let bright = lum.iter().filter(|l| **l > 0.5).count() as f64 / n;
        let var = lum.iter().map(|l| (l - (mean.x + mean.y + mean.z) / 3.0).powi(2)).sum::<f64>() / n;
        let black = ImageBuf::new(64, 64);
        println!(
            "view {:2}: mean rgb ({:.3},{:.3},{:.3}) dark {:.2} bright {:.2} lum std {:.3} psnr(black) {:.2}",
            v.id, mean.x, mean.y, mean.z, dark, bright, var.sqrt(), psnr(gt, &black).unwrap()
        );
    }

    let cfg = PipelineConfig { iterations: 2000, window_m: 500, tau_p: 50, ..PipelineConfig::default() };
    let (grid, mut blocks) = partition_uniform(&bundle, 2, 2).unwrap();
    assign_views(&mut blocks, &train_views, cfg.tau_p);
    let trainable: Vec<&BlockData> =
        blocks.iter().filter(|b| !b.points.is_empty() && !b.assigned_views.is_empty()).collect();
    println!("trainable blocks: {:?}", trainable.iter().map(|b| (b.block, b.points.len(), b.assigned_views.len())).collect::<Vec<_>>());

    let bg = cfg.background();
    let opts = RasterOpts::from_config(&cfg);
    let init_models: Vec<BlockModel> = trainable
        .iter()
        .map(|b| {
            let views: Vec<CameraView> =
                b.assigned_views.iter().map(|id| bundle.view_by_id(*id).unwrap().clone()).collect();
            TrainState::init(b, &grid, &views, &cfg).unwrap().into_model(&grid)
        })
        .collect();
    println!("init anchors per block: {:?}", init_models.iter().map(|m| m.anchors.len()).collect::<Vec<_>>());
    let init_scene = fuse(init_models, bg).unwrap();
    let init_rep = evaluate(&init_scene, &test_views, cfg.guard_band, &opts).unwrap();
    println!("init held-out: psnr {:.2} ssim {:.3}", init_rep.mean_psnr, init_rep.mean_ssim);
    for r in &init_rep.views {
        println!("  init view {:2}: psnr {:.2} ssim {:.3}", r.view_id, r.psnr, r.ssim);
    }
    {
        use lodsplat_core::fusion::render_global;
        let v = bundle.view_by_id(1).unwrap();
        let img = render_global(&init_scene, v, cfg.guard_band, &opts).unwrap().into_image();
        let n = img.pixels.len() as f64;
        let mean: Vector3<f64> = img.pixels.iter().sum::<Vector3<f64>>() / n;
        let lit = img.pixels.iter().filter(|p| p.norm() > 1e-3).count() as f64 / n;
        println!("  init render view 1: mean rgb ({:.3},{:.3},{:.3}) lit {:.2}", mean.x, mean.y, mean.z, lit);
    }

    {
        use lodsplat_core::partition::build_visibility_mask;
        use lodsplat_core::trainer::train_step;
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let b = trainable[0];
        let views: Vec<CameraView> =
            b.assigned_views.iter().map(|id| bundle.view_by_id(*id).unwrap().clone()).collect();
        let mut st = TrainState::init(b, &grid, &views, &cfg).unwrap();
        let masks: Vec<_> = views
            .iter()
            .map(|v| build_visibility_mask(b, v, cfg.mask_cell_px, cfg.mask_dilation_px))
            .collect();
        let mut order: Vec<usize> = Vec::new();
        let mut ord_rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..499 {
            if order.is_empty() {
                order = (0..views.len()).collect();
                order.shuffle(&mut ord_rng);
            }
            let vi = order.pop().unwrap();
            train_step(&mut st, &views[vi], &masks[vi], &cfg).unwrap();
        }
        let entries: Vec<_> = st.anchors.anchors.iter().map(|a| st.stats.get(a.id)).collect();
        let mut accums: Vec<f64> =
            entries.iter().filter(|e| e.grad_n > 0).map(|e| e.grad_accum()).collect();
        accums.sort_by(f64::total_cmp);
        let pct = |q: f64| accums[((q * accums.len() as f64) as usize).min(accums.len() - 1)];
        println!(
            "block {:?} after 499 iters: {} anchors with grads, grad_accum min {:.3e} p25 {:.3e} p50 {:.3e} p75 {:.3e} p90 {:.3e} max {:.3e}",
            b.block, accums.len(), pct(0.0), pct(0.25), pct(0.5), pct(0.75), pct(0.9),
            accums[accums.len() - 1]
        );
        println!(
            "  grad_events: max {} mean {:.1} over {} anchors (window 500, threshold {:.1e})",
            entries.iter().map(|e| e.grad_events).max().unwrap(),
            entries.iter().map(|e| e.grad_events).sum::<u64>() as f64 / entries.len() as f64,
            entries.len(),
            cfg.beta * cfg.tau_g0
        );
    }
    let results: Vec<(BlockModel, Vec<IterationRecord>)> = trainable
        .par_iter()
        .map(|b| train_block(&bundle, b, &grid, &cfg, None).unwrap())
        .collect();
    for (b, (m, recs)) in trainable.iter().zip(&results) {
        let tail = &recs[recs.len() - 100..];
        let mean_total = tail.iter().map(|r| r.loss.total).sum::<f64>() / 100.0;
        let mean_l1 = tail.iter().map(|r| r.loss.l1_full).sum::<f64>() / 100.0;
        let mean_ssim = tail.iter().map(|r| r.loss.ssim_full).sum::<f64>() / 100.0;
        let mut by_eff = BTreeMap::<usize, usize>::new();
        for a in &m.anchors.anchors {
            *by_eff.entry(a.effective_level(m.ctx.levels)).or_default() += 1;
        }
        println!(
            "block {:?}: final anchors {} loss {:.4} (l1 {:.4} ssim {:.4}) levels {} eff-hist {:?} d_max {:.1}",
            b.block, m.anchors.len(), mean_total, mean_l1, mean_ssim, m.ctx.levels, by_eff, m.ctx.d_max
        );
    }
    let models: Vec<BlockModel> = results.into_iter().map(|(m, _)| m).collect();
    let scene = fuse(models, bg).unwrap();
    {
        use lodsplat_core::fusion::render_global;
        let v = bundle.view_by_id(1).unwrap();
        let gt = v.pixels.as_ref().unwrap();
        let img = render_global(&scene, v, cfg.guard_band, &opts).unwrap().into_image();
        let lum = |p: &Vector3<f64>| (p.x + p.y + p.z) / 3.0;
        let (mut e_dark, mut n_dark, mut e_lit, mut n_lit) = (0.0, 0usize, 0.0, 0usize);
        for (g, r) in gt.pixels.iter().zip(&img.pixels) {
            let err = (g - r).norm_squared() / 3.0;
            if lum(g) < 0.05 {
                e_dark += err;
                n_dark += 1;
            } else {
                e_lit += err;
                n_lit += 1;
            }
        }
        println!(
            "view 1 error split: dark mse {:.4} ({} px) lit mse {:.4} ({} px)",
            e_dark / n_dark.max(1) as f64,
            n_dark,
            e_lit / n_lit.max(1) as f64,
            n_lit
        );
        let ascii = |img: &ImageBuf, label: &str| {
            println!("  {label}:");
            let ramp: Vec<char> = " .:-=+*#%@".chars().collect();
            for y in (0..64).step_by(2) {
                let mut row = String::from("    ");
                for x in 0..64 {
                    let p = &img.pixels[y * 64 + x];
                    let l = lum(p).clamp(0.0, 1.0);
                    row.push(ramp[((l * 9.0).round() as usize).min(9)]);
                }
                println!("{row}");
            }
        };
        ascii(gt, "GT view 1");
        ascii(&img, "trained render view 1");
        let v25 = bundle.view_by_id(25).unwrap();
        let gt25 = v25.pixels.as_ref().unwrap();
        let img25 = render_global(&scene, v25, cfg.guard_band, &opts).unwrap().into_image();
        ascii(gt25, "GT view 25");
        ascii(&img25, "trained render view 25");
    }
    {
        let all_train: Vec<CameraView> = train_views.clone();
        let rep_all = evaluate(&scene, &all_train, cfg.guard_band, &opts).unwrap();
        let line: Vec<String> =
            rep_all.views.iter().map(|r| format!("{}:{:.1}", r.view_id, r.psnr)).collect();
        println!("all train-view psnr: {}", line.join(" "));
    }
    let rep = evaluate(&scene, &test_views, cfg.guard_band, &opts).unwrap();
    println!("trained held-out: psnr {:.2} ssim {:.3}", rep.mean_psnr, rep.mean_ssim);
    for r in &rep.views {
        println!("  trained view {:2}: psnr {:.2} ssim {:.3}", r.view_id, r.psnr, r.ssim);
    }
    let some_train: Vec<CameraView> = [0u32, 11, 12, 24, 5, 18, 27]
        .iter()
        .map(|id| bundle.view_by_id(*id).unwrap().clone())
        .collect();
    let rep_t = evaluate(&scene, &some_train, cfg.guard_band, &opts).unwrap();
    println!("trained on-train: psnr {:.2} ssim {:.3}", rep_t.mean_psnr, rep_t.mean_ssim);
    for r in &rep_t.views {
        println!("  trained train-view {:2}: psnr {:.2} ssim {:.3}", r.view_id, r.psnr, r.ssim);
    }
}
