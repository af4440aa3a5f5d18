//! Masked image losses and the level-weighted training objective.
//!
//! The objective combines a full render with one render per octree level:
//!
//!   total = λ·l1(full) + γ·ls(full)
//!         + θ·Σ_{k=1..K} [ λ/2^(K+1−k) · l1(level K−k) + γ/2^k · ls(level K−k) ]
//!
//! where ls = 1 − SSIM. k = 1 is the finest level, so fine levels get most of
//! the structural weight and coarse levels most of the photometric weight.
//! Level terms are gated by that level's opacity mask; every term is
//! additionally gated by the block's visibility mask. An empty mask
//! contributes zero by convention.
//!
//! SSIM uses the standard 11×11 Gaussian window (σ = 1.5, C1 = 0.01²,
//! C2 = 0.03²) over valid window positions (centers at least 5 pixels from
//! every edge), evaluated per channel and averaged. A window counts when its
//! center pixel is masked.

use nalgebra::Vector3;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::{Bitmap, ImageBuf};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(gt: &ImageBuf, render: &ImageBuf) -> Result<()> {
    if gt.width != render.width || gt.height != render.height {
        return Err(Error::Shape(format!(
            "image pair {}x{} vs {}x{}",
            gt.width, gt.height, render.width, render.height
        )));
    }
    Ok(())
}

fn check_mask(img: &ImageBuf, mask: &Bitmap) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::Shape(format!(
            "mask {}x{} for image {}x{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    Ok(())
}

/// Mean absolute channel difference over masked pixels (0 if none).
pub fn l1_masked(gt: &ImageBuf, render: &ImageBuf, mask: &Bitmap) -> Result<f64> {
    Ok(l1_masked_backward(gt, render, mask)?.0)
}

/// L1 value plus its gradient with respect to the render.
pub fn l1_masked_backward(
    gt: &ImageBuf,
    render: &ImageBuf,
    mask: &Bitmap,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    check_dims(gt, render)?;
    check_mask(gt, mask)?;
    let mut grad = vec![Vector3::zeros(); gt.pixels.len()];
    let n = mask.count_ones();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    let scale = 1.0 / (3.0 * n as f64);
    for i in 0..gt.pixels.len() {
        if !mask.bits[i] {
            continue;
        }
        let d = render.pixels[i] - gt.pixels[i];
        sum += d.x.abs() + d.y.abs() + d.z.abs();
        // signum(0.0) is 1.0 in IEEE terms; the subgradient at 0 must be 0
        grad[i] = d.map(|v| if v == 0.0 { 0.0 } else { v.signum() * scale });
    }
    Ok((sum * scale, grad))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode convolution of a full-size plane with the Gaussian
/// window: rows first, then columns.
fn conv_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for vx in 0..vw {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * plane[y * w + vx + k];
            }
            rows[y * vw + vx] = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for vy in 0..vh {
        for vx in 0..vw {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                acc += gk * rows[(vy + k) * vw + vx];
            }
            out[vy * vw + vx] = acc;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatters a valid-grid field back onto the full
/// pixel grid through the same separable window.
fn conv_valid_adjoint(field: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; vh * w];
    for vy in 0..vh {
        for vx in 0..vw {
            let f = field[vy * vw + vx];
            if f != 0.0 {
                for (k, gk) in g.iter().enumerate() {
                    rows[vy * w + vx + k] += gk * f;
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for vy in 0..vh {
        for x in 0..w {
            let f = rows[vy * w + x];
            if f != 0.0 {
                for (k, gk) in g.iter().enumerate() {
                    out[(vy + k) * w + x] += gk * f;
                }
            }
        }
    }
    out
}

struct SsimEval {
    mean: f64,
    selected: usize,
    grad: Option<Vec<Vector3<f64>>>,
}

fn ssim_eval(gt: &ImageBuf, render: &ImageBuf, mask: &Bitmap, want_grad: bool) -> Result<SsimEval> {
    check_dims(gt, render)?;
    check_mask(gt, mask)?;
    let (w, h) = (gt.width, gt.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "structural loss needs at least {0}x{0} images, got {1}x{2}",
            SSIM_WINDOW, w, h
        )));
    }
    let g = gaussian_kernel();
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let half = SSIM_WINDOW / 2;

    // windows whose center pixel is masked
    let selected: Vec<bool> = (0..vh * vw)
        .map(|i| {
            let (vy, vx) = (i / vw, i % vw);
            mask.bits[(vy + half) * w + (vx + half)]
        })
        .collect();
    let n_sel = selected.iter().filter(|s| **s).count();
    let mut grad = if want_grad { Some(vec![Vector3::zeros(); w * h]) } else { None };
    if n_sel == 0 {
        return Ok(SsimEval { mean: 0.0, selected: 0, grad });
    }

    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = gt.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = render.pixels.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu_x = conv_valid(&x, w, h, &g);
        let mu_y = conv_valid(&y, w, h, &g);
        let s_xx = conv_valid(&xx, w, h, &g);
        let s_yy = conv_valid(&yy, w, h, &g);
        let s_xy = conv_valid(&xy, w, h, &g);

        // per-window fields for the adjoint pass
        let mut f_const = vec![0.0; vh * vw];
        let mut f_var = vec![0.0; vh * vw];
        let mut f_cov = vec![0.0; vh * vw];
        let up = 1.0 / (3.0 * n_sel as f64);
        for i in 0..vh * vw {
            if !selected[i] {
                continue;
            }
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = s_xx[i] - mx * mx;
            let var_y = s_yy[i] - my * my;
            let cov = s_xy[i] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                // partials of S in (μy, σy², σxy); the pixel chain adds the
                // −2μy / −μx corrections because σy² and σxy contain μy
                let ds_dmy = 2.0 * (mx * a2 * b1 - my * a1 * a2) / (b1 * b1 * b2);
                let ds_dvar = -(a1 * a2) / (b1 * b2 * b2);
                let ds_dcov = 2.0 * a1 / (b1 * b2);
                f_const[i] = up * (ds_dmy - 2.0 * my * ds_dvar - mx * ds_dcov);
                f_var[i] = up * ds_dvar;
                f_cov[i] = up * ds_dcov;
            }
        }
        if let Some(gr) = grad.as_mut() {
            let c_const = conv_valid_adjoint(&f_const, w, h, &g);
            let c_var = conv_valid_adjoint(&f_var, w, h, &g);
            let c_cov = conv_valid_adjoint(&f_cov, w, h, &g);
            for i in 0..w * h {
                // d(mean SSIM)/dy_i; gradient of the loss 1 − mean negates it
                gr[i][c] = c_const[i] + 2.0 * y[i] * c_var[i] + x[i] * c_cov[i];
            }
        }
    }
    let mean = total / (3.0 * n_sel as f64);
    if let Some(gr) = grad.as_mut() {
        for v in gr.iter_mut() {
            *v = -*v;
        }
    }
    Ok(SsimEval { mean, selected: n_sel, grad })
}

/// Structural loss 1 − mean SSIM over masked windows (0 if none are masked).
pub fn ssim_masked(gt: &ImageBuf, render: &ImageBuf, mask: &Bitmap) -> Result<f64> {
    let e = ssim_eval(gt, render, mask, false)?;
    Ok(if e.selected == 0 { 0.0 } else { 1.0 - e.mean })
}

/// Structural loss plus its gradient with respect to the render.
pub fn ssim_masked_backward(
    gt: &ImageBuf,
    render: &ImageBuf,
    mask: &Bitmap,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let e = ssim_eval(gt, render, mask, true)?;
    let loss = if e.selected == 0 { 0.0 } else { 1.0 - e.mean };
    Ok((loss, e.grad.unwrap()))
}

/// Plain mean SSIM between two images (all windows), for evaluation reports.
pub fn ssim_index(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    let full = Bitmap::new(a.width, a.height, true);
    Ok(ssim_eval(a, b, &full, false)?.mean)
}

/// Peak signal-to-noise ratio in dB, capped at 99 when the MSE underflows.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_dims(a, b)?;
    let mut sum = 0.0;
    for (pa, pb) in a.pixels.iter().zip(&b.pixels) {
        sum += (pa - pb).norm_squared();
    }
    let mse = sum / (3.0 * a.pixels.len() as f64);
    Ok(if mse < 1e-10 { 99.0 } else { 10.0 * (1.0 / mse).log10() })
}

/// One level's contribution to the objective.
#[derive(Debug, Clone, Serialize)]
pub struct LevelTerm {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Fraction of pixels covered by this level's gated mask.
    pub coverage: f64,
}

/// Every term of the objective for one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub l1_full: f64,
    pub ssim_full: f64,
    pub levels: Vec<LevelTerm>,
    pub total: f64,
}

/// L1 weight for sum index k of K: λ/2^(K+1−k).
pub fn level_weight_l1(lambda: f64, k: usize, levels: usize) -> f64 {
    lambda / (1u64 << (levels + 1 - k)) as f64
}

/// Structural weight for sum index k of K: γ/2^k.
pub fn level_weight_ssim(gamma: f64, k: usize) -> f64 {
    gamma / (1u64 << k) as f64
}

/// Evaluate the full objective. `level_renders` is ordered k = 1..K (finest
/// level K−1 down to level 0), each with its opacity mask; `block_mask` gates
/// every term. Set `want_grads` to also get d(total)/d(render) for the full
/// render and each level render.
#[allow(clippy::type_complexity)]
pub fn hierarchical_loss(
    gt: &ImageBuf,
    full: &ImageBuf,
    level_renders: &[(ImageBuf, Bitmap)],
    block_mask: &Bitmap,
    cfg: &PipelineConfig,
    levels: usize,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<(Vec<Vector3<f64>>, Vec<Vec<Vector3<f64>>>)>)> {
    if level_renders.len() != levels {
        return Err(Error::Shape(format!(
            "{} level renders for {} levels",
            level_renders.len(),
            levels
        )));
    }
    let npix = (gt.width * gt.height) as f64;
    let (lambda, gamma, theta) = (cfg.lambda_l1, cfg.gamma_ssim, cfg.theta_levels);

    let (l1_full, d_l1_full) = l1_masked_backward(gt, full, block_mask)?;
    let (ssim_full, d_ssim_full) = if want_grads {
        ssim_masked_backward(gt, full, block_mask)?
    } else {
        (ssim_masked(gt, full, block_mask)?, Vec::new())
    };

    let mut terms = Vec::with_capacity(levels);
    let mut d_levels = Vec::with_capacity(levels);
    let mut level_sum = 0.0;
    for (i, (render, opacity_mask)) in level_renders.iter().enumerate() {
        let k = i + 1;
        let gated = block_mask.and(opacity_mask);
        let w_l1 = level_weight_l1(lambda, k, levels);
        let w_ssim = level_weight_ssim(gamma, k);
        let (l1, d_l1) = l1_masked_backward(gt, render, &gated)?;
        let (ssim, d_ssim) = if want_grads {
            ssim_masked_backward(gt, render, &gated)?
        } else {
            (ssim_masked(gt, render, &gated)?, Vec::new())
        };
        level_sum += w_l1 * l1 + w_ssim * ssim;
        if want_grads {
            let mut d = vec![Vector3::zeros(); gt.pixels.len()];
            for (j, dv) in d.iter_mut().enumerate() {
                *dv = theta * (w_l1 * d_l1[j] + w_ssim * d_ssim[j]);
            }
            d_levels.push(d);
        }
        terms.push(LevelTerm {
            w_l1,
            w_ssim,
            l1,
            ssim,
            coverage: gated.count_ones() as f64 / npix,
        });
    }

    let total = lambda * l1_full + gamma * ssim_full + theta * level_sum;
    let breakdown = LossBreakdown { l1_full, ssim_full, levels: terms, total };
    let grads = want_grads.then(|| {
        let mut d_full = vec![Vector3::zeros(); gt.pixels.len()];
        for (j, dv) in d_full.iter_mut().enumerate() {
            *dv = lambda * d_l1_full[j] + gamma * d_ssim_full[j];
        }
        (d_full, d_levels)
    });
    Ok((breakdown, grads))
}
