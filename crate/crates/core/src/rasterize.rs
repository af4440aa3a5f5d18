//! Front-to-back alpha compositing of depth-sorted 2D Gaussians, and the
//! exact adjoint of that computation for training.
//!
//! Per pixel, contributions accumulate as `C += T * a_i * c_i` with
//! `T *= 1 - a_i`, where `a_i = clamp(opacity_i * G_i, 0, 0.999)` and `G_i`
//! is the Gaussian evaluated at the pixel center. Compositing stops once the
//! transmittance `T` falls below a configurable floor, and each Gaussian only
//! touches pixels inside its `support_sigma`-standard-deviation bounding box.
//! Both cutoffs shape the gradients, which differentiate the computation
//! exactly as performed (clamped, truncated, early-terminated).

use nalgebra::{Matrix2, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::{
    depth_order, project_all, project_backward, CamFrame, Gaussian2D, Gaussian3D, Gaussian3DGrad,
};
use crate::image::Bitmap;
use crate::scene::CameraView;

/// Upper clamp on per-pixel alpha; keeps `1 - a` bounded away from zero so
/// transmittance never hard-zeros and the backward division stays finite.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy)]
pub struct RasterOpts {
    /// Gaussians at or behind this camera-space depth are culled.
    pub near_plane: f64,
    /// Support truncation radius in standard deviations of `cov2`.
    pub support_sigma: f64,
    /// Compositing stops when transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RasterOpts {
    fn default() -> Self {
        RasterOpts { near_plane: 0.01, support_sigma: 3.0, min_transmittance: 1e-4 }
    }
}

impl RasterOpts {
    pub fn from_config(cfg: &crate::config::PipelineConfig) -> Self {
        RasterOpts {
            near_plane: cfg.near_plane,
            support_sigma: cfg.support_sigma,
            min_transmittance: cfg.min_transmittance,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    /// Composited color, background already applied.
    pub rgb: Vec<Vector3<f64>>,
    /// Accumulated opacity `1 - T` per pixel.
    pub acc: Vec<f64>,
}

impl FrameBuffer {
    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Consume the frame into a plain image, dropping the coverage channel.
    pub fn into_image(self) -> crate::image::ImageBuf {
        crate::image::ImageBuf { width: self.width, height: self.height, pixels: self.rgb }
    }
}

/// Gradients w.r.t. one submitted 2D Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct Grad2D {
    pub d_mean2: Vector2<f64>,
    pub d_cov2: Matrix2<f64>,
    pub d_opacity: f64,
    pub d_color: Vector3<f64>,
}

impl Grad2D {
    fn zero() -> Self {
        Grad2D {
            d_mean2: Vector2::zeros(),
            d_cov2: Matrix2::zeros(),
            d_opacity: 0.0,
            d_color: Vector3::zeros(),
        }
    }
}

/// Per-Gaussian data precomputed once per pass: inverse covariance and the
/// pixel-index bounding box of the truncated support (None when off-screen).
struct Prepared {
    q: Matrix2<f64>,
    bbox: Option<(usize, usize, usize, usize)>, // x0, x1, y0, y1 inclusive
}

fn prepare(
    gs: &[Gaussian2D],
    width: usize,
    height: usize,
    opts: &RasterOpts,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::with_capacity(gs.len());
    for (i, g) in gs.iter().enumerate() {
        let finite = g.mean2.iter().all(|v| v.is_finite())
            && g.cov2.iter().all(|v| v.is_finite())
            && g.opacity.is_finite()
            && g.color.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("rasterize input gaussian"));
        }
        let (a, b, c) = (g.cov2[(0, 0)], g.cov2[(0, 1)], g.cov2[(1, 1)]);
        let det = a * c - b * b;
        if det <= 0.0 || a <= 0.0 || c <= 0.0 {
            return Err(Error::Contract(format!(
                "gaussian {} has non-positive-definite cov2 {:?}",
                i, g.cov2
            )));
        }
        let q = Matrix2::new(c / det, -b / det, -b / det, a / det);
        // largest eigenvalue of the 2x2 covariance bounds the support radius
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let r = opts.support_sigma * (mid + disc).sqrt();
        let x0 = (g.mean2.x - r - 0.5).ceil().max(0.0);
        let x1 = (g.mean2.x + r - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (g.mean2.y - r - 0.5).ceil().max(0.0);
        let y1 = (g.mean2.y + r - 0.5).floor().min(height as f64 - 1.0);
        let bbox = if x0 > x1 || y0 > y1 {
            None
        } else {
            Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
        };
        out.push(Prepared { q, bbox });
    }
    Ok(out)
}

fn check_sorted(gs: &[Gaussian2D]) -> Result<()> {
    for w in gs.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (b.depth, b.sort_id) < (a.depth, a.sort_id) {
            return Err(Error::Contract(format!(
                "gaussians not sorted by (depth, id): ({}, {}) precedes ({}, {})",
                a.depth, a.sort_id, b.depth, b.sort_id
            )));
        }
    }
    Ok(())
}

/// Gaussian indices binned by image row, preserving list (= depth) order.
fn row_bins(prep: &[Prepared], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (i, p) in prep.iter().enumerate() {
        if let Some((_, _, y0, y1)) = p.bbox {
            for row in rows.iter_mut().take(y1 + 1).skip(y0) {
                row.push(i as u32);
            }
        }
    }
    rows
}

/// Composites depth-sorted Gaussians over a constant background.
///
/// The input must already be sorted by (depth, sort_id) ascending — this is
/// validated and violations are an error, because silently re-sorting would
/// hide caller bugs in the ordering contract.
pub fn rasterize(
    gs: &[Gaussian2D],
    width: usize,
    height: usize,
    background: Vector3<f64>,
    opts: &RasterOpts,
) -> Result<FrameBuffer> {
    check_sorted(gs)?;
    let prep = prepare(gs, width, height, opts)?;
    let rows = row_bins(&prep, height);
    let mut fb = FrameBuffer {
        width,
        height,
        rgb: vec![background; width * height],
        acc: vec![0.0; width * height],
    };
    for y in 0..height {
        for x in 0..width {
            let center = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            for &gi in &rows[y] {
                let gi = gi as usize;
                let (x0, x1, _, _) = prep[gi].bbox.unwrap();
                if x < x0 || x > x1 {
                    continue;
                }
                let g2 = &gs[gi];
                let d = center - g2.mean2;
                let e = -0.5 * (prep[gi].q * d).dot(&d);
                let a = (g2.opacity * e.exp()).clamp(0.0, ALPHA_MAX);
                c += g2.color * (t * a);
                t *= 1.0 - a;
                if t < opts.min_transmittance {
                    break;
                }
            }
            let p = y * width + x;
            fb.rgb[p] = c + background * t;
            fb.acc[p] = 1.0 - t;
        }
    }
    Ok(fb)
}

/// Level-supervision mask: pixels whose accumulated opacity strictly exceeds
/// the threshold.
pub fn extract_opacity_mask(fb: &FrameBuffer, threshold: f64) -> Bitmap {
    Bitmap {
        width: fb.width,
        height: fb.height,
        bits: fb.acc.iter().map(|a| *a > threshold).collect(),
    }
}

/// Adjoint of [`rasterize`] w.r.t. the composited RGB image. Replays each
/// pixel's compositing (same truncation, clamping and early termination) and
/// walks the contributions back-to-front. Gradients are exact for the
/// computation as performed; Gaussians that never contributed stay zero.
pub fn rasterize_backward(
    gs: &[Gaussian2D],
    width: usize,
    height: usize,
    background: Vector3<f64>,
    d_rgb: &[Vector3<f64>],
    opts: &RasterOpts,
) -> Result<Vec<Grad2D>> {
    if d_rgb.len() != width * height {
        return Err(Error::Shape(format!(
            "d_rgb has {} pixels, frame is {}x{}",
            d_rgb.len(),
            width,
            height
        )));
    }
    check_sorted(gs)?;
    let prep = prepare(gs, width, height, opts)?;
    let rows = row_bins(&prep, height);
    let mut grads = vec![Grad2D::zero(); gs.len()];
    // forward replay buffer: (gaussian index, gaussian value, alpha, T before)
    let mut contribs: Vec<(usize, f64, f64, f64)> = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let up = d_rgb[p];
            if up == Vector3::zeros() {
                continue;
            }
            let center = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            for &gi in &rows[y] {
                let gi = gi as usize;
                let (x0, x1, _, _) = prep[gi].bbox.unwrap();
                if x < x0 || x > x1 {
                    continue;
                }
                let g2 = &gs[gi];
                let d = center - g2.mean2;
                let e = -0.5 * (prep[gi].q * d).dot(&d);
                let a = (g2.opacity * e.exp()).clamp(0.0, ALPHA_MAX);
                contribs.push((gi, e.exp(), a, t));
                t *= 1.0 - a;
                if t < opts.min_transmittance {
                    break;
                }
            }
            // colors composited behind the current contribution, including
            // the background term
            let mut behind = background * t;
            for &(gi, gval, a, t_before) in contribs.iter().rev() {
                let g2 = &gs[gi];
                let gr = &mut grads[gi];
                gr.d_color += up * (t_before * a);
                // d(rgb)/da: own term grows, everything behind scales by 1/(1-a)
                let d_a = up.dot(&(g2.color * t_before - behind / (1.0 - a)));
                if g2.opacity * gval < ALPHA_MAX {
                    gr.d_opacity += d_a * gval;
                    let d_e = d_a * g2.opacity * gval; // g = exp(e)
                    let qd = prep[gi].q * (center - g2.mean2);
                    gr.d_mean2 += qd * d_e;
                    // d e / d cov2 = 0.5 (Q d)(Q d)^T
                    gr.d_cov2 += (qd * qd.transpose()) * (0.5 * d_e);
                }
                behind += g2.color * (t_before * a);
            }
        }
    }
    Ok(grads)
}

/// Gradients w.r.t. a batch of 3D Gaussians, index-aligned with the input
/// of [`render_forward`]. Culled Gaussians hold zeros.
#[derive(Debug, Clone)]
pub struct RenderGrads {
    pub d_mean: Vec<Vector3<f64>>,
    pub d_scale: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_opacity: Vec<f64>,
    pub d_color: Vec<Vector3<f64>>,
    /// Norm of each Gaussian's image-space positional gradient; drives the
    /// anchor densification statistics.
    pub pos_grad_norm: Vec<f64>,
    /// Raw image-space positional gradient, so several passes over the same
    /// Gaussian can be summed before taking the norm.
    pub d_mean2: Vec<Vector2<f64>>,
}

impl RenderGrads {
    pub fn zeros(n: usize) -> Self {
        RenderGrads {
            d_mean: vec![Vector3::zeros(); n],
            d_scale: vec![Vector3::zeros(); n],
            d_rotation: vec![[0.0; 4]; n],
            d_opacity: vec![0.0; n],
            d_color: vec![Vector3::zeros(); n],
            pos_grad_norm: vec![0.0; n],
            d_mean2: vec![Vector2::zeros(); n],
        }
    }

    /// All gradients of one input Gaussian as a single record.
    pub fn gaussian(&self, i: usize) -> Gaussian3DGrad {
        Gaussian3DGrad {
            d_mean: self.d_mean[i],
            d_scale: self.d_scale[i],
            d_rotation: self.d_rotation[i],
            d_opacity: self.d_opacity[i],
            d_color: self.d_color[i],
        }
    }
}

/// Projects, depth-sorts and composites a batch of 3D Gaussians in one call.
pub fn render_forward(
    gs: &[Gaussian3D],
    view: &CameraView,
    background: Vector3<f64>,
    opts: &RasterOpts,
) -> Result<FrameBuffer> {
    render_forward_with_ids(gs, None, view, background, opts)
}

/// [`render_forward`] with explicit sort ids, so depth ties resolve by an
/// intrinsic identity rather than submission order.
pub fn render_forward_with_ids(
    gs: &[Gaussian3D],
    ids: Option<&[u64]>,
    view: &CameraView,
    background: Vector3<f64>,
    opts: &RasterOpts,
) -> Result<FrameBuffer> {
    let frame = CamFrame::from_view(view);
    let projected = project_all(gs, &frame, opts.near_plane, ids)?;
    let order = depth_order(&projected);
    let list: Vec<Gaussian2D> = order.iter().map(|i| projected[*i].unwrap()).collect();
    rasterize(&list, view.width, view.height, background, opts)
}

/// Full adjoint of [`render_forward`]: image gradient in, per-Gaussian 3D
/// parameter gradients out.
pub fn render_backward(
    gs: &[Gaussian3D],
    view: &CameraView,
    background: Vector3<f64>,
    d_rgb: &[Vector3<f64>],
    opts: &RasterOpts,
) -> Result<RenderGrads> {
    render_backward_with_ids(gs, None, view, background, d_rgb, opts)
}

/// [`render_backward`] with explicit sort ids matching the forward pass.
pub fn render_backward_with_ids(
    gs: &[Gaussian3D],
    ids: Option<&[u64]>,
    view: &CameraView,
    background: Vector3<f64>,
    d_rgb: &[Vector3<f64>],
    opts: &RasterOpts,
) -> Result<RenderGrads> {
    let frame = CamFrame::from_view(view);
    let projected = project_all(gs, &frame, opts.near_plane, ids)?;
    let order = depth_order(&projected);
    let list: Vec<Gaussian2D> = order.iter().map(|i| projected[*i].unwrap()).collect();
    let g2 = rasterize_backward(&list, view.width, view.height, background, d_rgb, opts)?;
    let mut out = RenderGrads::zeros(gs.len());
    for (slot, &orig) in order.iter().enumerate() {
        let gr = &g2[slot];
        let g3: Gaussian3DGrad = project_backward(
            &gs[orig],
            &frame,
            opts.near_plane,
            &gr.d_mean2,
            &gr.d_cov2,
        )?
        .expect("projected gaussian cannot be culled in backward");
        out.d_mean[orig] = g3.d_mean;
        out.d_scale[orig] = g3.d_scale;
        out.d_rotation[orig] = g3.d_rotation;
        out.d_opacity[orig] = gr.d_opacity;
        out.d_color[orig] = gr.d_color;
        out.pos_grad_norm[orig] = gr.d_mean2.norm();
        out.d_mean2[orig] = gr.d_mean2;
    }
    Ok(out)
}
