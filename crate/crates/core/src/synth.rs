//! Synthetic desk-scale scene generator. Places clustered colored points in
//! a box, surrounds them with an orbit of cameras at mixed distances, renders
//! ground-truth images from a hidden set of opaque Gaussians sitting on the
//! points, and derives tracks by a frustum test. Fully deterministic for a
//! fixed seed, so tests and pipeline runs are reproducible bit for bit.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian3D;
use crate::rasterize::{render_forward, RasterOpts};
use crate::scene::{look_at_view, CameraView, SceneBundle, SparsePoint};

/// Parameters of a generated scene.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_points: usize,
    pub n_views: usize,
    /// Full side lengths of the box the points occupy, centered at origin.
    pub extent: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_points: 500,
            n_views: 36,
            extent: [8.0, 8.0, 2.0],
            width: 64,
            height: 64,
            fov_deg: 60.0,
            seed: 7,
        }
    }
}

/// Frustum rule used to derive synthetic tracks: in front of the camera and
/// inside the image rectangle.
fn in_frustum(p: &Vector3<f64>, view: &CameraView) -> bool {
    let (u, v, depth) = view.project_point(p);
    depth > 0.0 && u >= 0.0 && u <= view.width as f64 && v >= 0.0 && v <= view.height as f64
}

/// Generate a deterministic synthetic scene: sparse cloud with tracks, posed
/// cameras with ground-truth images attached, bbox computed by the bundle.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SceneBundle> {
    if spec.n_views == 0 {
        return Err(Error::Config("synthetic scene needs at least one view".into()));
    }
    if spec.n_points == 0 {
        return Err(Error::Config("synthetic scene needs at least one point".into()));
    }
    if spec.extent.iter().any(|&e| e <= 0.0) {
        return Err(Error::Config(format!("extents must be positive, got {:?}", spec.extent)));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = Vector3::new(spec.extent[0] / 2.0, spec.extent[1] / 2.0, spec.extent[2] / 2.0);

    // clustered structure: a handful of color-coherent blobs plus a uniform
    // backdrop gives images with detail at several scales
    let n_clusters = (spec.n_points / 60).clamp(1, 12);
    let mut centers = Vec::with_capacity(n_clusters);
    for i in 0..n_clusters {
        // object groups sit on a jittered quadrant lattice, well separated
        // from each other instead of piling up at region boundaries
        let (qx, qy) = ([-1.0, 1.0][i % 2], [-1.0, 1.0][(i / 2) % 2]);
        let c = Vector3::new(
            (qx * 0.5 + rng.gen_range(-0.2..0.2)) * half.x,
            (qy * 0.5 + rng.gen_range(-0.2..0.2)) * half.y,
            rng.gen_range(-0.6..0.6) * half.z,
        );
        // saturated palette: each cluster sits at a random non-black corner
        // of the color cube, so images carry strong large-scale contrast
        let corner = rng.gen_range(1u8..8);
        let mut channel = |bit: u8| {
            if corner & bit != 0 {
                rng.gen_range(0.7..0.95)
            } else {
                rng.gen_range(0.05..0.25)
            }
        };
        let color = Vector3::new(channel(1), channel(2), channel(4));
        centers.push((c, color));
    }
    let spread = half.norm() / (n_clusters as f64).cbrt() * 0.22;
    let clamp_box = |v: Vector3<f64>| {
        Vector3::new(
            v.x.clamp(-half.x, half.x),
            v.y.clamp(-half.y, half.y),
            v.z.clamp(-half.z, half.z),
        )
    };
    let mut points = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        let (position, color) = if i % 5 == 4 {
            // dim backdrop point: keeps octree occupancy spread over the box
            // without washing out the cluster contrast
            let p = Vector3::new(
                rng.gen_range(-1.0..=1.0) * half.x,
                rng.gen_range(-1.0..=1.0) * half.y,
                rng.gen_range(-1.0..=1.0) * half.z,
            );
            let c = Vector3::repeat(rng.gen_range(0.05..0.25));
            (p, c)
        } else {
            let (c, base) = centers[i % n_clusters];
            let offset = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * spread;
            let jitter = Vector3::new(
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
            );
            let col = (base + jitter).map(|v: f64| v.clamp(0.05, 0.98));
            (clamp_box(c + offset), col)
        };
        points.push(SparsePoint { id: i as u64, position, color, track: BTreeSet::new() });
    }

    // hidden opaque Gaussians, one per point, sized to their local spacing
    let max_extent = spec.extent.iter().cloned().fold(0.0, f64::max);
    let volume = spec.extent[0] * spec.extent[1] * spec.extent[2];
    let base_size = (volume / spec.n_points as f64).cbrt() * 1.35;
    let hidden: Vec<Gaussian3D> = points
        .iter()
        .map(|p| {
            let s = base_size * rng.gen_range(0.6..1.6);
            let aniso = Vector3::new(
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
                rng.gen_range(0.5..1.5),
            );
            let rot = [
                1.0 + rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            Gaussian3D {
                mean: p.position,
                scale: aniso * s,
                rotation: rot,
                opacity: rng.gen_range(0.9..0.99),
                color: p.color,
            }
        })
        .collect();

    // cameras orbit close enough that the scene fills the frame, with a
    // sparse ring of wide-baseline context shots far outside the orbit so
    // observation distances still span several doubling steps
    let r_near = 1.1 * max_extent;
    let r_far = 1.6 * max_extent;
    let r_context = 7.5 * max_extent;
    let mut views = Vec::with_capacity(spec.n_views);
    for i in 0..spec.n_views {
        let t = i as f64 / spec.n_views as f64;
        let angle = t * std::f64::consts::TAU;
        let r = if spec.n_views >= 12 && i % 12 == 6 {
            r_context
        } else {
            let sweep = 0.5 - 0.5 * (3.0 * angle).cos();
            r_near + (r_far - r_near) * sweep
        };
        let z = half.z + r * (0.25 + 0.2 * (2.0 * angle).sin());
        let eye = Vector3::new(r * angle.cos(), r * angle.sin(), z);
        let view = look_at_view(
            i as u32,
            eye,
            Vector3::zeros(),
            spec.width,
            spec.height,
            spec.fov_deg,
        )?;
        views.push(view);
    }

    for p in points.iter_mut() {
        for v in &views {
            if in_frustum(&p.position, v) {
                p.track.insert(v.id);
            }
        }
    }

    let mut bundle = SceneBundle::from_parts(views, points)?;
    let opts = RasterOpts::default();
    let ids: Vec<u32> = bundle.views.iter().map(|v| v.id).collect();
    for id in ids {
        let frame = {
            let view = bundle.view_by_id(id).expect("view just inserted");
            render_forward(&hidden, view, Vector3::zeros(), &opts)?
        };
        bundle.set_pixels(id, frame.into_image())?;
    }
    Ok(bundle)
}
