//! Scene containers shared by every stage: calibrated views, the sparse
//! point cloud with per-point view tracks, and their bounding box.
//!
//! Camera convention follows COLMAP: `rotation`/`translation` map world to
//! camera coordinates (x right, y down, z forward), so a world point `p`
//! lands at `R p + t` in camera space and the camera center is `-R^T t`.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::image::ImageBuf;

#[derive(Debug, Clone)]
pub struct CameraView {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Ground-truth pixels in linear [0,1], when an image file was available.
    pub pixels: Option<ImageBuf>,
}

impl CameraView {
    /// Builds a view, validating dimensions, focal lengths and that the
    /// quaternion is unit within 1e-9.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation_wxyz: [f64; 4],
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("view {}: zero image dimensions", id)));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("view {}: focal lengths must be positive", id)));
        }
        let [w, x, y, z] = rotation_wxyz;
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "view {}: rotation quaternion norm {} deviates from 1 by more than 1e-9",
                id,
                q.norm()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation"));
        }
        Ok(CameraView {
            id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation: UnitQuaternion::new_normalize(q),
            translation,
            pixels: None,
        })
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// World position of the optical center.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// Projects a world point to pixel coordinates; returns (u, v, depth).
    /// Depth can be negative or zero (point behind / on the camera plane) —
    /// callers decide what counts as visible.
    pub fn project_point(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        let u = self.fx * c.x / c.z + self.cx;
        let v = self.fy * c.y / c.z + self.cy;
        (u, v, c.z)
    }
}

/// One triangulated point with the set of view ids observing it.
#[derive(Debug, Clone)]
pub struct SparsePoint {
    pub id: u64,
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub track: BTreeSet<u32>,
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut bb = Aabb { min: first, max: first };
        for p in it {
            bb.min = bb.min.inf(p);
            bb.max = bb.max.sup(p);
        }
        Some(bb)
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn degenerate_at_origin() -> Aabb {
        Aabb { min: Vector3::zeros(), max: Vector3::zeros() }
    }
}

/// Calibrated views + sparse cloud + cloud bounding box.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub views: Vec<CameraView>,
    pub cloud: Vec<SparsePoint>,
    pub bbox: Aabb,
    /// Set when the cloud is empty or every point coincides: the bbox carries
    /// no volume and grid partitioning cannot subdivide it.
    pub bbox_degenerate: bool,
}

impl SceneBundle {
    /// Assembles a bundle, recomputing the bbox (exact min/max of the cloud)
    /// and validating that every track references an existing view.
    pub fn from_parts(views: Vec<CameraView>, cloud: Vec<SparsePoint>) -> Result<SceneBundle> {
        let ids: BTreeSet<u32> = views.iter().map(|v| v.id).collect();
        if ids.len() != views.len() {
            return Err(Error::Config("duplicate view ids in bundle".into()));
        }
        for p in &cloud {
            for vid in &p.track {
                if !ids.contains(vid) {
                    return Err(Error::Config(format!(
                        "point {} tracks unknown view id {}",
                        p.id, vid
                    )));
                }
            }
        }
        let bbox = Aabb::from_points(cloud.iter().map(|p| &p.position));
        let (bbox, degenerate) = match bbox {
            Some(bb) => {
                let deg = bb.min == bb.max;
                (bb, deg)
            }
            None => (Aabb::degenerate_at_origin(), true),
        };
        if degenerate {
            log::warn!("scene bbox is degenerate ({} points)", cloud.len());
        }
        Ok(SceneBundle { views, cloud, bbox, bbox_degenerate: degenerate })
    }

    pub fn view_by_id(&self, id: u32) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn set_pixels(&mut self, view_id: u32, img: ImageBuf) -> Result<()> {
        let v = self
            .views
            .iter_mut()
            .find(|v| v.id == view_id)
            .ok_or_else(|| Error::Config(format!("no view with id {}", view_id)))?;
        if img.width != v.width || img.height != v.height {
            return Err(Error::Shape(format!(
                "view {}: image {}x{} does not match camera {}x{}",
                view_id, img.width, img.height, v.width, v.height
            )));
        }
        v.pixels = Some(img);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn look_at(
        id: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        wh: (usize, usize),
        f: f64,
    ) -> CameraView {
        crate::scene::look_at_view(id, eye, target, wh.0, wh.1, f).unwrap()
    }

    #[test]
    fn camera_center_inverts_translation() {
        let v = look_at(1, Vector3::new(3.0, -2.0, 5.0), Vector3::zeros(), (64, 64), 60.0);
        let c = v.camera_center();
        assert!((c - Vector3::new(3.0, -2.0, 5.0)).norm() < 1e-12);
        // the target projects to the principal point
        let (u, vv, depth) = v.project_point(&Vector3::zeros());
        assert!((u - v.cx).abs() < 1e-9 && (vv - v.cy).abs() < 1e-9);
        assert!(depth > 0.0);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let r = CameraView::new(
            1,
            8,
            8,
            10.0,
            10.0,
            4.0,
            4.0,
            [1.0, 0.1, 0.0, 0.0],
            Vector3::zeros(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn track_to_unknown_view_rejected() {
        let v = look_at(1, Vector3::new(0.0, 0.0, 5.0), Vector3::zeros(), (8, 8), 60.0);
        let p = SparsePoint {
            id: 0,
            position: Vector3::zeros(),
            color: Vector3::zeros(),
            track: [9u32].into_iter().collect(),
        };
        assert!(SceneBundle::from_parts(vec![v], vec![p]).is_err());
    }

    #[test]
    fn empty_cloud_flags_degenerate_bbox() {
        let b = SceneBundle::from_parts(vec![], vec![]).unwrap();
        assert!(b.bbox_degenerate);
        assert_eq!(b.bbox, Aabb::degenerate_at_origin());
    }
}

/// Builds a view at `eye` looking toward `target`, with a vertical field of
/// view of `fov_deg` degrees and square pixels. World +z is treated as up;
/// if the gaze is parallel to it, +y is used as the up hint instead.
pub fn look_at_view(
    id: u32,
    eye: Vector3<f64>,
    target: Vector3<f64>,
    width: usize,
    height: usize,
    fov_deg: f64,
) -> Result<CameraView> {
    let forward = (target - eye).normalize();
    let mut up = Vector3::new(0.0, 0.0, 1.0);
    if forward.cross(&up).norm() < 1e-6 {
        up = Vector3::new(0.0, 1.0, 0.0);
    }
    let x_cam = forward.cross(&up).normalize();
    let y_cam = forward.cross(&x_cam); // = z x x: right-handed, image y runs "down"
    let r = Matrix3::from_rows(&[x_cam.transpose(), y_cam.transpose(), forward.transpose()]);
    let t = -r * eye;
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let f = 0.5 * height as f64 / (fov_deg.to_radians() * 0.5).tan();
    CameraView::new(
        id,
        width,
        height,
        f,
        f,
        width as f64 * 0.5,
        height as f64 * 0.5,
        [q.w, q.i, q.j, q.k],
        t,
    )
}
