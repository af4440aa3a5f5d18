//! COLMAP sparse-reconstruction text format (cameras.txt / images.txt /
//! points3D.txt).
//!
//! Only the text variant is supported, with PINHOLE and SIMPLE_PINHOLE
//! camera models. `#` lines are comments. Ground-truth pixels are attached
//! from `<dir>/images/<NAME>` when such a file exists; absent image files
//! leave `pixels` unset rather than failing, so geometry-only workflows keep
//! working. Floats are written with Rust's shortest round-trip formatting,
//! which makes write/load cycles exact.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{read_image, write_image};
use crate::scene::{CameraView, SceneBundle, SparsePoint};

struct CameraDef {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &Path, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::parse(path, line, format!("bad {}: {:?}", what, tok)))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l))
}

fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, CameraDef>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in content_lines(text) {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(Error::parse(path, lineno, "camera line needs ID MODEL W H PARAMS"));
        }
        let id: u32 = parse_num(toks[0], path, lineno, "camera id")?;
        let width: usize = parse_num(toks[2], path, lineno, "width")?;
        let height: usize = parse_num(toks[3], path, lineno, "height")?;
        let params: Vec<f64> = toks[4..]
            .iter()
            .map(|t| parse_num(t, path, lineno, "camera parameter"))
            .collect::<Result<_>>()?;
        let def = match toks[1] {
            "PINHOLE" => {
                if params.len() != 4 {
                    return Err(Error::parse(path, lineno, "PINHOLE expects fx fy cx cy"));
                }
                CameraDef { width, height, fx: params[0], fy: params[1], cx: params[2], cy: params[3] }
            }
            "SIMPLE_PINHOLE" => {
                if params.len() != 3 {
                    return Err(Error::parse(path, lineno, "SIMPLE_PINHOLE expects f cx cy"));
                }
                CameraDef { width, height, fx: params[0], fy: params[0], cx: params[1], cy: params[2] }
            }
            other => return Err(Error::UnsupportedCameraModel(other.to_string())),
        };
        if out.insert(id, def).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate camera id {}", id)));
        }
    }
    Ok(out)
}

fn parse_images(
    text: &str,
    path: &Path,
    cameras: &BTreeMap<u32, CameraDef>,
) -> Result<Vec<(CameraView, String)>> {
    let mut out = Vec::new();
    let mut lines = content_lines(text).peekable();
    while let Some((lineno, raw)) = lines.next() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 10 {
            return Err(Error::parse(
                path,
                lineno,
                "image line needs ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let id: u32 = parse_num(toks[0], path, lineno, "image id")?;
        let q: [f64; 4] = [
            parse_num(toks[1], path, lineno, "qw")?,
            parse_num(toks[2], path, lineno, "qx")?,
            parse_num(toks[3], path, lineno, "qy")?,
            parse_num(toks[4], path, lineno, "qz")?,
        ];
        let t = Vector3::new(
            parse_num(toks[5], path, lineno, "tx")?,
            parse_num(toks[6], path, lineno, "ty")?,
            parse_num(toks[7], path, lineno, "tz")?,
        );
        let cam_id: u32 = parse_num(toks[8], path, lineno, "camera id")?;
        let name = toks[9..].join(" ");
        let cam = cameras.get(&cam_id).ok_or_else(|| {
            Error::parse(path, lineno, format!("image {} references unknown camera {}", id, cam_id))
        })?;
        // the observations line is mandatory (may be empty, unlike comments)
        let (obs_no, obs_raw) = lines
            .next()
            .ok_or_else(|| Error::parse(path, lineno, format!("image {} missing observations line", id)))?;
        let obs_toks: Vec<&str> = obs_raw.split_whitespace().collect();
        if obs_toks.len() % 3 != 0 {
            return Err(Error::parse(
                path,
                obs_no,
                "observations must be (X Y POINT3D_ID) triplets",
            ));
        }
        for chunk in obs_toks.chunks(3) {
            let _: f64 = parse_num(chunk[0], path, obs_no, "observation x")?;
            let _: f64 = parse_num(chunk[1], path, obs_no, "observation y")?;
            let _: i64 = parse_num(chunk[2], path, obs_no, "observation point id")?;
        }
        let view = CameraView::new(id, cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, q, t)?;
        out.push((view, name));
    }
    Ok(out)
}

fn parse_points(text: &str, path: &Path) -> Result<Vec<SparsePoint>> {
    let mut out = Vec::new();
    for (lineno, raw) in content_lines(text) {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 8 {
            return Err(Error::parse(
                path,
                lineno,
                "point line needs ID X Y Z R G B ERROR TRACK",
            ));
        }
        let id: u64 = parse_num(toks[0], path, lineno, "point id")?;
        let position = Vector3::new(
            parse_num(toks[1], path, lineno, "x")?,
            parse_num(toks[2], path, lineno, "y")?,
            parse_num(toks[3], path, lineno, "z")?,
        );
        let r: f64 = parse_num(toks[4], path, lineno, "r")?;
        let g: f64 = parse_num(toks[5], path, lineno, "g")?;
        let b: f64 = parse_num(toks[6], path, lineno, "b")?;
        let _err: f64 = parse_num(toks[7], path, lineno, "error")?;
        let track_toks = &toks[8..];
        if track_toks.len() % 2 != 0 {
            return Err(Error::parse(path, lineno, "track must be (IMAGE_ID POINT2D_IDX) pairs"));
        }
        let mut track = BTreeSet::new();
        for pair in track_toks.chunks(2) {
            let img: u32 = parse_num(pair[0], path, lineno, "track image id")?;
            let _idx: i64 = parse_num(pair[1], path, lineno, "track point2d index")?;
            track.insert(img);
        }
        out.push(SparsePoint { id, position, color: Vector3::new(r, g, b) / 255.0, track });
    }
    Ok(out)
}

/// Loads `cameras.txt`, `images.txt` and `points3D.txt` from a directory and
/// attaches any ground-truth images found under `<dir>/images/`.
///
/// Every track entry must reference an existing image id. An empty
/// `points3D.txt` yields a bundle with zero points and a degenerate bbox
/// (flagged, with a warning).
pub fn load_colmap_text(dir: &Path) -> Result<SceneBundle> {
    let read = |name: &str| -> Result<(String, std::path::PathBuf)> {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok((text, p))
    };
    let (cam_text, cam_path) = read("cameras.txt")?;
    let (img_text, img_path) = read("images.txt")?;
    let (pts_text, pts_path) = read("points3D.txt")?;

    let cameras = parse_cameras(&cam_text, &cam_path)?;
    let views_named = parse_images(&img_text, &img_path, &cameras)?;
    let cloud = parse_points(&pts_text, &pts_path)?;

    let mut views = Vec::with_capacity(views_named.len());
    let mut names = Vec::with_capacity(views_named.len());
    for (v, name) in views_named {
        views.push(v);
        names.push(name);
    }
    let mut bundle = SceneBundle::from_parts(views, cloud)?;
    for (v, name) in bundle.views.iter_mut().zip(&names) {
        let img_file = dir.join("images").join(name);
        if img_file.is_file() {
            let img = read_image(&img_file)?;
            if img.width != v.width || img.height != v.height {
                return Err(Error::Shape(format!(
                    "{}: image is {}x{} but camera says {}x{}",
                    img_file.display(),
                    img.width,
                    img.height,
                    v.width,
                    v.height
                )));
            }
            v.pixels = Some(img);
        }
    }
    Ok(bundle)
}

/// Conventional image file name for a view id.
pub fn view_image_name(id: u32) -> String {
    format!("view_{:04}.png", id)
}

/// Writes a bundle as COLMAP text (one PINHOLE camera per view), including
/// per-image observation lists and track indices that agree with them.
/// Views carrying pixels also write `<dir>/images/view_XXXX.png`.
pub fn write_colmap_text(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut cameras = String::from("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for v in &bundle.views {
        cameras.push_str(&format!(
            "{} PINHOLE {} {} {} {} {} {}\n",
            v.id, v.width, v.height, v.fx, v.fy, v.cx, v.cy
        ));
    }
    fs::write(dir.join("cameras.txt"), cameras).map_err(|e| Error::io(dir.join("cameras.txt"), e))?;

    // observation lists per image, in cloud order; remember each point's
    // index so the points3D tracks can reference it
    let mut obs: BTreeMap<u32, Vec<(f64, f64, u64)>> =
        bundle.views.iter().map(|v| (v.id, Vec::new())).collect();
    let mut track_idx: BTreeMap<(u64, u32), usize> = BTreeMap::new();
    for p in &bundle.cloud {
        for vid in &p.track {
            let v = bundle.view_by_id(*vid).expect("validated track");
            let (u, w, _) = v.project_point(&p.position);
            let list = obs.get_mut(vid).unwrap();
            track_idx.insert((p.id, *vid), list.len());
            list.push((u, w, p.id));
        }
    }

    let mut images = String::from(
        "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n#   then: POINTS2D[] as (X Y POINT3D_ID)\n",
    );
    for v in &bundle.views {
        let q = v.rotation().quaternion();
        images.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            v.id, q.w, q.i, q.j, q.k, v.translation.x, v.translation.y, v.translation.z, v.id,
            view_image_name(v.id)
        ));
        let line: Vec<String> =
            obs[&v.id].iter().map(|(u, w, pid)| format!("{} {} {}", u, w, pid)).collect();
        images.push_str(&line.join(" "));
        images.push('\n');
    }
    fs::write(dir.join("images.txt"), images).map_err(|e| Error::io(dir.join("images.txt"), e))?;

    let mut points = String::from(
        "# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)\n",
    );
    for p in &bundle.cloud {
        let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        points.push_str(&format!(
            "{} {} {} {} {} {} {} 0",
            p.id, p.position.x, p.position.y, p.position.z, c(p.color.x), c(p.color.y), c(p.color.z)
        ));
        for vid in &p.track {
            points.push_str(&format!(" {} {}", vid, track_idx[&(p.id, *vid)]));
        }
        points.push('\n');
    }
    fs::write(dir.join("points3D.txt"), points)
        .map_err(|e| Error::io(dir.join("points3D.txt"), e))?;

    let img_dir = dir.join("images");
    for v in &bundle.views {
        if let Some(px) = &v.pixels {
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            write_image(px, &img_dir.join(view_image_name(v.id)))?;
        }
    }
    Ok(())
}
