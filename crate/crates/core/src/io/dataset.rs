//! On-disk datasets: `cameras.txt`, `images/<id>.png`, `masks/<id>.png` and
//! an optional `points_gt.ply`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::mesh_io::{read_points_ply, write_points_ply};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::{Mat3, Vec3};

/// Maximum deviation of `RᵀR` from the identity accepted on load.
pub const POSE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub points_gt: Option<Vec<Vec3>>,
}

fn image_path(root: &Path, dir: &str, id: usize) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

/// Formats one camera line: `id fx fy cx cy w h` then the 3×4 world-from-camera
/// matrix `[R | C]` row by row.
pub fn format_camera(c: &Camera) -> String {
    let mut s = format!(
        "{} {:?} {:?} {:?} {:?} {} {}",
        c.id, c.fx, c.fy, c.cx, c.cy, c.width, c.height
    );
    for r in 0..3 {
        for k in 0..3 {
            write!(s, " {:?}", c.rotation[(r, k)]).unwrap();
        }
        write!(s, " {:?}", c.center[r]).unwrap();
    }
    s
}

/// Parses one camera line and validates its pose.
pub fn parse_camera(line: &str, line_no: usize) -> Result<Camera> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 19 {
        return Err(Error::Dataset(format!(
            "cameras.txt line {line_no}: expected 19 fields, found {}",
            fields.len()
        )));
    }
    let bad = |what: &str| Error::Dataset(format!("cameras.txt line {line_no}: invalid {what}"));
    let id: usize = fields[0].parse().map_err(|_| bad("id"))?;
    let num = |i: usize| -> Result<f64> {
        let v: f64 = fields[i].parse().map_err(|_| bad("number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad("number"))
        }
    };
    let width: usize = fields[5].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[6].parse().map_err(|_| bad("height"))?;
    let mut rotation = Mat3::zeros();
    let mut center = Vec3::zeros();
    for r in 0..3 {
        for k in 0..3 {
            rotation[(r, k)] = num(7 + 4 * r + k)?;
        }
        center[r] = num(7 + 4 * r + 3)?;
    }
    let camera = Camera {
        id,
        fx: num(1)?,
        fy: num(2)?,
        cx: num(3)?,
        cy: num(4)?,
        width,
        height,
        rotation,
        center,
    };
    camera.validate(POSE_TOLERANCE)?;
    Ok(camera)
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(w, h, [0.0; 3]);
    for (dst, px) in img.data.iter_mut().zip(rgb.pixels()) {
        *dst = px.0.map(|c| c as f64 / 255.0);
    }
    Ok(img)
}

pub fn read_png_mask(path: &Path) -> Result<Mask> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let gray = decoded.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut mask = Mask::new(w, h, false);
    for (dst, px) in mask.data.iter_mut().zip(gray.pixels()) {
        *dst = px.0[0] > 127;
    }
    Ok(mask)
}

/// Quantises colours to 8 bits with rounding after clamping to `[0, 1]`.
pub fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (dst, c) in out.pixels_mut().zip(&img.data) {
        dst.0 = c.map(to_u8);
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = GrayImage::new(mask.width as u32, mask.height as u32);
    for (dst, &m) in out.pixels_mut().zip(&mask.data) {
        dst.0 = [if m { 255 } else { 0 }];
    }
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_png_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let out = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::Dimension("grey image buffer size".into()))?;
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads and validates a `cameras.txt` file.
pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cameras = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        cameras.push(parse_camera(line, i + 1)?);
    }
    if cameras.is_empty() {
        return Err(Error::Empty(format!("{} lists no cameras", path.display())));
    }
    let mut ids: Vec<usize> = cameras.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != cameras.len() {
        return Err(Error::Dataset(format!("{}: duplicate camera ids", path.display())));
    }
    Ok(cameras)
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let cameras = load_cameras(&root.join("cameras.txt"))?;
        let mut images = Vec::with_capacity(cameras.len());
        let mut masks = Vec::with_capacity(cameras.len());
        for c in &cameras {
            let img = read_png_rgb(&image_path(root, "images", c.id))?;
            let mask = read_png_mask(&image_path(root, "masks", c.id))?;
            for (what, w, h) in [("image", img.width, img.height), ("mask", mask.width, mask.height)] {
                if (w, h) != (c.width, c.height) {
                    return Err(Error::Dimension(format!(
                        "camera {}: {what} is {w}×{h} but the camera is {}×{}",
                        c.id, c.width, c.height
                    )));
                }
            }
            images.push(img);
            masks.push(mask);
        }
        let gt_path = root.join("points_gt.ply");
        let points_gt = if gt_path.exists() {
            Some(read_points_ply(&gt_path)?)
        } else {
            None
        };
        Ok(Dataset {
            cameras,
            images,
            masks,
            points_gt,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        if self.cameras.len() != self.images.len() || self.cameras.len() != self.masks.len() {
            return Err(Error::Dataset("cameras, images and masks differ in count".into()));
        }
        for dir in ["images", "masks"] {
            let d = root.join(dir);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut text = String::new();
        for c in &self.cameras {
            text.push_str(&format_camera(c));
            text.push('\n');
        }
        let cam_path = root.join("cameras.txt");
        std::fs::write(&cam_path, text).map_err(|e| Error::io(&cam_path, e))?;
        for ((c, img), mask) in self.cameras.iter().zip(&self.images).zip(&self.masks) {
            write_png_rgb(&image_path(root, "images", c.id), img)?;
            write_png_mask(&image_path(root, "masks", c.id), mask)?;
        }
        if let Some(points) = &self.points_gt {
            write_points_ply(&root.join("points_gt.ply"), points)?;
        }
        Ok(())
    }
}
