//! Grid initialisation from a sphere or from the visual hull of masks.

use rayon::prelude::*;

use super::{FeatureDims, GridLayout, SparseGrid};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::Vec3;

/// Initial per-channel plane value; the product of three planes dies at zero.
pub const PLANE_INIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereInit {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Sphere(SphereInit),
    VisualHull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridInit {
    pub layout: GridLayout,
    pub dims: FeatureDims,
    pub lod: u32,
    pub mode: InitMode,
}

/// Builds a dense grid with `ŝ` from the requested mode, planes at 0.5 and
/// zero probes. Visual-hull mode needs one mask per camera.
pub fn init_grid(config: &GridInit, views: Option<(&[Camera], &[Mask])>) -> Result<SparseGrid> {
    let mut grid = SparseGrid::dense(config.layout.clone(), config.dims, config.lod, PLANE_INIT)?;
    match &config.mode {
        InitMode::Sphere(s) => {
            for slot in 0..grid.raw_sdf.len() {
                grid.raw_sdf[slot] = (grid.slot_center(slot) - s.center).norm() - s.radius;
            }
        }
        InitMode::VisualHull => {
            let (cameras, masks) = views
                .ok_or_else(|| Error::VisualHull("visual-hull init needs cameras and masks".into()))?;
            if cameras.is_empty() || cameras.len() != masks.len() {
                return Err(Error::VisualHull(format!(
                    "{} cameras but {} masks",
                    cameras.len(),
                    masks.len()
                )));
            }
            let res = grid.resolution();
            let occupancy = hull_occupancy(&grid, cameras, masks)?;
            let sdf = occupancy_sdf(&occupancy, res, grid.voxel_size())?;
            for slot in 0..grid.raw_sdf.len() {
                let g = grid.slot_coords(slot);
                grid.raw_sdf[slot] =
                    sdf[(g[2] as usize * res[1] + g[1] as usize) * res[0] + g[0] as usize];
            }
        }
    }
    grid.resmooth();
    Ok(grid)
}

/// A voxel centre is occupied when it projects inside every mask (points
/// projecting outside an image frame count as outside the silhouette).
fn hull_occupancy(grid: &SparseGrid, cameras: &[Camera], masks: &[Mask]) -> Result<Vec<bool>> {
    for (cam, mask) in cameras.iter().zip(masks) {
        if cam.width != mask.width || cam.height != mask.height {
            return Err(Error::VisualHull(format!(
                "mask for camera {} has size {}x{}, camera is {}x{}",
                cam.id, mask.width, mask.height, cam.width, cam.height
            )));
        }
    }
    let res = grid.resolution();
    let total = res[0] * res[1] * res[2];
    Ok((0..total)
        .into_par_iter()
        .map(|i| {
            let g = [
                (i % res[0]) as i64,
                ((i / res[0]) % res[1]) as i64,
                (i / (res[0] * res[1])) as i64,
            ];
            let p = grid.voxel_center(g);
            cameras.iter().zip(masks).all(|(cam, mask)| {
                cam.project(&p).is_some_and(|(u, v, _)| {
                    u >= 0.0
                        && v >= 0.0
                        && (u as usize) < mask.width
                        && (v as usize) < mask.height
                        && mask.get(u as usize, v as usize)
                })
            })
        })
        .collect())
}

/// 1D squared Euclidean distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut sites = (0..n).filter(|&q| f[q].is_finite());
    let Some(first) = sites.next() else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in sites {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared distance (in voxels) from every voxel to the nearest voxel
/// where `target` is true.
fn squared_edt(target: &[bool], res: [usize; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = target
        .iter()
        .map(|&t| if t { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = res[axis];
        let stride = match axis {
            0 => 1,
            1 => res[0],
            _ => res[0] * res[1],
        };
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for b in 0..res[ob] {
            for a in 0..res[oa] {
                let mut c = [0usize; 3];
                c[oa] = a;
                c[ob] = b;
                let base = (c[2] * res[1] + c[1]) * res[0] + c[0];
                for i in 0..n {
                    line[i] = d[base + i * stride];
                }
                edt_1d(&line, &mut out);
                for i in 0..n {
                    d[base + i * stride] = out[i];
                }
            }
        }
    }
    d
}

/// Signed distance (world units) of a voxelised occupancy volume, with the
/// surface placed half a voxel outside the occupied centres.
pub(crate) fn occupancy_sdf(occupied: &[bool], res: [usize; 3], voxel: f64) -> Result<Vec<f64>> {
    if !occupied.iter().any(|&o| o) {
        return Err(Error::VisualHull("the visual hull is empty".into()));
    }
    let to_inside = squared_edt(occupied, res);
    let free: Vec<bool> = occupied.iter().map(|&o| !o).collect();
    let any_free = free.iter().any(|&f| f);
    let to_outside = if any_free {
        squared_edt(&free, res)
    } else {
        vec![f64::INFINITY; occupied.len()]
    };
    Ok(occupied
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            if o {
                let d = to_outside[i].sqrt();
                -(d - 0.5).max(0.0) * voxel
            } else {
                (to_inside[i].sqrt() - 0.5) * voxel
            }
        })
        .map(|v| if v.is_finite() { v } else { -1e3 * voxel })
        .collect())
}
