use rayon::prelude::*;

use super::{local_coords, GridLayout, SparseGrid, PLANE_TEXELS, TILE, TILE_VOXELS};
use crate::error::{Error, Result};
use crate::sh::trilinear_weights;
use crate::Vec3;

/// Tiles whose nearest upsampled `|ŝ|` exceeds this many new voxel widths
/// are dropped after subdivision.
pub const DEFAULT_BAND_VOXELS: f64 = 6.0;

fn sample_raw(grid: &SparseGrid, p: &Vec3) -> f64 {
    let (slots, w) = grid.trilinear_corners(p);
    let far = grid.far_field();
    slots
        .iter()
        .zip(w)
        .map(|(s, wi)| wi * s.map_or(far, |s| grid.raw_sdf[s]))
        .sum()
}

/// Halves the voxel size: every tile becomes up to 8 children, the raw SDF
/// and planes are upsampled, probes are re-interpolated on the new lattice,
/// and children farther than `band_voxels` from the zero crossing are pruned.
pub fn subdivide(grid: &SparseGrid, band_voxels: f64) -> Result<SparseGrid> {
    if grid.lod == 0 {
        return Err(Error::Schedule("grid is already at the finest level of detail".into()));
    }
    let layout = GridLayout {
        bbox_min: grid.layout.bbox_min,
        voxel_size: grid.layout.voxel_size * 0.5,
        tiles_per_axis: grid.layout.tiles_per_axis.map(|t| t * 2),
    };
    let h = layout.voxel_size;

    // Upsample the raw SDF for every candidate child.
    let candidates: Vec<([usize; 3], usize, [usize; 3])> = grid
        .tiles
        .iter()
        .enumerate()
        .flat_map(|(parent, tile)| {
            (0..8).map(move |i| {
                let off = [i & 1, (i >> 1) & 1, (i >> 2) & 1];
                ([0, 1, 2].map(|a| tile.coord[a] * 2 + off[a]), parent, off)
            })
        })
        .collect();
    let upsampled: Vec<Vec<f64>> = candidates
        .par_iter()
        .map(|(coord, _, _)| {
            (0..TILE_VOXELS)
                .map(|li| {
                    let l = local_coords(li);
                    let p = layout.bbox_min
                        + Vec3::from_fn(|a, _| (coord[a] * TILE + l[a]) as f64 + 0.5) * h;
                    sample_raw(grid, &p)
                })
                .collect()
        })
        .collect();

    let band = band_voxels.max(0.0) * h;
    let keep: Vec<usize> = (0..candidates.len())
        .filter(|&i| {
            let vals = &upsampled[i];
            let has_neg = vals.iter().any(|&v| v <= 0.0);
            let has_pos = vals.iter().any(|&v| v >= 0.0);
            let near = vals.iter().any(|v| v.abs() <= band);
            (has_neg && has_pos) || near
        })
        .collect();
    let coords: Vec<[usize; 3]> = keep.iter().map(|&i| candidates[i].0).collect();

    let mut child = SparseGrid::with_tiles(layout, grid.dims, grid.lod - 1, &coords, 0.0)?;
    child.far_field_voxels = grid.far_field_voxels;

    for (new_tile, &ci) in keep.iter().enumerate() {
        child.raw_sdf[new_tile * TILE_VOXELS..(new_tile + 1) * TILE_VOXELS]
            .copy_from_slice(&upsampled[ci]);
    }

    // Planes: bilinear upsampling of the parent planes into each child.
    let n_s = grid.dims.n_s;
    let stride = child.plane_stride();
    child
        .planes
        .par_chunks_mut(stride)
        .zip(keep.par_iter())
        .for_each(|(dst, &ci)| {
            let (_, parent, off) = candidates[ci];
            // (u, v) axes of planes 0, 1, 2.
            let axes = [[1, 2], [0, 2], [0, 1]];
            for (plane, [au, av]) in axes.iter().enumerate() {
                for v in 0..TILE {
                    for u in 0..TILE {
                        let pu = ((off[*au] * TILE + u) as f64 + 0.5) * 0.5 - 0.5;
                        let pv = ((off[*av] * TILE + v) as f64 + 0.5) * 0.5 - 0.5;
                        for k in 0..n_s {
                            let val = grid.bilinear_plane(parent, plane, pu, pv, k);
                            dst[((plane * TILE + v) * TILE + u) * n_s + k] = val;
                        }
                    }
                }
            }
        });
    debug_assert_eq!(child.planes.len(), keep.len() * 3 * PLANE_TEXELS * n_s);

    // Probes: trilinear interpolation on the old probe lattice.
    for (i, pc) in child.probe_coords.clone().iter().enumerate() {
        let old = pc.map(|c| c as f64 * 0.5);
        let base = old.map(|c| c.floor() as usize);
        let frac = [0, 1, 2].map(|a| old[a] - base[a] as f64);
        let w = trilinear_weights(frac);
        let mut acc = vec![0.0; grid.probe_stride()];
        let mut wsum = 0.0;
        for (corner, wi) in w.iter().enumerate() {
            if *wi == 0.0 {
                continue;
            }
            let c = [
                base[0] + (corner & 1),
                base[1] + ((corner >> 1) & 1),
                base[2] + ((corner >> 2) & 1),
            ];
            if let Some(id) = grid.probe_at(c) {
                for (a, b) in acc.iter_mut().zip(grid.probes[id].coeffs()) {
                    *a += wi * b;
                }
                wsum += wi;
            }
        }
        if wsum > 0.0 {
            acc.iter_mut().for_each(|a| *a /= wsum);
        }
        child.probes[i].coeffs_mut().copy_from_slice(&acc);
    }

    child.resmooth();
    Ok(child)
}
