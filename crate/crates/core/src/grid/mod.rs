//! Sparse tiled SDF grid with per-tile tri-plane features and corner probes.
//!
//! Voxel values live at voxel centres: global voxel `g` sits at
//! `bbox_min + (g + 0.5) * voxel_size`. Tiles are `16³` voxels. Probes sit on
//! the tile lattice corners (`bbox_min + 16 * voxel_size * c`) and are shared
//! by every tile touching that corner.
//!
//! Plane `0` (`F_x`) is indexed by `(y, z)`, plane `1` (`F_y`) by `(x, z)` and
//! plane `2` (`F_z`) by `(x, y)`; within a plane the texel `(u, v)` is stored
//! row-major with `v` as the row.

mod init;
mod smooth;
mod subdivide;

pub use init::{init_grid, GridInit, InitMode, SphereInit};
pub use smooth::{gaussian_kernel, smooth_field, smooth_transpose};
pub use subdivide::{subdivide, DEFAULT_BAND_VOXELS};

use crate::error::{Error, Result};
use crate::sh::{trilinear_weights, ProbeSh, ShOrder};
use crate::Vec3;

pub const TILE: usize = 16;
pub const TILE_VOXELS: usize = TILE * TILE * TILE;
pub const PLANE_TEXELS: usize = TILE * TILE;
pub const DEFAULT_FAR_FIELD_VOXELS: f64 = 4.0;

const NONE: u32 = u32::MAX;

/// Axis-aligned placement of the voxel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub bbox_min: Vec3,
    pub voxel_size: f64,
    pub tiles_per_axis: [usize; 3],
}

impl GridLayout {
    /// Cubic layout covering `[min, min + extent]³` with `tiles` tiles per axis.
    pub fn cube(min: f64, extent: f64, tiles: usize) -> Self {
        GridLayout {
            bbox_min: Vec3::new(min, min, min),
            voxel_size: extent / (tiles * TILE) as f64,
            tiles_per_axis: [tiles; 3],
        }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.tiles_per_axis.map(|t| t * TILE)
    }

    pub fn bbox_max(&self) -> Vec3 {
        let r = self.resolution();
        self.bbox_min
            + Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64) * self.voxel_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub coord: [usize; 3],
    /// Pool indices of the corner probes, corner `i` at offset `(i&1, (i>>1)&1, (i>>2)&1)`.
    pub probe_ids: [u32; 8],
}

impl Tile {
    /// Voxel coordinates of the tile's first voxel (always a multiple of 16).
    pub fn origin(&self) -> [usize; 3] {
        self.coord.map(|c| c * TILE)
    }
}

/// Feature and probe dimensions of the appearance model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub n_s: usize,
    pub n_a: usize,
    pub sh_order: ShOrder,
}

/// The full trainable scene: SDF, tri-planes and probes.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub layout: GridLayout,
    pub lod: u32,
    pub dims: FeatureDims,
    pub far_field_voxels: f64,
    pub tiles: Vec<Tile>,
    /// Raw SDF `ŝ`, `TILE_VOXELS` per tile.
    pub raw_sdf: Vec<f64>,
    /// Smoothed SDF `s = G(ŝ)`.
    pub sdf: Vec<f64>,
    /// `3 * PLANE_TEXELS * n_s` per tile.
    pub planes: Vec<f64>,
    pub probes: Vec<ProbeSh>,
    pub probe_coords: Vec<[usize; 3]>,
    tile_dir: Vec<u32>,
    probe_dir: Vec<u32>,
    neighbors: Vec<[u32; 6]>,
}

#[inline]
pub fn local_index(x: usize, y: usize, z: usize) -> usize {
    (z * TILE + y) * TILE + x
}

#[inline]
pub fn local_coords(idx: usize) -> [usize; 3] {
    [idx % TILE, (idx / TILE) % TILE, idx / (TILE * TILE)]
}

impl SparseGrid {
    /// Allocates the given tiles with zero SDF, planes at `plane_init` and
    /// zero probes.
    pub fn with_tiles(
        layout: GridLayout,
        dims: FeatureDims,
        lod: u32,
        coords: &[[usize; 3]],
        plane_init: f64,
    ) -> Result<Self> {
        let t = layout.tiles_per_axis;
        if t.iter().any(|&n| n == 0) || !(layout.voxel_size > 0.0) {
            return Err(Error::Config("grid needs a positive voxel size and tile count".into()));
        }
        let mut tile_dir = vec![NONE; t[0] * t[1] * t[2]];
        let mut tiles = Vec::with_capacity(coords.len());
        for &c in coords {
            if c[0] >= t[0] || c[1] >= t[1] || c[2] >= t[2] {
                return Err(Error::Config(format!("tile {c:?} outside grid {t:?}")));
            }
            let slot = &mut tile_dir[(c[2] * t[1] + c[1]) * t[0] + c[0]];
            if *slot != NONE {
                return Err(Error::Config(format!("tile {c:?} listed twice")));
            }
            *slot = tiles.len() as u32;
            tiles.push(Tile {
                coord: c,
                probe_ids: [NONE; 8],
            });
        }

        let p = [t[0] + 1, t[1] + 1, t[2] + 1];
        let mut probe_dir = vec![NONE; p[0] * p[1] * p[2]];
        let mut probe_coords = Vec::new();
        for tile in &mut tiles {
            for (i, id) in tile.probe_ids.iter_mut().enumerate() {
                let pc = [
                    tile.coord[0] + (i & 1),
                    tile.coord[1] + ((i >> 1) & 1),
                    tile.coord[2] + ((i >> 2) & 1),
                ];
                let slot = &mut probe_dir[(pc[2] * p[1] + pc[1]) * p[0] + pc[0]];
                if *slot == NONE {
                    *slot = probe_coords.len() as u32;
                    probe_coords.push(pc);
                }
                *id = *slot;
            }
        }
        let probes = vec![ProbeSh::zeros(dims.sh_order, dims.n_a); probe_coords.len()];

        let n = tiles.len();
        let mut grid = SparseGrid {
            layout,
            lod,
            dims,
            far_field_voxels: DEFAULT_FAR_FIELD_VOXELS,
            tiles,
            raw_sdf: vec![0.0; n * TILE_VOXELS],
            sdf: vec![0.0; n * TILE_VOXELS],
            planes: vec![plane_init; n * 3 * PLANE_TEXELS * dims.n_s],
            probes,
            probe_coords,
            tile_dir,
            probe_dir,
            neighbors: Vec::new(),
        };
        grid.neighbors = grid
            .tiles
            .iter()
            .map(|tile| {
                let mut nb = [NONE; 6];
                for axis in 0..3 {
                    for (side, delta) in [(0, -1i64), (1, 1)] {
                        let mut c = tile.coord.map(|x| x as i64);
                        c[axis] += delta;
                        nb[axis * 2 + side] = grid.tile_at(c).map_or(NONE, |i| i as u32);
                    }
                }
                nb
            })
            .collect();
        Ok(grid)
    }

    /// Allocates every tile of the layout.
    pub fn dense(layout: GridLayout, dims: FeatureDims, lod: u32, plane_init: f64) -> Result<Self> {
        let t = layout.tiles_per_axis;
        let mut coords = Vec::with_capacity(t[0] * t[1] * t[2]);
        for z in 0..t[2] {
            for y in 0..t[1] {
                for x in 0..t[0] {
                    coords.push([x, y, z]);
                }
            }
        }
        Self::with_tiles(layout, dims, lod, &coords, plane_init)
    }

    pub fn voxel_size(&self) -> f64 {
        self.layout.voxel_size
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.layout.resolution()
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    /// SDF value assumed outside allocated tiles.
    pub fn far_field(&self) -> f64 {
        self.far_field_voxels * self.layout.voxel_size
    }

    pub fn plane_stride(&self) -> usize {
        3 * PLANE_TEXELS * self.dims.n_s
    }

    pub fn probe_stride(&self) -> usize {
        self.dims.sh_order.num_coeffs() * self.dims.n_a
    }

    #[inline]
    pub fn tile_at(&self, c: [i64; 3]) -> Option<usize> {
        let t = self.layout.tiles_per_axis;
        if c.iter().zip(t).any(|(&ci, ti)| ci < 0 || ci >= ti as i64) {
            return None;
        }
        let idx = self.tile_dir[((c[2] as usize) * t[1] + c[1] as usize) * t[0] + c[0] as usize];
        (idx != NONE).then_some(idx as usize)
    }

    pub fn probe_at(&self, c: [usize; 3]) -> Option<usize> {
        let t = self.layout.tiles_per_axis;
        if c[0] > t[0] || c[1] > t[1] || c[2] > t[2] {
            return None;
        }
        let idx = self.probe_dir[(c[2] * (t[1] + 1) + c[1]) * (t[0] + 1) + c[0]];
        (idx != NONE).then_some(idx as usize)
    }

    /// Storage slot of a global voxel, if its tile is allocated.
    #[inline]
    pub fn voxel_slot(&self, g: [i64; 3]) -> Option<usize> {
        let tc = g.map(|v| v.div_euclid(TILE as i64));
        let tile = self.tile_at(tc)?;
        let l = g.map(|v| v.rem_euclid(TILE as i64) as usize);
        Some(tile * TILE_VOXELS + local_index(l[0], l[1], l[2]))
    }

    /// Global voxel coordinates of a storage slot.
    #[inline]
    pub fn slot_coords(&self, slot: usize) -> [i64; 3] {
        let tile = &self.tiles[slot / TILE_VOXELS];
        let l = local_coords(slot % TILE_VOXELS);
        [0, 1, 2].map(|a| (tile.coord[a] * TILE + l[a]) as i64)
    }

    /// Slot of the face neighbour `slot + delta * e_axis` (|delta| ≤ 16).
    #[inline]
    pub fn neighbor_slot(&self, slot: usize, axis: usize, delta: i32) -> Option<usize> {
        let tile = slot / TILE_VOXELS;
        let li = slot % TILE_VOXELS;
        let mut l = local_coords(li);
        let v = l[axis] as i32 + delta;
        if (0..TILE as i32).contains(&v) {
            l[axis] = v as usize;
            return Some(tile * TILE_VOXELS + local_index(l[0], l[1], l[2]));
        }
        let side = if v < 0 { 0 } else { 1 };
        let nb = self.neighbors[tile][axis * 2 + side];
        if nb == NONE {
            return None;
        }
        l[axis] = v.rem_euclid(TILE as i32) as usize;
        Some(nb as usize * TILE_VOXELS + local_index(l[0], l[1], l[2]))
    }

    pub fn voxel_center(&self, g: [i64; 3]) -> Vec3 {
        let h = self.layout.voxel_size;
        self.layout.bbox_min
            + Vec3::new(g[0] as f64 + 0.5, g[1] as f64 + 0.5, g[2] as f64 + 0.5) * h
    }

    pub fn slot_center(&self, slot: usize) -> Vec3 {
        self.voxel_center(self.slot_coords(slot))
    }

    /// Continuous voxel coordinates: voxel centres at integers.
    #[inline]
    pub fn to_voxel_coords(&self, p: &Vec3) -> Vec3 {
        (p - self.layout.bbox_min) / self.layout.voxel_size - Vec3::new(0.5, 0.5, 0.5)
    }

    #[inline]
    pub fn sdf_value(&self, slot: Option<usize>) -> f64 {
        slot.map_or_else(|| self.far_field(), |s| self.sdf[s])
    }

    /// Tile containing the world point, if allocated.
    pub fn tile_of_point(&self, p: &Vec3) -> Option<usize> {
        let u = (p - self.layout.bbox_min) / (self.layout.voxel_size * TILE as f64);
        self.tile_at([u.x.floor() as i64, u.y.floor() as i64, u.z.floor() as i64])
    }

    /// The 8 voxel slots surrounding `p` and their trilinear weights; corner
    /// `i` at offset `(i&1, (i>>1)&1, (i>>2)&1)`.
    #[inline]
    pub fn trilinear_corners(&self, p: &Vec3) -> ([Option<usize>; 8], [f64; 8]) {
        let u = self.to_voxel_coords(p);
        let base = [u.x.floor(), u.y.floor(), u.z.floor()];
        let frac = [u.x - base[0], u.y - base[1], u.z - base[2]];
        let b = base.map(|v| v as i64);
        let slots = std::array::from_fn(|i| {
            self.voxel_slot([
                b[0] + (i & 1) as i64,
                b[1] + ((i >> 1) & 1) as i64,
                b[2] + ((i >> 2) & 1) as i64,
            ])
        });
        (slots, trilinear_weights(frac))
    }

    /// Trilinear sample of the smoothed SDF. Unallocated space reads the
    /// far-field value; `inside` reports whether `p` lies in an allocated tile.
    pub fn sample_sdf(&self, p: &Vec3) -> (f64, bool) {
        let (slots, w) = self.trilinear_corners(p);
        let s = slots
            .iter()
            .zip(w)
            .map(|(&slot, wi)| wi * self.sdf_value(slot))
            .sum();
        (s, self.tile_of_point(p).is_some())
    }

    /// Central-difference gradient of `s` at a voxel, in world units.
    #[inline]
    pub fn voxel_gradient(&self, slot: usize) -> Vec3 {
        let inv = 0.5 / self.layout.voxel_size;
        let d = |axis: usize| {
            let plus = self.sdf_value(self.neighbor_slot(slot, axis, 1));
            let minus = self.sdf_value(self.neighbor_slot(slot, axis, -1));
            (plus - minus) * inv
        };
        Vec3::new(d(0), d(1), d(2))
    }

    /// Unit normal `∇s/‖∇s‖` at a world point, from trilinearly blended
    /// voxel gradients. `None` when `‖∇s‖ < 1e-8` or outside allocated space.
    pub fn compute_normal(&self, p: &Vec3) -> Option<Vec3> {
        let (slots, w) = self.trilinear_corners(p);
        let mut g = Vec3::zeros();
        for (slot, wi) in slots.iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            g += self.voxel_gradient((*slot)?) * wi;
        }
        let n = g.norm();
        (n >= 1e-8).then(|| g / n)
    }

    #[inline]
    pub fn plane_offset(&self, tile: usize, plane: usize, u: usize, v: usize) -> usize {
        tile * self.plane_stride() + ((plane * TILE + v) * TILE + u) * self.dims.n_s
    }

    /// `F_s` at a voxel centre: the channel-wise product of the three texels.
    #[inline]
    pub fn voxel_spatial_features(&self, tile: usize, local: [usize; 3], out: &mut [f64]) {
        let [x, y, z] = local;
        let n_s = self.dims.n_s;
        let a = self.plane_offset(tile, 0, y, z);
        let b = self.plane_offset(tile, 1, x, z);
        let c = self.plane_offset(tile, 2, x, y);
        for k in 0..n_s {
            out[k] = self.planes[a + k] * self.planes[b + k] * self.planes[c + k];
        }
    }

    fn bilinear_plane(&self, tile: usize, plane: usize, u: f64, v: f64, k: usize) -> f64 {
        let max = (TILE - 1) as f64;
        let (u, v) = (u.clamp(0.0, max), v.clamp(0.0, max));
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(TILE - 1), (v0 + 1).min(TILE - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let at = |uu, vv| self.planes[self.plane_offset(tile, plane, uu, vv) + k];
        (1.0 - fv) * ((1.0 - fu) * at(u0, v0) + fu * at(u1, v0))
            + fv * ((1.0 - fu) * at(u0, v1) + fu * at(u1, v1))
    }

    /// `F_s` at a tile-local continuous position (voxel centres at integers),
    /// with each plane bilinearly interpolated and clamped to the tile.
    pub fn sample_spatial_features(&self, tile: usize, p_local: [f64; 3]) -> Vec<f64> {
        let [x, y, z] = p_local;
        (0..self.dims.n_s)
            .map(|k| {
                self.bilinear_plane(tile, 0, y, z, k)
                    * self.bilinear_plane(tile, 1, x, z, k)
                    * self.bilinear_plane(tile, 2, x, y, k)
            })
            .collect()
    }

    /// Position of a tile-local voxel inside the tile's probe cell, in `[0,1]³`.
    #[inline]
    pub fn probe_frac(local: [usize; 3]) -> [f64; 3] {
        local.map(|l| (l as f64 + 0.5) / TILE as f64)
    }

    /// Raises or lowers the order of every probe; new bands start at zero.
    pub fn set_sh_order(&mut self, order: ShOrder) {
        for p in &mut self.probes {
            p.set_order(order);
        }
        self.dims.sh_order = order;
    }

    /// Recomputes `s = G(ŝ)`.
    pub fn resmooth(&mut self) {
        let smoothed = smooth_field(self, &self.raw_sdf, self.far_field());
        self.sdf = smoothed;
    }

    /// Spatial and probe parameter counts of one tile, counting each tile's
    /// eight corner probes as its own (the duplicated-corner layout).
    pub fn params_per_tile(&self) -> (usize, usize) {
        let spatial = self.plane_stride();
        let probes = self
            .tiles
            .first()
            .map(|t| {
                t.probe_ids
                    .iter()
                    .map(|&id| self.probes[id as usize].coeffs().len())
                    .sum()
            })
            .unwrap_or(0);
        (spatial, probes)
    }

    pub fn is_finite(&self) -> bool {
        self.raw_sdf.iter().all(|v| v.is_finite())
            && self.planes.iter().all(|v| v.is_finite())
            && self.probes.iter().all(|p| p.is_finite())
    }

    /// Grid-aligned probe neighbour pairs (6-neighbourhood), each unordered
    /// pair listed once.
    pub fn probe_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, c) in self.probe_coords.iter().enumerate() {
            for axis in 0..3 {
                let mut n = *c;
                n[axis] += 1;
                if let Some(j) = self.probe_at(n) {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// Row-major 8-bit slice of the smoothed SDF at voxel layer `z`, mapping
    /// `[-range, range]` to `[0, 255]`.
    pub fn sdf_slice_image(&self, z: usize, range: f64) -> (usize, usize, Vec<u8>) {
        let r = self.resolution();
        let mut out = Vec::with_capacity(r[0] * r[1]);
        for y in 0..r[1] {
            for x in 0..r[0] {
                let s = self.sdf_value(self.voxel_slot([x as i64, y as i64, z as i64]));
                let t = ((s / range).clamp(-1.0, 1.0) + 1.0) * 0.5;
                out.push((t * 255.0).round() as u8);
            }
        }
        (r[0], r[1], out)
    }
}
