//! Triangle meshes and marching-cubes extraction of the zero level set.

mod tables;

use std::collections::HashMap;

use rayon::prelude::*;

use crate::grid::{SparseGrid, TILE_VOXELS};
use crate::Vec3;
use tables::{EDGE_TABLE, TRI_TABLE};

/// Triangles with area at or below this are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    /// Unnormalised normal (twice the area) of triangle `i`.
    pub fn triangle_normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        0.5 * self.triangle_normal(i).norm()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    /// Same surface with reversed winding.
    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    /// Indices in range and finite coordinates.
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    /// Number of boundary edges (edges used by exactly one triangle).
    pub fn boundary_edges(&self) -> usize {
        let mut count: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c == 1).count()
    }
}

const CORNERS: [[i64; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Lattice edge identifier: lower endpoint and axis.
type EdgeKey = ([i64; 3], u8);

fn edge_key(g: [i64; 3], a: usize, b: usize) -> EdgeKey {
    let (ca, cb) = (CORNERS[a], CORNERS[b]);
    let lo = [0, 1, 2].map(|k| g[k] + ca[k].min(cb[k]));
    let axis = (0..3).find(|&k| ca[k] != cb[k]).unwrap() as u8;
    (lo, axis)
}

/// Triangles of one cube as triples of `(edge key, position)`.
fn polygonise(
    g: [i64; 3],
    values: &[f64; 8],
    positions: &[Vec3; 8],
    out: &mut Vec<[(EdgeKey, Vec3); 3]>,
) {
    let mut index = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v < 0.0 {
            index |= 1 << i;
        }
    }
    let mask = EDGE_TABLE[index];
    if mask == 0 {
        return;
    }
    let mut verts: [Option<(EdgeKey, Vec3)>; 12] = [None; 12];
    for (e, &(a, b)) in EDGES.iter().enumerate() {
        if mask & (1 << e) != 0 {
            let (va, vb) = (values[a], values[b]);
            let t = va / (va - vb);
            let p = positions[a] + (positions[b] - positions[a]) * t;
            verts[e] = Some((edge_key(g, a, b), p));
        }
    }
    for tri in TRI_TABLE[index].chunks(3) {
        if tri[0] < 0 {
            break;
        }
        // Listed clockwise for the outside; reverse for outward-facing normals.
        out.push([
            verts[tri[0] as usize].unwrap(),
            verts[tri[2] as usize].unwrap(),
            verts[tri[1] as usize].unwrap(),
        ]);
    }
}

/// Welds shared edge vertices and drops degenerate triangles.
fn weld(triangles: impl IntoIterator<Item = [(EdgeKey, Vec3); 3]>) -> TriMesh {
    let mut mesh = TriMesh::default();
    let mut ids: HashMap<EdgeKey, u32> = HashMap::new();
    for tri in triangles {
        let area = 0.5 * (tri[1].1 - tri[0].1).cross(&(tri[2].1 - tri[0].1)).norm();
        if area <= MIN_TRIANGLE_AREA {
            continue;
        }
        let idx = tri.map(|(key, p)| {
            *ids.entry(key).or_insert_with(|| {
                mesh.vertices.push(p);
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(idx);
    }
    mesh
}

/// Zero level set of the smoothed SDF. Cubes span eight voxel centres and
/// are emitted only where all eight voxels are allocated.
pub fn extract_mesh(grid: &SparseGrid) -> TriMesh {
    let per_tile: Vec<Vec<[(EdgeKey, Vec3); 3]>> = (0..grid.num_tiles())
        .into_par_iter()
        .map(|tile| {
            let mut out = Vec::new();
            for li in 0..TILE_VOXELS {
                let slot = tile * TILE_VOXELS + li;
                let g = grid.slot_coords(slot);
                let mut values = [0.0; 8];
                let mut positions = [Vec3::zeros(); 8];
                let mut complete = true;
                for (c, off) in CORNERS.iter().enumerate() {
                    let gc = [g[0] + off[0], g[1] + off[1], g[2] + off[2]];
                    match grid.voxel_slot(gc) {
                        Some(s) => {
                            values[c] = grid.sdf[s];
                            positions[c] = grid.voxel_center(gc);
                        }
                        None => {
                            complete = false;
                            break;
                        }
                    }
                }
                if complete {
                    polygonise(g, &values, &positions, &mut out);
                }
            }
            out
        })
        .collect();
    weld(per_tile.into_iter().flatten())
}

/// Zero level set of `f` sampled on an `n³` lattice spanning `[min, max]`.
pub fn extract_function(f: impl Fn(&Vec3) -> f64 + Sync, min: Vec3, max: Vec3, n: usize) -> TriMesh {
    let n = n.max(2);
    let step = (max - min) / (n - 1) as f64;
    let at = |g: [i64; 3]| min + Vec3::new(g[0] as f64 * step.x, g[1] as f64 * step.y, g[2] as f64 * step.z);
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|i| f(&at([(i % n) as i64, ((i / n) % n) as i64, (i / (n * n)) as i64])))
        .collect();
    let idx = |g: [i64; 3]| (g[2] as usize * n + g[1] as usize) * n + g[0] as usize;
    let slabs: Vec<Vec<[(EdgeKey, Vec3); 3]>> = (0..n - 1)
        .into_par_iter()
        .map(|z| {
            let mut out = Vec::new();
            for y in 0..n - 1 {
                for x in 0..n - 1 {
                    let g = [x as i64, y as i64, z as i64];
                    let mut values_c = [0.0; 8];
                    let mut positions = [Vec3::zeros(); 8];
                    for (c, off) in CORNERS.iter().enumerate() {
                        let gc = [g[0] + off[0], g[1] + off[1], g[2] + off[2]];
                        values_c[c] = values[idx(gc)];
                        positions[c] = at(gc);
                    }
                    polygonise(g, &values_c, &positions, &mut out);
                }
            }
            out
        })
        .collect();
    weld(slabs.into_iter().flatten())
}
