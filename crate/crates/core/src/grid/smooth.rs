//! Separable 5³ Gaussian smoothing over the sparse voxel set.

use rayon::prelude::*;

use super::{SparseGrid, TILE_VOXELS};

const SIGMA: f64 = 1.0;

/// Normalised 5-tap Gaussian (σ = 1 voxel), taps at offsets −2..=2.
pub fn gaussian_kernel() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *w = (-0.5 * x * x / (SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|w| w / sum)
}

/// One 1D pass along `axis`; voxels outside allocated tiles read `fill`.
fn convolve_axis(grid: &SparseGrid, input: &[f64], axis: usize, fill: f64) -> Vec<f64> {
    let kernel = gaussian_kernel();
    let mut out = vec![0.0; input.len()];
    out.par_chunks_mut(TILE_VOXELS)
        .enumerate()
        .for_each(|(tile, chunk)| {
            for (li, o) in chunk.iter_mut().enumerate() {
                let slot = tile * TILE_VOXELS + li;
                let mut acc = 0.0;
                for (t, w) in kernel.iter().enumerate() {
                    let delta = t as i32 - 2;
                    let v = if delta == 0 {
                        input[slot]
                    } else {
                        grid.neighbor_slot(slot, axis, delta)
                            .map_or(fill, |s| input[s])
                    };
                    acc += w * v;
                }
                *o = acc;
            }
        });
    out
}

/// `G(field)` with missing neighbours clamped to `fill`.
pub fn smooth_field(grid: &SparseGrid, field: &[f64], fill: f64) -> Vec<f64> {
    let a = convolve_axis(grid, field, 0, fill);
    let b = convolve_axis(grid, &a, 1, fill);
    convolve_axis(grid, &b, 2, fill)
}

/// Transpose of the linear part of [`smooth_field`]: maps `∂L/∂s` to `∂L/∂ŝ`.
pub fn smooth_transpose(grid: &SparseGrid, grad: &[f64]) -> Vec<f64> {
    let a = convolve_axis(grid, grad, 2, 0.0);
    let b = convolve_axis(grid, &a, 1, 0.0);
    convolve_axis(grid, &b, 0, 0.0)
}
