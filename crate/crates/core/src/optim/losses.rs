//! Photometric loss and the grid regularisers.
//!
//! Reported values are plain sums of squares. Gradients carry the relative
//! reweighting and, for per-voxel terms, the proximity factor. Each loss can
//! reuse a frozen set of weights so the weighted objective `Σ w·term` can be
//! differentiated numerically with the weights held fixed.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{SparseGrid, PLANE_TEXELS, TILE};
use crate::imaging::{check_same_size, Image, Mask};
use crate::render::SceneGrads;
use crate::Vec3;

/// `ε` of the relative weightings.
pub const RELATIVE_EPS: f64 = 1e-3;
const DEGENERATE_GRADIENT: f64 = 1e-8;

/// `(1 + 5|s|)^{-1}`.
#[inline]
pub fn proximity_weight(s: f64) -> f64 {
    1.0 / (1.0 + 5.0 * s.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photo: f64,
    pub sdf: f64,
    pub eikonal: f64,
    pub normal: f64,
    pub features: f64,
    pub probes: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photo: 40.0,
            sdf: 0.0,
            eikonal: 0.0,
            normal: 0.0,
            features: 0.0,
            probes: 0.0,
        }
    }
}

/// Plain value, weighted value `Σ w·term`, and the weights used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub weighted: f64,
    pub weights: Vec<f64>,
}

fn pick_weights(frozen: Option<&[f64]>, len: usize, live: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    match frozen {
        Some(w) => w.to_vec(),
        None => (0..len).into_par_iter().map(live).collect(),
    }
}

/// Photometric evaluation of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoEval {
    pub value: f64,
    pub weighted: f64,
    /// Per-pixel weights: three colour channels inside the mask, opacity
    /// outside (the unused entries are zero).
    pub weights: Vec<[f64; 4]>,
    pub d_rgb: Vec<[f64; 3]>,
    pub d_alpha: Vec<f64>,
}

/// Squared colour error inside the mask and squared opacity outside it,
/// both times `scale`. Gradients are reweighted by `(max(c, c_gt) + ε)^{-1}`
/// per channel (and `(A + ε)^{-1}` for the opacity).
pub fn photo_loss(
    rgb: &Image,
    alpha: &[f64],
    gt: &Image,
    mask: &Mask,
    scale: f64,
    frozen: Option<&[[f64; 4]]>,
) -> Result<PhotoEval> {
    check_same_size(rgb.width, rgb.height, gt.width, gt.height)?;
    check_same_size(rgb.width, rgb.height, mask.width, mask.height)?;
    let n = rgb.data.len();
    let mut out = PhotoEval {
        value: 0.0,
        weighted: 0.0,
        weights: vec![[0.0; 4]; n],
        d_rgb: vec![[0.0; 3]; n],
        d_alpha: vec![0.0; n],
    };
    for p in 0..n {
        let w = match frozen {
            Some(f) => f[p],
            None if mask.data[p] => {
                let (c, g) = (rgb.data[p], gt.data[p]);
                let w = |k: usize| 1.0 / (c[k].max(g[k]) + RELATIVE_EPS);
                [w(0), w(1), w(2), 0.0]
            }
            None => [0.0, 0.0, 0.0, 1.0 / (alpha[p].max(0.0) + RELATIVE_EPS)],
        };
        out.weights[p] = w;
        if mask.data[p] {
            for k in 0..3 {
                let d = rgb.data[p][k] - gt.data[p][k];
                out.value += scale * d * d;
                out.weighted += scale * w[k] * d * d;
                out.d_rgb[p][k] = scale * 2.0 * d * w[k];
            }
        } else {
            let a = alpha[p];
            out.value += scale * a * a;
            out.weighted += scale * w[3] * a * a;
            out.d_alpha[p] = scale * 2.0 * a * w[3];
        }
    }
    Ok(out)
}

/// `Σ_voxel (s − ŝ)²`.
pub fn sdf_loss(grid: &SparseGrid, lambda: f64, frozen: Option<&[f64]>, grads: &mut SceneGrads) -> LossEval {
    let weights = pick_weights(frozen, grid.sdf.len(), |v| {
        let (s, r) = (grid.sdf[v], grid.raw_sdf[v]);
        proximity_weight(s) / (s.abs().max(r.abs()) + RELATIVE_EPS)
    });
    let mut eval = LossEval::default();
    for v in 0..grid.sdf.len() {
        let d = grid.sdf[v] - grid.raw_sdf[v];
        eval.value += d * d;
        eval.weighted += weights[v] * d * d;
        let g = lambda * 2.0 * d * weights[v];
        grads.sdf[v] += g;
        grads.raw_sdf[v] -= g;
    }
    eval.value *= lambda;
    eval.weighted *= lambda;
    eval.weights = weights;
    eval
}

/// Central-difference gradient when all six neighbours are allocated.
#[inline]
fn full_gradient(grid: &SparseGrid, v: usize) -> Option<Vec3> {
    let inv = 0.5 / grid.voxel_size();
    let mut g = Vec3::zeros();
    for a in 0..3 {
        let p = grid.neighbor_slot(v, a, 1)?;
        let m = grid.neighbor_slot(v, a, -1)?;
        g[a] = (grid.sdf[p] - grid.sdf[m]) * inv;
    }
    Some(g)
}

/// Scatters per-voxel `∂L/∂∇s` vectors back to `s` as the transpose of the
/// central difference (gather form, parallel and order-independent).
fn scatter_gradient_vectors(grid: &SparseGrid, d_grad: &[Vec3], out: &mut [f64]) {
    let inv = 0.5 / grid.voxel_size();
    out.par_iter_mut().enumerate().for_each(|(v, o)| {
        let mut acc = 0.0;
        for a in 0..3 {
            // v is the +1 neighbour of (v − e_a) and the −1 neighbour of (v + e_a).
            if let Some(m) = grid.neighbor_slot(v, a, -1) {
                acc += d_grad[m][a] * inv;
            }
            if let Some(p) = grid.neighbor_slot(v, a, 1) {
                acc -= d_grad[p][a] * inv;
            }
        }
        *o += acc;
    });
}

/// `Σ_voxel (‖∇s‖ − 1)²` over voxels whose stencil is allocated.
pub fn eikonal_loss(grid: &SparseGrid, lambda: f64, frozen: Option<&[f64]>, grads: &mut SceneGrads) -> LossEval {
    let weights = pick_weights(frozen, grid.sdf.len(), |v| proximity_weight(grid.sdf[v]));
    let per_voxel: Vec<(f64, f64, Vec3)> = (0..grid.sdf.len())
        .into_par_iter()
        .map(|v| match full_gradient(grid, v) {
            Some(g) => {
                let n = g.norm();
                let term = (n - 1.0) * (n - 1.0);
                let d = if n > 0.0 {
                    g * (lambda * weights[v] * 2.0 * (n - 1.0) / n)
                } else {
                    Vec3::zeros()
                };
                (term, weights[v] * term, d)
            }
            None => (0.0, 0.0, Vec3::zeros()),
        })
        .collect();
    let mut eval = LossEval::default();
    for (t, wt, _) in &per_voxel {
        eval.value += t;
        eval.weighted += wt;
    }
    let d_grad: Vec<Vec3> = per_voxel.into_iter().map(|(_, _, d)| d).collect();
    scatter_gradient_vectors(grid, &d_grad, &mut grads.sdf);
    eval.value *= lambda;
    eval.weighted *= lambda;
    eval.weights = weights;
    eval
}

/// `Σ_voxel Σ_axis ‖n(v + e_a) − n(v)‖²` in voxel units, over voxels whose
/// normals are defined.
pub fn normal_loss(grid: &SparseGrid, lambda: f64, frozen: Option<&[f64]>, grads: &mut SceneGrads) -> LossEval {
    let weights = pick_weights(frozen, grid.sdf.len(), |v| proximity_weight(grid.sdf[v]));
    let normals: Vec<Option<(Vec3, f64)>> = (0..grid.sdf.len())
        .into_par_iter()
        .map(|v| {
            let g = full_gradient(grid, v)?;
            let n = g.norm();
            (n >= DEGENERATE_GRADIENT).then(|| (g / n, n))
        })
        .collect();

    let terms: Vec<(f64, f64)> = (0..grid.sdf.len())
        .into_par_iter()
        .map(|v| {
            let Some((nv, _)) = normals[v] else {
                return (0.0, 0.0);
            };
            let mut t = 0.0;
            for a in 0..3 {
                if let Some(Some((nu, _))) = grid.neighbor_slot(v, a, 1).map(|u| normals[u]) {
                    t += (nu - nv).norm_squared();
                }
            }
            (t, weights[v] * t)
        })
        .collect();

    // ∂L/∂n per voxel, gathered from the forward differences it takes part in.
    let d_grad: Vec<Vec3> = (0..grid.sdf.len())
        .into_par_iter()
        .map(|v| {
            let Some((nv, norm)) = normals[v] else {
                return Vec3::zeros();
            };
            let mut dn = Vec3::zeros();
            for a in 0..3 {
                if let Some(Some((nu, _))) = grid.neighbor_slot(v, a, 1).map(|u| normals[u]) {
                    dn -= (nu - nv) * (2.0 * weights[v]);
                }
                if let Some(m) = grid.neighbor_slot(v, a, -1) {
                    if let Some((nm, _)) = normals[m] {
                        dn += (nv - nm) * (2.0 * weights[m]);
                    }
                }
            }
            dn *= lambda;
            (dn - nv * nv.dot(&dn)) / norm
        })
        .collect();
    scatter_gradient_vectors(grid, &d_grad, &mut grads.sdf);

    let mut eval = LossEval::default();
    for (t, wt) in terms {
        eval.value += t;
        eval.weighted += wt;
    }
    eval.value *= lambda;
    eval.weighted *= lambda;
    eval.weights = weights;
    eval
}

/// Squared forward differences within every 16×16 plane, per channel.
/// Weights are indexed by `2 * texel + direction` (0 along `u`, 1 along `v`).
pub fn feature_loss(grid: &SparseGrid, lambda: f64, frozen: Option<&[f64]>, grads: &mut SceneGrads) -> LossEval {
    let n_s = grid.dims.n_s;
    let stride = grid.plane_stride();
    let planes = &grid.planes;
    let step = |dir: usize| if dir == 0 { n_s } else { TILE * n_s };
    let valid = |i: usize, dir: usize| {
        let t = (i % stride) / n_s % PLANE_TEXELS;
        let (u, v) = (t % TILE, t / TILE);
        if dir == 0 {
            u + 1 < TILE
        } else {
            v + 1 < TILE
        }
    };
    let weights = pick_weights(frozen, 2 * planes.len(), |e| {
        let (i, dir) = (e / 2, e % 2);
        if !valid(i, dir) {
            return 0.0;
        }
        let (a, b) = (planes[i], planes[i + step(dir)]);
        1.0 / (a.abs().max(b.abs()) + RELATIVE_EPS)
    });

    let results: Vec<(f64, f64)> = grads
        .planes
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(tile, g)| {
            let base = tile * stride;
            let (mut value, mut weighted) = (0.0, 0.0);
            for li in 0..stride {
                let i = base + li;
                for dir in 0..2 {
                    if !valid(i, dir) {
                        continue;
                    }
                    let j = i + step(dir);
                    let d = planes[i] - planes[j];
                    let w = weights[2 * i + dir];
                    value += d * d;
                    weighted += w * d * d;
                    let gd = lambda * 2.0 * w * d;
                    g[li] += gd;
                    g[j - base] -= gd;
                }
            }
            (value, weighted)
        })
        .collect();
    let mut eval = LossEval::default();
    for (v, w) in results {
        eval.value += v;
        eval.weighted += w;
    }
    eval.value *= lambda;
    eval.weighted *= lambda;
    eval.weights = weights;
    eval
}

/// `Σ_i Σ_{k ∈ V_i} ‖b_i − b_k‖²`: each unordered neighbour pair contributes
/// twice its squared difference.
pub fn probe_loss(grid: &SparseGrid, lambda: f64, grads: &mut SceneGrads) -> LossEval {
    let stride = grid.probe_stride();
    let mut value = 0.0;
    for (i, k) in grid.probe_pairs() {
        let (bi, bk) = (grid.probes[i].coeffs(), grid.probes[k].coeffs());
        for c in 0..stride {
            let d = bi[c] - bk[c];
            value += 2.0 * d * d;
            grads.probes[i * stride + c] += lambda * 4.0 * d;
            grads.probes[k * stride + c] -= lambda * 4.0 * d;
        }
    }
    LossEval {
        value: lambda * value,
        weighted: lambda * value,
        weights: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::DecoderMlp;
    use crate::grid::{FeatureDims, GridLayout};
    use crate::sh::ShOrder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(n_s: usize) -> FeatureDims {
        FeatureDims {
            n_s,
            n_a: 2,
            sh_order: ShOrder::new(2).unwrap(),
        }
    }

    fn grid_with(tiles: usize, f: impl Fn(&Vec3) -> f64) -> SparseGrid {
        let mut g = SparseGrid::dense(GridLayout::cube(-1.0, 2.0, tiles), dims(2), 0, 0.5).unwrap();
        for v in 0..g.raw_sdf.len() {
            g.raw_sdf[v] = f(&g.slot_center(v));
        }
        g.resmooth();
        g
    }

    fn zero_grads(grid: &SparseGrid) -> SceneGrads {
        SceneGrads::zeros(grid, &DecoderMlp::zeros(grid.dims.n_s, grid.dims.n_a, None).unwrap())
    }

    #[test]
    fn proximity_examples() {
        assert_eq!(proximity_weight(0.0), 1.0);
        assert!((proximity_weight(0.2) - 0.5).abs() < 1e-15);
        assert!(proximity_weight(1e12) < 1e-11);
    }

    #[test]
    fn photo_examples() {
        let mut c = Image::new(1, 1, [0.5; 3]);
        let gt = Image::new(1, 1, [0.25; 3]);
        let mask = Mask::new(1, 1, true);
        let e = photo_loss(&c, &[1.0], &gt, &mask, 1.0, None).unwrap();
        assert!((e.d_rgb[0][0] - 2.0 * 0.25 / 0.501).abs() < 1e-12);
        assert!((e.d_rgb[0][0] - 0.998004).abs() < 1e-6);
        assert!((e.value - 3.0 * 0.0625).abs() < 1e-15);

        let c2 = Image::new(1, 1, [1.0; 3]);
        let gt2 = Image::new(1, 1, [0.5; 3]);
        let e2 = photo_loss(&c2, &[1.0], &gt2, &mask, 1.0, None).unwrap();
        let ratio = e.d_rgb[0][0] / e2.d_rgb[0][0];
        assert!((ratio - 2.0 * 1.001 / (2.0 * 0.501) * 0.5).abs() < 1e-12);
        assert!((ratio - 0.999).abs() < 1e-3);

        c.data[0] = [0.25; 3];
        let e = photo_loss(&c, &[1.0], &gt, &mask, 1.0, None).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.d_rgb[0], [0.0; 3]);

        // Outside the mask the opacity is driven to zero.
        let out = Mask::new(1, 1, false);
        let e = photo_loss(&c, &[0.5], &gt, &out, 1.0, None).unwrap();
        assert_eq!(e.value, 0.25);
        assert!((e.d_alpha[0] - 1.0 / 0.501).abs() < 1e-12);
        assert_eq!(e.d_rgb[0], [0.0; 3]);
        assert!(photo_loss(&c, &[0.5], &Image::new(2, 1, [0.0; 3]), &out, 1.0, None).is_err());
    }

    #[test]
    fn null_configurations_score_zero() {
        let mut g = grid_with(1, |p| p.z + 0.1);
        g.sdf = g.raw_sdf.clone();
        let mut gr = zero_grads(&g);
        assert!(eikonal_loss(&g, 1.0, None, &mut gr).value < 1e-20);
        assert!(normal_loss(&g, 1.0, None, &mut gr).value < 1e-20);
        assert!(gr.sdf.iter().all(|v| v.abs() < 1e-9));

        let mut c = grid_with(1, |_| 0.3);
        c.sdf = c.raw_sdf.clone();
        let mut gr = zero_grads(&c);
        let e = eikonal_loss(&c, 1.0, None, &mut gr);
        // Constant field: every interior voxel scores 1.
        assert_eq!(e.value, 14f64.powi(3));
        assert!(sdf_loss(&c, 1.0, None, &mut gr).value == 0.0);
        assert!(feature_loss(&c, 1.0, None, &mut gr).value == 0.0);
        assert!(probe_loss(&c, 1.0, &mut gr).value == 0.0);
    }

    #[test]
    fn smoothing_preserves_constants_for_sdf_loss() {
        let mut g = grid_with(1, |_| 0.0);
        let far = g.far_field();
        g.raw_sdf.iter_mut().for_each(|v| *v = far);
        g.resmooth();
        let mut gr = zero_grads(&g);
        assert!(sdf_loss(&g, 1.0, None, &mut gr).value < 1e-25);
    }

    #[test]
    fn normal_loss_tracks_curvature() {
        let mean_near = |r: f64| {
            let g = grid_with(2, |p| p.norm() - r);
            let mut gr = zero_grads(&g);
            let e = normal_loss(&g, 1.0, Some(vec![1.0; g.sdf.len()].as_slice()), &mut gr);
            assert!(e.value > 0.0);
            // Mean per near-surface voxel.
            let h = g.voxel_size();
            let mut total = 0.0;
            let mut count = 0;
            for v in 0..g.sdf.len() {
                if g.sdf[v].abs() < h {
                    let mut gg = zero_grads(&g);
                    let mut w = vec![0.0; g.sdf.len()];
                    w[v] = 1.0;
                    total += normal_loss(&g, 1.0, Some(&w), &mut gg).weighted;
                    count += 1;
                    if count >= 40 {
                        break;
                    }
                }
            }
            total / count as f64
        };
        let a = mean_near(0.3);
        let b = mean_near(0.6);
        assert!(a > b, "{a} vs {b}");
        // Analytic: |∂n| per voxel step ≈ h / r along two tangent axes.
        let h = 2.0 / 32.0;
        assert!((b / (2.0 * (h / 0.6f64).powi(2)) - 1.0).abs() < 0.6);
    }

    #[test]
    fn feature_impulse_closed_form() {
        let mut g = grid_with(1, |p| p.x);
        g.planes.iter_mut().for_each(|v| *v = 0.0);
        let i = g.plane_offset(0, 1, 5, 7) + 1;
        g.planes[i] = 1.0;
        let mut gr = zero_grads(&g);
        let e = feature_loss(&g, 1.0, None, &mut gr);
        // Four neighbouring differences of size 1.
        assert_eq!(e.value, 4.0);
        let corner = g.plane_offset(0, 2, 0, 0);
        g.planes[i] = 0.0;
        g.planes[corner] = 1.0;
        assert_eq!(feature_loss(&g, 1.0, None, &mut gr).value, 2.0);
    }

    #[test]
    fn probe_pair_counting() {
        let mut g = grid_with(2, |p| p.x);
        let delta = 0.3;
        let id = g.probe_at([1, 1, 1]).unwrap();
        g.probes[id].coeffs_mut()[2] = delta;
        let mut gr = zero_grads(&g);
        // The centre probe has six neighbours.
        let e = probe_loss(&g, 1.0, &mut gr);
        assert!((e.value - 2.0 * delta * delta * 6.0).abs() < 1e-12);
        // Brute-force double sum over the lattice.
        let mut brute = 0.0;
        for (i, ci) in g.probe_coords.iter().enumerate() {
            for (k, ck) in g.probe_coords.iter().enumerate() {
                let dist: usize = (0..3).map(|a| ci[a].abs_diff(ck[a])).sum();
                if dist == 1 {
                    brute += g.probes[i]
                        .coeffs()
                        .iter()
                        .zip(g.probes[k].coeffs())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>();
                }
            }
        }
        assert!((brute - e.value).abs() < 1e-12);
    }

    fn perturbed_grid(rng: &mut ChaCha8Rng) -> SparseGrid {
        let mut g = SparseGrid::with_tiles(
            GridLayout::cube(-1.0, 2.0, 2),
            dims(2),
            0,
            &[[0, 0, 0], [1, 0, 0]],
            0.5,
        )
        .unwrap();
        for v in 0..g.raw_sdf.len() {
            let p = g.slot_center(v);
            g.raw_sdf[v] = (p - Vec3::new(0.0, -0.5, -0.5)).norm() - 0.35 + rng.gen_range(-0.02..0.02);
        }
        g.resmooth();
        g.planes.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        for p in &mut g.probes {
            p.coeffs_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        g
    }

    type LossFn = fn(&SparseGrid, f64, Option<&[f64]>, &mut SceneGrads) -> LossEval;

    /// Checks `∂(Σ w·term)/∂ŝ` with frozen weights against central differences.
    fn check_raw_sdf(loss: LossFn, seed: u64, h: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = perturbed_grid(&mut rng);
        let mut gr = zero_grads(&g);
        let base = loss(&g, 0.7, None, &mut gr);
        let total = gr.raw_sdf_total(&g);
        let w = base.weights.clone();
        let mut checked = 0;
        for _ in 0..60 {
            let v = rng.gen_range(0..g.raw_sdf.len());
            let orig = g.raw_sdf[v];
            let eval = |x: f64, g: &mut SparseGrid| {
                g.raw_sdf[v] = x;
                g.resmooth();
                let mut scratch = zero_grads(g);
                loss(g, 0.7, Some(&w), &mut scratch).weighted
            };
            let lp = eval(orig + h, &mut g);
            let lm = eval(orig - h, &mut g);
            eval(orig, &mut g);
            let fd = (lp - lm) / (2.0 * h);
            let an = total[v];
            let scale = fd.abs().max(an.abs());
            assert!((fd - an).abs() <= 1e-5 * scale + 1e-9, "voxel {v}: fd {fd} vs {an}");
            checked += 1;
        }
        assert_eq!(checked, 60);
    }

    #[test]
    fn sdf_loss_gradient() {
        check_raw_sdf(sdf_loss, 31, 1e-5);
    }

    #[test]
    fn eikonal_loss_gradient() {
        check_raw_sdf(eikonal_loss, 32, 1e-5);
    }

    #[test]
    fn normal_loss_gradient() {
        check_raw_sdf(normal_loss, 33, 1e-5);
    }

    #[test]
    fn feature_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut g = perturbed_grid(&mut rng);
        let mut gr = zero_grads(&g);
        let base = feature_loss(&g, 0.3, None, &mut gr);
        let h = 1e-5;
        for _ in 0..200 {
            let i = rng.gen_range(0..g.planes.len());
            let orig = g.planes[i];
            let mut scratch = zero_grads(&g);
            g.planes[i] = orig + h;
            let lp = feature_loss(&g, 0.3, Some(&base.weights), &mut scratch).weighted;
            g.planes[i] = orig - h;
            let lm = feature_loss(&g, 0.3, Some(&base.weights), &mut scratch).weighted;
            g.planes[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gr.planes[i]).abs() < 1e-5 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn probe_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut g = perturbed_grid(&mut rng);
        let mut gr = zero_grads(&g);
        probe_loss(&g, 0.4, &mut gr);
        let stride = g.probe_stride();
        let h = 1e-5;
        for id in 0..g.probes.len() {
            let c = rng.gen_range(0..stride);
            let orig = g.probes[id].coeffs()[c];
            let mut scratch = zero_grads(&g);
            g.probes[id].coeffs_mut()[c] = orig + h;
            let lp = probe_loss(&g, 0.4, &mut scratch).value;
            g.probes[id].coeffs_mut()[c] = orig - h;
            let lm = probe_loss(&g, 0.4, &mut scratch).value;
            g.probes[id].coeffs_mut()[c] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = gr.probes[id * stride + c];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn photo_gradient_with_frozen_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (w, h) = (5, 4);
        let mut rgb = Image::new(w, h, [0.0; 3]);
        let mut gt = Image::new(w, h, [0.0; 3]);
        for p in 0..w * h {
            rgb.data[p] = [rng.gen(), rng.gen(), rng.gen()];
            gt.data[p] = [rng.gen(), rng.gen(), rng.gen()];
        }
        let mut alpha: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let mask = Mask {
            width: w,
            height: h,
            data: (0..w * h).map(|i| i % 3 != 0).collect(),
        };
        let base = photo_loss(&rgb, &alpha, &gt, &mask, 10.0, None).unwrap();
        let eps = 1e-6;
        for p in 0..w * h {
            for k in 0..3 {
                let orig = rgb.data[p][k];
                rgb.data[p][k] = orig + eps;
                let lp = photo_loss(&rgb, &alpha, &gt, &mask, 10.0, Some(&base.weights)).unwrap().weighted;
                rgb.data[p][k] = orig - eps;
                let lm = photo_loss(&rgb, &alpha, &gt, &mask, 10.0, Some(&base.weights)).unwrap().weighted;
                rgb.data[p][k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - base.d_rgb[p][k]).abs() < 1e-6 * fd.abs().max(1.0));
            }
            let orig = alpha[p];
            alpha[p] = orig + eps;
            let lp = photo_loss(&rgb, &alpha, &gt, &mask, 10.0, Some(&base.weights)).unwrap().weighted;
            alpha[p] = orig - eps;
            let lm = photo_loss(&rgb, &alpha, &gt, &mask, 10.0, Some(&base.weights)).unwrap().weighted;
            alpha[p] = orig;
            assert!(((lp - lm) / (2.0 * eps) - base.d_alpha[p]).abs() < 1e-5);
        }
    }
}
