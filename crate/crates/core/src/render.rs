//! Differentiable volume rendering of the sparse SDF grid.
//!
//! Rays are sampled at a fixed spacing of one voxel, skipping unallocated
//! tiles. Consecutive samples `(s_i, s_{i+1})` give an opacity through the
//! logistic CDF of sharpness `τ`, and colours are composited front to back.
//! Voxel colours are decoded once per image (with the view direction from the
//! voxel to the camera centre) and trilinearly blended at each sample.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::appearance::{
    decode_fused_backward, decode_fused_cached, Ablation, DecoderMlp, MlpGrads, TileGrads,
    VoxelCache,
};
use crate::camera::{Camera, Ray};
use crate::error::Result;
use crate::grid::{smooth_transpose, SparseGrid, TILE, TILE_VOXELS};
use crate::imaging::Image;
use crate::Vec3;

pub const DEFAULT_MAX_SAMPLES: usize = 512;
pub const DEFAULT_EARLY_STOP: f64 = 1e-4;
pub const DEFAULT_MIN_COLOR_WEIGHT: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Sharpness `τ` of the logistic CDF, in inverse scene units.
    pub tau: f64,
    pub background: [f64; 3],
    pub ablation: Ablation,
    pub max_samples: usize,
    /// Rays stop once the transmittance falls below this value.
    pub early_stop: f64,
    /// Samples with compositing weight at or below this skip colour decoding
    /// and contribute only opacity.
    pub min_color_weight: f64,
}

impl RenderOptions {
    pub fn new(tau: f64) -> Self {
        RenderOptions {
            tau,
            background: [0.0; 3],
            ablation: Ablation::default(),
            max_samples: DEFAULT_MAX_SAMPLES,
            early_stop: DEFAULT_EARLY_STOP,
            min_color_weight: DEFAULT_MIN_COLOR_WEIGHT,
        }
    }

    /// Settings without any truncation, used for gradient checks.
    pub fn exact(tau: f64) -> Self {
        RenderOptions {
            early_stop: 0.0,
            min_color_weight: -1.0,
            ..Self::new(tau)
        }
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `Φ_τ(x) = 1 / (1 + e^{−τx})`.
pub fn phi(tau: f64, x: f64) -> f64 {
    sigmoid(tau * x)
}

/// `α = max((Φ_τ(s_i) − Φ_τ(s_{i+1})) / Φ_τ(s_i), 0)`, evaluated in log space.
#[inline]
pub fn alpha_from_sdf(s_i: f64, s_next: f64, tau: f64) -> f64 {
    let ratio = (log_sigmoid(tau * s_next) - log_sigmoid(tau * s_i)).exp();
    (1.0 - ratio).max(0.0)
}

/// `α` with its partial derivatives `(∂α/∂s_i, ∂α/∂s_{i+1})`.
#[inline]
pub fn alpha_with_grad(s_i: f64, s_next: f64, tau: f64) -> (f64, f64, f64) {
    let ratio = (log_sigmoid(tau * s_next) - log_sigmoid(tau * s_i)).exp();
    if ratio >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    // Φ' = τ Φ (1 − Φ) and 1 − Φ(x) = Φ(−x).
    let d_i = ratio * tau * sigmoid(-tau * s_i);
    let d_next = -ratio * tau * sigmoid(-tau * s_next);
    (1.0 - ratio, d_i, d_next)
}

/// Front-to-back compositing of `(α_i, C_i)`; returns the colour and the
/// accumulated opacity `A = Σ T_i α_i`.
pub fn composite(samples: &[(f64, [f64; 3])]) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut acc = 0.0;
    for (alpha, c) in samples {
        let w = t * alpha;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        acc += w;
        t *= 1.0 - alpha;
    }
    (rgb, acc)
}

/// Parametric entry and exit of a ray through an axis-aligned box, clipped
/// to `t ≥ 0`.
pub fn ray_box(ray: &Ray, min: &Vec3, max: &Vec3) -> Option<(f64, f64)> {
    let mut t0: f64 = 0.0;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let d = ray.dir[a];
        if d == 0.0 {
            if ray.origin[a] < min[a] || ray.origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((min[a] - ray.origin[a]) * inv, (max[a] - ray.origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// A sample on the ray lattice `t_k = t_entry + (k + ½) h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub index: usize,
    pub t: f64,
    pub pos: Vec3,
}

/// Fixed-step sampler over allocated tiles.
struct Marcher<'a> {
    grid: &'a SparseGrid,
    ray: Ray,
    t_entry: f64,
    t_exit: f64,
    step: f64,
    k: usize,
    emitted: usize,
    max: usize,
}

impl<'a> Marcher<'a> {
    fn new(grid: &'a SparseGrid, ray: &Ray, max: usize) -> Option<Self> {
        let (t_entry, t_exit) = ray_box(ray, &grid.layout.bbox_min, &grid.layout.bbox_max())?;
        Some(Marcher {
            grid,
            ray: *ray,
            t_entry,
            t_exit,
            step: grid.voxel_size(),
            k: 0,
            emitted: 0,
            max,
        })
    }

    /// Exit distance of the tile-sized cell containing `p`.
    fn cell_exit(&self, cell: [i64; 3]) -> f64 {
        let size = self.step * TILE as f64;
        let mut t = f64::INFINITY;
        for a in 0..3 {
            let d = self.ray.dir[a];
            if d == 0.0 {
                continue;
            }
            let lo = self.grid.layout.bbox_min[a] + cell[a] as f64 * size;
            let bound = if d > 0.0 { lo + size } else { lo };
            t = t.min((bound - self.ray.origin[a]) / d);
        }
        t
    }
}

impl Iterator for Marcher<'_> {
    type Item = RaySample;

    fn next(&mut self) -> Option<RaySample> {
        let size = self.step * TILE as f64;
        while self.emitted < self.max {
            let t = self.t_entry + (self.k as f64 + 0.5) * self.step;
            if t > self.t_exit {
                return None;
            }
            let pos = self.ray.origin + self.ray.dir * t;
            let u = (pos - self.grid.layout.bbox_min) / size;
            let cell = [u.x.floor() as i64, u.y.floor() as i64, u.z.floor() as i64];
            if self.grid.tile_at(cell).is_some() {
                let s = RaySample {
                    index: self.k,
                    t,
                    pos,
                };
                self.k += 1;
                self.emitted += 1;
                return Some(s);
            }
            let exit = self.cell_exit(cell);
            let next = ((exit - self.t_entry) / self.step - 0.5).ceil();
            self.k = if next.is_finite() && next > self.k as f64 {
                next as usize
            } else {
                self.k + 1
            };
        }
        None
    }
}

/// Sample positions of a ray: at most `max_samples`, one voxel apart,
/// restricted to allocated tiles.
pub fn march_ray(grid: &SparseGrid, ray: &Ray, max_samples: usize) -> Vec<RaySample> {
    Marcher::new(grid, ray, max_samples).map_or_else(Vec::new, |m| m.collect())
}

/// A sample with its SDF stencil.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    index: usize,
    slots: [Option<usize>; 8],
    weights: [f64; 8],
    s: f64,
}

impl Stencil {
    fn at(grid: &SparseGrid, sample: &RaySample) -> Self {
        let (slots, weights) = grid.trilinear_corners(&sample.pos);
        let s = slots
            .iter()
            .zip(weights)
            .map(|(&slot, w)| w * grid.sdf_value(slot))
            .sum();
        Stencil {
            index: sample.index,
            slots,
            weights,
            s,
        }
    }
}

/// One compositing interval `[x_i, x_{i+1}]`.
#[derive(Debug, Clone, Copy)]
struct Interval {
    start: Stencil,
    end: Stencil,
    alpha: f64,
    d_start: f64,
    d_end: f64,
    transmittance: f64,
}

/// Walks a ray and calls `f` for every interval until the transmittance
/// drops below the early-stop threshold.
fn walk_ray(grid: &SparseGrid, ray: &Ray, opts: &RenderOptions, mut f: impl FnMut(&Interval)) {
    let Some(marcher) = Marcher::new(grid, ray, opts.max_samples) else {
        return;
    };
    let mut prev: Option<Stencil> = None;
    let mut t = 1.0;
    for sample in marcher {
        let cur = Stencil::at(grid, &sample);
        if let Some(p) = prev {
            if cur.index == p.index + 1 {
                let (alpha, d_start, d_end) = alpha_with_grad(p.s, cur.s, opts.tau);
                f(&Interval {
                    start: p,
                    end: cur,
                    alpha,
                    d_start,
                    d_end,
                    transmittance: t,
                });
                t *= 1.0 - alpha;
                if t < opts.early_stop {
                    return;
                }
            }
        }
        prev = Some(cur);
    }
}

/// Blended colour of the voxels around a sample, renormalised over the
/// allocated corners.
#[inline]
fn sample_color(stencil: &Stencil, colors: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    let mut wsum = 0.0;
    for (slot, w) in stencil.slots.iter().zip(stencil.weights) {
        if let Some(s) = slot {
            let v = colors[*s];
            for k in 0..3 {
                c[k] += w * v[k];
            }
            wsum += w;
        }
    }
    if wsum > 0.0 {
        c.map(|v| v / wsum)
    } else {
        c
    }
}

/// Unit direction from a voxel centre toward the camera centre.
#[inline]
pub fn view_dir(grid: &SparseGrid, slot: usize, eye: &Vec3) -> Vec3 {
    let d = eye - grid.slot_center(slot);
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vec3::z()
    }
}

/// Per-voxel colours decoded for one image.
#[derive(Debug, Clone, Default)]
pub struct ShadeCache {
    /// Decoded slots, ascending.
    pub slots: Vec<usize>,
    /// Dense colour table indexed by slot; undecoded slots are zero.
    pub colors: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderStats {
    pub shading: Duration,
    pub compositing: Duration,
    pub shaded_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Image,
    /// Accumulated opacity per pixel, row-major.
    pub alpha: Vec<f64>,
    pub cache: ShadeCache,
    pub stats: RenderStats,
}

/// Renders one image. `camera_index` selects the per-camera decoder bias.
pub fn render_image(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    camera: &Camera,
    camera_index: Option<usize>,
    opts: &RenderOptions,
) -> Result<Rendered> {
    mlp.check_camera(camera_index)?;
    let (w, h) = (camera.width, camera.height);

    // Pass 1: which voxels need a colour.
    let start = Instant::now();
    let mut needed: Vec<usize> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let mut out = Vec::new();
            for x in 0..w {
                walk_ray(grid, &camera.pixel_ray(x, y), opts, |iv| {
                    if iv.transmittance * iv.alpha > opts.min_color_weight {
                        out.extend(iv.start.slots.iter().flatten());
                    }
                });
            }
            out
        })
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let marching = start.elapsed();

    // Pass 2: decode those voxels.
    let start = Instant::now();
    let decoded: Vec<[f64; 3]> = needed
        .par_iter()
        .map_init(
            || VoxelCache::new(grid),
            |cache, &slot| {
                let v = view_dir(grid, slot, &camera.center);
                decode_fused_cached(grid, mlp, slot, &v, camera_index, &opts.ablation, cache)
            },
        )
        .collect();
    let mut colors = vec![[0.0; 3]; grid.sdf.len()];
    for (&slot, c) in needed.iter().zip(&decoded) {
        colors[slot] = *c;
    }
    let shading = start.elapsed();

    // Pass 3: composite.
    let start = Instant::now();
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut rgb = [0.0; 3];
                    let mut acc = 0.0;
                    walk_ray(grid, &camera.pixel_ray(x, y), opts, |iv| {
                        let wt = iv.transmittance * iv.alpha;
                        if wt > opts.min_color_weight {
                            let c = sample_color(&iv.start, &colors);
                            for k in 0..3 {
                                rgb[k] += wt * c[k];
                            }
                        }
                        acc += wt;
                    });
                    for k in 0..3 {
                        rgb[k] += (1.0 - acc) * opts.background[k];
                    }
                    (rgb, acc)
                })
                .collect()
        })
        .collect();
    let mut image = Image::new(w, h, [0.0; 3]);
    let mut alpha = vec![0.0; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (rgb, a)) in row.into_iter().enumerate() {
            image.data[y * w + x] = rgb;
            alpha[y * w + x] = a;
        }
    }
    let compositing = marching + start.elapsed();

    Ok(Rendered {
        image,
        alpha,
        stats: RenderStats {
            shading,
            compositing,
            shaded_voxels: needed.len(),
        },
        cache: ShadeCache {
            slots: needed,
            colors,
        },
    })
}

/// Gradients of a scalar loss with respect to every scene parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    /// Gradient with respect to the smoothed field `s`.
    pub sdf: Vec<f64>,
    /// Direct gradient with respect to the raw field `ŝ`.
    pub raw_sdf: Vec<f64>,
    pub planes: Vec<f64>,
    /// Probe pool gradients, `probe_stride` values per probe.
    pub probes: Vec<f64>,
    pub mlp: MlpGrads,
}

impl SceneGrads {
    pub fn zeros(grid: &SparseGrid, mlp: &DecoderMlp) -> Self {
        SceneGrads {
            sdf: vec![0.0; grid.sdf.len()],
            raw_sdf: vec![0.0; grid.sdf.len()],
            planes: vec![0.0; grid.planes.len()],
            probes: vec![0.0; grid.probes.len() * grid.probe_stride()],
            mlp: mlp.zero_grads(),
        }
    }

    pub fn add(&mut self, other: &SceneGrads) {
        for (a, b) in self.sdf.iter_mut().zip(&other.sdf) {
            *a += b;
        }
        for (a, b) in self.raw_sdf.iter_mut().zip(&other.raw_sdf) {
            *a += b;
        }
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            *a += b;
        }
        for (a, b) in self.probes.iter_mut().zip(&other.probes) {
            *a += b;
        }
        self.mlp.add(&other.mlp);
    }

    pub fn scale(&mut self, s: f64) {
        self.sdf.iter_mut().for_each(|v| *v *= s);
        self.raw_sdf.iter_mut().for_each(|v| *v *= s);
        self.planes.iter_mut().for_each(|v| *v *= s);
        self.probes.iter_mut().for_each(|v| *v *= s);
        self.mlp.scale(s);
    }

    /// Total gradient with respect to `ŝ`: the direct part plus `Gᵀ` applied
    /// to the gradient with respect to `s`.
    pub fn raw_sdf_total(&self, grid: &SparseGrid) -> Vec<f64> {
        let mut out = smooth_transpose(grid, &self.sdf);
        for (a, b) in out.iter_mut().zip(&self.raw_sdf) {
            *a += b;
        }
        out
    }
}

/// Reverse pass of [`render_image`] for upstream pixel gradients `d_rgb`
/// (of the background-composited colour) and `d_alpha`. Gradients are
/// accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    camera: &Camera,
    camera_index: Option<usize>,
    opts: &RenderOptions,
    rendered: &Rendered,
    d_rgb: &[[f64; 3]],
    d_alpha: &[f64],
    grads: &mut SceneGrads,
) {
    let (w, h) = (camera.width, camera.height);
    let colors = &rendered.cache.colors;
    let bg = opts.background;

    type RowGrads = (Vec<(usize, f64)>, Vec<(usize, [f64; 3])>);
    let rows: Vec<RowGrads> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut d_s = Vec::new();
            let mut d_c = Vec::new();
            let mut ivs: Vec<(Interval, [f64; 3], bool)> = Vec::new();
            for x in 0..w {
                let p = y * w + x;
                let g = d_rgb[p];
                // The background term (1 − A)·bg folds into the opacity gradient.
                let g_a = d_alpha[p] - (g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2]);
                if g == [0.0; 3] && g_a == 0.0 {
                    continue;
                }
                ivs.clear();
                walk_ray(grid, &camera.pixel_ray(x, y), opts, |iv| {
                    let shaded = iv.transmittance * iv.alpha > opts.min_color_weight;
                    let c = if shaded {
                        sample_color(&iv.start, colors)
                    } else {
                        [0.0; 3]
                    };
                    ivs.push((*iv, c, shaded));
                });
                let mut tail = 0.0;
                for (iv, c, shaded) in ivs.iter().rev() {
                    let q = g[0] * c[0] + g[1] * c[1] + g[2] * c[2] + g_a;
                    let d_alpha_i = iv.transmittance * (q - tail);
                    tail = iv.alpha * q + (1.0 - iv.alpha) * tail;

                    let wt = iv.transmittance * iv.alpha;
                    if *shaded && wt != 0.0 {
                        let wsum: f64 = iv
                            .start
                            .slots
                            .iter()
                            .zip(iv.start.weights)
                            .filter(|(s, _)| s.is_some())
                            .map(|(_, w)| w)
                            .sum();
                        for (slot, cw) in iv.start.slots.iter().zip(iv.start.weights) {
                            if let Some(s) = slot {
                                let f = wt * cw / wsum;
                                d_c.push((*s, [f * g[0], f * g[1], f * g[2]]));
                            }
                        }
                    }
                    if d_alpha_i != 0.0 {
                        for (st, d) in [(&iv.start, iv.d_start), (&iv.end, iv.d_end)] {
                            let ds = d_alpha_i * d;
                            if ds == 0.0 {
                                continue;
                            }
                            for (slot, sw) in st.slots.iter().zip(st.weights) {
                                if let Some(s) = slot {
                                    d_s.push((*s, ds * sw));
                                }
                            }
                        }
                    }
                }
            }
            (d_s, d_c)
        })
        .collect();

    let mut d_color = vec![[0.0; 3]; grid.sdf.len()];
    for (d_s, d_c) in &rows {
        for &(s, g) in d_s {
            grads.sdf[s] += g;
        }
        for &(s, g) in d_c {
            for k in 0..3 {
                d_color[s][k] += g[k];
            }
        }
    }
    drop(rows);

    // Decoder reverse pass, one task per tile.
    let slots = &rendered.cache.slots;
    let mut groups: Vec<&[usize]> = Vec::new();
    let mut begin = 0;
    for i in 1..=slots.len() {
        if i == slots.len() || slots[i] / TILE_VOXELS != slots[begin] / TILE_VOXELS {
            if i > begin {
                groups.push(&slots[begin..i]);
            }
            begin = i;
        }
    }
    let tile_grads: Vec<(usize, TileGrads)> = groups
        .par_iter()
        .filter_map(|group| {
            let mut acc: Option<TileGrads> = None;
            let mut cache = VoxelCache::new(grid);
            for &slot in group.iter() {
                let d = d_color[slot];
                if d == [0.0; 3] {
                    continue;
                }
                let acc = acc.get_or_insert_with(|| TileGrads::new(grid, mlp));
                let v = view_dir(grid, slot, &camera.center);
                decode_fused_cached(grid, mlp, slot, &v, camera_index, &opts.ablation, &mut cache);
                decode_fused_backward(grid, mlp, &v, camera_index, &opts.ablation, &cache, d, acc);
            }
            acc.map(|a| (group[0] / TILE_VOXELS, a))
        })
        .collect();

    let plane_stride = grid.plane_stride();
    let probe_stride = grid.probe_stride();
    for (tile, acc) in &tile_grads {
        let dst = &mut grads.planes[tile * plane_stride..(tile + 1) * plane_stride];
        for (a, b) in dst.iter_mut().zip(&acc.planes) {
            *a += b;
        }
        for (i, &id) in grid.tiles[*tile].probe_ids.iter().enumerate() {
            let dst = &mut grads.probes[id as usize * probe_stride..(id as usize + 1) * probe_stride];
            for (a, b) in dst.iter_mut().zip(&acc.corners[i * probe_stride..(i + 1) * probe_stride]) {
                *a += b;
            }
        }
        grads.mlp.add(&acc.mlp);
        for &(s, g) in &acc.sdf {
            grads.sdf[s] += g;
        }
    }
}
