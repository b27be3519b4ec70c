//! Colour decoder: Fresnel power embedding and a 2×32 ReLU MLP with sigmoid
//! output, plus the fused per-voxel shading pass and its reverse pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{local_coords, SparseGrid, TILE_VOXELS};
use crate::sh::{
    blend_coeffs_into, eval_coeffs_into, reflect, sh_basis_grad_into, sh_basis_into,
    trilinear_weights, ShOrder, MAX_SH_COEFFS,
};
use crate::Vec3;

pub const HIDDEN: usize = 32;
pub const FRESNEL_TERMS: usize = 6;
/// Upper bound on `n_s + n_a + 6` supported by the stack-allocated caches.
pub const MAX_INPUT: usize = 64;

const DEGENERATE_GRADIENT: f64 = 1e-8;

/// `[(1 − c)^0, …, (1 − c)^5]` with `c = clamp(n·v, 0, 1)`.
#[inline]
pub fn fresnel_powers(n_dot_v: f64) -> [f64; FRESNEL_TERMS] {
    let u = 1.0 - n_dot_v.clamp(0.0, 1.0);
    let mut p = [1.0; FRESNEL_TERMS];
    for k in 1..FRESNEL_TERMS {
        p[k] = p[k - 1] * u;
    }
    p
}

/// `d powers / d(n·v)`; zero where the clamp is active.
#[inline]
pub fn fresnel_powers_grad(n_dot_v: f64) -> [f64; FRESNEL_TERMS] {
    let mut d = [0.0; FRESNEL_TERMS];
    if !(0.0..=1.0).contains(&n_dot_v) {
        return d;
    }
    let p = fresnel_powers(n_dot_v);
    for k in 1..FRESNEL_TERMS {
        d[k] = -(k as f64) * p[k - 1];
    }
    d
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// View-time ablation switches. They never touch parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Replace `F_s` by zeros.
    pub no_spatial: bool,
    /// Truncate probe evaluation to this order.
    pub sh_order: Option<ShOrder>,
    /// Evaluate the Fresnel powers at `n·v = 1`.
    pub no_fresnel: bool,
}

/// Flat parameter layout of the decoder: `W1, b1, W2, b2, W3, b3`, weights
/// row-major with one row per output unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpLayout {
    pub input: usize,
}

impl MlpLayout {
    pub fn w1(&self) -> usize {
        0
    }
    pub fn b1(&self) -> usize {
        HIDDEN * self.input
    }
    pub fn w2(&self) -> usize {
        self.b1() + HIDDEN
    }
    pub fn b2(&self) -> usize {
        self.w2() + HIDDEN * HIDDEN
    }
    pub fn w3(&self) -> usize {
        self.b2() + HIDDEN
    }
    pub fn b3(&self) -> usize {
        self.w3() + 3 * HIDDEN
    }
    pub fn len(&self) -> usize {
        self.b3() + 3
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMlp {
    pub n_s: usize,
    pub n_a: usize,
    pub params: Vec<f64>,
    /// `num_cameras × 32`, empty when the per-camera bias is disabled.
    pub camera_bias: Vec<f64>,
}

/// Gradient buffers with the same shapes as [`DecoderMlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub params: Vec<f64>,
    pub camera_bias: Vec<f64>,
}

impl MlpGrads {
    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += b;
        }
        for (a, b) in self.camera_bias.iter_mut().zip(&other.camera_bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().for_each(|v| *v *= s);
        self.camera_bias.iter_mut().for_each(|v| *v *= s);
    }
}

/// Activations kept by the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct MlpCache {
    pub x: [f64; MAX_INPUT],
    pub z1: [f64; HIDDEN],
    pub z2: [f64; HIDDEN],
    pub rgb: [f64; 3],
}

impl Default for MlpCache {
    fn default() -> Self {
        MlpCache {
            x: [0.0; MAX_INPUT],
            z1: [0.0; HIDDEN],
            z2: [0.0; HIDDEN],
            rgb: [0.0; 3],
        }
    }
}

impl DecoderMlp {
    /// All-zero decoder (outputs mid-grey everywhere).
    pub fn zeros(n_s: usize, n_a: usize, num_cameras: Option<usize>) -> Result<Self> {
        let input = n_s + n_a + FRESNEL_TERMS;
        if input > MAX_INPUT {
            return Err(Error::Dimension(format!(
                "decoder input width {input} exceeds {MAX_INPUT}"
            )));
        }
        Ok(DecoderMlp {
            n_s,
            n_a,
            params: vec![0.0; MlpLayout { input }.len()],
            camera_bias: vec![0.0; num_cameras.unwrap_or(0) * HIDDEN],
        })
    }

    /// Glorot-uniform weights, zero biases and zero camera biases.
    pub fn new(n_s: usize, n_a: usize, num_cameras: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(n_s, n_a, num_cameras)?;
        let l = mlp.layout();
        let mut fill = |start: usize, fan_out: usize, fan_in: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut mlp.params[start..start + fan_out * fan_in] {
                *w = rng.gen_range(-limit..limit);
            }
        };
        fill(l.w1(), HIDDEN, l.input);
        fill(l.w2(), HIDDEN, HIDDEN);
        fill(l.w3(), 3, HIDDEN);
        Ok(mlp)
    }

    pub fn layout(&self) -> MlpLayout {
        MlpLayout {
            input: self.input_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_s + self.n_a + FRESNEL_TERMS
    }

    pub fn num_cameras(&self) -> usize {
        self.camera_bias.len() / HIDDEN
    }

    pub fn has_camera_bias(&self) -> bool {
        !self.camera_bias.is_empty()
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            params: vec![0.0; self.params.len()],
            camera_bias: vec![0.0; self.camera_bias.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.camera_bias).all(|v| v.is_finite())
    }

    /// Checks a camera id against the bias table. Ids are unconstrained when
    /// the bias is disabled.
    pub fn check_camera(&self, camera: Option<usize>) -> Result<()> {
        match camera {
            Some(id) if self.has_camera_bias() && id >= self.num_cameras() => {
                Err(Error::CameraOutOfRange {
                    id,
                    count: self.num_cameras(),
                })
            }
            _ => Ok(()),
        }
    }

    /// Forward pass on the concatenated input `x`. Inputs are assumed valid.
    #[inline]
    pub fn forward(&self, x: &[f64], camera: Option<usize>, cache: &mut MlpCache) -> [f64; 3] {
        let l = self.layout();
        let n = l.input;
        let p = &self.params;
        cache.x[..n].copy_from_slice(&x[..n]);
        let bias = match camera {
            Some(c) if self.has_camera_bias() => Some(&self.camera_bias[c * HIDDEN..(c + 1) * HIDDEN]),
            _ => None,
        };
        let mut h1 = [0.0; HIDDEN];
        for o in 0..HIDDEN {
            let row = &p[l.w1() + o * n..l.w1() + (o + 1) * n];
            let mut z = p[l.b1() + o];
            if let Some(b) = bias {
                z += b[o];
            }
            for (w, xi) in row.iter().zip(x) {
                z += w * xi;
            }
            cache.z1[o] = z;
            h1[o] = z.max(0.0);
        }
        let mut h2 = [0.0; HIDDEN];
        for o in 0..HIDDEN {
            let row = &p[l.w2() + o * HIDDEN..l.w2() + (o + 1) * HIDDEN];
            let mut z = p[l.b2() + o];
            for (w, hi) in row.iter().zip(&h1) {
                z += w * hi;
            }
            cache.z2[o] = z;
            h2[o] = z.max(0.0);
        }
        for c in 0..3 {
            let row = &p[l.w3() + c * HIDDEN..l.w3() + (c + 1) * HIDDEN];
            let mut z = p[l.b3() + c];
            for (w, hi) in row.iter().zip(&h2) {
                z += w * hi;
            }
            cache.rgb[c] = sigmoid(z);
        }
        cache.rgb
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and writes
    /// `∂L/∂x` into `d_x`.
    #[inline]
    pub fn backward(
        &self,
        cache: &MlpCache,
        camera: Option<usize>,
        d_rgb: [f64; 3],
        grads: &mut MlpGrads,
        d_x: &mut [f64],
    ) {
        let l = self.layout();
        let n = l.input;
        let p = &self.params;
        let g = &mut grads.params;
        let h1: [f64; HIDDEN] = cache.z1.map(|z| z.max(0.0));
        let h2: [f64; HIDDEN] = cache.z2.map(|z| z.max(0.0));

        let mut d_h2 = [0.0; HIDDEN];
        for c in 0..3 {
            let y = cache.rgb[c];
            let dz = d_rgb[c] * y * (1.0 - y);
            g[l.b3() + c] += dz;
            let base = l.w3() + c * HIDDEN;
            for i in 0..HIDDEN {
                g[base + i] += dz * h2[i];
                d_h2[i] += dz * p[base + i];
            }
        }
        let mut d_h1 = [0.0; HIDDEN];
        for o in 0..HIDDEN {
            if cache.z2[o] <= 0.0 {
                continue;
            }
            let dz = d_h2[o];
            g[l.b2() + o] += dz;
            let base = l.w2() + o * HIDDEN;
            for i in 0..HIDDEN {
                g[base + i] += dz * h1[i];
                d_h1[i] += dz * p[base + i];
            }
        }
        d_x[..n].fill(0.0);
        let bias = match camera {
            Some(c) if self.has_camera_bias() => Some(c * HIDDEN),
            _ => None,
        };
        for o in 0..HIDDEN {
            if cache.z1[o] <= 0.0 {
                continue;
            }
            let dz = d_h1[o];
            g[l.b1() + o] += dz;
            if let Some(b) = bias {
                grads.camera_bias[b + o] += dz;
            }
            let base = l.w1() + o * n;
            for i in 0..n {
                g[base + i] += dz * cache.x[i];
                d_x[i] += dz * p[base + i];
            }
        }
    }

    /// Checked decode of separate feature vectors.
    pub fn decode_color(
        &self,
        f_s: &[f64],
        f_a: &[f64],
        fresnel: &[f64; FRESNEL_TERMS],
        camera: Option<usize>,
    ) -> Result<[f64; 3]> {
        if f_s.len() != self.n_s || f_a.len() != self.n_a {
            return Err(Error::Dimension(format!(
                "decoder expects n_s = {} and n_a = {}, got {} and {}",
                self.n_s,
                self.n_a,
                f_s.len(),
                f_a.len()
            )));
        }
        self.check_camera(camera)?;
        let mut x = [0.0; MAX_INPUT];
        x[..self.n_s].copy_from_slice(f_s);
        x[self.n_s..self.n_s + self.n_a].copy_from_slice(f_a);
        x[self.n_s + self.n_a..self.input_dim()].copy_from_slice(fresnel);
        let mut cache = MlpCache::default();
        Ok(self.forward(&x[..self.input_dim()], camera, &mut cache))
    }
}

/// Intermediate values of one fused voxel decode, enough for its reverse pass.
#[derive(Debug, Clone)]
pub struct VoxelCache {
    pub slot: usize,
    pub normal: Vec3,
    pub grad_norm: f64,
    pub degenerate: bool,
    pub n_dot_v: f64,
    pub reflected: Vec3,
    pub weights: [f64; 8],
    pub basis_len: usize,
    pub basis: [f64; MAX_SH_COEFFS],
    pub blended: Vec<f64>,
    pub mlp: MlpCache,
}

impl VoxelCache {
    pub fn new(grid: &SparseGrid) -> Self {
        VoxelCache {
            slot: 0,
            normal: Vec3::zeros(),
            grad_norm: 0.0,
            degenerate: true,
            n_dot_v: 1.0,
            reflected: Vec3::zeros(),
            weights: [0.0; 8],
            basis_len: 0,
            basis: [0.0; MAX_SH_COEFFS],
            blended: vec![0.0; grid.probe_stride()],
            mlp: MlpCache::default(),
        }
    }
}

/// Shades the voxel at storage `slot` seen along unit `view_dir` (pointing
/// from the voxel toward the camera).
///
/// The normal is the normalised central-difference gradient of `s`; where it
/// vanishes the normal falls back to the view direction.
pub fn decode_fused_cached(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    slot: usize,
    view_dir: &Vec3,
    camera: Option<usize>,
    ablation: &Ablation,
    cache: &mut VoxelCache,
) -> [f64; 3] {
    let tile = slot / TILE_VOXELS;
    let local = local_coords(slot % TILE_VOXELS);
    let (n_s, n_a) = (grid.dims.n_s, grid.dims.n_a);
    let mut x = [0.0; MAX_INPUT];

    let g = grid.voxel_gradient(slot);
    let gn = g.norm();
    cache.slot = slot;
    cache.grad_norm = gn;
    cache.degenerate = !(gn >= DEGENERATE_GRADIENT);
    cache.normal = if cache.degenerate { *view_dir } else { g / gn };
    let n = cache.normal;
    cache.n_dot_v = n.dot(view_dir);
    cache.reflected = reflect(&n, view_dir);

    if !ablation.no_spatial {
        grid.voxel_spatial_features(tile, local, &mut x[..n_s]);
    }

    let order = match ablation.sh_order {
        Some(o) => o.min(grid.dims.sh_order),
        None => grid.dims.sh_order,
    };
    cache.basis_len = order.num_coeffs();
    sh_basis_into(&cache.reflected, order, &mut cache.basis);
    cache.weights = trilinear_weights(SparseGrid::probe_frac(local));
    let ids = grid.tiles[tile].probe_ids;
    let blocks: [&[f64]; 8] = std::array::from_fn(|i| grid.probes[ids[i] as usize].coeffs());
    blend_coeffs_into(&blocks, &cache.weights, &mut cache.blended);
    eval_coeffs_into(
        &cache.blended,
        n_a,
        &cache.basis[..cache.basis_len],
        &mut x[n_s..n_s + n_a],
    );

    let ndv = if ablation.no_fresnel { 1.0 } else { cache.n_dot_v };
    x[n_s + n_a..n_s + n_a + FRESNEL_TERMS].copy_from_slice(&fresnel_powers(ndv));

    mlp.forward(&x[..mlp.input_dim()], camera, &mut cache.mlp)
}

/// Fused decode of one voxel; see [`decode_fused_cached`].
pub fn decode_fused(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    slot: usize,
    view_dir: &Vec3,
    camera: Option<usize>,
    ablation: &Ablation,
) -> [f64; 3] {
    let mut cache = VoxelCache::new(grid);
    decode_fused_cached(grid, mlp, slot, view_dir, camera, ablation, &mut cache)
}

/// Gradient accumulators for the voxels of one tile.
#[derive(Debug, Clone)]
pub struct TileGrads {
    /// Plane gradients of the tile, in the tile's plane layout.
    pub planes: Vec<f64>,
    /// Gradients of the eight corner probe blocks, corner-major.
    pub corners: Vec<f64>,
    pub mlp: MlpGrads,
    /// `(slot, ∂L/∂s)` contributions through the normals.
    pub sdf: Vec<(usize, f64)>,
}

impl TileGrads {
    pub fn new(grid: &SparseGrid, mlp: &DecoderMlp) -> Self {
        TileGrads {
            planes: vec![0.0; grid.plane_stride()],
            corners: vec![0.0; 8 * grid.probe_stride()],
            mlp: mlp.zero_grads(),
            sdf: Vec::new(),
        }
    }
}

/// Reverse pass of [`decode_fused_cached`] for upstream `d_rgb`.
#[allow(clippy::too_many_arguments)]
pub fn decode_fused_backward(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    view_dir: &Vec3,
    camera: Option<usize>,
    ablation: &Ablation,
    cache: &VoxelCache,
    d_rgb: [f64; 3],
    acc: &mut TileGrads,
) {
    let slot = cache.slot;
    let tile = slot / TILE_VOXELS;
    let [x, y, z] = local_coords(slot % TILE_VOXELS);
    let (n_s, n_a) = (grid.dims.n_s, grid.dims.n_a);
    let mut d_x = [0.0; MAX_INPUT];
    mlp.backward(&cache.mlp, camera, d_rgb, &mut acc.mlp, &mut d_x);

    // Spatial features: product rule over the three planes.
    if !ablation.no_spatial {
        let base = tile * grid.plane_stride();
        let a = grid.plane_offset(tile, 0, y, z);
        let b = grid.plane_offset(tile, 1, x, z);
        let c = grid.plane_offset(tile, 2, x, y);
        for k in 0..n_s {
            let d = d_x[k];
            let (pa, pb, pc) = (grid.planes[a + k], grid.planes[b + k], grid.planes[c + k]);
            acc.planes[a - base + k] += d * pb * pc;
            acc.planes[b - base + k] += d * pa * pc;
            acc.planes[c - base + k] += d * pa * pb;
        }
    }

    // Angular features: corner probes and the reflected direction.
    let d_fa = &d_x[n_s..n_s + n_a];
    let stride = grid.probe_stride();
    let mut d_r = Vec3::zeros();
    let mut grad_basis = [[0.0; 3]; MAX_SH_COEFFS];
    let order = grid.dims.sh_order;
    sh_basis_grad_into(&cache.reflected, order, &mut grad_basis);
    for j in 0..cache.basis_len {
        let row = &cache.blended[j * n_a..(j + 1) * n_a];
        let mut dy = 0.0;
        for k in 0..n_a {
            let d = d_fa[k] * cache.basis[j];
            for (i, w) in cache.weights.iter().enumerate() {
                acc.corners[i * stride + j * n_a + k] += w * d;
            }
            dy += row[k] * d_fa[k];
        }
        d_r += Vec3::from(grad_basis[j]) * dy;
    }

    if cache.degenerate {
        return;
    }
    let n = cache.normal;
    let ndv = cache.n_dot_v;
    // r = 2(n·v)n − v
    let mut d_n = view_dir * (2.0 * d_r.dot(&n)) + d_r * (2.0 * ndv);
    if !ablation.no_fresnel {
        let dp = fresnel_powers_grad(ndv);
        let d_fres = &d_x[n_s + n_a..n_s + n_a + FRESNEL_TERMS];
        let d_ndv: f64 = dp.iter().zip(d_fres).map(|(a, b)| a * b).sum();
        d_n += view_dir * d_ndv;
    }
    let d_g = (d_n - n * n.dot(&d_n)) / cache.grad_norm;
    let inv = 0.5 / grid.voxel_size();
    for axis in 0..3 {
        if let Some(s) = grid.neighbor_slot(slot, axis, 1) {
            acc.sdf.push((s, d_g[axis] * inv));
        }
        if let Some(s) = grid.neighbor_slot(slot, axis, -1) {
            acc.sdf.push((s, -d_g[axis] * inv));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureDims, GridLayout};
    use crate::sh::{interp_probes, ProbeCorners};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(rng: &mut ChaCha8Rng, n_s: usize, n_a: usize, cams: Option<usize>) -> DecoderMlp {
        let mut mlp = DecoderMlp::new(n_s, n_a, cams, rng).unwrap();
        for v in mlp.params.iter_mut().chain(mlp.camera_bias.iter_mut()) {
            *v += rng.gen_range(-0.3..0.3);
        }
        mlp
    }

    fn random_grid(rng: &mut ChaCha8Rng, n_s: usize, n_a: usize, l: u8) -> SparseGrid {
        let dims = FeatureDims {
            n_s,
            n_a,
            sh_order: ShOrder::new(l).unwrap(),
        };
        let mut grid = SparseGrid::with_tiles(
            GridLayout::cube(-1.0, 2.0, 2),
            dims,
            0,
            &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]],
            0.5,
        )
        .unwrap();
        let c = Vec3::new(0.1, -0.05, 0.02);
        for slot in 0..grid.raw_sdf.len() {
            grid.raw_sdf[slot] = (grid.slot_center(slot) - c).norm() - 0.45 + rng.gen_range(-0.01..0.01);
        }
        grid.resmooth();
        grid.planes.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        for p in &mut grid.probes {
            p.coeffs_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        grid
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn fresnel_power_examples() {
        assert_eq!(fresnel_powers(1.0), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(fresnel_powers(0.0), [1.0; 6]);
        assert_eq!(fresnel_powers(0.5), [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]);
        assert_eq!(fresnel_powers(-0.7), [1.0; 6]);
        assert_eq!(fresnel_powers_grad(1.0), [0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_decoder_is_mid_grey() {
        let mlp = DecoderMlp::zeros(3, 2, Some(4)).unwrap();
        let rgb = mlp.decode_color(&[0.3; 3], &[0.1; 2], &fresnel_powers(0.2), Some(1)).unwrap();
        assert_eq!(rgb, [0.5; 3]);
    }

    #[test]
    fn camera_bias_controls_camera_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = random_mlp(&mut rng, 2, 2, None);
        let f = fresnel_powers(0.4);
        let a = mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, Some(0)).unwrap();
        let b = mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, Some(17)).unwrap();
        let c = mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);

        let mlp = random_mlp(&mut rng, 2, 2, Some(3));
        let a = mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, Some(0)).unwrap();
        let b = mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, Some(2)).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            mlp.decode_color(&[0.1, 0.2], &[0.3, 0.4], &f, Some(3)),
            Err(Error::CameraOutOfRange { id: 3, count: 3 })
        ));
        assert!(matches!(
            mlp.decode_color(&[0.1], &[0.3, 0.4], &f, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn glorot_init_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = DecoderMlp::new(12, 12, None, &mut rng).unwrap();
        let l = mlp.layout();
        let lim1 = (6.0 / (30.0 + 32.0) as f64).sqrt();
        assert!(mlp.params[l.w1()..l.b1()].iter().all(|w| w.abs() <= lim1));
        assert!(mlp.params[l.b1()..l.w2()].iter().all(|&b| b == 0.0));
        assert_eq!(mlp.params.len(), 32 * 30 + 32 + 32 * 32 + 32 + 3 * 32 + 3);
    }

    /// Distance of the nearest pre-activation from its ReLU kink.
    fn relu_margin(cache: &MlpCache) -> f64 {
        cache.z1.iter().chain(&cache.z2).fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    /// Loss `Σ_c a_c · rgb_c` for a fixed random direction `a`.
    fn mlp_loss(mlp: &DecoderMlp, x: &[f64], cam: Option<usize>, a: [f64; 3]) -> f64 {
        let mut cache = MlpCache::default();
        let rgb = mlp.forward(x, cam, &mut cache);
        (0..3).map(|c| a[c] * rgb[c]).sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        let mut checked = 0;
        let mut accepted = 0;
        let mut case = 0;
        while accepted < 100 {
            case += 1;
            let (n_s, n_a) = (1 + case % 4, 1 + (case / 4) % 4);
            let mut mlp = random_mlp(&mut rng, n_s, n_a, Some(2));
            let dim = mlp.input_dim();
            let mut x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cam = Some(case % 2);
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut cache = MlpCache::default();
            mlp.forward(&x, cam, &mut cache);
            if relu_margin(&cache) < 1e-2 {
                continue;
            }
            accepted += 1;
            let mut grads = mlp.zero_grads();
            let mut d_x = vec![0.0; dim];
            mlp.backward(&cache, cam, a, &mut grads, &mut d_x);

            // A handful of parameters of every block plus every input.
            for _ in 0..8 {
                let i = rng.gen_range(0..mlp.params.len());
                let orig = mlp.params[i];
                mlp.params[i] = orig + h;
                let lp = mlp_loss(&mlp, &x, cam, a);
                mlp.params[i] = orig - h;
                let lm = mlp_loss(&mlp, &x, cam, a);
                mlp.params[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel_err(fd, grads.params[i]) < 1e-5, "param {i}: {fd} vs {}", grads.params[i]);
                checked += 1;
            }
            let i = cam.unwrap() * HIDDEN + rng.gen_range(0..HIDDEN);
            let orig = mlp.camera_bias[i];
            mlp.camera_bias[i] = orig + h;
            let lp = mlp_loss(&mlp, &x, cam, a);
            mlp.camera_bias[i] = orig - h;
            let lm = mlp_loss(&mlp, &x, cam, a);
            mlp.camera_bias[i] = orig;
            assert!(rel_err((lp - lm) / (2.0 * h), grads.camera_bias[i]) < 1e-5);
            for i in 0..dim {
                let orig = x[i];
                x[i] = orig + h;
                let lp = mlp_loss(&mlp, &x, cam, a);
                x[i] = orig - h;
                let lm = mlp_loss(&mlp, &x, cam, a);
                x[i] = orig;
                assert!(rel_err((lp - lm) / (2.0 * h), d_x[i]) < 1e-5, "input {i} case {case}: {} vs {}", (lp - lm) / (2.0 * h), d_x[i]);
            }
        }
        assert_eq!(checked, 800);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mlp = random_mlp(&mut rng, 3, 3, Some(2));
        let x: Vec<f64> = (0..mlp.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cache = MlpCache::default();
        mlp.forward(&x, Some(1), &mut cache);
        let mut grads = mlp.zero_grads();
        let mut d_x = vec![1.0; mlp.input_dim()];
        mlp.backward(&cache, Some(1), [0.0; 3], &mut grads, &mut d_x);
        assert!(grads.params.iter().chain(&grads.camera_bias).chain(&d_x).all(|&g| g == 0.0));
    }

    #[test]
    fn fused_decode_equals_unfused_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let grid = random_grid(&mut rng, 3, 4, 4);
        let mlp = random_mlp(&mut rng, 3, 4, Some(5));
        let mut cache = VoxelCache::new(&grid);
        for _ in 0..10_000 {
            let slot = rng.gen_range(0..grid.sdf.len());
            let v = random_unit(&mut rng);
            let cam = Some(rng.gen_range(0..5));
            let fused = decode_fused_cached(&grid, &mlp, slot, &v, cam, &Ablation::default(), &mut cache);

            let tile = slot / TILE_VOXELS;
            let local = local_coords(slot % TILE_VOXELS);
            let g = grid.voxel_gradient(slot);
            let n = if g.norm() >= 1e-8 { g / g.norm() } else { v };
            let r = reflect(&n, &v);
            let mut f_s = vec![0.0; 3];
            grid.voxel_spatial_features(tile, local, &mut f_s);
            let ids = grid.tiles[tile].probe_ids;
            let corners = ProbeCorners::trilinear(
                std::array::from_fn(|i| &grid.probes[ids[i] as usize]),
                SparseGrid::probe_frac(local),
            );
            let f_a = interp_probes(&corners, &r).unwrap();
            let rgb = mlp.decode_color(&f_s, &f_a, &fresnel_powers(n.dot(&v)), cam).unwrap();
            assert_eq!(fused, rgb);
            assert!(fused.iter().all(|&c| c > 0.0 && c < 1.0));
        }
    }

    #[test]
    fn ablations_are_view_time_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut grid = random_grid(&mut rng, 2, 3, 3);
        let mlp = random_mlp(&mut rng, 2, 3, None);
        let before = (grid.clone(), mlp.clone());
        let v = random_unit(&mut rng);
        let slot = grid.voxel_slot([10, 12, 9]).unwrap();
        let no_spatial = Ablation {
            no_spatial: true,
            ..Default::default()
        };
        let a = decode_fused(&grid, &mlp, slot, &v, None, &no_spatial);
        // Without spatial features, plane values are irrelevant.
        grid.planes.iter_mut().for_each(|p| *p = 7.0);
        let b = decode_fused(&grid, &mlp, slot, &v, None, &no_spatial);
        assert_eq!(a, b);
        grid.planes = before.0.planes.clone();

        let no_fresnel = Ablation {
            no_fresnel: true,
            ..Default::default()
        };
        let c = decode_fused(&grid, &mlp, slot, &v, None, &no_fresnel);
        let mut cache = VoxelCache::new(&grid);
        decode_fused_cached(&grid, &mlp, slot, &v, None, &no_fresnel, &mut cache);
        assert_eq!(&cache.mlp.x[5..11], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(c.iter().all(|v| v.is_finite()));

        let l1 = Ablation {
            sh_order: Some(ShOrder::new(1).unwrap()),
            ..Default::default()
        };
        let d1 = decode_fused(&grid, &mlp, slot, &v, None, &l1);
        let d2 = decode_fused(&grid, &mlp, slot, &(-v), None, &l1);
        // Order 1 probes are isotropic; only the Fresnel input still depends on v.
        decode_fused_cached(&grid, &mlp, slot, &v, None, &l1, &mut cache);
        let fa1 = cache.mlp.x[2..5].to_vec();
        decode_fused_cached(&grid, &mlp, slot, &(-v), None, &l1, &mut cache);
        assert_eq!(fa1, cache.mlp.x[2..5].to_vec());
        assert!(d1.iter().chain(&d2).all(|v| v.is_finite()));

        assert_eq!(grid, before.0);
        assert_eq!(mlp, before.1);
    }

    /// Scalar loss of one fused decode for FD checks.
    fn fused_loss(grid: &SparseGrid, mlp: &DecoderMlp, slot: usize, v: &Vec3, cam: Option<usize>, a: [f64; 3]) -> f64 {
        let rgb = decode_fused(grid, mlp, slot, v, cam, &Ablation::default());
        (0..3).map(|c| a[c] * rgb[c]).sum()
    }

    #[test]
    fn fused_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-4;
        for case in 0..100 {
            let mut grid = random_grid(&mut rng, 2, 3, 1 + (case % 4) as u8);
            let mlp = random_mlp(&mut rng, 2, 3, Some(2));
            let cam = Some(case % 2);
            // Stay near the surface so normals are well defined.
            let slot = loop {
                let s = rng.gen_range(0..grid.sdf.len());
                if grid.sdf[s].abs() < 0.2 && grid.voxel_gradient(s).norm() > 0.5 {
                    break s;
                }
            };
            let v = random_unit(&mut rng);
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mut cache = VoxelCache::new(&grid);
            decode_fused_cached(&grid, &mlp, slot, &v, cam, &Ablation::default(), &mut cache);
            if relu_margin(&cache.mlp) < 1e-2 || cache.n_dot_v.abs() < 1e-2 {
                continue;
            }
            let mut acc = TileGrads::new(&grid, &mlp);
            decode_fused_backward(&grid, &mlp, &v, cam, &Ablation::default(), &cache, a, &mut acc);
            let tile = slot / TILE_VOXELS;

            // Planes touched by this voxel.
            let [x, y, z] = local_coords(slot % TILE_VOXELS);
            for (plane, (u, w)) in [(0, (y, z)), (1, (x, z)), (2, (x, y))] {
                let off = grid.plane_offset(tile, plane, u, w);
                let orig = grid.planes[off];
                grid.planes[off] = orig + h;
                let lp = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.planes[off] = orig - h;
                let lm = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.planes[off] = orig;
                let an = acc.planes[off - tile * grid.plane_stride()];
                assert!(rel_err((lp - lm) / (2.0 * h), an) < 1e-5);
            }

            // One coefficient of each corner probe.
            let stride = grid.probe_stride();
            for i in 0..8 {
                let id = grid.tiles[tile].probe_ids[i] as usize;
                let c = rng.gen_range(0..stride);
                let orig = grid.probes[id].coeffs()[c];
                grid.probes[id].coeffs_mut()[c] = orig + h;
                let lp = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.probes[id].coeffs_mut()[c] = orig - h;
                let lm = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.probes[id].coeffs_mut()[c] = orig;
                let an = acc.corners[i * stride + c];
                assert!(rel_err((lp - lm) / (2.0 * h), an) < 1e-5, "probe corner {i}");
            }

            // Smoothed SDF values through the normal.
            let mut d_s = std::collections::BTreeMap::new();
            for (s, g) in &acc.sdf {
                *d_s.entry(*s).or_insert(0.0) += g;
            }
            for (&s, &an) in &d_s {
                let orig = grid.sdf[s];
                // Normalisation makes the loss strongly curved in s; a smaller step
                // keeps the central-difference truncation error below tolerance.
                let hh = 1e-6;
                grid.sdf[s] = orig + hh;
                let lp = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.sdf[s] = orig - hh;
                let lm = fused_loss(&grid, &mlp, slot, &v, cam, a);
                grid.sdf[s] = orig;
                let fd = (lp - lm) / (2.0 * hh);
                assert!((fd - an).abs() < 1e-5 * fd.abs().max(an.abs()).max(1e-3), "sdf {fd} vs {an}");
            }
        }
    }

    #[test]
    fn decoder_learns_schlick_from_fresnel_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut mlp = DecoderMlp::new(0, 0, None, &mut rng).unwrap();
        let rmse = fit_schlick(&mut mlp, 0.04, 4000);
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    /// Trains the decoder with Adam on `R(θ) = R₀ + (1 − R₀)(1 − cos θ)^5`
    /// (all three channels) and returns the RMSE over a dense θ sweep.
    pub(crate) fn fit_schlick(mlp: &mut DecoderMlp, r0: f64, steps: usize) -> f64 {
        let schlick = |c: f64| r0 + (1.0 - r0) * (1.0 - c).powi(5);
        let samples: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0 * 90.0f64).to_radians().cos()).collect();
        let n = mlp.params.len();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let (b1, b2, lr) = (0.9, 0.995, 3e-3);
        let mut cache = MlpCache::default();
        let mut d_x = [0.0; MAX_INPUT];
        for t in 1..=steps {
            let mut grads = mlp.zero_grads();
            for &c in &samples {
                let x = fresnel_powers(c);
                let rgb = mlp.forward(&x, None, &mut cache);
                let target = schlick(c);
                let d = rgb.map(|y| 2.0 * (y - target) / samples.len() as f64);
                mlp.backward(&cache, None, d, &mut grads, &mut d_x);
            }
            for i in 0..n {
                let g = grads.params[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                mlp.params[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        let mut se = 0.0;
        let sweep = 181;
        for i in 0..sweep {
            let c = (i as f64 / (sweep - 1) as f64 * 90.0f64).to_radians().cos();
            let rgb = mlp.forward(&fresnel_powers(c), None, &mut cache);
            se += rgb.iter().map(|y| (y - schlick(c)).powi(2)).sum::<f64>() / 3.0;
        }
        (se / sweep as f64).sqrt()
    }
}
