//! Real spherical harmonics and light-field probes.
//!
//! Orders are one-indexed: order `l` carries `l²` coefficients (bands
//! `0..l`). Coefficients are stored band-major with `m` ascending, and each
//! coefficient is a feature vector of `n_a` channels, so a probe block is laid
//! out as `coeffs[j * n_a + k]`.
//!
//! The basis is the orthonormal real basis without the Condon–Shortley phase.

use crate::error::{Error, Result};
use crate::Vec3;

/// Largest supported order (16 coefficients).
pub const MAX_SH_ORDER: u8 = 4;
/// Maximum number of basis functions.
pub const MAX_SH_COEFFS: usize = 16;

const UNIT_TOLERANCE: f64 = 1e-6;

/// One-indexed spherical-harmonic order in `1..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShOrder(u8);

impl ShOrder {
    pub fn new(l: u8) -> Result<Self> {
        if (1..=MAX_SH_ORDER).contains(&l) {
            Ok(ShOrder(l))
        } else {
            Err(Error::Contract(format!(
                "spherical harmonic order {l} outside 1..={MAX_SH_ORDER}"
            )))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    /// Number of basis functions, `l²`.
    pub const fn num_coeffs(self) -> usize {
        (self.0 as usize) * (self.0 as usize)
    }
}

impl Default for ShOrder {
    fn default() -> Self {
        ShOrder(MAX_SH_ORDER)
    }
}

/// Writes `Y_1..Y_{l²}` for a unit direction into `out[..l²]`.
///
/// The direction is not validated; see [`eval_sh_basis`] for the checked form.
#[inline]
pub fn sh_basis_into(dir: &Vec3, order: ShOrder, out: &mut [f64]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let n = order.num_coeffs();
    debug_assert!(out.len() >= n);

    out[0] = 0.282_094_791_773_878_14;
    if n == 1 {
        return;
    }
    let c1 = 0.488_602_511_902_919_9;
    out[1] = c1 * y;
    out[2] = c1 * z;
    out[3] = c1 * x;
    if n == 4 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = 1.092_548_430_592_079_2 * x * y;
    out[5] = 1.092_548_430_592_079_2 * y * z;
    out[6] = 0.315_391_565_252_520_05 * (3.0 * zz - 1.0);
    out[7] = 1.092_548_430_592_079_2 * x * z;
    out[8] = 0.546_274_215_296_039_6 * (xx - yy);
    if n == 9 {
        return;
    }
    out[9] = 0.590_043_589_926_643_5 * y * (3.0 * xx - yy);
    out[10] = 2.890_611_442_640_554 * x * y * z;
    out[11] = 0.457_045_799_464_465_8 * y * (5.0 * zz - 1.0);
    out[12] = 0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0);
    out[13] = 0.457_045_799_464_465_8 * x * (5.0 * zz - 1.0);
    out[14] = 1.445_305_721_320_277 * z * (xx - yy);
    out[15] = 0.590_043_589_926_643_5 * x * (xx - 3.0 * yy);
}

fn check_unit(dir: &Vec3) -> Result<()> {
    let norm = dir.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!(
            "direction must be unit length, got |d| = {norm}"
        )));
    }
    Ok(())
}

/// Evaluates the real SH basis for a unit direction.
pub fn eval_sh_basis(dir: &Vec3, order: ShOrder) -> Result<Vec<f64>> {
    check_unit(dir)?;
    let mut out = vec![0.0; order.num_coeffs()];
    sh_basis_into(dir, order, &mut out);
    Ok(out)
}

/// Coefficient block `b_j ∈ R^{n_a}` of a single light-field probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSh {
    order: ShOrder,
    channels: usize,
    coeffs: Vec<f64>,
}

impl ProbeSh {
    pub fn zeros(order: ShOrder, channels: usize) -> Self {
        ProbeSh {
            order,
            channels,
            coeffs: vec![0.0; order.num_coeffs() * channels],
        }
    }

    pub fn from_coeffs(order: ShOrder, channels: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != order.num_coeffs() * channels {
            return Err(Error::Dimension(format!(
                "probe expects {} coefficients for order {} with {} channels, got {}",
                order.num_coeffs() * channels,
                order.get(),
                channels,
                coeffs.len()
            )));
        }
        Ok(ProbeSh {
            order,
            channels,
            coeffs,
        })
    }

    pub fn order(&self) -> ShOrder {
        self.order
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    /// Coefficient `b_j[k]`.
    pub fn coeff(&self, j: usize, k: usize) -> f64 {
        self.coeffs[j * self.channels + k]
    }

    /// Raises or lowers the order. New bands start at zero so the encoded
    /// function is unchanged; lowering drops the upper bands.
    pub fn set_order(&mut self, order: ShOrder) {
        self.coeffs.resize(order.num_coeffs() * self.channels, 0.0);
        self.order = order;
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// `F_a[k] = Σ_j b_j[k] Y_j`, using only the first `basis.len()` bands.
#[inline]
pub fn eval_coeffs_into(coeffs: &[f64], channels: usize, basis: &[f64], out: &mut [f64]) {
    out[..channels].fill(0.0);
    for (j, y) in basis.iter().enumerate() {
        let row = &coeffs[j * channels..(j + 1) * channels];
        for (o, b) in out.iter_mut().zip(row) {
            *o += b * y;
        }
    }
}

/// `b̂ = Σ_i w_i b_i` over the eight corner blocks, accumulated in corner order.
#[inline]
pub fn blend_coeffs_into(blocks: &[&[f64]; 8], weights: &[f64; 8], out: &mut [f64]) {
    out.fill(0.0);
    for (block, w) in blocks.iter().zip(weights) {
        for (b, c) in out.iter_mut().zip(block.iter()) {
            *b += w * c;
        }
    }
}

/// Cartesian gradients `∂Y_j/∂d` of the basis polynomials, as evaluated by
/// [`sh_basis_into`].
#[inline]
pub fn sh_basis_grad_into(dir: &Vec3, order: ShOrder, out: &mut [[f64; 3]]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let n = order.num_coeffs();
    out[0] = [0.0; 3];
    if n == 1 {
        return;
    }
    let c1 = 0.488_602_511_902_919_9;
    out[1] = [0.0, c1, 0.0];
    out[2] = [0.0, 0.0, c1];
    out[3] = [c1, 0.0, 0.0];
    if n == 4 {
        return;
    }
    let a = 1.092_548_430_592_079_2;
    let b = 0.315_391_565_252_520_05;
    let c = 0.546_274_215_296_039_6;
    out[4] = [a * y, a * x, 0.0];
    out[5] = [0.0, a * z, a * y];
    out[6] = [0.0, 0.0, 6.0 * b * z];
    out[7] = [a * z, 0.0, a * x];
    out[8] = [2.0 * c * x, -2.0 * c * y, 0.0];
    if n == 9 {
        return;
    }
    let d = 0.590_043_589_926_643_5;
    let e = 2.890_611_442_640_554;
    let f = 0.457_045_799_464_465_8;
    let g = 0.373_176_332_590_115_4;
    let k = 1.445_305_721_320_277;
    out[9] = [6.0 * d * x * y, 3.0 * d * (x * x - y * y), 0.0];
    out[10] = [e * y * z, e * x * z, e * x * y];
    out[11] = [0.0, f * (5.0 * z * z - 1.0), 10.0 * f * y * z];
    out[12] = [0.0, 0.0, g * (15.0 * z * z - 3.0)];
    out[13] = [f * (5.0 * z * z - 1.0), 0.0, 10.0 * f * x * z];
    out[14] = [2.0 * k * x * z, -2.0 * k * y * z, k * (x * x - y * y)];
    out[15] = [3.0 * d * (x * x - y * y), -6.0 * d * x * y, 0.0];
}

/// Evaluates a probe in direction `dir`, producing `n_a` angular features.
pub fn eval_probe(probe: &ProbeSh, dir: &Vec3, channels: usize) -> Result<Vec<f64>> {
    if channels != probe.channels {
        return Err(Error::Dimension(format!(
            "probe has {} channels, {} requested",
            probe.channels, channels
        )));
    }
    let basis = eval_sh_basis(dir, probe.order)?;
    let mut out = vec![0.0; channels];
    eval_coeffs_into(&probe.coeffs, channels, &basis, &mut out);
    Ok(out)
}

/// The eight probes at a tile's corners together with trilinear weights.
///
/// Corner `i` has offset `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`.
#[derive(Debug, Clone, Copy)]
pub struct ProbeCorners<'a> {
    pub probes: [&'a ProbeSh; 8],
    pub weights: [f64; 8],
}

impl<'a> ProbeCorners<'a> {
    /// Builds corners with the trilinear weights of `frac ∈ [0,1]³`.
    pub fn trilinear(probes: [&'a ProbeSh; 8], frac: [f64; 3]) -> Self {
        ProbeCorners {
            probes,
            weights: trilinear_weights(frac),
        }
    }

    fn check(&self) -> Result<(ShOrder, usize)> {
        let order = self.probes[0].order;
        let channels = self.probes[0].channels;
        if self
            .probes
            .iter()
            .any(|p| p.order != order || p.channels != channels)
        {
            return Err(Error::Dimension(
                "corner probes disagree on order or channel count".into(),
            ));
        }
        Ok((order, channels))
    }
}

/// Standard trilinear weights, corner `i` at offset `(i&1, (i>>1)&1, (i>>2)&1)`.
#[inline]
pub fn trilinear_weights(frac: [f64; 3]) -> [f64; 8] {
    let [fx, fy, fz] = frac;
    let mut w = [0.0; 8];
    for (i, wi) in w.iter_mut().enumerate() {
        let ax = if i & 1 == 1 { fx } else { 1.0 - fx };
        let ay = if i & 2 == 2 { fy } else { 1.0 - fy };
        let az = if i & 4 == 4 { fz } else { 1.0 - fz };
        *wi = ax * ay * az;
    }
    w
}

/// Blends the corner coefficients first (`b̂_j = Σ_i w_i b_ij`), then evaluates
/// the SH once. This is the production path.
pub fn interp_probes(corners: &ProbeCorners<'_>, dir: &Vec3) -> Result<Vec<f64>> {
    let (order, channels) = corners.check()?;
    let basis = eval_sh_basis(dir, order)?;
    let mut blended = vec![0.0; order.num_coeffs() * channels];
    let blocks: [&[f64]; 8] = std::array::from_fn(|i| corners.probes[i].coeffs());
    blend_coeffs_into(&blocks, &corners.weights, &mut blended);
    let mut out = vec![0.0; channels];
    eval_coeffs_into(&blended, channels, &basis, &mut out);
    Ok(out)
}

/// Evaluates each corner probe and blends the results (`Σ_i w_i SH_i(r)`).
pub fn interp_probes_per_probe(corners: &ProbeCorners<'_>, dir: &Vec3) -> Result<Vec<f64>> {
    let (_, channels) = corners.check()?;
    let mut out = vec![0.0; channels];
    for (probe, w) in corners.probes.iter().zip(corners.weights) {
        let fa = eval_probe(probe, dir, channels)?;
        for (o, f) in out.iter_mut().zip(fa) {
            *o += w * f;
        }
    }
    Ok(out)
}

/// Reverse pass of [`interp_probes`]: `∂L/∂b_ij[k] = grad_fa[k] · Y_j(dir) · w_i`.
///
/// Returns one gradient block per corner, in the probes' coefficient layout.
pub fn backprop_probe(
    grad_fa: &[f64],
    corners: &ProbeCorners<'_>,
    dir: &Vec3,
) -> Result<[Vec<f64>; 8]> {
    let (order, channels) = corners.check()?;
    if grad_fa.len() != channels {
        return Err(Error::Dimension(format!(
            "upstream gradient has {} channels, probes have {}",
            grad_fa.len(),
            channels
        )));
    }
    let basis = eval_sh_basis(dir, order)?;
    let mut blended = vec![0.0; order.num_coeffs() * channels];
    for (j, y) in basis.iter().enumerate() {
        for k in 0..channels {
            blended[j * channels + k] = grad_fa[k] * y;
        }
    }
    Ok(std::array::from_fn(|i| {
        blended.iter().map(|g| g * corners.weights[i]).collect()
    }))
}

/// Reflection of the unit vector `v` (pointing away from the surface) about `n`.
#[inline]
pub fn reflect(n: &Vec3, v: &Vec3) -> Vec3 {
    n * (2.0 * n.dot(v)) - v
}
