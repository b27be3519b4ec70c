//! Finite-difference audit of the full training objective on a tiny scene.
//!
//! The reweighting factors are taken from the unperturbed state and held
//! fixed while differencing, so both sides see the same smooth function.
//! Coordinates whose ± step flips a decoder ReLU (or changes the set of
//! decoded voxels) straddle a kink where no derivative exists; they are
//! counted and left out of the error norm.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{decode_fused_cached, DecoderMlp, VoxelCache};
use crate::camera::Camera;
use crate::error::Result;
use crate::grid::{FeatureDims, GridLayout, SparseGrid};
use crate::imaging::{Image, Mask};
use crate::optim::losses::LossWeights;
use crate::optim::objective::{evaluate, FrozenWeights, View};
use crate::render::{render_image, view_dir, RenderOptions};
use crate::sh::ShOrder;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per parameter class; half are those with the
    /// largest analytic gradient, half are drawn uniformly.
    pub samples_per_class: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            step: 1e-4,
            samples_per_class: 128,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Sdf,
    Planes,
    Probes,
    Mlp,
    CameraBias,
}

impl ParamClass {
    pub const ALL: [ParamClass; 5] = [
        ParamClass::Sdf,
        ParamClass::Planes,
        ParamClass::Probes,
        ParamClass::Mlp,
        ParamClass::CameraBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Sdf => "sdf",
            ParamClass::Planes => "planes",
            ParamClass::Probes => "probes",
            ParamClass::Mlp => "mlp",
            ParamClass::CameraBias => "camera_bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    /// Coordinates whose step crosses a ReLU kink, excluded from the norms.
    pub kinks: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_error: f64,
    /// Largest per-coordinate `|analytic − numeric| / max(|analytic|, |numeric|)`
    /// among coordinates whose gradient exceeds [`WORST_FLOOR`].
    pub worst_coordinate: f64,
    pub analytic_norm: f64,
}

impl ClassReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked - self.kinks >= MIN_SMOOTH.min(self.checked)
            && self.checked > 0
            && self.analytic_norm > 0.0
            && self.rel_error < tolerance
    }
}

/// Gradients below this are roundoff-dominated and skipped by the
/// per-coordinate diagnostic.
pub const WORST_FLOOR: f64 = 1e-6;

/// Kink-free coordinates required per class.
pub const MIN_SMOOTH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub classes: Vec<ClassReport>,
    pub tolerance: f64,
    pub loss: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    /// Every class has a nonzero gradient, at least [`MIN_SMOOTH`]
    /// kink-free coordinates and a relative error below the tolerance.
    pub fn passed(&self) -> bool {
        self.classes.iter().all(|c| c.passed(self.tolerance))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "loss {:.9e}", self.loss)?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<12} checked {:>4}  kinks {:>3}  rel {:.3e}  worst {:.3e}  |g| {:.3e}  {}",
                c.class.name(),
                c.checked,
                c.kinks,
                c.rel_error,
                c.worst_coordinate,
                c.analytic_norm,
                if c.passed(self.tolerance) { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "elapsed {:.2}s", self.elapsed.as_secs_f64())
    }
}

/// The audit scene: eight tiles, two 4×4 views, every loss active.
pub struct AuditScene {
    pub grid: SparseGrid,
    pub mlp: DecoderMlp,
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: Vec<Mask>,
    pub weights: LossWeights,
    pub opts: RenderOptions,
}

impl AuditScene {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = FeatureDims {
            n_s: 2,
            n_a: 2,
            sh_order: ShOrder::new(3)?,
        };
        let mut grid = SparseGrid::dense(GridLayout::cube(-1.0, 2.0, 2), dims, 0, 0.5)?;
        for slot in 0..grid.raw_sdf.len() {
            let p = grid.slot_center(slot);
            grid.raw_sdf[slot] = p.norm() - 0.5 + rng.gen_range(-0.02..0.02);
        }
        grid.resmooth();
        for v in grid.planes.iter_mut() {
            *v = rng.gen_range(0.2..1.0);
        }
        for p in grid.probes.iter_mut() {
            for c in p.coeffs_mut() {
                *c = rng.gen_range(-0.5..0.5);
            }
        }
        let mut mlp = DecoderMlp::new(2, 2, Some(2), &mut rng)?;
        for b in mlp.camera_bias.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
        let cameras: Vec<Camera> = [Vec3::new(0.3, 0.2, -2.5), Vec3::new(-2.2, -0.4, 0.9)]
            .iter()
            .enumerate()
            .map(|(i, &eye)| Camera::look_at(i, eye, Vec3::zeros(), Vec3::y(), 4, 0.45))
            .collect();
        let images = cameras
            .iter()
            .map(|_| {
                let mut img = Image::new(4, 4, [0.0; 3]);
                for px in img.data.iter_mut() {
                    *px = [rng.gen(), rng.gen(), rng.gen()];
                }
                img
            })
            .collect();
        let masks = cameras
            .iter()
            .map(|_| {
                let mut m = Mask::new(4, 4, false);
                for (i, px) in m.data.iter_mut().enumerate() {
                    let (x, y) = ((i % 4) as f64 - 1.5, (i / 4) as f64 - 1.5);
                    *px = x * x + y * y < 3.0;
                }
                m
            })
            .collect();
        let mut opts = RenderOptions::exact(2.0 / grid.voxel_size());
        opts.background = [0.1, 0.2, 0.3];
        let weights = LossWeights {
            photo: 40.0,
            sdf: 0.5,
            eikonal: 0.3,
            normal: 0.2,
            features: 0.1,
            probes: 0.4,
        };
        Ok(AuditScene {
            grid,
            mlp,
            cameras,
            images,
            masks,
            weights,
            opts,
        })
    }

    fn views(&self) -> Vec<View<'_>> {
        (0..self.cameras.len())
            .map(|i| View {
                camera: &self.cameras[i],
                camera_index: Some(i),
                image: &self.images[i],
                mask: &self.masks[i],
            })
            .collect()
    }

    fn objective(&self, grid: &SparseGrid, mlp: &DecoderMlp, frozen: &FrozenWeights) -> Result<f64> {
        Ok(evaluate(grid, mlp, &self.views(), &self.weights, &self.opts, Some(frozen))?.weighted)
    }

    /// Decoded voxels of every view and the signs of their hidden
    /// pre-activations.
    fn activation_pattern(&self, grid: &SparseGrid, mlp: &DecoderMlp) -> Result<Vec<(usize, Vec<bool>)>> {
        let mut out = Vec::new();
        let mut vc = VoxelCache::new(grid);
        for (i, cam) in self.cameras.iter().enumerate() {
            let r = render_image(grid, mlp, cam, Some(i), &self.opts)?;
            for &slot in &r.cache.slots {
                let dir = view_dir(grid, slot, &cam.center);
                decode_fused_cached(grid, mlp, slot, &dir, Some(i), &self.opts.ablation, &mut vc);
                let signs = vc.mlp.z1.iter().chain(&vc.mlp.z2).map(|&z| z > 0.0).collect();
                out.push((slot, signs));
            }
        }
        Ok(out)
    }
}

fn class_len(class: ParamClass, grid: &SparseGrid, mlp: &DecoderMlp) -> usize {
    match class {
        ParamClass::Sdf => grid.raw_sdf.len(),
        ParamClass::Planes => grid.planes.len(),
        ParamClass::Probes => grid.probes.len() * grid.probe_stride(),
        ParamClass::Mlp => mlp.params.len(),
        ParamClass::CameraBias => mlp.camera_bias.len(),
    }
}

/// Adds `delta` to one parameter, keeping the smoothed SDF in sync.
fn nudge(class: ParamClass, i: usize, delta: f64, grid: &mut SparseGrid, mlp: &mut DecoderMlp) {
    match class {
        ParamClass::Sdf => {
            grid.raw_sdf[i] += delta;
            grid.resmooth();
        }
        ParamClass::Planes => grid.planes[i] += delta,
        ParamClass::Probes => {
            let stride = grid.probe_stride();
            grid.probes[i / stride].coeffs_mut()[i % stride] += delta;
        }
        ParamClass::Mlp => mlp.params[i] += delta,
        ParamClass::CameraBias => mlp.camera_bias[i] += delta,
    }
}

fn pick_coordinates(analytic: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut by_size: Vec<usize> = (0..analytic.len()).collect();
    by_size.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<usize> = by_size.iter().copied().take(n / 2).collect();
    let mut rest: Vec<usize> = by_size[picked.len()..].to_vec();
    rest.shuffle(rng);
    picked.extend(rest.into_iter().take(n - picked.len()));
    picked.sort_unstable();
    picked
}

/// Runs the audit. Threading follows the ambient rayon pool.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let scene = AuditScene::new(config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let base = evaluate(&scene.grid, &scene.mlp, &scene.views(), &scene.weights, &scene.opts, None)?;
    let frozen = base.frozen.clone();

    let mut grid = scene.grid.clone();
    let mut mlp = scene.mlp.clone();
    let mut classes = Vec::new();
    for class in ParamClass::ALL {
        let analytic: Vec<f64> = match class {
            ParamClass::Sdf => base.grads.raw_sdf_total(&scene.grid),
            ParamClass::Planes => base.grads.planes.clone(),
            ParamClass::Probes => base.grads.probes.clone(),
            ParamClass::Mlp => base.grads.mlp.params.clone(),
            ParamClass::CameraBias => base.grads.mlp.camera_bias.clone(),
        };
        debug_assert_eq!(analytic.len(), class_len(class, &grid, &mlp));
        let coords = pick_coordinates(&analytic, config.samples_per_class.min(analytic.len()), &mut rng);
        let (mut diff2, mut an2, mut fd2, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
        let mut kinks = 0;
        for &i in &coords {
            let h = config.step;
            nudge(class, i, h, &mut grid, &mut mlp);
            let plus = scene.objective(&grid, &mlp, &frozen)?;
            let pattern_plus = scene.activation_pattern(&grid, &mlp)?;
            nudge(class, i, -2.0 * h, &mut grid, &mut mlp);
            let minus = scene.objective(&grid, &mlp, &frozen)?;
            let pattern_minus = scene.activation_pattern(&grid, &mlp)?;
            nudge(class, i, h, &mut grid, &mut mlp);
            if pattern_plus != pattern_minus {
                kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            diff2 += (a - fd).powi(2);
            an2 += a * a;
            fd2 += fd * fd;
            let scale = a.abs().max(fd.abs());
            if scale > WORST_FLOOR {
                worst = worst.max((a - fd).abs() / scale);
            }
        }
        let denom = an2.max(fd2).sqrt();
        classes.push(ClassReport {
            class,
            checked: coords.len(),
            kinks,
            rel_error: if denom > 0.0 { diff2.sqrt() / denom } else { 0.0 },
            worst_coordinate: worst,
            analytic_norm: an2.sqrt(),
        });
        // Undo any accumulated rounding from the nudges.
        grid = scene.grid.clone();
        mlp = scene.mlp.clone();
    }
    Ok(GradcheckReport {
        classes,
        tolerance: config.tolerance,
        loss: base.weighted,
        elapsed: start.elapsed(),
    })
}
