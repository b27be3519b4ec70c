//! Coarse-to-fine training schedules read from TOML.
//!
//! ```toml
//! [model]
//! n_s = 4
//! n_a = 4
//!
//! [grid]
//! bbox_min = [-1.0, -1.0, -1.0]
//! voxel_size = 0.125
//! tiles = [1, 1, 1]
//! lod = 2
//! init = "visual_hull"
//!
//! [[lod]]
//! lod = 2
//! iterations = 300
//! images_per_batch = 4
//! divisor = 4
//! sh_order = 2
//! tau = [2.0, 6.0]
//! lr_voxel = [0.025, 0.01]
//! lr_mlp = 0.01
//! lambda_eikonal = 0.1
//! ```
//!
//! Every hyperparameter is a bracket: a number, or a list of knots spread
//! evenly over the level's iterations and interpolated linearly. `tau` is
//! given in units of inverse voxel size and interpolated geometrically.
//! Fields left out of a level inherit the previous level's value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use crate::error::{Error, Result};
use crate::grid::{FeatureDims, GridInit, GridLayout, InitMode, SphereInit};
use crate::sh::ShOrder;
use crate::Vec3;

/// Learning rates ramp up linearly over this many iterations of each level.
pub const WARMUP_ITERATIONS: usize = 50;
pub const DEFAULT_LAMBDA_PHOTO: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bracket {
    Constant(f64),
    Knots(Vec<f64>),
}

impl Bracket {
    fn knots(&self) -> &[f64] {
        match self {
            Bracket::Constant(v) => std::slice::from_ref(v),
            Bracket::Knots(k) => k,
        }
    }

    /// Knot segment and fraction for iteration `it` of `n`.
    fn locate(&self, it: usize, n: usize) -> (usize, f64) {
        let m = self.knots().len();
        if m == 1 || n <= 1 {
            return (0, 0.0);
        }
        let x = it.min(n - 1) as f64 / (n - 1) as f64 * (m - 1) as f64;
        let seg = (x.floor() as usize).min(m - 2);
        (seg, x - seg as f64)
    }

    pub fn linear(&self, it: usize, n: usize) -> f64 {
        let k = self.knots();
        let (seg, f) = self.locate(it, n);
        if f == 0.0 {
            return k[seg];
        }
        if f == 1.0 {
            return k[seg + 1];
        }
        k[seg] + (k[seg + 1] - k[seg]) * f
    }

    pub fn geometric(&self, it: usize, n: usize) -> f64 {
        let k = self.knots();
        let (seg, f) = self.locate(it, n);
        if f == 0.0 {
            return k[seg];
        }
        if f == 1.0 {
            return k[seg + 1];
        }
        k[seg] * (k[seg + 1] / k[seg]).powf(f)
    }

    fn check(&self, name: &str, lod: u32, positive: bool) -> Result<()> {
        let k = self.knots();
        if k.is_empty() {
            return Err(Error::Schedule(format!("lod {lod}: `{name}` has no values")));
        }
        for &v in k {
            if !v.is_finite() || v < 0.0 || (positive && v == 0.0) {
                return Err(Error::Schedule(format!("lod {lod}: `{name}` has invalid value {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_s: usize,
    pub n_a: usize,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default = "default_band")]
    pub band_voxels: f64,
    /// Per-camera decoder bias vectors.
    #[serde(default)]
    pub camera_bias: bool,
}

fn default_band() -> f64 {
    crate::grid::DEFAULT_BAND_VOXELS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    VisualHull,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bbox_min: [f64; 3],
    /// Voxel size at the first level.
    pub voxel_size: f64,
    /// Tiles along each axis at the first level.
    pub tiles: [usize; 3],
    pub lod: u32,
    pub init: InitKind,
    #[serde(default)]
    pub sphere_center: [f64; 3],
    #[serde(default = "default_radius")]
    pub sphere_radius: f64,
}

fn default_radius() -> f64 {
    0.5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    lod: u32,
    iterations: Option<usize>,
    images_per_batch: Option<usize>,
    divisor: Option<usize>,
    sh_order: Option<u8>,
    tau: Option<Bracket>,
    lr_voxel: Option<Bracket>,
    lr_mlp: Option<Bracket>,
    lambda_photo: Option<Bracket>,
    lambda_sdf: Option<Bracket>,
    lambda_eikonal: Option<Bracket>,
    lambda_normal: Option<Bracket>,
    lambda_features: Option<Bracket>,
    lambda_probes: Option<Bracket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    model: ModelConfig,
    grid: GridConfig,
    lod: Vec<RawStage>,
}

/// One fully resolved level of detail.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub lod: u32,
    pub iterations: usize,
    pub images_per_batch: usize,
    pub divisor: usize,
    pub sh_order: ShOrder,
    pub tau: Bracket,
    pub lr_voxel: Bracket,
    pub lr_mlp: Bracket,
    pub lambda_photo: Bracket,
    pub lambda_sdf: Bracket,
    pub lambda_eikonal: Bracket,
    pub lambda_normal: Bracket,
    pub lambda_features: Bracket,
    pub lambda_probes: Bracket,
}

/// Hyperparameters in effect at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    /// Learning rates with the warm-up factor applied.
    pub lr_voxel: f64,
    pub lr_mlp: f64,
    pub warmup: f64,
    /// Sharpness in inverse voxel units.
    pub tau_voxels: f64,
    pub weights: LossWeights,
}

pub fn warmup_factor(it: usize) -> f64 {
    ((it + 1) as f64 / WARMUP_ITERATIONS as f64).min(1.0)
}

impl Stage {
    pub fn params(&self, it: usize) -> StepParams {
        let n = self.iterations;
        let warmup = warmup_factor(it);
        StepParams {
            lr_voxel: self.lr_voxel.linear(it, n) * warmup,
            lr_mlp: self.lr_mlp.linear(it, n) * warmup,
            warmup,
            tau_voxels: self.tau.geometric(it, n),
            weights: LossWeights {
                photo: self.lambda_photo.linear(it, n),
                sdf: self.lambda_sdf.linear(it, n),
                eikonal: self.lambda_eikonal.linear(it, n),
                normal: self.lambda_normal.linear(it, n),
                features: self.lambda_features.linear(it, n),
                probes: self.lambda_probes.linear(it, n),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub stages: Vec<Stage>,
}

impl Schedule {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawSchedule = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn resolve(raw: RawSchedule) -> Result<Self> {
        if raw.model.n_s == 0 || raw.model.n_a == 0 {
            return Err(Error::Config("n_s and n_a must be positive".into()));
        }
        if raw.model.n_s + raw.model.n_a + crate::appearance::FRESNEL_TERMS > crate::appearance::MAX_INPUT {
            return Err(Error::Config("feature widths exceed the decoder input limit".into()));
        }
        let g = &raw.grid;
        if !(g.voxel_size > 0.0 && g.voxel_size.is_finite())
            || g.tiles.contains(&0)
            || !g.bbox_min.iter().all(|v| v.is_finite())
        {
            return Err(Error::Config("grid needs a positive voxel size and tile counts".into()));
        }
        if raw.lod.is_empty() {
            return Err(Error::Schedule("schedule has no levels".into()));
        }
        if raw.lod[0].lod != g.lod {
            return Err(Error::Schedule(format!(
                "first level is lod {} but the grid starts at lod {}",
                raw.lod[0].lod, g.lod
            )));
        }
        let mut stages: Vec<Stage> = Vec::with_capacity(raw.lod.len());
        for r in raw.lod {
            let prev = stages.last();
            if let Some(p) = prev {
                if p.lod == 0 || r.lod != p.lod - 1 {
                    return Err(Error::Schedule(format!(
                        "lod {} cannot follow lod {}; levels count down by one",
                        r.lod, p.lod
                    )));
                }
            }
            let lod = r.lod;
            let missing = |name: &str| Error::Schedule(format!("lod {lod}: `{name}` is required on the first level"));
            macro_rules! pick {
                ($field:ident) => {
                    match (r.$field, prev) {
                        (Some(v), _) => v,
                        (None, Some(p)) => p.$field.clone(),
                        (None, None) => return Err(missing(stringify!($field))),
                    }
                };
            }
            let sh_order = match (r.sh_order, prev) {
                (Some(l), _) => ShOrder::new(l).map_err(|e| Error::Schedule(format!("lod {lod}: {e}")))?,
                (None, Some(p)) => p.sh_order,
                (None, None) => return Err(missing("sh_order")),
            };
            let stage = Stage {
                lod,
                iterations: pick!(iterations),
                images_per_batch: pick!(images_per_batch),
                divisor: match (r.divisor, prev) {
                    (Some(d), _) => d,
                    (None, Some(p)) => p.divisor,
                    (None, None) => 1,
                },
                sh_order,
                tau: pick!(tau),
                lr_voxel: pick!(lr_voxel),
                lr_mlp: pick!(lr_mlp),
                lambda_photo: match (r.lambda_photo, prev) {
                    (Some(v), _) => v,
                    (None, Some(p)) => p.lambda_photo.clone(),
                    (None, None) => Bracket::Constant(DEFAULT_LAMBDA_PHOTO),
                },
                lambda_sdf: pick!(lambda_sdf),
                lambda_eikonal: pick!(lambda_eikonal),
                lambda_normal: pick!(lambda_normal),
                lambda_features: pick!(lambda_features),
                lambda_probes: pick!(lambda_probes),
            };
            if stage.images_per_batch == 0 || stage.divisor == 0 {
                return Err(Error::Schedule(format!("lod {lod}: images_per_batch and divisor must be positive")));
            }
            stage.tau.check("tau", lod, true)?;
            for (name, b) in [
                ("lr_voxel", &stage.lr_voxel),
                ("lr_mlp", &stage.lr_mlp),
                ("lambda_photo", &stage.lambda_photo),
                ("lambda_sdf", &stage.lambda_sdf),
                ("lambda_eikonal", &stage.lambda_eikonal),
                ("lambda_normal", &stage.lambda_normal),
                ("lambda_features", &stage.lambda_features),
                ("lambda_probes", &stage.lambda_probes),
            ] {
                b.check(name, lod, false)?;
            }
            stages.push(stage);
        }
        Ok(Schedule {
            model: raw.model,
            grid: raw.grid,
            stages,
        })
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    /// Sharpness in voxel units at the last scheduled iteration.
    pub fn final_tau_voxels(&self) -> f64 {
        let last = self.stages.last().expect("schedules have at least one stage");
        last.params(last.iterations.saturating_sub(1)).tau_voxels
    }

    pub fn layout(&self) -> GridLayout {
        let g = &self.grid;
        GridLayout {
            bbox_min: Vec3::from(g.bbox_min),
            voxel_size: g.voxel_size,
            tiles_per_axis: g.tiles,
        }
    }

    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            n_s: self.model.n_s,
            n_a: self.model.n_a,
            sh_order: self.stages[0].sh_order,
        }
    }

    pub fn grid_init(&self) -> GridInit {
        GridInit {
            layout: self.layout(),
            dims: self.feature_dims(),
            lod: self.grid.lod,
            mode: match self.grid.init {
                InitKind::VisualHull => InitMode::VisualHull,
                InitKind::Sphere => InitMode::Sphere(SphereInit {
                    center: Vec3::from(self.grid.sphere_center),
                    radius: self.grid.sphere_radius,
                }),
            },
        }
    }
}
