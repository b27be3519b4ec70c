//! Coarse-to-fine training loop.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::objective::{evaluate, LossTerms, View};
use super::schedule::{Schedule, Stage};
use crate::appearance::DecoderMlp;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grid::{init_grid, subdivide, SparseGrid};
use crate::imaging::{check_same_size, Image, Mask};
use crate::render::RenderOptions;

/// Supervision images with their cameras (full resolution).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub cameras: &'a [Camera],
    pub images: &'a [Image],
    pub masks: &'a [Mask],
}

impl TrainData<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Empty("dataset has no cameras".into()));
        }
        if self.images.len() != self.cameras.len() || self.masks.len() != self.cameras.len() {
            return Err(Error::Dataset(format!(
                "{} cameras, {} images, {} masks",
                self.cameras.len(),
                self.images.len(),
                self.masks.len()
            )));
        }
        for ((c, i), m) in self.cameras.iter().zip(self.images).zip(self.masks) {
            check_same_size(c.width, c.height, i.width, i.height)?;
            check_same_size(c.width, c.height, m.width, m.height)?;
        }
        Ok(())
    }
}

/// Everything optimised: the grid and the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub grid: SparseGrid,
    pub mlp: DecoderMlp,
    pub background: [f64; 3],
}

impl Model {
    /// Initial grid from the schedule and a Glorot decoder seeded by `seed`.
    pub fn init(schedule: &Schedule, data: &TrainData<'_>, seed: u64) -> Result<Self> {
        let grid = init_grid(&schedule.grid_init(), Some((data.cameras, data.masks)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cams = schedule.model.camera_bias.then_some(data.cameras.len());
        let mlp = DecoderMlp::new(schedule.model.n_s, schedule.model.n_a, cams, &mut rng)?;
        Ok(Model {
            grid,
            mlp,
            background: schedule.model.background,
        })
    }
}

/// Position in the schedule: stages completed and iterations run so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cursor {
    pub stage: usize,
    pub iteration: usize,
    pub step: u64,
}

/// One loss-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub lod: u32,
    pub iteration: usize,
    pub terms: LossTerms,
    pub psnr: f64,
    pub tau: f64,
    pub lr_voxel: f64,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.terms;
        write!(
            f,
            "step={} lod={} it={} photo={:.6e} sdf={:.6e} eikonal={:.6e} normal={:.6e} features={:.6e} probes={:.6e} psnr={:.4} tau={:.4e} lr={:.4e}",
            self.step,
            self.lod,
            self.iteration,
            t.photo,
            t.sdf,
            t.eikonal,
            t.normal,
            t.features,
            t.probes,
            self.psnr,
            self.tau,
            self.lr_voxel
        )
    }
}

/// Seeded round-robin over image indices: each epoch visits every image
/// once in a fresh shuffled order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    queue: Vec<usize>,
    n: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            n,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.queue.is_empty() {
                    self.queue = (0..self.n).rev().collect();
                    self.queue.shuffle(&mut self.rng);
                }
                self.queue.pop().unwrap()
            })
            .collect()
    }
}

#[derive(Debug)]
struct StageData {
    cameras: Vec<Camera>,
    images: Vec<Image>,
    masks: Vec<Mask>,
}

fn stage_data(data: &TrainData<'_>, divisor: usize) -> Result<StageData> {
    let out = StageData {
        cameras: data.cameras.iter().map(|c| c.downscaled(divisor)).collect(),
        images: data.images.iter().map(|i| i.downsample(divisor)).collect(),
        masks: data.masks.iter().map(|m| m.downsample(divisor)).collect(),
    };
    for ((c, i), m) in out.cameras.iter().zip(&out.images).zip(&out.masks) {
        check_same_size(c.width, c.height, i.width, i.height)?;
        check_same_size(c.width, c.height, m.width, m.height)?;
    }
    Ok(out)
}

/// Adam moments for every parameter group.
struct Optimizer {
    sdf: AdamState,
    planes: AdamState,
    probes: AdamState,
    mlp: AdamState,
    camera_bias: AdamState,
}

impl Optimizer {
    fn new(model: &Model) -> Self {
        let g = &model.grid;
        Optimizer {
            sdf: AdamState::new(g.raw_sdf.len()),
            planes: AdamState::new(g.planes.len()),
            probes: AdamState::new(g.probes.len() * g.probe_stride()),
            mlp: AdamState::new(model.mlp.params.len()),
            camera_bias: AdamState::new(model.mlp.camera_bias.len()),
        }
    }
}

fn flatten_probes(grid: &SparseGrid) -> Vec<f64> {
    grid.probes.iter().flat_map(|p| p.coeffs().iter().copied()).collect()
}

fn unflatten_probes(grid: &mut SparseGrid, flat: &[f64]) {
    let stride = grid.probe_stride();
    for (p, chunk) in grid.probes.iter_mut().zip(flat.chunks(stride)) {
        p.coeffs_mut().copy_from_slice(chunk);
    }
}

/// Brings the grid to the stage's level of detail and SH order.
fn enter_stage(model: &mut Model, stage: &Stage, band_voxels: f64) -> Result<()> {
    if model.grid.lod < stage.lod {
        return Err(Error::Schedule(format!(
            "grid is at lod {} but the schedule asks for lod {}",
            model.grid.lod, stage.lod
        )));
    }
    while model.grid.lod > stage.lod {
        model.grid = subdivide(&model.grid, band_voxels)?;
    }
    if model.grid.dims.sh_order != stage.sh_order {
        model.grid.set_sh_order(stage.sh_order);
    }
    Ok(())
}

/// Runs the schedule from its start. `on_step` receives every log entry.
pub fn train(
    data: &TrainData<'_>,
    schedule: &Schedule,
    model: &mut Model,
    seed: u64,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<Cursor> {
    data.validate()?;
    let first = &schedule.stages[0];
    if model.grid.lod != first.lod {
        return Err(Error::Schedule(format!(
            "grid is at lod {} but the schedule starts at lod {}",
            model.grid.lod, first.lod
        )));
    }
    if model.mlp.has_camera_bias() && model.mlp.num_cameras() != data.cameras.len() {
        return Err(Error::Dataset(format!(
            "decoder has biases for {} cameras, dataset has {}",
            model.mlp.num_cameras(),
            data.cameras.len()
        )));
    }
    let mut sampler = BatchSampler::new(data.cameras.len(), seed);
    let mut cursor = Cursor::default();
    for (si, stage) in schedule.stages.iter().enumerate() {
        cursor.stage = si;
        cursor.iteration = 0;
        enter_stage(model, stage, schedule.model.band_voxels)?;
        if stage.iterations == 0 {
            continue;
        }
        let views_data = stage_data(data, stage.divisor)?;
        let mut opt = Optimizer::new(model);
        for it in 0..stage.iterations {
            let p = stage.params(it);
            let mut opts = RenderOptions::new(p.tau_voxels / model.grid.voxel_size());
            opts.background = model.background;
            let batch = sampler.next_batch(stage.images_per_batch);
            let views: Vec<View<'_>> = batch
                .iter()
                .map(|&i| View {
                    camera: &views_data.cameras[i],
                    camera_index: model.mlp.has_camera_bias().then_some(i),
                    image: &views_data.images[i],
                    mask: &views_data.masks[i],
                })
                .collect();
            let eval = evaluate(&model.grid, &model.mlp, &views, &p.weights, &opts, None)?;

            let grid = &mut model.grid;
            let d_raw = eval.grads.raw_sdf_total(grid);
            opt.sdf.step(&mut grid.raw_sdf, &d_raw, p.lr_voxel);
            opt.planes.step(&mut grid.planes, &eval.grads.planes, p.lr_voxel);
            let mut flat = flatten_probes(grid);
            opt.probes.step(&mut flat, &eval.grads.probes, p.lr_mlp);
            unflatten_probes(grid, &flat);
            opt.mlp.step(&mut model.mlp.params, &eval.grads.mlp.params, p.lr_mlp);
            if !model.mlp.camera_bias.is_empty() {
                opt.camera_bias
                    .step(&mut model.mlp.camera_bias, &eval.grads.mlp.camera_bias, p.lr_mlp);
            }
            grid.resmooth();

            cursor.iteration = it + 1;
            cursor.step += 1;
            on_step(&LogEntry {
                step: cursor.step,
                lod: stage.lod,
                iteration: it,
                terms: eval.terms,
                psnr: eval.psnr,
                tau: opts.tau,
                lr_voxel: p.lr_voxel,
            });
        }
    }
    cursor.stage = schedule.stages.len();
    cursor.iteration = 0;
    Ok(cursor)
}
