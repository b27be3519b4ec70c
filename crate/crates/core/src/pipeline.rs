//! End-to-end operations shared by the command line and the tests.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::appearance::Ablation;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::{chamfer, psnr_from_mse, sample_mesh, ChamferReport, Reference};
use crate::io::{Checkpoint, Dataset};
use crate::mesh::{extract_mesh, TriMesh};
use crate::optim::schedule::Schedule;
use crate::optim::train::{train, LogEntry, Model, TrainData};
use crate::render::{render_image, RenderOptions, Rendered};
use crate::Vec3;

pub fn train_data(data: &Dataset) -> TrainData<'_> {
    TrainData {
        cameras: &data.cameras,
        images: &data.images,
        masks: &data.masks,
    }
}

/// Initialises a model from the schedule and runs every stage.
pub fn train_checkpoint(
    data: &Dataset,
    schedule: &Schedule,
    seed: u64,
    on_step: impl FnMut(&LogEntry),
) -> Result<Checkpoint> {
    let td = train_data(data);
    td.validate()?;
    let mut model = Model::init(schedule, &td, seed)?;
    let cursor = train(&td, schedule, &mut model, seed, on_step)?;
    Ok(Checkpoint {
        model,
        cursor,
        seed,
        tau_voxels: schedule.final_tau_voxels(),
    })
}

/// Rendering options matching the checkpoint's final training state.
pub fn render_options(ck: &Checkpoint, ablation: Ablation) -> RenderOptions {
    let mut opts = RenderOptions::new(ck.tau_voxels / ck.model.grid.voxel_size());
    opts.background = ck.model.background;
    opts.ablation = ablation;
    opts
}

/// Renders a view; `camera_index` selects the decoder's per-camera bias.
pub fn render_view(
    ck: &Checkpoint,
    camera: &Camera,
    camera_index: Option<usize>,
    ablation: Ablation,
) -> Result<Rendered> {
    let index = camera_index.filter(|_| ck.model.mlp.has_camera_bias());
    render_image(&ck.model.grid, &ck.model.mlp, camera, index, &render_options(ck, ablation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsnrReport {
    /// Pooled over the in-mask pixels of every view.
    pub psnr: f64,
    pub per_view: Vec<f64>,
}

/// In-mask PSNR of the checkpoint against every dataset view.
pub fn evaluate_psnr(ck: &Checkpoint, data: &Dataset) -> Result<PsnrReport> {
    let renders: Vec<_> = data
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| render_view(ck, c, Some(i), Ablation::default()).map(|r| r.image))
        .collect::<Result<_>>()?;
    psnr_report(&renders, data)
}

/// In-mask PSNR of predicted images against the dataset images.
pub fn psnr_report(predictions: &[crate::imaging::Image], data: &Dataset) -> Result<PsnrReport> {
    if predictions.len() != data.images.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} views",
            predictions.len(),
            data.images.len()
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    let mut per_view = Vec::with_capacity(predictions.len());
    for ((pred, gt), mask) in predictions.iter().zip(&data.images).zip(&data.masks) {
        crate::imaging::check_same_size(pred.width, pred.height, gt.width, gt.height)?;
        let (mut s, mut k) = (0.0, 0usize);
        for ((a, b), &m) in pred.data.iter().zip(&gt.data).zip(&mask.data) {
            if m {
                s += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                k += 3;
            }
        }
        per_view.push(if k > 0 { psnr_from_mse(s / k as f64) } else { f64::NAN });
        sum += s;
        n += k;
    }
    if n == 0 {
        return Err(Error::Empty("every mask is empty".into()));
    }
    Ok(PsnrReport {
        psnr: psnr_from_mse(sum / n as f64),
        per_view,
    })
}

/// Zero level set of the checkpoint's SDF.
pub fn checkpoint_mesh(ck: &Checkpoint) -> TriMesh {
    extract_mesh(&ck.model.grid)
}

/// Chamfer distance of a mesh against reference points, sampling
/// `samples` points on the mesh.
pub fn mesh_chamfer(
    mesh: &TriMesh,
    reference: &Reference<'_>,
    samples: usize,
    max_dist: f64,
    seed: u64,
) -> Result<ChamferReport> {
    if mesh.is_empty() {
        return Err(Error::Empty("the extracted mesh has no triangles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec3> = sample_mesh(mesh, samples, &mut rng)?;
    chamfer(mesh, &points, reference, max_dist)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BenchTimes {
    pub shading: Duration,
    pub render: Duration,
    pub shaded_voxels: usize,
    pub pixels: usize,
}

/// Renders each camera once and splits the time into decoding the voxel
/// shading cache and the full render including compositing.
pub fn bench(ck: &Checkpoint, cameras: &[Camera]) -> Result<Vec<BenchTimes>> {
    cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let start = std::time::Instant::now();
            let r = render_view(ck, c, Some(i), Ablation::default())?;
            Ok(BenchTimes {
                shading: r.stats.shading,
                render: start.elapsed(),
                shaded_voxels: r.stats.shaded_voxels,
                pixels: c.width * c.height,
            })
        })
        .collect()
}
