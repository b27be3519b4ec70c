//! The weighted training objective over a batch of views, shared by the
//! training loop and the gradient audit.

use super::losses::{
    eikonal_loss, feature_loss, normal_loss, photo_loss, probe_loss, sdf_loss, LossWeights,
};
use crate::appearance::DecoderMlp;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::eval::psnr_from_mse;
use crate::grid::SparseGrid;
use crate::imaging::{Image, Mask};
use crate::render::{render_backward, render_image, RenderOptions, RenderStats, SceneGrads};

/// One supervised image.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a Camera,
    /// Row of the per-camera decoder bias, when enabled.
    pub camera_index: Option<usize>,
    pub image: &'a Image,
    pub mask: &'a Mask,
}

/// Reweighting factors of one evaluation, reusable to hold them fixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenWeights {
    pub photo: Vec<Vec<[f64; 4]>>,
    pub sdf: Vec<f64>,
    pub eikonal: Vec<f64>,
    pub normal: Vec<f64>,
    pub features: Vec<f64>,
}

/// Unweighted (plain squared error) loss values, each times its `λ`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub photo: f64,
    pub sdf: f64,
    pub eikonal: f64,
    pub normal: f64,
    pub features: f64,
    pub probes: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.photo + self.sdf + self.eikonal + self.normal + self.features + self.probes
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    /// `Σ w·term` with the reweighting factors in `frozen`.
    pub weighted: f64,
    pub grads: SceneGrads,
    pub frozen: FrozenWeights,
    /// In-mask PSNR over the batch.
    pub psnr: f64,
    pub stats: RenderStats,
}

/// Renders every view, evaluates all losses and backpropagates.
///
/// The photometric term of each view is scaled by `λ_photo / views.len()`.
/// Regularisers with `λ = 0` are skipped. With `frozen`, the reweighting
/// factors are taken from a previous evaluation instead of the current state.
pub fn evaluate(
    grid: &SparseGrid,
    mlp: &DecoderMlp,
    views: &[View<'_>],
    weights: &LossWeights,
    opts: &RenderOptions,
    frozen: Option<&FrozenWeights>,
) -> Result<Evaluation> {
    if views.is_empty() {
        return Err(Error::Empty("no views in the batch".into()));
    }
    let mut grads = SceneGrads::zeros(grid, mlp);
    let mut terms = LossTerms::default();
    let mut weighted = 0.0;
    let mut out_frozen = FrozenWeights::default();
    let mut stats = RenderStats::default();
    let (mut sq_err, mut count) = (0.0, 0usize);

    let scale = weights.photo / views.len() as f64;
    for (i, view) in views.iter().enumerate() {
        let rendered = render_image(grid, mlp, view.camera, view.camera_index, opts)?;
        let photo = photo_loss(
            &rendered.image,
            &rendered.alpha,
            view.image,
            view.mask,
            scale,
            frozen.map(|f| f.photo[i].as_slice()),
        )?;
        for (p, &m) in view.mask.data.iter().enumerate() {
            if m {
                let (c, g) = (rendered.image.data[p], view.image.data[p]);
                sq_err += (0..3).map(|k| (c[k] - g[k]).powi(2)).sum::<f64>();
                count += 3;
            }
        }
        terms.photo += photo.value;
        weighted += photo.weighted;
        render_backward(
            grid,
            mlp,
            view.camera,
            view.camera_index,
            opts,
            &rendered,
            &photo.d_rgb,
            &photo.d_alpha,
            &mut grads,
        );
        stats.shading += rendered.stats.shading;
        stats.compositing += rendered.stats.compositing;
        stats.shaded_voxels += rendered.stats.shaded_voxels;
        out_frozen.photo.push(photo.weights);
    }

    macro_rules! regulariser {
        ($lambda:expr, $f:ident, $slot:ident, $term:ident) => {
            if $lambda > 0.0 {
                let e = $f(grid, $lambda, frozen.map(|f| f.$slot.as_slice()), &mut grads);
                terms.$term += e.value;
                weighted += e.weighted;
                out_frozen.$slot = e.weights;
            }
        };
    }
    regulariser!(weights.sdf, sdf_loss, sdf, sdf);
    regulariser!(weights.eikonal, eikonal_loss, eikonal, eikonal);
    regulariser!(weights.normal, normal_loss, normal, normal);
    regulariser!(weights.features, feature_loss, features, features);
    if weights.probes > 0.0 {
        let e = probe_loss(grid, weights.probes, &mut grads);
        terms.probes += e.value;
        weighted += e.weighted;
    }

    let psnr = if count > 0 {
        psnr_from_mse(sq_err / count as f64)
    } else {
        f64::NAN
    };
    Ok(Evaluation {
        terms,
        weighted,
        grads,
        frozen: out_frozen,
        psnr,
        stats,
    })
}
