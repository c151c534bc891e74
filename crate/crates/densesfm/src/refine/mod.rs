//! Multi-view kernelized track refinement.
//!
//! Each track is split into a reference view (median depth) and query views.
//! Feature patches around every keypoint feed two paths: a Gaussian-process
//! regression that embeds the reference features into query coordinate
//! encodings, and a decoder producing, per query view, a distribution over a
//! `C x C` anchor grid for every pixel of a `w x w` search window on the
//! reference, plus a confidence map over that window. Summed confidences pick
//! the refined reference pixel; channel softmax and a probability-weighted
//! anchor average regress each query keypoint to sub-pixel precision.
//!
//! The learned backbone, multi-view transformer and decoder weights live
//! behind [`FeatureProvider`] and [`Decoder`]; the reference configuration
//! uses an identity feature transform and the deterministic
//! [`CorrelationDecoder`].

mod decoder;
mod gp;
mod loss;
mod regress;
mod tensor;

pub use decoder::CorrelationDecoder;
pub use gp::{cosine_kernel, gp_posterior_mean, normalized_grid, positional_encoding};
pub use loss::{confidence_loss, confidence_loss_gradient};
pub use regress::{regress_track, TrackRegression};
pub use tensor::{read_tensor, write_tensor, FeatureTensor, TensorFeatureProvider};

use thiserror::Error;

use crate::geometry::Pixel;
use crate::parallel;
use crate::tracks::{self, ImageId, PointId, Provenance, SceneModel, Track};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel system is singular; supply a positive noise variance")]
    SingularSystem,
    #[error("confidence {0} is not positive")]
    NonPositiveConfidence(f64),
    #[error("feature provider: {0}")]
    Provider(String),
    #[error("decoder: {0}")]
    Decoder(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A `p x p x c` feature map extracted around a keypoint, sampled every
/// `stride` image pixels.
#[derive(Debug, Clone)]
pub struct FeaturePatch {
    pub view: ImageId,
    /// Side length `p`, odd.
    pub size: usize,
    pub channels: usize,
    /// Keypoint the patch is centered on, in image pixels.
    pub center: Pixel,
    /// Image pixels between adjacent patch samples.
    pub stride: f64,
    data: Vec<f64>,
}

impl FeaturePatch {
    pub fn new(
        view: ImageId,
        size: usize,
        channels: usize,
        center: Pixel,
        stride: f64,
        data: Vec<f64>,
    ) -> Result<Self, RefineError> {
        if size.is_multiple_of(2) || size == 0 {
            return Err(RefineError::ShapeMismatch(format!("patch size {size} must be odd")));
        }
        if data.len() != size * size * channels {
            return Err(RefineError::ShapeMismatch(format!(
                "patch buffer holds {} values, expected {}",
                data.len(),
                size * size * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RefineError::ShapeMismatch("patch contains non-finite values".into()));
        }
        Ok(Self { view, size, channels, center, stride, data })
    }

    /// Feature vector at an integer grid position.
    #[inline]
    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.size + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Clamped bilinear sample at fractional grid coordinates.
    pub fn sample_bilinear(&self, row: f64, col: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        let max = (self.size - 1) as f64;
        let r = row.clamp(0.0, max);
        let c = col.clamp(0.0, max);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.size - 1);
        let c1 = (c0 + 1).min(self.size - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let f00 = self.feature(r0, c0);
        let f01 = self.feature(r0, c1);
        let f10 = self.feature(r1, c0);
        let f11 = self.feature(r1, c1);
        for ch in 0..self.channels {
            out[ch] = (1.0 - fr) * ((1.0 - fc) * f00[ch] + fc * f01[ch])
                + fr * ((1.0 - fc) * f10[ch] + fc * f11[ch]);
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// The Gaussian-process posterior mean: per reference pixel, a regressed
/// Fourier encoding of the corresponding query-patch coordinate.
#[derive(Debug, Clone)]
pub struct CoordEmbedding {
    /// Patch side length, matching the reference patch.
    pub size: usize,
    /// Encoding dimension `4 * num_freqs`.
    pub dim: usize,
    data: Vec<f64>,
}

impl CoordEmbedding {
    pub fn new(size: usize, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), size * size * dim);
        Self { size, dim, data }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.size + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Decoder output for one query view: anchor-grid logits per window pixel
/// and a non-negative confidence per window pixel.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    /// Anchor grid side `C`.
    pub anchors: usize,
    /// Search window side `w`.
    pub window: usize,
    /// `C^2 x w x w` logits, laid out `[anchor][row][col]`.
    pub prob: Vec<f64>,
    /// `w x w` confidence scores, row-major.
    pub conf: Vec<f64>,
}

impl MatchOutput {
    #[inline]
    pub fn logit(&self, anchor: usize, row: usize, col: usize) -> f64 {
        self.prob[(anchor * self.window + row) * self.window + col]
    }

    #[inline]
    pub fn confidence(&self, row: usize, col: usize) -> f64 {
        self.conf[row * self.window + col]
    }
}

/// Produces feature patches; deterministic for fixed inputs and safe to call
/// from concurrent workers.
pub trait FeatureProvider: Sync {
    fn patch(
        &self,
        image: ImageId,
        center: Pixel,
        size: usize,
        stride: f64,
    ) -> Result<FeaturePatch, RefineError>;
}

/// Turns (transformed) reference and query patches plus the coordinate
/// embedding into per-view match output. Learned decoders own any feature
/// transformation internally; the reference configuration is the identity.
pub trait Decoder: Sync {
    fn decode(
        &self,
        reference: &FeaturePatch,
        query: &FeaturePatch,
        embedding: &CoordEmbedding,
        anchors: usize,
        window: usize,
    ) -> Result<MatchOutput, RefineError>;
}

/// Knobs of the refinement stage. Defaults follow the pipeline-wide presets:
/// p = 15, w = 7, C = 7, alpha = 20.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    /// Patch side `p`, odd.
    pub patch_size: usize,
    /// Image pixels between patch samples.
    pub patch_stride: f64,
    /// Search window side `w` on the reference view.
    pub window: usize,
    /// Anchor grid side `C`.
    pub anchors: usize,
    /// Side, in pixels, of the square the anchors tile around a query keypoint.
    pub anchor_extent: f64,
    /// Kernel temperature tau.
    pub tau: f64,
    /// Kernel normalization epsilon.
    pub kernel_eps: f64,
    /// Observation noise variance added to the kernel diagonal (sigma_n^2).
    pub noise_var: f64,
    /// Fourier encoding frequencies per axis.
    pub num_freqs: usize,
    /// Decoder logit scale.
    pub sharpness: f64,
    /// Confidence-loss balance term, exposed for training tooling.
    pub loss_alpha: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            patch_size: 15,
            patch_stride: 1.0,
            window: 7,
            anchors: 7,
            anchor_extent: 7.0,
            tau: 10.0,
            kernel_eps: 1e-6,
            noise_var: 0.1,
            num_freqs: 8,
            sharpness: 40.0,
            loss_alpha: 20.0,
        }
    }
}

/// Per-run refinement accounting.
#[derive(Debug, Clone, Default)]
pub struct RefineOutcome {
    pub refined_tracks: usize,
    /// Tracks left untouched, with the reason.
    pub skipped: Vec<(PointId, String)>,
}

/// Refines every track with at least two observations; shorter tracks and
/// tracks whose provider or decoder fails are left untouched and recorded.
///
/// The reference keypoint moves to the best window-grid pixel (grid
/// resolution); query keypoints move by the regressed sub-pixel offsets
/// around their prior positions. Track topology is never changed.
pub fn refine_tracks(
    model: &SceneModel,
    provider: &dyn FeatureProvider,
    decoder: &dyn Decoder,
    cfg: &RefineConfig,
) -> (SceneModel, RefineOutcome) {
    let items: Vec<(PointId, &Track)> = model.tracks.iter().map(|(&id, t)| (id, t)).collect();
    let results = parallel::map_ordered(&items, |&(pid, track)| {
        (pid, refine_one_track(model, provider, decoder, cfg, track))
    });

    let mut out = model.clone();
    let mut outcome = RefineOutcome::default();
    for (pid, result) in results {
        match result {
            Ok(Some(track)) => {
                out.tracks.insert(pid, track);
                outcome.refined_tracks += 1;
            }
            Ok(None) => {} // guard: too short, left untouched
            Err(e) => {
                log::warn!("track {pid} not refined: {e}");
                outcome.skipped.push((pid, e.to_string()));
            }
        }
    }
    (out, outcome)
}

fn refine_one_track(
    model: &SceneModel,
    provider: &dyn FeatureProvider,
    decoder: &dyn Decoder,
    cfg: &RefineConfig,
    track: &Track,
) -> Result<Option<Track>, RefineError> {
    if track.len() < 2 {
        return Ok(None);
    }
    let reference = tracks::select_reference_view(track, model)
        .map_err(|e| RefineError::Provider(format!("reference selection: {e}")))?;
    let ref_obs = track
        .observations
        .iter()
        .find(|o| o.image == reference)
        .expect("reference comes from the track");
    let ref_patch = provider.patch(reference, ref_obs.pixel, cfg.patch_size, cfg.patch_stride)?;

    let queries: Vec<&crate::tracks::Observation> =
        track.observations.iter().filter(|o| o.image != reference).collect();
    let mut outputs = Vec::with_capacity(queries.len());
    for q in &queries {
        let q_patch = provider.patch(q.image, q.pixel, cfg.patch_size, cfg.patch_stride)?;
        let emb = gp_posterior_mean(
            &ref_patch,
            &q_patch,
            cfg.noise_var,
            cfg.tau,
            cfg.kernel_eps,
            cfg.num_freqs,
        )?;
        outputs.push(decoder.decode(&ref_patch, &q_patch, &emb, cfg.anchors, cfg.window)?);
    }

    let regression = regress_track(&outputs, cfg.anchor_extent)?;

    let mut refined = track.clone();
    refined.reference = Some(reference);
    let clamp = |image: ImageId, p: Pixel| {
        let k = model.cameras[&image].intrinsics;
        Pixel::new(p.x.clamp(0.0, (k.width - 1) as f64), p.y.clamp(0.0, (k.height - 1) as f64))
    };
    let mut query_iter = regression.queries.iter();
    for obs in refined.observations.iter_mut() {
        let new_pixel = if obs.image == reference {
            Pixel::new(
                obs.pixel.x + regression.reference.0 as f64 * cfg.patch_stride,
                obs.pixel.y + regression.reference.1 as f64 * cfg.patch_stride,
            )
        } else {
            let (dx, dy) = *query_iter.next().expect("one offset per query view");
            Pixel::new(obs.pixel.x + dx, obs.pixel.y + dy)
        };
        obs.pixel = clamp(obs.image, new_pixel);
        obs.provenance = Provenance::Refined;
    }
    Ok(Some(refined))
}
