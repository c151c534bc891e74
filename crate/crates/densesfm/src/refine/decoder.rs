//! Deterministic reference decoder.
//!
//! For each pixel of the `w x w` search window on the reference patch, the
//! anchor-grid logits are scaled cosine correlations between that pixel's
//! feature and the query patch sampled at the anchor offsets around the
//! query keypoint. Confidence is how far the center-anchor logit rises above
//! the anchor mean: the center anchor sits exactly on the query's current
//! keypoint, so the score is high precisely for the reference pixel the
//! query view already agrees with, the quantity a learned confidence head
//! is trained to predict. Uninformative (uniform) logits give zero.
//!
//! Learned decoders replace this whole struct behind the [`Decoder`] trait
//! and are free to consume the coordinate embedding; here it participates
//! through shape validation so a provider/GP mismatch cannot slip through.

use super::{CoordEmbedding, Decoder, FeaturePatch, MatchOutput, RefineError};

/// Offset, in pixels, of anchor `i` on a `count`-wide axis tiling a square
/// of side `extent`.
pub(super) fn anchor_offset(i: usize, count: usize, extent: f64) -> f64 {
    if count <= 1 {
        0.0
    } else {
        extent * (i as f64 / (count - 1) as f64 - 0.5)
    }
}

fn cosine_similarity(fa: &[f64], fb: &[f64], eps: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in fa.iter().zip(fb) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    dot / (na * nb + eps).sqrt()
}

/// Correlation-based [`Decoder`] with an identity feature transform.
#[derive(Debug, Clone)]
pub struct CorrelationDecoder {
    /// Logit scale applied to the raw correlations.
    pub sharpness: f64,
    /// Side of the square the anchor grid tiles, in pixels.
    pub anchor_extent: f64,
    /// Normalization guard for zero feature vectors.
    pub eps: f64,
}

impl CorrelationDecoder {
    pub fn new(sharpness: f64, anchor_extent: f64) -> Self {
        Self { sharpness, anchor_extent, eps: 1e-12 }
    }
}

impl Default for CorrelationDecoder {
    fn default() -> Self {
        Self::new(40.0, 7.0)
    }
}

impl Decoder for CorrelationDecoder {
    fn decode(
        &self,
        reference: &FeaturePatch,
        query: &FeaturePatch,
        embedding: &CoordEmbedding,
        anchors: usize,
        window: usize,
    ) -> Result<MatchOutput, RefineError> {
        if reference.size != query.size || reference.channels != query.channels {
            return Err(RefineError::ShapeMismatch(format!(
                "reference {}^2 x{} vs query {}^2 x{}",
                reference.size, reference.channels, query.size, query.channels
            )));
        }
        if embedding.size != reference.size {
            return Err(RefineError::ShapeMismatch(format!(
                "embedding size {} does not match patch size {}",
                embedding.size, reference.size
            )));
        }
        if window.is_multiple_of(2) || window > reference.size {
            return Err(RefineError::ShapeMismatch(format!(
                "window {window} must be odd and fit inside patch size {}",
                reference.size
            )));
        }
        if anchors == 0 {
            return Err(RefineError::ShapeMismatch("anchor grid must be non-empty".into()));
        }

        let p = reference.size;
        let half_patch = (p - 1) / 2;
        let half_window = (window - 1) / 2;
        let a2 = anchors * anchors;
        let mut prob = vec![0.0; a2 * window * window];
        let mut conf = vec![0.0; window * window];
        let mut sampled = vec![0.0; query.channels];

        // Query features at the anchor offsets are shared by every window pixel.
        let mut anchor_features = vec![0.0; a2 * query.channels];
        for ar in 0..anchors {
            let dy = anchor_offset(ar, anchors, self.anchor_extent);
            for ac in 0..anchors {
                let dx = anchor_offset(ac, anchors, self.anchor_extent);
                let row = half_patch as f64 + dy / query.stride;
                let col = half_patch as f64 + dx / query.stride;
                query.sample_bilinear(row, col, &mut sampled);
                let base = (ar * anchors + ac) * query.channels;
                anchor_features[base..base + query.channels].copy_from_slice(&sampled);
            }
        }

        // The anchor grid is centered on the query keypoint; with odd C the
        // middle anchor has offset zero.
        let center_anchor = (anchors / 2) * anchors + anchors / 2;
        for wr in 0..window {
            for wc in 0..window {
                let ref_row = half_patch - half_window + wr;
                let ref_col = half_patch - half_window + wc;
                let f_ref = reference.feature(ref_row, ref_col);
                let mut sum_logit = 0.0;
                for a in 0..a2 {
                    let f_q = &anchor_features[a * query.channels..(a + 1) * query.channels];
                    let logit = self.sharpness * cosine_similarity(f_ref, f_q, self.eps);
                    prob[(a * window + wr) * window + wc] = logit;
                    sum_logit += logit;
                }
                let center_logit = prob[(center_anchor * window + wr) * window + wc];
                conf[wr * window + wc] = (center_logit - sum_logit / a2 as f64).max(0.0);
            }
        }

        Ok(MatchOutput { anchors, window, prob, conf })
    }
}
