//! Regression of refined coordinates from per-view match outputs: the
//! reference pixel is the argmax of the summed confidence maps; each query
//! offset is the channel-softmax probability-weighted average of anchor
//! coordinates at that pixel.

use super::decoder::anchor_offset;
use super::{MatchOutput, RefineError};

/// Refined offsets produced by [`regress_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRegression {
    /// Window-grid offset `(dx, dy)` of the refined reference pixel, in grid
    /// units relative to the window center.
    pub reference: (i32, i32),
    /// Sub-pixel offsets `(dx, dy)` in pixels for each query view, in input
    /// order.
    pub queries: Vec<(f64, f64)>,
}

/// Selects the reference pixel by the highest summed confidence (ties go to
/// the lexicographically first window pixel) and regresses each query view's
/// offset from the softmaxed anchor distribution at that pixel.
pub fn regress_track(
    outputs: &[MatchOutput],
    anchor_extent: f64,
) -> Result<TrackRegression, RefineError> {
    let first = outputs
        .first()
        .ok_or_else(|| RefineError::ShapeMismatch("need at least one query view".into()))?;
    let (window, anchors) = (first.window, first.anchors);
    if outputs.iter().any(|o| o.window != window || o.anchors != anchors) {
        return Err(RefineError::ShapeMismatch("query views disagree on output shape".into()));
    }

    // Reference: argmax over the window of the summed confidence maps,
    // scanning row-major so ties resolve lexicographically.
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for row in 0..window {
        for col in 0..window {
            let total: f64 = outputs.iter().map(|o| o.confidence(row, col)).sum();
            if total > best.2 {
                best = (row, col, total);
            }
        }
    }
    let (ref_row, ref_col, _) = best;
    let half = (window as i32 - 1) / 2;
    let reference = (ref_col as i32 - half, ref_row as i32 - half);

    let a2 = anchors * anchors;
    let mut queries = Vec::with_capacity(outputs.len());
    for out in outputs {
        // Channel softmax at the chosen reference pixel.
        let logits: Vec<f64> = (0..a2).map(|a| out.logit(a, ref_row, ref_col)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut dx = 0.0;
        let mut dy = 0.0;
        for (a, w) in exps.iter().enumerate() {
            let weight = w / total;
            dx += weight * anchor_offset(a % anchors, anchors, anchor_extent);
            dy += weight * anchor_offset(a / anchors, anchors, anchor_extent);
        }
        queries.push((dx, dy));
    }
    Ok(TrackRegression { reference, queries })
}
