//! Confidence-weighted regression loss: the mean over query observations of
//! `s * |p - p_gt| - alpha * log(s)`, the objective a learned decoder trains
//! its confidence head against. Exposed with its analytic gradient so the
//! training contract stays checkable without any training loop.

use crate::geometry::Pixel;

use super::RefineError;

/// One prediction: refined pixel, ground-truth pixel, confidence `s > 0`.
pub type ConfidencePrediction = (Pixel, Pixel, f64);

/// Evaluates the loss; fails on any non-positive confidence.
pub fn confidence_loss(preds: &[ConfidencePrediction], alpha: f64) -> Result<f64, RefineError> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(p, gt, s) in preds {
        if s <= 0.0 {
            return Err(RefineError::NonPositiveConfidence(s));
        }
        total += s * p.distance(&gt) - alpha * s.ln();
    }
    Ok(total / preds.len() as f64)
}

/// Analytic gradient of [`confidence_loss`] per prediction:
/// `(d/dp, d/ds)`, each already divided by the prediction count.
///
/// The position gradient is undefined at `p == p_gt` (the norm is not
/// differentiable there); that direction is returned as zero.
pub fn confidence_loss_gradient(
    preds: &[ConfidencePrediction],
    alpha: f64,
) -> Result<Vec<([f64; 2], f64)>, RefineError> {
    let n = preds.len() as f64;
    preds
        .iter()
        .map(|&(p, gt, s)| {
            if s <= 0.0 {
                return Err(RefineError::NonPositiveConfidence(s));
            }
            let d = p.distance(&gt);
            let dp = if d > 0.0 {
                [s * (p.x - gt.x) / d / n, s * (p.y - gt.y) / d / n]
            } else {
                [0.0, 0.0]
            };
            let ds = (d - alpha / s) / n;
            Ok((dp, ds))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_confidence_drops_log_term() {
        let preds = [(Pixel::new(2.0, 0.0), Pixel::new(0.0, 0.0), 1.0)];
        assert_relative_eq!(confidence_loss(&preds, 20.0).unwrap(), 2.0);
    }

    #[test]
    fn e_confidence_zero_error() {
        let preds = [(Pixel::new(5.0, 5.0), Pixel::new(5.0, 5.0), std::f64::consts::E)];
        assert_relative_eq!(confidence_loss(&preds, 20.0).unwrap(), -20.0, epsilon = 1e-12);
    }

    #[test]
    fn non_positive_confidence_rejected() {
        let preds = [(Pixel::new(1.0, 0.0), Pixel::new(0.0, 0.0), 0.0)];
        assert!(matches!(
            confidence_loss(&preds, 20.0),
            Err(RefineError::NonPositiveConfidence(_))
        ));
    }

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut state = 13u64;
        for _ in 0..50 {
            let preds: Vec<ConfidencePrediction> = (0..3)
                .map(|_| {
                    (
                        Pixel::new(lcg(&mut state) * 10.0, lcg(&mut state) * 10.0),
                        Pixel::new(lcg(&mut state) * 10.0, lcg(&mut state) * 10.0),
                        0.2 + lcg(&mut state) * 5.0,
                    )
                })
                .collect();
            let alpha = 20.0;
            let grads = confidence_loss_gradient(&preds, alpha).unwrap();
            let h = 1e-6;
            for (i, &(dp, ds)) in grads.iter().enumerate() {
                for axis in 0..2 {
                    let mut plus = preds.clone();
                    let mut minus = preds.clone();
                    if axis == 0 {
                        plus[i].0.x += h;
                        minus[i].0.x -= h;
                    } else {
                        plus[i].0.y += h;
                        minus[i].0.y -= h;
                    }
                    let fd = (confidence_loss(&plus, alpha).unwrap()
                        - confidence_loss(&minus, alpha).unwrap())
                        / (2.0 * h);
                    let rel = (dp[axis] - fd).abs() / fd.abs().max(1e-9);
                    assert!(rel < 1e-5, "position gradient rel err {rel}");
                }
                let mut plus = preds.clone();
                let mut minus = preds.clone();
                plus[i].2 += h;
                minus[i].2 -= h;
                let fd = (confidence_loss(&plus, alpha).unwrap()
                    - confidence_loss(&minus, alpha).unwrap())
                    / (2.0 * h);
                let rel = (ds - fd).abs() / fd.abs().max(1e-9);
                assert!(rel < 1e-5, "confidence gradient rel err {rel}");
            }
        }
    }

    #[test]
    fn loss_minimized_at_alpha_over_error() {
        // Holding the error d fixed, the loss over s has its minimum at
        // s = alpha / d.
        let alpha = 20.0;
        let d = 4.0;
        let gt = Pixel::new(0.0, 0.0);
        let p = Pixel::new(d, 0.0);
        let best = alpha / d;
        let at = |s: f64| confidence_loss(&[(p, gt, s)], alpha).unwrap();
        let l_best = at(best);
        for s in [best * 0.5, best * 0.9, best * 1.1, best * 2.0] {
            assert!(at(s) > l_best, "loss at s={s} not above minimum");
        }
        // And the derivative vanishes there.
        let g = confidence_loss_gradient(&[(p, gt, best)], alpha).unwrap();
        assert!(g[0].1.abs() < 1e-12);
    }
}
