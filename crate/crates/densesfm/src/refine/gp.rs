//! The coordinate-embedding path: an exponential cosine-similarity kernel
//! over patch features and the Gaussian-process posterior mean
//! `mu = K_rq (K_qq + sigma_n^2 I)^-1 chi_q`, where `chi_q` stacks Fourier
//! encodings of the query patch's pixel coordinates.

use nalgebra::DMatrix;

use super::{CoordEmbedding, FeaturePatch, RefineError};

/// Fourier positional encoding of a patch coordinate normalized to `[-1, 1]`:
/// `(sin(2^k pi x), cos(2^k pi x), sin(2^k pi y), cos(2^k pi y))` for
/// `k = 0..num_freqs`.
pub fn positional_encoding(x: f64, y: f64, num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * num_freqs);
    for k in 0..num_freqs {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((f * x).sin());
        out.push((f * x).cos());
        out.push((f * y).sin());
        out.push((f * y).cos());
    }
    out
}

/// Patch grid coordinates normalized to `[-1, 1]`, row-major. A single-pixel
/// patch sits at the center `(0, 0)`.
pub fn normalized_grid(size: usize) -> Vec<(f64, f64)> {
    let h = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            if h == 0.0 {
                out.push((0.0, 0.0));
            } else {
                out.push(((col as f64 - h) / h, (row as f64 - h) / h));
            }
        }
    }
    out
}

/// Exponential cosine similarity kernel
/// `exp(-tau) * exp(tau * <fa, fb> / sqrt(<fa, fa><fb, fb> + eps))`.
pub fn cosine_kernel(fa: &[f64], fb: &[f64], tau: f64, eps: f64) -> f64 {
    debug_assert_eq!(fa.len(), fb.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in fa.iter().zip(fb) {
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    (-tau).exp() * (tau * dot / (na * nb + eps).sqrt()).exp()
}

/// Gaussian-process posterior mean conditioning reference features on query
/// features: builds the `p^2 x p^2` kernel matrices from [`cosine_kernel`],
/// solves the noise-regularized system against the stacked query encodings,
/// and returns the result per reference pixel.
///
/// `noise_var` is added to the kernel diagonal (sigma_n squared); with it at
/// zero a rank-deficient kernel matrix reports [`RefineError::SingularSystem`].
pub fn gp_posterior_mean(
    reference: &FeaturePatch,
    query: &FeaturePatch,
    noise_var: f64,
    tau: f64,
    eps: f64,
    num_freqs: usize,
) -> Result<CoordEmbedding, RefineError> {
    if reference.size != query.size || reference.channels != query.channels {
        return Err(RefineError::ShapeMismatch(format!(
            "reference {}x{}x{} vs query {}x{}x{}",
            reference.size,
            reference.size,
            reference.channels,
            query.size,
            query.size,
            query.channels
        )));
    }
    let p = reference.size;
    let n = p * p;
    let e = 4 * num_freqs;

    let coords = normalized_grid(p);
    let mut chi = DMatrix::<f64>::zeros(n, e);
    for (i, &(x, y)) in coords.iter().enumerate() {
        for (j, v) in positional_encoding(x, y, num_freqs).into_iter().enumerate() {
            chi[(i, j)] = v;
        }
    }

    fn feature_at(patch: &FeaturePatch, p: usize, i: usize) -> &[f64] {
        patch.feature(i / p, i % p)
    }
    let mut k_qq = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let fi = feature_at(query, p, i);
        for j in i..n {
            let v = cosine_kernel(fi, feature_at(query, p, j), tau, eps);
            k_qq[(i, j)] = v;
            k_qq[(j, i)] = v;
        }
    }
    for i in 0..n {
        k_qq[(i, i)] += noise_var;
    }

    let solved = match k_qq.clone().cholesky() {
        Some(chol) => chol.solve(&chi),
        None => {
            // The kernel Gram matrix is positive semidefinite; Cholesky only
            // fails when it is numerically singular.
            return Err(RefineError::SingularSystem);
        }
    };

    let mut k_rq = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let fi = feature_at(reference, p, i);
        for j in 0..n {
            k_rq[(i, j)] = cosine_kernel(fi, feature_at(query, p, j), tau, eps);
        }
    }
    let mu = k_rq * solved;

    let mut data = Vec::with_capacity(n * e);
    for i in 0..n {
        for j in 0..e {
            data.push(mu[(i, j)]);
        }
    }
    Ok(CoordEmbedding::new(p, e, data))
}
