//! Dense pairwise match fields: non-max-suppression sampling, bilinear flow
//! lookup, bidirectional (cycle) verification, and the on-disk formats for
//! both dense fields and sampled matches.

use std::io::{BufRead, Read, Write};

use thiserror::Error;

use crate::geometry::Pixel;
use crate::tracks::ImageId;

#[derive(Debug, Error)]
pub enum MatchError {
    /// A lookup fell outside the field's pixel grid.
    #[error("query ({x}, {y}) outside field of size {width}x{height}")]
    OutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    /// Forward and backward fields do not cover the same ordered pair.
    #[error("fields cover ({a_fwd}->{b_fwd}) and ({a_bwd}->{b_bwd}), not an inverse pair")]
    PairMismatch { a_fwd: ImageId, b_fwd: ImageId, a_bwd: ImageId, b_bwd: ImageId },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed match file: {0}")]
    Malformed(String),
}

/// A dense per-pixel correspondence field from image A to image B.
///
/// One record per integer pixel of A: the sub-pixel target in B and a
/// confidence in `[0, 1]`. Stored row-major with three `f32` channels
/// `(xb, yb, conf)`.
#[derive(Debug, Clone)]
pub struct MatchField {
    pub image_a: ImageId,
    pub image_b: ImageId,
    pub width: u32,
    pub height: u32,
    data: Vec<f32>,
}

impl MatchField {
    /// An all-zero-confidence field.
    pub fn new(image_a: ImageId, image_b: ImageId, width: u32, height: u32) -> Self {
        Self { image_a, image_b, width, height, data: vec![0.0; (width * height * 3) as usize] }
    }

    pub fn from_raw(
        image_a: ImageId,
        image_b: ImageId,
        width: u32,
        height: u32,
        data: Vec<f32>,
    ) -> Result<Self, MatchError> {
        if data.len() != (width * height * 3) as usize {
            return Err(MatchError::Malformed(format!(
                "flow buffer holds {} floats, expected {}",
                data.len(),
                width * height * 3
            )));
        }
        Ok(Self { image_a, image_b, width, height, data })
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * 3) as usize
    }

    pub fn set(&mut self, x: u32, y: u32, target: Pixel, confidence: f32) {
        let i = self.idx(x, y);
        self.data[i] = target.x as f32;
        self.data[i + 1] = target.y as f32;
        self.data[i + 2] = confidence;
    }

    pub fn target(&self, x: u32, y: u32) -> Pixel {
        let i = self.idx(x, y);
        Pixel::new(self.data[i] as f64, self.data[i + 1] as f64)
    }

    pub fn confidence(&self, x: u32, y: u32) -> f32 {
        self.data[self.idx(x, y) + 2]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

/// One verified or sampled correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseMatch {
    pub a: Pixel,
    pub b: Pixel,
    pub confidence: f64,
}

/// Sparse matches for one ordered image pair.
#[derive(Debug, Clone)]
pub struct SparseMatchSet {
    pub image_a: ImageId,
    pub image_b: ImageId,
    pub matches: Vec<SparseMatch>,
}

/// Samples a dense field by non-max suppression on confidence.
///
/// A pixel is retained when its confidence exceeds `min_confidence` and no
/// pixel already retained lies within Euclidean distance `radius`. Candidates
/// are visited in `(confidence desc, row, col)` order, which makes the result
/// independent of storage order and resolves confidence ties toward the
/// lexicographically first pixel.
pub fn nms_sample(field: &MatchField, radius: u32, min_confidence: f64) -> SparseMatchSet {
    assert!(radius >= 1, "nms radius must be at least one pixel");
    let mut candidates: Vec<(f32, u32, u32)> = Vec::new();
    for y in 0..field.height {
        for x in 0..field.width {
            let c = field.confidence(x, y);
            if (c as f64) > min_confidence {
                candidates.push((c, y, x));
            }
        }
    }
    candidates.sort_by(|l, r| {
        r.0.partial_cmp(&l.0).expect("confidences are finite").then(l.1.cmp(&r.1)).then(l.2.cmp(&r.2))
    });

    let mut kept = vec![false; (field.width * field.height) as usize];
    let mut matches = Vec::new();
    let r2 = (radius * radius) as i64;
    for (conf, y, x) in candidates {
        let mut suppressed = false;
        let y0 = y.saturating_sub(radius);
        let y1 = (y + radius).min(field.height - 1);
        let x0 = x.saturating_sub(radius);
        let x1 = (x + radius).min(field.width - 1);
        'scan: for ny in y0..=y1 {
            for nx in x0..=x1 {
                let dx = nx as i64 - x as i64;
                let dy = ny as i64 - y as i64;
                if dx * dx + dy * dy <= r2 && kept[(ny * field.width + nx) as usize] {
                    suppressed = true;
                    break 'scan;
                }
            }
        }
        if !suppressed {
            kept[(y * field.width + x) as usize] = true;
            matches.push(SparseMatch {
                a: Pixel::new(x as f64, y as f64),
                b: field.target(x, y),
                confidence: conf as f64,
            });
        }
    }
    // Stable output order regardless of confidence ranking.
    matches.sort_by(|l, r| {
        l.a.y.partial_cmp(&r.a.y).expect("pixel grid coordinates").then(
            l.a.x.partial_cmp(&r.a.x).expect("pixel grid coordinates"),
        )
    });
    SparseMatchSet { image_a: field.image_a, image_b: field.image_b, matches }
}

/// Bilinear interpolation of the flow stored at the four integer pixels
/// around `p`. `p` must lie inside `[0, width-1] x [0, height-1]`.
pub fn lookup_bilinear(field: &MatchField, p: &Pixel) -> Result<Pixel, MatchError> {
    let max_x = (field.width - 1) as f64;
    let max_y = (field.height - 1) as f64;
    if !(p.x >= 0.0 && p.x <= max_x && p.y >= 0.0 && p.y <= max_y) {
        return Err(MatchError::OutOfBounds { x: p.x, y: p.y, width: field.width, height: field.height });
    }
    let x0 = p.x.floor() as u32;
    let y0 = p.y.floor() as u32;
    let x1 = (x0 + 1).min(field.width - 1);
    let y1 = (y0 + 1).min(field.height - 1);
    let fx = p.x - x0 as f64;
    let fy = p.y - y0 as f64;
    let t00 = field.target(x0, y0);
    let t10 = field.target(x1, y0);
    let t01 = field.target(x0, y1);
    let t11 = field.target(x1, y1);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w10 = fx * (1.0 - fy);
    let w01 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    Ok(Pixel::new(
        w00 * t00.x + w10 * t10.x + w01 * t01.x + w11 * t11.x,
        w00 * t00.y + w10 * t10.y + w01 * t01.y + w11 * t11.y,
    ))
}

/// Keeps exactly the sampled matches whose forward-then-backward cycle
/// returns within `eps_p` pixels of the starting pixel.
///
/// Samples whose backward lookup falls outside the backward field are
/// rejected rather than clamped.
pub fn mutual_verify(
    ab: &MatchField,
    ba: &MatchField,
    samples: &SparseMatchSet,
    eps_p: f64,
) -> Result<SparseMatchSet, MatchError> {
    if ab.image_a != ba.image_b || ab.image_b != ba.image_a || samples.image_a != ab.image_a
        || samples.image_b != ab.image_b
    {
        return Err(MatchError::PairMismatch {
            a_fwd: ab.image_a,
            b_fwd: ab.image_b,
            a_bwd: ba.image_a,
            b_bwd: ba.image_b,
        });
    }
    let matches = samples
        .matches
        .iter()
        .filter(|m| match lookup_bilinear(ba, &m.b) {
            Ok(back) => back.distance(&m.a) <= eps_p,
            Err(_) => false,
        })
        .copied()
        .collect();
    Ok(SparseMatchSet { image_a: samples.image_a, image_b: samples.image_b, matches })
}

const DENSE_MAGIC: &[u8; 4] = b"DMF1";

/// Writes a dense field: 16-byte header (`DMF1`, width, height, channels as
/// little-endian u32) followed by row-major little-endian f32 data.
pub fn write_dense_field<W: Write>(field: &MatchField, mut w: W) -> Result<(), MatchError> {
    w.write_all(DENSE_MAGIC)?;
    w.write_all(&field.width.to_le_bytes())?;
    w.write_all(&field.height.to_le_bytes())?;
    w.write_all(&3u32.to_le_bytes())?;
    for v in &field.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dense field written by [`write_dense_field`]. The image pair is
/// carried by the file name, not the file, so the caller supplies it.
pub fn read_dense_field<R: Read>(
    mut r: R,
    image_a: ImageId,
    image_b: ImageId,
) -> Result<MatchField, MatchError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != DENSE_MAGIC {
        return Err(MatchError::Malformed("bad magic, expected DMF1".into()));
    }
    let width = u32::from_le_bytes(header[4..8].try_into().expect("fixed slice"));
    let height = u32::from_le_bytes(header[8..12].try_into().expect("fixed slice"));
    let channels = u32::from_le_bytes(header[12..16].try_into().expect("fixed slice"));
    if channels != 3 {
        return Err(MatchError::Malformed(format!("expected 3 channels, found {channels}")));
    }
    let n = (width as usize) * (height as usize) * 3;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")))
        .collect();
    MatchField::from_raw(image_a, image_b, width, height, data)
}

/// Writes sampled matches as line-delimited text: a `#match-v1` header naming
/// the pair and the A-image size, then one `xa ya xb yb conf` record per line.
pub fn write_match_set<W: Write>(
    set: &SparseMatchSet,
    width_a: u32,
    height_a: u32,
    mut w: W,
) -> Result<(), MatchError> {
    writeln!(w, "#match-v1 {} {} {} {}", set.image_a, set.image_b, width_a, height_a)?;
    for m in &set.matches {
        writeln!(w, "{} {} {} {} {}", m.a.x, m.a.y, m.b.x, m.b.y, m.confidence)?;
    }
    Ok(())
}

/// Reads a match file written by [`write_match_set`]; returns the set and the
/// A-image size recorded in the header.
pub fn read_match_set<R: BufRead>(r: R) -> Result<(SparseMatchSet, u32, u32), MatchError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| MatchError::Malformed("empty match file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "#match-v1" {
        return Err(MatchError::Malformed(format!("bad header line: {header}")));
    }
    let parse_id = |s: &str| {
        s.parse::<u32>().map_err(|_| MatchError::Malformed(format!("bad header field: {s}")))
    };
    let image_a = parse_id(fields[1])?;
    let image_b = parse_id(fields[2])?;
    let width_a = parse_id(fields[3])?;
    let height_a = parse_id(fields[4])?;
    let mut matches = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() != 5 {
            return Err(MatchError::Malformed(format!("bad record: {line}")));
        }
        let mut nums = [0.0f64; 5];
        for (slot, s) in nums.iter_mut().zip(&v) {
            *slot = s
                .parse::<f64>()
                .map_err(|_| MatchError::Malformed(format!("bad number {s} in: {line}")))?;
        }
        matches.push(SparseMatch {
            a: Pixel::new(nums[0], nums[1]),
            b: Pixel::new(nums[2], nums[3]),
            confidence: nums[4],
        });
    }
    Ok((SparseMatchSet { image_a, image_b, matches }, width_a, height_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn field_with(confs: &[(u32, u32, f32)], w: u32, h: u32) -> MatchField {
        let mut f = MatchField::new(1, 2, w, h);
        for &(x, y, c) in confs {
            f.set(x, y, Pixel::new(x as f64, y as f64), c);
        }
        f
    }

    /// Brute-force greedy NMS over all pixels with the stated visit order.
    fn nms_oracle(field: &MatchField, radius: u32, min_conf: f64) -> Vec<(u32, u32)> {
        let mut cand: Vec<(f32, u32, u32)> = Vec::new();
        for y in 0..field.height {
            for x in 0..field.width {
                if (field.confidence(x, y) as f64) > min_conf {
                    cand.push((field.confidence(x, y), y, x));
                }
            }
        }
        cand.sort_by(|l, r| r.0.partial_cmp(&l.0).unwrap().then(l.1.cmp(&r.1)).then(l.2.cmp(&r.2)));
        let mut kept: Vec<(u32, u32)> = Vec::new();
        for (_, y, x) in cand {
            let clash = kept.iter().any(|&(ky, kx)| {
                let dy = ky as i64 - y as i64;
                let dx = kx as i64 - x as i64;
                dx * dx + dy * dy <= (radius * radius) as i64
            });
            if !clash {
                kept.push((y, x));
            }
        }
        kept.sort();
        kept
    }

    #[test]
    fn nms_single_peak() {
        let mut f = MatchField::new(1, 2, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                f.set(x, y, Pixel::new(0.0, 0.0), 0.1);
            }
        }
        f.set(8, 8, Pixel::new(1.0, 1.0), 0.9);
        let s = nms_sample(&f, 4, 0.0);
        // The peak is retained; everything within radius 4 is suppressed and
        // the remaining corners survive.
        assert!(s
            .matches
            .iter()
            .any(|m| m.a == Pixel::new(8.0, 8.0) && m.confidence == 0.9f32 as f64));
        let got: Vec<(u32, u32)> =
            s.matches.iter().map(|m| (m.a.y as u32, m.a.x as u32)).collect();
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(sorted, nms_oracle(&f, 4, 0.0));
    }

    #[test]
    fn nms_uniform_field_matches_greedy_oracle() {
        let mut f = MatchField::new(1, 2, 12, 9);
        for y in 0..9 {
            for x in 0..12 {
                f.set(x, y, Pixel::new(0.0, 0.0), 0.5);
            }
        }
        let s = nms_sample(&f, 2, 0.0);
        let mut got: Vec<(u32, u32)> =
            s.matches.iter().map(|m| (m.a.y as u32, m.a.x as u32)).collect();
        got.sort();
        assert_eq!(got, nms_oracle(&f, 2, 0.0));
    }

    #[test]
    fn nms_all_zero_confidence_is_empty() {
        let f = MatchField::new(1, 2, 8, 8);
        assert!(nms_sample(&f, 4, 0.0).matches.is_empty());
    }

    #[test]
    fn nms_order_independent_of_storage() {
        // Same confidences, different target payloads: retained set is a
        // function of confidence alone.
        let f1 = field_with(&[(2, 2, 0.5), (5, 2, 0.5), (2, 6, 0.7)], 10, 10);
        let mut f2 = f1.clone();
        f2.set(2, 2, Pixel::new(9.0, 9.0), 0.5);
        let a: Vec<_> = nms_sample(&f1, 2, 0.0).matches.iter().map(|m| m.a).collect();
        let b: Vec<_> = nms_sample(&f2, 2, 0.0).matches.iter().map(|m| m.a).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_at_integer_node() {
        let mut f = MatchField::new(1, 2, 4, 4);
        f.set(2, 1, Pixel::new(7.25, 3.5), 1.0);
        let t = lookup_bilinear(&f, &Pixel::new(2.0, 1.0)).unwrap();
        assert_relative_eq!(t.x, 7.25);
        assert_relative_eq!(t.y, 3.5);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut f = MatchField::new(1, 2, 4, 4);
        f.set(0, 0, Pixel::new(0.0, 0.0), 1.0);
        f.set(1, 0, Pixel::new(2.0, 0.0), 1.0);
        let t = lookup_bilinear(&f, &Pixel::new(0.5, 0.0)).unwrap();
        assert_relative_eq!(t.x, 1.0);
        assert_relative_eq!(t.y, 0.0);
    }

    #[test]
    fn bilinear_matches_four_corner_oracle() {
        let mut f = MatchField::new(1, 2, 8, 8);
        let mut state = 3u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for y in 0..8 {
            for x in 0..8 {
                f.set(x, y, Pixel::new(rnd() * 10.0, rnd() * 10.0), 1.0);
            }
        }
        for _ in 0..50 {
            let px = rnd() * 6.9;
            let py = rnd() * 6.9;
            let got = lookup_bilinear(&f, &Pixel::new(px, py)).unwrap();
            // Independent four-corner weighted sum.
            let (x0, y0) = (px.floor() as u32, py.floor() as u32);
            let (ax, ay) = (px - x0 as f64, py - y0 as f64);
            let mut ex = 0.0;
            let mut ey = 0.0;
            for (dx, dy, w) in [
                (0, 0, (1.0 - ax) * (1.0 - ay)),
                (1, 0, ax * (1.0 - ay)),
                (0, 1, (1.0 - ax) * ay),
                (1, 1, ax * ay),
            ] {
                let t = f.target(x0 + dx, y0 + dy);
                ex += w * t.x;
                ey += w * t.y;
            }
            assert_relative_eq!(got.x, ex, epsilon = 1e-12);
            assert_relative_eq!(got.y, ey, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_out_of_bounds() {
        let f = MatchField::new(1, 2, 4, 4);
        assert!(matches!(
            lookup_bilinear(&f, &Pixel::new(-0.1, 1.0)),
            Err(MatchError::OutOfBounds { .. })
        ));
        assert!(matches!(
            lookup_bilinear(&f, &Pixel::new(3.5, 1.0)),
            Err(MatchError::OutOfBounds { .. })
        ));
    }

    /// Exact-inverse flow pair on a grid: A->B is a pure translation, B->A
    /// undoes it. Confidence is zeroed where the shifted target would leave
    /// the grid, so every sampled match has an in-bounds cycle.
    fn inverse_pair(shift: f64) -> (MatchField, MatchField) {
        let (w, h) = (16u32, 16u32);
        let mut ab = MatchField::new(1, 2, w, h);
        let mut ba = MatchField::new(2, 1, w, h);
        for y in 0..h {
            for x in 0..w {
                let fwd = x as f64 + shift;
                let conf_fwd = if (0.0..=(w - 1) as f64).contains(&fwd) { 1.0 } else { 0.0 };
                let bwd = (x as f64 - shift).max(-1.0);
                ab.set(x, y, Pixel::new(fwd, y as f64), conf_fwd);
                ba.set(x, y, Pixel::new(bwd, y as f64), 1.0);
            }
        }
        (ab, ba)
    }

    #[test]
    fn mutual_verify_exact_inverse_keeps_all() {
        let (ab, ba) = inverse_pair(2.0);
        let samples = nms_sample(&ab, 2, 0.0);
        assert!(!samples.matches.is_empty());
        let kept = mutual_verify(&ab, &ba, &samples, 0.0).unwrap();
        assert_eq!(kept.matches.len(), samples.matches.len());
    }

    #[test]
    fn mutual_verify_uniform_offset_rejects_all() {
        let (ab, mut ba) = inverse_pair(2.0);
        for y in 0..16 {
            for x in 0..16 {
                let t = ba.target(x, y);
                ba.set(x, y, Pixel::new(t.x + 5.0, t.y), 1.0);
            }
        }
        let samples = nms_sample(&ab, 2, 0.0);
        let kept = mutual_verify(&ab, &ba, &samples, 3.0).unwrap();
        assert!(kept.matches.is_empty());
    }

    #[test]
    fn mutual_verify_matches_cycle_distance_oracle() {
        let (ab, mut ba) = inverse_pair(1.0);
        // Corrupt a known subset of backward cells by per-cell offsets.
        let mut state = 17u64;
        let mut rnd = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for y in 0..16 {
            for x in 0..16 {
                if rnd() < 0.3 {
                    let t = ba.target(x, y);
                    ba.set(x, y, Pixel::new(t.x + 4.0 + rnd(), t.y + rnd()), 1.0);
                }
            }
        }
        let samples = nms_sample(&ab, 2, 0.0);
        let eps = 3.0;
        let kept = mutual_verify(&ab, &ba, &samples, eps).unwrap();
        // Oracle: precompute the cycle distance per sample and threshold it.
        let expected: Vec<SparseMatch> = samples
            .matches
            .iter()
            .filter(|m| match lookup_bilinear(&ba, &m.b) {
                Ok(back) => back.distance(&m.a) <= eps,
                Err(_) => false,
            })
            .copied()
            .collect();
        assert_eq!(kept.matches.len(), expected.len());
        for (k, e) in kept.matches.iter().zip(&expected) {
            assert_eq!(k.a, e.a);
        }
        // Subset and idempotence.
        assert!(kept.matches.len() <= samples.matches.len());
        let again = mutual_verify(&ab, &ba, &kept, eps).unwrap();
        assert_eq!(again.matches.len(), kept.matches.len());
    }

    #[test]
    fn mutual_verify_pair_mismatch() {
        let (ab, _) = inverse_pair(1.0);
        let (other, _) = inverse_pair(1.0);
        let mut wrong = other;
        wrong.image_a = 3;
        wrong.image_b = 1;
        let samples = nms_sample(&ab, 2, 0.0);
        assert!(matches!(
            mutual_verify(&ab, &wrong, &samples, 3.0),
            Err(MatchError::PairMismatch { .. })
        ));
    }

    #[test]
    fn dense_field_round_trip() {
        let mut f = MatchField::new(4, 9, 5, 3);
        f.set(2, 1, Pixel::new(1.5, 2.25), 0.75);
        let mut buf = Vec::new();
        write_dense_field(&f, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"DMF1");
        assert_eq!(buf.len(), 16 + 5 * 3 * 3 * 4);
        let back = read_dense_field(&buf[..], 4, 9).unwrap();
        assert_eq!(back.raw(), f.raw());
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
    }

    proptest::proptest! {
        /// Verification output is a subset of its input and verifying twice
        /// changes nothing, for arbitrary backward fields.
        #[test]
        fn mutual_verify_subset_and_idempotent(
            cells in proptest::collection::vec((0.0f64..15.0, 0.0f64..15.0), 64),
            eps in 0.0f64..6.0,
        ) {
            let (ab, mut ba) = inverse_pair(1.0);
            for (i, (tx, ty)) in cells.iter().enumerate() {
                let (x, y) = ((i % 8) as u32, (i / 8) as u32);
                ba.set(x * 2, y * 2, Pixel::new(*tx, *ty), 1.0);
            }
            let samples = nms_sample(&ab, 2, 0.0);
            let kept = mutual_verify(&ab, &ba, &samples, eps).unwrap();
            proptest::prop_assert!(kept.matches.len() <= samples.matches.len());
            for m in &kept.matches {
                proptest::prop_assert!(samples.matches.contains(m));
            }
            let again = mutual_verify(&ab, &ba, &kept, eps).unwrap();
            proptest::prop_assert_eq!(&again.matches, &kept.matches);
        }

        /// The retained NMS set depends only on confidences, never on flow
        /// payloads.
        #[test]
        fn nms_ignores_flow_payload(
            confs in proptest::collection::vec(0.0f32..1.0, 36),
            flows in proptest::collection::vec((-5.0f64..20.0, -5.0f64..20.0), 36),
        ) {
            let mut f1 = MatchField::new(1, 2, 6, 6);
            let mut f2 = MatchField::new(1, 2, 6, 6);
            for (i, (&c, &(fx, fy))) in confs.iter().zip(&flows).enumerate() {
                let (x, y) = ((i % 6) as u32, (i / 6) as u32);
                f1.set(x, y, Pixel::new(0.0, 0.0), c);
                f2.set(x, y, Pixel::new(fx, fy), c);
            }
            let a: Vec<_> = nms_sample(&f1, 2, 0.0).matches.iter().map(|m| m.a).collect();
            let b: Vec<_> = nms_sample(&f2, 2, 0.0).matches.iter().map(|m| m.a).collect();
            proptest::prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn match_set_round_trip() {
        let set = SparseMatchSet {
            image_a: 1,
            image_b: 2,
            matches: vec![
                SparseMatch { a: Pixel::new(3.0, 4.0), b: Pixel::new(5.125, 6.0625), confidence: 0.5 },
                SparseMatch { a: Pixel::new(7.0, 8.0), b: Pixel::new(9.0, 10.0), confidence: 1.0 },
            ],
        };
        let mut buf = Vec::new();
        write_match_set(&set, 640, 480, &mut buf).unwrap();
        let (back, w, h) = read_match_set(&buf[..]).unwrap();
        assert_eq!((w, h), (640, 480));
        assert_eq!(back.image_a, 1);
        assert_eq!(back.image_b, 2);
        assert_eq!(back.matches, set.matches);
    }
}
