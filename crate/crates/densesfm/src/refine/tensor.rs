//! Feature tensor import: a flat binary format (`FPT1` magic, rows, cols,
//! channels as little-endian u32, then row-major little-endian f32 data) so
//! externally computed CNN feature maps can drive the refinement module, and
//! a [`FeatureProvider`] that bilinearly samples patches out of such maps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::geometry::Pixel;
use crate::tracks::ImageId;

use super::{FeaturePatch, FeatureProvider, RefineError};

const TENSOR_MAGIC: &[u8; 4] = b"FPT1";

/// A dense `rows x cols x channels` feature map.
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub rows: u32,
    pub cols: u32,
    pub channels: u32,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(rows: u32, cols: u32, channels: u32, data: Vec<f32>) -> Result<Self, RefineError> {
        if data.len() != (rows * cols * channels) as usize {
            return Err(RefineError::ShapeMismatch(format!(
                "tensor buffer holds {} values, expected {}",
                data.len(),
                rows * cols * channels
            )));
        }
        Ok(Self { rows, cols, channels, data })
    }

    #[inline]
    fn at(&self, row: u32, col: u32, ch: u32) -> f64 {
        self.data[((row * self.cols + col) * self.channels + ch) as usize] as f64
    }

    /// Clamped bilinear sample of all channels at fractional map coordinates.
    fn sample(&self, row: f64, col: f64, out: &mut [f64]) {
        let r = row.clamp(0.0, (self.rows - 1) as f64);
        let c = col.clamp(0.0, (self.cols - 1) as f64);
        let r0 = r.floor() as u32;
        let c0 = c.floor() as u32;
        let r1 = (r0 + 1).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        for ch in 0..self.channels {
            out[ch as usize] = (1.0 - fr)
                * ((1.0 - fc) * self.at(r0, c0, ch) + fc * self.at(r0, c1, ch))
                + fr * ((1.0 - fc) * self.at(r1, c0, ch) + fc * self.at(r1, c1, ch));
        }
    }
}

pub fn write_tensor<W: Write>(tensor: &FeatureTensor, mut w: W) -> Result<(), RefineError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&tensor.rows.to_le_bytes())?;
    w.write_all(&tensor.cols.to_le_bytes())?;
    w.write_all(&tensor.channels.to_le_bytes())?;
    for v in &tensor.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<FeatureTensor, RefineError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != TENSOR_MAGIC {
        return Err(RefineError::ShapeMismatch("bad magic, expected FPT1".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().expect("fixed slice"));
    let cols = u32::from_le_bytes(header[8..12].try_into().expect("fixed slice"));
    let channels = u32::from_le_bytes(header[12..16].try_into().expect("fixed slice"));
    let mut buf = vec![0u8; (rows * cols * channels) as usize * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("fixed chunk")))
        .collect();
    FeatureTensor::new(rows, cols, channels, data)
}

/// Serves patches by bilinearly sampling per-image feature maps.
///
/// `map_stride` is the number of image pixels per feature-map cell (the CNN
/// downsampling factor); image pixel `(x, y)` reads map cell
/// `(y / map_stride, x / map_stride)`.
pub struct TensorFeatureProvider {
    maps: BTreeMap<ImageId, FeatureTensor>,
    map_stride: f64,
}

impl TensorFeatureProvider {
    pub fn new(maps: BTreeMap<ImageId, FeatureTensor>, map_stride: f64) -> Self {
        Self { maps, map_stride }
    }

    /// Loads every `<image_id>.fpt` file in a directory.
    pub fn from_dir(dir: &Path, map_stride: f64) -> Result<Self, RefineError> {
        let mut maps = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("fpt") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let id: ImageId = stem.parse().map_err(|_| {
                RefineError::ShapeMismatch(format!("tensor file {} is not named <image_id>.fpt", path.display()))
            })?;
            maps.insert(id, read_tensor(BufReader::new(File::open(&path)?))?);
        }
        Ok(Self { maps, map_stride })
    }
}

impl FeatureProvider for TensorFeatureProvider {
    fn patch(
        &self,
        image: ImageId,
        center: Pixel,
        size: usize,
        stride: f64,
    ) -> Result<FeaturePatch, RefineError> {
        let map = self
            .maps
            .get(&image)
            .ok_or_else(|| RefineError::Provider(format!("no feature map for image {image}")))?;
        let channels = map.channels as usize;
        let half = (size as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(size * size * channels);
        let mut sample = vec![0.0; channels];
        for row in 0..size {
            for col in 0..size {
                let px = center.x + (col as f64 - half) * stride;
                let py = center.y + (row as f64 - half) * stride;
                map.sample(py / self.map_stride, px / self.map_stride, &mut sample);
                data.extend_from_slice(&sample);
            }
        }
        FeaturePatch::new(image, size, channels, center, stride, data)
    }
}
