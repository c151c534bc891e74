//! Minimal binary little-endian PLY reading and writing: bare point clouds
//! and the Gaussian vertex layout used by [`crate::splatvis`].

use std::io::{BufRead, Write};

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    Float,
    Double,
    Uchar,
}

impl ScalarType {
    fn parse(s: &str) -> Result<Self, PlyError> {
        match s {
            "float" | "float32" => Ok(Self::Float),
            "double" | "float64" => Ok(Self::Double),
            "uchar" | "uint8" => Ok(Self::Uchar),
            other => Err(PlyError::Malformed(format!("unsupported property type {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Self::Float => 4,
            Self::Double => 8,
            Self::Uchar => 1,
        }
    }
}

/// Parsed vertex-element layout of a binary little-endian PLY.
pub struct VertexLayout {
    pub count: usize,
    pub properties: Vec<(String, ScalarType)>,
}

impl VertexLayout {
    pub fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }

    pub fn offset_of(&self, name: &str) -> Option<(usize, ScalarType)> {
        let mut off = 0;
        for (n, t) in &self.properties {
            if n == name {
                return Some((off, *t));
            }
            off += t.size();
        }
        None
    }
}

/// Reads the header of a binary little-endian PLY up to `end_header`.
pub fn read_header<R: BufRead>(r: &mut R) -> Result<VertexLayout, PlyError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(PlyError::Malformed("missing ply magic".into()));
    }
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(PlyError::Malformed("unterminated header".into()));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", fmt, "1.0"] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::Malformed(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| PlyError::Malformed("bad vertex count".into()))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] => {
                if in_vertex {
                    properties.push((name.to_string(), ScalarType::parse(ty)?));
                }
            }
            ["end_header"] => break,
            [] => {}
            _ => return Err(PlyError::Malformed(format!("unexpected header line: {}", line.trim()))),
        }
    }
    Ok(VertexLayout {
        count: count.ok_or_else(|| PlyError::Malformed("no vertex element".into()))?,
        properties,
    })
}

fn read_scalar(buf: &[u8], ty: ScalarType) -> f64 {
    match ty {
        ScalarType::Float => f32::from_le_bytes(buf[..4].try_into().expect("fixed slice")) as f64,
        ScalarType::Double => f64::from_le_bytes(buf[..8].try_into().expect("fixed slice")),
        ScalarType::Uchar => buf[0] as f64,
    }
}

/// Reads all vertices, returning the named properties per vertex in request
/// order. Properties absent from the file raise an error.
pub fn read_vertices<R: BufRead>(r: &mut R, names: &[&str]) -> Result<Vec<Vec<f64>>, PlyError> {
    let layout = read_header(r)?;
    let mut offsets = Vec::with_capacity(names.len());
    for name in names {
        offsets.push(
            layout
                .offset_of(name)
                .ok_or_else(|| PlyError::Malformed(format!("missing property {name}")))?,
        );
    }
    let stride = layout.stride();
    let mut buf = vec![0u8; stride];
    let mut out = Vec::with_capacity(layout.count);
    for _ in 0..layout.count {
        r.read_exact(&mut buf)?;
        out.push(offsets.iter().map(|&(off, ty)| read_scalar(&buf[off..], ty)).collect());
    }
    Ok(out)
}

/// Writes a bare point cloud with double-precision x y z.
pub fn write_point_cloud<W: Write>(points: &[Point3<f64>], mut w: W) -> Result<(), PlyError> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "end_header")?;
    for p in points {
        for v in [p.x, p.y, p.z] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads x y z (float or double) from a PLY point cloud.
pub fn read_point_cloud<R: BufRead>(mut r: R) -> Result<Vec<Point3<f64>>, PlyError> {
    let rows = read_vertices(&mut r, &["x", "y", "z"])?;
    Ok(rows.into_iter().map(|v| Point3::new(v[0], v[1], v[2])).collect())
}
