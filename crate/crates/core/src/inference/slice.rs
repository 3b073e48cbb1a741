//! 2D views of a field: a central slice or a maximum projection.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{Vec3, CANONICAL_HALF};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::invalid("axis", format!("`{other}` is not x, y or z"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMode {
    /// The plane through the cube center.
    Mid,
    /// Maximum along the axis.
    MaxProject,
}

impl FromStr for SliceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid" => Ok(SliceMode::Mid),
            "max-project" | "max" => Ok(SliceMode::MaxProject),
            other => Err(Error::invalid("mode", format!("`{other}` is not mid or max-project"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Occupancy,
    Saliency,
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occupancy" => Ok(FieldKind::Occupancy),
            "saliency" => Ok(FieldKind::Saliency),
            other => Err(Error::invalid("field", format!("`{other}` is not occupancy or saliency"))),
        }
    }
}

/// Row-major image; `values[row * width + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl FieldImage {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain (ASCII) PGM with values in `[0, 1]` mapped to `0..=255`.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.values.chunks(self.width) {
            for (i, v) in row.iter().enumerate() {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                let _ = write!(out, "{}{g}", if i == 0 { "" } else { " " });
            }
            out.push('\n');
        }
        out
    }
}

/// Lattice coordinate `i` of `n` spanning the canonical cube.
fn coord(i: usize, n: usize) -> f64 {
    -CANONICAL_HALF + 2.0 * CANONICAL_HALF * i as f64 / (n - 1) as f64
}

/// Samples `field` over the canonical cube. The image's columns run along
/// the first remaining axis and its rows along the second (for `Axis::Y`:
/// columns are x, rows are z).
pub fn slice_field(
    field: &mut dyn FnMut(&[Vec3]) -> Result<Vec<f64>>,
    axis: Axis,
    mode: SliceMode,
    resolution: usize,
) -> Result<FieldImage> {
    if resolution < 2 {
        return Err(Error::invalid("resolution", "must be >= 2"));
    }
    let a = axis.index();
    let (u, v) = ((a + 1) % 3, (a + 2) % 3);
    let (col, row) = (u.min(v), u.max(v));
    let depths: Vec<f64> = match mode {
        SliceMode::Mid => vec![0.0],
        SliceMode::MaxProject => (0..resolution).map(|i| coord(i, resolution)).collect(),
    };
    let mut values = vec![f64::NEG_INFINITY; resolution * resolution];
    let mut queries = Vec::with_capacity(resolution * resolution);
    for &d in &depths {
        queries.clear();
        for r in 0..resolution {
            for c in 0..resolution {
                let mut p = Vec3::zeros();
                p[a] = d;
                p[col] = coord(c, resolution);
                p[row] = coord(r, resolution);
                queries.push(p);
            }
        }
        let got = field(&queries)?;
        for (m, g) in values.iter_mut().zip(got) {
            *m = m.max(g);
        }
    }
    Ok(FieldImage {
        width: resolution,
        height: resolution,
        values,
    })
}
