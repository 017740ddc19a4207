//! Point cloud container and the ASCII `.xyz` file format.
//!
//! Files hold one `x y z` triple per line; blank lines and `#` comments are
//! skipped. Non-finite coordinates are rejected on read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain(
                "point cloud must hold at least one point".into(),
            ));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain(format!("non-finite point {p:?}")));
        }
        Ok(Self { points })
    }

    /// The empty cloud. Most consumers reject it with a domain error.
    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Dimension(format!(
                "{} values is not a list of triples",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn translated(&self, v: Point) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                .collect(),
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Componentwise (min, max) corners.
    pub fn bounds(&self) -> Option<(Point, Point)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(mut lo, mut hi), p| {
                    for k in 0..3 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                    (lo, hi)
                }),
        )
    }

    pub fn parse_xyz(text: &str, origin: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                msg: format!("line {}: {msg}", lineno + 1),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 values, found {}",
                    fields.len()
                )));
            }
            let mut p = [0.0; 3];
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| parse_err(format!("`{f}` is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value `{f}`")));
                }
                p[k] = v;
            }
            points.push(p);
        }
        if points.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                msg: "no points".into(),
            });
        }
        Ok(Self { points })
    }

    pub fn read_xyz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_xyz(&text, &path.display().to_string())
    }

    /// Serialises with Rust's shortest round-trip float formatting, so a
    /// write/read cycle is lossless.
    pub fn to_xyz_string(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 40);
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        s
    }

    pub fn write_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_xyz_string()).map_err(|e| Error::io(path, e))
    }
}
