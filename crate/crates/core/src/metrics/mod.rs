//! Completion quality metrics: Chamfer distance (CD), unidirectional Chamfer
//! (UCD) and unidirectional Hausdorff (UHD).
//!
//! Each metric has an accelerated path backed by [`nn::Grid`] and an O(N·M)
//! brute-force twin used as the reference in tests.

pub mod nn;

use std::fmt;
use std::str::FromStr;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use nn::{nearest_neighbors, nearest_neighbors_brute, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Cd,
    Ucd,
    Uhd,
}

impl Metric {
    /// Self-describing variant name written into every CSV.
    pub fn variant(self) -> &'static str {
        match self {
            Metric::Cd => "cd-l2-sum",
            Metric::Ucd => "ucd-sq-partial2pred",
            Metric::Uhd => "uhd-l2-partial2pred",
        }
    }

    /// Report-time multiplier (10⁴ for CD/UCD, 10² for UHD).
    pub fn scale(self) -> f64 {
        match self {
            Metric::Cd | Metric::Ucd => 1e4,
            Metric::Uhd => 1e2,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cd => "cd",
            Metric::Ucd => "ucd",
            Metric::Uhd => "uhd",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(Metric::Cd),
            "ucd" => Ok(Metric::Ucd),
            "uhd" => Ok(Metric::Uhd),
            other => Err(Error::Usage(format!(
                "unknown metric `{other}` (cd, ucd, uhd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub metric: Metric,
    pub value: f64,
    pub scale_applied: f64,
}

impl MetricResult {
    pub fn new(metric: Metric, value: f64) -> Self {
        Self {
            metric,
            value,
            scale_applied: metric.scale(),
        }
    }

    pub fn scaled(&self) -> f64 {
        self.value * self.scale_applied
    }
}

fn nonempty(c: &PointCloud, what: &str) -> Result<()> {
    if c.is_empty() {
        Err(Error::Domain(format!("{what} cloud is empty")))
    } else {
        Ok(())
    }
}

fn mean_sq(nn: &[(usize, f64)]) -> f64 {
    nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
}

fn max_dist(nn: &[(usize, f64)]) -> f64 {
    nn.iter().map(|(_, d)| d.sqrt()).fold(0.0, f64::max)
}

type NnFn = fn(&[Point], &[Point]) -> Vec<(usize, f64)>;

fn chamfer_with(p: &PointCloud, q: &PointCloud, nn: NnFn) -> Result<f64> {
    nonempty(p, "first")?;
    nonempty(q, "second")?;
    Ok(mean_sq(&nn(p.points(), q.points())) + mean_sq(&nn(q.points(), p.points())))
}

/// `(1/|P|) Σ_p min_q ‖p−q‖² + (1/|Q|) Σ_q min_p ‖q−p‖²`
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    chamfer_with(p, q, nearest_neighbors)
}

pub fn chamfer_brute(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    chamfer_with(p, q, nearest_neighbors_brute)
}

/// Mean squared distance from each partial point to its nearest prediction.
pub fn ucd(pred: &PointCloud, partial: &PointCloud) -> Result<f64> {
    nonempty(pred, "prediction")?;
    nonempty(partial, "partial")?;
    Ok(mean_sq(&nearest_neighbors(partial.points(), pred.points())))
}

pub fn ucd_brute(pred: &PointCloud, partial: &PointCloud) -> Result<f64> {
    nonempty(pred, "prediction")?;
    nonempty(partial, "partial")?;
    Ok(mean_sq(&nearest_neighbors_brute(
        partial.points(),
        pred.points(),
    )))
}

/// Largest (non-squared) distance from a partial point to the prediction.
pub fn uhd(pred: &PointCloud, partial: &PointCloud) -> Result<f64> {
    nonempty(pred, "prediction")?;
    nonempty(partial, "partial")?;
    Ok(max_dist(&nearest_neighbors(
        partial.points(),
        pred.points(),
    )))
}

pub fn uhd_brute(pred: &PointCloud, partial: &PointCloud) -> Result<f64> {
    nonempty(pred, "prediction")?;
    nonempty(partial, "partial")?;
    Ok(max_dist(&nearest_neighbors_brute(
        partial.points(),
        pred.points(),
    )))
}

/// Dispatch by metric. `reference` is the ground truth for CD and the
/// partial observation for UCD/UHD.
pub fn evaluate_metric(
    metric: Metric,
    pred: &PointCloud,
    reference: &PointCloud,
) -> Result<MetricResult> {
    let value = match metric {
        Metric::Cd => chamfer(pred, reference)?,
        Metric::Ucd => ucd(pred, reference)?,
        Metric::Uhd => uhd(pred, reference)?,
    };
    Ok(MetricResult::new(metric, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn pc(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random(rng: &mut SplitMix64, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_cases() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(ucd(&a, &b).unwrap(), 1.0);
        assert_eq!(uhd(&a, &b).unwrap(), 1.0);
        let partial = pc(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(uhd(&a, &partial).unwrap(), 3.0);
        assert_eq!(chamfer(&partial, &partial).unwrap(), 0.0);
    }

    #[test]
    fn subset_is_zero_for_unidirectional() {
        let mut rng = SplitMix64::new(5);
        let pred = random(&mut rng, 40);
        let partial = PointCloud::new(pred.points()[..10].to_vec()).unwrap();
        assert_eq!(ucd(&pred, &partial).unwrap(), 0.0);
        assert_eq!(uhd(&pred, &partial).unwrap(), 0.0);
    }

    #[test]
    fn random_50_vs_60_matches_brute_force() {
        let mut rng = SplitMix64::new(99);
        let p = random(&mut rng, 50);
        let q = random(&mut rng, 60);
        let fast = chamfer(&p, &q).unwrap();
        let slow = chamfer_brute(&p, &q).unwrap();
        assert!((fast - slow).abs() < 1e-12);
        assert_eq!(fast, chamfer(&q, &p).unwrap());
        assert_ne!(ucd(&p, &q).unwrap(), ucd(&q, &p).unwrap());
        assert_ne!(uhd(&p, &q).unwrap(), uhd(&q, &p).unwrap());
    }

    #[test]
    fn translation_invariance() {
        let mut rng = SplitMix64::new(8);
        let p = random(&mut rng, 30);
        let q = random(&mut rng, 25);
        let v = [3.5, -2.0, 0.25];
        let shift = |c: &PointCloud| c.translated(v);
        let d0 = chamfer(&p, &q).unwrap();
        let d1 = chamfer(&shift(&p), &shift(&q)).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn uhd_dominates_every_nn_distance() {
        let mut rng = SplitMix64::new(17);
        let pred = random(&mut rng, 64);
        let partial = random(&mut rng, 32);
        let h = uhd(&pred, &partial).unwrap();
        for q in partial.points() {
            let d = pred
                .points()
                .iter()
                .map(|p| nn::sq_dist(p, q).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(h >= d);
        }
    }

    #[test]
    fn empty_clouds_are_rejected() {
        let a = pc(&[[0.0; 3]]);
        let empty = PointCloud::empty();
        assert!(matches!(chamfer(&a, &empty), Err(Error::Domain(_))));
        assert!(matches!(ucd(&empty, &a), Err(Error::Domain(_))));
        assert!(matches!(uhd(&a, &empty), Err(Error::Domain(_))));
    }
}
