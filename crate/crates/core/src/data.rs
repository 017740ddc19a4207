//! Synthetic two-domain completion data.
//!
//! Five primitive categories are sampled uniformly over their surfaces to
//! produce complete clouds. A [`DomainSpec`] renders the observed partial
//! cloud: density skew, dropout, Gaussian noise and a half-space crop, then
//! resampling back to a fixed size. Source and target domains differ only in
//! their `DomainSpec`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::chamfer;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Box,
    Cylinder,
    SphereCap,
    LBracket,
    TableLike,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Box,
        Category::Cylinder,
        Category::SphereCap,
        Category::LBracket,
        Category::TableLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::SphereCap => "sphere-cap",
            Category::LBracket => "l-bracket",
            Category::TableLike => "table-like",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub category: Category,
    pub n_points: usize,
    pub seed: u64,
}

/// How a domain observes a shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    /// Per-coordinate Gaussian noise (same units as the shape).
    pub noise_sigma: f64,
    /// Keep probability ∝ `exp(density_bias · (p − centroid))`.
    pub density_bias: [f64; 3],
    pub dropout_ratio: f64,
    /// Fraction of points kept by the half-space crop, drawn uniformly
    /// from this range per sample. `[1, 1]` disables cropping.
    pub crop_keep: [f64; 2],
}

impl DomainSpec {
    /// Clean, mildly occluded observations.
    pub fn source_default() -> Self {
        Self {
            noise_sigma: 0.0,
            density_bias: [0.0; 3],
            dropout_ratio: 0.0,
            crop_keep: [0.6, 0.8],
        }
    }

    /// Noisy, skewed, sparser and more heavily occluded observations.
    pub fn target_default() -> Self {
        Self {
            noise_sigma: 0.03,
            density_bias: [0.0, 2.5, 0.0],
            dropout_ratio: 0.3,
            crop_keep: [0.35, 0.55],
        }
    }

    /// No perturbation and no crop.
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            density_bias: [0.0; 3],
            dropout_ratio: 0.0,
            crop_keep: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite()
            && (0.0..1.0).contains(&self.dropout_ratio)
            && self.density_bias.iter().all(|v| v.is_finite())
            && 0.0 < self.crop_keep[0]
            && self.crop_keep[0] <= self.crop_keep[1]
            && self.crop_keep[1] <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid domain spec {self:?}")))
        }
    }

    pub fn echo(&self) -> String {
        format!(
            "{};{}:{}:{};{};{}:{}",
            self.noise_sigma,
            self.density_bias[0],
            self.density_bias[1],
            self.density_bias[2],
            self.dropout_ratio,
            self.crop_keep[0],
            self.crop_keep[1]
        )
    }
}

/// Axis-aligned box surface with area-proportional face choice.
fn sample_box(center: Point, half: Point, rng: &mut SplitMix64) -> Point {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut r = rng.next_f64() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if r < *a {
            axis = k;
            break;
        }
        r -= a;
    }
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if k == axis {
            if rng.next_f64() < 0.5 {
                -half[k]
            } else {
                half[k]
            }
        } else {
            rng.uniform(-half[k], half[k])
        };
        p[k] += center[k];
    }
    p
}

fn box_area(half: Point) -> f64 {
    8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
}

/// Samples from a union of box surfaces weighted by area.
fn sample_boxes(boxes: &[(Point, Point)], rng: &mut SplitMix64) -> Point {
    let total: f64 = boxes.iter().map(|(_, h)| box_area(*h)).sum();
    let mut r = rng.next_f64() * total;
    for (c, h) in boxes {
        let a = box_area(*h);
        if r < a {
            return sample_box(*c, *h, rng);
        }
        r -= a;
    }
    let (c, h) = boxes[boxes.len() - 1];
    sample_box(c, h, rng)
}

/// Uniform surface samples of one randomly dimensioned shape. All points
/// lie in `[-1, 1]³`.
pub fn sample_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let mut rng = SplitMix64::new(spec.seed);
    let n = spec.n_points;
    let points: Vec<Point> = match spec.category {
        Category::Box => {
            let half = [
                rng.uniform(0.3, 0.9),
                rng.uniform(0.3, 0.9),
                rng.uniform(0.3, 0.9),
            ];
            (0..n)
                .map(|_| sample_box([0.0; 3], half, &mut rng))
                .collect()
        }
        Category::Cylinder => {
            let r = rng.uniform(0.3, 0.8);
            let h = rng.uniform(0.4, 0.95);
            let side = 2.0 * std::f64::consts::PI * r * 2.0 * h;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            (0..n)
                .map(|_| {
                    let th = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                    if rng.next_f64() * (side + caps) < side {
                        [r * th.cos(), rng.uniform(-h, h), r * th.sin()]
                    } else {
                        let rr = r * rng.next_f64().sqrt();
                        let y = if rng.next_f64() < 0.5 { -h } else { h };
                        [rr * th.cos(), y, rr * th.sin()]
                    }
                })
                .collect()
        }
        Category::SphereCap => {
            let r = rng.uniform(0.5, 0.95);
            let cos_max = rng.uniform(-0.6, 0.3);
            // cap spans y ∈ [r·cos_max, r]; recentre vertically
            let shift = -0.5 * r * (1.0 + cos_max);
            (0..n)
                .map(|_| {
                    let y = rng.uniform(cos_max, 1.0);
                    let th = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                    let s = (1.0 - y * y).max(0.0).sqrt();
                    [r * s * th.cos(), r * y + shift, r * s * th.sin()]
                })
                .collect()
        }
        Category::LBracket => {
            let len = rng.uniform(0.6, 0.95);
            let t = rng.uniform(0.08, 0.2);
            let w = rng.uniform(0.3, 0.8);
            let boxes = [
                ([0.0, -len + t, 0.0], [len, t, w]),
                ([-len + t, t, 0.0], [t, len - t, w]),
            ];
            (0..n).map(|_| sample_boxes(&boxes, &mut rng)).collect()
        }
        Category::TableLike => {
            let hw = rng.uniform(0.5, 0.95);
            let hd = rng.uniform(0.4, 0.9);
            let top = rng.uniform(0.04, 0.1);
            let leg = rng.uniform(0.04, 0.09);
            let height = rng.uniform(0.6, 0.95);
            let top_y = height - top;
            let leg_half = (height - 2.0 * top + height) / 2.0;
            let leg_cy = -height + leg_half;
            let mut boxes = vec![([0.0, top_y, 0.0], [hw, top, hd])];
            for sx in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    boxes.push((
                        [sx * (hw - leg), leg_cy, sz * (hd - leg)],
                        [leg, leg_half, leg],
                    ));
                }
            }
            (0..n).map(|_| sample_boxes(&boxes, &mut rng)).collect()
        }
    };
    PointCloud::new(
        points
            .into_iter()
            .map(|p| p.map(|v| v.clamp(-1.0, 1.0)))
            .collect(),
    )
}

/// Resample to exactly `n` points: a random subset when there are enough,
/// otherwise every point plus random duplicates.
pub fn resample(points: &[Point], n: usize, rng: &mut SplitMix64) -> Vec<Point> {
    let m = points.len();
    let mut idx: Vec<usize> = (0..m).collect();
    if m >= n {
        rng.shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
    } else {
        for _ in m..n {
            idx.push(rng.below(m));
        }
        idx.sort_unstable();
    }
    idx.into_iter().map(|i| points[i]).collect()
}

/// Density skew, dropout and noise; no crop.
fn perturb(complete: &PointCloud, dom: &DomainSpec, rng: &mut SplitMix64) -> Vec<Point> {
    let c = complete.centroid();
    let score = |p: &Point| {
        (0..3)
            .map(|k| dom.density_bias[k] * (p[k] - c[k]))
            .sum::<f64>()
    };
    let max_score = complete
        .points()
        .iter()
        .map(score)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::with_capacity(complete.len());
    for p in complete.points() {
        let keep = (score(p) - max_score).exp() * (1.0 - dom.dropout_ratio);
        if rng.next_f64() >= keep {
            continue;
        }
        let mut q = *p;
        if dom.noise_sigma > 0.0 {
            q.iter_mut()
                .for_each(|v| *v += dom.noise_sigma * rng.normal());
        }
        out.push(q);
    }
    out
}

fn random_direction(rng: &mut SplitMix64) -> Point {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Keeps the `keep` fraction of points lying lowest along `dir`.
fn half_space_crop(points: &[Point], dir: Point, keep: f64) -> Vec<Point> {
    if keep >= 1.0 {
        return points.to_vec();
    }
    let mut proj: Vec<f64> = points
        .iter()
        .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let cut_idx = ((keep * points.len() as f64).ceil() as usize).clamp(1, points.len()) - 1;
    let cut = sorted.get(cut_idx).copied().unwrap_or(f64::INFINITY);
    points
        .iter()
        .zip(proj.drain(..))
        .filter(|(_, s)| *s <= cut)
        .map(|(p, _)| *p)
        .collect()
}

const MAX_CROP_ATTEMPTS: usize = 10;

/// Observed partial cloud of one domain for a complete cloud.
pub fn observe(
    complete: &PointCloud,
    dom: &DomainSpec,
    n_points: usize,
    seed: u64,
) -> Result<PointCloud> {
    dom.validate()?;
    let mut rng = SplitMix64::new(seed);
    let kept = perturb(complete, dom, &mut rng);
    let dir = random_direction(&mut rng);
    let mut keep = rng.uniform(dom.crop_keep[0], dom.crop_keep[1]);
    for _ in 0..MAX_CROP_ATTEMPTS {
        let cropped = half_space_crop(&kept, dir, keep);
        if !cropped.is_empty() {
            return PointCloud::new(resample(&cropped, n_points, &mut rng));
        }
        keep = (keep * 1.5).min(1.0);
    }
    Err(Error::Domain(format!(
        "crop left no points after {MAX_CROP_ATTEMPTS} attempts (seed {seed})"
    )))
}

/// `(partial, complete)` for one shape under one domain.
pub fn gen_pair(spec: &ShapeSpec, dom: &DomainSpec) -> Result<(PointCloud, PointCloud)> {
    let complete = sample_shape(spec)?;
    let partial = observe(
        &complete,
        dom,
        spec.n_points,
        derive_seed(spec.seed, 0x0b5e),
    )?;
    Ok((partial, complete))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub category: Category,
    pub partial: PointCloud,
    /// Absent for unlabeled target training data.
    pub complete: Option<PointCloud>,
    pub seed: u64,
}

/// One split of a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_complete(&self) -> bool {
        self.samples.iter().any(|s| s.complete.is_some())
    }

    pub fn by_category(&self) -> BTreeMap<Category, Vec<&Sample>> {
        let mut m: BTreeMap<Category, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            m.entry(s.category).or_default().push(s);
        }
        m
    }

    /// Writes `<dir>/<category>/<id>.xyz` (and `<id>.gt.xyz` when labeled).
    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            let cat_dir = dir.join(s.category.name());
            fs::create_dir_all(&cat_dir).map_err(|e| Error::io(&cat_dir, e))?;
            s.partial.write_xyz(cat_dir.join(format!("{}.xyz", s.id)))?;
            if let Some(c) = &s.complete {
                c.write_xyz(cat_dir.join(format!("{}.gt.xyz", s.id)))?;
            }
        }
        Ok(())
    }

    /// Reads a split written by [`Dataset::write`]; ids sorted per category.
    pub fn read(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut samples = Vec::new();
        let mut cats: Vec<(Category, std::path::PathBuf)> = Vec::new();
        for e in entries {
            let e = e.map_err(|err| Error::io(dir, err))?;
            let path = e.path();
            if !path.is_dir() {
                continue;
            }
            let name = e.file_name().to_string_lossy().to_string();
            match name.parse::<Category>() {
                Ok(c) => cats.push((c, path)),
                Err(_) => log::warn!("skipping unknown category directory {}", path.display()),
            }
        }
        cats.sort();
        for (category, path) in cats {
            let mut ids: Vec<String> = fs::read_dir(&path)
                .map_err(|e| Error::io(&path, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().to_string())
                .filter(|n| n.ends_with(".xyz") && !n.ends_with(".gt.xyz"))
                .map(|n| n.trim_end_matches(".xyz").to_string())
                .collect();
            ids.sort();
            for id in ids {
                let partial = PointCloud::read_xyz(path.join(format!("{id}.xyz")))?;
                let gt_path = path.join(format!("{id}.gt.xyz"));
                let complete = if gt_path.exists() {
                    Some(PointCloud::read_xyz(&gt_path)?)
                } else {
                    None
                };
                samples.push(Sample {
                    id,
                    category,
                    partial,
                    complete,
                    seed: 0,
                });
            }
        }
        Ok(Self { samples })
    }
}

/// The three splits of an adaptation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDatasets {
    pub source: Dataset,
    /// Partial clouds only.
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

pub const SPLIT_SOURCE: &str = "source";
pub const SPLIT_TARGET_TRAIN: &str = "target-train";
pub const SPLIT_TARGET_EVAL: &str = "target-eval";

fn build_split(
    tag: u64,
    n_per_category: usize,
    n_points: usize,
    dom: &DomainSpec,
    seed: u64,
    keep_gt: bool,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(n_per_category * Category::ALL.len());
    for (ci, &category) in Category::ALL.iter().enumerate() {
        for i in 0..n_per_category {
            let s = derive_seed(seed, (tag << 40) | ((ci as u64) << 24) | i as u64);
            let (partial, complete) = gen_pair(
                &ShapeSpec {
                    category,
                    n_points,
                    seed: s,
                },
                dom,
            )?;
            samples.push(Sample {
                id: format!("{}-{i:05}", category.name()),
                category,
                partial,
                complete: keep_gt.then_some(complete),
                seed: s,
            });
        }
    }
    Ok(Dataset { samples })
}

pub fn make_domain_datasets(
    n_per_category: usize,
    n_points: usize,
    source: &DomainSpec,
    target: &DomainSpec,
    seed: u64,
) -> Result<DomainDatasets> {
    source.validate()?;
    target.validate()?;
    Ok(DomainDatasets {
        source: build_split(1, n_per_category, n_points, source, seed, true)?,
        target_train: build_split(2, n_per_category, n_points, target, seed, false)?,
        target_eval: build_split(3, n_per_category, n_points, target, seed, true)?,
    })
}

impl DomainDatasets {
    /// Writes all splits under `root` plus `manifest.csv`.
    pub fn write(
        &self,
        root: &Path,
        seed: u64,
        source: &DomainSpec,
        target: &DomainSpec,
    ) -> Result<()> {
        let mut manifest =
            String::from("split,category,id,sample_seed,has_gt,domain_seed,domain_spec\n");
        for (split, ds, dom) in [
            (SPLIT_SOURCE, &self.source, source),
            (SPLIT_TARGET_TRAIN, &self.target_train, target),
            (SPLIT_TARGET_EVAL, &self.target_eval, target),
        ] {
            ds.write(&root.join(split))?;
            for s in &ds.samples {
                manifest.push_str(&format!(
                    "{split},{},{},{},{},{seed},{}\n",
                    s.category,
                    s.id,
                    s.seed,
                    s.complete.is_some() as u8,
                    dom.echo()
                ));
            }
        }
        let path = root.join("manifest.csv");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

/// Domain shift versus within-domain sampling variability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStats {
    /// Mean CD between source and target renders of the same shape.
    pub inter: f64,
    /// Mean CD between two independent source renders of the same shape.
    pub intra: f64,
}

/// Renders `n_shapes` shapes per category without cropping and compares
/// renders across and within domains.
pub fn measure_domain_gap(
    source: &DomainSpec,
    target: &DomainSpec,
    n_shapes: usize,
    n_points: usize,
    seed: u64,
) -> Result<GapStats> {
    let uncropped = |d: &DomainSpec| DomainSpec {
        crop_keep: [1.0, 1.0],
        ..*d
    };
    let (src, tgt) = (uncropped(source), uncropped(target));
    let (mut inter, mut intra, mut count) = (0.0, 0.0, 0usize);
    for &category in &Category::ALL {
        for i in 0..n_shapes {
            let s = derive_seed(seed, (category as u64) << 32 | i as u64);
            let base = sample_shape(&ShapeSpec {
                category,
                n_points,
                seed: s,
            })?;
            let resampled = resample_same_shape(category, n_points, s)?;
            let a = observe(&base, &src, n_points, derive_seed(s, 1))?;
            let b = observe(&resampled, &src, n_points, derive_seed(s, 2))?;
            let t = observe(&resampled, &tgt, n_points, derive_seed(s, 3))?;
            intra += chamfer(&a, &b)?;
            inter += chamfer(&a, &t)?;
            count += 1;
        }
    }
    Ok(GapStats {
        inter: inter / count as f64,
        intra: intra / count as f64,
    })
}

/// A second, independent surface sampling of the shape generated from
/// `seed` (same dimensions, different points).
fn resample_same_shape(category: Category, n_points: usize, seed: u64) -> Result<PointCloud> {
    let dense = sample_shape(&ShapeSpec {
        category,
        n_points: n_points * 2,
        seed,
    })?;
    // dimensions are drawn before any point, so the second half is a fresh
    // sampling of the same shape
    PointCloud::new(dense.points()[n_points..].to_vec())
}
