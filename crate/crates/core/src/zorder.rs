//! Cross-domain patch-level scanning.
//!
//! Source and target clouds are quantised on one shared grid (joint minimum
//! corner, one isotropic scale), serialised along a Z-order curve and cut
//! into `G` contiguous patches of `K` points. Because the grid is shared, the
//! `g`-th patch of either cloud is taken from the same stretch of the curve.

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// Smallest extent used when a cloud is degenerate on every axis.
pub const EXTENT_EPS: f64 = 1e-9;
pub const DEFAULT_BITS: u32 = 10;

/// Shared quantisation frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub c_min: Point,
    /// Grid cells per unit length.
    pub scale: f64,
    pub bits: u32,
}

impl GridParams {
    pub fn max_cell(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    /// Quantised cell of `p`, clamped to the grid.
    pub fn cell(&self, p: &Point) -> [u32; 3] {
        let hi = self.max_cell() as f64;
        let mut c = [0u32; 3];
        for k in 0..3 {
            c[k] = ((p[k] - self.c_min[k]) * self.scale).floor().clamp(0.0, hi) as u32;
        }
        c
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=21).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bits per axis must be in 1..=21, got {bits}"
        )))
    }
}

/// Grid spanning the union of `a` and `b`.
pub fn joint_grid(a: &PointCloud, b: &PointCloud, bits: u32) -> Result<GridParams> {
    check_bits(bits)?;
    let (lo_a, hi_a) = a
        .bounds()
        .ok_or_else(|| Error::Domain("first cloud is empty".into()))?;
    let (lo_b, hi_b) = b
        .bounds()
        .ok_or_else(|| Error::Domain("second cloud is empty".into()))?;
    let mut c_min = [0.0; 3];
    let mut extent: f64 = 0.0;
    for k in 0..3 {
        c_min[k] = lo_a[k].min(lo_b[k]);
        extent = extent.max(hi_a[k].max(hi_b[k]) - c_min[k]);
    }
    let extent = extent.max(EXTENT_EPS);
    Ok(GridParams {
        c_min,
        scale: ((1u64 << bits) - 1) as f64 / extent,
        bits,
    })
}

/// Grid fitted to a single cloud.
pub fn own_grid(c: &PointCloud, bits: u32) -> Result<GridParams> {
    joint_grid(c, c, bits)
}

fn spread3(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Interleaves grid coordinates: bit `i` of x lands on code bit `3i`, y on
/// `3i+1`, z on `3i+2`.
pub fn morton_encode(g: [u32; 3], bits: u32) -> Result<u64> {
    check_bits(bits)?;
    if let Some(v) = g.iter().find(|&&v| (v as u64) >> bits != 0) {
        return Err(Error::Domain(format!(
            "grid coordinate {v} does not fit in {bits} bits"
        )));
    }
    Ok(spread3(g[0]) | spread3(g[1]) << 1 | spread3(g[2]) << 2)
}

/// A cloud ordered along the Z curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedCloud {
    /// Original point indices in curve order.
    pub order: Vec<usize>,
    /// Morton code of each original point.
    pub codes: Vec<u64>,
    pub grid: Vec<[u32; 3]>,
}

impl SerializedCloud {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

pub fn serialize(c: &PointCloud, gp: &GridParams) -> SerializedCloud {
    let grid: Vec<[u32; 3]> = c.points().iter().map(|p| gp.cell(p)).collect();
    let codes: Vec<u64> = grid
        .iter()
        .map(|&g| spread3(g[0]) | spread3(g[1]) << 1 | spread3(g[2]) << 2)
        .collect();
    let mut order: Vec<usize> = (0..c.len()).collect();
    // sort_by_key is stable, so equal codes keep their original order
    order.sort_by_key(|&i| codes[i]);
    SerializedCloud { order, codes, grid }
}

/// `G` patches of `K` points each, cut from a Z-ordered sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `G·K` points, patch-major.
    pub points: Vec<Point>,
    /// Original index of every slot in `points`.
    pub source_index: Vec<usize>,
    /// Morton code of every slot.
    pub codes: Vec<u64>,
    pub centers: Vec<Point>,
    pub g: usize,
    pub k: usize,
}

impl PatchSet {
    pub fn patch(&self, g: usize) -> &[Point] {
        &self.points[g * self.k..(g + 1) * self.k]
    }

    /// Smallest and largest Morton code in patch `g`.
    pub fn code_range(&self, g: usize) -> (u64, u64) {
        let c = &self.codes[g * self.k..(g + 1) * self.k];
        (c[0], c[c.len() - 1])
    }
}

/// Positions into the Z-sorted sequence making up exactly `target` slots.
///
/// Longer sequences are stride-subsampled; shorter ones get extra copies
/// handed out round-robin along the curve. Output stays in curve order.
pub fn resample_positions(n: usize, target: usize) -> Vec<usize> {
    if n >= target {
        (0..target).map(|i| i * n / target).collect()
    } else {
        let mut counts = vec![1usize; n];
        for j in 0..target - n {
            counts[j % n] += 1;
        }
        counts
            .iter()
            .enumerate()
            .flat_map(|(p, &c)| std::iter::repeat(p).take(c))
            .collect()
    }
}

pub fn partition(s: &SerializedCloud, c: &PointCloud, g: usize, k: usize) -> Result<PatchSet> {
    if g == 0 || k == 0 {
        return Err(Error::Config(format!(
            "patch count {g} and size {k} must be positive"
        )));
    }
    if s.is_empty() || s.len() != c.len() {
        return Err(Error::Dimension(format!(
            "serialisation of {} points does not match cloud of {}",
            s.len(),
            c.len()
        )));
    }
    let positions = resample_positions(s.len(), g * k);
    let source_index: Vec<usize> = positions.iter().map(|&p| s.order[p]).collect();
    let points: Vec<Point> = source_index.iter().map(|&i| c.points()[i]).collect();
    let codes = source_index.iter().map(|&i| s.codes[i]).collect();
    let centers = points
        .chunks_exact(k)
        .map(|patch| {
            let mut m = [0.0; 3];
            for p in patch {
                for d in 0..3 {
                    m[d] += p[d];
                }
            }
            m.map(|v| v / k as f64)
        })
        .collect();
    Ok(PatchSet {
        points,
        source_index,
        codes,
        centers,
        g,
        k,
    })
}

/// Shared-grid scan of a source/target pair.
pub fn cdps(
    a: &PointCloud,
    b: &PointCloud,
    g: usize,
    k: usize,
    bits: u32,
) -> Result<(PatchSet, PatchSet, GridParams)> {
    let gp = joint_grid(a, b, bits)?;
    let pa = partition(&serialize(a, &gp), a, g, k)?;
    let pb = partition(&serialize(b, &gp), b, g, k)?;
    Ok((pa, pb, gp))
}

/// Scan of one cloud on its own grid (the non-shared baseline).
pub fn scan_single(c: &PointCloud, g: usize, k: usize, bits: u32) -> Result<PatchSet> {
    let gp = own_grid(c, bits)?;
    partition(&serialize(c, &gp), c, g, k)
}

/// Mean distance between centres of same-index patches.
pub fn mean_center_distance(a: &PatchSet, b: &PatchSet) -> f64 {
    let n = a.centers.len().min(b.centers.len()).max(1);
    a.centers
        .iter()
        .zip(&b.centers)
        .map(|(p, q)| crate::metrics::nn::sq_dist(p, q).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Same-index patch centre distance under the shared grid and under
/// independent per-cloud grids, as `(shared, independent)`.
pub fn paired_center_gap(
    a: &PointCloud,
    b: &PointCloud,
    g: usize,
    k: usize,
    bits: u32,
) -> Result<(f64, f64)> {
    let (pa, pb, _) = cdps(a, b, g, k, bits)?;
    let shared = mean_center_distance(&pa, &pb);
    let independent =
        mean_center_distance(&scan_single(a, g, k, bits)?, &scan_single(b, g, k, bits)?);
    Ok((shared, independent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn naive_interleave(g: [u32; 3], bits: u32) -> u64 {
        let mut code = 0u64;
        for i in 0..bits {
            for (axis, &v) in g.iter().enumerate() {
                code |= (((v >> i) & 1) as u64) << (3 * i + axis as u32);
            }
        }
        code
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut SplitMix64, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn unit_box_grid() {
        let gp = joint_grid(&cloud(&[[0.0; 3]]), &cloud(&[[1.0; 3]]), 10).unwrap();
        assert_eq!(gp.c_min, [0.0; 3]);
        assert_eq!(gp.scale, 1023.0);
    }

    #[test]
    fn joint_min_matches_brute_force() {
        let mut rng = SplitMix64::new(4);
        let a = random_cloud(&mut rng, 20).translated([5.0, 0.0, 0.0]);
        let b = random_cloud(&mut rng, 20);
        let gp = joint_grid(&a, &b, 10).unwrap();
        for k in 0..3 {
            let brute = a
                .points()
                .iter()
                .chain(b.points())
                .map(|p| p[k])
                .fold(f64::INFINITY, f64::min);
            assert_eq!(gp.c_min[k], brute);
        }
        let self_grid = joint_grid(&a, &a, 10).unwrap();
        assert_eq!(self_grid, own_grid(&a, 10).unwrap());
    }

    #[test]
    fn degenerate_cloud_uses_eps_extent() {
        let c = cloud(&[[2.0, 2.0, 2.0]; 4]);
        let gp = own_grid(&c, 10).unwrap();
        assert_eq!(gp.scale, 1023.0 / EXTENT_EPS);
        let s = serialize(&c, &gp);
        assert_eq!(s.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn bits_out_of_range() {
        let c = cloud(&[[0.0; 3]]);
        assert!(matches!(joint_grid(&c, &c, 0), Err(Error::Config(_))));
        assert!(matches!(joint_grid(&c, &c, 22), Err(Error::Config(_))));
    }

    #[test]
    fn morton_small_cases() {
        assert_eq!(morton_encode([0, 0, 0], 10).unwrap(), 0);
        assert_eq!(morton_encode([1, 1, 1], 10).unwrap(), 7);
        assert_eq!(morton_encode([1, 0, 0], 10).unwrap(), 1);
        assert_eq!(morton_encode([0, 1, 0], 10).unwrap(), 2);
        assert_eq!(morton_encode([0, 0, 1], 10).unwrap(), 4);
        assert!(matches!(
            morton_encode([1024, 0, 0], 10),
            Err(Error::Domain(_))
        ));
        let top = (1u32 << 21) - 1;
        assert_eq!(morton_encode([top; 3], 21).unwrap(), (1u64 << 63) - 1);
    }

    #[test]
    fn morton_exhaustive_small_bits() {
        for bits in 1..=4u32 {
            let n = 1u32 << bits;
            for x in 0..n {
                for y in 0..n {
                    for z in 0..n {
                        assert_eq!(
                            morton_encode([x, y, z], bits).unwrap(),
                            naive_interleave([x, y, z], bits)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_point_and_duplicates() {
        let c = cloud(&[[0.3, 0.1, 0.2]]);
        assert_eq!(serialize(&c, &own_grid(&c, 10).unwrap()).order, vec![0]);
        let d = cloud(&[
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ]);
        let s = serialize(&d, &own_grid(&d, 10).unwrap());
        assert_eq!(s.order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn partition_with_k_one_is_z_order() {
        let mut rng = SplitMix64::new(21);
        let c = random_cloud(&mut rng, 12);
        let s = serialize(&c, &own_grid(&c, 10).unwrap());
        let p = partition(&s, &c, 12, 1).unwrap();
        for g in 0..12 {
            assert_eq!(p.patch(g)[0], c.points()[s.order[g]]);
            assert_eq!(p.centers[g], c.points()[s.order[g]]);
        }
    }

    #[test]
    fn identical_points_share_center() {
        let c = cloud(&[[0.5, -1.0, 2.0]; 32]);
        let p = scan_single(&c, 4, 8, 10).unwrap();
        assert!(p.centers.iter().all(|&m| m == [0.5, -1.0, 2.0]));
    }

    #[test]
    fn upsampling_contains_original_multiset() {
        let mut rng = SplitMix64::new(2);
        let c = random_cloud(&mut rng, 100);
        let p = scan_single(&c, 8, 16, 10).unwrap();
        assert_eq!(p.points.len(), 128);
        let mut counts = vec![0usize; 100];
        for &i in &p.source_index {
            counts[i] += 1;
        }
        assert!(counts.iter().all(|&n| n >= 1));
        // the resampled sequence stays Z-sorted
        assert!(p.codes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn downsampling_is_stride_subsample() {
        assert_eq!(resample_positions(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(resample_positions(4, 6), vec![0, 0, 1, 1, 2, 3]);
        assert_eq!(resample_positions(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn partition_rejects_zero_sizes() {
        let c = cloud(&[[0.0; 3]]);
        let s = serialize(&c, &own_grid(&c, 4).unwrap());
        assert!(partition(&s, &c, 0, 1).is_err());
        assert!(partition(&s, &c, 1, 0).is_err());
    }

    #[test]
    fn identical_inputs_give_identical_patches() {
        let mut rng = SplitMix64::new(8);
        let a = random_cloud(&mut rng, 64);
        let (pa, pb, _) = cdps(&a, &a, 8, 8, 10).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn translated_copy_has_bounded_center_offsets() {
        let mut rng = SplitMix64::new(12);
        let a = random_cloud(&mut rng, 128);
        let v = [0.3, -0.2, 0.1];
        let b = a.translated(v);
        let (pa, pb, gp) = cdps(&a, &b, 8, 16, 10).unwrap();
        let (lo, hi) = a.bounds().unwrap();
        let diag = crate::metrics::nn::sq_dist(&lo, &hi).sqrt() + 1.0;
        for (ca, cb) in pa.centers.iter().zip(&pb.centers) {
            assert!(crate::metrics::nn::sq_dist(ca, cb).sqrt() <= diag);
        }
        assert!(gp.scale > 0.0);
    }

    proptest! {
        #[test]
        fn order_is_sorted_permutation(pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..200)) {
            let c = PointCloud::new(pts).unwrap();
            let s = serialize(&c, &own_grid(&c, 10).unwrap());
            let mut sorted = s.order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..c.len()).collect::<Vec<_>>());
            for w in s.order.windows(2) {
                prop_assert!(s.codes[w[0]] < s.codes[w[1]] || (s.codes[w[0]] == s.codes[w[1]] && w[0] < w[1]));
            }
        }

        #[test]
        fn patches_concatenate_to_sorted_sequence(n_patches in 1usize..8, k in 1usize..8, seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let c = random_cloud(&mut rng, n_patches * k);
            let s = serialize(&c, &own_grid(&c, 10).unwrap());
            let p = partition(&s, &c, n_patches, k).unwrap();
            let expected: Vec<Point> = s.order.iter().map(|&i| c.points()[i]).collect();
            let joined: Vec<Point> = (0..n_patches).flat_map(|g| p.patch(g).to_vec()).collect();
            prop_assert_eq!(joined, expected);
        }

        #[test]
        fn shared_frame_codes_ignore_origin_cloud(p in prop::array::uniform3(-1.0f64..1.0), seed in 0u64..100) {
            let mut rng = SplitMix64::new(seed);
            let a = random_cloud(&mut rng, 16);
            let b = random_cloud(&mut rng, 16);
            let gp = joint_grid(&a, &b, 10).unwrap();
            let with_a = PointCloud::new([a.points(), &[p]].concat()).unwrap();
            let with_b = PointCloud::new([b.points(), &[p]].concat()).unwrap();
            prop_assert_eq!(serialize(&with_a, &gp).codes[16], serialize(&with_b, &gp).codes[16]);
        }
    }
}
