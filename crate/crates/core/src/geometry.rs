//! Point-cloud primitives feeding the semantic encoder: normalization,
//! farthest point sampling (plain and keypoint-seeded), k-nearest-neighbor
//! patch grouping, patch masking and similarity augmentation.
//!
//! Every routine is a pure function of its inputs (and of the RNG state when
//! one is passed). Distance ties are always broken towards the lowest index.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// An ordered list of 3D points in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub id: String,
    pub class_label: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            id: String::new(),
            class_label: String::new(),
        }
    }

    pub fn with_meta(points: Vec<Point3>, id: impl Into<String>, class_label: impl Into<String>) -> Self {
        Self {
            points,
            id: id.into(),
            class_label: class_label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks `N >= 1` and that every coordinate is finite.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            id: self.id.clone(),
            class_label: self.class_label.clone(),
        }
    }
}

/// Indices of keypoints inside their owning [`PointCloud`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
}

impl KeypointSet {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices must be distinct and inside `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(Error::invalid(format!("keypoint index {i} out of range for {n} points")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("duplicate keypoint index {i}")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Snaps free-floating keypoint coordinates to their nearest cloud points.
/// Keypoints landing on an already-taken point are dropped.
pub fn snap_keypoints(cloud: &PointCloud, coords: &[Point3]) -> Result<KeypointSet> {
    cloud.validate()?;
    let mut indices: Vec<usize> = Vec::with_capacity(coords.len());
    for c in coords {
        let nearest = argmin_dist(&cloud.points, c);
        if !indices.contains(&nearest) {
            indices.push(nearest);
        }
    }
    Ok(KeypointSet { indices })
}

fn argmin_dist(points: &[Point3], q: &Point3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, q);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Centers the cloud at the origin and scales it so the farthest point has
/// unit norm. Returns the normalized cloud together with the centroid and scale
/// such that `original = normalized * scale + centroid`.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<(PointCloud, Point3, f64)> {
    cloud.validate()?;
    let c = cloud.centroid();
    let scale = cloud
        .points
        .iter()
        .map(|p| norm(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok((cloud.clone(), [0.0; 3], 1.0));
    }
    let out = cloud.map_points(|p| [(p[0] - c[0]) / scale, (p[1] - c[1]) / scale, (p[2] - c[2]) / scale]);
    Ok((out, c, scale))
}

/// Inverse of [`normalize_unit_sphere`].
pub fn denormalize(cloud: &PointCloud, centroid: Point3, scale: f64) -> PointCloud {
    cloud.map_points(|p| {
        [
            p[0] * scale + centroid[0],
            p[1] * scale + centroid[1],
            p[2] * scale + centroid[2],
        ]
    })
}

/// Farthest point sampling.
///
/// `seeds` are taken first, in order; each further pick maximizes the minimum
/// distance to everything selected so far. With no seeds the walk starts at
/// index 0.
pub fn fps(cloud: &PointCloud, count: usize, seeds: &[usize]) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 {
        return Err(Error::invalid("fps count must be positive"));
    }
    if count > n {
        return Err(Error::invalid(format!("fps count {count} exceeds cloud size {n}")));
    }
    if seeds.len() > count {
        return Err(Error::invalid(format!(
            "{} seeds exceed requested count {count}",
            seeds.len()
        )));
    }
    KeypointSet::new(seeds.to_vec()).validate(n)?;

    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let take = |i: usize, selected: &mut Vec<usize>, taken: &mut Vec<bool>, min_d: &mut Vec<f64>| {
        selected.push(i);
        taken[i] = true;
        let p = cloud.points[i];
        for (j, q) in cloud.points.iter().enumerate() {
            let d = dist2(&p, q);
            if d < min_d[j] {
                min_d[j] = d;
            }
        }
    };

    if seeds.is_empty() {
        take(0, &mut selected, &mut taken, &mut min_d);
    } else {
        for &s in seeds {
            take(s, &mut selected, &mut taken, &mut min_d);
        }
    }
    while selected.len() < count {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if !taken[j] && min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        take(best, &mut selected, &mut taken, &mut min_d);
    }
    Ok(selected)
}

/// Keypoint-aware FPS: the keypoints are mandatory initial centers, the
/// remaining `groups - K` centers come from FPS seeded with them.
pub fn kp_fps(cloud: &PointCloud, keypoints: &KeypointSet, groups: usize) -> Result<Vec<usize>> {
    if keypoints.len() > groups {
        return Err(Error::invalid(format!(
            "{} keypoints exceed group count {groups}",
            keypoints.len()
        )));
    }
    fps(cloud, groups, &keypoints.indices)
}

/// Center points plus their centered k-nearest-neighbor patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub center_indices: Vec<usize>,
    pub centers: Vec<Point3>,
    /// `patches[i][j] = raw neighbor point - centers[i]`.
    pub patches: Vec<Vec<Point3>>,
    pub neighbor_indices: Vec<Vec<usize>>,
    /// Patch order as grouped; masking never reorders patches.
    pub original_order: Vec<usize>,
    pub visible: Vec<bool>,
}

impl PatchSet {
    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    pub fn masked_count(&self) -> usize {
        self.groups() - self.visible_count()
    }

    /// Positions (in original order) of the visible patches.
    pub fn visible_positions(&self) -> Vec<usize> {
        self.original_order.iter().copied().filter(|&i| self.visible[i]).collect()
    }

    /// Fraction of cloud points that belong to at least one patch.
    pub fn coverage(&self, n: usize) -> f64 {
        let mut hit = vec![false; n];
        for nb in &self.neighbor_indices {
            for &j in nb {
                hit[j] = true;
            }
        }
        hit.iter().filter(|h| **h).count() as f64 / n as f64
    }
}

/// Groups the `group_size` nearest cloud points around each center and
/// re-expresses them relative to that center. All patches start visible.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], group_size: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if group_size == 0 || group_size > n {
        return Err(Error::invalid(format!("group size {group_size} invalid for {n} points")));
    }
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("center index {c} out of range")));
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut patches = Vec::with_capacity(centers.len());
    let mut neighbor_indices = Vec::with_capacity(centers.len());
    for &ci in centers {
        let c = cloud.points[ci];
        order.clear();
        order.extend(cloud.points.iter().enumerate().map(|(j, p)| (dist2(&c, p), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if group_size < n {
            order.select_nth_unstable_by(group_size - 1, cmp);
        }
        let nearest = &mut order[..group_size];
        nearest.sort_unstable_by(cmp);
        let idx: Vec<usize> = nearest.iter().map(|(_, j)| *j).collect();
        patches.push(
            idx.iter()
                .map(|&j| {
                    let p = cloud.points[j];
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                })
                .collect(),
        );
        neighbor_indices.push(idx);
    }
    Ok(PatchSet {
        center_indices: centers.to_vec(),
        centers: centers.iter().map(|&i| cloud.points[i]).collect(),
        patches,
        neighbor_indices,
        original_order: (0..centers.len()).collect(),
        visible: vec![true; centers.len()],
    })
}

/// Number of masked patches for `groups` patches at the given masked fraction.
pub fn masked_count(groups: usize, mask_fraction: f64) -> usize {
    // Small slack absorbs representation error in products like 100 * 0.29.
    ((groups as f64 * mask_fraction) + 1e-9).floor() as usize
}

/// Masks exactly `floor(G * mask_fraction)` patches chosen uniformly without
/// replacement. `mask_fraction` is the masked share, not the visible share.
pub fn random_mask<R: Rng + ?Sized>(patchset: &PatchSet, mask_fraction: f64, rng: &mut R) -> Result<PatchSet> {
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(Error::invalid(format!("mask fraction {mask_fraction} outside [0, 1)")));
    }
    let g = patchset.groups();
    let m = masked_count(g, mask_fraction);
    let mut out = patchset.clone();
    out.visible = vec![true; g];
    for i in index::sample(rng, g, m) {
        out.visible[i] = false;
    }
    Ok(out)
}

/// Inclusive real interval used for augmentation draws.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

/// Random similarity transform `p -> s * p + t` with one scale and one
/// translation vector per cloud.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    scale_range: Interval,
    translate_range: Interval,
) -> Result<PointCloud> {
    if scale_range.lo <= 0.0 || scale_range.hi < scale_range.lo {
        return Err(Error::invalid("scale range must lie in (0, inf)"));
    }
    let s = scale_range.draw(rng);
    let t = [translate_range.draw(rng), translate_range.draw(rng), translate_range.draw(rng)];
    Ok(apply_similarity(cloud, s, t))
}

pub fn apply_similarity(cloud: &PointCloud, s: f64, t: Point3) -> PointCloud {
    cloud.map_points(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square() -> PointCloud {
        PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]])
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect())
    }

    /// Brute-force FPS oracle: at every step evaluate every candidate's min
    /// distance to the selected set from scratch.
    fn fps_bruteforce(cloud: &PointCloud, count: usize, seeds: &[usize]) -> Vec<usize> {
        let mut sel: Vec<usize> = if seeds.is_empty() { vec![0] } else { seeds.to_vec() };
        while sel.len() < count {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..cloud.len() {
                if sel.contains(&j) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| dist2(&cloud.points[s], &cloud.points[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, j);
                }
            }
            sel.push(best.1);
        }
        sel
    }

    #[test]
    fn normalize_two_points() {
        let c = PointCloud::new(vec![[0., 0., 0.], [2., 0., 0.]]);
        let (n, centroid, scale) = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points, vec![[-1., 0., 0.], [1., 0., 0.]]);
        assert_eq!(centroid, [1., 0., 0.]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn normalize_identity_on_centered_unit_cloud() {
        let c = PointCloud::new(vec![[1., 0., 0.], [-1., 0., 0.], [0., 0.5, 0.], [0., -0.5, 0.]]);
        let (n, _, scale) = normalize_unit_sphere(&c).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(n.points, c.points);
    }

    #[test]
    fn normalize_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = apply_similarity(&random_cloud(&mut rng, 10), 7.5, [3.0, -2.0, 11.0]);
        let (n, centroid, scale) = normalize_unit_sphere(&c).unwrap();
        let max = n.points.iter().map(norm).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(norm(&n.centroid()) < 1e-12);
        let back = denormalize(&n, centroid, scale);
        for (a, b) in back.points.iter().zip(&c.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_coincident_points_unchanged() {
        let c = PointCloud::new(vec![[2., 2., 2.]; 3]);
        let (n, _, scale) = normalize_unit_sphere(&c).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(n, c);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let c = PointCloud::new(vec![[0., f64::NAN, 0.]]);
        assert!(matches!(normalize_unit_sphere(&c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn fps_square_opposite_corner() {
        let c = square();
        assert_eq!(fps_bruteforce(&c, 2, &[0]), vec![0, 3]);
        assert_eq!(fps(&c, 2, &[0]).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_collinear() {
        let c = PointCloud::new(vec![[0., 0., 0.], [1., 0., 0.], [2., 0., 0.]]);
        assert_eq!(fps_bruteforce(&c, 2, &[0]), vec![0, 2]);
        assert_eq!(fps(&c, 2, &[0]).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_exhaustive_and_errors() {
        let c = square();
        let mut all = fps(&c, 4, &[]).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&c, 5, &[]).is_err());
        assert!(fps(&c, 2, &[1, 1]).is_err());
        assert!(fps(&c, 1, &[0, 1]).is_err());
    }

    #[test]
    fn fps_matches_bruteforce_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = random_cloud(&mut rng, 40);
            assert_eq!(fps(&c, 12, &[]).unwrap(), fps_bruteforce(&c, 12, &[]));
            assert_eq!(fps(&c, 12, &[5, 17]).unwrap(), fps_bruteforce(&c, 12, &[5, 17]));
        }
    }

    #[test]
    fn kp_fps_cases() {
        let c = square();
        assert_eq!(kp_fps(&c, &KeypointSet::new(vec![1]), 2).unwrap(), vec![1, 2]);
        assert_eq!(kp_fps(&c, &KeypointSet::new(vec![3, 1]), 2).unwrap(), vec![3, 1]);
        assert_eq!(kp_fps(&c, &KeypointSet::default(), 3).unwrap(), fps(&c, 3, &[0]).unwrap());
        assert!(kp_fps(&c, &KeypointSet::new(vec![0, 1, 2]), 2).is_err());
    }

    #[test]
    fn knn_group_line() {
        let xs = [-2.5, -1.0, 0.0, 0.4, 3.0, -0.3];
        let c = PointCloud::new(xs.iter().map(|&x| [x, 0., 0.]).collect());
        let ps = knn_group(&c, &[2], 3).unwrap();
        assert_eq!(ps.neighbor_indices[0], vec![2, 5, 3]);
        assert_eq!(ps.patches[0], vec![[0., 0., 0.], [-0.3, 0., 0.], [0.4, 0., 0.]]);
    }

    #[test]
    fn knn_group_degenerate_sizes() {
        let c = square();
        let one = knn_group(&c, &[0, 3], 1).unwrap();
        assert!(one.patches.iter().all(|p| p == &vec![[0.0; 3]]));
        let all = knn_group(&c, &[3], 4).unwrap();
        let mut idx = all.neighbor_indices[0].clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        for (j, &pi) in all.neighbor_indices[0].iter().enumerate() {
            let raw = c.points[pi];
            assert_eq!(all.patches[0][j], [raw[0] - 1., raw[1] - 1., raw[2]]);
        }
        assert!(knn_group(&c, &[0], 5).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(&mut rng, 128);
        let centers = fps(&c, 64, &[]).unwrap();
        let ps = knn_group(&c, &centers, 4).unwrap();
        let none = random_mask(&ps, 0.0, &mut rng).unwrap();
        assert_eq!(none.masked_count(), 0);
        let m = random_mask(&ps, 0.8, &mut rng).unwrap();
        assert_eq!((m.masked_count(), m.visible_count()), (51, 13));
        assert_eq!(m.original_order, ps.original_order);
        assert!(random_mask(&ps, 1.0, &mut rng).is_err());
        assert_eq!(masked_count(100, 0.29), 29);
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_cloud(&mut rng, 64);
        let ps = knn_group(&c, &fps(&c, 16, &[]).unwrap(), 8).unwrap();
        let a = random_mask(&ps, 0.5, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let b = random_mask(&ps, 0.5, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.visible, b.visible);
    }

    #[test]
    fn augment_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_cloud(&mut rng, 12);
        let same = augment(&c, &mut rng, Interval::point(1.0), Interval::point(0.0)).unwrap();
        assert_eq!(same, c);
        let one = PointCloud::new(vec![[1., 1., 1.]]);
        assert_eq!(apply_similarity(&one, 2.0, [1., 0., 0.]).points, vec![[3., 2., 2.]]);

        let a = augment(&c, &mut rng, Interval::new(0.5, 2.0), Interval::new(-1.0, 1.0)).unwrap();
        let ratio = dist2(&a.points[0], &a.points[1]).sqrt() / dist2(&c.points[0], &c.points[1]).sqrt();
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                let r = dist2(&a.points[i], &a.points[j]).sqrt() / dist2(&c.points[i], &c.points[j]).sqrt();
                assert!((r - ratio).abs() < 1e-9);
            }
        }
        assert!(augment(&c, &mut rng, Interval::new(0.0, 1.0), Interval::point(0.0)).is_err());
    }

    #[test]
    fn snapping_dedups() {
        let c = square();
        let k = snap_keypoints(&c, &[[0.9, 0.1, 0.0], [1.1, -0.1, 0.0], [0.0, 0.9, 0.2]]).unwrap();
        assert_eq!(k.indices, vec![1, 2]);
    }
}
