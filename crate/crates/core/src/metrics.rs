//! Point-set similarity metrics.
//!
//! Chamfer distance uses squared Euclidean distances; Hausdorff and EMD use
//! plain distances. Nearest-neighbor search is exhaustive, and EMD is solved
//! exactly with a shortest-augmenting-path assignment solver.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud, Point3};

/// Largest cloud accepted by [`emd`].
pub const EMD_CAP: usize = 2048;
/// Largest cloud accepted by [`emd_bruteforce`].
pub const EMD_BRUTEFORCE_CAP: usize = 8;

/// All four reconstruction scores. `mse` and `emd` need equal cardinalities
/// and are `None` when the clouds differ in size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse: Option<f64>,
    pub cd: f64,
    pub hd: f64,
    pub emd: Option<f64>,
}

impl MetricReport {
    pub fn compute(reference: &PointCloud, reconstruction: &PointCloud) -> Result<Self> {
        let same = reference.len() == reconstruction.len();
        Ok(Self {
            mse: if same { Some(mse_paired(reference, reconstruction)?) } else { None },
            cd: chamfer(reference, reconstruction)?,
            hd: hausdorff(reference, reconstruction)?,
            emd: if same && reference.len() <= EMD_CAP {
                Some(emd(reference, reconstruction)?)
            } else {
                None
            },
        })
    }
}

fn non_empty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("metric needs non-empty clouds"));
    }
    Ok(())
}

fn same_size(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("cloud sizes differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Index-paired mean squared distance.
pub fn mse_paired(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    same_size(a, b)?;
    non_empty(a, b)?;
    let s: f64 = a.points.iter().zip(&b.points).map(|(p, q)| dist2(p, q)).sum();
    Ok(s / a.len() as f64)
}

/// For every point of `from`, the index of its nearest point in `to` and the
/// squared distance to it. Ties go to the lowest index.
pub fn nearest_neighbors(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, q) in to.iter().enumerate() {
                let d = dist2(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn mean_nn(from: &[Point3], to: &[Point3]) -> f64 {
    nearest_neighbors(from, to).iter().map(|(_, d)| d).sum::<f64>() / from.len() as f64
}

fn max_nn(from: &[Point3], to: &[Point3]) -> f64 {
    nearest_neighbors(from, to).iter().map(|(_, d)| *d).fold(0.0, f64::max)
}

/// Bidirectional Chamfer distance on squared distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, b)?;
    Ok(mean_nn(&a.points, &b.points) + mean_nn(&b.points, &a.points))
}

/// Symmetric Hausdorff distance (unsquared).
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, b)?;
    Ok(max_nn(&a.points, &b.points).max(max_nn(&b.points, &a.points)).sqrt())
}

/// Earth mover's distance: mean point displacement under the optimal bijection.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    same_size(a, b)?;
    non_empty(a, b)?;
    let n = a.len();
    if n > EMD_CAP {
        return Err(Error::Capacity {
            what: "emd cloud size",
            got: n,
            limit: EMD_CAP,
        });
    }
    let cost: Vec<f64> = a
        .points
        .iter()
        .flat_map(|p| b.points.iter().map(move |q| dist2(p, q).sqrt()))
        .collect();
    let assignment = solve_assignment(n, &cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Exhaustive EMD over all permutations, for small clouds only.
pub fn emd_bruteforce(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    same_size(a, b)?;
    non_empty(a, b)?;
    let n = a.len();
    if n > EMD_BRUTEFORCE_CAP {
        return Err(Error::Capacity {
            what: "brute-force emd cloud size",
            got: n,
            limit: EMD_BRUTEFORCE_CAP,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p
            .iter()
            .enumerate()
            .map(|(i, &j)| dist2(&a.points[i], &b.points[j]).sqrt())
            .sum();
        best = best.min(c);
    });
    Ok(best / n as f64)
}

fn permute(p: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Minimum-cost perfect matching on a dense `n x n` row-major cost matrix.
/// Returns `assignment[row] = column`.
///
/// Shortest augmenting paths with dual potentials (Hungarian method), O(n^3).
pub fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let crow = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = crow[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}
