//! Farthest point sampling, kNN patch grouping and Chamfer distance.

use rayon::prelude::*;

use crate::dataset_io::Dataset;
use crate::error::{param_err, Result};
use crate::geometry::{dist2, PointCloud, Vec3};
use crate::rng;

pub const DEFAULT_GROUPS: usize = 64;
pub const DEFAULT_GROUP_SIZE: usize = 32;

/// `g` indices chosen by farthest point sampling from a start point drawn
/// with `seed`. Ties go to the lowest index.
pub fn fps(points: &[Vec3], g: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if g == 0 || g > n {
        return param_err(format!("cannot pick {g} centers from {n} points"));
    }
    let start = rng::uniform_index(&mut rng::rng_from(seed), n);
    let mut chosen = Vec::with_capacity(g);
    chosen.push(start);
    let mut best = vec![f64::INFINITY; n];
    let mut last = start;
    for _ in 1..g {
        let lp = points[last];
        let mut arg = 0;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, lp);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                arg = i;
            }
        }
        chosen.push(arg);
        last = arg;
    }
    Ok(chosen)
}

/// Indices of the `s` nearest points to `q`, ordered by (distance, index).
pub fn knn(points: &[Vec3], q: Vec3, s: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)).collect();
    let s = s.min(d.len());
    if s < d.len() {
        d.select_nth_unstable_by(s, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(s);
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

/// `g` patches of `s` points each. Offsets are point minus patch center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub groups: usize,
    pub group_size: usize,
    pub center_indices: Vec<usize>,
    pub centers: Vec<[f32; 3]>,
    /// Neighbor indices, `groups * group_size`, nearest first.
    pub members: Vec<usize>,
    pub offsets: Vec<[f32; 3]>,
}

impl PatchSet {
    pub fn offsets_of(&self, patch: usize) -> &[[f32; 3]] {
        &self.offsets[patch * self.group_size..(patch + 1) * self.group_size]
    }
}

pub fn group_with_centers(points: &[Vec3], centers: &[usize], s: usize) -> Result<PatchSet> {
    if s == 0 || s > points.len() {
        return param_err(format!("group size {s} invalid for {} points", points.len()));
    }
    let mut members = Vec::with_capacity(centers.len() * s);
    let mut offsets = Vec::with_capacity(centers.len() * s);
    for &c in centers {
        let q = points[c];
        for i in knn(points, q, s) {
            members.push(i);
            let p = points[i];
            offsets.push([(p[0] - q[0]) as f32, (p[1] - q[1]) as f32, (p[2] - q[2]) as f32]);
        }
    }
    Ok(PatchSet {
        groups: centers.len(),
        group_size: s,
        center_indices: centers.to_vec(),
        centers: centers.iter().map(|&c| points[c].map(|v| v as f32)).collect(),
        members,
        offsets,
    })
}

pub fn group_patches(points: &[Vec3], g: usize, s: usize, seed: u64) -> Result<PatchSet> {
    let centers = fps(points, g, seed)?;
    group_with_centers(points, &centers, s)
}

/// Patch sets for every sample of `ds`; sample `i` uses FPS seed
/// `derive(seed, [i])`, so the result does not depend on thread count.
pub fn group_dataset(ds: &Dataset, g: usize, s: usize, seed: u64) -> Result<Vec<PatchSet>> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| group_patches(&ds.xyz(i), g, s, rng::derive(seed, &[i as u64])))
        .collect()
}

fn mean_nn(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|&p| b.iter().map(|&q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Symmetric Chamfer distance: mean squared NN distance both ways, summed.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return param_err("chamfer distance of an empty cloud");
    }
    Ok(mean_nn(&a.points, &b.points) + mean_nn(&b.points, &a.points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_on_line() {
        let pts: Vec<Vec3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = fps(&pts, 3, 0).unwrap();
        let start = c[0];
        let far = if start >= 5 { 0 } else { 9 };
        assert_eq!(c[1], far);
        assert_eq!(c.len(), 3);
        assert!(fps(&pts, 11, 0).is_err());
        assert!(fps(&pts, 0, 0).is_err());
    }

    #[test]
    fn fps_ties_take_lowest_index() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // from point 0 the others tie; the lowest wins.
        let mut seed = 0;
        while fps(&pts, 1, seed).unwrap()[0] != 0 {
            seed += 1;
        }
        assert_eq!(fps(&pts, 2, seed).unwrap(), [0, 1]);
    }

    #[test]
    fn chamfer_basics() {
        let a = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let b = PointCloud::new(vec![[0.0, 0.0, 2.0]]);
        // a->b: (4 + 5) / 2, b->a: 4
        assert!((chamfer(&a, &b).unwrap() - 8.5).abs() < 1e-12);
        assert!(chamfer(&a, &PointCloud::default()).is_err());
    }
}
