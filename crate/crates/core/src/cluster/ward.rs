use ndarray::Array2;

use super::{check_features, sq_dist, with_canonical_rows, Algorithm, SubgroupAssignment};
use crate::error::Result;

/// One agglomeration step: clusters `a < b` (by their lowest member
/// index) merged at `height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Ward linkage of weighted points, stopped at `g` clusters. Returns the
/// cluster label of every point (numbered by lowest member index) and the
/// merges performed.
///
/// Dissimilarities are `2 n_i n_j / (n_i + n_j) |c_i - c_j|^2`, which for
/// single points is the squared Euclidean distance, updated with the
/// Lance-Williams recurrence. Ties go to the pair with the smallest indices.
pub fn ward_linkage(points: &Array2<f64>, weights: &[f64], g: usize) -> (Vec<usize>, Vec<Merge>) {
    let m = points.nrows();
    let rows: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut d = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let (wi, wj) = (weights[i], weights[j]);
            let v = 2.0 * wi * wj / (wi + wj) * sq_dist(&rows[i], &rows[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    let mut size = weights.to_vec();
    let mut active: Vec<bool> = vec![true; m];
    let mut owner: Vec<usize> = (0..m).collect();
    let mut merges = Vec::new();
    let mut n_active = m;
    while n_active > g.max(1) {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..m {
            if !active[i] {
                continue;
            }
            for j in i + 1..m {
                if active[j] && d[i][j] < best.2 {
                    best = (i, j, d[i][j]);
                }
            }
        }
        let (i, j, h) = best;
        for k in 0..m {
            if !active[k] || k == i || k == j {
                continue;
            }
            let (ni, nj, nk) = (size[i], size[j], size[k]);
            let v = ((ni + nk) * d[k][i] + (nj + nk) * d[k][j] - nk * d[i][j]) / (ni + nj + nk);
            d[i][k] = v;
            d[k][i] = v;
        }
        size[i] += size[j];
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        merges.push(Merge {
            a: i,
            b: j,
            height: h,
        });
        n_active -= 1;
    }
    (owner, merges)
}

/// Ward clustering cut at `g` subgroups.
pub fn hierarchical_ward(x: &Array2<f64>, g: usize) -> Result<SubgroupAssignment> {
    check_features(x, g)?;
    let (labels, _) = with_canonical_rows(x, |rows| {
        let (owner, _) = ward_linkage(rows, &vec![1.0; rows.nrows()], g);
        Ok((owner, None))
    })?;
    Ok(SubgroupAssignment {
        algorithm: Algorithm::Hierarchical,
        g,
        labels,
        objective: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_merge_joins_nearest_pair() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 10.0]];
        let (_, merges) = ward_linkage(&x, &[1.0; 3], 1);
        assert_eq!((merges[0].a, merges[0].b), (0, 1));
        assert!(merges.windows(2).all(|w| w[0].height <= w[1].height));
    }

    #[test]
    fn two_points_two_groups() {
        let x = array![[0.0], [1.0]];
        let a = hierarchical_ward(&x, 2).unwrap();
        assert_eq!(a.labels, vec![0, 1]);
    }
}
