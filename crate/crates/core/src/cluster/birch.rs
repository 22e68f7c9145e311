use ndarray::Array2;
use rand::seq::index::sample;

use super::ward::ward_linkage;
use super::{check_features, sq_dist, with_canonical_rows, Algorithm, SubgroupAssignment};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const BRANCHING_FACTOR: usize = 50;

/// Count, linear sum and squared-norm sum of a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringFeature {
    pub n: usize,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl ClusteringFeature {
    pub fn point(x: &[f64]) -> Self {
        Self {
            n: 1,
            ls: x.to_vec(),
            ss: x.iter().map(|v| v * v).sum(),
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            n: self.n + other.n,
            ls: self.ls.iter().zip(&other.ls).map(|(a, b)| a + b).collect(),
            ss: self.ss + other.ss,
        }
    }

    fn absorb(&mut self, other: &Self) {
        self.n += other.n;
        self.ls.iter_mut().zip(&other.ls).for_each(|(a, b)| *a += b);
        self.ss += other.ss;
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n as f64).collect()
    }

    /// Root-mean-square distance of members from the centroid.
    pub fn radius(&self) -> f64 {
        let n = self.n as f64;
        let c2: f64 = self.ls.iter().map(|v| (v / n) * (v / n)).sum();
        (self.ss / n - c2).max(0.0).sqrt()
    }
}

enum Node {
    Leaf(Vec<ClusteringFeature>),
    Inner(Vec<(ClusteringFeature, Node)>),
}

impl Node {
    fn summary(&self) -> ClusteringFeature {
        let mut cfs: Vec<&ClusteringFeature> = match self {
            Node::Leaf(e) => e.iter().collect(),
            Node::Inner(c) => c.iter().map(|(cf, _)| cf).collect(),
        };
        let first = cfs.remove(0).clone();
        cfs.into_iter().fold(first, |acc, cf| acc.merge(cf))
    }

    fn len(&self) -> usize {
        match self {
            Node::Leaf(e) => e.len(),
            Node::Inner(c) => c.len(),
        }
    }

    /// Insert; returns a sibling when this node had to split.
    fn insert(&mut self, p: &ClusteringFeature, threshold: f64, branching: usize) -> Option<Node> {
        let target = p.centroid();
        match self {
            Node::Leaf(entries) => {
                let closest = closest(entries.iter(), &target);
                if let Some(i) = closest {
                    if entries[i].merge(p).radius() <= threshold {
                        entries[i].absorb(p);
                        return None;
                    }
                }
                entries.push(p.clone());
                if entries.len() > branching {
                    let (a, b) = split(std::mem::take(entries));
                    *entries = a;
                    return Some(Node::Leaf(b));
                }
                None
            }
            Node::Inner(children) => {
                let i = closest(children.iter().map(|(cf, _)| cf), &target)
                    .expect("inner node has children");
                children[i].0.absorb(p);
                if let Some(sibling) = children[i].1.insert(p, threshold, branching) {
                    children[i].0 = children[i].1.summary();
                    children.push((sibling.summary(), sibling));
                }
                if children.len() > branching {
                    let summaries: Vec<ClusteringFeature> =
                        children.iter().map(|(cf, _)| cf.clone()).collect();
                    let (left_idx, _) = split_indices(&summaries);
                    let mut left = Vec::new();
                    let mut right = Vec::new();
                    for (k, child) in std::mem::take(children).into_iter().enumerate() {
                        if left_idx.contains(&k) {
                            left.push(child);
                        } else {
                            right.push(child);
                        }
                    }
                    *children = left;
                    return Some(Node::Inner(right));
                }
                None
            }
        }
    }

    fn collect_leaves(self, out: &mut Vec<ClusteringFeature>) {
        match self {
            Node::Leaf(e) => out.extend(e),
            Node::Inner(c) => c.into_iter().for_each(|(_, n)| n.collect_leaves(out)),
        }
    }
}

fn closest<'a>(cfs: impl Iterator<Item = &'a ClusteringFeature>, target: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cf) in cfs.enumerate() {
        let d = sq_dist(&cf.centroid(), target);
        if best.is_none_or(|b| d < b.1) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
}

/// Seed a split with the farthest pair of centroids and send every entry to
/// the nearer seed.
fn split_indices(cfs: &[ClusteringFeature]) -> (Vec<usize>, Vec<usize>) {
    let c: Vec<Vec<f64>> = cfs.iter().map(|cf| cf.centroid()).collect();
    let mut far = (0, 1, -1.0);
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let d = sq_dist(&c[i], &c[j]);
            if d > far.2 {
                far = (i, j, d);
            }
        }
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for (k, ck) in c.iter().enumerate() {
        if k == far.0 || (k != far.1 && sq_dist(ck, &c[far.0]) <= sq_dist(ck, &c[far.1])) {
            left.push(k);
        } else {
            right.push(k);
        }
    }
    (left, right)
}

fn split(entries: Vec<ClusteringFeature>) -> (Vec<ClusteringFeature>, Vec<ClusteringFeature>) {
    let (left_idx, _) = split_indices(&entries);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, e) in entries.into_iter().enumerate() {
        if left_idx.contains(&k) {
            a.push(e);
        } else {
            b.push(e);
        }
    }
    (a, b)
}

/// Single pass CF-tree build; returns the leaf entries in tree order.
pub fn birch_leaf_entries(
    x: &Array2<f64>,
    branching: usize,
    threshold: f64,
) -> Vec<ClusteringFeature> {
    let mut root: Option<Node> = None;
    for row in x.rows() {
        let p = ClusteringFeature::point(row.as_slice().expect("standard layout"));
        match root.as_mut() {
            None => root = Some(Node::Leaf(vec![p])),
            Some(r) => {
                if let Some(sibling) = r.insert(&p, threshold, branching) {
                    let old = root.take().unwrap();
                    root = Some(Node::Inner(vec![
                        (old.summary(), old),
                        (sibling.summary(), sibling),
                    ]));
                }
            }
        }
    }
    let mut leaves = Vec::new();
    if let Some(r) = root {
        debug_assert!(r.len() > 0);
        r.collect_leaves(&mut leaves);
    }
    leaves
}

/// BIRCH with a weighted-Ward global step over leaf centroids; each point
/// then takes the label of the nearest final centroid.
pub fn birch(
    x: &Array2<f64>,
    g: usize,
    branching: usize,
    threshold: f64,
) -> Result<SubgroupAssignment> {
    check_features(x, g)?;
    if !(threshold > 0.0) || branching < 2 {
        return Err(Error::Parameter(
            "BIRCH needs a positive threshold and branching factor of at least 2".into(),
        ));
    }
    let (labels, _) = with_canonical_rows(x, |rows| {
        let leaves = birch_leaf_entries(rows, branching, threshold);
        if g > leaves.len() {
            return Err(Error::Parameter(format!(
                "BIRCH produced {} leaf entries for {g} subgroups; use a smaller threshold",
                leaves.len()
            )));
        }
        let dim = rows.ncols();
        let centroids = Array2::from_shape_fn((leaves.len(), dim), |(i, j)| {
            leaves[i].ls[j] / leaves[i].n as f64
        });
        let weights: Vec<f64> = leaves.iter().map(|l| l.n as f64).collect();
        let (owner, _) = ward_linkage(&centroids, &weights, g);
        let mut groups: Vec<usize> = owner.clone();
        groups.sort_unstable();
        groups.dedup();
        let mut finals: Vec<ClusteringFeature> = Vec::new();
        for &grp in &groups {
            let mut members = leaves
                .iter()
                .zip(&owner)
                .filter(|(_, &o)| o == grp)
                .map(|(l, _)| l);
            let first = members.next().unwrap().clone();
            finals.push(members.fold(first, |acc, l| acc.merge(l)));
        }
        let centers: Vec<Vec<f64>> = finals.iter().map(|f| f.centroid()).collect();
        let labels = rows
            .rows()
            .into_iter()
            .map(|r| {
                let r = r.to_vec();
                (0..centers.len())
                    .min_by(|&a, &b| sq_dist(&r, &centers[a]).total_cmp(&sq_dist(&r, &centers[b])))
                    .unwrap()
            })
            .collect();
        Ok((labels, None))
    })?;
    Ok(SubgroupAssignment {
        algorithm: Algorithm::Birch,
        g,
        labels,
        objective: None,
    })
}

/// A quarter of the mean pairwise row distance over a seeded sample of at
/// most 200 rows.
pub fn default_threshold(x: &Array2<f64>, seed: u64) -> f64 {
    let order = super::canonical_order(x);
    let m = order.len();
    let picked: Vec<usize> = if m <= 200 {
        order
    } else {
        let mut rng = substream(seed, &[0xB1C4]);
        let mut idx = sample(&mut rng, m, 200).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| order[i]).collect()
    };
    let rows: Vec<Vec<f64>> = picked.iter().map(|&i| x.row(i).to_vec()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += sq_dist(&rows[i], &rows[j]).sqrt();
            pairs += 1;
        }
    }
    let mean = if pairs > 0 { total / pairs as f64 } else { 0.0 };
    if mean > 0.0 {
        0.25 * mean
    } else {
        f64::MIN_POSITIVE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cf_merge_is_additive() {
        let a = ClusteringFeature::point(&[1.0, 2.0]);
        let b = ClusteringFeature::point(&[3.0, -1.0]);
        let c = a.merge(&b);
        assert_eq!(c.n, 2);
        assert_eq!(c.ls, vec![4.0, 1.0]);
        assert_eq!(c.ss, 5.0 + 10.0);
    }

    #[test]
    fn huge_threshold_absorbs_everything() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]];
        let leaves = birch_leaf_entries(&x, 50, 100.0);
        assert_eq!(leaves.len(), 1);
        assert!(birch(&x, 1, 50, 100.0).is_ok());
        assert!(birch(&x, 2, 50, 100.0).is_err());
    }

    #[test]
    fn leaf_counts_conserve_points() {
        let x = Array2::from_shape_fn((300, 3), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 10.0);
        let leaves = birch_leaf_entries(&x, 5, 0.3);
        assert!(leaves.len() > 5);
        assert_eq!(leaves.iter().map(|l| l.n).sum::<usize>(), 300);
    }
}
