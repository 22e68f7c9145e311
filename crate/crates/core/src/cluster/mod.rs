//! Patient subgrouping on rows of a patient-topic matrix: k-means, Ward
//! hierarchical clustering and BIRCH, plus the algorithm x G sweep.
//!
//! Every algorithm first sorts rows into a canonical (lexicographic) order
//! and maps labels back afterwards, so results do not depend on input row
//! order. Labels are numbered by first appearance in that canonical order.

mod birch;
mod kmeans;
mod ward;

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::topic::write_rows;

pub use birch::{
    birch, birch_leaf_entries, default_threshold, ClusteringFeature, BRANCHING_FACTOR,
};
pub use kmeans::{kmeans, kmeans_with, KMeansOptions, KMeansRun};
pub use ward::{hierarchical_ward, ward_linkage, Merge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Hierarchical,
    KMeans,
    Birch,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Hierarchical, Algorithm::KMeans, Algorithm::Birch];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hierarchical => "hierarchical",
            Algorithm::KMeans => "kmeans",
            Algorithm::Birch => "birch",
        }
    }

    pub fn parse(s: &str) -> Option<Algorithm> {
        match s.to_ascii_lowercase().as_str() {
            "hierarchical" | "ward" => Some(Algorithm::Hierarchical),
            "kmeans" | "k-means" => Some(Algorithm::KMeans),
            "birch" => Some(Algorithm::Birch),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupAssignment {
    pub algorithm: Algorithm,
    pub g: usize,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares (k-means only).
    pub objective: Option<f64>,
}

impl SubgroupAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.g];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn check_features(x: &Array2<f64>, g: usize) -> Result<()> {
    if g == 0 {
        return Err(Error::Parameter(
            "number of subgroups must be at least 1".into(),
        ));
    }
    if g > x.nrows() {
        return Err(Error::Parameter(format!(
            "{g} subgroups requested for {} patients",
            x.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Row indices in lexicographic order of their values (ties by index).
pub(crate) fn canonical_order(x: &Array2<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Run `f` on canonically ordered rows and return labels in input order,
/// renumbered by first appearance.
pub(crate) fn with_canonical_rows<F>(x: &Array2<f64>, f: F) -> Result<(Vec<usize>, Option<f64>)>
where
    F: FnOnce(&Array2<f64>) -> Result<(Vec<usize>, Option<f64>)>,
{
    let order = canonical_order(x);
    let sorted = x.select(ndarray::Axis(0), &order);
    let (sorted_labels, objective) = f(&sorted)?;
    let relabelled = first_appearance(&sorted_labels);
    let mut labels = vec![0; x.nrows()];
    for (pos, &row) in order.iter().enumerate() {
        labels[row] = relabelled[pos];
    }
    Ok((labels, objective))
}

fn first_appearance(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub algorithms: Vec<Algorithm>,
    pub g_range: std::ops::RangeInclusive<usize>,
    pub seed: u64,
    /// BIRCH absorption radius; `None` uses [`default_threshold`].
    pub birch_threshold: Option<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            g_range: 2..=6,
            seed: 1,
            birch_threshold: None,
        }
    }
}

#[derive(Debug)]
pub struct SweepCell {
    pub algorithm: Algorithm,
    pub g: usize,
    pub result: Result<SubgroupAssignment>,
}

/// Every (algorithm, G) combination; failures are kept per cell.
pub fn sweep_subgroups(x: &Array2<f64>, options: &SweepOptions) -> Vec<SweepCell> {
    let threshold = options
        .birch_threshold
        .unwrap_or_else(|| default_threshold(x, options.seed));
    let cells: Vec<(Algorithm, usize)> = options
        .algorithms
        .iter()
        .flat_map(|&a| options.g_range.clone().map(move |g| (a, g)))
        .collect();
    cells
        .into_par_iter()
        .map(|(algorithm, g)| {
            let result = match algorithm {
                Algorithm::Hierarchical => hierarchical_ward(x, g),
                Algorithm::KMeans => kmeans(x, g, derive_seed(options.seed, g as u64)),
                Algorithm::Birch if options.birch_threshold.is_some() => {
                    birch(x, g, BRANCHING_FACTOR, threshold)
                }
                Algorithm::Birch => birch_default(x, g, threshold),
            };
            if let Err(e) = &result {
                log::warn!("{algorithm} with G={g} failed: {e}");
            }
            SweepCell {
                algorithm,
                g,
                result,
            }
        })
        .collect()
}

/// BIRCH with the heuristic threshold, halved (up to 20 times) while the
/// tree has fewer leaf entries than subgroups.
fn birch_default(x: &Array2<f64>, g: usize, mut threshold: f64) -> Result<SubgroupAssignment> {
    let mut attempt = 0;
    loop {
        match birch(x, g, BRANCHING_FACTOR, threshold) {
            Err(Error::Parameter(msg)) if msg.contains("leaf entries") && attempt < 20 => {
                threshold /= 2.0;
                attempt += 1;
                log::info!(
                    "birch G={g}: too few leaf entries, retrying with threshold {threshold:.4}"
                );
            }
            other => return other,
        }
    }
}

/// `patient_id,algorithm,G,label` for every successful cell.
pub fn write_assignments(
    path: &Path,
    ids: &[String],
    assignments: &[&SubgroupAssignment],
) -> Result<()> {
    write_rows(path, ["patient_id", "algorithm", "G", "label"], |w| {
        for a in assignments {
            for (id, l) in ids.iter().zip(&a.labels) {
                w.write_record([
                    id.as_str(),
                    a.algorithm.name(),
                    &a.g.to_string(),
                    &l.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

/// Read an assignment file back, keyed by (algorithm, G), labels in the
/// order of `ids`.
pub fn read_assignments(path: &Path, ids: &[String]) -> Result<Vec<SubgroupAssignment>> {
    let index: std::collections::HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })?;
    let mut out: Vec<SubgroupAssignment> = Vec::new();
    let mut filled: Vec<Vec<bool>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(Error::malformed(
                path,
                line,
                "expected patient_id,algorithm,G,label",
            ));
        }
        let row = *index
            .get(&rec[0])
            .ok_or_else(|| Error::malformed(path, line, format!("unknown patient {}", &rec[0])))?;
        let algorithm = Algorithm::parse(&rec[1]).ok_or_else(|| {
            Error::malformed(path, line, format!("unknown algorithm {}", &rec[1]))
        })?;
        let g: usize = rec[2]
            .parse()
            .map_err(|_| Error::malformed(path, line, "G must be an integer"))?;
        let label: usize = rec[3]
            .parse()
            .ok()
            .filter(|l| *l < g)
            .ok_or_else(|| Error::malformed(path, line, "label must be an integer below G"))?;
        let pos = match out
            .iter()
            .position(|a| a.algorithm == algorithm && a.g == g)
        {
            Some(p) => p,
            None => {
                out.push(SubgroupAssignment {
                    algorithm,
                    g,
                    labels: vec![0; ids.len()],
                    objective: None,
                });
                filled.push(vec![false; ids.len()]);
                out.len() - 1
            }
        };
        out[pos].labels[row] = label;
        filled[pos][row] = true;
    }
    if filled.iter().any(|f| f.iter().any(|x| !x)) {
        return Err(Error::File {
            path: path.into(),
            message: "an assignment does not cover every patient".into(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ari_bounds() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0);
    }

    #[test]
    fn canonical_order_is_lexicographic() {
        let x = array![[1.0, 2.0], [0.0, 5.0], [1.0, 1.0]];
        assert_eq!(canonical_order(&x), vec![1, 2, 0]);
    }

    #[test]
    fn sweep_covers_cross_product() {
        let x = Array2::from_shape_fn((60, 2), |(i, j)| ((i * 37 + j * 11) % 53) as f64);
        let cells = sweep_subgroups(&x, &SweepOptions::default());
        assert_eq!(cells.len(), 15);
        assert!(cells.iter().all(|c| c.result.is_ok()));
        // far too coarse a threshold fails per cell without stopping the sweep
        let coarse = SweepOptions {
            birch_threshold: Some(1e3),
            ..SweepOptions::default()
        };
        let cells = sweep_subgroups(&x, &coarse);
        assert_eq!(cells.iter().filter(|c| c.result.is_err()).count(), 5);
    }
}
