use super::chi_square_sf;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KruskalWallisResult {
    pub h: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Tie-corrected Kruskal-Wallis H with its chi-square p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallisResult> {
    if groups.len() < 2 {
        return Err(Error::Parameter(
            "Kruskal-Wallis needs at least two groups".into(),
        ));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Data("Kruskal-Wallis group is empty".into()));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("Kruskal-Wallis observation is NaN".into()));
    }
    let n = all.len() as f64;
    let ranks = midranks(&all);
    let centre = (n + 1.0) / 2.0;
    let mut h = 0.0;
    let mut start = 0;
    for g in groups {
        let ng = g.len() as f64;
        let mean: f64 = ranks[start..start + g.len()].iter().sum::<f64>() / ng;
        h += ng * (mean - centre) * (mean - centre);
        start += g.len();
    }
    h *= 12.0 / (n * (n + 1.0));

    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    for run in sorted.chunk_by(|a, b| a == b) {
        let t = run.len() as f64;
        ties += t * t * t - t;
    }
    let correction = 1.0 - ties / (n * n * n - n);
    let df = groups.len() - 1;
    if correction <= 0.0 {
        return Ok(KruskalWallisResult {
            h: 0.0,
            degrees_of_freedom: df,
            p_value: 1.0,
        });
    }
    let h = (h / correction).max(0.0);
    Ok(KruskalWallisResult {
        h,
        degrees_of_freedom: df,
        p_value: chi_square_sf(h, df),
    })
}
