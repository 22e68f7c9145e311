//! Survival and comorbidity statistics for comparing patient subgroups.

mod eci;
mod kruskal;
mod report;
mod survival;

use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};

pub use eci::{eci_profile, eci_profiles, EciBand, EciMapping, EciProfile, ECI_CATEGORIES};
pub use kruskal::{kruskal_wallis, midranks, KruskalWallisResult};
pub use report::{median, subgroup_report, Cell, ReportRow, SubgroupReport};
pub(crate) use survival::escape as svg_escape;
pub use survival::{
    kaplan_meier, kaplan_meier_by_group, log_rank_test, write_km_csv, write_km_svg, KmCurve,
    LogRankResult, SurvivalSample,
};

/// Upper tail of the chi-square distribution, `Q(df/2, x/2)`.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "chi-square needs at least one degree of freedom");
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// Lower tail, `P(df/2, x/2)`.
pub fn chi_square_cdf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "chi-square needs at least one degree of freedom");
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(df as f64 / 2.0, x / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Pearson test of independence on a contingency table. All-zero rows and
/// columns are dropped; a 2x2 table gets the Yates continuity correction.
/// A table with fewer than two non-empty rows or columns gives statistic 0
/// and p = 1.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Result<ChiSquareResult> {
    let cols = table.first().map_or(0, |r| r.len());
    if table.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension(
            "contingency table rows differ in length".into(),
        ));
    }
    if table
        .iter()
        .flatten()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(Error::Data(
            "contingency table needs finite non-negative counts".into(),
        ));
    }
    let row_sum: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sum: Vec<f64> = (0..cols)
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let rows: Vec<usize> = (0..table.len()).filter(|&i| row_sum[i] > 0.0).collect();
    let keep: Vec<usize> = (0..cols).filter(|&j| col_sum[j] > 0.0).collect();
    if rows.len() < 2 || keep.len() < 2 {
        return Ok(ChiSquareResult {
            statistic: 0.0,
            degrees_of_freedom: 0,
            p_value: 1.0,
        });
    }
    let total: f64 = row_sum.iter().sum();
    let yates = rows.len() == 2 && keep.len() == 2;
    let mut stat = 0.0;
    for &i in &rows {
        for &j in &keep {
            let e = row_sum[i] * col_sum[j] / total;
            let mut diff = (table[i][j] - e).abs();
            if yates {
                diff -= diff.min(0.5);
            }
            stat += diff * diff / e;
        }
    }
    let df = (rows.len() - 1) * (keep.len() - 1);
    Ok(ChiSquareResult {
        statistic: stat,
        degrees_of_freedom: df,
        p_value: chi_square_sf(stat, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        for df in 1..=50 {
            assert_eq!(chi_square_sf(0.0, df), 1.0);
        }
        assert!((chi_square_sf(2.0, 2) - (-1.0f64).exp()).abs() < 1e-14);
        for &x in &[0.3, 4.0, 17.5, 120.0] {
            assert!((chi_square_sf(x, 2) - (-x / 2.0).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn tails_sum_to_one() {
        for df in [1, 3, 10, 50] {
            for x in [0.01, 1.0, 5.0, 40.0, 199.0] {
                assert!((chi_square_sf(x, df) + chi_square_cdf(x, df) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn independence_on_proportional_table() {
        let r = chi_square_independence(&[vec![10.0, 20.0, 30.0], vec![5.0, 10.0, 15.0]]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.degrees_of_freedom, 2);
    }

    #[test]
    fn yates_two_by_two() {
        // expected 15 everywhere, |O-E| = 5, corrected 4.5
        let r = chi_square_independence(&[vec![20.0, 10.0], vec![10.0, 20.0]]).unwrap();
        assert!((r.statistic - 4.0 * 4.5 * 4.5 / 15.0).abs() < 1e-12);
        let r = chi_square_independence(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!((r.degrees_of_freedom, r.p_value), (0, 1.0));
    }
}
