use std::fmt::Write as _;
use std::path::Path;

use super::eci::{EciBand, EciProfile, ECI_CATEGORIES};
use super::{chi_square_independence, kruskal_wallis};
use crate::cohort::{Cohort, Sex};
use crate::error::{Error, Result};

/// Median with the midpoint of the two central values for even n.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Count { n: usize, percent: f64 },
    Value(f64),
    Blank,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Count { n, percent } => format!("{n} ({percent:.1}%)"),
            Cell::Value(v) => format!("{v:.1}"),
            Cell::Blank => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variable: String,
    pub cells: Vec<Cell>,
    pub p_value: Option<f64>,
}

/// Per-subgroup demographics and comorbidity table. Columns follow
/// `subgroups`, the non-empty labels in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupReport {
    pub subgroups: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

impl SubgroupReport {
    pub fn row(&self, variable: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variable == variable)
    }

    pub fn p_values(&self) -> impl Iterator<Item = (&str, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.p_value.map(|p| (r.variable.as_str(), p)))
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["variable".to_string()];
        h.extend(self.subgroups.iter().map(|g| format!("subgroup_{}", g + 1)));
        h.push("p_value".into());
        h
    }

    /// `variable,subgroup_1..,p_value`; p-values at full precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::rates::csv_writer(path)?;
        let to_err = |e: csv::Error| Error::File {
            path: path.into(),
            message: e.to_string(),
        };
        w.write_record(self.header()).map_err(to_err)?;
        for r in &self.rows {
            let mut rec = vec![r.variable.clone()];
            rec.extend(r.cells.iter().map(Cell::render));
            rec.push(r.p_value.map_or(String::new(), |p| p.to_string()));
            w.write_record(rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = vec![self.header()];
        table[0][0].clear();
        for r in &self.rows {
            let mut line = vec![r.variable.clone()];
            line.extend(r.cells.iter().map(Cell::render));
            line.push(r.p_value.map_or(String::new(), format_p));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|j| {
                table
                    .iter()
                    .map(|l| l[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in &table {
            for (j, cell) in line.iter().enumerate() {
                if j == 0 {
                    let _ = write!(out, "{cell:<w$}", w = widths[0]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = widths[j]);
                }
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
        out
    }
}

/// Subgroup comparison table: size, sex, median age, median number of
/// diagnoses, median ECI score, ECI bands and all 29 categories.
/// Continuous rows are compared with Kruskal-Wallis, categorical rows with
/// a chi-square test of independence. Empty subgroups are dropped.
pub fn subgroup_report(
    cohort: &Cohort,
    labels: &[usize],
    profiles: &[EciProfile],
) -> Result<SubgroupReport> {
    let m = cohort.n_patients();
    if labels.len() != m || profiles.len() != m {
        return Err(Error::Dimension(format!(
            "{m} patients, {} labels, {} ECI profiles",
            labels.len(),
            profiles.len()
        )));
    }
    let n_labels = labels.iter().max().map_or(0, |l| l + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (l, mem) in members.iter().enumerate() {
        if mem.is_empty() {
            log::warn!("subgroup {} is empty and left out of the report", l + 1);
        }
    }
    let subgroups: Vec<usize> = (0..n_labels).filter(|&l| !members[l].is_empty()).collect();
    let groups: Vec<&Vec<usize>> = subgroups.iter().map(|&l| &members[l]).collect();
    let compare = groups.len() >= 2;
    let mut rows = Vec::new();

    let count_row = |name: &str, pred: &dyn Fn(usize) -> bool, with_p: bool| -> Result<ReportRow> {
        let hits: Vec<usize> = groups
            .iter()
            .map(|g| g.iter().filter(|&&i| pred(i)).count())
            .collect();
        let cells = hits
            .iter()
            .zip(&groups)
            .map(|(&n, g)| Cell::Count {
                n,
                percent: 100.0 * n as f64 / g.len() as f64,
            })
            .collect();
        let p_value = if compare && with_p {
            let table = vec![
                hits.iter().map(|&h| h as f64).collect(),
                hits.iter()
                    .zip(&groups)
                    .map(|(&h, g)| (g.len() - h) as f64)
                    .collect(),
            ];
            Some(chi_square_independence(&table)?.p_value)
        } else {
            None
        };
        Ok(ReportRow {
            variable: name.to_string(),
            cells,
            p_value,
        })
    };
    let median_row = |name: &str, value: &dyn Fn(usize) -> f64| -> Result<ReportRow> {
        let data: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| g.iter().map(|&i| value(i)).collect())
            .collect();
        let cells = data.iter().map(|d| Cell::Value(median(d))).collect();
        let p_value = if compare {
            Some(kruskal_wallis(&data)?.p_value)
        } else {
            None
        };
        Ok(ReportRow {
            variable: name.to_string(),
            cells,
            p_value,
        })
    };

    let total = m as f64;
    rows.push(ReportRow {
        variable: "patients".into(),
        cells: groups
            .iter()
            .map(|g| Cell::Count {
                n: g.len(),
                percent: 100.0 * g.len() as f64 / total,
            })
            .collect(),
        p_value: None,
    });
    let patients = cohort.patients();
    rows.push(count_row(
        "female",
        &|i| patients[i].sex == Sex::Female,
        true,
    )?);
    rows.push(count_row("male", &|i| patients[i].sex == Sex::Male, false)?);
    rows.push(median_row("median_age", &|i| patients[i].age_at_entry)?);
    rows.push(median_row("median_diagnoses", &|i| cohort.total(i) as f64)?);
    rows.push(median_row("median_eci", &|i| profiles[i].score as f64)?);

    let band_p = if compare {
        let table: Vec<Vec<f64>> = EciBand::ALL
            .iter()
            .map(|&b| {
                groups
                    .iter()
                    .map(|g| g.iter().filter(|&&i| profiles[i].band == b).count() as f64)
                    .collect()
            })
            .collect();
        Some(chi_square_independence(&table)?.p_value)
    } else {
        None
    };
    rows.push(ReportRow {
        variable: "eci_groups".into(),
        cells: vec![Cell::Blank; groups.len()],
        p_value: band_p,
    });
    for b in EciBand::ALL {
        rows.push(count_row(
            &format!("eci_{}", b.label()),
            &|i| profiles[i].band == b,
            false,
        )?);
    }
    for (c, name) in ECI_CATEGORIES.iter().enumerate() {
        rows.push(count_row(name, &|i| profiles[i].flags[c], true)?);
    }
    Ok(SubgroupReport { subgroups, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[4.0, 6.0]), 5.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.0004), "<0.001");
        assert_eq!(format_p(0.0132), "0.013");
    }
}
