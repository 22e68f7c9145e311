//! Types shared by the two topic models: chain settings, the fitted
//! mixture/profile matrices, cross-chain label alignment, and CSV export.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::rates::csv_writer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    /// Two chains, 500 burn-in sweeps, 1000 retained sweeps.
    fn default() -> Self {
        Self {
            chains: 2,
            burn_in: 500,
            samples: 1000,
            thin: 1,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.thin == 0 {
            return Err(Error::Parameter(
                "chains, samples and thin must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether post-burn-in sweep `s` (0-based) is retained.
    pub(crate) fn keeps(&self, s: usize) -> bool {
        s % self.thin == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lda,
    Pdm,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "lda" => Some(ModelKind::Lda),
            "pdm" => Some(ModelKind::Pdm),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lda => "lda",
            ModelKind::Pdm => "pdm",
        })
    }
}

/// Posterior point estimates from one or more chains.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicFit {
    pub model: ModelKind,
    /// `M x K`, rows on the simplex.
    pub theta: Array2<f64>,
    /// `K x V`, rows on the simplex.
    pub phi: Array2<f64>,
    /// Log-likelihood after every sweep (burn-in included), per chain.
    pub traces: Vec<Vec<f64>>,
    /// Posterior mean patient multipliers (PDM only).
    pub gamma: Option<Vec<f64>>,
    /// Post-burn-in acceptance rate per chain and cluster (PDM only).
    pub acceptance: Option<Vec<Vec<f64>>>,
}

impl TopicFit {
    pub fn n_topics(&self) -> usize {
        self.phi.nrows()
    }

    pub fn check_dims(&self, cohort: &Cohort) -> Result<()> {
        if self.theta.nrows() != cohort.n_patients()
            || self.phi.ncols() != cohort.n_codes()
            || self.theta.ncols() != self.phi.nrows()
        {
            return Err(Error::Dimension(format!(
                "fit is theta {:?} / phi {:?}, cohort is {} x {}",
                self.theta.dim(),
                self.phi.dim(),
                cohort.n_patients(),
                cohort.n_codes()
            )));
        }
        Ok(())
    }

    /// Write `theta.csv`, `phi.csv`, `diagnostics.csv`, and for PDM fits
    /// `gamma.csv` and `acceptance.csv` into `dir`.
    pub fn write_dir(&self, cohort: &Cohort, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        let ids: Vec<&str> = cohort.patients().iter().map(|p| p.id.as_str()).collect();

        let path = dir.join("theta.csv");
        write_rows(&path, ["patient_id", "topic", "weight"], |w| {
            for (m, id) in ids.iter().enumerate() {
                for k in 0..self.theta.ncols() {
                    w.write_record([
                        id.to_string(),
                        k.to_string(),
                        self.theta[[m, k]].to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        written.push(path);

        let path = dir.join("phi.csv");
        write_rows(&path, ["topic", "code", "weight"], |w| {
            for k in 0..self.phi.nrows() {
                for n in 0..self.phi.ncols() {
                    w.write_record([
                        k.to_string(),
                        cohort.vocabulary().code(n).to_string(),
                        self.phi[[k, n]].to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        written.push(path);

        let path = dir.join("diagnostics.csv");
        write_rows(&path, ["chain", "sweep", "log_likelihood"], |w| {
            for (c, trace) in self.traces.iter().enumerate() {
                for (s, ll) in trace.iter().enumerate() {
                    w.write_record([c.to_string(), s.to_string(), ll.to_string()])?;
                }
            }
            Ok(())
        })?;
        written.push(path);

        if let Some(gamma) = &self.gamma {
            let path = dir.join("gamma.csv");
            write_rows(&path, ["patient_id", "gamma"], |w| {
                for (id, g) in ids.iter().zip(gamma) {
                    w.write_record([id.to_string(), g.to_string()])?;
                }
                Ok(())
            })?;
            written.push(path);
        }
        if let Some(acc) = &self.acceptance {
            let path = dir.join("acceptance.csv");
            write_rows(&path, ["chain", "cluster", "rate"], |w| {
                for (c, rates) in acc.iter().enumerate() {
                    for (k, r) in rates.iter().enumerate() {
                        w.write_record([c.to_string(), k.to_string(), r.to_string()])?;
                    }
                }
                Ok(())
            })?;
            written.push(path);
        }
        Ok(written)
    }

    /// Read back the matrices written by [`TopicFit::write_dir`]. Traces
    /// and acceptance rates are not restored.
    pub fn read_dir(model: ModelKind, cohort: &Cohort, dir: &Path) -> Result<TopicFit> {
        let patient_index: HashMap<&str, usize> = cohort
            .patients()
            .iter()
            .enumerate()
            .map(|(m, p)| (p.id.as_str(), m))
            .collect();
        let theta_rows = read_triples(&dir.join("theta.csv"))?;
        let phi_rows = read_triples(&dir.join("phi.csv"))?;
        let k = phi_rows
            .iter()
            .map(|r| r.0.parse::<usize>().map(|v| v + 1))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::File {
                path: dir.join("phi.csv"),
                message: "topic must be an integer".into(),
            })?
            .into_iter()
            .max()
            .unwrap_or(0);
        let mut theta = Array2::from_elem((cohort.n_patients(), k), f64::NAN);
        let mut phi = Array2::from_elem((k, cohort.n_codes()), f64::NAN);
        for (line, (pid, topic, w)) in theta_rows.iter().enumerate() {
            let path = dir.join("theta.csv");
            let m = *patient_index.get(pid.as_str()).ok_or_else(|| {
                Error::malformed(&path, line as u64 + 2, format!("unknown patient {pid}"))
            })?;
            let t: usize = topic
                .parse()
                .ok()
                .filter(|t| *t < k)
                .ok_or_else(|| Error::malformed(&path, line as u64 + 2, "bad topic index"))?;
            theta[[m, t]] = *w;
        }
        for (line, (topic, code, w)) in phi_rows.iter().enumerate() {
            let path = dir.join("phi.csv");
            let n = cohort.vocabulary().index_of(code).ok_or_else(|| {
                Error::malformed(&path, line as u64 + 2, format!("unknown code {code}"))
            })?;
            phi[[topic.parse::<usize>().unwrap(), n]] = *w;
        }
        if theta.iter().chain(phi.iter()).any(|v| v.is_nan()) {
            return Err(Error::File {
                path: dir.to_path_buf(),
                message: "theta.csv / phi.csv do not cover the cohort".into(),
            });
        }
        let gamma_path = dir.join("gamma.csv");
        let gamma = if gamma_path.exists() {
            Some(read_gamma(
                &gamma_path,
                &patient_index,
                cohort.n_patients(),
            )?)
        } else {
            None
        };
        Ok(TopicFit {
            model,
            theta,
            phi,
            traces: Vec::new(),
            gamma,
            acceptance: None,
        })
    }
}

fn read_triples(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::malformed(path, line, "expected three fields"));
        }
        let w: f64 = rec[2]
            .parse()
            .map_err(|_| Error::malformed(path, line, "weight must be a number"))?;
        out.push((rec[0].to_string(), rec[1].to_string(), w));
    }
    Ok(out)
}

fn read_gamma(path: &Path, index: &HashMap<&str, usize>, m: usize) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })?;
    let mut gamma = vec![f64::NAN; m];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = *index
            .get(&rec[0])
            .ok_or_else(|| Error::malformed(path, line, format!("unknown patient {}", &rec[0])))?;
        gamma[row] = rec[1]
            .parse()
            .map_err(|_| Error::malformed(path, line, "gamma must be a number"))?;
    }
    if gamma.iter().any(|g| g.is_nan()) {
        return Err(Error::File {
            path: path.into(),
            message: "gamma.csv does not cover every patient".into(),
        });
    }
    Ok(gamma)
}

pub(crate) fn write_rows<const N: usize>(
    path: &Path,
    header: [&str; N],
    body: impl FnOnce(&mut csv::Writer<std::fs::File>) -> std::result::Result<(), csv::Error>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    let to_err = |e: csv::Error| Error::File {
        path: path.into(),
        message: e.to_string(),
    };
    w.write_record(header).map_err(to_err)?;
    body(&mut w).map_err(to_err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy one-to-one matching of the rows of `other` onto the rows of
/// `reference` by cosine similarity. Returns `perm` with
/// `perm[reference_row] = other_row`.
pub fn greedy_row_matching(reference: &Array2<f64>, other: &Array2<f64>) -> Vec<usize> {
    let k = reference.nrows();
    let mut pairs = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let c = cosine(
                reference.row(i).as_slice().expect("standard layout"),
                other.row(j).as_slice().expect("standard layout"),
            );
            pairs.push((c, i, j));
        }
    }
    // highest similarity first; ties by smaller indices
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for (_, i, j) in pairs {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    perm
}

/// One chain's point estimates before cross-chain averaging.
#[derive(Debug, Clone)]
pub(crate) struct ChainEstimate {
    pub theta: Array2<f64>,
    pub phi: Array2<f64>,
    pub gamma: Option<Vec<f64>>,
    pub acceptance: Option<Vec<f64>>,
    pub trace: Vec<f64>,
}

/// Align every chain to the first by greedy phi-row matching, then average.
pub(crate) fn combine_chains(model: ModelKind, chains: Vec<ChainEstimate>) -> TopicFit {
    let reference = chains[0].phi.clone();
    let n = chains.len() as f64;
    let mut theta = Array2::<f64>::zeros(chains[0].theta.dim());
    let mut phi = Array2::<f64>::zeros(reference.dim());
    let mut gamma = chains[0].gamma.as_ref().map(|g| vec![0.0; g.len()]);
    let mut traces = Vec::new();
    let mut acceptance = chains[0].acceptance.as_ref().map(|_| Vec::new());
    for chain in chains {
        let perm = greedy_row_matching(&reference, &chain.phi);
        for (k, &src) in perm.iter().enumerate() {
            phi.row_mut(k).scaled_add(1.0 / n, &chain.phi.row(src));
            theta
                .column_mut(k)
                .scaled_add(1.0 / n, &chain.theta.column(src));
        }
        if let (Some(total), Some(g)) = (gamma.as_mut(), chain.gamma.as_ref()) {
            total.iter_mut().zip(g).for_each(|(t, v)| *t += v / n);
        }
        if let (Some(all), Some(acc)) = (acceptance.as_mut(), chain.acceptance.as_ref()) {
            all.push(perm.iter().map(|&src| acc[src]).collect());
        }
        traces.push(chain.trace);
    }
    TopicFit {
        model,
        theta,
        phi,
        traces,
        gamma,
        acceptance,
    }
}

/// Optimal one-to-one matching (exhaustive for small K, greedy otherwise)
/// maximising total cosine similarity; returns the matched cosines in
/// reference-row order.
pub fn matched_cosines(reference: &Array2<f64>, estimate: &Array2<f64>) -> Vec<f64> {
    let k = reference.nrows();
    let sim = |i: usize, j: usize| cosine(&reference.row(i).to_vec(), &estimate.row(j).to_vec());
    if k <= 8 {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut perm: Vec<usize> = (0..k).collect();
        permute(&mut perm, 0, &mut |p| {
            let total: f64 = p.iter().enumerate().map(|(i, &j)| sim(i, j)).sum();
            if total > best.0 {
                best = (total, p.to_vec());
            }
        });
        best.1.iter().enumerate().map(|(i, &j)| sim(i, j)).collect()
    } else {
        greedy_row_matching(reference, estimate)
            .iter()
            .enumerate()
            .map(|(i, &j)| sim(i, j))
            .collect()
    }
}

/// Same matching as [`matched_cosines`], returned as `perm[reference] = estimate`.
pub fn best_matching(reference: &Array2<f64>, estimate: &Array2<f64>) -> Vec<usize> {
    let k = reference.nrows();
    if k > 8 {
        return greedy_row_matching(reference, estimate);
    }
    let sim = |i: usize, j: usize| cosine(&reference.row(i).to_vec(), &estimate.row(j).to_vec());
    let mut best = (f64::NEG_INFINITY, (0..k).collect::<Vec<_>>());
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| sim(i, j)).sum();
        if total > best.0 {
            best = (total, p.to_vec());
        }
    });
    best.1
}

fn permute(p: &mut Vec<usize>, start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Normalise each row of a non-negative matrix to sum to one. All-zero rows
/// become uniform.
pub fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    let k = m.ncols() as f64;
    for mut row in m.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            row.fill(1.0 / k);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn greedy_matching_recovers_permutation() {
        let a = array![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
        let b = array![[0.1, 0.1, 0.8], [0.8, 0.1, 0.1], [0.1, 0.8, 0.1]];
        assert_eq!(greedy_row_matching(&a, &b), vec![1, 2, 0]);
        assert_eq!(best_matching(&a, &b), vec![1, 2, 0]);
        let cos = matched_cosines(&a, &b);
        assert!(cos.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn combine_aligns_label_switched_chains() {
        let phi = array![[0.9, 0.1], [0.2, 0.8]];
        let theta = array![[0.7, 0.3]];
        let swapped_phi = array![[0.2, 0.8], [0.9, 0.1]];
        let swapped_theta = array![[0.3, 0.7]];
        let chains = vec![
            ChainEstimate {
                theta: theta.clone(),
                phi: phi.clone(),
                gamma: None,
                acceptance: None,
                trace: vec![],
            },
            ChainEstimate {
                theta: swapped_theta,
                phi: swapped_phi,
                gamma: None,
                acceptance: None,
                trace: vec![],
            },
        ];
        let fit = combine_chains(ModelKind::Lda, chains);
        assert!((&fit.phi - &phi).iter().all(|d| d.abs() < 1e-15));
        assert!((&fit.theta - &theta).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn normalize_handles_zero_rows() {
        let m = normalize_rows(array![[0.0, 0.0], [1.0, 3.0]]);
        assert_eq!(m, array![[0.5, 0.5], [0.25, 0.75]]);
    }
}
