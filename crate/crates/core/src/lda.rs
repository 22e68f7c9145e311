//! Latent Dirichlet allocation over diagnosis tokens, fitted by collapsed
//! Gibbs sampling.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::cohort::Cohort;
use crate::dist::categorical;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::topic::{combine_chains, ChainEstimate, ModelKind, SamplerConfig, TopicFit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdaHyperparams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl LdaHyperparams {
    /// `alpha = 50 / K`, `beta = 0.01`.
    pub fn with_topics(k: usize) -> Self {
        Self {
            k,
            alpha: 50.0 / k as f64,
            beta: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Parameter("K must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Parameter("alpha and beta must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LdaHyperparams {
    fn default() -> Self {
        Self::with_topics(20)
    }
}

/// Token codes per patient: code `v` with count `c` gives `c` copies of `v`,
/// in code-index order.
pub fn expand_tokens(cohort: &Cohort) -> Vec<Vec<usize>> {
    (0..cohort.n_patients())
        .map(|m| {
            cohort
                .diagnosed(m)
                .flat_map(|(n, c)| std::iter::repeat_n(n, c as usize))
                .collect()
        })
        .collect()
}

/// Assignments and the three count tables of a collapsed Gibbs chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaState {
    k: usize,
    v: usize,
    tokens: Vec<Vec<usize>>,
    z: Vec<Vec<usize>>,
    n_mk: Array2<u32>,
    n_kv: Array2<u32>,
    n_k: Vec<u32>,
}

impl LdaState {
    /// Uniformly random initial assignments.
    pub fn random<R: Rng + ?Sized>(
        tokens: Vec<Vec<usize>>,
        k: usize,
        v: usize,
        rng: &mut R,
    ) -> Self {
        let z = tokens
            .iter()
            .map(|doc| doc.iter().map(|_| rng.random_range(0..k)).collect())
            .collect();
        Self::from_assignments(tokens, z, k, v)
    }

    pub fn from_assignments(
        tokens: Vec<Vec<usize>>,
        z: Vec<Vec<usize>>,
        k: usize,
        v: usize,
    ) -> Self {
        let (n_mk, n_kv, n_k) = recount(&tokens, &z, k, v);
        Self {
            k,
            v,
            tokens,
            z,
            n_mk,
            n_kv,
            n_k,
        }
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.z
    }

    pub fn patient_topic_counts(&self) -> &Array2<u32> {
        &self.n_mk
    }

    pub fn topic_code_counts(&self) -> &Array2<u32> {
        &self.n_kv
    }

    pub fn topic_totals(&self) -> &[u32] {
        &self.n_k
    }

    /// True when a full recount from `z` reproduces the stored tables.
    pub fn counts_consistent(&self) -> bool {
        let (n_mk, n_kv, n_k) = recount(&self.tokens, &self.z, self.k, self.v);
        n_mk == self.n_mk && n_kv == self.n_kv && n_k == self.n_k
    }

    fn remove(&mut self, m: usize, i: usize) {
        let (v, k) = (self.tokens[m][i], self.z[m][i]);
        self.n_mk[[m, k]] -= 1;
        self.n_kv[[k, v]] -= 1;
        self.n_k[k] -= 1;
    }

    fn assign(&mut self, m: usize, i: usize, k: usize) {
        let v = self.tokens[m][i];
        self.z[m][i] = k;
        self.n_mk[[m, k]] += 1;
        self.n_kv[[k, v]] += 1;
        self.n_k[k] += 1;
    }

    fn unnormalized(&self, hyper: &LdaHyperparams, m: usize, v: usize, out: &mut [f64]) {
        let vbeta = self.v as f64 * hyper.beta;
        for (k, o) in out.iter_mut().enumerate() {
            *o = (self.n_mk[[m, k]] as f64 + hyper.alpha) * (self.n_kv[[k, v]] as f64 + hyper.beta)
                / (self.n_k[k] as f64 + vbeta);
        }
    }

    /// One systematic sweep over every token.
    pub fn sweep<R: Rng + ?Sized>(&mut self, hyper: &LdaHyperparams, rng: &mut R) {
        let mut w = vec![0.0; self.k];
        for m in 0..self.tokens.len() {
            for i in 0..self.tokens[m].len() {
                self.remove(m, i);
                self.unnormalized(hyper, m, self.tokens[m][i], &mut w);
                let k = categorical(&w, rng);
                self.assign(m, i, k);
            }
        }
    }

    pub fn theta_hat(&self, hyper: &LdaHyperparams) -> Array2<f64> {
        let ka = self.k as f64 * hyper.alpha;
        let mut theta = Array2::zeros(self.n_mk.dim());
        for (m, doc) in self.tokens.iter().enumerate() {
            let denom = doc.len() as f64 + ka;
            for k in 0..self.k {
                theta[[m, k]] = (self.n_mk[[m, k]] as f64 + hyper.alpha) / denom;
            }
        }
        theta
    }

    pub fn phi_hat(&self, hyper: &LdaHyperparams) -> Array2<f64> {
        let vb = self.v as f64 * hyper.beta;
        let mut phi = Array2::zeros(self.n_kv.dim());
        for k in 0..self.k {
            let denom = self.n_k[k] as f64 + vb;
            for v in 0..self.v {
                phi[[k, v]] = (self.n_kv[[k, v]] as f64 + hyper.beta) / denom;
            }
        }
        phi
    }
}

fn recount(
    tokens: &[Vec<usize>],
    z: &[Vec<usize>],
    k: usize,
    v: usize,
) -> (Array2<u32>, Array2<u32>, Vec<u32>) {
    let mut n_mk = Array2::zeros((tokens.len(), k));
    let mut n_kv = Array2::zeros((k, v));
    let mut n_k = vec![0; k];
    for (m, (doc, zs)) in tokens.iter().zip(z).enumerate() {
        for (&code, &t) in doc.iter().zip(zs) {
            n_mk[[m, t]] += 1;
            n_kv[[t, code]] += 1;
            n_k[t] += 1;
        }
    }
    (n_mk, n_kv, n_k)
}

/// Collapsed conditional for token `i` of patient `m`, computed as if the
/// token's own assignment were removed from the tables.
pub fn conditional_topic_probs(
    state: &LdaState,
    hyper: &LdaHyperparams,
    m: usize,
    i: usize,
) -> Vec<f64> {
    let mut s = state.clone();
    s.remove(m, i);
    let mut w = vec![0.0; s.k];
    s.unnormalized(hyper, m, s.tokens[m][i], &mut w);
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|p| *p /= total);
    w
}

pub fn fit_lda(
    cohort: &Cohort,
    hyper: &LdaHyperparams,
    config: &SamplerConfig,
) -> Result<TopicFit> {
    hyper.validate()?;
    config.validate()?;
    if cohort.n_patients() == 0 {
        return Err(Error::Data("cohort is empty".into()));
    }
    let tokens = expand_tokens(cohort);
    let chains: Vec<ChainEstimate> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(cohort, tokens.clone(), hyper, config, c as u64))
        .collect();
    Ok(combine_chains(ModelKind::Lda, chains))
}

fn run_chain(
    cohort: &Cohort,
    tokens: Vec<Vec<usize>>,
    hyper: &LdaHyperparams,
    config: &SamplerConfig,
    chain: u64,
) -> ChainEstimate {
    let mut rng = substream(config.seed, &[chain]);
    let mut state = LdaState::random(tokens, hyper.k, cohort.n_codes(), &mut rng);
    let mut theta = Array2::zeros((cohort.n_patients(), hyper.k));
    let mut phi = Array2::zeros((hyper.k, cohort.n_codes()));
    let mut kept = 0usize;
    let mut trace = Vec::with_capacity(config.burn_in + config.samples);
    for s in 0..config.burn_in + config.samples {
        state.sweep(hyper, &mut rng);
        let t = state.theta_hat(hyper);
        let p = state.phi_hat(hyper);
        trace.push(count_log_likelihood(cohort, &t, &p));
        if s >= config.burn_in && config.keeps(s - config.burn_in) {
            theta += &t;
            phi += &p;
            kept += 1;
        }
    }
    log::debug!("lda chain {chain}: final log-likelihood {:?}", trace.last());
    ChainEstimate {
        theta: theta / kept as f64,
        phi: phi / kept as f64,
        gamma: None,
        acceptance: None,
        trace,
    }
}

fn count_log_likelihood(cohort: &Cohort, theta: &Array2<f64>, phi: &Array2<f64>) -> f64 {
    let k = theta.ncols();
    let mut ll = 0.0;
    for m in 0..cohort.n_patients() {
        for (n, c) in cohort.diagnosed(m) {
            let p: f64 = (0..k).map(|t| theta[[m, t]] * phi[[t, n]]).sum();
            ll += c as f64 * p.ln();
        }
    }
    ll
}

/// Normalised sum of token-level topic responsibilities per patient.
pub fn patient_topic_posterior(fit: &TopicFit, cohort: &Cohort) -> Result<Array2<f64>> {
    fit.check_dims(cohort)?;
    let k = fit.n_topics();
    let mut out = Array2::zeros((cohort.n_patients(), k));
    let mut r = vec![0.0; k];
    for m in 0..cohort.n_patients() {
        for (n, c) in cohort.diagnosed(m) {
            for (t, rt) in r.iter_mut().enumerate() {
                *rt = fit.theta[[m, t]] * fit.phi[[t, n]];
            }
            let total: f64 = r.iter().sum();
            for t in 0..k {
                out[[m, t]] += c as f64 * r[t] / total;
            }
        }
        let total: f64 = out.row(m).sum();
        out.row_mut(m).mapv_inplace(|v| v / total);
    }
    Ok(out)
}

/// Sum over tokens of `log sum_k theta[m,k] phi[k,v]`.
pub fn log_likelihood(fit: &TopicFit, cohort: &Cohort) -> Result<f64> {
    fit.check_dims(cohort)?;
    Ok(count_log_likelihood(cohort, &fit.theta, &fit.phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{tests::patient, DiseaseVocabulary, Sex};
    use crate::rng::rng_from_seed;
    use ndarray::array;

    fn small_cohort(rows: Array2<u32>) -> Cohort {
        let v = rows.ncols();
        let vocab = DiseaseVocabulary::new((0..v).map(|i| format!("c{i}"))).unwrap();
        let patients = (0..rows.nrows())
            .map(|m| patient(&format!("P{m}"), Sex::Female, 70.0, 5.0))
            .collect();
        Cohort::new(vocab, patients, rows).unwrap()
    }

    #[test]
    fn tokens_follow_code_order() {
        let c = small_cohort(array![[2, 1], [0, 3]]);
        assert_eq!(expand_tokens(&c), vec![vec![0, 0, 1], vec![1, 1, 1]]);
    }

    #[test]
    fn worked_conditional() {
        // after removing the probe: n_m = (2, 0), n_{k,v} = (3, 0), n_k = (5, 0)
        let tokens = vec![vec![0, 0, 1], vec![1, 1, 1]];
        let z = vec![vec![0, 0, 0], vec![0, 0, 0]];
        let state = LdaState::from_assignments(tokens, z, 2, 2);
        let hyper = LdaHyperparams {
            k: 2,
            alpha: 1.0,
            beta: 1.0,
        };
        let p = conditional_topic_probs(&state, &hyper, 0, 2);
        let (a, b) = (12.0 / 7.0, 0.5);
        assert!((p[0] - a / (a + b)).abs() < 1e-12);
        assert!((p[1] - b / (a + b)).abs() < 1e-12);
        assert!((p[0] - 0.774).abs() < 1e-3);
    }

    #[test]
    fn empty_tables_give_uniform() {
        let state = LdaState::from_assignments(vec![vec![0]], vec![vec![2]], 4, 3);
        let hyper = LdaHyperparams {
            k: 4,
            alpha: 0.3,
            beta: 0.2,
        };
        let p = conditional_topic_probs(&state, &hyper, 0, 0);
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn counts_survive_sweeps() {
        let c = small_cohort(array![[2, 1, 0], [0, 3, 1], [1, 1, 1]]);
        let hyper = LdaHyperparams {
            k: 3,
            alpha: 0.5,
            beta: 0.1,
        };
        let mut rng = rng_from_seed(4);
        let mut s = LdaState::random(expand_tokens(&c), 3, 3, &mut rng);
        for _ in 0..50 {
            s.sweep(&hyper, &mut rng);
            assert!(s.counts_consistent());
        }
    }

    #[test]
    fn single_topic_phi_is_smoothed_frequency() {
        let c = small_cohort(array![[2, 1, 0], [0, 3, 1]]);
        let hyper = LdaHyperparams {
            k: 1,
            alpha: 1.0,
            beta: 0.5,
        };
        let config = SamplerConfig {
            chains: 2,
            burn_in: 3,
            samples: 7,
            thin: 1,
            seed: 9,
        };
        let fit = fit_lda(&c, &hyper, &config).unwrap();
        let total = 7.0;
        for (v, col) in [2.0, 4.0, 1.0].iter().enumerate() {
            assert!((fit.phi[[0, v]] - (col + 0.5) / (total + 1.5)).abs() < 1e-12);
        }
        assert!(fit.theta.iter().all(|t| (t - 1.0).abs() < 1e-12));
        let post = patient_topic_posterior(&fit, &c).unwrap();
        assert!(post.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_token_log_likelihood() {
        let c = small_cohort(array![[0, 1, 0, 0]]);
        let fit = TopicFit {
            model: ModelKind::Lda,
            theta: array![[1.0]],
            phi: array![[0.25, 0.25, 0.25, 0.25]],
            traces: vec![],
            gamma: None,
            acceptance: None,
        };
        assert!((log_likelihood(&fit, &c).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }
}
