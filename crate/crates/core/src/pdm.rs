//! Poisson Dirichlet model: diagnosis counts modelled as Poisson around
//! `phi[z, n] * e[m, n] * gamma[m]`, where `e` are fixed expected counts.
//!
//! Inference is Gibbs for the cluster labels, patient multipliers and
//! mixtures, and Metropolis-Hastings with a Dirichlet proposal for each
//! topic-disease row.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::cluster::{kmeans, SubgroupAssignment};
use crate::cohort::Cohort;
use crate::dist::{categorical, dirichlet, dirichlet_ln_pdf, gamma_shape_rate};
use crate::error::{Error, Result};
use crate::rates::ExpectedCounts;
use crate::rng::{substream, SimRng};
use crate::topic::{
    combine_chains, normalize_rows, ChainEstimate, ModelKind, SamplerConfig, TopicFit,
};

/// Jitter added to proposal coordinates that underflow to exactly zero.
pub const EPS_SIMPLEX: f64 = 1e-12;
/// Burn-in adaptation drives each row's acceptance rate toward this value.
pub const TARGET_ACCEPTANCE: f64 = 0.3;
/// k-means restarts used to pick the starting phi rows.
const INIT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdmHyperparams {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Gamma prior shape.
    pub xi: f64,
    /// Gamma prior scale.
    pub delta: f64,
    /// Initial concentration `c` of the Dirichlet(c * phi_k) proposal.
    pub phi_proposal_concentration: f64,
    /// MH proposals per phi row per sweep.
    pub phi_steps: usize,
    pub scope: LikelihoodScope,
}

/// Which (patient, disease) pairs enter the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodScope {
    /// Only diagnosed pairs (`y > 0`) carry a label and a Poisson term.
    #[default]
    Diagnosed,
    /// Every pair, zero counts included.
    AllPairs,
}

impl LikelihoodScope {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "diagnosed" => Some(Self::Diagnosed),
            "all-pairs" | "all" => Some(Self::AllPairs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Diagnosed => "diagnosed",
            Self::AllPairs => "all-pairs",
        }
    }
}

impl Default for PdmHyperparams {
    fn default() -> Self {
        Self {
            k: 20,
            alpha: 1.0,
            beta: 1.0,
            xi: 2.0,
            delta: 0.5,
            phi_proposal_concentration: 500.0,
            phi_steps: 10,
            scope: LikelihoodScope::Diagnosed,
        }
    }
}

impl PdmHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.phi_steps == 0 {
            return Err(Error::Parameter(
                "K and phi_steps must be at least 1".into(),
            ));
        }
        let positive = [
            self.alpha,
            self.beta,
            self.xi,
            self.delta,
            self.phi_proposal_concentration,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter(
                "alpha, beta, xi, delta and the proposal concentration must be positive".into(),
            ));
        }
        if (self.xi * self.delta - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "gamma prior mean xi * delta must be 1, got {}",
                self.xi * self.delta
            )));
        }
        Ok(())
    }
}

/// One (patient, disease) pair carrying a cluster label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub m: usize,
    pub n: usize,
    pub y: u32,
    pub e: f64,
}

/// The pairs that enter the likelihood, grouped by patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmData {
    n_patients: usize,
    n_codes: usize,
    slots: Vec<Slot>,
    by_patient: Vec<Range<usize>>,
}

impl PdmData {
    /// Pairs with a positive count only: undiagnosed diseases contribute no
    /// likelihood term.
    pub fn from_cohort(cohort: &Cohort, expected: &ExpectedCounts) -> Result<Self> {
        Self::build(cohort, expected, false)
    }

    /// Every (patient, disease) pair, zero counts included.
    pub fn with_zero_counts(cohort: &Cohort, expected: &ExpectedCounts) -> Result<Self> {
        Self::build(cohort, expected, true)
    }

    fn build(cohort: &Cohort, expected: &ExpectedCounts, zeros: bool) -> Result<Self> {
        if expected.dim() != (cohort.n_patients(), cohort.n_codes()) {
            return Err(Error::Dimension(format!(
                "expected counts are {:?}, cohort is {} x {}",
                expected.dim(),
                cohort.n_patients(),
                cohort.n_codes()
            )));
        }
        let mut slots = Vec::new();
        for m in 0..cohort.n_patients() {
            for (n, &y) in cohort.row(m).iter().enumerate() {
                if y > 0 || zeros {
                    slots.push(Slot {
                        m,
                        n,
                        y,
                        e: expected.get(m, n),
                    });
                }
            }
        }
        Self::from_slots(cohort.n_patients(), cohort.n_codes(), slots)
    }

    /// Slots must be ordered by patient, then disease.
    pub fn from_slots(n_patients: usize, n_codes: usize, slots: Vec<Slot>) -> Result<Self> {
        if slots
            .windows(2)
            .any(|w| (w[0].m, w[0].n) >= (w[1].m, w[1].n))
        {
            return Err(Error::Data(
                "slots must be strictly ordered by (patient, disease)".into(),
            ));
        }
        if slots.iter().any(|s| s.m >= n_patients || s.n >= n_codes) {
            return Err(Error::Dimension("slot index out of range".into()));
        }
        if slots.iter().any(|s| !(s.e > 0.0 && s.e.is_finite())) {
            return Err(Error::Data("expected counts must be positive".into()));
        }
        let mut by_patient = Vec::with_capacity(n_patients);
        let mut start = 0;
        for m in 0..n_patients {
            let end = start + slots[start..].iter().take_while(|s| s.m == m).count();
            by_patient.push(start..end);
            start = end;
        }
        Ok(Self {
            n_patients,
            n_codes,
            slots,
            by_patient,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn patient_slots(&self, m: usize) -> Range<usize> {
        self.by_patient[m].clone()
    }

    pub fn slot_index(&self, m: usize, n: usize) -> Option<usize> {
        let r = self.patient_slots(m);
        self.slots[r.clone()]
            .binary_search_by_key(&n, |s| s.n)
            .ok()
            .map(|i| r.start + i)
    }

    /// Redraw every count from the model given the state.
    pub fn resample_counts<R: Rng + ?Sized>(&mut self, state: &PdmState, rng: &mut R) {
        for (i, s) in self.slots.iter_mut().enumerate() {
            let mean = state.phi[[state.z[i], s.n]] * s.e * state.gamma[s.m];
            s.y = poisson_draw(mean, rng);
        }
    }
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    use rand_distr::{Distribution, Poisson};
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u32
}

/// Sampler state for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmState {
    /// Cluster label per slot.
    pub z: Vec<usize>,
    pub gamma: Vec<f64>,
    pub theta: Array2<f64>,
    pub phi: Array2<f64>,
    /// Accepted and attempted phi-row proposals, over all sweeps.
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    /// Current proposal concentration per phi row.
    pub concentration: Vec<f64>,
}

impl PdmState {
    /// A draw from the prior, with labels drawn from each patient's mixture.
    pub fn from_prior<R: Rng + ?Sized>(
        hyper: &PdmHyperparams,
        data: &PdmData,
        rng: &mut R,
    ) -> Self {
        let (m, v, k) = (data.n_patients, data.n_codes, hyper.k);
        let mut theta = Array2::zeros((m, k));
        for i in 0..m {
            let row = dirichlet(&vec![hyper.alpha; k], rng);
            theta.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        let mut phi = Array2::zeros((k, v));
        for i in 0..k {
            let row = jitter(dirichlet(&vec![hyper.beta; v], rng));
            phi.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        let gamma = (0..m)
            .map(|_| gamma_shape_rate(hyper.xi, 1.0 / hyper.delta, rng))
            .collect();
        let z = data
            .slots
            .iter()
            .map(|s| categorical(theta.row(s.m).as_slice().unwrap(), rng))
            .collect();
        Self {
            z,
            gamma,
            theta,
            phi,
            accepted: vec![0; k],
            proposed: vec![0; k],
            concentration: vec![hyper.phi_proposal_concentration; k],
        }
    }

    /// Data-informed start. Patients are grouped by k-means (best of
    /// several restarts) on their
    /// normalised observed-to-expected profiles (square-root scale) and each
    /// phi row starts at its group's pooled ratio profile; gamma matches each
    /// patient's total under its group's row, theta is uniform and labels are
    /// drawn uniformly. With fewer patients than clusters the rows are noisy
    /// copies of the pooled profile instead.
    pub fn initial<R: Rng + ?Sized>(hyper: &PdmHyperparams, data: &PdmData, rng: &mut R) -> Self {
        let (m, v, k) = (data.n_patients, data.n_codes, hyper.k);
        let mut profiles = Array2::<f64>::zeros((m, v));
        for s in &data.slots {
            profiles[[s.m, s.n]] = s.y as f64 / s.e;
        }
        let groups: Vec<usize> = if k > 1 && k <= m {
            let mut features = normalize_rows(profiles.clone());
            features.mapv_inplace(f64::sqrt);
            let mut best: Option<SubgroupAssignment> = None;
            for _ in 0..INIT_RESTARTS {
                if let Ok(a) = kmeans(&features, k, rng.random()) {
                    if best.as_ref().is_none_or(|b| a.objective < b.objective) {
                        best = Some(a);
                    }
                }
            }
            best.map_or_else(|| vec![0; m], |a| a.labels)
        } else {
            vec![0; m]
        };
        let mut y_sum = Array2::from_elem((k, v), 0.5);
        let mut e_sum = Array2::from_elem((k, v), 0.5);
        for s in &data.slots {
            y_sum[[groups[s.m], s.n]] += s.y as f64;
            e_sum[[groups[s.m], s.n]] += s.e;
        }
        let mut phi = Array2::zeros((k, v));
        let noisy = k > m || k == 1;
        for i in 0..k {
            let src = if noisy { 0 } else { i };
            let row: Vec<f64> = (0..v)
                .map(|n| {
                    let r = y_sum[[src, n]] / e_sum[[src, n]];
                    if noisy && k > 1 {
                        r * gamma_shape_rate(2.0, 2.0, rng)
                    } else {
                        r
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            for (n, r) in row.iter().enumerate() {
                phi[[i, n]] = (r / total).max(EPS_SIMPLEX);
            }
        }
        let gamma = (0..m)
            .map(|i| {
                let r = data.patient_slots(i);
                let row = if noisy { 0 } else { groups[i] };
                let y: f64 = data.slots[r.clone()].iter().map(|s| s.y as f64).sum();
                let fit: f64 = data.slots[r].iter().map(|s| phi[[row, s.n]] * s.e).sum();
                ((hyper.xi + y) / (1.0 / hyper.delta + fit)).max(1e-6)
            })
            .collect();
        let z = data.slots.iter().map(|_| rng.random_range(0..k)).collect();
        Self {
            z,
            gamma,
            theta: Array2::from_elem((m, k), 1.0 / k as f64),
            phi,
            accepted: vec![0; k],
            proposed: vec![0; k],
            concentration: vec![hyper.phi_proposal_concentration; k],
        }
    }
}

/// Outcome of one Metropolis-Hastings accept/reject step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhDecision {
    pub log_acceptance: f64,
    pub accepted: bool,
    pub uniform_draw: f64,
}

/// `min(1, P(x*) Q(x | x*) / (P(x) Q(x* | x)))` from log densities.
pub fn mh_accept_prob(
    log_p_current: f64,
    log_p_proposed: f64,
    log_q_forward: f64,
    log_q_backward: f64,
) -> f64 {
    log_accept(log_p_current, log_p_proposed, log_q_forward, log_q_backward).exp()
}

fn log_accept(
    log_p_current: f64,
    log_p_proposed: f64,
    log_q_forward: f64,
    log_q_backward: f64,
) -> f64 {
    if log_p_proposed == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let r = log_p_proposed + log_q_backward - log_p_current - log_q_forward;
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

/// Accept when `ln(u) <= log_acceptance` for `u ~ U[0, 1)`.
pub fn mh_decide<R: Rng + ?Sized>(log_acceptance: f64, rng: &mut R) -> MhDecision {
    let u: f64 = rng.random();
    MhDecision {
        log_acceptance,
        accepted: u.ln() <= log_acceptance,
        uniform_draw: u,
    }
}

/// Log of `theta[m,k] * Poisson(y; phi[k,n] e gamma)` for every k.
fn z_log_weights(state: &PdmState, slot: &Slot, out: &mut [f64]) -> f64 {
    let scale = slot.e * state.gamma[slot.m];
    let y = slot.y as f64;
    let ln_y_fact = ln_gamma(y + 1.0);
    let ln_scale = scale.ln();
    for (k, o) in out.iter_mut().enumerate() {
        let phi = state.phi[[k, slot.n]];
        *o = state.theta[[slot.m, k]].ln() + y * (phi.ln() + ln_scale) - phi * scale - ln_y_fact;
    }
    ln_y_fact
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Full conditional of the label on slot `i`.
pub fn z_conditional_probs(state: &PdmState, data: &PdmData, i: usize) -> Vec<f64> {
    let mut w = vec![0.0; state.theta.ncols()];
    z_log_weights(state, &data.slots[i], &mut w);
    let lse = log_sum_exp(&w);
    w.iter().map(|l| (l - lse).exp()).collect()
}

pub fn sample_z_conditional<R: Rng + ?Sized>(
    state: &PdmState,
    data: &PdmData,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<usize> {
    let i = data
        .slot_index(m, n)
        .ok_or_else(|| Error::Data(format!("patient {m} has no count for disease {n}")))?;
    Ok(categorical(&z_conditional_probs(state, data, i), rng))
}

/// Shape and rate of the gamma full conditional for patient `m`:
/// `Gamma(xi + sum y, 1/delta + sum phi[z,n] e)`.
pub fn gamma_conditional(
    state: &PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    m: usize,
) -> (f64, f64) {
    let mut shape = hyper.xi;
    let mut rate = 1.0 / hyper.delta;
    for i in data.patient_slots(m) {
        let s = &data.slots[i];
        shape += s.y as f64;
        rate += state.phi[[state.z[i], s.n]] * s.e;
    }
    (shape, rate)
}

pub fn sample_gamma_conditional<R: Rng + ?Sized>(
    state: &PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    m: usize,
    rng: &mut R,
) -> f64 {
    let (shape, rate) = gamma_conditional(state, hyper, data, m);
    gamma_shape_rate(shape, rate, rng)
}

/// Dirichlet concentration `alpha + c[m, .]` of the theta full conditional.
pub fn theta_conditional(
    state: &PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    m: usize,
) -> Vec<f64> {
    let mut a = vec![hyper.alpha; state.theta.ncols()];
    for i in data.patient_slots(m) {
        a[state.z[i]] += 1.0;
    }
    a
}

pub fn sample_theta_conditional<R: Rng + ?Sized>(
    state: &PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    m: usize,
    rng: &mut R,
) -> Vec<f64> {
    dirichlet(&theta_conditional(state, hyper, data, m), rng)
}

/// Per-code sufficient statistics of the slots labelled with each cluster:
/// `a[k][n] = sum y`, `b[k][n] = sum e * gamma`.
fn phi_stats(state: &PdmState, data: &PdmData, k: usize) -> (Array2<f64>, Array2<f64>) {
    let mut a = Array2::zeros((k, data.n_codes));
    let mut b = Array2::zeros((k, data.n_codes));
    for (i, s) in data.slots.iter().enumerate() {
        let t = state.z[i];
        a[[t, s.n]] += s.y as f64;
        b[[t, s.n]] += s.e * state.gamma[s.m];
    }
    (a, b)
}

fn phi_log_target(beta: f64, a: &[f64], b: &[f64], row: &[f64]) -> f64 {
    row.iter()
        .zip(a.iter().zip(b))
        .map(|(&p, (&a, &b))| (beta - 1.0 + a) * p.ln() - b * p)
        .sum()
}

/// Unnormalised log posterior of row `k` of phi at `row`, given the rest of
/// the state: Dirichlet(beta) prior times the Poisson terms of the slots
/// labelled `k`.
pub fn phi_row_log_target(
    state: &PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    k: usize,
    row: &[f64],
) -> f64 {
    let (a, b) = phi_stats(state, data, state.phi.nrows());
    phi_log_target(
        hyper.beta,
        a.row(k).as_slice().unwrap(),
        b.row(k).as_slice().unwrap(),
        row,
    )
}

fn jitter(mut row: Vec<f64>) -> Vec<f64> {
    if row.iter().any(|&p| p <= 0.0) {
        row.iter_mut().for_each(|p| *p += EPS_SIMPLEX);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    row
}

fn mh_phi_step<R: Rng + ?Sized>(
    current: &mut [f64],
    beta: f64,
    a: &[f64],
    b: &[f64],
    c: f64,
    rng: &mut R,
) -> MhDecision {
    let fwd_conc: Vec<f64> = current.iter().map(|p| c * p).collect();
    let proposal = jitter(dirichlet(&fwd_conc, rng));
    let back_conc: Vec<f64> = proposal.iter().map(|p| c * p).collect();
    let la = log_accept(
        phi_log_target(beta, a, b, current),
        phi_log_target(beta, a, b, &proposal),
        dirichlet_ln_pdf(&proposal, &fwd_conc),
        dirichlet_ln_pdf(current, &back_conc),
    );
    let decision = mh_decide(la, rng);
    if decision.accepted {
        current.copy_from_slice(&proposal);
    }
    decision
}

/// One MH update of row `k` with the row's current proposal concentration.
pub fn mh_update_phi_row<R: Rng + ?Sized>(
    state: &mut PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    k: usize,
    rng: &mut R,
) -> MhDecision {
    let (a, b) = phi_stats(state, data, state.phi.nrows());
    let c = state.concentration[k];
    let mut row = state.phi.row(k).to_vec();
    let d = mh_phi_step(
        &mut row,
        hyper.beta,
        a.row(k).as_slice().unwrap(),
        b.row(k).as_slice().unwrap(),
        c,
        rng,
    );
    state.proposed[k] += 1;
    if d.accepted {
        state.accepted[k] += 1;
        state.phi.row_mut(k).assign(&ndarray::Array1::from(row));
    }
    d
}

/// Random streams of one chain: one for the Gibbs updates and one per phi
/// row, so row updates do not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct ChainRngs {
    pub main: SimRng,
    pub rows: Vec<SimRng>,
}

impl ChainRngs {
    pub fn new(seed: u64, chain: u64, k: usize) -> Self {
        Self {
            main: substream(seed, &[chain, 0]),
            rows: (0..k as u64)
                .map(|r| substream(seed, &[chain, 1, r]))
                .collect(),
        }
    }
}

/// One sweep z -> gamma -> theta -> phi. With `adapt = Some(step)` each
/// row's proposal concentration moves on the log scale by
/// `step * (acceptance - target)`. Returns the log-likelihood of the data
/// under the state entering the label update.
pub fn sweep(
    state: &mut PdmState,
    hyper: &PdmHyperparams,
    data: &PdmData,
    rngs: &mut ChainRngs,
    adapt: Option<f64>,
) -> f64 {
    let k = hyper.k;
    let rng = &mut rngs.main;
    let mut w = vec![0.0; k];
    let mut ll = 0.0;
    let log_phi = state.phi.mapv(f64::ln);
    let log_theta = state.theta.mapv(f64::ln);
    for (i, slot) in data.slots.iter().enumerate() {
        let scale = slot.e * state.gamma[slot.m];
        let y = slot.y as f64;
        let base = y * scale.ln() - ln_gamma(y + 1.0);
        for (t, o) in w.iter_mut().enumerate() {
            *o = log_theta[[slot.m, t]] + y * log_phi[[t, slot.n]] - state.phi[[t, slot.n]] * scale
                + base;
        }
        let lse = log_sum_exp(&w);
        ll += lse;
        w.iter_mut().for_each(|l| *l = (*l - lse).exp());
        state.z[i] = categorical(&w, rng);
    }
    for m in 0..data.n_patients {
        state.gamma[m] = sample_gamma_conditional(state, hyper, data, m, rng);
    }
    for m in 0..data.n_patients {
        let row = sample_theta_conditional(state, hyper, data, m, rng);
        for (t, v) in row.into_iter().enumerate() {
            state.theta[[m, t]] = v;
        }
    }
    let (a, b) = phi_stats(state, data, k);
    for (t, row_rng) in rngs.rows.iter_mut().enumerate() {
        let mut row = state.phi.row(t).to_vec();
        let c = state.concentration[t];
        let mut mean_accept = 0.0;
        for _ in 0..hyper.phi_steps {
            let d = mh_phi_step(
                &mut row,
                hyper.beta,
                a.row(t).as_slice().unwrap(),
                b.row(t).as_slice().unwrap(),
                c,
                row_rng,
            );
            state.proposed[t] += 1;
            if d.accepted {
                state.accepted[t] += 1;
            }
            mean_accept += d.log_acceptance.exp() / hyper.phi_steps as f64;
        }
        state.phi.row_mut(t).assign(&ndarray::Array1::from(row));
        if let Some(step) = adapt {
            let log_c = c.ln() - step * (mean_accept - TARGET_ACCEPTANCE);
            state.concentration[t] = log_c.clamp(0.0, 25.0).exp();
        }
    }
    ll
}

/// Robbins-Monro step size for burn-in sweep `t`.
fn adaptation_step(t: usize) -> f64 {
    2.0 / (1.0 + t as f64).powf(0.6)
}

/// Result of one chain, before cross-chain alignment.
fn run_chain(
    data: &PdmData,
    hyper: &PdmHyperparams,
    config: &SamplerConfig,
    chain: u64,
) -> ChainEstimate {
    let mut rngs = ChainRngs::new(config.seed, chain, hyper.k);
    let mut state = PdmState::initial(hyper, data, &mut rngs.main);
    let (m, v, k) = (data.n_patients, data.n_codes, hyper.k);
    let mut theta = Array2::zeros((m, k));
    let mut phi = Array2::zeros((k, v));
    let mut gamma = vec![0.0; m];
    let mut kept = 0usize;
    let mut trace = Vec::with_capacity(config.burn_in + config.samples);
    let mut accepted_at_burn_in = vec![0; k];
    let mut proposed_at_burn_in = vec![0; k];
    for s in 0..config.burn_in + config.samples {
        let adapt = (s < config.burn_in).then(|| adaptation_step(s));
        trace.push(sweep(&mut state, hyper, data, &mut rngs, adapt));
        if s + 1 == config.burn_in {
            accepted_at_burn_in.clone_from(&state.accepted);
            proposed_at_burn_in.clone_from(&state.proposed);
        }
        if s >= config.burn_in && config.keeps(s - config.burn_in) {
            theta += &state.theta;
            phi += &state.phi;
            gamma
                .iter_mut()
                .zip(&state.gamma)
                .for_each(|(a, g)| *a += g);
            kept += 1;
        }
    }
    let acceptance = (0..k)
        .map(|t| {
            let p = state.proposed[t] - proposed_at_burn_in[t];
            (state.accepted[t] - accepted_at_burn_in[t]) as f64 / p.max(1) as f64
        })
        .collect();
    log::debug!(
        "pdm chain {chain}: final log-likelihood {:?}, proposal concentrations {:?}",
        trace.last(),
        state.concentration
    );
    let n = kept as f64;
    ChainEstimate {
        theta: theta / n,
        phi: phi / n,
        gamma: Some(gamma.into_iter().map(|g| g / n).collect()),
        acceptance: Some(acceptance),
        trace,
    }
}

/// Fit on the pairs of `cohort` selected by `hyper.scope`.
pub fn fit_pdm(
    cohort: &Cohort,
    expected: &ExpectedCounts,
    hyper: &PdmHyperparams,
    config: &SamplerConfig,
) -> Result<TopicFit> {
    let data = match hyper.scope {
        LikelihoodScope::Diagnosed => PdmData::from_cohort(cohort, expected)?,
        LikelihoodScope::AllPairs => PdmData::with_zero_counts(cohort, expected)?,
    };
    fit_pdm_data(&data, hyper, config)
}

pub fn fit_pdm_data(
    data: &PdmData,
    hyper: &PdmHyperparams,
    config: &SamplerConfig,
) -> Result<TopicFit> {
    hyper.validate()?;
    config.validate()?;
    if data.n_patients == 0 {
        return Err(Error::Data("cohort is empty".into()));
    }
    let chains: Vec<ChainEstimate> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(data, hyper, config, c as u64))
        .collect();
    Ok(combine_chains(ModelKind::Pdm, chains))
}

/// Normalised sum over diagnosed diseases of the Poisson responsibilities
/// `theta[m,k] * Poisson(y; phi[k,n] e gamma)`.
pub fn patient_topic_posterior_pdm(
    fit: &TopicFit,
    cohort: &Cohort,
    expected: &ExpectedCounts,
    gamma: &[f64],
) -> Result<Array2<f64>> {
    fit.check_dims(cohort)?;
    if expected.dim() != (cohort.n_patients(), cohort.n_codes())
        || gamma.len() != cohort.n_patients()
    {
        return Err(Error::Dimension(
            "expected counts or gamma do not match the cohort".into(),
        ));
    }
    let k = fit.n_topics();
    let mut out = Array2::zeros((cohort.n_patients(), k));
    let mut w = vec![0.0; k];
    for m in 0..cohort.n_patients() {
        for (n, y) in cohort.diagnosed(m) {
            let scale = expected.get(m, n) * gamma[m];
            let y = y as f64;
            for (t, wt) in w.iter_mut().enumerate() {
                let phi = fit.phi[[t, n]].max(EPS_SIMPLEX);
                *wt = fit.theta[[m, t]].max(f64::MIN_POSITIVE).ln() + y * phi.ln() - phi * scale;
            }
            let lse = log_sum_exp(&w);
            for t in 0..k {
                out[[m, t]] += (w[t] - lse).exp();
            }
        }
        let total: f64 = out.row(m).sum();
        out.row_mut(m).mapv_inplace(|v| v / total);
    }
    Ok(out)
}
