use comorbid::dist::{gamma_ln_pdf, poisson_ln_pmf};
use comorbid::pdm::*;
use comorbid::rng::rng_from_seed;
use comorbid::topic::SamplerConfig;
use ndarray::array;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn slot(m: usize, n: usize, y: u32, e: f64) -> Slot {
    Slot { m, n, y, e }
}

fn small_problem() -> (PdmHyperparams, PdmData) {
    let hyper = PdmHyperparams {
        k: 2,
        alpha: 0.8,
        beta: 1.0,
        xi: 2.0,
        delta: 0.5,
        phi_proposal_concentration: 20.0,
        phi_steps: 2,
        scope: LikelihoodScope::AllPairs,
    };
    let mut slots = Vec::new();
    for m in 0..3 {
        for n in 0..3 {
            slots.push(slot(m, n, (m + 2 * n) as u32 % 4, 1.5 + 0.5 * n as f64));
        }
    }
    (hyper, PdmData::from_slots(3, 3, slots).unwrap())
}

/// The gamma full conditional agrees with quadrature of prior times
/// likelihood, and its draws have the right mean.
#[test]
fn gamma_conditional_matches_quadrature() {
    let (hyper, data) = small_problem();
    let mut rng = rng_from_seed(1);
    let state = PdmState::from_prior(&hyper, &data, &mut rng);
    let m = 1;
    let log_post = |g: f64| {
        let mut lp = gamma_ln_pdf(g, hyper.xi, 1.0 / hyper.delta);
        for i in data.patient_slots(m) {
            let s = data.slots()[i];
            lp += poisson_ln_pmf(s.y as f64, state.phi[[state.z[i], s.n]] * s.e * g);
        }
        lp.exp()
    };
    let z = simpson(log_post, 1e-9, 40.0, 20_000);
    let mean = simpson(|g| g * log_post(g), 1e-9, 40.0, 20_000) / z;
    let second = simpson(|g| g * g * log_post(g), 1e-9, 40.0, 20_000) / z;
    let (shape, rate) = gamma_conditional(&state, &hyper, &data, m);
    assert!((mean - shape / rate).abs() < 1e-6, "{mean} vs {}", shape / rate);
    assert!((second - mean * mean - shape / (rate * rate)).abs() < 1e-6);

    let draws: Vec<f64> = (0..40_000)
        .map(|_| sample_gamma_conditional(&state, &hyper, &data, m, &mut rng))
        .collect();
    let sample_mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let se = (shape / (rate * rate) / draws.len() as f64).sqrt();
    assert!((sample_mean - mean).abs() < 4.0 * se);
}

/// With two clusters theta[m, 0] is Beta; quadrature of its density gives
/// the Dirichlet conditional's mean.
#[test]
fn theta_conditional_matches_quadrature() {
    let (hyper, data) = small_problem();
    let mut rng = rng_from_seed(2);
    let state = PdmState::from_prior(&hyper, &data, &mut rng);
    let m = 2;
    let c0 = data.patient_slots(m).filter(|&i| state.z[i] == 0).count() as f64;
    let c1 = data.patient_slots(m).count() as f64 - c0;
    let a0 = hyper.alpha - 1.0 + c0;
    let a1 = hyper.alpha - 1.0 + c1;
    let dens = |t: f64| t.powf(a0) * (1.0 - t).powf(a1);
    // substitute t = s^2 to tame the endpoint singularity when a0 < 0
    let z = simpson(|s| 2.0 * s * dens(s * s), 1e-12, 1.0 - 1e-12, 200_000);
    let mean = simpson(|s| 2.0 * s * s * s * dens(s * s), 1e-12, 1.0 - 1e-12, 200_000) / z;
    let conc = theta_conditional(&state, &hyper, &data, m);
    let analytic = conc[0] / (conc[0] + conc[1]);
    assert!((mean - analytic).abs() < 1e-3, "{mean} vs {analytic}");

    let n = 40_000;
    let sample_mean = (0..n)
        .map(|_| sample_theta_conditional(&state, &hyper, &data, m, &mut rng)[0])
        .sum::<f64>()
        / n as f64;
    assert!((sample_mean - analytic).abs() < 0.01);
}

/// The accept/reject primitive drives a random walk to Gamma(3, rate 2).
#[test]
fn random_walk_targets_gamma_three_two() {
    let mut rng = rng_from_seed(3);
    let step = Normal::new(0.0, 0.8).unwrap();
    let mut x = 1.0f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let n = 400_000;
    for _ in 0..n {
        let prop = x + step.sample(&mut rng);
        let lp = |v: f64| if v > 0.0 { gamma_ln_pdf(v, 3.0, 2.0) } else { f64::NEG_INFINITY };
        let la = mh_accept_prob(lp(x), lp(prop), 0.0, 0.0).ln();
        if mh_decide(la, &mut rng).accepted {
            x = prop;
        }
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    assert!((mean - 1.5).abs() < 0.02, "{mean}");
    assert!((var - 0.75).abs() < 0.03, "{var}");
}

#[test]
fn accept_probability_edge_cases() {
    assert_eq!(mh_accept_prob(-1.0, -1.0, 0.0, 0.0), 1.0);
    assert!((mh_accept_prob(0.0, -1.0, 0.0, 0.0) - (-1f64).exp()).abs() < 1e-15);
    assert!((mh_accept_prob(0.0, 0.0, 1.0, 0.0) - (-1f64).exp()).abs() < 1e-15);
    assert_eq!(mh_accept_prob(0.0, f64::NAN, 0.0, 0.0), 0.0);
    let mut rng = rng_from_seed(0);
    assert!(mh_decide(0.0, &mut rng).accepted);
    assert!(!mh_decide(f64::NEG_INFINITY, &mut rng).accepted);
}

/// With nothing labelled, the phi update samples the Dirichlet(beta) prior.
#[test]
fn phi_row_without_data_samples_its_prior() {
    let data = PdmData::from_slots(1, 4, vec![]).unwrap();
    let hyper = PdmHyperparams {
        k: 1,
        beta: 0.5,
        ..PdmHyperparams::default()
    };
    let mut rng = rng_from_seed(4);
    let mut state = PdmState::from_prior(&hyper, &data, &mut rng);
    state.phi = array![[0.25, 0.25, 0.25, 0.25]];
    state.concentration = vec![10.0];
    let n = 200_000;
    let mut mean = [0.0; 4];
    let mut second = 0.0;
    for _ in 0..n {
        mh_update_phi_row(&mut state, &hyper, &data, 0, &mut rng);
        for (acc, p) in mean.iter_mut().zip(state.phi.row(0)) {
            *acc += p / n as f64;
        }
        second += state.phi[[0, 0]].powi(2) / n as f64;
    }
    for p in mean {
        assert!((p - 0.25).abs() < 0.02, "{mean:?}");
    }
    // Dirichlet(0.5 x 4): var = 0.25 * 0.75 / 3
    let var = second - mean[0] * mean[0];
    assert!((var - 0.0625).abs() < 0.01, "{var}");
}

/// Successive-conditional simulation: alternate sweeps with redrawing the
/// counts. The chain's marginals must match forward draws from the prior.
#[test]
fn successive_conditional_matches_prior() {
    let (hyper, data0) = small_problem();
    let mut rng = rng_from_seed(5);
    let n = 60_000;

    let mut forward = [0.0; 3];
    for _ in 0..n {
        let s = PdmState::from_prior(&hyper, &data0, &mut rng);
        let mut d = data0.clone();
        d.resample_counts(&s, &mut rng);
        forward[0] += s.gamma[0];
        forward[1] += s.phi[[0, 0]];
        forward[2] += d.slots().iter().map(|s| s.y as f64).sum::<f64>();
    }

    let mut rngs = ChainRngs::new(6, 0, hyper.k);
    let mut state = PdmState::from_prior(&hyper, &data0, &mut rngs.main);
    let mut data = data0.clone();
    data.resample_counts(&state, &mut rngs.main);
    let mut chain = [0.0; 3];
    for _ in 0..n {
        sweep(&mut state, &hyper, &data, &mut rngs, None);
        let mut draw = rng_from_seed(rngs.main.random());
        data.resample_counts(&state, &mut draw);
        chain[0] += state.gamma[0];
        chain[1] += state.phi[[0, 0]];
        chain[2] += data.slots().iter().map(|s| s.y as f64).sum::<f64>();
    }
    let (f, c): (Vec<f64>, Vec<f64>) = (
        forward.iter().map(|v| v / n as f64).collect(),
        chain.iter().map(|v| v / n as f64).collect(),
    );
    // prior means: gamma 1, phi 1/3, total count sum(e) / 3
    assert!((f[0] - 1.0).abs() < 0.02 && (f[1] - 1.0 / 3.0).abs() < 0.01);
    assert!((c[0] - f[0]).abs() < 0.06, "gamma {} vs {}", c[0], f[0]);
    assert!((c[1] - f[1]).abs() < 0.03, "phi {} vs {}", c[1], f[1]);
    assert!((c[2] - f[2]).abs() / f[2] < 0.06, "total {} vs {}", c[2], f[2]);
}

#[test]
fn single_cluster_fit() {
    let (_, data) = small_problem();
    let hyper = PdmHyperparams {
        k: 1,
        ..PdmHyperparams::default()
    };
    let config = SamplerConfig {
        chains: 2,
        burn_in: 20,
        samples: 30,
        thin: 1,
        seed: 3,
    };
    let fit = fit_pdm_data(&data, &hyper, &config).unwrap();
    assert!(fit.theta.iter().all(|t| (t - 1.0).abs() < 1e-12));
    assert!((fit.phi.row(0).sum() - 1.0).abs() < 1e-9);
    assert_eq!(fit.gamma.as_ref().unwrap().len(), 3);
    assert_eq!(fit.traces.len(), 2);
    assert_eq!(fit, fit_pdm_data(&data, &hyper, &config).unwrap());
}

#[test]
fn invalid_data_is_rejected() {
    assert!(PdmData::from_slots(1, 2, vec![slot(0, 1, 1, 1.0), slot(0, 0, 1, 1.0)]).is_err());
    assert!(PdmData::from_slots(1, 2, vec![slot(0, 0, 1, 0.0)]).is_err());
    assert!(PdmData::from_slots(1, 2, vec![slot(1, 0, 1, 1.0)]).is_err());
    let (_, data) = small_problem();
    let bad = PdmHyperparams {
        phi_steps: 0,
        ..PdmHyperparams::default()
    };
    assert!(fit_pdm_data(&data, &bad, &SamplerConfig::default()).is_err());
}
