use comorbid::embed::*;
use comorbid::rng::rng_from_seed;
use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn entropy_perplexity(d: &[f64], sigma: f64) -> f64 {
    let w: Vec<f64> = d.iter().map(|x| (-x * x / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    let h: f64 = w.iter().map(|x| x / z).filter(|p| *p > 0.0).map(|p| -p * p.log2()).sum();
    h.exp2()
}

#[test]
fn calibration_matches_scalar_root() {
    let d = [1.0, 10.0];
    let c = perplexity_calibration(&d, 1.5).unwrap();
    assert!((c.perplexity - 1.5).abs() < 1e-5);
    assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // perplexity rises with sigma: bisection on sigma itself
    let (mut lo, mut hi) = (0.1, 100.0);
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if entropy_perplexity(&d, mid) < 1.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((c.sigma - lo).abs() / lo < 1e-4, "{} vs {lo}", c.sigma);
}

fn six_points() -> (Array2<f64>, Array2<f64>) {
    let x = array![
        [0.0, 0.1, 0.3],
        [0.2, 0.0, 0.1],
        [1.0, 1.2, 0.9],
        [1.1, 0.8, 1.0],
        [3.0, 0.2, 2.0],
        [2.5, 0.1, 2.2]
    ];
    let y = array![[0.1, -0.3], [0.4, 0.2], [-0.5, 0.6], [1.0, -0.1], [-0.2, -0.8], [0.7, 0.9]];
    (x, y)
}

#[test]
fn gradient_matches_finite_differences() {
    let (x, y) = six_points();
    let p = joint_probabilities(&x, 1.5).unwrap();
    let g = kl_gradient(&p, &y, 1.0);
    let h = 1e-5;
    for i in 0..6 {
        for k in 0..2 {
            let mut up = y.clone();
            up[[i, k]] += h;
            let mut down = y.clone();
            down[[i, k]] -= h;
            let fd = (kl_divergence(&p, &up) - kl_divergence(&p, &down)) / (2.0 * h);
            let rel = (g[[i, k]] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "({i},{k}): analytic {} numeric {fd}", g[[i, k]]);
        }
    }
}

#[test]
fn kl_is_translation_invariant() {
    let (x, y) = six_points();
    let p = joint_probabilities(&x, 1.5).unwrap();
    let shifted = &y + &array![[3.5, -12.25]];
    assert!((kl_divergence(&p, &y) - kl_divergence(&p, &shifted)).abs() < 1e-10);
}

fn two_groups(n_each: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let labels: Vec<usize> = (0..2 * n_each).map(|i| i / n_each).collect();
    let x = Array2::from_shape_fn((2 * n_each, 5), |(i, _)| labels[i] as f64 + noise.sample(&mut rng));
    (x, labels)
}

fn silhouette(y: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = y.nrows();
    let d = |a: usize, b: usize| ((y[[a, 0]] - y[[b, 0]]).powi(2) + (y[[a, 1]] - y[[b, 1]]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d(i, j);
                counts[labels[j]] += 1;
            }
        }
        let a = sums[labels[i]] / counts[labels[i]] as f64;
        let b = sums[1 - labels[i]] / counts[1 - labels[i]] as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn separable_groups_stay_apart() {
    let (x, labels) = two_groups(30, 4);
    let config = EmbedConfig {
        perplexity: 8.0,
        iterations: 1000,
        seed: 9,
        ..EmbedConfig::default()
    };
    let e = tsne(&x, &config).unwrap();
    let sil = silhouette(&e.coords, &labels);
    assert!(sil > 0.5);
    assert!(e.kl < e.kl_at(250).unwrap());
    assert!(e.kl_trace.iter().all(|(_, k)| *k >= 0.0));
    let again = tsne(&x, &config).unwrap();
    assert_eq!(e.coords, again.coords);
}

#[test]
fn duplicate_rows_are_handled() {
    let mut x = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
    let first = x.row(0).to_owned();
    x.row_mut(1).assign(&first);
    let e = tsne(&x, &EmbedConfig { perplexity: 4.0, iterations: 300, ..EmbedConfig::default() }).unwrap();
    assert!(e.coords.iter().all(|v| v.is_finite()));
}

#[test]
fn export_is_byte_stable() {
    let e = Embedding2D {
        coords: array![[0.0, 0.0], [1.0, 2.0], [-1.5, 0.5], [3.0, -1.0]],
        kl: 0.1,
        kl_trace: vec![],
    };
    let labels: Vec<String> = ["49", "50", "98", "<&>"].iter().map(|s| s.to_string()).collect();
    let dir = tempfile::tempdir().unwrap();
    let (c1, s1) = (dir.path().join("a.csv"), dir.path().join("a.svg"));
    let (c2, s2) = (dir.path().join("b.csv"), dir.path().join("b.svg"));
    export_embedding(&e, &labels, &c1, &s1).unwrap();
    export_embedding(&e, &labels, &c2, &s2).unwrap();
    let svg = std::fs::read_to_string(&s1).unwrap();
    assert_eq!(svg.matches("<circle").count(), 4);
    assert!(svg.contains("&lt;&amp;&gt;"));
    assert_eq!(std::fs::read_to_string(&c1).unwrap().lines().count(), 5);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(svg.into_bytes(), std::fs::read(&s2).unwrap());
    assert!(export_embedding(&e, &labels[..3], &c1, &s1).is_err());
}

#[test]
fn figure_scale_run_is_deterministic() {
    let mut rng = rng_from_seed(2);
    let x = Array2::from_shape_fn((285, 20), |_| rng.random::<f64>().powi(4));
    let config = EmbedConfig {
        perplexity: 10.0,
        iterations: 5000,
        seed: 1,
        ..EmbedConfig::default()
    };
    let start = std::time::Instant::now();
    let a = tsne(&x, &config).unwrap();
    eprintln!("285 points, 5000 iterations: {:?}", start.elapsed());
    assert_eq!(a.coords.nrows(), 285);
    assert!(a.coords.iter().all(|v| v.is_finite()));
    assert!(a.kl < a.kl_at(250).unwrap());
    let b = tsne(&x, &config).unwrap();
    assert_eq!(a.coords, b.coords);
}
