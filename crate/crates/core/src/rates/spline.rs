use crate::error::{Error, Result};

/// Regression B-spline basis over age, without the intercept column.
///
/// `df` basis columns are produced: the full clamped B-spline basis has
/// `df + 1` functions summing to one, and the first is dropped so the basis
/// is not collinear with the model intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    boundary: (f64, f64),
    interior: Vec<f64>,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(degree: usize, boundary: (f64, f64), interior: Vec<f64>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Parameter("spline degree must be at least 1".into()));
        }
        let (lo, hi) = boundary;
        let mut all = vec![lo];
        all.extend_from_slice(&interior);
        all.push(hi);
        if all.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter(format!(
                "spline knots must be strictly increasing: {all:?}"
            )));
        }
        let mut knots = vec![lo; degree + 1];
        knots.extend_from_slice(&interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            degree,
            boundary,
            interior,
            knots,
        })
    }

    /// Cubic basis (lower degree when `df < 3`) with `df - degree` interior
    /// knots at weighted quantiles of `ages`.
    pub fn from_weighted_ages(ages: &[(f64, f64)], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(Error::Parameter("spline df must be at least 1".into()));
        }
        let mut pts: Vec<(f64, f64)> = ages.iter().copied().filter(|&(_, w)| w > 0.0).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (Some(first), Some(last)) = (pts.first(), pts.last()) else {
            return Err(Error::Data("no ages with positive weight".into()));
        };
        let boundary = (first.0, last.0);
        let degree = df.min(3);
        let n_interior = df - degree;
        let total: f64 = pts.iter().map(|p| p.1).sum();
        let mut interior = Vec::with_capacity(n_interior);
        for j in 1..=n_interior {
            let target = total * j as f64 / (n_interior + 1) as f64;
            let mut acc = 0.0;
            let mut q = boundary.1;
            for &(a, w) in &pts {
                acc += w;
                if acc >= target {
                    q = a;
                    break;
                }
            }
            interior.push(q);
        }
        // Distinct-age data can put a quantile on a boundary or on a previous
        // knot; spread those evenly between their neighbours.
        let mut all = vec![boundary.0];
        all.extend(interior.iter().copied());
        all.push(boundary.1);
        if all.windows(2).any(|w| !(w[0] < w[1])) {
            interior = (1..=n_interior)
                .map(|j| {
                    boundary.0 + (boundary.1 - boundary.0) * j as f64 / (n_interior + 1) as f64
                })
                .collect();
        }
        Self::new(degree, boundary, interior)
    }

    pub fn df(&self) -> usize {
        self.knots.len() - self.degree - 2
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.boundary.0 && x <= self.boundary.1
    }

    /// The full basis (`df + 1` values summing to one) at `x`, clamped to the
    /// boundary knots.
    pub fn full(&self, x: f64) -> Vec<f64> {
        let p = self.degree;
        let t = &self.knots;
        let n_basis = t.len() - p - 1;
        let x = x.clamp(self.boundary.0, self.boundary.1);
        // span index i with t[i] <= x < t[i+1], the last non-empty span at x = hi
        let mut span = p;
        while span + 1 < n_basis && x >= t[span + 1] {
            span += 1;
        }
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; n_basis];
        for (j, v) in n.into_iter().enumerate() {
            out[span - p + j] = v;
        }
        out
    }

    /// The `df` regression columns at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut full = self.full(x);
        full.remove(0);
        full
    }
}
