use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::chi_square_sf;
use crate::error::{Error, Result};
use crate::topic::write_rows;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalSample {
    pub time: f64,
    pub event: bool,
    pub group: usize,
}

/// Product-limit estimate at each distinct event time.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous step value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

fn check_samples(samples: &[SurvivalSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no survival samples".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| !(s.time.is_finite() && s.time >= 0.0))
    {
        return Err(Error::Data(format!(
            "survival time {} is not a finite non-negative value",
            s.time
        )));
    }
    Ok(())
}

/// Kaplan-Meier curve of all samples, ignoring their group. A subject
/// censored at an event time is still at risk at that time.
pub fn kaplan_meier(samples: &[SurvivalSample]) -> Result<KmCurve> {
    check_samples(samples)?;
    let mut sorted: Vec<&SurvivalSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let at_risk = sorted.len() - i;
        let mut d = 0;
        while i < sorted.len() && sorted[i].time == t {
            d += sorted[i].event as usize;
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
    }
    Ok(curve)
}

/// One curve per group label `0..n_groups`; `None` for empty groups.
pub fn kaplan_meier_by_group(samples: &[SurvivalSample], n_groups: usize) -> Vec<Option<KmCurve>> {
    (0..n_groups)
        .map(|g| {
            let members: Vec<SurvivalSample> =
                samples.iter().filter(|s| s.group == g).copied().collect();
            kaplan_meier(&members).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
    /// Covariance of `O - E` for the first `G - 1` groups.
    pub variance: Vec<Vec<f64>>,
}

/// G-sample log-rank test; groups are labels `0..n_groups`.
pub fn log_rank_test(samples: &[SurvivalSample], n_groups: usize) -> Result<LogRankResult> {
    check_samples(samples)?;
    if n_groups < 2 {
        return Err(Error::Parameter(
            "log-rank needs at least two groups".into(),
        ));
    }
    if let Some(s) = samples.iter().find(|s| s.group >= n_groups) {
        return Err(Error::Data(format!(
            "group label {} outside 0..{n_groups}",
            s.group
        )));
    }
    let mut size = vec![0usize; n_groups];
    for s in samples {
        size[s.group] += 1;
    }
    if let Some(g) = size.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("group {g} is empty")));
    }
    if !samples.iter().any(|s| s.event) {
        return Err(Error::Data("no events observed".into()));
    }

    let mut sorted: Vec<&SurvivalSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let r = n_groups - 1;
    let mut at_risk: Vec<f64> = size.iter().map(|&n| n as f64).collect();
    let mut observed = vec![0.0; n_groups];
    let mut expected = vec![0.0; n_groups];
    let mut v = DMatrix::<f64>::zeros(r, r);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let mut d_g = vec![0.0; n_groups];
        let mut leaving = vec![0.0; n_groups];
        while i < sorted.len() && sorted[i].time == t {
            let s = sorted[i];
            if s.event {
                d_g[s.group] += 1.0;
            }
            leaving[s.group] += 1.0;
            i += 1;
        }
        let d: f64 = d_g.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d > 0.0 {
            for g in 0..n_groups {
                observed[g] += d_g[g];
                expected[g] += at_risk[g] * d / n;
            }
            if n > 1.0 {
                let scale = d * (n - d) / (n - 1.0);
                for a in 0..r {
                    for b in 0..r {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        v[(a, b)] += scale * at_risk[a] / n * (delta - at_risk[b] / n);
                    }
                }
            }
        }
        for g in 0..n_groups {
            at_risk[g] -= leaving[g];
        }
    }

    let diff = DVector::from_iterator(r, (0..r).map(|g| observed[g] - expected[g]));
    let chi_square = if r == 1 {
        if v[(0, 0)] > 0.0 {
            diff[0] * diff[0] / v[(0, 0)]
        } else {
            0.0
        }
    } else {
        let pinv = v
            .clone()
            .pseudo_inverse(1e-12 * v.amax().max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Numerical(format!("log-rank covariance inverse: {e}")))?;
        (diff.transpose() * pinv * &diff)[(0, 0)]
    }
    .max(0.0);
    if !chi_square.is_finite() {
        return Err(Error::Numerical("log-rank statistic is not finite".into()));
    }
    Ok(LogRankResult {
        chi_square,
        degrees_of_freedom: r,
        p_value: chi_square_sf(chi_square, r),
        observed,
        expected,
        variance: (0..r)
            .map(|a| (0..r).map(|b| v[(a, b)]).collect())
            .collect(),
    })
}

/// `group,time,survival,at_risk,events`, one row per event time.
pub fn write_km_csv(path: &Path, curves: &[Option<KmCurve>]) -> Result<()> {
    write_rows(
        path,
        ["group", "time", "survival", "at_risk", "events"],
        |w| {
            for (g, c) in curves.iter().enumerate() {
                let Some(c) = c else { continue };
                for i in 0..c.times.len() {
                    w.write_record([
                        g.to_string(),
                        c.times[i].to_string(),
                        c.survival[i].to_string(),
                        c.at_risk[i].to_string(),
                        c.events[i].to_string(),
                    ])?;
                }
            }
            Ok(())
        },
    )
}

pub(crate) const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Step plot of one curve per group, horizon `max_time`.
pub fn write_km_svg(
    path: &Path,
    curves: &[Option<KmCurve>],
    max_time: f64,
    title: &str,
) -> Result<()> {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 130.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let horizon = if max_time > 0.0 { max_time } else { 1.0 };
    let sx = |t: f64| left + pw * (t / horizon).min(1.0);
    let sy = |s: f64| top + ph * (1.0 - s);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for k in 0..=5 {
        let s = k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{s:.1}</text>"#,
            left - 6.0,
            sy(s) + 4.0
        );
        let t = horizon * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t:.1}</text>"#,
            sx(t),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">years</text>"#,
        left + pw / 2.0,
        h - 8.0
    );
    for (g, c) in curves.iter().enumerate() {
        let Some(c) = c else { continue };
        let color = PALETTE[g % PALETTE.len()];
        let mut d = format!("M{:.2},{:.2}", sx(0.0), sy(1.0));
        for (t, s) in c.times.iter().zip(&c.survival) {
            let _ = write!(d, " H{:.2} V{:.2}", sx(*t), sy(*s));
        }
        let _ = write!(d, " H{:.2}", sx(horizon));
        let _ = writeln!(
            svg,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        let ly = top + 16.0 * g as f64 + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">subgroup {4}</text>"#,
            left + pw + 12.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            g + 1
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
