//! Scalar Chebyshev machinery on an interval `[a, b]`.
//!
//! A function `f` on `[a, b]` is expanded as `Σ b_j T_j(t)` where
//! `t = (2x − (b + a)) / (b − a)` maps the interval onto `[-1, 1]`.

use std::borrow::Cow;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Closed interval `[a, b]` with `a < b`, both finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Parameter(format!(
                "interval endpoints must be finite, got [{a}, {b}]"
            )));
        }
        if a >= b {
            return Err(Error::Parameter(format!(
                "interval requires a < b, got [{a}, {b}]"
            )));
        }
        Ok(Interval { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    /// `2 / (b − a)`, the derivative of the map onto `[-1, 1]`.
    pub fn scale(&self) -> f64 {
        2.0 / (self.b - self.a)
    }

    /// `(b + a) / (b − a)`.
    pub fn shift(&self) -> f64 {
        (self.b + self.a) / (self.b - self.a)
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        self.scale() * x - self.shift()
    }

    pub fn from_unit(&self, t: f64) -> f64 {
        0.5 * (self.b - self.a) * t + 0.5 * (self.b + self.a)
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * self.width();
        x >= self.a - slack && x <= self.b + slack
    }
}

/// Bernstein-ellipse data: `f` is analytic inside the ellipse with
/// semi-axis sum `rho` and bounded there by `bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticitySpec {
    rho: f64,
    bound: f64,
}

impl AnalyticitySpec {
    pub fn new(rho: f64, bound: f64) -> Result<Self> {
        if !(rho > 1.0) || !rho.is_finite() {
            return Err(Error::Parameter(format!("rho must exceed 1, got {rho}")));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::Parameter(format!(
                "analyticity bound must be positive, got {bound}"
            )));
        }
        Ok(AnalyticitySpec { rho, bound })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }
}

/// Chebyshev coefficients `b_0..b_J` of a function on an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebSeries {
    interval: Interval,
    coeffs: Vec<f64>,
    spec: Option<AnalyticitySpec>,
}

impl ChebSeries {
    /// Invariant: with a spec, `|b_j| ≤ 2U/ρ^j + 1e-9` for every stored `j`.
    pub fn new(interval: Interval, coeffs: Vec<f64>, spec: Option<AnalyticitySpec>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Parameter("coefficient sequence is empty".into()));
        }
        if let Some((j, c)) = coeffs.iter().enumerate().find(|(_, c)| !c.is_finite()) {
            return Err(Error::Numeric(format!("coefficient b_{j} = {c} is not finite")));
        }
        if let Some(s) = spec {
            for (j, &c) in coeffs.iter().enumerate() {
                let cap = 2.0 * s.bound * s.rho.powi(-(j as i32)) + 1e-9;
                if c.abs() > cap {
                    return Err(Error::Parameter(format!(
                        "|b_{j}| = {:e} exceeds the decay bound {cap:e} for rho = {}, U = {}",
                        c.abs(),
                        s.rho,
                        s.bound
                    )));
                }
            }
        }
        Ok(ChebSeries {
            interval,
            coeffs,
            spec,
        })
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn spec(&self) -> Option<AnalyticitySpec> {
        self.spec
    }

    /// Highest stored index `J`.
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Attaches (and validates) an analyticity spec.
    pub fn with_spec(self, spec: AnalyticitySpec) -> Result<Self> {
        ChebSeries::new(self.interval, self.coeffs, Some(spec))
    }

    /// Cuts the series at the first index that begins `run` consecutive
    /// coefficients with `|b_j| ≤ rel_tol · max |b|`.
    pub fn trimmed(&self, rel_tol: f64, run: usize) -> ChebSeries {
        let run = run.max(1);
        let max = self.coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let small = |c: &f64| c.abs() <= rel_tol * max;
        let mut cut = self.coeffs.len();
        for j in 1..self.coeffs.len() {
            let end = (j + run).min(self.coeffs.len());
            if end - j == run && self.coeffs[j..end].iter().all(small) {
                cut = j;
                break;
            }
        }
        ChebSeries {
            interval: self.interval,
            coeffs: self.coeffs[..cut].to_vec(),
            spec: self.spec,
        }
    }
}

/// Anything that can supply Chebyshev coefficients up to a requested degree.
pub trait CoefficientSource: Sync {
    fn interval(&self) -> Interval;

    /// Coefficients `b_0..=b_n`.
    fn coefficients(&self, n: usize) -> Result<Cow<'_, [f64]>>;
}

impl CoefficientSource for ChebSeries {
    fn interval(&self) -> Interval {
        self.interval
    }

    fn coefficients(&self, n: usize) -> Result<Cow<'_, [f64]>> {
        if n > self.degree() {
            return Err(Error::Parameter(format!(
                "requested degree {n} exceeds stored series degree {}",
                self.degree()
            )));
        }
        Ok(Cow::Borrowed(&self.coeffs[..=n]))
    }
}

/// Default Chebyshev–Gauss node count for a given degree.
pub fn default_quad_nodes(degree: usize) -> usize {
    (4 * (degree + 1)).max(1024)
}

/// Chebyshev–Gauss quadrature of the coefficient integral with `quad_nodes`
/// nodes `cos(π(k + ½)/Q)`.
///
/// The angle `jθ_k` is reduced exactly modulo `2π` through the integer
/// `j(2k+1) mod 4Q` and looked up in a table, so high-index coefficients
/// carry no accumulated phase error.
pub fn compute_coefficients(
    f: impl Fn(f64) -> f64,
    interval: Interval,
    degree: usize,
    quad_nodes: usize,
) -> Result<ChebSeries> {
    if quad_nodes < 4 * (degree + 1) {
        return Err(Error::Parameter(format!(
            "quad_nodes = {quad_nodes} must be at least 4·(degree+1) = {}",
            4 * (degree + 1)
        )));
    }
    let q = quad_nodes;
    let period = 4 * q as u64;
    let table: Vec<f64> = (0..period)
        .map(|m| (PI * m as f64 / (2.0 * q as f64)).cos())
        .collect();
    let mut values = Vec::with_capacity(q);
    for k in 0..q {
        let t = table[2 * k + 1];
        let x = interval.from_unit(t);
        let fx = f(x);
        if !fx.is_finite() {
            return Err(Error::Domain(format!(
                "f is not finite at quadrature node {k} (x = {x})"
            )));
        }
        values.push(fx);
    }
    let coeffs = (0..=degree as u64)
        .map(|j| {
            let s: f64 = values
                .iter()
                .enumerate()
                .map(|(k, v)| v * table[((j * (2 * k as u64 + 1)) % period) as usize])
                .sum();
            let w = if j == 0 { 1.0 } else { 2.0 };
            w * s / q as f64
        })
        .collect();
    ChebSeries::new(interval, coeffs, None)
}

/// `T_j(x)` by the three-term recurrence; valid for any real `x`.
pub fn eval_t(j: usize, x: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for _ in 1..j {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `U_j(x)` by the three-term recurrence; valid for any real `x`.
pub fn eval_u(j: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0 * x);
    if j == 0 {
        return prev;
    }
    for _ in 1..j {
        let next = 2.0 * x * cur - prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Clenshaw summation of `Σ c_j T_j(t)` at a point `t` of `[-1, 1]`.
pub fn clenshaw(coeffs: &[f64], t: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &c in coeffs.iter().skip(1).rev() {
        let b0 = c + 2.0 * t * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    coeffs.first().copied().unwrap_or(0.0) + t * b1 - b2
}

/// Evaluates the series at `x ∈ [a, b]`.
pub fn eval_series(series: &ChebSeries, x: f64) -> Result<f64> {
    let iv = series.interval();
    if !iv.contains(x) {
        return Err(Error::Domain(format!(
            "x = {x} lies outside [{}, {}]",
            iv.a(),
            iv.b()
        )));
    }
    Ok(clenshaw(series.coeffs(), iv.to_unit(x).clamp(-1.0, 1.0)))
}

/// Sup-norm error bound `4U / ((ρ − 1) ρⁿ)` for the degree-`n` truncation.
pub fn truncation_error_bound(spec: AnalyticitySpec, n: usize) -> f64 {
    4.0 * spec.bound / ((spec.rho - 1.0) * spec.rho.powf(n as f64))
}

/// Least-squares decay rate of `|b_j|` over `j_min..=j_max`, as `exp(−slope)`.
pub fn estimate_rho(series: &ChebSeries, j_min: usize, j_max: usize) -> Result<f64> {
    if j_max <= j_min + 3 {
        return Err(Error::Parameter(format!(
            "fit range needs j_max > j_min + 3, got [{j_min}, {j_max}]"
        )));
    }
    if j_max > series.degree() {
        return Err(Error::Parameter(format!(
            "fit range end {j_max} exceeds series degree {}",
            series.degree()
        )));
    }
    let pts: Vec<(f64, f64)> = (j_min..=j_max)
        .map(|j| (j as f64, series.coeffs()[j].abs()))
        .collect();
    if let Some((j, c)) = pts.iter().find(|(_, c)| *c <= 1e-14) {
        return Err(Error::Estimation(format!(
            "|b_{}| = {c:e} is below 1e-14; the decay rate is not resolvable on this range",
            *j as usize
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1.ln() - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let rho = (-sxy / sxx).exp();
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(Error::Estimation(format!(
            "fitted rho = {rho} is not above 1; f is not resolvably analytic at this degree"
        )));
    }
    Ok(rho)
}

/// Bernstein parameter of the ellipse through a real point `x0` outside the
/// interval: `|t0| + √(t0² − 1)` with `t0` the mapped point.
pub fn bernstein_rho(interval: Interval, x0: f64) -> Option<f64> {
    let t0 = interval.to_unit(x0).abs();
    (t0 > 1.0).then(|| t0 + (t0 * t0 - 1.0).sqrt())
}
