//! Scalar functions whose spectral sums the crate estimates.

use std::borrow::Cow;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::chebyshev::{
    bernstein_rho, compute_coefficients, default_quad_nodes, estimate_rho, truncation_error_bound,
    AnalyticitySpec, ChebSeries, CoefficientSource, Interval,
};
use crate::error::{Error, Result};

/// A scalar function applied to the spectrum.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralFunction {
    Log,
    Sqrt,
    Exp,
    /// Monomial coefficients `c_0 + c_1 x + c_2 x² + …`.
    Polynomial(Vec<f64>),
}

impl SpectralFunction {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            SpectralFunction::Log => x.ln(),
            SpectralFunction::Sqrt => x.sqrt(),
            SpectralFunction::Exp => x.exp(),
            SpectralFunction::Polynomial(c) => c.iter().rev().fold(0.0, |acc, ci| acc * x + ci),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            SpectralFunction::Log => 1.0 / x,
            SpectralFunction::Sqrt => 0.5 / x.sqrt(),
            SpectralFunction::Exp => x.exp(),
            SpectralFunction::Polynomial(c) => c
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, ci)| acc * x + k as f64 * ci),
        }
    }

    fn complex_value(&self, z: Complex64) -> Complex64 {
        match self {
            SpectralFunction::Log => z.ln(),
            SpectralFunction::Sqrt => z.sqrt(),
            SpectralFunction::Exp => z.exp(),
            SpectralFunction::Polynomial(c) => c
                .iter()
                .rev()
                .fold(Complex64::new(0.0, 0.0), |acc, ci| acc * z + ci),
        }
    }

    /// The real point where analyticity fails, if any.
    pub fn singularity(&self) -> Option<f64> {
        match self {
            SpectralFunction::Log | SpectralFunction::Sqrt => Some(0.0),
            _ => None,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self, SpectralFunction::Polynomial(_))
    }

    /// Degree of a polynomial after dropping trailing zeros.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            SpectralFunction::Polynomial(c) => {
                Some(c.iter().rposition(|v| *v != 0.0).unwrap_or(0))
            }
            _ => None,
        }
    }

    /// Bernstein parameter of the largest ellipse free of singularities, or
    /// `None` for entire functions and for singular points inside `[a, b]`.
    pub fn singular_rho(&self, interval: Interval) -> Option<f64> {
        self.singularity().and_then(|x0| bernstein_rho(interval, x0))
    }

    /// Decay rate used when none is supplied: the ellipse through the
    /// singularity when there is one, otherwise a fit of `|b_j|` over
    /// `1..=10` of the degree-40 series. Polynomials have no finite rate.
    pub fn auto_rho(&self, interval: Interval) -> Result<f64> {
        if let Some(rho) = self.singular_rho(interval) {
            return Ok(rho);
        }
        if self.is_polynomial() {
            return Err(Error::Estimation(format!(
                "{self} is a polynomial; its coefficients have no geometric decay rate"
            )));
        }
        estimate_rho(&self.series(interval, 40)?, 1, 10)
    }

    /// Whether `f` is finite on the whole interval.
    pub fn check_domain(&self, interval: Interval) -> Result<()> {
        if let Some(x0) = self.singularity() {
            if interval.a() <= x0 {
                return Err(Error::Domain(format!(
                    "{self} requires a positive interval, got [{}, {}]",
                    interval.a(),
                    interval.b()
                )));
            }
        }
        Ok(())
    }

    /// `max |f|` on the Bernstein ellipse of parameter `rho`, or `None` when
    /// the ellipse reaches a singularity.
    pub fn ellipse_bound(&self, interval: Interval, rho: f64) -> Option<f64> {
        if rho <= 1.0 {
            return None;
        }
        if let Some(rs) = self.singular_rho(interval) {
            if rho >= rs {
                return None;
            }
        } else if self.singularity().is_some() {
            return None;
        }
        let half = 0.5 * interval.width();
        let mid = 0.5 * (interval.a() + interval.b());
        let samples = 8192;
        let max = (0..samples)
            .map(|k| {
                let phi = 2.0 * PI * k as f64 / samples as f64;
                let re = 0.5 * (rho + 1.0 / rho) * phi.cos();
                let im = 0.5 * (rho - 1.0 / rho) * phi.sin();
                let z = Complex64::new(mid + half * re, half * im);
                self.complex_value(z).norm()
            })
            .fold(0.0, f64::max);
        (max.is_finite() && max > 0.0).then_some(max)
    }

    /// Smallest sup-norm truncation bound at degree `n` over a grid of
    /// admissible ellipses, with the ellipse used.
    pub fn best_truncation_bound(&self, interval: Interval, n: usize) -> Option<(f64, AnalyticitySpec)> {
        if let Some(p) = self.polynomial_degree() {
            if n >= p {
                let spec = AnalyticitySpec::new(2.0, 1.0).ok()?;
                return Some((0.0, spec));
            }
        }
        let rho_max = match self.singularity() {
            Some(_) => self.singular_rho(interval)?,
            None => 64.0,
        };
        (1..64)
            .filter_map(|k| {
                let rho = 1.0 + (rho_max - 1.0) * k as f64 / 64.0;
                let u = self.ellipse_bound(interval, rho)?;
                let spec = AnalyticitySpec::new(rho, u).ok()?;
                Some((truncation_error_bound(spec, n), spec))
            })
            .min_by(|x, y| x.0.total_cmp(&y.0))
    }

    /// Chebyshev coefficients up to `degree`.
    ///
    /// Polynomials are converted exactly from the monomial basis; other
    /// functions use Chebyshev–Gauss quadrature with the default node count.
    pub fn series(&self, interval: Interval, degree: usize) -> Result<ChebSeries> {
        self.check_domain(interval)?;
        match self {
            SpectralFunction::Polynomial(c) => {
                let mut coeffs = monomial_to_chebyshev(c, interval);
                coeffs.resize(degree + 1, 0.0);
                ChebSeries::new(interval, coeffs, None)
            }
            _ => compute_coefficients(|x| self.value(x), interval, degree, default_quad_nodes(degree)),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Default interval for the variance benchmark.
    pub fn default_interval(&self) -> Interval {
        match self {
            SpectralFunction::Log | SpectralFunction::Sqrt => {
                Interval::new(0.05, 0.95).expect("valid constant interval")
            }
            _ => Interval::new(-1.0, 1.0).expect("valid constant interval"),
        }
    }
}

/// Horner's scheme in the Chebyshev basis of `t`, where `x = h·t + c`.
fn monomial_to_chebyshev(mono: &[f64], interval: Interval) -> Vec<f64> {
    let h = 0.5 * interval.width();
    let c = 0.5 * (interval.a() + interval.b());
    let mut acc: Vec<f64> = vec![0.0];
    for &m in mono.iter().rev() {
        let mut next = vec![0.0; acc.len() + 1];
        for (j, &v) in acc.iter().enumerate() {
            next[j] += c * v;
            if j == 0 {
                next[1] += h * v;
            } else {
                next[j + 1] += 0.5 * h * v;
                next[j - 1] += 0.5 * h * v;
            }
        }
        next[0] += m;
        acc = next;
    }
    while acc.len() > 1 && acc.last() == Some(&0.0) {
        acc.pop();
    }
    acc
}

impl fmt::Display for SpectralFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralFunction::Log => write!(f, "log"),
            SpectralFunction::Sqrt => write!(f, "sqrt"),
            SpectralFunction::Exp => write!(f, "exp"),
            SpectralFunction::Polynomial(c) => {
                let parts: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                write!(f, "poly:{}", parts.join(","))
            }
        }
    }
}

impl FromStr for SpectralFunction {
    type Err = Error;

    /// Accepts `log`, `sqrt`, `exp`, `x`, `x^2`, `x^3`, and
    /// `poly:c0,c1,…` with monomial coefficients.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "log" => return Ok(SpectralFunction::Log),
            "sqrt" => return Ok(SpectralFunction::Sqrt),
            "exp" => return Ok(SpectralFunction::Exp),
            "x" => return Ok(SpectralFunction::Polynomial(vec![0.0, 1.0])),
            _ => {}
        }
        if let Some(p) = s.strip_prefix("x^") {
            let k: usize = p
                .parse()
                .map_err(|_| Error::Config(format!("bad power in function '{s}'")))?;
            let mut c = vec![0.0; k + 1];
            c[k] = 1.0;
            return Ok(SpectralFunction::Polynomial(c));
        }
        if let Some(list) = s.strip_prefix("poly:") {
            let c = list
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| Error::Config(format!("bad polynomial coefficients in '{s}'")))?;
            if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("bad polynomial coefficients in '{s}'")));
            }
            return Ok(SpectralFunction::Polynomial(c));
        }
        Err(Error::Config(format!(
            "unknown function '{s}' (expected log, sqrt, exp, x, x^k or poly:c0,c1,...)"
        )))
    }
}

/// A function together with an interval; serves coefficients of any degree,
/// computing beyond the cached series on demand.
#[derive(Debug, Clone)]
pub struct ChebApprox {
    func: SpectralFunction,
    cached: ChebSeries,
}

impl ChebApprox {
    pub fn new(func: SpectralFunction, interval: Interval, cached_degree: usize) -> Result<Self> {
        let cached = func.series(interval, cached_degree)?;
        Ok(ChebApprox { func, cached })
    }

    pub fn func(&self) -> &SpectralFunction {
        &self.func
    }

    pub fn cached(&self) -> &ChebSeries {
        &self.cached
    }
}

impl CoefficientSource for ChebApprox {
    fn interval(&self) -> Interval {
        self.cached.interval()
    }

    fn coefficients(&self, n: usize) -> Result<Cow<'_, [f64]>> {
        if n <= self.cached.degree() {
            return Ok(Cow::Borrowed(&self.cached.coeffs()[..=n]));
        }
        let s = self.func.series(self.cached.interval(), n)?;
        Ok(Cow::Owned(s.coeffs().to_vec()))
    }
}
