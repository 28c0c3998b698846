//! Truncation-degree distributions for randomized Chebyshev truncation.
//!
//! A distribution `{q_i}` over degrees turns the truncated series into an
//! unbiased one by re-weighting `b_j ↦ b_j / P(n ≥ j)`. The variance-optimal
//! member at a fixed mean is a point mass at `K` followed by a geometric tail
//! of ratio `1/ρ`; Poisson, negative binomial and deterministic degrees are
//! provided as baselines.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::chebyshev::{ChebSeries, CoefficientSource};
use crate::error::{Error, Result};

/// Which family a distribution belongs to, with its defining parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DistKind {
    Optimal { rho: f64, mean: usize, k: usize },
    Poisson { mean: f64 },
    NegBinomial { mean: f64, r: f64 },
    Deterministic { n: usize },
    /// Finite-horizon KKT point supported on `0..=horizon`.
    FiniteKkt { rho: f64, mean: usize, horizon: usize, k: i64 },
    Tabulated,
}

/// Description of the pmf beyond the stored prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TailRule {
    Zero,
    /// `q_{L+m} = first · ratio^m` where `L` is the prefix length.
    Geometric { first: f64, ratio: f64 },
}

/// A pmf over truncation degrees.
///
/// Invariants: `q_i ≥ 0`; prefix sums are monotone and at most 1; total mass
/// is 1 within 1e-12.
#[derive(Debug, Clone)]
pub struct DegreeDistribution {
    kind: DistKind,
    pmf: Vec<f64>,
    cumsum: Vec<f64>,
    /// `survival[j] = P(n ≥ j)` for `j ≤ pmf.len()`, summed from the back.
    survival: Vec<f64>,
    tail: TailRule,
}

/// Compensated running sums.
fn compensated_prefix(xs: &[f64]) -> Vec<f64> {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    xs.iter()
        .map(|&x| {
            let t = s + x;
            if s.abs() >= x.abs() {
                c += (s - t) + x;
            } else {
                c += (x - t) + s;
            }
            s = t;
            s + c
        })
        .collect()
}

fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    compensated_prefix(&v).last().copied().unwrap_or(0.0)
}

impl DegreeDistribution {
    fn from_parts(kind: DistKind, pmf: Vec<f64>, tail: TailRule) -> Self {
        let cumsum = compensated_prefix(&pmf);
        let tail_mass = match tail {
            TailRule::Zero => 0.0,
            TailRule::Geometric { first, ratio } => first / (1.0 - ratio),
        };
        let rev: Vec<f64> = pmf.iter().rev().copied().collect();
        let mut survival: Vec<f64> = compensated_prefix(&rev)
            .into_iter()
            .map(|s| s + tail_mass)
            .rev()
            .collect();
        survival.push(tail_mass);
        DegreeDistribution {
            kind,
            pmf,
            cumsum,
            survival,
            tail,
        }
    }

    pub fn kind(&self) -> &DistKind {
        &self.kind
    }

    pub fn tail_rule(&self) -> TailRule {
        self.tail
    }

    /// Stored `q_0..q_J`.
    pub fn pmf_prefix(&self) -> &[f64] {
        &self.pmf
    }

    /// `Σ_{i≤j} q_i` for every stored `j`.
    pub fn cumsum_prefix(&self) -> &[f64] {
        &self.cumsum
    }

    /// Named parameters of the family.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match self.kind {
            DistKind::Optimal { rho, mean, k } => {
                vec![("rho", rho), ("N", mean as f64), ("K", k as f64)]
            }
            DistKind::Poisson { mean } => vec![("N", mean)],
            DistKind::NegBinomial { mean, r } => vec![("N", mean), ("r", r)],
            DistKind::Deterministic { n } => vec![("N", n as f64)],
            DistKind::FiniteKkt { rho, mean, horizon, k } => vec![
                ("rho", rho),
                ("N", mean as f64),
                ("T", horizon as f64),
                ("k", k as f64),
            ],
            DistKind::Tabulated => vec![],
        }
    }

    /// `q_i` for any `i`, including the analytic tail.
    pub fn pmf(&self, i: usize) -> f64 {
        if i < self.pmf.len() {
            return self.pmf[i];
        }
        match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Geometric { first, ratio } => {
                first * ratio.powf((i - self.pmf.len()) as f64)
            }
        }
    }

    /// `P(n ≥ j)`.
    pub fn survival(&self, j: usize) -> f64 {
        if let DistKind::Optimal { rho, mean, k } = self.kind {
            if j <= k {
                return 1.0;
            }
            return (mean - k) as f64 * (rho - 1.0) * rho.powf(k as f64 - j as f64);
        }
        if j < self.survival.len() {
            return self.survival[j];
        }
        match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Geometric { first, ratio } => {
                first * ratio.powf((j - self.pmf.len()) as f64) / (1.0 - ratio)
            }
        }
    }

    /// `S_{j-1} = P(n < j)`.
    pub fn prob_below(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else if j <= self.cumsum.len() {
            self.cumsum[j - 1]
        } else {
            1.0 - self.survival(j)
        }
    }

    /// Total probability mass.
    pub fn total_mass(&self) -> f64 {
        self.cumsum.last().copied().unwrap_or(0.0) + self.survival(self.pmf.len())
    }

    /// `Σ i·q_i`, summed from the stored pmf and the analytic tail.
    pub fn mean(&self) -> f64 {
        let head = compensated_sum(self.pmf.iter().enumerate().map(|(i, q)| i as f64 * q));
        let tail = match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Geometric { first, ratio } => {
                let l = self.pmf.len() as f64;
                first * (l / (1.0 - ratio) + ratio / (1.0 - ratio).powi(2))
            }
        };
        head + tail
    }

    /// Largest degree with positive mass, or `None` for an infinite support.
    pub fn support_max(&self) -> Option<usize> {
        match self.tail {
            TailRule::Geometric { .. } => None,
            TailRule::Zero => self.pmf.iter().rposition(|q| *q > 0.0),
        }
    }

    /// Inverse-CDF sample. Zero-mass atoms are never returned; a geometric
    /// tail is sampled in closed form.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let j = self.cumsum.partition_point(|c| *c <= u);
        if j < self.cumsum.len() {
            return j;
        }
        match self.tail {
            TailRule::Zero => self.support_max().unwrap_or(0),
            TailRule::Geometric { ratio, .. } => {
                let v: f64 = 1.0 - rng.random::<f64>();
                let m = (v.ln() / ratio.ln()).floor();
                self.pmf.len() + if m.is_finite() { m as usize } else { 0 }
            }
        }
    }

    /// Writes `i,q_i,cumsum` rows for `i ≤ upto`.
    pub fn write_pmf_csv<W: Write>(&self, upto: usize, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "i,q_i,cumsum")?;
        for i in 0..=upto {
            writeln!(out, "{},{:.17e},{:.17e}", i, self.pmf(i), self.prob_below(i + 1))?;
        }
        Ok(())
    }
}

/// The variance-optimal distribution at mean `N` for decay rate `ρ`:
/// `K = max(0, N − ⌊ρ/(ρ−1)⌋)`, `q_K = 1 − (N−K)(ρ−1)/ρ` and
/// `q_i = (N−K)(ρ−1)² ρ^{K−i−1}` for `i > K`.
pub fn optimal_distribution(rho: f64, mean: usize) -> Result<DegreeDistribution> {
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must exceed 1, got {rho}")));
    }
    if mean < 1 {
        return Err(Error::Parameter("mean degree must be at least 1".into()));
    }
    let cap = (rho / (rho - 1.0)).floor();
    let k = if (mean as f64) > cap { mean - cap as usize } else { 0 };
    let m = (mean - k) as f64;
    let qk = (1.0 - m * (rho - 1.0) / rho).max(0.0);
    let mut pmf = vec![0.0; k + 1];
    pmf[k] = qk;
    let first = m * (rho - 1.0).powi(2) / (rho * rho);
    Ok(DegreeDistribution::from_parts(
        DistKind::Optimal { rho, mean, k },
        pmf,
        TailRule::Geometric {
            first,
            ratio: 1.0 / rho,
        },
    ))
}

/// Log-pmf tabulation until the terms underflow past the mean, then
/// renormalisation to unit mass.
fn tabulate_log_pmf(mean: f64, log_q0: f64, step: impl Fn(usize) -> f64) -> Vec<f64> {
    const LOG_FLOOR: f64 = -690.0;
    let mut out = Vec::new();
    let mut lq = log_q0;
    let mut i = 0usize;
    loop {
        out.push(lq.exp());
        if i as f64 > mean && lq < LOG_FLOOR {
            break;
        }
        lq += step(i);
        i += 1;
    }
    let total = compensated_sum(out.iter().copied());
    out.iter().map(|q| q / total).collect()
}

/// Poisson degrees with the given mean.
pub fn poisson_distribution(mean: f64) -> Result<DegreeDistribution> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Parameter(format!("Poisson mean must be positive, got {mean}")));
    }
    let ln_mean = mean.ln();
    let pmf = tabulate_log_pmf(mean, -mean, |i| ln_mean - ((i + 1) as f64).ln());
    Ok(DegreeDistribution::from_parts(DistKind::Poisson { mean }, pmf, TailRule::Zero))
}

/// Negative binomial degrees with the given mean and shape `r`
/// (`q_i ∝ C(i+r−1, i)(1−p)^i` with `p = r/(r+N)`).
pub fn negbinomial_distribution(mean: f64, r: f64) -> Result<DegreeDistribution> {
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "negative binomial mean must be positive, got {mean}"
        )));
    }
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::Parameter(format!("negative binomial shape must be >= 1, got {r}")));
    }
    let p = r / (r + mean);
    let ln_fail = (1.0 - p).ln();
    let pmf = tabulate_log_pmf(mean, r * p.ln(), |i| {
        ((i as f64 + r) / (i as f64 + 1.0)).ln() + ln_fail
    });
    Ok(DegreeDistribution::from_parts(
        DistKind::NegBinomial { mean, r },
        pmf,
        TailRule::Zero,
    ))
}

/// Point mass at `n`.
pub fn deterministic(n: usize) -> DegreeDistribution {
    let mut pmf = vec![0.0; n + 1];
    pmf[n] = 1.0;
    DegreeDistribution::from_parts(DistKind::Deterministic { n }, pmf, TailRule::Zero)
}

/// A finite pmf given explicitly; it must be non-negative with mass 1
/// within 1e-9 and is renormalised.
pub fn tabulated(pmf: Vec<f64>) -> Result<DegreeDistribution> {
    validate_pmf(&pmf)?;
    let total = compensated_sum(pmf.iter().copied());
    let pmf = pmf.iter().map(|q| q / total).collect();
    Ok(DegreeDistribution::from_parts(DistKind::Tabulated, pmf, TailRule::Zero))
}

fn validate_pmf(pmf: &[f64]) -> Result<()> {
    if pmf.is_empty() {
        return Err(Error::Parameter("pmf is empty".into()));
    }
    if let Some((i, q)) = pmf.iter().enumerate().find(|(_, q)| !(**q >= 0.0) || !q.is_finite()) {
        return Err(Error::Parameter(format!("q_{i} = {q} is not a probability")));
    }
    let total = compensated_sum(pmf.iter().copied());
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("pmf sums to {total}, not 1")));
    }
    Ok(())
}

/// Finite-horizon KKT point of the relaxed variance program over pmfs on
/// `0..=horizon` with mean `N`.
///
/// The active index is `k = N − 1 − ⌊ρ/(ρ−1)⌋` (at least −1); when rounding
/// at the horizon excludes it, the neighbouring indices are tried. With
/// `m = N−k−1` and `D = 1 − ρ^{−T+k+1}`:
/// `q_{k+1} = 1 − m(ρ−1)/(Dρ)`, `q_i = m(ρ−1)²ρ^{k−i}/D` for `k+1 < i < T`
/// and `q_T = m(ρ−1)/(ρ^{T−k−1} − 1)`.
pub fn finite_kkt_solution(rho: f64, mean: usize, horizon: usize) -> Result<DegreeDistribution> {
    let k = finite_kkt_index(rho, mean, horizon)?;
    let t = horizon as i64;
    let m = (mean as i64 - k - 1) as f64;
    let d = 1.0 - rho.powf((-t + k + 1) as f64);
    let mut pmf = vec![0.0; horizon + 1];
    pmf[(k + 1) as usize] = (1.0 - m * (rho - 1.0) / (d * rho)).max(0.0);
    for i in (k + 2)..t {
        pmf[i as usize] = m * (rho - 1.0).powi(2) * rho.powf((k - i) as f64) / d;
    }
    if t > k + 1 {
        pmf[horizon] = m * (rho - 1.0) / (rho.powf((t - k - 1) as f64) - 1.0);
    }
    Ok(DegreeDistribution::from_parts(
        DistKind::FiniteKkt {
            rho,
            mean,
            horizon,
            k,
        },
        pmf,
        TailRule::Zero,
    ))
}

fn finite_kkt_index(rho: f64, mean: usize, horizon: usize) -> Result<i64> {
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(Error::Parameter(format!("rho must exceed 1, got {rho}")));
    }
    if mean < 1 {
        return Err(Error::Parameter("mean degree must be at least 1".into()));
    }
    let n = mean as i64;
    let t = horizon as i64;
    let cap = (rho / (rho - 1.0)).floor().min(1e15) as i64;
    let k0 = (n - 1 - cap).max(-1);
    let mut failures = Vec::new();
    for k in [k0, k0 + 1, k0 - 1] {
        if k < -1 || k > n - 1 {
            continue;
        }
        if t <= k + 1 {
            failures.push(format!("k = {k}: horizon T = {t} must exceed k + 1"));
            continue;
        }
        let m = (n - k - 1) as f64;
        let d = 1.0 - rho.powf((-t + k + 1) as f64);
        let primal = rho * d / (rho - 1.0);
        if m > primal {
            failures.push(format!(
                "k = {k}: primal check ρ(1−ρ^(−T+k+1))/(ρ−1) = {primal} >= N−k−1 = {m} fails"
            ));
            continue;
        }
        if k >= 0 {
            let dual = d / (rho - 1.0);
            if m <= dual {
                failures.push(format!(
                    "k = {k}: dual check N−k−1 = {m} > (1−ρ^(−T+k+1))/(ρ−1) = {dual} fails"
                ));
                continue;
            }
        }
        return Ok(k);
    }
    Err(Error::Infeasible(format!(
        "no feasible active index for rho = {rho}, N = {mean}, T = {horizon}: {}",
        failures.join("; ")
    )))
}

/// Closed-form value of `Σ_{j=1}^{T} ρ^{−2j}/(1 − S_{j−1})` at the finite
/// KKT point.
pub fn finite_kkt_objective(rho: f64, mean: usize, horizon: usize) -> Result<f64> {
    let k = finite_kkt_index(rho, mean, horizon)?;
    let m = (mean as i64 - k - 1) as f64;
    let d = 1.0 - rho.powf((-(horizon as i64) + k + 1) as f64);
    let e = 2.0 * (k + 1) as f64;
    Ok((1.0 - rho.powf(-e)) / (rho * rho - 1.0) + d * d / (m * (rho - 1.0).powi(2) * rho.powf(e)))
}

/// Re-weighted coefficients `b̂_j = b_j / P(n ≥ j)` for `j ≤ n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCoeffs {
    pub bhat: Vec<f64>,
    pub degree: usize,
}

const MIN_SURVIVAL: f64 = 1e-14;

/// Re-weights `coeffs[0..=n]` by the survival function of `dist`.
pub fn reweight(coeffs: &[f64], dist: &DegreeDistribution) -> Result<WeightedCoeffs> {
    let degree = coeffs.len().saturating_sub(1);
    let bhat = coeffs
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let s = dist.survival(j);
            if s < MIN_SURVIVAL {
                Err(Error::Degenerate(format!(
                    "P(n >= {j}) = {s:e} is below {MIN_SURVIVAL:e}"
                )))
            } else {
                Ok(b / s)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(WeightedCoeffs { bhat, degree })
}

/// Re-weighted coefficients of `series` up to degree `n`.
pub fn weighted_coefficients(
    series: &impl CoefficientSource,
    dist: &DegreeDistribution,
    n: usize,
) -> Result<WeightedCoeffs> {
    reweight(&series.coefficients(n)?, dist)
}

/// `(π/2) Σ_{j≥1} b_j² S_{j−1}/(1 − S_{j−1})`, the expected squared
/// Chebyshev-weighted distance between the randomized truncation and `f`.
pub fn chebyshev_weighted_variance(
    series: &ChebSeries,
    dist: &DegreeDistribution,
    tail_terms: usize,
) -> Result<f64> {
    let b = series.coeffs();
    if tail_terms < b.len() {
        return Err(Error::Parameter(format!(
            "tail_terms = {tail_terms} is shorter than the series ({} coefficients)",
            b.len()
        )));
    }
    let mut terms = Vec::with_capacity(b.len());
    for (j, &bj) in b.iter().enumerate().skip(1) {
        let below = dist.prob_below(j);
        if bj == 0.0 || below == 0.0 {
            continue;
        }
        let surv = dist.survival(j);
        if surv <= 0.0 {
            return Err(Error::InfiniteVariance(format!(
                "P(n >= {j}) = 0 while b_{j} = {bj:e} is nonzero"
            )));
        }
        terms.push(bj * bj * below / surv);
    }
    Ok(0.5 * PI * compensated_sum(terms.into_iter()))
}

/// `Σ_{j=1}^{terms} ρ^{−2j} S_{j−1}/(1 − S_{j−1})`.
pub fn relaxed_objective(dist: &DegreeDistribution, rho: f64, terms: usize) -> Result<f64> {
    if terms < 1 {
        return Err(Error::Parameter("terms must be at least 1".into()));
    }
    if !(rho > 1.0) {
        return Err(Error::Parameter(format!("rho must exceed 1, got {rho}")));
    }
    let mut parts = Vec::with_capacity(terms);
    for j in 1..=terms {
        let w = rho.powf(-2.0 * j as f64);
        let below = dist.prob_below(j);
        if w == 0.0 || below == 0.0 {
            continue;
        }
        let surv = dist.survival(j);
        if surv <= 0.0 {
            return Err(Error::InfiniteVariance(format!(
                "P(n >= {j}) = 0 with positive weight"
            )));
        }
        parts.push(w * below / surv);
    }
    Ok(compensated_sum(parts.into_iter()))
}

/// Family selector used by configuration surfaces.
#[derive(Debug, Clone, PartialEq)]
pub enum DistChoice {
    Optimal,
    Poisson,
    NegBinomial(f64),
    Deterministic,
}

impl DistChoice {
    /// Builds the distribution at mean `mean`; `rho` is required for
    /// [`DistChoice::Optimal`].
    pub fn build(&self, mean: usize, rho: Option<f64>) -> Result<DegreeDistribution> {
        match self {
            DistChoice::Optimal => {
                let rho = rho.ok_or_else(|| {
                    Error::Config("the optimal distribution needs rho (give --rho or use auto)".into())
                })?;
                optimal_distribution(rho, mean)
            }
            DistChoice::Poisson => poisson_distribution(mean as f64),
            DistChoice::NegBinomial(r) => negbinomial_distribution(mean as f64, *r),
            DistChoice::Deterministic => Ok(deterministic(mean)),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, DistChoice::Deterministic)
    }

    /// Parses `opt`, `pois`, `det`, `neg` (shape `default_r`) or `neg(r)`.
    pub fn parse_with_default(s: &str, default_r: f64) -> Result<Self> {
        let s = s.trim();
        match s {
            "opt" | "optimal" => Ok(DistChoice::Optimal),
            "pois" | "poisson" => Ok(DistChoice::Poisson),
            "det" | "deterministic" => Ok(DistChoice::Deterministic),
            "neg" | "negbin" => Ok(DistChoice::NegBinomial(default_r)),
            _ => {
                let inner = s
                    .strip_prefix("neg(")
                    .and_then(|t| t.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown distribution '{s}'")))?;
                let r: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad negative binomial shape in '{s}'")))?;
                Ok(DistChoice::NegBinomial(r))
            }
        }
    }
}

impl FromStr for DistChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistChoice::parse_with_default(s, 5.0)
    }
}

impl fmt::Display for DistChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistChoice::Optimal => write!(f, "opt"),
            DistChoice::Poisson => write!(f, "pois"),
            DistChoice::NegBinomial(r) => write!(f, "neg({r})"),
            DistChoice::Deterministic => write!(f, "det"),
        }
    }
}
