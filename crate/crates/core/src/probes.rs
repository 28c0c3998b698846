//! Matrix oracles, Rademacher probing and spectral-sum estimators.
//!
//! For a symmetric `A` with spectrum in `[a, b]`, `tr f(A)` is estimated by
//! `(1/M) Σ_k vₖᵀ p(A) vₖ` where `p` is a Chebyshev truncation of `f`
//! evaluated through the three-term recurrence on `Ã = (2A − (b+a)I)/(b−a)`.

use std::sync::Once;

use nalgebra::{DMatrix, DVectorView, DVectorViewMut};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chebyshev::{CoefficientSource, Interval};
use crate::degree_dist::{reweight, DegreeDistribution};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Environment variable that caps probe-level parallelism.
pub const THREADS_ENV: &str = "SPECTRAL_CHEB_THREADS";

/// Safety factor applied to power-method eigenvalue estimates, as the
/// exact ratio `11/10`.
pub fn power_safety(x: f64) -> f64 {
    x * 11.0 / 10.0
}

/// Default power-method iteration count.
pub const POWER_ITERS: usize = 50;

/// A symmetric linear map given by its action on vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    /// `y ← A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// A symmetric operator with a declared interval containing its spectrum.
pub trait MatrixOracle: LinearOperator {
    fn eig_interval(&self) -> Interval;
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let xv = DVectorView::from_slice(x, self.ncols());
        let mut yv = DVectorViewMut::from_slice(y, self.nrows());
        yv.gemv(1.0, self, &xv, 0.0);
    }
}

/// An operator paired with a spectral interval.
#[derive(Debug, Clone)]
pub struct WithInterval<O> {
    pub op: O,
    pub interval: Interval,
}

impl<O> WithInterval<O> {
    pub fn new(op: O, interval: Interval) -> Self {
        WithInterval { op, interval }
    }
}

impl<O: LinearOperator> LinearOperator for WithInterval<O> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply(x, y)
    }
}

impl<O: LinearOperator> MatrixOracle for WithInterval<O> {
    fn eig_interval(&self) -> Interval {
        self.interval
    }
}

/// Compressed sparse rows; both triangles are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        if let Some(t) = sorted.iter().find(|t| t.0 >= n || t.1 >= n) {
            return Err(Error::Dimension(format!(
                "entry ({}, {}) lies outside a {n}×{n} matrix",
                t.0 + 1,
                t.1 + 1
            )));
        }
        sorted.sort_by_key(|x| (x.0, x.1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("entry exists") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Ok(CsrMatrix {
            n,
            indptr,
            indices,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Max over entries of `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let dense = self.to_dense();
        (&dense - dense.transpose()).amax()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for p in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[p])] += self.values[p];
            }
        }
        m
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let span = self.indptr[r]..self.indptr[r + 1];
            *yr = self.indices[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&c, v)| v * x[c])
                .sum();
        }
    }
}

/// The randomness of one estimator evaluation: a master seed, the probe
/// count, and the truncation degree once drawn.
///
/// Probe `k` uses stream `k + 1` of the master seed and the degree uses
/// stream 0, so every quantity is independent of evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbePlan {
    master_seed: u64,
    probes: usize,
    degree: Option<usize>,
}

impl ProbePlan {
    pub fn new(master_seed: u64, probes: usize) -> Result<Self> {
        if probes < 1 {
            return Err(Error::Parameter("probe count M must be at least 1".into()));
        }
        Ok(ProbePlan {
            master_seed,
            probes,
            degree: None,
        })
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn probes(&self) -> usize {
        self.probes
    }

    pub fn degree(&self) -> Option<usize> {
        self.degree
    }

    /// Fixes the degree without sampling.
    pub fn with_degree(mut self, n: usize) -> Self {
        self.degree = Some(n);
        self
    }

    pub fn probe_rng(&self, k: usize) -> ChaCha8Rng {
        stream_rng(self.master_seed, k as u64 + 1)
    }

    pub fn degree_rng(&self) -> ChaCha8Rng {
        stream_rng(self.master_seed, 0)
    }

    /// Probe vector `k`.
    pub fn probe(&self, k: usize, dim: usize) -> Vec<f64> {
        rademacher_from(&mut self.probe_rng(k), dim)
    }

    /// Draws the degree from `dist` (once; later calls return the same
    /// value) and records it in the plan.
    pub fn draw_degree(&mut self, dist: &DegreeDistribution) -> usize {
        if let Some(n) = self.degree {
            return n;
        }
        let n = dist.sample(&mut self.degree_rng());
        self.degree = Some(n);
        n
    }
}

fn rademacher_from(rng: &mut impl RngCore, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    while out.len() < dim {
        let bits = rng.next_u64();
        let take = (dim - out.len()).min(64);
        out.extend((0..take).map(|i| if (bits >> i) & 1 == 1 { 1.0 } else { -1.0 }));
    }
    out
}

/// A vector of independent ±1 entries, reproducible from `seed`.
pub fn rademacher_probe(dim: usize, seed: u64) -> Vec<f64> {
    rademacher_from(&mut stream_rng(seed, 0), dim)
}

/// Configures the global rayon pool from [`THREADS_ENV`] once per process.
pub fn init_thread_pool() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|n| *n >= 1)
        {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Runs `f` for every probe index in parallel; results keep index order and
/// the first failing index (in order) determines the error.
pub(crate) fn map_probes<T: Send>(m: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    init_thread_pool();
    let results: Vec<Result<T>> = (0..m).into_par_iter().map(f).collect();
    results.into_iter().collect()
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

/// `y ← Ã x = scale·A x − shift·x`.
pub(crate) fn apply_shifted<O: LinearOperator + ?Sized>(
    op: &O,
    interval: Interval,
    x: &[f64],
    y: &mut [f64],
) {
    op.apply(x, y);
    let (s, c) = (interval.scale(), interval.shift());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = s * *yi - c * xi;
    }
}

/// Relative growth of `‖T_j(Ã)v‖` over `‖v‖` that signals a spectrum
/// outside the declared interval.
pub(crate) const ESCAPE_RATIO_SQ: f64 = 1.05 * 1.05;

pub(crate) fn check_vector(w: &[f64], v_norm_sq: f64, probe: usize, degree: usize) -> Result<()> {
    let nw = norm_sq(w);
    if !nw.is_finite() {
        return Err(Error::ProbeNumeric {
            probe,
            degree,
            msg: "non-finite recurrence vector".into(),
        });
    }
    if nw > ESCAPE_RATIO_SQ * v_norm_sq + 1e-300 {
        return Err(Error::SpectrumEscaped { probe, degree });
    }
    Ok(())
}

/// `vᵀ Σ_j c_j T_j(Ã) v` with `coeffs.len() − 1` matvecs.
pub(crate) fn chebyshev_quadratic_form<O: LinearOperator + ?Sized>(
    op: &O,
    interval: Interval,
    coeffs: &[f64],
    v: &[f64],
    probe: usize,
) -> Result<f64> {
    let d = v.len();
    let vv = norm_sq(v);
    let mut acc = coeffs[0] * vv;
    if coeffs.len() == 1 {
        return Ok(acc);
    }
    let mut prev = v.to_vec();
    let mut cur = vec![0.0; d];
    apply_shifted(op, interval, v, &mut cur);
    check_vector(&cur, vv, probe, 1)?;
    acc += coeffs[1] * dot(v, &cur);
    let mut next = vec![0.0; d];
    for (j, &c) in coeffs.iter().enumerate().skip(2) {
        apply_shifted(op, interval, &cur, &mut next);
        for (n, p) in next.iter_mut().zip(&prev) {
            *n = 2.0 * *n - p;
        }
        check_vector(&next, vv, probe, j)?;
        acc += c * dot(v, &next);
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
    }
    if !acc.is_finite() {
        return Err(Error::ProbeNumeric {
            probe,
            degree: coeffs.len() - 1,
            msg: "non-finite quadratic form".into(),
        });
    }
    Ok(acc)
}

/// Result of one spectral-sum estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub degree: usize,
    pub per_probe: Vec<f64>,
    pub matvecs: u64,
}

impl SpectralEstimate {
    /// Sample standard error across probes (0 for a single probe).
    pub fn std_error(&self) -> f64 {
        let m = self.per_probe.len();
        if m < 2 {
            return 0.0;
        }
        let var = self
            .per_probe
            .iter()
            .map(|x| (x - self.value).powi(2))
            .sum::<f64>()
            / (m - 1) as f64;
        (var / m as f64).sqrt()
    }
}

fn check_interval(op_iv: Interval, series_iv: Interval) -> Result<()> {
    let tol = 1e-12 * (op_iv.a().abs() + op_iv.b().abs() + 1.0);
    if (op_iv.a() - series_iv.a()).abs() > tol || (op_iv.b() - series_iv.b()).abs() > tol {
        return Err(Error::Config(format!(
            "series interval [{}, {}] differs from the operator interval [{}, {}]",
            series_iv.a(),
            series_iv.b(),
            op_iv.a(),
            op_iv.b()
        )));
    }
    Ok(())
}

/// Estimate with explicit coefficients; ordered sum over probes.
pub fn estimate_with_coefficients<O: MatrixOracle + ?Sized>(
    op: &O,
    coeffs: &[f64],
    plan: &ProbePlan,
) -> Result<SpectralEstimate> {
    let interval = op.eig_interval();
    let dim = op.dim();
    let per_probe = map_probes(plan.probes(), |k| {
        let v = plan.probe(k, dim);
        chebyshev_quadratic_form(op, interval, coeffs, &v, k)
    })?;
    let value = per_probe.iter().sum::<f64>() / per_probe.len() as f64;
    let degree = coeffs.len() - 1;
    Ok(SpectralEstimate {
        value,
        degree,
        matvecs: (plan.probes() * degree) as u64,
        per_probe,
    })
}

/// Hutchinson estimate of `tr p_n(A)` with the degree-`n` truncation.
pub fn estimate_spectral_sum_fixed<O: MatrixOracle + ?Sized>(
    op: &O,
    series: &impl CoefficientSource,
    n: usize,
    plan: &ProbePlan,
) -> Result<SpectralEstimate> {
    check_interval(op.eig_interval(), series.interval())?;
    let coeffs = series.coefficients(n)?;
    estimate_with_coefficients(op, &coeffs, &plan.with_degree(n))
}

/// Unbiased estimate of `tr f(A)`: draws `n` from `dist` (unless the plan
/// already carries one) and uses the re-weighted truncation.
pub fn estimate_spectral_sum_unbiased<O: MatrixOracle + ?Sized>(
    op: &O,
    series: &impl CoefficientSource,
    dist: &DegreeDistribution,
    plan: &ProbePlan,
) -> Result<SpectralEstimate> {
    check_interval(op.eig_interval(), series.interval())?;
    let mut plan = *plan;
    let n = plan.draw_degree(dist);
    let w = reweight(&series.coefficients(n)?, dist)?;
    estimate_with_coefficients(op, &w.bhat, &plan)
}

/// Rayleigh quotient after `iters` power iterations from a Rademacher start.
pub fn power_method_rayleigh<O: LinearOperator + ?Sized>(op: &O, iters: usize, seed: u64) -> Result<f64> {
    if iters < 1 {
        return Err(Error::Parameter("power method needs at least one iteration".into()));
    }
    let d = op.dim();
    for attempt in 0..16u64 {
        let mut x = rademacher_probe(d, seed.wrapping_add(attempt));
        let mut y = vec![0.0; d];
        let mut rayleigh = 0.0;
        let mut degenerate = false;
        for _ in 0..iters {
            let nx = norm_sq(&x).sqrt();
            x.iter_mut().for_each(|v| *v /= nx);
            op.apply(&x, &mut y);
            rayleigh = dot(&x, &y);
            let ny = norm_sq(&y);
            if ny == 0.0 {
                degenerate = true;
                break;
            }
            if !ny.is_finite() {
                return Err(Error::Numeric("power iteration produced non-finite values".into()));
            }
            std::mem::swap(&mut x, &mut y);
        }
        if !degenerate {
            return Ok(rayleigh);
        }
    }
    Ok(0.0)
}

/// Upper eigenvalue bound: Rayleigh estimate times 1.1.
pub fn power_method_bound<O: LinearOperator + ?Sized>(op: &O, iters: usize, seed: u64) -> Result<f64> {
    Ok(power_safety(power_method_rayleigh(op, iters, seed)?))
}
