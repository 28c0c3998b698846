//! Gaussian-process hyperparameter learning with a dense RBF kernel
//! `A(θ) = θ₂² exp(−‖x_i − x_j‖²/(2θ₃²)) + θ₁² I`.
//!
//! Optimization runs over `φ = log θ`, so
//! `∂A/∂φ₁ = 2θ₁² I`, `∂A/∂φ₂ = 2K` and `∂A/∂φ₃ = K ∘ D/θ₃²`, where `K` is the
//! scaled kernel and `D` the squared distances.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chebyshev::Interval;
use crate::degree_dist::DegreeDistribution;
use crate::error::{Error, Result};
use crate::function::{ChebApprox, SpectralFunction};
use crate::grad_est::{grad_estimate_generic, AtTheta, ParamMatrixOracle};
use crate::linalg::{conjugate_gradient, CG_TOL};
use crate::optimize::{Objective, Projection, RunOutput, SpectralTerm, StepInfo, TermGrad};
use crate::probes::{
    estimate_spectral_sum_fixed, estimate_spectral_sum_unbiased, power_method_bound, LinearOperator, ProbePlan,
    POWER_ITERS,
};
use crate::rng::stream_rng;

use super::completion::{run_optimizer, OptimizerConfig};
use super::data::parse_matrix;

/// Inputs, outputs and hyperparameters `(θ₁ noise, θ₂ scale, θ₃ lengthscale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GPProblem {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub theta: [f64; 3],
    sq_dists: DMatrix<f64>,
}

fn check_theta(theta: &[f64; 3]) -> Result<()> {
    if theta.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::Parameter(format!("hyperparameters must be positive, got {theta:?}")));
    }
    Ok(())
}

impl GPProblem {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, theta: [f64; 3]) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Dimension(format!("{} inputs but {} outputs", x.len(), y.len())));
        }
        if x.len() > crate::reference::MAX_DENSE_DIM {
            return Err(Error::Parameter(format!(
                "dense kernels accept at most {} points, got {}",
                crate::reference::MAX_DENSE_DIM,
                x.len()
            )));
        }
        let l = x[0].len();
        if l == 0 || x.iter().any(|r| r.len() != l) {
            return Err(Error::Dimension("inputs must share a positive dimension".into()));
        }
        if x.iter().flatten().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: 0, msg: "data contain non-finite values".into() });
        }
        check_theta(&theta)?;
        let d = x.len();
        let sq_dists = DMatrix::from_fn(d, d, |i, j| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum());
        Ok(GPProblem { x, y, theta, sq_dists })
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn with_theta(&self, theta: [f64; 3]) -> Result<Self> {
        check_theta(&theta)?;
        Ok(GPProblem { theta, ..self.clone() })
    }

    /// `θ₂² exp(−D/(2θ₃²))` without the noise term.
    pub fn scaled_kernel(&self, theta: &[f64; 3]) -> DMatrix<f64> {
        let s2 = theta[1] * theta[1];
        let l2 = theta[2] * theta[2];
        self.sq_dists.map(|d| s2 * (-d / (2.0 * l2)).exp())
    }

    /// `A(θ)`.
    pub fn kernel(&self, theta: &[f64; 3]) -> DMatrix<f64> {
        self.scaled_kernel(theta) + DMatrix::identity(self.dim(), self.dim()) * (theta[0] * theta[0])
    }

    /// The family over `φ = log θ` at `theta`.
    pub fn family(&self, theta: &[f64; 3], interval: Interval) -> GpFamily {
        let k = self.scaled_kernel(theta);
        let l2 = theta[2] * theta[2];
        let dk3 = k.component_mul(&self.sq_dists) / l2;
        let noise = theta[0] * theta[0];
        GpFamily {
            a: &k + DMatrix::identity(self.dim(), self.dim()) * noise,
            partials: [
                DMatrix::identity(self.dim(), self.dim()) * (2.0 * noise),
                k * 2.0,
                dk3,
            ],
            interval,
        }
    }
}

/// Dense `A(θ)` with its log-parameter partials.
#[derive(Debug, Clone)]
pub struct GpFamily {
    a: DMatrix<f64>,
    partials: [DMatrix<f64>; 3],
    interval: Interval,
}

impl GpFamily {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn partial(&self, i: usize) -> &DMatrix<f64> {
        &self.partials[i]
    }
}

impl ParamMatrixOracle for GpFamily {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.a.apply(x, y)
    }

    fn apply_partial(&self, i: usize, x: &[f64], y: &mut [f64]) {
        self.partials[i].apply(x, y)
    }

    fn eig_interval(&self) -> Interval {
        self.interval
    }
}

fn cholesky(a: DMatrix<f64>, theta: &[f64; 3]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(a).ok_or_else(|| {
        Error::NotPositiveDefinite(format!(
            "kernel at θ = {theta:?} is not positive definite; try a larger noise θ₁"
        ))
    })
}

/// `½ yᵀA⁻¹y + ½ log det A + (d/2) log 2π` via Cholesky.
pub fn gp_negloglik(gp: &GPProblem) -> Result<f64> {
    gp_negloglik_at(gp, &gp.theta)
}

pub fn gp_negloglik_at(gp: &GPProblem, theta: &[f64; 3]) -> Result<f64> {
    check_theta(theta)?;
    let chol = cholesky(gp.kernel(theta), theta)?;
    let y = DVector::from_column_slice(&gp.y);
    let alpha = chol.solve(&y);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * y.dot(&alpha) + 0.5 * logdet + 0.5 * gp.dim() as f64 * (2.0 * PI).ln())
}

/// Exact gradient of the NLL with respect to `log θ`:
/// `½ tr(A⁻¹ ∂A) − ½ αᵀ ∂A α` with `α = A⁻¹y`.
pub fn gp_negloglik_grad_exact(gp: &GPProblem, theta: &[f64; 3]) -> Result<[f64; 3]> {
    check_theta(theta)?;
    let chol = cholesky(gp.kernel(theta), theta)?;
    let inv = chol.inverse();
    let alpha = chol.solve(&DVector::from_column_slice(&gp.y));
    let fam = gp.family(theta, Interval::new(0.0, 1.0)?);
    let mut g = [0.0; 3];
    for (i, gi) in g.iter_mut().enumerate() {
        let p = fam.partial(i);
        *gi = 0.5 * inv.component_mul(p).sum() - 0.5 * alpha.dot(&(p * &alpha));
    }
    Ok(g)
}

/// `[θ₁², power-method bound]`.
pub fn kernel_interval(gp: &GPProblem, theta: &[f64; 3], seed: u64) -> Result<Interval> {
    let fam = gp.family(theta, Interval::new(0.0, 1.0)?);
    let lo = theta[0] * theta[0];
    let hi = power_method_bound(&AtTheta(&fam), POWER_ITERS, seed)?;
    Interval::new(lo, hi.max(lo * 1.1))
}

fn cg_alpha(op: &impl LinearOperator, y: &[f64]) -> Result<(Vec<f64>, u64)> {
    let sol = conjugate_gradient(op, y, CG_TOL)?;
    Ok((sol.x, sol.iterations as u64))
}

/// Unbiased NLL estimate: CG for the quadratic form, the randomized
/// Chebyshev estimator for `log det`.
pub fn gp_negloglik_estimate(gp: &GPProblem, dist: &DegreeDistribution, probes: usize, seed: u64) -> Result<f64> {
    let iv = kernel_interval(gp, &gp.theta, seed)?;
    let fam = gp.family(&gp.theta, iv);
    let op = AtTheta(&fam);
    let approx = ChebApprox::new(SpectralFunction::Log, iv, 64)?;
    let plan = ProbePlan::new(seed, probes)?;
    let logdet = estimate_spectral_sum_unbiased(&op, &approx, dist, &plan)?;
    let (alpha, _) = cg_alpha(&op, &gp.y)?;
    let quad: f64 = alpha.iter().zip(&gp.y).map(|(a, b)| a * b).sum();
    Ok(0.5 * quad + 0.5 * logdet.value + 0.5 * gp.dim() as f64 * (2.0 * PI).ln())
}

fn theta_of(phi: &[f64]) -> Result<[f64; 3]> {
    if phi.len() != 3 {
        return Err(Error::Dimension(format!("expected 3 log-hyperparameters, got {}", phi.len())));
    }
    let t = [phi[0].exp(), phi[1].exp(), phi[2].exp()];
    check_theta(&t)?;
    Ok(t)
}

/// The NLL as a stochastic term over `φ = log θ`; the data-fit gradient uses
/// CG and the `log det` gradient the generic estimator with `f = log`.
#[derive(Debug, Clone)]
pub struct GpTerm {
    gp: GPProblem,
    dist: DegreeDistribution,
    approx: Option<ChebApprox>,
    pub eval_degree: usize,
    pub eval_probes: usize,
}

impl GpTerm {
    pub fn new(gp: GPProblem, dist: DegreeDistribution) -> Self {
        GpTerm {
            gp,
            dist,
            approx: None,
            eval_degree: 50,
            eval_probes: 30,
        }
    }

    fn approx(&self) -> Result<&ChebApprox> {
        self.approx
            .as_ref()
            .ok_or_else(|| Error::Precondition("interval not initialised; call refresh first".into()))
    }

    fn family(&self, phi: &[f64]) -> Result<GpFamily> {
        Ok(self.gp.family(&theta_of(phi)?, self.approx()?.cached().interval()))
    }
}

impl SpectralTerm for GpTerm {
    fn param_len(&self) -> usize {
        3
    }

    fn refresh(&mut self, theta: &[f64], seed: u64, widen: bool) -> Result<u64> {
        let mut iv = kernel_interval(&self.gp, &theta_of(theta)?, seed)?;
        if let (true, Some(old)) = (widen, self.approx.as_ref()) {
            let o = old.cached().interval();
            iv = Interval::new(iv.a().min(o.a()), iv.b().max(o.b()))?;
        }
        self.approx = Some(ChebApprox::new(SpectralFunction::Log, iv, 64)?);
        Ok(POWER_ITERS as u64)
    }

    fn grad_sample(&self, theta: &[f64], plan: &ProbePlan) -> Result<TermGrad> {
        let fam = self.family(theta)?;
        let logdet = grad_estimate_generic(&fam, self.approx()?, &self.dist, plan)?;
        let (alpha, cg_mv) = cg_alpha(&AtTheta(&fam), &self.gp.y)?;
        let mut tmp = vec![0.0; alpha.len()];
        let grad = (0..3)
            .map(|i| {
                fam.apply_partial(i, &alpha, &mut tmp);
                let quad: f64 = alpha.iter().zip(&tmp).map(|(a, b)| a * b).sum();
                0.5 * logdet.value.as_slice()[i] - 0.5 * quad
            })
            .collect();
        Ok(TermGrad {
            grad,
            degree: logdet.degree,
            matvecs: logdet.matvecs + cg_mv + 3,
        })
    }

    fn exact_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, u64)> {
        let g = gp_negloglik_grad_exact(&self.gp, &theta_of(theta)?)?;
        Ok((g.to_vec(), self.gp.dim() as u64))
    }

    fn value_estimate(&self, theta: &[f64], seed: u64) -> Result<f64> {
        let fam = self.family(theta)?;
        let op = AtTheta(&fam);
        let plan = ProbePlan::new(seed, self.eval_probes)?;
        let logdet = estimate_spectral_sum_fixed(&op, self.approx()?, self.eval_degree, &plan)?;
        let (alpha, _) = cg_alpha(&op, &self.gp.y)?;
        let quad: f64 = alpha.iter().zip(&self.gp.y).map(|(a, b)| a * b).sum();
        Ok(0.5 * quad + 0.5 * logdet.value + 0.5 * self.gp.dim() as f64 * (2.0 * PI).ln())
    }

    fn exact_value(&self, theta: &[f64]) -> Result<f64> {
        gp_negloglik_at(&self.gp, &theta_of(theta)?)
    }
}

/// Outcome of [`gp_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct GpResult {
    pub theta: [f64; 3],
    pub nll: f64,
    pub matvecs: u64,
}

/// Minimizes the NLL over `log θ` starting from `gp.theta`.
pub fn gp_train(
    gp: &GPProblem,
    dist: DegreeDistribution,
    opt: &OptimizerConfig,
    callback: impl FnMut(&StepInfo),
) -> Result<GpResult> {
    let mut obj = Objective::new(GpTerm::new(gp.clone(), dist), Projection::Identity);
    let phi0: Vec<f64> = gp.theta.iter().map(|t| t.ln()).collect();
    let RunOutput { theta, matvecs, .. } = run_optimizer(&mut obj, &phi0, opt, callback)?;
    let theta = theta_of(&theta)?;
    Ok(GpResult {
        theta,
        nll: gp_negloglik_at(gp, &theta)?,
        matvecs,
    })
}

/// `d` inputs uniform on `[0, span]` with outputs drawn from the GP prior
/// at `theta`.
pub fn synthetic_gp(d: usize, span: f64, theta: [f64; 3], seed: u64) -> Result<GPProblem> {
    let mut rng = stream_rng(seed, 0);
    let x: Vec<Vec<f64>> = (0..d).map(|_| vec![span * rng.random::<f64>()]).collect();
    let gp = GPProblem::new(x, vec![0.0; d], theta)?;
    let chol = cholesky(gp.kernel(&theta), &theta)?;
    let mut zrng = stream_rng(seed, 1);
    let z = DVector::from_fn(d, |_, _| zrng.sample::<f64, _>(StandardNormal));
    let y = chol.l() * z;
    GPProblem::new(gp.x, y.iter().copied().collect(), theta)
}

/// Reads `x,y` CSV (optional header) or a whitespace matrix whose last
/// column is `y`.
pub fn load_gp_data(path: &Path, theta: [f64; 3]) -> Result<GPProblem> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let body = match text.lines().next() {
        Some(first) if parse_matrix(first).is_err() => {
            text.split_once('\n').map_or("", |(_, rest)| rest).to_string()
        }
        _ => text.clone(),
    };
    let rows = parse_matrix(&body)?;
    if rows.is_empty() || rows[0].len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "expected at least two columns (inputs then output)".into(),
        });
    }
    let l = rows[0].len() - 1;
    let x = rows.iter().map(|r| r[..l].to_vec()).collect();
    let y = rows.iter().map(|r| r[l]).collect();
    GPProblem::new(x, y, theta)
}
