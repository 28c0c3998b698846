//! Projected SGD and SVRG for `min_θ Σ_f(A(θ)) + g(θ)` over a box.
//!
//! The spectral part is any [`SpectralTerm`]: something that can produce an
//! unbiased stochastic gradient from a [`ProbePlan`], an exact gradient at
//! desk scale, and an eigenvalue interval refreshed once per epoch.
//!
//! Every probe plan is seeded by `derive_seed(master_seed, path)` where the
//! path names the phase, epoch and iteration, so a run is a pure function of
//! its configuration.

use std::fmt;

use nalgebra::DMatrix;

use crate::chebyshev::Interval;
use crate::degree_dist::DegreeDistribution;
use crate::error::{Error, Result};
use crate::function::{ChebApprox, SpectralFunction};
use crate::grad_est::{grad_estimate_generic, grad_estimate_lowrank, AffineFamily, AtTheta, LowRankPsd};
use crate::probes::{
    estimate_spectral_sum_fixed, power_method_bound, LinearOperator, ProbePlan, WithInterval, POWER_ITERS,
};
use crate::reference::{
    exact_spectral_grad, exact_spectral_grad_lowrank, exact_spectral_sum, DenseSymmetric,
};
use crate::rng::derive_seed;

/// Seed-path tags separating the random streams of a run.
const TAG_SGD: u64 = 0;
const TAG_SVRG: u64 = 1;
const TAG_REFRESH: u64 = 2;
const TAG_RETRY: u64 = 3;

/// One stochastic gradient of a spectral term and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub grad: Vec<f64>,
    pub degree: usize,
    pub matvecs: u64,
}

/// The stochastic part of an objective.
pub trait SpectralTerm: Sync {
    /// Length of the flat parameter vector.
    fn param_len(&self) -> usize;

    /// Re-estimates the eigenvalue interval at `θ`. With `widen`, the new
    /// interval also covers the previous one. Returns the matvecs spent.
    fn refresh(&mut self, theta: &[f64], seed: u64, widen: bool) -> Result<u64>;

    /// Unbiased gradient using the plan's probes; the degree is drawn unless
    /// the plan already carries one.
    fn grad_sample(&self, theta: &[f64], plan: &ProbePlan) -> Result<TermGrad>;

    /// Gradient from the dense oracle with its cost in matvecs.
    fn exact_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, u64)>;

    /// Fixed-degree estimate of the term's value.
    fn value_estimate(&self, theta: &[f64], seed: u64) -> Result<f64>;

    /// Value from the dense oracle.
    fn exact_value(&self, theta: &[f64]) -> Result<f64>;
}

/// Feasible set `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Identity,
    Box { lo: f64, hi: f64 },
}

impl Projection {
    pub fn new_box(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Parameter(format!("box needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Projection::Box { lo, hi })
    }

    pub fn apply(&self, theta: &mut [f64]) {
        if let Projection::Box { lo, hi } = *self {
            theta.iter_mut().for_each(|t| *t = t.clamp(lo, hi));
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match *self {
            Projection::Identity => true,
            Projection::Box { lo, hi } => theta.iter().all(|t| (lo..=hi).contains(t)),
        }
    }
}

/// Elementwise clamp to `[lo, hi]`.
pub fn box_projection(theta: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let p = Projection::new_box(lo, hi)?;
    let mut out = theta.to_vec();
    p.apply(&mut out);
    Ok(out)
}

type ValueFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// `Σ_f(A(θ)) + g(θ)` restricted to `C`.
pub struct Objective<T> {
    pub term: T,
    g_value: ValueFn,
    g_grad: GradFn,
    pub projection: Projection,
}

impl<T: SpectralTerm> Objective<T> {
    /// Objective with `g ≡ 0`.
    pub fn new(term: T, projection: Projection) -> Self {
        Objective {
            term,
            g_value: Box::new(|_| 0.0),
            g_grad: Box::new(|t| vec![0.0; t.len()]),
            projection,
        }
    }

    pub fn with_regularizer(
        mut self,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.g_value = Box::new(value);
        self.g_grad = Box::new(grad);
        self
    }

    pub fn g_value(&self, theta: &[f64]) -> f64 {
        (self.g_value)(theta)
    }

    pub fn g_grad(&self, theta: &[f64]) -> Vec<f64> {
        (self.g_grad)(theta)
    }

    /// Exact objective value.
    pub fn exact_value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.term.exact_value(theta)? + self.g_value(theta))
    }

    /// Estimated objective value with the term's fixed-degree estimator.
    pub fn value_estimate(&self, theta: &[f64], seed: u64) -> Result<f64> {
        Ok(self.term.value_estimate(theta, seed)? + self.g_value(theta))
    }

    /// Stochastic gradient, refreshing the interval once if the spectrum has
    /// left it.
    pub fn grad_sample(&mut self, theta: &[f64], plan: &ProbePlan, retry_seed: u64) -> Result<TermGrad> {
        match self.term.grad_sample(theta, plan) {
            Err(Error::SpectrumEscaped { .. }) => {
                let mv = self.term.refresh(theta, retry_seed, true)?;
                let mut g = self.term.grad_sample(theta, plan)?;
                g.matvecs += mv;
                Ok(g)
            }
            other => other,
        }
    }
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `η_t = 1/(α t)` for `t = 1, 2, …`.
    InverseAlphaT { alpha: f64 },
    /// `η = initial · ratio^epoch`.
    ExpDecay { initial: f64, ratio: f64 },
}

impl StepRule {
    fn validate(&self) -> Result<()> {
        match *self {
            StepRule::InverseAlphaT { alpha } if !(alpha > 0.0) => {
                Err(Error::Parameter(format!("alpha must be positive, got {alpha}")))
            }
            StepRule::ExpDecay { initial, ratio } if !(initial > 0.0) || !(ratio > 0.0 && ratio <= 1.0) => {
                Err(Error::Parameter(format!(
                    "exponential decay needs initial > 0 and ratio in (0, 1], got {initial}, {ratio}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Step at iteration `t ≥ 1` within epoch `epoch ≥ 0`.
    pub fn step(&self, t: usize, epoch: usize) -> f64 {
        match *self {
            StepRule::InverseAlphaT { alpha } => 1.0 / (alpha * t as f64),
            StepRule::ExpDecay { initial, ratio } => initial * ratio.powi(epoch as i32),
        }
    }
}

/// Objective logging during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Log an estimate every `every` iterations (and at the end).
    pub every: usize,
    /// Seed of the fixed-degree estimator, identical at every evaluation.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SGDConfig {
    pub iterations: usize,
    /// Iterations per epoch; the interval is refreshed and the decay applied
    /// at epoch boundaries.
    pub epoch_len: usize,
    pub probes: usize,
    pub step_rule: StepRule,
    pub master_seed: u64,
    pub eval: Option<EvalConfig>,
}

impl SGDConfig {
    pub fn new(iterations: usize, probes: usize, step_rule: StepRule, master_seed: u64) -> Self {
        SGDConfig {
            iterations,
            epoch_len: iterations.max(1),
            probes,
            step_rule,
            master_seed,
            eval: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations < 1 || self.epoch_len < 1 || self.probes < 1 {
            return Err(Error::Parameter("iterations, epoch length and probes must be at least 1".into()));
        }
        self.step_rule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SVRGConfig {
    pub epochs: usize,
    pub inner: usize,
    pub eta: f64,
    pub probes: usize,
    pub master_seed: u64,
    pub eval: Option<EvalConfig>,
}

impl SVRGConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.inner < 1 || self.probes < 1 {
            return Err(Error::Parameter("epochs, inner iterations and probes must be at least 1".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Parameter(format!("step must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Which loop produced a logged point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Sgd,
    SvrgInner,
    SvrgOuter,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Sgd => "sgd",
            Phase::SvrgInner => "svrg-inner",
            Phase::SvrgOuter => "svrg-outer",
        })
    }
}

/// Data passed to the per-step callback.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<'a> {
    pub phase: Phase,
    pub epoch: usize,
    /// Global iteration count (0 before the first update).
    pub iter: usize,
    pub theta: &'a [f64],
    pub degree: Option<usize>,
    /// Norm of the full update direction.
    pub grad_norm: Option<f64>,
    /// Cumulative matvecs including interval refreshes and exact gradients.
    pub matvecs: u64,
    pub objective: Option<f64>,
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub matvecs: u64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(values: &[f64], iteration: usize, what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration,
            what: what.into(),
        });
    }
    Ok(())
}

fn maybe_eval<T: SpectralTerm>(
    obj: &mut Objective<T>,
    eval: Option<EvalConfig>,
    iter: usize,
    last: bool,
    theta: &[f64],
) -> Result<Option<f64>> {
    match eval {
        Some(e) if last || (e.every > 0 && iter.is_multiple_of(e.every)) => {
            // The cached interval may predate the current iterate.
            let v = match obj.value_estimate(theta, e.seed) {
                Err(Error::SpectrumEscaped { .. }) => {
                    obj.term.refresh(theta, derive_seed(e.seed, &[TAG_RETRY, iter as u64]), true)?;
                    obj.value_estimate(theta, e.seed)?
                }
                other => other?,
            };
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    iteration: iter,
                    what: "objective estimate".into(),
                });
            }
            Ok(Some(v))
        }
        _ => Ok(None),
    }
}

fn check_start<T: SpectralTerm>(obj: &Objective<T>, theta0: &[f64]) -> Result<Vec<f64>> {
    if theta0.len() != obj.term.param_len() {
        return Err(Error::Dimension(format!(
            "initial parameter has length {}, expected {}",
            theta0.len(),
            obj.term.param_len()
        )));
    }
    check_finite(theta0, 0, "initial parameter")?;
    let mut theta = theta0.to_vec();
    obj.projection.apply(&mut theta);
    Ok(theta)
}

/// Projected SGD: `θ ← Π_C(θ − η_t(ψ + ∇g(θ)))`.
pub fn sgd_run<T: SpectralTerm>(
    obj: &mut Objective<T>,
    theta0: &[f64],
    cfg: &SGDConfig,
    mut callback: impl FnMut(&StepInfo),
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut theta = check_start(obj, theta0)?;
    let seed = cfg.master_seed;
    let mut matvecs = obj.term.refresh(&theta, derive_seed(seed, &[TAG_REFRESH, 0]), false)?;
    callback(&StepInfo {
        phase: Phase::Init,
        epoch: 0,
        iter: 0,
        theta: &theta,
        degree: None,
        grad_norm: None,
        matvecs,
        objective: maybe_eval(obj, cfg.eval, 0, false, &theta)?,
    });
    for t in 1..=cfg.iterations {
        let epoch = (t - 1) / cfg.epoch_len;
        if t > 1 && (t - 1) % cfg.epoch_len == 0 {
            matvecs += obj.term.refresh(&theta, derive_seed(seed, &[TAG_REFRESH, epoch as u64]), false)?;
        }
        let plan = ProbePlan::new(derive_seed(seed, &[TAG_SGD, t as u64]), cfg.probes)?;
        let g = obj.grad_sample(&theta, &plan, derive_seed(seed, &[TAG_RETRY, t as u64]))?;
        matvecs += g.matvecs;
        let gg = obj.g_grad(&theta);
        let dir: Vec<f64> = g.grad.iter().zip(&gg).map(|(a, b)| a + b).collect();
        check_finite(&dir, t, "gradient")?;
        let eta = cfg.step_rule.step(t, epoch);
        for (th, d) in theta.iter_mut().zip(&dir) {
            *th -= eta * d;
        }
        obj.projection.apply(&mut theta);
        check_finite(&theta, t, "parameter")?;
        callback(&StepInfo {
            phase: Phase::Sgd,
            epoch,
            iter: t,
            theta: &theta,
            degree: Some(g.degree),
            grad_norm: Some(norm(&dir)),
            matvecs,
            objective: maybe_eval(obj, cfg.eval, t, t == cfg.iterations, &theta)?,
        });
    }
    Ok(RunOutput {
        theta,
        iterations: cfg.iterations,
        matvecs,
    })
}

/// `ψ(θ) − ψ(θ̃)` with one shared probe set and degree.
pub fn control_variate<T: SpectralTerm>(
    term: &T,
    theta: &[f64],
    snapshot: &[f64],
    plan: &ProbePlan,
) -> Result<(Vec<f64>, TermGrad, TermGrad)> {
    let g = term.grad_sample(theta, plan)?;
    let shared = plan.with_degree(g.degree);
    let gs = term.grad_sample(snapshot, &shared)?;
    let diff = g.grad.iter().zip(&gs.grad).map(|(a, b)| a - b).collect();
    Ok((diff, g, gs))
}

/// SVRG with exact snapshot gradients: each epoch computes `μ̃` at `θ̃`,
/// runs `inner` steps of `Π_C(θ − η(ψ(θ) − ψ(θ̃) + μ̃ + ∇g(θ)))` with shared
/// randomness in each pair, and sets `θ̃` to the average inner iterate.
pub fn svrg_run<T: SpectralTerm>(
    obj: &mut Objective<T>,
    theta0: &[f64],
    cfg: &SVRGConfig,
    mut callback: impl FnMut(&StepInfo),
) -> Result<RunOutput> {
    cfg.validate()?;
    let mut snapshot = check_start(obj, theta0)?;
    let seed = cfg.master_seed;
    let mut matvecs = obj.term.refresh(&snapshot, derive_seed(seed, &[TAG_REFRESH, 0]), false)?;
    let mut iter = 0usize;
    let total = cfg.epochs * cfg.inner;
    callback(&StepInfo {
        phase: Phase::Init,
        epoch: 0,
        iter: 0,
        theta: &snapshot,
        degree: None,
        grad_norm: None,
        matvecs,
        objective: maybe_eval(obj, cfg.eval, 0, false, &snapshot)?,
    });
    for s in 0..cfg.epochs {
        if s > 0 {
            matvecs += obj.term.refresh(&snapshot, derive_seed(seed, &[TAG_REFRESH, s as u64]), false)?;
        }
        let (mu, mv) = obj.term.exact_grad(&snapshot)?;
        matvecs += mv;
        check_finite(&mu, iter, "snapshot gradient")?;
        let mut theta = snapshot.clone();
        let mut avg = vec![0.0; theta.len()];
        for t in 0..cfg.inner {
            iter += 1;
            let plan = ProbePlan::new(derive_seed(seed, &[TAG_SVRG, s as u64, t as u64]), cfg.probes)?;
            let (diff, g, gs) = match control_variate(&obj.term, &theta, &snapshot, &plan) {
                Err(Error::SpectrumEscaped { .. }) => {
                    let retry = derive_seed(seed, &[TAG_RETRY, s as u64, t as u64]);
                    matvecs += obj.term.refresh(&theta, retry, true)?;
                    control_variate(&obj.term, &theta, &snapshot, &plan)?
                }
                other => other?,
            };
            matvecs += g.matvecs + gs.matvecs;
            let gg = obj.g_grad(&theta);
            let dir: Vec<f64> = diff
                .iter()
                .zip(&mu)
                .zip(&gg)
                .map(|((a, b), c)| a + b + c)
                .collect();
            check_finite(&dir, iter, "gradient")?;
            for (th, d) in theta.iter_mut().zip(&dir) {
                *th -= cfg.eta * d;
            }
            obj.projection.apply(&mut theta);
            check_finite(&theta, iter, "parameter")?;
            for (a, th) in avg.iter_mut().zip(&theta) {
                *a += th;
            }
            callback(&StepInfo {
                phase: Phase::SvrgInner,
                epoch: s,
                iter,
                theta: &theta,
                degree: Some(g.degree),
                grad_norm: Some(norm(&dir)),
                matvecs,
                objective: maybe_eval(obj, cfg.eval, iter, false, &theta)?,
            });
        }
        avg.iter_mut().for_each(|a| *a /= cfg.inner as f64);
        obj.projection.apply(&mut avg);
        snapshot = avg;
        callback(&StepInfo {
            phase: Phase::SvrgOuter,
            epoch: s,
            iter,
            theta: &snapshot,
            degree: None,
            grad_norm: None,
            matvecs,
            objective: maybe_eval(obj, cfg.eval, iter, iter == total, &snapshot)?,
        });
    }
    Ok(RunOutput {
        theta: snapshot,
        iterations: total,
        matvecs,
    })
}

/// Function, degree distribution and weight shared by the concrete terms.
#[derive(Debug, Clone)]
pub struct TermSpec {
    pub func: SpectralFunction,
    pub dist: DegreeDistribution,
    pub weight: f64,
    /// Degree and probe count of the logging estimator.
    pub eval_degree: usize,
    pub eval_probes: usize,
}

impl TermSpec {
    pub fn new(func: SpectralFunction, dist: DegreeDistribution) -> Self {
        TermSpec {
            func,
            dist,
            weight: 1.0,
            eval_degree: 50,
            eval_probes: 30,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    fn cache_degree(&self) -> usize {
        (4.0 * self.dist.mean()).ceil().max(64.0) as usize
    }
}

/// `A − floor·I`; positive semidefinite whenever `floor` lies below the
/// spectrum, so its dominant eigenvalue is `λ_max − floor`.
struct Shifted<'a, O: ?Sized> {
    op: &'a O,
    shift: f64,
}

impl<O: LinearOperator + ?Sized> LinearOperator for Shifted<'_, O> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi -= self.shift * xi;
        }
    }
}

/// `[floor, b]` with `b − floor` the power-method bound of `A − floor·I`.
pub fn interval_above(op: &impl LinearOperator, floor: f64, seed: u64) -> Result<Interval> {
    let width = power_method_bound(&Shifted { op, shift: floor }, POWER_ITERS, seed)?;
    let width = if width > 0.0 { width } else { floor.abs().max(1e-12) * 0.1 };
    Interval::new(floor, floor + width)
}

fn merged(old: Option<Interval>, new: Interval, widen: bool) -> Result<Interval> {
    match old {
        Some(o) if widen => Interval::new(o.a().min(new.a()), o.b().max(new.b())),
        _ => Ok(new),
    }
}

fn scaled(v: &[f64], w: f64) -> Vec<f64> {
    v.iter().map(|x| w * x).collect()
}

/// `w · tr f(A₀ + Σ θ_i B_i)` for a family whose spectrum stays above a
/// known `floor`.
#[derive(Debug, Clone)]
pub struct AffineTerm {
    family: AffineFamily,
    spec: TermSpec,
    floor: f64,
    approx: Option<ChebApprox>,
}

impl AffineTerm {
    pub fn new(family: AffineFamily, spec: TermSpec, floor: f64) -> Self {
        AffineTerm {
            family,
            spec,
            floor,
            approx: None,
        }
    }

    /// Current series; set by [`SpectralTerm::refresh`].
    pub fn approx(&self) -> Result<&ChebApprox> {
        self.approx
            .as_ref()
            .ok_or_else(|| Error::Precondition("interval not initialised; call refresh first".into()))
    }

    fn at(&self, theta: &[f64]) -> Result<AffineFamily> {
        Ok(self.family.at(theta).with_interval(self.approx()?.cached().interval()))
    }
}

impl SpectralTerm for AffineTerm {
    fn param_len(&self) -> usize {
        self.family.theta().len()
    }

    fn refresh(&mut self, theta: &[f64], seed: u64, widen: bool) -> Result<u64> {
        let fam = self.family.at(theta);
        let iv = interval_above(&AtTheta(&fam), self.floor, seed)?;
        let iv = merged(self.approx.as_ref().map(|a| a.cached().interval()), iv, widen)?;
        self.approx = Some(ChebApprox::new(self.spec.func.clone(), iv, self.spec.cache_degree())?);
        Ok(POWER_ITERS as u64)
    }

    fn grad_sample(&self, theta: &[f64], plan: &ProbePlan) -> Result<TermGrad> {
        let fam = self.at(theta)?;
        let g = grad_estimate_generic(&fam, self.approx()?, &self.spec.dist, plan)?;
        Ok(TermGrad {
            grad: scaled(g.value.as_slice(), self.spec.weight),
            degree: g.degree,
            matvecs: g.matvecs,
        })
    }

    fn exact_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, u64)> {
        let fam = self.family.at(theta);
        let g = exact_spectral_grad(&fam, &self.spec.func)?;
        Ok((scaled(&g, self.spec.weight), fam.matrix().nrows() as u64))
    }

    fn value_estimate(&self, theta: &[f64], seed: u64) -> Result<f64> {
        let fam = self.at(theta)?;
        let plan = ProbePlan::new(seed, self.spec.eval_probes)?;
        let e = estimate_spectral_sum_fixed(&AtTheta(&fam), self.approx()?, self.spec.eval_degree, &plan)?;
        Ok(self.spec.weight * e.value)
    }

    fn exact_value(&self, theta: &[f64]) -> Result<f64> {
        let a = DenseSymmetric::new(self.family.at(theta).matrix())?;
        Ok(self.spec.weight * exact_spectral_sum(&a, &self.spec.func)?)
    }
}

/// `w · tr f(θθᵀ + εI)` over a column-major `d×r` factor.
#[derive(Debug, Clone)]
pub struct LowRankTerm {
    rows: usize,
    rank: usize,
    epsilon: f64,
    spec: TermSpec,
    approx: Option<ChebApprox>,
}

impl LowRankTerm {
    pub fn new(rows: usize, rank: usize, epsilon: f64, spec: TermSpec) -> Result<Self> {
        if rows < 1 || rank < 1 {
            return Err(Error::Parameter("factor must have at least one row and column".into()));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(LowRankTerm {
            rows,
            rank,
            epsilon,
            spec,
            approx: None,
        })
    }

    pub fn spec(&self) -> &TermSpec {
        &self.spec
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn approx(&self) -> Result<&ChebApprox> {
        self.approx
            .as_ref()
            .ok_or_else(|| Error::Precondition("interval not initialised; call refresh first".into()))
    }

    pub fn factor(&self, theta: &[f64]) -> Result<LowRankPsd> {
        if theta.len() != self.rows * self.rank {
            return Err(Error::Dimension(format!(
                "parameter has length {}, expected {}",
                theta.len(),
                self.rows * self.rank
            )));
        }
        LowRankPsd::new(DMatrix::from_column_slice(self.rows, self.rank, theta), self.epsilon)
    }
}

impl SpectralTerm for LowRankTerm {
    fn param_len(&self) -> usize {
        self.rows * self.rank
    }

    fn refresh(&mut self, theta: &[f64], seed: u64, widen: bool) -> Result<u64> {
        let lr = self.factor(theta)?;
        let iv = interval_above(&lr, self.epsilon, seed)?;
        let iv = merged(self.approx.as_ref().map(|a| a.cached().interval()), iv, widen)?;
        self.approx = Some(ChebApprox::new(self.spec.func.clone(), iv, self.spec.cache_degree())?);
        Ok(POWER_ITERS as u64)
    }

    fn grad_sample(&self, theta: &[f64], plan: &ProbePlan) -> Result<TermGrad> {
        let lr = self.factor(theta)?;
        let g = grad_estimate_lowrank(&lr, self.approx()?, &self.spec.dist, plan)?;
        Ok(TermGrad {
            grad: scaled(g.value.as_slice(), self.spec.weight),
            degree: g.degree,
            matvecs: g.matvecs,
        })
    }

    fn exact_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, u64)> {
        let g = exact_spectral_grad_lowrank(&self.factor(theta)?, &self.spec.func)?;
        Ok((scaled(g.as_slice(), self.spec.weight), self.rows as u64))
    }

    fn value_estimate(&self, theta: &[f64], seed: u64) -> Result<f64> {
        let lr = self.factor(theta)?;
        let op = WithInterval::new(&lr, self.approx()?.cached().interval());
        let plan = ProbePlan::new(seed, self.spec.eval_probes)?;
        let e = estimate_spectral_sum_fixed(&op, self.approx()?, self.spec.eval_degree, &plan)?;
        Ok(self.spec.weight * e.value)
    }

    fn exact_value(&self, theta: &[f64]) -> Result<f64> {
        let a = DenseSymmetric::new(self.factor(theta)?.matrix())?;
        Ok(self.spec.weight * exact_spectral_sum(&a, &self.spec.func)?)
    }
}

/// A term that is identically zero, for pure-regularizer problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroTerm {
    pub len: usize,
}

impl SpectralTerm for ZeroTerm {
    fn param_len(&self) -> usize {
        self.len
    }

    fn refresh(&mut self, _theta: &[f64], _seed: u64, _widen: bool) -> Result<u64> {
        Ok(0)
    }

    fn grad_sample(&self, theta: &[f64], _plan: &ProbePlan) -> Result<TermGrad> {
        Ok(TermGrad {
            grad: vec![0.0; theta.len()],
            degree: 0,
            matvecs: 0,
        })
    }

    fn exact_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, u64)> {
        Ok((vec![0.0; theta.len()], 0))
    }

    fn value_estimate(&self, _theta: &[f64], _seed: u64) -> Result<f64> {
        Ok(0.0)
    }

    fn exact_value(&self, _theta: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}
