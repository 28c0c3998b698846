//! Smoothed nuclear-norm matrix completion
//! `min_{θ ∈ [0,5]^{d×r}} tr((θθᵀ + εI)^{1/2}) + λ Σ_{(i,j)∈Ω} (θ_{ij} − R_{ij})²`.
//!
//! The factor `θ` doubles as the completed rating matrix: its rows are users
//! and its columns items.

use nalgebra::DMatrix;
use rand::Rng;

use crate::chebyshev::Interval;
use crate::degree_dist::DegreeDistribution;
use crate::error::{Error, Result};
use crate::function::SpectralFunction;
use crate::grad_est::LowRankPsd;
use crate::optimize::{
    interval_above, sgd_run, svrg_run, LowRankTerm, Objective, Projection, RunOutput, SGDConfig, SVRGConfig, SpectralTerm,
    StepInfo, TermSpec,
};
use crate::reference::{exact_spectral_sum, DenseSymmetric};
use crate::rng::stream_rng;

use super::data::{Rating, RatingSet, RATING_MAX, RATING_MIN};

/// Box bounds on every entry of `θ`.
pub const BOX_LO: f64 = 0.0;
pub const BOX_HI: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionProblem {
    pub rows: usize,
    pub cols: usize,
    pub epsilon: f64,
    pub lambda: f64,
}

impl CompletionProblem {
    pub fn new(rows: usize, cols: usize, epsilon: f64, lambda: f64) -> Result<Self> {
        if rows < 1 || cols < 1 {
            return Err(Error::Parameter("completion needs at least one row and column".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be positive, got {lambda}")));
        }
        Ok(CompletionProblem {
            rows,
            cols,
            epsilon,
            lambda,
        })
    }

    /// Problem sized to a rating set with `ε = 10⁻²·(mean rating)²` unless
    /// given.
    pub fn for_ratings(set: &RatingSet, epsilon: Option<f64>, lambda: f64) -> Result<Self> {
        let eps = epsilon.unwrap_or_else(|| default_epsilon(set.mean_rating()));
        CompletionProblem::new(set.users, set.items, eps, lambda)
    }

    pub fn param_len(&self) -> usize {
        self.rows * self.cols
    }

    fn check_theta(&self, theta: &DMatrix<f64>) -> Result<()> {
        if theta.shape() != (self.rows, self.cols) {
            return Err(Error::Dimension(format!(
                "θ is {}×{}, expected {}×{}",
                theta.nrows(),
                theta.ncols(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    fn check_ratings<'a>(&self, ratings: impl IntoIterator<Item = &'a Rating>) -> Result<()> {
        for r in ratings {
            if r.user >= self.rows || r.item >= self.cols {
                return Err(Error::Dimension(format!(
                    "rating ({}, {}) outside the {}×{} factor",
                    r.user, r.item, self.rows, self.cols
                )));
            }
        }
        Ok(())
    }
}

/// `mean²`, floored at `10⁻⁶`.
pub fn default_epsilon(mean_rating: f64) -> f64 {
    (mean_rating * mean_rating).max(1e-6)
}

/// Column-major flat index of `(i, j)`.
fn flat(rows: usize, r: &Rating) -> usize {
    r.user + r.item * rows
}

/// `λ Σ (θ_{ij} − R_{ij})²` over `ratings`.
pub fn data_term(problem: &CompletionProblem, theta: &[f64], ratings: &[Rating]) -> f64 {
    problem.lambda
        * ratings
            .iter()
            .map(|r| (theta[flat(problem.rows, r)] - r.value).powi(2))
            .sum::<f64>()
}

/// `2λ(θ_{ij} − R_{ij})` on observed entries, zero elsewhere.
pub fn data_term_grad(problem: &CompletionProblem, theta: &[f64], ratings: &[Rating]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for r in ratings {
        let k = flat(problem.rows, r);
        g[k] += 2.0 * problem.lambda * (theta[k] - r.value);
    }
    g
}

/// Exact objective with the dense oracle for the spectral term.
pub fn completion_objective(problem: &CompletionProblem, theta: &DMatrix<f64>, ratings: &[Rating]) -> Result<f64> {
    problem.check_theta(theta)?;
    problem.check_ratings(ratings)?;
    let a = theta * theta.transpose() + DMatrix::identity(problem.rows, problem.rows) * problem.epsilon;
    let spectral = exact_spectral_sum(&DenseSymmetric::new(a)?, &SpectralFunction::Sqrt)?;
    Ok(spectral + data_term(problem, theta.as_slice(), ratings))
}

/// Objective over the training ratings with the amortized low-rank term.
pub fn completion_objective_fn(
    problem: &CompletionProblem,
    train: Vec<Rating>,
    dist: DegreeDistribution,
) -> Result<Objective<LowRankTerm>> {
    problem.check_ratings(&train)?;
    let spec = TermSpec::new(SpectralFunction::Sqrt, dist);
    let term = LowRankTerm::new(problem.rows, problem.cols, problem.epsilon, spec)?;
    let p = *problem;
    let (tv, tg) = (train.clone(), train);
    Ok(Objective::new(term, Projection::new_box(BOX_LO, BOX_HI)?)
        .with_regularizer(move |t| data_term(&p, t, &tv), move |t| data_term_grad(&p, t, &tg)))
}

/// Spectrum interval `[ε, b]` of `θθᵀ + εI` at `theta`.
pub fn completion_interval(problem: &CompletionProblem, theta: &DMatrix<f64>, seed: u64) -> Result<Interval> {
    problem.check_theta(theta)?;
    let lr = LowRankPsd::new(theta.clone(), problem.epsilon)?;
    interval_above(&lr, problem.epsilon, seed)
}

/// Decay rate of the square-root series on the interval at `theta`.
pub fn completion_auto_rho(problem: &CompletionProblem, theta: &DMatrix<f64>, seed: u64) -> Result<f64> {
    SpectralFunction::Sqrt.auto_rho(completion_interval(problem, theta, seed)?)
}

/// Best rank-`k` approximation by truncated SVD.
pub fn truncated_svd(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let k = k.min(svd.singular_values.len());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..k {
        out += u.column(i) * vt.row(i) * svd.singular_values[i];
    }
    out
}

/// RMSE of predictions clamped to the rating range.
pub fn rmse<'a>(pred: &DMatrix<f64>, ratings: impl IntoIterator<Item = &'a Rating>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for r in ratings {
        let p = pred[(r.user, r.item)].clamp(RATING_MIN, RATING_MAX);
        s += (p - r.value).powi(2);
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    (s / n as f64).sqrt()
}

/// Uniform initial factor in the box.
pub fn initial_factor(problem: &CompletionProblem, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, 0);
    DMatrix::from_fn(problem.rows, problem.cols, |_, _| BOX_LO + (BOX_HI - BOX_LO) * rng.random::<f64>())
}

/// SGD or SVRG settings for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SGDConfig),
    Svrg(SVRGConfig),
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd(_) => "sgd",
            OptimizerConfig::Svrg(_) => "svrg",
        }
    }
}

pub(crate) fn run_optimizer<T: SpectralTerm>(
    obj: &mut Objective<T>,
    theta0: &[f64],
    opt: &OptimizerConfig,
    callback: impl FnMut(&StepInfo),
) -> Result<RunOutput> {
    match opt {
        OptimizerConfig::Sgd(c) => sgd_run(obj, theta0, c, callback),
        OptimizerConfig::Svrg(c) => svrg_run(obj, theta0, c, callback),
    }
}

/// Outcome of [`completion_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub theta: DMatrix<f64>,
    /// Rank-`svd_rank` truncation of `theta` used for evaluation.
    pub completed: DMatrix<f64>,
    pub initial_test_rmse: f64,
    pub test_rmse: f64,
    pub train_rmse: f64,
    /// Exact objective on the training ratings at `theta`.
    pub objective: f64,
    pub matvecs: u64,
}

/// Evaluation shared by the training driver and its callers.
#[derive(Debug, Clone)]
pub struct CompletionEval {
    pub problem: CompletionProblem,
    pub train: Vec<Rating>,
    pub test: Vec<Rating>,
    pub svd_rank: usize,
}

impl CompletionEval {
    pub fn new(problem: CompletionProblem, set: &RatingSet, svd_rank: usize) -> Self {
        CompletionEval {
            problem,
            train: set.train_ratings().copied().collect(),
            test: set.test_ratings().copied().collect(),
            svd_rank,
        }
    }

    pub fn matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.problem.rows, self.problem.cols, theta)
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        completion_objective(&self.problem, &self.matrix(theta), &self.train)
    }

    pub fn test_rmse(&self, theta: &[f64]) -> f64 {
        rmse(&truncated_svd(&self.matrix(theta), self.svd_rank), &self.test)
    }
}

/// Trains from `theta0` on the training split, then evaluates the truncated
/// SVD of the final factor on the test split.
pub fn completion_train(
    eval: &CompletionEval,
    dist: DegreeDistribution,
    opt: &OptimizerConfig,
    theta0: &DMatrix<f64>,
    callback: impl FnMut(&StepInfo),
) -> Result<CompletionResult> {
    eval.problem.check_theta(theta0)?;
    let mut obj = completion_objective_fn(&eval.problem, eval.train.clone(), dist)?;
    let out = run_optimizer(&mut obj, theta0.as_slice(), opt, callback)?;
    let theta = eval.matrix(&out.theta);
    let completed = truncated_svd(&theta, eval.svd_rank);
    Ok(CompletionResult {
        initial_test_rmse: eval.test_rmse(theta0.as_slice()),
        test_rmse: rmse(&completed, &eval.test),
        train_rmse: rmse(&completed, &eval.train),
        objective: eval.objective(&out.theta)?,
        completed,
        theta,
        matvecs: out.matvecs,
    })
}

/// Projected gradient descent with exact gradients; the oracle run that
/// stochastic training is compared against.
pub fn completion_gd_oracle(
    eval: &CompletionEval,
    theta0: &DMatrix<f64>,
    iterations: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    eval.problem.check_theta(theta0)?;
    let obj = completion_objective_fn(&eval.problem, eval.train.clone(), crate::degree_dist::deterministic(1))?;
    let mut theta = theta0.as_slice().to_vec();
    for it in 1..=iterations {
        let (g, _) = obj.term.exact_grad(&theta)?;
        let gg = obj.g_grad(&theta);
        for ((t, a), b) in theta.iter_mut().zip(&g).zip(&gg) {
            *t -= step * (a + b);
        }
        obj.projection.apply(&mut theta);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                what: "parameter".into(),
            });
        }
    }
    Ok(eval.matrix(&theta))
}
