//! Unbiased stochastic gradients of spectral sums `tr f(A(θ))`.
//!
//! Two estimators share the probe plan and degree of [`crate::probes`]:
//! a generic one that differentiates the Chebyshev recurrence through
//! `∂A/∂θ_i`, and an amortized one for `A = θθᵀ + εI` that never forms a
//! `d×d` matrix.

use nalgebra::DMatrix;

use crate::chebyshev::{CoefficientSource, Interval};
use crate::degree_dist::{reweight, DegreeDistribution};
use crate::error::{Error, Result};
use crate::probes::{
    apply_shifted, check_vector, dot, map_probes, norm_sq, LinearOperator, MatrixOracle, ProbePlan,
};

/// A symmetric matrix family `A(θ)` evaluated at a fixed `θ`.
pub trait ParamMatrixOracle: Sync {
    fn dim(&self) -> usize;

    fn param_dim(&self) -> usize;

    /// `y ← A(θ) x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// `y ← (∂A/∂θ_i) x`.
    fn apply_partial(&self, i: usize, x: &[f64], y: &mut [f64]);

    /// Interval containing the spectrum of `A(θ)`.
    fn eig_interval(&self) -> Interval;
}

/// Views a parametric family as a plain operator at its current `θ`.
pub struct AtTheta<'a, P: ?Sized>(pub &'a P);

impl<P: ParamMatrixOracle + ?Sized> LinearOperator for AtTheta<'_, P> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.apply(x, y)
    }
}

impl<P: ParamMatrixOracle + ?Sized> MatrixOracle for AtTheta<'_, P> {
    fn eig_interval(&self) -> Interval {
        self.0.eig_interval()
    }
}

/// Dense affine family `A(θ) = A₀ + Σ θ_i B_i`.
#[derive(Debug, Clone)]
pub struct AffineFamily {
    base: DMatrix<f64>,
    dirs: Vec<DMatrix<f64>>,
    theta: Vec<f64>,
    interval: Interval,
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

impl AffineFamily {
    pub fn new(base: DMatrix<f64>, dirs: Vec<DMatrix<f64>>, theta: Vec<f64>, interval: Interval) -> Result<Self> {
        let d = base.nrows();
        if base.ncols() != d || dirs.iter().any(|b| b.shape() != (d, d)) {
            return Err(Error::Dimension("affine family matrices must be square and equal-sized".into()));
        }
        if dirs.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "{} directions but {} parameters",
                dirs.len(),
                theta.len()
            )));
        }
        let scale = base.amax().max(1.0);
        if asymmetry(&base) > 1e-12 * scale || dirs.iter().any(|b| asymmetry(b) > 1e-12 * scale) {
            return Err(Error::Parameter("affine family matrices must be symmetric".into()));
        }
        Ok(AffineFamily {
            base,
            dirs,
            theta,
            interval,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// The same family at another parameter value.
    pub fn at(&self, theta: &[f64]) -> Self {
        AffineFamily {
            theta: theta.to_vec(),
            ..self.clone()
        }
    }

    pub fn with_interval(&self, interval: Interval) -> Self {
        AffineFamily {
            interval,
            ..self.clone()
        }
    }

    /// Dense `A(θ)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.dirs
            .iter()
            .zip(&self.theta)
            .fold(self.base.clone(), |acc, (b, t)| acc + b * *t)
    }

    pub fn direction(&self, i: usize) -> &DMatrix<f64> {
        &self.dirs[i]
    }
}

impl ParamMatrixOracle for AffineFamily {
    fn dim(&self) -> usize {
        self.base.nrows()
    }

    fn param_dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.base.apply(x, y);
        let mut tmp = vec![0.0; x.len()];
        for (b, t) in self.dirs.iter().zip(&self.theta) {
            b.apply(x, &mut tmp);
            for (yi, ti) in y.iter_mut().zip(&tmp) {
                *yi += t * ti;
            }
        }
    }

    fn apply_partial(&self, i: usize, x: &[f64], y: &mut [f64]) {
        self.dirs[i].apply(x, y)
    }

    fn eig_interval(&self) -> Interval {
        self.interval
    }
}

/// `A = θθᵀ + εI` with `θ ∈ ℝ^{d×r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPsd {
    theta: DMatrix<f64>,
    epsilon: f64,
}

impl LowRankPsd {
    pub fn new(theta: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("factor contains non-finite entries".into()));
        }
        Ok(LowRankPsd { theta, epsilon })
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rows(&self) -> usize {
        self.theta.nrows()
    }

    pub fn rank(&self) -> usize {
        self.theta.ncols()
    }

    /// `θᵀx`.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rank())
            .map(|m| dot(self.theta.column(m).as_slice(), x))
            .collect()
    }

    /// Dense `θθᵀ + εI`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.theta * self.theta.transpose() + DMatrix::identity(self.rows(), self.rows()) * self.epsilon
    }

    /// The family over the column-major flattening of `θ`
    /// (parameter `l + m·d` is `θ_{l,m}`).
    pub fn flattened(&self, interval: Interval) -> FlatLowRank<'_> {
        FlatLowRank { lr: self, interval }
    }
}

impl LinearOperator for LowRankPsd {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let t = self.project(x);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = self.epsilon * xi;
        }
        for (m, tm) in t.iter().enumerate() {
            for (yi, c) in y.iter_mut().zip(self.theta.column(m).iter()) {
                *yi += c * tm;
            }
        }
    }
}

/// Generic-parameter view of [`LowRankPsd`]:
/// `∂A/∂θ_{l,m} x = e_l (θ_{:,m}ᵀx) + θ_{:,m} x_l`.
pub struct FlatLowRank<'a> {
    lr: &'a LowRankPsd,
    interval: Interval,
}

impl ParamMatrixOracle for FlatLowRank<'_> {
    fn dim(&self) -> usize {
        self.lr.rows()
    }

    fn param_dim(&self) -> usize {
        self.lr.rows() * self.lr.rank()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.lr.apply(x, y)
    }

    fn apply_partial(&self, i: usize, x: &[f64], y: &mut [f64]) {
        let d = self.lr.rows();
        let (l, m) = (i % d, i / d);
        let col = self.lr.theta.column(m);
        let xl = x[l];
        for (yi, c) in y.iter_mut().zip(col.iter()) {
            *yi = c * xl;
        }
        y[l] += dot(col.as_slice(), x);
    }

    fn eig_interval(&self) -> Interval {
        self.interval
    }
}

/// Gradient values: per-coordinate for generic families, `d×r` for the
/// low-rank family.
#[derive(Debug, Clone, PartialEq)]
pub enum GradValue {
    Vector(Vec<f64>),
    Matrix(DMatrix<f64>),
}

impl GradValue {
    /// Flat view (column-major for matrices).
    pub fn as_slice(&self) -> &[f64] {
        match self {
            GradValue::Vector(v) => v,
            GradValue::Matrix(m) => m.as_slice(),
        }
    }
}

/// One stochastic gradient with the randomness that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub value: GradValue,
    pub plan: ProbePlan,
    pub degree: usize,
    pub matvecs: u64,
}

/// Weight of term `i` in the halved-first-term sum `Σ′`.
pub fn prime_weight(i: usize) -> f64 {
    if i == 0 {
        1.0
    } else {
        2.0
    }
}

fn check_grad(value: &[f64], degree: usize) -> Result<()> {
    if let Some(i) = value.iter().position(|v| !v.is_finite()) {
        return Err(Error::ProbeNumeric {
            probe: 0,
            degree,
            msg: format!("gradient coordinate {i} is not finite"),
        });
    }
    Ok(())
}

fn draw_weighted(
    series: &impl CoefficientSource,
    dist: &DegreeDistribution,
    plan: &ProbePlan,
) -> Result<(ProbePlan, Vec<f64>)> {
    let mut plan = *plan;
    let n = plan.draw_degree(dist);
    let w = reweight(&series.coefficients(n)?, dist)?;
    Ok((plan, w.bhat))
}

/// Unbiased gradient of `tr f(A(θ))` by differentiating the recurrence.
pub fn grad_estimate_generic<P: ParamMatrixOracle + ?Sized>(
    pm: &P,
    series: &impl CoefficientSource,
    dist: &DegreeDistribution,
    plan: &ProbePlan,
) -> Result<GradSample> {
    let (plan, bhat) = draw_weighted(series, dist, plan)?;
    grad_generic_with_coefficients(pm, &bhat, &plan)
}

/// Gradient of `(1/M) Σ_k vₖᵀ Σ_j c_j T_j(Ã) vₖ` for explicit coefficients.
pub fn grad_generic_with_coefficients<P: ParamMatrixOracle + ?Sized>(
    pm: &P,
    coeffs: &[f64],
    plan: &ProbePlan,
) -> Result<GradSample> {
    let n = coeffs.len() - 1;
    let d = pm.dim();
    let p = pm.param_dim();
    let iv = pm.eig_interval();
    let s = iv.scale();
    let op = AtTheta(pm);
    let per_probe = map_probes(plan.probes(), |k| {
        let v = plan.probe(k, d);
        let vv = norm_sq(&v);
        let mut g = vec![0.0; p];
        let mut mv = 0u64;
        if n == 0 {
            return Ok((g, mv));
        }
        let mut w_prev = v.clone();
        let mut w_cur = vec![0.0; d];
        apply_shifted(&op, iv, &v, &mut w_cur);
        mv += 1;
        check_vector(&w_cur, vv, k, 1)?;
        let mut dw_prev = vec![vec![0.0; d]; p];
        let mut dw_cur = vec![vec![0.0; d]; p];
        for (i, dw) in dw_cur.iter_mut().enumerate() {
            pm.apply_partial(i, &v, dw);
            dw.iter_mut().for_each(|x| *x *= s);
            g[i] += coeffs[1] * dot(&v, dw);
        }
        mv += p as u64;
        let mut tmp = vec![0.0; d];
        let mut next = vec![vec![0.0; d]; p];
        for (j, &c) in coeffs.iter().enumerate().skip(2) {
            for i in 0..p {
                pm.apply_partial(i, &w_cur, &mut tmp);
                apply_shifted(&op, iv, &dw_cur[i], &mut next[i]);
                for ((nx, t), prev) in next[i].iter_mut().zip(&tmp).zip(&dw_prev[i]) {
                    *nx = 2.0 * s * t + 2.0 * *nx - prev;
                }
                g[i] += c * dot(&v, &next[i]);
            }
            mv += 2 * p as u64;
            std::mem::swap(&mut dw_prev, &mut dw_cur);
            std::mem::swap(&mut dw_cur, &mut next);
            if j < n {
                apply_shifted(&op, iv, &w_cur, &mut tmp);
                mv += 1;
                for (t, prev) in tmp.iter_mut().zip(&w_prev) {
                    *t = 2.0 * *t - prev;
                }
                check_vector(&tmp, vv, k, j)?;
                std::mem::swap(&mut w_prev, &mut w_cur);
                std::mem::swap(&mut w_cur, &mut tmp);
            }
        }
        Ok((g, mv))
    })?;
    let m = plan.probes() as f64;
    let mut value = vec![0.0; p];
    let mut matvecs = 0;
    for (g, mv) in &per_probe {
        for (acc, x) in value.iter_mut().zip(g) {
            *acc += x;
        }
        matvecs += mv;
    }
    value.iter_mut().for_each(|x| *x /= m);
    check_grad(&value, n)?;
    Ok(GradSample {
        value: GradValue::Vector(value),
        plan: plan.with_degree(n),
        degree: n,
        matvecs,
    })
}

/// `w_j = T_j(Ã)v` and `y_j = U_j(Ã)v` for `j < count`, via
/// `y_0 = v`, `y_1 = 2w_1`, `y_{j+1} = 2w_{j+1} + y_{j−1}`.
pub(crate) fn chebyshev_vectors<O: LinearOperator + ?Sized>(
    op: &O,
    iv: Interval,
    v: &[f64],
    count: usize,
    probe: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, u64)> {
    let d = v.len();
    let vv = norm_sq(v);
    let mut w: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut y: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut mv = 0u64;
    for j in 0..count {
        let wj = match j {
            0 => v.to_vec(),
            1 => {
                let mut out = vec![0.0; d];
                apply_shifted(op, iv, v, &mut out);
                out
            }
            _ => {
                let mut out = vec![0.0; d];
                apply_shifted(op, iv, &w[j - 1], &mut out);
                for (o, p) in out.iter_mut().zip(&w[j - 2]) {
                    *o = 2.0 * *o - p;
                }
                out
            }
        };
        if j > 0 {
            mv += 1;
            check_vector(&wj, vv, probe, j)?;
        }
        let yj = match j {
            0 => v.to_vec(),
            1 => wj.iter().map(|x| 2.0 * x).collect(),
            _ => wj.iter().zip(&y[j - 2]).map(|(a, b)| 2.0 * a + b).collect(),
        };
        w.push(wj);
        y.push(yj);
    }
    Ok((w, y, mv))
}

/// Amortized unbiased gradient of `tr f(θθᵀ + εI)` with respect to `θ`.
pub fn grad_estimate_lowrank(
    lr: &LowRankPsd,
    series: &impl CoefficientSource,
    dist: &DegreeDistribution,
    plan: &ProbePlan,
) -> Result<GradSample> {
    let (plan, bhat) = draw_weighted(series, dist, plan)?;
    grad_lowrank_with_coefficients(lr, series.interval(), &bhat, &plan)
}

/// `(2/(b−a))·2·Σ′_{i<n} w_i (Σ_{j=i}^{n−1} c_{j+1} y_{j−i})ᵀ θ`, averaged
/// over probes.
pub fn grad_lowrank_with_coefficients(
    lr: &LowRankPsd,
    iv: Interval,
    coeffs: &[f64],
    plan: &ProbePlan,
) -> Result<GradSample> {
    let n = coeffs.len() - 1;
    let d = lr.rows();
    let r = lr.rank();
    let per_probe = map_probes(plan.probes(), |k| {
        let mut g = DMatrix::<f64>::zeros(d, r);
        if n == 0 {
            return Ok((g, 0));
        }
        let v = plan.probe(k, d);
        let (w, y, mv) = chebyshev_vectors(lr, iv, &v, n, k)?;
        let mut z = vec![0.0; d];
        for (i, wi) in w.iter().enumerate() {
            z.fill(0.0);
            for j in i..n {
                let c = coeffs[j + 1];
                for (zz, yy) in z.iter_mut().zip(&y[j - i]) {
                    *zz += c * yy;
                }
            }
            let zt = lr.project(&z);
            let pw = prime_weight(i);
            for (m, ztm) in zt.iter().enumerate() {
                let f = pw * ztm;
                for (gl, wl) in g.column_mut(m).iter_mut().zip(wi) {
                    *gl += f * wl;
                }
            }
        }
        Ok((g, mv))
    })?;
    let factor = 2.0 * iv.scale() / plan.probes() as f64;
    let mut value = DMatrix::<f64>::zeros(d, r);
    let mut matvecs = 0;
    for (g, mv) in &per_probe {
        value += g;
        matvecs += mv;
    }
    value *= factor;
    check_grad(value.as_slice(), n)?;
    Ok(GradSample {
        value: GradValue::Matrix(value),
        plan: plan.with_degree(n),
        degree: n,
        matvecs,
    })
}

/// Checks `y_j = U_j(Ã)v` (dense eigenbasis evaluation) and
/// `2w_j = y_j − y_{j−2}` for `j < n`, to 1e-9 relative to `(j+1)‖v‖`.
pub fn second_kind_vector_identity_check<O: MatrixOracle + ?Sized>(a: &O, v: &[f64], n: usize) -> bool {
    if n > 64 {
        return false;
    }
    let iv = a.eig_interval();
    let Ok((w, y, _)) = chebyshev_vectors(a, iv, v, n + 1, 0) else {
        return false;
    };
    let dense = crate::reference::materialize(a);
    let unit = (dense.clone() * iv.scale()) - DMatrix::identity(v.len(), v.len()) * iv.shift();
    let Ok(sym) = crate::reference::DenseSymmetric::new(unit) else {
        return false;
    };
    let vnorm = norm_sq(v).sqrt();
    let vv = nalgebra::DVector::from_column_slice(v);
    for j in 0..=n {
        let Ok(u) = crate::reference::chebyshev_u_matrix(&sym, j) else {
            return false;
        };
        let expect = &u * &vv;
        let tol = 1e-9 * (j as f64 + 1.0) * vnorm;
        if y[j].iter().zip(expect.iter()).any(|(a, b)| (a - b).abs() > tol) {
            return false;
        }
        if j >= 2 && w[j].iter().zip(&y[j]).zip(&y[j - 2]).any(|((wj, yj), yp)| (2.0 * wj - (yj - yp)).abs() > tol) {
            return false;
        }
    }
    true
}
