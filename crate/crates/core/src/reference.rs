//! Dense brute-force oracles.
//!
//! Everything here works on explicit matrices through an eigendecomposition
//! or a Cholesky factorization and shares no code with the recurrences used
//! by the estimators.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::function::SpectralFunction;
use crate::grad_est::{LowRankPsd, ParamMatrixOracle};
use crate::probes::LinearOperator;

/// Largest dimension accepted by the dense oracles.
pub const MAX_DENSE_DIM: usize = 512;

/// A dense symmetric matrix of dimension at most [`MAX_DENSE_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSymmetric {
    m: DMatrix<f64>,
}

impl DenseSymmetric {
    /// Invariant: `|A − Aᵀ| ≤ 1e-12 · max(1, max |A_ij|)` entrywise.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!("matrix is {}×{}, not square", m.nrows(), m.ncols())));
        }
        if m.nrows() > MAX_DENSE_DIM {
            return Err(Error::Parameter(format!(
                "dense oracles accept d ≤ {MAX_DENSE_DIM}, got {}",
                m.nrows()
            )));
        }
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * m.amax().max(1.0) {
            return Err(Error::Parameter(format!("matrix is not symmetric (max |A − Aᵀ| = {asym:e})")));
        }
        Ok(DenseSymmetric { m })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn eigen(&self) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
        SymmetricEigen::try_new(self.m.clone(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(self.eigen()?.eigenvalues.iter().copied().collect())
    }
}

impl LinearOperator for DenseSymmetric {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.m.apply(x, y)
    }
}

/// Dense matrix of a linear operator, column by column.
pub fn materialize<O: LinearOperator + ?Sized>(op: &O) -> DMatrix<f64> {
    let d = op.dim();
    let mut out = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

fn materialize_partial<P: ParamMatrixOracle + ?Sized>(pm: &P, i: usize) -> DMatrix<f64> {
    let d = pm.dim();
    let mut out = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        pm.apply_partial(i, &e, &mut col);
        out.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    out
}

/// `V diag(g(λ)) Vᵀ`.
pub fn matrix_function(a: &DenseSymmetric, g: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = a.eigen()?;
    let vals = eig.eigenvalues.map(g);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// `Σ f(λ_i)` over the eigenvalues of `a`.
pub fn exact_spectral_sum(a: &DenseSymmetric, f: &SpectralFunction) -> Result<f64> {
    exact_spectral_sum_with(a, |x| f.value(x))
}

pub fn exact_spectral_sum_with(a: &DenseSymmetric, f: impl Fn(f64) -> f64) -> Result<f64> {
    let vals = a.eigenvalues()?;
    let s: f64 = vals.iter().map(|&l| f(l)).sum();
    if !s.is_finite() {
        return Err(Error::Domain("f is not finite on the spectrum".into()));
    }
    Ok(s)
}

/// `tr(f′(A) ∂A/∂θ_i)` for every coordinate.
pub fn exact_spectral_grad<P: ParamMatrixOracle + ?Sized>(pm: &P, f: &SpectralFunction) -> Result<Vec<f64>> {
    let a = DenseSymmetric::new(materialize(&crate::grad_est::AtTheta(pm)))?;
    let fp = matrix_function(&a, |x| f.derivative(x))?;
    Ok((0..pm.param_dim())
        .map(|i| fp.component_mul(&materialize_partial(pm, i)).sum())
        .collect())
}

/// `2 f′(θθᵀ + εI) θ`.
pub fn exact_spectral_grad_lowrank(lr: &LowRankPsd, f: &SpectralFunction) -> Result<DMatrix<f64>> {
    let a = DenseSymmetric::new(lr.matrix())?;
    let fp = matrix_function(&a, |x| f.derivative(x))?;
    Ok(fp * lr.theta() * 2.0)
}

/// `log det` from the Cholesky diagonal.
pub fn cholesky_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

fn check_unit_spectrum(vals: &[f64], what: &str) -> Result<()> {
    if let Some(l) = vals.iter().find(|l| l.abs() > 1.0 + 1e-12) {
        return Err(Error::Precondition(format!("{what} has eigenvalue {l} outside [-1, 1]")));
    }
    Ok(())
}

fn eigen_polynomial(a: &DenseSymmetric, g: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let vals = a.eigenvalues()?;
    check_unit_spectrum(&vals, "matrix")?;
    matrix_function(a, |x| g(x.clamp(-1.0, 1.0)))
}

/// `T_i(A) = V cos(i·arccos Λ) Vᵀ`; the spectrum must lie in `[-1, 1]`.
pub fn chebyshev_t_matrix(a: &DenseSymmetric, i: usize) -> Result<DMatrix<f64>> {
    eigen_polynomial(a, |x| (i as f64 * x.acos()).cos())
}

/// `U_i(A) = V sin((i+1)θ)/sin θ Vᵀ` with `θ = arccos Λ` and the limits
/// `U_i(±1) = (±1)^i (i+1)`.
pub fn chebyshev_u_matrix(a: &DenseSymmetric, i: usize) -> Result<DMatrix<f64>> {
    eigen_polynomial(a, |x| {
        let th = x.acos();
        let s = th.sin();
        if s.abs() < 1e-12 {
            let sign = if x > 0.0 || i.is_multiple_of(2) { 1.0 } else { -1.0 };
            sign * (i + 1) as f64
        } else {
            ((i + 1) as f64 * th).sin() / s
        }
    })
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Checks `‖T_i(A+E) − T_i(A)‖ ≤ i²‖E‖` and
/// `‖U_i(A+E) − U_i(A)‖ ≤ i(i+1)(i+2)/3 · ‖E‖` for `i ≤ i_max`, in the
/// spectral and Frobenius norms.
pub fn chebyshev_perturbation_check(a: &DenseSymmetric, e: &DenseSymmetric, i_max: usize) -> Result<bool> {
    if i_max > 40 {
        return Err(Error::Precondition(format!("i_max = {i_max} exceeds 40")));
    }
    let ae = DenseSymmetric::new(a.matrix() + e.matrix())?;
    check_unit_spectrum(&a.eigenvalues()?, "A")?;
    check_unit_spectrum(&ae.eigenvalues()?, "A + E")?;
    let e2 = spectral_norm(e.matrix());
    let ef = e.matrix().norm();
    for i in 0..=i_max {
        let dt = chebyshev_t_matrix(&ae, i)? - chebyshev_t_matrix(a, i)?;
        let du = chebyshev_u_matrix(&ae, i)? - chebyshev_u_matrix(a, i)?;
        let ct = (i * i) as f64;
        let cu = (i * (i + 1) * (i + 2)) as f64 / 3.0;
        let slack = |bound: f64| bound * (1.0 + 1e-9) + 1e-10;
        if spectral_norm(&dt) > slack(ct * e2)
            || dt.norm() > slack(ct * ef)
            || spectral_norm(&du) > slack(cu * e2)
            || du.norm() > slack(cu * ef)
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks `tr(AB) ≤ ‖A‖_nuc ‖B‖₂` for symmetric `A`, `B`.
pub fn trace_nuclear_check(a: &DenseSymmetric, b: &DenseSymmetric) -> Result<bool> {
    let lhs = (a.matrix() * b.matrix()).trace();
    let nuc: f64 = a.eigenvalues()?.iter().map(|l| l.abs()).sum();
    let op = b.eigenvalues()?.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let rhs = nuc * op;
    Ok(lhs <= rhs + 1e-10 * rhs.abs().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_sym(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        (&b + b.transpose()) * 0.5
    }

    /// Rescales a symmetric matrix so its spectrum fits inside `[-r, r]`.
    fn squeeze(m: DMatrix<f64>, r: f64) -> DMatrix<f64> {
        let n = spectral_norm(&m).max(1e-300);
        m * (r / n)
    }

    #[test]
    fn spectral_sum_examples() {
        let i3 = DenseSymmetric::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(exact_spectral_sum(&i3, &SpectralFunction::Log).unwrap(), 0.0);
        let d = DenseSymmetric::new(DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0])).unwrap();
        assert!((exact_spectral_sum(&d, &SpectralFunction::Sqrt).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn logdet_matches_cholesky() {
        let mut rng = stream_rng(1, 0);
        let b = DMatrix::from_fn(50, 50, |_, _| rng.random::<f64>() - 0.5);
        let a = &b * b.transpose() + DMatrix::identity(50, 50) * 0.5;
        let a = (&a + a.transpose()) * 0.5;
        let eig = exact_spectral_sum(&DenseSymmetric::new(a.clone()).unwrap(), &SpectralFunction::Log).unwrap();
        assert!((eig - cholesky_logdet(&a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn asymmetric_and_oversized_inputs_are_rejected() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 1.0;
        assert!(DenseSymmetric::new(m).is_err());
        assert!(DenseSymmetric::new(DMatrix::identity(513, 513)).is_err());
    }

    #[test]
    fn zero_perturbation_gives_zero_difference() {
        let mut rng = stream_rng(2, 0);
        let a = DenseSymmetric::new(squeeze(random_sym(6, &mut rng), 0.9)).unwrap();
        for i in 0..10 {
            let t = chebyshev_t_matrix(&a, i).unwrap();
            assert_eq!((&t - &t).amax(), 0.0);
        }
        let z = DenseSymmetric::new(DMatrix::zeros(6, 6)).unwrap();
        assert!(chebyshev_perturbation_check(&a, &z, 20).unwrap());
    }

    #[test]
    fn first_kind_degree_one_is_tight() {
        let mut rng = stream_rng(3, 0);
        let a = DenseSymmetric::new(squeeze(random_sym(5, &mut rng), 0.5)).unwrap();
        let e = DenseSymmetric::new(squeeze(random_sym(5, &mut rng), 0.2)).unwrap();
        let ae = DenseSymmetric::new(a.matrix() + e.matrix()).unwrap();
        let diff = chebyshev_t_matrix(&ae, 1).unwrap() - chebyshev_t_matrix(&a, 1).unwrap();
        assert!((spectral_norm(&diff) - spectral_norm(e.matrix())).abs() < 1e-12);
    }

    #[test]
    fn perturbation_bounds_hold_on_random_pairs() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..20 {
            let a = squeeze(random_sym(10, &mut rng), 0.8);
            let e = squeeze(random_sym(10, &mut rng), 0.15 * rng.random::<f64>());
            let a = DenseSymmetric::new(a).unwrap();
            let e = DenseSymmetric::new(e).unwrap();
            assert!(chebyshev_perturbation_check(&a, &e, 40).unwrap());
        }
    }

    #[test]
    fn perturbation_precondition_is_enforced() {
        let a = DenseSymmetric::new(DMatrix::identity(3, 3) * 0.9).unwrap();
        let e = DenseSymmetric::new(DMatrix::identity(3, 3) * 0.2).unwrap();
        assert!(matches!(chebyshev_perturbation_check(&a, &e, 3), Err(Error::Precondition(_))));
    }

    #[test]
    fn second_kind_limits_at_endpoints() {
        let a = DenseSymmetric::new(DMatrix::from_diagonal(&nalgebra::dvector![1.0, -1.0, 0.3])).unwrap();
        let u = chebyshev_u_matrix(&a, 5).unwrap();
        assert!((u[(0, 0)] - 6.0).abs() < 1e-12);
        assert!((u[(1, 1)] + 6.0).abs() < 1e-12);
        assert!((u[(2, 2)] - crate::chebyshev::eval_u(5, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn trace_nuclear_examples() {
        let i3 = DenseSymmetric::new(DMatrix::identity(3, 3)).unwrap();
        assert!(trace_nuclear_check(&i3, &i3).unwrap());
        let mut rng = stream_rng(5, 0);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>());
        let psd = DenseSymmetric::new(&b * b.transpose()).unwrap();
        let i4 = DenseSymmetric::new(DMatrix::identity(4, 4)).unwrap();
        let nuc: f64 = psd.eigenvalues().unwrap().iter().map(|l| l.abs()).sum();
        assert!((psd.matrix().trace() - nuc).abs() < 1e-12);
        assert!(trace_nuclear_check(&psd, &i4).unwrap());
        for _ in 0..500 {
            let a = DenseSymmetric::new(random_sym(12, &mut rng)).unwrap();
            let b = DenseSymmetric::new(random_sym(12, &mut rng)).unwrap();
            assert!(trace_nuclear_check(&a, &b).unwrap());
        }
    }

    #[test]
    fn lowrank_oracle_equals_generic_oracle() {
        let mut rng = stream_rng(6, 0);
        let theta = DMatrix::from_fn(7, 3, |_, _| rng.random::<f64>());
        let lr = LowRankPsd::new(theta, 0.3).unwrap();
        let iv = crate::chebyshev::Interval::new(0.3, 50.0).unwrap();
        let g = exact_spectral_grad(&lr.flattened(iv), &SpectralFunction::Sqrt).unwrap();
        let m = exact_spectral_grad_lowrank(&lr, &SpectralFunction::Sqrt).unwrap();
        for (a, b) in g.iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lowrank_gradient_matches_finite_differences() {
        let mut rng = stream_rng(7, 0);
        let theta = DMatrix::from_fn(6, 2, |_, _| rng.random::<f64>());
        let lr = LowRankPsd::new(theta.clone(), 0.2).unwrap();
        let g = exact_spectral_grad_lowrank(&lr, &SpectralFunction::Sqrt).unwrap();
        let h = 1e-5;
        for i in 0..12 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp.as_mut_slice()[i] += h;
            tm.as_mut_slice()[i] -= h;
            let f = |t: DMatrix<f64>| {
                let m = LowRankPsd::new(t, 0.2).unwrap().matrix();
                exact_spectral_sum(&DenseSymmetric::new(m).unwrap(), &SpectralFunction::Sqrt).unwrap()
            };
            let fd = (f(tp) - f(tm)) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-6 * g.as_slice()[i].abs().max(1.0));
        }
    }
}
