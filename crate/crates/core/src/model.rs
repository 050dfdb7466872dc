//! Mechanical systems subject to unilateral constraints.
//!
//! A system is described by its mass matrix `M(q)`, effort map `f(q, q̇)`,
//! constraint function `a(q) ≥ 0` (with first and second derivatives) and a
//! restitution coefficient `γ(q, q̇)`. Within contact mode `J` the dynamics are
//!
//! ```text
//! M(q) q̈ = f(q, q̇) + c(q, q̇) q̇ + Da_J(q)ᵀ λ_J(q, q̇)
//! q̇⁺     = Δ_J(q, q̇⁻) q̇⁻
//! ```
//!
//! and this module supplies the kernels for every term.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numdiff;
use crate::scalar::Real;

/// Set of active constraint indices (0-based), stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ActiveSet(u64);

impl ActiveSet {
    pub const MAX_CONSTRAINTS: usize = 64;

    pub const fn empty() -> Self {
        ActiveSet(0)
    }

    pub const fn from_bits(bits: u64) -> Self {
        ActiveSet(bits)
    }

    pub fn single(i: usize) -> Self {
        assert!(i < Self::MAX_CONSTRAINTS, "constraint index {i} out of range");
        ActiveSet(1 << i)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        it.into_iter().fold(Self::empty(), |s, i| s.with(i))
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < Self::MAX_CONSTRAINTS && self.0 & (1 << i) != 0
    }

    #[must_use]
    pub fn with(self, i: usize) -> Self {
        self.union(Self::single(i))
    }

    #[must_use]
    pub fn without(self, i: usize) -> Self {
        self.difference(Self::single(i))
    }

    #[must_use]
    pub const fn union(self, o: Self) -> Self {
        ActiveSet(self.0 | o.0)
    }

    #[must_use]
    pub const fn intersection(self, o: Self) -> Self {
        ActiveSet(self.0 & o.0)
    }

    #[must_use]
    pub const fn difference(self, o: Self) -> Self {
        ActiveSet(self.0 & !o.0)
    }

    pub const fn is_subset(self, o: Self) -> bool {
        self.0 & !o.0 == 0
    }

    pub const fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Indices in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..Self::MAX_CONSTRAINTS).filter(move |&i| self.contains(i))
    }

    pub fn to_vec(self) -> Vec<usize> {
        self.iter().collect()
    }
}

impl fmt::Debug for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (k, i) in self.iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        f.write_str("}")
    }
}

impl FromIterator<usize> for ActiveSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::from_indices(iter)
    }
}

/// Numerical tolerances shared by the model kernels, the simulator and the
/// sensitivity code.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances<T> {
    /// Constraint surface membership `|a_i(q)|`.
    pub cons: T,
    /// Orthogonality `|⟨Da_i, Da_j⟩_{M⁻¹}|`.
    pub orth: T,
    /// Transversality margin for the admissibility sign tests.
    pub graze: T,
    /// Contact forces below `-force` are treated as pulling.
    pub force: T,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        Tolerances {
            cons: T::lit(1e-9),
            orth: T::lit(1e-8),
            graze: T::lit(1e-8),
            force: T::lit(1e-9),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("constraint normals for mode {mode} are linearly dependent")]
    ConstraintDependence { mode: ActiveSet },
    #[error("mass matrix is not symmetric positive-definite: {0}")]
    MassNotSpd(String),
    #[error("negative restitution coefficient {0}")]
    NegativeRestitution(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Callable bundle defining a mechanical system on `Q = ℝ^d` with `n`
/// unilateral constraints.
///
/// `mass_jac` and `effort_jac` default to central differences; the remaining
/// maps must be supplied.
pub trait MechSystem<T: Real>: Send + Sync {
    fn dof(&self) -> usize;

    fn n_constraints(&self) -> usize;

    fn mass(&self, q: &DVector<T>) -> DMatrix<T>;

    /// Partials of the mass matrix: entry `k` is `∂M/∂q_k`.
    fn mass_jac(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        let d = self.dof();
        let mut qp = q.clone();
        (0..d)
            .map(|k| {
                let h = numdiff::fd_step(q[k]);
                qp[k] = q[k] + h;
                let mp = self.mass(&qp);
                qp[k] = q[k] - h;
                let mm = self.mass(&qp);
                qp[k] = q[k];
                (mp - mm) / (h + h)
            })
            .collect()
    }

    fn effort(&self, q: &DVector<T>, qd: &DVector<T>) -> DVector<T>;

    /// `[∂f/∂q  ∂f/∂q̇]`, a `d × 2d` matrix.
    fn effort_jac(&self, q: &DVector<T>, qd: &DVector<T>) -> DMatrix<T> {
        let d = self.dof();
        let x = concat(q, qd);
        numdiff::jacobian(
            |x: &DVector<T>| self.effort(&x.rows(0, d).into_owned(), &x.rows(d, d).into_owned()),
            &x,
        )
    }

    fn constraints(&self, q: &DVector<T>) -> DVector<T>;

    /// `n × d` constraint Jacobian.
    fn constraint_jac(&self, q: &DVector<T>) -> DMatrix<T>;

    /// Entry `j` is the `d × d` Hessian of `a_j`.
    fn constraint_hess(&self, q: &DVector<T>) -> Vec<DMatrix<T>>;

    fn restitution(&self, q: &DVector<T>, qd: &DVector<T>) -> T;
}

impl<T: Real, S: MechSystem<T> + ?Sized> MechSystem<T> for &S {
    fn dof(&self) -> usize {
        (**self).dof()
    }
    fn n_constraints(&self) -> usize {
        (**self).n_constraints()
    }
    fn mass(&self, q: &DVector<T>) -> DMatrix<T> {
        (**self).mass(q)
    }
    fn mass_jac(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        (**self).mass_jac(q)
    }
    fn effort(&self, q: &DVector<T>, qd: &DVector<T>) -> DVector<T> {
        (**self).effort(q, qd)
    }
    fn effort_jac(&self, q: &DVector<T>, qd: &DVector<T>) -> DMatrix<T> {
        (**self).effort_jac(q, qd)
    }
    fn constraints(&self, q: &DVector<T>) -> DVector<T> {
        (**self).constraints(q)
    }
    fn constraint_jac(&self, q: &DVector<T>) -> DMatrix<T> {
        (**self).constraint_jac(q)
    }
    fn constraint_hess(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        (**self).constraint_hess(q)
    }
    fn restitution(&self, q: &DVector<T>, qd: &DVector<T>) -> T {
        (**self).restitution(q, qd)
    }
}

/// A mechanical system whose effort and restitution accept a constant input
/// parameter `u ∈ ℝ^m`.
pub trait ControlledSystem<T: Real>: Send + Sync {
    fn n_inputs(&self) -> usize;

    /// The autonomous system obtained by freezing the input at `u`.
    fn with_input<'a>(&'a self, u: &DVector<T>) -> Box<dyn MechSystem<T> + 'a>;
}

/// Views an autonomous system as a controlled one with no inputs.
pub struct Autonomous<'a, T: Real>(pub &'a dyn MechSystem<T>);

impl<T: Real> ControlledSystem<T> for Autonomous<'_, T> {
    fn n_inputs(&self) -> usize {
        0
    }

    fn with_input<'a>(&'a self, _u: &DVector<T>) -> Box<dyn MechSystem<T> + 'a> {
        Box::new(self.0)
    }
}

/// State `(t, q, q̇)` in contact mode `mode`.
#[derive(Clone, Debug, PartialEq)]
pub struct State<T: Real> {
    pub t: T,
    pub q: DVector<T>,
    pub qd: DVector<T>,
    pub mode: ActiveSet,
}

impl<T: Real> State<T> {
    pub fn new(t: T, q: DVector<T>, qd: DVector<T>, mode: ActiveSet) -> Self {
        State { t, q, qd, mode }
    }

    pub fn from_slices(t: T, q: &[T], qd: &[T], mode: ActiveSet) -> Self {
        State::new(t, DVector::from_column_slice(q), DVector::from_column_slice(qd), mode)
    }

    /// Builds a state from the stacked vector `x = (q, q̇)`.
    pub fn from_x(t: T, x: &DVector<T>, mode: ActiveSet) -> Self {
        let d = x.len() / 2;
        State::new(t, x.rows(0, d).into_owned(), x.rows(d, d).into_owned(), mode)
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// Stacked `(q, q̇)`.
    pub fn x(&self) -> DVector<T> {
        concat(&self.q, &self.qd)
    }

    /// Checks the contact-mode invariants: `a_J(q) = 0`, `a_i(q) > -tol` off
    /// `J`, and `Da_J(q) q̇ = 0`, all to `tol.cons`.
    pub fn check(&self, sys: &dyn MechSystem<T>, tol: &Tolerances<T>) -> Result<(), ModelError> {
        if self.q.len() != sys.dof() || self.qd.len() != sys.dof() {
            return Err(ModelError::Dimension(format!(
                "state has {} / {} coordinates, system has d = {}",
                self.q.len(),
                self.qd.len(),
                sys.dof()
            )));
        }
        let n = sys.n_constraints();
        if self.mode.iter().any(|i| i >= n) {
            return Err(ModelError::InvalidState(format!("mode {} references constraint >= {n}", self.mode)));
        }
        let a = sys.constraints(&self.q);
        let da = sys.constraint_jac(&self.q);
        for i in 0..n {
            if self.mode.contains(i) {
                if a[i].abs() > tol.cons {
                    return Err(ModelError::InvalidState(format!(
                        "a_{i}(q) = {:e} but constraint {i} is active",
                        a[i]
                    )));
                }
                let v = da.row(i).dot(&self.qd.transpose());
                if v.abs() > tol.cons {
                    return Err(ModelError::InvalidState(format!(
                        "active constraint {i} has normal velocity {v:e}"
                    )));
                }
            } else if a[i] < -tol.cons {
                return Err(ModelError::InvalidState(format!("a_{i}(q) = {:e} violates the constraint", a[i])));
            }
        }
        Ok(())
    }
}

pub(crate) fn concat<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let mut x = DVector::zeros(a.len() + b.len());
    x.rows_mut(0, a.len()).copy_from(a);
    x.rows_mut(a.len(), b.len()).copy_from(b);
    x
}

pub(crate) fn split<T: Real>(x: &DVector<T>) -> (DVector<T>, DVector<T>) {
    let d = x.len() / 2;
    (x.rows(0, d).into_owned(), x.rows(d, d).into_owned())
}

/// Rows of `m` indexed by `set`.
pub(crate) fn select_rows<T: Real>(m: &DMatrix<T>, set: ActiveSet) -> DMatrix<T> {
    let idx = set.to_vec();
    let mut out = DMatrix::zeros(idx.len(), m.ncols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from(&m.row(i));
    }
    out
}

fn ensure_finite_mat<T: Real>(m: &DMatrix<T>, what: &'static str) -> Result<(), ModelError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what))
    }
}

fn ensure_finite_vec<T: Real>(v: &DVector<T>, what: &'static str) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what))
    }
}

/// Cholesky factor of `M(q)`, checking symmetry to `1e-10` (relative).
pub fn mass_cholesky<T: Real>(sys: &dyn MechSystem<T>, q: &DVector<T>) -> Result<Cholesky<T, Dyn>, ModelError> {
    let m = sys.mass(q);
    let d = sys.dof();
    if m.nrows() != d || m.ncols() != d {
        return Err(ModelError::Dimension(format!("mass matrix is {}x{}, expected {d}x{d}", m.nrows(), m.ncols())));
    }
    ensure_finite_mat(&m, "mass")?;
    let scale = m.amax().max(T::one());
    let asym = (&m - m.transpose()).amax();
    if asym > T::lit(1e-10) * scale {
        return Err(ModelError::MassNotSpd(format!("asymmetry {asym:e}")));
    }
    Cholesky::new(m).ok_or_else(|| ModelError::MassNotSpd("not positive-definite".into()))
}

/// Coriolis matrix `c(q, q̇)`, the matrix multiplying `q̇` in the equations of
/// motion:
///
/// `c_{ℓm} = -½ Σ_k (D_k M_{ℓm} + D_m M_{ℓk} - D_ℓ M_{km}) q̇_k`.
pub fn coriolis<T: Real>(sys: &dyn MechSystem<T>, q: &DVector<T>, qd: &DVector<T>) -> Result<DMatrix<T>, ModelError> {
    let d = sys.dof();
    let dm = sys.mass_jac(q);
    if dm.len() != d {
        return Err(ModelError::Dimension(format!("mass_jac returned {} slices, expected {d}", dm.len())));
    }
    for s in &dm {
        ensure_finite_mat(s, "mass_jac")?;
    }
    let half = T::lit(0.5);
    let mut c = DMatrix::zeros(d, d);
    for l in 0..d {
        for m in 0..d {
            let mut acc = T::zero();
            for k in 0..d {
                acc += (dm[k][(l, m)] + dm[m][(l, k)] - dm[l][(k, m)]) * qd[k];
            }
            c[(l, m)] = -half * acc;
        }
    }
    Ok(c)
}

struct Gram<T: Real> {
    /// `Da_J`, `|J| × d`.
    da: DMatrix<T>,
    /// `M⁻¹ Da_Jᵀ`, `d × |J|`.
    minv_dat: DMatrix<T>,
    /// `Λ_J`.
    lambda: DMatrix<T>,
}

fn gram<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    chol: &Cholesky<T, Dyn>,
    mode: ActiveSet,
) -> Result<Gram<T>, ModelError> {
    let d = sys.dof();
    let n = sys.n_constraints();
    if mode.iter().any(|i| i >= n) {
        return Err(ModelError::Dimension(format!("mode {mode} references constraint >= {n}")));
    }
    if mode.is_empty() {
        return Ok(Gram { da: DMatrix::zeros(0, d), minv_dat: DMatrix::zeros(d, 0), lambda: DMatrix::zeros(0, 0) });
    }
    let full = sys.constraint_jac(q);
    if full.nrows() != n || full.ncols() != d {
        return Err(ModelError::Dimension(format!("constraint_jac is {}x{}, expected {n}x{d}", full.nrows(), full.ncols())));
    }
    ensure_finite_mat(&full, "constraint_jac")?;
    let da = select_rows(&full, mode);
    let minv_dat = chol.solve(&da.transpose());
    let g = &da * &minv_dat;
    let g = (&g + g.transpose()) * T::lit(0.5);
    // Reject numerically dependent normals: the smallest pivot of the Gram
    // factor must not vanish relative to its largest diagonal entry.
    let gmax = (0..g.nrows()).map(|i| g[(i, i)]).fold(T::zero(), |a, b| a.max(b));
    let gc = Cholesky::new(g).ok_or(ModelError::ConstraintDependence { mode })?;
    let l = gc.l_dirty();
    let pmin = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(T::max_value().unwrap(), |a, b| a.min(b));
    if pmin <= T::lit(1e3) * T::default_epsilon() * gmax {
        return Err(ModelError::ConstraintDependence { mode });
    }
    let lambda = gc.inverse();
    Ok(Gram { da, minv_dat, lambda })
}

/// `Λ_J(q) = (Da_J M⁻¹ Da_Jᵀ)⁻¹`; the empty matrix for `J = ∅`.
pub fn lambda_gram<T: Real>(sys: &dyn MechSystem<T>, q: &DVector<T>, mode: ActiveSet) -> Result<DMatrix<T>, ModelError> {
    let chol = mass_cholesky(sys, q)?;
    Ok(gram(sys, q, &chol, mode)?.lambda)
}

/// Restitution map: returns `(q̇⁺, Δ_J)` with
/// `Δ_J = I - (1 + γ(q, q̇⁻)) M⁻¹ Da_Jᵀ Λ_J Da_J` and `Δ_∅ = I`.
pub fn impact_map<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd_minus: &DVector<T>,
    mode: ActiveSet,
) -> Result<(DVector<T>, DMatrix<T>), ModelError> {
    let d = sys.dof();
    if mode.is_empty() {
        return Ok((qd_minus.clone(), DMatrix::identity(d, d)));
    }
    if mode.len() == d {
        log::debug!("impact in fully constrained mode {mode}: tangent space is trivial");
    }
    let gamma = sys.restitution(q, qd_minus);
    if !gamma.is_finite() {
        return Err(ModelError::NonFinite("restitution"));
    }
    if gamma < T::zero() {
        return Err(ModelError::NegativeRestitution(gamma.to_f64_lossy()));
    }
    let chol = mass_cholesky(sys, q)?;
    let gr = gram(sys, q, &chol, mode)?;
    let delta = DMatrix::identity(d, d) - (&gr.minv_dat * &gr.lambda * &gr.da) * (T::one() + gamma);
    let qd_plus = &delta * qd_minus;
    Ok((qd_plus, delta))
}

/// Quantities shared by [`contact_force`] and [`mode_accel`].
pub struct ModeDynamics<T: Real> {
    pub accel: DVector<T>,
    pub lambda: DVector<T>,
}

/// Acceleration and contact force in mode `J`.
///
/// `λ_J` is the unique force keeping `ä_J ≡ 0`:
/// `λ_J = -Λ_J [Da_J M⁻¹ (f + c q̇) + (q̇ᵀ D²a_j q̇)_{j∈J}]`.
pub fn mode_dynamics<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd: &DVector<T>,
    mode: ActiveSet,
) -> Result<ModeDynamics<T>, ModelError> {
    let d = sys.dof();
    if q.len() != d || qd.len() != d {
        return Err(ModelError::Dimension(format!("expected {d} coordinates")));
    }
    let chol = mass_cholesky(sys, q)?;
    let f = sys.effort(q, qd);
    ensure_finite_vec(&f, "effort")?;
    let c = coriolis(sys, q, qd)?;
    let rhs = f + c * qd;
    let free = chol.solve(&rhs);
    if mode.is_empty() {
        return Ok(ModeDynamics { accel: free, lambda: DVector::zeros(0) });
    }
    let gr = gram(sys, q, &chol, mode)?;
    let hess = sys.constraint_hess(q);
    let curv = DVector::from_iterator(
        mode.len(),
        mode.iter().map(|j| {
            let h = &hess[j];
            (qd.transpose() * h * qd)[(0, 0)]
        }),
    );
    ensure_finite_vec(&curv, "constraint_hess")?;
    let lambda = -(&gr.lambda * (&gr.da * &free + curv));
    let accel = free + &gr.minv_dat * &lambda;
    Ok(ModeDynamics { accel, lambda })
}

pub fn contact_force<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd: &DVector<T>,
    mode: ActiveSet,
) -> Result<DVector<T>, ModelError> {
    Ok(mode_dynamics(sys, q, qd, mode)?.lambda)
}

/// `q̈ = M⁻¹ (f + c q̇ + Da_Jᵀ λ_J)`.
pub fn mode_accel<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd: &DVector<T>,
    mode: ActiveSet,
) -> Result<DVector<T>, ModelError> {
    Ok(mode_dynamics(sys, q, qd, mode)?.accel)
}

/// First-order vector field `(q̇, q̈)` of mode `J` on the stacked state.
pub fn vector_field<T: Real>(sys: &dyn MechSystem<T>, x: &DVector<T>, mode: ActiveSet) -> Result<DVector<T>, ModelError> {
    let (q, qd) = split(x);
    let acc = mode_accel(sys, &q, &qd, mode)?;
    Ok(concat(&qd, &acc))
}

/// `⟨Da_i(q), Da_j(q)⟩_{M⁻¹} = Da_i M⁻¹ Da_jᵀ`.
pub fn orthogonality_check<T: Real>(sys: &dyn MechSystem<T>, q: &DVector<T>, i: usize, j: usize) -> Result<T, ModelError> {
    let n = sys.n_constraints();
    if i >= n || j >= n {
        return Err(ModelError::Dimension(format!("constraint index out of range (n = {n})")));
    }
    let chol = mass_cholesky(sys, q)?;
    let da = sys.constraint_jac(q);
    ensure_finite_mat(&da, "constraint_jac")?;
    let ri = da.row(i).transpose();
    let rj = da.row(j).transpose();
    Ok(ri.dot(&chol.solve(&rj)))
}

/// Checks the system-level invariants at `(q, q̇)`: symmetric positive-definite
/// mass, non-negative restitution, and independence of the constraint normals
/// active at `q` (those with `|a_i(q)| ≤ tol.cons`).
pub fn check_system<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd: &DVector<T>,
    tol: &Tolerances<T>,
) -> Result<(), ModelError> {
    let chol = mass_cholesky(sys, q)?;
    let gamma = sys.restitution(q, qd);
    if !(gamma >= T::zero()) {
        return Err(ModelError::NegativeRestitution(gamma.to_f64_lossy()));
    }
    let a = sys.constraints(q);
    ensure_finite_vec(&a, "constraints")?;
    let active: ActiveSet = (0..sys.n_constraints()).filter(|&i| a[i].abs() <= tol.cons).collect();
    gram(sys, q, &chol, active)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Constant-mass point with linear constraints `a = A q`.
    struct Linear {
        m: DMatrix<f64>,
        a: DMatrix<f64>,
        gamma: f64,
        force: DVector<f64>,
    }

    impl MechSystem<f64> for Linear {
        fn dof(&self) -> usize {
            self.m.nrows()
        }
        fn n_constraints(&self) -> usize {
            self.a.nrows()
        }
        fn mass(&self, _q: &DVector<f64>) -> DMatrix<f64> {
            self.m.clone()
        }
        fn effort(&self, _q: &DVector<f64>, _qd: &DVector<f64>) -> DVector<f64> {
            self.force.clone()
        }
        fn constraints(&self, q: &DVector<f64>) -> DVector<f64> {
            &self.a * q
        }
        fn constraint_jac(&self, _q: &DVector<f64>) -> DMatrix<f64> {
            self.a.clone()
        }
        fn constraint_hess(&self, _q: &DVector<f64>) -> Vec<DMatrix<f64>> {
            vec![DMatrix::zeros(self.dof(), self.dof()); self.n_constraints()]
        }
        fn restitution(&self, _q: &DVector<f64>, _qd: &DVector<f64>) -> f64 {
            self.gamma
        }
    }

    fn planar(m: [f64; 2], rows: [[f64; 2]; 2], gamma: f64) -> Linear {
        Linear {
            m: DMatrix::from_diagonal(&DVector::from_row_slice(&m)),
            a: DMatrix::from_row_slice(2, 2, &[rows[0][0], rows[0][1], rows[1][0], rows[1][1]]),
            gamma,
            force: DVector::zeros(2),
        }
    }

    /// `M(q) = [1 + q²]`, no constraints.
    struct Quadratic;

    impl MechSystem<f64> for Quadratic {
        fn dof(&self) -> usize {
            1
        }
        fn n_constraints(&self) -> usize {
            0
        }
        fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 1.0 + q[0] * q[0])
        }
        fn mass_jac(&self, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
            vec![DMatrix::from_element(1, 1, 2.0 * q[0])]
        }
        fn effort(&self, _q: &DVector<f64>, _qd: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
        fn constraints(&self, _q: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn constraint_jac(&self, _q: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(0, 1)
        }
        fn constraint_hess(&self, _q: &DVector<f64>) -> Vec<DMatrix<f64>> {
            vec![]
        }
        fn restitution(&self, _q: &DVector<f64>, _qd: &DVector<f64>) -> f64 {
            0.0
        }
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn active_set_ops() {
        let s = ActiveSet::from_indices([3, 0]);
        assert_eq!(s.to_vec(), vec![0, 3]);
        assert_eq!(s.to_string(), "{0,3}");
        assert!(s.contains(3) && !s.contains(1));
        assert_eq!(s.without(0), ActiveSet::single(3));
        assert_eq!(s.len(), 2);
        assert!(ActiveSet::empty().is_subset(s));
        assert_eq!(ActiveSet::empty().to_string(), "{}");
    }

    #[test]
    fn coriolis_vanishes_for_constant_mass() {
        let sys = planar([1.0, 4.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let c = coriolis(&sys, &v(&[0.3, -0.2]), &v(&[1.0, 2.0])).unwrap();
        assert_eq!(c.amax(), 0.0);
    }

    #[test]
    fn coriolis_one_dof_hand_value() {
        let c = coriolis(&Quadratic, &v(&[1.0]), &v(&[1.0])).unwrap();
        assert_relative_eq!(c[(0, 0)], -1.0, epsilon = 1e-15);
        // The footnote sum carries a q̇_k factor: c = -q q̇.
        let c = coriolis(&Quadratic, &v(&[1.0]), &v(&[3.0])).unwrap();
        assert_relative_eq!(c[(0, 0)], -3.0, epsilon = 1e-15);
    }

    #[test]
    fn gram_identity_and_oblique() {
        let ortho = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let lam = lambda_gram(&ortho, &v(&[0.0, 0.0]), ActiveSet::from_indices([0, 1])).unwrap();
        assert_relative_eq!(lam, DMatrix::identity(2, 2), epsilon = 1e-14);

        let s = 0.5f64.sqrt();
        let oblique = planar([1.0, 1.0], [[1.0, 0.0], [s, s]], 0.0);
        let lam = lambda_gram(&oblique, &v(&[0.0, 0.0]), ActiveSet::from_indices([0, 1])).unwrap();
        // inverse of [[1, s], [s, 1]] = [[1, -s], [-s, 1]] / (1 - s²)
        let det = 1.0 - s * s;
        let expect = DMatrix::from_row_slice(2, 2, &[1.0 / det, -s / det, -s / det, 1.0 / det]);
        assert_relative_eq!(lam, expect, epsilon = 1e-12);

        let empty = lambda_gram(&oblique, &v(&[0.0, 0.0]), ActiveSet::empty()).unwrap();
        assert_eq!(empty.shape(), (0, 0));
    }

    #[test]
    fn dependent_normals_rejected() {
        let dep = planar([1.0, 1.0], [[1.0, 1.0], [2.0, 2.0]], 0.0);
        let err = lambda_gram(&dep, &v(&[0.0, 0.0]), ActiveSet::from_indices([0, 1])).unwrap_err();
        assert!(matches!(err, ModelError::ConstraintDependence { .. }));
        let err = impact_map(&dep, &v(&[0.0, 0.0]), &v(&[-1.0, 0.0]), ActiveSet::from_indices([0, 1])).unwrap_err();
        assert!(matches!(err, ModelError::ConstraintDependence { .. }));
    }

    #[test]
    fn impact_map_cases() {
        let sys = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let qd = v(&[-1.0, -1.0]);
        let (p, delta) = impact_map(&sys, &v(&[0.0, 0.0]), &qd, ActiveSet::empty()).unwrap();
        assert_eq!(p, qd);
        assert_eq!(delta, DMatrix::identity(2, 2));
        let (p, _) = impact_map(&sys, &v(&[0.0, 0.0]), &qd, ActiveSet::from_indices([0, 1])).unwrap();
        assert_relative_eq!(p, v(&[0.0, 0.0]), epsilon = 1e-15);

        let ball = Linear {
            m: DMatrix::from_element(1, 1, 2.5),
            a: DMatrix::from_element(1, 1, 1.0),
            gamma: 0.7,
            force: v(&[-2.5]),
        };
        let (p, delta) = impact_map(&ball, &v(&[0.0]), &v(&[-2.0]), ActiveSet::single(0)).unwrap();
        assert_relative_eq!(p[0], 1.4, epsilon = 1e-14);
        assert_relative_eq!(delta[(0, 0)], -0.7, epsilon = 1e-14);
    }

    #[test]
    fn ball_contact_force_and_accel() {
        let ball = Linear {
            m: DMatrix::from_element(1, 1, 3.0),
            a: DMatrix::from_element(1, 1, 1.0),
            gamma: 0.0,
            force: v(&[-3.0 * 9.81]),
        };
        let dyn_ = mode_dynamics(&ball, &v(&[0.0]), &v(&[0.0]), ActiveSet::single(0)).unwrap();
        assert_relative_eq!(dyn_.lambda[0], 3.0 * 9.81, epsilon = 1e-12);
        assert_relative_eq!(dyn_.accel[0], 0.0, epsilon = 1e-12);
        let free = mode_dynamics(&ball, &v(&[1.0]), &v(&[0.0]), ActiveSet::empty()).unwrap();
        assert_eq!(free.lambda.len(), 0);
        assert_relative_eq!(free.accel[0], -9.81, epsilon = 1e-12);
    }

    #[test]
    fn flat_wall_tangential_motion_has_no_force() {
        let sys = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let lam = contact_force(&sys, &v(&[0.0, 0.5]), &v(&[0.0, 1.0]), ActiveSet::single(0)).unwrap();
        assert_eq!(lam[0], 0.0);
    }

    #[test]
    fn orthogonality_values() {
        let s = 0.5f64.sqrt();
        let oblique = planar([1.0, 1.0], [[1.0, 0.0], [s, s]], 0.0);
        assert_relative_eq!(orthogonality_check(&oblique, &v(&[0.0, 0.0]), 0, 1).unwrap(), s, epsilon = 1e-15);
        let diag = planar([1.0, 4.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        assert_eq!(orthogonality_check(&diag, &v(&[0.0, 0.0]), 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn state_check_flags_violations() {
        let sys = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let tol = Tolerances::default();
        let ok = State::from_slices(0.0, &[0.0, 1.0], &[0.0, -1.0], ActiveSet::single(0));
        assert!(ok.check(&sys, &tol).is_ok());
        let moving = State::from_slices(0.0, &[0.0, 1.0], &[1.0, 0.0], ActiveSet::single(0));
        assert!(moving.check(&sys, &tol).is_err());
        let inside = State::from_slices(0.0, &[-0.1, 1.0], &[0.0, 0.0], ActiveSet::empty());
        assert!(inside.check(&sys, &tol).is_err());
    }

    #[test]
    fn non_spd_mass_rejected() {
        let mut sys = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], 0.0);
        sys.m[(0, 1)] = 0.5;
        assert!(matches!(mass_cholesky(&sys, &v(&[0.0, 0.0])), Err(ModelError::MassNotSpd(_))));
        sys.m = DMatrix::from_diagonal(&v(&[1.0, -1.0]));
        assert!(matches!(mass_cholesky(&sys, &v(&[0.0, 0.0])), Err(ModelError::MassNotSpd(_))));
    }

    #[test]
    fn negative_restitution_rejected() {
        let sys = planar([1.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], -0.5);
        let err = impact_map(&sys, &v(&[0.0, 0.0]), &v(&[-1.0, 0.0]), ActiveSet::single(0)).unwrap_err();
        assert!(matches!(err, ModelError::NegativeRestitution(_)));
    }
}
