//! Poincaré maps, their piecewise-linear derivatives, stability tests and
//! first-order controllability checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{vector_field, ControlledSystem, MechSystem, ModelError, State};
use crate::numdiff;
use crate::scalar::Real;
use crate::sensitivity::{b_derivative, b_derivative_controlled, BDerivative, SensError, SensitivityConfig};
use crate::sim::{flow, flow_until, HybridTrajectory, SimConfig, SimError, Termination};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Sens(#[from] SensError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no return to the section before t = {t_final:e}")]
    NoReturn { t_final: f64 },
    #[error("trajectory ended with {kind} before returning to the section: {detail}")]
    Irregular { kind: &'static str, detail: String },
    #[error("state is off the section (s = {0:e})")]
    OffSection(f64),
    #[error("section is not transversal to the flow (Ds·F = {0:e})")]
    NonTransversal(f64),
    #[error("weight matrix is not symmetric positive definite")]
    WeightNotSpd,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("fixed-point iteration stalled at residual {0:e}")]
    NoConvergence(f64),
}

type SectionFn<T> = Arc<dyn Fn(&DVector<T>) -> T + Send + Sync>;

/// Codimension-one section `{x : s(x) = 0}`. A return is a crossing of `s`
/// from positive to non-positive.
#[derive(Clone)]
pub struct Section<T: Real> {
    pub name: String,
    func: SectionFn<T>,
}

impl<T: Real> fmt::Debug for Section<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Section").field("name", &self.name).finish_non_exhaustive()
    }
}

impl<T: Real> Section<T> {
    pub fn new(name: impl Into<String>, func: impl Fn(&DVector<T>) -> T + Send + Sync + 'static) -> Self {
        Section { name: name.into(), func: Arc::new(func) }
    }

    /// `s(x) = n·x - c`.
    pub fn affine(name: impl Into<String>, normal: DVector<T>, offset: T) -> Self {
        Section::new(name, move |x: &DVector<T>| normal.dot(x) - offset)
    }

    /// `s(x) = x_k - c`.
    pub fn coordinate(name: impl Into<String>, k: usize, value: T) -> Self {
        Section::new(name, move |x: &DVector<T>| x[k] - value)
    }

    /// Apex of a vertical coordinate: `s = q̇_k`, crossed downward.
    pub fn apex(dof: usize, k: usize) -> Self {
        Section::coordinate(format!("apex of q{k}"), dof + k, T::zero())
    }

    pub fn eval(&self, x: &DVector<T>) -> T {
        (self.func)(x)
    }

    pub fn gradient(&self, x: &DVector<T>) -> DVector<T> {
        numdiff::gradient(|y: &DVector<T>| self.eval(y), x)
    }

    /// Orthonormal basis (columns) of the complement of `Ds(x)`: the unit
    /// vectors except the one most aligned with `Ds`, orthonormalized against
    /// `Ds` in index order.
    pub fn frame(&self, x: &DVector<T>) -> DMatrix<T> {
        let g = self.gradient(x).normalize();
        let n = g.len();
        let skip = g.iamax();
        let mut basis: Vec<DVector<T>> = vec![g];
        for j in (0..n).filter(|&j| j != skip) {
            let mut v = DVector::zeros(n);
            v[j] = T::one();
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
            }
            basis.push(v.normalize());
        }
        DMatrix::from_columns(&basis[1..])
    }

    /// `Ds·F` at `x`.
    pub fn transversality(&self, sys: &dyn MechSystem<T>, state: &State<T>) -> Result<T, ModelError> {
        let x = state.x();
        let f = vector_field(sys, &x, state.mode)?;
        Ok(self.gradient(&x).dot(&f))
    }
}

/// First return to a section.
#[derive(Clone, Debug, PartialEq)]
pub struct PoincareReturn<T: Real> {
    pub state: State<T>,
    pub period: T,
    pub trajectory: HybridTrajectory<T>,
}

/// Flows from `x0` (on the section) to its first return. `cfg.t_final`
/// bounds the search and is taken relative to `x0.t`.
pub fn poincare_map<T: Real>(
    sys: &dyn MechSystem<T>,
    section: &Section<T>,
    x0: &State<T>,
    cfg: &SimConfig<T>,
) -> Result<PoincareReturn<T>, AnalysisError> {
    let s0 = section.eval(&x0.x());
    if s0.abs() > cfg.tol.cons.max(T::lit(1e-9)) {
        return Err(AnalysisError::OffSection(s0.to_f64_lossy()));
    }
    let horizon = x0.t + cfg.t_final;
    let stop = |_t: T, x: &DVector<T>, _m| section.eval(x);
    let tr = flow_until(sys, x0, &cfg.clone().with_t_final(horizon), Some(&stop))?;
    match tr.termination {
        Termination::Stopped { t } => {
            let tv = section.transversality(sys, &tr.final_state)?;
            if !(tv < -cfg.tol.graze) {
                return Err(AnalysisError::NonTransversal(tv.to_f64_lossy()));
            }
            Ok(PoincareReturn { state: tr.final_state.clone(), period: t - x0.t, trajectory: tr })
        }
        Termination::TimeReached => Err(AnalysisError::NoReturn { t_final: horizon.to_f64_lossy() }),
        ref other => Err(AnalysisError::Irregular { kind: other.label(), detail: format!("{other:?}") }),
    }
}

/// A continuous piecewise-linear map given by its selection matrices and a
/// rule assigning each vector to the selection active there.
pub trait PiecewiseLinear<T: Real> {
    fn dim(&self) -> usize;
    fn matrices(&self) -> &[DMatrix<T>];
    fn selection_for(&self, v: &DVector<T>) -> usize;

    fn apply(&self, v: &DVector<T>) -> DVector<T> {
        &self.matrices()[self.selection_for(v)] * v
    }
}

/// Piecewise-linear map with an explicit region rule.
#[derive(Clone)]
pub struct PlMap<T: Real> {
    pub matrices: Vec<DMatrix<T>>,
    region: Arc<dyn Fn(&DVector<T>) -> usize + Send + Sync>,
}

impl<T: Real> fmt::Debug for PlMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlMap").field("matrices", &self.matrices).finish_non_exhaustive()
    }
}

impl<T: Real> PlMap<T> {
    pub fn new(matrices: Vec<DMatrix<T>>, region: impl Fn(&DVector<T>) -> usize + Send + Sync + 'static) -> Self {
        PlMap { matrices, region: Arc::new(region) }
    }

    /// Linear map (one selection everywhere).
    pub fn linear(a: DMatrix<T>) -> Self {
        PlMap::new(vec![a], |_| 0)
    }
}

impl<T: Real> PiecewiseLinear<T> for PlMap<T> {
    fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }
    fn matrices(&self) -> &[DMatrix<T>] {
        &self.matrices
    }
    fn selection_for(&self, v: &DVector<T>) -> usize {
        (self.region)(v)
    }
}

/// Piecewise-linear derivative of a Poincaré map at a point of the section,
/// in section-local coordinates `ξ ↦ x* + frame·ξ`.
#[derive(Clone, Debug)]
pub struct PoincareDerivative<T: Real> {
    pub point: State<T>,
    pub image: State<T>,
    pub period: T,
    /// `2d × (2d - 1)`, orthonormal columns.
    pub frame: DMatrix<T>,
    /// One matrix per flow selection, `(2d - 1) × (2d - 1)`.
    pub selections: Vec<DMatrix<T>>,
    pub flow: BDerivative<T>,
}

impl<T: Real> PoincareDerivative<T> {
    /// `‖P(x) - x‖`.
    pub fn fixed_point_residual(&self) -> T {
        (self.image.x() - self.point.x()).norm()
    }

    fn direction(&self, xi: &DVector<T>) -> DVector<T> {
        self.flow.direction(T::zero(), &(&self.frame * xi), None)
    }

    /// Selections grouped by equal matrices (max-abs difference below `tol`).
    pub fn distinct_selections(&self, tol: T) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, m) in self.selections.iter().enumerate() {
            match groups.iter_mut().find(|g| (&self.selections[g[0]] - m).abs().max() <= tol) {
                Some(g) => g.push(i),
                None => groups.push(vec![i]),
            }
        }
        groups
    }

    /// Distinct selections active along the given section directions.
    pub fn realized_selections(&self, directions: &[DVector<T>]) -> Vec<usize> {
        let mut hit = vec![false; self.selections.len()];
        for xi in directions {
            hit[self.selection_for(xi)] = true;
        }
        hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
    }
}

impl<T: Real> PiecewiseLinear<T> for PoincareDerivative<T> {
    fn dim(&self) -> usize {
        self.frame.ncols()
    }
    fn matrices(&self) -> &[DMatrix<T>] {
        &self.selections
    }
    fn selection_for(&self, xi: &DVector<T>) -> usize {
        self.flow.membership(&self.direction(xi)).map(|m| m.selection).unwrap_or(0)
    }
}

/// B-derivative of the first-return map at `point`.
pub fn poincare_bderivative<T: Real>(
    sys: &dyn MechSystem<T>,
    section: &Section<T>,
    point: &State<T>,
    cfg: &SimConfig<T>,
    k_max: usize,
) -> Result<PoincareDerivative<T>, AnalysisError> {
    let tv = section.transversality(sys, point)?;
    if !(tv.abs() > cfg.tol.graze) {
        return Err(AnalysisError::NonTransversal(tv.to_f64_lossy()));
    }
    let ret = poincare_map(sys, section, point, cfg)?;
    let scfg = SensitivityConfig { k_max, ..SensitivityConfig::from_sim(cfg) };
    let bd = b_derivative(sys, &ret.trajectory, &scfg)?;
    let x_end = ret.state.x();
    let f = vector_field(sys, &x_end, ret.state.mode)?;
    let g = section.gradient(&x_end);
    let n = f.len();
    let proj = DMatrix::identity(n, n) - &f * g.transpose() / g.dot(&f);
    let frame = section.frame(&point.x());
    let selections = bd.selections.iter().map(|s| frame.transpose() * &proj * &s.state_jac * &frame).collect();
    Ok(PoincareDerivative {
        point: point.clone(),
        image: ret.state,
        period: ret.period,
        frame,
        selections,
        flow: bd,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Step fraction for the Newton update, halved on failure.
    pub damping: T,
}

impl<T: Real> Default for FixedPointOptions<T> {
    fn default() -> Self {
        FixedPointOptions { tol: T::lit(1e-9), max_iter: 50, damping: T::one() }
    }
}

/// Refines a fixed point of the first-return map from `guess` by damped
/// Newton steps in section coordinates, using the selection active along
/// each step. The mode of `guess` is kept.
pub fn refine_fixed_point<T: Real>(
    sys: &dyn MechSystem<T>,
    section: &Section<T>,
    guess: &State<T>,
    cfg: &SimConfig<T>,
    opts: &FixedPointOptions<T>,
) -> Result<State<T>, AnalysisError> {
    let frame = section.frame(&guess.x());
    let origin = guess.x();
    let to_state = |xi: &DVector<T>| State::from_x(guess.t, &(&origin + &frame * xi), guess.mode);
    let residual = |xi: &DVector<T>| -> Result<DVector<T>, AnalysisError> {
        let st = to_state(xi);
        let ret = poincare_map(sys, section, &st, cfg)?;
        Ok(frame.transpose() * (ret.state.x() - st.x()))
    };
    let k = frame.ncols();
    let mut xi = DVector::zeros(k);
    let mut r = residual(&xi)?;
    for _ in 0..opts.max_iter {
        if r.norm() < opts.tol {
            return Ok(to_state(&xi));
        }
        let pd = poincare_bderivative(sys, section, &to_state(&xi), cfg, 3)?;
        // Pick the selection on the side the Newton step points to.
        let mut step = -&r;
        for _ in 0..2 {
            let sel = pd.selection_for(&step);
            let a = &pd.selections[sel] - DMatrix::identity(k, k);
            match a.clone().lu().solve(&(-&r)) {
                Some(s) => step = s,
                None => break,
            }
        }
        let mut beta = opts.damping;
        let mut accepted = false;
        for _ in 0..20 {
            let trial = &xi + &step * beta;
            if let Ok(rt) = residual(&trial) {
                if rt.norm() < r.norm() {
                    xi = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            beta *= T::lit(0.5);
        }
        if !accepted {
            return Err(AnalysisError::NoConvergence(r.norm().to_f64_lossy()));
        }
    }
    if r.norm() < opts.tol {
        Ok(to_state(&xi))
    } else {
        Err(AnalysisError::NoConvergence(r.norm().to_f64_lossy()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StabilityVerdict {
    Stable,
    Unstable,
    Inconclusive,
}

impl fmt::Display for StabilityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilityVerdict::Stable => "STABLE",
            StabilityVerdict::Unstable => "UNSTABLE",
            StabilityVerdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub verdict: StabilityVerdict,
    /// Induced norm of each selection in the common weighted norm.
    pub norms: Vec<f64>,
    pub margin: f64,
}

/// `‖A‖_W = ‖Lᵀ A L⁻ᵀ‖₂` for `W = L Lᵀ`.
pub fn weighted_norm<T: Real>(a: &DMatrix<T>, weight: Option<&DMatrix<T>>) -> Result<T, AnalysisError> {
    let b = match weight {
        None => a.clone(),
        Some(w) => {
            if w.nrows() != a.nrows() || w.ncols() != a.ncols() {
                return Err(AnalysisError::Dimension("weight does not match the map".into()));
            }
            if (w - w.transpose()).abs().max() > T::lit(1e-12) * w.abs().max() {
                return Err(AnalysisError::WeightNotSpd);
            }
            let l = w.clone().cholesky().ok_or(AnalysisError::WeightNotSpd)?.l();
            let lt = l.transpose();
            let lt_inv = lt.clone().try_inverse().ok_or(AnalysisError::WeightNotSpd)?;
            &lt * a * lt_inv
        }
    };
    Ok(b.singular_values().max())
}

/// Sufficient test: every selection contracts in one common norm. Never
/// reports instability.
pub fn stability_contraction_test<T: Real>(
    map: &dyn PiecewiseLinear<T>,
    weight: Option<&DMatrix<T>>,
    margin: T,
) -> Result<ContractionReport, AnalysisError> {
    let norms: Vec<T> = map.matrices().iter().map(|a| weighted_norm(a, weight)).collect::<Result<_, _>>()?;
    let stable = norms.iter().all(|&n| n < T::one() - margin);
    Ok(ContractionReport {
        verdict: if stable { StabilityVerdict::Stable } else { StabilityVerdict::Inconclusive },
        norms: norms.iter().map(|n| n.to_f64_lossy()).collect(),
        margin: margin.to_f64_lossy(),
    })
}

/// Coordinate search over diagonal weights minimizing the largest induced
/// norm. Returns the weight and the norm it achieves.
pub fn search_diagonal_weight<T: Real>(matrices: &[DMatrix<T>], iterations: usize) -> (DMatrix<T>, T) {
    let n = matrices[0].nrows();
    let cost = |logw: &DVector<T>| -> T {
        let w = DMatrix::from_diagonal(&logw.map(|v| v.exp()));
        matrices
            .iter()
            .map(|a| weighted_norm(a, Some(&w)).unwrap_or(T::max_value().unwrap()))
            .fold(T::zero(), |a, b| a.max(b))
    };
    let mut logw = DVector::zeros(n);
    let mut best = cost(&logw);
    let mut step = T::one();
    for _ in 0..iterations {
        let mut improved = false;
        // The first entry stays fixed: induced norms ignore overall scale.
        for i in 1..n {
            for sign in [T::one(), -T::one()] {
                let mut trial = logw.clone();
                trial[i] += sign * step;
                let c = cost(&trial);
                if c < best {
                    best = c;
                    logw = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= T::lit(0.5);
            if step < T::lit(1e-6) {
                break;
            }
        }
    }
    (DMatrix::from_diagonal(&logw.map(|v| v.exp())), best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityWitness {
    pub selection: usize,
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub verdict: StabilityVerdict,
    pub witness: Option<InstabilityWitness>,
    /// Expanding real eigenpairs examined, as `(selection, eigenvalue)`.
    pub candidates: Vec<(usize, f64)>,
}

/// Real eigenpairs of `a`, eigenvectors normalized.
pub fn real_eigenpairs<T: Real>(a: &DMatrix<T>) -> Vec<(T, DVector<T>)> {
    let n = a.nrows();
    let tol = T::lit(1e-10) * (T::one() + a.abs().max());
    let mut out: Vec<(T, DVector<T>)> = Vec::new();
    for ev in a.complex_eigenvalues().iter() {
        if ev.im.abs() > tol {
            continue;
        }
        let lam = ev.re;
        if out.iter().any(|(l, _)| (*l - lam).abs() <= tol) {
            continue;
        }
        let shifted = a - DMatrix::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("requested v_t");
        let k = svd.singular_values.imin();
        let v = vt.row(k).transpose().normalize();
        out.push((lam, v));
    }
    out
}

/// Looks for an expanding real eigenvector that stays in its own selection
/// region under the map.
pub fn instability_eigenvector_test<T: Real>(map: &dyn PiecewiseLinear<T>, margin: T) -> InstabilityReport {
    let mut candidates = Vec::new();
    for (w, a) in map.matrices().iter().enumerate() {
        for (lam, v) in real_eigenpairs(a) {
            if !(lam.abs() > T::one() + margin) {
                continue;
            }
            candidates.push((w, lam.to_f64_lossy()));
            for nu in [v.clone(), -v.clone()] {
                if map.selection_for(&nu) == w && map.selection_for(&(a * &nu)) == w {
                    return InstabilityReport {
                        verdict: StabilityVerdict::Unstable,
                        witness: Some(InstabilityWitness {
                            selection: w,
                            eigenvalue: lam.to_f64_lossy(),
                            eigenvector: nu.iter().map(|x| x.to_f64_lossy()).collect(),
                        }),
                        candidates,
                    };
                }
            }
        }
    }
    InstabilityReport { verdict: StabilityVerdict::Inconclusive, witness: None, candidates }
}

/// Norm growth factors of `n` iterations of the full map from `v0`.
pub fn iterate_growth<T: Real>(map: &dyn PiecewiseLinear<T>, v0: &DVector<T>, n: usize) -> Vec<T> {
    let mut v = v0.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let next = map.apply(&v);
        out.push(next.norm() / v.norm());
        v = next;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControllabilityVerdict {
    /// One selection with a square invertible input block.
    LocallyControllable,
    /// Every selection's input block has full row rank and, for square
    /// blocks, the determinants share one sign. A heuristic sufficient
    /// condition only.
    PlHomeomorphismSufficientHeuristic,
    /// Every selection's input block has full row rank.
    NecessaryConditionsPass,
    /// Some selection's input block is rank deficient.
    NotControllable,
}

impl fmt::Display for ControllabilityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllabilityVerdict::LocallyControllable => "LOCALLY CONTROLLABLE",
            ControllabilityVerdict::PlHomeomorphismSufficientHeuristic => "PL-HOMEOMORPHISM-SUFFICIENT-HEURISTIC",
            ControllabilityVerdict::NecessaryConditionsPass => "NECESSARY-CONDITIONS-PASS",
            ControllabilityVerdict::NotControllable => "NOT CONTROLLABLE TO FIRST ORDER",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllabilityReport<T: Real> {
    pub verdict: ControllabilityVerdict,
    /// `∂φ/∂u` per selection, `2d × m`.
    pub subblocks: Vec<DMatrix<T>>,
    pub min_singular_values: Vec<T>,
    /// Present when the blocks are square.
    pub determinants: Option<Vec<T>>,
    pub flow: BDerivative<T>,
}

/// Layered first-order controllability check of the input-to-state map at
/// time `cfg.t_final`, from `x0` under the constant input `u0`.
pub fn controllability_test<T: Real>(
    csys: &dyn ControlledSystem<T>,
    x0: &State<T>,
    u0: &DVector<T>,
    cfg: &SimConfig<T>,
    k_max: usize,
) -> Result<ControllabilityReport<T>, AnalysisError> {
    let tr = flow(&*csys.with_input(u0), x0, cfg)?;
    let scfg = SensitivityConfig { k_max, ..SensitivityConfig::from_sim(cfg) };
    let bd = b_derivative_controlled(csys, u0, &tr, &scfg)?;
    let n2 = 2 * bd.dof;
    let m = bd.n_inputs;
    let subblocks: Vec<DMatrix<T>> = bd.selections.iter().map(|s| s.input_jac.clone()).collect();
    let rank_tol = T::lit(1e-8);
    let mut min_sv = Vec::with_capacity(subblocks.len());
    let mut full_rank = true;
    for b in &subblocks {
        let sv = if m == 0 { DVector::zeros(0) } else { b.singular_values() };
        let smax = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
        let smin = if m >= n2 && sv.len() >= n2 {
            let mut s: Vec<T> = sv.iter().copied().collect();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            s[n2 - 1]
        } else {
            T::zero()
        };
        if !(smin > rank_tol * smax.max(T::one())) {
            full_rank = false;
        }
        min_sv.push(smin);
    }
    let determinants = (m == n2).then(|| subblocks.iter().map(|b| b.determinant()).collect::<Vec<T>>());
    let verdict = if !full_rank {
        ControllabilityVerdict::NotControllable
    } else if subblocks.len() == 1 && m == n2 {
        ControllabilityVerdict::LocallyControllable
    } else if determinants
        .as_ref()
        .is_some_and(|d| d.iter().all(|&x| x > T::zero()) || d.iter().all(|&x| x < T::zero()))
    {
        ControllabilityVerdict::PlHomeomorphismSufficientHeuristic
    } else {
        ControllabilityVerdict::NecessaryConditionsPass
    };
    Ok(ControllabilityReport { verdict, subblocks, min_singular_values: min_sv, determinants, flow: bd })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_norm_is_scale_invariant() {
        let a = DMatrix::<f64>::from_row_slice(2, 2, &[0.5, 0.3, -0.1, 0.7]);
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let n1 = weighted_norm(&a, Some(&w)).unwrap();
        let n2 = weighted_norm(&a, Some(&(&w * 37.0))).unwrap();
        assert!((n1 - n2).abs() < 1e-12);
    }

    #[test]
    fn non_spd_weight_rejected() {
        let a = DMatrix::<f64>::identity(2, 2);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(weighted_norm(&a, Some(&w)), Err(AnalysisError::WeightNotSpd));
    }

    #[test]
    fn real_eigenpairs_of_triangular() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 0.3]);
        let pairs = real_eigenpairs(&a);
        assert_eq!(pairs.len(), 2);
        for (l, v) in pairs {
            assert!((&a * &v - &v * l).norm() < 1e-10);
        }
    }

    #[test]
    fn rotation_has_no_real_eigenpairs() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        assert!(real_eigenpairs(&a).is_empty());
    }

    #[test]
    fn frame_is_orthonormal_complement() {
        let s = Section::affine("tilted", DVector::from_vec(vec![1.0, 2.0, -1.0]), 0.3);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.0]);
        let b = s.frame(&x);
        assert_eq!(b.shape(), (3, 2));
        assert!((b.transpose() * &b - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert!((b.transpose() * s.gradient(&x)).norm() < 1e-8);
    }

    #[test]
    fn diagonal_weight_search_finds_common_norm() {
        // Contractive in a skewed diagonal norm but not in the Euclidean one.
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 0.0, 0.5]);
        assert!(weighted_norm(&a, None).unwrap() > 1.0);
        let (_, best) = search_diagonal_weight(&[a], 60);
        assert!(best < 1.0, "{best}");
    }
}
