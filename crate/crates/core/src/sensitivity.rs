//! First-order sensitivity of hybrid trajectories.
//!
//! A trajectory is cut into smooth pieces (one per contact-mode segment) and
//! reset instants. Each piece contributes a `(1 + N) × (1 + N)` block acting
//! on `(remaining time, z)` where `z = (q, q̇, u)` stacks the state with the
//! (constant) input parameters, `N = 2d + m`:
//!
//! ```text
//! segment      diag(1, Φ)                       Φ solves Φ' = DF(z(t)) Φ
//! transition   [[1, g/(g·f)], [0, R (I - f g/(g·f))]]
//! final        [f_end | Φ_m]                    (N × (1 + N))
//! ```
//!
//! `g` is the gradient of the event function (`a_c` for an activation, `λ_c`
//! for a deactivation), `f` the vector field just before the event and `R`
//! the Jacobian of the reset. The top row deducts the event-time shift
//! `-g δz/(g·f)` from the remaining time budget; multiplying out recovers the
//! classical saltation matrix `R + (f⁺ - R f) g/(g·f)`.
//!
//! When several constraints change at the same instant, every transversal
//! ordering of the constituent transitions yields one *selection*; the
//! B-derivative is the piecewise-linear map choosing, for each direction,
//! the selection whose ordering the perturbation induces to first order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{Dopri5, IntegrateError, OdeOptions};
use crate::model::{
    concat, contact_force, impact_map, orthogonality_check, split, vector_field, ActiveSet, Autonomous,
    ControlledSystem, MechSystem, ModelError, State, Tolerances,
};
use crate::numdiff;
use crate::scalar::Real;
use crate::sim::{flow, reset_set, update_active_set, HybridTrajectory, ResetLaw, SimConfig, SimError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SensError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trajectory is not admissible: {0}")]
    Inadmissible(String),
    #[error("transition of constraint {constraint} at t = {t:e} is not transversal (g·f = {gf:e})")]
    NonTransversal { constraint: usize, t: f64, gf: f64 },
    #[error("simultaneous event at t = {t:e} involves {k} transitions (limit {k_max})")]
    CombinatorialLimit { t: f64, k: usize, k_max: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One constituent of a (possibly simultaneous) event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Activate(usize),
    Deactivate(usize),
}

impl Transition {
    pub fn constraint(self) -> usize {
        match self {
            Transition::Activate(i) | Transition::Deactivate(i) => i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Real"))]
pub struct SensitivityConfig<T> {
    pub rel_tol: T,
    pub abs_tol: T,
    pub max_step: T,
    /// Largest number of constituents allowed in one simultaneous event.
    pub k_max: usize,
    pub tol: Tolerances<T>,
    pub reset: ResetLaw,
}

impl<T: Real> Default for SensitivityConfig<T> {
    fn default() -> Self {
        SensitivityConfig::from_sim(&SimConfig::default())
    }
}

impl<T: Real> SensitivityConfig<T> {
    pub fn from_sim(cfg: &SimConfig<T>) -> Self {
        SensitivityConfig { rel_tol: cfg.rel_tol, abs_tol: cfg.abs_tol, max_step: cfg.max_step, k_max: 3, tol: cfg.tol, reset: cfg.reset }
    }

    fn ode(&self) -> OdeOptions<T> {
        OdeOptions { rel_tol: self.rel_tol, abs_tol: self.abs_tol, max_step: self.max_step, ..OdeOptions::default() }
    }
}

/// A controlled system frozen at a nominal input, with helpers on the
/// extended coordinates `z = (q, q̇, u)`.
struct Ctx<'a, T: Real> {
    csys: &'a dyn ControlledSystem<T>,
    u: DVector<T>,
    d: usize,
    m: usize,
    law: ResetLaw,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn new(csys: &'a dyn ControlledSystem<T>, u: &DVector<T>, law: ResetLaw) -> Result<Self, SensError> {
        let m = csys.n_inputs();
        if u.len() != m {
            return Err(SensError::Dimension(format!("input has {} entries, system expects {m}", u.len())));
        }
        let d = csys.with_input(u).dof();
        Ok(Ctx { csys, u: u.clone(), d, m, law })
    }

    fn n(&self) -> usize {
        2 * self.d + self.m
    }

    fn ext(&self, x: &DVector<T>) -> DVector<T> {
        concat(x, &self.u)
    }

    fn parts(&self, z: &DVector<T>) -> (DVector<T>, DVector<T>) {
        let n2 = 2 * self.d;
        (z.rows(0, n2).into_owned(), z.rows(n2, self.m).into_owned())
    }

    fn field(&self, z: &DVector<T>, mode: ActiveSet) -> Result<DVector<T>, ModelError> {
        let (x, u) = self.parts(z);
        let sys = self.csys.with_input(&u);
        let f = vector_field(&*sys, &x, mode)?;
        Ok(concat(&f, &DVector::zeros(self.m)))
    }

    fn dfield(&self, z: &DVector<T>, mode: ActiveSet) -> Result<DMatrix<T>, ModelError> {
        numdiff::try_jacobian(|z: &DVector<T>| self.field(z, mode), z)
    }

    /// `z ↦ (q, Δ_J(q, q̇; u) q̇, u)`.
    fn reset(&self, z: &DVector<T>, impact: ActiveSet) -> Result<DVector<T>, ModelError> {
        let (x, u) = self.parts(z);
        let (q, qd) = split(&x);
        let sys = self.csys.with_input(&u);
        let (qd_plus, _) = impact_map(&*sys, &q, &qd, impact)?;
        Ok(concat(&concat(&q, &qd_plus), &u))
    }

    fn force(&self, z: &DVector<T>, mode: ActiveSet, k: usize) -> Result<T, ModelError> {
        let (x, u) = self.parts(z);
        let (q, qd) = split(&x);
        let sys = self.csys.with_input(&u);
        Ok(contact_force(&*sys, &q, &qd, mode)?[k])
    }
}

/// State-transition matrix of one contact mode over a time interval.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalSegment<T: Real> {
    pub mode: ActiveSet,
    pub t_start: T,
    pub duration: T,
    pub x_start: DVector<T>,
    pub x_end: DVector<T>,
    /// `N × N` on `z = (x, u)`.
    pub phi: DMatrix<T>,
    /// Vector field (extended with zeros) at the end point.
    pub field_end: DVector<T>,
}

impl<T: Real> VariationalSegment<T> {
    /// `2d × 2d` block acting on the state.
    pub fn phi_state(&self) -> DMatrix<T> {
        let n2 = self.x_start.len();
        self.phi.view((0, 0), (n2, n2)).into_owned()
    }

    /// `diag(1, Φ)`.
    pub fn matrix(&self) -> DMatrix<T> {
        let n = self.phi.nrows();
        let mut m = DMatrix::identity(n + 1, n + 1);
        m.view_mut((1, 1), (n, n)).copy_from(&self.phi);
        m
    }

    /// `[f_end | Φ]`, the derivative of the flow with respect to
    /// `(remaining time, z)`.
    pub fn final_matrix(&self) -> DMatrix<T> {
        let n = self.phi.nrows();
        let mut m = DMatrix::zeros(n, n + 1);
        m.column_mut(0).copy_from(&self.field_end);
        m.view_mut((0, 1), (n, n)).copy_from(&self.phi);
        m
    }
}

fn variational_impl<T: Real>(
    ctx: &Ctx<'_, T>,
    mode: ActiveSet,
    t_start: T,
    x_start: &DVector<T>,
    duration: T,
    cfg: &SensitivityConfig<T>,
) -> Result<VariationalSegment<T>, SensError> {
    let n = ctx.n();
    let z0 = ctx.ext(x_start);
    if duration == T::zero() {
        let field_end = ctx.field(&z0, mode)?;
        return Ok(VariationalSegment {
            mode,
            t_start,
            duration,
            x_start: x_start.clone(),
            x_end: x_start.clone(),
            phi: DMatrix::identity(n, n),
            field_end,
        });
    }
    let mut y0 = DVector::zeros(n + n * n);
    y0.rows_mut(0, n).copy_from(&z0);
    for i in 0..n {
        y0[n + i * n + i] = T::one();
    }
    let rhs = |_t: T, y: &DVector<T>| -> Result<DVector<T>, ModelError> {
        let z = y.rows(0, n).into_owned();
        let f = ctx.field(&z, mode)?;
        let df = ctx.dfield(&z, mode)?;
        let psi = DMatrix::from_column_slice(n, n, &y.as_slice()[n..]);
        let dpsi = df * psi;
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&f);
        out.rows_mut(n, n * n).copy_from_slice(dpsi.as_slice());
        Ok(out)
    };
    let t_end = t_start + duration;
    let mut stepper = Dopri5::new(rhs, t_start, y0, t_end, cfg.ode())?;
    while stepper.step(t_end)?.is_some() {}
    let y = stepper.y().clone();
    let z_end = y.rows(0, n).into_owned();
    let phi = DMatrix::from_column_slice(n, n, &y.as_slice()[n..]);
    let field_end = ctx.field(&z_end, mode)?;
    Ok(VariationalSegment {
        mode,
        t_start,
        duration,
        x_start: x_start.clone(),
        x_end: z_end.rows(0, 2 * ctx.d).into_owned(),
        phi,
        field_end,
    })
}

/// Integrates the variational equation of mode `mode` from `x_start` over
/// `duration` (which may be negative), at input `u`.
pub fn variational_flow<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    mode: ActiveSet,
    t_start: T,
    x_start: &DVector<T>,
    duration: T,
    cfg: &SensitivityConfig<T>,
) -> Result<VariationalSegment<T>, SensError> {
    let ctx = Ctx::new(csys, u, cfg.reset)?;
    variational_impl(&ctx, mode, t_start, x_start, duration, cfg)
}

/// Derivative data of one reset instant.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBlock<T: Real> {
    pub transition: Transition,
    pub t: T,
    pub mode_before: ActiveSet,
    pub mode_after: ActiveSet,
    pub x_pre: DVector<T>,
    pub x_post: DVector<T>,
    /// Gradient of the event function on `z`.
    pub g: DVector<T>,
    /// Extended vector field before the event.
    pub field: DVector<T>,
    pub gf: T,
    /// Gradient of the event time, `-g/(g·f)`.
    pub tau_grad: DVector<T>,
    /// Jacobian of the reset on `z` (identity for deactivations).
    pub reset_jac: DMatrix<T>,
    /// Extended vector field after the event.
    pub field_post: DVector<T>,
    /// `R (I - f g/(g·f))`.
    pub saltation: DMatrix<T>,
}

impl<T: Real> TransitionBlock<T> {
    /// `[[1, g/(g·f)], [0, saltation]]`.
    pub fn matrix(&self) -> DMatrix<T> {
        let n = self.g.len();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m[(0, 0)] = T::one();
        for j in 0..n {
            m[(0, j + 1)] = self.g[j] / self.gf;
        }
        m.view_mut((1, 1), (n, n)).copy_from(&self.saltation);
        m
    }

    /// `R + (f⁺ - R f) g/(g·f)`, the time-frozen jump of perturbations.
    pub fn classical_saltation(&self) -> DMatrix<T> {
        let df = &self.field_post - &self.reset_jac * &self.field;
        &self.reset_jac + df * self.g.transpose() / self.gf
    }

    /// First-order shift of the event time for the perturbation `dz`.
    pub fn time_shift(&self, dz: &DVector<T>) -> T {
        self.tau_grad.dot(dz)
    }
}

fn transition_impl<T: Real>(
    ctx: &Ctx<'_, T>,
    t: T,
    x_pre: &DVector<T>,
    mode: ActiveSet,
    tr: Transition,
    tol: &Tolerances<T>,
) -> Result<TransitionBlock<T>, SensError> {
    let n = ctx.n();
    let d = ctx.d;
    let z = ctx.ext(x_pre);
    let field = ctx.field(&z, mode)?;
    let sys = ctx.csys.with_input(&ctx.u);
    let (q, qd) = split(x_pre);
    let (g, reset_jac, x_post, mode_after) = match tr {
        Transition::Activate(c) => {
            if mode.contains(c) {
                return Err(SensError::Inadmissible(format!("constraint {c} is already active")));
            }
            let mut g = DVector::zeros(n);
            let row = sys.constraint_jac(&q).row(c).transpose();
            g.rows_mut(0, d).copy_from(&row);
            let impact = reset_set(&*sys, &q, &qd, mode, ActiveSet::single(c), ctx.law, tol)?;
            let r = numdiff::try_jacobian(|z: &DVector<T>| ctx.reset(z, impact), &z)?;
            let settled = update_active_set(&*sys, &q, &qd, mode, ActiveSet::single(c), ctx.law, tol)?;
            (g, r, concat(&q, &settled.qd), settled.mode)
        }
        Transition::Deactivate(c) => {
            let k = mode
                .iter()
                .position(|j| j == c)
                .ok_or_else(|| SensError::Inadmissible(format!("constraint {c} is not active")))?;
            let g = numdiff::try_gradient(|z: &DVector<T>| ctx.force(z, mode, k), &z)?;
            let settled = update_active_set(&*sys, &q, &qd, mode.without(c), ActiveSet::empty(), ctx.law, tol)?;
            (g, DMatrix::identity(n, n), concat(&q, &settled.qd), settled.mode)
        }
    };
    let gf = g.dot(&field);
    if !(gf < -tol.graze) {
        return Err(SensError::NonTransversal { constraint: tr.constraint(), t: t.to_f64_lossy(), gf: gf.to_f64_lossy() });
    }
    let tau_grad = -&g / gf;
    let proj = DMatrix::identity(n, n) - &field * g.transpose() / gf;
    let saltation = &reset_jac * proj;
    let field_post = ctx.field(&ctx.ext(&x_post), mode_after)?;
    Ok(TransitionBlock {
        transition: tr,
        t,
        mode_before: mode,
        mode_after,
        x_pre: x_pre.clone(),
        x_post,
        g,
        field,
        gf,
        tau_grad,
        reset_jac,
        field_post,
        saltation,
    })
}

/// Transition block for one constituent `tr` applied at `x_pre` in `mode`.
pub fn transition_block<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    t: T,
    x_pre: &DVector<T>,
    mode: ActiveSet,
    tr: Transition,
    cfg: &SensitivityConfig<T>,
) -> Result<TransitionBlock<T>, SensError> {
    let ctx = Ctx::new(csys, u, cfg.reset)?;
    transition_impl(&ctx, t, x_pre, mode, tr, &cfg.tol)
}

/// Ordering tree of one event: each path from the root to a leaf is one
/// admissible sequence of its constituent transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteNode<T: Real> {
    pub mode: ActiveSet,
    pub x: DVector<T>,
    pub children: Vec<SiteChild<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteChild<T: Real> {
    pub block: TransitionBlock<T>,
    pub node: SiteNode<T>,
}

impl<T: Real> SiteNode<T> {
    /// Child-index paths to every leaf.
    pub fn paths(&self) -> Vec<Vec<usize>> {
        if self.children.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (k, c) in self.children.iter().enumerate() {
            for mut p in c.node.paths() {
                p.insert(0, k);
                out.push(p);
            }
        }
        out
    }

    /// Blocks along a path.
    pub fn blocks(&self, path: &[usize]) -> Vec<&TransitionBlock<T>> {
        let mut node = self;
        let mut out = Vec::with_capacity(path.len());
        for &k in path {
            out.push(&node.children[k].block);
            node = &node.children[k].node;
        }
        out
    }
}

fn build_site<T: Real>(
    ctx: &Ctx<'_, T>,
    t: T,
    x: &DVector<T>,
    mode: ActiveSet,
    pending: &[Transition],
    tol: &Tolerances<T>,
    warnings: &mut Vec<String>,
) -> Result<SiteNode<T>, SensError> {
    let mut children = Vec::new();
    for (k, &tr) in pending.iter().enumerate() {
        match transition_impl(ctx, t, x, mode, tr, tol) {
            Ok(block) => {
                let after = block.mode_after;
                let rest: Vec<Transition> = pending
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, &p)| p)
                    .filter(|p| match *p {
                        Transition::Activate(i) => !after.contains(i),
                        Transition::Deactivate(i) => after.contains(i),
                    })
                    .collect();
                let x_post = block.x_post.clone();
                let node = build_site(ctx, t, &x_post, after, &rest, tol, warnings)?;
                children.push(SiteChild { block, node });
            }
            Err(SensError::NonTransversal { constraint, gf, .. }) => {
                if gf.abs() <= tol.graze.to_f64_lossy() {
                    let msg = format!(
                        "ordering skipped at t = {t:e}: constraint {constraint} has zero approach rate in mode {mode}"
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                } else {
                    log::debug!("constraint {constraint} not approaching in mode {mode} at t = {t:e}; dropped");
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SiteNode { mode, x: x.clone(), children })
}

/// Piece of the trajectory timeline.
#[derive(Clone, Debug, PartialEq)]
pub enum Piece<T: Real> {
    Segment(VariationalSegment<T>),
    Site { event: usize, tree: SiteNode<T> },
}

/// Labelled factor of a selection Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real> {
    pub label: String,
    pub matrix: DMatrix<T>,
}

/// Jacobian of one selection function.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionDerivative<T: Real> {
    /// Modes visited, including zero-duration intermediate modes.
    pub word: Vec<ActiveSet>,
    /// Constraint changed by each transition.
    pub eta: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// Child-index path chosen at each event.
    pub paths: Vec<Vec<usize>>,
    /// `∂φ/∂t`: vector field at the end point.
    pub time_jac: DVector<T>,
    /// `∂φ/∂x`, `2d × 2d`.
    pub state_jac: DMatrix<T>,
    /// `∂φ/∂u`, `2d × m`.
    pub input_jac: DMatrix<T>,
    /// Full derivative on `(t, x, u)`, `N × (1 + N)`.
    pub full: DMatrix<T>,
    /// Factors in application order; the last one is the final segment.
    pub blocks: Vec<Block<T>>,
}

impl<T: Real> SelectionDerivative<T> {
    /// Product of the stored blocks.
    pub fn product_of_blocks(&self) -> DMatrix<T> {
        let mut it = self.blocks.iter().rev();
        let mut acc = it.next().map(|b| b.matrix.clone()).expect("at least the final block");
        for b in it {
            acc = acc * &b.matrix;
        }
        acc
    }

    /// Image of the direction `(δt, δx, δu)` in the state space.
    pub fn apply(&self, dir: &DVector<T>) -> DVector<T> {
        let n2 = self.state_jac.nrows();
        self.full.rows(0, n2) * dir
    }
}

/// Result of enumerating the selections of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    /// One entry per selection: transitions applied at each event.
    pub orderings: Vec<Vec<Vec<Transition>>>,
    pub words: Vec<Vec<ActiveSet>>,
    /// The word recorded by the simulator, where simultaneous transitions
    /// are merged into a single reset.
    pub realized_word: Vec<ActiveSet>,
}

impl Enumeration {
    /// Distinct words: one per selection plus the realized one.
    pub fn distinct_words(&self) -> std::collections::BTreeSet<Vec<ActiveSet>> {
        let mut s: std::collections::BTreeSet<_> = self.words.iter().cloned().collect();
        s.insert(self.realized_word.clone());
        s
    }
}

/// Piecewise-linear derivative of the flow at the initial point of a
/// trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct BDerivative<T: Real> {
    pub t0: T,
    pub t_end: T,
    pub x0: DVector<T>,
    pub u: DVector<T>,
    pub dof: usize,
    pub n_inputs: usize,
    pub selections: Vec<SelectionDerivative<T>>,
    pub realized_word: Vec<ActiveSet>,
    /// Set when constraints involved in a simultaneous event are not
    /// orthogonal; the map is then generally discontinuous and the output is
    /// best effort.
    pub orthogonality_violation: bool,
    pub warnings: Vec<String>,
    pub pieces: Vec<Piece<T>>,
}

/// Selection chosen for a direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub selection: usize,
    pub paths: Vec<Vec<usize>>,
    /// The first-order event times of two candidates coincided somewhere:
    /// the direction lies on a region boundary.
    pub tie: bool,
}

impl<T: Real> BDerivative<T> {
    /// Length of a direction vector: `1 + 2d + m`.
    pub fn dir_len(&self) -> usize {
        1 + 2 * self.dof + self.n_inputs
    }

    /// Builds a direction from its parts.
    pub fn direction(&self, dt: T, dx: &DVector<T>, du: Option<&DVector<T>>) -> DVector<T> {
        let mut v = DVector::zeros(self.dir_len());
        v[0] = dt;
        v.rows_mut(1, 2 * self.dof).copy_from(dx);
        if let Some(du) = du {
            v.rows_mut(1 + 2 * self.dof, self.n_inputs).copy_from(du);
        }
        v
    }

    fn sites(&self) -> impl Iterator<Item = &SiteNode<T>> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Site { tree, .. } => Some(tree),
            Piece::Segment(_) => None,
        })
    }

    /// Number of events (sites) along the trajectory.
    pub fn n_sites(&self) -> usize {
        self.sites().count()
    }

    pub fn selection_index(&self, paths: &[Vec<usize>]) -> Option<usize> {
        self.selections.iter().position(|s| s.paths == paths)
    }

    /// Propagates `dir` through the pieces, choosing at each event the
    /// constituent with the earliest first-order event time.
    pub fn membership(&self, dir: &DVector<T>) -> Result<Membership, SensError> {
        if dir.len() != self.dir_len() {
            return Err(SensError::Dimension(format!("direction has {} entries, expected {}", dir.len(), self.dir_len())));
        }
        let mut delta = dir.clone();
        let mut paths = Vec::new();
        let mut tie = false;
        let last_seg = self.pieces.iter().rposition(|p| matches!(p, Piece::Segment(_)));
        for (k, piece) in self.pieces.iter().enumerate() {
            match piece {
                Piece::Segment(seg) => {
                    if Some(k) != last_seg {
                        delta = seg.matrix() * &delta;
                    }
                }
                Piece::Site { tree, .. } => {
                    let mut node = tree;
                    let mut path = Vec::new();
                    while !node.children.is_empty() {
                        let dz = delta.rows(1, delta.len() - 1).into_owned();
                        let shifts: Vec<T> = node.children.iter().map(|c| c.block.time_shift(&dz)).collect();
                        let (best, &tmin) = shifts
                            .iter()
                            .enumerate()
                            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                            .unwrap();
                        let scale = node
                            .children
                            .iter()
                            .map(|c| c.block.tau_grad.norm())
                            .fold(T::zero(), |a, b| a.max(b))
                            * dz.norm();
                        let tie_tol = T::lit(1e-9) * scale.max(T::lit(f64::MIN_POSITIVE));
                        if shifts.iter().enumerate().any(|(j, &s)| j != best && (s - tmin).abs() <= tie_tol) {
                            tie = true;
                        }
                        delta = node.children[best].block.matrix() * &delta;
                        path.push(best);
                        node = &node.children[best].node;
                    }
                    paths.push(path);
                }
            }
        }
        let selection = self
            .selection_index(&paths)
            .ok_or_else(|| SensError::Inadmissible("membership path has no selection".into()))?;
        Ok(Membership { selection, paths, tie })
    }

    /// `Dφ(t, x; dir)`: the image of `dir` under the active selection.
    pub fn apply(&self, dir: &DVector<T>) -> Result<DVector<T>, SensError> {
        let m = self.membership(dir)?;
        Ok(self.selections[m.selection].apply(dir))
    }

    /// Linear functional whose sign decides the ordering of children `a` and
    /// `b` at event `site`, as a function of the initial direction; earlier
    /// events follow the membership of `seed`. Its null space is the region
    /// boundary.
    pub fn ordering_functional(&self, site: usize, a: usize, b: usize, seed: &DVector<T>) -> Result<DVector<T>, SensError> {
        let seed_paths = self.membership(seed)?.paths;
        let n = self.dir_len();
        let mut prop = DMatrix::identity(n, n);
        let mut s = 0;
        for piece in &self.pieces {
            match piece {
                Piece::Segment(seg) => prop = seg.matrix() * prop,
                Piece::Site { tree, .. } => {
                    if s == site {
                        let ga = &tree.children[a].block.tau_grad;
                        let gb = &tree.children[b].block.tau_grad;
                        let diff = ga - gb;
                        let mut row = DVector::zeros(n);
                        row.rows_mut(1, n - 1).copy_from(&diff);
                        return Ok(prop.transpose() * row);
                    }
                    for blk in tree.blocks(&seed_paths[s]) {
                        prop = blk.matrix() * prop;
                    }
                    s += 1;
                }
            }
        }
        Err(SensError::Dimension(format!("no event with index {site}")))
    }

    /// Projects `seed` onto the boundary between children `a` and `b` of
    /// event `site`.
    pub fn boundary_direction(&self, site: usize, a: usize, b: usize, seed: &DVector<T>) -> Result<DVector<T>, SensError> {
        let l = self.ordering_functional(site, a, b, seed)?;
        let ll = l.dot(&l);
        if ll == T::zero() {
            return Ok(seed.clone());
        }
        Ok(seed - &l * (l.dot(seed) / ll))
    }

    /// Selection whose image is closest to `target` (e.g. a finite
    /// difference), with the distance.
    pub fn closest_selection(&self, dir: &DVector<T>, target: &DVector<T>) -> (usize, T) {
        self.selections
            .iter()
            .enumerate()
            .map(|(k, s)| (k, (s.apply(dir) - target).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .expect("at least one selection")
    }
}

fn timeline<T: Real>(traj: &HybridTrajectory<T>) -> Vec<(bool, usize)> {
    // (is_event, index) in time order; an event precedes a segment starting
    // at its time.
    let (segs, evs) = (&traj.segments, &traj.events);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(segs.len() + evs.len());
    while i < segs.len() || j < evs.len() {
        if j < evs.len() && (i == segs.len() || evs[j].t <= segs[i].t_start) {
            out.push((true, j));
            j += 1;
        } else {
            out.push((false, i));
            i += 1;
        }
    }
    // Left continuity: an event at the very end does not act on φ(t).
    while matches!(out.last(), Some((true, _))) {
        out.pop();
    }
    out
}

fn event_transitions<T: Real>(traj: &HybridTrajectory<T>, k: usize) -> Vec<Transition> {
    let e = &traj.events[k];
    let mut v: Vec<Transition> = e.activated.iter().map(Transition::Activate).collect();
    v.extend(e.deactivated.iter().map(Transition::Deactivate));
    v
}

struct Prepared<T: Real> {
    pieces: Vec<Piece<T>>,
    warnings: Vec<String>,
    orthogonality_violation: bool,
}

fn prepare<T: Real>(
    ctx: &Ctx<'_, T>,
    traj: &HybridTrajectory<T>,
    cfg: &SensitivityConfig<T>,
) -> Result<Prepared<T>, SensError> {
    if !traj.admissible() {
        return Err(SensError::Inadmissible(format!(
            "trajectory terminated with {} or contains inadmissible events",
            traj.termination.label()
        )));
    }
    if traj.segments.is_empty() {
        return Err(SensError::Inadmissible("trajectory has no segments".into()));
    }
    let sys = ctx.csys.with_input(&ctx.u);
    let mut warnings = Vec::new();
    let mut violation = false;
    let mut pieces = Vec::new();
    for (is_event, idx) in timeline(traj) {
        if is_event {
            let ev = &traj.events[idx];
            let pending = event_transitions(traj, idx);
            if pending.len() > cfg.k_max {
                return Err(SensError::CombinatorialLimit { t: ev.t.to_f64_lossy(), k: pending.len(), k_max: cfg.k_max });
            }
            if pending.len() > 1 {
                let (q, _) = split(&ev.pre);
                let involved = ev.mode_before.union(ev.constituents());
                let cons = ev.constituents();
                for i in involved.iter() {
                    for j in involved.iter().filter(|&j| j > i) {
                        if !(cons.contains(i) || cons.contains(j)) {
                            continue;
                        }
                        let o = orthogonality_check(&*sys, &q, i, j)?;
                        if o.abs() > cfg.tol.orth {
                            violation = true;
                            let msg = format!(
                                "constraints {i} and {j} are not orthogonal at t = {:e} (inner product {:e}); \
                                 the flow is generally discontinuous there",
                                ev.t, o
                            );
                            log::warn!("{msg}");
                            warnings.push(msg);
                        }
                    }
                }
            }
            let tree = build_site(ctx, ev.t, &ev.pre, ev.mode_before, &pending, &cfg.tol, &mut warnings)?;
            if tree.children.is_empty() {
                return Err(SensError::Inadmissible(format!("event at t = {:e} has no transversal transition", ev.t)));
            }
            pieces.push(Piece::Site { event: idx, tree });
        } else {
            let seg = &traj.segments[idx];
            let x_start = seg.x_start();
            let v = variational_impl(ctx, seg.mode, seg.t_start, &x_start, seg.duration(), cfg)?;
            pieces.push(Piece::Segment(v));
        }
    }
    Ok(Prepared { pieces, warnings, orthogonality_violation: violation })
}

fn cartesian(lists: &[Vec<Vec<usize>>]) -> Vec<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for l in lists {
        let mut next = Vec::with_capacity(out.len() * l.len());
        for prefix in &out {
            for p in l {
                let mut v = prefix.clone();
                v.push(p.clone());
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn assemble<T: Real>(
    pieces: &[Piece<T>],
    paths: &[Vec<usize>],
    d: usize,
    m: usize,
    warnings: &mut Vec<String>,
) -> SelectionDerivative<T> {
    let n2 = 2 * d;
    let last_seg = pieces.iter().rposition(|p| matches!(p, Piece::Segment(_))).expect("a segment");
    let mut blocks = Vec::new();
    let mut word = Vec::new();
    let mut transitions = Vec::new();
    let mut site = 0;
    let mut pending_mode: Option<ActiveSet> = None;
    for (k, piece) in pieces.iter().enumerate() {
        match piece {
            Piece::Segment(seg) => {
                if let Some(mode) = pending_mode.take() {
                    if mode != seg.mode {
                        warnings.push(format!(
                            "selection reaches mode {mode} but the trajectory continues in {}",
                            seg.mode
                        ));
                    }
                }
                word.push(seg.mode);
                let (label, matrix) = if k == last_seg {
                    (format!("final segment {} over {:e}", seg.mode, seg.duration), seg.final_matrix())
                } else {
                    (format!("segment {} over {:e}", seg.mode, seg.duration), seg.matrix())
                };
                blocks.push(Block { label, matrix });
            }
            Piece::Site { tree, .. } => {
                let bl = tree.blocks(&paths[site]);
                for (j, b) in bl.iter().enumerate() {
                    let what = match b.transition {
                        Transition::Activate(c) => format!("activate {c}"),
                        Transition::Deactivate(c) => format!("deactivate {c}"),
                    };
                    blocks.push(Block { label: format!("{what} at {:e}", b.t), matrix: b.matrix() });
                    transitions.push(b.transition);
                    if j + 1 < bl.len() {
                        word.push(b.mode_after);
                    } else {
                        pending_mode = Some(b.mode_after);
                    }
                }
                site += 1;
            }
        }
    }
    let mut it = blocks.iter().rev();
    let mut full = it.next().unwrap().matrix.clone();
    for b in it {
        full = full * &b.matrix;
    }
    SelectionDerivative {
        word,
        eta: transitions.iter().map(|t| t.constraint()).collect(),
        transitions,
        paths: paths.to_vec(),
        time_jac: full.view((0, 0), (n2, 1)).column(0).into_owned(),
        state_jac: full.view((0, 1), (n2, n2)).into_owned(),
        input_jac: full.view((0, 1 + n2), (n2, m)).into_owned(),
        full,
        blocks,
    }
}

/// Lists the selections of `traj`: every combination of admissible
/// orderings at its events.
pub fn enumerate_selections<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    traj: &HybridTrajectory<T>,
    cfg: &SensitivityConfig<T>,
) -> Result<Enumeration, SensError> {
    let ctx = Ctx::new(csys, u, cfg.reset)?;
    let mut warnings = Vec::new();
    let mut sites = Vec::new();
    for (is_event, idx) in timeline(traj) {
        if is_event {
            let ev = &traj.events[idx];
            let pending = event_transitions(traj, idx);
            if pending.len() > cfg.k_max {
                return Err(SensError::CombinatorialLimit { t: ev.t.to_f64_lossy(), k: pending.len(), k_max: cfg.k_max });
            }
            sites.push(build_site(&ctx, ev.t, &ev.pre, ev.mode_before, &pending, &cfg.tol, &mut warnings)?);
        }
    }
    let lists: Vec<Vec<Vec<usize>>> = sites.iter().map(|s| s.paths()).collect();
    let mut orderings = Vec::new();
    let mut words = Vec::new();
    for combo in cartesian(&lists) {
        let mut ord = Vec::new();
        let mut word = Vec::new();
        let mut site = 0;
        for (is_event, idx) in timeline(traj) {
            if is_event {
                let bl = sites[site].blocks(&combo[site]);
                ord.push(bl.iter().map(|b| b.transition).collect::<Vec<_>>());
                for b in bl.iter().take(bl.len().saturating_sub(1)) {
                    word.push(b.mode_after);
                }
                site += 1;
            } else {
                word.push(traj.segments[idx].mode);
            }
        }
        orderings.push(ord);
        words.push(word);
    }
    Ok(Enumeration { orderings, words, realized_word: traj.word() })
}

/// Selection Jacobian for one combination of child-index paths (one per
/// event, as in [`SiteNode::paths`]).
pub fn selection_jacobian<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    traj: &HybridTrajectory<T>,
    paths: &[Vec<usize>],
    cfg: &SensitivityConfig<T>,
) -> Result<SelectionDerivative<T>, SensError> {
    let ctx = Ctx::new(csys, u, cfg.reset)?;
    let mut prep = prepare(&ctx, traj, cfg)?;
    let n_sites = prep.pieces.iter().filter(|p| matches!(p, Piece::Site { .. })).count();
    if paths.len() != n_sites {
        return Err(SensError::Dimension(format!("{} paths given for {n_sites} events", paths.len())));
    }
    Ok(assemble(&prep.pieces, paths, ctx.d, ctx.m, &mut prep.warnings))
}

/// B-derivative of the flow of a controlled system at the start of `traj`
/// (simulated at input `u`).
pub fn b_derivative_controlled<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    traj: &HybridTrajectory<T>,
    cfg: &SensitivityConfig<T>,
) -> Result<BDerivative<T>, SensError> {
    let ctx = Ctx::new(csys, u, cfg.reset)?;
    let Prepared { pieces, mut warnings, orthogonality_violation } = prepare(&ctx, traj, cfg)?;
    let lists: Vec<Vec<Vec<usize>>> = pieces
        .iter()
        .filter_map(|p| match p {
            Piece::Site { tree, .. } => Some(tree.paths()),
            Piece::Segment(_) => None,
        })
        .collect();
    let selections: Vec<SelectionDerivative<T>> =
        cartesian(&lists).iter().map(|paths| assemble(&pieces, paths, ctx.d, ctx.m, &mut warnings)).collect();
    warnings.sort();
    warnings.dedup();
    Ok(BDerivative {
        t0: traj.t0,
        t_end: traj.t_end(),
        x0: traj.initial.x(),
        u: u.clone(),
        dof: ctx.d,
        n_inputs: ctx.m,
        selections,
        realized_word: traj.word(),
        orthogonality_violation,
        warnings,
        pieces,
    })
}

/// B-derivative of an autonomous system's flow.
pub fn b_derivative<T: Real>(
    sys: &dyn MechSystem<T>,
    traj: &HybridTrajectory<T>,
    cfg: &SensitivityConfig<T>,
) -> Result<BDerivative<T>, SensError> {
    b_derivative_controlled(&Autonomous(sys), &DVector::zeros(0), traj, cfg)
}

/// One-sided difference quotient `(φ(t + αδt, x + αδx; u + αδu) - φ(t, x; u)) / α`
/// computed by simulation. `dir` has layout `(δt, δx, δu)`.
pub fn finite_difference_direction<T: Real>(
    csys: &dyn ControlledSystem<T>,
    u: &DVector<T>,
    x0: &State<T>,
    cfg: &SimConfig<T>,
    dir: &DVector<T>,
    alpha: T,
) -> Result<DVector<T>, SensError> {
    let n2 = x0.x().len();
    let base = {
        let sys = csys.with_input(u);
        flow(&*sys, x0, cfg)?
    };
    let du = dir.rows(1 + n2, u.len()).into_owned();
    let up = u + &du * alpha;
    let sys = csys.with_input(&up);
    let xp = x0.x() + dir.rows(1, n2) * alpha;
    let start = State::from_x(x0.t, &xp, x0.mode);
    let pert = flow(&*sys, &start, &cfg.clone().with_t_final(cfg.t_final + dir[0] * alpha))?;
    if !base.termination.is_regular() || !pert.termination.is_regular() {
        return Err(SensError::Inadmissible(format!(
            "difference quotient needs regular runs, got {} and {}",
            base.termination.label(),
            pert.termination.label()
        )));
    }
    Ok((pert.final_state.x() - base.final_state.x()) / alpha)
}
