//! Event-driven hybrid integration.
//!
//! Within a contact mode the smooth dynamics are integrated with
//! [`Dopri5`](crate::integrate::Dopri5). On every accepted step the dense
//! output is sampled to watch `a_i` for inactive constraints (activation) and
//! `λ_i` for active ones (deactivation). Crossings are localized by bisection,
//! nearly simultaneous crossings are merged, the velocity is reset and the new
//! active set is settled by [`update_active_set`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{DenseStep, Dopri5, IntegrateError, OdeOptions};
use crate::model::{
    self, concat, contact_force, impact_map, mode_accel, mode_dynamics, split, vector_field, ActiveSet, MechSystem,
    ModelError, State, Tolerances,
};
use crate::numdiff;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Real"))]
pub struct SimConfig<T> {
    pub rel_tol: T,
    pub abs_tol: T,
    pub max_step: T,
    /// Width of the final bisection bracket around an event time.
    pub event_tol: T,
    pub zeno_max_events: usize,
    pub zeno_min_dt: T,
    /// Crossings closer than this are merged into one event.
    pub simultaneity_window: T,
    pub t_final: T,
    pub tol: Tolerances<T>,
    pub reset: ResetLaw,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        SimConfig {
            rel_tol: T::lit(1e-10),
            abs_tol: T::lit(1e-12),
            max_step: T::lit(1e-2),
            event_tol: T::lit(1e-12),
            zeno_max_events: 10_000,
            zeno_min_dt: T::lit(1e-12),
            simultaneity_window: T::lit(1e-9),
            t_final: T::one(),
            tol: Tolerances::default(),
            reset: ResetLaw::default(),
        }
    }
}

impl<T: Real> SimConfig<T> {
    pub fn with_t_final(mut self, t_final: T) -> Self {
        self.t_final = t_final;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let pos = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("max_step", self.max_step),
            ("event_tol", self.event_tol),
            ("zeno_min_dt", self.zeno_min_dt),
            ("simultaneity_window", self.simultaneity_window),
            ("tol.cons", self.tol.cons),
            ("tol.orth", self.tol.orth),
            ("tol.graze", self.tol.graze),
            ("tol.force", self.tol.force),
        ];
        for (name, v) in pos {
            if !(v > T::zero()) {
                return Err(SimError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.zeno_max_events == 0 {
            return Err(SimError::InvalidConfig("zeno_max_events must be positive".into()));
        }
        if self.simultaneity_window < self.event_tol {
            return Err(SimError::InvalidConfig("simultaneity_window must be >= event_tol".into()));
        }
        Ok(())
    }

    pub(crate) fn ode_options(&self) -> OdeOptions<T> {
        OdeOptions { rel_tol: self.rel_tol, abs_tol: self.abs_tol, max_step: self.max_step, ..OdeOptions::default() }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid initial state: {0}")]
    InvalidInitial(ModelError),
    #[error("no sign change of the event function on [{a:e}, {b:e}]")]
    NoSignChange { a: f64, b: f64 },
    #[error("active set did not settle within {0} iterations")]
    Unsettled(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

/// Sign test at an activation (`Da_i q̇⁻ < -tol.graze`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationVerdict<T> {
    pub constraint: usize,
    pub velocity: T,
    pub admissible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeactivationType {
    /// Separation velocity `Da_i q̇⁺` positive.
    Velocity,
    /// Separation acceleration positive with zero velocity.
    Acceleration,
    /// Contact force decreasing through zero.
    ForceRate,
    /// None of the tests passed.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeactivationVerdict<T> {
    pub constraint: usize,
    pub kind: DeactivationType,
    pub velocity: T,
    pub acceleration: T,
    pub force_rate: Option<T>,
    pub admissible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Activation,
    Deactivation,
}

/// A reset instant. `pre` is the left limit of the state (the state *at*
/// `t`), `post` the state after the velocity reset.
#[derive(Clone, Debug, PartialEq)]
pub struct Event<T: Real> {
    pub t: T,
    pub mode_before: ActiveSet,
    pub mode_after: ActiveSet,
    /// Constraints whose `a_i` reached zero.
    pub activated: ActiveSet,
    /// Active constraints whose force `λ_i` decreased through zero.
    pub deactivated: ActiveSet,
    /// Constraints dropped at the reset instant because they separate
    /// immediately (velocity or acceleration test).
    pub released: ActiveSet,
    pub activation_verdicts: Vec<ActivationVerdict<T>>,
    pub deactivation_verdicts: Vec<DeactivationVerdict<T>>,
    pub admissible: bool,
    pub pre: DVector<T>,
    pub post: DVector<T>,
}

impl<T: Real> Event<T> {
    pub fn kind(&self) -> EventKind {
        if self.activated.is_empty() {
            EventKind::Deactivation
        } else {
            EventKind::Activation
        }
    }

    /// All constraints involved in the event.
    pub fn constraints(&self) -> ActiveSet {
        self.activated.union(self.deactivated).union(self.released)
    }

    /// Constituent transitions that need an ordering when the event is
    /// simultaneous: activations and force-rate deactivations.
    pub fn constituents(&self) -> ActiveSet {
        self.activated.union(self.deactivated)
    }

    pub fn is_simultaneous(&self) -> bool {
        self.constituents().len() > 1
    }
}

/// Dense solution within one contact mode over `[t_start, t_end]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T: Real> {
    pub mode: ActiveSet,
    pub t_start: T,
    pub t_end: T,
    pub steps: Vec<DenseStep<T>>,
}

impl<T: Real> Segment<T> {
    pub fn x_start(&self) -> DVector<T> {
        self.steps.first().map(|s| s.y0.clone()).expect("segment has at least one step")
    }

    pub fn x_end(&self) -> DVector<T> {
        self.steps.last().map(|s| s.y1.clone()).expect("segment has at least one step")
    }

    pub fn duration(&self) -> T {
        self.t_end - self.t_start
    }

    /// Interpolated state; `t` is clamped to the segment.
    pub fn eval(&self, t: T) -> DVector<T> {
        let t = t.max(self.t_start).min(self.t_end);
        let k = self.steps.partition_point(|s| s.t1 < t);
        self.steps[k.min(self.steps.len() - 1)].eval(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination<T> {
    TimeReached,
    /// The stop function crossed zero.
    Stopped { t: T },
    ZenoGuard { constraint: usize, t: T, events: usize, accumulation: Option<T> },
    Grazing { constraint: usize, t: T, detail: String },
    ModelError { t: T, message: String },
}

impl<T: Real> Termination<T> {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::TimeReached => "time_reached",
            Termination::Stopped { .. } => "stopped",
            Termination::ZenoGuard { .. } => "zeno_guard",
            Termination::Grazing { .. } => "grazing",
            Termination::ModelError { .. } => "model_error",
        }
    }

    pub fn is_regular(&self) -> bool {
        matches!(self, Termination::TimeReached | Termination::Stopped { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrajectory<T: Real> {
    pub t0: T,
    pub initial: State<T>,
    pub segments: Vec<Segment<T>>,
    pub events: Vec<Event<T>>,
    pub termination: Termination<T>,
    /// State where integration stopped (left limit if it stopped at an event).
    pub final_state: State<T>,
}

impl<T: Real> HybridTrajectory<T> {
    /// Modes visited, one entry per segment. A bounce that leaves the mode
    /// unchanged still starts a new segment, so consecutive entries may repeat.
    pub fn word(&self) -> Vec<ActiveSet> {
        self.segments.iter().map(|s| s.mode).collect()
    }

    /// Constraint changed by each event, or `None` for events involving
    /// several constraints.
    pub fn eta(&self) -> Vec<Option<usize>> {
        self.events
            .iter()
            .map(|e| {
                let c = e.constraints();
                (c.len() == 1).then(|| c.iter().next().unwrap())
            })
            .collect()
    }

    pub fn admissible(&self) -> bool {
        self.termination.is_regular() && self.events.iter().all(|e| e.admissible)
    }

    pub fn t_end(&self) -> T {
        self.final_state.t
    }

    /// Left-continuous state at `t`.
    pub fn state_at(&self, t: T) -> Option<DVector<T>> {
        if self.segments.is_empty() {
            return (t == self.t0).then(|| self.initial.x());
        }
        let k = self.segments.partition_point(|s| s.t_end < t);
        self.segments.get(k).map(|s| s.eval(t))
    }

    pub fn mode_at(&self, t: T) -> Option<ActiveSet> {
        let k = self.segments.partition_point(|s| s.t_end < t);
        self.segments.get(k).map(|s| s.mode)
    }
}

/// Scalar function of `(t, x, mode)` whose downward zero crossing stops the
/// simulation.
pub type StopFn<'a, T> = &'a (dyn Fn(T, &DVector<T>, ActiveSet) -> T + Sync);

/// Bisection for a downward crossing of `f` on `[a, b]` (`f(a) > 0 ≥ f(b)`).
/// Returns the right end of a bracket of width at most `tol`, so the
/// returned time is on or past the crossing.
pub fn locate_event<T: Real>(f: impl Fn(T) -> T, a: T, b: T, tol: T) -> Result<T, SimError> {
    let (mut lo, mut hi) = (a, b);
    let (fa, fb) = (f(lo), f(hi));
    if !(fa > T::zero() && fb <= T::zero()) {
        return Err(SimError::NoSignChange { a: a.to_f64_lossy(), b: b.to_f64_lossy() });
    }
    let two = T::lit(2.0);
    while (hi - lo).abs() > tol {
        let mid = lo + (hi - lo) / two;
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Bisection for a sign change of a rate function (`r(a)` and `r(b)` of
/// opposite sign). Returns the midpoint of the final bracket.
fn locate_extremum<T: Real>(r: impl Fn(T) -> T, a: T, b: T, tol: T) -> T {
    let (mut lo, mut hi) = (a, b);
    let ra = r(lo);
    let two = T::lit(2.0);
    while (hi - lo).abs() > tol {
        let mid = lo + (hi - lo) / two;
        if mid == lo || mid == hi {
            break;
        }
        if (r(mid) > T::zero()) == (ra > T::zero()) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo + (hi - lo) / two
}

/// Admissibility of activating `set` at the pre-impact state.
pub fn classify_activation<T: Real>(
    sys: &dyn MechSystem<T>,
    pre: &State<T>,
    set: ActiveSet,
    tol: &Tolerances<T>,
) -> Vec<ActivationVerdict<T>> {
    let da = sys.constraint_jac(&pre.q);
    set.iter()
        .map(|i| {
            let v = da.row(i).transpose().dot(&pre.qd);
            ActivationVerdict { constraint: i, velocity: v, admissible: v < -tol.graze }
        })
        .collect()
}

/// Admissibility of dropping `set` from `mode_pred` at `(q, q̇⁺)`.
///
/// Type (i): separation velocity `Da_i q̇⁺` or, when that vanishes, separation
/// acceleration `Da_i q̈ + q̇ᵀ D²a_i q̇` in the mode without `set`, exceeds
/// `tol.graze`. Type (ii): the rate of `λ_i` along the `mode_pred` vector
/// field is below `-tol.graze`.
pub fn classify_deactivation<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd_post: &DVector<T>,
    mode_pred: ActiveSet,
    set: ActiveSet,
    tol: &Tolerances<T>,
) -> Result<Vec<DeactivationVerdict<T>>, ModelError> {
    let da = sys.constraint_jac(q);
    let hess = sys.constraint_hess(q);
    let acc = mode_accel(sys, q, qd_post, mode_pred.difference(set))?;
    let x = concat(q, qd_post);
    let field = vector_field(sys, &x, mode_pred)?;
    let idx: Vec<usize> = mode_pred.to_vec();
    let mut out = Vec::new();
    for i in set.iter() {
        let row = da.row(i).transpose();
        let v = row.dot(qd_post);
        let a = row.dot(&acc) + (qd_post.transpose() * &hess[i] * qd_post)[(0, 0)];
        let (kind, rate) = if v > tol.graze {
            (DeactivationType::Velocity, None)
        } else if v.abs() <= tol.graze && a > tol.graze {
            (DeactivationType::Acceleration, None)
        } else if let Some(k) = idx.iter().position(|&j| j == i) {
            let rate = force_rate(sys, &x, &field, mode_pred, k);
            if rate < -tol.graze {
                (DeactivationType::ForceRate, Some(rate))
            } else {
                (DeactivationType::None, Some(rate))
            }
        } else {
            (DeactivationType::None, None)
        };
        out.push(DeactivationVerdict {
            constraint: i,
            kind,
            velocity: v,
            acceleration: a,
            force_rate: rate,
            admissible: kind != DeactivationType::None,
        });
    }
    Ok(out)
}

/// `d/dt λ_k` along the mode vector field, by central differences.
pub(crate) fn force_rate<T: Real>(
    sys: &dyn MechSystem<T>,
    x: &DVector<T>,
    field: &DVector<T>,
    mode: ActiveSet,
    k: usize,
) -> T {
    numdiff::directional(
        |y: &DVector<T>| {
            let (q, qd) = split(y);
            contact_force(sys, &q, &qd, mode).map(|l| l[k]).unwrap_or(T::lit(f64::NAN))
        },
        x,
        field,
    )
}

/// Result of [`update_active_set`].
#[derive(Clone, Debug, PartialEq)]
pub struct Settled<T: Real> {
    pub mode: ActiveSet,
    pub qd: DVector<T>,
    /// Constraints of the tentative set that were dropped.
    pub released: ActiveSet,
}

/// Which constraints the velocity reset projects over at an event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetLaw {
    /// `q̇ ← Δ_J q̇` over the whole post-event set `J = J_old ∪ activated`.
    #[default]
    ActiveSet,
    /// `q̇ ← Δ_A q̇` over the newly activated constraints `A` only. A
    /// constraint that was already active joins `A` only if the reset would
    /// otherwise drive the velocity into it.
    Impacted,
}

/// Constraints the reset projects over when `activated` switch on in mode
/// `j_old` with pre-event velocity `qd_pre`. Empty when nothing activated.
pub fn reset_set<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd_pre: &DVector<T>,
    j_old: ActiveSet,
    activated: ActiveSet,
    law: ResetLaw,
    tol: &Tolerances<T>,
) -> Result<ActiveSet, SimError> {
    if activated.is_empty() {
        return Ok(activated);
    }
    let tentative = j_old.union(activated);
    if law == ResetLaw::ActiveSet {
        return Ok(tentative);
    }
    let da = sys.constraint_jac(q);
    let mut set = activated;
    loop {
        let qd = impact_map(sys, q, qd_pre, set)?.0;
        let entering: ActiveSet =
            tentative.difference(set).iter().filter(|&i| da.row(i).transpose().dot(&qd) < -tol.graze).collect();
        if entering.is_empty() {
            return Ok(set);
        }
        set = set.union(entering);
    }
}

/// Resolves the active set after an event.
///
/// Starts from `J = J_old ∪ activated`, resets `q̇ ← Δ_S q̇` with `S` from
/// [`reset_set`] when something activated, then repeatedly drops
/// constraints that separate (positive normal velocity) or pull (most
/// negative `λ_i < -tol.force`) until nothing changes.
pub fn update_active_set<T: Real>(
    sys: &dyn MechSystem<T>,
    q: &DVector<T>,
    qd_pre: &DVector<T>,
    j_old: ActiveSet,
    activated: ActiveSet,
    law: ResetLaw,
    tol: &Tolerances<T>,
) -> Result<Settled<T>, SimError> {
    let tentative = j_old.union(activated);
    let set = reset_set(sys, q, qd_pre, j_old, activated, law, tol)?;
    let qd = if set.is_empty() { qd_pre.clone() } else { impact_map(sys, q, qd_pre, set)?.0 };
    let da = sys.constraint_jac(q);
    let mut mode = tentative;
    let limit = sys.n_constraints() + 1;
    for _ in 0..=limit {
        let separating: ActiveSet = mode.iter().filter(|&i| da.row(i).transpose().dot(&qd) > tol.graze).collect();
        if !separating.is_empty() {
            mode = mode.difference(separating);
            continue;
        }
        let lam = contact_force(sys, q, &qd, mode)?;
        let worst = mode.iter().zip(lam.iter()).filter(|(_, &l)| l < -tol.force).min_by(|a, b| {
            a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal)
        });
        match worst {
            Some((i, _)) => mode = mode.without(i),
            None => return Ok(Settled { mode, qd, released: tentative.difference(mode) }),
        }
    }
    Err(SimError::Unsettled(limit))
}

/// Per-sample values of the monitored functions.
struct Probe<T: Real> {
    t: T,
    a: DVector<T>,
    rate: DVector<T>,
    lambda: DVector<T>,
    stop: Option<T>,
}

fn probe<T: Real>(
    sys: &dyn MechSystem<T>,
    mode: ActiveSet,
    t: T,
    x: DVector<T>,
    stop: Option<StopFn<'_, T>>,
) -> Result<Probe<T>, ModelError> {
    let (q, qd) = split(&x);
    let a = sys.constraints(&q);
    let rate = sys.constraint_jac(&q) * &qd;
    let lambda = if mode.is_empty() { DVector::zeros(0) } else { mode_dynamics(sys, &q, &qd, mode)?.lambda };
    let stop = stop.map(|s| s(t, &x, mode));
    Ok(Probe { t, a, rate, lambda, stop })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Watch {
    Activation(usize),
    Deactivation(usize, usize),
    Stop,
}

struct Crossing<T> {
    watch: Watch,
    t: T,
}

enum StepOutcome<T> {
    Continue,
    Crossings(Vec<Crossing<T>>),
    Graze { constraint: usize, t: T, detail: String },
}

struct ModeWatch {
    armed_a: Vec<bool>,
    armed_l: Vec<bool>,
    armed_stop: bool,
}

/// Simulates from `x0` until `cfg.t_final`.
pub fn flow<T: Real>(sys: &dyn MechSystem<T>, x0: &State<T>, cfg: &SimConfig<T>) -> Result<HybridTrajectory<T>, SimError> {
    flow_until(sys, x0, cfg, None)
}

/// Like [`flow`], additionally stopping at the first downward zero crossing
/// of `stop` (which must first become positive after `x0.t`).
pub fn flow_until<T: Real>(
    sys: &dyn MechSystem<T>,
    x0: &State<T>,
    cfg: &SimConfig<T>,
    stop: Option<StopFn<'_, T>>,
) -> Result<HybridTrajectory<T>, SimError> {
    cfg.validate()?;
    model::check_system(sys, &x0.q, &x0.qd, &cfg.tol).map_err(SimError::InvalidInitial)?;
    x0.check(sys, &cfg.tol).map_err(SimError::InvalidInitial)?;
    if x0.t > cfg.t_final {
        return Err(SimError::InvalidConfig(format!("t_final {} precedes initial time {}", cfg.t_final, x0.t)));
    }
    let mut sim = Simulator {
        sys,
        cfg,
        stop,
        segments: Vec::new(),
        events: Vec::new(),
        small_gaps: 0,
        h_hint: None,
    };
    let (termination, final_state) = sim.run(x0.clone());
    Ok(HybridTrajectory {
        t0: x0.t,
        initial: x0.clone(),
        segments: sim.segments,
        events: sim.events,
        termination,
        final_state,
    })
}

struct Simulator<'a, T: Real> {
    sys: &'a dyn MechSystem<T>,
    cfg: &'a SimConfig<T>,
    stop: Option<StopFn<'a, T>>,
    segments: Vec<Segment<T>>,
    events: Vec<Event<T>>,
    small_gaps: usize,
    h_hint: Option<T>,
}

enum SegmentEnd<T: Real> {
    Done(Termination<T>, State<T>),
    Event { t: T, pre: DVector<T>, activated: ActiveSet, deactivated: ActiveSet },
}

impl<'a, T: Real> Simulator<'a, T> {
    fn model_err(t: T, e: impl std::fmt::Display) -> Termination<T> {
        Termination::ModelError { t, message: e.to_string() }
    }

    fn run(&mut self, x0: State<T>) -> (Termination<T>, State<T>) {
        let tol = self.cfg.tol;
        let mut state = x0;

        // Constraints touching at the start with approaching velocity impact
        // immediately.
        let rate = self.sys.constraint_jac(&state.q) * &state.qd;
        let a0 = self.sys.constraints(&state.q);
        let initial: ActiveSet = (0..self.sys.n_constraints())
            .filter(|&i| !state.mode.contains(i) && a0[i].abs() <= tol.cons && rate[i] < -tol.graze)
            .collect();
        if !initial.is_empty() {
            match self.process_event(&state, state.t, state.x(), initial, ActiveSet::empty()) {
                Ok(next) => state = next,
                Err(term) => return (term, state),
            }
        }

        loop {
            if state.t >= self.cfg.t_final {
                return (Termination::TimeReached, state);
            }
            match self.integrate_mode(&state) {
                SegmentEnd::Done(term, last) => return (term, last),
                SegmentEnd::Event { t, pre, activated, deactivated } => {
                    match self.process_event(&state, t, pre.clone(), activated, deactivated) {
                        Ok(next) => state = next,
                        Err(term) => return (term, State::from_x(t, &pre, state.mode)),
                    }
                }
            }
        }
    }

    /// Applies the reset at `t` and records the event. Returns the post-event
    /// state or the termination reason.
    fn process_event(
        &mut self,
        cur: &State<T>,
        t: T,
        pre: DVector<T>,
        activated: ActiveSet,
        deactivated: ActiveSet,
    ) -> Result<State<T>, Termination<T>> {
        let tol = self.cfg.tol;
        let pre_state = State::from_x(t, &pre, cur.mode);
        let act = classify_activation(self.sys, &pre_state, activated, &tol);
        if let Some(bad) = act.iter().find(|v| !v.admissible) {
            return Err(self.grazing_or_zeno(
                bad.constraint,
                t,
                format!("constraint {} reached with normal velocity {:e}", bad.constraint, bad.velocity),
            ));
        }
        let mut deact = Vec::new();
        if !deactivated.is_empty() {
            deact = classify_deactivation(self.sys, &pre_state.q, &pre_state.qd, cur.mode, deactivated, &tol)
                .map_err(|e| Self::model_err(t, e))?;
            if let Some(bad) = deact.iter().find(|v| !v.admissible) {
                return Err(Termination::Grazing {
                    constraint: bad.constraint,
                    t,
                    detail: format!(
                        "contact force of constraint {} vanished tangentially (rate {:e})",
                        bad.constraint,
                        bad.force_rate.unwrap_or(T::zero())
                    ),
                });
            }
        }
        let settled = update_active_set(
            self.sys,
            &pre_state.q,
            &pre_state.qd,
            cur.mode.difference(deactivated),
            activated,
            self.cfg.reset,
            &tol,
        )
        .map_err(|e| Self::model_err(t, e))?;
        let gamma = self.sys.restitution(&pre_state.q, &pre_state.qd);
        if let Some(i) = activated.intersection(settled.mode).iter().next().filter(|_| gamma > T::zero()) {
            // A restitutive impact whose rebound is too slow to resolve: the
            // bounce sequence is accumulating.
            return Err(self.grazing_or_zeno(
                i,
                t,
                format!("rebound of constraint {i} below the transversality tolerance"),
            ));
        }
        let released = settled.released;
        if !released.is_empty() {
            let rel = classify_deactivation(
                self.sys,
                &pre_state.q,
                &settled.qd,
                cur.mode.difference(deactivated).union(activated),
                released,
                &tol,
            )
            .map_err(|e| Self::model_err(t, e))?;
            deact.extend(rel);
        }
        let post = concat(&pre_state.q, &settled.qd);
        if let Some(prev) = self.events.last() {
            if t - prev.t < self.cfg.zeno_min_dt {
                self.small_gaps += 1;
            } else {
                self.small_gaps = 0;
            }
        }
        let constraint = activated.union(deactivated).iter().next().unwrap_or(0);
        self.events.push(Event {
            t,
            mode_before: cur.mode,
            mode_after: settled.mode,
            activated,
            deactivated,
            released,
            admissible: true,
            activation_verdicts: act,
            deactivation_verdicts: deact,
            pre,
            post: post.clone(),
        });
        log::debug!("event at t = {t:e}: {} -> {}", cur.mode, settled.mode);
        if self.events.len() > self.cfg.zeno_max_events || self.small_gaps >= 50 {
            return Err(Termination::ZenoGuard {
                constraint,
                t,
                events: self.events.len(),
                accumulation: self.accumulation_estimate(),
            });
        }
        Ok(State::from_x(t, &post, settled.mode))
    }

    /// Geometric extrapolation of the event times, available when the last
    /// inter-event gaps shrink at a steady ratio.
    fn accumulation_estimate(&self) -> Option<T> {
        let n = self.events.len();
        if n < 5 {
            return None;
        }
        let gaps: Vec<T> = self.events[n - 5..].windows(2).map(|w| w[1].t - w[0].t).collect();
        let ratios: Vec<T> = gaps.windows(2).map(|w| w[1] / w[0]).collect();
        let r = *ratios.last().unwrap();
        let steady = ratios.iter().all(|&q| q > T::zero() && q < T::one() && (q - r).abs() <= T::lit(0.05) * r);
        steady.then(|| self.events[n - 1].t + *gaps.last().unwrap() * r / (T::one() - r))
    }

    /// An inadmissible touchdown that ends a run of geometrically shrinking
    /// gaps is the numerical face of a Zeno accumulation.
    fn grazing_or_zeno(&self, constraint: usize, t: T, detail: String) -> Termination<T> {
        let same = self.events.iter().rev().take(4).all(|e| e.activated.contains(constraint));
        match self.accumulation_estimate() {
            Some(acc) if same => Termination::ZenoGuard { constraint, t, events: self.events.len(), accumulation: Some(acc) },
            _ => Termination::Grazing { constraint, t, detail },
        }
    }

    fn integrate_mode(&mut self, start: &State<T>) -> SegmentEnd<T> {
        let sys = self.sys;
        let cfg = self.cfg;
        let tol = cfg.tol;
        let mode = start.mode;
        let n = sys.n_constraints();
        let t0 = start.t;
        let rhs = |_t: T, x: &DVector<T>| vector_field(sys, x, mode);
        let mut opts = cfg.ode_options();
        opts.h_init = self.h_hint;
        let mut stepper = match Dopri5::new(rhs, t0, start.x(), cfg.t_final, opts) {
            Ok(s) => s,
            Err(e) => return SegmentEnd::Done(Self::model_err(t0, e), start.clone()),
        };
        let mut prev = match probe(sys, mode, t0, start.x(), self.stop) {
            Ok(p) => p,
            Err(e) => return SegmentEnd::Done(Self::model_err(t0, e), start.clone()),
        };
        let idx: Vec<usize> = mode.to_vec();
        let mut watch = ModeWatch {
            armed_a: (0..n).map(|i| !mode.contains(i) && (prev.a[i] > tol.cons || prev.rate[i] > tol.graze)).collect(),
            armed_l: prev.lambda.iter().map(|&l| l > tol.force).collect(),
            armed_stop: false,
        };
        let mut steps: Vec<DenseStep<T>> = Vec::new();
        loop {
            let step = match stepper.step(cfg.t_final) {
                Ok(Some(s)) => s,
                Ok(None) => {
                    self.push_segment(mode, t0, steps);
                    return SegmentEnd::Done(Termination::TimeReached, State::from_x(stepper.t(), stepper.y(), mode));
                }
                Err(e) => {
                    let last = State::from_x(stepper.t(), stepper.y(), mode);
                    self.push_segment(mode, t0, steps);
                    return SegmentEnd::Done(Self::model_err(last.t, e), last);
                }
            };
            self.h_hint = Some(stepper.h().abs());
            match self.scan_step(&step, mode, &idx, &mut prev, &mut watch) {
                Err(e) => {
                    steps.push(step.clone());
                    self.push_segment(mode, t0, steps);
                    return SegmentEnd::Done(Self::model_err(step.t1, e), State::from_x(step.t1, &step.y1, mode));
                }
                Ok(StepOutcome::Continue) => {
                    // Drift monitor on the active constraints.
                    let (q, _) = split(&step.y1);
                    let a = sys.constraints(&q);
                    if let Some(i) = mode.iter().find(|&i| a[i].abs() > T::lit(100.0) * tol.cons) {
                        steps.push(step.clone());
                        self.push_segment(mode, t0, steps);
                        return SegmentEnd::Done(
                            Termination::ModelError {
                                t: step.t1,
                                message: format!("active constraint {i} drifted to {:e}", a[i]),
                            },
                            State::from_x(step.t1, &step.y1, mode),
                        );
                    }
                    steps.push(step);
                }
                Ok(StepOutcome::Graze { constraint, t, detail }) => {
                    let cut = step.truncated(t);
                    let x = cut.y1.clone();
                    steps.push(cut);
                    self.push_segment(mode, t0, steps);
                    return SegmentEnd::Done(self.grazing_or_zeno(constraint, t, detail), State::from_x(t, &x, mode));
                }
                Ok(StepOutcome::Crossings(crossings)) => {
                    let t_ev = crossings.iter().map(|c| c.t).fold(T::max_value().unwrap(), |a, b| a.min(b));
                    let cut = step.truncated(t_ev);
                    let pre = cut.y1.clone();
                    if cut.t1 > cut.t0 || steps.is_empty() {
                        steps.push(cut);
                    }
                    self.push_segment(mode, t0, steps);
                    if crossings.iter().any(|c| c.watch == Watch::Stop) {
                        return SegmentEnd::Done(Termination::Stopped { t: t_ev }, State::from_x(t_ev, &pre, mode));
                    }
                    let mut activated = ActiveSet::empty();
                    let mut deactivated = ActiveSet::empty();
                    for c in &crossings {
                        match c.watch {
                            Watch::Activation(i) => activated = activated.with(i),
                            Watch::Deactivation(i, _) => deactivated = deactivated.with(i),
                            Watch::Stop => {}
                        }
                    }
                    return SegmentEnd::Event { t: t_ev, pre, activated, deactivated };
                }
            }
        }
    }

    fn push_segment(&mut self, mode: ActiveSet, t0: T, steps: Vec<DenseStep<T>>) {
        if let Some(last) = steps.last() {
            let t_end = last.t1;
            self.segments.push(Segment { mode, t_start: t0, t_end, steps });
        }
    }

    /// Depth `v² / 2ä` the trajectory would reach below `a_i = 0` if `a_i`
    /// is convex at the crossing, `None` otherwise.
    fn dip_depth(&self, step: &DenseStep<T>, mode: ActiveSet, i: usize, t: T) -> Result<Option<T>, SimError> {
        let (q, qd) = split(&step.eval(t));
        let row = self.sys.constraint_jac(&q).row(i).transpose();
        let acc = mode_accel(self.sys, &q, &qd, mode)?;
        let curv = (qd.transpose() * &self.sys.constraint_hess(&q)[i] * &qd)[(0, 0)];
        let v = row.dot(&qd);
        let a2 = row.dot(&acc) + curv;
        Ok((a2 > T::zero()).then(|| v * v / (a2 + a2)))
    }

    /// Samples one accepted step and reports crossings of the watched
    /// functions, merged within the simultaneity window.
    fn scan_step(
        &self,
        step: &DenseStep<T>,
        mode: ActiveSet,
        idx: &[usize],
        prev: &mut Probe<T>,
        watch: &mut ModeWatch,
    ) -> Result<StepOutcome<T>, SimError> {
        const SAMPLES: usize = 5;
        let sys = self.sys;
        let cfg = self.cfg;
        let tol = cfg.tol;
        let n = sys.n_constraints();
        let h = step.h();
        let stop = self.stop;
        let eval_probe = |t: T| probe(sys, mode, t, step.eval(t), stop);
        let a_at = |i: usize, t: T| {
            let (q, _) = split(&step.eval(t));
            sys.constraints(&q)[i]
        };
        let rate_at = |i: usize, t: T| {
            let (q, qd) = split(&step.eval(t));
            sys.constraint_jac(&q).row(i).transpose().dot(&qd)
        };
        let lam_at = |k: usize, t: T| {
            let (q, qd) = split(&step.eval(t));
            contact_force(sys, &q, &qd, mode).map(|l| l[k]).unwrap_or(T::lit(f64::NAN))
        };
        let stop_at = |t: T| stop.map(|s| s(t, &step.eval(t), mode)).unwrap_or(T::one());

        for k in 1..=SAMPLES {
            let t = if k == SAMPLES { step.t1 } else { step.t0 + h * T::from_usize(k).unwrap() / T::from_usize(SAMPLES).unwrap() };
            let cur = eval_probe(t)?;
            let (ta, tb) = (prev.t, cur.t);
            let mut found: Vec<Crossing<T>> = Vec::new();
            for i in 0..n {
                if mode.contains(i) {
                    continue;
                }
                let (ga, gb, ra, rb) = (prev.a[i], cur.a[i], prev.rate[i], cur.rate[i]);
                if watch.armed_a[i] && ga > T::zero() && gb <= T::zero() {
                    if ra < T::zero() && rb >= T::zero() {
                        // The minimum lies inside: a shallow dip is a tangency
                        // blurred by round-off, not a transversal impact.
                        let tm = locate_extremum(|t| rate_at(i, t), ta, tb, cfg.event_tol);
                        let gm = a_at(i, tm);
                        if gm >= -tol.cons {
                            return Ok(StepOutcome::Graze {
                                constraint: i,
                                t: tm,
                                detail: format!("constraint {i} touched tangentially (min a = {gm:e})"),
                            });
                        }
                    }
                    let te = locate_event(|t| a_at(i, t), ta, tb, cfg.event_tol)?;
                    if let Some(depth) = self.dip_depth(step, mode, i, te)? {
                        if depth <= tol.cons {
                            return Ok(StepOutcome::Graze {
                                constraint: i,
                                t: te,
                                detail: format!("constraint {i} touched tangentially (dip depth {depth:e})"),
                            });
                        }
                    }
                    found.push(Crossing { watch: Watch::Activation(i), t: te });
                } else if ra > tol.graze && rb < T::zero() && gb <= T::zero() {
                    // Left the surface and came back within one sample
                    // interval: split at the apex.
                    let tm = locate_extremum(|t| rate_at(i, t), ta, tb, cfg.event_tol);
                    if a_at(i, tm) > T::zero() {
                        let te = locate_event(|t| a_at(i, t), tm, tb, cfg.event_tol)?;
                        found.push(Crossing { watch: Watch::Activation(i), t: te });
                    }
                } else if watch.armed_a[i] && ga > T::zero() && gb > T::zero() && ra < T::zero() && rb >= T::zero() {
                    // Interior minimum: possible double crossing or tangency.
                    let tm = locate_extremum(|t| rate_at(i, t), ta, tb, cfg.event_tol);
                    let gm = a_at(i, tm);
                    if gm < -tol.cons {
                        let te = locate_event(|t| a_at(i, t), ta, tm, cfg.event_tol)?;
                        found.push(Crossing { watch: Watch::Activation(i), t: te });
                    } else if gm <= tol.cons {
                        return Ok(StepOutcome::Graze {
                            constraint: i,
                            t: tm,
                            detail: format!("constraint {i} approached tangentially (min a = {gm:e})"),
                        });
                    }
                }
                if !watch.armed_a[i] && gb < -tol.cons && found.iter().all(|c| c.watch != Watch::Activation(i)) {
                    return Ok(StepOutcome::Graze {
                        constraint: i,
                        t: tb,
                        detail: format!("constraint {i} penetrated without a transversal crossing (a = {gb:e})"),
                    });
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                let (la, lb) = (prev.lambda[k], cur.lambda[k]);
                if watch.armed_l[k] && la > T::zero() && lb <= T::zero() {
                    let te = locate_event(|t| lam_at(k, t), ta, tb, cfg.event_tol)?;
                    found.push(Crossing { watch: Watch::Deactivation(i, k), t: te });
                }
            }
            if let (Some(sa), Some(sb)) = (prev.stop, cur.stop) {
                if watch.armed_stop && sa > T::zero() && sb <= T::zero() {
                    let te = locate_event(stop_at, ta, tb, cfg.event_tol)?;
                    found.push(Crossing { watch: Watch::Stop, t: te });
                }
            }
            if !found.is_empty() {
                let first = found.iter().map(|c| c.t).fold(T::max_value().unwrap(), |a, b| a.min(b));
                let horizon = first + cfg.simultaneity_window;
                let mut merged: Vec<Crossing<T>> = found.into_iter().filter(|c| c.t <= horizon).collect();
                // Watched functions that had not crossed by the sample but do
                // within the window (possibly just past this step).
                for i in 0..n {
                    if mode.contains(i) || merged.iter().any(|c| c.watch == Watch::Activation(i)) {
                        continue;
                    }
                    if (watch.armed_a[i] || prev.rate[i] > tol.graze) && a_at(i, horizon) <= T::zero() && rate_at(i, first) < T::zero() {
                        merged.push(Crossing { watch: Watch::Activation(i), t: first });
                    }
                }
                for (k, &i) in idx.iter().enumerate() {
                    if watch.armed_l[k]
                        && !merged.iter().any(|c| c.watch == Watch::Deactivation(i, k))
                        && lam_at(k, horizon) <= T::zero()
                    {
                        merged.push(Crossing { watch: Watch::Deactivation(i, k), t: first });
                    }
                }
                for c in merged.iter_mut() {
                    c.t = c.t.max(first);
                }
                return Ok(StepOutcome::Crossings(merged));
            }
            for i in 0..n {
                if !mode.contains(i) && (cur.a[i] > tol.cons || cur.rate[i] > tol.graze) {
                    watch.armed_a[i] = true;
                }
            }
            for k in 0..idx.len() {
                if cur.lambda[k] > tol.force {
                    watch.armed_l[k] = true;
                }
            }
            if cur.stop.is_some_and(|s| s > T::zero()) {
                watch.armed_stop = true;
            }
            *prev = cur;
        }
        Ok(StepOutcome::Continue)
    }
}
