use nalgebra::{DMatrix, DVector};
use uniflow::analysis::{
    controllability_test, instability_eigenvector_test, iterate_growth, poincare_bderivative, poincare_map,
    refine_fixed_point, stability_contraction_test, ControllabilityVerdict, FixedPointOptions, PiecewiseLinear, PlMap,
    Section, StabilityVerdict,
};
use uniflow::model::{ActiveSet, ControlledSystem, MechSystem, State};
use uniflow::sim::{flow, SimConfig};
use uniflow::systems::{build_ball, build_trotter_toy, Ball, ForcedBall, TrotterParams};

fn ball_apex(h: f64) -> State<f64> {
    State::from_slices(0.0, &[h], &[0.0], ActiveSet::empty())
}

#[test]
fn ball_apex_map_closed_form() {
    let gamma = 0.5;
    let ball = build_ball(1.0, 1.0, gamma).unwrap();
    let sec = Section::apex(1, 0);
    let cfg = SimConfig::default().with_t_final(5.0);
    let r = poincare_map(&ball, &sec, &ball_apex(0.5), &cfg).unwrap();
    // Fall time 1, rebound at speed γ, rise time γ.
    assert!((r.period - 1.5).abs() < 1e-9, "{}", r.period);
    assert!((r.state.q[0] - gamma * gamma * 0.5).abs() < 1e-9);
    let pd = poincare_bderivative(&ball, &sec, &ball_apex(0.5), &cfg, 3).unwrap();
    assert_eq!(pd.selections.len(), 1);
    assert_eq!(pd.frame.shape(), (2, 1));
    assert!((pd.frame[(0, 0)] - 1.0).abs() < 1e-12);
    assert!((pd.selections[0][(0, 0)] - gamma * gamma).abs() < 1e-6, "{}", pd.selections[0]);
}

#[test]
fn ball_apex_derivative_matches_one_sided_differences() {
    let ball = build_ball(1.0, 1.0, 0.7).unwrap();
    let sec = Section::apex(1, 0);
    let cfg = SimConfig::default().with_t_final(5.0);
    let pd = poincare_bderivative(&ball, &sec, &ball_apex(0.5), &cfg, 3).unwrap();
    let p0 = poincare_map(&ball, &sec, &ball_apex(0.5), &cfg).unwrap().state.q[0];
    for h in [1e-6, -1e-6] {
        let ph = poincare_map(&ball, &sec, &ball_apex(0.5 + h), &cfg).unwrap().state.q[0];
        let fd = (ph - p0) / h;
        let dp = pd.selections[0][(0, 0)];
        assert!((fd - dp).abs() / dp < 1e-5, "{fd} vs {dp}");
    }
}

#[test]
fn ball_apex_map_is_stable_by_contraction() {
    let ball = build_ball(1.0, 1.0, 0.5).unwrap();
    let sec = Section::apex(1, 0);
    let cfg = SimConfig::default().with_t_final(5.0);
    let pd = poincare_bderivative(&ball, &sec, &ball_apex(0.5), &cfg, 3).unwrap();
    let rep = stability_contraction_test(&pd, None, 1e-9).unwrap();
    assert_eq!(rep.verdict, StabilityVerdict::Stable);
    assert!((rep.norms[0] - 0.25).abs() < 1e-6);
    let inst = instability_eigenvector_test(&pd, 1e-9);
    assert_eq!(inst.verdict, StabilityVerdict::Inconclusive);
}

#[test]
fn contraction_examples() {
    let half = PlMap::new(vec![DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2) * 0.5], |v: &DVector<f64>| {
        usize::from(v[0] < 0.0)
    });
    let rep = stability_contraction_test(&half, None, 1e-9).unwrap();
    assert_eq!(rep.verdict, StabilityVerdict::Stable);
    assert!(rep.norms.iter().all(|&n| (n - 0.5).abs() < 1e-12));

    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 1.2]);
    let b = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.9]);
    let two = PlMap::new(vec![a, b], |v: &DVector<f64>| usize::from(v[0] < 0.0));
    let rep = stability_contraction_test(&two, None, 1e-9).unwrap();
    assert_eq!(rep.verdict, StabilityVerdict::Inconclusive);
    assert!(rep.norms.iter().all(|&n| (n - 1.2).abs() < 1e-12));
}

#[test]
fn contraction_norms_invariant_under_weight_scaling() {
    let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, -0.2, 0.6]);
    let b = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, 0.3, 0.2]);
    let map = PlMap::new(vec![a, b], |v: &DVector<f64>| usize::from(v[1] < 0.0));
    let w = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
    let r1 = stability_contraction_test(&map, Some(&w), 1e-9).unwrap();
    let r2 = stability_contraction_test(&map, Some(&(&w * 0.01)), 1e-9).unwrap();
    assert_eq!(r1.verdict, r2.verdict);
    for (x, y) in r1.norms.iter().zip(&r2.norms) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Continuous PL map: selection 0 on `x₁ ≥ 0`, 1 otherwise; both matrices
/// share the second column so they agree on `x₁ = 0`.
fn half_plane_map(a: [f64; 4], b: [f64; 4]) -> PlMap<f64> {
    PlMap::new(
        vec![DMatrix::from_row_slice(2, 2, &a), DMatrix::from_row_slice(2, 2, &b)],
        |v: &DVector<f64>| usize::from(v[0] < 0.0),
    )
}

#[test]
fn instability_witness_grows_under_the_full_map() {
    let map = half_plane_map([2.0, 0.0, 1.0, 0.3], [0.5, 0.0, 0.2, 0.3]);
    let rep = instability_eigenvector_test(&map, 1e-9);
    assert_eq!(rep.verdict, StabilityVerdict::Unstable);
    let w = rep.witness.unwrap();
    assert_eq!(w.selection, 0);
    assert!((w.eigenvalue - 2.0).abs() < 1e-10);
    let nu = DVector::from_vec(w.eigenvector.clone());
    for g in iterate_growth(&map, &(nu * 1e-6), 5) {
        assert!(g >= w.eigenvalue.abs() / 2.0, "growth {g}");
    }
}

#[test]
fn expanding_eigenvector_outside_its_region_is_inconclusive() {
    // The eigenvector of λ = -2 flips into the other half plane.
    let map = half_plane_map([-2.0, 0.0, 1.0, 0.3], [-0.2, 0.0, 0.5, 0.3]);
    let rep = instability_eigenvector_test(&map, 1e-9);
    assert_eq!(rep.verdict, StabilityVerdict::Inconclusive);
    assert_eq!(rep.candidates.len(), 1);
    // Brute force: two steps multiply x₁ by 0.4, so the map is not
    // expanding along that eigenvector.
    let v = DVector::from_vec(vec![2.3, -1.0]);
    let growth: f64 = iterate_growth(&map, &v, 6).iter().product();
    assert!(growth < 1.0);
}

#[test]
fn single_linear_expanding_selection_is_unstable() {
    let map = PlMap::linear(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]));
    assert_eq!(instability_eigenvector_test(&map, 1e-9).verdict, StabilityVerdict::Unstable);
    let contracting = PlMap::linear(DMatrix::identity(2, 2) * 0.5);
    assert_eq!(instability_eigenvector_test(&contracting, 1e-9).verdict, StabilityVerdict::Inconclusive);
}

/// A ball whose inputs are ignored.
struct Deaf(Ball<f64>);

impl ControlledSystem<f64> for Deaf {
    fn n_inputs(&self) -> usize {
        2
    }
    fn with_input<'a>(&'a self, _u: &DVector<f64>) -> Box<dyn MechSystem<f64> + 'a> {
        Box::new(self.0.clone())
    }
}

#[test]
fn zero_influence_input_is_not_controllable() {
    let sys = Deaf(build_ball(1.0, 1.0, 0.5).unwrap());
    let cfg = SimConfig::default().with_t_final(1.5);
    let rep = controllability_test(&sys, &ball_apex(0.5), &DVector::zeros(2), &cfg, 3).unwrap();
    assert_eq!(rep.verdict, ControllabilityVerdict::NotControllable);
    assert!(rep.subblocks.iter().all(|b| b.abs().max() < 1e-9));
}

#[test]
fn forced_ball_input_block_matches_one_sided_differences() {
    let fb = ForcedBall { base: build_ball(1.0, 1.0, 0.5).unwrap() };
    let u0 = DVector::zeros(2);
    let cfg = SimConfig::default().with_t_final(1.5);
    let x0 = ball_apex(0.5);
    let rep = controllability_test(&fb, &x0, &u0, &cfg, 3).unwrap();
    assert_eq!(rep.subblocks.len(), 1);
    let base = flow(&*fb.with_input(&u0), &x0, &cfg).unwrap().final_state.x();
    let alpha = 1e-7;
    for k in 0..2 {
        let mut u = u0.clone();
        u[k] += alpha;
        let fd = (flow(&*fb.with_input(&u), &x0, &cfg).unwrap().final_state.x() - &base) / alpha;
        let col = rep.subblocks[0].column(k).into_owned();
        assert!((&col - &fd).norm() / fd.norm() < 1e-5, "input {k}: {col} vs {fd}");
    }
    assert_eq!(rep.verdict, ControllabilityVerdict::LocallyControllable);
}

/// `q̈ = 1 + u₀ + u₁ q̇` with a distant floor.
struct Linear;

struct LinearAt(DVector<f64>);

impl MechSystem<f64> for LinearAt {
    fn dof(&self) -> usize {
        1
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn mass(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
    fn effort(&self, _q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 1.0 + self.0[0] + self.0[1] * qd[0])
    }
    fn constraints(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, q[0] + 100.0)
    }
    fn constraint_jac(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }
    fn constraint_hess(&self, _q: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(1, 1)]
    }
    fn restitution(&self, _q: &DVector<f64>, _qd: &DVector<f64>) -> f64 {
        0.0
    }
}

impl ControlledSystem<f64> for Linear {
    fn n_inputs(&self) -> usize {
        2
    }
    fn with_input<'a>(&'a self, u: &DVector<f64>) -> Box<dyn MechSystem<f64> + 'a> {
        Box::new(LinearAt(u.clone()))
    }
}

#[test]
fn single_mode_linear_system_is_locally_controllable() {
    let x0 = State::from_slices(0.0, &[0.0], &[0.0], ActiveSet::empty());
    let cfg = SimConfig::default().with_t_final(1.0);
    let rep = controllability_test(&Linear, &x0, &DVector::zeros(2), &cfg, 3).unwrap();
    // Along q̇ = t: ∂/∂u₀ = (t²/2, t), ∂/∂u₁ = (t³/6, t²/2).
    let expect = DMatrix::from_row_slice(2, 2, &[0.5, 1.0 / 6.0, 1.0, 0.5]);
    assert!((&rep.subblocks[0] - expect).abs().max() < 1e-8, "{}", rep.subblocks[0]);
    let det = rep.determinants.as_ref().unwrap()[0];
    assert!((det - 1.0 / 12.0).abs() < 1e-8);
    assert_eq!(rep.verdict, ControllabilityVerdict::LocallyControllable);
}

fn trotter_apex() -> State<f64> {
    let p = TrotterParams::tuned();
    let toe = 0.8 - p.l0;
    State::from_slices(0.0, &[0.8, 0.0, toe, toe], &[0.0; 4], ActiveSet::empty())
}

#[test]
fn trotter_symmetric_drop_returns_after_period() {
    let sys = build_trotter_toy(TrotterParams::tuned()).unwrap();
    let sec = Section::apex(4, 0);
    let cfg = SimConfig::default().with_t_final(3.0);
    let r = poincare_map(&sys, &sec, &trotter_apex(), &cfg).unwrap();
    assert!((r.period - 0.8).abs() < 1e-8, "{}", r.period);
    assert!((r.state.q[0] - 0.8).abs() < 1e-8);
    let ev = &r.trajectory.events;
    assert_eq!(ev.len(), 2);
    assert_eq!(ev[0].activated, ActiveSet::from_indices([0, 1]));
    assert_eq!(ev[1].deactivated, ActiveSet::from_indices([0, 1]));
}

#[test]
fn trotter_poincare_derivative_has_two_distinct_selections() {
    let sys = build_trotter_toy(TrotterParams::tuned()).unwrap();
    let sec = Section::apex(4, 0);
    let cfg = SimConfig::default().with_t_final(3.0);
    let pd = poincare_bderivative(&sys, &sec, &trotter_apex(), &cfg, 3).unwrap();
    let groups = pd.distinct_selections(1e-6);
    assert_eq!(groups.len(), 2, "{groups:?}");
    // Pitching one way or the other picks a different touchdown order.
    let theta = pd.frame.transpose() * DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let group_of = |s: usize| groups.iter().position(|g| g.contains(&s)).unwrap();
    let (up, down) = (pd.selection_for(&theta), pd.selection_for(&-&theta));
    assert_ne!(group_of(up), group_of(down));
    let realized = pd.realized_selections(&[theta.clone(), -theta]);
    assert_eq!(realized.len(), 2);
}

#[test]
fn trotter_fixed_point_refinement() {
    let sys = build_trotter_toy(TrotterParams::tuned()).unwrap();
    let sec = Section::apex(4, 0);
    let cfg = SimConfig::default().with_t_final(3.0);
    let fp = refine_fixed_point(&sys, &sec, &trotter_apex(), &cfg, &FixedPointOptions::default()).unwrap();
    let r = poincare_map(&sys, &sec, &fp, &cfg).unwrap();
    assert!((r.state.x() - fp.x()).norm() < 1e-9);
    assert!((r.period - 0.8).abs() < 1e-3, "{}", r.period);
    assert!(fp.q[1].abs() < 1e-9, "orbit stays symmetric");
}
