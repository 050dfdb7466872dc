use approx::assert_relative_eq;
use nalgebra::DVector;
use uniflow::model::{ActiveSet, State};
use uniflow::sim::{flow, DeactivationType, ResetLaw, SimConfig, Termination};
use uniflow::systems::{build_ball, build_corner, build_hopper, CornerAngle};

fn cfg(t_final: f64) -> SimConfig<f64> {
    SimConfig::default().with_t_final(t_final)
}

#[test]
fn ball_first_impact_closed_form() {
    let ball = build_ball(1.0, 1.0, 0.5).unwrap();
    let x0 = State::from_slices(0.0, &[0.5], &[0.0], ActiveSet::empty());
    let tr = flow(&ball, &x0, &cfg(1.5)).unwrap();
    assert_eq!(tr.termination, Termination::TimeReached);
    let ev = &tr.events[0];
    assert!((ev.t - 1.0).abs() < 1e-9, "impact at {}", ev.t);
    assert!(ev.admissible);
    assert_eq!(ev.activated, ActiveSet::single(0));
    assert_relative_eq!(ev.pre[1], -1.0, epsilon = 1e-8);
    assert_relative_eq!(ev.post[1], 0.5, epsilon = 1e-8);
    assert_eq!(ev.mode_after, ActiveSet::empty());
    let rel = &ev.deactivation_verdicts[0];
    assert_eq!(rel.kind, DeactivationType::Velocity);
    assert_relative_eq!(rel.velocity, 0.5, epsilon = 1e-8);
    // Left continuity: the stored state at the event time is pre-impact.
    let at = tr.state_at(ev.t).unwrap();
    assert_relative_eq!(at[1], ev.pre[1], epsilon = 1e-12);
    assert_eq!(tr.word(), vec![ActiveSet::empty(), ActiveSet::empty()]);
    assert_eq!(tr.eta(), vec![Some(0)]);
}

#[test]
fn resting_ball_has_no_events() {
    let ball = build_ball(1.0, 1.0, 0.0).unwrap();
    let x0 = State::from_slices(0.0, &[0.0], &[0.0], ActiveSet::single(0));
    let tr = flow(&ball, &x0, &cfg(2.0)).unwrap();
    assert!(tr.events.is_empty());
    assert_eq!(tr.segments.len(), 1);
    assert_eq!(tr.final_state.q[0], 0.0);
    assert_eq!(tr.final_state.qd[0], 0.0);
}

#[test]
fn plastic_landing_sticks() {
    let ball = build_ball(2.0, 9.81, 0.0).unwrap();
    let x0 = State::from_slices(0.0, &[0.3], &[0.0], ActiveSet::empty());
    let tr = flow(&ball, &x0, &cfg(1.0)).unwrap();
    assert_eq!(tr.events.len(), 1);
    assert_eq!(tr.events[0].mode_after, ActiveSet::single(0));
    assert!(tr.final_state.q[0].abs() < 1e-9);
    assert_eq!(tr.final_state.mode, ActiveSet::single(0));
}

#[test]
fn elastic_ball_conserves_energy() {
    let ball = build_ball(1.0, 1.0, 1.0).unwrap();
    let x0 = State::from_slices(0.0, &[0.5], &[0.0], ActiveSet::empty());
    let tr = flow(&ball, &x0, &cfg(20.5)).unwrap();
    assert_eq!(tr.events.len(), 10);
    for ev in &tr.events {
        let e_pre = 0.5 * ev.pre[1] * ev.pre[1] + ev.pre[0];
        let e_post = 0.5 * ev.post[1] * ev.post[1] + ev.post[0];
        assert!((e_pre - e_post).abs() < 1e-10);
        assert!((e_pre - 0.5).abs() < 1e-9);
    }
}

#[test]
fn zeno_accumulation_estimate() {
    let gamma = 0.5;
    let ball = build_ball(1.0, 1.0, gamma).unwrap();
    let x0 = State::from_slices(0.0, &[0.5], &[0.0], ActiveSet::empty());
    let tr = flow(&ball, &x0, &cfg(10.0)).unwrap();
    let expected = 1.0 * (1.0 + gamma) / (1.0 - gamma);
    match tr.termination {
        Termination::ZenoGuard { constraint, accumulation: Some(acc), .. } => {
            assert_eq!(constraint, 0);
            assert!((acc - expected).abs() < 0.01 * expected, "{acc} vs {expected}");
        }
        other => panic!("expected Zeno guard, got {other:?}"),
    }
}

#[test]
fn ceiling_apex_is_grazing() {
    let ball = build_ball(1.0, 1.0, 0.5).unwrap().with_ceiling(0.5).unwrap();
    // Launched so the apex touches the ceiling exactly.
    let x0 = State::from_slices(0.0, &[0.0], &[1.0], ActiveSet::empty());
    let tr = flow(&ball, &x0, &cfg(3.0)).unwrap();
    match tr.termination {
        Termination::Grazing { constraint, t, .. } => {
            assert_eq!(constraint, 1);
            assert!((t - 1.0).abs() < 1e-3);
        }
        other => panic!("expected grazing, got {other:?}"),
    }
}

#[test]
fn corner_aimed_impact_is_simultaneous() {
    let c = build_corner(CornerAngle::Orthogonal, 0.0).unwrap();
    let x0 = State::from_slices(0.0, &[0.5, 0.5], &[-1.0, -1.0], ActiveSet::empty());
    let tr = flow(&c, &x0, &cfg(1.0)).unwrap();
    assert_eq!(tr.events.len(), 1);
    let ev = &tr.events[0];
    assert_eq!(ev.activated, ActiveSet::from_indices([0, 1]));
    assert!(ev.activation_verdicts.iter().all(|v| (v.velocity + 1.0).abs() < 1e-8));
    assert_eq!(ev.mode_after, ActiveSet::from_indices([0, 1]));
    assert!(tr.final_state.qd.norm() < 1e-12);
}

#[test]
fn corner_settles_under_gravity() {
    let c = build_corner(CornerAngle::Orthogonal, 0.0).unwrap().with_gravity([0.0, -1.0]);
    let x0 = State::from_slices(0.0, &[0.5, 0.5], &[-1.0, -0.75], ActiveSet::empty());
    let tr = flow(&c, &x0, &cfg(1.0)).unwrap();
    let ev = &tr.events[0];
    assert_eq!(ev.mode_after, ActiveSet::from_indices([0, 1]));
    let lam = uniflow::model::contact_force(&c, &tr.final_state.q, &tr.final_state.qd, ev.mode_after).unwrap();
    assert_relative_eq!(lam[0], 0.0, epsilon = 1e-12);
    assert_relative_eq!(lam[1], 1.0, epsilon = 1e-12);
}

#[test]
fn hopper_liftoff_is_force_rate_deactivation() {
    let h = build_hopper(1.0, 0.1, 100.0, 0.5, 9.81).unwrap();
    // Stance with the spring compressed and the body at rest.
    let x0 = State::from_slices(0.0, &[0.2, 0.0], &[0.0, 0.0], ActiveSet::single(0));
    let tr = flow(&h, &x0, &cfg(1.0)).unwrap();
    assert!(tr.termination.is_regular(), "{:?}", tr.termination);
    let lo = &tr.events[0];
    assert_eq!(lo.deactivated, ActiveSet::single(0));
    let v = &lo.deactivation_verdicts[0];
    assert_eq!(v.kind, DeactivationType::ForceRate);
    // dλ/dt = -k (ẏ - ẋ) with the foot fixed: λ = m_f g + k (l0 - y).
    assert_relative_eq!(v.force_rate.unwrap(), -100.0 * lo.pre[2], max_relative = 1e-6);
    assert!(tr.events.len() >= 2, "expected touchdown after liftoff");
    assert_eq!(tr.events[1].activated, ActiveSet::single(0));
}

#[test]
fn drift_stays_small_and_word_matches_segments() {
    let h = build_hopper(1.0, 0.1, 100.0, 0.5, 9.81).unwrap();
    let x0 = State::from_slices(0.0, &[0.2, 0.0], &[0.0, 0.0], ActiveSet::single(0));
    let tr = flow(&h, &x0, &cfg(3.0)).unwrap();
    for seg in &tr.segments {
        for st in &seg.steps {
            for k in 0..=4 {
                let t = st.t0 + st.h() * k as f64 / 4.0;
                let x = st.eval(t);
                let q = DVector::from_vec(vec![x[0], x[1]]);
                let a = uniflow::MechSystem::constraints(&h, &q);
                if seg.mode.contains(0) {
                    assert!(a[0].abs() <= 1e-8, "drift {}", a[0]);
                } else {
                    assert!(a[0] >= -1e-9);
                }
            }
        }
    }
    for (w, ev) in tr.word().windows(2).zip(&tr.events) {
        assert_eq!(w[0], ev.mode_before);
        assert_eq!(w[1], ev.mode_after);
    }
    for pair in tr.segments.windows(2) {
        assert!(pair[0].t_end <= pair[1].t_start);
        assert!(pair[0].t_start < pair[0].t_end);
    }
}

#[test]
fn invalid_initial_state_rejected() {
    let ball = build_ball(1.0, 1.0, 0.5).unwrap();
    let x0 = State::from_slices(0.0, &[-0.1], &[0.0], ActiveSet::empty());
    assert!(flow(&ball, &x0, &cfg(1.0)).is_err());
}

#[test]
fn single_precision_ball() {
    let ball = build_ball(1.0f32, 1.0, 0.5).unwrap();
    let x0 = State::from_slices(0.0f32, &[0.5], &[0.0], ActiveSet::empty());
    let mut c = SimConfig::<f32>::default().with_t_final(1.5);
    c.rel_tol = 1e-5;
    c.abs_tol = 1e-6;
    c.event_tol = 1e-6;
    c.simultaneity_window = 1e-5;
    c.tol.cons = 1e-4;
    c.tol.graze = 1e-4;
    c.tol.force = 1e-4;
    let tr = flow(&ball, &x0, &c).unwrap();
    assert!((tr.events[0].t - 1.0).abs() < 1e-4);
}


#[test]
fn oblique_corner_one_sided_limits_under_each_reset_law() {
    let corner = build_corner(CornerAngle::Oblique, 0.0).unwrap();
    let finals = |law: ResetLaw, eps: f64| {
        let x0 = State::from_slices(0.0, &[0.5 + eps, 0.5], &[-1.0, -1.0], ActiveSet::empty());
        flow(&corner, &x0, &SimConfig { reset: law, ..cfg(1.0) }).unwrap().final_state.qd
    };
    // Projecting over the whole active set lands at rest from either side.
    assert!((finals(ResetLaw::ActiveSet, 1e-3) - finals(ResetLaw::ActiveSet, -1e-3)).norm() < 1e-12);
    // One constraint at a time, the order of impacts matters.
    let left = finals(ResetLaw::Impacted, -1e-3);
    let right = finals(ResetLaw::Impacted, 1e-3);
    assert_relative_eq!(left[0], 0.5, epsilon = 1e-9);
    assert_relative_eq!(left[1], -0.5, epsilon = 1e-9);
    assert!(right.norm() < 1e-12);
    assert_relative_eq!((left - right).norm(), 0.5f64.sqrt(), epsilon = 1e-9);
}
