//! One-parameter sweeps of initial conditions and the kink statistics used
//! to tell a continuous-but-not-differentiable outcome from a smooth one.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use uniflow::model::{MechSystem, State};
use uniflow::sim::flow;
use uniflow::SimConfig64;

use crate::output::word_label;

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub s: f64,
    pub outcome: f64,
    pub events: usize,
    pub word: String,
    pub termination: String,
}

/// Runs `flow` from `x₀ + s·dir` for `count` evenly spaced `s`, in parallel.
pub fn run_sweep(
    sys: &dyn MechSystem<f64>,
    x0: &State<f64>,
    dir: &DVector<f64>,
    range: [f64; 2],
    count: usize,
    outcome: usize,
    cfg: &SimConfig64,
) -> Vec<SweepPoint> {
    let step = (range[1] - range[0]) / (count - 1) as f64;
    (0..count)
        .into_par_iter()
        .map(|k| {
            // Hit the endpoints and a centred zero exactly.
            let s = if k + 1 == count { range[1] } else { range[0] + step * k as f64 };
            let s = if s.abs() < 1e-3 * step { 0.0 } else { s };
            let start = State::from_x(x0.t, &(x0.x() + dir * s), x0.mode);
            match flow(sys, &start, cfg) {
                Ok(tr) => SweepPoint {
                    s,
                    outcome: tr.final_state.x()[outcome],
                    events: tr.events.len(),
                    word: word_label(&tr.word()),
                    termination: tr.termination.label().to_string(),
                },
                Err(e) => SweepPoint {
                    s,
                    outcome: f64::NAN,
                    events: 0,
                    word: String::new(),
                    termination: format!("error: {e}"),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KinkMetrics {
    /// Largest gap between the sampled value at `s = 0` and the quadratic
    /// extrapolation of the three nearest points on either side.
    pub jump: f64,
    /// `max - min` of the outcome over the whole sweep.
    pub range: f64,
    /// Second-order one-sided difference slopes at `s = 0`.
    pub slope_left: f64,
    pub slope_right: f64,
    /// Step-halving error estimate of the slope difference: the two sides'
    /// `|D_h - D_2h|` combined in quadrature.
    pub noise_floor: f64,
    pub step: f64,
}

impl KinkMetrics {
    pub fn slope_difference(&self) -> f64 {
        (self.slope_right - self.slope_left).abs()
    }

    pub fn continuous(&self, rel: f64) -> bool {
        self.jump < rel * self.range
    }

    pub fn kinked(&self, factor: f64) -> bool {
        self.slope_difference() > factor * self.noise_floor
    }
}

/// Kink statistics at `s = 0` for a uniform sweep that samples `s = 0`
/// exactly and has at least four points on each side of it.
pub fn kink_metrics(s: &[f64], y: &[f64]) -> Option<KinkMetrics> {
    let k = s.iter().position(|&v| v == 0.0)?;
    if k < 4 || k + 4 >= s.len() || y.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let h = s[k + 1] - s[k];
    let side = |dir: isize| {
        let at = |i: isize| y[(k as isize + dir * i) as usize];
        let sign = dir as f64;
        let d_h = sign * (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
        let d_2h = sign * (-3.0 * at(0) + 4.0 * at(2) - at(4)) / (4.0 * h);
        let extrapolated = 3.0 * at(1) - 3.0 * at(2) + at(3);
        (d_h, (d_h - d_2h).abs(), (extrapolated - at(0)).abs())
    };
    let (sl, el, jl) = side(-1);
    let (sr, er, jr) = side(1);
    let range = y.iter().copied().fold(f64::NEG_INFINITY, f64::max) - y.iter().copied().fold(f64::INFINITY, f64::min);
    Some(KinkMetrics { jump: jl.max(jr), range, slope_left: sl, slope_right: sr, noise_floor: el.hypot(er), step: h })
}
