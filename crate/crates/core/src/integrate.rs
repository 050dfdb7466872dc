//! Dormand–Prince 5(4) integrator with continuous (dense) output.
//!
//! Coefficients, error estimator and the fourth-order interpolant follow
//! Hairer, Nørsett & Wanner, *Solving ODEs I*, section II.5. Integration in
//! negative time is supported; the step size then carries the sign.

use nalgebra::DVector;
use thiserror::Error;

use crate::model::ModelError;
use crate::scalar::Real;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntegrateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step size underflow at t = {t:e}")]
    StepUnderflow { t: f64 },
    #[error("maximum number of steps ({0}) exceeded")]
    TooManySteps(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions<T> {
    pub rel_tol: T,
    pub abs_tol: T,
    /// Upper bound on `|h|`.
    pub max_step: T,
    /// Initial step; chosen automatically when `None`.
    pub h_init: Option<T>,
    pub max_steps: usize,
}

impl<T: Real> Default for OdeOptions<T> {
    fn default() -> Self {
        OdeOptions {
            rel_tol: T::lit(1e-10),
            abs_tol: T::lit(1e-12),
            max_step: T::lit(f64::INFINITY).min(T::max_value().unwrap()),
            h_init: None,
            max_steps: 1_000_000,
        }
    }
}

/// One accepted step together with its interpolant.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStep<T: Real> {
    pub t0: T,
    pub t1: T,
    pub y0: DVector<T>,
    pub y1: DVector<T>,
    // Polynomial is parameterized over the original step, which may be longer
    // than [t0, t1] after truncation.
    poly_h: T,
    rcont: [DVector<T>; 4],
}

impl<T: Real> DenseStep<T> {
    pub fn h(&self) -> T {
        self.t1 - self.t0
    }

    /// Interpolated state at `t`. Exact at both ends; usable slightly outside
    /// `[t0, t1]` but without accuracy guarantees there.
    pub fn eval(&self, t: T) -> DVector<T> {
        if self.poly_h == T::zero() {
            return self.y0.clone();
        }
        if t == self.t1 {
            return self.y1.clone();
        }
        let th = (t - self.t0) / self.poly_h;
        let th1 = T::one() - th;
        let [r2, r3, r4, r5] = &self.rcont;
        let inner = r4 + r5 * th1;
        let inner = r3 + inner * th;
        let inner = r2 + inner * th1;
        &self.y0 + inner * th
    }

    /// Same step restricted to `[t0, t_end]`; the interpolant is unchanged.
    pub fn truncated(&self, t_end: T) -> DenseStep<T> {
        let mut s = self.clone();
        s.y1 = self.eval(t_end);
        s.t1 = t_end;
        s
    }
}

struct Tableau<T> {
    c: [T; 5],
    a: [[T; 6]; 6],
    e: [T; 7],
    d: [T; 7],
}

impl<T: Real> Tableau<T> {
    fn new() -> Self {
        let l = T::lit;
        let z = T::zero();
        Tableau {
            c: [l(1.0 / 5.0), l(3.0 / 10.0), l(4.0 / 5.0), l(8.0 / 9.0), T::one()],
            a: [
                [l(1.0 / 5.0), z, z, z, z, z],
                [l(3.0 / 40.0), l(9.0 / 40.0), z, z, z, z],
                [l(44.0 / 45.0), l(-56.0 / 15.0), l(32.0 / 9.0), z, z, z],
                [l(19372.0 / 6561.0), l(-25360.0 / 2187.0), l(64448.0 / 6561.0), l(-212.0 / 729.0), z, z],
                [l(9017.0 / 3168.0), l(-355.0 / 33.0), l(46732.0 / 5247.0), l(49.0 / 176.0), l(-5103.0 / 18656.0), z],
                [l(35.0 / 384.0), z, l(500.0 / 1113.0), l(125.0 / 192.0), l(-2187.0 / 6784.0), l(11.0 / 84.0)],
            ],
            e: [
                l(71.0 / 57600.0),
                z,
                l(-71.0 / 16695.0),
                l(71.0 / 1920.0),
                l(-17253.0 / 339200.0),
                l(22.0 / 525.0),
                l(-1.0 / 40.0),
            ],
            d: [
                l(-12715105075.0 / 11282082432.0),
                z,
                l(87487479700.0 / 32700410799.0),
                l(-10690763975.0 / 1880347072.0),
                l(701980252875.0 / 199316789632.0),
                l(-1453857185.0 / 822651844.0),
                l(69997945.0 / 29380423.0),
            ],
        }
    }
}

/// Adaptive stepper. Each call to [`Dopri5::step`] advances by one accepted
/// step and returns its dense output.
pub struct Dopri5<T: Real, F> {
    rhs: F,
    t: T,
    y: DVector<T>,
    k1: DVector<T>,
    h: T,
    facold: T,
    opts: OdeOptions<T>,
    tab: Tableau<T>,
    steps: usize,
    pub n_rhs: usize,
}

impl<T, F> Dopri5<T, F>
where
    T: Real,
    F: FnMut(T, &DVector<T>) -> Result<DVector<T>, ModelError>,
{
    /// Prepares integration from `(t0, y0)` towards `toward` (only its
    /// sign relative to `t0` matters).
    pub fn new(mut rhs: F, t0: T, y0: DVector<T>, toward: T, opts: OdeOptions<T>) -> Result<Self, IntegrateError> {
        let k1 = rhs(t0, &y0)?;
        let mut s = Dopri5 {
            rhs,
            t: t0,
            y: y0,
            k1,
            h: T::zero(),
            facold: T::lit(1e-4),
            opts,
            tab: Tableau::new(),
            steps: 0,
            n_rhs: 1,
        };
        let dir = if toward >= t0 { T::one() } else { -T::one() };
        s.h = match opts.h_init {
            Some(h) => h.abs().min(opts.max_step) * dir,
            None => s.initial_step(dir)?,
        };
        Ok(s)
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    /// Current step-size proposal (signed).
    pub fn h(&self) -> T {
        self.h
    }

    fn scale(&self, a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
        a.zip_map(b, |x, y| self.opts.abs_tol + self.opts.rel_tol * x.abs().max(y.abs()))
    }

    fn rms(v: &DVector<T>, sk: &DVector<T>) -> T {
        if v.is_empty() {
            return T::zero();
        }
        let s = v.zip_fold(sk, T::zero(), |acc, x, s| acc + (x / s) * (x / s));
        (s / T::from_usize(v.len()).unwrap()).sqrt()
    }

    fn initial_step(&mut self, dir: T) -> Result<T, IntegrateError> {
        let sk = self.scale(&self.y, &self.y);
        let d0 = Self::rms(&self.y, &sk);
        let d1 = Self::rms(&self.k1, &sk);
        let tiny = T::lit(1e-10);
        let mut h0 = if d0 <= tiny || d1 <= tiny { T::lit(1e-6) } else { T::lit(0.01) * d0 / d1 };
        h0 = h0.min(self.opts.max_step);
        let y1 = &self.y + &self.k1 * (h0 * dir);
        let f1 = (self.rhs)(self.t + h0 * dir, &y1)?;
        self.n_rhs += 1;
        let d2 = Self::rms(&(f1 - &self.k1), &sk) / h0;
        let m = d1.max(d2);
        let h1 = if m <= T::lit(1e-15) {
            (h0 * T::lit(1e-3)).max(T::lit(1e-6))
        } else {
            (T::lit(0.01) / m).powf(T::lit(0.2))
        };
        Ok((h0 * T::lit(100.0)).min(h1).min(self.opts.max_step) * dir)
    }

    /// Advances one accepted step without passing `t_end`. Returns `None`
    /// once `t == t_end`.
    pub fn step(&mut self, t_end: T) -> Result<Option<DenseStep<T>>, IntegrateError> {
        let remaining = t_end - self.t;
        if remaining == T::zero() {
            return Ok(None);
        }
        let dir = if remaining > T::zero() { T::one() } else { -T::one() };
        if self.h == T::zero() || (self.h > T::zero()) != (dir > T::zero()) {
            self.h = self.h.abs().max(T::lit(1e-6)) * dir;
        }
        let safe = T::lit(0.9);
        let beta = T::lit(0.04);
        let expo1 = T::lit(0.2) - beta * T::lit(0.75);
        let fac_min = T::lit(0.2);
        let fac_max = T::lit(10.0);
        let tab = &self.tab;
        loop {
            self.steps += 1;
            if self.steps > self.opts.max_steps {
                return Err(IntegrateError::TooManySteps(self.opts.max_steps));
            }
            let mut h = self.h.abs().min(self.opts.max_step) * dir;
            let mut last = false;
            if (h * T::lit(1.01)).abs() >= remaining.abs() {
                h = remaining;
                last = true;
            }
            let t = self.t;
            let underflow = T::lit(10.0) * T::default_epsilon() * t.abs().max(T::one());
            if h.abs() <= underflow {
                return Err(IntegrateError::StepUnderflow { t: t.to_f64_lossy() });
            }
            let y = &self.y;
            let k1 = &self.k1;
            let mut ks: Vec<DVector<T>> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for s in 0..5 {
                let mut ys = y.clone();
                for (j, kj) in ks.iter().enumerate() {
                    let a = tab.a[s][j];
                    if a != T::zero() {
                        ys.axpy(h * a, kj, T::one());
                    }
                }
                ks.push((self.rhs)(t + tab.c[s] * h, &ys)?);
            }
            let mut y1 = y.clone();
            for (j, kj) in ks.iter().enumerate() {
                let a = tab.a[5][j];
                if a != T::zero() {
                    y1.axpy(h * a, kj, T::one());
                }
            }
            let t1 = if last { t_end } else { t + h };
            let k7 = (self.rhs)(t1, &y1)?;
            ks.push(k7);
            self.n_rhs += 6;

            let mut errv = DVector::zeros(y.len());
            for (j, kj) in ks.iter().enumerate() {
                if tab.e[j] != T::zero() {
                    errv.axpy(h * tab.e[j], kj, T::one());
                }
            }
            let sk = self.scale(y, &y1);
            let err = Self::rms(&errv, &sk);
            if !err.is_finite() || !y1.iter().all(|v| v.is_finite()) {
                self.h = h * T::lit(0.25);
                continue;
            }
            let fac11 = err.powf(expo1);
            if err <= T::one() {
                let fac = fac11 / self.facold.powf(beta);
                let fac = (fac / safe).min(T::one() / fac_min).max(T::one() / fac_max);
                let hnew = h / fac;
                self.facold = err.max(T::lit(1e-4));

                let ydiff = &y1 - y;
                let bspl = &ks[0] * h - &ydiff;
                let r4 = &ydiff - &ks[6] * h - &bspl;
                let mut r5 = DVector::zeros(y.len());
                for (j, kj) in ks.iter().enumerate() {
                    if tab.d[j] != T::zero() {
                        r5.axpy(h * tab.d[j], kj, T::one());
                    }
                }
                let step = DenseStep {
                    t0: t,
                    t1,
                    y0: y.clone(),
                    y1: y1.clone(),
                    poly_h: t1 - t,
                    rcont: [ydiff, bspl, r4, r5],
                };
                self.t = t1;
                self.y = y1;
                self.k1 = ks.pop().unwrap();
                self.h = hnew;
                return Ok(Some(step));
            }
            let fac = (fac11 / safe).min(T::one() / fac_min);
            self.h = h / fac;
        }
    }

    /// Restarts from a new state (e.g. after a velocity reset) keeping the
    /// current step-size estimate.
    pub fn restart(&mut self, t: T, y: DVector<T>) -> Result<(), IntegrateError> {
        self.k1 = (self.rhs)(t, &y)?;
        self.n_rhs += 1;
        self.t = t;
        self.y = y;
        self.facold = T::lit(1e-4);
        Ok(())
    }
}

/// Integrates from `t0` to `t1` and returns `y(t1)`.
pub fn integrate<T, F>(rhs: F, t0: T, y0: DVector<T>, t1: T, opts: OdeOptions<T>) -> Result<DVector<T>, IntegrateError>
where
    T: Real,
    F: FnMut(T, &DVector<T>) -> Result<DVector<T>, ModelError>,
{
    let mut s = Dopri5::new(rhs, t0, y0, t1, opts)?;
    while s.step(t1)?.is_some() {}
    Ok(s.y().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn osc(_t: f64, y: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::from_vec(vec![y[1], -y[0]]))
    }

    #[test]
    fn harmonic_oscillator_forward_and_backward() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let y = integrate(osc, 0.0, y0.clone(), 10.0, OdeOptions::default()).unwrap();
        assert_relative_eq!(y[0], 10f64.cos(), epsilon = 1e-8);
        assert_relative_eq!(y[1], -10f64.sin(), epsilon = 1e-8);
        let y = integrate(osc, 0.0, y0, -3.0, OdeOptions::default()).unwrap();
        assert_relative_eq!(y[0], 3f64.cos(), epsilon = 1e-9);
        assert_relative_eq!(y[1], 3f64.sin(), epsilon = 1e-9);
    }

    #[test]
    fn dense_output_is_accurate_inside_steps() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let mut s = Dopri5::new(osc, 0.0, y0, 5.0, OdeOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        while let Some(step) = s.step(5.0).unwrap() {
            for k in 1..10 {
                let t = step.t0 + step.h() * k as f64 / 10.0;
                let y = step.eval(t);
                worst = worst.max((y[0] - t.cos()).abs()).max((y[1] + t.sin()).abs());
            }
            assert_eq!(step.eval(step.t1), step.y1);
        }
        assert!(worst < 1e-8, "dense output error {worst:e}");
    }

    #[test]
    fn truncated_step_keeps_interpolant() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let mut s = Dopri5::new(osc, 0.0, y0, 5.0, OdeOptions { h_init: Some(0.5), ..Default::default() }).unwrap();
        let step = s.step(5.0).unwrap().unwrap();
        let mid = step.t0 + 0.6 * step.h();
        let tr = step.truncated(mid);
        for k in 0..=8 {
            let t = step.t0 + (mid - step.t0) * k as f64 / 8.0;
            assert_relative_eq!(tr.eval(t), step.eval(t), epsilon = 1e-13);
        }
    }

    #[test]
    fn constant_field_is_exact() {
        let f = |_t: f64, _y: &DVector<f64>| Ok(DVector::from_vec(vec![2.0]));
        let y = integrate(f, 1.0, DVector::from_vec(vec![0.0]), 4.0, OdeOptions::default()).unwrap();
        assert_relative_eq!(y[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let f = |_t: f32, y: &DVector<f32>| Ok(DVector::from_vec(vec![-y[0]]));
        let opts = OdeOptions { rel_tol: 1e-5f32, abs_tol: 1e-6, ..Default::default() };
        let y = integrate(f, 0.0f32, DVector::from_vec(vec![1.0f32]), 1.0, opts).unwrap();
        assert!((y[0] - (-1.0f32).exp()).abs() < 1e-4);
    }
}
