//! Built-in example systems and the name registry used by the CLI.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::model::{ControlledSystem, MechSystem, ModelError};
use crate::scalar::Real;

fn positive<T: Real>(name: &str, v: T) -> Result<(), ModelError> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative<T: Real>(name: &str, v: T) -> Result<(), ModelError> {
    if v >= T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{name} must be non-negative, got {v}")))
    }
}

/// Point mass above a floor `q ≥ 0`, optionally below a ceiling `q ≤ h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ball<T> {
    pub m: T,
    pub g: T,
    pub gamma: T,
    /// Extra constant force added to gravity.
    pub push: T,
    pub ceiling: Option<T>,
}

pub fn build_ball<T: Real>(m: T, g: T, gamma: T) -> Result<Ball<T>, ModelError> {
    positive("m", m)?;
    positive("g", g)?;
    non_negative("gamma", gamma)?;
    Ok(Ball { m, g, gamma, push: T::zero(), ceiling: None })
}

impl<T: Real> Ball<T> {
    pub fn with_ceiling(mut self, h: T) -> Result<Self, ModelError> {
        positive("ceiling", h)?;
        self.ceiling = Some(h);
        Ok(self)
    }
}

impl<T: Real> MechSystem<T> for Ball<T> {
    fn dof(&self) -> usize {
        1
    }
    fn n_constraints(&self) -> usize {
        1 + self.ceiling.is_some() as usize
    }
    fn mass(&self, _q: &DVector<T>) -> DMatrix<T> {
        DMatrix::from_element(1, 1, self.m)
    }
    fn mass_jac(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(1, 1)]
    }
    fn effort(&self, _q: &DVector<T>, _qd: &DVector<T>) -> DVector<T> {
        DVector::from_element(1, -self.m * self.g + self.push)
    }
    fn effort_jac(&self, _q: &DVector<T>, _qd: &DVector<T>) -> DMatrix<T> {
        DMatrix::zeros(1, 2)
    }
    fn constraints(&self, q: &DVector<T>) -> DVector<T> {
        match self.ceiling {
            None => DVector::from_element(1, q[0]),
            Some(h) => DVector::from_vec(vec![q[0], h - q[0]]),
        }
    }
    fn constraint_jac(&self, _q: &DVector<T>) -> DMatrix<T> {
        match self.ceiling {
            None => DMatrix::from_element(1, 1, T::one()),
            Some(_) => DMatrix::from_column_slice(2, 1, &[T::one(), -T::one()]),
        }
    }
    fn constraint_hess(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(1, 1); self.n_constraints()]
    }
    fn restitution(&self, _q: &DVector<T>, _qd: &DVector<T>) -> T {
        self.gamma
    }
}

/// Ball whose inputs are an added constant force (`u₀`) and a restitution
/// offset (`u₁`).
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedBall<T> {
    pub base: Ball<T>,
}

impl<T: Real> ControlledSystem<T> for ForcedBall<T> {
    fn n_inputs(&self) -> usize {
        2
    }
    fn with_input<'a>(&'a self, u: &DVector<T>) -> Box<dyn MechSystem<T> + 'a> {
        let mut b = self.base.clone();
        b.push += u[0];
        b.gamma += u[1];
        Box::new(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CornerAngle {
    /// `a = (q₁, q₂)`.
    Orthogonal,
    /// `a = (q₁, (q₁ + q₂)/√2)`: walls meeting at 45°.
    Oblique,
}

/// Unit point mass in the plane between two walls through the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Corner<T> {
    pub angle: CornerAngle,
    pub gamma: T,
    /// Constant applied force.
    pub gravity: [T; 2],
    /// Viscous coupling: the applied force is `gravity - damping · q̇`.
    pub damping: [[T; 2]; 2],
}

pub fn build_corner<T: Real>(angle: CornerAngle, gamma: T) -> Result<Corner<T>, ModelError> {
    non_negative("gamma", gamma)?;
    Ok(Corner { angle, gamma, gravity: [T::zero(), T::zero()], damping: [[T::zero(); 2]; 2] })
}

impl<T: Real> Corner<T> {
    pub fn with_gravity(mut self, g: [T; 2]) -> Self {
        self.gravity = g;
        self
    }

    pub fn with_damping(mut self, d: [[T; 2]; 2]) -> Self {
        self.damping = d;
        self
    }
}

impl<T: Real> MechSystem<T> for Corner<T> {
    fn dof(&self) -> usize {
        2
    }
    fn n_constraints(&self) -> usize {
        2
    }
    fn mass(&self, _q: &DVector<T>) -> DMatrix<T> {
        DMatrix::identity(2, 2)
    }
    fn mass_jac(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(2, 2); 2]
    }
    fn effort(&self, _q: &DVector<T>, qd: &DVector<T>) -> DVector<T> {
        let d = &self.damping;
        DVector::from_vec(vec![
            self.gravity[0] - d[0][0] * qd[0] - d[0][1] * qd[1],
            self.gravity[1] - d[1][0] * qd[0] - d[1][1] * qd[1],
        ])
    }
    fn effort_jac(&self, _q: &DVector<T>, _qd: &DVector<T>) -> DMatrix<T> {
        let d = &self.damping;
        let z = T::zero();
        DMatrix::from_row_slice(2, 4, &[z, z, -d[0][0], -d[0][1], z, z, -d[1][0], -d[1][1]])
    }
    fn constraints(&self, q: &DVector<T>) -> DVector<T> {
        &self.constraint_jac(q) * q
    }
    fn constraint_jac(&self, _q: &DVector<T>) -> DMatrix<T> {
        let (o, z) = (T::one(), T::zero());
        match self.angle {
            CornerAngle::Orthogonal => DMatrix::from_row_slice(2, 2, &[o, z, z, o]),
            CornerAngle::Oblique => {
                let s = T::lit(0.5).sqrt();
                DMatrix::from_row_slice(2, 2, &[o, z, s, s])
            }
        }
    }
    fn constraint_hess(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(2, 2); 2]
    }
    fn restitution(&self, _q: &DVector<T>, _qd: &DVector<T>) -> T {
        self.gamma
    }
}

/// Body of height `y` on a massive foot at height `x ≥ 0`, joined by a
/// linear spring of rest length `l0`. The foot lands plastically; in stance
/// the ground force drops to zero as the spring extends past `l0`, so liftoff
/// is a force-rate deactivation.
#[derive(Clone, Debug, PartialEq)]
pub struct Hopper<T> {
    pub m_body: T,
    pub m_foot: T,
    pub k: T,
    pub l0: T,
    pub g: T,
}

pub fn build_hopper<T: Real>(m_body: T, m_foot: T, k: T, l0: T, g: T) -> Result<Hopper<T>, ModelError> {
    positive("m_body", m_body)?;
    positive("m_foot", m_foot)?;
    positive("k", k)?;
    positive("l0", l0)?;
    non_negative("g", g)?;
    Ok(Hopper { m_body, m_foot, k, l0, g })
}

impl<T: Real> MechSystem<T> for Hopper<T> {
    fn dof(&self) -> usize {
        2
    }
    fn n_constraints(&self) -> usize {
        1
    }
    fn mass(&self, _q: &DVector<T>) -> DMatrix<T> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.m_body, self.m_foot]))
    }
    fn mass_jac(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(2, 2); 2]
    }
    fn effort(&self, q: &DVector<T>, _qd: &DVector<T>) -> DVector<T> {
        let spring = self.k * (self.l0 - (q[0] - q[1]));
        DVector::from_vec(vec![-self.m_body * self.g + spring, -self.m_foot * self.g - spring])
    }
    fn constraints(&self, q: &DVector<T>) -> DVector<T> {
        DVector::from_element(1, q[1])
    }
    fn constraint_jac(&self, _q: &DVector<T>) -> DMatrix<T> {
        DMatrix::from_row_slice(1, 2, &[T::zero(), T::one()])
    }
    fn constraint_hess(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(2, 2)]
    }
    fn restitution(&self, _q: &DVector<T>, _qd: &DVector<T>) -> T {
        T::zero()
    }
}

/// Parameters of the soft-leg trotter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrotterParams<T> {
    pub m_body: T,
    pub inertia: T,
    pub m_toe: T,
    /// Horizontal distance from the body center to each hip.
    pub half_width: T,
    pub k: T,
    pub l0: T,
    /// Linear leg damping with the toe on the ground.
    pub c_ground: T,
    /// Linear leg damping with the toe far from the ground.
    pub c_air: T,
    /// Length scale of the ground/air damping blend.
    pub blend: T,
    /// Cubic damper on the mean leg compression rate, shared by both legs.
    pub c_cubic: T,
    /// Thrust per unit extension rate while the toe is on the ground; this
    /// is the only energy source.
    pub c_push: T,
    /// Rate scale of the smooth switch that enables thrust on extension.
    pub push_scale: T,
    pub g: T,
}

impl TrotterParams<f64> {
    /// Defaults tuned so the symmetric hopping orbit has apex height 0.8 and
    /// period 0.8.
    pub fn tuned() -> Self {
        TROTTER_TUNED
    }
}

const TROTTER_TUNED: TrotterParams<f64> = TrotterParams {
    m_body: 1.0,
    inertia: 0.05,
    m_toe: 0.05,
    half_width: 0.25,
    k: 34.965_460_139_686,
    l0: 0.75,
    c_ground: 0.5,
    c_air: 2.0,
    blend: 0.02,
    c_cubic: 4.0,
    c_push: 4.603_059_016_585,
    push_scale: 0.5,
    g: 9.81,
};

/// Planar body (height `z`, pitch `θ`) on two spring-damper legs ending in
/// light toes at heights `x_l`, `x_r`. Configuration `q = (z, θ, x_l, x_r)`,
/// constraints `a = (x_l, x_r)`. The hips sit at `z ± w θ` (small-angle
/// kinematics) so the mass matrix is constant and diagonal, which makes the
/// two toe constraints orthogonal in the kinetic metric everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Trotter<T> {
    pub p: TrotterParams<T>,
}

pub fn build_trotter_toy<T: Real>(p: TrotterParams<T>) -> Result<Trotter<T>, ModelError> {
    positive("m_body", p.m_body)?;
    positive("inertia", p.inertia)?;
    positive("m_toe", p.m_toe)?;
    positive("half_width", p.half_width)?;
    positive("k", p.k)?;
    positive("l0", p.l0)?;
    positive("blend", p.blend)?;
    non_negative("c_cubic", p.c_cubic)?;
    non_negative("c_push", p.c_push)?;
    positive("push_scale", p.push_scale)?;
    non_negative("g", p.g)?;
    if !(p.c_ground.is_finite() && p.c_air.is_finite()) {
        return Err(ModelError::InvalidParameter("damping coefficients must be finite".into()));
    }
    Ok(Trotter { p })
}

impl<T: Real> Trotter<T> {
    /// Leg force without the shared damper (positive pushes hip up and toe
    /// down), and the leg's compression rate.
    fn leg(&self, hip: T, hip_v: T, toe: T, toe_v: T) -> (T, T) {
        let p = &self.p;
        let len = hip - toe;
        let rate = hip_v - toe_v;
        let s = toe / p.blend;
        let ground = (-(s * s)).exp();
        let c = p.c_air + (p.c_ground - p.c_air) * ground;
        let extending = T::lit(0.5) * (T::one() + (rate / p.push_scale).tanh());
        (p.k * (p.l0 - len) - c * rate + p.c_push * ground * extending * rate, rate)
    }
}

impl<T: Real> MechSystem<T> for Trotter<T> {
    fn dof(&self) -> usize {
        4
    }
    fn n_constraints(&self) -> usize {
        2
    }
    fn mass(&self, _q: &DVector<T>) -> DMatrix<T> {
        let p = &self.p;
        DMatrix::from_diagonal(&DVector::from_vec(vec![p.m_body, p.inertia, p.m_toe, p.m_toe]))
    }
    fn mass_jac(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(4, 4); 4]
    }
    fn effort(&self, q: &DVector<T>, qd: &DVector<T>) -> DVector<T> {
        let p = &self.p;
        let w = p.half_width;
        let (fl, rl) = self.leg(q[0] + w * q[1], qd[0] + w * qd[1], q[2], qd[2]);
        let (fr, rr) = self.leg(q[0] - w * q[1], qd[0] - w * qd[1], q[3], qd[3]);
        // The shared damper couples the legs: a jump in one leg's rate at
        // touchdown changes the force carried by both.
        let mean = T::lit(0.5) * (rl + rr);
        let shared = -T::lit(0.5) * p.c_cubic * mean * mean * mean;
        let (fl, fr) = (fl + shared, fr + shared);
        DVector::from_vec(vec![
            -p.m_body * p.g + fl + fr,
            w * (fl - fr),
            -p.m_toe * p.g - fl,
            -p.m_toe * p.g - fr,
        ])
    }
    fn constraints(&self, q: &DVector<T>) -> DVector<T> {
        DVector::from_vec(vec![q[2], q[3]])
    }
    fn constraint_jac(&self, _q: &DVector<T>) -> DMatrix<T> {
        let (o, z) = (T::one(), T::zero());
        DMatrix::from_row_slice(2, 4, &[z, z, o, z, z, z, z, o])
    }
    fn constraint_hess(&self, _q: &DVector<T>) -> Vec<DMatrix<T>> {
        vec![DMatrix::zeros(4, 4); 2]
    }
    fn restitution(&self, _q: &DVector<T>, _qd: &DVector<T>) -> T {
        T::zero()
    }
}

/// Named parameter record used by the registry.
pub type Params = BTreeMap<String, f64>;

/// Registry entry: a named system with defaults and a builder.
pub struct RegistryEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub defaults: fn() -> Params,
    pub build: fn(&Params) -> Result<Box<dyn MechSystem<f64>>, ModelError>,
    /// A representative initial condition `(q, qd)` in the admissible set.
    pub example_state: fn() -> (Vec<f64>, Vec<f64>),
}

fn params(pairs: &[(&str, f64)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn get(p: &Params, defaults: &Params, key: &str) -> Result<f64, ModelError> {
    p.get(key)
        .or_else(|| defaults.get(key))
        .copied()
        .ok_or_else(|| ModelError::InvalidParameter(format!("missing parameter {key}")))
}

fn check_keys(p: &Params, defaults: &Params) -> Result<(), ModelError> {
    match p.keys().find(|k| !defaults.contains_key(*k)) {
        Some(k) => Err(ModelError::InvalidParameter(format!("unknown parameter {k}"))),
        None => Ok(()),
    }
}

fn ball_defaults() -> Params {
    params(&[("m", 1.0), ("g", 1.0), ("gamma", 0.5)])
}

fn ceiling_defaults() -> Params {
    params(&[("m", 1.0), ("g", 1.0), ("gamma", 0.5), ("ceiling", 0.5)])
}

fn corner_defaults() -> Params {
    params(&[
        ("gamma", 0.0),
        ("gx", 0.0),
        ("gy", 0.0),
        ("d11", 0.0),
        ("d12", 0.0),
        ("d21", 0.0),
        ("d22", 0.0),
    ])
}

fn hopper_defaults() -> Params {
    params(&[("m_body", 1.0), ("m_foot", 0.1), ("k", 100.0), ("l0", 0.5), ("g", 9.81)])
}

fn trotter_defaults() -> Params {
    let p = TrotterParams::tuned();
    params(&[
        ("m_body", p.m_body),
        ("inertia", p.inertia),
        ("m_toe", p.m_toe),
        ("half_width", p.half_width),
        ("k", p.k),
        ("l0", p.l0),
        ("c_ground", p.c_ground),
        ("c_air", p.c_air),
        ("blend", p.blend),
        ("c_cubic", p.c_cubic),
        ("c_push", p.c_push),
        ("push_scale", p.push_scale),
        ("g", p.g),
    ])
}

fn corner_from(p: &Params, angle: CornerAngle) -> Result<Box<dyn MechSystem<f64>>, ModelError> {
    let d = corner_defaults();
    check_keys(p, &d)?;
    let damping = [[get(p, &d, "d11")?, get(p, &d, "d12")?], [get(p, &d, "d21")?, get(p, &d, "d22")?]];
    let c = build_corner(angle, get(p, &d, "gamma")?)?
        .with_gravity([get(p, &d, "gx")?, get(p, &d, "gy")?])
        .with_damping(damping);
    Ok(Box::new(c))
}

/// All built-in systems.
pub fn registry() -> &'static [RegistryEntry] {
    static ENTRIES: &[RegistryEntry] = &[
        RegistryEntry {
            name: "ball",
            description: "1-dof bouncing ball, a(q) = q",
            defaults: ball_defaults,
            build: |p| {
                let d = ball_defaults();
                check_keys(p, &d)?;
                Ok(Box::new(build_ball(get(p, &d, "m")?, get(p, &d, "g")?, get(p, &d, "gamma")?)?))
            },
            example_state: || (vec![0.5], vec![0.0]),
        },
        RegistryEntry {
            name: "ball_ceiling",
            description: "bouncing ball below a ceiling, a(q) = (q, h - q)",
            defaults: ceiling_defaults,
            build: |p| {
                let d = ceiling_defaults();
                check_keys(p, &d)?;
                let b = build_ball(get(p, &d, "m")?, get(p, &d, "g")?, get(p, &d, "gamma")?)?;
                Ok(Box::new(b.with_ceiling(get(p, &d, "ceiling")?)?))
            },
            example_state: || (vec![0.25], vec![0.0]),
        },
        RegistryEntry {
            name: "corner_orthogonal",
            description: "unit point mass between perpendicular walls q1 >= 0, q2 >= 0",
            defaults: corner_defaults,
            build: |p| corner_from(p, CornerAngle::Orthogonal),
            example_state: || (vec![1.0, 1.0], vec![-1.0, -1.0]),
        },
        RegistryEntry {
            name: "corner_oblique",
            description: "unit point mass between walls meeting at 45 degrees",
            defaults: corner_defaults,
            build: |p| corner_from(p, CornerAngle::Oblique),
            example_state: || (vec![1.0, 1.0], vec![-1.0, -1.0]),
        },
        RegistryEntry {
            name: "hopper",
            description: "body on a sprung massive foot, plastic touchdown",
            defaults: hopper_defaults,
            build: |p| {
                let d = hopper_defaults();
                check_keys(p, &d)?;
                Ok(Box::new(build_hopper(
                    get(p, &d, "m_body")?,
                    get(p, &d, "m_foot")?,
                    get(p, &d, "k")?,
                    get(p, &d, "l0")?,
                    get(p, &d, "g")?,
                )?))
            },
            example_state: || (vec![0.8, 0.3], vec![0.0, 0.0]),
        },
        RegistryEntry {
            name: "trotter",
            description: "planar soft-leg trotter: body height and pitch, two sprung toes",
            defaults: trotter_defaults,
            build: |p| {
                let d = trotter_defaults();
                check_keys(p, &d)?;
                let tp = TrotterParams {
                    m_body: get(p, &d, "m_body")?,
                    inertia: get(p, &d, "inertia")?,
                    m_toe: get(p, &d, "m_toe")?,
                    half_width: get(p, &d, "half_width")?,
                    k: get(p, &d, "k")?,
                    l0: get(p, &d, "l0")?,
                    c_ground: get(p, &d, "c_ground")?,
                    c_air: get(p, &d, "c_air")?,
                    blend: get(p, &d, "blend")?,
                    c_cubic: get(p, &d, "c_cubic")?,
                    c_push: get(p, &d, "c_push")?,
                    push_scale: get(p, &d, "push_scale")?,
                    g: get(p, &d, "g")?,
                };
                Ok(Box::new(build_trotter_toy(tp)?))
            },
            example_state: || {
                let p = TrotterParams::tuned();
                (vec![0.8, 0.0, 0.8 - p.l0, 0.8 - p.l0], vec![0.0; 4])
            },
        },
    ];
    ENTRIES
}

pub fn lookup(name: &str) -> Option<&'static RegistryEntry> {
    registry().iter().find(|e| e.name == name)
}
