//! Central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

/// Step used for coordinate `x`: `max(h0, h0 * |x|)`.
#[inline]
pub fn fd_step<T: Real>(x: T) -> T {
    let h0 = T::fd_base();
    h0.max(h0 * x.abs())
}

/// Central-difference Jacobian of `f` at `x`.
pub fn jacobian<T, F>(f: F, x: &DVector<T>) -> DMatrix<T>
where
    T: Real,
    F: Fn(&DVector<T>) -> DVector<T>,
{
    let n = x.len();
    let mut cols: Vec<DVector<T>> = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (h + h));
    }
    if cols.is_empty() {
        let m = f(x).len();
        return DMatrix::zeros(m, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient of a scalar function.
pub fn gradient<T, F>(f: F, x: &DVector<T>) -> DVector<T>
where
    T: Real,
    F: Fn(&DVector<T>) -> T,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (h + h);
    }
    g
}

/// [`jacobian`] for fallible maps; the first error is returned.
pub fn try_jacobian<T, E, F>(f: F, x: &DVector<T>) -> Result<DMatrix<T>, E>
where
    T: Real,
    F: Fn(&DVector<T>) -> Result<DVector<T>, E>,
{
    let n = x.len();
    let mut cols: Vec<DVector<T>> = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        cols.push((fp - fm) / (h + h));
    }
    if cols.is_empty() {
        let m = f(x)?.len();
        return Ok(DMatrix::zeros(m, 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// [`gradient`] for fallible scalar maps.
pub fn try_gradient<T, E, F>(f: F, x: &DVector<T>) -> Result<DVector<T>, E>
where
    T: Real,
    F: Fn(&DVector<T>) -> Result<T, E>,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        g[j] = (fp - fm) / (h + h);
    }
    Ok(g)
}

/// Central-difference derivative of `f` along `dir` at `x`.
///
/// The step is scaled so that `|h * dir|` matches [`fd_step`] at `|x|`.
pub fn directional<T, F>(f: F, x: &DVector<T>, dir: &DVector<T>) -> T
where
    T: Real,
    F: Fn(&DVector<T>) -> T,
{
    let dn = dir.norm();
    if dn == T::zero() {
        return T::zero();
    }
    let h = fd_step(x.norm()) / dn;
    let fp = f(&(x + dir * h));
    let fm = f(&(x - dir * h));
    (fp - fm) / (h + h)
}
