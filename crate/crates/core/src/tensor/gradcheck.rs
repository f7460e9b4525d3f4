use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck<T> {
    /// `max_i |ad_i - fd_i| / (|fd_i| + 1e-12)`
    pub max_rel_error: T,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub autodiff: Tensor<T>,
    pub numeric: Tensor<T>,
}

/// Checks the tape gradient of a scalar map against central differences
/// with step `h`.
///
/// `f` receives a fresh tape and the input leaf and must return a
/// one-element node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    if !(h > T::zero()) {
        return Err(Error::invalid("grad_check", format!("step {h} must be positive")));
    }
    let eval = |xv: &Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let v = tape.constant(xv.clone());
        let out = f(&tape, v)?;
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: f = {y}")));
        }
        Ok(y)
    };

    let tape = Tape::new();
    let v = tape.var(x.clone());
    let out = f(&tape, v)?;
    let ad = tape.grad_values(out, &[v])?.remove(0);

    let two_h = h + h;
    let eps = T::lit(1e-12);
    let mut fd = Tensor::zeros(x.shape());
    let mut worst = (T::zero(), 0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let d = (fp - fm) / two_h;
        fd.data_mut()[i] = d;
        let err = (ad.data()[i] - d).abs() / (d.abs() + eps);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        autodiff: ad,
        numeric: fd,
    })
}
