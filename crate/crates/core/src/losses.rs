//! Content losses, critic objectives, Lipschitz penalty and balancing.
//!
//! Every loss has a tape form (`*_on`) used for training and a plain value
//! form. Batches are given as parallel slices of conditioning inputs `xs`,
//! targets `ys` and generator outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Critic;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::Image;

/// Log-normalizer added by [`gaussian_xe`]. It does not depend on the
/// prediction, so it is kept at zero.
pub const GAUSSIAN_LOG_NORMALIZER: f64 = 0.0;

/// Denominator guard of the equal-contribution ratio.
pub const BALANCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    /// Constant adversarial weight.
    Fixed(f64),
    /// `lambda = EMA|L_p| / (EMA|L_adv| + eps)`, refreshed per epoch.
    Equal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub p: f64,
    /// Ground-norm exponent of the adversarial side; conjugate of `q` if unset.
    pub p_adv: Option<f64>,
    pub q: f64,
    pub r: f64,
    pub sigma: Option<Image>,
    pub lambda_gp: f64,
    pub balance: Balance,
    pub ema_decay: f64,
    /// Latent draws per input during training.
    pub n_z: usize,
    /// Latent draws per input during evaluation.
    pub n_z_eval: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p: 1.5,
            p_adv: None,
            q: 1.05,
            r: 1.0,
            sigma: None,
            lambda_gp: 10.0,
            balance: Balance::Equal,
            ema_decay: 0.9,
            n_z: 1,
            n_z_eval: 8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return bad(format!("loss.p = {} must be >= 1", self.p));
        }
        if !(self.q > 1.0) {
            return bad(format!("loss.q = {} must be > 1", self.q));
        }
        if !(self.r >= 1.0) {
            return bad(format!("loss.r = {} must be >= 1", self.r));
        }
        if let Some(pa) = self.p_adv {
            if !(pa > 1.0) || ((1.0 / pa + 1.0 / self.q) - 1.0).abs() > 1e-9 {
                return bad(format!("loss.p_adv = {pa} is not conjugate to loss.q = {}", self.q));
            }
        }
        if let Some(s) = &self.sigma {
            check_sigma(s)?;
        }
        if !(self.lambda_gp >= 0.0) {
            return bad(format!("loss.lambda_gp = {} must be >= 0", self.lambda_gp));
        }
        if let Balance::Fixed(l) = self.balance {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("loss.lambda_adv = {l} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("loss.ema_decay = {} must be in [0, 1)", self.ema_decay));
        }
        if self.n_z == 0 || self.n_z_eval == 0 {
            return bad("latent draw counts must be positive".into());
        }
        Ok(())
    }

    pub fn p_adv(&self) -> f64 {
        self.p_adv.unwrap_or(self.q / (self.q - 1.0))
    }
}

fn check_sigma<T: Scalar>(sigma: &Tensor<T>) -> Result<()> {
    if sigma.data().iter().all(|&v| v > T::zero() && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("sigma", "weights must be strictly positive and finite"))
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// `v / sigma` elementwise, with `sigma` treated as a constant.
fn divide_sigma<T: Scalar>(tape: &Tape<T>, v: Var, sigma: Option<&Tensor<T>>) -> Result<Var> {
    match sigma {
        None => Ok(v),
        Some(s) => {
            check_sigma(s)?;
            if s.shape() != tape.shape(v).as_slice() {
                return Err(Error::shape("sigma", format!("{:?} vs {:?}", s.shape(), tape.shape(v))));
            }
            let inv = tape.constant(s.map(|x| T::one() / x));
            tape.mul(v, inv)
        }
    }
}

/// `sigma * v` elementwise.
fn times_sigma<T: Scalar>(tape: &Tape<T>, v: Var, sigma: Option<&Tensor<T>>) -> Result<Var> {
    match sigma {
        None => Ok(v),
        Some(s) => {
            check_sigma(s)?;
            if s.shape() != tape.shape(v).as_slice() {
                return Err(Error::shape("sigma", format!("{:?} vs {:?}", s.shape(), tape.shape(v))));
            }
            let c = tape.constant(s.clone());
            tape.mul(v, c)
        }
    }
}

/// `sum_y |(target - pred)(y) / sigma(y)|^p`.
pub fn lp_loss_on<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    target: Var,
    p: T,
    sigma: Option<&Tensor<T>>,
) -> Result<Var> {
    same_shape(tape, "lp_loss", pred, target)?;
    if !(p >= T::one()) {
        return Err(Error::invalid("lp_loss", format!("exponent {p} < 1")));
    }
    let r = tape.sub(target, pred)?;
    let r = divide_sigma(tape, r, sigma)?;
    Ok(tape.reduce_sum(tape.abs_pow(r, p)?))
}

pub fn lp_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, p: T, sigma: Option<&Tensor<T>>) -> Result<T> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let l = lp_loss_on(&tape, a, b, p, sigma)?;
    Ok(tape.scalar(l))
}

/// Negative log-likelihood under `P(Y|X) ~ exp(-||(Y - G(X)) / sigma||_p^p)`.
pub fn gaussian_xe_on<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    target: Var,
    p: T,
    sigma: Option<&Tensor<T>>,
) -> Result<Var> {
    let l = lp_loss_on(tape, pred, target, p, sigma)?;
    tape.add_scalar(l, T::lit(GAUSSIAN_LOG_NORMALIZER))
}

pub fn gaussian_xe<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, p: T, sigma: Option<&Tensor<T>>) -> Result<T> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let l = gaussian_xe_on(&tape, a, b, p, sigma)?;
    Ok(tape.scalar(l))
}

/// `(sum |v|^q)^(1/q)` on the tape.
pub fn lq_norm_on<T: Scalar>(tape: &Tape<T>, v: Var, q: T) -> Result<Var> {
    let s = tape.reduce_sum(tape.abs_pow(v, q)?);
    Ok(tape.pow_abs_any(s, T::one() / q))
}

/// `||sigma * dD_X(Y)/dY||_q` at `y`, which must be a differentiable leaf.
/// The result stays differentiable in the critic parameters.
pub fn lipschitz_grad_norm_on<T: Scalar>(
    tape: &Tape<T>,
    critic: &dyn Critic<T>,
    params: &[Var],
    x: Var,
    y: Var,
    q: T,
    sigma: Option<&Tensor<T>>,
) -> Result<Var> {
    if !(q > T::one()) {
        return Err(Error::invalid("lipschitz_grad_norm", format!("dual exponent {q} must be > 1")));
    }
    let d = critic.value_on(tape, params, x, y)?;
    let g = tape.grad(d, &[y])?[0];
    let g = times_sigma(tape, g, sigma)?;
    lq_norm_on(tape, g, q)
}

pub fn lipschitz_grad_norm<T: Scalar>(
    critic: &dyn Critic<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    q: T,
    sigma: Option<&Tensor<T>>,
) -> Result<T> {
    let tape = Tape::new();
    let p = critic.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.var(y.clone());
    let n = lipschitz_grad_norm_on(&tape, critic, &p, xv, yv, q, sigma)?;
    Ok(tape.scalar(n))
}

/// `eps * real + (1 - eps) * fake`.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps >= T::zero() && eps <= T::one()) {
        return Err(Error::invalid("interpolate", format!("eps = {eps} outside [0, 1]")));
    }
    real.zip_map(fake, |a, b| eps * a + (T::one() - eps) * b)
}

/// `lambda * (norm - 1)^2` at the interpolate `y_hat`; returns the penalty
/// and the norm.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty_on<T: Scalar>(
    tape: &Tape<T>,
    critic: &dyn Critic<T>,
    params: &[Var],
    x: Var,
    y_hat: &Tensor<T>,
    q: T,
    lambda: T,
    sigma: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let y = tape.var(y_hat.clone());
    let n = lipschitz_grad_norm_on(tape, critic, params, x, y, q, sigma)?;
    let dev = tape.add_scalar(n, -T::one())?;
    let sq = tape.abs_pow(dev, T::lit(2.0))?;
    Ok((tape.scale(sq, lambda), n))
}

#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty<T: Scalar>(
    critic: &dyn Critic<T>,
    x: &Tensor<T>,
    y_real: &Tensor<T>,
    y_fake: &Tensor<T>,
    q: T,
    lambda: T,
    eps: T,
    sigma: Option<&Tensor<T>>,
) -> Result<T> {
    let y_hat = interpolate(y_real, y_fake, eps)?;
    let tape = Tape::new();
    let p = critic.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let (gp, _) = gradient_penalty_on(&tape, critic, &p, xv, &y_hat, q, lambda, sigma)?;
    Ok(tape.scalar(gp))
}

/// One pair's critic term `D_X(Y) - mean_z D_X(G^z(X))`.
pub fn wcgan_term_on<T: Scalar>(
    tape: &Tape<T>,
    critic: &dyn Critic<T>,
    params: &[Var],
    x: Var,
    y: Var,
    fakes: &[Var],
) -> Result<Var> {
    if fakes.is_empty() {
        return Err(Error::invalid("wcgan_objective", "no generator draws"));
    }
    let real = critic.value_on(tape, params, x, y)?;
    let fake = wcgan_fake_on(tape, critic, params, x, fakes)?;
    tape.sub(real, fake)
}

/// `mean_z D_X(G^z(X))`.
pub fn wcgan_fake_on<T: Scalar>(
    tape: &Tape<T>,
    critic: &dyn Critic<T>,
    params: &[Var],
    x: Var,
    fakes: &[Var],
) -> Result<Var> {
    let mut acc = critic.value_on(tape, params, x, fakes[0])?;
    for &f in &fakes[1..] {
        let v = critic.value_on(tape, params, x, f)?;
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, T::one() / T::lit(fakes.len() as f64)))
}

fn check_batch<T>(op: &'static str, xs: &[Tensor<T>], ys: &[Tensor<T>], n: usize) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid(op, "empty batch"));
    }
    if xs.len() != ys.len() || xs.len() != n {
        return Err(Error::invalid(op, format!("batch sizes {} / {} / {n}", xs.len(), ys.len())));
    }
    Ok(())
}

/// `sum_i [D_{X_i}(Y_i) - mean_z D_{X_i}(G^z(X_i))]`; `fakes[i]` holds the
/// generator draws for pair `i`.
pub fn wcgan_objective<T: Scalar>(
    critic: &dyn Critic<T>,
    xs: &[Tensor<T>],
    ys: &[Tensor<T>],
    fakes: &[Vec<Tensor<T>>],
) -> Result<T> {
    check_batch("wcgan_objective", xs, ys, fakes.len())?;
    let mut total = T::zero();
    for i in 0..xs.len() {
        let tape = Tape::new();
        let p = critic.bind(&tape, false);
        let x = tape.constant(xs[i].clone());
        let y = tape.constant(ys[i].clone());
        let f: Vec<Var> = fakes[i].iter().map(|g| tape.constant(g.clone())).collect();
        total = total + tape.scalar(wcgan_term_on(&tape, critic, &p, x, y, &f)?);
    }
    Ok(total)
}

/// `sum_i ||r_i||_p`, the closed form of the linear-critic supremum.
pub fn linearized_jw<T: Scalar>(residuals: &[Tensor<T>], p: T) -> T {
    residuals.iter().fold(T::zero(), |acc, r| acc + r.norm_p(p))
}

/// One pair's C-CGAN term `sum_y |F(X, Y)(y) - F(X, G(X))(y)|`.
pub fn ccgan_term_on<T: Scalar>(
    tape: &Tape<T>,
    critic: &dyn Critic<T>,
    params: &[Var],
    x: Var,
    y: Var,
    g: Var,
) -> Result<Var> {
    let fr = critic.field(tape, params, x, y)?;
    let fg = critic.field(tape, params, x, g)?;
    let d = tape.sub(fr, fg)?;
    Ok(tape.reduce_sum(tape.abs_pow(d, T::one())?))
}

pub fn ccgan_loss<T: Scalar>(
    critic: &dyn Critic<T>,
    xs: &[Tensor<T>],
    ys: &[Tensor<T>],
    preds: &[Tensor<T>],
) -> Result<T> {
    check_batch("ccgan_loss", xs, ys, preds.len())?;
    let mut total = T::zero();
    for i in 0..xs.len() {
        let tape = Tape::new();
        let p = critic.bind(&tape, false);
        let x = tape.constant(xs[i].clone());
        let y = tape.constant(ys[i].clone());
        let g = tape.constant(preds[i].clone());
        total = total + tape.scalar(ccgan_term_on(&tape, critic, &p, x, y, g)?);
    }
    Ok(total)
}

/// `sign(F(X, Y) - F(X, G))`, zero where equal.
pub fn ccgan_sign<T: Scalar>(
    critic: &dyn Critic<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    pred: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = critic.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let fr = critic.field(&tape, &p, xv, tape.constant(y.clone()))?;
    let fg = critic.field(&tape, &p, xv, tape.constant(pred.clone()))?;
    let d = tape.sub(fr, fg)?;
    Ok(tape.value(d).map(|v| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }))
}

/// A critic whose field is `sign * F`, with the sign image held constant.
/// Its value `sum_y sign(y) F(X, Y)(y)` is the C-CGAN discriminator.
pub struct SignedCritic<'a, T> {
    pub inner: &'a dyn Critic<T>,
    pub sign: Tensor<T>,
}

impl<T: Scalar> Critic<T> for SignedCritic<'_, T> {
    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.inner.bind(tape, trainable)
    }

    fn field(&self, tape: &Tape<T>, params: &[Var], x: Var, y: Var) -> Result<Var> {
        let f = self.inner.field(tape, params, x, y)?;
        let s = tape.constant(self.sign.clone());
        tape.mul(f, s)
    }
}

/// Loss parts of one generator evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub total: f64,
    pub lp: f64,
    pub adv: f64,
    pub lambda_adv: f64,
}

/// `lp + lambda * adv` on the tape.
pub fn combined_on<T: Scalar>(tape: &Tape<T>, lp: Var, adv: Option<Var>, lambda: T) -> Result<Var> {
    match adv {
        None => Ok(lp),
        Some(a) => {
            let w = tape.scale(a, lambda);
            tape.add(lp, w)
        }
    }
}

pub fn combine(lp: f64, adv: f64, lambda_adv: f64) -> Components {
    Components {
        total: lp + lambda_adv * adv,
        lp,
        adv,
        lambda_adv,
    }
}

/// Adversarial weight state, owned by the trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct Balancer {
    pub mode: Balance,
    pub decay: f64,
    pub ema_lp: Option<f64>,
    pub ema_adv: Option<f64>,
    lambda: f64,
}

impl Balancer {
    pub fn new(mode: Balance, decay: f64) -> Self {
        let lambda = match mode {
            Balance::Fixed(l) => l,
            Balance::Equal => 1.0,
        };
        Balancer {
            mode,
            decay,
            ema_lp: None,
            ema_adv: None,
            lambda,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_initialized(&self) -> bool {
        self.ema_lp.is_some()
    }

    /// Folds one epoch's mean `|L_p|` and `|L_adv|` into the averages; the
    /// first call seeds them.
    pub fn update(&mut self, mean_lp: f64, mean_adv: f64) {
        let (lp, adv) = (mean_lp.abs(), mean_adv.abs());
        let d = self.decay;
        self.ema_lp = Some(self.ema_lp.map_or(lp, |e| d * e + (1.0 - d) * lp));
        self.ema_adv = Some(self.ema_adv.map_or(adv, |e| d * e + (1.0 - d) * adv));
        if self.mode == Balance::Equal {
            self.lambda = self.ema_lp.unwrap() / (self.ema_adv.unwrap() + BALANCE_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{IdentityField, LinearField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn lp_examples() {
        let z = row(&[0.0, 0.0]);
        assert_eq!(lp_loss(&z, &z, 1.5, None).unwrap(), 0.0);
        assert!((lp_loss(&z, &row(&[1.0, 4.0]), 1.5, None).unwrap() - 9.0).abs() < 1e-12);
        let r = row(&[0.3, -1.2]);
        let a = lp_loss(&z, &r, 2.0, None).unwrap();
        let b = lp_loss(&z, &r.scale(3.0), 2.0, None).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12);
    }

    #[test]
    fn sigma_is_validated_and_applied() {
        let z = row(&[0.0, 0.0]);
        let t = row(&[2.0, 4.0]);
        let s = row(&[2.0, 2.0]);
        assert!((lp_loss(&z, &t, 1.0, Some(&s)).unwrap() - 3.0).abs() < 1e-12);
        assert!(lp_loss(&z, &t, 1.0, Some(&row(&[1.0, 0.0]))).is_err());
        assert!(lp_loss(&z, &t, 1.0, Some(&row(&[1.0, f64::INFINITY]))).is_err());
    }

    #[test]
    fn lipschitz_norm_of_linear_critic() {
        let a = row(&[3.0, 4.0]);
        let c = LinearField { coef: a };
        let (x, y) = (row(&[0.0, 0.0]), row(&[0.5, -1.0]));
        assert!((lipschitz_grad_norm(&c, &x, &y, 2.0, None).unwrap() - 5.0).abs() < 1e-12);
        let want = 91f64.powf(1.0 / 3.0);
        assert!((lipschitz_grad_norm(&c, &x, &y, 3.0, None).unwrap() - want).abs() < 1e-12);
        let two = row(&[2.0, 2.0]);
        assert!((lipschitz_grad_norm(&c, &x, &y, 2.0, Some(&two)).unwrap() - 10.0).abs() < 1e-12);
        assert!(lipschitz_grad_norm(&c, &x, &y, 1.0, None).is_err());
    }

    #[test]
    fn penalty_examples() {
        let (x, y1, y2) = (row(&[0.0, 0.0]), row(&[1.0, 2.0]), row(&[-1.0, 0.5]));
        let unit = LinearField { coef: row(&[0.6, 0.8]) };
        assert!(gradient_penalty(&unit, &x, &y1, &y2, 2.0, 10.0, 0.3, None).unwrap().abs() < 1e-20);
        let zero = LinearField { coef: row(&[0.0, 0.0]) };
        assert!((gradient_penalty(&zero, &x, &y1, &y2, 1.05, 10.0, 0.7, None).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn wcgan_separation_and_dual_attainment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = row(&[0.0, 0.0, 0.0]);
        let y = row(&[rng.gen(), rng.gen(), rng.gen()]);
        let c = LinearField { coef: row(&[0.3, -2.0, 1.0]) };
        let v = wcgan_objective(&c, &[x.clone()], &[y.clone()], &[vec![y.clone()]]).unwrap();
        assert_eq!(v, 0.0);
        // alpha = |r|^(p-1) sign(r) / ||r||_p^(p-1) attains ||r||_p
        let g = row(&[0.1, 0.9, -0.4]);
        let p: f64 = 1.5;
        let q = p / (p - 1.0);
        let r = y.sub(&g).unwrap();
        let np = r.norm_p(p);
        let alpha = r.map(|v| v.signum() * v.abs().powf(p - 1.0) / np.powf(p - 1.0));
        assert!((alpha.norm_p(q) - 1.0).abs() < 1e-12);
        let opt = wcgan_objective(&LinearField { coef: alpha }, &[x.clone()], &[y.clone()], &[vec![g.clone()]]).unwrap();
        assert!((opt - np).abs() < 1e-12);
        for _ in 0..20 {
            let a = Tensor::from_fn(&[1, 1, 3], |_| rng.gen_range(-1.0..1.0));
            let a = a.scale(1.0 / a.norm_p(q));
            let v = wcgan_objective(&LinearField { coef: a }, &[x.clone()], &[y.clone()], &[vec![g.clone()]]).unwrap();
            assert!(v <= np + 1e-12);
        }
        assert!(wcgan_objective(&c, &[], &[], &[]).is_err());
    }

    #[test]
    fn linearized_examples() {
        assert!((linearized_jw(&[row(&[3.0, 4.0])], 2.0) - 5.0).abs() < 1e-12);
        assert!((linearized_jw(&[row(&[3.0, 4.0])], 1.0) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn ccgan_examples() {
        let x = row(&[0.0, 0.0]);
        let y = row(&[1.0, -2.0]);
        let zero = row(&[0.0, 0.0]);
        assert_eq!(ccgan_loss(&IdentityField, &[x.clone()], &[y.clone()], &[y.clone()]).unwrap(), 0.0);
        assert_eq!(ccgan_loss(&IdentityField, &[x.clone()], &[y.clone()], &[zero.clone()]).unwrap(), 3.0);
        // composed critic value equals the C-CGAN term
        let s = ccgan_sign(&IdentityField, &x, &y, &zero).unwrap();
        let sc = SignedCritic { inner: &IdentityField, sign: s };
        let d = wcgan_objective(&sc, &[x], &[y], &[vec![zero]]).unwrap();
        assert_eq!(d, 3.0);
    }

    #[test]
    fn combined_and_balancer() {
        let c = combine(2.0, 5.0, 0.0);
        assert_eq!(c.total, 2.0);
        let c = combine(0.1, 0.2, 0.3);
        assert!((c.lp + c.lambda_adv * c.adv - c.total).abs() < 1e-12);
        let mut b = Balancer::new(Balance::Equal, 0.9);
        b.update(4.0, -2.0);
        assert!((b.lambda() - 2.0).abs() < 1e-9);
        b.update(2.0, 2.0);
        let (el, ea) = (b.ema_lp.unwrap(), b.ema_adv.unwrap());
        assert!((b.lambda() * ea - el).abs() / el < 1e-9);
        let mut f = Balancer::new(Balance::Fixed(0.25), 0.9);
        f.update(1.0, 100.0);
        assert_eq!(f.lambda(), 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!((LossConfig::default().p_adv() - 21.0).abs() < 1e-9);
        let bad = LossConfig { q: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { p_adv: Some(2.0), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
