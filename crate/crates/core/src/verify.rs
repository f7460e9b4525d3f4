//! Independent oracles and the invariant checks built on them.
//!
//! The oracles here use different algorithms from the code they check:
//! vertex enumeration for transport, projected ascent for dual suprema,
//! plain gradient descent for constant predictors and central differences
//! for gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    ccgan_term_on, gaussian_xe, gradient_penalty_on, linearized_jw, lipschitz_grad_norm, lp_loss, lp_loss_on,
    wcgan_objective, wcgan_term_on,
};
use crate::nets::{Critic, LinearField, Net, NetConfig};
use crate::optim::Adam;
use crate::ot::{
    jw2_exact, jw_exact, kr_dual_gap, optimal_witness, transport, wasserstein_exact, DiscreteJoint,
    DiscretePdf, JointAtom,
};
use crate::tensor::{grad_check, Tape, Tensor, Var};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- oracles

/// Minimum transport cost over all vertices of the coupling polytope, by
/// enumerating every choice of `m + n - 1` cells. Intended for supports of
/// at most four points.
pub fn vertex_transport_value(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 || m > 4 || n > 4 {
        return Err(Error::invalid("vertex_transport_value", format!("{m} x {n} is outside 1..=4")));
    }
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let rhs: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..k).collect();
    loop {
        let cols: Vec<(usize, usize)> = pick.iter().map(|&c| cells[c]).collect();
        if let Some(x) = solve_basis(&cols, m, &rhs) {
            if x.iter().all(|&v| v >= -1e-12) {
                let c: f64 = cols.iter().zip(&x).map(|(&(i, j), v)| v.max(0.0) * cost[i][j]).sum();
                best = best.min(c);
            }
        }
        // next k-combination of the cells
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if pick[i] < cells.len() - k + i {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..k {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// Solves the marginal equations restricted to `cols`; `None` when the
/// columns are not a basis.
fn solve_basis(cols: &[(usize, usize)], m: usize, rhs: &[f64]) -> Option<Vec<f64>> {
    let rows = rhs.len();
    let k = cols.len();
    let mut a = vec![vec![0.0; k + 1]; rows];
    for (c, &(i, j)) in cols.iter().enumerate() {
        a[i][c] = 1.0;
        a[m + j][c] = 1.0;
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[k] = rhs[r];
    }
    let mut r = 0;
    for c in 0..k {
        let piv = (r..rows).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[piv][c].abs() < 1e-12 {
            return None;
        }
        a.swap(r, piv);
        for rr in 0..rows {
            if rr != r {
                let f = a[rr][c] / a[r][c];
                if f != 0.0 {
                    for cc in c..=k {
                        a[rr][cc] -= f * a[r][cc];
                    }
                }
            }
        }
        r += 1;
    }
    if a[k..].iter().any(|row| row[k].abs() > 1e-9) {
        return None;
    }
    Some((0..k).map(|c| a[c][k] / a[c][c]).collect())
}

/// `sup sum_y alpha(y) r(y)` over `||alpha||_q = 1` by projected ascent,
/// with `1/p + 1/q = 1`. For `p = 1` the feasible set is the `q = inf`
/// ball and the projection is a clip; otherwise the ascent runs on an
/// unconstrained `beta` with `alpha = beta / ||beta||_q`.
pub fn projected_dual_sup(r: &[f64], p: f64, iters: usize) -> f64 {
    let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let r: Vec<f64> = r.iter().map(|v| v / scale).collect();
    let dot = |a: &[f64]| a.iter().zip(&r).map(|(u, v)| u * v).sum::<f64>();
    if p == 1.0 {
        let mut alpha = vec![0.0; r.len()];
        for _ in 0..iters {
            for (a, v) in alpha.iter_mut().zip(&r) {
                *a = (*a + 0.5 * v).clamp(-1.0, 1.0);
            }
        }
        return dot(&alpha) * scale;
    }
    let q = p / (p - 1.0);
    let norm_q = |b: &[f64]| b.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q);
    let mut beta = r.clone();
    for v in &mut beta {
        *v += 0.1;
    }
    let nb = norm_q(&beta);
    beta.iter_mut().for_each(|v| *v /= nb);
    let lr = 0.2;
    for _ in 0..iters {
        // f(beta) = <r, beta> / ||beta||_q with ||beta||_q = 1
        let f = dot(&beta);
        let grad: Vec<f64> = beta
            .iter()
            .zip(&r)
            .map(|(b, rv)| rv - f * b.signum() * b.abs().powf(q - 1.0))
            .collect();
        for (b, g) in beta.iter_mut().zip(&grad) {
            *b += lr * g;
        }
        let nb = norm_q(&beta);
        beta.iter_mut().for_each(|v| *v /= nb);
    }
    dot(&beta) * scale
}

/// Minimizes `sum_i |t_i - c|^p` over a constant `c` by gradient descent on
/// the tape with a decaying step.
pub fn fit_constant(targets: &[f64], p: f64, steps: usize) -> Result<f64> {
    let target = Tensor::from_vec(targets.to_vec());
    let mut c = 0.5;
    for k in 0..steps {
        let tape = Tape::<f64>::new();
        let cv = tape.var(Tensor::from_vec(vec![c]));
        let pred = tape.broadcast(cv, &[targets.len()])?;
        let t = tape.constant(target.clone());
        let l = lp_loss_on(&tape, pred, t, p, None)?;
        let g = tape.grad_values(l, &[cv])?[0].data()[0];
        c -= g / (k as f64 + 10.0);
    }
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct PointCriticConfig {
    pub widths: Vec<usize>,
    pub q: f64,
    /// Final penalty weight, reached geometrically from `lambda_start`
    /// over the first half of training. The step size then decays
    /// linearly to zero.
    pub lambda_gp: f64,
    pub lambda_start: f64,
    pub steps: usize,
    pub lr: f64,
    /// Uniform interpolation draws per real/fake segment and step; segments
    /// are weighted by the product of the point weights.
    pub penalty_draws: usize,
    pub seed: u64,
}

impl Default for PointCriticConfig {
    fn default() -> Self {
        PointCriticConfig {
            widths: vec![16, 16, 1],
            q: 2.0,
            lambda_gp: 1000.0,
            lambda_start: 10.0,
            steps: 3000,
            lr: 5e-3,
            penalty_draws: 2,
            seed: 0,
        }
    }
}

fn point_image(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, 1, v.len()], v.to_vec()).expect("point extent")
}

/// Trains a sum-pooled convolutional critic on `P` (real) against `Q`
/// (fake) with the gradient penalty and returns `E_P D - E_Q D`.
pub fn train_point_critic(p: &DiscretePdf, q: &DiscretePdf, cfg: &PointCriticConfig) -> Result<(Net<f64>, f64)> {
    p.validate()?;
    q.validate()?;
    let d = p.dim();
    let mut critic = Net::<f64>::new(NetConfig::discriminator().with_widths(&cfg.widths).with_seed(cfg.seed))?;
    let mut opt = Adam::new(critic.params(), cfg.lr, 0.5, 0.9);
    let x = Tensor::zeros(&[1, 1, d]);
    let ps: Vec<Tensor<f64>> = p.support.iter().map(|s| point_image(s)).collect();
    let qs: Vec<Tensor<f64>> = q.support.iter().map(|s| point_image(s)).collect();
    let mut rng = rng(cfg.seed ^ 0x5EED);
    let kr = |tape: &Tape<f64>, params: &[Var], critic: &Net<f64>| -> Result<Var> {
        let xv = tape.constant(x.clone());
        let mut acc = tape.constant(Tensor::from_vec(vec![0.0]));
        for (pts, w, sgn) in [(&ps, &p.weights, 1.0), (&qs, &q.weights, -1.0)] {
            for (s, wi) in pts.iter().zip(w) {
                let v = critic.value_on(tape, params, xv, tape.constant(s.clone()))?;
                let v = tape.reshape(v, &[1])?;
                acc = tape.add(acc, tape.scale(v, sgn * wi))?;
            }
        }
        Ok(acc)
    };
    for step in 0..cfg.steps {
        let ramp = (2.0 * step as f64 / cfg.steps as f64).min(1.0);
        let lambda = cfg.lambda_start * (cfg.lambda_gp / cfg.lambda_start).powf(ramp);
        opt.lr = cfg.lr * (2.0 * (1.0 - step as f64 / cfg.steps as f64)).min(1.0);
        let tape = Tape::new();
        let params = critic.bind(&tape, true);
        let mut obj = kr(&tape, &params, &critic)?;
        let xv = tape.constant(x.clone());
        let scale = 1.0 / cfg.penalty_draws as f64;
        for (pj, wj) in ps.iter().zip(&p.weights) {
            for (qk, wk) in qs.iter().zip(&q.weights) {
                for _ in 0..cfg.penalty_draws {
                    let eps: f64 = rng.gen();
                    let y_hat = crate::losses::interpolate(pj, qk, eps)?;
                    let (gp, _) =
                        gradient_penalty_on(&tape, &critic, &params, xv, &y_hat, cfg.q, lambda, None)?;
                    let gp = tape.reshape(gp, &[1])?;
                    obj = tape.sub(obj, tape.scale(gp, wj * wk * scale))?;
                }
            }
        }
        let loss = tape.scale(obj, -1.0);
        let grads = tape.grad_values(loss, &params)?;
        opt.step(critic.params_mut(), &grads)?;
        if !critic.all_finite() {
            return Err(Error::NonFinite("point critic parameters".into()));
        }
    }
    let tape = Tape::new();
    let params = critic.bind(&tape, false);
    let v = kr(&tape, &params, &critic)?;
    let est = tape.scalar(v);
    Ok((critic, est))
}

// ---------------------------------------------------------------- generators

fn random_pdf(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DiscretePdf {
    let support: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
    let rest: f64 = weights[..n - 1].iter().sum();
    weights[n - 1] = 1.0 - rest;
    DiscretePdf { support, weights }
}

/// Random joints sharing the same `X` atoms and marginal weights. The `X`
/// atoms are at least 0.5 apart.
pub fn random_joints(rng: &mut ChaCha8Rng, count: usize) -> Vec<DiscreteJoint> {
    let nx = rng.gen_range(1..=3);
    let mut marginal = random_pdf(rng, nx, 1);
    for (i, x) in marginal.support.iter_mut().enumerate() {
        x[0] = i as f64 + rng.gen_range(-0.25..0.25);
    }
    (0..count)
        .map(|_| DiscreteJoint {
            atoms: marginal
                .support
                .iter()
                .zip(&marginal.weights)
                .map(|(x, &weight)| {
                    let ny = rng.gen_range(1..=3);
                    JointAtom {
                        x: x.clone(),
                        weight,
                        conditional: random_pdf(rng, ny, 2),
                    }
                })
                .collect(),
        })
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------- checks

fn worst(acc: &mut (f64, String), err: f64, what: impl FnOnce() -> String) {
    if err > acc.0 || err.is_nan() {
        *acc = (err, what());
    }
}

/// Tape gradients of every forward op and both adversarial terms against
/// central differences (`< 1e-4`), and of the gradient penalty with respect
/// to critic weights (`< 1e-3`), on 8x8 inputs.
pub fn check_autodiff(seeds: usize) -> Vec<Check> {
    let run = || -> Result<((f64, String), (f64, String))> {
        let mut first = (0.0, String::new());
        let mut second = (0.0, String::new());
        let h = 1e-5;
        for seed in 0..seeds as u64 {
            let mut r = rng(seed);
            let x = rand_tensor(&mut r, &[2, 8, 8]);
            let other = rand_tensor(&mut r, &[2, 8, 8]);
            let w = rand_tensor(&mut r, &[2, 8, 8]);
            let weight = rand_tensor(&mut r, &[3, 2, 3, 3]);
            let bias = rand_tensor(&mut r, &[3]);
            let mat = rand_tensor(&mut r, &[8, 5]);
            let wv = w.clone();
            let project = move |t: &Tape<f64>, v: Var| -> Result<Var> {
                let wc = t.constant(wv.clone());
                Ok(t.reduce_sum(t.mul(v, wc)?))
            };
            type Op = Box<dyn Fn(&Tape<f64>, Var) -> Result<Var>>;
            let (o, wt, b, m) = (other.clone(), weight.clone(), bias.clone(), mat.clone());
            let (o2, o3) = (other.clone(), other.clone());
            let (wt2, b2) = (weight.clone(), bias.clone());
            let ops: Vec<(&str, Op)> = vec![
                ("add", Box::new(move |t, v| t.add(v, t.constant(o.clone())))),
                ("sub", Box::new(move |t, v| t.sub(t.constant(o2.clone()), v))),
                ("mul", Box::new(move |t, v| t.mul(v, t.constant(o3.clone())))),
                ("scale", Box::new(|t, v| Ok(t.scale(v, -1.7)))),
                ("add-scalar", Box::new(|t, v| t.add_scalar(v, 0.3))),
                ("leaky-relu", Box::new(|t, v| Ok(t.leaky_relu(v, 0.2)))),
                ("relu", Box::new(|t, v| Ok(t.relu(v)))),
                ("abs-pow", Box::new(|t, v| t.abs_pow(v, 1.5))),
                ("signed-pow", Box::new(|t, v| Ok(t.signed_pow(v, 1.5)))),
                ("reduce-sum", Box::new(|t, v| {
                    let s = t.reduce_sum(v);
                    t.broadcast(t.reshape(s, &[1, 1, 1])?, &[2, 8, 8])
                })),
                ("channel-sum-broadcast", Box::new(|t, v| {
                    let s = t.channel_sum(t.mul(v, v)?)?;
                    t.channel_broadcast(s, 8, 8)
                })),
                ("concat-channels", Box::new(|t, v| {
                    let a = t.slice_channels(v, 1, 1)?;
                    let b = t.slice_channels(v, 0, 1)?;
                    t.concat_channels(&[a, b])
                })),
                ("avg-pool-upsample", Box::new(|t, v| t.upsample2(t.avg_pool2(v)?))),
                ("matmul", Box::new(move |t, v| {
                    let a = t.reshape(v, &[16, 8])?;
                    let p = t.matmul(a, t.constant(m.clone()), false, false)?;
                    let back = t.matmul(p, t.constant(m.clone()), false, true)?;
                    t.reshape(back, &[2, 8, 8])
                })),
                ("conv2d-same", Box::new(move |t, v| {
                    let y = t.conv2d_same(v, t.constant(wt.clone()), Some(t.constant(b.clone())))?;
                    t.slice_channels(y, 0, 2)
                })),
            ];
            for (name, op) in &ops {
                let f = |t: &Tape<f64>, v: Var| project(t, op(t, v)?);
                let g = grad_check(f, &x, h)?;
                worst(&mut first, g.max_rel_error, || format!("{name} seed {seed}"));
            }
            // conv weights and bias as leaves
            let xw = x.clone();
            let g = grad_check(
                |t: &Tape<f64>, v| {
                    let y = t.conv2d_same(t.constant(xw.clone()), v, Some(t.constant(b2.clone())))?;
                    Ok(t.reduce_sum(t.abs_pow(y, 2.0)?))
                },
                &weight,
                h,
            )?;
            worst(&mut first, g.max_rel_error, || format!("conv2d weight seed {seed}"));
            let g = grad_check(
                |t: &Tape<f64>, v| {
                    let y = t.conv2d_same(t.constant(xw.clone()), t.constant(wt2.clone()), Some(v))?;
                    Ok(t.reduce_sum(t.abs_pow(y, 2.0)?))
                },
                &bias,
                h,
            )?;
            worst(&mut first, g.max_rel_error, || format!("conv2d bias seed {seed}"));

            // adversarial terms on a small conv critic
            let critic = Net::<f64>::new(NetConfig::discriminator().with_widths(&[4, 4, 1]).with_seed(seed))?;
            let x1 = rand_tensor(&mut r, &[1, 8, 8]);
            let y1 = rand_tensor(&mut r, &[1, 8, 8]);
            let g1 = rand_tensor(&mut r, &[1, 8, 8]);
            let with_leaf = |t: &Tape<f64>, leaf: Option<Var>| {
                let mut p = critic.bind(t, false);
                if let Some(v) = leaf {
                    p[0] = v;
                }
                p
            };
            let wcgan_g = grad_check(
                |t: &Tape<f64>, v| {
                    let p = with_leaf(t, None);
                    wcgan_term_on(t, &critic, &p, t.constant(x1.clone()), t.constant(y1.clone()), &[v])
                },
                &g1,
                h,
            )?;
            worst(&mut first, wcgan_g.max_rel_error, || format!("wcgan wrt G seed {seed}"));
            let ccgan_g = grad_check(
                |t: &Tape<f64>, v| {
                    let p = with_leaf(t, None);
                    ccgan_term_on(t, &critic, &p, t.constant(x1.clone()), t.constant(y1.clone()), v)
                },
                &g1,
                h,
            )?;
            worst(&mut first, ccgan_g.max_rel_error, || format!("ccgan wrt G seed {seed}"));
            let w0 = critic.params()[0].clone();
            let wcgan_w = grad_check(
                |t: &Tape<f64>, v| {
                    let p = with_leaf(t, Some(v));
                    let g = t.constant(g1.clone());
                    wcgan_term_on(t, &critic, &p, t.constant(x1.clone()), t.constant(y1.clone()), &[g])
                },
                &w0,
                h,
            )?;
            worst(&mut first, wcgan_w.max_rel_error, || format!("wcgan wrt critic seed {seed}"));
            let ccgan_w = grad_check(
                |t: &Tape<f64>, v| {
                    let p = with_leaf(t, Some(v));
                    let g = t.constant(g1.clone());
                    ccgan_term_on(t, &critic, &p, t.constant(x1.clone()), t.constant(y1.clone()), g)
                },
                &w0,
                h,
            )?;
            worst(&mut first, ccgan_w.max_rel_error, || format!("ccgan wrt critic seed {seed}"));

            // gradient penalty: double backprop into critic weights
            let small = Net::<f64>::new(NetConfig::discriminator().with_widths(&[4, 1]).with_seed(seed))?;
            let y_hat = crate::losses::interpolate(&y1, &g1, 0.3)?;
            let w0 = small.params()[0].clone();
            let gp = grad_check(
                |t: &Tape<f64>, v| {
                    let mut p = small.bind(t, false);
                    p[0] = v;
                    let (gp, _) = gradient_penalty_on(t, &small, &p, t.constant(x1.clone()), &y_hat, 1.05, 10.0, None)?;
                    Ok(gp)
                },
                &w0,
                h,
            )?;
            worst(&mut second, gp.max_rel_error, || format!("gradient penalty seed {seed}"));
        }
        Ok((first, second))
    };
    match run() {
        Ok((a, b)) => vec![
            Check::new(
                "autodiff first order",
                a.0 < 1e-4,
                format!("max rel error {:.3e} ({}) over {seeds} seeds, tol 1e-4", a.0, a.1),
            ),
            Check::new(
                "autodiff gradient penalty",
                b.0 < 1e-3,
                format!("max rel error {:.3e} ({}) over {seeds} seeds, tol 1e-3", b.0, b.1),
            ),
        ],
        Err(e) => vec![Check::new("autodiff", false, format!("error: {e}"))],
    }
}

/// Linear critics: gradient-form norm against `||alpha||_q` and pairwise
/// difference ratios against the same bound.
pub fn check_dual_norm(critics: usize, pairs: usize) -> Check {
    let run = || -> Result<(f64, f64)> {
        let mut form_err = 0.0f64;
        let mut ratio_excess = f64::NEG_INFINITY;
        for seed in 0..critics as u64 {
            let mut r = rng(1000 + seed);
            let net = Net::<f64>::new(NetConfig::linear_discriminator().with_seed(seed))?;
            let x = rand_tensor(&mut r, &[1, 4, 4]);
            let alpha = net.linear_alpha(&x)?;
            for &q in &[1.05, 1.5, 2.0, 3.0] {
                let p = q / (q - 1.0);
                let bound = alpha.norm_p(q);
                let y = rand_tensor(&mut r, &[1, 4, 4]);
                let n = lipschitz_grad_norm(&net, &x, &y, q, None)?;
                form_err = form_err.max((n - bound).abs() / bound.max(1.0));
                let value = |y: &Tensor<f64>| crate::nets::discriminator_value(&net, &x, y);
                for _ in 0..pairs {
                    let a = rand_tensor(&mut r, &[1, 4, 4]);
                    let b = rand_tensor(&mut r, &[1, 4, 4]);
                    let ratio = (value(&a)? - value(&b)?).abs() / a.sub(&b)?.norm_p(p);
                    ratio_excess = ratio_excess.max(ratio - bound);
                }
            }
        }
        Ok((form_err, ratio_excess))
    };
    match run() {
        Ok((f, e)) => Check::new(
            "dual Lipschitz norm",
            f < 1e-10 && e <= 1e-9,
            format!("gradient form error {f:.3e} (tol 1e-10), max ratio excess {e:.3e} (tol 1e-9), {critics} critics"),
        ),
        Err(e) => Check::new("dual Lipschitz norm", false, format!("error: {e}")),
    }
}

/// Closed-form linearized distance against `(C^p)^(1/p)` and against a
/// projected-ascent supremum over unit-`q` linear critics.
pub fn check_linearized(pairs: usize) -> Check {
    let run = || -> Result<(f64, f64)> {
        let mut closed = 0.0f64;
        let mut sup = 0.0f64;
        for seed in 0..pairs as u64 {
            let mut r = rng(2000 + seed);
            let y = rand_tensor(&mut r, &[1, 4, 4]);
            let g = rand_tensor(&mut r, &[1, 4, 4]);
            let res = y.sub(&g)?;
            for &p in &[1.0, 1.5, 2.0] {
                let c = lp_loss(&g, &y, p, None)?.powf(1.0 / p);
                let jw = linearized_jw(std::slice::from_ref(&res), p);
                closed = closed.max((jw - c).abs());
                let s = projected_dual_sup(res.data(), p, 4000);
                sup = sup.max((s - jw).abs());
            }
        }
        Ok((closed, sup))
    };
    match run() {
        Ok((c, s)) => Check::new(
            "linearized equivalence",
            c < 1e-9 && s < 1e-3,
            format!("closed form error {c:.3e} (tol 1e-9), projected sup error {s:.3e} (tol 1e-3), {pairs} pairs"),
        ),
        Err(e) => Check::new("linearized equivalence", false, format!("error: {e}")),
    }
}

/// The simplex value against vertex enumeration on random 3x3 instances.
pub fn check_transport_vertices(instances: usize) -> Check {
    let run = || -> Result<f64> {
        let mut err = 0.0f64;
        for seed in 0..instances as u64 {
            let mut r = rng(3000 + seed);
            let p = random_pdf(&mut r, 3, 2);
            let q = random_pdf(&mut r, 3, 2);
            let cost = crate::ot::cost_matrix(&p, &q, 2.0, 1.0)?;
            let lp = transport(&p.weights, &q.weights, &cost)?.value;
            let v = vertex_transport_value(&p.weights, &q.weights, &cost)?;
            err = err.max((lp - v).abs());
        }
        Ok(err)
    };
    match run() {
        Ok(e) => Check::new(
            "transport vertex oracle",
            e < 1e-10,
            format!("max |simplex - vertices| {e:.3e} (tol 1e-10), {instances} instances"),
        ),
        Err(e) => Check::new("transport vertex oracle", false, format!("error: {e}")),
    }
}

/// Symmetry, separation and the triangle inequality of the joint distance.
pub fn check_metric_axioms(instances: usize) -> Check {
    let run = || -> Result<(usize, f64, f64, f64)> {
        let (mut asym, mut sep, mut pos, mut tri) = (0usize, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for seed in 0..instances as u64 {
            let mut r = rng(4000 + seed);
            let j = random_joints(&mut r, 3);
            let d = |a: &DiscreteJoint, b: &DiscreteJoint| jw_exact(a, b, 2.0, 1.0);
            let (d01, d10) = (d(&j[0], &j[1])?, d(&j[1], &j[0])?);
            if d01.to_bits() != d10.to_bits() {
                asym += 1;
            }
            sep = sep.max(d(&j[0], &j[0])?);
            pos = pos.min(d01);
            tri = tri.max(d(&j[0], &j[2])? - d01 - d(&j[1], &j[2])?);
        }
        Ok((asym, sep, pos, tri))
    };
    match run() {
        Ok((a, s, p, t)) => Check::new(
            "joint distance metric axioms",
            a == 0 && s < 1e-10 && p > 0.0 && t <= 1e-9,
            format!(
                "asymmetric {a}, max d(J,J) {s:.3e} (tol 1e-10), min d(J1,J2) {p:.3e}, max triangle excess {t:.3e} (tol 1e-9), {instances} joints"
            ),
        ),
        Err(e) => Check::new("joint distance metric axioms", false, format!("error: {e}")),
    }
}

/// Dual witnesses from the transport solver close the KR gap.
pub fn check_kr_witness(instances: usize) -> Check {
    let run = || -> Result<f64> {
        let mut gap = 0.0f64;
        for seed in 0..instances as u64 {
            let mut r = rng(5000 + seed);
            let (m, n) = (r.gen_range(2..=5), r.gen_range(2..=5));
            let p = random_pdf(&mut r, m, 2);
            let q = random_pdf(&mut r, n, 2);
            let w = optimal_witness(&p, &q, 2.0)?;
            gap = gap.max(kr_dual_gap(&p, &q, 2.0, w)?.abs());
        }
        Ok(gap)
    };
    match run() {
        Ok(g) => Check::new(
            "KR dual witness",
            g < 1e-8,
            format!("max |gap| {g:.3e} (tol 1e-8), {instances} instances"),
        ),
        Err(e) => Check::new("KR dual witness", false, format!("error: {e}")),
    }
}

/// Penalty-trained critics never exceed the exact `W_1` by more than 1e-2.
pub fn check_trained_critics(instances: usize, steps: usize) -> Check {
    let run = || -> Result<(f64, f64)> {
        let mut excess = f64::NEG_INFINITY;
        let mut ratio = f64::INFINITY;
        for seed in 0..instances as u64 {
            let mut r = rng(6000 + seed);
            let (m, n) = (r.gen_range(2..=5), r.gen_range(2..=5));
            let p = random_pdf(&mut r, m, 2);
            let q = random_pdf(&mut r, n, 2);
            let cfg = PointCriticConfig {
                steps,
                seed,
                ..PointCriticConfig::default()
            };
            let (_, est) = train_point_critic(&p, &q, &cfg)?;
            let (w1, _) = wasserstein_exact(&p, &q, 2.0, 1.0)?;
            excess = excess.max(est - w1);
            ratio = ratio.min(est / w1);
        }
        Ok((excess, ratio))
    };
    match run() {
        Ok((e, r)) => Check::new(
            "trained critic below W1",
            e <= 1e-2,
            format!("max estimate - W1 {e:.3e} (tol 1e-2), min estimate / W1 {r:.3}, {instances} instances"),
        ),
        Err(e) => Check::new("trained critic below W1", false, format!("error: {e}")),
    }
}

pub const SIGMA_SWEEP: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

/// Combined-norm distance approaches the joint distance as `sigma -> 0`.
pub fn check_sigma_limit(instances: usize) -> Check {
    let run = || -> Result<(f64, f64)> {
        let mut limit = 0.0f64;
        let mut drop = f64::NEG_INFINITY;
        for seed in 0..instances as u64 {
            let mut r = rng(7000 + seed);
            let j = random_joints(&mut r, 2);
            let exact = jw_exact(&j[0], &j[1], 2.0, 1.0)?;
            let vals: Vec<f64> = SIGMA_SWEEP
                .iter()
                .map(|&s| jw2_exact(&j[0], &j[1], s, 2.0, 2.0))
                .collect::<Result<_>>()?;
            for w in vals.windows(2) {
                drop = drop.max(w[0] - w[1]);
            }
            limit = limit.max((vals[3] - exact).abs());
        }
        Ok((limit, drop))
    };
    match run() {
        Ok((l, d)) => Check::new(
            "sigma limit",
            l < 1e-3 && d <= 1e-9,
            format!("max |jw2(0.001) - jw| {l:.3e} (tol 1e-3), max decrease along sweep {d:.3e} (tol 1e-9), {instances} instances"),
        ),
        Err(e) => Check::new("sigma limit", false, format!("error: {e}")),
    }
}

pub const OPTIMA_TARGETS: [f64; 3] = [0.0, 0.0, 3.0];

/// A trained constant recovers the mean under `p = 2` and the median under
/// `p = 1`.
pub fn check_constant_optima() -> Check {
    let mean = OPTIMA_TARGETS.iter().sum::<f64>() / OPTIMA_TARGETS.len() as f64;
    let mut sorted = OPTIMA_TARGETS;
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    match (fit_constant(&OPTIMA_TARGETS, 2.0, 20_000), fit_constant(&OPTIMA_TARGETS, 1.0, 20_000)) {
        (Ok(c2), Ok(c1)) => Check::new(
            "constant predictor optima",
            (c2 - mean).abs() < 1e-3 && (c1 - median).abs() < 1e-3,
            format!("p=2 gives {c2:.6} (mean {mean}), p=1 gives {c1:.6} (median {median}), tol 1e-3"),
        ),
        (Err(e), _) | (_, Err(e)) => Check::new("constant predictor optima", false, format!("error: {e}")),
    }
}

/// `gaussian_xe - lp_loss` does not depend on the prediction.
pub fn check_xe_identity(draws: usize) -> Check {
    let run = || -> Result<f64> {
        let mut r = rng(8000);
        let target = rand_tensor(&mut r, &[1, 8, 8]);
        let mut diffs = Vec::with_capacity(draws);
        for _ in 0..draws {
            let pred = rand_tensor(&mut r, &[1, 8, 8]);
            diffs.push(gaussian_xe(&pred, &target, 1.5, None)? - lp_loss(&pred, &target, 1.5, None)?);
        }
        let mean = diffs.iter().sum::<f64>() / draws as f64;
        Ok(diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws as f64)
    };
    match run() {
        Ok(v) => Check::new(
            "cross-entropy identity",
            v < 1e-18,
            format!("variance of gaussian_xe - lp_loss {v:.3e} (tol 1e-18), {draws} predictions"),
        ),
        Err(e) => Check::new("cross-entropy identity", false, format!("error: {e}")),
    }
}

/// Linear critic objective attains the closed form at the dual optimum.
pub fn check_dual_attainment(pairs: usize) -> Check {
    let run = || -> Result<f64> {
        let mut err = 0.0f64;
        for seed in 0..pairs as u64 {
            let mut r = rng(9000 + seed);
            let x = Tensor::zeros(&[1, 4, 4]);
            let y = rand_tensor(&mut r, &[1, 4, 4]);
            let g = rand_tensor(&mut r, &[1, 4, 4]);
            let p = 1.5;
            let res = y.sub(&g)?;
            let np = res.norm_p(p);
            let alpha = res.map(|v| v.signum() * v.abs().powf(p - 1.0) / np.powf(p - 1.0));
            let v = wcgan_objective(&LinearField { coef: alpha }, &[x], &[y], &[vec![g]])?;
            err = err.max((v - np).abs());
        }
        Ok(err)
    };
    match run() {
        Ok(e) => Check::new(
            "linear critic dual attainment",
            e < 1e-9,
            format!("max |objective - ||r||_p| {e:.3e} (tol 1e-9), {pairs} pairs"),
        ),
        Err(e) => Check::new("linear critic dual attainment", false, format!("error: {e}")),
    }
}

/// Every check at a reduced size that runs in seconds.
pub fn selftest() -> Vec<Check> {
    let mut out = check_autodiff(3);
    out.push(check_dual_norm(10, 10));
    out.push(check_linearized(10));
    out.push(check_dual_attainment(10));
    out.push(check_transport_vertices(20));
    out.push(check_metric_axioms(20));
    out.push(check_kr_witness(20));
    out.push(check_trained_critics(1, 600));
    out.push(check_sigma_limit(10));
    out.push(check_constant_optima());
    out.push(check_xe_identity(20));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertex_oracle_on_unique_coupling() {
        let cost = vec![vec![1.0], vec![1.0]];
        let v = vertex_transport_value(&[0.5, 0.5], &[1.0], &cost).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let v = vertex_transport_value(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn projected_sup_matches_hand_values() {
        assert!((projected_dual_sup(&[3.0, -4.0], 2.0, 2000) - 5.0).abs() < 1e-6);
        assert!((projected_dual_sup(&[3.0, -4.0], 1.0, 50) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn constant_fit_converges() {
        assert!((fit_constant(&[1.0, 2.0, 6.0], 2.0, 5000).unwrap() - 3.0).abs() < 1e-3);
        assert!((fit_constant(&[1.0, 2.0, 6.0], 1.0, 20000).unwrap() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn quick_selftest_passes() {
        for c in selftest() {
            assert!(c.passed, "{}", c.line());
        }
    }
}
