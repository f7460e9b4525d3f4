//! Alternating critic/generator optimization.
//!
//! Each step draws the generator outputs once, runs `n_critic` critic
//! updates on the same batch (fresh interpolation weights each time), then
//! one generator update. Batch elements run on independent tapes and their
//! gradients are summed in index order, so results do not depend on the
//! number of worker threads.

mod metrics;

pub use metrics::{MetricsRow, METRICS_HEADER};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::ghost_residual_energy;
use crate::error::{Error, Result};
use crate::losses::{self, Balance, Balancer, LossConfig, SignedCritic};
use crate::nets::{save_checkpoint, Critic, NetConfig, NetKind};
use crate::optim::Adam;
use crate::par;
use crate::synth::{sample_seed, Dataset};
use crate::tensor::{Tape, Var};
use crate::{Image, Net, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    LpOnly,
    Wcgan,
    Ccgan,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::LpOnly => "lp-only",
            Mode::Wcgan => "wcgan",
            Mode::Ccgan => "ccgan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lp-only" | "lp" => Some(Mode::LpOnly),
            "wcgan" => Some(Mode::Wcgan),
            "ccgan" => Some(Mode::Ccgan),
            _ => None,
        }
    }

    pub fn adversarial(self) -> bool {
        self != Mode::LpOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub loss: LossConfig,
    pub generator: NetConfig,
    pub critic: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Drives network init, shuffling, crops, latents and interpolation.
    pub seed: u64,
    /// Epochs after which parameters are kept.
    pub checkpoint_epochs: Vec<usize>,
    pub deterministic: bool,
    /// Train on random square crops of this extent.
    pub crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::LpOnly,
            loss: LossConfig::default(),
            generator: NetConfig::generator(),
            critic: NetConfig::discriminator(),
            epochs: 150,
            batch_size: 8,
            n_critic: 5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
            checkpoint_epochs: vec![40, 150],
            deterministic: true,
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.n_critic == 0 {
            return bad("train.n_critic must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "optimizer settings lr={} betas=({}, {}) out of range",
                self.lr, self.beta1, self.beta2
            ));
        }
        self.loss.validate()?;
        self.generator.validate()?;
        self.critic.validate()?;
        if self.generator.kind != NetKind::GeneratorUnet {
            return bad("generator must be a generator-unet".into());
        }
        if self.critic.kind == NetKind::GeneratorUnet {
            return bad("critic must be a discriminator".into());
        }
        if self.critic.input_channels != self.generator.input_channels {
            return bad("generator and critic disagree on input channels".into());
        }
        if let Some(c) = self.crop {
            let m = 1usize << self.generator.depth;
            if c == 0 || c % m != 0 {
                return bad(format!("train.crop = {c} must be a positive multiple of {m}"));
            }
        }
        Ok(())
    }

    /// Rejects datasets the networks cannot process.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let (c, h, w) = data.extents();
        if c != self.generator.input_channels {
            return Err(Error::invalid(
                "train",
                format!("dataset has {c} channels, networks expect {}", self.generator.input_channels),
            ));
        }
        let m = 1usize << self.generator.depth;
        match self.crop {
            Some(cr) if cr > h || cr > w => {
                return Err(Error::invalid("train", format!("crop {cr} exceeds extents {h}x{w}")))
            }
            Some(_) => {}
            None if h % m != 0 || w % m != 0 => {
                return Err(Error::invalid(
                    "train",
                    format!("extents {h}x{w} not divisible by 2^depth = {m}"),
                ))
            }
            None => {}
        }
        if let Some(s) = &self.loss.sigma {
            if s.shape() != [c, h, w] {
                return Err(Error::invalid("train", format!("sigma extents {:?} vs data", s.shape())));
            }
        }
        Ok(())
    }
}

/// Parameters, optimizer moments, balancing and counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Net,
    pub critic: Option<Net>,
    pub balancer: Balancer,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<MetricsRow>,
    opt_g: Adam<f64>,
    opt_d: Option<Adam<f64>>,
    rng: ChaCha8Rng,
}

/// Generator and critic parameters kept at a checkpoint epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub generator: Net,
    pub critic: Option<Net>,
}

/// A batch after cropping.
#[derive(Clone, Debug)]
pub struct Batch {
    pub xs: Vec<Image>,
    pub ys: Vec<Image>,
    pub delays: Vec<Option<usize>>,
    pub sigma: Vec<Option<Image>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    /// Mean adversarial objective over the batch.
    pub objective: f64,
    /// Mean gradient penalty.
    pub penalty: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorStats {
    pub lp: f64,
    pub adv: f64,
    pub lambda: f64,
    pub ghost: f64,
}

/// Metrics of a network pair on a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub loss_total: f64,
    pub loss_lp: f64,
    pub loss_adv: f64,
    pub lambda_adv: f64,
    pub gp_value: f64,
    pub critic_objective: f64,
    pub ghost_residual: f64,
}

fn crop_image(img: &Image, r0: usize, c0: usize, size: usize) -> Image {
    let (c, _, w) = img.chw().expect("image");
    let h = img.shape()[1];
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in r0..r0 + size {
            let base = (ch * h + r) * w;
            out.extend_from_slice(&d[base + c0..base + c0 + size]);
        }
    }
    Image::new(vec![c, size, size], out).expect("crop extents")
}

fn sum_grads(parts: Vec<Vec<Tensor>>, scale: f64) -> Vec<Tensor> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for g in it {
        for (a, b) in acc.iter_mut().zip(g) {
            for (u, v) in a.data_mut().iter_mut().zip(b.data()) {
                *u += v;
            }
        }
    }
    for a in &mut acc {
        for v in a.data_mut() {
            *v *= scale;
        }
    }
    acc
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean ghost-residual energy over pairs with a known delay.
fn batch_ghost(preds: &[Image], ys: &[Image], delays: &[Option<usize>]) -> Result<f64> {
    let mut vals = Vec::new();
    for ((p, y), d) in preds.iter().zip(ys).zip(delays) {
        if let Some(tau) = d {
            vals.push(ghost_residual_energy(p, y, *tau)?);
        }
    }
    Ok(mean(vals))
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    state: TrainState,
    threads: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        cfg.check_data(data)?;
        let mut gcfg = cfg.generator.clone();
        gcfg.seed = sample_seed(cfg.seed, 1);
        let generator = Net::new(gcfg)?;
        let critic = if cfg.mode.adversarial() {
            let mut dcfg = cfg.critic.clone();
            dcfg.seed = sample_seed(cfg.seed, 2);
            Some(Net::new(dcfg)?)
        } else {
            None
        };
        let opt_g = Adam::new(generator.params(), cfg.lr, cfg.beta1, cfg.beta2);
        let opt_d = critic
            .as_ref()
            .map(|d| Adam::new(d.params(), cfg.lr, cfg.beta1, cfg.beta2));
        let balancer = match (cfg.mode, cfg.loss.balance) {
            (Mode::LpOnly, _) => Balancer::new(Balance::Fixed(0.0), cfg.loss.ema_decay),
            (_, b) => Balancer::new(b, cfg.loss.ema_decay),
        };
        let state = TrainState {
            generator,
            critic,
            balancer,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            opt_g,
            opt_d,
            rng: ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 3)),
        };
        let threads = par::worker_count(cfg.deterministic);
        Ok(Trainer { cfg, data, state, threads })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Selects and crops the pairs at `idx`.
    pub fn make_batch(&mut self, idx: &[usize]) -> Batch {
        let mut b = Batch {
            xs: Vec::with_capacity(idx.len()),
            ys: Vec::with_capacity(idx.len()),
            delays: Vec::with_capacity(idx.len()),
            sigma: Vec::with_capacity(idx.len()),
        };
        let (_, h, w) = self.data.extents();
        for &i in idx {
            let pair = &self.data.pairs[i];
            let delay = pair.ghost.map(|g| g.delay);
            match self.cfg.crop {
                Some(c) => {
                    let r0 = self.state.rng.gen_range(0..=h - c);
                    let c0 = self.state.rng.gen_range(0..=w - c);
                    b.xs.push(crop_image(&pair.x, r0, c0, c));
                    b.ys.push(crop_image(&pair.y, r0, c0, c));
                    b.sigma.push(self.cfg.loss.sigma.as_ref().map(|s| crop_image(s, r0, c0, c)));
                    b.delays.push(delay.filter(|&d| 2 * d < c));
                }
                None => {
                    b.xs.push(pair.x.clone());
                    b.ys.push(pair.y.clone());
                    b.sigma.push(self.cfg.loss.sigma.clone());
                    b.delays.push(delay);
                }
            }
        }
        b
    }

    fn draw_latents(&mut self, n: usize, h: usize, w: usize, draws: usize) -> Vec<Vec<Option<Image>>> {
        (0..n)
            .map(|_| {
                (0..draws)
                    .map(|_| self.state.generator.sample_latent(h, w, &mut self.state.rng))
                    .collect()
            })
            .collect()
    }

    /// Current generator outputs, `draws` per pair.
    pub fn generate(&mut self, batch: &Batch, draws: usize) -> Result<Vec<Vec<Image>>> {
        let (_, h, w) = batch.xs[0].chw()?;
        let zs = self.draw_latents(batch.xs.len(), h, w, draws);
        let g = &self.state.generator;
        par::map_indexed(batch.xs.len(), self.threads, |i| {
            zs[i]
                .iter()
                .map(|z| g.generator_forward(&batch.xs[i], z.as_ref()))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect()
    }

    /// One critic update toward a larger objective minus penalty.
    pub fn critic_step(&mut self, batch: &Batch, fakes: &[Vec<Image>]) -> Result<CriticStats> {
        let mode = self.cfg.mode;
        let Some(critic) = self.state.critic.as_ref() else {
            return Err(Error::invalid("critic_step", "lp-only training has no critic"));
        };
        let n = batch.xs.len();
        let eps: Vec<f64> = (0..n).map(|_| self.state.rng.gen::<f64>()).collect();
        let loss = &self.cfg.loss;
        let results = par::map_indexed(n, self.threads, |i| -> Result<(Vec<Tensor>, f64, f64)> {
            let tape = Tape::new();
            let params = Critic::bind(critic, &tape, true);
            let x = tape.constant(batch.xs[i].clone());
            let y = tape.constant(batch.ys[i].clone());
            let fk: Vec<Var> = fakes[i].iter().map(|f| tape.constant(f.clone())).collect();
            let y_hat = losses::interpolate(&batch.ys[i], &fakes[i][0], eps[i])?;
            let sigma = batch.sigma[i].as_ref();
            let (term, gp) = match mode {
                Mode::Wcgan => {
                    let term = losses::wcgan_term_on(&tape, critic, &params, x, y, &fk)?;
                    let (gp, _) = losses::gradient_penalty_on(
                        &tape, critic, &params, x, &y_hat, loss.q, loss.lambda_gp, sigma,
                    )?;
                    (term, gp)
                }
                Mode::Ccgan => {
                    let fr = critic.field(&tape, &params, x, y)?;
                    let fg = critic.field(&tape, &params, x, fk[0])?;
                    let d = tape.sub(fr, fg)?;
                    let sign = tape.value(d).map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let term = tape.reduce_sum(tape.abs_pow(d, 1.0)?);
                    let signed = SignedCritic { inner: critic, sign };
                    let (gp, _) = losses::gradient_penalty_on(
                        &tape, &signed, &params, x, &y_hat, loss.q, loss.lambda_gp, sigma,
                    )?;
                    (term, gp)
                }
                Mode::LpOnly => unreachable!(),
            };
            let obj = tape.sub(gp, term)?;
            let grads = tape.grad_values(obj, &params)?;
            Ok((grads, tape.scalar(term), tape.scalar(gp)))
        });
        let mut grads = Vec::with_capacity(n);
        let (mut terms, mut gps) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for r in results {
            let (g, t, p) = r?;
            grads.push(g);
            terms.push(t);
            gps.push(p);
        }
        let g = sum_grads(grads, 1.0 / n as f64);
        let critic = self.state.critic.as_mut().expect("checked above");
        self.state
            .opt_d
            .as_mut()
            .expect("critic optimizer")
            .step(critic.params_mut(), &g)?;
        if !critic.all_finite() {
            return Err(Error::TrainingAborted {
                step: self.state.step,
                msg: "non-finite critic parameter".into(),
            });
        }
        Ok(CriticStats {
            objective: mean(terms),
            penalty: mean(gps),
        })
    }

    /// Per-pair content and adversarial terms at fixed predictions.
    fn loss_terms(&self, batch: &Batch, preds: &[Vec<Image>]) -> Result<Vec<(f64, f64)>> {
        let mode = self.cfg.mode;
        let critic = self.state.critic.as_ref();
        let p = self.cfg.loss.p;
        par::map_indexed(batch.xs.len(), self.threads, |i| -> Result<(f64, f64)> {
            let sigma = batch.sigma[i].as_ref();
            let mut lp = 0.0;
            let mut adv = 0.0;
            for g in &preds[i] {
                lp += losses::lp_loss(g, &batch.ys[i], p, sigma)?;
                adv += match (mode, critic) {
                    (Mode::Wcgan, Some(c)) => -crate::nets::discriminator_value(c, &batch.xs[i], g)?,
                    (Mode::Ccgan, Some(c)) => {
                        losses::ccgan_loss(c, &batch.xs[i..=i], &batch.ys[i..=i], std::slice::from_ref(g))?
                    }
                    _ => 0.0,
                };
            }
            let k = preds[i].len() as f64;
            Ok((lp / k, adv / k))
        })
        .into_iter()
        .collect()
    }

    /// One generator update on `lp + lambda * adv`; the reported values are
    /// those before the update.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GeneratorStats> {
        let mode = self.cfg.mode;
        let lambda = self.state.balancer.lambda();
        let n = batch.xs.len();
        let (_, h, w) = batch.xs[0].chw()?;
        let zs = self.draw_latents(n, h, w, self.cfg.loss.n_z);
        let g = &self.state.generator;
        let critic = self.state.critic.as_ref();
        let p = self.cfg.loss.p;
        let results = par::map_indexed(n, self.threads, |i| -> Result<(Vec<Tensor>, f64, f64, Image)> {
            let tape = Tape::new();
            let gp = g.bind(&tape, true);
            let dp = critic.map(|c| Critic::bind(c, &tape, false));
            let x = tape.constant(batch.xs[i].clone());
            let y = tape.constant(batch.ys[i].clone());
            let sigma = batch.sigma[i].as_ref();
            let k = zs[i].len() as f64;
            let mut lp_acc: Option<Var> = None;
            let mut adv_acc: Option<Var> = None;
            let mut first = None;
            for z in &zs[i] {
                let zv = z.as_ref().map(|z| tape.constant(z.clone()));
                let pred = g.generator_on(&tape, &gp, x, zv)?;
                first.get_or_insert(pred);
                let lp = losses::lp_loss_on(&tape, pred, y, p, sigma)?;
                lp_acc = Some(match lp_acc {
                    Some(a) => tape.add(a, lp)?,
                    None => lp,
                });
                let adv = match (mode, critic, &dp) {
                    (Mode::Wcgan, Some(c), Some(dp)) => {
                        let d = c.value_on(&tape, dp, x, pred)?;
                        Some(tape.scale(d, -1.0))
                    }
                    (Mode::Ccgan, Some(c), Some(dp)) => Some(losses::ccgan_term_on(&tape, c, dp, x, y, pred)?),
                    _ => None,
                };
                if let Some(a) = adv {
                    adv_acc = Some(match adv_acc {
                        Some(b) => tape.add(b, a)?,
                        None => a,
                    });
                }
            }
            let lp = tape.scale(lp_acc.expect("at least one draw"), 1.0 / k);
            let adv = adv_acc.map(|a| tape.scale(a, 1.0 / k));
            let total = losses::combined_on(&tape, lp, adv, lambda)?;
            let grads = tape.grad_values(total, &gp)?;
            let advv = adv.map_or(0.0, |a| tape.scalar(a));
            Ok((grads, tape.scalar(lp), advv, (*tape.value(first.unwrap())).clone()))
        });
        let mut grads = Vec::with_capacity(n);
        let (mut lps, mut advs, mut preds) = (Vec::new(), Vec::new(), Vec::new());
        for r in results {
            let (gr, l, a, pr) = r?;
            grads.push(gr);
            lps.push(l);
            advs.push(a);
            preds.push(pr);
        }
        let (lp, adv) = (mean(lps), mean(advs));
        if !lp.is_finite() || !adv.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.state.step,
                msg: format!("non-finite loss (lp {lp}, adv {adv})"),
            });
        }
        let gsum = sum_grads(grads, 1.0 / n as f64);
        self.state.opt_g.step(self.state.generator.params_mut(), &gsum)?;
        if !self.state.generator.all_finite() {
            return Err(Error::TrainingAborted {
                step: self.state.step,
                msg: "non-finite generator parameter".into(),
            });
        }
        let ghost = batch_ghost(&preds, &batch.ys, &batch.delays)?;
        Ok(GeneratorStats { lp, adv, lambda, ghost })
    }

    /// Critic updates followed by one generator update.
    pub fn train_step(&mut self, idx: &[usize], started: Instant) -> Result<MetricsRow> {
        let batch = self.make_batch(idx);
        let mut cstats = CriticStats::default();
        if self.cfg.mode.adversarial() {
            let fakes = self.generate(&batch, self.cfg.loss.n_z)?;
            for _ in 0..self.cfg.n_critic {
                cstats = self.critic_step(&batch, &fakes)?;
            }
            if !self.state.balancer.is_initialized() && self.cfg.loss.balance == Balance::Equal {
                let terms = self.loss_terms(&batch, &fakes)?;
                self.state.balancer.update(
                    mean(terms.iter().map(|t| t.0)),
                    mean(terms.iter().map(|t| t.1)),
                );
            }
        }
        let gstats = self.generator_step(&batch)?;
        self.state.step += 1;
        let wall = if self.cfg.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        Ok(MetricsRow {
            epoch: self.state.epoch + 1,
            step: self.state.step,
            loss_total: gstats.lp + gstats.lambda * gstats.adv,
            loss_lp: gstats.lp,
            loss_adv: gstats.adv,
            lambda_adv: gstats.lambda,
            gp_value: cstats.penalty,
            critic_objective: cstats.objective,
            ghost_residual_train: gstats.ghost,
            wall_time_s: wall,
        })
    }

    /// One shuffled pass over the data.
    pub fn train_epoch(&mut self, started: Instant, rows: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.state.rng);
        let (mut lps, mut advs) = (Vec::new(), Vec::new());
        for chunk in order.chunks(self.cfg.batch_size) {
            let row = self.train_step(chunk, started)?;
            lps.push(row.loss_lp);
            advs.push(row.loss_adv);
            rows(&row)?;
            self.state.history.push(row);
        }
        self.state.epoch += 1;
        if self.cfg.mode.adversarial() && self.cfg.loss.balance == Balance::Equal {
            self.state.balancer.update(mean(lps), mean(advs));
        }
        Ok(())
    }

    pub fn evaluate(&self, data: &Dataset, n_z: usize) -> Result<EvalRecord> {
        evaluate(&self.state, &self.cfg, data, n_z)
    }
}

/// Metrics of `state` on `data`; parameters are not modified.
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, data: &Dataset, n_z: usize) -> Result<EvalRecord> {
    evaluate_nets(
        &state.generator,
        state.critic.as_ref(),
        cfg,
        state.balancer.lambda(),
        data,
        n_z,
    )
}

/// Metrics of a generator (and critic) on `data`. Latent draws are seeded
/// from `cfg.seed`, so repeated calls agree exactly.
pub fn evaluate_nets(
    generator: &Net,
    critic: Option<&Net>,
    cfg: &TrainConfig,
    lambda: f64,
    data: &Dataset,
    n_z: usize,
) -> Result<EvalRecord> {
    let (c, h, w) = data.extents();
    let m = 1usize << generator.config().depth;
    if c != generator.config().input_channels || h % m != 0 || w % m != 0 {
        return Err(Error::invalid(
            "evaluate",
            format!("extents {c}x{h}x{w} incompatible with the generator"),
        ));
    }
    if let Some(s) = &cfg.loss.sigma {
        if s.shape() != [c, h, w] {
            return Err(Error::invalid("evaluate", "sigma extents differ from data"));
        }
    }
    let n_z = if generator.config().latent_channels > 0 { n_z.max(1) } else { 1 };
    let threads = par::worker_count(cfg.deterministic);
    let mode = cfg.mode;
    let loss = &cfg.loss;
    let sigma = loss.sigma.as_ref();
    let per = par::map_indexed(data.len(), threads, |i| -> Result<[f64; 5]> {
        let pair = &data.pairs[i];
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ 0xE7A1, i as u64));
        let mut preds = Vec::with_capacity(n_z);
        for _ in 0..n_z {
            let z = generator.sample_latent(h, w, &mut rng);
            preds.push(generator.generator_forward(&pair.x, z.as_ref())?);
        }
        let k = n_z as f64;
        let mut lp = 0.0;
        for g in &preds {
            lp += losses::lp_loss(g, &pair.y, loss.p, sigma)?;
        }
        let ghost = match pair.ghost {
            Some(gh) => ghost_residual_energy(&preds[0], &pair.y, gh.delay)?,
            None => 0.0,
        };
        let (mut adv, mut obj, mut gp) = (0.0, 0.0, 0.0);
        if let (true, Some(d)) = (mode.adversarial(), critic) {
            let xs = std::slice::from_ref(&pair.x);
            let ys = std::slice::from_ref(&pair.y);
            match mode {
                Mode::Wcgan => {
                    let fake = mean(
                        preds
                            .iter()
                            .map(|g| crate::nets::discriminator_value(d, &pair.x, g))
                            .collect::<Result<Vec<_>>>()?,
                    );
                    adv = -fake;
                    obj = crate::nets::discriminator_value(d, &pair.x, &pair.y)? - fake;
                    gp = losses::gradient_penalty(d, &pair.x, &pair.y, &preds[0], loss.q, loss.lambda_gp, 0.5, sigma)?;
                }
                Mode::Ccgan => {
                    for g in &preds {
                        adv += losses::ccgan_loss(d, xs, ys, std::slice::from_ref(g))? / k;
                    }
                    obj = adv;
                    let sign = losses::ccgan_sign(d, &pair.x, &pair.y, &preds[0])?;
                    let signed = SignedCritic { inner: d, sign };
                    gp = losses::gradient_penalty(&signed, &pair.x, &pair.y, &preds[0], loss.q, loss.lambda_gp, 0.5, sigma)?;
                }
                Mode::LpOnly => {}
            }
        }
        Ok([lp / k, adv, obj, gp, ghost])
    });
    let mut acc = [0.0; 5];
    for r in per {
        let r = r?;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = data.len() as f64;
    let [lp, adv, obj, gp, ghost] = acc.map(|v| v / n);
    let lambda = if mode.adversarial() { lambda } else { 0.0 };
    Ok(EvalRecord {
        loss_total: lp + lambda * adv,
        loss_lp: lp,
        loss_adv: adv,
        lambda_adv: lambda,
        gp_value: gp,
        critic_objective: obj,
        ghost_residual: ghost,
    })
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<Checkpoint>,
    /// Metrics file contents, header included.
    pub metrics_csv: String,
    /// Evaluation on the training data after the last epoch.
    pub final_eval: EvalRecord,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Runs all epochs. With `out_dir`, the metrics file is written as rows
/// arrive and checkpoints are saved as `generator_eNNNN.glck` /
/// `critic_eNNNN.glck`. The last metrics row is the evaluation of the
/// final parameters on the training data.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(usize, &MetricsRow),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let started = Instant::now();
    let mut sink = MetricsSink::new(out_dir)?;
    let mut checkpoints = Vec::new();
    for _ in 0..cfg.epochs {
        let mut last = None;
        trainer.train_epoch(started, &mut |row| {
            sink.push(row)?;
            last = Some(*row);
            Ok(())
        })?;
        sink.flush()?;
        let epoch = trainer.state.epoch;
        if let Some(row) = last {
            progress(epoch, &row);
        }
        if cfg.checkpoint_epochs.contains(&epoch) {
            let ck = Checkpoint {
                epoch,
                generator: trainer.state.generator.clone(),
                critic: trainer.state.critic.clone(),
            };
            if let Some(d) = out_dir {
                let (gp, cp) = checkpoint_paths(d, Some(epoch));
                save_checkpoint(&ck.generator, gp)?;
                if let Some(c) = &ck.critic {
                    save_checkpoint(c, cp)?;
                }
            }
            checkpoints.push(ck);
        }
    }
    let final_eval = trainer.evaluate(data, cfg.loss.n_z_eval)?;
    let row = MetricsRow {
        epoch: trainer.state.epoch,
        step: trainer.state.step,
        loss_total: final_eval.loss_total,
        loss_lp: final_eval.loss_lp,
        loss_adv: final_eval.loss_adv,
        lambda_adv: final_eval.lambda_adv,
        gp_value: final_eval.gp_value,
        critic_objective: final_eval.critic_objective,
        ghost_residual_train: final_eval.ghost_residual,
        wall_time_s: if cfg.deterministic { 0.0 } else { started.elapsed().as_secs_f64() },
    };
    sink.push(&row)?;
    sink.flush()?;
    if let Some(d) = out_dir {
        let (gp, cp) = checkpoint_paths(d, None);
        save_checkpoint(&trainer.state.generator, gp)?;
        if let Some(c) = &trainer.state.critic {
            save_checkpoint(c, cp)?;
        }
    }
    let mut state = trainer.into_state();
    state.history.push(row);
    Ok(TrainOutcome {
        state,
        checkpoints,
        metrics_csv: sink.csv,
        final_eval,
    })
}

/// Metrics text kept in memory and mirrored to a file.
struct MetricsSink {
    csv: String,
    file: Option<(BufWriter<File>, PathBuf)>,
}

impl MetricsSink {
    fn new(out_dir: Option<&Path>) -> Result<Self> {
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        let file = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(METRICS_FILE);
                let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
                let mut w = BufWriter::new(f);
                w.write_all(csv.as_bytes()).map_err(|e| Error::io(&p, e))?;
                Some((w, p))
            }
            None => None,
        };
        Ok(MetricsSink { csv, file })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        let line = row.to_csv_line();
        self.csv.push_str(&line);
        self.csv.push('\n');
        if let Some((w, p)) = self.file.as_mut() {
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((w, p)) = self.file.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    }
}

/// Generator and critic checkpoint paths for `epoch`, or for the final
/// parameters when `epoch` is `None`.
pub fn checkpoint_paths(dir: &Path, epoch: Option<usize>) -> (PathBuf, PathBuf) {
    let tag = epoch.map_or_else(|| "final".to_string(), |e| format!("e{e:04}"));
    (
        dir.join(format!("generator_{tag}.glck")),
        dir.join(format!("critic_{tag}.glck")),
    )
}
