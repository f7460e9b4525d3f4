//! Generator and discriminator networks built on the tape.
//!
//! The conditional discriminator value is the pixel sum of a stride-free
//! field map, `D_X(Y) = sum_y F(X, Y)(y)`, so one parameter set applies to
//! any image extent.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    GeneratorUnet,
    DiscriminatorDenet,
    DiscriminatorLinear,
}

impl NetKind {
    pub fn code(self) -> u32 {
        match self {
            NetKind::GeneratorUnet => 0,
            NetKind::DiscriminatorDenet => 1,
            NetKind::DiscriminatorLinear => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(NetKind::GeneratorUnet),
            1 => Some(NetKind::DiscriminatorDenet),
            2 => Some(NetKind::DiscriminatorLinear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub kind: NetKind,
    /// Resolution levels (generator) or conv layers (discriminators).
    pub depth: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Convs per resolution level, generator only.
    pub convs_per_level: usize,
    pub leaky_slope: f64,
    /// Extra i.i.d. normal input channels, generator only.
    pub latent_channels: usize,
    /// Channels of the conditioning input `X`.
    pub input_channels: usize,
    /// Init scale of the last conv relative to fan-in init.
    pub output_init_gain: f64,
    /// Linear discriminator: normalize `alpha(X)` to unit `L_q` norm.
    pub alpha_norm_q: Option<f64>,
    pub seed: u64,
}

impl NetConfig {
    pub fn generator() -> Self {
        NetConfig {
            kind: NetKind::GeneratorUnet,
            depth: 3,
            widths: vec![16, 32, 64],
            kernel: 3,
            convs_per_level: 2,
            leaky_slope: 0.2,
            latent_channels: 0,
            input_channels: 1,
            output_init_gain: 0.1,
            alpha_norm_q: None,
            seed: 0,
        }
    }

    pub fn discriminator() -> Self {
        NetConfig {
            kind: NetKind::DiscriminatorDenet,
            depth: 5,
            widths: vec![16, 16, 16, 16, 1],
            kernel: 3,
            convs_per_level: 1,
            leaky_slope: 0.2,
            latent_channels: 0,
            input_channels: 1,
            output_init_gain: 1.0,
            alpha_norm_q: None,
            seed: 0,
        }
    }

    pub fn linear_discriminator() -> Self {
        NetConfig {
            kind: NetKind::DiscriminatorLinear,
            depth: 2,
            widths: vec![8, 1],
            ..Self::discriminator()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.depth = widths.len();
        self.widths = widths.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("net-config", m));
        if self.depth == 0 || self.widths.len() != self.depth {
            return bad(format!("depth {} with widths {:?}", self.depth, self.widths));
        }
        if self.widths.contains(&0) {
            return bad(format!("zero width in {:?}", self.widths));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel extent {} must be odd", self.kernel));
        }
        if self.input_channels == 0 {
            return bad("input channels must be positive".into());
        }
        match self.kind {
            NetKind::GeneratorUnet => {
                if self.convs_per_level == 0 {
                    return bad("convs per level must be positive".into());
                }
            }
            NetKind::DiscriminatorDenet | NetKind::DiscriminatorLinear => {
                if self.widths[self.depth - 1] != 1 {
                    return bad(format!(
                        "discriminator must end with one channel, widths {:?}",
                        self.widths
                    ));
                }
                if self.latent_channels != 0 {
                    return bad("latent channels are a generator option".into());
                }
            }
        }
        if let Some(q) = self.alpha_norm_q {
            if !(q >= 1.0) {
                return bad(format!("alpha norm exponent {q}"));
            }
        }
        Ok(())
    }

    /// `(out, in, k)` of every conv in declaration order.
    fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let w = &self.widths;
        let mut shapes = Vec::new();
        match self.kind {
            NetKind::GeneratorUnet => {
                let mut cin = self.input_channels + self.latent_channels;
                for &wl in w {
                    for _ in 0..self.convs_per_level {
                        shapes.push((wl, cin));
                        cin = wl;
                    }
                }
                for l in (0..self.depth - 1).rev() {
                    let mut cin = w[l + 1] + w[l];
                    for _ in 0..self.convs_per_level {
                        shapes.push((w[l], cin));
                        cin = w[l];
                    }
                }
                shapes.push((1, w[0]));
            }
            NetKind::DiscriminatorDenet => {
                let mut cin = self.input_channels + 1;
                for &wl in w {
                    shapes.push((wl, cin));
                    cin = wl;
                }
            }
            NetKind::DiscriminatorLinear => {
                let mut cin = self.input_channels;
                for &wl in w {
                    shapes.push((wl, cin));
                    cin = wl;
                }
            }
        }
        shapes
    }

    /// Shapes of all parameter tensors in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.kernel;
        let mut out = Vec::new();
        for (co, ci) in self.conv_shapes() {
            out.push(vec![co, ci, k, k]);
            out.push(vec![co]);
        }
        if self.kind == NetKind::GeneratorUnet {
            out.push(vec![1]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters plus the architecture that interprets them.
#[derive(Clone, Debug)]
pub struct Net<T> {
    config: NetConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Net<T> {
    /// Seeded fan-in uniform init, zero biases, unit identity gain.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.param_shapes();
        let n_convs = config.conv_shapes().len();
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let t = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let mut bound = (6.0 / fan_in).sqrt();
                let conv_index = i / 2;
                if conv_index == n_convs - 1 {
                    bound *= config.output_init_gain;
                }
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            } else if config.kind == NetKind::GeneratorUnet && i == shapes.len() - 1 {
                Tensor::ones(shape)
            } else {
                Tensor::zeros(shape)
            };
            params.push(t);
        }
        Ok(Net { config, params })
    }

    pub fn from_params(config: NetConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::invalid("net", "parameter shapes do not match config"));
        }
        Ok(Net { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.config.kind
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Same architecture, every parameter zero.
    pub fn zeroed(&self) -> Self {
        Net {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.all_finite())
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            for v in p.data() {
                h.write_u64(v.as_f64().to_bits());
            }
        }
        h.finish()
    }

    /// Registers the parameters on `tape`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn require(&self, kinds: &[NetKind], op: &'static str) -> Result<()> {
        if kinds.contains(&self.config.kind) {
            Ok(())
        } else {
            Err(Error::invalid(op, format!("not defined for {:?}", self.config.kind)))
        }
    }

    fn conv(&self, tape: &Tape<T>, p: &[Var], idx: usize, x: Var) -> Result<Var> {
        tape.conv2d_same(x, p[2 * idx], Some(p[2 * idx + 1]))
    }

    /// U-Net prediction on the tape.
    pub fn generator_on(
        &self,
        tape: &Tape<T>,
        p: &[Var],
        x: Var,
        z: Option<Var>,
    ) -> Result<Var> {
        self.require(&[NetKind::GeneratorUnet], "generator_forward")?;
        let cfg = &self.config;
        let shape = tape.shape(x);
        let (c, h, w) = match shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("generator_forward", format!("{shape:?}"))),
        };
        if c != cfg.input_channels {
            return Err(Error::shape(
                "generator_forward",
                format!("input {shape:?}, expected {} channels", cfg.input_channels),
            ));
        }
        let m = 1usize << cfg.depth;
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "generator_forward",
                format!("extents {h}x{w} not divisible by 2^depth = {m}"),
            ));
        }
        let input = match (cfg.latent_channels, z) {
            (0, None) => x,
            (0, Some(_)) => {
                return Err(Error::invalid("generator_forward", "latent input on a deterministic generator"))
            }
            (_, None) => {
                return Err(Error::invalid("generator_forward", "latent input required"))
            }
            (lc, Some(z)) => {
                if tape.shape(z) != [lc, h, w] {
                    return Err(Error::shape(
                        "generator_forward",
                        format!("latent {:?}, expected [{lc}, {h}, {w}]", tape.shape(z)),
                    ));
                }
                tape.concat_channels(&[x, z])?
            }
        };

        let slope = T::lit(cfg.leaky_slope);
        let mut conv_idx = 0;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut cur = input;
        for level in 0..cfg.depth {
            if level > 0 {
                cur = tape.avg_pool2(cur)?;
            }
            for _ in 0..cfg.convs_per_level {
                cur = tape.leaky_relu(self.conv(tape, p, conv_idx, cur)?, slope);
                conv_idx += 1;
            }
            skips.push(cur);
        }
        for level in (0..cfg.depth - 1).rev() {
            let up = tape.upsample2(cur)?;
            cur = tape.concat_channels(&[up, skips[level]])?;
            for _ in 0..cfg.convs_per_level {
                cur = tape.relu(self.conv(tape, p, conv_idx, cur)?);
                conv_idx += 1;
            }
        }
        let residual = self.conv(tape, p, conv_idx, cur)?;
        let x0 = if c == 1 { x } else { tape.slice_channels(x, 0, 1)? };
        let gain = tape.broadcast(p[p.len() - 1], &[1, h, w])?;
        let passthrough = tape.mul(x0, gain)?;
        tape.add(residual, passthrough)
    }

    /// Plain prediction without gradients.
    pub fn generator_forward(&self, x: &Tensor<T>, z: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let zv = z.map(|z| tape.constant(z.clone()));
        let out = self.generator_on(&tape, &p, xv, zv)?;
        Ok((*tape.value(out)).clone())
    }

    /// Draws a latent input for an `h x w` prediction.
    pub fn sample_latent(&self, h: usize, w: usize, rng: &mut impl Rng) -> Option<Tensor<T>> {
        let lc = self.config.latent_channels;
        (lc > 0).then(|| {
            Tensor::from_fn(&[lc, h, w], |_| {
                let v: f64 = rng.sample(StandardNormal);
                T::lit(v)
            })
        })
    }

    /// `alpha(X)` of the linear discriminator, optionally scaled to unit
    /// `L_q` norm.
    pub fn alpha_on(&self, tape: &Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.require(&[NetKind::DiscriminatorLinear], "linear_alpha")?;
        let slope = T::lit(self.config.leaky_slope);
        let mut cur = x;
        for l in 0..self.config.depth {
            cur = self.conv(tape, p, l, cur)?;
            if l + 1 < self.config.depth {
                cur = tape.leaky_relu(cur, slope);
            }
        }
        match self.config.alpha_norm_q {
            None => Ok(cur),
            Some(q) => {
                let q = T::lit(q);
                let s = tape.reduce_sum(tape.abs_pow(cur, q)?);
                let inv = tape.pow_abs_any(s, -T::one() / q);
                let inv = tape.broadcast(inv, &tape.shape(cur))?;
                tape.mul(cur, inv)
            }
        }
    }

    pub fn linear_alpha(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let a = self.alpha_on(&tape, &p, xv)?;
        Ok((*tape.value(a)).clone())
    }

    fn denet_field(&self, tape: &Tape<T>, p: &[Var], x: Var, y: Var) -> Result<Var> {
        let slope = T::lit(self.config.leaky_slope);
        let mut cur = tape.concat_channels(&[x, y])?;
        for l in 0..self.config.depth {
            cur = self.conv(tape, p, l, cur)?;
            if l + 1 < self.config.depth {
                cur = tape.leaky_relu(cur, slope);
            }
        }
        Ok(cur)
    }
}

/// A conditional discriminator body `F(X, Y)` producing a map over pixels.
pub trait Critic<T: Scalar> {
    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var>;

    /// The field map `F(X, Y)`, same extents as `Y`.
    fn field(&self, tape: &Tape<T>, params: &[Var], x: Var, y: Var) -> Result<Var>;

    /// `D_X(Y) = sum_y F(X, Y)(y)`.
    fn value_on(&self, tape: &Tape<T>, params: &[Var], x: Var, y: Var) -> Result<Var> {
        let f = self.field(tape, params, x, y)?;
        Ok(tape.reduce_sum(f))
    }
}

fn check_pair_extents<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<()> {
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx.len() != 3 || sy.len() != 3 || sx[1..] != sy[1..] {
        return Err(Error::shape("discriminator", format!("X {sx:?} vs Y {sy:?}")));
    }
    Ok(())
}

impl<T: Scalar> Critic<T> for Net<T> {
    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        Net::bind(self, tape, trainable)
    }

    fn field(&self, tape: &Tape<T>, p: &[Var], x: Var, y: Var) -> Result<Var> {
        check_pair_extents(tape, x, y)?;
        match self.config.kind {
            NetKind::DiscriminatorDenet => self.denet_field(tape, p, x, y),
            NetKind::DiscriminatorLinear => {
                let a = self.alpha_on(tape, p, x)?;
                tape.mul(a, y)
            }
            NetKind::GeneratorUnet => Err(Error::invalid("discriminator", "generator is not a critic")),
        }
    }
}

/// `F(X, Y) = a * Y` with a fixed coefficient image `a` exposed as the only
/// parameter.
#[derive(Clone, Debug)]
pub struct LinearField<T> {
    pub coef: Tensor<T>,
}

impl<T: Scalar> Critic<T> for LinearField<T> {
    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        vec![if trainable {
            tape.var(self.coef.clone())
        } else {
            tape.constant(self.coef.clone())
        }]
    }

    fn field(&self, tape: &Tape<T>, p: &[Var], x: Var, y: Var) -> Result<Var> {
        check_pair_extents(tape, x, y)?;
        tape.mul(p[0], y)
    }
}

/// `F(X, Y) = Y`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityField;

impl<T: Scalar> Critic<T> for IdentityField {
    fn bind(&self, _: &Tape<T>, _: bool) -> Vec<Var> {
        Vec::new()
    }

    fn field(&self, tape: &Tape<T>, _: &[Var], x: Var, y: Var) -> Result<Var> {
        check_pair_extents(tape, x, y)?;
        Ok(y)
    }
}

/// Field map of `critic` at `(x, y)`, before pixel summation.
pub fn field_map<T: Scalar>(critic: &dyn Critic<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = critic.bind(&tape, false);
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let f = critic.field(&tape, &p, xv, yv)?;
    Ok((*tape.value(f)).clone())
}

/// `D_X(Y)`.
pub fn discriminator_value<T: Scalar>(critic: &dyn Critic<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    Ok(field_map(critic, x, y)?.sum())
}
