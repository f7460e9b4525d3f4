//! Run configuration as flat dotted `key = value` text.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected. Lists are comma separated and optional values accept `none`.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::Balance;
use crate::nets::{NetConfig, NetKind};
use crate::synth::{load_dataset, make_dataset, make_dataset_from, Dataset, EventKind, EventSpec};
use crate::trainer::{Mode, TrainConfig};

/// File name of the resolved configuration written into every run directory.
pub const CONFIG_ECHO: &str = "config.txt";

/// First sample index of held-out data.
pub const TEST_FIRST_INDEX: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: EventSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub train: TrainConfig,
    /// Dataset file; generated from `data` when unset.
    pub data_path: Option<PathBuf>,
    pub test_data_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: EventSpec::default(),
            n_train: 200,
            n_test: 50,
            train: TrainConfig::default(),
            data_path: None,
            test_data_path: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: &[&str] = &["default", "fig2-analog"];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s)).collect()
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v.trim() == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn show_list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn kind_name(k: EventKind) -> &'static str {
    match k {
        EventKind::Linear => "linear",
        EventKind::Hyperbolic => "hyperbolic",
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "fig2-analog" => Ok(Self::fig2_analog()),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?}; known: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// 200 pairs at 64x64, checkpoints at epochs 40 and 150, with networks
    /// and crops sized for a single CPU core.
    pub fn fig2_analog() -> Self {
        let mut c = Self::default();
        c.train.generator = NetConfig::generator().with_widths(&[8, 16, 32]);
        c.train.critic = NetConfig {
            output_init_gain: 0.01,
            ..NetConfig::discriminator().with_widths(&[8, 8, 8, 1])
        };
        c.train.crop = Some(32);
        c.train.n_critic = 1;
        c.train.epochs = 150;
        c.train.checkpoint_epochs = vec![40, 150];
        c.out_dir = PathBuf::from("runs/fig2-analog");
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Parses `text` on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `text` on top of `self`. A `preset` line replaces everything
    /// set so far and must come first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut first = true;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "preset" {
                if !first {
                    return Err(Error::Config(format!("line {}: preset must come first", no + 1)));
                }
                *self = Self::preset(v)?;
            } else {
                self.set(k, v).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", no + 1)),
                    other => other,
                })?;
            }
            first = false;
        }
        Ok(())
    }

    /// Applies the file at `path` on top of `self`.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data.n" => self.n_train = parse(key, v)?,
            "data.n_test" => self.n_test = parse(key, v)?,
            "data.h" => d.height = parse(key, v)?,
            "data.w" => d.width = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.events_min" => d.events.0 = parse(key, v)?,
            "data.events_max" => d.events.1 = parse(key, v)?,
            "data.kinds" => {
                d.kinds = v
                    .split(',')
                    .map(|s| match s.trim() {
                        "linear" => Ok(EventKind::Linear),
                        "hyperbolic" => Ok(EventKind::Hyperbolic),
                        o => Err(Error::Config(format!("{key}: unknown event kind {o:?}"))),
                    })
                    .collect::<Result<_>>()?
            }
            "data.wavelet_width" => d.wavelet_width = parse(key, v)?,
            "data.amplitude_min" => d.amplitude.0 = parse(key, v)?,
            "data.amplitude_max" => d.amplitude.1 = parse(key, v)?,
            "data.delay_min" => d.delay.0 = parse(key, v)?,
            "data.delay_max" => d.delay.1 = parse(key, v)?,
            "data.ghost_coefficient" => d.ghost_coefficient = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "gen.widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                t.generator.depth = w.len();
                t.generator.widths = w;
            }
            "gen.kernel" => t.generator.kernel = parse(key, v)?,
            "gen.convs_per_level" => t.generator.convs_per_level = parse(key, v)?,
            "gen.leaky_slope" => t.generator.leaky_slope = parse(key, v)?,
            "gen.latent_channels" => t.generator.latent_channels = parse(key, v)?,
            "gen.output_init_gain" => t.generator.output_init_gain = parse(key, v)?,
            "disc.kind" => {
                t.critic.kind = match v {
                    "denet" => NetKind::DiscriminatorDenet,
                    "linear" => NetKind::DiscriminatorLinear,
                    o => return Err(Error::Config(format!("{key}: unknown discriminator {o:?}"))),
                }
            }
            "disc.widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                t.critic.depth = w.len();
                t.critic.widths = w;
            }
            "disc.kernel" => t.critic.kernel = parse(key, v)?,
            "disc.leaky_slope" => t.critic.leaky_slope = parse(key, v)?,
            "disc.output_init_gain" => t.critic.output_init_gain = parse(key, v)?,
            "disc.alpha_norm_q" => t.critic.alpha_norm_q = parse_opt(key, v)?,
            "loss.p" => t.loss.p = parse(key, v)?,
            "loss.p_adv" => t.loss.p_adv = parse_opt(key, v)?,
            "loss.q" => t.loss.q = parse(key, v)?,
            "loss.r" => t.loss.r = parse(key, v)?,
            "loss.sigma" => {
                t.loss.sigma = match parse_opt::<f64>(key, v)? {
                    None => None,
                    Some(s) => Some(crate::Image::full(&[1, d.height, d.width], s)),
                }
            }
            "loss.lambda_gp" => t.loss.lambda_gp = parse(key, v)?,
            "loss.balance" => {
                t.loss.balance = match v {
                    "equal" => Balance::Equal,
                    "fixed" => Balance::Fixed(match t.loss.balance {
                        Balance::Fixed(l) => l,
                        Balance::Equal => 1.0,
                    }),
                    o => return Err(Error::Config(format!("{key}: expected equal or fixed, got {o:?}"))),
                }
            }
            "loss.lambda_adv" => t.loss.balance = Balance::Fixed(parse(key, v)?),
            "loss.ema_decay" => t.loss.ema_decay = parse(key, v)?,
            "loss.n_z" => t.loss.n_z = parse(key, v)?,
            "loss.n_z_eval" => t.loss.n_z_eval = parse(key, v)?,
            "train.mode" => {
                t.mode = Mode::parse(v)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?} (lp-only, wcgan, ccgan)")))?
            }
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.n_critic" => t.n_critic = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.checkpoints" => t.checkpoint_epochs = parse_list(key, v)?,
            "train.deterministic" => t.deterministic = parse(key, v)?,
            "train.crop" => t.crop = parse_opt(key, v)?,
            "paths.data" => self.data_path = parse_opt(key, v)?,
            "paths.test_data" => self.test_data_path = parse_opt(key, v)?,
            "paths.out" => self.out_dir = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let sigma = match &t.loss.sigma {
            None => "none".to_string(),
            Some(s) => {
                let v = s.data()[0];
                if s.data().iter().all(|x| *x == v) {
                    v.to_string()
                } else {
                    "custom".to_string()
                }
            }
        };
        let disc_kind = match t.critic.kind {
            NetKind::DiscriminatorLinear => "linear",
            _ => "denet",
        };
        let (balance, lambda_adv) = match t.loss.balance {
            Balance::Equal => ("equal", None),
            Balance::Fixed(l) => ("fixed", Some(l)),
        };
        let mut e = vec![
            ("data.n", self.n_train.to_string()),
            ("data.n_test", self.n_test.to_string()),
            ("data.h", d.height.to_string()),
            ("data.w", d.width.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.events_min", d.events.0.to_string()),
            ("data.events_max", d.events.1.to_string()),
            ("data.kinds", d.kinds.iter().map(|k| kind_name(*k)).collect::<Vec<_>>().join(",")),
            ("data.wavelet_width", d.wavelet_width.to_string()),
            ("data.amplitude_min", d.amplitude.0.to_string()),
            ("data.amplitude_max", d.amplitude.1.to_string()),
            ("data.delay_min", d.delay.0.to_string()),
            ("data.delay_max", d.delay.1.to_string()),
            ("data.ghost_coefficient", d.ghost_coefficient.to_string()),
            ("data.noise", d.noise.to_string()),
            ("gen.widths", show_list(&t.generator.widths)),
            ("gen.kernel", t.generator.kernel.to_string()),
            ("gen.convs_per_level", t.generator.convs_per_level.to_string()),
            ("gen.leaky_slope", t.generator.leaky_slope.to_string()),
            ("gen.latent_channels", t.generator.latent_channels.to_string()),
            ("gen.output_init_gain", t.generator.output_init_gain.to_string()),
            ("disc.kind", disc_kind.to_string()),
            ("disc.widths", show_list(&t.critic.widths)),
            ("disc.kernel", t.critic.kernel.to_string()),
            ("disc.leaky_slope", t.critic.leaky_slope.to_string()),
            ("disc.output_init_gain", t.critic.output_init_gain.to_string()),
            ("disc.alpha_norm_q", show_opt(&t.critic.alpha_norm_q)),
            ("loss.p", t.loss.p.to_string()),
            ("loss.p_adv", show_opt(&t.loss.p_adv)),
            ("loss.q", t.loss.q.to_string()),
            ("loss.r", t.loss.r.to_string()),
            ("loss.sigma", sigma),
            ("loss.lambda_gp", t.loss.lambda_gp.to_string()),
            ("loss.balance", balance.to_string()),
        ];
        if let Some(l) = lambda_adv {
            e.push(("loss.lambda_adv", l.to_string()));
        }
        e.extend([
            ("loss.ema_decay", t.loss.ema_decay.to_string()),
            ("loss.n_z", t.loss.n_z.to_string()),
            ("loss.n_z_eval", t.loss.n_z_eval.to_string()),
            ("train.mode", t.mode.name().to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.n_critic", t.n_critic.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoints", show_list(&t.checkpoint_epochs)),
            ("train.deterministic", t.deterministic.to_string()),
            ("train.crop", show_opt(&t.crop)),
            ("paths.data", show_opt(&self.data_path.as_ref().map(|p| p.display()))),
            ("paths.test_data", show_opt(&self.test_data_path.as_ref().map(|p| p.display()))),
            ("paths.out", self.out_dir.display().to_string()),
        ]);
        e
    }

    /// The resolved configuration as loadable text.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// The training set: loaded from `paths.data` or generated.
    pub fn train_data(&self) -> Result<Dataset> {
        match &self.data_path {
            Some(p) => load_dataset(p),
            None => make_dataset(&self.data, self.n_train),
        }
    }

    /// Held-out pairs: loaded from `paths.test_data` or generated from
    /// sample indices disjoint from the training set.
    pub fn test_data(&self) -> Result<Dataset> {
        match &self.test_data_path {
            Some(p) => load_dataset(p),
            None => make_dataset_from(&self.data, TEST_FIRST_INDEX, self.n_test),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_path.is_none() {
            self.data.validate()?;
        }
        if self.n_train == 0 {
            return Err(Error::Config("data.n must be >= 1".into()));
        }
        self.train.validate()
    }
}
