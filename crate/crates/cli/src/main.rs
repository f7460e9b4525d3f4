mod oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ghostlab::config::{RunConfig, CONFIG_ECHO};
use ghostlab::diagnostics::{adjoint_at, emit_report, f_map, AdjointLoss, DiagnosticReport, ReportMeta};
use ghostlab::nets::{load_checkpoint, Critic};
use ghostlab::synth::{save_dataset, Dataset};
use ghostlab::trainer::{checkpoint_paths, evaluate_nets, train, EvalRecord, Mode};
use ghostlab::{Net, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "ghostlab", version, about = "Adversarial losses for learned processing sequences on synthetic deghosting data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override, repeatable: `--set loss.p=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(p) => RunConfig::preset(p)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct RunRef {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint epoch; the final parameters when omitted.
    #[arg(long)]
    epoch: Option<usize>,
    /// Data to evaluate on.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Dataset file overriding `--split`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        w: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Generate the held-out split instead of the training split.
        #[arg(long)]
        test: bool,
        #[arg(long, default_value = "data.glds")]
        out: PathBuf,
    },
    /// Train and write metrics, checkpoints and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory, overriding `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print the metrics record of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunRef,
        /// Latent draws per pair; `loss.n_z_eval` when omitted.
        #[arg(long)]
        n_z: Option<usize>,
    },
    /// Write prediction, adjoint-input and field maps of one pair.
    Diagnose {
        #[command(flatten)]
        run: RunRef,
        /// Pair index within the data.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory; `<run>/diagnostics` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact transport values for a text description of distributions.
    Oracle {
        /// Description file; see the README for the format.
        file: PathBuf,
    },
    /// Run the invariant checks.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for invalid input, 2 for failures of the run itself.
fn exit_code(e: &anyhow::Error) -> u8 {
    let core = e
        .downcast_ref::<ghostlab::Error>()
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<ghostlab::Error>()));
    match core {
        Some(g) if !g.is_validation() => 2,
        Some(_) => 1,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData {
            cfg,
            n,
            h,
            w,
            seed,
            test,
            out,
        } => {
            let mut c = cfg.resolve()?;
            if let Some(n) = n {
                if test {
                    c.n_test = n;
                } else {
                    c.n_train = n;
                }
            }
            if let Some(h) = h {
                c.data.height = h;
            }
            if let Some(w) = w {
                c.data.width = w;
            }
            if let Some(s) = seed {
                c.data.seed = s;
            }
            c.data_path = None;
            c.test_data_path = None;
            c.data.validate()?;
            let ds = if test { c.test_data()? } else { c.train_data()? };
            save_dataset(&ds, &out)?;
            println!("wrote {} pairs to {}", ds.len(), out.display());
            Ok(0)
        }
        Command::Train { cfg, out, quiet } => {
            let mut c = cfg.resolve()?;
            if let Some(o) = out {
                c.out_dir = o;
            }
            c.validate()?;
            let data = c.train_data()?;
            c.train.check_data(&data)?;
            fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
            let echo = c.out_dir.join(CONFIG_ECHO);
            fs::write(&echo, c.to_text()).with_context(|| format!("writing {}", echo.display()))?;
            let outcome = train(&c.train, &data, Some(&c.out_dir), &mut |epoch, row| {
                if !quiet {
                    eprintln!(
                        "epoch {epoch}: loss {:.6e} lp {:.6e} adv {:.6e} ghost {:.4}",
                        row.loss_total, row.loss_lp, row.loss_adv, row.ghost_residual_train
                    );
                }
            })?;
            print_record(&outcome.final_eval);
            Ok(0)
        }
        Command::Eval { run, n_z } => {
            let (c, generator, critic, data) = load_run(&run)?;
            let n_z = n_z.unwrap_or(c.train.loss.n_z_eval);
            let lambda = final_lambda(&run.run)?;
            let rec = evaluate_nets(&generator, critic.as_ref(), &c.train, lambda, &data, n_z)?;
            print_record(&rec);
            Ok(0)
        }
        Command::Diagnose { run, index, out } => {
            let (c, generator, critic, data) = load_run(&run)?;
            let Some(pair) = data.pairs.get(index) else {
                bail!(ghostlab::Error::Config(format!("--index {index} outside 0..{}", data.len())));
            };
            let (_, h, w) = data.extents();
            let mut rng = ChaCha8Rng::seed_from_u64(c.train.seed);
            let z = generator.sample_latent(h, w, &mut rng);
            let pred = generator.generator_forward(&pair.x, z.as_ref())?;
            let crit: Option<&dyn Critic<Real>> = critic.as_ref().map(|n| n as &dyn Critic<Real>);
            let loss = match c.train.mode {
                Mode::LpOnly => AdjointLoss::Lp(c.train.loss.p),
                Mode::Wcgan => AdjointLoss::Wcgan,
                Mode::Ccgan => AdjointLoss::Ccgan,
            };
            let mut images = vec![
                ("input".to_string(), pair.x.clone()),
                ("target".to_string(), pair.y.clone()),
                ("prediction".to_string(), pred.clone()),
                (
                    "adjoint_lp".to_string(),
                    adjoint_at(AdjointLoss::Lp(c.train.loss.p), None, &pair.x, &pair.y, &pred)?,
                ),
            ];
            if let Some(d) = crit {
                images.push((
                    format!("adjoint_{}", loss.name()),
                    adjoint_at(loss, Some(d), &pair.x, &pair.y, &pred)?,
                ));
                images.push(("f_map".to_string(), f_map(d, &pair.x, &pair.y)?));
            }
            let ghost = match pair.ghost {
                Some(g) => ghostlab::diagnostics::ghost_residual_energy(&pred, &pair.y, g.delay)?,
                None => 0.0,
            };
            let mut metrics = std::collections::BTreeMap::new();
            metrics.insert(
                "lp_loss".to_string(),
                ghostlab::losses::lp_loss(&pred, &pair.y, c.train.loss.p, None)?,
            );
            metrics.insert("index".to_string(), index as f64);
            let report = DiagnosticReport {
                meta: ReportMeta {
                    epoch: run.epoch.unwrap_or(c.train.epochs),
                    step: 0,
                    mode: c.train.mode.name().to_string(),
                    seed: c.train.seed,
                },
                images,
                ghost_residual_energy: ghost,
                metrics,
            };
            let dir = out.unwrap_or_else(|| run.run.join("diagnostics"));
            for p in emit_report(&report, &dir)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Oracle { file } => {
            let text = fs::read_to_string(&file)
                .map_err(|e| ghostlab::Error::Config(format!("cannot read {}: {e}", file.display())))?;
            let spec = oracle::parse(&text)
                .map_err(|e| ghostlab::Error::Config(format!("{}: {e:#}", file.display())))?;
            for (name, v) in oracle::evaluate(&spec)? {
                println!("{name} = {v:.11e}");
            }
            Ok(0)
        }
        Command::Selftest => {
            let checks = ghostlab::verify::selftest();
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn print_record(r: &EvalRecord) {
    for (k, v) in [
        ("loss_total", r.loss_total),
        ("loss_lp", r.loss_lp),
        ("loss_adv", r.loss_adv),
        ("lambda_adv", r.lambda_adv),
        ("gp_value", r.gp_value),
        ("critic_objective", r.critic_objective),
        ("ghost_residual", r.ghost_residual),
    ] {
        println!("{k} = {v:.11e}");
    }
}

type LoadedRun = (RunConfig, Net, Option<Net>, Dataset);

fn load_run(r: &RunRef) -> Result<LoadedRun> {
    let echo = r.run.join(CONFIG_ECHO);
    if !echo.is_file() {
        bail!(ghostlab::Error::Config(format!("{} is not a run directory (no {CONFIG_ECHO})", r.run.display())));
    }
    let c = RunConfig::load(&echo)?;
    let (gp, cp) = checkpoint_paths(&r.run, r.epoch);
    let generator: Net = load_checkpoint(&gp)?;
    let critic = if c.train.mode.adversarial() {
        Some(load_checkpoint(&cp)?)
    } else {
        None
    };
    let data = match (&r.data, r.split) {
        (Some(p), _) => ghostlab::synth::load_dataset(p)?,
        (None, Split::Train) => c.train_data()?,
        (None, Split::Test) => c.test_data()?,
    };
    Ok((c, generator, critic, data))
}

/// Adversarial weight in the last metrics row of the run.
fn final_lambda(dir: &Path) -> Result<f64> {
    let p = dir.join(ghostlab::trainer::METRICS_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(ghostlab::trainer::MetricsRow::parse)
        .last()
        .map_or(0.0, |r| r.lambda_adv))
}
