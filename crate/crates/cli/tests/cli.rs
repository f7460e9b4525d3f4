use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ghostlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn ghostlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "data.n=4",
    "--set",
    "data.h=32",
    "--set",
    "data.w=32",
    "--set",
    "data.n_test=3",
    "--set",
    "gen.widths=4,8",
    "--set",
    "disc.widths=4,4,1",
    "--set",
    "disc.output_init_gain=0.01",
    "--set",
    "train.epochs=2",
    "--set",
    "train.checkpoints=1,2",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.n_critic=2",
];

fn train_tiny(dir: &Path, mode: &str, out: &str) -> Output {
    let mode = format!("train.mode={mode}");
    let mut args = vec!["train", "--quiet", "--out", out, "--set", &mode];
    args.extend_from_slice(TINY);
    ghostlab(&args, dir)
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostlab(&["selftest"], dir.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn missing_config_is_a_validation_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghostlab(&["train", "--config", "missing.json"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.json"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ghostlab(&["bogus"], dir.path())), 1);
    let o = ghostlab(&["train", "--set", "loss.pp=2"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("loss.pp"));
    let o = ghostlab(&["train", "--set", "loss.q=1"], dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(code(&ghostlab(&["eval", "--run", "nowhere"], dir.path())), 1);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["gen-data", "--n", "200", "--h", "64", "--w", "64", "--seed", "7", "--out", out];
    assert_eq!(code(&ghostlab(&args("a.glds"), dir.path())), 0);
    assert_eq!(code(&ghostlab(&args("b.glds"), dir.path())), 0);
    let a = fs::read(dir.path().join("a.glds")).unwrap();
    let b = fs::read(dir.path().join("b.glds")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn train_writes_run_and_echo_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "ccgan", "run1");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("run1");
    for f in [
        "config.txt",
        "metrics.csv",
        "generator_e0001.glck",
        "critic_e0002.glck",
        "generator_final.glck",
        "critic_final.glck",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,loss_total,loss_lp,loss_adv,lambda_adv,gp_value,"));
    assert_eq!(metrics.lines().count(), 1 + 4 + 1);

    let o = ghostlab(
        &["train", "--quiet", "--config", "run1/config.txt", "--set", "paths.out=run2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = fs::read_to_string(dir.path().join("run2/metrics.csv")).unwrap();
    assert_eq!(metrics, again);
    assert_eq!(
        fs::read(run.join("generator_final.glck")).unwrap(),
        fs::read(dir.path().join("run2/generator_final.glck")).unwrap()
    );

    let o = ghostlab(&["eval", "--run", "run1", "--epoch", "1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    for key in ["loss_total", "loss_lp", "loss_adv", "ghost_residual"] {
        assert!(text.contains(&format!("{key} = ")), "{text}");
    }
    assert_eq!(stdout(&ghostlab(&["eval", "--run", "run1", "--epoch", "1"], dir.path())), text);

    let o = ghostlab(&["diagnose", "--run", "run1", "--index", "1", "--out", "diag"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<String> = fs::read_dir(dir.path().join("diag"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".png")).count(), 6, "{files:?}");
    assert_eq!(files.iter().filter(|f| f.ends_with(".json")).count(), 1);

    let o = ghostlab(&["eval", "--run", "run1", "--epoch", "7"], dir.path());
    assert_ne!(code(&o), 0);
}

#[test]
fn lp_only_run_has_no_critic() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "lp-only", "lp");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!dir.path().join("lp/critic_final.glck").exists());
    let o = ghostlab(&["diagnose", "--run", "lp", "--split", "train"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn oracle_prints_twelve_digits() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.txt"),
        "p = 1\n[P]\n0 : 0.5\n2 : 0.5\n[Q]\n1 : 1\n[J1]\n0 | 0 : 0.5\n1 | 3 : 0.5\n[J2]\n0 | 1 : 0.5\n1 | 3 : 0.5\n",
    )
    .unwrap();
    let o = ghostlab(&["oracle", "spec.txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("wasserstein = 1.00000000000e0"), "{text}");
    assert!(text.contains("jw = 5.00000000000e-1"), "{text}");
    fs::write(dir.path().join("bad.txt"), "[P]\n0 : 0.5\n").unwrap();
    assert_eq!(code(&ghostlab(&["oracle", "bad.txt"], dir.path())), 1);
    assert_eq!(code(&ghostlab(&["oracle", "absent.txt"], dir.path())), 1);
}
