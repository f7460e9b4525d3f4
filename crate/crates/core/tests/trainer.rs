use ghostlab::config::RunConfig;
use ghostlab::diagnostics::ghost_residual_energy;
use ghostlab::trainer::{evaluate, train, Trainer};
use ghostlab::Error;

fn tiny(mode: &str, extra: &[&str]) -> RunConfig {
    let mut c = RunConfig::default();
    for kv in [
        "data.n=6",
        "data.h=32",
        "data.w=32",
        "data.seed=5",
        "gen.widths=4,8",
        "disc.widths=4,4,1",
        "disc.output_init_gain=0.01",
        "train.epochs=2",
        "train.checkpoints=1,2",
        "train.batch_size=3",
        "train.n_critic=2",
        "train.seed=9",
    ] {
        c.apply_override(kv).unwrap();
    }
    c.apply_override(&format!("train.mode={mode}")).unwrap();
    for kv in extra {
        c.apply_override(kv).unwrap();
    }
    c
}

#[test]
fn runs_are_deterministic() {
    let c = tiny("ccgan", &[]);
    let data = c.train_data().unwrap();
    let a = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    let b = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    assert_eq!(a.metrics_csv, b.metrics_csv);
    assert_eq!(a.state.generator.fingerprint(), b.state.generator.fingerprint());
    assert_eq!(
        a.state.critic.as_ref().unwrap().fingerprint(),
        b.state.critic.as_ref().unwrap().fingerprint()
    );
    assert_eq!(a.checkpoints.len(), 2);
}

#[test]
fn seeds_change_the_run() {
    let c = tiny("lp-only", &[]);
    let d = tiny("lp-only", &["train.seed=10"]);
    let data = c.train_data().unwrap();
    let a = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    let b = train(&d.train, &data, None, &mut |_, _| {}).unwrap();
    assert_ne!(a.state.generator.fingerprint(), b.state.generator.fingerprint());
}

#[test]
fn updates_touch_only_their_own_network() {
    for mode in ["wcgan", "ccgan"] {
        let c = tiny(mode, &[]);
        let data = c.train_data().unwrap();
        let mut t = Trainer::new(c.train.clone(), &data).unwrap();
        let batch = t.make_batch(&[0, 1, 2]);
        let fakes = t.generate(&batch, 1).unwrap();
        let g0 = t.state().generator.fingerprint();
        let d0 = t.state().critic.as_ref().unwrap().fingerprint();
        t.critic_step(&batch, &fakes).unwrap();
        let d1 = t.state().critic.as_ref().unwrap().fingerprint();
        assert_eq!(t.state().generator.fingerprint(), g0, "{mode}: critic step moved the generator");
        assert_ne!(d1, d0);
        t.generator_step(&batch).unwrap();
        assert_eq!(t.state().critic.as_ref().unwrap().fingerprint(), d1, "{mode}: generator step moved the critic");
        assert_ne!(t.state().generator.fingerprint(), g0);
    }
}

#[test]
fn lp_only_has_no_critic() {
    let c = tiny("lp-only", &[]);
    let data = c.train_data().unwrap();
    let mut t = Trainer::new(c.train.clone(), &data).unwrap();
    assert!(t.state().critic.is_none());
    let batch = t.make_batch(&[0]);
    let fakes = t.generate(&batch, 1).unwrap();
    assert!(t.critic_step(&batch, &fakes).is_err());
    let out = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    assert!(out.state.history.iter().all(|r| r.loss_adv == 0.0 && r.lambda_adv == 0.0));
}

#[test]
fn ccgan_losses_are_nonnegative() {
    let c = tiny("ccgan", &["train.epochs=3"]);
    let data = c.train_data().unwrap();
    let out = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    assert!(out.state.history.iter().all(|r| r.loss_adv >= 0.0 && r.critic_objective >= 0.0));
}

#[test]
fn final_row_is_a_reproducible_evaluation() {
    let c = tiny("ccgan", &[]);
    let data = c.train_data().unwrap();
    let out = train(&c.train, &data, None, &mut |_, _| {}).unwrap();
    let last = *out.state.history.last().unwrap();
    assert_eq!(out.state.history.len(), 2 * 2 + 1);
    let again = evaluate(&out.state, &c.train, &data, c.train.loss.n_z_eval).unwrap();
    assert_eq!(again, evaluate(&out.state, &c.train, &data, c.train.loss.n_z_eval).unwrap());
    assert_eq!(again, out.final_eval);
    assert!((again.loss_total - last.loss_total).abs() <= 0.01 * last.loss_total.abs());
    assert!((again.ghost_residual - last.ghost_residual_train).abs() <= 0.01 * last.ghost_residual_train.abs());
    let lines: Vec<&str> = out.metrics_csv.lines().collect();
    assert_eq!(lines.len(), 1 + out.state.history.len());
}

#[test]
fn untrained_generator_passes_the_ghost_through() {
    let c = tiny("lp-only", &[]);
    let data = c.train_data().unwrap();
    let state = Trainer::new(c.train.clone(), &data).unwrap().into_state();
    let rec = evaluate(&state, &c.train, &data, 1).unwrap();
    let input: f64 = data
        .pairs
        .iter()
        .map(|p| ghost_residual_energy(&p.x, &p.y, p.ghost.unwrap().delay).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    assert!(
        (rec.ghost_residual - input).abs() <= 0.05 * input,
        "untrained {} vs input {input}",
        rec.ghost_residual
    );
}

#[test]
fn divergence_aborts_training() {
    let c = tiny("lp-only", &["train.lr=1e300", "train.epochs=3"]);
    let data = c.train_data().unwrap();
    match train(&c.train, &data, None, &mut |_, _| {}) {
        Err(Error::TrainingAborted { .. }) => {}
        other => panic!("expected an abort, got {:?}", other.map(|o| o.final_eval)),
    }
}

#[test]
fn incompatible_data_is_rejected() {
    let c = tiny("lp-only", &["data.h=34", "data.w=34"]);
    let data = c.train_data().unwrap();
    assert!(matches!(Trainer::new(c.train.clone(), &data), Err(e) if e.is_validation()));
    let c = tiny("lp-only", &["train.crop=64"]);
    let data = c.train_data().unwrap();
    assert!(matches!(Trainer::new(c.train.clone(), &data), Err(e) if e.is_validation()));
}

#[test]
fn equal_balance_tracks_the_loss_ratio() {
    let c = tiny("ccgan", &["train.epochs=10"]);
    let data = c.train_data().unwrap();
    let mut t = Trainer::new(c.train.clone(), &data).unwrap();
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for epoch in 0..10 {
        let mut lambdas = Vec::new();
        t.train_epoch(started, &mut |row| {
            lambdas.push(row.lambda_adv);
            Ok(())
        })
        .unwrap();
        assert!(lambdas.windows(2).all(|w| w[0] == w[1]), "lambda changed within an epoch");
        let b = &t.state().balancer;
        let (lp, adv) = (b.ema_lp.unwrap(), b.ema_adv.unwrap());
        approx::assert_relative_eq!(b.lambda() * adv, lp, max_relative = 1e-6);
        if epoch > 0 {
            worst = worst.max((lambdas[0] * adv - lp).abs() / lp);
        }
    }
    assert!(worst < 0.2, "relative imbalance {worst}");
}

#[test]
fn checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny("wcgan", &["train.epochs=1", "train.checkpoints=1"]);
    let data = c.train_data().unwrap();
    let out = train(&c.train, &data, Some(dir.path()), &mut |_, _| {}).unwrap();
    let (g, d) = ghostlab::trainer::checkpoint_paths(dir.path(), Some(1));
    let loaded: ghostlab::Net = ghostlab::nets::load_checkpoint(&g).unwrap();
    assert_eq!(loaded.fingerprint(), out.checkpoints[0].generator.fingerprint());
    assert!(d.is_file());
    let written = std::fs::read_to_string(dir.path().join(ghostlab::trainer::METRICS_FILE)).unwrap();
    assert_eq!(written, out.metrics_csv);
}
