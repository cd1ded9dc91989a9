use std::fs;

use mrs_core::trainer::experiment::{CHOICES_FILE, EVAL_STATES_FILE, METRICS_FILE};
use mrs_core::trainer::{load_agent, run_experiment, Experiment, TrainConfig};

fn tiny(out: &std::path::Path) -> TrainConfig {
    let mut c = TrainConfig::default();
    for kv in [
        "mlp_sizes=1x8",
        "latent_groups=2",
        "latent_classes=3",
        "skill_resolutions=16,8,inf",
        "replay_data_length=16",
        "train_batch_size=2",
        "rollout_starts=4",
        "skill_pairs=16",
        "eval_every=96",
        "eval_episodes=2",
        "episode_length=40",
        "checkpoint_every=96",
        "total_steps=192",
    ] {
        c.apply_override(kv).unwrap();
    }
    c.out = out.to_path_buf();
    c
}

#[test]
fn a_short_run_writes_metrics_choices_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(tiny(dir.path())).unwrap();
    assert_eq!(summary.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![96, 192]);

    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["step"].is_u64(), "{line}");
    }
    let choices = fs::read_to_string(dir.path().join(CHOICES_FILE)).unwrap();
    assert!(choices.lines().count() > 1);
    assert!(dir.path().join(EVAL_STATES_FILE).exists());

    let (config, agent) = load_agent(&dir.path().join("ckpt-192")).unwrap();
    assert_eq!(config.total_steps, 192);
    assert_eq!(agent.bank.resolutions.len(), 3);
}

#[test]
fn stopping_early_and_resuming_matches_one_pass() {
    let dir = tempfile::tempdir().unwrap();
    let mut whole = Experiment::new(tiny(&dir.path().join("whole"))).unwrap();
    whole.run_until(192).unwrap();

    let mut resumed = tiny(&dir.path().join("resumed"));
    resumed.resume = Some(dir.path().join("whole").join("ckpt-96"));
    let mut second = Experiment::new(resumed).unwrap();
    assert_eq!(second.step(), 96);
    second.run_until(192).unwrap();

    let a = whole.agent();
    let b = second.agent();
    assert_eq!(a.bank.params.flat_values(), b.bank.params.flat_values());
    assert_eq!(a.manager.params.flat_values(), b.manager.params.flat_values());
    assert_eq!(a.worker.params.flat_values(), b.worker.params.flat_values());
}

#[test]
fn invalid_configs_fail_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&dir.path().join("run"));
    c.selector = "oracle".into();
    assert!(Experiment::new(c.clone()).is_err());
    c.selector = "random".into();
    c.env = "antmaze".into();
    assert!(Experiment::new(c).is_err());
    assert!(!dir.path().join("run").join(METRICS_FILE).exists());
}
