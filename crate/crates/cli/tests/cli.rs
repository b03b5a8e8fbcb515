use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
protocol = "alternating"
agent = "pc"
total_steps = 512
switch_period = 128
horizon = 64
hidden = [4]
eval_episodes = 2

[ppo]
epochs = 1
n_minibatches = 4

[cascade]
n_policies = 3
"#;

fn polcon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polcon"))
        .args(args)
        .current_dir(cwd)
        .env_remove("POLCON_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

/// The only run directory under `root`.
fn single_run(root: &Path) -> PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn train_with_overrides_writes_a_replayable_run() {
    let (tmp, _) = setup();
    let o = polcon(
        &["train", "--config", "tiny.toml", "--set", "agent=fixed_kl", "seed=1", "--out-dir", "out"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = single_run(&tmp.path().join("out"));
    let config = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("agent = \"fixed_kl\""));
    assert!(config.contains("seed = 1"));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,env_steps,task,mean_ep_reward,pg_loss,vf_loss,kl_self_mean,beta,wall_ms\n"));
    assert_eq!(metrics.lines().count(), 1 + 8);

    // Replaying the stored config lands on the same run id.
    let o = polcon(&["validate-config", "--config", run.join("config.toml").to_str().unwrap()], tmp.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), format!("ok {}", run.file_name().unwrap().to_str().unwrap()));
}

#[test]
fn rerun_needs_force_and_reproduces_bytes() {
    let (tmp, _) = setup();
    let args = ["train", "--config", "tiny.toml", "--out-dir", "out"];
    assert!(polcon(&args, tmp.path()).status.success());
    let run = single_run(&tmp.path().join("out"));
    let first = std::fs::read(run.join("metrics.csv")).unwrap();
    assert!(first.starts_with(b"iteration,env_steps,task,mean_ep_reward,pg_loss,vf_loss,kl_self_mean,beta,wall_ms,kl_depth_1,kl_depth_2,kl_depth_3\n"));

    let o = polcon(&args, tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));

    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(polcon(&forced, tmp.path()).status.success());
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), first);
    assert_eq!(
        std::fs::read(run.join("final.snap")).unwrap()[..7],
        *b"PCSNAP1"
    );
}

#[test]
fn out_dir_defaults_to_environment() {
    let (tmp, _) = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_polcon"))
        .args(["train", "--config", "tiny.toml", "--set", "total_steps=128"])
        .current_dir(tmp.path())
        .env("POLCON_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    single_run(&tmp.path().join("from-env"));
}

#[test]
fn config_errors_exit_3() {
    let (tmp, _) = setup();
    let o = polcon(&["train", "--config", "missing.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing.toml"));

    let o = polcon(&["validate-config", "--config", "tiny.toml", "--set", "cascade.omga=2"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("cascade.omga"), "{}", stderr(&o));

    let o = polcon(&["validate-config", "--config", "tiny.toml", "--set", "total_steps=100"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("total_steps"));
}

#[test]
fn usage_errors_exit_2() {
    let (tmp, _) = setup();
    for args in [&["fly"][..], &["train", "--bogus"], &["tournament"]] {
        let o = polcon(args, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    }
}

#[test]
fn validate_config_has_no_side_effects() {
    let (tmp, _) = setup();
    let o = polcon(&["validate-config", "--config", "tiny.toml", "--print-config"], tmp.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("[synapse]"), "defaults are printed");
    assert!(out.trim_end().lines().last().unwrap().starts_with("ok "));
    let entries: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn export_and_hidden_depth_table() {
    let (tmp, _) = setup();
    assert!(polcon(&["train", "--config", "tiny.toml", "--out-dir", "out"], tmp.path()).status.success());
    let run = single_run(&tmp.path().join("out"));
    let r = run.to_str().unwrap();

    let o = polcon(&["export", "--run", r], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for task in ["pointgoal-a", "pointgoal-b"] {
        let text = std::fs::read_to_string(run.join(format!("export/reward_{task}.csv"))).unwrap();
        assert!(text.starts_with("env_steps,mean_ep_reward\n"));
        assert_eq!(text.lines().count(), 1 + 4);
    }

    let o = polcon(&["eval-hidden", "--run", r, "--env", "pointgoal-a"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(run.join("hidden_depths.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
}

#[test]
fn eval_hidden_rejects_single_network_runs() {
    let (tmp, _) = setup();
    let ok = polcon(&["train", "--config", "tiny.toml", "--set", "agent=clipped", "--out-dir", "out"], tmp.path());
    assert!(ok.status.success());
    let run = single_run(&tmp.path().join("out"));
    let o = polcon(&["eval-hidden", "--run", run.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pc snapshot"));
}

#[test]
fn sweeps_run_one_sub_run_per_setting() {
    let (tmp, _) = setup();
    let o = polcon(
        &["ablate-cascade", "--config", "tiny.toml", "--set", "total_steps=128", "--out-dir", "out", "--parallel", "2"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let root = single_run(&tmp.path().join("out"));
    assert!(root.file_name().unwrap().to_str().unwrap().starts_with("ablate-cascade-"));
    let table = std::fs::read_to_string(root.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5);
    assert_eq!(std::fs::read_dir(&root).unwrap().count(), 5 + 1);

    let o = polcon(&["schedule-sweep", "--config", "tiny.toml", "--set", "switch_period=256", "--out-dir", "out2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let root = single_run(&tmp.path().join("out2"));
    let table = std::fs::read_to_string(root.join("sweep.csv")).unwrap();
    let settings: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        settings,
        [
            "schedule_factor=0.25",
            "schedule_factor=0.5",
            "schedule_factor=1",
            "schedule_factor=2",
            "schedule_factor=4"
        ]
    );
}

#[test]
fn selfplay_then_tournament() {
    let (tmp, _) = setup();
    std::fs::write(
        tmp.path().join("sp.toml"),
        r#"
agent = "clipped"
total_steps = 512
horizon = 32
n_envs = 2
snapshot_every = 2
hidden = [4]
eval_episodes = 2

[ppo]
epochs = 1
n_minibatches = 4

[selfplay]
eval_max_steps = 200
"#,
    )
    .unwrap();
    let o = polcon(&["selfplay", "--config", "sp.toml", "--out-dir", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = single_run(&tmp.path().join("out"));
    let table = std::fs::read_to_string(run.join("tournament.csv")).unwrap();
    assert!(table.starts_with("snapshot_version,env_steps,mean_score,n_episodes\n"));
    assert_eq!(table.lines().count(), 1 + 4);
    let last = table.lines().last().unwrap();
    assert!(last.starts_with("8,512,0.5,2"), "{last}");

    std::fs::remove_file(run.join("tournament.csv")).unwrap();
    let o = polcon(&["tournament", "--run", run.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("tournament.csv")).unwrap(), table);
}
