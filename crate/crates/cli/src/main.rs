//! `polcon`: run, sweep and evaluate policy consolidation experiments.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polcon::cascade::ablation_grid;
use polcon::harness::{
    eval_hidden_depths, load_config, run, run_selfplay, tournament_vs_history, write_csv, ConfigError,
    ExperimentConfig, Protocol, RunError, RunOutput, Snapshot, TOURNAMENT_HEADER,
};
use rayon::prelude::*;

/// Writes to stdout, ignoring a closed pipe (`polcon ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Schedule factors visited by `schedule-sweep`.
const SCHEDULE_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Parser, Debug)]
#[command(name = "polcon", version, about = "Policy consolidation experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file; omitted keys take the protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--set agent=pc cascade.omega=2`.
    #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the fully resolved config before doing anything else.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Root directory for run outputs [default: $POLCON_OUT_DIR or ./runs].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train on alternating tasks or a single task.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Self-play on sumoline, then a tournament against the archive.
    Selfplay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Play a run's final agent against each of its archived snapshots.
    Tournament {
        /// Run directory produced by `selfplay`.
        #[arg(long)]
        run: PathBuf,
        /// Matches per snapshot [default: the run's eval_episodes].
        #[arg(long)]
        episodes: Option<usize>,
        /// Episode length limit [default: the run's selfplay.eval_max_steps].
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Evaluate every cascade depth of a pc run's final snapshot.
    EvalHidden {
        #[arg(long)]
        run: PathBuf,
        /// Task to evaluate on; repeatable [default: every task of the run].
        #[arg(long = "env")]
        envs: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// One alternating run per cascade ablation setting.
    AblateCascade {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Sub-runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// One alternating run per switch-period scale factor.
    ScheduleSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Write plot-ready CSVs for a finished run into `<run>/export/`.
    Export {
        #[arg(long)]
        run: PathBuf,
    },
    /// Resolve and validate a config without running anything.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<polcon::harness::SnapshotError> for Failure {
    fn from(e: polcon::harness::SnapshotError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn resolve(args: &ConfigArgs, forced: &[&str]) -> Result<ExperimentConfig, Failure> {
    let mut overrides: Vec<String> = forced.iter().map(|s| s.to_string()).collect();
    overrides.extend(args.overrides.iter().cloned());
    let cfg = load_config(args.config.as_deref(), &overrides)?;
    if args.print_config {
        out!("{}", cfg.to_toml());
    }
    Ok(cfg)
}

fn out_root(out: &OutArgs) -> PathBuf {
    out.out_dir
        .clone()
        .or_else(|| std::env::var_os("POLCON_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Claims `dir` for a new run; an existing directory is only replaced with
/// `--force`.
fn claim(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !force {
            return Err(Failure::Runtime(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    Ok(())
}

fn run_config(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<(PathBuf, RunOutput), Failure> {
    let dir = root.join(cfg.run_id());
    claim(&dir, force)?;
    let out = run(cfg, Some(&dir))?;
    Ok((dir, out))
}

fn opt(v: Option<f64>) -> String {
    v.map(polcon::harness::metrics::fmt_f64).unwrap_or_default()
}

fn report(dir: &Path, out: &RunOutput) {
    out!(
        "{}  updates={} final_average_reward={} forgetting_metric={}\n",
        dir.display(),
        out.summary.updates,
        opt(out.summary.final_average_reward),
        opt(out.summary.forgetting_metric),
    );
}

fn train(cfg: &ConfigArgs, out: &OutArgs) -> Result<(), Failure> {
    let cfg = resolve(cfg, &[])?;
    if cfg.protocol == Protocol::Selfplay {
        return Err(Failure::Config("invalid value for 'protocol': use the selfplay verb".into()));
    }
    let (dir, res) = run_config(&cfg, &out_root(out), out.force)?;
    report(&dir, &res);
    Ok(())
}

fn write_tournament(dir: &Path, current: &Snapshot, archive: &[Snapshot], episodes: usize, max_len: usize, seed: u64) -> Result<(), Failure> {
    let rows = tournament_vs_history(current, archive, episodes, max_len, seed)?;
    let records: Vec<Vec<String>> = rows.iter().map(|r| r.record()).collect();
    write_csv(&dir.join("tournament.csv"), &TOURNAMENT_HEADER, &records)?;
    for r in &rows {
        out!("v{:06}  env_steps={}  mean_score={}\n", r.snapshot_version, r.env_steps, r.mean_score);
    }
    Ok(())
}

fn selfplay(cfg: &ConfigArgs, out: &OutArgs) -> Result<(), Failure> {
    let cfg = resolve(cfg, &["protocol=selfplay"])?;
    let dir = out_root(out).join(cfg.run_id());
    claim(&dir, out.force)?;
    let res = run_selfplay(&cfg, Some(&dir))?;
    report(&dir, &res);
    if !res.archive.is_empty() {
        write_tournament(
            &dir,
            &res.final_snapshot,
            &res.archive,
            cfg.eval_episodes,
            cfg.selfplay.eval_max_steps,
            cfg.seed,
        )?;
    }
    Ok(())
}

/// Config stored in a run directory.
fn run_config_of(run: &Path) -> Result<ExperimentConfig, Failure> {
    Ok(load_config(Some(&run.join("config.toml")), &[])?)
}

fn load_archive(run: &Path) -> Result<Vec<Snapshot>, Failure> {
    let dir = run.join("snapshots");
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "snap"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    paths.iter().map(|p| Ok(Snapshot::load(p)?)).collect()
}

fn tournament(run: &Path, episodes: Option<usize>, max_len: Option<usize>) -> Result<(), Failure> {
    let cfg = run_config_of(run)?;
    let current = Snapshot::load(&run.join("final.snap"))?;
    let archive = load_archive(run)?;
    if archive.is_empty() {
        return Err(Failure::Runtime(format!("{} has no archived snapshots", run.display())));
    }
    write_tournament(
        run,
        &current,
        &archive,
        episodes.unwrap_or(cfg.eval_episodes),
        max_len.unwrap_or(cfg.selfplay.eval_max_steps),
        cfg.seed,
    )
}

fn eval_hidden(run: &Path, envs: &[String], episodes: Option<usize>) -> Result<(), Failure> {
    let cfg = run_config_of(run)?;
    let snap = Snapshot::load(&run.join("final.snap"))?;
    let envs = if envs.is_empty() { cfg.envs.clone() } else { envs.to_vec() };
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let mut rows = Vec::new();
    for env in &envs {
        for d in eval_hidden_depths(&snap, env, episodes, cfg.seed)? {
            out!("{env}  depth={}  mean_reward={}\n", d.depth, d.mean_reward);
            rows.push(vec![
                env.clone(),
                d.depth.to_string(),
                polcon::harness::metrics::fmt_f64(d.mean_reward),
            ]);
        }
    }
    write_csv(&run.join("hidden_depths.csv"), &["env", "depth", "mean_reward"], &rows)?;
    Ok(())
}

/// Runs every config of a sweep into its own directory under
/// `<root>/<name>-<base run id>/` and writes a one-line-per-run table.
fn sweep(
    name: &str,
    base: &ExperimentConfig,
    configs: Vec<(String, ExperimentConfig)>,
    out: &OutArgs,
    parallel: usize,
) -> Result<(), Failure> {
    if parallel == 0 {
        return Err(Failure::Usage("--parallel must be at least 1".into()));
    }
    for (_, c) in &configs {
        c.validate()?;
    }
    let root = out_root(out).join(format!("{name}-{}", base.run_id()));
    claim(&root, out.force)?;
    std::fs::create_dir_all(&root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let results: Vec<Result<(PathBuf, RunOutput), Failure>> = pool.install(|| {
        configs
            .par_iter()
            .with_max_len(1)
            .map(|(_, c)| run_config(c, &root, false))
            .collect()
    });
    let mut rows = Vec::new();
    let mut first_err = None;
    for ((label, _), r) in configs.iter().zip(results) {
        match r {
            Ok((dir, o)) => {
                report(&dir, &o);
                rows.push(vec![
                    label.clone(),
                    o.summary.run_id.clone(),
                    opt(o.summary.final_average_reward),
                    opt(o.summary.forgetting_metric),
                ]);
            }
            Err(e) => {
                eprintln!("{label}: {}", e.message());
                rows.push(vec![label.clone(), String::new(), String::new(), String::new()]);
                first_err.get_or_insert(e);
            }
        }
    }
    write_csv(
        &root.join("sweep.csv"),
        &["setting", "run_id", "final_average_reward", "forgetting_metric"],
        &rows,
    )?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn ablate_cascade(cfg: &ConfigArgs, out: &OutArgs, parallel: usize) -> Result<(), Failure> {
    let base = resolve(cfg, &["agent=pc"])?;
    let configs = ablation_grid(&base.cascade)
        .into_iter()
        .map(|c| {
            let label = format!("n_policies={} omega={}", c.n_policies, c.omega);
            (label, ExperimentConfig {
                cascade: c,
                ..base.clone()
            })
        })
        .collect();
    sweep("ablate-cascade", &base, configs, out, parallel)
}

fn schedule_sweep(cfg: &ConfigArgs, out: &OutArgs, parallel: usize) -> Result<(), Failure> {
    let base = resolve(cfg, &[])?;
    if base.protocol != Protocol::Alternating {
        return Err(Failure::Config("invalid value for 'protocol': schedule sweeps need alternating".into()));
    }
    let configs = SCHEDULE_FACTORS
        .iter()
        .map(|&f| {
            (format!("schedule_factor={f}"), ExperimentConfig {
                schedule_factor: f,
                ..base.clone()
            })
        })
        .collect();
    sweep("schedule-sweep", &base, configs, out, parallel)
}

/// Splits `metrics.csv` into one reward curve per task and copies the
/// tournament table when present.
fn export(run: &Path) -> Result<(), Failure> {
    let metrics = run.join("metrics.csv");
    let mut reader = csv::Reader::from_path(&metrics).map_err(|e| Failure::Runtime(format!("{}: {e}", metrics.display())))?;
    let headers = reader.headers().map_err(|e| Failure::Runtime(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Runtime(format!("{} has no '{name}' column", metrics.display())))
    };
    let (c_steps, c_task, c_reward) = (col("env_steps")?, col("task")?, col("mean_ep_reward")?);
    let mut per_task: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Failure::Runtime(e.to_string()))?;
        let task = rec[c_task].to_string();
        let row = vec![rec[c_steps].to_string(), rec[c_reward].to_string()];
        match per_task.iter_mut().find(|(t, _)| *t == task) {
            Some((_, rows)) => rows.push(row),
            None => per_task.push((task, vec![row])),
        }
    }
    let dir = run.join("export");
    std::fs::create_dir_all(&dir)?;
    for (task, rows) in &per_task {
        let path = dir.join(format!("reward_{task}.csv"));
        write_csv(&path, &["env_steps", "mean_ep_reward"], rows)?;
        out!("{}\n", path.display());
    }
    let tournament = run.join("tournament.csv");
    if tournament.exists() {
        let path = dir.join("score_vs_snapshot.csv");
        std::fs::copy(&tournament, &path)?;
        out!("{}\n", path.display());
    }
    Ok(())
}

fn dispatch(verb: Verb) -> Result<(), Failure> {
    match verb {
        Verb::Train { cfg, out } => train(&cfg, &out),
        Verb::Selfplay { cfg, out } => selfplay(&cfg, &out),
        Verb::Tournament { run, episodes, max_len } => tournament(&run, episodes, max_len),
        Verb::EvalHidden { run, envs, episodes } => eval_hidden(&run, &envs, episodes),
        Verb::AblateCascade { cfg, out, parallel } => ablate_cascade(&cfg, &out, parallel),
        Verb::ScheduleSweep { cfg, out, parallel } => schedule_sweep(&cfg, &out, parallel),
        Verb::Export { run } => export(&run),
        Verb::ValidateConfig { cfg } => {
            let c = resolve(&cfg, &[])?;
            out!("ok {}\n", c.run_id());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                out!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("usage error");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
