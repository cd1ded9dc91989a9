//! Command-line front end: `train`, `eval`, `toysim`, and `analyze`.

pub mod analysis;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;

use mrs_core::envs::EnvRegistry;
use mrs_core::hierarchy::SelectorRegistry;
use mrs_core::toysim::{build_path, default_ticks, simulate_agent, PathKind, SimResult, ToyAgentSpec};
use mrs_core::trainer::experiment::{env_config, CHOICES_FILE, CONFIG_FILE, EVAL_STATES_FILE};
use mrs_core::trainer::{evaluate, load_agent, run_experiment, TrainConfig};
use mrs_core::{Error, Result};

use analysis::{analyze_purity, choice_shares, quartile_shares, AnalysisOutput, K_RANGE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mrs", about = "Multi-resolution skill agents at desk scale", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent; outputs go to the configured `out` directory.
    Train {
        /// Flat `key = value` run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` overrides applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes the visited states here when given.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Path-tracking simulation with short, long, or contextual lookahead.
    Toysim {
        #[arg(long)]
        path: String,
        #[arg(long)]
        agent: String,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Tick cap per run; defaults to twice the traversal time.
        #[arg(long)]
        ticks: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Choice-share streams and cluster purity of a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Decisions per share window; defaults to the run's choice window.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit status.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            overrides,
            out,
        } => {
            let mut c = match config {
                Some(p) => TrainConfig::from_file(&p)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                c.apply_override(kv)?;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(o) = out {
                c.out = o;
            }
            let summary = run_experiment(c)?;
            emit(
                stdout,
                &format!(
                    "steps {} iterations {} skipped {} final_return {} final_success {}\n",
                    summary.steps,
                    summary.iterations,
                    summary.skipped,
                    summary.final_return().map_or("none".into(), |v| v.to_string()),
                    summary.final_success().map_or("none".into(), |v| v.to_string()),
                ),
            )
        }
        Command::Eval {
            ckpt,
            episodes,
            seed,
            out,
        } => {
            if episodes == 0 {
                return Err(Error::Usage("--episodes must be positive".into()));
            }
            let (config, agent) = load_agent(&ckpt)?;
            let template = EnvRegistry::default().make(&env_config(&config))?;
            let selectors = SelectorRegistry::default();
            let res = evaluate(&agent, selectors.get(&config.selector)?, template.as_ref(), episodes, seed)?;
            if let Some(dir) = out {
                create_dir(&dir)?;
                let mut text = String::from("episode,t,choice");
                let d = res.states.first().map_or(0, |s| s.obs.len());
                for j in 0..d {
                    let _ = write!(text, ",s{j}");
                }
                text.push('\n');
                for s in &res.states {
                    let _ = write!(text, "{},{},{}", s.episode, s.t, s.choice);
                    for v in &s.obs {
                        let _ = write!(text, ",{v}");
                    }
                    text.push('\n');
                }
                write_file(&dir.join(EVAL_STATES_FILE), &text)?;
            }
            emit(
                stdout,
                &format!(
                    "episodes {episodes} mean_return {} success_rate {}\n",
                    res.mean_return(),
                    res.success_rate()
                ),
            )
        }
        Command::Toysim {
            path,
            agent,
            seeds,
            scale,
            ticks,
            out,
        } => {
            let kind: PathKind = path.parse()?;
            let spec = ToyAgentSpec::new(&agent);
            let p = build_path(kind, scale)?;
            let ticks = ticks.unwrap_or_else(|| default_ticks(&p, &spec));
            let dir = out.join("toysim");
            create_dir(&dir)?;
            let mut csv = String::from("seed,path_error,heading_variance,short_fraction,ticks\n");
            for seed in 0..seeds {
                let r = simulate_agent(&spec, &p, seed, ticks)?;
                let _ = writeln!(
                    csv,
                    "{seed},{},{},{},{}",
                    r.path_error,
                    r.heading_variance,
                    r.short_fraction(),
                    r.ticks()
                );
                write_file(&dir.join(format!("{kind}_{agent}_seed{seed}.csv")), &trajectory_csv(&r))?;
            }
            write_file(&dir.join(format!("{kind}_{agent}.csv")), &csv)?;
            emit(stdout, &csv)
        }
        Command::Analyze {
            run,
            out,
            window,
            seed,
        } => {
            let out = out.unwrap_or_else(|| run.clone());
            let (output, report) = analyze_run(&run, window, seed)?;
            create_dir(&out)?;
            let heads = output.shares.first().map_or(0, |w| w.shares.len());
            let mut csv = String::from("window_start,window_end");
            for h in 0..heads {
                let _ = write!(csv, ",share{h}");
            }
            csv.push('\n');
            for w in &output.shares {
                let _ = write!(csv, "{},{}", w.start, w.end);
                for s in &w.shares {
                    let _ = write!(csv, ",{s}");
                }
                csv.push('\n');
            }
            write_file(&out.join("choice_shares.csv"), &csv)?;
            write_file(&out.join("purity.txt"), &report)?;
            emit(stdout, &report)
        }
    }
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    info!("writing {}", path.display());
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trajectory_csv(r: &SimResult) -> String {
    let mut s = String::from("tick,x,y,subgoal_x,subgoal_y,horizon\n");
    for (t, ((p, g), h)) in r.positions[1..].iter().zip(&r.subgoals).zip(&r.horizons).enumerate() {
        let h = match h {
            mrs_core::toysim::HorizonChoice::Short => "short",
            mrs_core::toysim::HorizonChoice::Long => "long",
        };
        let _ = writeln!(s, "{t},{},{},{},{},{h}", p[0], p[1], g[0], g[1]);
    }
    s
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Usage(format!("{}:{line}: cannot parse {v:?}", path.display())))
}

/// `(step, env, choice)` rows of a run's choice log.
pub fn read_choices(path: &Path) -> Result<Vec<(u64, usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Usage(format!("{}:{}: expected 3 fields", path.display(), n + 1)));
        }
        out.push((
            parse_field(path, n + 1, f[0])?,
            parse_field(path, n + 1, f[1])?,
            parse_field(path, n + 1, f[2])?,
        ));
    }
    Ok(out)
}

/// States and choice labels of a run's final evaluation.
pub fn read_eval_states(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let text = read_text(path)?;
    let (mut states, mut labels) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(Error::Usage(format!("{}:{}: too few fields", path.display(), n + 1)));
        }
        labels.push(parse_field(path, n + 1, f[2])?);
        states.push(f[3..].iter().map(|v| parse_field(path, n + 1, v)).collect::<Result<Vec<f64>>>()?);
    }
    Ok((states, labels))
}

/// Runs both analyses on a run directory and renders the purity report.
pub fn analyze_run(run: &Path, window: Option<usize>, seed: u64) -> Result<(AnalysisOutput, String)> {
    let config = TrainConfig::from_file(&run.join(CONFIG_FILE))?;
    let heads = config.resolution_set()?.len();
    let resolutions = config.resolution_set()?;
    let events = read_choices(&run.join(CHOICES_FILE))?;
    let choices: Vec<usize> = events.iter().map(|e| e.2).collect();
    if choices.iter().any(|&c| c >= heads) {
        return Err(Error::Usage(format!("choice log has indices beyond {heads} heads")));
    }
    let shares = choice_shares(&choices, heads, window.unwrap_or(config.choice_window));
    let mut report = String::new();
    let names: Vec<String> = resolutions.horizons().iter().map(ToString::to_string).collect();
    let _ = writeln!(report, "resolutions {}", names.join(","));
    let steps = events.iter().map(|e| e.0 + 1).max().unwrap_or(0).max(config.total_steps);
    let q = quartile_shares(&events.iter().map(|e| (e.0, e.2)).collect::<Vec<_>>(), heads, steps);
    for (i, row) in q.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(report, "quartile{} shares {}", i + 1, vals.join(","));
    }
    let eval_path = run.join(EVAL_STATES_FILE);
    let purity = if eval_path.exists() {
        let (states, labels) = read_eval_states(&eval_path)?;
        let r = analyze_purity(&states, &labels, heads, K_RANGE, seed)?;
        let _ = writeln!(report, "k {}", r.k);
        let _ = writeln!(report, "silhouette {:.6}", r.silhouette);
        let _ = writeln!(report, "purity {:.6}", r.purity);
        let dom: Vec<String> = r
            .dominant
            .iter()
            .map(|d| d.map_or("-".to_string(), |i| names[i].clone()))
            .collect();
        let _ = writeln!(report, "dominant {}", dom.join(","));
        Some(r)
    } else {
        let _ = writeln!(report, "purity none (no {EVAL_STATES_FILE})");
        None
    };
    Ok((AnalysisOutput { shares, purity }, report))
}
