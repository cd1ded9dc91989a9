//! Experiment orchestration: parallel-env collection, periodic training,
//! evaluation, checkpoints, and resume.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::agent::{collect_policy_step, Agent, AgentState};
use super::config::TrainConfig;
use super::iteration::{train_iteration, MetricsRecord};
use super::replay::{snapshot_from_row, snapshot_row, ReplayBuffer};
use super::rollout::EnvModel;
use super::derive_seed;
use crate::envs::{EnvConfig, EnvRegistry, Environment};
use crate::error::{Error, Result};
use crate::hierarchy::{GoalSelector, SelectorRegistry};
use crate::numerics::{Checkpoint, Matrix};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHOICES_FILE: &str = "choices.csv";
pub const EVAL_STATES_FILE: &str = "eval_states.csv";
pub const CONFIG_FILE: &str = "config.resolved.txt";
/// Config copy stored inside each checkpoint directory.
pub const CKPT_CONFIG: &str = "config.txt";

const TRAIN_STREAM: u64 = 1;
const ENV_STREAM: u64 = 100;
const INIT_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 1 << 32;

/// Keys that may differ between a checkpoint and the run resuming it.
const RESUME_FREE_KEYS: [&str; 6] = ["total_steps", "out", "resume", "checkpoint_every", "eval_every", "eval_episodes"];

/// One greedy evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
    /// Every visited state with the choice active when it was observed.
    pub states: Vec<EvalState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalState {
    pub episode: usize,
    pub t: usize,
    pub choice: usize,
    pub obs: Vec<f64>,
}

impl EvalResult {
    pub fn mean_return(&self) -> f64 {
        self.returns.iter().sum::<f64>() / self.returns.len().max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len().max(1) as f64
    }

    pub fn choice_counts(&self, heads: usize) -> Vec<u64> {
        let mut c = vec![0; heads];
        for s in &self.states {
            c[s.choice] += 1;
        }
        c
    }
}

/// Runs `episodes` greedy episodes on fresh copies of `template`.
pub fn evaluate(
    agent: &Agent,
    selector: &dyn GoalSelector,
    template: &dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EvalResult {
        returns: Vec::with_capacity(episodes),
        successes: Vec::with_capacity(episodes),
        states: Vec::new(),
    };
    let (od, ad) = (template.obs_dim(), template.action_dim());
    for episode in 0..episodes {
        let mut env = template.boxed_clone();
        let mut obs = env.reset(rng.next_u64());
        let mut st = AgentState::new(od, ad);
        let (mut ret, mut success) = (0.0, false);
        loop {
            let step = collect_policy_step(&st, &obs, agent, selector, &mut rng, true)?;
            out.states.push(EvalState {
                episode,
                t: st.t,
                choice: step.state.choice,
                obs: obs.clone(),
            });
            let r = env.step(&step.action)?;
            ret += r.reward;
            success |= r.info.get("success").is_some_and(|&v| v > 0.0);
            obs = r.obs;
            st = step.state;
            if r.done {
                break;
            }
        }
        out.returns.push(ret);
        out.successes.push(success);
    }
    Ok(out)
}

/// What a finished run reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub iterations: u64,
    pub skipped: u64,
    /// `(step, mean return, success rate)` per evaluation.
    pub evals: Vec<(u64, f64, f64)>,
    pub out: PathBuf,
}

impl RunSummary {
    pub fn final_return(&self) -> Option<f64> {
        self.evals.last().map(|e| e.1)
    }

    pub fn final_success(&self) -> Option<f64> {
        self.evals.last().map(|e| e.2)
    }
}

pub fn env_config(config: &TrainConfig) -> EnvConfig {
    EnvConfig {
        id: config.env.clone(),
        episode_length: config.episode_length,
        maze_file: config.maze_file.clone(),
    }
}

fn u128_row(v: u128) -> [f64; 4] {
    std::array::from_fn(|i| ((v >> (32 * i)) & 0xFFFF_FFFF) as f64)
}

fn u128_from(row: &[f64]) -> u128 {
    row.iter().enumerate().fold(0, |acc, (i, &w)| acc | ((w as u128) << (32 * i)))
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// A training run in progress.
pub struct Experiment {
    config: TrainConfig,
    selectors: SelectorRegistry,
    template: Box<dyn Environment>,
    envs: Vec<Box<dyn Environment>>,
    obs: Vec<Vec<f64>>,
    env_rngs: Vec<ChaCha8Rng>,
    train_rng: ChaCha8Rng,
    agent_states: Vec<AgentState>,
    running_returns: Vec<f64>,
    pending_returns: Vec<f64>,
    choice_window: VecDeque<usize>,
    agent: Agent,
    replay: ReplayBuffer,
    model: EnvModel,
    step: u64,
    iteration: u64,
    skipped: u64,
    evals: Vec<(u64, f64, f64)>,
    last_eval: Option<u64>,
    metrics: BufWriter<File>,
    choices: BufWriter<File>,
}

impl Experiment {
    /// Prepares the output directory and either a fresh run or one resumed
    /// from `config.resume`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let out = config.out.clone();
        io(&out, fs::create_dir_all(&out))?;
        let cfg_path = out.join(CONFIG_FILE);
        io(&cfg_path, fs::write(&cfg_path, config.manifest()))?;

        let registry = EnvRegistry::default();
        let template = registry.make(&env_config(&config))?;
        let selectors = SelectorRegistry::default();
        selectors.get(&config.selector)?;
        let (od, ad) = (template.obs_dim(), template.action_dim());
        let p = config.parallel_envs;
        let resuming = config.resume.is_some();

        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM));
        let agent = Agent::new(&config, od, ad, &mut init_rng)?;
        let replay = ReplayBuffer::new(config.replay_capacity, config.replay_length + 1, p)?;
        let mut exp = Experiment {
            selectors,
            envs: (0..p).map(|_| template.boxed_clone()).collect(),
            obs: vec![Vec::new(); p],
            env_rngs: (0..p as u64)
                .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, ENV_STREAM + i)))
                .collect(),
            train_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TRAIN_STREAM)),
            agent_states: vec![AgentState::new(od, ad); p],
            running_returns: vec![0.0; p],
            pending_returns: Vec::new(),
            choice_window: VecDeque::new(),
            model: EnvModel::new(template.boxed_clone()),
            template,
            agent,
            replay,
            step: 0,
            iteration: 0,
            skipped: 0,
            evals: Vec::new(),
            last_eval: None,
            metrics: open_log(&out.join(METRICS_FILE), None, |_| resuming)?,
            choices: open_log(&out.join(CHOICES_FILE), Some("step,env,choice"), |_| resuming)?,
            config,
        };
        match exp.config.resume.clone() {
            Some(dir) => exp.resume_from(&dir)?,
            None => {
                for i in 0..p {
                    exp.begin_episode(i)?;
                }
            }
        }
        Ok(exp)
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// `(step, mean return, success rate)` of the evaluations so far.
    pub fn evals(&self) -> &[(u64, f64, f64)] {
        &self.evals
    }

    fn begin_episode(&mut self, i: usize) -> Result<()> {
        let seed = self.env_rngs[i].next_u64();
        let obs = self.envs[i].reset(seed);
        self.replay.begin_episode(i, obs.clone(), self.envs[i].snapshot())?;
        self.obs[i] = obs;
        self.agent_states[i] = AgentState::new(self.template.obs_dim(), self.template.action_dim());
        self.running_returns[i] = 0.0;
        Ok(())
    }

    fn collect_step(&mut self) -> Result<()> {
        let i = (self.step % self.config.parallel_envs as u64) as usize;
        let selector = self.selectors.get(&self.config.selector)?;
        let ps = collect_policy_step(
            &self.agent_states[i],
            &self.obs[i],
            &self.agent,
            selector,
            &mut self.env_rngs[i],
            false,
        )?;
        if ps.refreshed {
            writeln!(self.choices, "{},{i},{}", self.step, ps.state.choice)
                .map_err(|e| Error::io(self.config.out.join(CHOICES_FILE), e))?;
            self.choice_window.push_back(ps.state.choice);
            if self.choice_window.len() > self.config.choice_window {
                self.choice_window.pop_front();
            }
        }
        let r = self.envs[i].step(&ps.action)?;
        self.running_returns[i] += r.reward;
        self.replay.push(i, r.obs.clone(), self.envs[i].snapshot())?;
        self.obs[i] = r.obs;
        self.agent_states[i] = ps.state;
        self.step += 1;
        if r.done {
            self.pending_returns.push(self.running_returns[i]);
            self.begin_episode(i)?;
        }
        Ok(())
    }

    fn write_record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Usage(format!("metrics encoding: {e}")))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(self.config.out.join(METRICS_FILE), e))
    }

    fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0; self.agent.heads()];
        for &c in &self.choice_window {
            h[c] += 1;
        }
        h
    }

    fn train(&mut self) -> Result<()> {
        let selector = self.selectors.get(&self.config.selector)?;
        let mut rec = train_iteration(
            &self.replay,
            &mut self.agent,
            &mut self.model,
            selector,
            &self.config,
            &mut self.train_rng,
        )?;
        match rec.status.as_str() {
            "ok" => self.iteration += 1,
            "skipped" => self.skipped += 1,
            _ => {}
        }
        rec.step = self.step;
        rec.iteration = self.iteration;
        rec.skipped = self.skipped;
        rec.choice_histogram = self.histogram();
        if !self.pending_returns.is_empty() {
            rec.episode_return = Some(self.pending_returns.iter().sum::<f64>() / self.pending_returns.len() as f64);
            self.pending_returns.clear();
        }
        self.write_record(&rec)
    }

    /// Greedy evaluation at the current step; appends an eval record.
    pub fn evaluate_now(&mut self) -> Result<EvalResult> {
        let selector = self.selectors.get(&self.config.selector)?;
        let res = evaluate(
            &self.agent,
            selector,
            self.template.as_ref(),
            self.config.eval_episodes,
            derive_seed(self.config.seed, EVAL_STREAM + self.step),
        )?;
        let rec = MetricsRecord {
            kind: "eval".into(),
            step: self.step,
            iteration: self.iteration,
            status: "ok".into(),
            eval_return: Some(res.mean_return()),
            eval_success: Some(res.success_rate()),
            choice_histogram: res.choice_counts(self.agent.heads()),
            skipped: self.skipped,
            ..Default::default()
        };
        self.write_record(&rec)?;
        info!(
            "step {}: eval return {:.3}, success {:.2}",
            self.step,
            res.mean_return(),
            res.success_rate()
        );
        self.evals.push((self.step, res.mean_return(), res.success_rate()));
        self.last_eval = Some(self.step);
        Ok(res)
    }

    /// Collects and trains until `target` env steps have been taken.
    pub fn run_until(&mut self, target: u64) -> Result<()> {
        let c = &self.config;
        let (train_every, train_start) = (c.train_every as u64, c.train_start);
        let (eval_every, ckpt_every) = (c.eval_every, c.checkpoint_every);
        while self.step < target {
            self.collect_step()?;
            if self.step % train_every == 0 && self.step >= train_start {
                self.train()?;
            }
            if eval_every > 0 && self.step % eval_every == 0 {
                self.evaluate_now()?;
            }
            if ckpt_every > 0 && self.step % ckpt_every == 0 {
                let dir = self.config.out.join(format!("ckpt-{}", self.step));
                self.save_checkpoint(&dir)?;
            }
        }
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        let out = &self.config.out;
        self.metrics.flush().map_err(|e| Error::io(out.join(METRICS_FILE), e))?;
        self.choices.flush().map_err(|e| Error::io(out.join(CHOICES_FILE), e))
    }

    /// Runs to `total_steps`, evaluates once more if the last step was not
    /// evaluated, and writes the final evaluation states.
    pub fn finish(mut self) -> Result<RunSummary> {
        self.run_until(self.config.total_steps)?;
        if self.step > 0 {
            let res = if self.last_eval == Some(self.step) {
                // Re-run the same seeded pass to recover its states.
                let selector = self.selectors.get(&self.config.selector)?;
                evaluate(
                    &self.agent,
                    selector,
                    self.template.as_ref(),
                    self.config.eval_episodes,
                    derive_seed(self.config.seed, EVAL_STREAM + self.step),
                )?
            } else {
                self.evaluate_now()?
            };
            write_eval_states(&self.config.out.join(EVAL_STATES_FILE), &res)?;
        }
        self.flush()?;
        Ok(RunSummary {
            steps: self.step,
            iterations: self.iteration,
            skipped: self.skipped,
            evals: self.evals,
            out: self.config.out,
        })
    }

    /// Writes everything needed to continue the run bit-exactly.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.flush()?;
        let mut ck = Checkpoint::new();
        self.agent.save_into(&mut ck)?;
        self.replay.save_into(&mut ck, "replay")?;
        let snaps: Vec<Vec<f64>> = self.envs.iter().map(|e| snapshot_row(&e.snapshot())).collect();
        ck.add("run", "env_snapshots", Matrix::from_rows(&snaps))?;
        let states: Vec<Vec<f64>> = self.agent_states.iter().map(AgentState::to_row).collect();
        ck.add("run", "agent_states", Matrix::from_rows(&states))?;
        let mut words: Vec<Vec<f64>> = self.env_rngs.iter().map(|r| u128_row(r.get_word_pos()).to_vec()).collect();
        words.push(u128_row(self.train_rng.get_word_pos()).to_vec());
        ck.add("run", "rng_words", Matrix::from_rows(&words))?;
        let last_eval = self.last_eval.map_or(-1.0, |s| s as f64);
        ck.add(
            "run",
            "counters",
            Matrix::row_vector(vec![self.step as f64, self.iteration as f64, self.skipped as f64, last_eval]),
        )?;
        ck.add("run", "running_returns", Matrix::row_vector(self.running_returns.clone()))?;
        let pending = &self.pending_returns;
        ck.add("run", "pending_returns", Matrix::from_vec(1, pending.len(), pending.clone()))?;
        let window: Vec<f64> = self.choice_window.iter().map(|&c| c as f64).collect();
        ck.add("run", "choice_window", Matrix::from_vec(1, window.len(), window))?;
        let evals: Vec<f64> = self.evals.iter().flat_map(|e| [e.0 as f64, e.1, e.2]).collect();
        ck.add("run", "evals", Matrix::from_vec(self.evals.len(), 3, evals))?;
        ck.save(dir)?;
        let path = dir.join(CKPT_CONFIG);
        io(&path, fs::write(&path, self.config.manifest()))?;
        info!("checkpoint written to {}", dir.display());
        Ok(())
    }

    fn resume_from(&mut self, dir: &Path) -> Result<()> {
        let saved = TrainConfig::from_file(&dir.join(CKPT_CONFIG))?;
        check_resumable(&saved, &self.config)?;
        let ck = Checkpoint::load(dir)?;
        self.agent.load_from(&ck)?;
        self.replay = ReplayBuffer::load_from(&ck, "replay")?;
        let p = self.envs.len();
        let snaps = ck.get("run", "env_snapshots")?.to_rows();
        let states = ck.get("run", "agent_states")?.to_rows();
        let words = ck.get("run", "rng_words")?.to_rows();
        if snaps.len() != p || states.len() != p || words.len() != p + 1 {
            return Err(Error::Checkpoint("run state has the wrong number of envs".into()));
        }
        let (od, ad) = (self.template.obs_dim(), self.template.action_dim());
        for i in 0..p {
            self.envs[i].restore(&snapshot_from_row(&snaps[i]));
            self.obs[i] = self.envs[i].observe();
            self.agent_states[i] = AgentState::from_row(&states[i], od, ad)?;
            self.env_rngs[i].set_word_pos(u128_from(&words[i]));
        }
        self.train_rng.set_word_pos(u128_from(&words[p]));
        let counters = ck.get("run", "counters")?.data();
        if counters.len() != 4 {
            return Err(Error::Checkpoint("run/counters has the wrong length".into()));
        }
        self.step = counters[0] as u64;
        self.iteration = counters[1] as u64;
        self.skipped = counters[2] as u64;
        self.last_eval = (counters[3] >= 0.0).then_some(counters[3] as u64);
        self.running_returns = ck.get("run", "running_returns")?.data().to_vec();
        self.pending_returns = ck.get("run", "pending_returns")?.data().to_vec();
        self.choice_window = ck.get("run", "choice_window")?.data().iter().map(|&c| c as usize).collect();
        self.evals = ck
            .get("run", "evals")?
            .to_rows()
            .iter()
            .map(|r| (r[0] as u64, r[1], r[2]))
            .collect();

        // Keep log lines written up to the checkpoint when resuming in place.
        let out = self.config.out.clone();
        let step = self.step;
        self.metrics = open_log(&out.join(METRICS_FILE), None, |line| {
            serde_json::from_str::<MetricsRecord>(line).is_ok_and(|r| r.step <= step)
        })?;
        self.choices = open_log(&out.join(CHOICES_FILE), Some("step,env,choice"), |line| {
            line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step)
        })?;
        info!("resumed from {} at step {step}", dir.display());
        Ok(())
    }
}

fn check_resumable(saved: &TrainConfig, current: &TrainConfig) -> Result<()> {
    let parse = |c: &TrainConfig| -> Vec<(String, String)> {
        c.manifest()
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .filter(|(k, _)| !RESUME_FREE_KEYS.contains(&k.as_str()))
            .collect()
    };
    for ((k, a), (_, b)) in parse(saved).into_iter().zip(parse(current)) {
        if a != b {
            return Err(Error::Config(format!(
                "cannot resume: checkpoint has {k} = {a}, run has {k} = {b}"
            )));
        }
    }
    Ok(())
}

/// Opens a log for appending after rewriting it with only the kept lines of
/// any existing content (all of it is dropped unless `keep` says otherwise).
fn open_log(path: &Path, header: Option<&str>, keep: impl Fn(&str) -> bool) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if path.exists() {
        let f = io(path, File::open(path))?;
        for line in BufReader::new(f).lines() {
            let line = io(path, line)?;
            if Some(line.as_str()) != header && keep(&line) {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(io(path, File::create(path))?);
    if let Some(h) = header {
        io(path, writeln!(w, "{h}"))?;
    }
    for line in kept {
        io(path, writeln!(w, "{line}"))?;
    }
    io(path, w.flush())?;
    let f = io(path, OpenOptions::new().append(true).open(path))?;
    Ok(BufWriter::new(f))
}

fn write_eval_states(path: &Path, res: &EvalResult) -> Result<()> {
    let mut w = BufWriter::new(io(path, File::create(path))?);
    let d = res.states.first().map_or(0, |s| s.obs.len());
    let cols: Vec<String> = (0..d).map(|j| format!("s{j}")).collect();
    io(path, writeln!(w, "episode,t,choice,{}", cols.join(",")))?;
    for s in &res.states {
        let vals: Vec<String> = s.obs.iter().map(|v| v.to_string()).collect();
        io(path, writeln!(w, "{},{},{},{}", s.episode, s.t, s.choice, vals.join(",")))?;
    }
    io(path, w.flush())
}

/// Runs a full experiment as configured.
pub fn run_experiment(config: TrainConfig) -> Result<RunSummary> {
    Experiment::new(config)?.finish()
}

/// Rebuilds the agent stored in a checkpoint directory.
pub fn load_agent(dir: &Path) -> Result<(TrainConfig, Agent)> {
    let config = TrainConfig::from_file(&dir.join(CKPT_CONFIG))?;
    let template = EnvRegistry::default().make(&env_config(&config))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(&config, template.obs_dim(), template.action_dim(), &mut rng)?;
    agent.load_from(&Checkpoint::load(dir)?)?;
    Ok((config, agent))
}
