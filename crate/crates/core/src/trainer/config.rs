//! Run configuration: a flat `key = value` file, overrides, and the resolved
//! manifest written next to every run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::skills::ResolutionSet;

/// Every knob of a run. Defaults reproduce the reference agent
/// hyperparameters; the remaining keys are desk-scale plumbing.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub episode_length: Option<usize>,
    pub maze_file: Option<PathBuf>,
    pub total_steps: u64,
    pub seed: u64,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,

    pub batch_size: usize,
    pub replay_length: usize,
    pub k: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub resolutions: String,
    pub target_entropy: f64,
    pub kl_weight: f64,
    pub rssm_deter: usize,
    pub rssm_stoch: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub activations: String,
    pub mlp_layers: usize,
    pub mlp_units: usize,
    pub train_every: usize,
    pub parallel_envs: usize,

    pub selector: String,
    pub replay_capacity: usize,
    pub latent_groups: usize,
    pub latent_classes: usize,
    pub free_bits: f64,
    pub skill_learning_rate: Option<f64>,
    pub manager_learning_rate: Option<f64>,
    pub worker_learning_rate: Option<f64>,
    pub grad_clip: f64,
    pub rollout_starts: usize,
    pub skill_pairs: usize,
    pub train_start: u64,
    pub advantage_weight_ext: f64,
    pub advantage_weight_expl: f64,
    pub advantage_std_floor: f64,
    pub entropy_initial: f64,
    pub worker_std_min: f64,
    pub worker_std_max: f64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub checkpoint_every: u64,
    pub choice_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "corridor".into(),
            episode_length: None,
            maze_file: None,
            total_steps: 200_000,
            seed: 0,
            out: PathBuf::from("runs/default"),
            resume: None,
            batch_size: 16,
            replay_length: 64,
            k: 8,
            horizon: 16,
            lambda: 0.95,
            gamma: 0.99,
            resolutions: "64,32,16,8,inf".into(),
            target_entropy: 0.5,
            kl_weight: 1.0,
            rssm_deter: 1024,
            rssm_stoch: "32x32".into(),
            optimizer: "adam".into(),
            learning_rate: 1e-4,
            adam_epsilon: 1e-6,
            weight_decay: 1e-2,
            activations: "layernorm+elu".into(),
            mlp_layers: 4,
            mlp_units: 512,
            train_every: 8,
            parallel_envs: 4,
            selector: "mrs".into(),
            replay_capacity: 200_000,
            latent_groups: 8,
            latent_classes: 8,
            free_bits: 1.0,
            skill_learning_rate: None,
            manager_learning_rate: None,
            worker_learning_rate: None,
            grad_clip: 100.0,
            rollout_starts: 0,
            skill_pairs: 0,
            train_start: 0,
            advantage_weight_ext: 1.0,
            advantage_weight_expl: 0.1,
            advantage_std_floor: 1e-2,
            entropy_initial: 1e-2,
            worker_std_min: 0.1,
            worker_std_max: 1.0,
            eval_every: 10_000,
            eval_episodes: 10,
            checkpoint_every: 50_000,
            choice_window: 1000,
        }
    }
}

fn fmt_f64(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else {
        format!("{v:?}")
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn parse_mlp(value: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("mlp_sizes: expected LAYERSxUNITS, got {value:?}"));
    let (l, u) = value.split_once(['x', 'X', '×']).ok_or_else(bad)?;
    Ok((l.trim().parse().map_err(|_| bad())?, u.trim().parse().map_err(|_| bad())?))
}

impl TrainConfig {
    /// Reads a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = TrainConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "env" => self.env = value.to_string(),
            "episode_length" => {
                self.episode_length = if value == "none" { None } else { Some(parse_num(key, value)?) }
            }
            "maze_file" => self.maze_file = (value != "none").then(|| PathBuf::from(value)),
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "resume" => self.resume = (value != "none").then(|| PathBuf::from(value)),
            "train_batch_size" => self.batch_size = parse_num(key, value)?,
            "replay_data_length" => self.replay_length = parse_num(key, value)?,
            "worker_abstraction_length" => self.k = parse_num(key, value)?,
            "imagination_horizon" => self.horizon = parse_num(key, value)?,
            "return_lambda" => self.lambda = parse_num(key, value)?,
            "return_discount" => self.gamma = parse_num(key, value)?,
            "skill_resolutions" => self.resolutions = value.to_string(),
            "target_entropy" => self.target_entropy = parse_num(key, value)?,
            "kl_loss_weight" => self.kl_weight = parse_num(key, value)?,
            "rssm_deter_size" => self.rssm_deter = parse_num(key, value)?,
            "rssm_stoch_size" => self.rssm_stoch = value.to_string(),
            "optimizer" => self.optimizer = value.to_lowercase(),
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "activations" => self.activations = value.to_lowercase().replace(' ', ""),
            "mlp_sizes" => (self.mlp_layers, self.mlp_units) = parse_mlp(value)?,
            "train_every" => self.train_every = parse_num(key, value)?,
            "parallel_envs" => self.parallel_envs = parse_num(key, value)?,
            "selector" => self.selector = value.to_string(),
            "replay_capacity" => self.replay_capacity = parse_num(key, value)?,
            "latent_groups" => self.latent_groups = parse_num(key, value)?,
            "latent_classes" => self.latent_classes = parse_num(key, value)?,
            "free_bits" => self.free_bits = parse_num(key, value)?,
            "skill_learning_rate" => self.skill_learning_rate = parse_opt_f64(key, value)?,
            "manager_learning_rate" => self.manager_learning_rate = parse_opt_f64(key, value)?,
            "worker_learning_rate" => self.worker_learning_rate = parse_opt_f64(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "rollout_starts" => self.rollout_starts = parse_num(key, value)?,
            "skill_pairs" => self.skill_pairs = parse_num(key, value)?,
            "train_start" => self.train_start = parse_num(key, value)?,
            "advantage_weight_ext" => self.advantage_weight_ext = parse_num(key, value)?,
            "advantage_weight_expl" => self.advantage_weight_expl = parse_num(key, value)?,
            "advantage_std_floor" => self.advantage_std_floor = parse_num(key, value)?,
            "entropy_initial" => self.entropy_initial = parse_num(key, value)?,
            "worker_std_min" => self.worker_std_min = parse_num(key, value)?,
            "worker_std_max" => self.worker_std_max = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "choice_window" => self.choice_window = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn resolution_set(&self) -> Result<ResolutionSet> {
        ResolutionSet::parse(&self.resolutions, self.k)
    }

    pub fn skill_lr(&self) -> f64 {
        self.skill_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn manager_lr(&self) -> f64 {
        self.manager_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn worker_lr(&self) -> f64 {
        self.worker_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Rollouts started per iteration; 0 means one per replayed state.
    pub fn effective_rollout_starts(&self) -> usize {
        if self.rollout_starts == 0 {
            self.batch_size * (self.replay_length + 1)
        } else {
            self.rollout_starts
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.horizon == 0 || self.horizon % self.k != 0 {
            return fail(format!(
                "imagination_horizon {} must be a positive multiple of worker_abstraction_length {}",
                self.horizon, self.k
            ));
        }
        self.resolution_set()?;
        if self.batch_size == 0 || self.replay_length == 0 {
            return fail("train_batch_size and replay_data_length must be positive".into());
        }
        if self.parallel_envs == 0 || self.train_every == 0 {
            return fail("parallel_envs and train_every must be positive".into());
        }
        if self.mlp_layers == 0 || self.mlp_units == 0 {
            return fail("mlp_sizes must be positive".into());
        }
        if self.latent_groups == 0 || self.latent_classes < 2 {
            return fail("latents need at least one group of two classes".into());
        }
        if self.optimizer != "adam" {
            return fail(format!("optimizer {:?} is not supported; use adam", self.optimizer));
        }
        if self.activations != "layernorm+elu" {
            return fail(format!("activations {:?} is not supported; use layernorm+elu", self.activations));
        }
        if !(0.0..=1.0).contains(&self.target_entropy) {
            return fail(format!("target_entropy {} must lie in [0, 1]", self.target_entropy));
        }
        if self.replay_capacity < self.replay_length + 1 {
            return fail("replay_capacity is smaller than one segment".into());
        }
        if self.eval_episodes == 0 || self.choice_window == 0 {
            return fail("eval_episodes and choice_window must be positive".into());
        }
        if !["mrs", "random"].contains(&self.selector.as_str()) {
            return fail(format!("selector {:?} is not one of mrs, random", self.selector));
        }
        Ok(())
    }

    /// Every effective setting as `key = value` lines, parseable by
    /// [`TrainConfig::apply_text`].
    pub fn manifest(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), fmt_f64);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let lines: Vec<(&str, String)> = vec![
            ("train_batch_size", self.batch_size.to_string()),
            ("replay_data_length", self.replay_length.to_string()),
            ("worker_abstraction_length", self.k.to_string()),
            ("imagination_horizon", self.horizon.to_string()),
            ("return_lambda", fmt_f64(self.lambda)),
            ("return_discount", fmt_f64(self.gamma)),
            ("skill_resolutions", self.resolutions.clone()),
            ("target_entropy", fmt_f64(self.target_entropy)),
            ("kl_loss_weight", fmt_f64(self.kl_weight)),
            ("rssm_deter_size", self.rssm_deter.to_string()),
            ("rssm_stoch_size", self.rssm_stoch.clone()),
            ("optimizer", self.optimizer.clone()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("adam_epsilon", fmt_f64(self.adam_epsilon)),
            ("weight_decay", fmt_f64(self.weight_decay)),
            ("activations", self.activations.clone()),
            ("mlp_sizes", format!("{}x{}", self.mlp_layers, self.mlp_units)),
            ("train_every", self.train_every.to_string()),
            ("parallel_envs", self.parallel_envs.to_string()),
            ("env", self.env.clone()),
            (
                "episode_length",
                self.episode_length.map_or("none".into(), |v| v.to_string()),
            ),
            ("maze_file", path(&self.maze_file)),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("resume", path(&self.resume)),
            ("selector", self.selector.clone()),
            ("replay_capacity", self.replay_capacity.to_string()),
            ("latent_groups", self.latent_groups.to_string()),
            ("latent_classes", self.latent_classes.to_string()),
            ("free_bits", fmt_f64(self.free_bits)),
            ("skill_learning_rate", opt(self.skill_learning_rate)),
            ("manager_learning_rate", opt(self.manager_learning_rate)),
            ("worker_learning_rate", opt(self.worker_learning_rate)),
            ("grad_clip", fmt_f64(self.grad_clip)),
            ("rollout_starts", self.rollout_starts.to_string()),
            ("skill_pairs", self.skill_pairs.to_string()),
            ("train_start", self.train_start.to_string()),
            ("advantage_weight_ext", fmt_f64(self.advantage_weight_ext)),
            ("advantage_weight_expl", fmt_f64(self.advantage_weight_expl)),
            ("advantage_std_floor", fmt_f64(self.advantage_std_floor)),
            ("entropy_initial", fmt_f64(self.entropy_initial)),
            ("worker_std_min", fmt_f64(self.worker_std_min)),
            ("worker_std_max", fmt_f64(self.worker_std_max)),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("choice_window", self.choice_window.to_string()),
        ];
        let mut out = String::from("# effective run configuration\n");
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_reference_table() {
        let m = TrainConfig::default().manifest();
        for line in [
            "train_batch_size = 16",
            "replay_data_length = 64",
            "worker_abstraction_length = 8",
            "imagination_horizon = 16",
            "return_lambda = 0.95",
            "return_discount = 0.99",
            "skill_resolutions = 64,32,16,8,inf",
            "target_entropy = 0.5",
            "kl_loss_weight = 1.0",
            "rssm_deter_size = 1024",
            "rssm_stoch_size = 32x32",
            "optimizer = adam",
            "learning_rate = 1e-4",
            "adam_epsilon = 1e-6",
            "weight_decay = 0.01",
            "activations = layernorm+elu",
            "mlp_sizes = 4x512",
            "train_every = 8",
            "parallel_envs = 4",
        ] {
            assert!(m.lines().any(|l| l == line), "missing {line:?}");
        }
    }

    #[test]
    fn manifest_roundtrips() {
        let mut c = TrainConfig::default();
        c.apply_override("mlp_sizes=2x32").unwrap();
        c.apply_override("manager_learning_rate=3e-4").unwrap();
        c.apply_override("maze_file=/tmp/m.txt").unwrap();
        let mut d = TrainConfig::default();
        d.apply_text(&c.manifest()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("return_lambda=abc").is_err());
        c.apply_override("imagination_horizon=12").unwrap();
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.apply_override("skill_resolutions=64,12").unwrap();
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
