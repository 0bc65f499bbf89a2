//! Run configuration: a flat key = value text format with typed, range-checked
//! keys and experiment defaults.
//!
//! Lines are `key = value`; `#` starts a comment; `[section]` headers are
//! accepted as decoration and ignored, so the canonical echo produced by
//! `RunConfig::to_text` parses back unchanged. Unknown and duplicate keys are
//! rejected with their line number, as are type and range violations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::agents::{AgentKind, EkfSetup, EnvSetup, TrainConfig};
use crate::ekf::BatchMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EvalSetup {
    pub episodes: usize,
    pub epsilon: f64,
    pub pole_lengths: Vec<f64>,
    pub cart_masses: Vec<f64>,
}

impl EvalSetup {
    pub fn default_experiment() -> Self {
        EvalSetup {
            episodes: 500,
            epsilon: 0.1,
            pole_lengths: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4],
            cart_masses: vec![0.1, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathsConfig {
    pub checkpoint: PathBuf,
    pub ekf_checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoint: "checkpoint.rkq".into(),
            ekf_checkpoint: "checkpoint.rkekf".into(),
            train_log: "train_log.csv".into(),
            report: "report.csv".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub agent: AgentKind,
    pub seed: u64,
    /// When false the training-log wall_ms column is written as 0 so repeated
    /// runs produce byte-identical logs.
    pub log_timing: bool,
    pub train: TrainConfig,
    pub env: EnvSetup,
    pub ekf: EkfSetup,
    pub eval: EvalSetup,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn default_for(agent: AgentKind) -> Self {
        RunConfig {
            agent,
            seed: 1,
            log_timing: true,
            train: TrainConfig::default_for(agent),
            env: EnvSetup::default_experiment(),
            ekf: EkfSetup::default_experiment(),
            eval: EvalSetup::default_experiment(),
            paths: PathsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.env.nominal.validate()?;
        self.env.ranges.validate()?;
        self.ekf.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::InvalidArgument {
                what: "eval_episodes",
                message: "must be at least 1".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.eval.epsilon) {
            return Err(Error::InvalidArgument {
                what: "eval_epsilon",
                message: "must lie in [0, 1]".into(),
            });
        }
        if self.eval.pole_lengths.is_empty() || self.eval.cart_masses.is_empty() {
            return Err(Error::InvalidArgument {
                what: "sweep axes",
                message: "sweep_pole_lengths and sweep_cart_masses must be non-empty".into(),
            });
        }
        Ok(())
    }

    /// Prepends `dir` to every relative output path.
    pub fn rebase_paths(&mut self, dir: &Path) {
        for p in [
            &mut self.paths.checkpoint,
            &mut self.paths.ekf_checkpoint,
            &mut self.paths.train_log,
            &mut self.paths.report,
        ] {
            if p.is_relative() {
                *p = dir.join(&p);
            }
        }
    }

    /// Canonical echo of the fully-resolved configuration; parses back to the
    /// same config.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mode = match self.ekf.batch_mode {
            BatchMode::Averaged => "averaged",
            BatchMode::Sequential => "sequential",
        };
        format!(
            "agent = {}\nseed = {}\nlog_timing = {}\n\
             \n[train]\nepisodes = {}\nbatch_size = {}\ngamma = {}\n\
             epsilon_start = {}\nepsilon_end = {}\nepsilon_decay_episodes = {}\n\
             epsilon_eval = {}\ntarget_sync_interval = {}\nreplay_capacity = {}\n\
             replay_min = {}\nlearning_rate = {}\nk_candidates = {}\ninit_scale = {}\n\
             \n[env]\nnominal_cart_mass = {}\nnominal_pole_length = {}\n\
             pole_length_min = {}\npole_length_max = {}\ncart_mass_min = {}\n\
             cart_mass_max = {}\ncross_product = {}\n\
             \n[ekf]\np0_scale = {}\npv_scale = {}\np_n = {}\nekf_batch_mode = {}\n\
             psd_check_interval = {}\n\
             \n[eval]\neval_episodes = {}\neval_epsilon = {}\n\
             sweep_pole_lengths = {}\nsweep_cart_masses = {}\n\
             \n[paths]\ncheckpoint_path = {}\nekf_checkpoint_path = {}\n\
             train_log_path = {}\nreport_path = {}\n",
            self.agent,
            self.seed,
            self.log_timing,
            self.train.episodes,
            self.train.batch_size,
            self.train.gamma,
            self.train.epsilon_start,
            self.train.epsilon_end,
            self.train.epsilon_decay_episodes,
            self.train.epsilon_eval,
            self.train.target_sync_interval,
            self.train.replay_capacity,
            self.train.replay_min,
            self.train.learning_rate,
            self.train.k_candidates,
            self.train.init_scale,
            self.env.nominal.cart_mass,
            self.env.nominal.pole_length,
            self.env.ranges.pole_length_min,
            self.env.ranges.pole_length_max,
            self.env.ranges.cart_mass_min,
            self.env.ranges.cart_mass_max,
            self.env.cross_product,
            self.ekf.p0_scale,
            self.ekf.pv_scale,
            self.ekf.observation_noise,
            mode,
            self.ekf.psd_check_interval,
            self.eval.episodes,
            self.eval.epsilon,
            list(&self.eval.pole_lengths),
            list(&self.eval.cart_masses),
            self.paths.checkpoint.display(),
            self.paths.ekf_checkpoint.display(),
            self.paths.train_log.display(),
            self.paths.report.display(),
        )
    }
}

fn config_err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') && content.ends_with(']') {
            continue; // decorative section header
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(config_err(line, content, "expected `key = value`"));
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(config_err(line, content, "missing key before `=`"));
        }
        if let Some(first) = seen.insert(key.clone(), line) {
            return Err(config_err(
                line,
                &key,
                format!("duplicate key (first set on line {first})"),
            ));
        }
        entries.push(Entry { line, key, value });
    }
    Ok(entries)
}

fn parse_f64(e: &Entry) -> Result<f64> {
    e.value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| config_err(e.line, &e.key, format!("expected a number, got `{}`", e.value)))
}

fn parse_usize(e: &Entry) -> Result<usize> {
    e.value.parse::<usize>().map_err(|_| {
        config_err(
            e.line,
            &e.key,
            format!("expected an unsigned integer, got `{}`", e.value),
        )
    })
}

fn parse_u64(e: &Entry) -> Result<u64> {
    e.value.parse::<u64>().map_err(|_| {
        config_err(
            e.line,
            &e.key,
            format!("expected an unsigned integer, got `{}`", e.value),
        )
    })
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(
            e.line,
            &e.key,
            format!("expected true or false, got `{}`", e.value),
        )),
    }
}

fn parse_f64_list(e: &Entry) -> Result<Vec<f64>> {
    let items: Vec<f64> = e
        .value
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            config_err(
                e.line,
                &e.key,
                format!("expected comma-separated numbers, got `{}`", e.value),
            )
        })?;
    if items.is_empty() || items.iter().any(|v| !v.is_finite()) {
        return Err(config_err(e.line, &e.key, "list must be non-empty and finite"));
    }
    Ok(items)
}

fn unit_interval(e: &Entry) -> Result<f64> {
    let v = parse_f64(e)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(config_err(e.line, &e.key, format!("must lie in [0, 1], got {v}")))
    }
}

fn positive(e: &Entry) -> Result<f64> {
    let v = parse_f64(e)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(config_err(e.line, &e.key, format!("must be positive, got {v}")))
    }
}

fn non_negative(e: &Entry) -> Result<f64> {
    let v = parse_f64(e)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(config_err(e.line, &e.key, format!("must be non-negative, got {v}")))
    }
}

fn at_least_one(e: &Entry) -> Result<usize> {
    let v = parse_usize(e)?;
    if v >= 1 {
        Ok(v)
    } else {
        Err(config_err(e.line, &e.key, "must be at least 1"))
    }
}

fn positive_list(e: &Entry) -> Result<Vec<f64>> {
    let v = parse_f64_list(e)?;
    if v.iter().all(|&x| x > 0.0) {
        Ok(v)
    } else {
        Err(config_err(e.line, &e.key, "all entries must be positive"))
    }
}

fn non_empty_path(e: &Entry) -> Result<PathBuf> {
    if e.value.is_empty() {
        Err(config_err(e.line, &e.key, "path must be non-empty"))
    } else {
        Ok(PathBuf::from(&e.value))
    }
}

/// Parses a config text; unspecified keys take the experiment defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let entries = tokenize(text)?;

    // The agent determines the learning-rate default, so resolve it first.
    let mut agent = AgentKind::DeepRok;
    for e in &entries {
        if e.key == "agent" {
            agent = AgentKind::parse(&e.value).ok_or_else(|| {
                config_err(
                    e.line,
                    &e.key,
                    format!("expected double_dqn, rtd_dqn or deep_rok, got `{}`", e.value),
                )
            })?;
        }
    }
    let mut cfg = RunConfig::default_for(agent);

    for e in &entries {
        match e.key.as_str() {
            "agent" => {} // already handled
            "seed" => cfg.seed = parse_u64(e)?,
            "log_timing" => cfg.log_timing = parse_bool(e)?,

            "episodes" => cfg.train.episodes = parse_usize(e)?,
            "batch_size" => cfg.train.batch_size = at_least_one(e)?,
            "gamma" => {
                let v = parse_f64(e)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(config_err(e.line, &e.key, format!("must lie in [0, 1), got {v}")));
                }
                cfg.train.gamma = v;
            }
            "epsilon_start" => cfg.train.epsilon_start = unit_interval(e)?,
            "epsilon_end" => cfg.train.epsilon_end = unit_interval(e)?,
            "epsilon_decay_episodes" => cfg.train.epsilon_decay_episodes = parse_usize(e)?,
            "epsilon_eval" => cfg.train.epsilon_eval = unit_interval(e)?,
            "target_sync_interval" => cfg.train.target_sync_interval = at_least_one(e)? as u64,
            "replay_capacity" => cfg.train.replay_capacity = at_least_one(e)?,
            "replay_min" => cfg.train.replay_min = at_least_one(e)?,
            "learning_rate" => cfg.train.learning_rate = non_negative(e)?,
            "k_candidates" => cfg.train.k_candidates = at_least_one(e)?,
            "init_scale" => cfg.train.init_scale = non_negative(e)?,

            "nominal_cart_mass" => cfg.env.nominal.cart_mass = positive(e)?,
            "nominal_pole_length" => cfg.env.nominal.pole_length = positive(e)?,
            "pole_length_min" => cfg.env.ranges.pole_length_min = positive(e)?,
            "pole_length_max" => cfg.env.ranges.pole_length_max = positive(e)?,
            "cart_mass_min" => cfg.env.ranges.cart_mass_min = positive(e)?,
            "cart_mass_max" => cfg.env.ranges.cart_mass_max = positive(e)?,
            "cross_product" => cfg.env.cross_product = parse_bool(e)?,

            "p0_scale" => cfg.ekf.p0_scale = positive(e)?,
            "pv_scale" => cfg.ekf.pv_scale = non_negative(e)?,
            "p_n" => cfg.ekf.observation_noise = positive(e)?,
            "ekf_batch_mode" => {
                cfg.ekf.batch_mode = match e.value.as_str() {
                    "averaged" => BatchMode::Averaged,
                    "sequential" => BatchMode::Sequential,
                    other => {
                        return Err(config_err(
                            e.line,
                            &e.key,
                            format!("expected averaged or sequential, got `{other}`"),
                        ))
                    }
                }
            }
            "psd_check_interval" => cfg.ekf.psd_check_interval = at_least_one(e)? as u64,

            "eval_episodes" => cfg.eval.episodes = at_least_one(e)?,
            "eval_epsilon" => cfg.eval.epsilon = unit_interval(e)?,
            "sweep_pole_lengths" => cfg.eval.pole_lengths = positive_list(e)?,
            "sweep_cart_masses" => cfg.eval.cart_masses = positive_list(e)?,

            "checkpoint_path" => cfg.paths.checkpoint = non_empty_path(e)?,
            "ekf_checkpoint_path" => cfg.paths.ekf_checkpoint = non_empty_path(e)?,
            "train_log_path" => cfg.paths.train_log = non_empty_path(e)?,
            "report_path" => cfg.paths.report = non_empty_path(e)?,

            _ => return Err(config_err(e.line, &e.key, "unknown key")),
        }
    }

    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
