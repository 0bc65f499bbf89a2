//! Training loops: the two robust agents and the Double-DQN baseline.
//!
//! All three share the same episode structure: epsilon-greedy rollout under
//! the nominal physics, replay storage of transitions together with their
//! candidate next states, one learning step per environment step once the
//! replay buffer holds enough experience, and a periodically synced target
//! network. They differ only in the target label and in how the weights
//! absorb the batch: Adam on the batch-mean ascent direction for the
//! gradient agents, a Kalman update for the filter agent.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ekf::{BatchMode, EkfState};
use crate::env::{
    candidate_next_states, reset, sample_uncertainty_set, step_dynamics, Action, CartPoleParams,
    ParamRanges, UncertaintySet, EPISODE_CAP,
};
use crate::error::{Error, Result};
use crate::nn::{argmax_lowest, AdamState, Topology, WeightVector};
use crate::rng::{derive_rng, derive_seed, TAG_INIT, TAG_TRAIN};
use crate::targets::{double_dqn_target, robust_target, td_error, DiscountFactor, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    DoubleDqn,
    RtdDqn,
    DeepRok,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::DoubleDqn, AgentKind::RtdDqn, AgentKind::DeepRok];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::DoubleDqn => "double_dqn",
            AgentKind::RtdDqn => "rtd_dqn",
            AgentKind::DeepRok => "deep_rok",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "double_dqn" => Some(AgentKind::DoubleDqn),
            "rtd_dqn" => Some(AgentKind::RtdDqn),
            "deep_rok" => Some(AgentKind::DeepRok),
            _ => None,
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    pub epsilon_eval: f64,
    /// Hard target-network copy every this many learning steps.
    pub target_sync_interval: u64,
    pub replay_capacity: usize,
    pub replay_min: usize,
    /// Adam step size for the gradient agents; scales the raw Kalman
    /// increment for the filter agent (1 leaves it untouched).
    pub learning_rate: f64,
    pub k_candidates: usize,
    pub init_scale: f64,
}

impl TrainConfig {
    /// Experiment defaults for the gradient agents.
    pub fn default_adam() -> Self {
        TrainConfig {
            episodes: 700,
            batch_size: 10,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_episodes: 100,
            epsilon_eval: 0.1,
            target_sync_interval: 100,
            replay_capacity: 10_000,
            replay_min: 100,
            learning_rate: 0.001,
            k_candidates: 5,
            init_scale: 0.05,
        }
    }

    pub fn default_for(kind: AgentKind) -> Self {
        let mut cfg = TrainConfig::default_adam();
        if kind == AgentKind::DeepRok {
            cfg.learning_rate = 1.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        DiscountFactor::new(self.gamma)?;
        let unit = |v: f64| (0.0..=1.0).contains(&v) && v.is_finite();
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1");
        }
        if self.replay_min < self.batch_size {
            problems.push("replay_min must be at least batch_size");
        }
        if self.replay_capacity < self.replay_min {
            problems.push("replay_capacity must be at least replay_min");
        }
        if !unit(self.epsilon_start) || !unit(self.epsilon_end) || !unit(self.epsilon_eval) {
            problems.push("epsilon values must lie in [0, 1]");
        }
        if self.target_sync_interval == 0 {
            problems.push("target_sync_interval must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            problems.push("learning_rate must be finite and non-negative");
        }
        if self.k_candidates == 0 {
            problems.push("k_candidates must be at least 1");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            problems.push("init_scale must be finite and non-negative");
        }
        if let Some(p) = problems.first() {
            return Err(Error::InvalidArgument {
                what: "train config",
                message: (*p).into(),
            });
        }
        Ok(())
    }
}

/// Environment settings for a run: the true physics used during training and
/// the sampling ranges for the per-episode uncertainty sets.
#[derive(Debug, Clone)]
pub struct EnvSetup {
    pub nominal: CartPoleParams,
    pub ranges: ParamRanges,
    pub cross_product: bool,
}

impl EnvSetup {
    pub fn default_experiment() -> Self {
        EnvSetup {
            nominal: CartPoleParams::nominal(),
            ranges: ParamRanges::default_experiment(),
            cross_product: false,
        }
    }
}

/// Filter settings for the Deep-RoK agent.
#[derive(Debug, Clone)]
pub struct EkfSetup {
    pub p0_scale: f64,
    pub pv_scale: f64,
    pub observation_noise: f64,
    pub batch_mode: BatchMode,
    pub psd_check_interval: u64,
}

impl EkfSetup {
    pub fn default_experiment() -> Self {
        EkfSetup {
            p0_scale: 1.0,
            pv_scale: 0.01,
            observation_noise: 0.001,
            batch_mode: BatchMode::Averaged,
            psd_check_interval: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.p0_scale > 0.0
            && self.p0_scale.is_finite()
            && self.pv_scale >= 0.0
            && self.pv_scale.is_finite()
            && self.observation_noise > 0.0
            && self.observation_noise.is_finite()
            && self.psd_check_interval >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument {
                what: "ekf config",
                message: format!("{self:?}"),
            })
        }
    }
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: std::collections::VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument {
                what: "replay capacity",
                message: "must be at least 1".into(),
            });
        }
        Ok(ReplayBuffer {
            entries: std::collections::VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest transition is evicted once the buffer is full.
    pub fn push(&mut self, transition: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(transition);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    /// Uniform sample of `batch_size` distinct transitions.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Transition>> {
        if self.entries.len() < batch_size {
            return Err(Error::BufferUnderfilled {
                len: self.entries.len(),
                need: batch_size,
            });
        }
        Ok(rand::seq::index::sample(rng, self.entries.len(), batch_size)
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect())
    }
}

/// Epsilon-greedy action: random with probability epsilon, otherwise the
/// greedy action with ties broken toward the lowest index.
pub fn select_action(
    topology: &Topology,
    weights: &WeightVector,
    state: &crate::env::CartPoleState,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument {
            what: "epsilon",
            message: format!("must lie in [0, 1], got {epsilon}"),
        });
    }
    if rng.random::<f64>() < epsilon {
        return Ok(rng.random_range(0..topology.output_dim));
    }
    let q = topology.q_values(weights, &state.features())?;
    Ok(argmax_lowest(&q))
}

/// Linear decay from epsilon_start to epsilon_end over the first
/// `epsilon_decay_episodes` episodes, then constant.
pub fn epsilon_for_episode(cfg: &TrainConfig, episode: usize) -> f64 {
    if episode >= cfg.epsilon_decay_episodes || cfg.epsilon_decay_episodes == 0 {
        cfg.epsilon_end
    } else {
        let frac = episode as f64 / cfg.epsilon_decay_episodes as f64;
        cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac
    }
}

/// Batch-mean ascent direction mean_j[ delta_j * grad Q(s_j, a_j) ], with the
/// target label chosen per agent.
fn batch_ascent_direction(
    topology: &Topology,
    weights: &WeightVector,
    batch: &[Transition],
    target_fn: impl Fn(&Transition) -> Result<f64>,
) -> Result<DVector<f64>> {
    let mut direction = DVector::zeros(topology.weight_count());
    let m = batch.len() as f64;
    for t in batch {
        let y = target_fn(t)?;
        let delta = td_error(y, topology, weights, &t.state, t.action)?;
        let grad = topology.q_gradient(weights, &t.state.features(), t.action)?;
        direction.axpy(delta / m, &grad, 1.0);
    }
    Ok(direction)
}

fn require_filled(buffer: &ReplayBuffer, cfg: &TrainConfig) -> Result<()> {
    if buffer.len() < cfg.replay_min {
        return Err(Error::BufferUnderfilled {
            len: buffer.len(),
            need: cfg.replay_min,
        });
    }
    Ok(())
}

/// One robust-target Adam step.
pub fn train_step_rtd_dqn(
    topology: &Topology,
    weights: &mut WeightVector,
    adam: &mut AdamState,
    buffer: &ReplayBuffer,
    target_weights: &WeightVector,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    require_filled(buffer, cfg)?;
    let gamma = DiscountFactor::new(cfg.gamma)?;
    let batch = buffer.sample(cfg.batch_size, rng)?;
    let direction = batch_ascent_direction(topology, weights, &batch, |t| {
        robust_target(topology, t, target_weights, gamma)
    })?;
    adam.step(weights, &direction)
}

/// One nominal Double-DQN Adam step.
pub fn train_step_double_dqn(
    topology: &Topology,
    weights: &mut WeightVector,
    adam: &mut AdamState,
    buffer: &ReplayBuffer,
    target_weights: &WeightVector,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    require_filled(buffer, cfg)?;
    let gamma = DiscountFactor::new(cfg.gamma)?;
    let batch = buffer.sample(cfg.batch_size, rng)?;
    let online = weights.clone();
    let direction = batch_ascent_direction(topology, weights, &batch, |t| {
        double_dqn_target(topology, t, &online, target_weights, gamma)
    })?;
    adam.step(weights, &direction)
}

/// One Deep-RoK step: predict, then condition on the mini-batch of robust
/// targets. In averaged mode all gradients and innovations are taken at the
/// predicted mean and applied as one update; in sequential mode each sample
/// is re-linearized at the current mean.
pub fn train_step_deep_rok(
    topology: &Topology,
    ekf: &mut EkfState,
    buffer: &ReplayBuffer,
    target_weights: &WeightVector,
    cfg: &TrainConfig,
    batch_mode: BatchMode,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    require_filled(buffer, cfg)?;
    let gamma = DiscountFactor::new(cfg.gamma)?;
    let batch = buffer.sample(cfg.batch_size, rng)?;
    ekf.predict();
    match batch_mode {
        BatchMode::Averaged => {
            let mean = ekf.mean().clone();
            let mut pairs = Vec::with_capacity(batch.len());
            for t in &batch {
                let y = robust_target(topology, t, target_weights, gamma)?;
                let delta = td_error(y, topology, &mean, &t.state, t.action)?;
                let grad = topology.q_gradient(&mean, &t.state.features(), t.action)?;
                pairs.push((grad, cfg.learning_rate * delta));
            }
            ekf.batch_update(&pairs)
        }
        BatchMode::Sequential => {
            for t in &batch {
                let mean = ekf.mean().clone();
                let y = robust_target(topology, t, target_weights, gamma)?;
                let delta = td_error(y, topology, &mean, &t.state, t.action)?;
                let grad = topology.q_gradient(&mean, &t.state.features(), t.action)?;
                ekf.batch_update(&[(grad, cfg.learning_rate * delta)])?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub cumulative_reward: f64,
    pub epsilon: f64,
    pub learning_steps: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainingLog {
    /// CSV with one row per episode. With `include_timing` false the wall_ms
    /// column is written as 0, so two runs with identical config and seed
    /// produce byte-identical logs.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::from("episode,cumulative_reward,epsilon,learning_steps,wall_ms\n");
        for r in &self.records {
            let wall = if include_timing { r.wall_ms } else { 0 };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.episode, r.cumulative_reward, r.epsilon, r.learning_steps, wall
            ));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: WeightVector,
    pub ekf: Option<EkfState>,
    pub log: TrainingLog,
}

/// Full training run; a pure function of its arguments.
///
/// Per episode the robust agents resample the uncertainty set (the baseline
/// uses the singleton nominal set), the environment itself always transitions
/// under the nominal parameters, and every stored transition carries the
/// candidate next states induced by the episode's set.
pub fn run_training(
    kind: AgentKind,
    train: &TrainConfig,
    env: &EnvSetup,
    ekf_setup: &EkfSetup,
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    env.nominal.validate()?;
    env.ranges.validate()?;
    ekf_setup.validate()?;

    let topology = Topology::cartpole_default();
    let mut rng = derive_rng(seed, TAG_TRAIN);
    let init = topology.init_weights(derive_seed(seed, TAG_INIT), train.init_scale)?;

    let mut adam = AdamState::new(topology.weight_count(), train.learning_rate);
    let mut weights = init.clone();
    let mut ekf = if kind == AgentKind::DeepRok {
        Some(EkfState::new(
            init.clone(),
            ekf_setup.p0_scale,
            ekf_setup.pv_scale,
            ekf_setup.observation_noise,
            ekf_setup.psd_check_interval,
        )?)
    } else {
        None
    };
    let current = |weights: &WeightVector, ekf: &Option<EkfState>| -> WeightVector {
        match ekf {
            Some(state) => state.mean().clone(),
            None => weights.clone(),
        }
    };
    let mut target_weights = init;
    let mut buffer = ReplayBuffer::new(train.replay_capacity)?;
    let mut learning_steps: u64 = 0;
    let mut log = TrainingLog::default();

    for episode in 0..train.episodes {
        let started = Instant::now();
        let epsilon = epsilon_for_episode(train, episode);
        let uset = match kind {
            AgentKind::DoubleDqn => UncertaintySet::singleton(env.nominal, env.ranges),
            _ => {
                sample_uncertainty_set(&mut rng, &env.ranges, train.k_candidates, env.cross_product)?
            }
        };
        let mut state = reset(&mut rng);
        let mut cumulative = 0.0;

        for _ in 0..EPISODE_CAP {
            let acting = current(&weights, &ekf);
            let action_idx = select_action(&topology, &acting, &state, epsilon, &mut rng)?;
            let action = Action::from_index(action_idx)?;
            let (next, reward, terminal) = step_dynamics(state, action, &env.nominal);
            let candidates = candidate_next_states(state, action, &uset);
            buffer.push(Transition {
                state,
                action: action_idx,
                reward,
                next_state: next,
                next_terminal: terminal,
                candidates,
            });
            cumulative += reward;

            if buffer.len() >= train.replay_min {
                match (kind, ekf.as_mut()) {
                    (AgentKind::DoubleDqn, _) => train_step_double_dqn(
                        &topology,
                        &mut weights,
                        &mut adam,
                        &buffer,
                        &target_weights,
                        train,
                        &mut rng,
                    )?,
                    (AgentKind::RtdDqn, _) => train_step_rtd_dqn(
                        &topology,
                        &mut weights,
                        &mut adam,
                        &buffer,
                        &target_weights,
                        train,
                        &mut rng,
                    )?,
                    (AgentKind::DeepRok, Some(filter)) => train_step_deep_rok(
                        &topology,
                        filter,
                        &buffer,
                        &target_weights,
                        train,
                        ekf_setup.batch_mode,
                        &mut rng,
                    )?,
                    (AgentKind::DeepRok, None) => unreachable!("ekf state exists for deep_rok"),
                }
                learning_steps += 1;
                if learning_steps % train.target_sync_interval == 0 {
                    target_weights = current(&weights, &ekf);
                }
            }

            state = next;
            if terminal {
                break;
            }
        }

        log.records.push(EpisodeRecord {
            episode,
            cumulative_reward: cumulative,
            epsilon,
            learning_steps,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }

    Ok(TrainOutcome {
        weights: current(&weights, &ekf),
        ekf,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CartPoleState;
    use nalgebra::DVector;

    fn topo() -> Topology {
        Topology::cartpole_default()
    }

    fn dummy_transition(x: f64, terminal: bool) -> Transition {
        let s = CartPoleState {
            x,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        };
        Transition {
            state: s,
            action: 0,
            reward: 0.0,
            next_state: s,
            next_terminal: terminal,
            candidates: vec![(s, terminal)],
        }
    }

    #[test]
    fn select_action_greedy_and_ties() {
        let topo = topo();
        let mut rng = derive_rng(1, 0);
        // bias-only weights: Q = (2, 5)
        let mut w = DVector::zeros(topo.weight_count());
        let out = topo.layers()[2];
        w[out.bias_offset] = 2.0;
        w[out.bias_offset + 1] = 5.0;
        let s = CartPoleState {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        };
        assert_eq!(select_action(&topo, &w, &s, 0.0, &mut rng).unwrap(), 1);
        // exact tie goes to action 0
        let zeros = DVector::zeros(topo.weight_count());
        assert_eq!(select_action(&topo, &zeros, &s, 0.0, &mut rng).unwrap(), 0);
        assert!(select_action(&topo, &w, &s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn select_action_uniform_at_epsilon_one() {
        let topo = topo();
        let w = DVector::zeros(topo.weight_count());
        let s = CartPoleState {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
        };
        let mut rng = derive_rng(2, 0);
        let n = 10_000;
        let mut count1 = 0usize;
        for _ in 0..n {
            count1 += select_action(&topo, &w, &s, 1.0, &mut rng).unwrap();
        }
        let freq = count1 as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn replay_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        buf.push(dummy_transition(1.0, false));
        buf.push(dummy_transition(2.0, false));
        buf.push(dummy_transition(3.0, false));
        assert_eq!(buf.len(), 2);
        let xs: Vec<f64> = buf.iter().map(|t| t.state.x).collect();
        assert_eq!(xs, vec![2.0, 3.0]);
    }

    #[test]
    fn replay_full_sample_is_permutation() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for i in 0..8 {
            buf.push(dummy_transition(i as f64, false));
        }
        let mut rng = derive_rng(3, 0);
        let batch = buf.sample(8, &mut rng).unwrap();
        let mut xs: Vec<f64> = batch.iter().map(|t| t.state.x).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(xs, (0..8).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn replay_sampling_is_uniform() {
        // Each element of a 100-slot buffer should appear in a 10-sample batch
        // with frequency 0.1; over 1e5 batches the count per element is
        // 10_000 +/- ~95 (one sigma), so +/-10% is a wide bound.
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..100 {
            buf.push(dummy_transition(i as f64, false));
        }
        let mut rng = derive_rng(4, 0);
        let mut counts = vec![0usize; 100];
        let batches = 100_000;
        for _ in 0..batches {
            for t in buf.sample(10, &mut rng).unwrap() {
                counts[t.state.x as usize] += 1;
            }
        }
        let expected = batches as f64 * 10.0 / 100.0;
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expected).abs() / expected;
            assert!(dev < 0.10, "element {i}: count {c}, expected {expected}");
        }
    }

    #[test]
    fn replay_underfilled_sampling_errors() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.push(dummy_transition(0.0, false));
        let mut rng = derive_rng(5, 0);
        assert!(buf.sample(2, &mut rng).is_err());
    }

    #[test]
    fn zero_td_error_batches_leave_weights_unchanged() {
        // Terminal transitions with zero reward give target 0; zero-initialized
        // weights give Q = 0, so every TD error is 0 and Adam from a fresh
        // state must not move.
        let topo = topo();
        let mut cfg = TrainConfig::default_adam();
        cfg.replay_min = 4;
        cfg.batch_size = 4;
        let mut buf = ReplayBuffer::new(16).unwrap();
        for _ in 0..8 {
            buf.push(dummy_transition(0.05, true));
        }
        let mut rng = derive_rng(6, 0);
        let mut weights = DVector::zeros(topo.weight_count());
        let target = weights.clone();
        let mut adam = AdamState::new(topo.weight_count(), cfg.learning_rate);
        train_step_rtd_dqn(&topo, &mut weights, &mut adam, &buf, &target, &cfg, &mut rng).unwrap();
        assert!(weights.iter().all(|&v| v == 0.0));

        let mut adam2 = AdamState::new(topo.weight_count(), cfg.learning_rate);
        train_step_double_dqn(&topo, &mut weights, &mut adam2, &buf, &target, &cfg, &mut rng)
            .unwrap();
        assert!(weights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deep_rok_zero_innovations_keep_mean_and_shrink_trace() {
        let topo = topo();
        let mut cfg = TrainConfig::default_for(AgentKind::DeepRok);
        cfg.replay_min = 4;
        cfg.batch_size = 4;
        let mut buf = ReplayBuffer::new(16).unwrap();
        for _ in 0..8 {
            buf.push(dummy_transition(0.05, true));
        }
        let mut rng = derive_rng(7, 0);
        let n = topo.weight_count();
        let mut ekf = EkfState::new(DVector::zeros(n), 1.0, 0.0, 0.001, u64::MAX).unwrap();
        let target = DVector::zeros(n);
        let before = ekf.trace();
        train_step_deep_rok(&topo, &mut ekf, &buf, &target, &cfg, BatchMode::Averaged, &mut rng)
            .unwrap();
        assert!(ekf.mean().iter().all(|&v| v == 0.0));
        assert!(ekf.trace() <= before);
    }

    #[test]
    fn double_dqn_equals_rtd_dqn_with_singleton_candidates_and_shared_target() {
        // online == target and singleton nominal candidates: the Double-DQN
        // target collapses to the nominal target, which equals the robust one
        // on singleton sets, so both agents take the identical Adam step.
        let topo = topo();
        let mut cfg = TrainConfig::default_adam();
        cfg.replay_min = 6;
        cfg.batch_size = 6;
        let mut buf = ReplayBuffer::new(64).unwrap();
        let mut rng = derive_rng(8, 0);
        let env = EnvSetup::default_experiment();
        let mut s = reset(&mut rng);
        for _ in 0..32 {
            let a = if rng.random::<bool>() {
                Action::Left
            } else {
                Action::Right
            };
            let (next, reward, terminal) = step_dynamics(s, a, &env.nominal);
            buf.push(Transition {
                state: s,
                action: a.index(),
                reward,
                next_state: next,
                next_terminal: terminal,
                candidates: vec![(next, terminal)],
            });
            s = if terminal { reset(&mut rng) } else { next };
        }

        let init = topo.init_weights(123, 0.05).unwrap();
        let target = init.clone();

        let mut w1 = init.clone();
        let mut adam1 = AdamState::new(topo.weight_count(), cfg.learning_rate);
        let mut rng1 = derive_rng(9, 0);
        train_step_rtd_dqn(&topo, &mut w1, &mut adam1, &buf, &target, &cfg, &mut rng1).unwrap();

        let mut w2 = init.clone();
        let mut adam2 = AdamState::new(topo.weight_count(), cfg.learning_rate);
        let mut rng2 = derive_rng(9, 0);
        train_step_double_dqn(&topo, &mut w2, &mut adam2, &buf, &target, &cfg, &mut rng2).unwrap();

        assert_eq!(w1, w2);
    }

    fn quick_config(kind: AgentKind) -> TrainConfig {
        let mut cfg = TrainConfig::default_for(kind);
        cfg.episodes = 5;
        cfg.replay_min = 20;
        cfg.replay_capacity = 500;
        cfg
    }

    #[test]
    fn five_episode_runs_are_bit_identical() {
        for kind in AgentKind::ALL {
            let cfg = quick_config(kind);
            let env = EnvSetup::default_experiment();
            let ekf = EkfSetup::default_experiment();
            let a = run_training(kind, &cfg, &env, &ekf, 42).unwrap();
            let b = run_training(kind, &cfg, &env, &ekf, 42).unwrap();
            assert_eq!(a.weights, b.weights, "{kind} weights diverged");
            assert_eq!(a.log.to_csv(false), b.log.to_csv(false));
        }
    }

    #[test]
    fn zero_episodes_returns_initial_weights_and_empty_log() {
        let mut cfg = quick_config(AgentKind::RtdDqn);
        cfg.episodes = 0;
        let env = EnvSetup::default_experiment();
        let out =
            run_training(AgentKind::RtdDqn, &cfg, &env, &EkfSetup::default_experiment(), 7).unwrap();
        let topo = topo();
        let init = topo
            .init_weights(derive_seed(7, TAG_INIT), cfg.init_scale)
            .unwrap();
        assert_eq!(out.weights, init);
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn replay_min_beyond_total_steps_never_learns() {
        let mut cfg = quick_config(AgentKind::RtdDqn);
        cfg.episodes = 3;
        cfg.replay_min = 100_000;
        cfg.replay_capacity = 100_000;
        let env = EnvSetup::default_experiment();
        let out =
            run_training(AgentKind::RtdDqn, &cfg, &env, &EkfSetup::default_experiment(), 7).unwrap();
        let topo = topo();
        let init = topo
            .init_weights(derive_seed(7, TAG_INIT), cfg.init_scale)
            .unwrap();
        assert_eq!(out.weights, init);
        assert!(out.log.records.iter().all(|r| r.learning_steps == 0));
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let cfg = TrainConfig::default_adam();
        assert_eq!(epsilon_for_episode(&cfg, 0), 1.0);
        assert!((epsilon_for_episode(&cfg, 50) - 0.55).abs() < 1e-12);
        assert_eq!(epsilon_for_episode(&cfg, 100), 0.1);
        assert_eq!(epsilon_for_episode(&cfg, 699), 0.1);
    }

    #[test]
    fn invalid_config_rejected_before_running() {
        let mut cfg = quick_config(AgentKind::RtdDqn);
        cfg.replay_min = 5;
        cfg.batch_size = 10; // replay_min < batch_size
        let env = EnvSetup::default_experiment();
        assert!(
            run_training(AgentKind::RtdDqn, &cfg, &env, &EkfSetup::default_experiment(), 1).is_err()
        );
    }
}
