//! Deep Q-learning over the joint discrete power space.
//!
//! The agent observes raw channel gains and scores all `M^N` joint actions
//! with one forward pass. Training follows the usual recipe: ε-greedy
//! behaviour, a FIFO replay buffer sampled uniformly, one-step TD targets
//! from a hard-synced target network and Adam on the MSE of the taken
//! action's Q-value. The environment never terminates, so targets are not
//! masked; episodes only group steps for logging and per-episode decay.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    compute_rate, compute_reward, compute_snr, sample_channel, ActionVector, ChannelState, EnvParams, WirelessEnv,
};
use crate::metrics::{FairnessMode, MetricsAccumulator, MetricsReport};
use crate::neural::{AdamState, MlpNetwork};
use crate::policies::{myopic_oracle, simulate_policy, PolicyKind, PowerPolicy};
use crate::rng::{stream, SimRng, Stream};
use crate::{Error, Result};

/// Base-`num_levels` word with user 0 as the least significant digit.
pub fn encode_action(action: &ActionVector, num_levels: usize) -> Result<usize> {
    let mut index = 0usize;
    for &level in action.levels.iter().rev() {
        if level >= num_levels {
            return Err(Error::Contract(format!(
                "power level {level} out of range for {num_levels} levels"
            )));
        }
        index = index * num_levels + level;
    }
    Ok(index)
}

pub fn decode_action(index: usize, n_users: usize, num_levels: usize) -> Result<ActionVector> {
    let size = num_levels.pow(n_users as u32);
    if index >= size {
        return Err(Error::Contract(format!("joint action {index} out of range for {size} actions")));
    }
    let mut rest = index;
    let levels = (0..n_users)
        .map(|_| {
            let l = rest % num_levels;
            rest /= num_levels;
            l
        })
        .collect();
    Ok(ActionVector::new(levels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonSchedule {
    /// Per step: from `start` down to `end` over `horizon_steps`, then flat.
    Linear { start: f64, end: f64, horizon_steps: u64 },
    /// Per episode: `max(floor, start * decay_rate^episode)`.
    Exponential { start: f64, floor: f64, decay_rate: f64 },
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule::Linear {
            start: 1.0,
            end: 0.05,
            horizon_steps: 20_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn exponential(decay_rate: f64) -> Self {
        EpsilonSchedule::Exponential {
            start: 1.0,
            floor: 0.05,
            decay_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (start, low) = match *self {
            EpsilonSchedule::Linear { start, end, .. } => (start, end),
            EpsilonSchedule::Exponential { start, floor, decay_rate } => {
                if !(decay_rate > 0.0 && decay_rate < 1.0) {
                    return Err(Error::Config(format!("decay_rate must lie in (0, 1), got {decay_rate}")));
                }
                (start, floor)
            }
        };
        if !(low >= 0.0 && start >= low && start <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon schedule needs 1 >= start >= floor >= 0, got start {start}, floor {low}"
            )));
        }
        Ok(())
    }

    /// The value ε settles at.
    pub fn floor(&self) -> f64 {
        match *self {
            EpsilonSchedule::Linear { end, .. } => end,
            EpsilonSchedule::Exponential { floor, .. } => floor,
        }
    }

    /// ε at global step `step` within episode `episode`.
    pub fn value(&self, step: u64, episode: usize) -> f64 {
        match *self {
            EpsilonSchedule::Linear { start, end, horizon_steps } => {
                if horizon_steps == 0 || step >= horizon_steps {
                    end
                } else {
                    start + (end - start) * (step as f64 / horizon_steps as f64)
                }
            }
            EpsilonSchedule::Exponential { start, floor, decay_rate } => {
                floor.max(start * decay_rate.powi(episode.min(i32::MAX as usize) as i32))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: ChannelState,
    pub action_index: usize,
    pub reward: f64,
    pub next_state: ChannelState,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    write_cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            write_cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, transition: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(transition);
        } else {
            self.storage[self.write_cursor] = transition;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity { 0 } else { self.write_cursor };
        self.storage[split..].iter().chain(&self.storage[..split])
    }

    /// Uniform draw with replacement; `None` while fewer than `batch_size`
    /// transitions are stored.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if batch_size == 0 || self.storage.len() < batch_size {
            return None;
        }
        let n = self.storage.len();
        Some((0..batch_size).map(|_| &self.storage[rng.gen_range(0..n)]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub episode_length: usize,
    pub batch_size: usize,
    pub target_sync_period: u64,
    pub learning_rate: f64,
    /// Extra steps to wait before learning; learning never starts before
    /// the buffer holds one full batch.
    pub warmup_steps: u64,
    pub replay_capacity: usize,
    pub hidden_layers: Vec<usize>,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub schedule: EpsilonSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            episode_length: 200,
            batch_size: 32,
            target_sync_period: 100,
            learning_rate: 1e-3,
            warmup_steps: 0,
            replay_capacity: 10_000,
            hidden_layers: vec![64, 128],
            max_grad_norm: None,
            seed: 0,
            schedule: EpsilonSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.episode_length == 0 || self.target_sync_period == 0 {
            return Err(Error::Config("total_steps, episode_length and target_sync_period must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size, self.replay_capacity
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("max_grad_norm must be positive".into()));
            }
        }
        self.schedule.validate()
    }

    pub fn episodes(&self) -> usize {
        self.total_steps.div_ceil(self.episode_length as u64) as usize
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub online: MlpNetwork,
    pub target: MlpNetwork,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step_counter: u64,
    n_users: usize,
    num_levels: usize,
    gamma: f64,
}

impl DqnAgent {
    /// Fresh agent with `[N, hidden.., M^N]` layers, initialised from the
    /// seed's init stream.
    pub fn new(env: &EnvParams, config: TrainConfig) -> Result<Self> {
        env.validate()?;
        config.validate()?;
        let mut dims = vec![env.n_users];
        dims.extend_from_slice(&config.hidden_layers);
        dims.push(env.num_joint_actions());
        let online = MlpNetwork::init(&dims, &mut stream(config.seed, Stream::Init))?;
        Self::with_network(env, config, online)
    }

    pub fn with_network(env: &EnvParams, config: TrainConfig, online: MlpNetwork) -> Result<Self> {
        if online.input_dim() != env.n_users || online.output_dim() != env.num_joint_actions() {
            return Err(Error::Config(format!(
                "network dims {:?} do not fit {} users with {} joint actions",
                online.layer_dims(),
                env.n_users,
                env.num_joint_actions()
            )));
        }
        Ok(Self {
            target: online.copy_parameters(),
            optimizer: AdamState::new(&online),
            online,
            config,
            step_counter: 0,
            n_users: env.n_users,
            num_levels: env.num_levels(),
            gamma: env.gamma,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.online.output_dim()
    }

    pub fn q_values(&self, state: &ChannelState) -> Result<Vec<f64>> {
        self.online.forward(&state.gains)
    }

    pub fn greedy_action(&self, state: &ChannelState) -> Result<usize> {
        Ok(argmax(&self.q_values(state)?))
    }

    pub fn decode(&self, index: usize) -> Result<ActionVector> {
        decode_action(index, self.n_users, self.num_levels)
    }

    /// ε-greedy choice; argmax ties go to the lowest index.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &ChannelState, epsilon: f64, rng: &mut R) -> Result<usize> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Contract(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            return Ok(rng.gen_range(0..self.num_actions()));
        }
        self.greedy_action(state)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.copy_parameters();
    }

    /// One gradient step on the given batch; returns its loss.
    pub fn learn_on_batch(&mut self, batch: &[&Transition]) -> Result<f64> {
        let targets = td_targets(batch, &self.target, self.gamma)?;
        let inputs: Vec<f64> = batch.iter().flat_map(|t| t.state.gains.iter().copied()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action_index).collect();
        let trace = self.online.forward_trace(&inputs, batch.len())?;
        let (loss, output_grad) = masked_td_loss(trace.output(), self.num_actions(), &actions, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("TD loss ({loss})")));
        }
        let mut grads = self.online.backward_trace(&trace, &output_grad)?;
        if let Some(max_norm) = self.config.max_grad_norm {
            grads.clip_to_norm(max_norm);
        }
        self.optimizer
            .step(&mut self.online, &grads, self.config.learning_rate)?;
        Ok(loss)
    }

    /// Samples a batch and learns from it; `None` when the buffer is not ready.
    pub fn learn_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<Option<f64>> {
        match buffer.sample_batch(self.config.batch_size, rng) {
            Some(batch) => self.learn_on_batch(&batch).map(Some),
            None => Ok(None),
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `y = r + γ max_a' Q_target(s', a')` per transition.
pub fn td_targets(batch: &[&Transition], target_net: &MlpNetwork, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<f64> = batch.iter().flat_map(|t| t.next_state.gains.iter().copied()).collect();
    let trace = target_net.forward_trace(&inputs, batch.len())?;
    let out_dim = target_net.output_dim();
    Ok(batch
        .iter()
        .zip(trace.output().chunks_exact(out_dim))
        .map(|(t, q)| {
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            t.reward + gamma * best
        })
        .collect())
}

/// MSE between the taken actions' Q-values and their targets, with the
/// gradient w.r.t. every network output (zero for actions not taken).
pub fn masked_td_loss(q_values: &[f64], num_actions: usize, actions: &[usize], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let batch = actions.len();
    if targets.len() != batch || q_values.len() != batch * num_actions || batch == 0 {
        return Err(Error::Contract(format!(
            "TD loss shapes: {} Q-values, {} actions, {} targets, {num_actions} outputs",
            q_values.len(),
            batch,
            targets.len()
        )));
    }
    let mut grad = vec![0.0; q_values.len()];
    let mut loss = 0.0;
    for (b, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        if a >= num_actions {
            return Err(Error::Contract(format!("action {a} out of range")));
        }
        let diff = q_values[b * num_actions + a] - y;
        loss += diff * diff;
        grad[b * num_actions + a] = 2.0 * diff / batch as f64;
    }
    Ok((loss / batch as f64, grad))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub cumulative_reward: f64,
    /// Mean TD loss over the episode's learn steps; `None` before learning starts.
    pub mean_loss: Option<f64>,
    /// ε at the first step of the episode.
    pub epsilon: f64,
    pub sum_rate: f64,
    pub fairness: Option<f64>,
    pub energy_efficiency: Option<f64>,
    pub mean_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    /// Global step counts at which the target network was refreshed.
    pub sync_steps: Vec<u64>,
    pub learn_steps: u64,
    pub total_steps: u64,
}

pub const TRAINING_LOG_HEADER: &str =
    "episode,cumulative_reward,mean_loss,epsilon,sum_rate,fairness,energy_efficiency,mean_latency";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_f64(cell).map(Some)
    }
}

fn parse_f64(cell: &str) -> Result<f64> {
    cell.parse()
        .map_err(|_| Error::Config(format!("bad number `{cell}` in training log")))
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAINING_LOG_HEADER);
        out.push('\n');
        for r in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.episode,
                r.cumulative_reward,
                opt_cell(r.mean_loss),
                r.epsilon,
                r.sum_rate,
                opt_cell(r.fairness),
                opt_cell(r.energy_efficiency),
                r.mean_latency
            );
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Vec<EpisodeRecord>> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAINING_LOG_HEADER) {
            return Err(Error::Config("training log has an unexpected header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let cells: Vec<&str> = line.split(',').collect();
                if cells.len() != 8 {
                    return Err(Error::Config(format!("training log row has {} cells", cells.len())));
                }
                Ok(EpisodeRecord {
                    episode: cells[0]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad episode `{}`", cells[0])))?,
                    cumulative_reward: parse_f64(cells[1])?,
                    mean_loss: parse_opt(cells[2])?,
                    epsilon: parse_f64(cells[3])?,
                    sum_rate: parse_f64(cells[4])?,
                    fairness: parse_opt(cells[5])?,
                    energy_efficiency: parse_opt(cells[6])?,
                    mean_latency: parse_f64(cells[7])?,
                })
            })
            .collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.cumulative_reward).collect()
    }

    /// True when every logged number is finite.
    pub fn all_finite(&self) -> bool {
        self.episodes.iter().all(|r| {
            [r.cumulative_reward, r.epsilon, r.sum_rate, r.mean_latency]
                .into_iter()
                .chain(r.mean_loss)
                .chain(r.fairness)
                .chain(r.energy_efficiency)
                .all(f64::is_finite)
        })
    }
}

/// Hooks called from inside [`train`].
pub trait TrainingObserver {
    fn on_episode(&mut self, _record: &EpisodeRecord, _agent: &DqnAgent) -> Result<()> {
        Ok(())
    }

    fn on_target_sync(&mut self, _step: u64) {}
}

impl TrainingObserver for () {}

fn at_episode(episode: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Training {
            episode,
            detail: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Runs the full training loop. Deterministic in `(env, agent.config)`.
pub fn train(agent: &mut DqnAgent, env_params: &EnvParams, observer: &mut dyn TrainingObserver) -> Result<TrainingLog> {
    let config = agent.config.clone();
    config.validate()?;
    let seed = config.seed;
    let mut env = WirelessEnv::new(
        env_params.clone(),
        stream(seed, Stream::Channel),
        stream(seed, Stream::Arrivals),
    )?;
    let mut explore_rng = stream(seed, Stream::Exploration);
    let mut replay_rng = stream(seed, Stream::Replay);
    let mut buffer = ReplayBuffer::new(config.replay_capacity)?;
    let learn_after = config.warmup_steps.max(config.batch_size as u64);

    let mut log = TrainingLog::default();
    let mut step = agent.step_counter;
    let end = step + config.total_steps;
    let mut episode = 0;
    while step < end {
        let len = (end - step).min(config.episode_length as u64);
        let epsilon = config.schedule.value(step, episode);
        let mut metrics = MetricsAccumulator::new(env_params.n_users);
        let mut cumulative_reward = 0.0;
        let (mut loss_sum, mut loss_count) = (0.0, 0u64);
        let wrap = at_episode(episode);

        for _ in 0..len {
            let eps = config.schedule.value(step, episode);
            let state = env.state().clone();
            let action_index = agent.select_action(&state, eps, &mut explore_rng)?;
            let outcome = env.step(&agent.decode(action_index)?)?;
            metrics.push(&outcome.rates, &outcome.powers_used, &outcome.next_queues.backlogs)?;
            cumulative_reward += outcome.reward;
            buffer.push(Transition {
                state,
                action_index,
                reward: outcome.reward,
                next_state: outcome.next_state,
            });
            step += 1;
            agent.step_counter = step;

            if buffer.len() as u64 >= learn_after {
                if let Some(loss) = agent.learn_step(&buffer, &mut replay_rng).map_err(&wrap)? {
                    loss_sum += loss;
                    loss_count += 1;
                    log.learn_steps += 1;
                }
            }
            if step % config.target_sync_period == 0 {
                agent.sync_target();
                log.sync_steps.push(step);
                observer.on_target_sync(step);
            }
        }

        let report = metrics.report(FairnessMode::PerStepAveraged).map_err(&wrap)?;
        let record = EpisodeRecord {
            episode,
            cumulative_reward,
            mean_loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
            epsilon,
            sum_rate: report.throughput,
            fairness: report.fairness,
            energy_efficiency: report.energy_efficiency,
            mean_latency: report.mean_latency,
        };
        if !cumulative_reward.is_finite() || record.mean_loss.is_some_and(|l| !l.is_finite()) {
            return Err(Error::Training {
                episode,
                detail: "non-finite reward or loss".into(),
            });
        }
        observer.on_episode(&record, agent)?;
        log.episodes.push(record);
        episode += 1;
    }
    log.total_steps = step;
    Ok(log)
}

/// Greedy (ε = 0) view of an agent, usable wherever a policy is expected.
pub struct GreedyPolicy<'a> {
    agent: &'a DqnAgent,
    params: &'a EnvParams,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(agent: &'a DqnAgent, params: &'a EnvParams) -> Self {
        Self { agent, params }
    }
}

impl PowerPolicy for GreedyPolicy<'_> {
    fn kind(&self) -> PolicyKind {
        PolicyKind::LearnedGreedy
    }

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>> {
        let action = self.agent.decode(self.agent.greedy_action(state)?)?;
        self.params.powers_of(&action)
    }
}

/// Runs the greedy policy for `steps` slots on the seed's evaluation streams.
/// The agent is only read.
pub fn evaluate_greedy(
    agent: &DqnAgent,
    env_params: &EnvParams,
    steps: u64,
    mode: FairnessMode,
    seed: u64,
) -> Result<MetricsReport> {
    let mut policy = GreedyPolicy::new(agent, env_params);
    simulate_policy(&mut policy, env_params, steps, mode, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    pub states: usize,
    pub greedy_mean_reward: f64,
    pub oracle_mean_reward: f64,
    /// `(oracle - greedy) / |oracle|`.
    pub relative_gap: f64,
    pub action_match_fraction: f64,
}

fn one_step_reward(state: &ChannelState, action: &ActionVector, params: &EnvParams) -> Result<f64> {
    let powers = params.powers_of(action)?;
    let rates = powers
        .iter()
        .zip(&state.gains)
        .map(|(&p, &h)| compute_rate(compute_snr(p, h, params.noise_power)?))
        .collect::<Result<Vec<_>>>()?;
    compute_reward(&rates, &powers, params.lambda_penalty)
}

/// Compares greedy and myopic-oracle decisions on fresh channel draws.
pub fn compare_with_oracle(agent: &DqnAgent, params: &EnvParams, states: usize, rng: &mut SimRng) -> Result<OracleGap> {
    if states == 0 {
        return Err(Error::Contract("oracle comparison needs at least one state".into()));
    }
    let (mut greedy_total, mut oracle_total, mut matches) = (0.0, 0.0, 0usize);
    for _ in 0..states {
        let state = sample_channel(params, rng)?;
        let greedy = agent.decode(agent.greedy_action(&state)?)?;
        let oracle = myopic_oracle(&state, params);
        greedy_total += one_step_reward(&state, &greedy, params)?;
        oracle_total += one_step_reward(&state, &oracle, params)?;
        matches += usize::from(greedy == oracle);
    }
    let n = states as f64;
    let (greedy_mean, oracle_mean) = (greedy_total / n, oracle_total / n);
    Ok(OracleGap {
        states,
        greedy_mean_reward: greedy_mean,
        oracle_mean_reward: oracle_mean,
        relative_gap: (oracle_mean - greedy_mean) / oracle_mean.abs(),
        action_match_fraction: matches as f64 / n,
    })
}
