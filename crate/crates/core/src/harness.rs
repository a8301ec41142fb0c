//! Config-driven experiments.
//!
//! Every entry point takes an [`ExperimentConfig`], runs the requested
//! simulations or training runs (one independent worker per policy/seed or
//! ablation arm) and writes CSV and JSON artifacts under the configured
//! output directory:
//!
//! ```text
//! <out>/comparison.{csv,json}
//! <out>/<policy>/seed-<s>/metrics.json
//! <out>/dqn/seed-<s>/{training_log.csv, metrics.json, oracle_gap.json, manifest.json}
//! <out>/dqn/seed-<s>/checkpoints/{episode-NNNNN.bin, final.bin}
//! <out>/ablation/decay-<rate>/seed-<s>/training_log.csv
//! <out>/ablation/{summary.csv, summary.json, curves.csv}
//! <out>/calibration.{csv,json}
//! <out>/plots/{training_curves.csv, per_user.csv}
//! ```
//!
//! Paths contain no timestamps, so rerunning a config overwrites its own
//! artifacts with bitwise-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dqn::{
    compare_with_oracle, evaluate_greedy, train, DqnAgent, EpisodeRecord, EpsilonSchedule, OracleGap, TrainConfig,
    TrainingLog, TrainingObserver,
};
use crate::env::{sample_channel, EnvParams};
use crate::metrics::{FairnessMode, MetricsReport};
use crate::neural::MlpNetwork;
use crate::policies::{baseline_policy, simulate_policy, waterfill_allocate, PolicyKind, WaterFillConfig};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Sum-rate the calibration sweep tries to match.
pub const WATERFILL_REFERENCE_SUM_RATE: f64 = 3.859;

/// Table runs shorter than this are too noisy to compare.
pub const MIN_TABLE_STEPS: u64 = 1_000;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Water-filling settings as written in a config file. The budget defaults
/// to the fixed baseline's aggregate power for the configured user count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaterFillSection {
    pub total_power: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for WaterFillSection {
    fn default() -> Self {
        let base = WaterFillConfig::for_users(1);
        Self {
            total_power: None,
            tolerance: base.tolerance,
            max_iterations: base.max_iterations,
        }
    }
}

impl WaterFillSection {
    pub fn resolve(&self, n_users: usize) -> WaterFillConfig {
        let mut config = WaterFillConfig::for_users(n_users);
        if let Some(p) = self.total_power {
            config.total_power = p;
        }
        config.tolerance = self.tolerance;
        config.max_iterations = self.max_iterations;
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub policies: Vec<PolicyKind>,
    /// Slots simulated per baseline policy and seed.
    pub evaluation_steps: u64,
    /// Slots used to evaluate a trained greedy policy, and fresh states
    /// used for the oracle comparison.
    pub greedy_evaluation_states: usize,
    pub seeds: Vec<u64>,
    pub output_directory: PathBuf,
    pub fairness_mode: FairnessMode,
    /// Save the online network every this many episodes; `None` keeps only
    /// the final checkpoint.
    pub checkpoint_interval: Option<usize>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            policies: PolicyKind::ALL.to_vec(),
            evaluation_steps: 1_000_000,
            greedy_evaluation_states: 10_000,
            seeds: (0..5).collect(),
            output_directory: PathBuf::from("runs"),
            fairness_mode: FairnessMode::default(),
            checkpoint_interval: Some(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvParams,
    pub train: TrainConfig,
    pub waterfill: WaterFillSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.waterfill.resolve(self.env.n_users).validate()?;
        let exp = &self.experiment;
        if exp.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = exp.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != exp.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if exp.evaluation_steps == 0 || exp.greedy_evaluation_states == 0 {
            return Err(Error::Config("evaluation lengths must be positive".into()));
        }
        if exp.checkpoint_interval == Some(0) {
            return Err(Error::Config("checkpoint_interval must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key=value`, where `key` is a dotted path such as
    /// `train.learning_rate` and `value` is JSON (bare words are taken as
    /// strings). Unknown keys are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        let updated: Self =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    fn out(&self) -> &Path {
        &self.experiment.output_directory
    }

    fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c.experiment.seeds = vec![seed];
        c
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Mean of the defined values, `None` if there are none.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| mean(&defined))
}

fn seed_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(label).join(format!("seed-{seed}"))
}

fn sub_run(policy: impl Into<String>, seed: u64) -> impl FnOnce(Error) -> Error {
    move |e| Error::SubRun {
        policy: policy.into(),
        seed,
        source: Box::new(e),
    }
}

/// Seed-averaged metrics of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: PolicyKind,
    pub throughput: f64,
    pub throughput_std: f64,
    pub fairness: Option<f64>,
    pub energy_efficiency: Option<f64>,
    pub mean_latency: f64,
    pub per_user_rate: Vec<f64>,
    pub per_user_latency: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl ComparisonRow {
    pub fn from_reports(policy: PolicyKind, seeds: &[u64], reports: &[MetricsReport]) -> Self {
        let throughputs: Vec<f64> = reports.iter().map(|r| r.throughput).collect();
        let n_users = reports.first().map_or(0, |r| r.per_user_rate.len());
        let per_user = |f: fn(&MetricsReport) -> &Vec<f64>| -> Vec<f64> {
            (0..n_users)
                .map(|u| mean(&reports.iter().map(|r| f(r)[u]).collect::<Vec<_>>()))
                .collect()
        };
        Self {
            policy,
            throughput: mean(&throughputs),
            throughput_std: variance(&throughputs).sqrt(),
            fairness: mean_defined(reports.iter().map(|r| r.fairness)),
            energy_efficiency: mean_defined(reports.iter().map(|r| r.energy_efficiency)),
            mean_latency: mean(&reports.iter().map(|r| r.mean_latency).collect::<Vec<_>>()),
            per_user_rate: per_user(|r| &r.per_user_rate),
            per_user_latency: per_user(|r| &r.per_user_latency),
            seeds: seeds.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub fairness_mode: FairnessMode,
    pub rows: Vec<ComparisonRow>,
}

pub const COMPARISON_HEADER: &str = "policy,throughput,fairness,energy_efficiency,mean_latency";

impl ComparisonTable {
    pub fn row(&self, policy: PolicyKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// Inserts or replaces the row for `row.policy`, keeping rows in
    /// policy order.
    pub fn upsert(&mut self, row: ComparisonRow) {
        self.rows.retain(|r| r.policy != row.policy);
        self.rows.push(row);
        self.rows.sort_by_key(|r| r.policy);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.policy,
                r.throughput,
                cell(r.fairness),
                cell(r.energy_efficiency),
                r.mean_latency
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_file(path)?)?)
    }

    pub fn write(&self, out: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = out.join("comparison.csv");
        let json = out.join("comparison.json");
        write_file(&csv, &self.to_csv())?;
        write_file(&json, &serde_json::to_string_pretty(self)?)?;
        Ok((csv, json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub seed: u64,
    pub log: TrainingLog,
    pub report: MetricsReport,
    pub oracle_gap: OracleGap,
    pub directory: PathBuf,
    pub training_log: PathBuf,
    pub metrics: PathBuf,
    pub oracle_gap_path: PathBuf,
    pub manifest: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub runs: Vec<TrainingRun>,
    pub table: ComparisonTable,
    pub comparison_csv: PathBuf,
    pub comparison_json: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub table: ComparisonTable,
    /// Per-seed reports, in `(policy, seed)` order.
    pub reports: Vec<(PolicyKind, u64, MetricsReport)>,
    pub training: Vec<TrainingRun>,
    pub comparison_csv: PathBuf,
    pub comparison_json: PathBuf,
}

struct CheckpointWriter {
    dir: PathBuf,
    interval: Option<usize>,
    written: Vec<PathBuf>,
}

impl TrainingObserver for CheckpointWriter {
    fn on_episode(&mut self, record: &EpisodeRecord, agent: &DqnAgent) -> Result<()> {
        if let Some(k) = self.interval {
            let done = record.episode + 1;
            if done % k == 0 {
                let path = self.dir.join(format!("episode-{done:05}.bin"));
                agent.online.save(&path)?;
                self.written.push(path);
            }
        }
        Ok(())
    }
}

/// Trains, checkpoints and evaluates one seed under `dir`.
fn train_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TrainingRun> {
    let config = config.for_seed(seed);
    let env = &config.env;
    let exp = &config.experiment;
    let mut agent = DqnAgent::new(env, config.train.clone())?;
    let checkpoint_dir = dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::io(&checkpoint_dir, e))?;
    let mut writer = CheckpointWriter {
        dir: checkpoint_dir.clone(),
        interval: exp.checkpoint_interval,
        written: Vec::new(),
    };
    let log = train(&mut agent, env, &mut writer)?;
    let final_path = checkpoint_dir.join("final.bin");
    agent.online.save(&final_path)?;
    writer.written.push(final_path);

    let report = evaluate_greedy(&agent, env, exp.greedy_evaluation_states as u64, exp.fairness_mode, seed)?;
    let oracle_gap = compare_with_oracle(&agent, env, exp.greedy_evaluation_states, &mut stream(seed, Stream::Evaluation))?;

    let training_log = dir.join("training_log.csv");
    let metrics = dir.join("metrics.json");
    let oracle_gap_path = dir.join("oracle_gap.json");
    let manifest = dir.join("manifest.json");
    write_file(&training_log, &log.to_csv())?;
    write_file(&metrics, &report.to_json()?)?;
    write_file(&oracle_gap_path, &serde_json::to_string_pretty(&oracle_gap)?)?;
    let record = RunManifest {
        code_version: CODE_VERSION.to_string(),
        seed,
        config: config.clone(),
    };
    write_file(&manifest, &serde_json::to_string_pretty(&record)?)?;
    Ok(TrainingRun {
        seed,
        log,
        report,
        oracle_gap,
        directory: dir.to_path_buf(),
        training_log,
        metrics,
        oracle_gap_path,
        manifest,
        checkpoints: writer.written,
    })
}

fn train_all(config: &ExperimentConfig) -> Result<Vec<TrainingRun>> {
    let out = config.out();
    config
        .experiment
        .seeds
        .par_iter()
        .map(|&seed| {
            train_seed(config, seed, &seed_dir(out, PolicyKind::LearnedGreedy.name(), seed))
                .map_err(sub_run(PolicyKind::LearnedGreedy.name(), seed))
        })
        .collect()
}

fn dqn_row(config: &ExperimentConfig, runs: &[TrainingRun]) -> ComparisonRow {
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    ComparisonRow::from_reports(PolicyKind::LearnedGreedy, &config.experiment.seeds, &reports)
}

/// Simulates every configured policy for every seed and writes the
/// seed-averaged comparison table. A `dqn` entry trains one agent per seed
/// first.
pub fn run_comparison(config: &ExperimentConfig) -> Result<Comparison> {
    config.validate()?;
    let exp = &config.experiment;
    if exp.evaluation_steps < MIN_TABLE_STEPS {
        return Err(Error::Config(format!(
            "table runs need at least {MIN_TABLE_STEPS} evaluation steps, got {}",
            exp.evaluation_steps
        )));
    }
    if exp.policies.is_empty() {
        return Err(Error::Config("no policies to compare".into()));
    }
    let out = config.out();
    let waterfill = config.waterfill.resolve(config.env.n_users);
    let baselines: Vec<PolicyKind> = exp.policies.iter().copied().filter(|&k| k != PolicyKind::LearnedGreedy).collect();
    let jobs: Vec<(PolicyKind, u64)> =
        baselines.iter().flat_map(|&k| exp.seeds.iter().map(move |&s| (k, s))).collect();
    let reports: Vec<(PolicyKind, u64, MetricsReport)> = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let run = || -> Result<MetricsReport> {
                let mut policy = baseline_policy(kind, &config.env, &waterfill, seed)?;
                let report = simulate_policy(policy.as_mut(), &config.env, exp.evaluation_steps, exp.fairness_mode, seed)?;
                write_file(&seed_dir(out, kind.name(), seed).join("metrics.json"), &report.to_json()?)?;
                Ok(report)
            };
            run().map(|r| (kind, seed, r)).map_err(sub_run(kind.name(), seed))
        })
        .collect::<Result<_>>()?;

    let mut table = ComparisonTable {
        fairness_mode: exp.fairness_mode,
        rows: Vec::new(),
    };
    for &kind in &baselines {
        let per_seed: Vec<MetricsReport> =
            reports.iter().filter(|(k, _, _)| *k == kind).map(|(_, _, r)| r.clone()).collect();
        table.upsert(ComparisonRow::from_reports(kind, &exp.seeds, &per_seed));
    }
    let training = if exp.policies.contains(&PolicyKind::LearnedGreedy) {
        let runs = train_all(config)?;
        table.upsert(dqn_row(config, &runs));
        runs
    } else {
        Vec::new()
    };
    let (comparison_csv, comparison_json) = table.write(out)?;
    Ok(Comparison {
        table,
        reports,
        training,
        comparison_csv,
        comparison_json,
    })
}

/// Trains one agent per seed, then adds (or replaces) the DQN row of the
/// comparison table in the output directory.
pub fn run_training(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let out = config.out();
    let runs = train_all(config)?;
    let existing = out.join("comparison.json");
    let mut table = if existing.exists() {
        ComparisonTable::load(&existing)?
    } else {
        ComparisonTable {
            fairness_mode: config.experiment.fairness_mode,
            rows: Vec::new(),
        }
    };
    table.upsert(dqn_row(config, &runs));
    let (comparison_csv, comparison_json) = table.write(out)?;
    Ok(RunArtifacts {
        runs,
        table,
        comparison_csv,
        comparison_json,
    })
}

/// Re-executes the training run recorded in `manifest` into `directory`.
pub fn replay_manifest(manifest: &Path, directory: &Path) -> Result<TrainingRun> {
    let record: RunManifest = serde_json::from_str(&read_file(manifest)?)?;
    record.config.validate()?;
    if record.code_version != CODE_VERSION {
        return Err(Error::Config(format!(
            "manifest was written by version {}, this is {CODE_VERSION}",
            record.code_version
        )));
    }
    train_seed(&record.config, record.seed, directory)
}

/// Rebuilds an agent from a saved checkpoint and the run's config.
pub fn load_agent(config: &ExperimentConfig, checkpoint: &Path) -> Result<DqnAgent> {
    DqnAgent::with_network(&config.env, config.train.clone(), MlpNetwork::load(checkpoint)?)
}

/// Summary statistics of one ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSeed {
    pub seed: u64,
    /// Mean episode reward over the last 10% of episodes.
    pub final_reward: f64,
    /// Variance of episode rewards over the whole run.
    pub reward_variance: f64,
    /// First episode that starts at the ε floor.
    pub floor_episode: Option<usize>,
    pub mean_epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub decay_rate: f64,
    pub final_reward_mean: f64,
    pub final_reward_std: f64,
    pub reward_variance_mean: f64,
    pub floor_episode: Option<usize>,
    pub mean_epsilon: f64,
    pub seeds: Vec<AblationSeed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
}

impl AblationReport {
    pub fn arm(&self, decay_rate: f64) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.decay_rate == decay_rate)
    }
}

/// Number of trailing episodes averaged for a run's final reward.
pub fn final_window(episodes: usize) -> usize {
    (episodes / 10).max(1)
}

pub fn summarize_ablation_seed(seed: u64, log: &TrainingLog, schedule: &EpsilonSchedule) -> Result<AblationSeed> {
    let rewards = log.rewards();
    if rewards.is_empty() {
        return Err(Error::Contract("training log has no episodes".into()));
    }
    let window = final_window(rewards.len());
    let epsilons: Vec<f64> = log.episodes.iter().map(|e| e.epsilon).collect();
    Ok(AblationSeed {
        seed,
        final_reward: mean(&rewards[rewards.len() - window..]),
        reward_variance: variance(&rewards),
        floor_episode: epsilons.iter().position(|&e| e <= schedule.floor()),
        mean_epsilon: mean(&epsilons),
    })
}

/// Trains one agent per (decay rate, seed) with the per-episode exponential
/// schedule and summarises each arm across seeds.
pub fn run_ablation(config: &ExperimentConfig, decay_rates: &[f64]) -> Result<AblationReport> {
    config.validate()?;
    if decay_rates.len() < 2 {
        return Err(Error::Config("an ablation needs at least two decay rates".into()));
    }
    if config.experiment.seeds.len() < 3 {
        return Err(Error::Config("an ablation needs at least three seeds per rate".into()));
    }
    for &rate in decay_rates {
        EpsilonSchedule::exponential(rate).validate()?;
    }
    let out = config.out().join("ablation");
    let seeds = &config.experiment.seeds;
    let jobs: Vec<(f64, u64)> = decay_rates.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let results: Vec<(TrainingLog, AblationSeed)> = jobs
        .par_iter()
        .map(|&(rate, seed)| {
            let label = format!("dqn(decay={rate})");
            let run = || -> Result<(TrainingLog, AblationSeed)> {
                let schedule = EpsilonSchedule::exponential(rate);
                let train_config = TrainConfig {
                    seed,
                    schedule,
                    ..config.train.clone()
                };
                let mut agent = DqnAgent::new(&config.env, train_config)?;
                let log = train(&mut agent, &config.env, &mut ())?;
                let dir = seed_dir(&out, &format!("decay-{rate}"), seed);
                write_file(&dir.join("training_log.csv"), &log.to_csv())?;
                let summary = summarize_ablation_seed(seed, &log, &schedule)?;
                Ok((log, summary))
            };
            run().map_err(sub_run(label, seed))
        })
        .collect::<Result<_>>()?;

    let mut curves = String::from("decay_rate,seed,episode,cumulative_reward,epsilon\n");
    let mut arms = Vec::with_capacity(decay_rates.len());
    for (i, &rate) in decay_rates.iter().enumerate() {
        let arm = &results[i * seeds.len()..(i + 1) * seeds.len()];
        for (log, s) in arm {
            for e in &log.episodes {
                let _ = writeln!(curves, "{rate},{},{},{},{}", s.seed, e.episode, e.cumulative_reward, e.epsilon);
            }
        }
        let finals: Vec<f64> = arm.iter().map(|(_, s)| s.final_reward).collect();
        arms.push(AblationArm {
            decay_rate: rate,
            final_reward_mean: mean(&finals),
            final_reward_std: variance(&finals).sqrt(),
            reward_variance_mean: mean(&arm.iter().map(|(_, s)| s.reward_variance).collect::<Vec<_>>()),
            floor_episode: arm.iter().map(|(_, s)| s.floor_episode).max().flatten(),
            mean_epsilon: mean(&arm.iter().map(|(_, s)| s.mean_epsilon).collect::<Vec<_>>()),
            seeds: arm.iter().map(|(_, s)| s.clone()).collect(),
        });
    }
    let report = AblationReport { arms };

    let mut summary =
        String::from("decay_rate,final_reward_mean,final_reward_std,reward_variance_mean,floor_episode,mean_epsilon\n");
    for a in &report.arms {
        let floor = a.floor_episode.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            a.decay_rate, a.final_reward_mean, a.final_reward_std, a.reward_variance_mean, floor, a.mean_epsilon
        );
    }
    write_file(&out.join("curves.csv"), &curves)?;
    write_file(&out.join("summary.csv"), &summary)?;
    write_file(&out.join("summary.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub total_power: f64,
    pub sum_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub reference_sum_rate: f64,
    /// Sorted by increasing budget.
    pub points: Vec<CalibrationPoint>,
    pub closest_budget: f64,
}

impl CalibrationReport {
    pub fn strictly_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].sum_rate > w[0].sum_rate)
    }
}

/// Mean continuous water-filling sum-rate per budget. All budgets see the
/// same channel draws (the first seed's evaluation stream).
pub fn calibrate_waterfill(config: &ExperimentConfig, budgets: &[f64]) -> Result<CalibrationReport> {
    config.validate()?;
    if budgets.len() < 2 {
        return Err(Error::Config("calibration needs at least two budgets".into()));
    }
    if budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::Config("budgets must be finite and non-negative".into()));
    }
    let mut sorted = budgets.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let env = &config.env;
    let draws = config.experiment.evaluation_steps;
    let seed = config.experiment.seeds[0];
    let base = config.waterfill.resolve(env.n_users);
    let points: Vec<CalibrationPoint> = sorted
        .par_iter()
        .map(|&budget| {
            if budget == 0.0 {
                return Ok(CalibrationPoint {
                    total_power: 0.0,
                    sum_rate: 0.0,
                });
            }
            let wf = WaterFillConfig {
                total_power: budget,
                ..base.clone()
            };
            let mut rng = stream(seed, Stream::Evaluation);
            let mut total = 0.0;
            for _ in 0..draws {
                let state = sample_channel(env, &mut rng)?;
                let solution = waterfill_allocate(&state, env.noise_power, &wf)?;
                total += solution
                    .powers
                    .iter()
                    .zip(&state.gains)
                    .map(|(&p, &h)| (1.0 + p * h / env.noise_power).log2())
                    .sum::<f64>();
            }
            Ok(CalibrationPoint {
                total_power: budget,
                sum_rate: total / draws as f64,
            })
        })
        .collect::<Result<_>>()?;
    let closest_budget = points
        .iter()
        .min_by(|a, b| {
            (a.sum_rate - WATERFILL_REFERENCE_SUM_RATE)
                .abs()
                .total_cmp(&(b.sum_rate - WATERFILL_REFERENCE_SUM_RATE).abs())
        })
        .map(|p| p.total_power)
        .unwrap_or(f64::NAN);
    let report = CalibrationReport {
        reference_sum_rate: WATERFILL_REFERENCE_SUM_RATE,
        points,
        closest_budget,
    };
    let out = config.out();
    let mut csv = String::from("total_power,sum_rate\n");
    for p in &report.points {
        let _ = writeln!(csv, "{},{}", p.total_power, p.sum_rate);
    }
    write_file(&out.join("calibration.csv"), &csv)?;
    write_file(&out.join("calibration.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub training_curves: Option<PathBuf>,
    pub per_user: PathBuf,
}

pub const TRAINING_CURVES_HEADER: &str =
    "episode,seeds,cumulative_reward_mean,cumulative_reward_std,epsilon_mean,mean_loss_mean,sum_rate_mean,fairness_mean";
pub const PER_USER_HEADER: &str = "policy,user,rate,latency";

/// Seeds with a training log under `<out>/dqn`, in increasing order.
fn trained_seeds(out: &Path) -> Result<Vec<u64>> {
    let dir = out.join(PolicyKind::LearnedGreedy.name());
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut seeds = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name();
        if let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("seed-")).and_then(|s| s.parse().ok()) {
            if entry.path().join("training_log.csv").exists() {
                seeds.push(seed);
            }
        }
    }
    seeds.sort_unstable();
    Ok(seeds)
}

/// Writes plot-ready CSVs from the artifacts in `out`: seed-averaged
/// training curves (one row per episode, only when training logs exist)
/// and per-user rates and latencies (one row per user and policy).
pub fn emit_plot_data(out: &Path) -> Result<PlotFiles> {
    let table = ComparisonTable::load(&out.join("comparison.json"))?;
    let plots = out.join("plots");

    let mut per_user = format!("{PER_USER_HEADER}\n");
    for r in &table.rows {
        for (u, (rate, latency)) in r.per_user_rate.iter().zip(&r.per_user_latency).enumerate() {
            let _ = writeln!(per_user, "{},{u},{rate},{latency}", r.policy);
        }
    }
    let per_user_path = plots.join("per_user.csv");
    write_file(&per_user_path, &per_user)?;

    let seeds = trained_seeds(out)?;
    let training_curves = if seeds.is_empty() {
        None
    } else {
        let logs = seeds
            .iter()
            .map(|&s| {
                let path = seed_dir(out, PolicyKind::LearnedGreedy.name(), s).join("training_log.csv");
                TrainingLog::parse_csv(&read_file(&path)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let episodes = logs.iter().map(Vec::len).min().unwrap_or(0);
        let mut csv = format!("{TRAINING_CURVES_HEADER}\n");
        for e in 0..episodes {
            let rows: Vec<&EpisodeRecord> = logs.iter().map(|l| &l[e]).collect();
            let rewards: Vec<f64> = rows.iter().map(|r| r.cumulative_reward).collect();
            let _ = writeln!(
                csv,
                "{e},{},{},{},{},{},{},{}",
                rows.len(),
                mean(&rewards),
                variance(&rewards).sqrt(),
                mean(&rows.iter().map(|r| r.epsilon).collect::<Vec<_>>()),
                cell(mean_defined(rows.iter().map(|r| r.mean_loss))),
                mean(&rows.iter().map(|r| r.sum_rate).collect::<Vec<_>>()),
                cell(mean_defined(rows.iter().map(|r| r.fairness))),
            );
        }
        let path = plots.join("training_curves.csv");
        write_file(&path, &csv)?;
        Some(path)
    };
    Ok(PlotFiles {
        training_curves,
        per_user: per_user_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(c.experiment.seeds.len(), 5);
        assert_eq!(c.waterfill.resolve(3).total_power, 6.0);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"env": {"n_users": 2}, "waterfill": {"total_power": 9.0}}"#).unwrap();
        assert_eq!(c.env.n_users, 2);
        assert_eq!(c.env.lambda_penalty, 0.1);
        assert_eq!(c.waterfill.resolve(2).total_power, 9.0);
        let d = ExperimentConfig::from_json(r#"{"env": {"n_users": 2}}"#).unwrap();
        assert_eq!(d.waterfill.resolve(d.env.n_users).total_power, 4.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"env": {"users": 3}}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"experiment": {"seed": 1}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"experiment": {"seeds": []}}"#,
            r#"{"experiment": {"seeds": [1, 1]}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"waterfill": {"total_power": -1.0}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut c = ExperimentConfig::default();
        c.apply_override("train.learning_rate=0.0001").unwrap();
        c.apply_override("experiment.seeds=[7,8,9]").unwrap();
        c.apply_override("experiment.policies=[\"fixed\",\"random\"]").unwrap();
        c.apply_override("experiment.output_directory=/tmp/somewhere").unwrap();
        c.apply_override("env.power_levels.3=4.0").unwrap();
        c.apply_override("waterfill.total_power=7.5").unwrap();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.experiment.seeds, vec![7, 8, 9]);
        assert_eq!(c.experiment.policies, vec![PolicyKind::Fixed, PolicyKind::Random]);
        assert_eq!(c.experiment.output_directory, PathBuf::from("/tmp/somewhere"));
        assert_eq!(c.env.power_levels[3], 4.0);
        assert_eq!(c.waterfill.total_power, Some(7.5));
    }

    #[test]
    fn bad_overrides_leave_config_untouched() {
        let mut c = ExperimentConfig::default();
        for bad in ["train.lr=1", "nokey", "train.batch_size=0", "experiment.seeds=\"x\""] {
            assert!(c.apply_override(bad).is_err(), "{bad}");
        }
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn table_upsert_replaces_and_orders() {
        let report = MetricsReport {
            throughput: 1.0,
            fairness: Some(0.5),
            energy_efficiency: None,
            mean_latency: 0.0,
            per_user_rate: vec![0.5, 0.5],
            per_user_latency: vec![0.0, 0.0],
            per_user_queue_rate_ratio: vec![None, None],
            fairness_mode: FairnessMode::PerStepAveraged,
            steps: 1,
        };
        let mut t = ComparisonTable {
            fairness_mode: FairnessMode::PerStepAveraged,
            rows: Vec::new(),
        };
        t.upsert(ComparisonRow::from_reports(PolicyKind::Random, &[0], &[report.clone()]));
        t.upsert(ComparisonRow::from_reports(PolicyKind::Fixed, &[0], &[report.clone()]));
        let mut second = report.clone();
        second.throughput = 3.0;
        t.upsert(ComparisonRow::from_reports(PolicyKind::Fixed, &[0, 1], &[report, second]));
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].policy, PolicyKind::Fixed);
        assert_eq!(t.rows[0].throughput, 2.0);
        assert_eq!(t.rows[0].throughput_std, 1.0);
        let csv = t.to_csv();
        assert_eq!(csv.lines().next(), Some(COMPARISON_HEADER));
        assert_eq!(csv.lines().nth(1), Some("fixed,2,0.5,,0"));
    }

    #[test]
    fn ablation_summary_statistics() {
        let record = |episode: usize, reward: f64, epsilon: f64| EpisodeRecord {
            episode,
            cumulative_reward: reward,
            mean_loss: None,
            epsilon,
            sum_rate: 0.0,
            fairness: None,
            energy_efficiency: None,
            mean_latency: 0.0,
        };
        let eps = [1.0, 0.5, 0.25, 0.1, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05];
        let log = TrainingLog {
            episodes: (0..10).map(|e| record(e, e as f64, eps[e])).collect(),
            ..TrainingLog::default()
        };
        let s = summarize_ablation_seed(3, &log, &EpsilonSchedule::exponential(0.5)).unwrap();
        assert_eq!(s.final_reward, 9.0);
        assert_eq!(s.reward_variance, 8.25);
        assert_eq!(s.floor_episode, Some(4));
        assert!((s.mean_epsilon - 0.215).abs() < 1e-12);
    }
}
