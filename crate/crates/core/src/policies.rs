//! Baseline allocation strategies and the myopic oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{compute_rate, compute_snr, ActionVector, ChannelState, EnvParams, WirelessEnv};
use crate::metrics::{FairnessMode, MetricsAccumulator, MetricsReport};
use crate::rng::{stream, SimRng, Stream};
use crate::{Error, Result};

/// Power assigned to every user by the fixed baseline.
pub const FIXED_POWER_WATTS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "fixed")]
    Fixed,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "waterfilling")]
    WaterFilling,
    #[serde(rename = "oracle")]
    MyopicOracle,
    #[serde(rename = "dqn")]
    LearnedGreedy,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Fixed,
        PolicyKind::Random,
        PolicyKind::WaterFilling,
        PolicyKind::MyopicOracle,
        PolicyKind::LearnedGreedy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Fixed => "fixed",
            PolicyKind::Random => "random",
            PolicyKind::WaterFilling => "waterfilling",
            PolicyKind::MyopicOracle => "oracle",
            PolicyKind::LearnedGreedy => "dqn",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterFillConfig {
    /// Budget on the sum of user powers, in Watts.
    pub total_power: f64,
    /// Bisection stops once `|sum(p) - total_power|` is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl WaterFillConfig {
    /// Energy-matched default: the same aggregate power as the fixed baseline.
    pub fn for_users(n_users: usize) -> Self {
        Self {
            total_power: FIXED_POWER_WATTS * n_users as f64,
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_power > 0.0 && self.total_power.is_finite()) {
            return Err(Error::Config("water-filling total_power must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("water-filling tolerance must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("water-filling max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Index of the level closest to `watts`; ties go to the lower level.
pub fn nearest_level(levels: &[f64], watts: f64) -> usize {
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate() {
        if (l - watts).abs() < (levels[best] - watts).abs() {
            best = i;
        }
    }
    best
}

pub fn fixed_policy(state: &ChannelState, params: &EnvParams) -> ActionVector {
    let level = nearest_level(&params.power_levels, FIXED_POWER_WATTS);
    ActionVector::new(vec![level; state.n_users()])
}

pub fn random_policy<R: Rng + ?Sized>(state: &ChannelState, params: &EnvParams, rng: &mut R) -> ActionVector {
    let m = params.num_levels();
    ActionVector::new((0..state.n_users()).map(|_| rng.gen_range(0..m)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterFillSolution {
    pub powers: Vec<f64>,
    /// The water level μ.
    pub water_level: f64,
    pub iterations: usize,
    /// `sum(powers) - total_power` at the returned level.
    pub residual: f64,
}

fn allocation_at(level: f64, floors: &[f64]) -> impl Iterator<Item = f64> + '_ {
    floors.iter().map(move |&f| (level - f).max(0.0))
}

/// Continuous water-filling `p_i = max(μ - σ²/h_i, 0)` with μ found by bisection.
pub fn waterfill_allocate(state: &ChannelState, noise_power: f64, config: &WaterFillConfig) -> Result<WaterFillSolution> {
    config.validate()?;
    if !(noise_power > 0.0) {
        return Err(Error::Config("noise power must be positive".into()));
    }
    if state.gains.is_empty() {
        return Err(Error::Contract("water-filling needs at least one user".into()));
    }
    if let Some(&g) = state.gains.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::Domain(format!("water-filling requires positive gains, got {g}")));
    }
    let floors: Vec<f64> = state.gains.iter().map(|&h| noise_power / h).collect();
    let lowest = floors.iter().copied().fold(f64::INFINITY, f64::min);
    let highest = floors.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // Σp(μ) is continuous and non-decreasing; the bracket below straddles the budget.
    let mut lo = lowest;
    let mut hi = highest + config.total_power;
    let residual_at = |mu: f64| allocation_at(mu, &floors).sum::<f64>() - config.total_power;

    let mut mu = 0.5 * (lo + hi);
    let mut residual = residual_at(mu);
    for iteration in 1..=config.max_iterations {
        if residual.abs() <= config.tolerance {
            return Ok(WaterFillSolution {
                powers: allocation_at(mu, &floors).collect(),
                water_level: mu,
                iterations: iteration,
                residual,
            });
        }
        if residual > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
        mu = 0.5 * (lo + hi);
        residual = residual_at(mu);
    }
    if residual.abs() <= config.tolerance {
        return Ok(WaterFillSolution {
            powers: allocation_at(mu, &floors).collect(),
            water_level: mu,
            iterations: config.max_iterations,
            residual,
        });
    }
    Err(Error::Solver {
        iterations: config.max_iterations,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaterFillDecision {
    /// Continuous powers, used for rate and energy accounting.
    pub powers: Vec<f64>,
    /// Nearest discrete levels, for diagnostics only.
    pub action: ActionVector,
    pub water_level: f64,
}

pub fn waterfill_policy(state: &ChannelState, params: &EnvParams, config: &WaterFillConfig) -> Result<WaterFillDecision> {
    let solution = waterfill_allocate(state, params.noise_power, config)?;
    let action = ActionVector::new(
        solution
            .powers
            .iter()
            .map(|&p| nearest_level(&params.power_levels, p))
            .collect(),
    );
    Ok(WaterFillDecision {
        powers: solution.powers,
        action,
        water_level: solution.water_level,
    })
}

/// One user's share of the one-step reward at a given power.
fn user_utility(power: f64, gain: f64, params: &EnvParams) -> f64 {
    let rate = compute_snr(power, gain, params.noise_power)
        .and_then(compute_rate)
        .unwrap_or(f64::NEG_INFINITY);
    rate - params.lambda_penalty * power
}

/// Per-user argmax of `log2(1 + p h / σ²) - λ p`, ties toward lower power.
///
/// The reward separates across users and the next state ignores the action,
/// so this greedy rule is optimal for the discounted problem as well.
pub fn myopic_oracle(state: &ChannelState, params: &EnvParams) -> ActionVector {
    let levels = state
        .gains
        .iter()
        .map(|&h| {
            let mut best = 0;
            let mut best_value = user_utility(params.power_levels[0], h, params);
            for (i, &p) in params.power_levels.iter().enumerate().skip(1) {
                let v = user_utility(p, h, params);
                if v > best_value {
                    best = i;
                    best_value = v;
                }
            }
            best
        })
        .collect();
    ActionVector::new(levels)
}

/// Anything that maps an observed channel to transmit powers.
pub trait PowerPolicy {
    fn kind(&self) -> PolicyKind;

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>>;
}

pub struct FixedPolicy {
    params: EnvParams,
}

impl FixedPolicy {
    pub fn new(params: EnvParams) -> Self {
        Self { params }
    }
}

impl PowerPolicy for FixedPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Fixed
    }

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>> {
        self.params.powers_of(&fixed_policy(state, &self.params))
    }
}

pub struct RandomPolicy {
    params: EnvParams,
    rng: SimRng,
}

impl RandomPolicy {
    pub fn new(params: EnvParams, rng: SimRng) -> Self {
        Self { params, rng }
    }
}

impl PowerPolicy for RandomPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Random
    }

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>> {
        let action = random_policy(state, &self.params, &mut self.rng);
        self.params.powers_of(&action)
    }
}

pub struct WaterFillPolicy {
    params: EnvParams,
    config: WaterFillConfig,
}

impl WaterFillPolicy {
    pub fn new(params: EnvParams, config: WaterFillConfig) -> Self {
        Self { params, config }
    }
}

impl PowerPolicy for WaterFillPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::WaterFilling
    }

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>> {
        Ok(waterfill_policy(state, &self.params, &self.config)?.powers)
    }
}

pub struct OraclePolicy {
    params: EnvParams,
}

impl OraclePolicy {
    pub fn new(params: EnvParams) -> Self {
        Self { params }
    }
}

impl PowerPolicy for OraclePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::MyopicOracle
    }

    fn powers(&mut self, state: &ChannelState) -> Result<Vec<f64>> {
        self.params.powers_of(&myopic_oracle(state, &self.params))
    }
}

/// Runs `policy` for `steps` slots on the evaluation streams of `seed` and
/// summarises the run. Every policy sees the same channel path for a seed.
pub fn simulate_policy(
    policy: &mut dyn PowerPolicy,
    params: &EnvParams,
    steps: u64,
    mode: FairnessMode,
    seed: u64,
) -> Result<MetricsReport> {
    if steps == 0 {
        return Err(Error::Config("simulation needs at least one step".into()));
    }
    let mut env = WirelessEnv::new(
        params.clone(),
        stream(seed, Stream::Evaluation),
        stream(seed, Stream::EvaluationArrivals),
    )?;
    let mut metrics = MetricsAccumulator::new(params.n_users);
    for _ in 0..steps {
        let powers = policy.powers(env.state())?;
        let outcome = env.step_powers(&powers)?;
        metrics.push(&outcome.rates, &outcome.powers_used, &outcome.next_queues.backlogs)?;
    }
    metrics.report(mode)
}

/// Builds a baseline policy by kind. The learned policy needs an agent and
/// is not available here.
pub fn baseline_policy(kind: PolicyKind, params: &EnvParams, waterfill: &WaterFillConfig, seed: u64) -> Result<Box<dyn PowerPolicy>> {
    Ok(match kind {
        PolicyKind::Fixed => Box::new(FixedPolicy::new(params.clone())),
        PolicyKind::Random => Box::new(RandomPolicy::new(params.clone(), stream(seed, Stream::Policy))),
        PolicyKind::WaterFilling => {
            waterfill.validate()?;
            Box::new(WaterFillPolicy::new(params.clone(), waterfill.clone()))
        }
        PolicyKind::MyopicOracle => Box::new(OraclePolicy::new(params.clone())),
        PolicyKind::LearnedGreedy => {
            return Err(Error::Config("the learned policy needs a trained agent".into()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::compute_reward;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sum_rate(gains: &[f64], powers: &[f64]) -> f64 {
        gains.iter().zip(powers).map(|(&h, &p)| (1.0 + p * h).log2()).sum()
    }

    fn cfg(total: f64) -> WaterFillConfig {
        WaterFillConfig {
            total_power: total,
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn fixed_uses_two_watts() {
        let p = EnvParams::default();
        let a = fixed_policy(&ChannelState::new(vec![0.3, 0.9, 0.5]), &p);
        assert_eq!(p.powers_of(&a).unwrap(), vec![2.0; 3]);
        let b = fixed_policy(&ChannelState::new(vec![0.1; 3]), &p);
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_falls_back_to_nearest_level() {
        let mut p = EnvParams::default();
        p.power_levels = vec![0.0, 1.5, 2.5, 4.0];
        // 1.5 and 2.5 are equidistant; the lower one wins.
        let a = fixed_policy(&ChannelState::new(vec![0.5; 3]), &p);
        assert_eq!(a.levels, vec![1; 3]);
    }

    #[test]
    fn random_with_single_level() {
        let mut p = EnvParams::default();
        p.power_levels = vec![0.0];
        let mut rng = SimRng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(random_policy(&ChannelState::new(vec![0.5; 3]), &p, &mut rng).levels, vec![0; 3]);
        }
    }

    #[test]
    fn random_level_frequencies_uniform() {
        let p = EnvParams::default();
        let mut rng = SimRng::seed_from_u64(42);
        let n = 1_000_000;
        let mut counts = [[0usize; 4]; 3];
        let mut power_sum = [0.0; 3];
        let s = ChannelState::new(vec![0.5; 3]);
        for _ in 0..n {
            let a = random_policy(&s, &p, &mut rng);
            for (u, &l) in a.levels.iter().enumerate() {
                counts[u][l] += 1;
                power_sum[u] += p.power_levels[l];
            }
        }
        for u in 0..3 {
            for c in counts[u] {
                assert!((c as f64 / n as f64 - 0.25).abs() < 0.002);
            }
            assert!((power_sum[u] / n as f64 - 1.5).abs() < 0.01);
        }
    }

    #[test]
    fn waterfill_single_user_gets_budget() {
        let sol = waterfill_allocate(&ChannelState::new(vec![1.0]), 1.0, &cfg(2.0)).unwrap();
        assert!((sol.powers[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn waterfill_two_active_users() {
        let sol = waterfill_allocate(&ChannelState::new(vec![1.0, 0.5]), 1.0, &cfg(3.0)).unwrap();
        assert!((sol.water_level - 3.0).abs() < 1e-9);
        assert!((sol.powers[0] - 2.0).abs() < 1e-9);
        assert!((sol.powers[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn waterfill_weak_user_inactive() {
        let sol = waterfill_allocate(&ChannelState::new(vec![1.0, 0.1]), 1.0, &cfg(1.0)).unwrap();
        assert!((sol.water_level - 2.0).abs() < 1e-9);
        assert!((sol.powers[0] - 1.0).abs() < 1e-9);
        assert_eq!(sol.powers[1], 0.0);
    }

    #[test]
    fn waterfill_errors() {
        assert!(matches!(
            waterfill_allocate(&ChannelState::new(vec![1.0, 0.0]), 1.0, &cfg(1.0)),
            Err(Error::Domain(_))
        ));
        let starved = WaterFillConfig {
            total_power: 5.0,
            tolerance: 1e-15,
            max_iterations: 3,
        };
        assert!(matches!(
            waterfill_allocate(&ChannelState::new(vec![0.3, 0.7, 0.9]), 1.0, &starved),
            Err(Error::Solver { iterations: 3, .. })
        ));
        assert!(waterfill_allocate(&ChannelState::new(vec![0.5]), 1.0, &cfg(0.0)).is_err());
    }

    #[test]
    fn waterfill_symmetric_and_empty_budget() {
        let p = EnvParams::default();
        let d = waterfill_policy(&ChannelState::new(vec![0.4; 3]), &p, &cfg(6.0)).unwrap();
        for x in &d.powers {
            assert!((x - 2.0).abs() < 1e-9);
        }
        assert_eq!(d.action.levels, vec![2; 3]);
        let tiny = waterfill_policy(&ChannelState::new(vec![0.2, 0.9, 0.5]), &p, &cfg(1e-12)).unwrap();
        assert!(tiny.powers.iter().all(|&x| x < 1e-9));
        assert!(sum_rate(&[0.2, 0.9, 0.5], &tiny.powers) < 1e-9);
        assert_eq!(tiny.action.levels, vec![0; 3]);
    }

    #[test]
    fn oracle_examples() {
        let p = EnvParams::default();
        assert_eq!(myopic_oracle(&ChannelState::new(vec![1.0]), &EnvParams { n_users: 1, ..p.clone() }).levels, vec![3]);
        assert_eq!(myopic_oracle(&ChannelState::new(vec![0.1]), &EnvParams { n_users: 1, ..p.clone() }).levels, vec![3]);
        let heavy = EnvParams {
            n_users: 1,
            lambda_penalty: 0.5,
            ..p
        };
        assert_eq!(myopic_oracle(&ChannelState::new(vec![0.5]), &heavy).levels, vec![1]);
    }

    #[test]
    fn oracle_ties_prefer_lower_power() {
        // With λ = log2(2) = 1 and h = 1: level 0 -> 0, level 1 -> 1 - 1 = 0.
        let p = EnvParams {
            n_users: 1,
            power_levels: vec![0.0, 1.0],
            lambda_penalty: 1.0,
            ..EnvParams::default()
        };
        assert_eq!(myopic_oracle(&ChannelState::new(vec![1.0]), &p).levels, vec![0]);
    }

    proptest! {
        #[test]
        fn waterfill_kkt_and_monotone(gains in proptest::collection::vec(0.05f64..2.0, 1..6), total in 0.1f64..20.0) {
            let sol = waterfill_allocate(&ChannelState::new(gains.clone()), 1.0, &cfg(total)).unwrap();
            let sum: f64 = sol.powers.iter().sum();
            prop_assert!((sum - total).abs() <= 1e-9);
            for (i, (&h, &p)) in gains.iter().zip(&sol.powers).enumerate() {
                prop_assert!(p >= 0.0);
                if p > 0.0 {
                    prop_assert!((sol.water_level - 1.0 / h - p).abs() <= 1e-9);
                } else {
                    prop_assert!(sol.water_level <= 1.0 / h + 1e-9);
                }
                for (j, &hj) in gains.iter().enumerate() {
                    if h >= hj {
                        prop_assert!(p >= sol.powers[j] - 1e-12, "users {} {}", i, j);
                    }
                }
            }
        }

        #[test]
        fn oracle_matches_exhaustive_joint_search(gains in proptest::collection::vec(0.1f64..1.0, 3), lambda in 0.0f64..1.0) {
            let p = EnvParams { lambda_penalty: lambda, ..EnvParams::default() };
            let oracle = myopic_oracle(&ChannelState::new(gains.clone()), &p);
            let oracle_powers = p.powers_of(&oracle).unwrap();
            let best = |powers: &[f64]| {
                let rates: Vec<f64> = gains.iter().zip(powers).map(|(&h, &q)| (1.0 + q * h).log2()).collect();
                compute_reward(&rates, powers, lambda).unwrap()
            };
            let oracle_value = best(&oracle_powers);
            for idx in 0..64usize {
                let powers: Vec<f64> = (0..3).map(|u| p.power_levels[(idx >> (2 * u)) & 3]).collect();
                prop_assert!(best(&powers) <= oracle_value + 1e-12);
            }
        }

        #[test]
        fn fixed_and_random_ignore_state(gains in proptest::collection::vec(0.1f64..1.0, 3), seed in any::<u64>()) {
            let p = EnvParams::default();
            let mut permuted = gains.clone();
            permuted.reverse();
            prop_assert_eq!(fixed_policy(&ChannelState::new(gains.clone()), &p), fixed_policy(&ChannelState::new(permuted.clone()), &p));
            let a = random_policy(&ChannelState::new(gains), &p, &mut SimRng::seed_from_u64(seed));
            let b = random_policy(&ChannelState::new(permuted), &p, &mut SimRng::seed_from_u64(seed));
            prop_assert_eq!(a, b);
        }
    }
}
