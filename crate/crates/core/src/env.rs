//! Multi-user downlink environment.
//!
//! Each slot the base station observes the channel gains of all users,
//! picks a transmit power per user and collects the Shannon sum-rate minus a
//! linear power penalty. Gains are redrawn i.i.d. every slot, so the next
//! state never depends on the action. Per-user queues are tracked alongside
//! for the latency proxy but are not part of the observation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::{Error, Result};

/// How bits arrive at each user's queue every slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalProcess {
    /// Exactly `arrival_rate` bits per slot.
    Constant,
    /// A burst of `arrival_rate / probability` bits with the given probability,
    /// so the mean stays `arrival_rate`.
    Bernoulli { probability: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub n_users: usize,
    /// Allowed transmit powers in Watts, strictly increasing from 0.
    pub power_levels: Vec<f64>,
    pub noise_power: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub lambda_penalty: f64,
    pub gamma: f64,
    /// Mean arrivals in bits per slot per user.
    pub arrival_rate: f64,
    pub arrivals: ArrivalProcess,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            n_users: 3,
            power_levels: vec![0.0, 1.0, 2.0, 3.0],
            noise_power: 1.0,
            h_min: 0.1,
            h_max: 1.0,
            lambda_penalty: 0.1,
            gamma: 0.99,
            arrival_rate: 0.8,
            arrivals: ArrivalProcess::Constant,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Config("n_users must be positive".into()));
        }
        if self.power_levels.is_empty() {
            return Err(Error::Config("power_levels must not be empty".into()));
        }
        if self.power_levels[0] != 0.0 {
            return Err(Error::Config("power_levels must start at 0 W".into()));
        }
        if self.power_levels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("power_levels must be strictly increasing".into()));
        }
        if !(self.noise_power > 0.0) {
            return Err(Error::Config(format!("noise_power must be positive, got {}", self.noise_power)));
        }
        check_gain_bounds(self.h_min, self.h_max)?;
        if !(self.lambda_penalty >= 0.0) {
            return Err(Error::Config("lambda_penalty must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.arrival_rate >= 0.0) {
            return Err(Error::Config("arrival_rate must be non-negative".into()));
        }
        if let ArrivalProcess::Bernoulli { probability } = self.arrivals {
            if !(probability > 0.0 && probability <= 1.0) {
                return Err(Error::Config("Bernoulli arrival probability must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.power_levels.len()
    }

    /// Size of the joint action space, `levels ^ users`.
    pub fn num_joint_actions(&self) -> usize {
        self.num_levels().pow(self.n_users as u32)
    }

    /// Maps a per-user level selection to Watts.
    pub fn powers_of(&self, action: &ActionVector) -> Result<Vec<f64>> {
        action.check(self)?;
        Ok(action.levels.iter().map(|&l| self.power_levels[l]).collect())
    }
}

fn check_gain_bounds(h_min: f64, h_max: f64) -> Result<()> {
    if !(h_min > 0.0 && h_min < h_max && h_max.is_finite()) {
        return Err(Error::Config(format!(
            "channel gain bounds must satisfy 0 < h_min < h_max, got [{h_min}, {h_max}]"
        )));
    }
    Ok(())
}

/// Instantaneous channel gains, the MDP state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub gains: Vec<f64>,
}

impl ChannelState {
    pub fn new(gains: Vec<f64>) -> Self {
        Self { gains }
    }

    pub fn n_users(&self) -> usize {
        self.gains.len()
    }
}

/// Per-user indices into `EnvParams::power_levels`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector {
    pub levels: Vec<usize>,
}

impl ActionVector {
    pub fn new(levels: Vec<usize>) -> Self {
        Self { levels }
    }

    fn check(&self, params: &EnvParams) -> Result<()> {
        if self.levels.len() != params.n_users {
            return Err(Error::Contract(format!(
                "action has {} entries for {} users",
                self.levels.len(),
                params.n_users
            )));
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l >= params.num_levels()) {
            return Err(Error::Contract(format!(
                "power level index {bad} out of range for {} levels",
                params.num_levels()
            )));
        }
        Ok(())
    }
}

/// Per-user backlog in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub backlogs: Vec<f64>,
}

impl QueueState {
    pub fn empty(n_users: usize) -> Self {
        Self {
            backlogs: vec![0.0; n_users],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Per-user spectral efficiency in bits/s/Hz.
    pub rates: Vec<f64>,
    pub reward: f64,
    pub next_state: ChannelState,
    pub powers_used: Vec<f64>,
    pub next_queues: QueueState,
}

pub fn sample_channel<R: Rng + ?Sized>(params: &EnvParams, rng: &mut R) -> Result<ChannelState> {
    check_gain_bounds(params.h_min, params.h_max)?;
    let gains = (0..params.n_users)
        .map(|_| rng.gen_range(params.h_min..=params.h_max))
        .collect();
    Ok(ChannelState { gains })
}

pub fn compute_snr(power: f64, gain: f64, noise_power: f64) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(Error::Config(format!("noise power must be positive, got {noise_power}")));
    }
    if !(power >= 0.0) || !(gain >= 0.0) {
        return Err(Error::Domain(format!("power ({power}) and gain ({gain}) must be non-negative")));
    }
    Ok(power * gain / noise_power)
}

/// Shannon spectral efficiency `log2(1 + snr)`.
pub fn compute_rate(snr: f64) -> Result<f64> {
    if !(snr >= 0.0) {
        return Err(Error::Domain(format!("SNR must be non-negative, got {snr}")));
    }
    Ok((1.0 + snr).log2())
}

pub fn compute_reward(rates: &[f64], powers: &[f64], lambda_penalty: f64) -> Result<f64> {
    if rates.len() != powers.len() {
        return Err(Error::Contract(format!(
            "{} rates but {} powers",
            rates.len(),
            powers.len()
        )));
    }
    let sum_rate: f64 = rates.iter().sum();
    let sum_power: f64 = powers.iter().sum();
    Ok(sum_rate - lambda_penalty * sum_power)
}

/// `q(t+1) = max(q(t) + a(t) - R(t), 0)` element-wise.
pub fn update_queues(queues: &QueueState, arrivals: &[f64], rates: &[f64]) -> Result<QueueState> {
    let n = queues.backlogs.len();
    if arrivals.len() != n || rates.len() != n {
        return Err(Error::Contract(format!(
            "queue update lengths differ: queues {n}, arrivals {}, rates {}",
            arrivals.len(),
            rates.len()
        )));
    }
    if arrivals.iter().chain(rates).any(|&x| !(x >= 0.0)) {
        return Err(Error::Contract("arrivals and rates must be non-negative".into()));
    }
    let backlogs = queues
        .backlogs
        .iter()
        .zip(arrivals)
        .zip(rates)
        .map(|((&q, &a), &r)| (q + a - r).max(0.0))
        .collect();
    Ok(QueueState { backlogs })
}

/// Draws one slot's worth of arrivals for every user.
pub fn sample_arrivals<R: Rng + ?Sized>(params: &EnvParams, rng: &mut R) -> Vec<f64> {
    match params.arrivals {
        ArrivalProcess::Constant => vec![params.arrival_rate; params.n_users],
        ArrivalProcess::Bernoulli { probability } => (0..params.n_users)
            .map(|_| {
                if rng.gen_bool(probability) {
                    params.arrival_rate / probability
                } else {
                    0.0
                }
            })
            .collect(),
    }
}

fn check_state(state: &ChannelState, queues: &QueueState, params: &EnvParams) -> Result<()> {
    if state.gains.len() != params.n_users || queues.backlogs.len() != params.n_users {
        return Err(Error::Contract(format!(
            "state has {} gains and {} queues for {} users",
            state.gains.len(),
            queues.backlogs.len(),
            params.n_users
        )));
    }
    Ok(())
}

/// One slot with explicit (possibly continuous) powers.
///
/// `channel_rng` draws the next state and `arrival_rng` the queue arrivals;
/// keeping them apart means the arrival model never shifts the channel path.
pub fn step_with_powers<R: Rng + ?Sized, A: Rng + ?Sized>(
    state: &ChannelState,
    powers: &[f64],
    queues: &QueueState,
    params: &EnvParams,
    channel_rng: &mut R,
    arrival_rng: &mut A,
) -> Result<StepOutcome> {
    check_state(state, queues, params)?;
    if powers.len() != params.n_users {
        return Err(Error::Contract(format!(
            "{} powers for {} users",
            powers.len(),
            params.n_users
        )));
    }
    let rates = powers
        .iter()
        .zip(&state.gains)
        .map(|(&p, &h)| compute_rate(compute_snr(p, h, params.noise_power)?))
        .collect::<Result<Vec<f64>>>()?;
    let reward = compute_reward(&rates, powers, params.lambda_penalty)?;
    let arrivals = sample_arrivals(params, arrival_rng);
    let next_queues = update_queues(queues, &arrivals, &rates)?;
    let next_state = sample_channel(params, channel_rng)?;
    Ok(StepOutcome {
        rates,
        reward,
        next_state,
        powers_used: powers.to_vec(),
        next_queues,
    })
}

pub fn step<R: Rng + ?Sized, A: Rng + ?Sized>(
    state: &ChannelState,
    action: &ActionVector,
    queues: &QueueState,
    params: &EnvParams,
    channel_rng: &mut R,
    arrival_rng: &mut A,
) -> Result<StepOutcome> {
    let powers = params.powers_of(action)?;
    step_with_powers(state, &powers, queues, params, channel_rng, arrival_rng)
}

/// Stateful wrapper owning the current channel, queues and random streams.
#[derive(Debug, Clone)]
pub struct WirelessEnv {
    params: EnvParams,
    state: ChannelState,
    queues: QueueState,
    channel_rng: SimRng,
    arrival_rng: SimRng,
}

impl WirelessEnv {
    pub fn new(params: EnvParams, mut channel_rng: SimRng, arrival_rng: SimRng) -> Result<Self> {
        params.validate()?;
        let state = sample_channel(&params, &mut channel_rng)?;
        let queues = QueueState::empty(params.n_users);
        Ok(Self {
            params,
            state,
            queues,
            channel_rng,
            arrival_rng,
        })
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn state(&self) -> &ChannelState {
        &self.state
    }

    pub fn queues(&self) -> &QueueState {
        &self.queues
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        let powers = self.params.powers_of(action)?;
        self.step_powers(&powers)
    }

    pub fn step_powers(&mut self, powers: &[f64]) -> Result<StepOutcome> {
        let outcome = step_with_powers(
            &self.state,
            powers,
            &self.queues,
            &self.params,
            &mut self.channel_rng,
            &mut self.arrival_rng,
        )?;
        self.state = outcome.next_state.clone();
        self.queues = outcome.next_queues.clone();
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rngs(seed: u64) -> (SimRng, SimRng) {
        (stream(seed, Stream::Channel), stream(seed, Stream::Arrivals))
    }

    #[test]
    fn defaults_match_simulation_table() {
        let p = EnvParams::default();
        assert_eq!(p.n_users, 3);
        assert_eq!(p.power_levels, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.noise_power, 1.0);
        assert_eq!((p.h_min, p.h_max), (0.1, 1.0));
        assert_eq!(p.lambda_penalty, 0.1);
        assert_eq!(p.gamma, 0.99);
        assert_eq!(p.num_joint_actions(), 64);
        p.validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = EnvParams::default();
        p.power_levels = vec![1.0, 2.0];
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        p.power_levels = vec![0.0, 2.0, 2.0];
        assert!(p.validate().is_err());
        let mut p = EnvParams::default();
        p.h_min = 1.0;
        assert!(matches!(sample_channel(&p, &mut SimRng::seed_from_u64(0)), Err(Error::Config(_))));
        let mut p = EnvParams::default();
        p.gamma = 1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn degenerate_gain_interval_collapses_to_lower_bound() {
        let mut p = EnvParams::default();
        p.h_min = 0.5;
        p.h_max = 0.5 + 1e-12;
        let s = sample_channel(&p, &mut SimRng::seed_from_u64(3)).unwrap();
        for g in s.gains {
            assert!((g - 0.5).abs() < 1e-11);
        }
    }

    #[test]
    fn gain_samples_stay_in_bounds_with_expected_mean() {
        let p = EnvParams::default();
        let mut rng = SimRng::seed_from_u64(11);
        let n = 1_000_000;
        let mut sums = [0.0; 3];
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..n {
            let s = sample_channel(&p, &mut rng).unwrap();
            for (acc, g) in sums.iter_mut().zip(&s.gains) {
                *acc += g;
                lo = lo.min(*g);
                hi = hi.max(*g);
            }
        }
        assert!(lo >= 0.1 && hi <= 1.0);
        for s in sums {
            assert!((s / n as f64 - 0.55).abs() < 0.003, "mean {}", s / n as f64);
        }
    }

    #[test]
    fn snr_and_rate_examples() {
        assert_eq!(compute_snr(0.0, 0.7, 1.0).unwrap(), 0.0);
        assert_eq!(compute_snr(3.0, 1.0, 1.0).unwrap(), 3.0);
        assert_eq!(compute_snr(2.0, 0.5, 1.0).unwrap(), 1.0);
        assert!(matches!(compute_snr(1.0, 1.0, 0.0), Err(Error::Config(_))));
        assert_eq!(compute_rate(0.0).unwrap(), 0.0);
        assert_eq!(compute_rate(3.0).unwrap(), 2.0);
        assert_eq!(compute_rate(1.0).unwrap(), 1.0);
        assert!(matches!(compute_rate(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn reward_examples() {
        assert_eq!(compute_reward(&[0.0; 3], &[0.0; 3], 0.1).unwrap(), 0.0);
        assert!((compute_reward(&[2.0, 1.0, 1.0], &[3.0, 2.0, 2.0], 0.1).unwrap() - 3.3).abs() < 1e-12);
        assert!((compute_reward(&[1.0; 3], &[3.0; 3], 0.1).unwrap() - 2.1).abs() < 1e-12);
        assert!(matches!(compute_reward(&[1.0], &[1.0, 2.0], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn queue_examples() {
        let q = |v: f64| QueueState { backlogs: vec![v] };
        assert_eq!(update_queues(&q(2.0), &[1.0], &[3.0]).unwrap(), q(0.0));
        assert_eq!(update_queues(&q(0.0), &[1.0], &[0.5]).unwrap(), q(0.5));
        assert_eq!(update_queues(&q(5.0), &[0.0], &[0.0]).unwrap(), q(5.0));
        assert!(matches!(update_queues(&q(1.0), &[-1.0], &[0.0]), Err(Error::Contract(_))));
        assert!(update_queues(&q(1.0), &[1.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_power_step_only_grows_queues() {
        let p = EnvParams::default();
        let (mut c, mut a) = rngs(1);
        let s = sample_channel(&p, &mut c).unwrap();
        let q = QueueState { backlogs: vec![1.0, 0.0, 2.0] };
        let out = step(&s, &ActionVector::new(vec![0; 3]), &q, &p, &mut c, &mut a).unwrap();
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.rates, vec![0.0; 3]);
        assert_eq!(out.next_queues.backlogs, vec![1.8, 0.8, 2.8]);
    }

    #[test]
    fn full_power_unit_gain_step() {
        let p = EnvParams::default();
        let (mut c, mut a) = rngs(2);
        let s = ChannelState::new(vec![1.0; 3]);
        let out = step(&s, &ActionVector::new(vec![3; 3]), &QueueState::empty(3), &p, &mut c, &mut a).unwrap();
        assert!((out.reward - 5.1).abs() < 1e-12);
        assert_eq!(out.powers_used, vec![3.0; 3]);
    }

    #[test]
    fn step_rejects_bad_action() {
        let p = EnvParams::default();
        let (mut c, mut a) = rngs(2);
        let s = ChannelState::new(vec![1.0; 3]);
        let q = QueueState::empty(3);
        assert!(matches!(step(&s, &ActionVector::new(vec![4, 0, 0]), &q, &p, &mut c, &mut a), Err(Error::Contract(_))));
        assert!(step(&s, &ActionVector::new(vec![0, 0]), &q, &p, &mut c, &mut a).is_err());
    }

    #[test]
    fn next_state_does_not_depend_on_action() {
        // Same channel stream, different actions: identical state paths.
        let p = EnvParams::default();
        let mut env_a = WirelessEnv::new(p.clone(), stream(5, Stream::Channel), stream(5, Stream::Arrivals)).unwrap();
        let mut env_b = env_a.clone();
        for t in 0..1000 {
            let a = env_a.step(&ActionVector::new(vec![0, 1, 2])).unwrap();
            let b = env_b.step(&ActionVector::new(vec![t % 4, 3, (t / 4) % 4])).unwrap();
            assert_eq!(a.next_state, b.next_state);
        }
    }

    #[test]
    fn bernoulli_arrivals_keep_mean() {
        let mut p = EnvParams::default();
        p.arrivals = ArrivalProcess::Bernoulli { probability: 0.25 };
        p.validate().unwrap();
        let mut rng = SimRng::seed_from_u64(9);
        let n = 200_000;
        let total: f64 = (0..n).map(|_| sample_arrivals(&p, &mut rng)[0]).sum();
        assert!((total / n as f64 - 0.8).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn rate_monotone_in_power_and_gain(p1 in 0.0f64..10.0, dp in 0.0f64..10.0, h1 in 0.0f64..5.0, dh in 0.0f64..5.0) {
            let r = |p: f64, h: f64| compute_rate(compute_snr(p, h, 1.0).unwrap()).unwrap();
            prop_assert!(r(p1 + dp, h1) >= r(p1, h1));
            prop_assert!(r(p1, h1 + dh) >= r(p1, h1));
        }

        #[test]
        fn reward_plus_penalty_is_sum_rate(gains in proptest::collection::vec(0.1f64..1.0, 3), levels in proptest::collection::vec(0usize..4, 3), seed in any::<u64>()) {
            let p = EnvParams::default();
            let (mut c, mut a) = rngs(seed);
            let out = step(&ChannelState::new(gains), &ActionVector::new(levels), &QueueState::empty(3), &p, &mut c, &mut a).unwrap();
            let sum_rate: f64 = out.rates.iter().sum();
            let sum_power: f64 = out.powers_used.iter().sum();
            prop_assert!((out.reward + p.lambda_penalty * sum_power - sum_rate).abs() <= 1e-12);
            prop_assert!(out.rates.iter().all(|&r| r >= 0.0));
        }

        #[test]
        fn queues_never_negative(q in proptest::collection::vec(0.0f64..100.0, 1..6), seed in any::<u64>()) {
            let mut rng = SimRng::seed_from_u64(seed);
            let n = q.len();
            let arrivals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let rates: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let next = update_queues(&QueueState { backlogs: q }, &arrivals, &rates).unwrap();
            prop_assert!(next.backlogs.iter().all(|&b| b >= 0.0));
        }
    }
}
