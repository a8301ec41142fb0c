//! Throughput, Jain fairness, energy efficiency and queue latency.
//!
//! Undefined quantities (Jain over an all-zero vector, 0/0 efficiency) are
//! reported as `None`, never as zero.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMode {
    /// Jain index of the per-user time-averaged rates.
    OnAverages,
    /// Time average of the per-step Jain index over instantaneous rates.
    /// Steps in which no user transmits are skipped.
    #[default]
    PerStepAveraged,
}

/// Rates, powers and post-step queues for every slot of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    n_users: usize,
    rates: Vec<f64>,
    powers: Vec<f64>,
    queues: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn new(n_users: usize) -> Self {
        Self {
            n_users,
            ..Default::default()
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn steps(&self) -> usize {
        if self.n_users == 0 {
            0
        } else {
            self.rates.len() / self.n_users
        }
    }

    pub fn push(&mut self, rates: &[f64], powers: &[f64], queues: &[f64]) -> Result<()> {
        let n = self.n_users;
        if rates.len() != n || powers.len() != n || queues.len() != n {
            return Err(Error::Contract(format!(
                "trajectory step for {n} users got {}/{}/{} entries",
                rates.len(),
                powers.len(),
                queues.len()
            )));
        }
        self.rates.extend_from_slice(rates);
        self.powers.extend_from_slice(powers);
        self.queues.extend_from_slice(queues);
        Ok(())
    }

    pub fn rates_at(&self, t: usize) -> &[f64] {
        &self.rates[t * self.n_users..(t + 1) * self.n_users]
    }

    pub fn powers_at(&self, t: usize) -> &[f64] {
        &self.powers[t * self.n_users..(t + 1) * self.n_users]
    }

    pub fn queues_at(&self, t: usize) -> &[f64] {
        &self.queues[t * self.n_users..(t + 1) * self.n_users]
    }

    fn require_steps(&self) -> Result<usize> {
        match self.steps() {
            0 => Err(Error::Contract("metrics need a trajectory with at least one step".into())),
            t => Ok(t),
        }
    }
}

/// Time-averaged sum-rate.
pub fn throughput(traj: &TrajectoryRecord) -> Result<f64> {
    let t = traj.require_steps()?;
    let total: f64 = (0..t).map(|s| traj.rates_at(s).iter().sum::<f64>()).sum();
    Ok(total / t as f64)
}

/// `(Σv)² / (N Σv²)`; `None` when every value is zero.
pub fn jain_index(values: &[f64]) -> Option<f64> {
    let sum: f64 = values.iter().sum();
    let sum_sq: f64 = values.iter().map(|v| v * v).sum();
    if values.is_empty() || sum_sq == 0.0 {
        return None;
    }
    Some(sum * sum / (values.len() as f64 * sum_sq))
}

/// Delivered bits per Joule; `None` when no energy was spent.
pub fn energy_efficiency(traj: &TrajectoryRecord) -> Result<Option<f64>> {
    let t = traj.require_steps()?;
    let bits: f64 = (0..t).map(|s| traj.rates_at(s).iter().sum::<f64>()).sum();
    let energy: f64 = (0..t).map(|s| traj.powers_at(s).iter().sum::<f64>()).sum();
    Ok(if energy > 0.0 { Some(bits / energy) } else { None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySummary {
    pub mean: f64,
    pub per_user: Vec<f64>,
}

/// Mean queue backlog over users and time, plus the per-user means.
pub fn mean_latency(traj: &TrajectoryRecord) -> Result<LatencySummary> {
    let t = traj.require_steps()?;
    let mut per_user = vec![0.0; traj.n_users];
    for s in 0..t {
        for (acc, q) in per_user.iter_mut().zip(traj.queues_at(s)) {
            *acc += q;
        }
    }
    let total: f64 = per_user.iter().sum();
    per_user.iter_mut().for_each(|v| *v /= t as f64);
    Ok(LatencySummary {
        mean: total / (traj.n_users * t) as f64,
        per_user,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub throughput: f64,
    pub fairness: Option<f64>,
    pub energy_efficiency: Option<f64>,
    pub mean_latency: f64,
    pub per_user_rate: Vec<f64>,
    pub per_user_latency: Vec<f64>,
    /// Mean backlog divided by mean service rate, per user. `None` for users
    /// that were never served.
    pub per_user_queue_rate_ratio: Vec<Option<f64>>,
    pub fairness_mode: FairnessMode,
    pub steps: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Streaming form of the metrics, for runs too long to keep in memory.
///
/// Sums are accumulated in the same order as the trajectory functions, so a
/// report built either way is bitwise identical.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    n_users: usize,
    steps: u64,
    rate_total: f64,
    power_total: f64,
    user_rate: Vec<f64>,
    user_queue: Vec<f64>,
    jain_sum: f64,
    jain_steps: u64,
}

impl MetricsAccumulator {
    pub fn new(n_users: usize) -> Self {
        Self {
            n_users,
            steps: 0,
            rate_total: 0.0,
            power_total: 0.0,
            user_rate: vec![0.0; n_users],
            user_queue: vec![0.0; n_users],
            jain_sum: 0.0,
            jain_steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn push(&mut self, rates: &[f64], powers: &[f64], queues: &[f64]) -> Result<()> {
        let n = self.n_users;
        if rates.len() != n || powers.len() != n || queues.len() != n {
            return Err(Error::Contract(format!("metrics step for {n} users has mismatched lengths")));
        }
        self.steps += 1;
        self.rate_total += rates.iter().sum::<f64>();
        self.power_total += powers.iter().sum::<f64>();
        for (acc, r) in self.user_rate.iter_mut().zip(rates) {
            *acc += r;
        }
        for (acc, q) in self.user_queue.iter_mut().zip(queues) {
            *acc += q;
        }
        if let Some(j) = jain_index(rates) {
            self.jain_sum += j;
            self.jain_steps += 1;
        }
        Ok(())
    }

    pub fn report(&self, mode: FairnessMode) -> Result<MetricsReport> {
        if self.steps == 0 {
            return Err(Error::Contract("metrics need at least one step".into()));
        }
        let t = self.steps as f64;
        let queue_total: f64 = self.user_queue.iter().sum();
        let per_user_rate: Vec<f64> = self.user_rate.iter().map(|r| r / t).collect();
        let per_user_latency: Vec<f64> = self.user_queue.iter().map(|q| q / t).collect();
        let fairness = match mode {
            FairnessMode::OnAverages => jain_index(&per_user_rate),
            FairnessMode::PerStepAveraged => {
                (self.jain_steps > 0).then(|| self.jain_sum / self.jain_steps as f64)
            }
        };
        let per_user_queue_rate_ratio = per_user_latency
            .iter()
            .zip(&per_user_rate)
            .map(|(&q, &r)| (r > 0.0).then(|| q / r))
            .collect();
        let report = MetricsReport {
            throughput: self.rate_total / t,
            fairness,
            energy_efficiency: (self.power_total > 0.0).then(|| self.rate_total / self.power_total),
            mean_latency: queue_total / (self.n_users as f64 * t),
            per_user_rate,
            per_user_latency,
            per_user_queue_rate_ratio,
            fairness_mode: mode,
            steps: self.steps,
        };
        let finite = report.throughput.is_finite()
            && report.mean_latency.is_finite()
            && report.fairness.map_or(true, f64::is_finite)
            && report.energy_efficiency.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("metrics report".into()));
        }
        Ok(report)
    }
}

pub fn build_report(traj: &TrajectoryRecord, mode: FairnessMode) -> Result<MetricsReport> {
    traj.require_steps()?;
    let mut acc = MetricsAccumulator::new(traj.n_users);
    for t in 0..traj.steps() {
        acc.push(traj.rates_at(t), traj.powers_at(t), traj.queues_at(t))?;
    }
    acc.report(mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(n: usize, steps: &[(&[f64], &[f64], &[f64])]) -> TrajectoryRecord {
        let mut t = TrajectoryRecord::new(n);
        for (r, p, q) in steps {
            t.push(r, p, q).unwrap();
        }
        t
    }

    #[test]
    fn throughput_examples() {
        let t = traj(3, &[(&[0.0; 3], &[0.0; 3], &[0.0; 3])]);
        assert_eq!(throughput(&t).unwrap(), 0.0);
        let t = traj(3, &[(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3]), (&[2.0, 2.0, 1.0], &[1.0; 3], &[0.0; 3])]);
        assert_eq!(throughput(&t).unwrap(), 4.0);
        assert!(matches!(throughput(&TrajectoryRecord::new(3)), Err(Error::Contract(_))));
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_index(&[1.0, 1.0, 1.0]), Some(1.0));
        assert!((jain_index(&[1.0, 0.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((jain_index(&[2.0, 1.0, 1.0]).unwrap() - 16.0 / 18.0).abs() < 1e-15);
        assert_eq!(jain_index(&[0.0, 0.0, 0.0]), None);
    }

    #[test]
    fn efficiency_examples() {
        let t = traj(3, &[(&[2.0, 1.0, 1.0], &[3.0, 2.0, 2.0], &[0.0; 3])]);
        assert!((energy_efficiency(&t).unwrap().unwrap() - 4.0 / 7.0).abs() < 1e-15);
        let idle = traj(2, &[(&[0.0; 2], &[0.0; 2], &[0.0; 2])]);
        assert_eq!(energy_efficiency(&idle).unwrap(), None);
    }

    #[test]
    fn latency_examples() {
        let t = traj(2, &[(&[0.0; 2], &[0.0; 2], &[0.0; 2])]);
        assert_eq!(mean_latency(&t).unwrap().mean, 0.0);
        let t = traj(1, &[(&[0.0], &[0.0], &[1.0]), (&[0.0], &[0.0], &[3.0])]);
        let l = mean_latency(&t).unwrap();
        assert_eq!(l.mean, 2.0);
        assert_eq!(l.per_user, vec![2.0]);
    }

    #[test]
    fn single_step_modes_agree() {
        let t = traj(3, &[(&[2.0, 0.5, 1.0], &[3.0, 1.0, 2.0], &[0.1, 0.2, 0.3])]);
        let a = build_report(&t, FairnessMode::OnAverages).unwrap();
        let b = build_report(&t, FairnessMode::PerStepAveraged).unwrap();
        assert!((a.fairness.unwrap() - b.fairness.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn report_matches_direct_functions_bitwise() {
        let t = traj(
            3,
            &[
                (&[2.0, 0.5, 1.0], &[3.0, 1.0, 2.0], &[0.1, 0.2, 0.3]),
                (&[0.3, 0.7, 1.1], &[1.0, 1.0, 2.0], &[0.0, 0.5, 0.9]),
                (&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[0.8, 1.3, 1.7]),
            ],
        );
        let r = build_report(&t, FairnessMode::PerStepAveraged).unwrap();
        assert_eq!(r.throughput.to_bits(), throughput(&t).unwrap().to_bits());
        assert_eq!(r.energy_efficiency, energy_efficiency(&t).unwrap());
        let l = mean_latency(&t).unwrap();
        assert_eq!(r.mean_latency.to_bits(), l.mean.to_bits());
        assert_eq!(r.per_user_latency, l.per_user);
        // Third step carries no traffic and is skipped by the per-step average.
        let expected = (jain_index(t.rates_at(0)).unwrap() + jain_index(t.rates_at(1)).unwrap()) / 2.0;
        assert_eq!(r.fairness, Some(expected));
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn report_json_field_names() {
        let t = traj(2, &[(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0])]);
        let json = build_report(&t, FairnessMode::OnAverages).unwrap().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "throughput",
            "fairness",
            "energy_efficiency",
            "mean_latency",
            "per_user_rate",
            "per_user_latency",
            "fairness_mode",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["fairness_mode"], "on_averages");
        assert_eq!(v["per_user_queue_rate_ratio"][1], serde_json::Value::Null);
    }

    proptest! {
        #[test]
        fn jain_bounds_and_scale_invariance(v in proptest::collection::vec(0.0f64..10.0, 1..8), c in 0.01f64..100.0) {
            if let Some(j) = jain_index(&v) {
                let n = v.len() as f64;
                prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
                let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
                prop_assert!((jain_index(&scaled).unwrap() - j).abs() < 1e-12);
            }
        }

        #[test]
        fn throughput_and_efficiency_ignore_user_order(
            steps in proptest::collection::vec((proptest::collection::vec(0.0f64..3.0, 3), proptest::collection::vec(0.0f64..3.0, 3)), 1..20)
        ) {
            let mut a = TrajectoryRecord::new(3);
            let mut b = TrajectoryRecord::new(3);
            for (r, p) in &steps {
                a.push(r, p, &[0.0; 3]).unwrap();
                let (mut r2, mut p2) = (r.clone(), p.clone());
                r2.rotate_left(1);
                p2.rotate_left(1);
                b.push(&r2, &p2, &[0.0; 3]).unwrap();
            }
            prop_assert!((throughput(&a).unwrap() - throughput(&b).unwrap()).abs() < 1e-12);
            let (ea, eb) = (energy_efficiency(&a).unwrap(), energy_efficiency(&b).unwrap());
            prop_assert_eq!(ea.is_some(), eb.is_some());
            if let (Some(x), Some(y)) = (ea, eb) {
                prop_assert!((x - y).abs() < 1e-12);
                let bits: f64 = steps.iter().map(|(r, _)| r.iter().sum::<f64>()).sum();
                let energy: f64 = steps.iter().map(|(_, p)| p.iter().sum::<f64>()).sum();
                prop_assert!((x * energy - bits).abs() <= 1e-9 * bits.max(1.0));
            }
        }
    }
}
