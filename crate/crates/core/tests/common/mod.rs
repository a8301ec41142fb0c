//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use powerlab::neural::{mse_loss, MlpNetwork};
use powerlab::rng::SimRng;
use rand::{Rng, SeedableRng};

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `E[log2(1 + p h)]` for `h ~ U[0.1, 1]`.
pub fn mean_rate(p: f64) -> f64 {
    simpson(|h| (1.0 + p * h).log2(), 0.1, 1.0, 2_000) / 0.9
}

pub fn fixed_sum_rate() -> f64 {
    3.0 * mean_rate(2.0)
}

pub fn random_sum_rate() -> f64 {
    3.0 * [0.0, 1.0, 2.0, 3.0].iter().map(|&p| mean_rate(p)).sum::<f64>() / 4.0
}

/// Ratio of expected bits to expected energy under uniform power levels.
pub fn random_energy_efficiency() -> f64 {
    random_sum_rate() / (3.0 * 1.5)
}

fn jain(v: &[f64]) -> Option<f64> {
    let s: f64 = v.iter().sum();
    let q: f64 = v.iter().map(|x| x * x).sum();
    (q > 0.0).then(|| s * s / (v.len() as f64 * q))
}

/// Monte Carlo mean of the per-slot Jain index, skipping slots where no
/// user is served. `draw_power` picks each user's power.
pub fn per_step_jain(samples: usize, seed: u64, mut draw_power: impl FnMut(&mut SimRng) -> f64) -> f64 {
    let mut rng = SimRng::seed_from_u64(seed);
    let (mut total, mut count) = (0.0, 0usize);
    for _ in 0..samples {
        let rates: Vec<f64> = (0..3)
            .map(|_| {
                let h = rng.gen_range(0.1..1.0);
                let p = draw_power(&mut rng);
                (1.0 + p * h).log2()
            })
            .collect();
        if let Some(j) = jain(&rates) {
            total += j;
            count += 1;
        }
    }
    total / count as f64
}

pub struct GradientCheck {
    pub configurations: usize,
    pub parameters: usize,
    pub worst_relative_error: f64,
}

/// Relative error with a small floor so that two near-zero values compare
/// by their absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss(net: &MlpNetwork, x: &[f64], target: &[f64]) -> f64 {
    mse_loss(&net.forward(x).unwrap(), target).unwrap()
}

/// Compares backprop with central differences (step 1e-5) on the MSE loss
/// of random small networks, inputs and targets.
pub fn gradient_check(configurations: usize, seed: u64) -> GradientCheck {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut parameters = 0;
    for _ in 0..configurations {
        let depth = rng.gen_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=6)).collect();
        let mut net = MlpNetwork::init(&dims, &mut rng).unwrap();
        for v in net.parameters_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..dims[depth]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = net.forward(&x).unwrap();
        let n = out.len() as f64;
        let dout: Vec<f64> = out.iter().zip(&target).map(|(o, t)| 2.0 * (o - t) / n).collect();
        let analytic: Vec<f64> = net.backward(&x, &dout).unwrap().values().copied().collect();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            *plus.parameters_mut().nth(i).unwrap() += h;
            let mut minus = net.clone();
            *minus.parameters_mut().nth(i).unwrap() -= h;
            let numeric = (loss(&plus, &x, &target) - loss(&minus, &x, &target)) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
            parameters += 1;
        }
    }
    GradientCheck {
        configurations,
        parameters,
        worst_relative_error: worst,
    }
}
