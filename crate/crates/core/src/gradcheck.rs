//! Central finite-difference gradient checking. The numeric side only ever
//! re-runs forward passes, so it stays independent of every backward rule
//! it verifies. All checks run in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Tensor};
use crate::shape::Shape;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub rtol: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(name: impl Into<String>, max_rel_err: f64, rtol: f64) -> Self {
        CheckRow {
            name: name.into(),
            max_rel_err,
            rtol,
            pass: max_rel_err <= rtol,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn push(&mut self, row: CheckRow) {
        self.rows.push(row);
    }
}

/// |a - n| relative to the larger magnitude, floored to keep noise on
/// near-zero gradients from exploding the ratio.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n, floor))
        .fold(0.0, f64::max)
}

/// Deterministic values in [-1, 1] for inputs and probe vectors.
pub fn uniform_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduce an arbitrary op output to a scalar by a fixed random probe
/// (loss = sum(y * probe)); a plain sum would let elementwise errors
/// cancel across positions.
pub fn probe_loss(g: &mut Graph<f64>, y: Tensor, seed: u64) -> Result<Tensor> {
    let probe = uniform_vec(seed ^ 0x9e3779b97f4a7c15, y.shape().numel());
    let p = g.constant(probe, y.shape())?;
    let prod = g.mul(y, p)?;
    g.sum_all(prod)
}

/// Settings for one gradient comparison.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub h: f64,
    pub rtol: f64,
    pub floor: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            h: 1e-4,
            rtol: 1e-3,
            floor: 1e-6,
        }
    }
}

/// Compare analytic gradients of `build` against central differences for
/// every element of every input. `build` maps graph leaves to a scalar
/// loss; it runs once for the analytic side and 2*numel times numerically.
pub fn check_gradients(
    name: &str,
    inputs: &[(Vec<f64>, Shape)],
    settings: CheckSettings,
    build: impl Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
) -> Result<CheckRow> {
    let eval = |datasets: &[Vec<f64>]| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let leaves: Vec<Tensor> = datasets
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| g.leaf(d.clone(), *s))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &leaves)?;
        Ok(g.scalar_value(loss))
    };

    // analytic
    let mut g: Graph<f64> = Graph::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| g.leaf(d.clone(), *s))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| g.grad(*t).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.shape().numel()]))
        .collect();

    // numeric
    let base: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut worst = 0.0f64;
    for (i, (data, _)) in inputs.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = base.clone();
            plus[i][j] += settings.h;
            let mut minus = base.clone();
            minus[i][j] -= settings.h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * settings.h);
            worst = worst.max(rel_err(analytic[i][j], numeric, settings.floor));
        }
    }
    Ok(CheckRow::new(name, worst, settings.rtol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(0.0, 1e-9, 1e-6) < 1e-2);
        assert!(rel_err(1.0, 1.001, 1e-6) < 2e-3);
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        // negative control: a wrong backward rule must not slip through
        let numeric = vec![1.0, -0.5, 0.25];
        let corrupted: Vec<f64> = numeric.iter().map(|v| v * 1.05).collect();
        assert!(max_rel_err(&corrupted, &numeric, 1e-6) > 1e-3);
    }
}
