//! Central finite-difference checks of the analytic gradients.
//!
//! Errors are relative: `|a - f| / max(|a|, |f|, 1e-3)`, so entries whose true
//! gradient is near zero are compared on an absolute scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{batch_loss, Batch, LossForm};
use crate::matrix::Matrix;
use crate::s2dtw::{grad_wrt_embeddings, s2dtw, s2dtw_forward, s2dtw_forward_delta, s2dtw_backward, S2dtwParams, StageOrder};
use crate::seqcore::{FeatureSequence, Modality};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn central<F: Fn(f64) -> Result<f64>>(f: F, at: f64, h: f64) -> Result<f64> {
    Ok((f(at + h)? - f(at - h)?) / (2.0 * h))
}

/// Largest error between `M̂ = ∂cost/∂Δ` and finite differences of the cost.
/// `fault` flips the sign of the analytic gradient.
pub fn check_m_hat(delta: &Matrix, params: &S2dtwParams, h: f64, fault: bool) -> Result<f64> {
    let result = s2dtw_backward(s2dtw_forward_delta(delta, params)?)?;
    let analytic = result.m_hat()?;
    let sign = if fault { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for i in 0..delta.rows() {
        for j in 0..delta.cols() {
            let numeric = central(
                |v| {
                    let mut d = delta.clone();
                    d.set(i, j, v);
                    Ok(s2dtw_forward_delta(&d, params)?.cost)
                },
                delta.get(i, j),
                h,
            )?;
            worst = worst.max(relative_error(sign * analytic.get(i, j), numeric));
        }
    }
    Ok(worst)
}

fn perturbed(seq: &FeatureSequence, item: usize, coord: usize, v: f64) -> Result<FeatureSequence> {
    let mut items = seq.items().to_vec();
    items[item][coord] = v;
    FeatureSequence::new(items, seq.modality())
}

/// Largest error between the analytic gradient of the cost with respect to
/// every coordinate of `x` and `y` and finite differences.
pub fn check_embedding_grads(
    x: &FeatureSequence,
    y: &FeatureSequence,
    params: &S2dtwParams,
    h: f64,
    fault: bool,
) -> Result<f64> {
    let result = s2dtw(x, y, params)?;
    let (gx, gy) = grad_wrt_embeddings(&result, x, y)?;
    let sign = if fault { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for (seq, grads, is_x) in [(x, &gx, true), (y, &gy, false)] {
        for item in 0..seq.len() {
            for coord in 0..seq.dim() {
                let numeric = central(
                    |v| {
                        let p = perturbed(seq, item, coord, v)?;
                        let (a, b) = if is_x { (&p, y) } else { (x, &p) };
                        Ok(s2dtw_forward(a, b, params)?.cost)
                    },
                    seq.item(item)[coord],
                    h,
                )?;
                worst = worst.max(relative_error(sign * grads[item][coord], numeric));
            }
        }
    }
    Ok(worst)
}

/// Largest error between the batch loss gradients and finite differences.
pub fn check_batch_loss(batch: &Batch, params: &S2dtwParams, form: LossForm, h: f64, fault: bool) -> Result<f64> {
    let out = batch_loss(batch, params, form)?;
    let sign = if fault { -1.0 } else { 1.0 };
    let mut worst: f64 = 0.0;
    for k in 0..batch.len() {
        for side in 0..2 {
            let seq = if side == 0 { &batch.pairs[k].0 } else { &batch.pairs[k].1 };
            let grads = if side == 0 { &out.grads_x[k] } else { &out.grads_y[k] };
            for item in 0..seq.len() {
                for coord in 0..seq.dim() {
                    let numeric = central(
                        |v| {
                            let mut b = batch.clone();
                            let p = perturbed(seq, item, coord, v)?;
                            if side == 0 {
                                b.pairs[k].0 = p;
                            } else {
                                b.pairs[k].1 = p;
                            }
                            Ok(batch_loss(&b, params, form)?.loss)
                        },
                        seq.item(item)[coord],
                        h,
                    )?;
                    worst = worst.max(relative_error(sign * grads[item][coord], numeric));
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub trials: usize,
    /// Largest number of clips and captions drawn per trial.
    pub max_len: usize,
    pub dim: usize,
    pub gammas: Vec<f64>,
    pub orders: Vec<StageOrder>,
    pub dummy_cost: f64,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Deliberately flip the analytic gradient's sign to confirm the check can fail.
    pub fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: 100,
            max_len: 5,
            dim: 3,
            gammas: vec![0.1, 1.0],
            orders: vec![StageOrder::SmoothFirst, StageOrder::MergeFirst],
            dummy_cost: 0.5,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub max_error_m_hat: f64,
    pub max_error_embeddings: f64,
    pub passed: bool,
}

fn random_sequence<R: Rng + ?Sized>(rng: &mut R, len: usize, dim: usize, modality: Modality) -> Result<FeatureSequence> {
    let items = (0..len)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    FeatureSequence::new(items, modality)
}

/// Random instances cycling through every `(γ, order)` combination.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    if config.max_len == 0 || config.dim == 0 || config.gammas.is_empty() || config.orders.is_empty() {
        return Err(Error::Argument("sizes, gammas and orders must be non-empty".into()));
    }
    if !(config.step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {}", config.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let combos: Vec<(f64, StageOrder)> = config
        .gammas
        .iter()
        .flat_map(|&g| config.orders.iter().map(move |&o| (g, o)))
        .collect();
    let mut max_m: f64 = 0.0;
    let mut max_e: f64 = 0.0;
    for t in 0..config.trials {
        let (gamma, order) = combos[t % combos.len()];
        let params = S2dtwParams {
            gamma,
            dummy_cost: config.dummy_cost,
            order,
            ..S2dtwParams::default()
        };
        let n = rng.random_range(1..=config.max_len);
        let m = rng.random_range(1..=config.max_len);
        let x = random_sequence(&mut rng, n, config.dim, Modality::Clip)?;
        let y = random_sequence(&mut rng, m, config.dim, Modality::Caption)?;
        let delta = s2dtw_forward(&x, &y, &params)?.delta;
        max_m = max_m.max(check_m_hat(&delta, &params, config.step, config.fault)?);
        max_e = max_e.max(check_embedding_grads(&x, &y, &params, config.step, config.fault)?);
    }
    Ok(GradcheckReport {
        config: config.clone(),
        max_error_m_hat: max_m,
        max_error_embeddings: max_e,
        passed: max_m <= config.tolerance && max_e <= config.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn default_run_passes() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 12,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn sign_fault_is_caught() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 4,
            fault: true,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn zero_trials_rejected() {
        let cfg = GradcheckConfig {
            trials: 0,
            ..GradcheckConfig::default()
        };
        assert!(matches!(run_gradcheck(&cfg), Err(Error::Argument(_))));
    }
}
