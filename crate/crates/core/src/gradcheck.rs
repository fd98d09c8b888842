//! Central finite-difference verification of the Q-network gradients.

use rand::Rng;

use crate::qnet::{backward, forward, init_params, NetworkConfig, QNetError, QNetworkParams};
use crate::rng::seeded_rng;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-4;
/// Acceptance threshold away from kinks and ties.
pub const TOLERANCE: f64 = 1e-5;
/// Threshold used when min/max ties are present in the input.
pub const TIE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// The probe loss `Σ_i w_i·q_i`.
fn probe_loss(params: &QNetworkParams, x: &[f64], probe: &[f64]) -> Result<f64, QNetError> {
    let (q, _) = forward(x, params)?;
    Ok(q.iter().zip(probe).map(|(q, w)| q * w).sum())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `gradient` against central differences on every parameter.
pub fn compare_gradient(
    params: &QNetworkParams,
    x: &[f64],
    probe: &[f64],
    gradient: &QNetworkParams,
) -> Result<GradCheckReport, QNetError> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut shifted = params.clone();
    for k in 0..params.values().len() {
        let orig = params.values()[k];
        shifted.values_mut()[k] = orig + STEP;
        let up = probe_loss(&shifted, x, probe)?;
        shifted.values_mut()[k] = orig - STEP;
        let down = probe_loss(&shifted, x, probe)?;
        shifted.values_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = gradient.values()[k];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || k == 0 {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: k,
                analytic,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Worst relative error of the analytic gradient over all parameters.
pub fn grad_check(
    params: &QNetworkParams,
    x: &[f64],
    probe: &[f64],
) -> Result<GradCheckReport, QNetError> {
    let (_, trace) = forward(x, params)?;
    let gradient = backward(params, &trace, probe)?;
    compare_gradient(params, x, probe, &gradient)
}

/// Random parameters, input in [-1, 1] and probe weights for one check.
pub fn random_case(config: &NetworkConfig, seed: u64) -> (QNetworkParams, Vec<f64>, Vec<f64>) {
    let params = init_params(config, seed);
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let x = (0..3 * config.item_count)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let probe = (0..config.item_count)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    (params, x, probe)
}

/// Smallest distance of any pre-activation from the ReLU kink and of any
/// pooled extremum from its runner-up among distinct rows.
pub fn kink_margin(params: &QNetworkParams, x: &[f64]) -> Result<f64, QNetError> {
    let (_, trace) = forward(x, params)?;
    let n = trace.n;
    let mut margin = trace
        .lf_pre
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    for c in 0..n {
        let col: Vec<(f64, &[f64])> = (0..trace.rows)
            .map(|i| (trace.lf[i * n + c], &x[3 * i..3 * i + 3]))
            .collect();
        for ext in [trace.gc.argmin[c], trace.gc.argmax[c]] {
            let v = col[ext].0;
            // a zero extremum sits on a ReLU kink, already covered above
            if v == 0.0 {
                continue;
            }
            for (w, r) in &col {
                if *r != col[ext].1 {
                    margin = margin.min((v - w).abs());
                }
            }
        }
    }
    Ok(margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_cases_agree() {
        let config = NetworkConfig {
            n_features: 8,
            item_count: 16,
            input_dim: 3,
        };
        for seed in 0..5 {
            let (p, x, w) = random_case(&config, seed);
            assert!(kink_margin(&p, &x).unwrap() > 1e-4);
            let r = grad_check(&p, &x, &w).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_detected() {
        let config = NetworkConfig {
            n_features: 4,
            item_count: 8,
            input_dim: 3,
        };
        let (p, x, w) = random_case(&config, 1);
        let (_, trace) = forward(&x, &p).unwrap();
        let mut g = backward(&p, &trace, &w).unwrap();
        let k = g.values().len() - 2;
        g.values_mut()[k] += 0.05 + 0.5 * g.values()[k].abs();
        let r = compare_gradient(&p, &x, &w, &g).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst_index, k);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }
}
