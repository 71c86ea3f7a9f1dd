//! The discretized training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ForwardStates;
use crate::points::Points;
use crate::preprocess::Standardization;
use crate::sequence::{affine_cost, ModelParams, SequenceSpec};

/// Objective split into its three terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// Kernel running cost over anchor pairs.
    pub running: f64,
    /// `λ Σ U_q`.
    pub affine: f64,
    /// `(1/σ²) Σ_k ‖y_k - π_r ζ_k‖²`.
    pub endpoint: f64,
    pub total: f64,
}

/// `Σ_k ‖y_k - π_r ζ_k‖²`.
pub(crate) fn squared_error(outputs: &Points, targets: &Points) -> f64 {
    let dy = targets.dim();
    let mut s = 0.0;
    for (z, y) in outputs.rows().zip(targets.rows()) {
        for j in 0..dy {
            let e = y[j] - z[j];
            s += e * e;
        }
    }
    s
}

pub fn evaluate(
    spec: &SequenceSpec,
    params: &ModelParams,
    forward: &ForwardStates,
    targets: &Points,
    sigma_sq: f64,
) -> Result<ObjectiveBreakdown> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(Error::invalid(format!("sigma^2 must be positive, got {sigma_sq}")));
    }
    if targets.len() != forward.output.len() {
        return Err(Error::dims("target rows", forward.output.len(), targets.len()));
    }
    if targets.dim() != spec.y_dim {
        return Err(Error::dims("target width", spec.y_dim, targets.dim()));
    }
    let running = forward.running;
    let affine = affine_cost(spec, params);
    let endpoint = squared_error(&forward.output, targets) / sigma_sq;
    Ok(ObjectiveBreakdown {
        running,
        affine,
        endpoint,
        total: running + affine + endpoint,
    })
}

/// Mean over points of the squared error in original response units.
pub fn train_mse(outputs: &Points, raw_targets: &Points, standardization: &Standardization) -> Result<f64> {
    if outputs.len() != raw_targets.len() {
        return Err(Error::dims("training rows", raw_targets.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("no training points"));
    }
    let pred = standardization.unstandardize_y(outputs)?;
    Ok(squared_error(&pred, raw_targets) / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::forward_pass;
    use crate::sequence::{init_params, parse_sequence, ModuleParams, SequenceOverrides};

    fn stdz(mu: f64, sigma: f64) -> Standardization {
        Standardization {
            mu_x: vec![0.0],
            sigma_x: vec![1.0],
            mu_y: vec![mu],
            sigma_y: vec![sigma],
            pad: 0,
        }
    }

    #[test]
    fn mse_examples() {
        let z = Points::from_rows(&[[0.0], [0.0]]).unwrap();
        let y = Points::from_rows(&[[5.0], [5.0]]).unwrap();
        assert_eq!(train_mse(&z, &y, &stdz(5.0, 2.0)).unwrap(), 0.0);
        let z = Points::from_rows(&[[3.0]]).unwrap();
        let y = Points::from_rows(&[[1.0]]).unwrap();
        assert_eq!(train_mse(&z, &y, &stdz(0.0, 1.0)).unwrap(), 4.0);
        assert_eq!(train_mse(&y, &y, &stdz(0.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn single_anchor_running_cost() {
        let o = SequenceOverrides {
            pad: Some(0),
            steps: Some(1),
            ..Default::default()
        };
        let spec = parse_sequence("DA", 1, 1, &o).unwrap();
        let mut params = init_params(&spec, 1, 0).unwrap();
        if let ModuleParams::Diffeo(c) = &mut params.modules[0] {
            c.data[0] = 0.6;
        }
        let x = Points::from_rows(&[[-3.5]]).unwrap();
        let fwd = forward_pass(&spec, &params, &x, 1).unwrap();
        let y = Points::from_rows(&[[0.0]]).unwrap();
        let b = evaluate(&spec, &params, &fwd, &y, 1.0).unwrap();
        assert_eq!(b.running, 0.6 * 0.6);
        assert_eq!(b.total, b.running + b.affine + b.endpoint);
    }

    #[test]
    fn zero_model_endpoint() {
        let spec = parse_sequence("ADA", 2, 1, &SequenceOverrides::default()).unwrap();
        let params = crate::sequence::ModelParams {
            modules: init_params(&spec, 3, 0).unwrap().zeros_like().modules,
        };
        let x = Points::from_rows(&[[1.0, 2.0, 0.0], [0.5, -1.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let y = Points::from_rows(&[[1.0], [-2.0], [0.5]]).unwrap();
        let fwd = forward_pass(&spec, &params, &x, 3).unwrap();
        let b = evaluate(&spec, &params, &fwd, &y, 0.5).unwrap();
        assert_eq!(b.running, 0.0);
        assert_eq!(b.affine, 0.0);
        assert_eq!(b.endpoint, (1.0 + 4.0 + 0.25) / 0.5);
        assert!(evaluate(&spec, &params, &fwd, &y, 0.0).is_err());
    }
}
