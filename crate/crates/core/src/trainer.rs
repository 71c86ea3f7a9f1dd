//! Training driver: preprocessing, σ schedule, and repeated L-BFGS runs.

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::full_gradient;
use crate::error::{Error, Result};
use crate::flow::{forward_pass, TrajectoryCache};
use crate::objective::{train_mse, ObjectiveBreakdown};
use crate::optimizer::{minimize, FlatLayout, MinimizeReport, OptimizerConfig, Termination};
use crate::points::Points;
use crate::preprocess::{
    anchors_first, estimate_sigma, select_subset, standardize, SigmaEstimate, Standardization,
};
use crate::sequence::{init_params, ModelParams, SequenceSpec};

/// Anchor count: every training point, or a fixed number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSize {
    #[default]
    All,
    Count(usize),
}

impl SubsetSize {
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            SubsetSize::All => Ok(n),
            SubsetSize::Count(k) if k >= 1 && k <= n => Ok(k),
            SubsetSize::Count(k) => Err(Error::invalid(format!(
                "n_subset = {k} must lie in 1..={n}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_sigma_loops: usize,
    /// Factor applied to `σ²` after a loop misses the MSE target.
    pub sigma_decay: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub n_subset: SubsetSize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_sigma_loops: 20,
            sigma_decay: 0.5,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            n_subset: SubsetSize::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sigma_loops == 0 {
            return Err(Error::invalid("max_sigma_loops must be at least 1"));
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay < 1.0) {
            return Err(Error::invalid(format!(
                "sigma_decay must lie in (0, 1), got {}",
                self.sigma_decay
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub sigma_sq: f64,
    pub objective: ObjectiveBreakdown,
    pub train_mse: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub sigma: SigmaEstimate,
    /// `max(σ²_MSE, 0.01)`.
    pub target_mse: f64,
    /// σ loops followed by the final loop.
    pub loops: Vec<LoopRecord>,
    pub reached_target: bool,
    pub final_train_mse: f64,
    pub final_objective: ObjectiveBreakdown,
    /// Training-row indices of the anchors, in anchor order.
    pub anchor_indices: Vec<usize>,
    /// Objective/gradient evaluations and the wall time spent in them.
    pub gradient_evaluations: usize,
    pub gradient_seconds: f64,
}

impl TrainReport {
    pub fn minimize_calls(&self) -> usize {
        self.loops.len()
    }
}

/// Everything needed to predict.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: SequenceSpec,
    pub params: ModelParams,
    pub cache: TrajectoryCache,
    pub standardization: Standardization,
    pub sigma_sq: f64,
    pub n_subset: usize,
    pub seed: u64,
    pub report: TrainReport,
}

/// The objective over flattened parameters for a fixed dataset and σ.
pub struct TrainingProblem<'a> {
    pub spec: &'a SequenceSpec,
    pub inputs: &'a Points,
    pub targets: &'a Points,
    pub n_subset: usize,
    pub sigma_sq: f64,
    pub layout: FlatLayout,
    evaluations: Cell<usize>,
    seconds: Cell<f64>,
}

impl<'a> TrainingProblem<'a> {
    pub fn new(
        spec: &'a SequenceSpec,
        inputs: &'a Points,
        targets: &'a Points,
        n_subset: usize,
        sigma_sq: f64,
    ) -> Self {
        TrainingProblem {
            spec,
            inputs,
            targets,
            n_subset,
            sigma_sq,
            layout: FlatLayout::for_spec(spec, n_subset),
            evaluations: Cell::new(0),
            seconds: Cell::new(0.0),
        }
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let start = Instant::now();
        let params = self.layout.unflatten(x)?;
        let result = full_gradient(self.spec, &params, self.inputs, self.targets, self.n_subset, self.sigma_sq);
        self.seconds.set(self.seconds.get() + start.elapsed().as_secs_f64());
        self.evaluations.set(self.evaluations.get() + 1);
        let (value, grad) = result?;
        let mut g = Vec::new();
        self.layout.flatten_into(&grad.params, &mut g);
        Ok((value.total, g))
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }

    pub fn seconds(&self) -> f64 {
        self.seconds.get()
    }

    pub fn minimize(&self, start: &ModelParams, cfg: &OptimizerConfig) -> Result<(ModelParams, MinimizeReport)> {
        let mut x0 = Vec::new();
        self.layout.flatten_into(start, &mut x0);
        let (x, _, report) = minimize(|x| self.value_and_gradient(x), x0, cfg)?;
        Ok((self.layout.unflatten(&x)?, report))
    }
}

/// Parameters carried into the next optimization unchanged.
pub fn warm_start(prev: &ModelParams) -> ModelParams {
    prev.clone()
}

pub fn train(spec: &SequenceSpec, train_x: &Points, train_y: &Points, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    spec.validate()?;
    if train_x.dim() != spec.x_dim {
        return Err(Error::dims("training predictors", spec.x_dim, train_x.dim()));
    }
    if train_y.dim() != spec.y_dim {
        return Err(Error::dims("training responses", spec.y_dim, train_y.dim()));
    }
    let (ds, _) = standardize(train_x, train_y, None, spec.pad, cfg.seed)?;
    let sigma = estimate_sigma(&ds)?;
    let n = ds.len();
    let n_subset = cfg.n_subset.resolve(n)?;
    let anchors: Vec<usize> = if n_subset == n {
        (0..n).collect()
    } else {
        select_subset(&ds.x, n_subset, cfg.seed.wrapping_add(1))?
    };
    let ds = ds.reorder(&anchors_first(n, &anchors));
    let mut params = init_params(spec, n_subset, cfg.seed)?;
    let target_mse = sigma.sigma_mse_sq.max(0.01);
    log::info!(
        "event=setup n={n} n_subset={n_subset} k={} sigma_mse_sq={:e} sigma_sq_init={:e} target_mse={:e}",
        sigma.k,
        sigma.sigma_mse_sq,
        sigma.sigma_sq_init,
        target_mse
    );

    let mut loops = Vec::new();
    let mut evaluations = 0;
    let mut seconds = 0.0;
    let mut sigma_sq = sigma.sigma_sq_init;
    let mut reached = false;
    let mut run = |label: &str, index: usize, sigma_sq: f64, start: &ModelParams| -> Result<(ModelParams, LoopRecord)> {
        let problem = TrainingProblem::new(spec, &ds.x, &ds.y, n_subset, sigma_sq);
        let outcome = problem.minimize(start, &cfg.optimizer);
        evaluations += problem.evaluations();
        seconds += problem.seconds();
        let (p, rep) = outcome.map_err(|e| match e {
            Error::Optimizer(msg) => Error::Optimizer(format!("{label} loop {index} (sigma^2 = {sigma_sq:e}): {msg}")),
            other => other,
        })?;
        let fwd = forward_pass(spec, &p, &ds.x, n_subset)?;
        let objective = crate::objective::evaluate(spec, &p, &fwd, &ds.y, sigma_sq)?;
        let mse = train_mse(&fwd.output, &ds.raw_y, &ds.standardization)?;
        log::info!(
            "event={label} loop={index} sigma_sq={sigma_sq:e} running={:e} affine={:e} endpoint={:e} total={:e} train_mse={mse:e} iterations={} evaluations={} termination={:?}",
            objective.running,
            objective.affine,
            objective.endpoint,
            objective.total,
            rep.iterations,
            rep.evaluations,
            rep.termination
        );
        Ok((
            p,
            LoopRecord {
                sigma_sq,
                objective,
                train_mse: mse,
                iterations: rep.iterations,
                evaluations: rep.evaluations,
                termination: rep.termination,
            },
        ))
    };
    for index in 0..cfg.max_sigma_loops {
        let (p, rec) = run("sigma_loop", index, sigma_sq, &params)?;
        params = warm_start(&p);
        let mse = rec.train_mse;
        loops.push(rec);
        if mse < target_mse {
            reached = true;
            break;
        }
        sigma_sq *= cfg.sigma_decay;
    }
    let (p, rec) = run("final_loop", loops.len(), sigma_sq, &params)?;
    params = p;
    let final_train_mse = rec.train_mse;
    let final_objective = rec.objective;
    loops.push(rec);

    let fwd = forward_pass(spec, &params, &ds.x, n_subset)?;
    Ok(TrainedModel {
        spec: spec.clone(),
        params,
        cache: fwd.cache(),
        standardization: ds.standardization,
        sigma_sq,
        n_subset,
        seed: cfg.seed,
        report: TrainReport {
            sigma,
            target_mse,
            loops,
            reached_target: reached,
            final_train_mse,
            final_objective,
            anchor_indices: anchors,
            gradient_evaluations: evaluations,
            gradient_seconds: seconds,
        },
    })
}
