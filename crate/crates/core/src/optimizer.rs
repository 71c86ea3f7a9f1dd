//! L-BFGS with a strong-Wolfe line search, plus the flat parameter layout the
//! optimizer works on.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::dot;
use crate::sequence::{AffineParams, ControlField, ModelParams, ModuleParams, ModuleSpec, SequenceSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once `max_i |∂f/∂x_i|` falls below this.
    pub grad_tol: f64,
    /// Stop once an iteration lowers `f` by less than this fraction.
    pub obj_rel_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Function evaluations allowed per line search.
    pub max_linesearch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            memory: 10,
            max_iters: 5000,
            grad_tol: 1e-6,
            obj_rel_tol: 1e-10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_linesearch: 40,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::invalid("optimizer.memory must be at least 1"));
        }
        if self.max_linesearch == 0 {
            return Err(Error::invalid("optimizer.max_linesearch must be at least 1"));
        }
        if !(self.wolfe_c1 > 0.0 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::invalid(format!(
                "optimizer Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol > 0.0 && self.obj_rel_tol > 0.0) {
            return Err(Error::invalid("optimizer tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    /// No acceptable step even from steepest descent; the best iterate is returned.
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub initial_value: f64,
    pub final_value: f64,
    pub final_grad_inf: f64,
    /// Objective after each accepted step.
    #[serde(skip)]
    pub history: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    phi0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> LineSearch<'_, F> {
    /// Evaluates `φ(α)`; numerical failures come back as `f = +∞`.
    fn eval(&mut self, alpha: f64) -> Result<Trial> {
        self.evals += 1;
        let x: Vec<f64> = self.x.iter().zip(self.d).map(|(xi, di)| xi + alpha * di).collect();
        let (f, g) = match (self.f)(&x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
            Ok(_) => (f64::INFINITY, Vec::new()),
            Err(e) if e.is_numerical() => (f64::INFINITY, Vec::new()),
            Err(e) => return Err(e),
        };
        let dphi = if f.is_finite() { dot(&g, self.d) } else { f64::NAN };
        Ok(Trial { alpha, x, f, g, dphi })
    }

    fn armijo_fails(&self, t: &Trial) -> bool {
        !(t.f <= self.phi0 + self.c1 * t.alpha * self.dphi0)
    }

    fn curvature_holds(&self, t: &Trial) -> bool {
        t.dphi.abs() <= -self.c2 * self.dphi0
    }

    fn run(&mut self, alpha0: f64) -> Result<Option<Trial>> {
        let mut prev = Trial {
            alpha: 0.0,
            x: Vec::new(),
            f: self.phi0,
            g: Vec::new(),
            dphi: self.dphi0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.budget {
            let t = self.eval(alpha)?;
            if self.armijo_fails(&t) || (!first && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature_holds(&t) {
                return Ok(Some(t));
            }
            if t.dphi >= 0.0 {
                return self.zoom(t, prev);
            }
            alpha = 2.0 * t.alpha;
            prev = t;
            first = false;
        }
        Ok(None)
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Result<Option<Trial>> {
        while self.evals < self.budget {
            let (a, b) = (lo.alpha, hi.alpha);
            let width = (b - a).abs();
            if width <= f64::EPSILON * a.abs().max(b.abs()) {
                return Ok(None);
            }
            let mut alpha = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
            let (left, right) = (a.min(b), a.max(b));
            if !(alpha > left + 0.1 * width && alpha < right - 0.1 * width) {
                alpha = 0.5 * (a + b);
            }
            let t = self.eval(alpha)?;
            if self.armijo_fails(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature_holds(&t) {
                    return Ok(Some(t));
                }
                if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = std::mem::replace(&mut lo, t);
                } else {
                    lo = t;
                }
            }
        }
        Ok(None)
    }
}

/// Minimizer of the cubic matching values and slopes at both ends.
fn cubic_min(p: &Trial, q: &Trial) -> Option<f64> {
    if !(p.f.is_finite() && q.f.is_finite() && p.dphi.is_finite() && q.dphi.is_finite()) {
        return None;
    }
    let d1 = p.dphi + q.dphi - 3.0 * (p.f - q.f) / (p.alpha - q.alpha);
    let disc = d1 * d1 - p.dphi * q.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (q.alpha - p.alpha).signum() * disc.sqrt();
    let alpha = q.alpha - (q.alpha - p.alpha) * (q.dphi + d2 - d1) / (q.dphi - p.dphi + 2.0 * d2);
    alpha.is_finite().then_some(alpha)
}

/// Two-loop recursion: `-H g`.
fn lbfgs_direction(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn steepest(g: &[f64]) -> Vec<f64> {
    let norm = dot(g, g).sqrt();
    g.iter().map(|v| -v / norm).collect()
}

/// Minimizes `f` from `x0`. The callback returns the value and gradient.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &OptimizerConfig) -> Result<(Vec<f64>, f64, MinimizeReport)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Optimizer("initial point is not finite".into()));
    }
    let (mut fx, mut g) = f(&x0)?;
    if g.len() != x0.len() {
        return Err(Error::dims("gradient length", x0.len(), g.len()));
    }
    if !fx.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite objective or gradient at the initial point (f = {fx})")));
    }
    let mut x = x0;
    let mut report = MinimizeReport {
        iterations: 0,
        evaluations: 1,
        termination: Termination::MaxIterations,
        initial_value: fx,
        final_value: fx,
        final_grad_inf: inf_norm(&g),
        history: Vec::new(),
    };
    if report.final_grad_inf < cfg.grad_tol {
        report.termination = Termination::GradientTolerance;
        return Ok((x, fx, report));
    }
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    while report.iterations < cfg.max_iters {
        let mut d = if history.is_empty() {
            steepest(&g)
        } else {
            lbfgs_direction(&g, &history)
        };
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) {
            history.clear();
            d = steepest(&g);
            dphi0 = dot(&g, &d);
        }
        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            d: &d,
            phi0: fx,
            dphi0,
            c1: cfg.wolfe_c1,
            c2: cfg.wolfe_c2,
            budget: cfg.max_linesearch,
            evals: 0,
        };
        let found = ls.run(1.0)?;
        report.evaluations += ls.evals;
        let Some(t) = found else {
            if history.is_empty() {
                report.termination = Termination::LineSearchFailed;
                log::warn!(
                    "line search failed after {} iterations; returning the best iterate (f = {fx})",
                    report.iterations
                );
                break;
            }
            history.clear();
            continue;
        };
        debug_assert!(t.f <= fx + cfg.wolfe_c1 * t.alpha * dphi0);
        debug_assert!(t.dphi.abs() <= -cfg.wolfe_c2 * dphi0);
        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 0.0 && dot(&y, &y) > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - t.f;
        let scale = fx.abs().max(t.f.abs()).max(1.0);
        x = t.x;
        fx = t.f;
        g = t.g;
        report.iterations += 1;
        report.history.push(fx);
        if inf_norm(&g) < cfg.grad_tol {
            report.termination = Termination::GradientTolerance;
            break;
        }
        if decrease <= cfg.obj_rel_tol * scale {
            report.termination = Termination::ObjectiveTolerance;
            break;
        }
    }
    report.final_value = fx;
    report.final_grad_inf = inf_norm(&g);
    Ok((x, fx, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Controls,
    Matrix,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub module: usize,
    pub class: ParamClass,
    pub offset: usize,
    pub len: usize,
}

/// Offsets of every parameter block inside the flat vector. Blocks follow
/// module order; affine modules store `M` (row-major) before `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatLayout {
    pub segments: Vec<Segment>,
    /// Shape of each module: `(in, out)` for affine, `(steps, anchors, dim)` flattened.
    shapes: Vec<(bool, usize, usize, usize)>,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatVector {
    pub values: Vec<f64>,
    pub layout: FlatLayout,
}

impl FlatLayout {
    pub fn of(params: &ModelParams) -> FlatLayout {
        let mut segments = Vec::new();
        let mut shapes = Vec::new();
        let mut offset = 0;
        for (q, m) in params.modules.iter().enumerate() {
            match m {
                ModuleParams::Affine(a) => {
                    segments.push(Segment { module: q, class: ParamClass::Matrix, offset, len: a.m.len() });
                    offset += a.m.len();
                    segments.push(Segment { module: q, class: ParamClass::Bias, offset, len: a.b.len() });
                    offset += a.b.len();
                    shapes.push((false, a.in_dim, a.out_dim, 0));
                }
                ModuleParams::Diffeo(c) => {
                    segments.push(Segment { module: q, class: ParamClass::Controls, offset, len: c.data.len() });
                    offset += c.data.len();
                    shapes.push((true, c.steps, c.anchors, c.dim));
                }
            }
        }
        FlatLayout { segments, shapes, len: offset }
    }

    /// Layout implied by a spec and anchor count.
    pub fn for_spec(spec: &SequenceSpec, n_subset: usize) -> FlatLayout {
        let params = ModelParams {
            modules: spec
                .modules
                .iter()
                .map(|m| match m {
                    ModuleSpec::Affine { in_dim, out_dim, .. } => {
                        ModuleParams::Affine(AffineParams::zeros(*in_dim, *out_dim))
                    }
                    ModuleSpec::Diffeo { dim, steps, .. } => {
                        ModuleParams::Diffeo(ControlField::zeros(*steps, n_subset, *dim))
                    }
                })
                .collect(),
        };
        FlatLayout::of(&params)
    }

    pub fn flatten_into(&self, params: &ModelParams, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(self.len);
        for m in &params.modules {
            match m {
                ModuleParams::Affine(a) => {
                    out.extend_from_slice(&a.m);
                    out.extend_from_slice(&a.b);
                }
                ModuleParams::Diffeo(c) => out.extend_from_slice(&c.data),
            }
        }
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<ModelParams> {
        if values.len() != self.len {
            return Err(Error::dims("flat parameter vector", self.len, values.len()));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = values[pos..pos + n].to_vec();
            pos += n;
            s
        };
        let modules = self
            .shapes
            .iter()
            .map(|&(diffeo, a, b, c)| {
                if diffeo {
                    ModuleParams::Diffeo(ControlField { steps: a, anchors: b, dim: c, data: take(a * b * c) })
                } else {
                    let m = take(a * b);
                    ModuleParams::Affine(AffineParams { in_dim: a, out_dim: b, m, b: take(b) })
                }
            })
            .collect();
        Ok(ModelParams { modules })
    }
}

pub fn flatten(params: &ModelParams) -> FlatVector {
    let layout = FlatLayout::of(params);
    let mut values = Vec::new();
    layout.flatten_into(params, &mut values);
    FlatVector { values, layout }
}

/// Rebuilds parameters, checking the layout against `spec`.
pub fn unflatten(flat: &FlatVector, spec: &SequenceSpec, n_subset: usize) -> Result<ModelParams> {
    if flat.layout != FlatLayout::for_spec(spec, n_subset) {
        return Err(Error::invalid("flat vector layout does not match the sequence"));
    }
    flat.layout.unflatten(&flat.values)
}
