//! Reverse sweep through the discretized model.
//!
//! Costates follow the sign convention `p = -∂G/∂z`, so the endpoint costate
//! points from the prediction towards the target. Gradients are returned as
//! plain `∂G/∂θ`.
//!
//! For one Euler step `z' = z + dt Σ_{l<N_S} K(z, z_l) a_l` with running cost
//! `dt Σ_{k,l<N_S} a_k·K_kl a_l`, the costate recursion is
//!
//! ```text
//! p_i[k] = p_{i+1}[k] + dt Σ_l ∇₁K(z_k, z_l) w_kl
//! w_kl = p_k·a_l + a_k·p_l - 2 a_k·a_l    (k, l anchors)
//!      = a_k·p_l                          (k anchor, l passenger)
//!      = p_k·a_l                          (k passenger, l anchor)
//! ```
//!
//! and the control gradient is
//! `∂G/∂a_k(i) = dt [Σ_{l<N_S} K_kl (2 a_l - p_l) - Σ_{l≥N_S} K_kl p_l]`,
//! with every costate taken at `i + 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{forward_pass, ForwardStates, ModuleStates};
use crate::kernels::{pair_terms, KernelConfig};
use crate::objective::{evaluate, ObjectiveBreakdown};
use crate::points::{dot, Points};
use crate::sequence::{
    affine_cost_grad, AffineParams, ControlField, ModelParams, ModuleParams, ModuleSpec,
    SequenceSpec,
};

/// Costates recorded during a reverse sweep.
#[derive(Clone, Debug)]
pub struct CostateBundle {
    /// `boundary[q]` is the costate at the input of module `q`; the last entry
    /// is the endpoint costate.
    pub boundary: Vec<Points>,
    /// `p[i]` for `i = 0..=T` for every diffeomorphic module.
    pub flows: Vec<Option<Vec<Points>>>,
}

/// `∂G/∂θ`, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub params: ModelParams,
}

fn module_finite(m: &ModuleParams) -> bool {
    match m {
        ModuleParams::Affine(a) => a.m.iter().chain(&a.b).all(|v| v.is_finite()),
        ModuleParams::Diffeo(c) => c.data.iter().all(|v| v.is_finite()),
    }
}

impl GradientBundle {
    pub fn all_finite(&self) -> bool {
        self.params.modules.iter().all(module_finite)
    }
}

/// `ρ_k = (2/σ²) ι_r(y_k - π_r ζ_k)`.
pub fn endpoint_costate(outputs: &Points, targets: &Points, sigma_sq: f64) -> Result<Points> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(Error::invalid(format!("sigma^2 must be positive, got {sigma_sq}")));
    }
    if outputs.len() != targets.len() {
        return Err(Error::dims("endpoint rows", targets.len(), outputs.len()));
    }
    let dy = targets.dim();
    if outputs.dim() < dy {
        return Err(Error::dims("endpoint width", dy, outputs.dim()));
    }
    let c = 2.0 / sigma_sq;
    let mut rho = Points::zeros(outputs.len(), outputs.dim());
    for k in 0..outputs.len() {
        let z = outputs.row(k);
        let y = targets.row(k);
        let r = rho.row_mut(k);
        for j in 0..dy {
            r[j] = c * (y[j] - z[j]);
        }
    }
    Ok(rho)
}

/// Gradient of one affine module and the costate at its input.
fn affine_backward(
    a: &AffineParams,
    input: &Points,
    rho: &Points,
    cost_grad: &[f64],
) -> (AffineParams, Points) {
    let (din, dout) = (a.in_dim, a.out_dim);
    let mut s = vec![0.0; din * dout];
    let mut sb = vec![0.0; dout];
    for (x, r) in input.rows().zip(rho.rows()) {
        for i in 0..dout {
            sb[i] += r[i];
            for j in 0..din {
                s[i * din + j] += r[i] * x[j];
            }
        }
    }
    let m: Vec<f64> = cost_grad.iter().zip(&s).map(|(u, v)| u - v).collect();
    let b: Vec<f64> = sb.iter().map(|v| -v).collect();
    let mut eta = Points::zeros(rho.len(), din);
    eta.as_mut_slice()
        .par_chunks_mut(din)
        .zip(rho.as_slice().par_chunks(dout))
        .for_each(|(e, r)| {
            for i in 0..dout {
                let row = &a.m[i * din..(i + 1) * din];
                for j in 0..din {
                    e[j] += row[j] * r[i];
                }
            }
        });
    (
        AffineParams {
            in_dim: din,
            out_dim: dout,
            m,
            b,
        },
        eta,
    )
}

/// One reverse Euler step. Returns `p_i` and `∂G/∂a(i)` (anchors × dim).
fn flow_step_backward(
    inv_w: f64,
    inv_w_sq: f64,
    dt: f64,
    z: &Points,
    p_next: &Points,
    a: &[f64],
    ns: usize,
) -> (Points, Vec<f64>) {
    let n = z.len();
    let d = z.dim();
    let zs = z.as_slice();
    let ps = p_next.as_slice();
    let mut buf = vec![0.0; n * 2 * d];
    buf.par_chunks_mut(2 * d).enumerate().for_each(|(k, out)| {
        let (acc_p, acc_a) = out.split_at_mut(d);
        let zk = &zs[k * d..(k + 1) * d];
        let pk = &ps[k * d..(k + 1) * d];
        if k < ns {
            let ak = &a[k * d..(k + 1) * d];
            for l in 0..n {
                let zl = &zs[l * d..(l + 1) * d];
                let pl = &ps[l * d..(l + 1) * d];
                let (kv, gc) = pair_terms(inv_w, inv_w_sq, zk, zl);
                let w = if l < ns {
                    let al = &a[l * d..(l + 1) * d];
                    for j in 0..d {
                        acc_a[j] += kv * (2.0 * al[j] - pl[j]);
                    }
                    dot(pk, al) + dot(ak, pl) - 2.0 * dot(ak, al)
                } else {
                    for j in 0..d {
                        acc_a[j] -= kv * pl[j];
                    }
                    dot(ak, pl)
                };
                let c = gc * w;
                for j in 0..d {
                    acc_p[j] += c * (zk[j] - zl[j]);
                }
            }
        } else {
            for l in 0..ns {
                let zl = &zs[l * d..(l + 1) * d];
                let al = &a[l * d..(l + 1) * d];
                let (_, gc) = pair_terms(inv_w, inv_w_sq, zk, zl);
                let c = gc * dot(pk, al);
                for j in 0..d {
                    acc_p[j] += c * (zk[j] - zl[j]);
                }
            }
        }
        for j in 0..d {
            acc_p[j] = pk[j] + dt * acc_p[j];
            acc_a[j] *= dt;
        }
    });
    let mut p = Vec::with_capacity(n * d);
    let mut grad = Vec::with_capacity(ns * d);
    for (k, row) in buf.chunks_exact(2 * d).enumerate() {
        p.extend_from_slice(&row[..d]);
        if k < ns {
            grad.extend_from_slice(&row[d..]);
        }
    }
    (Points::from_vec(n, d, p).expect("layout"), grad)
}

fn flow_backward(
    kernel: &KernelConfig,
    controls: &ControlField,
    trajectory: &[Points],
    p_end: Points,
    keep: bool,
) -> (ControlField, Points, Option<Vec<Points>>) {
    let inv_w = 1.0 / kernel.width();
    let inv_w_sq = inv_w * inv_w;
    let steps = controls.steps;
    let dt = 1.0 / steps as f64;
    let ns = controls.anchors;
    let mut grad = ControlField::zeros(steps, ns, controls.dim);
    let mut kept = keep.then(|| vec![Points::zeros(0, 0); steps + 1]);
    let mut p = p_end;
    for i in (0..steps).rev() {
        let (p_i, g) = flow_step_backward(inv_w, inv_w_sq, dt, &trajectory[i], &p, controls.step(i), ns);
        grad.step_mut(i).copy_from_slice(&g);
        let prev = std::mem::replace(&mut p, p_i);
        if let Some(k) = kept.as_mut() {
            k[i + 1] = prev;
        }
    }
    if let Some(k) = kept.as_mut() {
        k[0] = p.clone();
    }
    (grad, p, kept)
}

fn sweep(
    spec: &SequenceSpec,
    params: &ModelParams,
    forward: &ForwardStates,
    targets: &Points,
    sigma_sq: f64,
    keep: bool,
) -> Result<(Option<CostateBundle>, GradientBundle)> {
    if forward.modules.len() != spec.modules.len() || params.modules.len() != spec.modules.len() {
        return Err(Error::dims(
            "forward states",
            spec.modules.len(),
            forward.modules.len(),
        ));
    }
    if targets.dim() != spec.y_dim {
        return Err(Error::dims("target width", spec.y_dim, targets.dim()));
    }
    let cost_grads = affine_cost_grad(spec, params);
    let mut rho = endpoint_costate(&forward.output, targets, sigma_sq)?;
    let m = spec.modules.len();
    let mut boundary: Vec<Points> = vec![Points::zeros(0, 0); m + 1];
    let mut flows: Vec<Option<Vec<Points>>> = vec![None; m];
    if keep {
        boundary[m] = rho.clone();
    }
    let mut grads: Vec<Option<ModuleParams>> = vec![None; m];
    for q in (0..m).rev() {
        let (g, next) = match (&spec.modules[q], &params.modules[q], &forward.modules[q]) {
            (ModuleSpec::Affine { .. }, ModuleParams::Affine(a), ModuleStates::Affine { input }) => {
                let (g, eta) = affine_backward(a, input, &rho, &cost_grads[q]);
                (ModuleParams::Affine(g), eta)
            }
            (
                ModuleSpec::Diffeo { kernel, .. },
                ModuleParams::Diffeo(c),
                ModuleStates::Diffeo { trajectory },
            ) => {
                let (g, p0, kept) = flow_backward(kernel, c, trajectory, rho, keep);
                flows[q] = kept;
                (ModuleParams::Diffeo(g), p0)
            }
            _ => {
                return Err(Error::invalid(format!(
                    "module {q}: forward states do not match the sequence"
                )))
            }
        };
        if !module_finite(&g) {
            return Err(Error::NonFiniteGradient { module: q });
        }
        grads[q] = Some(g);
        rho = next;
        if keep {
            boundary[q] = rho.clone();
        }
    }
    let gradient = GradientBundle {
        params: ModelParams {
            modules: grads.into_iter().map(|g| g.expect("filled")).collect(),
        },
    };
    let costates = keep.then_some(CostateBundle { boundary, flows });
    Ok((costates, gradient))
}

/// Full reverse sweep, keeping every costate.
pub fn backward_pass(
    spec: &SequenceSpec,
    params: &ModelParams,
    forward: &ForwardStates,
    targets: &Points,
    sigma_sq: f64,
) -> Result<(CostateBundle, GradientBundle)> {
    let (c, g) = sweep(spec, params, forward, targets, sigma_sq, true)?;
    Ok((c.expect("kept"), g))
}

/// Objective value and gradient from one shared forward pass.
pub fn full_gradient(
    spec: &SequenceSpec,
    params: &ModelParams,
    inputs: &Points,
    targets: &Points,
    n_subset: usize,
    sigma_sq: f64,
) -> Result<(ObjectiveBreakdown, GradientBundle)> {
    let forward = forward_pass(spec, params, inputs, n_subset)?;
    let value = evaluate(spec, params, &forward, targets, sigma_sq)?;
    let (_, grad) = sweep(spec, params, &forward, targets, sigma_sq, false)?;
    Ok((value, grad))
}
