//! Forward propagation: affine maps and Euler-integrated kernel flows.
//!
//! Within a diffeomorphic module the first `N_S` rows of the state matrix are
//! anchors. The velocity at any point is the kernel expansion over anchors
//! only, so anchors evolve independently of the remaining (passenger) rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{pair_value, KernelConfig};
use crate::points::{dot, Points};
use crate::sequence::{ControlField, ModelParams, ModuleParams, ModuleSpec, SequenceSpec};

/// Anchor states `z[i][l]` for `i = 0..=steps`, laid out `[i][l][coord]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTrajectory {
    pub steps: usize,
    pub anchors: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl AnchorTrajectory {
    fn from_states(states: &[Points], anchors: usize) -> Self {
        let dim = states[0].dim();
        let mut data = Vec::with_capacity(states.len() * anchors * dim);
        for s in states {
            data.extend_from_slice(&s.as_slice()[..anchors * dim]);
        }
        AnchorTrajectory {
            steps: states.len() - 1,
            anchors,
            dim,
            data,
        }
    }

    /// All anchors at time index `i`, `anchors × dim` row-major.
    #[inline]
    pub fn state(&self, i: usize) -> &[f64] {
        let len = self.anchors * self.dim;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn point(&self, i: usize, l: usize) -> &[f64] {
        let start = (i * self.anchors + l) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Anchor states at time index `i` as points.
    pub fn snapshot(&self, i: usize) -> Points {
        Points::from_vec(self.anchors, self.dim, self.state(i).to_vec()).expect("consistent layout")
    }
}

/// Anchor trajectories of every diffeomorphic module, indexed like the spec's
/// module list (`None` at affine positions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCache {
    pub modules: Vec<Option<AnchorTrajectory>>,
}

impl TrajectoryCache {
    pub fn get(&self, module: usize) -> Option<&AnchorTrajectory> {
        self.modules.get(module).and_then(|m| m.as_ref())
    }
}

/// States recorded during a training-time forward pass.
#[derive(Clone, Debug)]
pub enum ModuleStates {
    /// Input of an affine module.
    Affine { input: Points },
    /// Every point at every time index `0..=T`.
    Diffeo { trajectory: Vec<Points> },
}

impl ModuleStates {
    pub fn input(&self) -> &Points {
        match self {
            ModuleStates::Affine { input } => input,
            ModuleStates::Diffeo { trajectory } => &trajectory[0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardStates {
    pub modules: Vec<ModuleStates>,
    /// Final states before dropping the last `r` coordinates.
    pub output: Points,
    /// Kernel running cost summed over all diffeomorphic modules.
    pub running: f64,
    pub n_subset: usize,
}

impl ForwardStates {
    pub fn cache(&self) -> TrajectoryCache {
        TrajectoryCache {
            modules: self
                .modules
                .iter()
                .map(|m| match m {
                    ModuleStates::Diffeo { trajectory } => {
                        Some(AnchorTrajectory::from_states(trajectory, self.n_subset))
                    }
                    ModuleStates::Affine { .. } => None,
                })
                .collect(),
        }
    }
}

/// Result of flowing anchors and passengers through one module.
#[derive(Clone, Debug)]
pub struct FlowResult {
    pub anchors: AnchorTrajectory,
    pub anchors_out: Points,
    pub passengers_out: Points,
    pub running: f64,
}

/// `out = Σ_l k(z, anchor_l) a_l`, anchors in ascending order.
#[inline]
pub(crate) fn velocity_at(
    inv_width: f64,
    z: &[f64],
    anchors: &[f64],
    controls: &[f64],
    dim: usize,
    out: &mut [f64],
) {
    out.fill(0.0);
    for (zl, al) in anchors.chunks_exact(dim).zip(controls.chunks_exact(dim)) {
        let kv = pair_value(inv_width, z, zl);
        for j in 0..dim {
            out[j] += kv * al[j];
        }
    }
}

pub fn apply_affine(a: &crate::sequence::AffineParams, input: &Points) -> Result<Points> {
    if input.dim() != a.in_dim {
        return Err(Error::dims("affine input", a.in_dim, input.dim()));
    }
    let mut out = Points::zeros(input.len(), a.out_dim);
    if a.out_dim > 0 {
        out.as_mut_slice()
            .par_chunks_mut(a.out_dim)
            .zip(input.as_slice().par_chunks(a.in_dim.max(1)))
            .for_each(|(o, x)| a.apply(x, o));
    }
    Ok(out)
}

/// Euler-integrates all rows of `start`; the first `controls.anchors` rows are anchors.
/// Returns the full trajectory and the running cost `(1/T) Σ_i Σ_{k,l} a_k K_kl a_l`.
pub(crate) fn integrate(
    kernel: &KernelConfig,
    controls: &ControlField,
    start: Points,
    module: usize,
) -> Result<(Vec<Points>, f64)> {
    let d = kernel.dim();
    let ns = controls.anchors;
    if start.dim() != d || controls.dim != d {
        return Err(Error::dims(format!("module {module} state"), d, start.dim()));
    }
    if ns > start.len() {
        return Err(Error::invalid(format!(
            "module {module}: {ns} anchors but only {} points",
            start.len()
        )));
    }
    let inv_w = 1.0 / kernel.width();
    let dt = 1.0 / controls.steps as f64;
    let mut traj = Vec::with_capacity(controls.steps + 1);
    traj.push(start);
    let mut running = 0.0;
    let mut vel = vec![0.0; traj[0].len() * d];
    for i in 0..controls.steps {
        let z = &traj[i];
        let a = controls.step(i);
        let anchors = &z.as_slice()[..ns * d];
        vel.par_chunks_mut(d)
            .zip(z.as_slice().par_chunks(d))
            .for_each(|(v, zk)| velocity_at(inv_w, zk, anchors, a, d, v));
        let mut step_cost = 0.0;
        for (ak, vk) in a.chunks_exact(d).zip(vel.chunks_exact(d)) {
            step_cost += dot(ak, vk);
        }
        running += dt * step_cost;
        let mut next = z.clone();
        for (zn, v) in next.as_mut_slice().iter_mut().zip(&vel) {
            *zn += dt * v;
        }
        if !next.all_finite() {
            return Err(Error::NonFinite {
                module,
                step: i + 1,
            });
        }
        traj.push(next);
    }
    Ok((traj, running))
}

/// Flows anchors and passengers through one diffeomorphic module.
pub fn flow_module(
    kernel: &KernelConfig,
    controls: &ControlField,
    anchors_in: &Points,
    passengers_in: &Points,
) -> Result<FlowResult> {
    if anchors_in.len() != controls.anchors {
        return Err(Error::dims("anchor count", controls.anchors, anchors_in.len()));
    }
    if controls.steps == 0 {
        return Err(Error::invalid("a flow needs at least one time step"));
    }
    let d = kernel.dim();
    if anchors_in.dim() != d {
        return Err(Error::dims("anchor dimension", d, anchors_in.dim()));
    }
    if !passengers_in.is_empty() && passengers_in.dim() != d {
        return Err(Error::dims("passenger dimension", d, passengers_in.dim()));
    }
    let mut all = anchors_in.as_slice().to_vec();
    all.extend_from_slice(passengers_in.as_slice());
    let n = anchors_in.len() + passengers_in.len();
    let start = Points::from_vec(n, d, all)?;
    let (traj, running) = integrate(kernel, controls, start, 0)?;
    let last = traj.last().expect("at least one state");
    let ns = controls.anchors;
    let anchors_out = last.head(ns);
    let passengers_out = last.select(&(ns..n).collect::<Vec<_>>());
    Ok(FlowResult {
        anchors: AnchorTrajectory::from_states(&traj, ns),
        anchors_out,
        passengers_out,
        running,
    })
}

/// Training-time forward pass. `inputs` must be padded and start with the `n_subset` anchors.
pub fn forward_pass(
    spec: &SequenceSpec,
    params: &ModelParams,
    inputs: &Points,
    n_subset: usize,
) -> Result<ForwardStates> {
    if inputs.dim() != spec.input_dim() {
        return Err(Error::dims("model input", spec.input_dim(), inputs.dim()));
    }
    if spec.diffeo_count() > 0 && (n_subset == 0 || n_subset > inputs.len()) {
        return Err(Error::invalid(format!(
            "subset size {n_subset} must lie in 1..={}",
            inputs.len()
        )));
    }
    params.check_shapes(spec, n_subset)?;
    let mut modules = Vec::with_capacity(spec.modules.len());
    let mut cur = inputs.clone();
    let mut running = 0.0;
    for (q, (m, p)) in spec.modules.iter().zip(&params.modules).enumerate() {
        match (m, p) {
            (ModuleSpec::Affine { .. }, ModuleParams::Affine(a)) => {
                let next = apply_affine(a, &cur)?;
                if !next.all_finite() {
                    return Err(Error::NonFinite { module: q, step: 0 });
                }
                modules.push(ModuleStates::Affine { input: cur });
                cur = next;
            }
            (ModuleSpec::Diffeo { kernel, .. }, ModuleParams::Diffeo(c)) => {
                let (traj, r) = integrate(kernel, c, cur, q)?;
                running += r;
                cur = traj.last().expect("nonempty").clone();
                modules.push(ModuleStates::Diffeo { trajectory: traj });
            }
            _ => unreachable!("shapes checked"),
        }
    }
    Ok(ForwardStates {
        modules,
        output: cur,
        running,
        n_subset,
    })
}

/// Moves passengers through one module along cached anchor states.
pub(crate) fn transport_flow(
    kernel: &KernelConfig,
    controls: &ControlField,
    anchors: &AnchorTrajectory,
    points: &Points,
    module: usize,
) -> Result<Vec<Points>> {
    let d = kernel.dim();
    if anchors.steps != controls.steps || anchors.anchors != controls.anchors || anchors.dim != d {
        return Err(Error::CorruptCache(format!(
            "module {module}: cache shape [{}][{}][{}] does not match controls [{}][{}][{}]",
            anchors.steps + 1,
            anchors.anchors,
            anchors.dim,
            controls.steps + 1,
            controls.anchors,
            controls.dim
        )));
    }
    if points.dim() != d {
        return Err(Error::dims(format!("module {module} input"), d, points.dim()));
    }
    let inv_w = 1.0 / kernel.width();
    let dt = 1.0 / controls.steps as f64;
    let mut out = Vec::with_capacity(controls.steps + 1);
    out.push(points.clone());
    for i in 0..controls.steps {
        let z = &out[i];
        let a = controls.step(i);
        let anc = anchors.state(i);
        let mut next = z.clone();
        next.as_mut_slice()
            .par_chunks_mut(d)
            .zip(z.as_slice().par_chunks(d))
            .for_each_init(
                || vec![0.0; d],
                |v, (zn, zk)| {
                    velocity_at(inv_w, zk, anc, a, d, v);
                    for j in 0..d {
                        zn[j] = zk[j] + dt * v[j];
                    }
                },
            );
        if !next.all_finite() {
            return Err(Error::NonFinite {
                module,
                step: i + 1,
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// Propagates new inputs (already padded) through the model as passengers.
/// When `keep` names a module, its full point trajectory is returned too.
pub fn transport(
    spec: &SequenceSpec,
    params: &ModelParams,
    cache: &TrajectoryCache,
    inputs: &Points,
    keep: Option<usize>,
) -> Result<(Points, Option<Vec<Points>>)> {
    if inputs.dim() != spec.input_dim() {
        return Err(Error::dims("model input", spec.input_dim(), inputs.dim()));
    }
    if cache.modules.len() != spec.modules.len() {
        return Err(Error::CorruptCache(format!(
            "cache has {} module slots, sequence has {}",
            cache.modules.len(),
            spec.modules.len()
        )));
    }
    let mut cur = inputs.clone();
    let mut kept = None;
    for (q, (m, p)) in spec.modules.iter().zip(&params.modules).enumerate() {
        match (m, p) {
            (ModuleSpec::Affine { .. }, ModuleParams::Affine(a)) => {
                cur = apply_affine(a, &cur)?;
                if !cur.all_finite() {
                    return Err(Error::NonFinite { module: q, step: 0 });
                }
            }
            (ModuleSpec::Diffeo { kernel, .. }, ModuleParams::Diffeo(c)) => {
                let anchors = cache
                    .get(q)
                    .ok_or_else(|| Error::CorruptCache(format!("module {q} has no trajectory")))?;
                let mut traj = transport_flow(kernel, c, anchors, &cur, q)?;
                cur = traj.pop().expect("nonempty");
                if keep == Some(q) {
                    traj.push(cur.clone());
                    kept = Some(traj);
                }
            }
            _ => {
                return Err(Error::invalid(format!(
                    "module {q}: parameter kind does not match the sequence"
                )))
            }
        }
    }
    Ok((cur, kept))
}

/// Re-integrates the cached anchors from their initial states and reports the
/// largest deviation from the stored trajectory.
pub fn cache_deviation(
    spec: &SequenceSpec,
    params: &ModelParams,
    cache: &TrajectoryCache,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (q, (m, p)) in spec.modules.iter().zip(&params.modules).enumerate() {
        if let (ModuleSpec::Diffeo { kernel, .. }, ModuleParams::Diffeo(c)) = (m, p) {
            let anchors = cache
                .get(q)
                .ok_or_else(|| Error::CorruptCache(format!("module {q} has no trajectory")))?;
            if anchors.data.len() != (anchors.steps + 1) * anchors.anchors * anchors.dim {
                return Err(Error::CorruptCache(format!("module {q}: buffer length")));
            }
            let traj = transport_flow(kernel, c, anchors, &anchors.snapshot(0), q)?;
            for (i, s) in traj.iter().enumerate() {
                for (a, b) in s.as_slice().iter().zip(anchors.state(i)) {
                    let dev = (a - b).abs();
                    if !dev.is_finite() {
                        return Err(Error::CorruptCache(format!("module {q}: non-finite state")));
                    }
                    worst = worst.max(dev);
                }
            }
        }
    }
    Ok(worst)
}
