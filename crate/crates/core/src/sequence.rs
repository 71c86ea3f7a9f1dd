//! Model sequences: which modules run in which order, their dimensions, and
//! the trainable parameters attached to them.
//!
//! Sequence names list only non-identity modules, left to right. Repetition
//! is written with a trailing count, optionally after a caret, and groups may
//! be parenthesised: `ADA`, `AD4A`, `AD^4A`, `(AD)3A`, `AD2A2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelConfig;

pub const DEFAULT_WIDTH: f64 = 0.5;
pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_PAD: usize = 1;
pub const DEFAULT_DROP: usize = 0;
/// Standard deviation of the random affine initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineCost {
    /// `‖M‖²`
    Ridge,
    /// `‖M - I‖²`, square modules only.
    RidgeToIdentity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthSchedule {
    #[default]
    None,
    /// `h_q = q / (m + 1)`
    Up,
    /// `h_q = (m + 1 - q) / (m + 1)`
    Down,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleSpec {
    Affine {
        in_dim: usize,
        out_dim: usize,
        cost: AffineCost,
    },
    Diffeo {
        dim: usize,
        kernel: KernelConfig,
        steps: usize,
    },
}

impl ModuleSpec {
    pub fn in_dim(&self) -> usize {
        match self {
            ModuleSpec::Affine { in_dim, .. } => *in_dim,
            ModuleSpec::Diffeo { dim, .. } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ModuleSpec::Affine { out_dim, .. } => *out_dim,
            ModuleSpec::Diffeo { dim, .. } => *dim,
        }
    }

    pub fn is_diffeo(&self) -> bool {
        matches!(self, ModuleSpec::Diffeo { .. })
    }
}

/// A fully wired module chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub name: String,
    pub modules: Vec<ModuleSpec>,
    /// `s`: zero (or noise) columns appended to the predictors.
    pub pad: usize,
    /// `r`: trailing output coordinates dropped before comparing with responses.
    pub drop: usize,
    pub lambda: f64,
    pub x_dim: usize,
    pub y_dim: usize,
}

/// User adjustments applied on top of the name-derived defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceOverrides {
    pub pad: Option<usize>,
    pub drop: Option<usize>,
    /// Output dimension of every affine module except the last.
    pub inner_dim: Option<usize>,
    /// One width for every diffeomorphic module.
    pub width: Option<f64>,
    /// Per-module widths, in diffeomorphic-module order.
    pub widths: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub steps_per_module: Option<Vec<usize>>,
    pub schedule: WidthSchedule,
    pub lambda: Option<f64>,
    /// Cost for affine modules strictly inside the chain.
    pub inner_affine_cost: Option<AffineCost>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Token {
    A,
    D,
}

struct NameParser<'a> {
    name: &'a str,
    chars: Vec<char>,
    pos: usize,
    saw_group: bool,
}

impl<'a> NameParser<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Sequence {
            name: self.name.to_string(),
            reason: reason.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn count(&mut self) -> Result<usize> {
        if self.peek() == Some('^') {
            self.pos += 1;
            if !self.peek().is_some_and(|c| c.is_ascii_digit()) {
                return Err(self.err(format!("expected a count after '^' at position {}", self.pos)));
            }
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(1);
        }
        let digits: String = self.chars[start..self.pos].iter().collect();
        let n: usize = digits
            .parse()
            .map_err(|_| self.err(format!("count {digits:?} out of range")))?;
        if n == 0 {
            return Err(self.err("repetition count must be at least 1"));
        }
        Ok(n)
    }

    fn sequence(&mut self, depth: usize) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        loop {
            let item = match self.peek() {
                Some('A') | Some('a') => {
                    self.pos += 1;
                    vec![Token::A]
                }
                Some('D') | Some('d') => {
                    self.pos += 1;
                    vec![Token::D]
                }
                Some('(') => {
                    self.pos += 1;
                    self.saw_group = true;
                    let inner = self.sequence(depth + 1)?;
                    if self.peek() != Some(')') {
                        return Err(self.err("unbalanced '('"));
                    }
                    self.pos += 1;
                    inner
                }
                Some(')') if depth > 0 => break,
                None => break,
                Some(c) => {
                    return Err(self.err(format!("unexpected {c:?} at position {}", self.pos)))
                }
            };
            if item.is_empty() {
                return Err(self.err("empty group"));
            }
            let n = self.count()?;
            for _ in 0..n {
                out.extend_from_slice(&item);
            }
        }
        Ok(out)
    }
}

fn expand_name(name: &str) -> Result<(Vec<Token>, bool)> {
    let mut p = NameParser {
        name,
        chars: name.trim().chars().collect(),
        pos: 0,
        saw_group: false,
    };
    let tokens = p.sequence(0)?;
    if p.pos != p.chars.len() {
        return Err(p.err(format!("unexpected ')' at position {}", p.pos)));
    }
    if tokens.is_empty() {
        return Err(p.err("no modules"));
    }
    Ok((tokens, p.saw_group))
}

/// `(AD)^x A` with `x >= 1`.
fn is_alternating_ad(tokens: &[Token]) -> bool {
    tokens.len() >= 3
        && tokens.len() % 2 == 1
        && tokens
            .iter()
            .enumerate()
            .all(|(i, t)| *t == if i % 2 == 0 { Token::A } else { Token::D })
}

/// Parses a sequence name and wires every module's dimensions.
/// Checks a sequence name against the grammar without building modules.
pub fn check_sequence_name(name: &str) -> Result<()> {
    expand_name(name).map(|_| ())
}

pub fn parse_sequence(
    name: &str,
    x_dim: usize,
    y_dim: usize,
    overrides: &SequenceOverrides,
) -> Result<SequenceSpec> {
    if x_dim == 0 || y_dim == 0 {
        return Err(Error::invalid("data dimensions must be at least 1"));
    }
    let (tokens, saw_group) = expand_name(name)?;
    let bad = |reason: String| Error::Sequence {
        name: name.to_string(),
        reason,
    };

    let pad = overrides.pad.unwrap_or(DEFAULT_PAD);
    let drop = overrides.drop.unwrap_or(DEFAULT_DROP);
    let lambda = overrides.lambda.unwrap_or(DEFAULT_LAMBDA);
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let input_dim = x_dim + pad;
    let output_dim = y_dim + drop;
    let inner_dim = overrides.inner_dim.unwrap_or(input_dim);
    if inner_dim == 0 {
        return Err(Error::invalid("inner_dim must be at least 1"));
    }

    let n_diffeo = tokens.iter().filter(|t| **t == Token::D).count();
    let widths: Vec<f64> = match (&overrides.widths, overrides.schedule) {
        (Some(_), s) if s != WidthSchedule::None => {
            return Err(Error::invalid("explicit widths conflict with a width schedule"))
        }
        (Some(w), _) => {
            if w.len() != n_diffeo {
                return Err(Error::dims("widths override", n_diffeo, w.len()));
            }
            w.clone()
        }
        (None, WidthSchedule::None) => {
            vec![overrides.width.unwrap_or(DEFAULT_WIDTH); n_diffeo]
        }
        (None, schedule) => {
            if overrides.width.is_some() {
                return Err(Error::invalid("a single width conflicts with a width schedule"));
            }
            let denom = (n_diffeo + 1) as f64;
            (1..=n_diffeo)
                .map(|q| match schedule {
                    WidthSchedule::Up => q as f64 / denom,
                    _ => (n_diffeo + 1 - q) as f64 / denom,
                })
                .collect()
        }
    };
    let steps: Vec<usize> = match &overrides.steps_per_module {
        Some(s) => {
            if overrides.steps.is_some() {
                return Err(Error::invalid("steps and steps_per_module are mutually exclusive"));
            }
            if s.len() != n_diffeo {
                return Err(Error::dims("steps_per_module override", n_diffeo, s.len()));
            }
            s.clone()
        }
        None => vec![overrides.steps.unwrap_or(DEFAULT_STEPS); n_diffeo],
    };

    let last_affine = tokens.iter().rposition(|t| *t == Token::A);
    let first_affine = tokens.iter().position(|t| *t == Token::A);
    let alternating = is_alternating_ad(&tokens) && (saw_group || n_diffeo >= 2);
    let inner_cost = overrides.inner_affine_cost.unwrap_or(if alternating {
        AffineCost::RidgeToIdentity
    } else {
        AffineCost::Ridge
    });

    let mut modules = Vec::with_capacity(tokens.len());
    let mut cur = input_dim;
    let mut q = 0;
    for (idx, t) in tokens.iter().enumerate() {
        match t {
            Token::A => {
                let out = if Some(idx) == last_affine {
                    output_dim
                } else {
                    inner_dim
                };
                let inner = Some(idx) != first_affine && Some(idx) != last_affine;
                let cost = if inner { inner_cost } else { AffineCost::Ridge };
                if cost == AffineCost::RidgeToIdentity && cur != out {
                    return Err(bad(format!(
                        "identity-anchored cost needs a square module, module {idx} maps {cur} -> {out}"
                    )));
                }
                modules.push(ModuleSpec::Affine {
                    in_dim: cur,
                    out_dim: out,
                    cost,
                });
                cur = out;
            }
            Token::D => {
                modules.push(ModuleSpec::Diffeo {
                    dim: cur,
                    kernel: KernelConfig::new(widths[q], cur)?,
                    steps: steps[q],
                });
                q += 1;
            }
        }
    }
    if cur != output_dim {
        return Err(bad(format!(
            "chain ends in dimension {cur} but d_Y + r = {output_dim}"
        )));
    }

    let spec = SequenceSpec {
        name: name.trim().to_string(),
        modules,
        pad,
        drop,
        lambda,
        x_dim,
        y_dim,
    };
    spec.validate()?;
    for w in spec.warnings() {
        log::warn!("{w}");
    }
    Ok(spec)
}

impl SequenceSpec {
    /// Checks the wiring invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Sequence {
            name: self.name.clone(),
            reason,
        };
        if self.modules.is_empty() {
            return Err(bad("no modules".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        let mut cur = self.x_dim + self.pad;
        for (i, m) in self.modules.iter().enumerate() {
            if m.in_dim() != cur {
                return Err(Error::dims(format!("module {i} input"), cur, m.in_dim()));
            }
            match m {
                ModuleSpec::Affine {
                    in_dim,
                    out_dim,
                    cost,
                } => {
                    if *out_dim == 0 {
                        return Err(bad(format!("module {i} has zero output dimension")));
                    }
                    if *cost == AffineCost::RidgeToIdentity && in_dim != out_dim {
                        return Err(bad(format!("module {i}: identity-anchored cost on a non-square map")));
                    }
                }
                ModuleSpec::Diffeo { dim, kernel, steps } => {
                    if *steps == 0 {
                        return Err(bad(format!("module {i} needs at least one time step")));
                    }
                    if kernel.dim() != *dim {
                        return Err(Error::dims(format!("module {i} kernel"), *dim, kernel.dim()));
                    }
                }
            }
            cur = m.out_dim();
        }
        if cur != self.y_dim + self.drop {
            return Err(Error::dims("sequence output", self.y_dim + self.drop, cur));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.x_dim + self.pad
    }

    pub fn output_dim(&self) -> usize {
        self.y_dim + self.drop
    }

    pub fn diffeo_count(&self) -> usize {
        self.modules.iter().filter(|m| m.is_diffeo()).count()
    }

    /// Module index of the `q`-th diffeomorphic module (1-based `q`).
    pub fn diffeo_index(&self, q: usize) -> Option<usize> {
        if q == 0 {
            return None;
        }
        self.modules
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_diffeo())
            .nth(q - 1)
            .map(|(i, _)| i)
    }

    /// Kernel widths of the diffeomorphic modules, in order.
    pub fn widths(&self) -> Vec<f64> {
        self.modules
            .iter()
            .filter_map(|m| match m {
                ModuleSpec::Diffeo { kernel, .. } => Some(kernel.width()),
                _ => None,
            })
            .collect()
    }

    pub fn warnings(&self) -> Vec<String> {
        let shape: String = self
            .modules
            .iter()
            .map(|m| if m.is_diffeo() { 'D' } else { 'A' })
            .collect();
        let mut out = Vec::new();
        if shape == "AD" {
            out.push(format!(
                "sequence {:?} (AD) has no affine map after the flow and is rarely practical for regression",
                self.name
            ));
        }
        if shape == "DA" {
            out.push(format!(
                "sequence {:?} (DA) flows raw inputs; the kernel width must suit the data scale",
                self.name
            ));
        }
        out
    }
}

/// `x ↦ M x + b`, with `M` stored row-major as `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub m: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineParams {
            in_dim,
            out_dim,
            m: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim, dim);
        for i in 0..dim {
            a.m[i * dim + i] = 1.0;
        }
        a
    }

    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.m[i * self.in_dim..(i + 1) * self.in_dim];
            let mut s = self.b[i];
            for (mij, xj) in row.iter().zip(x) {
                s += mij * xj;
            }
            *o = s;
        }
    }

    /// `U(A)` for the given cost kind, without the `λ` weight.
    pub fn cost(&self, kind: AffineCost) -> f64 {
        let mut s = 0.0;
        for i in 0..self.out_dim {
            for j in 0..self.in_dim {
                let mut v = self.m[i * self.in_dim + j];
                if kind == AffineCost::RidgeToIdentity && i == j {
                    v -= 1.0;
                }
                s += v * v;
            }
        }
        s
    }

    /// `∂U/∂M`, row-major; `∂U/∂b` is zero.
    pub fn cost_grad(&self, kind: AffineCost) -> Vec<f64> {
        let mut g: Vec<f64> = self.m.iter().map(|v| 2.0 * v).collect();
        if kind == AffineCost::RidgeToIdentity {
            for i in 0..self.out_dim.min(self.in_dim) {
                g[i * self.in_dim + i] -= 2.0;
            }
        }
        g
    }
}

/// Controls `a_l(i/T)` of one diffeomorphic module, laid out `[step][anchor][coord]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    pub steps: usize,
    pub anchors: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ControlField {
    pub fn zeros(steps: usize, anchors: usize, dim: usize) -> Self {
        ControlField {
            steps,
            anchors,
            dim,
            data: vec![0.0; steps * anchors * dim],
        }
    }

    /// All anchor controls at step `i`, `anchors × dim` row-major.
    #[inline]
    pub fn step(&self, i: usize) -> &[f64] {
        let len = self.anchors * self.dim;
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn step_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.anchors * self.dim;
        &mut self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn get(&self, i: usize, l: usize) -> &[f64] {
        let start = (i * self.anchors + l) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn get_mut(&mut self, i: usize, l: usize) -> &mut [f64] {
        let start = (i * self.anchors + l) * self.dim;
        &mut self.data[start..start + self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleParams {
    Affine(AffineParams),
    Diffeo(ControlField),
}

/// Trainable values, one entry per module of the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub modules: Vec<ModuleParams>,
}

impl ModelParams {
    pub fn affines(&self) -> impl Iterator<Item = &AffineParams> {
        self.modules.iter().filter_map(|m| match m {
            ModuleParams::Affine(a) => Some(a),
            _ => None,
        })
    }

    pub fn controls(&self) -> impl Iterator<Item = &ControlField> {
        self.modules.iter().filter_map(|m| match m {
            ModuleParams::Diffeo(c) => Some(c),
            _ => None,
        })
    }

    /// Zero-valued parameters with the same shapes as `self`.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            modules: self
                .modules
                .iter()
                .map(|m| match m {
                    ModuleParams::Affine(a) => {
                        ModuleParams::Affine(AffineParams::zeros(a.in_dim, a.out_dim))
                    }
                    ModuleParams::Diffeo(c) => {
                        ModuleParams::Diffeo(ControlField::zeros(c.steps, c.anchors, c.dim))
                    }
                })
                .collect(),
        }
    }

    /// Anchor count shared by every control field, if there is one.
    pub fn n_subset(&self) -> Option<usize> {
        self.controls().next().map(|c| c.anchors)
    }

    /// Checks that the shapes agree with `spec` for `n_subset` anchors.
    pub fn check_shapes(&self, spec: &SequenceSpec, n_subset: usize) -> Result<()> {
        if self.modules.len() != spec.modules.len() {
            return Err(Error::dims("parameter modules", spec.modules.len(), self.modules.len()));
        }
        for (i, (m, p)) in spec.modules.iter().zip(&self.modules).enumerate() {
            match (m, p) {
                (ModuleSpec::Affine { in_dim, out_dim, .. }, ModuleParams::Affine(a)) => {
                    if a.in_dim != *in_dim || a.out_dim != *out_dim {
                        return Err(Error::invalid(format!(
                            "module {i}: affine params {}x{} but spec {}x{}",
                            a.out_dim, a.in_dim, out_dim, in_dim
                        )));
                    }
                    if a.m.len() != in_dim * out_dim || a.b.len() != *out_dim {
                        return Err(Error::invalid(format!("module {i}: affine buffer sizes")));
                    }
                }
                (ModuleSpec::Diffeo { dim, steps, .. }, ModuleParams::Diffeo(c)) => {
                    if c.dim != *dim || c.steps != *steps || c.anchors != n_subset {
                        return Err(Error::invalid(format!(
                            "module {i}: control field [{}][{}][{}] but expected [{steps}][{n_subset}][{dim}]",
                            c.steps, c.anchors, c.dim
                        )));
                    }
                    if c.data.len() != steps * n_subset * dim {
                        return Err(Error::invalid(format!("module {i}: control buffer size")));
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "module {i}: parameter kind does not match the spec"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Initial parameters: zero controls, `M ~ N(0, 0.01²)` and `b = 0`, or
/// `M = I + diag(w)` for identity-anchored modules.
pub fn init_params(spec: &SequenceSpec, n_subset: usize, seed: u64) -> Result<ModelParams> {
    if n_subset == 0 && spec.diffeo_count() > 0 {
        return Err(Error::invalid("n_subset must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let modules = spec
        .modules
        .iter()
        .map(|m| match m {
            ModuleSpec::Affine {
                in_dim,
                out_dim,
                cost,
            } => {
                let mut a = AffineParams::zeros(*in_dim, *out_dim);
                match cost {
                    AffineCost::Ridge => {
                        for v in a.m.iter_mut() {
                            *v = normal.sample(&mut rng);
                        }
                    }
                    AffineCost::RidgeToIdentity => {
                        for i in 0..*in_dim {
                            a.m[i * in_dim + i] = 1.0 + normal.sample(&mut rng);
                        }
                    }
                }
                ModuleParams::Affine(a)
            }
            ModuleSpec::Diffeo { dim, steps, .. } => {
                ModuleParams::Diffeo(ControlField::zeros(*steps, n_subset, *dim))
            }
        })
        .collect();
    Ok(ModelParams { modules })
}

/// `λ Σ_q U_q(A_q)`.
pub fn affine_cost(spec: &SequenceSpec, params: &ModelParams) -> f64 {
    let mut s = 0.0;
    for (m, p) in spec.modules.iter().zip(&params.modules) {
        if let (ModuleSpec::Affine { cost, .. }, ModuleParams::Affine(a)) = (m, p) {
            s += a.cost(*cost);
        }
    }
    spec.lambda * s
}

/// `λ ∂U_q/∂M_q` for every affine module, indexed by module (empty for flows).
pub fn affine_cost_grad(spec: &SequenceSpec, params: &ModelParams) -> Vec<Vec<f64>> {
    spec.modules
        .iter()
        .zip(&params.modules)
        .map(|(m, p)| match (m, p) {
            (ModuleSpec::Affine { cost, .. }, ModuleParams::Affine(a)) => a
                .cost_grad(*cost)
                .into_iter()
                .map(|g| spec.lambda * g)
                .collect(),
            _ => Vec::new(),
        })
        .collect()
}
