//! Data preparation: standardization, dummy dimensions, the σ estimate,
//! anchor selection and train/test splits.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lstsq_min_norm;
use crate::points::{sq_dist, Points};

/// Standard deviation of the noise placed in training dummy dimensions.
pub const PAD_NOISE_STD: f64 = 0.01;

/// Column statistics of the training data. Standard deviations use the
/// population convention (divide by `N`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mu_x: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub pad: usize,
}

fn column_stats(p: &Points) -> (Vec<f64>, Vec<f64>) {
    let n = p.len() as f64;
    let d = p.dim();
    let mut mu = vec![0.0; d];
    for r in p.rows() {
        for j in 0..d {
            mu[j] += r[j];
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in p.rows() {
        for j in 0..d {
            let e = r[j] - mu[j];
            var[j] += e * e;
        }
    }
    (mu, var.into_iter().map(|v| (v / n).sqrt()).collect())
}

fn scale(p: &Points, mu: &[f64], sigma: &[f64]) -> Points {
    let mut out = p.clone();
    for i in 0..out.len() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mu[j]) / sigma[j];
        }
    }
    out
}

impl Standardization {
    pub fn x_dim(&self) -> usize {
        self.mu_x.len()
    }

    pub fn y_dim(&self) -> usize {
        self.mu_y.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu_x.len() != self.sigma_x.len() || self.mu_y.len() != self.sigma_y.len() {
            return Err(Error::invalid("standardization vectors have inconsistent lengths"));
        }
        if !self.sigma_x.iter().chain(&self.sigma_y).all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::invalid("standardization scales must be positive"));
        }
        Ok(())
    }

    /// Standardizes predictors without adding dummy dimensions.
    pub fn standardize_x(&self, x: &Points) -> Result<Points> {
        if x.dim() != self.x_dim() {
            return Err(Error::dims("predictor columns", self.x_dim(), x.dim()));
        }
        Ok(scale(x, &self.mu_x, &self.sigma_x))
    }

    /// Standardizes predictors and appends zero dummy dimensions.
    pub fn prepare_test_x(&self, x: &Points) -> Result<Points> {
        Ok(self.standardize_x(x)?.pad_columns(self.pad))
    }

    pub fn standardize_y(&self, y: &Points) -> Result<Points> {
        if y.dim() != self.y_dim() {
            return Err(Error::dims("response columns", self.y_dim(), y.dim()));
        }
        Ok(scale(y, &self.mu_y, &self.sigma_y))
    }

    /// `σ_Y ⊙ π_r(z) + μ_Y`, reading the first `d_Y` columns of `z`.
    pub fn unstandardize_y(&self, z: &Points) -> Result<Points> {
        let dy = self.y_dim();
        if z.dim() < dy {
            return Err(Error::dims("model output columns", dy, z.dim()));
        }
        let mut out = Points::zeros(z.len(), dy);
        for (i, r) in z.rows().enumerate() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = self.sigma_y[j] * r[j] + self.mu_y[j];
            }
        }
        Ok(out)
    }
}

/// Training data in model coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedDataset {
    /// Standardized predictors followed by `pad` noise columns.
    pub x: Points,
    pub y: Points,
    pub raw_y: Points,
    pub standardization: Standardization,
}

impl StandardizedDataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Standardized predictors without dummy dimensions.
    pub fn unpadded_x(&self) -> Points {
        self.x.truncate_columns(self.standardization.x_dim())
    }

    /// Rows reordered by `order`.
    pub fn reorder(&self, order: &[usize]) -> StandardizedDataset {
        StandardizedDataset {
            x: self.x.select(order),
            y: self.y.select(order),
            raw_y: self.raw_y.select(order),
            standardization: self.standardization.clone(),
        }
    }
}

/// Standardizes the training set, appends `pad` noise columns, and prepares
/// the optional test predictors with zero dummy columns.
pub fn standardize(
    train_x: &Points,
    train_y: &Points,
    test_x: Option<&Points>,
    pad: usize,
    seed: u64,
) -> Result<(StandardizedDataset, Option<Points>)> {
    let n = train_x.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 training rows, got {n}")));
    }
    if train_y.len() != n {
        return Err(Error::dims("response rows", n, train_y.len()));
    }
    if train_x.dim() == 0 || train_y.dim() == 0 {
        return Err(Error::invalid("predictors and responses need at least one column"));
    }
    if !train_x.all_finite() || !train_y.all_finite() {
        return Err(Error::invalid("training data contains non-finite values"));
    }
    let (mu_x, mut sigma_x) = column_stats(train_x);
    for (j, s) in sigma_x.iter_mut().enumerate() {
        if *s == 0.0 {
            log::warn!("predictor column {j} is constant; its scale is set to 1");
            *s = 1.0;
        }
    }
    let (mu_y, sigma_y) = column_stats(train_y);
    if let Some(j) = sigma_y.iter().position(|s| *s == 0.0) {
        return Err(Error::Degenerate(format!("response column {j} is constant")));
    }
    let standardization = Standardization {
        mu_x,
        sigma_x,
        mu_y,
        sigma_y,
        pad,
    };
    let mut x = standardization.standardize_x(train_x)?.pad_columns(pad);
    if pad > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PAD_NOISE_STD).expect("valid normal");
        let dx = standardization.x_dim();
        for i in 0..n {
            for v in &mut x.row_mut(i)[dx..] {
                *v = normal.sample(&mut rng);
            }
        }
    }
    let y = standardization.standardize_y(train_y)?;
    let test = test_x.map(|t| standardization.prepare_test_x(t)).transpose()?;
    Ok((
        StandardizedDataset {
            x,
            y,
            raw_y: train_y.clone(),
            standardization,
        },
        test,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    /// Residual variance of the local linear fits.
    pub sigma_mse_sq: f64,
    /// Initial `σ²`.
    pub sigma_sq_init: f64,
    /// Neighbors per point.
    pub k: usize,
}

/// Neighbor count for the local regressions: `min(2 d_X + 1, ⌊N/5⌋)`.
pub fn neighbor_count(n: usize, x_dim: usize) -> usize {
    (2 * x_dim + 1).min(n / 5)
}

/// `k` nearest rows to row `i` (excluding `i`), ties broken by index.
fn nearest(x: &Points, i: usize, k: usize) -> Vec<usize> {
    let xi = x.row(i);
    let mut d: Vec<(f64, usize)> = (0..x.len())
        .filter(|&j| j != i)
        .map(|j| (sq_dist(xi, x.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Local "gradient" regressions on the unpadded standardized data.
pub fn estimate_sigma(dataset: &StandardizedDataset) -> Result<SigmaEstimate> {
    let x = dataset.unpadded_x();
    let y = &dataset.y;
    let n = x.len();
    let (dx, dy) = (x.dim(), y.dim());
    let k = neighbor_count(n, dx);
    if k < 1 {
        return Err(Error::invalid(format!(
            "{n} training rows are too few for the local regressions (need at least 5)"
        )));
    }
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = nearest(&x, i, k);
            let xi = x.row(i);
            let yi = y.row(i);
            let a = DMatrix::from_fn(k, dx, |r, c| x.row(nb[r])[c] - xi[c]);
            let b = DMatrix::from_fn(k, dy, |r, c| y.row(nb[r])[c] - yi[c]);
            let g = lstsq_min_norm(&a, &b);
            let r = b - a * g;
            r.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    let total: f64 = per_point.iter().sum();
    let sigma_mse_sq = total / ((n * k * dy) as f64);
    let sigma_sq_init = (n as f64).sqrt() * (sigma_mse_sq.sqrt() / 2.0).max(0.01);
    Ok(SigmaEstimate {
        sigma_mse_sq,
        sigma_sq_init,
        k,
    })
}

/// k-means++ seeding: the first index is uniform, each next one is drawn with
/// probability proportional to its squared distance from the chosen set.
pub fn select_subset(x: &Points, n_subset: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.len();
    if n_subset == 0 || n_subset > n {
        return Err(Error::invalid(format!("subset size {n_subset} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_subset);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = (0..n).map(|j| sq_dist(x.row(j), x.row(first))).collect();
    while chosen.len() < n_subset {
        for (j, t) in taken.iter().enumerate() {
            if *t {
                d2[j] = 0.0;
            }
        }
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            Err(_) => {
                // every remaining point coincides with a chosen one
                let free: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        taken[next] = true;
        let c = x.row(next);
        for (j, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(j), c));
        }
    }
    Ok(chosen)
}

/// Permutation placing `anchors` first (in the given order), then the
/// remaining rows in ascending order.
pub fn anchors_first(n: usize, anchors: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; n];
    let mut order = anchors.to_vec();
    for &a in anchors {
        seen[a] = true;
    }
    order.extend((0..n).filter(|&j| !seen[j]));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Standard,
    Gap,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SplitKind::Standard),
            "gap" => Ok(SplitKind::Gap),
            _ => Err(Error::invalid(format!("unknown split kind {s:?} (standard|gap)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSet {
    pub kind: SplitKind,
    pub seed: u64,
    pub splits: Vec<Split>,
}

/// Test-set size of a standard split: `round(N / 10)`.
pub fn standard_test_size(n: usize) -> usize {
    (n as f64 / 10.0).round() as usize
}

/// Standard splits shuffle all rows and hold out `round(N/10)` of them. Gap
/// splits produce one split per predictor column holding out the middle
/// third of the rows ranked by that column; `count` is ignored for them.
pub fn make_splits(
    n: usize,
    kind: SplitKind,
    count: usize,
    x: Option<&Points>,
    seed: u64,
) -> Result<SplitSet> {
    let splits = match kind {
        SplitKind::Standard => {
            let n_test = standard_test_size(n);
            if n_test == 0 || n_test >= n {
                return Err(Error::invalid(format!("{n} rows are too few for a 90/10 split")));
            }
            if count == 0 {
                return Err(Error::invalid("split count must be at least 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    let mut test = idx[..n_test].to_vec();
                    let mut train = idx[n_test..].to_vec();
                    test.sort_unstable();
                    train.sort_unstable();
                    Split { train, test }
                })
                .collect()
        }
        SplitKind::Gap => {
            let x = x.ok_or_else(|| Error::invalid("gap splits need the predictor matrix"))?;
            if x.len() != n {
                return Err(Error::dims("gap split rows", n, x.len()));
            }
            if n < 3 {
                return Err(Error::invalid("gap splits need at least 3 rows"));
            }
            (0..x.dim())
                .map(|j| {
                    let col = x.column(j);
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
                    let (lo, hi) = (n / 3, 2 * n / 3);
                    let mut test = order[lo..hi].to_vec();
                    let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
                    test.sort_unstable();
                    train.sort_unstable();
                    Split { train, test }
                })
                .collect()
        }
    };
    Ok(SplitSet { kind, seed, splits })
}

pub fn write_split(path: &Path, split: &Split) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(f, "train").map_err(io)?;
    for i in &split.train {
        writeln!(f, "{i}").map_err(io)?;
    }
    writeln!(f, "test").map_err(io)?;
    for i in &split.test {
        writeln!(f, "{i}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut section: Option<bool> = None;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        let loc = || format!("{}:{}", path.display(), no + 1);
        match line {
            "" => continue,
            "train" => section = Some(true),
            "test" => section = Some(false),
            _ => {
                let i: usize = line
                    .parse()
                    .map_err(|_| Error::parse(loc(), format!("expected a row index, found {line:?}")))?;
                match section {
                    Some(true) => train.push(i),
                    Some(false) => test.push(i),
                    None => return Err(Error::parse(loc(), "index before a `train`/`test` header")),
                }
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::parse(path.display().to_string(), "split needs both train and test indices"));
    }
    Ok(Split { train, test })
}
