//! Prediction with a trained model and trajectory snapshots.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::flow::{cache_deviation, transport};
use crate::points::Points;
use crate::sequence::ModuleSpec;
use crate::trainer::TrainedModel;

/// Largest tolerated drift between the stored anchor trajectories and a fresh re-integration.
pub const CACHE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    /// One row per input, original response units.
    pub predictions: Points,
    pub rmse: Option<f64>,
    /// `‖y_k - ŷ_k‖²` per point when targets were supplied.
    pub squared_errors: Option<Vec<f64>>,
}

/// Confirms that the cached anchors are what the stored controls produce.
pub fn verify_cache(model: &TrainedModel) -> Result<()> {
    model.params.check_shapes(&model.spec, model.n_subset)?;
    let dev = cache_deviation(&model.spec, &model.params, &model.cache)?;
    if dev > CACHE_TOLERANCE {
        return Err(Error::CorruptCache(format!(
            "cached anchors deviate from their re-integration by {dev:e}"
        )));
    }
    Ok(())
}

/// Model outputs in standardized coordinates, before dropping `r` columns.
fn raw_outputs(model: &TrainedModel, x: &Points) -> Result<Points> {
    let xs = model.standardization.prepare_test_x(x)?;
    Ok(transport(&model.spec, &model.params, &model.cache, &xs, None)?.0)
}

pub fn predict(model: &TrainedModel, test_x: &Points) -> Result<PredictionResult> {
    verify_cache(model)?;
    let out = raw_outputs(model, test_x)?;
    Ok(PredictionResult {
        predictions: model.standardization.unstandardize_y(&out)?,
        rmse: None,
        squared_errors: None,
    })
}

pub fn predict_with_targets(model: &TrainedModel, test_x: &Points, test_y: &Points) -> Result<PredictionResult> {
    let mut res = predict(model, test_x)?;
    res.squared_errors = Some(squared_errors(&res.predictions, test_y)?);
    res.rmse = Some(rmse(&res.predictions, test_y)?);
    Ok(res)
}

fn squared_errors(pred: &Points, targets: &Points) -> Result<Vec<f64>> {
    if pred.len() != targets.len() {
        return Err(Error::dims("target rows", pred.len(), targets.len()));
    }
    if pred.dim() != targets.dim() {
        return Err(Error::dims("target columns", pred.dim(), targets.dim()));
    }
    Ok(pred
        .rows()
        .zip(targets.rows())
        .map(|(p, y)| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// `sqrt((1/N) Σ_k ‖y_k - ŷ_k‖²)`.
pub fn rmse(pred: &Points, targets: &Points) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("RMSE of an empty test set"));
    }
    let e = squared_errors(pred, targets)?;
    Ok((e.iter().sum::<f64>() / e.len() as f64).sqrt())
}

/// Principal-component coordinates of every point at one time index.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub step: usize,
    /// `N × components` scores.
    pub scores: Points,
    /// Unit loadings, one per component.
    pub loadings: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaExport {
    pub module: usize,
    pub components: usize,
    pub snapshots: Vec<Snapshot>,
    pub responses: Option<Points>,
}

/// Centered PCA with at most `max_components` components. Each component's
/// largest-magnitude loading is made positive.
pub fn pca(states: &Points, max_components: usize) -> Result<(Points, Vec<Vec<f64>>, Vec<f64>)> {
    let (n, d) = (states.len(), states.dim());
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two points"));
    }
    let mut centered = DMatrix::from_row_slice(n, d, states.as_slice());
    let mean = centered.row_mean();
    for i in 0..n {
        centered.row_mut(i).zip_apply(&mean, |v, m| *v -= m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let k = max_components.min(d);
    let mut loadings = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &c in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        loadings.push(v);
        variances.push(eig.eigenvalues[c].max(0.0));
    }
    let mut scores = Points::zeros(n, k);
    for i in 0..n {
        let row = centered.row(i);
        for (c, v) in loadings.iter().enumerate() {
            scores.row_mut(i)[c] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
    Ok((scores, loadings, variances))
}

/// Transports `x` through the model and runs PCA on the states of the
/// `q`-th diffeomorphic module (1-based) at the grid points nearest `times`.
pub fn export_pca_snapshots(
    model: &TrainedModel,
    x: &Points,
    y: Option<&Points>,
    q: usize,
    times: &[f64],
) -> Result<PcaExport> {
    verify_cache(model)?;
    let module = model.spec.diffeo_index(q).ok_or_else(|| {
        Error::invalid(format!(
            "module {q} does not exist; the sequence has {} diffeomorphic modules",
            model.spec.diffeo_count()
        ))
    })?;
    let ModuleSpec::Diffeo { steps, dim, .. } = model.spec.modules[module] else {
        unreachable!("diffeo_index returns flow modules")
    };
    if let Some(y) = y {
        if y.len() != x.len() {
            return Err(Error::dims("response rows", x.len(), y.len()));
        }
    }
    if times.is_empty() {
        return Err(Error::invalid("no snapshot times given"));
    }
    let xs = model.standardization.prepare_test_x(x)?;
    let (_, kept) = transport(&model.spec, &model.params, &model.cache, &xs, Some(module))?;
    let traj = kept.expect("requested module is a flow");
    let components = dim.min(3);
    if components < 3 {
        log::warn!("module {q} has dimension {dim}; exporting {components} components");
    }
    let mut snapshots = Vec::with_capacity(times.len());
    for &t in times {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("snapshot time {t} outside [0, 1]")));
        }
        let step = (t * steps as f64).round() as usize;
        let (scores, loadings, variances) = pca(&traj[step], components)?;
        snapshots.push(Snapshot {
            t,
            step,
            scores,
            loadings,
            variances,
        });
    }
    Ok(PcaExport {
        module: q,
        components,
        snapshots,
        responses: y.cloned(),
    })
}

impl PcaExport {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string(), "index".to_string()];
        h.extend((1..=self.components).map(|c| format!("pc{c}")));
        if let Some(y) = &self.responses {
            if y.dim() == 1 {
                h.push("y".into());
            } else {
                h.extend((1..=y.dim()).map(|j| format!("y{j}")));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let err = |e: csv::Error| Error::invalid(format!("writing snapshot CSV: {e}"));
        w.write_record(self.header()).map_err(err)?;
        for s in &self.snapshots {
            for (i, row) in s.scores.rows().enumerate() {
                let mut rec = vec![s.t.to_string(), i.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                if let Some(y) = &self.responses {
                    rec.extend(y.row(i).iter().map(|v| v.to_string()));
                }
                w.write_record(&rec).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::invalid(format!("writing snapshot CSV: {e}")))
    }
}
