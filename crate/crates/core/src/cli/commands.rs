//! Subcommand handlers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use super::config::RunConfig;
use super::dataset::{csv_bytes, read_dataset, read_table, response_header, split_responses, write_file};
use super::model_file::{load_model, save_model};
use crate::baseline::{fit_ridge, predict_ridge};
use crate::error::{Error, Result};
use crate::points::Points;
use crate::predictor::{export_pca_snapshots, predict, rmse};
use crate::preprocess::{make_splits, read_split, write_split, Split, SplitKind};
use crate::trainer::{train, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "finemorphs", version, about = "Affine/diffeomorphic sequence regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it to a model file.
    Train(TrainArgs),
    /// Predict responses for new predictors.
    Predict(PredictArgs),
    /// Write standard or gap train/test splits.
    GenSplits(GenSplitsArgs),
    /// Mean test RMSE and its standard error over a directory of splits.
    Benchmark(BenchmarkArgs),
    /// Principal-component snapshots of one flow module's trajectories.
    ExportPca(ExportPcaArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    pub config: PathBuf,
    /// Training CSV; defaults to `data.train` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Predictors, optionally followed by response columns.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Responses for RMSE reporting, when they are not part of `--data`.
    #[arg(long)]
    pub targets: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Standard,
    Gap,
}

#[derive(Debug, Args)]
pub struct GenSplitsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    pub kind: KindArg,
    /// Number of standard splits; gap splits always produce one per predictor.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trailing response columns in `--data`.
    #[arg(long, default_value_t = 1)]
    pub response_columns: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Ridge,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `split_*.txt` files.
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also evaluate a baseline on the same splits.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Ridge weight of the baseline.
    #[arg(long, default_value_t = 1.0)]
    pub ridge_lambda: f64,
    /// Trailing response columns when no config is given.
    #[arg(long)]
    pub response_columns: Option<usize>,
    /// Independent splits trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel_splits: usize,
    /// Dataset label in the output; defaults to the data file stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportPcaArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Predictors, optionally followed by response columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Flow module, counted from 1 among the D modules.
    #[arg(long)]
    pub module: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    pub times: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::GenSplits(a) => cmd_gen_splits(&a),
        Command::Benchmark(a) => {
            let table = cmd_benchmark(&a)?;
            print!("{table}");
            Ok(())
        }
        Command::ExportPca(a) => cmd_export_pca(&a),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let data = args
        .data
        .clone()
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| Error::invalid("no training data: pass --data or set data.train"))?;
    let (x, y) = read_dataset(&data, cfg.data.response_columns, cfg.data.header)?;
    let spec = cfg.spec(x.dim())?;
    let model = train(&spec, &x, &y, &cfg.train_config()?)?;
    log::info!(
        "event=trained sequence={} final_train_mse={:e} reached_target={}",
        spec.name,
        model.report.final_train_mse,
        model.report.reached_target
    );
    save_model(&model, &args.out)
}

/// Predictors of a file for `model`, plus responses when the file carries them.
fn model_inputs(model: &TrainedModel, path: &Path) -> Result<(Points, Option<Points>)> {
    let t = read_table(path, None)?;
    let (dx, dy) = (model.spec.x_dim, model.spec.y_dim);
    let origin = path.display().to_string();
    match t.values.dim() {
        d if d == dx => Ok((t.values, None)),
        d if d == dx + dy => {
            let (x, y) = split_responses(&t.values, dy, &origin)?;
            Ok((x, Some(y)))
        }
        d => Err(Error::parse(
            origin,
            format!("{d} columns; the model expects {dx} predictors, optionally followed by {dy} responses"),
        )),
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, mut y) = model_inputs(&model, &args.data)?;
    if let Some(path) = &args.targets {
        let t = read_table(path, None)?;
        if t.values.len() != x.len() {
            return Err(Error::parse(
                path.display().to_string(),
                format!("{} target rows for {} predictor rows", t.values.len(), x.len()),
            ));
        }
        y = Some(t.values);
    }
    let res = predict(&model, &x)?;
    let bytes = csv_bytes(&response_header(model.spec.y_dim), &res.predictions)?;
    let score = y.as_ref().map(|y| rmse(&res.predictions, y)).transpose()?;
    write_file(&args.out, &bytes)?;
    if let Some(r) = score {
        println!("rmse,{r}");
    }
    Ok(())
}

pub fn cmd_gen_splits(args: &GenSplitsArgs) -> Result<()> {
    let (x, _) = read_dataset(&args.data, args.response_columns, None)?;
    let kind = match args.kind {
        KindArg::Standard => SplitKind::Standard,
        KindArg::Gap => SplitKind::Gap,
    };
    let set = make_splits(x.len(), kind, args.count, Some(&x), args.seed)?;
    fs::create_dir_all(&args.out).map_err(|source| Error::Io {
        path: args.out.clone(),
        source,
    })?;
    for (i, s) in set.splits.iter().enumerate() {
        write_split(&split_path(&args.out, i), s)?;
    }
    log::info!("event=splits kind={kind:?} count={} dir={}", set.splits.len(), args.out.display());
    Ok(())
}

pub fn split_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("split_{index:03}.txt"))
}

/// Split files of a directory in name order.
pub fn read_split_dir(dir: &Path, n: usize) -> Result<Vec<Split>> {
    let entries = fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            name.starts_with("split_") && name.ends_with(".txt")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::parse(dir.display().to_string(), "no split_*.txt files"));
    }
    paths
        .iter()
        .map(|p| {
            let s = read_split(p)?;
            let mut seen = vec![false; n];
            for &i in s.train.iter().chain(&s.test) {
                if i >= n {
                    return Err(Error::parse(p.display().to_string(), format!("row {i} but the data has {n} rows")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::parse(p.display().to_string(), format!("row {i} listed twice")));
                }
            }
            Ok(s)
        })
        .collect()
}

/// Sample mean and standard error of the mean; `None` for a single value.
pub fn mean_and_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

pub fn format_row(name: &str, values: &[f64]) -> String {
    let (mean, se) = mean_and_stderr(values);
    let se = se.map_or_else(|| "NA".to_string(), |s| s.to_string());
    format!("{name},{mean},{se},{}\n", values.len())
}

fn run_splits<F>(splits: &[Split], parallel: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &Split) -> Result<f64> + Sync,
{
    if parallel <= 1 {
        return splits.iter().enumerate().map(|(i, s)| f(i, s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| splits.par_iter().enumerate().map(|(i, s)| f(i, s)).collect())
}

/// Returns the `name,mean,stderr,n_splits` table.
pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<String> {
    if args.config.is_none() && args.baseline.is_none() {
        return Err(Error::invalid("nothing to benchmark: pass --config, --baseline, or both"));
    }
    if args.parallel_splits == 0 {
        return Err(Error::invalid("--parallel-splits must be at least 1"));
    }
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let response_columns = match (&cfg, args.response_columns) {
        (Some(c), Some(r)) if c.data.response_columns != r => {
            return Err(Error::invalid(format!(
                "--response-columns {r} disagrees with data.response_columns = {}",
                c.data.response_columns
            )))
        }
        (Some(c), _) => c.data.response_columns,
        (None, r) => r.unwrap_or(1),
    };
    let header = cfg.as_ref().and_then(|c| c.data.header);
    let (x, y) = read_dataset(&args.data, response_columns, header)?;
    let splits = read_split_dir(&args.splits, x.len())?;
    let spec = cfg.as_ref().map(|c| c.spec(x.dim())).transpose()?;
    let label = args.name.clone().unwrap_or_else(|| {
        args.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    });

    let mut table = String::from("name,mean,stderr,n_splits\n");
    if let (Some(cfg), Some(spec)) = (&cfg, &spec) {
        let base = cfg.train_config()?;
        let scores = run_splits(&splits, args.parallel_splits, |i, s| {
            let mut tc = base.clone();
            tc.seed = base.seed.wrapping_add(i as u64);
            let model = train(spec, &x.select(&s.train), &y.select(&s.train), &tc)?;
            let pred = predict(&model, &x.select(&s.test))?;
            let r = rmse(&pred.predictions, &y.select(&s.test))?;
            log::info!("event=split model={} split={i} rmse={r}", spec.name);
            Ok(r)
        })?;
        table.push_str(&format_row(&format!("{label}/{}", spec.name), &scores));
    }
    if args.baseline == Some(BaselineArg::Ridge) {
        let scores = run_splits(&splits, args.parallel_splits, |i, s| {
            let model = fit_ridge(&x.select(&s.train), &y.select(&s.train), args.ridge_lambda)?;
            let r = rmse(&predict_ridge(&model, &x.select(&s.test))?, &y.select(&s.test))?;
            log::info!("event=split model=ridge split={i} rmse={r}");
            Ok(r)
        })?;
        table.push_str(&format_row(&format!("{label}/ridge"), &scores));
    }
    Ok(table)
}

pub fn cmd_export_pca(args: &ExportPcaArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let (x, y) = model_inputs(&model, &args.data)?;
    let export = export_pca_snapshots(&model, &x, y.as_ref(), args.module, &args.times)?;
    let mut bytes = Vec::new();
    export.write_csv(&mut bytes)?;
    write_file(&args.out, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_examples() {
        assert_eq!(mean_and_stderr(&[1.0; 20]), (1.0, Some(0.0)));
        assert_eq!(mean_and_stderr(&[1.0, 3.0]), (2.0, Some(1.0)));
        assert_eq!(mean_and_stderr(&[0.7]), (0.7, None));
        assert_eq!(format_row("yacht/ADA", &[1.0, 3.0]), "yacht/ADA,2,1,2\n");
        assert_eq!(format_row("year/ADA", &[0.5]), "year/ADA,0.5,NA,1\n");
    }

    #[test]
    fn stderr_matches_a_direct_computation() {
        let v = [0.3, 1.7, 2.2, 0.9, 1.1];
        let m = 6.2 / 5.0;
        let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
        let (mean, se) = mean_and_stderr(&v);
        assert!((mean - m).abs() < 1e-15);
        assert!((se.unwrap() - (ss / 4.0 / 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cli_shapes_parse() {
        let c = Cli::try_parse_from([
            "finemorphs", "benchmark", "--data", "d.csv", "--splits", "s", "--baseline", "ridge",
            "--parallel-splits", "3",
        ])
        .unwrap();
        let Command::Benchmark(b) = c.command else { panic!() };
        assert_eq!(b.parallel_splits, 3);
        assert_eq!(b.baseline, Some(BaselineArg::Ridge));
        let c = Cli::try_parse_from([
            "finemorphs", "export-pca", "--model", "m", "--data", "d", "--module", "1", "--times", "0,0.5,1",
            "--out", "o",
        ])
        .unwrap();
        let Command::ExportPca(e) = c.command else { panic!() };
        assert_eq!(e.times, vec![0.0, 0.5, 1.0]);
        assert!(Cli::try_parse_from(["finemorphs", "gen-splits", "--data", "d", "--kind", "odd", "--out", "o"]).is_err());
    }
}
