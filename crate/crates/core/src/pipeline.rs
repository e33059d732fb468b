//! End-to-end runs (train, spectrum, prune, eval, sweep, report) that write
//! their artifacts and a run manifest into an output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bounds::{bound_report, BoundReport};
use crate::config::{DataSpec, ExperimentConfig, KvConfig, SweepKind, SweepSpec};
use crate::covariance::write_eigen_report;
use crate::error::{Error, Result};
use crate::model::{self, Network};
use crate::pruner::{compression_error, output_norm, prune_cached, CovCache, PruneConfig, PruneOutcome, WidthPolicy};
use crate::spectral::{dof, dof_profile, intrinsic_dim, lambda_grid, LAMBDA_COEF_PRUNE, LAMBDA_COEF_TABLE};
use crate::trainer::{evaluate, load_idx, synth_spectrum, train, Dataset, Loss, Metrics, TrainOutcome};
use crate::LayerKind;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance record written next to every set of artifacts. Everything except
/// `wall_clock_secs` is a function of the configuration.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: std::collections::BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    fn new(command: &str, kv: &KvConfig, cfg: &ExperimentConfig, inputs: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: kv.entries().clone(),
            inputs,
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    fn finish(mut self, dir: &Path, outputs: Vec<String>, started: Instant) -> Result<()> {
        self.outputs = outputs;
        self.wall_clock_secs = started.elapsed().as_secs_f64();
        write_json(dir.join(RUN_MANIFEST), &self)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Training and held-out splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let all = match &cfg.data {
        DataSpec::Mnist { images, labels, limit } => load_idx(images, labels, *limit)?,
        DataSpec::Synth { n, d, decay } => synth_spectrum(*n, *d, *decay, cfg.seed)?,
    };
    match cfg.train_count {
        None => Ok(Splits { train: all, test: None }),
        Some(k) if k == 0 || k > all.len() => Err(Error::InvalidParameter(format!(
            "data.train = {k} must lie in 1..={}",
            all.len()
        ))),
        Some(k) if k == all.len() => Ok(Splits { train: all, test: None }),
        Some(k) => Ok(Splits {
            train: all.slice(0, k)?,
            test: Some(all.slice(k, all.len())?),
        }),
    }
}

/// Fresh network with the configured hidden widths and the data's input/output sizes.
pub fn build_network(cfg: &ExperimentConfig, data: &Dataset) -> Result<Network> {
    let mut widths = Vec::with_capacity(cfg.hidden.len() + 2);
    widths.push(data.input_dim());
    widths.extend_from_slice(&cfg.hidden);
    widths.push(data.target_dim());
    Network::dense_with_activation(&widths, cfg.activation, cfg.seed)
}

pub fn train_network(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    let net = build_network(cfg, data)?;
    train(&net, data, &cfg.train)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub train: Metrics,
    pub test: Option<Metrics>,
    /// `‖f_a − f_b‖_n` on the training split when a second model is given.
    pub compression_error: Option<f64>,
}

pub fn eval_network(net: &Network, splits: &Splits, loss: Loss, other: Option<&Network>) -> Result<EvalSummary> {
    Ok(EvalSummary {
        train: evaluate(net, &splits.train, loss)?,
        test: splits.test.as_ref().map(|t| evaluate(net, t, loss)).transpose()?,
        compression_error: other.map(|o| compression_error(net, o, &splits.train)).transpose()?,
    })
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f64,
}

/// Trains a model into `out`: model files, `metrics.json`, `epochs.csv`.
pub fn run_train(kv: &KvConfig, out: &Path) -> Result<EvalSummary> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let splits = load_data(&cfg)?;
    let trained = train_network(&cfg, &splits.train)?;
    create_dir(out)?;
    model::save(&trained.network, out)?;
    let summary = eval_network(&trained.network, &splits, cfg.train.loss, None)?;
    write_json(out.join("metrics.json"), &summary)?;
    let rows: Vec<EpochRow> = trained
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| EpochRow { epoch: i + 1, loss })
        .collect();
    write_csv_rows(&out.join("epochs.csv"), &rows)?;
    RunManifest::new("train", kv, &cfg, data_inputs(&cfg)).finish(
        out,
        vec![model::MODEL_MANIFEST.into(), "metrics.json".into(), "epochs.csv".into()],
        started,
    )?;
    Ok(summary)
}

fn data_inputs(cfg: &ExperimentConfig) -> Vec<String> {
    match &cfg.data {
        DataSpec::Mnist { images, labels, .. } => vec![display(images), display(labels)],
        DataSpec::Synth { n, d, decay } => vec![format!("synth(n={n}, d={d}, decay={decay}, seed={})", cfg.seed)],
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumRow {
    pub layer: usize,
    pub width: usize,
    pub trace: f64,
    pub rank: usize,
    /// `N̂(10⁻³ Tr Σ̂)`.
    pub dof_table: f64,
    /// `N̂(10⁻⁶ Tr Σ̂)`.
    pub dof_prune: f64,
    /// `N̂_ℓ N̂_{ℓ+1} k²` at `λ = 10⁻³ Tr Σ̂`, when layer `ℓ+1` is also analysed.
    pub intrinsic_dim: Option<f64>,
}

/// Eigenvalue spectra, degrees-of-freedom curves and the per-layer summary.
pub fn spectrum(net: &Network, data: &Dataset, layers: &[usize], out: &Path) -> Result<Vec<SpectrumRow>> {
    let layers: Vec<usize> = if layers.is_empty() { (2..=net.depth()).collect() } else { layers.to_vec() };
    for &l in &layers {
        if l < 2 || l > net.depth() {
            return Err(Error::InvalidParameter(format!(
                "no hidden node layer {l}; valid layers are 2..={}",
                net.depth()
            )));
        }
    }
    create_dir(out)?;
    let mut cache = CovCache::new(net, data);
    let mut rows = Vec::with_capacity(layers.len());
    for &l in &layers {
        let cov = cache.get(l)?;
        write_eigen_report(&cov, out.join(format!("eigen_layer{l}.csv")))?;
        let grid = lambda_grid(&cov, 1.0, 1e-8, 41);
        dof_profile(&cov, &grid)?.write_csv(out.join(format!("dof_layer{l}.csv")))?;
        let intrinsic = if layers.contains(&(l + 1)) {
            let next = cache.get(l + 1)?;
            let kernel = match net.layer(l).kind {
                LayerKind::Conv2d(g) => g.kernel,
                LayerKind::Dense => 1,
            };
            Some(intrinsic_dim(&cov, &next, kernel, LAMBDA_COEF_TABLE)?)
        } else {
            None
        };
        rows.push(SpectrumRow {
            layer: l,
            width: cov.dim(),
            trace: cov.trace(),
            rank: cov.rank()?,
            dof_table: dof(&cov, LAMBDA_COEF_TABLE * cov.trace())?,
            dof_prune: dof(&cov, LAMBDA_COEF_PRUNE * cov.trace())?,
            intrinsic_dim: intrinsic,
        });
    }
    write_csv_rows(&out.join("spectrum_summary.csv"), &rows)?;
    Ok(rows)
}

pub fn run_spectrum(kv: &KvConfig, model_dir: &Path, out: &Path) -> Result<Vec<SpectrumRow>> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let net = model::load(model_dir)?;
    let splits = load_data(&cfg)?;
    let rows = spectrum(&net, &splits.train, &cfg.spectrum_layers, out)?;
    let mut outputs: Vec<String> = vec!["spectrum_summary.csv".into()];
    for r in &rows {
        outputs.push(format!("eigen_layer{}.csv", r.layer));
        outputs.push(format!("dof_layer{}.csv", r.layer));
    }
    let mut inputs = vec![display(model_dir)];
    inputs.extend(data_inputs(&cfg));
    RunManifest::new("spectrum", kv, &cfg, inputs).finish(out, outputs, started)?;
    Ok(rows)
}

/// Result of [`run_prune`] / [`run_report`].
#[derive(Clone, Debug)]
pub struct PruneRun {
    pub outcome: PruneOutcome,
    pub report: BoundReport,
}

impl PruneRun {
    pub fn feasible(&self) -> bool {
        self.outcome.infeasible_layers().is_empty()
    }
}

fn prune_and_report(cfg: &ExperimentConfig, net: &Network, data: &Dataset) -> Result<PruneRun> {
    if cfg.prune.layers.is_empty() {
        return Err(Error::InvalidParameter("prune.layers is empty; nothing to prune".into()));
    }
    let mut cache = CovCache::new(net, data);
    let outcome = prune_cached(&mut cache, &cfg.prune)?;
    let report = bound_report(net, &outcome, data, &cfg.bound)?;
    Ok(PruneRun { outcome, report })
}

fn write_report(report: &BoundReport, out: &Path) -> Result<Vec<String>> {
    report.write_json(out.join("bound.json"))?;
    report.write_layer_csv(out.join("bound_layers.csv"))?;
    report.write_summary_csv(out.join("bound_summary.csv"))?;
    Ok(vec!["bound.json".into(), "bound_layers.csv".into(), "bound_summary.csv".into()])
}

/// Prunes the model in `model_dir`; writes `model/`, `selections.json` and the
/// bound report. Artifacts are written even when a layer is infeasible.
pub fn run_prune(kv: &KvConfig, model_dir: &Path, out: &Path) -> Result<PruneRun> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let net = model::load(model_dir)?;
    let splits = load_data(&cfg)?;
    let run = prune_and_report(&cfg, &net, &splits.train)?;
    create_dir(out)?;
    let model_out = out.join("model");
    model::save(&run.outcome.network, &model_out)?;
    write_json(out.join("selections.json"), &run.outcome.selections)?;
    let mut outputs = vec!["model/".to_string(), "selections.json".into()];
    outputs.extend(write_report(&run.report, out)?);
    let eval = eval_network(&run.outcome.network, &splits, cfg.train.loss, Some(&net))?;
    write_json(out.join("metrics.json"), &eval)?;
    outputs.push("metrics.json".into());
    let mut inputs = vec![display(model_dir)];
    inputs.extend(data_inputs(&cfg));
    RunManifest::new("prune", kv, &cfg, inputs).finish(out, outputs, started)?;
    Ok(run)
}

/// Bound report only; the pruning run is recomputed from the configuration.
pub fn run_report(kv: &KvConfig, model_dir: &Path, out: &Path) -> Result<PruneRun> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let net = model::load(model_dir)?;
    let splits = load_data(&cfg)?;
    let run = prune_and_report(&cfg, &net, &splits.train)?;
    create_dir(out)?;
    let outputs = write_report(&run.report, out)?;
    let mut inputs = vec![display(model_dir)];
    inputs.extend(data_inputs(&cfg));
    RunManifest::new("report", kv, &cfg, inputs).finish(out, outputs, started)?;
    Ok(run)
}

/// Evaluates `model_dir` (and optionally its distance to `other_dir`).
pub fn run_eval(kv: &KvConfig, model_dir: &Path, other_dir: Option<&Path>, out: Option<&Path>) -> Result<EvalSummary> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let net = model::load(model_dir)?;
    let other = other_dir.map(model::load).transpose()?;
    let splits = load_data(&cfg)?;
    let summary = eval_network(&net, &splits, cfg.train.loss, other.as_ref())?;
    if let Some(out) = out {
        create_dir(out)?;
        write_json(out.join("eval.json"), &summary)?;
        let mut inputs = vec![display(model_dir)];
        inputs.extend(other_dir.map(display));
        inputs.extend(data_inputs(&cfg));
        RunManifest::new("eval", kv, &cfg, inputs).finish(out, vec!["eval.json".into()], started)?;
    }
    Ok(summary)
}

/// One point of a width, θ or λ sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub kind: SweepKind,
    pub value: f64,
    pub layer: usize,
    pub width: usize,
    pub lambda: f64,
    pub theta: f64,
    pub loss_theta: f64,
    pub compression_error: f64,
    /// `‖f̂ − f♯‖_n / ‖f̂‖_n` on the training split.
    pub relative_error: f64,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub feasible: bool,
}

fn sweep_config(base: &PruneConfig, spec: &SweepSpec, layer: usize, value: f64) -> Result<PruneConfig> {
    let mut cfg = base.clone();
    let current = base.layers.get(&layer).copied();
    let coef = match current {
        Some(WidthPolicy::LambdaCoef(c)) | Some(WidthPolicy::WidthAndLambdaCoef { coef: c, .. }) => Some(c),
        _ => None,
    };
    let width = spec.width.or(match current {
        Some(WidthPolicy::Width(w)) | Some(WidthPolicy::WidthAndLambdaCoef { width: w, .. }) => Some(w),
        _ => None,
    });
    let policy = match spec.kind {
        SweepKind::Width => {
            if !(value >= 1.0) || value.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("sweep width {value} is not a positive integer")));
            }
            let w = value as usize;
            match coef {
                Some(coef) => WidthPolicy::WidthAndLambdaCoef { width: w, coef },
                None => WidthPolicy::Width(w),
            }
        }
        SweepKind::Theta => {
            cfg.theta = value;
            current.unwrap_or(WidthPolicy::LambdaCoef(LAMBDA_COEF_PRUNE))
        }
        SweepKind::LambdaCoef => match width {
            Some(width) => WidthPolicy::WidthAndLambdaCoef { width, coef: value },
            None => WidthPolicy::LambdaCoef(value),
        },
    };
    cfg.layers.insert(layer, policy);
    Ok(cfg)
}

/// Prunes once per sweep value, sharing covariances across points.
pub fn sweep(cache: &mut CovCache, test: Option<&Dataset>, base: &PruneConfig, spec: &SweepSpec, loss: Loss) -> Result<Vec<SweepPoint>> {
    let net = cache.network();
    let data = cache.data();
    let layer = spec
        .layer
        .or_else(|| base.layers.keys().next().copied())
        .ok_or_else(|| Error::InvalidParameter("sweep.layer is unset and prune.layers is empty".into()))?;
    if spec.values.is_empty() {
        return Err(Error::InvalidParameter("sweep.values is empty".into()));
    }
    let norm = output_norm(net, data)?;
    let mut points = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let cfg = sweep_config(base, spec, layer, value)?;
        let outcome = prune_cached(cache, &cfg)?;
        let sel = outcome
            .selection(layer)
            .ok_or_else(|| Error::InvalidParameter(format!("layer {layer} was not pruned")))?;
        let err = compression_error(net, &outcome.network, data)?;
        let train_m = evaluate(&outcome.network, data, loss)?;
        let test_m = test.map(|t| evaluate(&outcome.network, t, loss)).transpose()?;
        points.push(SweepPoint {
            kind: spec.kind,
            value,
            layer,
            width: sel.indices.len(),
            lambda: sel.lambda,
            theta: cfg.theta,
            loss_theta: sel.loss_theta,
            compression_error: err,
            relative_error: if norm > 0.0 { err / norm } else { 0.0 },
            train_loss: train_m.loss,
            train_accuracy: train_m.accuracy,
            test_loss: test_m.map(|m| m.loss),
            test_accuracy: test_m.and_then(|m| m.accuracy),
            feasible: outcome.infeasible_layers().is_empty(),
        });
    }
    Ok(points)
}

pub fn write_sweep_csv(points: &[SweepPoint], path: impl AsRef<Path>) -> Result<()> {
    write_csv_rows(path.as_ref(), points)
}

pub fn run_sweep(kv: &KvConfig, model_dir: &Path, out: &Path) -> Result<Vec<SweepPoint>> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_kv(kv)?;
    let net = model::load(model_dir)?;
    let splits = load_data(&cfg)?;
    let mut cache = CovCache::new(&net, &splits.train);
    let points = sweep(&mut cache, splits.test.as_ref(), &cfg.prune, &cfg.sweep, cfg.train.loss)?;
    create_dir(out)?;
    write_sweep_csv(&points, out.join("sweep.csv"))?;
    let mut inputs = vec![display(model_dir)];
    inputs.extend(data_inputs(&cfg));
    RunManifest::new("sweep", kv, &cfg, inputs).finish(out, vec!["sweep.csv".into()], started)?;
    Ok(points)
}

/// Files under `dir` (recursively) except run manifests, sorted by relative path.
pub fn artifact_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
                out.push(path.strip_prefix(dir).expect("path under dir").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::SYNTH_OUTPUTS;

    fn synth_kv() -> KvConfig {
        let mut kv = KvConfig::default();
        for (k, v) in [
            ("data.source", "synth"),
            ("synth.n", "120"),
            ("synth.d", "6"),
            ("synth.decay", "1.0"),
            ("data.train", "100"),
            ("model.hidden", "10,8"),
            ("train.epochs", "3"),
            ("train.batch_size", "16"),
            ("train.learning_rate", "0.02"),
            ("prune.layers", "2,3"),
            ("prune.widths", "6,5"),
            ("prune.lambda_coef", "1e-6"),
            ("prune.budget_constraint", "false"),
            ("sweep.kind", "width"),
            ("sweep.layer", "2"),
            ("sweep.values", "2,4,6,8,10"),
        ] {
            kv.set(k, v).unwrap();
        }
        kv
    }

    #[test]
    fn train_prune_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let kv = synth_kv();
        let model_dir = dir.path().join("model");
        let summary = run_train(&kv, &model_dir).unwrap();
        assert!(summary.test.is_some());
        assert!(model_dir.join(RUN_MANIFEST).exists());
        let run = run_prune(&kv, &model_dir, &dir.path().join("pruned")).unwrap();
        assert!(run.feasible());
        let pruned = model::load(dir.path().join("pruned/model")).unwrap();
        assert_eq!(pruned.widths(), vec![6, 6, 5, SYNTH_OUTPUTS]);
        let eval = run_eval(&kv, &dir.path().join("pruned/model"), Some(&model_dir), None).unwrap();
        assert!((eval.compression_error.unwrap() - run.report.compression_error).abs() < 1e-12);
        let report = run_report(&kv, &model_dir, &dir.path().join("report")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("report/bound.json")).unwrap(),
            fs::read(dir.path().join("pruned/bound.json")).unwrap()
        );
        assert_eq!(report.report.delta1, run.report.delta1);
    }

    #[test]
    fn width_sweep_is_monotone_toward_full_width() {
        let dir = tempfile::tempdir().unwrap();
        let mut kv = synth_kv();
        kv.set("prune.layers", "2").unwrap();
        kv.set("prune.widths", "").unwrap();
        let model_dir = dir.path().join("model");
        run_train(&kv, &model_dir).unwrap();
        let points = run_sweep(&kv, &model_dir, &dir.path().join("sweep")).unwrap();
        assert_eq!(points.len(), 5);
        assert!(points.last().unwrap().relative_error < 1e-3, "{points:?}");
        assert!(points.iter().all(|p| p.width == p.value as usize));
        let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn spectrum_outputs_and_bad_layer() {
        let dir = tempfile::tempdir().unwrap();
        let kv = synth_kv();
        let model_dir = dir.path().join("model");
        run_train(&kv, &model_dir).unwrap();
        let rows = run_spectrum(&kv, &model_dir, &dir.path().join("spec")).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].intrinsic_dim.is_some() && rows[1].intrinsic_dim.is_none());
        assert!(dir.path().join("spec/eigen_layer3.csv").exists());
        let mut bad = kv.clone();
        bad.set("spectrum.layers", "7").unwrap();
        assert!(run_spectrum(&bad, &model_dir, &dir.path().join("bad")).is_err());
    }

    #[test]
    fn artifact_listing_skips_manifests() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.bin"), b"1").unwrap();
        fs::write(dir.path().join(RUN_MANIFEST), b"{}").unwrap();
        fs::write(dir.path().join("b.json"), b"{}").unwrap();
        assert_eq!(artifact_files(dir.path()).unwrap(), vec![PathBuf::from("a/x.bin"), PathBuf::from("b.json")]);
    }
}
