//! Command bodies. Each returns a one-line report on success.
//!
//! CSV schemas (column order is fixed):
//!
//! * `runs.csv`: `lr,seed,lambda,best_accuracy,time_to_best_s,epoch_of_best,epochs_run,mean_steps,final_reg_integral,failed_batches,invalid`
//! * `history.csv`: `epoch,accuracy,reg_integral`
//! * `histogram.csv`: `bin,count`
//! * `compare.csv`: `d,N,arch,avg_acc,avg_time_s,params,avg_steps`
//! * `variants.csv`: `variant` followed by one column per histogram bin
//! * `reg_sweep.csv`: `arch,lambda,avg_acc,avg_time_s,avg_integral,avg_steps`
//! * residual probe: `n_steps,max_residual`
//!
//! Empty cells mean "not applicable" or, in grid commands, a failed cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nodetf::{
    gen_dataset, run_ensemble, train_run, Architecture, EnsembleSummary, Histogram, Model, OrderFit, ParityDataset,
    RhsVariant, RunRecord, SOS,
};
use serde::Serialize;

use crate::checkpoint;
use crate::spec::{CommandKind, ExperimentSpec};
use crate::CliError;

pub fn execute(spec: &ExperimentSpec) -> Result<String, CliError> {
    match spec.command {
        CommandKind::GenData => gen_data(spec),
        CommandKind::Train => train(spec),
        CommandKind::Ensemble => ensemble(spec),
        CommandKind::Compare => compare(spec),
        CommandKind::Variants => variants(spec),
        CommandKind::RegSweep => reg_sweep(spec),
        CommandKind::ResidualProbe => residual_probe(spec),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Failure(format!("encoding {}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn out_dir(spec: &ExperimentSpec) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&spec.out).map_err(|e| io_err(&spec.out, e))?;
    write_text(&spec.out.join("spec.toml"), &spec.to_toml()?)?;
    Ok(spec.out.clone())
}

fn dataset(spec: &ExperimentSpec) -> Result<ParityDataset, CliError> {
    gen_dataset(spec.data.max_len).map_err(|e| CliError::Usage(e.to_string()))
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

fn gen_data(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    write_text(&spec.out, &data.to_text())?;
    Ok(format!("wrote {} strings to {}", data.len(), spec.out.display()))
}

#[derive(Serialize)]
struct RunRow {
    lr: f64,
    seed: u64,
    lambda: f64,
    best_accuracy: f64,
    time_to_best_s: f64,
    epoch_of_best: usize,
    epochs_run: usize,
    mean_steps: Option<f64>,
    final_reg_integral: f64,
    failed_batches: usize,
    invalid: bool,
}

impl From<&RunRecord> for RunRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            lr: r.learning_rate,
            seed: r.seed,
            lambda: r.lambda,
            best_accuracy: r.best_accuracy,
            time_to_best_s: r.time_to_best_s,
            epoch_of_best: r.epoch_of_best,
            epochs_run: r.epochs_run,
            mean_steps: r.mean_steps_per_block,
            final_reg_integral: r.final_reg_integral,
            failed_batches: r.failed_batches,
            invalid: r.invalid,
        }
    }
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    accuracy: f64,
    reg_integral: f64,
}

#[derive(Serialize)]
struct RunReport<'a> {
    spec: &'a ExperimentSpec,
    run: &'a RunRecord,
    params: usize,
}

fn train(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    let mcfg = spec.model_config(spec.model.architecture, spec.single_d()?, spec.single_n_blocks()?);
    let tcfg = spec.train_config(spec.training.learning_rate, spec.seed_base, spec.lambda());
    let outcome = train_run(&mcfg, &tcfg, &data).map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = out_dir(spec)?;
    let record = &outcome.record;
    write_json(
        &dir.join("run.json"),
        &RunReport {
            spec,
            run: record,
            params: outcome.best_model.param_count(),
        },
    )?;
    let history: Vec<HistoryRow> = record
        .accuracy_history
        .iter()
        .zip(&record.reg_history)
        .enumerate()
        .map(|(i, (&accuracy, &reg_integral))| HistoryRow {
            epoch: i + 1,
            accuracy,
            reg_integral,
        })
        .collect();
    write_csv(&dir.join("history.csv"), &history)?;
    checkpoint::save(&dir.join("checkpoint.ntfc"), &outcome.best_model, Some(record))?;
    if record.invalid {
        return Err(CliError::Failure(format!(
            "run invalid: {} of {} batches failed",
            record.failed_batches, record.total_batches
        )));
    }
    Ok(format!(
        "best accuracy {:.4} at epoch {} ({:.2}s)",
        record.best_accuracy, record.epoch_of_best, record.time_to_best_s
    ))
}

#[derive(Serialize)]
struct BinRow {
    bin: String,
    count: usize,
}

#[derive(Serialize)]
struct EnsembleReport<'a> {
    spec: &'a ExperimentSpec,
    summary: &'a EnsembleSummary,
}

fn ensemble(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    let mcfg = spec.model_config(spec.model.architecture, spec.single_d()?, spec.single_n_blocks()?);
    let summary = run_ensemble(&mcfg, &spec.ensemble_config(spec.lambda()), &data).map_err(failure)?;
    let dir = out_dir(spec)?;
    write_json(
        &dir.join("ensemble.json"),
        &EnsembleReport {
            spec,
            summary: &summary,
        },
    )?;
    let rows: Vec<RunRow> = summary.runs.iter().map(RunRow::from).collect();
    write_csv(&dir.join("runs.csv"), &rows)?;
    let bins: Vec<BinRow> = Histogram::labels()
        .into_iter()
        .zip(&summary.histogram.counts)
        .map(|(bin, &count)| BinRow { bin, count })
        .collect();
    write_csv(&dir.join("histogram.csv"), &bins)?;
    if summary.all_invalid() {
        return Err(CliError::Failure("every run in the ensemble was invalid".into()));
    }
    Ok(format!(
        "trimmed average accuracy {:.4} over {} of {} runs",
        summary.avg_accuracy,
        summary.runs.len() - summary.drop_k,
        summary.runs.len()
    ))
}

#[derive(Serialize)]
struct CompareRow {
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    arch: &'static str,
    avg_acc: Option<f64>,
    avg_time_s: Option<f64>,
    params: Option<usize>,
    avg_steps: Option<f64>,
}

#[derive(Serialize)]
struct CompareCell {
    d: usize,
    n_blocks: usize,
    arch: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<EnsembleSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct CompareReport<'a> {
    spec: &'a ExperimentSpec,
    cells: Vec<CompareCell>,
}

fn compare(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    let ecfg = spec.ensemble_config(spec.lambda());
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &d in &spec.model.d {
        for &n in &spec.model.n_blocks {
            for &arch in &spec.compare.architectures {
                let mcfg = spec.model_config(arch, d, n);
                let result = run_ensemble(&mcfg, &ecfg, &data);
                let ok = result.as_ref().ok().filter(|s| !s.all_invalid());
                rows.push(CompareRow {
                    d,
                    n,
                    arch: arch.as_str(),
                    avg_acc: ok.map(|s| s.avg_accuracy),
                    avg_time_s: ok.map(|s| s.avg_time_s),
                    params: Model::seeded(mcfg, 0).ok().map(|m| m.param_count()),
                    avg_steps: ok.and_then(|s| s.avg_steps),
                });
                cells.push(match result {
                    Ok(s) => CompareCell {
                        d,
                        n_blocks: n,
                        arch: arch.as_str(),
                        error: s.all_invalid().then(|| "every run was invalid".to_string()),
                        summary: Some(s),
                    },
                    Err(e) => CompareCell {
                        d,
                        n_blocks: n,
                        arch: arch.as_str(),
                        summary: None,
                        error: Some(e.to_string()),
                    },
                });
            }
        }
    }
    let dir = out_dir(spec)?;
    write_csv(&dir.join("compare.csv"), &rows)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    let total = cells.len();
    write_json(&dir.join("compare.json"), &CompareReport { spec, cells })?;
    if failed == total {
        return Err(CliError::Failure("every cell of the grid failed".into()));
    }
    Ok(format!("{total} cells, {failed} failed"))
}

pub const VARIANTS: [(&str, RhsVariant, bool); 4] = [
    ("basic_ti_mhsa", RhsVariant::Basic, false),
    ("basic_td_mhsa", RhsVariant::Basic, true),
    ("skip_ti_mhsa", RhsVariant::MhsaSkip, false),
    ("skip_td_mhsa", RhsVariant::MhsaSkip, true),
];

#[derive(Serialize)]
struct VariantEntry {
    counts: Vec<usize>,
    avg_accuracy: f64,
    invalid_runs: usize,
    runs: Vec<RunRecord>,
}

#[derive(Serialize)]
struct VariantsReport<'a> {
    spec: &'a ExperimentSpec,
    bins: Vec<String>,
    variants: BTreeMap<&'static str, VariantEntry>,
}

fn variants(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    let (d, n) = (spec.single_d()?, spec.single_n_blocks()?);
    let ecfg = spec.ensemble_config(spec.lambda());
    let mut entries = BTreeMap::new();
    let mut csv_rows = Vec::new();
    for (name, variant, td) in VARIANTS {
        let mcfg = spec.model_config(Architecture::Node, d, n).with_variant(variant, td);
        let s = run_ensemble(&mcfg, &ecfg, &data).map_err(failure)?;
        let mut row = vec![name.to_string()];
        row.extend(s.histogram.counts.iter().map(usize::to_string));
        csv_rows.push(row);
        entries.insert(
            name,
            VariantEntry {
                counts: s.histogram.counts.clone(),
                avg_accuracy: s.avg_accuracy,
                invalid_runs: s.invalid_runs,
                runs: s.runs,
            },
        );
    }
    let dir = out_dir(spec)?;
    let path = dir.join("variants.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant".to_string()];
    header.extend(Histogram::labels());
    w.write_record(&header).map_err(|e| io_err(&path, e))?;
    for row in &csv_rows {
        w.write_record(row).map_err(|e| io_err(&path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(&path, e))?;
    write_text(&path, &String::from_utf8(bytes).expect("csv output is UTF-8"))?;
    let all_invalid = entries.values().all(|e| e.invalid_runs == e.runs.len());
    write_json(
        &dir.join("variants.json"),
        &VariantsReport {
            spec,
            bins: Histogram::labels(),
            variants: entries,
        },
    )?;
    if all_invalid {
        return Err(CliError::Failure("every run of every variant was invalid".into()));
    }
    Ok(format!("histograms for {} variants", VARIANTS.len()))
}

#[derive(Serialize)]
struct SweepRow {
    arch: &'static str,
    lambda: Option<f64>,
    avg_acc: Option<f64>,
    avg_time_s: Option<f64>,
    avg_integral: Option<f64>,
    avg_steps: Option<f64>,
}

#[derive(Serialize)]
struct SweepEntry {
    arch: &'static str,
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<EnsembleSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    spec: &'a ExperimentSpec,
    entries: Vec<SweepEntry>,
}

/// Zero first (always present), then the positive values in decreasing order.
pub fn sweep_order(lambdas: &[f64]) -> Vec<f64> {
    let mut positive: Vec<f64> = lambdas.iter().copied().filter(|&l| l > 0.0).collect();
    positive.sort_by(|a, b| b.total_cmp(a));
    positive.dedup();
    std::iter::once(0.0).chain(positive).collect()
}

fn reg_sweep(spec: &ExperimentSpec) -> Result<String, CliError> {
    let data = dataset(spec)?;
    let (d, n) = (spec.single_d()?, spec.single_n_blocks()?);
    let mut jobs = vec![(Architecture::Vanilla, None)];
    jobs.extend(
        sweep_order(&spec.training.lambdas)
            .into_iter()
            .map(|l| (Architecture::Node, Some(l))),
    );
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for (arch, lambda) in jobs {
        let mcfg = spec.model_config(arch, d, n);
        let result = run_ensemble(&mcfg, &spec.ensemble_config(lambda.unwrap_or(0.0)), &data);
        let ok = result.as_ref().ok().filter(|s| !s.all_invalid());
        rows.push(SweepRow {
            arch: arch.as_str(),
            lambda,
            avg_acc: ok.map(|s| s.avg_accuracy),
            avg_time_s: ok.map(|s| s.avg_time_s),
            avg_integral: ok.filter(|_| arch == Architecture::Node).map(|s| s.avg_reg_integral),
            avg_steps: ok.and_then(|s| s.avg_steps),
        });
        entries.push(match result {
            Ok(s) => SweepEntry {
                arch: arch.as_str(),
                lambda,
                error: s.all_invalid().then(|| "every run was invalid".to_string()),
                summary: Some(s),
            },
            Err(e) => SweepEntry {
                arch: arch.as_str(),
                lambda,
                summary: None,
                error: Some(e.to_string()),
            },
        });
    }
    let dir = out_dir(spec)?;
    write_csv(&dir.join("reg_sweep.csv"), &rows)?;
    let failed = entries.iter().filter(|e| e.error.is_some()).count();
    let total = entries.len();
    write_json(&dir.join("reg_sweep.json"), &SweepReport { spec, entries })?;
    if failed == total {
        return Err(CliError::Failure("every ensemble of the sweep failed".into()));
    }
    Ok(format!("{total} ensembles, {failed} failed"))
}

/// `"101"` to `[SOS, 1, 0, 1]`.
pub fn parse_bits(bits: &str) -> Result<Vec<usize>, CliError> {
    if bits.is_empty() {
        return Err(CliError::Usage("--tokens needs at least one bit".into()));
    }
    std::iter::once(Ok(SOS))
        .chain(bits.chars().map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(CliError::Usage(format!("--tokens: {other:?} is not a bit"))),
        }))
        .collect()
}

#[derive(Serialize)]
struct ProbeRow {
    n_steps: usize,
    max_residual: f64,
}

#[derive(Serialize)]
struct ProbeReport<'a> {
    checkpoint: &'a Path,
    tokens: &'a str,
    rows: &'a [(usize, f64)],
    slope: Option<f64>,
    degenerate: bool,
}

fn residual_probe(spec: &ExperimentSpec) -> Result<String, CliError> {
    let path = spec
        .probe
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("residual-probe needs --checkpoint".into()))?;
    let tokens = parse_bits(&spec.probe.tokens)?;
    if spec.probe.step_counts.is_empty() || spec.probe.step_counts.contains(&0) {
        return Err(CliError::Usage("--steps needs positive step counts".into()));
    }
    let (model, _) = checkpoint::load(path)?;
    if model.config.architecture != Architecture::Node {
        return Err(CliError::Failure(format!(
            "{} holds a vanilla model; the probe needs a neural-ODE checkpoint",
            path.display()
        )));
    }
    let probe = model
        .residual_decay_probe(&tokens, &spec.probe.step_counts)
        .map_err(failure)?;
    let rows: Vec<ProbeRow> = probe
        .rows
        .iter()
        .map(|&(n_steps, max_residual)| ProbeRow { n_steps, max_residual })
        .collect();
    write_csv(&spec.out, &rows)?;
    let slope = match probe.fit {
        Some(OrderFit::Slope(s)) => Some(s),
        _ => None,
    };
    let sidecar = spec.out.with_extension("json");
    write_json(
        &sidecar,
        &ProbeReport {
            checkpoint: path,
            tokens: &spec.probe.tokens,
            rows: &probe.rows,
            slope,
            degenerate: probe.fit == Some(OrderFit::Degenerate),
        },
    )?;
    Ok(match slope {
        Some(s) => format!("log-log slope {s:.3} over {} step counts", rows.len()),
        None => format!("{} step counts, no slope", rows.len()),
    })
}
