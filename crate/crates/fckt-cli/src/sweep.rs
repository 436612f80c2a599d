//! Hyperparameter sweeps: one training run per grid cell, aggregated into
//! CSV and JSON keyed by parameter value.

use crate::{load_config, runtime, CliResult, Failure};
use fckt_core::config::RunConfig;
use fckt_core::metrics::evaluate_model;
use fckt_core::trainer::{split_train_val, Checkpoint, Trainer};
use serde::Serialize;
use std::path::PathBuf;

/// Parameters a grid may range over.
const GRID_KEYS: &[&str] = &["transfer.xi", "transfer.h", "trainer.lambda", "contrast.tau"];

#[derive(Clone, Debug)]
struct GridAxis {
    key: String,
    values: Vec<String>,
}

fn parse_grid(specs: &[String]) -> CliResult<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(Failure::Validation(
            "empty grid; pass at least one --grid key=v1,v2".into(),
        ));
    }
    let mut axes = Vec::new();
    for spec in specs {
        let (key, values) = spec.split_once('=').ok_or_else(|| {
            Failure::Validation(format!("grid spec {spec:?} is not key=v1,v2,..."))
        })?;
        if !GRID_KEYS.contains(&key) {
            return Err(Failure::Validation(format!(
                "grid key {key:?} not supported; choose from {}",
                GRID_KEYS.join(", ")
            )));
        }
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .collect();
        if values.is_empty() {
            return Err(Failure::Validation(format!("grid key {key} has no values")));
        }
        axes.push(GridAxis {
            key: key.to_string(),
            values,
        });
    }
    Ok(axes)
}

fn cartesian(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for value in &axis.values {
                let mut extended = cell.clone();
                extended.push((axis.key.clone(), value.clone()));
                next.push(extended);
            }
        }
        cells = next;
    }
    cells
}

#[derive(Serialize)]
struct CellResult {
    cell: usize,
    params: Vec<(String, String)>,
    status: String,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    ae_f1: Option<f64>,
    sp_accuracy: Option<f64>,
    best_epoch: Option<usize>,
}

fn run_cell(
    base: &RunConfig,
    assignments: &[(String, String)],
    cell: usize,
    sweep_dir: &std::path::Path,
) -> Result<(fckt_core::metrics::EvalReport, Option<usize>), String> {
    let mut cfg = base.clone();
    for (key, value) in assignments {
        cfg.apply_override(key, value).map_err(|e| e.to_string())?;
    }
    cfg.run_id = format!("cell_{cell:03}");
    cfg.output_dir = sweep_dir.to_path_buf();
    cfg.validate().map_err(|e| e.to_string())?;

    let train_path = cfg
        .data
        .train_path
        .clone()
        .ok_or("config sets no data.train_path")?;
    let sentences =
        fckt_core::corpus::load_dataset(&train_path, cfg.data.format()).map_err(|e| e.to_string())?;
    let (train, val) = match &cfg.data.val_path {
        Some(val_path) => (
            sentences,
            fckt_core::corpus::load_dataset(val_path, cfg.data.format())
                .map_err(|e| e.to_string())?,
        ),
        None => {
            let (val, train) =
                split_train_val(&sentences, cfg.trainer.val_fraction, cfg.trainer.seed);
            (train, val)
        }
    };

    let run_dir = cfg.run_dir();
    let mut trainer = Trainer::new(cfg.clone(), &train).map_err(|e| e.to_string())?;
    let outcome = trainer
        .train(&train, &val, &run_dir)
        .map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::load(&outcome.best_checkpoint).map_err(|e| e.to_string())?;
    let report = evaluate_model(&ckpt.model, &val, &cfg).map_err(|e| e.to_string())?;
    Ok((report, outcome.best_epoch))
}

pub fn cmd_sweep(m: &clap::ArgMatches) -> CliResult<()> {
    let base = load_config(m)?;
    let specs: Vec<String> = m
        .get_many::<String>("grid")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    let axes = parse_grid(&specs)?;
    let cells = cartesian(&axes);
    let sweep_dir = m
        .get_one::<String>("output")
        .map(PathBuf::from)
        .unwrap_or_else(|| base.output_dir.join(format!("{}-sweep", base.run_id)));
    std::fs::create_dir_all(&sweep_dir).map_err(runtime)?;

    println!(
        "sweep over {} cell(s) in {}",
        cells.len(),
        sweep_dir.display()
    );
    let mut results = Vec::with_capacity(cells.len());
    for (i, assignments) in cells.iter().enumerate() {
        let label: Vec<String> = assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("cell {i:03}: {}", label.join(" "));
        match run_cell(&base, assignments, i, &sweep_dir) {
            Ok((report, best_epoch)) => {
                println!("  f1={:.4}", report.f1);
                results.push(CellResult {
                    cell: i,
                    params: assignments.clone(),
                    status: "ok".into(),
                    precision: Some(report.precision),
                    recall: Some(report.recall),
                    f1: Some(report.f1),
                    ae_f1: Some(report.ae_f1),
                    sp_accuracy: Some(report.sp_accuracy),
                    best_epoch,
                });
            }
            Err(msg) => {
                eprintln!("  failed: {msg}");
                results.push(CellResult {
                    cell: i,
                    params: assignments.clone(),
                    status: format!("failed: {msg}"),
                    precision: None,
                    recall: None,
                    f1: None,
                    ae_f1: None,
                    sp_accuracy: None,
                    best_epoch: None,
                });
            }
        }
    }

    // CSV: one column per swept key, then the metric columns
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    let mut csv = String::new();
    csv.push_str("cell,");
    csv.push_str(&keys.join(","));
    csv.push_str(",status,precision,recall,f1,ae_f1,sp_accuracy,best_epoch\n");
    for r in &results {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let values: Vec<String> = r.params.iter().map(|(_, v)| v.clone()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.cell,
            values.join(","),
            if r.status == "ok" { "ok" } else { "failed" },
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            fmt_opt(r.f1),
            fmt_opt(r.ae_f1),
            fmt_opt(r.sp_accuracy),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
        ));
    }
    let csv_path = sweep_dir.join("sweep.csv");
    std::fs::write(&csv_path, &csv).map_err(runtime)?;
    let json_path = sweep_dir.join("sweep.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&results).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!("wrote {} and {}", csv_path.display(), json_path.display());

    if results.iter().all(|r| r.status != "ok") {
        return Err(Failure::Runtime("every sweep cell failed".into()));
    }
    Ok(())
}
