//! Batch front end: config ingestion, run orchestration, result emission.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 simulation error.
//! Failures print a machine-readable JSON object to stderr.

use crate::analysis::{fit_exponential, fit_linear_weighted, tof_temperature, FitResult};
use crate::config::{load_config, Manifest, RunConfig, ScanConfig, ScanKind};
use crate::error::{Error, Result};
use crate::sequence::{
    axial_field_scan, position_scan, power_scan, run_sequence_with, stroboscopic_scan, Trace,
};
use crate::vec3::V3;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct CommonArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub overrides: Vec<(String, String)>,
}

fn emit_error(err: &Error) -> i32 {
    let code = err.exit_code();
    let payload = json!({
        "error": err.to_string(),
        "exit_code": code,
    });
    eprintln!("{payload}");
    code
}

fn with_thread_pool<T>(threads: usize, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction");
    pool.install(f)
}

fn prepare(args: &CommonArgs) -> Result<(RunConfig, u64)> {
    let (config, manifest_seed) = load_config(&args.config, &args.overrides)?;
    let seed = args.seed.or(manifest_seed).unwrap_or(config.dynamics.master_seed);
    fs::create_dir_all(&args.out_dir)?;
    Ok((config, seed))
}

fn write_manifest(dir: &Path, config: &RunConfig, seed: u64) -> Result<()> {
    let manifest = Manifest { config: config.clone(), seed };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// `cavload run`: one sequence, trace CSV plus manifest.
pub fn cmd_run(args: &CommonArgs) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => emit_error(&e),
    }
}

fn run_inner(args: &CommonArgs) -> Result<()> {
    let (config, seed) = prepare(args)?;
    let out_dir = args.out_dir.clone();
    let snapshot_times: Vec<f64> = config.output.snapshots_at.iter().map(|q| q.value()).collect();
    let trace = with_thread_pool(args.threads, || {
        let mut snap_idx = 0usize;
        run_sequence_with(&config, &config.sequence, seed, |t, ens| {
            while snap_idx < snapshot_times.len() && t >= snapshot_times[snap_idx] - 1e-12 {
                let path = out_dir.join(format!("snapshot_{snap_idx:03}.tsv"));
                if let Ok(mut file) = fs::File::create(&path) {
                    let _ = ens.write_snapshot(&mut file);
                }
                snap_idx += 1;
            }
        })
    })?;
    if config.output.write_traces {
        write_trace(&args.out_dir.join("trace.csv"), &trace)?;
    }
    write_manifest(&args.out_dir, &config, seed)?;
    println!(
        "run complete: {} samples, final transmittance {:.4}",
        trace.len(),
        trace.transmittance.last().copied().unwrap_or(1.0)
    );
    Ok(())
}

/// `cavload scan`: one of the four parameter scans named by the config's
/// `[scan]` section (or the --kind override).
pub fn cmd_scan(args: &CommonArgs, kind_override: Option<ScanKind>) -> i32 {
    match scan_inner(args, kind_override) {
        Ok(()) => 0,
        Err(e) => emit_error(&e),
    }
}

fn scan_inner(args: &CommonArgs, kind_override: Option<ScanKind>) -> Result<()> {
    let (config, seed) = prepare(args)?;
    let scan: ScanConfig = match (&config.scan, kind_override) {
        (Some(s), None) => s.clone(),
        (Some(s), Some(k)) => {
            let mut s = s.clone();
            s.kind = k;
            s
        }
        (None, _) => {
            return Err(Error::Config(
                "scan command needs a [scan] section in the config".into(),
            ))
        }
    };
    write_manifest(&args.out_dir, &config, seed)?;

    let summary = with_thread_pool(args.threads, || -> Result<serde_json::Value> {
        match scan.kind {
            ScanKind::Stroboscopic => {
                let delays: Vec<f64> = scan.delays.iter().map(|q| q.value()).collect();
                if delays.is_empty() {
                    return Err(Error::Config("stroboscopic scan needs [scan] delays".into()));
                }
                let res = stroboscopic_scan(&config, &delays, scan.runs_per_delay, &scan, seed)?;
                if config.output.write_traces {
                    for (i, trace) in res.averaged.iter().enumerate() {
                        write_trace(&args.out_dir.join(format!("trace_{i:03}.csv")), trace)?;
                    }
                }
                Ok(json!({ "kind": "stroboscopic", "dips": res.dips }))
            }
            ScanKind::Power => {
                let delays: Vec<f64> = scan.delays.iter().map(|q| q.value()).collect();
                let powers: Vec<f64> = scan.powers.iter().map(|q| q.value()).collect();
                let rows = power_scan(&config, &powers, &delays, scan.runs_per_delay, &scan, seed)?;
                Ok(json!({ "kind": "power", "rows": rows }))
            }
            ScanKind::Position => {
                let offsets: Vec<f64> = scan.offsets.iter().map(|q| q.value()).collect();
                if offsets.is_empty() {
                    return Err(Error::Config("position scan needs [scan] offsets".into()));
                }
                let rows = position_scan(&config, &offsets, &scan, seed)?;
                Ok(json!({ "kind": "position", "rows": rows }))
            }
            ScanKind::Axial => {
                let rows = axial_field_scan(&config, scan.runs_per_delay, seed)?;
                if config.output.write_traces {
                    for (setting, trace) in &rows {
                        let name = format!("trace_axial_{setting:?}.csv").to_lowercase();
                        write_trace(&args.out_dir.join(name), trace)?;
                    }
                }
                let labels: Vec<String> = rows.iter().map(|(s, _)| format!("{s:?}")).collect();
                Ok(json!({ "kind": "axial", "settings": labels }))
            }
        }
    })?;

    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    fs::write(args.out_dir.join("summary.json"), &text)?;
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitModel {
    Exp,
    Linear,
    Tof,
}

/// `cavload fit`: run one of the analysis fits on a CSV file.
///
/// exp:    columns t, n [, sigma]        (sigma defaults to sqrt(n), min 1)
/// linear: columns x, y [, sigma]        (sigma defaults to 1)
/// tof:    columns t, var_x, var_y, var_z of a freely expanding cloud
pub fn cmd_fit(data: &Path, model: FitModel, out: Option<&Path>, mass: f64) -> i32 {
    match fit_inner(data, model, out, mass) {
        Ok(()) => 0,
        Err(e) => emit_error(&e),
    }
}

fn parse_csv(path: &Path, min_cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if row.len() < min_cols {
                    return Err(Error::Config(format!(
                        "{}:{}: expected at least {min_cols} columns, got {}",
                        path.display(),
                        lineno + 1,
                        row.len()
                    )));
                }
                rows.push(row);
            }
            Err(_) if lineno == 0 => continue, // header row
            Err(e) => {
                return Err(Error::Config(format!(
                    "{}:{}: {e}",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn fit_inner(data: &Path, model: FitModel, out: Option<&Path>, mass: f64) -> Result<()> {
    let report: serde_json::Value = match model {
        FitModel::Exp => {
            let rows = parse_csv(data, 2)?;
            let pts: Vec<(f64, f64, f64)> = rows
                .iter()
                .map(|r| {
                    let sigma = r.get(2).copied().unwrap_or_else(|| r[1].abs().sqrt().max(1.0));
                    (r[0], r[1], sigma)
                })
                .collect();
            fit_report(&fit_exponential(&pts)?)
        }
        FitModel::Linear => {
            let rows = parse_csv(data, 2)?;
            let pts: Vec<(f64, f64, f64)> = rows
                .iter()
                .map(|r| (r[0], r[1], r.get(2).copied().unwrap_or(1.0)))
                .collect();
            fit_report(&fit_linear_weighted(&pts)?)
        }
        FitModel::Tof => {
            let rows = parse_csv(data, 4)?;
            // variance table -> synthetic two-point snapshots with matching
            // second moments is lossy; fit the variances directly instead.
            let mut per_axis = Vec::new();
            for axis in 0..3 {
                let pts: Vec<(f64, f64, f64)> =
                    rows.iter().map(|r| (r[0] * r[0], r[1 + axis], 1.0)).collect();
                let fit = fit_linear_weighted(&pts)?;
                let slope = fit.param("slope").unwrap_or(0.0);
                if slope <= 0.0 {
                    return Err(Error::Nonphysical(format!(
                        "axis {axis}: cloud variance does not grow with time"
                    )));
                }
                per_axis.push(mass * slope / crate::constants::K_B);
            }
            json!({
                "model": "tof",
                "temperature_K": per_axis,
            })
        }
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    println!("{text}");
    if let Some(path) = out {
        let mut file = fs::File::create(path)?;
        file.write_all(text.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

fn fit_report(fit: &FitResult) -> serde_json::Value {
    let uncertainties: Vec<(String, f64)> = fit
        .params
        .iter()
        .map(|(name, _)| (name.clone(), fit.uncertainty(name).unwrap_or(f64::NAN)))
        .collect();
    json!({
        "params": fit.params,
        "uncertainties": uncertainties,
        "covariance": fit.covariance,
        "residual_norm": fit.residual_norm,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "flags": fit.flags,
    })
}

/// Library entry used by tests to run the TOF pipeline end to end without
/// touching the filesystem.
pub fn tof_from_snapshots(snaps: &[(f64, Vec<V3>)], mass: f64) -> Result<[f64; 3]> {
    tof_temperature(snaps, mass)
}
