//! `ros bench`: named scenarios on the simulated network, or a script file.

use std::path::{Path, PathBuf};

use ros_sim::bench::{self, BenchReport, CrossDc, Shape};
use ros_sim::{explore_interleavings, Script};

use crate::exit::{Code, Failure, Result};

#[derive(Debug, Clone)]
pub struct BenchOpts {
    /// `fanout`, `failure`, `crossdc`, or the path of a script file.
    pub scenario: String,
    pub shape: Shape,
    /// Replica counts; fan-out sweeps 1..=8 when empty.
    pub n: Vec<usize>,
    pub pipeline: Vec<bool>,
    /// Crash times as fractions of one shard transfer.
    pub inject_at: Vec<f64>,
    pub smart_skip: Vec<bool>,
    pub offload_seed: Vec<bool>,
    pub explore_bound: u128,
    pub replay_dir: Option<PathBuf>,
}

/// What a bench run printed.
pub struct Output {
    pub stdout: String,
    pub summary: String,
}

pub fn run(opts: &BenchOpts) -> Result<Output> {
    let reports = match opts.scenario.as_str() {
        "fanout" => {
            let ns = if opts.n.is_empty() { (1..=8).collect() } else { opts.n.clone() };
            let mut out = Vec::new();
            for &p in &opts.pipeline {
                for &n in &ns {
                    out.push(bench::fanout(opts.shape, n, p).map_err(sim)?);
                }
            }
            out
        }
        "failure" => {
            let t = ros_transfer::sim::as_secs(opts.shape.shard_time());
            let mut out = Vec::new();
            for &f in &opts.inject_at {
                out.push(bench::failure(opts.shape, f * t).map_err(sim)?);
            }
            out
        }
        "crossdc" => {
            let ns = if opts.n.is_empty() { vec![4] } else { opts.n.clone() };
            let mut out = Vec::new();
            for &smart_skip in &opts.smart_skip {
                for &offload_seed in &opts.offload_seed {
                    for &n in &ns {
                        let mode = CrossDc {
                            smart_skip,
                            offload_seed,
                        };
                        out.push(bench::crossdc(opts.shape, n, mode).map_err(sim)?);
                    }
                }
            }
            out
        }
        path if path.ends_with(".toml") => return script(Path::new(path), opts),
        other => {
            return Err(Failure::usage(format!(
                "unknown scenario {other:?}: expected fanout, failure, crossdc or a .toml script"
            )))
        }
    };
    Ok(combine(&reports))
}

fn sim(e: ros_sim::SimError) -> Failure {
    Failure::new(Code::Runtime, e.to_string())
}

fn combine(reports: &[BenchReport]) -> Output {
    let mut csv = String::new();
    let mut summary = String::new();
    for (i, r) in reports.iter().enumerate() {
        let c = r.csv();
        // One header for the whole file.
        csv.push_str(if i == 0 { &c } else { c.split_once('\n').map_or("", |(_, rest)| rest) });
        summary.push_str(&r.summary());
    }
    Output { stdout: csv, summary }
}

fn script(path: &Path, opts: &BenchOpts) -> Result<Output> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let script = Script::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let ex = match explore_interleavings(&script, opts.explore_bound) {
        Ok(ex) => ex,
        Err(e @ ros_sim::SimError::TooManyInterleavings { .. }) => return Err(Failure::usage(e.to_string())),
        Err(e) => return Err(sim(e)),
    };
    let mut summary = format!("script {} orders {} failures {}\n", script.name, ex.runs, ex.failures.len());
    let csv = ros_sim::run_script(&script).map_err(sim)?.trace.to_string();
    if ex.passed() {
        return Ok(Output { stdout: csv, summary });
    }
    for (i, f) in ex.failures.iter().enumerate() {
        summary.push_str(&format!("order {:?}\n", f.orders));
        for v in &f.violations {
            summary.push_str(&format!("  violated: {v}\n"));
        }
        if let Some(dir) = &opts.replay_dir {
            let p = f
                .write_replay(dir, i)
                .map_err(|e| Failure::new(Code::Runtime, format!("{}: {e}", dir.display())))?;
            summary.push_str(&format!("  replay: {}\n", p.display()));
        }
    }
    Err(Failure::new(Code::Violated, summary))
}
