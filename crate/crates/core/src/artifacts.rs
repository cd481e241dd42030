//! Run outputs: CSV trace, summary, plot data and feasibility report.
//!
//! Every float is written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::{matrix_to_rows, numerical_rank};
use crate::plant::{check_transmission_zeros, solve_regulator, LinearAgent, RANK_TOL};
use crate::simulator::{OracleResult, RunOutput, SimulationTrace};

/// Maximum number of points per series in `plotdata.json`.
pub const PLOT_POINTS: usize = 500;

/// `{:.16e}`, or an empty cell for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => {
                let _ = write!(out, "{u}");
            }
            (None, Some(i), _) => {
                let _ = write!(out, "{i}");
            }
            (_, _, Some(f)) => out.push_str(&format!("{f:.16e}")),
            _ => out.push_str("null"),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) if items.iter().all(|i| !i.is_array() && !i.is_object()) => {
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                write_value(item, indent, out);
            }
            out.push(']');
        }
        Value::Array(items) => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                write_value(item, indent + 1, out);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Pretty JSON with floats as `{:.16e}`; non-finite floats become `null`.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

/// One row per `(sample, agent)`.
pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    let Some(first) = trace.samples.first() else {
        return Ok(());
    };
    let n_x = first.agents.iter().map(|a| a.x.len()).max().unwrap_or(0);
    let n_u = first.agents.iter().map(|a| a.u.len()).max().unwrap_or(0);
    let p = trace.output_dim;
    let mut header = vec!["t".to_string(), "agent".to_string()];
    header.extend((1..=n_x).map(|k| format!("x{k}")));
    for name in ["y", "z", "eta", "s"] {
        header.extend((1..=p).map(|k| format!("{name}{k}")));
    }
    header.extend((1..=n_u).map(|k| format!("u{k}")));
    header.extend(["h", "margin_omega", "margin_ball", "gap"].map(String::from));
    writeln!(w, "{}", header.join(","))?;

    let pad = |v: &[f64], n: usize| -> Vec<String> { (0..n).map(|k| v.get(k).map_or(String::new(), |x| fmt_f64(*x))).collect() };
    for s in &trace.samples {
        for (i, a) in s.agents.iter().enumerate() {
            let mut row = vec![fmt_f64(s.t), (i + 1).to_string()];
            row.extend(pad(&a.x, n_x));
            for v in [&a.y, &a.z, &a.eta, &a.s] {
                row.extend(pad(v, p));
            }
            row.extend(pad(&a.u, n_u));
            row.push(s.h.map_or(String::new(), fmt_f64));
            row.push(fmt_f64(a.margin_omega));
            row.push(fmt_f64(a.margin_ball));
            row.push(fmt_f64(a.gap));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub name: String,
    pub config_hash: String,
    pub final_gap: f64,
    #[serde(rename = "time_to_1e-1")]
    pub time_to_1e_1: Option<f64>,
    #[serde(rename = "time_to_1e-2")]
    pub time_to_1e_2: Option<f64>,
    pub log_slope: f64,
    pub min_margin: f64,
    pub certified: Option<bool>,
    pub cbf_min: Option<f64>,
    pub min_margin_omega: f64,
    pub min_margin_ball: f64,
    pub min_margin_zone: Option<f64>,
    pub cbf_condition_min_residual: Option<f64>,
    pub first_violation_t: Option<f64>,
    pub y_star: Vec<f64>,
    pub h0: Option<f64>,
    pub samples: usize,
}

impl Summary {
    pub fn new(run: &RunOutput, config_hash: &str) -> Self {
        let m = &run.metrics;
        let s = &run.safety;
        Self {
            name: run.prepared.scenario.name.clone(),
            config_hash: config_hash.to_string(),
            final_gap: m.final_gap,
            time_to_1e_1: m.time_to_1e_1,
            time_to_1e_2: m.time_to_1e_2,
            log_slope: m.log_slope,
            min_margin: m.min_margin,
            certified: run.certified(),
            cbf_min: s.cbf_min,
            min_margin_omega: s.min_margin_omega,
            min_margin_ball: s.min_margin_ball,
            min_margin_zone: s.min_margin_zone,
            cbf_condition_min_residual: s.cbf_condition_min_residual,
            first_violation_t: s.first_violation_t,
            y_star: run.prepared.y_star().to_vec(),
            h0: run.prepared.h0,
            samples: run.trace.samples.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotSeries {
    pub agent: usize,
    pub y: Vec<Vec<f64>>,
    pub gap: Vec<f64>,
    pub margin_omega: Vec<f64>,
}

/// Downsampled series for external plotting.
#[derive(Debug, Clone, Serialize)]
pub struct PlotData {
    pub t: Vec<f64>,
    pub h: Vec<Option<f64>>,
    pub r: Vec<f64>,
    pub theta_norm: Vec<Option<f64>>,
    pub agents: Vec<PlotSeries>,
    pub y_star: Vec<f64>,
}

impl PlotData {
    pub fn new(run: &RunOutput) -> Self {
        let samples = &run.trace.samples;
        let every = samples.len().div_ceil(PLOT_POINTS).max(1);
        let picked: Vec<_> = samples
            .iter()
            .enumerate()
            .filter(|(k, _)| k % every == 0 || k + 1 == samples.len())
            .map(|(_, s)| s)
            .collect();
        let agents = (0..run.trace.n_agents)
            .map(|i| PlotSeries {
                agent: i + 1,
                y: picked.iter().map(|s| s.agents[i].y.clone()).collect(),
                gap: picked.iter().map(|s| s.agents[i].gap).collect(),
                margin_omega: picked.iter().map(|s| s.agents[i].margin_omega).collect(),
            })
            .collect();
        Self {
            t: picked.iter().map(|s| s.t).collect(),
            h: picked.iter().map(|s| s.h).collect(),
            r: picked.iter().map(|s| s.r).collect(),
            theta_norm: picked.iter().map(|s| s.theta_norm).collect(),
            agents,
            y_star: run.prepared.y_star().to_vec(),
        }
    }
}

/// Paths written by [`write_run`].
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
    pub plotdata_path: PathBuf,
    pub feasibility_path: PathBuf,
}

pub fn write_run(run: &RunOutput, config_hash: &str, dir: &Path) -> Result<RunArtifacts> {
    fs::create_dir_all(dir)?;
    let paths = RunArtifacts {
        trace_path: dir.join("trace.csv"),
        summary_path: dir.join("summary.json"),
        plotdata_path: dir.join("plotdata.json"),
        feasibility_path: dir.join("feasibility.json"),
    };
    write_trace_csv(&run.trace, fs::File::create(&paths.trace_path)?)?;
    write_json(&paths.summary_path, &Summary::new(run, config_hash))?;
    write_json(&paths.plotdata_path, &PlotData::new(run))?;
    write_json(&paths.feasibility_path, &run.feasibility)?;
    Ok(paths)
}

#[derive(Debug, Clone, Serialize)]
pub struct RegulatorEntry {
    pub agent: usize,
    pub pi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    /// `‖AΠ + BΨ‖`.
    pub residual_dynamics: f64,
    /// `‖CΠ − I‖`.
    pub residual_output: f64,
}

/// Regulator solution and residuals for every agent, 1-based.
pub fn regulator_entries(agents: &[LinearAgent]) -> Result<Vec<RegulatorEntry>> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if !check_transmission_zeros(a) {
                return Err(Error::TransmissionZero {
                    agent: i + 1,
                    rank: numerical_rank(&a.rosenbrock(), RANK_TOL),
                    required: a.n_states() + a.n_outputs(),
                });
            }
            let (pi, psi) = solve_regulator(a)?;
            let p = a.n_outputs();
            Ok(RegulatorEntry {
                agent: i + 1,
                residual_dynamics: (&a.a * &pi + &a.b * &psi).norm(),
                residual_output: (&a.c * &pi - nalgebra::DMatrix::<f64>::identity(p, p)).norm(),
                pi: matrix_to_rows(&pi),
                psi: matrix_to_rows(&psi),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub y_star: Vec<f64>,
    pub residual: f64,
    pub value: f64,
    pub iterations: usize,
}

impl From<&OracleResult> for OracleReport {
    fn from(o: &OracleResult) -> Self {
        Self {
            y_star: o.y.clone(),
            residual: o.residual,
            value: o.value,
            iterations: o.iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: Option<f64>,
            n: usize,
            v: Vec<f64>,
            nan: f64,
        }
        let text = to_json_string(&S { a: std::f64::consts::SQRT_2, b: None, n: 3, v: vec![0.1, -2.0], nan: f64::NAN }).unwrap();
        assert!(text.contains("\"a\": 1.4142135623730951e0"), "{text}");
        assert!(text.contains("\"n\": 3"));
        assert!(text.contains("\"b\": null") && text.contains("\"nan\": null"));
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64().unwrap(), std::f64::consts::SQRT_2);
        assert_eq!(back["v"][0].as_f64().unwrap(), 0.1);
        assert_eq!(fmt_f64(f64::INFINITY), "");
    }

    #[test]
    fn regulator_entries_report_residuals() {
        let agents: Vec<_> = (1..=5).map(crate::plant::tests::demo_agent).collect();
        for e in regulator_entries(&agents).unwrap() {
            assert!(e.residual_dynamics <= 1e-10 && e.residual_output <= 1e-10);
            assert_eq!(e.pi.len(), 3);
        }
    }
}
