//! JSON scenario files.
//!
//! Agent indices in `graph.edges` are 1-based. Matrices are lists of rows.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::linalg::matrix_from_rows;
use crate::objectives::{LocalObjective, ObjectiveEnsemble};
use crate::plant::{GainSpec, LinearAgent};
use crate::protocol::ProtocolParams;
use crate::sets::{ConvexRegion, ExpandingSchedule, Family, MarginProfile};
use crate::simulator::{IntegrationSettings, Mode, Scenario};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_mode")]
    pub mode: ModeConfig,
    #[serde(default)]
    pub seed: u64,
    pub graph: GraphConfig,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
    pub objectives: Vec<ObjectiveConfig>,
    pub constraint: RegionConfig,
    pub expanding: ExpandingConfig,
    pub protocol: ProtocolConfig,
    pub initial: InitialConfig,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub overrides: OverridesConfig,
}

fn default_name() -> String {
    "scenario".into()
}

fn default_mode() -> ModeConfig {
    ModeConfig::ClosedLoop
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    ClosedLoop,
    OptimizerOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_agents: usize,
    /// `[i, j, weight]` with 1-based agent indices.
    pub edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    /// Stabilizing state feedback; checked, never modified.
    #[serde(rename = "K1", default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<Vec<Vec<f64>>>,
    /// Closed-loop poles `[re, im]`, used when `K1` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poles: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    Quadratic {
        target: Vec<f64>,
        #[serde(default = "one")]
        weight: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionConfig {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Polytope {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        interior: Option<Vec<f64>>,
    },
}

impl RegionConfig {
    pub fn build(&self) -> Result<ConvexRegion> {
        match self {
            Self::Ball { center, radius } => ConvexRegion::ball(center.clone(), *radius),
            Self::Box { lower, upper } => ConvexRegion::boxed(lower.clone(), upper.clone()),
            Self::Polytope { normals, offsets, interior } => {
                ConvexRegion::polytope(normals.clone(), offsets.clone(), interior.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpandingKind {
    /// Ω eroded by `gap·e^{−rate·t}`.
    #[default]
    Exponential,
    /// Ω eroded by `max(gap − rate·t, 0)`; reaches Ω in finite time.
    Affine,
    /// Ω eroded by the constant `gap`; for optimizer-only runs `gap` may be 0.
    Static,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandingConfig {
    #[serde(default)]
    pub kind: ExpandingKind,
    pub gap: f64,
    #[serde(default)]
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k1: f64,
    pub k2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub y0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub step: f64,
    pub horizon: f64,
    pub output_stride: usize,
    pub substep_on_boundary: bool,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        let d = IntegrationSettings::default();
        Self {
            step: d.step,
            horizon: d.horizon,
            output_stride: d.output_stride,
            substep_on_boundary: d.substep_on_boundary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverridesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_bound: Option<f64>,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid scenario: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Schedule only, for commands that never touch the plants.
    pub fn schedule(&self) -> Result<ExpandingSchedule> {
        let omega = self.constraint.build()?;
        let e = &self.expanding;
        let profile = match e.kind {
            ExpandingKind::Exponential => MarginProfile::Exponential { gap: e.gap, rate: e.rate },
            ExpandingKind::Affine => MarginProfile::Affine { initial: e.gap, slope: e.rate },
            ExpandingKind::Static => MarginProfile::Exponential { gap: e.gap, rate: 0.0 },
        };
        if !(e.gap >= 0.0) || !(e.rate >= 0.0) {
            return Err(Error::config("expanding.gap and expanding.rate must be nonnegative"));
        }
        if e.kind != ExpandingKind::Static && !(e.gap > 0.0 && e.rate > 0.0) {
            return Err(Error::config("expanding.gap and expanding.rate must be positive"));
        }
        let family = if e.kind == ExpandingKind::Static && e.gap == 0.0 {
            Family::Static(omega.clone())
        } else {
            Family::Erosion(profile)
        };
        let decay = e.v.unwrap_or(if e.rate > 0.0 { e.rate } else { 1.0 });
        ExpandingSchedule::new(omega, family, e.xi.unwrap_or(1.0), decay)
    }

    pub fn objectives(&self) -> Result<ObjectiveEnsemble> {
        ObjectiveEnsemble::new(
            self.objectives
                .iter()
                .map(|o| match o {
                    ObjectiveConfig::Quadratic { target, weight } => LocalObjective::quadratic(target.clone(), *weight),
                })
                .collect::<Result<_>>()?,
        )
    }

    pub fn graph(&self) -> Result<CommGraph> {
        let n = self.graph.n_agents;
        let edges = self
            .graph
            .edges
            .iter()
            .map(|&(i, j, w)| {
                if i == 0 || j == 0 || i > n || j > n {
                    Err(Error::config(format!("graph.edges entry [{i}, {j}] outside 1..={n}")))
                } else {
                    Ok((i - 1, j - 1, w))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CommGraph::from_edges(n, &edges)
    }

    pub fn agents(&self) -> Result<(Vec<LinearAgent>, Vec<GainSpec>)> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let ctx = |e: Error| match e {
                    Error::TransmissionZero { rank, required, .. } => Error::TransmissionZero { agent: i + 1, rank, required },
                    e => Error::config(format!("agents[{i}]: {e}")),
                };
                let agent = LinearAgent::new(
                    matrix_from_rows(&a.a).map_err(ctx)?,
                    matrix_from_rows(&a.b).map_err(ctx)?,
                    matrix_from_rows(&a.c).map_err(ctx)?,
                )
                .map_err(ctx)?;
                let gain = match (&a.k1, &a.poles) {
                    (Some(k), _) => GainSpec::Given(matrix_from_rows(k).map_err(ctx)?),
                    (None, Some(p)) => GainSpec::Poles(p.clone()),
                    (None, None) => GainSpec::Lqr,
                };
                Ok((agent, gain))
            })
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    }

    pub fn params(&self) -> Result<ProtocolParams> {
        let p = self.protocol;
        if !(p.beta > 0.0 && p.beta <= 1.0) {
            return Err(Error::config(format!("beta must lie in (0,1], got {}", p.beta)));
        }
        ProtocolParams::new(p.alpha, p.beta, p.k1, p.k2)
    }

    pub fn build(&self) -> Result<Scenario> {
        let mode = match self.mode {
            ModeConfig::ClosedLoop => Mode::ClosedLoop,
            ModeConfig::OptimizerOnly => Mode::OptimizerOnly,
        };
        let (agents, gains) = if mode == Mode::ClosedLoop {
            self.agents()?
        } else {
            (Vec::new(), Vec::new())
        };
        let i = self.integration;
        let scenario = Scenario {
            name: self.name.clone(),
            mode,
            graph: self.graph()?,
            agents,
            gains,
            objectives: self.objectives()?,
            schedule: self.schedule()?,
            params: self.params()?,
            y0: self.initial.y0.clone(),
            x0: self.initial.x0.clone(),
            eta0: self.initial.eta0.clone(),
            integration: IntegrationSettings {
                step: i.step,
                horizon: i.horizon,
                output_stride: i.output_stride,
                substep_on_boundary: i.substep_on_boundary,
            },
            seed: self.seed,
            curvature_override: self.overrides.curvature_bound,
            grad_bound_override: self.overrides.grad_bound,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            let _ = match n.as_f64() {
                Some(f) => write!(out, "{f:.16e}"),
                None => write!(out, "{n}"),
            };
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (k, key) in keys.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push(':');
                write_canonical(&map[*key], out);
            }
            out.push('}');
        }
    }
}

/// Sorted keys, no whitespace, every number as `{:.16e}`.
pub fn canonical_json(text: &str) -> Result<String> {
    let value: Value = serde_json::from_str(text)?;
    let mut out = String::new();
    write_canonical(&value, &mut out);
    Ok(out)
}

/// SHA-256 of [`canonical_json`], hex encoded.
pub fn config_hash(text: &str) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(text)?.as_bytes())))
}

/// A parsed scenario with its source hash.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    pub scenario: Scenario,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let config = ScenarioConfig::from_json(&text)?;
    let scenario = config.build()?;
    Ok(LoadedScenario {
        hash: config_hash(&text)?,
        config,
        scenario,
    })
}
