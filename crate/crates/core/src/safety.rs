//! Runtime verification of the safety constructs along a trace: membership
//! in Ω, the shrinking ball around each decision, the per-agent state zone,
//! and the time-varying barrier function `h` with its decrease condition.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{dist, gemv_acc, spectral_norm, sym_extreme_eigenvalues};
use crate::plant::AgentSynthesis;
use crate::sets::ConvexRegion;
use crate::simulator::SimulationTrace;

/// Absolute tolerance on signed distances: points this far outside still
/// count as members.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// `zᵀPz`.
pub fn weighted_sq(p: &DMatrix<f64>, z: &[f64]) -> f64 {
    let mut pz = vec![0.0; z.len()];
    gemv_acc(p, z, &mut pz);
    pz.iter().zip(z).map(|(a, b)| a * b).sum()
}

/// `x̃ = x − Πs`.
pub fn x_tilde(pi: &DMatrix<f64>, x: &[f64], s: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
    gemv_acc(pi, s, &mut out);
    out.iter_mut().for_each(|v| *v = -*v);
    out
}

/// `h = Σᵢ (β₂(t) − x̃ᵢᵀPᵢx̃ᵢ)` from the per-agent quadratic terms.
pub fn cbf_value(beta2_t: f64, weighted: &[f64]) -> f64 {
    weighted.iter().map(|q| beta2_t - q).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZoneCheck {
    pub inside: bool,
    /// `√λ_min(P)·r/‖C‖ − ‖x̃‖_P`.
    pub margin: f64,
}

/// Per-agent constants reused at every sample.
#[derive(Debug, Clone)]
pub struct AgentSafety {
    pub p: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub c_norm: f64,
    pub sqrt_lambda_min: f64,
}

impl AgentSafety {
    pub fn new(synth: &AgentSynthesis, c: &DMatrix<f64>) -> Result<Self> {
        let (lmin, _) = sym_extreme_eigenvalues(&synth.p)?;
        Ok(Self {
            p: synth.p.clone(),
            pi: synth.pi.clone(),
            c_norm: spectral_norm(c),
            sqrt_lambda_min: lmin.max(0.0).sqrt(),
        })
    }

    /// Zone check from a precomputed `x̃ᵀPx̃`.
    pub fn zone_from_weighted(&self, weighted: f64, r_t: f64) -> ZoneCheck {
        let margin = self.sqrt_lambda_min * r_t / self.c_norm - weighted.max(0.0).sqrt();
        ZoneCheck {
            inside: margin >= 0.0 && !(r_t == 0.0 && weighted > 0.0),
            margin,
        }
    }
}

/// Whether `‖x − Πs‖_P ≤ √λ_min(P)·r/‖C‖`, which forces `‖y − s‖ ≤ r`.
pub fn state_zone_check(x: &[f64], s: &[f64], synth: &AgentSynthesis, r_t: f64, c_norm: f64) -> Result<ZoneCheck> {
    let (lmin, _) = sym_extreme_eigenvalues(&synth.p)?;
    let agent = AgentSafety {
        p: synth.p.clone(),
        pi: synth.pi.clone(),
        c_norm,
        sqrt_lambda_min: lmin.max(0.0).sqrt(),
    };
    let xt = x_tilde(&synth.pi, x, s);
    Ok(agent.zone_from_weighted(weighted_sq(&synth.p, &xt), r_t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutputCheck {
    pub in_omega: bool,
    pub margin_omega: f64,
    pub in_ball: bool,
    /// `r(t) − ‖y − s‖`.
    pub margin_ball: f64,
}

pub fn output_safety_check(y: &[f64], s: &[f64], omega: &ConvexRegion, r_t: f64) -> OutputCheck {
    let margin_omega = omega.signed_distance(y);
    let margin_ball = r_t - dist(y, s);
    OutputCheck {
        in_omega: margin_omega >= -BOUNDARY_TOL,
        margin_omega,
        in_ball: margin_ball > 0.0,
        margin_ball,
    }
}

/// Discrete residuals of `ḣ + a·h ≥ 0`.
#[derive(Debug, Clone, Serialize)]
pub struct CbfResidual {
    pub residuals: Vec<f64>,
    pub min_residual: f64,
    pub tolerance: f64,
    /// Fraction of intervals with residual below `−tolerance`.
    pub violation_fraction: f64,
}

/// `rₖ = (hₖ₊₁ − hₖ)/Δt + a·hₖ`. The default tolerance is `1e−4·max|h|`.
pub fn cbf_condition_check(times: &[f64], h: &[f64], a: f64, tol: Option<f64>) -> CbfResidual {
    let scale = h.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let tolerance = tol.unwrap_or(1e-4 * scale);
    let residuals: Vec<f64> = times
        .windows(2)
        .zip(h.windows(2))
        .map(|(t, hv)| (hv[1] - hv[0]) / (t[1] - t[0]) + a * hv[0])
        .collect();
    let min_residual = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let bad = residuals.iter().filter(|r| **r < -tolerance).count();
    let violation_fraction = if residuals.is_empty() {
        0.0
    } else {
        bad as f64 / residuals.len() as f64
    };
    CbfResidual {
        residuals,
        min_residual,
        tolerance,
        violation_fraction,
    }
}

/// Aggregated safety verdict over a trace.
#[derive(Debug, Clone, Serialize)]
pub struct SafetyReport {
    pub min_margin_omega: f64,
    pub min_margin_ball: f64,
    /// `None` when the trace has no plant states.
    pub min_margin_zone: Option<f64>,
    pub cbf_min: Option<f64>,
    pub cbf_condition_min_residual: Option<f64>,
    pub cbf_violation_fraction: Option<f64>,
    pub cbf_slope: f64,
    /// First sample time at which some output left Ω.
    pub first_violation_t: Option<f64>,
    pub first_violation_agent: Option<usize>,
    /// Samples where the zone ⇒ ball ⇒ Ω chain was broken.
    pub chain_violations: usize,
}

impl SafetyReport {
    pub fn safe(&self) -> bool {
        self.first_violation_t.is_none()
    }
}

/// Scans every sample. `cbf_slope` is the class-K slope `a` of the decrease
/// condition (the decay rate over 8 by default).
pub fn safety_report(trace: &SimulationTrace, cbf_slope: f64, tol: Option<f64>) -> SafetyReport {
    let mut min_omega = f64::INFINITY;
    let mut min_ball = f64::INFINITY;
    let mut min_zone = f64::INFINITY;
    let mut first = None;
    let mut chain_violations = 0;
    let mut has_zone = false;
    for smp in &trace.samples {
        for (i, ag) in smp.agents.iter().enumerate() {
            min_omega = min_omega.min(ag.margin_omega);
            min_ball = min_ball.min(ag.margin_ball);
            if let Some(z) = ag.margin_zone {
                has_zone = true;
                min_zone = min_zone.min(z);
            }
            if ag.margin_omega < -BOUNDARY_TOL && first.is_none() {
                first = Some((smp.t, i));
            }
            let zone_in = ag.margin_zone.map(|z| z >= -BOUNDARY_TOL);
            let ball_in = ag.margin_ball > -BOUNDARY_TOL;
            let omega_in = ag.margin_omega >= -BOUNDARY_TOL;
            if (zone_in == Some(true) && !ball_in) || (ball_in && !omega_in) {
                chain_violations += 1;
            }
        }
    }
    let (times, hs): (Vec<f64>, Vec<f64>) = trace
        .samples
        .iter()
        .filter_map(|s| s.h.map(|h| (s.t, h)))
        .unzip();
    let (cbf_min, cond) = if hs.is_empty() {
        (None, None)
    } else {
        (
            Some(hs.iter().copied().fold(f64::INFINITY, f64::min)),
            (hs.len() > 1).then(|| cbf_condition_check(&times, &hs, cbf_slope, tol)),
        )
    };
    SafetyReport {
        min_margin_omega: min_omega,
        min_margin_ball: min_ball,
        min_margin_zone: has_zone.then_some(min_zone),
        cbf_min,
        cbf_condition_min_residual: cond.as_ref().map(|c| c.min_residual),
        cbf_violation_fraction: cond.as_ref().map(|c| c.violation_fraction),
        cbf_slope,
        first_violation_t: first.map(|f| f.0),
        first_violation_agent: first.map(|f| f.1),
        chain_violations,
    }
}
