//! Decision dynamics, control law and the parameter-feasibility calculator.
//!
//! Each agent carries a gradient tracker `zᵢ`, a pre-projection decision
//! `ηᵢ` and the projected decision `sᵢ = P_{Ω̄(t)}(ηᵢ)`:
//!
//! ```text
//! żᵢ = (k₂/β) Σⱼ aᵢⱼ (zⱼ − zᵢ) + d∇fᵢ(yᵢ)/dt
//! η̇ᵢ = βk₁ Σⱼ aᵢⱼ (ηⱼ − ηᵢ) + β(sᵢ − ηᵢ) − αβ zᵢ
//! uᵢ = K₁ᵢ xᵢ + K₂ᵢ sᵢ
//! ```
//!
//! The measured-derivative term is removed by integrating `ζᵢ = zᵢ − ∇fᵢ(yᵢ)`
//! instead of `zᵢ`; `ζᵢ(0) = 0` gives `zᵢ(0) = ∇fᵢ(yᵢ(0))`.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::objectives::EnsembleConstants;
use crate::plant::{AgentSynthesis, PlantConstants};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProtocolParams {
    pub alpha: f64,
    pub beta: f64,
    pub k1: f64,
    pub k2: f64,
}

impl ProtocolParams {
    /// Rejects non-finite or sign-invalid values. `α = 0` and `β > 1` are
    /// accepted here and reported by [`feasibility_report`].
    pub fn new(alpha: f64, beta: f64, k1: f64, k2: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be nonnegative, got {alpha}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config(format!("beta must be positive, got {beta}")));
        }
        if !(k1 >= 0.0 && k1.is_finite()) {
            return Err(Error::config(format!("k1 must be nonnegative, got {k1}")));
        }
        if !(k2 > 0.0 && k2.is_finite()) {
            return Err(Error::config(format!("k2 must be positive, got {k2}")));
        }
        Ok(Self { alpha, beta, k1, k2 })
    }
}

/// Decision-layer derivatives for all agents. All slices are agent-major
/// with `p` entries per agent; `z` and `s` must already be reconstructed and
/// projected by the caller.
#[allow(clippy::too_many_arguments)]
pub fn decision_rhs(
    graph: &CommGraph,
    params: &ProtocolParams,
    p: usize,
    z: &[f64],
    eta: &[f64],
    s: &[f64],
    dzeta: &mut [f64],
    deta: &mut [f64],
) {
    let ProtocolParams { alpha, beta, k1, k2 } = *params;
    let gz = k2 / beta;
    let ge = beta * k1;
    for i in 0..graph.n_agents() {
        let row = i * p..(i + 1) * p;
        let (dz, de) = (&mut dzeta[row.clone()], &mut deta[row.clone()]);
        for k in 0..p {
            dz[k] = 0.0;
            de[k] = beta * (s[i * p + k] - eta[i * p + k]) - alpha * beta * z[i * p + k];
        }
        for &(j, w) in graph.neighbors(i) {
            for k in 0..p {
                dz[k] += gz * w * (z[j * p + k] - z[i * p + k]);
                de[k] += ge * w * (eta[j * p + k] - eta[i * p + k]);
            }
        }
    }
}

/// `u = K₁x + K₂s`.
pub fn control_law(synth: &AgentSynthesis, x: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
    &synth.k1 * x + &synth.k2 * s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaFunctions {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
}

impl BetaFunctions {
    /// `β₁(α) > 0`, required for a positive decay rate.
    pub fn alpha_admissible(&self) -> bool {
        self.beta1 > 0.0
    }
}

/// Closed-form `β₁…β₄` as functions of `α` and the objective constants.
pub fn compute_beta_functions(
    alpha: f64,
    sigma: f64,
    sigma1: f64,
    l_max: f64,
    n: usize,
    m1: f64,
    grad_bound: f64,
) -> BetaFunctions {
    let nf = n as f64;
    let a2l2 = alpha * alpha * l_max * l_max;
    let beta1 = [
        sigma * alpha / 4.0 - alpha * alpha * (l_max + grad_bound * m1).powi(2) - 3.0 * a2l2,
        1.0 / 6.0 - 2.0 * sigma * alpha,
        0.5 * (sigma1 - 2.0 * a2l2),
        0.25,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let beta2 = ((6.0 * alpha * l_max * l_max + 3.0) / (nf * sigma) + (2.0 + 4.0 * a2l2) / nf)
        .max(6.0 / (a2l2 * nf * nf) + 12.0 / (nf * nf));
    let beta3 = (6.0 * alpha * l_max * l_max / (sigma * nf) + 4.0 * a2l2 / nf).max(12.0 / (nf * nf));
    let beta4 = (3.0 / (sigma * alpha) + 6.0).max(6.0 / (a2l2 * nf) + 4.0);
    BetaFunctions { beta1, beta2, beta3, beta4 }
}

/// Gain constants of the small-gain argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaConstants {
    pub theta_prime: f64,
    pub eta: f64,
    pub eta_star: f64,
    pub eta_e: f64,
    pub eta_edot: f64,
    pub x: f64,
    pub x_eta_hat: f64,
    pub x_z_tilde: f64,
    pub theta_x_tilde: f64,
}

/// Inputs the CBF bound needs beyond the protocol constants. All are
/// trajectory- or schedule-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CbfInputs {
    /// `‖θ(0)‖²` of the stacked consensus and optimality errors.
    pub theta0_sq: f64,
    /// `h` with `‖ẏ*(t)‖ ≤ h e^{−vt}`.
    pub drift_const: f64,
    /// The envelope constant `β₁` of the schedule (its value at `t = 0`).
    pub envelope_beta1: f64,
    /// The ratio `ξ` with `β₁(t) ≤ ξ β₂(t)`.
    pub xi: f64,
}

/// Everything derived from parameters, graph, objectives and plants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub n_agents: usize,
    pub lambda2: f64,
    pub lambda_n: f64,
    pub l_max: f64,
    pub sigma: f64,
    pub sigma1: f64,
    pub m1: f64,
    pub grad_bound: f64,
    pub beta_fns: BetaFunctions,
    pub gamma: GammaConstants,
    pub plant: PlantConstantsView,
    /// CBF decay rate `v = βγ_η/4`.
    pub v: f64,
    pub m_prime: f64,
    pub h1: Option<f64>,
}

/// Serializable copy of [`PlantConstants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlantConstantsView {
    pub c: f64,
    pub d_max: f64,
    pub c_max: f64,
    pub lambda_min_p: f64,
    pub p_max: f64,
    pub pi_max: f64,
    pub c_pi_max: f64,
    pub c_acl_max: f64,
}

impl From<&PlantConstants> for PlantConstantsView {
    fn from(k: &PlantConstants) -> Self {
        Self {
            c: k.c,
            d_max: k.d_max,
            c_max: k.c_max,
            lambda_min_p: k.lambda_min_p,
            p_max: k.p_max,
            pi_max: k.pi_max,
            c_pi_max: k.c_pi_max,
            c_acl_max: k.c_acl_max,
        }
    }
}

/// Everything the constants depend on that is not a protocol parameter.
#[derive(Debug, Clone, Copy)]
pub struct ProblemData<'a> {
    pub n_agents: usize,
    pub lambda2: f64,
    pub lambda_n: f64,
    pub objectives: EnsembleConstants,
    pub plant: &'a PlantConstants,
    /// Curvature bound of the expanding boundaries.
    pub m1: f64,
    /// Bound on the averaged gradient norm over Ω.
    pub grad_bound: f64,
}

pub fn derive_constants(
    params: &ProtocolParams,
    data: &ProblemData<'_>,
    cbf: Option<&CbfInputs>,
) -> DerivedConstants {
    let ProtocolParams { alpha, beta, k1, k2 } = *params;
    let n = data.n_agents as f64;
    let (l2, ln) = (data.lambda2, data.lambda_n);
    let obj = data.objectives;
    let l = obj.l_max;
    let pk = data.plant;
    let c = pk.c;
    let betas = compute_beta_functions(alpha, obj.sigma, obj.sigma1, l, data.n_agents, data.m1, data.grad_bound);

    let eta_edot = 4.0 * l * l / k2;
    let theta_prime = (4.0 * eta_edot * (ln * k1 + 2.0 + l * alpha) * pk.c_pi_max)
        .max(2.0 * eta_edot * alpha * pk.c_pi_max);
    let eta_star = n * betas.beta4 / 2.0;
    let eta = (alpha * alpha / (k1 * l2))
        .min(0.5 * (k1 * l2 - 3.0))
        .min(betas.beta1 / 2.0);
    let eta_e = n * betas.beta3 / 2.0 + 36.0 * alpha * alpha * l.powi(4) / k2;
    let x = 18.0 * pk.d_max * beta * beta * alpha * alpha * l * l * pk.c_max.powi(4)
        / (c * pk.lambda_min_p * pk.lambda_min_p);
    let x_eta_hat = 2.0 * pk.d_max / c * (3.0 * ln * ln * k1 * k1 + 12.0 + 9.0 * alpha * alpha * l * l);
    let x_z_tilde = 18.0 * pk.d_max * alpha * alpha / c;
    let theta_x_tilde =
        eta_e * pk.c_max + eta_edot * pk.c_acl_max + eta_edot * pk.c_pi_max * pk.c_max * alpha * l;
    let gamma = GammaConstants {
        theta_prime,
        eta,
        eta_star,
        eta_e,
        eta_edot,
        x,
        x_eta_hat,
        x_z_tilde,
        theta_x_tilde,
    };
    let v = beta * eta / 4.0;
    let m_prime = 4.0 / c
        * pk.p_max
        * pk.pi_max
        * pk.pi_max
        * ((3.0 * ln * ln * k1 * k1 + 12.0 + 9.0 * alpha * alpha * l * l) + 9.0 * alpha * alpha);
    let h1 = cbf.map(|inp| {
        inp.theta0_sq / 2.0 + 4.0 * eta_star * (l + 1.0) * inp.drift_const.powi(2) / eta
    });
    DerivedConstants {
        n_agents: data.n_agents,
        lambda2: l2,
        lambda_n: ln,
        l_max: l,
        sigma: obj.sigma,
        sigma1: obj.sigma1,
        m1: data.m1,
        grad_bound: data.grad_bound,
        beta_fns: betas,
        gamma,
        plant: pk.into(),
        v,
        m_prime,
        h1,
    }
}

/// One inequality of the report. `margin` is positive when it holds.
#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub relation: &'static str,
    pub rhs: f64,
    pub margin: f64,
    pub passed: bool,
}

impl FeasibilityCheck {
    fn new(name: &'static str, lhs: f64, relation: &'static str, rhs: f64) -> Self {
        let (margin, passed) = match relation {
            "<" => (rhs - lhs, lhs < rhs),
            "<=" => (rhs - lhs, lhs <= rhs),
            ">" => (lhs - rhs, lhs > rhs),
            ">=" => (lhs - rhs, lhs >= rhs),
            _ => unreachable!("unknown relation {relation}"),
        };
        Self {
            name,
            lhs,
            relation,
            rhs,
            margin,
            passed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub params: ProtocolParams,
    pub checks: Vec<FeasibilityCheck>,
    pub certified: bool,
    pub derived: DerivedConstants,
}

impl FeasibilityReport {
    pub fn check(&self, name: &str) -> Option<&FeasibilityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Evaluates every sufficient condition. Without [`CbfInputs`] the CBF
/// bound cannot be evaluated and is reported as failing.
pub fn feasibility_report(
    params: &ProtocolParams,
    data: &ProblemData<'_>,
    cbf: Option<&CbfInputs>,
) -> FeasibilityReport {
    let d = derive_constants(params, data, cbf);
    let ProtocolParams { alpha, beta, k1, k2 } = *params;
    let n = d.n_agents as f64;
    let (l2, ln, l) = (d.lambda2, d.lambda_n, d.l_max);
    let g = &d.gamma;
    let c = d.plant.c;
    let shared = 6.0 * ln * ln * k1 * k1 + 24.0 + 18.0 * alpha * alpha * l * l;
    let z_eta = g.x_z_tilde.max(2.0 * g.x_eta_hat);

    let convergence_bound = [
        1.0,
        g.eta / (2.0 * g.theta_prime),
        (c / (4.0 * g.x)).sqrt(),
        0.25 * (c * g.eta / (g.theta_x_tilde * z_eta)).sqrt(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let small_gain = 2.0 * (g.theta_x_tilde / g.eta).sqrt() * 2.0 * beta * (z_eta / c).sqrt();

    let cbf_bound = match (cbf, d.h1) {
        (Some(inp), Some(h1)) => {
            let pk = &d.plant;
            let implicit = (c * c
                / (72.0 * beta * beta * alpha * alpha * l * l * pk.p_max * pk.pi_max.powi(2) * pk.c_max.powi(2)))
            .powf(0.25);
            [
                implicit,
                (c * h1 / (8.0 * inp.envelope_beta1 * inp.xi * d.m_prime)).sqrt(),
                c / (8.0 * g.theta_x_tilde),
                g.eta / (8.0 * g.x_eta_hat.max(2.0 * g.x_z_tilde)),
                c / (2.0 * g.eta),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
        }
        _ => f64::NAN,
    };

    let checks = vec![
        FeasibilityCheck::new("beta_positive", beta, ">", 0.0),
        FeasibilityCheck::new("beta_at_most_one", beta, "<=", 1.0),
        FeasibilityCheck::new("alpha_admissible", d.beta_fns.beta1, ">", 0.0),
        FeasibilityCheck::new("k1_gain", k1 * l2 - 3.0, ">=", n * d.beta_fns.beta2 / 2.0),
        FeasibilityCheck::new(
            "k2_coupling",
            k2 * l2 - 72.0 * alpha * alpha * l * l / k2,
            ">=",
            2.0 * beta * alpha * alpha / (k1 * l2),
        ),
        FeasibilityCheck::new("k2_tracking", 8.0 * l * l / k2 * shared, "<=", k1 * l2 - 3.0),
        FeasibilityCheck::new("k2_decision", 8.0 * l * l * n / k2 * shared, "<=", d.beta_fns.beta1 / 2.0),
        FeasibilityCheck::new("convergence_beta_bound", beta, "<", convergence_bound),
        FeasibilityCheck::new("small_gain", small_gain, "<", 1.0),
        FeasibilityCheck::new("cbf_beta_bound", beta, "<", cbf_bound),
    ];
    let certified = checks.iter().all(|c| c.passed);
    FeasibilityReport {
        params: *params,
        checks,
        certified,
        derived: d,
    }
}
