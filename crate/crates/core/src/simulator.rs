//! Fixed-step closed-loop integration, trace recording, the centralized
//! optimum oracle and convergence metrics.

use log::{debug, info};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::linalg::{dist, gemv_acc, norm};
use crate::objectives::ObjectiveEnsemble;
use crate::plant::{plant_constants, synthesize, AgentSynthesis, GainSpec, LinearAgent, PlantConstants};
use crate::protocol::{
    decision_rhs, feasibility_report, CbfInputs, FeasibilityReport, ProblemData, ProtocolParams,
};
use crate::safety::{cbf_value, output_safety_check, safety_report, weighted_sq, x_tilde, AgentSafety, SafetyReport};
use crate::sets::{one_sided_distances, safety_radius, ConvexRegion, ExpandingSchedule};

/// Convergence tolerance of the centralized oracle.
pub const ORACLE_TOL: f64 = 1e-12;
/// Iteration cap of the centralized oracle.
pub const ORACLE_MAX_ITER: usize = 1_000_000;
/// Finite-difference step for the drift of the time-varying optimum.
pub const DRIFT_FD_STEP: f64 = 1e-4;
/// States larger than this are treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plants in the loop, outputs track the decisions.
    ClosedLoop,
    /// Decision dynamics alone on a static Ω, gradients evaluated at `sᵢ`.
    OptimizerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrationSettings {
    pub step: f64,
    pub horizon: f64,
    pub output_stride: usize,
    /// Halve the step whenever some `ηᵢ` is within `10·step` of `∂Ω̄(t)`.
    pub substep_on_boundary: bool,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self {
            step: 1e-3,
            horizon: 30.0,
            output_stride: 10,
            substep_on_boundary: false,
        }
    }
}

impl IntegrationSettings {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }
}

/// A validated scenario, ready to be prepared and integrated.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub mode: Mode,
    pub graph: CommGraph,
    /// Empty in optimizer-only mode.
    pub agents: Vec<LinearAgent>,
    pub gains: Vec<GainSpec>,
    pub objectives: ObjectiveEnsemble,
    pub schedule: ExpandingSchedule,
    pub params: ProtocolParams,
    pub y0: Vec<Vec<f64>>,
    pub x0: Option<Vec<Vec<f64>>>,
    pub eta0: Option<Vec<Vec<f64>>>,
    pub integration: IntegrationSettings,
    pub seed: u64,
    pub curvature_override: Option<f64>,
    pub grad_bound_override: Option<f64>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    pub fn output_dim(&self) -> usize {
        self.objectives.dim()
    }

    pub fn omega(&self) -> &ConvexRegion {
        self.schedule.target()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_agents();
        let p = self.output_dim();
        if self.objectives.len() != n {
            return Err(Error::config(format!("{} objectives for {n} agents", self.objectives.len())));
        }
        if self.omega().dim() != p {
            return Err(Error::config("constraint dimension differs from objective dimension"));
        }
        if self.mode == Mode::ClosedLoop {
            if self.agents.len() != n || self.gains.len() != n {
                return Err(Error::config(format!("{} agents for a graph of {n} nodes", self.agents.len())));
            }
            if let Some((i, _)) = self.agents.iter().enumerate().find(|(_, a)| a.n_outputs() != p) {
                return Err(Error::config(format!("agent {i} has {} outputs, expected {p}", self.agents[i].n_outputs())));
            }
        }
        if self.y0.len() != n || self.y0.iter().any(|y| y.len() != p) {
            return Err(Error::config(format!("initial.y0 must hold {n} vectors of length {p}")));
        }
        if let Some(x0) = &self.x0 {
            if self.mode == Mode::ClosedLoop
                && (x0.len() != n || x0.iter().zip(&self.agents).any(|(x, a)| x.len() != a.n_states()))
            {
                return Err(Error::config("initial.x0 dimensions do not match the agents"));
            }
        }
        if let Some(eta0) = &self.eta0 {
            if eta0.len() != n || eta0.iter().any(|e| e.len() != p) {
                return Err(Error::config(format!("initial.eta0 must hold {n} vectors of length {p}")));
            }
        }
        let s = &self.integration;
        if !(s.step > 0.0 && s.step.is_finite()) || !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(Error::config("integration step and horizon must be positive"));
        }
        if s.step > s.horizon {
            return Err(Error::config("integration step exceeds the horizon"));
        }
        if s.output_stride == 0 {
            return Err(Error::config("output_stride must be at least 1"));
        }
        Ok(())
    }
}

/// Result of the centralized projected-gradient oracle.
#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub y: Vec<f64>,
    /// `‖P(y − ∇f(y)/L) − y‖` at the returned point.
    pub residual: f64,
    pub iterations: usize,
    pub value: f64,
}

/// In-place projection `(point, out)`.
type Projector<'a> = dyn Fn(&[f64], &mut [f64]) -> Result<()> + 'a;

fn projected_gradient(
    objectives: &ObjectiveEnsemble,
    project: &Projector<'_>,
    start: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, f64, usize)> {
    let step = 1.0 / objectives.total_lipschitz();
    let mut y = vec![0.0; start.len()];
    project(start, &mut y)?;
    let mut next = vec![0.0; y.len()];
    let mut last = f64::INFINITY;
    for it in 1..=ORACLE_MAX_ITER {
        let g = objectives.total_gradient(&y);
        let trial: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        project(&trial, &mut next)?;
        last = dist(&next, &y);
        std::mem::swap(&mut y, &mut next);
        if last <= tol {
            return Ok((y, last, it));
        }
    }
    Err(Error::NonConvergence {
        routine: "centralized oracle",
        iterations: ORACLE_MAX_ITER,
        last_step: last,
    })
}

/// Minimizer of `Σᵢ fᵢ` over `region` by projected gradient with step
/// `1/Σᵢ Lᵢ`.
pub fn centralized_oracle(objectives: &ObjectiveEnsemble, region: &ConvexRegion, tol: f64) -> Result<OracleResult> {
    let project = |x: &[f64], out: &mut [f64]| region.project_into(x, out);
    let (y, _, iterations) = projected_gradient(objectives, &project, &region.interior_point(), tol)?;
    let step = 1.0 / objectives.total_lipschitz();
    let g = objectives.total_gradient(&y);
    let trial: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
    let residual = dist(&region.project(&trial)?, &y);
    Ok(OracleResult {
        value: objectives.total_value(&y),
        y,
        residual,
        iterations,
    })
}

/// Minimizer over `Ω̄(t)`, warm-started from `start`.
pub fn optimum_at(
    objectives: &ObjectiveEnsemble,
    schedule: &ExpandingSchedule,
    t: f64,
    start: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    let project = |x: &[f64], out: &mut [f64]| schedule.project_into(t, x, out);
    Ok(projected_gradient(objectives, &project, start, tol)?.0)
}

/// `(y*(t), ẏ*(t))` with the derivative from a central difference.
pub fn time_varying_oracle(
    objectives: &ObjectiveEnsemble,
    schedule: &ExpandingSchedule,
    t: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let start = schedule.target().interior_point();
    let y = optimum_at(objectives, schedule, t, &start, tol)?;
    let lo = (t - DRIFT_FD_STEP).max(0.0);
    let hi = t + DRIFT_FD_STEP;
    let ylo = optimum_at(objectives, schedule, lo, &y, tol)?;
    let yhi = optimum_at(objectives, schedule, hi, &y, tol)?;
    let dy = yhi.iter().zip(&ylo).map(|(a, b)| (a - b) / (hi - lo)).collect();
    Ok((y, dy))
}

/// `‖P_Ω(s − α·∇f̄(s)) − s‖` with `∇f̄` the averaged gradient; zero exactly
/// at the constrained optimum.
pub fn fixed_point_residual(
    objectives: &ObjectiveEnsemble,
    region: &ConvexRegion,
    alpha: f64,
    s: &[f64],
) -> Result<f64> {
    let n = objectives.len() as f64;
    let g = objectives.total_gradient(s);
    let trial: Vec<f64> = s.iter().zip(&g).map(|(a, b)| a - alpha * b / n).collect();
    Ok(dist(&region.project(&trial)?, s))
}

/// Scenario plus everything computed before integration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub synth: Vec<AgentSynthesis>,
    pub plant_constants: Option<PlantConstants>,
    pub oracle: OracleResult,
    pub x0: Vec<Vec<f64>>,
    pub eta0: Vec<Vec<f64>>,
    /// Barrier value at `t = 0` (closed loop only).
    pub h0: Option<f64>,
    safety: Vec<AgentSafety>,
}

impl Prepared {
    pub fn y_star(&self) -> &[f64] {
        &self.oracle.y
    }

    /// Class-K slope of the decrease condition: the common decay rate over 8.
    pub fn cbf_slope(&self) -> f64 {
        self.plant_constants.map_or(0.0, |k| k.c / 8.0)
    }
}

/// Synthesis, oracle, initial conditions and the barrier precondition.
pub fn prepare(scenario: Scenario) -> Result<Prepared> {
    scenario.validate()?;
    let n = scenario.n_agents();
    let p = scenario.output_dim();
    let omega = scenario.omega().clone();
    if scenario.mode == Mode::ClosedLoop {
        let r0 = safety_radius(&scenario.schedule, 0.0)?;
        if !(r0 > 0.0) {
            return Err(Error::config("the expanding set must start strictly inside Ω"));
        }
    }

    let synth: Vec<AgentSynthesis> = if scenario.mode == Mode::ClosedLoop {
        scenario
            .agents
            .iter()
            .zip(&scenario.gains)
            .enumerate()
            .map(|(i, (a, g))| synthesize(i + 1, a, g))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let plant_constants = if synth.is_empty() {
        None
    } else {
        Some(plant_constants(&scenario.agents, &synth)?)
    };
    let oracle = centralized_oracle(&scenario.objectives, &omega, ORACLE_TOL)?;
    info!("oracle optimum {:?} after {} iterations", oracle.y, oracle.iterations);

    let eta0 = scenario.eta0.clone().unwrap_or_else(|| scenario.y0.clone());
    for (i, e) in eta0.iter().enumerate() {
        if !(omega.signed_distance(e) > 0.0) {
            return Err(Error::config(format!("initial eta of agent {i} is not inside Int(Ω)")));
        }
    }
    let x0: Vec<Vec<f64>> = match (&scenario.x0, scenario.mode) {
        (Some(x0), Mode::ClosedLoop) => x0.clone(),
        // Unmeasured state components start at zero.
        (None, Mode::ClosedLoop) => scenario
            .agents
            .iter()
            .zip(&scenario.y0)
            .map(|(a, y)| {
                let pinv = a
                    .c
                    .clone()
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::numerical("output pseudo-inverse", e))?;
                let mut x = vec![0.0; a.n_states()];
                gemv_acc(&pinv, y, &mut x);
                Ok(x)
            })
            .collect::<Result<_>>()?,
        (_, Mode::OptimizerOnly) => vec![Vec::new(); n],
    };

    let safety: Vec<AgentSafety> = synth
        .iter()
        .zip(&scenario.agents)
        .map(|(s, a)| AgentSafety::new(s, &a.c))
        .collect::<Result<_>>()?;

    let h0 = if scenario.mode == Mode::ClosedLoop {
        let (_, beta2) = one_sided_distances(&scenario.schedule, 0.0)?;
        let mut weighted = Vec::with_capacity(n);
        let mut s = vec![0.0; p];
        for i in 0..n {
            scenario.schedule.project_into(0.0, &eta0[i], &mut s)?;
            let xt = x_tilde(&synth[i].pi, &x0[i], &s);
            weighted.push(weighted_sq(&synth[i].p, &xt));
        }
        let h0 = cbf_value(beta2, &weighted);
        info!("barrier at t = 0: {h0:.6e}");
        if h0 < 0.0 {
            return Err(Error::UnsafeInitialCondition { h0 });
        }
        Some(h0)
    } else {
        None
    };

    Ok(Prepared {
        scenario,
        synth,
        plant_constants,
        oracle,
        x0,
        eta0,
        h0,
        safety,
    })
}

/// Sup over Ω (sampled) of the averaged gradient norm.
pub fn gradient_bound(objectives: &ObjectiveEnsemble, omega: &ConvexRegion, seed: u64) -> f64 {
    let n = objectives.len() as f64;
    omega
        .interior_samples(10_000, seed)
        .into_iter()
        .chain(omega.boundary_samples(1000, seed))
        .map(|y| norm(&objectives.total_gradient(&y)) / n)
        .fold(0.0, f64::max)
}

/// Sampled sup over `[0, horizon]` of the curvature of `∂Ω̄(t)`.
pub fn curvature_bound(schedule: &ExpandingSchedule, horizon: f64) -> Result<f64> {
    (0..=50)
        .map(|k| schedule.curvature_at(horizon * k as f64 / 50.0))
        .try_fold(0.0, |acc: f64, k| k.map(|k| acc.max(k)))
}

/// `‖θ‖²` from the stacked tracker and decision states.
fn theta_sq(z: &[f64], eta: &[f64], eta_star: &[f64], n: usize, p: usize) -> f64 {
    let mean = |v: &[f64]| -> Vec<f64> {
        (0..p).map(|k| (0..n).map(|i| v[i * p + k]).sum::<f64>() / n as f64).collect()
    };
    let zbar = mean(z);
    let ebar = mean(eta);
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..p {
            acc += (z[i * p + k] - zbar[k]).powi(2) + (eta[i * p + k] - ebar[k]).powi(2);
        }
    }
    acc + n as f64 * dist(&ebar, eta_star).powi(2)
}

/// `η*(t) = y*(t) − α·∇f̄(y*(t))`.
fn eta_star(objectives: &ObjectiveEnsemble, alpha: f64, y_star: &[f64]) -> Vec<f64> {
    let n = objectives.len() as f64;
    let g = objectives.total_gradient(y_star);
    y_star.iter().zip(&g).map(|(y, gk)| y - alpha * gk / n).collect()
}

/// Feasibility report with the trajectory-dependent CBF inputs filled in.
/// `None` in optimizer-only mode.
pub fn feasibility(prep: &Prepared) -> Result<Option<FeasibilityReport>> {
    let Some(plant) = prep.plant_constants.as_ref() else {
        return Ok(None);
    };
    let sc = &prep.scenario;
    let (lambda2, lambda_n) = sc.graph.algebraic_connectivity()?;
    let m1 = match sc.curvature_override {
        Some(m) => m,
        None => curvature_bound(&sc.schedule, sc.integration.horizon)?,
    };
    let grad_bound = sc
        .grad_bound_override
        .unwrap_or_else(|| gradient_bound(&sc.objectives, sc.omega(), sc.seed));
    let data = ProblemData {
        n_agents: sc.n_agents(),
        lambda2,
        lambda_n,
        objectives: sc.objectives.constants(),
        plant,
        m1,
        grad_bound,
    };
    let v = feasibility_report(&sc.params, &data, None).derived.v;

    let horizon = sc.integration.horizon;
    let mut drift_const: f64 = 0.0;
    for k in 0..=200 {
        let t = horizon * k as f64 / 200.0;
        let (_, dy) = time_varying_oracle(&sc.objectives, &sc.schedule, t, ORACLE_TOL)?;
        drift_const = drift_const.max(norm(&dy) * (v * t).exp());
    }
    let n = sc.n_agents();
    let p = sc.output_dim();
    let y0_star = optimum_at(&sc.objectives, &sc.schedule, 0.0, &sc.omega().interior_point(), ORACLE_TOL)?;
    let z0: Vec<f64> = sc
        .objectives
        .locals()
        .iter()
        .zip(&sc.y0)
        .flat_map(|(f, y)| f.gradient(y))
        .collect();
    let eta0: Vec<f64> = prep.eta0.concat();
    let theta0_sq = theta_sq(&z0, &eta0, &eta_star(&sc.objectives, sc.params.alpha, &y0_star), n, p);
    let (envelope_beta1, _) = one_sided_distances(&sc.schedule, 0.0)?;
    let cbf = CbfInputs {
        theta0_sq,
        drift_const,
        envelope_beta1,
        xi: sc.schedule.xi,
    };
    Ok(Some(feasibility_report(&sc.params, &data, Some(&cbf))))
}

/// Per-agent snapshot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: Vec<f64>,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    /// Signed distance of `y` to `∂Ω`, positive inside.
    pub margin_omega: f64,
    /// `r(t) − ‖y − s‖`.
    pub margin_ball: f64,
    pub margin_zone: Option<f64>,
    /// `x̃ᵀPx̃`.
    pub x_tilde_weighted: Option<f64>,
    /// `‖y − y*‖` against the static optimum.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub agents: Vec<AgentSample>,
    pub h: Option<f64>,
    pub r: f64,
    pub beta2: f64,
    pub theta_norm: Option<f64>,
}

impl TraceSample {
    pub fn max_gap(&self) -> f64 {
        self.agents.iter().map(|a| a.gap).fold(0.0, f64::max)
    }
}

/// Samples at every `output_stride`-th step plus the final step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationTrace {
    pub n_agents: usize,
    pub output_dim: usize,
    pub samples: Vec<TraceSample>,
}

impl SimulationTrace {
    pub fn empty(n_agents: usize, output_dim: usize) -> Self {
        Self {
            n_agents,
            output_dim,
            samples: Vec::new(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> Option<&TraceSample> {
        self.samples.last()
    }
}

/// Flat state layout: plant states of every agent, then `ζ`, then `η`.
struct Dynamics<'a> {
    prep: &'a Prepared,
    n: usize,
    p: usize,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
    zeta_off: usize,
    eta_off: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    u: Vec<f64>,
}

impl<'a> Dynamics<'a> {
    fn new(prep: &'a Prepared) -> Self {
        let sc = &prep.scenario;
        let n = sc.n_agents();
        let p = sc.output_dim();
        let mut x_off = Vec::with_capacity(n + 1);
        let mut u_off = Vec::with_capacity(n + 1);
        let (mut xo, mut uo) = (0, 0);
        for i in 0..n {
            x_off.push(xo);
            u_off.push(uo);
            if sc.mode == Mode::ClosedLoop {
                xo += sc.agents[i].n_states();
                uo += sc.agents[i].n_inputs();
            }
        }
        x_off.push(xo);
        u_off.push(uo);
        Self {
            prep,
            n,
            p,
            x_off,
            u_off,
            zeta_off: xo,
            eta_off: xo + n * p,
            y: vec![0.0; n * p],
            z: vec![0.0; n * p],
            s: vec![0.0; n * p],
            u: vec![0.0; uo],
        }
    }

    fn len(&self) -> usize {
        self.eta_off + self.n * self.p
    }

    fn initial_state(&self) -> Vec<f64> {
        let mut st = vec![0.0; self.len()];
        for i in 0..self.n {
            st[self.x_off[i]..self.x_off[i + 1]].copy_from_slice(&self.prep.x0[i]);
            st[self.eta_off + i * self.p..self.eta_off + (i + 1) * self.p].copy_from_slice(&self.prep.eta0[i]);
        }
        st
    }

    /// Fills `y`, `z`, `s`, `u` from `state` and writes the derivative.
    fn eval(&mut self, t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        let sc = &self.prep.scenario;
        let p = self.p;
        let (xs, rest) = state.split_at(self.zeta_off);
        let (zeta, eta) = rest.split_at(self.n * p);
        for i in 0..self.n {
            let rng = i * p..(i + 1) * p;
            sc.schedule.project_into(t, &eta[rng.clone()], &mut self.s[rng.clone()])?;
            match sc.mode {
                Mode::ClosedLoop => {
                    let agent = &sc.agents[i];
                    let syn = &self.prep.synth[i];
                    let x = &xs[self.x_off[i]..self.x_off[i + 1]];
                    let y = &mut self.y[rng.clone()];
                    y.fill(0.0);
                    gemv_acc(&agent.c, x, y);
                    let u = &mut self.u[self.u_off[i]..self.u_off[i + 1]];
                    u.fill(0.0);
                    gemv_acc(&syn.k1, x, u);
                    gemv_acc(&syn.k2, &self.s[rng.clone()], u);
                    let dx = &mut out[self.x_off[i]..self.x_off[i + 1]];
                    dx.fill(0.0);
                    gemv_acc(&agent.a, x, dx);
                    gemv_acc(&agent.b, u, dx);
                }
                Mode::OptimizerOnly => {
                    let (src, dst) = (&self.s[rng.clone()], &mut self.y[rng.clone()]);
                    dst.copy_from_slice(src);
                }
            }
            let z = &mut self.z[rng.clone()];
            sc.objectives.locals()[i].gradient_into(&self.y[rng.clone()], z);
            for (zk, c) in z.iter_mut().zip(&zeta[rng]) {
                *zk += c;
            }
        }
        let (_, rest) = out.split_at_mut(self.zeta_off);
        let (dzeta, deta) = rest.split_at_mut(self.n * p);
        decision_rhs(&sc.graph, &sc.params, p, &self.z, eta, &self.s, dzeta, deta);
        Ok(())
    }

    fn near_boundary(&self, t: f64, state: &[f64], band: f64) -> Result<bool> {
        let region = self.prep.scenario.schedule.region_at(t)?;
        let eta = &state[self.eta_off..];
        Ok((0..self.n).any(|i| region.signed_distance(&eta[i * self.p..(i + 1) * self.p]).abs() <= band))
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(len: usize) -> Self {
        Self {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }

    fn step(&mut self, dynamics: &mut Dynamics<'_>, t: f64, h: f64, state: &mut [f64]) -> Result<()> {
        dynamics.eval(t, state, &mut self.k1)?;
        for ((o, x), k) in self.tmp.iter_mut().zip(state.iter()).zip(&self.k1) {
            *o = x + 0.5 * h * k;
        }
        dynamics.eval(t + 0.5 * h, &self.tmp, &mut self.k2)?;
        for ((o, x), k) in self.tmp.iter_mut().zip(state.iter()).zip(&self.k2) {
            *o = x + 0.5 * h * k;
        }
        dynamics.eval(t + 0.5 * h, &self.tmp, &mut self.k3)?;
        for ((o, x), k) in self.tmp.iter_mut().zip(state.iter()).zip(&self.k3) {
            *o = x + h * k;
        }
        dynamics.eval(t + h, &self.tmp, &mut self.k4)?;
        for (j, x) in state.iter_mut().enumerate() {
            *x += h / 6.0 * (self.k1[j] + 2.0 * self.k2[j] + 2.0 * self.k3[j] + self.k4[j]);
        }
        Ok(())
    }
}

struct Recorder<'a> {
    prep: &'a Prepared,
    y_star_t: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Recorder<'a> {
    fn sample(&mut self, dynamics: &mut Dynamics<'_>, t: f64, state: &[f64]) -> Result<TraceSample> {
        dynamics.eval(t, state, &mut self.scratch)?;
        let sc = &self.prep.scenario;
        let (n, p) = (dynamics.n, dynamics.p);
        // Without plants there is no tracking error to budget for.
        let (r, beta2) = match sc.mode {
            Mode::ClosedLoop => (safety_radius(&sc.schedule, t)?, one_sided_distances(&sc.schedule, t)?.1),
            Mode::OptimizerOnly => (0.0, 0.0),
        };
        let eta = &state[dynamics.eta_off..];
        let mut agents = Vec::with_capacity(n);
        let mut weighted = Vec::with_capacity(n);
        for i in 0..n {
            let rng = i * p..(i + 1) * p;
            let y = &dynamics.y[rng.clone()];
            let s = &dynamics.s[rng.clone()];
            let x = state[dynamics.x_off[i]..dynamics.x_off[i + 1]].to_vec();
            let check = output_safety_check(y, s, sc.omega(), r);
            let (zone, wsq) = if sc.mode == Mode::ClosedLoop {
                let ag = &self.prep.safety[i];
                let xt = x_tilde(&ag.pi, &x, s);
                let w = weighted_sq(&ag.p, &xt);
                weighted.push(w);
                (Some(ag.zone_from_weighted(w, r).margin), Some(w))
            } else {
                (None, None)
            };
            agents.push(AgentSample {
                x,
                y: y.to_vec(),
                z: dynamics.z[rng.clone()].to_vec(),
                eta: eta[rng.clone()].to_vec(),
                s: s.to_vec(),
                u: dynamics.u[dynamics.u_off[i]..dynamics.u_off[i + 1]].to_vec(),
                margin_omega: check.margin_omega,
                margin_ball: check.margin_ball,
                margin_zone: zone,
                x_tilde_weighted: wsq,
                gap: dist(y, self.prep.y_star()),
            });
        }
        let h = (sc.mode == Mode::ClosedLoop).then(|| cbf_value(beta2, &weighted));
        self.y_star_t = optimum_at(&sc.objectives, &sc.schedule, t, &self.y_star_t, ORACLE_TOL)?;
        let es = eta_star(&sc.objectives, sc.params.alpha, &self.y_star_t);
        let theta = theta_sq(&dynamics.z, &eta[..n * p], &es, n, p).sqrt();
        Ok(TraceSample {
            t,
            agents,
            h,
            r,
            beta2,
            theta_norm: Some(theta),
        })
    }
}

/// Classical RK4 at a fixed step, projecting onto `Ω̄(t)` at every stage.
pub fn integrate_closed_loop(prep: &Prepared) -> Result<SimulationTrace> {
    let sc = &prep.scenario;
    let settings = sc.integration;
    let mut dynamics = Dynamics::new(prep);
    let mut state = dynamics.initial_state();
    let mut rk = Rk4::new(state.len());
    let mut recorder = Recorder {
        prep,
        y_star_t: prep.y_star().to_vec(),
        scratch: vec![0.0; state.len()],
    };
    let steps = settings.n_steps();
    let h = settings.step;
    let mut trace = SimulationTrace::empty(sc.n_agents(), sc.output_dim());
    trace.samples.push(recorder.sample(&mut dynamics, 0.0, &state)?);
    let mut substeps = 0usize;
    for k in 0..steps {
        let t = k as f64 * h;
        if settings.substep_on_boundary && dynamics.near_boundary(t, &state, 10.0 * h)? {
            rk.step(&mut dynamics, t, 0.5 * h, &mut state)?;
            rk.step(&mut dynamics, t + 0.5 * h, 0.5 * h, &mut state)?;
            substeps += 1;
        } else {
            rk.step(&mut dynamics, t, h, &mut state)?;
        }
        let t_next = (k + 1) as f64 * h;
        if state.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence { t: t_next });
        }
        if (k + 1) % settings.output_stride == 0 || k + 1 == steps {
            trace.samples.push(recorder.sample(&mut dynamics, t_next, &state)?);
        }
    }
    debug!("{steps} steps, {substeps} halved near the boundary");
    Ok(trace)
}

/// Least-squares line through `(t, ln v)`: `(slope, R²)`.
pub fn log_linear_fit(times: &[f64], values: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return (0.0, 1.0);
    }
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let lm = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let stl: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - lm)).sum();
    let sll: f64 = pts.iter().map(|p| (p.1 - lm).powi(2)).sum();
    if stt == 0.0 {
        return (0.0, 1.0);
    }
    let slope = stl / stt;
    let r2 = if sll == 0.0 { 1.0 } else { stl * stl / (stt * sll) };
    (slope, r2)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceMetrics {
    pub final_gap: f64,
    /// Earliest sample time after which the gap stays below 0.1.
    pub time_to_1e_1: Option<f64>,
    pub time_to_1e_2: Option<f64>,
    /// Slope of `ln max_i ‖yᵢ − y*‖` over the final half-horizon.
    pub log_slope: f64,
    pub min_margin: f64,
}

fn settling_time(trace: &SimulationTrace, threshold: f64) -> Option<f64> {
    let mut t_settle = None;
    for s in &trace.samples {
        if s.max_gap() <= threshold {
            t_settle.get_or_insert(s.t);
        } else {
            t_settle = None;
        }
    }
    t_settle
}

pub fn convergence_metrics(trace: &SimulationTrace) -> ConvergenceMetrics {
    let final_gap = trace.last().map_or(f64::NAN, TraceSample::max_gap);
    let t_end = trace.last().map_or(0.0, |s| s.t);
    let (times, gaps): (Vec<f64>, Vec<f64>) = trace
        .samples
        .iter()
        .filter(|s| s.t >= 0.5 * t_end)
        .map(|s| (s.t, s.max_gap()))
        .unzip();
    let log_slope = if gaps.iter().all(|g| *g == 0.0) {
        0.0
    } else {
        log_linear_fit(&times, &gaps).0
    };
    let min_margin = trace
        .samples
        .iter()
        .flat_map(|s| s.agents.iter().map(|a| a.margin_omega))
        .fold(f64::INFINITY, f64::min);
    ConvergenceMetrics {
        final_gap,
        time_to_1e_1: settling_time(trace, 1e-1),
        time_to_1e_2: settling_time(trace, 1e-2),
        log_slope,
        min_margin,
    }
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub prepared: Prepared,
    pub feasibility: Option<FeasibilityReport>,
    pub trace: SimulationTrace,
    pub safety: SafetyReport,
    pub metrics: ConvergenceMetrics,
}

impl RunOutput {
    pub fn certified(&self) -> Option<bool> {
        self.feasibility.as_ref().map(|r| r.certified)
    }
}

/// Synthesis, feasibility, integration, safety and metrics in order.
pub fn run(scenario: Scenario) -> Result<RunOutput> {
    let prepared = prepare(scenario)?;
    let feasibility = feasibility(&prepared)?;
    if let Some(r) = &feasibility {
        if !r.certified {
            let failing: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            info!("parameters uncertified; failing: {}", failing.join(", "));
        }
    }
    let trace = integrate_closed_loop(&prepared)?;
    let safety = safety_report(&trace, prepared.cbf_slope(), None);
    let metrics = convergence_metrics(&trace);
    Ok(RunOutput {
        prepared,
        feasibility,
        trace,
        safety,
        metrics,
    })
}

/// Ratio `e(h)/e(h/2)` of sup-norm differences between runs at steps `h`,
/// `h/2` and `h/4`, compared on the grid of the coarsest run. About 16 for a
/// fourth-order scheme on a smooth segment.
pub fn step_halving_ratio(scenario: &Scenario) -> Result<f64> {
    let h = scenario.integration.step;
    let stride = scenario.integration.output_stride;
    let traces = [1usize, 2, 4]
        .iter()
        .map(|&f| {
            let mut sc = scenario.clone();
            sc.integration.step = h / f as f64;
            sc.integration.output_stride = stride * f;
            integrate_closed_loop(&prepare(sc)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let sup = |a: &SimulationTrace, b: &SimulationTrace| -> f64 {
        a.samples
            .iter()
            .zip(&b.samples)
            .flat_map(|(sa, sb)| sa.agents.iter().zip(&sb.agents))
            .map(|(x, y)| dist(&x.x, &y.x).max(dist(&x.y, &y.y)).max(dist(&x.eta, &y.eta)))
            .fold(0.0, f64::max)
    };
    Ok(sup(&traces[0], &traces[1]) / sup(&traces[1], &traces[2]))
}

/// Random diagonal-free targets whose centroid lies outside `Ω`.
pub fn random_outside_targets(n: usize, p: usize, omega: &ConvexRegion, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let dir: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = norm(&dir);
        if len < 1e-3 {
            continue;
        }
        let center = omega.interior_point();
        let reach = omega
            .boundary_samples(64, seed)
            .iter()
            .map(|b| dist(b, &center))
            .fold(0.0, f64::max);
        let radius = reach * rng.gen_range(1.3..2.5);
        let centroid: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + radius * d / len).collect();
        let mut targets: Vec<Vec<f64>> = (0..n)
            .map(|_| centroid.iter().map(|c| c + rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mean: Vec<f64> = (0..p).map(|k| targets.iter().map(|t| t[k]).sum::<f64>() / n as f64).collect();
        for t in &mut targets {
            for k in 0..p {
                t[k] += centroid[k] - mean[k];
            }
        }
        if omega.signed_distance(&centroid) < 0.0 {
            return targets;
        }
    }
}

/// Used by tests and the acceptance suite: an identity-output matrix.
pub fn identity_output(n_states: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, n_states, |i, j| if i == j { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::LocalObjective;
    use crate::plant::tests::{demo_agent, demo_k1};
    use std::f64::consts::SQRT_2;

    fn cycle5() -> CommGraph {
        CommGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0), (0, 4, 1.0)]).unwrap()
    }

    fn quadratics(targets: &[Vec<f64>]) -> ObjectiveEnsemble {
        ObjectiveEnsemble::new(
            targets
                .iter()
                .map(|t| LocalObjective::quadratic(t.clone(), 1.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn ball(r: f64) -> ConvexRegion {
        ConvexRegion::ball(vec![0.0, 0.0], r).unwrap()
    }

    fn demo_scenario(targets: Vec<Vec<f64>>, y0: Vec<Vec<f64>>, params: ProtocolParams) -> Scenario {
        Scenario {
            name: "test".into(),
            mode: Mode::ClosedLoop,
            graph: cycle5(),
            agents: (1..=5).map(demo_agent).collect(),
            gains: (1..=5).map(|i| GainSpec::Given(demo_k1(i))).collect(),
            objectives: quadratics(&targets),
            schedule: ExpandingSchedule::exponential(ball(2.0), 0.9, 0.5).unwrap(),
            params,
            y0,
            x0: None,
            eta0: None,
            integration: IntegrationSettings {
                step: 1e-3,
                horizon: 2.0,
                output_stride: 10,
                substep_on_boundary: false,
            },
            seed: 1,
            curvature_override: None,
            grad_bound_override: None,
        }
    }

    #[test]
    fn oracle_examples() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let o = centralized_oracle(&quadratics(&targets), &ball(2.0), ORACLE_TOL).unwrap();
        assert!((o.y[0] - SQRT_2).abs() < 1e-8 && (o.y[1] - SQRT_2).abs() < 1e-8);
        assert!(o.residual <= ORACLE_TOL);

        let o = centralized_oracle(&quadratics(&[vec![0.3, -0.4]]), &ball(2.0), ORACLE_TOL).unwrap();
        assert!(dist(&o.y, &[0.3, -0.4]) < 1e-12);

        let boxed = ConvexRegion::boxed(vec![-0.5, -0.5], vec![0.5, 0.5]).unwrap();
        let objs = quadratics(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let o = centralized_oracle(&objs, &boxed, ORACLE_TOL).unwrap();
        // Brute force over a 1001² grid of the box.
        let mut best = (f64::INFINITY, vec![0.0, 0.0]);
        for i in 0..=1000 {
            for j in 0..=1000 {
                let v = [-0.5 + i as f64 / 1000.0, -0.5 + j as f64 / 1000.0];
                let f = objs.total_value(&v);
                if f < best.0 {
                    best = (f, v.to_vec());
                }
            }
        }
        assert!(dist(&o.y, &best.1) < 1e-9);
        assert!(dist(&o.y, &[0.5, 0.5]) < 1e-12);
    }

    #[test]
    fn time_varying_oracle_examples() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let objs = quadratics(&targets);
        let sched = ExpandingSchedule::exponential(ball(2.0), 0.9, 0.5).unwrap();
        let (y, dy) = time_varying_oracle(&objs, &sched, 0.0, ORACLE_TOL).unwrap();
        let c = 1.1 / SQRT_2;
        assert!(dist(&y, &[c, c]) < 1e-12);
        // d/dt (2 − 0.9e^{−t/2})/√2 at 0 = 0.45/√2 (one-sided difference at t = 0).
        assert!((dy[0] - 0.45 / SQRT_2).abs() < 1e-4);
        let (y, _) = time_varying_oracle(&objs, &sched, 60.0, ORACLE_TOL).unwrap();
        assert!(dist(&y, &[SQRT_2, SQRT_2]) < 1e-12);

        let inner = quadratics(&vec![vec![0.2, 0.1]; 5]);
        let (_, dy) = time_varying_oracle(&inner, &sched, 1.0, ORACLE_TOL).unwrap();
        assert_eq!(norm(&dy), 0.0);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let y0 = vec![0.3, -0.2];
        let params = ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap();
        let mut sc = demo_scenario(vec![y0.clone(); 5], vec![y0.clone(); 5], params);
        sc.x0 = Some(
            (1..=5)
                .map(|i| {
                    let (pi, _) = crate::plant::solve_regulator(&demo_agent(i)).unwrap();
                    (&pi * nalgebra::DVector::from_column_slice(&y0)).as_slice().to_vec()
                })
                .collect(),
        );
        sc.integration.horizon = 100.0;
        sc.integration.output_stride = 1000;
        let prep = prepare(sc).unwrap();
        let trace = integrate_closed_loop(&prep).unwrap();
        for s in &trace.samples {
            for a in &s.agents {
                assert!(dist(&a.y, &y0) <= 1e-8);
            }
        }
        let m = convergence_metrics(&trace);
        assert!(m.final_gap < 1e-12);
        assert_eq!(m.log_slope, 0.0);
    }

    #[test]
    fn runs_are_deterministic_and_sized() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let y0 = vec![vec![0.0, 0.0], vec![1.1, 1.1], vec![0.1, 1.0], vec![-0.1, 0.6], vec![-1.0, -1.1]];
        let params = ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap();
        let sc = demo_scenario(targets, y0, params);
        let a = integrate_closed_loop(&prepare(sc.clone()).unwrap()).unwrap();
        let b = integrate_closed_loop(&prepare(sc).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 2000 / 10 + 1);
        assert!(a.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn tracker_sum_matches_gradient_sum() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let y0 = vec![vec![0.0, 0.0], vec![1.1, 1.1], vec![0.1, 1.0], vec![-0.1, 0.6], vec![-1.0, -1.1]];
        let sc = demo_scenario(targets, y0, ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap());
        let prep = prepare(sc).unwrap();
        let trace = integrate_closed_loop(&prep).unwrap();
        for s in &trace.samples {
            for k in 0..2 {
                let zsum: f64 = s.agents.iter().map(|a| a.z[k]).sum();
                let gsum: f64 = s
                    .agents
                    .iter()
                    .zip(prep.scenario.objectives.locals())
                    .map(|(a, f)| f.gradient(&a.y)[k])
                    .sum();
                assert!((zsum - gsum).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn unsafe_initial_condition_rejected() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let y0 = vec![vec![1.9, 0.0]; 5];
        let mut sc = demo_scenario(targets, y0, ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap());
        sc.eta0 = Some(vec![vec![0.0, 0.0]; 5]);
        assert!(matches!(prepare(sc), Err(Error::UnsafeInitialCondition { .. })));
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64; 2]).collect();
        let y0 = vec![vec![0.0, 0.0]; 5];
        let mut sc = demo_scenario(targets.clone(), y0.clone(), ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap());
        sc.y0.pop();
        assert!(matches!(prepare(sc), Err(Error::Config(_))));
        let mut sc = demo_scenario(targets.clone(), y0.clone(), ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap());
        sc.eta0 = Some(vec![vec![2.5, 0.0]; 5]);
        assert!(matches!(prepare(sc), Err(Error::Config(_))));
        let mut sc = demo_scenario(targets, y0, ProtocolParams::new(0.1, 0.1, 5.0, 10.0).unwrap());
        sc.integration.output_stride = 0;
        assert!(prepare(sc).is_err());
    }

    #[test]
    fn optimizer_only_reaches_interior_mean() {
        let graph = CommGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let sc = Scenario {
            name: "opt".into(),
            mode: Mode::OptimizerOnly,
            graph,
            agents: vec![],
            gains: vec![],
            objectives: quadratics(&[vec![2.0, 0.0], vec![0.0, 2.0]]),
            schedule: ExpandingSchedule::new(
                ball(10.0),
                crate::sets::Family::Static(ball(10.0 - 1e-3)),
                1.0,
                1.0,
            )
            .unwrap(),
            params: ProtocolParams::new(0.5, 1.0, 2.0, 2.0).unwrap(),
            y0: vec![vec![0.0, 0.0], vec![0.5, -0.5]],
            x0: None,
            eta0: None,
            integration: IntegrationSettings { step: 1e-2, horizon: 60.0, output_stride: 10, substep_on_boundary: false },
            seed: 0,
            curvature_override: None,
            grad_bound_override: None,
        };
        let out = run(sc).unwrap();
        assert!(out.feasibility.is_none());
        for a in &out.trace.last().unwrap().agents {
            assert!(dist(&a.s, &[1.0, 1.0]) < 1e-6, "{:?}", a.s);
        }
        assert!(out.safety.cbf_min.is_none());
    }

    #[test]
    fn rk4_order_on_smooth_segment() {
        let targets: Vec<Vec<f64>> = (1..=5).map(|i| vec![0.2 * i as f64, -0.1 * i as f64]).collect();
        let y0 = vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![0.1, 1.0], vec![-0.1, 0.6], vec![-1.0, -0.5]];
        let mut sc = demo_scenario(targets, y0, ProtocolParams::new(0.5, 1.0, 1.0, 1.0).unwrap());
        sc.schedule = ExpandingSchedule::new(ball(50.0), crate::sets::Family::Static(ball(49.0)), 1.0, 1.0).unwrap();
        sc.integration = IntegrationSettings { step: 0.02, horizon: 2.0, output_stride: 5, substep_on_boundary: false };
        let ratio = step_halving_ratio(&sc).unwrap();
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fit_recovers_exponential() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.2).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let (slope, r2) = log_linear_fit(&t, &v);
        assert!((slope + 0.7).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_targets_have_outside_centroid() {
        let omega = ball(2.0);
        for seed in 0..20 {
            let t = random_outside_targets(5, 2, &omega, seed);
            let c: Vec<f64> = (0..2).map(|k| t.iter().map(|v| v[k]).sum::<f64>() / 5.0).collect();
            assert!(omega.signed_distance(&c) < 0.0);
        }
    }
}
