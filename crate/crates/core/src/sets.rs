//! Convex regions, Euclidean projections and time-expanding constraint sets.
//!
//! The safety zone Ω is a compact convex [`ConvexRegion`]. Decision
//! variables are projected onto an [`ExpandingSchedule`], a nested family of
//! subsets of `Int(Ω)` that grows toward Ω. The gap between the two sets is
//! the safety radius `r(t)`: every ball of that radius centered in the inner
//! set stays inside Ω.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm};

/// Dykstra stopping tolerance on the per-sweep change.
pub const DYKSTRA_TOL: f64 = 1e-10;
/// Dykstra sweep cap.
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;
/// Default number of boundary samples for sampled set computations.
pub const DEFAULT_BOUNDARY_SAMPLES: usize = 1000;

/// Intersection of halfspaces `aᵢᵀx ≤ bᵢ` with unit normals and a known
/// strictly interior point.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    interior: Vec<f64>,
}

impl Polytope {
    pub fn normals(&self) -> &[Vec<f64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn interior_point(&self) -> &[f64] {
        &self.interior
    }

    fn max_violation(&self, x: &[f64]) -> (usize, f64) {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(a, b)| dot(a, x) - b)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            })
    }

    /// Distance along the ray `interior + s·dir` to the boundary.
    fn ray_exit(&self, dir: &[f64]) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .filter_map(|(a, b)| {
                let rate = dot(a, dir);
                (rate > 1e-15).then(|| (b - dot(a, &self.interior)) / rate)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.max_violation(x).1 <= 0.0 {
            return Ok(x.to_vec());
        }
        let m = self.normals.len();
        let mut y = x.to_vec();
        let mut increments = vec![vec![0.0; x.len()]; m];
        let mut converged = false;
        let mut last_step = f64::INFINITY;
        for _ in 0..DYKSTRA_MAX_SWEEPS {
            let prev = y.clone();
            for (i, (a, b)) in self.normals.iter().zip(&self.offsets).enumerate() {
                let shifted: Vec<f64> = y.iter().zip(&increments[i]).map(|(u, p)| u + p).collect();
                let excess = dot(a, &shifted) - b;
                let projected: Vec<f64> = if excess > 0.0 {
                    shifted.iter().zip(a).map(|(s, ai)| s - excess * ai).collect()
                } else {
                    shifted.clone()
                };
                for ((p, s), q) in increments[i].iter_mut().zip(&shifted).zip(&projected) {
                    *p = s - q;
                }
                y = projected;
            }
            last_step = dist(&y, &prev);
            if last_step <= DYKSTRA_TOL && self.max_violation(&y).1 <= DYKSTRA_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                routine: "Dykstra projection",
                iterations: DYKSTRA_MAX_SWEEPS,
                last_step,
            });
        }
        Ok(self.polish(x, y))
    }

    /// Exact projection onto the affine hull of the constraints active at the
    /// Dykstra iterate, accepted only if it satisfies the KKT conditions.
    fn polish(&self, x: &[f64], approx: Vec<f64>) -> Vec<f64> {
        let active: Vec<usize> = (0..self.normals.len())
            .filter(|&i| dot(&self.normals[i], &approx) - self.offsets[i] >= -1e-8)
            .collect();
        if active.is_empty() {
            return approx;
        }
        let p = x.len();
        let a = DMatrix::from_fn(active.len(), p, |r, c| self.normals[active[r]][c]);
        let rhs = DVector::from_iterator(
            active.len(),
            active
                .iter()
                .map(|&i| dot(&self.normals[i], x) - self.offsets[i]),
        );
        let gram = &a * a.transpose();
        let Ok(lambda) = gram.svd(true, true).solve(&rhs, 1e-12) else {
            return approx;
        };
        if lambda.iter().any(|&l| l < -1e-12) {
            return approx;
        }
        let step = a.transpose() * lambda;
        let y: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, s)| xi - s).collect();
        let feasible = self.max_violation(&y).1 <= 1e-12;
        if feasible && dist(&y, &approx) <= 1e-6 {
            y
        } else {
            approx
        }
    }
}

/// A compact convex region with nonempty interior.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexRegion {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Polytope(Polytope),
}

impl ConvexRegion {
    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::config("ball center must be nonempty"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Self::Ball { center, radius })
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::config("box bounds must be nonempty and of equal length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::config("box requires lower < upper componentwise"));
        }
        Ok(Self::Box { lower, upper })
    }

    /// Builds `{x : aᵢᵀx ≤ bᵢ}`. Normals are rescaled to unit length. When
    /// `interior` is omitted a strictly interior point is searched for.
    pub fn polytope(
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
        interior: Option<Vec<f64>>,
    ) -> Result<Self> {
        if normals.is_empty() || normals.len() != offsets.len() {
            return Err(Error::config("polytope needs matching normals and offsets"));
        }
        let p = normals[0].len();
        if p == 0 || normals.iter().any(|a| a.len() != p) {
            return Err(Error::config("polytope normals must share a nonzero dimension"));
        }
        let mut unit = Vec::with_capacity(normals.len());
        let mut scaled = Vec::with_capacity(offsets.len());
        for (a, b) in normals.into_iter().zip(offsets) {
            let len = norm(&a);
            if len == 0.0 || !len.is_finite() {
                return Err(Error::config("polytope normal must be nonzero"));
            }
            unit.push(a.iter().map(|v| v / len).collect::<Vec<_>>());
            scaled.push(b / len);
        }
        let mut poly = Polytope {
            normals: unit,
            offsets: scaled,
            interior: vec![0.0; p],
        };
        let point = match interior {
            Some(x) => {
                if x.len() != p {
                    return Err(Error::config("interior point has wrong dimension"));
                }
                x
            }
            None => find_interior_point(&poly)?,
        };
        if poly.max_violation(&point).1 >= 0.0 {
            return Err(Error::config("polytope interior point is not strictly interior"));
        }
        poly.interior = point;
        // Compactness: every direction must exit.
        for dir in unit_directions(p, 64, 7) {
            if !poly.ray_exit(&dir).is_finite() {
                return Err(Error::config("polytope is unbounded"));
            }
        }
        Ok(Self::Polytope(poly))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Ball { center, .. } => center.len(),
            Self::Box { lower, .. } => lower.len(),
            Self::Polytope(p) => p.interior.len(),
        }
    }

    /// A point strictly inside the region.
    pub fn interior_point(&self) -> Vec<f64> {
        match self {
            Self::Ball { center, .. } => center.clone(),
            Self::Box { lower, upper } => lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect(),
            Self::Polytope(p) => p.interior.clone(),
        }
    }

    /// Distance to the boundary, positive inside and negative outside.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        match self {
            Self::Ball { center, radius } => radius - dist(x, center),
            Self::Box { lower, upper } => {
                let inside = x.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| l <= v && v <= u);
                if inside {
                    x.iter()
                        .zip(lower.iter().zip(upper))
                        .map(|(v, (l, u))| (v - l).min(u - v))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    -x.iter()
                        .zip(lower.iter().zip(upper))
                        .map(|(v, (l, u))| {
                            let d = v - v.clamp(*l, *u);
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                }
            }
            Self::Polytope(p) => {
                let (_, viol) = p.max_violation(x);
                if viol <= 0.0 {
                    -viol
                } else {
                    match p.project(x) {
                        Ok(y) => -dist(x, &y),
                        Err(_) => -viol,
                    }
                }
            }
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.signed_distance(x) >= -tol
    }

    /// Euclidean projection `argmin_{v ∈ region} ‖v − x‖`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.project_into(x, &mut out)?;
        Ok(out)
    }

    pub fn project_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Self::Ball { center, radius } => project_ball(center, *radius, x, out),
            Self::Box { lower, upper } => {
                for (o, (v, (l, u))) in out.iter_mut().zip(x.iter().zip(lower.iter().zip(upper))) {
                    *o = v.clamp(*l, *u);
                }
            }
            Self::Polytope(p) => out.copy_from_slice(&p.project(x)?),
        }
        Ok(())
    }

    /// Projection onto the inner parallel body `{v : B(v, margin) ⊆ region}`
    /// without materializing it for balls and boxes.
    pub fn project_eroded_into(&self, margin: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            Self::Ball { center, radius } => {
                project_ball(center, radius - margin, x, out);
                Ok(())
            }
            Self::Box { lower, upper } => {
                for (o, (v, (l, u))) in out.iter_mut().zip(x.iter().zip(lower.iter().zip(upper))) {
                    *o = v.clamp(l + margin, u - margin);
                }
                Ok(())
            }
            Self::Polytope(_) => self.eroded(margin)?.project_into(x, out),
        }
    }

    /// Inner parallel body: points whose `margin`-ball fits in the region.
    pub fn eroded(&self, margin: f64) -> Result<Self> {
        match self {
            Self::Ball { center, radius } => Self::ball(center.clone(), radius - margin),
            Self::Box { lower, upper } => Self::boxed(
                lower.iter().map(|l| l + margin).collect(),
                upper.iter().map(|u| u - margin).collect(),
            ),
            Self::Polytope(p) => {
                let offsets: Vec<f64> = p.offsets.iter().map(|b| b - margin).collect();
                let shrunk = Polytope {
                    normals: p.normals.clone(),
                    offsets: offsets.clone(),
                    interior: p.interior.clone(),
                };
                let interior = if shrunk.max_violation(&p.interior).1 < 0.0 {
                    p.interior.clone()
                } else {
                    find_interior_point(&shrunk)?
                };
                Self::polytope(p.normals.clone(), offsets, Some(interior))
            }
        }
    }

    /// Upper bound on the normal curvature of the boundary. Flat faces give 0;
    /// corners of boxes and polytopes are not accounted for.
    pub fn curvature_bound(&self) -> f64 {
        match self {
            Self::Ball { radius, .. } => 1.0 / radius,
            Self::Box { .. } | Self::Polytope(_) => 0.0,
        }
    }

    /// Support function `max_{v ∈ region} ⟨dir, v⟩` where it has a closed form.
    pub fn support(&self, dir: &[f64]) -> Option<f64> {
        match self {
            Self::Ball { center, radius } => Some(dot(dir, center) + radius * norm(dir)),
            Self::Box { lower, upper } => Some(
                dir.iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(d, (l, u))| (d * l).max(d * u))
                    .sum(),
            ),
            Self::Polytope(_) => None,
        }
    }

    /// `max_{v ∈ region} ‖v − point‖` where it has a closed form.
    pub fn farthest_from(&self, point: &[f64]) -> Option<f64> {
        match self {
            Self::Ball { center, radius } => Some(dist(center, point) + radius),
            Self::Box { lower, upper } => Some(
                point
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(c, (l, u))| {
                        let d = (c - l).abs().max((u - c).abs());
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt(),
            ),
            Self::Polytope(_) => None,
        }
    }

    /// Halfspace description for polyhedral regions.
    pub fn halfspaces(&self) -> Option<Vec<(Vec<f64>, f64)>> {
        match self {
            Self::Ball { .. } => None,
            Self::Box { lower, upper } => {
                let p = lower.len();
                let mut hs = Vec::with_capacity(2 * p);
                for j in 0..p {
                    let mut e = vec![0.0; p];
                    e[j] = 1.0;
                    hs.push((e.clone(), upper[j]));
                    e[j] = -1.0;
                    hs.push((e, -lower[j]));
                }
                Some(hs)
            }
            Self::Polytope(poly) => Some(
                poly.normals
                    .iter()
                    .cloned()
                    .zip(poly.offsets.iter().copied())
                    .collect(),
            ),
        }
    }

    /// Deterministic boundary points. In the plane these are evenly spaced in
    /// angle; otherwise directions are drawn from a seeded generator. Box
    /// samples always include every corner for `p ≤ 10`.
    pub fn boundary_samples(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let p = self.dim();
        match self {
            Self::Ball { center, radius } => unit_directions(p, n, seed)
                .into_iter()
                .map(|d| center.iter().zip(&d).map(|(c, u)| c + radius * u).collect())
                .collect(),
            Self::Box { lower, upper } => {
                let mut out = Vec::with_capacity(n + (1 << p.min(10)));
                if p <= 10 {
                    for mask in 0..(1usize << p) {
                        out.push(
                            (0..p)
                                .map(|j| if mask >> j & 1 == 1 { upper[j] } else { lower[j] })
                                .collect(),
                        );
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for k in 0..n {
                    let face = k % (2 * p);
                    let mut v: Vec<f64> = (0..p)
                        .map(|j| lower[j] + rng.gen::<f64>() * (upper[j] - lower[j]))
                        .collect();
                    let j = face / 2;
                    v[j] = if face.is_multiple_of(2) { upper[j] } else { lower[j] };
                    out.push(v);
                }
                out
            }
            Self::Polytope(poly) => unit_directions(p, n, seed)
                .into_iter()
                .map(|d| {
                    let s = poly.ray_exit(&d);
                    poly.interior.iter().zip(&d).map(|(c, u)| c + s * u).collect()
                })
                .collect(),
        }
    }

    /// Deterministic points spread over the region (boundary included).
    pub fn interior_samples(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let p = self.dim() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        match self {
            Self::Box { lower, upper } => (0..n)
                .map(|_| {
                    lower
                        .iter()
                        .zip(upper)
                        .map(|(l, u)| l + rng.gen::<f64>() * (u - l))
                        .collect()
                })
                .collect(),
            _ => {
                let center = self.interior_point();
                self.boundary_samples(n, seed)
                    .into_iter()
                    .map(|b| {
                        let s = rng.gen::<f64>().powf(1.0 / p);
                        center.iter().zip(&b).map(|(c, v)| c + s * (v - c)).collect()
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for ConvexRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ball { center, radius } => write!(f, "ball(center={center:?}, radius={radius})"),
            Self::Box { lower, upper } => write!(f, "box({lower:?}, {upper:?})"),
            Self::Polytope(p) => write!(f, "polytope({} halfspaces)", p.normals.len()),
        }
    }
}

fn project_ball(center: &[f64], radius: f64, x: &[f64], out: &mut [f64]) {
    let d = dist(x, center);
    if d <= radius {
        out.copy_from_slice(x);
    } else {
        let scale = radius / d;
        for ((o, v), c) in out.iter_mut().zip(x).zip(center) {
            *o = c + (v - c) * scale;
        }
    }
}

/// Unit directions: evenly spaced in the plane, seeded Gaussian otherwise.
fn unit_directions(p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    match p {
        1 => (0..n).map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect(),
        2 => (0..n)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / n as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| loop {
                    let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let len = norm(&v);
                    if len > 1e-12 {
                        break v.into_iter().map(|a| a / len).collect();
                    }
                })
                .collect()
        }
    }
}

/// Subgradient descent on `max_i(aᵢᵀx − bᵢ)`; succeeds once the maximum is
/// strictly negative.
fn find_interior_point(poly: &Polytope) -> Result<Vec<f64>> {
    let p = poly.interior.len();
    let scale = poly.offsets.iter().map(|b| b.abs()).fold(1.0, f64::max);
    let mut x = vec![0.0; p];
    let mut best = x.clone();
    let mut best_val = poly.max_violation(&x).1;
    for k in 0..20_000 {
        let (i, _) = poly.max_violation(&x);
        let step = scale / (k as f64 + 10.0);
        for (xj, aj) in x.iter_mut().zip(&poly.normals[i]) {
            *xj -= step * aj;
        }
        let val = poly.max_violation(&x).1;
        if val < best_val {
            best_val = val;
            best.copy_from_slice(&x);
        }
    }
    if best_val < 0.0 {
        Ok(best)
    } else {
        Err(Error::config("polytope has empty interior"))
    }
}

/// Largest `r` with `inner ⊕ B(0, r) ⊆ outer`; nonpositive when `inner` is
/// not inside `Int(outer)`. Closed forms for ball/box pairs, boundary
/// sampling otherwise.
pub fn containment_slack(inner: &ConvexRegion, outer: &ConvexRegion, samples: usize) -> f64 {
    let exact = match outer {
        ConvexRegion::Ball { center, radius } => inner.farthest_from(center).map(|far| radius - far),
        _ => outer.halfspaces().and_then(|hs| {
            hs.iter()
                .map(|(a, b)| inner.support(a).map(|h| b - h))
                .try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
        }),
    };
    exact.unwrap_or_else(|| {
        inner
            .boundary_samples(samples, 11)
            .iter()
            .map(|x| outer.signed_distance(x))
            .fold(f64::INFINITY, f64::min)
    })
}

/// `max_{y ∈ ∂outer} dist(y, inner)`, i.e. the one-sided Hausdorff distance.
pub fn hausdorff_excess(inner: &ConvexRegion, outer: &ConvexRegion, samples: usize) -> f64 {
    match (inner, outer) {
        (
            ConvexRegion::Ball { center: ci, radius: ri },
            ConvexRegion::Ball { center: co, radius: ro },
        ) => (ro + dist(ci, co) - ri).max(0.0),
        (
            ConvexRegion::Box { lower: li, upper: ui },
            ConvexRegion::Box { lower: lo, upper: uo },
        ) => li
            .iter()
            .zip(ui)
            .zip(lo.iter().zip(uo))
            .map(|((li, ui), (lo, uo))| {
                let d = (li - lo).max(uo - ui).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        _ => outer
            .boundary_samples(samples, 13)
            .iter()
            .map(|y| match inner.project(y) {
                Ok(q) => dist(y, &q),
                Err(_) => (-inner.signed_distance(y)).max(0.0),
            })
            .fold(0.0, f64::max),
    }
}

/// Gap between the inner family and Ω as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarginProfile {
    /// `m(t) = gap · e^{−rate·t}`.
    Exponential { gap: f64, rate: f64 },
    /// `m(t) = initial + slope·t`.
    Affine { initial: f64, slope: f64 },
}

impl MarginProfile {
    pub fn margin(&self, t: f64) -> f64 {
        match *self {
            Self::Exponential { gap, rate } => gap * (-rate * t).exp(),
            Self::Affine { initial, slope } => initial + slope * t,
        }
    }
}

pub type RegionRule = Arc<dyn Fn(f64) -> Result<ConvexRegion> + Send + Sync>;

/// Rule `t ↦ Ω̄(t)`.
#[derive(Clone)]
pub enum Family {
    /// `Ω̄(t) = {v : B(v, m(t)) ⊆ Ω}`. For a ball Ω this is the concentric
    /// ball of radius `R − m(t)`.
    Erosion(MarginProfile),
    /// A time-invariant inner set (diagnostics only; never reaches Ω).
    Static(ConvexRegion),
    Custom(RegionRule),
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Erosion(m) => f.debug_tuple("Erosion").field(m).finish(),
            Self::Static(r) => f.debug_tuple("Static").field(r).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Expanding constraint family together with the C4 constants.
#[derive(Debug, Clone)]
pub struct ExpandingSchedule {
    target: ConvexRegion,
    family: Family,
    /// Ratio bound `ξ ≥ 1` in `β₁(t) ≤ ξ β₂(t)`.
    pub xi: f64,
    /// Envelope decay rate `v`.
    pub decay: f64,
    pub samples: usize,
}

impl ExpandingSchedule {
    pub fn new(target: ConvexRegion, family: Family, xi: f64, decay: f64) -> Result<Self> {
        if !(xi >= 1.0) {
            return Err(Error::config(format!("xi must be at least 1, got {xi}")));
        }
        if !(decay > 0.0) {
            return Err(Error::config(format!("decay rate v must be positive, got {decay}")));
        }
        Ok(Self {
            target,
            family,
            xi,
            decay,
            samples: DEFAULT_BOUNDARY_SAMPLES,
        })
    }

    /// Canonical schedule: Ω eroded by `gap·e^{−rate·t}`, with `ξ = 1` and
    /// `v = rate`.
    pub fn exponential(target: ConvexRegion, gap: f64, rate: f64) -> Result<Self> {
        if !(gap > 0.0 && rate > 0.0) {
            return Err(Error::config("expanding gap and rate must be positive"));
        }
        Self::new(target, Family::Erosion(MarginProfile::Exponential { gap, rate }), 1.0, rate)
    }

    pub fn target(&self) -> &ConvexRegion {
        &self.target
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// `Ω̄(t)`.
    pub fn region_at(&self, t: f64) -> Result<ConvexRegion> {
        match &self.family {
            Family::Erosion(profile) => {
                let m = profile.margin(t);
                if m < 0.0 {
                    return Err(Error::Invariant {
                        t,
                        detail: format!("negative erosion margin {m}"),
                    });
                }
                self.target.eroded(m).map_err(|e| Error::Invariant {
                    t,
                    detail: format!("expanding set is empty: {e}"),
                })
            }
            Family::Static(r) => Ok(r.clone()),
            Family::Custom(rule) => rule(t),
        }
    }

    /// `P_{Ω̄(t)}(x)` written into `out`.
    pub fn project_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.family {
            Family::Erosion(profile) => self.target.project_eroded_into(profile.margin(t), x, out),
            _ => self.region_at(t)?.project_into(x, out),
        }
    }

    pub fn project(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.project_into(t, x, &mut out)?;
        Ok(out)
    }

    /// Curvature bound of `∂Ω̄(t)` at time `t`.
    pub fn curvature_at(&self, t: f64) -> Result<f64> {
        Ok(self.region_at(t)?.curvature_bound())
    }
}

/// Shrinking safety radius `r(t)`: the largest `r` such that
/// `Ω̄(t) ⊕ B(0, r) ⊆ Ω`.
pub fn safety_radius(schedule: &ExpandingSchedule, t: f64) -> Result<f64> {
    let inner = schedule.region_at(t)?;
    let (r, floor_ok) = match schedule.family() {
        // The erosion margin is the slack itself; recomputing it from the
        // eroded set would cancel catastrophically once it is tiny. A margin
        // that has underflowed to zero is accepted.
        Family::Erosion(profile) => (profile.margin(t), true),
        _ => (containment_slack(&inner, schedule.target(), schedule.samples), false),
    };
    if r < 0.0 || (r == 0.0 && !floor_ok) || r.is_nan() {
        return Err(Error::Invariant {
            t,
            detail: format!("expanding set not inside Int(Ω) (slack {r:.3e})"),
        });
    }
    Ok(r)
}

/// `(β₁(t), β₂(t))`: the largest and smallest distance from a point of `∂Ω`
/// to `Ω̄(t)`.
pub fn one_sided_distances(schedule: &ExpandingSchedule, t: f64) -> Result<(f64, f64)> {
    let inner = schedule.region_at(t)?;
    let outer = schedule.target();
    if let Family::Erosion(profile) = schedule.family() {
        let m = profile.margin(t);
        match outer {
            ConvexRegion::Ball { .. } => return Ok((m, m)),
            ConvexRegion::Box { lower, .. } => return Ok((m * (lower.len() as f64).sqrt(), m)),
            ConvexRegion::Polytope(_) => {
                let b1 = hausdorff_excess(&inner, outer, schedule.samples);
                return Ok((b1.max(m), m));
            }
        }
    }
    let b1 = hausdorff_excess(&inner, outer, schedule.samples);
    let b2 = containment_slack(&inner, outer, schedule.samples).max(0.0);
    Ok((b1, b2.min(b1)))
}

/// Outcome of one sampled condition.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub first_violation_t: Option<f64>,
    pub detail: String,
}

impl ConditionCheck {
    fn from_violations(name: &'static str, first: Option<f64>, detail: String) -> Self {
        Self {
            name,
            passed: first.is_none(),
            first_violation_t: first,
            detail,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleReport {
    pub checks: Vec<ConditionCheck>,
    pub all_passed: bool,
}

impl ScheduleReport {
    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Fraction of `β₁(0)` that `β₁(horizon)` must fall below for the
/// convergence-to-Ω check.
pub const C2_DECAY_FRACTION: f64 = 1e-2;

/// Samples the C1–C4 conditions at `n_samples` evenly spaced times in
/// `[0, horizon]`.
///
/// The C4 envelope is checked with the tightest constants that satisfy it at
/// `t = 0`: `β₁(t) ≥ β₁(0)e^{−vt}` and, as a proxy for the optimum drift,
/// `|β̇₁(t)| ≤ |β̇₁(0)|e^{−vt}`.
pub fn validate_schedule(
    schedule: &ExpandingSchedule,
    horizon: f64,
    n_samples: usize,
) -> ScheduleReport {
    let n = n_samples.max(2);
    let times: Vec<f64> = (0..n).map(|k| horizon * k as f64 / (n - 1) as f64).collect();
    let outer = schedule.target();

    let mut interior_fail = None;
    let mut worst_slack = f64::INFINITY;
    let mut nesting_fail = None;
    let mut curvature_fail = None;
    let mut sup_curvature: f64 = 0.0;
    let mut regions = Vec::with_capacity(n);
    for &t in &times {
        match schedule.region_at(t) {
            Ok(r) => {
                let slack = containment_slack(&r, outer, schedule.samples);
                worst_slack = worst_slack.min(slack);
                if slack <= 0.0 && interior_fail.is_none() {
                    interior_fail = Some(t);
                }
                let k = r.curvature_bound();
                sup_curvature = sup_curvature.max(k);
                if !k.is_finite() && curvature_fail.is_none() {
                    curvature_fail = Some(t);
                }
                regions.push(Some(r));
            }
            Err(_) => {
                interior_fail.get_or_insert(t);
                curvature_fail.get_or_insert(t);
                regions.push(None);
            }
        }
    }
    for (k, pair) in regions.windows(2).enumerate() {
        let ok = match (&pair[0], &pair[1]) {
            (Some(a), Some(b)) => containment_slack(a, b, schedule.samples) >= -1e-12,
            _ => false,
        };
        if !ok {
            nesting_fail = Some(times[k + 1]);
            break;
        }
    }

    let betas: Vec<(f64, f64)> = times
        .iter()
        .map(|&t| one_sided_distances(schedule, t).unwrap_or((f64::NAN, f64::NAN)))
        .collect();

    let mut decay_fail = None;
    for (k, w) in betas.windows(2).enumerate() {
        if !(w[1].0 <= w[0].0 * (1.0 + 1e-12) + 1e-15) {
            decay_fail = Some(times[k + 1]);
            break;
        }
    }
    let b1_first = betas[0].0;
    let b1_last = betas[n - 1].0;
    if decay_fail.is_none() && !(b1_last <= C2_DECAY_FRACTION * b1_first) {
        decay_fail = Some(horizon);
    }

    let ratio_fail = times
        .iter()
        .zip(&betas)
        .find(|(_, (b1, b2))| !(*b1 <= schedule.xi * b2 * (1.0 + 1e-9) + 1e-15))
        .map(|(t, _)| *t);

    let v = schedule.decay;
    let b1_at = |t: f64| one_sided_distances(schedule, t).map(|b| b.0).unwrap_or(f64::NAN);
    // Second-order differences: central in the interior, one-sided at t = 0.
    let speed = |t: f64| -> f64 {
        let h = 1e-5 * t.max(1.0);
        if t >= h {
            ((b1_at(t + h) - b1_at(t - h)) / (2.0 * h)).abs()
        } else {
            ((-3.0 * b1_at(t) + 4.0 * b1_at(t + h) - b1_at(t + 2.0 * h)) / (2.0 * h)).abs()
        }
    };
    let speed0 = speed(0.0);
    let envelope_fail = times
        .iter()
        .zip(&betas)
        .find(|(&t, (b1, _))| {
            let lower_ok = *b1 >= b1_first * (-v * t).exp() * (1.0 - 1e-9);
            let drift_ok = speed(t) <= speed0 * (-v * t).exp() * (1.0 + 1e-6) + 1e-12;
            !(lower_ok && drift_ok)
        })
        .map(|(t, _)| *t);

    let checks = vec![
        ConditionCheck::from_violations(
            "c1_interior",
            interior_fail,
            format!("min slack to ∂Ω over samples: {worst_slack:.6e}"),
        ),
        ConditionCheck::from_violations(
            "c1_nesting",
            nesting_fail,
            "consecutive sampled sets nested".to_string(),
        ),
        ConditionCheck::from_violations(
            "c2_decay",
            decay_fail,
            format!("beta1(0) = {b1_first:.6e}, beta1(T) = {b1_last:.6e}"),
        ),
        ConditionCheck::from_violations(
            "c3_curvature",
            curvature_fail,
            format!("sup sampled curvature {sup_curvature:.6e}"),
        ),
        ConditionCheck::from_violations(
            "c4_ratio",
            ratio_fail,
            format!("xi = {}", schedule.xi),
        ),
        ConditionCheck::from_violations(
            "c4_envelope",
            envelope_fail,
            format!("v = {v}, beta1(0) = {b1_first:.6e}, |beta1'(0)| = {speed0:.6e}"),
        ),
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    ScheduleReport { checks, all_passed }
}
