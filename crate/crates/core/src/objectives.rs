//! Local objective functions `fᵢ` and the constants they feed into the
//! parameter formulas.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::dist;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type HessianActionFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum LocalObjective {
    /// `(weight/2)·‖y − target‖²`.
    Quadratic { target: Vec<f64>, weight: f64 },
    /// Any `σ`-strongly convex function with `L`-Lipschitz gradient.
    GeneralSmooth {
        dim: usize,
        value: ScalarFn,
        gradient: VectorFn,
        hessian_action: HessianActionFn,
        lipschitz: f64,
        sigma: f64,
    },
}

impl fmt::Debug for LocalObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quadratic { target, weight } => f
                .debug_struct("Quadratic")
                .field("target", target)
                .field("weight", weight)
                .finish(),
            Self::GeneralSmooth { dim, lipschitz, sigma, .. } => f
                .debug_struct("GeneralSmooth")
                .field("dim", dim)
                .field("lipschitz", lipschitz)
                .field("sigma", sigma)
                .finish_non_exhaustive(),
        }
    }
}

impl LocalObjective {
    pub fn quadratic(target: Vec<f64>, weight: f64) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::config("quadratic target must be nonempty"));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::config(format!("quadratic weight must be positive, got {weight}")));
        }
        Ok(Self::Quadratic { target, weight })
    }

    pub fn general(
        dim: usize,
        value: ScalarFn,
        gradient: VectorFn,
        hessian_action: HessianActionFn,
        lipschitz: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma <= lipschitz && lipschitz.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < sigma <= L, got sigma = {sigma}, L = {lipschitz}"
            )));
        }
        Ok(Self::GeneralSmooth {
            dim,
            value,
            gradient,
            hessian_action,
            lipschitz,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic { target, .. } => target.len(),
            Self::GeneralSmooth { dim, .. } => *dim,
        }
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            Self::Quadratic { target, weight } => 0.5 * weight * dist(y, target).powi(2),
            Self::GeneralSmooth { value, .. } => value(y),
        }
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.gradient_into(y, &mut out);
        out
    }

    pub fn gradient_into(&self, y: &[f64], out: &mut [f64]) {
        match self {
            Self::Quadratic { target, weight } => {
                for ((o, v), c) in out.iter_mut().zip(y).zip(target) {
                    *o = weight * (v - c);
                }
            }
            Self::GeneralSmooth { gradient, .. } => gradient(y, out),
        }
    }

    /// `∇²f(y)·w`.
    pub fn hessian_action(&self, y: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            Self::Quadratic { weight, .. } => w.iter().map(|v| weight * v).collect(),
            Self::GeneralSmooth { hessian_action, .. } => {
                let mut out = vec![0.0; w.len()];
                hessian_action(y, w, &mut out);
                out
            }
        }
    }

    /// Lipschitz constant of the gradient.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Self::Quadratic { weight, .. } => *weight,
            Self::GeneralSmooth { lipschitz, .. } => *lipschitz,
        }
    }

    /// Strong monotonicity constant of the gradient.
    pub fn sigma(&self) -> f64 {
        match self {
            Self::Quadratic { weight, .. } => *weight,
            Self::GeneralSmooth { sigma, .. } => *sigma,
        }
    }
}

/// The constants shared by all agents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConstants {
    pub l_max: f64,
    /// Average of the local strong-monotonicity constants.
    pub sigma: f64,
    /// `min(σ, 1/16)`.
    pub sigma1: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEnsemble {
    locals: Vec<LocalObjective>,
}

impl ObjectiveEnsemble {
    pub fn new(locals: Vec<LocalObjective>) -> Result<Self> {
        let Some(first) = locals.first() else {
            return Err(Error::config("objective ensemble is empty"));
        };
        let p = first.dim();
        if locals.iter().any(|f| f.dim() != p) {
            return Err(Error::config("objectives disagree on output dimension"));
        }
        Ok(Self { locals })
    }

    pub fn locals(&self) -> &[LocalObjective] {
        &self.locals
    }

    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locals[0].dim()
    }

    pub fn constants(&self) -> EnsembleConstants {
        let l_max = self.locals.iter().map(LocalObjective::lipschitz).fold(0.0, f64::max);
        let sigma = self.locals.iter().map(LocalObjective::sigma).sum::<f64>() / self.len() as f64;
        EnsembleConstants {
            l_max,
            sigma,
            sigma1: sigma.min(1.0 / 16.0),
        }
    }

    /// `Σᵢ fᵢ(y)`.
    pub fn total_value(&self, y: &[f64]) -> f64 {
        self.locals.iter().map(|f| f.value(y)).sum()
    }

    /// `Σᵢ ∇fᵢ(y)`.
    pub fn total_gradient(&self, y: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; y.len()];
        let mut g = vec![0.0; y.len()];
        for f in &self.locals {
            f.gradient_into(y, &mut g);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        acc
    }

    /// Sum of the local Lipschitz constants.
    pub fn total_lipschitz(&self) -> f64 {
        self.locals.iter().map(LocalObjective::lipschitz).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};
    use proptest::prelude::*;

    /// `f(y) = Σ_j [ log(1 + e^{y_j}) + (a/2) y_j² ]`: Hessian is diagonal
    /// with entries in `[a, a + 1/4]`.
    fn softplus(a: f64) -> LocalObjective {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        LocalObjective::general(
            2,
            Arc::new(move |y| y.iter().map(|v| v.exp().ln_1p() + 0.5 * a * v * v).sum()),
            Arc::new(move |y, out| {
                for (o, v) in out.iter_mut().zip(y) {
                    *o = sig(*v) + a * v;
                }
            }),
            Arc::new(move |y, w, out| {
                for ((o, v), wi) in out.iter_mut().zip(y).zip(w) {
                    *o = (sig(*v) * (1.0 - sig(*v)) + a) * wi;
                }
            }),
            a + 0.25,
            a,
        )
        .unwrap()
    }

    fn fd_gradient(f: &LocalObjective, y: &[f64], h: f64) -> Vec<f64> {
        (0..y.len())
            .map(|j| {
                let mut up = y.to_vec();
                let mut dn = y.to_vec();
                up[j] += h;
                dn[j] -= h;
                (f.value(&up) - f.value(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn quadratic_gradient_examples() {
        let f = LocalObjective::quadratic(vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(f.gradient(&[1.0, 1.0]), vec![0.0, 0.0]);
        for i in 1..=5 {
            let e = i as f64;
            let f = LocalObjective::quadratic(vec![e, e], 1.0).unwrap();
            assert_eq!(f.gradient(&[0.0, 0.0]), vec![-e, -e]);
        }
    }

    #[test]
    fn hessian_action_examples() {
        let f = LocalObjective::quadratic(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(f.hessian_action(&[0.3, 0.1], &[1.0, 0.0]), vec![1.0, 0.0]);
        let f = LocalObjective::quadratic(vec![0.0, 0.0], 3.0).unwrap();
        assert_eq!(f.hessian_action(&[0.3, 0.1], &[2.0, -1.0]), vec![6.0, -3.0]);
        let g = softplus(0.5);
        let y = [0.4, -1.2];
        let w = [0.7, 0.3];
        let h = 1e-6;
        let up: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a + h * b).collect();
        let dn: Vec<f64> = y.iter().zip(&w).map(|(a, b)| a - h * b).collect();
        let fd: Vec<f64> = g
            .gradient(&up)
            .iter()
            .zip(g.gradient(&dn))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let exact = g.hessian_action(&y, &w);
        let rel = dist(&fd, &exact) / norm(&exact);
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn ensemble_constant_examples() {
        let five: Vec<_> = (1..=5)
            .map(|i| LocalObjective::quadratic(vec![i as f64; 2], 1.0).unwrap())
            .collect();
        let c = ObjectiveEnsemble::new(five).unwrap().constants();
        assert_eq!((c.l_max, c.sigma, c.sigma1), (1.0, 1.0, 1.0 / 16.0));

        let one = ObjectiveEnsemble::new(vec![LocalObjective::quadratic(vec![0.0], 2.0).unwrap()]).unwrap();
        let c = one.constants();
        assert_eq!((c.l_max, c.sigma, c.sigma1), (2.0, 2.0, 1.0 / 16.0));

        let mixed = |l: f64, s: f64| {
            LocalObjective::general(
                1,
                Arc::new(|_| 0.0),
                Arc::new(|_, o| o[0] = 0.0),
                Arc::new(|_, _, o| o[0] = 0.0),
                l,
                s,
            )
            .unwrap()
        };
        let c = ObjectiveEnsemble::new(vec![mixed(1.0, 0.5), mixed(3.0, 0.01)]).unwrap().constants();
        assert_eq!(c.l_max, 3.0);
        assert!((c.sigma - 0.255).abs() < 1e-15);
        assert_eq!(c.sigma1, 1.0 / 16.0);
    }

    #[test]
    fn invalid_objectives_rejected() {
        assert!(LocalObjective::quadratic(vec![1.0], 0.0).is_err());
        assert!(LocalObjective::quadratic(vec![], 1.0).is_err());
        assert!(ObjectiveEnsemble::new(vec![]).is_err());
        assert!(ObjectiveEnsemble::new(vec![
            LocalObjective::quadratic(vec![1.0], 1.0).unwrap(),
            LocalObjective::quadratic(vec![1.0, 2.0], 1.0).unwrap(),
        ])
        .is_err());
    }

    fn sample_objectives() -> Vec<LocalObjective> {
        vec![
            LocalObjective::quadratic(vec![1.0, -2.0], 1.0).unwrap(),
            LocalObjective::quadratic(vec![0.5, 0.5], 3.5).unwrap(),
            softplus(0.2),
            softplus(2.0),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone_and_lipschitz(
            which in 0usize..4,
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            y in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let f = &sample_objectives()[which];
            let gx = f.gradient(&x);
            let gy = f.gradient(&y);
            let dg: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            prop_assert!(dot(&dg, &dx) >= f.sigma() * dot(&dx, &dx) - 1e-9);
            prop_assert!(norm(&dg) <= f.lipschitz() * norm(&dx) + 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradient_matches_finite_differences(
            which in 0usize..4,
            y in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let f = &sample_objectives()[which];
            let exact = f.gradient(&y);
            let fd = fd_gradient(f, &y, 1e-6);
            prop_assert!(dist(&exact, &fd) <= 1e-6 * (1.0 + norm(&exact)));
        }
    }
}
