//! The Loan structural causal model.
//!
//! Features are evaluated in the fixed topological order
//! `Ge, Ag, Ed, LA, Dur, Inc, Sav`. Each structural equation is written once,
//! generically over [`Real`], so the same definitions drive plain sampling,
//! exact abduction and the differentiable counterfactual pass used to train
//! the amortized solver.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;

pub const N_FEATURES: usize = 7;
pub const N_ACTIONABLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "Ge")]
    Ge,
    #[serde(rename = "Ag")]
    Ag,
    #[serde(rename = "Ed")]
    Ed,
    #[serde(rename = "LA")]
    La,
    #[serde(rename = "Dur")]
    Dur,
    #[serde(rename = "Inc")]
    Inc,
    #[serde(rename = "Sav")]
    Sav,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Ge,
        Feature::Ag,
        Feature::Ed,
        Feature::La,
        Feature::Dur,
        Feature::Inc,
        Feature::Sav,
    ];

    /// Globally actionable features, in causal order.
    pub const ACTIONABLE: [Feature; N_ACTIONABLE] =
        [Feature::La, Feature::Dur, Feature::Inc, Feature::Sav];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Position among [`Feature::ACTIONABLE`].
    pub fn actionable_index(self) -> Option<usize> {
        Self::ACTIONABLE.iter().position(|&f| f == self)
    }

    pub fn is_actionable(self) -> bool {
        self.actionable_index().is_some()
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Ge => "Ge",
            Feature::Ag => "Ag",
            Feature::Ed => "Ed",
            Feature::La => "LA",
            Feature::Dur => "Dur",
            Feature::Inc => "Inc",
            Feature::Sav => "Sav",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = ScmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| ScmError::UnknownFeature(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScmError {
    #[error("feature {0} is not globally actionable")]
    NotActionable(Feature),
    #[error("unknown feature name {0:?}")]
    UnknownFeature(String),
    #[error("{feature}={value} lies outside the model support")]
    Support { feature: Feature, value: f64 },
}

macro_rules! feature_array {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        pub struct $name(pub [f64; N_FEATURES]);

        impl Index<Feature> for $name {
            type Output = f64;
            fn index(&self, f: Feature) -> &f64 {
                &self.0[f.index()]
            }
        }

        impl IndexMut<Feature> for $name {
            fn index_mut(&mut self, f: Feature) -> &mut f64 {
                &mut self.0[f.index()]
            }
        }
    };
}

feature_array!(FeatureVector, "Endogenous features of one individual.");
feature_array!(ExogenousVector, "Exogenous noise, one entry per feature.");

impl FeatureVector {
    pub fn max_abs_diff(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A set of hard interventions `do(x_i := a_i)` on actionable features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action {
    interventions: BTreeMap<Feature, f64>,
}

impl Action {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn set(&mut self, feature: Feature, value: f64) -> Result<(), ScmError> {
        if !feature.is_actionable() {
            return Err(ScmError::NotActionable(feature));
        }
        self.interventions.insert(feature, value);
        Ok(())
    }

    pub fn with(mut self, feature: Feature, value: f64) -> Result<Self, ScmError> {
        self.set(feature, value)?;
        Ok(self)
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.interventions.get(&feature).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn features(&self) -> impl Iterator<Item = Feature> + '_ {
        self.interventions.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Feature, f64)> + '_ {
        self.interventions.iter().map(|(&f, &v)| (f, v))
    }

    pub fn pins(&self) -> [Option<f64>; N_FEATURES] {
        let mut pins = [None; N_FEATURES];
        for (f, v) in self.iter() {
            pins[f.index()] = Some(v);
        }
        pins
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }
}

/// Structural equations of an additive-or-invertible-noise SCM whose
/// topological order is the feature index order.
pub trait StructuralModel {
    /// `x_f = f(parents(x), u_f)`; only entries of `x` before `f` are read.
    fn equation<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES], noise: T) -> T;

    /// Inverse of [`equation`](Self::equation) in the noise argument.
    /// Callers must check [`support`](Self::support) first.
    fn invert<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES]) -> T;

    /// Direct causes of `feature`.
    fn parents(&self, feature: Feature) -> &'static [Feature];

    fn noise_log_pdf<T: Real>(&self, feature: Feature, noise: T) -> T;

    /// `log |d u_f / d x_f|`.
    fn log_abs_jacobian<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES]) -> T;

    /// Checks that `x` lies inside the support of the observational density.
    fn support(&self, x: &FeatureVector) -> Result<(), ScmError>;

    fn sample_noise<R: Rng>(&self, rng: &mut R) -> ExogenousVector;

    /// Ground-truth decision for `x`.
    fn label(&self, x: &FeatureVector) -> u8;

    fn generate(&self, u: &ExogenousVector) -> FeatureVector {
        self.predict_pinned(u, &[None; N_FEATURES])
    }

    /// Exact abduction by inverting each equation.
    fn abduct(&self, x: &FeatureVector) -> Result<ExogenousVector, ScmError> {
        self.support(x)?;
        let mut u = [0.0; N_FEATURES];
        for f in Feature::ALL {
            u[f.index()] = self.invert(f, &x.0);
        }
        Ok(ExogenousVector(u))
    }

    /// Evaluates the intervened model: pinned features take their target
    /// values, the rest are recomputed from `u` in topological order.
    fn predict(&self, u: &ExogenousVector, action: &Action) -> FeatureVector {
        self.predict_pinned(u, &action.pins())
    }

    fn predict_pinned(&self, u: &ExogenousVector, pins: &[Option<f64>; N_FEATURES]) -> FeatureVector {
        let mut x = [0.0; N_FEATURES];
        for f in Feature::ALL {
            let i = f.index();
            x[i] = match pins[i] {
                Some(v) => v,
                None => self.equation(f, &x, u.0[i]),
            };
        }
        FeatureVector(x)
    }

    /// Abduction, intervention, prediction.
    fn counterfactual(&self, x: &FeatureVector, action: &Action) -> Result<FeatureVector, ScmError> {
        let u = self.abduct(x)?;
        Ok(self.counterfactual_pinned(x, &u, &action.pins()))
    }

    /// Prediction step of a counterfactual for factual `x` with abducted
    /// noise `u`. Features whose value and ancestors are untouched keep their
    /// factual value bit for bit.
    fn counterfactual_pinned(
        &self,
        x: &FeatureVector,
        u: &ExogenousVector,
        pins: &[Option<f64>; N_FEATURES],
    ) -> FeatureVector {
        let mut cf = x.0;
        let mut changed = [false; N_FEATURES];
        for f in Feature::ALL {
            let i = f.index();
            match pins[i] {
                Some(v) => {
                    cf[i] = v;
                    changed[i] = v != x.0[i];
                }
                None => {
                    if self.parents(f).iter().any(|p| changed[p.index()]) {
                        cf[i] = self.equation(f, &cf, u.0[i]);
                        changed[i] = true;
                    }
                }
            }
        }
        FeatureVector(cf)
    }

    /// Exact log-density by change of variables; `-inf` outside the support
    /// (see [`support`](Self::support) for the reason).
    fn log_density(&self, x: &FeatureVector) -> f64 {
        if self.support(x).is_err() {
            return f64::NEG_INFINITY;
        }
        self.log_density_of(&x.0)
    }

    /// Log-density without the support check, usable on taped values.
    fn log_density_of<T: Real>(&self, x: &[T; N_FEATURES]) -> T {
        let mut total: Option<T> = None;
        for f in Feature::ALL {
            let u = self.invert(f, x);
            let term = self.noise_log_pdf(f, u) + self.log_abs_jacobian(f, x);
            total = Some(match total {
                Some(t) => t + term,
                None => term,
            });
        }
        total.expect("at least one feature")
    }
}

const LN_2PI: f64 = 1.8378770664093453;
/// `ln Γ(10) = ln 9!`.
const LN_GAMMA_10: f64 = 12.801827480081469;
const AGE_SHAPE: f64 = 10.0;
const AGE_SCALE: f64 = 3.5;

/// The semi-synthetic Loan model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoanScm;

impl LoanScm {
    /// Variance of the Gaussian noise of each continuous non-age feature.
    pub fn noise_variance(feature: Feature) -> Option<f64> {
        match feature {
            Feature::Ed => Some(0.25),
            Feature::La => Some(4.0),
            Feature::Dur => Some(9.0),
            Feature::Inc => Some(4.0),
            Feature::Sav => Some(0.25),
            Feature::Ge | Feature::Ag => None,
        }
    }

    fn ed_inner<T: Real>(x: &[T; N_FEATURES]) -> T {
        let ge = x[Feature::Ge.index()];
        let ag = x[Feature::Ag.index()];
        ge * 0.5 + (ag * 0.1).sigmoid() - 1.0
    }

    /// Argument of the outcome sigmoid, `0.3 (-LA - Dur + Inc + Sav + a Inc Sav)`.
    pub fn label_score(x: &FeatureVector) -> f64 {
        let (la, dur, inc, sav) = (x[Feature::La], x[Feature::Dur], x[Feature::Inc], x[Feature::Sav]);
        let alpha = if inc > 0.0 && sav > 0.0 { 1.0 } else { -1.0 };
        0.3 * (-la - dur + inc + sav + alpha * inc * sav)
    }
}

impl StructuralModel for LoanScm {
    fn equation<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES], u: T) -> T {
        let ge = x[Feature::Ge.index()];
        let ag = x[Feature::Ag.index()];
        match feature {
            Feature::Ge => u,
            Feature::Ag => u - 35.0,
            Feature::Ed => (Self::ed_inner(x) + u).sigmoid() - 0.5,
            Feature::La => (ag - 5.0) * (ag - 5.0) * 0.01 + (-ge + 1.0) + u,
            Feature::Dur => ag * 0.1 + (-ge + 1.0) * 2.0 + x[Feature::La.index()] + u - 1.0,
            Feature::Inc => {
                let ed = x[Feature::Ed.index()];
                (ag + 35.0) * 0.1 + ge * 2.0 + ge * ed + u - 4.0
            }
            Feature::Sav => {
                let inc = x[Feature::Inc.index()];
                inc.indicator_stopgrad() * inc * 1.5 + u - 4.0
            }
        }
    }

    fn invert<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES]) -> T {
        let xf = x[feature.index()];
        match feature {
            Feature::Ge => xf,
            Feature::Ag => xf + 35.0,
            Feature::Ed => {
                let p = xf + 0.5;
                (p / (-p + 1.0)).ln() - Self::ed_inner(x)
            }
            _ => {
                // Additive noise: u = x - f(parents, 0).
                let zero = xf * 0.0;
                xf - self.equation(feature, x, zero)
            }
        }
    }

    fn parents(&self, feature: Feature) -> &'static [Feature] {
        use Feature::*;
        match feature {
            Ge | Ag => &[],
            Ed => &[Ge, Ag],
            La => &[Ge, Ag],
            Dur => &[Ge, Ag, La],
            Inc => &[Ge, Ag, Ed],
            Sav => &[Inc],
        }
    }

    fn noise_log_pdf<T: Real>(&self, feature: Feature, u: T) -> T {
        match feature {
            Feature::Ge => u * 0.0 + (0.5f64).ln(),
            Feature::Ag => {
                u.ln() * (AGE_SHAPE - 1.0) - u / AGE_SCALE - (LN_GAMMA_10 + AGE_SHAPE * AGE_SCALE.ln())
            }
            f => {
                let var = Self::noise_variance(f).unwrap();
                u * u * (-0.5 / var) - 0.5 * (LN_2PI + var.ln())
            }
        }
    }

    fn log_abs_jacobian<T: Real>(&self, feature: Feature, x: &[T; N_FEATURES]) -> T {
        let xf = x[feature.index()];
        match feature {
            Feature::Ed => {
                // u = logit(Ed + 0.5) - c, du/dEd = 1 / (p (1 - p)).
                let p = xf + 0.5;
                -(p.ln() + (-p + 1.0).ln())
            }
            _ => xf * 0.0,
        }
    }

    fn support(&self, x: &FeatureVector) -> Result<(), ScmError> {
        if let Some(f) = Feature::ALL.into_iter().find(|&f| !x[f].is_finite()) {
            return Err(ScmError::Support {
                feature: f,
                value: x[f],
            });
        }
        let ge = x[Feature::Ge];
        if ge != 0.0 && ge != 1.0 {
            return Err(ScmError::Support {
                feature: Feature::Ge,
                value: ge,
            });
        }
        let ag = x[Feature::Ag];
        if ag <= -35.0 {
            return Err(ScmError::Support {
                feature: Feature::Ag,
                value: ag,
            });
        }
        let ed = x[Feature::Ed];
        if !(ed > -0.5 && ed < 0.5) {
            return Err(ScmError::Support {
                feature: Feature::Ed,
                value: ed,
            });
        }
        Ok(())
    }

    fn sample_noise<R: Rng>(&self, rng: &mut R) -> ExogenousVector {
        let mut u = [0.0; N_FEATURES];
        let bern = Bernoulli::new(0.5).unwrap();
        u[Feature::Ge.index()] = if bern.sample(rng) { 1.0 } else { 0.0 };
        u[Feature::Ag.index()] = Gamma::new(AGE_SHAPE, AGE_SCALE).unwrap().sample(rng);
        for f in [Feature::Ed, Feature::La, Feature::Dur, Feature::Inc, Feature::Sav] {
            let sd = Self::noise_variance(f).unwrap().sqrt();
            u[f.index()] = Normal::new(0.0, sd).unwrap().sample(rng);
        }
        ExogenousVector(u)
    }

    fn label(&self, x: &FeatureVector) -> u8 {
        u8::from(Self::label_score(x) >= 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe_noise() -> ExogenousVector {
        let mut u = [0.0; N_FEATURES];
        u[Feature::Ge.index()] = 1.0;
        u[Feature::Ag.index()] = 35.0;
        ExogenousVector(u)
    }

    #[test]
    fn zero_noise_probe() {
        let x = LoanScm.generate(&probe_noise());
        let expected = [1.0, 0.0, 0.0, 0.25, -0.75, 1.5, -1.75];
        for (a, b) in x.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", x);
        }
        // -0.25 + 0.75 + 1.5 - 1.75 + (-1)(1.5)(-1.75) = 2.875
        assert!((LoanScm::label_score(&x) - 0.3 * 2.875).abs() < 1e-12);
        assert_eq!(LoanScm.label(&x), 1);
    }

    #[test]
    fn label_boundaries() {
        let mut x = FeatureVector([0.0; N_FEATURES]);
        assert_eq!(LoanScm.label(&x), 1);
        x[Feature::Inc] = 1.0;
        x[Feature::Sav] = 1.0;
        assert!((LoanScm::label_score(&x) - 0.9).abs() < 1e-12);
        assert_eq!(LoanScm.label(&x), 1);
        x[Feature::La] = 5.0;
        assert_eq!(LoanScm.label(&x), 0);
    }

    #[test]
    fn abduct_recovers_probe_noise() {
        let x = LoanScm.generate(&probe_noise());
        let u = LoanScm.abduct(&x).unwrap();
        for f in Feature::ALL {
            assert!((u[f] - probe_noise()[f]).abs() < 1e-12, "{f}");
        }
    }

    #[test]
    fn abduct_rejects_ed_out_of_range() {
        let mut x = LoanScm.generate(&probe_noise());
        x[Feature::Ed] = 0.6;
        assert!(matches!(
            LoanScm.abduct(&x),
            Err(ScmError::Support {
                feature: Feature::Ed,
                ..
            })
        ));
        assert_eq!(LoanScm.log_density(&x), f64::NEG_INFINITY);
    }

    #[test]
    fn intervention_on_income_propagates_to_savings_only() {
        let x = LoanScm.generate(&probe_noise());
        let a = Action::empty().with(Feature::Inc, 3.0).unwrap();
        let cf = LoanScm.counterfactual(&x, &a).unwrap();
        assert!((cf[Feature::Sav] - 0.5).abs() < 1e-12);
        assert_eq!(cf[Feature::La], x[Feature::La]);
        assert_eq!(cf[Feature::Dur], x[Feature::Dur]);
        assert_eq!(cf[Feature::Inc], 3.0);
    }

    #[test]
    fn empty_and_self_interventions_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = LoanScm.generate(&LoanScm.sample_noise(&mut rng));
            assert_eq!(LoanScm.counterfactual(&x, &Action::empty()).unwrap(), x);
            let u = LoanScm.abduct(&x).unwrap();
            assert!(LoanScm.predict(&u, &Action::empty()).max_abs_diff(&x) < 1e-9);
            for f in Feature::ACTIONABLE {
                let a = Action::empty().with(f, x[f]).unwrap();
                assert_eq!(LoanScm.counterfactual(&x, &a).unwrap(), x);
                assert!(LoanScm.predict(&u, &a).max_abs_diff(&x) < 1e-9);
            }
        }
    }

    #[test]
    fn action_rejects_non_actionable() {
        assert_eq!(
            Action::empty().with(Feature::Ag, 1.0).unwrap_err(),
            ScmError::NotActionable(Feature::Ag)
        );
    }

    #[test]
    fn savings_intervention_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = LoanScm.generate(&LoanScm.sample_noise(&mut rng));
            let a = Action::empty().with(Feature::Sav, x[Feature::Sav] + 2.0).unwrap();
            let cf = LoanScm.counterfactual(&x, &a).unwrap();
            for f in Feature::ALL.into_iter().filter(|&f| f != Feature::Sav) {
                assert_eq!(cf[f], x[f]);
            }
        }
    }

    #[test]
    fn raising_positive_income_raises_savings() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = LoanScm.generate(&LoanScm.sample_noise(&mut rng));
            let base = x[Feature::Inc].max(0.1);
            let lo = LoanScm
                .counterfactual(&x, &Action::empty().with(Feature::Inc, base).unwrap())
                .unwrap();
            let hi = LoanScm
                .counterfactual(&x, &Action::empty().with(Feature::Inc, base + 0.5).unwrap())
                .unwrap();
            assert!(hi[Feature::Sav] > lo[Feature::Sav]);
        }
    }

    #[test]
    fn log_density_drops_with_noise_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut u = LoanScm.sample_noise(&mut rng);
            for f in [Feature::La, Feature::Dur, Feature::Inc, Feature::Sav, Feature::Ed] {
                u[f] = 0.0;
            }
            let base = LoanScm.log_density(&LoanScm.generate(&u));
            assert!(base.is_finite());
            for f in [Feature::La, Feature::Dur, Feature::Inc, Feature::Sav] {
                let sd = LoanScm::noise_variance(f).unwrap().sqrt();
                let mut prev = base;
                for k in 1..=3 {
                    let mut shifted = u;
                    shifted[f] = k as f64 * sd;
                    let lp = LoanScm.log_density(&LoanScm.generate(&shifted));
                    assert!(lp < prev, "{f} k={k}");
                    prev = lp;
                }
            }
        }
    }

    #[test]
    fn action_json_uses_feature_names() {
        let a = Action::empty()
            .with(Feature::Inc, 2.5)
            .unwrap()
            .with(Feature::La, -1.0)
            .unwrap();
        assert_eq!(a.to_json(), r#"{"LA":-1.0,"Inc":2.5}"#);
        let back: Action = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }
}
