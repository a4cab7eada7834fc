//! Per-user recourse outcomes shared by both solvers, and their CSV form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, NormStats};
use crate::preferences::PreferenceProfile;
use crate::scm::{Action, FeatureVector, LoanScm, ScmError, StructuralModel, N_ACTIONABLE};

#[derive(Debug, Error)]
pub enum ResultError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed results file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Oracle,
    Icarma,
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Oracle => "oracle",
            Solver::Icarma => "icarma",
        })
    }
}

impl FromStr for Solver {
    type Err = ResultError;
    fn from_str(s: &str) -> Result<Self, ResultError> {
        match s {
            "oracle" => Ok(Solver::Oracle),
            "icarma" => Ok(Solver::Icarma),
            _ => Err(ResultError::Malformed(format!("unknown solver {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecourseResult {
    /// Row index of the individual in the dataset.
    pub user_id: usize,
    pub solver: Solver,
    pub action: Action,
    pub x_cf: FeatureVector,
    pub valid: bool,
    /// ℓ2 norm of the normalized changes on the intervened features.
    pub cost_unweighted: f64,
    /// `Σ w_i Δx̂_i²` over the intervened features.
    pub cost_weighted: f64,
    pub logp_factual: f64,
    pub logp_cf: f64,
    pub hard_action: bool,
}

impl RecourseResult {
    /// Whether the counterfactual is at least as likely as the factual.
    pub fn plausible(&self) -> bool {
        self.logp_cf >= self.logp_factual
    }
}

/// Unweighted ℓ2 and weighted squared cost of `action` relative to `x`.
/// `weights` is indexed like the actionable features.
pub fn action_costs(x: &FeatureVector, action: &Action, norm: &NormStats, weights: &[f64; N_ACTIONABLE]) -> (f64, f64) {
    let mut plain = 0.0;
    let mut weighted = 0.0;
    for (f, v) in action.iter() {
        let d = (v - x[f]) / norm.std[f.index()];
        plain += d * d;
        weighted += weights[f.actionable_index().expect("actions are actionable")] * (d * d);
    }
    (plain.sqrt(), weighted)
}

pub fn touches_hard_feature(action: &Action, profile: &PreferenceProfile) -> bool {
    let hard = profile.hard_feature_set();
    action.features().any(|f| hard.contains(&f))
}

const HEADER: [&str; 8] = [
    "user_id",
    "solver",
    "valid",
    "cost",
    "logp_f",
    "logp_cf",
    "hard_action",
    "action_json",
];

/// Writes one row per result. The cost of an invalid result is undefined and
/// written as `NaN`.
pub fn write_results(path: &Path, results: &[RecourseResult]) -> Result<(), ResultError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in results {
        let cost = if r.valid { r.cost_unweighted } else { f64::NAN };
        w.write_record([
            r.user_id.to_string(),
            r.solver.to_string(),
            u8::from(r.valid).to_string(),
            cost.to_string(),
            r.logp_factual.to_string(),
            r.logp_cf.to_string(),
            u8::from(r.hard_action).to_string(),
            r.action.to_json(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a results file back; counterfactual features are recomputed from
/// the stored action and the individual's factual features in `dataset`.
pub fn read_results(path: &Path, dataset: &Dataset) -> Result<Vec<RecourseResult>, ResultError> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(HEADER) {
        return Err(ResultError::Malformed(format!("unexpected header in {}", path.display())));
    }
    let bad = |what: &str, v: &str| ResultError::Malformed(format!("bad {what} {v:?}"));
    let flag = |v: &str| match v {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad("flag", v)),
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let user_id: usize = rec[0].parse().map_err(|_| bad("user id", &rec[0]))?;
        let ind = dataset
            .individuals
            .get(user_id)
            .ok_or_else(|| bad("user id", &rec[0]))?;
        let action: Action = serde_json::from_str(&rec[7]).map_err(|_| bad("action", &rec[7]))?;
        if let Some(f) = action.features().find(|f| !f.is_actionable()) {
            return Err(ScmError::NotActionable(f).into());
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(HEADER[i], &rec[i]));
        let (cost, _) = action_costs(&ind.x, &action, &dataset.norm, &[1.0; N_ACTIONABLE]);
        out.push(RecourseResult {
            user_id,
            solver: rec[1].parse()?,
            x_cf: LoanScm.counterfactual_pinned(&ind.x, &ind.u, &action.pins()),
            action,
            valid: flag(&rec[2])?,
            cost_unweighted: if num(3)?.is_nan() { cost } else { num(3)? },
            cost_weighted: f64::NAN,
            logp_factual: num(4)?,
            logp_cf: num(5)?,
            hard_action: flag(&rec[6])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::Feature;

    #[test]
    fn cost_of_empty_action_is_zero() {
        let d = Dataset::sample(40, 1);
        let x = d.individuals[0].x;
        assert_eq!(action_costs(&x, &Action::empty(), &d.norm, &[3.0; 4]), (0.0, 0.0));
        let a = Action::empty().with(Feature::Inc, x[Feature::Inc] + d.norm.std[5] * 2.0).unwrap();
        let (plain, weighted) = action_costs(&x, &a, &d.norm, &[1.0, 1.0, 3.0, 1.0]);
        assert!((plain - 2.0).abs() < 1e-12);
        assert!((weighted - 12.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let d = Dataset::sample(40, 2);
        let results: Vec<_> = (0..5)
            .map(|i| {
                let ind = &d.individuals[i];
                let action = if i % 2 == 0 {
                    Action::empty()
                } else {
                    Action::empty().with(Feature::Sav, ind.x[Feature::Sav] + 1.0).unwrap()
                };
                let x_cf = LoanScm.counterfactual(&ind.x, &action).unwrap();
                let (cost, _) = action_costs(&ind.x, &action, &d.norm, &[1.0; 4]);
                RecourseResult {
                    user_id: i,
                    solver: Solver::Oracle,
                    x_cf,
                    valid: i != 3,
                    cost_unweighted: cost,
                    cost_weighted: f64::NAN,
                    logp_factual: LoanScm.log_density(&ind.x),
                    logp_cf: LoanScm.log_density(&x_cf),
                    hard_action: i == 1,
                    action,
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results(&path, &results).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("user_id,solver,valid,cost,logp_f,logp_cf,hard_action,action_json\n"));
        assert!(text.contains("NaN"));
        let back = read_results(&path, &d).unwrap();
        for (a, b) in results.iter().zip(&back) {
            assert_eq!(a.action, b.action);
            assert_eq!(a.x_cf, b.x_cf);
            assert_eq!(a.cost_unweighted, b.cost_unweighted);
            assert_eq!((a.valid, a.hard_action, a.logp_cf), (b.valid, b.hard_action, b.logp_cf));
        }
    }
}
