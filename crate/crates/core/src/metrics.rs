//! Population-level recourse metrics and group-wise breakdowns.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::preferences::PreferenceProfile;
use crate::result::RecourseResult;
use crate::scm::Feature;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no results to aggregate")]
    Empty,
    #[error("{results} results but {profiles} profiles")]
    Misaligned { results: usize, profiles: usize },
    #[error("unknown group key {0:?} (expected gender, race or income)")]
    UnknownKey(String),
    #[error("user {0} is not in the dataset")]
    UnknownUser(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which users form the plausibility denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlausibilityBase {
    #[default]
    ValidOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validity: f64,
    pub plausibility: f64,
    /// Mean and population standard deviation of the unweighted cost over
    /// valid results; `NaN` when nothing is valid.
    pub cost_mean: f64,
    pub cost_std: f64,
    pub hap: f64,
    pub n_total: usize,
    pub n_valid: usize,
    pub group: Option<String>,
}

pub fn validity(results: &[RecourseResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(results.iter().filter(|r| r.valid).count() as f64 / results.len() as f64)
}

/// Mean and population standard deviation of the unweighted cost over valid
/// results, `(NaN, NaN)` if there are none.
pub fn cost_stats(results: &[RecourseResult]) -> (f64, f64) {
    let costs: Vec<f64> = results.iter().filter(|r| r.valid).map(|r| r.cost_unweighted).collect();
    mean_std(&costs)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of counterfactuals at least as likely as their factual. With
/// [`PlausibilityBase::ValidOnly`] the denominator is the valid results and
/// the value is `NaN` if there are none.
pub fn plausibility(results: &[RecourseResult], base: PlausibilityBase) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (num, den) = match base {
        PlausibilityBase::ValidOnly => {
            let valid = results.iter().filter(|r| r.valid);
            (valid.clone().filter(|r| r.plausible()).count(), valid.count())
        }
        PlausibilityBase::All => (
            results.iter().filter(|r| r.valid && r.plausible()).count(),
            results.len(),
        ),
    };
    Ok(if den == 0 { f64::NAN } else { num as f64 / den as f64 })
}

/// Fraction of users whose action touches one of their least preferred
/// actionable features.
pub fn hap(results: &[RecourseResult], profiles: &[PreferenceProfile]) -> Result<f64, MetricsError> {
    if results.len() != profiles.len() {
        return Err(MetricsError::Misaligned {
            results: results.len(),
            profiles: profiles.len(),
        });
    }
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = results
        .iter()
        .zip(profiles)
        .filter(|(r, p)| crate::result::touches_hard_feature(&r.action, p))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn report(
    results: &[RecourseResult],
    profiles: &[PreferenceProfile],
    base: PlausibilityBase,
) -> Result<MetricsReport, MetricsError> {
    let hap = hap(results, profiles)?;
    let (cost_mean, cost_std) = cost_stats(results);
    Ok(MetricsReport {
        validity: validity(results)?,
        plausibility: plausibility(results, base)?,
        cost_mean,
        cost_std,
        hap,
        n_total: results.len(),
        n_valid: results.iter().filter(|r| r.valid).count(),
        group: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Gender,
    Race,
    /// Income quartile with cut points from the training split.
    Income,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKey::Gender => "gender",
            GroupKey::Race => "race",
            GroupKey::Income => "income",
        })
    }
}

impl FromStr for GroupKey {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, MetricsError> {
        match s {
            "gender" => Ok(GroupKey::Gender),
            "race" => Ok(GroupKey::Race),
            "income" | "income-quartile" => Ok(GroupKey::Income),
            other => Err(MetricsError::UnknownKey(other.into())),
        }
    }
}

/// Group labels in their reporting order for one key.
fn group_label(key: GroupKey, dataset: &Dataset, cuts: &[f64; 3], user: usize) -> (u8, &'static str) {
    let ind = &dataset.individuals[user];
    match key {
        GroupKey::Gender if ind.is_female() => (0, "female"),
        GroupKey::Gender => (1, "male"),
        GroupKey::Race if ind.race == 0 => (0, "white"),
        GroupKey::Race => (1, "non-white"),
        GroupKey::Income => {
            const Q: [&str; 4] = ["q1", "q2", "q3", "q4"];
            let q = cuts.iter().filter(|&&c| ind.x[Feature::Inc] > c).count();
            (q as u8, Q[q])
        }
    }
}

/// Metrics for one group together with its log-density summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub report: MetricsReport,
    /// Mean and standard deviation of the counterfactual log-density over
    /// valid results.
    pub logp_cf_mean: f64,
    pub logp_cf_std: f64,
    /// Mean factual log-density over all results in the group.
    pub logp_f_mean: f64,
}

/// One report per observed combination of group values, ordered by the
/// keys' value order. An empty key list yields a single `all` group.
pub fn group_breakdown(
    results: &[RecourseResult],
    profiles: &[PreferenceProfile],
    dataset: &Dataset,
    keys: &[GroupKey],
    base: PlausibilityBase,
) -> Result<Vec<GroupReport>, MetricsError> {
    if results.len() != profiles.len() {
        return Err(MetricsError::Misaligned {
            results: results.len(),
            profiles: profiles.len(),
        });
    }
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cuts = [0.25, 0.5, 0.75].map(|q| dataset.income_quantile(q));
    let mut groups: std::collections::BTreeMap<Vec<u8>, (String, Vec<usize>)> = Default::default();
    for (i, r) in results.iter().enumerate() {
        if r.user_id >= dataset.len() {
            return Err(MetricsError::UnknownUser(r.user_id));
        }
        let labels: Vec<_> = keys.iter().map(|&k| group_label(k, dataset, &cuts, r.user_id)).collect();
        let order = labels.iter().map(|l| l.0).collect();
        let name = if keys.is_empty() {
            "all".to_string()
        } else {
            keys.iter()
                .zip(&labels)
                .map(|(k, l)| format!("{k}={}", l.1))
                .collect::<Vec<_>>()
                .join("&")
        };
        groups.entry(order).or_insert_with(|| (name, Vec::new())).1.push(i);
    }
    groups
        .into_values()
        .map(|(name, idx)| {
            let rs: Vec<RecourseResult> = idx.iter().map(|&i| results[i].clone()).collect();
            let ps: Vec<PreferenceProfile> = idx.iter().map(|&i| profiles[i]).collect();
            let mut report = report(&rs, &ps, base)?;
            report.group = Some(name);
            let cf: Vec<f64> = rs.iter().filter(|r| r.valid).map(|r| r.logp_cf).collect();
            let (logp_cf_mean, logp_cf_std) = mean_std(&cf);
            let logp_f_mean = rs.iter().map(|r| r.logp_factual).sum::<f64>() / rs.len() as f64;
            Ok(GroupReport {
                report,
                logp_cf_mean,
                logp_cf_std,
                logp_f_mean,
            })
        })
        .collect()
}

/// A report tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub solver: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

pub const REPORT_HEADER: [&str; 10] = [
    "scenario",
    "solver",
    "group",
    "validity",
    "plausibility",
    "cost_mean",
    "cost_std",
    "hap",
    "n_total",
    "n_valid",
];

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            row.scenario.clone(),
            row.solver.clone(),
            r.group.clone().unwrap_or_else(|| "all".into()),
            r.validity.to_string(),
            r.plausibility.to_string(),
            r.cost_mean.to_string(),
            r.cost_std.to_string(),
            r.hap.to_string(),
            r.n_total.to_string(),
            r.n_valid.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON mirror of [`write_report_csv`]; undefined values become `null`.
pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<(), MetricsError> {
    std::fs::write(path, serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preferences::binary_profile;
    use crate::result::Solver;
    use crate::scm::{Action, FeatureVector};

    fn result(user_id: usize, valid: bool, cost: f64, logp_f: f64, logp_cf: f64, action: Action) -> RecourseResult {
        RecourseResult {
            user_id,
            solver: Solver::Oracle,
            action,
            x_cf: FeatureVector([0.0; 7]),
            valid,
            cost_unweighted: cost,
            cost_weighted: cost,
            logp_factual: logp_f,
            logp_cf,
            hard_action: false,
        }
    }

    fn simple(valid: &[bool], costs: &[f64]) -> Vec<RecourseResult> {
        valid
            .iter()
            .zip(costs)
            .enumerate()
            .map(|(i, (&v, &c))| result(i, v, c, 0.0, 0.0, Action::empty()))
            .collect()
    }

    #[test]
    fn validity_counts() {
        assert_eq!(validity(&simple(&[true; 3], &[0.0; 3])).unwrap(), 1.0);
        assert_eq!(validity(&simple(&[false; 3], &[0.0; 3])).unwrap(), 0.0);
        assert_eq!(validity(&simple(&[true, true, false, true], &[0.0; 4])).unwrap(), 0.75);
        assert!(matches!(validity(&[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn cost_stats_over_valid_only() {
        let (m, s) = cost_stats(&simple(&[true], &[0.7]));
        assert_eq!((m, s), (0.7, 0.0));
        let (m, _) = cost_stats(&simple(&[true, true, false], &[0.1, 0.3, 9.0]));
        assert!((m - 0.2).abs() < 1e-15);
        let (m, s) = cost_stats(&simple(&[true; 4], &[0.5; 4]));
        assert_eq!((m, s), (0.5, 0.0));
        let (m, s) = cost_stats(&simple(&[false], &[1.0]));
        assert!(m.is_nan() && s.is_nan());
    }

    #[test]
    fn plausibility_denominators() {
        let rs = vec![
            result(0, true, 0.0, -1.0, -1.0, Action::empty()),
            result(1, true, 0.0, -1.0, -2.0, Action::empty()),
            result(2, false, 0.0, -1.0, 0.0, Action::empty()),
            result(3, true, 0.0, -1.0, 0.5, Action::empty()),
        ];
        assert!((plausibility(&rs, PlausibilityBase::ValidOnly).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(plausibility(&rs, PlausibilityBase::All).unwrap(), 0.5);
        let same: Vec<_> = (0..3).map(|i| result(i, true, 0.0, -3.0, -3.0, Action::empty())).collect();
        assert_eq!(plausibility(&same, PlausibilityBase::ValidOnly).unwrap(), 1.0);
        assert!(plausibility(&simple(&[false], &[0.0]), PlausibilityBase::ValidOnly).unwrap().is_nan());
    }

    #[test]
    fn hap_requires_alignment_and_counts_least_preferred() {
        let sav = Action::empty().with(Feature::Sav, 1.0).unwrap();
        let la = Action::empty().with(Feature::La, 1.0).unwrap();
        let p = binary_profile(&Feature::ACTIONABLE).unwrap();
        let ranked = PreferenceProfile::new([1, 2, 3, 4], crate::preferences::Scheme::Ranking).unwrap();
        let rs = vec![result(0, true, 0.0, 0.0, 0.0, sav.clone()), result(1, true, 0.0, 0.0, 0.0, la)];
        assert_eq!(hap(&rs, &[ranked, ranked]).unwrap(), 0.5);
        assert_eq!(hap(&simple(&[true; 2], &[0.0; 2]), &[p, p]).unwrap(), 0.0);
        assert!(matches!(hap(&rs, &[p]), Err(MetricsError::Misaligned { .. })));
    }

    #[test]
    fn groups_partition_and_order() {
        let d = Dataset::sample(400, 3);
        let users: Vec<usize> = (0..200).collect();
        let rs: Vec<_> = users
            .iter()
            .map(|&u| result(u, u % 3 != 0, u as f64 / 100.0, -1.0, -1.5, Action::empty()))
            .collect();
        let ps = vec![PreferenceProfile::all_actionable(); rs.len()];
        let base = PlausibilityBase::ValidOnly;
        let whole = report(&rs, &ps, base).unwrap();
        let single = group_breakdown(&rs, &ps, &d, &[], base).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].report, MetricsReport { group: Some("all".into()), ..whole.clone() });

        let by = group_breakdown(&rs, &ps, &d, &[GroupKey::Gender, GroupKey::Race], base).unwrap();
        assert_eq!(by.iter().map(|g| g.report.n_total).sum::<usize>(), whole.n_total);
        assert_eq!(by.iter().map(|g| g.report.n_valid).sum::<usize>(), whole.n_valid);
        let names: Vec<_> = by.iter().map(|g| g.report.group.clone().unwrap()).collect();
        assert_eq!(names[0], "gender=female&race=white");
        assert_eq!(names.last().unwrap(), "gender=male&race=non-white");
        for g in &by {
            assert!((0.0..=1.0).contains(&g.report.validity));
            assert_eq!(g.logp_cf_mean, -1.5);
        }
        let inc = group_breakdown(&rs, &ps, &d, &[GroupKey::Income], base).unwrap();
        assert!(inc.len() <= 4);
        assert_eq!(inc.iter().map(|g| g.report.n_total).sum::<usize>(), 200);
        assert!("zodiac".parse::<GroupKey>().is_err());
    }

    #[test]
    fn report_files() {
        let rs = simple(&[true, false], &[0.5, 0.0]);
        let ps = vec![PreferenceProfile::all_actionable(); 2];
        let row = ReportRow {
            scenario: "s".into(),
            solver: "oracle".into(),
            report: report(&rs, &ps, PlausibilityBase::ValidOnly).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("r.csv");
        write_report_csv(&csv_path, std::slice::from_ref(&row)).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(
            text,
            "scenario,solver,group,validity,plausibility,cost_mean,cost_std,hap,n_total,n_valid\ns,oracle,all,0.5,1,0.5,0,0,2,1\n"
        );
        let json_path = dir.path().join("r.json");
        write_report_json(&json_path, &[row]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(v[0]["validity"], 0.5);
        assert_eq!(v[0]["scenario"], "s");
    }
}
