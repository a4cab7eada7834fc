//! Scenario configuration and the three research-question runners: hard
//! constraints (rq1), soft preferences and cost profiles (rq2) and the
//! fairness case study (rq3). Runners read artifacts and return tables; the
//! writers put them on disk with a hashed manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::amortized::{AmortizedError, ICarmaModel, TrainConfig};
use crate::classifier::{Classifier, ClassifierConfig, ClassifierError};
use crate::dataset::{DataError, Dataset, DEFAULT_POPULATION};
use crate::metrics::{self, GroupKey, GroupReport, MetricsError, PlausibilityBase, ReportRow};
use crate::oracle::{self, OracleConfig};
use crate::preferences::{
    binary_profile, CostProfile, CostProfileParams, PreferenceDistribution, PreferenceError, PreferenceProfile,
    SamplerSpec, ScoreRange, ThresholdMode, S_MAX,
};
use crate::result::{RecourseResult, Solver};
use crate::scm::{Feature, ScmError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no trained model for {0}")]
    MissingModel(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Amortized(#[from] AmortizedError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scm(#[from] ScmError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How privileged and non-privileged profiles are handed out in the
/// fairness study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Everyone may act on every feature.
    None,
    Random,
    RaceCorrelated,
    IncomeDependent,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::None => "non-personalized",
            Assignment::Random => "random",
            Assignment::RaceCorrelated => "race-correlated",
            Assignment::IncomeDependent => "income-dependent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessSpec {
    pub scenarios: Vec<Assignment>,
    /// Privileged probability under random assignment.
    pub random_rate: f64,
    /// Privileged probability for white and non-white individuals under
    /// race-correlated assignment.
    pub white_rate: f64,
    pub nonwhite_rate: f64,
    /// Income quantile of the training split at and above which individuals
    /// are privileged under income-dependent assignment.
    pub income_quantile: f64,
    /// Fixed rank cut-off for both profile distributions.
    pub threshold: u8,
}

impl Default for FairnessSpec {
    fn default() -> Self {
        Self {
            scenarios: vec![
                Assignment::None,
                Assignment::Random,
                Assignment::RaceCorrelated,
                Assignment::IncomeDependent,
            ],
            random_rate: 0.5,
            white_rate: 0.9,
            nonwhite_rate: 0.05,
            income_quantile: 0.75,
            threshold: 3,
        }
    }
}

/// Preference elicitation format used by rq2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rq2Scheme {
    #[default]
    Ranking,
    Likert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// Drives user selection and preference sampling.
    pub seed: u64,
    /// Population size and seed when the dataset is generated in memory.
    pub population: usize,
    pub data_seed: u64,
    pub classifier: ClassifierConfig,
    pub icarma: TrainConfig,
    pub solver: Solver,
    pub plausibility_hard: bool,
    pub bins: usize,
    /// Deployment users per run; `None` means 200 for the oracle and the
    /// whole deployment pool for iCARMA.
    pub users: Option<usize>,
    pub plausibility_base: PlausibilityBase,
    /// Profiles for `sample-prefs` and `solve`.
    pub preferences: SamplerSpec,
    pub cost_profile: CostProfile,
    /// Overrides the cost profile's default curvature.
    pub alpha: Option<f64>,
    /// Ranking distribution for rq1 and rq2.
    pub distribution: String,
    /// Numbers of actionable features in rq1; a random row is added when
    /// `rq1_random` is set.
    pub rq1_settings: Vec<usize>,
    pub rq1_random: bool,
    /// Adds oracle rows without the plausibility constraint to rq1.
    pub rq1_ablation: bool,
    pub rq2_profiles: Vec<CostProfile>,
    pub rq2_scheme: Rq2Scheme,
    pub fairness: FairnessSpec,
}

pub const ORACLE_DEFAULT_USERS: usize = 200;

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: "default".into(),
            seed: 1,
            population: DEFAULT_POPULATION,
            data_seed: 0,
            classifier: ClassifierConfig::default(),
            icarma: TrainConfig::default(),
            solver: Solver::Oracle,
            plausibility_hard: true,
            bins: 25,
            users: None,
            plausibility_base: PlausibilityBase::ValidOnly,
            preferences: SamplerSpec::default(),
            cost_profile: CostProfile::Constant,
            alpha: None,
            distribution: "uniform".into(),
            rq1_settings: vec![4, 3, 2, 1],
            rq1_random: true,
            rq1_ablation: true,
            rq2_profiles: CostProfile::ALL.to_vec(),
            rq2_scheme: Rq2Scheme::Ranking,
            fairness: FairnessSpec::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        PreferenceDistribution::named(&self.distribution)?;
        self.preferences.build()?;
        self.icarma.sampler.build()?;
        self.cost_params(self.cost_profile).validate()?;
        if self.population < 8 {
            return bad(format!("population {} is too small", self.population));
        }
        if self.bins == 0 {
            return bad("bins must be positive".into());
        }
        if let Some(k) = self.rq1_settings.iter().find(|&&k| !(1..=4).contains(&k)) {
            return bad(format!("rq1 setting {k} is not in 1..=4"));
        }
        let f = &self.fairness;
        for (name, p) in [
            ("random_rate", f.random_rate),
            ("white_rate", f.white_rate),
            ("nonwhite_rate", f.nonwhite_rate),
            ("income_quantile", f.income_quantile),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("fairness.{name} must lie in [0, 1]"));
            }
        }
        if !(2..=S_MAX).contains(&f.threshold) {
            return bad(format!("fairness.threshold must lie in 2..={S_MAX}"));
        }
        Ok(())
    }

    pub fn cost_params(&self, profile: CostProfile) -> CostProfileParams {
        let mut p = CostProfileParams::new(profile);
        if let Some(a) = self.alpha.filter(|_| profile == self.cost_profile) {
            p.alpha = a;
        }
        p
    }

    pub fn user_cap(&self, solver: Solver) -> Option<usize> {
        self.users.or(match solver {
            Solver::Oracle => Some(ORACLE_DEFAULT_USERS),
            Solver::Icarma => None,
        })
    }

    fn oracle_config(&self, profile: CostProfile, plausibility_hard: bool) -> OracleConfig {
        OracleConfig {
            bins: self.bins,
            plausibility_hard,
            cost_params: self.cost_params(profile),
        }
    }

    /// Identifies a table row well enough to rerun it.
    fn fingerprint(&self, rq: &str, setting: &str, prefs: &str, profile: CostProfile, plausibility: &str) -> String {
        format!(
            "{}/{rq}/{setting}|seed={}|data_seed={}|population={}|prefs={prefs}|profile={profile}|solver={}|plausibility={plausibility}",
            self.scenario, self.seed, self.data_seed, self.population, self.solver
        )
    }
}

/// Trained iCARMA models, looked up by the cost profile and preference
/// sampler they were trained with.
#[derive(Debug, Default)]
pub struct ModelSet {
    models: Vec<ICarmaModel>,
}

impl ModelSet {
    pub fn new(models: Vec<ICarmaModel>) -> Self {
        Self { models }
    }

    /// Loads every path; directories contribute all their `.json` files in
    /// name order.
    pub fn load(paths: &[PathBuf]) -> Result<Self, ExperimentError> {
        let mut files = Vec::new();
        for p in paths {
            if p.is_dir() {
                let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                    .map_err(io_err(p))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| f.extension().is_some_and(|x| x == "json") && !f.ends_with("manifest.json"))
                    .collect();
                inner.sort();
                files.extend(inner);
            } else {
                files.push(p.clone());
            }
        }
        let models = files
            .iter()
            .map(|f| ICarmaModel::load(f))
            .collect::<Result<_, _>>()?;
        Ok(Self { models })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ICarmaModel> {
        self.models.iter()
    }

    pub fn find(&self, profile: CostProfile, sampler: &SamplerSpec) -> Result<&ICarmaModel, ExperimentError> {
        self.models
            .iter()
            .find(|m| m.config().cost_params.profile == profile && &m.config().sampler == sampler)
            .ok_or_else(|| ExperimentError::MissingModel(format!("cost profile {profile}, preferences {sampler}")))
    }
}

/// Everything a runner reads.
pub struct Context<'a> {
    pub dataset: &'a Dataset,
    pub classifier: &'a Classifier,
    pub models: &'a ModelSet,
}

/// One solved user with the profile it was solved under.
#[derive(Debug, Clone)]
pub struct Record {
    pub scenario: String,
    pub result: RecourseResult,
    pub profile: PreferenceProfile,
    pub privileged: Option<bool>,
}

/// Absolute difference of group means within one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub scenario: String,
    pub key: GroupKey,
    pub cost_gap: f64,
    pub logp_gap: f64,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<ReportRow>,
    pub records: Vec<Record>,
    pub groups: Vec<(String, GroupReport)>,
    pub gaps: Vec<Gap>,
}

impl RunOutput {
    fn push(
        &mut self,
        cfg: &ScenarioConfig,
        scenario: String,
        results: Vec<RecourseResult>,
        profiles: &[PreferenceProfile],
        privileged: Option<&[bool]>,
    ) -> Result<(), ExperimentError> {
        let report = metrics::report(&results, profiles, cfg.plausibility_base)?;
        self.rows.push(ReportRow {
            scenario: scenario.clone(),
            solver: cfg.solver.to_string(),
            report,
        });
        self.records.extend(results.into_iter().zip(profiles).enumerate().map(|(i, (result, p))| Record {
            scenario: scenario.clone(),
            result,
            profile: *p,
            privileged: privileged.map(|v| v[i]),
        }));
        Ok(())
    }

    pub fn row(&self, scenario_prefix: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scenario.starts_with(scenario_prefix))
    }
}

/// Classifier-negative deployment users, a seeded random subset when capped,
/// in ascending order.
pub fn deployment_users(ctx: &Context, cap: Option<usize>, seed: u64) -> Vec<usize> {
    let mut pool = ctx.classifier.deployment_pool(ctx.dataset);
    if let Some(c) = cap.filter(|&c| c < pool.len()) {
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        pool.truncate(c);
        pool.sort_unstable();
    }
    pool
}

fn solve(
    ctx: &Context,
    cfg: &ScenarioConfig,
    users: &[usize],
    profiles: &[PreferenceProfile],
    oracle_cfg: &OracleConfig,
    model: Option<&ICarmaModel>,
) -> Result<Vec<RecourseResult>, ExperimentError> {
    Ok(match cfg.solver {
        Solver::Oracle => oracle::solve_population(ctx.dataset, ctx.classifier, users, profiles, oracle_cfg)?,
        Solver::Icarma => {
            let m = model.ok_or_else(|| ExperimentError::MissingModel("iCARMA solver".into()))?;
            m.recommend_population(ctx.classifier, ctx.dataset, users, profiles)?
        }
    })
}

/// Profiles drawn from `sampler` for `n` users under `seed`.
pub fn sample_profiles(sampler: &SamplerSpec, n: usize, seed: u64) -> Result<Vec<PreferenceProfile>, ExperimentError> {
    let s = sampler.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| s.sample(&mut rng)).collect())
}

impl ScenarioConfig {
    fn plausibility_tag(&self, hard: bool) -> &'static str {
        match (self.solver, hard) {
            (Solver::Icarma, _) => "regularized",
            (Solver::Oracle, true) => "hard",
            (Solver::Oracle, false) => "off",
        }
    }
}

/// Hard constraints: binary profiles with 4, 3, 2 or 1 actionable features
/// and a random count. Every user keeps one sampled ordering, so the
/// actionable sets of the fixed-count settings are nested.
pub fn run_rq1(ctx: &Context, cfg: &ScenarioConfig) -> Result<RunOutput, ExperimentError> {
    let dist = PreferenceDistribution::named(&cfg.distribution)?;
    let users = deployment_users(ctx, cfg.user_cap(cfg.solver), cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws: Vec<([Feature; 4], u8)> = users
        .iter()
        .map(|_| {
            let order = dist.sample_ordering(&mut rng);
            (order, ThresholdMode::Uniform.draw(&mut rng))
        })
        .collect();
    let model = match cfg.solver {
        Solver::Icarma => Some(ctx.models.find(
            CostProfile::Constant,
            &SamplerSpec::Ranking {
                distribution: cfg.distribution.clone(),
                threshold: ThresholdMode::Uniform,
            },
        )?),
        Solver::Oracle => None,
    };

    let mut settings: Vec<(String, Vec<PreferenceProfile>)> = Vec::new();
    for &k in &cfg.rq1_settings {
        let profiles = draws
            .iter()
            .map(|(order, _)| binary_profile(&order[..k]))
            .collect::<Result<_, _>>()?;
        settings.push((format!("k{k}"), profiles));
    }
    if cfg.rq1_random {
        let profiles = draws
            .iter()
            .map(|(order, t)| binary_profile(&order[..usize::from(*t) - 1]))
            .collect::<Result<_, _>>()?;
        settings.push(("random".into(), profiles));
    }

    let mut variants = vec![cfg.plausibility_hard];
    if cfg.rq1_ablation && cfg.solver == Solver::Oracle && cfg.plausibility_hard {
        variants.push(false);
    }
    let prefs = format!("binary:{}", cfg.distribution);
    let mut out = RunOutput::default();
    for &hard in &variants {
        let ocfg = cfg.oracle_config(CostProfile::Constant, hard);
        for (name, profiles) in &settings {
            let results = solve(ctx, cfg, &users, profiles, &ocfg, model)?;
            let fp = cfg.fingerprint("rq1", name, &prefs, CostProfile::Constant, cfg.plausibility_tag(hard));
            out.push(cfg, fp, results, profiles, None)?;
        }
    }
    Ok(out)
}

/// Soft preferences: soft-only and hard+soft profiles under every requested
/// cost profile. Profiles are shared across cost profiles.
pub fn run_rq2(ctx: &Context, cfg: &ScenarioConfig) -> Result<RunOutput, ExperimentError> {
    let users = deployment_users(ctx, cfg.user_cap(cfg.solver), cfg.seed);
    let modes: [(&str, SamplerSpec); 2] = match cfg.rq2_scheme {
        Rq2Scheme::Ranking => [
            (
                "soft",
                SamplerSpec::Ranking {
                    distribution: cfg.distribution.clone(),
                    threshold: ThresholdMode::None,
                },
            ),
            (
                "hard+soft",
                SamplerSpec::Ranking {
                    distribution: cfg.distribution.clone(),
                    threshold: ThresholdMode::Uniform,
                },
            ),
        ],
        Rq2Scheme::Likert => [
            (
                "soft",
                SamplerSpec::Likert {
                    range: ScoreRange::SoftOnly,
                },
            ),
            (
                "hard+soft",
                SamplerSpec::Likert {
                    range: ScoreRange::WithHard,
                },
            ),
        ],
    };
    let mut out = RunOutput::default();
    for (mode, sampler) in &modes {
        let profiles = sample_profiles(sampler, users.len(), cfg.seed)?;
        for &cp in &cfg.rq2_profiles {
            let model = match cfg.solver {
                Solver::Icarma => Some(ctx.models.find(cp, sampler)?),
                Solver::Oracle => None,
            };
            let ocfg = cfg.oracle_config(cp, cfg.plausibility_hard);
            let results = solve(ctx, cfg, &users, &profiles, &ocfg, model)?;
            let fp = cfg.fingerprint(
                "rq2",
                &format!("{mode}/{cp}"),
                &sampler.to_string(),
                cp,
                cfg.plausibility_tag(cfg.plausibility_hard),
            );
            out.push(cfg, fp, results, &profiles, None)?;
        }
    }
    Ok(out)
}

/// Fairness case study: privileged and non-privileged profiles handed out
/// at random, by race or by income, against a non-personalized baseline.
/// Emits per-group reports for gender x race and the gender and race gaps.
pub fn run_rq3(ctx: &Context, cfg: &ScenarioConfig) -> Result<RunOutput, ExperimentError> {
    let f = &cfg.fairness;
    let users = deployment_users(ctx, cfg.user_cap(cfg.solver), cfg.seed);
    let privileged = PreferenceDistribution::named("privileged")?;
    let non_privileged = PreferenceDistribution::named("non-privileged")?;
    let threshold = ThresholdMode::Fixed(f.threshold);
    let income_cut = ctx.dataset.income_quantile(f.income_quantile);
    let model = match cfg.solver {
        Solver::Icarma => Some(ctx.models.find(CostProfile::Constant, &SamplerSpec::default())?),
        Solver::Oracle => None,
    };
    let ocfg = cfg.oracle_config(CostProfile::Constant, cfg.plausibility_hard);

    let mut out = RunOutput::default();
    for (s, &assignment) in f.scenarios.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(s as u64));
        let mut flags = Vec::with_capacity(users.len());
        let mut profiles = Vec::with_capacity(users.len());
        for &u in &users {
            let ind = &ctx.dataset.individuals[u];
            let p = match assignment {
                Assignment::None => None,
                Assignment::Random => Some(rng.random_bool(f.random_rate)),
                Assignment::RaceCorrelated => Some(rng.random_bool(if ind.race == 0 {
                    f.white_rate
                } else {
                    f.nonwhite_rate
                })),
                Assignment::IncomeDependent => Some(ind.x[Feature::Inc] >= income_cut),
            };
            profiles.push(match p {
                None => PreferenceProfile::all_actionable(),
                Some(true) => crate::preferences::sample_ranking(&privileged, threshold, &mut rng),
                Some(false) => crate::preferences::sample_ranking(&non_privileged, threshold, &mut rng),
            });
            flags.push(p);
        }
        let results = solve(ctx, cfg, &users, &profiles, &ocfg, model)?;
        let prefs = match assignment {
            Assignment::None => "all-actionable".to_string(),
            _ => format!("privileged/non-privileged:{threshold}"),
        };
        let fp = cfg.fingerprint(
            "rq3",
            &assignment.to_string(),
            &prefs,
            CostProfile::Constant,
            cfg.plausibility_tag(cfg.plausibility_hard),
        );
        let keys = [GroupKey::Gender, GroupKey::Race];
        for g in metrics::group_breakdown(&results, &profiles, ctx.dataset, &keys, cfg.plausibility_base)? {
            out.groups.push((fp.clone(), g));
        }
        for key in [GroupKey::Gender, GroupKey::Race] {
            let gs = metrics::group_breakdown(&results, &profiles, ctx.dataset, &[key], cfg.plausibility_base)?;
            if let [a, b] = &gs[..] {
                out.gaps.push(Gap {
                    scenario: fp.clone(),
                    key,
                    cost_gap: (a.report.cost_mean - b.report.cost_mean).abs(),
                    logp_gap: (a.logp_cf_mean - b.logp_cf_mean).abs(),
                });
            }
        }
        let flags: Option<Vec<bool>> = flags.iter().copied().collect();
        out.push(cfg, fp, results, &profiles, flags.as_deref())?;
    }
    Ok(out)
}

const RECORD_HEADER: [&str; 16] = [
    "scenario",
    "user_id",
    "solver",
    "gender",
    "race",
    "s_LA",
    "s_Dur",
    "s_Inc",
    "s_Sav",
    "privileged",
    "valid",
    "cost",
    "logp_f",
    "logp_cf",
    "hard_action",
    "action_json",
];

fn write_records(path: &Path, ctx: &Context, records: &[Record]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_HEADER)?;
    for rec in records {
        let r = &rec.result;
        let ind = &ctx.dataset.individuals[r.user_id];
        let mut row = vec![
            rec.scenario.clone(),
            r.user_id.to_string(),
            r.solver.to_string(),
            if ind.is_female() { "female" } else { "male" }.to_string(),
            if ind.race == 0 { "white" } else { "non-white" }.to_string(),
        ];
        row.extend(rec.profile.scores().iter().map(u8::to_string));
        row.extend([
            rec.privileged.map_or(String::new(), |p| u8::from(p).to_string()),
            u8::from(r.valid).to_string(),
            if r.valid { r.cost_unweighted } else { f64::NAN }.to_string(),
            r.logp_factual.to_string(),
            r.logp_cf.to_string(),
            u8::from(r.hard_action).to_string(),
            r.action.to_json(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_groups(path: &Path, groups: &[(String, GroupReport)]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "group",
        "validity",
        "plausibility",
        "cost_mean",
        "cost_std",
        "hap",
        "n_total",
        "n_valid",
        "logp_cf_mean",
        "logp_cf_std",
        "logp_f_mean",
    ])?;
    for (scenario, g) in groups {
        let r = &g.report;
        w.write_record([
            scenario.clone(),
            r.group.clone().unwrap_or_default(),
            r.validity.to_string(),
            r.plausibility.to_string(),
            r.cost_mean.to_string(),
            r.cost_std.to_string(),
            r.hap.to_string(),
            r.n_total.to_string(),
            r.n_valid.to_string(),
            g.logp_cf_mean.to_string(),
            g.logp_cf_std.to_string(),
            g.logp_f_mean.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_gaps(path: &Path, gaps: &[Gap]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "key", "cost_gap", "logp_gap"])?;
    for g in gaps {
        w.write_record([
            g.scenario.clone(),
            g.key.to_string(),
            g.cost_gap.to_string(),
            g.logp_gap.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes the tables of a run plus the resolved config and a manifest.
pub fn write_run(dir: &Path, ctx: &Context, cfg: &ScenarioConfig, out: &RunOutput) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    metrics::write_report_csv(&dir.join("metrics.csv"), &out.rows)?;
    metrics::write_report_json(&dir.join("metrics.json"), &out.rows)?;
    write_records(&dir.join("records.csv"), ctx, &out.records)?;
    if !out.groups.is_empty() {
        write_groups(&dir.join("groups.csv"), &out.groups)?;
    }
    if !out.gaps.is_empty() {
        write_gaps(&dir.join("gaps.csv"), &out.gaps)?;
    }
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(io_err(&cfg_path))?;
    write_manifest(dir)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Lists every regular file in `dir` except the manifest itself, in name
/// order, with its size and SHA-256.
pub fn write_manifest(dir: &Path) -> Result<(), ExperimentError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.ends_with("manifest.json"))
        .collect();
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for f in &files {
        let bytes = std::fs::read(f).map_err(io_err(f))?;
        entries.push(ManifestEntry {
            file: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let mut doc = BTreeMap::new();
    doc.insert("artifacts", entries);
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").map_err(io_err(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn fixture() -> &'static (Dataset, Classifier) {
        static F: OnceLock<(Dataset, Classifier)> = OnceLock::new();
        F.get_or_init(|| {
            let d = Dataset::sample(2000, 4);
            let cfg = ClassifierConfig {
                epochs: 60,
                seed: 2,
                ..ClassifierConfig::default()
            };
            let c = Classifier::train(&d, &cfg).unwrap().0;
            (d, c)
        })
    }

    fn small(solver: Solver) -> ScenarioConfig {
        ScenarioConfig {
            users: Some(12),
            bins: 7,
            solver,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: ScenarioConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
        cfg.validate().unwrap();
        let bad: ScenarioConfig = serde_json::from_str(r#"{"distribution": "nope"}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"sede": 3}"#).is_err());
        let bad = ScenarioConfig {
            rq1_settings: vec![5],
            ..ScenarioConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ExperimentError::Config(_))));
        assert_eq!(cfg.user_cap(Solver::Oracle), Some(200));
        assert_eq!(cfg.user_cap(Solver::Icarma), None);
    }

    #[test]
    fn user_selection_is_seeded_and_sorted() {
        let (d, c) = fixture();
        let models = ModelSet::default();
        let ctx = Context {
            dataset: d,
            classifier: c,
            models: &models,
        };
        let a = deployment_users(&ctx, Some(10), 3);
        assert_eq!(a, deployment_users(&ctx, Some(10), 3));
        assert_ne!(a, deployment_users(&ctx, Some(10), 4));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let pool = c.deployment_pool(d);
        assert_eq!(deployment_users(&ctx, None, 3), pool);
    }

    #[test]
    fn rq1_rows_nested_and_fingerprinted() {
        let (d, c) = fixture();
        let models = ModelSet::default();
        let ctx = Context {
            dataset: d,
            classifier: c,
            models: &models,
        };
        let cfg = small(Solver::Oracle);
        let out = run_rq1(&ctx, &cfg).unwrap();
        assert_eq!(out.rows.len(), 10);
        for r in &out.rows {
            assert!(r.scenario.contains("seed=1") && r.scenario.contains("solver=oracle"));
            assert!(r.scenario.contains("prefs=binary:uniform") && r.scenario.contains("profile=constant"));
        }
        let v = |s: &str| out.row(&format!("default/rq1/{s}|")).unwrap().report.validity;
        assert!(v("k4") >= v("k1"));
        for rec in &out.records {
            assert!(rec.result.action.features().all(|f| rec.profile.is_actionable(f)));
        }
        let k1: Vec<_> = out.records.iter().filter(|r| r.scenario.contains("/k1|")).collect();
        let k2: Vec<_> = out.records.iter().filter(|r| r.scenario.contains("/k2|")).collect();
        for (a, b) in k1.iter().zip(&k2) {
            assert!(a.profile.actionable_set().iter().all(|f| b.profile.is_actionable(*f)));
        }
    }

    #[test]
    fn icarma_runs_require_models() {
        let (d, c) = fixture();
        let models = ModelSet::default();
        let ctx = Context {
            dataset: d,
            classifier: c,
            models: &models,
        };
        let cfg = small(Solver::Icarma);
        assert!(matches!(run_rq1(&ctx, &cfg), Err(ExperimentError::MissingModel(_))));
        assert!(matches!(run_rq2(&ctx, &cfg), Err(ExperimentError::MissingModel(_))));
        assert!(matches!(run_rq3(&ctx, &cfg), Err(ExperimentError::MissingModel(_))));
    }

    #[test]
    fn rq2_and_rq3_shapes_and_files() {
        let (d, c) = fixture();
        let models = ModelSet::default();
        let ctx = Context {
            dataset: d,
            classifier: c,
            models: &models,
        };
        let cfg = ScenarioConfig {
            rq2_profiles: vec![CostProfile::Constant, CostProfile::Linear],
            ..small(Solver::Oracle)
        };
        let rq2 = run_rq2(&ctx, &cfg).unwrap();
        assert_eq!(rq2.rows.len(), 4);
        let soft: Vec<_> = rq2.records.iter().filter(|r| r.scenario.contains("/soft/")).collect();
        assert!(soft.iter().all(|r| r.profile.actionable_set().len() == 4));

        let cfg = ScenarioConfig {
            users: Some(40),
            ..small(Solver::Oracle)
        };
        let rq3 = run_rq3(&ctx, &cfg).unwrap();
        assert_eq!(rq3.rows.len(), 4);
        assert_eq!(rq3.gaps.len(), 8);
        for (_, g) in &rq3.groups {
            assert!(g.report.group.as_deref().unwrap().starts_with("gender="));
        }
        for rec in rq3.records.iter().filter(|r| r.privileged.is_some()) {
            assert_eq!(rec.profile.actionable_set().len(), 2);
        }
        let inc: Vec<_> = rq3.records.iter().filter(|r| r.scenario.contains("income-dependent")).collect();
        let cut = d.income_quantile(0.75);
        for r in inc {
            let high = d.individuals[r.result.user_id].x[Feature::Inc] >= cut;
            assert_eq!(r.privileged, Some(high));
        }

        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &ctx, &cfg, &rq3).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        let files: Vec<_> = manifest["artifacts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["file"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(
            files,
            ["config.json", "gaps.csv", "groups.csv", "metrics.csv", "metrics.json", "records.csv"]
        );
        let metrics_bytes = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            manifest["artifacts"][3]["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(&metrics_bytes))
        );
    }
}
