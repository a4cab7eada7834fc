//! Command-line front end: data generation, training, preference sampling,
//! solving, reporting and the three experiment runners.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recourse::amortized::{self, ICarmaModel, TrainConfig};
use recourse::classifier::Classifier;
use recourse::dataset::Dataset;
use recourse::experiments::{self, Context, ExperimentError, ModelSet, ScenarioConfig};
use recourse::metrics::{self, GroupKey, ReportRow};
use recourse::oracle;
use recourse::preferences::{self, CostProfile, PreferenceProfile, SamplerSpec, ThresholdMode};
use recourse::result::{self, Solver};

#[derive(Parser)]
#[command(name = "recourse", version, about = "Individualized causal recourse on the Loan model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario config (JSON); missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Directory written by `gen-data`; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Classifier JSON; trained from the config if absent.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// iCARMA model JSON files or directories holding them.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// oracle or icarma; overrides the config.
    #[arg(long)]
    solver: Option<Solver>,
    /// Cap on deployment users.
    #[arg(long)]
    users: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a population with train/val/deploy splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        population: Option<usize>,
    },
    /// Train the decision classifier.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train an iCARMA model.
    TrainIcarma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from the ranking or the score preset instead of the config.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        cost_profile: Option<CostProfile>,
        /// Rank cut-off for the ranking sampler: none, fixed:<t> or uniform.
        #[arg(long)]
        threshold: Option<ThresholdMode>,
    },
    /// Sample preference profiles.
    SamplePrefs {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = experiments::ORACLE_DEFAULT_USERS)]
        users: usize,
    },
    /// Solve recourse for deployment users.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Profiles CSV aligned with the selected users; sampled if absent.
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Aggregate a results file into metrics.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
        /// Comma-separated group keys: gender, race, income.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<GroupKey>,
    },
    /// Hard actionability constraints.
    Rq1 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Soft preferences under the four cost profiles.
    Rq2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Fairness case study.
    Rq3 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Ranking,
    Scores,
}

/// Failure with its exit code: 2 for configuration problems, 1 otherwise.
struct Failure {
    code: u8,
    message: String,
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn config_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Failure> {
    let cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).map_err(config_failure)?,
        None => ScenarioConfig::default(),
    };
    Ok(cfg)
}

fn dataset_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("features.csv"), dir.join("exogenous.csv"))
}

/// Population size and seed of a generated dataset directory.
#[derive(serde::Serialize, serde::Deserialize)]
struct DataMeta {
    population: usize,
    seed: u64,
}

/// Loads `data` if given, recording its size and seed in `cfg`; otherwise
/// samples the population described by `cfg`.
fn load_dataset(data: Option<&Path>, cfg: &mut ScenarioConfig) -> Result<Dataset, Failure> {
    let Some(dir) = data else {
        return Ok(Dataset::sample(cfg.population, cfg.data_seed));
    };
    let (f, u) = dataset_files(dir);
    let d = Dataset::read_csv(&f, &u)?;
    cfg.population = d.len();
    if let Ok(text) = std::fs::read_to_string(dir.join("dataset.json")) {
        let meta: DataMeta = serde_json::from_str(&text)?;
        cfg.data_seed = meta.seed;
    }
    Ok(d)
}

fn load_classifier(path: Option<&Path>, dataset: &Dataset, cfg: &ScenarioConfig) -> Result<Classifier, Failure> {
    Ok(match path {
        Some(p) => Classifier::load(p)?,
        None => Classifier::train(dataset, &cfg.classifier)?.0,
    })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure {
        code: 1,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn model_file_name(config: &TrainConfig) -> String {
    let tag: String = config
        .sampler
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    format!("icarma-{}-{tag}.json", config.cost_params.profile)
}

fn print_rows(rows: &[ReportRow]) {
    for r in rows {
        let m = &r.report;
        println!(
            "{}  validity {:.3}  plausibility {:.3}  cost {:.3} ± {:.3}  hap {:.3}  n {}",
            r.scenario, m.validity, m.plausibility, m.cost_mean, m.cost_std, m.hap, m.n_total
        );
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common, population } => {
            let mut cfg = load_config(&common)?;
            cfg.data_seed = common.seed.unwrap_or(cfg.data_seed);
            cfg.population = population.unwrap_or(cfg.population);
            cfg.validate().map_err(config_failure)?;
            let d = Dataset::sample(cfg.population, cfg.data_seed);
            create_dir(&common.out)?;
            let (f, u) = dataset_files(&common.out);
            d.write_csv(&f, &u)?;
            let meta = DataMeta {
                population: cfg.population,
                seed: cfg.data_seed,
            };
            std::fs::write(common.out.join("dataset.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
            experiments::write_manifest(&common.out)?;
            println!("wrote {} individuals to {}", d.len(), common.out.display());
        }
        Command::TrainClassifier { common, data, epochs } => {
            let mut cfg = load_config(&common)?;
            cfg.classifier.seed = common.seed.unwrap_or(cfg.classifier.seed);
            cfg.classifier.epochs = epochs.unwrap_or(cfg.classifier.epochs);
            let d = load_dataset(data.as_deref(), &mut cfg)?;
            let (clf, report) = Classifier::train(&d, &cfg.classifier)?;
            create_dir(&common.out)?;
            clf.save(&common.out.join("classifier.json"))?;
            let mut w = csv::Writer::from_path(common.out.join("history.csv"))?;
            w.write_record(["epoch", "mean_loss", "running_accuracy"])?;
            for h in &report.history {
                w.write_record([h.epoch.to_string(), h.mean_loss.to_string(), h.running_accuracy.to_string()])?;
            }
            w.flush()?;
            experiments::write_manifest(&common.out)?;
            println!(
                "train accuracy {:.4}  val accuracy {:.4}",
                report.train_accuracy, report.val_accuracy
            );
        }
        Command::TrainIcarma {
            common,
            data,
            classifier,
            epochs,
            preset,
            cost_profile,
            threshold,
        } => {
            let mut cfg = load_config(&common)?;
            let mut tc = match preset {
                Some(Preset::Ranking) => TrainConfig::ranking(),
                Some(Preset::Scores) => TrainConfig::scores(),
                None => cfg.icarma.clone(),
            };
            tc.seed = common.seed.unwrap_or(tc.seed);
            tc.epochs = epochs.unwrap_or(tc.epochs);
            if let Some(p) = cost_profile {
                tc.cost_params = cfg.cost_params(p);
            }
            if let Some(t) = threshold {
                match &mut tc.sampler {
                    SamplerSpec::Ranking { threshold, .. } => *threshold = t,
                    SamplerSpec::Likert { .. } => {
                        return Err(config_failure("--threshold applies to ranking preferences only"));
                    }
                }
            }
            tc.sampler.build().map_err(config_failure)?;
            let d = load_dataset(data.as_deref(), &mut cfg)?;
            let clf = load_classifier(classifier.as_deref(), &d, &cfg)?;
            let (model, report) = amortized::train(&d, &clf, &tc)?;
            create_dir(&common.out)?;
            let name = model_file_name(&tc);
            model.save(&common.out.join(&name))?;
            let mut w = csv::Writer::from_path(common.out.join("history.csv"))?;
            w.write_record([
                "epoch",
                "loss",
                "cost",
                "kl",
                "hinge",
                "plausibility",
                "feasibility",
                "val_validity",
                "val_cost",
            ])?;
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            for h in &report.history {
                let l = &h.loss;
                w.write_record([
                    h.epoch.to_string(),
                    l.total.to_string(),
                    l.cost.to_string(),
                    l.kl.to_string(),
                    l.hinge.to_string(),
                    l.plausibility.to_string(),
                    l.feasibility.to_string(),
                    opt(h.val_validity),
                    opt(h.val_cost),
                ])?;
            }
            w.flush()?;
            experiments::write_manifest(&common.out)?;
            println!("wrote {name}; best epoch {}", report.best_epoch);
        }
        Command::SamplePrefs { common, users } => {
            let mut cfg = load_config(&common)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            let profiles = experiments::sample_profiles(&cfg.preferences, users, cfg.seed)?;
            create_dir(&common.out)?;
            preferences::write_profiles(&common.out.join("profiles.csv"), &profiles)?;
            experiments::write_manifest(&common.out)?;
            println!("wrote {} profiles ({})", profiles.len(), cfg.preferences);
        }
        Command::Solve {
            common,
            inputs,
            profiles,
        } => {
            let (cfg, d, clf, models) = prepare(&common, &inputs)?;
            let ctx = Context {
                dataset: &d,
                classifier: &clf,
                models: &models,
            };
            let users = experiments::deployment_users(&ctx, cfg.user_cap(cfg.solver), cfg.seed);
            let profiles: Vec<PreferenceProfile> = match &profiles {
                Some(p) => preferences::read_profiles(p)?,
                None => experiments::sample_profiles(&cfg.preferences, users.len(), cfg.seed)?,
            };
            if profiles.len() < users.len() {
                return Err(config_failure(format!(
                    "{} profiles for {} users",
                    profiles.len(),
                    users.len()
                )));
            }
            let profiles = &profiles[..users.len()];
            let results = match cfg.solver {
                Solver::Oracle => {
                    let ocfg = oracle::OracleConfig {
                        bins: cfg.bins,
                        plausibility_hard: cfg.plausibility_hard,
                        cost_params: cfg.cost_params(cfg.cost_profile),
                    };
                    oracle::solve_population(&d, &clf, &users, profiles, &ocfg)?
                }
                Solver::Icarma => {
                    let model: &ICarmaModel = models
                        .iter()
                        .next()
                        .ok_or_else(|| ExperimentError::MissingModel("--model".into()))?;
                    model.recommend_population(&clf, &d, &users, profiles)?
                }
            };
            create_dir(&common.out)?;
            result::write_results(&common.out.join("results.csv"), &results)?;
            preferences::write_profiles(&common.out.join("profiles.csv"), profiles)?;
            experiments::write_manifest(&common.out)?;
            let report = metrics::report(&results, profiles, cfg.plausibility_base)?;
            print_rows(&[ReportRow {
                scenario: cfg.scenario.clone(),
                solver: cfg.solver.to_string(),
                report,
            }]);
        }
        Command::Report {
            common,
            data,
            results,
            profiles,
            group_by,
        } => {
            let mut cfg = load_config(&common)?;
            let d = load_dataset(data.as_deref(), &mut cfg)?;
            let results = result::read_results(&results, &d)?;
            let profiles = preferences::read_profiles(&profiles)?;
            let solver = results.first().map_or(String::new(), |r| r.solver.to_string());
            let groups = metrics::group_breakdown(&results, &profiles, &d, &group_by, cfg.plausibility_base)?;
            let rows: Vec<ReportRow> = groups
                .into_iter()
                .map(|g| ReportRow {
                    scenario: cfg.scenario.clone(),
                    solver: solver.clone(),
                    report: g.report,
                })
                .collect();
            create_dir(&common.out)?;
            metrics::write_report_csv(&common.out.join("metrics.csv"), &rows)?;
            metrics::write_report_json(&common.out.join("metrics.json"), &rows)?;
            experiments::write_manifest(&common.out)?;
            print_rows(&rows);
        }
        Command::Rq1 { common, inputs } => run_rq(&common, &inputs, experiments::run_rq1)?,
        Command::Rq2 { common, inputs } => run_rq(&common, &inputs, experiments::run_rq2)?,
        Command::Rq3 { common, inputs } => run_rq(&common, &inputs, experiments::run_rq3)?,
    }
    Ok(())
}

fn prepare(common: &Common, inputs: &Inputs) -> Result<(ScenarioConfig, Dataset, Classifier, ModelSet), Failure> {
    let mut cfg = load_config(common)?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.solver = inputs.solver.unwrap_or(cfg.solver);
    cfg.users = inputs.users.or(cfg.users);
    let models = ModelSet::load(&inputs.models)?;
    let d = load_dataset(inputs.data.as_deref(), &mut cfg)?;
    let clf = load_classifier(inputs.classifier.as_deref(), &d, &cfg)?;
    Ok((cfg, d, clf, models))
}

fn run_rq(
    common: &Common,
    inputs: &Inputs,
    runner: fn(&Context, &ScenarioConfig) -> Result<experiments::RunOutput, ExperimentError>,
) -> Result<(), Failure> {
    let (cfg, d, clf, models) = prepare(common, inputs)?;
    let ctx = Context {
        dataset: &d,
        classifier: &clf,
        models: &models,
    };
    let out = runner(&ctx, &cfg)?;
    experiments::write_run(&common.out, &ctx, &cfg, &out)?;
    print_rows(&out.rows);
    for g in &out.gaps {
        println!("{}  {} gap: cost {:.3}  log-density {:.3}", g.scenario, g.key, g.cost_gap, g.logp_gap);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
