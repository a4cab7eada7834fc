//! iCARMA: amortized individualized recourse.
//!
//! A mask network picks which actionable features to intervene on and an
//! action network picks the target values. Both are conditioned on the
//! standardized abducted noise and on the user's preference profile
//! (actionability mask and normalized weights). During training the mask is
//! a binary Gumbel-softmax sample with a straight-through estimator; at
//! inference it is the hard threshold `σ(logit) ≥ 0.5`. Either way the
//! individual actionability mask is applied last, so features outside `AF_u`
//! are never selected.
//!
//! The per-sample loss is built on a scalar [`Tape`]; the networks and the
//! classifier enter it as custom nodes whose partials come from their
//! hand-written backward passes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::classifier::Classifier;
use crate::dataset::{Dataset, NormStats, Split};
use crate::nn::{Activations, Adam, Mlp};
use crate::preferences::{CostProfileParams, PreferenceError, PreferenceProfile, SamplerSpec, ScoreRange};
use crate::result::{action_costs, touches_hard_feature, RecourseResult, Solver};
use crate::scm::{
    Action, ExogenousVector, Feature, FeatureVector, LoanScm, ScmError, StructuralModel, N_ACTIONABLE, N_FEATURES,
};

#[derive(Debug, Error)]
pub enum AmortizedError {
    #[error("loss diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("no classifier-negative individuals in the {0} split")]
    NoNegatives(Split),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file is inconsistent: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Hinge margin above 0.5 on the positive-class probability.
    pub beta: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub cost_weight: f64,
    pub kl_weight: f64,
    pub hinge_weight: f64,
    pub hinge_scale: HingeScale,
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub mask_hidden: Vec<usize>,
    pub action_hidden: Vec<usize>,
    pub cost_params: CostProfileParams,
    /// Preferences drawn on the fly for every training sample.
    pub sampler: SamplerSpec,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Checkpoint score is `validity - select_cost_weight * mean cost`.
    pub select_cost_weight: f64,
    /// Optional cap on training and validation individuals.
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::ranking()
    }
}

impl TrainConfig {
    /// Preset tuned for ranking-elicited preferences.
    pub fn ranking() -> Self {
        Self {
            epochs: 450,
            batch: 128,
            lr: 0.005,
            beta: 0.013,
            tau: 0.36,
            cost_weight: 1.1,
            kl_weight: 1.5,
            hinge_weight: 1.0,
            hinge_scale: HingeScale::default(),
            lambda_p: 0.225,
            lambda_f: 0.1,
            mask_hidden: vec![32, 32],
            action_hidden: vec![32, 32, 32],
            cost_params: CostProfileParams::default(),
            sampler: SamplerSpec::default(),
            eval_every: 10,
            select_cost_weight: 0.5,
            max_train: None,
            max_val: Some(1000),
            seed: 0,
        }
    }

    /// Preset tuned for score-elicited preferences.
    pub fn scores() -> Self {
        Self {
            epochs: 900,
            lr: 0.001,
            beta: 0.004,
            tau: 0.49,
            cost_weight: 1.3,
            kl_weight: 0.9,
            lambda_p: 0.125,
            lambda_f: 0.1,
            action_hidden: vec![32, 32],
            sampler: SamplerSpec::Likert {
                range: ScoreRange::WithHard,
            },
            ..Self::ranking()
        }
    }
}

/// Scale on which the validity hinge is measured. Both put the margin at
/// the same decision threshold, `p = 0.5 + β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HingeScale {
    /// `max(0, 0.5 + β - p)`.
    Probability,
    /// `max(0, logit(0.5 + β) - z)`; keeps a usable gradient when the
    /// classifier is saturated.
    #[default]
    Logit,
}

/// How the mask network's selection is turned into a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// Relaxed sample used directly (fully differentiable).
    Soft,
    /// Hard sample forward, relaxed gradient backward.
    StraightThrough,
    /// Inference: `σ(logit) ≥ 0.5`, no noise.
    Hard,
}

/// Components of the (batch-averaged) loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cost: f64,
    pub kl: f64,
    pub hinge: f64,
    pub plausibility: f64,
    pub feasibility: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += o.total * s;
        self.cost += o.cost * s;
        self.kl += o.kl * s;
        self.hinge += o.hinge * s;
        self.plausibility += o.plausibility * s;
        self.feasibility += o.feasibility * s;
    }
}

/// One training individual with its profile and relaxation noise.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: FeatureVector,
    pub u: ExogenousVector,
    pub profile: PreferenceProfile,
    /// Logistic noise per actionable feature (difference of two Gumbels).
    pub noise: [f64; N_ACTIONABLE],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ICarmaModel {
    mask: Mlp,
    action: Mlp,
    noise_norm: NormStats,
    feature_norm: NormStats,
    config: TrainConfig,
}

const CONDITION: usize = 2 * N_ACTIONABLE;
const MASK_INPUTS: usize = N_FEATURES + CONDITION;
const ACTION_INPUTS: usize = N_FEATURES + N_ACTIONABLE + CONDITION;

#[derive(Default)]
struct Scratch {
    tape: Tape,
    mask_acts: Activations,
    action_acts: Activations,
    clf_acts: Activations,
    jac: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_validity: Option<f64>,
    pub val_cost: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub final_loss: f64,
}

fn log_sigmoid<'t>(v: Var<'t>) -> Var<'t> {
    let x = v.value();
    let softplus_neg = if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    v.tape().custom(&[v], -softplus_neg, &[sigmoid(-x)])
}

impl ICarmaModel {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init(dataset, config, &mut rng)
    }

    fn init(dataset: &Dataset, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut mask_sizes = vec![MASK_INPUTS];
        mask_sizes.extend(&config.mask_hidden);
        mask_sizes.push(N_ACTIONABLE);
        let mut action_sizes = vec![ACTION_INPUTS];
        action_sizes.extend(&config.action_hidden);
        action_sizes.push(N_ACTIONABLE);
        let mask = Mlp::new(&mask_sizes, rng);
        let action = Mlp::new(&action_sizes, rng);
        let noise_norm = NormStats::from_rows(
            dataset
                .individuals
                .iter()
                .filter(|i| i.split == Split::Train)
                .map(|i| &i.u.0),
        );
        Self {
            mask,
            action,
            noise_norm,
            feature_norm: dataset.norm.clone(),
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.mask.params().len() + self.action.params().len()
    }

    pub fn params(&self) -> Vec<f64> {
        [self.mask.params(), self.action.params()].concat()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let n = self.mask.params().len();
        self.mask.params_mut().copy_from_slice(&params[..n]);
        self.action.params_mut().copy_from_slice(&params[n..]);
    }

    /// `[af mask, normalized weights]` for one profile.
    fn condition(&self, profile: &PreferenceProfile) -> [f64; CONDITION] {
        let p = &self.config.cost_params;
        let af = profile.actionable_mask();
        let w = profile.weights(p);
        let span = p.w_max - p.w_min;
        std::array::from_fn(|k| {
            if k < N_ACTIONABLE {
                af[k]
            } else if span > 0.0 {
                (w[k - N_ACTIONABLE] - p.w_min) / span
            } else {
                0.0
            }
        })
    }

    fn mask_input(&self, u: &ExogenousVector, cond: &[f64; CONDITION]) -> [f64; MASK_INPUTS] {
        let z = self.noise_norm.normalize(&u.0);
        std::array::from_fn(|k| if k < N_FEATURES { z[k] } else { cond[k - N_FEATURES] })
    }

    fn action_input(&self, u: &ExogenousVector, mask: &[f64; N_ACTIONABLE], cond: &[f64; CONDITION]) -> [f64; ACTION_INPUTS] {
        let z = self.noise_norm.normalize(&u.0);
        std::array::from_fn(|k| {
            if k < N_FEATURES {
                z[k]
            } else if k < N_FEATURES + N_ACTIONABLE {
                mask[k - N_FEATURES]
            } else {
                cond[k - N_FEATURES - N_ACTIONABLE]
            }
        })
    }

    /// Mask over the actionable features (LA, Dur, Inc, Sav order).
    /// `noise` is ignored for [`Relaxation::Hard`].
    pub fn mask_forward(
        &self,
        u: &ExogenousVector,
        profile: &PreferenceProfile,
        relaxation: Relaxation,
        noise: &[f64; N_ACTIONABLE],
    ) -> [f64; N_ACTIONABLE] {
        let cond = self.condition(profile);
        let logits = self.mask.forward(&self.mask_input(u, &cond));
        let af = profile.actionable_mask();
        std::array::from_fn(|i| {
            let relaxed = sigmoid((logits[i] + noise[i]) / self.config.tau);
            let m = match relaxation {
                Relaxation::Soft => relaxed,
                Relaxation::StraightThrough => f64::from(u8::from(relaxed >= 0.5)),
                Relaxation::Hard => f64::from(u8::from(sigmoid(logits[i]) >= 0.5)),
            };
            m * af[i]
        })
    }

    /// Loss of one sample; accumulates `scale * dloss/dparams` into `grads`.
    fn sample_loss(
        &self,
        clf: &Classifier,
        s: &Sample,
        relaxation: Relaxation,
        scratch: &mut Scratch,
        grads: Option<(&mut [f64], f64)>,
    ) -> Result<LossBreakdown, String> {
        let cfg = &self.config;
        let norm = &self.feature_norm;
        let scm = LoanScm;
        let cond = self.condition(&s.profile);
        let af = s.profile.actionable_mask();
        let weights = s.profile.weights(&cfg.cost_params);
        let priors = s.profile.priors(&cfg.cost_params);
        let logp_f = scm.log_density(&s.x);

        let logits = self
            .mask
            .forward_cached(&self.mask_input(&s.u, &cond), &mut scratch.mask_acts)
            .to_vec();

        scratch.tape.clear();
        let tape = &scratch.tape;
        let lv: [Var; N_ACTIONABLE] = std::array::from_fn(|i| tape.var(logits[i]));
        let m: [Var; N_ACTIONABLE] = std::array::from_fn(|i| {
            if af[i] == 0.0 {
                return tape.lift(0.0);
            }
            let y = ((lv[i] + s.noise[i]) / cfg.tau).sigmoid();
            match relaxation {
                Relaxation::Soft => y,
                Relaxation::StraightThrough => tape.custom(&[y], f64::from(u8::from(y.value() >= 0.5)), &[1.0]),
                Relaxation::Hard => tape.lift(f64::from(u8::from(sigmoid(logits[i]) >= 0.5))),
            }
        });

        let mvals = m.map(|v| v.value());
        let delta = self
            .action
            .forward_cached(&self.action_input(&s.u, &mvals, &cond), &mut scratch.action_acts)
            .to_vec();
        scratch.jac.resize(self.action.params().len(), 0.0);
        let mut jac = [[0.0; N_ACTIONABLE]; N_ACTIONABLE];
        for (j, row) in jac.iter_mut().enumerate() {
            let mut e = [0.0; N_ACTIONABLE];
            e[j] = 1.0;
            let gin = self.action.backward(&scratch.action_acts, &e, &mut scratch.jac);
            row.copy_from_slice(&gin[N_FEATURES..N_FEATURES + N_ACTIONABLE]);
        }
        let dleaf: [Var; N_ACTIONABLE] = std::array::from_fn(|_| tape.var(0.0));
        let dv: [Var; N_ACTIONABLE] = std::array::from_fn(|j| {
            let inputs = [m[0], m[1], m[2], m[3], dleaf[j]];
            let partials = [jac[j][0], jac[j][1], jac[j][2], jac[j][3], 1.0];
            tape.custom(&inputs, delta[j], &partials)
        });

        let mut cf: [Var; N_FEATURES] = std::array::from_fn(|i| tape.lift(s.x.0[i]));
        for (j, f) in Feature::ACTIONABLE.into_iter().enumerate() {
            let i = f.index();
            let target = dv[j] * norm.std[i] + s.x.0[i];
            let natural = scm.equation(f, &cf, tape.lift(s.u.0[i]));
            cf[i] = m[j] * target + (1.0 - m[j]) * natural;
        }

        let cf_vals = FeatureVector(cf.map(|v| v.value()));
        let hinge = match cfg.hinge_scale {
            HingeScale::Probability => {
                let (p, dp) = clf.proba_with_gradient(&cf_vals, &mut scratch.clf_acts);
                ((0.5 + cfg.beta) - tape.custom(&cf, p, &dp)).relu()
            }
            HingeScale::Logit => {
                let (z, dz) = clf.logit_with_gradient(&cf_vals, &mut scratch.clf_acts);
                let margin = ((0.5 + cfg.beta) / (0.5 - cfg.beta)).ln();
                (margin - tape.custom(&cf, z, &dz)).relu()
            }
        };

        let mut cost_terms = Vec::with_capacity(N_ACTIONABLE);
        let mut kl_terms = Vec::with_capacity(N_ACTIONABLE);
        let mut feas_terms = Vec::with_capacity(N_ACTIONABLE);
        for (j, f) in Feature::ACTIONABLE.into_iter().enumerate() {
            cost_terms.push(m[j] * weights[j] * dv[j] * dv[j]);
            let mu = lv[j].sigmoid();
            let pi = priors[j];
            kl_terms.push(mu * (log_sigmoid(lv[j]) - pi.ln()) + (1.0 - mu) * (log_sigmoid(-lv[j]) - (1.0 - pi).ln()));
            if af[j] == 1.0 {
                let (lo, hi) = norm.range(f);
                let v = cf[f.index()];
                feas_terms.push(((v - hi).relu() + (lo - v).relu()) / hi.abs().max(1e-12));
            }
        }
        let cost = tape.sum(&cost_terms);
        let kl = tape.sum(&kl_terms);
        let plaus = (logp_f - scm.log_density_of(&cf)).relu();
        let feas = tape.sum(&feas_terms);
        let total = cost * cfg.cost_weight
            + kl * cfg.kl_weight
            + hinge * cfg.hinge_weight
            + plaus * cfg.lambda_p
            + feas * cfg.lambda_f;

        let out = LossBreakdown {
            total: total.value(),
            cost: cost.value(),
            kl: kl.value(),
            hinge: hinge.value(),
            plausibility: plaus.value(),
            feasibility: feas.value(),
        };
        if !out.total.is_finite() {
            return Err(format!("non-finite loss {out:?}"));
        }
        if let Some((grads, scale)) = grads {
            let g = tape.backward(total).map_err(|e| e.to_string())?;
            let dl: Vec<f64> = lv.iter().map(|&v| g.wrt(v) * scale).collect();
            let dd: Vec<f64> = dleaf.iter().map(|&v| g.wrt(v) * scale).collect();
            let n_mask = self.mask.params().len();
            let (gm, ga) = grads.split_at_mut(n_mask);
            self.mask.backward(&scratch.mask_acts, &dl, gm);
            self.action.backward(&scratch.action_acts, &dd, ga);
        }
        Ok(out)
    }

    /// Batch-averaged loss; when `grads` is given it receives the gradient
    /// with respect to [`params`](Self::params).
    pub fn combined_loss(
        &self,
        clf: &Classifier,
        batch: &[Sample],
        relaxation: Relaxation,
        mut grads: Option<&mut [f64]>,
    ) -> Result<LossBreakdown, String> {
        let mut scratch = Scratch::default();
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = LossBreakdown::default();
        for s in batch {
            let g = grads.as_deref_mut().map(|g| (g, scale));
            let l = self.sample_loss(clf, s, relaxation, &mut scratch, g)?;
            total.add_scaled(&l, scale);
        }
        Ok(total)
    }

    /// Recommendation for one user; `user_id` is carried into the result.
    pub fn recommend(
        &self,
        clf: &Classifier,
        user_id: usize,
        x: &FeatureVector,
        profile: &PreferenceProfile,
    ) -> Result<RecourseResult, ScmError> {
        let scm = LoanScm;
        let u = scm.abduct(x)?;
        let mask = self.mask_forward(&u, profile, Relaxation::Hard, &[0.0; N_ACTIONABLE]);
        let cond = self.condition(profile);
        let delta = self.action.forward(&self.action_input(&u, &mask, &cond));
        let mut action = Action::empty();
        for (j, f) in Feature::ACTIONABLE.into_iter().enumerate() {
            if mask[j] == 1.0 {
                action.set(f, x[f] + delta[j] * self.feature_norm.std[f.index()])?;
            }
        }
        let x_cf = scm.counterfactual_pinned(x, &u, &action.pins());
        let weights = profile.weights(&self.config.cost_params);
        let (cost_unweighted, cost_weighted) = action_costs(x, &action, &self.feature_norm, &weights);
        Ok(RecourseResult {
            user_id,
            solver: Solver::Icarma,
            hard_action: touches_hard_feature(&action, profile),
            valid: clf.predict(&x_cf) == 1,
            logp_factual: scm.log_density(x),
            logp_cf: scm.log_density(&x_cf),
            action,
            x_cf,
            cost_unweighted,
            cost_weighted,
        })
    }

    pub fn recommend_population(
        &self,
        clf: &Classifier,
        dataset: &Dataset,
        users: &[usize],
        profiles: &[PreferenceProfile],
    ) -> Result<Vec<RecourseResult>, ScmError> {
        assert_eq!(users.len(), profiles.len(), "one profile per user");
        users
            .par_iter()
            .zip(profiles.par_iter())
            .map(|(&i, p)| self.recommend(clf, i, &dataset.individuals[i].x, p))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, AmortizedError> {
        let model: Self = serde_json::from_str(json)?;
        let consistent = |m: &Mlp| Mlp::from_parts(m.sizes().to_vec(), m.params().to_vec()).is_some();
        let ok = consistent(&model.mask)
            && consistent(&model.action)
            && model.mask.inputs() == MASK_INPUTS
            && model.mask.outputs() == N_ACTIONABLE
            && model.action.inputs() == ACTION_INPUTS
            && model.action.outputs() == N_ACTIONABLE;
        if !ok {
            return Err(AmortizedError::Shape("network sizes do not match the feature layout".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), AmortizedError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AmortizedError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn logistic_noise<R: Rng>(rng: &mut R) -> [f64; N_ACTIONABLE] {
    std::array::from_fn(|_| {
        let v: f64 = rng.random_range(f64::EPSILON..1.0);
        (v / (1.0 - v)).ln()
    })
}

fn capped(mut v: Vec<usize>, cap: Option<usize>) -> Vec<usize> {
    if let Some(c) = cap {
        v.truncate(c);
    }
    v
}

/// Trains on classifier-negative individuals of the training split and keeps
/// the parameters with the best validation score.
pub fn train(
    dataset: &Dataset,
    clf: &Classifier,
    config: &TrainConfig,
) -> Result<(ICarmaModel, TrainReport), AmortizedError> {
    let sampler = config.sampler.build()?;
    config.cost_params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ICarmaModel::init(dataset, config, &mut rng);

    let train_idx = capped(clf.negatives(dataset, Split::Train), config.max_train);
    if train_idx.is_empty() {
        return Err(AmortizedError::NoNegatives(Split::Train));
    }
    let val_idx = capped(clf.negatives(dataset, Split::Val), config.max_val);
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_eed0_f7a1);
    let val_profiles: Vec<PreferenceProfile> = val_idx.iter().map(|_| sampler.sample(&mut val_rng)).collect();

    let mut opt = Adam::new(model.param_count(), config.lr);
    let mut params = model.params();
    let mut grads = vec![0.0; params.len()];
    let mut scratch = Scratch::default();
    let mut order = train_idx.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for chunk in order.chunks(config.batch.max(1)) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ind = &dataset.individuals[i];
                let sample = Sample {
                    x: ind.x,
                    u: ind.u,
                    profile: sampler.sample(&mut rng),
                    noise: logistic_noise(&mut rng),
                };
                let l = model
                    .sample_loss(clf, &sample, Relaxation::StraightThrough, &mut scratch, Some((&mut grads, scale)))
                    .map_err(|detail| AmortizedError::Diverged { epoch, detail })?;
                epoch_loss.add_scaled(&l, 1.0 / train_idx.len() as f64);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(AmortizedError::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            opt.step(&mut params, &grads);
            model.set_params(&params);
        }

        let mut log = EpochLog {
            epoch,
            loss: epoch_loss,
            val_validity: None,
            val_cost: None,
        };
        let evaluate = !val_idx.is_empty() && (epoch % config.eval_every.max(1) == 0 || epoch == config.epochs);
        if evaluate {
            let results = model.recommend_population(clf, dataset, &val_idx, &val_profiles)?;
            let valid: Vec<_> = results.iter().filter(|r| r.valid).collect();
            let validity = valid.len() as f64 / results.len() as f64;
            let cost = if valid.is_empty() {
                0.0
            } else {
                valid.iter().map(|r| r.cost_unweighted).sum::<f64>() / valid.len() as f64
            };
            let score = validity - config.select_cost_weight * cost;
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, params.clone()));
            }
            log.val_validity = Some(validity);
            log.val_cost = Some(cost);
        }
        history.push(log);
    }

    let final_loss = history.last().map_or(f64::NAN, |l| l.loss.total);
    let best_epoch = match best {
        Some((_, epoch, p)) => {
            model.set_params(&p);
            epoch
        }
        None => config.epochs,
    };
    Ok((
        model,
        TrainReport {
            history,
            best_epoch,
            final_loss,
        },
    ))
}
