//! Individual actionability preferences.
//!
//! A [`PreferenceProfile`] stores one integer score per globally actionable
//! feature. Scores in `1..S_MAX` mark the feature as individually actionable
//! (lower is easier), `S_MAX` marks it individually non-actionable. Globally
//! non-actionable features always report score 0. Scores are turned into cost
//! weights and mask priors by the α-parameterized mappings in
//! [`CostProfileParams`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scm::{Feature, N_ACTIONABLE};

/// Score of an individually non-actionable feature (`k + 1` for four
/// globally actionable features).
pub const S_MAX: u8 = N_ACTIONABLE as u8 + 1;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("score {score} for {feature} outside 1..={S_MAX}")]
    ScoreRange { feature: Feature, score: u8 },
    #[error("ranking scores {0:?} are not a permutation of 1..k")]
    NotARanking([u8; N_ACTIONABLE]),
    #[error("{0} is not globally actionable")]
    NotActionable(Feature),
    #[error("unknown {kind} {value:?}")]
    Unknown { kind: &'static str, value: String },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid cost profile: {0}")]
    CostParams(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Binary,
    Ranking,
    Likert,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Binary => "binary",
            Scheme::Ranking => "ranking",
            Scheme::Likert => "likert",
        })
    }
}

impl FromStr for Scheme {
    type Err = PreferenceError;
    fn from_str(s: &str) -> Result<Self, PreferenceError> {
        match s {
            "binary" => Ok(Scheme::Binary),
            "ranking" => Ok(Scheme::Ranking),
            "likert" => Ok(Scheme::Likert),
            _ => Err(PreferenceError::Unknown {
                kind: "scheme",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreferenceProfile {
    scores: [u8; N_ACTIONABLE],
    scheme: Scheme,
}

impl PreferenceProfile {
    /// Scores are indexed in the order LA, Dur, Inc, Sav.
    pub fn new(scores: [u8; N_ACTIONABLE], scheme: Scheme) -> Result<Self, PreferenceError> {
        for (f, &s) in Feature::ACTIONABLE.iter().zip(&scores) {
            if !(1..=S_MAX).contains(&s) {
                return Err(PreferenceError::ScoreRange { feature: *f, score: s });
            }
        }
        match scheme {
            Scheme::Ranking => {
                let mut ranks: Vec<u8> = scores.iter().copied().filter(|&s| s < S_MAX).collect();
                ranks.sort_unstable();
                if ranks.iter().enumerate().any(|(i, &r)| r as usize != i + 1) {
                    return Err(PreferenceError::NotARanking(scores));
                }
            }
            Scheme::Binary => {
                if scores.iter().any(|&s| s != 1 && s != S_MAX) {
                    return Err(PreferenceError::Distribution(format!(
                        "binary profile with non-binary scores {scores:?}"
                    )));
                }
            }
            Scheme::Likert => {}
        }
        Ok(Self { scores, scheme })
    }

    /// Every globally actionable feature actionable with score 1.
    pub fn all_actionable() -> Self {
        Self {
            scores: [1; N_ACTIONABLE],
            scheme: Scheme::Binary,
        }
    }

    pub fn scores(&self) -> [u8; N_ACTIONABLE] {
        self.scores
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Score of any feature; 0 for globally non-actionable ones.
    pub fn score(&self, f: Feature) -> u8 {
        f.actionable_index().map_or(0, |i| self.scores[i])
    }

    pub fn is_actionable(&self, f: Feature) -> bool {
        let s = self.score(f);
        s > 0 && s < S_MAX
    }

    /// The individually actionable set `AF_u`, in feature order.
    pub fn actionable_set(&self) -> Vec<Feature> {
        Feature::ACTIONABLE
            .into_iter()
            .filter(|&f| self.is_actionable(f))
            .collect()
    }

    /// 1.0 for features in `AF_u`, 0.0 otherwise, indexed like the scores.
    pub fn actionable_mask(&self) -> [f64; N_ACTIONABLE] {
        self.scores.map(|s| if s < S_MAX { 1.0 } else { 0.0 })
    }

    pub fn s_u_max(&self) -> u8 {
        self.scores.iter().copied().filter(|&s| s < S_MAX).max().unwrap_or(1).max(2)
    }

    /// Actionable features with the largest score (the least preferred ones).
    pub fn hard_feature_set(&self) -> Vec<Feature> {
        let Some(top) = self.scores.iter().copied().filter(|&s| s < S_MAX).max() else {
            return Vec::new();
        };
        Feature::ACTIONABLE
            .into_iter()
            .filter(|&f| self.score(f) == top)
            .collect()
    }

    pub fn weights(&self, params: &CostProfileParams) -> [f64; N_ACTIONABLE] {
        let smax = self.s_u_max();
        self.scores.map(|s| params.weight(s, smax))
    }

    pub fn priors(&self, params: &CostProfileParams) -> [f64; N_ACTIONABLE] {
        let smax = self.s_u_max();
        self.scores.map(|s| params.prior(s, smax))
    }
}

/// Profile for the binary scheme: score 1 on `actionable`, `S_MAX` elsewhere.
pub fn binary_profile(actionable: &[Feature]) -> Result<PreferenceProfile, PreferenceError> {
    let mut scores = [S_MAX; N_ACTIONABLE];
    for &f in actionable {
        let i = f.actionable_index().ok_or(PreferenceError::NotActionable(f))?;
        scores[i] = 1;
    }
    PreferenceProfile::new(scores, Scheme::Binary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostProfile {
    Constant,
    Concave,
    Linear,
    Convex,
}

impl CostProfile {
    pub const ALL: [CostProfile; 4] = [
        CostProfile::Constant,
        CostProfile::Concave,
        CostProfile::Linear,
        CostProfile::Convex,
    ];

    pub fn default_alpha(self) -> f64 {
        match self {
            CostProfile::Concave => 0.5,
            CostProfile::Convex => 2.0,
            CostProfile::Constant | CostProfile::Linear => 1.0,
        }
    }
}

impl fmt::Display for CostProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostProfile::Constant => "constant",
            CostProfile::Concave => "concave",
            CostProfile::Linear => "linear",
            CostProfile::Convex => "convex",
        })
    }
}

impl FromStr for CostProfile {
    type Err = PreferenceError;
    fn from_str(s: &str) -> Result<Self, PreferenceError> {
        CostProfile::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| PreferenceError::Unknown {
                kind: "cost profile",
                value: s.into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfileParams {
    pub profile: CostProfile,
    pub alpha: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub pi_min: f64,
    pub pi_max: f64,
}

impl Default for CostProfileParams {
    fn default() -> Self {
        Self::new(CostProfile::Constant)
    }
}

impl CostProfileParams {
    pub fn new(profile: CostProfile) -> Self {
        Self {
            profile,
            alpha: profile.default_alpha(),
            w_min: 1.0,
            w_max: 7.0,
            pi_min: 0.05,
            pi_max: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), PreferenceError> {
        let bad = |m: &str| Err(PreferenceError::CostParams(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if self.w_min > self.w_max || self.w_min.is_nan() || self.w_max.is_nan() {
            return bad("w_min must not exceed w_max");
        }
        if !(0.0 < self.pi_min && self.pi_min <= self.pi_max && self.pi_max < 1.0) {
            return bad("priors must satisfy 0 < pi_min <= pi_max < 1");
        }
        Ok(())
    }

    /// `((s - 1) / (s_u_max - 1))^α`, clamped to `[0, 1]` so individually
    /// non-actionable scores saturate at the upper end.
    fn shape(&self, s: u8, s_u_max: u8) -> f64 {
        let denom = f64::from(s_u_max.max(2) - 1);
        let ratio = (f64::from(s.max(1)) - 1.0) / denom;
        ratio.clamp(0.0, 1.0).powf(self.alpha)
    }

    pub fn weight(&self, s: u8, s_u_max: u8) -> f64 {
        if self.profile == CostProfile::Constant {
            return self.w_min;
        }
        self.w_max - (self.w_max - self.w_min) * (1.0 - self.shape(s, s_u_max))
    }

    pub fn prior(&self, s: u8, s_u_max: u8) -> f64 {
        if self.profile == CostProfile::Constant {
            return self.pi_max;
        }
        self.pi_min + (self.pi_max - self.pi_min) * (1.0 - self.shape(s, s_u_max))
    }
}

/// How the individual non-actionability cut-off is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ThresholdMode {
    /// No cut-off: every feature stays actionable.
    #[default]
    None,
    /// Ranks at or above the value become non-actionable.
    Fixed(u8),
    /// Cut-off drawn uniformly from `2..=S_MAX`.
    Uniform,
}

impl ThresholdMode {
    pub fn draw<R: Rng>(self, rng: &mut R) -> u8 {
        match self {
            ThresholdMode::None => S_MAX,
            ThresholdMode::Fixed(t) => t,
            ThresholdMode::Uniform => rng.random_range(2..=S_MAX),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::None => f.write_str("none"),
            ThresholdMode::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdMode::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = PreferenceError;
    fn from_str(s: &str) -> Result<Self, PreferenceError> {
        let unknown = || PreferenceError::Unknown {
            kind: "threshold mode",
            value: s.into(),
        };
        match s {
            "none" => Ok(ThresholdMode::None),
            "uniform" => Ok(ThresholdMode::Uniform),
            _ => {
                let t: u8 = s.strip_prefix("fixed:").ok_or_else(unknown)?.parse().map_err(|_| unknown())?;
                if (2..=S_MAX).contains(&t) {
                    Ok(ThresholdMode::Fixed(t))
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

impl Serialize for ThresholdMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Feature orderings, rank 1 first, with their probabilities (in 24ths)
/// under the uniform, co, rco, privileged and non-privileged distributions.
const ORDERINGS: [([Feature; N_ACTIONABLE], [u8; 5]); 24] = {
    use Feature::{Dur as D, Inc as I, La as L, Sav as S};
    [
        ([L, D, I, S], [1, 1, 0, 0, 4]),
        ([L, D, S, I], [1, 1, 0, 0, 4]),
        ([L, I, D, S], [1, 4, 0, 0, 1]),
        ([L, S, D, I], [1, 1, 0, 0, 1]),
        ([L, I, S, D], [1, 4, 0, 0, 1]),
        ([L, S, I, D], [1, 1, 0, 0, 1]),
        ([D, L, I, S], [1, 0, 1, 0, 4]),
        ([D, L, S, I], [1, 0, 1, 0, 4]),
        ([I, L, D, S], [1, 4, 0, 1, 0]),
        ([S, L, D, I], [1, 0, 1, 1, 0]),
        ([I, L, S, D], [1, 4, 0, 1, 0]),
        ([S, L, I, D], [1, 0, 1, 1, 0]),
        ([D, I, L, S], [1, 0, 1, 0, 1]),
        ([D, S, L, I], [1, 0, 4, 0, 1]),
        ([I, D, L, S], [1, 1, 0, 1, 0]),
        ([S, D, L, I], [1, 0, 4, 1, 0]),
        ([I, S, L, D], [1, 1, 0, 4, 0]),
        ([S, I, L, D], [1, 0, 1, 4, 0]),
        ([D, I, S, L], [1, 0, 1, 0, 1]),
        ([D, S, I, L], [1, 0, 4, 0, 1]),
        ([I, D, S, L], [1, 1, 0, 1, 0]),
        ([S, D, I, L], [1, 0, 4, 1, 0]),
        ([I, S, D, L], [1, 1, 0, 4, 0]),
        ([S, I, D, L], [1, 0, 1, 4, 0]),
    ]
};

pub const DISTRIBUTION_NAMES: [&str; 5] = ["uniform", "co", "rco", "privileged", "non-privileged"];

/// A distribution over the 24 orderings of the actionable features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDistribution {
    pub name: String,
    orderings: Vec<([Feature; N_ACTIONABLE], f64)>,
    /// Default cut-off law when the caller does not override it.
    pub threshold: ThresholdMode,
}

#[derive(Serialize, Deserialize)]
struct DistributionFile {
    name: String,
    /// Keys list features from rank 1 to rank 4, comma-separated.
    permutations: BTreeMap<String, f64>,
    #[serde(default)]
    threshold_law: ThresholdMode,
}

impl PreferenceDistribution {
    pub fn named(name: &str) -> Result<Self, PreferenceError> {
        let column = DISTRIBUTION_NAMES
            .iter()
            .position(|&n| n == name)
            .ok_or_else(|| PreferenceError::Unknown {
                kind: "distribution",
                value: name.into(),
            })?;
        Ok(Self {
            name: name.into(),
            orderings: ORDERINGS
                .iter()
                .map(|(order, p)| (*order, f64::from(p[column]) / 24.0))
                .collect(),
            threshold: ThresholdMode::None,
        })
    }

    pub fn uniform() -> Self {
        Self::named("uniform").expect("built-in")
    }

    pub fn orderings(&self) -> &[([Feature; N_ACTIONABLE], f64)] {
        &self.orderings
    }

    pub fn probability(&self, order: &[Feature; N_ACTIONABLE]) -> f64 {
        self.orderings
            .iter()
            .find(|(o, _)| o == order)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn from_json(json: &str) -> Result<Self, PreferenceError> {
        let file: DistributionFile = serde_json::from_str(json)?;
        let mut orderings = Vec::with_capacity(file.permutations.len());
        for (key, p) in file.permutations {
            let feats = key
                .split(',')
                .map(|s| s.trim().parse::<Feature>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PreferenceError::Distribution(e.to_string()))?;
            let order: [Feature; N_ACTIONABLE] = feats
                .try_into()
                .map_err(|_| PreferenceError::Distribution(format!("{key:?} does not list four features")))?;
            let mut sorted = order;
            sorted.sort();
            if sorted != Feature::ACTIONABLE {
                return Err(PreferenceError::Distribution(format!("{key:?} is not a permutation")));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(PreferenceError::Distribution(format!("bad probability {p} for {key:?}")));
            }
            orderings.push((order, p));
        }
        let total: f64 = orderings.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PreferenceError::Distribution(format!("probabilities sum to {total}")));
        }
        Ok(Self {
            name: file.name,
            orderings,
            threshold: file.threshold_law,
        })
    }

    pub fn to_json(&self) -> String {
        let permutations = self
            .orderings
            .iter()
            .map(|(o, p)| (o.map(|f| f.name()).join(","), *p))
            .collect();
        serde_json::to_string_pretty(&DistributionFile {
            name: self.name.clone(),
            permutations,
            threshold_law: self.threshold,
        })
        .expect("distribution serializes")
    }

    pub fn sample_ordering<R: Rng>(&self, rng: &mut R) -> [Feature; N_ACTIONABLE] {
        let index = WeightedIndex::new(self.orderings.iter().map(|(_, p)| *p)).expect("validated weights");
        self.orderings[index.sample(rng)].0
    }
}

/// Two-step ranking draw: an ordering from `dist`, then a cut-off above which
/// ranks become individually non-actionable.
pub fn sample_ranking<R: Rng>(dist: &PreferenceDistribution, threshold: ThresholdMode, rng: &mut R) -> PreferenceProfile {
    let order = dist.sample_ordering(rng);
    let cut = threshold.draw(rng);
    let mut scores = [0; N_ACTIONABLE];
    for (rank, f) in order.iter().enumerate() {
        let r = rank as u8 + 1;
        scores[f.actionable_index().expect("actionable")] = if r >= cut { S_MAX } else { r };
    }
    PreferenceProfile {
        scores,
        scheme: Scheme::Ranking,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRange {
    /// Scores in `1..=4`, every feature actionable.
    SoftOnly,
    /// Scores in `1..=5`, where 5 is individually non-actionable.
    WithHard,
}

impl fmt::Display for ScoreRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreRange::SoftOnly => "1-4",
            ScoreRange::WithHard => "1-5",
        })
    }
}

/// Independent uniform Likert scores per actionable feature.
pub fn sample_scores<R: Rng>(range: ScoreRange, rng: &mut R) -> PreferenceProfile {
    let hi = match range {
        ScoreRange::SoftOnly => S_MAX - 1,
        ScoreRange::WithHard => S_MAX,
    };
    PreferenceProfile {
        scores: std::array::from_fn(|_| rng.random_range(1..=hi)),
        scheme: Scheme::Likert,
    }
}

/// Serializable description of where profiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum SamplerSpec {
    Ranking {
        distribution: String,
        threshold: ThresholdMode,
    },
    Likert {
        range: ScoreRange,
    },
}

impl Default for SamplerSpec {
    /// Uniform rankings with a uniformly drawn cut-off.
    fn default() -> Self {
        SamplerSpec::Ranking {
            distribution: "uniform".into(),
            threshold: ThresholdMode::Uniform,
        }
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerSpec::Ranking { distribution, threshold } => write!(f, "ranking:{distribution}:{threshold}"),
            SamplerSpec::Likert { range } => write!(f, "likert:{range}"),
        }
    }
}

impl SamplerSpec {
    pub fn build(&self) -> Result<ProfileSampler, PreferenceError> {
        Ok(match self {
            SamplerSpec::Ranking { distribution, threshold } => {
                ProfileSampler::Ranking(PreferenceDistribution::named(distribution)?, *threshold)
            }
            SamplerSpec::Likert { range } => ProfileSampler::Likert(*range),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSampler {
    Ranking(PreferenceDistribution, ThresholdMode),
    Likert(ScoreRange),
}

impl ProfileSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> PreferenceProfile {
        match self {
            ProfileSampler::Ranking(dist, threshold) => sample_ranking(dist, *threshold, rng),
            ProfileSampler::Likert(range) => sample_scores(*range, rng),
        }
    }
}

const PROFILE_HEADER: [&str; 5] = ["s_LA", "s_Dur", "s_Inc", "s_Sav", "scheme"];

pub fn write_profiles(path: &Path, profiles: &[PreferenceProfile]) -> Result<(), PreferenceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROFILE_HEADER)?;
    for p in profiles {
        let mut row: Vec<String> = p.scores.iter().map(u8::to_string).collect();
        row.push(p.scheme.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles(path: &Path) -> Result<Vec<PreferenceProfile>, PreferenceError> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(PROFILE_HEADER) {
        return Err(PreferenceError::Distribution(format!(
            "unexpected profile header in {}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut scores = [0u8; N_ACTIONABLE];
        for (i, s) in scores.iter_mut().enumerate() {
            *s = rec[i].parse().map_err(|_| PreferenceError::Unknown {
                kind: "score",
                value: rec[i].into(),
            })?;
        }
        out.push(PreferenceProfile::new(scores, rec[4].parse()?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn linear() -> CostProfileParams {
        CostProfileParams::new(CostProfile::Linear)
    }

    #[test]
    fn hand_values() {
        assert_eq!(linear().weight(3, 5), 4.0);
        assert!((linear().prior(3, 5) - 0.275).abs() < 1e-15);
    }

    #[test]
    fn endpoints_are_exact() {
        for profile in [CostProfile::Concave, CostProfile::Linear, CostProfile::Convex] {
            let p = CostProfileParams::new(profile);
            for smax in 2..=4 {
                assert_eq!(p.weight(1, smax), p.w_min);
                assert_eq!(p.weight(smax, smax), p.w_max);
                assert_eq!(p.prior(1, smax), p.pi_max);
                assert_eq!(p.prior(smax, smax), p.pi_min);
            }
        }
    }

    #[test]
    fn constant_profile_ignores_scores() {
        let p = CostProfileParams::new(CostProfile::Constant);
        for s in 1..=S_MAX {
            assert_eq!(p.weight(s, 4), 1.0);
            assert_eq!(p.prior(s, 4), 0.5);
        }
    }

    #[test]
    fn curvature_follows_alpha() {
        for (alpha, sign) in [(0.5, -1.0), (1.0, 0.0), (2.0, 1.0)] {
            let p = CostProfileParams {
                alpha,
                ..linear()
            };
            let w: Vec<f64> = (1..=5).map(|s| p.weight(s, 5)).collect();
            for d in w.windows(3).map(|t| t[2] - 2.0 * t[1] + t[0]) {
                if sign == 0.0 {
                    assert!(d.abs() < 1e-12);
                } else {
                    assert!(d * sign > 0.0, "alpha {alpha}: {d}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_score(alpha in 0.05f64..6.0, smax in 2u8..=5) {
            let p = CostProfileParams { alpha, ..linear() };
            for s in 1..smax {
                prop_assert!(p.weight(s + 1, smax) >= p.weight(s, smax));
                prop_assert!(p.prior(s + 1, smax) <= p.prior(s, smax));
                prop_assert!((p.w_min..=p.w_max).contains(&p.weight(s, smax)));
                prop_assert!((p.pi_min..=p.pi_max).contains(&p.prior(s, smax)));
            }
        }

        #[test]
        fn ranking_profiles_are_rankings(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_ranking(&PreferenceDistribution::uniform(), ThresholdMode::Uniform, &mut rng);
            let k = p.actionable_set().len();
            let mut ranks: Vec<u8> = p.actionable_set().iter().map(|&f| p.score(f)).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (1..=k as u8).collect::<Vec<_>>());
            prop_assert!(PreferenceProfile::new(p.scores(), Scheme::Ranking).is_ok());
        }
    }

    #[test]
    fn named_distributions_sum_to_one() {
        for name in DISTRIBUTION_NAMES {
            let d = PreferenceDistribution::named(name).unwrap();
            let total: f64 = d.orderings().iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12, "{name}");
        }
        assert!(PreferenceDistribution::named("nope").is_err());
    }

    #[test]
    fn distribution_entries() {
        use Feature::*;
        let co = PreferenceDistribution::named("co").unwrap();
        assert_eq!(co.probability(&[La, Inc, Dur, Sav]), 1.0 / 6.0);
        assert_eq!(co.probability(&[Dur, La, Inc, Sav]), 0.0);
        let nonpriv = PreferenceDistribution::named("non-privileged").unwrap();
        assert_eq!(nonpriv.probability(&[La, Dur, Inc, Sav]), 1.0 / 6.0);
        let privileged = PreferenceDistribution::named("privileged").unwrap();
        assert_eq!(privileged.probability(&[Sav, Inc, Dur, La]), 1.0 / 6.0);
        // The privileged table never ranks LA or Dur first.
        assert!(privileged
            .orderings()
            .iter()
            .all(|(o, p)| *p == 0.0 || matches!(o[0], Inc | Sav)));
    }

    #[test]
    fn uniform_orderings_pass_chi_square() {
        let d = PreferenceDistribution::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 24];
        for _ in 0..n {
            let o = d.sample_ordering(&mut rng);
            counts[d.orderings().iter().position(|(x, _)| *x == o).unwrap()] += 1;
        }
        let expected = n as f64 / 24.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(23.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}");
    }

    #[test]
    fn fixed_thresholds() {
        let d = PreferenceDistribution::uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = sample_ranking(&d, ThresholdMode::Fixed(5), &mut rng);
            assert_eq!(p.actionable_set().len(), 4);
            let p = sample_ranking(&d, ThresholdMode::Fixed(2), &mut rng);
            let set = p.actionable_set();
            assert_eq!(set.len(), 1);
            assert_eq!(p.score(set[0]), 1);
        }
    }

    #[test]
    fn score_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(sample_scores(ScoreRange::SoftOnly, &mut rng).actionable_set().len(), 4);
        }
        let n = 100_000;
        let mut hard = [0usize; N_ACTIONABLE];
        for _ in 0..n {
            let p = sample_scores(ScoreRange::WithHard, &mut rng);
            for (h, s) in hard.iter_mut().zip(p.scores()) {
                *h += usize::from(s == S_MAX);
            }
        }
        for h in hard {
            assert!((h as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let ones = PreferenceProfile::new([1; 4], Scheme::Likert).unwrap();
        assert_eq!(ones.weights(&linear()), [1.0; 4]);
        assert_eq!(ones.priors(&linear()), [0.5; 4]);
    }

    #[test]
    fn binary_profiles() {
        let all = binary_profile(&Feature::ACTIONABLE).unwrap();
        assert_eq!(all.actionable_set(), Feature::ACTIONABLE.to_vec());
        assert!(binary_profile(&[]).unwrap().actionable_set().is_empty());
        assert_eq!(binary_profile(&[Feature::Inc]).unwrap().actionable_set(), vec![Feature::Inc]);
        assert!(binary_profile(&[Feature::Ag]).is_err());
        assert_eq!(all.score(Feature::Ag), 0);
    }

    #[test]
    fn hard_sets() {
        let r = PreferenceProfile::new([1, 2, 3, 4], Scheme::Ranking).unwrap();
        assert_eq!(r.hard_feature_set(), vec![Feature::Sav]);
        let all = binary_profile(&Feature::ACTIONABLE).unwrap();
        assert_eq!(all.hard_feature_set(), Feature::ACTIONABLE.to_vec());
        let tie = PreferenceProfile::new([1, 3, 3, 5], Scheme::Likert).unwrap();
        assert_eq!(tie.hard_feature_set(), vec![Feature::Dur, Feature::Inc]);
        assert!(binary_profile(&[]).unwrap().hard_feature_set().is_empty());
    }

    #[test]
    fn s_u_max_rule() {
        assert_eq!(PreferenceProfile::new([1, 1, 5, 5], Scheme::Likert).unwrap().s_u_max(), 2);
        assert_eq!(PreferenceProfile::new([2, 1, 5, 3], Scheme::Ranking).unwrap().s_u_max(), 3);
        assert_eq!(binary_profile(&[]).unwrap().s_u_max(), 2);
    }

    #[test]
    fn validation() {
        assert!(PreferenceProfile::new([0, 1, 2, 3], Scheme::Likert).is_err());
        assert!(PreferenceProfile::new([1, 1, 2, 3], Scheme::Ranking).is_err());
        assert!(PreferenceProfile::new([1, 3, 5, 5], Scheme::Ranking).is_err());
        assert!(PreferenceProfile::new([1, 2, 5, 5], Scheme::Ranking).is_ok());
        assert!(CostProfileParams { alpha: 0.0, ..linear() }.validate().is_err());
        assert!(linear().validate().is_ok());
    }

    #[test]
    fn threshold_mode_strings() {
        for m in [ThresholdMode::None, ThresholdMode::Uniform, ThresholdMode::Fixed(3)] {
            assert_eq!(m.to_string().parse::<ThresholdMode>().unwrap(), m);
        }
        assert!("fixed:7".parse::<ThresholdMode>().is_err());
    }

    #[test]
    fn distribution_json_round_trip() {
        let d = PreferenceDistribution::named("rco").unwrap();
        let back = PreferenceDistribution::from_json(&d.to_json()).unwrap();
        for (o, p) in d.orderings() {
            assert_eq!(back.probability(o), *p);
        }
        let bad = r#"{"name":"x","permutations":{"LA,Dur,Inc,Sav":0.5}}"#;
        assert!(PreferenceDistribution::from_json(bad).is_err());
    }

    #[test]
    fn profile_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let profiles: Vec<_> = (0..30)
            .map(|i| {
                if i % 2 == 0 {
                    sample_ranking(&PreferenceDistribution::uniform(), ThresholdMode::Uniform, &mut rng)
                } else {
                    sample_scores(ScoreRange::WithHard, &mut rng)
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_profiles(&path, &profiles).unwrap();
        assert_eq!(read_profiles(&path).unwrap(), profiles);
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("s_LA,s_Dur,s_Inc,s_Sav,scheme\n"));
    }
}
