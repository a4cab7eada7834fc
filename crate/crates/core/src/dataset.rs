//! Generated populations, train/val/deploy splits, normalization statistics
//! and their CSV form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scm::{ExogenousVector, Feature, FeatureVector, LoanScm, StructuralModel, N_FEATURES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Deploy,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Deploy => "deploy",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "deploy" => Ok(Split::Deploy),
            other => Err(DataError::Malformed(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub x: FeatureVector,
    pub u: ExogenousVector,
    pub label: u8,
    /// Stylized binary attribute with no causal effect; 0 = white, 1 = non-white.
    pub race: u8,
    pub split: Split,
}

impl Individual {
    /// `Ge = 1` is treated as male, `Ge = 0` as female.
    pub fn is_female(&self) -> bool {
        self.x[Feature::Ge] == 0.0
    }
}

/// Per-feature statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    pub min: [f64; N_FEATURES],
    pub max: [f64; N_FEATURES],
}

impl NormStats {
    pub fn from_rows<'a>(rows: impl Iterator<Item = &'a [f64; N_FEATURES]>) -> Self {
        let rows: Vec<_> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut min = [f64::INFINITY; N_FEATURES];
        let mut max = [f64::NEG_INFINITY; N_FEATURES];
        for r in &rows {
            for i in 0..N_FEATURES {
                mean[i] += r[i] / n;
                min[i] = min[i].min(r[i]);
                max[i] = max[i].max(r[i]);
            }
        }
        let mut std = [0.0; N_FEATURES];
        for r in &rows {
            for i in 0..N_FEATURES {
                std[i] += (r[i] - mean[i]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            // Constant columns normalize to zero rather than NaN.
            if *s == 0.0 || !s.is_finite() {
                *s = 1.0;
            }
        }
        Self { mean, std, min, max }
    }

    pub fn normalize(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|i| (x[i] - self.mean[i]) / self.std[i])
    }

    pub fn normalize_feature(&self, f: Feature, v: f64) -> f64 {
        (v - self.mean[f.index()]) / self.std[f.index()]
    }

    pub fn denormalize_feature(&self, f: Feature, v: f64) -> f64 {
        v * self.std[f.index()] + self.mean[f.index()]
    }

    pub fn range(&self, f: Feature) -> (f64, f64) {
        (self.min[f.index()], self.max[f.index()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub individuals: Vec<Individual>,
    pub norm: NormStats,
}

pub const DEFAULT_POPULATION: usize = 20_000;

impl Dataset {
    /// Samples `n` individuals from the Loan model. The first half is the
    /// training split, the next quarter validation, the rest deployment.
    /// Race is assigned so that every gender has exactly (up to one) half
    /// of each race.
    pub fn sample(n: usize, seed: u64) -> Self {
        let scm = LoanScm;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_train = n / 2;
        let n_val = n / 4;
        let mut individuals: Vec<Individual> = (0..n)
            .map(|i| {
                let u = scm.sample_noise(&mut rng);
                let x = scm.generate(&u);
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Deploy
                };
                Individual {
                    label: scm.label(&x),
                    x,
                    u,
                    race: 0,
                    split,
                }
            })
            .collect();
        for ge in [0.0, 1.0] {
            let mut idx: Vec<usize> = (0..n).filter(|&i| individuals[i].x[Feature::Ge] == ge).collect();
            idx.shuffle(&mut rng);
            let half = idx.len() / 2;
            for (k, &i) in idx.iter().enumerate() {
                individuals[i].race = u8::from(k >= half);
            }
        }
        Self::from_individuals(individuals)
    }

    pub fn from_individuals(individuals: Vec<Individual>) -> Self {
        let norm = NormStats::from_rows(
            individuals
                .iter()
                .filter(|ind| ind.split == Split::Train)
                .map(|ind| &ind.x.0),
        );
        Self { individuals, norm }
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.individuals[i].split == split)
            .collect()
    }

    /// Income value at the given quantile of the training split.
    pub fn income_quantile(&self, q: f64) -> f64 {
        let mut inc: Vec<f64> = self
            .individuals
            .iter()
            .filter(|ind| ind.split == Split::Train)
            .map(|ind| ind.x[Feature::Inc])
            .collect();
        if inc.is_empty() {
            return f64::NAN;
        }
        inc.sort_by(f64::total_cmp);
        let pos = ((inc.len() - 1) as f64 * q).round() as usize;
        inc[pos]
    }

    pub const FEATURE_HEADER: [&'static str; 10] =
        ["Ge", "Ag", "Ed", "LA", "Dur", "Inc", "Sav", "label", "race", "split"];
    pub const EXOGENOUS_HEADER: [&'static str; N_FEATURES] =
        ["U_Ge", "U_Ag", "U_Ed", "U_LA", "U_Dur", "U_Inc", "U_Sav"];

    pub fn write_csv(&self, features: &Path, exogenous: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(features)?;
        w.write_record(Self::FEATURE_HEADER)?;
        for ind in &self.individuals {
            let mut row: Vec<String> = ind.x.0.iter().map(f64::to_string).collect();
            row.push(ind.label.to_string());
            row.push(ind.race.to_string());
            row.push(ind.split.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(exogenous)?;
        w.write_record(Self::EXOGENOUS_HEADER)?;
        for ind in &self.individuals {
            w.write_record(ind.u.0.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(features: &Path, exogenous: &Path) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_path(features)?;
        if r.headers()?.iter().ne(Self::FEATURE_HEADER) {
            return Err(DataError::Malformed(format!("unexpected header in {}", features.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, DataError> {
                rec[i]
                    .parse()
                    .map_err(|_| DataError::Malformed(format!("bad number {:?}", &rec[i])))
            };
            let mut x = [0.0; N_FEATURES];
            for (i, v) in x.iter_mut().enumerate() {
                *v = num(i)?;
            }
            rows.push((FeatureVector(x), num(7)? as u8, num(8)? as u8, rec[9].parse::<Split>()?));
        }
        let mut r = csv::Reader::from_path(exogenous)?;
        let mut us = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let mut u = [0.0; N_FEATURES];
            for (i, v) in u.iter_mut().enumerate() {
                *v = rec[i]
                    .parse()
                    .map_err(|_| DataError::Malformed(format!("bad number {:?}", &rec[i])))?;
            }
            us.push(ExogenousVector(u));
        }
        if us.len() != rows.len() {
            return Err(DataError::Malformed(format!(
                "{} feature rows but {} exogenous rows",
                rows.len(),
                us.len()
            )));
        }
        let individuals = rows
            .into_iter()
            .zip(us)
            .map(|((x, label, race, split), u)| Individual {
                x,
                u,
                label,
                race,
                split,
            })
            .collect();
        Ok(Self::from_individuals(individuals))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_reproducibility() {
        let a = Dataset::sample(400, 7);
        let b = Dataset::sample(400, 7);
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Train).len(), 200);
        assert_eq!(a.indices(Split::Val).len(), 100);
        assert_eq!(a.indices(Split::Deploy).len(), 100);
    }

    #[test]
    fn stored_noise_reproduces_features() {
        let d = Dataset::sample(300, 1);
        for ind in &d.individuals {
            assert_eq!(LoanScm.generate(&ind.u), ind.x);
            assert_eq!(LoanScm.label(&ind.x), ind.label);
        }
    }

    #[test]
    fn gender_race_cells_are_balanced() {
        let d = Dataset::sample(2000, 3);
        for ge in [0.0, 1.0] {
            let group: Vec<_> = d.individuals.iter().filter(|i| i.x[Feature::Ge] == ge).collect();
            let race1 = group.iter().filter(|i| i.race == 1).count();
            assert!(race1.abs_diff(group.len() - race1) <= 1);
        }
    }

    #[test]
    fn norm_stats_use_train_split_only() {
        let mut d = Dataset::sample(100, 2);
        let before = d.norm.clone();
        for ind in d.individuals.iter_mut().filter(|i| i.split != Split::Train) {
            ind.x[Feature::Inc] += 1000.0;
        }
        let rebuilt = Dataset::from_individuals(d.individuals);
        assert_eq!(rebuilt.norm, before);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let d = Dataset::sample(50, 4);
        let dir = tempfile::tempdir().unwrap();
        let (f, e) = (dir.path().join("pop.csv"), dir.path().join("exo.csv"));
        d.write_csv(&f, &e).unwrap();
        let back = Dataset::read_csv(&f, &e).unwrap();
        assert_eq!(back, d);
        let header = std::fs::read_to_string(&f).unwrap();
        assert!(header.starts_with("Ge,Ag,Ed,LA,Dur,Inc,Sav,label,race,split\n"));
    }

    #[test]
    fn age_offset_has_zero_mean() {
        let d = Dataset::sample(100_000, 12);
        let mean = d.individuals.iter().map(|i| i.x[Feature::Ag]).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 0.3, "{mean}");
    }
}
