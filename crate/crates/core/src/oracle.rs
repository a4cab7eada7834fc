//! Exhaustive grid-search recourse over the individually actionable features.
//!
//! Every feature in `AF_u` gets a grid of candidate targets plus a sentinel
//! meaning "leave it alone". The joint grid is ordered by weighted cost and
//! the first candidate that flips the decision (and, optionally, is at least
//! as likely as the factual) is returned. Ties are broken by fewer
//! intervened features, then the lexicographically smaller feature set, then
//! smaller target values.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Decision;
use crate::dataset::{Dataset, NormStats};
use crate::preferences::{CostProfileParams, PreferenceProfile};
use crate::result::{action_costs, touches_hard_feature, RecourseResult, Solver};
use crate::scm::{Action, Feature, FeatureVector, LoanScm, ScmError, StructuralModel, N_ACTIONABLE, N_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub bins: usize,
    pub plausibility_hard: bool,
    pub cost_params: CostProfileParams,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            bins: 25,
            plausibility_hard: true,
            cost_params: CostProfileParams::default(),
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |k| if k + 1 == n && n > 1 { hi } else { lo + step * k as f64 })
}

/// `bins` evenly spaced targets over `[-2 x_f, 2 x_f] ∩ [lo, hi]`, followed
/// by the factual value itself as the no-intervention sentinel. When the
/// interval is empty or degenerate the whole feasible range is used instead.
pub fn build_grid(x_f: f64, range: (f64, f64), bins: usize) -> Vec<f64> {
    let (lo, hi) = range;
    let (a, b) = ((-2.0 * x_f).min(2.0 * x_f), (-2.0 * x_f).max(2.0 * x_f));
    let (a, b) = (a.max(lo), b.min(hi));
    let mut grid: Vec<f64> = if x_f == 0.0 || a >= b {
        linspace(lo, hi, bins).collect()
    } else {
        linspace(a, b, bins).collect()
    };
    grid.push(x_f);
    grid
}

#[derive(Clone, Copy)]
struct Candidate {
    cost: f64,
    n: u8,
    /// Positions of intervened features, ascending, padded with `u8::MAX`.
    set: [u8; N_ACTIONABLE],
    idx: [u8; N_ACTIONABLE],
}

/// Per-feature candidate targets; `None` is the sentinel.
struct FeatureGrid {
    feature: Feature,
    targets: Vec<Option<f64>>,
    penalties: Vec<f64>,
}

fn compare(a: &Candidate, b: &Candidate, grids: &[FeatureGrid]) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then(a.n.cmp(&b.n))
        .then(a.set.cmp(&b.set))
        .then_with(|| {
            for (j, g) in grids.iter().enumerate() {
                let (va, vb) = (g.targets[a.idx[j] as usize], g.targets[b.idx[j] as usize]);
                if let (Some(va), Some(vb)) = (va, vb) {
                    let o = va.total_cmp(&vb);
                    if o != Ordering::Equal {
                        return o;
                    }
                }
            }
            a.idx.cmp(&b.idx)
        })
}

/// Solves one user's recourse problem over a generic model and decision rule.
pub fn solve_with<M: StructuralModel, C: Decision>(
    scm: &M,
    model: &C,
    norm: &NormStats,
    user_id: usize,
    x: &FeatureVector,
    profile: &PreferenceProfile,
    config: &OracleConfig,
) -> Result<RecourseResult, ScmError> {
    let u = scm.abduct(x)?;
    let logp_f = scm.log_density(x);
    let weights = profile.weights(&config.cost_params);

    let grids: Vec<FeatureGrid> = profile
        .actionable_set()
        .into_iter()
        .map(|f| {
            let w = weights[f.actionable_index().expect("actionable")];
            let x_f = x[f];
            let mut targets: Vec<Option<f64>> = build_grid(x_f, norm.range(f), config.bins)
                .into_iter()
                .filter(|&v| v != x_f)
                .map(Some)
                .collect();
            targets.push(None);
            let penalties = targets
                .iter()
                .map(|t| t.map_or(0.0, |v| w * ((v - x_f) / norm.std[f.index()]).powi(2)))
                .collect();
            FeatureGrid {
                feature: f,
                targets,
                penalties,
            }
        })
        .collect();

    let total: usize = grids.iter().map(|g| g.targets.len()).product();
    let mut candidates = Vec::with_capacity(total);
    let mut idx = [0u8; N_ACTIONABLE];
    for _ in 0..total {
        let mut cost = 0.0;
        let mut n = 0;
        let mut set = [u8::MAX; N_ACTIONABLE];
        for (j, g) in grids.iter().enumerate() {
            let k = idx[j] as usize;
            cost += g.penalties[k];
            if g.targets[k].is_some() {
                set[n] = j as u8;
                n += 1;
            }
        }
        candidates.push(Candidate {
            cost,
            n: n as u8,
            set,
            idx,
        });
        for (j, g) in grids.iter().enumerate() {
            idx[j] += 1;
            if (idx[j] as usize) < g.targets.len() {
                break;
            }
            idx[j] = 0;
        }
    }
    candidates.sort_unstable_by(|a, b| compare(a, b, &grids));

    for c in &candidates {
        let mut pins = [None; N_FEATURES];
        for (j, g) in grids.iter().enumerate() {
            pins[g.feature.index()] = g.targets[c.idx[j] as usize];
        }
        let x_cf = scm.counterfactual_pinned(x, &u, &pins);
        if model.decide(&x_cf) != 1 {
            continue;
        }
        let logp_cf = scm.log_density(&x_cf);
        if config.plausibility_hard && (logp_cf < logp_f || logp_cf.is_nan()) {
            continue;
        }
        let mut action = Action::empty();
        for (j, g) in grids.iter().enumerate() {
            if let Some(v) = g.targets[c.idx[j] as usize] {
                action.set(g.feature, v)?;
            }
        }
        let (cost_unweighted, _) = action_costs(x, &action, norm, &weights);
        return Ok(RecourseResult {
            user_id,
            solver: Solver::Oracle,
            hard_action: touches_hard_feature(&action, profile),
            action,
            x_cf,
            valid: true,
            cost_unweighted,
            cost_weighted: c.cost,
            logp_factual: logp_f,
            logp_cf,
        });
    }

    Ok(RecourseResult {
        user_id,
        solver: Solver::Oracle,
        action: Action::empty(),
        x_cf: *x,
        valid: false,
        cost_unweighted: 0.0,
        cost_weighted: 0.0,
        logp_factual: logp_f,
        logp_cf: logp_f,
        hard_action: false,
    })
}

/// Solves the Loan problem for `users` (dataset row indices), with one
/// profile per user. Results come back in user order.
pub fn solve_population<C: Decision + Sync>(
    dataset: &Dataset,
    model: &C,
    users: &[usize],
    profiles: &[PreferenceProfile],
    config: &OracleConfig,
) -> Result<Vec<RecourseResult>, ScmError> {
    assert_eq!(users.len(), profiles.len(), "one profile per user");
    users
        .par_iter()
        .zip(profiles.par_iter())
        .map(|(&i, p)| solve_with(&LoanScm, model, &dataset.norm, i, &dataset.individuals[i].x, p, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Real;
    use crate::preferences::{binary_profile, CostProfile, Scheme};
    use crate::scm::ExogenousVector;
    use rand::Rng;

    #[test]
    fn grid_examples() {
        let g = build_grid(1.0, (-10.0, 10.0), 25);
        assert_eq!(g.len(), 26);
        assert_eq!((g[0], g[24], g[25]), (-2.0, 2.0, 1.0));
        assert!((g[1] - g[0] - 1.0 / 6.0).abs() < 1e-12);

        let g = build_grid(8.0, (-10.0, 10.0), 25);
        assert_eq!((g[0], g[24]), (-10.0, 10.0));

        let g = build_grid(-3.0, (-4.0, 10.0), 25);
        assert_eq!((g[0], g[24], g[25]), (-4.0, 6.0, -3.0));

        let g = build_grid(0.0, (-5.0, 3.0), 25);
        assert_eq!((g[0], g[24], g[25]), (-5.0, 3.0, 0.0));

        // Interval entirely outside the range.
        let g = build_grid(1.0, (5.0, 9.0), 25);
        assert_eq!((g[0], g[24]), (5.0, 9.0));
    }

    /// `x_LA = u`, `x_Dur = x_LA + u`; everything else is a constant root.
    struct Toy;

    impl StructuralModel for Toy {
        fn equation<T: Real>(&self, f: Feature, x: &[T; N_FEATURES], noise: T) -> T {
            match f {
                Feature::Dur => x[Feature::La.index()] + noise,
                _ => noise,
            }
        }
        fn invert<T: Real>(&self, f: Feature, x: &[T; N_FEATURES]) -> T {
            match f {
                Feature::Dur => x[Feature::Dur.index()] - x[Feature::La.index()],
                _ => x[f.index()],
            }
        }
        fn parents(&self, f: Feature) -> &'static [Feature] {
            match f {
                Feature::Dur => &[Feature::La],
                _ => &[],
            }
        }
        fn noise_log_pdf<T: Real>(&self, _: Feature, u: T) -> T {
            u * u * -0.5
        }
        fn log_abs_jacobian<T: Real>(&self, _: Feature, x: &[T; N_FEATURES]) -> T {
            x[0] * 0.0
        }
        fn support(&self, _: &FeatureVector) -> Result<(), ScmError> {
            Ok(())
        }
        fn sample_noise<R: Rng>(&self, rng: &mut R) -> ExogenousVector {
            let mut u = [0.0; N_FEATURES];
            u[Feature::La.index()] = rng.random_range(-2.0..2.0);
            u[Feature::Dur.index()] = rng.random_range(-2.0..2.0);
            ExogenousVector(u)
        }
        fn label(&self, x: &FeatureVector) -> u8 {
            u8::from(x[Feature::La] + 2.0 * x[Feature::Dur] >= 3.0)
        }
    }

    struct Linear;

    impl Decision for Linear {
        fn decide(&self, x: &FeatureVector) -> u8 {
            Toy.label(x)
        }
    }

    fn toy_norm() -> NormStats {
        NormStats {
            mean: [0.0; N_FEATURES],
            std: [1.0, 1.0, 1.0, 1.5, 2.0, 1.0, 1.0],
            min: [-6.0; N_FEATURES],
            max: [6.0; N_FEATURES],
        }
    }

    /// Independent enumeration: nested loops over both grids, every point
    /// evaluated, minimum taken with the documented tie-break.
    fn brute_force(x: &FeatureVector, w: [f64; 2], plaus: bool) -> Option<(f64, Vec<(Feature, f64)>)> {
        let norm = toy_norm();
        let u = Toy.abduct(x).unwrap();
        let logp = Toy.log_density(x);
        let feats = [Feature::La, Feature::Dur];
        let grid = |f: Feature| {
            let mut g: Vec<Option<f64>> = build_grid(x[f], norm.range(f), 25)[..25]
                .iter()
                .filter(|&&v| v != x[f])
                .map(|&v| Some(v))
                .collect();
            g.push(None);
            g
        };
        let mut best: Option<(f64, Vec<(Feature, f64)>)> = None;
        for a in grid(Feature::La) {
            for b in grid(Feature::Dur) {
                let la = a.unwrap_or(x[Feature::La]);
                let dur = match (a, b) {
                    (_, Some(v)) => v,
                    (Some(_), None) => la + u.0[Feature::Dur.index()],
                    (None, None) => x[Feature::Dur],
                };
                let mut cf = *x;
                cf[Feature::La] = la;
                cf[Feature::Dur] = dur;
                if Linear.decide(&cf) != 1 || (plaus && Toy.log_density(&cf) < logp) {
                    continue;
                }
                let mut acts = Vec::new();
                let mut cost = 0.0;
                for (k, t) in [a, b].into_iter().enumerate() {
                    if let Some(v) = t {
                        cost += w[k] * ((v - x[feats[k]]) / norm.std[feats[k].index()]).powi(2);
                        acts.push((feats[k], v));
                    }
                }
                let better = match &best {
                    None => true,
                    Some((c, prev)) => {
                        cost < *c
                            || (cost == *c
                                && (acts.len(), acts.iter().map(|p| p.0).collect::<Vec<_>>())
                                    < (prev.len(), prev.iter().map(|p| p.0).collect::<Vec<_>>()))
                            || (cost == *c
                                && acts.len() == prev.len()
                                && acts.iter().map(|p| p.0).eq(prev.iter().map(|p| p.0))
                                && acts.iter().map(|p| p.1).lt(prev.iter().map(|p| p.1)))
                    }
                };
                if better {
                    best = Some((cost, acts));
                }
            }
        }
        best
    }

    #[test]
    fn matches_brute_force_on_toy_model() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let profile = binary_profile(&[Feature::La, Feature::Dur]).unwrap();
        let ranked = PreferenceProfile::new([2, 1, 5, 5], Scheme::Ranking).unwrap();
        let mut checked = 0;
        for case in 0..300 {
            let x = Toy.generate(&Toy.sample_noise(&mut rng));
            if Linear.decide(&x) == 1 {
                continue;
            }
            let plaus = case % 2 == 0;
            let (p, params) = if case % 3 == 0 {
                (ranked, CostProfileParams::new(CostProfile::Linear))
            } else {
                (profile, CostProfileParams::default())
            };
            let config = OracleConfig {
                plausibility_hard: plaus,
                cost_params: params,
                ..OracleConfig::default()
            };
            let w = p.weights(&params);
            let got = solve_with(&Toy, &Linear, &toy_norm(), 0, &x, &p, &config).unwrap();
            let want = brute_force(&x, [w[0], w[1]], plaus);
            match want {
                None => assert!(!got.valid),
                Some((cost, acts)) => {
                    assert!(got.valid);
                    assert_eq!(got.cost_weighted, cost);
                    assert_eq!(got.action.iter().collect::<Vec<_>>(), acts);
                }
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn empty_actionable_set_is_invalid() {
        let x = Toy.generate(&ExogenousVector([0.0; N_FEATURES]));
        let r = solve_with(
            &Toy,
            &Linear,
            &toy_norm(),
            3,
            &x,
            &binary_profile(&[]).unwrap(),
            &OracleConfig::default(),
        )
        .unwrap();
        assert!(!r.valid);
        assert!(r.action.is_empty());
        assert_eq!(r.cost_unweighted, 0.0);
    }
}
