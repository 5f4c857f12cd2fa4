//! Seeded random search over model hyperparameters.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{cross_validate, CvPlan};
use crate::models::{Estimator, Family, ModelSpec};
use crate::rng::{derive_seed, rng_for};
use crate::rpensemble::RpConfig;
use crate::survival::LabeledDataset;

/// A hyperparameter value or a distribution to draw it from.
///
/// In TOML: `C = 1.0`, `C = { log_uniform = [0.01, 100.0] }`,
/// `width = { int_uniform = [8, 64] }`, `bootstrap = { categorical = [0, 1] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamDist {
    Fixed(f64),
    Uniform { uniform: [f64; 2] },
    LogUniform { log_uniform: [f64; 2] },
    IntUniform { int_uniform: [i64; 2] },
    Categorical { categorical: Vec<f64> },
}

impl ParamDist {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("distribution for {name}: {why}")));
        match self {
            ParamDist::Fixed(v) if !v.is_finite() => bad("value must be finite"),
            ParamDist::Uniform { uniform: [lo, hi] } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bad("uniform needs finite lo <= hi")
            }
            ParamDist::LogUniform { log_uniform: [lo, hi] } if !(*lo > 0.0 && hi.is_finite() && lo <= hi) => {
                bad("log_uniform needs 0 < lo <= hi")
            }
            ParamDist::IntUniform { int_uniform: [lo, hi] } if lo > hi => bad("int_uniform needs lo <= hi"),
            ParamDist::Categorical { categorical }
                if categorical.is_empty() || categorical.iter().any(|v| !v.is_finite()) =>
            {
                bad("categorical needs at least one finite value")
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut crate::rng::Rng) -> f64 {
        match self {
            ParamDist::Fixed(v) => *v,
            ParamDist::Uniform { uniform: [lo, hi] } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(*lo..*hi)
                }
            }
            ParamDist::LogUniform { log_uniform: [lo, hi] } => {
                if lo == hi {
                    *lo
                } else {
                    rng.random_range(lo.ln()..hi.ln()).exp()
                }
            }
            ParamDist::IntUniform { int_uniform: [lo, hi] } => rng.random_range(*lo..=*hi) as f64,
            ParamDist::Categorical { categorical } => categorical[rng.random_range(0..categorical.len())],
        }
    }
}

/// A model family plus a search space. For `rp_ensemble` the space may hold
/// `b1_groups`, `b2_per_group`, `projected_dim`, `vote_threshold_alpha`,
/// `selection_holdout_fraction` and base-model parameters prefixed `base.`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTemplate {
    pub family: String,
    #[serde(default)]
    pub base_family: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, ParamDist>,
}

const RP_KEYS: [&str; 5] = [
    "b1_groups",
    "b2_per_group",
    "projected_dim",
    "vote_threshold_alpha",
    "selection_holdout_fraction",
];

impl ModelTemplate {
    pub fn new(family: &str) -> Self {
        Self {
            family: family.to_owned(),
            base_family: None,
            seed: None,
            hyperparameters: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, dist: ParamDist) -> Self {
        self.hyperparameters.insert(name.to_owned(), dist);
        self
    }

    pub fn is_ensemble(&self) -> bool {
        self.family == "rp_ensemble"
    }

    /// Builds the estimator for one concrete point of the space.
    pub fn instantiate(&self, point: &BTreeMap<String, f64>, seed: u64) -> Result<Estimator> {
        if !self.is_ensemble() {
            let family: Family = self.family.parse()?;
            let spec = ModelSpec {
                family,
                hyperparameters: point.clone(),
                seed,
            };
            spec.validate()?;
            return Ok(Estimator::Model(spec));
        }
        let base_family: Family = self.base_family.as_deref().unwrap_or("gaussian_nb").parse()?;
        let mut base = ModelSpec::new(base_family);
        let get = |k: &str| point.get(k).copied();
        let count = |k: &str, default: usize| -> Result<usize> {
            match get(k) {
                None => Ok(default),
                Some(v) if v >= 1.0 && v.fract() == 0.0 => Ok(v as usize),
                Some(v) => Err(Error::Config(format!(
                    "rp_ensemble.{k} must be a positive integer, got {v}"
                ))),
            }
        };
        for (k, v) in point {
            if let Some(name) = k.strip_prefix("base.") {
                base.hyperparameters.insert(name.to_owned(), *v);
            } else if !RP_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "rp_ensemble has no hyperparameter {k:?} (valid: {RP_KEYS:?} and base.<name>)"
                )));
            }
        }
        let cfg = RpConfig {
            b1_groups: count("b1_groups", 100)?,
            b2_per_group: count("b2_per_group", 20)?,
            projected_dim: count("projected_dim", 5)?,
            base: base.with_seed(seed),
            vote_threshold_alpha: get("vote_threshold_alpha"),
            selection_holdout_fraction: get("selection_holdout_fraction").unwrap_or(0.2),
            seed,
        };
        cfg.validate(None)?;
        Ok(Estimator::RpEnsemble(cfg))
    }

    /// Checks the family, every distribution and a sample drawn from the space.
    pub fn validate(&self) -> Result<()> {
        for (name, d) in &self.hyperparameters {
            d.validate(name)?;
        }
        if !self.is_ensemble() && self.base_family.is_some() {
            return Err(Error::Config(format!(
                "base_family only applies to rp_ensemble, not {}",
                self.family
            )));
        }
        let point = self.sample_point(&mut rng_for(0, &[]));
        self.instantiate(&point, 0).map(|_| ())
    }

    pub fn sample_point(&self, rng: &mut crate::rng::Rng) -> BTreeMap<String, f64> {
        self.hyperparameters
            .iter()
            .map(|(k, d)| (k.clone(), d.sample(rng)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub hyperparameters: BTreeMap<String, f64>,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: Option<f64>,
    pub error: Option<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: usize,
    pub trials: Vec<TrialRecord>,
}

impl SearchResult {
    pub fn best_trial(&self) -> &TrialRecord {
        &self.trials[self.best]
    }
}

/// Hyperparameters of trial `trial`; depends only on (seed, trial).
pub fn trial_point(template: &ModelTemplate, seed: u64, trial: usize) -> BTreeMap<String, f64> {
    template.sample_point(&mut rng_for(seed, &[0x54_5249_414c, trial as u64]))
}

/// Model seed shared by every trial of a template.
pub fn template_seed(template: &ModelTemplate, seed: u64) -> u64 {
    template.seed.unwrap_or_else(|| derive_seed(seed, &[0x4d_4f44_454c]))
}

/// Evaluate `budget` sampled points by cross-validation and return them all
/// with the best one marked (highest mean AUC, lowest index on ties).
/// Runs on the current rayon pool.
pub fn random_search(
    template: &ModelTemplate,
    data: &LabeledDataset,
    budget: usize,
    plan: &CvPlan,
    seed: u64,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::Config("search budget must be >= 1".into()));
    }
    template.validate()?;
    let model_seed = template_seed(template, seed);
    let trials: Vec<TrialRecord> = (0..budget)
        .into_par_iter()
        .map(|t| {
            let start = Instant::now();
            let point = trial_point(template, seed, t);
            let outcome = template
                .instantiate(&point, model_seed)
                .and_then(|est| cross_validate(&est, data, plan, ""));
            let (fold_aucs, mean_auc, error) = match outcome {
                Ok(report) => {
                    let aucs: Vec<f64> = report.rows.iter().map(|r| r.auc).collect();
                    let mean = crate::stats::mean(&aucs);
                    (aucs, Some(mean), None)
                }
                Err(e) => (Vec::new(), None, Some(e.to_string())),
            };
            TrialRecord {
                trial: t,
                hyperparameters: point,
                fold_aucs,
                mean_auc,
                error,
                wall_time_s: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for t in &trials {
        if let Some(m) = t.mean_auc {
            if best.is_none_or(|b| m > trials[b].mean_auc.expect("scored")) {
                best = Some(t.trial);
            }
        }
    }
    match best {
        Some(best) => Ok(SearchResult { best, trials }),
        None => {
            let msgs: Vec<String> = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("?")))
                .collect();
            Err(Error::Numerical(format!(
                "all {budget} trials failed: {}",
                msgs.join("; ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FeatureMatrix;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn data() -> LabeledDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 60;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            rng.random_range(-1.0..1.0) + if j == 0 { f64::from(labels[i]) } else { 0.0 }
        });
        LabeledDataset {
            features: FeatureMatrix::new(
                (0..n).map(|i| format!("P{i}")).collect(),
                (0..4).map(|j| format!("g{j}")).collect(),
                x,
            )
            .unwrap(),
            labels,
            times: vec![10.0; n],
            events: vec![true; n],
            horizon_months: 5.0,
        }
    }

    #[test]
    fn single_trial_budget() {
        let t = ModelTemplate::new("gaussian_nb");
        let r = random_search(&t, &data(), 1, &CvPlan::default(), 0).unwrap();
        assert_eq!(r.trials.len(), 1);
        assert_eq!(r.best, 0);
    }

    #[test]
    fn categorical_space_is_covered() {
        let t = ModelTemplate::new("random_forest").with(
            "max_depth",
            ParamDist::Categorical {
                categorical: vec![1.0, 3.0],
            },
        );
        let seen: std::collections::BTreeSet<u64> =
            (0..10).map(|i| trial_point(&t, 0, i)["max_depth"] as u64).collect();
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = rng_for(1, &[]);
        for _ in 0..1000 {
            let v = ParamDist::LogUniform {
                log_uniform: [0.01, 100.0],
            }
            .sample(&mut rng);
            assert!((0.01..=100.0).contains(&v));
            let k = ParamDist::IntUniform { int_uniform: [2, 4] }.sample(&mut rng);
            assert!([2.0, 3.0, 4.0].contains(&k));
        }
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let t = ModelTemplate::new("l1_logistic").with(
            "lambda",
            ParamDist::LogUniform {
                log_uniform: [1e-4, 1.0],
            },
        );
        let run = |w: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .unwrap()
                .install(|| random_search(&t, &data(), 6, &CvPlan::default(), 9).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.best, b.best);
        let strip = |r: &SearchResult| -> Vec<_> {
            r.trials
                .iter()
                .map(|t| (t.hyperparameters.clone(), t.fold_aucs.clone()))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn template_validation() {
        assert!(ModelTemplate::new("nope").validate().is_err());
        assert!(ModelTemplate::new("svm_rbf")
            .with(
                "C",
                ParamDist::LogUniform {
                    log_uniform: [0.0, 1.0]
                }
            )
            .validate()
            .is_err());
        assert!(ModelTemplate::new("svm_rbf")
            .with("width", ParamDist::Fixed(3.0))
            .validate()
            .is_err());
        let rp = ModelTemplate::new("rp_ensemble")
            .with("b1_groups", ParamDist::Fixed(5.0))
            .with("base.C", ParamDist::Fixed(2.0));
        assert!(rp.validate().is_err());
        let rp = ModelTemplate {
            base_family: Some("svm_rbf".into()),
            ..rp
        };
        assert!(rp.validate().is_ok());
    }

    #[test]
    fn all_failing_trials_aggregate_errors() {
        let t = ModelTemplate::new("gaussian_nb");
        let plan = CvPlan {
            k_folds: 50,
            ..CvPlan::default()
        };
        let err = random_search(&t, &data(), 2, &plan, 0).unwrap_err().to_string();
        assert!(err.contains("trial 0") && err.contains("trial 1"), "{err}");
    }
}
