//! Random-projection ensemble: B1 groups of B2 random row-orthonormal
//! projections, keep the best projection of each group on a stratified
//! holdout, refit its base classifier on all rows and vote.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{fit_classifier, Family, ModelSpec, TrainedModel};
use crate::rng::{derive_seed, rng_for, Rng};

const MAX_PROJECTION_ATTEMPTS: usize = 8;

fn default_holdout() -> f64 {
    0.2
}

fn default_base() -> ModelSpec {
    ModelSpec::new(Family::GaussianNb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpConfig {
    pub b1_groups: usize,
    pub b2_per_group: usize,
    pub projected_dim: usize,
    #[serde(default = "default_base")]
    pub base: ModelSpec,
    /// Fixed vote threshold; tuned on the training data when absent.
    #[serde(default)]
    pub vote_threshold_alpha: Option<f64>,
    #[serde(default = "default_holdout")]
    pub selection_holdout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RpConfig {
    pub fn new(b1_groups: usize, b2_per_group: usize, projected_dim: usize) -> Self {
        Self {
            b1_groups,
            b2_per_group,
            projected_dim,
            base: default_base(),
            vote_threshold_alpha: None,
            selection_holdout_fraction: default_holdout(),
            seed: 0,
        }
    }

    /// Checks the config, and `d <= M` when the ambient width is known.
    pub fn validate(&self, n_features: Option<usize>) -> Result<()> {
        if self.b1_groups == 0 || self.b2_per_group == 0 || self.projected_dim == 0 {
            return Err(Error::Config(
                "b1_groups, b2_per_group and projected_dim must be >= 1".into(),
            ));
        }
        if let Some(a) = self.vote_threshold_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("vote_threshold_alpha {a} not in (0, 1)")));
            }
        }
        let h = self.selection_holdout_fraction;
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Config(format!("selection_holdout_fraction {h} not in (0, 1)")));
        }
        if !self.base.family.is_classifier() {
            return Err(Error::Config(format!(
                "{} cannot be an ensemble base classifier",
                self.base.family
            )));
        }
        self.base.validate()?;
        if let Some(m) = n_features {
            if self.projected_dim > m {
                return Err(Error::Config(format!(
                    "projected_dim {} exceeds feature count {m}",
                    self.projected_dim
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!(
            "rp_ensemble(b1={},b2={},d={},base={})",
            self.b1_groups,
            self.b2_per_group,
            self.projected_dim,
            self.base.descriptor()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpModel {
    pub projections: Vec<Array2<f64>>,
    pub base_models: Vec<TrainedModel>,
    pub alpha: f64,
    pub feature_importance: Vec<f64>,
    /// Holdout error of every candidate, per group.
    pub group_errors: Vec<Vec<f64>>,
    /// Index of the kept candidate in each group.
    pub selected: Vec<usize>,
    pub n_features: usize,
}

/// Haar-distributed d × m matrix with orthonormal rows (Gram-Schmidt on Gaussian rows).
pub fn sample_projection(m: usize, d: usize, rng: &mut Rng) -> Result<Array2<f64>> {
    if d == 0 || d > m {
        return Err(Error::InvalidArgument(format!("projection dim {d} must be in 1..={m}")));
    }
    'attempt: for _ in 0..MAX_PROJECTION_ATTEMPTS {
        let mut a = Array2::from_shape_fn((d, m), |_| StandardNormal.sample(rng));
        for i in 0..d {
            for _ in 0..2 {
                for k in 0..i {
                    let dot: f64 = a.row(i).dot(&a.row(k));
                    let rk = a.row(k).to_owned();
                    a.row_mut(i).scaled_add(-dot, &rk);
                }
            }
            let norm = a.row(i).dot(&a.row(i)).sqrt();
            if !(norm > 1e-10) {
                continue 'attempt;
            }
            a.row_mut(i).mapv_inplace(|v| v / norm);
        }
        return Ok(a);
    }
    Err(Error::Numerical(format!(
        "rank-deficient projection in {MAX_PROJECTION_ATTEMPTS} attempts"
    )))
}

fn project(x: ArrayView2<'_, f64>, a: &Array2<f64>) -> Array2<f64> {
    x.dot(&a.t())
}

/// Stratified split: about `fraction` of each class goes to the holdout.
fn stratified_holdout(y: &[u8], fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        hold.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

fn misclassification(pred: &[u8], y: &[u8]) -> f64 {
    pred.iter().zip(y).filter(|(p, t)| p != t).count() as f64 / y.len() as f64
}

/// Vote threshold in {0, 1/B1, ..., 1} minimizing training error of `score >= alpha`.
/// Among tied minimizers the middle one is taken.
fn tune_alpha(votes: &[f64], y: &[u8], b1: usize) -> f64 {
    let errors: Vec<f64> = (0..=b1)
        .map(|k| {
            let a = k as f64 / b1 as f64;
            let pred: Vec<u8> = votes.iter().map(|&s| u8::from(s >= a - 1e-12)).collect();
            misclassification(&pred, y)
        })
        .collect();
    let best = errors.iter().cloned().fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> = (0..=b1).filter(|&k| errors[k] == best).collect();
    ties[(ties.len() - 1) / 2] as f64 / b1 as f64
}

pub fn train(x: ArrayView2<'_, f64>, y: &[u8], config: &RpConfig) -> Result<RpModel> {
    let (n, m) = x.dim();
    config.validate(Some(m))?;
    if y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} feature rows but {} labels",
            y.len()
        )));
    }
    let ones = y.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(Error::InvalidArgument("training set has a single class".into()));
    }

    let mut split_rng = rng_for(config.seed, &[0x484f_4c44]);
    let (train_idx, hold_idx) = stratified_holdout(y, config.selection_holdout_fraction, &mut split_rng);
    let y_train: Vec<u8> = train_idx.iter().map(|&i| y[i]).collect();
    let y_hold: Vec<u8> = hold_idx.iter().map(|&i| y[i]).collect();
    let train_ones = y_train.iter().filter(|&&v| v == 1).count();
    if hold_idx.is_empty() || train_ones == 0 || train_ones == y_train.len() {
        return Err(Error::InvalidArgument(
            "selection holdout leaves a single-class or empty split".into(),
        ));
    }
    let x_train = x.select(Axis(0), &train_idx);
    let x_hold = x.select(Axis(0), &hold_idx);
    let (b1, b2, d) = (config.b1_groups, config.b2_per_group, config.projected_dim);

    let groups: Vec<(Vec<f64>, usize, Array2<f64>, TrainedModel)> = (0..b1)
        .into_par_iter()
        .map(|g| -> Result<_> {
            let candidates: Vec<(f64, Array2<f64>)> = (0..b2)
                .into_par_iter()
                .map(|b| -> Result<_> {
                    let mut rng = rng_for(config.seed, &[g as u64, b as u64]);
                    let a = sample_projection(m, d, &mut rng)?;
                    let spec = config
                        .base
                        .clone()
                        .with_seed(derive_seed(config.seed, &[g as u64, b as u64, 1]));
                    let model = fit_classifier(&spec, project(x_train.view(), &a).view(), &y_train)?;
                    let pred = model.predict_labels(project(x_hold.view(), &a).view())?;
                    Ok((misclassification(&pred, &y_hold), a))
                })
                .collect::<Result<_>>()?;
            let errors: Vec<f64> = candidates.iter().map(|c| c.0).collect();
            let mut best = 0;
            for (k, e) in errors.iter().enumerate() {
                if *e < errors[best] {
                    best = k;
                }
            }
            let a = candidates.into_iter().nth(best).expect("b2 >= 1").1;
            let spec = config
                .base
                .clone()
                .with_seed(derive_seed(config.seed, &[g as u64, best as u64, 1]));
            let model = fit_classifier(&spec, project(x, &a).view(), y)?;
            Ok((errors, best, a, model))
        })
        .collect::<Result<_>>()?;

    let mut model = RpModel {
        projections: Vec::with_capacity(b1),
        base_models: Vec::with_capacity(b1),
        alpha: 0.5,
        feature_importance: Vec::new(),
        group_errors: Vec::with_capacity(b1),
        selected: Vec::with_capacity(b1),
        n_features: m,
    };
    for (errors, best, a, base) in groups {
        model.group_errors.push(errors);
        model.selected.push(best);
        model.projections.push(a);
        model.base_models.push(base);
    }

    let variances = x.var_axis(Axis(0), 0.0);
    let mut importance = vec![0.0; m];
    for a in &model.projections {
        for j in 0..m {
            importance[j] += a.column(j).iter().map(|w| w * w).sum::<f64>() * variances[j];
        }
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        importance.iter_mut().for_each(|v| *v /= total);
    } else {
        importance.fill(1.0 / m as f64);
    }
    model.feature_importance = importance;

    model.alpha = match config.vote_threshold_alpha {
        Some(a) => a,
        None => tune_alpha(&model.predict_scores(x)?, y, b1),
    };
    Ok(model)
}

impl RpModel {
    /// Fraction of base models voting class 1.
    pub fn predict_scores(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::InvalidArgument(format!(
                "ensemble expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let votes: Vec<Vec<u8>> = self
            .projections
            .par_iter()
            .zip(&self.base_models)
            .map(|(a, m)| m.predict_labels(project(x, a).view()))
            .collect::<Result<_>>()?;
        let k = votes.len() as f64;
        Ok((0..x.nrows())
            .map(|i| votes.iter().map(|v| f64::from(v[i])).sum::<f64>() / k)
            .collect())
    }

    pub fn predict_labels(&self, x: ArrayView2<'_, f64>) -> Result<Vec<u8>> {
        Ok(self
            .predict_scores(x)?
            .into_iter()
            .map(|s| u8::from(s >= self.alpha - 1e-12))
            .collect())
    }

    /// (feature, importance) pairs sorted by importance, descending.
    pub fn ranked_importance<'a>(&self, names: &'a [String]) -> Vec<(&'a str, f64)> {
        let mut pairs: Vec<(&str, f64)> = names
            .iter()
            .map(String::as_str)
            .zip(self.feature_importance.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        pairs
    }
}

/// Write `feature,importance` sorted descending.
pub fn write_importance(model: &RpModel, names: &[String], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["feature", "importance"])?;
    for (name, v) in model.ranked_importance(names) {
        w.write_record([name.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn gram_is_identity(a: &Array2<f64>) -> bool {
        let g = a.dot(&a.t());
        g.indexed_iter()
            .all(|((i, j), v)| (v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8)
    }

    fn det(mut a: Array2<f64>) -> f64 {
        let n = a.nrows();
        let mut d = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs()))
                .unwrap();
            if p != c {
                for k in 0..n {
                    a.swap((p, k), (c, k));
                }
                d = -d;
            }
            d *= a[(c, c)];
            for r in c + 1..n {
                let f = a[(r, c)] / a[(c, c)];
                for k in c..n {
                    a[(r, k)] -= f * a[(c, k)];
                }
            }
        }
        d
    }

    #[test]
    fn square_projection_is_orthogonal() {
        let mut rng = rng_for(3, &[]);
        let a = sample_projection(6, 6, &mut rng).unwrap();
        assert!(gram_is_identity(&a));
        assert!((det(a).abs() - 1.0).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn rows_are_orthonormal(seed in any::<u64>(), m in 1usize..40, frac in 0.0f64..1.0) {
            let d = 1 + ((m - 1) as f64 * frac) as usize;
            let a = sample_projection(m, d, &mut rng_for(seed, &[])).unwrap();
            prop_assert_eq!(a.dim(), (d, m));
            prop_assert!(gram_is_identity(&a));
        }
    }

    #[test]
    fn projected_norm_expectation() {
        let (m, d) = (20, 5);
        let mut rng = rng_for(11, &[]);
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = ndarray::Array1::from(x);
        let norm2 = x.dot(&x);
        let mut acc = 0.0;
        let samples = 10_000;
        for _ in 0..samples {
            let a = sample_projection(m, d, &mut rng).unwrap();
            let p = a.dot(&x);
            acc += p.dot(&p);
        }
        let ratio = acc / samples as f64 / norm2;
        assert!(
            (ratio - d as f64 / m as f64).abs() < 0.05 * d as f64 / m as f64,
            "{ratio}"
        );
    }

    fn noisy(seed: u64, n: usize, m: usize) -> (Array2<f64>, Vec<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x = Array2::from_shape_fn((n, m), |(i, j)| {
            let shift = if j < 3 { 1.5 * f64::from(y[i]) } else { 0.0 };
            shift + rng.random_range(-1.0..1.0)
        });
        (x, y)
    }

    #[test]
    fn single_projection_degenerates_to_base_model() {
        let (x, y) = noisy(1, 60, 8);
        let mut cfg = RpConfig::new(1, 1, 3);
        cfg.seed = 9;
        cfg.vote_threshold_alpha = Some(0.5);
        let ens = train(x.view(), &y, &cfg).unwrap();
        let a = sample_projection(8, 3, &mut rng_for(9, &[0, 0])).unwrap();
        assert_eq!(a, ens.projections[0]);
        let spec = ModelSpec::new(Family::GaussianNb).with_seed(derive_seed(9, &[0, 0, 1]));
        let direct = fit_classifier(&spec, project(x.view(), &a).view(), &y).unwrap();
        let want: Vec<f64> = direct
            .predict_labels(project(x.view(), &a).view())
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        assert_eq!(ens.predict_scores(x.view()).unwrap(), want);
    }

    #[test]
    fn selection_and_importance_invariants() {
        let (x, y) = noisy(2, 80, 10);
        let mut cfg = RpConfig::new(6, 5, 2);
        cfg.seed = 4;
        let ens = train(x.view(), &y, &cfg).unwrap();
        for (errs, &k) in ens.group_errors.iter().zip(&ens.selected) {
            assert!(errs.iter().all(|e| errs[k] <= *e));
        }
        assert!((ens.feature_importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ens.feature_importance.iter().all(|v| *v >= 0.0));
        for s in ens.predict_scores(x.view()).unwrap() {
            assert!((0.0..=1.0).contains(&s));
            assert!(((s * 6.0).round() - s * 6.0).abs() < 1e-12);
        }
        let again = train(x.view(), &y, &cfg).unwrap();
        assert_eq!(again, ens);
    }

    #[test]
    fn zero_columns_get_zero_importance() {
        let (x, y) = noisy(3, 60, 6);
        let mut padded = Array2::zeros((60, 9));
        padded.slice_mut(ndarray::s![.., ..6]).assign(&x);
        let ens = train(padded.view(), &y, &RpConfig::new(5, 3, 2)).unwrap();
        assert!(ens.feature_importance[6..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vote_fraction_ties_and_unanimity() {
        assert_eq!(tune_alpha(&[1.0, 1.0, 0.0, 0.0], &[1, 1, 0, 0], 2), 0.5);
        let (x, y) = noisy(5, 40, 4);
        let mut ens = train(x.view(), &y, &RpConfig::new(2, 1, 2)).unwrap();
        ens.base_models[1] = ens.base_models[0].clone();
        ens.projections[1] = ens.projections[0].clone();
        let s = ens.predict_scores(x.view()).unwrap();
        assert!(s.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn errors() {
        let (x, y) = noisy(6, 30, 4);
        assert!(train(x.view(), &y, &RpConfig::new(2, 2, 5)).is_err());
        assert!(train(x.view(), &[1; 30], &RpConfig::new(2, 2, 2)).is_err());
        let ens = train(x.view(), &y, &RpConfig::new(2, 2, 2)).unwrap();
        assert!(ens.predict_scores(Array2::zeros((3, 5)).view()).is_err());
        let mut cfg = RpConfig::new(2, 2, 2);
        cfg.base = ModelSpec::new(Family::MlpRegressor);
        assert!(cfg.validate(Some(4)).is_err());
    }
}
