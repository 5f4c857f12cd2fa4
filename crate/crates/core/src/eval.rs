//! ROC/AUC, stratified k-fold cross-validation and the model × data report.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Estimator;
use crate::rng::rng_for;
use crate::stats;
use crate::survival::LabeledDataset;

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    if labels.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&v| v == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let ranks = crate::normalize::average_ranks(ndarray::ArrayView1::from(scores));
    // ranks are 0-based; shift to 1-based for the rank-sum identity
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r + 1.0)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Descending; the first entry is +inf for the (0, 0) corner.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

/// One point per distinct score, predicting positive for `score >= threshold`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    Ok(curve)
}

pub fn trapezoid_area(curve: &RocCurve) -> f64 {
    curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[0] + t[1]) / 2.0)
        .sum()
}

pub fn write_roc(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for ((t, f), p) in curve.thresholds.iter().zip(&curve.fpr).zip(&curve.tpr) {
        w.write_record([t.to_string(), f.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub k_folds: usize,
    #[serde(default = "yes")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            k_folds: 5,
            stratified: true,
            seed: 0,
        }
    }
}

/// Shuffle each class and deal it round-robin into the folds, continuing
/// where the previous class stopped so fold sizes stay balanced.
pub fn stratified_kfold(labels: &[u8], plan: &CvPlan) -> Result<Vec<Vec<usize>>> {
    let k = plan.k_folds;
    if k < 2 {
        return Err(Error::Config(format!("k_folds must be >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} folds for {} samples",
            labels.len()
        )));
    }
    let groups: Vec<Vec<usize>> = if plan.stratified {
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
        let minority = pos.len().min(neg.len());
        if k > minority {
            return Err(Error::InvalidArgument(format!(
                "{k} stratified folds but the minority class has {minority} samples"
            )));
        }
        vec![neg, pos]
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (c, mut idx) in groups.into_iter().enumerate() {
        idx.shuffle(&mut rng_for(plan.seed, &[0x464f_4c44, c as u64]));
        for (i, &row) in idx.iter().enumerate() {
            folds[(offset + i) % k].push(row);
        }
        offset += idx.len();
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub data: String,
    pub fold: usize,
    pub auc: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub model: String,
    pub data: String,
    pub mean: f64,
    pub std: f64,
    pub n_folds: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// Mean and sample standard deviation of fold AUCs per (model, data), in first-seen order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            let key = (r.model.as_str(), r.data.as_str());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(model, data)| {
                let rows: Vec<&EvalRow> = self
                    .rows
                    .iter()
                    .filter(|r| r.model == model && r.data == data)
                    .collect();
                let aucs: Vec<f64> = rows.iter().map(|r| r.auc).collect();
                Aggregate {
                    model: model.to_owned(),
                    data: data.to_owned(),
                    mean: stats::mean(&aucs),
                    std: stats::std_dev(&aucs),
                    n_folds: rows.len(),
                    n_test: rows.iter().map(|r| r.n_test).sum(),
                }
            })
            .collect()
    }

    pub fn mean_auc(&self) -> f64 {
        let aucs: Vec<f64> = self.rows.iter().map(|r| r.auc).collect();
        stats::mean(&aucs)
    }

    /// `model,data,fold,auc,n_test`: fold rows, then `mean` and `std` rows per pair.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        w.write_record(["model", "data", "fold", "auc", "n_test"])?;
        for r in &self.rows {
            w.write_record([
                &r.model,
                &r.data,
                &r.fold.to_string(),
                &r.auc.to_string(),
                &r.n_test.to_string(),
            ])?;
        }
        for a in self.aggregates() {
            w.write_record([&a.model, &a.data, "mean", &a.mean.to_string(), &a.n_test.to_string()])?;
            w.write_record([&a.model, &a.data, "std", &a.std.to_string(), &a.n_test.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads fold rows back from a report CSV, skipping aggregate rows.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(Error::Data(format!("{}: report rows need 5 columns", path.display())));
            }
            let Ok(fold) = rec[2].parse::<usize>() else { continue };
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number {s:?} in report")))
            };
            rows.push(EvalRow {
                model: rec[0].to_owned(),
                data: rec[1].to_owned(),
                fold,
                auc: parse(&rec[3])?,
                n_test: rec[4]
                    .parse()
                    .map_err(|_| Error::Data(format!("bad n_test {:?} in report", &rec[4])))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Per-fold hook applied to (fold, train, test) before fitting; used for
/// fold-internal preprocessing.
pub type FoldTransform<'a> =
    dyn Fn(usize, &LabeledDataset, &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> + Sync + 'a;

pub fn cross_validate(
    estimator: &Estimator,
    data: &LabeledDataset,
    plan: &CvPlan,
    data_desc: &str,
) -> Result<EvalReport> {
    cross_validate_with(estimator, data, plan, data_desc, None)
}

pub fn cross_validate_with(
    estimator: &Estimator,
    data: &LabeledDataset,
    plan: &CvPlan,
    data_desc: &str,
    transform: Option<&FoldTransform<'_>>,
) -> Result<EvalReport> {
    estimator.validate()?;
    let folds = stratified_kfold(&data.labels, plan)?;
    let model = estimator.family_name();
    let rows = folds
        .par_iter()
        .enumerate()
        .map(|(f, test_idx)| -> Result<EvalRow> {
            let train_idx: Vec<usize> = (0..data.n_rows())
                .filter(|i| test_idx.binary_search(i).is_err())
                .collect();
            let mut train = data.select_rows(&train_idx);
            let mut test = data.select_rows(test_idx);
            if let Some(t) = transform {
                (train, test) = t(f, &train, &test)?;
            }
            let fitted = estimator.fit(&train)?;
            let scores = fitted.predict_scores(test.features.values().view())?;
            Ok(EvalRow {
                model: model.clone(),
                data: data_desc.to_owned(),
                fold: f,
                auc: auc(&scores, &test.labels)?,
                n_test: test_idx.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[3.0; 7], &[1, 0, 1, 0, 0, 1, 1]).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[1, 1]).is_err());
        assert!(auc(&[1.0], &[1, 0]).is_err());
    }

    #[test]
    fn roc_shapes() {
        let c = roc_curve(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap();
        assert!(c.fpr.iter().zip(&c.tpr).any(|(f, t)| *f == 0.0 && *t == 1.0));
        let c = roc_curve(&[1.0; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.fpr, vec![0.0, 1.0]);
        assert_eq!(c.tpr, vec![0.0, 1.0]);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..120).prop_flat_map(|n| {
            (
                proptest::collection::vec((0i32..15).prop_map(|v| v as f64 / 3.0), n),
                proptest::collection::vec(0u8..2, n),
            )
                .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn auc_matches_pair_count_and_trapezoid((s, l) in instance()) {
            let a = auc(&s, &l).unwrap();
            prop_assert!((a - pair_count(&s, &l)).abs() < 1e-12);
            let c = roc_curve(&s, &l).unwrap();
            prop_assert!((a - trapezoid_area(&c)).abs() < 1e-12);
            prop_assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
        }

        #[test]
        fn flipped_labels_complement((s, l) in instance()) {
            let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
            prop_assert_eq!(auc(&s, &l).unwrap() + auc(&s, &flipped).unwrap(), 1.0);
        }

        #[test]
        fn monotone_transform_invariance((s, l) in instance()) {
            let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        }

        #[test]
        fn folds_partition_and_are_proportional(
            n_pos in 3usize..40, n_neg in 3usize..40, k in 2usize..4, seed in any::<u64>()
        ) {
            let labels: Vec<u8> = (0..n_pos + n_neg).map(|i| u8::from(i < n_pos)).collect();
            let plan = CvPlan { k_folds: k, stratified: true, seed };
            let folds = stratified_kfold(&labels, &plan).unwrap();
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for f in &folds {
                let p = f.iter().filter(|&&i| labels[i] == 1).count() as f64;
                let q = f.len() as f64 - p;
                prop_assert!((p - n_pos as f64 / k as f64).abs() <= 1.0);
                prop_assert!((q - n_neg as f64 / k as f64).abs() <= 1.0);
            }
            prop_assert_eq!(folds, stratified_kfold(&labels, &plan).unwrap());
        }
    }

    #[test]
    fn fold_examples() {
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i < 10)).collect();
        let plan = CvPlan {
            k_folds: 2,
            stratified: true,
            seed: 1,
        };
        for f in stratified_kfold(&labels, &plan).unwrap() {
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 5);
            assert_eq!(f.len(), 10);
        }
        let skewed: Vec<u8> = (0..10).map(|i| u8::from(i < 9)).collect();
        assert!(stratified_kfold(&skewed, &plan).is_err());
    }

    #[test]
    fn report_round_trip() {
        let report = EvalReport {
            rows: (0..3)
                .map(|f| EvalRow {
                    model: "gaussian_nb".into(),
                    data: "RNA raw age".into(),
                    fold: f,
                    auc: 0.5 + f as f64 / 10.0,
                    n_test: 10,
                })
                .collect(),
        };
        let agg = report.aggregates();
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.6).abs() < 1e-12);
        assert!((agg[0].std - 0.1).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        assert_eq!(EvalReport::read_csv(&p).unwrap(), report);
    }
}
