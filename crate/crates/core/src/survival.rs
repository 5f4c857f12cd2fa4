//! Horizon labels from censored follow-up, class priors, and Kaplan–Meier curves.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataio::{ClinicalRecord, FeatureMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurvivalLabel {
    /// y = 0: death observed at or before the horizon.
    Died,
    /// y = 1: observed beyond the horizon.
    Survived,
    /// Lost to follow-up before the horizon; excluded from training.
    Dropped,
}

impl SurvivalLabel {
    pub fn as_binary(self) -> Option<u8> {
        match self {
            SurvivalLabel::Died => Some(0),
            SurvivalLabel::Survived => Some(1),
            SurvivalLabel::Dropped => None,
        }
    }
}

/// `C > t` survived; otherwise died if the death was observed, else dropped.
/// `C == t` falls in the second branch.
pub fn make_label(record: &ClinicalRecord, horizon_months: f64) -> Result<SurvivalLabel> {
    if !(horizon_months > 0.0) || !horizon_months.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "horizon must be > 0 months, got {horizon_months}"
        )));
    }
    Ok(if record.observed_time_months > horizon_months {
        SurvivalLabel::Survived
    } else if record.event {
        SurvivalLabel::Died
    } else {
        SurvivalLabel::Dropped
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub p0: f64,
    pub p1: f64,
}

/// Features and labels for the patients retained at one horizon.
///
/// `times` and `events` keep the follow-up of the retained rows so that the
/// time regressor can train on the same split as the classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<u8>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub horizon_months: f64,
}

impl LabeledDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            events: rows.iter().map(|&r| self.events[r]).collect(),
            horizon_months: self.horizon_months,
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), self.labels.len());
        Self { labels, ..self.clone() }
    }

    pub fn priors(&self) -> ClassPriors {
        priors(&self.labels)
    }
}

pub fn priors(labels: &[u8]) -> ClassPriors {
    let n = labels.len() as f64;
    let ones = labels.iter().filter(|&&y| y == 1).count() as f64;
    let p1 = ones / n;
    ClassPriors { p0: 1.0 - p1, p1 }
}

/// Label every feature row at `horizon_months` and drop patients lost before it.
pub fn make_labeled_dataset(
    features: &FeatureMatrix,
    clinical: &[ClinicalRecord],
    horizon_months: f64,
) -> Result<(LabeledDataset, ClassPriors)> {
    let by_id: HashMap<&str, &ClinicalRecord> = clinical.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    for (i, pid) in features.patient_ids().iter().enumerate() {
        let rec = by_id
            .get(pid.as_str())
            .ok_or_else(|| Error::Data(format!("patient {pid:?} has features but no clinical record")))?;
        if let Some(y) = make_label(rec, horizon_months)?.as_binary() {
            rows.push(i);
            labels.push(y);
            times.push(rec.observed_time_months);
            events.push(rec.event);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "every patient was dropped at horizon {horizon_months} months"
        )));
    }
    let data = LabeledDataset {
        features: features.select_rows(&rows),
        labels,
        times,
        events,
        horizon_months,
    };
    let p = data.priors();
    Ok((data, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub group_label: Option<String>,
    pub event_times: Vec<f64>,
    pub survival_probabilities: Vec<f64>,
    pub at_risk_counts: Vec<usize>,
}

/// Product-limit estimate; deaths at a time are processed before censorings at that time.
///
/// Between two censorings the factors `(r - d) / r` telescope, so the running
/// product is kept as `base * (r - d) / r_block` with one division per step.
/// With no censoring this is exactly the empirical `#(T > t) / n`.
fn product_limit(records: &[&ClinicalRecord], group_label: Option<String>) -> SurvivalCurve {
    let mut times: Vec<(f64, bool)> = records.iter().map(|r| (r.observed_time_months, r.event)).collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut curve = SurvivalCurve {
        group_label,
        event_times: Vec::new(),
        survival_probabilities: Vec::new(),
        at_risk_counts: Vec::new(),
    };
    let mut at_risk = times.len();
    let mut base = 1.0f64;
    let mut block_start = at_risk;
    let mut i = 0;
    while i < times.len() {
        let t = times[i].0;
        let mut j = i;
        let mut deaths = 0;
        while j < times.len() && times[j].0 == t {
            deaths += usize::from(times[j].1);
            j += 1;
        }
        let censored = (j - i) - deaths;
        if deaths > 0 {
            curve.event_times.push(t);
            curve
                .survival_probabilities
                .push(base * (at_risk - deaths) as f64 / block_start as f64);
            curve.at_risk_counts.push(at_risk);
        }
        if censored > 0 {
            base = base * (at_risk - deaths) as f64 / block_start as f64;
            block_start = at_risk - deaths - censored;
        }
        at_risk -= deaths + censored;
        i = j;
    }
    curve
}

pub fn kaplan_meier(records: &[ClinicalRecord], group_by: bool) -> Result<Vec<SurvivalCurve>> {
    if records.is_empty() {
        return Err(Error::Data("kaplan_meier needs at least one record".into()));
    }
    if !group_by {
        let all: Vec<&ClinicalRecord> = records.iter().collect();
        return Ok(vec![product_limit(&all, None)]);
    }
    let mut groups: BTreeMap<Option<&str>, Vec<&ClinicalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.group_label.as_deref()).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(label, recs)| product_limit(&recs, label.map(str::to_owned)))
        .collect())
}

/// Right-continuous step lookup; 1.0 before the first event time.
pub fn survival_at(curve: &SurvivalCurve, t: f64) -> f64 {
    let idx = curve.event_times.partition_point(|&u| u <= t);
    if idx == 0 {
        1.0
    } else {
        curve.survival_probabilities[idx - 1]
    }
}

/// Write `patient_id,label,time_months,event` for every retained row.
pub fn write_labels(data: &LabeledDataset, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["patient_id", "label", "time_months", "event"])?;
    for (i, id) in data.features.patient_ids().iter().enumerate() {
        w.write_record([
            id.clone(),
            data.labels[i].to_string(),
            data.times[i].to_string(),
            u8::from(data.events[i]).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub patient_id: String,
    pub label: u8,
    pub time_months: f64,
    pub event: u8,
}

pub fn load_labels(path: impl AsRef<std::path::Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: LabelRow = rec?;
        if row.label > 1 || row.event > 1 {
            return Err(Error::Data(format!(
                "label and event must be 0/1 for {:?}",
                row.patient_id
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Rows of `features` that have a label, in feature order.
pub fn attach_labels(features: &FeatureMatrix, labels: &[LabelRow], horizon_months: f64) -> Result<LabeledDataset> {
    let by_id: HashMap<&str, &LabelRow> = labels.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let mut rows = Vec::new();
    let mut data = LabeledDataset {
        features: features.clone(),
        labels: Vec::new(),
        times: Vec::new(),
        events: Vec::new(),
        horizon_months,
    };
    for (i, id) in features.patient_ids().iter().enumerate() {
        if let Some(r) = by_id.get(id.as_str()) {
            rows.push(i);
            data.labels.push(r.label);
            data.times.push(r.time_months);
            data.events.push(r.event == 1);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("no feature row has a label".into()));
    }
    data.features = features.select_rows(&rows);
    Ok(data)
}

/// Write `group,time,survival,at_risk` rows for each curve.
pub fn write_km(curves: &[SurvivalCurve], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["group", "time", "survival", "at_risk"])?;
    for c in curves {
        let g = c.group_label.clone().unwrap_or_default();
        for k in 0..c.event_times.len() {
            w.write_record([
                g.clone(),
                c.event_times[k].to_string(),
                c.survival_probabilities[k].to_string(),
                c.at_risk_counts[k].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rec(t: f64, event: bool) -> ClinicalRecord {
        ClinicalRecord {
            patient_id: format!("p{t}-{event}"),
            observed_time_months: t,
            event,
            age_years: None,
            group_label: None,
        }
    }

    #[test]
    fn label_branches() {
        assert_eq!(make_label(&rec(70.0, true), 60.0).unwrap(), SurvivalLabel::Survived);
        assert_eq!(make_label(&rec(70.0, false), 60.0).unwrap(), SurvivalLabel::Survived);
        assert_eq!(make_label(&rec(50.0, true), 60.0).unwrap(), SurvivalLabel::Died);
        assert_eq!(make_label(&rec(50.0, false), 60.0).unwrap(), SurvivalLabel::Dropped);
        assert_eq!(make_label(&rec(60.0, true), 60.0).unwrap(), SurvivalLabel::Died);
        assert_eq!(make_label(&rec(60.0, false), 60.0).unwrap(), SurvivalLabel::Dropped);
        assert!(make_label(&rec(1.0, true), 0.0).is_err());
        assert!(make_label(&rec(1.0, true), -5.0).is_err());
    }

    fn features(n: usize) -> FeatureMatrix {
        FeatureMatrix::new(
            (0..n).map(|i| format!("p{i}")).collect(),
            vec!["x".into()],
            Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
        )
        .unwrap()
    }

    #[test]
    fn labeled_dataset_drops_and_priors() {
        let f = features(5);
        let clinical: Vec<ClinicalRecord> = [(70.0, true), (80.0, false), (90.0, true), (10.0, true), (10.0, false)]
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| ClinicalRecord {
                patient_id: format!("p{i}"),
                ..rec(t, e)
            })
            .collect();
        let (d, p) = make_labeled_dataset(&f, &clinical, 60.0).unwrap();
        assert_eq!(d.labels, vec![1, 1, 1, 0]);
        assert_eq!(d.features.patient_ids(), &["p0", "p1", "p2", "p3"]);
        assert_eq!(p, ClassPriors { p0: 0.25, p1: 0.75 });

        let all_lost: Vec<ClinicalRecord> = (0..5)
            .map(|i| ClinicalRecord {
                patient_id: format!("p{i}"),
                ..rec(1.0, false)
            })
            .collect();
        assert!(make_labeled_dataset(&f, &all_lost, 60.0).is_err());
    }

    #[test]
    fn all_survive_priors() {
        assert_eq!(priors(&[1, 1, 1]), ClassPriors { p0: 0.0, p1: 1.0 });
    }

    #[test]
    fn km_no_censoring() {
        let recs: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&t| rec(t, true)).collect();
        let c = &kaplan_meier(&recs, false).unwrap()[0];
        assert_eq!(c.event_times, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.survival_probabilities, vec![0.75, 0.5, 0.25, 0.0]);
        assert_eq!(c.at_risk_counts, vec![4, 3, 2, 1]);
        assert_eq!(survival_at(c, 0.0), 1.0);
        assert_eq!(survival_at(c, 2.5), 0.5);
        assert_eq!(survival_at(c, 100.0), 0.0);
    }

    #[test]
    fn km_with_censoring() {
        let recs = vec![rec(1.0, true), rec(2.0, false), rec(3.0, true)];
        let c = &kaplan_meier(&recs, false).unwrap()[0];
        assert_eq!(c.event_times, vec![1.0, 3.0]);
        assert!((c.survival_probabilities[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.survival_probabilities[1], 0.0);
    }

    #[test]
    fn km_all_censored() {
        let recs = vec![rec(1.0, false), rec(2.0, false)];
        let c = &kaplan_meier(&recs, false).unwrap()[0];
        assert!(c.event_times.is_empty());
        assert_eq!(survival_at(c, 5.0), 1.0);
    }

    #[test]
    fn km_groups_and_errors() {
        let mut a = rec(1.0, true);
        a.group_label = Some("IC1".into());
        let mut b = rec(2.0, true);
        b.group_label = Some("IC2".into());
        let curves = kaplan_meier(&[a, b], true).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].group_label.as_deref(), Some("IC1"));
        assert!(kaplan_meier(&[], false).is_err());
    }
}
