//! Synthetic cohorts with known ground truth.
//!
//! A latent per-patient risk factor shifts the log-mean of the informative
//! genes and the hazard of an exponential survival model. Microarray values
//! are gamma-distributed, RNA-seq values negative-binomial counts, both
//! driven by the same latent state. Optional subtypes add cluster structure
//! across all genes with a subtype-specific hazard offset, which is the
//! low-dimensional manifold the projection benchmarks rely on.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{ClinicalRecord, ExpressionMatrix, Scale};
use crate::error::{Error, Result};
use crate::rng::rng_for;

const STREAM_LATENT: u64 = 1;
const STREAM_MICROARRAY: u64 = 2;
const STREAM_RNASEQ: u64 = 3;
const STREAM_CLINICAL: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_genes: usize,
    /// The first `n_informative_genes` genes carry the risk signal.
    pub n_informative_genes: usize,
    pub seed: u64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub nb_dispersion: f64,
    /// Mean count of a gene at zero latent shift.
    pub nb_base_mean: f64,
    pub baseline_median_survival_months: f64,
    pub censoring_fraction_target: f64,
    /// Absolute log-scale loading of each informative gene (signs alternate).
    pub signal_strength: f64,
    /// Log-hazard per unit of the latent risk factor.
    pub risk_coefficient: f64,
    pub n_subtypes: usize,
    /// Standard deviation of subtype centroid offsets per gene (log scale).
    pub subtype_separation: f64,
    /// Log-hazard offset: +value for even subtypes, -value for odd ones.
    pub subtype_hazard: f64,
    pub age_mean: f64,
    pub age_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_genes: 200,
            n_informative_genes: 5,
            seed: 0,
            gamma_shape: 2.0,
            gamma_rate: 1.0,
            nb_dispersion: 0.2,
            nb_base_mean: 200.0,
            baseline_median_survival_months: 180.0,
            censoring_fraction_target: 0.446,
            signal_strength: 1.0,
            risk_coefficient: 1.0,
            n_subtypes: 0,
            subtype_separation: 0.0,
            subtype_hazard: 0.0,
            age_mean: 60.0,
            age_sd: 12.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.n_patients == 0 || self.n_genes == 0 {
            return bad("n_patients and n_genes must be > 0");
        }
        if self.n_informative_genes > self.n_genes {
            return bad("n_informative_genes exceeds n_genes");
        }
        let positive = [
            ("gamma_shape", self.gamma_shape),
            ("gamma_rate", self.gamma_rate),
            ("nb_dispersion", self.nb_dispersion),
            ("nb_base_mean", self.nb_base_mean),
            ("baseline_median_survival_months", self.baseline_median_survival_months),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.censoring_fraction_target) {
            return bad("censoring_fraction_target must be in [0,1]");
        }
        if self.n_subtypes == 1 {
            return bad("n_subtypes must be 0 (none) or >= 2");
        }
        Ok(())
    }
}

/// Ground-truth latent state shared by every generated table.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub patient_ids: Vec<String>,
    pub risk_factor: Vec<f64>,
    pub subtype: Vec<Option<usize>>,
    /// Log-hazard relative to baseline.
    pub risk: Vec<f64>,
    pub loadings: Vec<f64>,
    /// n_subtypes × n_genes log-scale offsets (empty when no subtypes).
    pub subtype_centroids: Array2<f64>,
    pub ages: Vec<f64>,
}

impl Latent {
    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    /// Log-scale mean shift for (patient, gene).
    pub fn shift(&self, patient: usize, gene: usize) -> f64 {
        let mut s = self.loadings[gene] * self.risk_factor[patient];
        if let Some(k) = self.subtype[patient] {
            s += self.subtype_centroids[(k, gene)];
        }
        s
    }

    /// Patients in `range`, keeping gene-level state.
    pub fn subset(&self, range: std::ops::Range<usize>) -> Latent {
        Latent {
            patient_ids: self.patient_ids[range.clone()].to_vec(),
            risk_factor: self.risk_factor[range.clone()].to_vec(),
            subtype: self.subtype[range.clone()].to_vec(),
            risk: self.risk[range.clone()].to_vec(),
            loadings: self.loadings.clone(),
            subtype_centroids: self.subtype_centroids.clone(),
            ages: self.ages[range].to_vec(),
        }
    }
}

fn patient_id(i: usize) -> String {
    format!("P{i:05}")
}

pub fn gen_latent(config: &SynthConfig) -> Result<Latent> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[STREAM_LATENT]);
    let n = config.n_patients;
    let informative = config.n_informative_genes > 0;

    let loadings: Vec<f64> = (0..config.n_genes)
        .map(|g| {
            if g < config.n_informative_genes {
                if g % 2 == 0 {
                    config.signal_strength
                } else {
                    -config.signal_strength
                }
            } else {
                0.0
            }
        })
        .collect();

    let mut centroids = Array2::zeros((config.n_subtypes, config.n_genes));
    for v in centroids.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * config.subtype_separation;
    }

    let mut risk_factor = Vec::with_capacity(n);
    let mut subtype = Vec::with_capacity(n);
    let mut risk = Vec::with_capacity(n);
    let mut ages = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.sample(StandardNormal);
        let u = if informative { u } else { 0.0 };
        let k = (config.n_subtypes >= 2).then(|| rng.random_range(0..config.n_subtypes));
        let mut r = config.risk_coefficient * u;
        if let Some(k) = k {
            r += if k % 2 == 0 {
                config.subtype_hazard
            } else {
                -config.subtype_hazard
            };
        }
        let z: f64 = rng.sample(StandardNormal);
        let age = (config.age_mean + config.age_sd * z).clamp(18.0, 100.0);
        risk_factor.push(u);
        subtype.push(k);
        risk.push(r);
        ages.push((age * 10.0).round() / 10.0);
    }

    Ok(Latent {
        patient_ids: (0..n).map(patient_id).collect(),
        risk_factor,
        subtype,
        risk,
        loadings,
        subtype_centroids: centroids,
        ages,
    })
}

fn check_latent(config: &SynthConfig, latent: &Latent) -> Result<()> {
    config.validate()?;
    if latent.loadings.len() != config.n_genes {
        return Err(Error::InvalidArgument(format!(
            "latent has {} genes, config {}",
            latent.loadings.len(),
            config.n_genes
        )));
    }
    Ok(())
}

fn gene_ids(n: usize) -> Vec<String> {
    (0..n).map(|g| format!("G{g:05}")).collect()
}

/// Gamma intensities; mean of gene g for patient i is `shape/rate * exp(shift)`.
pub fn gen_microarray(config: &SynthConfig, latent: &Latent) -> Result<ExpressionMatrix> {
    check_latent(config, latent)?;
    let mut rng = rng_for(config.seed, &[STREAM_MICROARRAY]);
    let gamma = Gamma::new(config.gamma_shape, 1.0 / config.gamma_rate)
        .map_err(|e| Error::Config(format!("gamma parameters: {e}")))?;
    let (n, m) = (latent.n_patients(), config.n_genes);
    let mut values = Array2::zeros((n, m));
    for i in 0..n {
        for g in 0..m {
            values[(i, g)] = gamma.sample(&mut rng) * latent.shift(i, g).exp();
        }
    }
    ExpressionMatrix::new(
        "microarray",
        latent.patient_ids.clone(),
        gene_ids(m),
        values,
        Scale::Linear,
    )
}

/// Negative-binomial counts (gamma–Poisson mixture), variance `mu + dispersion * mu^2`.
pub fn gen_rnaseq(config: &SynthConfig, latent: &Latent) -> Result<ExpressionMatrix> {
    check_latent(config, latent)?;
    let mut rng = rng_for(config.seed, &[STREAM_RNASEQ]);
    let phi = config.nb_dispersion;
    let (n, m) = (latent.n_patients(), config.n_genes);
    let mut values = Array2::zeros((n, m));
    for i in 0..n {
        for g in 0..m {
            let mu = config.nb_base_mean * latent.shift(i, g).exp();
            let lambda = Gamma::new(1.0 / phi, phi * mu)
                .map_err(|e| Error::Config(format!("nb parameters: {e}")))?
                .sample(&mut rng);
            values[(i, g)] = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
                    .floor()
            } else {
                0.0
            };
        }
    }
    ExpressionMatrix::new("rnaseq", latent.patient_ids.clone(), gene_ids(m), values, Scale::Linear)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patient_id: String,
    pub true_death_time: f64,
    pub censor_time: f64,
    pub true_risk: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalDraw {
    pub records: Vec<ClinicalRecord>,
    pub truth: Vec<GroundTruth>,
    /// Rate of the exponential censoring distribution found by calibration.
    pub censor_rate: f64,
}

pub fn gen_clinical(config: &SynthConfig, latent: &Latent) -> Result<Vec<ClinicalRecord>> {
    Ok(gen_clinical_with_truth(config, latent)?.records)
}

/// Exponential death times with rate `ln2/median * exp(risk)`; exponential
/// censoring whose rate is bisected until the realized censored fraction
/// is as close as possible to the target.
pub fn gen_clinical_with_truth(config: &SynthConfig, latent: &Latent) -> Result<ClinicalDraw> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[STREAM_CLINICAL]);
    let n = latent.n_patients();
    let base_rate = std::f64::consts::LN_2 / config.baseline_median_survival_months;
    let deaths: Vec<f64> = latent
        .risk
        .iter()
        .map(|r| {
            let e: f64 = rng.sample(Exp1);
            e / (base_rate * r.exp())
        })
        .collect();
    let unit_censor: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();

    let censored_fraction = |rate: f64| -> f64 {
        if rate <= 0.0 {
            return 0.0;
        }
        let c = deaths
            .iter()
            .zip(&unit_censor)
            .filter(|(d, e)| **e / rate < **d)
            .count();
        c as f64 / n as f64
    };

    let target = config.censoring_fraction_target;
    let rate = if target <= 0.0 {
        0.0
    } else {
        // bisection in log-rate; the realized fraction is monotone in the rate
        let (mut lo, mut hi) = ((1e-12f64).ln(), (1e12f64).ln());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if censored_fraction(mid.exp()) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (flo, fhi) = (censored_fraction(lo.exp()), censored_fraction(hi.exp()));
        if (flo - target).abs() <= (fhi - target).abs() {
            lo.exp()
        } else {
            hi.exp()
        }
    };

    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let censor = if rate > 0.0 {
            unit_censor[i] / rate
        } else {
            f64::INFINITY
        };
        let death = deaths[i];
        let event = death <= censor;
        records.push(ClinicalRecord {
            patient_id: latent.patient_ids[i].clone(),
            observed_time_months: death.min(censor),
            event,
            age_years: Some(latent.ages[i]),
            group_label: latent.subtype[i].map(|k| format!("IC{}", k + 1)),
        });
        truth.push(GroundTruth {
            patient_id: latent.patient_ids[i].clone(),
            true_death_time: death,
            censor_time: censor,
            true_risk: latent.risk[i],
        });
    }
    Ok(ClinicalDraw {
        records,
        truth,
        censor_rate: rate,
    })
}

pub fn write_ground_truth(truth: &[GroundTruth], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["patient_id", "true_death_time", "true_risk"])?;
    for t in truth {
        w.write_record([
            t.patient_id.clone(),
            t.true_death_time.to_string(),
            t.true_risk.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A complete synthetic cohort: both platforms over the same patients.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub latent: Latent,
    pub microarray: ExpressionMatrix,
    pub rnaseq: ExpressionMatrix,
    pub clinical: ClinicalDraw,
}

pub fn gen_cohort(config: &SynthConfig) -> Result<Cohort> {
    let latent = gen_latent(config)?;
    Ok(Cohort {
        microarray: gen_microarray(config, &latent)?,
        rnaseq: gen_rnaseq(config, &latent)?,
        clinical: gen_clinical_with_truth(config, &latent)?,
        latent,
    })
}

/// Two disjoint platform cohorts: the first `n_patients/2` patients measured on
/// microarray, the rest on RNA-seq, with one shared clinical table.
pub fn gen_two_platform(config: &SynthConfig) -> Result<(ExpressionMatrix, ExpressionMatrix, ClinicalDraw)> {
    let cohort = gen_cohort(config)?;
    let half = config.n_patients / 2;
    let take = |m: &ExpressionMatrix, rows: std::ops::Range<usize>, name: &str| -> Result<ExpressionMatrix> {
        let idx: Vec<usize> = rows.collect();
        ExpressionMatrix::new(
            name,
            idx.iter().map(|&i| m.patient_ids()[i].clone()).collect(),
            m.gene_ids().to_vec(),
            m.values().select(ndarray::Axis(0), &idx),
            m.scale(),
        )
    };
    let a = take(&cohort.microarray, 0..half, "microarray")?;
    let b = take(&cohort.rnaseq, half..config.n_patients, "rnaseq")?;
    Ok((a, b, cohort.clinical))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        crate::stats::ks_two_sample(a, b).0
    }

    #[test]
    fn no_informative_genes_means_constant_risk() {
        let cfg = SynthConfig {
            n_informative_genes: 0,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        assert!(l.loadings.iter().all(|v| *v == 0.0));
        assert!(l.risk.iter().all(|r| *r == l.risk[0]));
    }

    #[test]
    fn generators_are_deterministic_and_seed_sensitive() {
        let cfg = SynthConfig {
            n_patients: 50,
            n_genes: 20,
            ..Default::default()
        };
        let a = gen_cohort(&cfg).unwrap();
        let b = gen_cohort(&cfg).unwrap();
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.microarray, b.microarray);
        assert_eq!(a.rnaseq, b.rnaseq);
        assert_eq!(a.clinical, b.clinical);
        let c = gen_cohort(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.latent.risk_factor, c.latent.risk_factor);
        assert_ne!(a.microarray, c.microarray);
    }

    #[test]
    fn exactly_n_informative_loadings() {
        let cfg = SynthConfig {
            n_informative_genes: 7,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        assert_eq!(l.loadings.iter().filter(|v| **v != 0.0).count(), 7);
    }

    #[test]
    fn microarray_gamma_mean() {
        let cfg = SynthConfig {
            n_patients: 2000,
            n_genes: 10,
            n_informative_genes: 0,
            gamma_shape: 2.0,
            gamma_rate: 1.0,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        let m = gen_microarray(&cfg, &l).unwrap();
        let mean = m.values().mean().unwrap();
        assert!((mean - 2.0).abs() < 0.05 * 2.0, "pooled mean {mean}");
        assert!(m.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_loadings_make_informative_genes_indistinguishable() {
        let cfg = SynthConfig {
            n_patients: 2000,
            n_genes: 10,
            n_informative_genes: 3,
            signal_strength: 0.0,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        let m = gen_microarray(&cfg, &l).unwrap();
        let inf = m.values().column(0).to_vec();
        let non = m.values().column(9).to_vec();
        let (_, p) = crate::stats::ks_two_sample(&inf, &non);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn rnaseq_counts_are_overdispersed_integers() {
        let cfg = SynthConfig {
            n_patients: 2000,
            n_genes: 5,
            n_informative_genes: 0,
            nb_base_mean: 20.0,
            nb_dispersion: 0.3,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        let m = gen_rnaseq(&cfg, &l).unwrap();
        assert!(m.values().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        let mean = m.values().mean().unwrap();
        let var = m.values().var(1.0);
        assert!(var > mean, "var {var} mean {mean}");
        assert_eq!(m, gen_rnaseq(&cfg, &l).unwrap());
    }

    #[test]
    fn clinical_censoring_calibration() {
        let cfg = SynthConfig {
            n_patients: 3000,
            n_genes: 5,
            censoring_fraction_target: 0.0,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        let recs = gen_clinical(&cfg, &l).unwrap();
        assert!(recs.iter().all(|r| r.event));

        let cfg = SynthConfig {
            censoring_fraction_target: 0.446,
            ..cfg
        };
        let draw = gen_clinical_with_truth(&cfg, &l).unwrap();
        let censored = draw.records.iter().filter(|r| !r.event).count() as f64 / 3000.0;
        assert!((0.396..=0.496).contains(&censored), "censored {censored}");
        for (r, t) in draw.records.iter().zip(&draw.truth) {
            assert_eq!(r.observed_time_months, t.true_death_time.min(t.censor_time));
            assert_eq!(r.event, t.true_death_time <= t.censor_time);
        }
    }

    #[test]
    fn high_risk_decile_dies_sooner() {
        let cfg = SynthConfig {
            n_patients: 3000,
            n_genes: 5,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        let recs = gen_clinical(&cfg, &l).unwrap();
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| l.risk[a].total_cmp(&l.risk[b]));
        let decile = recs.len() / 10;
        let mean = |idx: &[usize]| idx.iter().map(|&i| recs[i].observed_time_months).sum::<f64>() / idx.len() as f64;
        let low = mean(&order[..decile]);
        let high = mean(&order[order.len() - decile..]);
        assert!(high < low, "high-risk mean {high} vs low-risk mean {low}");
    }

    #[test]
    fn informative_gene_is_recoverable() {
        let cfg = SynthConfig::default();
        let cohort = gen_cohort(&cfg).unwrap();
        let mut best = 0.0f64;
        for g in 0..cfg.n_genes {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for (i, r) in cohort.clinical.records.iter().enumerate() {
                if let Some(y) = crate::survival::make_label(r, 60.0).unwrap().as_binary() {
                    scores.push(cohort.microarray.values()[(i, g)]);
                    labels.push(y);
                }
            }
            let a = crate::eval::auc(&scores, &labels).unwrap();
            if g < cfg.n_informative_genes {
                best = best.max(a.max(1.0 - a));
            }
        }
        assert!(best > 0.6, "best informative AUC {best}");
    }

    #[test]
    fn subtype_centroids_shift_all_genes() {
        let cfg = SynthConfig {
            n_patients: 400,
            n_genes: 50,
            n_subtypes: 4,
            subtype_separation: 1.0,
            ..Default::default()
        };
        let l = gen_latent(&cfg).unwrap();
        assert!(l.subtype.iter().all(|k| k.is_some_and(|k| k < 4)));
        let m = gen_microarray(&cfg, &l).unwrap();
        let a: Vec<f64> = (0..400)
            .filter(|&i| l.subtype[i] == Some(0))
            .map(|i| m.values()[(i, 10)].ln())
            .collect();
        let b: Vec<f64> = (0..400)
            .filter(|&i| l.subtype[i] == Some(1))
            .map(|i| m.values()[(i, 10)].ln())
            .collect();
        let expected = (l.subtype_centroids[(0, 10)] - l.subtype_centroids[(1, 10)]).abs();
        if expected > 0.5 {
            assert!(ks_statistic(&a, &b) > 0.1);
        }
    }
}
