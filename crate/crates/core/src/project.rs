//! Exact O(N²) t-SNE to any output dimension, plus the age-augmented feature set.
//!
//! Points are processed in a canonical order keyed by a hash of the patient
//! id, and each point's starting position is drawn from its own id-keyed
//! stream, so permuting the input rows permutes the output rows and nothing else.

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{ClinicalRecord, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_for};

const MOMENTUM_SWITCH_ITER: usize = 250;
const BRACKET_STEPS: usize = 64;
const BISECTION_STEPS: usize = 200;
const PERPLEXITY_TOL: f64 = 1e-5;
const INIT_SD: f64 = 1e-4;
const TRACE_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub output_dims: usize,
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            output_dims: 2,
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn with_dims(output_dims: usize) -> Self {
        Self {
            output_dims,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.output_dims == 0 || self.iterations == 0 {
            return Err(Error::Config("t-SNE output_dims and iterations must be >= 1".into()));
        }
        if !(self.perplexity > 0.0) || !(self.learning_rate > 0.0) || !(self.early_exaggeration_factor >= 1.0) {
            return Err(Error::Config(
                "t-SNE needs perplexity > 0, learning_rate > 0, early_exaggeration_factor >= 1".into(),
            ));
        }
        check_perplexity(n_points, self.perplexity)
    }
}

fn check_perplexity(n_points: usize, perplexity: f64) -> Result<()> {
    if n_points < 4 {
        return Err(Error::InvalidArgument(format!(
            "t-SNE needs >= 4 points, got {n_points}"
        )));
    }
    if !(perplexity > 0.0) || perplexity >= (n_points - 1) as f64 / 3.0 {
        return Err(Error::Config(format!(
            "perplexity {perplexity} must be in (0, {}) for {n_points} points",
            (n_points - 1) as f64 / 3.0
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub patient_ids: Vec<String>,
    pub coords: Array2<f64>,
    /// (iteration, KL divergence) at the recorded iterations.
    pub kl_trace: Vec<(usize, f64)>,
    /// Index into `kl_trace` of the entry recorded when exaggeration ended.
    pub exaggeration_end: Option<usize>,
}

impl Embedding {
    pub fn to_features(&self) -> FeatureMatrix {
        let names = (0..self.coords.ncols()).map(|k| format!("tsne_{k}")).collect();
        FeatureMatrix::new(self.patient_ids.clone(), names, self.coords.clone()).expect("embedding shape is consistent")
    }
}

fn squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    x.row(i)
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    Array2::from_shape_vec((n, n), rows.concat()).expect("n x n")
}

/// Row of conditional probabilities `p_{j|i}` for precision `beta` and its
/// natural-log entropy.
fn conditional_row(dist: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dist
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-beta * (d - dmin)).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        if j != i {
            weighted += *v * (dist[j] - dmin);
            *v /= z;
        }
    }
    (p, z.ln() + beta * weighted / z)
}

fn calibrate_row(dist: &[f64], i: usize, perplexity: f64) -> Result<Vec<f64>> {
    let target = perplexity.ln();
    let close = |h: f64| (h.exp() - perplexity).abs() < PERPLEXITY_TOL;
    let mut beta = 1.0;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let fail = || Error::Numerical(format!("perplexity bisection failed for point {i} (duplicate points?)"));
    for _ in 0..BRACKET_STEPS {
        let (p, h) = conditional_row(dist, i, beta);
        if close(h) {
            return Ok(p);
        }
        if h > target {
            lo = beta;
        } else {
            hi = beta;
        }
        if hi.is_finite() && lo > 0.0 {
            break;
        }
        beta = if hi.is_finite() { beta / 2.0 } else { beta * 2.0 };
    }
    if !hi.is_finite() || lo == 0.0 {
        return Err(fail());
    }
    for _ in 0..BISECTION_STEPS {
        beta = 0.5 * (lo + hi);
        let (p, h) = conditional_row(dist, i, beta);
        if close(h) {
            return Ok(p);
        }
        if h > target {
            lo = beta;
        } else {
            hi = beta;
        }
    }
    Err(fail())
}

/// Conditional matrix with rows `p_{j|i}` calibrated to `perplexity`.
pub fn conditional_affinities(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = x.nrows();
    check_perplexity(n, perplexity)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("t-SNE input must be finite".into()));
    }
    let d = squared_distances(x);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| calibrate_row(d.row(i).as_slice().expect("row-major"), i, perplexity))
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_vec((n, n), rows.concat()).expect("n x n"))
}

/// Joint affinities `(p_{j|i} + p_{i|j}) / 2N`.
pub fn symmetrize(conditional: &Array2<f64>) -> Array2<f64> {
    let n = conditional.nrows() as f64;
    (conditional + &conditional.t()) / (2.0 * n)
}

pub fn input_affinities_raw(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>> {
    Ok(symmetrize(&conditional_affinities(x, perplexity)?))
}

pub fn input_affinities(features: &FeatureMatrix, perplexity: f64) -> Result<Array2<f64>> {
    input_affinities_raw(features.values().view(), perplexity)
}

/// Student-t kernel `(1 + |y_i - y_j|^2)^-1` with zero diagonal, and its total.
fn student_kernel(y: ArrayView2<'_, f64>) -> (Array2<f64>, f64) {
    let mut w = squared_distances(y);
    w.mapv_inplace(|d| 1.0 / (1.0 + d));
    w.diag_mut().fill(0.0);
    let row_sums: Vec<f64> = w.axis_iter(Axis(0)).map(|r| r.sum()).collect();
    (w, row_sums.iter().sum())
}

pub fn kl_divergence(p: &Array2<f64>, coords: ArrayView2<'_, f64>) -> f64 {
    let (w, z) = student_kernel(coords);
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            kl += pij * (pij / (w[(i, j)] / z)).ln();
        }
    }
    kl.max(0.0)
}

/// `dKL/dy_i = 4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j)`.
pub fn kl_gradient(p: &Array2<f64>, coords: ArrayView2<'_, f64>) -> Array2<f64> {
    let (w, z) = student_kernel(coords);
    gradient_from_kernel(p, coords, &w, z, 1.0)
}

fn gradient_from_kernel(
    p: &Array2<f64>,
    y: ArrayView2<'_, f64>,
    w: &Array2<f64>,
    z: f64,
    exaggeration: f64,
) -> Array2<f64> {
    let (n, d) = y.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = vec![0.0; d];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let wij = w[(i, j)];
                let f = 4.0 * (exaggeration * p[(i, j)] - wij / z) * wij;
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += f * (y[(i, k)] - y[(j, k)]);
                }
            }
            g
        })
        .collect();
    Array2::from_shape_vec((n, d), rows.concat()).expect("n x d")
}

fn canonical_order(ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| (hash_str(&ids[a]), &ids[a]).cmp(&(hash_str(&ids[b]), &ids[b])));
    order
}

pub fn tsne(features: &FeatureMatrix, config: &TsneConfig) -> Result<Embedding> {
    let n = features.n_rows();
    config.validate(n)?;
    let ids = features.patient_ids();
    let order = canonical_order(ids);
    let x = features.values().select(Axis(0), &order);
    let p = input_affinities_raw(x.view(), config.perplexity)?;

    let d = config.output_dims;
    let normal = Normal::new(0.0, INIT_SD).expect("valid sd");
    let mut y = Array2::zeros((n, d));
    for (row, &orig) in order.iter().enumerate() {
        let mut rng = rng_for(config.seed, &[hash_str(&ids[orig])]);
        for k in 0..d {
            y[(row, k)] = normal.sample(&mut rng);
        }
    }

    let mut update: Array2<f64> = Array2::zeros((n, d));
    let mut gains: Array2<f64> = Array2::ones((n, d));
    let mut trace = Vec::new();
    let mut exaggeration_end = None;
    for it in 0..config.iterations {
        let exaggerating = it < config.early_exaggeration_iters;
        let exaggeration = if exaggerating {
            config.early_exaggeration_factor
        } else {
            1.0
        };
        let (w, z) = student_kernel(y.view());
        let grad = gradient_from_kernel(&p, y.view(), &w, z, exaggeration);
        let momentum = if it < MOMENTUM_SWITCH_ITER { 0.5 } else { 0.8 };
        ndarray::Zip::from(&mut gains)
            .and(&grad)
            .and(&update)
            .for_each(|g, &dg, &u| {
                *g = if (dg > 0.0) != (u > 0.0) { *g + 0.2 } else { *g * 0.8 };
                *g = g.max(0.01);
            });
        ndarray::Zip::from(&mut update)
            .and(&gains)
            .and(&grad)
            .for_each(|u, &g, &dg| *u = momentum * *u - config.learning_rate * g * dg);
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("n >= 4");
        y -= &mean;

        let done = it + 1;
        let ends_exaggeration = done == config.early_exaggeration_iters;
        if done % TRACE_EVERY == 0 || ends_exaggeration || done == config.iterations {
            trace.push((done, kl_divergence(&p, y.view())));
            if ends_exaggeration {
                exaggeration_end = Some(trace.len() - 1);
            }
        }
    }

    let mut coords = Array2::zeros((n, d));
    for (row, &orig) in order.iter().enumerate() {
        coords.row_mut(orig).assign(&y.row(row));
    }
    Ok(Embedding {
        patient_ids: ids.to_vec(),
        coords,
        kl_trace: trace,
        exaggeration_end,
    })
}

/// t-SNE features `tsne_0..tsne_{d-1}` followed by the patient's age.
pub fn project_with_age(
    features: &FeatureMatrix,
    clinical: &[ClinicalRecord],
    config: &TsneConfig,
) -> Result<FeatureMatrix> {
    let ages = ages_for(features.patient_ids(), clinical)?;
    let emb = tsne(features, config)?;
    append_age(&emb.to_features(), &ages)
}

/// Embedding coordinates followed by the patient's age.
pub fn embedding_with_age(emb: &Embedding, clinical: &[ClinicalRecord]) -> Result<FeatureMatrix> {
    append_age(&emb.to_features(), &ages_for(&emb.patient_ids, clinical)?)
}

pub(crate) fn ages_for(ids: &[String], clinical: &[ClinicalRecord]) -> Result<Vec<f64>> {
    let by_id: std::collections::HashMap<&str, &ClinicalRecord> =
        clinical.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .and_then(|r| r.age_years)
                .ok_or_else(|| Error::Data(format!("no age for patient {id:?}")))
        })
        .collect()
}

pub(crate) fn append_age(features: &FeatureMatrix, ages: &[f64]) -> Result<FeatureMatrix> {
    let n = features.n_rows();
    let m = features.n_features();
    let mut values = Array2::zeros((n, m + 1));
    values.slice_mut(ndarray::s![.., ..m]).assign(features.values());
    values.column_mut(m).assign(&ndarray::ArrayView1::from(ages));
    let mut names = features.feature_names().to_vec();
    names.push("age".into());
    FeatureMatrix::new(features.patient_ids().to_vec(), names, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, m: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, m), |_| rng.random_range(-3.0..3.0))
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i}")).collect()
    }

    fn blobs(n_per: usize, m: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((2 * n_per, m), |(i, _)| {
            let c = if i < n_per { 0.0 } else { 20.0 };
            c + normal.sample(&mut rng)
        });
        FeatureMatrix::new(ids(2 * n_per), (0..m).map(|j| format!("f{j}")).collect(), x).unwrap()
    }

    #[test]
    fn affinity_invariants() {
        let x = random_points(1, 40, 5);
        let c = conditional_affinities(x.view(), 5.0).unwrap();
        for i in 0..40 {
            let h: f64 = c.row(i).iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
            assert!((2f64.powf(h) - 5.0).abs() < 1e-4);
        }
        let p = symmetrize(&c);
        assert!((p.sum() - 1.0).abs() < 1e-10);
        assert!(p.diag().iter().all(|v| *v == 0.0));
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!(p.indexed_iter().all(|((i, j), v)| (v - p[(j, i)]).abs() < 1e-15));
    }

    #[test]
    fn separated_clusters_keep_mass_inside() {
        let f = blobs(20, 4, 2);
        let p = input_affinities(&f, 5.0).unwrap();
        let inside: f64 = p
            .indexed_iter()
            .filter(|((i, j), _)| (i < &20) == (j < &20))
            .map(|(_, v)| v)
            .sum();
        assert!(inside > 0.99);
    }

    #[test]
    fn duplicate_points_fail_to_bracket() {
        let x = Array2::ones((10, 3));
        assert!(conditional_affinities(x.view(), 2.0).is_err());
    }

    #[test]
    fn symmetric_pair_is_stationary() {
        let mut p = Array2::zeros((2, 2));
        p[(0, 1)] = 0.5;
        p[(1, 0)] = 0.5;
        let y = ndarray::array![[0.5, 0.0], [-0.5, 0.0]];
        let g = kl_gradient(&p, y.view());
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    pub(crate) fn max_fd_error(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let g = kl_gradient(p, y.view());
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..y.len() {
            let (i, k) = (idx / y.ncols(), idx % y.ncols());
            let mut up = y.clone();
            up[(i, k)] += h;
            let mut down = y.clone();
            down[(i, k)] -= h;
            let num = (kl_divergence(p, up.view()) - kl_divergence(p, down.view())) / (2.0 * h);
            let a = g[(i, k)];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>(), d in 1usize..4) {
            let x = random_points(seed, 10, 4);
            let p = input_affinities_raw(x.view(), 2.0).unwrap();
            let y = random_points(seed ^ 0xABCD, 10, d);
            prop_assert!(max_fd_error(&p, &y) < 1e-4);
            let g = kl_gradient(&p, y.view());
            for s in g.sum_axis(Axis(0)) {
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blobs_separate_and_run_is_deterministic() {
        let f = blobs(50, 50, 3);
        let cfg = TsneConfig {
            iterations: 500,
            learning_rate: 50.0,
            seed: 7,
            ..TsneConfig::default()
        };
        let e = tsne(&f, &cfg).unwrap();
        // project on the axis joining the blob centroids
        let c0 = e.coords.slice(ndarray::s![..50, ..]).mean_axis(Axis(0)).unwrap();
        let c1 = e.coords.slice(ndarray::s![50.., ..]).mean_axis(Axis(0)).unwrap();
        let dir = &c1 - &c0;
        let proj: Vec<f64> = e.coords.rows().into_iter().map(|r| r.dot(&dir)).collect();
        let max0 = proj[..50].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min1 = proj[50..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max0 < min1);

        assert!(e.kl_trace.iter().all(|(_, kl)| *kl >= 0.0));
        let end = e.kl_trace[e.exaggeration_end.unwrap()].1;
        assert!(e.kl_trace.last().unwrap().1 <= end);
        assert_eq!(tsne(&f, &cfg).unwrap(), e);
    }

    #[test]
    fn permutation_equivariance() {
        let x = random_points(4, 30, 6);
        let f = FeatureMatrix::new(ids(30), (0..6).map(|j| format!("f{j}")).collect(), x.clone()).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let fp = f.select_rows(&perm);
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            ..TsneConfig::default()
        };
        let a = tsne(&f, &cfg).unwrap();
        let b = tsne(&fp, &cfg).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a.coords.row(i), b.coords.row(k));
        }
    }

    #[test]
    fn age_is_appended() {
        let f = blobs(10, 3, 5);
        let clinical: Vec<ClinicalRecord> = f
            .patient_ids()
            .iter()
            .enumerate()
            .map(|(i, id)| ClinicalRecord {
                patient_id: id.clone(),
                observed_time_months: 10.0,
                event: true,
                age_years: Some(40.0 + i as f64),
                group_label: None,
            })
            .collect();
        let cfg = TsneConfig {
            output_dims: 3,
            perplexity: 4.0,
            iterations: 50,
            early_exaggeration_iters: 20,
            ..TsneConfig::default()
        };
        let out = project_with_age(&f, &clinical, &cfg).unwrap();
        assert_eq!(out.feature_names(), ["tsne_0", "tsne_1", "tsne_2", "age"]);
        let ages: Vec<f64> = (0..20).map(|i| 40.0 + i as f64).collect();
        assert_eq!(out.values().column(3).to_vec(), ages);
        let mut missing = clinical.clone();
        missing[3].age_years = None;
        assert!(project_with_age(&f, &missing, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TsneConfig::default().validate(91).is_err());
        assert!(TsneConfig::default().validate(92).is_ok());
        for d in [3, 5, 10, 15, 40, 70] {
            assert!(TsneConfig::with_dims(d).validate(200).is_ok());
        }
    }
}
