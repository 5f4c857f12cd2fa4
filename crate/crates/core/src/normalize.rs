//! Feature-specific quantile normalization (FSQN).
//!
//! Each gene of the target is mapped independently onto the empirical
//! distribution of the same gene in the reference. Quantile convention:
//! the value of target rank `k` (0-based, ties get the average rank) is sent
//! to probability `(k + 0.5) / n_t`; sorted reference value `j` sits at
//! probability `(j + 0.5) / n_r`; between those points the reference quantile
//! function is linear and beyond the end points it is clamped.

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::dataio::{merge, ExpressionMatrix, Scale};
use crate::error::{Error, Result};

pub fn log2_transform(m: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    if m.scale() != Scale::Linear {
        return Err(Error::InvalidArgument(format!(
            "{} is already log2-scaled",
            m.platform_id()
        )));
    }
    m.with_values(m.values().mapv(|v| (v + 1.0).log2()), Scale::Log2)
}

/// Average 0-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: ArrayView1<'_, f64>) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j - 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// Reference quantile at the probability of (possibly fractional) target rank `rank`.
pub fn reference_quantile(sorted_ref: &[f64], rank: f64, n_target: usize) -> f64 {
    let n_r = sorted_ref.len();
    // position h in reference index space: p = (rank + 0.5) / n_t = (h + 0.5) / n_r
    let h = (rank + 0.5) * n_r as f64 / n_target as f64 - 0.5;
    if h <= 0.0 {
        return sorted_ref[0];
    }
    if h >= (n_r - 1) as f64 {
        return sorted_ref[n_r - 1];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 {
        return sorted_ref[lo];
    }
    sorted_ref[lo] + frac * (sorted_ref[lo + 1] - sorted_ref[lo])
}

fn fsqn_column(target: ArrayView1<'_, f64>, reference: ArrayView1<'_, f64>) -> Vec<f64> {
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f64::total_cmp);
    let n_t = target.len();
    average_ranks(target)
        .into_iter()
        .map(|k| reference_quantile(&sorted_ref, k, n_t))
        .collect()
}

/// Normalize `target` onto `reference`, gene by gene. Gene sets must match
/// (order may differ); the output keeps the target's gene order and takes
/// the reference's scale.
pub fn fsqn(target: &ExpressionMatrix, reference: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    if target.scale() != reference.scale() {
        return Err(Error::Data(format!(
            "scale mismatch: target {:?}, reference {:?}",
            target.scale(),
            reference.scale()
        )));
    }
    if reference.n_patients() < 2 {
        return Err(Error::Data(format!(
            "reference {} has {} patient(s); FSQN needs at least 2 values per gene",
            reference.platform_id(),
            reference.n_patients()
        )));
    }
    let mut t_sorted: Vec<&String> = target.gene_ids().iter().collect();
    let mut r_sorted: Vec<&String> = reference.gene_ids().iter().collect();
    t_sorted.sort();
    r_sorted.sort();
    if t_sorted != r_sorted {
        return Err(Error::Data(
            "target and reference gene sets differ; intersect them first".into(),
        ));
    }
    let reference = reference.select_genes(target.gene_ids())?;

    let columns: Vec<Vec<f64>> = (0..target.n_genes())
        .into_par_iter()
        .map(|g| fsqn_column(target.values().column(g), reference.values().column(g)))
        .collect();
    let mut values = Array2::zeros((target.n_patients(), target.n_genes()));
    for (g, col) in columns.into_iter().enumerate() {
        values.index_axis_mut(Axis(1), g).assign(&ndarray::Array1::from(col));
    }
    target.with_values(values, reference.scale())
}

/// Intersect genes across sources, normalize every non-reference source onto
/// `sources[reference_index]`, then merge with the reference first.
pub fn integrate(sources: &[ExpressionMatrix], reference_index: usize) -> Result<ExpressionMatrix> {
    let reference = sources.get(reference_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "reference index {reference_index} out of range for {} sources",
            sources.len()
        ))
    })?;
    let mut ordered = vec![reference.clone()];
    ordered.extend(
        sources
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != reference_index)
            .map(|(_, s)| s.clone()),
    );
    let genes = crate::dataio::common_genes(&ordered)?;
    let reference = ordered[0].select_genes(&genes)?;
    let mut normalized = vec![reference.clone()];
    for src in &ordered[1..] {
        normalized.push(fsqn(&src.select_genes(&genes)?, &reference)?);
    }
    if normalized.len() == 1 {
        return Ok(reference);
    }
    Ok(merge(&normalized)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn matrix(name: &str, values: Array2<f64>, scale: Scale) -> ExpressionMatrix {
        let p = (0..values.nrows()).map(|i| format!("{name}{i}")).collect();
        let g = (0..values.ncols()).map(|j| format!("g{j}")).collect();
        ExpressionMatrix::new(name, p, g, values, scale).unwrap()
    }

    #[test]
    fn log2_examples() {
        let m = matrix("a", array![[0.0, 1.0, 3.0]], Scale::Linear);
        let l = log2_transform(&m).unwrap();
        assert_eq!(l.values(), &array![[0.0, 1.0, 2.0]]);
        assert_eq!(l.scale(), Scale::Log2);
        assert!(log2_transform(&l).is_err());
    }

    #[test]
    fn identity_when_target_is_reference() {
        let m = matrix("a", array![[1.0, 5.0], [3.0, 2.0], [2.0, 9.0]], Scale::Linear);
        assert_eq!(fsqn(&m, &m).unwrap().values(), m.values());
    }

    #[test]
    fn equal_size_rank_mapping() {
        let r = matrix("r", array![[1.0], [2.0], [3.0], [4.0]], Scale::Linear);
        let t = matrix("t", array![[30.0], [10.0], [40.0], [20.0]], Scale::Linear);
        assert_eq!(fsqn(&t, &r).unwrap().values(), &array![[3.0], [1.0], [4.0], [2.0]]);
    }

    #[test]
    fn three_targets_onto_two_point_reference() {
        // hand evaluation of the interpolation rule: ranks 0,1,2 of n_t = 3
        // sit at p = 1/6, 1/2, 5/6; reference points are p = 1/4 (0) and 3/4 (10).
        // p = 1/6 < 1/4 clamps to 0, p = 1/2 is halfway -> 5, p = 5/6 > 3/4 clamps to 10.
        let r = matrix("r", array![[10.0], [0.0]], Scale::Linear);
        let t = matrix("t", array![[7.0], [1.0], [3.0]], Scale::Linear);
        assert_eq!(fsqn(&t, &r).unwrap().values(), &array![[10.0], [0.0], [5.0]]);
    }

    #[test]
    fn ties_map_to_equal_outputs() {
        let r = matrix("r", array![[1.0], [2.0], [3.0], [4.0]], Scale::Linear);
        let t = matrix("t", array![[5.0], [5.0], [1.0], [9.0]], Scale::Linear);
        let out = fsqn(&t, &r).unwrap();
        // ranks 1 and 2 average to 1.5 -> halfway between 2 and 3
        assert_eq!(out.values(), &array![[2.5], [2.5], [1.0], [4.0]]);
    }

    #[test]
    fn errors() {
        let r = matrix("r", array![[1.0]], Scale::Linear);
        let t = matrix("t", array![[1.0], [2.0]], Scale::Linear);
        assert!(fsqn(&t, &r).is_err());
        let r2 = matrix("r", array![[1.0], [2.0]], Scale::Log2);
        assert!(fsqn(&t, &r2).is_err());
        let other = ExpressionMatrix::new(
            "o",
            vec!["a".into(), "b".into()],
            vec!["zz".into()],
            array![[1.0], [2.0]],
            Scale::Linear,
        )
        .unwrap();
        assert!(fsqn(&t, &other).is_err());
    }

    #[test]
    fn integrate_identity_source() {
        let a = matrix("a", array![[1.0, 2.0], [3.0, 4.0]], Scale::Linear);
        let b = a.clone().with_platform_id("b");
        let out = integrate(&[a.clone(), b], 0).unwrap();
        assert_eq!(out.values(), a.values());
        assert!(integrate(&[a], 3).is_err());
    }

    fn arb_column(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, n)
    }

    proptest! {
        #[test]
        fn rank_preserving_and_bounded(t in arb_column(13), r in arb_column(7)) {
            let tm = matrix("t", Array2::from_shape_vec((13, 1), t.clone()).unwrap(), Scale::Log2);
            let rm = matrix("r", Array2::from_shape_vec((7, 1), r.clone()).unwrap(), Scale::Log2);
            let out = fsqn(&tm, &rm).unwrap();
            let o = out.values().column(0).to_vec();
            let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            for i in 0..13 {
                prop_assert!(o[i] >= lo && o[i] <= hi);
                for j in 0..13 {
                    if t[i] < t[j] { prop_assert!(o[i] <= o[j]); }
                    if t[i] == t[j] { prop_assert_eq!(o[i], o[j]); }
                }
            }
        }

        #[test]
        fn equal_size_is_exact(mut t in arb_column(11), r in arb_column(11)) {
            t.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64 * 1e-6);
            let tm = matrix("t", Array2::from_shape_vec((11, 1), t).unwrap(), Scale::Log2);
            let rm = matrix("r", Array2::from_shape_vec((11, 1), r.clone()).unwrap(), Scale::Log2);
            let mut o = fsqn(&tm, &rm).unwrap().values().column(0).to_vec();
            let mut rs = r;
            o.sort_by(f64::total_cmp);
            rs.sort_by(f64::total_cmp);
            prop_assert_eq!(o, rs);
        }
    }
}
