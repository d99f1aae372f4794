//! Epoch-level class-conditional priors and the KL alignment between
//! per-batch class statistics and those priors.
//!
//! Each prior is an isotropic Gaussian `N(μ_c, (1/C)·I)` whose mean is the
//! average encoding of class-`c` source samples over the previous epoch.
//! Mini-batch class statistics are diagonal Gaussians; the alignment loss is
//! `Σ_c KL(batch_c ‖ prior_c)` over the classes present in the batch.

use std::collections::BTreeMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Lower bound applied to every batch variance element.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub class_id: usize,
    pub mean: Vec<f64>,
    /// Isotropic variance shared by every dimension.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchClassStats {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Class means of `encoded` rows with variance `1/C` for every class.
pub fn estimate_epoch_priors(
    encoded: &Mat,
    labels: &[usize],
    class_count: usize,
) -> Result<Vec<ClassPrior>> {
    assert_eq!(encoded.nrows(), labels.len(), "one label per encoded row");
    let dim = encoded.ncols();
    let mut sums = vec![vec![0.0; dim]; class_count];
    let mut counts = vec![0usize; class_count];
    for (row, &label) in encoded.rows().into_iter().zip(labels) {
        if label >= class_count {
            return Err(Error::Parameter(format!("label {label} >= {class_count}")));
        }
        counts[label] += 1;
        for (s, v) in sums[label].iter_mut().zip(row.iter()) {
            *s += v;
        }
    }
    let variance = 1.0 / class_count as f64;
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class_id, (sum, count))| {
            if count == 0 {
                return Err(Error::EmptyClass { class: class_id });
            }
            let mean: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("class {class_id} prior mean is not finite")));
            }
            Ok(ClassPrior {
                class_id,
                mean,
                variance,
            })
        })
        .collect()
}

/// Row indices per class, ignoring negative (sentinel) labels.
pub fn group_by_class(labels: &[i64]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        if label >= 0 {
            groups.entry(label as usize).or_default().push(i);
        }
    }
    groups
}

/// Per-class elementwise mean and population variance (floored) of the
/// labelled rows. Classes are returned in ascending order.
pub fn batch_class_stats(encoded: &Mat, labels: &[i64]) -> Vec<BatchClassStats> {
    assert_eq!(encoded.nrows(), labels.len(), "one label per encoded row");
    group_by_class(labels)
        .into_iter()
        .map(|(class_id, rows)| {
            let block = encoded.select(Axis(0), &rows);
            let mean = block.mean_axis(Axis(0)).expect("non-empty class");
            let centered = &block - &mean;
            let var = (&centered * &centered)
                .mean_axis(Axis(0))
                .expect("non-empty class")
                .mapv(|v| v.max(VAR_FLOOR));
            BatchClassStats {
                class_id,
                mean: mean.to_vec(),
                var: var.to_vec(),
                count: rows.len(),
            }
        })
        .collect()
}

/// `KL(q ‖ p)` for a diagonal Gaussian `q` and an isotropic Gaussian `p`.
pub fn gaussian_kl(q: &BatchClassStats, p: &ClassPrior) -> Result<f64> {
    if q.mean.len() != p.mean.len() || q.var.len() != p.mean.len() {
        return Err(Error::Parameter(format!(
            "class {}: stats dim {} vs prior dim {}",
            q.class_id,
            q.mean.len(),
            p.mean.len()
        )));
    }
    let finite = q.mean.iter().chain(&q.var).chain(&p.mean).all(|v| v.is_finite());
    if !finite || !(p.variance > 0.0 && p.variance.is_finite()) || q.var.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric(format!(
            "class {}: non-finite or non-positive Gaussian parameters",
            q.class_id
        )));
    }
    let log_prior_var = p.variance.ln();
    let kl = q
        .mean
        .iter()
        .zip(&q.var)
        .zip(&p.mean)
        .map(|((&m, &v), &mu)| {
            0.5 * (log_prior_var - v.ln()) + (v + (m - mu) * (m - mu)) / (2.0 * p.variance) - 0.5
        })
        .sum::<f64>();
    // Rounding can leave a tiny negative residue for identical distributions.
    Ok(kl.max(0.0))
}

fn prior_for(priors: &[ClassPrior], class_id: usize) -> Result<&ClassPrior> {
    priors
        .iter()
        .find(|p| p.class_id == class_id)
        .ok_or_else(|| Error::Config(format!("no prior for class {class_id}")))
}

/// Sum of `KL(stats_c ‖ prior_c)` over the classes present in `stats`.
pub fn global_alignment_loss(stats: &[BatchClassStats], priors: &[ClassPrior]) -> Result<f64> {
    stats
        .iter()
        .map(|q| gaussian_kl(q, prior_for(priors, q.class_id)?))
        .sum()
}

/// Differentiable counterpart of [`batch_class_stats`] + [`global_alignment_loss`]:
/// records the per-class KL terms on `tape` and returns their sum (a `1 × 1`
/// node, zero when no row is labelled). Priors are constants.
pub fn alignment_loss_tape(
    tape: &mut Tape,
    encoded: Var,
    labels: &[i64],
    priors: &[ClassPrior],
) -> Result<Var> {
    let mut terms = Vec::new();
    for (class_id, rows) in group_by_class(labels) {
        let prior = prior_for(priors, class_id)?;
        let block = tape.select_rows(encoded, rows);
        let mean = tape.mean_rows(block);
        let centered = tape.sub_row(block, mean);
        let sq = tape.square(centered);
        let var = tape.mean_rows(sq);
        let var = tape.floor(var, VAR_FLOOR);
        terms.push(kl_tape(tape, mean, var, prior));
    }
    Ok(sum_terms(tape, &terms))
}

/// `KL(N(mean, diag(var)) ‖ prior)` for `1 × d` nodes `mean`, `var`.
pub fn kl_tape(tape: &mut Tape, mean: Var, var: Var, prior: &ClassPrior) -> Var {
    let d = prior.mean.len();
    let s2 = prior.variance;
    let mu = tape.constant(Mat::from_shape_vec((1, d), prior.mean.clone()).expect("1 × d"));
    let diff = tape.sub(mean, mu);
    let diff_sq = tape.square(diff);
    let num = tape.add(var, diff_sq);
    let quad = tape.scale(num, 0.5 / s2);
    let log_var = tape.log(var);
    let neg_half_log = tape.scale(log_var, -0.5);
    let per_dim = tape.add(quad, neg_half_log);
    let summed = tape.sum(per_dim);
    tape.add_scalar(summed, d as f64 * (0.5 * s2.ln() - 0.5))
}

pub(crate) fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => tape.constant(Mat::zeros((1, 1))),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t)),
    }
}

/// Mean over classes of the per-dimension population variance of each
/// class's encodings (unfloored). Used to watch latent collapse.
pub fn mean_class_variance(encoded: &Mat, labels: &[usize]) -> f64 {
    let signed: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    let groups = group_by_class(&signed);
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups
        .values()
        .map(|rows| {
            let block = encoded.select(Axis(0), rows);
            let mean = block.mean_axis(Axis(0)).expect("non-empty class");
            let centered = &block - &mean;
            (&centered * &centered).mean().unwrap_or(0.0)
        })
        .sum();
    total / groups.len() as f64
}

/// Total-variation distances between two discrete joints `P(y, x)` given as
/// `C × m` matrices: the largest per-class conditional distance and the
/// distance between the feature marginals.
pub fn joint_divergences(joint_s: &Mat, joint_t: &Mat) -> Result<(f64, f64)> {
    if joint_s.dim() != joint_t.dim() {
        return Err(Error::Parameter(format!(
            "joint shapes differ: {:?} vs {:?}",
            joint_s.dim(),
            joint_t.dim()
        )));
    }
    for (name, j) in [("source", joint_s), ("target", joint_t)] {
        if j.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Parameter(format!("{name} joint has negative or non-finite mass")));
        }
        let total = j.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("{name} joint sums to {total}, not 1")));
        }
    }
    let mut condi: f64 = 0.0;
    for (rs, rt) in joint_s.rows().into_iter().zip(joint_t.rows()) {
        let (ms, mt) = (rs.sum(), rt.sum());
        if ms == 0.0 || mt == 0.0 {
            continue;
        }
        let tv = 0.5 * rs.iter().zip(rt.iter()).map(|(a, b)| (a / ms - b / mt).abs()).sum::<f64>();
        condi = condi.max(tv);
    }
    let ms = joint_s.sum_axis(Axis(0));
    let mt = joint_t.sum_axis(Axis(0));
    let marg = 0.5 * ms.iter().zip(mt.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok((condi, marg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: &[f64], var: &[f64]) -> BatchClassStats {
        BatchClassStats {
            class_id: 0,
            mean: mean.to_vec(),
            var: var.to_vec(),
            count: 1,
        }
    }

    fn prior(mean: &[f64], variance: f64) -> ClassPrior {
        ClassPrior {
            class_id: 0,
            mean: mean.to_vec(),
            variance,
        }
    }

    #[test]
    fn prior_variance_is_inverse_class_count() {
        let encoded = Mat::from_shape_fn((20, 3), |(i, j)| (i * j) as f64);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let priors = estimate_epoch_priors(&encoded, &labels, 10).unwrap();
        assert_eq!(priors.len(), 10);
        assert!(priors.iter().all(|p| p.variance == 0.1));
    }

    #[test]
    fn prior_means_are_class_averages() {
        let encoded = array![[0.0, 0.0], [2.0, 2.0], [4.0, 4.0]];
        let priors = estimate_epoch_priors(&encoded, &[0, 0, 1], 2).unwrap();
        assert_eq!(priors[0].mean, vec![1.0, 1.0]);
        assert_eq!(priors[1].mean, vec![4.0, 4.0]);
        assert_eq!(priors[0].variance, 0.5);

        let same = Mat::from_shape_fn((4, 2), |(_, j)| [0.25, -3.0][j]);
        let p = estimate_epoch_priors(&same, &[0, 0, 0, 0], 2);
        assert!(matches!(p, Err(Error::EmptyClass { class: 1 })));
        let p = estimate_epoch_priors(&same, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(p[0].mean, vec![0.25, -3.0]);
    }

    #[test]
    fn collapse_trend_in_prior_variance() {
        let vars: Vec<f64> = [2usize, 10, 50].iter().map(|&c| 1.0 / c as f64).collect();
        assert!(vars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn batch_stats_edge_cases() {
        let z = array![[0.0], [2.0], [5.0]];
        let s = batch_class_stats(&z, &[1, 1, 0]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].class_id, 0);
        assert_eq!(s[0].mean, vec![5.0]);
        assert_eq!(s[0].var, vec![VAR_FLOOR]);
        assert_eq!(s[1].mean, vec![1.0]);
        assert_eq!(s[1].var, vec![1.0]);
        assert_eq!(s[1].count, 2);
        assert!(batch_class_stats(&z, &[-1, -1, -1]).is_empty());
    }

    #[test]
    fn kl_closed_form_values() {
        let p = prior(&[0.0], 1.0);
        assert_eq!(gaussian_kl(&stats(&[0.0], &[1.0]), &p).unwrap(), 0.0);
        assert!((gaussian_kl(&stats(&[1.0], &[1.0]), &p).unwrap() - 0.5).abs() < 1e-15);
        let wide = prior(&[0.0], 4.0);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert!((gaussian_kl(&stats(&[0.0], &[1.0]), &wide).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.31815).abs() < 1e-5);
    }

    #[test]
    fn kl_rejects_bad_parameters() {
        let p = prior(&[0.0], 1.0);
        assert!(gaussian_kl(&stats(&[f64::NAN], &[1.0]), &p).is_err());
        assert!(gaussian_kl(&stats(&[0.0], &[0.0]), &p).is_err());
        assert!(gaussian_kl(&stats(&[0.0], &[1.0]), &prior(&[0.0], 0.0)).is_err());
    }

    #[test]
    fn alignment_loss_cases() {
        let priors = vec![
            ClassPrior { class_id: 0, mean: vec![0.0, 0.0], variance: 0.5 },
            ClassPrior { class_id: 1, mean: vec![1.0, 1.0], variance: 0.5 },
        ];
        let matched: Vec<BatchClassStats> = priors
            .iter()
            .map(|p| BatchClassStats {
                class_id: p.class_id,
                mean: p.mean.clone(),
                var: vec![0.5, 0.5],
                count: 3,
            })
            .collect();
        assert!(global_alignment_loss(&matched, &priors).unwrap().abs() < 1e-15);
        assert_eq!(global_alignment_loss(&[], &priors).unwrap(), 0.0);

        let delta = 0.3;
        let mut shifted = matched.clone();
        shifted[1].mean[0] += delta;
        let expected = delta * delta / (2.0 * 0.5);
        assert!((global_alignment_loss(&shifted, &priors).unwrap() - expected).abs() < 1e-14);

        let mut orphan = matched.clone();
        orphan[0].class_id = 7;
        assert!(matches!(global_alignment_loss(&orphan, &priors), Err(Error::Config(_))));
    }

    #[test]
    fn tape_loss_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Mat::from_shape_fn((9, 4), |_| rng.random_range(-1.0..1.0));
        let labels = vec![0, 1, 2, -1, 0, 1, 2, 2, -1];
        let priors = estimate_epoch_priors(
            &Mat::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0)),
            &[0, 1, 2, 0, 1, 2],
            3,
        )
        .unwrap();
        let direct = global_alignment_loss(&batch_class_stats(&z, &labels), &priors).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let loss = alignment_loss_tape(&mut tape, zv, &labels, &priors).unwrap();
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn mean_class_variance_matches_hand_value() {
        let z = array![[0.0, 0.0], [2.0, 4.0], [1.0, 1.0]];
        // class 0: var (1, 4) → 2.5; class 1: 0
        assert!((mean_class_variance(&z, &[0, 0, 1]) - 1.25).abs() < 1e-15);
    }

    #[test]
    fn joint_divergences_identical_and_errors() {
        let j = array![[0.1, 0.2, 0.2], [0.25, 0.0, 0.25]];
        assert_eq!(joint_divergences(&j, &j).unwrap(), (0.0, 0.0));
        let bad = array![[0.5, 0.6]];
        assert!(matches!(joint_divergences(&bad, &bad), Err(Error::Parameter(_))));
        let neg = array![[1.5, -0.5]];
        assert!(joint_divergences(&neg, &neg).is_err());
    }

    #[test]
    fn joint_divergences_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let random_joint = |rng: &mut ChaCha8Rng| {
            let m = Mat::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0));
            let s = m.sum();
            m / s
        };
        let a = random_joint(&mut rng);
        let b = random_joint(&mut rng);
        let (condi, marg) = joint_divergences(&a, &b).unwrap();
        let mut best: f64 = 0.0;
        for c in 0..3 {
            let (mut sa, mut sb) = (0.0, 0.0);
            for x in 0..5 {
                sa += a[[c, x]];
                sb += b[[c, x]];
            }
            let mut tv = 0.0;
            for x in 0..5 {
                tv += (a[[c, x]] / sa - b[[c, x]] / sb).abs();
            }
            best = best.max(tv / 2.0);
        }
        let mut tvm = 0.0;
        for x in 0..5 {
            let (mut pa, mut pb) = (0.0, 0.0);
            for c in 0..3 {
                pa += a[[c, x]];
                pb += b[[c, x]];
            }
            tvm += (pa - pb).abs();
        }
        assert!((condi - best).abs() < 1e-14);
        assert!((marg - tvm / 2.0).abs() < 1e-14);
        assert!(condi > 0.0 && marg > 0.0);
    }
}
