//! Entropy-filtered pseudo-labels for the target domain and generative
//! augmentation of the accepted samples.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::codebook::{self, Codebook, CodebookMode};
use crate::data::SENTINEL;
use crate::error::{Error, Result};

/// `0.5 · ln C`.
pub fn default_threshold(class_count: usize) -> f64 {
    0.5 * (class_count as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Row indices into the target dataset.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Prediction entropy in nats.
    pub entropies: Vec<f64>,
    pub accepted: Vec<bool>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn accepted_fraction(&self) -> f64 {
        if self.accepted.is_empty() {
            0.0
        } else {
            self.accepted_count() as f64 / self.accepted.len() as f64
        }
    }

    /// Label per target row, [`SENTINEL`] where rejected.
    pub fn labels_or_sentinel(&self) -> Vec<i64> {
        let n = self.indices.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = vec![SENTINEL; n];
        for ((&i, &label), &ok) in self.indices.iter().zip(&self.labels).zip(&self.accepted) {
            if ok {
                out[i] = label as i64;
            }
        }
        out
    }

    pub fn accepted_indices(&self) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &ok)| ok)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn accepted_labels(&self) -> Vec<usize> {
        self.labels
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &ok)| ok)
            .map(|(&l, _)| l)
            .collect()
    }

    /// Counts of entropies in `bins` equal-width bins over `[0, ln C]`.
    pub fn entropy_histogram(&self, class_count: usize, bins: usize) -> Vec<usize> {
        let max = (class_count as f64).ln().max(f64::MIN_POSITIVE);
        let mut hist = vec![0; bins];
        for &h in &self.entropies {
            let b = ((h / max) * bins as f64).floor() as usize;
            hist[b.min(bins - 1)] += 1;
        }
        hist
    }
}

/// Argmax labels with entropy-based acceptance (`entropy ≤ threshold`).
pub fn pseudo_label(probs: &Mat, threshold: f64) -> Result<PseudoLabelSet> {
    let n = probs.nrows();
    let mut labels = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    let mut accepted = Vec::with_capacity(n);
    for (i, row) in probs.rows().into_iter().enumerate() {
        let total = row.sum();
        if !(total - 1.0).abs().le(&1e-6) || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Parameter(format!(
                "classifier row {i} is not a distribution (sum {total})"
            )));
        }
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        let h = codebook::entropy(row.iter().copied()).max(0.0);
        labels.push(best);
        entropies.push(h);
        accepted.push(h <= threshold);
    }
    Ok(PseudoLabelSet {
        indices: (0..n).collect(),
        labels,
        entropies,
        accepted,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Perturbed,
    Regenerated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl AugmentedBatch {
    pub fn empty(dim: usize, provenance: Provenance) -> Self {
        Self {
            features: Mat::zeros((0, dim)),
            labels: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `0.1 ×` the per-dimension standard deviation of `feats`.
pub fn default_sigma(feats: &Mat) -> Vec<f64> {
    if feats.nrows() == 0 {
        return vec![0.0; feats.ncols()];
    }
    feats.std_axis(Axis(0), 0.0).iter().map(|s| 0.1 * s).collect()
}

/// Isotropic Gaussian perturbation with a single `sigma`.
pub fn perturb(feats: &Mat, labels: &[usize], sigma: f64, seed: u64) -> Result<AugmentedBatch> {
    perturb_per_dim(feats, labels, &vec![sigma; feats.ncols()], seed)
}

/// Gaussian perturbation with a per-dimension standard deviation.
pub fn perturb_per_dim(
    feats: &Mat,
    labels: &[usize],
    sigmas: &[f64],
    seed: u64,
) -> Result<AugmentedBatch> {
    assert_eq!(feats.nrows(), labels.len(), "one label per feature row");
    assert_eq!(feats.ncols(), sigmas.len(), "one sigma per dimension");
    if sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::Parameter("perturbation sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = feats.clone();
    for mut row in features.rows_mut() {
        for (v, &s) in row.iter_mut().zip(sigmas) {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(AugmentedBatch {
        features,
        labels: labels.to_vec(),
        provenance: Provenance::Perturbed,
    })
}

/// Encodes `feats`, passes the encodings through the Gumbel-sampled codebook
/// and decodes them back to feature space.
pub fn regenerate<E, D>(
    feats: &Mat,
    labels: &[usize],
    cb: &Codebook,
    encode: E,
    decode: D,
    tau: f64,
    seed: u64,
) -> Result<AugmentedBatch>
where
    E: Fn(&Mat) -> Result<Mat>,
    D: Fn(&Mat) -> Result<Mat>,
{
    assert_eq!(feats.nrows(), labels.len(), "one label per feature row");
    if feats.nrows() == 0 {
        return Ok(AugmentedBatch::empty(feats.ncols(), Provenance::Regenerated));
    }
    let z = encode(feats)?;
    if z.ncols() != cb.dim() {
        return Err(Error::Parameter(format!(
            "encoder emits {} dims but codebook entries have {}",
            z.ncols(),
            cb.dim()
        )));
    }
    let (quantized, _) = codebook::codebook_forward(&z, cb, tau, CodebookMode::Train, seed)?;
    Ok(AugmentedBatch {
        features: decode(&quantized)?,
        labels: labels.to_vec(),
        provenance: Provenance::Regenerated,
    })
}

/// Per-class `(‖mean shift‖, mean per-dim std of the originals)` between
/// original accepted features and their augmentations, for classes present
/// in both.
pub fn class_mean_shift(
    original: &Mat,
    original_labels: &[usize],
    augmented: &AugmentedBatch,
) -> Vec<(usize, f64, f64)> {
    let classes: std::collections::BTreeSet<usize> = original_labels.iter().copied().collect();
    classes
        .into_iter()
        .filter_map(|c| {
            let rows_o: Vec<usize> = (0..original_labels.len()).filter(|&i| original_labels[i] == c).collect();
            let rows_a: Vec<usize> = (0..augmented.len()).filter(|&i| augmented.labels[i] == c).collect();
            if rows_o.is_empty() || rows_a.is_empty() {
                return None;
            }
            let o = original.select(Axis(0), &rows_o);
            let a = augmented.features.select(Axis(0), &rows_a);
            let shift = &o.mean_axis(Axis(0))? - &a.mean_axis(Axis(0))?;
            let std = o.std_axis(Axis(0), 0.0).mean()?;
            Some((c, shift.dot(&shift).sqrt(), std))
        })
        .collect()
}
