//! Comparison methods sharing the trainer's backbone: source-only, CDAN,
//! anchor mean-matching (NPA) and VI with fixed continuous priors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::priors::{self, BatchClassStats, ClassPrior};
use crate::trainer::{self, FitOutput, ModelConfig, TrainConfig};

/// Noise levels of the NPA sweep.
pub const NPA_SWEEP: [f64; 6] = [0.0, 0.01, 0.1, 0.5, 1.0, 2.0];
/// Prior variances of the VI-DA sweep.
pub const VIDA_SWEEP: [f64; 3] = [0.0001, 0.01, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// `C × (C·w)` block-binary rows.
    pub anchors: Mat,
    pub width: usize,
    pub noise_std: f64,
}

/// Slot width used at desk scale: `ceil(d_z / C)`.
pub fn anchor_width(latent_dim: usize, class_count: usize) -> usize {
    latent_dim.div_ceil(class_count).max(1)
}

pub fn build_anchors(class_count: usize, width: usize, noise_std: f64) -> Result<AnchorSet> {
    if class_count < 2 || width < 1 {
        return Err(Error::Parameter(format!(
            "anchors need C >= 2 and w >= 1 (got C={class_count}, w={width})"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Parameter(format!("anchor noise must be >= 0, got {noise_std}")));
    }
    let anchors = Mat::from_shape_fn((class_count, class_count * width), |(c, j)| {
        if j / width == c {
            1.0
        } else {
            0.0
        }
    });
    Ok(AnchorSet {
        anchors,
        width,
        noise_std,
    })
}

impl AnchorSet {
    pub fn class_count(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Anchors plus a fresh `N(0, X²)` draw (the anchors themselves when
    /// `X = 0`).
    pub fn sample(&self, rng: &mut impl Rng) -> Mat {
        if self.noise_std == 0.0 {
            return self.anchors.clone();
        }
        self.anchors
            .mapv(|a| a + self.noise_std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn sample_seeded(&self, seed: u64) -> Mat {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn anchor_row(anchors: &Mat, class_id: usize) -> Result<ndarray::ArrayView1<'_, f64>> {
    if class_id >= anchors.nrows() {
        return Err(Error::Config(format!(
            "class {class_id} has no anchor ({} anchors)",
            anchors.nrows()
        )));
    }
    Ok(anchors.row(class_id))
}

/// `(1/C) Σ_c ‖m_c − a_c‖²` over the classes present in `labels`, where
/// `m_c` is the batch mean of class `c` and `C` the number of anchors.
pub fn npa_loss(encoded: &Mat, labels: &[i64], anchors: &Mat) -> Result<f64> {
    let c = anchors.nrows() as f64;
    let mut total = 0.0;
    for (class_id, rows) in priors::group_by_class(labels) {
        let a = anchor_row(anchors, class_id)?;
        if a.len() != encoded.ncols() {
            return Err(Error::Parameter(format!(
                "encodings have {} dims, anchors {}",
                encoded.ncols(),
                a.len()
            )));
        }
        let mean = encoded.select(ndarray::Axis(0), &rows).mean_axis(ndarray::Axis(0)).expect("non-empty");
        total += (&mean - &a).mapv(|v| v * v).sum();
    }
    Ok(total / c)
}

/// Differentiable [`npa_loss`]; `anchors` is a constant (already sampled).
pub fn npa_loss_tape(tape: &mut Tape, encoded: Var, labels: &[i64], anchors: &Mat) -> Result<Var> {
    let mut terms = Vec::new();
    for (class_id, rows) in priors::group_by_class(labels) {
        let a = anchor_row(anchors, class_id)?.to_owned().insert_axis(ndarray::Axis(0));
        let block = tape.select_rows(encoded, rows);
        let mean = tape.mean_rows(block);
        let a = tape.constant(a);
        let diff = tape.sub(mean, a);
        let sq = tape.square(diff);
        terms.push(tape.sum(sq));
    }
    let sum = priors::sum_terms(tape, &terms);
    Ok(tape.scale(sum, 1.0 / anchors.nrows() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPriorSet {
    /// Scalar mean per class, broadcast over every latent dimension.
    pub means: Vec<f64>,
    pub variance: f64,
}

impl FixedPriorSet {
    /// Means `1.5, 1.2, …` stepping by −0.3 per class.
    pub fn new(class_count: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::Parameter(format!("prior variance must be > 0, got {variance}")));
        }
        Ok(Self {
            means: (0..class_count).map(|c| 1.5 - 0.3 * c as f64).collect(),
            variance,
        })
    }

    pub fn priors(&self, dim: usize) -> Vec<ClassPrior> {
        self.means
            .iter()
            .enumerate()
            .map(|(class_id, &m)| ClassPrior {
                class_id,
                mean: vec![m; dim],
                variance: self.variance,
            })
            .collect()
    }
}

/// `Σ_c KL(batch_c ‖ fixed_c)` over the classes in `stats`.
pub fn vida_loss(stats: &[BatchClassStats], fixed: &FixedPriorSet) -> Result<f64> {
    let dim = stats.first().map_or(0, |s| s.mean.len());
    priors::global_alignment_loss(stats, &fixed.priors(dim))
}

/// Hex SHA-256 of a prior set, used to confirm that fixed priors never move.
pub fn prior_digest(priors: &[ClassPrior]) -> String {
    let mut hasher = Sha256::new();
    for p in priors {
        hasher.update((p.class_id as u64).to_le_bytes());
        for m in &p.mean {
            hasher.update(m.to_le_bytes());
        }
        hasher.update(p.variance.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// A training method, by CLI name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    SourceOnly,
    Cdan,
    /// Anchor mean-matching with anchor noise `X`.
    Npa(f64),
    /// Fixed continuous priors with the given variance.
    Vida(f64),
    Gvida,
}

impl Variant {
    /// Which of the five loss weights stay active.
    pub fn active_losses(&self) -> [bool; 5] {
        match self {
            Variant::SourceOnly => [true, false, false, false, false],
            Variant::Cdan => [true, true, false, false, false],
            Variant::Npa(_) => [true, true, true, false, false],
            Variant::Vida(_) => [true, true, true, false, true],
            Variant::Gvida => [true; 5],
        }
    }

    pub fn uses_codebook(&self) -> bool {
        matches!(self, Variant::Gvida)
    }

    pub fn mask(&self, lambdas: [f64; 5]) -> [f64; 5] {
        let active = self.active_losses();
        std::array::from_fn(|i| if active[i] { lambdas[i] } else { 0.0 })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::SourceOnly => f.write_str("source_only"),
            Variant::Cdan => f.write_str("cdan"),
            Variant::Npa(x) => write!(f, "npa+{x}"),
            Variant::Vida(v) => write!(f, "vida({v})"),
            Variant::Gvida => f.write_str("gvida"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let number = |text: &str| -> Result<f64> {
            text.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("bad number in variant name {s:?}")))
        };
        let name = s.trim();
        match name {
            "source_only" => return Ok(Variant::SourceOnly),
            "cdan" => return Ok(Variant::Cdan),
            "gvida" => return Ok(Variant::Gvida),
            _ => {}
        }
        if let Some(x) = name.strip_prefix("npa+") {
            let x = number(x)?;
            if x < 0.0 {
                return Err(Error::Config(format!("NPA noise must be >= 0 in {s:?}")));
            }
            return Ok(Variant::Npa(x));
        }
        if let Some(v) = name.strip_prefix("vida(").and_then(|r| r.strip_suffix(')')) {
            let v = number(v)?;
            if v <= 0.0 {
                return Err(Error::Config(format!("VI-DA variance must be > 0 in {s:?}")));
            }
            return Ok(Variant::Vida(v));
        }
        Err(Error::Config(format!(
            "unknown variant {s:?} (expected source_only, cdan, npa+X, vida(var) or gvida)"
        )))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.to_string()
    }
}

/// The NPA sweep over [`NPA_SWEEP`].
pub fn npa_sweep() -> Vec<Variant> {
    NPA_SWEEP.iter().map(|&x| Variant::Npa(x)).collect()
}

/// The VI-DA sweep over [`VIDA_SWEEP`].
pub fn vida_sweep() -> Vec<Variant> {
    VIDA_SWEEP.iter().map(|&v| Variant::Vida(v)).collect()
}

/// Trains the named variant on the shared backbone.
pub fn run_variant(
    name: &str,
    train: &TrainConfig,
    model: &ModelConfig,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<FitOutput> {
    let variant: Variant = name.parse()?;
    trainer::fit(train, model, variant, source, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ten_class_anchor_layout() {
        let set = build_anchors(10, 51, 0.0).unwrap();
        assert_eq!(set.anchors.dim(), (10, 510));
        for j in 0..510 {
            let expect = if (102..=152).contains(&j) { 1.0 } else { 0.0 };
            assert_eq!(set.anchors[[2, j]], expect);
        }
    }

    #[test]
    fn anchors_are_orthogonal() {
        for c in 2..8 {
            for w in 1..5 {
                let a = build_anchors(c, w, 0.0).unwrap().anchors;
                let gram = a.dot(&a.t());
                for i in 0..c {
                    for j in 0..c {
                        assert_eq!(gram[[i, j]], if i == j { w as f64 } else { 0.0 });
                    }
                }
            }
        }
        assert!(build_anchors(1, 3, 0.0).is_err());
        assert!(build_anchors(3, 0, 0.0).is_err());
    }

    #[test]
    fn noisy_anchor_sample_mean() {
        let set = build_anchors(3, 2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = Mat::zeros(set.anchors.dim());
        for _ in 0..n {
            sum += &set.sample(&mut rng);
        }
        let mean = sum / n as f64;
        let bound = 3.0 * 1.0 / 100.0;
        assert!((&mean - &set.anchors).iter().all(|d| d.abs() < bound));
    }

    #[test]
    fn npa_loss_examples() {
        let anchors = build_anchors(2, 2, 0.0).unwrap().anchors;
        let enc = array![[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        assert_eq!(npa_loss(&enc, &[0, 1], &anchors).unwrap(), 0.0);
        let shifted = array![[1.0, 1.3, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let l = npa_loss(&shifted, &[0, 1], &anchors).unwrap();
        assert!((l - 0.09 / 2.0).abs() < 1e-12);
        assert_eq!(npa_loss(&Mat::zeros((0, 4)), &[], &anchors).unwrap(), 0.0);
        assert!(matches!(npa_loss(&enc, &[0, 2], &anchors), Err(Error::Config(_))));
    }

    #[test]
    fn npa_tape_matches_value() {
        let anchors = build_anchors(3, 1, 0.0).unwrap().anchors;
        let enc = array![[0.3, 0.1, -0.2], [0.9, 0.4, 0.0], [0.1, 1.2, 0.5], [-0.4, 0.0, 0.8]];
        let labels = [0, 0, 1, -1];
        let mut tape = Tape::new();
        let z = tape.leaf(enc.clone());
        let l = npa_loss_tape(&mut tape, z, &labels, &anchors).unwrap();
        assert!((tape.scalar(l) - npa_loss(&enc, &labels, &anchors).unwrap()).abs() < 1e-15);
        let g = tape.backward(l);
        assert!(g.get(z).unwrap().row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vida_loss_examples() {
        let fixed = FixedPriorSet::new(10, 0.01).unwrap();
        assert!((fixed.means[9] + 1.2).abs() < 1e-12);
        let mut mean = vec![1.5; 4];
        let exact = BatchClassStats {
            class_id: 0,
            mean: mean.clone(),
            var: vec![0.01; 4],
            count: 8,
        };
        assert!(vida_loss(std::slice::from_ref(&exact), &fixed).unwrap().abs() < 1e-12);
        mean[1] += 0.3;
        let off = BatchClassStats { mean, ..exact.clone() };
        assert!((vida_loss(std::slice::from_ref(&off), &fixed).unwrap() - 4.5).abs() < 1e-9);
        let unit = FixedPriorSet::new(10, 1.0).unwrap();
        let off_unit = BatchClassStats { var: vec![1.0; 4], ..off };
        assert!((vida_loss(&[off_unit], &unit).unwrap() - 0.045).abs() < 1e-12);
        let missing = BatchClassStats { class_id: 12, ..exact };
        assert!(matches!(vida_loss(&[missing], &fixed), Err(Error::Config(_))));
        assert!(FixedPriorSet::new(3, 0.0).is_err());
    }

    #[test]
    fn fixed_means_distinct_and_digest_stable() {
        let fixed = FixedPriorSet::new(50, 0.01).unwrap();
        for i in 0..50 {
            for j in 0..i {
                assert_ne!(fixed.means[i], fixed.means[j]);
            }
        }
        let a = prior_digest(&fixed.priors(16));
        assert_eq!(a, prior_digest(&fixed.priors(16)));
        assert_eq!(a.len(), 64);
        assert_ne!(a, prior_digest(&FixedPriorSet::new(50, 1.0).unwrap().priors(16)));
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["source_only", "cdan", "npa+0", "npa+0.5", "vida(0.0001)", "vida(1)", "gvida"] {
            let v: Variant = name.parse().unwrap();
            assert_eq!(v.to_string(), name);
        }
        assert_eq!(Variant::SourceOnly.mask([1.0, 2.0, 3.0, 4.0, 5.0]), [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(Variant::Cdan.mask([1.0; 5]), [1.0, 1.0, 0.0, 0.0, 0.0]);
        for bad in ["dann", "npa+-1", "vida(0)", "vida(x)", "npa+"] {
            assert!(matches!(bad.parse::<Variant>(), Err(Error::Config(_))), "{bad}");
        }
        assert_eq!(npa_sweep().len(), 6);
        let json = serde_json::to_string(&Variant::Vida(0.01)).unwrap();
        assert_eq!(json, "\"vida(0.01)\"");
        assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), Variant::Vida(0.01));
    }
}
