//! Global discrete codebook: nearest-entry quantization, soft assignment,
//! assignment entropy, Gumbel-Softmax sampling and usage perplexity.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Distance, Mat, Tape, Var};
use crate::error::{Error, Result};

/// Weight of the commitment term `β‖z − sg(q)‖²`.
pub const COMMITMENT_BETA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    Cosine,
}

impl From<DistanceKind> for Distance {
    fn from(kind: DistanceKind) -> Self {
        match kind {
            DistanceKind::SquaredEuclidean => Distance::SquaredEuclidean,
            DistanceKind::Cosine => Distance::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K × d_e`
    pub entries: Mat,
    pub distance: DistanceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentDistribution {
    /// `b × K`, rows sum to one.
    pub probs: Mat,
    pub temperature: f64,
    pub sampled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodebookMode {
    Train,
    Eval,
}

impl Codebook {
    /// `size` entries drawn uniformly from `[-1, 1]^dim`.
    pub fn random(size: usize, dim: usize, distance: DistanceKind, rng: &mut impl Rng) -> Self {
        assert!(size >= 1 && dim >= 1, "codebook needs K >= 1 and d_e >= 1");
        Self {
            entries: Array2::from_shape_fn((size, dim), |_| rng.random_range(-1.0..1.0)),
            distance,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn distances(&self, z: &Mat) -> Mat {
        assert_eq!(z.ncols(), self.dim(), "encoding dim must equal codebook dim");
        match self.distance {
            DistanceKind::SquaredEuclidean => autodiff::pairwise_sq_dist(z, &self.entries),
            DistanceKind::Cosine => {
                let zn = autodiff::normalize_rows(z);
                let en = autodiff::normalize_rows(&self.entries);
                zn.dot(&en.t()).mapv(|s| 1.0 - s)
            }
        }
    }
}

/// Index of the nearest entry for every row; ties go to the lowest index.
pub fn quantize(z: &Mat, cb: &Codebook) -> Vec<usize> {
    cb.distances(z).rows().into_iter().map(|row| argmin(row.iter().copied())).collect()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    argmin(values.map(|v| -v))
}

/// `p[i, k] ∝ exp(−d(z_i, e_k))`.
pub fn soft_assign(z: &Mat, cb: &Codebook) -> AssignmentDistribution {
    let logits = cb.distances(z).mapv(|d| -d);
    AssignmentDistribution {
        probs: autodiff::softmax_rows(&logits),
        temperature: 1.0,
        sampled: false,
    }
}

/// Mean row entropy in nats, `0 · log 0 = 0`.
pub fn assignment_entropy(a: &AssignmentDistribution) -> f64 {
    mean_row_entropy(&a.probs)
}

pub fn mean_row_entropy(probs: &Mat) -> f64 {
    if probs.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = probs
        .rows()
        .into_iter()
        .map(|row| entropy(row.iter().copied()))
        .sum();
    total / probs.nrows() as f64
}

pub fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Standard Gumbel noise `g = −log(−log u)`, `u ∼ Uniform(0, 1)`.
pub fn gumbel_noise(shape: (usize, usize), rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn(shape, |_| {
        // `random::<f64>()` lies in [0, 1); reflect so u stays in (0, 1].
        let u: f64 = 1.0 - rng.random::<f64>();
        -(-u.ln()).ln()
    })
}

/// Gumbel-Softmax sample `softmax((log p + g) / τ)` with seeded noise.
pub fn gumbel_sample(a: &AssignmentDistribution, tau: f64, seed: u64) -> Result<AssignmentDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gumbel_noise(a.probs.dim(), &mut rng);
    gumbel_sample_with_noise(a, tau, &noise)
}

pub fn gumbel_sample_with_noise(
    a: &AssignmentDistribution,
    tau: f64,
    noise: &Mat,
) -> Result<AssignmentDistribution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    assert_eq!(noise.dim(), a.probs.dim(), "one noise value per probability");
    let logits = Array2::from_shape_fn(a.probs.dim(), |(i, k)| (a.probs[[i, k]].ln() + noise[[i, k]]) / tau);
    Ok(AssignmentDistribution {
        probs: autodiff::softmax_rows(&logits),
        temperature: tau,
        sampled: true,
    })
}

/// Value-only quantized output. Train mode returns the Gumbel-sampled convex
/// combination `P̃ · entries`; eval mode returns `entries[argmax p]`.
pub fn codebook_forward(
    z: &Mat,
    cb: &Codebook,
    tau: f64,
    mode: CodebookMode,
    seed: u64,
) -> Result<(Mat, AssignmentDistribution)> {
    let base = soft_assign(z, cb);
    match mode {
        CodebookMode::Train => {
            let sampled = gumbel_sample(&base, tau, seed)?;
            Ok((sampled.probs.dot(&cb.entries), sampled))
        }
        CodebookMode::Eval => {
            let rows: Vec<usize> = base
                .probs
                .rows()
                .into_iter()
                .map(|r| argmax(r.iter().copied()))
                .collect();
            Ok((cb.entries.select(ndarray::Axis(0), &rows), base))
        }
    }
}

/// `exp(H(mean assignment))`, between 1 and K.
pub fn usage_perplexity(probs: &Mat) -> f64 {
    let mut acc = UsageAccumulator::new(probs.ncols());
    acc.add(probs);
    acc.perplexity()
}

/// Running column sums of assignment rows, for epoch-level perplexity.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageAccumulator {
    sums: Vec<f64>,
    rows: usize,
}

impl UsageAccumulator {
    pub fn new(size: usize) -> Self {
        Self {
            sums: vec![0.0; size],
            rows: 0,
        }
    }

    pub fn add(&mut self, probs: &Mat) {
        for row in probs.rows() {
            for (s, v) in self.sums.iter_mut().zip(row.iter()) {
                *s += v;
            }
        }
        self.rows += probs.nrows();
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn perplexity(&self) -> f64 {
        if self.rows == 0 {
            return 1.0;
        }
        let n = self.rows as f64;
        entropy(self.sums.iter().map(|s| s / n)).exp()
    }
}

/// Nodes produced by [`codebook_tape`].
pub struct CodebookGraph {
    /// Unsampled soft assignment `p`, `b × K`.
    pub probs: Var,
    /// `−H(p)` averaged over rows (the entropy loss to minimise).
    pub neg_entropy: Var,
    /// Quantized output: value `P̃ · entries`; the encoder sees identity
    /// gradients and the entries see the convex combination with `P̃` held
    /// fixed.
    pub quantized: Var,
    /// `‖sg(z) − q‖² + β‖z − sg(q)‖²`, averaged over rows.
    pub vq_loss: Var,
}

/// Records the train-mode codebook path for encodings `z` (`b × d_e`) and
/// entries (`K × d_e`) with pre-drawn Gumbel `noise` (`b × K`).
pub fn codebook_tape(
    tape: &mut Tape,
    z: Var,
    entries: Var,
    distance: DistanceKind,
    tau: f64,
    noise: &Mat,
) -> Result<CodebookGraph> {
    codebook_tape_with(tape, z, entries, distance, tau, noise, true)
}

/// As [`codebook_tape`]; with `straight_through = false` the Gumbel-Softmax
/// selection stays differentiable and the identity pass-through is dropped.
/// Forward values are the same either way, and the relaxed graph's gradient
/// is the exact derivative of those values.
pub fn codebook_tape_with(
    tape: &mut Tape,
    z: Var,
    entries: Var,
    distance: DistanceKind,
    tau: f64,
    noise: &Mat,
    straight_through: bool,
) -> Result<CodebookGraph> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    let b = tape.shape(z).0 as f64;
    let dist = tape.pairwise_dist(z, entries, distance.into());
    let logits = tape.scale(dist, -1.0);
    let log_probs = tape.log_softmax_rows(logits);
    let probs = tape.softmax_rows(logits);

    let plogp = tape.mul(probs, log_probs);
    let total = tape.sum(plogp);
    let neg_entropy = tape.scale(total, 1.0 / b);

    let z_stop = tape.detach(z);
    let (soft, quantized) = if straight_through {
        // The discrete (sampled) selection carries no gradient.
        let sampled = {
            let lp = tape.value(log_probs);
            autodiff::softmax_rows(&((lp + noise) / tau))
        };
        let selection = tape.constant(sampled);
        let soft = tape.matmul(selection, entries);
        let passthrough = tape.sub(z, z_stop);
        (soft, tape.add(soft, passthrough))
    } else {
        let g = tape.constant(noise.clone());
        let perturbed = tape.add(log_probs, g);
        let scaled = tape.scale(perturbed, 1.0 / tau);
        let selection = tape.softmax_rows(scaled);
        let soft = tape.matmul(selection, entries);
        (soft, soft)
    };

    let soft_stop = tape.detach(soft);
    let codebook_gap = tape.sub(z_stop, soft);
    let codebook_sq = tape.square(codebook_gap);
    let codebook_term = tape.sum(codebook_sq);
    let commit_gap = tape.sub(z, soft_stop);
    let commit_sq = tape.square(commit_gap);
    let commit_sum = tape.sum(commit_sq);
    let commit_term = tape.scale(commit_sum, COMMITMENT_BETA);
    let vq_sum = tape.add(codebook_term, commit_term);
    let vq_loss = tape.scale(vq_sum, 1.0 / b);

    Ok(CodebookGraph {
        probs,
        neg_entropy,
        quantized,
        vq_loss,
    })
}

/// Linear temperature annealing from `start` to `end` over progress `p ∈ [0, 1]`.
pub fn temperature(start: f64, end: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    start + (end - start) * p
}
