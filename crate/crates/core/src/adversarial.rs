//! Conditional adversarial alignment: multilinear conditioning of features
//! on class probabilities, gradient reversal and the domain BCE loss.

use crate::autodiff::{self, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Mode, Network, ParamStore};

/// Discriminator outputs are clipped to `[CLIP, 1 − CLIP]` before the log.
pub const CLIP: f64 = 1e-7;

/// Row-wise flattened outer product `h[i] = vec(f[i] ⊗ p[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedFeature {
    pub h: Mat,
}

pub fn multilinear_condition(f: &Mat, probs: &Mat) -> Result<ConditionedFeature> {
    if f.nrows() != probs.nrows() {
        return Err(Error::Parameter(format!(
            "{} feature rows vs {} probability rows",
            f.nrows(),
            probs.nrows()
        )));
    }
    Ok(ConditionedFeature {
        h: autodiff::row_outer(f, probs),
    })
}

/// Reversal strength schedule `2 / (1 + e^{−10p}) − 1` over training
/// progress `p ∈ [0, 1]`.
pub fn lambda_schedule(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress.clamp(0.0, 1.0)).exp()) - 1.0
}

/// Mean binary cross-entropy of discriminator outputs with source labelled
/// 1 and target labelled 0, averaged over all rows of both domains.
pub fn domain_bce(out_source: &Mat, out_target: &Mat) -> f64 {
    let n = out_source.len() + out_target.len();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = out_source.iter().map(|&d| -d.clamp(CLIP, 1.0 - CLIP).ln()).sum();
    let t: f64 = out_target.iter().map(|&d| -(1.0 - d.clamp(CLIP, 1.0 - CLIP)).ln()).sum();
    (s + t) / n as f64
}

/// Domain BCE of `discriminator` (eval mode) on conditioned features.
pub fn adversarial_loss(
    h_source: &ConditionedFeature,
    h_target: &ConditionedFeature,
    discriminator: &Network,
    params: &ParamStore,
) -> Result<f64> {
    let out_s = discriminator.forward(params, &h_source.h)?;
    let out_t = discriminator.forward(params, &h_target.h)?;
    Ok(domain_bce(&out_s, &out_t))
}

/// Records the conditional adversarial term on `tape`.
///
/// Features pass through gradient reversal with strength `lambda` before the
/// discriminator; class probabilities condition the features but are held
/// fixed, so only the feature path is trained adversarially.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss_tape(
    tape: &mut Tape,
    vars: &[Var],
    discriminator: &Network,
    features: &[(Var, Var)],
    domains: &[bool],
    lambda: f64,
    mode: &mut Mode<'_>,
) -> Var {
    assert_eq!(features.len(), domains.len(), "one domain flag per feature block");
    let mut blocks = Vec::with_capacity(features.len());
    let mut targets = Vec::new();
    for (&(f, p), &is_source) in features.iter().zip(domains) {
        let rows = tape.shape(f).0;
        if rows == 0 {
            continue;
        }
        let p_fixed = tape.detach(p);
        let h = tape.row_outer(f, p_fixed);
        blocks.push(h);
        targets.extend(std::iter::repeat_n(if is_source { 1.0 } else { 0.0 }, rows));
    }
    if blocks.is_empty() {
        return tape.constant(Mat::zeros((1, 1)));
    }
    let h = tape.concat_rows(&blocks);
    let h = tape.reverse_grad(h, lambda);
    let out = discriminator.forward_tape(tape, vars, h, mode, true);
    bce_tape(tape, out, &targets)
}

/// Mean BCE of `b × 1` probabilities `out` against 0/1 `targets`, with the
/// clip applied before the logs.
pub fn bce_tape(tape: &mut Tape, out: Var, targets: &[f64]) -> Var {
    let n = targets.len();
    let y = tape.constant(Mat::from_shape_vec((n, 1), targets.to_vec()).expect("n × 1"));
    let one_minus_y = tape.constant(Mat::from_shape_fn((n, 1), |(i, _)| 1.0 - targets[i]));
    let d = tape.clamp(out, CLIP, 1.0 - CLIP);
    let log_d = tape.log(d);
    let neg_d = tape.scale(d, -1.0);
    let one_minus_d = tape.add_scalar(neg_d, 1.0);
    let log_1md = tape.log(one_minus_d);
    let a = tape.mul(y, log_d);
    let b = tape.mul(one_minus_y, log_1md);
    let ll = tape.add(a, b);
    let mean = tape.mean(ll);
    tape.scale(mean, -1.0)
}
