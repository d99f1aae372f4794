//! The five-term training objective, the epoch loop with prior and
//! pseudo-label refresh, and evaluation.

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial;
use crate::autodiff::{Mat, Tape, Var};
use crate::baselines::{self, AnchorSet, FixedPriorSet, Variant};
use crate::codebook::{self, Codebook, DistanceKind};
use crate::data::{self, DomainDataset, SENTINEL};
use crate::error::{Error, Result};
use crate::nets::{self, Activation, Mode, Network, NetworkSpec, ParamStore, Sgd};
use crate::priors::{self, ClassPrior};
use crate::robust::{self, AugmentedBatch, PseudoLabelSet};

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "step",
    "l1",
    "l2",
    "l3",
    "l4",
    "l5",
    "total",
    "acc_target",
    "perplexity",
    "mean_class_var",
    "accepted_frac",
];

/// `d_e · ln K`, the constant part of the bound.
pub fn elbo_constant(latent_dim: usize, codebook_size: usize) -> f64 {
    latent_dim as f64 * (codebook_size as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub step: usize,
    pub l1_srm: f64,
    pub l2_adv: f64,
    pub l3_align: f64,
    /// Negated mean assignment entropy.
    pub l4_entropy: f64,
    /// Reconstruction plus codebook/commitment terms.
    pub l5_recon: f64,
    pub elbo_constant: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.l1_srm, self.l2_adv, self.l3_align, self.l4_entropy, self.l5_recon]
    }
}

fn default_lambdas() -> [f64; 5] {
    [1.0, 1.0, 0.1, 0.01, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weights of (SRM, adversarial, alignment, entropy, reconstruction).
    pub lambdas: [f64; 5],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Apply `lr / (1 + 10p)^0.75` over training progress `p`.
    pub lr_decay: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Pseudo-label entropy threshold in nats; `0.5 · ln C` when absent.
    pub entropy_threshold: Option<f64>,
    /// Perturbation std as a multiple of the per-dimension feature std.
    pub sigma_scale: f64,
    pub warmup_epochs: usize,
    /// Generate perturbed-and-regenerated target features (codebook
    /// variants only).
    pub augment: bool,
    /// Rescale the joint gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    /// Learning-rate multiplier for the domain discriminator.
    pub discriminator_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            lr_decay: true,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            tau_start: 1.0,
            tau_end: 0.5,
            entropy_threshold: None,
            sigma_scale: 0.1,
            warmup_epochs: 2,
            augment: true,
            max_grad_norm: Some(5.0),
            discriminator_lr_mult: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad(format!("loss weights must be finite and >= 0, got {:?}", self.lambdas));
        }
        if self.lambdas[0] <= 0.0 {
            return bad("the classification weight must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_start.is_finite() && self.tau_end.is_finite()) {
            return bad("temperatures must be > 0".into());
        }
        if let Some(t) = self.entropy_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("entropy_threshold must be >= 0, got {t}"));
            }
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("max_grad_norm must be > 0, got {g}"));
            }
        }
        if !(self.discriminator_lr_mult > 0.0 && self.discriminator_lr_mult.is_finite()) {
            return bad(format!("discriminator_lr_mult must be > 0, got {}", self.discriminator_lr_mult));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return bad(format!("sigma_scale must be >= 0, got {}", self.sigma_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output width of the feature generator.
    pub hidden: usize,
    pub encoder_hidden: usize,
    pub latent: usize,
    pub discriminator_hidden: usize,
    pub codebook_size: usize,
    pub distance: DistanceKind,
    /// Dropout after each hidden discriminator layer.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            encoder_hidden: 32,
            latent: 16,
            discriminator_hidden: 32,
            codebook_size: 32,
            distance: DistanceKind::SquaredEuclidean,
            dropout: 0.0,
        }
    }
}

/// Fully resolved layer widths for one dataset and variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub class_count: usize,
    pub generator: NetworkSpec,
    pub encoder: NetworkSpec,
    pub decoder: NetworkSpec,
    pub classifier: NetworkSpec,
    pub discriminator: NetworkSpec,
    pub codebook_size: usize,
    pub distance: DistanceKind,
}

/// Feature width at which the digit-scale layer shapes are used.
pub const DIGIT_FEATURE_DIM: usize = 512;

impl ModelSpec {
    pub fn resolve(cfg: &ModelConfig, input_dim: usize, class_count: usize, variant: Variant) -> Result<Self> {
        if input_dim == 0 || class_count < 2 {
            return Err(Error::Config(format!(
                "need input_dim >= 1 and C >= 2 (got {input_dim}, {class_count})"
            )));
        }
        if cfg.hidden == 0 || cfg.encoder_hidden == 0 || cfg.latent == 0 || cfg.discriminator_hidden == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if cfg.codebook_size == 0 {
            return Err(Error::Config("codebook_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", cfg.dropout)));
        }
        let (hidden, enc_hidden, mut latent) = if input_dim == DIGIT_FEATURE_DIM {
            (512, 256, 128)
        } else {
            (cfg.hidden, cfg.encoder_hidden, cfg.latent)
        };
        if let Variant::Npa(_) = variant {
            latent = class_count * baselines::anchor_width(latent, class_count);
        }
        use Activation::*;
        let spec = Self {
            input_dim,
            class_count,
            generator: NetworkSpec::mlp("generator", &[input_dim, hidden], Rectifier, Rectifier),
            encoder: NetworkSpec::mlp("encoder", &[hidden, enc_hidden, latent], Rectifier, Identity),
            decoder: NetworkSpec::mlp("decoder", &[latent, enc_hidden, hidden], Rectifier, Identity),
            classifier: NetworkSpec::mlp("classifier", &[latent, class_count], Identity, Softmax),
            discriminator: NetworkSpec::mlp(
                "discriminator",
                &[latent * class_count, cfg.discriminator_hidden, 1],
                Rectifier,
                Sigmoid,
            ),
            codebook_size: cfg.codebook_size,
            distance: cfg.distance,
        };
        let spec = Self {
            discriminator: with_hidden_dropout(spec.discriminator.clone(), cfg.dropout),
            ..spec
        };
        Ok(spec)
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }
}

fn with_hidden_dropout(mut spec: NetworkSpec, rate: f64) -> NetworkSpec {
    let n = spec.layers.len();
    for layer in spec.layers.iter_mut().take(n - 1) {
        layer.dropout = rate;
    }
    spec
}

const CODEBOOK_TENSOR: &str = "codebook.entries";

#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub generator: Network,
    pub encoder: Network,
    pub decoder: Network,
    pub classifier: Network,
    pub discriminator: Network,
    /// Param id of the `K × d_e` codebook entries.
    pub codebook: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub nets: Networks,
}

impl Model {
    /// Seeded initialization. Tensors are drawn in a fixed order so variants
    /// with equal shapes start from identical weights.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let generator = params.init_network(&spec.generator, &mut rng)?;
        let encoder = params.init_network(&spec.encoder, &mut rng)?;
        let decoder = params.init_network(&spec.decoder, &mut rng)?;
        let classifier = params.init_network(&spec.classifier, &mut rng)?;
        let discriminator = params.init_network(&spec.discriminator, &mut rng)?;
        let cb = Codebook::random(spec.codebook_size, spec.latent_dim(), spec.distance, &mut rng);
        let codebook = params.insert(CODEBOOK_TENSOR, cb.entries);
        Ok(Self {
            nets: Networks {
                generator,
                encoder,
                decoder,
                classifier,
                discriminator,
                codebook,
            },
            spec,
            params,
        })
    }

    /// Rebinds a spec to tensors loaded from a checkpoint.
    pub fn attach(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let codebook = params
            .id(CODEBOOK_TENSOR)
            .ok_or_else(|| Error::Parameter(format!("missing tensor {CODEBOOK_TENSOR}")))?;
        if params.values()[codebook].dim() != (spec.codebook_size, spec.latent_dim()) {
            return Err(Error::Parameter("codebook tensor has the wrong shape".into()));
        }
        Ok(Self {
            nets: Networks {
                generator: Network::attach(&spec.generator, &params)?,
                encoder: Network::attach(&spec.encoder, &params)?,
                decoder: Network::attach(&spec.decoder, &params)?,
                classifier: Network::attach(&spec.classifier, &params)?,
                discriminator: Network::attach(&spec.discriminator, &params)?,
                codebook,
            },
            spec,
            params,
        })
    }

    pub fn features(&self, x: &Mat) -> Result<Mat> {
        self.nets.generator.forward(&self.params, x)
    }

    pub fn encode_features(&self, f: &Mat) -> Result<Mat> {
        self.nets.encoder.forward(&self.params, f)
    }

    pub fn encode(&self, x: &Mat) -> Result<Mat> {
        self.encode_features(&self.features(x)?)
    }

    pub fn decode(&self, q: &Mat) -> Result<Mat> {
        self.nets.decoder.forward(&self.params, q)
    }

    pub fn classify_latent(&self, z: &Mat) -> Result<Mat> {
        self.nets.classifier.forward(&self.params, z)
    }

    pub fn predict_proba(&self, x: &Mat) -> Result<Mat> {
        self.classify_latent(&self.encode(x)?)
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(x)?))
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.params.values()[self.nets.codebook].clone(),
            distance: self.spec.distance,
        }
    }
}

fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Fraction of positions where `predicted == truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "prediction/label count mismatch");
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

pub fn evaluate(model: &Model, ds: &DomainDataset) -> Result<f64> {
    Ok(accuracy(&model.predict(&ds.features)?, &ds.labels))
}

/// Mean negative log-likelihood of `labels` under `probs`, with
/// probabilities clipped to `[1e-12, 1]`.
pub fn srm_loss(probs: &Mat, labels: &[usize]) -> f64 {
    assert_eq!(probs.nrows(), labels.len(), "one label per row");
    if labels.is_empty() {
        return 0.0;
    }
    let nll: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].clamp(1e-12, 1.0).ln())
        .sum();
    nll / labels.len() as f64
}

/// Mean over rows of `‖x_i − x̂_i‖²`.
pub fn reconstruction_loss(x: &Mat, x_hat: &Mat) -> f64 {
    assert_eq!(x.dim(), x_hat.dim(), "reconstruction shape mismatch");
    if x.nrows() == 0 {
        return 0.0;
    }
    (x - x_hat).mapv(|v| v * v).sum() / x.nrows() as f64
}

/// What the alignment term matches batch statistics against.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentTarget {
    None,
    /// KL to class-conditional Gaussian priors (refreshed or fixed).
    Priors(Vec<ClassPrior>),
    /// Mean-matching to (already noise-sampled) anchor rows.
    Anchors(Mat),
}

/// Everything one objective evaluation needs besides the parameters.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub source: &'a Mat,
    pub source_labels: &'a [usize],
    pub target: &'a Mat,
    /// Accepted pseudo-labels or [`SENTINEL`].
    pub target_labels: &'a [i64],
    /// Augmented target features in generator space.
    pub augmented: Option<&'a AugmentedBatch>,
    pub lambdas: [f64; 5],
    pub use_codebook: bool,
    pub alignment: &'a AlignmentTarget,
    pub tau: f64,
    /// Strength of the gradient reversal in front of the discriminator.
    pub grl: f64,
    /// Gumbel noise for the `n_s + n_t` codebook rows.
    pub gumbel: &'a Mat,
    pub dropout_seed: u64,
    /// Record on an exact tape with the differentiable codebook relaxation,
    /// so the returned gradient is the true derivative of `total` (no
    /// stop-gradients, reversal or straight-through estimates).
    pub exact: bool,
}

/// Output of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub terms: [f64; 5],
    pub total: f64,
    /// One gradient per parameter tensor.
    pub grads: Vec<Mat>,
    /// Source encodings as computed during the pass.
    pub source_latent: Mat,
    /// Soft codebook assignments of the `n_s + n_t` rows, when used.
    pub assignments: Option<Mat>,
}

const TERM_NAMES: [&str; 5] = ["srm", "adversarial", "alignment", "entropy", "reconstruction"];

/// Labels of classes with fewer than two rows replaced by the sentinel:
/// a single row has no variance to compare against a prior.
fn drop_singletons(labels: &[i64]) -> Vec<i64> {
    let groups = priors::group_by_class(labels);
    labels
        .iter()
        .map(|&l| match usize::try_from(l).ok().and_then(|c| groups.get(&c)) {
            Some(rows) if rows.len() >= 2 => l,
            _ => SENTINEL,
        })
        .collect()
}

fn alignment_term(tape: &mut Tape, z: Var, labels: &[i64], target: &AlignmentTarget) -> Result<Option<Var>> {
    match target {
        AlignmentTarget::None => Ok(None),
        AlignmentTarget::Priors(p) => Ok(Some(priors::alignment_loss_tape(tape, z, &drop_singletons(labels), p)?)),
        AlignmentTarget::Anchors(a) => Ok(Some(baselines::npa_loss_tape(tape, z, labels, a)?)),
    }
}

/// Builds the full objective on a fresh tape and backpropagates it.
pub fn objective(model: &Model, params: &ParamStore, inp: &StepInputs<'_>) -> Result<Objective> {
    let nets = &model.nets;
    let ns = inp.source.nrows();
    let nt = inp.target.nrows();
    assert_eq!(ns, inp.source_labels.len(), "one label per source row");
    assert_eq!(nt, inp.target_labels.len(), "one label per target row");
    let mut tape = if inp.exact { Tape::exact() } else { Tape::new() };
    let vars = params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(inp.dropout_seed);
    let mut mode = Mode::Train(&mut rng);
    let lam = inp.lambdas;

    let xs = tape.constant(inp.source.clone());
    let xt = tape.constant(inp.target.clone());
    let fs = nets.generator.forward_tape(&mut tape, &vars, xs, &mut mode, true);
    let ft = nets.generator.forward_tape(&mut tape, &vars, xt, &mut mode, true);
    let zs = nets.encoder.forward_tape(&mut tape, &vars, fs, &mut mode, true);
    let zt = nets.encoder.forward_tape(&mut tape, &vars, ft, &mut mode, true);
    let za = match inp.augmented {
        Some(a) if !a.is_empty() => {
            let fa = tape.constant(a.features.clone());
            Some(nets.encoder.forward_tape(&mut tape, &vars, fa, &mut mode, true))
        }
        _ => None,
    };

    let logits_s = nets.classifier.forward_tape(&mut tape, &vars, zs, &mut mode, false);
    let log_ps = tape.log_softmax_rows(logits_s);
    let picked = tape.pick(log_ps, inp.source_labels.to_vec());
    let mean_ll = tape.mean(picked);
    let l1 = tape.scale(mean_ll, -1.0);

    let mut terms: [Option<Var>; 5] = [Some(l1), None, None, None, None];

    if lam[1] > 0.0 {
        let ps = tape.softmax_rows(logits_s);
        let logits_t = nets.classifier.forward_tape(&mut tape, &vars, zt, &mut mode, false);
        let pt = tape.softmax_rows(logits_t);
        let mut blocks = vec![(zs, ps), (zt, pt)];
        let mut domains = vec![true, false];
        if let Some(za) = za {
            let logits_a = nets.classifier.forward_tape(&mut tape, &vars, za, &mut mode, false);
            let pa = tape.softmax_rows(logits_a);
            blocks.push((za, pa));
            domains.push(false);
        }
        terms[1] = Some(adversarial::adversarial_loss_tape(
            &mut tape,
            &vars,
            &nets.discriminator,
            &blocks,
            &domains,
            inp.grl,
            &mut mode,
        ));
    }

    if lam[2] > 0.0 {
        let source_labels: Vec<i64> = inp.source_labels.iter().map(|&l| l as i64).collect();
        let src = alignment_term(&mut tape, zs, &source_labels, inp.alignment)?;
        let (zt_pool, tgt_labels) = match (za, inp.augmented) {
            (Some(za), Some(a)) => {
                let pool = tape.concat_rows(&[zt, za]);
                let mut labels = inp.target_labels.to_vec();
                labels.extend(a.labels.iter().map(|&l| l as i64));
                (pool, labels)
            }
            _ => (zt, inp.target_labels.to_vec()),
        };
        let tgt = alignment_term(&mut tape, zt_pool, &tgt_labels, inp.alignment)?;
        terms[2] = match (src, tgt) {
            (Some(a), Some(b)) => Some(tape.add(a, b)),
            _ => None,
        };
    }

    let mut assignments = None;
    if lam[3] > 0.0 || lam[4] > 0.0 {
        let z_all = tape.concat_rows(&[zs, zt]);
        let f_all = tape.concat_rows(&[fs, ft]);
        let target = tape.detach(f_all);
        let (decoded_from, vq) = if inp.use_codebook {
            let graph = codebook::codebook_tape_with(
                &mut tape,
                z_all,
                vars[nets.codebook],
                model.spec.distance,
                inp.tau,
                inp.gumbel,
                !inp.exact,
            )?;
            assignments = Some(tape.value(graph.probs).clone());
            if lam[3] > 0.0 {
                terms[3] = Some(graph.neg_entropy);
            }
            (graph.quantized, Some(graph.vq_loss))
        } else {
            (z_all, None)
        };
        if lam[4] > 0.0 {
            let x_hat = nets.decoder.forward_tape(&mut tape, &vars, decoded_from, &mut mode, true);
            let diff = tape.sub(x_hat, target);
            let sq = tape.square(diff);
            let sum = tape.sum(sq);
            let mut l5 = tape.scale(sum, 1.0 / (ns + nt) as f64);
            if let Some(vq) = vq {
                l5 = tape.add(l5, vq);
            }
            terms[4] = Some(l5);
        }
    }

    let mut values = [0.0; 5];
    let mut weighted = Vec::new();
    for (i, term) in terms.iter().enumerate() {
        if let Some(t) = *term {
            let v = tape.scalar(t);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{} loss is {v}", TERM_NAMES[i])));
            }
            values[i] = v;
            if lam[i] > 0.0 {
                weighted.push(tape.scale(t, lam[i]));
            }
        }
    }
    let total_var = priors::sum_terms(&mut tape, &weighted);
    let total = tape.scalar(total_var);
    let grads = tape.backward(total_var);
    let grads: Vec<Mat> = vars
        .iter()
        .zip(params.values())
        .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
        .collect();
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(Objective {
        terms: values,
        total,
        grads,
        source_latent: tape.value(zs).clone(),
        assignments,
    })
}

/// Mutable training state: model, optimizer and counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub sgd: Sgd,
    pub step: usize,
    /// Per-tensor learning-rate multipliers.
    pub lr_mult: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let mut lr_mult = vec![1.0; model.params.len()];
        for id in model.nets.discriminator.param_ids() {
            lr_mult[id] = cfg.discriminator_lr_mult;
        }
        Self {
            sgd: Sgd::new(&model.params, cfg.momentum, cfg.weight_decay),
            model,
            step: 0,
            lr_mult,
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

/// One optimizer step on every network and the codebook.
pub fn train_step(
    state: &mut TrainState,
    inputs: &StepInputs<'_>,
    lr: f64,
    max_grad_norm: Option<f64>,
    epoch: usize,
) -> Result<(LossBreakdown, Objective)> {
    let mut obj = objective(&state.model, &state.model.params, inputs)?;
    if let Some(max) = max_grad_norm {
        clip_grad_norm(&mut obj.grads, max);
    }
    state.sgd.step_scaled(&mut state.model.params, &obj.grads, lr, &state.lr_mult);
    if !state.model.params.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step)));
    }
    let breakdown = LossBreakdown {
        epoch,
        step: state.step,
        l1_srm: obj.terms[0],
        l2_adv: obj.terms[1],
        l3_align: obj.terms[2],
        l4_entropy: obj.terms[3],
        l5_recon: obj.terms[4],
        elbo_constant: elbo_constant(state.model.spec.latent_dim(), state.model.spec.codebook_size),
        total: obj.total,
    };
    state.step += 1;
    Ok((breakdown, obj))
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
    pub total: f64,
    pub acc_target: f64,
    pub perplexity: f64,
    pub mean_class_var: f64,
    pub accepted_frac: f64,
}

/// Per-epoch pseudo-label bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelLog {
    pub epoch: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub augmented: usize,
    pub entropy_histogram: Vec<usize>,
}

pub const ENTROPY_BINS: usize = 10;

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub variant: Variant,
    /// Priors in force during the last epoch (empty for variants without
    /// KL alignment).
    pub priors: Vec<ClassPrior>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub trained: TrainedModel,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<LossBreakdown>,
    pub pseudo_labels: Vec<PseudoLabelLog>,
    /// Digest of the prior set used in each epoch.
    pub prior_digests: Vec<String>,
}

/// SplitMix64 mix of a base seed with stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_STEP: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_ANCHOR: u64 = 5;

/// Learning rate after progress `p ∈ [0, 1]`.
pub fn learning_rate(cfg: &TrainConfig, progress: f64) -> f64 {
    if cfg.lr_decay {
        cfg.learning_rate / (1.0 + 10.0 * progress).powf(0.75)
    } else {
        cfg.learning_rate
    }
}

/// Target labels for a batch: accepted pseudo-labels, the sentinel
/// otherwise.
pub fn filtered_target_labels(indices: &[usize], set: Option<&PseudoLabelSet>) -> Vec<i64> {
    match set {
        None => vec![SENTINEL; indices.len()],
        Some(set) => indices
            .iter()
            .map(|&i| if set.accepted[i] { set.labels[i] as i64 } else { SENTINEL })
            .collect(),
    }
}

fn assert_filter_sound(labels: &[i64], indices: &[usize], set: Option<&PseudoLabelSet>) {
    for (&l, &i) in labels.iter().zip(indices) {
        if l == SENTINEL {
            continue;
        }
        let set = set.expect("target label used before pseudo-labelling");
        assert!(
            set.accepted[i] && set.labels[i] as i64 == l,
            "rejected target row {i} reached the objective"
        );
    }
}

fn check_pair(source: &DomainDataset, target: &DomainDataset) -> Result<()> {
    source.validate()?;
    target.validate()?;
    if source.dim() != target.dim() {
        return Err(Error::Config(format!(
            "source has {} features, target {}",
            source.dim(),
            target.dim()
        )));
    }
    if source.class_count != target.class_count {
        return Err(Error::Config(format!(
            "source has {} classes, target {}",
            source.class_count, target.class_count
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config("both domains need at least one row".into()));
    }
    Ok(())
}

/// Trains `variant` from scratch.
pub fn fit(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    variant: Variant,
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<FitOutput> {
    cfg.validate()?;
    check_pair(source, target)?;
    let c = source.class_count;
    let spec = ModelSpec::resolve(model_cfg, source.dim(), c, variant)?;
    let model = Model::new(spec, cfg.seed)?;
    let mut state = TrainState::new(model, cfg);
    let latent = state.model.spec.latent_dim();
    let lambdas = variant.mask(cfg.lambdas);
    let use_codebook = variant.uses_codebook();
    let threshold = cfg.entropy_threshold.unwrap_or_else(|| robust::default_threshold(c));

    let fixed = match variant {
        Variant::Vida(v) => Some(FixedPriorSet::new(c, v)?.priors(latent)),
        _ => None,
    };
    let anchors: Option<AnchorSet> = match variant {
        Variant::Npa(x) => Some(baselines::build_anchors(c, latent / c, x)?),
        _ => None,
    };
    let fixed_digest = fixed.as_ref().map(|p| baselines::prior_digest(p));

    let n_src_batches = source.len().div_ceil(cfg.batch_size);
    let n_tgt_batches = target.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = n_src_batches.max(n_tgt_batches);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;

    // Warm-up pass: epoch-0 priors come from the initial encoder.
    let mut buffer = state.model.encode(&source.features)?;
    let mut buffer_labels = source.labels.clone();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut pl_logs = Vec::with_capacity(cfg.epochs);
    let mut digests = Vec::with_capacity(cfg.epochs);
    let mut priors_in_force = Vec::new();

    for epoch in 0..cfg.epochs {
        let alignment = if let Some(fixed) = &fixed {
            let digest = baselines::prior_digest(fixed);
            assert_eq!(Some(&digest), fixed_digest.as_ref(), "fixed priors changed");
            digests.push(digest);
            priors_in_force = fixed.clone();
            AlignmentTarget::Priors(fixed.clone())
        } else if anchors.is_some() {
            AlignmentTarget::None
        } else if lambdas[2] > 0.0 {
            let p = priors::estimate_epoch_priors(&buffer, &buffer_labels, c)?;
            digests.push(baselines::prior_digest(&p));
            priors_in_force = p.clone();
            AlignmentTarget::Priors(p)
        } else {
            AlignmentTarget::None
        };

        let progress_start = (epoch * steps_per_epoch) as f64 / total_steps;
        let pseudo = if epoch >= cfg.warmup_epochs {
            let probs = state.model.predict_proba(&target.features)?;
            Some(robust::pseudo_label(&probs, threshold)?)
        } else {
            None
        };
        let augmented = match &pseudo {
            Some(set) if use_codebook && cfg.augment && set.accepted_count() > 0 => {
                let idx = set.accepted_indices();
                let labels = set.accepted_labels();
                let feats = state.model.features(&target.features.select(Axis(0), &idx))?;
                let sigmas: Vec<f64> = robust::default_sigma(&feats)
                    .into_iter()
                    .map(|s| s * cfg.sigma_scale / 0.1)
                    .collect();
                let seed = derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64]);
                let perturbed = robust::perturb_per_dim(&feats, &labels, &sigmas, seed)?;
                let tau = codebook::temperature(cfg.tau_start, cfg.tau_end, progress_start);
                let model = &state.model;
                robust::regenerate(
                    &perturbed.features,
                    &labels,
                    &model.codebook(),
                    |f| model.encode_features(f),
                    |q| model.decode(q),
                    tau,
                    seed ^ 1,
                )?
            }
            _ => AugmentedBatch::empty(state.model.spec.generator.output_dim(), robust::Provenance::Regenerated),
        };
        pl_logs.push(match &pseudo {
            Some(set) => PseudoLabelLog {
                epoch,
                accepted: set.accepted_count(),
                rejected: set.accepted.len() - set.accepted_count(),
                augmented: augmented.len(),
                entropy_histogram: set.entropy_histogram(c, ENTROPY_BINS),
            },
            None => PseudoLabelLog {
                epoch,
                accepted: 0,
                rejected: 0,
                augmented: 0,
                entropy_histogram: vec![0; ENTROPY_BINS],
            },
        });

        let src_batches = data::batches(source, cfg.batch_size, derive_seed(cfg.seed, &[STREAM_SOURCE, epoch as u64]), true);
        let tgt_batches = data::batches(target, cfg.batch_size, derive_seed(cfg.seed, &[STREAM_TARGET, epoch as u64]), true);
        let aug_chunk = augmented.len().div_ceil(steps_per_epoch);

        let mut next_buffer = Mat::zeros((0, latent));
        let mut next_labels = Vec::new();
        let mut sums = [0.0; 6];
        for s in 0..steps_per_epoch {
            let bs = &src_batches[s % n_src_batches];
            let bt = &tgt_batches[s % n_tgt_batches];
            let source_labels: Vec<usize> = bs.indices.iter().map(|&i| source.labels[i]).collect();
            let target_labels = filtered_target_labels(&bt.indices, pseudo.as_ref());
            assert_filter_sound(&target_labels, &bt.indices, pseudo.as_ref());

            let aug_slice = if aug_chunk > 0 {
                let lo = (s * aug_chunk).min(augmented.len());
                let hi = ((s + 1) * aug_chunk).min(augmented.len());
                let rows: Vec<usize> = (lo..hi).collect();
                Some(AugmentedBatch {
                    features: augmented.features.select(Axis(0), &rows),
                    labels: augmented.labels[lo..hi].to_vec(),
                    provenance: augmented.provenance,
                })
            } else {
                None
            };

            let progress = state.step as f64 / total_steps;
            let step_seed = derive_seed(cfg.seed, &[STREAM_STEP, state.step as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            let gumbel = codebook::gumbel_noise((bs.len() + bt.len(), state.model.spec.codebook_size), &mut rng);
            let anchor_target;
            let align_ref = match &anchors {
                Some(a) => {
                    anchor_target = AlignmentTarget::Anchors(a.sample_seeded(derive_seed(cfg.seed, &[STREAM_ANCHOR, state.step as u64])));
                    &anchor_target
                }
                None => &alignment,
            };
            let inputs = StepInputs {
                source: &bs.features,
                source_labels: &source_labels,
                target: &bt.features,
                target_labels: &target_labels,
                augmented: aug_slice.as_ref(),
                lambdas,
                use_codebook,
                alignment: align_ref,
                tau: codebook::temperature(cfg.tau_start, cfg.tau_end, progress),
                grl: adversarial::lambda_schedule(progress),
                gumbel: &gumbel,
                dropout_seed: step_seed ^ 0x5eed,
                exact: false,
            };
            let lr = learning_rate(cfg, progress);
            let (breakdown, obj) = train_step(&mut state, &inputs, lr, cfg.max_grad_norm, epoch)?;
            for (acc, v) in sums.iter_mut().zip(breakdown.terms().iter().chain([breakdown.total].iter())) {
                *acc += v;
            }
            next_buffer.append(Axis(0), obj.source_latent.view()).expect("latent widths agree");
            next_labels.extend_from_slice(&source_labels);
            steps.push(breakdown);
        }
        buffer = next_buffer;
        buffer_labels = next_labels;

        let n = steps_per_epoch as f64;
        let z_source = state.model.encode(&source.features)?;
        let z_target = state.model.encode(&target.features)?;
        let mut usage = codebook::UsageAccumulator::new(state.model.spec.codebook_size);
        let cb = state.model.codebook();
        usage.add(&codebook::soft_assign(&z_source, &cb).probs);
        usage.add(&codebook::soft_assign(&z_target, &cb).probs);
        let predicted = argmax_rows(&state.model.classify_latent(&z_target)?);
        metrics.push(EpochMetrics {
            epoch,
            step: state.step,
            l1: sums[0] / n,
            l2: sums[1] / n,
            l3: sums[2] / n,
            l4: sums[3] / n,
            l5: sums[4] / n,
            total: sums[5] / n,
            acc_target: accuracy(&predicted, &target.labels),
            perplexity: usage.perplexity(),
            mean_class_var: priors::mean_class_variance(&z_source, &source.labels),
            accepted_frac: pseudo.as_ref().map_or(0.0, |p| p.accepted_fraction()),
        });
    }

    Ok(FitOutput {
        trained: TrainedModel {
            model: state.model,
            variant,
            priors: priors_in_force,
        },
        metrics,
        steps,
        pseudo_labels: pl_logs,
        prior_digests: digests,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Numeric(format!("{}: {e}", path.display()));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.l1.to_string(),
            r.l2.to_string(),
            r.l3.to_string(),
            r.l4.to_string(),
            r.l5.to_string(),
            r.total.to_string(),
            r.acc_target.to_string(),
            r.perplexity.to_string(),
            r.mean_class_var.to_string(),
            r.accepted_frac.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::Numeric(format!("{}: {e}", path.display())))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r
        .headers()
        .map_err(|e| Error::Format { row: 0, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Format {
            row: 0,
            message: format!("{}: unexpected metrics header", path.display()),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Format {
                row: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    variant: Variant,
    priors: Vec<ClassPrior>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            spec: self.model.spec.clone(),
            variant: self.variant,
            priors: self.priors.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Numeric(e.to_string()))?;
        nets::save_checkpoint(path, &self.model.params, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = nets::load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self {
            model: Model::attach(meta.spec, params)?,
            variant: meta.variant,
            priors: meta.priors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pair, ShiftSpec};
    use ndarray::array;

    #[test]
    fn srm_examples() {
        assert!(srm_loss(&array![[1.0, 0.0], [0.0, 1.0]], &[0, 1]) < 1e-6);
        let uniform = Mat::from_elem((4, 10), 0.1);
        assert!((srm_loss(&uniform, &[0, 3, 5, 9]) - 10f64.ln()).abs() < 1e-12);
        assert!((srm_loss(&array![[0.5, 0.5]], &[0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_examples() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(reconstruction_loss(&x, &x), 0.0);
        assert_eq!(reconstruction_loss(&array![[0.0, 0.0]], &array![[3.0, 4.0]]), 25.0);
        let y = array![[1.5, 1.0], [2.0, 4.5]];
        let y2 = &x + &((&y - &x) * 2.0);
        assert!((reconstruction_loss(&x, &y2) - 4.0 * reconstruction_loss(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]), 0.75);
    }

    #[test]
    fn elbo_constant_value() {
        assert!((elbo_constant(256, 256) - 1419.5654).abs() < 1e-4);
        assert!((elbo_constant(16, 32) - 16.0 * 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        let no_srm = TrainConfig { lambdas: [0.0, 1.0, 1.0, 1.0, 1.0], ..Default::default() };
        assert!(no_srm.validate().is_err());
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epochs": 3, "bogus": 1}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn resolved_shapes() {
        let spec = ModelSpec::resolve(&ModelConfig::default(), 2, 3, Variant::Gvida).unwrap();
        assert_eq!(spec.generator.output_dim(), 64);
        assert_eq!(spec.latent_dim(), 16);
        assert_eq!(spec.decoder.output_dim(), 64);
        assert_eq!(spec.discriminator.input_dim(), 48);
        let npa = ModelSpec::resolve(&ModelConfig::default(), 2, 10, Variant::Npa(0.0)).unwrap();
        assert_eq!(npa.latent_dim(), 20);
        let digit = ModelSpec::resolve(&ModelConfig::default(), 512, 10, Variant::Vida(0.01)).unwrap();
        assert_eq!(digit.encoder.layers[0].input_dim, 512);
        assert_eq!(digit.encoder.layers[0].output_dim, 256);
        assert_eq!(digit.latent_dim(), 128);
        assert_eq!(digit.decoder.layers[1].output_dim, 512);
    }

    #[test]
    fn identical_init_across_variants() {
        let a = Model::new(ModelSpec::resolve(&ModelConfig::default(), 3, 2, Variant::Gvida).unwrap(), 9).unwrap();
        let b = Model::new(ModelSpec::resolve(&ModelConfig::default(), 3, 2, Variant::SourceOnly).unwrap(), 9).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn filtered_labels_respect_acceptance() {
        let set = robust::pseudo_label(&array![[0.99, 0.01], [0.5, 0.5], [0.05, 0.95]], 0.3).unwrap();
        assert_eq!(filtered_target_labels(&[1, 0, 2], Some(&set)), vec![SENTINEL, 0, 1]);
        assert_eq!(filtered_target_labels(&[1, 0], None), vec![SENTINEL; 2]);
    }

    #[test]
    #[should_panic(expected = "rejected target row")]
    fn filter_assertion_catches_leaks() {
        let set = robust::pseudo_label(&array![[0.5, 0.5]], 0.3).unwrap();
        assert_filter_sound(&[0], &[0], Some(&set));
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![array![[3.0]], array![[4.0, 0.0]]];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0][[0, 0]], 3.0);
        clip_grad_norm(&mut g, 1.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15 && (g[1][[0, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn singletons_are_dropped() {
        assert_eq!(drop_singletons(&[0, 1, 0, -1, 2, 2]), vec![0, SENTINEL, 0, SENTINEL, 2, 2]);
    }

    #[test]
    fn small_fit_runs_and_logs_every_epoch() {
        let (s, t) = generate_pair(&ShiftSpec::rotation(0.3, 0.0, 1), 20, 3, 4).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 16, warmup_epochs: 1, ..Default::default() };
        let out = fit(&cfg, &ModelConfig::default(), Variant::Gvida, &s, &t).unwrap();
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.steps.len(), 3 * 4);
        for b in &out.steps {
            let lam = cfg.lambdas;
            let sum: f64 = b.terms().iter().zip(lam).map(|(l, w)| l * w).sum();
            assert!((b.total - sum).abs() < 1e-12);
        }
        assert!(out.pseudo_labels[2].accepted + out.pseudo_labels[2].rejected == t.len());
        assert_eq!(out.prior_digests.len(), 3);
    }
}
