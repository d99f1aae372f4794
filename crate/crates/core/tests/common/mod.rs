//! Shared fixtures for the integration tests.

use gvida::autodiff::Mat;
use gvida::baselines::Variant;
use gvida::codebook;
use gvida::data::SENTINEL;
use gvida::priors;
use gvida::robust::{AugmentedBatch, Provenance};
use gvida::trainer::{AlignmentTarget, Model, ModelConfig, ModelSpec, StepInputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub model: Model,
    pub xs: Mat,
    pub ys: Vec<usize>,
    pub xt: Mat,
    pub yt: Vec<i64>,
    pub aug: AugmentedBatch,
    pub gumbel: Mat,
    pub priors: AlignmentTarget,
}

pub fn fixture(variant: Variant, seed: u64) -> Fixture {
    let cfg = ModelConfig {
        hidden: 8,
        encoder_hidden: 6,
        latent: 4,
        discriminator_hidden: 5,
        codebook_size: 6,
        ..Default::default()
    };
    let spec = ModelSpec::resolve(&cfg, 3, 2, variant).unwrap();
    let model = Model::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut m = |r: usize, c: usize| Mat::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5));
    let xs = m(4, 3);
    let xt = m(4, 3);
    let aug_feats = m(2, 8).mapv(f64::abs);
    let latent = model.encode(&xs).unwrap();
    let ys = vec![0, 1, 0, 1];
    let p = priors::estimate_epoch_priors(&latent, &ys, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let gumbel = codebook::gumbel_noise((8, 6), &mut rng);
    Fixture {
        model,
        xs,
        ys,
        xt,
        yt: vec![1, SENTINEL, 1, 0],
        aug: AugmentedBatch {
            features: aug_feats,
            labels: vec![0, 0],
            provenance: Provenance::Regenerated,
        },
        gumbel,
        priors: AlignmentTarget::Priors(p),
    }
}

pub fn inputs<'a>(f: &'a Fixture, lambdas: [f64; 5], exact: bool, grl: f64) -> StepInputs<'a> {
    StepInputs {
        source: &f.xs,
        source_labels: &f.ys,
        target: &f.xt,
        target_labels: &f.yt,
        augmented: Some(&f.aug),
        lambdas,
        use_codebook: true,
        alignment: &f.priors,
        tau: 0.8,
        grl,
        gumbel: &f.gumbel,
        dropout_seed: 3,
        exact,
    }
}
