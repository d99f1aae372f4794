mod common;

use common::{fixture, inputs};
use gvida::baselines::{self, Variant};
use gvida::nets::check_gradients;
use gvida::trainer::{objective, AlignmentTarget, StepInputs};

#[test]
fn full_objective_matches_finite_differences() {
    for seed in 0..3 {
        let f = fixture(Variant::Gvida, seed);
        // A reversal strength of −1 passes gradients through unchanged.
        let inp = inputs(&f, [1.0, 1.0, 0.1, 0.01, 0.1], true, -1.0);
        let err = check_gradients(
            |p| {
                let o = objective(&f.model, p, &inp)?;
                Ok((o.total, o.grads))
            },
            &f.model.params,
            1e-5,
            400,
            seed,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn surrogate_gradients_agree_downstream_of_stop_gradients() {
    let f = fixture(Variant::Gvida, 4);
    let lam = [1.0, 1.0, 0.1, 0.01, 0.1];
    let exact = objective(&f.model, &f.model.params, &inputs(&f, lam, true, 1.0)).unwrap();
    let st = objective(&f.model, &f.model.params, &inputs(&f, lam, false, 1.0)).unwrap();
    assert_eq!(exact.terms, st.terms);
    let names = f.model.params.names();
    for (i, name) in names.iter().enumerate() {
        if name.starts_with("decoder") || name.starts_with("discriminator") {
            let gap = (&exact.grads[i] - &st.grads[i]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(gap < 1e-12, "{name} differs by {gap}");
        }
    }
}

#[test]
fn degenerate_weights_reduce_to_srm() {
    let f = fixture(Variant::Gvida, 1);
    let o = objective(&f.model, &f.model.params, &inputs(&f, [1.0, 0.0, 0.0, 0.0, 0.0], false, 1.0)).unwrap();
    assert_eq!(o.total, o.terms[0]);
    let probs = f.model.predict_proba(&f.xs).unwrap();
    assert!((o.terms[0] - gvida::trainer::srm_loss(&probs, &f.ys)).abs() < 1e-12);
}

#[test]
fn decomposition_holds() {
    let f = fixture(Variant::Gvida, 2);
    let lam = [0.7, 1.3, 0.2, 0.05, 0.4];
    let o = objective(&f.model, &f.model.params, &inputs(&f, lam, false, 0.5)).unwrap();
    let sum: f64 = o.terms.iter().zip(lam).map(|(t, l)| t * l).sum();
    assert!((o.total - sum).abs() < 1e-12);
    assert!(o.terms.iter().all(|t| t.is_finite()));
}

#[test]
fn rejected_target_rows_carry_no_alignment_gradient() {
    // Only the alignment term is active; the sentinel row must not
    // influence it.
    let f = fixture(Variant::Gvida, 5);
    let lam = [1e-300, 0.0, 1.0, 0.0, 0.0];
    let base = objective(&f.model, &f.model.params, &inputs(&f, lam, false, 1.0)).unwrap();
    let mut moved = fixture(Variant::Gvida, 5);
    moved.xt[[1, 0]] += 5.0;
    moved.xt[[1, 2]] -= 5.0;
    let after = objective(&moved.model, &moved.model.params, &inputs(&moved, lam, false, 1.0)).unwrap();
    assert!((base.terms[2] - after.terms[2]).abs() < 1e-12);
}

#[test]
fn npa_objective_uses_anchor_width() {
    let f = fixture(Variant::Npa(0.0), 0);
    assert_eq!(f.model.spec.latent_dim(), 4);
    let anchors = AlignmentTarget::Anchors(baselines::build_anchors(2, 2, 0.0).unwrap().anchors);
    let inp = StepInputs {
        alignment: &anchors,
        use_codebook: false,
        augmented: None,
        ..inputs(&f, [1.0, 1.0, 1.0, 0.0, 0.0], true, -1.0)
    };
    let err = check_gradients(
        |p| {
            let o = objective(&f.model, p, &inp)?;
            Ok((o.total, o.grads))
        },
        &f.model.params,
        1e-5,
        200,
        11,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}
