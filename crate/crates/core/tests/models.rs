use biaslab::models::{ModelCheckpoint, ModelConfig, ModelFamily};
use biaslab::tensor::{ActivationSpec, Tensor};
use biaslab::theory::one_layer_wv_gradient;
use biaslab::training::{gradient_check, loss_and_gradients, random_samples};
use proptest::prelude::*;

fn config(family: ModelFamily, layer_norm: bool, seed: u64) -> ModelConfig {
    ModelConfig {
        family,
        d_vob: 8,
        d_m: 8,
        d_f: 6,
        d_k: 4,
        n_layers: if family == ModelFamily::DecoderTransformer {
            2
        } else {
            1
        },
        n_heads: 1,
        // Moderate scale so every path carries a visible gradient.
        gamma: 0.3,
        use_layer_norm: layer_norm,
        activation: ActivationSpec::tanh(),
        max_seq_len: 5,
        ln_eps: 1e-5,
        seed,
    }
}

#[test]
fn autodiff_matches_central_differences_on_every_family() {
    for family in [
        ModelFamily::EmbMlp,
        ModelFamily::OneLayerTheory,
        ModelFamily::DecoderTransformer,
    ] {
        let m = ModelCheckpoint::init(&config(family, true, 7)).unwrap();
        let seq = if family == ModelFamily::EmbMlp { 3 } else { 5 };
        let data = random_samples(8, m.config.n_outputs(), seq, 6, 1);
        let check = gradient_check(&m, &data, 1e-5).unwrap();
        assert_eq!(check.params.len(), m.params.len());
        for p in &check.params {
            assert!(
                p.grad_norm > 0.0 || p.name.ends_with("bias"),
                "{family:?} {} has no gradient",
                p.name
            );
            assert!(
                p.rel_error <= 1e-5,
                "{family:?} {}: {:e}",
                p.name,
                p.rel_error
            );
        }
    }
}

#[test]
fn decoder_without_layer_norm_and_with_heads_passes_the_check() {
    let mut c = config(ModelFamily::DecoderTransformer, false, 2);
    c.n_heads = 2;
    c.activation = ActivationSpec::gelu();
    let m = ModelCheckpoint::init(&c).unwrap();
    let data = random_samples(8, 8, 4, 5, 3);
    assert!(gradient_check(&m, &data, 1e-5).unwrap().max_rel_error() <= 1e-5);
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.add(&b.scale(-1.0)).unwrap().frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm())
}

#[test]
fn hand_written_value_gradient_matches_autodiff_and_differences() {
    let m = ModelCheckpoint::init(&config(ModelFamily::OneLayerTheory, false, 11)).unwrap();
    let data = random_samples(8, 8, 5, 10, 4);
    let oracle = one_layer_wv_gradient(&m, &data).unwrap();
    let (_, auto) = loss_and_gradients(&m, &data).unwrap();
    assert!(rel(&oracle, &auto["wv"]) <= 1e-12);

    // Numeric gradient for the same matrix.
    let h = 1e-5;
    let mut numeric = Tensor::zeros(8, 4);
    let mut probe = m.clone();
    for i in 0..8 {
        for j in 0..4 {
            let base = m.param("wv").unwrap().get(i, j);
            let mut loss_at = |x: f64| {
                probe.param_mut("wv").unwrap().set(i, j, x);
                biaslab::training::evaluate(&probe, &data).unwrap().0
            };
            let d = (loss_at(base + h) - loss_at(base - h)) / (2.0 * h);
            loss_at(base);
            numeric.set(i, j, d);
        }
    }
    assert!(
        rel(&oracle, &numeric) <= 1e-5,
        "{:e}",
        rel(&oracle, &numeric)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_check_holds_for_random_instances(seed in 0u64..10_000, fam in 0usize..3, len in 2usize..6) {
        let family = [ModelFamily::EmbMlp, ModelFamily::OneLayerTheory, ModelFamily::DecoderTransformer][fam];
        let m = ModelCheckpoint::init(&config(family, seed % 2 == 0, seed)).unwrap();
        let data = random_samples(8, 8, len, 4, seed);
        let check = gradient_check(&m, &data, 1e-5).unwrap();
        prop_assert!(check.max_rel_error() <= 1e-5, "{:?}", check);
    }
}
