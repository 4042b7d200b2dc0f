use biaslab::rng;
use biaslab::tasks::{MemLabelMode, TaskSpec, Token, TokenRange};
use biaslab::tensor::Tensor;
use biaslab::theory::enumerate::{enumerate_label_distribution, sample_label_distribution};
use biaslab::theory::*;
use proptest::prelude::*;
use rand::Rng;

fn s31() -> TaskSpec {
    TaskSpec {
        key_range: TokenRange::new(21, 120),
        mem_anchor_range: TokenRange::new(1, 10),
        rsn_anchor_range: TokenRange::new(11, 20),
        q: 2,
        seq_len: 9,
        masked_combos: vec![vec![11, 13], vec![13, 11]],
        vocab_size: 200,
        mem_label_mode: MemLabelMode::UniformOverKeys,
        seed: 1,
    }
}

fn reduced(q: usize, seq_len: usize, mode: MemLabelMode) -> TaskSpec {
    TaskSpec {
        key_range: TokenRange::new(8, 10),
        mem_anchor_range: TokenRange::new(1, 2),
        rsn_anchor_range: TokenRange::new(3, 4),
        q,
        seq_len,
        masked_combos: vec![],
        vocab_size: 24,
        mem_label_mode: mode,
        seed: 3,
    }
}

fn modes() -> Vec<MemLabelMode> {
    vec![
        MemLabelMode::UniformOverKeys,
        MemLabelMode::AnchorDependentWindow,
        MemLabelMode::GroupedRanges(vec![TokenRange::new(5, 7), TokenRange::new(12, 20)]),
    ]
}

fn role_tokens(spec: &TaskSpec, role: Role) -> Vec<Token> {
    match role {
        Role::MemAnchor => spec.mem_anchor_range.iter().collect(),
        Role::RsnAnchor => spec.rsn_anchor_range.iter().collect(),
        Role::Key | Role::KeyWithNoise => spec.key_range.iter().collect(),
    }
}

const ROLES: [Role; 4] = [
    Role::MemAnchor,
    Role::RsnAnchor,
    Role::Key,
    Role::KeyWithNoise,
];

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_forms_equal_exhaustive_enumeration() {
    for q in 1..=3 {
        for noise in [0, 1] {
            for mode in modes() {
                let spec = reduced(q, q + 1 + noise, mode);
                for role in ROLES {
                    for s in role_tokens(&spec, role) {
                        let closed = label_distribution(&spec, s, role).unwrap();
                        let brute = enumerate_label_distribution(&spec, s, role).unwrap();
                        let err = max_abs_diff(&closed.probs, &brute);
                        assert!(
                            err <= 1e-12,
                            "q={q} L={} {:?} {role:?} s={s}: {err:e}",
                            spec.seq_len,
                            spec.mem_label_mode
                        );
                        assert!((closed.total() - 1.0).abs() <= 1e-12);
                        assert!(closed.probs.iter().all(|&p| p >= 0.0));
                    }
                }
            }
        }
    }
}

/// Independent count over `(z, a_1)` pairs for a `q = 2` reasoning anchor.
fn pair_count_oracle(spec: &TaskSpec, s: Token) -> Vec<f64> {
    let mut p = vec![0.0; spec.vocab_size];
    let n = (spec.key_range.len() * spec.rsn_anchor_range.len()) as f64;
    for z in spec.key_range.lo..=spec.key_range.hi {
        for a in spec.rsn_anchor_range.lo..=spec.rsn_anchor_range.hi {
            p[(z + a + s) as usize] += 1.0 / n;
        }
    }
    p
}

#[test]
fn reasoning_anchor_matches_pair_count_and_piecewise_form() {
    let spec = s31();
    for s in spec.rsn_anchor_range.iter() {
        let closed = label_distribution(&spec, s, Role::RsnAnchor).unwrap().probs;
        let pairs = pair_count_oracle(&spec, s);
        let ramp = rsn_anchor_q2_piecewise(&spec, s).unwrap();
        assert!(max_abs_diff(&closed, &pairs) <= 1e-12);
        assert!(max_abs_diff(&closed, &ramp) <= 1e-12);
    }
    let d = label_distribution(&spec, 11, Role::RsnAnchor).unwrap();
    assert!((d.probs[43] - 0.001).abs() < 1e-15);
    assert!((d.probs[100] - 0.01).abs() < 1e-15);
    assert!((d.probs[151] - 0.001).abs() < 1e-15);

    // Fewer keys than anchors: the trapezoid has no flat top.
    let mut narrow = reduced(2, 3, MemLabelMode::UniformOverKeys);
    narrow.rsn_anchor_range = TokenRange::new(3, 7);
    narrow.vocab_size = 30;
    assert!(rsn_anchor_q2_piecewise(&narrow, 3).is_err());
}

/// Independent triple count for the `q = 2` key law under uniform memory
/// labels: half uniform on keys, half over `(a_1, a_2)`.
fn key_triple_oracle(spec: &TaskSpec, s: Token) -> Vec<f64> {
    let mut p = vec![0.0; spec.vocab_size];
    for z in spec.key_range.iter() {
        p[z as usize] += 0.5 / spec.key_range.len() as f64;
    }
    let na = spec.rsn_anchor_range.len() as f64;
    for a in spec.rsn_anchor_range.iter() {
        for b in spec.rsn_anchor_range.iter() {
            p[(s + a + b) as usize] += 0.5 / (na * na);
        }
    }
    p
}

#[test]
fn key_forms_agree() {
    let spec = s31();
    for s in [21, 57, 120] {
        let general = label_distribution(&spec, s, Role::Key).unwrap().probs;
        let tri = key_q2_closed_form(&spec, s).unwrap();
        let oracle = key_triple_oracle(&spec, s);
        assert!(max_abs_diff(&general, &oracle) <= 1e-12);
        assert!(max_abs_diff(&tri, &oracle) <= 1e-12);
    }
}

#[test]
fn noisy_key_mixes_key_and_global_laws() {
    let spec = s31();
    let slots = (spec.seq_len - spec.q) as f64;
    let key = label_distribution(&spec, 40, Role::Key).unwrap().probs;
    let global = global_label_law(&spec).unwrap();
    let noisy = label_distribution(&spec, 40, Role::KeyWithNoise)
        .unwrap()
        .probs;
    for i in 0..spec.vocab_size {
        let want = key[i] / slots + global[i] * (slots - 1.0) / slots;
        assert!((noisy[i] - want).abs() < 1e-15);
    }
}

#[test]
fn monte_carlo_agrees_at_a_million_samples() {
    let spec = s31();
    for (s, role) in [
        (4, Role::MemAnchor),
        (15, Role::RsnAnchor),
        (60, Role::KeyWithNoise),
    ] {
        let closed = label_distribution(&spec, s, role).unwrap();
        let mc = sample_label_distribution(&spec, s, role, 1_000_000, 11).unwrap();
        let tv = closed.total_variation(&mc);
        assert!(tv <= 0.005, "{role:?}: tv {tv}");
    }
}

#[test]
fn shifted_copies_and_identical_memory_laws() {
    let spec = s31();
    let base = label_distribution(&spec, 12, Role::RsnAnchor)
        .unwrap()
        .probs;
    let other = label_distribution(&spec, 15, Role::RsnAnchor)
        .unwrap()
        .probs;
    for i in 40..150 {
        assert_eq!(other[i + 3], base[i]);
    }
    let m1 = label_distribution(&spec, 1, Role::MemAnchor).unwrap().probs;
    for s in 2..=10 {
        assert_eq!(
            label_distribution(&spec, s, Role::MemAnchor).unwrap().probs,
            m1
        );
    }
}

proptest! {
    #[test]
    fn combo_rows_sum_to_power(n in 0usize..7, k1 in 1usize..9) {
        let row = combo_row(n, k1);
        let total: u128 = row.iter().sum();
        prop_assert_eq!(total, (k1 as u128).pow(n as u32));
        prop_assert_eq!(row.len(), n * (k1 - 1) + 1);
        // Symmetric coefficients.
        prop_assert!(row.iter().eq(row.iter().rev()));
    }

    #[test]
    fn combo_number_matches_brute_force(n in 0usize..5, k1 in 1usize..5, j in -1i64..18) {
        let mut count = 0u128;
        let total = k1.pow(n as u32);
        for code in 0..total {
            let (mut c, mut sum) = (code, 0i64);
            for _ in 0..n {
                sum += (c % k1) as i64;
                c /= k1;
            }
            count += u128::from(sum == j);
        }
        prop_assert_eq!(combo_number(n, j, k1), count);
    }

    #[test]
    fn label_laws_are_distributions(q in 1usize..4, mode_ix in 0usize..3, noise in 0usize..3, pick in 0usize..64) {
        let spec = reduced(q, q + 1 + noise, modes()[mode_ix].clone());
        for role in ROLES {
            let toks = role_tokens(&spec, role);
            let s = toks[pick % toks.len()];
            let d = label_distribution(&spec, s, role).unwrap();
            prop_assert!((d.total() - 1.0).abs() <= 1e-12);
            prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn gaussian_params_closed_form_and_sampling() {
    let spec = s31();
    let g = gaussian_approx_params(&spec);
    assert!((g.mean - 86.0).abs() < 1e-12);
    let want_var = (100.0f64.powi(2) - 1.0) / 12.0 + (10.0f64.powi(2) - 1.0) / 12.0;
    assert!((g.std - want_var.sqrt()).abs() < 1e-12);

    let mut one = spec.clone();
    one.q = 1;
    assert!((gaussian_approx_params(&one).mean - 70.5).abs() < 1e-12);

    let mut r = rng::stream(5, 0);
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| f64::from(r.random_range(21u32..=120) + r.random_range(11u32..=20)))
        .collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((m - g.mean).abs() / g.mean < 0.005);
    assert!((sd - g.std).abs() / g.std < 0.005);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn no_noise() -> Option<(f64, &'static mut rng::StreamRng)> {
    None
}

#[test]
fn fitted_embedding_values() {
    let spec = s31();
    let form = EmbeddingForm::Fitted { d_m: 200 };
    let e = theoretical_embedding(&spec, 15, Role::RsnAnchor, &form, no_noise()).unwrap();
    assert!((e.vector[15] - 0.995).abs() < 1e-15);
    assert_eq!(e.noise_std, 0.0);
    let k = theoretical_embedding(&spec, 50, Role::Key, &form, no_noise()).unwrap();
    assert!((k.vector[50] - 1.0).abs() < 1e-15);
    assert!((cos(&e.vector, &e.vector) - 1.0).abs() < 1e-12);
    assert!(theoretical_embedding(&spec, 3, Role::MemAnchor, &form, no_noise()).is_err());

    let mut r = rng::stream(1, 2);
    let noisy =
        theoretical_embedding(&spec, 15, Role::RsnAnchor, &form, Some((0.5, &mut r))).unwrap();
    assert!((noisy.noise_std - 200f64.powf(-0.5)).abs() < 1e-15);
    assert_ne!(noisy.vector, e.vector);
}

#[test]
fn derived_embedding_similarity_depends_on_distance() {
    let c = EmbeddingConstants::from_task(&s31(), 11, Role::RsnAnchor, 1e-4, 200).unwrap();
    assert!((c.c1 - 0.1 * 1e-4 / 9.0).abs() < 1e-18);
    // Anchors in the middle of the vector so no bump is cut off at an end.
    let spec = TaskSpec {
        key_range: TokenRange::new(21, 80),
        mem_anchor_range: TokenRange::new(1, 10),
        rsn_anchor_range: TokenRange::new(141, 150),
        vocab_size: 400,
        ..s31()
    };
    let c = EmbeddingConstants::from_task(&spec, 141, Role::RsnAnchor, 1e-4, 300).unwrap();
    let form = EmbeddingForm::Derived(c);
    let vecs: Vec<Vec<f64>> = (141..=150)
        .map(|s| {
            theoretical_embedding(&spec, s, Role::RsnAnchor, &form, no_noise())
                .unwrap()
                .vector
        })
        .collect();
    // Same distance, same similarity (bumps are far from the vector ends).
    for d in 1..5 {
        let first = cos(&vecs[0], &vecs[d]);
        for i in 1..10 - d {
            assert!((cos(&vecs[i], &vecs[i + d]) - first).abs() < 1e-9);
        }
    }
    // Non-increasing in distance.
    for i in 0..10 {
        for j in i + 1..10 {
            for k in j + 1..10 {
                assert!(cos(&vecs[i], &vecs[j]) >= cos(&vecs[i], &vecs[k]) - 1e-12);
            }
        }
    }
}

fn square_spec(vocab: usize) -> TaskSpec {
    TaskSpec {
        key_range: TokenRange::new(21, 40),
        mem_anchor_range: TokenRange::new(1, 10),
        rsn_anchor_range: TokenRange::new(11, 20),
        q: 2,
        seq_len: 9,
        masked_combos: vec![],
        vocab_size: vocab,
        mem_label_mode: MemLabelMode::UniformOverKeys,
        seed: 1,
    }
}

#[test]
fn embmlp_flow_with_identity_weights() {
    let spec = s31();
    let w1 = Tensor::identity(200);
    let w2 = Tensor::identity(200);
    let r = 0.5 * 2.0 / 10.0;
    let pred = embmlp_flow_prediction(&spec, 7, Role::MemAnchor, &w1, &w2).unwrap();
    for (i, x) in pred.iter().enumerate() {
        let want = if (21..=120).contains(&i) {
            r * 0.005
        } else {
            -r * 0.005
        };
        assert!((x - want).abs() < 1e-15, "{i}");
    }
}

#[test]
fn embmlp_flow_vanishes_for_balanced_law() {
    // Map every label to the same output pattern: a rank-one W2 whose rows
    // are all equal sends any centred vector to zero.
    let spec = s31();
    let w1 = Tensor::identity(4);
    let w2 = Tensor::filled(4, 200, 0.3);
    let pred = embmlp_flow_prediction(&spec, 14, Role::RsnAnchor, &w1, &w2).unwrap();
    assert!(pred.iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn transformer_flow_identity_and_memory_invariance() {
    let spec = square_spec(81);
    let d = 81;
    let zero = Tensor::zeros(d, d);
    let pred = transformer_flow_prediction(&spec, 12, Role::RsnAnchor, &zero, &zero).unwrap();
    let law = label_distribution(&spec, 12, Role::RsnAnchor)
        .unwrap()
        .probs;
    let scale = 0.1 / 9.0;
    for i in 0..d {
        assert!((pred[i] - scale * (law[i] - 1.0 / d as f64)).abs() < 1e-15);
    }
    let mut r = rng::stream(2, 3);
    let rand_mat = |r: &mut rng::StreamRng| {
        Tensor::from_vec(
            d,
            d,
            (0..d * d).map(|_| r.random_range(-0.1..0.1)).collect(),
        )
        .unwrap()
    };
    let (wf, wvo) = (rand_mat(&mut r), rand_mat(&mut r));
    let m1 = transformer_flow_prediction(&spec, 1, Role::MemAnchor, &wf, &wvo).unwrap();
    for s in 2..=10 {
        assert_eq!(
            transformer_flow_prediction(&spec, s, Role::MemAnchor, &wf, &wvo).unwrap(),
            m1
        );
    }
    assert!(matches!(
        transformer_flow_prediction(
            &s31(),
            12,
            Role::RsnAnchor,
            &Tensor::zeros(120, 120),
            &Tensor::zeros(120, 120)
        ),
        Err(TheoryError::Dimension(_))
    ));
}

fn top_singular_pair(m: &Tensor) -> (Vec<f64>, f64, f64) {
    // Power iteration on M M^T for the leading left vector, then the
    // residual norm to bound the second singular value.
    let mut u = vec![1.0; m.rows()];
    let mmt = m.matmul(&m.transpose()).unwrap();
    for _ in 0..500 {
        let next = Tensor::row_vector(u.clone())
            .matmul(&mmt)
            .unwrap()
            .into_data();
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        u = next.into_iter().map(|x| x / n).collect();
    }
    let ut_m = Tensor::row_vector(u.clone()).matmul(m).unwrap().into_data();
    let s1 = ut_m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rest = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            rest.set(i, j, m.get(i, j) - u[i] * ut_m[j]);
        }
    }
    (u, s1, rest.frobenius_norm())
}

#[test]
fn wv_flow_is_rank_one_along_mean_anchor() {
    let spec = square_spec(81);
    let (d, dk) = (81, 16);
    let mut r = rng::stream(9, 9);
    let mut mat = |rows: usize, cols: usize| {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    };
    let (wemb, wo, wf) = (mat(d, d), mat(dk, d), mat(d, d).scale(0.05));
    let flow = wv_flow_prediction(&spec, &wemb, &wo, &wf).unwrap();
    assert_eq!(flow.direction.shape(), (d, dk));
    assert!(!flow.keys_span_width);
    let (u, s1, rest) = top_singular_pair(&flow.direction);
    assert!(rest < 1e-10 * s1, "second direction {rest} vs {s1}");
    let mut mean = vec![0.0; d];
    for a in 11..=20 {
        for (m, x) in mean.iter_mut().zip(wemb.row(a)) {
            *m += x / 10.0;
        }
    }
    assert!(cos(&u, &mean).abs() > 0.9);
}

#[test]
fn wv_flow_vanishes_without_output_map() {
    let spec = square_spec(81);
    let wemb = Tensor::identity(81);
    let flow =
        wv_flow_prediction(&spec, &wemb, &Tensor::zeros(8, 81), &Tensor::zeros(81, 81)).unwrap();
    assert!(flow.direction.data().iter().all(|&x| x == 0.0));
}

const REF: [f64; 8] = [0.0, 1.0, 2.0, 3.0, 2.6, 2.8, -0.5, -1.0];

#[test]
fn reference_cliff_concentrates() {
    assert!(is_cliff(&REF, 4, 2).is_cliff);
    let mut prev = f64::INFINITY;
    for c in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        let m = softmax_concentration(&REF, 4, 2, c).unwrap().total_outside;
        assert!(m <= prev, "C={c}");
        prev = m;
    }
    let at50 = softmax_concentration(&REF, 4, 2, 50.0).unwrap();
    assert!(at50.total_outside < 1e-3);
    let uniform = softmax_concentration(&REF, 4, 2, 0.0).unwrap();
    assert!((uniform.total_outside - 5.0 / 8.0).abs() < 1e-15);
}

fn cliff_sequence(spec: &TaskSpec, p: usize) -> Vec<Token> {
    let mut t: Vec<Token> = (0..spec.seq_len).map(|i| 30 + i as Token).collect();
    t[p - 1] = 57;
    t[p] = 12;
    t[p + 1] = 17;
    t
}

#[test]
fn construction_gives_cliffs_for_every_key_position() {
    let spec = s31();
    for p in 1..=spec.seq_len - spec.q {
        let toks = cliff_sequence(&spec, p);
        let c = ideal_cliff_construction(&spec, &toks, p).unwrap();
        let rep = verify_cliff_construction(&c, &spec, &toks, p).unwrap();
        assert!(rep.assumptions_hold(), "{:?}", rep.assumptions);
        assert!(rep.passes(), "p={p}: {:?} {:?}", rep.verdict, rep.scores);

        let mut off = c.clone();
        off.mu = 0.0;
        let rep0 = verify_cliff_construction(&off, &spec, &toks, p).unwrap();
        assert!(!rep0.passes(), "p={p} without suppression");
        assert!(!rep0.conditions.suppression_sufficient);
    }
}

#[test]
fn construction_flags_broken_orthogonality() {
    let spec = s31();
    let toks = cliff_sequence(&spec, 3);
    let mut c = ideal_cliff_construction(&spec, &toks, 3).unwrap();
    // Leak a key direction into one reasoning anchor.
    c.embeddings.set(14, 0, 0.3);
    let rep = verify_cliff_construction(&c, &spec, &toks, 3).unwrap();
    let e1 = rep
        .assumptions
        .iter()
        .find(|a| a.assumption == Assumption::AnchorOrthogonality)
        .unwrap();
    assert!(!e1.holds);
    assert!(rep.verdict.is_none() && rep.scores.is_none());
}

#[test]
fn construction_rejects_malformed_sequences() {
    let spec = s31();
    let mut toks = cliff_sequence(&spec, 3);
    let c = ideal_cliff_construction(&spec, &toks, 3).unwrap();
    toks[3] = 5;
    assert!(matches!(
        verify_cliff_construction(&c, &spec, &toks, 3),
        Err(TheoryError::Sequence(_))
    ));
}
