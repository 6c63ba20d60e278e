use super::*;
use crate::seqcore::encode;
use rand::SeedableRng;
use rand_distr::StandardNormal;

fn small_cfg(vocab: Vocabulary) -> ModelConfig {
    ModelConfig {
        k_tokens: 2,
        k_dim: 3,
        prior_hidden: 4,
        embed: 8,
        blocks: 1,
        attn_heads: 2,
        ff_hidden: 8,
        predictor_hidden: Some(6),
        predictor_layers: 3,
        properties: vec![PropertySpec::regression("y", 0.5), PropertySpec::binary("ok")],
        vocab,
    }
}

/// Adds Gaussian noise to every parameter so zero-initialized pieces
/// (prior output conv, biases) take part in gradient checks.
fn jitter(model: &mut Lpt, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut().iter_mut() {
        for v in &mut p.value.data {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-8
}

#[test]
fn prior_is_identity_at_init() {
    let model = Lpt::new(small_cfg(Vocabulary::dna(4)), 1).unwrap();
    let z0: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let z = model.prior_forward(&z0).unwrap();
    assert_eq!(z.shape(), (2, 3));
    assert_eq!(z.data, z0);
    assert!(model.prior_forward(&[0.0; 6]).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(matches!(model.prior_forward(&[0.0; 5]), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn prior_jacobian_matches_finite_differences() {
    let mut model = Lpt::new(small_cfg(Vocabulary::dna(4)), 2).unwrap();
    jitter(&mut model, 3, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = randn_vec(6, &mut rng);
    let h = 1e-4;
    for out in 0..6 {
        let mut cot = Mat::zeros(2, 3);
        cot.data[out] = 1.0;
        let row = model.prior_vjp(&z0, &cot).unwrap();
        for (i, &analytic) in row.iter().enumerate() {
            let mut zp = z0.clone();
            zp[i] += h;
            let mut zm = z0.clone();
            zm[i] -= h;
            let fd = (model.prior_forward(&zp).unwrap().data[out] - model.prior_forward(&zm).unwrap().data[out]) / (2.0 * h);
            assert!(rel_close(analytic, fd, 1e-4), "J[{out},{i}] = {analytic} vs {fd}");
        }
    }
}

#[test]
fn single_symbol_vocab_has_zero_logprob() {
    let vocab = Vocabulary::from_chars("A", 5, false).unwrap();
    let model = Lpt::new(small_cfg(vocab.clone()), 5).unwrap();
    let z = model.prior_forward(&[0.3; 6]).unwrap();
    let x = encode("AAAAA", &vocab).unwrap();
    let (total, per) = model.decoder_logprob(&x, &z).unwrap();
    assert_eq!(total, 0.0);
    assert_eq!(per.len(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(model.generate(&z, &TokenSeq::new(vec![]), &mut rng, 1.0).unwrap(), x);
}

#[test]
fn zero_output_projection_gives_uniform_tokens() {
    let vocab = Vocabulary::dna(6);
    let mut model = Lpt::new(small_cfg(vocab.clone()), 6).unwrap();
    let (w, b) = model.output_projection_ids();
    for id in [w, b] {
        model.params_mut().get_mut(id).value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let z = model.prior_forward(&[0.7; 6]).unwrap();
    let (total, per) = model.decoder_logprob(&encode("ACGTTA", &vocab).unwrap(), &z).unwrap();
    for lp in &per {
        assert!((lp + 4f64.ln()).abs() < 1e-12);
    }
    assert!((total - per.iter().sum::<f64>()).abs() < 1e-12);
}

/// Every sequence the vocabulary admits, by brute force.
fn all_sequences(vocab: &Vocabulary) -> Vec<TokenSeq> {
    let v = vocab.n_symbols();
    let lengths: Vec<usize> = if vocab.is_fixed_length() {
        vec![vocab.max_len()]
    } else {
        (1..=vocab.max_len()).collect()
    };
    let mut out = Vec::new();
    for len in lengths {
        for code in 0..v.pow(len as u32) {
            let mut c = code;
            let ids: Vec<usize> = (0..len)
                .map(|_| {
                    let d = c % v;
                    c /= v;
                    d
                })
                .collect();
            out.push(TokenSeq::from_ids(&ids));
        }
    }
    out
}

#[test]
fn decoder_normalizes_over_enumeration() {
    let cases = [
        Vocabulary::from_chars("AB", 3, false).unwrap(),
        Vocabulary::from_chars("ABC", 3, true).unwrap(),
        Vocabulary::from_chars("AB", 4, true).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for vocab in cases {
        let mut model = Lpt::new(small_cfg(vocab.clone()), 8).unwrap();
        jitter(&mut model, 9, 0.2);
        let z = model.prior_forward(&randn_vec(6, &mut rng)).unwrap();
        let total: f64 = all_sequences(&vocab)
            .iter()
            .map(|x| model.decoder_logprob(x, &z).unwrap().0.exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "sum = {total}");
    }
}

#[test]
fn decoder_is_causal() {
    let vocab = Vocabulary::from_chars("ABCD", 6, false).unwrap();
    let mut model = Lpt::new(small_cfg(vocab.clone()), 10).unwrap();
    jitter(&mut model, 11, 0.2);
    let z = model.prior_forward(&[0.1, -0.4, 0.9, 0.0, 0.3, -1.0]).unwrap();
    let base = encode("ABCDAB", &vocab).unwrap();
    let (_, p0) = model.decoder_logprob(&base, &z).unwrap();
    for t in 1..6 {
        let mut ids: Vec<usize> = base.ids().collect();
        ids[t] = (ids[t] + 1) % 4;
        let (_, p1) = model.decoder_logprob(&TokenSeq::from_ids(&ids), &z).unwrap();
        assert_eq!(&p0[..t], &p1[..t], "position {t} leaked backwards");
    }
}

#[test]
fn generation_respects_prefix_and_length() {
    let vocab = Vocabulary::from_chars("ACGT", 8, true).unwrap();
    let model = Lpt::new(small_cfg(vocab.clone()), 12).unwrap();
    let z = model.prior_forward(&[0.0; 6]).unwrap();
    let prefix = encode("AC", &vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let x = model.generate(&z, &prefix, &mut rng, 1.0).unwrap();
        assert!(x.starts_with(&prefix));
        assert!(x.len() <= 8 && x.len() >= 2);
        vocab.check(&x).unwrap();
    }
    let long = encode("ACGTACGT", &vocab).unwrap();
    assert!(matches!(
        model.generate(&z, &long, &mut rng, 1.0),
        Err(Error::PrefixTooLong { .. })
    ));
}

#[test]
fn generation_frequencies_match_softmax() {
    let vocab = Vocabulary::dna(3);
    let mut model = Lpt::new(small_cfg(vocab.clone()), 13).unwrap();
    jitter(&mut model, 14, 0.5);
    let z = model.prior_forward(&[0.5, -0.5, 1.0, 0.2, 0.0, -1.2]).unwrap();
    let probs: Vec<f64> = model
        .next_token_logprobs(&z, &TokenSeq::new(vec![]))
        .unwrap()
        .iter()
        .map(|lp| lp.exp())
        .collect();
    let n = 100_000;
    let mut counts = [0usize; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..n {
        // only the first token matters; a two-token prefix budget keeps this fast
        let x = model.generate(&z, &TokenSeq::from_ids(&[]), &mut rng, 1.0).unwrap();
        counts[x.tokens()[0] as usize] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let expected = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - expected).abs() <= 3.0 * sd, "count {c} vs {expected} ± {sd}");
    }
}

#[test]
fn predictor_logprob_values() {
    let vocab = Vocabulary::dna(4);
    let mut cfg = small_cfg(vocab);
    cfg.properties = vec![PropertySpec::regression("y", 1.0), PropertySpec::binary("b")];
    let mut model = Lpt::new(cfg, 16).unwrap();
    // binary head: zero final layer gives s = 0.5
    let &(w, b) = model.predictor_layer_ids(1).last().unwrap();
    for id in [w, b] {
        model.params_mut().get_mut(id).value.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let z = model.prior_forward(&[0.2; 6]).unwrap();
    let mean = model.predict(&z).unwrap()[0];
    let lp = model.predictor_logprob(0, mean, &z).unwrap();
    assert!((lp + 0.918_938_533).abs() < 1e-8);
    for y in [0.0, 1.0] {
        assert!((model.predictor_logprob(1, y, &z).unwrap() - 0.5f64.ln()).abs() < 1e-12);
    }
    assert!(matches!(model.predictor_logprob(1, 0.5, &z), Err(Error::InvalidLabel(_))));
}

#[test]
fn predictor_grad_matches_finite_differences() {
    let mut model = Lpt::new(small_cfg(Vocabulary::dna(4)), 17).unwrap();
    jitter(&mut model, 18, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let z = Mat::from_vec(2, 3, randn_vec(6, &mut rng));
    for (head, y) in [(0, 0.7), (1, 1.0), (1, 0.0)] {
        let (_, g) = model.predictor_logprob_grad_z(head, y, &z).unwrap();
        for i in 0..6 {
            let h = 1e-5;
            let mut zp = z.clone();
            zp.data[i] += h;
            let mut zm = z.clone();
            zm.data[i] -= h;
            let fd = (model.predictor_logprob(head, y, &zp).unwrap() - model.predictor_logprob(head, y, &zm).unwrap()) / (2.0 * h);
            assert!(rel_close(g.data[i], fd, 1e-4), "head {head} entry {i}: {} vs {fd}", g.data[i]);
        }
    }
}

#[test]
fn linear_head_posterior_gradient_closed_form() {
    let vocab = Vocabulary::dna(4);
    let mut cfg = small_cfg(vocab);
    cfg.predictor_layers = 1;
    cfg.properties = vec![PropertySpec::regression("y", 0.25)];
    let mut model = Lpt::new(cfg, 20).unwrap();
    let a = [0.3, -0.2, 0.5, 1.0, 0.0, -0.7];
    let &(w, b) = model.predictor_layer_ids(0).first().unwrap();
    model.params_mut().get_mut(w).value.data.copy_from_slice(&a);
    model.params_mut().get_mut(b).value.data[0] = 0.0;
    let z0 = [0.1, 0.4, -0.3, 0.8, -1.1, 0.6];
    let y = 1.3;
    let (_, g) = model.joint_logpost_grad(&Evidence::new(None, Some(&[y])), &z0).unwrap();
    let s: f64 = a.iter().zip(&z0).map(|(p, q)| p * q).sum();
    for i in 0..6 {
        let expected = -z0[i] + (y - s) * a[i] / 0.25;
        assert!((g[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn posterior_gradient_matches_finite_differences() {
    let vocab = Vocabulary::from_chars("ACG", 5, true).unwrap();
    let mut model = Lpt::new(small_cfg(vocab.clone()), 21).unwrap();
    jitter(&mut model, 22, 0.3);
    let x = encode("CAGG", &vocab).unwrap();
    let y = [0.4, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for point in 0..20 {
        let z0 = randn_vec(6, &mut rng);
        let guidance = if point % 2 == 0 { 1.0 } else { 3.0 };
        let ev = Evidence::new(Some(&x), Some(&y)).with_guidance(guidance);
        let (_, g) = model.joint_logpost_grad(&ev, &z0).unwrap();
        for i in 0..6 {
            let h = 1e-5;
            let mut zp = z0.clone();
            zp[i] += h;
            let mut zm = z0.clone();
            zm[i] -= h;
            let fd = (model.joint_logpost_grad(&ev, &zp).unwrap().0 - model.joint_logpost_grad(&ev, &zm).unwrap().0) / (2.0 * h);
            assert!(rel_close(g[i], fd, 1e-4), "point {point} entry {i}: {} vs {fd}", g[i]);
        }
    }
    assert!(model.joint_logpost_grad(&Evidence::new(None, None), &[0.0; 6]).is_err());
}

#[test]
fn param_groups_receive_only_their_terms() {
    let vocab = Vocabulary::from_chars("AB", 4, false).unwrap();
    let mut model = Lpt::new(small_cfg(vocab.clone()), 24).unwrap();
    jitter(&mut model, 25, 0.2);
    let x = encode("ABBA", &vocab).unwrap();
    let z0 = [0.3, -0.1, 0.2, 0.5, -0.4, 0.9];
    let (_, y_only) = model.param_grad(&Evidence::new(None, Some(&[0.2, 0.0])), &z0).unwrap();
    assert_eq!(y_only.group_sq_norm(model.params(), Group::Beta), 0.0);
    assert!(y_only.group_sq_norm(model.params(), Group::Gamma) > 0.0);
    assert!(y_only.group_sq_norm(model.params(), Group::Alpha) > 0.0);
    let (_, x_only) = model.param_grad(&Evidence::new(Some(&x), None), &z0).unwrap();
    assert_eq!(x_only.group_sq_norm(model.params(), Group::Gamma), 0.0);
    assert!(x_only.group_sq_norm(model.params(), Group::Beta) > 0.0);
}

#[test]
fn deterministic_replay() {
    let vocab = Vocabulary::dna(8);
    let a = Lpt::new(ModelConfig::desk(vocab.clone()), 99).unwrap();
    let b = Lpt::new(ModelConfig::desk(vocab), 99).unwrap();
    assert_eq!(a, b);
    let z = a.prior_forward(&[0.25; 32]).unwrap();
    let xa = a.generate(&z, &TokenSeq::new(vec![]), &mut ChaCha8Rng::seed_from_u64(5), 1.0).unwrap();
    let xb = b.generate(&z, &TokenSeq::new(vec![]), &mut ChaCha8Rng::seed_from_u64(5), 1.0).unwrap();
    assert_eq!(xa, xb);
    assert!(a.param_count() > 0);
}

#[test]
fn config_rejects_bad_values() {
    let mut cfg = ModelConfig::desk(Vocabulary::dna(4));
    cfg.attn_heads = 3;
    assert!(Lpt::new(cfg.clone(), 0).is_err());
    cfg.attn_heads = 2;
    cfg.properties = vec![PropertySpec::regression("y", 0.0)];
    assert!(Lpt::new(cfg, 0).is_err());
}
