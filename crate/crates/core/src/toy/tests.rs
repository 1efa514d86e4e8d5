use super::*;
use crate::types::validate_example;

fn small_config(seed: u64) -> ToyConfig {
    ToyConfig {
        seed,
        ..ToyConfig::default()
    }
}

fn model(seed: u64) -> ToyModel {
    ToyModel::new(small_config(seed)).unwrap()
}

#[test]
fn init_is_deterministic() {
    assert_eq!(model(3).parameters(), model(3).parameters());
    assert_ne!(model(3).parameters(), model(4).parameters());
    let bad = ToyConfig {
        d_model: 30,
        n_heads: 4,
        ..ToyConfig::default()
    };
    assert!(matches!(ToyModel::new(bad), Err(Error::InvalidConfig(_))));
}

#[test]
fn init_scale() {
    let p = model(1).parameters();
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let std = (p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.02).abs() < 0.001, "{std}");
}

#[test]
fn masking_first_position_renormalizes() {
    let m = model(0);
    let tokens = [5, 9, 11];
    let out = m
        .forward(&tokens, &[false, true, true], MaskMode::PreSoftmaxNegInf)
        .unwrap();
    let a = &out.attention;
    for l in 0..4 {
        for h in 0..4 {
            // Query 0 can see only itself, which is masked.
            assert!(a.row(l, h, 0).iter().all(|&w| w == 0.0));
            for q in 1..3 {
                let row = a.row(l, h, q);
                assert_eq!(row[0], 0.0);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn post_softmax_zero_rows_do_not_renormalize() {
    let m = model(0);
    let tokens = [5, 9, 11, 2];
    let keep = [true, false, true, true];
    let out = m.forward(&tokens, &keep, MaskMode::PostSoftmaxZero).unwrap();
    for l in 0..4 {
        for h in 0..4 {
            for q in 1..4 {
                let row = out.attention.row(l, h, q);
                assert_eq!(row[1], 0.0);
                let sum: f64 = row.iter().sum();
                assert!(sum < 1.0 && sum > 0.0);
            }
        }
    }
}

#[test]
fn causal_invariance() {
    let m = model(2);
    let a = [1, 2, 3, 4, 5, 6];
    let b = [1, 2, 3, 40, 50, 60];
    let keep_a = [true; 6];
    let keep_b = [true, true, true, false, true, false];
    let oa = m.forward(&a, &keep_a, MaskMode::default()).unwrap();
    let ob = m.forward(&b, &keep_b, MaskMode::default()).unwrap();
    for t in 0..3 {
        assert_eq!(oa.logits_at(t), ob.logits_at(t));
    }
}

#[test]
fn chain_rule_over_target_tokens() {
    let m = model(5);
    let x = [3, 7, 1, 9];
    let y = [4, 8, 15];
    let keep = [true, false, true, true];
    let mode = MaskMode::default();
    let both = m.target_logprob(&x, &y, Span::new(0, 2), &keep, mode).unwrap();
    let first = m.target_logprob(&x, &y, Span::new(0, 1), &keep, mode).unwrap();
    let second = m.target_logprob(&x, &y, Span::new(1, 2), &keep, mode).unwrap();
    assert!((both - (first + second)).abs() < 1e-12);
}

#[test]
fn masking_an_unattended_source_is_a_no_op() {
    // Once a source's tokens are masked they receive zero attention
    // everywhere; masking them again through v must not change anything.
    let m = model(6);
    let ex = Example {
        id: "e".into(),
        x: TokenSeq(vec![1, 2, 3, 4, 5, 6]),
        sources: SourceSet(vec![Span::new(0, 2), Span::new(2, 4)]),
        y: TokenSeq(vec![7, 8]),
        targets: vec![Span::new(0, 2)],
        text: None,
    };
    let forced = [false, false, true, true, true, true];
    let tokens = [1, 2, 3, 4, 5, 6, 7];
    let out = m
        .forward(&tokens, &[false, false, true, true, true, true, true], MaskMode::default())
        .unwrap();
    for l in 0..4 {
        for h in 0..4 {
            for q in 2..7 {
                assert_eq!(out.attention.row(l, h, q)[..2], [0.0, 0.0]);
            }
        }
    }
    let direct = m
        .target_logprob(ex.x.as_slice(), ex.y.as_slice(), ex.targets[0], &forced, MaskMode::default())
        .unwrap();
    let backend = ToyBackend::new(m, MaskMode::default());
    let via_v = backend
        .logprob_under_ablation(&ex, 0, &AblationVector(vec![false, true]))
        .unwrap();
    assert_eq!(direct, via_v);
}

#[test]
fn aggregate_hand_case() {
    let mut raw = RawAttention::zeros(1, 1, 3);
    raw.row_mut(0, 0, 2).copy_from_slice(&[0.2, 0.3, 0.5]);
    let f = aggregate_attention(&raw, 3, Span::new(0, 1), &[Span::new(0, 2)]).unwrap();
    assert!((f.get(0, 0, 0) - 0.5).abs() < 1e-7);
    assert!(aggregate_attention(&raw, 3, Span::new(0, 2), &[Span::new(0, 2)]).is_err());
    assert!(aggregate_attention(&raw, 3, Span::new(0, 1), &[Span::new(0, 4)]).is_err());
}

#[test]
fn aggregate_partition_and_linearity() {
    let m = model(7);
    let x = [3u32, 4, 5, 6, 7, 8, 9];
    let y = [1u32, 2, 3];
    let whole = [Span::new(0, 7)];
    let parts = [Span::new(0, 3), Span::new(3, 7)];
    let split = [Span::new(0, 1), Span::new(1, 3), Span::new(3, 7)];
    let raw = m.target_attention(&x, &y, Span::new(0, 1)).unwrap();
    let fw = aggregate_attention(&raw, 7, Span::new(0, 1), &whole).unwrap();
    let fp = aggregate_attention(&raw, 7, Span::new(0, 1), &parts).unwrap();
    let fs = aggregate_attention(&raw, 7, Span::new(0, 1), &split).unwrap();
    for l in 0..4 {
        for h in 0..4 {
            assert!((fw.get(0, l, h) - 1.0).abs() < 1e-6);
            assert!((fp.get(0, l, h) + fp.get(1, l, h) - 1.0).abs() < 1e-6);
            assert!((fs.get(0, l, h) + fs.get(1, l, h) - fp.get(0, l, h)).abs() < 1e-6);
        }
    }

    // Later target tokens also attend to Y, so partition mass is at most one.
    let raw = m.target_attention(&x, &y, Span::new(1, 3)).unwrap();
    let f = aggregate_attention(&raw, 7, Span::new(1, 3), &parts).unwrap();
    for l in 0..4 {
        for h in 0..4 {
            assert!(f.get(0, l, h) + f.get(1, l, h) <= 1.0 + 1e-6);
        }
    }

    // Linearity in the raw tensor.
    let mut doubled = raw.clone();
    doubled.values.iter_mut().for_each(|v| *v *= 2.0);
    let g = aggregate_attention(&doubled, 7, Span::new(1, 3), &parts).unwrap();
    for (a, b) in f.values().iter().zip(g.values()) {
        assert!((2.0 * a - b).abs() < 1e-6);
    }
}

#[test]
fn greedy_generation() {
    let m = model(8);
    let prompt = [1u32, 2, 3];
    assert_eq!(m.generate_greedy(&prompt, 0).unwrap(), prompt);
    let out = m.generate_greedy(&prompt, 5).unwrap();
    assert_eq!(out, m.generate_greedy(&prompt, 5).unwrap());
    assert_eq!(&out[..3], &prompt);
    for t in 3..out.len() {
        let fwd = m
            .forward(&out[..t], &vec![true; t], MaskMode::default())
            .unwrap();
        let logits = fwd.logits_at(t - 1);
        let chosen = logits[out[t] as usize];
        assert!(logits.iter().all(|&l| l <= chosen));
    }
    assert!(matches!(
        m.generate_greedy(&prompt, 126),
        Err(Error::TooLong { .. })
    ));
}

#[test]
fn argmax_ties_to_lowest() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn gradient_zero_for_masked_token() {
    let m = model(9);
    let ex = Example {
        id: "g".into(),
        x: TokenSeq(vec![4, 5, 6, 7, 8]),
        sources: SourceSet(vec![Span::new(0, 2), Span::new(2, 4)]),
        y: TokenSeq(vec![1, 2]),
        targets: vec![Span::new(0, 2)],
        text: None,
    };
    let b = ToyBackend::new(m, MaskMode::default());
    let g = b
        .input_grad_l1_under(&ex, 0, &AblationVector(vec![false, true]))
        .unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[1], 0.0);
    assert!(g[2] > 0.0 && g[4] > 0.0);
}

#[test]
fn gradient_first_order_taylor() {
    let m = model(10);
    let x = [4u32, 5, 6, 7, 8];
    let y = [1u32, 2];
    let target = Span::new(0, 2);
    let keep = [true; 5];
    let l1 = m
        .input_grad_l1(&x, &y, target, &keep, MaskMode::default(), GRAD_STEP)
        .unwrap();
    let pos = argmax(&l1);
    let grad = m.input_grad(&x, &y, target, pos, GRAD_STEP).unwrap();
    let d = m.config().d_model;
    let delta = 1e-5;
    let mut perturb = vec![0.0; (x.len() + 1) * d];
    for c in 0..d {
        perturb[pos * d + c] = delta * grad[c].signum();
    }
    let base = m.target_logprob(&x, &y, target, &keep, MaskMode::default()).unwrap();
    let moved = m.target_logprob_perturbed(&x, &y, target, &perturb).unwrap();
    let predicted = delta * l1[pos];
    assert!(
        ((moved - base) - predicted).abs() < 1e-2 * predicted,
        "{} vs {predicted}",
        moved - base
    );
}

#[test]
fn generated_examples_validate() {
    let m = model(11);
    let data = ToyDataConfig::default();
    let exs = toy_generate(&m, &data, 20).unwrap();
    let backend = ToyBackend::new(m, MaskMode::default());
    for ex in &exs {
        validate_example(ex, &backend.info()).unwrap();
        assert_eq!(ex.targets.len(), 2);
        assert_eq!(ex.n_sources(), 8);
    }
}
