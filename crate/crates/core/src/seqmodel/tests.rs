use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::nn::Module;
use crate::rng;
use crate::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerTrainConfig};

fn vocab(sizes: &[usize]) -> TokenVocabulary {
    TokenVocabulary::new(sizes.to_vec()).unwrap()
}

fn tiny_model(sizes: &[usize], lengths: &[usize], seed: u64) -> ARTransformer {
    let cfg = TransformerConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ff_width: 16,
    };
    ARTransformer::new(cfg, vocab(sizes), lengths.to_vec(), &mut rng::seeded(seed)).unwrap()
}

fn random_scales<R: Rng>(r: &mut R, v: &TokenVocabulary, lengths: &[usize]) -> Vec<Vec<usize>> {
    lengths
        .iter()
        .zip(v.sizes())
        .map(|(&l, &size)| (0..l).map(|_| r.gen_range(0..size)).collect())
        .collect()
}

#[test]
fn vocabulary_offsets_and_bos() {
    let v = vocab(&[128, 512]);
    assert_eq!(v.offsets(), &[0, 128, 640]);
    assert_eq!(v.bos(), 640);
    assert_eq!(v.scale_of(127), Some(0));
    assert_eq!(v.scale_of(128), Some(1));
    assert_eq!(v.scale_of(640), None);
    assert!(TokenVocabulary::new(vec![]).is_err());
    assert!(TokenVocabulary::new(vec![4, 0]).is_err());
}

#[test]
fn shift_examples() {
    let v = vocab(&[128, 512]);
    assert_eq!(shift_tokens(&[5], &v, 1).unwrap(), vec![133]);
    assert_eq!(shift_tokens(&[0, 7, 127], &v, 0).unwrap(), vec![0, 7, 127]);
    match shift_tokens(&[1, 512], &v, 1) {
        Err(crate::Error::ScaleTokenOutOfRange { scale, position, .. }) => assert_eq!((scale, position), (2, 1)),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(unshift_tokens(&[133], &v, 1).unwrap(), vec![5]);
    assert!(unshift_tokens(&[5], &v, 1).is_err());
}

#[test]
fn concat_and_split() {
    let y = vec![vec![1; 12], vec![2; 6]];
    let cat = concat_scales(&y);
    assert_eq!(cat.len(), 18);
    assert_eq!(split_scales(&cat, &[12, 6]).unwrap(), y);
    assert_eq!(concat_scales(&[vec![4, 5]]), vec![4, 5]);
    assert!(split_scales(&cat, &[12, 5]).is_err());
}

#[test]
fn make_input_examples() {
    let v = vocab(&[128, 512]);
    assert_eq!(make_input(&[3, 7], &v), vec![640, 3]);
    assert_eq!(make_input(&[9], &v), vec![640]);
    assert_eq!(make_input(&[1, 2, 3, 4], &v).len(), 4);
}

#[test]
fn augment_bounds_and_rate() {
    let v = vocab(&[4, 6, 3]);
    let mut r = rng::seeded(1);
    let lengths = [5, 7, 4];
    let labels = label_sequence(&random_scales(&mut r, &v, &lengths), &v).unwrap();
    let input = make_input(&labels, &v);
    assert_eq!(augment(&input, &v, 0.0, &mut r).unwrap(), input);
    for _ in 0..100 {
        let out = augment(&input, &v, 1.0, &mut r).unwrap();
        assert_eq!(out[0], v.bos());
        for (a, b) in out.iter().zip(&input).skip(1) {
            assert_eq!(v.scale_of(*a), v.scale_of(*b));
        }
    }
    assert!(augment(&input, &v, 1.5, &mut r).is_err());

    // Monte-Carlo replacement rate: a replacement draws the original token
    // with probability 1/V^(k), so count draws rather than visible changes.
    let big = vocab(&[1_000_000]);
    let seq: Vec<usize> = (0..100_001).map(|i| if i == 0 { big.bos() } else { i % 1000 }).collect();
    let out = augment(&seq, &big, 0.1, &mut r).unwrap();
    let changed = out.iter().zip(&seq).filter(|(a, b)| a != b).count();
    let rate = changed as f64 / 100_000.0;
    assert!((rate - 0.1).abs() <= 0.01, "{rate}");
}

#[test]
fn type_id_examples() {
    let mut expect = vec![0];
    expect.extend([1; 6]);
    expect.extend([2; 12]);
    assert_eq!(type_ids(&[6, 12]), expect);
    assert_eq!(type_ids(&[4]), vec![0, 1, 1, 1, 1]);
}

#[test]
fn type_ids_match_cumulative_rule() {
    let mut r = rng::seeded(2);
    for _ in 0..500 {
        let lengths: Vec<usize> = (0..r.gen_range(1..5)).map(|_| r.gen_range(0..9)).collect();
        let ids = type_ids(&lengths);
        assert_eq!(ids.len(), 1 + lengths.iter().sum::<usize>());
        assert_eq!(ids[0], 0);
        let mut cum = vec![0];
        for l in &lengths {
            cum.push(cum.last().unwrap() + l);
        }
        for (i, &k) in ids.iter().enumerate().skip(1) {
            assert!(cum[k - 1] < i && i <= cum[k]);
        }
        for (k, &l) in lengths.iter().enumerate() {
            assert_eq!(ids.iter().filter(|&&x| x == k + 1).count(), l);
        }
    }
}

#[test]
fn plumbing_round_trip_over_random_configs() {
    let mut r = rng::seeded(3);
    for _ in 0..1000 {
        let k = r.gen_range(1..5);
        let sizes: Vec<usize> = (0..k).map(|_| r.gen_range(1..1100)).collect();
        let lengths: Vec<usize> = (0..k).map(|_| r.gen_range(1..40)).collect();
        let v = vocab(&sizes);
        assert_eq!(v.bos(), sizes.iter().sum::<usize>());
        let y = random_scales(&mut r, &v, &lengths);
        let labels = label_sequence(&y, &v).unwrap();
        for (i, t) in labels.iter().enumerate() {
            let scale = type_ids(&lengths)[i + 1] - 1;
            assert!(v.range(scale).contains(t));
        }
        let back: Vec<Vec<usize>> = split_scales(&labels, &lengths)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, s)| unshift_tokens(s, &v, k).unwrap())
            .collect();
        assert_eq!(back, y);
    }
}

#[test]
fn single_scale_plumbing_is_identity() {
    let v = vocab(&[512]);
    let y = vec![vec![0, 5, 511, 3]];
    let labels = label_sequence(&y, &v).unwrap();
    assert_eq!(labels, y[0]);
    assert_eq!(type_ids(&[4]).iter().filter(|&&k| k != 0).count(), 4);
    assert_eq!(make_input(&labels, &v), vec![512, 0, 5, 511]);
}

#[test]
fn embedding_tables_have_expected_rows() {
    let m = tiny_model(&[5, 7], &[4, 2], 0);
    assert_eq!(m.token_emb.rows(), 13);
    assert_eq!(m.pos_emb.rows(), 6);
    assert_eq!(m.type_emb.rows(), 3);
    assert_eq!(m.head.out_features(), 12);
}

#[test]
fn logits_rows_are_distributions() {
    let m = tiny_model(&[5, 7], &[4, 2], 1);
    let logits = m.logits(&[vec![12, 0, 3, 4, 6, 9]]).unwrap();
    assert_eq!(logits.shape(), &[1, 6, 12]);
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let p = tape.softmax(x, false);
    for row in tape.value(p).rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    assert_eq!(m.logits(&[vec![12]]).unwrap().shape(), &[1, 1, 12]);
}

#[test]
fn logits_are_causal() {
    let m = tiny_model(&[5, 7], &[4, 2], 2);
    let a = m.logits(&[vec![12, 0, 3, 4, 6, 9]]).unwrap();
    let b = m.logits(&[vec![12, 0, 3, 1, 11, 5]]).unwrap();
    assert_eq!(&a.data()[..3 * 12], &b.data()[..3 * 12]);
    assert_ne!(&a.data()[3 * 12..], &b.data()[3 * 12..]);
}

#[test]
fn type_embedding_is_live() {
    let mut m = tiny_model(&[5, 7], &[4, 2], 3);
    let input = vec![vec![12, 0, 3, 4, 6, 9]];
    let before = m.logits(&input).unwrap();
    let w = &mut m.type_emb.weight.value;
    let d = w.dim(1);
    let (r1, r2) = (w.data()[d..2 * d].to_vec(), w.data()[2 * d..3 * d].to_vec());
    w.data_mut()[d..2 * d].copy_from_slice(&r2);
    w.data_mut()[2 * d..3 * d].copy_from_slice(&r1);
    assert_ne!(m.logits(&input).unwrap(), before);
}

#[test]
fn overlong_sequences_are_rejected() {
    let m = tiny_model(&[5], &[3], 4);
    assert!(matches!(m.logits(&[vec![5, 0, 1, 2]]), Err(crate::Error::SequenceTooLong { len: 4, max: 3 })));
}

#[test]
fn ar_loss_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 3, 640]));
    let l = ar_loss(&mut tape, z, &[0, 5, 639]).unwrap();
    assert!((tape.value(l).item() - 640f64.ln()).abs() <= 1e-9);

    let mut t = Tensor::zeros(&[1, 2, 4]);
    t.data_mut()[1] = 100.0;
    t.data_mut()[4 + 3] = 100.0;
    let x = tape.constant(t);
    let l = ar_loss(&mut tape, x, &[1, 3]).unwrap();
    assert!(tape.value(l).item() < 1e-40);
    assert!(ar_loss(&mut tape, x, &[1, 4]).is_err());
}

#[test]
fn ar_loss_matches_log_softmax_oracle() {
    let mut r = rng::seeded(5);
    for _ in 0..50 {
        let (s, v) = (r.gen_range(1..8), r.gen_range(2..20));
        let logits = Tensor::uniform(&[2, s, v], -4.0, 4.0, &mut r);
        let labels: Vec<usize> = (0..2 * s).map(|_| r.gen_range(0..v)).collect();
        let mut oracle = 0.0;
        for (row, &y) in logits.data().chunks(v).zip(&labels) {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            oracle -= row[y] - lse;
        }
        oracle /= labels.len() as f64;
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let loss = ar_loss(&mut tape, x, &labels).unwrap();
        let got = tape.value(loss).item();
        assert!((got - oracle).abs() <= 1e-6);
    }
}

#[test]
fn ar_loss_gradient_matches_finite_differences() {
    let mut r = rng::seeded(6);
    let logits = Tensor::uniform(&[1, 3, 5], -1.0, 1.0, &mut r);
    let labels = [4, 0, 2];
    let f = |t: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let l = ar_loss(&mut tape, x, &labels).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let x = tape.variable(logits.clone());
    let l = ar_loss(&mut tape, x, &labels).unwrap();
    let g = tape.backward(l).unwrap().wrt(x).unwrap().clone();
    for i in 0..logits.numel() {
        let (mut a, mut b) = (logits.clone(), logits.clone());
        a.data_mut()[i] += 1e-5;
        b.data_mut()[i] -= 1e-5;
        let num = (f(&a) - f(&b)) / 2e-5;
        assert!((g.data()[i] - num).abs() / num.abs().max(1e-8) <= 1e-4 || (g.data()[i] - num).abs() <= 1e-9);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = tiny_model(&[5, 7], &[4, 2], 7);
    let back = ARTransformer::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
    let input = vec![vec![12, 1, 2, 3, 8, 9]];
    assert_eq!(back.logits(&input).unwrap(), m.logits(&input).unwrap());
    assert_eq!(back.vocab(), m.vocab());
    assert!(back.named_params().iter().all(|(_, p)| !p.requires_grad));
}

fn toy_pipeline() -> (Tensor, crate::tokenizer::MultiScaleTokenizer) {
    let ds = crate::data::gen_sines(96, 8, 2, 3).unwrap();
    let x = crate::data::Normalizer::fit(&ds.windows).unwrap().normalize(&ds.windows).unwrap();
    let cfg = TokenizerConfig {
        channels: 2,
        window: 8,
        factors: vec![2, 4],
        vocab: vec![6, 4],
        code_dim: 4,
        hidden: 6,
        ..TokenizerConfig::default()
    };
    let train = TokenizerTrainConfig { steps: 30, batch_size: 16, ..TokenizerTrainConfig::default() };
    let (tok, _) = train_tokenizer(&x, cfg, &train).unwrap();
    (x, tok)
}

#[test]
fn zero_steps_returns_initial_model() {
    let (x, tok) = toy_pipeline();
    let cfg = TransformerConfig { d_model: 8, heads: 2, ff_width: 16, layers: 1 };
    let train = TransformerTrainConfig { steps: 0, ..TransformerTrainConfig::default() };
    let (m, h) = train_transformer(&x, &tok, cfg, &train).unwrap();
    assert!(h.loss.is_empty());
    assert_eq!(m.lengths(), &[4, 2]);
    assert_eq!(m.vocab().bos(), 10);
}

#[test]
fn training_lowers_held_out_loss() {
    let (x, tok) = toy_pipeline();
    let (train_x, test_x) = {
        let idx: Vec<usize> = (0..96).collect();
        (crate::data::gather(&x, &idx[..80]), crate::data::gather(&x, &idx[80..]))
    };
    let cfg = TransformerConfig { d_model: 16, heads: 2, ff_width: 32, layers: 1 };
    let base = TransformerTrainConfig { steps: 0, ..TransformerTrainConfig::default() };
    let (init, _) = train_transformer(&train_x, &tok, cfg, &base).unwrap();
    let train = TransformerTrainConfig { steps: 150, batch_size: 16, warmup: 10, ..TransformerTrainConfig::default() };
    let (m, hist) = train_transformer(&train_x, &tok, cfg, &train).unwrap();
    assert_eq!(hist.loss.len(), 150);
    let before = evaluate_windows(&init, &tok, &test_x).unwrap();
    let after = evaluate_windows(&m, &tok, &test_x).unwrap();
    assert!(after < before, "{after} >= {before}");

    let (again, hist2) = train_transformer(&train_x, &tok, cfg, &train).unwrap();
    assert_eq!(hist, hist2);
    assert_eq!(again.to_checkpoint().unwrap().tensors, m.to_checkpoint().unwrap().tensors);
}

proptest! {
    #[test]
    fn prop_shift_unshift_identity(
        sizes in prop::collection::vec(1usize..2000, 1..5),
        seed in any::<u64>(),
    ) {
        let v = vocab(&sizes);
        let mut r = rng::seeded(seed);
        for k in 0..sizes.len() {
            let y: Vec<usize> = (0..10).map(|_| r.gen_range(0..sizes[k])).collect();
            let s = shift_tokens(&y, &v, k).unwrap();
            prop_assert!(s.iter().all(|t| v.range(k).contains(t)));
            prop_assert_eq!(unshift_tokens(&s, &v, k).unwrap(), y);
        }
    }

    #[test]
    fn prop_augmented_tokens_stay_in_scale(
        sizes in prop::collection::vec(1usize..50, 1..4),
        eps in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let v = vocab(&sizes);
        let mut r = rng::seeded(seed);
        let lengths: Vec<usize> = sizes.iter().map(|_| r.gen_range(1..6)).collect();
        let labels = label_sequence(&random_scales(&mut r, &v, &lengths), &v).unwrap();
        let input = make_input(&labels, &v);
        let out = augment(&input, &v, eps, &mut r).unwrap();
        prop_assert_eq!(out[0], v.bos());
        prop_assert!(out[1..].iter().all(|&t| t != v.bos()));
        for (a, b) in out.iter().zip(&input).skip(1) {
            prop_assert_eq!(v.scale_of(*a), v.scale_of(*b));
        }
    }
}
