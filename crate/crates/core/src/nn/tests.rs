use super::*;
use crate::autodiff::{ConvSpec, Tape, Tensor};
use crate::rng;

fn zero_all(m: &mut impl Module) {
    for p in m.params_mut() {
        p.value.data_mut().fill(0.0);
    }
}

#[test]
fn encoder_halves_length_per_stage() {
    let mut r = rng::seeded(1);
    let enc = Encoder::new(5, 8, 6, 2, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[2, 24, 5], -1.0, 1.0, &mut r));
    let h = enc.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(h), &[2, 6, 6]);
}

#[test]
fn encoder_depth_zero_preserves_length() {
    let mut r = rng::seeded(2);
    let enc = Encoder::new(3, 4, 5, 0, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 7, 3]));
    let h = enc.forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(h), &[1, 7, 5]);
}

#[test]
fn encoder_rejects_indivisible_length_before_compute() {
    let mut r = rng::seeded(3);
    let enc = Encoder::new(3, 4, 5, 2, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 10, 3]));
    let before = tape.len();
    assert!(matches!(enc.forward(&mut tape, x), Err(crate::Error::Config(_))));
    assert_eq!(tape.len(), before);
}

#[test]
fn zero_input_with_zero_biases_gives_zero_output() {
    let mut r = rng::seeded(4);
    let mut enc = Encoder::new(5, 8, 6, 2, &mut r);
    for (name, p) in enc.named_params_mut() {
        if name.ends_with("bias") || name.ends_with("beta") {
            p.value.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 24, 5]));
    let h = enc.forward(&mut tape, x).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_restores_length() {
    let mut r = rng::seeded(5);
    let dec = Decoder::new(6, 8, 5, 2, &mut r);
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut r));
    let x = dec.forward(&mut tape, h).unwrap();
    assert_eq!(tape.shape(x), &[2, 24, 5]);
}

#[test]
fn encoder_decoder_shape_round_trip() {
    let mut r = rng::seeded(6);
    for (d, l, depth) in [(1, 8, 3), (4, 12, 2), (2, 5, 0), (3, 16, 1)] {
        let enc = Encoder::new(d, 4, 3, depth, &mut r);
        let dec = Decoder::new(3, 4, d, depth, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, l, d], -1.0, 1.0, &mut r));
        let h = enc.forward(&mut tape, x).unwrap();
        let y = dec.forward(&mut tape, h).unwrap();
        assert_eq!(tape.shape(y), &[2, l, d]);
    }
}

#[test]
fn nearest_upsample_duplicates() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.upsample_nearest(x, 2);
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
}

fn small_transformer(r: &mut rng::Rng) -> (Vec<TransformerBlock>, Linear) {
    let blocks = (0..2).map(|_| TransformerBlock::new(64, 4, 128, r)).collect();
    (blocks, Linear::new(64, 11, r))
}

#[test]
fn transformer_is_causal() {
    let mut r = rng::seeded(7);
    let (blocks, head) = small_transformer(&mut r);
    let emb = Tensor::uniform(&[2, 6, 64], -1.0, 1.0, &mut r);
    let base = {
        let mut tape = Tape::new();
        let e = tape.constant(emb.clone());
        let y = transformer_forward(&mut tape, e, &blocks, &head);
        tape.value(y).clone()
    };
    for i in 0..6 {
        let mut cut = emb.clone();
        for b in 0..2 {
            for j in i + 1..6 {
                let off = (b * 6 + j) * 64;
                cut.data_mut()[off..off + 64].fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let e = tape.constant(cut);
        let y = transformer_forward(&mut tape, e, &blocks, &head);
        let out = tape.value(y);
        for b in 0..2 {
            for j in 0..=i {
                let off = (b * 6 + j) * 11;
                let same = out.data()[off..off + 11]
                    .iter()
                    .zip(&base.data()[off..off + 11])
                    .all(|(a, c)| a.to_bits() == c.to_bits());
                assert!(same, "position {j} changed after cutting > {i}");
            }
        }
    }
}

#[test]
fn transformer_single_position_and_softmax_rows() {
    let mut r = rng::seeded(8);
    let (blocks, head) = small_transformer(&mut r);
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::uniform(&[3, 1, 64], -1.0, 1.0, &mut r));
    let y = transformer_forward(&mut tape, e, &blocks, &head);
    assert_eq!(tape.shape(y), &[3, 1, 11]);

    let e = tape.constant(Tensor::uniform(&[2, 5, 64], -1.0, 1.0, &mut r));
    let y = transformer_forward(&mut tape, e, &blocks, &head);
    assert!(tape.value(y).is_finite());
    let p = tape.softmax(y, false);
    for row in tape.value(p).rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_standardizes_slices() {
    let mut r = rng::seeded(9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[4, 6, 16], -50.0, 50.0, &mut r));
    let y = tape.layer_norm(x, LayerNorm::DEFAULT_EPS);
    for row in tape.value(y).rows() {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn zeroed_resnet_block_is_identity() {
    let mut r = rng::seeded(10);
    let mut block = ResNetBlock::new(4, 3, &mut r);
    zero_all(&mut block.conv1);
    zero_all(&mut block.conv2);
    let input = Tensor::uniform(&[2, 9, 4], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = block.forward(&mut tape, x);
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_layer_output_length() {
    let mut r = rng::seeded(11);
    let conv = Conv1d::new(2, 3, ConvSpec::symmetric(4, 2, 1, 1), &mut r);
    assert_eq!(conv.output_len(24), Some(12));
    let conv = Conv1d::new(2, 3, ConvSpec::symmetric(3, 1, 9, 9), &mut r);
    assert_eq!(conv.output_len(24), Some(24));
}

#[test]
fn every_primitive_and_layer_passes_gradient_check() {
    for report in gradient_suite(10, 42).unwrap() {
        assert!(
            report.max_error <= 1e-4,
            "{}: max relative error {:e}",
            report.name,
            report.max_error
        );
    }
}

#[test]
fn adamw_moves_towards_minimum_and_zeroes_grads() {
    let mut p = crate::autodiff::Param::new(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        ..AdamWConfig::default()
    });
    for _ in 0..200 {
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().accumulate_into([&mut p]);
        opt.step([&mut p], 0.1);
        assert!(p.grad.as_ref().unwrap().data().iter().all(|&g| g == 0.0));
    }
    assert!(p.value.data().iter().all(|v| v.abs() < 0.05));
}

#[test]
fn clip_grad_norm_rescales() {
    let mut p = crate::autodiff::Param::new(Tensor::zeros(&[2]));
    p.grad = Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let norm = clip_grad_norm(&mut [&mut p], 1.0);
    assert_eq!(norm, 5.0);
    let g = p.grad.unwrap();
    assert!((g.data()[0] - 0.6).abs() < 1e-15 && (g.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(1.0, 0, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    assert!((cosine_lr(1.0, 10, 100, 10, 0.1) - 1.0).abs() < 1e-12);
    assert!((cosine_lr(1.0, 100, 100, 10, 0.1) - 0.1).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_and_shape_validation() {
    let mut r = rng::seeded(12);
    let enc = Encoder::new(3, 4, 5, 1, &mut r);
    let mut ck = Checkpoint::new("test", serde_json::json!({"a": 1}));
    ck.insert_module("enc", &enc);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut other = Encoder::new(3, 4, 5, 1, &mut r);
    loaded.load_module("enc", &mut other).unwrap();
    for ((_, a), (_, b)) in enc.named_params().iter().zip(other.named_params()) {
        assert_eq!(a.value, b.value);
    }
    let mut wrong = Encoder::new(3, 6, 5, 1, &mut r);
    assert!(matches!(loaded.load_module("enc", &mut wrong), Err(crate::Error::Checkpoint(_))));
    assert!(loaded.expect_kind("other").is_err());
}
