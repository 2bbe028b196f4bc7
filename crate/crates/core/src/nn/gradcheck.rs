//! Finite-difference sweep over every differentiable primitive and layer.

use rand::Rng;

use super::{
    CausalSelfAttention, Conv1d, Decoder, Encoder, LayerNorm, Linear, ResNetBlock,
    TransformerBlock,
};
use crate::autodiff::{check_gradient, ConvSpec, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

/// Checks `sum(w ⊙ op(x))` for a fixed random `w`, so that ops whose plain
/// sum is constant (softmax, normalization) still get a nonzero gradient.
fn check_projected<R, F>(name: &str, op: F, input: &Tensor, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, Var) -> Var,
{
    let shape = {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = op(&mut tape, x);
        tape.shape(y).to_vec()
    };
    let weights = Tensor::uniform(&shape, -1.0, 1.0, rng);
    check_gradient(
        name,
        |tape, x| {
            let y = op(tape, x);
            let w = tape.constant(weights.clone());
            tape.mul(y, w)
        },
        input,
    )
}

fn rand_t<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform magnitudes in `[0.1, 1]` with random sign, away from kinks.
fn rand_away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type Case = fn(&mut rng::Rng) -> Result<f64>;

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| {
            let x = rand_t(&[2, 3, 4], r);
            let b = rand_t(&[4], r);
            let (bc, xc) = (b.clone(), x.clone());
            let e1 = check_projected("add", move |t, v| { let c = t.constant(bc.clone()); t.add(v, c) }, &x, r)?;
            let e2 = check_projected("add", move |t, v| { let c = t.constant(xc.clone()); t.add(c, v) }, &b, r)?;
            Ok(e1.max(e2))
        }),
        ("mul", |r| {
            let x = rand_t(&[2, 3, 4], r);
            let b = rand_t(&[3, 4], r);
            let (bc, xc) = (b.clone(), x.clone());
            let e1 = check_projected("mul", move |t, v| { let c = t.constant(bc.clone()); t.mul(v, c) }, &x, r)?;
            let e2 = check_projected("mul", move |t, v| { let c = t.constant(xc.clone()); t.mul(c, v) }, &b, r)?;
            Ok(e1.max(e2))
        }),
        ("matmul", |r| {
            let a = rand_t(&[2, 3, 4], r);
            let w = rand_t(&[4, 5], r);
            let bb = rand_t(&[2, 4, 5], r);
            let (wc, ac, bc) = (w.clone(), a.clone(), bb.clone());
            let e1 = check_projected("matmul", move |t, v| { let c = t.constant(wc.clone()); t.matmul(v, c) }, &a, r)?;
            let ac2 = ac.clone();
            let e2 = check_projected("matmul", move |t, v| { let c = t.constant(ac.clone()); t.matmul(c, v) }, &w, r)?;
            let e3 = check_projected("matmul", move |t, v| { let c = t.constant(ac2.clone()); t.matmul(c, v) }, &bb, r)?;
            let e4 = check_projected("matmul", move |t, v| { let c = t.constant(bc.clone()); t.matmul(v, c) }, &a, r)?;
            Ok(e1.max(e2).max(e3).max(e4))
        }),
        ("transpose/permute", |r| {
            let x = rand_t(&[2, 3, 4], r);
            let e1 = check_projected("transpose", |t, v| t.transpose(v), &x, r)?;
            let e2 = check_projected("permute", |t, v| t.permute(v, &[1, 2, 0]), &x, r)?;
            Ok(e1.max(e2))
        }),
        ("conv1d", |r| {
            let mut worst = 0.0f64;
            for spec in [
                ConvSpec::symmetric(4, 2, 1, 1),
                ConvSpec::symmetric(3, 1, 2, 2),
                ConvSpec::causal(3, 1),
            ] {
                let x = rand_t(&[2, 8, 3], r);
                let w = rand_t(&[spec.kernel * 3, 2], r);
                let (wc, xc) = (w.clone(), x.clone());
                let e1 = check_projected("conv1d", move |t, v| { let c = t.constant(wc.clone()); t.conv1d(v, c, spec) }, &x, r)?;
                let e2 = check_projected("conv1d", move |t, v| { let c = t.constant(xc.clone()); t.conv1d(c, v, spec) }, &w, r)?;
                worst = worst.max(e1).max(e2);
            }
            Ok(worst)
        }),
        ("relu", |r| {
            let x = rand_away_from_zero(&[3, 5], r);
            check_projected("relu", |t, v| t.relu(v), &x, r)
        }),
        ("abs", |r| {
            let x = rand_away_from_zero(&[3, 5], r);
            check_projected("abs", |t, v| t.abs(v), &x, r)
        }),
        ("layer_norm", |r| {
            let x = rand_t(&[2, 3, 5], r);
            check_projected("layer_norm", |t, v| t.layer_norm(v, LayerNorm::DEFAULT_EPS), &x, r)
        }),
        ("softmax", |r| {
            let x = rand_t(&[2, 4, 4], r);
            let e1 = check_projected("softmax", |t, v| t.softmax(v, false), &x, r)?;
            let e2 = check_projected("softmax", |t, v| t.softmax(v, true), &x, r)?;
            Ok(e1.max(e2))
        }),
        ("cross_entropy", |r| {
            let x = rand_t(&[2, 3, 6], r).map(|v| 3.0 * v);
            let labels: Vec<usize> = (0..6).map(|_| r.gen_range(0..6)).collect();
            check_gradient("cross_entropy", |t, v| t.cross_entropy(v, &labels).expect("valid labels"), &x)
        }),
        ("bce_with_logits", |r| {
            let x = rand_t(&[7], r).map(|v| 3.0 * v);
            let targets: Vec<f64> = (0..7).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
            check_gradient("bce_with_logits", |t, v| t.bce_with_logits(v, &targets), &x)
        }),
        ("embedding", |r| {
            let table = rand_t(&[7, 3], r);
            let idx: Vec<usize> = (0..6).map(|_| r.gen_range(0..7)).collect();
            check_projected("embedding", |t, v| t.embedding(v, &idx, &[2, 3]).expect("valid indices"), &table, r)
        }),
        ("mean", |r| {
            let x = rand_t(&[2, 3, 4], r);
            let e1 = check_gradient("mean", |t, v| t.mean(v), &x)?;
            let e2 = check_projected("mean_axis", |t, v| t.mean_axis(v, 1), &x, r)?;
            Ok(e1.max(e2))
        }),
        ("upsample_nearest", |r| {
            let x = rand_t(&[2, 3, 2], r);
            check_projected("upsample_nearest", |t, v| t.upsample_nearest(v, 2), &x, r)
        }),
        ("l2_normalize", |r| {
            let x = rand_t(&[3, 4], r);
            check_projected("l2_normalize", |t, v| t.l2_normalize(v), &x, r)
        }),
        ("scale/add_scalar", |r| {
            let x = rand_t(&[3, 4], r);
            check_projected("scale", |t, v| { let s = t.scale(v, -1.7); t.add_scalar(s, 0.3) }, &x, r)
        }),
        ("Linear", |r| {
            let layer = Linear::new(4, 3, r);
            let x = rand_t(&[2, 5, 4], r);
            check_projected("Linear", |t, v| layer.forward(t, v), &x, r)
        }),
        ("Conv1d", |r| {
            let layer = Conv1d::new(3, 4, ConvSpec::symmetric(4, 2, 1, 1), r);
            let x = rand_t(&[2, 8, 3], r);
            check_projected("Conv1d", |t, v| layer.forward(t, v), &x, r)
        }),
        ("LayerNorm", |r| {
            let mut layer = LayerNorm::new(5);
            layer.gamma.value = rand_t(&[5], r);
            layer.beta.value = rand_t(&[5], r);
            let x = rand_t(&[2, 3, 5], r);
            check_projected("LayerNorm", |t, v| layer.forward(t, v), &x, r)
        }),
        ("ResNetBlock", |r| {
            let layer = ResNetBlock::new(3, 3, r);
            let x = rand_t(&[1, 8, 3], r);
            check_projected("ResNetBlock", |t, v| layer.forward(t, v), &x, r)
        }),
        ("CausalSelfAttention", |r| {
            let layer = CausalSelfAttention::new(4, 2, r);
            let x = rand_t(&[2, 3, 4], r);
            check_projected("CausalSelfAttention", |t, v| layer.forward(t, v), &x, r)
        }),
        ("TransformerBlock", |r| {
            let layer = TransformerBlock::new(4, 2, 8, r);
            let x = rand_t(&[1, 3, 4], r);
            check_projected("TransformerBlock", |t, v| layer.forward(t, v), &x, r)
        }),
        ("Encoder", |r| {
            let enc = Encoder::new(2, 3, 2, 1, r);
            let x = rand_t(&[1, 4, 2], r);
            check_projected("Encoder", |t, v| enc.forward(t, v).expect("valid length"), &x, r)
        }),
        ("Decoder", |r| {
            let dec = Decoder::new(2, 3, 2, 1, r);
            let x = rand_t(&[1, 2, 2], r);
            check_projected("Decoder", |t, v| dec.forward(t, v).expect("valid shape"), &x, r)
        }),
    ]
}

/// Runs each primitive and layer on `instances` fresh random inputs and
/// reports the worst relative error per entry.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng::stream(seed, i as u64);
            let mut max_error = 0.0f64;
            for _ in 0..instances {
                max_error = max_error.max(case(&mut r)?);
            }
            Ok(GradCheckReport {
                name,
                instances,
                max_error,
            })
        })
        .collect()
}
