//! Central-difference gradient checking for every tape op and the full
//! model loss, at double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, MultiTaskModel, TaskSpec, Variant};
use crate::proxy::{proxy_logits, LogitMode};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for
/// the scalar function `f` at `x`, numeric derivatives by central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(point, false)?;
        let y = f(&mut tape, v)?;
        scalar_output(&tape, y)
    };

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true)?;
    let y = f(&mut tape, v)?;
    scalar_output(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .take_grad(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("grad_check coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_output(tape: &Tape<f64>, y: Var) -> Result<f64> {
    let t = tape.value(y);
    if !t.is_scalar() {
        return Err(Error::Precondition(format!(
            "grad_check function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// `sum(y ⊙ w)` with `w` a constant, so every output coordinate gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone())?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_error: f64,
    pub passed: bool,
}

/// Uniform values in `[-1, 1]` kept at least `margin` away from zero so a
/// central difference never straddles a ReLU kink.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(margin..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Checks every op plus the full model loss at one random point drawn from
/// `seed`.
pub fn run_suite(seed: u64, h: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut push = |op: &str, err: Result<f64>| -> Result<()> {
        let max_error = err?;
        reports.push(GradCheckReport {
            op: op.to_string(),
            max_error,
            passed: max_error < tolerance,
        });
        Ok(())
    };

    let a = uniform(&[3, 4], &mut rng);
    let b = uniform(&[4, 5], &mut rng);
    let bt = uniform(&[5, 4], &mut rng);
    let w35 = uniform(&[3, 5], &mut rng);
    let w34 = uniform(&[3, 4], &mut rng);
    let bias = uniform(&[4], &mut rng);

    push("matmul.lhs", grad_check(|t, x| {
        let bv = t.constant(b.clone())?;
        let y = t.matmul(x, bv)?;
        weighted_sum(t, y, &w35)
    }, &a, h))?;
    push("matmul.rhs", grad_check(|t, x| {
        let av = t.constant(a.clone())?;
        let y = t.matmul(av, x)?;
        weighted_sum(t, y, &w35)
    }, &b, h))?;
    push("matmul_nt.lhs", grad_check(|t, x| {
        let bv = t.constant(bt.clone())?;
        let y = t.matmul_nt(x, bv)?;
        weighted_sum(t, y, &w35)
    }, &a, h))?;
    push("matmul_nt.rhs", grad_check(|t, x| {
        let av = t.constant(a.clone())?;
        let y = t.matmul_nt(av, x)?;
        weighted_sum(t, y, &w35)
    }, &bt, h))?;
    push("add_row_bias.x", grad_check(|t, x| {
        let bv = t.constant(bias.clone())?;
        let y = t.add_row_bias(x, bv)?;
        weighted_sum(t, y, &w34)
    }, &a, h))?;
    push("add_row_bias.bias", grad_check(|t, x| {
        let av = t.constant(a.clone())?;
        let y = t.add_row_bias(av, x)?;
        weighted_sum(t, y, &w34)
    }, &bias, h))?;
    push("add", grad_check(|t, x| {
        let other = t.constant(w34.clone())?;
        let y = t.add(x, other)?;
        let y = t.add(y, x)?;
        weighted_sum(t, y, &w34)
    }, &a, h))?;
    push("mul", grad_check(|t, x| {
        let y = t.mul(x, x)?;
        weighted_sum(t, y, &w34)
    }, &a, h))?;
    push("scale", grad_check(|t, x| {
        let y = t.scale(x, -2.5)?;
        weighted_sum(t, y, &w34)
    }, &a, h))?;
    push("select_rows", grad_check(|t, x| {
        let y = t.select_rows(x, &[2, 0, 2])?;
        weighted_sum(t, y, &w34)
    }, &a, h))?;
    push("sum", grad_check(|t, x| t.sum(x), &a, h))?;
    let kinked = away_from_zero(&[3, 4], 10.0 * h, &mut rng);
    push("relu", grad_check(|t, x| {
        let y = t.relu(x)?;
        weighted_sum(t, y, &w34)
    }, &kinked, h))?;

    let x8 = uniform(&[3, 8], &mut rng);
    let w38 = uniform(&[3, 8], &mut rng);
    let gamma = uniform(&[8], &mut rng);
    let beta = uniform(&[8], &mut rng);
    let eps = 1e-5;
    push("group_norm.x", grad_check(|t, x| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        let y = t.group_norm(x, 2, eps, g, b)?;
        weighted_sum(t, y, &w38)
    }, &x8, h))?;
    push("group_norm.gamma", grad_check(|t, x| {
        let xv = t.constant(x8.clone())?;
        let b = t.constant(beta.clone())?;
        let y = t.group_norm(xv, 2, eps, x, b)?;
        weighted_sum(t, y, &w38)
    }, &gamma, h))?;
    push("group_norm.beta", grad_check(|t, x| {
        let xv = t.constant(x8.clone())?;
        let g = t.constant(gamma.clone())?;
        let y = t.group_norm(xv, 2, eps, g, x)?;
        weighted_sum(t, y, &w38)
    }, &beta, h))?;
    push("layer_norm.x", grad_check(|t, x| {
        let g = t.constant(gamma.clone())?;
        let b = t.constant(beta.clone())?;
        let y = t.layer_norm(x, eps, g, b)?;
        weighted_sum(t, y, &w38)
    }, &x8, h))?;
    push("l2_normalize", grad_check(|t, x| {
        let y = t.l2_normalize(x, 1e-12)?;
        weighted_sum(t, y, &w38)
    }, &x8, h))?;
    let mask_seed = rng.random::<u64>();
    push("dropout", grad_check(|t, x| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let y = t.dropout(x, 0.5, true, &mut mask_rng)?;
        weighted_sum(t, y, &w38)
    }, &x8, h))?;
    let logits = uniform(&[4, 6], &mut rng).cast::<f64>();
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    push("softmax_cross_entropy", grad_check(|t, x| t.softmax_cross_entropy(x, &targets), &logits, h))?;
    let proxies = uniform(&[5, 8], &mut rng);
    let targets5: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
    let norm = LogitMode::NormSoftmax { temperature: 0.05 };
    push("norm_softmax.embeddings", grad_check(|t, x| {
        let g = t.constant(proxies.clone())?;
        let l = proxy_logits(t, x, g, norm)?;
        t.softmax_cross_entropy(l, &targets5)
    }, &x8, h))?;
    push("norm_softmax.proxies", grad_check(|t, x| {
        let e = t.constant(x8.clone())?;
        let l = proxy_logits(t, e, x, norm)?;
        t.softmax_cross_entropy(l, &targets5)
    }, &proxies, h))?;

    for variant in Variant::ALL {
        let (err, name) = model_loss_check(variant, rng.random(), h, tolerance)?;
        push(&name, Ok(err))?;
    }
    Ok(reports)
}

/// Full multi-task loss with respect to the first featurizer weight matrix.
/// Dropout masks and class samples are fixed by reseeding on every
/// evaluation. Batches are redrawn until no ReLU input changes sign inside
/// the difference stencil and the step-`h` truncation error is well below
/// `tolerance`, so the comparison measures the analytic gradient.
fn model_loss_check(variant: Variant, seed: u64, h: f64, tolerance: f64) -> Result<(f64, String)> {
    let config = ModelConfig {
        feature_dim: 5,
        hidden_dims: vec![6],
        embed_dim: 8,
        groups: 2,
        variant,
        seed,
        ..ModelConfig::default()
    };
    let tasks = vec![TaskSpec::subsampled("a", 9, 4), TaskSpec::full("b", 3)];
    let mut model = MultiTaskModel::<f64>::new(config, tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Larger proxies than the default init so the loss surface is not flat.
    for head in model.heads_mut() {
        let shape = head.rows().shape().to_vec();
        *head.rows_mut() = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
    }
    let w0 = model.featurizer()[0].weight.value.clone();
    let step_seed = rng.random::<u64>();
    let loss_of = |batch: &Batch<f64>| {
        let model = &model;
        let batch = batch.clone();
        move |t: &mut Tape<f64>, w: Var| {
            let mut r = ChaCha8Rng::seed_from_u64(step_seed);
            Ok(model.forward_on_tape(t, &batch, true, &mut r, Some(w))?.total)
        }
    };
    let mut batch = Batch {
        features: Tensor::zeros(&[6, 5]),
        labels: vec![vec![0, 8, 3, -1, 5, 8], vec![2, -1, 0, 1, -1, 1]],
    };
    for _ in 0..100 {
        batch.features = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut rng);
        if relu_masks_stable(&model, &w0, &batch.features, h)?
            && truncation_error(loss_of(&batch), &w0, h)? < tolerance / 10.0
        {
            break;
        }
    }
    let err = grad_check(loss_of(&batch), &w0, h)?;
    Ok((err, format!("model_loss.{variant}")))
}

/// Estimated truncation error of the step-`h` central difference, from
/// its disagreement with the step-`h/2` one, relative as in [`grad_check`].
fn truncation_error<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |i: usize, d: f64| -> Result<f64> {
        let mut p = x.clone();
        p.data_mut()[i] += d;
        let mut tape = Tape::new();
        let v = tape.leaf(p, false)?;
        let y = f(&mut tape, v)?;
        scalar_output(&tape, y)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let coarse = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
        let fine = (eval(i, h / 2.0)? - eval(i, -h / 2.0)?) / h;
        worst = worst.max(4.0 / 3.0 * (coarse - fine).abs() / fine.abs().max(1.0));
    }
    Ok(worst)
}

/// Signs of every ReLU input of `model` on `features`, with the first
/// weight matrix replaced by `w`.
fn relu_signs(model: &MultiTaskModel<f64>, w: &Tensor<f64>, features: &Tensor<f64>) -> Result<Vec<bool>> {
    let mut m = model.clone();
    m.featurizer[0].weight.value = w.clone();
    let mut signs = Vec::new();
    let mut tape = Tape::new();
    let x = tape.constant(features.clone())?;
    let wv = tape.constant(w.clone())?;
    let mut hidden = tape.matmul_nt(x, wv)?;
    if let Some(b) = &m.featurizer[0].bias {
        let bv = tape.constant(b.value.clone())?;
        hidden = tape.add_row_bias(hidden, bv)?;
    }
    if m.featurizer.len() > 1 {
        signs.extend(tape.value(hidden).data().iter().map(|&v| v > 0.0));
    }
    if m.config().variant.has_relu() {
        signs.extend(m.pre_activation(features)?.data().iter().map(|&v| v > 0.0));
    }
    Ok(signs)
}

fn relu_masks_stable(model: &MultiTaskModel<f64>, w0: &Tensor<f64>, features: &Tensor<f64>, h: f64) -> Result<bool> {
    let base = relu_signs(model, w0, features)?;
    for i in 0..w0.numel() {
        for d in [-h, h] {
            let mut w = w0.clone();
            w.data_mut()[i] += d;
            if relu_signs(model, &w, features)? != base {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// The report with the largest error.
pub fn worst(reports: &[GradCheckReport]) -> Option<&GradCheckReport> {
    reports.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
}
