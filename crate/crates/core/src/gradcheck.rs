//! Finite-difference verification of every differentiable op.
//!
//! The harness runs at f64: finite differences at f32 lose too many digits
//! to separate an implementation bug from rounding. Non-scalar outputs are
//! scalarized through a fixed random weighting so a single backward pass
//! checks the whole Jacobian action.

use std::collections::HashMap;

use crate::nn::Padding;
use crate::tensor::{SplitMix64, Tape, Tensor, TensorError, TensorId};
use crate::unet::{build_unet, UNetConfig};

const WEIGHT_SEED: u64 = 0x5ca1_ab1e;

/// Maximum relative error between analytic and central-difference
/// gradients, over every element of every input:
/// `|analytic − numeric| / max(1, |analytic|)`.
///
/// `build` must be a pure function of the leaves it is handed; it runs
/// once per perturbed evaluation.
pub fn grad_check<F>(inputs: &[Tensor<f64>], epsilon: f64, build: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(TensorError::BadEpsilon { eps: epsilon });
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().requires_grad(true)))
        .collect();
    let out = build(&mut tape, &ids)?;
    let weights = Tensor::randn(tape.shape(out), WEIGHT_SEED, 1.0)?;
    let loss = scalarize(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    if !tape.all_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf requires grad").to_vec())
        .collect();

    // Numeric evaluation of the same scalarized loss.
    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let loss = scalarize(&mut tape, out, &weights)?;
        let v = tape.value(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let orig = work[k].data[j];
            work[k].data[j] = orig + epsilon;
            let plus = eval(&work)?;
            work[k].data[j] = orig - epsilon;
            let minus = eval(&work)?;
            work[k].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[k][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn scalarize(
    tape: &mut Tape<f64>,
    out: TensorId,
    weights: &Tensor<f64>,
) -> Result<TensorId, TensorError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub op: String,
    pub worst: f64,
    pub threshold: f64,
}

impl GradCheckResult {
    pub fn pass(&self) -> bool {
        self.worst < self.threshold
    }
}

fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    Tensor::randn(shape, seed, scale).expect("valid shape")
}

/// Values pushed away from zero so leaky-relu kinks sit outside the
/// finite-difference window.
fn randn_off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = randn(shape, seed, 1.0);
    for v in t.data.iter_mut() {
        *v = if *v >= 0.0 { *v + 0.5 } else { *v - 0.5 };
    }
    t
}

fn binary_target(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = randn(shape, seed, 1.0);
    for v in t.data.iter_mut() {
        *v = if *v > 0.2 { 1.0 } else { 0.0 };
    }
    t
}

const EPS: f64 = 1e-5;
const OP_THRESHOLD: f64 = 1e-4;
const MODEL_THRESHOLD: f64 = 1e-4;

/// Runs the whole verification suite: every differentiable layer op on at
/// least five random shapes each, plus a tiny two-level network end to
/// end. Returns one result per op family with its worst observed error.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckResult>, TensorError> {
    let mut results = Vec::new();
    let mut push = |op: &str, worst: f64, threshold: f64| {
        results.push(GradCheckResult {
            op: op.to_string(),
            worst,
            threshold,
        });
    };

    let shapes5: [[usize; 2]; 5] = [[2, 3], [4, 4], [1, 7], [3, 5], [6, 2]];

    // Elementwise and reductions.
    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn(s, seed + i as u64, 1.0);
        let b = randn(s, seed + 100 + i as u64, 1.0);
        worst = worst.max(grad_check(&[a, b], EPS, |t, ids| t.add(ids[0], ids[1]))?);
    }
    push("add", worst, OP_THRESHOLD);

    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn(s, seed + 10 + i as u64, 1.0);
        let b = randn(s, seed + 110 + i as u64, 1.0);
        worst = worst.max(grad_check(&[a, b], EPS, |t, ids| t.mul(ids[0], ids[1]))?);
    }
    push("mul", worst, OP_THRESHOLD);

    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn(s, seed + 20 + i as u64, 1.0);
        worst = worst.max(grad_check(&[a], EPS, |t, ids| Ok(t.scale(ids[0], 2.0)))?);
    }
    push("scale", worst, OP_THRESHOLD);

    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn(s, seed + 30 + i as u64, 1.0);
        worst = worst.max(grad_check(&[a.clone()], EPS, |t, ids| t.sum(ids[0]))?);
        worst = worst.max(grad_check(&[a], EPS, |t, ids| t.mean(ids[0]))?);
    }
    push("sum_mean", worst, OP_THRESHOLD);

    // Activations.
    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn_off_kink(s, seed + 40 + i as u64);
        worst = worst.max(grad_check(&[a], EPS, |t, ids| t.leaky_relu(ids[0], 0.3))?);
    }
    push("leaky_relu", worst, OP_THRESHOLD);

    let mut worst = 0.0f64;
    for (i, s) in shapes5.iter().enumerate() {
        let a = randn(s, seed + 50 + i as u64, 1.5);
        worst = worst.max(grad_check(&[a], EPS, |t, ids| Ok(t.sigmoid(ids[0])))?);
    }
    push("sigmoid", worst, OP_THRESHOLD);

    // Convolutions: (input shape, weight shape, stride, padding).
    type ConvCase = ([usize; 5], [usize; 5], usize, Padding);
    let conv_cases: [ConvCase; 5] = [
        ([1, 1, 4, 4, 4], [1, 1, 3, 3, 3], 1, Padding::Same),
        ([1, 2, 4, 4, 4], [3, 2, 3, 3, 3], 1, Padding::Same),
        ([2, 1, 5, 5, 5], [2, 1, 3, 3, 3], 1, Padding::Valid),
        ([1, 2, 4, 4, 4], [2, 2, 1, 1, 1], 1, Padding::Same),
        ([1, 1, 6, 6, 6], [2, 1, 3, 3, 3], 2, Padding::Valid),
    ];
    let mut worst = 0.0f64;
    for (i, (xs, ws, stride, padding)) in conv_cases.into_iter().enumerate() {
        let x = randn(&xs, seed + 60 + i as u64, 1.0);
        let w = randn(&ws, seed + 160 + i as u64, 0.5);
        let b = randn(&[ws[0]], seed + 260 + i as u64, 0.5);
        worst = worst.max(grad_check(&[x, w, b], EPS, |t, ids| {
            t.conv3d(ids[0], ids[1], ids[2], stride, padding)
        })?);
    }
    push("conv3d", worst, OP_THRESHOLD);

    let convt_cases: [([usize; 5], [usize; 5]); 5] = [
        ([1, 1, 2, 2, 2], [1, 1, 2, 2, 2]),
        ([1, 2, 2, 3, 2], [2, 2, 2, 2, 2]),
        ([1, 3, 3, 2, 2], [1, 3, 2, 2, 2]),
        ([2, 1, 2, 2, 2], [2, 1, 2, 2, 2]),
        ([1, 1, 1, 1, 1], [3, 1, 2, 2, 2]),
    ];
    let mut worst = 0.0f64;
    for (i, (xs, ws)) in convt_cases.into_iter().enumerate() {
        let x = randn(&xs, seed + 70 + i as u64, 1.0);
        let w = randn(&ws, seed + 170 + i as u64, 0.5);
        let b = randn(&[ws[0]], seed + 270 + i as u64, 0.5);
        worst = worst.max(grad_check(&[x, w, b], EPS, |t, ids| {
            t.conv_transpose3d(ids[0], ids[1], ids[2], 2)
        })?);
    }
    push("conv_transpose3d", worst, OP_THRESHOLD);

    // Max pooling away from ties: normals scaled up so block-mates are
    // separated well beyond the difference window.
    let pool_shapes: [[usize; 5]; 5] = [
        [1, 1, 2, 2, 2],
        [1, 2, 4, 4, 4],
        [1, 1, 4, 2, 6],
        [2, 1, 2, 4, 2],
        [1, 3, 2, 2, 4],
    ];
    let mut worst = 0.0f64;
    for (i, s) in pool_shapes.iter().enumerate() {
        let x = randn(s, seed + 80 + i as u64, 3.0);
        worst = worst.max(grad_check(&[x], EPS, |t, ids| t.maxpool3d(ids[0]))?);
    }
    push("maxpool3d", worst, OP_THRESHOLD);

    // Batch norm, both statistic paths.
    let bn_shapes: [[usize; 5]; 5] = [
        [1, 2, 4, 4, 4],
        [1, 1, 2, 2, 2],
        [2, 2, 2, 2, 2],
        [1, 3, 2, 4, 2],
        [1, 2, 2, 2, 6],
    ];
    let mut worst_train = 0.0f64;
    let mut worst_infer = 0.0f64;
    for (i, s) in bn_shapes.iter().enumerate() {
        let ch = s[1];
        let x = randn(s, seed + 90 + i as u64, 1.0);
        let gamma = randn(&[ch], seed + 190 + i as u64, 1.0);
        let beta = randn(&[ch], seed + 290 + i as u64, 1.0);
        worst_train = worst_train.max(grad_check(
            &[x.clone(), gamma.clone(), beta.clone()],
            EPS,
            |t, ids| {
                let (mean, var) = t.channel_stats(ids[0]);
                t.batchnorm3d(ids[0], ids[1], ids[2], &mean, &var, 1e-5, true)
            },
        )?);
        let mut running_mean = randn(&[ch], seed + 390 + i as u64, 0.5).data;
        let mut running_var = randn(&[ch], seed + 490 + i as u64, 0.5).data;
        for v in running_var.iter_mut() {
            *v = v.abs() + 0.5;
        }
        for v in running_mean.iter_mut() {
            *v *= 0.5;
        }
        let (rm, rv) = (running_mean, running_var);
        worst_infer = worst_infer.max(grad_check(&[x, gamma, beta], EPS, |t, ids| {
            t.batchnorm3d(ids[0], ids[1], ids[2], &rm, &rv, 1e-5, false)
        })?);
    }
    push("batchnorm3d_train", worst_train, OP_THRESHOLD);
    push("batchnorm3d_infer", worst_infer, OP_THRESHOLD);

    // Concatenation.
    let mut worst = 0.0f64;
    for i in 0..5u64 {
        let ca = 1 + (i as usize) % 3;
        let cb = 1 + (i as usize + 1) % 3;
        let a = randn(&[1, ca, 2, 2, 2], seed + 95 + i, 1.0);
        let b = randn(&[1, cb, 2, 2, 2], seed + 195 + i, 1.0);
        worst = worst.max(grad_check(&[a, b], EPS, |t, ids| {
            t.concat_channels(ids[0], ids[1])
        })?);
    }
    push("concat_channels", worst, OP_THRESHOLD);

    // Losses.
    let loss_shapes: [[usize; 5]; 5] = [
        [1, 1, 2, 2, 2],
        [1, 1, 4, 2, 2],
        [1, 1, 2, 4, 4],
        [1, 1, 4, 4, 4],
        [1, 1, 2, 2, 6],
    ];
    let mut worst_bce = 0.0f64;
    let mut worst_dice = 0.0f64;
    for (i, s) in loss_shapes.iter().enumerate() {
        let logits = randn(s, seed + 97 + i as u64, 2.0);
        let target = binary_target(s, seed + 197 + i as u64);
        let t2 = target.clone();
        worst_bce = worst_bce.max(grad_check(&[logits.clone()], EPS, move |t, ids| {
            let tgt = t.constant(t2.clone());
            t.bce_with_logits_loss(ids[0], tgt)
        })?);
        worst_dice = worst_dice.max(grad_check(&[logits], EPS, move |t, ids| {
            let tgt = t.constant(target.clone());
            t.soft_dice_loss(ids[0], tgt)
        })?);
    }
    push("bce_with_logits", worst_bce, OP_THRESHOLD);
    push("soft_dice", worst_dice, OP_THRESHOLD);

    // Whole tiny network.
    let worst = model_grad_check(seed)?;
    push("unet_2level", worst, MODEL_THRESHOLD);

    Ok(results)
}

/// Gradient check through a full two-level model (channels [2, 4], input
/// 1×1×4×4×4): BCE loss differentiated against every parameter and the
/// input.
pub fn model_grad_check(seed: u64) -> Result<f64, TensorError> {
    let cfg = UNetConfig::from_schedule(vec![2, 4]);
    let model = build_unet::<f64>(&cfg, seed).map_err(|e| TensorError::InvalidShape {
        op: "model_grad_check",
        detail: e.to_string(),
    })?;
    let x = randn(&[1, 1, 4, 4, 4], seed + 7, 1.0);
    let target = binary_target(&[1, 1, 4, 4, 4], seed + 13);

    let eval = |m: &crate::unet::Model<f64>, x: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let ti = tape.constant(target.clone());
        let (logits, _) = m.forward_train(&mut tape, xi)?;
        let loss = tape.bce_with_logits_loss(logits, ti)?;
        Ok(tape.value(loss))
    };

    // Analytic gradients for every parameter and the input.
    let mut m = model.clone();
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone().requires_grad(true));
    let ti = tape.constant(target.clone());
    let (logits, bindings) = m.forward_train(&mut tape, xi)?;
    let loss = tape.bce_with_logits_loss(logits, ti)?;
    tape.backward(loss)?;
    if !tape.all_finite() {
        return Err(TensorError::NonFinite {
            op: "model_grad_check",
        });
    }
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    for (path, id) in &bindings {
        analytic.insert(path.clone(), tape.grad(*id).expect("tracked").to_vec());
    }
    let x_grad = tape.grad(xi).expect("tracked").to_vec();

    let mut worst = 0.0f64;
    let paths: Vec<String> = analytic.keys().cloned().collect();
    for path in paths {
        let n = analytic[&path].len();
        for j in 0..n {
            let mut plus = model.clone();
            let mut minus = model.clone();
            perturb(&mut plus, &path, j, EPS);
            perturb(&mut minus, &path, j, -EPS);
            let numeric = (eval(&plus, &x)? - eval(&minus, &x)?) / (2.0 * EPS);
            let a = analytic[&path][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    let mut xp = x.clone();
    for j in 0..xp.data.len() {
        let orig = xp.data[j];
        xp.data[j] = orig + EPS;
        let plus = eval(&model, &xp)?;
        xp.data[j] = orig - EPS;
        let minus = eval(&model, &xp)?;
        xp.data[j] = orig;
        let numeric = (plus - minus) / (2.0 * EPS);
        let err = (x_grad[j] - numeric).abs() / x_grad[j].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn perturb(model: &mut crate::unet::Model<f64>, path: &str, index: usize, delta: f64) {
    for (p, t) in model.trainable_entries_mut() {
        if p == path {
            t.data[index] += delta;
            return;
        }
    }
    panic!("unknown parameter path {path}");
}

/// Deterministic per-suite seed stream, so repeated CLI runs agree.
pub fn suite_seed(base: u64) -> u64 {
    SplitMix64::new(base).next_u64()
}
