//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Every operation `grad_check_op` knows how to exercise.
pub const CATALOG: &[&str] = &[
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "mul_broadcast",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "tanh",
    "abs",
    "matmul",
    "batch_matmul",
    "softmax",
    "layer_norm",
    "conv2d",
    "conv_transpose2d",
    "concat",
    "slice",
    "reshape",
    "transpose",
    "permute",
    "sum",
    "mean",
    "sum_axis",
    "max",
    "mask_mul",
    "gather",
];

/// Compares the analytic gradient of `build` with fourth-order central differences.
///
/// The (possibly non-scalar) output `y` is reduced to `sum(w * y)` with fixed
/// pseudo-random weights `w`, so every output element contributes. Returns the
/// largest elementwise `|a - n| / max(|a|, |n|, 1e-8)` over all inputs.
pub fn grad_check<F>(build: F, inputs: &[(String, Tensor<f64>)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {eps}")));
    }
    let eval = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|((name, _), t)| tape.input(name, t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = build(&mut tape, &vars)?;
        Ok((tape, y))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (tape, y) = eval(&base)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = Tensor::from_fn(tape.shape(y), |_| rng.random_range(0.5..1.5));
    let grads = tape.backward(y, Some(w.clone()))?;
    let reduce = |vals: &[Tensor<f64>]| -> Result<f64> {
        let (t, y) = eval(vals)?;
        Ok(t.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get(name).expect("every input has a gradient");
        for i in 0..t.numel() {
            let mut vals = base.clone();
            let mut at = |h: f64| -> Result<f64> {
                vals[k].data_mut()[i] = t.data()[i] + h;
                reduce(&vals)
            };
            let (f2, f1, m1, m2) = (at(2.0 * eps)?, at(eps)?, at(-eps)?, at(-2.0 * eps)?);
            let numeric = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Random inputs for a catalog operation, kept away from kinks and domain edges.
pub fn sample_inputs(op: &str, seed: u64) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let v = match op {
        "add" | "sub" | "mul" => named(vec![("a", uniform(r, &[3, 4], -1.0, 1.0)), ("b", uniform(r, &[3, 4], -1.0, 1.0))]),
        "add_broadcast" | "mul_broadcast" => named(vec![("a", uniform(r, &[2, 3, 4], -1.0, 1.0)), ("b", uniform(r, &[4], -1.0, 1.0))]),
        "scale" | "add_scalar" | "exp" | "sigmoid" | "softplus" | "tanh" | "sum" | "mean" | "reshape" | "transpose" => {
            named(vec![("x", uniform(r, &[3, 5], -2.0, 2.0))])
        }
        "log" => named(vec![("x", uniform(r, &[3, 5], 0.3, 3.0))]),
        "abs" => {
            let x = Tensor::from_fn(&[3, 5], |_| {
                let m = r.random_range(0.1..1.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            });
            named(vec![("x", x)])
        }
        "matmul" => named(vec![("a", uniform(r, &[4, 5], -1.0, 1.0)), ("b", uniform(r, &[5, 3], -1.0, 1.0))]),
        "batch_matmul" => named(vec![("a", uniform(r, &[2, 3, 4], -1.0, 1.0)), ("b", uniform(r, &[2, 4, 5], -1.0, 1.0))]),
        "softmax" => named(vec![("x", uniform(r, &[2, 8], -2.0, 2.0))]),
        "layer_norm" => named(vec![
            ("x", uniform(r, &[3, 6], -2.0, 2.0)),
            ("gamma", uniform(r, &[6], 0.5, 1.5)),
            ("beta", uniform(r, &[6], -0.5, 0.5)),
        ]),
        "conv2d" => named(vec![
            ("x", uniform(r, &[2, 2, 6, 5], -1.0, 1.0)),
            ("w", uniform(r, &[3, 2, 3, 3], -1.0, 1.0)),
            ("b", uniform(r, &[3], -1.0, 1.0)),
        ]),
        "conv_transpose2d" => named(vec![
            ("x", uniform(r, &[2, 3, 3, 4], -1.0, 1.0)),
            ("w", uniform(r, &[3, 2, 2, 2], -1.0, 1.0)),
            ("b", uniform(r, &[2], -1.0, 1.0)),
        ]),
        "concat" => named(vec![("a", uniform(r, &[2, 3, 2], -1.0, 1.0)), ("b", uniform(r, &[2, 1, 2], -1.0, 1.0))]),
        "slice" | "permute" | "sum_axis" | "gather" | "mask_mul" => named(vec![("x", uniform(r, &[2, 5, 3], -1.0, 1.0))]),
        "max" => {
            let mut x = uniform(r, &[4, 4], -1.0, 1.0);
            let i = r.random_range(0..16);
            x.data_mut()[i] = 2.0;
            named(vec![("x", x)])
        }
        _ => return Err(Error::Invalid(format!("unknown catalog operation '{op}'"))),
    };
    Ok(v)
}

fn build_op(op: &str, t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
    match op {
        "add" | "add_broadcast" => t.add(v[0], v[1]),
        "sub" => t.sub(v[0], v[1]),
        "mul" | "mul_broadcast" => t.mul(v[0], v[1]),
        "scale" => t.scale(v[0], -1.7),
        "add_scalar" => t.add_scalar(v[0], 0.3),
        "exp" => t.exp(v[0]),
        "log" => t.log(v[0]),
        "sigmoid" => t.sigmoid(v[0]),
        "softplus" => t.softplus(v[0]),
        "tanh" => t.tanh(v[0]),
        "abs" => t.abs(v[0]),
        "matmul" => t.matmul(v[0], v[1]),
        "batch_matmul" => t.batch_matmul(v[0], v[1]),
        "softmax" => t.softmax(v[0]),
        "layer_norm" => t.layer_norm(v[0], v[1], v[2], 1e-5),
        "conv2d" => t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        "conv_transpose2d" => t.conv_transpose2d(v[0], v[1], Some(v[2]), 2),
        "concat" => t.concat(&[v[0], v[1]], 1),
        "slice" => t.slice(v[0], 1, 1, 3),
        "reshape" => t.reshape(v[0], &[5, 3]),
        "transpose" => t.transpose(v[0]),
        "permute" => t.permute(v[0], &[1, 2, 0]),
        "sum" => t.sum(v[0]),
        "mean" => t.mean(v[0]),
        "sum_axis" => t.sum_axis(v[0], 1),
        "max" => t.max(v[0]),
        "mask_mul" => {
            let mask = Tensor::from_fn(&[5, 3], |i| if i % 3 == 1 { 0.0 } else { 1.0 });
            t.mask_mul(v[0], &mask)
        }
        "gather" => t.gather(v[0], 1, &[4, 0, 4, 2]),
        _ => Err(Error::Invalid(format!("unknown catalog operation '{op}'"))),
    }
}

/// `grad_check` applied to a named catalog operation.
pub fn grad_check_op(op: &str, inputs: &[(String, Tensor<f64>)], eps: f64) -> Result<f64> {
    if !CATALOG.contains(&op) {
        return Err(Error::Invalid(format!("unknown catalog operation '{op}'")));
    }
    grad_check(|t, v| build_op(op, t, v), inputs, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_softmax_examples() {
        let e = grad_check_op("matmul", &sample_inputs("matmul", 1).unwrap(), 1e-4).unwrap();
        assert!(e < 1e-5, "matmul {e}");
        let x = named(vec![("x", uniform(&mut ChaCha8Rng::seed_from_u64(2), &[8], -2.0, 2.0))]);
        let e = grad_check_op("softmax", &x, 1e-4).unwrap();
        assert!(e < 1e-5, "softmax {e}");
    }

    struct WrongSquare;

    impl crate::autodiff::CustomOp<f64> for WrongSquare {
        fn name(&self) -> &str {
            "wrong_square"
        }

        fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, g: &Tensor<f64>) -> Result<Vec<Option<Tensor<f64>>>> {
            // d/dx x^2 is 2x; report 3x instead.
            let d = inputs[0].data().iter().zip(g.data()).map(|(x, g)| 3.0 * x * g).collect();
            Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), d)?)])
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let inputs = sample_inputs("exp", 3).unwrap();
        let good = grad_check(|t, v| t.exp(v[0]), &inputs, 1e-4).unwrap();
        assert!(good < 1e-6);
        let bad = grad_check(
            |t, v| {
                let y = t.value(v[0]).map(|x| x * x);
                t.custom(&[v[0]], y, Box::new(WrongSquare))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(bad > 0.3, "{bad}");
    }

    #[test]
    fn rejects_unknown_op_and_bad_epsilon() {
        assert!(grad_check_op("nope", &[], 1e-4).is_err());
        assert!(grad_check_op("exp", &sample_inputs("exp", 0).unwrap(), 0.0).is_err());
    }
}
