//! Central finite-difference gradient verification.
//!
//! The numerical side only ever calls the forward pass, so it stays
//! independent of the backward implementation it is checking. Checks run in
//! f64, where `h = 1e-5` central differences resolve gradients to well below
//! the 1e-4 relative-error budget.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Builds the forward graph over the given differentiable inputs and returns
/// the scalar loss node.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Central-difference gradient of the loss w.r.t. every input element.
pub fn numerical_grad(build: BuildFn, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for target in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[target].shape().to_vec());
        for j in 0..inputs[target].numel() {
            let mut plus = inputs.to_vec();
            plus[target].data_mut()[j] += h;
            let f_plus = eval_loss(build, &plus)?;

            let mut minus = inputs.to_vec();
            minus[target].data_mut()[j] -= h;
            let f_minus = eval_loss(build, &minus)?;

            grad.data_mut()[j] = (f_plus - f_minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

fn eval_loss(build: BuildFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// `|a - n| / max(|a|, |n|, 1)`: relative for large gradients, absolute for
/// small ones.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Runs backward once, compares against central differences and returns the
/// worst relative error over all input elements.
pub fn check_gradients(build: BuildFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let numeric = numerical_grad(build, inputs, h)?;
    let mut worst = 0.0f64;
    for (var, num) in vars.iter().zip(&numeric) {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; num.numel()]);
        for (&a, &n) in analytic.iter().zip(num.data()) {
            worst = worst.max(rel_err(a, n));
        }
    }
    Ok(worst)
}

/// Worst relative error seen per operation across a sweep.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub per_op: Vec<(String, f64)>,
}

impl SweepReport {
    pub fn worst(&self) -> f64 {
        self.per_op.iter().fold(0.0, |acc, (_, e)| acc.max(*e))
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&(String, f64)> {
        self.per_op.iter().filter(|(_, e)| *e > tolerance).collect()
    }
}

/// Checks every differentiable op against central finite differences at
/// `n_combos` random shape/seed combinations and reports the worst relative
/// error per op. The fixed downstream weighting makes every gradient
/// informative (a bare sum of a softmax row is constant, for example).
pub fn op_gradient_sweep(n_combos: u64, h: f64) -> Result<SweepReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut worst: std::collections::BTreeMap<&'static str, f64> = std::collections::BTreeMap::new();
    for combo in 0..n_combos {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::derive(0x67c4ad, "op-sweep", combo));
        let t = rng.gen_range(2..=5usize);
        let d = rng.gen_range(2..=6usize);
        let k = rng.gen_range(2..=5usize);

        // values bounded away from zero so relu/max kinks stay off the
        // finite-difference path
        let sample = |shape: Vec<usize>, rng: &mut ChaCha8Rng| -> Tensor<f64> {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|_| {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.1..1.5)
                })
                .collect();
            Tensor::new(shape, data).expect("shape matches")
        };

        let weight_td = sample(vec![t, d], &mut rng);
        let weight_tt = sample(vec![t, t], &mut rng);
        let weight_d = sample(vec![d], &mut rng);

        let mut check = |name: &'static str,
                         inputs: &[Tensor<f64>],
                         build: BuildFn|
         -> Result<()> {
            let err = check_gradients(build, inputs, h)?;
            let entry = worst.entry(name).or_insert(0.0);
            *entry = entry.max(err);
            Ok(())
        };

        let a = sample(vec![t, d], &mut rng);
        let b = sample(vec![t, d], &mut rng);
        let w = weight_td.clone();
        check("add", &[a.clone(), b.clone()], &move |tape, vars| {
            let sum = tape.add(vars[0], vars[1])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(sum, cw)?;
            tape.sum_all(weighted)
        })?;

        let row = sample(vec![d], &mut rng);
        let w = weight_td.clone();
        check("add_row", &[a.clone(), row], &move |tape, vars| {
            let sum = tape.add_row(vars[0], vars[1])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(sum, cw)?;
            tape.sum_all(weighted)
        })?;

        let w = weight_td.clone();
        check("mul", &[a.clone(), b.clone()], &move |tape, vars| {
            let prod = tape.mul(vars[0], vars[1])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(prod, cw)?;
            tape.sum_all(weighted)
        })?;

        check("scale", &[a.clone()], &|tape, vars| {
            let scaled = tape.scale(vars[0], -1.7)?;
            tape.sum_all(scaled)
        })?;

        let m1 = sample(vec![t, k], &mut rng);
        let m2 = sample(vec![k, d], &mut rng);
        let w = weight_td.clone();
        check("matmul", &[m1.clone(), m2], &move |tape, vars| {
            let prod = tape.matmul(vars[0], vars[1])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(prod, cw)?;
            tape.sum_all(weighted)
        })?;

        let m3 = sample(vec![d, k], &mut rng);
        let w = weight_td.clone();
        check("matmul_nt", &[m1.clone(), m3], &move |tape, vars| {
            let prod = tape.matmul_nt(vars[0], vars[1])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(prod, cw)?;
            tape.sum_all(weighted)
        })?;

        let w = weight_td.clone();
        check("relu", &[a.clone()], &move |tape, vars| {
            let y = tape.relu(vars[0])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let scores = sample(vec![t, t], &mut rng);
        let w = weight_tt.clone();
        check("softmax_rows", &[scores.clone()], &move |tape, vars| {
            let y = tape.softmax_rows(vars[0], None)?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let w = weight_tt.clone();
        let tq = t;
        check("softmax_rows_masked", &[scores], &move |tape, vars| {
            let mask = crate::tensor::RowMask::causal(tq);
            let y = tape.softmax_rows(vars[0], Some(&mask))?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let gain = sample(vec![d], &mut rng);
        let bias = sample(vec![d], &mut rng);
        let w = weight_td.clone();
        check("layer_norm", &[a.clone(), gain, bias], &move |tape, vars| {
            let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let c_in = rng.gen_range(1..=2usize);
        let c_out = rng.gen_range(1..=2usize);
        let h_img = rng.gen_range(3..=6usize);
        let w_img = rng.gen_range(3..=6usize);
        let img = sample(vec![c_in, h_img, w_img], &mut rng);
        let kernels = sample(vec![c_out, c_in, 3, 3], &mut rng);
        let conv_bias = sample(vec![c_out], &mut rng);
        check("conv2d", &[img, kernels, conv_bias], &|tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], vars[2])?;
            tape.sum_all(y)
        })?;

        let vocab = rng.gen_range(4..=9usize);
        let table = sample(vec![vocab, d], &mut rng);
        let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let ids2 = ids.clone();
        let w = weight_td.clone();
        check("embedding", &[table.clone()], &move |tape, vars| {
            let y = tape.embedding(vars[0], &ids2)?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        check("reshape", &[a.clone()], &|tape, vars| {
            let numel = tape.value(vars[0]).numel();
            let y = tape.reshape(vars[0], vec![numel])?;
            tape.mean_all(y)
        })?;

        let w = weight_td.clone();
        check("transpose", &[a.clone()], &move |tape, vars| {
            let y = tape.transpose(vars[0])?;
            let back = tape.transpose(y)?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(back, cw)?;
            tape.sum_all(weighted)
        })?;

        let start = rng.gen_range(0..d - 1);
        let len = rng.gen_range(1..=d - start);
        check("slice_cols", &[a.clone()], &move |tape, vars| {
            let y = tape.slice_cols(vars[0], start, len)?;
            tape.sum_all(y)
        })?;

        let part2 = sample(vec![t, k.saturating_sub(1).max(1)], &mut rng);
        let w_wide = sample(vec![t, d + part2.shape()[1]], &mut rng);
        check("concat_cols", &[a.clone(), part2], &move |tape, vars| {
            let y = tape.concat_cols(&[vars[0], vars[1]])?;
            let cw = tape.constant(w_wide.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let part_rows = sample(vec![k, d], &mut rng);
        let w_tall = sample(vec![t + k, d], &mut rng);
        check("concat_rows", &[a.clone(), part_rows], &move |tape, vars| {
            let y = tape.concat_rows(&[vars[0], vars[1]])?;
            let cw = tape.constant(w_tall.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let w = weight_d.clone();
        check("mean_rows", &[a.clone()], &move |tape, vars| {
            let y = tape.mean_rows(vars[0])?;
            let cw = tape.constant(w.clone());
            let weighted = tape.mul(y, cw)?;
            tape.sum_all(weighted)
        })?;

        let logits = sample(vec![t, vocab], &mut rng);
        let targets: Vec<u32> = (0..t).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let targets2 = targets.clone();
        check("cross_entropy", &[logits.clone()], &move |tape, vars| {
            tape.cross_entropy_from_logits(vars[0], &targets2)
        })?;

        let targets3 = targets.clone();
        check("cross_entropy_smoothed", &[logits], &move |tape, vars| {
            tape.cross_entropy_smoothed(vars[0], &targets3, 0.1)
        })?;

        let mask: Vec<f64> = (0..t * d)
            .map(|_| if rng.gen::<f64>() < 0.8 { 1.25 } else { 0.0 })
            .collect();
        check("dropout", &[a.clone()], &move |tape, vars| {
            let y = tape.dropout(vars[0], mask.clone())?;
            tape.sum_all(y)
        })?;

        let cube = sample(vec![c_in, t, d], &mut rng);
        check("flatten_channels", &[cube], &|tape, vars| {
            let y = tape.flatten_channels(vars[0])?;
            tape.mean_all(y)
        })?;
    }
    Ok(SweepReport {
        per_op: worst.into_iter().map(|(name, err)| (name.to_string(), err)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // gradient of sum(a*b) for a random-ish 4x4 pair
        let a = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| ((i * 7 + 3) % 11) as f64 * 0.31 - 1.5).collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![4, 4],
            (0..16).map(|i| ((i * 5 + 1) % 13) as f64 * 0.21 - 1.2).collect(),
        )
        .unwrap();
        let worst = check_gradients(
            &|tape, vars| {
                let prod = tape.matmul(vars[0], vars[1])?;
                tape.sum_all(prod)
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(worst <= DEFAULT_TOLERANCE, "max rel err {worst}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -0.5, 0.25, 2.5]).unwrap();
        let gain = Tensor::new(vec![3], vec![1.2, 0.8, 1.0]).unwrap();
        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap();
        let worst = check_gradients(
            &|tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                tape.sum_all(y)
            },
            &[x, gain, bias],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(worst <= DEFAULT_TOLERANCE, "max rel err {worst}");
    }
}
