use serde::{Deserialize, Serialize};

use super::Binding;
use crate::error::{Error, Result};
use crate::tensor::{RowMask, Scalar, Tape, Tensor, Var};

/// Additive pre-softmax attention bias. `LogDistance` penalizes long-range
/// positions with `-ln(1 + |i - j|)`; it applies to speech self-attention
/// only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionBiasKind {
    None,
    LogDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBias {
    pub kind: AttentionBiasKind,
}

impl AttentionBias {
    pub fn none() -> Self {
        AttentionBias { kind: AttentionBiasKind::None }
    }

    pub fn log_distance() -> Self {
        AttentionBias { kind: AttentionBiasKind::LogDistance }
    }

    /// Bias value at (i, j): 0 on the diagonal, symmetric, non-increasing in
    /// |i - j|.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            AttentionBiasKind::None => 0.0,
            AttentionBiasKind::LogDistance => {
                let dist = i.abs_diff(j) as f64;
                -(1.0 + dist).ln()
            }
        }
    }

    pub fn matrix<F: Scalar>(&self, t_q: usize, t_k: usize) -> Option<Tensor<F>> {
        if self.kind == AttentionBiasKind::None {
            return None;
        }
        let mut data = Vec::with_capacity(t_q * t_k);
        for i in 0..t_q {
            for j in 0..t_k {
                data.push(F::from_f64c(self.at(i, j)));
            }
        }
        Some(Tensor::new(vec![t_q, t_k], data).expect("bias shape matches data"))
    }
}

/// The eight projection parameters of one attention block.
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn from_binding(binding: &Binding, prefix: &str) -> Result<Self> {
        Ok(AttentionVars {
            wq: binding.var(&format!("{prefix}.wq"))?,
            bq: binding.var(&format!("{prefix}.bq"))?,
            wk: binding.var(&format!("{prefix}.wk"))?,
            bk: binding.var(&format!("{prefix}.bk"))?,
            wv: binding.var(&format!("{prefix}.wv"))?,
            bv: binding.var(&format!("{prefix}.bv"))?,
            wo: binding.var(&format!("{prefix}.wo"))?,
            bo: binding.var(&format!("{prefix}.bo"))?,
        })
    }
}

/// Scaled dot-product attention over `n_heads` heads, concatenated and
/// projected. `bias`, when present, is added to the pre-softmax scores of
/// every head; masked positions receive zero attention weight.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    vars: &AttentionVars,
    n_heads: usize,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<&RowMask>,
    bias: Option<Var>,
) -> Result<Var> {
    let d_model = tape.value(q_in).shape()[1];
    if d_model % n_heads != 0 {
        return Err(Error::dim(format!(
            "d_model {d_model} not divisible by {n_heads} heads"
        )));
    }
    let d_head = d_model / n_heads;
    let scale = F::from_f64c(1.0 / (d_head as f64).sqrt());

    let q = tape.matmul(q_in, vars.wq)?;
    let q = tape.add_row(q, vars.bq)?;
    let k = tape.matmul(k_in, vars.wk)?;
    let k = tape.add_row(k, vars.bk)?;
    let v = tape.matmul(v_in, vars.wv)?;
    let v = tape.add_row(v, vars.bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale)?;
        if let Some(b) = bias {
            scores = tape.add(scores, b)?;
        }
        let weights = tape.softmax_rows(scores, mask)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let out = tape.matmul(concat, vars.wo)?;
    tape.add_row(out, vars.bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{attention_param_specs, bind_store, ParamStore};

    fn bias_matrix(t: usize) -> Tensor<f64> {
        AttentionBias::log_distance().matrix(t, t).unwrap()
    }

    #[test]
    fn log_distance_bias_invariants() {
        let t = 7;
        let bias = bias_matrix(t);
        for i in 0..t {
            assert_eq!(bias.data()[i * t + i], 0.0, "diagonal must be zero");
            for j in 0..t {
                let b_ij = bias.data()[i * t + j];
                let b_ji = bias.data()[j * t + i];
                assert_eq!(b_ij, b_ji, "bias must be symmetric");
            }
        }
        // monotone non-increasing in |i - j| along the first row
        for j in 1..t {
            assert!(bias.data()[j] <= bias.data()[j - 1]);
        }
    }

    #[test]
    fn single_position_attention_is_identity_weighting() {
        // T=1, no mask: attention weight is exactly 1, so the output equals
        // v projected through Wv then Wo (biases are zero at init).
        let specs = attention_param_specs("attn", 8);
        let store = ParamStore::init(&specs, 5);
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let vars = AttentionVars::from_binding(&binding, "attn").unwrap();
        let x = tape.constant(Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let out = multi_head_attention(&mut tape, &vars, 2, x, x, x, None, None).unwrap();

        let v = tape.matmul(x, vars.wv).unwrap();
        let expect = tape.matmul(v, vars.wo).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let specs = attention_param_specs("attn", 8);
        let store = ParamStore::init(&specs, 9);
        let t = 4;

        // Changing a future token must not change earlier outputs.
        let run = |last_row_val: f64| -> Vec<f64> {
            let mut tape: Tape<f64> = Tape::new();
            let binding = bind_store(&mut tape, &store, false);
            let vars = AttentionVars::from_binding(&binding, "attn").unwrap();
            let mut data = vec![0.25; t * 8];
            for j in 0..8 {
                data[(t - 1) * 8 + j] = last_row_val;
            }
            let x = tape.constant(Tensor::new(vec![t, 8], data).unwrap());
            let mask = RowMask::causal(t);
            let out = multi_head_attention(&mut tape, &vars, 2, x, x, x, Some(&mask), None).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(1.0);
        let b = run(-3.0);
        for r in 0..t - 1 {
            for j in 0..8 {
                assert_eq!(a[r * 8 + j], b[r * 8 + j], "position {r} depends on the future");
            }
        }
        assert_ne!(a[(t - 1) * 8], b[(t - 1) * 8]);
    }

    #[test]
    fn log_distance_bias_prefers_nearby_identical_keys() {
        // With identical k rows the scores differ only by the bias, so
        // attention weights strictly decrease with distance.
        let specs = attention_param_specs("attn", 8);
        let store = ParamStore::init(&specs, 2);
        let t = 6;
        let mut tape: Tape<f64> = Tape::new();
        let binding = bind_store(&mut tape, &store, false);
        let vars = AttentionVars::from_binding(&binding, "attn").unwrap();

        let q = tape.constant(Tensor::new(vec![t, 8], (0..t * 8).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap());
        let k = tape.constant(Tensor::from_rows(&vec![vec![0.5; 8]; t]).unwrap());
        let bias = AttentionBias::log_distance().matrix::<f64>(t, t).unwrap();
        let bias_var = tape.constant(bias);

        // Reproduce one head's weights directly.
        let qp = tape.matmul(q, vars.wq).unwrap();
        let kp = tape.matmul(k, vars.wk).unwrap();
        let qh = tape.slice_cols(qp, 0, 4).unwrap();
        let kh = tape.slice_cols(kp, 0, 4).unwrap();
        let scores = tape.matmul_nt(qh, kh).unwrap();
        let scores = tape.scale(scores, 0.5).unwrap();
        let scores = tape.add(scores, bias_var).unwrap();
        let weights = tape.softmax_rows(scores, None).unwrap();
        let w = tape.value(weights).data();
        for i in 0..t {
            // argmax is the query's own position
            let row = &w[i * t..(i + 1) * t];
            let max_j = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(max_j, i);
            // strictly decreasing with distance on each side
            for j in i + 1..t {
                assert!(row[j] < row[j - 1]);
            }
            for j in 0..i {
                assert!(row[j] < row[j + 1]);
            }
        }
    }
}
