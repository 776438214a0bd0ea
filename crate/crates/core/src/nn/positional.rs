use crate::tensor::{Scalar, Tensor};

/// Interleaved sine/cosine positional encodings: column 2i holds
/// `sin(pos / 10000^(2i/d))`, column 2i+1 the matching cosine. Position 0 is
/// `[0, 1, 0, 1, ...]`; all values lie in [-1, 1].
pub fn sinusoidal_positions<F: Scalar>(t: usize, d_model: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * d_model);
    for pos in 0..t {
        for col in 0..d_model {
            let pair = (col / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let v = if col % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64c(v));
        }
    }
    Tensor::new(vec![t, d_model], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = sinusoidal_positions::<f64>(3, 8);
        for col in 0..8 {
            let expect = if col % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.data()[col], expect);
        }
    }

    #[test]
    fn values_bounded_by_one() {
        let pe = sinusoidal_positions::<f64>(50, 12);
        for &v in pe.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn distinct_positions_up_to_ten_thousand() {
        // exhaustive distinctness via exact bit patterns of each row
        let d = 64;
        let pe = sinusoidal_positions::<f32>(10_000, d);
        let mut seen = std::collections::HashSet::with_capacity(10_000);
        for pos in 0..10_000 {
            let bits: Vec<u32> = pe.row(pos).iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "position {pos} collides with an earlier one");
        }
    }
}
