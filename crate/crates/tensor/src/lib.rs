//! Minimal dense-tensor and reverse-mode differentiation substrate.
//!
//! Values are row-major `f64` buffers. A [`Tape`] records every op with its
//! inputs and a local gradient rule; [`Tape::backward`] sweeps the record in
//! reverse. There is no implicit broadcasting: bias addition, scalar affine
//! maps and segment reductions are explicit ops.

mod tape;
mod tensor;

pub use tape::{shifted_softplus, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_softplus_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.shifted_softplus(x);
        assert_eq!(tape.value(y).item(), 0.0);
        // matches the defining formula away from zero
        for v in [-30.0, -1.5, 0.3, 2.0, 40.0] {
            let direct: f64 = (0.5 * f64::exp(v) + 0.5).ln();
            assert!((shifted_softplus(v) - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn segment_sum_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.segment_sum(x, vec![0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 3.0]);
    }

    #[test]
    fn segment_mean_of_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.segment_mean(x, vec![0, 0], 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let l = tape.sum(s);
        let g = tape.grad(l, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.5; 4]);
    }

    #[test]
    fn segment_id_out_of_range_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.segment_sum(x, vec![0, 2], 2),
            Err(TensorError::Index(_))
        ));
    }

    #[test]
    fn leaky_relu_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-2.0));
        let y = tape.leaky_relu(x, 0.25);
        assert_eq!(tape.value(y).item(), -0.5);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.grad(loss, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let loss = tape.sum(x);
        let g = tape.grad(loss, &[x, unused]).unwrap();
        assert_eq!(g[1], Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.grad(x, &[x]).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2, 3]));
        let b = tape.param(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape(_))));
        let c = tape.param(Tensor::zeros(vec![3]));
        assert!(matches!(tape.add(a, c), Err(TensorError::Shape(_))));
    }

    #[test]
    fn layer_norm_of_zero_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4]));
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.5]).unwrap());
        let w = tape.param(Tensor::matrix(3, 2, vec![0.3, 0.2, -0.1, 0.8, 0.5, -0.6]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let a = tape.shifted_softplus(h);
        let l = tape.mean(a);
        let g1 = tape.grad(l, &[x, w]).unwrap();
        let g2 = tape.grad(l, &[x, w]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }
}
