//! Minimal reverse-mode differentiation engine, parameter store and AdamW.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION,
};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_in, finite_diff_check_params, relative_error, DEFAULT_EPS, REL_FLOOR,
};
pub use graph::{
    binary_cross_entropy, sigmoid, softmax_in_place, BnMode, BnRunning, Gradients, Graph, Var,
    BN_EPS, BN_MOMENTUM, PROB_CLAMP,
};
pub use params::{adamw_step, OptimizerConfig, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    PRelu,
    Sigmoid,
    Softmax,
}

impl Graph<'_> {
    pub fn activation(&mut self, x: Var, kind: Activation, slope: Option<Var>) -> Result<Var> {
        match kind {
            Activation::PRelu => {
                let slope = slope.ok_or_else(|| {
                    Error::Config("prelu needs a learnable slope parameter".into())
                })?;
                self.prelu(x, slope)
            }
            Activation::Sigmoid => Ok(self.sigmoid(x)),
            Activation::Softmax => Ok(self.softmax(x)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dense_forward_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(m(&[&[1.0, 2.0]]));
        let w = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(Tensor::vector(vec![0.5, -0.5]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.5]);

        let x = g.constant(m(&[&[0.0, 0.0]]));
        let w = g.constant(m(&[&[7.0, -3.0], &[2.0, 9.0]]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let x = g.constant(m(&[&[1.0, 1.0]]));
        let w = g.constant(m(&[&[2.0, 0.0], &[0.0, 3.0]]));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_operands() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 5]));
        let b = g.constant(Tensor::zeros(&[5]));
        let err = g.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("dense_forward") && err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn activation_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(m(&[&[-2.0]]));
        let a = g.constant(Tensor::vector(vec![PRELU_INIT]));
        let y = g.activation(x, Activation::PRelu, Some(a)).unwrap();
        assert_eq!(g.value(y).item(), -0.5);

        let x = g.constant(m(&[&[0.0]]));
        let y = g.activation(x, Activation::Sigmoid, None).unwrap();
        assert_eq!(g.value(y).item(), 0.5);

        for c in [-1e3, 0.0, 3.7, 1e3] {
            let x = g.constant(m(&[&[c, c]]));
            let y = g.activation(x, Activation::Softmax, None).unwrap();
            assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn prelu_without_slope_is_config_error() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(m(&[&[1.0]]));
        assert!(matches!(
            g.activation(x, Activation::PRelu, None),
            Err(Error::Config(_))
        ));
    }

    fn bn_store() -> (ParamStore, BnRunning) {
        let mut s = ParamStore::new();
        let mean = s.add_buffer("m", Tensor::vector(vec![0.0])).unwrap();
        let var = s.add_buffer("v", Tensor::vector(vec![1.0])).unwrap();
        let count = s.add_buffer("n", Tensor::scalar(0.0)).unwrap();
        (s, BnRunning { mean, var, count })
    }

    #[test]
    fn batch_norm_examples() {
        let (s, running) = bn_store();
        let mut g = Graph::new(&s);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let x = g.constant(m(&[&[1.0], &[3.0]]));
        let y = g.batch_norm(x, one, zero, Some(running), BnMode::Train).unwrap();
        assert!(close(g.value(y).data(), &[-1.0, 1.0], 1e-4));

        let x = g.constant(m(&[&[5.0], &[5.0], &[5.0]]));
        let y = g.batch_norm(x, one, zero, None, BnMode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        // exact affine on the normalized values: feed a column whose xhat is ±1
        let two = g.constant(Tensor::vector(vec![2.0]));
        let x = g.constant(m(&[&[1.0], &[3.0]]));
        let y = g.batch_norm(x, two, one, None, BnMode::Train).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(close(g.value(y).data(), &[1.0 - 2.0 * scale, 1.0 + 2.0 * scale], 1e-12));
        assert!(close(g.value(y).data(), &[-1.0, 3.0], 1e-4));

        // first update copies the batch statistics (mean 2, var 1)
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 3);
        assert_eq!(updates[0].1.item(), 2.0);
        assert_eq!(updates[1].1.item(), 1.0);
        assert_eq!(updates[2].1.item(), 1.0);
    }

    #[test]
    fn batch_norm_running_stats_blend_after_first_update() {
        let (mut s, running) = bn_store();
        *s.value_mut(running.mean) = Tensor::vector(vec![1.0]);
        *s.value_mut(running.count) = Tensor::scalar(3.0);
        let mut g = Graph::new(&s);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let x = g.constant(m(&[&[1.0], &[3.0]]));
        g.batch_norm(x, one, zero, Some(running), BnMode::Train).unwrap();
        let updates = g.take_buffer_updates();
        // mean 0.99·1 + 0.01·2, var 0.99·1 + 0.01·1
        assert!((updates[0].1.item() - 1.01).abs() < 1e-15);
        assert!((updates[1].1.item() - 1.0).abs() < 1e-15);
        assert_eq!(updates[2].1.item(), 4.0);
    }

    #[test]
    fn batch_norm_train_needs_two_rows_and_eval_uses_running_stats() {
        let (s, running) = bn_store();
        let mut g = Graph::new(&s);
        let one = g.constant(Tensor::vector(vec![1.0]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let x = g.constant(m(&[&[4.0]]));
        assert!(matches!(
            g.batch_norm(x, one, zero, Some(running), BnMode::Train),
            Err(Error::Contract(_))
        ));
        let y = g.batch_norm(x, one, zero, Some(running), BnMode::Eval).unwrap();
        assert!((g.value(y).item() - 4.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        assert!(g.take_buffer_updates().is_empty());
    }

    #[test]
    fn stop_gradient_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.leaf(m(&[&[1.0, 2.0, 3.0]]));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        // d/dx (sg(x))² = 0
        let x = g.leaf(m(&[&[3.0]]));
        let sx = g.stop_gradient(x);
        let sq = g.mul(sx, sx).unwrap();
        let grads = g.backward(sq).unwrap();
        assert!(grads.leaf(x).is_none());

        // d/dx x·sg(x) = 3
        let mut g = Graph::new(&s);
        let x = g.leaf(m(&[&[3.0]]));
        let sx = g.stop_gradient(x);
        let y = g.mul(x, sx).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.leaf(x).unwrap().item(), 3.0);

        // f(x) = x², grad 6
        let mut g = Graph::new(&s);
        let x = g.leaf(m(&[&[3.0]]));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().leaf(x).unwrap().item(), 6.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let p = g.constant(Tensor::vector(vec![0.5]));
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p = g.constant(Tensor::vector(vec![1.0 - 1e-7]));
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.value(l).item() - 1e-7).abs() < 1e-12);

        let p = g.constant(Tensor::vector(vec![0.9, 0.1]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 0.105_360_515_657_826_3).abs() < 1e-12);

        // exact 0 and 1 are clamped, never infinite
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).item().is_finite());

        let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(g.bce(p, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn mse_examples() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let u = g.constant(m(&[&[1.0, 0.0]]));
        let v = g.constant(m(&[&[0.0, 0.0]]));
        let l = g.mse(u, v).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = g.mse(u, u).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let u = g.constant(m(&[&[1.0, 2.0]]));
        let l = g.mse(u, v).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let w = g.constant(m(&[&[1.0], &[2.0]]));
        assert!(g.mse(u, w).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.leaf(m(&[&[1.0, 2.0]]));
        let y = g.sigmoid(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let x = [m(&[&[0.0]])];
        let err = finite_diff_check(&x, DEFAULT_EPS, |g, v| Ok(g.sigmoid(v[0]))).unwrap();
        assert!(err < 1e-8);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let v = g.leaf(x[0].clone());
        let y = g.sigmoid(v);
        let y = g.sum(y);
        assert!((g.backward(y).unwrap().leaf(v).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn straight_through_forward_is_exact_and_gradient_goes_to_live_input() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let live = g.leaf(m(&[&[0.1, 0.7]]));
        let frozen = g.leaf(m(&[&[0.3, -1.1]]));
        let st = g.straight_through(live, frozen).unwrap();
        assert_eq!(g.value(st).data(), g.value(frozen).data());
        let y = g.sum(st);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.leaf(live).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.leaf(frozen).is_none());
    }

    #[test]
    fn gather_gradient_touches_only_looked_up_rows() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let table = g.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let rows = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let y = g.sum(rows);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.leaf(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.gather(table, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn routed_affine_uses_disjoint_parameters() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let z = g.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let w0 = g.leaf(Tensor::zeros(&[2, 2]));
        let w1 = g.leaf(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let w2 = g.leaf(m(&[&[5.0, 0.0], &[0.0, 5.0]]));
        let out = g.routed_affine(z, &[w0, w1, w2], &[], &[0, 1]).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 3.0, 4.0]);
        let y = g.sum(out);
        let grads = g.backward(y).unwrap();
        assert!(grads.leaf(w2).is_none());
        assert_eq!(grads.leaf(w0).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(
            g.routed_affine(z, &[w0, w1], &[], &[0, 2]),
            Err(Error::Contract(_))
        ));
    }
}
