//! Dense tensors plus a recorded-operation graph with reverse-mode
//! differentiation, including gradients of gradient norms.
//!
//! Layout conventions: images are NCHW, storage is row-major, convolution
//! weights are `[out, in, k, k]` and transposed-convolution weights are
//! `[in, out, k, k]`. Shape rules:
//!
//! * conv: `out = (in + 2·pad − k) / stride + 1`
//! * transposed conv: `out = (in − 1)·stride − 2·pad + k + out_pad`
//!
//! Broadcasting is explicit: `broadcast_rows` repeats a `[N]` vector across
//! the leading axis, `broadcast_channels` repeats a `[C]` vector across axis 1.

mod graph;
pub mod kernels;
mod ops;

pub use graph::{GradientMap, Graph, GraphRecord, Node, NodeId, NodeRecord};
pub use ops::Op;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rel_err};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[-1.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0])).unwrap();
        let unused = g.param(Tensor::ones(&[2, 2])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(crate::Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0])).unwrap();
        assert!(matches!(g.log(x), Err(crate::Error::NonFinite { op: "log" })));
        assert!(g.constant(Tensor::vector(&[f64::NAN])).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2])).unwrap();
        let b = g.constant(Tensor::ones(&[3])).unwrap();
        assert!(matches!(g.add(a, b), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn linear_critic_penalty_closed_form() {
        // D(x) = a·x, a = (3, 4): ‖∇D‖ = 5, penalty 16, ∂/∂a = 2(‖a‖−1)a/‖a‖
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        let a = g.param(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let d = g.matmul(x, a).unwrap();
        let pen = g.gradient_penalty(d, x).unwrap();
        assert!((g.value(pen).item().unwrap() - 16.0).abs() < 1e-12);
        let grads = g.grad_norm_penalty_backward(d, x, &[a]).unwrap();
        let ga = grads.get(a).unwrap();
        assert!((ga.data()[0] - 4.8).abs() < 1e-10);
        assert!((ga.data()[1] - 6.4).abs() < 1e-10);
    }

    #[test]
    fn zero_critic_penalty_is_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2], 0.7)).unwrap();
        let w = g.param(Tensor::zeros(&[2, 1])).unwrap();
        let b = g.param(Tensor::zeros(&[1])).unwrap();
        let xw = g.matmul(x, w).unwrap();
        let bb = g.broadcast_channels(b, &[3, 1]).unwrap();
        let d = g.add(xw, bb).unwrap();
        let pen = g.gradient_penalty(d, x).unwrap();
        assert_eq!(g.value(pen).item().unwrap(), 1.0);
        let grads = g.gradients(pen, &[b]).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[0.0]);
    }

    #[test]
    fn penalty_requires_ancestor() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 2])).unwrap();
        let other = g.constant(Tensor::ones(&[2, 2])).unwrap();
        let d = g.sum_rows(other).unwrap();
        assert!(matches!(g.gradient_penalty(d, x), Err(crate::Error::NotAncestor { .. })));
    }

    #[test]
    fn replay_reproduces_values_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.param(uniform(&mut rng, &[2, 2, 6, 6], -2.0, 2.0)).unwrap();
        let w = g.param(uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0)).unwrap();
        let c = g.conv2d(x, w, 2, 1).unwrap();
        let t = g.tanh(c).unwrap();
        let s = g.mean(t).unwrap();
        g.backward(s).unwrap();
        let json = serde_json::to_string(&g.to_record()).unwrap();
        let back: GraphRecord = serde_json::from_str(&json).unwrap();
        let replayed = Graph::replay(&back).unwrap();
        assert_eq!(replayed.len(), g.len());
        for i in 0..g.len() {
            let id = NodeId(i);
            assert_eq!(replayed.value(id).data(), g.value(id).data(), "node {i}");
        }
    }

    /// Random instances of every primitive, each reduced to a scalar through a
    /// fixed random projection so every output element is exercised.
    fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[NodeId]) -> crate::Result<NodeId>)> {
        vec![
            ("add", vec![vec![2, 3], vec![2, 3]], |g, p| g.add(p[0], p[1])),
            ("sub", vec![vec![2, 3], vec![2, 3]], |g, p| g.sub(p[0], p[1])),
            ("mul", vec![vec![2, 3], vec![2, 3]], |g, p| g.mul(p[0], p[1])),
            ("div", vec![vec![4], vec![4]], |g, p| {
                let d = g.square(p[1])?;
                let d = g.add_scalar(d, 0.5)?;
                g.div(p[0], d)
            }),
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, p| g.matmul(p[0], p[1])),
            ("conv2d", vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3]], |g, p| g.conv2d(p[0], p[1], 2, 1)),
            ("transposed_conv2d", vec![vec![2, 2, 3, 3], vec![2, 3, 5, 5]], |g, p| {
                g.transposed_conv2d(p[0], p[1], 2, 2, 1)
            }),
            ("relu", vec![vec![10]], |g, p| g.relu(p[0])),
            ("tanh", vec![vec![10]], |g, p| g.tanh(p[0])),
            ("sigmoid", vec![vec![10]], |g, p| g.sigmoid(p[0])),
            ("log", vec![vec![6]], |g, p| {
                let s = g.square(p[0])?;
                let s = g.add_scalar(s, 0.1)?;
                g.log(s)
            }),
            ("mean", vec![vec![3, 4]], |g, p| g.mean(p[0])),
            ("sum", vec![vec![3, 4]], |g, p| g.sum(p[0])),
            ("abs", vec![vec![8]], |g, p| g.abs(p[0])),
            ("square", vec![vec![8]], |g, p| g.square(p[0])),
            ("sqrt", vec![vec![8]], |g, p| {
                let s = g.square(p[0])?;
                let s = g.add_scalar(s, 0.2)?;
                g.sqrt(s)
            }),
            ("l2_norm_per_row", vec![vec![3, 5]], |g, p| g.l2_norm_per_row(p[0])),
            ("concat", vec![vec![2, 1, 3], vec![2, 2, 3]], |g, p| g.concat(&[p[0], p[1]], 1)),
            ("reshape", vec![vec![2, 6]], |g, p| g.reshape(p[0], &[3, 4])),
            ("pad", vec![vec![2, 3]], |g, p| g.pad(p[0], 1, 1, 2)),
            ("slice", vec![vec![2, 5]], |g, p| g.slice(p[0], 1, 1, 3)),
            ("avg_pool", vec![vec![1, 2, 8, 8]], |g, p| g.avg_pool(p[0], 4)),
            ("broadcast_channels", vec![vec![3]], |g, p| g.broadcast_channels(p[0], &[2, 3, 2])),
        ]
    }

    fn project(g: &mut Graph, y: NodeId, seed: u64) -> crate::Result<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let r = uniform(&mut rng, g.shape(y), -1.0, 1.0);
        let r = g.constant(r)?;
        let m = g.mul(y, r)?;
        g.sum(m)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for (name, shapes, f) in primitive_cases() {
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s, -2.0, 2.0)).collect();
                let report = check_gradients(&params, 1e-5, |g, p| {
                    let y = f(g, p)?;
                    project(g, y, seed)
                })
                .unwrap();
                assert!(
                    report.max_rel_err < 1e-5,
                    "{name} seed {seed}: rel err {:e}",
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = uniform(&mut rng, &[3, 4], -2.0, 2.0);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.param(x0.clone()).unwrap();
            let t = g.tanh(x).unwrap();
            let f = g.mean(t).unwrap();
            let s = g.square(x).unwrap();
            let h = g.sum(s).unwrap();
            let out = match which {
                0 => f,
                1 => h,
                _ => g.add(f, h).unwrap(),
            };
            g.backward(out).unwrap().get(x).unwrap().clone()
        };
        let (gf, gh, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gs.len() {
            assert!((gs.data()[i] - gf.data()[i] - gh.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_through_conv_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, &[3, 2, 6, 6], -1.0, 1.0);
            let params = vec![
                uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
                uniform(&mut rng, &[27, 1], -0.5, 0.5),
            ];
            let report = check_gradients(&params, 1e-5, |g, p| {
                let xi = g.constant(x.clone())?;
                let c = g.conv2d(xi, p[0], 2, 1)?;
                let t = g.tanh(c)?;
                let flat = g.reshape(t, &[3, 27])?;
                let d = g.matmul(flat, p[1])?;
                g.gradient_penalty(d, xi)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "seed {seed}: {:e}", report.max_rel_err);
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-5);
    }
}
