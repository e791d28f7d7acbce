use halluprobe::numerics::gradcheck::check_gradients;
use halluprobe::numerics::{rng, Graph, NumericsError, Reduction, Scalar, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_tensor(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(&Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 12]);
}

#[test]
fn dot_gradient_is_twice_x() {
    let mut g = Graph::<f64>::new();
    let xs = vec![1.5, -2.0, 0.25];
    let x = g.param(&Tensor::vector(xs.clone()));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.iter().zip(&xs) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn second_backward_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(NumericsError::AlreadyBackpropagated));
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NumericsError::NonScalarRoot { .. })));
}

#[test]
fn write_grad_populates_tensor() {
    let mut p = Tensor::<f32>::vector(vec![3.0, 4.0]).with_requires_grad(true);
    let mut g = Graph::new();
    let x = g.param(&p);
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.write_grad(x, &mut p).unwrap();
    assert_eq!(p.grad().unwrap(), &[1.0, 1.0]);
}

#[test]
fn cross_entropy_confident_is_near_zero() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_rows(&[&[50.0, 0.0, 0.0], &[0.0, 0.0, 50.0]]));
    let l = g.cross_entropy(logits, &[0, 2], 99, Reduction::Mean, 0.0).unwrap();
    assert!(g.value(l).data()[0] < 1e-20);
}

#[test]
fn cross_entropy_uniform_is_ln_v() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[3, 4]));
    let mean = g.cross_entropy(logits, &[1, 2, 3], 0, Reduction::Mean, 0.0).unwrap();
    assert!((g.value(mean).data()[0] - 4f64.ln()).abs() < 1e-12);
    let sum = g.cross_entropy(logits, &[1, 2, 0], 0, Reduction::Sum, 0.0).unwrap();
    assert!((g.value(sum).data()[0] - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::<f32>::new();
    let logits = g.constant(Tensor::zeros(&[2, 4]));
    assert_eq!(
        g.cross_entropy(logits, &[0, 0], 0, Reduction::Mean, 0.0),
        Err(NumericsError::NoSupervisedPositions)
    );
    assert!(matches!(
        g.cross_entropy(logits, &[1, 4], 0, Reduction::Mean, 0.0),
        Err(NumericsError::Index { index: 4, bound: 4 })
    ));
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut r = rng::stream(11, "mlp");
    let params = vec![
        random_tensor(&[4, 6], &mut r, 0.5),
        random_tensor(&[6], &mut r, 0.1),
        random_tensor(&[6, 5], &mut r, 0.5),
        random_tensor(&[5], &mut r, 0.1),
        random_tensor(&[5, 3], &mut r, 0.5),
        random_tensor(&[3], &mut r, 0.1),
    ];
    let input = random_tensor(&[7, 4], &mut r, 1.0);
    let targets = [0u32, 1, 2, 1, 0, 2, 2];
    let report = check_gradients(&params, 1e-4, 1e-8, |g, p| {
        let x = g.constant(input.clone());
        let mut h = x;
        for layer in 0..3 {
            let z = g.matmul(h, p[2 * layer])?;
            let z = g.add_row(z, p[2 * layer + 1])?;
            h = if layer < 2 { g.relu(z) } else { z };
        }
        g.cross_entropy(h, &targets, 99, Reduction::Mean, 0.0)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// Exercises every tape op in one composite graph.
fn composite<T: Scalar>(g: &mut Graph<T>, p: &[Var], ids: &[u32], smoothing: f64) -> Result<Var, NumericsError> {
    // p: table[6×4], gain[4], bias[4], wq[4×4], w[2], stack[2×9] (const)
    let x = g.embedding(p[0], ids)?;
    let x = g.layer_norm(x, p[1], p[2], T::from_f64(1e-5))?;
    let q = g.matmul(x, p[3])?;
    let a = g.slice_cols(q, 0, 2)?;
    let b = g.slice_cols(q, 2, 2)?;
    let scores = g.matmul_nt(a, b)?;
    let scores = g.scale(scores, T::from_f64(0.7));
    let n = ids.len();
    let mask: Vec<bool> = (0..n * n).map(|i| i % n > i / n).collect();
    let scores = g.mask_fill(scores, &mask)?;
    let att = g.softmax(scores, 1)?;
    let mixed = g.matmul(att, x)?;
    let both = g.concat_cols(&[mixed, x])?;
    let t = g.transpose(both)?;
    let t = g.transpose(t)?;
    let rows = g.concat_rows(&[t, both])?;
    let pw = g.softmax(p[4], 0)?;
    let pw = g.reshape(pw, &[1, 2])?;
    let mix = g.matmul(pw, p[5])?;
    let mix = g.reshape(mix, &[3, 3])?;
    let mix = g.relu(mix);
    let s1 = g.sum(mix);
    let rows = g.slice_cols(rows, 2, 4)?;
    let logits = g.matmul_nt(rows, p[0])?;
    let mut targets: Vec<u32> = ids.iter().chain(ids).map(|&i| (i + 1) % 6).collect();
    targets[1] = 5;
    let ce = g.cross_entropy(logits, &targets, 5, Reduction::Mean, smoothing)?;
    let s1 = g.reshape(s1, &[1])?;
    let ce = g.reshape(ce, &[1])?;
    let tot = g.add(ce, s1)?;
    let tot = g.mul(tot, tot)?;
    Ok(g.sum(tot))
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let mut r = rng::stream(5, "composite");
    let mut params = vec![
        random_tensor(&[6, 4], &mut r, 0.8),
        random_tensor(&[4], &mut r, 0.3),
        random_tensor(&[4], &mut r, 0.3),
        random_tensor(&[4, 4], &mut r, 0.6),
        random_tensor(&[2], &mut r, 1.0),
        random_tensor(&[2, 9], &mut r, 1.0),
    ];
    for v in params[1].data_mut() {
        *v += 1.0;
    }
    let ids = [0u32, 3, 2, 3];
    for smoothing in [0.0, 0.1] {
        let report = check_gradients(&params, 1e-5, 1e-7, |g, p| composite(g, p, &ids, smoothing)).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}

#[test]
fn composite_graph_f32_within_loose_tolerance() {
    // 32-bit analytic gradients against a 64-bit finite-difference oracle.
    let mut r = rng::stream(6, "composite32");
    let params = vec![
        random_tensor(&[6, 4], &mut r, 0.8),
        random_tensor(&[4], &mut r, 0.3).map(|v| v + 1.0),
        random_tensor(&[4], &mut r, 0.3),
        random_tensor(&[4, 4], &mut r, 0.6),
        random_tensor(&[2], &mut r, 1.0),
        random_tensor(&[2, 9], &mut r, 1.0),
    ];
    let ids = [1u32, 0, 4];
    let mut g32 = Graph::<f32>::new();
    let vars: Vec<Var> = params.iter().map(|p| g32.param(&p.cast())).collect();
    let root = composite(&mut g32, &vars, &ids, 0.0).unwrap();
    g32.backward(root).unwrap();
    let mut g64 = Graph::<f64>::new();
    let v64: Vec<Var> = params.iter().map(|p| g64.param(p)).collect();
    let root64 = composite(&mut g64, &v64, &ids, 0.0).unwrap();
    g64.backward(root64).unwrap();
    let mut worst = 0.0f64;
    for (&a, &b) in vars.iter().zip(&v64) {
        for (x, y) in g32.grad(a).unwrap().iter().zip(g64.grad(b).unwrap()) {
            let rel = (*x as f64 - y).abs() / y.abs().max(1e-3);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-3, "{worst}");
    let report = check_gradients(&params, 1e-5, 1e-7, |g, p| composite(g, p, &ids, 0.0)).unwrap();
    assert!(report.max_rel_error < 1e-5);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f32..50.0, 12), axis in 0usize..3) {
        let t = Tensor::new(vec![2, 3, 2], data).unwrap();
        let s = t.softmax(axis).unwrap();
        let shape = [2usize, 3, 2];
        let (outer, len, inner) = halluprobe::numerics::kernels::axis_strides(&shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let total: f32 = (0..len).map(|j| s.data()[o * len * inner + j * inner + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ops_are_deterministic(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "det");
        let a = random_tensor(&[3, 4], &mut r, 1.0);
        let b = random_tensor(&[4, 2], &mut r, 1.0);
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.param(&a);
            let y = g.param(&b);
            let z = g.matmul(x, y).unwrap();
            let s = g.softmax(z, 1).unwrap();
            let t = g.sum(s);
            g.backward(t).unwrap();
            (g.value(z).clone(), g.grad(x).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }
}
