//! Forward fixtures and finite-difference checks for every tape operation.

use homey_core::compute::{finite_diff_check, Graph, Padding, Probe, Tensor, TensorError, Var};
use proptest::prelude::*;

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * self.next()).collect();
        Tensor::new(shape.to_vec(), v).unwrap()
    }
}

/// Checks `build` by reducing its output with fixed random weights.
fn check_op<F>(shapes: &[&[usize]], range: (f64, f64), seed: u64, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = Lcg(seed);
    let params: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| rng.tensor(s, range.0, range.1))
        .collect();
    let run = |ps: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = Lcg(seed ^ 0x9e37);
                r.tensor(g.shape(out), -1.0, 1.0)
            }
        };
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        Ok::<_, TensorError>((g, vars, loss, w))
    };
    let (mut g, vars, loss, w) = run(&params, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    let report = finite_diff_check(
        |ps| {
            let (g, _, loss, _) = run(ps, Some(&w))?;
            Ok(Probe {
                value: g.scalar_value(loss),
                signature: Some(g.branch_signature()),
            })
        },
        &params,
        &analytic,
        1e-3,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.probed > 0);
}

#[test]
fn elementwise_fixtures() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap());
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);

    let zero = g.constant(Tensor::scalar(0.0));
    let f = g.constant(Tensor::from_f64([2, 2, 2], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
    let z = g.mul(f, zero).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.scalar_value(y), 0.5);
}

#[test]
fn elementwise_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    let neg = g.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
    assert!(matches!(g.log(neg), Err(TensorError::Domain { .. })));
    let zero = g.constant(Tensor::zeros([2]));
    assert!(g.log(zero).is_err());
}

#[test]
fn trailing_and_leading_broadcast() {
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::from_f64([1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let bias = g.constant(Tensor::from_f64([3], &[10.0, 20.0, 30.0]).unwrap());
    let out = g.add(f, bias).unwrap();
    assert_eq!(g.value(out).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let m = g.constant(Tensor::from_f64([1, 2], &[2.0, -1.0]).unwrap());
    let out = g.mul_leading(f, m).unwrap();
    assert_eq!(g.value(out).data(), &[2.0, 4.0, 6.0, -4.0, -5.0, -6.0]);
}

#[test]
fn matmul_fixtures() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let eye = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = Tensor::from_f64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mb = g.constant(m.clone());
    let p = g.matmul(eye, mb).unwrap();
    assert_eq!(g.value(p), &m);

    let zero = g.constant(Tensor::zeros([4, 2]));
    let p = g.matmul(zero, mb).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));

    assert!(g.matmul(mb, mb).is_err());
}

#[test]
fn conv2d_fixtures() {
    let mut g = Graph::<f64>::new();
    let mut rng = Lcg(3);
    let input = rng.tensor(&[4, 5, 2], -1.0, 1.0);
    let x = g.constant(input.clone());
    // 1x1 identity kernel over two channels
    let id = g.constant(Tensor::from_f64([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.conv2d(x, id, 1, Padding::Replicate).unwrap();
    assert_eq!(g.value(y), &input);

    let c = g.constant(Tensor::full([4, 4, 1], 0.7));
    let ones = g.constant(Tensor::full([3, 3, 1, 1], 1.0));
    let y = g.conv2d(c, ones, 1, Padding::Replicate).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 9.0 * 0.7).abs() < 1e-12);
    }
    let y = g.conv2d(c, ones, 2, Padding::Replicate).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 1]);

    let bad = g.constant(Tensor::full([3, 3, 2, 1], 1.0));
    assert!(matches!(
        g.conv2d(c, bad, 1, Padding::Zero),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn softmax_fixtures() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::full([2, 4], 3.0));
    let s = g.softmax_rows(u).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let r = g.constant(Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
    let s = g.softmax_rows(r).unwrap();
    let e = std::f64::consts::E;
    assert!((g.value(s).data()[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((g.value(s).data()[0] - 0.7311).abs() < 1e-4);
    assert!((g.value(s).data()[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn upsample_fixtures() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64([2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = g.upsample_nearest(x, 1).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let up = g.upsample_nearest(x, 2).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    assert_eq!(g.value(up).sum(), 4.0 * g.value(x).sum());
}

#[test]
fn backward_fixtures() {
    let mut g = Graph::<f64>::new();
    let xv = Tensor::from_f64([3], &[0.5, -2.0, 3.0]).unwrap();
    let x = g.param(xv.clone());
    let sq = g.square(x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    for (gv, xv) in gx.data().iter().zip(xv.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
    // second sweep over the same tape is refused
    assert!(matches!(g.backward(loss), Err(TensorError::TapeConsumed)));

    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::full([2], 1.0));
    let c = g.constant(Tensor::scalar(4.0));
    let _unused = g.scale(p, 2.0);
    let grads = g.backward(c).unwrap();
    assert!(grads.get(p).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));

    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::full([2], 1.0));
    assert!(matches!(g.backward(p), Err(TensorError::NotScalar(_))));
}

#[test]
fn random_chain_matches_finite_differences() {
    check_op(&[&[3, 4], &[4, 2]], (-1.0, 1.0), 11, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.sigmoid(m);
        Ok(g.square(s))
    });
}

#[test]
fn binary_ops_gradients() {
    check_op(&[&[2, 3, 4], &[2, 3, 4]], (-1.0, 1.0), 1, |g, v| g.add(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[4]], (-1.0, 1.0), 2, |g, v| g.sub(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[1]], (-1.0, 1.0), 3, |g, v| g.mul(v[0], v[1]));
    check_op(&[&[2, 3, 4], &[2, 3]], (-1.0, 1.0), 4, |g, v| {
        g.mul_leading(v[0], v[1])
    });
    check_op(&[&[5], &[5]], (0.5, 2.0), 5, |g, v| g.div(v[0], v[1]));
    check_op(&[&[6], &[6]], (-1.0, 1.0), 6, |g, v| g.minimum(v[0], v[1]));
    check_op(&[&[6], &[6]], (-1.0, 1.0), 7, |g, v| g.maximum(v[0], v[1]));
}

#[test]
fn unary_ops_gradients() {
    check_op(&[&[7]], (-2.0, 2.0), 8, |g, v| Ok(g.sigmoid(v[0])));
    check_op(&[&[7]], (-2.0, 2.0), 9, |g, v| Ok(g.relu(v[0])));
    check_op(&[&[7]], (0.2, 3.0), 10, |g, v| g.log(v[0]));
    check_op(&[&[7]], (-2.0, 2.0), 11, |g, v| Ok(g.exp(v[0])));
    check_op(&[&[7]], (0.2, 3.0), 12, |g, v| g.sqrt(v[0]));
    check_op(&[&[7]], (-2.0, 2.0), 13, |g, v| Ok(g.square(v[0])));
    check_op(&[&[7]], (-2.0, 2.0), 14, |g, v| Ok(g.atan(v[0])));
    check_op(&[&[7]], (-2.0, 2.0), 15, |g, v| Ok(g.neg(v[0])));
    check_op(&[&[7]], (-2.0, 2.0), 16, |g, v| Ok(g.clamp(v[0], -0.5, 0.8)));
    check_op(&[&[7]], (-2.0, 2.0), 17, |g, v| {
        let s = g.scale(v[0], -1.5);
        Ok(g.add_scalar(s, 0.25))
    });
}

#[test]
fn structural_ops_gradients() {
    check_op(&[&[3, 5]], (-1.0, 1.0), 20, |g, v| g.transpose(v[0]));
    check_op(&[&[3, 5]], (-1.0, 1.0), 21, |g, v| g.reshape(v[0], &[5, 3]));
    check_op(&[&[3, 5]], (-2.0, 2.0), 22, |g, v| g.softmax_rows(v[0]));
    check_op(&[&[3, 2, 4]], (-1.0, 1.0), 23, |g, v| g.upsample_nearest(v[0], 3));
    check_op(&[&[3, 2, 4]], (-1.0, 1.0), 24, |g, v| Ok(g.mean_last_axis(v[0])));
    check_op(&[&[3, 6]], (-1.0, 1.0), 25, |g, v| g.slice_last(v[0], 2, 3));
    check_op(&[&[4, 3]], (-1.0, 1.0), 26, |g, v| g.gather_rows(v[0], &[2, 0, 2]));
    check_op(&[&[4, 3]], (-1.0, 1.0), 27, |g, v| Ok(g.mean(v[0])));
}

#[test]
fn conv_and_filter_gradients() {
    for (stride, pad, seed) in [
        (1, Padding::Replicate, 30),
        (2, Padding::Replicate, 31),
        (1, Padding::Zero, 32),
        (2, Padding::Zero, 33),
    ] {
        check_op(&[&[5, 6, 2], &[3, 3, 2, 3]], (-1.0, 1.0), seed, |g, v| {
            g.conv2d(v[0], v[1], stride, pad)
        });
    }
    let sobel = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    check_op(&[&[4, 5, 2]], (-1.0, 1.0), 34, |g, v| {
        g.filter2d(v[0], &sobel, 3, Padding::Replicate)
    });
    check_op(&[&[4, 5, 2]], (-1.0, 1.0), 35, |g, v| {
        g.filter2d(v[0], &sobel, 3, Padding::Zero)
    });
    check_op(&[&[4, 5, 2]], (-1.0, 1.0), 36, |g, v| g.local_variance(v[0], 3));
    check_op(&[&[3, 3, 1]], (-1.0, 1.0), 37, |g, v| g.local_variance(v[0], 5));
}

#[test]
fn cross_entropy_gradients() {
    let targets = [0usize, 3, 1, 3];
    check_op(&[&[4, 4]], (-2.0, 2.0), 40, |g, v| {
        g.cross_entropy_rows(v[0], &targets, 0.0)
    });
    check_op(&[&[4, 4]], (-2.0, 2.0), 41, |g, v| {
        g.cross_entropy_rows(v[0], &targets, 2.0)
    });
    check_op(&[&[4, 4]], (-2.0, 2.0), 42, |g, v| {
        g.cross_entropy_rows(v[0], &targets, 1.5)
    });
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(Tensor::zeros([3, 18]));
    let ce = g.cross_entropy_rows(u, &[0, 5, 17], 0.0).unwrap();
    for &v in g.value(ce).data() {
        assert!((v - 18f64.ln()).abs() < 1e-12);
    }
    let sure = g.constant(Tensor::from_f64([1, 3], &[800.0, 0.0, 0.0]).unwrap());
    let focal = g.cross_entropy_rows(sure, &[0], 2.0).unwrap();
    assert_eq!(g.value(focal).data()[0], 0.0);
}

#[test]
fn fused_attention_gradients() {
    check_op(&[&[5, 3], &[5, 3], &[5, 4]], (-1.0, 1.0), 50, |g, v| {
        g.attention(v[0], v[1], v[2], 1.0 / 3f64.sqrt())
    });
}

#[test]
fn fused_attention_equals_composition() {
    let mut rng = Lcg(77);
    let (q, k, v) = (
        rng.tensor(&[6, 2], -1.0, 1.0),
        rng.tensor(&[6, 2], -1.0, 1.0),
        rng.tensor(&[6, 3], -1.0, 1.0),
    );
    let scale = 1.0 / 2f64.sqrt();
    let w = rng.tensor(&[6, 3], -1.0, 1.0);
    let run = |fused: bool| {
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
        let out = if fused {
            g.attention(qv, kv, vv, scale).unwrap()
        } else {
            let kt = g.transpose(kv).unwrap();
            let s = g.matmul(qv, kt).unwrap();
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s).unwrap();
            g.matmul(a, vv).unwrap()
        };
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv).unwrap();
        let loss = g.sum(p);
        let value = g.value(out).clone();
        let grads = g.backward(loss).unwrap();
        (
            value,
            [qv, kv, vv].map(|x| grads.get(x).unwrap().clone()),
        )
    };
    let (fo, fg) = run(true);
    let (co, cg) = run(false);
    assert!(fo.max_abs_diff(&co) < 1e-12);
    for (a, b) in fg.iter().zip(&cg) {
        assert!(a.max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = Lcg(5);
    let x = rng.tensor(&[8, 8, 3], 0.0, 1.0);
    let k = rng.tensor(&[3, 3, 3, 4], -0.5, 0.5);
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.cast());
        let kv = g.param(k.cast());
        let y = g.conv2d(xv, kv, 2, Padding::Replicate).unwrap();
        let y = g.relu(y);
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3, 4], vals.clone()).unwrap());
        let shifted = g.constant(Tensor::new([3, 4], vals.iter().map(|v| v + shift).collect()).unwrap());
        let a = g.softmax_rows(x).unwrap();
        let b = g.softmax_rows(shifted).unwrap();
        for row in g.value(a).data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-9);
    }
}
