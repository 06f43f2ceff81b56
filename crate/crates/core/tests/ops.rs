//! Autograd op tests against direct-loop oracles and finite differences.

use dfres_core::gradcheck::gradcheck;
use dfres_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops, zero padding, no im2col.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [c_in, h, wd] = x.shape()[..] else { panic!() };
    let [c_out, _, k, _] = w.shape()[..] else { panic!() };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, ho, wo]);
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w.data()[((o * c_in + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
                out.data_mut()[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [m, k] = a.shape()[..] else { panic!() };
    let [_, n] = b.shape()[..] else { panic!() };
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum()
    })
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let g = Graph::new();
    let (xv, wv, bv) = (g.input(x), g.input(w), g.input(b));
    let out = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
    g.value(out)
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[1, 4, 5], 1);
    let w = Tensor::full(&[1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    assert_eq!(conv(&x, &w, &b, 1, 0), x.reshape(&[1, 4, 5]).unwrap());
}

#[test]
fn conv_box_sum_counts_neighbours() {
    let x = Tensor::full(&[1, 4, 4], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let out = conv(&x, &w, &Tensor::zeros(&[1]), 1, 1);
    let d = out.data();
    assert_eq!(d[0], 4.0);
    assert_eq!(d[3], 4.0);
    assert_eq!(d[12], 4.0);
    assert_eq!(d[15], 4.0);
    assert_eq!(d[5], 9.0);
    assert_eq!(d[10], 9.0);
    assert_eq!(d[1], 6.0);
}

#[test]
fn conv_matches_loop_oracle() {
    let x = random(&[2, 5, 5], 2);
    let w = random(&[3, 2, 3, 3], 3);
    let b = random(&[3], 4);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let fast = conv(&x, &w, &b, stride, pad);
        let slow = naive_conv(&x, &w, b.data(), stride, pad);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-6, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv_rejects_mismatched_channels() {
    let g = Graph::<f64>::new();
    let x = g.input(&random(&[2, 4, 4], 1));
    let w = g.input(&random(&[1, 3, 3, 3], 2));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn matmul_examples() {
    let g = Graph::<f64>::new();
    let a = g.input(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.input(&Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[11.0]);

    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let bm = random(&[3, 5], 9);
    let prod = g.matmul(g.input(&eye), g.input(&bm)).unwrap();
    assert_eq!(g.value(prod), bm);

    assert!(g.matmul(a, a).is_err());
}

#[test]
fn matmul_matches_loop_oracle() {
    let a = random(&[8, 64], 5);
    let b = random(&[64, 8], 6);
    let g = Graph::new();
    let out = g.value(g.matmul(g.input(&a), g.input(&b)).unwrap());
    assert!(out.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-6);
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let z = g.input(&Tensor::zeros(&[1, 2]));
    assert_eq!(g.value(g.softmax_rows(z).unwrap()).data(), &[0.5, 0.5]);

    let big = g.input(&Tensor::full(&[1, 2], 1000.0));
    assert_eq!(g.value(g.softmax_rows(big).unwrap()).data(), &[0.5, 0.5]);

    let row = g.input(&random(&[1, 6], 3));
    assert!(g.value(g.softmax_cols(row).unwrap()).data().iter().all(|&v| v == 1.0));
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::new();
    let x = g.input(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    assert_eq!(g.value(g.relu(x).unwrap()).data(), &[0.0, 2.0]);
    assert_eq!(g.value(g.leaky_relu(x, 0.1).unwrap()).data(), &[-0.1, 2.0]);
    let m = g.input(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(g.scalar(g.mean(m).unwrap()), 2.0);
    let c = g.input(&Tensor::new(&[3], vec![-0.5, 0.5, 1.5]).unwrap());
    assert_eq!(g.value(g.clamp01(c).unwrap()).data(), &[0.0, 0.5, 1.0]);
}

#[test]
fn concat_checks_extents() {
    let g = Graph::<f64>::new();
    let a = g.input(&random(&[2, 3, 4], 1));
    let b = g.input(&random(&[1, 3, 4], 2));
    let c = g.input(&random(&[1, 2, 4], 3));
    assert_eq!(g.shape(g.concat(&[a, b], 0).unwrap()), vec![3, 3, 4]);
    assert!(g.concat(&[a, c], 0).is_err());
    let d = g.concat(&[a, a], 2).unwrap();
    assert_eq!(g.shape(d), vec![2, 3, 8]);
    let v = g.value(d);
    assert_eq!(v.data()[4], g.value(a).data()[0]);
}

#[test]
fn non_finite_outputs_are_errors() {
    let g = Graph::<f64>::new();
    let a = g.input(&Tensor::full(&[2], f64::MAX));
    assert!(matches!(g.add(a, a), Err(Error::NonFinite("add"))));
}

#[test]
fn backward_analytic_examples() {
    let g = Graph::<f64>::new();
    let xt = random(&[5], 7);
    let x = g.param(&xt);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(xt.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }

    let g = Graph::<f64>::new();
    let x = g.param(&random(&[10], 8));
    let loss = g.mean(x).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn backward_accumulates_shared_leaves() {
    let g = Graph::<f64>::new();
    let mut t = Tensor::new(&[1], vec![3.0]).unwrap().with_requires_grad(true);
    let x = g.leaf(&t);
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap(); // 2x^2
    let loss = g.sum(z).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_into(x, &mut t).unwrap();
    assert_eq!(t.grad().unwrap(), &[12.0]);
}

#[test]
fn gradcheck_every_op() {
    let eps = 1e-5;
    let tol = 1e-4;
    let cases: Vec<(&str, f64)> = vec![
        ("conv2d", gradcheck(&[random(&[2, 5, 4], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)], eps, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)).unwrap()),
        ("conv2d stride 2", gradcheck(&[random(&[2, 5, 5], 4), random(&[2, 2, 3, 3], 5)], eps, |g, v| g.conv2d(v[0], v[1], None, 2, 1)).unwrap()),
        ("conv2d 1x1", gradcheck(&[random(&[3, 3, 4], 6), random(&[2, 3, 1, 1], 7), random(&[2], 8)], eps, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0)).unwrap()),
        ("matmul", gradcheck(&[random(&[3, 4], 9), random(&[4, 2], 10)], eps, |g, v| g.matmul(v[0], v[1])).unwrap()),
        ("softmax_rows", gradcheck(&[random(&[3, 5], 11)], eps, |g, v| g.softmax_rows(v[0])).unwrap()),
        ("softmax_cols", gradcheck(&[random(&[4, 3], 12)], eps, |g, v| g.softmax_cols(v[0])).unwrap()),
        ("transpose", gradcheck(&[random(&[3, 5], 13)], eps, |g, v| g.transpose(v[0])).unwrap()),
        ("add/sub/mul", gradcheck(&[random(&[6], 14), random(&[6], 15)], eps, |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            g.mul(s, d)
        }).unwrap()),
        ("scale_by", gradcheck(&[random(&[6], 16), random(&[1], 17)], eps, |g, v| g.scale_by(v[0], v[1])).unwrap()),
        ("leaky_relu", gradcheck(&[random(&[8], 18)], eps, |g, v| g.leaky_relu(v[0], 0.1)).unwrap()),
        ("relu", gradcheck(&[random(&[8], 19)], eps, |g, v| g.relu(v[0])).unwrap()),
        ("concat", gradcheck(&[random(&[2, 3], 20), random(&[2, 2], 21)], eps, |g, v| g.concat(&[v[0], v[1]], 1)).unwrap()),
        ("mean", gradcheck(&[random(&[7], 22)], eps, |g, v| g.mean(v[0])).unwrap()),
        ("charbonnier", gradcheck(&[random(&[9], 23), random(&[9], 24)], eps, |g, v| g.charbonnier(v[0], v[1], 1e-3)).unwrap()),
        ("l1", gradcheck(&[random(&[9], 25), random(&[9], 26)], eps, |g, v| g.l1(v[0], v[1])).unwrap()),
        ("bilinear_sample", gradcheck(&[random(&[3, 4, 5], 27), Tensor::new(&[2], vec![1.3, 2.6]).unwrap()], eps, |g, v| g.bilinear_sample(v[0], v[1])).unwrap()),
        ("bilinear_sample border", gradcheck(&[random(&[2, 4, 5], 28), Tensor::new(&[2], vec![-0.4, 4.3]).unwrap()], eps, |g, v| g.bilinear_sample(v[0], v[1])).unwrap()),
    ];
    for (name, err) in cases {
        assert!(err <= tol, "{name}: relative error {err:e}");
    }
}

#[test]
fn bilinear_sample_examples() {
    let g = Graph::<f64>::new();
    let feat = g.input(&Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
    let at = |y: f64, x: f64| {
        let c = g.input(&Tensor::new(&[2], vec![y, x]).unwrap());
        g.value(g.bilinear_sample(feat, c).unwrap()).data()[0]
    };
    assert_eq!(at(0.0, 1.0), 1.0);
    assert_eq!(at(0.0, 0.5), 0.5);
    assert_eq!(at(-5.0, -5.0), 0.0);
}

fn conv_linear(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    g.value(g.conv2d(g.input(x), g.input(w), None, 1, 1).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_output_shape_is_pure(c in 1usize..4, o in 1usize..4, h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, pad in 0usize..3) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(&[c, h, w]));
        let wt = g.input(&Tensor::zeros(&[o, c, k, k]));
        let out = g.conv2d(x, wt, None, stride, pad).unwrap();
        prop_assert_eq!(g.shape(out), vec![o, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = random(&[2, 5, 6], seed);
        let y = random(&[2, 5, 6], seed + 1);
        let w = random(&[3, 2, 3, 3], seed + 2);
        let mix = Tensor::from_fn(&[2, 5, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv_linear(&mix, &w);
        let cx = conv_linear(&x, &w);
        let cy = conv_linear(&y, &w);
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one(m in 1usize..6, n in 1usize..40, seed in 0u64..1000, scale in 0.1f64..500.0) {
        let t = random(&[m, n], seed).map(|v| v * scale);
        let g = Graph::<f64>::new();
        let s = g.value(g.softmax_rows(g.input(&t)).unwrap());
        for row in s.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_shape_is_pure(m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let g = Graph::<f32>::new();
        let out = g.matmul(g.input(&Tensor::zeros(&[m, k])), g.input(&Tensor::zeros(&[k, n]))).unwrap();
        prop_assert_eq!(g.shape(out), vec![m, n]);
    }
}

#[test]
fn forward_is_deterministic() {
    let x = random(&[2, 6, 6], 3).cast::<f32>();
    let w = random(&[4, 2, 3, 3], 4).cast::<f32>();
    let run = || {
        let g = Graph::new();
        g.value(g.conv2d(g.input(&x), g.input(&w), None, 1, 1).unwrap())
    };
    assert_eq!(run().data(), run().data());
}
