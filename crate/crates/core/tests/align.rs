//! Deformable convolution and alignment blocks against loop oracles and finite differences.

use dfres_core::align::{AlignChain, AlignMode, DeltaDfResBlock, DfResBlock, OffsetMode, OFFSET_CHANNELS};
use dfres_core::gradcheck::gradcheck;
use dfres_core::layers::{Bound, ParamSpec};
use dfres_core::model::NetworkConfig;
use dfres_core::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Bilinear read with zeros outside the map.
fn sample(x: &Tensor<f64>, c: usize, y: f64, xx: f64) -> f64 {
    let [_, h, w] = x.shape()[..] else { panic!() };
    let (y0, x0) = (y.floor(), xx.floor());
    let (ly, lx) = (y - y0, xx - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - ly), (1.0, ly)] {
        for (dx, wx) in [(0.0, 1.0 - lx), (1.0, lx)] {
            let (yy, xi) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && xi >= 0.0 && (yy as usize) < h && (xi as usize) < w {
                acc += wy * wx * x.data()[(c * h + yy as usize) * w + xi as usize];
            }
        }
    }
    acc
}

/// Direct loop deformable convolution: tap `t` of pixel `p` reads `p + (t_y, t_x) + offset`.
fn naive_deform(x: &Tensor<f64>, off: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
    let [c_in, h, w] = x.shape()[..] else { panic!() };
    let c_out = wt.shape()[0];
    let p = h * w;
    Tensor::from_fn(&[c_out, h, w], |idx| {
        let (o, i) = (idx / p, idx % p);
        let (py, px) = (i / w, i % w);
        let mut acc = b[o];
        for t in 0..9 {
            let y = py as f64 + (t / 3) as f64 - 1.0 + off.data()[2 * t * p + i];
            let xx = px as f64 + (t % 3) as f64 - 1.0 + off.data()[(2 * t + 1) * p + i];
            for c in 0..c_in {
                acc += wt.data()[(o * c_in + c) * 9 + t] * sample(x, c, y, xx);
            }
        }
        acc
    })
}

fn deform(x: &Tensor<f64>, off: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let out = g.deform_conv2d(g.input(x), g.input(off), g.input(wt), Some(g.input(b))).unwrap();
    g.value(out)
}

fn conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    g.value(g.conv2d(g.input(x), g.input(wt), Some(g.input(b)), 1, 1).unwrap())
}

#[test]
fn zero_offsets_match_conv_over_20_draws() {
    for draw in 0..20u64 {
        let (c, o, h, w) = (1 + draw as usize % 3, 1 + draw as usize % 4, 3 + draw as usize % 5, 4 + draw as usize % 3);
        let x = random(&[c, h, w], 100 + draw, 1.0).cast::<f32>();
        let wt = random(&[o, c, 3, 3], 200 + draw, 1.0).cast::<f32>();
        let b = random(&[o], 300 + draw, 1.0).cast::<f32>();
        let g = Graph::<f32>::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&wt), g.input(&b));
        let zero = g.input(&Tensor::zeros(&[OFFSET_CHANNELS, h, w]));
        let d = g.value(g.deform_conv2d(xv, zero, wv, Some(bv)).unwrap());
        let r = g.value(g.conv2d(xv, wv, Some(bv), 1, 1).unwrap());
        let err = d.max_abs_diff(&r).unwrap();
        assert!(err <= 1e-6, "draw {draw}: max deviation {err:e}");
    }
}

#[test]
fn integer_shift_reads_the_neighbouring_pixel() {
    // Every tap displaced by (0, +1) equals a regular conv over the input shifted left by one column,
    // away from column 0 where the oracle's left tap falls into padding.
    let (c, h, w) = (2, 4, 5);
    let x = random(&[c, h, w], 1, 1.0);
    let wt = random(&[3, c, 3, 3], 2, 1.0);
    let b = random(&[3], 3, 1.0);
    let off = Tensor::from_fn(&[OFFSET_CHANNELS, h, w], |i| if (i / (h * w)) % 2 == 1 { 1.0 } else { 0.0 });
    let shifted = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        let (y, xx) = (r / w, r % w);
        if xx + 1 < w {
            x.data()[(ch * h + y) * w + xx + 1]
        } else {
            0.0
        }
    });
    let (d, r) = (deform(&x, &off, &wt, &b), conv(&shifted, &wt, &b));
    for (i, (p, q)) in d.data().iter().zip(r.data()).enumerate() {
        if i % w != 0 {
            assert!((p - q).abs() < 1e-12, "index {i}: {p} vs {q}");
        }
    }
}

#[test]
fn fractional_offsets_match_loop_oracle() {
    let (c, h, w) = (3, 5, 6);
    let x = random(&[c, h, w], 4, 1.0);
    let wt = random(&[2, c, 3, 3], 5, 1.0);
    let b = random(&[2], 6, 1.0);
    // Large enough to push some taps off the map.
    let off = random(&[OFFSET_CHANNELS, h, w], 7, 2.5);
    let err = deform(&x, &off, &wt, &b).max_abs_diff(&naive_deform(&x, &off, &wt, b.data())).unwrap();
    assert!(err < 1e-12, "{err:e}");
}

/// Random tensors for `specs`; offset-estimation weights get `offset_scale` so offsets are off-lattice.
fn random_params(specs: &[ParamSpec], seed: u64, offset_scale: f64) -> Vec<Tensor<f64>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let scale = if s.name.contains("offset") { offset_scale } else { 0.5 };
            random(&s.shape, seed + i as u64, scale)
        })
        .collect()
}

fn bound(specs: &[ParamSpec], vars: &[Var]) -> Bound {
    let mut b = Bound::default();
    for (s, &v) in specs.iter().zip(vars) {
        b.insert(s.name.clone(), v);
    }
    b
}

#[test]
fn gradcheck_deform_conv_and_blocks() {
    let (c, h, w) = (2, 3, 4);
    let eps = 1e-6;
    let tol = 1e-4;
    let deform_err = gradcheck(
        &[random(&[c, h, w], 10, 1.0), random(&[OFFSET_CHANNELS, h, w], 11, 1.3), random(&[2, c, 3, 3], 12, 1.0), random(&[2], 13, 1.0)],
        eps,
        |g, v| g.deform_conv2d(v[0], v[1], v[2], Some(v[3])),
    )
    .unwrap();
    assert!(deform_err <= tol, "deform_conv2d: {deform_err:e}");

    let feats = [random(&[c, h, w], 20, 1.0), random(&[c, h, w], 21, 1.0)];
    for mode in [AlignMode::DfRes, AlignMode::RegularOffsets, AlignMode::DeltaDfRes] {
        let blocks = if mode == AlignMode::DeltaDfRes { 2 } else { 1 };
        let specs = AlignChain::specs("a", c, blocks, mode);
        let mut inputs = feats.to_vec();
        inputs.extend(random_params(&specs, 30, 0.3));
        let err = gradcheck(&inputs, eps, |g, v| {
            let chain = AlignChain::bind(&bound(&specs, &v[2..]), "a", blocks, mode)?;
            chain.forward(g, v[0], v[1])
        })
        .unwrap();
        assert!(err <= tol, "{mode}: relative error {err:e}");
    }
}

#[test]
fn zero_offset_dfres_block_is_a_residual_conv_block() {
    let (c, h, w) = (2, 4, 4);
    let specs = DfResBlock::specs("b", c, OffsetMode::DfRes);
    let mut params = random_params(&specs, 40, 0.3);
    for (s, t) in specs.iter().zip(params.iter_mut()) {
        if s.name.contains("offset") {
            *t = Tensor::zeros(&s.shape);
        }
    }
    let reference = random(&[c, h, w], 41, 1.0);
    let support = random(&[c, h, w], 42, 1.0);
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t)).collect();
    let block = DfResBlock::bind(&bound(&specs, &vars), "b", OffsetMode::DfRes).unwrap();
    let (r, s) = (g.input(&reference), g.input(&support));
    let out = g.value(block.forward(&g, r, s).unwrap());

    let get = |n: &str| params[specs.iter().position(|s| s.name == n).unwrap()].clone();
    let mid = conv(&support, &get("b.deform1.weight"), &get("b.deform1.bias")).map(|v| if v > 0.0 { v } else { 0.1 * v });
    let y = conv(&mid, &get("b.deform2.weight"), &get("b.deform2.bias"));
    let expected = Tensor::from_fn(support.shape(), |i| support.data()[i] + y.data()[i]);
    assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
}

#[test]
fn delta_chain_accumulates_offsets() {
    let (c, h, w) = (2, 3, 3);
    let specs = AlignChain::specs("d", c, 2, AlignMode::DeltaDfRes);
    let params = random_params(&specs, 50, 0.3);
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t)).collect();
    let b = bound(&specs, &vars);
    let chain = AlignChain::bind(&b, "d", 2, AlignMode::DeltaDfRes).unwrap();
    let (r, s) = (g.input(&random(&[c, h, w], 51, 1.0)), g.input(&random(&[c, h, w], 52, 1.0)));
    let (out, trace) = chain.forward_traced(&g, r, s).unwrap();
    assert_eq!(trace.len(), 2);

    // Recompute block by block: the second block starts from the first block's offsets.
    let b0 = DeltaDfResBlock::bind(&b, "d.0").unwrap();
    let b1 = DeltaDfResBlock::bind(&b, "d.1").unwrap();
    let zero = g.input(&Tensor::zeros(&[OFFSET_CHANNELS, h, w]));
    let (f0, o0) = b0.forward(&g, r, s, zero).unwrap();
    let (f1, o1) = b1.forward(&g, r, f0, o0).unwrap();
    let delta1 = g.value(g.sub(o1, o0).unwrap());
    assert!(delta1.data().iter().any(|v| v.abs() > 1e-3), "second block adds a nonzero delta");
    assert_eq!(g.value(trace[0]), g.value(o0));
    assert_eq!(g.value(trace[1]), g.value(o1));
    assert_eq!(g.value(out), g.value(f1));
}

#[test]
fn delta_dfres_has_fewer_parameters_than_dfres() {
    let count = |mode| {
        let cfg = NetworkConfig { align_mode: mode, ..NetworkConfig::default() };
        cfg.param_specs().iter().map(|s| s.numel()).sum::<usize>()
    };
    let (dfres, delta) = (count(AlignMode::DfRes), count(AlignMode::DeltaDfRes));
    assert!(delta < dfres, "delta {delta} vs dfres {dfres}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deform_is_linear_in_input(seed in 0u64..500, a in -2.0f64..2.0) {
        let (c, h, w) = (2, 4, 5);
        let x = random(&[c, h, w], seed, 1.0);
        let y = random(&[c, h, w], seed + 1, 1.0);
        let off = random(&[OFFSET_CHANNELS, h, w], seed + 2, 1.5);
        let wt = random(&[2, c, 3, 3], seed + 3, 1.0);
        let zero_b = Tensor::zeros(&[2]);
        let mix = Tensor::from_fn(&[c, h, w], |i| a * x.data()[i] + y.data()[i]);
        let lhs = deform(&mix, &off, &wt, &zero_b);
        let (dx, dy) = (deform(&x, &off, &wt, &zero_b), deform(&y, &off, &wt, &zero_b));
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * dx.data()[i] + dy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn far_offsets_read_only_zeros(seed in 0u64..500, shift in 10.0f64..50.0) {
        let (c, h, w) = (2, 3, 4);
        let x = random(&[c, h, w], seed, 1.0);
        let wt = random(&[2, c, 3, 3], seed + 1, 1.0);
        let b = random(&[2], seed + 2, 1.0);
        let off = Tensor::full(&[OFFSET_CHANNELS, h, w], shift);
        let out = deform(&x, &off, &wt, &b);
        for (i, v) in out.data().iter().enumerate() {
            prop_assert_eq!(*v, b.data()[i / (h * w)]);
        }
    }
}
