use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdaf_core::kernels::{
    avg_pool2_backward, avg_pool2_forward, conv2d_backward, conv2d_forward, deconv2d_backward,
    deconv2d_forward, max_pool2_forward, upsample_nearest2_backward, upsample_nearest2_forward,
};
use tdaf_core::Tensor;

fn random(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Direct seven-loop convolution.
fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: usize, p: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims();
    let [co, _, k, _] = w.dims();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * s + ky) as isize - p as isize;
                                let ix = (xx * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(b_, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, co, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution; weight is `[Cin, Cout, k, k]`.
fn deconv_naive(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.dims();
    let [_, co, k, _] = w.dims();
    let oh = (h - 1) * s + k - 2 * p;
    let ow = (wd - 1) * s + k - 2 * p;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.at(b, c, y, xx);
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ty = (y * s + ky) as isize - p as isize;
                                let tx = (xx * s + kx) as isize - p as isize;
                                if ty >= 0 && tx >= 0 && (ty as usize) < oh && (tx as usize) < ow {
                                    out[((b * co + o) * oh + ty as usize) * ow + tx as usize] +=
                                        v * w.at(c, o, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, co, oh, ow], out).unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.dims(), b.dims());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "entry {i}: {x} vs {y}");
    }
}

#[test]
fn conv_all_ones_stride_two() {
    let x = Tensor::full([1, 1, 4, 4], 1.0f64);
    let w = Tensor::full([1, 1, 3, 3], 1.0f64);
    let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.dims(), [1, 1, 2, 2]);
    assert_eq!(y.data(), &[4.0, 6.0, 6.0, 9.0]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(ci, co, h, k, s, p) in &[
        (3, 4, 7, 3, 1, 1),
        (2, 5, 8, 3, 2, 1),
        (4, 2, 5, 1, 1, 0),
        (3, 3, 6, 1, 2, 0),
        (1, 2, 9, 5, 2, 2),
    ] {
        let x = random(&mut rng, [2, ci, h, h + 1]);
        let w = random(&mut rng, [co, ci, k, k]);
        let b: Vec<f64> = (0..co).map(|i| i as f64 * 0.1).collect();
        let bt = Tensor::new([1, co, 1, 1], b.clone()).unwrap();
        let fast = conv2d_forward(&x, &w, Some(&bt), s, p).unwrap();
        assert_close(&fast, &conv_naive(&x, &w, Some(&b), s, p), 1e-12);
    }
}

#[test]
fn deconv_matches_scatter_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(ci, co, h) in &[(3, 2, 4), (1, 1, 1), (4, 6, 3)] {
        let x = random(&mut rng, [2, ci, h, h + 2]);
        let w = random(&mut rng, [ci, co, 4, 4]);
        let fast = deconv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(fast.height(), 2 * h);
        assert_close(&fast, &deconv_naive(&x, &w, 2, 1), 1e-12);
    }
}

#[test]
fn deconv_is_conv_adjoint() {
    // <conv(y; W), x> == <y, deconv(x; W)> with the same weight tensor
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (cbig, csmall, h) = (3, 5, 4);
    let w = random(&mut rng, [csmall, cbig, 4, 4]);
    let x = random(&mut rng, [2, csmall, h, h]);
    let y = random(&mut rng, [2, cbig, 2 * h, 2 * h]);
    let conv_y = conv2d_forward(&y, &w, None, 2, 1).unwrap();
    let deconv_x = deconv2d_forward(&x, &w, None, 2, 1).unwrap();
    let lhs = conv_y.dot(&x);
    let rhs = y.dot(&deconv_x);
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn conv_backward_is_adjoint_of_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&mut rng, [2, 3, 6, 6]);
    let w = random(&mut rng, [4, 3, 3, 3]);
    let g = random(&mut rng, [2, 4, 3, 3]);
    let (dx, dw, db) = conv2d_backward(&x, &w, 2, 1, &g, true).unwrap();
    let dx = dx.unwrap();
    // forward is bilinear: <conv(x), g> == <x, dx> == <w, dw>
    let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
    let e = y.dot(&g);
    assert!((e - x.dot(&dx)).abs() < 1e-10);
    assert!((e - w.dot(&dw)).abs() < 1e-10);
    let sums: Vec<f64> = (0..4)
        .map(|o| (0..2).map(|n| (0..9).map(|i| g.data()[(n * 4 + o) * 9 + i]).sum::<f64>()).sum())
        .collect();
    for (a, b) in db.iter().zip(&sums) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn deconv_backward_is_adjoint_of_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, [2, 3, 3, 4]);
    let w = random(&mut rng, [3, 2, 4, 4]);
    let g = random(&mut rng, [2, 2, 6, 8]);
    let (dx, dw, _) = deconv2d_backward(&x, &w, 2, 1, &g).unwrap();
    let e = deconv2d_forward(&x, &w, None, 2, 1).unwrap().dot(&g);
    assert!((e - x.dot(&dx)).abs() < 1e-10);
    assert!((e - w.dot(&dw)).abs() < 1e-10);
}

#[test]
fn pooling_and_upsampling_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, [2, 3, 4, 6]);
    let g = random(&mut rng, [2, 3, 2, 3]);
    let e = avg_pool2_forward(&x).unwrap().dot(&g);
    assert!((e - x.dot(&avg_pool2_backward(x.dims(), &g))).abs() < 1e-12);
    let up = upsample_nearest2_forward(&g);
    assert_eq!(up.dims(), [2, 3, 4, 6]);
    let e2 = up.dot(&x);
    assert!((e2 - g.dot(&upsample_nearest2_backward(g.dims(), &x))).abs() < 1e-12);
}

#[test]
fn max_pool_picks_first_of_ties() {
    let x = Tensor::new([1, 1, 2, 4], vec![1.0f64, 1.0, 0.0, 2.0, 1.0, 0.5, 2.0, 2.0]).unwrap();
    let (y, arg) = max_pool2_forward(&x).unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
    assert_eq!(arg, vec![0, 3]);
}

#[test]
fn pooling_rejects_odd_extent() {
    let x = Tensor::<f64>::zeros([1, 1, 3, 4]);
    assert!(avg_pool2_forward(&x).is_err());
    assert!(max_pool2_forward(&x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_shapes_and_values(
        h in 1usize..=16, w in 1usize..=16, ci in 1usize..4, co in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]), s in 1usize..=2, seed in any::<u64>(),
    ) {
        let p = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [1, ci, h, w]);
        let wt = random(&mut rng, [co, ci, k, k]);
        let y = conv2d_forward(&x, &wt, None, s, p).unwrap();
        prop_assert_eq!(y.dims(), [1, co, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1]);
        let oracle = conv_naive(&x, &wt, None, s, p);
        for (a, b) in y.data().iter().zip(oracle.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_exactly_doubles(h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, [1, 2, h, w]);
        let wt = random(&mut rng, [2, 3, 4, 4]);
        let y = deconv2d_forward(&x, &wt, None, 2, 1).unwrap();
        prop_assert_eq!(y.dims(), [1, 3, 2 * h, 2 * w]);
        let oracle = deconv_naive(&x, &wt, 2, 1);
        for (a, b) in y.data().iter().zip(oracle.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
