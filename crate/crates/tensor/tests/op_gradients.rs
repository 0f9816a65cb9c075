use cascade_tensor::gradcheck::{numeric_gradient, relative_error};
use cascade_tensor::{Graph, Tensor, Var};

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.next())
    }
}

/// Checks d(sum(op(x) * r))/dx against central differences.
fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let mut rng = Lcg(seed);
    let x = rng.tensor(shape);
    let probe = {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = op(&mut g, v);
        g.value(out).shape().to_vec()
    };
    let r = rng.tensor(&probe);
    let eval = |g: &mut Graph<f64>, xv: Var| {
        let y = op(g, xv);
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv);
        g.sum(p)
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = eval(&mut g, xv);
    let grads = g.backward(loss);
    let analytic = grads.get(xv).unwrap().clone();
    let numeric = numeric_gradient(
        |t| {
            let mut g = Graph::new();
            let xv = g.constant(t.clone());
            let l = eval(&mut g, xv);
            g.value(l).data()[0]
        },
        &x,
        1e-6,
    );
    relative_error(&analytic, &numeric)
}

#[test]
fn conv2d_gradients_all_inputs() {
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
        let mut rng = Lcg(7 + stride as u64 + k as u64);
        let w = rng.tensor(&[4, 3, k, k]);
        let b = rng.tensor(&[4]);
        let err = check_unary(&[2, 3, 8, 8], 11, |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            g.conv2d(x, wv, Some(bv), stride, pad)
        });
        assert!(err < 1e-7, "conv input grad stride {stride} pad {pad} k {k}: {err}");

        let x = rng.tensor(&[2, 3, 8, 8]);
        let err = check_unary(&[4, 3, k, k], 13, |g, wv| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            g.conv2d(xv, wv, Some(bv), stride, pad)
        });
        assert!(err < 1e-7, "conv weight grad stride {stride} pad {pad} k {k}: {err}");

        let err = check_unary(&[4], 17, |g, bv| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            g.conv2d(xv, wv, Some(bv), stride, pad)
        });
        assert!(err < 1e-7, "conv bias grad: {err}");
    }
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = Lcg(3);
    let x = rng.tensor(&[1, 2, 5, 6]);
    let w = rng.tensor(&[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1);
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                acc += x.at4(0, c, iy as usize, ix as usize) * w.at4(o, c, ky, kx);
                            }
                        }
                    }
                }
                assert!((y.at4(0, o, oy, ox) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn elementwise_gradients() {
    let shape = [2, 3, 4, 4];
    assert!(check_unary(&shape, 1, |g, x| g.tanh(x)) < 1e-7);
    assert!(check_unary(&shape, 2, |g, x| g.sigmoid(x)) < 1e-7);
    assert!(check_unary(&shape, 3, |g, x| g.relu(x)) < 1e-7);
    assert!(check_unary(&shape, 4, |g, x| g.scale(x, -2.5)) < 1e-7);
    assert!(check_unary(&shape, 5, |g, x| {
        let y = g.mul(x, x);
        let y = g.add_scalar(y, 0.3);
        g.powf(y, 0.7)
    }) < 1e-7);
    assert!(check_unary(&shape, 6, |g, x| {
        let y = g.mul(x, x);
        let y = g.add_scalar(y, 1e-3);
        g.sqrt(y)
    }) < 1e-7);
    assert!(check_unary(&shape, 8, |g, x| {
        let t = g.tanh(x);
        let s = g.sub(x, t);
        g.add(s, x)
    }) < 1e-7);
}

#[test]
fn structural_gradients() {
    let shape = [2, 5, 4, 6];
    assert!(check_unary(&shape, 21, |g, x| g.instance_norm(x, 1e-5)) < 1e-6);
    assert!(check_unary(&shape, 22, |g, x| g.resize_bilinear(x, 8, 12)) < 1e-7);
    assert!(check_unary(&shape, 23, |g, x| g.resize_bilinear(x, 2, 3)) < 1e-7);
    assert!(check_unary(&shape, 24, |g, x| g.avg_pool2(x)) < 1e-7);
    assert!(check_unary(&shape, 25, |g, x| {
        let a = g.narrow(x, 1, 3);
        let b = g.tanh(x);
        g.concat(&[a, b, a])
    }) < 1e-7);
    assert!(check_unary(&shape, 26, |g, x| {
        let t = g.tanh(x);
        g.weighted_sum(&[(x, 0.5), (t, -1.5)])
    }) < 1e-7);
    assert!(check_unary(&shape, 27, |g, x| g.mean(x)) < 1e-7);
}

#[test]
fn shared_params_accumulate_and_detach_blocks() {
    let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0f64]);
    let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f64]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let w1 = g.param("w", &w);
    let y = g.conv2d(xv, w1, None, 1, 0);
    let w2 = g.param("w", &w);
    assert_eq!(w1, w2);
    let z = g.conv2d(y, w2, None, 1, 0); // z = w^2 x
    let d = g.detach(z);
    let total = g.add(z, d);
    let s = g.sum(total);
    let grads = g.backward(s);
    // dz/dw = 2 w x = 12; the detached copy contributes nothing
    assert!((grads.get(w1).unwrap().data()[0] - 12.0).abs() < 1e-12);
}

#[test]
fn resize_preserves_constants() {
    let x = Tensor::full(&[1, 2, 3, 5], 1.25f64);
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = g.resize_bilinear(v, 12, 20);
    assert!(g.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4();
    let (o, _, kh, kw) = w.dims4();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(b, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_sum_on_small_inputs() {
    // includes inputs narrower than the kernel, where some taps never land
    for &(h, w, k, stride, pad) in &[(2, 2, 7, 1, 3), (1, 3, 3, 1, 1), (3, 2, 7, 2, 3), (5, 4, 3, 2, 1), (2, 5, 1, 1, 0)] {
        let mut rng = Lcg(h as u64 * 31 + k as u64);
        let x = rng.tensor(&[2, 3, h, w]);
        let wt = rng.tensor(&[4, 3, k, k]);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x.clone()), g.leaf(wt.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad);
        let want = naive_conv(&x, &wt, stride, pad);
        assert!(relative_error(g.value(y), &want) < 1e-12, "{h}x{w} k{k} s{stride} p{pad}");
        let err = check_unary(&[2, 3, h, w], 3, |g, xv| {
            let wv = g.constant(wt.clone());
            g.conv2d(xv, wv, None, stride, pad)
        });
        assert!(err < 1e-7, "input grad {h}x{w} k{k}: {err}");
    }
}
