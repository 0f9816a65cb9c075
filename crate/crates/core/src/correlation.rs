//! All-pairs cost volume, its pooled pyramid, and radius-bounded bilinear
//! lookup at flow-displaced positions.
//!
//! Volumes are batched as `[N, H, W, H_l, W_l]`: the first two spatial axes
//! index the source pixel in frame 1, the last two the target pixel in
//! frame 2 at pyramid level `l`.

use cascade_tensor::{gemm, kernels, CustomOp, Graph, Mat, Real, Tensor, Var};

use crate::error::{shape_err, Result};

/// Pooled correlation volumes, level 0 first.
#[derive(Clone, Debug)]
pub struct CorrelationPyramid<T: Real> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> CorrelationPyramid<T> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// `(N, H, W)` of the source grid.
    pub fn source_dims(&self) -> (usize, usize, usize) {
        let s = self.levels[0].shape();
        (s[0], s[1], s[2])
    }
}

/// Number of channels produced by a lookup over `levels` levels.
pub fn lookup_channels(levels: usize, radius: usize) -> usize {
    let k = 2 * radius + 1;
    levels * k * k
}

fn check_features<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<()> {
    if f1.rank() != 4 || f1.shape() != f2.shape() {
        return shape_err(format!("cost volume needs equal [N, D, H, W] features, got {:?} and {:?}", f1.shape(), f2.shape()));
    }
    Ok(())
}

fn cost_volume_forward<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Tensor<T> {
    let (n, d, h, w) = f1.dims4();
    let hw = h * w;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); n * hw * hw];
    for b in 0..n {
        let a = &f1.data()[b * d * hw..(b + 1) * d * hw];
        let c = &f2.data()[b * d * hw..(b + 1) * d * hw];
        gemm(scale, Mat::new(a, d, hw).t(), Mat::new(c, d, hw), T::zero(), &mut out[b * hw * hw..(b + 1) * hw * hw]);
    }
    Tensor::from_vec(&[n, h, w, h, w], out)
}

/// Level-0 volume: scaled dot products `<f1(p), f2(q)> / sqrt(D)` for all pixel pairs.
pub fn build_cost_volume<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
    check_features(f1, f2)?;
    Ok(cost_volume_forward(f1, f2))
}

fn check_levels(shape: &[usize], levels: usize) -> Result<()> {
    if levels == 0 {
        return shape_err("a correlation pyramid needs at least one level");
    }
    let f = 1usize << (levels - 1);
    if shape.len() != 5 || !shape[3].is_multiple_of(f) || !shape[4].is_multiple_of(f) {
        return shape_err(format!("volume {shape:?} cannot be pooled into {levels} levels"));
    }
    Ok(())
}

/// Repeated 2x2 average pooling over the target axes.
pub fn build_pyramid<T: Real>(volume: Tensor<T>, levels: usize) -> Result<CorrelationPyramid<T>> {
    check_levels(volume.shape(), levels)?;
    let mut out = vec![volume];
    for _ in 1..levels {
        let next = kernels::avg_pool2_forward(out.last().unwrap());
        out.push(next);
    }
    Ok(CorrelationPyramid { levels: out })
}

/// Bilinear taps of one sample point on an `h x w` map: `(index, weight)`
/// for in-domain corners plus the x/y derivative weights of each corner.
struct Taps {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    dx: [f64; 4],
    dy: [f64; 4],
}

fn taps(cx: f64, cy: f64, h: usize, w: usize) -> Taps {
    let x0 = cx.floor();
    let y0 = cy.floor();
    let fx = cx - x0;
    let fy = cy - y0;
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    let mut t = Taps { idx: [None; 4], w: [0.0; 4], dx: [0.0; 4], dy: [0.0; 4] };
    for (k, &(ox, oy)) in corners.iter().enumerate() {
        let x = x0 + ox;
        let y = y0 + oy;
        let wx = if ox == 0.0 { 1.0 - fx } else { fx };
        let wy = if oy == 0.0 { 1.0 - fy } else { fy };
        let sx = if ox == 0.0 { -1.0 } else { 1.0 };
        let sy = if oy == 0.0 { -1.0 } else { 1.0 };
        t.w[k] = wx * wy;
        t.dx[k] = sx * wy;
        t.dy[k] = sy * wx;
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            t.idx[k] = Some(y as usize * w + x as usize);
        }
    }
    t
}

/// Iterates `(level, channel, source pixel, taps)` for every lookup sample.
fn for_each_sample<T: Real>(
    levels: &[&Tensor<T>],
    flow: &Tensor<T>,
    radius: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, &Taps, f64),
) {
    let (n, _, h, w) = flow.dims4();
    let hw = h * w;
    let k = 2 * radius + 1;
    let r = radius as f64;
    for (l, vol) in levels.iter().enumerate() {
        let (hl, wl) = (vol.dim(3), vol.dim(4));
        let inv = 1.0 / (1u64 << l) as f64;
        for b in 0..n {
            let fl = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
            for p in 0..hw {
                let (i, j) = (p / w, p % w);
                let cx0 = (j as f64 + fl[p].as_f64()) * inv;
                let cy0 = (i as f64 + fl[hw + p].as_f64()) * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        let t = taps(cx0 + dx as f64 - r, cy0 + dy as f64 - r, hl, wl);
                        let c = l * k * k + dy * k + dx;
                        f(l, b, c, p, (b * hw + p) * hl * wl, &t, inv);
                    }
                }
            }
        }
    }
}

fn lookup_forward<T: Real>(levels: &[&Tensor<T>], flow: &Tensor<T>, radius: usize, channels: usize) -> Tensor<T> {
    let (n, _, h, w) = flow.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); n * channels * hw];
    for_each_sample(levels, flow, radius, |l, b, c, p, base, t, _| {
        let map = &levels[l].data()[base..];
        let mut acc = 0.0;
        for q in 0..4 {
            if let Some(i) = t.idx[q] {
                acc += t.w[q] * map[i].as_f64();
            }
        }
        out[(b * channels + c) * hw + p] = T::of(acc);
    });
    Tensor::from_vec(&[n, channels, h, w], out)
}

fn check_lookup<T: Real>(levels: &[&Tensor<T>], flow: &[usize]) -> Result<()> {
    let s = levels[0].shape();
    if flow.len() != 4 || flow[1] != 2 || flow[0] != s[0] || flow[2] != s[1] || flow[3] != s[2] {
        return shape_err(format!("flow {flow:?} does not match correlation volume {s:?}"));
    }
    Ok(())
}

/// Samples every level at `(x + flow(x)) / 2^l + delta` for all integer
/// offsets with `|delta|_inf <= radius`. Output is `[N, L * (2r+1)^2, H, W]`,
/// level-major, then offset row, then offset column.
pub fn lookup<T: Real>(pyr: &CorrelationPyramid<T>, flow: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    let levels: Vec<&Tensor<T>> = pyr.levels.iter().collect();
    check_lookup(&levels, flow.shape())?;
    Ok(lookup_forward(&levels, flow, radius, lookup_channels(levels.len(), radius)))
}

struct CostVolumeOp;

impl<T: Real> CustomOp<T> for CostVolumeOp {
    fn name(&self) -> &str {
        "cost_volume"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (f1, f2) = (inputs[0], inputs[1]);
        let (n, d, h, w) = f1.dims4();
        let hw = h * w;
        let scale = T::one() / T::of(d as f64).sqrt();
        let mut d1 = needs[0].then(|| vec![T::zero(); f1.len()]);
        let mut d2 = needs[1].then(|| vec![T::zero(); f2.len()]);
        for b in 0..n {
            let a = &f1.data()[b * d * hw..(b + 1) * d * hw];
            let c = &f2.data()[b * d * hw..(b + 1) * d * hw];
            let gv = &grad.data()[b * hw * hw..(b + 1) * hw * hw];
            // C = s * A^T B  =>  dA = s * B dC^T,  dB = s * A dC
            if let Some(d1) = d1.as_mut() {
                gemm(scale, Mat::new(c, d, hw), Mat::new(gv, hw, hw).t(), T::zero(), &mut d1[b * d * hw..(b + 1) * d * hw]);
            }
            if let Some(d2) = d2.as_mut() {
                gemm(scale, Mat::new(a, d, hw), Mat::new(gv, hw, hw), T::zero(), &mut d2[b * d * hw..(b + 1) * d * hw]);
            }
        }
        vec![d1.map(|v| Tensor::from_vec(f1.shape(), v)), d2.map(|v| Tensor::from_vec(f2.shape(), v))]
    }
}

/// Differentiable cost volume on a graph.
pub fn cost_volume_var<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<Var> {
    check_features(g.value(f1), g.value(f2))?;
    let out = cost_volume_forward(g.value(f1), g.value(f2));
    Ok(g.custom(&[f1, f2], out, Box::new(CostVolumeOp)))
}

/// Differentiable pyramid on a graph, level 0 first.
pub fn pyramid_vars<T: Real>(g: &mut Graph<T>, volume: Var, levels: usize) -> Result<Vec<Var>> {
    check_levels(g.shape(volume), levels)?;
    let mut out = vec![volume];
    for _ in 1..levels {
        let next = g.avg_pool2(*out.last().unwrap());
        out.push(next);
    }
    Ok(out)
}

struct LookupOp {
    radius: usize,
    levels: usize,
}

impl<T: Real> CustomOp<T> for LookupOp {
    fn name(&self) -> &str {
        "lookup"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let levels = &inputs[..self.levels];
        let flow = inputs[self.levels];
        let (_, _, h, w) = flow.dims4();
        let hw = h * w;
        let channels = grad.dim(1);
        let mut dvol: Vec<Option<Vec<T>>> = (0..self.levels).map(|l| needs[l].then(|| vec![T::zero(); levels[l].len()])).collect();
        let need_flow = needs[self.levels];
        let mut dflow = vec![T::zero(); if need_flow { flow.len() } else { 0 }];
        for_each_sample(levels, flow, self.radius, |l, b, c, p, base, t, inv| {
            let gv = grad.data()[(b * channels + c) * hw + p];
            if gv == T::zero() {
                return;
            }
            if let Some(dv) = dvol[l].as_mut() {
                for q in 0..4 {
                    if let Some(i) = t.idx[q] {
                        dv[base + i] += gv * T::of(t.w[q]);
                    }
                }
            }
            if need_flow {
                let map = &levels[l].data()[base..];
                let (mut gx, mut gy) = (0.0, 0.0);
                for q in 0..4 {
                    if let Some(i) = t.idx[q] {
                        let v = map[i].as_f64();
                        gx += t.dx[q] * v;
                        gy += t.dy[q] * v;
                    }
                }
                dflow[b * 2 * hw + p] += gv * T::of(gx * inv);
                dflow[b * 2 * hw + hw + p] += gv * T::of(gy * inv);
            }
        });
        let mut out: Vec<Option<Tensor<T>>> =
            dvol.into_iter().zip(levels).map(|(d, v)| d.map(|d| Tensor::from_vec(v.shape(), d))).collect();
        out.push(need_flow.then(|| Tensor::from_vec(flow.shape(), dflow)));
        out
    }
}

/// Differentiable lookup. The output has `channels` channels; any beyond
/// `lookup_channels(levels.len(), radius)` are zero, which lets scales with
/// fewer levels feed a motion encoder of fixed width.
pub fn lookup_var<T: Real>(g: &mut Graph<T>, levels: &[Var], flow: Var, radius: usize, channels: usize) -> Result<Var> {
    let used = lookup_channels(levels.len(), radius);
    if channels < used {
        return shape_err(format!("lookup needs {used} channels, only {channels} available"));
    }
    let vals: Vec<&Tensor<T>> = levels.iter().map(|&v| g.value(v)).collect();
    check_lookup(&vals, g.shape(flow))?;
    let out = lookup_forward(&vals, g.value(flow), radius, channels);
    let mut inputs = levels.to_vec();
    inputs.push(flow);
    Ok(g.custom(&inputs, out, Box::new(LookupOp { radius, levels: levels.len() })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cascade_tensor::gradcheck::{numeric_gradient, relative_error};

    fn seq(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn ones_give_scaled_channel_count() {
        let f = Tensor::full(&[1, 4, 3, 3], 1.0f64);
        let v = build_cost_volume(&f, &f).unwrap();
        assert!(v.data().iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let z = build_cost_volume(&f, &Tensor::zeros(&[1, 4, 3, 3])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(build_cost_volume(&f, &Tensor::zeros(&[1, 4, 3, 2])).is_err());
    }

    #[test]
    fn pooling_example_and_divisibility() {
        let v = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let p = build_pyramid(v, 2).unwrap();
        assert_eq!(p.levels[1].data(), &[2.5]);
        let odd = Tensor::<f64>::zeros(&[1, 3, 3, 3, 3]);
        assert!(build_pyramid(odd.clone(), 2).is_err());
        assert_eq!(build_pyramid(odd, 1).unwrap().num_levels(), 1);
    }

    #[test]
    fn zero_flow_radius_zero_reads_diagonal() {
        let f1 = seq(&[1, 3, 4, 5], 1);
        let f2 = seq(&[1, 3, 4, 5], 2);
        let v = build_cost_volume(&f1, &f2).unwrap();
        let p = build_pyramid(v.clone(), 1).unwrap();
        let out = lookup(&p, &Tensor::zeros(&[1, 2, 4, 5]), 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 5]);
        for i in 0..4 {
            for j in 0..5 {
                let diag = v.data()[((i * 5 + j) * 4 + i) * 5 + j];
                assert_eq!(out.at4(0, 0, i, j), diag);
            }
        }
        let p2 = build_pyramid(build_cost_volume(&seq(&[1, 3, 8, 8], 3), &seq(&[1, 3, 8, 8], 4)).unwrap(), 2).unwrap();
        assert_eq!(lookup(&p2, &Tensor::zeros(&[1, 2, 8, 8]), 4).unwrap().dim(1), 162);
    }

    #[test]
    fn lookup_gradients_match_finite_differences() {
        let f1 = seq(&[2, 3, 4, 4], 5);
        let f2 = seq(&[2, 3, 4, 4], 6);
        // offsets keep every sample point off the integer lattice of both levels
        let flow = seq(&[2, 2, 4, 4], 7).map(|x| 0.9 * x + 0.13);
        let r = seq(&[2, 2 * 9 + 3, 4, 4], 8);
        let eval = |g: &mut Graph<f64>, a: Var, b: Var, fl: Var| {
            let v = cost_volume_var(g, a, b).unwrap();
            let levels = pyramid_vars(g, v, 2).unwrap();
            let out = lookup_var(g, &levels, fl, 1, 21).unwrap();
            let rv = g.constant(r.clone());
            let p = g.mul(out, rv);
            g.sum(p)
        };
        let mut g = Graph::new();
        let (a, b, fl) = (g.leaf(f1.clone()), g.leaf(f2.clone()), g.leaf(flow.clone()));
        let loss = eval(&mut g, a, b, fl);
        let grads = g.backward(loss);
        let scalar = |x1: &Tensor<f64>, x2: &Tensor<f64>, fw: &Tensor<f64>| {
            let mut g = Graph::new();
            let (a, b, fl) = (g.constant(x1.clone()), g.constant(x2.clone()), g.constant(fw.clone()));
            let l = eval(&mut g, a, b, fl);
            g.value(l).data()[0]
        };
        let nf = numeric_gradient(|t| scalar(&f1, &f2, t), &flow, 1e-6);
        assert!(relative_error(grads.get(fl).unwrap(), &nf) < 1e-6);
        let n1 = numeric_gradient(|t| scalar(t, &f2, &flow), &f1, 1e-6);
        assert!(relative_error(grads.get(a).unwrap(), &n1) < 1e-7);
        let n2 = numeric_gradient(|t| scalar(&f1, t, &flow), &f2, 1e-6);
        assert!(relative_error(grads.get(b).unwrap(), &n2) < 1e-7);
    }

    #[test]
    fn padded_channels_are_zero() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(seq(&[1, 2, 2, 2, 2], 9));
        let f = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let out = lookup_var(&mut g, &[v], f, 0, 3).unwrap();
        assert!(g.value(out).data()[4..].iter().all(|&x| x == 0.0));
        assert!(lookup_var(&mut g, &[v], f, 1, 3).is_err());
    }
}
