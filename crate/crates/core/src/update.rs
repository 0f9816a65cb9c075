//! The recurrent matching block shared by all scales, and the learned
//! convex x2 upsampling it drives.

use cascade_tensor::{CustomOp, Graph, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Conv, ParamStore};

/// Sub-pixels per coarse pixel times neighbours per sub-pixel.
pub const MASK_CHANNELS: usize = 4 * 9;

/// Mask logits are damped before the softmax.
const MASK_LOGIT_SCALE: f64 = 0.25;

/// Recurrent state at one scale. `flow` is `[N, 2, H, W]` in pixels of that scale.
#[derive(Clone, Copy, Debug)]
pub struct UpdateState {
    pub hidden: Var,
    pub inp: Var,
    pub flow: Var,
}

/// Result of one recurrent iteration.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: UpdateState,
    pub delta: Var,
    /// `[N, 36, H, W]` logits; channel `k * 4 + (sy * 2 + sx)` weights
    /// neighbour `k = ky * 3 + kx` of sub-pixel `(sy, sx)`.
    pub mask_logits: Var,
}

#[derive(Clone, Debug)]
struct MotionEncoder {
    corr1: Conv,
    corr2: Conv,
    flow1: Conv,
    flow2: Conv,
    fuse: Conv,
}

#[derive(Clone, Debug)]
struct ConvGru {
    z: Conv,
    r: Conv,
    q: Conv,
}

/// Motion encoder, convolutional GRU, flow head and mask head.
#[derive(Clone, Debug)]
pub struct UpdateBlock {
    motion: MotionEncoder,
    gru: ConvGru,
    flow_head: (Conv, Conv),
    mask_head: (Conv, Conv),
    corr_channels: usize,
    hidden: usize,
    input: usize,
}

impl UpdateBlock {
    pub fn new(cfg: &ModelConfig) -> Self {
        let p = |s: &str| format!("update.{s}");
        let corr_channels = cfg.corr_channels();
        let motion = MotionEncoder {
            corr1: Conv::new(p("motion.corr1"), corr_channels, cfg.corr_hidden, 1, 1),
            corr2: Conv::new(p("motion.corr2"), cfg.corr_hidden, cfg.corr_out, 3, 1),
            flow1: Conv::new(p("motion.flow1"), 2, cfg.flow_hidden, 7, 1),
            flow2: Conv::new(p("motion.flow2"), cfg.flow_hidden, cfg.flow_out, 3, 1),
            fuse: Conv::new(p("motion.fuse"), cfg.corr_out + cfg.flow_out, cfg.motion_channels - 2, 3, 1),
        };
        let hidden = cfg.hidden_channels;
        let input = cfg.input_channels();
        let gru_in = hidden + cfg.motion_channels + input;
        let gru = ConvGru {
            z: Conv::new(p("gru.z"), gru_in, hidden, 3, 1),
            r: Conv::new(p("gru.r"), gru_in, hidden, 3, 1),
            q: Conv::new(p("gru.q"), gru_in, hidden, 3, 1),
        };
        Self {
            motion,
            gru,
            flow_head: (
                Conv::new(p("flow_head.conv1"), hidden, cfg.head_channels, 3, 1),
                Conv::new(p("flow_head.conv2"), cfg.head_channels, 2, 3, 1),
            ),
            mask_head: (
                Conv::new(p("mask_head.conv1"), hidden, cfg.head_channels, 3, 1),
                Conv::new(p("mask_head.conv2"), cfg.head_channels, MASK_CHANNELS, 1, 1),
            ),
            corr_channels,
            hidden,
            input,
        }
    }

    fn convs(&self) -> [&Conv; 12] {
        let m = &self.motion;
        [
            &m.corr1,
            &m.corr2,
            &m.flow1,
            &m.flow2,
            &m.fuse,
            &self.gru.z,
            &self.gru.r,
            &self.gru.q,
            &self.flow_head.0,
            &self.flow_head.1,
            &self.mask_head.0,
            &self.mask_head.1,
        ]
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for c in self.convs() {
            c.init_uniform(store, rng);
        }
    }

    /// Splits context features into the initial hidden state (tanh) and the
    /// static recurrent input (ReLU).
    pub fn init_state<T: Real>(&self, g: &mut Graph<T>, context: Var, flow: Var) -> Result<UpdateState> {
        let c = g.shape(context);
        if c.len() != 4 || c[1] != self.hidden + self.input {
            return shape_err(format!("context has shape {c:?}, expected {} channels", self.hidden + self.input));
        }
        let h = g.narrow(context, 0, self.hidden);
        let hidden = g.tanh(h);
        let i = g.narrow(context, self.hidden, self.input);
        let inp = g.relu(i);
        Ok(UpdateState { hidden, inp, flow })
    }

    fn encode_motion<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, flow: Var, corr: Var) -> Var {
        let m = &self.motion;
        let c = m.corr1.forward(g, store, corr);
        let c = g.relu(c);
        let c = m.corr2.forward(g, store, c);
        let c = g.relu(c);
        let f = m.flow1.forward(g, store, flow);
        let f = g.relu(f);
        let f = m.flow2.forward(g, store, f);
        let f = g.relu(f);
        let cf = g.concat(&[c, f]);
        let o = m.fuse.forward(g, store, cf);
        let o = g.relu(o);
        g.concat(&[o, flow])
    }

    fn gru<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, x: Var) -> Var {
        let hx = g.concat(&[h, x]);
        let z = self.gru.z.forward(g, store, hx);
        let z = g.sigmoid(z);
        let r = self.gru.r.forward(g, store, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let rhx = g.concat(&[rh, x]);
        let q = self.gru.q.forward(g, store, rhx);
        let q = g.tanh(q);
        let d = g.sub(q, h);
        let zd = g.mul(z, d);
        g.add(h, zd)
    }

    /// Flow increment predicted from a hidden state.
    pub fn flow_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Var {
        let x = self.flow_head.0.forward(g, store, hidden);
        let x = g.relu(x);
        self.flow_head.1.forward(g, store, x)
    }

    pub fn mask_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Var {
        let x = self.mask_head.0.forward(g, store, hidden);
        let x = g.relu(x);
        let x = self.mask_head.1.forward(g, store, x);
        g.scale(x, T::of(MASK_LOGIT_SCALE))
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, state: UpdateState, corr: Var) -> Result<StepOutput> {
        let hs = g.shape(state.hidden).to_vec();
        let spatial = |s: &[usize]| (s.len() == 4).then(|| (s[0], s[2], s[3]));
        let want = spatial(&hs);
        for (what, v, c) in [("flow", state.flow, 2), ("correlation", corr, self.corr_channels), ("input", state.inp, self.input)] {
            let s = g.shape(v);
            if spatial(s) != want || s[1] != c {
                return shape_err(format!("{what} has shape {s:?}, expected {c} channels over hidden grid {hs:?}"));
            }
        }
        let motion = self.encode_motion(g, store, state.flow, corr);
        let x = g.concat(&[motion, state.inp]);
        let hidden = self.gru(g, store, state.hidden, x);
        let delta = self.flow_head(g, store, hidden);
        let flow = g.add(state.flow, delta);
        let mask_logits = self.mask_head(g, store, hidden);
        Ok(StepOutput { state: UpdateState { hidden, inp: state.inp, flow }, delta, mask_logits })
    }
}

/// Normalized convex-combination weights, `[N, 36, H, W]` in the logit layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexMask<T: Real> {
    pub weights: Tensor<T>,
}

impl<T: Real> ConvexMask<T> {
    /// Softmax over the 9 neighbours of each sub-pixel.
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        if logits.rank() != 4 || logits.dim(1) != MASK_CHANNELS {
            return shape_err(format!("mask logits must be [N, 36, H, W], got {:?}", logits.shape()));
        }
        Ok(Self { weights: softmax9(logits) })
    }

    /// Nonnegative weights summing to one (within `tol`) over each neighbourhood.
    pub fn is_valid(&self, tol: f64) -> bool {
        let (n, _, h, w) = self.weights.dims4();
        let hw = h * w;
        let d = self.weights.data();
        (0..n).all(|b| {
            (0..4).all(|s| {
                (0..hw).all(|p| {
                    let ws = (0..9).map(|k| d[(b * MASK_CHANNELS + k * 4 + s) * hw + p].as_f64());
                    let mut sum = 0.0;
                    for v in ws {
                        if v < 0.0 {
                            return false;
                        }
                        sum += v;
                    }
                    (sum - 1.0).abs() <= tol
                })
            })
        })
    }
}

fn softmax9<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, _, h, w) = logits.dims4();
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for s in 0..4 {
            for p in 0..hw {
                let idx = |k: usize| (b * MASK_CHANNELS + k * 4 + s) * hw + p;
                let m = (0..9).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..9 {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..9 {
                    out[idx(k)] /= sum;
                }
            }
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

/// Coarse neighbour of `(i, j)` at offset `(ky - 1, kx - 1)`, clamped to the grid.
#[inline]
fn neighbour(i: usize, j: usize, k: usize, h: usize, w: usize) -> usize {
    let ny = (i + k / 3).saturating_sub(1).min(h - 1);
    let nx = (j + k % 3).saturating_sub(1).min(w - 1);
    ny * w + nx
}

fn upsample_forward<T: Real>(flow: &Tensor<T>, weights: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = flow.dims4();
    let (hw, wo) = (h * w, 2 * w);
    let two = T::of(2.0);
    let mut out = vec![T::zero(); n * c * 4 * hw];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for s in 0..4 {
                    let (sy, sx) = (s / 2, s % 2);
                    let o = (2 * i + sy) * wo + 2 * j + sx;
                    for ch in 0..c {
                        let src = &flow.data()[(b * c + ch) * hw..];
                        let mut acc = T::zero();
                        for k in 0..9 {
                            acc += weights.data()[(b * MASK_CHANNELS + k * 4 + s) * hw + p] * src[neighbour(i, j, k, h, w)];
                        }
                        out[(b * c + ch) * 4 * hw + o] = two * acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)
}

fn check_upsample(flow: &[usize], mask: &[usize]) -> Result<()> {
    if flow.len() != 4 || mask.len() != 4 || mask[1] != MASK_CHANNELS || flow[0] != mask[0] || flow[2..] != mask[2..] {
        return shape_err(format!("flow {flow:?} and mask {mask:?} do not match"));
    }
    Ok(())
}

/// Each fine pixel is the mask-weighted mean of the 3x3 coarse neighbourhood
/// of its parent, multiplied by 2. Neighbours outside the grid repeat the
/// nearest border pixel, so constant fields stay exactly constant.
pub fn convex_upsample<T: Real>(flow: &Tensor<T>, mask: &ConvexMask<T>) -> Result<Tensor<T>> {
    check_upsample(flow.shape(), mask.weights.shape())?;
    Ok(upsample_forward(flow, &mask.weights))
}

struct ConvexUpsampleOp {
    weights: Tensor<f64>,
}

impl<T: Real> CustomOp<T> for ConvexUpsampleOp {
    fn name(&self) -> &str {
        "convex_upsample"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let flow = inputs[0];
        let (n, c, h, w) = flow.dims4();
        let (hw, wo) = (h * w, 2 * w);
        let wts = self.weights.data();
        let mut dflow = vec![0.0f64; flow.len()];
        let mut dlogit = vec![0.0f64; wts.len()];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    for s in 0..4 {
                        let (sy, sx) = (s / 2, s % 2);
                        let o = (2 * i + sy) * wo + 2 * j + sx;
                        let widx = |k: usize| (b * MASK_CHANNELS + k * 4 + s) * hw + p;
                        let mut dw = [0.0f64; 9];
                        for ch in 0..c {
                            let gv = 2.0 * grad.data()[(b * c + ch) * 4 * hw + o].as_f64();
                            let base = (b * c + ch) * hw;
                            for (k, d) in dw.iter_mut().enumerate() {
                                let q = neighbour(i, j, k, h, w);
                                *d += gv * flow.data()[base + q].as_f64();
                                dflow[base + q] += gv * wts[widx(k)];
                            }
                        }
                        let dot: f64 = (0..9).map(|k| wts[widx(k)] * dw[k]).sum();
                        for (k, d) in dw.iter().enumerate() {
                            dlogit[widx(k)] = wts[widx(k)] * (d - dot);
                        }
                    }
                }
            }
        }
        let to_t = |shape: &[usize], v: Vec<f64>| Tensor::from_vec(shape, v.into_iter().map(T::of).collect());
        vec![
            needs[0].then(|| to_t(flow.shape(), dflow)),
            needs[1].then(|| to_t(self.weights.shape(), dlogit)),
        ]
    }
}

/// Differentiable convex upsampling from mask logits.
pub fn convex_upsample_var<T: Real>(g: &mut Graph<T>, flow: Var, logits: Var) -> Result<Var> {
    check_upsample(g.shape(flow), g.shape(logits))?;
    let weights = softmax9(g.value(logits));
    let out = upsample_forward(g.value(flow), &weights);
    Ok(g.custom(&[flow, logits], out, Box::new(ConvexUpsampleOp { weights: weights.cast() })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cascade_tensor::gradcheck::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_scales: 2,
            lookup_levels: 1,
            lookup_radius: 1,
            image_channels: vec![6, 4],
            context_channels: 10,
            hidden_channels: 6,
            corr_hidden: 8,
            corr_out: 6,
            flow_hidden: 6,
            flow_out: 4,
            motion_channels: 8,
            head_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_state_splits_and_bounds() {
        let cfg = tiny();
        let block = UpdateBlock::new(&cfg);
        let mut g = Graph::<f64>::new();
        let mut ctx = Tensor::zeros(&[1, 10, 2, 2]);
        ctx.data_mut()[..24].fill(50.0);
        let c = g.constant(ctx);
        let f = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let st = block.init_state(&mut g, c, f).unwrap();
        assert_eq!(g.shape(st.hidden), &[1, 6, 2, 2]);
        assert_eq!(g.shape(st.inp), &[1, 4, 2, 2]);
        assert!(g.value(st.hidden).data().iter().all(|&v| v > 0.99 && v <= 1.0));
        assert!(g.value(st.inp).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[1, 9, 2, 2]));
        assert!(block.init_state(&mut g, bad, f).is_err());
    }

    #[test]
    fn zeroed_block_adds_flow_head_bias() {
        let cfg = tiny();
        let block = UpdateBlock::new(&cfg);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        store.get_mut("update.flow_head.conv2.bias").unwrap().data_mut().copy_from_slice(&[0.5, -0.25]);
        let mut g = Graph::new();
        let ctx = g.constant(rand_tensor(&[1, 10, 3, 3], &mut ChaCha8Rng::seed_from_u64(2)));
        let f0 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let corr = g.constant(rand_tensor(&[1, 9, 3, 3], &mut ChaCha8Rng::seed_from_u64(3)));
        let st = block.init_state(&mut g, ctx, f0).unwrap();
        let a = block.step(&mut g, &store, st, corr).unwrap();
        let b = block.step(&mut g, &store, a.state, corr).unwrap();
        let d = g.value(b.state.flow);
        assert!(d.data()[..9].iter().all(|&u| u == 1.0) && d.data()[9..].iter().all(|&v| v == -0.5));
        assert_eq!(g.value(a.delta), g.value(b.delta));
    }

    #[test]
    fn step_rejects_mismatched_grids() {
        let cfg = tiny();
        let block = UpdateBlock::new(&cfg);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::zeros(&[1, 10, 3, 3]));
        let f0 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let st = block.init_state(&mut g, ctx, f0).unwrap();
        let corr = g.constant(Tensor::zeros(&[1, 9, 3, 4]));
        assert!(block.step(&mut g, &store, st, corr).is_err());
        let corr = g.constant(Tensor::zeros(&[1, 8, 3, 3]));
        assert!(block.step(&mut g, &store, st, corr).is_err());
    }

    #[test]
    fn flow_increment_gradient_wrt_hidden() {
        let cfg = tiny();
        let block = UpdateBlock::new(&cfg);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h0 = rand_tensor(&[1, 6, 4, 4], &mut rng).map(|x| 0.9 * x);
        let inp = rand_tensor(&[1, 4, 4, 4], &mut rng).map(f64::abs);
        let flow = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let corr = rand_tensor(&[1, 9, 4, 4], &mut rng);
        let eval = |g: &mut Graph<f64>, h: Var| {
            let (i, f, c) = (g.constant(inp.clone()), g.constant(flow.clone()), g.constant(corr.clone()));
            let out = block.step(g, &store, UpdateState { hidden: h, inp: i, flow: f }, c).unwrap();
            let sq = g.mul(out.delta, out.delta);
            g.sum(sq)
        };
        let mut g = Graph::new();
        let h = g.leaf(h0.clone());
        let l = eval(&mut g, h);
        let grads = g.backward(l);
        let num = numeric_gradient(
            |t| {
                let mut g = Graph::new();
                let h = g.constant(t.clone());
                let l = eval(&mut g, h);
                g.value(l).data()[0]
            },
            &h0,
            1e-6,
        );
        assert!(relative_error(grads.get(h).unwrap(), &num) < 1e-4);
    }

    #[test]
    fn constant_field_doubles_under_any_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand_tensor(&[1, 36, 3, 4], &mut rng).map(|x| 5.0 * x);
        let mask = ConvexMask::from_logits(&logits).unwrap();
        assert!(mask.is_valid(1e-12));
        let flow = FlowField::constant(3, 4, 1.5, -2.0).to_tensor::<f64>();
        let up = convex_upsample(&flow, &mask).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 8]);
        assert!(up.data()[..48].iter().all(|&u| (u - 3.0).abs() < 1e-12));
        assert!(up.data()[48..].iter().all(|&v| (v + 4.0).abs() < 1e-12));
        let zero = convex_upsample(&Tensor::zeros(&[1, 2, 3, 4]), &mask).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
        assert!(convex_upsample(&Tensor::zeros(&[1, 2, 3, 5]), &mask).is_err());
    }

    use crate::types::FlowField;

    #[test]
    fn centre_mask_is_nearest_neighbour() {
        let mut w = Tensor::zeros(&[1, 36, 2, 3]);
        w.data_mut()[4 * 4 * 6..5 * 4 * 6].fill(1.0);
        let mask = ConvexMask { weights: w };
        assert!(mask.is_valid(0.0));
        let flow = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let up = convex_upsample(&flow, &mask).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..6 {
                    assert_eq!(up.at4(0, c, y, x), 2.0 * flow.at4(0, c, y / 2, x / 2));
                }
            }
        }
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let flow = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let logits = rand_tensor(&[2, 36, 4, 4], &mut rng);
        let r = rand_tensor(&[2, 2, 8, 8], &mut rng);
        let eval = |g: &mut Graph<f64>, f: Var, m: Var| {
            let up = convex_upsample_var(g, f, m).unwrap();
            let rv = g.constant(r.clone());
            let p = g.mul(up, rv);
            g.sum(p)
        };
        let mut g = Graph::new();
        let (f, m) = (g.leaf(flow.clone()), g.leaf(logits.clone()));
        let l = eval(&mut g, f, m);
        let grads = g.backward(l);
        let scalar = |a: &Tensor<f64>, b: &Tensor<f64>| {
            let mut g = Graph::new();
            let (f, m) = (g.constant(a.clone()), g.constant(b.clone()));
            let l = eval(&mut g, f, m);
            g.value(l).data()[0]
        };
        let nf = numeric_gradient(|t| scalar(t, &logits), &flow, 1e-6);
        let nm = numeric_gradient(|t| scalar(&flow, t), &logits, 1e-6);
        assert!(relative_error(grads.get(f).unwrap(), &nf) < 1e-7);
        assert!(relative_error(grads.get(m).unwrap(), &nm) < 1e-7);
    }
}
