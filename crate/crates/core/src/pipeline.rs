//! Coarse-to-fine estimation: per-scale correlation pyramids, recurrent
//! refinement, x2 convex upsampling between scales and upsampling of every
//! iterate to the input resolution.

use cascade_tensor::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::correlation::{cost_volume_var, lookup_var, pyramid_vars};
use crate::error::{shape_err, Result};
use crate::features::FeatureNetworks;
use crate::nn::ParamStore;
use crate::types::{stack, FlowField, Image};
use crate::update::{convex_upsample_var, UpdateBlock};

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct GraphTrace {
    /// Full-resolution `[N, 2, H, W]` predictions, scale-major, coarsest first.
    pub predictions: Vec<Var>,
    /// Flow each scale started from, at that scale's resolution.
    pub inits: Vec<Var>,
    /// Last flow of each scale at that scale's resolution.
    pub per_scale_flows: Vec<Var>,
    /// Mask logits of the last iteration of each scale.
    pub last_masks: Vec<Var>,
}

impl GraphTrace {
    pub fn final_flow(&self) -> Var {
        *self.predictions.last().expect("at least one iteration")
    }
}

/// Plain results of [`FlowModel::estimate`] for a single image pair.
#[derive(Clone, Debug)]
pub struct EstimationTrace {
    pub predictions: Vec<FlowField>,
    pub final_flow: FlowField,
    pub per_scale_flows: Vec<FlowField>,
    pub inits: Vec<FlowField>,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub cfg: ModelConfig,
    pub features: FeatureNetworks,
    pub update: UpdateBlock,
}

impl FlowModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { cfg: cfg.clone(), features: FeatureNetworks::new(cfg), update: UpdateBlock::new(cfg) }
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.features.init(&mut store, &mut rng);
        self.update.init(&mut store, &mut rng);
        store
    }

    /// Checks that an `h x w` input can be processed.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.cfg.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return shape_err(format!("input {h}x{w} must be a positive multiple of {m} in both dimensions"));
        }
        Ok(())
    }

    /// Builds the full estimation graph for `[N, 3, H, W]` inputs in [-1, 1].
    /// `iters[s]` is the iteration count of scale `s` (coarsest first);
    /// `warm`, if given, is the `[N, 2, h, w]` initial flow at the coarsest scale.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image1: Var,
        image2: Var,
        iters: &[usize],
        warm: Option<Tensor<T>>,
    ) -> Result<GraphTrace> {
        let cfg = &self.cfg;
        if iters.len() != cfg.num_scales || iters.contains(&0) {
            return shape_err(format!("need one positive iteration count per scale, got {iters:?}"));
        }
        let shape = g.shape(image1).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return shape_err(format!("expected [N, 3, H, W] images, got {shape:?}"));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        self.check_input(h, w)?;
        let feats = self.features.extract(g, store, image1, image2)?;
        let mut trace = GraphTrace { predictions: vec![], inits: vec![], per_scale_flows: vec![], last_masks: vec![] };
        let mut warm = warm;
        for s in 0..cfg.num_scales {
            let stride = cfg.stride(s);
            let (hs, ws) = (h / stride, w / stride);
            let init = if s == 0 {
                let t = warm.take().unwrap_or_else(|| Tensor::zeros(&[n, 2, hs, ws]));
                if t.shape() != [n, 2, hs, ws] {
                    return shape_err(format!("warm start {:?} does not match the coarsest grid {:?}", t.shape(), [n, 2, hs, ws]));
                }
                g.constant(t)
            } else {
                let prev = trace.per_scale_flows[s - 1];
                let mask = trace.last_masks[s - 1];
                let up = convex_upsample_var(g, prev, mask)?;
                g.detach(up)
            };
            trace.inits.push(init);
            let vol = cost_volume_var(g, feats.image1[s], feats.image2[s])?;
            let levels = pyramid_vars(g, vol, cfg.levels_at(s))?;
            let mut state = self.update.init_state(g, feats.context[s], init)?;
            let mut mask = None;
            for _ in 0..iters[s] {
                state.flow = g.detach(state.flow);
                let corr = lookup_var(g, &levels, state.flow, cfg.lookup_radius, cfg.corr_channels())?;
                let out = self.update.step(g, store, state, corr)?;
                state = out.state;
                let pred = upsample_to_full_var(g, state.flow, out.mask_logits, stride)?;
                trace.predictions.push(pred);
                mask = Some(out.mask_logits);
            }
            trace.per_scale_flows.push(state.flow);
            trace.last_masks.push(mask.expect("positive iteration count"));
        }
        Ok(trace)
    }

    /// Runs the model on one image pair without recording gradients.
    pub fn estimate<T: Real>(
        &self,
        store: &ParamStore<T>,
        image1: &Image,
        image2: &Image,
        iters: &[usize],
        warm: Option<&FlowField>,
    ) -> Result<EstimationTrace> {
        if (image1.height, image1.width) != (image2.height, image2.width) {
            return shape_err("frame sizes differ");
        }
        let warm = match warm {
            Some(prev) => {
                if (prev.height, prev.width) != (image1.height, image1.width) {
                    return shape_err("warm start flow does not match the input size");
                }
                self.check_input(image1.height, image1.width)?;
                let c = self.cfg.coarsest_stride();
                Some(warm_init(prev, (image1.height / c, image1.width / c), c).to_tensor())
            }
            None => None,
        };
        let mut g = Graph::new();
        let a = g.constant(image1.to_network_input());
        let b = g.constant(image2.to_network_input());
        let tr = self.forward(&mut g, store, a, b, iters, warm)?;
        let field = |v: Var| FlowField::from_tensor(g.value(v), 0);
        let predictions = tr.predictions.iter().map(|&v| field(v)).collect::<Result<Vec<_>>>()?;
        Ok(EstimationTrace {
            final_flow: predictions.last().cloned().expect("at least one iteration"),
            predictions,
            per_scale_flows: tr.per_scale_flows.iter().map(|&v| field(v)).collect::<Result<_>>()?,
            inits: tr.inits.iter().map(|&v| field(v)).collect::<Result<_>>()?,
        })
    }

    /// Final flows for a batch of pairs, `[N, 2, H, W]`.
    pub fn estimate_batch<T: Real>(
        &self,
        store: &ParamStore<T>,
        pairs: &[(&Image, &Image)],
        iters: &[usize],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let a = g.constant(stack(&pairs.iter().map(|p| p.0.to_network_input()).collect::<Vec<_>>()));
        let b = g.constant(stack(&pairs.iter().map(|p| p.1.to_network_input()).collect::<Vec<_>>()));
        let tr = self.forward(&mut g, store, a, b, iters, None)?;
        Ok(g.value(tr.final_flow()).clone())
    }
}

/// Convex x2 upsampling with the given mask, then bilinear interpolation by
/// the remaining factor `stride / 2`; displacements scale with resolution.
pub fn upsample_to_full_var<T: Real>(g: &mut Graph<T>, flow: Var, mask_logits: Var, stride: usize) -> Result<Var> {
    if stride < 2 || !stride.is_power_of_two() {
        return shape_err(format!("stride {stride} is not a power of two >= 2"));
    }
    let up = convex_upsample_var(g, flow, mask_logits)?;
    let rest = stride / 2;
    if rest == 1 {
        return Ok(up);
    }
    let s = g.shape(up).to_vec();
    let r = g.resize_bilinear(up, s[2] * rest, s[3] * rest);
    Ok(g.scale(r, T::of(rest as f64)))
}

/// Plain counterpart of [`upsample_to_full_var`] for a single flow field.
pub fn upsample_to_full(flow: &FlowField, mask_logits: &Tensor<f64>, stride: usize) -> Result<FlowField> {
    let mut g = Graph::new();
    let f = g.constant(flow.to_tensor::<f64>());
    let m = g.constant(mask_logits.clone());
    let out = upsample_to_full_var(&mut g, f, m, stride)?;
    FlowField::from_tensor(g.value(out), 0)
}

/// Initial coarsest-scale flow from a previous full-resolution estimate:
/// area-average down by `stride`, rescale to coarse pixels, then forward-project
/// each vector to the pixel nearest its target. Where several land on one
/// pixel the larger magnitude wins; pixels nobody lands on stay zero.
pub fn warm_init(previous: &FlowField, coarse: (usize, usize), stride: usize) -> FlowField {
    let (h, w) = coarse;
    let inv_area = 1.0 / (stride * stride) as f64;
    let mut down = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut su, mut sv) = (0.0f64, 0.0f64);
            for dy in 0..stride {
                for dx in 0..stride {
                    let (py, px) = ((y * stride + dy).min(previous.height - 1), (x * stride + dx).min(previous.width - 1));
                    let (u, v) = previous.get(py, px);
                    su += u as f64;
                    sv += v as f64;
                }
            }
            let k = inv_area / stride as f64;
            down.set(y, x, ((su * k) as f32, (sv * k) as f32));
        }
    }
    let mut out = FlowField::zeros(h, w);
    let mut best = vec![-1.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = down.get(y, x);
            let tx = (x as f32 + u).round();
            let ty = (y as f32 + v).round();
            if tx < 0.0 || ty < 0.0 || tx >= w as f32 || ty >= h as f32 {
                continue;
            }
            let i = ty as usize * w + tx as usize;
            let mag = u * u + v * v;
            if mag > best[i] {
                best[i] = mag;
                out.set(ty as usize, tx as usize, (u, v));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::update::{convex_upsample, ConvexMask};

    fn tiny(num_scales: usize) -> ModelConfig {
        ModelConfig {
            num_scales,
            lookup_levels: 2,
            lookup_radius: 1,
            image_channels: [12, 8, 6, 4][4 - num_scales..].to_vec(),
            context_channels: 8,
            hidden_channels: 4,
            stem_channels: 4,
            corr_hidden: 6,
            corr_out: 4,
            flow_hidden: 4,
            flow_out: 4,
            motion_channels: 6,
            head_channels: 6,
            ..ModelConfig::default()
        }
    }

    fn image(h: usize, w: usize, phase: f32) -> Image {
        let mut im = Image::zeros(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 + 0.4 * ((x as f32 * 0.7 + y as f32 * 0.3 + c as f32 + phase).sin());
                    im.set(c, y, x, v);
                }
            }
        }
        im
    }

    #[test]
    fn trace_length_and_scale_consistency() {
        let model = FlowModel::new(&tiny(3));
        let store = model.init_params::<f64>(3);
        let (a, b) = (image(64, 64, 0.0), image(64, 64, 0.4));
        let tr = model.estimate(&store, &a, &b, &[4, 6, 8], None).unwrap();
        assert_eq!(tr.predictions.len(), 18);
        assert!(tr.predictions.iter().all(|p| (p.height, p.width) == (64, 64) && p.is_finite()));
        assert_eq!(tr.final_flow, tr.predictions[17]);
        assert_eq!(tr.inits[0], FlowField::zeros(4, 4));
        // replay: the upsampled last flow of each scale is the next scale's start
        let mut g = Graph::new();
        let (ia, ib) = (g.constant(a.to_network_input()), g.constant(b.to_network_input()));
        let gt = model.forward(&mut g, &store, ia, ib, &[4, 6, 8], None).unwrap();
        for s in 0..2 {
            let mask = ConvexMask::from_logits(g.value(gt.last_masks[s])).unwrap();
            let up = convex_upsample(g.value(gt.per_scale_flows[s]), &mask).unwrap();
            assert_eq!(&up, g.value(gt.inits[s + 1]));
        }
    }

    #[test]
    fn single_scale_baseline_shape() {
        let cfg = ModelConfig { lookup_levels: 4, finest_stride: 8, ..tiny(1) };
        let model = FlowModel::new(&cfg);
        let store = model.init_params::<f32>(0);
        let tr = model.estimate(&store, &image(64, 64, 0.0), &image(64, 64, 1.0), &[12], None).unwrap();
        assert_eq!(tr.predictions.len(), 12);
        assert_eq!(tr.per_scale_flows.len(), 1);
        assert_eq!((tr.per_scale_flows[0].height, tr.per_scale_flows[0].width), (8, 8));
    }

    #[test]
    fn zero_flow_head_gives_zero_flow() {
        let model = FlowModel::new(&tiny(2));
        let mut store = model.init_params::<f64>(1);
        for name in ["update.flow_head.conv2.weight", "update.flow_head.conv2.bias"] {
            store.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let a = image(32, 32, 0.0);
        let tr = model.estimate(&store, &a, &a, &[2, 3], None).unwrap();
        assert!(tr.final_flow.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = FlowModel::new(&tiny(3));
        let store = model.init_params::<f32>(0);
        let a = image(64, 64, 0.0);
        assert!(model.estimate(&store, &a, &image(48, 64, 0.0), &[1, 1, 1], None).is_err());
        assert!(model.estimate(&store, &image(48, 48, 0.0), &image(48, 48, 0.0), &[1, 1, 1], None).is_err());
        assert!(model.estimate(&store, &a, &a, &[1, 1], None).is_err());
    }

    #[test]
    fn upsample_to_full_scales_constants() {
        let logits = Tensor::from_fn(&[1, 36, 2, 3], |i| ((i * 7919) % 13) as f64 * 0.3);
        let up = upsample_to_full(&FlowField::constant(2, 3, 1.0, 1.0), &logits, 16).unwrap();
        assert_eq!((up.height, up.width), (32, 48));
        assert!(up.data.iter().all(|&x| (x - 16.0).abs() < 1e-5));
        let zero = upsample_to_full(&FlowField::zeros(2, 3), &logits, 4).unwrap();
        assert!(zero.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn warm_init_examples() {
        assert_eq!(warm_init(&FlowField::zeros(64, 64), (4, 4), 16), FlowField::zeros(4, 4));
        let out = warm_init(&FlowField::constant(64, 64, 16.0, 0.0), (4, 4), 16);
        for y in 0..4 {
            assert_eq!(out.get(y, 0), (0.0, 0.0));
            for x in 1..4 {
                assert_eq!(out.get(y, x), (1.0, 0.0));
            }
        }
    }

    #[test]
    fn warm_init_collision_keeps_larger() {
        let mut prev = FlowField::zeros(2, 4);
        prev.set(0, 0, (1.0, 0.0));
        prev.set(0, 2, (-1.5, 0.0));
        prev.set(1, 3, (-3.0, -1.0));
        let out = warm_init(&prev, (2, 4), 1);
        assert_eq!(out.get(0, 0), (-3.0, -1.0));
        assert_eq!(out.get(0, 1), (-1.5, 0.0));
        assert_eq!(out.get(1, 3), (0.0, 0.0));
    }

    #[test]
    fn warm_start_enters_coarsest_scale() {
        let model = FlowModel::new(&tiny(2));
        let store = model.init_params::<f64>(2);
        let a = image(32, 32, 0.0);
        let prev = FlowField::constant(32, 32, 8.0, 0.0);
        let tr = model.estimate(&store, &a, &a, &[1, 1], Some(&prev)).unwrap();
        assert_eq!(tr.inits[0].get(0, 1), (1.0, 0.0));
        assert_eq!(tr.inits[0].get(0, 0), (0.0, 0.0));
    }
}
