//! Multi-scale feature extraction.
//!
//! The encoder is a strided stem followed by residual units; the finest
//! intermediate grid sits at `finest_stride`, and each coarser scale adds one
//! stride-2 residual unit. The enhancement pass then walks coarse to fine,
//! concatenating the 2x-upsampled enhanced level above with the intermediate
//! grid of the current scale and fusing them with residual units. The coarsest
//! level passes through unchanged.

use cascade_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::nn::{Conv, Norm, ParamStore, ResidualUnit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Image,
    Context,
}

/// Per-scale feature grids, coarsest first, each `[N, C_s, H/stride_s, W/stride_s]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Real> {
    pub kind: FeatureKind,
    pub levels: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct EnhanceBlock {
    project: Conv,
    units: Vec<ResidualUnit>,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    channels: Vec<usize>,
    strides: Vec<usize>,
    unet: bool,
    stem: Conv,
    stem_unit: ResidualUnit,
    to_finest: Vec<ResidualUnit>,
    /// `coarser[k]` maps scale `num_scales - 1 - k` to the next coarser one.
    coarser: Vec<ResidualUnit>,
    /// `enhance[s - 1]` produces enhanced scale `s` (0 = coarsest).
    enhance: Vec<EnhanceBlock>,
    /// Per-scale 1x1 output projections (signed features).
    output: Vec<Conv>,
}

impl FeatureExtractor {
    pub fn new(prefix: &str, kind: FeatureKind, cfg: &ModelConfig) -> Self {
        let n = cfg.num_scales;
        let channels = match kind {
            FeatureKind::Image => cfg.image_channels.clone(),
            FeatureKind::Context => vec![cfg.context_channels; n],
        };
        let norm = match kind {
            FeatureKind::Image => Norm::Instance,
            FeatureKind::Context => Norm::None,
        };
        let stem_c = cfg.stem_channels;
        let stem = Conv::new(format!("{prefix}.stem"), 3, stem_c, 7, 2);
        let stem_unit = ResidualUnit::new(&format!("{prefix}.stem_unit"), stem_c, stem_c, 1, norm);
        let downs = cfg.finest_stride.trailing_zeros() as usize - 1;
        let finest_c = channels[n - 1];
        let to_finest = (0..downs)
            .map(|i| {
                let out = if i + 1 == downs { finest_c } else { stem_c };
                ResidualUnit::new(&format!("{prefix}.down{i}"), stem_c, out, 2, norm)
            })
            .collect();
        let coarser = (0..n - 1)
            .map(|k| {
                let from = n - 1 - k;
                ResidualUnit::new(&format!("{prefix}.coarser{k}"), channels[from], channels[from - 1], 2, norm)
            })
            .collect();
        let enhance = (1..n)
            .map(|s| {
                let c = channels[s];
                let units = (0..cfg.enhance_units.max(1))
                    .map(|u| {
                        let in_c = if u == 0 { 2 * c } else { c };
                        ResidualUnit::new(&format!("{prefix}.enhance{s}.unit{u}"), in_c, c, 1, norm)
                    })
                    .collect();
                EnhanceBlock { project: Conv::new(format!("{prefix}.enhance{s}.project"), channels[s - 1], c, 1, 1), units }
            })
            .collect();
        let output = (0..n)
            .map(|s| Conv::new(format!("{prefix}.output{s}"), channels[s], channels[s], 1, 1))
            .collect();
        Self {
            kind,
            channels,
            strides: (0..n).map(|s| cfg.stride(s)).collect(),
            unet: cfg.unet_features,
            stem,
            stem_unit,
            to_finest,
            coarser,
            enhance,
            output,
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        self.stem_unit.init(store, rng);
        for u in self.to_finest.iter().chain(&self.coarser) {
            u.init(store, rng);
        }
        if self.unet {
            for e in &self.enhance {
                e.project.init(store, rng);
                for u in &e.units {
                    u.init(store, rng);
                }
            }
        }
        for c in &self.output {
            c.init(store, rng);
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return shape_err(format!("expected [N, 3, H, W] image, got {shape:?}"));
        }
        let coarsest = self.strides[0];
        if !shape[2].is_multiple_of(coarsest) || !shape[3].is_multiple_of(coarsest) {
            return shape_err(format!(
                "image {}x{} is not divisible by the coarsest stride {coarsest}",
                shape[2], shape[3]
            ));
        }
        Ok(())
    }

    /// Raw encoder outputs per scale, coarsest first.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(image))?;
        let mut x = self.stem.forward(g, store, image);
        if self.kind == FeatureKind::Image {
            x = g.instance_norm(x, T::of(1e-5));
        }
        x = g.relu(x);
        x = self.stem_unit.forward(g, store, x);
        for u in &self.to_finest {
            x = u.forward(g, store, x);
        }
        let mut fine_to_coarse = vec![x];
        for u in &self.coarser {
            x = u.forward(g, store, x);
            fine_to_coarse.push(x);
        }
        fine_to_coarse.reverse();
        Ok(fine_to_coarse)
    }

    /// U-Net style enhancement of intermediate features, coarsest first.
    pub fn enhance<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, intermediate: &[Var]) -> Result<Vec<Var>> {
        if intermediate.len() != self.channels.len() {
            return shape_err(format!("{} intermediate levels for {} scales", intermediate.len(), self.channels.len()));
        }
        for (s, &v) in intermediate.iter().enumerate() {
            if g.shape(v)[1] != self.channels[s] {
                return shape_err(format!("level {s} has {} channels, expected {}", g.shape(v)[1], self.channels[s]));
            }
        }
        if !self.unet {
            return Ok(intermediate.to_vec());
        }
        let mut out = vec![intermediate[0]];
        for (s, block) in self.enhance.iter().enumerate().map(|(i, b)| (i + 1, b)) {
            let prev = out[s - 1];
            let (h, w) = (g.shape(intermediate[s])[2], g.shape(intermediate[s])[3]);
            if g.shape(prev)[2] * 2 != h || g.shape(prev)[3] * 2 != w {
                return shape_err(format!("level {s} is not twice the size of level {}", s - 1));
            }
            let up = g.resize_bilinear(prev, h, w);
            let up = block.project.forward(g, store, up);
            let mut x = g.concat(&[up, intermediate[s]]);
            for u in &block.units {
                x = u.forward(g, store, x);
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Encode, enhance, then project each level with its 1x1 output convolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<Var>> {
        let ints = self.encode(g, store, image)?;
        let enhanced = self.enhance(g, store, &ints)?;
        Ok(enhanced.into_iter().zip(&self.output).map(|(v, c)| c.forward(g, store, v)).collect())
    }
}

/// Weight-shared image extractor plus a separately parameterised context extractor.
#[derive(Clone, Debug)]
pub struct FeatureNetworks {
    pub image: FeatureExtractor,
    pub context: FeatureExtractor,
}

/// Output of [`FeatureNetworks::extract`] inside a graph.
pub struct ExtractedFeatures {
    pub image1: Vec<Var>,
    pub image2: Vec<Var>,
    pub context: Vec<Var>,
}

impl FeatureNetworks {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            image: FeatureExtractor::new("fnet", FeatureKind::Image, cfg),
            context: FeatureExtractor::new("cnet", FeatureKind::Context, cfg),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.image.init(store, rng);
        self.context.init(store, rng);
    }

    pub fn extract<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image1: Var,
        image2: Var,
    ) -> Result<ExtractedFeatures> {
        if g.shape(image1) != g.shape(image2) {
            return shape_err(format!("frame sizes differ: {:?} vs {:?}", g.shape(image1), g.shape(image2)));
        }
        Ok(ExtractedFeatures {
            image1: self.image.forward(g, store, image1)?,
            image2: self.image.forward(g, store, image2)?,
            context: self.context.forward(g, store, image1)?,
        })
    }

    /// Evaluates the extractors outside of training and returns plain pyramids.
    pub fn extract_pyramids<T: Real>(
        &self,
        store: &ParamStore<T>,
        image1: &Tensor<T>,
        image2: &Tensor<T>,
    ) -> Result<(FeaturePyramid<T>, FeaturePyramid<T>, FeaturePyramid<T>)> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(image1.clone()), g.constant(image2.clone()));
        let f = self.extract(&mut g, store, a, b)?;
        let collect = |g: &Graph<T>, vs: &[Var], kind| FeaturePyramid {
            kind,
            levels: vs.iter().map(|&v| g.value(v).clone()).collect(),
        };
        Ok((
            collect(&g, &f.image1, FeatureKind::Image),
            collect(&g, &f.image2, FeatureKind::Image),
            collect(&g, &f.context, FeatureKind::Context),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(num_scales: usize) -> ModelConfig {
        ModelConfig {
            num_scales,
            image_channels: [12, 8, 6, 4][4 - num_scales..].to_vec(),
            context_channels: 8,
            hidden_channels: 4,
            stem_channels: 4,
            ..ModelConfig::default()
        }
    }

    fn setup(cfg: &ModelConfig) -> (FeatureNetworks, ParamStore<f64>) {
        let nets = FeatureNetworks::new(cfg);
        let mut store = ParamStore::new();
        nets.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (nets, store)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encode_shapes_three_scales() {
        let cfg = tiny(3);
        let (nets, store) = setup(&cfg);
        let mut g = Graph::new();
        let x = g.constant(image(64, 64, 1));
        let ints = nets.image.encode(&mut g, &store, x).unwrap();
        let shapes: Vec<_> = ints.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 8, 4, 4], vec![1, 6, 8, 8], vec![1, 4, 16, 16]]);
    }

    #[test]
    fn encode_single_scale_and_divisibility() {
        let cfg = tiny(1);
        let (nets, store) = setup(&cfg);
        let mut g = Graph::new();
        let x = g.constant(image(64, 64, 1));
        let ints = nets.image.encode(&mut g, &store, x).unwrap();
        assert_eq!(ints.len(), 1);
        assert_eq!(&g.shape(ints[0])[2..], &[16, 16]);
        // enhancement is the identity with one scale
        let enh = nets.image.enhance(&mut g, &store, &ints).unwrap();
        assert_eq!(enh, ints);

        let cfg3 = tiny(3);
        let (nets3, store3) = setup(&cfg3);
        let y = g.constant(image(63, 64, 1));
        assert!(nets3.image.encode(&mut g, &store3, y).is_err());
    }

    #[test]
    fn enhanced_channels_follow_config() {
        let cfg = tiny(3);
        let (nets, store) = setup(&cfg);
        let (p1, _, ctx) = nets.extract_pyramids(&store, &image(64, 64, 1), &image(64, 64, 2)).unwrap();
        let ch: Vec<usize> = p1.levels.iter().map(|t| t.dim(1)).collect();
        assert_eq!(ch, cfg.image_channels);
        let ch: Vec<usize> = ctx.levels.iter().map(|t| t.dim(1)).collect();
        assert_eq!(ch, vec![8, 8, 8]);
        for w in p1.levels.windows(2) {
            assert_eq!(w[0].dim(2) * 2, w[1].dim(2));
            assert_eq!(w[0].dim(3) * 2, w[1].dim(3));
        }
        assert!(p1.levels.iter().chain(&ctx.levels).all(|t| t.is_finite()));
    }

    #[test]
    fn coarsest_level_passes_through_enhancement() {
        let cfg = tiny(3);
        let (nets, store) = setup(&cfg);
        let mut g = Graph::new();
        let x = g.constant(image(64, 64, 5));
        let ints = nets.context.encode(&mut g, &store, x).unwrap();
        let enh = nets.context.enhance(&mut g, &store, &ints).unwrap();
        assert_eq!(g.value(ints[0]), g.value(enh[0]));
        assert_ne!(g.value(ints[2]), g.value(enh[2]));
    }

    #[test]
    fn four_scales_reach_stride_32() {
        let cfg = tiny(4);
        let (nets, store) = setup(&cfg);
        let (p1, _, _) = nets.extract_pyramids(&store, &image(64, 64, 1), &image(64, 64, 2)).unwrap();
        assert_eq!(&p1.levels[0].shape()[2..], &[2, 2]);
    }

    #[test]
    fn identical_frames_share_weights() {
        let cfg = tiny(2);
        let (nets, store) = setup(&cfg);
        let img = image(32, 32, 9);
        let (p1, p2, _) = nets.extract_pyramids(&store, &img, &img).unwrap();
        for (a, b) in p1.levels.iter().zip(&p2.levels) {
            assert_eq!(a, b);
        }
    }
}
