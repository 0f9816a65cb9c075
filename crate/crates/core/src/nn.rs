//! Parameter storage and the convolutional building blocks shared by the
//! feature extractors and the update block.

use std::collections::BTreeMap;

use cascade_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Named parameters, ordered by name so iteration and serialisation are stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Graph node for a parameter; panics on unknown names (a model bug).
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Var {
        let t = self.map.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        g.param(name, t)
    }
}

/// 2-D convolution with "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), in_c, out_c, k, stride }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Kaiming-normal weights (fan-out, ReLU gain) and zero bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_out = (self.out_c * self.k * self.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("finite std");
        let shape = [self.out_c, self.in_c, self.k, self.k];
        let w = Tensor::from_fn(&shape, |_| T::of(normal.sample(rng)));
        store.insert(self.weight_name(), w);
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_c]));
    }

    /// Uniform weights and bias in `+-1/sqrt(fan_in)`, a common default for
    /// layers without a following normalization.
    pub fn init_uniform<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let bound = 1.0 / ((self.in_c * self.k * self.k) as f64).sqrt();
        let shape = [self.out_c, self.in_c, self.k, self.k];
        let w = Tensor::from_fn(&shape, |_| T::of(rng.random_range(-bound..bound)));
        let b = Tensor::from_fn(&[self.out_c], |_| T::of(rng.random_range(-bound..bound)));
        store.insert(self.weight_name(), w);
        store.insert(self.bias_name(), b);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = store.bind(g, &self.weight_name());
        let b = store.bind(g, &self.bias_name());
        g.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    Instance,
    None,
}

impl Norm {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Norm::Instance => g.instance_norm(x, T::of(1e-5)),
            Norm::None => x,
        }
    }
}

/// Two 3x3 convolutions with a skip connection. A stride-2 unit downsamples
/// in its first convolution; the skip path then uses a strided 1x1 projection.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    norm: Norm,
}

impl ResidualUnit {
    pub fn new(name: &str, in_c: usize, out_c: usize, stride: usize, norm: Norm) -> Self {
        let skip = (stride != 1 || in_c != out_c).then(|| Conv::new(format!("{name}.skip"), in_c, out_c, 1, stride));
        Self {
            conv1: Conv::new(format!("{name}.conv1"), in_c, out_c, 3, stride),
            conv2: Conv::new(format!("{name}.conv2"), out_c, out_c, 3, 1),
            skip,
            norm,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_c
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.conv1.forward(g, store, x);
        let y = self.norm.apply(g, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, store, y);
        let y = self.norm.apply(g, y);
        let y = g.relu(y);
        let s = match &self.skip {
            Some(c) => {
                let s = c.forward(g, store, x);
                self.norm.apply(g, s)
            }
            None => x,
        };
        let out = g.add(s, y);
        g.relu(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_unit_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let down = ResidualUnit::new("u", 4, 6, 2, Norm::Instance);
        let same = ResidualUnit::new("v", 6, 6, 1, Norm::None);
        down.init(&mut store, &mut rng);
        same.init(&mut store, &mut rng);
        assert!(store.get("u.skip.weight").is_some());
        assert!(store.get("v.skip.weight").is_none());
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4, 8, 12], 0.5));
        let y = down.forward(&mut g, &store, x);
        let z = same.forward(&mut g, &store, y);
        assert_eq!(g.shape(z), &[2, 6, 4, 6]);
        assert!(g.value(z).data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}
