//! Plain image, flow and mask grids exchanged with files and the CLI.

use cascade_tensor::{Real, Tensor};

use crate::error::{shape_err, Result};

/// Per-pixel displacement `(u, v)` in pixels, stored as two planes (u then v).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let hw = height * width;
        let mut data = vec![u; 2 * hw];
        data[hw..].fill(v);
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                out.set(y, x, f(y, x));
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, (u, v): (f32, f32)) {
        let i = y * self.width + x;
        let hw = self.height * self.width;
        self.data[i] = u;
        self.data[hw + i] = v;
    }

    pub fn u(&self) -> &[f32] {
        &self.data[..self.height * self.width]
    }

    pub fn v(&self) -> &[f32] {
        &self.data[self.height * self.width..]
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u().iter().zip(self.v()).map(|(u, v)| (u * u + v * v).sqrt()).fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `[1, 2, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 2, self.height, self.width], self.data.iter().map(|&x| T::of(x as f64)).collect())
    }

    /// Sample `n` of a `[N, 2, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        if t.rank() != 4 || t.dim(1) != 2 || n >= t.dim(0) {
            return shape_err(format!("expected [N, 2, H, W] flow with sample {n}, got {:?}", t.shape()));
        }
        let (_, _, h, w) = t.dims4();
        let plane = 2 * h * w;
        let data = t.data()[n * plane..(n + 1) * plane].iter().map(|x| x.as_f64() as f32).collect();
        Ok(Self { height: h, width: w, data })
    }
}

/// RGB image with values in [0, 1], stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Network input `[1, 3, H, W]`, rescaled to [-1, 1].
    pub fn to_network_input<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&x| T::of(2.0 * x as f64 - 1.0)).collect(),
        )
    }
}

/// Which pixels carry ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidMask {
    pub fn all(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Stacks `[1, C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack<T: Real>(parts: &[Tensor<T>]) -> Tensor<T> {
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::cat_batch(&refs)
}
