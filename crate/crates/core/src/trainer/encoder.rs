use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// hidden × input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// output × hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Array2<f64>,
}

/// Parameter gradients, laid out like [`Encoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn xavier(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound))
}

impl Encoder {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "encoder dims {input_dim}->{hidden_dim}->{output_dim}: need input, hidden >= 1 and output >= 2"
            )));
        }
        Ok(Self {
            w1: xavier(rng, hidden_dim, input_dim),
            b1: Array1::zeros(hidden_dim),
            w2: xavier(rng, output_dim, hidden_dim),
            b2: Array1::zeros(output_dim),
        })
    }

    /// Builds an encoder from explicit parameters, checking shapes.
    pub fn from_parts(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        let (h, _) = w1.dim();
        let (o, h2) = w2.dim();
        if b1.len() != h || h2 != h || b2.len() != o {
            return Err(Error::InvalidConfig(format!(
                "inconsistent encoder shapes: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.dim(),
                b1.len(),
                w2.dim(),
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut hidden = x.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        Ok((out, ForwardCache { hidden }))
    }

    /// Embeddings only.
    pub fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of the parameters given `grad_out = ∂L/∂output`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        cache: &ForwardCache,
        grad_out: &Array2<f64>,
    ) -> EncoderGrads {
        let w2 = grad_out.t().dot(&cache.hidden);
        let b2 = grad_out.sum_axis(Axis(0));
        let mut grad_hidden = grad_out.dot(&self.w2);
        Zip::from(&mut grad_hidden).and(&cache.hidden).for_each(|g, &h| {
            if h <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = grad_hidden.t().dot(&x);
        let b1 = grad_hidden.sum_axis(Axis(0));
        EncoderGrads { w1, b1, w2, b2 }
    }

    pub(crate) fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl EncoderGrads {
    pub(crate) fn slices(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }
}
