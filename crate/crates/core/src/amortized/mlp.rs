//! Multi-layer perceptrons with `tanh` hidden activations and a linear output.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lift_vec, Matrix};
use crate::scalar::Real;

/// Standard deviation of the normal bias initialization.
pub const BIAS_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f64> {
    /// `out × in`.
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f64> {
    pub layers: Vec<Layer<T>>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Matrix<f64>,
    bias: Vec<f64>,
}

impl Serialize for Mlp<f64> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let reprs: Vec<LayerRepr> = self
            .layers
            .iter()
            .map(|l| LayerRepr {
                weights: l.weights.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        reprs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mlp<f64> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let reprs = Vec::<LayerRepr>::deserialize(d)?;
        let mlp = Mlp {
            layers: reprs
                .into_iter()
                .map(|r| Layer {
                    weights: r.weights,
                    bias: r.bias,
                })
                .collect(),
        };
        mlp.validate().map_err(serde::de::Error::custom)?;
        Ok(mlp)
    }
}

/// Weight matrix (`fan_out × fan_in`) drawn uniformly on `±√(6/(fan_in+fan_out))`.
pub fn xavier_init<R: Rng + ?Sized>(
    fan_out: usize,
    fan_in: usize,
    rng: &mut R,
) -> Result<Matrix<f64>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArgument(
            "xavier_init needs fan_in, fan_out >= 1".into(),
        ));
    }
    let a = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(fan_out, fan_in, data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp<f64> {
    /// Xavier weights and `N(0, 0.01²)` biases for the given layer widths
    /// (`dims[0]` is the input dimension).
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least input and output dims".into(),
            ));
        }
        let normal = Normal::new(0.0, BIAS_INIT_STD).expect("valid std");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let weights = xavier_init(w[1], w[0], rng)?;
            let bias = (0..w[1]).map(|_| normal.sample(rng)).collect();
            layers.push(Layer { weights, bias });
        }
        Ok(Mlp { layers })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weights: Matrix::zeros(w[1], w[0]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        }
    }

    pub fn lift<T: Real>(&self) -> Mlp<T> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: l.weights.lift(),
                    bias: lift_vec(&l.bias),
                })
                .collect(),
        }
    }

    /// Flat parameter vector, layer by layer (weights row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl<T: Real> Mlp<T> {
    /// `[input, hidden..., output]` widths.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.layers.len() + 1);
        if let Some(first) = self.layers.first() {
            d.push(first.weights.cols());
        }
        d.extend(self.layers.iter().map(|l| l.weights.rows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.dims())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("MLP without layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() {
                return Err(Error::DimMismatch(format!(
                    "layer {i}: bias length != output width"
                )));
            }
            if i > 0 && self.layers[i - 1].weights.rows() != l.weights.cols() {
                return Err(Error::DimMismatch(format!(
                    "layer {i}: input width does not chain"
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a network of the given widths from a flat slice.
    pub fn from_flat(dims: &[usize], flat: &[T]) -> Result<Self> {
        if flat.len() != count_params(dims) {
            return Err(Error::LengthMismatch(format!(
                "{} parameters for widths {dims:?} (expected {})",
                flat.len(),
                count_params(dims)
            )));
        }
        let mut off = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let nw = w[0] * w[1];
            let weights = Matrix::from_vec(w[1], w[0], flat[off..off + nw].to_vec())?;
            off += nw;
            let bias = flat[off..off + w[1]].to_vec();
            off += w[1];
            layers.push(Layer { weights, bias });
        }
        Ok(Mlp { layers })
    }

    /// Affine layers with `tanh` between them; no activation on the output.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "MLP input of length {} (expected {})",
                input.len(),
                self.input_dim()
            )));
        }
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weights.matvec(&h);
            for (zj, &bj) in z.iter_mut().zip(&l.bias) {
                *zj += bj;
            }
            if i < last {
                for zj in z.iter_mut() {
                    *zj = zj.tanh();
                }
            }
            h = z;
        }
        Ok(h)
    }
}

pub fn count_params(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Same as [`Mlp::forward`].
pub fn mlp_forward<T: Real>(net: &Mlp<T>, input: &[T]) -> Result<Vec<T>> {
    net.forward(input)
}
