//! Feed-forward networks with an explicit activation tape.
//!
//! `forward` records what `backward` needs; there is no general autodiff.
//! Weights are stored `fan_in x fan_out` so both passes run as row-wise
//! `axpy` updates over contiguous memory.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Silu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Silu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    version: u64,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Input of every layer (the network input first).
    inputs: Vec<Matrix>,
    /// Pre-activation of every layer.
    pre: Vec<Matrix>,
}

impl Tape {
    pub fn batch_rows(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseGrad { weights: Matrix::zeros(l.fan_in(), l.fan_out()), bias: vec![0.0; l.fan_out()] })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_assign(&b.weights);
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.scale(s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flattened views in the same order as [`Mlp::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }
}

impl Mlp {
    /// Builds a network through the given widths (`[input, hidden.., output]`).
    /// Hidden layers use `hidden`, the last layer is linear. Weights are drawn
    /// uniformly in `±sqrt(6 / fan_in)`, biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::contract(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (widths[k], widths[k + 1]);
                let limit = libm::sqrt(6.0 / fan_in as f64);
                let mut weights = Matrix::zeros(fan_in, fan_out);
                for w in weights.as_mut_slice() {
                    *w = rng.random_range(-limit..limit);
                }
                let activation = if k + 1 == n { Activation::Identity } else { hidden };
                Dense { weights, bias: vec![0.0; fan_out], activation }
            })
            .collect();
        Ok(Self { layers, version: 0 })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].fan_out(),
                    k + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::shape(format!("layer {k} bias length {} != {}", l.bias.len(), l.fan_out())));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::fan_out));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// Parameter slices in a fixed order: `w0, b0, w1, b1, ...`.
    /// Taking them marks every outstanding tape as stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Which tensors from [`Mlp::tensors_mut`] receive weight decay (weights only).
    pub fn decay_mask(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|_| [true, false]).collect()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let z = affine(layer, &current);
            let a = z.map(|v| layer.activation.apply(v));
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok((current, Tape { version: self.version, inputs, pre }))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut current: Option<Matrix> = None;
        for layer in &self.layers {
            let mut z = affine(layer, current.as_ref().unwrap_or(input));
            if layer.activation != Activation::Identity {
                z.as_mut_slice().iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            }
            current = Some(z);
        }
        Ok(current.expect("at least one layer"))
    }

    pub fn backward(&self, tape: &Tape, grad_output: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if tape.version != self.version || tape.pre.len() != self.layers.len() {
            return Err(Error::contract("tape was recorded against different parameters"));
        }
        let rows = tape.batch_rows();
        if grad_output.shape() != (rows, self.output_dim()) {
            return Err(Error::shape(format!(
                "output gradient is {}x{}, expected {rows}x{}",
                grad_output.rows(),
                grad_output.cols(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            // through the activation
            let z = &tape.pre[k];
            if layer.activation != Activation::Identity {
                for (g, &zv) in upstream.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *g *= layer.activation.derivative(zv);
                }
            }
            let x = &tape.inputs[k];
            let mut gw = Matrix::zeros(layer.fan_in(), layer.fan_out());
            let mut gb = vec![0.0; layer.fan_out()];
            for i in 0..rows {
                let gi = upstream.row(i);
                axpy(1.0, gi, &mut gb);
                for (kk, &xv) in x.row(i).iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, gi, gw.row_mut(kk));
                    }
                }
            }
            let mut gx = Matrix::zeros(rows, layer.fan_in());
            for i in 0..rows {
                let gi = upstream.row(i);
                for (kk, out) in gx.row_mut(i).iter_mut().enumerate() {
                    *out = dot(gi, layer.weights.row(kk));
                }
            }
            grads.push(DenseGrad { weights: gw, bias: gb });
            upstream = gx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn affine(layer: &Dense, x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), layer.fan_out());
    for i in 0..x.rows() {
        let dst = z.row_mut(i);
        dst.copy_from_slice(&layer.bias);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv != 0.0 {
                axpy(xv, layer.weights.row(k), dst);
            }
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, Domain::Eval, 0);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Scalar re-evaluation of the same network, one output at a time.
    fn scalar_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in mlp.layers() {
            let mut next = vec![0.0; l.fan_out()];
            for (o, v) in next.iter_mut().enumerate() {
                let mut s = l.bias[o];
                for (k, xk) in cur.iter().enumerate() {
                    s += xk * l.weights[(k, o)];
                }
                *v = l.activation.apply(s);
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense { weights: Matrix::identity(3), bias: vec![0.0; 3], activation: Activation::Identity };
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = random_input(4, 3, 1);
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_through_relu_gives_relu_of_bias() {
        let layer =
            Dense { weights: Matrix::identity(3), bias: vec![-1.0, 0.5, 2.0], activation: Activation::Relu };
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let out = mlp.predict(&Matrix::zeros(2, 3)).unwrap();
        for r in out.row_iter() {
            assert_eq!(r, &[0.0, 0.5, 2.0]);
        }
    }

    #[test]
    fn forward_matches_scalar_reevaluation() {
        let mut rng = stream(3, Domain::Init, 0);
        let mlp = Mlp::new(&[5, 7, 3], Activation::Silu, &mut rng).unwrap();
        let x = random_input(6, 5, 2);
        let (y, _) = mlp.forward(&x).unwrap();
        for i in 0..6 {
            let expect = scalar_forward(&mlp, x.row(i));
            for (a, b) in y.row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = stream(3, Domain::Init, 0);
        let mlp = Mlp::new(&[4, 2], Activation::Relu, &mut rng).unwrap();
        assert!(matches!(mlp.forward(&Matrix::zeros(1, 3)), Err(Error::Shape(_))));
        let (_, tape) = mlp.forward(&Matrix::zeros(1, 4)).unwrap();
        assert!(matches!(mlp.backward(&tape, &Matrix::zeros(2, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = stream(3, Domain::Init, 0);
        let mut mlp = Mlp::new(&[4, 2], Activation::Relu, &mut rng).unwrap();
        let (_, tape) = mlp.forward(&Matrix::zeros(1, 4)).unwrap();
        mlp.tensors_mut()[0][0] += 1.0;
        assert!(matches!(mlp.backward(&tape, &Matrix::zeros(1, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = stream(4, Domain::Init, 0);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Silu, &mut rng).unwrap();
        let x = random_input(5, 3, 9);
        let (_, tape) = mlp.forward(&x).unwrap();
        let (g, gx) = mlp.backward(&tape, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_chain_rule() {
        // y = w x, dL/dw = x * g
        let layer = Dense {
            weights: Matrix::from_vec(1, 1, vec![1.7]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_vec(1, 1, vec![0.3]).unwrap();
        let (_, tape) = mlp.forward(&x).unwrap();
        let (g, gx) = mlp.backward(&tape, &Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        assert!((g.layers[0].weights[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((gx[(0, 0)] - 3.4).abs() < 1e-15);
    }

    #[test]
    fn identity_network_is_affine() {
        let mut rng = stream(5, Domain::Init, 0);
        let mut mlp = Mlp::new(&[4, 6, 3], Activation::Identity, &mut rng).unwrap();
        for t in mlp.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.1;
            }
        }
        let a = random_input(1, 4, 10);
        let b = random_input(1, 4, 11);
        let ab = Matrix::from_vec(1, 4, a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect()).unwrap();
        let f0 = mlp.predict(&Matrix::zeros(1, 4)).unwrap();
        let (fa, fb, fab) = (mlp.predict(&a).unwrap(), mlp.predict(&b).unwrap(), mlp.predict(&ab).unwrap());
        for j in 0..3 {
            // f(a+b) - f(0) = (f(a) - f(0)) + (f(b) - f(0))
            let lhs = fab[(0, j)] - f0[(0, j)];
            let rhs = fa[(0, j)] - f0[(0, j)] + fb[(0, j)] - f0[(0, j)];
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
