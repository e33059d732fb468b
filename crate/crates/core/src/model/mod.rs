//! Feedforward networks built from dense and 2-d convolutional layers.
//!
//! A network with weight layers `1..=L` computes
//! `f(x) = (W⁽ᴸ⁾ η(·) + b⁽ᴸ⁾) ∘ … ∘ (W⁽¹⁾ x + b⁽¹⁾)`.
//! The *node layer* `ℓ` (for `2 ≤ ℓ ≤ L`) is the post-activation input to weight
//! layer `ℓ`, i.e. the output of weight layer `ℓ − 1`. Node layer 1 is the raw
//! input. All activations, including conv feature maps, are flattened in
//! channel-major order: `(channel, row, col)`.

pub(crate) mod format;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, Matrix};

pub use format::{load, save, MODEL_MANIFEST};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Elementwise activation. Hidden layers must be scale invariant and 1-Lipschitz,
/// which restricts them to ReLU and leaky ReLU with slope in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    /// No activation; only valid on the output layer.
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::None => x,
        }
    }

    /// Derivative at pre-activation `x` (the subgradient 0 is used at 0 for ReLU).
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
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::None => 1.0,
        }
    }

    fn validate_hidden(self) -> Result<()> {
        match self {
            Activation::Relu => Ok(()),
            Activation::LeakyRelu { slope } if slope > 0.0 && slope <= 1.0 => Ok(()),
            Activation::LeakyRelu { slope } => Err(Error::InvalidParameter(format!(
                "leaky relu slope {slope} outside (0, 1]"
            ))),
            Activation::None => Err(Error::InvalidParameter(
                "hidden layers need a relu or leaky relu activation".into(),
            )),
        }
    }
}

/// Shape of an activation tensor. Dense activations have `height = width = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn flat(n: usize) -> Self {
        Shape {
            channels: n,
            height: 1,
            width: 1,
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Geometry of a 2-d convolution over a `(in_channels, in_height, in_width)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 {
            return Err(Error::InvalidParameter(format!("degenerate conv geometry {self:?}")));
        }
        if self.in_height + 2 * self.padding < self.kernel || self.in_width + 2 * self.padding < self.kernel {
            return Err(Error::InvalidParameter(format!("kernel larger than padded input in {self:?}")));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn input_shape(&self) -> Shape {
        Shape {
            channels: self.in_channels,
            height: self.in_height,
            width: self.in_width,
        }
    }

    /// Input position read by kernel tap `(a, b)` at output position `(ou, ov)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    pub fn tap_source(&self, ou: usize, ov: usize, a: usize, b: usize) -> Option<(usize, usize)> {
        let u = (ou * self.stride + a) as isize - self.padding as isize;
        let v = (ov * self.stride + b) as isize - self.padding as isize;
        if u < 0 || v < 0 || u as usize >= self.in_height || v as usize >= self.in_width {
            None
        } else {
            Some((u as usize, v as usize))
        }
    }

    /// Unrolls one `(C, H, W)` sample into a `(C·k·k) × (OH·OW)` patch matrix.
    pub fn im2col(&self, x: &[f64]) -> Matrix {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let hw = self.in_height * self.in_width;
        let mut cols = Matrix::zeros(self.in_channels * k * k, oh * ow);
        for c in 0..self.in_channels {
            for a in 0..k {
                for b in 0..k {
                    let row = cols.row_mut((c * k + a) * k + b);
                    for ou in 0..oh {
                        for ov in 0..ow {
                            if let Some((u, v)) = self.tap_source(ou, ov, a, b) {
                                row[ou * ow + ov] = x[c * hw + u * self.in_width + v];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates patch gradients back into `dx`.
    pub fn col2im(&self, cols: &Matrix, dx: &mut [f64]) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let hw = self.in_height * self.in_width;
        for c in 0..self.in_channels {
            for a in 0..k {
                for b in 0..k {
                    let row = cols.row((c * k + a) * k + b);
                    for ou in 0..oh {
                        for ov in 0..ow {
                            if let Some((u, v)) = self.tap_source(ou, ov, a, b) {
                                dx[c * hw + u * self.in_width + v] += row[ou * ow + ov];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d(ConvGeometry),
}

/// One affine map followed by an activation.
///
/// Dense weights are `out × in`; conv weights are `out_channels × (in_channels·k·k)`
/// with each row a flattened `(channel, row, col)` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn dense(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch(format!(
                "dense bias length {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Layer {
            kind: LayerKind::Dense,
            weight,
            bias,
            activation,
        })
    }

    pub fn conv2d(geometry: ConvGeometry, weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        geometry.validate()?;
        if weight.cols() != geometry.in_channels * geometry.taps() {
            return Err(Error::ShapeMismatch(format!(
                "conv weight has {} columns, geometry needs {}",
                weight.cols(),
                geometry.in_channels * geometry.taps()
            )));
        }
        if bias.len() != weight.rows() {
            return Err(Error::ShapeMismatch(format!(
                "conv bias length {} for {} channels",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Layer {
            kind: LayerKind::Conv2d(geometry),
            weight,
            bias,
            activation,
        })
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight.cols(),
            LayerKind::Conv2d(g) => g.input_shape().len(),
        }
    }

    pub fn output_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Dense => Shape::flat(self.weight.rows()),
            LayerKind::Conv2d(g) => Shape {
                channels: self.weight.rows(),
                height: g.out_height(),
                width: g.out_width(),
            },
        }
    }

    /// Pre-activations for a batch of flattened inputs (`n × input_len`).
    pub fn preactivate_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "layer expects {} inputs, got {}",
                self.input_len(),
                x.cols()
            )));
        }
        match self.kind {
            LayerKind::Dense => {
                let mut z = Matrix::zeros(x.rows(), self.weight.rows());
                gemm(1.0, x, false, &self.weight, true, 0.0, &mut z);
                for r in 0..z.rows() {
                    for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                        *v += b;
                    }
                }
                Ok(z)
            }
            LayerKind::Conv2d(g) => {
                let out_len = self.output_shape().len();
                let positions = g.out_height() * g.out_width();
                let mut z = Matrix::zeros(x.rows(), out_len);
                for i in 0..x.rows() {
                    let out = self.conv_sample(&g, x.row(i))?;
                    let dst = z.row_mut(i);
                    for oc in 0..self.weight.rows() {
                        for p in 0..positions {
                            dst[oc * positions + p] = out.get(oc, p) + self.bias[oc];
                        }
                    }
                }
                Ok(z)
            }
        }
    }

    fn conv_sample(&self, g: &ConvGeometry, x: &[f64]) -> Result<Matrix> {
        let cols = g.im2col(x);
        self.weight.matmul(&cols)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// An ordered stack of layers with a fixed input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
}

impl Network {
    /// Validates that layer dimensions chain, hidden activations satisfy the
    /// scale-invariance/1-Lipschitz requirement, and the last layer is affine.
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("a network needs at least one layer".into()));
        }
        let mut shape = input_shape;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite { context: "layer parameters" });
            }
            if layer.input_len() != shape.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} expects {} inputs but receives {}",
                    i + 1,
                    layer.input_len(),
                    shape.len()
                )));
            }
            if let LayerKind::Conv2d(g) = layer.kind {
                if shape.spatial() > 1 && g.input_shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer {} expects input {:?}, previous layer produces {:?}",
                        i + 1,
                        g.input_shape(),
                        shape
                    )));
                }
            }
            if i == last {
                if layer.activation != Activation::None {
                    return Err(Error::InvalidParameter("the output layer must not have an activation".into()));
                }
            } else {
                layer.activation.validate_hidden()?;
            }
            shape = layer.output_shape();
        }
        Ok(Network { input_shape, layers })
    }

    /// Dense ReLU network with the given widths `[d_x, m_2, …, m_{L+1}]`,
    /// He-initialized from `seed`, zero biases.
    pub fn dense_relu(widths: &[usize], seed: u64) -> Result<Self> {
        Self::dense_with_activation(widths, Activation::Relu, seed)
    }

    pub fn dense_with_activation(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!("bad widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let std = (2.0 / w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weight = Matrix::from_fn(w[1], w[0], |_, _| normal.sample(&mut rng));
            let act = if i + 2 == widths.len() { Activation::None } else { activation };
            layers.push(Layer::dense(weight, vec![0.0; w[1]], act)?);
        }
        Network::new(Shape::flat(widths[0]), layers)
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_shape().len())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Weight layer `ℓ` (1-based).
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l - 1]
    }

    /// Shape of node layer `ℓ ∈ 1..=L+1` (1 is the input, `L + 1` the output).
    pub fn node_shape(&self, l: usize) -> Shape {
        if l <= 1 {
            self.input_shape
        } else {
            self.layers[l - 2].output_shape()
        }
    }

    /// Widths `m_1, …, m_{L+1}` counted in channels (nodes for dense layers).
    pub fn widths(&self) -> Vec<usize> {
        (1..=self.depth() + 1).map(|l| self.node_shape(l).channels).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    fn check_hidden_index(&self, l: usize) -> Result<()> {
        if l < 2 || l > self.depth() {
            return Err(Error::InvalidParameter(format!(
                "node layer {l} outside 2..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|_| Error::NonFinite { context: "network input" })?;
        Ok(self.forward_batch(&batch)?.into_vec())
    }

    /// Post-activation input `φ⁽ℓ⁾(x)` of weight layer `ℓ`, for `2 ≤ ℓ ≤ L`.
    pub fn forward_capture(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        let batch = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|_| Error::NonFinite { context: "network input" })?;
        Ok(self.capture_batch(&batch, l)?.into_vec())
    }

    /// Outputs for each row of `x`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.run_layers(x, self.depth())
    }

    /// `φ⁽ℓ⁾` for each row of `x`, flattened `(channel, row, col)`.
    pub fn capture_batch(&self, x: &Matrix, l: usize) -> Result<Matrix> {
        self.check_hidden_index(l)?;
        self.run_layers(x, l - 1)
    }

    /// Applies weight layers `1..=count` (with their activations).
    fn run_layers(&self, x: &Matrix, count: usize) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut a = x.clone();
        for (i, layer) in self.layers[..count].iter().enumerate() {
            let mut z = layer.preactivate_batch(&a)?;
            let act = layer.activation;
            for v in z.as_mut_slice() {
                *v = act.apply(*v);
            }
            if !z.is_finite() {
                return Err(Error::NonFiniteActivation { layer: i + 1 });
            }
            a = z;
        }
        Ok(a)
    }

    /// Replaces the layer list, re-running all validation.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Network> {
        Network::new(self.input_shape, layers)
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = Network::new(
            Shape::flat(3),
            vec![Layer::dense(Matrix::identity(3), vec![0.0; 3], Activation::None).unwrap()],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn negated_relu_kills_positive_input() {
        let net = Network::new(
            Shape::flat(3),
            vec![
                Layer::dense(Matrix::identity(3).scale(-1.0), vec![0.0; 3], Activation::Relu).unwrap(),
                Layer::dense(Matrix::identity(3), vec![0.0; 3], Activation::None).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(net.forward_capture(&[1.0, 2.0, 3.0], 2).unwrap(), vec![0.0; 3]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        let net = Network::dense_relu(&[3, 4, 2], 9).unwrap();
        let x = [0.3, -1.2, 0.7];
        let (w1, b1) = (&net.layer(1).weight, &net.layer(1).bias);
        let (w2, b2) = (&net.layer(2).weight, &net.layer(2).bias);
        let mut hidden = [0.0; 4];
        for j in 0..4 {
            let mut s = b1[j];
            for k in 0..3 {
                s += w1.get(j, k) * x[k];
            }
            hidden[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut out = [0.0; 2];
        for j in 0..2 {
            let mut s = b2[j];
            for k in 0..4 {
                s += w2.get(j, k) * hidden[k];
            }
            out[j] = s;
        }
        assert!(vec_close(&net.forward(&x).unwrap(), &out, 1e-12));
        assert!(vec_close(&net.forward_capture(&x, 2).unwrap(), &hidden, 1e-12));
    }

    #[test]
    fn capture_identity_first_layer() {
        let net = Network::new(
            Shape::flat(2),
            vec![
                Layer::dense(Matrix::identity(2), vec![0.0; 2], Activation::Relu).unwrap(),
                Layer::dense(Matrix::identity(2), vec![0.0; 2], Activation::None).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(net.forward_capture(&[0.5, 2.0], 2).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn capture_composes_with_last_layer() {
        let net = Network::dense_relu(&[5, 7, 6, 3], 4).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, -0.5];
        let phi = net.forward_capture(&x, 3).unwrap();
        let last = net.layer(3);
        let mut expected = last.weight.matvec(&phi).unwrap();
        for (e, b) in expected.iter_mut().zip(&last.bias) {
            *e += b;
        }
        assert!(vec_close(&net.forward(&x).unwrap(), &expected, 1e-12));
    }

    #[test]
    fn invalid_networks_rejected() {
        let bad_chain = Network::new(
            Shape::flat(3),
            vec![
                Layer::dense(Matrix::zeros(4, 3), vec![0.0; 4], Activation::Relu).unwrap(),
                Layer::dense(Matrix::zeros(2, 5), vec![0.0; 2], Activation::None).unwrap(),
            ],
        );
        assert!(matches!(bad_chain, Err(Error::ShapeMismatch(_))));
        let bad_output = Network::new(
            Shape::flat(3),
            vec![Layer::dense(Matrix::zeros(1, 3), vec![0.0], Activation::Relu).unwrap()],
        );
        assert!(bad_output.is_err());
        let bad_slope = Network::new(
            Shape::flat(3),
            vec![
                Layer::dense(Matrix::zeros(2, 3), vec![0.0; 2], Activation::LeakyRelu { slope: 1.5 }).unwrap(),
                Layer::dense(Matrix::zeros(1, 2), vec![0.0], Activation::None).unwrap(),
            ],
        );
        assert!(bad_slope.is_err());
        let net = Network::dense_relu(&[3, 2, 1], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::ShapeMismatch(_))));
        assert!(net.forward_capture(&[1.0, 2.0, 3.0], 1).is_err());
    }

    #[test]
    fn conv_forward_matches_direct_loop() {
        let g = ConvGeometry {
            in_channels: 2,
            in_height: 4,
            in_width: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(3, 18, |_, _| rng.random_range(-1.0..1.0));
        let b = vec![0.1, -0.2, 0.3];
        let layer = Layer::conv2d(g, w.clone(), b.clone(), Activation::None).unwrap();
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = layer.preactivate_batch(&Matrix::from_vec(1, 32, x.clone()).unwrap()).unwrap();
        for oc in 0..3 {
            for ou in 0..4 {
                for ov in 0..4 {
                    let mut s = b[oc];
                    for c in 0..2 {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let u = ou as isize + a as isize - 1;
                                let v = ov as isize + bb as isize - 1;
                                if (0..4).contains(&u) && (0..4).contains(&v) {
                                    s += w.get(oc, c * 9 + a * 3 + bb) * x[c * 16 + u as usize * 4 + v as usize];
                                }
                            }
                        }
                    }
                    assert!((got.get(0, oc * 16 + ou * 4 + ov) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn activation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Relu, Activation::LeakyRelu { slope: DEFAULT_LEAKY_SLOPE }] {
            for _ in 0..1000 {
                let u: f64 = rng.random_range(-10.0..10.0);
                let v: f64 = rng.random_range(-10.0..10.0);
                let a: f64 = rng.random_range(0.01..10.0);
                assert!((act.apply(u) - act.apply(v)).abs() <= (u - v).abs() + 1e-15);
                assert!((act.apply(a * u) - a * act.apply(u)).abs() <= 1e-12 * (a * u).abs().max(1.0));
            }
        }
    }

    #[test]
    fn rescaling_hidden_layer_preserves_function() {
        let net = Network::dense_relu(&[4, 6, 2], 21).unwrap();
        let a = 3.7;
        let mut layers = net.clone().into_layers();
        layers[0].weight = layers[0].weight.scale(a);
        layers[0].bias.iter_mut().for_each(|b| *b *= a);
        layers[1].weight = layers[1].weight.scale(1.0 / a);
        let scaled = net.with_layers(layers).unwrap();
        let x = [0.2, -0.4, 1.1, 0.5];
        assert!(vec_close(&net.forward(&x).unwrap(), &scaled.forward(&x).unwrap(), 1e-12));
    }
}
