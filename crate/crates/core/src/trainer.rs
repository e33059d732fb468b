//! Datasets and plain mini-batch SGD with weight decay.
//!
//! Training is deliberately simple and fully deterministic: one seeded RNG
//! drives the shuffling, updates are applied in a fixed order, and matrix
//! products run single-threaded.

use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Network};
use crate::numerics::{gemm, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;
/// Width of the hidden layer of the synthetic teacher network.
pub const TEACHER_WIDTH: usize = 32;
/// Number of regression targets of the synthetic data, matching the 10-way MNIST head.
pub const SYNTH_OUTPUTS: usize = 10;

/// Inputs and targets, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidParameter("a dataset needs at least one sample".into()));
        }
        if inputs.rows() != targets.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::NonFinite { context: "dataset" });
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        let end = end.min(self.len());
        if start >= end {
            return Err(Error::InvalidParameter(format!("empty slice {start}..{end}")));
        }
        let d = self.input_dim();
        let t = self.target_dim();
        let inputs = Matrix::from_vec(end - start, d, self.inputs.as_slice()[start * d..end * d].to_vec())?;
        let targets = Matrix::from_vec(end - start, t, self.targets.as_slice()[start * t..end * t].to_vec())?;
        Dataset::new(self.name.clone(), inputs, targets)
    }

    /// Class index of each row (argmax of the target row).
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.targets.row(i))).collect()
    }

    /// Writes `x0..x{d-1},y0..y{k-1}` rows as CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header: Vec<String> = (0..self.input_dim()).map(|j| format!("x{j}")).collect();
        header.extend((0..self.target_dim()).map(|j| format!("y{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let rec: Vec<String> = self
                .inputs
                .row(i)
                .iter()
                .chain(self.targets.row(i))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `ψ(y, f) = ‖f − y‖²`.
    Squared,
    /// `ψ(y, f) = −Σ_k y_k log softmax(f)_k`.
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Per-sample loss; `grad`, when given, receives `∂ψ/∂f`.
    pub fn eval(self, output: &[f64], target: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self {
            Loss::Squared => {
                let mut total = 0.0;
                match grad {
                    Some(g) => {
                        for ((gi, &f), &y) in g.iter_mut().zip(output).zip(target) {
                            *gi = 2.0 * (f - y);
                            total += (f - y) * (f - y);
                        }
                    }
                    None => {
                        for (&f, &y) in output.iter().zip(target) {
                            total += (f - y) * (f - y);
                        }
                    }
                }
                total
            }
            Loss::SoftmaxCrossEntropy => {
                let max = output.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = output.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                let total: f64 = output.iter().zip(target).map(|(&f, &y)| -y * (f - log_z)).sum();
                if let Some(g) = grad {
                    let ysum: f64 = target.iter().sum();
                    for ((gi, &f), &y) in g.iter_mut().zip(output).zip(target) {
                        *gi = ysum * (f - log_z).exp() - y;
                    }
                }
                total
            }
        }
    }

    pub fn mean(self, outputs: &Matrix, targets: &Matrix) -> f64 {
        let n = outputs.rows();
        (0..n).map(|i| self.eval(outputs.row(i), targets.row(i), None)).sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// ℓ₂ coefficient added to every weight gradient (biases are not decayed).
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            seed: 0,
            loss: Loss::SoftmaxCrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("learning_rate and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean training loss over the full dataset after the last epoch.
    pub final_loss: f64,
    /// Mean minibatch loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
}

struct Grads {
    weight: Vec<Matrix>,
    bias: Vec<Vec<f64>>,
}

/// Runs mini-batch SGD on `net`; the network passed in is left untouched.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_dim() != net.input_dim() || data.target_dim() != net.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network maps {} -> {}, dataset is {} -> {}",
            net.input_dim(),
            net.output_dim(),
            data.input_dim(),
            data.target_dim()
        )));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = gather_rows(&data.inputs, batch);
            let y = gather_rows(&data.targets, batch);
            let (loss, grads) = backprop(&net, &x, &y, cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            total += loss * batch.len() as f64;
            apply_update(&mut net, &grads, cfg.learning_rate, cfg.weight_decay);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let outputs = net.forward_batch(&data.inputs).map_err(|e| match e {
        Error::NonFiniteActivation { .. } => Error::DivergedLoss { epoch: cfg.epochs },
        other => other,
    })?;
    let final_loss = cfg.loss.mean(&outputs, &data.targets);
    if !final_loss.is_finite() {
        return Err(Error::DivergedLoss { epoch: cfg.epochs });
    }
    Ok(TrainOutcome {
        network: net,
        final_loss,
        epoch_losses,
    })
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let c = m.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_vec(idx.len(), c, data).expect("rows of a finite matrix")
}

fn backprop(net: &Network, x: &Matrix, y: &Matrix, loss: Loss) -> Result<(f64, Grads)> {
    let n = x.rows();
    let layers = net.layers();
    // inputs[ℓ] feeds layer ℓ (0-based); pre[ℓ] is its pre-activation
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut a = x.clone();
    for layer in layers {
        let z = layer.preactivate_batch(&a)?;
        let mut next = z.clone();
        for v in next.as_mut_slice() {
            *v = layer.activation.apply(*v);
        }
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    let out = a;
    let mut delta = Matrix::zeros(n, out.cols());
    let mut total = 0.0;
    for i in 0..n {
        total += loss.eval(out.row(i), y.row(i), Some(delta.row_mut(i)));
    }
    let inv_n = 1.0 / n as f64;
    for v in delta.as_mut_slice() {
        *v *= inv_n;
    }

    let mut weight = vec![Matrix::zeros(0, 0); layers.len()];
    let mut bias = vec![Vec::new(); layers.len()];
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        if l + 1 < layers.len() {
            // delta currently holds ∂/∂(post-activation) of layer l
            for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre[l].as_slice()) {
                *d *= layer.activation.derivative(z);
            }
        }
        let (gw, gb, gin) = layer_backward(layer, &inputs[l], &delta, l > 0)?;
        weight[l] = gw;
        bias[l] = gb;
        if let Some(g) = gin {
            delta = g;
        }
    }
    Ok((total * inv_n, Grads { weight, bias }))
}

/// Gradients of one layer given `delta = ∂L/∂(pre-activation)`.
fn layer_backward(
    layer: &crate::model::Layer,
    input: &Matrix,
    delta: &Matrix,
    want_input: bool,
) -> Result<(Matrix, Vec<f64>, Option<Matrix>)> {
    let n = input.rows();
    match layer.kind {
        LayerKind::Dense => {
            let mut gw = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            gemm(1.0, delta, true, input, false, 0.0, &mut gw);
            let mut gb = vec![0.0; layer.bias.len()];
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            let gin = if want_input { Some(delta.matmul(&layer.weight)?) } else { None };
            Ok((gw, gb, gin))
        }
        LayerKind::Conv2d(g) => {
            let out_c = layer.weight.rows();
            let positions = g.out_height() * g.out_width();
            let mut gw = Matrix::zeros(out_c, layer.weight.cols());
            let mut gb = vec![0.0; out_c];
            let mut gin = if want_input { Some(Matrix::zeros(n, input.cols())) } else { None };
            for i in 0..n {
                let cols = g.im2col(input.row(i));
                let d = Matrix::from_vec(out_c, positions, delta.row(i).to_vec())?;
                gemm(1.0, &d, false, &cols, true, 1.0, &mut gw);
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    *gbv += d.row(oc).iter().sum::<f64>();
                }
                if let Some(gin) = gin.as_mut() {
                    let dcols = layer.weight.t_matmul(&d)?;
                    g.col2im(&dcols, gin.row_mut(i));
                }
            }
            Ok((gw, gb, gin))
        }
    }
}

fn apply_update(net: &mut Network, grads: &Grads, lr: f64, wd: f64) {
    for (layer, (gw, gb)) in net.layers_mut().iter_mut().zip(grads.weight.iter().zip(&grads.bias)) {
        for (w, g) in layer.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *w -= lr * (g + wd * *w);
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
}

/// Mean loss and (for multi-output nets) argmax accuracy on `data`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Empirical L₂ norm `‖f‖_n` of the network outputs.
    pub output_norm: f64,
}

pub fn evaluate(net: &Network, data: &Dataset, loss: Loss) -> Result<Metrics> {
    let out = net.forward_batch(&data.inputs)?;
    let n = data.len() as f64;
    let accuracy = if out.cols() > 1 {
        let hits = (0..data.len())
            .filter(|&i| argmax(out.row(i)) == argmax(data.targets.row(i)))
            .count();
        Some(hits as f64 / n)
    } else {
        None
    };
    let sq: f64 = out.as_slice().iter().map(|v| v * v).sum();
    Ok(Metrics {
        loss: loss.mean(&out, &data.targets),
        accuracy,
        output_norm: (sq / n).sqrt(),
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(path.to_path_buf()))
}

/// Reads up to `limit` samples from an IDX image/label pair (optionally gzipped).
/// Pixels are scaled to `[0, 1]`; labels become one-hot rows over 10 classes.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, limit: usize) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    if limit == 0 {
        return Err(Error::InvalidParameter("limit must be at least 1".into()));
    }
    let img = read_all(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let lab = read_all(labels_path)?;
    let lmagic = be_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: lmagic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lcount = be_u32(&lab, 4, labels_path)? as usize;
    let n = limit.min(count).min(lcount);
    let d = rows * cols;
    if img.len() < 16 + n * d {
        return Err(Error::TruncatedFile(images_path.to_path_buf()));
    }
    if lab.len() < 8 + n {
        return Err(Error::TruncatedFile(labels_path.to_path_buf()));
    }
    let inputs: Vec<f64> = img[16..16 + n * d].iter().map(|&p| p as f64 / 255.0).collect();
    let mut targets = vec![0.0; n * MNIST_CLASSES];
    for (i, &l) in lab[8..8 + n].iter().enumerate() {
        if l as usize >= MNIST_CLASSES {
            return Err(Error::InvalidParameter(format!("label {l} out of range")));
        }
        targets[i * MNIST_CLASSES + l as usize] = 1.0;
    }
    Dataset::new("mnist", Matrix::from_vec(n, d, inputs)?, Matrix::from_vec(n, MNIST_CLASSES, targets)?)
}

/// Writes an uncompressed IDX image file (`u8` pixels, big-endian header).
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Gaussian inputs whose population covariance is `diag(μ)` with `μ_j ∝ j^{-decay}`
/// (normalized to unit mean variance), labelled by a random one-hidden-layer ReLU
/// teacher of width 32 with [`SYNTH_OUTPUTS`] outputs. Each target column is
/// standardized to zero mean and unit variance over the sample.
pub fn synth_spectrum(n: usize, d: usize, decay: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidParameter("synthetic data needs n, d ≥ 1".into()));
    }
    if !(decay >= 0.0) || !decay.is_finite() {
        return Err(Error::InvalidParameter(format!("decay {decay} must be finite and ≥ 0")));
    }
    let raw: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-decay)).collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    let std: Vec<f64> = raw.iter().map(|m| (m / mean).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for s in &std {
            let g: f64 = StandardNormal.sample(&mut rng);
            data.push(s * g);
        }
    }
    let inputs = Matrix::from_vec(n, d, data)?;
    let teacher = Network::dense_relu(&[d, TEACHER_WIDTH, SYNTH_OUTPUTS], seed ^ 0x7ea_c4e5)?;
    let mut targets = teacher.forward_batch(&inputs)?;
    for c in 0..SYNTH_OUTPUTS {
        let col = targets.col(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt().recip() } else { 1.0 };
        for (r, y) in col.iter().enumerate() {
            targets.set(r, c, (y - mean) * scale);
        }
    }
    Dataset::new(format!("synth_p{decay}"), inputs, targets)
}
