//! Empirical noncentered covariances of layer inputs.
//!
//! For a node layer with `C` channels and `S` spatial positions per channel
//! (dense layers have `S = 1`) the channel covariance is
//! `Σ̂_{k,k′} = (1/(nS)) Σᵢ Σ_s φ_{k,s}(xᵢ) φ_{k′,s}(xᵢ)`.
//! Sums run over fixed-size chunks of positions combined by a fixed-shape binary
//! tree, so results do not depend on the number of worker threads.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::format::{read_blob, write_blob, BlobRef};
use crate::model::{LayerKind, Network};
use crate::numerics::{gemm, sym_eig, Matrix, SymmetricSpectrum};
use crate::trainer::Dataset;

/// Rows of activations summed per leaf of the reduction tree.
const CHUNK_ROWS: usize = 256;
pub const COVARIANCE_MANIFEST: &str = "covariance.json";

/// `Σ̂⁽ℓ⁾` for node layer `ℓ` with a lazily computed, cached spectrum.
#[derive(Clone, Debug)]
pub struct LayerCovariance {
    pub layer: usize,
    pub sigma: Matrix,
    /// Number of samples.
    pub n: usize,
    /// Spatial positions averaged per sample (1 for dense layers).
    pub positions: usize,
    spectrum: OnceLock<SymmetricSpectrum>,
}

impl LayerCovariance {
    pub fn new(layer: usize, sigma: Matrix, n: usize, positions: usize) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::ShapeMismatch(format!("covariance must be square, got {:?}", sigma.shape())));
        }
        if !sigma.is_finite() {
            return Err(Error::NonFinite { context: "covariance" });
        }
        let asym = sigma.max_asymmetry();
        if asym > 1e-10 {
            return Err(Error::NonSymmetric { max_asym: asym });
        }
        Ok(LayerCovariance {
            layer,
            sigma,
            n,
            positions,
            spectrum: OnceLock::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.rows()
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    pub fn spectrum(&self) -> Result<&SymmetricSpectrum> {
        if let Some(s) = self.spectrum.get() {
            return Ok(s);
        }
        let s = sym_eig(&self.sigma)?;
        Ok(self.spectrum.get_or_init(|| s))
    }

    /// Number of eigenvalues above `1e-12 · μ̂₁`.
    pub fn rank(&self) -> Result<usize> {
        Ok(self.spectrum()?.rank(RANK_TOL))
    }

    /// Writes `covariance.json` plus a little-endian blob into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = format!("sigma{:02}.bin", self.layer);
        write_blob(dir, &file, self.sigma.as_slice())?;
        let manifest = CovManifest {
            format: "specprune-covariance".into(),
            layer: self.layer,
            n: self.n,
            positions: self.positions,
            dtype: "f64".into(),
            endianness: "little".into(),
            sigma: BlobRef {
                file,
                shape: vec![self.dim(), self.dim()],
            },
        };
        let path = dir.join(COVARIANCE_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(COVARIANCE_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CovManifest =
            serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))?;
        if m.format != "specprune-covariance" || m.dtype != "f64" || m.endianness != "little" || m.sigma.shape.len() != 2 {
            return Err(Error::CorruptManifest(format!("unsupported covariance manifest {}", path.display())));
        }
        let values = read_blob(dir, &m.sigma)?;
        let sigma = Matrix::from_vec(m.sigma.shape[0], m.sigma.shape[1], values)?;
        LayerCovariance::new(m.layer, sigma, m.n, m.positions)
    }
}

pub(crate) const RANK_TOL: f64 = 1e-12;

#[derive(Serialize, Deserialize)]
struct CovManifest {
    format: String,
    layer: usize,
    n: usize,
    positions: usize,
    dtype: String,
    endianness: String,
    sigma: BlobRef,
}

/// Cross covariance between the next layer's (scaled) outputs and the channels
/// of node layer `ℓ`, plus the energy of those outputs.
///
/// With `Y` the per-position output signal, `cross = E[Y φᵀ]` and
/// `z_energy = E‖Y‖²`; for dense layers `cross = ZΣ̂` and `z_energy = Tr[ZΣ̂Zᵀ]`.
#[derive(Clone, Debug)]
pub struct CrossCovariance {
    pub layer: usize,
    pub z_sigma: Matrix,
    pub z_energy: f64,
}

impl CrossCovariance {
    /// Dense form: `ZΣ̂` and `Tr[ZΣ̂Zᵀ]`.
    pub fn from_dense(cov: &LayerCovariance, z: &Matrix) -> Result<Self> {
        if z.cols() != cov.dim() {
            return Err(Error::ShapeMismatch(format!(
                "Z has {} columns, covariance dimension is {}",
                z.cols(),
                cov.dim()
            )));
        }
        let z_sigma = z.matmul(&cov.sigma)?;
        let z_energy = (0..z.rows()).map(|r| crate::numerics::dot(z_sigma.row(r), z.row(r))).sum::<f64>();
        Ok(CrossCovariance {
            layer: cov.layer,
            z_sigma,
            z_energy: z_energy.max(0.0),
        })
    }
}

fn check_layer(net: &Network, l: usize) -> Result<()> {
    if l < 2 || l > net.depth() {
        return Err(Error::InvalidParameter(format!("node layer {l} outside 2..={}", net.depth())));
    }
    Ok(())
}

/// Captures `φ⁽ℓ⁾` for all samples, with a shape check against the dataset.
fn capture(net: &Network, data: &Dataset, l: usize) -> Result<Matrix> {
    check_layer(net, l)?;
    if data.input_dim() != net.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} inputs, dataset has {}",
            net.input_dim(),
            data.input_dim()
        )));
    }
    net.capture_batch(&data.inputs, l)
}

/// Empirical covariance of node layer `ℓ` (channel-wise when it is a feature map).
pub fn layer_cov(net: &Network, data: &Dataset, l: usize) -> Result<LayerCovariance> {
    let acts = capture(net, data, l)?;
    let shape = net.node_shape(l);
    covariance_from_activations(l, &acts, shape.channels, shape.spatial())
}

/// Channel covariance of a node layer produced by a convolution.
pub fn channel_cov(net: &Network, data: &Dataset, l: usize) -> Result<LayerCovariance> {
    check_layer(net, l)?;
    if !matches!(net.layer(l - 1).kind, LayerKind::Conv2d(_)) {
        return Err(Error::InvalidParameter(format!("node layer {l} is not produced by a convolution")));
    }
    layer_cov(net, data, l)
}

/// Covariance from raw activations laid out `(channel, position)` per row.
pub fn covariance_from_activations(l: usize, acts: &Matrix, channels: usize, positions: usize) -> Result<LayerCovariance> {
    if acts.cols() != channels * positions {
        return Err(Error::ShapeMismatch(format!(
            "activations have {} columns, expected {channels}x{positions}",
            acts.cols()
        )));
    }
    let n = acts.rows();
    if n == 0 {
        return Err(Error::InvalidParameter("covariance needs at least one sample".into()));
    }
    let rows = if positions == 1 { acts.clone() } else { position_rows(acts, channels, positions) };
    let mut sigma = tree_gram(&rows, 0, rows.rows());
    sigma = sigma.scale(1.0 / (n * positions) as f64);
    sigma.symmetrize();
    LayerCovariance::new(l, sigma, n, positions)
}

/// Reshapes `n × (C·S)` activations into `(n·S) × C`, one row per position.
fn position_rows(acts: &Matrix, channels: usize, positions: usize) -> Matrix {
    let n = acts.rows();
    let mut out = Matrix::zeros(n * positions, channels);
    for i in 0..n {
        let src = acts.row(i);
        for s in 0..positions {
            let dst = out.row_mut(i * positions + s);
            for (c, d) in dst.iter_mut().enumerate() {
                *d = src[c * positions + s];
            }
        }
    }
    out
}

/// `Σ_{r∈[start,end)} xᵣxᵣᵀ` summed over a fixed binary tree of row chunks.
fn tree_gram(x: &Matrix, start: usize, end: usize) -> Matrix {
    tree_sum(x.cols(), x.cols(), start, end, &|a, b, out| {
        let block = Matrix::from_vec(b - a, x.cols(), x.as_slice()[a * x.cols()..b * x.cols()].to_vec()).expect("finite rows");
        gemm(1.0, &block, true, &block, false, 1.0, out);
    })
}

/// Sums `leaf(range)` contributions over `[start, end)` split into
/// `CHUNK_ROWS`-sized leaves and combined pairwise in a fixed order.
fn tree_sum<F>(rows: usize, cols: usize, start: usize, end: usize, leaf: &F) -> Matrix
where
    F: Fn(usize, usize, &mut Matrix) + Sync,
{
    let chunks = (end - start).div_ceil(CHUNK_ROWS);
    if chunks <= 1 {
        let mut out = Matrix::zeros(rows, cols);
        if end > start {
            leaf(start, end, &mut out);
        }
        return out;
    }
    let mid = start + (chunks / 2) * CHUNK_ROWS;
    let (mut a, b) = rayon::join(
        || tree_sum(rows, cols, start, mid, leaf),
        || tree_sum(rows, cols, mid, end, leaf),
    );
    a.add_assign(&b);
    a
}

/// Appendix-style output cross covariance for node layer `ℓ` consumed by weight
/// layer `ℓ` (conv or dense), with `z` given in the consumer's weight-row layout.
///
/// For a convolutional consumer, each output map `out = z ⊛ φ` is spread back to
/// input positions: `Y_{k′}(u,v) = Σ_{(u′,v′): (u,v)∈Res(u′,v′)} out_{k′}(u′,v′) / I′(u,v)`,
/// where `I′(u,v)` counts the receptive fields containing `(u,v)`. A dense
/// consumer of a feature map behaves like a kernel covering the whole map.
pub fn output_channel_cov(net: &Network, data: &Dataset, l: usize, z: &Matrix) -> Result<CrossCovariance> {
    let acts = capture(net, data, l)?;
    let shape = net.node_shape(l);
    let consumer = net.layer(l);
    if z.cols() != consumer.weight.cols() {
        return Err(Error::ShapeMismatch(format!(
            "Z has {} columns, layer {l} weights have {}",
            z.cols(),
            consumer.weight.cols()
        )));
    }
    cross_from_activations(l, &acts, shape.channels, shape.spatial(), consumer.kind, z)
}

pub fn cross_from_activations(
    l: usize,
    acts: &Matrix,
    channels: usize,
    positions: usize,
    consumer: LayerKind,
    z: &Matrix,
) -> Result<CrossCovariance> {
    let n = acts.rows();
    let k_out = z.rows();
    let (cover, res) = match consumer {
        LayerKind::Conv2d(g) => {
            let mut cover = vec![0usize; positions];
            let mut res = Vec::with_capacity(g.out_height() * g.out_width());
            for ou in 0..g.out_height() {
                for ov in 0..g.out_width() {
                    let mut field = Vec::with_capacity(g.taps());
                    for a in 0..g.kernel {
                        for b in 0..g.kernel {
                            if let Some((u, v)) = g.tap_source(ou, ov, a, b) {
                                let s = u * g.in_width + v;
                                field.push(s);
                                cover[s] += 1;
                            }
                        }
                    }
                    res.push(field);
                }
            }
            (cover, Some((g, res)))
        }
        LayerKind::Dense => (vec![1; positions], None),
    };

    let leaf_cols = channels;
    let leaf = |a: usize, b: usize, out: &mut Matrix| {
        // out holds [cross (k_out × C) | energy column] in an augmented matrix
        for i in a..b {
            let phi = acts.row(i);
            let y = spread(phi, channels, positions, z, &cover, res.as_ref());
            for k in 0..k_out {
                let yk = &y[k * positions..(k + 1) * positions];
                let row = out.row_mut(k);
                for c in 0..leaf_cols {
                    row[c] += crate::numerics::dot(yk, &phi[c * positions..(c + 1) * positions]);
                }
                row[leaf_cols] += crate::numerics::dot(yk, yk);
            }
        }
    };
    let total = tree_sum(k_out, channels + 1, 0, n, &leaf);
    let norm = 1.0 / (n * positions) as f64;
    let z_sigma = Matrix::from_fn(k_out, channels, |k, c| total.get(k, c) * norm);
    let z_energy = (0..k_out).map(|k| total.get(k, channels)).sum::<f64>() * norm;
    if !z_sigma.is_finite() || !z_energy.is_finite() {
        return Err(Error::NonFinite { context: "output cross covariance" });
    }
    Ok(CrossCovariance { layer: l, z_sigma, z_energy })
}

/// `Y` (k_out × positions) for one sample.
fn spread(
    phi: &[f64],
    channels: usize,
    positions: usize,
    z: &Matrix,
    cover: &[usize],
    conv: Option<&(crate::model::ConvGeometry, Vec<Vec<usize>>)>,
) -> Vec<f64> {
    let k_out = z.rows();
    let mut y = vec![0.0; k_out * positions];
    match conv {
        Some((g, res)) => {
            let cols = g.im2col(phi);
            let out = z.matmul(&cols).expect("conv patch shapes agree");
            for k in 0..k_out {
                for (p, field) in res.iter().enumerate() {
                    let o = out.get(k, p);
                    for &s in field {
                        y[k * positions + s] += o;
                    }
                }
                for s in 0..positions {
                    if cover[s] > 0 {
                        y[k * positions + s] /= cover[s] as f64;
                    }
                }
            }
        }
        None => {
            debug_assert_eq!(z.cols(), channels * positions);
            for k in 0..k_out {
                let o = crate::numerics::dot(z.row(k), phi);
                y[k * positions..(k + 1) * positions].fill(o);
            }
        }
    }
    y
}

/// One row of a spectrum dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub rank: usize,
    pub eigenvalue: f64,
    pub normalized: f64,
}

/// Eigenvalues in descending order with their ratio to the largest one.
pub fn eigen_report(cov: &LayerCovariance) -> Result<Vec<EigenRow>> {
    let spec = cov.spectrum()?;
    let top = spec.eigenvalues.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(spec
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(j, &mu)| EigenRow {
            rank: j + 1,
            eigenvalue: mu,
            normalized: mu / top,
        })
        .collect())
}

pub fn write_eigen_report(cov: &LayerCovariance, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rows = eigen_report(cov)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ConvGeometry, Layer, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rel_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.sub(b).unwrap().frobenius_norm() <= tol * b.frobenius_norm().max(1e-300)
    }

    /// Identity first layer so that captured activations are relu(x).
    fn passthrough_net(d: usize) -> Network {
        Network::new(
            Shape::flat(d),
            vec![
                Layer::dense(Matrix::identity(d), vec![0.0; d], Activation::Relu).unwrap(),
                Layer::dense(Matrix::from_fn(1, d, |_, j| j as f64 + 1.0), vec![0.0], Activation::None).unwrap(),
            ],
        )
        .unwrap()
    }

    fn dataset(x: Matrix) -> Dataset {
        let n = x.rows();
        Dataset::new("t", x, Matrix::zeros(n, 1)).unwrap()
    }

    #[test]
    fn single_basis_sample() {
        let net = passthrough_net(3);
        let cov = layer_cov(&net, &dataset(Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap()), 2).unwrap();
        let mut expected = Matrix::zeros(3, 3);
        expected.set(0, 0, 1.0);
        assert_eq!(cov.sigma, expected);
    }

    #[test]
    fn duplicated_dataset_is_invariant() {
        let net = passthrough_net(4);
        let x = rand_matrix(7, 4, 1);
        let mut doubled = x.as_slice().to_vec();
        doubled.extend_from_slice(x.as_slice());
        let a = layer_cov(&net, &dataset(x), 2).unwrap();
        let b = layer_cov(&net, &dataset(Matrix::from_vec(14, 4, doubled).unwrap()), 2).unwrap();
        assert!(rel_close(&b.sigma, &a.sigma, 1e-14));
    }

    #[test]
    fn matches_outer_product_loop() {
        let net = Network::dense_relu(&[6, 5, 2], 3).unwrap();
        let x = rand_matrix(50, 6, 2);
        let cov = layer_cov(&net, &dataset(x.clone()), 2).unwrap();
        let mut oracle = Matrix::zeros(5, 5);
        for i in 0..50 {
            let phi = net.forward_capture(x.row(i), 2).unwrap();
            for a in 0..5 {
                for b in 0..5 {
                    oracle.set(a, b, oracle.get(a, b) + phi[a] * phi[b] / 50.0);
                }
            }
        }
        assert!(rel_close(&cov.sigma, &oracle, 1e-12));
        let mean_sq: f64 = (0..50)
            .map(|i| net.forward_capture(x.row(i), 2).unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 50.0;
        assert!((cov.trace() - mean_sq).abs() <= 1e-9 * mean_sq);
    }

    #[test]
    fn large_sample_is_psd_and_order_stable() {
        let net = Network::dense_relu(&[8, 12, 1], 5).unwrap();
        let x = rand_matrix(1000, 8, 9);
        let a = layer_cov(&net, &dataset(x.clone()), 2).unwrap();
        let b = layer_cov(&net, &dataset(x.clone()), 2).unwrap();
        assert_eq!(a.sigma, b.sigma);
        let mut rows: Vec<Vec<f64>> = (0..1000).map(|i| x.row(i).to_vec()).collect();
        rows.reverse();
        let c = layer_cov(&net, &dataset(Matrix::from_rows(&rows).unwrap()), 2).unwrap();
        assert!(rel_close(&c.sigma, &a.sigma, 1e-12));
        let min = *a.spectrum().unwrap().eigenvalues.last().unwrap();
        assert!(min >= -1e-10 * a.trace());
    }

    fn conv_toy(kernel: usize, padding: usize) -> (Network, ConvGeometry) {
        // conv producing 2 channels on a 4x4 map, then a consumer conv with the given kernel
        let g1 = ConvGeometry {
            in_channels: 1,
            in_height: 4,
            in_width: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let g2 = ConvGeometry {
            in_channels: 2,
            in_height: 4,
            in_width: 4,
            kernel,
            stride: 1,
            padding,
        };
        let l1 = Layer::conv2d(g1, rand_matrix(2, 9, 11), vec![0.1, 0.2], Activation::Relu).unwrap();
        let l2 = Layer::conv2d(g2, rand_matrix(3, 2 * kernel * kernel, 12), vec![0.0; 3], Activation::Relu).unwrap();
        let out_len = 3 * g2.out_height() * g2.out_width();
        let l3 = Layer::dense(rand_matrix(1, out_len, 13), vec![0.0], Activation::None).unwrap();
        (Network::new(g1.input_shape(), vec![l1, l2, l3]).unwrap(), g2)
    }

    #[test]
    fn channel_cov_matches_hand_loop() {
        let (net, _) = conv_toy(3, 1);
        let x = rand_matrix(5, 16, 4);
        let cov = channel_cov(&net, &dataset(x.clone()), 2).unwrap();
        let mut oracle = Matrix::zeros(2, 2);
        for i in 0..5 {
            let phi = net.forward_capture(x.row(i), 2).unwrap();
            for k in 0..2 {
                for kk in 0..2 {
                    let mut s = 0.0;
                    for p in 0..16 {
                        s += phi[k * 16 + p] * phi[kk * 16 + p];
                    }
                    oracle.set(k, kk, oracle.get(k, kk) + s / 80.0);
                }
            }
        }
        assert!(rel_close(&cov.sigma, &oracle, 1e-10));
        assert!(channel_cov(&passthrough_net(3), &dataset(rand_matrix(2, 3, 1)), 2).is_err());
    }

    #[test]
    fn channel_cov_constant_maps() {
        let acts = Matrix::from_rows(&[vec![2.0, 2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0]]).unwrap();
        let cov = covariance_from_activations(2, &acts, 2, 4).unwrap();
        assert_eq!(cov.sigma, Matrix::from_rows(&[vec![4.0, -2.0], vec![-2.0, 1.0]]).unwrap());
    }

    #[test]
    fn one_by_one_spatial_reduces_to_dense() {
        let acts = rand_matrix(9, 3, 8);
        let a = covariance_from_activations(2, &acts, 3, 1).unwrap();
        let mut oracle = acts.t_matmul(&acts).unwrap().scale(1.0 / 9.0);
        oracle.symmetrize();
        assert!(rel_close(&a.sigma, &oracle, 1e-14));
    }

    /// Direct transcription of the receptive-field averaged cross covariance.
    fn cross_oracle(net: &Network, g: ConvGeometry, x: &Matrix, z: &Matrix) -> (Matrix, f64) {
        let n = x.rows();
        let (c, h, w, k) = (g.in_channels, g.in_height, g.in_width, g.kernel);
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut count = vec![vec![0usize; w]; h];
        for ou in 0..oh {
            for ov in 0..ow {
                for a in 0..k {
                    for b in 0..k {
                        let u = (ou * g.stride + a) as isize - g.padding as isize;
                        let v = (ov * g.stride + b) as isize - g.padding as isize;
                        if u >= 0 && v >= 0 && (u as usize) < h && (v as usize) < w {
                            count[u as usize][v as usize] += 1;
                        }
                    }
                }
            }
        }
        let mut cross = Matrix::zeros(z.rows(), c);
        let mut energy = 0.0;
        for i in 0..n {
            let phi = net.forward_capture(x.row(i), 2).unwrap();
            for kp in 0..z.rows() {
                for u in 0..h {
                    for v in 0..w {
                        let mut y = 0.0;
                        for ou in 0..oh {
                            for ov in 0..ow {
                                let a = u as isize + g.padding as isize - (ou * g.stride) as isize;
                                let b = v as isize + g.padding as isize - (ov * g.stride) as isize;
                                if a < 0 || b < 0 || a as usize >= k || b as usize >= k {
                                    continue;
                                }
                                let mut out = 0.0;
                                for ch in 0..c {
                                    for aa in 0..k {
                                        for bb in 0..k {
                                            let uu = (ou * g.stride + aa) as isize - g.padding as isize;
                                            let vv = (ov * g.stride + bb) as isize - g.padding as isize;
                                            if uu >= 0 && vv >= 0 && (uu as usize) < h && (vv as usize) < w {
                                                out += z.get(kp, ch * k * k + aa * k + bb)
                                                    * phi[ch * h * w + uu as usize * w + vv as usize];
                                            }
                                        }
                                    }
                                }
                                y += out;
                            }
                        }
                        if count[u][v] > 0 {
                            y /= count[u][v] as f64;
                        }
                        energy += y * y / (n * h * w) as f64;
                        for ch in 0..c {
                            cross.set(kp, ch, cross.get(kp, ch) + y * phi[ch * h * w + u * w + v] / (n * h * w) as f64);
                        }
                    }
                }
            }
        }
        (cross, energy)
    }

    #[test]
    fn output_cross_matches_loop_oracle() {
        for (kernel, padding) in [(3, 1), (3, 0), (1, 0)] {
            let (net, g) = conv_toy(kernel, padding);
            let x = rand_matrix(5, 16, 21);
            let z = rand_matrix(3, 2 * kernel * kernel, 22);
            let got = output_channel_cov(&net, &dataset(x.clone()), 2, &z).unwrap();
            let (cross, energy) = cross_oracle(&net, g, &x, &z);
            assert!(rel_close(&got.z_sigma, &cross, 1e-10), "kernel {kernel} padding {padding}");
            assert!((got.z_energy - energy).abs() <= 1e-10 * energy);
        }
    }

    #[test]
    fn one_by_one_kernel_is_plain_cross_covariance() {
        let (net, _) = conv_toy(1, 0);
        let x = rand_matrix(5, 16, 23);
        let data = dataset(x);
        let z = rand_matrix(3, 2, 24);
        let got = output_channel_cov(&net, &data, 2, &z).unwrap();
        let cov = channel_cov(&net, &data, 2).unwrap();
        let dense = CrossCovariance::from_dense(&cov, &z).unwrap();
        assert!(rel_close(&got.z_sigma, &dense.z_sigma, 1e-12));
        assert!((got.z_energy - dense.z_energy).abs() <= 1e-12 * dense.z_energy);
    }

    #[test]
    fn full_overlap_kernel_counts() {
        // 3x3 kernel, padding 1 on a 3x3 map: the center is covered by all 9 fields.
        let g = ConvGeometry {
            in_channels: 1,
            in_height: 3,
            in_width: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let z = Matrix::from_vec(1, 9, vec![1.0; 9]).unwrap();
        let mut phi = vec![0.0; 9];
        phi[4] = 1.0;
        let mut cover = vec![0usize; 9];
        let mut res = Vec::new();
        for ou in 0..3 {
            for ov in 0..3 {
                let mut field = Vec::new();
                for a in 0..3 {
                    for b in 0..3 {
                        if let Some((u, v)) = g.tap_source(ou, ov, a, b) {
                            field.push(u * 3 + v);
                            cover[u * 3 + v] += 1;
                        }
                    }
                }
                res.push(field);
            }
        }
        assert_eq!(cover, vec![4, 6, 4, 6, 9, 6, 4, 6, 4]);
        // every output sees the center pixel once, so out ≡ 1 and Y ≡ 1
        let y = spread(&phi, 1, 9, &z, &cover, Some(&(g, res)));
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_next_weights_give_zero_cross() {
        let (net, _) = conv_toy(3, 1);
        let got = output_channel_cov(&net, &dataset(rand_matrix(5, 16, 2)), 2, &Matrix::zeros(3, 18)).unwrap();
        assert_eq!(got.z_sigma, Matrix::zeros(3, 2));
        assert_eq!(got.z_energy, 0.0);
    }

    #[test]
    fn eigen_report_cases() {
        let id = LayerCovariance::new(2, Matrix::identity(3), 1, 1).unwrap();
        assert!(eigen_report(&id).unwrap().iter().all(|r| r.normalized == 1.0));
        let d = LayerCovariance::new(2, Matrix::from_diag(&[1.0, 4.0]), 1, 1).unwrap();
        let rows = eigen_report(&d).unwrap();
        assert_eq!(rows[0].rank, 1);
        assert_eq!(rows[0].eigenvalue, 4.0);
        assert_eq!(rows[1].normalized, 0.25);
        let zero = LayerCovariance::new(2, Matrix::zeros(2, 2), 1, 1).unwrap();
        assert!(matches!(eigen_report(&zero), Err(Error::ZeroMatrix)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_eigen_report(&d, &path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "rank,eigenvalue,normalized\n1,4.0,1.0\n2,1.0,0.25\n");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::dense_relu(&[4, 6, 1], 1).unwrap();
        let cov = layer_cov(&net, &dataset(rand_matrix(30, 4, 3)), 2).unwrap();
        cov.save(dir.path()).unwrap();
        let back = LayerCovariance::load(dir.path()).unwrap();
        assert_eq!(back.sigma, cov.sigma);
        assert_eq!((back.layer, back.n, back.positions), (2, 30, 1));
    }

    #[test]
    fn rejects_bad_layer_index() {
        let net = passthrough_net(2);
        assert!(layer_cov(&net, &dataset(rand_matrix(2, 2, 0)), 1).is_err());
        assert!(layer_cov(&net, &dataset(rand_matrix(2, 2, 0)), 3).is_err());
    }
}
