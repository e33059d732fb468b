//! On-disk model format: a directory holding `manifest.json` plus one raw
//! little-endian `f64` blob per weight matrix and bias vector.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, LayerKind, Network, Shape};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_MANIFEST: &str = "manifest.json";
const FORMAT_NAME: &str = "specprune-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    endianness: String,
    input_shape: Shape,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    kind: LayerKind,
    activation: Activation,
    weight: BlobRef,
    bias: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct BlobRef {
    pub(crate) file: String,
    pub(crate) shape: Vec<usize>,
}

pub(crate) fn write_blob(dir: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<f64>> {
    if blob.file.contains('/') || blob.file.contains('\\') || blob.file.contains("..") {
        return Err(Error::CorruptManifest(format!("blob name {:?} escapes the model directory", blob.file)));
    }
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = blob.shape.iter().product();
    if bytes.len() != expected * 8 {
        return Err(Error::CorruptManifest(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            blob.file,
            bytes.len(),
            blob.shape,
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes `net` into `dir` (created if missing).
pub fn save(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(net.depth());
    for (i, layer) in net.layers().iter().enumerate() {
        let wname = format!("layer{:02}_weight.bin", i + 1);
        let bname = format!("layer{:02}_bias.bin", i + 1);
        write_blob(dir, &wname, layer.weight.as_slice())?;
        write_blob(dir, &bname, &layer.bias)?;
        entries.push(LayerEntry {
            kind: layer.kind,
            activation: layer.activation,
            weight: BlobRef {
                file: wname,
                shape: vec![layer.weight.rows(), layer.weight.cols()],
            },
            bias: BlobRef {
                file: bname,
                shape: vec![layer.bias.len()],
            },
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        endianness: "little".into(),
        input_shape: net.input_shape(),
        layers: entries,
    };
    let path = dir.join(MODEL_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a network written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<Network> {
    let dir = dir.as_ref();
    let path = dir.join(MODEL_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::CorruptManifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != "f64" || manifest.endianness != "little" {
        return Err(Error::CorruptManifest(format!(
            "unsupported dtype/endianness {}/{}",
            manifest.dtype, manifest.endianness
        )));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.weight.shape.len() != 2 || entry.bias.shape.len() != 1 {
            return Err(Error::CorruptManifest("weight must be 2-d and bias 1-d".into()));
        }
        let w = read_blob(dir, &entry.weight)?;
        let b = read_blob(dir, &entry.bias)?;
        let weight = Matrix::from_vec(entry.weight.shape[0], entry.weight.shape[1], w)
            .map_err(|e| Error::CorruptManifest(format!("{}: {e}", entry.weight.file)))?;
        let layer = match entry.kind {
            LayerKind::Dense => Layer::dense(weight, b, entry.activation)?,
            LayerKind::Conv2d(g) => Layer::conv2d(g, weight, b, entry.activation)?,
        };
        layers.push(layer);
    }
    Network::new(manifest.input_shape, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvGeometry;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::dense_relu(&[5, 4, 3], 17).unwrap();
        save(&net, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(net, back);
        for (a, b) in net.layers().iter().zip(back.layers()) {
            let bits_a: Vec<u64> = a.weight.as_slice().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.weight.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn conv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = ConvGeometry {
            in_channels: 1,
            in_height: 5,
            in_width: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let conv = Layer::conv2d(g, Matrix::from_fn(2, 9, |i, j| (i * 9 + j) as f64 * 0.1), vec![0.5, -0.5], Activation::LeakyRelu { slope: 0.01 }).unwrap();
        let dense = Layer::dense(Matrix::from_fn(1, 18, |_, j| j as f64), vec![0.0], Activation::None).unwrap();
        let net = Network::new(g.input_shape(), vec![conv, dense]).unwrap();
        save(&net, dir.path()).unwrap();
        assert_eq!(load(dir.path()).unwrap(), net);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::dense_relu(&[3, 2, 1], 1).unwrap();
        save(&net, dir.path()).unwrap();
        let blob = dir.path().join("layer01_weight.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_nets_round_trip(widths in proptest::collection::vec(1usize..9, 2..5), seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let net = Network::dense_relu(&widths, seed).unwrap();
            save(&net, dir.path()).unwrap();
            let back = load(dir.path()).unwrap();
            prop_assert_eq!(back.widths(), widths);
            prop_assert_eq!(back, net);
        }
    }
}
