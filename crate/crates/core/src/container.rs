//! `.crq` container: ternary models, float exports and training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CRQ\0"
//! 4       4     format version (u32) = 1
//! 8       8     header length H in bytes (u64)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   payload
//! ```
//!
//! The header lists, for each parameterized layer, its shape, encoding and
//! the `[offset, offset + length)` byte range of its weights and bias within
//! the payload. Encodings:
//!
//! * `ternary2`: codes packed at 2 bits per weight (see
//!   [`pack_codes`](crate::quantize::pack_codes)), `ceil(count / 4)` bytes,
//!   with the scale stored in the header as `alpha`.
//! * `f64le`: IEEE-754 binary64 values, 8 bytes each.
//!
//! Biases are always `f64le`. Layer segments are written in ordinal order,
//! each weight segment followed by its bias segment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, Network};
use crate::numeric::RngState;
use crate::quantize::{LayerPayload, Provenance, QuantizedLayer, QuantizedModel};

pub const MAGIC: [u8; 4] = *b"CRQ\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    /// Ternary layers plus full-precision excluded layers.
    Model,
    /// All layers as floats (dequantized export or plain network).
    FloatModel,
    /// Float network plus training position.
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Ternary2,
    F64le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub ordinal: usize,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub weights: Segment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: ContainerKind,
    pub architecture: Architecture,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
    pub layers: Vec<LayerEntry>,
}

/// A decoded container: header plus the raw payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Vec<u8>,
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn bytes_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Corruption("float segment length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corruption("non-finite value in float segment".into()));
    }
    Ok(values)
}

struct PayloadWriter {
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn push(&mut self, bytes: &[u8]) -> Segment {
        let offset = self.payload.len() as u64;
        self.payload.extend_from_slice(bytes);
        Segment {
            offset,
            length: bytes.len() as u64,
        }
    }
}

impl Container {
    fn build(
        kind: ContainerKind,
        architecture: &Architecture,
        provenance: &Provenance,
        layers: &[QuantizedLayer],
    ) -> Self {
        let mut w = PayloadWriter { payload: Vec::new() };
        let entries = layers
            .iter()
            .enumerate()
            .map(|(ordinal, layer)| {
                let (encoding, count, alpha, weights) = match &layer.payload {
                    LayerPayload::Ternary {
                        packed,
                        count,
                        alpha,
                    } => (Encoding::Ternary2, *count, Some(*alpha), w.push(packed)),
                    LayerPayload::Full(values) => {
                        (Encoding::F64le, values.len(), None, w.push(&f64_bytes(values)))
                    }
                };
                let bias = layer.bias.as_ref().map(|b| w.push(&f64_bytes(b)));
                LayerEntry {
                    ordinal,
                    shape: layer.shape.clone(),
                    encoding,
                    count,
                    alpha,
                    weights,
                    bias,
                }
            })
            .collect();
        Container {
            header: Header {
                kind,
                architecture: architecture.clone(),
                provenance: provenance.clone(),
                epoch: None,
                rng: None,
                layers: entries,
            },
            payload: w.payload,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN || bytes[..4] != MAGIC {
            return Err(Error::Corruption("not a .crq container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Corruption(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corruption("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..end])
            .map_err(|e| Error::Corruption(format!("container header: {e}")))?;
        let container = Container {
            header,
            payload: bytes[end..].to_vec(),
        };
        container.validate()?;
        Ok(container)
    }

    fn segment(&self, seg: &Segment) -> Result<&[u8]> {
        let start = seg.offset as usize;
        let end = start
            .checked_add(seg.length as usize)
            .filter(|&e| e <= self.payload.len())
            .ok_or_else(|| Error::Corruption("segment outside payload".into()))?;
        Ok(&self.payload[start..end])
    }

    fn validate(&self) -> Result<()> {
        self.header
            .architecture
            .validate()
            .map_err(|e| Error::Corruption(format!("architecture: {e}")))?;
        let specs = self.header.architecture.parameterized();
        if specs.len() != self.header.layers.len() {
            return Err(Error::Corruption(format!(
                "architecture has {} parameterized layers, header lists {}",
                specs.len(),
                self.header.layers.len()
            )));
        }
        for (entry, &idx) in self.header.layers.iter().zip(&specs) {
            let spec = &self.header.architecture.layers[idx];
            if Some(&entry.shape) != spec.weight_shape().as_ref()
                || entry.count != entry.shape.iter().product::<usize>()
            {
                return Err(Error::Corruption(format!(
                    "layer {} shape {:?} disagrees with architecture",
                    entry.ordinal, entry.shape
                )));
            }
            if entry.bias.is_some() != spec.bias_len().is_some() {
                return Err(Error::Corruption(format!(
                    "layer {} bias presence disagrees with architecture",
                    entry.ordinal
                )));
            }
        }
        Ok(())
    }

    /// Per-layer weights as stored (packed or float) plus biases.
    pub fn layers(&self) -> Result<Vec<QuantizedLayer>> {
        self.header
            .layers
            .iter()
            .map(|entry| {
                let raw = self.segment(&entry.weights)?;
                let payload = match entry.encoding {
                    Encoding::Ternary2 => {
                        let alpha = entry
                            .alpha
                            .filter(|a| a.is_finite() && *a >= 0.0)
                            .ok_or_else(|| Error::Corruption("ternary layer without a valid alpha".into()))?;
                        // Validates the bit pairs.
                        crate::quantize::unpack_codes(raw, entry.count)?;
                        LayerPayload::Ternary {
                            packed: raw.to_vec(),
                            count: entry.count,
                            alpha,
                        }
                    }
                    Encoding::F64le => {
                        let values = bytes_f64(raw)?;
                        if values.len() != entry.count {
                            return Err(Error::Corruption("float segment has the wrong length".into()));
                        }
                        LayerPayload::Full(values)
                    }
                };
                let bias = entry
                    .bias
                    .as_ref()
                    .map(|seg| bytes_f64(self.segment(seg)?))
                    .transpose()?;
                let expected_bias = self.header.architecture.layers
                    [self.header.architecture.parameterized()[entry.ordinal]]
                    .bias_len();
                if bias.as_ref().map(Vec::len) != expected_bias {
                    return Err(Error::Corruption("bias segment has the wrong length".into()));
                }
                Ok(QuantizedLayer {
                    shape: entry.shape.clone(),
                    payload,
                    bias,
                })
            })
            .collect()
    }
}

fn float_layers(net: &Network) -> Vec<QuantizedLayer> {
    (0..net.num_param_layers())
        .map(|o| QuantizedLayer {
            shape: net.weight_shape(o).to_vec(),
            payload: LayerPayload::Full(net.weights(o).to_vec()),
            bias: net.bias(o).map(<[f64]>::to_vec),
        })
        .collect()
}

fn float_network(container: &Container) -> Result<Network> {
    let layers = container.layers()?;
    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for layer in layers {
        weights.push(layer.dequantized_weights()?);
        biases.push(layer.bias);
    }
    Network::from_parameters(container.header.architecture.clone(), weights, biases)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl QuantizedModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Container::build(ContainerKind::Model, &self.architecture, &self.provenance, &self.layers)
            .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        if c.header.kind != ContainerKind::Model {
            return Err(Error::Corruption(format!(
                "expected a ternary model, found {:?}",
                c.header.kind
            )));
        }
        Ok(QuantizedModel {
            layers: c.layers()?,
            architecture: c.header.architecture,
            provenance: c.header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Float export of the dequantized weights in the same container format.
    pub fn export_dequantized(&self) -> Result<Vec<u8>> {
        let net = self.dequantize()?;
        Container::build(
            ContainerKind::FloatModel,
            &self.architecture,
            &self.provenance,
            &float_layers(&net),
        )
        .to_bytes()
    }
}

/// Loads any container as a float network (ternary layers are dequantized).
pub fn load_network(bytes: &[u8]) -> Result<Network> {
    float_network(&Container::from_bytes(bytes)?)
}

/// Float network with its training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut c = Container::build(
            ContainerKind::Checkpoint,
            self.network.architecture(),
            &self.provenance,
            &float_layers(&self.network),
        );
        c.header.epoch = Some(self.epoch);
        c.header.rng = self.rng.clone();
        c.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        if c.header.kind != ContainerKind::Checkpoint {
            return Err(Error::Corruption(format!(
                "expected a checkpoint, found {:?}",
                c.header.kind
            )));
        }
        Ok(Checkpoint {
            network: float_network(&c)?,
            epoch: c.header.epoch.unwrap_or(0),
            rng: c.header.rng.clone(),
            provenance: c.header.provenance.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SolverConfig;
    use crate::nn::{predict, Architecture};
    use crate::numeric::{DenseArray, Rng};
    use crate::quantize::quantize;
    use std::collections::BTreeSet;

    fn model(seed: u64) -> (Network, QuantizedModel) {
        let mut rng = Rng::new(seed);
        let net = Network::init(Architecture::mlp(&[3, 10, 10, 4]).unwrap(), &mut rng).unwrap();
        let m = quantize(&net, &SolverConfig::default(), &BTreeSet::from([0, 2]))
            .unwrap()
            .with_provenance(Provenance {
                seed,
                config_hash: "abc123".into(),
            });
        (net, m)
    }

    #[test]
    fn model_round_trip() {
        let (_, m) = model(1);
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CRQ\0");
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn packed_path_gives_identical_inference() {
        let (_, m) = model(2);
        let direct = m.dequantize().unwrap();
        let reloaded = QuantizedModel::from_bytes(&m.to_bytes().unwrap())
            .unwrap()
            .dequantize()
            .unwrap();
        let mut rng = Rng::new(3);
        let x = DenseArray::new(vec![5, 3], (0..15).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let a = predict(&direct, &x).unwrap();
        let b = predict(&reloaded, &x).unwrap();
        let bits = |d: &DenseArray| d.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn float_export_loads_as_network() {
        let (_, m) = model(4);
        let export = m.export_dequantized().unwrap();
        let net = load_network(&export).unwrap();
        assert_eq!(net, m.dequantize().unwrap());
        assert!(QuantizedModel::from_bytes(&export).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (net, _) = model(5);
        let mut rng = Rng::new(9);
        rng.next_u64();
        let ck = Checkpoint {
            network: net,
            epoch: 7,
            rng: Some(rng.state()),
            provenance: Provenance::default(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut resumed = Rng::from_state(back.rng.as_ref().unwrap()).unwrap();
        assert_eq!(resumed.next_u64(), rng.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, m) = model(6);
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(QuantizedModel::from_bytes(&bytes[..10]), Err(Error::Corruption(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(QuantizedModel::from_bytes(&bad), Err(Error::Corruption(_))));
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        assert!(QuantizedModel::from_bytes(&truncated).is_err());

        // Flip a ternary byte to the reserved pattern.
        let c = Container::from_bytes(&bytes).unwrap();
        let seg = &c.header.layers[1].weights;
        let mut flipped = bytes.clone();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        flipped[16 + header_len + seg.offset as usize] = 0xFF;
        assert!(matches!(QuantizedModel::from_bytes(&flipped), Err(Error::Corruption(_))));
    }
}
