//! Hard ternary quantization, straight-through fine-tuning and 2-bit packing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cluster::{solve, update_alpha, Codes, SolverConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::nn::{backward, forward, sgd_step, Architecture, Batch, Gradients, Network};
use crate::numeric::Rng;
use crate::train::{EpochRecord, TrainConfig, TrainLog};

/// Packs codes at 2 bits each, first code in the least significant bits:
/// `00` = 0, `01` = +1, `10` = -1. The last byte is zero-padded.
pub fn pack_codes(codes: &Codes) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &c) in codes.as_slice().iter().enumerate() {
        let bits = match c {
            1 => 0b01,
            -1 => 0b10,
            _ => 0b00,
        };
        out[i / 4] |= bits << (2 * (i % 4));
    }
    out
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(bytes: &[u8], n: usize) -> Result<Codes> {
    if bytes.len() != n.div_ceil(4) {
        return Err(Error::Corruption(format!(
            "{n} codes need {} bytes, got {}",
            n.div_ceil(4),
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..bytes.len() * 4 {
        let bits = (bytes[i / 4] >> (2 * (i % 4))) & 0b11;
        if i >= n {
            if bits != 0 {
                return Err(Error::Corruption(format!("non-zero padding in code slot {i}")));
            }
            continue;
        }
        out.push(match bits {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => {
                return Err(Error::Corruption(format!(
                    "reserved bit pair 11 at code {i}"
                )))
            }
        });
    }
    Codes::new(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerPayload {
    Ternary {
        packed: Vec<u8>,
        count: usize,
        alpha: f64,
    },
    /// Excluded layer kept at full precision.
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub shape: Vec<usize>,
    pub payload: LayerPayload,
    pub bias: Option<Vec<f64>>,
}

impl QuantizedLayer {
    pub fn ternary(shape: Vec<usize>, codes: &Codes, alpha: f64, bias: Option<Vec<f64>>) -> Self {
        QuantizedLayer {
            shape,
            payload: LayerPayload::Ternary {
                packed: pack_codes(codes),
                count: codes.len(),
                alpha,
            },
            bias,
        }
    }

    pub fn excluded(&self) -> bool {
        matches!(self.payload, LayerPayload::Full(_))
    }

    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.payload {
            LayerPayload::Ternary { alpha, .. } => Some(alpha),
            LayerPayload::Full(_) => None,
        }
    }

    pub fn codes(&self) -> Result<Option<Codes>> {
        match &self.payload {
            LayerPayload::Ternary { packed, count, .. } => Ok(Some(unpack_codes(packed, *count)?)),
            LayerPayload::Full(_) => Ok(None),
        }
    }

    pub fn dequantized_weights(&self) -> Result<Vec<f64>> {
        match &self.payload {
            LayerPayload::Ternary {
                packed,
                count,
                alpha,
            } => Ok(unpack_codes(packed, *count)?.dequantize(*alpha)),
            LayerPayload::Full(w) => Ok(w.clone()),
        }
    }
}

/// Where an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub architecture: Architecture,
    /// One entry per parameterized layer, by ordinal.
    pub layers: Vec<QuantizedLayer>,
    pub provenance: Provenance,
}

impl QuantizedModel {
    pub fn dequantize(&self) -> Result<Network> {
        let weights = self
            .layers
            .iter()
            .map(QuantizedLayer::dequantized_weights)
            .collect::<Result<_>>()?;
        let biases = self.layers.iter().map(|l| l.bias.clone()).collect();
        Network::from_parameters(self.architecture.clone(), weights, biases)
    }

    pub fn excluded_layers(&self) -> BTreeSet<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.excluded())
            .map(|(o, _)| o)
            .collect()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}

/// Replaces every non-excluded layer by its ternary clustering `alpha * codes`.
pub fn quantize(net: &Network, solver: &SolverConfig, exclude: &BTreeSet<usize>) -> Result<QuantizedModel> {
    let layers = (0..net.num_param_layers())
        .map(|o| {
            let shape = net.weight_shape(o).to_vec();
            let bias = net.bias(o).map(<[f64]>::to_vec);
            if exclude.contains(&o) {
                return Ok(QuantizedLayer {
                    shape,
                    payload: LayerPayload::Full(net.weights(o).to_vec()),
                    bias,
                });
            }
            let sol = solve(net.weights(o), solver)?;
            Ok(QuantizedLayer::ternary(shape, &sol.codes, sol.alpha, bias))
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedModel {
        architecture: net.architecture().clone(),
        layers,
        provenance: Provenance::default(),
    })
}

/// Float32 storage of every weight divided by packed storage: 2 bits per
/// quantized weight plus one float32 scale per quantized layer, with
/// excluded layers at 32 bits in both terms. Biases are not counted.
pub fn compression_ratio(model: &QuantizedModel) -> f64 {
    let mut full_bits = 0.0;
    let mut packed_bits = 0.0;
    for layer in &model.layers {
        let n = layer.weight_count() as f64;
        full_bits += 32.0 * n;
        packed_bits += if layer.excluded() { 32.0 * n } else { 2.0 * n + 32.0 };
    }
    if packed_bits == 0.0 {
        return 1.0;
    }
    full_bits / packed_bits
}

/// Full-precision weights that receive the updates during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowState {
    pub network: Network,
}

impl ShadowState {
    pub fn from_network(net: &Network) -> Self {
        ShadowState {
            network: net.clone(),
        }
    }
}

/// How shadow weights are mapped to ternary values at each step.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// Re-solve codes and alpha for every layer not in `exclude`.
    Resolve { exclude: BTreeSet<usize> },
    /// Keep these codes (`None` = full precision) and refit alpha.
    Frozen(Vec<Option<Codes>>),
}

impl Projection {
    pub fn for_model(model: &QuantizedModel, freeze_codes: bool) -> Result<Self> {
        if freeze_codes {
            Ok(Projection::Frozen(
                model.layers.iter().map(QuantizedLayer::codes).collect::<Result<_>>()?,
            ))
        } else {
            Ok(Projection::Resolve {
                exclude: model.excluded_layers(),
            })
        }
    }

    /// Quantized view of `shadow`.
    pub fn project(&self, shadow: &Network, solver: &SolverConfig) -> Result<QuantizedModel> {
        match self {
            Projection::Resolve { exclude } => quantize(shadow, solver, exclude),
            Projection::Frozen(codes) => {
                if codes.len() != shadow.num_param_layers() {
                    return Err(Error::Dimension("frozen codes do not match the network".into()));
                }
                let layers = codes
                    .iter()
                    .enumerate()
                    .map(|(o, c)| {
                        let shape = shadow.weight_shape(o).to_vec();
                        let bias = shadow.bias(o).map(<[f64]>::to_vec);
                        Ok(match c {
                            Some(c) => {
                                let alpha = update_alpha(shadow.weights(o), c)?.unwrap_or(0.0).max(0.0);
                                QuantizedLayer::ternary(shape, c, alpha, bias)
                            }
                            None => QuantizedLayer {
                                shape,
                                payload: LayerPayload::Full(shadow.weights(o).to_vec()),
                                bias,
                            },
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(QuantizedModel {
                    architecture: shadow.architecture().clone(),
                    layers,
                    provenance: Provenance::default(),
                })
            }
        }
    }
}

/// What one fine-tuning step saw and did.
#[derive(Debug, Clone)]
pub struct FinetuneStep {
    pub loss: f64,
    /// Network with projected weights used in forward and backward.
    pub projected: Network,
    pub gradients: Gradients,
}

/// Forward and backward with projected weights, then the gradient applied
/// unchanged to the shadow weights.
pub fn finetune_step(
    shadow: &mut ShadowState,
    batch: &Batch,
    projection: &Projection,
    solver: &SolverConfig,
    eta: f64,
) -> Result<FinetuneStep> {
    let projected = projection.project(&shadow.network, solver)?.dequantize()?;
    let (loss, cache) = forward(&projected, batch)?;
    let gradients = backward(&projected, &cache)?;
    sgd_step(&mut shadow.network, &gradients, eta)?;
    Ok(FinetuneStep {
        loss,
        projected,
        gradients,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: QuantizedModel,
    pub shadow: ShadowState,
    /// Per-epoch loss and accuracy of the projected model on the training set.
    pub log: TrainLog,
}

/// Straight-through fine-tuning for `config.epochs` epochs. The returned
/// model is the projection of the final shadow weights.
pub fn finetune(
    model: &QuantizedModel,
    shadow: ShadowState,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if model.architecture != *shadow.network.architecture() {
        return Err(Error::Dimension(
            "shadow network does not match the quantized model".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Usage("fine-tuning data is empty".into()));
    }
    let projection = Projection::for_model(model, config.freeze_codes)?;
    let mut shadow = shadow;
    let mut rng = Rng::new(config.seed);
    let mut log = TrainLog {
        layers: (0..model.layers.len())
            .filter(|o| !model.layers[*o].excluded())
            .collect(),
        rows: Vec::with_capacity(config.epochs),
    };
    let full = data.as_batch();
    for epoch in 0..config.epochs {
        let eta = config.learning_rate(epoch);
        for batch in data.batches(config.batch_size, &mut rng) {
            finetune_step(&mut shadow, &batch, &projection, &config.solver, eta)?;
        }
        let current = projection.project(&shadow.network, &config.solver)?;
        let net = current.dequantize()?;
        let (loss, _) = forward(&net, &full)?;
        let shadow_j: f64 = crate::train::total_cluster_objective(&shadow.network, &TrainConfig {
            exclude_layers: Some(model.excluded_layers()),
            ..config.clone()
        })?;
        log.rows.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss,
            train_acc: accuracy(&net, &full)?,
            total_j: shadow_j,
            alphas: current.layers.iter().filter_map(QuantizedLayer::alpha).collect(),
        });
    }
    let final_model = projection
        .project(&shadow.network, &config.solver)?
        .with_provenance(model.provenance.clone());
    Ok(FinetuneOutcome {
        model: final_model,
        shadow,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    fn codes(v: &[i8]) -> Codes {
        Codes::new(v.to_vec()).unwrap()
    }

    fn single_layer(weights: Vec<f64>) -> Network {
        let n = weights.len();
        let arch = Architecture {
            input_shape: vec![1],
            layers: vec![LayerSpec::Dense {
                inputs: 1,
                outputs: n,
                bias: false,
            }],
        };
        Network::from_parameters(arch, vec![weights], vec![None]).unwrap()
    }

    #[test]
    fn pack_layout_is_lsb_first() {
        assert_eq!(pack_codes(&codes(&[1, -1, 0, 1])), vec![0x49]);
        assert_eq!(pack_codes(&codes(&[])), Vec::<u8>::new());
        assert_eq!(pack_codes(&codes(&[-1])), vec![0b10]);
        assert_eq!(unpack_codes(&[0x49], 4).unwrap(), codes(&[1, -1, 0, 1]));
    }

    #[test]
    fn unpack_rejects_corruption() {
        assert!(matches!(unpack_codes(&[0b11], 1), Err(Error::Corruption(_))));
        assert!(matches!(unpack_codes(&[0b0100], 1), Err(Error::Corruption(_))));
        assert!(matches!(unpack_codes(&[0, 0], 4), Err(Error::Corruption(_))));
    }

    proptest! {
        #[test]
        fn pack_round_trip(raw in prop::collection::vec(-1i8..=1, 0..2000)) {
            let c = Codes::new(raw).unwrap();
            let packed = pack_codes(&c);
            prop_assert_eq!(packed.len(), c.len().div_ceil(4));
            prop_assert_eq!(unpack_codes(&packed, c.len()).unwrap(), c);
        }
    }

    #[test]
    fn quantize_examples() {
        let net = single_layer(vec![1.0, -1.0, 0.0, 1.0]);
        let m = quantize(&net, &SolverConfig::default(), &BTreeSet::new()).unwrap();
        assert_eq!(m.layers[0].alpha(), Some(1.0));
        assert_eq!(m.dequantize().unwrap().weights(0), &[1.0, -1.0, 0.0, 1.0]);

        let net = single_layer(vec![0.9, 0.1, -0.8, 0.05]);
        let m = quantize(&net, &SolverConfig::default(), &BTreeSet::new()).unwrap();
        let deq = m.dequantize().unwrap();
        let expected = [0.85, 0.0, -0.85, 0.0];
        for (a, b) in deq.weights(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn excluded_layers_stay_full_precision() {
        let mut rng = Rng::new(2);
        let net = Network::init(Architecture::mlp(&[2, 8, 8, 3]).unwrap(), &mut rng).unwrap();
        let m = quantize(&net, &SolverConfig::default(), &BTreeSet::from([0, 2])).unwrap();
        assert!(m.layers[0].excluded() && m.layers[2].excluded());
        let deq = m.dequantize().unwrap();
        assert_eq!(deq.weights(0), net.weights(0));
        let mut distinct: Vec<f64> = deq.weights(1).to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 3);
        assert_eq!(deq.bias(1), net.bias(1));
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = Rng::new(3);
        let net = Network::init(Architecture::mlp(&[4, 16, 16, 3]).unwrap(), &mut rng).unwrap();
        let solver = SolverConfig::default();
        let m = quantize(&net, &solver, &BTreeSet::new()).unwrap();
        let again = quantize(&m.dequantize().unwrap(), &solver, &BTreeSet::new()).unwrap();
        for (a, b) in m.layers.iter().zip(&again.layers) {
            assert_eq!(a.codes().unwrap(), b.codes().unwrap());
            assert!((a.alpha().unwrap() - b.alpha().unwrap()).abs() <= solver.alpha_tolerance);
        }
    }

    #[test]
    fn compression_ratio_examples() {
        let net = single_layer(vec![0.5; 1600]);
        let m = quantize(&net, &SolverConfig::default(), &BTreeSet::new()).unwrap();
        let expected = (1600.0 * 32.0) / (1600.0 * 2.0 + 32.0);
        assert!((compression_ratio(&m) - expected).abs() < 1e-9);

        let all = quantize(&net, &SolverConfig::default(), &BTreeSet::from([0])).unwrap();
        assert_eq!(compression_ratio(&all), 1.0);
    }

    #[test]
    fn toy_cnn_ratio_in_range() {
        let mut rng = Rng::new(5);
        let arch = Architecture::toy_cnn(1, 8, [8, 16], 32, 4).unwrap();
        let net = Network::init(arch, &mut rng).unwrap();
        let exclude = TrainConfig::default().included_layers(4).unwrap();
        let exclude: BTreeSet<usize> = (0..4).filter(|o| !exclude.contains(o)).collect();
        let m = quantize(&net, &SolverConfig::default(), &exclude).unwrap();
        let r = compression_ratio(&m);
        assert!((10.0..=16.0).contains(&r), "ratio {r}");
    }

    #[test]
    fn one_step_uses_projection_forward_and_updates_shadow() {
        let mut rng = Rng::new(7);
        let net = Network::init(Architecture::mlp(&[2, 6, 3]).unwrap(), &mut rng).unwrap();
        let data = crate::data::blobs(3, 12, 0.5, 1.5, &mut rng).unwrap();
        let batch = data.as_batch();
        let solver = SolverConfig::default();
        let projection = Projection::Resolve {
            exclude: BTreeSet::new(),
        };
        let mut shadow = ShadowState::from_network(&net);
        let step = finetune_step(&mut shadow, &batch, &projection, &solver, 0.1).unwrap();

        let expected_proj = quantize(&net, &solver, &BTreeSet::new()).unwrap().dequantize().unwrap();
        assert_eq!(step.projected, expected_proj);
        let (loss, _) = forward(&expected_proj, &batch).unwrap();
        assert_eq!(step.loss, loss);
        for o in 0..net.num_param_layers() {
            for ((&w, &g), &s) in net
                .weights(o)
                .iter()
                .zip(step.gradients.layers[o].weight.data())
                .zip(shadow.network.weights(o))
            {
                assert_eq!(s, w - 0.1 * g);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        // Zero inputs and biases make every hidden activation zero; a zero
        // output layer gives uniform scores, and balanced labels cancel the
        // output bias gradient.
        let arch = Architecture::mlp(&[2, 4, 2]).unwrap();
        let mut rng = Rng::new(8);
        let w0: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let net = Network::from_parameters(
            arch,
            vec![w0, vec![0.0; 8]],
            vec![Some(vec![0.0; 4]), Some(vec![0.0; 2])],
        )
        .unwrap();
        let inputs = crate::numeric::DenseArray::zeros(&[4, 2]);
        let data = Dataset::new(inputs, vec![0, 1, 0, 1], 2).unwrap();
        let model = quantize(&net, &SolverConfig::default(), &BTreeSet::from([1])).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = finetune(&model, ShadowState::from_network(&net), &data, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.shadow.network, net);
    }

    #[test]
    fn frozen_codes_keep_assignment() {
        let mut rng = Rng::new(10);
        let net = Network::init(Architecture::mlp(&[2, 8, 3]).unwrap(), &mut rng).unwrap();
        let data = crate::data::blobs(3, 30, 0.5, 1.5, &mut rng).unwrap();
        let model = quantize(&net, &SolverConfig::default(), &BTreeSet::new()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            freeze_codes: true,
            ..TrainConfig::default()
        };
        let out = finetune(&model, ShadowState::from_network(&net), &data, &cfg).unwrap();
        for (a, b) in model.layers.iter().zip(&out.model.layers) {
            assert_eq!(a.codes().unwrap(), b.codes().unwrap());
        }
    }
}
