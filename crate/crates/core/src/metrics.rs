//! Quantization error metrics and the direct-quantization baseline.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::SolverConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward, predict, weight_response, Batch, Network};
use crate::quantize::{quantize, QuantizedModel};

/// Baseline: quantize a trained network as-is, without regularized
/// retraining. Same projection as [`quantize`].
pub fn direct_quantize(
    net: &Network,
    solver: &SolverConfig,
    exclude: &BTreeSet<usize>,
) -> Result<QuantizedModel> {
    quantize(net, solver, exclude)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose highest score is the true label.
pub fn accuracy(net: &Network, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("cannot evaluate on empty data".into()));
    }
    let scores = predict(net, &batch.inputs)?;
    let c = scores.cols();
    let correct = scores
        .data()
        .chunks(c)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Top-1 error rate in percent.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    evaluate_top_k(net, data, 1)
}

/// Top-k error rate in percent: a sample counts as correct when its label
/// is among the `k` highest scores.
pub fn evaluate_top_k(net: &Network, data: &Dataset, k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on empty data".into()));
    }
    let classes = net.num_classes();
    if k == 0 || k > classes {
        return Err(Error::Usage(format!("top-{k} needs 1 <= k <= {classes}")));
    }
    let scores = predict(net, &data.inputs().clone())?;
    let mut wrong = 0usize;
    for (row, &y) in scores.data().chunks(classes).zip(data.labels()) {
        let better = row.iter().filter(|&&v| v > row[y]).count();
        if better >= k {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

fn check_model(net: &Network, model: &QuantizedModel) -> Result<()> {
    if net.architecture() != &model.architecture {
        return Err(Error::Dimension(
            "network and quantized model have different architectures".into(),
        ));
    }
    Ok(())
}

/// Per-layer `(1/2N) * ||W - W_Q||^2`.
pub fn weight_mse(net: &Network, model: &QuantizedModel) -> Result<Vec<f64>> {
    check_model(net, model)?;
    model
        .layers
        .iter()
        .enumerate()
        .map(|(o, layer)| {
            let wq = layer.dequantized_weights()?;
            let w = net.weights(o);
            let sq: f64 = w.iter().zip(&wq).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok(sq / (2.0 * w.len() as f64))
        })
        .collect()
}

/// Per-layer `(1/2N) * ||X W - X W_Q||^2`, `N` the output element count.
/// Each layer's input `X` comes from the full-precision forward pass, so
/// upstream quantization error does not leak into downstream layers.
pub fn output_mse(net: &Network, model: &QuantizedModel, batch: &Batch) -> Result<Vec<f64>> {
    check_model(net, model)?;
    let (_, cache) = forward(net, batch)?;
    let inputs = cache.layer_inputs();
    let param_idx = net.architecture().parameterized();
    model
        .layers
        .iter()
        .enumerate()
        .map(|(o, layer)| {
            let spec = &net.architecture().layers[param_idx[o]];
            let x = &inputs[param_idx[o]];
            let full = weight_response(spec, net.weights(o), x)?;
            let quant = weight_response(spec, &layer.dequantized_weights()?, x)?;
            let sq: f64 = full
                .data()
                .iter()
                .zip(quant.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(sq / (2.0 * full.len() as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub ordinal: usize,
    pub excluded: bool,
    pub weight_mse: f64,
    pub output_mse: f64,
}

/// Quantization error and accuracy of one quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub label: String,
    pub layers: Vec<LayerError>,
    pub accuracy_pct: f64,
    pub error_rate_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5_error_rate_pct: Option<f64>,
}

impl ErrorReport {
    /// Compares `model` against the full-precision `net` it came from, with
    /// error rates measured on `data`.
    pub fn measure(label: &str, net: &Network, model: &QuantizedModel, data: &Dataset) -> Result<Self> {
        let wm = weight_mse(net, model)?;
        let om = output_mse(net, model, &data.as_batch())?;
        let qnet = model.dequantize()?;
        let err = evaluate(&qnet, data)?;
        let top5 = (qnet.num_classes() > 5)
            .then(|| evaluate_top_k(&qnet, data, 5))
            .transpose()?;
        Ok(ErrorReport {
            label: label.to_string(),
            layers: model
                .layers
                .iter()
                .enumerate()
                .map(|(o, l)| LayerError {
                    ordinal: o,
                    excluded: l.excluded(),
                    weight_mse: wm[o],
                    output_mse: om[o],
                })
                .collect(),
            accuracy_pct: 100.0 - err,
            error_rate_pct: err,
            top5_error_rate_pct: top5,
        })
    }

    /// Mean weight error over quantized (non-excluded) layers.
    pub fn mean_weight_mse(&self) -> f64 {
        let included: Vec<f64> = self
            .layers
            .iter()
            .filter(|l| !l.excluded)
            .map(|l| l.weight_mse)
            .collect();
        if included.is_empty() {
            0.0
        } else {
            included.iter().sum::<f64>() / included.len() as f64
        }
    }

    /// One row per layer: `label,layer,excluded,weight_mse,output_mse,accuracy_pct,error_rate_pct`.
    pub fn write_csv(reports: &[ErrorReport], mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "label,layer,excluded,weight_mse,output_mse,accuracy_pct,error_rate_pct")?;
        for r in reports {
            for l in &r.layers {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.label, l.ordinal, l.excluded, l.weight_mse, l.output_mse, r.accuracy_pct, r.error_rate_pct
                )?;
            }
        }
        Ok(())
    }
}

/// First epoch at which `curve` reaches `fraction` of its final value.
pub fn convergence_epoch(curve: &[f64], fraction: f64) -> Option<usize> {
    let target = fraction * curve.last()?;
    curve.iter().position(|&v| v >= target)
}
