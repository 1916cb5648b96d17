//! Cluster-regularized retraining.
//!
//! Each step re-solves the ternary clustering of every regularized layer,
//! then moves the weights by
//! `W <- W - eta * (dL/dW + lambda * (W - alpha * codes))`,
//! i.e. plain SGD on `L(W) + lambda * J(codes, alpha)` with the clustering
//! held fixed for the step.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::{solve, ClusterSolution, SolverConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::nn::{backward, check_grads, forward, Batch, Gradients, Network};
use crate::numeric::{Rng, RngState};

/// When the clustering of each layer is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refresh {
    #[default]
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub solver: SolverConfig,
    /// Parameterized-layer ordinals kept at full precision. `None` means the
    /// first and last parameterized layers.
    pub exclude_layers: Option<BTreeSet<usize>>,
    pub seed: u64,
    pub refresh: Refresh,
    /// Epochs (0-based) at whose start the learning rate is multiplied by 0.1.
    pub lr_decay_epochs: Vec<usize>,
    /// Fine-tuning only: keep the codes from quantization and refit alpha.
    pub freeze_codes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            eta: 0.1,
            epochs: 100,
            batch_size: 16,
            solver: SolverConfig::default(),
            exclude_layers: None,
            seed: 0,
            refresh: Refresh::PerBatch,
            lr_decay_epochs: Vec::new(),
            freeze_codes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.solver.validate()
    }

    /// Ordinals of layers that are regularized and quantized.
    pub fn included_layers(&self, num_param_layers: usize) -> Result<BTreeSet<usize>> {
        let excluded = resolve_exclusion(self.exclude_layers.as_ref(), num_param_layers)?;
        Ok((0..num_param_layers).filter(|o| !excluded.contains(o)).collect())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.eta * 0.1f64.powi(decays as i32)
    }
}

pub fn resolve_exclusion(
    exclude: Option<&BTreeSet<usize>>,
    num_param_layers: usize,
) -> Result<BTreeSet<usize>> {
    match exclude {
        Some(set) => {
            if let Some(&bad) = set.iter().find(|&&o| o >= num_param_layers) {
                return Err(Error::Config(format!(
                    "excluded layer {bad} does not exist ({num_param_layers} parameterized layers)"
                )));
            }
            Ok(set.clone())
        }
        None => {
            let mut set = BTreeSet::new();
            if num_param_layers > 0 {
                set.insert(0);
                set.insert(num_param_layers - 1);
            }
            Ok(set)
        }
    }
}

/// Current clustering of each regularized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState {
    generation: u64,
    solutions: Vec<Option<ClusterSolution>>,
}

impl RegularizerState {
    pub fn solve(net: &Network, included: &BTreeSet<usize>, solver: &SolverConfig) -> Result<Self> {
        let solutions = (0..net.num_param_layers())
            .map(|o| {
                included
                    .contains(&o)
                    .then(|| solve(net.weights(o), solver))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(RegularizerState {
            generation: net.generation(),
            solutions,
        })
    }

    pub fn solution(&self, ordinal: usize) -> Option<&ClusterSolution> {
        self.solutions.get(ordinal).and_then(Option::as_ref)
    }

    pub fn is_current(&self, net: &Network) -> bool {
        self.generation == net.generation()
    }

    /// `(ordinal, alpha)` for every regularized layer.
    pub fn alphas(&self) -> Vec<(usize, f64)> {
        self.solutions
            .iter()
            .enumerate()
            .filter_map(|(o, s)| s.as_ref().map(|s| (o, s.alpha)))
            .collect()
    }
}

/// Sum of the clustering objective over regularized layers. The training
/// objective is `loss + lambda * regularizer_value`.
pub fn regularizer_value(net: &Network, state: &RegularizerState) -> Result<f64> {
    if !state.is_current(net) {
        return Err(Error::Usage(
            "regularizer state was solved for different weights".into(),
        ));
    }
    Ok(state.solutions.iter().flatten().map(|s| s.objective).sum())
}

/// Clustering objective summed over the regularized layers of `net`.
pub fn total_cluster_objective(net: &Network, config: &TrainConfig) -> Result<f64> {
    let included = config.included_layers(net.num_param_layers())?;
    let state = RegularizerState::solve(net, &included, &config.solver)?;
    regularizer_value(net, &state)
}

/// Per-layer pieces of one update, for checking the update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    pub ordinal: usize,
    pub weights_before: Vec<f64>,
    pub gradient: Vec<f64>,
    /// `W - alpha * codes`, or zeros for excluded and degenerate layers.
    pub residual: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub loss: f64,
    pub eta: f64,
    pub lambda: f64,
    pub layers: Vec<LayerStep>,
}

/// Applies `W <- W - eta * (grad + lambda * (W - alpha * codes))` using the
/// solutions in `state` for regularized layers and plain SGD elsewhere.
pub fn apply_regularized_update(
    net: &mut Network,
    grads: &Gradients,
    state: &RegularizerState,
    eta: f64,
    lambda: f64,
    mut log: Option<&mut Vec<LayerStep>>,
) -> Result<()> {
    check_grads(net, grads)?;
    for (ordinal, g) in grads.layers.iter().enumerate() {
        let target = state
            .solution(ordinal)
            .filter(|s| !s.is_degenerate())
            .map(|s| s.dequantize());
        if let Some(t) = &target {
            if t.len() != g.weight.len() {
                return Err(Error::Usage(format!(
                    "regularizer solution for layer {ordinal} has the wrong length"
                )));
            }
        }
        let before = log.as_ref().map(|_| net.weights(ordinal).to_vec());
        let mut residual = log.as_ref().map(|_| Vec::with_capacity(g.weight.len()));
        let weights = net.weights_mut(ordinal);
        for (i, (w, &d)) in weights.iter_mut().zip(g.weight.data()).enumerate() {
            let r = target.as_ref().map_or(0.0, |t| *w - t[i]);
            if let Some(res) = residual.as_mut() {
                res.push(r);
            }
            *w -= eta * (d + lambda * r);
        }
        if let (Some(b), Some(gb)) = (net.bias_mut(ordinal), g.bias.as_ref()) {
            for (w, &d) in b.iter_mut().zip(gb.data()) {
                *w -= eta * d;
            }
        }
        if let Some(steps) = log.as_deref_mut() {
            let before = before.expect("logging");
            let delta = net
                .weights(ordinal)
                .iter()
                .zip(&before)
                .map(|(a, b)| a - b)
                .collect();
            steps.push(LayerStep {
                ordinal,
                weights_before: before,
                gradient: g.weight.data().to_vec(),
                residual: residual.expect("logging"),
                delta,
            });
        }
    }
    Ok(())
}

fn step_inner(
    net: &mut Network,
    batch: &Batch,
    config: &TrainConfig,
    eta: f64,
    state: &mut RegularizerState,
    included: &BTreeSet<usize>,
    log: bool,
) -> Result<StepLog> {
    let needs_solve = config.refresh == Refresh::PerBatch
        || state.solutions.len() != net.num_param_layers()
        || included.iter().any(|&o| state.solution(o).is_none());
    if needs_solve {
        *state = RegularizerState::solve(net, included, &config.solver)?;
    }
    let (loss, cache) = forward(net, batch)?;
    let grads = backward(net, &cache)?;
    let mut steps = Vec::new();
    apply_regularized_update(
        net,
        &grads,
        state,
        eta,
        config.lambda,
        log.then_some(&mut steps),
    )?;
    Ok(StepLog {
        loss,
        eta,
        lambda: config.lambda,
        layers: steps,
    })
}

/// One regularized SGD step on `batch`. Returns the batch loss before the update.
pub fn crq_step(
    net: &mut Network,
    batch: &Batch,
    config: &TrainConfig,
    state: &mut RegularizerState,
) -> Result<f64> {
    let included = config.included_layers(net.num_param_layers())?;
    Ok(step_inner(net, batch, config, config.eta, state, &included, false)?.loss)
}

/// [`crq_step`] that also records gradient, residual and delta per layer.
pub fn crq_step_logged(
    net: &mut Network,
    batch: &Batch,
    config: &TrainConfig,
    state: &mut RegularizerState,
) -> Result<StepLog> {
    let included = config.included_layers(net.num_param_layers())?;
    step_inner(net, batch, config, config.eta, state, &included, true)
}

/// End-of-epoch measurements on the full training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub total_j: f64,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Ordinals whose alpha appears in each record, in column order.
    pub layers: Vec<usize>,
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut header = String::from("epoch,train_loss,train_acc,total_J");
        for o in &self.layers {
            header.push_str(&format!(",alpha_layer_{o}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.rows {
            let mut line = format!("{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.total_j);
            for a in &r.alphas {
                line.push_str(&format!(",{a}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Resumable epoch loop over a dataset.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    rng: Rng,
    epoch: usize,
    state: Option<RegularizerState>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        Ok(Trainer {
            config,
            rng,
            epoch: 0,
            state: None,
        })
    }

    /// Continues from a saved shuffle-stream position and epoch counter.
    pub fn resume(config: TrainConfig, rng: &RngState, epoch: usize) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            rng: Rng::from_state(rng)?,
            config,
            epoch,
            state: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn run_epoch(&mut self, net: &mut Network, data: &Dataset) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Usage("training data is empty".into()));
        }
        let included = self.config.included_layers(net.num_param_layers())?;
        let eta = self.config.learning_rate(self.epoch);
        let mut state = match self.state.take() {
            Some(s) if self.config.refresh == Refresh::PerBatch => s,
            _ => RegularizerState::solve(net, &included, &self.config.solver)?,
        };
        for batch in data.batches(self.config.batch_size, &mut self.rng) {
            step_inner(net, &batch, &self.config, eta, &mut state, &included, false)?;
        }
        self.state = Some(state);
        self.epoch += 1;
        measure(net, data, &self.config, self.epoch)
    }

    pub fn run(&mut self, net: &mut Network, data: &Dataset, epochs: usize) -> Result<TrainLog> {
        let layers = self
            .config
            .included_layers(net.num_param_layers())?
            .into_iter()
            .collect();
        let mut log = TrainLog {
            layers,
            rows: Vec::with_capacity(epochs),
        };
        if epochs > 0 && data.is_empty() {
            return Err(Error::Usage("training data is empty".into()));
        }
        for _ in 0..epochs {
            log.rows.push(self.run_epoch(net, data)?);
        }
        Ok(log)
    }
}

/// Loss, accuracy and clustering objective of `net` on the full dataset.
pub fn measure(net: &Network, data: &Dataset, config: &TrainConfig, epoch: usize) -> Result<EpochRecord> {
    let batch = data.as_batch();
    let (loss, _) = forward(net, &batch)?;
    let acc = accuracy(net, &batch)?;
    let included = config.included_layers(net.num_param_layers())?;
    let state = RegularizerState::solve(net, &included, &config.solver)?;
    Ok(EpochRecord {
        epoch,
        train_loss: loss,
        train_acc: acc,
        total_j: regularizer_value(net, &state)?,
        alphas: state.alphas().into_iter().map(|(_, a)| a).collect(),
    })
}

/// Regularized retraining for `config.epochs` epochs, updating `net` in place.
pub fn retrain(net: &mut Network, data: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Usage("training data is empty".into()));
    }
    Trainer::new(config.clone())?.run(net, data, config.epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{sgd_step, Architecture, LayerSpec};
    use crate::numeric::DenseArray;

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

    fn all_layers() -> TrainConfig {
        TrainConfig {
            exclude_layers: Some(BTreeSet::new()),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn default_exclusion_is_first_and_last() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.included_layers(3).unwrap(), BTreeSet::from([1]));
        assert_eq!(cfg.included_layers(1).unwrap(), BTreeSet::new());
        let bad = TrainConfig {
            exclude_layers: Some(BTreeSet::from([5])),
            ..TrainConfig::default()
        };
        assert!(bad.included_layers(3).is_err());
    }

    #[test]
    fn regularizer_value_examples() {
        let net = single_layer(vec![1.0, -1.0, 0.0, 1.0]);
        let cfg = all_layers();
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &cfg.solver).unwrap();
        assert_eq!(regularizer_value(&net, &state).unwrap(), 0.0);

        let net = single_layer(vec![0.9, 0.1, -0.8, 0.05]);
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &cfg.solver).unwrap();
        assert!((regularizer_value(&net, &state).unwrap() - 0.0175).abs() < 1e-12);

        let mut moved = net.clone();
        moved.weights_mut(0)[0] = 0.0;
        assert!(matches!(regularizer_value(&moved, &state), Err(Error::Usage(_))));
    }

    #[test]
    fn scalar_update_matches_hand_arithmetic() {
        // Weights [0.9, 0.8] cluster to alpha = 0.85, codes [+1, +1].
        let mut net = single_layer(vec![0.9, 0.8]);
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &SolverConfig::default()).unwrap();
        assert!((state.solution(0).unwrap().alpha - 0.85).abs() < 1e-15);
        let grads = Gradients::zeros_like(&net);
        apply_regularized_update(&mut net, &grads, &state, 0.1, 0.001, None).unwrap();
        assert!((net.weights(0)[0] - 0.899995).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_matches_plain_sgd_bitwise() {
        let mut rng = Rng::new(9);
        let mut a = Network::init(Architecture::mlp(&[2, 6, 6, 2]).unwrap(), &mut rng).unwrap();
        let mut b = a.clone();
        let batch = Batch::new(
            DenseArray::new(vec![4, 2], (0..8).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap(),
            vec![0, 1, 1, 0],
        )
        .unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..all_layers()
        };
        let mut state = RegularizerState::solve(&a, &BTreeSet::new(), &cfg.solver).unwrap();
        crq_step(&mut a, &batch, &cfg, &mut state).unwrap();

        let (_, cache) = forward(&b, &batch).unwrap();
        let g = backward(&b, &cache).unwrap();
        sgd_step(&mut b, &g, cfg.eta).unwrap();
        for o in 0..a.num_param_layers() {
            let x: Vec<u64> = a.weights(o).iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.weights(o).iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn large_lambda_shrinks_residual_monotonically() {
        let mut rng = Rng::new(4);
        let w: Vec<f64> = (0..50).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut net = single_layer(w);
        let cfg = TrainConfig {
            lambda: 1e3,
            eta: 1e-4,
            ..all_layers()
        };
        let included = BTreeSet::from([0]);
        let grads = Gradients::zeros_like(&net);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let state = RegularizerState::solve(&net, &included, &cfg.solver).unwrap();
            let r = regularizer_value(&net, &state).unwrap().sqrt();
            assert!(r < last || r == 0.0);
            last = r;
            apply_regularized_update(&mut net, &grads, &state, cfg.eta, cfg.lambda, None).unwrap();
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn fixed_clustering_converges_geometrically() {
        let mut net = single_layer(vec![0.9, 0.1, -0.8, 0.05]);
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &SolverConfig::default()).unwrap();
        let target = state.solution(0).unwrap().dequantize();
        let grads = Gradients::zeros_like(&net);
        let (eta, lambda) = (0.1, 2.0);
        let ratio = 1.0 - eta * lambda;
        let start: Vec<f64> = net.weights(0).iter().zip(&target).map(|(w, t)| w - t).collect();
        for k in 1..=20 {
            apply_regularized_update(&mut net, &grads, &state, eta, lambda, None).unwrap();
            for (i, (&w, &t)) in net.weights(0).iter().zip(&target).enumerate() {
                let expected = start[i] * ratio.powi(k);
                assert!(((w - t) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularizer_pulls_toward_center() {
        let mut rng = Rng::new(6);
        let w: Vec<f64> = (0..200).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut net = single_layer(w.clone());
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &SolverConfig::default()).unwrap();
        let target = state.solution(0).unwrap().dequantize();
        let grads = Gradients::zeros_like(&net);
        apply_regularized_update(&mut net, &grads, &state, 0.1, 0.5, None).unwrap();
        for ((&before, &after), &t) in w.iter().zip(net.weights(0)).zip(&target) {
            if before == t {
                assert_eq!(after, before);
            } else {
                assert!((after - t).abs() < (before - t).abs());
            }
        }
    }

    #[test]
    fn degenerate_layer_gets_no_pull() {
        let mut net = single_layer(vec![0.0, 0.0]);
        let state = RegularizerState::solve(&net, &BTreeSet::from([0]), &SolverConfig::default()).unwrap();
        let grads = Gradients::zeros_like(&net);
        apply_regularized_update(&mut net, &grads, &state, 0.1, 1.0, None).unwrap();
        assert_eq!(net.weights(0), &[0.0, 0.0]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut rng = Rng::new(1);
        let mut net = Network::init(Architecture::mlp(&[2, 4, 2]).unwrap(), &mut rng).unwrap();
        let before = net.clone();
        let data = crate::data::blobs(2, 20, 0.5, 1.5, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = retrain(&mut net, &data, &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn empty_data_is_rejected() {
        let mut rng = Rng::new(1);
        let mut net = Network::init(Architecture::mlp(&[2, 4, 2]).unwrap(), &mut rng).unwrap();
        let full = crate::data::blobs(2, 20, 0.5, 1.5, &mut rng).unwrap();
        let empty = full.split(0.0, &mut rng).unwrap().1;
        assert!(matches!(
            retrain(&mut net, &empty, &TrainConfig::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn learning_rate_decays() {
        let cfg = TrainConfig {
            eta: 0.1,
            lr_decay_epochs: vec![10, 20],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(0), 0.1);
        assert!((cfg.learning_rate(10) - 0.01).abs() < 1e-15);
        assert!((cfg.learning_rate(25) - 0.001).abs() < 1e-15);
    }
}
