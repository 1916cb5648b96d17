//! Experiment configuration and the staged pipeline.
//!
//! Stages communicate only through files in the output directory:
//!
//! | stage    | reads                                   | writes |
//! |----------|-----------------------------------------|--------|
//! | pretrain | -                                       | `reference.ckpt`, `pretrain_log.csv` |
//! | retrain  | `reference.ckpt`                        | `crq_retrained.ckpt`, `retrain_log.csv` |
//! | quantize | `crq_retrained.ckpt`                    | `crq_model.crq`, `crq_model_float.crq` |
//! | finetune | `crq_model.crq`, `crq_retrained.ckpt`   | `crq_finetuned.crq`, `finetune_shadow.ckpt`, `finetune_log.csv` |
//! | evaluate | `reference.ckpt`, quantized models      | `evaluation.json`, `evaluation.csv` |
//! | compare  | `reference.ckpt`                        | `comparison.json`, `baseline_model.crq` |
//! | report   | `comparison.json`                       | `curves.csv`, `comparison.csv`, `errors.csv` |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::SolverConfig;
use crate::container::Checkpoint;
use crate::data::{ingest, Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, direct_quantize, evaluate, ErrorReport};
use crate::nn::{Architecture, LayerSpec, Network};
use crate::numeric::Rng;
use crate::quantize::{compression_ratio, finetune, quantize, Provenance, QuantizedModel, ShadowState};
use crate::report::{emit_report, write_json, write_with, ComparisonReport, ComparisonRow, Curves, ReportStatus};
use crate::train::{resolve_exclusion, Refresh, TrainConfig, TrainLog, Trainer};

/// Child-stream ids used to derive independent seeds from the root seed.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const RETRAIN: u64 = 4;
    pub const FINETUNE: u64 = 5;
}

pub fn stage_seed(seed: u64, stream: u64) -> u64 {
    Rng::child(seed, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchitectureSpec {
    Mlp {
        dims: Vec<usize>,
    },
    ToyCnn {
        channels: usize,
        side: usize,
        filters: [usize; 2],
        hidden: usize,
        classes: usize,
    },
    Custom {
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
    },
}

impl ArchitectureSpec {
    pub fn build(&self) -> Result<Architecture> {
        match self {
            ArchitectureSpec::Mlp { dims } => Architecture::mlp(dims),
            ArchitectureSpec::ToyCnn {
                channels,
                side,
                filters,
                hidden,
                classes,
            } => Architecture::toy_cnn(*channels, *side, *filters, *hidden, *classes),
            ArchitectureSpec::Custom { input_shape, layers } => {
                let arch = Architecture {
                    input_shape: input_shape.clone(),
                    layers: layers.clone(),
                };
                arch.validate()?;
                Ok(arch)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ArchitectureSpec::Mlp { dims } => {
                let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
                format!("mlp-{}", dims.join("-"))
            }
            ArchitectureSpec::ToyCnn { .. } => "toy-cnn".into(),
            ArchitectureSpec::Custom { .. } => "custom".into(),
        }
    }
}

/// Training hyperparameters shared by the stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub pretrain_epochs: usize,
    pub retrain_epochs: usize,
    pub finetune_epochs: usize,
    pub eta: f64,
    /// Fine-tuning learning rate; `eta` when absent.
    pub finetune_eta: Option<f64>,
    pub batch_size: usize,
    pub lambda: f64,
    pub exclude_layers: Option<BTreeSet<usize>>,
    pub refresh: Refresh,
    /// Retraining epochs at which the learning rate drops by 10x.
    pub lr_decay_epochs: Vec<usize>,
    pub freeze_codes: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            pretrain_epochs: 100,
            retrain_epochs: 200,
            finetune_epochs: 20,
            eta: 0.1,
            finetune_eta: None,
            batch_size: 16,
            lambda: 0.001,
            exclude_layers: None,
            refresh: Refresh::PerBatch,
            lr_decay_epochs: Vec::new(),
            freeze_codes: false,
        }
    }
}

fn default_validation_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    pub dataset: DatasetSource,
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// A `dotted.key=value` replacement applied to the parsed TOML before
/// deserialization. The value is read as a TOML literal, falling back to a
/// bare string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: &str, value: toml::Value) -> Self {
        Override {
            key: key.to_string(),
            value,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {text:?} is not key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::Usage(format!("override {text:?} has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Override::new(key, value))
    }

    /// Comma-separated list, e.g. `train.eta=0.05,seed=7`.
    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Override::parse)
            .collect()
    }

    fn apply(&self, table: &mut toml::Table) -> Result<()> {
        let parts: Vec<&str> = self.key.split('.').collect();
        let (last, path) = parts.split_last().expect("key is non-empty");
        let mut cur = table;
        for p in path {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| {
                Error::Config(format!("override {}: `{p}` is not a table", self.key))
            })?;
        }
        cur.insert(last.to_string(), self.value.clone());
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[Override]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        for o in overrides {
            o.apply(&mut table)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[Override]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        let arch = self.architecture.build()?;
        resolve_exclusion(self.train.exclude_layers.as_ref(), arch.parameterized().len())?;
        self.retrain_config(self.train.lambda).validate()?;
        self.finetune_config().validate()
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.seed,
            config_hash: self.hash(),
        }
    }

    fn base(&self, stream: u64) -> TrainConfig {
        TrainConfig {
            lambda: 0.0,
            eta: self.train.eta,
            epochs: 0,
            batch_size: self.train.batch_size,
            solver: self.solver,
            exclude_layers: self.train.exclude_layers.clone(),
            seed: stage_seed(self.seed, stream),
            refresh: self.train.refresh,
            lr_decay_epochs: Vec::new(),
            freeze_codes: false,
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.pretrain_epochs,
            ..self.base(streams::PRETRAIN)
        }
    }

    pub fn retrain_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            epochs: self.train.retrain_epochs,
            lr_decay_epochs: self.train.lr_decay_epochs.clone(),
            ..self.base(streams::RETRAIN)
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.train.finetune_eta.unwrap_or(self.train.eta),
            epochs: self.train.finetune_epochs,
            freeze_codes: self.train.freeze_codes,
            ..self.base(streams::FINETUNE)
        }
    }

    /// Layers kept at full precision for this architecture.
    pub fn excluded_layers(&self, net: &Network) -> Result<BTreeSet<usize>> {
        resolve_exclusion(self.train.exclude_layers.as_ref(), net.num_param_layers())
    }

    /// (train, validation) split, identical for every stage.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let mut rng = Rng::child(self.seed, streams::DATA);
        ingest(&self.dataset, self.validation_fraction, &mut rng)
    }

    pub fn init_network(&self) -> Result<Network> {
        let mut rng = Rng::child(self.seed, streams::INIT);
        Network::init(self.architecture.build()?, &mut rng)
    }
}

/// Config of the builtin 4-class blob benchmark. Every layer is quantized.
pub const BLOB_BENCHMARK: &str = r#"seed = 0
validation_fraction = 0.2

[dataset]
kind = "blobs"
classes = 4
samples = 5000
spread = 0.6
radius = 1.5

[architecture]
kind = "mlp"
dims = [2, 32, 32, 4]

[train]
pretrain_epochs = 50
retrain_epochs = 200
finetune_epochs = 20
eta = 0.1
batch_size = 16
lambda = 0.001
exclude_layers = []
"#;

pub fn blob_benchmark(seed: u64) -> ExperimentConfig {
    let seed = Override::parse(&format!("seed={seed}")).expect("seed override");
    ExperimentConfig::from_toml(BLOB_BENCHMARK, &[seed]).expect("builtin benchmark config")
}

/// Result of pretraining a full-precision reference.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

pub fn run_pretrain(config: &ExperimentConfig, train: &Dataset) -> Result<Pretrained> {
    let mut net = config.init_network()?;
    check_data(&net, train)?;
    let mut trainer = Trainer::new(config.pretrain_config())?;
    let log = trainer.run(&mut net, train, config.train.pretrain_epochs)?;
    Ok(Pretrained {
        checkpoint: Checkpoint {
            network: net,
            epoch: trainer.epoch(),
            rng: Some(trainer.rng_state()),
            provenance: config.provenance(),
        },
        log,
    })
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    if data.sample_shape() != net.architecture().input_shape.as_slice() {
        return Err(Error::Validation(format!(
            "samples have shape {:?} but the network expects {:?}",
            data.sample_shape(),
            net.architecture().input_shape
        )));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::Validation(format!(
            "dataset has {} classes but the network outputs {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

/// One arm of the paired comparison: retrain with `lambda`, quantize,
/// fine-tune.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub lambda: f64,
    pub retrained: Network,
    pub retrain_log: TrainLog,
    pub quantized: QuantizedModel,
    /// Quantized (pre-fine-tune) model against the retrained network, on validation data.
    pub quantized_report: ErrorReport,
    pub finetuned: QuantizedModel,
    pub finetuned_report: ErrorReport,
    pub finetune_log: TrainLog,
    /// Training accuracy of the projected model, epoch 0 being before fine-tuning.
    pub finetune_curve: Vec<f64>,
}

impl ArmOutcome {
    pub fn quantized_error(&self) -> f64 {
        self.quantized_report.error_rate_pct
    }

    pub fn finetuned_error(&self) -> f64 {
        self.finetuned_report.error_rate_pct
    }

    pub fn mean_weight_mse(&self) -> f64 {
        self.quantized_report.mean_weight_mse()
    }
}

pub fn run_arm(
    config: &ExperimentConfig,
    reference: &Network,
    train: &Dataset,
    validation: &Dataset,
    lambda: f64,
) -> Result<ArmOutcome> {
    let mut net = reference.clone();
    let retrain_log = Trainer::new(config.retrain_config(lambda))?.run(&mut net, train, config.train.retrain_epochs)?;
    let exclude = config.excluded_layers(&net)?;
    let quantized = if lambda == 0.0 {
        direct_quantize(&net, &config.solver, &exclude)?
    } else {
        quantize(&net, &config.solver, &exclude)?
    }
    .with_provenance(config.provenance());
    let quantized_report = ErrorReport::measure("quantized", &net, &quantized, validation)?;
    let (finetuned, finetune_log, shadow) = run_finetune(config, &quantized, &net, train)?;
    let finetuned_report = ErrorReport::measure("finetuned", &shadow, &finetuned, validation)?;
    let mut finetune_curve = vec![accuracy(&quantized.dequantize()?, &train.as_batch())?];
    finetune_curve.extend(finetune_log.rows.iter().map(|r| r.train_acc));
    Ok(ArmOutcome {
        lambda,
        retrained: net,
        retrain_log,
        quantized,
        quantized_report,
        finetuned,
        finetuned_report,
        finetune_log,
        finetune_curve,
    })
}

fn run_finetune(
    config: &ExperimentConfig,
    model: &QuantizedModel,
    shadow: &Network,
    train: &Dataset,
) -> Result<(QuantizedModel, TrainLog, Network)> {
    let outcome = finetune(model, ShadowState::from_network(shadow), train, &config.finetune_config())?;
    Ok((outcome.model, outcome.log, outcome.shadow.network))
}

/// CRQ against the direct-quantization baseline, both starting from the
/// same reference with the same shuffling streams.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub reference_error: f64,
    pub crq: ArmOutcome,
    pub baseline: ArmOutcome,
    /// Training accuracy of the unregularized network continuing at full
    /// precision over the fine-tuning epochs.
    pub full_precision_curve: Vec<f64>,
}

pub fn run_comparison(
    config: &ExperimentConfig,
    reference: &Network,
    train: &Dataset,
    validation: &Dataset,
) -> Result<Comparison> {
    let crq = run_arm(config, reference, train, validation, config.train.lambda)?;
    let baseline = run_arm(config, reference, train, validation, 0.0)?;
    let mut fp = baseline.retrained.clone();
    let full = train.as_batch();
    let mut full_precision_curve = vec![accuracy(&fp, &full)?];
    let mut trainer = Trainer::new(config.finetune_config())?;
    for _ in 0..config.train.finetune_epochs {
        full_precision_curve.push(trainer.run_epoch(&mut fp, train)?.train_acc);
    }
    Ok(Comparison {
        reference_error: evaluate(reference, validation)?,
        crq,
        baseline,
        full_precision_curve,
    })
}

impl Comparison {
    pub fn report(&self, config: &ExperimentConfig) -> ComparisonReport {
        let model = config.architecture.label();
        let row = |method: &str, arm: &ArmOutcome| ComparisonRow {
            model: model.clone(),
            method: method.to_string(),
            ref_error_pct: self.reference_error,
            quantized_error_pct: arm.quantized_error(),
            error_pct: arm.finetuned_error(),
            error_drop_pct: self.reference_error - arm.finetuned_error(),
            mean_weight_mse: arm.mean_weight_mse(),
            compression_ratio: compression_ratio(&arm.finetuned),
        };
        let mut curves = Curves::default();
        curves.push("full_precision", self.full_precision_curve.clone());
        curves.push("baseline_ternary", self.baseline.finetune_curve.clone());
        curves.push("crq_ternary", self.crq.finetune_curve.clone());
        let labelled = |label: &str, r: &ErrorReport| ErrorReport {
            label: label.to_string(),
            ..r.clone()
        };
        ComparisonReport {
            config_hash: config.hash(),
            seed: config.seed,
            rows: vec![row("baseline", &self.baseline), row("crq", &self.crq)],
            curves,
            reports: vec![
                labelled("baseline_quantized", &self.baseline.quantized_report),
                labelled("baseline_finetuned", &self.baseline.finetuned_report),
                labelled("crq_quantized", &self.crq.quantized_report),
                labelled("crq_finetuned", &self.crq.finetuned_report),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Retrain,
    Quantize,
    Finetune,
    Evaluate,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Pretrain,
        Stage::Retrain,
        Stage::Quantize,
        Stage::Finetune,
        Stage::Evaluate,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Retrain => "retrain",
            Stage::Quantize => "quantize",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    /// Config key that `--epochs` sets for this stage, if any.
    pub fn epochs_key(self) -> Option<&'static str> {
        match self {
            Stage::Pretrain => Some("train.pretrain_epochs"),
            Stage::Retrain | Stage::Compare => Some("train.retrain_epochs"),
            Stage::Finetune => Some("train.finetune_epochs"),
            _ => None,
        }
    }
}

pub mod artifacts {
    pub const REFERENCE: &str = "reference.ckpt";
    pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
    pub const RETRAINED: &str = "crq_retrained.ckpt";
    pub const RETRAIN_LOG: &str = "retrain_log.csv";
    pub const MODEL: &str = "crq_model.crq";
    pub const MODEL_FLOAT: &str = "crq_model_float.crq";
    pub const FINETUNED: &str = "crq_finetuned.crq";
    pub const SHADOW: &str = "finetune_shadow.ckpt";
    pub const FINETUNE_LOG: &str = "finetune_log.csv";
    pub const EVALUATION_JSON: &str = "evaluation.json";
    pub const EVALUATION_CSV: &str = "evaluation.csv";
    pub const BASELINE_MODEL: &str = "baseline_model.crq";
}

/// Summary written by the evaluate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub config_hash: String,
    pub seed: u64,
    pub reference_error_pct: f64,
    pub compression_ratio: f64,
    pub reports: Vec<ErrorReport>,
}

/// What a stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub written: Vec<PathBuf>,
    pub status: ReportStatus,
}

/// A config bound to an output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Self {
        Pipeline {
            config,
            out_dir: out_dir.into(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                path,
            })
        }
    }

    fn write_log(&self, name: &str, log: &TrainLog) -> Result<PathBuf> {
        let path = self.path(name);
        write_with(&path, |w| log.write_csv(w))?;
        Ok(path)
    }

    /// Runs the given stages in order.
    pub fn run(&self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        stages.iter().map(|&s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let mut status = ReportStatus::Complete;
        let written = match stage {
            Stage::Pretrain => {
                let (train, _) = self.config.datasets()?;
                let p = run_pretrain(&self.config, &train)?;
                let ckpt = self.path(artifacts::REFERENCE);
                p.checkpoint.save(&ckpt)?;
                vec![ckpt, self.write_log(artifacts::PRETRAIN_LOG, &p.log)?]
            }
            Stage::Retrain => {
                let reference = Checkpoint::load(&self.require(artifacts::REFERENCE, Stage::Pretrain)?)?;
                let (train, _) = self.config.datasets()?;
                let mut net = reference.network;
                check_data(&net, &train)?;
                let config = self.config.retrain_config(self.config.train.lambda);
                let mut trainer = Trainer::new(config)?;
                let log = trainer.run(&mut net, &train, self.config.train.retrain_epochs)?;
                let ckpt = self.path(artifacts::RETRAINED);
                Checkpoint {
                    network: net,
                    epoch: trainer.epoch(),
                    rng: Some(trainer.rng_state()),
                    provenance: self.config.provenance(),
                }
                .save(&ckpt)?;
                vec![ckpt, self.write_log(artifacts::RETRAIN_LOG, &log)?]
            }
            Stage::Quantize => {
                let retrained = Checkpoint::load(&self.require(artifacts::RETRAINED, Stage::Retrain)?)?;
                let net = retrained.network;
                let exclude = self.config.excluded_layers(&net)?;
                let model = quantize(&net, &self.config.solver, &exclude)?.with_provenance(self.config.provenance());
                let packed = self.path(artifacts::MODEL);
                let float = self.path(artifacts::MODEL_FLOAT);
                model.save(&packed)?;
                crate::container::write_file(&float, &model.export_dequantized()?)?;
                vec![packed, float]
            }
            Stage::Finetune => {
                let model = QuantizedModel::load(&self.require(artifacts::MODEL, Stage::Quantize)?)?;
                let shadow = Checkpoint::load(&self.require(artifacts::RETRAINED, Stage::Retrain)?)?;
                let (train, _) = self.config.datasets()?;
                check_data(&shadow.network, &train)?;
                let (finetuned, log, shadow) = run_finetune(&self.config, &model, &shadow.network, &train)?;
                let out = self.path(artifacts::FINETUNED);
                finetuned.save(&out)?;
                let shadow_path = self.path(artifacts::SHADOW);
                Checkpoint {
                    network: shadow,
                    epoch: self.config.train.finetune_epochs,
                    rng: None,
                    provenance: self.config.provenance(),
                }
                .save(&shadow_path)?;
                vec![out, shadow_path, self.write_log(artifacts::FINETUNE_LOG, &log)?]
            }
            Stage::Evaluate => self.evaluate()?,
            Stage::Compare => {
                let reference = Checkpoint::load(&self.require(artifacts::REFERENCE, Stage::Pretrain)?)?;
                let (train, val) = self.config.datasets()?;
                check_data(&reference.network, &train)?;
                let comparison = run_comparison(&self.config, &reference.network, &train, &val)?;
                let json = self.path(crate::report::COMPARISON_JSON);
                write_json(&json, &comparison.report(&self.config))?;
                let baseline = self.path(artifacts::BASELINE_MODEL);
                comparison.baseline.finetuned.save(&baseline)?;
                vec![json, baseline]
            }
            Stage::Report => {
                let path = self.require(crate::report::COMPARISON_JSON, Stage::Compare)?;
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let report: ComparisonReport = serde_json::from_str(&text)?;
                status = emit_report(&report, &self.out_dir)?;
                [
                    crate::report::CURVES_FILE,
                    crate::report::COMPARISON_CSV,
                    crate::report::COMPARISON_JSON,
                    crate::report::ERRORS_CSV,
                ]
                .iter()
                .map(|n| self.path(n))
                .collect()
            }
        };
        Ok(StageOutcome { stage, written, status })
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let reference = Checkpoint::load(&self.require(artifacts::REFERENCE, Stage::Pretrain)?)?;
        let model_path = self.require(artifacts::MODEL, Stage::Quantize)?;
        let model = QuantizedModel::load(&model_path)?;
        let retrained = Checkpoint::load(&self.require(artifacts::RETRAINED, Stage::Retrain)?)?;
        let (_, val) = self.config.datasets()?;
        check_data(&reference.network, &val)?;
        let mut reports = vec![ErrorReport::measure("quantized", &retrained.network, &model, &val)?];
        let finetuned = self.path(artifacts::FINETUNED);
        if finetuned.is_file() {
            let shadow = Checkpoint::load(&self.require(artifacts::SHADOW, Stage::Finetune)?)?;
            let ft = QuantizedModel::load(&finetuned)?;
            reports.push(ErrorReport::measure("finetuned", &shadow.network, &ft, &val)?);
        }
        let evaluation = Evaluation {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            reference_error_pct: evaluate(&reference.network, &val)?,
            compression_ratio: compression_ratio(&model),
            reports,
        };
        let json = self.path(artifacts::EVALUATION_JSON);
        let csv = self.path(artifacts::EVALUATION_CSV);
        write_json(&json, &evaluation)?;
        write_with(&csv, |w| ErrorReport::write_csv(&evaluation.reports, w))?;
        Ok(vec![json, csv])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [dataset]
        kind = "blobs"
        classes = 3
        samples = 60
        [architecture]
        kind = "mlp"
        dims = [2, 8, 8, 3]
        [train]
        pretrain_epochs = 2
        retrain_epochs = 2
        finetune_epochs = 2
    "#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(c.validation_fraction, 0.2);
        assert_eq!(c.train.lambda, 0.001);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.solver, SolverConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nlamda = 0.1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text, &[]), Err(Error::Config(_))));
        let nested = MINIMAL.replace("finetune_epochs = 2", "finetune_epoch = 2");
        assert!(matches!(ExperimentConfig::from_toml(&nested, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_replace_nested_values() {
        let o = Override::parse_list("train.lambda=0.5, seed=9,dataset.spread=0.9").unwrap();
        let c = ExperimentConfig::from_toml(MINIMAL, &o).unwrap();
        assert_eq!(c.train.lambda, 0.5);
        assert_eq!(c.seed, 9);
        assert!(matches!(c.dataset, DatasetSource::Blobs { spread, .. } if spread == 0.9));
    }

    #[test]
    fn bad_overrides() {
        assert!(matches!(Override::parse("novalue"), Err(Error::Usage(_))));
        assert!(matches!(Override::parse("a..b=1"), Err(Error::Usage(_))));
        let o = Override::parse("seed.x=1").unwrap();
        assert!(matches!(ExperimentConfig::from_toml(MINIMAL, &[o]), Err(Error::Config(_))));
        let o = Override::parse("train.lambda=-1").unwrap();
        assert!(matches!(ExperimentConfig::from_toml(MINIMAL, &[o]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        let b = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        let c = ExperimentConfig::from_toml(MINIMAL, &[Override::parse("train.eta=0.2").unwrap()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn benchmark_config_parses() {
        let c = blob_benchmark(7);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.exclude_layers, Some(BTreeSet::new()));
        assert_eq!(c.architecture.label(), "mlp-2-32-32-4");
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: BTreeSet<u64> = (1..=5).map(|s| stage_seed(42, s)).collect();
        assert_eq!(seeds.len(), 5);
        assert_eq!(stage_seed(42, 1), stage_seed(42, 1));
    }

    #[test]
    fn missing_artifact_names_the_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(ExperimentConfig::from_toml(MINIMAL, &[]).unwrap(), dir.path());
        match p.run_stage(Stage::Retrain) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "pretrain"),
            other => panic!("{other:?}"),
        }
        match p.run_stage(Stage::Report) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "compare"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_pipeline_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(ExperimentConfig::from_toml(MINIMAL, &[]).unwrap(), dir.path());
        let outcomes = p.run(&Stage::ALL).unwrap();
        assert_eq!(outcomes.len(), 7);
        for o in &outcomes {
            for f in &o.written {
                assert!(f.is_file(), "{} missing", f.display());
            }
        }
        assert_eq!(outcomes[6].status, ReportStatus::Complete);
    }

    #[test]
    fn mismatched_data_is_a_validation_error() {
        let text = MINIMAL.replace("dims = [2, 8, 8, 3]", "dims = [3, 8, 8, 3]");
        let c = ExperimentConfig::from_toml(&text, &[]).unwrap();
        let (train, _) = c.datasets().unwrap();
        assert!(matches!(run_pretrain(&c, &train), Err(Error::Validation(_))));
    }
}
