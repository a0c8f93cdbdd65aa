//! Experiment configuration (single JSON document, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{CenterUpdate, ConvFormulation, GcConfig};
use crate::data_gen::{corrupt_labels, gen_rf, gen_two_blobs, inject_duplicates, RfConfig};
use crate::dataset::{Dataset, LabelSpace};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::model::{Activation, LayerSpec, LossSpec, ModelSnapshot, SgdConfig};
use crate::numerics::RngStream;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn config_version() -> u32 {
    CONFIG_VERSION
}

fn all_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicates: Option<DuplicateSpec>,
    #[serde(default)]
    pub corrupt_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Rf {
        #[serde(default = "d_input_dim")]
        input_dim: usize,
        #[serde(default = "d_teacher_hidden")]
        teacher_hidden: usize,
        #[serde(default = "d_student_hidden")]
        student_hidden: usize,
        #[serde(default = "d_n_train")]
        n_train: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        teacher_bias: Option<f64>,
    },
    Blobs {
        n_per_class: usize,
        separation: f64,
        #[serde(default)]
        overlap_count: usize,
    },
    File {
        path: PathBuf,
    },
}

fn d_input_dim() -> usize {
    20
}
fn d_teacher_hidden() -> usize {
    20
}
fn d_student_hidden() -> usize {
    200
}
fn d_n_train() -> usize {
    200
}

impl DataSource {
    /// Desk-scale random-features defaults.
    pub fn rf_default() -> Self {
        DataSource::Rf {
            input_dim: d_input_dim(),
            teacher_hidden: d_teacher_hidden(),
            student_hidden: d_student_hidden(),
            n_train: d_n_train(),
            teacher_bias: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuplicateSpec {
    pub n_distinct: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Frozen random-features layer plus trainable readout; needs an `rf`
    /// data source.
    #[default]
    RfStudent,
    Linear {
        #[serde(default)]
        bias: bool,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "yes")]
        bias: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSpec {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec {
            lr: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 10,
            steps: 2000,
        }
    }
}

impl TrainerSpec {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Steps between variance measurements.
    #[serde(default = "d_log_interval")]
    pub log_interval: u64,
    /// Estimates drawn per estimator and measurement.
    #[serde(default = "d_draws")]
    pub estimate_draws: usize,
    /// Steps between SVRG anchor refreshes and clustering refits.
    #[serde(default = "d_update_interval")]
    pub update_interval: u64,
    #[serde(default = "d_gc_iters")]
    pub gc_iters: usize,
    /// Number of clusters; defaults to the batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    /// Refit clusters starting from the previous assignment.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub center_update: CenterUpdate,
    #[serde(default = "d_formulation")]
    pub formulation: ConvFormulation,
}

fn d_log_interval() -> u64 {
    50
}
fn d_draws() -> usize {
    100
}
fn d_update_interval() -> u64 {
    500
}
fn d_gc_iters() -> usize {
    10
}
fn d_formulation() -> ConvFormulation {
    ConvFormulation::Auto
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            log_interval: d_log_interval(),
            estimate_draws: d_draws(),
            update_interval: d_update_interval(),
            gc_iters: d_gc_iters(),
            clusters: None,
            warm_start: false,
            center_update: CenterUpdate::default(),
            formulation: d_formulation(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale random-features experiment with every estimator.
    pub fn rf_default(seed: u64) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed,
            dataset: DatasetSpec {
                source: DataSource::rf_default(),
                duplicates: None,
                corrupt_fraction: 0.0,
            },
            model: ModelSpec::RfStudent,
            trainer: TrainerSpec::default(),
            schedule: ScheduleSpec::default(),
            estimators: all_estimators(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate_static()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn clusters(&self) -> usize {
        self.schedule.clusters.unwrap_or(self.trainer.batch_size)
    }

    pub fn gc_config(&self) -> GcConfig {
        GcConfig {
            iters: self.schedule.gc_iters,
            center_update: self.schedule.center_update.clone(),
            formulation: self.schedule.formulation,
        }
    }

    /// Checks that do not need the dataset.
    pub fn validate_static(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        self.trainer.sgd().validate()?;
        if self.trainer.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let s = &self.schedule;
        if s.log_interval == 0 || s.update_interval == 0 {
            return bad("schedule intervals must be >= 1".into());
        }
        if s.estimate_draws < 2 {
            return bad("estimate_draws must be >= 2".into());
        }
        if s.gc_iters == 0 {
            return bad("gc_iters must be >= 1".into());
        }
        if self.clusters() == 0 {
            return bad("clusters must be >= 1".into());
        }
        if self.estimators.is_empty() {
            return bad("estimator roster is empty".into());
        }
        let mut seen = self.estimators.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.estimators.len() {
            return bad("estimator roster has duplicates".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.corrupt_fraction) {
            return bad("corrupt_fraction outside [0, 1]".into());
        }
        if let Some(d) = self.dataset.duplicates {
            if !(0.0..1.0).contains(&d.fraction) {
                return bad("duplicate fraction outside [0, 1)".into());
            }
        }
        if matches!(self.model, ModelSpec::RfStudent) && !matches!(self.dataset.source, DataSource::Rf { .. }) {
            return bad("rf_student model needs an rf data source".into());
        }
        Ok(())
    }
}

/// Everything a trajectory needs, built deterministically from the config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub model: ModelSnapshot,
    pub loss: LossSpec,
}

/// Root stream of a config seed; every consumer derives a named child.
pub fn root_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

pub fn build_datasets(config: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>, Option<crate::data_gen::RfProblem>)> {
    let root = root_stream(config.seed).derive("data");
    let (mut train, test, rf) = match &config.dataset.source {
        DataSource::Rf {
            input_dim,
            teacher_hidden,
            student_hidden,
            n_train,
            teacher_bias,
        } => {
            let problem = gen_rf(&RfConfig {
                input_dim: *input_dim,
                teacher_hidden: *teacher_hidden,
                student_hidden: *student_hidden,
                n_train: *n_train,
                seed: config.seed,
                teacher_bias: *teacher_bias,
            })?;
            (problem.train.clone(), Some(problem.test.clone()), Some(problem))
        }
        DataSource::Blobs {
            n_per_class,
            separation,
            overlap_count,
        } => (
            gen_two_blobs(*n_per_class, *separation, *overlap_count, &mut root.derive("blobs"))?,
            None,
            None,
        ),
        DataSource::File { path } => (Dataset::load(path)?, None, None),
    };
    if config.dataset.corrupt_fraction > 0.0 {
        train = corrupt_labels(&train, config.dataset.corrupt_fraction, &mut root.derive("corrupt"))?;
    }
    if let Some(d) = config.dataset.duplicates {
        train = inject_duplicates(&train, d.n_distinct, d.fraction, &mut root.derive("duplicates"))?;
    }
    Ok((train, test, rf))
}

/// Builds datasets, the initial model and the loss; validates sizes.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate_static()?;
    let (train, test, rf) = build_datasets(config)?;
    let n = train.len();
    if config.trainer.batch_size > n {
        return Err(Error::Config(format!("batch_size {} > N = {n}", config.trainer.batch_size)));
    }
    if config.clusters() > n {
        return Err(Error::Config(format!("clusters {} > N = {n}", config.clusters())));
    }
    let (outputs, loss) = match train.label_space() {
        LabelSpace::Binary => (1, LossSpec::logistic()),
        LabelSpace::Classes(c) => (c, LossSpec::cross_entropy()),
    };
    let input = train.input_dim();
    let model = match &config.model {
        ModelSpec::RfStudent => rf
            .ok_or_else(|| Error::Config("rf_student model needs an rf data source".into()))?
            .student_model()?,
        ModelSpec::Linear { bias } => {
            ModelSnapshot::zeros(vec![LayerSpec::fully_connected(input, outputs, Activation::Identity, *bias)], vec![])?
        }
        ModelSpec::Mlp { hidden, bias } => {
            let mut dims = vec![input];
            dims.extend(hidden);
            dims.push(outputs);
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let act = if i + 2 < dims.len() { Activation::Relu } else { Activation::Identity };
                    LayerSpec::fully_connected(w[0], w[1], act, *bias)
                })
                .collect();
            ModelSnapshot::init_normal(layers, &mut root_stream(config.seed).derive("init"))?
        }
    };
    Ok(Prepared {
        train,
        test,
        model,
        loss,
    })
}
