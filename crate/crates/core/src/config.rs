//! Run configuration: a TOML file plus `dot.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, AugmentPolicy, Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::model::{uniform_event_points, StageSpec, VnodeModelConfig};
use crate::ode::{GradMode, SolverConfig};
use crate::trainer::OptimizerConfig;
use crate::volterra::{Activation, MultiScaleSpec, VolterraLayerSpec, VolterraMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub gradcheck: GradcheckSection,
}

/// Architecture template. Every stage uses the model-level values unless a
/// `[[model.stage]]` entry overrides them; when entries are present their
/// count is the number of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `[C, H, W]`; defaults to the dataset's image shape.
    pub input_shape: Option<[usize; 3]>,
    pub num_classes: usize,
    pub stages: Option<usize>,
    pub channels: usize,
    pub kernel: usize,
    pub rank: usize,
    pub filter_rank: Option<usize>,
    pub dynamics_rank: Option<usize>,
    pub filter_groups: usize,
    pub dynamics_groups: usize,
    pub dynamics_kernel: Option<usize>,
    /// Per-stage filter strides; default 1 for the first stage and 2 after.
    pub strides: Option<Vec<usize>>,
    pub mode: VolterraMode,
    pub filter_activation: Activation,
    pub dynamics_activation: Activation,
    pub pool: bool,
    pub time_injection: bool,
    pub solver: SolverConfig,
    pub event_points: Option<Vec<f64>>,
    pub stage: Vec<StageSection>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_shape: None,
            num_classes: 10,
            stages: None,
            channels: 64,
            kernel: 3,
            rank: 4,
            filter_rank: None,
            dynamics_rank: None,
            filter_groups: 1,
            dynamics_groups: 1,
            dynamics_kernel: None,
            strides: None,
            mode: VolterraMode::LowRank,
            filter_activation: Activation::Identity,
            dynamics_activation: Activation::Identity,
            pool: true,
            time_injection: true,
            solver: SolverConfig::default(),
            event_points: None,
            stage: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub channels: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub rank: Option<usize>,
    pub filter_groups: Option<usize>,
    pub dynamics_rank: Option<usize>,
    pub dynamics_groups: Option<usize>,
    pub dynamics_kernel: Option<usize>,
    /// Parallel filter branches; replaces `channels`/`kernel` when present.
    pub branches: Option<Vec<BranchSection>>,
    pub solver: Option<SolverConfig>,
    pub pool: Option<bool>,
    pub time_injection: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSection {
    pub kernel: usize,
    pub out_channels: usize,
    pub rank: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub groups: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: DatasetId,
    /// Dataset root; the CLI flag and environment variable take precedence.
    pub dir: Option<PathBuf>,
    /// Require canonical file sizes.
    pub strict: bool,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// Keep only the first N training samples (after the per-class subset).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub augment: bool,
    pub augment_policy: AugmentPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Cifar10,
            dir: None,
            strict: true,
            train_per_class: None,
            test_per_class: None,
            train_limit: None,
            test_limit: None,
            augment: false,
            augment_policy: AugmentPolicy::default(),
        }
    }
}

impl DataSection {
    /// Loads both splits from `root` and applies the configured subsets.
    pub fn load(&self, root: &Path) -> Result<(Dataset, Dataset)> {
        if !root.is_dir() {
            return Err(Error::data(root, "dataset directory does not exist"));
        }
        let (train, test) = data::load(self.dataset, root, self.strict)?;
        let subset = |d: Dataset, per_class: Option<usize>, limit: Option<usize>| {
            let d = match per_class {
                Some(k) => d.first_per_class(k),
                None => d,
            };
            match limit {
                Some(n) if n < d.len() => d.select(&(0..n).collect::<Vec<_>>()),
                _ => d,
            }
        };
        Ok((
            subset(train, self.train_per_class, self.train_limit),
            subset(test, self.test_per_class, self.test_limit),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub grad_mode: GradMode,
    /// Per-stage loss weights; uniform when absent.
    pub stage_weights: Option<Vec<f64>>,
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            optimizer: OptimizerConfig::default(),
            grad_mode: GradMode::Adjoint,
            stage_weights: None,
            checkpoint_every: 1,
            eval_batch_size: 256,
            max_batches_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub samples: usize,
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            samples: 2,
            epsilon: 1e-5,
            threshold: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e| Error::config(format!("cannot parse configuration: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid configuration: {e}")))
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Expands the architecture template into a validated model configuration.
    pub fn model_config(&self) -> Result<VnodeModelConfig> {
        self.model.build(self.data.dataset.input_shape())
    }
}

/// Sets `path = value` in `table`, parsing `value` as a TOML value when
/// possible and as a bare string otherwise. Numeric path segments index arrays.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form dot.path=value")))?;
    let (path, raw) = (path.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override path {path:?}")));
    }
    let mut slot = table
        .entry(keys[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    for key in &keys[1..] {
        slot = match slot {
            toml::Value::Table(t) => t
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            toml::Value::Array(a) => {
                let i: usize = key
                    .parse()
                    .map_err(|_| Error::config(format!("override {path:?}: {key:?} is not an array index")))?;
                a.get_mut(i)
                    .ok_or_else(|| Error::config(format!("override {path:?}: index {i} out of range")))?
            }
            _ => return Err(Error::config(format!("override {path:?} descends into a scalar"))),
        };
    }
    *slot = value;
    Ok(())
}

impl ModelSection {
    pub fn num_stages(&self) -> Result<usize> {
        match (self.stage.len(), self.stages) {
            (0, None) => Ok(1),
            (0, Some(m)) => Ok(m),
            (n, None) => Ok(n),
            (n, Some(m)) if n == m => Ok(n),
            (n, Some(m)) => Err(Error::config(format!(
                "model.stages = {m} but {n} [[model.stage]] entries"
            ))),
        }
    }

    pub fn build(&self, dataset_shape: [usize; 3]) -> Result<VnodeModelConfig> {
        let m = self.num_stages()?;
        if m == 0 {
            return Err(Error::config("model needs at least one stage"));
        }
        let input_shape = self.input_shape.unwrap_or(dataset_shape);
        let strides = match &self.strides {
            Some(s) if s.len() != m => {
                return Err(Error::config(format!(
                    "model.strides has {} entries for {m} stages",
                    s.len()
                )))
            }
            Some(s) => s.clone(),
            None => (0..m).map(|i| if i == 0 { 1 } else { 2 }).collect(),
        };
        let empty = StageSection::default();
        let mut cin = input_shape[0];
        let mut stages = Vec::with_capacity(m);
        for (i, &default_stride) in strides.iter().enumerate() {
            let s = self.stage.get(i).unwrap_or(&empty);
            let stride = s.stride.unwrap_or(default_stride);
            let filter_rank = s.rank.or(self.filter_rank).unwrap_or(self.rank);
            let layer =
                |kernel: usize, out: usize, rank: usize, stride: usize, padding: Option<usize>, groups: usize| {
                    VolterraLayerSpec::new(cin, out, kernel, rank)
                        .with_stride(stride)
                        .with_padding(padding.unwrap_or(kernel / 2))
                        .with_groups(groups)
                        .with_mode(self.mode)
                        .with_activation(self.filter_activation)
                };
            let branches = match &s.branches {
                Some(bs) => bs
                    .iter()
                    .map(|b| {
                        layer(
                            b.kernel,
                            b.out_channels,
                            b.rank.unwrap_or(filter_rank),
                            b.stride.unwrap_or(stride),
                            b.padding,
                            b.groups.or(s.filter_groups).unwrap_or(self.filter_groups),
                        )
                    })
                    .collect(),
                None => vec![layer(
                    s.kernel.unwrap_or(self.kernel),
                    s.channels.unwrap_or(self.channels),
                    filter_rank,
                    stride,
                    s.padding,
                    s.filter_groups.unwrap_or(self.filter_groups),
                )],
            };
            let filter = MultiScaleSpec { branches };
            let c = filter.out_channels();
            let dk = s.dynamics_kernel.or(self.dynamics_kernel).unwrap_or(self.kernel);
            let dynamics =
                VolterraLayerSpec::new(c, c, dk, s.dynamics_rank.or(self.dynamics_rank).unwrap_or(self.rank))
                    .with_groups(s.dynamics_groups.unwrap_or(self.dynamics_groups))
                    .with_mode(self.mode)
                    .with_activation(self.dynamics_activation);
            stages.push(StageSpec {
                filter,
                dynamics,
                solver: s.solver.clone().unwrap_or_else(|| self.solver.clone()),
                time_injection: s.time_injection.unwrap_or(self.time_injection),
                pool: s.pool.unwrap_or(self.pool),
            });
            cin = c;
        }
        let cfg = VnodeModelConfig {
            input_shape,
            num_classes: self.num_classes,
            event_points: self.event_points.clone().unwrap_or_else(|| uniform_event_points(m)),
            stages,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_a_one_stage_cifar_model() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.input_shape, [3, 32, 32]);
        assert_eq!(m.stages.len(), 1);
        assert_eq!(m.stages[0].filter.out_channels(), 64);
        assert_eq!(m.event_points, vec![0.0, 1.0]);
    }

    #[test]
    fn overrides_win() {
        let text = "seed = 1\n[model]\nstages = 3\nchannels = 32\n";
        let cfg = RunConfig::from_toml_str(
            text,
            &[
                "seed=9".into(),
                "model.channels=16".into(),
                "train.optimizer.kind=sgd-momentum".into(),
                "data.dataset=mnist".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.channels, 16);
        let m = cfg.model_config().unwrap();
        assert_eq!(m.input_shape, [1, 28, 28]);
        assert_eq!(m.event_points.len(), 4);
        assert_eq!(m.stages[1].filter.branches[0].stride, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[model]\nchanels = 3\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_str("", &["model.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn explicit_stage_list() {
        let text = r#"
[model]
input_shape = [3, 16, 16]
channels = 8
[[model.stage]]
branches = [{ kernel = 1, out_channels = 4 }, { kernel = 3, out_channels = 12 }]
[[model.stage]]
stride = 2
"#;
        let cfg = RunConfig::from_toml_str(text, &["model.stage.1.rank=0".into()]).unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.stages[0].filter.out_channels(), 16);
        assert_eq!(m.stages[1].filter.branches[0].in_channels, 16);
        assert_eq!(m.stages[1].filter.branches[0].rank, 0);
    }
}
