//! Run configuration: a TOML document whose every key has a desk-scale default.
//!
//! ```toml
//! space = "desk27"          # builtin name or path to a space definition
//! seed = 0
//! out = "runs/default"
//!
//! [partition]
//! criterion = "nonlinear_count"
//! k = 3
//!
//! [supernet]
//! g = 2
//!
//! [train]
//! preset = "desk"           # or "full":  200 epochs, batch 1024, lr 0.12
//! epochs = 20
//!
//! [evo]
//! population = 50
//! constraint = { metric = "flops", max = 1000000 }
//!
//! [eval]
//! oracle = "oracle.csv"
//! top_m = 150
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use fewshot_nas::partition::{Criterion, CriterionKind};
use fewshot_nas::search::EvoConfig;
use fewshot_nas::seed;
use fewshot_nas::training::{SyntheticSpec, TrainConfig, TrainMode};
use fewshot_nas::{Error, SearchSpace};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub space: String,
    pub seed: u64,
    pub out: PathBuf,
    pub partition: PartitionSection,
    pub supernet: SupernetSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub evo: EvoConfig,
    pub eval: EvalSection,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: "desk27".into(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            partition: PartitionSection::default(),
            supernet: SupernetSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            evo: EvoConfig::default(),
            eval: EvalSection::default(),
            oracle: OracleSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub criterion: String,
    pub k: usize,
    /// Exact enumeration up to this size, uniform sample of this many above it.
    pub sample_budget: u64,
    /// Probe batch for the linear-regions criterion.
    pub probe_samples: usize,
    pub histogram_bins: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            criterion: "nonlinear_count".into(),
            k: 3,
            sample_budget: 20_000,
            probe_samples: 8,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetSection {
    pub g: usize,
}

impl Default for SupernetSection {
    fn default() -> Self {
        SupernetSection { g: 2 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub preset: String,
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mode: Option<TrainMode>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: "desk".into(),
            epochs: None,
            batch_size: None,
            lr0: None,
            momentum: None,
            weight_decay: None,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory with `train/` and `test/` splits; synthetic data when unset.
    pub dir: Option<PathBuf>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub oracle: Option<PathBuf>,
    pub dataset: Option<String>,
    pub top_m: usize,
    pub batch_size: usize,
    /// Largest number of subnets to estimate.
    pub max_subnets: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { oracle: None, dataset: None, top_m: 150, batch_size: 256, max_subnets: 20_000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub epochs: u64,
    pub seeds: Vec<u64>,
    pub dataset: String,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { epochs: 10, seeds: vec![0, 1, 2], dataset: "synthetic".into() }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.partition.k == 0 {
            return Err(Error::Usage("K must be at least 1".into()).into());
        }
        if ![1, 2, 4].contains(&self.supernet.g) {
            return Err(Error::Usage(format!("G must be 1, 2 or 4, got {}", self.supernet.g)).into());
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(Error::Usage(format!("data directory {} does not exist", dir.display())).into());
            }
        }
        if let Some(o) = &self.eval.oracle {
            if !o.is_file() {
                return Err(Error::Usage(format!("oracle file {} does not exist", o.display())).into());
            }
        }
        self.evo.validate()?;
        self.train_config()?.validate()?;
        Ok(())
    }

    pub fn space(&self) -> anyhow::Result<SearchSpace> {
        Ok(SearchSpace::resolve(&self.space)?)
    }

    pub fn criterion(&self) -> anyhow::Result<Criterion> {
        let kind: CriterionKind = self.partition.criterion.parse()?;
        Ok(match kind {
            CriterionKind::NonlinearCount => Criterion::nonlinear_count(),
            CriterionKind::Flops => Criterion::flops(),
            CriterionKind::LinearRegions => {
                Criterion::linear_regions(self.partition.probe_samples, self.stage_seed("probe"))
            }
        })
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let t = &self.train;
        let base = TrainConfig::preset(&t.preset)?;
        Ok(TrainConfig {
            epochs: t.epochs.unwrap_or(base.epochs),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            lr0: t.lr0.unwrap_or(base.lr0),
            momentum: t.momentum.unwrap_or(base.momentum),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            seed: self.stage_seed("train"),
            mode: t.mode.unwrap_or(base.mode),
        })
    }

    pub fn synthetic_spec(&self, space: &SearchSpace) -> SyntheticSpec {
        let base = SyntheticSpec::for_space(space, self.stage_seed("data"));
        SyntheticSpec {
            train_per_class: self.data.train_per_class.unwrap_or(base.train_per_class),
            test_per_class: self.data.test_per_class.unwrap_or(base.test_per_class),
            noise: self.data.noise.unwrap_or(base.noise),
            ..base
        }
    }

    pub fn evo_config(&self) -> EvoConfig {
        EvoConfig { seed: self.stage_seed("search"), ..self.evo }
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_partial_document() {
        let c: RunConfig = toml::from_str(
            "space = 'nas201'\n[partition]\nk = 4\n[train]\npreset = 'full'\nepochs = 3\n[evo]\nconstraint = { metric = 'flops', max = 10 }\n",
        )
        .unwrap();
        assert_eq!(c.partition.k, 4);
        assert_eq!(c.partition.criterion, "nonlinear_count");
        let t = c.train_config().unwrap();
        assert_eq!((t.epochs, t.batch_size, t.lr0), (3, 1024, 0.12));
        assert_eq!(c.evo.constraint.unwrap().max, 10);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<RunConfig>("sed = 1\n").is_err());
        let c = RunConfig { supernet: SupernetSection { g: 3 }, ..Default::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { partition: PartitionSection { k: 0, ..Default::default() }, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
