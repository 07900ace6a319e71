//! Declarative description of one run, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, subject_split, CsvSchema, SeriesBatch, SynthConfig};
use crate::data::generate_synthetic;
use crate::enhancement::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::shapelet::ShapeletConfig;
use crate::training::{FitConfig, LossConfig, OptimizerConfig, ScheduleConfig, TrainSettings};

/// Pre-split or single CSV dataset. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub schema: PathBuf,
    pub train: PathBuf,
    /// Held-out file; when absent the train file is split by subject.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            synth: Some(SynthConfig::default()),
            csv: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub shapelet: ShapeletConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
}

impl RunConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.test_fraction = {} must be in (0, 1)",
                d.test_fraction
            )));
        }
        match (&d.synth, &d.csv) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data: give either [data.synth] or [data.csv], not both".into()))
            }
            (Some(s), None) => s.validate()?,
            _ => {}
        }
        self.fit_config().validate()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            train: self.train.clone(),
            seed: self.seed,
        }
    }

    /// Synthetic settings in effect; the defaults when no source is given.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match (&self.data.synth, &self.data.csv) {
            (Some(s), _) => Some(s.clone()),
            (None, None) => Some(SynthConfig::default()),
            (None, Some(_)) => None,
        }
    }

    /// Makes CSV paths absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(csv) = &mut self.data.csv {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut csv.schema);
            fix(&mut csv.train);
            if let Some(t) = &mut csv.test {
                fix(t);
            }
        }
    }

    /// Train and test sets described by the data section.
    pub fn load_data(&self) -> Result<(SeriesBatch, SeriesBatch)> {
        let split = |d: &SeriesBatch| subject_split(d, self.data.test_fraction, self.seed);
        if let Some(s) = self.synth_config() {
            return split(&generate_synthetic(&s)?);
        }
        let csv = self.data.csv.as_ref().expect("csv source when not synthetic");
        let schema = CsvSchema::load(&csv.schema)?;
        let train = load_csv(&csv.train, &schema)?;
        match &csv.test {
            Some(t) => Ok((train, load_csv(t, &schema)?)),
            None => split(&train),
        }
    }
}
