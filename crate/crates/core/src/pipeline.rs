//! End-to-end commands: dataset generation, training, prefix sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, prefix_truncate, subject_split, write_csv, zero_pad};
use crate::data::{CsvSchema, MetricsReport, SeriesBatch};
use crate::error::{Error, Result};
use crate::model::{InputDims, Model};
use crate::training::{Checkpoint, EpochRecord, TrainReport, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.toml";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn config_base(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Loads a run config and makes its relative paths absolute.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    let base = config_base(path);
    cfg.resolve_paths(&base);
    if let Some(out) = &mut cfg.output_dir {
        if out.is_relative() {
            *out = base.join(&*out);
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub class_counts: Vec<usize>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub files: Vec<PathBuf>,
}

impl SynthSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "class counts: {:?}", self.class_counts);
        let _ = writeln!(s, "train counts: {:?}", self.train_counts);
        let _ = writeln!(s, "test counts: {:?}", self.test_counts);
        for f in &self.files {
            let _ = writeln!(s, "wrote {}", f.display());
        }
        s
    }
}

/// Generates the synthetic dataset of `cfg`, splits it by subject and
/// writes `train.csv`, `test.csv` and `schema.txt` to `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let sc = cfg
        .synth_config()
        .ok_or_else(|| Error::Config("synth needs a [data.synth] section".into()))?;
    let data = generate_synthetic(&sc)?;
    let (train, test) = subject_split(&data, cfg.data.test_fraction, cfg.seed)?;
    create_dir(out)?;
    let schema = CsvSchema::standard(sc.channels, sc.length, sc.classes);
    let files = vec![out.join("train.csv"), out.join("test.csv"), out.join("schema.txt")];
    write_csv(&train, &files[0], &schema)?;
    write_csv(&test, &files[1], &schema)?;
    write(&files[2], &schema.to_text())?;
    Ok(SynthSummary {
        class_counts: data.class_counts(),
        train_counts: train.class_counts(),
        test_counts: test.class_counts(),
        files,
    })
}

/// Checkpoint written by [`train`]: the run description plus trainer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub run: RunConfig,
    pub state: Checkpoint,
}

impl RunCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub keep_ratio: f64,
    pub report: TrainReport,
    pub test_metrics: MetricsReport,
    pub files: Vec<PathBuf>,
}

/// Builds the model for `cfg` and `train` with the run seed.
pub fn build_model(cfg: &RunConfig, train: &SeriesBatch) -> Result<Model> {
    let dims = InputDims {
        channels: train.channels(),
        length: train.length(),
        classes: train.num_classes,
    };
    Model::new(cfg.model.clone(), cfg.shapelet.clone(), dims, cfg.seed)
}

/// Trains per `cfg`, using the test split for per-epoch validation, and
/// writes the config echo, checkpoint, report and final test metrics.
pub fn train(cfg: &RunConfig, out: &Path, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let (train_set, test_set) = cfg.load_data()?;
    let model = build_model(cfg, &train_set)?;
    create_dir(out)?;
    let config_path = out.join(CONFIG_FILE);
    write(&config_path, &cfg.to_toml())?;

    let mut trainer = Trainer::new(model, &train_set, cfg.fit_config())?;
    let report = trainer.run(&train_set, Some(&test_set), &mut on_epoch)?;
    let keep_ratio = trainer.keep_ratio();
    let test_metrics = trainer.model.evaluate(&test_set, keep_ratio)?;

    let ckpt = RunCheckpoint {
        run: cfg.clone(),
        state: trainer.checkpoint(),
    };
    let files = vec![
        config_path,
        out.join(CHECKPOINT_FILE),
        out.join(REPORT_FILE),
        out.join(METRICS_FILE),
    ];
    write(&files[1], &serde_json::to_string(&ckpt).expect("checkpoint serializes"))?;
    write(&files[2], &report.to_jsonl())?;
    let mut metrics = serde_json::to_string_pretty(&test_metrics).expect("metrics serialize");
    metrics.push('\n');
    write(&files[3], &metrics)?;
    Ok(TrainOutcome {
        model: trainer.model,
        keep_ratio,
        report,
        test_metrics,
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub length: usize,
    pub keep_ratio: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const COLUMNS: &'static str = "t,accuracy,macro_precision,macro_recall,macro_f1";

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# prefix sweep: first t steps kept, zero-padded to length {}; keep ratio {}\n{}\n",
            self.length,
            self.keep_ratio,
            Self::COLUMNS
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.t, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            );
        }
        s
    }
}

/// Metrics of `model` on `test` truncated to each prefix length in
/// `ts` (sorted ascending) and zero-padded back to full length.
pub fn early_sweep(model: &Model, keep_ratio: f64, test: &SeriesBatch, ts: &[usize]) -> Result<SweepTable> {
    let l = test.length();
    if ts.is_empty() {
        return Err(Error::Argument("no prefix lengths given".into()));
    }
    if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > l) {
        return Err(Error::Argument(format!("prefix length {bad} outside 1..={l}")));
    }
    let mut ts = ts.to_vec();
    ts.sort_unstable();
    let rows = ts
        .into_iter()
        .map(|t| {
            let padded = zero_pad(&prefix_truncate(test, t)?, l)?;
            Ok(SweepRow {
                t,
                metrics: model.evaluate(&padded, keep_ratio)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        length: l,
        keep_ratio,
        rows,
    })
}

/// [`early_sweep`] driven by a checkpoint written by [`train`].
pub fn early_sweep_from_checkpoint(path: &Path, ts: &[usize]) -> Result<SweepTable> {
    let ckpt = RunCheckpoint::load(path)?;
    let (_, test) = ckpt.run.load_data()?;
    early_sweep(&ckpt.state.model, ckpt.state.keep_ratio, &test, ts)
}

/// Parses `2,4,6` into prefix lengths.
pub fn parse_prefix_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Argument(format!("invalid prefix length {p:?}")))
        })
        .collect()
}
