//! Success rate as a function of training-set size, for both policies.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{self, TEST_SEED_BASE};
use super::eval::{evaluate, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{train, CnnBaseline, CnnConfig, ModelKind, Policy, RasNet, RasNetConfig, Sample, TrainConfig};

pub const CSV_HEADER: [&str; 6] = ["model", "n", "seed", "success_rate", "mean_err", "wall_seconds"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelKind,
    pub n: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_err: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub test_size: usize,
    pub eps: f64,
    pub model: RasNetConfig,
    /// Base training settings; the epoch count is derived per `N`.
    pub train: TrainConfig,
    /// Target number of sample presentations per run.
    pub sample_budget: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ns: vec![10, 20, 40, 100, 200],
            seeds: vec![0, 1, 2],
            models: vec![ModelKind::Rasnet, ModelKind::Cnn],
            test_size: 200,
            eps: DEFAULT_EPS,
            model: RasNetConfig::default(),
            train: TrainConfig::default(),
            sample_budget: 4000,
            min_epochs: 20,
            max_epochs: 200,
        }
    }
}

impl SweepConfig {
    pub fn epochs_for(&self, n: usize) -> usize {
        self.sample_budget.div_ceil(n.max(1)).clamp(self.min_epochs, self.max_epochs)
    }

    fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.seeds.is_empty() || self.models.is_empty() {
            return Err(Error::Config("sweep needs at least one N, seed and model".into()));
        }
        if self.ns.windows(2).any(|w| w[0] >= w[1]) || self.ns[0] == 0 {
            return Err(Error::Config(format!("Ns must be positive and strictly ascending, got {:?}", self.ns)));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test_size must be positive".into()));
        }
        Ok(())
    }
}

fn build(kind: ModelKind, cfg: &RasNetConfig) -> Result<Box<dyn Policy>> {
    Ok(match kind {
        ModelKind::Rasnet => Box::new(RasNet::new(cfg.clone())?),
        ModelKind::Cnn => Box::new(CnnBaseline::new(CnnConfig::matched_to(cfg)?)?),
    })
}

/// Training sets for seed `s` are episodes `s * 100_000 ..`; every run is
/// scored on the same held-out episodes.
pub fn run_sweep(cfg: &SweepConfig, mut on_row: impl FnMut(&SweepRow) -> Result<()>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let test: Vec<Sample> = dataset::generate(cfg.test_size, TEST_SEED_BASE)?
        .iter()
        .map(dataset::to_sample)
        .collect();
    let max_n = *cfg.ns.last().expect("validated");
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pool = dataset::generate(max_n, seed * 100_000)?;
        for &n in &cfg.ns {
            let train_set: Vec<Sample> = pool[..n].iter().map(dataset::to_sample).collect();
            for &kind in &cfg.models {
                let started = Instant::now();
                let mut model_cfg = cfg.model.clone();
                model_cfg.seed = seed;
                let mut policy = build(kind, &model_cfg)?;
                let tc = TrainConfig {
                    epochs: cfg.epochs_for(n),
                    seed,
                    ..cfg.train.clone()
                };
                train(policy.as_mut(), &train_set, &tc, |_| Ok(()))?;
                let report = evaluate(policy.as_mut(), &test, cfg.eps, None)?;
                let row = SweepRow {
                    model: kind,
                    n,
                    seed,
                    success_rate: report.success_rate,
                    mean_err: report.mean_joint_error,
                    wall_seconds: started.elapsed().as_secs_f64(),
                };
                on_row(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    w.into_inner().map_err(|e| Error::Input(format!("csv buffer: {e}")))
}

pub fn write_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

/// Parses a sweep CSV, rejecting any header other than [`CSV_HEADER`].
pub fn parse_csv(text: &[u8]) -> Result<Vec<SweepRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(text);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Input("sweep CSV is empty".into()))??;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Input(format!("unexpected sweep CSV header {header:?}")));
    }
    let hdr = csv::StringRecord::from(CSV_HEADER.to_vec());
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec?;
        let row: SweepRow = rec.deserialize(Some(&hdr))?;
        if !(0.0..=1.0).contains(&row.success_rate) {
            return Err(Error::Input(format!("success_rate {} outside [0, 1]", row.success_rate)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Mean success rate of one model at one `N` across seeds.
pub fn mean_success(rows: &[SweepRow], model: ModelKind, n: usize) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.model == model && r.n == n).map(|r| r.success_rate).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Streams rows to `out` as they finish, header first.
pub struct CsvStream<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvStream<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(CSV_HEADER)?;
        inner.flush().map_err(|e| Error::io("<csv stream>", e))?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, row: &SweepRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| Error::io("<csv stream>", e))
    }
}
