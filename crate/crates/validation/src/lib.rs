//! Experiment drivers for the acceptance suite: generate the synthetic
//! corpus, train, and report test metrics.

use std::time::Instant;

use kred::config::Config;
use kred::data::{synth_corpus, Dataset};
use kred::eval::MetricsReport;
use kred::kg::train_transe;
use kred::training::{build_model, evaluate, train_multitask, EvalSplit, TrainOutcome};
use kred::Result;

pub struct RunResult {
    pub report: MetricsReport,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

impl RunResult {
    /// A test-split metric; NaN when absent.
    pub fn test(&self, metric: &str, task: &str) -> f64 {
        self.report.get(metric, task, "test").unwrap_or(f64::NAN)
    }
}

/// The desk preset with `overrides` applied and the root seed set.
pub fn desk_config(seed: u64, overrides: &[&str]) -> Result<Config> {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut cfg = Config::desk().with_overrides(&overrides)?;
    cfg.seed = seed;
    cfg.resolve()
}

/// Generates the corpus for `cfg.seed`, trains every configured task and
/// evaluates them on the test split.
pub fn synthetic_run(cfg: &Config) -> Result<RunResult> {
    let clock = Instant::now();
    let corpus = synth_corpus(&cfg.synth, cfg.seed)?;
    let data = Dataset::from_synth(&corpus, &cfg.data, cfg.model.popularity_classes, cfg.seed)?;
    let tables = train_transe(&data.graph, &cfg.transe)?;
    let mut model = build_model(cfg, &data, &tables)?;
    let outcome = train_multitask(&mut model, &data, cfg, |_| {})?;
    let report = evaluate(&model, &data, cfg, &cfg.train.tasks, EvalSplit::Test)?;
    Ok(RunResult {
        report,
        outcome,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
