//! Run configuration: every hyperparameter of a run lives here, is written
//! next to the run's outputs, and can be overridden with dotted `key=value`
//! pairs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KredError, Result};
use crate::kg::TransEConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    User2Item,
    Item2Item,
    Popularity,
    Category,
    Local,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::User2Item,
        Task::Item2Item,
        Task::Popularity,
        Task::Category,
        Task::Local,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::User2Item => "user2item",
            Task::Item2Item => "item2item",
            Task::Popularity => "popularity",
            Task::Category => "category",
            Task::Local => "local",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Popularity | Task::Category | Task::Local)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = KredError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| KredError::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of the knowledge-layer attention scorers.
    pub hidden: usize,
    /// Hidden width of the user2item predictor; 0 makes it a single affine layer.
    pub u2i_hidden: usize,
    /// Width of the tanh projection used by the item2item cosine head.
    pub i2i_dim: usize,
    pub max_neighbors: usize,
    /// Frequency cap; a mention seen f times uses frequency row min(f, cap) − 1.
    pub freq_cap: u32,
    /// Most recent clicks kept when building a user vector.
    pub history_cap: usize,
    pub popularity_classes: usize,
    pub category_classes: usize,
    /// Fine-tune TransE entity vectors instead of keeping them frozen.
    pub finetune_entities: bool,
    /// Ablation switches; all true is the full model.
    pub use_entities: bool,
    pub use_kgat: bool,
    pub use_context: bool,
    pub distill_attention: bool,
    /// Skip the knowledge layers entirely and feed the base vector to the heads.
    pub dv_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            u2i_hidden: 128,
            i2i_dim: 128,
            max_neighbors: 20,
            freq_cap: 20,
            history_cap: 50,
            popularity_classes: 4,
            category_classes: 15,
            finetune_entities: false,
            use_entities: true,
            use_kgat: true,
            use_context: true,
            distill_attention: true,
            dv_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    /// Task whose validation metric drives early stopping; defaults to the first task.
    pub target: Option<Task>,
    pub lr: f64,
    /// Weight of the squared-L2 penalty over trainable, non-frozen parameters.
    pub l2_lambda: f64,
    /// Softmax smoothing factor of the ranking loss.
    pub gamma_smooth: f64,
    pub negatives: usize,
    pub batch: usize,
    pub patience: usize,
    /// Mini-batches per task before the stage-1 scheduler moves to the next task.
    pub alternation_period: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::User2Item],
            target: None,
            lr: 0.001,
            l2_lambda: 1e-5,
            gamma_smooth: 10.0,
            negatives: 5,
            batch: 64,
            patience: 10,
            alternation_period: 100,
            stage1_epochs: 50,
            stage2_epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn target_task(&self) -> Result<Task> {
        match (self.target, self.tasks.first()) {
            (Some(t), _) if self.tasks.contains(&t) => Ok(t),
            (Some(t), _) => Err(KredError::Config(format!("target task {t} is not enabled"))),
            (None, Some(&t)) => Ok(t),
            (None, None) => Err(KredError::Config("no training tasks enabled".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target_task()?;
        let positive = [self.lr, self.gamma_smooth, self.adam_eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.l2_lambda < 0.0 {
            return Err(KredError::Config("train.lr, gamma_smooth and adam_eps must be positive".into()));
        }
        if self.negatives == 0 || self.batch == 0 || self.alternation_period == 0 {
            return Err(KredError::Config(
                "train.negatives, batch and alternation_period must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Column positions in the behaviors file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorColumns {
    pub impression_id: usize,
    pub user_id: usize,
    pub time: usize,
    pub history: usize,
    pub candidates: usize,
}

impl Default for BehaviorColumns {
    fn default() -> Self {
        Self {
            impression_id: 0,
            user_id: 1,
            time: 2,
            history: 3,
            candidates: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base directory for the relative paths below.
    pub dir: String,
    pub news: String,
    pub behaviors: String,
    pub triples: String,
    pub entity_types: String,
    /// Optional `doc_id<TAB>f1 … fn` file replacing the hashing encoder.
    pub doc_vectors: Option<String>,
    pub columns: BehaviorColumns,
    pub confidence_threshold: f64,
    pub min_history: usize,
    pub n_dv: usize,
    /// Impressions at or after this timestamp form the test split.
    pub test_start: Option<u64>,
    pub val_fraction: f64,
    /// Co-click count a document pair must exceed to be an item2item positive.
    pub i2i_threshold: usize,
    pub i2i_test_negatives: usize,
    /// Fixed news category list; empty means sorted distinct names from the corpus.
    pub news_categories: Vec<String>,
    /// Cap on labeled documents for the local task (low-resource setting).
    pub local_label_limit: Option<usize>,
    /// Positive ratio enforced when down-sampling local labels.
    pub local_positive_ratio: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: ".".into(),
            news: "news.tsv".into(),
            behaviors: "behaviors.tsv".into(),
            triples: "triples.tsv".into(),
            entity_types: "entity_types.tsv".into(),
            doc_vectors: None,
            columns: BehaviorColumns::default(),
            confidence_threshold: 0.9,
            min_history: 5,
            n_dv: 64,
            test_start: None,
            val_fraction: 0.1,
            i2i_threshold: 100,
            i2i_test_negatives: 100,
            news_categories: Vec::new(),
            local_label_limit: None,
            local_positive_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_triples: usize,
    pub n_docs: usize,
    pub n_users: usize,
    pub n_communities: usize,
    pub n_categories: usize,
    pub n_entity_types: usize,
    /// Share of entities that act as community hubs; the rest are mention-level leaves.
    pub hub_fraction: f64,
    /// Per-leaf edges into its own community, and edges to random hubs.
    pub signal_edges: usize,
    pub noise_edges: usize,
    pub title_entities: (usize, usize),
    pub body_entities: (usize, usize),
    /// Click probability when the document matches / does not match the user's community.
    pub click_match: f64,
    pub click_other: f64,
    pub impressions_per_user: usize,
    pub candidates_per_impression: usize,
    pub history_len: (usize, usize),
    /// Share of users generated with a short click history (filtered at load time).
    pub cold_user_fraction: f64,
    pub local_community_rate: f64,
    pub local_other_rate: f64,
    /// Fraction of documents published in the profile-building / train / test periods.
    pub doc_periods: (f64, f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 500,
            n_triples: 2000,
            n_docs: 300,
            n_users: 200,
            n_communities: 8,
            n_categories: 15,
            n_entity_types: 5,
            hub_fraction: 0.4,
            signal_edges: 2,
            noise_edges: 2,
            title_entities: (1, 2),
            body_entities: (2, 3),
            click_match: 0.9,
            click_other: 0.05,
            impressions_per_user: 4,
            candidates_per_impression: 8,
            history_len: (5, 10),
            cold_user_fraction: 0.05,
            local_community_rate: 0.9,
            local_other_rate: 0.02,
            doc_periods: (0.35, 0.4, 0.25),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AucMode {
    #[default]
    Grouped,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub auc_mode: AucMode,
    pub ndcg_k: usize,
    pub hit_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            auc_mode: AucMode::Grouped,
            ndcg_k: 10,
            hit_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub format_version: u32,
    /// Root seed; every random stream in a run is derived from it.
    pub seed: u64,
    pub transe: TransEConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            transe: TransEConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Small dimensions and desk-scale thresholds used by the synthetic corpus.
    pub fn desk() -> Self {
        let mut cfg = Config::default();
        cfg.transe.dim = 16;
        cfg.transe.epochs = 20;
        cfg.transe.lr = 0.05;
        cfg.transe.batch = 64;
        cfg.model.hidden = 32;
        cfg.model.u2i_hidden = 32;
        cfg.model.i2i_dim = 32;
        cfg.data.n_dv = 32;
        cfg.data.i2i_threshold = 4;
        cfg.train.lr = 0.002;
        cfg.train.batch = 32;
        cfg.train.alternation_period = 4;
        cfg.train.stage1_epochs = 20;
        cfg.train.stage2_epochs = 20;
        cfg.train.patience = 10;
        cfg
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| KredError::Config(format!("invalid config: {e}")))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e| KredError::Config(format!("invalid config: {e}")))?;
        cfg.resolve()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KredError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Applies overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&self.to_toml(), overrides)
    }

    /// Derives dependent settings and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if self.format_version != FORMAT_VERSION {
            return Err(KredError::Config(format!(
                "config format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.transe.seed = self.seed;
        self.transe.validate()?;
        self.train.validate()?;
        if self.data.n_dv == 0 || self.model.hidden == 0 || self.model.i2i_dim == 0 {
            return Err(KredError::Config("dimensions must be positive".into()));
        }
        if self.model.freq_cap == 0 {
            return Err(KredError::Config("model.freq_cap must be positive".into()));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| KredError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| KredError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
