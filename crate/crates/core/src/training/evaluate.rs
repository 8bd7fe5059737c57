use std::collections::{BTreeMap, BTreeSet};

use crate::config::{AucMode, Config, Task};
use crate::data::Dataset;
use crate::distill_layer::Kdv;
use crate::error::{KredError, Result};
use crate::eval::{accuracy, auc, calinski_harabasz, macro_f1, summarize_ranking, MetricsReport, RankedGroup, RankingSummary};
use crate::kg::mix;
use crate::model::{cosine, KredModel, Scorer};

use super::sample_negatives;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }

    fn pick<T>(self, s: &crate::data::Split<T>) -> &[T] {
        match self {
            EvalSplit::Train => &s.train,
            EvalSplit::Val => &s.val,
            EvalSplit::Test => &s.test,
        }
    }
}

/// The model-selection metric of each task.
pub fn validation_metric_name(task: Task) -> &'static str {
    match task {
        Task::User2Item | Task::Item2Item | Task::Local => "auc",
        Task::Popularity | Task::Category => "accuracy",
    }
}

fn u2i_groups(scorer: &Scorer<'_>, data: &Dataset, split: EvalSplit) -> Result<Vec<RankedGroup>> {
    split
        .pick(&data.split)
        .iter()
        .map(|&i| {
            let imp = &data.impressions[i];
            let user = scorer.user_vector(&imp.history)?;
            let docs: Vec<usize> = imp.candidates.iter().map(|c| c.0).collect();
            let labels = imp.candidates.iter().map(|c| c.1).collect();
            RankedGroup::new(imp.id.clone(), scorer.user_item(&user, &docs)?, labels)
        })
        .collect()
}

fn i2i_groups(scorer: &Scorer<'_>, data: &Dataset, cfg: &Config, split: EvalSplit) -> Result<Vec<RankedGroup>> {
    let proj = scorer.projections()?;
    let mut partners: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(a, b) in data.i2i.train.iter().chain(&data.i2i.val).chain(&data.i2i.test) {
        partners.entry(a).or_default().insert(b);
        partners.entry(b).or_default().insert(a);
    }
    split
        .pick(&data.i2i)
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let pool: Vec<usize> = (0..data.docs.len())
                .filter(|&d| d != a && !partners[&a].contains(&d))
                .collect();
            let n = cfg.data.i2i_test_negatives.min(pool.len());
            let negs = sample_negatives(&pool, n, mix(mix(cfg.seed, 0x1e57), k as u64))?;
            let scores = std::iter::once(b).chain(negs).map(|d| cosine(&proj[a], &proj[d])).collect();
            let mut labels = vec![false; n + 1];
            labels[0] = true;
            RankedGroup::new(format!("{}~{}", data.docs[a].id, data.docs[b].id), scores, labels)
        })
        .collect()
}

fn class_docs(data: &Dataset, task: Task, split: EvalSplit) -> Vec<(usize, usize)> {
    split
        .pick(&data.doc_split)
        .iter()
        .map(|&d| {
            let label = match task {
                Task::Popularity => data.popularity[d],
                Task::Category => data.docs[d].category_id,
                _ => usize::from(data.docs[d].local),
            };
            (d, label)
        })
        .collect()
}

struct ClassResult {
    preds: Vec<usize>,
    labels: Vec<usize>,
    positive_probs: Vec<f64>,
}

fn classify_docs(scorer: &Scorer<'_>, data: &Dataset, task: Task, split: EvalSplit) -> Result<ClassResult> {
    let mut out = ClassResult {
        preds: Vec::new(),
        labels: Vec::new(),
        positive_probs: Vec::new(),
    };
    for (d, label) in class_docs(data, task, split) {
        let probs = scorer.class_probs(task, d)?;
        let pred = (0..probs.len())
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        out.preds.push(pred);
        out.labels.push(label);
        out.positive_probs.push(probs.get(1).copied().unwrap_or(0.0));
    }
    if out.preds.is_empty() {
        return Err(KredError::UndefinedMetric(format!("{task}: no {} documents", split.name())));
    }
    Ok(out)
}

fn ranking(groups: &[RankedGroup], cfg: &Config) -> Result<RankingSummary> {
    summarize_ranking(groups, cfg.eval.auc_mode, cfg.eval.ndcg_k, cfg.eval.hit_k)
}

/// The model-selection metric of `task` on one split.
pub fn validate(model: &KredModel, data: &Dataset, cfg: &Config, task: Task, split: EvalSplit) -> Result<f64> {
    let kdvs = model.kdvs(&data.docs)?;
    let scorer = model.scorer(&kdvs);
    match task {
        Task::User2Item => Ok(ranking(&u2i_groups(&scorer, data, split)?, cfg)?.auc),
        Task::Item2Item => Ok(ranking(&i2i_groups(&scorer, data, cfg, split)?, cfg)?.auc),
        Task::Local => {
            let r = classify_docs(&scorer, data, task, split)?;
            let labels: Vec<bool> = r.labels.iter().map(|&l| l == 1).collect();
            auc(&r.positive_probs, &labels)
        }
        Task::Popularity | Task::Category => {
            let r = classify_docs(&scorer, data, task, split)?;
            accuracy(&r.preds, &r.labels)
        }
    }
}

/// All metrics of `tasks` on `split`, plus the clustering score of the
/// document vectors by category.
pub fn evaluate(model: &KredModel, data: &Dataset, cfg: &Config, tasks: &[Task], split: EvalSplit) -> Result<MetricsReport> {
    let kdvs: Vec<Kdv> = model.kdvs(&data.docs)?;
    let scorer = model.scorer(&kdvs);
    let mut report = MetricsReport::new(cfg.seed);
    let s = split.name();
    let auc_name = match cfg.eval.auc_mode {
        AucMode::Grouped => "auc",
        AucMode::Global => "global_auc",
    };
    for &task in tasks {
        let t = task.name();
        match task {
            Task::User2Item | Task::Item2Item => {
                let groups = if task == Task::User2Item {
                    u2i_groups(&scorer, data, split)?
                } else {
                    i2i_groups(&scorer, data, cfg, split)?
                };
                match ranking(&groups, cfg) {
                    Ok(r) => {
                        report.push(auc_name, t, s, r.auc);
                        report.push(&format!("ndcg@{}", cfg.eval.ndcg_k), t, s, r.ndcg);
                        report.push(&format!("hit@{}", cfg.eval.hit_k), t, s, r.hit);
                        report.push("groups", t, s, r.groups as f64);
                        if r.skipped > 0 {
                            report
                                .diagnostics
                                .push(format!("{t} {s}: skipped {} single-class groups", r.skipped));
                        }
                    }
                    Err(KredError::UndefinedMetric(why)) => report.diagnostics.push(format!("{t} {s}: {why}")),
                    Err(e) => return Err(e),
                }
            }
            Task::Popularity | Task::Category | Task::Local => {
                let r = match classify_docs(&scorer, data, task, split) {
                    Ok(r) => r,
                    Err(KredError::UndefinedMetric(why)) => {
                        report.diagnostics.push(why);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let classes = model.arch.heads.classifier(task)?.classes;
                report.push("accuracy", t, s, accuracy(&r.preds, &r.labels)?);
                report.push("macro_f1", t, s, macro_f1(&r.preds, &r.labels, classes)?);
                if task == Task::Local {
                    let labels: Vec<bool> = r.labels.iter().map(|&l| l == 1).collect();
                    match auc(&r.positive_probs, &labels) {
                        Ok(a) => report.push("auc", t, s, a),
                        Err(e) => report.diagnostics.push(format!("{t} {s}: {e}")),
                    }
                }
            }
        }
    }
    let points: Vec<Vec<f64>> = kdvs.into_iter().map(|k| k.0).collect();
    let labels: Vec<usize> = data.docs.iter().map(|d| d.category_id).collect();
    match calinski_harabasz(&points, &labels) {
        Ok(ch) => report.push("calinski_harabasz", "category", "all", ch),
        Err(e) => report.diagnostics.push(format!("calinski_harabasz: {e}")),
    }
    Ok(report)
}
