//! Ranking and classification metrics, and the metrics report.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::AucMode;
use crate::error::{KredError, Result};

/// Scored candidates of one user or impression.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedGroup {
    pub id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl RankedGroup {
    pub fn new(id: impl Into<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(KredError::dim("ranked group", &[scores.len()], &[labels.len()]));
        }
        Ok(Self {
            id: id.into(),
            scores,
            labels,
        })
    }
}

fn undefined(metric: &str, why: &str) -> KredError {
    KredError::UndefinedMetric(format!("{metric}: {why}"))
}

/// Mann-Whitney statistic: the fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(KredError::dim("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(undefined("auc", "needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie blocks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Candidate indices by descending score; ties keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

pub fn ndcg_at_k(group: &RankedGroup, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(KredError::Config("ndcg k must be at least 1".into()));
    }
    let n_pos = group.labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(undefined("ndcg", "group has no positives"));
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking(&group.scores)
        .into_iter()
        .take(k)
        .enumerate()
        .filter(|&(_, i)| group.labels[i])
        .map(|(r, _)| gain(r + 1))
        .sum();
    let ideal: f64 = (1..=n_pos.min(k)).map(gain).sum();
    Ok(dcg / ideal)
}

/// 1 when any positive ranks within the top `k`.
pub fn hit_at_k(group: &RankedGroup, k: usize) -> f64 {
    let hit = ranking(&group.scores).into_iter().take(k).any(|i| group.labels[i]);
    f64::from(u8::from(hit))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(KredError::dim("accuracy", &[preds.len()], &[labels.len()]));
    }
    if preds.is_empty() {
        return Err(undefined("accuracy", "no examples"));
    }
    let right = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(right as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over `classes` classes; a class with no
/// predictions and no examples contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(KredError::dim("macro_f1", &[preds.len()], &[labels.len()]));
    }
    if classes == 0 {
        return Err(undefined("macro_f1", "zero classes"));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(KredError::Data(format!("class {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

/// Between- over within-cluster dispersion scaled by (n − K)/(K − 1).
/// Returns `f64::MAX` when every cluster is a single point.
pub fn calinski_harabasz(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(KredError::dim("calinski_harabasz", &[points.len()], &[labels.len()]));
    }
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(KredError::Data("points have different dimensions".into()));
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    let k = clusters.len();
    let n = points.len();
    if k < 2 {
        return Err(undefined("calinski_harabasz", "needs at least two clusters"));
    }
    if n <= k {
        return Err(undefined("calinski_harabasz", "needs more points than clusters"));
    }
    let centroid = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for &i in idx {
            for (a, x) in c.iter_mut().zip(&points[i]) {
                *a += x;
            }
        }
        c.iter_mut().for_each(|a| *a /= idx.len() as f64);
        c
    };
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let all: Vec<usize> = (0..n).collect();
    let overall = centroid(&all);
    let (mut between, mut within) = (0.0, 0.0);
    for idx in clusters.values() {
        let c = centroid(idx);
        between += idx.len() as f64 * sq(&c, &overall);
        within += idx.iter().map(|&i| sq(&points[i], &c)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(f64::MAX);
    }
    Ok(between / within * (n - k) as f64 / (k - 1) as f64)
}

/// Ranking metrics over many groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub auc: f64,
    pub ndcg: f64,
    pub hit: f64,
    pub groups: usize,
    /// Groups without both labels, left out of the grouped averages.
    pub skipped: usize,
}

pub fn summarize_ranking(groups: &[RankedGroup], mode: AucMode, ndcg_k: usize, hit_k: usize) -> Result<RankingSummary> {
    let mut aucs = Vec::new();
    let mut ndcgs = Vec::new();
    let mut hits = Vec::new();
    let mut skipped = 0;
    for g in groups {
        match (auc(&g.scores, &g.labels), ndcg_at_k(g, ndcg_k)) {
            (Ok(a), Ok(n)) => {
                aucs.push(a);
                ndcgs.push(n);
                hits.push(hit_at_k(g, hit_k));
            }
            (Err(KredError::UndefinedMetric(_)), _) | (_, Err(KredError::UndefinedMetric(_))) => skipped += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(undefined("ranking", "no group has both positive and negative labels"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let auc_value = match mode {
        AucMode::Grouped => mean(&aucs),
        AucMode::Global => {
            let scores: Vec<f64> = groups.iter().flat_map(|g| g.scores.iter().copied()).collect();
            let labels: Vec<bool> = groups.iter().flat_map(|g| g.labels.iter().copied()).collect();
            auc(&scores, &labels)?
        }
    };
    Ok(RankingSummary {
        auc: auc_value,
        ndcg: mean(&ndcgs),
        hit: mean(&hits),
        groups: aucs.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub metric: String,
    pub task: String,
    pub split: String,
    pub value: f64,
}

/// Line-oriented metrics plus free-form diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub lines: Vec<MetricLine>,
    pub diagnostics: Vec<String>,
}

impl MetricsReport {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn push(&mut self, metric: &str, task: &str, split: &str, value: f64) {
        self.lines.push(MetricLine {
            metric: metric.into(),
            task: task.into(),
            split: split.into(),
            value,
        });
    }

    pub fn get(&self, metric: &str, task: &str, split: &str) -> Option<f64> {
        self.lines
            .iter()
            .find(|l| l.metric == metric && l.task == task && l.split == split)
            .map(|l| l.value)
    }

    /// `metric<TAB>task<TAB>split<TAB>value` lines, then `# ` diagnostics.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", l.metric, l.task, l.split, l.value);
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "# {d}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes `metrics.tsv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| KredError::io(dir, e))?;
        for (name, text) in [("metrics.tsv", self.to_tsv()), ("metrics.json", self.to_json())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| KredError::io(&path, e))?;
        }
        Ok(())
    }
}
