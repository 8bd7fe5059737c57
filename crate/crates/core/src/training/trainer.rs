use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Task};
use crate::data::{user_clicks, Dataset};
use crate::error::{KredError, Result};
use crate::kg::{mix, EmbeddingTables};
use crate::model::{Encoder, KredModel};
use crate::numerics::{Tape, Tensor, Var};

use super::evaluate::{validate, EvalSplit};
use super::{sample_negatives, Adam};

/// One training example of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instance {
    /// Impression index and one clicked candidate.
    User2Item { impression: usize, positive: usize },
    Item2Item { anchor: usize, positive: usize },
    Classify { doc: usize, label: usize },
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub stage: u8,
    pub task: Task,
    /// Mean batch loss of the task in this epoch, regularizer included.
    pub loss: f64,
    /// Validation metric of the target task after the epoch.
    pub val_metric: f64,
    pub wall_ms: u64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={}\tstage={}\ttask={}\tloss={:.6}\tval_metric={:.6}\twall_ms={}",
            self.epoch, self.stage, self.task, self.loss, self.val_metric, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub target: Task,
}

/// A fresh model sized for `data`, with the category head matching its vocabulary.
pub fn build_model(cfg: &Config, data: &Dataset, tables: &EmbeddingTables) -> Result<KredModel> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.category_classes = data.categories.len();
    KredModel::new(
        &model_cfg,
        tables,
        &data.graph,
        data.entity_types.len(),
        cfg.data.n_dv,
        mix(cfg.seed, 0x30de1),
    )
}

/// Training examples of `task`.
pub fn instances(data: &Dataset, task: Task) -> Vec<Instance> {
    match task {
        Task::User2Item => data
            .split
            .train
            .iter()
            .flat_map(|&i| {
                data.impressions[i]
                    .positives()
                    .map(move |p| Instance::User2Item { impression: i, positive: p })
            })
            .collect(),
        Task::Item2Item => data
            .i2i
            .train
            .iter()
            .flat_map(|&(a, b)| {
                [
                    Instance::Item2Item { anchor: a, positive: b },
                    Instance::Item2Item { anchor: b, positive: a },
                ]
            })
            .collect(),
        Task::Popularity => data
            .doc_split
            .train
            .iter()
            .map(|&d| Instance::Classify {
                doc: d,
                label: data.popularity[d],
            })
            .collect(),
        Task::Category => data
            .doc_split
            .train
            .iter()
            .map(|&d| Instance::Classify {
                doc: d,
                label: data.docs[d].category_id,
            })
            .collect(),
        Task::Local => data
            .local_train
            .iter()
            .map(|&d| Instance::Classify {
                doc: d,
                label: usize::from(data.docs[d].local),
            })
            .collect(),
    }
}

/// Negative pools drawn from the training period only.
struct Pools {
    train_docs: Vec<usize>,
    clicked: BTreeMap<String, BTreeSet<usize>>,
    partners: BTreeMap<usize, BTreeSet<usize>>,
}

impl Pools {
    fn new(data: &Dataset) -> Self {
        let train: Vec<_> = data.impressions_of(&data.split.train).cloned().collect();
        let mut docs = BTreeSet::new();
        for imp in &train {
            docs.extend(imp.history.iter().copied());
            docs.extend(imp.candidates.iter().map(|c| c.0));
        }
        for &(a, b) in &data.i2i.train {
            docs.insert(a);
            docs.insert(b);
        }
        let clicked = user_clicks(&train)
            .into_iter()
            .map(|(u, s)| (u.to_string(), s))
            .collect();
        let mut partners: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &(a, b) in &data.i2i.train {
            partners.entry(a).or_default().insert(b);
            partners.entry(b).or_default().insert(a);
        }
        Self {
            train_docs: docs.into_iter().collect(),
            clicked,
            partners,
        }
    }

    fn u2i(&self, data: &Dataset, impression: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
        let imp = &data.impressions[impression];
        let shown: Vec<usize> = imp.negatives().collect();
        if shown.len() >= n {
            return sample_negatives(&shown, n, seed);
        }
        let clicked = self.clicked.get(&imp.user);
        let pool: Vec<usize> = self
            .train_docs
            .iter()
            .copied()
            .filter(|d| !clicked.is_some_and(|c| c.contains(d)) && !imp.positives().any(|p| p == *d))
            .collect();
        sample_negatives(&pool, n, seed)
    }

    fn i2i(&self, anchor: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
        let partners = self.partners.get(&anchor);
        let pool: Vec<usize> = self
            .train_docs
            .iter()
            .copied()
            .filter(|&d| d != anchor && !partners.is_some_and(|p| p.contains(&d)))
            .collect();
        sample_negatives(&pool, n, seed)
    }
}

struct TaskQueue {
    task: Task,
    items: Vec<Instance>,
    cursor: usize,
    passes: usize,
}

impl TaskQueue {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<Instance> {
        if self.cursor == 0 {
            self.items.shuffle(rng);
        }
        let end = (self.cursor + size).min(self.items.len());
        let batch = self.items[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.items.len() {
            self.cursor = 0;
            self.passes += 1;
        }
        batch
    }
}

struct Run<'a> {
    data: &'a Dataset,
    cfg: &'a Config,
    pools: Pools,
    rng: ChaCha8Rng,
    step_losses: Vec<f64>,
}

impl Run<'_> {
    /// Mean loss over the batch plus the L2 penalty.
    fn batch_loss<'s>(&mut self, tape: &mut Tape<'s>, enc: &mut Encoder<'_>, task: Task, batch: &[Instance]) -> Result<Var> {
        let tc = &self.cfg.train;
        let docs = &self.data.docs;
        let mut parts = Vec::with_capacity(batch.len());
        for inst in batch {
            let loss = match *inst {
                Instance::User2Item { impression, positive } => {
                    let negs = self.pools.u2i(self.data, impression, tc.negatives, self.rng.gen())?;
                    let imp = &self.data.impressions[impression];
                    let user = enc.user(tape, docs, &imp.history)?;
                    let mut scores = Vec::with_capacity(negs.len() + 1);
                    for d in std::iter::once(positive).chain(negs) {
                        let v = enc.kdv(tape, Some(d), &docs[d])?;
                        scores.push(enc.score(tape, user, v)?);
                    }
                    let s = tape.stack(&scores)?;
                    tape.nll_softmax(s, 0, tc.gamma_smooth)?
                }
                Instance::Item2Item { anchor, positive } => {
                    let negs = self.pools.i2i(anchor, tc.negatives, self.rng.gen())?;
                    let a = enc.kdv(tape, Some(anchor), &docs[anchor])?;
                    let mut scores = Vec::with_capacity(negs.len() + 1);
                    for d in std::iter::once(positive).chain(negs) {
                        let v = enc.kdv(tape, Some(d), &docs[d])?;
                        scores.push(enc.similarity(tape, a, v)?);
                    }
                    let s = tape.stack(&scores)?;
                    tape.nll_softmax(s, 0, tc.gamma_smooth)?
                }
                Instance::Classify { doc, label } => {
                    let v = enc.kdv(tape, Some(doc), &docs[doc])?;
                    let logits = enc.logits(tape, task, v)?;
                    tape.nll_softmax(logits, label, 1.0)?
                }
            };
            parts.push(loss);
        }
        let total = tape.sum(&parts)?;
        let mean = tape.scale(total, 1.0 / parts.len() as f64);
        if tc.l2_lambda == 0.0 {
            return Ok(mean);
        }
        let store = tape.store();
        let mut squares = Vec::new();
        for id in store.trainable_ids() {
            let p = tape.param(id);
            squares.push(tape.sum_squares(p));
        }
        if squares.is_empty() {
            return Ok(mean);
        }
        let l2 = tape.sum(&squares)?;
        let l2 = tape.scale(l2, tc.l2_lambda);
        tape.add(mean, l2)
    }

    fn step(&mut self, model: &mut KredModel, adam: &mut Adam, task: Task, batch: &[Instance]) -> Result<f64> {
        let (loss, grads) = {
            let mut tape = Tape::new(&model.params);
            let mut enc = Encoder::new(&model.arch);
            let l = self.batch_loss(&mut tape, &mut enc, task, batch)?;
            let loss = tape.scalar(l);
            if !loss.is_finite() {
                return Err(KredError::Numeric(format!(
                    "non-finite {task} loss at step {} ({} ops on the tape)",
                    self.step_losses.len() + 1,
                    tape.op_count()
                )));
            }
            (loss, tape.backward(l)?)
        };
        model.params.accumulate(&grads);
        adam.step(&mut model.params);
        self.step_losses.push(loss);
        Ok(loss)
    }

    /// One epoch: tasks take turns of `alternation_period` batches until every
    /// task has completed a full pass. Returns the mean loss per task.
    fn epoch(&mut self, model: &mut KredModel, adam: &mut Adam, queues: &mut [TaskQueue]) -> Result<Vec<f64>> {
        let (batch, period) = (self.cfg.train.batch, self.cfg.train.alternation_period);
        let start: Vec<usize> = queues.iter().map(|q| q.passes).collect();
        let mut sums = vec![(0.0, 0usize); queues.len()];
        while queues.iter().zip(&start).any(|(q, &s)| q.passes == s) {
            for (qi, q) in queues.iter_mut().enumerate() {
                let pass = q.passes;
                for _ in 0..period {
                    let b = q.next_batch(batch, &mut self.rng);
                    let loss = self.step(model, adam, q.task, &b)?;
                    sums[qi].0 += loss;
                    sums[qi].1 += 1;
                    if q.passes != pass {
                        break;
                    }
                }
            }
        }
        Ok(sums.iter().map(|&(s, n)| s / n.max(1) as f64).collect())
    }
}

/// Two-stage training: round-robin over all enabled tasks, then the target
/// task alone, each stage with early stopping on the target's validation
/// metric. The model ends at the best validation snapshot.
pub fn train_multitask(
    model: &mut KredModel,
    data: &Dataset,
    cfg: &Config,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    let target = tc.target_task()?;
    let mut tasks: Vec<Task> = Vec::new();
    for &t in &tc.tasks {
        if !tasks.contains(&t) {
            tasks.push(t);
        }
    }
    let mut run = Run {
        data,
        cfg,
        pools: Pools::new(data),
        rng: ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x7a1)),
        step_losses: Vec::new(),
    };
    let queue = |task: Task| -> Result<TaskQueue> {
        let items = instances(data, task);
        if items.is_empty() {
            return Err(KredError::Data(format!("task {task} has no training examples")));
        }
        Ok(TaskQueue {
            task,
            items,
            cursor: 0,
            passes: 0,
        })
    };
    let mut adam = Adam::from_config(&model.params, tc);
    let clock = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut epoch = 0;

    for (stage, epochs, stage_tasks) in [(1u8, tc.stage1_epochs, tasks.clone()), (2, tc.stage2_epochs, vec![target])] {
        if let Some((_, _, snap)) = &best {
            model.params.restore(snap)?;
        }
        let mut queues = stage_tasks.into_iter().map(queue).collect::<Result<Vec<_>>>()?;
        let mut stale = 0;
        for _ in 0..epochs {
            epoch += 1;
            let losses = run.epoch(model, &mut adam, &mut queues)?;
            let val = validate(model, data, cfg, target, EvalSplit::Val)?;
            let wall_ms = clock.elapsed().as_millis() as u64;
            for (q, &loss) in queues.iter().zip(&losses) {
                let rec = LogRecord {
                    epoch,
                    stage,
                    task: q.task,
                    loss,
                    val_metric: val,
                    wall_ms,
                };
                on_epoch(&rec);
                log.push(rec);
            }
            if best.as_ref().is_none_or(|b| val > b.0) {
                best = Some((val, epoch, model.params.snapshot()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= tc.patience {
                    break;
                }
            }
        }
    }

    let (best_val, best_epoch) = match &best {
        Some((v, e, snap)) => {
            model.params.restore(snap)?;
            (*v, *e)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainOutcome {
        log,
        step_losses: run.step_losses,
        best_val,
        best_epoch,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusTexts;
    use crate::kg::train_transe;

    /// Two communities of 10 documents each; every document names one leaf
    /// entity tied to its community's hubs. Users click only their own
    /// community, so the entity path separates clicks from non-clicks.
    fn toy_texts() -> (String, String, String, String) {
        let mut triples = String::new();
        for c in 0..2 {
            triples.push_str(&format!("H{c}a\tpeer_of\tH{c}b\nH{c}b\tpeer_of\tH{c}a\n"));
            for i in 0..10 {
                triples.push_str(&format!("L{c}_{i}\tmember_of\tH{c}a\nL{c}_{i}\tmember_of\tH{c}b\n"));
            }
        }
        let types = "thing\t0\n".to_string();
        let mut news = String::new();
        for d in 0..20 {
            let (c, i) = (d % 2, d / 2);
            news.push_str(&format!(
                "D{d}\tcat{}\t{}\ttitle{d} word{}\tbody{d} text{}\t[{{\"entity_id\":\"L{c}_{i}\",\"confidence\":1.0,\"in_title\":true,\"count\":1,\"type\":\"thing\"}}]\n",
                d % 3,
                u8::from(c == 0 && i < 4),
                d * 7 % 5,
                d * 3 % 4
            ));
        }
        let mut behaviors = String::new();
        for u in 0..10 {
            let c = u % 2;
            let history: Vec<String> = (0..5).map(|k| format!("D{}", 2 * ((u + k) % 10) + c)).collect();
            for imp in 0..3 {
                let cands: Vec<String> = (0..4)
                    .map(|k| {
                        let d = 2 * ((u + imp * 3 + k) % 10) + k % 2;
                        format!("D{d}-{}", u8::from(d % 2 == c))
                    })
                    .collect();
                behaviors.push_str(&format!("I{u}_{imp}\tU{u}\t{imp}\t{}\t{}\n", history.join(" "), cands.join(" ")));
            }
        }
        (triples, types, news, behaviors)
    }

    fn toy_config() -> Config {
        let mut cfg = Config::desk();
        cfg.transe.dim = 8;
        cfg.model.hidden = 8;
        cfg.model.u2i_hidden = 8;
        cfg.model.i2i_dim = 8;
        cfg.data.n_dv = 8;
        cfg.data.val_fraction = 0.15;
        cfg.train.lr = 0.01;
        cfg.train.batch = 4;
        cfg.train.stage1_epochs = 50;
        cfg.train.stage2_epochs = 0;
        cfg.train.patience = 50;
        cfg.resolve().unwrap()
    }

    fn toy(cfg: &Config) -> (Dataset, EmbeddingTables) {
        let (triples, types, news, behaviors) = toy_texts();
        let texts = CorpusTexts {
            triples: &triples,
            entity_types: &types,
            news: &news,
            behaviors: &behaviors,
            doc_vectors: None,
        };
        let data = Dataset::from_texts(&texts, &cfg.data, cfg.model.popularity_classes, cfg.seed).unwrap();
        let tables = train_transe(&data.graph, &cfg.transe).unwrap();
        (data, tables)
    }

    fn run(cfg: &Config) -> (KredModel, Dataset, TrainOutcome) {
        let (data, tables) = toy(cfg);
        let mut model = build_model(cfg, &data, &tables).unwrap();
        let out = train_multitask(&mut model, &data, cfg, |_| {}).unwrap();
        (model, data, out)
    }

    #[test]
    fn toy_fixture_is_well_formed() {
        let cfg = toy_config();
        let (data, _) = toy(&cfg);
        assert_eq!((data.docs.len(), data.impressions.len()), (20, 30));
        assert!(data.docs.iter().all(|d| d.mentions.len() == 1));
        assert!(!data.split.train.is_empty() && !data.split.val.is_empty());
        for imp in &data.impressions {
            assert_eq!(imp.positives().count(), 2);
        }
    }

    #[test]
    fn separable_user_item_data_is_learned() {
        let cfg = toy_config();
        let (model, data, out) = run(&cfg);
        assert!(out.log.len() <= 50);
        let auc = validate(&model, &data, &cfg, Task::User2Item, EvalSplit::Train).unwrap();
        assert!(auc > 0.95, "training auc {auc}");
    }

    #[test]
    fn fixed_seed_reproduces_losses_and_metrics() {
        let mut cfg = toy_config();
        cfg.train.stage1_epochs = 3;
        let (m1, data, a) = run(&cfg);
        let (m2, _, b) = run(&cfg);
        assert!(a.step_losses.len() >= 10);
        let bits = |o: &TrainOutcome| o.step_losses[..10].iter().map(|l| l.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let tasks = [Task::User2Item, Task::Category];
        let ra = super::super::evaluate(&m1, &data, &cfg, &tasks, EvalSplit::Train).unwrap();
        let rb = super::super::evaluate(&m2, &data, &cfg, &tasks, EvalSplit::Train).unwrap();
        assert_eq!(ra.to_tsv(), rb.to_tsv());

        cfg.seed = 1;
        let cfg = cfg.resolve().unwrap();
        let (_, _, c) = run(&cfg);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn single_task_is_plain_training() {
        let mut cfg = toy_config();
        cfg.train.stage1_epochs = 2;
        cfg.train.stage2_epochs = 1;
        let (data, _) = toy(&cfg);
        let (_, _, a) = run(&cfg);
        let n = instances(&data, Task::User2Item).len();
        let per_epoch = n.div_ceil(cfg.train.batch);
        assert_eq!(a.step_losses.len(), 3 * per_epoch);
        assert!(a.log.iter().all(|r| r.task == Task::User2Item));
        assert_eq!(a.log.iter().map(|r| r.stage).collect::<Vec<_>>(), [1, 1, 2]);

        cfg.train.tasks = vec![Task::User2Item, Task::User2Item];
        let (_, _, b) = run(&cfg);
        assert_eq!(a.step_losses, b.step_losses);
    }

    #[test]
    fn tasks_alternate_and_every_task_completes_a_pass() {
        let mut cfg = toy_config();
        cfg.train.tasks = vec![Task::User2Item, Task::Category];
        cfg.train.alternation_period = 2;
        let (data, tables) = toy(&cfg);
        let mut model = build_model(&cfg, &data, &tables).unwrap();
        let mut adam = Adam::from_config(&model.params, &cfg.train);
        let mut queues: Vec<TaskQueue> = cfg
            .train
            .tasks
            .iter()
            .map(|&task| TaskQueue {
                task,
                items: instances(&data, task),
                cursor: 0,
                passes: 0,
            })
            .collect();
        let mut r = Run {
            data: &data,
            cfg: &cfg,
            pools: Pools::new(&data),
            rng: ChaCha8Rng::seed_from_u64(3),
            step_losses: Vec::new(),
        };
        let losses = r.epoch(&mut model, &mut adam, &mut queues).unwrap();
        assert_eq!(losses.len(), 2);
        assert!(queues.iter().all(|q| q.passes >= 1));
        let batches: Vec<usize> = queues.iter().map(|q| q.items.len().div_ceil(cfg.train.batch)).collect();
        let longest = *batches.iter().max().unwrap();
        assert!(queues.iter().zip(&batches).any(|(q, &b)| b == longest && q.passes == 1 && q.cursor == 0));
        assert!(r.step_losses.len() >= batches.iter().sum::<usize>());
    }

    #[test]
    fn early_stopping_returns_the_best_checkpoint() {
        let mut cfg = toy_config();
        cfg.train.stage1_epochs = 12;
        cfg.train.stage2_epochs = 6;
        cfg.train.patience = 2;
        let (model, data, out) = run(&cfg);
        let best_logged = out.log.iter().map(|r| r.val_metric).fold(f64::MIN, f64::max);
        assert_eq!(out.best_val, best_logged);
        let at_best = out.log.iter().find(|r| r.epoch == out.best_epoch).unwrap();
        assert_eq!(at_best.val_metric, out.best_val);
        let now = validate(&model, &data, &cfg, Task::User2Item, EvalSplit::Val).unwrap();
        assert_eq!(now, out.best_val);
    }

    #[test]
    fn doubling_lambda_doubles_the_penalty() {
        let base = toy_config();
        let (data, tables) = toy(&base);
        let model = build_model(&base, &data, &tables).unwrap();
        let batch = &instances(&data, Task::User2Item)[..4];
        let loss = |lambda: f64| {
            let mut cfg = base.clone();
            cfg.train.l2_lambda = lambda;
            let mut r = Run {
                data: &data,
                cfg: &cfg,
                pools: Pools::new(&data),
                rng: ChaCha8Rng::seed_from_u64(9),
                step_losses: Vec::new(),
            };
            let mut tape = Tape::new(&model.params);
            let mut enc = Encoder::new(&model.arch);
            let l = r.batch_loss(&mut tape, &mut enc, Task::User2Item, batch).unwrap();
            tape.scalar(l)
        };
        let (l0, l1, l2) = (loss(0.0), loss(1e-3), loss(2e-3));
        assert!(l1 > l0);
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let cfg = toy_config();
        let (data, tables) = toy(&cfg);
        let mut model = build_model(&cfg, &data, &tables).unwrap();
        let id = model.params.trainable_ids()[0];
        model.params.value_mut(id).data_mut()[0] = f64::NAN;
        let err = train_multitask(&mut model, &data, &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, KredError::Numeric(_)), "{err}");
    }

    #[test]
    fn missing_task_data_is_reported() {
        let mut cfg = toy_config();
        cfg.train.tasks = vec![Task::Item2Item];
        cfg.data.i2i_threshold = 1000;
        let (data, tables) = toy(&cfg);
        let mut model = build_model(&cfg, &data, &tables).unwrap();
        let r = train_multitask(&mut model, &data, &cfg, |_| {});
        assert!(matches!(r, Err(KredError::Data(_))));
    }
}
