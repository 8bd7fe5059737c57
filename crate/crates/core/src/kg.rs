//! Knowledge-graph storage and TransE embedding training.
//!
//! Entities and relations are interned into dense ids in first-seen order, so a
//! triples file always maps to the same ids. TransE learns `e_h + e_r ≈ e_t`
//! for true triples with a margin ranking criterion against corrupted triples;
//! the resulting tables are frozen features for the entity layer.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KredError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// String ↔ dense id interning table.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    head_index: Vec<Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str) -> EntityId {
        let id = self.entities.intern(name);
        if self.head_index.len() <= id {
            self.head_index.resize_with(id + 1, Vec::new);
        }
        EntityId(id)
    }

    pub fn add_relation(&mut self, name: &str) -> RelationId {
        RelationId(self.relations.intern(name))
    }

    /// Adds `(h, r, t)`; returns false when the triple was already present.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.add_entity(head);
        let r = self.add_relation(relation);
        let t = self.add_entity(tail);
        self.insert(Triple {
            head: h,
            relation: r,
            tail: t,
        })
    }

    pub fn insert(&mut self, triple: Triple) -> bool {
        assert!(triple.head.0 < self.entities.len() && triple.tail.0 < self.entities.len());
        assert!(triple.relation.0 < self.relations.len());
        if !self.seen.insert(triple) {
            return false;
        }
        self.triples.push(triple);
        self.head_index[triple.head.0].push((triple.relation, triple.tail));
        true
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.seen.contains(triple)
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    /// All `(r, t)` with `h` as head, in insertion order.
    pub fn out_edges(&self, h: EntityId) -> &[(RelationId, EntityId)] {
        self.head_index.get(h.0).map_or(&[], Vec::as_slice)
    }

    /// Reads `head<TAB>relation<TAB>tail` lines.
    pub fn from_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KredError::io(path, e))?;
        Self::parse_tsv(&text, path)
    }

    /// Parses triples text; `path` is only used in error messages.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut g = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
                return Err(KredError::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: format!("expected head<TAB>relation<TAB>tail, got {} columns", cols.len()),
                });
            }
            g.add_triple(cols[0], cols[1], cols[2]);
        }
        Ok(g)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entities.name(t.head.0),
                self.relations.name(t.relation.0),
                self.entities.name(t.tail.0)
            );
        }
        out
    }
}

/// Up to `max_n` out-edges of `h`. Neighborhoods larger than `max_n` are
/// subsampled uniformly without replacement, reproducibly under `seed`.
/// Unknown entities have no neighbors.
pub fn neighbors(g: &KnowledgeGraph, h: EntityId, max_n: usize, seed: u64) -> Vec<(RelationId, EntityId)> {
    let all = g.out_edges(h);
    if all.len() <= max_n {
        return all.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, h.0 as u64));
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), max_n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Per-entity neighbor lists for one epoch.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    lists: Vec<Vec<(RelationId, EntityId)>>,
}

impl NeighborTable {
    pub fn sample(g: &KnowledgeGraph, max_n: usize, seed: u64) -> Self {
        let lists = (0..g.num_entities())
            .map(|h| neighbors(g, EntityId(h), max_n, seed))
            .collect();
        Self { lists }
    }

    pub fn get(&self, h: EntityId) -> &[(RelationId, EntityId)] {
        self.lists.get(h.0).map_or(&[], Vec::as_slice)
    }
}

pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransEConfig {
    pub dim: usize,
    pub margin: f64,
    pub norm: Norm,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self {
            dim: 90,
            margin: 1.0,
            norm: Norm::L2,
            lr: 0.01,
            epochs: 100,
            batch: 128,
            seed: 0,
        }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(KredError::Config("transe.dim must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(KredError::Config("transe.margin must be positive".into()));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(KredError::Config("transe.lr and transe.batch must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen TransE entity and relation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub entity: Tensor,
    pub relation: Tensor,
}

impl EmbeddingTables {
    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn dissimilarity(&self, t: &Triple, norm: Norm) -> f64 {
        dissimilarity(
            self.entity.row(t.head.0),
            self.relation.row(t.relation.0),
            self.entity.row(t.tail.0),
            norm,
        )
        .expect("table rows share a width")
    }
}

/// ‖h + r − t‖ under `norm`.
pub fn dissimilarity(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> Result<f64> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(KredError::dim("dissimilarity", &[h.len(), r.len()], &[t.len()]));
    }
    let diffs = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t);
    Ok(match norm {
        Norm::L1 => diffs.map(f64::abs).sum(),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    })
}

/// Hinge `max(0, f_pos + margin − f_neg)`.
pub fn margin_loss(f_pos: f64, f_neg: f64, margin: f64) -> f64 {
    (f_pos + margin - f_neg).max(0.0)
}

#[derive(Debug, Clone)]
pub struct TransEOutcome {
    pub tables: EmbeddingTables,
    /// Summed hinge loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_transe(g: &KnowledgeGraph, cfg: &TransEConfig) -> Result<EmbeddingTables> {
    Ok(train_transe_with_history(g, cfg)?.tables)
}

pub fn train_transe_with_history(g: &KnowledgeGraph, cfg: &TransEConfig) -> Result<TransEOutcome> {
    cfg.validate()?;
    if g.triples().is_empty() {
        return Err(KredError::Config("cannot train TransE on an empty graph".into()));
    }
    let d = cfg.dim;
    let (ne, nr) = (g.num_entities(), g.num_relations());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 6.0 / (d as f64).sqrt();
    let mut ent: Vec<f64> = (0..ne * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut rel: Vec<f64> = (0..nr * d).map(|_| rng.gen_range(-bound..bound)).collect();
    normalize_rows(&mut rel, d);
    normalize_rows(&mut ent, d);

    let mut order: Vec<usize> = (0..g.triples().len()).collect();
    let mut ent_grad = vec![0.0; ne * d];
    let mut rel_grad = vec![0.0; nr * d];
    let mut touched_e: Vec<usize> = Vec::new();
    let mut touched_r: Vec<usize> = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut diff = vec![0.0; d];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            for &i in chunk {
                let pos = g.triples()[i];
                let neg = corrupt(g, pos, &mut rng);
                let f_pos = row_dissimilarity(&ent, &rel, d, &pos, cfg.norm, &mut diff);
                let f_neg = row_dissimilarity(&ent, &rel, d, &neg, cfg.norm, &mut diff);
                let loss = margin_loss(f_pos, f_neg, cfg.margin);
                total += loss;
                if loss <= 0.0 {
                    continue;
                }
                for (triple, sign) in [(pos, 1.0), (neg, -1.0)] {
                    direction(&ent, &rel, d, &triple, cfg.norm, &mut diff);
                    let (h, r, t) = (triple.head.0, triple.relation.0, triple.tail.0);
                    for k in 0..d {
                        ent_grad[h * d + k] += sign * diff[k];
                        rel_grad[r * d + k] += sign * diff[k];
                        ent_grad[t * d + k] -= sign * diff[k];
                    }
                    touched_e.extend([h, t]);
                    touched_r.push(r);
                }
            }
            apply_sparse(&mut ent, &mut ent_grad, &mut touched_e, d, cfg.lr);
            apply_sparse(&mut rel, &mut rel_grad, &mut touched_r, d, cfg.lr);
        }
        normalize_rows(&mut ent, d);
        if !total.is_finite() {
            return Err(KredError::Numeric("TransE loss diverged".into()));
        }
        epoch_losses.push(total);
    }

    Ok(TransEOutcome {
        tables: EmbeddingTables {
            entity: Tensor::matrix(ne, d, ent)?,
            relation: Tensor::matrix(nr, d, rel)?,
        },
        epoch_losses,
    })
}

/// Replaces head or tail (equal odds) with a random entity, resampling
/// corruptions that collide with a true triple.
fn corrupt(g: &KnowledgeGraph, pos: Triple, rng: &mut impl Rng) -> Triple {
    let ne = g.num_entities();
    let mut cand = pos;
    for _ in 0..100 {
        cand = pos;
        let e = EntityId(rng.gen_range(0..ne));
        if rng.gen_bool(0.5) {
            cand.head = e;
        } else {
            cand.tail = e;
        }
        if !g.contains(&cand) {
            break;
        }
    }
    cand
}

fn row_dissimilarity(ent: &[f64], rel: &[f64], d: usize, t: &Triple, norm: Norm, buf: &mut [f64]) -> f64 {
    let (h, r, tl) = (t.head.0 * d, t.relation.0 * d, t.tail.0 * d);
    for k in 0..d {
        buf[k] = ent[h + k] + rel[r + k] - ent[tl + k];
    }
    match norm {
        Norm::L1 => buf.iter().map(|v| v.abs()).sum(),
        Norm::L2 => buf.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// Gradient of the dissimilarity with respect to `h + r − t`, written to `buf`.
fn direction(ent: &[f64], rel: &[f64], d: usize, t: &Triple, norm: Norm, buf: &mut [f64]) {
    let f = row_dissimilarity(ent, rel, d, t, norm, buf);
    match norm {
        Norm::L1 => buf.iter_mut().for_each(|v| *v = v.signum() * (*v != 0.0) as u8 as f64),
        Norm::L2 => {
            if f > 0.0 {
                buf.iter_mut().for_each(|v| *v /= f);
            } else {
                buf.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

fn apply_sparse(values: &mut [f64], grads: &mut [f64], touched: &mut Vec<usize>, d: usize, lr: f64) {
    touched.sort_unstable();
    touched.dedup();
    for &row in touched.iter() {
        for k in row * d..(row + 1) * d {
            values[k] -= lr * grads[k];
            grads[k] = 0.0;
        }
    }
    touched.clear();
}

fn normalize_rows(data: &mut [f64], d: usize) {
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Fraction of `held_out` triples whose true tail ranks within the top `k`
/// of all entities by dissimilarity. Ties count against the true tail.
pub fn tail_hits_at_k(tables: &EmbeddingTables, held_out: &[Triple], k: usize, norm: Norm) -> f64 {
    if held_out.is_empty() {
        return 0.0;
    }
    let ne = tables.entity.rows();
    let hits = held_out
        .iter()
        .filter(|t| {
            let truth = tables.dissimilarity(t, norm);
            let better = (0..ne)
                .filter(|&e| e != t.tail.0)
                .filter(|&e| {
                    let c = Triple {
                        tail: EntityId(e),
                        ..**t
                    };
                    tables.dissimilarity(&c, norm) <= truth
                })
                .count();
            better < k
        })
        .count();
    hits as f64 / held_out.len() as f64
}

/// Writes `id<TAB>f1 f2 … fd` lines using round-trip float formatting.
pub fn write_embeddings(path: &Path, vocab: &Vocab, table: &Tensor) -> Result<()> {
    let mut out = String::new();
    for (i, name) in vocab.names().iter().enumerate() {
        out.push_str(name);
        out.push('\t');
        for (k, v) in table.row(i).iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| KredError::io(path, e))
}

/// Loads an embedding file into rows ordered by `vocab`. Every vocabulary
/// entry must be present; extra ids are ignored.
pub fn read_embeddings(path: &Path, vocab: &Vocab) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| KredError::io(path, e))?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| KredError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected id<TAB>values".into()))?;
        let values = rest
            .split(' ')
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(format!("bad float `{v}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(parse_err("inconsistent embedding width".into()));
        }
        if let Some(i) = vocab.get(id) {
            rows[i] = Some(values);
        }
    }
    let dim = dim.unwrap_or(0);
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| KredError::Vocabulary {
            kind: "embedding id",
            name: vocab.name(i).to_string(),
        })?;
        data.extend(row);
    }
    Tensor::matrix(vocab.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ring(n: usize) -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for i in 0..n {
            g.add_triple(&format!("e{i}"), "next", &format!("e{}", (i + 1) % n));
        }
        g
    }

    #[test]
    fn dissimilarity_examples() {
        assert_eq!(dissimilarity(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], Norm::L2).unwrap(), 0.0);
        assert_eq!(dissimilarity(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], Norm::L2).unwrap(), 5.0);
        assert_eq!(dissimilarity(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 4.0], Norm::L1).unwrap(), 7.0);
        assert!(dissimilarity(&[0.0], &[0.0, 0.0], &[3.0, 4.0], Norm::L1).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(margin_loss(0.0, 0.5, 1.0), 0.5);
        assert_eq!(margin_loss(0.0, 2.0, 1.0), 0.0);
        assert_eq!(margin_loss(1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn duplicate_triples_are_dropped() {
        let mut g = KnowledgeGraph::new();
        assert!(g.add_triple("a", "r", "b"));
        assert!(!g.add_triple("a", "r", "b"));
        assert_eq!(g.triples().len(), 1);
        assert_eq!(g.out_edges(EntityId(0)).len(), 1);
    }

    #[test]
    fn neighbor_sampling_contract() {
        let mut g = KnowledgeGraph::new();
        for i in 0..3 {
            g.add_triple("small", "r", &format!("s{i}"));
        }
        for i in 0..50 {
            g.add_triple("big", "r", &format!("b{i}"));
        }
        g.add_entity("alone");
        let small = g.entity("small").unwrap();
        let big = g.entity("big").unwrap();
        assert_eq!(neighbors(&g, small, 20, 1).len(), 3);
        let a = neighbors(&g, big, 20, 1);
        let mut distinct = a.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 20);
        assert_eq!(a, neighbors(&g, big, 20, 1));
        assert_ne!(a, neighbors(&g, big, 20, 2));
        assert!(neighbors(&g, g.entity("alone").unwrap(), 20, 1).is_empty());
        assert!(neighbors(&g, EntityId(9999), 20, 1).is_empty());
    }

    #[test]
    fn empty_graph_is_rejected() {
        let err = train_transe(&KnowledgeGraph::new(), &TransEConfig::default());
        assert!(matches!(err, Err(KredError::Config(_))));
    }

    #[test]
    fn entity_rows_are_unit_norm_and_training_is_deterministic() {
        let g = ring(12);
        let cfg = TransEConfig {
            dim: 16,
            epochs: 5,
            seed: 4,
            ..Default::default()
        };
        let a = train_transe(&g, &cfg).unwrap();
        for r in 0..a.entity.rows() {
            let n: f64 = a.entity.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, train_transe(&g, &cfg).unwrap());
    }

    #[test]
    fn loss_decreases_early_on_an_embeddable_chain() {
        let mut g = KnowledgeGraph::new();
        for i in 0..60 {
            g.add_triple(&format!("c{i}"), "next", &format!("c{}", i + 1));
        }
        let mut monotone = 0;
        for seed in 0..5 {
            let cfg = TransEConfig {
                dim: 16,
                epochs: 5,
                lr: 0.2,
                batch: 16,
                seed,
                ..Default::default()
            };
            let losses = train_transe_with_history(&g, &cfg).unwrap().epoch_losses;
            if losses.windows(2).all(|w| w[1] < w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone >= 4, "{monotone} of 5 seeds decreased monotonically");
    }

    #[test]
    fn embedding_file_round_trips_bit_exactly() {
        let g = ring(5);
        let t = train_transe(
            &g,
            &TransEConfig {
                dim: 7,
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ent.tsv");
        write_embeddings(&p, g.entities(), &t.entity).unwrap();
        assert_eq!(read_embeddings(&p, g.entities()).unwrap(), t.entity);
    }

    #[test]
    fn triples_tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kg.tsv");
        let g = ring(4);
        fs::write(&p, g.to_tsv()).unwrap();
        let back = KnowledgeGraph::from_tsv(&p).unwrap();
        assert_eq!(back.triples(), g.triples());
        fs::write(&p, "a\tr\tb\nbroken line\n").unwrap();
        let err = KnowledgeGraph::from_tsv(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }
}

