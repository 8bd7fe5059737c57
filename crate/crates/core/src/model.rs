//! The assembled network: TransE tables, KGAT, context, distillation and task
//! heads, plus binary checkpoints.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig};
use crate::context_layer::{contextualize, ContextTables, EntityMention};
use crate::data::Document;
use crate::distill_layer::{distill_attention, knowledge_vector, mean_pool, DistillParams, Kdv};
use crate::entity_layer::{entity_repr, KgTables, KgatParams};
use crate::error::{KredError, Result};
use crate::heads::{
    classify, item_similarity, project, score_user_item, user_vector, Classifier, HeadDims, HeadParams, Projection,
    UserAttention, UserItemHead,
};
use crate::kg::{mix, EmbeddingTables, EntityId, KnowledgeGraph, NeighborTable};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"KRED";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameter handles and structural settings; everything except the values.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub kg: KgTables,
    pub kgat: KgatParams,
    pub context: ContextTables,
    pub distill: DistillParams,
    pub heads: HeadParams,
    pub neighbors: NeighborTable,
    pub neighbor_seed: u64,
}

#[derive(Debug, Clone)]
pub struct KredModel {
    pub params: ParamStore,
    pub arch: Architecture,
}

impl KredModel {
    /// Fresh model over pretrained TransE tables.
    pub fn new(
        cfg: &ModelConfig,
        tables: &EmbeddingTables,
        graph: &KnowledgeGraph,
        n_types: usize,
        n_dv: usize,
        seed: u64,
    ) -> Result<Self> {
        if tables.entity.rows() != graph.num_entities() || tables.relation.rows() != graph.num_relations() {
            return Err(KredError::dim(
                "embedding tables vs graph",
                &[tables.entity.rows(), tables.relation.rows()],
                &[graph.num_entities(), graph.num_relations()],
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x30de1));
        let d = tables.dim();
        let mut store = ParamStore::new();
        store.add("kg.entity", tables.entity.clone(), cfg.finetune_entities)?;
        store.add("kg.relation", tables.relation.clone(), false)?;
        KgatParams::init(&mut store, &mut rng, d, cfg.hidden)?;
        ContextTables::init(&mut store, d, cfg.freq_cap as usize, n_types)?;
        DistillParams::init(&mut store, &mut rng, d, n_dv, cfg.hidden)?;
        let dims = HeadDims {
            n_dv,
            u2i_hidden: cfg.u2i_hidden,
            i2i_dim: cfg.i2i_dim,
            popularity_classes: cfg.popularity_classes,
            category_classes: cfg.category_classes,
        };
        HeadParams::init(&mut store, &mut rng, &dims)?;
        Self::from_store(cfg.clone(), store, graph, seed)
    }

    /// Binds handles by parameter name; used both for fresh models and checkpoints.
    pub fn from_store(cfg: ModelConfig, params: ParamStore, graph: &KnowledgeGraph, seed: u64) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| KredError::Checkpoint(format!("missing parameter `{name}`")))
        };
        let u2i = match params.id("heads.u2i.w1") {
            Some(w1) => UserItemHead::Mlp {
                w1,
                b1: id("heads.u2i.b1")?,
                w2: id("heads.u2i.w2")?,
                b2: id("heads.u2i.b2")?,
            },
            None => UserItemHead::Affine {
                w: id("heads.u2i.w")?,
                b: id("heads.u2i.b")?,
            },
        };
        let classifier = |name: &str| -> Result<Classifier> {
            let w = id(&format!("heads.{name}.w"))?;
            Ok(Classifier {
                w,
                b: id(&format!("heads.{name}.b"))?,
                classes: params.value(w).rows(),
            })
        };
        let arch = Architecture {
            kg: KgTables {
                entity: id("kg.entity")?,
                relation: id("kg.relation")?,
            },
            kgat: KgatParams {
                w0: id("kgat.w0")?,
                w1: id("kgat.w1")?,
                w2: id("kgat.w2")?,
                b1: id("kgat.b1")?,
                b2: id("kgat.b2")?,
            },
            context: ContextTables {
                position: id("context.position")?,
                frequency: id("context.frequency")?,
                category: id("context.category")?,
            },
            distill: DistillParams {
                w1: id("distill.w1")?,
                w2: id("distill.w2")?,
                b1: id("distill.b1")?,
                b2: id("distill.b2")?,
                w3: id("distill.w3")?,
                b3: id("distill.b3")?,
            },
            heads: HeadParams {
                user_attn: UserAttention {
                    w: id("heads.user_attn.w")?,
                    b: id("heads.user_attn.b")?,
                },
                u2i,
                i2i: Projection {
                    w: id("heads.i2i.w")?,
                    b: id("heads.i2i.b")?,
                },
                popularity: classifier("popularity")?,
                category: classifier("category")?,
                local: classifier("local")?,
            },
            neighbors: NeighborTable::sample(graph, cfg.max_neighbors, mix(seed, 0x2e16)),
            neighbor_seed: seed,
            cfg,
        };
        if params.value(arch.kg.entity).rows() != graph.num_entities() {
            return Err(KredError::Checkpoint(format!(
                "checkpoint has {} entities, graph has {}",
                params.value(arch.kg.entity).rows(),
                graph.num_entities()
            )));
        }
        Ok(Self { params, arch })
    }

    pub fn n_dv(&self) -> usize {
        self.params.value(self.arch.distill.w3).rows()
    }

    /// Knowledge-aware vectors for every document.
    pub fn kdvs(&self, docs: &[Document]) -> Result<Vec<Kdv>> {
        let mut tape = Tape::new(&self.params);
        let mut enc = Encoder::new(&self.arch);
        docs.iter()
            .map(|d| {
                let v = enc.kdv(&mut tape, None, d)?;
                Ok(Kdv(tape.value(v).data().to_vec()))
            })
            .collect()
    }

    /// Inference-time scorer over precomputed document vectors.
    pub fn scorer<'a>(&'a self, kdvs: &'a [Kdv]) -> Scorer<'a> {
        Scorer { model: self, kdvs }
    }

    /// Writes `path` (binary parameters) and `path` with a `.toml` extension
    /// (the resolved configuration).
    pub fn save(&self, path: &Path, config: &Config) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.arch.neighbor_seed.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            let value = self.params.value(id);
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(u8::from(self.params.is_trainable(id)));
            buf.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &d in value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| KredError::io(path, e))?;
        f.write_all(&buf).map_err(|e| KredError::io(path, e))?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, config.to_toml()).map_err(|e| KredError::io(&sidecar, e))?;
        Ok(())
    }

    /// Reads a checkpoint and its configuration sidecar.
    pub fn load(path: &Path, graph: &KnowledgeGraph) -> Result<(Self, Config)> {
        let sidecar = sidecar_path(path);
        let config = Config::load(&sidecar, &[])?;
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| KredError::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(KredError::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(KredError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| KredError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.add(&name, Tensor::new(shape, data)?, trainable)?;
        }
        if r.pos != bytes.len() {
            return Err(KredError::Checkpoint("trailing bytes after parameters".into()));
        }
        let model = Self::from_store(config.model.clone(), store, graph, seed)?;
        Ok((model, config))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| KredError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Builds model outputs on a tape, sharing entity and document nodes across
/// one forward pass.
pub struct Encoder<'a> {
    arch: &'a Architecture,
    entities: HashMap<EntityId, Var>,
    docs: HashMap<usize, Var>,
}

impl<'a> Encoder<'a> {
    pub fn new(arch: &'a Architecture) -> Self {
        Self {
            arch,
            entities: HashMap::new(),
            docs: HashMap::new(),
        }
    }

    pub fn arch(&self) -> &'a Architecture {
        self.arch
    }

    /// Entity representation before context: KGAT output, or the raw TransE
    /// row when the KGAT layer is disabled.
    pub fn entity(&mut self, tape: &mut Tape<'_>, e: EntityId) -> Result<Var> {
        if let Some(&v) = self.entities.get(&e) {
            return Ok(v);
        }
        let a = self.arch;
        let v = if a.cfg.use_kgat {
            entity_repr(tape, &a.kgat, &a.kg, e, a.neighbors.get(e))?.vector
        } else {
            tape.param_row(a.kg.entity, e.0)?
        };
        self.entities.insert(e, v);
        Ok(v)
    }

    /// Knowledge-aware document vector. `key` enables caching within the
    /// current tape (pass the document index).
    pub fn kdv(&mut self, tape: &mut Tape<'_>, key: Option<usize>, doc: &Document) -> Result<Var> {
        if let Some(v) = key.and_then(|k| self.docs.get(&k)) {
            return Ok(*v);
        }
        let v = self.compute_kdv(tape, doc)?;
        if let Some(k) = key {
            self.docs.insert(k, v);
        }
        Ok(v)
    }

    fn compute_kdv(&mut self, tape: &mut Tape<'_>, doc: &Document) -> Result<Var> {
        let a = self.arch;
        let v_d = tape.constant(Tensor::vector(doc.base_dv.clone()));
        if a.cfg.dv_only {
            return Ok(v_d);
        }
        let store = tape.store();
        let w3 = store.value(a.distill.w3);
        if doc.base_dv.len() != w3.rows() {
            return Err(KredError::dim("base document vector", &[doc.base_dv.len()], &[w3.rows()]));
        }
        let dim = w3.cols() - w3.rows();

        let e_o = if !a.cfg.use_entities || doc.mentions.is_empty() {
            tape.constant(Tensor::zeros(&[dim]))
        } else {
            let mut mentions: Vec<EntityMention> = doc.mentions.clone();
            mentions.sort_unstable();
            let mut reps = Vec::with_capacity(mentions.len());
            for m in &mentions {
                let e_n = self.entity(tape, m.entity)?;
                reps.push(if a.cfg.use_context {
                    contextualize(tape, e_n, m, &a.context)?
                } else {
                    e_n
                });
            }
            if a.cfg.distill_attention {
                distill_attention(tape, &a.distill, &reps, v_d)?.pooled
            } else {
                mean_pool(tape, &reps)?
            }
        };
        knowledge_vector(tape, &a.distill, e_o, v_d)
    }

    /// User vector from the most recent `history_cap` clicks.
    pub fn user(&mut self, tape: &mut Tape<'_>, docs: &[Document], history: &[usize]) -> Result<Var> {
        let start = history.len().saturating_sub(self.arch.cfg.history_cap);
        let mut kdvs = Vec::with_capacity(history.len() - start);
        for &d in &history[start..] {
            kdvs.push(self.kdv(tape, Some(d), &docs[d])?);
        }
        user_vector(tape, &self.arch.heads.user_attn, &kdvs)
    }

    pub fn score(&self, tape: &mut Tape<'_>, user: Var, item: Var) -> Result<Var> {
        score_user_item(tape, &self.arch.heads.u2i, user, item)
    }

    pub fn similarity(&self, tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
        item_similarity(tape, &self.arch.heads.i2i, a, b)
    }

    pub fn logits(&self, tape: &mut Tape<'_>, task: crate::config::Task, v: Var) -> Result<Var> {
        classify(tape, self.arch.heads.classifier(task)?, v)
    }
}

/// Scores from frozen parameters and precomputed document vectors.
pub struct Scorer<'a> {
    model: &'a KredModel,
    kdvs: &'a [Kdv],
}

impl Scorer<'_> {
    fn constant(&self, tape: &mut Tape<'_>, d: usize) -> Var {
        tape.constant(Tensor::vector(self.kdvs[d].0.clone()))
    }

    pub fn user_vector(&self, history: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.model.params);
        let start = history.len().saturating_sub(self.model.arch.cfg.history_cap);
        let hist: Vec<Var> = history[start..].iter().map(|&d| self.constant(&mut tape, d)).collect();
        let u = user_vector(&mut tape, &self.model.arch.heads.user_attn, &hist)?;
        Ok(tape.value(u).data().to_vec())
    }

    /// Scores of `candidates` for one user vector.
    pub fn user_item(&self, user: &[f64], candidates: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.model.params);
        let u = tape.constant(Tensor::vector(user.to_vec()));
        candidates
            .iter()
            .map(|&d| {
                let v = self.constant(&mut tape, d);
                let s = score_user_item(&mut tape, &self.model.arch.heads.u2i, u, v)?;
                Ok(tape.scalar(s))
            })
            .collect()
    }

    /// Tanh projections used by the item2item head.
    pub fn projections(&self) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.model.params);
        (0..self.kdvs.len())
            .map(|d| {
                let v = self.constant(&mut tape, d);
                let p = project(&mut tape, &self.model.arch.heads.i2i, v)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect()
    }

    pub fn class_probs(&self, task: crate::config::Task, d: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.model.params);
        let v = self.constant(&mut tape, d);
        let l = classify(&mut tape, self.model.arch.heads.classifier(task)?, v)?;
        let p = tape.softmax(l)?;
        Ok(tape.value(p).data().to_vec())
    }
}

/// Cosine with the zero-vector guard of the item2item head.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;
    use crate::context_layer::Position;
    use rand::Rng;

    fn graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (h, r, t) in [("a", "r", "b"), ("a", "s", "c"), ("b", "r", "c"), ("c", "s", "d"), ("d", "r", "a")] {
            g.add_triple(h, r, t);
        }
        g.add_entity("lonely");
        g
    }

    fn tables(g: &KnowledgeGraph, dim: usize, seed: u64) -> EmbeddingTables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |n: usize| Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        EmbeddingTables {
            entity: t(g.num_entities()),
            relation: t(g.num_relations()),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: 6,
            u2i_hidden: 5,
            i2i_dim: 4,
            popularity_classes: 4,
            category_classes: 3,
            ..ModelConfig::default()
        }
    }

    fn model(cfg: &ModelConfig, seed: u64) -> (KredModel, KnowledgeGraph) {
        let g = graph();
        let m = KredModel::new(cfg, &tables(&g, 4, seed), &g, 3, 5, seed).unwrap();
        (m, g)
    }

    fn mention(e: usize, position: Position, frequency: u32, category: usize) -> EntityMention {
        EntityMention {
            entity: EntityId(e),
            position,
            frequency,
            category,
        }
    }

    fn doc(id: &str, body: &str, mentions: Vec<EntityMention>) -> Document {
        let n = mentions.len();
        Document {
            id: id.into(),
            category: "c".into(),
            category_id: 0,
            local: false,
            title: "t".into(),
            body: body.into(),
            base_dv: crate::data::hash_dv(&format!("{id} {body}"), 5),
            mentions,
            confidence: vec![1.0; n],
            click_count: 0,
        }
    }

    fn sample_docs() -> Vec<Document> {
        vec![
            doc("d0", "alpha beta", vec![mention(0, Position::Title, 2, 1), mention(2, Position::Body, 1, 0)]),
            doc("d1", "gamma", vec![mention(1, Position::Body, 3, 2)]),
            doc("d2", "delta", vec![]),
            doc("d3", "eps", vec![mention(4, Position::Title, 1, 0), mention(3, Position::Body, 25, 1)]),
        ]
    }

    fn randomize(m: &mut KredModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in m.params.ids().collect::<Vec<_>>() {
            let name = m.params.name(id);
            if name.starts_with("context.") || name == "heads.u2i.w2" {
                for x in m.params.value_mut(id).data_mut() {
                    *x = rng.gen_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn permuting_mentions_leaves_the_document_vector_unchanged() {
        let (mut m, _) = model(&small_config(), 1);
        randomize(&mut m, 1);
        let mut d = doc("x", "words", vec![
            mention(0, Position::Title, 2, 1),
            mention(3, Position::Body, 1, 2),
            mention(2, Position::Body, 4, 0),
        ]);
        let a = m.kdvs(std::slice::from_ref(&d)).unwrap();
        d.mentions.reverse();
        let b = m.kdvs(std::slice::from_ref(&d)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn document_without_entities_uses_the_zero_pooled_vector() {
        let (m, _) = model(&small_config(), 2);
        let d = doc("x", "words", vec![]);
        let got = m.kdvs(std::slice::from_ref(&d)).unwrap().remove(0);
        let w3 = m.params.value(m.arch.distill.w3);
        let b3 = m.params.value(m.arch.distill.b3);
        let dim = w3.cols() - w3.rows();
        for (i, g) in got.0.iter().enumerate() {
            let z: f64 = (0..5).map(|j| w3.row(i)[dim + j] * d.base_dv[j]).sum::<f64>() + b3.data()[i];
            assert!((g - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn dv_only_returns_the_base_vector() {
        let cfg = ModelConfig {
            dv_only: true,
            ..small_config()
        };
        let (m, _) = model(&cfg, 3);
        let docs = sample_docs();
        for (d, k) in docs.iter().zip(m.kdvs(&docs).unwrap()) {
            assert_eq!(k.0, d.base_dv);
        }
    }

    #[test]
    fn ablations_change_the_output() {
        let docs = sample_docs();
        let (mut base, _) = model(&small_config(), 4);
        randomize(&mut base, 4);
        let full = base.kdvs(&docs).unwrap();
        for flip in 0..4 {
            let mut m = base.clone();
            match flip {
                0 => m.arch.cfg.use_kgat = false,
                1 => m.arch.cfg.use_context = false,
                2 => m.arch.cfg.distill_attention = false,
                _ => m.arch.cfg.use_entities = false,
            }
            let k = m.kdvs(&docs).unwrap();
            assert_ne!(k[0], full[0], "flag {flip}");
            // no mentions: identical regardless of flags
            assert_eq!(k[2], full[2]);
        }
    }

    #[test]
    fn tape_size_does_not_depend_on_body_length() {
        let (m, _) = model(&small_config(), 5);
        let ops = |body: &str| {
            let d = doc("x", body, vec![mention(0, Position::Title, 2, 1), mention(1, Position::Body, 1, 0)]);
            let mut tape = Tape::new(&m.params);
            let mut enc = Encoder::new(&m.arch);
            enc.kdv(&mut tape, None, &d).unwrap();
            (tape.op_count(), tape.flops())
        };
        let short = ops("one");
        let long = ops(&"word ".repeat(5000));
        assert_eq!(short, long);
    }

    #[test]
    fn encoder_caches_shared_documents() {
        let (m, _) = model(&small_config(), 6);
        let docs = sample_docs();
        let mut tape = Tape::new(&m.params);
        let mut enc = Encoder::new(&m.arch);
        let a = enc.kdv(&mut tape, Some(0), &docs[0]).unwrap();
        let before = tape.op_count();
        let b = enc.kdv(&mut tape, Some(0), &docs[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.op_count(), before);
    }

    #[test]
    fn scorer_matches_the_training_graph() {
        let (mut m, _) = model(&small_config(), 7);
        randomize(&mut m, 7);
        let docs = sample_docs();
        let kdvs = m.kdvs(&docs).unwrap();
        let scorer = m.scorer(&kdvs);
        let u = scorer.user_vector(&[0, 1, 2]).unwrap();
        let fast = scorer.user_item(&u, &[3, 1]).unwrap();

        let mut tape = Tape::new(&m.params);
        let mut enc = Encoder::new(&m.arch);
        let user = enc.user(&mut tape, &docs, &[0, 1, 2]).unwrap();
        for (&d, f) in [3usize, 1].iter().zip(&fast) {
            let v = enc.kdv(&mut tape, Some(d), &docs[d]).unwrap();
            let s = enc.score(&mut tape, user, v).unwrap();
            assert!((tape.scalar(s) - f).abs() < 1e-12);
        }
        let probs = scorer.class_probs(Task::Category, 0).unwrap();
        assert_eq!(probs.len(), 3);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn history_is_truncated_to_the_most_recent_clicks() {
        let cfg = ModelConfig {
            history_cap: 2,
            ..small_config()
        };
        let (m, _) = model(&cfg, 8);
        let kdvs = m.kdvs(&sample_docs()).unwrap();
        let s = m.scorer(&kdvs);
        assert_eq!(s.user_vector(&[0, 3, 1, 2]).unwrap(), s.user_vector(&[1, 2]).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut config = Config::desk();
        config.model = small_config();
        let (mut m, g) = model(&config.model, 9);
        randomize(&mut m, 9);
        m.save(&path, &config).unwrap();
        assert!(sidecar_path(&path).exists());
        let (back, cfg_back) = KredModel::load(&path, &g).unwrap();
        assert_eq!(cfg_back.model, config.model);
        for (a, b) in m.params.named_values().zip(back.params.named_values()) {
            assert_eq!(a.0, b.0);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.1), bits(b.1));
        }
        let docs = sample_docs();
        assert_eq!(m.kdvs(&docs).unwrap(), back.kdvs(&docs).unwrap());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut config = Config::desk();
        config.model = small_config();
        let (m, g) = model(&config.model, 10);
        m.save(&path, &config).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(KredModel::load(&path, &g), Err(KredError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(KredModel::load(&path, &g), Err(KredError::Checkpoint(_))));
    }

    #[test]
    fn affine_head_is_selected_by_zero_hidden_width() {
        let cfg = ModelConfig {
            u2i_hidden: 0,
            ..small_config()
        };
        let (m, _) = model(&cfg, 11);
        assert!(matches!(m.arch.heads.u2i, UserItemHead::Affine { .. }));
        let (m, _) = model(&small_config(), 11);
        assert!(matches!(m.arch.heads.u2i, UserItemHead::Mlp { .. }));
    }
}
