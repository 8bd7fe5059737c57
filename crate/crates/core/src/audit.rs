//! Full-model gradient audit on a toy graph: every layer, every head and
//! every loss is checked against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Task};
use crate::context_layer::{EntityMention, Position};
use crate::data::{hash_dv, Document};
use crate::error::Result;
use crate::kg::{mix, EmbeddingTables, EntityId, KnowledgeGraph};
use crate::model::{Encoder, KredModel};
use crate::numerics::{grad_check, GradCheckReport, Tensor};

/// Largest relative error the audit accepts.
pub const TOLERANCE: f64 = 1e-4;

const N_DV: usize = 5;
const N_TYPES: usize = 3;
const DIM: usize = 4;

fn graph() -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for (h, r, t) in [("a", "r", "b"), ("a", "s", "c"), ("b", "r", "c"), ("c", "s", "d"), ("d", "r", "a"), ("e", "s", "b")] {
        g.add_triple(h, r, t);
    }
    g
}

fn doc(id: &str, mentions: &[(usize, Position, u32, usize)]) -> Document {
    Document {
        id: id.into(),
        category: "c".into(),
        category_id: 0,
        local: false,
        title: format!("{id} title"),
        body: format!("{id} body text"),
        base_dv: hash_dv(&format!("{id} title {id} body text"), N_DV),
        mentions: mentions
            .iter()
            .map(|&(e, position, frequency, category)| EntityMention {
                entity: EntityId(e),
                position,
                frequency,
                category,
            })
            .collect(),
        confidence: vec![1.0; mentions.len()],
        click_count: 0,
    }
}

/// Small model with every parameter non-zero, plus five documents (one
/// without entities).
pub fn toy_model(seed: u64) -> Result<(KredModel, Vec<Document>)> {
    let g = graph();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xa0d17));
    let mut table = |n: usize| Tensor::matrix(n, DIM, (0..n * DIM).map(|_| rng.gen_range(-0.5..0.5)).collect());
    let tables = EmbeddingTables {
        entity: table(g.num_entities())?,
        relation: table(g.num_relations())?,
    };
    let cfg = ModelConfig {
        hidden: 6,
        u2i_hidden: 5,
        i2i_dim: 4,
        popularity_classes: 4,
        category_classes: 3,
        finetune_entities: true,
        ..ModelConfig::default()
    };
    let mut model = KredModel::new(&cfg, &tables, &g, N_TYPES, N_DV, seed)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let values = model.params.value_mut(id).data_mut();
        if values.iter().all(|&v| v == 0.0) {
            values.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let docs = vec![
        doc("d0", &[(0, Position::Title, 2, 1), (2, Position::Body, 1, 0)]),
        doc("d1", &[(1, Position::Body, 3, 2)]),
        doc("d2", &[]),
        doc("d3", &[(4, Position::Title, 1, 0), (3, Position::Body, 25, 1)]),
        doc("d4", &[(4, Position::Body, 2, 2), (0, Position::Body, 1, 1), (1, Position::Title, 1, 0)]),
    ];
    Ok((model, docs))
}

/// Gradient check of the summed user-item, item-item and classification
/// losses of the toy model.
pub fn gradient_audit(seed: u64) -> Result<GradCheckReport> {
    let (mut model, docs) = toy_model(seed)?;
    let arch = &model.arch;
    grad_check(&mut model.params, 1e-6, &[], |tape| {
        let mut enc = Encoder::new(arch);
        let kdvs = docs
            .iter()
            .enumerate()
            .map(|(i, d)| enc.kdv(tape, Some(i), d))
            .collect::<Result<Vec<_>>>()?;
        let user = enc.user(tape, &docs, &[0, 1, 2])?;
        let mut scores = Vec::new();
        for &d in &[3, 4, 2] {
            scores.push(enc.score(tape, user, kdvs[d])?);
        }
        let scores = tape.stack(&scores)?;
        let u2i = tape.nll_softmax(scores, 0, 1.0)?;
        let mut sims = Vec::new();
        for &d in &[4, 1, 2] {
            sims.push(enc.similarity(tape, kdvs[0], kdvs[d])?);
        }
        let sims = tape.stack(&sims)?;
        let i2i = tape.nll_softmax(sims, 0, 1.0)?;
        let mut parts = vec![u2i, i2i];
        for (task, doc, label) in [(Task::Popularity, 1, 2), (Task::Category, 3, 1), (Task::Local, 4, 1)] {
            let logits = enc.logits(tape, task, kdvs[doc])?;
            parts.push(tape.nll_softmax(logits, label, 1.0)?);
        }
        let total = tape.sum(&parts)?;
        // Some weights have exactly zero gradient (softmax shift
        // invariance); a small loss keeps their roundoff under 1e-8.
        Ok(tape.scale(total, 1e-4))
    })
}
