//! One-hop attentive entity representation.
//!
//! An entity `h` is represented by `ReLU(W0 (e_h ⊕ Σ π(h,r,t) e_t))`, where
//! the neighbor weights π are a softmax over the logits of a two-layer scorer
//! `w2 · ReLU(W1 (e_h ⊕ e_r ⊕ e_t) + b1) + b2`. Only tail embeddings are
//! aggregated; relation embeddings enter through the logits alone.

use rand::Rng;

use crate::error::Result;
use crate::kg::{EntityId, RelationId};
use crate::numerics::{glorot, glorot_vector, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameter handles for the TransE tables stored alongside the model.
#[derive(Debug, Clone, Copy)]
pub struct KgTables {
    pub entity: ParamId,
    pub relation: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct KgatParams {
    /// `d_out × 2d`
    pub w0: ParamId,
    /// `hidden × 3d`
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
}

impl KgatParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w0: store.add("kgat.w0", glorot(rng, dim, 2 * dim), true)?,
            w1: store.add("kgat.w1", glorot(rng, hidden, 3 * dim), true)?,
            w2: store.add("kgat.w2", glorot_vector(rng, hidden), true)?,
            b1: store.add("kgat.b1", Tensor::zeros(&[hidden]), true)?,
            b2: store.add("kgat.b2", Tensor::scalar(0.0), true)?,
        })
    }
}

/// Unnormalised attention logit π₀(h, r, t).
pub fn attention_logit(tape: &mut Tape<'_>, p: &KgatParams, h: Var, r: Var, t: Var) -> Result<Var> {
    let x = tape.concat(&[h, r, t])?;
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let hidden = tape.affine(w1, x, b1)?;
    let hidden = tape.relu(hidden);
    let w2 = tape.param(p.w2);
    let score = tape.dot(w2, hidden)?;
    let b2 = tape.param(p.b2);
    tape.add(score, b2)
}

/// Entity representation plus the neighbor weights that produced it
/// (`None` for an isolated entity).
pub struct EntityRepr {
    pub vector: Var,
    pub weights: Option<Var>,
}

pub fn entity_repr(
    tape: &mut Tape<'_>,
    p: &KgatParams,
    tables: &KgTables,
    h: EntityId,
    neighbors: &[(RelationId, EntityId)],
) -> Result<EntityRepr> {
    let e_h = tape.param_row(tables.entity, h.0)?;
    let dim = tape.value(e_h).len();

    let (aggregate, weights) = if neighbors.is_empty() {
        (tape.constant(Tensor::zeros(&[dim])), None)
    } else {
        let mut logits = Vec::with_capacity(neighbors.len());
        let mut tails = Vec::with_capacity(neighbors.len());
        for &(r, t) in neighbors {
            let e_r = tape.param_row(tables.relation, r.0)?;
            let e_t = tape.param_row(tables.entity, t.0)?;
            logits.push(attention_logit(tape, p, e_h, e_r, e_t)?);
            tails.push(e_t);
        }
        let logits = tape.stack(&logits)?;
        let weights = tape.softmax(logits)?;
        (tape.weighted_sum(weights, &tails)?, Some(weights))
    };

    let joined = tape.concat(&[e_h, aggregate])?;
    let w0 = tape.param(p.w0);
    let projected = tape.matvec(w0, joined)?;
    Ok(EntityRepr {
        vector: tape.relu(projected),
        weights,
    })
}
