//! Attentive pooling of a document's entities guided by its base vector, and
//! the knowledge-aware document vector built from the pooled result.

use rand::Rng;

use crate::error::{KredError, Result};
use crate::numerics::{glorot, glorot_vector, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct DistillParams {
    /// `hidden × (d + n_dv)`
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
    /// `n_dv × (d + n_dv)`
    pub w3: ParamId,
    pub b3: ParamId,
}

impl DistillParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, n_dv: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: store.add("distill.w1", glorot(rng, hidden, dim + n_dv), true)?,
            w2: store.add("distill.w2", glorot_vector(rng, hidden), true)?,
            b1: store.add("distill.b1", Tensor::zeros(&[hidden]), true)?,
            b2: store.add("distill.b2", Tensor::scalar(0.0), true)?,
            w3: store.add("distill.w3", glorot(rng, n_dv, dim + n_dv), true)?,
            b3: store.add("distill.b3", Tensor::zeros(&[n_dv]), true)?,
        })
    }

    /// Entity dimension expected on the left of the `e ⊕ v_d` input.
    pub fn entity_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w3).cols() - store.value(self.w3).rows()
    }
}

/// Knowledge-aware document vector; every element lies in (−1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Kdv(pub Vec<f64>);

impl Kdv {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub struct Distilled {
    pub weights: Var,
    pub pooled: Var,
}

/// Softmax attention over `entities` with `v_d` as the query.
pub fn distill_attention(tape: &mut Tape<'_>, p: &DistillParams, entities: &[Var], v_d: Var) -> Result<Distilled> {
    if entities.is_empty() {
        return Err(KredError::Data("distill attention over an empty entity list".into()));
    }
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let mut logits = Vec::with_capacity(entities.len());
    for &e in entities {
        let x = tape.concat(&[e, v_d])?;
        let h = tape.affine(w1, x, b1)?;
        let h = tape.relu(h);
        let s = tape.dot(w2, h)?;
        logits.push(tape.add(s, b2)?);
    }
    let logits = tape.stack(&logits)?;
    let weights = tape.softmax(logits)?;
    let pooled = tape.weighted_sum(weights, entities)?;
    Ok(Distilled { weights, pooled })
}

/// Unweighted mean of the entity vectors, used when attention is disabled.
pub fn mean_pool(tape: &mut Tape<'_>, entities: &[Var]) -> Result<Var> {
    tape.mean(entities)
}

/// `tanh(W3 (e_O ⊕ v_d) + b3)`.
pub fn knowledge_vector(tape: &mut Tape<'_>, p: &DistillParams, e_o: Var, v_d: Var) -> Result<Var> {
    let x = tape.concat(&[e_o, v_d])?;
    let w3 = tape.param(p.w3);
    let b3 = tape.param(p.b3);
    let y = tape.affine(w3, x, b3)?;
    Ok(tape.tanh(y))
}
