//! Task predictors on top of knowledge-aware document vectors.

use rand::Rng;

use crate::config::Task;
use crate::error::{KredError, Result};
use crate::numerics::{glorot, glorot_vector, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct UserAttention {
    pub w: ParamId,
    pub b: ParamId,
}

/// User2item predictor `g(u ⊕ v)`.
#[derive(Debug, Clone, Copy)]
pub enum UserItemHead {
    Affine { w: ParamId, b: ParamId },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub user_attn: UserAttention,
    pub u2i: UserItemHead,
    pub i2i: Projection,
    pub popularity: Classifier,
    pub category: Classifier,
    pub local: Classifier,
}

pub struct HeadDims {
    pub n_dv: usize,
    pub u2i_hidden: usize,
    pub i2i_dim: usize,
    pub popularity_classes: usize,
    pub category_classes: usize,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, d: &HeadDims) -> Result<Self> {
        let n = d.n_dv;
        let user_attn = UserAttention {
            w: store.add("heads.user_attn.w", glorot_vector(rng, n), true)?,
            b: store.add("heads.user_attn.b", Tensor::scalar(0.0), true)?,
        };
        let u2i = if d.u2i_hidden == 0 {
            UserItemHead::Affine {
                w: store.add("heads.u2i.w", glorot_vector(rng, 2 * n), true)?,
                b: store.add("heads.u2i.b", Tensor::scalar(0.0), true)?,
            }
        } else {
            UserItemHead::Mlp {
                w1: store.add("heads.u2i.w1", glorot(rng, d.u2i_hidden, 2 * n), true)?,
                b1: store.add("heads.u2i.b1", Tensor::zeros(&[d.u2i_hidden]), true)?,
                w2: store.add("heads.u2i.w2", Tensor::zeros(&[d.u2i_hidden]), true)?,
                b2: store.add("heads.u2i.b2", Tensor::scalar(0.0), true)?,
            }
        };
        let i2i = Projection {
            w: store.add("heads.i2i.w", glorot(rng, d.i2i_dim, n), true)?,
            b: store.add("heads.i2i.b", Tensor::zeros(&[d.i2i_dim]), true)?,
        };
        let mut classifier = |store: &mut ParamStore, name: &str, classes: usize| -> Result<Classifier> {
            Ok(Classifier {
                w: store.add(&format!("heads.{name}.w"), glorot(rng, classes, n), true)?,
                b: store.add(&format!("heads.{name}.b"), Tensor::zeros(&[classes]), true)?,
                classes,
            })
        };
        Ok(Self {
            user_attn,
            u2i,
            popularity: classifier(store, "popularity", d.popularity_classes)?,
            category: classifier(store, "category", d.category_classes)?,
            local: classifier(store, "local", 2)?,
            i2i,
        })
    }

    pub fn classifier(&self, task: Task) -> Result<&Classifier> {
        match task {
            Task::Popularity => Ok(&self.popularity),
            Task::Category => Ok(&self.category),
            Task::Local => Ok(&self.local),
            other => Err(KredError::Config(format!("{other} is not a classification task"))),
        }
    }
}

/// Attention-weighted merge of a user's history vectors.
pub fn user_vector(tape: &mut Tape<'_>, p: &UserAttention, history: &[Var]) -> Result<Var> {
    if history.is_empty() {
        return Err(KredError::Data("cannot build a user vector from an empty history".into()));
    }
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let mut logits = Vec::with_capacity(history.len());
    for &k in history {
        let s = tape.dot(w, k)?;
        logits.push(tape.add(s, b)?);
    }
    let logits = tape.stack(&logits)?;
    let weights = tape.softmax(logits)?;
    tape.weighted_sum(weights, history)
}

pub fn score_user_item(tape: &mut Tape<'_>, head: &UserItemHead, u: Var, v: Var) -> Result<Var> {
    let x = tape.concat(&[u, v])?;
    match *head {
        UserItemHead::Affine { w, b } => {
            let (w, b) = (tape.param(w), tape.param(b));
            let s = tape.dot(w, x)?;
            tape.add(s, b)
        }
        UserItemHead::Mlp { w1, b1, w2, b2 } => {
            let (w1, b1) = (tape.param(w1), tape.param(b1));
            let h = tape.affine(w1, x, b1)?;
            let h = tape.relu(h);
            let (w2, b2) = (tape.param(w2), tape.param(b2));
            let s = tape.dot(w2, h)?;
            tape.add(s, b2)
        }
    }
}

pub fn project(tape: &mut Tape<'_>, p: &Projection, v: Var) -> Result<Var> {
    let (w, b) = (tape.param(p.w), tape.param(p.b));
    let y = tape.affine(w, v, b)?;
    Ok(tape.tanh(y))
}

/// Cosine of the projected vectors; 0 when either projection vanishes.
pub fn item_similarity(tape: &mut Tape<'_>, p: &Projection, a: Var, b: Var) -> Result<Var> {
    let pa = project(tape, p, a)?;
    let pb = project(tape, p, b)?;
    tape.cosine(pa, pb)
}

/// Class logits; pass through `Tape::softmax` for probabilities.
pub fn classify(tape: &mut Tape<'_>, c: &Classifier, v: Var) -> Result<Var> {
    let (w, b) = (tape.param(c.w), tape.param(c.b));
    tape.affine(w, v, b)
}
