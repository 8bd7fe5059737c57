//! Position, frequency and category biases added to entity representations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KredError, Result};
use crate::kg::EntityId;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Title,
    Body,
}

impl Position {
    pub fn index(self) -> usize {
        match self {
            Position::Title => 0,
            Position::Body => 1,
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Position::Title => "title",
            Position::Body => "body",
        })
    }
}

impl FromStr for Position {
    type Err = KredError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" | "1" => Ok(Position::Title),
            "body" | "2" => Ok(Position::Body),
            other => Err(KredError::Data(format!("unknown position {other:?}"))),
        }
    }
}

/// One entity occurrence inside a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityMention {
    pub entity: EntityId,
    pub position: Position,
    /// Occurrences within the document, at least 1.
    pub frequency: u32,
    pub category: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ContextTables {
    /// `2 × d`
    pub position: ParamId,
    /// `freq_cap × d`, row `min(f, cap) − 1`
    pub frequency: ParamId,
    /// `n_types × d`
    pub category: ParamId,
}

impl ContextTables {
    /// Registers zero-initialised tables.
    pub fn init(store: &mut ParamStore, dim: usize, freq_cap: usize, n_types: usize) -> Result<Self> {
        if freq_cap == 0 || n_types == 0 {
            return Err(KredError::Config(
                "context tables need a positive frequency cap and at least one entity type".into(),
            ));
        }
        Ok(Self {
            position: store.add("context.position", Tensor::zeros(&[2, dim]), true)?,
            frequency: store.add("context.frequency", Tensor::zeros(&[freq_cap, dim]), true)?,
            category: store.add("context.category", Tensor::zeros(&[n_types, dim]), true)?,
        })
    }

    pub fn freq_cap(&self, store: &ParamStore) -> usize {
        store.value(self.frequency).rows()
    }

    pub fn num_types(&self, store: &ParamStore) -> usize {
        store.value(self.category).rows()
    }
}

/// Frequency table row for a mention count, saturating at the cap.
pub fn frequency_row(frequency: u32, cap: usize) -> usize {
    (frequency.max(1) as usize).min(cap) - 1
}

pub fn contextualize(tape: &mut Tape<'_>, e_n: Var, m: &EntityMention, c: &ContextTables) -> Result<Var> {
    let store = tape.store();
    let types = c.num_types(store);
    if m.category >= types {
        return Err(KredError::Vocabulary {
            kind: "entity type",
            name: m.category.to_string(),
        });
    }
    let cap = c.freq_cap(store);
    let pos = tape.param_row(c.position, m.position.index())?;
    let freq = tape.param_row(c.frequency, frequency_row(m.frequency, cap))?;
    let cat = tape.param_row(c.category, m.category)?;
    let sum = tape.add(e_n, pos)?;
    let sum = tape.add(sum, freq)?;
    tape.add(sum, cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, c: &ContextTables, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in [c.position, c.frequency, c.category] {
            for x in store.value_mut(id).data_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
    }

    fn mention(position: Position, frequency: u32, category: usize) -> EntityMention {
        EntityMention {
            entity: EntityId(0),
            position,
            frequency,
            category,
        }
    }

    fn run(store: &ParamStore, c: &ContextTables, e: &[f64], m: &EntityMention) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let e = tape.constant(Tensor::vector(e.to_vec()));
        let out = contextualize(&mut tape, e, m, c)?;
        Ok(tape.value(out).data().to_vec())
    }

    #[test]
    fn zero_tables_are_identity() {
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 3, 20, 4).unwrap();
        let e = [0.5, -1.0, 2.0];
        assert_eq!(run(&store, &c, &e, &mention(Position::Body, 3, 2)).unwrap(), e);
    }

    #[test]
    fn frequency_saturates_at_the_cap() {
        assert_eq!(frequency_row(1, 20), 0);
        assert_eq!(frequency_row(20, 20), 19);
        assert_eq!(frequency_row(35, 20), 19);
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 3, 20, 4).unwrap();
        randomize(&mut store, &c, 1);
        let e = [0.1, 0.2, 0.3];
        let a = run(&store, &c, &e, &mention(Position::Title, 20, 1)).unwrap();
        let b = run(&store, &c, &e, &mention(Position::Title, 200, 1)).unwrap();
        let d = run(&store, &c, &e, &mention(Position::Title, 35, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, d);
        let lower = run(&store, &c, &e, &mention(Position::Title, 19, 1)).unwrap();
        assert_ne!(a, lower);
    }

    #[test]
    fn picks_the_three_rows() {
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 2, 20, 3).unwrap();
        store.value_mut(c.position).row_mut(0).copy_from_slice(&[1.0, 0.0]);
        store.value_mut(c.frequency).row_mut(0).copy_from_slice(&[0.0, 10.0]);
        store.value_mut(c.category).row_mut(2).copy_from_slice(&[100.0, 100.0]);
        let out = run(&store, &c, &[0.0, 0.0], &mention(Position::Title, 1, 2)).unwrap();
        assert_eq!(out, vec![101.0, 110.0]);
    }

    #[test]
    fn exactly_additive_in_the_entity_vector() {
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 4, 20, 5).unwrap();
        randomize(&mut store, &c, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let e: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let m = mention(
                if rng.gen_bool(0.5) { Position::Title } else { Position::Body },
                rng.gen_range(1..40),
                rng.gen_range(0..5),
            );
            let with = run(&store, &c, &e, &m).unwrap();
            let without = run(&store, &c, &[0.0; 4], &m).unwrap();
            for i in 0..4 {
                assert!((with[i] - without[i] - e[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_category_is_a_vocabulary_error() {
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 2, 20, 3).unwrap();
        let err = run(&store, &c, &[0.0, 0.0], &mention(Position::Body, 1, 3));
        assert!(matches!(err, Err(KredError::Vocabulary { .. })));
    }

    #[test]
    fn table_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let c = ContextTables::init(&mut store, 3, 5, 2).unwrap();
        randomize(&mut store, &c, 4);
        let e = store.add("e", Tensor::vector(vec![0.3, -0.2, 0.9]), true).unwrap();
        let report = grad_check(&mut store, 1e-6, &[], |t| {
            let ev = t.param(e);
            let a = contextualize(t, ev, &mention(Position::Title, 7, 1), &c)?;
            let b = contextualize(t, ev, &mention(Position::Body, 2, 0), &c)?;
            let a = t.tanh(a);
            let s = t.dot(a, b)?;
            let s = t.tanh(s);
            Ok(t.sum_squares(s))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
