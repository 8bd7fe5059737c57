//! Dense float64 tensors, parameter storage and reverse-mode gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{softmax, softmax_in_place, Tensor};

use rand::Rng;

/// Glorot-uniform initialisation for a `rows × cols` matrix.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Glorot-uniform initialisation for a weight vector read as a `1 × n` matrix.
pub fn glorot_vector(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::vector(glorot(rng, 1, n).into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check<F>(store: &mut ParamStore, f: F) -> f64
    where
        F: for<'s> Fn(&mut Tape<'s>) -> Result<Var>,
    {
        grad_check(store, 1e-6, &[], f).unwrap().max_rel_err
    }

    #[test]
    fn square_function() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0]), true).unwrap();
        let report = grad_check(&mut store, 1e-5, &[], |t| {
            let v = t.param(x);
            Ok(t.sum_squares(v))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
        let mut tape = Tape::new(&store);
        let v = tape.param(x);
        let l = tape.sum_squares(v);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::vector(vec![3.0, 1.0]), true).unwrap();
        let report = grad_check(&mut store, 1e-5, &[], |t| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut store = ParamStore::new();
        assert!(grad_check(&mut store, 1e-2, &[], |t| Ok(t.constant(Tensor::scalar(0.0)))).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let err = grad_check(&mut store, 1e-5, &[], |t| Ok(t.constant(Tensor::scalar(f64::NAN))));
        assert!(matches!(err, Err(crate::KredError::Numeric(_))));
    }

    #[test]
    fn concat_gradient_splits() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let b = store.add("b", Tensor::vector(vec![3.0]), true).unwrap();
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.param(a), tape.param(b));
        let c = tape.concat(&[va, vb]).unwrap();
        let ones = tape.constant(Tensor::vector(vec![1.0; 3]));
        let s = tape.dot(c, ones).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0]);
    }

    #[test]
    fn every_op_matches_finite_differences_over_ten_seeds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let w = store.add("w", random(&mut rng, &[4, 5]), true).unwrap();
            let m = store.add("m", random(&mut rng, &[5, 3]), true).unwrap();
            let x = store.add("x", random(&mut rng, &[5]), true).unwrap();
            let b = store.add("b", random(&mut rng, &[4]), true).unwrap();
            let e = store.add("e", random(&mut rng, &[6, 4]), true).unwrap();
            let probe = random(&mut rng, &[4]);
            let probe3 = random(&mut rng, &[4, 3]);

            // matmul, matvec, add, tanh, relu, softmax, weighted sum, cosine, nll
            let err = check(&mut store, |t| {
                let (vw, vm, vx, vb) = (t.param(w), t.param(m), t.param(x), t.param(b));
                let h = t.affine(vw, vx, vb)?;
                let h = t.tanh(h);
                let r0 = t.param_row(e, 0)?;
                let r3 = t.param_row(e, 3)?;
                let r = t.add(r0, r3)?;
                let hr = t.relu(r);
                let s1 = t.dot(h, hr)?;
                let s2 = t.cosine(h, r0)?;
                let s3 = {
                    let p = t.constant(probe.clone());
                    t.dot(p, r3)?
                };
                let stacked = t.stack(&[s1, s2, s3])?;
                let att = t.softmax(stacked)?;
                let pooled = t.weighted_sum(att, &[h, r0, r3])?;
                let mean = t.mean(&[pooled, h])?;
                let sc = t.scale(mean, 0.7);
                let cat = t.concat(&[sc, hr])?;
                let nll = t.nll_softmax(cat, 2, 3.0)?;
                let mm = t.matmul(vw, vm)?;
                let mmt = t.tanh(mm);
                let pr = t.constant(probe3.clone());
                let masked = t.add(mmt, pr)?;
                let cross = t.sum_squares(masked);
                t.sum(&[nll, cross])
            });
            assert!(err < 1e-4, "seed {seed}: {err}");

            // elementwise ops alone meet the tighter bound
            let err = check(&mut store, |t| {
                let vx = t.param(x);
                let a = t.tanh(vx);
                let s = t.scale(a, 1.5);
                let q = t.sum_squares(s);
                let vb = t.param(b);
                let bb = t.add(vb, vb)?;
                let r = t.sum_squares(bb);
                t.sum(&[q, r])
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut store = ParamStore::new();
            let w = store.add("w", random(&mut rng, &[8, 8]), true).unwrap();
            let x = store.add("x", random(&mut rng, &[8]), true).unwrap();
            let mut tape = Tape::new(&store);
            let (vw, vx) = (tape.param(w), tape.param(x));
            let y = tape.matvec(vw, vx).unwrap();
            let y = tape.softmax(y).unwrap();
            let l = tape.nll_softmax(y, 1, 10.0).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.value(y).clone(), g.get(w).unwrap().to_vec())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn shape_errors_surface() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 3]), true).unwrap();
        let mut tape = Tape::new(&store);
        let vw = tape.param(w);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.matvec(vw, x).is_err());
        assert!(tape.param_row(w, 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
                let p = softmax(&xs);
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }
}
