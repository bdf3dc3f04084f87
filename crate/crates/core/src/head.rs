//! Probability head over paired image/text features and the scalar losses
//! consumed by every tuning objective: temperature-scaled cosine logits,
//! cross-entropy, and KL divergence.

use crate::array::Array;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Cosine-similarity logits `z_img · z_txtᵀ / τ` for unit-norm feature rows.
///
/// `z_img` is batch×d, `z_txt` is C×d; the result is batch×C with every
/// entry in `[-1/τ, 1/τ]`. Rows that are not unit-norm (beyond 1e-6) and
/// non-positive temperatures are rejected.
pub fn logits<'t>(z_img: Tensor<'t>, z_txt: Tensor<'t>, tau: f64) -> Result<Tensor<'t>> {
    if tau <= 0.0 {
        return Err(TensorError::InvalidArg {
            op: "logits",
            detail: format!("temperature {} must be positive", tau),
        });
    }
    for (name, z) in [("z_img", &z_img), ("z_txt", &z_txt)] {
        let v = z.value();
        let shape = v.shape();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "logits",
                detail: format!("{} has shape {:?}", name, shape),
            });
        }
        let d = shape[1];
        for r in 0..shape[0] {
            let norm: f64 = v.data()[r * d..(r + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(TensorError::InvalidArg {
                    op: "logits",
                    detail: format!("{} row {} has norm {}", name, r, norm),
                });
            }
        }
    }
    z_img.matmul(z_txt.t()?)?.scale(1.0 / tau)
}

/// Class probabilities of a batch: softmax over the cosine logits.
pub fn class_probs<'t>(z_img: Tensor<'t>, z_txt: Tensor<'t>, tau: f64) -> Result<Tensor<'t>> {
    logits(z_img, z_txt, tau)?.softmax()
}

/// Mean cross-entropy of logits against integer labels, computed through
/// log-softmax so a vanishing probability at the label never overflows.
pub fn cross_entropy_logits<'t>(logits: Tensor<'t>, labels: &[usize]) -> Result<Tensor<'t>> {
    logits.log_softmax()?.take_per_row(labels)?.mean_all()?.neg()
}

/// Per-example `-log p[y]` values from logits, without touching the tape.
pub fn per_example_ce(logits: &Array, labels: &[usize]) -> Vec<f64> {
    let cols = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            lse - row[y]
        })
        .collect()
}

/// Mean cross-entropy of explicit probability rows: `mean(-log p[y])` with
/// the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &Array, labels: &[usize]) -> Result<f64> {
    validate_distribution(probs, "cross_entropy")?;
    let cols = probs.shape()[1];
    if labels.len() != probs.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{} rows vs {} labels", probs.shape()[0], labels.len()),
        });
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy",
                detail: format!("label {} out of {}", y, cols),
            });
        }
        total -= probs.data()[r * cols + y].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// KL divergence on the tape: mean over batch rows of `Σ_c p log(p/q)`,
/// with `0·log 0 = 0` and both arguments floored at [`PROB_FLOOR`] inside
/// the logarithm only. Gradient flows through both arguments.
pub fn kl_div_t<'t>(p: Tensor<'t>, q: Tensor<'t>) -> Result<Tensor<'t>> {
    let shape = p.shape();
    if shape.len() != 2 || q.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "kl_div",
            detail: format!("{:?} vs {:?}", shape, q.shape()),
        });
    }
    let batch = shape[0];
    let log_p = p.clamp(PROB_FLOOR, f64::INFINITY)?.log()?;
    let log_q = q.clamp(PROB_FLOOR, f64::INFINITY)?.log()?;
    p.mul(log_p.sub(log_q)?)?.sum_all()?.scale(1.0 / batch as f64)
}

/// KL divergence between two batches of probability rows.
pub fn kl_div(p: &Array, q: &Array) -> Result<f64> {
    validate_distribution(p, "kl_div")?;
    validate_distribution(q, "kl_div")?;
    let tape = Tape::new();
    let pt = tape.constant(p.clone())?;
    let qt = tape.constant(q.clone())?;
    kl_div_t(pt, qt)?.scalar()
}

fn validate_distribution(p: &Array, op: &'static str) -> Result<()> {
    let shape = p.shape();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected batch×C rows, got {:?}", shape),
        });
    }
    let cols = shape[1];
    for r in 0..shape[0] {
        let row = &p.data()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(TensorError::InvalidArg {
                op,
                detail: format!("row {} is not a probability distribution (sum {})", r, sum),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Array {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let raw = Array::randn(&[rows, d], 1.0, &mut rng);
        let tape = Tape::new();
        tape.constant(raw).unwrap().l2_normalize().unwrap().value()
    }

    fn probs_of(logit_rows: Vec<Vec<f64>>) -> Array {
        let rows = logit_rows.len();
        let cols = logit_rows[0].len();
        let data: Vec<f64> = logit_rows.into_iter().flatten().collect();
        let tape = Tape::new();
        tape.constant(Array::new(vec![rows, cols], data).unwrap())
            .unwrap()
            .softmax()
            .unwrap()
            .value()
    }

    #[test]
    fn two_class_probability_matches_scalar_formula() {
        // cos = (0.5, 0.3) at tau = 0.1 gives p1 = 1 / (1 + exp(-2)).
        let d = 4;
        let mut z_img = Array::zeros(&[1, d]);
        z_img.data_mut()[0] = 1.0;
        // Build two unit text rows with the desired cosines against z_img.
        let mut z_txt = Array::zeros(&[2, d]);
        z_txt.data_mut()[0] = 0.5;
        z_txt.data_mut()[1] = (1.0f64 - 0.25).sqrt();
        z_txt.data_mut()[d] = 0.3;
        z_txt.data_mut()[d + 1] = (1.0f64 - 0.09).sqrt();
        let tape = Tape::new();
        let zi = tape.constant(z_img).unwrap();
        let zt = tape.constant(z_txt).unwrap();
        let p = class_probs(zi, zt, 0.1).unwrap().value();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p.data()[0] - expected).abs() < 1e-12, "{} vs {}", p.data()[0], expected);
        assert!((p.data()[1] - (1.0 - expected)).abs() < 1e-12);
        assert!((expected - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn identical_text_rows_give_uniform_probabilities() {
        let z_img = unit_rows(3, 8, 1);
        let one = unit_rows(1, 8, 2);
        let mut z_txt = Array::zeros(&[4, 8]);
        for c in 0..4 {
            z_txt.data_mut()[c * 8..(c + 1) * 8].copy_from_slice(one.data());
        }
        let tape = Tape::new();
        let zi = tape.constant(z_img).unwrap();
        let zt = tape.constant(z_txt).unwrap();
        let p = class_probs(zi, zt, 0.05).unwrap().value();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_probability_is_one() {
        let tape = Tape::new();
        let zi = tape.constant(unit_rows(2, 8, 3)).unwrap();
        let zt = tape.constant(unit_rows(1, 8, 4)).unwrap();
        let p = class_probs(zi, zt, 0.1).unwrap().value();
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn logits_rejects_bad_inputs() {
        let tape = Tape::new();
        let zi = tape.constant(unit_rows(2, 8, 5)).unwrap();
        let not_unit = tape.constant(Array::full(&[1, 8], 0.5)).unwrap();
        assert!(logits(zi, not_unit, 0.1).is_err());
        let zt = tape.constant(unit_rows(2, 8, 6)).unwrap();
        assert!(logits(zi, zt, 0.0).is_err());
        assert!(logits(zi, zt, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_of_one_hot_correct_prediction_is_zero() {
        let probs = Array::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&probs, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_four_way_is_ln4() {
        let probs = Array::new(vec![1, 4], vec![0.25; 4]).unwrap();
        let ce = cross_entropy(&probs, &[2]).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
        assert!((ce - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_is_the_batch_mean() {
        let p = probs_of(vec![vec![2.0, 0.0, -1.0], vec![-0.5, 0.3, 0.1]]);
        let a = cross_entropy(&Array::new(vec![1, 3], p.data()[..3].to_vec()).unwrap(), &[0])
            .unwrap();
        let b = cross_entropy(&Array::new(vec![1, 3], p.data()[3..].to_vec()).unwrap(), &[2])
            .unwrap();
        let both = cross_entropy(&p, &[0, 2]).unwrap();
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = probs_of(vec![vec![1.0, -0.3, 0.4]]);
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_handles_zero_probability_in_first_argument() {
        // p = (1, 0), q = (0.5, 0.5): KL = ln 2 with 0·log 0 = 0.
        let p = Array::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let kl = kl_div(&p, &q).unwrap();
        assert!((kl - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = Array::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let q = Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let fwd = kl_div(&p, &q).unwrap();
        let rev = kl_div(&q, &p).unwrap();
        // Frozen from the scalar formula: .9 ln(1.8) + .1 ln(.2) and
        // .5 ln(.5/.9) + .5 ln(5).
        assert!((fwd - 0.368064).abs() < 1e-5, "{}", fwd);
        assert!((rev - 0.510826).abs() < 1e-5, "{}", rev);
        assert!((fwd - 0.3681).abs() < 1e-4 && (rev - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn ce_decomposes_as_kl_against_one_hot() {
        let p = probs_of(vec![vec![0.7, -0.2, 0.9, 0.0], vec![-1.0, 0.4, 0.2, 0.3]]);
        let labels = [2usize, 1];
        let mut onehot = Array::zeros(&[2, 4]);
        for (r, &y) in labels.iter().enumerate() {
            onehot.data_mut()[r * 4 + y] = 1.0;
        }
        let ce = cross_entropy(&p, &labels).unwrap();
        let kl = kl_div(&onehot, &p).unwrap();
        assert!((ce - kl).abs() < 1e-9, "{} vs {}", ce, kl);
    }

    #[test]
    fn ce_gradient_wrt_logits_is_softmax_minus_onehot_over_batch() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let raw = Array::randn(&[3, 5], 1.0, &mut rng);
        let labels = [4usize, 0, 2];
        let tape = Tape::new();
        let lg = tape.leaf(raw.clone(), true).unwrap();
        let loss = cross_entropy_logits(lg, &labels).unwrap();
        tape.backward(loss).unwrap();
        let g = lg.grad().unwrap();
        let sm = {
            let t = Tape::new();
            t.constant(raw).unwrap().softmax().unwrap().value()
        };
        for r in 0..3 {
            for c in 0..5 {
                let expected = (sm.data()[r * 5 + c] - if labels[r] == c { 1.0 } else { 0.0 }) / 3.0;
                assert!((g.data()[r * 5 + c] - expected).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_distributions(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = Array::randn(&[3, 5], 2.0, &mut rng);
            let tape = Tape::new();
            let p = tape.constant(x).unwrap().softmax().unwrap().value();
            for r in 0..3 {
                let row = &p.data()[r * 5..(r + 1) * 5];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn kl_is_nonnegative_and_zero_only_on_equal_pairs(seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = Array::randn(&[2, 4], 1.0, &mut rng);
            let b = Array::randn(&[2, 4], 1.0, &mut rng);
            let tape = Tape::new();
            let p = tape.constant(a).unwrap().softmax().unwrap().value();
            let q = tape.constant(b).unwrap().softmax().unwrap().value();
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_div(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn argmax_is_invariant_to_temperature(seed in 0u64..1000, t1 in 0.01f64..2.0, t2 in 0.01f64..2.0) {
            let z_img = unit_rows(2, 6, seed);
            let z_txt = unit_rows(4, 6, seed.wrapping_add(7777));
            let tape = Tape::new();
            let zi = tape.constant(z_img).unwrap();
            let zt = tape.constant(z_txt).unwrap();
            let p1 = class_probs(zi, zt, t1).unwrap().value();
            let p2 = class_probs(zi, zt, t2).unwrap().value();
            for r in 0..2 {
                let am = |p: &Array| {
                    (0..4).max_by(|&a, &b| {
                        p.data()[r * 4 + a].partial_cmp(&p.data()[r * 4 + b]).unwrap()
                    }).unwrap()
                };
                prop_assert_eq!(am(&p1), am(&p2));
            }
        }
    }
}
