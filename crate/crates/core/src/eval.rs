//! Evaluation: method-aware prediction, top-1 accuracy, and robust accuracy
//! under the PGD evaluation attack, fanned out over batches with the model
//! shared read-only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::attack::{pgd_attack_with, AttackConfig, AttackError, AttackLoss};
use crate::data::{Dataset, ShiftSpec, Split};
use crate::encoder::{encode_image, encode_text, encode_text_template, Binder, ModelState};
use crate::head::{cross_entropy_logits, logits, per_example_ce};
use crate::tensor::{Result as TensorResult, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("evaluation input error: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Class logits of the effective classifier behind a state: linear head if
/// present, otherwise cosine/temperature logits with the appropriate text
/// path, with an additive visual prompt applied first when present.
pub fn classifier_logits<'t>(
    binder: &Binder<'t>,
    x: Tensor<'t>,
    state: &ModelState,
    num_classes: usize,
) -> TensorResult<Tensor<'t>> {
    let tape = binder.tape();
    let x = match &state.visual_prompt {
        Some(vp) => {
            let phi = binder.bind(&vp.phi)?;
            let mask = tape.constant(vp.mask().clone())?;
            x.add_suffix(phi.mul(mask)?)?.clamp(0.0, 1.0)?
        }
        None => x,
    };
    let z_img = encode_image(binder, x, state, state.prompts.is_some())?;
    if let Some(head) = &state.linear_head {
        return z_img.matmul(binder.bind(&head.weight)?)?.add_suffix(binder.bind(&head.bias)?);
    }
    let class_ids: Vec<usize> = (0..num_classes).collect();
    let z_txt = encode_text(binder, &class_ids, state, state.prompts.is_some())?;
    logits(z_img, z_txt, state.tau)
}

/// Predicted class per example.
pub fn predict(state: &ModelState, images: &Array, num_classes: usize) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let x = tape.constant(images.clone())?;
    let lg = classifier_logits(&binder, x, state, num_classes)?.value();
    Ok(argmax_rows(&lg))
}

fn argmax_rows(logits: &Array) -> Vec<usize> {
    let cols = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of predictions equal to their labels.
pub fn compute_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "prediction/label length mismatch");
    if preds.is_empty() {
        return 0.0;
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / preds.len() as f64
}

fn stack_images(images: &[Array]) -> Array {
    let dim = images[0].numel();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Array::new(vec![images.len(), dim], data).expect("stacked shape")
}

/// Attack the effective classifier of `state` and report per-batch clean and
/// adversarial correctness. Batches run in parallel with per-batch seeds, so
/// results are independent of scheduling.
pub fn clean_and_robust_accuracy(
    state: &ModelState,
    images: &[Array],
    labels: &[usize],
    num_classes: usize,
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(EvalError::Invalid("empty or mismatched evaluation set".into()));
    }
    let chunks: Vec<(usize, &[Array], &[usize])> = images
        .chunks(batch_size)
        .zip(labels.chunks(batch_size))
        .enumerate()
        .map(|(i, (im, la))| (i, im, la))
        .collect();
    let per_batch: Vec<Result<(usize, usize)>> = chunks
        .par_iter()
        .map(|(batch_idx, im, la)| {
            let x = stack_images(im);
            let clean_preds = predict(state, &x, num_classes)?;
            let clean_correct = clean_preds.iter().zip(*la).filter(|(p, y)| p == y).count();
            let adv = pgd_attack_with(
                &x,
                attack,
                crate::mix_seed(seed, *batch_idx as u64),
                |tape, xt| {
                    let binder = Binder::frozen(tape);
                    let lg = classifier_logits(&binder, xt, state, num_classes)?;
                    let per_example = per_example_ce(&lg.value(), la);
                    let mean = cross_entropy_logits(lg, la)?;
                    Ok(AttackLoss { mean, per_example })
                },
            )?;
            let adv_preds = predict(state, &adv.x_adv, num_classes)?;
            let adv_correct = adv_preds.iter().zip(*la).filter(|(p, y)| p == y).count();
            Ok((clean_correct, adv_correct))
        })
        .collect();
    let mut clean = 0usize;
    let mut robust = 0usize;
    for r in per_batch {
        let (c, a) = r?;
        clean += c;
        robust += a;
    }
    let n = images.len() as f64;
    Ok((clean as f64 / n, robust as f64 / n))
}

/// Clean accuracy only (no attack).
pub fn clean_accuracy(
    state: &ModelState,
    images: &[Array],
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
) -> Result<f64> {
    let per_batch: Vec<Result<usize>> = images
        .chunks(batch_size)
        .zip(labels.chunks(batch_size))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(im, la)| {
            let x = stack_images(im);
            let preds = predict(state, &x, num_classes)?;
            Ok(preds.iter().zip(*la).filter(|(p, y)| p == y).count())
        })
        .collect();
    let mut correct = 0usize;
    for r in per_batch {
        correct += r?;
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Deterministic validation indices: a seeded 20% of the test pool per
/// class, derived from the dataset seed so every method sees the same split.
pub fn validation_indices(dataset: &Dataset) -> Vec<usize> {
    subsample_per_class(&dataset.test, dataset.spec.num_classes, |n| (n / 5).max(1), dataset.spec.seed)
}

/// Seeded fixed-size per-class subsample of a split.
pub fn subsample_per_class(
    split: &Split,
    num_classes: usize,
    take: impl Fn(usize) -> usize,
    seed: u64,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut out = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..split.len()).filter(|&i| split.labels[i] == class).collect();
        let mut rng =
            rand_chacha::ChaCha12Rng::seed_from_u64(crate::mix_seed(seed, 0xe7a1 + class as u64));
        idx.shuffle(&mut rng);
        let k = take(idx.len()).min(idx.len());
        out.extend(idx.into_iter().take(k));
    }
    out
}

pub fn gather<'a>(split: &'a Split, indices: &[usize]) -> (Vec<Array>, Vec<usize>) {
    let images = indices.iter().map(|&i| split.images[i].clone()).collect();
    let labels = indices.iter().map(|&i| split.labels[i]).collect();
    (images, labels)
}

/// Accuracy of a shifted test split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShiftResult {
    pub kind: String,
    pub intensity: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

/// One evaluation report: the accuracy columns plus enough configuration
/// echo to reproduce them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub shots: i64,
    pub eps: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub shift_results: Vec<ShiftResult>,
    pub seed: u64,
    pub attack_config: AttackConfig,
    pub num_examples: usize,
    /// Excluded from determinism comparisons.
    pub wall_clock_seconds: f64,
}

/// Run the full evaluation behind a report: clean plus robust accuracy on
/// the given set, and optionally on shifted variants of it.
pub fn evaluate(
    state: &ModelState,
    method: &str,
    shots: i64,
    images: &[Array],
    labels: &[usize],
    num_classes: usize,
    attack: &AttackConfig,
    shifts: &[ShiftSpec],
    batch_size: usize,
    seed: u64,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let (clean, robust) = clean_and_robust_accuracy(
        state,
        images,
        labels,
        num_classes,
        attack,
        batch_size,
        seed,
    )?;
    let mut shift_results = Vec::new();
    for shift in shifts {
        let split = Split {
            images: images.to_vec(),
            labels: labels.to_vec(),
            jitter: vec![[0.0, 0.0]; images.len()],
        };
        let shifted = crate::data::apply_shift(&split, shift)
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        let (sc, sr) = clean_and_robust_accuracy(
            state,
            &shifted.images,
            &shifted.labels,
            num_classes,
            attack,
            batch_size,
            crate::mix_seed(seed, 0x5417),
        )?;
        shift_results.push(ShiftResult {
            kind: shift.kind.name().to_string(),
            intensity: shift.intensity,
            clean_accuracy: sc,
            robust_accuracy: sr,
        });
    }
    Ok(EvalReport {
        method: method.to_string(),
        shots,
        eps: attack.epsilon,
        clean_accuracy: clean,
        robust_accuracy: robust,
        shift_results,
        seed,
        attack_config: attack.clone(),
        num_examples: images.len(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Zero-shot features sanity path used by tests: hand-engineered prediction
/// probabilities for a batch.
pub fn hep_probs(state: &ModelState, images: &Array, num_classes: usize) -> Result<Array> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let x = tape.constant(images.clone())?;
    let z_img = encode_image(&binder, x, state, false)?;
    let class_ids: Vec<usize> = (0..num_classes).collect();
    let z_txt =
        encode_text_template(&binder, &class_ids, state, &state.config.template_token_ids())?;
    Ok(crate::head::class_probs(z_img, z_txt, state.tau)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(compute_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(compute_accuracy(&[0, 0, 0], &[1, 2, 3]), 0.0);
        assert_eq!(compute_accuracy(&[1, 2, 0, 4], &[1, 2, 3, 4]), 0.75);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accuracy_matches_loop_oracle(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut correct = 0usize;
            for i in 0..preds.len() {
                if preds[i] == labels[i] {
                    correct += 1;
                }
            }
            let expected = correct as f64 / preds.len() as f64;
            prop_assert_eq!(compute_accuracy(&preds, &labels), expected);
        }
    }
}
