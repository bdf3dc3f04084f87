//! Tuning loop: per batch, generate adversarial examples with the current
//! prompts, extract features from the tuned and frozen models, compose the
//! method's objective, and update only that method's learnable parameters
//! with SGD momentum under a warmup-plus-cosine schedule.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::attack::{pgd_attack, pgd_attack_with, AttackConfig, AttackError, AttackLoss};
use crate::data::Dataset;
use crate::encoder::{
    encode_image, encode_text, image_features, text_features, Binder,
    ContextMode, LinearHead, ModelState, Param, PromptSet, VisualPrompt,
};
use crate::eval::{gather, subsample_per_class, validation_indices};
use crate::head::{cross_entropy_logits, logits, per_example_ce};
use crate::mix_seed;
use crate::objectives::{
    ablation_loss, avp_loss, paft_loss, AblationMask, BatchOutputs, LossBreakdown, LossParts,
    Method, ObjectiveConfig,
};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("n-shot sampling failed: {0}")]
    Sampling(String),
    #[error("run record sink: {0}")]
    Sink(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Shot scheme: a fixed count per class, or the whole training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shots {
    N(usize),
    All,
}

impl Shots {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "all" {
            return Some(Self::All);
        }
        s.parse().ok().map(Self::N)
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Self::N(n) => n as i64,
            Self::All => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub shots: Shots,
    pub seed: u64,
    pub attack: AttackConfig,
    pub objective: ObjectiveConfig,
    /// Border width of the additive visual prompt mask.
    pub avp_border: usize,
    /// Per-epoch robust validation runs on at most this many examples.
    pub val_robust_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr0: 0.0025,
            momentum: 0.9,
            warmup_epochs: 1,
            shots: Shots::N(16),
            seed: 0,
            attack: AttackConfig::train(8.0 / 255.0),
            objective: ObjectiveConfig::default(),
            avp_border: 2,
            val_robust_cap: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr0 {} must be > 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        self.attack.validate()?;
        self.objective.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_clean_accuracy: f64,
    pub val_robust_accuracy: f64,
}

/// Complete record of one tuning run: one entry per optimizer step, one per
/// epoch, and the persisted training subset.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
}

/// Warmup-then-cosine schedule: linear ramp 0 -> lr0 over the warmup steps,
/// then `lr0 * 0.5 * (1 + cos(pi * progress))`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, lr0: f64) -> f64 {
    assert!(step < total_steps, "step {step} out of {total_steps}");
    if step < warmup_steps {
        return lr0 * step as f64 / warmup_steps as f64;
    }
    let denom = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / denom;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Classic momentum update: `v <- momentum * v + g; p <- p - lr * v`.
/// No dampening, no weight decay.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) {
    assert_eq!(params.len(), grads.len(), "param/grad shape mismatch");
    assert_eq!(params.len(), velocity.len(), "param/velocity shape mismatch");
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// Exactly N train indices per class (or the whole split), fixed by the
/// seed so every method trains on the same subset.
pub fn nshot_sample(dataset: &Dataset, shots: Shots, seed: u64) -> Result<Vec<usize>> {
    let train = &dataset.train;
    match shots {
        Shots::All => Ok((0..train.len()).collect()),
        Shots::N(n) => {
            let mut out = Vec::with_capacity(n * dataset.spec.num_classes);
            for class in 0..dataset.spec.num_classes {
                let mut idx: Vec<usize> =
                    (0..train.len()).filter(|&i| train.labels[i] == class).collect();
                if idx.len() < n {
                    return Err(TrainError::Sampling(format!(
                        "class {class} has {} examples, needs {n}",
                        idx.len()
                    )));
                }
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x5a5a + class as u64));
                idx.shuffle(&mut rng);
                out.extend(idx.into_iter().take(n));
            }
            Ok(out)
        }
    }
}

/// Attach the learnable parameters the method tunes, if not already present.
pub fn attach_learnables(state: &mut ModelState, cfg: &TrainConfig, num_classes: usize) {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0x1ea7));
    match cfg.objective.method {
        Method::Capt => {
            if state.prompts.is_none() {
                state.prompts = Some(PromptSet::init(
                    &state.config,
                    state.config.prompt_depth,
                    ContextMode::Unified,
                    num_classes,
                    &mut rng,
                ));
            }
        }
        Method::AptUc | Method::AptCsc => {
            if state.prompts.is_none() {
                let mode = if cfg.objective.method == Method::AptUc {
                    ContextMode::Unified
                } else {
                    ContextMode::ClassSpecific
                };
                state.prompts = Some(PromptSet::init(&state.config, 0, mode, num_classes, &mut rng));
            }
        }
        Method::Avp => {
            if state.visual_prompt.is_none() {
                state.visual_prompt = Some(VisualPrompt::zeros(&state.config, cfg.avp_border));
            }
        }
        Method::Paft => {
            if state.linear_head.is_none() {
                state.linear_head = Some(LinearHead::zeros(state.config.embed_dim, num_classes));
            }
        }
        Method::Hep => {}
    }
}

fn learnable_params(state: &ModelState) -> Vec<&Param> {
    let mut out = Vec::new();
    if let Some(p) = &state.prompts {
        out.extend(p.params());
    }
    if let Some(v) = &state.visual_prompt {
        out.push(&v.phi);
    }
    if let Some(h) = &state.linear_head {
        out.push(&h.weight);
        out.push(&h.bias);
    }
    out
}

fn learnable_params_mut(state: &mut ModelState) -> Vec<&mut Param> {
    let mut out = Vec::new();
    if let Some(p) = &mut state.prompts {
        out.extend(p.params_mut());
    }
    if let Some(v) = &mut state.visual_prompt {
        out.push(&mut v.phi);
    }
    if let Some(h) = &mut state.linear_head {
        out.push(&mut h.weight);
        out.push(&mut h.bias);
    }
    out
}

fn stack(images: &[&Array]) -> Array {
    let dim = images[0].numel();
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Array::new(vec![images.len(), dim], data).expect("stacked shape")
}

/// Cached frozen-model quantities: text features once per run, image
/// features once per training example.
struct FrozenCache {
    z_txt: Array,
    z_img: Vec<Option<Vec<f64>>>,
}

impl FrozenCache {
    fn new(frozen: &ModelState, num_classes: usize, train_len: usize) -> Result<Self> {
        let class_ids: Vec<usize> = (0..num_classes).collect();
        let z_txt = text_features(frozen, &class_ids, false)?;
        Ok(Self { z_txt, z_img: vec![None; train_len] })
    }

    fn batch_logits(
        &mut self,
        frozen: &ModelState,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<Array> {
        let d = frozen.config.embed_dim;
        let missing: Vec<usize> =
            indices.iter().copied().filter(|&i| self.z_img[i].is_none()).collect();
        if !missing.is_empty() {
            let imgs: Vec<&Array> = missing.iter().map(|&i| &dataset.train.images[i]).collect();
            let feats = image_features(frozen, &stack(&imgs), false)?;
            for (k, &i) in missing.iter().enumerate() {
                self.z_img[i] = Some(feats.data()[k * d..(k + 1) * d].to_vec());
            }
        }
        let c = self.z_txt.shape()[0];
        let mut lg = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            let zi = self.z_img[i].as_ref().expect("cached feature");
            for cls in 0..c {
                let zt = &self.z_txt.data()[cls * d..(cls + 1) * d];
                let cos: f64 = zi.iter().zip(zt).map(|(a, b)| a * b).sum();
                lg.push(cos / frozen.tau);
            }
        }
        Ok(Array::new(vec![indices.len(), c], lg).expect("logit shape"))
    }
}

/// Run one tuning pass per the method in `cfg.objective`. Only the method's
/// learnable parameters change; the backbone is untouched. Step and epoch
/// records stream to `sink` as JSON lines when provided.
pub fn tune(
    state: &mut ModelState,
    frozen: &ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let num_classes = dataset.spec.num_classes;
    if num_classes > state.config.max_classes() {
        return Err(TrainError::InvalidConfig(format!(
            "{} classes exceed the text vocabulary capacity {}",
            num_classes,
            state.config.max_classes()
        )));
    }
    let mut record = RunRecord::default();
    if cfg.objective.method == Method::Hep {
        // Nothing to tune.
        return Ok(record);
    }
    attach_learnables(state, cfg, num_classes);
    record.train_indices = nshot_sample(dataset, cfg.shots, cfg.seed)?;

    let steps_per_epoch = record.train_indices.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;

    let mut frozen_cache = FrozenCache::new(frozen, num_classes, dataset.train.len())?;
    // HEP text features of the tuned backbone, for methods that keep the
    // text branch fixed.
    let hep_z_txt = {
        let class_ids: Vec<usize> = (0..num_classes).collect();
        text_features(state, &class_ids, false)?
    };

    let mut velocity: HashMap<u64, Vec<f64>> = learnable_params(state)
        .iter()
        .map(|p| (p.id(), vec![0.0; p.value.numel()]))
        .collect();

    let val_idx = validation_indices(dataset);
    let (val_images, val_labels) = gather(&dataset.test, &val_idx);
    let robust_idx = subsample_per_class(
        &dataset.test,
        num_classes,
        |_| cfg.val_robust_cap.div_ceil(num_classes),
        mix_seed(dataset.spec.seed, 0x0b0b),
    );
    let (rob_images, rob_labels) = gather(&dataset.test, &robust_idx);

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = record.train_indices.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xe0 + epoch as u64));
        order.shuffle(&mut rng);

        for batch_indices in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Array> =
                batch_indices.iter().map(|&i| &dataset.train.images[i]).collect();
            let x = stack(&imgs);
            let labels: Vec<usize> =
                batch_indices.iter().map(|&i| dataset.train.labels[i]).collect();
            let lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr0);
            let attack_seed = mix_seed(cfg.seed, 0xa11 + step as u64);

            // One attack call precedes every loss computation, using the
            // current prompts (or the method's designated target).
            let adv = match cfg.objective.method {
                Method::Capt | Method::AptUc | Method::AptCsc => {
                    pgd_attack(&x, &labels, num_classes, state, &cfg.attack, attack_seed)?
                }
                Method::Avp => {
                    // Perturbation generated independently of the prompt.
                    pgd_attack(&x, &labels, num_classes, frozen, &cfg.attack, attack_seed)?
                }
                Method::Paft => {
                    let head = state.linear_head.as_ref().expect("attached");
                    let (w, b) = (head.weight.value.clone(), head.bias.value.clone());
                    let st = &*state;
                    let y = labels.clone();
                    pgd_attack_with(&x, &cfg.attack, attack_seed, move |tape, xt| {
                        let binder = Binder::frozen(tape);
                        let z = encode_image(&binder, xt, st, false)?;
                        let lg = z
                            .matmul(tape.constant(w.clone())?)?
                            .add_suffix(tape.constant(b.clone())?)?;
                        let per_example = per_example_ce(&lg.value(), &y);
                        let mean = cross_entropy_logits(lg, &y)?;
                        Ok(AttackLoss { mean, per_example })
                    })?
                }
                Method::Hep => unreachable!("hep returns early"),
            };

            // Loss on a fresh tape with the learnables as gradient leaves.
            let tape = Tape::new();
            let binder = Binder::new(&tape, state.learnable_ids());
            let parts: LossParts<'_> = match cfg.objective.method {
                Method::Capt | Method::AptUc | Method::AptCsc => {
                    let class_ids: Vec<usize> = (0..num_classes).collect();
                    let z_txt = encode_text(&binder, &class_ids, state, true)?;
                    let xt = tape.constant(x.clone())?;
                    let z_clean = encode_image(&binder, xt, state, true)?;
                    let xa = tape.constant(adv.x_adv.clone())?;
                    let z_adv = encode_image(&binder, xa, state, true)?;
                    let frz_logits =
                        frozen_cache.batch_logits(frozen, dataset, batch_indices)?;
                    let outputs = BatchOutputs {
                        logits_clean: logits(z_clean, z_txt, state.tau)?,
                        logits_adv: logits(z_adv, z_txt, state.tau)?,
                        logits_frz: tape.constant(frz_logits)?,
                        labels: labels.clone(),
                    };
                    let mask = match cfg.objective.method {
                        Method::Capt => cfg.objective.ablation_mask,
                        _ => AblationMask::CE_ADV_ONLY,
                    };
                    ablation_loss(&outputs, cfg.objective.lambda, cfg.objective.alpha_mode, mask)?
                }
                Method::Avp => {
                    let zt = tape.constant(hep_z_txt.clone())?;
                    avp_loss(&binder, state, zt, &x, &adv.delta, &labels)?
                }
                Method::Paft => paft_loss(&binder, state, &adv.x_adv, &labels)?,
                Method::Hep => unreachable!(),
            };
            if !parts.breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            tape.backward(parts.total)?;

            let grads: Vec<(u64, Option<Array>)> = learnable_params(state)
                .iter()
                .map(|p| (p.id(), binder.leaf_of(p).and_then(|t| t.grad())))
                .collect();
            drop(binder);
            for ((id, grad), param) in grads.into_iter().zip(learnable_params_mut(state)) {
                debug_assert_eq!(id, param.id());
                let Some(grad) = grad else { continue };
                let v = velocity.get_mut(&id).expect("velocity slot");
                sgd_momentum_step(param.value.data_mut(), grad.data(), v, lr, cfg.momentum);
            }

            let rec = StepRecord { step, lr, loss: parts.breakdown };
            if let Some(w) = sink.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("serializable record");
                writeln!(w, "{line}")?;
            }
            record.steps.push(rec);
            step += 1;
        }

        let val_clean = crate::eval::clean_accuracy(
            state,
            &val_images,
            &val_labels,
            num_classes,
            cfg.batch_size,
        )?;
        let (_, val_robust) = crate::eval::clean_and_robust_accuracy(
            state,
            &rob_images,
            &rob_labels,
            num_classes,
            &cfg.attack,
            cfg.batch_size,
            mix_seed(cfg.seed, 0x0a1 + epoch as u64),
        )?;
        let rec = EpochRecord { epoch, val_clean_accuracy: val_clean, val_robust_accuracy: val_robust };
        if let Some(w) = sink.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("serializable record");
            writeln!(w, "{line}")?;
        }
        record.epochs.push(rec);
    }
    Ok(record)
}
