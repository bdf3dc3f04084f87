//! Tuning objectives: the adaptive consistency-guided loss and its
//! baselines (TRADES-style, adversarial-CE text prompting, additive visual
//! prompting, linear-probe fine-tuning, hand-engineered prompts), all as
//! pure functions of model outputs on one tape.

use crate::array::Array;
use crate::encoder::{encode_image, encode_text_template, Binder, ModelState};
use crate::head::{class_probs, cross_entropy_logits, kl_div_t, logits};
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// Tuning method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Capt,
    AptUc,
    AptCsc,
    Avp,
    Paft,
    Hep,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "capt" => Self::Capt,
            "apt-uc" => Self::AptUc,
            "apt-csc" => Self::AptCsc,
            "avp" => Self::Avp,
            "paft" => Self::Paft,
            "hep" => Self::Hep,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Capt => "capt",
            Self::AptUc => "apt-uc",
            Self::AptCsc => "apt-csc",
            Self::Avp => "avp",
            Self::Paft => "paft",
            Self::Hep => "hep",
        }
    }
}

/// Which loss terms participate (mirrors the objective ablation rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationMask {
    pub use_ce_adv: bool,
    pub use_ce_clean: bool,
    pub use_cons_train: bool,
    pub use_cons_frz: bool,
}

impl AblationMask {
    /// The full objective: clean CE plus both consistency terms.
    pub const FULL: Self = Self {
        use_ce_adv: false,
        use_ce_clean: true,
        use_cons_train: true,
        use_cons_frz: true,
    };
    pub const CE_ADV_ONLY: Self = Self {
        use_ce_adv: true,
        use_ce_clean: false,
        use_cons_train: false,
        use_cons_frz: false,
    };
    pub const CE_CLEAN_ONLY: Self = Self {
        use_ce_adv: false,
        use_ce_clean: true,
        use_cons_train: false,
        use_cons_frz: false,
    };

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ce-adv" => Self::CE_ADV_ONLY,
            "ce-clean" => Self::CE_CLEAN_ONLY,
            "ce-clean+cons-train" => Self {
                use_ce_adv: false,
                use_ce_clean: true,
                use_cons_train: true,
                use_cons_frz: false,
            },
            "ce-clean+cons-frz" => Self {
                use_ce_adv: false,
                use_ce_clean: true,
                use_cons_train: false,
                use_cons_frz: true,
            },
            "all" => Self::FULL,
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        let mut parts = Vec::new();
        if self.use_ce_adv {
            parts.push("ce-adv");
        }
        if self.use_ce_clean {
            parts.push("ce-clean");
        }
        if self.use_cons_train {
            parts.push("cons-train");
        }
        if self.use_cons_frz {
            parts.push("cons-frz");
        }
        parts.join("+")
    }
}

/// Consistency-weighting mode.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AlphaMode {
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub method: Method,
    pub ablation_mask: AblationMask,
    pub alpha_mode: AlphaMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            method: Method::Capt,
            ablation_mask: AblationMask::FULL,
            alpha_mode: AlphaMode::Adaptive,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "ObjectiveConfig",
                detail: format!("lambda {} < 0", self.lambda),
            });
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if !(0.0..=1.0).contains(&a) {
                return Err(TensorError::InvalidArg {
                    op: "ObjectiveConfig",
                    detail: format!("fixed alpha {} outside [0, 1]", a),
                });
            }
        }
        Ok(())
    }
}

/// Scalar parts of one objective evaluation. `total` always reproduces the
/// declared composition of the parts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_clean: f64,
    pub ce_adv: f64,
    pub l_cons_train: f64,
    pub l_cons_frz: f64,
    pub alpha_cons: f64,
}

impl LossBreakdown {
    /// Recompose the total from the stored parts under the given mask,
    /// mirroring the tape-side arithmetic order.
    pub fn composed(&self, mask: AblationMask, lambda: f64) -> f64 {
        let mut total = 0.0;
        if mask.use_ce_adv {
            total += self.ce_adv;
        }
        if mask.use_ce_clean {
            total += self.ce_clean;
        }
        match (mask.use_cons_train, mask.use_cons_frz) {
            (true, true) => {
                let combo = (1.0 - self.alpha_cons) * self.l_cons_train
                    + self.alpha_cons * self.l_cons_frz;
                total += lambda * combo;
            }
            (true, false) => total += lambda * self.l_cons_train,
            (false, true) => total += lambda * self.l_cons_frz,
            (false, false) => {}
        }
        total
    }
}

/// A scalar loss on the tape plus its recorded parts.
pub struct LossParts<'t> {
    pub total: Tensor<'t>,
    pub breakdown: LossBreakdown,
}

/// Logit triple behind the consistency objectives: the prompted model on
/// clean and adversarial inputs, and the frozen model on clean inputs (the
/// frozen logits must be constants on the tape).
pub struct BatchOutputs<'t> {
    pub logits_clean: Tensor<'t>,
    pub logits_adv: Tensor<'t>,
    pub logits_frz: Tensor<'t>,
    pub labels: Vec<usize>,
}

/// Adaptive consistency weight `exp(ce_frz) / (exp(ce_frz) + exp(ce_train))`
/// computed in the stabilized form `sigmoid(ce_frz - ce_train)`.
pub fn adaptive_alpha(ce_frz: f64, ce_train: f64) -> Result<f64> {
    if !ce_frz.is_finite() || !ce_train.is_finite() {
        return Err(TensorError::NonFinite { op: "adaptive_alpha" });
    }
    let z = ce_frz - ce_train;
    Ok(if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    })
}

/// Consistency between adversarial and clean predictions of the tuned model.
pub fn cons_train<'t>(probs_adv: Tensor<'t>, probs_clean: Tensor<'t>) -> Result<Tensor<'t>> {
    kl_div_t(probs_adv, probs_clean)
}

/// Consistency between the tuned model's adversarial predictions and the
/// frozen model's clean predictions. The frozen argument must be built from
/// constants so no gradient reaches the guidance branch.
pub fn cons_frz<'t>(probs_adv_tuned: Tensor<'t>, probs_clean_frozen: Tensor<'t>) -> Result<Tensor<'t>> {
    kl_div_t(probs_adv_tuned, probs_clean_frozen)
}

/// Compose the masked objective. With both consistency terms active the
/// adaptive weight balances them; with a single term active it enters with
/// plain weight lambda.
pub fn ablation_loss<'t>(
    outputs: &BatchOutputs<'t>,
    lambda: f64,
    alpha_mode: AlphaMode,
    mask: AblationMask,
) -> Result<LossParts<'t>> {
    let labels = &outputs.labels;
    let ce_clean = cross_entropy_logits(outputs.logits_clean, labels)?;
    let ce_adv = cross_entropy_logits(outputs.logits_adv, labels)?;
    let probs_clean = outputs.logits_clean.softmax()?;
    let probs_adv = outputs.logits_adv.softmax()?;
    let probs_frz = outputs.logits_frz.softmax()?;
    if probs_frz.requires_grad() {
        return Err(TensorError::InvalidArg {
            op: "ablation_loss",
            detail: "frozen logits must be constants".into(),
        });
    }
    let l_ct = cons_train(probs_adv, probs_clean)?;
    let l_cf = cons_frz(probs_adv, probs_frz)?;

    // Adaptive weight from the frozen CE (a constant) and the tuned clean
    // CE; gradient flows through the tuned side.
    let ce_frz = cross_entropy_logits(outputs.logits_frz, labels)?;
    let alpha = match alpha_mode {
        AlphaMode::Adaptive => ce_frz.sub(ce_clean)?.sigmoid()?,
        AlphaMode::Fixed(a) => ce_clean.tape_scalar(a)?,
    };
    let alpha_value = alpha.scalar()?;

    let mut total: Option<Tensor<'t>> = None;
    let push = |t: Tensor<'t>, acc: &mut Option<Tensor<'t>>| -> Result<()> {
        *acc = Some(match acc.take() {
            None => t,
            Some(prev) => prev.add(t)?,
        });
        Ok(())
    };
    if mask.use_ce_adv {
        push(ce_adv, &mut total)?;
    }
    if mask.use_ce_clean {
        push(ce_clean, &mut total)?;
    }
    match (mask.use_cons_train, mask.use_cons_frz) {
        (true, true) => {
            let one_minus = alpha.neg()?.add_scalar(1.0)?;
            let combo = one_minus.mul(l_ct)?.add(alpha.mul(l_cf)?)?;
            push(combo.scale(lambda)?, &mut total)?;
        }
        (true, false) => push(l_ct.scale(lambda)?, &mut total)?,
        (false, true) => push(l_cf.scale(lambda)?, &mut total)?,
        (false, false) => {}
    }
    let total = total.ok_or(TensorError::InvalidArg {
        op: "ablation_loss",
        detail: "mask selects no terms".into(),
    })?;

    Ok(LossParts {
        breakdown: LossBreakdown {
            total: total.scalar()?,
            ce_clean: ce_clean.scalar()?,
            ce_adv: ce_adv.scalar()?,
            l_cons_train: l_ct.scalar()?,
            l_cons_frz: l_cf.scalar()?,
            alpha_cons: alpha_value,
        },
        total,
    })
}

/// The full adaptive consistency-guided objective:
/// `CE_clean + lambda * ((1 - alpha) * L_cons_train + alpha * L_cons_frz)`.
pub fn capt_loss<'t>(
    outputs: &BatchOutputs<'t>,
    lambda: f64,
    alpha_mode: AlphaMode,
) -> Result<LossParts<'t>> {
    ablation_loss(outputs, lambda, alpha_mode, AblationMask::FULL)
}

/// Clean CE plus lambda-weighted KL(adversarial, clean) on the tuned model.
pub fn trades_loss<'t>(outputs: &BatchOutputs<'t>, lambda: f64) -> Result<LossParts<'t>> {
    ablation_loss(
        outputs,
        lambda,
        AlphaMode::Fixed(0.0),
        AblationMask {
            use_ce_adv: false,
            use_ce_clean: true,
            use_cons_train: true,
            use_cons_frz: false,
        },
    )
}

/// Adversarial-examples-only cross-entropy (text prompt tuning objective).
pub fn apt_loss<'t>(outputs: &BatchOutputs<'t>) -> Result<LossParts<'t>> {
    ablation_loss(outputs, 0.0, AlphaMode::Fixed(0.0), AblationMask::CE_ADV_ONLY)
}

/// Additive visual prompting: clean and adversarial CE of the frozen model
/// with a masked additive image prompt applied to both branches. Only the
/// prompt receives gradient; the perturbation is supplied by the caller and
/// was generated without the prompt.
pub fn avp_loss<'t>(
    binder: &Binder<'t>,
    state: &ModelState,
    z_txt: Tensor<'t>,
    x: &Array,
    delta: &Array,
    labels: &[usize],
) -> Result<LossParts<'t>> {
    let vp = state.visual_prompt.as_ref().ok_or(TensorError::InvalidArg {
        op: "avp_loss",
        detail: "state has no visual prompt".into(),
    })?;
    if delta.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "avp_loss",
            detail: format!("delta {:?} vs x {:?}", delta.shape(), x.shape()),
        });
    }
    let tape = binder.tape();
    let phi = binder.bind(&vp.phi)?;
    let mask = tape.constant(vp.mask().clone())?;
    let phi_masked = phi.mul(mask)?;
    let xt = tape.constant(x.clone())?;
    let dt = tape.constant(delta.clone())?;

    let x_prompted = xt.add_suffix(phi_masked)?.clamp(0.0, 1.0)?;
    let x_adv_prompted = xt.add(dt)?.add_suffix(phi_masked)?.clamp(0.0, 1.0)?;

    let z1 = encode_image(binder, x_prompted, state, false)?;
    let z2 = encode_image(binder, x_adv_prompted, state, false)?;
    let ce_clean = cross_entropy_logits(logits(z1, z_txt, state.tau)?, labels)?;
    let ce_adv = cross_entropy_logits(logits(z2, z_txt, state.tau)?, labels)?;
    let total = ce_clean.add(ce_adv)?;
    Ok(LossParts {
        breakdown: LossBreakdown {
            total: total.scalar()?,
            ce_clean: ce_clean.scalar()?,
            ce_adv: ce_adv.scalar()?,
            l_cons_train: 0.0,
            l_cons_frz: 0.0,
            alpha_cons: 0.5,
        },
        total,
    })
}

/// Linear-probe fine-tuning: adversarial CE of a linear classifier on frozen
/// image features. Only the head parameters receive gradient.
pub fn paft_loss<'t>(
    binder: &Binder<'t>,
    state: &ModelState,
    x_adv: &Array,
    labels: &[usize],
) -> Result<LossParts<'t>> {
    let head = state.linear_head.as_ref().ok_or(TensorError::InvalidArg {
        op: "paft_loss",
        detail: "state has no linear head".into(),
    })?;
    let tape = binder.tape();
    let xt = tape.constant(x_adv.clone())?;
    let z = encode_image(binder, xt, state, false)?;
    let head_logits = z.matmul(binder.bind(&head.weight)?)?.add_suffix(binder.bind(&head.bias)?)?;
    let ce_adv = cross_entropy_logits(head_logits, labels)?;
    Ok(LossParts {
        breakdown: LossBreakdown {
            total: ce_adv.scalar()?,
            ce_clean: 0.0,
            ce_adv: ce_adv.scalar()?,
            l_cons_train: 0.0,
            l_cons_frz: 0.0,
            alpha_cons: 0.5,
        },
        total: ce_adv,
    })
}

/// Zero-parameter prediction through fixed template tokens.
pub fn hep_predict(
    state: &ModelState,
    x: &Array,
    class_ids: &[usize],
    template_ids: &[usize],
) -> Result<Array> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let xt = tape.constant(x.clone())?;
    let z_img = encode_image(&binder, xt, state, false)?;
    let z_txt = encode_text_template(&binder, class_ids, state, template_ids)?;
    Ok(class_probs(z_img, z_txt, state.tau)?.value())
}

impl<'t> Tensor<'t> {
    /// A constant scalar on the same tape (helper for fixed weights).
    fn tape_scalar(&self, v: f64) -> Result<Tensor<'t>> {
        // Route through scale to stay on the same tape without exposing it.
        self.scale(0.0)?.add_scalar(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_outputs<'t>(tape: &'t Tape, batch: usize, classes: usize, seed: u64) -> BatchOutputs<'t> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha12Rng| Array::randn(&[batch, classes], 2.0, rng);
        let logits_clean = tape.leaf(mk(&mut rng), true).unwrap();
        let logits_adv = tape.leaf(mk(&mut rng), true).unwrap();
        let logits_frz = tape.constant(mk(&mut rng)).unwrap();
        let labels = (0..batch).map(|i| i % classes).collect();
        BatchOutputs { logits_clean, logits_adv, logits_frz, labels }
    }

    #[test]
    fn alpha_is_half_at_equal_inputs() {
        assert_eq!(adaptive_alpha(1.7, 1.7).unwrap(), 0.5);
        assert_eq!(adaptive_alpha(0.0, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn alpha_matches_scalar_evaluations() {
        let a = adaptive_alpha(1.0, 0.0).unwrap();
        let e = 1.0f64.exp();
        assert!((a - e / (e + 1.0)).abs() < 1e-15);
        assert!((a - 0.731059).abs() < 1e-6);

        let b = adaptive_alpha(0.0, 10.0).unwrap();
        assert!(b > 0.0, "alpha must stay inside (0, 1)");
        assert!((b - 4.54e-5).abs() < 1e-6, "{}", b);
    }

    #[test]
    fn alpha_rejects_non_finite_inputs() {
        assert!(adaptive_alpha(f64::NAN, 0.0).is_err());
        assert!(adaptive_alpha(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn alpha_complements_sum_to_one_and_is_monotone() {
        for i in 0..20 {
            for j in 0..20 {
                let a = i as f64 * 0.5;
                let b = j as f64 * 0.5;
                let fwd = adaptive_alpha(a, b).unwrap();
                let rev = adaptive_alpha(b, a).unwrap();
                assert!(fwd > 0.0 && fwd < 1.0);
                assert!((fwd + rev - 1.0).abs() < 1e-12);
            }
        }
        let mut prev = 0.0;
        for i in 0..50 {
            let a = adaptive_alpha(i as f64 * 0.2, 3.0).unwrap();
            assert!(a > prev, "alpha must strictly increase in its first argument");
            prev = a;
        }
    }

    #[test]
    fn capt_total_with_zero_lambda_is_exactly_clean_ce() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 4, 3, 1);
        let parts = capt_loss(&outputs, 0.0, AlphaMode::Adaptive).unwrap();
        assert_eq!(parts.breakdown.total, parts.breakdown.ce_clean);
    }

    #[test]
    fn capt_with_alpha_one_drops_the_train_consistency_term() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 4, 3, 2);
        let parts = capt_loss(&outputs, 100.0, AlphaMode::Fixed(1.0)).unwrap();
        let expected = parts.breakdown.ce_clean + 100.0 * parts.breakdown.l_cons_frz;
        assert_eq!(parts.breakdown.total, expected);
    }

    #[test]
    fn capt_total_matches_independent_recomposition() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 8, 5, 3);
        let parts = capt_loss(&outputs, 100.0, AlphaMode::Adaptive).unwrap();
        let b = parts.breakdown;
        // Independent scalar recomposition of the declared formula.
        let recomposed =
            b.ce_clean + 100.0 * ((1.0 - b.alpha_cons) * b.l_cons_train + b.alpha_cons * b.l_cons_frz);
        assert!((b.total - recomposed).abs() < 1e-12);
        assert!((b.total - b.composed(AblationMask::FULL, 100.0)).abs() < 1e-12);
    }

    #[test]
    fn trades_equals_capt_with_alpha_forced_to_zero() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 6, 4, 4);
        let t = trades_loss(&outputs, 7.5).unwrap();
        let c = capt_loss(&outputs, 7.5, AlphaMode::Fixed(0.0)).unwrap();
        assert_eq!(t.breakdown.total, c.breakdown.total);
        let recomposed = t.breakdown.ce_clean + 7.5 * t.breakdown.l_cons_train;
        assert!((t.breakdown.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn trades_with_zero_lambda_is_clean_ce() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 4, 3, 5);
        let t = trades_loss(&outputs, 0.0).unwrap();
        assert_eq!(t.breakdown.total, t.breakdown.ce_clean);
    }

    #[test]
    fn apt_loss_is_exactly_adversarial_ce() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 5, 4, 6);
        let a = apt_loss(&outputs).unwrap();
        let direct = cross_entropy_logits(outputs.logits_adv, &outputs.labels)
            .unwrap()
            .scalar()
            .unwrap();
        assert_eq!(a.breakdown.total, direct);
        // Equal adversarial and clean logits: the objective reduces to clean CE.
        let tape2 = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let shared = Array::randn(&[4, 3], 1.0, &mut rng);
        let same = BatchOutputs {
            logits_clean: tape2.leaf(shared.clone(), true).unwrap(),
            logits_adv: tape2.leaf(shared.clone(), true).unwrap(),
            logits_frz: tape2.constant(shared).unwrap(),
            labels: vec![0, 1, 2, 0],
        };
        let a2 = apt_loss(&same).unwrap();
        assert_eq!(a2.breakdown.ce_adv, a2.breakdown.ce_clean);
    }

    #[test]
    fn cons_terms_vanish_when_adversarial_equals_clean() {
        let tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let shared = Array::randn(&[4, 3], 1.5, &mut rng);
        let outputs = BatchOutputs {
            logits_clean: tape.leaf(shared.clone(), true).unwrap(),
            logits_adv: tape.leaf(shared.clone(), true).unwrap(),
            logits_frz: tape.constant(shared).unwrap(),
            labels: vec![0, 1, 2, 0],
        };
        let parts = capt_loss(&outputs, 100.0, AlphaMode::Adaptive).unwrap();
        assert!(parts.breakdown.l_cons_train.abs() < 1e-12);
        assert!(parts.breakdown.l_cons_frz.abs() < 1e-12);
    }

    #[test]
    fn tau_rescaling_changes_consistency_values() {
        // No temperature invariance is claimed: doubling tau in both branches
        // moves the KL value.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let raw_a = Array::randn(&[4, 3], 1.0, &mut rng);
        let raw_b = Array::randn(&[4, 3], 1.0, &mut rng);
        let kl_at = |scale: f64| {
            let tape = Tape::new();
            let a = tape
                .constant(raw_a.clone())
                .unwrap()
                .scale(scale)
                .unwrap()
                .softmax()
                .unwrap();
            let b = tape
                .constant(raw_b.clone())
                .unwrap()
                .scale(scale)
                .unwrap()
                .softmax()
                .unwrap();
            cons_train(a, b).unwrap().scalar().unwrap()
        };
        let k1 = kl_at(1.0);
        let k2 = kl_at(0.5);
        assert!((k1 - k2).abs() > 1e-6, "{} vs {}", k1, k2);
    }

    #[test]
    fn frozen_branch_never_carries_gradient() {
        let tape = Tape::new();
        let outputs = random_outputs(&tape, 4, 3, 10);
        let parts = capt_loss(&outputs, 50.0, AlphaMode::Adaptive).unwrap();
        tape.backward(parts.total).unwrap();
        assert!(outputs.logits_frz.grad().is_none());
        assert!(outputs.logits_clean.grad().is_some());
        assert!(outputs.logits_adv.grad().is_some());
    }

    #[test]
    fn gradient_carrying_frozen_logits_are_rejected() {
        let tape = Tape::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let outputs = BatchOutputs {
            logits_clean: tape.leaf(Array::randn(&[2, 3], 1.0, &mut rng), true).unwrap(),
            logits_adv: tape.leaf(Array::randn(&[2, 3], 1.0, &mut rng), true).unwrap(),
            logits_frz: tape.leaf(Array::randn(&[2, 3], 1.0, &mut rng), true).unwrap(),
            labels: vec![0, 1],
        };
        assert!(capt_loss(&outputs, 1.0, AlphaMode::Adaptive).is_err());
    }

    #[test]
    fn hep_prediction_is_parameterless_and_template_sensitive() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let state = crate::encoder::ModelState::init(
            crate::encoder::EncoderConfig::default(),
            0.25,
            &mut rng,
        )
        .unwrap();
        let x = Array::rand_uniform(&[3, state.config.image_numel()], 0.0, 1.0, &mut rng);
        let template = state.config.template_token_ids();
        let classes: Vec<usize> = (0..4).collect();

        // Definition: encode both towers without prompts and apply the head.
        let p1 = hep_predict(&state, &x, &classes, &template).unwrap();
        let by_hand = {
            let tape = Tape::new();
            let binder = crate::encoder::Binder::frozen(&tape);
            let xt = tape.constant(x.clone()).unwrap();
            let zi = crate::encoder::encode_image(&binder, xt, &state, false).unwrap();
            let zt = crate::encoder::encode_text(&binder, &classes, &state, false).unwrap();
            crate::head::class_probs(zi, zt, state.tau).unwrap().value()
        };
        assert!(p1.bit_eq(&by_hand));

        // No parameters move: repeated calls are bit-identical.
        let p2 = hep_predict(&state, &x, &classes, &template).unwrap();
        assert!(p1.bit_eq(&p2));

        // Permuting the template tokens changes the probabilities.
        let mut permuted = template.clone();
        permuted.reverse();
        let p3 = hep_predict(&state, &x, &classes, &permuted).unwrap();
        assert!(p1.max_abs_diff(&p3) > 1e-9, "template permutation left probabilities unchanged");
    }

    #[test]
    fn cons_train_vanishes_for_a_vanishing_attack_budget() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let state = crate::encoder::ModelState::init(
            crate::encoder::EncoderConfig::default(),
            0.25,
            &mut rng,
        )
        .unwrap();
        let x = Array::rand_uniform(&[4, state.config.image_numel()], 0.02, 0.98, &mut rng);
        let labels = vec![0usize, 1, 2, 3];
        let cfg = crate::attack::AttackConfig {
            epsilon: 1e-12,
            step_size: 1e-12,
            steps: 3,
            random_start: true,
            init_zero: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
        };
        let adv = crate::attack::pgd_attack(&x, &labels, 4, &state, &cfg, 9).unwrap();
        let tape = Tape::new();
        let zi_c = tape
            .constant(crate::encoder::image_features(&state, &x, false).unwrap())
            .unwrap();
        let zi_a = tape
            .constant(crate::encoder::image_features(&state, &adv.x_adv, false).unwrap())
            .unwrap();
        let zt = tape
            .constant(crate::encoder::text_features(&state, &[0, 1, 2, 3], false).unwrap())
            .unwrap();
        let p_clean = crate::head::class_probs(zi_c, zt, state.tau).unwrap();
        let p_adv = crate::head::class_probs(zi_a, zt, state.tau).unwrap();
        let kl = cons_train(p_adv, p_clean).unwrap().scalar().unwrap();
        assert!(kl.abs() < 1e-10, "kl {kl}");
        // A real budget on a random model produces a strictly positive value.
        let cfg = crate::attack::AttackConfig::train(8.0 / 255.0);
        let adv = crate::attack::pgd_attack(&x, &labels, 4, &state, &cfg, 9).unwrap();
        let zi_a2 = tape
            .constant(crate::encoder::image_features(&state, &adv.x_adv, false).unwrap())
            .unwrap();
        let p_adv2 = crate::head::class_probs(zi_a2, zt, state.tau).unwrap();
        let kl2 = cons_train(p_adv2, p_clean).unwrap().scalar().unwrap();
        assert!(kl2 > 0.0);
    }

    #[test]
    fn capt_gradient_passes_finite_difference_check() {
        // Gradient w.r.t. the clean logits, which feed CE, the train
        // consistency term and the adaptive weight.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let clean0 = Array::randn(&[3, 4], 1.0, &mut rng);
        let adv0 = Array::randn(&[3, 4], 1.0, &mut rng);
        let frz0 = Array::randn(&[3, 4], 1.0, &mut rng);
        let labels = vec![0usize, 2, 3];
        let err = crate::tensor::grad_check(
            |tape, clean| {
                let outputs = BatchOutputs {
                    logits_clean: clean,
                    logits_adv: tape.leaf(adv0.clone(), true)?,
                    logits_frz: tape.constant(frz0.clone())?,
                    labels: labels.clone(),
                };
                Ok(capt_loss(&outputs, 10.0, AlphaMode::Adaptive)?.total)
            },
            &clean0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {}", err);
    }
}
