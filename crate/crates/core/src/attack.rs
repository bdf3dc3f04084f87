//! Projected gradient descent in pixel space: iterative sign-gradient ascent
//! on an attack objective, with the perturbation projected back into the
//! L-infinity ball after every step and the result clamped to valid pixels.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::array::Array;
use crate::encoder::{encode_image, Binder, ModelState};
use crate::head::{cross_entropy_logits, logits, per_example_ce};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("non-finite attack gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("budget invariant violated: |delta| exceeded epsilon at step {0}")]
    BudgetViolation(usize),
    #[error("range invariant violated: adversarial pixels left [{0}, {1}]")]
    RangeViolation(f64, f64),
    #[error("ascent invariant violated: adversarial loss {adv} < clean loss {clean} for example {example}")]
    AscentViolation { example: usize, clean: f64, adv: f64 },
}

pub type Result<T> = std::result::Result<T, AttackError>;

static INVOCATIONS: AtomicU64 = AtomicU64::new(0);
static BUDGET_CHECKS: AtomicU64 = AtomicU64::new(0);
static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of attack invocations since process start.
pub fn invocation_count() -> u64 {
    INVOCATIONS.load(Ordering::Relaxed)
}

/// Number of per-iteration budget/range checks that ran.
pub fn budget_check_count() -> u64 {
    BUDGET_CHECKS.load(Ordering::Relaxed)
}

/// Number of budget/range violations observed (each also aborts its attack).
pub fn violation_count() -> u64 {
    VIOLATIONS.load(Ordering::Relaxed)
}

/// L-infinity attack parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// Perturbation bound in pixel units, in (0, 1].
    pub epsilon: f64,
    /// Per-step size.
    pub step_size: f64,
    /// Iteration count K.
    pub steps: usize,
    /// Start from a uniform point in the epsilon ball.
    pub random_start: bool,
    /// Evaluation sanity mode: start at zero and verify per-example ascent.
    pub init_zero: bool,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl AttackConfig {
    /// Training attack: 3 steps at 2eps/3 with random start.
    pub fn train(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: 2.0 * epsilon / 3.0,
            steps: 3,
            random_start: true,
            init_zero: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }

    /// Evaluation attack: 100 steps at eps/4 with random start.
    pub fn eval(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 4.0,
            steps: 100,
            random_start: true,
            init_zero: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(AttackError::InvalidConfig(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if self.step_size <= 0.0 {
            return Err(AttackError::InvalidConfig(format!("step size {} <= 0", self.step_size)));
        }
        if self.steps == 0 {
            return Err(AttackError::InvalidConfig("step count must be >= 1".into()));
        }
        if !(self.clamp_min < self.clamp_max) {
            return Err(AttackError::InvalidConfig("empty clamp range".into()));
        }
        Ok(())
    }
}

/// Attack output: perturbed batch, the perturbation itself, and the attack
/// objective observed at the start of each step.
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub x_adv: Array,
    pub delta: Array,
    pub loss_trace: Vec<f64>,
}

/// Attack objective for one evaluation point: the scalar to ascend plus the
/// per-example losses behind it.
pub struct AttackLoss<'t> {
    pub mean: Tensor<'t>,
    pub per_example: Vec<f64>,
}

/// Clip a perturbation to `[-epsilon, epsilon]` element-wise. Entries already
/// inside the ball are returned bit-exactly.
pub fn project_linf(delta: &mut Array, epsilon: f64) {
    for v in delta.data_mut() {
        *v = v.clamp(-epsilon, epsilon);
    }
}

fn check_budget(delta: &Array, epsilon: f64, step: usize) -> Result<()> {
    BUDGET_CHECKS.fetch_add(1, Ordering::Relaxed);
    if delta.data().iter().any(|v| v.abs() > epsilon + 1e-12) {
        VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        return Err(AttackError::BudgetViolation(step));
    }
    Ok(())
}

/// Run PGD against an arbitrary objective builder. The builder receives a
/// fresh tape and the current adversarial batch as a gradient-carrying leaf
/// and returns the attack objective; all other inputs it binds must be
/// constants, so gradients flow to the pixels only.
pub fn pgd_attack_with<F>(x: &Array, cfg: &AttackConfig, seed: u64, build: F) -> Result<AdvBatch>
where
    F: for<'a> Fn(&'a Tape, Tensor<'a>) -> Result<AttackLoss<'a>>,
{
    cfg.validate()?;
    if !x.is_finite() || x.data().iter().any(|&p| p < cfg.clamp_min || p > cfg.clamp_max) {
        return Err(AttackError::InvalidConfig("input pixels outside the clamp range".into()));
    }
    INVOCATIONS.fetch_add(1, Ordering::Relaxed);

    let mut delta = if cfg.init_zero || !cfg.random_start {
        Array::zeros(x.shape())
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array::rand_uniform(x.shape(), -cfg.epsilon, cfg.epsilon, &mut rng)
    };
    project_linf(&mut delta, cfg.epsilon);
    check_budget(&delta, cfg.epsilon, 0)?;

    let perturbed = |delta: &Array| {
        let mut p = x.clone();
        for (v, d) in p.data_mut().iter_mut().zip(delta.data()) {
            *v = (*v + d).clamp(cfg.clamp_min, cfg.clamp_max);
        }
        p
    };

    let mut clean_losses: Option<Vec<f64>> = None;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let x_step = perturbed(&delta);
        let tape = Tape::new();
        let leaf = tape.leaf(x_step, true)?;
        let loss = build(&tape, leaf)?;
        trace.push(loss.mean.scalar()?);
        if step == 1 && cfg.init_zero {
            clean_losses = Some(loss.per_example.clone());
        }
        tape.backward(loss.mean)?;
        let grad = leaf.grad().ok_or(AttackError::NonFiniteGradient(step))?;
        if !grad.is_finite() {
            return Err(AttackError::NonFiniteGradient(step));
        }
        for (d, g) in delta.data_mut().iter_mut().zip(grad.data()) {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d += cfg.step_size * s;
        }
        project_linf(&mut delta, cfg.epsilon);
        check_budget(&delta, cfg.epsilon, step)?;
    }

    let x_adv = perturbed(&delta);
    if x_adv.data().iter().any(|&p| p < cfg.clamp_min || p > cfg.clamp_max) {
        VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        return Err(AttackError::RangeViolation(cfg.clamp_min, cfg.clamp_max));
    }

    if let Some(clean) = clean_losses {
        // Ascent sanity: starting from the clean point, the attack must not
        // end below it for any example.
        let tape = Tape::new();
        let leaf = tape.leaf(x_adv.clone(), false)?;
        let final_loss = build(&tape, leaf)?;
        for (i, (&c, &a)) in clean.iter().zip(&final_loss.per_example).enumerate() {
            if a < c - 1e-9 {
                return Err(AttackError::AscentViolation { example: i, clean: c, adv: a });
            }
        }
    }

    Ok(AdvBatch { x_adv, delta, loss_trace: trace })
}

/// PGD against the model's cross-entropy through its (possibly prompted)
/// text features, as used for training and evaluation. Text features are
/// computed once up front; prompts and backbone stay gradient-free.
pub fn pgd_attack(
    x: &Array,
    labels: &[usize],
    num_classes: usize,
    state: &ModelState,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AdvBatch> {
    let class_ids: Vec<usize> = (0..num_classes).collect();
    let use_prompts = state.prompts.is_some();
    let z_txt = crate::encoder::text_features(state, &class_ids, use_prompts)?;
    pgd_attack_with(x, cfg, seed, |tape, x_t| {
        let binder = Binder::frozen(tape);
        let z_img = encode_image(&binder, x_t, state, use_prompts)?;
        let zt = tape.constant(z_txt.clone())?;
        let lg = logits(z_img, zt, state.tau)?;
        let per_example = per_example_ce(&lg.value(), labels);
        let mean = cross_entropy_logits(lg, labels)?;
        Ok(AttackLoss { mean, per_example })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear_loss<'a>(
        tape: &'a Tape,
        x: Tensor<'a>,
        w: &Array,
    ) -> super::Result<AttackLoss<'a>> {
        let wt = tape.constant(w.clone())?;
        let prod = x.mul(wt)?;
        let mean = prod.sum_all()?;
        let per = vec![prod.value().data().iter().sum::<f64>()];
        Ok(AttackLoss { mean, per_example: per })
    }

    #[test]
    fn one_step_on_linear_loss_hits_the_corner_exactly() {
        // For loss w.x with alpha >= 2 eps, a single zero-init step lands on
        // delta = eps * sign(w), the analytic maximizer over the ball.
        let dim = 8;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w = Array::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0f64)).collect());
        assert!(w.data().iter().all(|&v| v != 0.0));
        let x = Array::full(&[1, dim], 0.5);
        let eps = 0.05;
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: 2.0 * eps,
            steps: 1,
            random_start: false,
            init_zero: true,
            clamp_min: 0.0,
            clamp_max: 1.0,
        };
        let w2 = w.clone();
        let out = pgd_attack_with(&x, &cfg, 0, move |t, xt| {
            linear_loss(t, xt.reshape(&[dim])?, &w2)
        })
        .unwrap();
        let expected: Vec<f64> =
            w.data().iter().map(|&v| if v > 0.0 { eps } else { -eps }).collect();
        assert_eq!(out.delta.data(), &expected[..]);

        // Brute force over all 2^dim sign corners confirms the maximizer.
        let mut best = f64::NEG_INFINITY;
        let mut best_corner = vec![0.0; dim];
        for mask in 0..(1u32 << dim) {
            let corner: Vec<f64> =
                (0..dim).map(|i| if mask >> i & 1 == 1 { eps } else { -eps }).collect();
            let score: f64 = corner.iter().zip(w.data()).map(|(d, wv)| d * wv).sum();
            if score > best {
                best = score;
                best_corner = corner;
            }
        }
        assert_eq!(out.delta.data(), &best_corner[..]);
    }

    #[test]
    fn vanishing_epsilon_leaves_the_input_unchanged() {
        let x = Array::full(&[1, 4], 0.25);
        let w = Array::from_vec(vec![1.0, -1.0, 2.0, -2.0]);
        let cfg = AttackConfig {
            epsilon: 1e-12,
            step_size: 1e-12,
            steps: 5,
            random_start: true,
            init_zero: false,
            clamp_min: 0.0,
            clamp_max: 1.0,
        };
        let out =
            pgd_attack_with(&x, &cfg, 9, move |t, xt| linear_loss(t, xt.reshape(&[4])?, &w))
                .unwrap();
        assert!(out.x_adv.max_abs_diff(&x) <= 2e-12);
    }

    #[test]
    fn loss_trace_is_nondecreasing_on_a_convex_objective() {
        // Maximizing the convex quadratic sum((x - c)^2) with sign steps
        // can never decrease it.
        let x = Array::full(&[1, 6], 0.5);
        let c = Array::full(&[6], 0.52);
        let cfg = AttackConfig {
            epsilon: 0.1,
            step_size: 0.01,
            steps: 8,
            random_start: false,
            init_zero: true,
            clamp_min: 0.0,
            clamp_max: 1.0,
        };
        let out = pgd_attack_with(&x, &cfg, 0, move |t, xt| {
            let flat = xt.reshape(&[6])?;
            let ct = t.constant(c.clone())?;
            let diff = flat.sub(ct)?;
            let mean = diff.mul(diff)?.sum_all()?;
            let per = vec![mean.scalar()?];
            Ok(AttackLoss { mean, per_example: per })
        })
        .unwrap();
        assert_eq!(out.loss_trace.len(), 8);
        for w in out.loss_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-15, "trace decreased: {:?}", out.loss_trace);
        }
    }

    #[test]
    fn fixed_seed_reproduces_delta_bit_exactly() {
        let x = Array::full(&[2, 4], 0.5);
        let w = Array::from_vec(vec![0.3, -0.2, 0.7, -0.9]);
        let mut cfg = AttackConfig::train(0.03);
        // One step keeps the random start visible in the final perturbation.
        cfg.steps = 1;
        cfg.step_size = 0.005;
        let run = |seed| {
            let w = w.clone();
            pgd_attack_with(&x, &cfg, seed, move |t, xt| {
                let flat = xt.reshape(&[8])?;
                let wt = t.constant(Array::from_vec(w.data().repeat(2)))?;
                let prod = flat.mul(wt)?;
                let mean = prod.sum_all()?;
                Ok(AttackLoss { mean, per_example: vec![0.0, 0.0] })
            })
            .unwrap()
        };
        assert!(run(42).delta.bit_eq(&run(42).delta));
        assert!(!run(42).delta.bit_eq(&run(43).delta));
    }

    #[test]
    fn adv_batch_satisfies_its_invariants() {
        let x = Array::new(vec![1, 4], vec![0.01, 0.5, 0.99, 0.7]).unwrap();
        let w = Array::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let cfg = AttackConfig::train(0.05);
        let out =
            pgd_attack_with(&x, &cfg, 3, move |t, xt| linear_loss(t, xt.reshape(&[4])?, &w))
                .unwrap();
        assert!(out.delta.data().iter().all(|d| d.abs() <= cfg.epsilon + 1e-12));
        assert!(out.x_adv.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        // x_adv is exactly clamp(x + delta).
        for ((&xa, &xv), &dv) in out.x_adv.data().iter().zip(x.data()).zip(out.delta.data()) {
            assert_eq!(xa.to_bits(), (xv + dv).clamp(0.0, 1.0).to_bits());
        }
        assert_eq!(out.loss_trace.len(), cfg.steps);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig::train(0.0).validate().is_err());
        assert!(AttackConfig::train(-0.1).validate().is_err());
        let mut cfg = AttackConfig::train(0.1);
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn project_keeps_interior_entries_bit_exact() {
        let mut d = Array::from_vec(vec![0.0, 0.005, -0.005, 0.02, -0.3]);
        let orig = d.clone();
        project_linf(&mut d, 0.01);
        assert_eq!(d.data()[0].to_bits(), orig.data()[0].to_bits());
        assert_eq!(d.data()[1].to_bits(), orig.data()[1].to_bits());
        assert_eq!(d.data()[2].to_bits(), orig.data()[2].to_bits());
        assert_eq!(d.data()[3], 0.01);
        assert_eq!(d.data()[4], -0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn project_matches_scalar_clamp_oracle(values in prop::collection::vec(-1.0f64..1.0, 1..40), eps in 0.001f64..0.5) {
            let mut d = Array::from_vec(values.clone());
            project_linf(&mut d, eps);
            for (out, orig) in d.data().iter().zip(&values) {
                let expected = if *orig > eps { eps } else if *orig < -eps { -eps } else { *orig };
                prop_assert_eq!(out.to_bits(), expected.to_bits());
            }
        }
    }
}
