//! Finite-difference verification suite: every autodiff primitive against
//! central differences, then every tuning objective's gradient with respect
//! to its learnable parameters on a two-class toy model.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::array::Array;
use crate::attack::AttackConfig;
use crate::encoder::{
    encode_image, encode_text, Binder, ContextMode, EncoderConfig, LinearHead, ModelState, Param,
    PromptSet, VisualPrompt,
};
use crate::head::cross_entropy_logits;
use crate::objectives::{
    ablation_loss, avp_loss, paft_loss, AblationMask, AlphaMode, BatchOutputs,
};
use crate::tensor::{concat, grad_check, Result, Tape, Tensor};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const OBJECTIVE_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn randn(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array::randn(shape, 1.0, &mut rng)
}

/// Check every forward primitive's gradient against central differences.
pub fn primitive_suite() -> Result<Vec<CheckResult>> {
    type Check = Box<dyn for<'a> Fn(&'a Tape, Tensor<'a>) -> Result<Tensor<'a>>>;
    let point = randn(&[3, 4], 0xfd);
    let cases: Vec<(&str, Check)> = vec![
        ("add", Box::new(|t, x| x.add(t.constant(randn(&[3, 4], 1))?)?.mul(x)?.sum_all())),
        ("sub", Box::new(|t, x| x.sub(t.constant(randn(&[3, 4], 2))?)?.mul(x)?.sum_all())),
        ("mul", Box::new(|t, x| x.mul(t.constant(randn(&[3, 4], 3))?)?.mul(x)?.sum_all())),
        ("scalar_mul", Box::new(|_t, x| x.scale(1.7)?.mul(x)?.sum_all())),
        (
            "matmul",
            Box::new(|t, x| x.matmul(t.constant(randn(&[4, 5], 4))?)?.exp()?.sum_all()),
        ),
        ("transpose", Box::new(|_t, x| x.t()?.exp()?.sum_all())),
        ("reshape", Box::new(|_t, x| x.reshape(&[2, 6])?.softmax()?.mul(x.reshape(&[2, 6])?)?.sum_all())),
        (
            "concat_split",
            Box::new(|_t, x| {
                let a = x.narrow(1, 0, 2)?;
                let b = x.narrow(1, 2, 2)?;
                concat(&[b, a], 1)?.exp()?.sum_all()
            }),
        ),
        ("exp", Box::new(|_t, x| x.exp()?.sum_all())),
        ("log", Box::new(|_t, x| x.add_scalar(5.0)?.log()?.sum_all())),
        ("relu", Box::new(|_t, x| x.relu()?.mul(x)?.sum_all())),
        ("gelu", Box::new(|_t, x| x.gelu()?.sum_all())),
        (
            "layer_norm",
            Box::new(|t, x| {
                let g = t.constant(randn(&[4], 5))?;
                let b = t.constant(randn(&[4], 6))?;
                x.layer_norm(g, b, 1e-5)?.mul(x)?.sum_all()
            }),
        ),
        ("softmax", Box::new(|_t, x| x.softmax()?.mul(x)?.sum_all())),
        ("log_softmax", Box::new(|_t, x| x.log_softmax()?.mul(x)?.sum_all())),
        ("l2_normalize", Box::new(|_t, x| x.l2_normalize()?.mul(x)?.sum_all())),
        ("mean", Box::new(|_t, x| x.exp()?.mean_all())),
        ("sum", Box::new(|_t, x| x.mul(x)?.sum_all())),
        ("sign", Box::new(|_t, x| x.sign()?.mul(x)?.sum_all())),
        ("clamp", Box::new(|_t, x| x.clamp(-0.4, 0.4)?.mul(x)?.sum_all())),
        (
            "minimum",
            Box::new(|t, x| x.minimum(t.constant(randn(&[3, 4], 7))?)?.mul(x)?.sum_all()),
        ),
        (
            "maximum",
            Box::new(|t, x| x.maximum(t.constant(randn(&[3, 4], 8))?)?.mul(x)?.sum_all()),
        ),
        ("sigmoid", Box::new(|_t, x| x.sigmoid()?.mul(x)?.sum_all())),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, f) in cases {
        let err = grad_check(&f, &point, FD_STEP)?;
        out.push(CheckResult { name: name.to_string(), max_rel_err: err, tolerance: PRIMITIVE_TOL });
    }
    Ok(out)
}

/// Two-class toy fixture shared by the objective checks.
pub struct ToyFixture {
    pub state: ModelState,
    pub frozen: ModelState,
    pub x: Array,
    pub x_adv: Array,
    pub labels: Vec<usize>,
}

pub fn toy_fixture(seed: u64) -> Result<ToyFixture> {
    let cfg = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        text_vocab_size: 16,
        text_seq_len: 4,
        prompt_depth: 1,
        prompt_len: 1,
        text_context_len: 2,
        context_mode: ContextMode::Unified,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = ModelState::init(cfg.clone(), 0.5, &mut rng)?;
    let frozen = state.frozen_copy();
    state.prompts = Some(PromptSet::init(&cfg, cfg.prompt_depth, ContextMode::Unified, 2, &mut rng));
    state.visual_prompt = Some(VisualPrompt::zeros(&cfg, 1));
    // Nonzero starting points exercise every gradient path.
    state.visual_prompt.as_mut().unwrap().phi.value =
        Array::randn(&[cfg.image_numel()], 0.05, &mut rng);
    state.linear_head = Some(LinearHead::zeros(cfg.embed_dim, 2));
    state.linear_head.as_mut().unwrap().weight.value =
        Array::randn(&[cfg.embed_dim, 2], 0.2, &mut rng);
    state.linear_head.as_mut().unwrap().bias.value = Array::randn(&[2], 0.2, &mut rng);

    let batch = 4;
    let x = Array::rand_uniform(&[batch, cfg.image_numel()], 0.05, 0.95, &mut rng);
    let mut x_adv = x.clone();
    let eps = AttackConfig::train(8.0 / 255.0).epsilon;
    for v in x_adv.data_mut() {
        use rand::Rng;
        *v = (*v + rng.gen_range(-eps..eps)).clamp(0.0, 1.0);
    }
    let labels = vec![0usize, 1, 0, 1];
    Ok(ToyFixture { state, frozen, x, x_adv, labels })
}

fn consistency_outputs<'t>(
    tape: &'t Tape,
    binder: &Binder<'t>,
    fx: &ToyFixture,
) -> Result<BatchOutputs<'t>> {
    let z_txt = encode_text(binder, &[0, 1], &fx.state, true)?;
    let xt = tape.constant(fx.x.clone())?;
    let z_clean = encode_image(binder, xt, &fx.state, true)?;
    let xa = tape.constant(fx.x_adv.clone())?;
    let z_adv = encode_image(binder, xa, &fx.state, true)?;
    let frz_logits = {
        let zf = crate::encoder::image_features(&fx.frozen, &fx.x, false)?;
        let zt = crate::encoder::text_features(&fx.frozen, &[0, 1], false)?;
        let t2 = Tape::new();
        let a = t2.constant(zf)?;
        let b = t2.constant(zt)?;
        a.matmul(b.t()?)?.scale(1.0 / fx.frozen.tau)?.value()
    };
    Ok(BatchOutputs {
        logits_clean: crate::head::logits(z_clean, z_txt, fx.state.tau)?,
        logits_adv: crate::head::logits(z_adv, z_txt, fx.state.tau)?,
        logits_frz: tape.constant(frz_logits)?,
        labels: fx.labels.clone(),
    })
}

/// Check one objective's gradient with respect to one named parameter by
/// letting the gradient checker own that parameter's leaf.
fn check_param<F>(name: &str, fx: &ToyFixture, param: &Param, build: F) -> Result<CheckResult>
where
    F: for<'a> Fn(&'a Tape, &Binder<'a>, &ToyFixture) -> Result<Tensor<'a>>,
{
    let err = grad_check(
        |tape, leaf| {
            let binder = Binder::new(tape, fx.state.learnable_ids());
            binder.override_param(param, leaf);
            build(tape, &binder, fx)
        },
        &param.value,
        FD_STEP,
    )?;
    Ok(CheckResult { name: name.to_string(), max_rel_err: err, tolerance: OBJECTIVE_TOL })
}

/// Check every objective against finite differences on the toy fixture.
pub fn objective_suite() -> Result<Vec<CheckResult>> {
    let fx = toy_fixture(0x0b9)?;
    let prompts = fx.state.prompts.as_ref().expect("fixture prompts");
    let mut out = Vec::new();

    // A type ascription helper keeps the higher-ranked closure bounds happy.
    fn hr<F>(f: F) -> F
    where
        F: for<'a> Fn(&'a Tape, &Binder<'a>, &ToyFixture) -> Result<Tensor<'a>>,
    {
        f
    }
    let capt = hr(|tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        let outputs = consistency_outputs(tape, binder, fx)?;
        Ok(ablation_loss(&outputs, 5.0, AlphaMode::Adaptive, AblationMask::FULL)?.total)
    });
    out.push(check_param("capt/visual_prompt", &fx, &prompts.visual[0], &capt)?);
    out.push(check_param("capt/textual_prompt", &fx, &prompts.textual[0], &capt)?);
    out.push(check_param("capt/text_context", &fx, &prompts.context, &capt)?);

    let trades = hr(|tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        let outputs = consistency_outputs(tape, binder, fx)?;
        Ok(ablation_loss(
            &outputs,
            5.0,
            AlphaMode::Fixed(0.0),
            AblationMask {
                use_ce_adv: false,
                use_ce_clean: true,
                use_cons_train: true,
                use_cons_frz: false,
            },
        )?
        .total)
    });
    out.push(check_param("trades/text_context", &fx, &prompts.context, &trades)?);

    let apt = hr(|tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        let outputs = consistency_outputs(tape, binder, fx)?;
        Ok(ablation_loss(&outputs, 0.0, AlphaMode::Fixed(0.0), AblationMask::CE_ADV_ONLY)?.total)
    });
    out.push(check_param("apt/text_context", &fx, &prompts.context, &apt)?);

    let avp = hr(|tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        let zt = {
            let z = crate::encoder::text_features(&fx.frozen, &[0, 1], false)?;
            tape.constant(z)?
        };
        let delta = {
            let mut d = fx.x_adv.clone();
            for (dv, xv) in d.data_mut().iter_mut().zip(fx.x.data()) {
                *dv -= xv;
            }
            d
        };
        Ok(avp_loss(binder, &fx.state, zt, &fx.x, &delta, &fx.labels)?.total)
    });
    out.push(check_param(
        "avp/phi",
        &fx,
        &fx.state.visual_prompt.as_ref().expect("fixture phi").phi,
        &avp,
    )?);

    let paft = hr(|_tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        Ok(paft_loss(binder, &fx.state, &fx.x_adv, &fx.labels)?.total)
    });
    let head = fx.state.linear_head.as_ref().expect("fixture head");
    out.push(check_param("paft/head_weight", &fx, &head.weight, &paft)?);
    out.push(check_param("paft/head_bias", &fx, &head.bias, &paft)?);

    // The full composite as one function of a prompt block, through the
    // probability head and cross-entropy.
    let full_ce = hr(|tape: &Tape, binder: &Binder<'_>, fx: &ToyFixture| {
        let z_txt = encode_text(binder, &[0, 1], &fx.state, true)?;
        let xt = tape.constant(fx.x.clone())?;
        let z = encode_image(binder, xt, &fx.state, true)?;
        cross_entropy_logits(crate::head::logits(z, z_txt, fx.state.tau)?, &fx.labels)
    });
    out.push(check_param("clean_ce/visual_prompt", &fx, &prompts.visual[0], &full_ce)?);

    Ok(out)
}

/// The whole verification suite in one pass.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite()?;
    out.extend(objective_suite()?);
    Ok(out)
}
