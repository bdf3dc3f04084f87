//! Miniature two-tower model: a patch-transformer image encoder and a
//! token-transformer text encoder sharing an embedding space, with deep
//! multi-modal prompt injection. Learnable prompt tokens are appended after
//! the patch/word tokens; for layers up to the prompt depth the prompt
//! positions of the previous layer's output are discarded and replaced by a
//! fresh learnable block, beyond the depth they propagate.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::array::Array;
use crate::tensor::{concat, Result, Tape, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

/// Prompt token initialization scale.
pub const PROMPT_INIT_STD: f64 = 0.02;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named parameter value with a process-unique identity, so one forward
/// pass binds each parameter to exactly one tape leaf.
#[derive(Debug, Clone)]
pub struct Param {
    id: u64,
    pub value: Array,
}

impl Param {
    pub fn new(value: Array) -> Self {
        Self { id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed), value }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

/// Per-tape cache binding parameters to leaves. Parameters listed in
/// `grad_ids` become gradient-carrying leaves; everything else enters the
/// tape as a constant.
pub struct Binder<'t> {
    tape: &'t Tape,
    grad_ids: HashSet<u64>,
    bound: RefCell<HashMap<u64, Tensor<'t>>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, grad_ids: HashSet<u64>) -> Self {
        Self { tape, grad_ids, bound: RefCell::new(HashMap::new()) }
    }

    pub fn frozen(tape: &'t Tape) -> Self {
        Self::new(tape, HashSet::new())
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, p: &Param) -> Result<Tensor<'t>> {
        if let Some(t) = self.bound.borrow().get(&p.id) {
            return Ok(*t);
        }
        let t = self.tape.leaf(p.value.clone(), self.grad_ids.contains(&p.id))?;
        self.bound.borrow_mut().insert(p.id, t);
        Ok(t)
    }

    /// The leaf a parameter was bound to, if it entered this tape.
    pub fn leaf_of(&self, p: &Param) -> Option<Tensor<'t>> {
        self.bound.borrow().get(&p.id).copied()
    }

    /// Pre-bind a parameter to an existing tensor (e.g. a leaf owned by a
    /// gradient checker). Must be called before the first forward pass.
    pub fn override_param(&self, p: &Param, t: Tensor<'t>) {
        self.bound.borrow_mut().insert(p.id, t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ContextMode {
    Unified,
    ClassSpecific,
}

/// Architecture hyper-parameters for both towers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub text_vocab_size: usize,
    pub text_seq_len: usize,
    /// Number of transformer layers receiving fresh prompt blocks (J).
    pub prompt_depth: usize,
    /// Learnable tokens per prompt block (b).
    pub prompt_len: usize,
    /// Learnable text context length (m).
    pub text_context_len: usize,
    pub context_mode: ContextMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 2,
            text_vocab_size: 32,
            text_seq_len: 8,
            prompt_depth: 2,
            prompt_len: 2,
            text_context_len: 4,
            context_mode: ContextMode::Unified,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(TensorError::InvalidArg { op: "EncoderConfig", detail });
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.prompt_depth < 1 || self.prompt_depth > self.num_layers {
            return fail(format!(
                "prompt_depth {} outside 1..={}",
                self.prompt_depth, self.num_layers
            ));
        }
        if self.prompt_len < 1 || self.text_context_len < 1 {
            return fail("prompt_len and text_context_len must be >= 1".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.text_context_len + 1 > self.text_seq_len {
            return fail(format!(
                "context length {} + class token exceeds text_seq_len {}",
                self.text_context_len, self.text_seq_len
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Flat index map extracting patches from a (channels, H, W) image:
    /// destination patch vectors are (c, dy, dx)-major.
    pub fn patch_index_map(&self) -> Vec<usize> {
        let (h, p, c) = (self.image_size, self.patch_size, self.channels);
        let grid = h / p;
        let mut map = Vec::with_capacity(self.num_patches() * self.patch_dim());
        for py in 0..grid {
            for px in 0..grid {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            map.push(ch * h * h + (py * p + dy) * h + (px * p + dx));
                        }
                    }
                }
            }
        }
        map
    }

    /// Token ids of the fixed hand-engineered template (length m).
    pub fn template_token_ids(&self) -> Vec<usize> {
        (1..=self.text_context_len).collect()
    }

    /// Vocabulary id of a class token.
    pub fn class_token_id(&self, class: usize) -> usize {
        1 + self.text_context_len + class
    }

    pub fn max_classes(&self) -> usize {
        self.text_vocab_size - 1 - self.text_context_len
    }
}

/// Learnable context selector: one shared row block, or one per class.
#[derive(Debug, Clone)]
pub struct PromptSet {
    /// Fresh visual prompt blocks, one per injected layer (each b×d).
    pub visual: Vec<Param>,
    /// Fresh textual prompt blocks, one per injected layer (each b×d).
    pub textual: Vec<Param>,
    /// Text context: m×d (unified) or C×m×d (class-specific).
    pub context: Param,
    pub context_mode: ContextMode,
}

impl PromptSet {
    /// Initialize prompts with i.i.d. normal(0, 0.02) entries. `depth` may be
    /// zero for text-context-only tuning.
    pub fn init<R: Rng>(
        cfg: &EncoderConfig,
        depth: usize,
        context_mode: ContextMode,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let (b, d, m) = (cfg.prompt_len, cfg.embed_dim, cfg.text_context_len);
        let visual =
            (0..depth).map(|_| Param::new(Array::randn(&[b, d], PROMPT_INIT_STD, rng))).collect();
        let textual =
            (0..depth).map(|_| Param::new(Array::randn(&[b, d], PROMPT_INIT_STD, rng))).collect();
        let context = match context_mode {
            ContextMode::Unified => Param::new(Array::randn(&[m, d], PROMPT_INIT_STD, rng)),
            ContextMode::ClassSpecific => {
                Param::new(Array::randn(&[num_classes, m, d], PROMPT_INIT_STD, rng))
            }
        };
        Self { visual, textual, context, context_mode }
    }

    pub fn depth(&self) -> usize {
        self.visual.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.visual.iter().chain(self.textual.iter()).collect();
        out.push(&self.context);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> =
            self.visual.iter_mut().chain(self.textual.iter_mut()).collect();
        out.push(&mut self.context);
        out
    }
}

/// Additive image-space visual prompt restricted to a border mask.
#[derive(Debug, Clone)]
pub struct VisualPrompt {
    pub phi: Param,
    pub border: usize,
    mask: Array,
}

impl VisualPrompt {
    pub fn zeros(cfg: &EncoderConfig, border: usize) -> Self {
        let n = cfg.image_numel();
        let h = cfg.image_size;
        let mut mask = Array::zeros(&[n]);
        for c in 0..cfg.channels {
            for y in 0..h {
                for x in 0..h {
                    let on_border =
                        y < border || x < border || y >= h - border || x >= h - border;
                    if on_border {
                        mask.data_mut()[c * h * h + y * h + x] = 1.0;
                    }
                }
            }
        }
        Self { phi: Param::new(Array::zeros(&[n])), border, mask }
    }

    pub fn mask(&self) -> &Array {
        &self.mask
    }
}

/// Linear probe on top of the frozen image features.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Param,
    pub bias: Param,
}

impl LinearHead {
    pub fn zeros(embed_dim: usize, num_classes: usize) -> Self {
        Self {
            weight: Param::new(Array::zeros(&[embed_dim, num_classes])),
            bias: Param::new(Array::zeros(&[num_classes])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Param,
    pub ln1_b: Param,
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln2_g: Param,
    pub ln2_b: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl BlockParams {
    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        // Fan-in scaled init keeps the residual updates visible at small d.
        let lin = |rng: &mut R, i: usize, o: usize| {
            Param::new(Array::randn(&[i, o], (i as f64).powf(-0.5), rng))
        };
        Self {
            ln1_g: Param::new(Array::ones(&[d])),
            ln1_b: Param::new(Array::zeros(&[d])),
            wq: lin(rng, d, d),
            bq: Param::new(Array::zeros(&[d])),
            wk: lin(rng, d, d),
            bk: Param::new(Array::zeros(&[d])),
            wv: lin(rng, d, d),
            bv: Param::new(Array::zeros(&[d])),
            wo: lin(rng, d, d),
            bo: Param::new(Array::zeros(&[d])),
            ln2_g: Param::new(Array::ones(&[d])),
            ln2_b: Param::new(Array::zeros(&[d])),
            w1: lin(rng, d, 4 * d),
            b1: Param::new(Array::zeros(&[4 * d])),
            w2: lin(rng, 4 * d, d),
            b2: Param::new(Array::zeros(&[d])),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Param)> {
        vec![
            (format!("{prefix}.ln1_g"), &self.ln1_g),
            (format!("{prefix}.ln1_b"), &self.ln1_b),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.bq"), &self.bq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.bk"), &self.bk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.bv"), &self.bv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.bo"), &self.bo),
            (format!("{prefix}.ln2_g"), &self.ln2_g),
            (format!("{prefix}.ln2_b"), &self.ln2_b),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        vec![
            (format!("{prefix}.ln1_g"), &mut self.ln1_g),
            (format!("{prefix}.ln1_b"), &mut self.ln1_b),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.bq"), &mut self.bq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.bk"), &mut self.bk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.bv"), &mut self.bv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.bo"), &mut self.bo),
            (format!("{prefix}.ln2_g"), &mut self.ln2_g),
            (format!("{prefix}.ln2_b"), &mut self.ln2_b),
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
        ]
    }
}

/// All backbone parameters for both towers.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub patch_w: Param,
    pub patch_b: Param,
    pub cls: Param,
    pub pos_img: Param,
    pub img_blocks: Vec<BlockParams>,
    pub ln_img_g: Param,
    pub ln_img_b: Param,
    pub proj_img: Param,
    pub tok_emb: Param,
    pub pos_txt: Param,
    pub txt_blocks: Vec<BlockParams>,
    pub ln_txt_g: Param,
    pub ln_txt_b: Param,
    pub proj_txt: Param,
}

impl Backbone {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let d_scale = (d as f64).powf(-0.5);
        Self {
            patch_w: Param::new(Array::randn(
                &[cfg.patch_dim(), d],
                (cfg.patch_dim() as f64).powf(-0.5),
                rng,
            )),
            patch_b: Param::new(Array::zeros(&[d])),
            cls: Param::new(Array::randn(&[1, d], 0.1, rng)),
            pos_img: Param::new(Array::randn(&[cfg.num_patches() + 1, d], 0.1, rng)),
            img_blocks: (0..cfg.num_layers).map(|_| BlockParams::init(d, rng)).collect(),
            ln_img_g: Param::new(Array::ones(&[d])),
            ln_img_b: Param::new(Array::zeros(&[d])),
            proj_img: Param::new(Array::randn(&[d, d], d_scale, rng)),
            tok_emb: Param::new(Array::randn(&[cfg.text_vocab_size, d], 0.1, rng)),
            pos_txt: Param::new(Array::randn(&[cfg.text_seq_len, d], 0.1, rng)),
            txt_blocks: (0..cfg.num_layers).map(|_| BlockParams::init(d, rng)).collect(),
            ln_txt_g: Param::new(Array::ones(&[d])),
            ln_txt_b: Param::new(Array::zeros(&[d])),
            proj_txt: Param::new(Array::randn(&[d, d], d_scale, rng)),
        }
    }

    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos_img".to_string(), &self.pos_img),
        ];
        for (i, b) in self.img_blocks.iter().enumerate() {
            out.extend(b.named(&format!("img.{i}")));
        }
        out.push(("ln_img_g".to_string(), &self.ln_img_g));
        out.push(("ln_img_b".to_string(), &self.ln_img_b));
        out.push(("proj_img".to_string(), &self.proj_img));
        out.push(("tok_emb".to_string(), &self.tok_emb));
        out.push(("pos_txt".to_string(), &self.pos_txt));
        for (i, b) in self.txt_blocks.iter().enumerate() {
            out.extend(b.named(&format!("txt.{i}")));
        }
        out.push(("ln_txt_g".to_string(), &self.ln_txt_g));
        out.push(("ln_txt_b".to_string(), &self.ln_txt_b));
        out.push(("proj_txt".to_string(), &self.proj_txt));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
            ("cls".to_string(), &mut self.cls),
            ("pos_img".to_string(), &mut self.pos_img),
        ];
        for (i, b) in self.img_blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("img.{i}")));
        }
        out.push(("ln_img_g".to_string(), &mut self.ln_img_g));
        out.push(("ln_img_b".to_string(), &mut self.ln_img_b));
        out.push(("proj_img".to_string(), &mut self.proj_img));
        out.push(("tok_emb".to_string(), &mut self.tok_emb));
        out.push(("pos_txt".to_string(), &mut self.pos_txt));
        for (i, b) in self.txt_blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("txt.{i}")));
        }
        out.push(("ln_txt_g".to_string(), &mut self.ln_txt_g));
        out.push(("ln_txt_b".to_string(), &mut self.ln_txt_b));
        out.push(("proj_txt".to_string(), &mut self.proj_txt));
        out
    }
}

/// Frozen backbone parameters plus whatever is learnable for the active
/// tuning method. The backbone values are bit-identical before and after any
/// tuning run; only the extras move.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub tau: f64,
    pub backbone: Backbone,
    pub prompts: Option<PromptSet>,
    pub visual_prompt: Option<VisualPrompt>,
    pub linear_head: Option<LinearHead>,
}

impl ModelState {
    pub fn init<R: Rng>(cfg: EncoderConfig, tau: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if tau <= 0.0 {
            return Err(TensorError::InvalidArg {
                op: "ModelState",
                detail: format!("temperature {} must be positive", tau),
            });
        }
        let backbone = Backbone::init(&cfg, rng);
        Ok(Self { config: cfg, tau, backbone, prompts: None, visual_prompt: None, linear_head: None })
    }

    /// A prompt-free copy sharing the backbone values (fresh param ids).
    pub fn frozen_copy(&self) -> Self {
        Self {
            config: self.config.clone(),
            tau: self.tau,
            backbone: self.backbone.clone(),
            prompts: None,
            visual_prompt: None,
            linear_head: None,
        }
    }

    /// Ids of every learnable parameter attached to this state.
    pub fn learnable_ids(&self) -> HashSet<u64> {
        let mut ids = HashSet::new();
        if let Some(p) = &self.prompts {
            for param in p.params() {
                ids.insert(param.id());
            }
        }
        if let Some(v) = &self.visual_prompt {
            ids.insert(v.phi.id());
        }
        if let Some(h) = &self.linear_head {
            ids.insert(h.weight.id());
            ids.insert(h.bias.id());
        }
        ids
    }
}

fn block_forward<'t>(
    binder: &Binder<'t>,
    x: Tensor<'t>,
    p: &BlockParams,
    num_heads: usize,
) -> Result<Tensor<'t>> {
    let d = *x.shape().last().unwrap();
    let dh = d / num_heads;
    let h = x.layer_norm(binder.bind(&p.ln1_g)?, binder.bind(&p.ln1_b)?, LN_EPS)?;
    let q = h.matmul(binder.bind(&p.wq)?)?.add_suffix(binder.bind(&p.bq)?)?;
    let k = h.matmul(binder.bind(&p.wk)?)?.add_suffix(binder.bind(&p.bk)?)?;
    let v = h.matmul(binder.bind(&p.wv)?)?.add_suffix(binder.bind(&p.bv)?)?;
    let mut heads = Vec::with_capacity(num_heads);
    for i in 0..num_heads {
        let qh = q.narrow(2, i * dh, dh)?;
        let kh = k.narrow(2, i * dh, dh)?;
        let vh = v.narrow(2, i * dh, dh)?;
        let att = qh.matmul(kh.t()?)?.scale(1.0 / (dh as f64).sqrt())?.softmax()?;
        heads.push(att.matmul(vh)?);
    }
    let o = concat(&heads, 2)?
        .matmul(binder.bind(&p.wo)?)?
        .add_suffix(binder.bind(&p.bo)?)?;
    let x = x.add(o)?;
    let h2 = x.layer_norm(binder.bind(&p.ln2_g)?, binder.bind(&p.ln2_b)?, LN_EPS)?;
    let mlp = h2
        .matmul(binder.bind(&p.w1)?)?
        .add_suffix(binder.bind(&p.b1)?)?
        .gelu()?
        .matmul(binder.bind(&p.w2)?)?
        .add_suffix(binder.bind(&p.b2)?)?;
    x.add(mlp)
}

/// Run a token sequence through a tower, injecting fresh prompt blocks into
/// the first `depth` layers. `tokens` is batch×T×d; the readout stays at a
/// fixed position inside the first T tokens.
fn tower_forward<'t>(
    binder: &Binder<'t>,
    mut seq: Tensor<'t>,
    blocks: &[BlockParams],
    prompt_blocks: &[Param],
    num_heads: usize,
) -> Result<Tensor<'t>> {
    let batch = seq.shape()[0];
    let base_len = seq.shape()[1];
    let depth = prompt_blocks.len();
    for (i, blk) in blocks.iter().enumerate() {
        if i < depth {
            let fresh = binder.bind(&prompt_blocks[i])?.broadcast_to_batch(batch)?;
            seq = if i == 0 {
                concat(&[seq, fresh], 1)?
            } else {
                // Discard the prompt-position outputs of the previous layer.
                concat(&[seq.narrow(1, 0, base_len)?, fresh], 1)?
            };
        }
        seq = block_forward(binder, seq, blk, num_heads)?;
    }
    Ok(seq)
}

/// Encode a batch of images (batch × channels·H·W, values in [0, 1]) into
/// unit-norm feature rows (batch × d).
pub fn encode_image<'t>(
    binder: &Binder<'t>,
    x: Tensor<'t>,
    state: &ModelState,
    use_prompts: bool,
) -> Result<Tensor<'t>> {
    let cfg = &state.config;
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.image_numel() {
        return Err(TensorError::ShapeMismatch {
            op: "encode_image",
            detail: format!("expected batch×{}, got {:?}", cfg.image_numel(), shape),
        });
    }
    let batch = shape[0];
    let bb = &state.backbone;
    let patches = x
        .gather_cols(&cfg.patch_index_map())?
        .reshape(&[batch, cfg.num_patches(), cfg.patch_dim()])?;
    let tok = patches
        .matmul(binder.bind(&bb.patch_w)?)?
        .add_suffix(binder.bind(&bb.patch_b)?)?;
    let cls = binder.bind(&bb.cls)?.broadcast_to_batch(batch)?;
    let mut seq = concat(&[cls, tok], 1)?;
    seq = seq.add_suffix(binder.bind(&bb.pos_img)?)?;

    let empty: &[Param] = &[];
    let prompt_blocks: &[Param] = match (&state.prompts, use_prompts) {
        (Some(p), true) => &p.visual,
        _ => empty,
    };
    let out = tower_forward(binder, seq, &bb.img_blocks, prompt_blocks, cfg.num_heads)?;
    let readout = out.narrow(1, 0, 1)?.reshape(&[batch, cfg.embed_dim])?;
    readout
        .layer_norm(binder.bind(&bb.ln_img_g)?, binder.bind(&bb.ln_img_b)?, LN_EPS)?
        .matmul(binder.bind(&bb.proj_img)?)?
        .l2_normalize()
}

/// Encode class prompts into unit-norm feature rows (one per class id).
/// With `use_prompts` the learnable context replaces the hand-engineered
/// template tokens; the class embedding always sits at the readout position.
pub fn encode_text<'t>(
    binder: &Binder<'t>,
    class_ids: &[usize],
    state: &ModelState,
    use_prompts: bool,
) -> Result<Tensor<'t>> {
    match (&state.prompts, use_prompts) {
        (Some(_), true) => encode_text_inner(binder, class_ids, state, TextContext::Learned),
        _ => encode_text_template(binder, class_ids, state, &state.config.template_token_ids()),
    }
}

/// Encode class prompts through fixed template tokens (the hand-engineered
/// prompt path). No learnable parameters participate.
pub fn encode_text_template<'t>(
    binder: &Binder<'t>,
    class_ids: &[usize],
    state: &ModelState,
    template_ids: &[usize],
) -> Result<Tensor<'t>> {
    encode_text_inner(binder, class_ids, state, TextContext::Template(template_ids))
}

enum TextContext<'a> {
    Learned,
    Template(&'a [usize]),
}

fn encode_text_inner<'t>(
    binder: &Binder<'t>,
    class_ids: &[usize],
    state: &ModelState,
    context: TextContext<'_>,
) -> Result<Tensor<'t>> {
    let cfg = &state.config;
    let d = cfg.embed_dim;
    let n = class_ids.len();
    if n == 0 {
        return Err(TensorError::InvalidArg { op: "encode_text", detail: "no classes".into() });
    }
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= cfg.max_classes()) {
        return Err(TensorError::InvalidArg {
            op: "encode_text",
            detail: format!("unknown class id {} (max {})", bad, cfg.max_classes()),
        });
    }
    let bb = &state.backbone;
    let tok_emb = binder.bind(&bb.tok_emb)?;

    let (ctx, ctx_len, use_learned_prompts) = match context {
        TextContext::Learned => {
            let p = state.prompts.as_ref().expect("learned context requires prompts");
            let m = cfg.text_context_len;
            let ctx = match p.context_mode {
                ContextMode::Unified => binder.bind(&p.context)?.broadcast_to_batch(n)?,
                ContextMode::ClassSpecific => {
                    let all = binder.bind(&p.context)?;
                    let num_classes = all.shape()[0];
                    all.reshape(&[num_classes, m * d])?
                        .select_rows(class_ids)?
                        .reshape(&[n, m, d])?
                }
            };
            (ctx, m, true)
        }
        TextContext::Template(ids) => {
            if ids.is_empty() || ids.len() + 1 > cfg.text_seq_len {
                return Err(TensorError::InvalidArg {
                    op: "encode_text",
                    detail: format!("template length {} unusable", ids.len()),
                });
            }
            if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.text_vocab_size) {
                return Err(TensorError::InvalidArg {
                    op: "encode_text",
                    detail: format!("template token {} outside vocabulary", bad),
                });
            }
            (tok_emb.select_rows(ids)?.broadcast_to_batch(n)?, ids.len(), false)
        }
    };
    let class_tokens: Vec<usize> = class_ids.iter().map(|&c| cfg.class_token_id(c)).collect();
    let class_rows = tok_emb.select_rows(&class_tokens)?.reshape(&[n, 1, d])?;
    let mut seq = concat(&[ctx, class_rows], 1)?;
    seq = seq.add_suffix(binder.bind(&bb.pos_txt)?.narrow(0, 0, ctx_len + 1)?)?;

    let empty: &[Param] = &[];
    let prompt_blocks: &[Param] = if use_learned_prompts {
        state.prompts.as_ref().map(|p| p.textual.as_slice()).unwrap_or(empty)
    } else {
        empty
    };
    let out = tower_forward(binder, seq, &bb.txt_blocks, prompt_blocks, cfg.num_heads)?;
    // Readout at the class-token position; appended prompts sit beyond it.
    let readout = out.narrow(1, ctx_len, 1)?.reshape(&[n, cfg.embed_dim])?;
    readout
        .layer_norm(binder.bind(&bb.ln_txt_g)?, binder.bind(&bb.ln_txt_b)?, LN_EPS)?
        .matmul(binder.bind(&bb.proj_txt)?)?
        .l2_normalize()
}

/// Convenience: run a forward pass on a throwaway tape and return the plain
/// feature arrays (no gradients).
pub fn image_features(state: &ModelState, images: &Array, use_prompts: bool) -> Result<Array> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    let x = tape.constant(images.clone())?;
    Ok(encode_image(&binder, x, state, use_prompts)?.value())
}

pub fn text_features(state: &ModelState, class_ids: &[usize], use_prompts: bool) -> Result<Array> {
    let tape = Tape::new();
    let binder = Binder::frozen(&tape);
    Ok(encode_text(&binder, class_ids, state, use_prompts)?.value())
}
