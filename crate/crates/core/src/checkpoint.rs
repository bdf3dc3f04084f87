//! Model checkpoint file: little-endian binary with magic bytes, version,
//! the encoder configuration, run metadata, then named parameter blocks in
//! declared order (name length, name, shape, f64 payload).

use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::encoder::{
    ContextMode, EncoderConfig, LinearHead, ModelState, Param, PromptSet, VisualPrompt,
};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

const MAGIC: &[u8; 8] = b"CAPTCKPT";
const VERSION: u32 = 1;

/// Run metadata carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// Tuning method that produced this checkpoint ("pretrained" before any
    /// tuning).
    pub method: String,
    /// Shot count used for tuning; -1 when unset or "all".
    pub shots: i64,
    /// Objective mask name for ablation checkpoints (empty otherwise).
    pub mask: String,
}

impl CheckpointMeta {
    pub fn pretrained() -> Self {
        Self { method: "pretrained".to_string(), shots: -1, mask: String::new() }
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_i64(w: &mut impl Write, v: i64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_i64(r: &mut impl Read) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated i64".into()))?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated f64".into()))?;
    Ok(f64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(CheckpointError::Corrupt(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Corrupt("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
}

fn write_block(w: &mut impl Write, name: &str, value: &Array) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, value.shape().len() as u32)?;
    for &d in value.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in value.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_block(r: &mut impl Read) -> Result<(String, Array)> {
    let name = read_str(r)?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Corrupt(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    if numel > 1 << 28 {
        return Err(CheckpointError::Corrupt(format!("implausible block size {numel}")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    let value = Array::new(shape, data)
        .map_err(|e| CheckpointError::Corrupt(format!("bad block {name}: {e}")))?;
    Ok((name, value))
}

/// All named blocks of a state, in declared order. Extra learnables carry
/// dotted prefixes so the loader can reconstruct them.
fn collect_blocks(state: &ModelState) -> Vec<(String, Array)> {
    let mut out: Vec<(String, Array)> =
        state.backbone.named().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
    if let Some(p) = &state.prompts {
        for (i, block) in p.visual.iter().enumerate() {
            out.push((format!("prompt.visual.{i}"), block.value.clone()));
        }
        for (i, block) in p.textual.iter().enumerate() {
            out.push((format!("prompt.textual.{i}"), block.value.clone()));
        }
        let ctx_name = match p.context_mode {
            ContextMode::Unified => "prompt.context.unified",
            ContextMode::ClassSpecific => "prompt.context.class_specific",
        };
        out.push((ctx_name.to_string(), p.context.value.clone()));
    }
    if let Some(v) = &state.visual_prompt {
        out.push(("avp.phi".to_string(), v.phi.value.clone()));
        out.push(("avp.border".to_string(), Array::scalar(v.border as f64)));
    }
    if let Some(h) = &state.linear_head {
        out.push(("paft.weight".to_string(), h.weight.value.clone()));
        out.push(("paft.bias".to_string(), h.bias.value.clone()));
    }
    out
}

/// Write a checkpoint atomically (temp file plus rename).
pub fn save(state: &ModelState, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt-tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        let c = &state.config;
        for v in [
            c.image_size,
            c.patch_size,
            c.channels,
            c.embed_dim,
            c.num_layers,
            c.num_heads,
            c.text_vocab_size,
            c.text_seq_len,
            c.prompt_depth,
            c.prompt_len,
            c.text_context_len,
        ] {
            write_u32(&mut w, v as u32)?;
        }
        w.write_all(&[match c.context_mode {
            ContextMode::Unified => 0u8,
            ContextMode::ClassSpecific => 1u8,
        }])?;
        write_f64(&mut w, state.tau)?;
        write_str(&mut w, &meta.method)?;
        write_i64(&mut w, meta.shots)?;
        write_str(&mut w, &meta.mask)?;
        let blocks = collect_blocks(state);
        write_u32(&mut w, blocks.len() as u32)?;
        for (name, value) in &blocks {
            write_block(&mut w, name, value)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint. Every block the format declares must be present with
/// the right shape; unknown blocks are an error.
pub fn load(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Corrupt("missing header".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 11];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let mut mode_byte = [0u8];
    r.read_exact(&mut mode_byte)
        .map_err(|_| CheckpointError::Corrupt("truncated context mode".into()))?;
    let context_mode = match mode_byte[0] {
        0 => ContextMode::Unified,
        1 => ContextMode::ClassSpecific,
        other => return Err(CheckpointError::Corrupt(format!("unknown context mode {other}"))),
    };
    let config = EncoderConfig {
        image_size: dims[0],
        patch_size: dims[1],
        channels: dims[2],
        embed_dim: dims[3],
        num_layers: dims[4],
        num_heads: dims[5],
        text_vocab_size: dims[6],
        text_seq_len: dims[7],
        prompt_depth: dims[8],
        prompt_len: dims[9],
        text_context_len: dims[10],
        context_mode,
    };
    config.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let tau = read_f64(&mut r)?;
    if !(tau > 0.0) {
        return Err(CheckpointError::Corrupt(format!("non-positive temperature {tau}")));
    }
    let meta = CheckpointMeta {
        method: read_str(&mut r)?,
        shots: read_i64(&mut r)?,
        mask: read_str(&mut r)?,
    };

    let num_blocks = read_u32(&mut r)? as usize;
    let mut blocks = std::collections::HashMap::new();
    let mut order = Vec::new();
    for _ in 0..num_blocks {
        let (name, value) = read_block(&mut r)?;
        order.push(name.clone());
        if blocks.insert(name.clone(), value).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate block {name}")));
        }
    }
    let mut trailing = [0u8];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after payload".into()));
    }

    // Seed a state with the right topology, then fill every backbone block.
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut state = ModelState::init(config.clone(), tau, &mut rng)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    for (name, param) in state.backbone.named_mut() {
        let value = blocks
            .remove(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing block {name}")))?;
        if value.shape() != param.value.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "block {name} has shape {:?}, expected {:?}",
                value.shape(),
                param.value.shape()
            )));
        }
        param.value = value;
    }

    // Optional learnable groups, reconstructed from their prefixes.
    let visual_count = order.iter().filter(|n| n.starts_with("prompt.visual.")).count();
    let textual_count = order.iter().filter(|n| n.starts_with("prompt.textual.")).count();
    if visual_count != textual_count {
        return Err(CheckpointError::Corrupt("mismatched prompt block counts".into()));
    }
    let has_ctx = blocks.contains_key("prompt.context.unified")
        || blocks.contains_key("prompt.context.class_specific");
    if has_ctx {
        let mut visual = Vec::with_capacity(visual_count);
        for i in 0..visual_count {
            let name = format!("prompt.visual.{i}");
            let v = blocks
                .remove(&name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing block {name}")))?;
            visual.push(Param::new(v));
        }
        let mut textual = Vec::with_capacity(textual_count);
        for i in 0..textual_count {
            let name = format!("prompt.textual.{i}");
            let v = blocks
                .remove(&name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing block {name}")))?;
            textual.push(Param::new(v));
        }
        let (ctx, mode) = if let Some(v) = blocks.remove("prompt.context.unified") {
            (v, ContextMode::Unified)
        } else {
            (blocks.remove("prompt.context.class_specific").unwrap(), ContextMode::ClassSpecific)
        };
        state.prompts =
            Some(PromptSet { visual, textual, context: Param::new(ctx), context_mode: mode });
    } else if visual_count > 0 {
        return Err(CheckpointError::Corrupt("prompt blocks without a context block".into()));
    }

    if let Some(phi) = blocks.remove("avp.phi") {
        let border = blocks
            .remove("avp.border")
            .ok_or_else(|| CheckpointError::Corrupt("missing block avp.border".into()))?
            .data()[0] as usize;
        let mut vp = VisualPrompt::zeros(&config, border);
        if phi.shape() != vp.phi.value.shape() {
            return Err(CheckpointError::Corrupt("avp.phi has the wrong shape".into()));
        }
        vp.phi = Param::new(phi);
        state.visual_prompt = Some(vp);
    }

    if let Some(w) = blocks.remove("paft.weight") {
        let b = blocks
            .remove("paft.bias")
            .ok_or_else(|| CheckpointError::Corrupt("missing block paft.bias".into()))?;
        let mut head = LinearHead::zeros(w.shape()[0], w.shape()[1]);
        head.weight = Param::new(w);
        head.bias = Param::new(b);
        state.linear_head = Some(head);
    }

    if let Some(name) = blocks.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unknown block {name}")));
    }
    Ok((state, meta))
}
