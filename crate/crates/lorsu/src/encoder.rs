//! Toy CLIP-style dual encoder: a patch-embedding vision transformer with
//! per-head qkv weight layout, and a frozen embedding-mean-pool text encoder.
//! Both sides emit unit-norm embeddings for contrastive training.

use crate::error::{Error, Result};
use crate::select::SelectionPlan;
use crate::tensor::{matmul_raw, Tape, Tensor, Var};
use crate::wire::{Reader, Writer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed CLIP logit scale (1 / 0.07); not trainable.
pub const DEFAULT_TEMPERATURE: f64 = 1.0 / 0.07;

const INIT_STD: f64 = 0.02;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Model width D.
    pub dim: usize,
    /// Attention head count H.
    pub heads: usize,
    /// Per-head width; dim == heads * head_dim.
    pub head_dim: usize,
    /// Transformer block count.
    pub blocks: usize,
    /// fc1 output width (rows of W_fc1).
    pub ff_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            heads: 8,
            head_dim: 8,
            blocks: 4,
            ff_dim: 256,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            vocab_size: 64,
            max_tokens: 8,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dim, self.heads, self.head_dim, self.blocks, self.ff_dim,
            self.patch_size, self.image_size, self.channels, self.vocab_size,
            self.max_tokens, self.embed_dim,
        ];
        if all.iter().any(|&v| v == 0) {
            return Err(Error::Input("all config dimensions must be >= 1".into()));
        }
        if self.dim != self.heads * self.head_dim {
            return Err(Error::Input(format!(
                "dim {} != heads {} * head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Input(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count N: one class token plus the patch grid.
    pub fn num_tokens(&self) -> usize {
        self.patches_per_side() * self.patches_per_side() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

// ── Parameter storage ────────────────────────────────────────────────

pub type ParamId = usize;

/// Ordered, named parameter tensors. Declaration order is the checkpoint order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (i, n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Full snapshot of parameter data (no grads) for bit-exact diffing.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|(_, t)| t.data.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub w_qkv: ParamId,
    pub w_o: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w_fc1: ParamId,
    pub b_fc1: ParamId,
    pub w_fc2: ParamId,
    pub b_fc2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_w: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub proj: ParamId,
    pub text_embed: ParamId,
    pub text_proj: ParamId,
}

impl Layout {
    /// Every vision-side parameter, in declaration order.
    pub fn vision_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.cls, self.pos];
        for b in &self.blocks {
            ids.extend_from_slice(&[
                b.w_qkv, b.w_o, b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b, b.w_fc1, b.b_fc1, b.w_fc2,
                b.b_fc2,
            ]);
        }
        ids.extend_from_slice(&[self.lnf_g, self.lnf_b, self.proj]);
        ids
    }

    pub fn layernorm_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend_from_slice(&[b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b]);
        }
        ids.extend_from_slice(&[self.lnf_g, self.lnf_b]);
        ids
    }

    pub fn text_param_ids(&self) -> Vec<ParamId> {
        vec![self.text_embed, self.text_proj]
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// The dual encoder: trainable vision transformer + frozen text encoder.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub layout: Layout,
    pub temperature: f64,
}

impl DualEncoder {
    /// Fresh model: Gaussian(0, 0.02) weights, zero biases, LayerNorm (1, 0).
    /// Text-side parameters are frozen permanently.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let c = &config;
        let d = c.dim;
        let n = c.num_tokens();

        let patch_w = store.push(
            "vision.patch_w".into(),
            Tensor::randn(&[c.patch_dim(), d], INIT_STD, &mut rng),
        );
        let cls = store.push("vision.cls".into(), Tensor::randn(&[1, d], INIT_STD, &mut rng));
        let pos = store.push("vision.pos".into(), Tensor::randn(&[n, d], INIT_STD, &mut rng));

        let mut blocks = Vec::with_capacity(c.blocks);
        for b in 0..c.blocks {
            let w_qkv = store.push(
                format!("vision.block{b}.w_qkv"),
                Tensor::randn(&[3 * d, d], INIT_STD, &mut rng),
            );
            let w_o = store.push(
                format!("vision.block{b}.w_o"),
                Tensor::randn(&[c.heads * c.head_dim, d], INIT_STD, &mut rng),
            );
            let ln1_g = store.push(format!("vision.block{b}.ln1_g"), ones(d));
            let ln1_b = store.push(format!("vision.block{b}.ln1_b"), Tensor::zeros(&[d]));
            let ln2_g = store.push(format!("vision.block{b}.ln2_g"), ones(d));
            let ln2_b = store.push(format!("vision.block{b}.ln2_b"), Tensor::zeros(&[d]));
            let w_fc1 = store.push(
                format!("vision.block{b}.w_fc1"),
                Tensor::randn(&[c.ff_dim, d], INIT_STD, &mut rng),
            );
            let b_fc1 = store.push(format!("vision.block{b}.b_fc1"), Tensor::zeros(&[c.ff_dim]));
            let w_fc2 = store.push(
                format!("vision.block{b}.w_fc2"),
                Tensor::randn(&[d, c.ff_dim], INIT_STD, &mut rng),
            );
            let b_fc2 = store.push(format!("vision.block{b}.b_fc2"), Tensor::zeros(&[d]));
            blocks.push(BlockIds { w_qkv, w_o, ln1_g, ln1_b, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2 });
        }

        let lnf_g = store.push("vision.lnf_g".into(), ones(d));
        let lnf_b = store.push("vision.lnf_b".into(), Tensor::zeros(&[d]));
        let proj = store.push(
            "vision.proj".into(),
            Tensor::randn(&[d, c.embed_dim], INIT_STD, &mut rng),
        );
        let text_embed = store.push(
            "text.embed".into(),
            Tensor::randn(&[c.vocab_size, d], INIT_STD, &mut rng),
        );
        let text_proj = store.push(
            "text.proj".into(),
            Tensor::randn(&[d, c.embed_dim], INIT_STD, &mut rng),
        );

        Ok(DualEncoder {
            config,
            store,
            layout: Layout { patch_w, cls, pos, blocks, lnf_g, lnf_b, proj, text_embed, text_proj },
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    /// Mark a set of vision parameters trainable, everything else frozen.
    /// Text parameters cannot be made trainable.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        let text: Vec<ParamId> = self.layout.text_param_ids();
        for i in 0..self.store.len() {
            self.store.get_mut(i).requires_grad = false;
        }
        for &id in ids {
            if !text.contains(&id) {
                self.store.get_mut(id).requires_grad = true;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }

    /// Flatten an image tensor [C, W, W] into the patch matrix [patches, C*p*p].
    pub fn image_to_patches(&self, image: &Tensor) -> Result<Vec<f64>> {
        let c = &self.config;
        let want = vec![c.channels, c.image_size, c.image_size];
        if image.shape != want {
            return Err(Error::Dimension { op: "image_to_patches", lhs: image.shape.clone(), rhs: want });
        }
        let p = c.patch_size;
        let w = c.image_size;
        let side = c.patches_per_side();
        let mut out = Vec::with_capacity(side * side * c.patch_dim());
        for gy in 0..side {
            for gx in 0..side {
                for ch in 0..c.channels {
                    for py in 0..p {
                        for px in 0..p {
                            let y = gy * p + py;
                            let x = gx * p + px;
                            out.push(image.data[ch * w * w + y * w + x]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Unit-norm image embedding (no gradient tracking).
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let patches = self.image_to_patches(image)?;
        let mut tape = Tape::new();
        let tm = register_on_tape(self, &mut IdentityCompose, &mut tape)?;
        let emb = encode_image_var(&mut tape, &tm, &self.config, patches)?;
        Ok(Tensor::from_vec(&[self.config.embed_dim], tape.value(emb).to_vec()))
    }

    /// Unit-norm text embedding from padded token ids; frozen path, no tape.
    pub fn encode_text(&self, token_ids: &[u16]) -> Result<Tensor> {
        if token_ids.is_empty() {
            return Err(Error::Input("encode_text on empty token sequence".into()));
        }
        let c = &self.config;
        if let Some(&bad) = token_ids.iter().find(|&&t| (t as usize) >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                c.vocab_size
            )));
        }
        let table = &self.store.get(self.layout.text_embed).data;
        let d = c.dim;
        let mut pooled = vec![0.0; d];
        for &t in token_ids {
            let row = &table[t as usize * d..(t as usize + 1) * d];
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        let inv = 1.0 / token_ids.len() as f64;
        for p in pooled.iter_mut() {
            *p *= inv;
        }
        let proj = &self.store.get(self.layout.text_proj).data;
        let mut emb = matmul_raw(&pooled, proj, 1, d, c.embed_dim);
        let norm = (emb.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
        for v in emb.iter_mut() {
            *v /= norm;
        }
        Ok(Tensor::from_vec(&[c.embed_dim], emb))
    }

    /// Argmax cosine similarity between the image and each class prompt.
    /// Ties break toward the lowest index.
    pub fn zero_shot_classify(&self, image: &Tensor, class_prompts: &[Vec<u16>]) -> Result<usize> {
        if class_prompts.is_empty() {
            return Err(Error::Input("zero_shot_classify with no class prompts".into()));
        }
        let img = self.encode_image(image)?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, prompt) in class_prompts.iter().enumerate() {
            let txt = self.encode_text(prompt)?;
            let cos: f64 = img.data.iter().zip(&txt.data).map(|(a, b)| a * b).sum();
            if cos > best.1 {
                best = (i, cos);
            }
        }
        Ok(best.0)
    }

    /// Multi-head self-attention of one block applied to a token matrix
    /// [N, D]; standalone entry point for direct checks.
    pub fn self_attention(&self, block: usize, z: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (n, d) = z.dims2()?;
        if d != c.dim {
            return Err(Error::Dimension { op: "self_attention", lhs: vec![n, d], rhs: vec![n, c.dim] });
        }
        let ids = self.layout.blocks[block];
        let mut tape = Tape::new();
        let zv = tape.leaf(n, d, z.data.clone());
        let wq = tape.input(self.store.get(ids.w_qkv))?;
        let wo = tape.input(self.store.get(ids.w_o))?;
        let out = attention(&mut tape, wq, wo, zv, c.heads, c.head_dim)?;
        Ok(Tensor::from_vec(&[n, d], tape.value(out).to_vec()))
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n])
}

// ── Tape forward pass ────────────────────────────────────────────────

/// Which weight matrix of a block is being registered; lets strategies
/// substitute an adapted (effective) weight for the frozen base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Qkv,
    Out,
    Fc1,
    Fc2,
}

/// Hook for composing effective weights on the tape (LoRA-style deltas).
pub trait WeightCompose {
    fn compose(&mut self, tape: &mut Tape, block: usize, kind: MatrixKind, base: Var) -> Result<Var>;
}

/// No adaptation: effective weight is the base weight.
pub struct IdentityCompose;

impl WeightCompose for IdentityCompose {
    fn compose(&mut self, _: &mut Tape, _: usize, _: MatrixKind, base: Var) -> Result<Var> {
        Ok(base)
    }
}

pub struct TapeBlock {
    pub w_qkv: Var,
    pub w_o: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_fc1: Var,
    pub b_fc1: Var,
    pub w_fc2: Var,
    pub b_fc2: Var,
}

/// All model parameters registered on one tape, with effective weights
/// already composed. `bindings` maps tape vars back to store ids for
/// gradient harvesting.
pub struct TapeModel {
    pub patch_w: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<TapeBlock>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub proj: Var,
    pub bindings: Vec<(Var, ParamId)>,
}

/// Register every vision parameter once per tape and compose effective
/// weights. Call once per batch; reuse across the batch's images.
pub fn register_on_tape(
    model: &DualEncoder,
    composer: &mut dyn WeightCompose,
    tape: &mut Tape,
) -> Result<TapeModel> {
    let l = &model.layout;
    let mut bindings = Vec::new();
    let mut reg = |tape: &mut Tape, id: ParamId| -> Result<Var> {
        let v = tape.input(model.store.get(id))?;
        bindings.push((v, id));
        Ok(v)
    };

    let patch_w = reg(tape, l.patch_w)?;
    let cls = reg(tape, l.cls)?;
    let pos = reg(tape, l.pos)?;
    let mut blocks = Vec::with_capacity(l.blocks.len());
    for (bi, ids) in l.blocks.iter().enumerate() {
        let w_qkv_base = reg(tape, ids.w_qkv)?;
        let w_o_base = reg(tape, ids.w_o)?;
        let ln1_g = reg(tape, ids.ln1_g)?;
        let ln1_b = reg(tape, ids.ln1_b)?;
        let ln2_g = reg(tape, ids.ln2_g)?;
        let ln2_b = reg(tape, ids.ln2_b)?;
        let w_fc1_base = reg(tape, ids.w_fc1)?;
        let b_fc1 = reg(tape, ids.b_fc1)?;
        let w_fc2_base = reg(tape, ids.w_fc2)?;
        let b_fc2 = reg(tape, ids.b_fc2)?;
        blocks.push(TapeBlock {
            w_qkv: composer.compose(tape, bi, MatrixKind::Qkv, w_qkv_base)?,
            w_o: composer.compose(tape, bi, MatrixKind::Out, w_o_base)?,
            ln1_g,
            ln1_b,
            ln2_g,
            ln2_b,
            w_fc1: composer.compose(tape, bi, MatrixKind::Fc1, w_fc1_base)?,
            b_fc1,
            w_fc2: composer.compose(tape, bi, MatrixKind::Fc2, w_fc2_base)?,
            b_fc2,
        });
    }
    let lnf_g = reg(tape, l.lnf_g)?;
    let lnf_b = reg(tape, l.lnf_b)?;
    let proj = reg(tape, l.proj)?;

    Ok(TapeModel { patch_w, cls, pos, blocks, lnf_g, lnf_b, proj, bindings })
}

/// Per-head self-attention: q, k, v are contiguous row blocks of
/// W_qkv . Z^T per head; heads are concatenated and projected by W_o.
pub fn attention(
    tape: &mut Tape,
    w_qkv: Var,
    w_o: Var,
    z: Var,
    heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let (_, d) = tape.shape(z);
    let (rows, cols) = tape.shape(w_qkv);
    if cols != d || rows != 3 * heads * head_dim {
        return Err(Error::Dimension { op: "attention", lhs: vec![rows, cols], rhs: vec![3 * heads * head_dim, d] });
    }
    let zt = tape.transpose(z);
    let qkv = tape.matmul(w_qkv, zt)?; // [3D, N]
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let base = 3 * h * head_dim;
        let q = tape.slice_rows(qkv, base, head_dim)?; // [Dh, N]
        let k = tape.slice_rows(qkv, base + head_dim, head_dim)?;
        let v = tape.slice_rows(qkv, base + 2 * head_dim, head_dim)?;
        let qt = tape.transpose(q); // [N, Dh]
        let logits = tape.matmul(qt, k)?; // [N, N]
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax_rows(scaled);
        let vt = tape.transpose(v); // [N, Dh]
        outs.push(tape.matmul(attn, vt)?); // [N, Dh]
    }
    let cat = tape.concat_cols(&outs)?; // [N, H*Dh]
    tape.matmul(cat, w_o) // [N, D]
}

fn block_forward(tape: &mut Tape, blk: &TapeBlock, z: Var, heads: usize, head_dim: usize) -> Result<Var> {
    let h = tape.layernorm_rows(z, blk.ln1_g, blk.ln1_b)?;
    let attn = attention(tape, blk.w_qkv, blk.w_o, h, heads, head_dim)?;
    let z = tape.add(z, attn)?;

    let h2 = tape.layernorm_rows(z, blk.ln2_g, blk.ln2_b)?;
    let w1t = tape.transpose(blk.w_fc1);
    let pre = tape.matmul(h2, w1t)?;
    let pre = tape.add_bias(pre, blk.b_fc1)?;
    let act = tape.gelu(pre);
    let w2t = tape.transpose(blk.w_fc2);
    let out = tape.matmul(act, w2t)?;
    let out = tape.add_bias(out, blk.b_fc2)?;
    tape.add(z, out)
}

/// Differentiable forward pass for one image's patch matrix; returns the
/// unit-norm embedding as a [1, embed_dim] var.
pub fn encode_image_var(
    tape: &mut Tape,
    tm: &TapeModel,
    config: &EncoderConfig,
    patches: Vec<f64>,
) -> Result<Var> {
    let np = config.num_tokens() - 1;
    if patches.len() != np * config.patch_dim() {
        return Err(Error::Dimension {
            op: "encode_image",
            lhs: vec![patches.len()],
            rhs: vec![np, config.patch_dim()],
        });
    }
    let pv = tape.leaf(np, config.patch_dim(), patches);
    let embedded = tape.matmul(pv, tm.patch_w)?; // [Np, D]
    let tokens = tape.concat_rows(&[tm.cls, embedded])?; // [N, D]
    let mut z = tape.add(tokens, tm.pos)?;
    for blk in &tm.blocks {
        z = block_forward(tape, blk, z, config.heads, config.head_dim)?;
    }
    let zf = tape.layernorm_rows(z, tm.lnf_g, tm.lnf_b)?;
    let cls_out = tape.slice_rows(zf, 0, 1)?;
    let emb = tape.matmul(cls_out, tm.proj)?;
    Ok(tape.l2_normalize_rows(emb))
}

/// Batch of image embeddings stacked into [B, embed_dim].
pub fn encode_images_var(
    tape: &mut Tape,
    tm: &TapeModel,
    config: &EncoderConfig,
    patch_mats: Vec<Vec<f64>>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(patch_mats.len());
    for p in patch_mats {
        rows.push(encode_image_var(tape, tm, config, p)?);
    }
    tape.concat_rows(&rows)
}

/// Accumulate tape gradients of the last backward pass into the store.
pub fn harvest_grads(tape: &Tape, bindings: &[(Var, ParamId)], store: &mut ParamStore) {
    for &(v, id) in bindings {
        if let Some(g) = tape.grad(v) {
            store.get_mut(id).accum_grad(g);
        }
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────

/// Serialize model (and optionally the current selection plan) to bytes:
/// magic, version, config block, then parameter tensors in declaration
/// order as little-endian f64 with shape headers.
pub fn checkpoint_to_bytes(model: &DualEncoder, plan: Option<&SelectionPlan>) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = &model.config;
    for v in [
        c.dim, c.heads, c.head_dim, c.blocks, c.ff_dim, c.patch_size, c.image_size, c.channels,
        c.vocab_size, c.max_tokens, c.embed_dim,
    ] {
        w.u32(v as u32);
    }
    w.f64(model.temperature);
    w.u32(model.store.len() as u32);
    for (_, name, t) in model.store.iter() {
        w.string(name);
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u32(d as u32);
        }
        for &v in &t.data {
            w.f64(v);
        }
    }
    match plan {
        None => w.u8(0),
        Some(p) => {
            w.u8(1);
            p.write(&mut w);
        }
    }
    w.buf
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(DualEncoder, Option<SelectionPlan>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    let mut dims = [0usize; 11];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = EncoderConfig {
        dim: dims[0],
        heads: dims[1],
        head_dim: dims[2],
        blocks: dims[3],
        ff_dim: dims[4],
        patch_size: dims[5],
        image_size: dims[6],
        channels: dims[7],
        vocab_size: dims[8],
        max_tokens: dims[9],
        embed_dim: dims[10],
    };
    config.validate().map_err(|e| Error::Corrupt(format!("config block: {e}")))?;
    let temperature = r.f64()?;
    if !temperature.is_finite() {
        return Err(Error::Corrupt("non-finite temperature".into()));
    }

    let mut model = DualEncoder::new(config, 0)?;
    model.temperature = temperature;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Corrupt(format!(
            "parameter count {count} does not match config ({})",
            model.store.len()
        )));
    }
    for id in 0..count {
        let name = r.string()?;
        if name != model.store.name(id) {
            return Err(Error::Corrupt(format!(
                "parameter {id} named '{name}', expected '{}'",
                model.store.name(id)
            )));
        }
        let ndim = r.u32()? as usize;
        if ndim > 4 {
            return Err(Error::Corrupt(format!("parameter '{name}' has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let expect = &model.store.get(id).shape;
        if &shape != expect {
            return Err(Error::Corrupt(format!(
                "parameter '{name}' shape {shape:?}, expected {expect:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = r.f64_vec(n)?;
        let t = model.store.get_mut(id);
        t.data = data;
        t.grad = None;
        t.requires_grad = false;
    }
    let plan = match r.u8()? {
        0 => None,
        1 => Some(SelectionPlan::read(&mut r)?),
        other => return Err(Error::Corrupt(format!("bad plan flag {other}"))),
    };
    r.expect_end()?;
    Ok((model, plan))
}

pub fn save_checkpoint(
    model: &DualEncoder,
    plan: Option<&SelectionPlan>,
    path: &std::path::Path,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model, plan))?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(DualEncoder, Option<SelectionPlan>)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            heads: 2,
            head_dim: 4,
            blocks: 2,
            ff_dim: 16,
            patch_size: 4,
            image_size: 8,
            channels: 3,
            vocab_size: 16,
            max_tokens: 4,
            embed_dim: 8,
        }
    }

    fn random_image(cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::from_vec(
            &[cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen::<f64>()).collect(),
        )
    }

    /// Naive per-head attention computed with plain loops; the oracle for
    /// the tape implementation.
    fn naive_attention(model: &DualEncoder, block: usize, z: &[f64], n: usize) -> Vec<f64> {
        let c = &model.config;
        let d = c.dim;
        let dh = c.head_dim;
        let wqkv = &model.store.get(model.layout.blocks[block].w_qkv).data;
        let wo = &model.store.get(model.layout.blocks[block].w_o).data;
        let mut cat = vec![0.0; n * c.heads * dh];
        for h in 0..c.heads {
            // q/k/v: [dh, n] from rows of wqkv times z^T
            let row0 = 3 * h * dh;
            let slice = |mat_off: usize| -> Vec<f64> {
                let mut m = vec![0.0; dh * n];
                for r in 0..dh {
                    for t in 0..n {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += wqkv[(row0 + mat_off * dh + r) * d + j] * z[t * d + j];
                        }
                        m[r * n + t] = s;
                    }
                }
                m
            };
            let q = slice(0);
            let k = slice(1);
            let v = slice(2);
            for t in 0..n {
                // attention logits for token t over all tokens
                let mut logits = vec![0.0; n];
                for u in 0..n {
                    let mut s = 0.0;
                    for r in 0..dh {
                        s += q[r * n + t] * k[r * n + u];
                    }
                    logits[u] = s / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut ex: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = ex.iter().sum();
                for e in ex.iter_mut() {
                    *e /= sum;
                }
                for r in 0..dh {
                    let mut s = 0.0;
                    for u in 0..n {
                        s += ex[u] * v[r * n + u];
                    }
                    cat[t * (c.heads * dh) + h * dh + r] = s;
                }
            }
        }
        matmul_raw(&cat, wo, n, c.heads * dh, d)
    }

    #[test]
    fn attention_matches_naive_per_head_loop() {
        let model = DualEncoder::new(tiny_config(), 3).unwrap();
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z: Vec<f64> = (0..n * model.config.dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        let zt = Tensor::from_vec(&[n, model.config.dim], z.clone());
        let got = model.self_attention(0, &zt).unwrap();
        let want = naive_attention(&model, 0, &z, n);
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_zero_qk_is_uniform_mean_of_values() {
        // One head; zero out q and k rows so attention is uniform 1/N.
        let mut cfg = tiny_config();
        cfg.heads = 1;
        cfg.head_dim = 8;
        let mut model = DualEncoder::new(cfg, 5).unwrap();
        let ids = model.layout.blocks[0];
        let d = model.config.dim;
        let dh = model.config.head_dim;
        {
            let w = model.store.get_mut(ids.w_qkv);
            for r in 0..2 * dh {
                for j in 0..d {
                    w.data[r * d + j] = 0.0;
                }
            }
        }
        let n = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let out = model
            .self_attention(0, &Tensor::from_vec(&[n, d], z.clone()))
            .unwrap();
        // mean of v rows, projected by w_o
        let wqkv = &model.store.get(ids.w_qkv).data;
        let wo = &model.store.get(ids.w_o).data;
        let mut vmean = vec![0.0; dh];
        for r in 0..dh {
            let wrow = 2 * dh + r;
            let mut s = 0.0;
            for t in 0..n {
                for j in 0..d {
                    s += wqkv[wrow * d + j] * z[t * d + j];
                }
            }
            vmean[r] = s / n as f64;
        }
        let want_row = matmul_raw(&vmean, wo, 1, dh, d);
        for t in 0..n {
            for j in 0..d {
                assert!((out.data[t * d + j] - want_row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_token_is_value_row() {
        let model = DualEncoder::new(tiny_config(), 7).unwrap();
        let d = model.config.dim;
        let z: Vec<f64> = (0..d).map(|i| (i as f64 * 0.3).sin()).collect();
        let out = model
            .self_attention(1, &Tensor::from_vec(&[1, d], z.clone()))
            .unwrap();
        let want = naive_attention(&model, 1, &z, 1);
        for (a, b) in out.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_slices_partition_w_qkv_rows() {
        let cfg = tiny_config();
        let mut seen = vec![false; 3 * cfg.dim];
        for h in 0..cfg.heads {
            let base = 3 * h * cfg.head_dim;
            for r in base..base + 3 * cfg.head_dim {
                assert!(!seen[r], "row {r} claimed twice");
                seen[r] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn encode_image_unit_norm_and_deterministic() {
        let model = DualEncoder::new(tiny_config(), 11).unwrap();
        let img = random_image(&model.config, 1);
        let e1 = model.encode_image(&img).unwrap();
        let e2 = model.encode_image(&img).unwrap();
        let norm: f64 = e1.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
        assert!(e1.data.iter().zip(&e2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn encode_image_rejects_wrong_size() {
        let model = DualEncoder::new(tiny_config(), 11).unwrap();
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(matches!(model.encode_image(&img), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encode_image_sensitive_to_trainable_weight() {
        let mut model = DualEncoder::new(tiny_config(), 11).unwrap();
        let img = random_image(&model.config, 2);
        let before = model.encode_image(&img).unwrap();
        let id = model.layout.blocks[0].w_qkv;
        model.store.get_mut(id).data[5] += 0.5;
        let after = model.encode_image(&img).unwrap();
        let diff: f64 = before.data.iter().zip(&after.data).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "embedding insensitive to weight change");
    }

    #[test]
    fn encode_text_determinism_and_pad_only() {
        let model = DualEncoder::new(tiny_config(), 13).unwrap();
        let a = model.encode_text(&[1, 2, 3, 0]).unwrap();
        let b = model.encode_text(&[1, 2, 3, 0]).unwrap();
        assert_eq!(a, b);
        let pad = model.encode_text(&[0, 0, 0, 0]).unwrap();
        let norm: f64 = pad.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
        assert!(matches!(model.encode_text(&[99]), Err(Error::Input(_))));
        assert!(matches!(model.encode_text(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn text_path_carries_no_gradient() {
        // Full backward through an image loss; text params must stay grad-free.
        let mut model = DualEncoder::new(tiny_config(), 17).unwrap();
        let all: Vec<ParamId> = model.layout.vision_param_ids();
        model.set_trainable(&all);
        let img = random_image(&model.config, 3);
        let patches = model.image_to_patches(&img).unwrap();
        let mut tape = Tape::new();
        let tm = register_on_tape(&model, &mut IdentityCompose, &mut tape).unwrap();
        let emb = encode_image_var(&mut tape, &tm, &model.config, patches).unwrap();
        let loss = tape.sum(emb);
        tape.backward(loss).unwrap();
        harvest_grads(&tape, &tm.bindings, &mut model.store);
        for id in model.layout.text_param_ids() {
            assert!(model.store.get(id).grad.is_none());
        }
        // and w_qkv did get a gradient
        assert!(model.store.get(model.layout.blocks[0].w_qkv).grad.is_some());
    }

    #[test]
    fn set_trainable_never_touches_text() {
        let mut model = DualEncoder::new(tiny_config(), 19).unwrap();
        let text_ids = model.layout.text_param_ids();
        model.set_trainable(&text_ids);
        for id in text_ids {
            assert!(!model.store.get(id).requires_grad);
        }
    }

    #[test]
    fn zero_shot_single_class_and_tie_break() {
        let model = DualEncoder::new(tiny_config(), 23).unwrap();
        let img = random_image(&model.config, 4);
        assert_eq!(model.zero_shot_classify(&img, &[vec![1, 2]]).unwrap(), 0);
        // identical prompts tie; lowest index wins
        let idx = model
            .zero_shot_classify(&img, &[vec![3, 4], vec![3, 4], vec![3, 4]])
            .unwrap();
        assert_eq!(idx, 0);
        assert!(model.zero_shot_classify(&img, &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let model = DualEncoder::new(tiny_config(), 29).unwrap();
        let bytes = checkpoint_to_bytes(&model, None);
        let (loaded, plan) = checkpoint_from_bytes(&bytes).unwrap();
        assert!(plan.is_none());
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.temperature, model.temperature);
        for (id, _, t) in model.store.iter() {
            let lt = loaded.store.get(id);
            assert_eq!(lt.shape, t.shape);
            assert!(lt.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let model = DualEncoder::new(tiny_config(), 31).unwrap();
        let mut bytes = checkpoint_to_bytes(&model, None);
        bytes[0] ^= 0xff;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes2 = checkpoint_to_bytes(&model, None);
        bytes2[4] = 99;
        assert!(matches!(checkpoint_from_bytes(&bytes2), Err(Error::VersionMismatch { .. })));
        let bytes3 = checkpoint_to_bytes(&model, None);
        assert!(matches!(
            checkpoint_from_bytes(&bytes3[..bytes3.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }
}
