//! Gradient-guided structured selection: the TOP-C operator, the
//! group-constrained optimal mask, per-head importance scores, and the
//! fc1 sparsity mask. All selection is deterministic; ties break toward
//! the lower index.

use crate::dataio::Sample;
use crate::encoder::{register_on_tape, encode_images_var, harvest_grads, DualEncoder, IdentityCompose};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::train::clip_loss_var;
use crate::wire::{Reader, Writer};

// ── Pure selection operators ─────────────────────────────────────────

/// Binary mask keeping the `c` largest-magnitude coordinates of `x`.
pub fn top_c(x: &[f64], c: usize) -> Result<Vec<bool>> {
    if c > x.len() {
        return Err(Error::Input(format!(
            "top_c budget {c} exceeds dimension {}",
            x.len()
        )));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; x.len()];
    for &i in order.iter().take(c) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Importance score per head: the summed squared gradient over the head's
/// q, k and v rows of the concatenated qkv gradient [3*H*Dh, D].
pub fn head_scores(grad_qkv: &[f64], heads: usize, head_dim: usize, dim: usize) -> Result<Vec<f64>> {
    if grad_qkv.len() != 3 * heads * head_dim * dim {
        return Err(Error::Dimension {
            op: "head_scores",
            lhs: vec![grad_qkv.len()],
            rhs: vec![3 * heads * head_dim, dim],
        });
    }
    if grad_qkv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            tensor: "grad_qkv".into(),
            detail: "non-finite gradient entry".into(),
        });
    }
    let rows_per_head = 3 * head_dim;
    let mut scores = vec![0.0; heads];
    for (h, s) in scores.iter_mut().enumerate() {
        let start = h * rows_per_head * dim;
        *s = grad_qkv[start..start + rows_per_head * dim]
            .iter()
            .map(|g| g * g)
            .sum();
    }
    Ok(scores)
}

/// Indices of the `k` largest scores, ascending; ties toward lower index.
pub fn select_heads(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Input(format!(
            "top-k {k} out of range for {} heads",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Binary mask over a [rows, cols] fc1 gradient keeping the
/// floor(sparsity * rows * cols) entries of largest squared value.
pub fn fc1_mask(grad: &[f64], rows: usize, cols: usize, sparsity: f64) -> Result<Vec<bool>> {
    if grad.len() != rows * cols {
        return Err(Error::Dimension { op: "fc1_mask", lhs: vec![grad.len()], rhs: vec![rows, cols] });
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::Input(format!("sparsity {sparsity} outside (0, 1]")));
    }
    let count = (sparsity * (rows * cols) as f64).floor() as usize;
    if count == 0 {
        return Err(Error::Input(format!(
            "sparsity {sparsity} selects zero entries of a {rows}x{cols} matrix"
        )));
    }
    top_c(grad, count)
}

// ── Group-constrained optimal mask ───────────────────────────────────

/// Disjoint coordinate groups with per-group selection budgets.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub groups: Vec<Vec<usize>>,
    pub budgets: Vec<usize>,
}

impl GroupSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.groups.len() != self.budgets.len() {
            return Err(Error::Input(format!(
                "{} groups but {} budgets",
                self.groups.len(),
                self.budgets.len()
            )));
        }
        let mut seen = vec![false; dim];
        for (g, group) in self.groups.iter().enumerate() {
            if self.budgets[g] > group.len() {
                return Err(Error::Input(format!(
                    "budget {} exceeds group {g} size {}",
                    self.budgets[g],
                    group.len()
                )));
            }
            for &i in group {
                if i >= dim {
                    return Err(Error::Input(format!("group {g} index {i} out of range {dim}")));
                }
                if seen[i] {
                    return Err(Error::Input(format!("groups overlap at coordinate {i}")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub fn total_budget(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Maximizer of the masked gradient energy under per-group budgets:
/// within each group, keep its budget's worth of largest-magnitude
/// coordinates; zero everywhere outside the groups.
pub fn optimal_group_mask(grad: &[f64], spec: &GroupSpec) -> Result<Vec<bool>> {
    spec.validate(grad.len())?;
    let mut mask = vec![false; grad.len()];
    for (group, &budget) in spec.groups.iter().zip(&spec.budgets) {
        let mut members = group.clone();
        members.sort_unstable();
        let vals: Vec<f64> = members.iter().map(|&i| grad[i]).collect();
        let local = top_c(&vals, budget)?;
        for (j, &keep) in local.iter().enumerate() {
            if keep {
                mask[members[j]] = true;
            }
        }
    }
    Ok(mask)
}

// ── Selection plan ───────────────────────────────────────────────────

/// Per-block selection for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    /// Head importance scores, recorded for audit.
    pub scores: Vec<f64>,
    /// Chosen head indices, ascending; may be empty (fc1-only updates).
    pub heads: Vec<usize>,
    /// Flat row-major mask over W_fc1 [ff_dim, dim].
    pub fc1_mask: Vec<bool>,
}

/// Frozen selection for the duration of a training session.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPlan {
    pub top_k: usize,
    pub sparsity: f64,
    pub blocks: Vec<BlockPlan>,
}

impl SelectionPlan {
    /// Row mask over the concatenated qkv rows [3*H*Dh] for a block:
    /// true on every q/k/v row of a chosen head.
    pub fn qkv_row_mask(&self, block: usize, heads: usize, head_dim: usize) -> Vec<bool> {
        let mut mask = vec![false; 3 * heads * head_dim];
        for &h in &self.blocks[block].heads {
            let start = 3 * h * head_dim;
            for r in start..start + 3 * head_dim {
                mask[r] = true;
            }
        }
        mask
    }

    pub fn fc1_selected(&self, block: usize) -> usize {
        self.blocks[block].fc1_mask.iter().filter(|&&b| b).count()
    }

    /// Human-readable audit report.
    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "selection plan: top_k={} sparsity={:.4}", self.top_k, self.sparsity).unwrap();
        for (b, blk) in self.blocks.iter().enumerate() {
            writeln!(
                out,
                "block {b}: heads {:?}, fc1 density {}/{}",
                blk.heads,
                blk.fc1_mask.iter().filter(|&&m| m).count(),
                blk.fc1_mask.len()
            )
            .unwrap();
            write!(out, "  scores:").unwrap();
            for s in &blk.scores {
                write!(out, " {s:.6e}").unwrap();
            }
            writeln!(out).unwrap();
        }
        out
    }

    pub fn write(&self, w: &mut Writer) {
        w.u32(self.top_k as u32);
        w.f64(self.sparsity);
        w.u32(self.blocks.len() as u32);
        for blk in &self.blocks {
            w.u32(blk.scores.len() as u32);
            for &s in &blk.scores {
                w.f64(s);
            }
            w.u32(blk.heads.len() as u32);
            for &h in &blk.heads {
                w.u32(h as u32);
            }
            w.u64(blk.fc1_mask.len() as u64);
            let mut byte = 0u8;
            for (i, &bit) in blk.fc1_mask.iter().enumerate() {
                if bit {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    w.u8(byte);
                    byte = 0;
                }
            }
            if blk.fc1_mask.len() % 8 != 0 {
                w.u8(byte);
            }
        }
    }

    pub fn read(r: &mut Reader) -> Result<Self> {
        let top_k = r.u32()? as usize;
        let sparsity = r.f64()?;
        if !sparsity.is_finite() {
            return Err(Error::Corrupt("non-finite plan sparsity".into()));
        }
        let nblocks = r.u32()? as usize;
        r.check_capacity(nblocks, 1)?;
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let ns = r.u32()? as usize;
            let scores = r.f64_vec(ns)?;
            let nh = r.u32()? as usize;
            r.check_capacity(nh, 4)?;
            let mut heads = Vec::with_capacity(nh);
            for _ in 0..nh {
                heads.push(r.u32()? as usize);
            }
            let nbits = r.u64()? as usize;
            let nbytes = nbits.div_ceil(8);
            let bytes = r.bytes(nbytes)?;
            let mut fc1_mask = Vec::with_capacity(nbits);
            for i in 0..nbits {
                fc1_mask.push(bytes[i / 8] & (1 << (i % 8)) != 0);
            }
            blocks.push(BlockPlan { scores, heads, fc1_mask });
        }
        Ok(SelectionPlan { top_k, sparsity, blocks })
    }
}

// ── Plan construction ────────────────────────────────────────────────

/// One full-dataset gradient accumulation pass (no parameter update),
/// then per block: head scores -> top-k heads; fc1 magnitude mask.
/// `top_k == 0` selects no heads (the fc1-only baseline). Gradients are
/// zeroed afterward; caller re-establishes trainable flags.
pub fn build_selection_plan(
    model: &mut DualEncoder,
    samples: &[&Sample],
    top_k: usize,
    sparsity: f64,
    batch_size: usize,
) -> Result<SelectionPlan> {
    if samples.is_empty() {
        return Err(Error::Input("selection over empty task data".into()));
    }
    if top_k > model.config.heads {
        return Err(Error::Input(format!(
            "top-k {top_k} exceeds head count {}",
            model.config.heads
        )));
    }
    let batch = batch_size.max(1);

    // Only qkv and fc1 gradients are needed for selection.
    let mut observed: Vec<usize> = Vec::new();
    for b in &model.layout.blocks {
        observed.push(b.w_qkv);
        observed.push(b.w_fc1);
    }
    model.set_trainable(&observed);
    model.zero_grads();

    // Canonical order, fixed batching: selection is deterministic in the
    // sample sequence it is given.
    for chunk in samples.chunks(batch) {
        let mut tape = Tape::new();
        let tm = register_on_tape(model, &mut IdentityCompose, &mut tape)?;
        let mut patch_mats = Vec::with_capacity(chunk.len());
        let mut text_rows = Vec::with_capacity(chunk.len() * model.config.embed_dim);
        for s in chunk {
            patch_mats.push(model.image_to_patches(&s.image)?);
            text_rows.extend_from_slice(&model.encode_text(&s.tokens)?.data);
        }
        let img = encode_images_var(&mut tape, &tm, &model.config, patch_mats)?;
        let txt = tape.leaf(chunk.len(), model.config.embed_dim, text_rows);
        let loss = clip_loss_var(&mut tape, img, txt, model.temperature)?;
        tape.backward(loss)?;
        harvest_grads(&tape, &tm.bindings, &mut model.store);
    }

    let cfg = model.config.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for ids in model.layout.blocks.clone() {
        let gq = model
            .store
            .get(ids.w_qkv)
            .grad
            .clone()
            .ok_or_else(|| Error::State("selection pass produced no qkv gradient".into()))?;
        let scores = head_scores(&gq, cfg.heads, cfg.head_dim, cfg.dim)?;
        let heads = if top_k == 0 { Vec::new() } else { select_heads(&scores, top_k)? };
        let gf = model
            .store
            .get(ids.w_fc1)
            .grad
            .clone()
            .ok_or_else(|| Error::State("selection pass produced no fc1 gradient".into()))?;
        let mask = fc1_mask(&gf, cfg.ff_dim, cfg.dim, sparsity)?;
        blocks.push(BlockPlan { scores, heads, fc1_mask: mask });
    }
    model.zero_grads();
    Ok(SelectionPlan { top_k, sparsity, blocks })
}
