//! Contrastive training: symmetric InfoNCE loss over a batch, Adam with
//! bias correction applied through the strategy's trainable view, cosine
//! annealing with linear warmup, and the per-session loop.

use crate::adapt::{ParamRef, SessionState, Strategy, StrategyKind, ViewEntry};
use crate::dataio::Sample;
use crate::encoder::{encode_images_var, harvest_grads, register_on_tape, DualEncoder, IdentityCompose};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ── CLIP loss ────────────────────────────────────────────────────────

/// Symmetric cross-entropy over the scaled B x B cosine-similarity matrix:
/// 0.5 * [CE(rows -> diagonal) + CE(columns -> diagonal)]. Embedding rows
/// must already be unit-norm.
pub fn clip_loss_var(tape: &mut Tape, image_emb: Var, text_emb: Var, temperature: f64) -> Result<Var> {
    let (b, e) = tape.shape(image_emb);
    let (bt, et) = tape.shape(text_emb);
    if b == 0 {
        return Err(Error::Input("clip loss on an empty batch".into()));
    }
    if (b, e) != (bt, et) {
        return Err(Error::Dimension { op: "clip_loss", lhs: vec![b, e], rhs: vec![bt, et] });
    }
    let txt_t = tape.transpose(text_emb);
    let sims = tape.matmul(image_emb, txt_t)?;
    let logits = tape.scale(sims, temperature);
    let targets: Vec<usize> = (0..b).collect();
    let ce_rows = tape.cross_entropy_mean(logits, &targets)?;
    let logits_t = tape.transpose(logits);
    let ce_cols = tape.cross_entropy_mean(logits_t, &targets)?;
    let sum = tape.add(ce_rows, ce_cols)?;
    Ok(tape.scale(sum, 0.5))
}

// ── Adam ─────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update on the coordinates admitted by `mask`.
/// Masked-out coordinates receive neither moment updates nor parameter
/// writes, which keeps them bit-identical across any number of steps.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_masked(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    mask: Option<&[bool]>,
    step: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for j in 0..theta.len() {
        if let Some(ms) = mask {
            if !ms[j] {
                continue;
            }
        }
        let g = grad[j];
        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[j] / bc1;
        let vh = v[j] / bc2;
        theta[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// First/second moment buffers per view entry plus the shared step counter.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update across the whole trainable view. Gradients that
    /// were never populated count as zero.
    pub fn step(
        &mut self,
        model: &mut DualEncoder,
        state: &mut SessionState,
        lr: f64,
    ) -> Result<()> {
        if self.m.is_empty() {
            for entry in &state.view {
                let len = state.tensor(model, entry.param).len();
                self.m.push(vec![0.0; len]);
                self.v.push(vec![0.0; len]);
            }
        }
        self.step += 1;
        for (i, entry) in state.view.clone().iter().enumerate() {
            let name = match entry.param {
                ParamRef::Model(id) => model.store.name(id).to_string(),
                ParamRef::Adapter((a, s)) => format!("adapter{a}.slot{s}"),
            };
            let tensor = match entry.param {
                ParamRef::Model(id) => model.store.get_mut(id),
                ParamRef::Adapter(r) => state.bank.tensor_mut(r),
            };
            let grad = match &tensor.grad {
                Some(g) => g.clone(),
                None => vec![0.0; tensor.len()],
            };
            for (j, &g) in grad.iter().enumerate() {
                let admitted = entry.mask.as_ref().map_or(true, |m| m[j]);
                if admitted && !g.is_finite() {
                    return Err(Error::Numeric {
                        tensor: name,
                        detail: format!("non-finite gradient at coordinate {j}"),
                    });
                }
            }
            adam_update_masked(
                &mut tensor.data,
                &grad,
                &mut self.m[i],
                &mut self.v[i],
                entry.mask.as_deref(),
                self.step,
                lr,
            );
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

// ── Learning-rate schedule ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Warmup fixed at 10% of the total step count.
    pub fn with_warmup_frac(peak_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        ScheduleConfig {
            peak_lr,
            warmup_steps: (total_steps as f64 * 0.10).floor() as u64,
            total_steps,
            min_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Input(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp 0 -> peak over warmup, then cosine from peak to min.
pub fn lr_at(schedule: &ScheduleConfig, step: u64) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::Input(format!(
            "step {step} beyond schedule end {}",
            schedule.total_steps
        )));
    }
    if step < schedule.warmup_steps {
        return Ok(schedule.peak_lr * step as f64 / schedule.warmup_steps as f64);
    }
    let span = schedule.total_steps - schedule.warmup_steps;
    let progress = if span == 0 { 0.0 } else { (step - schedule.warmup_steps) as f64 / span as f64 };
    Ok(schedule.min_lr
        + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Session loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, peak_lr: f64, seed: u64) -> Self {
        TrainConfig { epochs, batch_size, peak_lr, min_lr: 0.0, seed }
    }
}

/// One line of the per-session JSON-lines log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SessionLog {
    pub epochs: Vec<EpochLog>,
    pub plan: Option<crate::select::SelectionPlan>,
    pub plan_report: Option<String>,
    pub trainable_coords: usize,
}

/// Train one session: build the strategy's plan and view, then run
/// shuffled mini-batches of the contrastive loss under the schedule.
/// Deterministic for a fixed seed. Adapters are merged back into the
/// base weights before returning.
pub fn train_session(
    model: &mut DualEncoder,
    strategy: &mut Strategy,
    samples: &[&Sample],
    cfg: &TrainConfig,
) -> Result<SessionLog> {
    if samples.is_empty() {
        return Err(Error::Input("training session with no samples".into()));
    }
    if cfg.epochs == 0 {
        return Ok(SessionLog::default());
    }
    let batch = cfg.batch_size.clamp(1, samples.len());
    let adapter_seed = cfg.seed.wrapping_add(0xADA9_0001);
    let mut state = strategy.begin_session(model, samples, batch, adapter_seed)?;
    let steps_per_epoch = samples.len().div_ceil(batch) as u64;
    let schedule =
        ScheduleConfig::with_warmup_frac(cfg.peak_lr, cfg.min_lr, cfg.epochs as u64 * steps_per_epoch);

    // Frozen text anchors, computed once.
    let mut text_embs = Vec::with_capacity(samples.len());
    for s in samples {
        text_embs.push(model.encode_text(&s.tokens)?.data.clone());
    }

    let ewc_snapshot = strategy.ewc.clone();
    let vision_ids = model.layout.vision_param_ids();

    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = SessionLog {
        epochs: Vec::with_capacity(cfg.epochs),
        plan: state.plan.clone(),
        plan_report: state.plan.as_ref().map(|p| p.report()),
        trainable_coords: state.coord_count(model),
    };

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last_lr = 0.0;
    for epoch in 0..cfg.epochs {
        let t0 = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(batch) {
            model.zero_grads();
            state.bank.zero_grads();
            state.bank.begin_pass();
            let mut tape = Tape::new();
            let tm = register_on_tape(model, &mut state.bank, &mut tape)?;
            let mut patch_mats = Vec::with_capacity(chunk.len());
            let mut text_rows = Vec::with_capacity(chunk.len() * model.config.embed_dim);
            for &i in chunk {
                patch_mats.push(model.image_to_patches(&samples[i].image)?);
                text_rows.extend_from_slice(&text_embs[i]);
            }
            let img = encode_images_var(&mut tape, &tm, &model.config, patch_mats)?;
            let txt = tape.leaf(chunk.len(), model.config.embed_dim, text_rows);
            let loss = clip_loss_var(&mut tape, img, txt, model.temperature)?;
            let mut loss_value = tape.value(loss)[0];
            tape.backward(loss)?;
            harvest_grads(&tape, &tm.bindings, &mut model.store);
            state.bank.harvest(&tape);
            state.bank.apply_grad_masks();

            if strategy.config.kind == StrategyKind::Fewc {
                if let Some(ewc) = &ewc_snapshot {
                    loss_value += apply_ewc(model, &vision_ids, ewc, strategy.config.ewc_lambda)?;
                }
            }

            // lr sampled at the 0-based step index: the ramp starts at 0
            // and the final step keeps a nonzero rate.
            let lr = lr_at(&schedule, adam.step_count())?;
            adam.step(model, &mut state, lr)?;
            last_lr = lr;
            loss_sum += loss_value * chunk.len() as f64;
            weight += chunk.len();
        }
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / weight as f64,
            lr: last_lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }

    strategy.end_session(model, &state)?;

    if strategy.config.kind == StrategyKind::Fewc {
        strategy.ewc = Some(compute_ewc_state(model, samples, batch)?);
    }
    Ok(log)
}

/// Add the EWC penalty gradient to the trainable vision parameters and
/// return the penalty value for the loss trace.
fn apply_ewc(
    model: &mut DualEncoder,
    vision_ids: &[usize],
    ewc: &crate::adapt::EwcState,
    lambda: f64,
) -> Result<f64> {
    let mut penalty = 0.0;
    for (slot, &id) in vision_ids.iter().enumerate() {
        let anchor = &ewc.anchor[slot];
        let fisher = &ewc.fisher[slot];
        let t = model.store.get(id);
        penalty += crate::adapt::ewc_penalty(&t.data, anchor, fisher, lambda)?;
        if !t.requires_grad {
            continue;
        }
        let delta: Vec<f64> = t
            .data
            .iter()
            .zip(anchor.iter().zip(fisher))
            .map(|(&p, (&a, &f))| lambda * f * (p - a))
            .collect();
        model.store.get_mut(id).accum_grad(&delta);
    }
    Ok(penalty)
}

/// Diagonal empirical Fisher over the session data at the current
/// parameters: the mean over batches of the squared batch gradient.
pub fn compute_ewc_state(
    model: &mut DualEncoder,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<crate::adapt::EwcState> {
    let vision_ids = model.layout.vision_param_ids();
    model.set_trainable(&vision_ids);
    let mut fisher: Vec<Vec<f64>> =
        vision_ids.iter().map(|&id| vec![0.0; model.store.get(id).len()]).collect();
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        model.zero_grads();
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
        for (slot, &id) in vision_ids.iter().enumerate() {
            if let Some(g) = &model.store.get(id).grad {
                for (f, &gv) in fisher[slot].iter_mut().zip(g) {
                    *f += gv * gv;
                }
            }
        }
        batches += 1;
    }
    for f in fisher.iter_mut() {
        for v in f.iter_mut() {
            *v /= batches as f64;
        }
    }
    let anchor = vision_ids.iter().map(|&id| model.store.get(id).data.clone()).collect();
    model.zero_grads();
    model.set_trainable(&[]);
    Ok(crate::adapt::EwcState { anchor, fisher })
}

/// Trainable view made of explicit entries; exposed for tests that drive
/// the optimizer without a full strategy.
pub fn view_of(entries: Vec<ViewEntry>) -> Vec<ViewEntry> {
    entries
}
