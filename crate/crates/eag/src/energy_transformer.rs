//! Stage 2: masked autoregressive transformer over latent sequences with a
//! noise-conditioned MLP generator head, trained by the two-sample energy
//! loss and sampled by cosine-schedule progressive unmasking, with optional
//! behavioral conditioning via classifier-free guidance.
//!
//! Structure: visible latent positions (plus condition tokens) pass through
//! a bidirectional transformer encoder; the decoder rebuilds the full token
//! set with a learned mask token at predicted positions; the per-position
//! decoder feature drives an MLP head whose residual blocks inject uniform
//! noise through adaptive layer normalization (shift/scale/gate maps of the
//! noise embedding). Two head samples from one shared encoder/decoder pass
//! estimate the energy loss at each predicted position.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorCondition, ConditionKind, LatentSequence};
use crate::error::{EagError, Result};
use crate::numerics::{RandomStream, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::trainer::{self, Adam, TrainConfig, TrainingLog};

const LN_EPS: f64 = 1e-5;
const PAD_BIAS: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ETConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    /// Transformer FFN hidden width = embed_dim * ffn_mult.
    pub ffn_mult: usize,
    pub mlp_depth: usize,
    pub mlp_width: usize,
    pub noise_dim: usize,
    /// Energy-score exponent, in (0, 2]; 2 is proper but not strictly proper.
    pub alpha: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub train_temperature: f64,
    pub infer_temperature: f64,
    /// Draw one noise vector per sequence instead of per position.
    pub noise_per_sequence: bool,
    /// Latent dimension d produced by stage 1.
    pub latent_dim: usize,
    /// Maximum sequence length (positional table size).
    pub max_len: usize,
    /// Conditioning kind the model is built for, if any.
    pub condition: Option<ConditionKind>,
}

impl Default for ETConfig {
    fn default() -> Self {
        ETConfig {
            embed_dim: 256,
            encoder_depth: 4,
            decoder_depth: 4,
            num_heads: 4,
            ffn_mult: 4,
            mlp_depth: 6,
            mlp_width: 768,
            noise_dim: 64,
            alpha: 1.0,
            mask_ratio_min: 0.7,
            mask_ratio_max: 1.0,
            train_temperature: 1.0,
            infer_temperature: 0.7,
            noise_per_sequence: false,
            latent_dim: 8,
            max_len: 256,
            condition: None,
        }
    }
}

impl ETConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.encoder_depth == 0
            || self.decoder_depth == 0
            || self.num_heads == 0
            || self.ffn_mult == 0
            || self.mlp_depth == 0
            || self.mlp_width == 0
            || self.latent_dim == 0
            || self.max_len == 0
        {
            return Err(EagError::config("energy transformer counts must all be >= 1"));
        }
        if self.noise_dim == 0 {
            return Err(EagError::config("noise_dim must be >= 1"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(EagError::config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(EagError::config(format!("alpha must be in (0, 2], got {}", self.alpha)));
        }
        if !(0.0 <= self.mask_ratio_min
            && self.mask_ratio_min <= self.mask_ratio_max
            && self.mask_ratio_max <= 1.0)
        {
            return Err(EagError::config("mask ratios must satisfy 0 <= min <= max <= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance strength gamma; 1 = conditional only, 0 = null only.
    pub gamma: f64,
    /// Fraction of training trials whose condition tokens are replaced by
    /// the learned null token.
    pub null_dropout_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { gamma: 4.0, null_dropout_prob: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.null_dropout_prob) {
            return Err(EagError::config("null_dropout_prob must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Number of masked positions after each of K steps of the cosine schedule:
/// masked(k) = round(T cos(pi/2 * k/K)), clamped monotone, ending at 0.
/// Newly-unmasked counts are the successive differences; they are nonnegative
/// and sum to T.
pub fn cosine_mask_counts(t: usize, k_steps: usize) -> Result<Vec<usize>> {
    if k_steps == 0 || k_steps > t {
        return Err(EagError::config(format!(
            "schedule steps must satisfy 1 <= K <= T (K = {k_steps}, T = {t})"
        )));
    }
    let mut counts = Vec::with_capacity(k_steps + 1);
    for k in 0..=k_steps {
        let frac = (std::f64::consts::FRAC_PI_2 * k as f64 / k_steps as f64).cos();
        let mut c = (t as f64 * frac).round() as usize;
        c = c.min(t);
        if let Some(&prev) = counts.last() {
            c = c.min(prev);
        }
        counts.push(c);
    }
    counts[k_steps] = 0;
    Ok(counts)
}

/// Progressive unmasking state for one trial.
#[derive(Debug, Clone)]
pub struct MaskState {
    /// true = still masked (to be predicted).
    pub mask: Vec<bool>,
    /// Fixed unmask order over positions.
    pub order: Vec<usize>,
    /// Completed steps.
    pub step: usize,
    pub total_steps: usize,
    counts: Vec<usize>,
}

impl MaskState {
    pub fn new(t: usize, k_steps: usize, rng: &mut RandomStream) -> Result<Self> {
        let counts = cosine_mask_counts(t, k_steps)?;
        Ok(MaskState {
            mask: vec![true; t],
            order: rng.permutation(t),
            step: 0,
            total_steps: k_steps,
            counts,
        })
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Advance one step; returns the newly unmasked positions.
    pub fn advance(&mut self) -> Vec<usize> {
        assert!(!self.done(), "mask schedule already finished");
        let t = self.mask.len();
        let before = t - self.counts[self.step];
        self.step += 1;
        let after = t - self.counts[self.step];
        let newly: Vec<usize> = self.order[before..after].to_vec();
        for &p in &newly {
            self.mask[p] = false;
        }
        newly
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct VitBlockH {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    f1: usize,
    fb1: usize,
    f2: usize,
    fb2: usize,
}

struct HeadBlockH {
    scale_w: usize,
    scale_b: usize,
    shift_w: usize,
    shift_b: usize,
    gate_w: usize,
    gate_b: usize,
    f1: usize,
    fb1: usize,
    f2: usize,
    fb2: usize,
}

struct CondH {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    type_tok: usize,
    null_tok: usize,
}

struct EtHandles {
    in_w: usize,
    in_b: usize,
    enc_pos: usize,
    start_tok: usize,
    enc_blocks: Vec<VitBlockH>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    enc2dec_w: usize,
    enc2dec_b: usize,
    mask_tok: usize,
    dec_pos: usize,
    dec_blocks: Vec<VitBlockH>,
    dec_ln_g: usize,
    dec_ln_b: usize,
    head_in_w: usize,
    head_in_b: usize,
    noise_w: usize,
    noise_b: usize,
    head_blocks: Vec<HeadBlockH>,
    head_out_w: usize,
    head_out_b: usize,
    cond: Option<CondH>,
}

pub struct EtModel {
    pub cfg: ETConfig,
    store: ParamStore,
    handles: EtHandles,
}

fn add_vit_block(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize,
                 rng: &mut RandomStream) -> VitBlockH {
    let s = 0.02;
    let lin = |name: &str, rows: usize, cols: usize, rng: &mut RandomStream, st: &mut ParamStore| {
        st.add(format!("{prefix}.{name}"), Tensor::randn(&[rows, cols], s, rng))
    };
    VitBlockH {
        ln1_g: store.add(format!("{prefix}.ln1.g"), Tensor::full(&[1, d], 1.0)),
        ln1_b: store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, d])),
        wq: lin("wq", d, d, rng, store),
        bq: store.add(format!("{prefix}.bq"), Tensor::zeros(&[1, d])),
        wk: lin("wk", d, d, rng, store),
        bk: store.add(format!("{prefix}.bk"), Tensor::zeros(&[1, d])),
        wv: lin("wv", d, d, rng, store),
        bv: store.add(format!("{prefix}.bv"), Tensor::zeros(&[1, d])),
        wo: lin("wo", d, d, rng, store),
        bo: store.add(format!("{prefix}.bo"), Tensor::zeros(&[1, d])),
        ln2_g: store.add(format!("{prefix}.ln2.g"), Tensor::full(&[1, d], 1.0)),
        ln2_b: store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, d])),
        f1: lin("ffn.w1", d, hidden, rng, store),
        fb1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[1, hidden])),
        f2: lin("ffn.w2", hidden, d, rng, store),
        fb2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[1, d])),
    }
}

fn add_head_block(store: &mut ParamStore, prefix: &str, w: usize, rng: &mut RandomStream) -> HeadBlockH {
    let s = 0.02;
    HeadBlockH {
        scale_w: store.add(format!("{prefix}.scale.w"), Tensor::randn(&[w, w], s, rng)),
        scale_b: store.add(format!("{prefix}.scale.b"), Tensor::zeros(&[1, w])),
        shift_w: store.add(format!("{prefix}.shift.w"), Tensor::randn(&[w, w], s, rng)),
        shift_b: store.add(format!("{prefix}.shift.b"), Tensor::zeros(&[1, w])),
        gate_w: store.add(format!("{prefix}.gate.w"), Tensor::randn(&[w, w], s, rng)),
        gate_b: store.add(format!("{prefix}.gate.b"), Tensor::full(&[1, w], 1.0)),
        f1: store.add(format!("{prefix}.ffn.w1"), Tensor::randn(&[w, w], s, rng)),
        fb1: store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[1, w])),
        f2: store.add(format!("{prefix}.ffn.w2"), Tensor::randn(&[w, w], s, rng)),
        fb2: store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[1, w])),
    }
}

impl EtModel {
    pub fn new(cfg: &ETConfig, rng: &mut RandomStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hidden = d * cfg.ffn_mult;
        let w = cfg.mlp_width;
        let s = 0.02;
        let mut store = ParamStore::new();
        let in_w = store.add("in.w", Tensor::randn(&[cfg.latent_dim, d], s, rng));
        let in_b = store.add("in.b", Tensor::zeros(&[1, d]));
        // +1 slot for the angle condition token.
        let enc_pos = store.add("enc.pos", Tensor::randn(&[cfg.max_len + 1, d], s, rng));
        let start_tok = store.add("enc.start", Tensor::randn(&[1, d], s, rng));
        let enc_blocks = (0..cfg.encoder_depth)
            .map(|i| add_vit_block(&mut store, &format!("enc.block{i}"), d, hidden, rng))
            .collect();
        let enc_ln_g = store.add("enc.ln.g", Tensor::full(&[1, d], 1.0));
        let enc_ln_b = store.add("enc.ln.b", Tensor::zeros(&[1, d]));
        let enc2dec_w = store.add("enc2dec.w", Tensor::randn(&[d, d], s, rng));
        let enc2dec_b = store.add("enc2dec.b", Tensor::zeros(&[1, d]));
        let mask_tok = store.add("dec.mask", Tensor::randn(&[1, d], s, rng));
        let dec_pos = store.add("dec.pos", Tensor::randn(&[cfg.max_len + 1, d], s, rng));
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| add_vit_block(&mut store, &format!("dec.block{i}"), d, hidden, rng))
            .collect();
        let dec_ln_g = store.add("dec.ln.g", Tensor::full(&[1, d], 1.0));
        let dec_ln_b = store.add("dec.ln.b", Tensor::zeros(&[1, d]));
        let head_in_w = store.add("head.in.w", Tensor::randn(&[d, w], s, rng));
        let head_in_b = store.add("head.in.b", Tensor::zeros(&[1, w]));
        let noise_w = store.add("head.noise.w", Tensor::randn(&[cfg.noise_dim, w], s, rng));
        let noise_b = store.add("head.noise.b", Tensor::zeros(&[1, w]));
        let head_blocks = (0..cfg.mlp_depth)
            .map(|i| add_head_block(&mut store, &format!("head.block{i}"), w, rng))
            .collect();
        let head_out_w = store.add("head.out.w", Tensor::randn(&[w, cfg.latent_dim], s, rng));
        let head_out_b = store.add("head.out.b", Tensor::zeros(&[1, cfg.latent_dim]));
        let cond = cfg.condition.map(|_| CondH {
            w1: store.add("cond.w1", Tensor::randn(&[2, d], s, rng)),
            b1: store.add("cond.b1", Tensor::zeros(&[1, d])),
            w2: store.add("cond.w2", Tensor::randn(&[d, d], s, rng)),
            b2: store.add("cond.b2", Tensor::zeros(&[1, d])),
            type_tok: store.add("cond.type", Tensor::randn(&[1, d], s, rng)),
            null_tok: store.add("cond.null", Tensor::randn(&[1, d], s, rng)),
        });
        let handles = EtHandles {
            in_w,
            in_b,
            enc_pos,
            start_tok,
            enc_blocks,
            enc_ln_g,
            enc_ln_b,
            enc2dec_w,
            enc2dec_b,
            mask_tok,
            dec_pos,
            dec_blocks,
            dec_ln_g,
            dec_ln_b,
            head_in_w,
            head_in_b,
            noise_w,
            noise_b,
            head_blocks,
            head_out_w,
            head_out_b,
            cond,
        };
        Ok(EtModel { cfg: cfg.clone(), store, handles })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn vit_block(
        &self,
        tape: &Tape,
        vars: &[Var],
        blk: &VitBlockH,
        x: Var,
        batch: usize,
        seq: usize,
        bias: Option<&Tensor>,
    ) -> Var {
        let ln = tape.layer_norm(x, LN_EPS);
        let ln = tape.mul_row(ln, vars[blk.ln1_g]);
        let ln = tape.add_row(ln, vars[blk.ln1_b]);
        let q = tape.linear(ln, vars[blk.wq], vars[blk.bq]);
        let k = tape.linear(ln, vars[blk.wk], vars[blk.bk]);
        let v = tape.linear(ln, vars[blk.wv], vars[blk.bv]);
        let att = tape.attention(
            q,
            k,
            v,
            batch,
            self.cfg.num_heads,
            seq,
            seq,
            bias.cloned(),
        );
        let att = tape.linear(att, vars[blk.wo], vars[blk.bo]);
        let x = tape.add(x, att);
        let ln2 = tape.layer_norm(x, LN_EPS);
        let ln2 = tape.mul_row(ln2, vars[blk.ln2_g]);
        let ln2 = tape.add_row(ln2, vars[blk.ln2_b]);
        let f = tape.linear(ln2, vars[blk.f1], vars[blk.fb1]);
        let f = tape.gelu(f);
        let f = tape.linear(f, vars[blk.f2], vars[blk.fb2]);
        tape.add(x, f)
    }

    fn affine_ln(&self, tape: &Tape, vars: &[Var], g: usize, b: usize, x: Var) -> Var {
        let ln = tape.layer_norm(x, LN_EPS);
        let ln = tape.mul_row(ln, vars[g]);
        tape.add_row(ln, vars[b])
    }

    /// Latent tokens: linear projection of z plus learned positional encoding.
    fn latent_tokens(&self, tape: &Tape, vars: &[Var], z: Var, batch: usize, t: usize) -> Var {
        let tok = tape.linear(z, vars[self.handles.in_w], vars[self.handles.in_b]);
        let pos_idx: Vec<usize> = (0..batch * t).map(|r| r % t).collect();
        let pos = tape.gather_rows(vars[self.handles.enc_pos], Arc::new(pos_idx));
        tape.add(tok, pos)
    }

    /// Condition token content for a batch: [batch * c_tokens, embed].
    /// Null-dropped trials get the learned null token as content; positional
    /// and type additions are kept so slots stay identifiable.
    fn condition_tokens(
        &self,
        tape: &Tape,
        vars: &[Var],
        conditions: &[&BehaviorCondition],
        null_flags: &[bool],
        t: usize,
    ) -> Result<(Var, usize)> {
        let cond_h = self
            .handles
            .cond
            .as_ref()
            .ok_or_else(|| EagError::config("model was not built with conditioning"))?;
        let kind = self.cfg.condition.expect("condition handles imply a kind");
        let batch = conditions.len();
        match kind {
            ConditionKind::Angle => {
                let mut feats = Vec::with_capacity(batch * 2);
                for c in conditions {
                    match c {
                        BehaviorCondition::Angle(a) => {
                            feats.push(a.cos());
                            feats.push(a.sin());
                        }
                        _ => {
                            return Err(EagError::config(
                                "angle-conditioned model got a velocity condition",
                            ))
                        }
                    }
                }
                let f = tape.leaf(Tensor::from_vec(&[batch, 2], feats)?);
                let h = tape.linear(f, vars[cond_h.w1], vars[cond_h.b1]);
                let h = tape.gelu(h);
                let h = tape.linear(h, vars[cond_h.w2], vars[cond_h.b2]);
                // Null substitution, then the angle-slot positional row.
                let sources: Vec<(Var, usize)> = null_flags
                    .iter()
                    .enumerate()
                    .map(|(b, &dropped)| {
                        if dropped {
                            (vars[cond_h.null_tok], 0)
                        } else {
                            (h, b)
                        }
                    })
                    .collect();
                let content = tape.assemble_rows(Arc::new(sources));
                let pos_idx: Vec<usize> = vec![self.cfg.max_len; batch];
                let pos = tape.gather_rows(vars[self.handles.enc_pos], Arc::new(pos_idx));
                Ok((tape.add(content, pos), 1))
            }
            ConditionKind::Velocity => {
                let mut feats = Vec::with_capacity(batch * t * 2);
                for c in conditions {
                    match c {
                        BehaviorCondition::Velocity { vx, vy } => {
                            if vx.len() != t || vy.len() != t {
                                return Err(EagError::shape(
                                    "velocity condition length mismatch",
                                ));
                            }
                            for ti in 0..t {
                                feats.push(vx[ti]);
                                feats.push(vy[ti]);
                            }
                        }
                        _ => {
                            return Err(EagError::config(
                                "velocity-conditioned model got an angle condition",
                            ))
                        }
                    }
                }
                let f = tape.leaf(Tensor::from_vec(&[batch * t, 2], feats)?);
                let h = tape.linear(f, vars[cond_h.w1], vars[cond_h.b1]);
                let h = tape.gelu(h);
                let h = tape.linear(h, vars[cond_h.w2], vars[cond_h.b2]);
                let sources: Vec<(Var, usize)> = (0..batch * t)
                    .map(|r| {
                        if null_flags[r / t] {
                            (vars[cond_h.null_tok], 0)
                        } else {
                            (h, r)
                        }
                    })
                    .collect();
                let content = tape.assemble_rows(Arc::new(sources));
                let pos_idx: Vec<usize> = (0..batch * t).map(|r| r % t).collect();
                let pos = tape.gather_rows(vars[self.handles.enc_pos], Arc::new(pos_idx));
                let content = tape.add(content, pos);
                let typed = tape.add_row(content, vars[cond_h.type_tok]);
                Ok((typed, t))
            }
        }
    }

    /// Shared encoder/decoder pass. `latent_input` holds committed/visible
    /// latent values ([batch*t, d]; masked rows are never read). Returns the
    /// decoder features at the latent slots, [batch*t, embed].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_features(
        &self,
        tape: &Tape,
        vars: &[Var],
        latent_input: &Tensor,
        masks: &[Vec<bool>],
        conditions: Option<(&[&BehaviorCondition], &[bool])>,
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let h = &self.handles;
        if t > self.cfg.max_len {
            return Err(EagError::config(format!(
                "sequence length {t} exceeds model max_len {}",
                self.cfg.max_len
            )));
        }
        let z = tape.leaf(latent_input.clone());
        let tokens = self.latent_tokens(tape, vars, z, batch, t);

        // Condition tokens (content + pos [+type]), if any.
        let cond = match conditions {
            Some((conds, null_flags)) => {
                let (v, c) = self.condition_tokens(tape, vars, conds, null_flags, t)?;
                Some((v, c))
            }
            None => None,
        };
        let c_tokens = cond.map(|(_, c)| c).unwrap_or(0);

        // Visible lists per trial.
        let visibles: Vec<Vec<usize>> = masks
            .iter()
            .map(|m| (0..t).filter(|&ti| !m[ti]).collect())
            .collect();
        let v_max = visibles.iter().map(|v| v.len().max(1)).max().unwrap_or(1);
        let s_enc = v_max + c_tokens;

        // Encoder input assembly with padding; a learned start token stands in
        // for trials with zero visible positions.
        let zero_row = tape.leaf(Tensor::zeros(&[1, self.cfg.embed_dim]));
        let mut sources: Vec<(Var, usize)> = Vec::with_capacity(batch * s_enc);
        let mut bias = Tensor::zeros(&[batch, s_enc, s_enc]);
        for (b, vis) in visibles.iter().enumerate() {
            let occupied = vis.len().max(1);
            for s in 0..v_max {
                if s < vis.len() {
                    sources.push((tokens, b * t + vis[s]));
                } else if vis.is_empty() && s == 0 {
                    sources.push((vars[h.start_tok], 0));
                } else {
                    sources.push((zero_row, 0));
                }
            }
            if let Some((cv, c)) = cond {
                for ci in 0..c {
                    sources.push((cv, b * c + ci));
                }
            }
            // Mask padded keys for this trial.
            let bb = &mut bias.data_mut()[b * s_enc * s_enc..(b + 1) * s_enc * s_enc];
            for key in occupied..v_max {
                for qi in 0..s_enc {
                    bb[qi * s_enc + key] = PAD_BIAS;
                }
            }
        }
        let mut x = tape.assemble_rows(Arc::new(sources));
        let any_padding = visibles.iter().any(|v| v.len().max(1) < v_max);
        let bias_opt = if any_padding { Some(bias) } else { None };
        for blk in &h.enc_blocks {
            x = self.vit_block(tape, vars, blk, x, batch, s_enc, bias_opt.as_ref());
        }
        let x = self.affine_ln(tape, vars, h.enc_ln_g, h.enc_ln_b, x);
        let enc_out = tape.linear(x, vars[h.enc2dec_w], vars[h.enc2dec_b]);

        // Decoder assembly: latent slots (encoder output or mask token) plus
        // the encoded condition slots, all with decoder positions.
        let s_dec = t + c_tokens;
        let mut dsources: Vec<(Var, usize)> = Vec::with_capacity(batch * s_dec);
        let mut dpos_idx: Vec<usize> = Vec::with_capacity(batch * s_dec);
        for (b, vis) in visibles.iter().enumerate() {
            let mut slot_of = vec![usize::MAX; t];
            for (s, &ti) in vis.iter().enumerate() {
                slot_of[ti] = s;
            }
            for ti in 0..t {
                if slot_of[ti] == usize::MAX {
                    dsources.push((vars[h.mask_tok], 0));
                } else {
                    dsources.push((enc_out, b * s_enc + slot_of[ti]));
                }
                dpos_idx.push(ti);
            }
            for ci in 0..c_tokens {
                dsources.push((enc_out, b * s_enc + v_max + ci));
                dpos_idx.push(if c_tokens == 1 { self.cfg.max_len } else { ci });
            }
        }
        let mut y = tape.assemble_rows(Arc::new(dsources));
        let dpos = tape.gather_rows(vars[h.dec_pos], Arc::new(dpos_idx));
        y = tape.add(y, dpos);
        for blk in &h.dec_blocks {
            y = self.vit_block(tape, vars, blk, y, batch, s_dec, None);
        }
        let y = self.affine_ln(tape, vars, h.dec_ln_g, h.dec_ln_b, y);

        // Keep only the latent slots.
        let keep: Vec<usize> = (0..batch)
            .flat_map(|b| (0..t).map(move |ti| b * s_dec + ti))
            .collect();
        Ok(tape.gather_rows(y, Arc::new(keep)))
    }

    /// MLP generator: per-row decoder features and noise to latent
    /// predictions. Each residual block applies adaptive layer normalization
    /// ((1+scale)*LN(h) + shift) and a gated feed-forward update, with
    /// shift/scale/gate linear in the noise embedding.
    pub fn head_forward(
        &self,
        tape: &Tape,
        vars: &[Var],
        h_rows: Var,
        eps: Var,
        zero_gates: bool,
    ) -> Var {
        let h = &self.handles;
        let mut x = tape.linear(h_rows, vars[h.head_in_w], vars[h.head_in_b]);
        let nemb = tape.linear(eps, vars[h.noise_w], vars[h.noise_b]);
        for blk in &h.head_blocks {
            let u = tape.layer_norm(x, LN_EPS);
            let sc = tape.linear(nemb, vars[blk.scale_w], vars[blk.scale_b]);
            let sh = tape.linear(nemb, vars[blk.shift_w], vars[blk.shift_b]);
            let mut gt = tape.linear(nemb, vars[blk.gate_w], vars[blk.gate_b]);
            if zero_gates {
                gt = tape.scale(gt, 0.0);
            }
            let scaled = tape.mul(sc, u);
            let h_eps = tape.add(u, scaled);
            let h_eps = tape.add(h_eps, sh);
            let f = tape.linear(h_eps, vars[blk.f1], vars[blk.fb1]);
            let f = tape.gelu(f);
            let f = tape.linear(f, vars[blk.f2], vars[blk.fb2]);
            let gated = tape.mul(gt, f);
            x = tape.add(x, gated);
        }
        let x = tape.layer_norm(x, LN_EPS);
        tape.linear(x, vars[h.head_out_w], vars[h.head_out_b])
    }

    /// Single-position generator call (test and inspection surface).
    pub fn mlp_generate(&self, h_t: &[f64], epsilon: &[f64], zero_gates: bool) -> Result<Vec<f64>> {
        if h_t.len() != self.cfg.embed_dim {
            return Err(EagError::shape("h_t width must equal embed_dim"));
        }
        if epsilon.len() != self.cfg.noise_dim {
            return Err(EagError::shape("epsilon width must equal noise_dim"));
        }
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let hv = tape.leaf(Tensor::from_vec(&[1, h_t.len()], h_t.to_vec())?);
        let ev = tape.leaf(Tensor::from_vec(&[1, epsilon.len()], epsilon.to_vec())?);
        let out = self.head_forward(&tape, &vars, hv, ev, zero_gates);
        Ok(tape.value(out).into_data())
    }

    /// Token embedding surface for one latent sequence: [t, embed_dim].
    pub fn embed_latents(&self, z: &LatentSequence) -> Result<Tensor> {
        if z.dim() != self.cfg.latent_dim {
            return Err(EagError::shape("latent dim mismatch"));
        }
        let t = z.t_bins();
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let zv = tape.leaf(Tensor::from_vec(&[t, z.dim()], z.values().to_vec())?);
        let tok = self.latent_tokens(&tape, &vars, zv, 1, t);
        Ok(tape.value(tok))
    }

    /// Encoded visible tokens for one trial (encoder output after the
    /// projection into decoder space): [visible.max(1) + c_tokens, embed].
    pub fn encoder_features(
        &self,
        z: &LatentSequence,
        mask: &[bool],
        condition: Option<&BehaviorCondition>,
    ) -> Result<Tensor> {
        let t = z.t_bins();
        if mask.len() != t {
            return Err(EagError::shape("mask length must equal t"));
        }
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let input = Tensor::from_vec(&[t, z.dim()], z.values().to_vec())?;
        // Reuse the full pass builder up to the encoder by calling the shared
        // path with one trial, then recompute encoder output shape: simplest
        // is to rebuild the encoder assembly here via forward internals.
        let conds_vec;
        let cond_arg = match condition {
            Some(c) => {
                conds_vec = vec![c];
                Some((conds_vec.as_slice(), &[false][..]))
            }
            None => None,
        };
        // forward_features discards encoder outputs, so build them directly:
        let masks = vec![mask.to_vec()];
        let _ = &masks;
        let zv = tape.leaf(input);
        let tokens = self.latent_tokens(&tape, &vars, zv, 1, t);
        let cond_tok = match cond_arg {
            Some((conds, flags)) => Some(self.condition_tokens(&tape, &vars, conds, flags, t)?),
            None => None,
        };
        let c_tokens = cond_tok.map(|(_, c)| c).unwrap_or(0);
        let vis: Vec<usize> = (0..t).filter(|&ti| !mask[ti]).collect();
        let mut sources: Vec<(Var, usize)> = Vec::new();
        if vis.is_empty() {
            sources.push((vars[self.handles.start_tok], 0));
        } else {
            for &ti in &vis {
                sources.push((tokens, ti));
            }
        }
        if let Some((cv, c)) = cond_tok {
            for ci in 0..c {
                sources.push((cv, ci));
            }
        }
        let s_enc = vis.len().max(1) + c_tokens;
        let mut x = tape.assemble_rows(Arc::new(sources));
        for blk in &self.handles.enc_blocks {
            x = self.vit_block(&tape, &vars, blk, x, 1, s_enc, None);
        }
        let x = self.affine_ln(&tape, &vars, self.handles.enc_ln_g, self.handles.enc_ln_b, x);
        let out = tape.linear(x, vars[self.handles.enc2dec_w], vars[self.handles.enc2dec_b]);
        Ok(tape.value(out))
    }

    /// Decoder features for one trial: [t, embed_dim].
    pub fn decoder_features(
        &self,
        z: &LatentSequence,
        mask: &[bool],
        condition: Option<&BehaviorCondition>,
    ) -> Result<Tensor> {
        let t = z.t_bins();
        if mask.len() != t {
            return Err(EagError::shape("mask length must equal t"));
        }
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let input = Tensor::from_vec(&[t, z.dim()], z.values().to_vec())?;
        let conds_vec;
        let cond_arg = match condition {
            Some(c) => {
                conds_vec = vec![c];
                Some((conds_vec.as_slice(), &[false][..]))
            }
            None => None,
        };
        let h = self.forward_features(
            &tape,
            &vars,
            &input,
            &[mask.to_vec()],
            cond_arg,
            1,
            t,
        )?;
        Ok(tape.value(h))
    }

    pub fn to_checkpoint(
        &self,
        adam: &Adam,
        guidance: &GuidanceConfig,
        train_cfg: &TrainConfig,
        epoch: usize,
        val_metric: f64,
        rng_state: (u64, u64),
    ) -> trainer::Checkpoint {
        trainer::Checkpoint {
            stage: trainer::Stage::Eag,
            config: serde_json::json!({
                "et": self.cfg,
                "guidance": guidance,
                "train": train_cfg,
            }),
            epoch,
            val_metric,
            rng_state,
            adam_t: adam.t,
            blocks: trainer::blocks_from(&self.store, adam),
        }
    }

    pub fn from_checkpoint(
        ckpt: &trainer::Checkpoint,
    ) -> Result<(EtModel, Adam, GuidanceConfig, TrainConfig)> {
        if ckpt.stage != trainer::Stage::Eag {
            return Err(EagError::StageMismatch {
                expected: "eag".into(),
                found: ckpt.stage.to_string(),
            });
        }
        let cfg: ETConfig = serde_json::from_value(ckpt.config["et"].clone())
            .map_err(|e| EagError::format(format!("checkpoint et config: {e}")))?;
        let guidance: GuidanceConfig = serde_json::from_value(ckpt.config["guidance"].clone())
            .map_err(|e| EagError::format(format!("checkpoint guidance config: {e}")))?;
        let train_cfg: TrainConfig = serde_json::from_value(ckpt.config["train"].clone())
            .map_err(|e| EagError::format(format!("checkpoint train config: {e}")))?;
        let mut seed_rng = RandomStream::seeded(0);
        let mut model = EtModel::new(&cfg, &mut seed_rng)?;
        let mut adam = Adam::new(&model.store);
        trainer::restore_into(ckpt, &mut model.store, &mut adam)?;
        Ok((model, adam, guidance, train_cfg))
    }
}

// ---------------------------------------------------------------------------
// Energy loss
// ---------------------------------------------------------------------------

/// Two-sample energy loss for a single position:
/// |z1 - z_data|^alpha + |z2 - z_data|^alpha - |z1 - z2|^alpha.
pub fn energy_loss(z1: &[f64], z2: &[f64], z_data: &[f64], alpha: f64) -> f64 {
    assert_eq!(z1.len(), z2.len());
    assert_eq!(z1.len(), z_data.len());
    let norm = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    norm(z1, z_data).powf(alpha) + norm(z2, z_data).powf(alpha) - norm(z1, z2).powf(alpha)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Frozen stochastic choices for one training step, so the loss is a pure
/// function of parameters (the gradient-check harness depends on that).
#[derive(Debug, Clone)]
pub struct TrainingDraws {
    pub masks: Vec<Vec<bool>>,
    pub null_flags: Vec<bool>,
    /// (trial, position) pairs in fixed order; one row of eps per pair.
    pub loss_positions: Vec<(usize, usize)>,
    pub eps1: Tensor,
    pub eps2: Tensor,
}

/// Sample the per-step stochastic choices: per-trial mask ratio in
/// [mask_ratio_min, mask_ratio_max], per-trial random mask positions,
/// condition null dropout, and two independent noise draws per loss position
/// (or per sequence), scaled by the train temperature.
pub fn sample_training_draws(
    cfg: &ETConfig,
    guidance: &GuidanceConfig,
    batch: usize,
    t: usize,
    conditioned: bool,
    rng: &mut RandomStream,
) -> TrainingDraws {
    let mut masks = Vec::with_capacity(batch);
    for _ in 0..batch {
        let r = rng.uniform_range(cfg.mask_ratio_min, cfg.mask_ratio_max);
        let m_count = ((r * t as f64).round() as usize).clamp(1, t);
        let perm = rng.permutation(t);
        let mut mask = vec![false; t];
        for &p in perm.iter().take(m_count) {
            mask[p] = true;
        }
        masks.push(mask);
    }
    let null_flags: Vec<bool> = (0..batch)
        .map(|_| conditioned && rng.uniform() < guidance.null_dropout_prob)
        .collect();
    let loss_positions: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| (0..t).filter(move |&ti| m[ti]).map(move |ti| (b, ti)))
        .collect();
    let r = loss_positions.len();
    let temp = cfg.train_temperature;
    let mut draw = |rows: usize| -> Tensor {
        let mut t = Tensor::zeros(&[rows, cfg.noise_dim]);
        for v in t.data_mut().iter_mut() {
            *v = rng.uniform_symmetric() * temp;
        }
        t
    };
    let (eps1, eps2) = if cfg.noise_per_sequence {
        // One noise row per trial, repeated across that trial's positions.
        let per_seq1 = draw(batch);
        let per_seq2 = draw(batch);
        let expand = |src: &Tensor| {
            let mut out = Tensor::zeros(&[r, cfg.noise_dim]);
            for (i, &(b, _)) in loss_positions.iter().enumerate() {
                let row = &src.data()[b * cfg.noise_dim..(b + 1) * cfg.noise_dim];
                out.data_mut()[i * cfg.noise_dim..(i + 1) * cfg.noise_dim].copy_from_slice(row);
            }
            out
        };
        (expand(&per_seq1), expand(&per_seq2))
    } else {
        (draw(r), draw(r))
    };
    TrainingDraws { masks, null_flags, loss_positions, eps1, eps2 }
}

/// Batched training loss with frozen draws. `latent_input` feeds the encoder
/// (visible tokens); `latent_target` provides the regression targets at loss
/// positions. They are the same tensor in normal training and differ only in
/// leakage tests.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub n_loss_positions: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn training_loss_with_draws(
    model: &EtModel,
    latent_input: &Tensor,
    latent_target: &Tensor,
    conditions: Option<&[&BehaviorCondition]>,
    draws: &TrainingDraws,
    batch: usize,
    t: usize,
    want_grads: bool,
) -> Result<StepOutput> {
    let d = model.cfg.latent_dim;
    let tape = Tape::new();
    let vars = model.store().to_tape(&tape);
    let cond_arg = conditions.map(|c| (c, draws.null_flags.as_slice()));
    let h = model.forward_features(&tape, &vars, latent_input, &draws.masks, cond_arg, batch, t)?;

    let rows: Vec<usize> = draws.loss_positions.iter().map(|&(b, ti)| b * t + ti).collect();
    let r = rows.len();
    if r == 0 {
        return Err(EagError::numeric("no loss positions in batch"));
    }
    let h_loss = tape.gather_rows(h, Arc::new(rows.clone()));

    let mut target_rows = Tensor::zeros(&[r, d]);
    for (i, &(b, ti)) in draws.loss_positions.iter().enumerate() {
        let row = &latent_target.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
        target_rows.data_mut()[i * d..(i + 1) * d].copy_from_slice(row);
    }
    let zd = tape.leaf(target_rows);
    let e1v = tape.leaf(draws.eps1.clone());
    let e2v = tape.leaf(draws.eps2.clone());
    let z1 = model.head_forward(&tape, &vars, h_loss, e1v, false);
    let z2 = model.head_forward(&tape, &vars, h_loss, e2v, false);

    let alpha = model.cfg.alpha;
    let d1 = tape.sub(z1, zd);
    let n1 = tape.row_norm(d1);
    let e1 = tape.pow_scalar(n1, alpha);
    let d2 = tape.sub(z2, zd);
    let n2 = tape.row_norm(d2);
    let e2 = tape.pow_scalar(n2, alpha);
    let d12 = tape.sub(z1, z2);
    let n12 = tape.row_norm(d12);
    let e12 = tape.pow_scalar(n12, alpha);
    let s = tape.add(e1, e2);
    let s = tape.sub(s, e12);
    let loss = tape.mean(s);

    let loss_value = tape.with_value(loss, |v| v.data()[0]);
    let grads = if want_grads {
        let g = tape.backward(loss);
        vars.iter().map(|v| g.get(*v).cloned()).collect()
    } else {
        Vec::new()
    };
    Ok(StepOutput { loss: loss_value, grads, n_loss_positions: r })
}

/// One training step: sample draws, compute loss and gradients.
pub fn training_step(
    model: &EtModel,
    latents: &Tensor,
    conditions: Option<&[&BehaviorCondition]>,
    guidance: &GuidanceConfig,
    batch: usize,
    t: usize,
    rng: &mut RandomStream,
) -> Result<StepOutput> {
    let draws = sample_training_draws(
        &model.cfg,
        guidance,
        batch,
        t,
        conditions.is_some(),
        rng,
    );
    training_loss_with_draws(model, latents, latents, conditions, &draws, batch, t, true)
}

/// Pack borrowed latent sequences into one [batch*t, d] tensor.
pub fn pack_latents(seqs: &[&LatentSequence]) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(EagError::config("empty latent batch"));
    }
    let d = seqs[0].dim();
    let t = seqs[0].t_bins();
    let mut out = Tensor::zeros(&[seqs.len() * t, d]);
    for (b, z) in seqs.iter().enumerate() {
        if z.dim() != d || z.t_bins() != t {
            return Err(EagError::shape("latent batch must share d and t"));
        }
        out.data_mut()[b * t * d..(b + 1) * t * d].copy_from_slice(z.values());
    }
    Ok(out)
}

/// Post-training state for checkpointing and resumes.
pub struct EtTrainOutcome {
    pub model: EtModel,
    pub adam: Adam,
    pub log: TrainingLog,
    pub rng_state: (u64, u64),
}

pub struct EtResume {
    pub model: EtModel,
    pub adam: Adam,
    pub start_epoch: usize,
    pub rng_state: (u64, u64),
}

/// Train stage 2 on cached latents. Conditions, when provided, must be
/// parallel to `latents` (and val conditions to val latents).
#[allow(clippy::too_many_arguments)]
pub fn train_energy_transformer(
    train_latents: &[LatentSequence],
    train_conditions: Option<&[BehaviorCondition]>,
    val_latents: &[LatentSequence],
    val_conditions: Option<&[BehaviorCondition]>,
    cfg: &ETConfig,
    guidance: &GuidanceConfig,
    schedule: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<(EtModel, TrainingLog)> {
    let out = train_energy_transformer_full(
        train_latents,
        train_conditions,
        val_latents,
        val_conditions,
        cfg,
        guidance,
        schedule,
        rng,
        None,
    )?;
    Ok((out.model, out.log))
}

#[allow(clippy::too_many_arguments)]
pub fn train_energy_transformer_full(
    train_latents: &[LatentSequence],
    train_conditions: Option<&[BehaviorCondition]>,
    val_latents: &[LatentSequence],
    val_conditions: Option<&[BehaviorCondition]>,
    cfg: &ETConfig,
    guidance: &GuidanceConfig,
    schedule: &TrainConfig,
    rng: &mut RandomStream,
    resume: Option<EtResume>,
) -> Result<EtTrainOutcome> {
    cfg.validate()?;
    guidance.validate()?;
    schedule.validate()?;
    if train_latents.is_empty() {
        return Err(EagError::config("no training latents"));
    }
    if let Some(c) = train_conditions {
        if c.len() != train_latents.len() {
            return Err(EagError::shape("conditions must be parallel to latents"));
        }
    }
    let t = train_latents[0].t_bins();
    let mut init_rng = rng.derive(11);
    let fresh_draw_rng = rng.derive(12);
    let mut val_rng = rng.derive(13);

    let (model, adam, start_epoch, mut draw_rng) = match resume {
        Some(r) => {
            let (key, counter) = r.rng_state;
            (r.model, r.adam, r.start_epoch, RandomStream::from_state(key, counter))
        }
        None => {
            let model = EtModel::new(cfg, &mut init_rng)?;
            let adam = Adam::new(model.store());
            (model, adam, 0, fresh_draw_rng)
        }
    };

    // Fixed validation draws so epoch-over-epoch comparisons are stable.
    let val_set: Vec<&LatentSequence> = val_latents.iter().collect();
    let val_draws: Option<(Tensor, TrainingDraws, Option<Vec<&BehaviorCondition>>)> =
        if val_latents.is_empty() {
            None
        } else {
            let packed = pack_latents(&val_set)?;
            let conds: Option<Vec<&BehaviorCondition>> =
                val_conditions.map(|c| c.iter().collect());
            let draws = sample_training_draws(
                cfg,
                guidance,
                val_set.len(),
                t,
                conds.is_some(),
                &mut val_rng,
            );
            Some((packed, draws, conds))
        };

    let model_cell = std::cell::RefCell::new(model);
    let adam_cell = std::cell::RefCell::new(adam);
    let best_cell = std::cell::RefCell::new(None::<ParamStore>);

    let mut step = |batch_idx: &[usize], lr: f64| -> Result<f64> {
        let mut model = model_cell.borrow_mut();
        let mut adam = adam_cell.borrow_mut();
        let seqs: Vec<&LatentSequence> = batch_idx.iter().map(|&i| &train_latents[i]).collect();
        let packed = pack_latents(&seqs)?;
        let conds: Option<Vec<&BehaviorCondition>> =
            train_conditions.map(|c| batch_idx.iter().map(|&i| &c[i]).collect());
        let out = training_step(
            &model,
            &packed,
            conds.as_deref(),
            guidance,
            seqs.len(),
            t,
            &mut draw_rng,
        )?;
        adam.step(model.store_mut(), &out.grads, lr, schedule.grad_clip);
        Ok(out.loss)
    };

    let mut validate = || -> Result<f64> {
        let model = model_cell.borrow();
        match &val_draws {
            Some((packed, draws, conds)) => {
                let out = training_loss_with_draws(
                    &model,
                    packed,
                    packed,
                    conds.as_deref(),
                    draws,
                    val_set.len(),
                    t,
                    false,
                )?;
                Ok(out.loss)
            }
            None => Ok(f64::INFINITY),
        }
    };

    let mut on_best = |_epoch: usize| {
        *best_cell.borrow_mut() = Some(model_cell.borrow().store().clone());
    };

    let log = trainer::fit(
        train_latents.len(),
        start_epoch,
        schedule,
        &mut step,
        &mut validate,
        &mut on_best,
    )?;
    drop(step);
    let mut model = model_cell.into_inner();
    let adam = adam_cell.into_inner();
    if let Some(best) = best_cell.into_inner() {
        model.store.copy_from(&best);
    }
    let rng_state = draw_rng.state();
    Ok(EtTrainOutcome { model, adam, log, rng_state })
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Batched progressive unmasking. A fixed random unmask order per trial; at
/// each cosine-schedule step the newly selected positions are generated with
/// one noise draw each (scaled by `temperature`) and committed as visible
/// context for later steps. With `guidance` and conditions present, decoder
/// features are computed for both the conditional and the null path under
/// identical masks and noise, combined as gamma*h_c + (1-gamma)*h_u.
#[allow(clippy::too_many_arguments)]
pub fn sample_latents(
    model: &EtModel,
    count: usize,
    t: usize,
    k_steps: usize,
    temperature: f64,
    conditions: Option<&[BehaviorCondition]>,
    guidance: Option<&GuidanceConfig>,
    rng: &mut RandomStream,
) -> Result<Vec<LatentSequence>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if let Some(c) = conditions {
        if c.len() != count {
            return Err(EagError::shape("conditions must match trial count"));
        }
        if model.cfg.condition.is_none() {
            return Err(EagError::config(
                "conditional sampling requires a condition-trained checkpoint",
            ));
        }
    }
    let d = model.cfg.latent_dim;
    let counts = cosine_mask_counts(t, k_steps)?;
    let mut states: Vec<MaskState> = (0..count)
        .map(|_| MaskState::new(t, k_steps, rng))
        .collect::<Result<_>>()?;
    let mut z_buf = Tensor::zeros(&[count * t, d]);

    for k in 1..=k_steps {
        let newly_count = counts[k - 1] - counts[k];
        if newly_count == 0 {
            for st in states.iter_mut() {
                let _ = st.advance();
            }
            continue;
        }
        let masks: Vec<Vec<bool>> = states.iter().map(|s| s.mask.clone()).collect();
        let newly: Vec<Vec<usize>> = states.iter_mut().map(|s| s.advance()).collect();

        // Per-position noise, drawn in fixed (trial, order) sequence.
        let mut eps = Tensor::zeros(&[count * newly_count, model.cfg.noise_dim]);
        for v in eps.data_mut().iter_mut() {
            *v = rng.uniform_symmetric() * temperature;
        }

        let tape = Tape::new();
        let vars = model.store().to_tape(&tape);
        let conds_ref: Option<Vec<&BehaviorCondition>> =
            conditions.map(|c| c.iter().collect());
        let no_null = vec![false; count];
        let h = match (conds_ref.as_deref(), guidance) {
            (Some(conds), Some(g)) => {
                let h_c = model.forward_features(
                    &tape, &vars, &z_buf, &masks, Some((conds, &no_null)), count, t,
                )?;
                let all_null = vec![true; count];
                let h_u = model.forward_features(
                    &tape, &vars, &z_buf, &masks, Some((conds, &all_null)), count, t,
                )?;
                let hc_scaled = tape.scale(h_c, g.gamma);
                let hu_scaled = tape.scale(h_u, 1.0 - g.gamma);
                tape.add(hc_scaled, hu_scaled)
            }
            (Some(conds), None) => model.forward_features(
                &tape, &vars, &z_buf, &masks, Some((conds, &no_null)), count, t,
            )?,
            (None, _) => {
                model.forward_features(&tape, &vars, &z_buf, &masks, None, count, t)?
            }
        };

        let rows: Vec<usize> = newly
            .iter()
            .enumerate()
            .flat_map(|(b, ps)| ps.iter().map(move |&p| b * t + p))
            .collect();
        let h_rows = tape.gather_rows(h, Arc::new(rows.clone()));
        let ev = tape.leaf(eps);
        let z_new = model.head_forward(&tape, &vars, h_rows, ev, false);
        let z_vals = tape.value(z_new);
        for (i, &row) in rows.iter().enumerate() {
            z_buf.data_mut()[row * d..(row + 1) * d]
                .copy_from_slice(&z_vals.data()[i * d..(i + 1) * d]);
        }
    }

    (0..count)
        .map(|b| {
            LatentSequence::new(d, t, z_buf.data()[b * t * d..(b + 1) * t * d].to_vec())
        })
        .collect()
}

/// Single-trial unconditional sampling.
pub fn sample_unconditional(
    model: &EtModel,
    t: usize,
    k_steps: usize,
    temperature: f64,
    rng: &mut RandomStream,
) -> Result<LatentSequence> {
    Ok(sample_latents(model, 1, t, k_steps, temperature, None, None, rng)?.remove(0))
}

/// Single-trial conditional sampling with classifier-free guidance.
#[allow(clippy::too_many_arguments)]
pub fn sample_conditional(
    model: &EtModel,
    condition: &BehaviorCondition,
    guidance: &GuidanceConfig,
    t: usize,
    k_steps: usize,
    temperature: f64,
    rng: &mut RandomStream,
) -> Result<LatentSequence> {
    let conds = vec![condition.clone()];
    Ok(sample_latents(model, 1, t, k_steps, temperature, Some(&conds), Some(guidance), rng)?
        .remove(0))
}

/// (cos, sin) features of an angle condition.
pub fn angle_features(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(condition: Option<ConditionKind>) -> ETConfig {
        ETConfig {
            embed_dim: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            num_heads: 2,
            ffn_mult: 2,
            mlp_depth: 2,
            mlp_width: 12,
            noise_dim: 4,
            latent_dim: 3,
            max_len: 12,
            condition,
            ..Default::default()
        }
    }

    fn tiny_model(seed: u64, condition: Option<ConditionKind>) -> EtModel {
        let mut rng = RandomStream::seeded(seed);
        EtModel::new(&tiny_cfg(condition), &mut rng).unwrap()
    }

    fn random_latents(seed: u64, d: usize, t: usize) -> LatentSequence {
        let mut rng = RandomStream::seeded(seed);
        LatentSequence::new(d, t, (0..d * t).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cosine_counts_endpoints_and_monotonicity() {
        let counts = cosine_mask_counts(64, 16).unwrap();
        assert_eq!(counts[0], 64);
        assert_eq!(counts[16], 0);
        for w in counts.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let newly: usize = counts.windows(2).map(|w| w[0] - w[1]).sum();
        assert_eq!(newly, 64);

        // K = 1 unmasks everything at once.
        assert_eq!(cosine_mask_counts(10, 1).unwrap(), vec![10, 0]);
        // Declared rounding rule on the small case.
        let c = cosine_mask_counts(4, 4).unwrap();
        assert_eq!(c[0], 4);
        assert_eq!(*c.last().unwrap(), 0);
        let sum: usize = c.windows(2).map(|w| w[0] - w[1]).sum();
        assert_eq!(sum, 4);

        assert!(cosine_mask_counts(4, 5).is_err());
        assert!(cosine_mask_counts(4, 0).is_err());
    }

    #[test]
    fn energy_loss_hand_values() {
        assert_eq!(energy_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 1.0), 0.0);
        let v = energy_loss(&[0.0], &[2.0], &[1.0], 1.0);
        assert!((v - 0.0).abs() < 1e-12, "{v}");
        let v = energy_loss(&[0.0], &[0.0], &[1.0], 1.0);
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn embed_latents_shape_and_position_distinctness() {
        let model = tiny_model(1, None);
        let t = 8;
        // identical latent content at every position
        let z = LatentSequence::new(3, t, vec![0.5; 3 * t]).unwrap();
        let tok = model.embed_latents(&z).unwrap();
        assert_eq!(tok.shape(), &[t, 16]);
        // positions make equal contents distinct
        let r0 = &tok.data()[0..16];
        let r1 = &tok.data()[16..32];
        assert_ne!(r0, r1);

        // zero latents: output equals positional encoding plus projection bias
        let z0 = LatentSequence::new(3, 2, vec![0.0; 6]).unwrap();
        let tok0 = model.embed_latents(&z0).unwrap();
        let pos = model.store().tensor(model.handles.enc_pos).clone();
        let bias = model.store().tensor(model.handles.in_b).clone();
        for ti in 0..2 {
            for c in 0..16 {
                let expect = pos.at2(ti, c) + bias.data()[c];
                let got = tok0.at2(ti, c);
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_drops_masked_positions() {
        let model = tiny_model(2, None);
        let z = random_latents(3, 3, 8);
        // Same visible set {1, 4}, different masked content layout is
        // irrelevant: both masks are equal here by construction.
        let mut mask = vec![true; 8];
        mask[1] = false;
        mask[4] = false;
        let a = model.encoder_features(&z, &mask, None).unwrap();
        // Permute latent values at masked positions; encoder must not see it.
        let mut z2_vals = z.values().to_vec();
        z2_vals.swap(0, 3 * 3); // swap masked row 0 with masked row 3 (ch 0)
        let z2 = LatentSequence::new(3, 8, z2_vals).unwrap();
        let b = model.encoder_features(&z2, &mask, None).unwrap();
        // rows 1 and 4 were untouched, so encoded tokens agree exactly
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 16]);

        // 0% masked: sequence length t.
        let none = vec![false; 8];
        let full = model.encoder_features(&z, &none, None).unwrap();
        assert_eq!(full.shape(), &[8, 16]);

        // 100% masked: start token keeps the encoder nonempty.
        let all = vec![true; 8];
        let s = model.encoder_features(&z, &all, None).unwrap();
        assert_eq!(s.shape(), &[1, 16]);
    }

    #[test]
    fn decoder_features_full_length_and_distinct() {
        let model = tiny_model(4, None);
        let z = random_latents(5, 3, 8);
        let mut mask = vec![false; 8];
        mask[2] = true;
        mask[6] = true;
        let h = model.decoder_features(&z, &mask, None).unwrap();
        assert_eq!(h.shape(), &[8, 16]);
        let r2 = &h.data()[2 * 16..3 * 16];
        let r6 = &h.data()[6 * 16..7 * 16];
        assert_ne!(r2, r6, "mask-token positions must differ via positions");

        // Visible position depends on its own input.
        let mut z2_vals = z.values().to_vec();
        z2_vals[3 * 3] += 0.75; // position 3 (visible), first channel
        let z2 = LatentSequence::new(3, 8, z2_vals).unwrap();
        let h2 = model.decoder_features(&z2, &mask, None).unwrap();
        let a = &h.data()[3 * 16..4 * 16];
        let b = &h2.data()[3 * 16..4 * 16];
        assert_ne!(a, b);
    }

    #[test]
    fn gate_zero_hook_removes_noise_dependence() {
        let model = tiny_model(6, None);
        let h = vec![0.3; 16];
        let e1 = vec![0.25; 4];
        let e2 = vec![-0.4; 4];
        let a = model.mlp_generate(&h, &e1, true).unwrap();
        let b = model.mlp_generate(&h, &e2, true).unwrap();
        assert_eq!(a, b, "zeroed gates must erase noise dependence");
        let c = model.mlp_generate(&h, &e1, false).unwrap();
        let d = model.mlp_generate(&h, &e2, false).unwrap();
        assert_ne!(c, d, "independent noise draws must differ");
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn training_step_finite_and_deterministic() {
        let model = tiny_model(7, None);
        let seqs: Vec<LatentSequence> = (0..3).map(|i| random_latents(20 + i, 3, 8)).collect();
        let refs: Vec<&LatentSequence> = seqs.iter().collect();
        let packed = pack_latents(&refs).unwrap();
        let g = GuidanceConfig::default();
        let run = || {
            let mut rng = RandomStream::seeded(55);
            let out =
                training_step(&model, &packed, None, &g, 3, 8, &mut rng).unwrap();
            (out.loss, out.grads.iter().flatten().map(|t| t.sum()).sum::<f64>())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.is_finite());
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn fully_masked_batch_ignores_latent_inputs() {
        let model = tiny_model(8, None);
        let cfg = &model.cfg;
        let t = 8;
        let mut rng = RandomStream::seeded(31);
        let draws = {
            let mut d = sample_training_draws(cfg, &GuidanceConfig::default(), 2, t, false, &mut rng);
            for m in d.masks.iter_mut() {
                for v in m.iter_mut() {
                    *v = true;
                }
            }
            let loss_positions: Vec<(usize, usize)> =
                (0..2).flat_map(|b| (0..t).map(move |ti| (b, ti))).collect();
            let r = loss_positions.len();
            let mut e1 = Tensor::zeros(&[r, cfg.noise_dim]);
            let mut e2 = Tensor::zeros(&[r, cfg.noise_dim]);
            for v in e1.data_mut().iter_mut() {
                *v = rng.uniform_symmetric();
            }
            for v in e2.data_mut().iter_mut() {
                *v = rng.uniform_symmetric();
            }
            TrainingDraws { masks: d.masks, null_flags: d.null_flags, loss_positions, eps1: e1, eps2: e2 }
        };
        let target = {
            let seqs: Vec<LatentSequence> = (0..2).map(|i| random_latents(40 + i, 3, t)).collect();
            let refs: Vec<&LatentSequence> = seqs.iter().collect();
            pack_latents(&refs).unwrap()
        };
        let random_input = {
            let seqs: Vec<LatentSequence> = (0..2).map(|i| random_latents(60 + i, 3, t)).collect();
            let refs: Vec<&LatentSequence> = seqs.iter().collect();
            pack_latents(&refs).unwrap()
        };
        let zero_input = Tensor::zeros(&[2 * t, 3]);
        let a = training_loss_with_draws(&model, &random_input, &target, None, &draws, 2, t, false)
            .unwrap();
        let b = training_loss_with_draws(&model, &zero_input, &target, None, &draws, 2, t, false)
            .unwrap();
        assert_eq!(a.loss, b.loss, "fully masked: latent inputs must not leak");
    }

    #[test]
    fn loss_only_depends_on_loss_positions() {
        let model = tiny_model(9, None);
        let t = 8;
        let mut rng = RandomStream::seeded(77);
        let draws = sample_training_draws(
            &model.cfg,
            &GuidanceConfig::default(),
            2,
            t,
            false,
            &mut rng,
        );
        let seqs: Vec<LatentSequence> = (0..2).map(|i| random_latents(80 + i, 3, t)).collect();
        let refs: Vec<&LatentSequence> = seqs.iter().collect();
        let input = pack_latents(&refs).unwrap();
        let mut target2 = input.clone();
        // Perturb targets at NON-loss positions only (inputs held fixed).
        for b in 0..2 {
            for ti in 0..t {
                if !draws.masks[b][ti] {
                    target2.data_mut()[(b * t + ti) * 3] += 3.5;
                }
            }
        }
        let a = training_loss_with_draws(&model, &input, &input, None, &draws, 2, t, false).unwrap();
        let b = training_loss_with_draws(&model, &input, &target2, None, &draws, 2, t, false).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn untrained_loss_positive_in_expectation() {
        let model = tiny_model(10, None);
        let g = GuidanceConfig::default();
        let mut rng = RandomStream::seeded(90);
        let mut total = 0.0;
        let reps = 100;
        for i in 0..reps {
            let seqs: Vec<LatentSequence> =
                (0..2).map(|j| random_latents(1000 + i * 2 + j, 3, 8)).collect();
            let refs: Vec<&LatentSequence> = seqs.iter().collect();
            let packed = pack_latents(&refs).unwrap();
            let out = training_step(&model, &packed, None, &g, 2, 8, &mut rng).unwrap();
            total += out.loss;
        }
        let mean = total / reps as f64;
        assert!(mean > 0.0, "mean untrained loss {mean}");
    }

    #[test]
    fn cfg_identities_bitwise() {
        let model = tiny_model(12, Some(ConditionKind::Angle));
        let t = 8;
        let z = random_latents(100, 3, t);
        let cond = BehaviorCondition::Angle(0.6);
        let mut mask = vec![true; t];
        mask[0] = false;
        mask[3] = false;
        let z_in = Tensor::from_vec(&[t, 3], z.values().to_vec()).unwrap();

        let features = |gamma: f64| -> Tensor {
            let tape = Tape::new();
            let vars = model.store().to_tape(&tape);
            let conds = [&cond];
            let no_null = [false];
            let all_null = [true];
            let h_c = model
                .forward_features(&tape, &vars, &z_in, &[mask.clone()], Some((&conds, &no_null)), 1, t)
                .unwrap();
            let h_u = model
                .forward_features(&tape, &vars, &z_in, &[mask.clone()], Some((&conds, &all_null)), 1, t)
                .unwrap();
            let a = tape.scale(h_c, gamma);
            let b = tape.scale(h_u, 1.0 - gamma);
            let s = tape.add(a, b);
            tape.value(s)
        };

        let only_cond = {
            let tape = Tape::new();
            let vars = model.store().to_tape(&tape);
            let conds = [&cond];
            let no_null = [false];
            let h = model
                .forward_features(&tape, &vars, &z_in, &[mask.clone()], Some((&conds, &no_null)), 1, t)
                .unwrap();
            tape.value(h)
        };
        let only_null = {
            let tape = Tape::new();
            let vars = model.store().to_tape(&tape);
            let conds = [&cond];
            let all_null = [true];
            let h = model
                .forward_features(&tape, &vars, &z_in, &[mask.clone()], Some((&conds, &all_null)), 1, t)
                .unwrap();
            tape.value(h)
        };

        let g1 = features(1.0);
        for (a, b) in g1.data().iter().zip(only_cond.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "gamma=1 must equal conditional path");
        }
        let g0 = features(0.0);
        for (a, b) in g0.data().iter().zip(only_null.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "gamma=0 must equal null path");
        }
        // Affine identity: h(2) = 2 h(1) - h(0).
        let g2 = features(2.0);
        for ((h2, h1), h0) in g2.data().iter().zip(g1.data().iter()).zip(g0.data().iter()) {
            let expect = 2.0 * h1 - h0;
            assert!((h2 - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn angle_feature_identities() {
        let f0 = angle_features(0.0);
        assert_eq!(f0, [1.0, 0.0]);
        let f90 = angle_features(std::f64::consts::FRAC_PI_2);
        assert!((f90[0]).abs() < 1e-15 && (f90[1] - 1.0).abs() < 1e-15);
        // periodicity to floating precision
        let model = tiny_model(13, Some(ConditionKind::Angle));
        let z = random_latents(101, 3, 6);
        let mask = vec![true; 6];
        let a = model
            .decoder_features(&z, &mask, Some(&BehaviorCondition::Angle(0.9)))
            .unwrap();
        let b = model
            .decoder_features(
                &z,
                &mask,
                Some(&BehaviorCondition::Angle(0.9 + 2.0 * std::f64::consts::PI)),
            )
            .unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_schedule_and_determinism() {
        let model = tiny_model(14, None);
        let mut r1 = RandomStream::seeded(500);
        let z1 = sample_unconditional(&model, 8, 4, 0.7, &mut r1).unwrap();
        assert_eq!(z1.t_bins(), 8);
        assert_eq!(z1.dim(), 3);
        let mut r2 = RandomStream::seeded(500);
        let z2 = sample_unconditional(&model, 8, 4, 0.7, &mut r2).unwrap();
        assert_eq!(z1, z2);

        // K=1: single fully-masked pass.
        let mut r3 = RandomStream::seeded(501);
        let z3 = sample_unconditional(&model, 8, 1, 0.7, &mut r3).unwrap();
        assert!(z3.values().iter().all(|v| v.is_finite()));

        // temperature 0: same unmask order => identical samples.
        let mut r4 = RandomStream::seeded(502);
        let a = sample_unconditional(&model, 8, 4, 0.0, &mut r4).unwrap();
        let mut r5 = RandomStream::seeded(502);
        let b = sample_unconditional(&model, 8, 4, 0.0, &mut r5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_sampling_requires_conditioned_model() {
        let model = tiny_model(15, None);
        let mut rng = RandomStream::seeded(1);
        let cond = BehaviorCondition::Angle(0.2);
        let err = sample_conditional(
            &model,
            &cond,
            &GuidanceConfig::default(),
            8,
            2,
            0.7,
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_forward() {
        let model = tiny_model(16, Some(ConditionKind::Velocity));
        let adam = Adam::new(model.store());
        let g = GuidanceConfig::default();
        let tc = TrainConfig::default();
        let ckpt = model.to_checkpoint(&adam, &g, &tc, 3, 0.5, (7, 9));
        let dir = std::env::temp_dir().join("eag_et_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("et.eagc");
        trainer::save_checkpoint(&ckpt, &path).unwrap();
        let loaded = trainer::load_checkpoint(&path).unwrap();
        let (model2, _, g2, _) = EtModel::from_checkpoint(&loaded).unwrap();
        assert_eq!(g2, g);

        let z = random_latents(200, 3, 8);
        let mask = vec![true; 8];
        let a = model.decoder_features(&z, &mask, None);
        let b = model2.decoder_features(&z, &mask, None);
        // Velocity-conditioned model without condition: both paths None.
        let (a, b) = (a.unwrap(), b.unwrap());
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Stage mismatch is a typed error.
        assert!(crate::autoencoder::AEModel::from_checkpoint(&loaded).is_err());
        std::fs::remove_file(&path).unwrap();
    }
}
