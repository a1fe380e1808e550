//! Stage 1: spike trains to a low-dimensional latent sequence and back to
//! Poisson rates, trained with Poisson negative log-likelihood under
//! coordinated dropout.
//!
//! Temporal mixing uses a per-channel learned depthwise temporal convolution
//! (kernel applied forward and time-reversed, summed) followed by a
//! channel-mixing two-layer GELU network, each with residual connection and
//! layer normalization. That preserves the contract of a per-channel
//! bidirectional LTI filter plus channel MLP.

use serde::{Deserialize, Serialize};

use crate::data::{LatentSequence, RateSequence, SpikeTrain, Split, TrialDataset};
use crate::error::{EagError, Result};
use crate::numerics::{ln_factorial, RandomStream, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::trainer::{self, Adam, TrainConfig, TrainingLog};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AEConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub embed_dim: usize,
    /// Latent dimension d (must stay below the neuron count).
    pub num_latents: usize,
    /// Channel-mixing hidden width = embed_dim * hidden_mult.
    pub hidden_mult: usize,
    /// Depthwise temporal kernel length (taps at offsets 0..kernel-1, applied
    /// in both time directions).
    pub conv_kernel: usize,
    /// Coordinated-dropout probability per time bin.
    pub dropout_prob: f64,
    /// L2 penalty weight on first differences of z along time.
    pub smoothness_weight: f64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            encoder_blocks: 4,
            decoder_blocks: 4,
            embed_dim: 256,
            num_latents: 8,
            hidden_mult: 2,
            conv_kernel: 17,
            dropout_prob: 0.25,
            smoothness_weight: 1e-3,
        }
    }
}

impl AEConfig {
    pub fn validate(&self, n_neurons: usize) -> Result<()> {
        if self.encoder_blocks == 0
            || self.decoder_blocks == 0
            || self.embed_dim == 0
            || self.num_latents == 0
            || self.hidden_mult == 0
            || self.conv_kernel == 0
        {
            return Err(EagError::config("autoencoder counts must all be >= 1"));
        }
        if self.num_latents >= n_neurons {
            return Err(EagError::config(format!(
                "num_latents {} must be < n_neurons {}",
                self.num_latents, n_neurons
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(EagError::config("dropout_prob must be in [0, 1)"));
        }
        if self.dropout_prob == 0.0 {
            // An empty loss mask makes training degenerate; reject up front.
            return Err(EagError::config(
                "dropout_prob = 0 leaves no bins to score; use a positive rate",
            ));
        }
        Ok(())
    }
}

struct MixBlockH {
    ln1_g: usize,
    ln1_b: usize,
    conv: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct MlpH {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct AeHandles {
    enc_in: MlpH,
    enc_blocks: Vec<MixBlockH>,
    enc_out: MlpH,
    dec_in: MlpH,
    dec_blocks: Vec<MixBlockH>,
    dec_out: MlpH,
}

pub struct AEModel {
    pub cfg: AEConfig,
    pub n_neurons: usize,
    store: ParamStore,
    handles: AeHandles,
}

fn add_mlp(store: &mut ParamStore, prefix: &str, d_in: usize, d_hidden: usize, d_out: usize,
           rng: &mut RandomStream) -> MlpH {
    let s1 = (1.0 / d_in as f64).sqrt();
    let s2 = (1.0 / d_hidden as f64).sqrt();
    MlpH {
        w1: store.add(format!("{prefix}.w1"), Tensor::randn(&[d_in, d_hidden], s1, rng)),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, d_hidden])),
        w2: store.add(format!("{prefix}.w2"), Tensor::randn(&[d_hidden, d_out], s2, rng)),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d_out])),
    }
}

fn add_mix_block(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, klen: usize,
                 rng: &mut RandomStream) -> MixBlockH {
    let conv_std = (1.0 / (2.0 * klen as f64)).sqrt();
    let s1 = (1.0 / d as f64).sqrt();
    let s2 = (1.0 / hidden as f64).sqrt();
    MixBlockH {
        ln1_g: store.add(format!("{prefix}.ln1.g"), Tensor::full(&[1, d], 1.0)),
        ln1_b: store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, d])),
        conv: store.add(format!("{prefix}.conv"), Tensor::randn(&[klen, d], conv_std, rng)),
        ln2_g: store.add(format!("{prefix}.ln2.g"), Tensor::full(&[1, d], 1.0)),
        ln2_b: store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, d])),
        w1: store.add(format!("{prefix}.mlp.w1"), Tensor::randn(&[d, hidden], s1, rng)),
        b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[1, hidden])),
        w2: store.add(format!("{prefix}.mlp.w2"), Tensor::randn(&[hidden, d], s2, rng)),
        b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[1, d])),
    }
}

impl AEModel {
    pub fn new(cfg: &AEConfig, n_neurons: usize, rng: &mut RandomStream) -> Result<Self> {
        cfg.validate(n_neurons)?;
        let d = cfg.embed_dim;
        let hidden = d * cfg.hidden_mult;
        let mut store = ParamStore::new();
        let enc_in = add_mlp(&mut store, "enc.in", n_neurons, d, d, rng);
        let enc_blocks = (0..cfg.encoder_blocks)
            .map(|i| add_mix_block(&mut store, &format!("enc.block{i}"), d, hidden, cfg.conv_kernel, rng))
            .collect();
        let enc_out = add_mlp(&mut store, "enc.out", d, d, cfg.num_latents, rng);
        let dec_in = add_mlp(&mut store, "dec.in", cfg.num_latents, d, d, rng);
        let dec_blocks = (0..cfg.decoder_blocks)
            .map(|i| add_mix_block(&mut store, &format!("dec.block{i}"), d, hidden, cfg.conv_kernel, rng))
            .collect();
        let dec_out = add_mlp(&mut store, "dec.out", d, d, n_neurons, rng);
        let handles =
            AeHandles { enc_in, enc_blocks, enc_out, dec_in, dec_blocks, dec_out };
        Ok(AEModel { cfg: cfg.clone(), n_neurons, store, handles })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.num_latents
    }

    fn mlp(&self, tape: &Tape, vars: &[Var], h: &MlpH, x: Var) -> Var {
        let y = tape.linear(x, vars[h.w1], vars[h.b1]);
        let y = tape.gelu(y);
        tape.linear(y, vars[h.w2], vars[h.b2])
    }

    fn mix_block(
        &self,
        tape: &Tape,
        vars: &[Var],
        blk: &MixBlockH,
        x: Var,
        batch: usize,
        t: usize,
    ) -> Var {
        let ln = tape.layer_norm(x, LN_EPS);
        let ln = tape.mul_row(ln, vars[blk.ln1_g]);
        let ln = tape.add_row(ln, vars[blk.ln1_b]);
        let conv = tape.bidir_conv(ln, vars[blk.conv], batch, t);
        let x = tape.add(x, conv);
        let ln2 = tape.layer_norm(x, LN_EPS);
        let ln2 = tape.mul_row(ln2, vars[blk.ln2_g]);
        let ln2 = tape.add_row(ln2, vars[blk.ln2_b]);
        let m = tape.linear(ln2, vars[blk.w1], vars[blk.b1]);
        let m = tape.gelu(m);
        let m = tape.linear(m, vars[blk.w2], vars[blk.b2]);
        tape.add(x, m)
    }

    /// Encoder path on a tape: [batch*t, n_neurons] -> [batch*t, d].
    pub fn forward_encode(
        &self,
        tape: &Tape,
        vars: &[Var],
        x: Var,
        batch: usize,
        t: usize,
    ) -> Var {
        let mut h = self.mlp(tape, vars, &self.handles.enc_in, x);
        for blk in &self.handles.enc_blocks {
            h = self.mix_block(tape, vars, blk, h, batch, t);
        }
        self.mlp(tape, vars, &self.handles.enc_out, h)
    }

    /// Decoder path on a tape: [batch*t, d] -> log-rates [batch*t, n_neurons].
    pub fn forward_decode(
        &self,
        tape: &Tape,
        vars: &[Var],
        z: Var,
        batch: usize,
        t: usize,
    ) -> Var {
        let mut h = self.mlp(tape, vars, &self.handles.dec_in, z);
        for blk in &self.handles.dec_blocks {
            h = self.mix_block(tape, vars, blk, h, batch, t);
        }
        self.mlp(tape, vars, &self.handles.dec_out, h)
    }

    /// Deterministic latents for one trial (no sampling, no dropout).
    pub fn encode(&self, spikes: &SpikeTrain) -> Result<LatentSequence> {
        if spikes.n_neurons() != self.n_neurons {
            return Err(EagError::shape(format!(
                "spike train has {} neurons, model expects {}",
                spikes.n_neurons(),
                self.n_neurons
            )));
        }
        let t = spikes.t_bins();
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let x = tape.leaf(spikes_to_tensor(spikes));
        let z = self.forward_encode(&tape, &vars, x, 1, t);
        let zt = tape.value(z);
        LatentSequence::new(self.cfg.num_latents, t, zt.into_data())
    }

    /// Encode many trials in batched forward passes.
    pub fn encode_all(&self, trials: &[&SpikeTrain], batch_size: usize) -> Result<Vec<LatentSequence>> {
        let mut out = Vec::with_capacity(trials.len());
        for chunk in trials.chunks(batch_size.max(1)) {
            let t = chunk[0].t_bins();
            let tape = Tape::new();
            let vars = self.store.to_tape(&tape);
            let x = tape.leaf(spikes_batch_tensor(chunk)?);
            let z = self.forward_encode(&tape, &vars, x, chunk.len(), t);
            let zt = tape.value(z);
            let d = self.cfg.num_latents;
            for (i, _) in chunk.iter().enumerate() {
                let slice = zt.data()[i * t * d..(i + 1) * t * d].to_vec();
                out.push(LatentSequence::new(d, t, slice)?);
            }
        }
        Ok(out)
    }

    /// Strictly positive rates for one latent sequence.
    pub fn decode(&self, latents: &LatentSequence) -> Result<RateSequence> {
        self.decode_with_bin_width(latents, 0.005)
    }

    pub fn decode_with_bin_width(
        &self,
        latents: &LatentSequence,
        bin_width: f64,
    ) -> Result<RateSequence> {
        if latents.dim() != self.cfg.num_latents {
            return Err(EagError::shape(format!(
                "latents have dim {}, model expects {}",
                latents.dim(),
                self.cfg.num_latents
            )));
        }
        let t = latents.t_bins();
        let tape = Tape::new();
        let vars = self.store.to_tape(&tape);
        let z = tape.leaf(Tensor::from_vec(&[t, latents.dim()], latents.values().to_vec())?);
        let logr = self.forward_decode(&tape, &vars, z, 1, t);
        let rates = tape.exp(logr);
        let rt = tape.value(rates);
        // [t, n] -> [n, t]
        let mut out = vec![0.0f64; self.n_neurons * t];
        for ti in 0..t {
            for i in 0..self.n_neurons {
                out[i * t + ti] = rt.data()[ti * self.n_neurons + i];
            }
        }
        RateSequence::new(self.n_neurons, t, bin_width, out)
    }

    pub fn to_checkpoint(
        &self,
        adam: &Adam,
        train_cfg: &TrainConfig,
        epoch: usize,
        val_metric: f64,
        rng_state: (u64, u64),
    ) -> trainer::Checkpoint {
        trainer::Checkpoint {
            stage: trainer::Stage::Ae,
            config: serde_json::json!({
                "ae": self.cfg,
                "n_neurons": self.n_neurons,
                "train": train_cfg,
            }),
            epoch,
            val_metric,
            rng_state,
            adam_t: adam.t,
            blocks: trainer::blocks_from(&self.store, adam),
        }
    }

    /// Rebuild the model (and optimizer state) from a checkpoint.
    pub fn from_checkpoint(ckpt: &trainer::Checkpoint) -> Result<(AEModel, Adam, TrainConfig)> {
        if ckpt.stage != trainer::Stage::Ae {
            return Err(EagError::StageMismatch {
                expected: "ae".into(),
                found: ckpt.stage.to_string(),
            });
        }
        let cfg: AEConfig = serde_json::from_value(ckpt.config["ae"].clone())
            .map_err(|e| EagError::format(format!("checkpoint ae config: {e}")))?;
        let n_neurons: usize = serde_json::from_value(ckpt.config["n_neurons"].clone())
            .map_err(|e| EagError::format(format!("checkpoint n_neurons: {e}")))?;
        let train_cfg: TrainConfig = serde_json::from_value(ckpt.config["train"].clone())
            .map_err(|e| EagError::format(format!("checkpoint train config: {e}")))?;
        let mut seed_rng = RandomStream::seeded(0);
        let mut model = AEModel::new(&cfg, n_neurons, &mut seed_rng)?;
        let mut adam = Adam::new(&model.store);
        trainer::restore_into(ckpt, &mut model.store, &mut adam)?;
        Ok((model, adam, train_cfg))
    }
}

/// [t, n] tensor of one trial's counts.
fn spikes_to_tensor(spikes: &SpikeTrain) -> Tensor {
    let (n, t) = (spikes.n_neurons(), spikes.t_bins());
    let mut data = vec![0.0f64; t * n];
    for ti in 0..t {
        for i in 0..n {
            data[ti * n + i] = spikes.count(i, ti) as f64;
        }
    }
    Tensor::from_vec(&[t, n], data).expect("shape by construction")
}

fn spikes_batch_tensor(trials: &[&SpikeTrain]) -> Result<Tensor> {
    let n = trials[0].n_neurons();
    let t = trials[0].t_bins();
    let mut data = vec![0.0f64; trials.len() * t * n];
    for (b, sp) in trials.iter().enumerate() {
        if sp.n_neurons() != n || sp.t_bins() != t {
            return Err(EagError::shape("batch trials must share n and t"));
        }
        for ti in 0..t {
            for i in 0..n {
                data[(b * t + ti) * n + i] = sp.count(i, ti) as f64;
            }
        }
    }
    Tensor::from_vec(&[trials.len() * t, n], data)
}

/// Mean over masked cells of `rate - count*log(rate) + log(count!)`.
///
/// `mask` has [n, t] layout; `None` scores every cell.
pub fn poisson_nll(
    rates: &RateSequence,
    spikes: &SpikeTrain,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let n = rates.n_neurons();
    let t = rates.t_bins();
    if spikes.n_neurons() != n || spikes.t_bins() != t {
        return Err(EagError::shape("rates/spikes shape mismatch"));
    }
    if let Some(m) = mask {
        if m.len() != n * t {
            return Err(EagError::shape("mask length must be n*t"));
        }
    }
    let mut sum = 0.0;
    let mut cells = 0usize;
    for i in 0..n {
        for ti in 0..t {
            if let Some(m) = mask {
                if !m[i * t + ti] {
                    continue;
                }
            }
            let rate = rates.rate(i, ti);
            let count = spikes.count(i, ti) as f64;
            if rate <= 0.0 {
                return Err(EagError::numeric(format!(
                    "nonpositive rate {rate} under mask at neuron {i}, bin {ti}"
                )));
            }
            sum += rate - count * rate.ln() + ln_factorial(spikes.count(i, ti) as u64);
            cells += 1;
        }
    }
    if cells == 0 {
        return Err(EagError::numeric("poisson_nll: mask selects no cells"));
    }
    Ok(sum / cells as f64)
}

/// Coordinated dropout mask: whole time bins dropped across all neurons.
/// Returned layout is [n, t], constant along the neuron axis; `true` marks a
/// dropped (scored) cell.
pub fn coordinated_dropout_mask(
    shape: (usize, usize),
    drop_prob: f64,
    rng: &mut RandomStream,
) -> Vec<bool> {
    let (n, t) = shape;
    assert!((0.0..1.0).contains(&drop_prob), "drop_prob must be in [0,1)");
    let bins: Vec<bool> = (0..t).map(|_| rng.uniform() < drop_prob).collect();
    let mut mask = vec![false; n * t];
    for i in 0..n {
        for (ti, &dropped) in bins.iter().enumerate() {
            mask[i * t + ti] = dropped;
        }
    }
    mask
}

/// Per-bin view of a coordinated mask.
pub fn dropped_bins(mask: &[bool], n: usize, t: usize) -> Vec<usize> {
    assert_eq!(mask.len(), n * t);
    (0..t).filter(|&ti| mask[ti]).collect()
}

/// Everything a caller needs after stage-1 training: the best-validation
/// model, the optimizer state, the log, and the draw-stream state for
/// checkpointed resumes.
pub struct AeTrainOutcome {
    pub model: AEModel,
    pub adam: Adam,
    pub log: TrainingLog,
    pub rng_state: (u64, u64),
}

/// Prior state to continue training from (epoch counter keeps running).
pub struct AeResume {
    pub model: AEModel,
    pub adam: Adam,
    pub start_epoch: usize,
    pub rng_state: (u64, u64),
}

/// Train stage 1. Returns the best-validation model and the per-epoch log.
///
/// Training batches mask random bins per trial (coordinated dropout), zero
/// them at the encoder input, and score the Poisson NLL only there, plus an
/// L2 penalty on first differences of z. Validation scores the full grid
/// with no dropout.
pub fn train_autoencoder(
    dataset: &TrialDataset,
    cfg: &AEConfig,
    schedule: &TrainConfig,
    rng: &mut RandomStream,
) -> Result<(AEModel, TrainingLog)> {
    let out = train_autoencoder_full(dataset, cfg, schedule, rng, None)?;
    Ok((out.model, out.log))
}

pub fn train_autoencoder_full(
    dataset: &TrialDataset,
    cfg: &AEConfig,
    schedule: &TrainConfig,
    rng: &mut RandomStream,
    resume: Option<AeResume>,
) -> Result<AeTrainOutcome> {
    cfg.validate(dataset.n_neurons())?;
    schedule.validate()?;
    let mut init_rng = rng.derive(1);
    let fresh_dropout_rng = rng.derive(2);

    let (model, adam, start_epoch, mut dropout_rng) = match resume {
        Some(r) => {
            let (key, counter) = r.rng_state;
            (r.model, r.adam, r.start_epoch, RandomStream::from_state(key, counter))
        }
        None => {
            let model = AEModel::new(cfg, dataset.n_neurons(), &mut init_rng)?;
            let adam = Adam::new(model.store());
            (model, adam, 0, fresh_dropout_rng)
        }
    };
    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = {
        let v = dataset.indices_of(Split::Val);
        if v.is_empty() {
            train_idx.clone()
        } else {
            v
        }
    };
    if train_idx.is_empty() {
        return Err(EagError::config("dataset has no training trials"));
    }
    let t = dataset.t_bins();
    let n = dataset.n_neurons();

    // fit() drives these closures strictly sequentially; RefCell hands each
    // one the borrow it needs.
    let model_cell = std::cell::RefCell::new(model);
    let adam_cell = std::cell::RefCell::new(adam);
    let best_cell = std::cell::RefCell::new(None::<ParamStore>);

    let mut step = |batch: &[usize], lr: f64| -> Result<f64> {
        let mut step_model = model_cell.borrow_mut();
        let mut adam = adam_cell.borrow_mut();
        let bsz = batch.len();
        // Assemble inputs with coordinated dropout per trial.
        let mut x = Tensor::zeros(&[bsz * t, n]);
        let mut loss_rows: Vec<usize> = Vec::new();
        let mut counts_rows: Vec<f64> = Vec::new();
        let mut lnfact_sum = 0.0f64;
        for (b, &ti_idx) in batch.iter().enumerate() {
            let spikes = &dataset.trial(ti_idx).spikes;
            let bins: Vec<bool> = (0..t).map(|_| dropout_rng.uniform() < cfg.dropout_prob).collect();
            if !bins.iter().any(|&d| d) {
                // No dropped bin this draw: score the final bin so the batch
                // always has a loss target.
                let ti = t - 1;
                loss_rows.push(b * t + ti);
                for i in 0..n {
                    let c = spikes.count(i, ti) as f64;
                    counts_rows.push(c);
                    lnfact_sum += ln_factorial(spikes.count(i, ti) as u64);
                }
                for tj in 0..t {
                    if tj == ti {
                        continue;
                    }
                    for i in 0..n {
                        x.data_mut()[(b * t + tj) * n + i] = spikes.count(i, tj) as f64;
                    }
                }
                continue;
            }
            for ti in 0..t {
                if bins[ti] {
                    loss_rows.push(b * t + ti);
                    for i in 0..n {
                        let c = spikes.count(i, ti) as f64;
                        counts_rows.push(c);
                        lnfact_sum += ln_factorial(spikes.count(i, ti) as u64);
                    }
                } else {
                    for i in 0..n {
                        x.data_mut()[(b * t + ti) * n + i] = spikes.count(i, ti) as f64;
                    }
                }
            }
        }
        let n_loss_cells = counts_rows.len();

        let tape = Tape::new();
        let vars = step_model.store().to_tape(&tape);
        let xv = tape.leaf(x);
        let z = step_model.forward_encode(&tape, &vars, xv, bsz, t);
        let logr = step_model.forward_decode(&tape, &vars, z, bsz, t);

        // Poisson NLL on dropped bins, written in log-rate form:
        // exp(logr) - count * logr (the log-factorial constant is added to
        // the reported value outside the tape).
        let rows = std::sync::Arc::new(loss_rows);
        let logr_m = tape.gather_rows(logr, rows.clone());
        let counts = tape.leaf(
            Tensor::from_vec(&[rows.len(), n], counts_rows).expect("counts shape"),
        );
        let rate_m = tape.exp(logr_m);
        let weighted = tape.mul(counts, logr_m);
        let per_cell = tape.sub(rate_m, weighted);
        let nll = tape.mean(per_cell);

        // Smoothness: mean squared first difference of z along t.
        let idx_hi: Vec<usize> = (0..bsz)
            .flat_map(|b| (1..t).map(move |ti| b * t + ti))
            .collect();
        let idx_lo: Vec<usize> = (0..bsz)
            .flat_map(|b| (0..t - 1).map(move |ti| b * t + ti))
            .collect();
        let z_hi = tape.gather_rows(z, std::sync::Arc::new(idx_hi));
        let z_lo = tape.gather_rows(z, std::sync::Arc::new(idx_lo));
        let dz = tape.sub(z_hi, z_lo);
        let dz2 = tape.mul(dz, dz);
        let smooth = tape.mean(dz2);
        let smooth_scaled = tape.scale(smooth, cfg.smoothness_weight);
        let loss = tape.add(nll, smooth_scaled);

        let loss_value = tape.with_value(loss, |v| v.data()[0]);
        let grads = tape.backward(loss);
        let grad_list: Vec<Option<Tensor>> =
            vars.iter().map(|v| grads.get(*v).cloned()).collect();
        adam.step(step_model.store_mut(), &grad_list, lr, schedule.grad_clip);
        Ok(loss_value + lnfact_sum / n_loss_cells as f64)
    };

    // Validation: full-input reconstruction NLL over every cell.
    let mut validate = || -> Result<f64> {
        let model = model_cell.borrow();
        validation_nll(&model, dataset, &val_idx, schedule.batch_size)
    };

    let mut on_best = |_epoch: usize| {
        *best_cell.borrow_mut() = Some(model_cell.borrow().store().clone());
    };

    let log = trainer::fit(
        train_idx.len(),
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
    let rng_state = dropout_rng.state();
    Ok(AeTrainOutcome { model, adam, log, rng_state })
}

/// Full-grid Poisson NLL of reconstructions over the given trials.
pub fn validation_nll(
    model: &AEModel,
    dataset: &TrialDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let t = dataset.t_bins();
    let n = dataset.n_neurons();
    let mut total = 0.0f64;
    let mut cells = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let trials: Vec<&SpikeTrain> = chunk.iter().map(|&i| &dataset.trial(i).spikes).collect();
        let tape = Tape::new();
        let vars = model.store().to_tape(&tape);
        let x = tape.leaf(spikes_batch_tensor(&trials)?);
        let z = model.forward_encode(&tape, &vars, x, trials.len(), t);
        let logr = model.forward_decode(&tape, &vars, z, trials.len(), t);
        let logr_t = tape.value(logr);
        for (b, sp) in trials.iter().enumerate() {
            for ti in 0..t {
                for i in 0..n {
                    let lr = logr_t.data()[(b * t + ti) * n + i];
                    let c = sp.count(i, ti) as f64;
                    total += lr.exp() - c * lr + ln_factorial(sp.count(i, ti) as u64);
                    cells += 1;
                }
            }
        }
    }
    Ok(total / cells as f64)
}
