//! Optimization loop, learning-rate schedule, checkpointing, and telemetry.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EagError, Result};
use crate::numerics::{RandomStream, Tensor};
use crate::params::ParamStore;

/// Stage-2 style training settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip; energy losses with alpha near 2 can spike
    /// early, so the knob exists even though it defaults to off.
    pub grad_clip: Option<f64>,
    /// Early stopping patience in epochs (None = run all epochs).
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 4000,
            warmup_epochs: 100,
            batch_size: 512,
            seed: 0,
            grad_clip: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(EagError::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(EagError::config("epochs must be >= 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(EagError::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EagError::config("learning_rate must be > 0"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `learning_rate` over `warmup_epochs`, then cosine
/// decay to 0.1 * learning_rate at the final epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.learning_rate;
    if cfg.warmup_epochs > 0 && epoch < cfg.warmup_epochs {
        return lr * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let last = cfg.epochs.saturating_sub(1);
    if last <= cfg.warmup_epochs {
        return lr;
    }
    let t = (epoch - cfg.warmup_epochs) as f64 / (last - cfg.warmup_epochs) as f64;
    lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Adam with bias correction; state is aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step. `grads` is aligned with the store; `None` entries are
    /// treated as zero gradients.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
        grad_clip: Option<f64>,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        let clip_scale = match grad_clip {
            Some(clip) => {
                let mut sq = 0.0;
                for g in grads.iter().flatten() {
                    for &x in g.data() {
                        sq += x * x;
                    }
                }
                let norm = sq.sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let p = store.tensor_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match &grads[i] {
                Some(g) => {
                    for ((pm, pv), (&gx, px)) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(g.data().iter().zip(p.data_mut().iter_mut()))
                    {
                        let gx = gx * clip_scale;
                        *pm = self.beta1 * *pm + (1.0 - self.beta1) * gx;
                        *pv = self.beta2 * *pv + (1.0 - self.beta2) * gx * gx;
                        let mhat = *pm / bc1;
                        let vhat = *pv / bc2;
                        *px -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                None => {
                    // Zero gradient: moments decay, update stays exactly zero
                    // only when the moments are already zero; keep the decay
                    // so optimizer state matches a literal zero-grad step.
                    for ((pm, pv), px) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut().iter_mut())
                        .zip(p.data_mut().iter_mut())
                    {
                        *pm *= self.beta1;
                        *pv *= self.beta2;
                        let mhat = *pm / bc1;
                        let vhat = *pv / bc2;
                        *px -= lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Shared epoch loop: shuffled batches from the trainer's own substream,
/// warmup+cosine learning rate, best-validation tracking, optional early
/// stopping, and a hard abort on non-finite losses.
///
/// `step(batch, lr)` performs forward/backward/update and returns the batch
/// loss; `validate()` scores the validation split; `on_best()` snapshots
/// whatever the caller wants to keep for the best epoch.
pub fn fit(
    n_train: usize,
    start_epoch: usize,
    cfg: &TrainConfig,
    step: &mut dyn FnMut(&[usize], f64) -> Result<f64>,
    validate: &mut dyn FnMut() -> Result<f64>,
    on_best: &mut dyn FnMut(usize),
) -> Result<TrainingLog> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(EagError::config("fit requires a nonempty training split"));
    }
    let mut shuffle_rng = RandomStream::substream(cfg.seed, 0x7241_494E | (1 << 40));
    let mut log = TrainingLog { records: Vec::new(), best_epoch: 0, best_val: f64::INFINITY };
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let loss = step(batch, lr)?;
            if !loss.is_finite() {
                return Err(EagError::numeric(format!(
                    "non-finite training loss at epoch {epoch} batch {batch_idx}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = validate()?;
        if !val_loss.is_finite() {
            return Err(EagError::numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log.records.push(EpochRecord { epoch, train_loss, val_loss, lr });
        if val_loss < log.best_val {
            log.best_val = val_loss;
            log.best_epoch = epoch;
            since_best = 0;
            on_best(epoch);
        } else {
            since_best += 1;
            if let Some(p) = cfg.patience {
                if since_best >= p {
                    break;
                }
            }
        }
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "EAGC", version u16, JSON header, raw f64 blocks.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"EAGC";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ae,
    Eag,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Ae => write!(f, "ae"),
            Stage::Eag => write!(f, "eag"),
        }
    }
}

/// In-memory checkpoint: parameters plus optimizer and RNG state, enough to
/// resume training or reproduce forward passes bitwise.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub val_metric: f64,
    pub rng_state: (u64, u64),
    pub adam_t: u64,
    /// Named tensors: model parameters, then optimizer moments.
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    stage: Stage,
    config: serde_json::Value,
    epoch: usize,
    val_metric: f64,
    rng_key: u64,
    rng_counter: u64,
    adam_t: u64,
    blocks: Vec<BlockEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.blocks.len());
    for (name, tensor) in &ckpt.blocks {
        let offset = payload.len() as u64;
        let bytes = f64s_to_le_bytes(tensor.data());
        entries.push(BlockEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            crc32: crc32(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CkptHeader {
        stage: ckpt.stage,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        val_metric: ckpt.val_metric,
        rng_key: ckpt.rng_state.0,
        rng_counter: ckpt.rng_state.1,
        adam_t: ckpt.adam_t,
        blocks: entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| EagError::format(format!("checkpoint header encode: {e}")))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(EagError::format("not an EAGC checkpoint (bad magic)"));
    }
    let mut v = [0u8; 2];
    file.read_exact(&mut v)?;
    let version = u16::from_le_bytes(v);
    if version != CKPT_VERSION {
        return Err(EagError::format(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mut hlen = [0u8; 4];
    file.read_exact(&mut hlen)?;
    let hlen = u32::from_le_bytes(hlen) as usize;
    let mut header_bytes = vec![0u8; hlen];
    file.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| EagError::format(format!("checkpoint header decode: {e}")))?;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let mut blocks = Vec::with_capacity(header.blocks.len());
    for entry in &header.blocks {
        let len: usize = entry.shape.iter().product::<usize>() * 8;
        let start = entry.offset as usize;
        let end = start + len;
        if end > payload.len() {
            return Err(EagError::format(format!(
                "checkpoint truncated: block `{}` ends at {end}, payload is {}",
                entry.name,
                payload.len()
            )));
        }
        let bytes = &payload[start..end];
        if crc32(bytes) != entry.crc32 {
            return Err(EagError::format(format!(
                "checksum failure in checkpoint block `{}`",
                entry.name
            )));
        }
        let tensor = Tensor::from_vec(&entry.shape, le_bytes_to_f64s(bytes))?;
        blocks.push((entry.name.clone(), tensor));
    }
    Ok(Checkpoint {
        stage: header.stage,
        config: header.config,
        epoch: header.epoch,
        val_metric: header.val_metric,
        rng_state: (header.rng_key, header.rng_counter),
        adam_t: header.adam_t,
        blocks,
    })
}

/// Assemble checkpoint blocks from a parameter store and optimizer.
pub fn blocks_from(store: &ParamStore, adam: &Adam) -> Vec<(String, Tensor)> {
    let mut blocks = Vec::with_capacity(store.len() * 3);
    for (name, tensor) in store.iter() {
        blocks.push((name.to_string(), tensor.clone()));
    }
    for (i, m) in adam.m.iter().enumerate() {
        blocks.push((format!("adam.m.{}", store.name(i)), m.clone()));
    }
    for (i, v) in adam.v.iter().enumerate() {
        blocks.push((format!("adam.v.{}", store.name(i)), v.clone()));
    }
    blocks
}

/// Restore parameters and optimizer state from checkpoint blocks.
pub fn restore_into(ckpt: &Checkpoint, store: &mut ParamStore, adam: &mut Adam) -> Result<()> {
    for i in 0..store.len() {
        let name = store.name(i).to_string();
        let t = ckpt
            .block(&name)
            .ok_or_else(|| EagError::format(format!("checkpoint missing block `{name}`")))?;
        if t.shape() != store.tensor(i).shape() {
            return Err(EagError::shape(format!(
                "checkpoint block `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.tensor(i).shape()
            )));
        }
        *store.tensor_mut(i) = t.clone();
        if let Some(m) = ckpt.block(&format!("adam.m.{name}")) {
            adam.m[i] = m.clone();
        }
        if let Some(v) = ckpt.block(&format!("adam.v.{name}")) {
            adam.v[i] = v.clone();
        }
    }
    adam.t = ckpt.adam_t;
    Ok(())
}

fn f64s_to_le_bytes(vals: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect()
}

/// CRC-32 (IEEE), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}
