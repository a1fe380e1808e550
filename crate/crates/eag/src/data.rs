//! Core domain containers shared across the pipeline.

use crate::error::{EagError, Result};

/// Binned spike counts for one trial: `n` neurons by `t` time bins,
/// row-major over neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    counts: Vec<u16>,
    n: usize,
    t: usize,
    bin_width: f64,
}

impl SpikeTrain {
    pub fn new(n: usize, t: usize, bin_width: f64, counts: Vec<u16>) -> Result<Self> {
        if counts.len() != n * t {
            return Err(EagError::shape(format!(
                "spike counts length {} != n*t = {}",
                counts.len(),
                n * t
            )));
        }
        Ok(SpikeTrain { counts, n, t, bin_width })
    }

    pub fn zeros(n: usize, t: usize, bin_width: f64) -> Self {
        SpikeTrain { counts: vec![0; n * t], n, t, bin_width }
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn t_bins(&self) -> usize {
        self.t
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    #[inline]
    pub fn count(&self, neuron: usize, bin: usize) -> u16 {
        self.counts[neuron * self.t + bin]
    }

    pub fn set_count(&mut self, neuron: usize, bin: usize, c: u16) {
        self.counts[neuron * self.t + bin] = c;
    }

    pub fn counts(&self) -> &[u16] {
        &self.counts
    }

    /// Total spikes in one time bin summed over neurons.
    pub fn population_count(&self, bin: usize) -> u64 {
        (0..self.n).map(|i| self.count(i, bin) as u64).sum()
    }
}

/// Nonnegative Poisson intensities per neuron per bin (expected spikes/bin).
#[derive(Debug, Clone, PartialEq)]
pub struct RateSequence {
    rates: Vec<f64>,
    n: usize,
    t: usize,
    bin_width: f64,
}

impl RateSequence {
    pub fn new(n: usize, t: usize, bin_width: f64, rates: Vec<f64>) -> Result<Self> {
        if rates.len() != n * t {
            return Err(EagError::shape(format!(
                "rates length {} != n*t = {}",
                rates.len(),
                n * t
            )));
        }
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(EagError::numeric("rates must be finite and nonnegative"));
        }
        Ok(RateSequence { rates, n, t, bin_width })
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn t_bins(&self) -> usize {
        self.t
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    #[inline]
    pub fn rate(&self, neuron: usize, bin: usize) -> f64 {
        self.rates[neuron * self.t + bin]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn mean_rate(&self) -> f64 {
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }
}

/// Stage-1 latent sequence, `t` time steps of `d`-dimensional vectors
/// (time-major storage).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    z: Vec<f64>,
    d: usize,
    t: usize,
}

impl LatentSequence {
    pub fn new(d: usize, t: usize, z: Vec<f64>) -> Result<Self> {
        if z.len() != d * t {
            return Err(EagError::shape(format!("latent length {} != d*t = {}", z.len(), d * t)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(EagError::numeric("latents must be finite"));
        }
        Ok(LatentSequence { z, d, t })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn t_bins(&self) -> usize {
        self.t
    }

    /// The d-vector at time `bin`.
    pub fn at(&self, bin: usize) -> &[f64] {
        &self.z[bin * self.d..(bin + 1) * self.d]
    }

    /// Time-major [t, d] storage.
    pub fn values(&self) -> &[f64] {
        &self.z
    }
}

/// Behavioral conditioning variable for one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorCondition {
    /// Initial reach angle in radians.
    Angle(f64),
    /// Per-bin hand velocity, two components of length `t`.
    Velocity { vx: Vec<f64>, vy: Vec<f64> },
}

impl BehaviorCondition {
    pub fn kind(&self) -> ConditionKind {
        match self {
            BehaviorCondition::Angle(_) => ConditionKind::Angle,
            BehaviorCondition::Velocity { .. } => ConditionKind::Velocity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Angle,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(EagError::format(format!("unknown split label {v}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub spikes: SpikeTrain,
    pub rates: Option<RateSequence>,
    pub behavior: Option<BehaviorCondition>,
}

/// A homogeneous set of trials with split labels.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    trials: Vec<Trial>,
    splits: Vec<Split>,
    n: usize,
    t: usize,
    bin_width: f64,
}

impl TrialDataset {
    pub fn new(trials: Vec<Trial>, splits: Vec<Split>) -> Result<Self> {
        if trials.is_empty() {
            return Err(EagError::config("dataset needs at least one trial"));
        }
        if trials.len() != splits.len() {
            return Err(EagError::shape("trials and split labels differ in length"));
        }
        let n = trials[0].spikes.n_neurons();
        let t = trials[0].spikes.t_bins();
        let bw = trials[0].spikes.bin_width();
        for (i, trial) in trials.iter().enumerate() {
            if trial.spikes.n_neurons() != n
                || trial.spikes.t_bins() != t
                || trial.spikes.bin_width() != bw
            {
                return Err(EagError::shape(format!("trial {i} shape differs from trial 0")));
            }
            if let Some(r) = &trial.rates {
                if r.n_neurons() != n || r.t_bins() != t {
                    return Err(EagError::shape(format!("trial {i} rates shape mismatch")));
                }
            }
            if let Some(BehaviorCondition::Velocity { vx, vy }) = &trial.behavior {
                if vx.len() != t || vy.len() != t {
                    return Err(EagError::shape(format!("trial {i} velocity length mismatch")));
                }
            }
        }
        Ok(TrialDataset { trials, splits, n, t, bin_width: bw })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_neurons(&self) -> usize {
        self.n
    }

    pub fn t_bins(&self) -> usize {
        self.t
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn trial(&self, i: usize) -> &Trial {
        &self.trials[i]
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.trials.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn spikes(&self) -> Vec<&SpikeTrain> {
        self.trials.iter().map(|t| &t.spikes).collect()
    }

    pub fn behavior_kind(&self) -> Option<ConditionKind> {
        self.trials.iter().find_map(|t| t.behavior.as_ref().map(|b| b.kind()))
    }
}
