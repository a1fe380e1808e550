//! Synthetic benchmark: Lorenz attractor trajectories projected onto
//! per-neuron firing rates, then Poisson-sampled spike trains.

use crate::data::{BehaviorCondition, RateSequence, SpikeTrain, Split, Trial, TrialDataset};
use crate::error::{EagError, Result};
use crate::numerics::RandomStream;

/// Substream purposes; trial index is folded into the low bits.
const STREAM_WARMUP: u64 = 1 << 40;
const STREAM_X0: u64 = 2 << 40;
const STREAM_READOUT: u64 = 3 << 40;
const STREAM_SPIKES: u64 = 4 << 40;
const STREAM_VELOCITY: u64 = 5 << 40;

/// Lorenz system parameters plus integration controls.
///
/// The canonical chaotic regime is the default; per-trial initial conditions
/// are jittered around an attractor point to decorrelate trials.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Seconds of simulated time per integration step; one step per time bin.
    pub dt: f64,
    /// Steps discarded before recording, per trial.
    pub burn_in: usize,
    /// Std of the Gaussian perturbation applied to the initial state.
    pub x0_jitter: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        LorenzParams {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            burn_in: 1000,
            x0_jitter: 0.5,
        }
    }
}

impl LorenzParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(EagError::config(format!("lorenz dt must be > 0, got {}", self.dt)));
        }
        if self.x0_jitter < 0.0 {
            return Err(EagError::config("lorenz x0_jitter must be >= 0"));
        }
        Ok(())
    }
}

#[inline]
fn lorenz_deriv(p: &LorenzParams, s: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = s;
    [p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z]
}

#[inline]
fn rk4_step(p: &LorenzParams, s: [f64; 3], dt: f64) -> [f64; 3] {
    let k1 = lorenz_deriv(p, s);
    let mid1 = [s[0] + 0.5 * dt * k1[0], s[1] + 0.5 * dt * k1[1], s[2] + 0.5 * dt * k1[2]];
    let k2 = lorenz_deriv(p, mid1);
    let mid2 = [s[0] + 0.5 * dt * k2[0], s[1] + 0.5 * dt * k2[1], s[2] + 0.5 * dt * k2[2]];
    let k3 = lorenz_deriv(p, mid2);
    let end = [s[0] + dt * k3[0], s[1] + dt * k3[1], s[2] + dt * k3[2]];
    let k4 = lorenz_deriv(p, end);
    [
        s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        s[2] + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Integrate the Lorenz system with fixed-step RK4.
///
/// The initial state is jittered by `params.x0_jitter` using `rng`, then
/// `params.burn_in` steps are discarded and `steps` post-burn-in states are
/// returned (one per future time bin). A non-finite state aborts with the
/// offending step index.
pub fn integrate_lorenz(
    x0: [f64; 3],
    params: &LorenzParams,
    steps: usize,
    rng: &mut RandomStream,
) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    if steps == 0 {
        return Err(EagError::config("integrate_lorenz requires steps >= 1"));
    }
    let mut s = x0;
    if params.x0_jitter > 0.0 {
        for v in s.iter_mut() {
            *v += params.x0_jitter * rng.normal();
        }
    }
    let mut out = Vec::with_capacity(steps);
    for step in 0..params.burn_in + steps {
        s = rk4_step(params, s, params.dt);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(EagError::numeric(format!(
                "lorenz integration diverged at step {step}"
            )));
        }
        if step >= params.burn_in {
            out.push(s);
        }
    }
    Ok(out)
}

/// Per-coordinate standardization statistics of a set of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl TrajectoryStats {
    pub fn from_trajectories(trajs: &[Vec<[f64; 3]>]) -> Self {
        let mut mean = [0.0f64; 3];
        let mut count = 0usize;
        for tr in trajs {
            for s in tr {
                for c in 0..3 {
                    mean[c] += s[c];
                }
            }
            count += tr.len();
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = [0.0f64; 3];
        for tr in trajs {
            for s in tr {
                for c in 0..3 {
                    let d = s[c] - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std =
            [0, 1, 2].map(|c| (var[c] / count as f64).sqrt().max(1e-12));
        TrajectoryStats { mean, std }
    }

    #[inline]
    pub fn standardize(&self, s: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| (s[c] - self.mean[c]) / self.std[c])
    }
}

/// Fixed random linear readout from standardized Lorenz states to per-neuron
/// log-rate offsets. Entry variance is chosen so the log-linear link keeps
/// the dataset mean rate near `base_rate` at gain 1 (row variance ~0.35).
#[derive(Debug, Clone)]
pub struct RateReadout {
    /// n x 3, row-major.
    pub weights: Vec<f64>,
    pub n_neurons: usize,
}

const READOUT_ROW_VAR: f64 = 0.35;

impl RateReadout {
    pub fn draw(n_neurons: usize, rng: &mut RandomStream) -> Self {
        let std = (READOUT_ROW_VAR / 3.0).sqrt();
        let mut weights = vec![0.0f64; n_neurons * 3];
        rng.fill_normal(&mut weights, std);
        RateReadout { weights, n_neurons }
    }

    /// rates[i, t] = exp(gain * (R std_traj)[i, t] + ln(base_rate))
    pub fn project(
        &self,
        trajectory: &[[f64; 3]],
        stats: &TrajectoryStats,
        gain: f64,
        base_rate: f64,
        bin_width: f64,
    ) -> Result<RateSequence> {
        let t = trajectory.len();
        let n = self.n_neurons;
        let log_base = base_rate.ln();
        let mut rates = vec![0.0f64; n * t];
        for (ti, s) in trajectory.iter().enumerate() {
            let std = stats.standardize(*s);
            for i in 0..n {
                let u = self.weights[i * 3] * std[0]
                    + self.weights[i * 3 + 1] * std[1]
                    + self.weights[i * 3 + 2] * std[2];
                rates[i * t + ti] = (gain * u + log_base).exp();
            }
        }
        RateSequence::new(n, t, bin_width, rates)
    }
}

/// One-shot projection of a single trajectory: standardizes over the given
/// trajectory, draws a fresh readout from `rng`, and applies the log-linear
/// link. Dataset generation shares one readout and dataset-wide statistics
/// instead; see [`make_lorenz_dataset`].
pub fn project_to_rates(
    trajectory: &[[f64; 3]],
    n_neurons: usize,
    gain: f64,
    base_rate: f64,
    bin_width: f64,
    rng: &mut RandomStream,
) -> Result<RateSequence> {
    if n_neurons == 0 {
        return Err(EagError::config("project_to_rates needs n_neurons >= 1"));
    }
    let stats = TrajectoryStats::from_trajectories(std::slice::from_ref(&trajectory.to_vec()));
    let readout = RateReadout::draw(n_neurons, rng);
    readout.project(trajectory, &stats, gain, base_rate, bin_width)
}

/// Independent Poisson draw per (neuron, bin).
pub fn sample_poisson_spikes(rates: &RateSequence, rng: &mut RandomStream) -> SpikeTrain {
    let n = rates.n_neurons();
    let t = rates.t_bins();
    let mut out = SpikeTrain::zeros(n, t, rates.bin_width());
    for i in 0..n {
        for ti in 0..t {
            let c = rng.poisson(rates.rate(i, ti));
            out.set_count(i, ti, c.min(u16::MAX as u64) as u16);
        }
    }
    out
}

/// Full synthetic dataset configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzDatasetConfig {
    pub n_trials: usize,
    pub n_neurons: usize,
    pub t_bins: usize,
    pub gain: f64,
    /// Expected spikes per bin at the readout's operating point.
    pub base_rate: f64,
    pub bin_width: f64,
    pub params: LorenzParams,
    /// Attach per-bin velocity labels (a 2x3 linear readout of the
    /// standardized state plus Gaussian noise) for conditional training.
    pub velocity_labels: bool,
    pub velocity_noise_std: f64,
    /// Fraction of trials labeled as validation (taken from the end).
    pub val_frac: f64,
}

impl Default for LorenzDatasetConfig {
    fn default() -> Self {
        LorenzDatasetConfig {
            n_trials: 7000,
            n_neurons: 128,
            t_bins: 256,
            gain: 1.0,
            base_rate: 0.3,
            bin_width: 0.005,
            params: LorenzParams::default(),
            velocity_labels: false,
            velocity_noise_std: 0.05,
            val_frac: 0.1,
        }
    }
}

impl LorenzDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.n_trials == 0 || self.n_neurons == 0 || self.t_bins == 0 {
            return Err(EagError::config("dataset counts must all be >= 1"));
        }
        if !(self.base_rate > 0.0) {
            return Err(EagError::config("base_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(EagError::config("val_frac must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Generate the synthetic dataset: per-trial jittered Lorenz trajectories,
/// dataset-wide standardization, a shared random rate readout, Poisson
/// spikes, and optional velocity labels. Bitwise deterministic in `seed`;
/// trials use independent substreams so any evaluation order agrees with
/// serial generation.
pub fn make_lorenz_dataset(cfg: &LorenzDatasetConfig, seed: u64) -> Result<TrialDataset> {
    cfg.validate()?;

    // Warm start: land on the attractor once, shared by all trials.
    let mut warm_rng = RandomStream::substream(seed, STREAM_WARMUP);
    let warm = {
        let p = LorenzParams { burn_in: 2000, x0_jitter: 0.0, ..cfg.params.clone() };
        integrate_lorenz([1.0, 1.0, 1.0], &p, 1, &mut warm_rng)?[0]
    };

    let mut trajectories = Vec::with_capacity(cfg.n_trials);
    for trial in 0..cfg.n_trials {
        let mut rng = RandomStream::substream(seed, STREAM_X0 | trial as u64);
        trajectories.push(integrate_lorenz(warm, &cfg.params, cfg.t_bins, &mut rng)?);
    }

    let stats = TrajectoryStats::from_trajectories(&trajectories);
    let mut readout_rng = RandomStream::substream(seed, STREAM_READOUT);
    let readout = RateReadout::draw(cfg.n_neurons, &mut readout_rng);
    // Velocity readout entries ~ N(0, 1/3): unit-ish component variance.
    let vel_weights: Vec<f64> = {
        let mut w = vec![0.0f64; 6];
        readout_rng.fill_normal(&mut w, (1.0f64 / 3.0).sqrt());
        w
    };

    let mut trials = Vec::with_capacity(cfg.n_trials);
    for (trial, traj) in trajectories.iter().enumerate() {
        let rates = readout.project(traj, &stats, cfg.gain, cfg.base_rate, cfg.bin_width)?;
        let mut spike_rng = RandomStream::substream(seed, STREAM_SPIKES | trial as u64);
        let spikes = sample_poisson_spikes(&rates, &mut spike_rng);
        let behavior = if cfg.velocity_labels {
            let mut vel_rng = RandomStream::substream(seed, STREAM_VELOCITY | trial as u64);
            let mut vx = Vec::with_capacity(cfg.t_bins);
            let mut vy = Vec::with_capacity(cfg.t_bins);
            for s in traj {
                let std = stats.standardize(*s);
                let x = vel_weights[0] * std[0] + vel_weights[1] * std[1] + vel_weights[2] * std[2];
                let y = vel_weights[3] * std[0] + vel_weights[4] * std[1] + vel_weights[5] * std[2];
                vx.push(x + cfg.velocity_noise_std * vel_rng.normal());
                vy.push(y + cfg.velocity_noise_std * vel_rng.normal());
            }
            Some(BehaviorCondition::Velocity { vx, vy })
        } else {
            None
        };
        trials.push(Trial { spikes, rates: Some(rates), behavior });
    }

    let n_val = ((cfg.n_trials as f64) * cfg.val_frac).round() as usize;
    let n_train = cfg.n_trials - n_val;
    let splits: Vec<Split> = (0..cfg.n_trials)
        .map(|i| if i < n_train { Split::Train } else { Split::Val })
        .collect();

    TrialDataset::new(trials, splits)
}
