//! Evaluation statistics: population spike count histogram KL, pairwise
//! correlation RMSE, ISI mean/std RMSE, and the closed-loop ridge decoder.
//!
//! All definitional choices are frozen here and pinned by the tests:
//! the histogram is over per-bin population totals; correlations are Pearson
//! over per-neuron count sequences concatenated across trials; ISIs come
//! from bin centers with a c-spike bin contributing c events (c-1 zero
//! intervals), pooled per neuron within trials only; the KL direction is
//! real || generated with 1e-6 smoothing on the union support.

use serde::{Deserialize, Serialize};

use crate::data::{BehaviorCondition, RateSequence, SpikeTrain, TrialDataset};
use crate::error::{EagError, Result};

pub const KL_SMOOTHING_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dkl_psch: f64,
    pub rmse_pairwise_corr: f64,
    pub rmse_mean_isi: f64,
    pub rmse_std_isi: f64,
    pub n_real_trials: usize,
    pub n_gen_trials: usize,
}

/// Normalized histogram of per-(trial, bin) population spike counts.
pub fn population_spike_count_histogram(spikes: &[&SpikeTrain]) -> Vec<f64> {
    assert!(!spikes.is_empty(), "histogram needs at least one trial");
    let mut counts: Vec<u64> = Vec::new();
    let mut total = 0u64;
    for sp in spikes {
        for bin in 0..sp.t_bins() {
            let c = sp.population_count(bin) as usize;
            if c >= counts.len() {
                counts.resize(c + 1, 0);
            }
            counts[c] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// KL(p || q) over the union support with eps-smoothing then renormalization.
/// Direction: real as `p`, generated as `q`.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let len = p.len().max(q.len());
    let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let psum: f64 = (0..len).map(|i| get(p, i) + eps).sum();
    let qsum: f64 = (0..len).map(|i| get(q, i) + eps).sum();
    let mut kl = 0.0;
    for i in 0..len {
        let pi = (get(p, i) + eps) / psum;
        let qi = (get(q, i) + eps) / qsum;
        kl += pi * (pi / qi).ln();
    }
    kl
}

/// Pearson correlations between neuron count sequences concatenated across
/// trials. Zero-variance neurons correlate 0 with everything and are flagged;
/// the diagonal is 1 by definition.
pub struct PairwiseCorrelations {
    pub matrix: Vec<f64>,
    pub n: usize,
    pub zero_variance: Vec<bool>,
}

impl PairwiseCorrelations {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    /// Upper-triangle entries (i < j) in row-major order.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n - 1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.at(i, j));
            }
        }
        out
    }
}

pub fn pairwise_correlations(spikes: &[&SpikeTrain]) -> Result<PairwiseCorrelations> {
    if spikes.is_empty() {
        return Err(EagError::config("pairwise correlations need at least one trial"));
    }
    let n = spikes[0].n_neurons();
    let samples: usize = spikes.iter().map(|s| s.t_bins()).sum();
    if samples < 2 {
        return Err(EagError::config("need at least 2 time samples"));
    }
    // Per-neuron mean and centered series.
    let mut series = vec![0.0f64; n * samples];
    for i in 0..n {
        let mut off = 0;
        for sp in spikes {
            for t in 0..sp.t_bins() {
                series[i * samples + off + t] = sp.count(i, t) as f64;
            }
            off += sp.t_bins();
        }
    }
    let mut means = vec![0.0f64; n];
    for i in 0..n {
        means[i] = series[i * samples..(i + 1) * samples].iter().sum::<f64>() / samples as f64;
    }
    let mut sds = vec![0.0f64; n];
    let mut zero_variance = vec![false; n];
    for i in 0..n {
        let row = &mut series[i * samples..(i + 1) * samples];
        for v in row.iter_mut() {
            *v -= means[i];
        }
        let ss: f64 = row.iter().map(|v| v * v).sum();
        sds[i] = ss.sqrt();
        if sds[i] == 0.0 {
            zero_variance[i] = true;
        }
    }
    let mut matrix = vec![0.0f64; n * n];
    for i in 0..n {
        matrix[i * n + i] = 1.0;
        for j in i + 1..n {
            let corr = if zero_variance[i] || zero_variance[j] {
                0.0
            } else {
                let dot: f64 = series[i * samples..(i + 1) * samples]
                    .iter()
                    .zip(series[j * samples..(j + 1) * samples].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (sds[i] * sds[j])).clamp(-1.0, 1.0)
            };
            matrix[i * n + j] = corr;
            matrix[j * n + i] = corr;
        }
    }
    Ok(PairwiseCorrelations { matrix, n, zero_variance })
}

/// Per-neuron ISI mean and population std in seconds, or None for neurons
/// with fewer than two events. Spike times are bin centers; a bin holding c
/// spikes contributes c events there (so c-1 zero ISIs); intervals never
/// cross trial boundaries.
pub fn isi_stats(spikes: &[&SpikeTrain]) -> Vec<Option<(f64, f64)>> {
    assert!(!spikes.is_empty());
    let n = spikes[0].n_neurons();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut isis: Vec<f64> = Vec::new();
        let mut events = 0usize;
        for sp in spikes {
            let bw = sp.bin_width();
            let mut last: Option<f64> = None;
            for t in 0..sp.t_bins() {
                let c = sp.count(i, t) as usize;
                if c == 0 {
                    continue;
                }
                let center = (t as f64 + 0.5) * bw;
                for k in 0..c {
                    if let Some(prev) = last {
                        isis.push(center - prev);
                    }
                    let _ = k;
                    last = Some(center);
                    events += 1;
                }
            }
        }
        if events < 2 || isis.is_empty() {
            out.push(None);
        } else {
            let mean = isis.iter().sum::<f64>() / isis.len() as f64;
            let var = isis.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / isis.len() as f64;
            out.push(Some((mean, var.sqrt())));
        }
    }
    out
}

/// Root mean squared difference of two equal-length vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EagError::shape(format!("rmse length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(EagError::config("rmse of empty vectors"));
    }
    let ms =
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(ms.sqrt())
}

// ---------------------------------------------------------------------------
// Ridge decoding
// ---------------------------------------------------------------------------

/// Linear velocity decoder: per-bin rate vector plus bias to (vx, vy).
#[derive(Debug, Clone)]
pub struct RidgeDecoder {
    /// (n+1) x 2, bias row last.
    pub weights: Vec<f64>,
    pub n_features: usize,
    pub lambda: f64,
}

impl RidgeDecoder {
    /// Decode a 2 x t velocity track from rates.
    pub fn decode(&self, rates: &RateSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = rates.n_neurons();
        if n != self.n_features {
            return Err(EagError::shape(format!(
                "decoder expects {} features, rates have {n}",
                self.n_features
            )));
        }
        let t = rates.t_bins();
        let mut vx = Vec::with_capacity(t);
        let mut vy = Vec::with_capacity(t);
        for ti in 0..t {
            let mut x = self.weights[n * 2];
            let mut y = self.weights[n * 2 + 1];
            for i in 0..n {
                let r = rates.rate(i, ti);
                x += self.weights[i * 2] * r;
                y += self.weights[i * 2 + 1] * r;
            }
            vx.push(x);
            vy.push(y);
        }
        Ok((vx, vy))
    }
}

/// Closed-form ridge fit of per-bin velocities from per-bin rate vectors
/// pooled over trials. The bias column is not penalized; lambda = 0 with a
/// rank-deficient design is an error.
pub fn ridge_fit(
    rates: &[&RateSequence],
    velocity: &[(&[f64], &[f64])],
    lambda: f64,
) -> Result<RidgeDecoder> {
    if rates.is_empty() || rates.len() != velocity.len() {
        return Err(EagError::shape("ridge_fit needs matching rate/velocity trials"));
    }
    if lambda < 0.0 {
        return Err(EagError::config("ridge lambda must be >= 0"));
    }
    let n = rates[0].n_neurons();
    let p = n + 1;
    let mut gram = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p * 2];
    let mut row = vec![0.0f64; p];
    for (r, (vx, vy)) in rates.iter().zip(velocity.iter()) {
        if r.n_neurons() != n {
            return Err(EagError::shape("ridge_fit trials must share n"));
        }
        let t = r.t_bins();
        if vx.len() != t || vy.len() != t {
            return Err(EagError::shape("velocity length must match t"));
        }
        for ti in 0..t {
            for i in 0..n {
                row[i] = r.rate(i, ti);
            }
            row[n] = 1.0;
            for i in 0..p {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..p {
                    gram[i * p + j] += ri * row[j];
                }
                rhs[i * 2] += ri * vx[ti];
                rhs[i * 2 + 1] += ri * vy[ti];
            }
        }
    }
    // Mirror and penalize (bias excluded).
    for i in 0..p {
        for j in 0..i {
            gram[i * p + j] = gram[j * p + i];
        }
    }
    for i in 0..n {
        gram[i * p + i] += lambda;
    }
    let weights = solve_cholesky(&mut gram, &mut rhs, p).map_err(|_| {
        EagError::numeric(
            "ridge system is singular (lambda = 0 with rank-deficient design?)",
        )
    })?;
    Ok(RidgeDecoder { weights, n_features: n, lambda })
}

/// Solve G W = B for SPD G in place; B has 2 columns. Returns W row-major
/// (p x 2).
fn solve_cholesky(gram: &mut [f64], rhs: &mut [f64], p: usize) -> std::result::Result<Vec<f64>, ()> {
    // Cholesky factorization G = L L^T.
    for i in 0..p {
        for j in 0..=i {
            let mut s = gram[i * p + j];
            for k in 0..j {
                s -= gram[i * p + k] * gram[j * p + k];
            }
            if i == j {
                if s <= 1e-12 {
                    return Err(());
                }
                gram[i * p + i] = s.sqrt();
            } else {
                gram[i * p + j] = s / gram[j * p + j];
            }
        }
    }
    // Forward then backward substitution per column.
    for col in 0..2 {
        for i in 0..p {
            let mut s = rhs[i * 2 + col];
            for k in 0..i {
                s -= gram[i * p + k] * rhs[k * 2 + col];
            }
            rhs[i * 2 + col] = s / gram[i * p + i];
        }
        for i in (0..p).rev() {
            let mut s = rhs[i * 2 + col];
            for k in i + 1..p {
                s -= gram[k * p + i] * rhs[k * 2 + col];
            }
            rhs[i * 2 + col] = s / gram[i * p + i];
        }
    }
    Ok(rhs.to_vec())
}

/// Per-trial R^2 of decoded velocities against the conditioning velocity,
/// pooled over bins and both components (per-component means in SS_tot).
pub fn closed_loop_validate(
    decoder: &RidgeDecoder,
    rates: &[&RateSequence],
    velocity: &[(&[f64], &[f64])],
) -> Result<Vec<f64>> {
    if rates.len() != velocity.len() {
        return Err(EagError::shape("rates/velocity trial mismatch"));
    }
    let mut out = Vec::with_capacity(rates.len());
    for (r, (vx, vy)) in rates.iter().zip(velocity.iter()) {
        let (dx, dy) = decoder.decode(r)?;
        let t = vx.len();
        let mx = vx.iter().sum::<f64>() / t as f64;
        let my = vy.iter().sum::<f64>() / t as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for ti in 0..t {
            ss_res += (dx[ti] - vx[ti]).powi(2) + (dy[ti] - vy[ti]).powi(2);
            ss_tot += (vx[ti] - mx).powi(2) + (vy[ti] - my).powi(2);
        }
        if ss_tot == 0.0 {
            return Err(EagError::numeric("zero-variance velocity target"));
        }
        out.push(1.0 - ss_res / ss_tot);
    }
    Ok(out)
}

/// Velocity views of a dataset's trials (errors if any trial lacks one).
pub fn velocity_views(ds: &TrialDataset) -> Result<Vec<(&[f64], &[f64])>> {
    ds.trials()
        .iter()
        .enumerate()
        .map(|(i, tr)| match &tr.behavior {
            Some(BehaviorCondition::Velocity { vx, vy }) => Ok((vx.as_slice(), vy.as_slice())),
            _ => Err(EagError::config(format!("trial {i} has no velocity behavior"))),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Composite evaluation
// ---------------------------------------------------------------------------

/// Raw per-metric artifacts for plotting/export alongside the scalar report.
pub struct MetricsArtifacts {
    pub real_hist: Vec<f64>,
    pub gen_hist: Vec<f64>,
    /// Per-neuron (mean, std) ISI pairs where both sides had >= 2 events.
    pub isi_real: Vec<Option<(f64, f64)>>,
    pub isi_gen: Vec<Option<(f64, f64)>>,
}

/// The four statistics comparing a generated dataset against a real one.
/// Neuron alignment is positional; ISI-based RMSEs exclude (pairwise) neurons
/// with fewer than two events on either side.
pub fn evaluate(real: &TrialDataset, generated: &TrialDataset) -> Result<(MetricsReport, MetricsArtifacts)> {
    if real.n_neurons() != generated.n_neurons() {
        return Err(EagError::shape(format!(
            "neuron count mismatch: real {} vs generated {}",
            real.n_neurons(),
            generated.n_neurons()
        )));
    }
    if (real.bin_width() - generated.bin_width()).abs() > 1e-12 {
        return Err(EagError::shape("bin width mismatch"));
    }
    let real_spikes = real.spikes();
    let gen_spikes = generated.spikes();

    let real_hist = population_spike_count_histogram(&real_spikes);
    let gen_hist = population_spike_count_histogram(&gen_spikes);
    let dkl_psch = kl_divergence(&real_hist, &gen_hist, KL_SMOOTHING_EPS);

    let rc = pairwise_correlations(&real_spikes)?;
    let gc = pairwise_correlations(&gen_spikes)?;
    let rmse_pairwise_corr = rmse(&rc.upper_triangle(), &gc.upper_triangle())?;

    let isi_real = isi_stats(&real_spikes);
    let isi_gen = isi_stats(&gen_spikes);
    let mut mean_r = Vec::new();
    let mut mean_g = Vec::new();
    let mut std_r = Vec::new();
    let mut std_g = Vec::new();
    for (a, b) in isi_real.iter().zip(isi_gen.iter()) {
        if let (Some((ma, sa)), Some((mb, sb))) = (a, b) {
            mean_r.push(*ma);
            mean_g.push(*mb);
            std_r.push(*sa);
            std_g.push(*sb);
        }
    }
    if mean_r.is_empty() {
        return Err(EagError::numeric(
            "no neuron has >= 2 events in both datasets; ISI RMSE undefined",
        ));
    }
    let rmse_mean_isi = rmse(&mean_r, &mean_g)?;
    let rmse_std_isi = rmse(&std_r, &std_g)?;

    Ok((
        MetricsReport {
            dkl_psch,
            rmse_pairwise_corr,
            rmse_mean_isi,
            rmse_std_isi,
            n_real_trials: real.len(),
            n_gen_trials: generated.len(),
        },
        MetricsArtifacts { real_hist, gen_hist, isi_real, isi_gen },
    ))
}
