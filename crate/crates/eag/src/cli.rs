//! Command drivers: simulate -> train-ae -> train-eag -> sample -> eval ->
//! decode. Each command is deterministic given its inputs and seed; the only
//! rerun-variable output is the recorded wall-clock latency in dataset meta.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::autoencoder::{self, AEModel, AeResume};
use crate::config::RunConfig;
use crate::data::{BehaviorCondition, ConditionKind, Split, Trial, TrialDataset};
use crate::dataset_file::{read_dataset, write_dataset};
use crate::energy_transformer::{self, EtModel, EtResume};
use crate::error::{EagError, Result};
use crate::lorenz::{make_lorenz_dataset, sample_poisson_spikes};
use crate::metrics::{self, velocity_views};
use crate::numerics::RandomStream;
use crate::trainer::{load_checkpoint, save_checkpoint};

const STREAM_AE_TRAIN: u64 = 21 << 40;
const STREAM_EAG_TRAIN: u64 = 22 << 40;
const STREAM_SAMPLE: u64 = 23 << 40;
const STREAM_RESAMPLE_SPIKES: u64 = 24 << 40;

#[derive(Parser, Debug)]
#[command(
    name = "eag",
    about = "Energy-based autoregressive generation of neural spike trains",
    version
)]
pub struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed (EAG_SEED also works).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic Lorenz dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        neurons: Option<usize>,
        #[arg(long)]
        bins: Option<usize>,
        /// Attach per-bin velocity labels for conditional training.
        #[arg(long)]
        velocity: bool,
    },
    /// Train the stage-1 autoencoder.
    TrainAe {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a previous checkpoint (epoch counter keeps running).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the stage-2 energy transformer (latents encoded once, cached).
    TrainEag {
        #[arg(long)]
        dataset: PathBuf,
        /// Stage-1 checkpoint providing the latent space.
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train with the dataset's behavior labels as conditions.
        #[arg(long)]
        conditional: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample trials: latents, decoded rates, and Poisson spikes.
    Sample {
        #[arg(long)]
        eag: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        count: usize,
        /// Autoregressive steps K of the cosine unmasking schedule.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        temperature: Option<f64>,
        /// Dataset whose behavior labels condition the first `count` samples.
        #[arg(long)]
        condition_file: Option<PathBuf>,
        /// Guidance strength for conditional sampling.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the four spike statistics of generated vs real data.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for CSV artifacts (defaults next to the report).
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Closed-loop ridge decoding: fit on real rates, decode generated ones.
    Decode {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env_seed()?;
            c
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Simulate { out, trials, neurons, bins, velocity } => {
            cmd_simulate(&cfg, trials, neurons, bins, velocity, &out)
        }
        Command::TrainAe { dataset, out, epochs, resume } => {
            cmd_train_ae(&cfg, &dataset, &out, epochs, resume.as_deref())
        }
        Command::TrainEag { dataset, ae, out, epochs, conditional, resume } => {
            cmd_train_eag(&cfg, &dataset, &ae, &out, epochs, conditional, resume.as_deref())
        }
        Command::Sample { eag, ae, count, steps, temperature, condition_file, gamma, out } => {
            cmd_sample(
                &cfg,
                &eag,
                &ae,
                count,
                steps,
                temperature,
                condition_file.as_deref(),
                gamma,
                &out,
            )
        }
        Command::Eval { real, generated, out, csv_dir } => {
            cmd_eval(&real, &generated, &out, csv_dir.as_deref())
        }
        Command::Decode { real, generated, lambda, out } => {
            cmd_decode(&cfg, &real, &generated, lambda, &out)
        }
    }
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    trials: Option<usize>,
    neurons: Option<usize>,
    bins: Option<usize>,
    velocity: bool,
    out: &Path,
) -> Result<()> {
    let mut ds_cfg = cfg.dataset.clone();
    if let Some(v) = trials {
        ds_cfg.n_trials = v;
    }
    if let Some(v) = neurons {
        ds_cfg.n_neurons = v;
    }
    if let Some(v) = bins {
        ds_cfg.t_bins = v;
    }
    if velocity {
        ds_cfg.velocity_labels = true;
    }
    let ds = make_lorenz_dataset(&ds_cfg, cfg.seed)?;
    let mean_rate: f64 = ds
        .trials()
        .iter()
        .map(|t| t.rates.as_ref().map(|r| r.mean_rate()).unwrap_or(0.0))
        .sum::<f64>()
        / ds.len() as f64;
    write_dataset(
        &ds,
        serde_json::json!({"command": "simulate", "seed": cfg.seed}),
        out,
    )?;
    println!(
        "simulate: {} trials x {} neurons x {} bins, mean rate {:.4} spikes/bin -> {}",
        ds.len(),
        ds.n_neurons(),
        ds.t_bins(),
        mean_rate,
        out.display()
    );
    Ok(())
}

pub fn cmd_train_ae(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    epochs: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let (ds, _) = read_dataset(dataset)?;
    let mut schedule = cfg.train_ae.clone();
    schedule.seed = cfg.seed;
    if let Some(e) = epochs {
        schedule.epochs = e;
    }
    let resume_state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (model, adam, _) = AEModel::from_checkpoint(&ckpt)?;
            Some(AeResume {
                model,
                adam,
                start_epoch: ckpt.epoch + 1,
                rng_state: ckpt.rng_state,
            })
        }
        None => None,
    };
    let mut rng = RandomStream::substream(cfg.seed, STREAM_AE_TRAIN);
    let outcome = autoencoder::train_autoencoder_full(
        &ds,
        &cfg.autoencoder,
        &schedule,
        &mut rng,
        resume_state,
    )?;
    let epoch = outcome.log.records.last().map(|r| r.epoch).unwrap_or(0);
    let ckpt = outcome.model.to_checkpoint(
        &outcome.adam,
        &schedule,
        epoch,
        outcome.log.best_val,
        outcome.rng_state,
    );
    save_checkpoint(&ckpt, out)?;
    write_log(out, &outcome.log)?;
    println!(
        "train-ae: {} epochs, best val NLL {:.6} (epoch {}) -> {}",
        outcome.log.records.len(),
        outcome.log.best_val,
        outcome.log.best_epoch,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train_eag(
    cfg: &RunConfig,
    dataset: &Path,
    ae_path: &Path,
    out: &Path,
    epochs: Option<usize>,
    conditional: bool,
    resume: Option<&Path>,
) -> Result<()> {
    let (ds, _) = read_dataset(dataset)?;
    let ae_ckpt = load_checkpoint(ae_path)?;
    let (ae, _, _) = AEModel::from_checkpoint(&ae_ckpt)?;

    let mut et_cfg = cfg.energy_transformer.clone();
    et_cfg.latent_dim = ae.latent_dim();
    et_cfg.max_len = ds.t_bins();
    et_cfg.condition = if conditional {
        match ds.behavior_kind() {
            Some(kind) => Some(kind),
            None => {
                return Err(EagError::config(
                    "--conditional requires a dataset with behavior labels",
                ))
            }
        }
    } else {
        None
    };

    let mut schedule = cfg.train_eag.clone();
    schedule.seed = cfg.seed;
    if let Some(e) = epochs {
        schedule.epochs = e;
    }

    // Latents are computed once and cached for the whole run.
    let spikes: Vec<&crate::data::SpikeTrain> = ds.spikes();
    let latents = ae.encode_all(&spikes, schedule.batch_size.max(16))?;
    let train_idx = ds.indices_of(Split::Train);
    let val_idx = ds.indices_of(Split::Val);
    let pick = |idx: &[usize]| -> Vec<crate::data::LatentSequence> {
        idx.iter().map(|&i| latents[i].clone()).collect()
    };
    let train_lat = pick(&train_idx);
    let val_lat = pick(&val_idx);
    let pick_conds = |idx: &[usize]| -> Result<Vec<BehaviorCondition>> {
        idx.iter()
            .map(|&i| {
                ds.trial(i).behavior.clone().ok_or_else(|| {
                    EagError::config(format!("trial {i} lacks a behavior label"))
                })
            })
            .collect()
    };
    let (train_conds, val_conds) = if conditional {
        (Some(pick_conds(&train_idx)?), Some(pick_conds(&val_idx)?))
    } else {
        (None, None)
    };

    let resume_state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (model, adam, _, _) = EtModel::from_checkpoint(&ckpt)?;
            Some(EtResume {
                model,
                adam,
                start_epoch: ckpt.epoch + 1,
                rng_state: ckpt.rng_state,
            })
        }
        None => None,
    };

    let mut rng = RandomStream::substream(cfg.seed, STREAM_EAG_TRAIN);
    let outcome = energy_transformer::train_energy_transformer_full(
        &train_lat,
        train_conds.as_deref(),
        &val_lat,
        val_conds.as_deref(),
        &et_cfg,
        &cfg.guidance,
        &schedule,
        &mut rng,
        resume_state,
    )?;
    let epoch = outcome.log.records.last().map(|r| r.epoch).unwrap_or(0);
    let ckpt = outcome.model.to_checkpoint(
        &outcome.adam,
        &cfg.guidance,
        &schedule,
        epoch,
        outcome.log.best_val,
        outcome.rng_state,
    );
    save_checkpoint(&ckpt, out)?;
    write_log(out, &outcome.log)?;
    println!(
        "train-eag: {} epochs, best val energy loss {:.6} (epoch {}) -> {}",
        outcome.log.records.len(),
        outcome.log.best_val,
        outcome.log.best_epoch,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &RunConfig,
    eag_path: &Path,
    ae_path: &Path,
    count: usize,
    steps: usize,
    temperature: Option<f64>,
    condition_file: Option<&Path>,
    gamma: Option<f64>,
    out: &Path,
) -> Result<()> {
    let eag_ckpt = load_checkpoint(eag_path)?;
    let (et, _, mut guidance, _) = EtModel::from_checkpoint(&eag_ckpt)?;
    let ae_ckpt = load_checkpoint(ae_path)?;
    let (ae, _, _) = AEModel::from_checkpoint(&ae_ckpt)?;
    if ae.latent_dim() != et.cfg.latent_dim {
        return Err(EagError::shape(format!(
            "latent dims differ: autoencoder d = {}, energy transformer d = {}",
            ae.latent_dim(),
            et.cfg.latent_dim
        )));
    }
    if let Some(g) = gamma {
        guidance.gamma = g;
    }
    let temperature = temperature.unwrap_or(et.cfg.infer_temperature);
    let t = et.cfg.max_len;

    // Conditions come from the first `count` trials of the condition file.
    let (conditions, bin_width) = match condition_file {
        Some(path) => {
            if et.cfg.condition.is_none() {
                return Err(EagError::config(
                    "conditional sampling requires a condition-trained checkpoint",
                ));
            }
            let (cond_ds, _) = read_dataset(path)?;
            if cond_ds.len() < count {
                return Err(EagError::config(format!(
                    "condition file has {} trials, need {count}",
                    cond_ds.len()
                )));
            }
            let conds: Vec<BehaviorCondition> = (0..count)
                .map(|i| {
                    cond_ds.trial(i).behavior.clone().ok_or_else(|| {
                        EagError::config(format!("condition trial {i} lacks behavior"))
                    })
                })
                .collect::<Result<_>>()?;
            let expect = match et.cfg.condition {
                Some(ConditionKind::Velocity) => ConditionKind::Velocity,
                Some(ConditionKind::Angle) => ConditionKind::Angle,
                None => unreachable!(),
            };
            if conds.iter().any(|c| c.kind() != expect) {
                return Err(EagError::config("condition kind does not match the checkpoint"));
            }
            (Some(conds), cond_ds.bin_width())
        }
        None => {
            if et.cfg.condition.is_some() {
                println!("note: condition-trained checkpoint sampled unconditionally");
            }
            (None, cfg.dataset.bin_width)
        }
    };

    // Latent sampling, timed; decoding and spike resampling excluded.
    let mut sample_rng = RandomStream::substream(cfg.seed, STREAM_SAMPLE);
    let started = Instant::now();
    let chunk = 64usize;
    let mut all_latents = Vec::with_capacity(count);
    let mut offset = 0;
    while offset < count {
        let batch = chunk.min(count - offset);
        let conds_slice = conditions.as_ref().map(|c| &c[offset..offset + batch]);
        let latents = energy_transformer::sample_latents(
            &et,
            batch,
            t,
            steps,
            temperature,
            conds_slice.map(|c| &c[..]),
            conds_slice.map(|_| &guidance),
            &mut sample_rng,
        )?;
        all_latents.extend(latents);
        offset += batch;
    }
    let latency = started.elapsed().as_secs_f64();

    let mut trials = Vec::with_capacity(count);
    for (i, z) in all_latents.iter().enumerate() {
        let rates = ae.decode_with_bin_width(z, bin_width)?;
        let mut spike_rng =
            RandomStream::substream(cfg.seed, STREAM_RESAMPLE_SPIKES | i as u64);
        let spikes = sample_poisson_spikes(&rates, &mut spike_rng);
        trials.push(Trial {
            spikes,
            rates: Some(rates),
            behavior: conditions.as_ref().map(|c| c[i].clone()),
        });
    }
    let ds = TrialDataset::new(trials, vec![Split::Train; count])?;
    write_dataset(
        &ds,
        serde_json::json!({
            "command": "sample",
            "seed": cfg.seed,
            "steps": steps,
            "temperature": temperature,
            "sample_latency_sec": latency,
            "conditional": conditions.is_some(),
            "gamma": guidance.gamma,
        }),
        out,
    )?;
    println!(
        "sample: {count} trials x {} bins in {latency:.3}s (K = {steps}) -> {}",
        t,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(real: &Path, generated: &Path, out: &Path, csv_dir: Option<&Path>) -> Result<()> {
    let (real_ds, _) = read_dataset(real)?;
    let (gen_ds, _) = read_dataset(generated)?;
    let (report, artifacts) = metrics::evaluate(&real_ds, &gen_ds)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| EagError::format(format!("report encode: {e}")))?;
    std::fs::write(out, &json)?;

    let dir = csv_dir
        .map(|d| d.to_path_buf())
        .unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let mut hist_csv = String::from("population_count,real_p,generated_p\n");
    let len = artifacts.real_hist.len().max(artifacts.gen_hist.len());
    for i in 0..len {
        hist_csv.push_str(&format!(
            "{i},{},{}\n",
            artifacts.real_hist.get(i).copied().unwrap_or(0.0),
            artifacts.gen_hist.get(i).copied().unwrap_or(0.0)
        ));
    }
    std::fs::write(dir.join("psch_histogram.csv"), hist_csv)?;
    let mut isi_csv = String::from("neuron,real_mean,real_std,gen_mean,gen_std\n");
    for (i, (r, g)) in artifacts.isi_real.iter().zip(artifacts.isi_gen.iter()).enumerate() {
        let fmt = |v: &Option<(f64, f64)>| match v {
            Some((m, s)) => format!("{m},{s}"),
            None => ",".to_string(),
        };
        isi_csv.push_str(&format!("{i},{},{}\n", fmt(r), fmt(g)));
    }
    std::fs::write(dir.join("isi_stats.csv"), isi_csv)?;

    println!("{json}");
    Ok(())
}

pub fn cmd_decode(
    cfg: &RunConfig,
    real: &Path,
    generated: &Path,
    lambda: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (real_ds, _) = read_dataset(real)?;
    let (gen_ds, _) = read_dataset(generated)?;
    let real_vel = velocity_views(&real_ds)?;
    let gen_vel = velocity_views(&gen_ds)?;

    let rates_of = |ds: &TrialDataset, idx: &[usize]| -> Result<Vec<crate::data::RateSequence>> {
        idx.iter()
            .map(|&i| {
                ds.trial(i).rates.clone().ok_or_else(|| {
                    EagError::config(format!("trial {i} lacks stored rates"))
                })
            })
            .collect()
    };

    let train_idx = real_ds.indices_of(Split::Train);
    let val_idx = {
        let v = real_ds.indices_of(Split::Val);
        if v.is_empty() {
            train_idx.clone()
        } else {
            v
        }
    };
    let train_rates = rates_of(&real_ds, &train_idx)?;
    let val_rates = rates_of(&real_ds, &val_idx)?;
    let train_refs: Vec<&crate::data::RateSequence> = train_rates.iter().collect();
    let val_refs: Vec<&crate::data::RateSequence> = val_rates.iter().collect();
    let train_vel: Vec<(&[f64], &[f64])> = train_idx.iter().map(|&i| real_vel[i]).collect();
    let val_vel: Vec<(&[f64], &[f64])> = val_idx.iter().map(|&i| real_vel[i]).collect();

    // Penalty sweep on the validation split.
    let mut sweep = Vec::new();
    for &lam in &cfg.metrics.lambda_sweep {
        let dec = metrics::ridge_fit(&train_refs, &train_vel, lam)?;
        let r2 = metrics::closed_loop_validate(&dec, &val_refs, &val_vel)?;
        let mean = r2.iter().sum::<f64>() / r2.len() as f64;
        sweep.push(serde_json::json!({"lambda": lam, "val_r2": mean}));
    }
    let lam = lambda.unwrap_or(cfg.metrics.ridge_lambda);
    let decoder = metrics::ridge_fit(&train_refs, &train_vel, lam)?;
    let reference = metrics::closed_loop_validate(&decoder, &val_refs, &val_vel)?;

    let gen_idx: Vec<usize> = (0..gen_ds.len()).collect();
    let gen_rates = rates_of(&gen_ds, &gen_idx)?;
    let gen_refs: Vec<&crate::data::RateSequence> = gen_rates.iter().collect();
    let generated_r2 = metrics::closed_loop_validate(&decoder, &gen_refs, &gen_vel)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = serde_json::json!({
        "lambda": lam,
        "sweep": sweep,
        "reference_r2_mean": mean(&reference),
        "generated_r2_mean": mean(&generated_r2),
        "reference_r2": reference,
        "generated_r2": generated_r2,
    });
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| EagError::format(format!("report encode: {e}")))?;
    std::fs::write(out, &json)?;
    println!("{json}");
    Ok(())
}

fn write_log(ckpt_path: &Path, log: &crate::trainer::TrainingLog) -> Result<()> {
    let log_path = ckpt_path.with_extension("log.json");
    let json = serde_json::to_string_pretty(log)
        .map_err(|e| EagError::format(format!("log encode: {e}")))?;
    std::fs::write(log_path, json)?;
    Ok(())
}
