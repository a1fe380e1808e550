//! Trained-model quality on small Lorenz sets: reconstruction beats the
//! constant-rate baseline, reconstructed correlations track ground truth,
//! and the stage-2 loss actually descends.

use std::sync::OnceLock;

use eag::autoencoder::{train_autoencoder, validation_nll, AEConfig, AEModel};
use eag::data::{Split, TrialDataset};
use eag::energy_transformer::{train_energy_transformer, ETConfig, GuidanceConfig};
use eag::lorenz::{make_lorenz_dataset, LorenzDatasetConfig};
use eag::numerics::{ln_factorial, RandomStream};
use eag::trainer::{TrainConfig, TrainingLog};

struct AeFixture {
    dataset: TrialDataset,
    model: AEModel,
}

fn ae_fixture() -> &'static AeFixture {
    static FIX: OnceLock<AeFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let ds_cfg = LorenzDatasetConfig {
            n_trials: 200,
            n_neurons: 32,
            t_bins: 64,
            ..Default::default()
        };
        let dataset = make_lorenz_dataset(&ds_cfg, 2024).unwrap();
        let ae_cfg = AEConfig {
            encoder_blocks: 2,
            decoder_blocks: 2,
            embed_dim: 64,
            num_latents: 4,
            hidden_mult: 2,
            conv_kernel: 9,
            ..Default::default()
        };
        let schedule = TrainConfig {
            learning_rate: 1e-3,
            epochs: 200,
            warmup_epochs: 5,
            batch_size: 32,
            seed: 11,
            grad_clip: None,
            patience: None,
        };
        let mut rng = RandomStream::seeded(7);
        let (model, _log) = train_autoencoder(&dataset, &ae_cfg, &schedule, &mut rng).unwrap();
        AeFixture { dataset, model }
    })
}

/// Analytic Poisson NLL of the constant predictor at the train-split mean.
fn constant_rate_nll(ds: &TrialDataset, val_idx: &[usize]) -> f64 {
    let train_idx = ds.indices_of(Split::Train);
    let mut total_count = 0.0f64;
    let mut cells = 0usize;
    for &i in &train_idx {
        let sp = &ds.trial(i).spikes;
        total_count += sp.counts().iter().map(|&c| c as f64).sum::<f64>();
        cells += sp.counts().len();
    }
    let mean_rate = (total_count / cells as f64).max(1e-12);
    let mut nll = 0.0f64;
    let mut n = 0usize;
    for &i in val_idx {
        let sp = &ds.trial(i).spikes;
        for &c in sp.counts() {
            nll += mean_rate - (c as f64) * mean_rate.ln() + ln_factorial(c as u64);
            n += 1;
        }
    }
    nll / n as f64
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da.sqrt() * db.sqrt())
}

/// Upper-triangle Pearson correlations of per-neuron rate series pooled over
/// the given trials.
fn rate_correlations(rates: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            out.push(pearson(&rates[i], &rates[j]));
        }
    }
    out
}

#[test]
fn reconstruction_beats_constant_rate_baseline() {
    let fix = ae_fixture();
    let val_idx = fix.dataset.indices_of(Split::Val);
    let model_nll = validation_nll(&fix.model, &fix.dataset, &val_idx, 32).unwrap();
    let baseline = constant_rate_nll(&fix.dataset, &val_idx);
    assert!(
        model_nll < baseline,
        "reconstruction NLL {model_nll} must beat constant-rate baseline {baseline}"
    );
}

#[test]
fn reconstructed_correlations_track_ground_truth() {
    let fix = ae_fixture();
    let ds = &fix.dataset;
    let n = ds.n_neurons();
    let t = ds.t_bins();
    let val_idx = ds.indices_of(Split::Val);

    // Pool ground-truth and reconstructed rate series over validation trials.
    let mut truth: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut recon: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &i in &val_idx {
        let trial = ds.trial(i);
        let gt = trial.rates.as_ref().unwrap();
        let z = fix.model.encode(&trial.spikes).unwrap();
        let rhat = fix.model.decode_with_bin_width(&z, ds.bin_width()).unwrap();
        for neuron in 0..n {
            for ti in 0..t {
                truth[neuron].push(gt.rate(neuron, ti));
                recon[neuron].push(rhat.rate(neuron, ti));
            }
        }
    }
    let truth_corr = rate_correlations(&truth, n);
    let recon_corr = rate_correlations(&recon, n);
    let r = pearson(&truth_corr, &recon_corr);
    assert!(
        r > 0.8,
        "reconstructed pairwise rate correlations correlate r = {r} with ground truth (need > 0.8)"
    );
}

#[test]
fn energy_transformer_loss_descends() {
    // Stage-2 toy run: the training loss at epoch 50 must sit at least 20%
    // below epoch 1.
    let ds_cfg = LorenzDatasetConfig {
        n_trials: 200,
        n_neurons: 24,
        t_bins: 32,
        ..Default::default()
    };
    let dataset = make_lorenz_dataset(&ds_cfg, 515).unwrap();
    let ae_cfg = AEConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        embed_dim: 32,
        num_latents: 3,
        hidden_mult: 2,
        conv_kernel: 9,
        ..Default::default()
    };
    let ae_schedule = TrainConfig {
        learning_rate: 1e-3,
        epochs: 40,
        warmup_epochs: 2,
        batch_size: 32,
        seed: 3,
        ..Default::default()
    };
    let mut rng = RandomStream::seeded(41);
    let (ae, _) = train_autoencoder(&dataset, &ae_cfg, &ae_schedule, &mut rng).unwrap();

    let spikes = dataset.spikes();
    let latents = ae.encode_all(&spikes, 32).unwrap();
    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = dataset.indices_of(Split::Val);
    let train_lat: Vec<_> = train_idx.iter().map(|&i| latents[i].clone()).collect();
    let val_lat: Vec<_> = val_idx.iter().map(|&i| latents[i].clone()).collect();

    let et_cfg = ETConfig {
        embed_dim: 32,
        encoder_depth: 1,
        decoder_depth: 1,
        num_heads: 2,
        ffn_mult: 2,
        mlp_depth: 2,
        mlp_width: 32,
        noise_dim: 8,
        latent_dim: 3,
        max_len: 32,
        ..Default::default()
    };
    let schedule = TrainConfig {
        learning_rate: 1e-3,
        epochs: 50,
        warmup_epochs: 2,
        batch_size: 45,
        seed: 9,
        ..Default::default()
    };
    let (_, log): (_, TrainingLog) = train_energy_transformer(
        &train_lat,
        None,
        &val_lat,
        None,
        &et_cfg,
        &GuidanceConfig::default(),
        &schedule,
        &mut rng,
    )
    .unwrap();
    let l1 = log.records[1].train_loss;
    let l50 = log.records[49].train_loss;
    assert!(
        l50 <= 0.8 * l1,
        "epoch-50 loss {l50} must be >= 20% below epoch-1 loss {l1}"
    );
}
