//! Stage-1 reconstruction fidelity diagnostics (manual).

use eag::autoencoder::{train_autoencoder, AEConfig};
use eag::data::Split;
use eag::lorenz::{make_lorenz_dataset, LorenzDatasetConfig};
use eag::metrics::{closed_loop_validate, ridge_fit, velocity_views};
use eag::numerics::RandomStream;
use eag::trainer::TrainConfig;

#[test]
#[ignore]
fn diag_recon_fidelity() {
    let ds_cfg = LorenzDatasetConfig {
        n_trials: 667, n_neurons: 32, t_bins: 48, base_rate: 1.0,
        velocity_labels: true, velocity_noise_std: 0.1,
        ..Default::default()
    };
    let real = make_lorenz_dataset(&ds_cfg, 80).unwrap();
    let epochs: usize = std::env::var("AE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(300);
    let dropout: f64 = std::env::var("AE_DROPOUT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.25);
    let smooth: f64 = std::env::var("AE_SMOOTH").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let latents_d: usize = std::env::var("AE_D").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let ae_cfg = AEConfig {
        encoder_blocks: 2, decoder_blocks: 2, embed_dim: 64, num_latents: latents_d,
        hidden_mult: 2, conv_kernel: 9, dropout_prob: dropout, smoothness_weight: smooth,
    };
    let ae_schedule = TrainConfig {
        learning_rate: 1e-3, epochs, warmup_epochs: 5, batch_size: 32,
        seed: 81, grad_clip: None, patience: Some(60),
    };
    let mut rng = RandomStream::seeded(82);
    let (ae, log) = train_autoencoder(&real, &ae_cfg, &ae_schedule, &mut rng).unwrap();
    println!("AE: {} epochs run, best val NLL {:.5} at {}", log.records.len(), log.best_val, log.best_epoch);

    let val_idx = real.indices_of(Split::Val);
    let train_idx = real.indices_of(Split::Train);

    // Per-neuron fidelity of reconstructed rates on validation trials.
    let mut num = vec![0.0f64; real.n_neurons()];
    let mut da = vec![0.0f64; real.n_neurons()];
    let mut db = vec![0.0f64; real.n_neurons()];
    let mut mean_true = vec![0.0f64; real.n_neurons()];
    let mut mean_rec = vec![0.0f64; real.n_neurons()];
    let mut cnt = 0usize;
    let mut rel_err = 0.0f64;
    for &i in &val_idx {
        let tr = real.trial(i);
        let z = ae.encode(&tr.spikes).unwrap();
        let rhat = ae.decode_with_bin_width(&z, real.bin_width()).unwrap();
        let rtrue = tr.rates.as_ref().unwrap();
        for n in 0..real.n_neurons() {
            for t in 0..real.t_bins() {
                let a = rtrue.rate(n, t);
                let b = rhat.rate(n, t);
                mean_true[n] += a;
                mean_rec[n] += b;
                rel_err += (a - b).abs() / a.max(1e-6);
                cnt += 1;
            }
        }
        // accumulate centered products per neuron (two-pass light: store later)
        let _ = (&mut num, &mut da, &mut db);
    }
    let t_total = val_idx.len() * real.t_bins();
    println!("mean |rel rate error| on val: {:.4}", rel_err / cnt as f64);
    for n in 0..4.min(real.n_neurons()) {
        println!("  neuron {n}: mean true {:.4} vs recon {:.4}",
                 mean_true[n] / t_total as f64, mean_rec[n] / t_total as f64);
    }

    // Ridge transfer at several lambdas.
    let all_vel = velocity_views(&real).unwrap();
    let train_rates: Vec<_> = train_idx.iter().map(|&i| real.trial(i).rates.clone().unwrap()).collect();
    let train_refs: Vec<&_> = train_rates.iter().collect();
    let train_vel: Vec<_> = train_idx.iter().map(|&i| all_vel[i]).collect();
    let val_rates: Vec<_> = val_idx.iter().map(|&i| real.trial(i).rates.clone().unwrap()).collect();
    let val_refs: Vec<&_> = val_rates.iter().collect();
    let val_vel: Vec<_> = val_idx.iter().map(|&i| all_vel[i]).collect();
    let recon_rates: Vec<_> = val_idx.iter().map(|&i| {
        let z = ae.encode(&real.trial(i).spikes).unwrap();
        ae.decode_with_bin_width(&z, real.bin_width()).unwrap()
    }).collect();
    let recon_refs: Vec<&_> = recon_rates.iter().collect();
    for lam in [1.0f64, 10.0, 100.0, 1000.0] {
        let dec = ridge_fit(&train_refs, &train_vel, lam).unwrap();
        let r_real = closed_loop_validate(&dec, &val_refs, &val_vel).unwrap();
        let r_rec = closed_loop_validate(&dec, &recon_refs, &val_vel).unwrap();
        println!("lambda {lam}: real-val R2 {:.4}, recon R2 {:.4}",
                 r_real.iter().sum::<f64>() / r_real.len() as f64,
                 r_rec.iter().sum::<f64>() / r_rec.len() as f64);
    }

    // Is the velocity information still present in recon rates? Fit the
    // ridge ON recon rates of train trials, decode recon rates of val trials.
    let recon_train: Vec<_> = train_idx.iter().map(|&i| {
        let z = ae.encode(&real.trial(i).spikes).unwrap();
        ae.decode_with_bin_width(&z, real.bin_width()).unwrap()
    }).collect();
    let recon_train_refs: Vec<&_> = recon_train.iter().collect();
    for lam in [1.0f64, 10.0] {
        let dec = ridge_fit(&recon_train_refs, &train_vel, lam).unwrap();
        let r = closed_loop_validate(&dec, &recon_refs, &val_vel).unwrap();
        println!("ridge-on-recon lambda {lam}: recon-val R2 {:.4}",
                 r.iter().sum::<f64>() / r.len() as f64);
    }
}
