use magic::data::{make_synthetic_dataset, split_indices, DistortionConfig};
use magic::topology::{build_model, fir_ablation_config, reference_config};
use magic::trainer::{evaluate, train, TrainConfig};
use std::time::Instant;

fn main() {
    let all = make_synthetic_dataset(40, 96, 96, &DistortionConfig::default(), 2024).unwrap();
    let (tr, te) = split_indices(all.len(), 0.2, 2024);
    let train_set: Vec<_> = tr.iter().map(|&i| all[i].clone()).collect();
    let test_set: Vec<_> = te.iter().map(|&i| all[i].clone()).collect();
    println!("train {} test {}", train_set.len(), test_set.len());

    for (name, cfg) in [("iir", reference_config()), ("fir", fir_ablation_config())] {
        let mut model = build_model::<f32>(&cfg, 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 6,
            steps_per_epoch: 60,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 7,
            ..Default::default()
        };
        let t0 = Instant::now();
        let report = train(&mut model, &train_set, &test_set, &tcfg).unwrap();
        let eval = evaluate(&model, &test_set).unwrap();
        println!(
            "{name}: {:?} loss {:?}",
            t0.elapsed(),
            report.loss_curve.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        println!(
            "{name}: in {:.2} dB / {:.4} ssim -> out {:.2} dB / {:.4} ssim (delta {:+.2} dB)",
            eval.mean_psnr_in, eval.mean_ssim_in, eval.mean_psnr_out, eval.mean_ssim_out,
            eval.mean_psnr_out - eval.mean_psnr_in
        );
    }
}
