use magic::data::{make_synthetic_dataset, DistortionConfig};
use magic::topology::{build_model, reference_config};
use magic::trainer::{train, TrainConfig};

fn main() {
    let data = make_synthetic_dataset(1, 64, 64, &DistortionConfig::default(), 5).unwrap();
    for lr in [1e-3, 2e-3, 5e-3] {
        let mut model = build_model::<f32>(&reference_config(), 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 10,
            steps_per_epoch: 50,
            batch_size: 1,
            learning_rate: lr,
            seed: 7,
            ..Default::default()
        };
        let report = train(&mut model, &data, &[], &tcfg).unwrap();
        println!(
            "lr {lr}: loss {:?}",
            report.loss_curve.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }
}
