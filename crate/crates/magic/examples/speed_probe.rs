use magic::data::{make_synthetic_dataset, DistortionConfig};
use magic::topology::{build_model, reference_config};
use magic::trainer::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let data = make_synthetic_dataset(8, 96, 96, &DistortionConfig::default(), 1).unwrap();
    let mut model = build_model::<f32>(&reference_config(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 10,
        batch_size: 4,
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = train(&mut model, &data, &[], &cfg).unwrap();
    let dt = t0.elapsed();
    println!("10 steps (batch 4) in {:?} -> {:?} per step", dt, dt / 10);
    println!("loss: {:?}", report.loss_curve);

    let img = &data[0].input;
    let t0 = Instant::now();
    for _ in 0..5 { let _ = model.forward(img).unwrap(); }
    println!("full-frame 96x96 forward: {:?}", t0.elapsed() / 5);
}
