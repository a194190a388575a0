//! Times forward+backward training steps on random inputs.
//!
//! `cargo run --release -p ralf-net --example step_timing -- [tiny|small|full] [size] [pairs]`

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ralf_core::dataset::TripletConfig;
use ralf_core::geometry::Pose2;
use ralf_net::encoders::{EncoderConfig, EncoderSize};
use ralf_net::flow_head::FlowLossConfig;
use ralf_net::train::{OptimConfig, TrainBatch, Trainer};
use ralf_net::{ModelConfig, Ralf};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let size = match args.get(1).map(String::as_str) {
        Some("full") => EncoderSize::Full,
        Some("small") => EncoderSize::Small,
        _ => EncoderSize::Tiny,
    };
    let px: usize = args.get(2).map_or(Ok(64), |s| s.parse())?;
    let b: usize = args.get(3).map_or(Ok(15), |s| s.parse())?;
    let model = Ralf::new(ModelConfig::new(EncoderConfig::new(size)), 0, DType::F32)?;
    println!("{size:?}: {} trainable parameters", model.store().num_trainable());
    let dev = Device::Cpu;
    let img = || Tensor::rand(0f32, 1f32, (b, 1, px, px), &dev);
    let batch = TrainBatch {
        radar_anchor: img()?,
        lidar_anchor: img()?,
        radar_positive: img()?,
        lidar_positive: img()?,
        lidar_init: img()?,
        gt_flow: Tensor::rand(-8f32, 8f32, (b, 2, px, px), &dev)?,
        flow_mask: Tensor::ones((b, 1, px, px), DType::F32, &dev)?,
        anchor_poses: (0..b).map(|i| Pose2::new(i as f64 * 100.0, 0.0, 0.0)).collect(),
        positive_poses: (0..b).map(|i| Pose2::new(i as f64 * 100.0 + 1.0, 0.0, 0.0)).collect(),
    };
    let mut trainer = Trainer::new(
        &model,
        &OptimConfig {
            total_steps: 100,
            ..Default::default()
        },
    )?;
    let triplet = TripletConfig::default();
    let flow = FlowLossConfig::default();
    for i in 0..4 {
        let t = Instant::now();
        let l = trainer.train_step(&model, &batch, &triplet, &flow)?;
        println!("step {i}: {:.3}s loss {:.4}", t.elapsed().as_secs_f64(), l.total);
    }
    Ok(())
}
