//! Times training steps for a config on random data.
//!
//! `cargo run --release --example step_timing -- configs/toy.json 20`

use std::time::Instant;

use compgan::config::ModelConfig;
use compgan::schema::SemanticSchema;
use compgan::train::{TrainMode, TrainState};
use tch::{Kind, Tensor};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = match args.get(1) {
        Some(path) => ModelConfig::load(path)?,
        None => ModelConfig::default(),
    };
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let schema = SemanticSchema::toy();
    let mut state = TrainState::new(config.clone(), schema.clone(), 0, TrainMode::Joint)?;
    let b = config.batch_size as i64;
    let r = config.image_resolution as i64;
    let images = Tensor::rand([b, 3, r, r], (Kind::Float, tch::Device::Cpu)) * 2.0 - 1.0;
    let labels = Tensor::randint(schema.num_classes() as i64, [b, r, r], (Kind::Int64, tch::Device::Cpu));
    let masks = labels.one_hot(schema.num_classes() as i64).permute([0, 3, 1, 2]).to_kind(Kind::Float);
    let start = Instant::now();
    for _ in 0..steps {
        let t = Instant::now();
        let m = state.train_step(&images, &masks)?;
        println!("step {} {:.3}s d={:.3} g={:.3}", m.step, t.elapsed().as_secs_f64(), m.d_loss, m.g_loss);
    }
    println!("mean {:.3}s/step", start.elapsed().as_secs_f64() / steps as f64);
    Ok(())
}
