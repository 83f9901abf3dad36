//! Overfits the tiny model on two phantom patients and prints the epoch log.
//!
//! `cargo run --release --example desk_training -- [lr] [slices] [max_steps] [batch] [bn_momentum] [patience] [dropout]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdunet::data::{gen_phantom, AugmentConfig};
use rdunet::engine::{train, TrainConfig};
use rdunet::losses::{LossConfig, LossKind};
use rdunet::model::ModelConfig;

fn main() -> rdunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let lr = arg(0, 1e-2);
    let slices = arg(1, 16.0) as usize;
    let max_steps = arg(2, 500.0) as usize;
    let batch = arg(3, 2.0) as usize;
    let momentum = arg(4, 0.9);
    let patience = arg(5, 3.0) as usize;
    let dropout = arg(6, 0.1);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs = (0..2)
        .map(|i| gen_phantom(&mut rng, format!("phantom{i}"), [slices, 32, 32], 1..=2))
        .collect::<rdunet::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        lr,
        batch_size: batch,
        epochs: max_steps,
        loss: LossConfig::new(LossKind::Bce),
        augment: AugmentConfig::none(),
        max_steps: Some(max_steps),
        seed: 1,
        patience,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let model = ModelConfig {
        bn_momentum: momentum,
        dropout,
        ..ModelConfig::tiny()
    };
    let out = train(&pairs, &pairs, &model, &cfg)?;
    for e in &out.epochs {
        println!("{}", e.line());
    }
    println!(
        "steps {} best dice {:.4} at epoch {} in {:.1}s",
        out.step_losses.len(),
        out.best_val_dice,
        out.best_epoch,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
