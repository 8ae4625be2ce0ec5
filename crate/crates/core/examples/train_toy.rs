//! Train the default ring-of-Gaussians denoiser and save a checkpoint.
//!
//! ```text
//! cargo run --release --example train_toy -- [OUT_PATH] [SEED]
//! ```

use std::time::Instant;

use sdo_lab::model::{save_checkpoint, train_denoiser_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy_ring.ckpt".to_string());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let config = TrainConfig::default();
    let started = Instant::now();
    let outcome = train_denoiser_with(&config, seed, |step, loss| {
        if step % 500 == 0 {
            println!("step {step:>5}  loss {loss:.4}");
        }
    })?;
    let tail = &outcome.losses[outcome.losses.len().saturating_sub(200)..];
    let mean_tail = tail.iter().sum::<f64>() / tail.len() as f64;
    println!(
        "trained {} steps in {:.1}s, mean loss over the last {} steps {mean_tail:.4}",
        config.train_steps,
        started.elapsed().as_secs_f64(),
        tail.len()
    );
    save_checkpoint(out.as_ref(), &outcome.denoiser, &outcome.schedule)?;
    println!("wrote {out}");
    Ok(())
}
