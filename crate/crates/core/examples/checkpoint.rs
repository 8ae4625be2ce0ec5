//! Checkpoint round trip and what a damaged file looks like.

use sdo_lab::cli::BUNDLED_CHECKPOINT;
use sdo_lab::model::{from_bytes, load_checkpoint, save_checkpoint, VelocityField};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (denoiser, schedule, meta) = from_bytes(BUNDLED_CHECKPOINT)?;
    println!("{}", serde_json::to_string_pretty(&meta)?);

    let dir = std::env::temp_dir().join("sdo-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("copy.ckpt");
    save_checkpoint(&path, &denoiser, &schedule)?;
    let (again, schedule_again) = load_checkpoint(&path)?;
    println!(
        "round trip: parameters identical {}, schedule identical {}",
        again.flat_params() == denoiser.flat_params(),
        schedule_again == schedule
    );

    // the format has no checksum; damage is caught where it breaks structure
    let bytes = std::fs::read(&path)?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut nan_param = bytes.clone();
    let last = nan_param.len() - 8;
    nan_param[last..].copy_from_slice(&f64::NAN.to_le_bytes());
    let mut bad_json = bytes.clone();
    bad_json[20] = b'}';
    for (what, damaged) in [("bad magic", bad_magic), ("NaN parameter", nan_param), ("broken metadata", bad_json)] {
        std::fs::write(&path, &damaged)?;
        match load_checkpoint(&path) {
            Ok(_) => println!("{what}: loaded"),
            Err(e) => println!("{what}: rejected, {e}"),
        }
    }
    let truncated = &BUNDLED_CHECKPOINT[..BUNDLED_CHECKPOINT.len() / 2];
    if let Err(e) = from_bytes(truncated) {
        println!("truncated file rejected: {e}");
    }
    Ok(())
}
