//! Sequential DDIM sampling from the bundled checkpoint, and the same
//! trajectory recovered by Picard iteration.
//!
//! ```text
//! cargo run --release --example sampling -- [TRAJECTORY_CSV]
//! ```

use std::time::Instant;

use sdo_lab::cli::ModelSource;
use sdo_lab::rng::{normal_array, stream_rng, Stream};
use sdo_lab::sampler::{sample_picard, sample_sequential, PicardConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (model, schedule) = ModelSource::default().load()?;
    let x_n = normal_array(&mut stream_rng(0, Stream::Noise), &[8, 2]);

    let started = Instant::now();
    let seq = sample_sequential(&model, &schedule, &x_n)?;
    println!("sequential: N = {} in {:.1} ms", schedule.steps, started.elapsed().as_secs_f64() * 1e3);

    let started = Instant::now();
    let picard = sample_picard(&model, &schedule, &x_n, &PicardConfig::default())?;
    println!(
        "picard: {} sweeps ({:?}) in {:.1} ms, residuals {:.1e} -> {:.1e}",
        picard.iters_used,
        picard.stop,
        started.elapsed().as_secs_f64() * 1e3,
        picard.residuals[0],
        picard.final_residual()
    );
    println!("max deviation from sequential: {:.3e}", seq.max_deviation(&picard.trajectory));

    for r in 0..x_n.rows() {
        let p = seq.sample().row(r);
        println!("  sample {r}: ({:+.3}, {:+.3})  radius {:.3}", p[0], p[1], p[0].hypot(p[1]));
    }
    if let Some(path) = std::env::args().nth(1) {
        seq.write_csv(std::fs::File::create(&path)?)?;
        println!("wrote {path}");
    }
    Ok(())
}
