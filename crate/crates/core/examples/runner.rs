//! Drive the experiment runner from code: write a config, run `verify`
//! and `bench` on the linear field, then read the manifest back.

use clap::Parser;
use sdo_lab::cli::{run, Cli, RunManifest};

const CONFIG: &str = r#"
seed = 11

[model]
kind = "linear"
a = 0.1
steps = 4

[bench]
n_list = [4, 8, 16]
estimators = ["bptt", "sdo-full-sum", "last-step"]
batch = 8
repeats = 3

[bench.objective]
kind = "quadratic-target"
target = [1.0]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("sdo-runner-example");
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("experiment.toml");
    std::fs::write(&config, CONFIG)?;
    for cmd in ["verify", "bench"] {
        let out = dir.join(cmd);
        let cli = Cli::try_parse_from(["sdo", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd])?;
        match run(&cli) {
            Ok(()) => println!("{cmd}: ok"),
            Err(e) => println!("{cmd}: {e} (exit code {})", e.exit_code()),
        }
        for m in RunManifest::read_all(&out)? {
            println!("  {} seed {} status {} in {:.2}s", m.command, m.seed, m.status, m.wall_time_s);
            for a in m.artifacts {
                println!("    {:<22} {}{}", a.path, &a.sha256[..16], if a.timing { "  (timing)" } else { "" });
            }
        }
    }
    Ok(())
}
