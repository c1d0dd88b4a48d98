//! Runs the two-step shapes experiment for several seeds.
//!
//! `cargo run --release --example experiment -- [seeds] [key=value ...]`
//! where `seeds` is a count (`3`) or a half-open range (`1..3`) and keys prefixed `base.` or `inc.` go to the respective training
//! configuration.

use ykd::experiment::{run_experiment, ExperimentConfig};
use ykd::train::TrainMode;

fn main() -> ykd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seeds = match args.next() {
        Some(s) => match s.split_once("..") {
            Some((a, b)) => a.parse().expect("seed")..b.parse().expect("seed"),
            None => 0..s.parse().expect("seed count"),
        },
        None => 0..3u64,
    };
    let mut cfg = ExperimentConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k.split_once('.') {
            Some(("base", key)) => cfg.base_cfg.set(key, v)?,
            Some(("inc", key)) => cfg.increment_cfg.set(key, v)?,
            _ => match k {
                "train_images" => cfg.train_images = v.parse().expect("number"),
                "eval_images" => cfg.eval_images = v.parse().expect("number"),
                _ => {
                    cfg.base_cfg.set(k, v)?;
                    cfg.increment_cfg.set(k, v)?;
                }
            },
        }
    }
    for seed in seeds {
        let start = std::time::Instant::now();
        let r = run_experiment(
            &ExperimentConfig { seed, ..cfg.clone() },
            &[TrainMode::Finetune, TrainMode::KdFrozen, TrainMode::Ykd],
        )?;
        println!("{}", serde_json::to_string(&r)?);
        eprintln!("seed {seed} took {:.1}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}
