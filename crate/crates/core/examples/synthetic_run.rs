//! Full three-stage pipeline on a planted-signal corpus with tiny encoders.
//!
//! `cargo run -p reclaim-core --example synthetic_run --release [out_dir]`

use std::time::Instant;

use reclaim::corpus::{stratified_split, Language, SplitRatios};
use reclaim::synthetic;
use reclaim::training::{run_pipeline, StageSelection};

fn main() {
    let out = std::env::args().nth(1);
    let corpus = synthetic::generate(400, Language::It, 7);
    let split = stratified_split(&corpus.instances, SplitRatios::default(), 7).expect("split");
    let config = synthetic::tiny_run_config(vec![1, 2, 3]);
    let start = Instant::now();
    let runs = run_pipeline(
        &config,
        &split,
        &corpus.proxies,
        Language::It,
        out.as_deref().map(std::path::Path::new),
        StageSelection::all(),
        false,
    )
    .expect("valid config");
    for (seed, run) in runs {
        match run {
            Ok(run) => {
                println!(
                    "seed {seed}: baseline macro-F1 {:.4}, dual macro-F1 {:.4}",
                    run.baseline_validation.map_or(f64::NAN, |m| m.macro_f1),
                    run.dual_validation.map_or(f64::NAN, |m| m.macro_f1)
                );
                for r in &run.reports {
                    println!(
                        "  {:<15} best epoch {} of {}",
                        r.stage,
                        r.best_epoch,
                        r.epochs.len()
                    );
                }
            }
            Err(e) => println!("seed {seed}: failed: {e}"),
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}
