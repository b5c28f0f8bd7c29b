//! Trains the three stages on a synthetic corpus and prints the evaluation tables.
//!
//! ```text
//! cargo run --release -p sketchfill --example toy_pipeline -- <work-dir> <config.toml> [tunes]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use sketchfill::config::{Stage, TrainConfig};
use sketchfill::dataset::synth::write_toy_corpus;
use sketchfill::dataset::{build_corpus, save_corpus_dir, subset_windows, test_windows};
use sketchfill::evaluation::{evaluate, render_table, virtual_control_experiment};
use sketchfill::nn::seeded_rng;
use sketchfill::pipeline::{ModelStack, Variant};
use sketchfill::training::run_stage;

fn main() -> sketchfill::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let work = PathBuf::from(args.get(1).map_or("toy-run", String::as_str));
    let cfg = match args.get(2) {
        Some(p) => TrainConfig::load(p.as_ref())?,
        None => TrainConfig::default(),
    };
    let tunes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(500);

    let raw = work.join("raw");
    let data = work.join("data");
    let models = work.join("models");
    write_toy_corpus(&raw, tunes, 32, cfg.seed)?;
    let (corpus, manifest, report) = build_corpus(&raw, cfg.seed)?;
    println!("corpus: {} melodies, {} rejected", corpus.len(), report.rejected.len());
    save_corpus_dir(&data, &corpus, &manifest)?;

    for stage in Stage::ALL {
        let t = Instant::now();
        let meta = run_stage(stage, &data, &models, &cfg)?;
        println!(
            "{stage}: best epoch {} validation {:.4} in {:.0}s",
            meta.best_epoch,
            meta.validation_loss,
            t.elapsed().as_secs_f64()
        );
    }

    let stack = ModelStack::load(&models)?;
    let test = test_windows(&corpus, &manifest);
    let r = subset_windows(&corpus, &manifest, &manifest.test_r)?;
    let nr = subset_windows(&corpus, &manifest, &manifest.test_nr)?;
    let sets = [("Test", test.as_slice()), ("Test-R", r.as_slice()), ("Test-NR", nr.as_slice())];
    let reports = [
        evaluate(&stack, Variant::Inpainter, &sets)?,
        evaluate(&stack, Variant::Connector, &sets)?,
    ];
    print!("{}", render_table(&reports));
    let control = virtual_control_experiment(&stack, &test, 200, &mut seeded_rng(cfg.seed))?;
    print!("{}", control.render());
    Ok(())
}
