use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::Value;

use sketchfill::codec::{export_midi, FrameSequence};
use sketchfill::config::{Stage, TrainConfig};
use sketchfill::dataset::{build_corpus, load_corpus_dir, save_corpus_dir, subset_windows, test_windows};
use sketchfill::evaluation::{evaluate, render_table, virtual_control_experiment, ControlReport, EvalReport};
use sketchfill::nn::seeded_rng;
use sketchfill::pipeline::{GenerateRequest, ModelStack, Variant};
use sketchfill::training::run_stage;
use sketchfill::{Error, Result};

use crate::CHECKPOINT_ENV;

#[derive(Debug, Parser)]
#[command(name = "sketchfill", version, about = "Sketch-guided melody inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw ABC/MIDI files into a corpus and split manifest.
    Preprocess {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage; upstream checkpoints are read from the output directory.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the trained stack on the test sets and run the virtual control experiment.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        checkpoints: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
        /// Number of control pairs; 0 skips the experiment.
        #[arg(long, default_value_t = 3000)]
        control_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the reports as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Complete a single request read from a JSON file.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        checkpoints: CheckpointArgs,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[command(flatten)]
        checkpoints: CheckpointArgs,
    },
    /// Write measures from a corpus record, generate response or render request as MIDI.
    ExportMidi {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quarter-note tempo; defaults to the record's tempo or 120.
        #[arg(long)]
        tempo: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Directory holding vae/, inpainter/ and connector/.
    #[arg(long = "checkpoints", env = CHECKPOINT_ENV, default_value = "checkpoints")]
    pub dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Inpainter,
    Connector,
    Both,
}

impl VariantArg {
    fn variants(self) -> Vec<Variant> {
        match self {
            Self::Inpainter => vec![Variant::Inpainter],
            Self::Connector => vec![Variant::Connector],
            Self::Both => vec![Variant::Inpainter, Variant::Connector],
        }
    }
}

#[derive(Serialize)]
struct EvalOutput {
    reports: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    control: Option<ControlReport>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { raw, out, seed } => preprocess(&raw, &out, seed),
        Command::Train { stage, config, data, out } => {
            let cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            let meta = run_stage(stage, &data, &out, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
            Ok(())
        }
        Command::Eval {
            data,
            checkpoints,
            variant,
            control_pairs,
            seed,
            json,
        } => eval(&data, &checkpoints.dir, variant, control_pairs, seed, json.as_deref()),
        Command::Generate { input, out, checkpoints } => {
            let req = GenerateRequest::from_json(&fs::read_to_string(&input)?)?;
            let stack = ModelStack::load(&checkpoints.dir)?;
            let resp = stack.generate(&req)?;
            fs::write(&out, serde_json::to_string_pretty(&resp)?)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Serve { port, host, checkpoints } => crate::server::serve(&host, port, checkpoints.dir),
        Command::ExportMidi { input, out, tempo } => {
            let (measures, record_tempo) = measures_from_json(&fs::read_to_string(&input)?)?;
            fs::write(&out, export_midi(&measures, tempo.or(record_tempo).unwrap_or(120.0)))?;
            Ok(())
        }
    }
}

fn preprocess(raw: &Path, out: &Path, seed: u64) -> Result<()> {
    let (corpus, manifest, report) = build_corpus(raw, seed)?;
    for (id, reason) in &report.rejected {
        info!("rejected {id}: {reason}");
    }
    save_corpus_dir(out, &corpus, &manifest)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn eval(data: &Path, checkpoints: &Path, variant: VariantArg, pairs: usize, seed: u64, json: Option<&Path>) -> Result<()> {
    let (corpus, manifest) = load_corpus_dir(data)?;
    let stack = ModelStack::load(checkpoints)?;
    let test = test_windows(&corpus, &manifest);
    let r = subset_windows(&corpus, &manifest, &manifest.test_r)?;
    let nr = subset_windows(&corpus, &manifest, &manifest.test_nr)?;
    let mut sets = vec![("Test", test.as_slice())];
    if !r.is_empty() && !nr.is_empty() {
        sets.push(("Test-R", r.as_slice()));
        sets.push(("Test-NR", nr.as_slice()));
    }
    let reports = variant
        .variants()
        .into_iter()
        .map(|v| evaluate(&stack, v, &sets))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_table(&reports));
    let control = match pairs {
        0 => None,
        n => Some(virtual_control_experiment(&stack, &test, n, &mut seeded_rng(seed))?),
    };
    if let Some(c) = &control {
        print!("{}", c.render());
    }
    if let Some(path) = json {
        fs::write(path, serde_json::to_string_pretty(&EvalOutput { reports, control })?)?;
    }
    Ok(())
}

/// Accepts `{"measures": ...}` (corpus record or render request) or `{"missing": ...}` (generate response).
pub fn measures_from_json(text: &str) -> Result<(Vec<FrameSequence>, Option<f64>)> {
    let value: Value = serde_json::from_str(text)?;
    let rows = value
        .get("measures")
        .or_else(|| value.get("missing"))
        .ok_or_else(|| Error::Validation("expected a \"measures\" or \"missing\" array".into()))?;
    let measures: Vec<FrameSequence> = serde_json::from_value(rows.clone()).map_err(|e| Error::Validation(e.to_string()))?;
    if measures.is_empty() {
        return Err(Error::Validation("no measures to export".into()));
    }
    let tempo = value
        .get("tempo")
        .or_else(|| value.pointer("/meta/tempo"))
        .and_then(Value::as_f64);
    if let Some(t) = tempo {
        check_tempo(t)?;
    }
    Ok((measures, tempo))
}

pub fn check_tempo(tempo: f64) -> Result<()> {
    if tempo.is_finite() && (1.0..=1000.0).contains(&tempo) {
        Ok(())
    } else {
        Err(Error::Validation(format!("tempo {tempo} outside 1..=1000")))
    }
}
