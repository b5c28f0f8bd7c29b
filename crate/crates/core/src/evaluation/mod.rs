//! Objective metrics, per-subset reports and the virtual control experiment.

pub mod bootstrap;
pub mod metrics;

use std::fmt::Write as _;

use candle_core::{DType, Tensor, D};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{factorize, FrameSequence, FRAMES_PER_MEASURE};
use crate::connector::{MeasureSketch, SketchSpec};
use crate::dataset::ContextWindow;
use crate::error::{Error, Result};
use crate::nn::ModelRng;
use crate::pipeline::{ModelStack, Variant};

pub use bootstrap::{bootstrap_test, DEFAULT_BOOTSTRAP_SAMPLES};
pub use metrics::{lcs_pitch_accuracy, pitch_accuracy, rhythm_accuracy};

const BATCH: usize = 64;

/// Mean of values summed in sorted order, so the result does not depend on input order.
fn stable_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-window mean frame cross-entropy of `(b, n, 24, 130)` logits against
/// `(b, n, 24)` targets.
pub fn window_losses(logits: &Tensor, targets: &Tensor) -> Result<Vec<f64>> {
    let (b, n, f, _) = logits.dims4()?;
    if targets.dims() != [b, n, f] {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    let log_probs = candle_nn::ops::log_softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
    let picked = log_probs.gather(&targets.unsqueeze(3)?, 3)?;
    Ok(picked.reshape((b, n * f))?.mean(1)?.neg()?.to_vec1::<f64>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub source_id: String,
    pub start: usize,
    pub loss: f64,
    pub pitch_accuracy: Option<f64>,
    pub rhythm_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub name: String,
    pub windows: usize,
    pub loss: f64,
    pub pitch_accuracy: Option<f64>,
    pub rhythm_accuracy: f64,
}

impl SetSummary {
    pub fn from_scores(name: &str, scores: &[WindowScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::TooFewWindows { needed: 1, got: 0 });
        }
        Ok(Self {
            name: name.to_string(),
            windows: scores.len(),
            loss: stable_mean(scores.iter().map(|s| s.loss)).unwrap_or(f64::NAN),
            pitch_accuracy: stable_mean(scores.iter().filter_map(|s| s.pitch_accuracy)),
            rhythm_accuracy: stable_mean(scores.iter().map(|s| s.rhythm_accuracy)).unwrap_or(f64::NAN),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub summary: SetSummary,
    pub windows: Vec<WindowScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub sets: Vec<SetReport>,
}

impl EvalReport {
    pub fn set(&self, name: &str) -> Option<&SetSummary> {
        self.sets.iter().map(|s| &s.summary).find(|s| s.name == name)
    }
}

/// Generates every window's missing measures with `variant` and scores them.
pub fn score_windows(stack: &ModelStack, windows: &[ContextWindow], variant: Variant) -> Result<Vec<WindowScore>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(BATCH) {
        let (past, future) = stack.window_context(chunk)?;
        let z = stack.complete(&past, &future, None, variant)?;
        let (generated, logits) = stack.decode(&z)?;
        let truth: Vec<FrameSequence> = chunk.iter().flat_map(|w| w.missing.iter().copied()).collect();
        let targets = stack
            .vae
            .model
            .frame_tensor(&truth)?
            .reshape((chunk.len(), stack.shape.missing, FRAMES_PER_MEASURE))?;
        let losses = window_losses(&logits, &targets)?;
        for ((w, gen), loss) in chunk.iter().zip(&generated).zip(losses) {
            out.push(WindowScore {
                source_id: w.source_id.clone(),
                start: w.start,
                loss,
                pitch_accuracy: pitch_accuracy(gen, &w.missing)?,
                rhythm_accuracy: rhythm_accuracy(gen, &w.missing)?,
            });
        }
    }
    Ok(out)
}

/// Free-running evaluation loss of each window.
pub fn eval_loss(stack: &ModelStack, windows: &[ContextWindow], variant: Variant) -> Result<Vec<f64>> {
    Ok(score_windows(stack, windows, variant)?.into_iter().map(|s| s.loss).collect())
}

pub fn evaluate(stack: &ModelStack, variant: Variant, sets: &[(&str, &[ContextWindow])]) -> Result<EvalReport> {
    let sets = sets
        .iter()
        .map(|(name, windows)| {
            let scores = score_windows(stack, windows, variant)?;
            let summary = SetSummary::from_scores(name, &scores)?;
            info!("{variant:?} {name}: loss {:.4}", summary.loss);
            Ok(SetReport { summary, windows: scores })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { variant, sets })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Plain-text table with loss, pitch accuracy and rhythm accuracy per set.
pub fn render_table(reports: &[EvalReport]) -> String {
    let names: Vec<&str> = reports
        .first()
        .map(|r| r.sets.iter().map(|s| s.summary.name.as_str()).collect())
        .unwrap_or_default();
    let mut out = format!("{:<12}", "model");
    for n in &names {
        let _ = write!(out, " | {:^23}", n);
    }
    out.push('\n');
    let _ = write!(out, "{:<12}", "");
    for _ in &names {
        let _ = write!(out, " | {:>7} {:>7} {:>7}", "loss", "pAcc", "rAcc");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<12}", format!("{:?}", r.variant).to_lowercase());
        for s in &r.sets {
            let s = &s.summary;
            let _ = write!(
                out,
                " | {:>7.3} {:>7} {:>7.3}",
                s.loss,
                fmt_opt(s.pitch_accuracy),
                s.rhythm_accuracy
            );
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlScores {
    pub pitch_acc: f64,
    pub rhythm_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub pairs: usize,
    pub pitch_control: ControlScores,
    pub rhythm_control: ControlScores,
    /// Unsketched generations scored against the same sketch sources.
    pub baseline: ControlScores,
    /// Pitch-sketched vs baseline LCS accuracy.
    pub pitch_p_value: f64,
    /// Rhythm-sketched vs baseline rhythm accuracy.
    pub rhythm_p_value: f64,
    /// Pairs whose source had no onsets, left out of the pitch means.
    pub empty_sources: usize,
}

impl ControlReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<16} | {:>9} {:>9}\n", "control", "pitch", "rhythm");
        for (name, s) in [
            ("pitch", self.pitch_control),
            ("rhythm", self.rhythm_control),
            ("none", self.baseline),
        ] {
            let _ = writeln!(out, "{name:<16} | {:>9.3} {:>9.3}", s.pitch_acc, s.rhythm_acc);
        }
        let _ = writeln!(
            out,
            "pairs {}  p(pitch) {:.4}  p(rhythm) {:.4}",
            self.pairs, self.pitch_p_value, self.rhythm_p_value
        );
        out
    }
}

fn rhythm_spec(source: &ContextWindow) -> SketchSpec {
    let past = source.past.len();
    SketchSpec {
        measures: source
            .missing
            .iter()
            .enumerate()
            .map(|(i, m)| MeasureSketch {
                index: past + i,
                pitches: None,
                rhythm: Some(factorize(m).1.ids().to_vec()),
            })
            .collect(),
    }
}

fn pitch_spec(source: &ContextWindow) -> SketchSpec {
    let past = source.past.len();
    SketchSpec {
        measures: source
            .missing
            .iter()
            .enumerate()
            .filter(|(_, m)| m.onset_count() > 0)
            .map(|(i, m)| MeasureSketch {
                index: past + i,
                pitches: Some(m.onset_pitches().collect()),
                rhythm: None,
            })
            .collect(),
    }
}

/// Sketches the missing region of window A with the rhythm (resp. pitch
/// contour) of window B for random pairs, and scores the generations against B.
pub fn virtual_control_experiment(
    stack: &ModelStack,
    windows: &[ContextWindow],
    n_pairs: usize,
    rng: &mut ModelRng,
) -> Result<ControlReport> {
    if windows.len() < 2 {
        return Err(Error::TooFewWindows {
            needed: 2,
            got: windows.len(),
        });
    }
    if n_pairs == 0 {
        return Err(Error::EmptyInput);
    }
    let pairs: Vec<(usize, usize)> = (0..n_pairs)
        .map(|_| {
            let a = rng.random_range(0..windows.len());
            let mut b = rng.random_range(0..windows.len() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();

    let mut scores: [Vec<(f64, Option<f64>)>; 3] = Default::default();
    for chunk in pairs.chunks(BATCH) {
        let targets: Vec<&ContextWindow> = chunk.iter().map(|&(a, _)| &windows[a]).collect();
        let sources: Vec<&ContextWindow> = chunk.iter().map(|&(_, b)| &windows[b]).collect();
        let owned: Vec<ContextWindow> = targets.iter().map(|w| (*w).clone()).collect();
        let (past, future) = stack.window_context(&owned)?;
        let resolve = |make: fn(&ContextWindow) -> SketchSpec| -> Result<Vec<_>> {
            sources.iter().map(|s| make(s).resolve(stack.shape)).collect()
        };
        let runs = [None, Some(resolve(rhythm_spec)?), Some(resolve(pitch_spec)?)];
        for (slot, sketches) in runs.iter().enumerate() {
            let z = stack.complete(&past, &future, sketches.as_deref(), Variant::Connector)?;
            let (generated, _) = stack.decode(&z)?;
            for (gen, src) in generated.iter().zip(&sources) {
                let has_onsets = src.missing.iter().any(|m| m.onset_count() > 0);
                let lcs = has_onsets.then(|| lcs_pitch_accuracy(gen, &src.missing));
                scores[slot].push((rhythm_accuracy(gen, &src.missing)?, lcs));
            }
        }
    }
    let [baseline, rhythm, pitch] = scores;
    let summarize = |s: &[(f64, Option<f64>)]| ControlScores {
        rhythm_acc: stable_mean(s.iter().map(|x| x.0)).unwrap_or(f64::NAN),
        pitch_acc: stable_mean(s.iter().filter_map(|x| x.1)).unwrap_or(f64::NAN),
    };
    let rhythm_p = bootstrap_test(
        &rhythm.iter().map(|x| x.0).collect::<Vec<_>>(),
        &baseline.iter().map(|x| x.0).collect::<Vec<_>>(),
        DEFAULT_BOOTSTRAP_SAMPLES,
        rng,
    )?;
    let (pitch_lcs, base_lcs): (Vec<f64>, Vec<f64>) = pitch
        .iter()
        .zip(&baseline)
        .filter_map(|(p, b)| Some((p.1?, b.1?)))
        .unzip();
    let empty_sources = n_pairs - pitch_lcs.len();
    let pitch_p = if pitch_lcs.is_empty() {
        1.0
    } else {
        bootstrap_test(&pitch_lcs, &base_lcs, DEFAULT_BOOTSTRAP_SAMPLES, rng)?
    };
    Ok(ControlReport {
        pairs: n_pairs,
        pitch_control: summarize(&pitch),
        rhythm_control: summarize(&rhythm),
        baseline: summarize(&baseline),
        pitch_p_value: pitch_p,
        rhythm_p_value: rhythm_p,
        empty_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros((3, 4, 24, 130), DType::F32, &candle_core::Device::Cpu).unwrap();
        let targets = Tensor::full(129u32, (3, 4, 24), &candle_core::Device::Cpu).unwrap();
        for l in window_losses(&logits, &targets).unwrap() {
            assert!((l - 130f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn summaries_ignore_order() {
        let scores: Vec<WindowScore> = (0..50)
            .map(|i| WindowScore {
                source_id: format!("m{i}"),
                start: 0,
                loss: 0.1 * i as f64 + 1e-9 * (i * i) as f64,
                pitch_accuracy: (i % 3 != 0).then(|| i as f64 / 50.0),
                rhythm_accuracy: (i as f64 / 7.0).fract(),
            })
            .collect();
        let mut reversed = scores.clone();
        reversed.reverse();
        reversed.rotate_left(17);
        assert_eq!(
            SetSummary::from_scores("t", &scores).unwrap(),
            SetSummary::from_scores("t", &reversed).unwrap()
        );
    }

    #[test]
    fn table_has_a_row_per_report() {
        let set = SetReport {
            summary: SetSummary {
                name: "Test".into(),
                windows: 1,
                loss: 0.5,
                pitch_accuracy: None,
                rhythm_accuracy: 0.9,
            },
            windows: Vec::new(),
        };
        let reports = [
            EvalReport {
                variant: Variant::Inpainter,
                sets: vec![set.clone()],
            },
            EvalReport {
                variant: Variant::Connector,
                sets: vec![set],
            },
        ];
        let table = render_table(&reports);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("connector"));
    }
}
