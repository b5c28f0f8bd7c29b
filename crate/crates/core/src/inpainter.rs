//! Stage-I model: predicts the missing measures' latents from the past and
//! future latent sequences, with fully separate pitch and rhythm streams.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ModelRng, ParamStore, StackedGru};
use crate::vae::{frame_cross_entropy, SketchVae, LATENT_HALF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpainterConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for InpainterConfig {
    fn default() -> Self {
        Self { hidden: 512, layers: 1 }
    }
}

/// Per-measure role inside a context window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    Past,
    Missing,
    Future,
}

/// Latents of a window (`(b, n, 256)`) with the role of every position.
#[derive(Clone, Debug)]
pub struct LatentSequence {
    pub latents: Tensor,
    pub mask: Vec<MaskRole>,
}

impl LatentSequence {
    /// Checks the past / missing / future block order and returns the block sizes.
    pub fn blocks(&self) -> Result<(usize, usize, usize)> {
        let count = |role| self.mask.iter().filter(|&&r| r == role).count();
        let (p, m, f) = (count(MaskRole::Past), count(MaskRole::Missing), count(MaskRole::Future));
        let expected: Vec<MaskRole> = std::iter::repeat_n(MaskRole::Past, p)
            .chain(std::iter::repeat_n(MaskRole::Missing, m))
            .chain(std::iter::repeat_n(MaskRole::Future, f))
            .collect();
        if expected != self.mask {
            return Err(Error::Mask("mask must be a past block, a missing block, then a future block".into()));
        }
        if p == 0 || f == 0 {
            return Err(Error::Mask("both past and future context are required".into()));
        }
        if self.latents.dim(1)? != self.mask.len() {
            return Err(Error::Mask(format!(
                "{} latents for {} mask entries",
                self.latents.dim(1)?,
                self.mask.len()
            )));
        }
        Ok((p, m, f))
    }
}

/// Initial states of both generation recurrences, one `(b, hidden)` tensor per layer.
#[derive(Clone, Debug)]
pub struct ContextState {
    pub pitch: Vec<Tensor>,
    pub rhythm: Vec<Tensor>,
}

/// `(b, n_m, 128)` predictions for each stream.
#[derive(Clone, Debug)]
pub struct InpaintPrediction {
    pub pitch: Tensor,
    pub rhythm: Tensor,
}

impl InpaintPrediction {
    /// `(b, n_m, 256)` as `[pitch, rhythm]`.
    pub fn latents(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.pitch, &self.rhythm], D::Minus1)?)
    }
}

/// How the previous step's latent is chosen during generation.
pub enum StepInput<'a> {
    FreeRunning,
    /// Ground-truth `(b, n_m, 128)` latents fed with the given per-step probability.
    Teacher { truth: &'a Tensor, ratio: f64, rng: &'a mut ModelRng },
}

struct Stream {
    past: StackedGru,
    future: StackedGru,
    combine: Vec<Linear>,
    generator: StackedGru,
    output: Linear,
    start: Tensor,
}

impl Stream {
    fn new(ps: &mut ParamStore, name: &str, cfg: &InpainterConfig) -> Result<Self> {
        ps.scoped(name, |ps| {
            let h = cfg.hidden;
            let layers = cfg.layers.max(1);
            Ok(Self {
                past: StackedGru::new(ps, "past", LATENT_HALF, h, layers)?,
                future: StackedGru::new(ps, "future", LATENT_HALF, h, layers)?,
                combine: (0..layers)
                    .map(|l| Linear::new(ps, &format!("combine{l}"), 2 * h, h))
                    .collect::<Result<_>>()?,
                generator: StackedGru::new(ps, "generator", LATENT_HALF, h, layers)?,
                output: Linear::new(ps, "output", h, LATENT_HALF)?,
                start: ps.learned("start", &[1, LATENT_HALF])?,
            })
        })
    }

    fn context(&self, past: &Tensor, future: &Tensor) -> Result<Vec<Tensor>> {
        let hp = self.past.run(past, false)?;
        let hf = self.future.run(future, true)?;
        hp.iter()
            .zip(&hf)
            .zip(&self.combine)
            .map(|((p, f), lin)| Ok(lin.forward(&Tensor::cat(&[p, f], 1)?)?.tanh()?))
            .collect()
    }

    fn generate(&self, init: &[Tensor], steps: usize, teacher: Option<&Tensor>, feed_truth: &[bool]) -> Result<Tensor> {
        let batch = init[0].dim(0)?;
        let mut state = init.to_vec();
        let mut input = self.start.broadcast_as((batch, LATENT_HALF))?.contiguous()?;
        let mut outputs = Vec::with_capacity(steps);
        for k in 0..steps {
            let h = self.generator.step(&input, &mut state)?;
            let out = self.output.forward(&h)?;
            input = match teacher {
                Some(truth) if feed_truth[k] => truth.narrow(1, k, 1)?.squeeze(1)?,
                _ => out.clone(),
            };
            outputs.push(out);
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

pub struct SketchInpainter {
    cfg: InpainterConfig,
    pitch: Stream,
    rhythm: Stream,
}

impl SketchInpainter {
    pub fn new(cfg: &InpainterConfig, ps: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            pitch: Stream::new(ps, "pitch", cfg)?,
            rhythm: Stream::new(ps, "rhythm", cfg)?,
        })
    }

    pub fn config(&self) -> &InpainterConfig {
        &self.cfg
    }

    /// Summarizes the past and future blocks; the missing block is never read.
    pub fn encode_context(&self, seq: &LatentSequence) -> Result<ContextState> {
        let (p, m, f) = seq.blocks()?;
        let past = seq.latents.narrow(1, 0, p)?;
        let future = seq.latents.narrow(1, p + m, f)?;
        let half = |t: &Tensor, i: usize| t.narrow(2, i * LATENT_HALF, LATENT_HALF);
        Ok(ContextState {
            pitch: self.pitch.context(&half(&past, 0)?, &half(&future, 0)?)?,
            rhythm: self.rhythm.context(&half(&past, 1)?, &half(&future, 1)?)?,
        })
    }

    pub fn predict_missing(&self, state: &ContextState, n_missing: usize, step_input: StepInput) -> Result<InpaintPrediction> {
        if n_missing == 0 {
            return Err(Error::ShapeMismatch("nothing to predict".into()));
        }
        let (truth, feed) = match step_input {
            StepInput::FreeRunning => (None, vec![false; n_missing]),
            StepInput::Teacher { truth, ratio, rng } => {
                if truth.dim(1)? != n_missing || truth.dim(2)? != 2 * LATENT_HALF {
                    return Err(Error::ShapeMismatch(format!("teacher latents have shape {:?}", truth.dims())));
                }
                (Some(truth), (0..n_missing).map(|_| rng.random_bool(ratio.clamp(0.0, 1.0))).collect())
            }
        };
        let half = |i: usize| -> Result<Option<Tensor>> {
            Ok(match truth {
                Some(t) => Some(t.narrow(2, i * LATENT_HALF, LATENT_HALF)?),
                None => None,
            })
        };
        let (tp, tr) = (half(0)?, half(1)?);
        Ok(InpaintPrediction {
            pitch: self.pitch.generate(&state.pitch, n_missing, tp.as_ref(), &feed)?,
            rhythm: self.rhythm.generate(&state.rhythm, n_missing, tr.as_ref(), &feed)?,
        })
    }

    /// Free-running prediction for a window's latents.
    pub fn predict(&self, seq: &LatentSequence) -> Result<InpaintPrediction> {
        let (_, m, _) = seq.blocks()?;
        let state = self.encode_context(seq)?;
        self.predict_missing(&state, m, StepInput::FreeRunning)
    }
}

/// Teacher-forced decoder cross-entropy of predicted latents `(b, n_m, 256)` against
/// ground-truth frames `(b, n_m, 24)`, averaged over all frames.
pub fn latent_decode_loss(latents: &Tensor, frames: &Tensor, vae: &SketchVae) -> Result<Tensor> {
    let (b, n, d) = latents.dims3()?;
    if frames.dims() != [b, n, crate::codec::FRAMES_PER_MEASURE] {
        return Err(Error::ShapeMismatch(format!(
            "latents {:?} vs frames {:?}",
            latents.dims(),
            frames.dims()
        )));
    }
    let z = latents.reshape((b * n, d))?;
    let targets = frames.reshape((b * n, crate::codec::FRAMES_PER_MEASURE))?;
    let decoded = vae.decode(&z, Some(&targets))?;
    frame_cross_entropy(&decoded.logits, &targets)
}

pub fn stage1_loss(pred: &InpaintPrediction, frames: &Tensor, vae: &SketchVae) -> Result<Tensor> {
    latent_decode_loss(&pred.latents()?, frames, vae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use crate::vae::{VaeConfig, LATENT_DIM};
    use candle_core::{DType, Device};

    fn cfg() -> InpainterConfig {
        InpainterConfig { hidden: 16, layers: 2 }
    }

    fn model(seed: u64) -> SketchInpainter {
        let mut ps = ParamStore::random(DType::F32, seed);
        SketchInpainter::new(&cfg(), &mut ps).unwrap()
    }

    fn mask() -> Vec<MaskRole> {
        let mut m = vec![MaskRole::Past; 6];
        m.extend([MaskRole::Missing; 4]);
        m.extend([MaskRole::Future; 6]);
        m
    }

    fn seq(latents: Tensor) -> LatentSequence {
        LatentSequence { latents, mask: mask() }
    }

    #[test]
    fn shapes() {
        let inp = model(1);
        let z = Tensor::randn(0f32, 1.0, (2, 16, LATENT_DIM), &Device::Cpu).unwrap();
        let state = inp.encode_context(&seq(z.clone())).unwrap();
        assert_eq!(state.pitch.len(), 2);
        assert_eq!(state.pitch[0].dims(), &[2, 16]);
        let free = inp.predict_missing(&state, 4, StepInput::FreeRunning).unwrap();
        assert_eq!(free.pitch.dims(), &[2, 4, LATENT_HALF]);
        let truth = z.narrow(1, 6, 4).unwrap();
        let mut rng = seeded_rng(3);
        let forced = inp
            .predict_missing(&state, 4, StepInput::Teacher { truth: &truth, ratio: 0.5, rng: &mut rng })
            .unwrap();
        assert_eq!(forced.rhythm.dims(), free.rhythm.dims());
    }

    #[test]
    fn zero_input_is_finite() {
        let inp = model(2);
        let z = Tensor::zeros((1, 16, LATENT_DIM), DType::F32, &Device::Cpu).unwrap();
        let p = inp.predict(&seq(z)).unwrap().latents().unwrap();
        assert!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_block_is_ignored_and_order_matters() {
        let inp = model(3);
        let z = Tensor::randn(0f32, 1.0, (1, 16, LATENT_DIM), &Device::Cpu).unwrap();
        let base = inp.predict(&seq(z.clone())).unwrap().latents().unwrap().to_vec3::<f32>().unwrap();

        let mut rows: Vec<Tensor> = (0..16).map(|i| z.narrow(1, i, 1).unwrap()).collect();
        rows[7] = (rows[7].clone() * 5.0).unwrap();
        let changed_missing = Tensor::cat(&rows, 1).unwrap();
        let same = inp.predict(&seq(changed_missing)).unwrap().latents().unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(base, same);

        let mut rows: Vec<Tensor> = (0..16).map(|i| z.narrow(1, i, 1).unwrap()).collect();
        rows.swap(0, 1);
        let swapped = Tensor::cat(&rows, 1).unwrap();
        let other = inp.predict(&seq(swapped)).unwrap().latents().unwrap().to_vec3::<f32>().unwrap();
        assert_ne!(base, other);
    }

    #[test]
    fn streams_are_independent() {
        let inp = model(4);
        let z = Tensor::randn(0f32, 1.0, (1, 16, LATENT_DIM), &Device::Cpu).unwrap();
        let base = inp.predict(&seq(z.clone())).unwrap();
        let pitch_only = Tensor::cat(
            &[
                z.narrow(2, 0, LATENT_HALF).unwrap(),
                Tensor::zeros((1, 16, LATENT_HALF), DType::F32, &Device::Cpu).unwrap(),
            ],
            2,
        )
        .unwrap();
        let p = inp.predict(&seq(pitch_only)).unwrap();
        assert_eq!(
            base.pitch.to_vec3::<f32>().unwrap(),
            p.pitch.to_vec3::<f32>().unwrap()
        );
        assert_ne!(
            base.rhythm.to_vec3::<f32>().unwrap(),
            p.rhythm.to_vec3::<f32>().unwrap()
        );
    }

    #[test]
    fn malformed_masks_rejected() {
        let inp = model(5);
        let z = Tensor::zeros((1, 16, LATENT_DIM), DType::F32, &Device::Cpu).unwrap();
        let mut m = mask();
        m.swap(5, 6);
        let bad = LatentSequence { latents: z.clone(), mask: m };
        assert!(matches!(inp.encode_context(&bad), Err(Error::Mask(_))));
        let short = LatentSequence { latents: z, mask: mask()[..15].to_vec() };
        assert!(matches!(inp.encode_context(&short), Err(Error::Mask(_))));
    }

    #[test]
    fn gradients_stop_at_a_frozen_vae() {
        let vae_cfg = VaeConfig { embed_dim: 8, encoder_hidden: 8, beat_hidden: 8, tick_hidden: 8 };
        let mut vae_ps = ParamStore::random(DType::F32, 6);
        SketchVae::new(&vae_cfg, &mut vae_ps).unwrap();
        let mut frozen = ParamStore::from_tensors(vae_ps.named_tensors().into_iter().collect(), DType::F32, false).unwrap();
        let vae = SketchVae::new(&vae_cfg, &mut frozen).unwrap();

        let mut ps = ParamStore::random(DType::F32, 7);
        let inp = SketchInpainter::new(&cfg(), &mut ps).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 16, LATENT_DIM), &Device::Cpu).unwrap();
        let pred = inp.predict(&seq(z)).unwrap();
        let frames = Tensor::full(crate::codec::REST, (2, 4, 24), &Device::Cpu).unwrap();
        let loss = stage1_loss(&pred, &frames, &vae).unwrap();
        let grads = loss.backward().unwrap();
        assert!(ps.vars().iter().any(|v| grads.get(v).is_some()));
        for (_, t) in frozen.named_tensors() {
            assert!(grads.get(&t).is_none());
        }
    }
}
