//! Measure-level VAE with separate pitch and rhythm encoders and a
//! hierarchical beat/tick decoder.
//!
//! The pitch encoder reads the 24-token [`PitchSeq`], the rhythm encoder the
//! 24-token [`RhythmSeq`]; each yields a 128-d Gaussian posterior. The decoder
//! unrolls 4 beat states from `z = [z_pitch, z_rhythm]`, then 6 ticks per beat,
//! each tick conditioned on its beat state and the previous frame token.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::codec::{
    factorize, FrameSequence, PitchSeq, RhythmSeq, BEATS_PER_MEASURE, FRAMES_PER_MEASURE, FRAME_VOCAB,
    PITCH_VOCAB, RHYTHM_VOCAB, TICKS_PER_BEAT,
};
use crate::error::{Error, Result};
use crate::nn::{self, Embedding, Gru, Linear, ModelRng, ParamStore};

pub const LATENT_HALF: usize = 128;
pub const LATENT_DIM: usize = 2 * LATENT_HALF;
/// Decoder input token for frame 0.
const START_TOKEN: u32 = FRAME_VOCAB as u32;
const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub embed_dim: usize,
    /// Per direction.
    pub encoder_hidden: usize,
    pub beat_hidden: usize,
    pub tick_hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            encoder_hidden: 256,
            beat_hidden: 256,
            tick_hidden: 256,
        }
    }
}

/// One measure's latent: pitch half and rhythm half, 128 values each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub pitch: Vec<f32>,
    pub rhythm: Vec<f32>,
}

impl LatentPair {
    pub fn new(pitch: Vec<f32>, rhythm: Vec<f32>) -> Result<Self> {
        if pitch.len() != LATENT_HALF || rhythm.len() != LATENT_HALF {
            return Err(Error::ShapeMismatch(format!(
                "latent halves have {} and {} dims, expected {LATENT_HALF}",
                pitch.len(),
                rhythm.len()
            )));
        }
        if pitch.iter().chain(&rhythm).any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite latent".into()));
        }
        Ok(Self { pitch, rhythm })
    }

    pub fn concat(&self) -> Vec<f32> {
        let mut z = self.pitch.clone();
        z.extend_from_slice(&self.rhythm);
        z
    }

    pub fn from_concat(z: &[f32]) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return Err(Error::ShapeMismatch(format!("latent has {} dims, expected {LATENT_DIM}", z.len())));
        }
        Self::new(z[..LATENT_HALF].to_vec(), z[LATENT_HALF..].to_vec())
    }

    /// Rows of a `(n, 256)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        t.to_dtype(DType::F32)?
            .to_vec2::<f32>()?
            .iter()
            .map(|row| Self::from_concat(row))
            .collect()
    }

    pub fn to_tensor(pairs: &[Self], dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = pairs.iter().flat_map(|p| p.concat()).collect();
        Ok(Tensor::from_vec(flat, (pairs.len(), LATENT_DIM), device)?.to_dtype(dtype)?)
    }
}

/// Diagonal Gaussian posterior, batched: `mean` and `logvar` are `(b, 128)`.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    pub fn stddev(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    /// Reparameterized draw `mean + stddev ⊙ ε`.
    pub fn sample(&self, rng: &mut ModelRng) -> Result<Tensor> {
        let eps = nn::normal_noise(rng, self.mean.dims(), self.mean.dtype(), self.mean.device())?;
        Ok((&self.mean + (self.stddev()? * eps)?)?)
    }

    /// `KL(q ‖ N(0, I))` summed over dimensions, per batch row: `(b,)`.
    pub fn kl_to_standard_normal(&self) -> Result<Tensor> {
        let terms = ((self.mean.sqr()? + self.logvar.exp()?)? - 1.0)?;
        Ok(((terms - &self.logvar)?.sum(D::Minus1)? * 0.5)?)
    }
}

struct MeasureEncoder {
    embed: Embedding,
    forward: Gru,
    backward: Gru,
    mean: Linear,
    logvar: Linear,
}

impl MeasureEncoder {
    fn new(ps: &mut ParamStore, name: &str, vocab: usize, cfg: &VaeConfig) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                embed: Embedding::new(ps, "embed", vocab, cfg.embed_dim)?,
                forward: Gru::new(ps, "fwd", cfg.embed_dim, cfg.encoder_hidden)?,
                backward: Gru::new(ps, "bwd", cfg.embed_dim, cfg.encoder_hidden)?,
                mean: Linear::new(ps, "mean", 2 * cfg.encoder_hidden, LATENT_HALF)?,
                logvar: Linear::new(ps, "logvar", 2 * cfg.encoder_hidden, LATENT_HALF)?,
            })
        })
    }

    fn forward(&self, tokens: &Tensor) -> Result<GaussianPosterior> {
        let batch = tokens.dim(0)?;
        let x = self.embed.forward(tokens)?;
        let h0 = self.forward.zero_state(batch, &x)?;
        let (_, hf) = self.forward.run(&x, &h0, false)?;
        let (_, hb) = self.backward.run(&x, &h0, true)?;
        let h = Tensor::cat(&[hf, hb], 1)?;
        let logvar = self.logvar.forward(&h)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
        Ok(GaussianPosterior {
            mean: self.mean.forward(&h)?,
            logvar,
        })
    }
}

/// Decoder output for a batch.
pub struct Decoded {
    /// `(b, 24, 130)`.
    pub logits: Tensor,
    /// Argmax tokens `(b, 24)`.
    pub tokens: Tensor,
}

impl Decoded {
    pub fn measures(&self) -> Result<Vec<FrameSequence>> {
        self.tokens
            .to_vec2::<u32>()?
            .into_iter()
            .map(|row| FrameSequence::from_raw(row.try_into().expect("24 frames")))
            .collect()
    }
}

pub struct SketchVae {
    cfg: VaeConfig,
    pitch_encoder: MeasureEncoder,
    rhythm_encoder: MeasureEncoder,
    beat_init: Linear,
    beat_gru: Gru,
    tick_init: Linear,
    frame_embed: Embedding,
    tick_beat_proj: Linear,
    tick_gru: Gru,
    output: Linear,
    dtype: DType,
    device: Device,
}

impl SketchVae {
    pub fn new(cfg: &VaeConfig, ps: &mut ParamStore) -> Result<Self> {
        let t = cfg.tick_hidden;
        Ok(Self {
            pitch_encoder: MeasureEncoder::new(ps, "pitch_encoder", PITCH_VOCAB, cfg)?,
            rhythm_encoder: MeasureEncoder::new(ps, "rhythm_encoder", RHYTHM_VOCAB, cfg)?,
            beat_init: Linear::new(ps, "beat_init", LATENT_DIM, cfg.beat_hidden)?,
            beat_gru: Gru::new(ps, "beat_gru", LATENT_DIM, cfg.beat_hidden)?,
            tick_init: Linear::new(ps, "tick_init", cfg.beat_hidden, t)?,
            frame_embed: Embedding::new(ps, "frame_embed", FRAME_VOCAB + 1, cfg.embed_dim)?,
            // the tick GRU input is [beat state, previous-token embedding]; the beat
            // part is projected once per beat instead of once per tick
            tick_beat_proj: Linear::new(ps, "tick_beat_proj", cfg.beat_hidden, 3 * t)?,
            tick_gru: Gru::new(ps, "tick_gru", cfg.embed_dim, t)?,
            output: Linear::new(ps, "output", t, FRAME_VOCAB)?,
            cfg: cfg.clone(),
            dtype: ps.dtype(),
            device: ps.device().clone(),
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn pitch_tensor(&self, seqs: &[PitchSeq]) -> Result<Tensor> {
        let flat: Vec<u32> = seqs.iter().flat_map(|s| *s.tokens()).collect();
        Ok(Tensor::from_vec(flat, (seqs.len(), FRAMES_PER_MEASURE), &self.device)?)
    }

    pub fn rhythm_tensor(&self, seqs: &[RhythmSeq]) -> Result<Tensor> {
        let flat: Vec<u32> = seqs.iter().flat_map(|s| s.ids()).collect();
        Ok(Tensor::from_vec(flat, (seqs.len(), FRAMES_PER_MEASURE), &self.device)?)
    }

    pub fn frame_tensor(&self, measures: &[FrameSequence]) -> Result<Tensor> {
        let flat: Vec<u32> = measures.iter().flat_map(|m| *m.frames()).collect();
        Ok(Tensor::from_vec(flat, (measures.len(), FRAMES_PER_MEASURE), &self.device)?)
    }

    fn check_vocab(tokens: &Tensor, vocab: usize, alphabet: &'static str) -> Result<()> {
        if tokens.dims().len() != 2 || tokens.dim(1)? != FRAMES_PER_MEASURE {
            return Err(Error::ShapeMismatch(format!("token batch has shape {:?}", tokens.dims())));
        }
        if tokens.elem_count() > 0 {
            let max = tokens.max_all()?.to_scalar::<u32>()?;
            if max as usize >= vocab {
                return Err(Error::Vocab { token: max, alphabet });
            }
        }
        Ok(())
    }

    /// Posterior over `z_pitch` for a `(b, 24)` pitch-token batch.
    pub fn pitch_posterior(&self, tokens: &Tensor) -> Result<GaussianPosterior> {
        Self::check_vocab(tokens, PITCH_VOCAB, "pitch")?;
        self.pitch_encoder.forward(tokens)
    }

    pub fn rhythm_posterior(&self, tokens: &Tensor) -> Result<GaussianPosterior> {
        Self::check_vocab(tokens, RHYTHM_VOCAB, "rhythm")?;
        self.rhythm_encoder.forward(tokens)
    }

    pub fn encode_pitch(&self, seqs: &[PitchSeq], rng: &mut ModelRng) -> Result<(GaussianPosterior, Tensor)> {
        let post = self.pitch_posterior(&self.pitch_tensor(seqs)?)?;
        let z = post.sample(rng)?;
        Ok((post, z))
    }

    pub fn encode_rhythm(&self, seqs: &[RhythmSeq], rng: &mut ModelRng) -> Result<(GaussianPosterior, Tensor)> {
        let post = self.rhythm_posterior(&self.rhythm_tensor(seqs)?)?;
        let z = post.sample(rng)?;
        Ok((post, z))
    }

    /// Both posteriors for a `(b, 24)` frame-token batch.
    pub fn posteriors(&self, frames: &[FrameSequence]) -> Result<(GaussianPosterior, GaussianPosterior)> {
        let (pitch, rhythm): (Vec<_>, Vec<_>) = frames.iter().map(factorize).unzip();
        Ok((
            self.pitch_posterior(&self.pitch_tensor(&pitch)?)?,
            self.rhythm_posterior(&self.rhythm_tensor(&rhythm)?)?,
        ))
    }

    /// Posterior means `[z_pitch, z_rhythm]` as a `(b, 256)` tensor.
    pub fn encode_means(&self, frames: &[FrameSequence]) -> Result<Tensor> {
        let (p, r) = self.posteriors(frames)?;
        Ok(Tensor::cat(&[p.mean, r.mean], 1)?)
    }

    /// Decodes `(b, 256)` latents. With `teacher` (`(b, 24)` frame tokens) each tick
    /// is fed the true previous token; without it, the model's own argmax.
    pub fn decode(&self, z: &Tensor, teacher: Option<&Tensor>) -> Result<Decoded> {
        let batch = z.dim(0)?;
        if z.dims() != [batch, LATENT_DIM] {
            return Err(Error::ShapeMismatch(format!("latent batch has shape {:?}", z.dims())));
        }
        if let Some(t) = teacher {
            if t.dims() != [batch, FRAMES_PER_MEASURE] {
                return Err(Error::ShapeMismatch(format!("teacher batch has shape {:?}", t.dims())));
            }
        }

        let beat_in = self.beat_gru.project_input(z)?;
        let mut beat_h = self.beat_init.forward(z)?.tanh()?;
        let mut beats = Vec::with_capacity(BEATS_PER_MEASURE);
        for _ in 0..BEATS_PER_MEASURE {
            beat_h = self.beat_gru.step(&beat_in, &beat_h)?;
            beats.push(beat_h.clone());
        }

        let start = Tensor::full(START_TOKEN, (batch, 1), &self.device)?;
        // teacher inputs: START followed by the first 23 true tokens
        let teacher_in = match teacher {
            Some(t) => {
                let prev = Tensor::cat(&[&start, &t.narrow(1, 0, FRAMES_PER_MEASURE - 1)?], 1)?;
                Some(self.tick_gru.project_input(&self.frame_embed.forward(&prev)?)?)
            }
            None => None,
        };

        let mut prev_token = start.squeeze(1)?;
        let mut logits = Vec::with_capacity(FRAMES_PER_MEASURE);
        let mut tokens = Vec::with_capacity(FRAMES_PER_MEASURE);
        for (b, beat) in beats.iter().enumerate() {
            let beat_part = self.tick_beat_proj.forward(beat)?;
            let mut h = self.tick_init.forward(beat)?.tanh()?;
            for k in 0..TICKS_PER_BEAT {
                let frame = b * TICKS_PER_BEAT + k;
                let token_part = match &teacher_in {
                    Some(all) => all.narrow(1, frame, 1)?.squeeze(1)?,
                    None => self.tick_gru.project_input(&self.frame_embed.forward(&prev_token)?)?,
                };
                h = self.tick_gru.step(&(&beat_part + token_part)?, &h)?;
                let step_logits = self.output.forward(&h)?;
                let argmax = step_logits.argmax(D::Minus1)?;
                prev_token = argmax.clone();
                tokens.push(argmax);
                logits.push(step_logits);
            }
        }
        Ok(Decoded {
            logits: Tensor::stack(&logits, 1)?,
            tokens: Tensor::stack(&tokens, 1)?,
        })
    }

    /// Free-running reconstruction of whole measures from posterior means.
    pub fn reconstruct(&self, frames: &[FrameSequence]) -> Result<Vec<FrameSequence>> {
        let z = self.encode_means(frames)?;
        self.decode(&z, None)?.measures()
    }
}

/// Cross-entropy of `(b, 24, 130)` logits against `(b, 24)` targets, averaged over frames.
pub fn frame_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (b, f, c) = logits.dims3()?;
    if targets.dims() != [b, f] || c != FRAME_VOCAB {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.dims(),
            targets.dims()
        )));
    }
    nn::cross_entropy(&logits.reshape((b * f, c))?, &targets.flatten_all()?)
}

pub struct ElboTerms {
    pub total: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

/// `total = ce + kl_weight · kl`, where `kl` sums both posteriors' KL and averages over the batch.
pub fn elbo_loss(
    logits: &Tensor,
    targets: &Tensor,
    posteriors: &[&GaussianPosterior],
    kl_weight: f64,
) -> Result<ElboTerms> {
    let reconstruction = frame_cross_entropy(logits, targets)?;
    let batch = logits.dim(0)?;
    let mut kl = Tensor::zeros((), logits.dtype(), logits.device())?;
    for post in posteriors {
        if post.mean.dim(0)? != batch {
            return Err(Error::ShapeMismatch("posterior batch differs from logits batch".into()));
        }
        kl = (kl + post.kl_to_standard_normal()?.mean_all()?)?;
    }
    let total = (&reconstruction + (&kl * kl_weight)?)?;
    Ok(ElboTerms {
        total,
        reconstruction,
        kl,
    })
}

/// Fraction of frame positions where the two measure lists agree.
pub fn reconstruction_accuracy(predicted: &[FrameSequence], target: &[FrameSequence]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted measures vs {} target measures",
            predicted.len(),
            target.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::EmptyInput);
    }
    let equal: usize = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| p.frames().iter().zip(t.frames()).filter(|(a, b)| a == b).count())
        .sum();
    Ok(equal as f64 / (target.len() * FRAMES_PER_MEASURE) as f64)
}
