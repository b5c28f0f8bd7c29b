//! Stage-II model: fuses stage-I predictions with ground truth (training) or
//! user sketches (inference), then refines the whole window with a
//! transformer encoder.

use std::collections::BTreeSet;

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{PitchSeq, RhythmSeq, FRAMES_PER_MEASURE};
use crate::dataset::WindowShape;
use crate::error::{Error, Result};
use crate::inpainter::latent_decode_loss;
use crate::nn::{LayerNorm, Linear, ModelRng, ParamStore};
use crate::vae::{SketchVae, LATENT_DIM, LATENT_HALF};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskMode {
    /// Each position swaps its whole latent pair.
    #[default]
    Whole,
    /// Pitch and rhythm halves are unmasked independently.
    PerHalf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    pub layers: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub unmask_rate: f64,
    pub unmask_mode: UnmaskMode,
    /// Adds the fused input back onto the projected output; the projection then
    /// starts at zero so an untrained connector passes its input through.
    pub residual: bool,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            feed_forward: 1024,
            unmask_rate: 0.3,
            unmask_mode: UnmaskMode::Whole,
            residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskFlag {
    KeptPrediction,
    UnmaskedPitch,
    UnmaskedRhythm,
    UnmaskedBoth,
}

impl UnmaskFlag {
    fn from_halves(pitch: bool, rhythm: bool) -> Self {
        match (pitch, rhythm) {
            (false, false) => Self::KeptPrediction,
            (true, false) => Self::UnmaskedPitch,
            (false, true) => Self::UnmaskedRhythm,
            (true, true) => Self::UnmaskedBoth,
        }
    }

    fn halves(self) -> (bool, bool) {
        match self {
            Self::KeptPrediction => (false, false),
            Self::UnmaskedPitch => (true, false),
            Self::UnmaskedRhythm => (false, true),
            Self::UnmaskedBoth => (true, true),
        }
    }
}

/// One flag per missing position, batch-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmaskRecord {
    pub flags: Vec<UnmaskFlag>,
}

impl UnmaskRecord {
    /// Fraction of latent halves replaced by ground truth.
    pub fn unmasked_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        let halves: usize = self
            .flags
            .iter()
            .map(|f| {
                let (p, r) = f.halves();
                p as usize + r as usize
            })
            .sum();
        halves as f64 / (2 * self.flags.len()) as f64
    }
}

/// Replaces predicted latents `(b, n_m, 256)` by the truth at the given rate.
pub fn random_unmask(
    predicted: &Tensor,
    truth: &Tensor,
    rate: f64,
    mode: UnmaskMode,
    rng: &mut ModelRng,
) -> Result<(Tensor, UnmaskRecord)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Range(format!("unmask rate {rate} outside [0, 1]")));
    }
    if predicted.dims() != truth.dims() {
        return Err(Error::ShapeMismatch(format!(
            "predicted {:?} vs truth {:?}",
            predicted.dims(),
            truth.dims()
        )));
    }
    let (b, n, d) = predicted.dims3()?;
    if d != LATENT_DIM {
        return Err(Error::ShapeMismatch(format!("latent width {d}")));
    }
    let flags: Vec<UnmaskFlag> = (0..b * n)
        .map(|_| match mode {
            UnmaskMode::Whole => {
                let u = rng.random_bool(rate);
                UnmaskFlag::from_halves(u, u)
            }
            UnmaskMode::PerHalf => UnmaskFlag::from_halves(rng.random_bool(rate), rng.random_bool(rate)),
        })
        .collect();
    let mask: Vec<f32> = flags
        .iter()
        .flat_map(|f| {
            let (p, r) = f.halves();
            std::iter::repeat_n(p as u8 as f32, LATENT_HALF).chain(std::iter::repeat_n(r as u8 as f32, LATENT_HALF))
        })
        .collect();
    let mask = Tensor::from_vec(mask, (b, n, d), predicted.device())?.to_dtype(predicted.dtype())?;
    let keep = (1.0 - &mask)?;
    let fused = ((predicted * keep)? + (truth * mask)?)?;
    Ok((fused, UnmaskRecord { flags }))
}

/// A user sketch for one missing measure, addressed by its index in the window.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSketch {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitches: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchSpec {
    #[serde(default)]
    pub measures: Vec<MeasureSketch>,
}

/// Encoder inputs derived from one measure sketch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedSketch {
    /// Position among the missing measures.
    pub slot: usize,
    pub pitch: Option<PitchSeq>,
    pub rhythm: Option<RhythmSeq>,
}

impl SketchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.measures.iter().all(|m| m.pitches.is_none() && m.rhythm.is_none())
    }

    /// Checks the spec against the window geometry and builds encoder inputs.
    ///
    /// With a rhythm pattern present, the contour is cycled or truncated to the
    /// pattern's onset count; on its own it is truncated to 24 pitches.
    pub fn resolve(&self, shape: WindowShape) -> Result<Vec<ResolvedSketch>> {
        let range = shape.missing_range();
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for m in &self.measures {
            if !range.contains(&m.index) {
                return Err(Error::Spec(format!(
                    "measure index {} outside the missing range {}..{}",
                    m.index, range.start, range.end
                )));
            }
            if !seen.insert(m.index) {
                return Err(Error::Spec(format!("measure {} sketched twice", m.index)));
            }
            let rhythm = match &m.rhythm {
                Some(ids) => {
                    let r = RhythmSeq::from_ids(ids).map_err(|e| Error::Spec(format!("measure {}: {e}", m.index)))?;
                    if !r.is_well_formed() {
                        return Err(Error::Spec(format!("measure {}: rhythm holds after a rest or at the start", m.index)));
                    }
                    Some(r)
                }
                None => None,
            };
            let pitch = match &m.pitches {
                Some(p) if p.is_empty() => {
                    return Err(Error::Spec(format!("measure {}: empty pitch contour", m.index)));
                }
                Some(p) => {
                    if let Some(bad) = p.iter().find(|&&v| v > 127) {
                        return Err(Error::Spec(format!("measure {}: pitch {bad} outside 0..=127", m.index)));
                    }
                    let len = rhythm.map_or(p.len().min(FRAMES_PER_MEASURE), |r| r.onset_count());
                    let contour: Vec<u32> = p.iter().copied().cycle().take(len).collect();
                    Some(PitchSeq::from_pitches(&contour)?)
                }
                None => None,
            };
            if pitch.is_some() || rhythm.is_some() {
                out.push(ResolvedSketch {
                    slot: m.index - range.start,
                    pitch,
                    rhythm,
                });
            }
        }
        out.sort_by_key(|s| s.slot);
        Ok(out)
    }
}

/// Overwrites sketched halves of `predicted` (`(b, n_m, 256)`) with encoder means.
pub fn apply_sketch(predicted: &Tensor, sketches: &[Vec<ResolvedSketch>], vae: &SketchVae) -> Result<Tensor> {
    let (b, n, d) = predicted.dims3()?;
    if sketches.len() != b || d != LATENT_DIM {
        return Err(Error::ShapeMismatch(format!(
            "{} sketch lists for latents {:?}",
            sketches.len(),
            predicted.dims()
        )));
    }
    let mut pitch_jobs = Vec::new();
    let mut rhythm_jobs = Vec::new();
    for (row, list) in sketches.iter().enumerate() {
        for s in list {
            if s.slot >= n {
                return Err(Error::Spec(format!("sketch slot {} beyond {n} missing measures", s.slot)));
            }
            if let Some(p) = s.pitch {
                pitch_jobs.push((row * n + s.slot, p));
            }
            if let Some(r) = s.rhythm {
                rhythm_jobs.push((row * n + s.slot, r));
            }
        }
    }
    if pitch_jobs.is_empty() && rhythm_jobs.is_empty() {
        return Ok(predicted.clone());
    }
    let dtype = predicted.dtype();
    let mut flat = predicted.detach().to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut write = |jobs: Vec<usize>, means: Tensor, offset: usize| -> Result<()> {
        for (pos, row) in jobs.into_iter().zip(means.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?) {
            let at = pos * LATENT_DIM + offset;
            flat[at..at + LATENT_HALF].copy_from_slice(&row);
        }
        Ok(())
    };
    if !pitch_jobs.is_empty() {
        let seqs: Vec<PitchSeq> = pitch_jobs.iter().map(|j| j.1).collect();
        let post = vae.pitch_posterior(&vae.pitch_tensor(&seqs)?)?;
        write(pitch_jobs.iter().map(|j| j.0).collect(), post.mean, 0)?;
    }
    if !rhythm_jobs.is_empty() {
        let seqs: Vec<RhythmSeq> = rhythm_jobs.iter().map(|j| j.1).collect();
        let post = vae.rhythm_posterior(&vae.rhythm_tensor(&seqs)?)?;
        write(rhythm_jobs.iter().map(|j| j.0).collect(), post.mean, LATENT_HALF)?;
    }
    Ok(Tensor::from_vec(flat, (b, n, d), predicted.device())?.to_dtype(dtype)?)
}

/// `(t, dim)` sinusoidal position table.
pub fn sinusoidal_positions(t: usize, dim: usize, like: &Tensor) -> Result<Tensor> {
    let mut table = Vec::with_capacity(t * dim);
    for pos in 0..t {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            table.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Ok(Tensor::from_vec(table, (t, dim), like.device())?.to_dtype(like.dtype())?)
}

struct EncoderLayer {
    heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    norm1: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(ps: &mut ParamStore, name: &str, cfg: &ConnectorConfig) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                heads: cfg.heads,
                query: Linear::new(ps, "query", LATENT_DIM, LATENT_DIM)?,
                key: Linear::new(ps, "key", LATENT_DIM, LATENT_DIM)?,
                value: Linear::new(ps, "value", LATENT_DIM, LATENT_DIM)?,
                attn_out: Linear::new(ps, "attn_out", LATENT_DIM, LATENT_DIM)?,
                norm1: LayerNorm::new(ps, "norm1", LATENT_DIM)?,
                ff_in: Linear::new(ps, "ff_in", LATENT_DIM, cfg.feed_forward)?,
                ff_out: Linear::new(ps, "ff_out", cfg.feed_forward, LATENT_DIM)?,
                norm2: LayerNorm::new(ps, "norm2", LATENT_DIM)?,
            })
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let k = self.split_heads(&self.key.forward(x)?)?;
        let v = self.split_heads(&self.value.forward(x)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let attended = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        let x = self.norm1.forward(&(x + self.attn_out.forward(&attended)?)?)?;
        let ff = self.ff_out.forward(&self.ff_in.forward(&x)?.relu()?)?;
        self.norm2.forward(&(&x + ff)?)
    }
}

pub struct SketchConnector {
    cfg: ConnectorConfig,
    layers: Vec<EncoderLayer>,
    output: Linear,
}

impl SketchConnector {
    pub fn new(cfg: &ConnectorConfig, ps: &mut ParamStore) -> Result<Self> {
        if cfg.heads == 0 || LATENT_DIM % cfg.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {LATENT_DIM}", cfg.heads)));
        }
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(ps, &format!("layer{l}"), cfg))
            .collect::<Result<_>>()?;
        let output = if cfg.residual {
            Linear::zeros(ps, "output", LATENT_DIM, LATENT_DIM)?
        } else {
            Linear::new(ps, "output", LATENT_DIM, LATENT_DIM)?
        };
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            output,
        })
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.cfg
    }

    /// Runs the encoder over `[past, fused, future]` (each `(b, n, 256)`) and
    /// returns the refined `(b, n_m, 256)` missing latents.
    pub fn connect(&self, past: &Tensor, fused: &Tensor, future: &Tensor) -> Result<Tensor> {
        let (b, n_m, d) = fused.dims3()?;
        for (name, t) in [("past", past), ("future", future)] {
            if t.rank() != 3 || t.dim(0)? != b || t.dim(2)? != d {
                return Err(Error::ShapeMismatch(format!("{name} latents {:?} vs missing {:?}", t.dims(), fused.dims())));
            }
        }
        if d != LATENT_DIM {
            return Err(Error::ShapeMismatch(format!("latent width {d}")));
        }
        let n_p = past.dim(1)?;
        let mut x = Tensor::cat(&[past, fused, future], 1)?;
        let pe = sinusoidal_positions(x.dim(1)?, d, &x)?;
        x = x.broadcast_add(&pe)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let projected = self.output.forward(&x.narrow(1, n_p, n_m)?)?;
        if self.cfg.residual {
            Ok((fused + projected)?)
        } else {
            Ok(projected)
        }
    }
}

pub fn stage2_loss(final_latents: &Tensor, frames: &Tensor, vae: &SketchVae) -> Result<Tensor> {
    latent_decode_loss(final_latents, frames, vae)
}
