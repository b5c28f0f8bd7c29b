//! Inference over the three frozen models: encode the context, inpaint,
//! apply sketches, connect and decode.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_connector, load_inpainter, load_vae, Loaded};
use crate::codec::{factorize, FrameSequence, FRAMES_PER_MEASURE, FRAME_VOCAB};
use crate::config::Stage;
use crate::connector::{apply_sketch, ResolvedSketch, SketchConnector, SketchSpec};
use crate::dataset::{ContextWindow, WindowShape};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{lcs_len, rhythm_class_agreement};
use crate::inpainter::{LatentSequence, SketchInpainter};
use crate::nn::{seeded_rng, ModelRng};
use crate::training::{stage_dir, window_mask};
use crate::vae::{LatentPair, SketchVae, LATENT_DIM};

/// Which part of the stack produces the final latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Stage-I predictions decoded directly.
    Inpainter,
    /// Stage-I predictions refined by the connector.
    Connector,
}

pub struct ModelStack {
    pub vae: Loaded<SketchVae>,
    pub inpainter: Loaded<SketchInpainter>,
    pub connector: Loaded<SketchConnector>,
    pub shape: WindowShape,
}

impl ModelStack {
    /// Loads `dir/vae`, `dir/inpainter` and `dir/connector`, checking that each
    /// was trained against the others.
    pub fn load(dir: &Path) -> Result<Self> {
        let vae = load_vae(&stage_dir(dir, Stage::Vae))?;
        let inpainter = load_inpainter(&stage_dir(dir, Stage::Inpainter), &vae.meta.id)?;
        let connector = load_connector(&stage_dir(dir, Stage::Connector), &vae.meta.id, &inpainter.meta.id)?;
        Ok(Self {
            vae,
            inpainter,
            connector,
            shape: WindowShape::default(),
        })
    }

    pub fn ids(&self) -> BTreeMap<Stage, String> {
        BTreeMap::from([
            (Stage::Vae, self.vae.meta.id.clone()),
            (Stage::Inpainter, self.inpainter.meta.id.clone()),
            (Stage::Connector, self.connector.meta.id.clone()),
        ])
    }

    /// `(b, n, 256)` latents of `b` equally long measure lists: posterior means,
    /// or posterior samples when `rng` is given.
    pub fn encode(&self, blocks: &[&[FrameSequence]], rng: Option<&mut ModelRng>) -> Result<Tensor> {
        let n = blocks.first().map_or(0, |b| b.len());
        if blocks.is_empty() || n == 0 || blocks.iter().any(|b| b.len() != n) {
            return Err(Error::ShapeMismatch("measure blocks must be non-empty and equally long".into()));
        }
        let flat: Vec<FrameSequence> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
        let vae = &self.vae.model;
        let z = match rng {
            None => vae.encode_means(&flat)?,
            Some(rng) => {
                let (p, r) = vae.posteriors(&flat)?;
                Tensor::cat(&[p.sample(rng)?, r.sample(rng)?], 1)?
            }
        };
        Ok(z.reshape((blocks.len(), n, LATENT_DIM))?)
    }

    /// Stage-I free-running predictions `(b, n_m, 256)` from context latents.
    pub fn inpaint(&self, past: &Tensor, future: &Tensor) -> Result<Tensor> {
        let b = past.dim(0)?;
        let holes = Tensor::zeros((b, self.shape.missing, LATENT_DIM), past.dtype(), past.device())?;
        let seq = LatentSequence {
            latents: Tensor::cat(&[past, &holes, future], 1)?,
            mask: window_mask(self.shape),
        };
        self.inpainter.model.predict(&seq)?.latents()
    }

    /// Final missing latents. Sketches are only used by the connector variant.
    pub fn complete(
        &self,
        past: &Tensor,
        future: &Tensor,
        sketches: Option<&[Vec<ResolvedSketch>]>,
        variant: Variant,
    ) -> Result<Tensor> {
        let predicted = self.inpaint(past, future)?;
        match variant {
            Variant::Inpainter => Ok(predicted),
            Variant::Connector => {
                let fused = match sketches {
                    Some(s) => apply_sketch(&predicted, s, &self.vae.model)?,
                    None => predicted,
                };
                self.connector.model.connect(past, &fused, future)
            }
        }
    }

    /// Free-running decode of `(b, n, 256)` latents into repaired measures, plus the logits.
    pub fn decode(&self, latents: &Tensor) -> Result<(Vec<Vec<FrameSequence>>, Tensor)> {
        let (b, n, d) = latents.dims3()?;
        let decoded = self.vae.model.decode(&latents.reshape((b * n, d))?, None)?;
        let measures: Vec<FrameSequence> = decoded.measures()?.iter().map(FrameSequence::repaired).collect();
        Ok((
            measures.chunks(n).map(<[FrameSequence]>::to_vec).collect(),
            decoded.logits.reshape((b, n, FRAMES_PER_MEASURE, FRAME_VOCAB))?,
        ))
    }

    /// Context latents of test windows from posterior means.
    pub fn window_context(&self, windows: &[ContextWindow]) -> Result<(Tensor, Tensor)> {
        let past: Vec<&[FrameSequence]> = windows.iter().map(|w| w.past.as_slice()).collect();
        let future: Vec<&[FrameSequence]> = windows.iter().map(|w| w.future.as_slice()).collect();
        Ok((self.encode(&past, None)?, self.encode(&future, None)?))
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse> {
        let (past, future) = req.measures(self.shape)?;
        let sketches = req.sketch.resolve(self.shape)?;
        let seed = req.seed.unwrap_or_else(rand::random);
        let mut rng = seeded_rng(seed);
        let past_z = self.encode(&[&past], Some(&mut rng))?;
        let future_z = self.encode(&[&future], Some(&mut rng))?;
        let z = self.complete(&past_z, &future_z, Some(std::slice::from_ref(&sketches)), Variant::Connector)?;
        let (mut measures, _) = self.decode(&z)?;
        let missing = measures.remove(0);
        let adherence = sketches.iter().map(|s| score_adherence(s, &missing[s.slot], self.shape)).collect();
        let latents = if req.include_latents {
            Some(LatentPair::from_tensor(&z.squeeze(0)?)?)
        } else {
            None
        };
        Ok(GenerateResponse {
            missing,
            latents,
            model: self.ids(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            adherence,
        })
    }
}

fn score_adherence(sketch: &ResolvedSketch, generated: &FrameSequence, shape: WindowShape) -> Adherence {
    let pitch = sketch.pitch.map(|p| {
        let want: Vec<u32> = p.pitches().collect();
        let got: Vec<u32> = generated.onset_pitches().collect();
        if want.is_empty() {
            1.0
        } else {
            lcs_len(&got, &want) as f64 / want.len() as f64
        }
    });
    let rhythm = sketch
        .rhythm
        .map(|r| rhythm_class_agreement(&factorize(generated).1, &r));
    Adherence {
        index: shape.past + sketch.slot,
        pitch,
        rhythm,
    }
}

/// One completion request: six past and six future measures as frame tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub past: Vec<Vec<u32>>,
    pub future: Vec<Vec<u32>>,
    #[serde(default)]
    pub sketch: SketchSpec,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub include_latents: bool,
}

impl GenerateRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(e.to_string()))
    }

    /// Validated context measures.
    pub fn measures(&self, shape: WindowShape) -> Result<(Vec<FrameSequence>, Vec<FrameSequence>)> {
        let block = |name: &str, rows: &[Vec<u32>], want: usize| -> Result<Vec<FrameSequence>> {
            if rows.len() != want {
                return Err(Error::Validation(format!("{name} has {} measures, expected {want}", rows.len())));
            }
            rows.iter()
                .enumerate()
                .map(|(i, row)| {
                    FrameSequence::from_slice(row).map_err(|e| Error::Validation(format!("{name}[{i}]: {e}")))
                })
                .collect()
        };
        Ok((block("past", &self.past, shape.past)?, block("future", &self.future, shape.future)?))
    }

    pub fn validate(&self, shape: WindowShape) -> Result<()> {
        self.measures(shape)?;
        self.sketch.resolve(shape)?;
        Ok(())
    }
}

/// How closely a generated measure follows its sketch, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adherence {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhythm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub missing: Vec<FrameSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Vec<LatentPair>>,
    pub model: BTreeMap<Stage, String>,
    pub version: String,
    pub seed: u64,
    pub adherence: Vec<Adherence>,
}
