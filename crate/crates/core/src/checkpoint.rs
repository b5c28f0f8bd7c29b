//! Checkpoint directories: `model.safetensors` plus a `meta.json` naming the
//! stage, the parameter fingerprint (the checkpoint id), the training config
//! and the ids of the upstream checkpoints it was trained against.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::{Stage, TrainConfig};
use crate::connector::SketchConnector;
use crate::error::{Error, Result};
use crate::inpainter::SketchInpainter;
use crate::nn::ParamStore;
use crate::vae::SketchVae;

pub const MODEL_FILE: &str = "model.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub id: String,
    pub config: TrainConfig,
    #[serde(default)]
    pub upstream: BTreeMap<Stage, String>,
    pub best_epoch: usize,
    pub validation_loss: f64,
    pub parameters: usize,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    store.save(&dir.join(MODEL_FILE))?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

fn open(dir: &Path, stage: Stage) -> Result<(ParamStore, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    if meta.stage != stage {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {} checkpoint, expected {stage}",
            dir.display(),
            meta.stage
        )));
    }
    let store = ParamStore::load(&dir.join(MODEL_FILE), DType::F32, false)?;
    Ok((store, meta))
}

fn verify(store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let found = store.fingerprint()?;
    if found != meta.id {
        return Err(Error::CheckpointMismatch(format!(
            "{} parameters hash to {found}, meta says {}",
            meta.stage, meta.id
        )));
    }
    Ok(())
}

fn check_upstream(meta: &CheckpointMeta, expected: &[(Stage, &str)]) -> Result<()> {
    for (stage, id) in expected {
        match meta.upstream.get(stage) {
            Some(found) if found == id => {}
            found => {
                return Err(Error::CheckpointMismatch(format!(
                    "{} checkpoint was trained against {stage} {}, but {id} is loaded",
                    meta.stage,
                    found.map_or("<none>", String::as_str)
                )))
            }
        }
    }
    Ok(())
}

/// A frozen model together with its parameter store and metadata.
pub struct Loaded<M> {
    pub model: M,
    pub store: ParamStore,
    pub meta: CheckpointMeta,
}

pub fn load_vae(dir: &Path) -> Result<Loaded<SketchVae>> {
    let (mut store, meta) = open(dir, Stage::Vae)?;
    let model = SketchVae::new(&meta.config.vae, &mut store)?;
    verify(&store, &meta)?;
    Ok(Loaded { model, store, meta })
}

pub fn load_inpainter(dir: &Path, vae_id: &str) -> Result<Loaded<SketchInpainter>> {
    let (mut store, meta) = open(dir, Stage::Inpainter)?;
    check_upstream(&meta, &[(Stage::Vae, vae_id)])?;
    let model = SketchInpainter::new(&meta.config.inpainter, &mut store)?;
    verify(&store, &meta)?;
    Ok(Loaded { model, store, meta })
}

pub fn load_connector(dir: &Path, vae_id: &str, inpainter_id: &str) -> Result<Loaded<SketchConnector>> {
    let (mut store, meta) = open(dir, Stage::Connector)?;
    check_upstream(&meta, &[(Stage::Vae, vae_id), (Stage::Inpainter, inpainter_id)])?;
    let model = SketchConnector::new(&meta.config.connector, &mut store)?;
    verify(&store, &meta)?;
    Ok(Loaded { model, store, meta })
}
