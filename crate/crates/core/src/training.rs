//! The three training stages: the VAE on single measures, then the inpainter
//! against the frozen VAE, then the connector against both frozen models.
//!
//! Every stage validates once before the first update (epoch 0), keeps the
//! parameters of the best validation epoch and stops after `patience` epochs
//! without improvement.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, save_checkpoint, CheckpointMeta};
use crate::codec::FrameSequence;
use crate::config::{Stage, TrainConfig};
use crate::connector::{random_unmask, stage2_loss, SketchConnector};
use crate::dataset::{hold_out, load_corpus_dir, make_windows, ContextWindow, Corpus, SplitManifest, WindowShape};
use crate::error::{Error, Result};
use crate::inpainter::{stage1_loss, InpaintPrediction, LatentSequence, MaskRole, SketchInpainter, StepInput};
use crate::nn::{clip_grad_norm, scalar, seeded_rng, ModelRng, ParamStore};
use crate::vae::{elbo_loss, SketchVae};

pub const RUN_LOG_FILE: &str = "runlog.jsonl";

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unmask_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenCheck {
    pub before: String,
    pub after: String,
}

impl FrozenCheck {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Config {
        stage: Stage,
        config: TrainConfig,
        train_items: usize,
        validation_items: usize,
    },
    Epoch(EpochRecord),
    Checkpoint {
        id: String,
        best_epoch: usize,
        validation_loss: f64,
        upstream: BTreeMap<Stage, String>,
        frozen: BTreeMap<Stage, FrozenCheck>,
    },
}

/// Append-only training log, optionally mirrored line by line to a JSONL file.
#[derive(Default)]
pub struct RunLog {
    records: Vec<RunRecord>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn read(path: &Path) -> Result<Vec<RunRecord>> {
        BufReader::new(File::open(path)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect()
    }

    pub fn push(&mut self, record: RunRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            RunRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }
}

/// Independent random streams derived from the config seed.
fn stream(seed: u64, k: u64) -> ModelRng {
    seeded_rng(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k))
}

struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Trainer {
    fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let vars = store.vars();
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            opt: AdamW::new(vars.clone(), params)?,
            vars,
            clip: cfg.grad_clip,
        })
    }

    fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = clip_grad_norm(&mut grads, &self.vars, self.clip)?;
        if norm.is_finite() {
            self.opt.step(&grads)?;
        }
        Ok(norm)
    }
}

struct EpochStats {
    loss: f64,
    accuracy: Option<f64>,
    grad_norm: f64,
    kl_weight: Option<f64>,
    unmask_rate: Option<f64>,
}

struct Fitted {
    best_epoch: usize,
    best_loss: f64,
}

/// Shared epoch loop: validate at epoch 0, train, keep the best, stop on patience.
fn fit_loop(
    cfg: &TrainConfig,
    store: &ParamStore,
    log: &mut RunLog,
    mut train_epoch: impl FnMut(usize) -> Result<EpochStats>,
    mut validate: impl FnMut() -> Result<(f64, Option<f64>)>,
) -> Result<Fitted> {
    let (loss0, acc0) = validate()?;
    if !loss0.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    log.push(RunRecord::Epoch(EpochRecord {
        epoch: 0,
        validation_loss: loss0,
        validation_accuracy: acc0,
        ..Default::default()
    }))?;
    let mut best = Fitted {
        best_epoch: 0,
        best_loss: loss0,
    };
    let mut snapshot = store.snapshot()?;
    for epoch in 1..=cfg.max_epochs {
        let stats = train_epoch(epoch)?;
        if !stats.loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let (val, acc) = validate()?;
        if !val.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        info!("epoch {epoch}: train {:.4} validation {val:.4}", stats.loss);
        log.push(RunRecord::Epoch(EpochRecord {
            epoch,
            train_loss: Some(stats.loss),
            validation_loss: val,
            train_accuracy: stats.accuracy,
            validation_accuracy: acc,
            kl_weight: stats.kl_weight,
            unmask_rate: stats.unmask_rate,
            grad_norm: Some(stats.grad_norm),
        }))?;
        if val < best.best_loss {
            best = Fitted {
                best_epoch: epoch,
                best_loss: val,
            };
            snapshot = store.snapshot()?;
        } else if epoch - best.best_epoch >= cfg.patience {
            break;
        }
    }
    store.assign(&snapshot)?;
    Ok(best)
}

fn batches(n: usize, size: usize, rng: &mut ModelRng) -> Vec<Vec<u32>> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[u32]>::to_vec).collect()
}

fn token_accuracy(tokens: &Tensor, targets: &Tensor) -> Result<f64> {
    scalar(&tokens.eq(targets)?.to_dtype(DType::F32)?.mean_all()?)
}

fn frozen_checks(frozen: &[(Stage, &ParamStore)], before: &BTreeMap<Stage, String>) -> Result<BTreeMap<Stage, FrozenCheck>> {
    frozen
        .iter()
        .map(|(stage, store)| {
            Ok((
                *stage,
                FrozenCheck {
                    before: before[stage].clone(),
                    after: store.fingerprint()?,
                },
            ))
        })
        .collect()
}

pub struct Trained<M> {
    pub model: M,
    pub store: ParamStore,
    pub meta: CheckpointMeta,
    pub log: RunLog,
    pub frozen: BTreeMap<Stage, FrozenCheck>,
}

fn finish<M>(
    stage: Stage,
    model: M,
    store: ParamStore,
    cfg: &TrainConfig,
    fitted: Fitted,
    upstream: BTreeMap<Stage, String>,
    frozen: BTreeMap<Stage, FrozenCheck>,
    mut log: RunLog,
) -> Result<Trained<M>> {
    let id = store.fingerprint()?;
    log.push(RunRecord::Checkpoint {
        id: id.clone(),
        best_epoch: fitted.best_epoch,
        validation_loss: fitted.best_loss,
        upstream: upstream.clone(),
        frozen: frozen.clone(),
    })?;
    let meta = CheckpointMeta {
        stage,
        id,
        config: cfg.clone(),
        upstream,
        best_epoch: fitted.best_epoch,
        validation_loss: fitted.best_loss,
        parameters: store.parameter_count(),
    };
    Ok(Trained {
        model,
        store,
        meta,
        log,
        frozen,
    })
}

/// Trains a VAE on `train` measures with early stopping on `validation`.
pub fn fit_vae(train: &[FrameSequence], validation: &[FrameSequence], cfg: &TrainConfig, mut log: RunLog) -> Result<Trained<SketchVae>> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    log.push(RunRecord::Config {
        stage: Stage::Vae,
        config: cfg.clone(),
        train_items: train.len(),
        validation_items: validation.len(),
    })?;
    let mut store = ParamStore::random(DType::F32, cfg.seed);
    let vae = SketchVae::new(&cfg.vae, &mut store)?;
    let mut trainer = Trainer::new(&store, cfg)?;
    let mut order_rng = stream(cfg.seed, 1);
    let mut noise_rng = stream(cfg.seed, 2);
    let all_train = vae.frame_tensor(train)?;
    let all_val = vae.frame_tensor(validation)?;

    let train_epoch = |epoch: usize| -> Result<EpochStats> {
        let kl_weight = cfg.kl_weight_at(epoch);
        let (mut loss_sum, mut acc_sum, mut norm_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for idx in batches(train.len(), cfg.measure_batch_size, &mut order_rng) {
            let batch: Vec<FrameSequence> = idx.iter().map(|&i| train[i as usize]).collect();
            let targets = all_train.index_select(&Tensor::new(idx.as_slice(), vae.device())?, 0)?;
            let (pp, rp) = vae.posteriors(&batch)?;
            let z = Tensor::cat(&[pp.sample(&mut noise_rng)?, rp.sample(&mut noise_rng)?], 1)?;
            let decoded = vae.decode(&z, Some(&targets))?;
            let terms = elbo_loss(&decoded.logits, &targets, &[&pp, &rp], kl_weight)?;
            let loss = scalar(&terms.total)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            norm_sum += trainer.step(&terms.total)?;
            loss_sum += loss;
            acc_sum += token_accuracy(&decoded.tokens, &targets)?;
            n += 1;
        }
        Ok(EpochStats {
            loss: loss_sum / n as f64,
            accuracy: Some(acc_sum / n as f64),
            grad_norm: norm_sum / n as f64,
            kl_weight: Some(kl_weight),
            unmask_rate: None,
        })
    };
    let validate = || -> Result<(f64, Option<f64>)> {
        let (mut loss_sum, mut correct, mut count) = (0.0, 0.0, 0usize);
        for (k, chunk) in validation.chunks(EVAL_CHUNK).enumerate() {
            let targets = all_val.narrow(0, k * EVAL_CHUNK, chunk.len())?;
            let (pp, rp) = vae.posteriors(chunk)?;
            let z = Tensor::cat(&[&pp.mean, &rp.mean], 1)?;
            let forced = vae.decode(&z, Some(&targets))?;
            let terms = elbo_loss(&forced.logits, &targets, &[&pp, &rp], cfg.kl_weight)?;
            loss_sum += scalar(&terms.total)? * chunk.len() as f64;
            let free = vae.decode(&z, None)?;
            correct += token_accuracy(&free.tokens, &targets)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok((loss_sum / count as f64, Some(correct / count as f64)))
    };
    let fitted = fit_loop(cfg, &store, &mut log, train_epoch, validate)?;
    finish(Stage::Vae, vae, store, cfg, fitted, BTreeMap::new(), BTreeMap::new(), log)
}

/// Training melodies split into fitting and validation ids.
pub fn training_split(manifest: &SplitManifest, cfg: &TrainConfig) -> (Vec<String>, Vec<String>) {
    hold_out(&manifest.train, cfg.validation_fraction, cfg.seed)
}

fn capped<T>(mut items: Vec<T>, cap: Option<usize>, rng: &mut ModelRng) -> Vec<T> {
    if let Some(cap) = cap {
        if items.len() > cap {
            items.shuffle(rng);
            items.truncate(cap);
        }
    }
    items
}

fn measures_of(corpus: &Corpus, ids: &[String], unique: bool) -> Vec<FrameSequence> {
    let mut seen = HashSet::new();
    corpus
        .select(ids)
        .flat_map(|m| m.measures.iter().copied())
        .filter(|m| !unique || seen.insert(*m))
        .collect()
}

fn or_fallback<T: Clone>(validation: Vec<T>, train: &[T], what: &str) -> Vec<T> {
    if validation.is_empty() {
        warn!("no validation {what}; validating on the training {what}");
        train.to_vec()
    } else {
        validation
    }
}

pub fn train_vae(corpus: &Corpus, manifest: &SplitManifest, cfg: &TrainConfig, log: RunLog) -> Result<Trained<SketchVae>> {
    let (fit_ids, val_ids) = training_split(manifest, cfg);
    let mut rng = stream(cfg.seed, 3);
    let train = capped(measures_of(corpus, &fit_ids, cfg.unique_measures), cfg.max_measures, &mut rng);
    let val_cap = cfg.max_measures.map(|n| n.div_ceil(4));
    let validation = capped(measures_of(corpus, &val_ids, cfg.unique_measures), val_cap, &mut rng);
    let validation = or_fallback(validation, &train, "measures");
    fit_vae(&train, &validation, cfg, log)
}

/// Posterior-mean latents and missing-measure frames for a set of windows.
pub struct WindowBank {
    pub shape: WindowShape,
    /// `(w, n, 256)` latents of every window position.
    pub latents: Tensor,
    /// `(w, n_m, 24)` ground-truth frames of the missing measures.
    pub frames: Tensor,
}

impl WindowBank {
    pub fn build(vae: &SketchVae, windows: &[ContextWindow]) -> Result<Self> {
        let shape = windows.first().map(ContextWindow::shape).ok_or(Error::EmptyCorpus)?;
        if windows.iter().any(|w| w.shape() != shape) {
            return Err(Error::ShapeMismatch("windows of different shapes".into()));
        }
        let measures: Vec<FrameSequence> = windows.iter().flat_map(|w| w.measures().copied()).collect();
        let chunks = measures
            .chunks(EVAL_CHUNK * 4)
            .map(|c| Ok(vae.encode_means(c)?.detach()))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.len();
        let latents = Tensor::cat(&chunks, 0)?.reshape((windows.len(), n, crate::vae::LATENT_DIM))?;
        let missing: Vec<FrameSequence> = windows.iter().flat_map(|w| w.missing.iter().copied()).collect();
        let frames = vae
            .frame_tensor(&missing)?
            .reshape((windows.len(), shape.missing, crate::codec::FRAMES_PER_MEASURE))?;
        Ok(Self { shape, latents, frames })
    }

    pub fn len(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> Vec<MaskRole> {
        window_mask(self.shape)
    }

    fn select(&self, idx: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.latents.index_select(idx, 0)?, self.frames.index_select(idx, 0)?))
    }

    fn chunk(&self, start: usize, len: usize) -> Result<(Tensor, Tensor)> {
        Ok((self.latents.narrow(0, start, len)?, self.frames.narrow(0, start, len)?))
    }

    fn missing(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.narrow(1, self.shape.past, self.shape.missing)?)
    }

    fn past(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.narrow(1, 0, self.shape.past)?)
    }

    fn future(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.narrow(1, self.shape.past + self.shape.missing, self.shape.future)?)
    }
}

pub fn window_mask(shape: WindowShape) -> Vec<MaskRole> {
    let mut mask = vec![MaskRole::Past; shape.past];
    mask.extend(std::iter::repeat_n(MaskRole::Missing, shape.missing));
    mask.extend(std::iter::repeat_n(MaskRole::Future, shape.future));
    mask
}

/// Free-running decode accuracy of `(b, n_m, 256)` latents against `(b, n_m, 24)` frames.
fn latent_accuracy(latents: &Tensor, frames: &Tensor, vae: &SketchVae) -> Result<f64> {
    let (b, n, d) = latents.dims3()?;
    let decoded = vae.decode(&latents.reshape((b * n, d))?, None)?;
    token_accuracy(&decoded.tokens, &frames.reshape((b * n, crate::codec::FRAMES_PER_MEASURE))?)
}

/// Free-running stage-I predictions for every window of the bank, detached.
pub fn cached_predictions(inpainter: &SketchInpainter, bank: &WindowBank) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < bank.len() {
        let len = EVAL_CHUNK.min(bank.len() - start);
        let (latents, _) = bank.chunk(start, len)?;
        let pred = inpainter.predict(&LatentSequence {
            latents,
            mask: bank.mask(),
        })?;
        parts.push(pred.latents()?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn fit_inpainter(
    vae: &SketchVae,
    frozen: &[(Stage, &ParamStore)],
    train: &WindowBank,
    validation: &WindowBank,
    cfg: &TrainConfig,
    mut log: RunLog,
) -> Result<Trained<SketchInpainter>> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::TooFewWindows { needed: 1, got: 0 });
    }
    let before: BTreeMap<Stage, String> = frozen.iter().map(|(s, p)| Ok((*s, p.fingerprint()?))).collect::<Result<_>>()?;
    log.push(RunRecord::Config {
        stage: Stage::Inpainter,
        config: cfg.clone(),
        train_items: train.len(),
        validation_items: validation.len(),
    })?;
    let mut store = ParamStore::random(DType::F32, cfg.seed);
    let model = SketchInpainter::new(&cfg.inpainter, &mut store)?;
    let mut trainer = Trainer::new(&store, cfg)?;
    let mut order_rng = stream(cfg.seed, 1);
    let mut teacher_rng = stream(cfg.seed, 2);
    let mask = train.mask();

    let train_epoch = |epoch: usize| -> Result<EpochStats> {
        let (mut loss_sum, mut norm_sum, mut n) = (0.0, 0.0, 0usize);
        for idx in batches(train.len(), cfg.window_batch_size, &mut order_rng) {
            let (latents, frames) = train.select(&Tensor::new(idx.as_slice(), vae.device())?)?;
            let truth = train.missing(&latents)?;
            let state = model.encode_context(&LatentSequence {
                latents,
                mask: mask.clone(),
            })?;
            let pred = model.predict_missing(
                &state,
                train.shape.missing,
                StepInput::Teacher {
                    truth: &truth,
                    ratio: cfg.teacher_ratio,
                    rng: &mut teacher_rng,
                },
            )?;
            let loss = stage1_loss(&pred, &frames, vae)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            norm_sum += trainer.step(&loss)?;
            loss_sum += value;
            n += 1;
        }
        Ok(EpochStats {
            loss: loss_sum / n as f64,
            accuracy: None,
            grad_norm: norm_sum / n as f64,
            kl_weight: None,
            unmask_rate: None,
        })
    };
    let validate = || -> Result<(f64, Option<f64>)> {
        let preds = cached_predictions(&model, validation)?;
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        let mut start = 0;
        while start < validation.len() {
            let len = EVAL_CHUNK.min(validation.len() - start);
            let (_, frames) = validation.chunk(start, len)?;
            let p = preds.narrow(0, start, len)?;
            let half = crate::vae::LATENT_HALF;
            let pred = InpaintPrediction {
                pitch: p.narrow(2, 0, half)?,
                rhythm: p.narrow(2, half, half)?,
            };
            loss_sum += scalar(&stage1_loss(&pred, &frames, vae)?)? * len as f64;
            acc_sum += latent_accuracy(&p, &frames, vae)? * len as f64;
            start += len;
        }
        let n = validation.len() as f64;
        Ok((loss_sum / n, Some(acc_sum / n)))
    };
    let fitted = fit_loop(cfg, &store, &mut log, train_epoch, validate)?;
    let frozen_after = frozen_checks(frozen, &before)?;
    finish(Stage::Inpainter, model, store, cfg, fitted, before, frozen_after, log)
}

pub fn fit_connector(
    vae: &SketchVae,
    inpainter: &SketchInpainter,
    frozen: &[(Stage, &ParamStore)],
    train: &WindowBank,
    validation: &WindowBank,
    cfg: &TrainConfig,
    mut log: RunLog,
) -> Result<Trained<SketchConnector>> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::TooFewWindows { needed: 1, got: 0 });
    }
    let before: BTreeMap<Stage, String> = frozen.iter().map(|(s, p)| Ok((*s, p.fingerprint()?))).collect::<Result<_>>()?;
    log.push(RunRecord::Config {
        stage: Stage::Connector,
        config: cfg.clone(),
        train_items: train.len(),
        validation_items: validation.len(),
    })?;
    let train_pred = cached_predictions(inpainter, train)?;
    let val_pred = cached_predictions(inpainter, validation)?;
    let mut store = ParamStore::random(DType::F32, cfg.seed);
    let model = SketchConnector::new(&cfg.connector, &mut store)?;
    let mut trainer = Trainer::new(&store, cfg)?;
    let mut order_rng = stream(cfg.seed, 1);
    let mut unmask_rng = stream(cfg.seed, 2);

    let train_epoch = |epoch: usize| -> Result<EpochStats> {
        let (mut loss_sum, mut norm_sum, mut n) = (0.0, 0.0, 0usize);
        let (mut unmasked, mut positions) = (0.0, 0usize);
        for idx in batches(train.len(), cfg.window_batch_size, &mut order_rng) {
            let idx = Tensor::new(idx.as_slice(), vae.device())?;
            let (latents, frames) = train.select(&idx)?;
            let predicted = train_pred.index_select(&idx, 0)?;
            let (fused, record) = random_unmask(
                &predicted,
                &train.missing(&latents)?,
                cfg.connector.unmask_rate,
                cfg.connector.unmask_mode,
                &mut unmask_rng,
            )?;
            unmasked += record.unmasked_fraction() * record.flags.len() as f64;
            positions += record.flags.len();
            let out = model.connect(&train.past(&latents)?, &fused, &train.future(&latents)?)?;
            let loss = stage2_loss(&out, &frames, vae)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            norm_sum += trainer.step(&loss)?;
            loss_sum += value;
            n += 1;
        }
        Ok(EpochStats {
            loss: loss_sum / n as f64,
            accuracy: None,
            grad_norm: norm_sum / n as f64,
            kl_weight: None,
            unmask_rate: Some(unmasked / positions as f64),
        })
    };
    let validate = || -> Result<(f64, Option<f64>)> {
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        let mut start = 0;
        while start < validation.len() {
            let len = EVAL_CHUNK.min(validation.len() - start);
            let (latents, frames) = validation.chunk(start, len)?;
            let fused = val_pred.narrow(0, start, len)?;
            let out = model.connect(&validation.past(&latents)?, &fused, &validation.future(&latents)?)?;
            loss_sum += scalar(&stage2_loss(&out, &frames, vae)?)? * len as f64;
            acc_sum += latent_accuracy(&out, &frames, vae)? * len as f64;
            start += len;
        }
        let n = validation.len() as f64;
        Ok((loss_sum / n, Some(acc_sum / n)))
    };
    let fitted = fit_loop(cfg, &store, &mut log, train_epoch, validate)?;
    let frozen_after = frozen_checks(frozen, &before)?;
    finish(Stage::Connector, model, store, cfg, fitted, before, frozen_after, log)
}

/// Training and validation windows for stages I and II.
pub fn stage_windows(corpus: &Corpus, manifest: &SplitManifest, cfg: &TrainConfig) -> (Vec<ContextWindow>, Vec<ContextWindow>) {
    let (fit_ids, val_ids) = training_split(manifest, cfg);
    let windows = |ids: &[String]| -> Vec<ContextWindow> {
        corpus
            .select(ids)
            .flat_map(|m| make_windows(m, manifest.window, cfg.train_stride))
            .collect()
    };
    let mut rng = stream(cfg.seed, 4);
    let train = capped(windows(&fit_ids), cfg.max_windows, &mut rng);
    let validation = capped(windows(&val_ids), cfg.max_windows.map(|n| n.div_ceil(4)), &mut rng);
    let validation = or_fallback(validation, &train, "windows");
    (train, validation)
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.as_str())
}

/// Trains one stage from a preprocessed corpus directory, reading upstream
/// checkpoints from and writing the new one to `out/<stage>/`.
pub fn run_stage(stage: Stage, data_dir: &Path, out: &Path, cfg: &TrainConfig) -> Result<CheckpointMeta> {
    cfg.validate()?;
    let (corpus, manifest) = load_corpus_dir(data_dir)?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dir = stage_dir(out, stage);
    fs::create_dir_all(&dir)?;
    let log = RunLog::to_file(&dir.join(RUN_LOG_FILE))?;
    let meta = match stage {
        Stage::Vae => {
            let t = train_vae(&corpus, &manifest, cfg, log)?;
            save_checkpoint(&dir, &t.store, &t.meta)?;
            t.meta
        }
        Stage::Inpainter => {
            let vae = checkpoint::load_vae(&stage_dir(out, Stage::Vae))?;
            let (train, val) = stage_windows(&corpus, &manifest, cfg);
            let tb = WindowBank::build(&vae.model, &train)?;
            let vb = WindowBank::build(&vae.model, &val)?;
            let t = fit_inpainter(&vae.model, &[(Stage::Vae, &vae.store)], &tb, &vb, cfg, log)?;
            save_checkpoint(&dir, &t.store, &t.meta)?;
            t.meta
        }
        Stage::Connector => {
            let vae = checkpoint::load_vae(&stage_dir(out, Stage::Vae))?;
            let inp = checkpoint::load_inpainter(&stage_dir(out, Stage::Inpainter), &vae.meta.id)?;
            let (train, val) = stage_windows(&corpus, &manifest, cfg);
            let tb = WindowBank::build(&vae.model, &train)?;
            let vb = WindowBank::build(&vae.model, &val)?;
            let frozen = [(Stage::Vae, &vae.store), (Stage::Inpainter, &inp.store)];
            let t = fit_connector(&vae.model, &inp.model, &frozen, &tb, &vb, cfg, log)?;
            save_checkpoint(&dir, &t.store, &t.meta)?;
            t.meta
        }
    };
    info!("{stage} checkpoint {} (best epoch {})", meta.id, meta.best_epoch);
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::abc::parse_tune;
    use crate::dataset::synth::{toy_tune, TuneFamily};
    use crate::inpainter::InpainterConfig;
    use crate::vae::VaeConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            measure_batch_size: 16,
            window_batch_size: 8,
            max_epochs: 3,
            patience: 2,
            vae: VaeConfig {
                embed_dim: 8,
                encoder_hidden: 16,
                beat_hidden: 16,
                tick_hidden: 16,
            },
            inpainter: InpainterConfig { hidden: 16, layers: 1 },
            connector: crate::connector::ConnectorConfig {
                layers: 1,
                heads: 4,
                feed_forward: 16,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn measures(n: usize) -> Vec<FrameSequence> {
        let mut rng = seeded_rng(1);
        let m = parse_tune(&toy_tune(1, 32, TuneFamily::Through, &mut rng)).unwrap();
        m.measures.into_iter().cycle().take(n).collect()
    }

    #[test]
    fn vae_run_logs_every_epoch_and_is_reproducible() {
        let data = measures(48);
        let a = fit_vae(&data[..40], &data[40..], &tiny(), RunLog::in_memory()).unwrap();
        let b = fit_vae(&data[..40], &data[40..], &tiny(), RunLog::in_memory()).unwrap();
        let curve = |t: &Trained<SketchVae>| t.log.epochs().map(|e| (e.train_loss, e.validation_loss)).collect::<Vec<_>>();
        assert_eq!(curve(&a), curve(&b));
        assert_eq!(a.meta.id, b.meta.id);
        assert_eq!(a.log.epochs().next().unwrap().epoch, 0);
        assert!(matches!(a.log.records()[0], RunRecord::Config { .. }));
        assert!(matches!(a.log.records().last().unwrap(), RunRecord::Checkpoint { .. }));
        let best = a.log.epochs().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.meta.validation_loss, best);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            max_epochs: 30,
            patience: 2,
            ..tiny()
        };
        let data = measures(24);
        match fit_vae(&data[..16], &data[16..], &cfg, RunLog::in_memory()) {
            Ok(t) => {
                let last = t.log.epochs().last().unwrap().epoch;
                assert!(last <= t.meta.best_epoch + cfg.patience);
            }
            Err(e) => assert!(matches!(e, Error::Divergence { .. }), "{e}"),
        }
    }

    #[test]
    fn stages_keep_upstream_frozen() {
        let cfg = TrainConfig { max_epochs: 1, ..tiny() };
        let data = measures(64);
        let vae = fit_vae(&data[..48], &data[48..], &cfg, RunLog::in_memory()).unwrap();
        let tensors = vae.store.named_tensors().into_iter().collect();
        let mut frozen = ParamStore::from_tensors(tensors, DType::F32, false).unwrap();
        let frozen_vae = SketchVae::new(&cfg.vae, &mut frozen).unwrap();

        let melody = crate::codec::melody::Melody::new("m", Default::default(), data.clone()).unwrap();
        let windows = make_windows(&melody, WindowShape::default(), 4);
        let bank = WindowBank::build(&frozen_vae, &windows).unwrap();
        assert_eq!(bank.latents.dims(), &[windows.len(), 16, 256]);

        let inp = fit_inpainter(&frozen_vae, &[(Stage::Vae, &frozen)], &bank, &bank, &cfg, RunLog::in_memory()).unwrap();
        assert!(inp.frozen[&Stage::Vae].unchanged());
        assert_eq!(inp.frozen[&Stage::Vae].before, vae.meta.id);
        assert_eq!(inp.meta.upstream[&Stage::Vae], vae.meta.id);

        let conn = fit_connector(&frozen_vae, &inp.model, &[(Stage::Vae, &frozen), (Stage::Inpainter, &inp.store)], &bank, &bank, &cfg, RunLog::in_memory()).unwrap();
        assert!(conn.frozen.values().all(FrozenCheck::unchanged));
        let rate = conn.log.epochs().filter_map(|e| e.unmask_rate).next().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn run_log_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RUN_LOG_FILE);
        let mut log = RunLog::to_file(&path).unwrap();
        log.push(RunRecord::Epoch(EpochRecord {
            epoch: 0,
            validation_loss: 1.5,
            ..Default::default()
        }))
        .unwrap();
        assert_eq!(RunLog::read(&path).unwrap(), log.records());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(fit_vae(&[], &measures(2), &tiny(), RunLog::in_memory()), Err(Error::EmptyCorpus)));
    }
}
