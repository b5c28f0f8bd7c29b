//! Small neural building blocks on top of `candle_core` tensors.
//!
//! Parameters live in a [`ParamStore`] that is either trainable (every tensor
//! is a `Var`, visible to the optimizer) or frozen (plain tensors, so no
//! gradient is ever recorded for them). Initialization draws from the store's
//! seeded generator, which makes model construction reproducible.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type ModelRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

enum Slot {
    Trainable(Var),
    Frozen(Tensor),
}

impl Slot {
    fn tensor(&self) -> Tensor {
        match self {
            Slot::Trainable(v) => v.as_tensor().clone(),
            Slot::Frozen(t) => t.clone(),
        }
    }
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ModelRng,
    trainable: bool,
    source: Option<HashMap<String, Tensor>>,
    slots: BTreeMap<String, Slot>,
    prefix: Vec<String>,
}

impl ParamStore {
    /// Fresh, randomly initialized, trainable parameters.
    pub fn random(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: seeded_rng(seed),
            trainable: true,
            source: None,
            slots: BTreeMap::new(),
            prefix: Vec::new(),
        }
    }

    /// Parameters read from a safetensors file. Frozen stores never produce gradients.
    pub fn load(path: &Path, dtype: DType, trainable: bool) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        Self::from_tensors(tensors, dtype, trainable)
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, trainable: bool) -> Result<Self> {
        Ok(Self {
            dtype,
            device: Device::Cpu,
            rng: seeded_rng(0),
            trainable,
            source: Some(tensors),
            slots: BTreeMap::new(),
            prefix: Vec::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Runs `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.slots.contains_key(&full) {
            return Err(Error::Config(format!("parameter {full} registered twice")));
        }
        let value = match &self.source {
            Some(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {full}")))?;
                if t.dims() != shape {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {full} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
            None => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
                    Init::Normal(std) => (0..n)
                        .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        let slot = if self.trainable {
            Slot::Trainable(Var::from_tensor(&value)?)
        } else {
            Slot::Frozen(value.detach())
        };
        let tensor = slot.tensor();
        self.slots.insert(full, slot);
        Ok(tensor)
    }

    /// A free-standing learned tensor with small Gaussian initialization.
    pub fn learned(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.param(name, shape, Init::Normal(0.1))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.slots
            .values()
            .filter_map(|s| match s {
                Slot::Trainable(v) => Some(v.clone()),
                Slot::Frozen(_) => None,
            })
            .collect()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.slots.iter().map(|(k, s)| (k.clone(), s.tensor())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.values().map(|s| s.tensor().elem_count()).sum()
    }

    /// Overwrites every parameter with the given values (used to restore the best epoch).
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in &self.slots {
            let Slot::Trainable(var) = slot else {
                return Err(Error::Config(format!("cannot assign frozen parameter {name}")));
            };
            let v = values
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter {name}")))?;
            var.set(v)?;
        }
        Ok(())
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.slots
            .iter()
            .map(|(k, s)| Ok((k.clone(), s.tensor().copy()?.detach())))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .slots
            .iter()
            .map(|(k, s)| Ok((k.clone(), s.tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and f32 values, in name order.
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(&self.named_tensors())
    }
}

pub fn fingerprint(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.param("weight", &[output, input], Init::Uniform(bound))?,
                bias: ps.param("bias", &[output], Init::Uniform(bound))?,
            })
        })
    }

    /// Zero weight and bias: the layer starts out as the constant 0.
    pub fn zeros(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.param("weight", &[output, input], Init::Zeros)?,
                bias: ps.param("bias", &[output], Init::Zeros)?,
            })
        })
    }

    /// Accepts `(.., input)` of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.weight.t()?)?,
            _ => x.broadcast_matmul(&self.weight.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                table: ps.param("table", &[vocab, dim], Init::Normal(1.0))?,
                dim,
            })
        })
    }

    /// `ids` is a `u32` tensor of any shape; output appends the embedding dimension.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut shape = ids.dims().to_vec();
        shape.push(self.dim);
        let flat = ids.flatten_all()?;
        Ok(self.table.index_select(&flat, 0)?.reshape(shape)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                gamma: ps.param("gamma", &[dim], Init::Ones)?,
                beta: ps.param("beta", &[dim], Init::Zeros)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Single GRU layer with PyTorch gate layout `[reset, update, new]`.
///
/// Input projections are split from the recurrence so callers can project a
/// whole sequence with one matmul and feed per-step slices to [`Gru::step`].
#[derive(Clone, Debug)]
pub struct Gru {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    hidden: usize,
}

impl Gru {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                w_ih: ps.param("w_ih", &[3 * hidden, input], Init::Uniform(bound))?,
                w_hh: ps.param("w_hh", &[3 * hidden, hidden], Init::Uniform(bound))?,
                b_ih: ps.param("b_ih", &[3 * hidden], Init::Uniform(bound))?,
                b_hh: ps.param("b_hh", &[3 * hidden], Init::Uniform(bound))?,
                hidden,
            })
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `(.., input)` → `(.., 3·hidden)`.
    pub fn project_input(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.rank() {
            2 => x.matmul(&self.w_ih.t()?)?,
            _ => x.broadcast_matmul(&self.w_ih.t()?)?,
        };
        Ok(y.broadcast_add(&self.b_ih)?)
    }

    /// One recurrence step from a pre-projected input `(b, 3·hidden)`.
    pub fn step(&self, gi: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hd = self.hidden;
        let gh = h.matmul(&self.w_hh.t()?)?.broadcast_add(&self.b_hh)?;
        let r = sigmoid(&(gi.narrow(1, 0, hd)? + gh.narrow(1, 0, hd)?)?)?;
        let z = sigmoid(&(gi.narrow(1, hd, hd)? + gh.narrow(1, hd, hd)?)?)?;
        let n = (gi.narrow(1, 2 * hd, hd)? + (r * gh.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
        // h' = n + z ⊙ (h − n)
        Ok((&n + (z * (h - &n)?)?)?)
    }

    /// Runs over `(b, t, input)`; returns per-step outputs `(b, t, hidden)` and the final state.
    pub fn run(&self, x: &Tensor, h0: &Tensor, reverse: bool) -> Result<(Tensor, Tensor)> {
        let steps = x.dim(1)?;
        let gi = self.project_input(x)?;
        let mut h = h0.clone();
        let mut outputs = vec![None; steps];
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            h = self.step(&gi.narrow(1, t, 1)?.squeeze(1)?, &h)?;
            outputs[t] = Some(h.clone());
        }
        let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step ran")).collect();
        Ok((Tensor::stack(&outputs, 1)?, h))
    }

    pub fn zero_state(&self, batch: usize, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.hidden), x.dtype(), x.device())?)
    }
}

/// Stacked GRU layers; the state is one tensor per layer.
#[derive(Clone, Debug)]
pub struct StackedGru {
    layers: Vec<Gru>,
}

impl StackedGru {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            let layers = (0..layers.max(1))
                .map(|l| Gru::new(ps, &format!("l{l}"), if l == 0 { input } else { hidden }, hidden))
                .collect::<Result<_>>()?;
            Ok(Self { layers })
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    /// Final state of every layer after running over `(b, t, input)`.
    pub fn run(&self, x: &Tensor, reverse: bool) -> Result<Vec<Tensor>> {
        let batch = x.dim(0)?;
        let mut input = x.clone();
        let mut finals = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let h0 = layer.zero_state(batch, x)?;
            let (out, last) = layer.run(&input, &h0, reverse)?;
            finals.push(last);
            if i + 1 < self.layers.len() {
                input = out;
            }
        }
        Ok(finals)
    }

    /// One step through all layers; returns the top-layer output.
    pub fn step(&self, x: &Tensor, state: &mut [Tensor]) -> Result<Tensor> {
        let mut input = x.clone();
        for (layer, h) in self.layers.iter().zip(state.iter_mut()) {
            *h = layer.step(&layer.project_input(&input)?, h)?;
            input = h.clone();
        }
        Ok(input)
    }
}

/// Mean categorical cross-entropy. `logits` is `(n, classes)`, `targets` is `u32` `(n,)`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let picked = log_probs.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Standard-normal noise of the given shape from a seeded generator.
pub fn normal_noise(rng: &mut ModelRng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Global-norm gradient clipping over the given variables; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.get(v) {
                let scaled = (g * scale)?;
                grads.insert(v, scaled);
            }
        }
    }
    Ok(norm)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
