//! Small fully-connected networks on top of the [`autodiff`](crate::autodiff)
//! tape, their parameter storage, SGD, checkpoints and a finite-difference
//! gradient checker.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Rectifier,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Chain of dense layers over `dims`; every layer but the last uses
    /// `hidden`, the last uses `last`.
    pub fn mlp(name: &str, dims: &[usize], hidden: Activation, last: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                input_dim: dims[i],
                output_dim: dims[i + 1],
                activation: if i + 1 == n { last } else { hidden },
                dropout: 0.0,
            })
            .collect();
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        let n = self.layers.len();
        for layer in self.layers.iter_mut().take(n.saturating_sub(1)) {
            layer.dropout = rate;
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter(format!("network {} has no layers", self.name)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(Error::Parameter(format!("{}: layer {i} has a zero dim", self.name)));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return Err(Error::Parameter(format!(
                    "{}: layer {i} dropout {} outside [0, 1)",
                    self.name, layer.dropout
                )));
            }
            if layer.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(Error::Parameter(format!(
                    "{}: softmax only allowed on the final layer",
                    self.name
                )));
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.input_dim != layer.output_dim {
                    return Err(Error::Parameter(format!(
                        "{}: layer {i} outputs {} but layer {} expects {}",
                        self.name,
                        layer.output_dim,
                        i + 1,
                        next.input_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn total_size(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Records every tensor on `tape` as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Registers `spec`'s weights (`in × out`) and biases (`1 × out`),
    /// drawn uniformly from `±1/√fan_in`.
    pub fn init_network(&mut self, spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Network> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let bound = 1.0 / (layer.input_dim as f64).sqrt();
            let w = Array2::from_shape_fn((layer.input_dim, layer.output_dim), |_| {
                rng.random_range(-bound..=bound)
            });
            let b = Array2::from_shape_fn((1, layer.output_dim), |_| rng.random_range(-bound..=bound));
            let wi = self.insert(format!("{}.{i}.weight", spec.name), w);
            let bi = self.insert(format!("{}.{i}.bias", spec.name), b);
            layers.push((wi, bi));
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }
}

/// A network spec plus the ids of its tensors inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<(usize, usize)>,
}

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Network {
    /// Rebuilds the id mapping for a spec whose tensors already live in
    /// `params` (e.g. after loading a checkpoint).
    pub fn attach(spec: &NetworkSpec, params: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let find = |suffix: &str, shape: (usize, usize)| -> Result<usize> {
                let name = format!("{}.{i}.{suffix}", spec.name);
                let id = params
                    .id(&name)
                    .ok_or_else(|| Error::Parameter(format!("missing tensor {name}")))?;
                if params.values[id].dim() != shape {
                    return Err(Error::Parameter(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        params.values[id].dim()
                    )));
                }
                Ok(id)
            };
            layers.push((
                find("weight", (layer.input_dim, layer.output_dim))?,
                find("bias", (1, layer.output_dim))?,
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Records the forward pass on `tape`. With `final_activation = false`
    /// the last layer's pre-activation (logits) is returned.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: &mut Mode<'_>,
        final_activation: bool,
    ) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, (layer, &(wi, bi))) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let z = tape.matmul(h, vars[wi]);
            let z = tape.add_row(z, vars[bi]);
            let last = i + 1 == n;
            h = if last && !final_activation {
                z
            } else {
                match layer.activation {
                    Activation::Identity => z,
                    Activation::Rectifier => tape.relu(z),
                    Activation::Sigmoid => tape.sigmoid(z),
                    Activation::Softmax => tape.softmax_rows(z),
                }
            };
            if layer.dropout > 0.0 {
                if let Mode::Train(rng) = mode {
                    let keep = 1.0 - layer.dropout;
                    let mask = Array2::from_shape_fn(tape.shape(h), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let mask = tape.constant(mask);
                    h = tape.mul(h, mask);
                }
            }
        }
        h
    }

    /// Eval-mode forward pass outside any training graph.
    pub fn forward(&self, params: &ParamStore, x: &Mat) -> Result<Mat> {
        self.forward_with(params, x, true)
    }

    pub fn forward_logits(&self, params: &ParamStore, x: &Mat) -> Result<Mat> {
        self.forward_with(params, x, false)
    }

    fn forward_with(&self, params: &ParamStore, x: &Mat, final_activation: bool) -> Result<Mat> {
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::Parameter(format!(
                "{}: input has {} columns, expected {}",
                self.spec.name,
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        let mut tape = Tape::new();
        let mut vars = vec![None; params.len()];
        for &(wi, bi) in &self.layers {
            vars[wi] = Some(tape.leaf(params.values[wi].clone()));
            vars[bi] = Some(tape.leaf(params.values[bi].clone()));
        }
        // Unused slots never get read; fill them with a dummy handle.
        let dummy = tape.constant(Mat::zeros((0, 0)));
        let vars: Vec<Var> = vars.into_iter().map(|v| v.unwrap_or(dummy)).collect();
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &vars, xv, &mut Mode::Eval, final_activation);
        let out = tape.value(out).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{}: non-finite forward output", self.spec.name)));
        }
        Ok(out)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Mat>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.values().iter().map(|m| Mat::zeros(m.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) {
        self.step_scaled(params, grads, lr, &[]);
    }

    /// As [`step`](Self::step) with a per-tensor learning-rate multiplier;
    /// tensors beyond `lr_mult.len()` use 1.
    pub fn step_scaled(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64, lr_mult: &[f64]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        for (i, ((p, g), v)) in params.values_mut().iter_mut().zip(grads).zip(&mut self.velocity).enumerate() {
            let mut d = g + &(&*p * self.weight_decay);
            d += &(&*v * self.momentum);
            *v = d;
            p.scaled_add(-lr * lr_mult.get(i).copied().unwrap_or(1.0), v);
        }
    }

    pub fn velocity(&self) -> &[Mat] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Mat>) {
        self.velocity = velocity;
    }
}

/// Maximum relative error `|analytic − fd| / (|analytic| + |fd| + 1e-12)`
/// over `samples` randomly chosen scalar parameters, using central
/// differences with step `epsilon`. `loss_fn` returns the loss and its
/// analytic gradient (one matrix per parameter tensor).
pub fn check_gradients<F>(
    mut loss_fn: F,
    params: &ParamStore,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<Mat>)>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let total = params.total_size();
    if total == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, samples.min(total));

    let mut flat_index = Vec::with_capacity(total);
    for (t, m) in params.values().iter().enumerate() {
        for e in 0..m.len() {
            flat_index.push((t, e));
        }
    }

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for pick in picks.iter() {
        let (t, e) = flat_index[pick];
        let cols = params.values()[t].ncols();
        let at = [e / cols, e % cols];
        let original = params.values()[t][at];
        let mut eval_at = |value: f64, probe: &mut ParamStore| -> Result<f64> {
            probe.values_mut()[t][at] = value;
            let (l, _) = loss_fn(probe)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss is {l} at perturbed point")));
            }
            Ok(l)
        };
        let plus = eval_at(original + epsilon, &mut probe)?;
        let minus = eval_at(original - epsilon, &mut probe)?;
        probe.values_mut()[t][at] = original;
        let fd = (plus - minus) / (2.0 * epsilon);
        let an = analytic[t][at];
        let rel = (an - fd).abs() / (an.abs() + fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GVIDACK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Writes `params` as: 8-byte magic, little-endian `u64` manifest length,
/// the JSON manifest (tensor names/shapes plus `meta`), then every tensor's
/// values as little-endian `f64` in row-major order.
pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        tensors: params
            .names()
            .iter()
            .zip(params.values())
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * params.total_size());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for m in params.values() {
        for v in m.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Format {
        row: 0,
        message: format!("{}: {msg}", path.display()),
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut offset = json_end;
    let mut params = ParamStore::new();
    for entry in manifest.tensors {
        let [r, c] = entry.shape;
        let n = r * c;
        if offset + 8 * n > bytes.len() {
            return Err(corrupt("truncated tensor data"));
        }
        let values: Vec<f64> = bytes[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        params.insert(entry.name, Array2::from_shape_vec((r, c), values).expect("sized"));
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok((params, manifest.meta))
}
