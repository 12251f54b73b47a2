//! Trainable building blocks: fully-connected layers, GRU cells, the learned
//! scalar codebook, the parameter store with Adam state, and the binary
//! parameter file.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

pub const PARAM_MAGIC: &[u8; 8] = b"FRAEPARM";
pub const PARAM_VERSION: u16 = 1;

const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Rounds every value to the nearest `f32`, the storage precision of
/// parameter files.
pub fn round_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors with per-parameter Adam moments.
///
/// Names iterate in sorted order, which fixes the on-disk layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: BTreeMap<String, Param>,
    step: u64,
}

/// Tape handles for every parameter of a [`ModelParams`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| NnError::MissingParam(name.to_string()))
    }
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n = value.numel();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients found on `tape` into the parameter gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, p) in self.params.iter_mut() {
            let Some(var) = bound.vars.get(name) else { continue };
            let Some(g) = tape.grad(*var) else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Vec<f64>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if grad.len() != p.value.numel() {
            return Err(NnError::ParamShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: vec![grad.len()],
            });
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update over every parameter that has a
    /// gradient, then clears gradients. Values and moments are kept at
    /// `f32` precision so checkpoints restore exactly.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::NonFiniteGradient(name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let Some(g) = p.grad.take() else { continue };
            let value = p.value.data_mut();
            for i in 0..g.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / c1;
                let v_hat = p.v[i] / c2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            round_f32(value);
            round_f32(&mut p.m);
            round_f32(&mut p.v);
        }
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.value)
    }

    /// Serializes parameters, optionally with Adam moments and step count.
    pub fn to_bytes(&self, with_optimizer: bool) -> Vec<u8> {
        self.to_bytes_with(&[], with_optimizer)
    }

    /// Like [`ModelParams::to_bytes`], with untrained `extra` tensors stored
    /// alongside the parameters (sorted together by name).
    pub fn to_bytes_with(&self, extra: &[(String, Tensor)], with_optimizer: bool) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let step = [self.step as f64];
        for (name, p) in &self.params {
            entries.push((name.clone(), p.value.shape().to_vec(), p.value.data()));
        }
        for (name, t) in extra {
            entries.push((name.clone(), t.shape().to_vec(), t.data()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if with_optimizer {
            for (name, p) in &self.params {
                entries.push((format!("{ADAM_M_PREFIX}{name}"), p.value.shape().to_vec(), &p.m));
                entries.push((format!("{ADAM_V_PREFIX}{name}"), p.value.shape().to_vec(), &p.v));
            }
            entries.push((ADAM_STEP.to_string(), vec![1], &step));
        }
        write_param_file(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = read_param_file(bytes)?;
        let mut params = ModelParams::new();
        let mut moments = Vec::new();
        for (name, tensor) in entries {
            if name == ADAM_STEP {
                params.step = tensor.item() as u64;
            } else if name.starts_with(ADAM_M_PREFIX) || name.starts_with(ADAM_V_PREFIX) {
                moments.push((name, tensor));
            } else {
                params.insert(&name, tensor)?;
            }
        }
        for (name, tensor) in moments {
            let (is_m, base) = match name.strip_prefix(ADAM_M_PREFIX) {
                Some(b) => (true, b),
                None => (false, &name[ADAM_V_PREFIX.len()..]),
            };
            let p = params
                .params
                .get_mut(base)
                .ok_or_else(|| NnError::Format(format!("moment for unknown parameter {base}")))?;
            if tensor.numel() != p.value.numel() {
                return Err(NnError::Format(format!("moment size mismatch for {base}")));
            }
            if is_m {
                p.m = tensor.into_data();
            } else {
                p.v = tensor.into_data();
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(with_optimizer))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        ModelParams::from_bytes(&bytes)
    }

    /// Stable 64-bit fingerprint of the parameter values (optimizer state
    /// excluded).
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes(false));
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

fn write_param_file(entries: &[(String, Vec<usize>, &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in *data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_param_file(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != PARAM_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = c.u16()?;
    if version != PARAM_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| NnError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| NnError::Format(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    if c.pos != bytes.len() {
        return Err(NnError::Format("trailing bytes".into()));
    }
    Ok(out)
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

/// `y = activation(x·W + b)` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / (self.in_dim + self.out_dim) as f64).sqrt();
        params.insert(&self.weight_name(), uniform_tensor(rng, &[self.in_dim, self.out_dim], bound))?;
        params.insert(&self.bias_name(), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(AutodiffError::Shape {
                op: "fc_forward",
                shapes: vec![tape.shape(x).to_vec(), vec![self.in_dim, self.out_dim]],
            }
            .into());
        }
        let xw = tape.matmul(x, bound.var(&self.weight_name())?)?;
        let y = tape.add_bias(xw, bound.var(&self.bias_name())?)?;
        Ok(match self.activation {
            Activation::Linear => y,
            Activation::Tanh => tape.tanh(y),
        })
    }
}

/// Gated recurrent unit with fused gate matrices (gate order: reset,
/// update, candidate).
///
/// ```text
/// r  = σ(x·Wx_r + bx_r + h·Wh_r + bh_r)
/// z  = σ(x·Wx_z + bx_z + h·Wh_z + bh_z)
/// n  = tanh(x·Wx_n + bx_n + r ⊙ (h·Wh_n + bh_n))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            name: name.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn param_names(&self) -> [String; 4] {
        ["wx", "bx", "wh", "bh"].map(|s| format!("{}.{s}", self.name))
    }

    pub fn init(&self, params: &mut ModelParams, rng: &mut impl Rng) -> Result<()> {
        let h = self.hidden_dim;
        let bound = 1.0 / (h as f64).sqrt();
        let [wx, bx, wh, bh] = self.param_names();
        params.insert(&wx, uniform_tensor(rng, &[self.input_dim, 3 * h], bound))?;
        params.insert(&bx, uniform_tensor(rng, &[3 * h], bound))?;
        params.insert(&wh, uniform_tensor(rng, &[h, 3 * h], bound))?;
        params.insert(&bh, uniform_tensor(rng, &[3 * h], bound))
    }

    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h_prev: Var) -> Result<Var> {
        let h = self.hidden_dim;
        let x_ok = tape.value(x).cols() == self.input_dim;
        let h_ok = tape.value(h_prev).cols() == h && tape.value(h_prev).rows() == tape.value(x).rows();
        if !x_ok || !h_ok {
            return Err(AutodiffError::Shape {
                op: "gru_step",
                shapes: vec![tape.shape(x).to_vec(), tape.shape(h_prev).to_vec()],
            }
            .into());
        }
        let [wx, bx, wh, bh] = self.param_names();
        let gx = tape.matmul(x, bound.var(&wx)?)?;
        let gx = tape.add_bias(gx, bound.var(&bx)?)?;
        let gh = tape.matmul(h_prev, bound.var(&wh)?)?;
        let gh = tape.add_bias(gh, bound.var(&bh)?)?;

        let gx_rz = tape.slice(gx, 0, 2 * h)?;
        let gh_rz = tape.slice(gh, 0, 2 * h)?;
        let rz = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice(rz, 0, h)?;
        let z = tape.slice(rz, h, 2 * h)?;

        let gx_n = tape.slice(gx, 2 * h, 3 * h)?;
        let gh_n = tape.slice(gh, 2 * h, 3 * h)?;
        let rn = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, rn)?;
        let n = tape.tanh(n);

        let diff = tape.sub(h_prev, n)?;
        let gated = tape.mul(z, diff)?;
        Ok(tape.add(n, gated)?)
    }
}

/// Per-dimension scalar codebook `[D × K]`, quantizing each latent
/// dimension independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub name: String,
    pub dim: usize,
    pub levels: usize,
}

impl Codebook {
    pub fn new(name: &str, dim: usize, levels: usize) -> Self {
        Codebook {
            name: name.to_string(),
            dim,
            levels,
        }
    }

    /// Entries uniformly spaced over `[-1, 1]` in every dimension.
    pub fn initial_entries(dim: usize, levels: usize) -> Tensor {
        let row: Vec<f64> = (0..levels)
            .map(|k| {
                if levels == 1 {
                    0.0
                } else {
                    (-1.0 + 2.0 * k as f64 / (levels - 1) as f64) as f32 as f64
                }
            })
            .collect();
        let data = (0..dim).flat_map(|_| row.iter().copied()).collect();
        Tensor::new(vec![dim, levels], data).expect("non-empty codebook")
    }

    pub fn init(&self, params: &mut ModelParams) -> Result<()> {
        params.insert(&self.name, Codebook::initial_entries(self.dim, self.levels))
    }

    /// Nearest-entry indices and dequantized values for `y: [B × D]`.
    pub fn quantize(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<(Var, Vec<usize>)> {
        Ok(tape.quantize(y, bound.var(&self.name)?)?)
    }

    pub fn dequantize(&self, tape: &mut Tape, bound: &Bound, indices: &[usize]) -> Result<Var> {
        Ok(tape.gather(bound.var(&self.name)?, indices)?)
    }

    /// Bits per frame when every index is sent with a fixed-length code.
    pub fn fixed_bits_per_frame(&self) -> f64 {
        self.dim as f64 * (self.levels as f64).log2()
    }
}
