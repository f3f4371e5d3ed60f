use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of f64 with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Same length as `values`; empty when gradients are not tracked.
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                name: "tensor".into(),
                expected: shape.to_vec(),
                got: vec![values.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |k| &mut self.tensors[k])
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|x| x.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.values.iter_mut().for_each(|x| *x = value);
        }
    }

    /// Uniform initialisation in `±1/√fan_in`, with the fan-in taken as the
    /// last dimension of each weight and the bias' owning layer.
    pub fn init_uniform<R: Rng>(&mut self, fan_in: &[usize], rng: &mut R) {
        for (t, &fan) in self.tensors.iter_mut().zip(fan_in) {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            for x in &mut t.values {
                *x = rng.random_range(-bound..=bound);
            }
        }
    }

    /// Moves out every gradient buffer, leaving empty vectors behind.
    pub(crate) fn take_grads(&mut self) -> Vec<Vec<f64>> {
        self.tensors
            .iter_mut()
            .map(|t| {
                let n = t.values.len();
                let mut g = std::mem::take(&mut t.grad);
                if g.len() != n {
                    g = vec![0.0; n];
                }
                g
            })
            .collect()
    }

    pub(crate) fn restore_grads(&mut self, grads: Vec<Vec<f64>>) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.grad = g;
        }
    }

    fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ShapeMismatch {
                name: "parameter names".into(),
                expected: vec![self.len()],
                got: vec![other.len()],
            });
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: a.shape.clone(),
                    got: b.shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        soft_update(self, other, 1.0)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// `target ← τ·online + (1 − τ)·target`, elementwise.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::OutOfRange { what: "tau", value: tau });
    }
    target.check_compatible(online)?;
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        if tau == 1.0 {
            t.values.copy_from_slice(&o.values);
        } else if tau > 0.0 {
            for (x, &y) in t.values.iter_mut().zip(&o.values) {
                *x = tau * y + (1.0 - tau) * *x;
            }
        }
    }
    Ok(())
}

/// Adam optimiser state for one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// First and second moment estimates laid out like `like`.
    pub fn moments(&self, like: &ParamStore) -> Result<(ParamStore, ParamStore)> {
        let pack = |buf: &[Vec<f64>]| -> Result<ParamStore> {
            let mut out = ParamStore::new();
            for ((name, t), vals) in like.iter().zip(buf) {
                out.push(name, Tensor::from_values(&t.shape, vals.clone())?);
            }
            Ok(out)
        };
        if like.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                name: "optimizer moments".into(),
                expected: vec![self.m.len()],
                got: vec![like.len()],
            });
        }
        Ok((pack(&self.m)?, pack(&self.v)?))
    }

    /// Rebuilds optimiser state saved with [`Adam::moments`].
    pub fn from_moments(lr: f64, t: u64, m: &ParamStore, v: &ParamStore) -> Result<Self> {
        m.check_compatible(v)?;
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m: m.tensors.iter().map(|t| t.values.clone()).collect(),
            v: v.tensors.iter().map(|t| t.values.clone()).collect(),
        })
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, m), v) in params.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for k in 0..t.values.len() {
                let g = t.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                t.values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &str = "aim-morl-checkpoint 1";

/// Serialises named stores to a text container. Values use Rust's shortest
/// round-trip float formatting, so a save/load cycle is bit-exact.
pub fn write_checkpoint(stores: &[(&str, &ParamStore)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    for (store_name, store) in stores {
        let _ = writeln!(out, "store {store_name} {}", store.len());
        for (name, t) in store.iter() {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {name} {} {}", t.shape.len(), dims.join(" "));
            let vals: Vec<String> = t.values.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out
}

/// Parses a container written by [`write_checkpoint`].
pub fn read_checkpoint(text: &str) -> Result<Vec<(String, ParamStore)>> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(bad("missing header".into())),
    }
    let mut out = Vec::new();
    while let Some((ln, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 || f[0] != "store" {
            return Err(bad(format!("line {}: expected store header", ln + 1)));
        }
        let count: usize = f[2]
            .parse()
            .map_err(|_| bad(format!("line {}: bad tensor count", ln + 1)))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let (ln, head) = lines.next().ok_or_else(|| bad("truncated".into()))?;
            let h: Vec<&str> = head.split_whitespace().collect();
            if h.len() < 3 || h[0] != "param" {
                return Err(bad(format!("line {}: expected param header", ln + 1)));
            }
            let rank: usize = h[2].parse().map_err(|_| bad(format!("line {}: bad rank", ln + 1)))?;
            if h.len() != 3 + rank {
                return Err(bad(format!("line {}: rank does not match dims", ln + 1)));
            }
            let shape = h[3..]
                .iter()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("line {}: bad dimension", ln + 1)))?;
            let (ln, body) = lines.next().ok_or_else(|| bad("truncated".into()))?;
            let values = body
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("line {}: bad value", ln + 1)))?;
            let tensor = Tensor::from_values(&shape, values)
                .map_err(|_| bad(format!("line {}: value count does not match shape", ln + 1)))?;
            store.push(h[1], tensor);
        }
        out.push((f[1].to_string(), store));
    }
    Ok(out)
}
