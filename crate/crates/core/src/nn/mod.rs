//! Small neural-network toolkit over candle tensors: a named parameter
//! store with checkpointing, conv/linear layers, and Adam.

pub mod conv;

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Ordered set of named trainable tensors.
///
/// Models are built against a store: names already present are reused
/// (loaded checkpoint, dtype copy), missing ones are initialized from the
/// store's RNG when the store is in init mode.
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    device: Device,
    dtype: DType,
    rng: Option<ChaCha8Rng>,
    frozen: bool,
}

impl ParamStore {
    pub fn init(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            device: Device::Cpu,
            dtype: DType::F32,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            frozen: false,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Fetches `name`, or creates it uniformly in `[-bound, bound]`.
    pub fn get(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        if let Some(v) = self.lookup(name) {
            if v.dims() != shape {
                return Err(Error::validation(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    v.dims()
                )));
            }
            return Ok(if self.frozen {
                v.as_tensor().detach()
            } else {
                v.as_tensor().clone()
            });
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::not_ready(format!("checkpoint is missing parameter {name}")))?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Independent copy (fresh storage) in the requested dtype. The copy
    /// cannot create new parameters.
    pub fn copy_as(&self, dtype: DType) -> Result<ParamStore> {
        let entries = self
            .entries
            .iter()
            .map(|(n, v)| {
                let t = v.as_tensor().to_dtype(dtype)?.copy()?;
                Ok((n.clone(), Var::from_tensor(&t)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamStore {
            entries,
            device: self.device.clone(),
            dtype,
            rng: None,
            frozen: false,
        })
    }

    /// Independent copy whose tensors are handed out detached, so models built
    /// from it are constants under backpropagation.
    pub fn frozen(&self) -> Result<ParamStore> {
        let mut s = self.deep_copy()?;
        s.frozen = true;
        Ok(s)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn deep_copy(&self) -> Result<ParamStore> {
        self.copy_as(self.dtype)
    }

    /// Overwrites every parameter with the value of the same-named one in `other`.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        for (name, v) in &self.entries {
            let src = other
                .lookup(name)
                .ok_or_else(|| Error::validation(format!("source store lacks {name}")))?;
            v.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.entries {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f32> = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for x in vals {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `manifest.json` plus one raw little-endian f32 blob per tensor.
    pub fn save(&self, dir: &Path, kind: &str, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (i, (name, v)) in self.entries.iter().enumerate() {
            let file = format!("{i:03}_{}.bin", name.replace('/', "."));
            let vals: Vec<f32> = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let bytes: Vec<u8> = vals.iter().flat_map(|x| x.to_le_bytes()).collect();
            fs::write(dir.join(&file), bytes)?;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: v.dims().to_vec(),
                dtype: "f32".into(),
                file,
            });
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash(config),
            config: config.clone(),
            tensors,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint; `kind` must match what was saved.
    pub fn load(dir: &Path, kind: &str) -> Result<(ParamStore, serde_json::Value)> {
        let mpath = dir.join("manifest.json");
        if !mpath.exists() {
            return Err(Error::not_ready(format!("no checkpoint at {}", dir.display())));
        }
        let manifest: CheckpointManifest =
            serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::load(&mpath, e))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::load(&mpath, "unsupported checkpoint format version"));
        }
        if manifest.kind != kind {
            return Err(Error::load(
                &mpath,
                format!("checkpoint holds a {} model, expected {kind}", manifest.kind),
            ));
        }
        if manifest.config_hash != config_hash(&manifest.config) {
            return Err(Error::load(&mpath, "config hash mismatch"));
        }
        let device = Device::Cpu;
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::load(&mpath, format!("unsupported dtype {}", t.dtype)));
            }
            let path = dir.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| Error::load(&path, e))?;
            let n: usize = t.shape.iter().product();
            if bytes.len() != n * 4 {
                return Err(Error::load(
                    &path,
                    format!("expected {} bytes, found {}", n * 4, bytes.len()),
                ));
            }
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::from_vec(vals, t.shape.as_slice(), &device)?;
            entries.push((t.name.clone(), Var::from_tensor(&tensor)?));
        }
        Ok((
            ParamStore {
                entries,
                device,
                dtype: DType::F32,
                rng: None,
                frozen: false,
            },
            manifest.config,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    kind: String,
    config_hash: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

/// Convolution with bias, square kernel.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = (3.0 / (c_in * k * k) as f64).sqrt();
        Self::with_bound(ps, name, c_in, c_out, k, stride, bound)
    }

    /// Zero-initialized variant, used for output heads that should start silent.
    pub fn zeroed(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_bound(ps, name, c_in, c_out, k, 1, 0.0)
    }

    fn with_bound(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bound: f64,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.get(&format!("{name}.weight"), &[c_out, c_in, k, k], bound)?,
            bias: ps.get(&format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.stride, self.pad)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (3.0 / d_in as f64).sqrt();
        Ok(Self {
            weight: ps.get(&format!("{name}.weight"), &[d_out, d_in], bound)?,
            bias: ps.get(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    /// `[B, d_in]` -> `[B, d_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        })
    }

    /// Backpropagates `loss` and applies one update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let grads = loss.backward()?;
        let mut gs = Vec::with_capacity(self.vars.len());
        let mut sq = 0.0f64;
        for var in &self.vars {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let g = gs[i].affine(scale, 0.0)?;
            self.m[i] = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            self.v[i] = (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let mhat = self.m[i].affine(1.0 / bc1, 0.0)?;
            let vhat = self.v[i].affine(1.0 / bc2, 0.0)?;
            let upd = (mhat / (vhat.sqrt()? + self.eps)?)?.affine(self.lr, 0.0)?;
            var.set(&(var.as_tensor() - upd)?)?;
        }
        Ok(norm)
    }
}

/// Sinusoidal embedding of scalar times, `[B]` -> `[B, dim]`.
pub fn timestep_embedding(t: &[f64], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((tv * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((tv * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), 2 * half), device)?.to_dtype(dtype)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let d = x.rank() - 1;
    let max = x.max_keepdim(d)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(d)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Nearest 2x upsampling of `[B, C, H, W]`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Mean over non-overlapping `f x f` blocks.
pub fn avg_pool(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / f, f, w / f, f))?
        .sum(5)?
        .sum(3)?
        .affine(1.0 / (f * f) as f64, 0.0)?)
}

/// Max over non-overlapping `f x f` blocks.
pub fn max_pool(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / f, f, w / f, f))?.max(5)?.max(3)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
