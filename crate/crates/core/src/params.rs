//! Named parameter tensors, the Adam optimizer, and checkpoint files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"KPCKPT01";

/// All trainable tensors plus per-parameter Adam moment accumulators.
///
/// Insertion order is preserved, so iteration (and therefore serialization
/// and gradient reduction) is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    tensors: IndexMap<String, Tensor>,
    moments_m: IndexMap<String, Tensor>,
    moments_v: IndexMap<String, Tensor>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let (r, c) = tensor.shape();
        self.moments_m.insert(name.clone(), Tensor::zeros(r, c));
        self.moments_v.insert(name.clone(), Tensor::zeros(r, c));
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// One bias-corrected Adam update, applied in place.
    pub fn adam_step(&mut self, grads: &IndexMap<String, Tensor>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, tensor) in self.tensors.iter_mut() {
            let grad = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(grad.shape(), tensor.shape(), "gradient shape for {}", name);
            let m = self.moments_m.get_mut(name).expect("moment m");
            let v = self.moments_v.get_mut(name).expect("moment v");
            for i in 0..tensor.len() {
                let g = grad.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                tensor.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Checkpoint file: magic, seed, config echo, named tensors, then the
    /// optimizer state. Floats are little-endian 32-bit.
    pub fn save_checkpoint(&self, path: &Path, seed: u64, config_echo: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&seed.to_le_bytes())?;
        write_bytes(&mut w, config_echo.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            write_tensor(&mut w, tensor)?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.moments_m.len() as u32).to_le_bytes())?;
        for (name, m) in &self.moments_m {
            write_bytes(&mut w, name.as_bytes())?;
            write_tensor(&mut w, m)?;
            write_tensor(&mut w, &self.moments_v[name])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Returns the store together with the seed and config echo recorded at
    /// save time.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, u64, String)> {
        let file = std::fs::File::open(path).map_err(|_| Error::MissingInput {
            artifact: "checkpoint",
            path: path.display().to_string(),
        })?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let seed = read_u64(&mut r)?;
        let config_echo = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Parse("checkpoint config echo is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Parse("checkpoint tensor name is not UTF-8".into()))?;
            let tensor = read_tensor(&mut r)?;
            store.insert(name, tensor);
        }
        store.step = read_u64(&mut r)?;
        let mcount = read_u32(&mut r)? as usize;
        for _ in 0..mcount {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Parse("checkpoint moment name is not UTF-8".into()))?;
            let m = read_tensor(&mut r)?;
            let v = read_tensor(&mut r)?;
            if !store.tensors.contains_key(&name) {
                return Err(Error::Parse(format!("moments for unknown tensor {}", name)));
            }
            store.moments_m.insert(name.clone(), m);
            store.moments_v.insert(name, v);
        }
        Ok((store, seed, config_echo))
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rows() as u32).to_le_bytes())?;
    w.write_all(&(t.cols() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    String::from_utf8(read_bytes(r)?).map_err(|_| Error::Parse("invalid UTF-8".into()))
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_bytes(w, s.as_bytes())
}
