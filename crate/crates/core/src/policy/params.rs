//! Trainable tensors of the policy and their checkpoint container.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//! magic `CNAV`, version, tensor count, then `(rows, cols)` per tensor,
//! then every tensor's entries as little-endian `f32`, row-major, in
//! declaration order.

use std::io::{Read, Write};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNAV";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Extra inputs appended to the mean tag embedding: sin/cos of heading and elevation.
pub const POSE_DIMS: usize = 4;
const TENSORS_PER_LAYER: usize = 12;
const HEAD_TENSORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { d_model: 64, d_ff: 128, n_layers: 2, max_len: 256 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 || self.max_len < 2 {
            return Err(Error::InvalidConfig(format!("degenerate policy shape {self:?}")));
        }
        Ok(())
    }
}

/// Index of one tensor inside [`PolicyParams`].
pub type ParamId = usize;

pub const TOK_EMB: ParamId = 0;
pub const POS_EMB: ParamId = 1;
pub const FEAT_PROJ: ParamId = 2;
const LAYER_BASE: ParamId = 3;

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn layer_ids(layer: usize) -> LayerIds {
    let b = LAYER_BASE + layer * TENSORS_PER_LAYER;
    LayerIds {
        ln1_g: b,
        ln1_b: b + 1,
        wq: b + 2,
        wk: b + 3,
        wv: b + 4,
        wo: b + 5,
        ln2_g: b + 6,
        ln2_b: b + 7,
        w1: b + 8,
        b1: b + 9,
        w2: b + 10,
        b2: b + 11,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub lm_head: ParamId,
    pub action_w: ParamId,
    pub stop_emb: ParamId,
}

pub fn head_ids(n_layers: usize) -> HeadIds {
    let b = LAYER_BASE + n_layers * TENSORS_PER_LAYER;
    HeadIds { lnf_g: b, lnf_b: b + 1, lm_head: b + 2, action_w: b + 3, stop_emb: b + 4 }
}

fn tensor_count(n_layers: usize) -> usize {
    LAYER_BASE + n_layers * TENSORS_PER_LAYER + 2 + HEAD_TENSORS
}

/// Shapes and names in declaration order.
pub fn layout(config: &PolicyConfig, vocab_size: usize) -> Vec<(String, (usize, usize))> {
    let d = config.d_model;
    let f = config.d_ff;
    let mut out = vec![
        ("tok_emb".to_string(), (vocab_size, d)),
        ("pos_emb".to_string(), (config.max_len, d)),
        ("feat_proj".to_string(), (d + POSE_DIMS, d)),
    ];
    for l in 0..config.n_layers {
        for (name, shape) in [
            ("ln1_g", (1, d)),
            ("ln1_b", (1, d)),
            ("wq", (d, d)),
            ("wk", (d, d)),
            ("wv", (d, d)),
            ("wo", (d, d)),
            ("ln2_g", (1, d)),
            ("ln2_b", (1, d)),
            ("w1", (d, f)),
            ("b1", (1, f)),
            ("w2", (f, d)),
            ("b2", (1, d)),
        ] {
            out.push((format!("layer{l}.{name}"), shape));
        }
    }
    for (name, shape) in [
        ("lnf_g", (1, d)),
        ("lnf_b", (1, d)),
        ("lm_head", (d, vocab_size)),
        ("action_w", (d, d)),
        ("stop_emb", (1, d)),
    ] {
        out.push((name.to_string(), shape));
    }
    debug_assert_eq!(out.len(), tensor_count(config.n_layers));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub vocab_size: usize,
    pub tensors: Vec<Array2<f64>>,
}

/// Parameter-shaped gradient set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &PolicyParams) -> Gradients {
        Gradients { tensors: params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect() }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(scale, b);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig, vocab_size: usize) -> PolicyParams {
        let tensors = layout(&config, vocab_size)
            .into_iter()
            .map(|(_, shape)| Array2::zeros(shape))
            .collect();
        PolicyParams { config, vocab_size, tensors }
    }

    /// Gaussian init: embeddings at 0.1, projections at `1/sqrt(fan_in)`,
    /// residual outputs shrunk by `1/sqrt(2 n_layers)`, norms at identity.
    pub fn init(config: PolicyConfig, vocab_size: usize, rng: &mut Rng) -> Result<PolicyParams> {
        config.validate()?;
        let mut p = PolicyParams::zeros(config, vocab_size);
        let names: Vec<String> = layout(&config, vocab_size).into_iter().map(|(n, _)| n).collect();
        let residual = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for (t, name) in p.tensors.iter_mut().zip(&names) {
            let short = name.rsplit('.').next().unwrap_or(name);
            let fan_in = t.nrows() as f64;
            let std = match short {
                "ln1_g" | "ln2_g" | "lnf_g" => {
                    t.fill(1.0);
                    continue;
                }
                "ln1_b" | "ln2_b" | "lnf_b" | "b1" | "b2" => continue,
                "tok_emb" | "pos_emb" | "stop_emb" => 0.1,
                "wo" | "w2" => residual / fan_in.sqrt(),
                _ => 1.0 / fan_in.sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            t.mapv_inplace(|_| normal.sample(rng));
        }
        Ok(p)
    }

    pub fn names(&self) -> Vec<String> {
        layout(&self.config, self.vocab_size).into_iter().map(|(n, _)| n).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            p.scaled_add(-lr, g);
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.nrows() as u32).to_le_bytes())?;
            w.write_all(&(t.ncols() as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.count() * 4);
        for t in &self.tensors {
            for x in t.iter() {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PolicyParams> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if &word != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut read_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word) as usize)
        };
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)?;
        if n < tensor_count(1) || (n - tensor_count(0)) % TENSORS_PER_LAYER != 0 {
            return Err(bad("tensor count does not match any layer count"));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = read_u32(&mut r)?;
            let cols = read_u32(&mut r)?;
            shapes.push((rows, cols));
        }
        let n_layers = (n - tensor_count(0)) / TENSORS_PER_LAYER;
        let (vocab_size, d_model) = shapes[TOK_EMB];
        let config = PolicyConfig {
            d_model,
            d_ff: shapes[layer_ids(0).w1].1,
            n_layers,
            max_len: shapes[POS_EMB].0,
        };
        config.validate()?;
        let expected: Vec<(usize, usize)> = layout(&config, vocab_size).into_iter().map(|(_, s)| s).collect();
        if expected != shapes {
            return Err(bad("tensor shapes are inconsistent"));
        }
        let mut tensors = Vec::with_capacity(n);
        for (rows, cols) in shapes {
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push(Array2::from_shape_vec((rows, cols), data).expect("sized above"));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let params = PolicyParams { config, vocab_size, tensors };
        if !params.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(params)
    }

    /// Rounds every entry through `f32`, the checkpoint precision.
    pub fn quantized(&self) -> PolicyParams {
        let mut p = self.clone();
        for t in &mut p.tensors {
            t.mapv_inplace(|x| f64::from(x as f32));
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = PolicyConfig { d_model: 8, d_ff: 16, n_layers: 2, max_len: 32 };
        let p = PolicyParams::init(cfg, 40, &mut rng_from(1)).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let header = 12 + 8 * p.tensors.len();
        assert_eq!(buf.len(), header + 4 * p.count());
        let back = PolicyParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p.quantized());
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(matches!(PolicyParams::read_checkpoint(&b"NOPE...."[..]), Err(Error::Checkpoint(_))));
        let cfg = PolicyConfig { d_model: 4, d_ff: 8, n_layers: 1, max_len: 8 };
        let p = PolicyParams::zeros(cfg, 10);
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        buf.push(0);
        assert!(PolicyParams::read_checkpoint(buf.as_slice()).is_err());
        buf.truncate(buf.len() - 5);
        assert!(PolicyParams::read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn layout_counts() {
        let cfg = PolicyConfig::default();
        let p = PolicyParams::zeros(cfg, 100);
        assert_eq!(p.tensors.len(), 3 + 2 * 12 + 5);
        assert_eq!(p.names()[head_ids(2).stop_emb], "stop_emb");
        assert_eq!(p.names()[layer_ids(1).w2], "layer1.w2");
    }
}
