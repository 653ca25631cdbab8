//! Versioned little-endian binary checkpoint.
//!
//! ```text
//! "FMIA" u32:version
//! u64:embedding_dim u8:final_relu u32:n_layers
//!   per layer: u64:out u64:in f64[out*in]:w f64[out]:b
//! u64:epochs u64:batch_size f64:lr str:optimizer u64:seed
//! u32:n_normalizers  per entry: str:model_id f64:mu f64:sigma
//! u32:n_epochs f64[n]:loss_trace
//! ```
//! Strings are `u32` length + UTF-8 bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::net::{layer_shapes, AttackNet, Linear};
use super::{AttackError, Normalizer, TrainConfig};

const MAGIC: &[u8; 4] = b"FMIA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: AttackNet,
    pub train_config: TrainConfig,
    /// Normalizers of the models the detector was trained on.
    pub normalizers: BTreeMap<String, Normalizer>,
    pub loss_trace: Vec<f64>,
}

fn err(msg: impl Into<String>) -> AttackError {
    AttackError::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], AttackError> {
        if self.0.len() < n {
            return Err(err("truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, AttackError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, AttackError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, AttackError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, AttackError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, AttackError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| err("invalid utf-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, AttackError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.net.embedding_dim as u64);
        w.u8(self.net.final_relu as u8);
        w.u32(self.net.layers.len() as u32);
        for l in &self.net.layers {
            let (o, i) = l.shape();
            w.u64(o as u64);
            w.u64(i as u64);
            l.w.iter().for_each(|v| w.f64(*v));
            l.b.iter().for_each(|v| w.f64(*v));
        }
        let c = &self.train_config;
        w.u64(c.epochs as u64);
        w.u64(c.batch_size as u64);
        w.f64(c.lr);
        w.str(&c.optimizer);
        w.u64(c.seed);
        w.u32(self.normalizers.len() as u32);
        for (id, n) in &self.normalizers {
            w.str(id);
            w.f64(n.mu);
            w.f64(n.sigma);
        }
        w.u32(self.loss_trace.len() as u32);
        self.loss_trace.iter().for_each(|v| w.f64(*v));
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AttackError> {
        let mut r = Reader(bytes);
        if r.take(4)? != MAGIC {
            return Err(err("not a detector checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let embedding_dim = r.u64()? as usize;
        let final_relu = r.u8()? != 0;
        let n_layers = r.u32()? as usize;
        let expected = layer_shapes(embedding_dim);
        if n_layers != expected.len() {
            return Err(err(format!("{n_layers} layers, architecture has {}", expected.len())));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(eo, ei) in &expected {
            let (o, i) = (r.u64()? as usize, r.u64()? as usize);
            if (o, i) != (eo, ei) {
                return Err(err(format!("layer shape {o}x{i}, expected {eo}x{ei}")));
            }
            let w = Array2::from_shape_vec((o, i), r.f64s(o * i)?).expect("shape checked");
            let b = Array1::from(r.f64s(o)?);
            layers.push(Linear { w, b });
        }
        let train_config = TrainConfig {
            epochs: r.u64()? as usize,
            batch_size: r.u64()? as usize,
            lr: r.f64()?,
            optimizer: r.str()?,
            seed: r.u64()?,
            final_relu,
        };
        let mut normalizers = BTreeMap::new();
        for _ in 0..r.u32()? {
            let id = r.str()?;
            normalizers.insert(id, Normalizer::new(r.f64()?, r.f64()?)?);
        }
        let n = r.u32()? as usize;
        let loss_trace = r.f64s(n)?;
        if !r.0.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Self {
            net: AttackNet {
                embedding_dim,
                final_relu,
                layers,
            },
            train_config,
            normalizers,
            loss_trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AttackError> {
        fs::write(path, self.to_bytes()).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AttackError> {
        Self::from_bytes(&fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?)
    }
}
