//! Versioned container of named `f32` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DUALCKPT" | version u32
//! n_meta u32 | n_meta × (key_len u32, key, value_len u32, value)
//! n_tensors u32 | n_tensors × (name_len u32, name, ndim u32, ndim × dim u64)
//! tensor data: every tensor's values as f32, in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, DenseNet, Layer, NnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DUALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        t
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![1], vec![value as f32])
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        t.data
            .first()
            .map(|&v| v as f64)
            .ok_or_else(|| NnError::Corrupt(format!("tensor `{name}` is empty")))
    }

    /// Adds a net as `<prefix>.activations` plus per-layer weight and bias
    /// tensors.
    pub fn push_net(&mut self, prefix: &str, net: &DenseNet) {
        let tags: Vec<f32> = net.layers().iter().map(|l| l.activation.tag() as f32).collect();
        self.push(NamedTensor::new(format!("{prefix}.activations"), vec![tags.len()], tags));
        for (i, layer) in net.layers().iter().enumerate() {
            let (o, n) = layer.weight.dim();
            self.push(NamedTensor::from_f64(
                format!("{prefix}.{i}.weight"),
                vec![o, n],
                layer.weight.as_slice().expect("standard layout"),
            ));
            self.push(NamedTensor::from_f64(
                format!("{prefix}.{i}.bias"),
                vec![o],
                layer.bias.as_slice().expect("standard layout"),
            ));
        }
    }

    pub fn net(&self, prefix: &str) -> Result<DenseNet> {
        let tags = self.get(&format!("{prefix}.activations"))?;
        let mut layers = Vec::with_capacity(tags.data.len());
        for (i, &tag) in tags.data.iter().enumerate() {
            let activation = Activation::from_tag(tag as u8)
                .ok_or_else(|| NnError::Corrupt(format!("unknown activation tag {tag}")))?;
            let w = self.get(&format!("{prefix}.{i}.weight"))?;
            let b = self.get(&format!("{prefix}.{i}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
                return Err(NnError::Corrupt(format!("layer {i} of `{prefix}` has bad shapes")));
            }
            let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.to_f64())
                .map_err(|e| NnError::Corrupt(e.to_string()))?;
            let bias = Array1::from_vec(b.to_f64());
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        DenseNet::from_layers(layers)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            write_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| NnError::Corrupt("dimension overflow".into()))?);
            }
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NnError::Corrupt("tensor size overflow".into()))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| NnError::Corrupt("tensor size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(NnError::Corrupt(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Corrupt(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Corrupt("invalid utf-8 name".into()))
    }
}
