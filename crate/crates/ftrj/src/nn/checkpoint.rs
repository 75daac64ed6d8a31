//! Versioned binary checkpoint format.
//!
//! Layout: magic bytes `"FTRJ"`, format version as little-endian `u32`, then
//! per-tensor records until end of file. Each record is
//! `name_len: u32 LE`, the UTF-8 name, `rank: u32 LE`, `rank` dims as
//! `u64 LE`, and the payload as little-endian `f64`, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::activation::Activation;
use super::mlp::MlpNetwork;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"FTRJ";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl TensorBundle {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(dims.iter().product::<usize>(), values.len(), "{name}");
        self.entries.push((name, dims, values));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, d, v)| (d.as_slice(), v.as_slice()))
    }

    pub fn entries(&self) -> &[(String, Vec<usize>, Vec<f64>)] {
        &self.entries
    }

    fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor '{name}'")))
    }
}

pub fn save_tensors(path: &Path, bundle: &TensorBundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, dims, values) in &bundle.entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<TensorBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut bundle = TensorBundle::default();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            4 => {}
            n => {
                r.read_exact(&mut len_buf[n..])?;
            }
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Data("non-UTF-8 tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        bundle.push(name, dims, values);
    }
    Ok(bundle)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn arr2_to_f64<T: Real>(a: &Array2<T>) -> Vec<f64> {
    a.iter().map(|v| v.to_f64_lossy()).collect()
}

fn arr1_to_f64<T: Real>(a: &Array1<T>) -> Vec<f64> {
    a.iter().map(|v| v.to_f64_lossy()).collect()
}

impl<T: Real> MlpNetwork<T> {
    /// Append the network's tensors (parameters, normalization statistics,
    /// and an architecture record) under `prefix`.
    pub fn write_bundle(&self, prefix: &str, bundle: &mut TensorBundle) {
        let mut meta = vec![
            self.activation().code() as f64,
            if self.has_batch_norm() { 1.0 } else { 0.0 },
        ];
        meta.extend(self.dims().iter().map(|&d| d as f64));
        bundle.push(format!("{prefix}.meta"), vec![meta.len()], meta);
        for (l, layer) in self.layers.iter().enumerate() {
            bundle.push(
                format!("{prefix}.layer{l}.weight"),
                layer.weight.shape().to_vec(),
                arr2_to_f64(&layer.weight),
            );
            bundle.push(
                format!("{prefix}.layer{l}.bias"),
                vec![layer.bias.len()],
                arr1_to_f64(&layer.bias),
            );
            if let Some(bn) = &layer.norm {
                for (tag, arr) in [
                    ("norm.scale", &bn.scale),
                    ("norm.shift", &bn.shift),
                    ("norm.running_mean", &bn.running_mean),
                    ("norm.running_var", &bn.running_var),
                ] {
                    bundle.push(format!("{prefix}.layer{l}.{tag}"), vec![arr.len()], arr1_to_f64(arr));
                }
            }
        }
    }

    /// Reconstruct a network written by [`Self::write_bundle`]; loads in
    /// inference mode.
    pub fn read_bundle(prefix: &str, bundle: &TensorBundle) -> Result<Self> {
        let (_, meta) = bundle.require(&format!("{prefix}.meta"))?;
        if meta.len() < 4 {
            return Err(Error::Data("malformed network meta record".into()));
        }
        let activation = Activation::from_code(meta[0] as u8)
            .ok_or_else(|| Error::Data("unknown activation code".into()))?;
        let batch_norm = meta[1] != 0.0;
        let dims: Vec<usize> = meta[2..].iter().map(|&d| d as usize).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand_chacha::rand_core::SeedableRng;
        let mut net = MlpNetwork::new(&dims, activation, batch_norm, &mut rng)?;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (dims_w, w) = bundle.require(&format!("{prefix}.layer{l}.weight"))?;
            if dims_w != layer.weight.shape() {
                return Err(Error::Data(format!("weight shape mismatch in layer {l}")));
            }
            layer.weight = Array2::from_shape_vec(
                (dims_w[0], dims_w[1]),
                w.iter().map(|&v| T::of(v)).collect(),
            )
            .map_err(|e| Error::Data(e.to_string()))?;
            let (_, b) = bundle.require(&format!("{prefix}.layer{l}.bias"))?;
            layer.bias = Array1::from_vec(b.iter().map(|&v| T::of(v)).collect());
            if let Some(bn) = &mut layer.norm {
                for (tag, target) in [
                    ("norm.scale", &mut bn.scale),
                    ("norm.shift", &mut bn.shift),
                    ("norm.running_mean", &mut bn.running_mean),
                    ("norm.running_var", &mut bn.running_var),
                ] {
                    let (_, vals) = bundle.require(&format!("{prefix}.layer{l}.{tag}"))?;
                    *target = Array1::from_vec(vals.iter().map(|&v| T::of(v)).collect());
                }
            }
        }
        Ok(net)
    }
}
