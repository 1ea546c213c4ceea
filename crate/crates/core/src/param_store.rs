//! Named parameter tensors with regularization metadata, masks, and sparsity
//! accounting.
//!
//! Parameters live in flat `Vec<f64>` storage (row-major for matrices). Each
//! tensor carries a `regularized` flag: only regularized tensors take part in
//! the sparse optimization, the rest (biases and similar) are trained densely.
//! Zero tests are exact equality throughout, since the proximal operators
//! produce literal zeros.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparsity penalty applied to a regularized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    /// One l2 ball per group; groups are leading-axis slices (rows of a
    /// matrix), stored as contiguous chunks.
    GroupNorm,
}

/// Which parameters a count, norm, or sparsity query ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    RegularizedOnly,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    regularized: bool,
    penalty: Penalty,
    /// Contiguous group length for `GroupNorm` tensors; `None` for L1.
    group_size: Option<usize>,
    lambda_scale: f64,
}

impl ParamTensor {
    fn validated(self) -> Result<Self> {
        let expected: usize = self.shape.iter().product();
        if self.shape.is_empty() || expected != self.values.len() {
            return Err(Error::ShapeMismatch { expected, got: self.values.len() });
        }
        if !(self.lambda_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_scale must be positive, got {} for tensor {:?}",
                self.lambda_scale, self.name
            )));
        }
        if self.penalty == Penalty::GroupNorm {
            let g = self.group_size.unwrap_or(0);
            if g == 0 || self.values.len() % g != 0 {
                return Err(Error::InvalidPartition { len: self.values.len(), group_size: g });
            }
        }
        Ok(self)
    }

    /// Tensor excluded from sparse optimization (bias-like).
    pub fn excluded(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        ParamTensor {
            name: name.into(),
            shape,
            values,
            regularized: false,
            penalty: Penalty::L1,
            group_size: None,
            lambda_scale: 1.0,
        }
        .validated()
    }

    /// Regularized tensor with an l1 penalty.
    pub fn l1(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        ParamTensor {
            name: name.into(),
            shape,
            values,
            regularized: true,
            penalty: Penalty::L1,
            group_size: None,
            lambda_scale: 1.0,
        }
        .validated()
    }

    /// Regularized tensor with a group penalty; each leading-axis slice is one
    /// group, so a `[rows, cols]` matrix gets one group per row.
    pub fn group_norm(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::InvalidConfig(
                "group_norm tensors need rank >= 2 to define leading-axis groups".into(),
            ));
        }
        let group_size = shape[1..].iter().product();
        ParamTensor {
            name: name.into(),
            shape,
            values,
            regularized: true,
            penalty: Penalty::GroupNorm,
            group_size: Some(group_size),
            lambda_scale: 1.0,
        }
        .validated()
    }

    /// Per-tensor multiplier on the global regularization parameter.
    pub fn with_lambda_scale(mut self, scale: f64) -> Result<Self> {
        self.lambda_scale = scale;
        self.validated()
    }

    /// In-place variant of `with_lambda_scale` for tensors already in a store.
    pub fn set_lambda_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_scale must be positive, got {} for tensor {:?}",
                scale, self.name
            )));
        }
        self.lambda_scale = scale;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn group_size(&self) -> Option<usize> {
        self.group_size
    }

    pub fn lambda_scale(&self) -> f64 {
        self.lambda_scale
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Ordered collection of named tensors; the model's full parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new(tensors: Vec<ParamTensor>) -> Result<Self> {
        for (i, t) in tensors.iter().enumerate() {
            if tensors[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::DuplicateName(t.name.clone()));
            }
        }
        Ok(ParamStore { tensors })
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Position of a tensor in declaration order.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Count of all scalar parameters.
    pub fn d_total(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Count of regularized scalar parameters.
    pub fn d_reg(&self) -> usize {
        self.tensors.iter().filter(|t| t.regularized).map(|t| t.len()).sum()
    }

    pub fn len_of(&self, scope: Scope) -> usize {
        match scope {
            Scope::RegularizedOnly => self.d_reg(),
            Scope::All => self.d_total(),
        }
    }

    fn in_scope<'a>(&'a self, scope: Scope) -> impl Iterator<Item = &'a ParamTensor> {
        self.tensors.iter().filter(move |t| match scope {
            Scope::RegularizedOnly => t.regularized,
            Scope::All => true,
        })
    }

    pub fn count_nonzero(&self, scope: Scope) -> usize {
        self.in_scope(scope).map(|t| t.count_nonzero()).sum()
    }

    /// Fraction of exactly-zero entries in scope: (d - |theta|_0) / d.
    pub fn sparsity(&self, scope: Scope) -> Result<f64> {
        let d = self.len_of(scope);
        if d == 0 {
            return Err(Error::EmptyScope);
        }
        Ok((d - self.count_nonzero(scope)) as f64 / d as f64)
    }

    /// Zero every entry whose mask bit is unset; other entries unchanged.
    pub fn apply_mask(&mut self, mask: &Mask) -> Result<()> {
        if mask.lanes.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch { expected: self.tensors.len(), got: mask.lanes.len() });
        }
        for (t, lane) in self.tensors.iter_mut().zip(&mask.lanes) {
            if lane.len() != t.len() {
                return Err(Error::ShapeMismatch { expected: t.len(), got: lane.len() });
            }
            for (v, keep) in t.values.iter_mut().zip(lane) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Concatenated copy of all values in scope, in tensor order.
    pub fn flat(&self, scope: Scope) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len_of(scope));
        for t in self.in_scope(scope) {
            out.extend_from_slice(&t.values);
        }
        out
    }

    /// Split a vector aligned with the All scope into its regularized and
    /// excluded parts, each in tensor order.
    pub fn split_all_aligned(&self, all: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if all.len() != self.d_total() {
            return Err(Error::ShapeMismatch { expected: self.d_total(), got: all.len() });
        }
        let mut reg = Vec::with_capacity(self.d_reg());
        let mut exc = Vec::with_capacity(self.d_total() - self.d_reg());
        let mut off = 0;
        for t in &self.tensors {
            let seg = &all[off..off + t.len()];
            if t.regularized {
                reg.extend_from_slice(seg);
            } else {
                exc.extend_from_slice(seg);
            }
            off += t.len();
        }
        Ok((reg, exc))
    }

    /// Concatenated copy of the excluded (non-regularized) values.
    pub fn excluded_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.tensors.iter().filter(|t| !t.regularized) {
            out.extend_from_slice(&t.values);
        }
        out
    }

    /// Write back the excluded values from a flat vector.
    pub fn set_excluded_flat(&mut self, vals: &[f64]) -> Result<()> {
        let want: usize = self.tensors.iter().filter(|t| !t.regularized).map(|t| t.len()).sum();
        if vals.len() != want {
            return Err(Error::ShapeMismatch { expected: want, got: vals.len() });
        }
        let mut off = 0;
        for t in self.tensors.iter_mut().filter(|t| !t.regularized) {
            let n = t.len();
            t.values.copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Write a flat vector back into the tensors in scope.
    pub fn set_flat(&mut self, scope: Scope, vals: &[f64]) -> Result<()> {
        if vals.len() != self.len_of(scope) {
            return Err(Error::ShapeMismatch { expected: self.len_of(scope), got: vals.len() });
        }
        let mut off = 0;
        for t in self.tensors.iter_mut() {
            let take = match scope {
                Scope::RegularizedOnly => t.regularized,
                Scope::All => true,
            };
            if take {
                let n = t.len();
                t.values.copy_from_slice(&vals[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }
}

/// Per-tensor keep/drop bits aligned with a store's tensor order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    lanes: Vec<Vec<bool>>,
}

impl Mask {
    pub fn from_lanes(lanes: Vec<Vec<bool>>) -> Self {
        Mask { lanes }
    }

    pub fn all_ones(store: &ParamStore) -> Self {
        Mask { lanes: store.tensors.iter().map(|t| vec![true; t.len()]).collect() }
    }

    pub fn lanes(&self) -> &[Vec<bool>] {
        &self.lanes
    }

    pub fn count_zeros(&self) -> usize {
        self.lanes.iter().map(|l| l.iter().filter(|b| !**b).count()).sum()
    }

    /// Intersection; used to keep pruning schedules monotone.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.lanes.len() != other.lanes.len() {
            return Err(Error::ShapeMismatch { expected: self.lanes.len(), got: other.lanes.len() });
        }
        let mut lanes = Vec::with_capacity(self.lanes.len());
        for (a, b) in self.lanes.iter().zip(&other.lanes) {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch { expected: a.len(), got: b.len() });
            }
            lanes.push(a.iter().zip(b).map(|(x, y)| *x && *y).collect());
        }
        Ok(Mask { lanes })
    }

    /// True if every bit of `self` is set wherever `other` has a set bit
    /// implies nothing; nested means: self keeps a subset of what other keeps.
    pub fn nested_in(&self, other: &Mask) -> bool {
        self.lanes.len() == other.lanes.len()
            && self
                .lanes
                .iter()
                .zip(&other.lanes)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| !*x || *y))
    }
}

// Binary checkpoint layout (all integers little-endian):
//   magic "SPST", format version u16, tensor count u32, then per tensor:
//     name        u32 byte length + UTF-8 bytes
//     shape       u8 rank + u64 per dimension
//     flags       u8: bit 0 regularized, bit 1 group penalty
//     group_size  u64 (0 when absent)
//     lambda_scale f64 bit pattern
//     values      f64 bit patterns, count = product of shape
// Values round-trip bit-exactly (raw IEEE-754 bits).
const STORE_MAGIC: &[u8; 4] = b"SPST";
const STORE_VERSION: u16 = 1;

fn read_exact_buf<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let b = read_exact_buf(r, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let b = read_exact_buf(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(read_exact_buf(r, 1)?[0])
}

impl ParamStore {
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.shape.len() as u8])?;
            for d in &t.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let flags = (t.regularized as u8) | (((t.penalty == Penalty::GroupNorm) as u8) << 1);
            w.write_all(&[flags])?;
            w.write_all(&(t.group_size.unwrap_or(0) as u64).to_le_bytes())?;
            w.write_all(&t.lambda_scale.to_bits().to_le_bytes())?;
            for v in &t.values {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_exact_buf(r, 4)?;
        if magic != STORE_MAGIC {
            return Err(Error::Serialization("bad store magic".into()));
        }
        let version = read_u16(r)?;
        if version != STORE_VERSION {
            return Err(Error::Serialization(format!("unsupported store version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_exact_buf(r, name_len)?)
                .map_err(|e| Error::Serialization(format!("tensor name not UTF-8: {e}")))?;
            let rank = read_u8(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let flags = read_u8(r)?;
            let group_size = match read_u64(r)? as usize {
                0 => None,
                g => Some(g),
            };
            let lambda_scale = read_f64(r)?;
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(read_f64(r)?);
            }
            let tensor = ParamTensor {
                name,
                shape,
                values,
                regularized: flags & 1 != 0,
                penalty: if flags & 2 != 0 { Penalty::GroupNorm } else { Penalty::L1 },
                group_size,
                lambda_scale,
            }
            .validated()?;
            tensors.push(tensor);
        }
        ParamStore::new(tensors)
    }

    /// JSON checkpoint; values become plain JSON arrays (finite floats only).
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let store: ParamStore =
            serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))?;
        for t in store.tensors.clone() {
            t.validated()?;
        }
        ParamStore::new(store.tensors)
    }
}
