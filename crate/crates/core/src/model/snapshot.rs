//! Mask + weight container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SGSNAP01"
//! version      u32
//! float width  u8       4 or 8
//! arch id      u32 length, then UTF-8
//! entry count  u32
//! per entry descriptor:
//!   name       u32 length, then UTF-8
//!   kind       u8  0 masked weight | 1 bias | 2 bn gamma | 3 bn beta | 4 running mean | 5 running var
//!   prunable   u8  0 or 1
//!   rank       u32, then rank × u32 dims
//! per entry payload, in descriptor order:
//!   kind 0 only: mask bitset, ceil(n/8) bytes, bit k of byte b is element 8b+k
//!   n floats of the declared width
//! ```
//!
//! Entries appear as each weight layer's weight then bias, followed by each batch norm's
//! γ, β, running mean and running variance.

use std::path::Path;

use serde::Serialize;

use super::{ArchSpec, LayerMask, MaskedNetwork};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SGSNAP01";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    MaskedWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl EntryKind {
    fn code(self) -> u8 {
        self as u8
    }
    fn from_code(c: u8) -> Option<Self> {
        use EntryKind::*;
        [MaskedWeight, Bias, Gamma, Beta, RunningMean, RunningVar]
            .get(c as usize)
            .copied()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryInfo {
    pub name: String,
    pub kind: EntryKind,
    pub prunable: bool,
    pub shape: Vec<usize>,
    /// Set bits for masked weights.
    pub nnz: Option<usize>,
    #[serde(skip)]
    values: Vec<f64>,
    #[serde(skip)]
    bits: Option<Vec<bool>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SnapshotInfo {
    pub version: u32,
    pub float_bytes: u8,
    pub arch: String,
    pub entries: Vec<EntryInfo>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Desc<'a, T> {
    name: String,
    kind: EntryKind,
    prunable: bool,
    shape: Vec<usize>,
    data: &'a [T],
    bits: Option<&'a [bool]>,
}

fn entries<T: Scalar>(net: &MaskedNetwork<T>) -> Vec<Desc<'_, T>> {
    let mut out = Vec::new();
    for l in &net.layers {
        out.push(Desc {
            name: l.name.clone(),
            kind: EntryKind::MaskedWeight,
            prunable: l.prunable,
            shape: l.weight.shape().to_vec(),
            data: l.weight.data(),
            bits: Some(l.mask.bits()),
        });
        if let Some(b) = &l.bias {
            out.push(Desc {
                name: format!("{}.bias", l.name),
                kind: EntryKind::Bias,
                prunable: false,
                shape: b.shape().to_vec(),
                data: b.data(),
                bits: None,
            });
        }
    }
    for bn in &net.bns {
        let c = bn.gamma.numel();
        for (suffix, kind, data) in [
            ("gamma", EntryKind::Gamma, bn.gamma.data()),
            ("beta", EntryKind::Beta, bn.beta.data()),
            ("running_mean", EntryKind::RunningMean, &bn.running_mean[..]),
            ("running_var", EntryKind::RunningVar, &bn.running_var[..]),
        ] {
            out.push(Desc {
                name: format!("{}.{suffix}", bn.name),
                kind,
                prunable: false,
                shape: vec![c],
                data,
                bits: None,
            });
        }
    }
    out
}

pub fn encode_snapshot<T: Scalar>(net: &MaskedNetwork<T>) -> Result<Vec<u8>> {
    let arch = net
        .arch()
        .ok_or_else(|| Error::Usage("only networks built from an architecture id can be saved".into()))?;
    let descs = entries(net);
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    put_str(&mut out, &arch.to_string())?;
    put_u32(&mut out, descs.len())?;
    for d in &descs {
        put_str(&mut out, &d.name)?;
        out.push(d.kind.code());
        out.push(d.prunable as u8);
        put_u32(&mut out, d.shape.len())?;
        for &s in &d.shape {
            put_u32(&mut out, s)?;
        }
    }
    for d in &descs {
        if let Some(bits) = d.bits {
            let mut bytes = vec![0u8; bits.len().div_ceil(8)];
            for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&bytes);
        }
        for &v in d.data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn write_snapshot<T: Scalar>(net: &MaskedNetwork<T>, path: &Path) -> Result<()> {
    let bytes = encode_snapshot(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

/// Parses a snapshot without reconstructing the network.
pub fn inspect_snapshot(bytes: &[u8]) -> Result<SnapshotInfo> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != SNAPSHOT_MAGIC {
        return Err(Error::format(0, "not a snapshot (bad magic)"));
    }
    let version = c.u32("version")? as u32;
    if version != SNAPSHOT_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let float_bytes = c.u8("float width")?;
    if float_bytes != 4 && float_bytes != 8 {
        return Err(Error::format(12, format!("float width {float_bytes}")));
    }
    let arch = c.string("architecture id")?;
    let count = c.u32("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = c.string("entry name")?;
        let at = c.pos as u64;
        let kind = EntryKind::from_code(c.u8("entry kind")?)
            .ok_or_else(|| Error::format(at, "unknown entry kind"))?;
        let prunable = c.u8("prunable flag")? != 0;
        let rank = c.u32("rank")?;
        let shape = (0..rank).map(|_| c.u32("dimension")).collect::<Result<Vec<_>>>()?;
        entries.push(EntryInfo {
            name,
            kind,
            prunable,
            shape,
            nnz: None,
            values: Vec::new(),
            bits: None,
        });
    }
    for e in entries.iter_mut() {
        let n: usize = e.shape.iter().product();
        if e.kind == EntryKind::MaskedWeight {
            let raw = c.take(n.div_ceil(8), "mask bitset")?;
            let bits: Vec<bool> = (0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
            e.nnz = Some(bits.iter().filter(|&&b| b).count());
            e.bits = Some(bits);
        }
        let raw = c.take(n * float_bytes as usize, "values")?;
        e.values = raw
            .chunks_exact(float_bytes as usize)
            .map(|b| {
                if float_bytes == 4 {
                    f32::read_le(b) as f64
                } else {
                    f64::read_le(b)
                }
            })
            .collect();
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after payload"));
    }
    Ok(SnapshotInfo {
        version,
        float_bytes,
        arch,
        entries,
    })
}

pub fn decode_snapshot<T: Scalar>(bytes: &[u8]) -> Result<MaskedNetwork<T>> {
    let info = inspect_snapshot(bytes)?;
    let arch = ArchSpec::from_id(&info.arch)?;
    let mut net = MaskedNetwork::<T>::from_arch(&arch, 0)?;
    let expected: Vec<(String, EntryKind, Vec<usize>)> = entries(&net)
        .into_iter()
        .map(|d| (d.name, d.kind, d.shape))
        .collect();
    if expected.len() != info.entries.len() {
        return Err(Error::Data(format!(
            "snapshot has {} entries, {} expects {}",
            info.entries.len(),
            info.arch,
            expected.len()
        )));
    }
    for (e, (name, kind, shape)) in info.entries.iter().zip(&expected) {
        if &e.name != name || e.kind != *kind || &e.shape != shape {
            return Err(Error::Data(format!(
                "snapshot entry `{}` {:?} does not match `{name}` {shape:?}",
                e.name, e.shape
            )));
        }
    }
    let vals = |e: &EntryInfo| -> Vec<T> { e.values.iter().map(|&v| T::of(v)).collect() };
    let mut it = info.entries.iter();
    for layer in net.layers.iter_mut() {
        let e = it.next().unwrap();
        layer.weight = Tensor::new(e.shape.clone(), vals(e))?;
        let (rows, cols) = layer.kind.mask_dims();
        layer.mask = LayerMask::from_bits(e.bits.clone().unwrap(), rows, cols)?;
        layer.prunable = e.prunable;
        if layer.bias.is_some() {
            let e = it.next().unwrap();
            layer.bias = Some(Tensor::new(e.shape.clone(), vals(e))?);
        }
    }
    for bn in net.bns.iter_mut() {
        bn.gamma = Tensor::new(bn.gamma.shape().to_vec(), vals(it.next().unwrap()))?;
        bn.beta = Tensor::new(bn.beta.shape().to_vec(), vals(it.next().unwrap()))?;
        bn.running_mean = vals(it.next().unwrap());
        bn.running_var = vals(it.next().unwrap());
    }
    Ok(net)
}

pub fn read_snapshot<T: Scalar>(path: &Path) -> Result<MaskedNetwork<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MaskedNetwork<f32> {
        let arch = ArchSpec::from_id("resnet-8-w2-c3-i4x4x1").unwrap();
        let mut net = MaskedNetwork::from_arch(&arch, 3).unwrap();
        let n = net.layer(1).mask().len();
        net.set_mask(1, (0..n).map(|i| i % 5 == 0).collect()).unwrap();
        net.bns[0].running_mean[1] = 0.25;
        net
    }

    #[test]
    fn round_trip_is_exact() {
        let net = sample();
        let bytes = encode_snapshot(&net).unwrap();
        let back: MaskedNetwork<f32> = decode_snapshot(&bytes).unwrap();
        for (a, b) in net.layers().iter().zip(back.layers()) {
            assert_eq!(a.mask(), b.mask());
            assert_eq!(a.weight(), b.weight());
            assert_eq!(a.prunable(), b.prunable());
        }
        assert_eq!(back.batch_norms()[0].running_mean()[1], 0.25);
        assert_eq!(encode_snapshot(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_snapshot(&sample()).unwrap();
        match decode_snapshot::<f32>(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_snapshot::<f32>(b"NOTASNAP"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn header_layout_is_stable() {
        let bytes = encode_snapshot(&sample()).unwrap();
        assert_eq!(&bytes[..8], b"SGSNAP01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 4);
        let len = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
        assert_eq!(&bytes[17..17 + len], b"resnet-8-w2-c3-i4x4x1");
    }
}
