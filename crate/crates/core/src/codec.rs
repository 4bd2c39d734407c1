//! Little-endian binary container used for point clouds, metric maps and
//! model checkpoints, plus plain-text exports of metric maps.
//!
//! Every container starts with the 4-byte magic `BEVN`, a `u16` format
//! version and a `u8` payload kind. Readers bounds-check every length prefix
//! against the bytes actually remaining before allocating.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{MapSpec, PointCloud, SemanticSet, Vec3};
use crate::metric_map::MetricMap;
use crate::topo_map::NodeId;

pub const MAGIC: [u8; 4] = *b"BEVN";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    PointCloud = 1,
    MetricMap = 2,
    Checkpoint = 3,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::PointCloud),
            2 => Ok(Self::MetricMap),
            3 => Ok(Self::Checkpoint),
            other => Err(Error::Decode(format!("unknown payload kind {other}"))),
        }
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(kind: PayloadKind) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&MAGIC);
        w.u16(VERSION);
        w.u8(kind as u8);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        self.buf.reserve(v.len() * 8);
        v.iter().for_each(|x| self.f64(*x));
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    /// Opens a container, checking magic, version and kind.
    pub fn open(data: &'a [u8], kind: PayloadKind) -> Result<Self> {
        let mut r = Self::new(data);
        if r.take(4)? != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let got = PayloadKind::from_byte(r.u8()?)?;
        if got != kind {
            return Err(Error::Decode(format!("expected {kind:?} payload, found {got:?}")));
        }
        Ok(r)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Decode(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice has length N"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Decode(format!("invalid boolean byte {b}"))),
        }
    }

    /// Reads a count and checks that `count * elem_size` bytes remain.
    pub fn len_prefix(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let need = n.checked_mul(elem_size as u64);
        match need {
            Some(b) if b <= self.remaining() as u64 => Ok(n as usize),
            _ => Err(Error::Decode(format!("length {n} exceeds the remaining input"))),
        }
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Decode(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Decode(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Decode(format!("non-finite {what}")))
    }
}

pub fn encode_pointcloud(pc: &PointCloud) -> Vec<u8> {
    let mut w = ByteWriter::with_header(PayloadKind::PointCloud);
    w.u32(pc.dim() as u32);
    w.u64(pc.len() as u64);
    for i in 0..pc.len() {
        let p = pc.position(i);
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.z);
        pc.feature(i).iter().for_each(|f| w.f64(*f));
        w.u64(pc.semantics(i).0);
    }
    w.finish()
}

pub fn decode_pointcloud(data: &[u8]) -> Result<PointCloud> {
    let mut r = ByteReader::open(data, PayloadKind::PointCloud)?;
    let dim = r.u32()? as usize;
    let per_point = dim
        .checked_add(4)
        .and_then(|k| k.checked_mul(8))
        .ok_or_else(|| Error::Decode("feature dimension overflows".into()))?;
    let n = r.len_prefix(per_point)?;
    let mut pc = PointCloud::with_capacity(dim, n);
    // with no points the dimension is unchecked against the input, so
    // allocate nothing
    let mut feat = vec![0.0; if n == 0 { 0 } else { dim }];
    for _ in 0..n {
        let p = Vec3::new(finite(r.f64()?, "position")?, finite(r.f64()?, "position")?, finite(r.f64()?, "position")?);
        for f in feat.iter_mut() {
            *f = finite(r.f64()?, "feature")?;
        }
        let s = SemanticSet(r.u64()?);
        pc.push(p, &feat, s)?;
    }
    r.finish()?;
    Ok(pc)
}

pub fn encode_metric_map(map: &MetricMap) -> Vec<u8> {
    let spec = map.spec();
    let mut w = ByteWriter::with_header(PayloadKind::MetricMap);
    w.u32(spec.u as u32);
    w.u32(spec.v as u32);
    w.f64(spec.cell_size);
    w.f64(spec.z_min);
    w.f64(spec.z_max);
    w.u32(map.dim() as u32);
    w.f64s(map.features());
    for c in 0..spec.num_cells() {
        w.u32(map.counts()[c]);
        w.u64(map.semantics_all()[c].0);
        w.u8(map.navigable()[c] as u8);
        w.u8(map.masked()[c] as u8);
    }
    let assoc = map.cell_associations();
    w.u64(assoc.len() as u64);
    for (cell, nodes) in assoc {
        w.u32(*cell as u32);
        w.u64(nodes.len() as u64);
        nodes.iter().for_each(|n| w.u32(n.0));
    }
    w.finish()
}

pub fn decode_metric_map(data: &[u8]) -> Result<MetricMap> {
    let mut r = ByteReader::open(data, PayloadKind::MetricMap)?;
    let (u, v) = (r.u32()? as usize, r.u32()? as usize);
    let spec = MapSpec::new(u, v, r.f64()?, r.f64()?, r.f64()?).map_err(|e| Error::Decode(e.to_string()))?;
    let dim = r.u32()? as usize;
    let cells = u.checked_mul(v).ok_or_else(|| Error::Decode("map too large".into()))?;
    // cell records alone take 14 bytes each
    if cells.saturating_mul(14) > r.remaining() {
        return Err(Error::Decode("map size exceeds the remaining input".into()));
    }
    let features = r.f64s()?;
    if Some(features.len()) != cells.checked_mul(dim) {
        return Err(Error::Decode("feature block does not match map shape".into()));
    }
    let mut counts = Vec::with_capacity(cells);
    let mut semantics = Vec::with_capacity(cells);
    let mut navigable = Vec::with_capacity(cells);
    let mut masked = Vec::with_capacity(cells);
    for _ in 0..cells {
        counts.push(r.u32()?);
        semantics.push(SemanticSet(r.u64()?));
        navigable.push(r.bool()?);
        masked.push(r.bool()?);
    }
    let n_assoc = r.len_prefix(12)?;
    let mut assoc = BTreeMap::new();
    for _ in 0..n_assoc {
        let cell = r.u32()? as usize;
        let k = r.len_prefix(4)?;
        let nodes = (0..k).map(|_| r.u32().map(NodeId)).collect::<Result<Vec<_>>>()?;
        if assoc.insert(cell, nodes).is_some() {
            return Err(Error::Decode(format!("cell {cell} listed twice")));
        }
    }
    r.finish()?;
    let observed = counts.iter().map(|c| *c > 0).collect();
    let mut map = MetricMap::from_parts(spec, dim, features, counts, observed, semantics, navigable, assoc)
        .map_err(|e| Error::Decode(e.to_string()))?;
    map.set_masked_flags(masked);
    Ok(map)
}

/// One CSV row per cell: `u,v,observed,navigable,masked,semantics,f0,..`.
pub fn metric_map_csv(map: &MetricMap) -> String {
    let spec = map.spec();
    let mut out = String::from("u,v,observed,navigable,masked,semantics");
    for k in 0..map.dim() {
        let _ = write!(out, ",f{k}");
    }
    out.push('\n');
    for u in 0..spec.u {
        for v in 0..spec.v {
            let c = map.index(u, v);
            let _ = write!(
                out,
                "{u},{v},{},{},{},{}",
                u8::from(map.observed()[c]),
                u8::from(map.navigable()[c]),
                u8::from(map.masked()[c]),
                map.semantics_all()[c].0
            );
            for f in map.feature(u, v) {
                let _ = write!(out, ",{f}");
            }
            out.push('\n');
        }
    }
    out
}

/// Binary PGM (P5) of a boolean cell mask, 255 where set. Row `u` of the map
/// is written top to bottom.
pub fn mask_pgm(spec: &MapSpec, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", spec.v, spec.u).into_bytes();
    out.extend(mask.iter().map(|m| if *m { 255u8 } else { 0 }));
    out
}
