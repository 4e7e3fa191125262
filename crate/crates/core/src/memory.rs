//! Per-domain external memory: one record per observed image holding its
//! wavelet query key and its context features, with exact nearest-neighbour
//! retrieval and a binary file format.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const MEMORY_MAGIC: &[u8; 4] = b"CTXM";
pub const MEMORY_VERSION: u32 = 1;

/// Which context features the records carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemoryVariant {
    /// `{q, t}`
    TextureOnly,
    /// `{q, t, g}`
    TextureShape,
}

impl MemoryVariant {
    fn code(self) -> u8 {
        match self {
            Self::TextureOnly => 1,
            Self::TextureShape => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Self::TextureOnly),
            2 => Ok(Self::TextureShape),
            other => Err(Error::Format(format!("unknown memory variant code {other}"))),
        }
    }
}

impl fmt::Display for MemoryVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TextureOnly => "texture-only",
            Self::TextureShape => "texture+shape",
        })
    }
}

/// How the context rows of a support set are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Average,
    Sum,
    /// Row-major concatenation, zero-padded to `T` rows.
    Concat,
}

impl Aggregation {
    /// Width of the aggregated vector for rows of width `row` and context size `t`.
    pub fn output_dim(self, row: usize, t: usize) -> usize {
        match self {
            Self::Average | Self::Sum => row,
            Self::Concat => row * t,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Sum => "sum",
            Self::Concat => "concat",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "sum" => Ok(Self::Sum),
            "concat" => Ok(Self::Concat),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub id: String,
    pub q: Vec<f32>,
    pub t: Vec<f32>,
    pub g: Option<Vec<f32>>,
    /// Assigned on insertion.
    pub seq: u64,
}

impl MemoryRecord {
    pub fn new(id: impl Into<String>, q: Vec<f32>, t: Vec<f32>, g: Option<Vec<f32>>) -> Self {
        Self {
            id: id.into(),
            q,
            t,
            g,
            seq: 0,
        }
    }

    /// Texture features followed by shape features, if any.
    pub fn context_row(&self) -> Vec<f64> {
        self.t
            .iter()
            .chain(self.g.iter().flatten())
            .map(|&v| v as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryDims {
    pub query: usize,
    pub texture: usize,
    pub shape: Option<usize>,
}

impl MemoryDims {
    pub fn context(&self) -> usize {
        self.texture + self.shape.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainMemory {
    domain_id: String,
    variant: MemoryVariant,
    dims: MemoryDims,
    extractor_id: String,
    records: Vec<MemoryRecord>,
    ids: HashSet<String>,
    next_seq: u64,
    capacity: Option<usize>,
}

/// The support set of a query and its aggregated context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextQueryResult {
    pub support_ids: Vec<String>,
    pub distances: Vec<f64>,
    /// One context row per support record, nearest first.
    pub context_matrix: Vec<Vec<f64>>,
    pub aggregated: Vec<f64>,
}

impl DomainMemory {
    pub fn new(
        domain_id: impl Into<String>,
        variant: MemoryVariant,
        dims: MemoryDims,
        extractor_id: impl Into<String>,
    ) -> Result<Self> {
        match (variant, dims.shape) {
            (MemoryVariant::TextureOnly, Some(_)) => {
                return Err(Error::Variant("texture-only memory cannot declare a shape dimension".into()))
            }
            (MemoryVariant::TextureShape, None) => {
                return Err(Error::Variant("texture+shape memory needs a shape dimension".into()))
            }
            _ => {}
        }
        Ok(Self {
            domain_id: domain_id.into(),
            variant,
            dims,
            extractor_id: extractor_id.into(),
            records: Vec::new(),
            ids: HashSet::new(),
            next_seq: 0,
            capacity: None,
        })
    }

    /// Bounds the memory; when full, inserting evicts the oldest record.
    pub fn with_capacity_limit(mut self, capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return Err(Error::InvalidArgument("memory capacity must be positive".into()));
        }
        self.capacity = capacity;
        while capacity.is_some_and(|c| self.records.len() > c) {
            self.evict_oldest();
        }
        Ok(self)
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn variant(&self) -> MemoryVariant {
        self.variant
    }

    pub fn dims(&self) -> MemoryDims {
        self.dims
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn evict_oldest(&mut self) {
        let old = self.records.remove(0);
        self.ids.remove(&old.id);
    }

    fn check_record(&self, r: &MemoryRecord) -> Result<()> {
        match (self.variant, &r.g) {
            (MemoryVariant::TextureOnly, Some(_)) => {
                return Err(Error::Variant(format!(
                    "record {} carries shape features but memory is texture-only",
                    r.id
                )))
            }
            (MemoryVariant::TextureShape, None) => {
                return Err(Error::Variant(format!(
                    "record {} lacks shape features required by a texture+shape memory",
                    r.id
                )))
            }
            _ => {}
        }
        let g_len = r.g.as_ref().map(Vec::len);
        if r.q.len() != self.dims.query || r.t.len() != self.dims.texture || g_len != self.dims.shape {
            return Err(Error::Dimension(format!(
                "record {} has dims (q {}, t {}, g {:?}), memory expects {:?}",
                r.id,
                r.q.len(),
                r.t.len(),
                g_len,
                self.dims
            )));
        }
        Ok(())
    }

    /// Appends a record with the next sequence number.
    pub fn insert(&mut self, mut record: MemoryRecord) -> Result<u64> {
        self.check_record(&record)?;
        if self.ids.contains(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        if self.capacity.is_some_and(|c| self.records.len() >= c) {
            self.evict_oldest();
        }
        record.seq = self.next_seq;
        self.next_seq += 1;
        self.ids.insert(record.id.clone());
        self.records.push(record);
        Ok(self.next_seq - 1)
    }

    /// Exact Euclidean `t`-nearest-neighbour search on query features, ties
    /// broken by insertion order. An empty support set aggregates to zeros.
    pub fn retrieve_context(
        &self,
        q: &[f32],
        t: usize,
        exclude_id: Option<&str>,
        aggregation: Aggregation,
    ) -> Result<ContextQueryResult> {
        if t == 0 {
            return Err(Error::InvalidArgument("context size must be at least 1".into()));
        }
        if q.len() != self.dims.query {
            return Err(Error::Dimension(format!(
                "query has {} features, memory expects {}",
                q.len(),
                self.dims.query
            )));
        }
        let mut scored: Vec<(f64, u64, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| Some(r.id.as_str()) != exclude_id)
            .map(|(i, r)| (euclidean(q, &r.q), r.seq, i))
            .collect();
        let by_distance = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = t.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, by_distance);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance);

        let context_matrix: Vec<Vec<f64>> = scored.iter().map(|&(_, _, i)| self.records[i].context_row()).collect();
        let aggregated = if context_matrix.is_empty() {
            vec![0.0; aggregation.output_dim(self.dims.context(), t)]
        } else {
            aggregate(&context_matrix, aggregation, t)?
        };
        Ok(ContextQueryResult {
            support_ids: scored.iter().map(|&(_, _, i)| self.records[i].id.clone()).collect(),
            distances: scored.iter().map(|&(d, _, _)| d).collect(),
            context_matrix,
            aggregated,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MEMORY_MAGIC);
        w.u32(MEMORY_VERSION);
        w.str(&self.domain_id);
        w.u8(self.variant.code());
        w.u32(self.dims.query as u32);
        w.u32(self.dims.texture as u32);
        w.u32(self.dims.shape.unwrap_or(0) as u32);
        w.u64(self.records.len() as u64);
        w.str(&self.extractor_id);
        w.u64(self.capacity.unwrap_or(0) as u64);
        w.u64(self.next_seq);
        for r in &self.records {
            w.str(&r.id);
            w.u64(r.seq);
            w.f32s(&r.q);
            w.f32s(&r.t);
            if let Some(g) = &r.g {
                w.f32s(g);
            }
        }
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MEMORY_MAGIC {
            return Err(Error::Format("not a memory file (bad magic bytes)".into()));
        }
        let checksum_ok = ByteReader::with_checksum(bytes, "memory file").is_ok();
        match Self::parse(bytes) {
            Ok(m) if checksum_ok => Ok(m),
            Err(e @ (Error::Truncated(_) | Error::Version { .. })) => Err(e),
            _ if !checksum_ok => Err(Error::Checksum("memory file: whole-file checksum does not match".into())),
            Err(e) => Err(e),
            Ok(_) => unreachable!(),
        }
    }

    /// Structural parse of the whole file including the 4 trailing checksum bytes.
    fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "memory file");
        r.take(4)?;
        let version = r.u32()?;
        if version != MEMORY_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MEMORY_VERSION,
            });
        }
        let domain_id = r.str()?;
        let variant = MemoryVariant::from_code(r.u8()?)?;
        let query = r.u32()? as usize;
        let texture = r.u32()? as usize;
        let shape = match (variant, r.u32()? as usize) {
            (MemoryVariant::TextureOnly, 0) => None,
            (MemoryVariant::TextureShape, d) if d > 0 => Some(d),
            _ => return Err(Error::Format("shape dimension inconsistent with variant".into())),
        };
        let count = r.u64()? as usize;
        let extractor_id = r.str()?;
        let capacity = match r.u64()? {
            0 => None,
            c => Some(c as usize),
        };
        let next_seq = r.u64()?;
        let dims = MemoryDims { query, texture, shape };
        let mut memory = DomainMemory::new(domain_id, variant, dims, extractor_id)?;
        memory.capacity = capacity;
        for _ in 0..count {
            let id = r.str()?;
            let seq = r.u64()?;
            let q = r.f32s(query)?;
            let t = r.f32s(texture)?;
            let g = shape.map(|d| r.f32s(d)).transpose()?;
            let record = MemoryRecord { id, q, t, g, seq };
            memory.check_record(&record)?;
            if !memory.ids.insert(record.id.clone()) {
                return Err(Error::DuplicateId(record.id));
            }
            if memory.records.last().is_some_and(|l| l.seq >= seq) || seq >= next_seq {
                return Err(Error::Format("record sequence numbers out of order".into()));
            }
            memory.records.push(record);
        }
        memory.next_seq = next_seq;
        match r.remaining() {
            4 => Ok(memory),
            n if n < 4 => Err(Error::Truncated("memory file: checksum missing".into())),
            n => Err(Error::Format(format!("memory file: {} unexpected trailing bytes", n - 4))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a memory file and checks it carries the expected variant.
    pub fn load_expecting(path: &Path, variant: MemoryVariant) -> Result<Self> {
        let m = Self::load(path)?;
        if m.variant != variant {
            return Err(Error::Variant(format!(
                "{} holds a {} memory, expected {variant}",
                path.display(),
                m.variant
            )));
        }
        Ok(m)
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Combines context rows into one vector. `slots` is the context size `T`,
/// which fixes the concat output width.
pub fn aggregate(rows: &[Vec<f64>], method: Aggregation, slots: usize) -> Result<Vec<f64>> {
    let width = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate an empty context set".into()))?;
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Dimension("context rows have different lengths".into()));
    }
    Ok(match method {
        Aggregation::Sum | Aggregation::Average => {
            let mut acc = vec![0.0; width];
            for r in rows {
                acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            if method == Aggregation::Average {
                let n = rows.len() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
            }
            acc
        }
        Aggregation::Concat => {
            if rows.len() > slots {
                return Err(Error::Dimension(format!(
                    "{} rows exceed the {slots} concat slots",
                    rows.len()
                )));
            }
            let mut out = Vec::with_capacity(width * slots);
            rows.iter().for_each(|r| out.extend_from_slice(r));
            out.resize(width * slots, 0.0);
            out
        }
    })
}
