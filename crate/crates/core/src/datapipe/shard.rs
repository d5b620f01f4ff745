//! Binary record container shared by teacher-label shards, feature files and
//! checkpoints.
//!
//! ```text
//! header : "MTKD" | version u16 | kind u8 | ndims u8 | dims u32 * ndims
//! record : id_len u16 | id bytes | [rank u8, checkpoints only] | shape u32 * rank | payload
//! ```
//!
//! Everything is little-endian. Label and feature payloads are `f32`;
//! checkpoint payloads are `f64` so resumed training is bitwise exact.

use std::collections::HashSet;
use std::path::Path;

use super::{DataError, Result};

pub const MAGIC: &[u8; 4] = b"MTKD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardKind {
    /// Teacher frame embeddings `[T_t x D_t]`, header dims `[D_t]`.
    Asr,
    /// Teacher event logits `[K]`, header dims `[K]`.
    At,
    /// Teacher speaker vectors `[J]`, header dims `[J]`.
    Sv,
    /// Utterance features `[T x F]`, header dims `[F]`.
    Features,
    /// Named parameter / optimizer tensors of any rank.
    Checkpoint,
}

impl ShardKind {
    pub fn tag(self) -> u8 {
        match self {
            ShardKind::Asr => 0,
            ShardKind::At => 1,
            ShardKind::Sv => 2,
            ShardKind::Features => 3,
            ShardKind::Checkpoint => 4,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ShardKind::Asr,
            1 => ShardKind::At,
            2 => ShardKind::Sv,
            3 => ShardKind::Features,
            4 => ShardKind::Checkpoint,
            _ => return None,
        })
    }

    /// Record rank, or `None` when every record carries its own.
    fn rank(self) -> Option<usize> {
        match self {
            ShardKind::Asr | ShardKind::Features => Some(2),
            ShardKind::At | ShardKind::Sv => Some(1),
            ShardKind::Checkpoint => None,
        }
    }

    fn header_dims(self) -> usize {
        match self {
            ShardKind::Checkpoint => 0,
            _ => 1,
        }
    }

    fn wide(self) -> bool {
        self == ShardKind::Checkpoint
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub kind: ShardKind,
    pub dims: Vec<usize>,
    pub records: Vec<Record>,
}

impl Shard {
    pub fn new(kind: ShardKind, dims: Vec<usize>) -> Self {
        Self {
            kind,
            dims,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.records.push(Record {
            id: id.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    fn check_record(&self, r: &Record) -> std::result::Result<(), String> {
        if let Some(rank) = self.kind.rank() {
            if r.shape.len() != rank {
                return Err(format!("record '{}' has rank {}, expected {rank}", r.id, r.shape.len()));
            }
            if r.shape[rank - 1] != self.dims[0] {
                return Err(format!(
                    "record '{}' has trailing dim {}, header says {}",
                    r.id,
                    r.shape[rank - 1],
                    self.dims[0]
                ));
            }
        }
        if r.shape.len() > u8::MAX as usize {
            return Err(format!("record '{}' rank too large", r.id));
        }
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(format!("record '{}' payload length does not match its shape", r.id));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.dims.len() != self.kind.header_dims() {
            return Err(DataError::Invalid(format!("{:?} shard needs {} header dims", self.kind, self.kind.header_dims())));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&to_u32(d)?.to_le_bytes());
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
            self.check_record(r).map_err(DataError::Invalid)?;
            let id = r.id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| DataError::Invalid(format!("id too long: {}", r.id)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            if self.kind.rank().is_none() {
                out.push(r.shape.len() as u8);
            }
            for &d in &r.shape {
                out.extend_from_slice(&to_u32(d)?.to_le_bytes());
            }
            if self.kind.wide() {
                for v in &r.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for &v in &r.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(4, "magic")?;
        if magic != MAGIC {
            return Err(DataError::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}"),
            });
        }
        let version = rd.u16("version")?;
        if version != VERSION {
            return Err(DataError::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let tag = rd.u8("kind")?;
        let kind = ShardKind::from_tag(tag).ok_or(DataError::Format {
            offset: 6,
            detail: format!("unknown kind tag {tag}"),
        })?;
        let ndims = rd.u8("ndims")? as usize;
        if ndims != kind.header_dims() {
            return Err(DataError::Format {
                offset: 7,
                detail: format!("{kind:?} shard with {ndims} header dims"),
            });
        }
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(rd.u32("header dim")? as usize);
        }
        let mut shard = Shard::new(kind, dims);
        let mut seen = HashSet::new();
        while rd.pos < bytes.len() {
            let start = rd.pos;
            let id_len = rd.u16("id length")? as usize;
            let id = std::str::from_utf8(rd.take(id_len, "id")?)
                .map_err(|_| DataError::Format {
                    offset: start + 2,
                    detail: "record id is not UTF-8".into(),
                })?
                .to_string();
            let rank = match kind.rank() {
                Some(r) => r,
                None => rd.u8("rank")? as usize,
            };
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32("shape")? as usize);
            }
            let n: usize = shape.iter().product();
            let width = if kind.wide() { 8 } else { 4 };
            let payload_at = rd.pos;
            let raw = rd.take(n.checked_mul(width).ok_or(DataError::Format {
                offset: payload_at,
                detail: "payload size overflow".into(),
            })?, "payload")?;
            let data: Vec<f64> = if kind.wide() {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            } else {
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            };
            if !seen.insert(id.clone()) {
                return Err(DataError::DuplicateId(id));
            }
            let rec = Record { id, shape, data };
            shard.check_record(&rec).map_err(|detail| DataError::Format { offset: start, detail })?;
            shard.records.push(rec);
        }
        Ok(shard)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        super::write_file(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn expect_kind(&self, kind: ShardKind) -> Result<()> {
        if self.kind != kind {
            return Err(DataError::Invalid(format!("expected a {kind:?} shard, found {:?}", self.kind)));
        }
        Ok(())
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| DataError::Invalid(format!("dimension {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Format {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
