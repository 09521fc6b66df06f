//! `DIBM` container for exported activations, inputs and weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DIBM" | version u16 | count u64 | flags u32 | offsets u64 × count
//! record: id u64 | defense str | dataset str | y i32 | y_hat i32 | ntensors u16
//!         tensor: name str | rank u8 | extents u32 × rank | f32 × product
//! str: byte length u32 | UTF-8 bytes
//! ```
//!
//! Offsets are absolute and strictly increasing; the last record ends at EOF.
//! Labels use `-1` for absent.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{infer, Module};
use crate::metrics::argmax_rows;
use crate::pipeline::{DefenseMode, SplitPipeline};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DIBM";
pub const VERSION: u16 = 1;
/// Magic, version, count and the reserved flags word.
pub const HEADER_LEN: u64 = 18;

/// Defense id used for parameter checkpoints.
pub const CHECKPOINT_ID: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRecord {
    pub id: u64,
    pub defense_id: String,
    pub dataset_id: String,
    /// Ground-truth task label, `-1` when absent.
    pub y: i32,
    /// Server prediction, `-1` when absent.
    pub y_hat: i32,
    pub tensors: Vec<NamedTensor>,
}

impl BenchmarkRecord {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    fn encoded_len(&self) -> usize {
        let mut n = 8 + 4 + self.defense_id.len() + 4 + self.dataset_id.len() + 4 + 4 + 2;
        for t in &self.tensors {
            n += 4 + t.name.len() + 1 + 4 * t.tensor.rank() + 4 * t.tensor.len();
        }
        n
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        out.extend_from_slice(&self.id.to_le_bytes());
        put_str(out, &self.defense_id)?;
        put_str(out, &self.dataset_id)?;
        out.extend_from_slice(&self.y.to_le_bytes());
        out.extend_from_slice(&self.y_hat.to_le_bytes());
        let count = u16::try_from(self.tensors.len())
            .map_err(|_| Error::Config(format!("record {} has too many tensors", self.id)))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            put_str(out, &t.name)?;
            let rank = u8::try_from(t.tensor.rank())
                .map_err(|_| Error::Config(format!("tensor {} rank too large", t.name)))?;
            out.push(rank);
            for &e in t.tensor.shape() {
                let e = u32::try_from(e)
                    .map_err(|_| Error::Config(format!("tensor {} extent too large", t.name)))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for &v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u32::try_from(s.len()).map_err(|_| Error::Config("string too long".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn header_bytes(count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + 8 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

/// Serialises records into a complete container.
pub fn to_bytes(records: &[BenchmarkRecord]) -> Result<Vec<u8>> {
    let mut out = header_bytes(records.len());
    let mut offset = HEADER_LEN + 8 * records.len() as u64;
    for r in records {
        out.extend_from_slice(&offset.to_le_bytes());
        offset += r.encoded_len() as u64;
    }
    for r in records {
        r.encode(&mut out)?;
    }
    Ok(out)
}

pub fn write_benchmark(records: &[BenchmarkRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_bytes(records)?)?;
    w.flush()?;
    Ok(())
}

/// Parses a complete in-memory container.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<BenchmarkRecord>> {
    let mut reader = BenchmarkReader::new(std::io::Cursor::new(bytes))?;
    (0..reader.len()).map(|i| reader.record(i)).collect()
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchmarkRecord>> {
    let mut reader = BenchmarkReader::open(path)?;
    (0..reader.len()).map(|i| reader.record(i)).collect()
}

/// Random-access reader holding only the index in memory.
pub struct BenchmarkReader<R> {
    inner: R,
    offsets: Vec<u64>,
    end: u64,
}

impl BenchmarkReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        BenchmarkReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read + Seek> BenchmarkReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let end = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut cur = Cursor { inner: &mut inner, pos: 0, end };
        let magic = cur.bytes(4)?;
        if magic != MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}")));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let count = cur.u64()?;
        let _flags = cur.u32()?;
        let index_end = count
            .checked_mul(8)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .filter(|&n| n <= end)
            .ok_or_else(|| format_err(6, format!("record count {count} exceeds file size {end}")))?;
        let mut offsets = Vec::with_capacity(count as usize);
        let mut prev = index_end;
        for i in 0..count {
            let at = cur.pos;
            let off = cur.u64()?;
            let ok = if i == 0 { off == index_end } else { off > prev };
            if !ok || off > end {
                return Err(format_err(at, format!("offset {off} of record {i} is out of order")));
            }
            offsets.push(off);
            prev = off;
        }
        if count == 0 && end != HEADER_LEN {
            return Err(format_err(HEADER_LEN, "trailing bytes after empty index".into()));
        }
        Ok(BenchmarkReader {
            inner,
            offsets,
            end,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Decodes record `i`; only this record's bytes are read.
    pub fn record(&mut self, i: usize) -> Result<BenchmarkRecord> {
        let start = *self
            .offsets
            .get(i)
            .ok_or_else(|| Error::Config(format!("record {i} out of range ({})", self.len())))?;
        let stop = self.offsets.get(i + 1).copied().unwrap_or(self.end);
        self.inner.seek(SeekFrom::Start(start))?;
        let mut cur = Cursor {
            inner: &mut self.inner,
            pos: start,
            end: stop,
        };
        let id = cur.u64()?;
        let defense_id = cur.string()?;
        let dataset_id = cur.string()?;
        let y = cur.u32()? as i32;
        let y_hat = cur.u32()? as i32;
        let n = cur.u16()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = cur.string()?;
            let rank = cur.bytes(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let at = cur.pos;
            let raw = cur.bytes(len.checked_mul(4).ok_or_else(|| format_err(at, "extent overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(&shape, data)?,
            });
        }
        if cur.pos != stop {
            return Err(format_err(cur.pos, format!("record {i} ends before its successor at {stop}")));
        }
        Ok(BenchmarkRecord {
            id,
            defense_id,
            dataset_id,
            y,
            y_hat,
            tensors,
        })
    }

    pub fn records(&mut self) -> impl Iterator<Item = Result<BenchmarkRecord>> + '_ {
        (0..self.len()).map(move |i| self.record(i))
    }
}

fn format_err(offset: u64, detail: String) -> Error {
    Error::Format { offset, detail }
}

struct Cursor<'a, R> {
    inner: &'a mut R,
    pos: u64,
    end: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if self.pos + n as u64 > self.end {
            return Err(format_err(self.pos, format!("truncated: need {n} bytes")));
        }
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| format_err(self.pos, format!("truncated: need {n} bytes")))?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.bytes(n)?).map_err(|_| format_err(at, "invalid UTF-8".into()))
    }
}

/// Exports the first `n` samples of `data` as encoded by `pipeline` under
/// `defense`: tensors `z` and `x`, the task label and the server prediction.
pub fn export_run(
    pipeline: &SplitPipeline,
    data: &Dataset,
    n: usize,
    defense: DefenseMode,
    ratio: f64,
    seed: u64,
    dataset_id: &str,
) -> Result<Vec<BenchmarkRecord>> {
    let n = n.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n);
    for batch in idx.chunks(128) {
        let zhat = pipeline.client_forward(&data.images(batch))?;
        let z = pipeline.apply_defense_as(&zhat, defense, ratio, &mut rng)?;
        let pred = argmax_rows(&infer(&pipeline.task, &z)?)?;
        for (j, &i) in batch.iter().enumerate() {
            let sample = data.get(i);
            out.push(BenchmarkRecord {
                id: i as u64,
                defense_id: defense.as_str().to_string(),
                dataset_id: dataset_id.to_string(),
                y: sample.y as i32,
                y_hat: pred[j] as i32,
                tensors: vec![
                    NamedTensor::new("z", z.index(j)?),
                    NamedTensor::new("x", sample.image),
                ],
            });
        }
    }
    Ok(out)
}

/// Stacks the `z` tensors of exported records into a batch.
pub fn stack_activations(records: &[BenchmarkRecord]) -> Result<Tensor> {
    let zs = records
        .iter()
        .map(|r| {
            r.tensor("z")
                .cloned()
                .ok_or_else(|| Error::Config(format!("record {} has no z tensor", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&zs)
}

fn module_record(id: u64, name: &str, m: &dyn Module) -> BenchmarkRecord {
    BenchmarkRecord {
        id,
        defense_id: CHECKPOINT_ID.into(),
        dataset_id: name.into(),
        y: -1,
        y_hat: -1,
        tensors: m
            .params()
            .named_tensors()
            .into_iter()
            .map(|(n, t)| NamedTensor::new(n, t))
            .collect(),
    }
}

/// Client, filter and server weights as three records.
pub fn checkpoint_records(pipeline: &SplitPipeline) -> Vec<BenchmarkRecord> {
    vec![
        module_record(0, "client", &pipeline.client),
        module_record(1, "filter", &pipeline.filter),
        module_record(2, "task", &pipeline.task),
    ]
}

/// Loads weights written by [`checkpoint_records`] into a pipeline built
/// with the same configuration.
pub fn load_checkpoint(pipeline: &mut SplitPipeline, records: &[BenchmarkRecord]) -> Result<()> {
    let find = |name: &str| {
        records
            .iter()
            .find(|r| r.defense_id == CHECKPOINT_ID && r.dataset_id == name)
            .map(|r| {
                r.tensors
                    .iter()
                    .map(|t| (t.name.clone(), t.tensor.clone()))
                    .collect::<Vec<_>>()
            })
            .ok_or_else(|| Error::Config(format!("checkpoint has no {name} record")))
    };
    pipeline.client.params_mut().load_named(&find("client")?)?;
    pipeline.filter.params_mut().load_named(&find("filter")?)?;
    pipeline.task.params_mut().load_named(&find("task")?)?;
    Ok(())
}

pub fn save_checkpoint(pipeline: &SplitPipeline, path: &Path) -> Result<()> {
    write_benchmark(&checkpoint_records(pipeline), path)
}
