//! Binary trace dataset format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! file     := "EVPT" version:u32 manifest_len:u64 manifest:[u8; manifest_len] record*
//! record   := body_len:u64 crc32c(body):u32 body:[u8; body_len]
//! body     := qid_len:u32 qid:utf8 condition:u8 sample_index:u32
//!             T:u32 K:u32 n_layers:u32 d:u32
//!             token_ids:[u32; T] chosen_logprobs:[f32; T]
//!             topk_ids:[u32; T*K] topk_logits:[f32; T*K]
//!             (layer:u32 hidden:[f32; T*d]){n_layers}
//!             has_p_true:u8 p_true:f64 text_len:u32 text:utf8
//! ```
//!
//! The manifest is UTF-8 JSON. Index offsets are relative to the first byte
//! after the manifest, so the manifest can be written after all records are
//! known.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Condition, DatasetManifest, GenerationTrace, Matrix, TraceKey};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVPT";
pub const FORMAT_VERSION: u32 = 1;

const RECORD_HEADER_LEN: u64 = 12;
const FILE_HEADER_LEN: u64 = 16;

/// Location of one record within the record section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub question_id: String,
    pub condition: Condition,
    pub sample_index: u32,
    pub offset: u64,
    pub length: u64,
}

impl IndexEntry {
    pub fn key(&self) -> TraceKey {
        TraceKey::new(self.question_id.clone(), self.condition, self.sample_index)
    }
}

/// Appends traces to a new dataset file. Records are staged in a sibling
/// `.partial` file until [`DatasetWriter::finish`] writes the manifest.
pub struct DatasetWriter {
    path: PathBuf,
    staging_path: PathBuf,
    staging: BufWriter<File>,
    manifest: DatasetManifest,
    seen: HashMap<TraceKey, ()>,
    offset: u64,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>, mut manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        manifest.format_version = FORMAT_VERSION;
        manifest.traces.clear();
        let path = path.as_ref().to_path_buf();
        let mut staging_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        staging_name.push(".partial");
        let staging_path = path.with_file_name(staging_name);
        let staging = BufWriter::new(File::create(&staging_path)?);
        Ok(Self {
            path,
            staging_path,
            staging,
            manifest,
            seen: HashMap::new(),
            offset: 0,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn append(&mut self, trace: &GenerationTrace) -> Result<IndexEntry> {
        self.manifest.check_trace(trace)?;
        let key = trace.key();
        if self.seen.insert(key.clone(), ()).is_some() {
            return Err(Error::Schema(format!("duplicate trace {key}")));
        }
        let body = encode_body(trace);
        let crc = crc32c::crc32c(&body);
        self.staging.write_all(&(body.len() as u64).to_le_bytes())?;
        self.staging.write_all(&crc.to_le_bytes())?;
        self.staging.write_all(&body)?;
        let entry = IndexEntry {
            question_id: trace.question_id.clone(),
            condition: trace.condition,
            sample_index: trace.sample_index,
            offset: self.offset,
            length: RECORD_HEADER_LEN + body.len() as u64,
        };
        self.offset += entry.length;
        self.manifest.traces.push(entry.clone());
        Ok(entry)
    }

    /// Writes header, manifest and staged records to the final path.
    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.staging.flush()?;
        drop(self.staging);
        let json = serde_json::to_vec(&self.manifest)?;
        let mut out = BufWriter::new(File::create(&self.path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut staged = File::open(&self.staging_path)?;
        io::copy(&mut staged, &mut out)?;
        out.flush()?;
        drop(staged);
        fs::remove_file(&self.staging_path)?;
        Ok(self.manifest)
    }
}

/// Read-only view of a finalized dataset. Each read opens its own file
/// handle, so a reader can be shared across threads.
#[derive(Debug, Clone)]
pub struct DatasetReader {
    path: PathBuf,
    manifest: DatasetManifest,
    index: HashMap<TraceKey, usize>,
    records_start: u64,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = BufReader::new(File::open(&path)?);
        let mut header = [0u8; FILE_HEADER_LEN as usize];
        read_exact_or_integrity(&mut file, &mut header, "file header")?;
        if &header[..4] != MAGIC {
            return Err(Error::Integrity(format!("{} is not a trace dataset (bad magic)", path.display())));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported format version {version}")));
        }
        let manifest_len = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let file_len = fs::metadata(&path)?.len();
        if manifest_len > file_len.saturating_sub(FILE_HEADER_LEN) {
            return Err(Error::Integrity("manifest length exceeds file size".into()));
        }
        let mut json = vec![0u8; manifest_len as usize];
        read_exact_or_integrity(&mut file, &mut json, "manifest")?;
        let manifest: DatasetManifest = serde_json::from_slice(&json)
            .map_err(|e| Error::Integrity(format!("manifest is not valid JSON: {e}")))?;
        manifest.validate()?;
        let mut index = HashMap::with_capacity(manifest.traces.len());
        for (i, entry) in manifest.traces.iter().enumerate() {
            if index.insert(entry.key(), i).is_some() {
                return Err(Error::Schema(format!("duplicate index entry {}", entry.key())));
            }
        }
        Ok(Self {
            path,
            manifest,
            index,
            records_start: FILE_HEADER_LEN + manifest_len,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.manifest.traces
    }

    pub fn len(&self) -> usize {
        self.manifest.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.traces.is_empty()
    }

    pub fn read_trace(&self, question_id: &str, condition: Condition, sample_index: u32) -> Result<GenerationTrace> {
        let key = TraceKey::new(question_id, condition, sample_index);
        let i = *self
            .index
            .get(&key)
            .ok_or_else(|| Error::NotFound(format!("no trace {key} in {}", self.path.display())))?;
        self.read_entry(&self.manifest.traces[i])
    }

    pub fn read_entry(&self, entry: &IndexEntry) -> Result<GenerationTrace> {
        let key = entry.key();
        if entry.length < RECORD_HEADER_LEN {
            return Err(Error::Integrity(format!("record {key}: length {} too small", entry.length)));
        }
        let mut file = File::open(&self.path)?;
        file.seek(SeekFrom::Start(self.records_start + entry.offset))?;
        let mut buf = vec![0u8; entry.length as usize];
        file.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Integrity(format!("record {key} is truncated")),
            _ => Error::Io(e),
        })?;
        let body_len = u64::from_le_bytes(buf[..8].try_into().unwrap());
        if body_len != entry.length - RECORD_HEADER_LEN {
            return Err(Error::Integrity(format!(
                "record {key}: body length {body_len} disagrees with index"
            )));
        }
        let crc = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        let body = &buf[RECORD_HEADER_LEN as usize..];
        if crc32c::crc32c(body) != crc {
            return Err(Error::Integrity(format!("record {key}: checksum mismatch")));
        }
        let trace = decode_body(body).map_err(|e| Error::Integrity(format!("record {key}: {e}")))?;
        if trace.key() != key {
            return Err(Error::Integrity(format!("record at {key} holds trace {}", trace.key())));
        }
        Ok(trace)
    }

    /// Decodes every indexed record, returning the ones that fail.
    pub fn check_all(&self) -> Vec<(IndexEntry, Error)> {
        self.entries()
            .iter()
            .filter_map(|e| match self.read_entry(e).and_then(|t| self.manifest.check_trace(&t)) {
                Ok(()) => None,
                Err(err) => Some((e.clone(), err)),
            })
            .collect()
    }

    pub fn traces(&self) -> impl Iterator<Item = Result<GenerationTrace>> + '_ {
        self.entries().iter().map(move |e| self.read_entry(e))
    }
}

fn read_exact_or_integrity(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Integrity(format!("{what} is truncated")),
        _ => Error::Io(e),
    })
}

fn encode_body(trace: &GenerationTrace) -> Vec<u8> {
    let t = trace.len();
    let k = trace.k_store();
    let d = trace.hidden_states.values().next().map_or(0, Matrix::cols);
    let mut out = Vec::with_capacity(64 + trace.response_text.len() + t * (8 + 8 * k + 4 * d * trace.hidden_states.len()));
    put_str(&mut out, &trace.question_id);
    out.push(trace.condition.code());
    put_u32(&mut out, trace.sample_index);
    put_u32(&mut out, t as u32);
    put_u32(&mut out, k as u32);
    put_u32(&mut out, trace.hidden_states.len() as u32);
    put_u32(&mut out, d as u32);
    trace.response_token_ids.iter().for_each(|&v| put_u32(&mut out, v));
    trace.chosen_logprobs.iter().for_each(|&v| put_f32(&mut out, v));
    trace.topk_token_ids.iter().for_each(|&v| put_u32(&mut out, v));
    trace.topk_logits.as_slice().iter().for_each(|&v| put_f32(&mut out, v));
    for (&layer, m) in &trace.hidden_states {
        put_u32(&mut out, layer);
        m.as_slice().iter().for_each(|&v| put_f32(&mut out, v));
    }
    out.push(u8::from(trace.p_true.is_some()));
    out.extend_from_slice(&trace.p_true.unwrap_or(0.0).to_le_bytes());
    put_str(&mut out, &trace.response_text);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Decoder<'a> {
    buf: &'a [u8],
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() {
            return Err(Error::Integrity(format!("needs {n} bytes, {} left", self.buf.len())));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Integrity(format!("invalid UTF-8: {e}")))
    }
}

fn overflow() -> Error {
    Error::Integrity("size overflow".into())
}

fn decode_body(body: &[u8]) -> Result<GenerationTrace> {
    let mut d = Decoder { buf: body };
    let question_id = d.string()?;
    let condition = Condition::from_code(d.u8()?).ok_or_else(|| Error::Integrity("unknown condition code".into()))?;
    let sample_index = d.u32()?;
    let t = d.u32()? as usize;
    let k = d.u32()? as usize;
    let n_layers = d.u32()? as usize;
    let dim = d.u32()? as usize;
    let tk = t.checked_mul(k).ok_or_else(overflow)?;
    let td = t.checked_mul(dim).ok_or_else(overflow)?;
    let response_token_ids = d.u32s(t)?;
    let chosen_logprobs = d.f32s(t)?;
    let topk_token_ids = d.u32s(tk)?;
    let topk_logits = Matrix::new(t, k, d.f32s(tk)?)?;
    let mut hidden_states = BTreeMap::new();
    for _ in 0..n_layers {
        let layer = d.u32()?;
        let m = Matrix::new(t, dim, d.f32s(td)?)?;
        if hidden_states.insert(layer, m).is_some() {
            return Err(Error::Integrity(format!("layer {layer} stored twice")));
        }
    }
    let has_p_true = d.u8()?;
    let p_true_raw = d.f64()?;
    let p_true = match has_p_true {
        0 => None,
        1 => Some(p_true_raw),
        other => return Err(Error::Integrity(format!("bad p_true flag {other}"))),
    };
    let response_text = d.string()?;
    if !d.buf.is_empty() {
        return Err(Error::Integrity(format!("{} trailing bytes in record", d.buf.len())));
    }
    Ok(GenerationTrace {
        question_id,
        condition,
        sample_index,
        response_token_ids,
        chosen_logprobs,
        topk_token_ids,
        topk_logits,
        hidden_states,
        p_true,
        response_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_trace() -> GenerationTrace {
        let mut hidden = BTreeMap::new();
        hidden.insert(7, Matrix::new(1, 4, vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        GenerationTrace {
            question_id: "q1".into(),
            condition: Condition::Woc,
            sample_index: 0,
            response_token_ids: vec![42],
            chosen_logprobs: vec![-0.25],
            topk_token_ids: vec![42, 7],
            topk_logits: Matrix::new(1, 2, vec![3.0, 1.0]).unwrap(),
            hidden_states: hidden,
            p_true: Some(0.73),
            response_text: "Paris".into(),
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest::new("toy", 2, vec![7], 4)
    }

    #[test]
    fn minimal_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.evpt");
        let mut w = DatasetWriter::create(&path, manifest()).unwrap();
        let trace = minimal_trace();
        w.append(&trace).unwrap();
        w.finish().unwrap();
        assert!(!dir.path().join("toy.evpt.partial").exists());
        let r = DatasetReader::open(&path).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.read_trace("q1", Condition::Woc, 0).unwrap(), trace);
    }

    #[test]
    fn rejects_short_hidden_block() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("x.evpt"), manifest()).unwrap();
        let mut trace = minimal_trace();
        trace.response_token_ids.push(1);
        trace.chosen_logprobs.push(-1.0);
        trace.topk_token_ids.extend([1, 2]);
        trace.topk_logits = Matrix::new(2, 2, vec![3.0, 1.0, 2.0, 0.0]).unwrap();
        // hidden states still carry a single row: T - 1
        assert!(matches!(w.append(&trace), Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_manifest_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = DatasetWriter::create(dir.path().join("x.evpt"), DatasetManifest::new("toy", 2, vec![7], 8)).unwrap();
        assert!(matches!(w.append(&minimal_trace()), Err(Error::Schema(_))));
        let mut w = DatasetWriter::create(dir.path().join("y.evpt"), manifest()).unwrap();
        w.append(&minimal_trace()).unwrap();
        assert!(matches!(w.append(&minimal_trace()), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_entry_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.evpt");
        let mut w = DatasetWriter::create(&path, manifest()).unwrap();
        w.append(&minimal_trace()).unwrap();
        w.finish().unwrap();
        let r = DatasetReader::open(&path).unwrap();
        assert!(matches!(r.read_trace("nope", Condition::Woc, 0), Err(Error::NotFound(_))));
        assert!(matches!(r.read_trace("q1", Condition::Wic, 0), Err(Error::NotFound(_))));
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.evpt");
        let mut w = DatasetWriter::create(&path, manifest()).unwrap();
        w.append(&minimal_trace()).unwrap();
        w.finish().unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let r = DatasetReader::open(&path).unwrap();
        assert!(matches!(r.read_trace("q1", Condition::Woc, 0), Err(Error::Integrity(_))));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(DatasetReader::open(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.evpt");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(DatasetReader::open(&path), Err(Error::Integrity(_))));
    }
}
