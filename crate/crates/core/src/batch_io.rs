//! JSON-lines wire format for perturbed batches.
//!
//! One record per document: `{doc_id, f, v, bits}` where `bits` is the
//! presence vector packed little-endian (bit t in byte t/8, position t%8) and
//! base64 encoded. A batch stream may be split into numbered files or kept in
//! one file separated by `{"type":"batch_end","l":..,"size":..}` records.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::BinaryDoc;
use crate::error::{Error, Result};
use crate::lplda::PerturbedBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: usize,
    pub f: f64,
    pub v: usize,
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchEnd {
    #[serde(rename = "type")]
    kind: String,
    l: usize,
    size: usize,
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (t, &b) in bits.iter().enumerate() {
        if b {
            out[t / 8] |= 1 << (t % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], v: usize) -> Result<Vec<bool>> {
    if bytes.len() != v.div_ceil(8) {
        return Err(format_err(format!("{} packed bytes cannot hold exactly {v} bits", bytes.len())));
    }
    let bits: Vec<bool> = (0..v).map(|t| bytes[t / 8] >> (t % 8) & 1 == 1).collect();
    let spare = bytes.len() * 8 - v;
    if spare > 0 && bytes[bytes.len() - 1] >> (8 - spare) != 0 {
        return Err(format_err("padding bits are set".into()));
    }
    Ok(bits)
}

fn format_err(detail: String) -> Error {
    Error::Format {
        what: "perturbed batch",
        detail,
    }
}

impl DocRecord {
    pub fn encode(doc: &BinaryDoc, f: f64) -> Self {
        Self {
            doc_id: doc.doc_id,
            f,
            v: doc.bits.len(),
            bits: STANDARD.encode(pack_bits(&doc.bits)),
        }
    }

    pub fn decode(&self) -> Result<BinaryDoc> {
        let bytes = STANDARD
            .decode(&self.bits)
            .map_err(|e| format_err(format!("document {}: {e}", self.doc_id)))?;
        Ok(BinaryDoc {
            doc_id: self.doc_id,
            bits: unpack_bits(&bytes, self.v)?,
        })
    }
}

pub fn write_batch<W: Write>(batch: &PerturbedBatch, mut out: W) -> Result<()> {
    for doc in batch.vectors() {
        serde_json::to_writer(&mut out, &DocRecord::encode(doc, batch.f()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn assemble(records: Vec<DocRecord>, fallback: Option<(f64, usize)>) -> Result<PerturbedBatch> {
    let (f, v) = match (records.first(), fallback) {
        (Some(r), _) => (r.f, r.v),
        (None, Some(fv)) => fv,
        (None, None) => (1.0, 0),
    };
    if let Some(r) = records.iter().find(|r| r.f.to_bits() != f.to_bits() || r.v != v) {
        return Err(format_err(format!("document {} disagrees on f or v within its batch", r.doc_id)));
    }
    let vectors = records.iter().map(DocRecord::decode).collect::<Result<Vec<_>>>()?;
    PerturbedBatch::new(vectors, f, v)
}

fn parse_line(line: &str, lineno: usize) -> Result<serde_json::Value> {
    serde_json::from_str(line).map_err(|e| format_err(format!("line {lineno}: {e}")))
}

pub fn read_batch<R: BufRead>(input: R) -> Result<PerturbedBatch> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_value(parse_line(&line, i + 1)?)?);
    }
    assemble(records, None)
}

/// Writes `batch_0001.jsonl`, `batch_0002.jsonl`, ... into `dir`.
pub fn write_batch_dir(dir: &Path, batches: &[PerturbedBatch]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let path = dir.join(format!("batch_{:04}.jsonl", i + 1));
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            write_batch(b, &mut w)?;
            w.flush()?;
            Ok(path)
        })
        .collect()
}

fn batch_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Reads every numbered `.jsonl` file in `dir`, ordered by its number.
pub fn read_batch_dir(dir: &Path) -> Result<Vec<PerturbedBatch>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .filter_map(|p| batch_number(&p).map(|n| (n, p)))
        .collect();
    files.sort();
    let mut out: Vec<PerturbedBatch> = Vec::with_capacity(files.len());
    for (_, path) in files {
        let batch = read_batch(BufReader::new(fs::File::open(&path)?))?;
        let batch = if batch.is_empty() {
            let fallback = out.last().map(|b| (b.f(), b.vocab_size()));
            assemble(Vec::new(), fallback)?
        } else {
            batch
        };
        out.push(batch);
    }
    Ok(out)
}

/// One file, batches separated by `batch_end` records.
pub fn write_stream<W: Write>(batches: &[PerturbedBatch], mut out: W) -> Result<()> {
    for (i, b) in batches.iter().enumerate() {
        write_batch(b, &mut out)?;
        let end = BatchEnd {
            kind: "batch_end".into(),
            l: i + 1,
            size: b.len(),
        };
        serde_json::to_writer(&mut out, &end)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stream<R: BufRead>(input: R) -> Result<Vec<PerturbedBatch>> {
    let mut out: Vec<PerturbedBatch> = Vec::new();
    let mut pending: Vec<DocRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = parse_line(&line, i + 1)?;
        if value.get("type").and_then(|t| t.as_str()) == Some("batch_end") {
            let end: BatchEnd = serde_json::from_value(value)?;
            if end.size != pending.len() {
                return Err(format_err(format!(
                    "batch {} declares {} documents but has {}",
                    end.l,
                    end.size,
                    pending.len()
                )));
            }
            let fallback = out.last().map(|b| (b.f(), b.vocab_size()));
            out.push(assemble(std::mem::take(&mut pending), fallback)?);
        } else {
            pending.push(serde_json::from_value(value)?);
        }
    }
    if !pending.is_empty() {
        let fallback = out.last().map(|b| (b.f(), b.vocab_size()));
        out.push(assemble(pending, fallback)?);
    }
    Ok(out)
}

/// A path holding either a batch directory or a single stream file.
pub fn read_batches(path: &Path) -> Result<Vec<PerturbedBatch>> {
    if path.is_dir() {
        read_batch_dir(path)
    } else {
        read_stream(BufReader::new(fs::File::open(path)?))
    }
}
