//! Corpus persistence: JSON Lines for sequences, JSON for the phrase table
//! and the generating config, and a manifest with content hashes so stale or
//! tampered inputs are refused.
//!
//! All floats are written as decimal with 17 significant digits, which
//! round-trips `f64` exactly; rereading a corpus reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, PhraseTable};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::mat::Mat;
use crate::types::{ClipObservation, ClipSequence, CorpusRecord, SoftTarget, Split, StepPhrase};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TABLE_FILE: &str = "phrase_table.json";
pub const CONFIG_FILE: &str = "corpus_config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// 17 significant digits: exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*v));
    }
    out.push(']');
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    task_id: usize,
    split: String,
    phrase_ids: Vec<usize>,
    observations: Vec<Vec<f64>>,
    soft_targets: Vec<BTreeMap<String, f64>>,
}

fn corpus_line(record: &CorpusRecord) -> String {
    let seq = &record.sequence;
    let mut out = String::new();
    write!(out, "{{\"task_id\":{},\"split\":\"{}\",\"phrase_ids\":[", seq.task_id, record.split.as_str())
        .unwrap();
    for (i, id) in seq.phrase_ids.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{id}").unwrap();
    }
    out.push_str("],\"observations\":[");
    for (i, clip) in seq.clips.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_floats(&mut out, &clip.raw);
    }
    out.push_str("],\"soft_targets\":[");
    for (i, target) in seq.soft_targets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('{');
        let mut first = true;
        for (id, w) in target.weights.iter().enumerate() {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "\"{id}\":{}", fmt_f64(*w)).unwrap();
        }
        out.push('}');
    }
    out.push_str("]}");
    out
}

/// Serialize the whole corpus to JSON Lines.
pub fn corpus_to_jsonl(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&corpus_line(r));
        out.push('\n');
    }
    out
}

/// Parse a corpus back; `phrase_count` sizes the dense soft targets.
pub fn corpus_from_jsonl(text: &str, phrase_count: usize) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| {
            Error::invalid_input(format!("corpus line {}: {e}", lineno + 1))
        })?;
        let split = Split::parse(&parsed.split)?;
        let clips: Vec<ClipObservation> = parsed
            .observations
            .into_iter()
            .enumerate()
            .map(|(t, raw)| ClipObservation { raw, time_index: t })
            .collect();
        let soft_targets: Result<Vec<SoftTarget>> = parsed
            .soft_targets
            .into_iter()
            .map(|map| {
                let mut weights = vec![0.0; phrase_count];
                for (key, w) in map {
                    let id: usize = key.parse().map_err(|_| {
                        Error::invalid_input(format!("corpus line {}: bad phrase id {key:?}", lineno + 1))
                    })?;
                    if id >= phrase_count {
                        return Err(Error::invalid_input(format!(
                            "corpus line {}: phrase id {id} outside table",
                            lineno + 1
                        )));
                    }
                    weights[id] = w;
                }
                SoftTarget::new(weights)
            })
            .collect();
        let sequence = ClipSequence::new(parsed.task_id, clips, parsed.phrase_ids, soft_targets?)?;
        records.push(CorpusRecord { split, sequence });
    }
    Ok(records)
}

/// Serialize the phrase table.
pub fn table_to_json(table: &PhraseTable) -> String {
    let mut out = String::new();
    write!(
        out,
        "{{\"phrase_count\":{},\"embedding_dim\":{},\"observation_dim\":{},\"phrases\":[",
        table.len(),
        table.embedding_dim(),
        table.observation_dim()
    )
    .unwrap();
    for (i, p) in table.phrases.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{{\"id\":{},\"text\":{}}}", p.id, serde_json::to_string(&p.text).unwrap())
            .unwrap();
    }
    out.push_str("],\"embeddings\":[");
    for r in 0..table.embeddings.rows {
        if r > 0 {
            out.push(',');
        }
        fmt_floats(&mut out, table.embeddings.row(r));
    }
    out.push_str("],\"lift\":[");
    for r in 0..table.lift.rows {
        if r > 0 {
            out.push(',');
        }
        fmt_floats(&mut out, table.lift.row(r));
    }
    out.push_str("]}");
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct TableJson {
    phrase_count: usize,
    embedding_dim: usize,
    observation_dim: usize,
    phrases: Vec<PhraseJson>,
    embeddings: Vec<Vec<f64>>,
    lift: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PhraseJson {
    id: usize,
    text: String,
}

pub fn table_from_json(text: &str) -> Result<PhraseTable> {
    let parsed: TableJson = serde_json::from_str(text)
        .map_err(|e| Error::invalid_input(format!("phrase table: {e}")))?;
    if parsed.phrases.len() != parsed.phrase_count
        || parsed.embeddings.len() != parsed.phrase_count
        || parsed.lift.len() != parsed.observation_dim
    {
        return Err(Error::Integrity("phrase table dimensions are inconsistent".into()));
    }
    let mut embeddings = Mat::zeros(parsed.phrase_count, parsed.embedding_dim);
    for (r, row) in parsed.embeddings.iter().enumerate() {
        if row.len() != parsed.embedding_dim {
            return Err(Error::Integrity("embedding row width mismatch".into()));
        }
        embeddings.row_mut(r).copy_from_slice(row);
    }
    let mut lift = Mat::zeros(parsed.observation_dim, parsed.embedding_dim);
    for (r, row) in parsed.lift.iter().enumerate() {
        if row.len() != parsed.embedding_dim {
            return Err(Error::Integrity("lift row width mismatch".into()));
        }
        lift.row_mut(r).copy_from_slice(row);
    }
    let phrases = parsed
        .phrases
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.id != i {
                return Err(Error::Integrity("phrase ids must be contiguous".into()));
            }
            Ok(StepPhrase { id: p.id, text: p.text })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhraseTable { phrases, embeddings, lift })
}

/// File-name to content-hash map plus the hash of the generating config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn corpus_hash(&self) -> Result<&str> {
        self.files
            .get(CORPUS_FILE)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Integrity("manifest lists no corpus file".into()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write corpus, phrase table, config echo, and manifest into `dir`.
pub fn write_corpus_dir(
    dir: &Path,
    records: &[CorpusRecord],
    table: &PhraseTable,
    config: &CorpusConfig,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let corpus_bytes = corpus_to_jsonl(records).into_bytes();
    let table_bytes = table_to_json(table).into_bytes();
    let config_bytes = serde_json::to_vec_pretty(config).expect("config serializes");

    let mut files = BTreeMap::new();
    files.insert(CORPUS_FILE.to_string(), sha256_hex(&corpus_bytes));
    files.insert(TABLE_FILE.to_string(), sha256_hex(&table_bytes));
    files.insert(CONFIG_FILE.to_string(), sha256_hex(&config_bytes));
    let manifest = Manifest {
        schema_version: 1,
        config_hash: sha256_hex(&config_bytes),
        files,
    };

    write_atomic(&dir.join(CORPUS_FILE), &corpus_bytes)?;
    write_atomic(&dir.join(TABLE_FILE), &table_bytes)?;
    write_atomic(&dir.join(CONFIG_FILE), &config_bytes)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// A corpus directory loaded and verified against its manifest.
#[derive(Debug)]
pub struct CorpusDir {
    pub records: Vec<CorpusRecord>,
    pub table: PhraseTable,
    pub config: CorpusConfig,
    pub manifest: Manifest,
}

/// Load a corpus directory, refusing any file whose hash disagrees with the
/// manifest.
pub fn read_corpus_dir(dir: &Path) -> Result<CorpusDir> {
    let manifest_bytes = std::fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;

    let mut contents: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (name, expected) in &manifest.files {
        let bytes = std::fs::read(dir.join(name))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::Integrity(format!(
                "{name} hash mismatch: manifest {expected}, file {actual}"
            )));
        }
        contents.insert(name.clone(), bytes);
    }

    let config: CorpusConfig = serde_json::from_slice(
        contents
            .get(CONFIG_FILE)
            .ok_or_else(|| Error::Integrity("manifest lists no corpus config".into()))?,
    )
    .map_err(|e| Error::invalid_config(format!("corpus config: {e}")))?;
    let table = table_from_json(
        std::str::from_utf8(
            contents
                .get(TABLE_FILE)
                .ok_or_else(|| Error::Integrity("manifest lists no phrase table".into()))?,
        )
        .map_err(|_| Error::Integrity("phrase table is not UTF-8".into()))?,
    )?;
    let records = corpus_from_jsonl(
        std::str::from_utf8(
            contents
                .get(CORPUS_FILE)
                .ok_or_else(|| Error::Integrity("manifest lists no corpus".into()))?,
        )
        .map_err(|_| Error::Integrity("corpus is not UTF-8".into()))?,
        table.len(),
    )?;
    Ok(CorpusDir { records, table, config, manifest })
}

/// Stream JSON Lines to a file.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read JSON Lines from a file.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(f);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| Error::invalid_input(format!("jsonl: {e}")))?,
        );
    }
    Ok(rows)
}
