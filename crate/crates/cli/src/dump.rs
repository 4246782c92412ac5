//! Attention dumps: a JSON metadata file plus a raw little-endian `f32`
//! payload laid out layer, head, query row, key position.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use adatoken::tokenstream::TokenType;
use adatoken::toydecoder::AttentionRecord;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
const ROW_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub n_query_rows: usize,
    pub query_row_indices: Vec<usize>,
    pub token_types: Vec<TokenType>,
    pub byte_order: String,
    /// Payload file name, relative to the metadata file.
    pub payload: String,
}

pub fn payload_path(meta_path: &Path, meta: &DumpMeta) -> PathBuf {
    meta_path.with_file_name(&meta.payload)
}

impl DumpMeta {
    fn expected_bytes(&self) -> u64 {
        4 * (self.n_layers * self.n_heads * self.n_query_rows * self.seq_len) as u64
    }

    fn validate(&self) -> CliResult<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(invalid(format!(
                "format_version: expected {FORMAT_VERSION}, found {}",
                self.format_version
            )));
        }
        if self.byte_order != "little" {
            return Err(invalid(format!("byte_order: expected \"little\", found {:?}", self.byte_order)));
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(invalid("n_layers and n_heads must be ≥ 1"));
        }
        if self.token_types.len() != self.seq_len {
            return Err(invalid(format!(
                "token_types: {} entries for seq_len {}",
                self.token_types.len(),
                self.seq_len
            )));
        }
        if self.query_row_indices.len() != self.n_query_rows {
            return Err(invalid(format!(
                "query_row_indices: {} entries for n_query_rows {}",
                self.query_row_indices.len(),
                self.n_query_rows
            )));
        }
        if let Some(&bad) = self.query_row_indices.iter().find(|&&r| r >= self.seq_len) {
            return Err(invalid(format!("query_row_indices: {bad} is outside seq_len {}", self.seq_len)));
        }
        Ok(())
    }
}

/// Writes `meta_path` and its payload next to it (same stem, `.bin`).
pub fn export_dump(meta_path: &Path, records: &[AttentionRecord], config_hash: &str) -> CliResult<DumpMeta> {
    let first = records.first().ok_or_else(|| invalid("no attention records to export"))?;
    if records
        .iter()
        .any(|r| r.query_rows != first.query_rows || r.token_types != first.token_types || r.n_heads != first.n_heads)
    {
        return Err(invalid("records of one dump must share heads, query rows and token types"));
    }
    let payload = meta_path.with_extension("bin");
    let meta = DumpMeta {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        n_layers: records.len(),
        n_heads: first.n_heads,
        seq_len: first.seq_len,
        n_query_rows: first.query_rows.len(),
        query_row_indices: first.query_rows.clone(),
        token_types: first.token_types.clone(),
        byte_order: "little".into(),
        payload: payload
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| invalid(format!("bad dump path {}", meta_path.display())))?
            .to_string(),
    };
    let file = fs::File::create(&payload).map_err(|e| CliError::io(&payload, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        for &v in &rec.weights {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| CliError::io(&payload, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&payload, e))?;
    crate::output::write_json(meta_path, &meta)?;
    Ok(meta)
}

/// Reads and validates a dump. The payload size is checked against the
/// metadata before any value is read.
pub fn ingest_dump(meta_path: &Path) -> CliResult<(DumpMeta, Vec<AttentionRecord>)> {
    let text = fs::read_to_string(meta_path).map_err(|e| CliError::io(meta_path, e))?;
    let meta: DumpMeta =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", meta_path.display())))?;
    meta.validate()
        .map_err(|e| invalid(format!("{}: {e}", meta_path.display())))?;
    let payload = payload_path(meta_path, &meta);
    let size = fs::metadata(&payload).map_err(|e| CliError::io(&payload, e))?.len();
    if size != meta.expected_bytes() {
        return Err(invalid(format!(
            "{}: payload is {size} bytes, metadata implies {}",
            payload.display(),
            meta.expected_bytes()
        )));
    }
    let mut bytes = Vec::with_capacity(size as usize);
    fs::File::open(&payload)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(&payload, e))?;
    let per_layer = meta.n_heads * meta.n_query_rows * meta.seq_len;
    let mut records = Vec::with_capacity(meta.n_layers);
    for layer in 0..meta.n_layers {
        let chunk = &bytes[4 * layer * per_layer..4 * (layer + 1) * per_layer];
        let weights: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        for (row, vals) in weights.chunks(meta.seq_len.max(1)).enumerate() {
            let sum: f64 = vals.iter().sum();
            if !vals.iter().all(|v| v.is_finite() && *v >= 0.0) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(invalid(format!(
                    "{}: layer {layer} head {} query row {} sums to {sum}",
                    payload.display(),
                    row / meta.n_query_rows,
                    row % meta.n_query_rows
                )));
            }
        }
        records.push(AttentionRecord::new(
            layer,
            meta.n_heads,
            meta.query_row_indices.clone(),
            meta.token_types.clone(),
            weights,
        )?);
    }
    Ok((meta, records))
}

/// `scene_*.json` files of a directory in name order.
pub fn list_dumps(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("scene_") && name.ends_with(".json") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(invalid(format!("no scene_*.json dumps in {}", dir.display())));
    }
    Ok(out)
}
