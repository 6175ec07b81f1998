//! Trace file formats.
//!
//! Two equivalent encodings, both round-tripping bit-exactly:
//!
//! **Text** (canonical for fixtures, diff-able):
//! ```text
//! moe-sim-trace 1
//! shape <L> <E> <k> <B> <T> <N>
//! sel <t> <l> <n> [<id> ...]
//! ...
//! end
//! ```
//! One `sel` record per `(t, l, n)` slot in `(t, l, n)`-major order; dropped
//! tokens carry zero ids.
//!
//! **Binary** (compact): magic `MSTB`, then little-endian u32s: version, the
//! six shape fields, and per record a length-prefixed id list.
//!
//! `load` auto-detects the format from the magic bytes.

use crate::model::{ModelShape, RoutingTrace, ValidateError};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

const TEXT_MAGIC: &str = "moe-sim-trace";
const BINARY_MAGIC: &[u8; 4] = b"MSTB";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("trace i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace parse failed at {context}: {message}")]
    Parse { context: String, message: String },
    #[error("trace schema version {found} not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("loaded trace is invalid: {0}")]
    Invalid(#[from] ValidateError),
}

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> TraceIoError {
    TraceIoError::Parse {
        context: context.into(),
        message: message.into(),
    }
}

/// Trace encoding selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Text,
    Binary,
}

/// Serialize to the canonical text format.
pub fn to_text(trace: &RoutingTrace) -> String {
    let s = &trace.shape;
    let mut out = String::new();
    out.push_str(TEXT_MAGIC);
    out.push(' ');
    out.push_str(&SCHEMA_VERSION.to_string());
    out.push('\n');
    out.push_str(&format!(
        "shape {} {} {} {} {} {}\n",
        s.num_layers, s.num_experts, s.top_k, s.gpu_budget, s.block_size, s.num_tokens
    ));
    for t in 0..s.block_size {
        for l in 0..s.num_layers {
            for n in 0..s.num_tokens {
                out.push_str(&format!("sel {} {} {}", t, l, n));
                for &id in trace.selection(t, l, n) {
                    out.push(' ');
                    out.push_str(&id.to_string());
                }
                out.push('\n');
            }
        }
    }
    out.push_str("end\n");
    out
}

/// Parse the canonical text format.
pub fn from_text(text: &str) -> Result<RoutingTrace, TraceIoError> {
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err("line 1", "empty file"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(TEXT_MAGIC) {
        return Err(parse_err("line 1", format!("expected `{TEXT_MAGIC}` magic")));
    }
    let version: u32 = parts
        .next()
        .ok_or_else(|| parse_err("line 1", "missing schema version"))?
        .parse()
        .map_err(|_| parse_err("line 1", "schema version is not an integer"))?;
    if version != SCHEMA_VERSION {
        return Err(TraceIoError::SchemaVersionMismatch { found: version });
    }

    let (_, shape_line) = lines
        .next()
        .ok_or_else(|| parse_err("line 2", "missing shape line"))?;
    let mut parts = shape_line.split_whitespace();
    if parts.next() != Some("shape") {
        return Err(parse_err("line 2", "expected `shape` line"));
    }
    let mut next_num = |name: &str| -> Result<u64, TraceIoError> {
        parts
            .next()
            .ok_or_else(|| parse_err("line 2", format!("missing shape field {name}")))?
            .parse()
            .map_err(|_| parse_err("line 2", format!("shape field {name} is not an integer")))
    };
    let shape = ModelShape {
        num_layers: next_num("L")? as usize,
        num_experts: next_num("E")? as u32,
        top_k: next_num("k")? as u32,
        gpu_budget: next_num("B")? as u32,
        block_size: next_num("T")? as usize,
        num_tokens: next_num("N")? as usize,
    };

    let expected = shape.num_selections();
    let mut selections: Vec<Vec<u32>> = Vec::with_capacity(expected);
    let mut saw_end = false;
    for (idx, line) in lines {
        let context = format!("line {}", idx + 1);
        if line == "end" {
            saw_end = true;
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("sel") {
            return Err(parse_err(context, "expected `sel` record or `end`"));
        }
        // Positions are redundant with record order; cross-check them.
        let mut pos = |name: &str| -> Result<usize, TraceIoError> {
            parts
                .next()
                .ok_or_else(|| parse_err(format!("line {}", idx + 1), format!("missing {name}")))?
                .parse()
                .map_err(|_| {
                    parse_err(format!("line {}", idx + 1), format!("{name} is not an integer"))
                })
        };
        let (t, l, n) = (pos("t")?, pos("l")?, pos("n")?);
        let flat = (t * shape.num_layers + l) * shape.num_tokens + n;
        if flat != selections.len() {
            return Err(parse_err(
                context,
                format!("record out of order: got (t={t}, l={l}, n={n})"),
            ));
        }
        let ids: Result<Vec<u32>, _> = parts.map(str::parse).collect();
        let ids = ids.map_err(|_| parse_err(context, "expert id is not an integer"))?;
        selections.push(ids);
    }
    if !saw_end {
        return Err(parse_err("end of file", "truncated trace (missing `end`)"));
    }
    if selections.len() != expected {
        return Err(parse_err(
            "end of file",
            format!("{} records found, shape requires {expected}", selections.len()),
        ));
    }
    Ok(RoutingTrace::new(shape, selections)?)
}

/// Serialize to the compact binary format.
pub fn to_binary(trace: &RoutingTrace) -> Vec<u8> {
    let s = &trace.shape;
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    for v in [
        SCHEMA_VERSION,
        s.num_layers as u32,
        s.num_experts,
        s.top_k,
        s.gpu_budget,
        s.block_size as u32,
        s.num_tokens as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for sel in &trace.selections {
        out.extend_from_slice(&(sel.len() as u32).to_le_bytes());
        for &id in sel {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take_u32(&mut self, what: &str) -> Result<u32, TraceIoError> {
        let end = self.offset + 4;
        if end > self.bytes.len() {
            return Err(parse_err(
                format!("byte {}", self.offset),
                format!("truncated while reading {what}"),
            ));
        }
        let v = u32::from_le_bytes(self.bytes[self.offset..end].try_into().unwrap());
        self.offset = end;
        Ok(v)
    }
}

/// Parse the compact binary format.
pub fn from_binary(bytes: &[u8]) -> Result<RoutingTrace, TraceIoError> {
    if bytes.len() < 4 || &bytes[..4] != BINARY_MAGIC {
        return Err(parse_err("byte 0", "expected MSTB magic"));
    }
    let mut cur = Cursor { bytes, offset: 4 };
    let version = cur.take_u32("version")?;
    if version != SCHEMA_VERSION {
        return Err(TraceIoError::SchemaVersionMismatch { found: version });
    }
    let shape = ModelShape {
        num_layers: cur.take_u32("L")? as usize,
        num_experts: cur.take_u32("E")?,
        top_k: cur.take_u32("k")?,
        gpu_budget: cur.take_u32("B")?,
        block_size: cur.take_u32("T")? as usize,
        num_tokens: cur.take_u32("N")? as usize,
    };
    let expected = shape.num_selections();
    // Each record takes at least 4 bytes; reject absurd headers before
    // reserving memory for them.
    if expected > (bytes.len() - cur.offset) / 4 {
        return Err(parse_err(
            "header",
            format!("shape requires {expected} records, file too small"),
        ));
    }
    let mut selections = Vec::with_capacity(expected);
    for _ in 0..expected {
        let len = cur.take_u32("record length")? as usize;
        if len > (bytes.len() - cur.offset) / 4 {
            return Err(parse_err(
                format!("byte {}", cur.offset),
                format!("record length {len} exceeds remaining bytes"),
            ));
        }
        let mut sel = Vec::with_capacity(len);
        for _ in 0..len {
            sel.push(cur.take_u32("expert id")?);
        }
        selections.push(sel);
    }
    if cur.offset != bytes.len() {
        return Err(parse_err(
            format!("byte {}", cur.offset),
            "trailing bytes after final record",
        ));
    }
    Ok(RoutingTrace::new(shape, selections)?)
}

/// Write a trace in the given format.
pub fn save_with_format(
    trace: &RoutingTrace,
    path: &Path,
    format: TraceFormat,
) -> Result<(), TraceIoError> {
    let file = fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    match format {
        TraceFormat::Text => writer.write_all(to_text(trace).as_bytes())?,
        TraceFormat::Binary => writer.write_all(&to_binary(trace))?,
    }
    writer.flush()?;
    Ok(())
}

/// Write a trace in the canonical text format.
pub fn save(trace: &RoutingTrace, path: &Path) -> Result<(), TraceIoError> {
    save_with_format(trace, path, TraceFormat::Text)
}

/// Read a trace, auto-detecting text vs binary from the magic bytes.
pub fn load(path: &Path) -> Result<RoutingTrace, TraceIoError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        from_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| parse_err("file", "not valid UTF-8 and not binary"))?;
        from_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use crate::trace::{generate, GenSpec, MaskMode, UnmaskSchedule};
    use proptest::prelude::*;

    fn sample_trace() -> RoutingTrace {
        let shape = ModelShape {
            num_layers: 2,
            num_experts: 16,
            top_k: 3,
            gpu_budget: 6,
            block_size: 4,
            num_tokens: 3,
        };
        generate(&GenSpec::new(shape, 0.8, 1.0, 5)).unwrap()
    }

    #[test]
    fn text_round_trip_exact() {
        let trace = sample_trace();
        let text = to_text(&trace);
        let back = from_text(&text).unwrap();
        assert_eq!(trace, back);
        // save(load(x)) is byte-identical too
        assert_eq!(text, to_text(&back));
    }

    #[test]
    fn binary_round_trip_exact() {
        let trace = sample_trace();
        let bytes = to_binary(&trace);
        let back = from_binary(&bytes).unwrap();
        assert_eq!(trace, back);
        assert_eq!(bytes, to_binary(&back));
    }

    #[test]
    fn file_round_trip_with_autodetect() {
        let dir = tempfile::tempdir().unwrap();
        let trace = sample_trace();
        let text_path = dir.path().join("t.trace");
        let bin_path = dir.path().join("t.traceb");
        save_with_format(&trace, &text_path, TraceFormat::Text).unwrap();
        save_with_format(&trace, &bin_path, TraceFormat::Binary).unwrap();
        assert_eq!(load(&text_path).unwrap(), trace);
        assert_eq!(load(&bin_path).unwrap(), trace);
    }

    #[test]
    fn truncated_text_is_parse_error() {
        let trace = sample_trace();
        let text = to_text(&trace);
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            from_text(cut),
            Err(TraceIoError::Parse { .. })
        ));
    }

    #[test]
    fn truncated_binary_is_parse_error() {
        let trace = sample_trace();
        let bytes = to_binary(&trace);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            from_binary(cut),
            Err(TraceIoError::Parse { .. })
        ));
    }

    #[test]
    fn schema_version_mismatch_detected() {
        let text = "moe-sim-trace 999\nshape 1 4 2 2 1 1\nsel 0 0 0 0 1\nend\n";
        assert!(matches!(
            from_text(text),
            Err(TraceIoError::SchemaVersionMismatch { found: 999 })
        ));
        let trace = sample_trace();
        let mut bytes = to_binary(&trace);
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            from_binary(&bytes),
            Err(TraceIoError::SchemaVersionMismatch { found: 999 })
        ));
    }

    #[test]
    fn out_of_order_record_rejected() {
        let text = "moe-sim-trace 1\nshape 1 4 2 2 2 1\nsel 1 0 0 0 1\nsel 0 0 0 1 2\nend\n";
        assert!(matches!(from_text(text), Err(TraceIoError::Parse { .. })));
    }

    #[test]
    fn invalid_loaded_trace_rejected() {
        // duplicate expert in a record
        let text = "moe-sim-trace 1\nshape 1 4 2 2 1 1\nsel 0 0 0 1 1\nend\n";
        assert!(matches!(from_text(text), Err(TraceIoError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn round_trip_random_traces(
            seed in any::<u64>(),
            persistence in 0.0f64..=1.0,
            skew in 0.0f64..2.0,
            layers in 1usize..3,
            tokens in 1usize..4,
            steps in 1usize..5,
            drop_mode in any::<bool>(),
        ) {
            let shape = ModelShape {
                num_layers: layers,
                num_experts: 8,
                top_k: 2,
                gpu_budget: 4,
                block_size: steps,
                num_tokens: tokens,
            };
            let spec = GenSpec {
                shape,
                persistence,
                popularity_skew: skew,
                unmask: UnmaskSchedule::Linear,
                mask_mode: if drop_mode { MaskMode::Drop } else { MaskMode::Freeze },
                seed,
            };
            let trace = generate(&spec).unwrap();
            prop_assert_eq!(&from_text(&to_text(&trace)).unwrap(), &trace);
            prop_assert_eq!(&from_binary(&to_binary(&trace)).unwrap(), &trace);
        }
    }
}
