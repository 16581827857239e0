//! JSON-lines corpus ingestion.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tracing::warn;

use super::order::{reading_order, DEFAULT_BAND_TOLERANCE};
use super::types::{CategoryVocabulary, Layout, WireLayout, DEFAULT_MAX_OBJECTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FilterRules {
    pub max_objects: usize,
    /// Inclusive aspect-ratio window; `None` accepts everything.
    pub aspect_range: Option<(f64, f64)>,
    /// Reorder retained layouts into reading order.
    pub canonicalize: bool,
    pub band_tolerance: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            max_objects: DEFAULT_MAX_OBJECTS,
            aspect_range: None,
            canonicalize: true,
            band_tolerance: DEFAULT_BAND_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    pub dropped_count: usize,
    /// `(line number, reason)` for each dropped layout.
    pub dropped: Vec<(usize, String)>,
    /// `(line number, parse error)`; line numbers are 1-based.
    pub malformed: Vec<(usize, String)>,
    pub warnings: Vec<String>,
}

pub fn load_corpus(
    path: &Path,
    vocab: &CategoryVocabulary,
    rules: &FilterRules,
) -> Result<(Vec<Layout>, LoadReport)> {
    let file = std::fs::File::open(path)?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut report = LoadReport::default();
    let mut layouts = Vec::new();

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let wire: WireLayout = match serde_json::from_str(&line) {
            Ok(w) => w,
            Err(e) => {
                report.malformed.push((lineno, e.to_string()));
                continue;
            }
        };
        match admit(&wire, vocab, rules, &source) {
            Ok(layout) => layouts.push(layout),
            Err(reason) => {
                report.dropped_count += 1;
                report.dropped.push((lineno, reason));
            }
        }
    }

    report.loaded = layouts.len();
    if report.lines == 0 {
        let msg = format!("{} contains no layouts", path.display());
        warn!("{msg}");
        report.warnings.push(msg);
    } else if report.malformed.len() * 2 > report.lines {
        return Err(Error::CorpusMalformed {
            path: path.display().to_string(),
            malformed: report.malformed.len(),
            total: report.lines,
        });
    }
    for (line, e) in &report.malformed {
        warn!("{}:{line}: malformed: {e}", path.display());
    }
    Ok((layouts, report))
}

fn admit(
    wire: &WireLayout,
    vocab: &CategoryVocabulary,
    rules: &FilterRules,
    source: &str,
) -> std::result::Result<Layout, String> {
    if let Some((lo, hi)) = rules.aspect_range {
        let a = wire.canvas.aspect;
        if !(lo..=hi).contains(&a) {
            return Err(format!("aspect {a} outside [{lo}, {hi}]"));
        }
    }
    let layout = wire.to_layout(vocab, source).map_err(|e| e.to_string())?;
    let layout = if rules.canonicalize {
        reading_order(&layout, rules.band_tolerance)
    } else {
        layout
    };
    match layout.problem(rules.max_objects, vocab.len()) {
        Some(p) => Err(p),
        None => Ok(layout),
    }
}

pub fn save_corpus(path: &Path, layouts: &[Layout], vocab: &CategoryVocabulary) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in layouts {
        serde_json::to_writer(&mut f, &WireLayout::from_layout(l, vocab)?)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Hex SHA-256 over the wire encoding of every layout, in order.
pub fn corpus_hash(layouts: &[Layout], vocab: &CategoryVocabulary) -> Result<String> {
    let mut h = Sha256::new();
    for l in layouts {
        h.update(serde_json::to_vec(&WireLayout::from_layout(l, vocab)?)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
