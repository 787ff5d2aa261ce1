//! Synthetic OCR documents with controlled geometry, for training runs
//! and mask-structure checks without real scanner output.
//!
//! Generators emit the same JSON-lines text a real OCR export would, and
//! every document goes through the full ingestion pipeline (parse, page
//! linkage, coordinate normalization), so synthetic corpora exercise
//! exactly the production path.
//!
//! Two layouts are provided. The reading-order grid places words
//! left-to-right, top-to-bottom, so sequence neighbors are also spatial
//! neighbors. The two-column layout interleaves columns within each
//! line's reading order while keeping the columns far apart on the page,
//! so a token's spatially nearest neighbors sit hundreds of sequence
//! positions away; distance-based plans on it reach well outside any
//! sliding-window band.
//!
//! Token ids are a fixed function of the grid cell (offset by a per-doc
//! phase), which makes the corpora learnable: a masked token is fully
//! determined by its position and box embeddings.

use crate::mask::MaskStrategy;
use crate::model::{Corpus, ModelError};
use crate::ocr::{ingest, Document};
use serde_json::json;
use std::io::BufReader;

const MARGIN: i64 = 20;
const WORD_PITCH: i64 = 100;
const WORD_WIDTH: i64 = 60;
const LINE_HEIGHT: i64 = 10;
const GLYPH_HEIGHT: i64 = 8;
const COLUMN_GAP: i64 = 300;

/// First vocabulary id handed to grid cells; lower ids stay reserved for
/// the pad and mask tokens.
pub const FIRST_WORD_ID: u32 = 3;

fn cell_id(line: usize, word: usize, words_per_line: usize, vocab_size: usize, phase: u32) -> u32 {
    assert!(
        vocab_size > FIRST_WORD_ID as usize + 1,
        "vocab_size {vocab_size} leaves no room for word ids"
    );
    let span = (vocab_size as u32) - FIRST_WORD_ID;
    let cell = line as u32 * words_per_line as u32 + word as u32;
    FIRST_WORD_ID + (cell.wrapping_add(phase.wrapping_mul(17))) % span
}

fn word_json(id: u32, x0: i64, y0: i64) -> serde_json::Value {
    json!({ "text_id": id, "box": [x0, y0, x0 + WORD_WIDTH, y0 + GLYPH_HEIGHT] })
}

/// One reading-order grid page as a JSON line: `words_per_line` words per
/// line, `lines` lines, ids keyed to the cell plus `phase`.
pub fn grid_page(lines: usize, words_per_line: usize, vocab_size: usize, phase: u32) -> String {
    let width = 2 * MARGIN + words_per_line as i64 * WORD_PITCH;
    let height = 2 * MARGIN + lines as i64 * LINE_HEIGHT;
    let mut words = Vec::with_capacity(lines * words_per_line);
    for line in 0..lines {
        let y0 = MARGIN + line as i64 * LINE_HEIGHT;
        for word in 0..words_per_line {
            let x0 = MARGIN + word as i64 * WORD_PITCH;
            words.push(word_json(
                cell_id(line, word, words_per_line, vocab_size, phase),
                x0,
                y0,
            ));
        }
    }
    json!({ "page": { "width": width, "height": height }, "words": words }).to_string()
}

/// One two-column page as a JSON line. Each line holds `words_per_side`
/// words in the left column followed by `words_per_side` in the right,
/// with a page gap between the columns that is large next to the line
/// pitch.
pub fn two_column_page(
    lines: usize,
    words_per_side: usize,
    vocab_size: usize,
    phase: u32,
) -> String {
    let words_per_line = 2 * words_per_side;
    let column_span = words_per_side as i64 * WORD_PITCH;
    let width = 2 * MARGIN + 2 * column_span + COLUMN_GAP;
    let height = 2 * MARGIN + lines as i64 * LINE_HEIGHT;
    let mut words = Vec::with_capacity(lines * words_per_line);
    for line in 0..lines {
        let y0 = MARGIN + line as i64 * LINE_HEIGHT;
        for word in 0..words_per_line {
            let x0 = if word < words_per_side {
                MARGIN + word as i64 * WORD_PITCH
            } else {
                MARGIN + column_span + COLUMN_GAP + (word - words_per_side) as i64 * WORD_PITCH
            };
            words.push(word_json(
                cell_id(line, word, words_per_line, vocab_size, phase),
                x0,
                y0,
            ));
        }
    }
    json!({ "page": { "width": width, "height": height }, "words": words }).to_string()
}

fn document_from_page(page_json: String) -> Result<Document, ModelError> {
    Ok(ingest(BufReader::new(page_json.as_bytes()))?)
}

/// A fully ingested reading-order grid document.
pub fn grid_document(
    lines: usize,
    words_per_line: usize,
    vocab_size: usize,
    phase: u32,
) -> Result<Document, ModelError> {
    document_from_page(grid_page(lines, words_per_line, vocab_size, phase))
}

/// A fully ingested two-column document.
pub fn two_column_document(
    lines: usize,
    words_per_side: usize,
    vocab_size: usize,
    phase: u32,
) -> Result<Document, ModelError> {
    document_from_page(two_column_page(lines, words_per_side, vocab_size, phase))
}

/// A ready-to-train corpus of grid documents, one phase per document.
pub fn grid_corpus(
    num_docs: usize,
    lines: usize,
    words_per_line: usize,
    vocab_size: usize,
    strategy: &MaskStrategy,
    threads: usize,
) -> Result<Corpus, ModelError> {
    let docs = (0..num_docs)
        .map(|d| grid_document(lines, words_per_line, vocab_size, d as u32))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::from_documents(&docs, strategy, threads)
}

/// A ready-to-train corpus of two-column documents, one phase per
/// document.
pub fn two_column_corpus(
    num_docs: usize,
    lines: usize,
    words_per_side: usize,
    vocab_size: usize,
    strategy: &MaskStrategy,
    threads: usize,
) -> Result<Corpus, ModelError> {
    let docs = (0..num_docs)
        .map(|d| two_column_document(lines, words_per_side, vocab_size, d as u32))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::from_documents(&docs, strategy, threads)
}

/// Fraction of plan entries lying outside the `|i - j| <= half` band.
/// This is the structural signature separating spatial plans from
/// sequential ones.
pub fn off_band_fraction(plan: &crate::mask::ContextPlan, half: usize) -> f64 {
    let mut total = 0usize;
    let mut off = 0usize;
    for i in 0..plan.len() {
        for &j in plan.row(i) {
            total += 1;
            if (j as i64 - i as i64).unsigned_abs() as usize > half {
                off += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        off as f64 / total as f64
    }
}
