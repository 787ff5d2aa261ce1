//! OCR ingestion for multi-page documents.
//!
//! Input is one JSON object per line, one page per line:
//!
//! ```text
//! {"page":{"width":1000,"height":1200},"words":[{"text_id":42,"box":[10,20,110,220]}]}
//! ```
//!
//! The pipeline has three stages, each a one-way step:
//!
//! 1. [`parse_ocr`] reads and validates the raw per-page geometry.
//! 2. [`link_pages`] stacks pages vertically into one global frame: a box on
//!    page `p` keeps its x coordinates and has the summed height of pages
//!    `0..p` added to its y coordinates.
//! 3. [`normalize_boxes`] maps global coordinates onto a fixed 1024-step
//!    grid via `floor(v * 1023 / extent)`, clamped to `0..=1023`, where the
//!    horizontal extent is the widest page and the vertical extent is the
//!    sum of all page heights.
//!
//! Re-running a stage is an error by contract; [`Document::stage`] tracks
//! progress so a second normalization is flagged instead of silently
//! shrinking every box.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::BufRead;
use thiserror::Error;

/// Largest coordinate on the normalized grid (the grid has 1024 steps).
pub const NORM_MAX: u16 = 1023;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Failures while parsing or transforming OCR geometry.
#[derive(Error, Debug)]
pub enum OcrError {
    /// A line was not valid JSON for the expected page schema.
    #[error("line {line}: {source}")]
    Parse {
        /// 1-based input line number.
        line: usize,
        source: serde_json::Error,
    },
    /// A word box failed validation. Message names the offending box.
    #[error("box {word} on page {page}: {reason}")]
    BadBox {
        word: usize,
        page: usize,
        reason: &'static str,
    },
    /// A page geometry failed validation.
    #[error("page {page}: {reason}")]
    BadPage { page: usize, reason: &'static str },
    /// A stage was invoked out of order or twice.
    #[error("pipeline stage error: {0}")]
    Stage(&'static str),
    /// The document has boxes but no usable global extent.
    #[error("cannot normalize: zero global dimensions")]
    ZeroGlobalExtent,
    /// A serialized document failed structural validation.
    #[error("document: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Serialized document JSON could not be parsed.
    #[error("document JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Geometry types
// ---------------------------------------------------------------------------

/// Word box in raw pixel coordinates, per-page or global depending on stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[i64; 4]", try_from = "[i64; 4]")]
pub struct RawBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl RawBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self, &'static str> {
        if x0 < 0 || y0 < 0 || x1 < 0 || y1 < 0 {
            return Err("negative coordinates");
        }
        if x0 > x1 {
            return Err("x0 > x1");
        }
        if y0 > y1 {
            return Err("y0 > y1");
        }
        Ok(Self { x0, y0, x1, y1 })
    }
}

impl From<RawBox> for [i64; 4] {
    fn from(b: RawBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[i64; 4]> for RawBox {
    type Error = &'static str;
    fn try_from(v: [i64; 4]) -> Result<Self, Self::Error> {
        RawBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Word box on the normalized `0..=1023` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "[u16; 4]", try_from = "[u16; 4]")]
pub struct BoundingBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl BoundingBox {
    pub fn new(x0: u16, y0: u16, x1: u16, y1: u16) -> Result<Self, &'static str> {
        if x0 > NORM_MAX || y0 > NORM_MAX || x1 > NORM_MAX || y1 > NORM_MAX {
            return Err("coordinate above 1023");
        }
        if x0 > x1 {
            return Err("x0 > x1");
        }
        if y0 > y1 {
            return Err("y0 > y1");
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Geometric center of the box as real coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 as f64 + self.x1 as f64) / 2.0,
            (self.y0 as f64 + self.y1 as f64) / 2.0,
        )
    }
}

impl From<BoundingBox> for [u16; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[u16; 4]> for BoundingBox {
    type Error = &'static str;
    fn try_from(v: [u16; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Size of one input page in raw pixels; index is the ordinal in read order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageGeometry {
    pub index: usize,
    pub width: u32,
    pub height: u32,
}

/// One word: a vocabulary id plus its box and owning page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    /// Vocabulary index carried through from the OCR input.
    pub id: u32,
    /// Raw box; per-page before [`link_pages`], global afterwards.
    pub bbox: RawBox,
    /// Owning page ordinal.
    pub page: usize,
}

/// How far through the pipeline a document's coordinates have traveled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Boxes are in per-page pixel coordinates.
    PerPage,
    /// Boxes share one global frame (pages stacked vertically).
    Global,
    /// Global boxes plus a parallel normalized grid box per token.
    Normalized,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::PerPage => write!(f, "per_page"),
            Stage::Global => write!(f, "global"),
            Stage::Normalized => write!(f, "normalized"),
        }
    }
}

/// A parsed document: pages, tokens in reading order, and (after
/// normalization) a grid box per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub pages: Vec<PageGeometry>,
    pub tokens: Vec<Token>,
    /// Parallel to `tokens` once [`normalize_boxes`] has run, empty before.
    pub normalized_boxes: Vec<BoundingBox>,
    pub stage: Stage,
}

impl Document {
    /// An empty, fully-processed document (zero pages, zero tokens).
    pub fn empty() -> Self {
        Document {
            pages: Vec::new(),
            tokens: Vec::new(),
            normalized_boxes: Vec::new(),
            stage: Stage::PerPage,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Vertical offset applied to each page when stacking, i.e. the summed
    /// heights of all earlier pages. Strictly increasing because every page
    /// has positive height.
    pub fn page_offsets(&self) -> Vec<i64> {
        let mut offsets = Vec::with_capacity(self.pages.len());
        let mut acc: i64 = 0;
        for page in &self.pages {
            offsets.push(acc);
            acc += page.height as i64;
        }
        offsets
    }

    /// Widest page width; the horizontal extent of the global frame.
    pub fn global_width(&self) -> u64 {
        self.pages.iter().map(|p| p.width as u64).max().unwrap_or(0)
    }

    /// Sum of page heights; the vertical extent of the global frame.
    pub fn global_height(&self) -> u64 {
        self.pages.iter().map(|p| p.height as u64).sum()
    }

    /// Checks structural invariants shared by all stages.
    pub fn validate(&self) -> Result<(), OcrError> {
        for (i, page) in self.pages.iter().enumerate() {
            if page.index != i {
                return Err(OcrError::Invalid(format!(
                    "page {i} carries index {}",
                    page.index
                )));
            }
            if page.width == 0 || page.height == 0 {
                return Err(OcrError::BadPage {
                    page: i,
                    reason: "non-positive dimensions",
                });
            }
        }
        for (t, token) in self.tokens.iter().enumerate() {
            if token.page >= self.pages.len() {
                return Err(OcrError::Invalid(format!(
                    "token {t} references missing page {}",
                    token.page
                )));
            }
        }
        match self.stage {
            Stage::Normalized => {
                if self.normalized_boxes.len() != self.tokens.len() {
                    return Err(OcrError::Invalid(format!(
                        "normalized box count {} does not match token count {}",
                        self.normalized_boxes.len(),
                        self.tokens.len()
                    )));
                }
            }
            _ => {
                if !self.normalized_boxes.is_empty() {
                    return Err(OcrError::Invalid(
                        "normalized boxes present before normalization stage".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage 1: parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct LinePage {
    width: i64,
    height: i64,
}

#[derive(Deserialize)]
struct LineWord {
    text_id: u32,
    #[serde(rename = "box")]
    bbox: [i64; 4],
}

#[derive(Deserialize)]
struct Line {
    page: LinePage,
    words: Vec<LineWord>,
}

/// Parses page-per-line OCR JSON into a per-page [`Document`].
///
/// Blank lines are skipped; any other malformed line is an error carrying
/// its 1-based line number. An empty reader yields an empty document.
pub fn parse_ocr<R: BufRead>(reader: R) -> Result<Document, OcrError> {
    let mut pages = Vec::new();
    let mut tokens = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|source| OcrError::Parse {
            line: lineno + 1,
            source,
        })?;
        let page_index = pages.len();
        if parsed.page.width <= 0 || parsed.page.height <= 0 {
            return Err(OcrError::BadPage {
                page: page_index,
                reason: "non-positive dimensions",
            });
        }
        pages.push(PageGeometry {
            index: page_index,
            width: parsed.page.width as u32,
            height: parsed.page.height as u32,
        });
        for (word_index, word) in parsed.words.into_iter().enumerate() {
            let bbox = RawBox::new(word.bbox[0], word.bbox[1], word.bbox[2], word.bbox[3])
                .map_err(|reason| OcrError::BadBox {
                    word: word_index,
                    page: page_index,
                    reason,
                })?;
            tokens.push(Token {
                id: word.text_id,
                bbox,
                page: page_index,
            });
        }
    }
    let doc = Document {
        pages,
        tokens,
        normalized_boxes: Vec::new(),
        stage: Stage::PerPage,
    };
    doc.validate()?;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Stage 2: page linking
// ---------------------------------------------------------------------------

/// Stacks all pages into one vertical frame: token boxes on page `p` get the
/// summed height of pages `0..p` added to their y coordinates; x coordinates
/// are unchanged.
pub fn link_pages(mut doc: Document) -> Result<Document, OcrError> {
    if doc.stage != Stage::PerPage {
        return Err(OcrError::Stage("pages are already linked"));
    }
    let offsets = doc.page_offsets();
    for token in &mut doc.tokens {
        let off = offsets[token.page];
        token.bbox.y0 += off;
        token.bbox.y1 += off;
    }
    doc.stage = Stage::Global;
    Ok(doc)
}

// ---------------------------------------------------------------------------
// Stage 3: normalization
// ---------------------------------------------------------------------------

/// `floor(v * 1023 / extent)` clamped onto the normalized grid.
fn norm_coord(v: i64, extent: u64) -> u16 {
    debug_assert!(v >= 0 && extent > 0);
    let scaled = (v as i128 * NORM_MAX as i128) / extent as i128;
    scaled.clamp(0, NORM_MAX as i128) as u16
}

/// Maps every global box onto the `0..=1023` grid.
///
/// Requires linked pages, and refuses to run twice: normalized coordinates
/// fed back through the divisor would silently collapse toward the origin.
pub fn normalize_boxes(mut doc: Document) -> Result<Document, OcrError> {
    match doc.stage {
        Stage::Global => {}
        Stage::PerPage => return Err(OcrError::Stage("pages must be linked before normalizing")),
        Stage::Normalized => return Err(OcrError::Stage("document is already normalized")),
    }
    if doc.pages.is_empty() {
        doc.stage = Stage::Normalized;
        return Ok(doc);
    }
    let gw = doc.global_width();
    let gh = doc.global_height();
    if gw == 0 || gh == 0 {
        return Err(OcrError::ZeroGlobalExtent);
    }
    let mut normalized = Vec::with_capacity(doc.tokens.len());
    for (t, token) in doc.tokens.iter().enumerate() {
        let b = token.bbox;
        let nbox = BoundingBox::new(
            norm_coord(b.x0, gw),
            norm_coord(b.y0, gh),
            norm_coord(b.x1, gw),
            norm_coord(b.y1, gh),
        )
        .map_err(|reason| OcrError::BadBox {
            word: t,
            page: token.page,
            reason,
        })?;
        normalized.push(nbox);
    }
    doc.normalized_boxes = normalized;
    doc.stage = Stage::Normalized;
    Ok(doc)
}

/// Full pipeline: parse, link, normalize.
pub fn ingest<R: BufRead>(reader: R) -> Result<Document, OcrError> {
    normalize_boxes(link_pages(parse_ocr(reader)?)?)
}

// ---------------------------------------------------------------------------
// Document serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PageJson {
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct TokenJson {
    id: u32,
    #[serde(rename = "box")]
    bbox: [i64; 4],
    page: usize,
    nbox: Option<[u16; 4]>,
}

#[derive(Serialize, Deserialize)]
struct DocumentJson {
    frame: Stage,
    pages: Vec<PageJson>,
    tokens: Vec<TokenJson>,
}

impl Document {
    /// Serializes to a single JSON object with deterministic field order.
    pub fn to_json(&self) -> String {
        let doc = DocumentJson {
            frame: self.stage,
            pages: self
                .pages
                .iter()
                .map(|p| PageJson {
                    width: p.width,
                    height: p.height,
                })
                .collect(),
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .map(|(t, token)| TokenJson {
                    id: token.id,
                    bbox: token.bbox.into(),
                    page: token.page,
                    nbox: self.normalized_boxes.get(t).map(|&b| b.into()),
                })
                .collect(),
        };
        serde_json::to_string(&doc).expect("document serialization cannot fail")
    }

    /// Parses and validates a document serialized by [`Document::to_json`].
    pub fn from_json(text: &str) -> Result<Self, OcrError> {
        let raw: DocumentJson = serde_json::from_str(text)?;
        let pages = raw
            .pages
            .into_iter()
            .enumerate()
            .map(|(index, p)| PageGeometry {
                index,
                width: p.width,
                height: p.height,
            })
            .collect();
        let mut tokens = Vec::with_capacity(raw.tokens.len());
        let mut normalized = Vec::new();
        for (t, tok) in raw.tokens.into_iter().enumerate() {
            let bbox = RawBox::try_from(tok.bbox)
                .map_err(|reason| OcrError::Invalid(format!("token {t}: {reason}")))?;
            if let Some(nbox) = tok.nbox {
                let nbox = BoundingBox::try_from(nbox)
                    .map_err(|reason| OcrError::Invalid(format!("token {t} nbox: {reason}")))?;
                normalized.push(nbox);
            }
            tokens.push(Token {
                id: tok.id,
                bbox,
                page: tok.page,
            });
        }
        if !normalized.is_empty() && normalized.len() != tokens.len() {
            return Err(OcrError::Invalid(
                "some tokens carry nbox and some do not".into(),
            ));
        }
        let doc = Document {
            pages,
            tokens,
            normalized_boxes: normalized,
            stage: raw.frame,
        };
        doc.validate()?;
        Ok(doc)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
