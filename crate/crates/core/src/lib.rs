//! Sparse attention contexts for long multi-page documents.
//!
//! The crate is organized around a small pipeline:
//!
//! - [`ocr`] ingests OCR output (one page per JSON line), stitches pages into
//!   a single vertical coordinate frame, and normalizes word boxes to a
//!   1024-step grid.
//! - [`spatial`] computes exact k-nearest-neighbor queries over box centers.
//! - [`mask`] builds per-token attention contexts (sliding window, sliding
//!   window plus random blocks, spatial distance, and a distance/window
//!   hybrid) and serializes or renders them.
//! - [`attention`] implements dense and gathered scaled dot-product
//!   attention with a hand-written backward pass.
//! - [`model`] is a desk-scale masked-LM encoder that exercises the masks
//!   end to end: embeddings, encoder layers, masking, AdamW, checkpoints.
//! - [`synth`] generates deterministic synthetic documents and corpora used
//!   by benchmarks, smoke training, and tests.

pub mod attention;
pub mod mask;
pub mod model;
pub mod ocr;
pub mod spatial;
pub mod synth;
