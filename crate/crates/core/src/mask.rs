//! Attention-context plans: which tokens each token may attend to.
//!
//! A [`ContextPlan`] is a banded mask in list form: row `i` holds the sorted
//! key indices token `i` attends to. Four builders produce plans:
//!
//! - [`sliding_window_plan`]: a centered window of odd width, clipped at the
//!   sequence edges.
//! - [`block_random_plan`]: the sequence is cut into fixed-size blocks; each
//!   query block attends its own block, both neighbors, and a seeded random
//!   selection of distant blocks.
//! - [`distance_plan`]: the spatially nearest tokens by box center, via the
//!   exact k-nearest-neighbor search in [`crate::spatial`].
//! - [`hybrid_plans`]: spatial rows for keys paired with sliding-window rows
//!   for values, trimmed so both plans agree on per-row length.
//!
//! Every row is strictly ascending, includes the query token, and never
//! exceeds the plan's nominal context size. Plans serialize to a small
//! little-endian binary format (magic `CPLN`) and render to ASCII PGM for
//! visual inspection, dark pixels marking attendable pairs.

use crate::spatial::{knn_query_threads, CenterSet, Neighbor, SpatialError};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

const PLAN_MAGIC: &[u8; 4] = b"CPLN";
const PLAN_VERSION: u32 = 1;

/// Failures while building, validating, or (de)serializing plans.
#[derive(Error, Debug)]
pub enum MaskError {
    #[error("window must be odd to center it, got {window}")]
    EvenWindow { window: usize },
    #[error("{0} must be at least 1")]
    ZeroParam(&'static str),
    #[error("hybrid requires equal spatial context and window, got {context} and {window}")]
    ContextWindowMismatch { context: usize, window: usize },
    #[error("strategy needs box centers but none were supplied")]
    MissingCenters,
    #[error("center count {centers} does not match sequence length {n}")]
    CenterCountMismatch { centers: usize, n: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("corrupt plan data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// ContextPlan
// ---------------------------------------------------------------------------

/// Per-token attention contexts in compressed row form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextPlan {
    n: usize,
    m: usize,
    row_starts: Vec<u32>,
    indices: Vec<u32>,
}

impl ContextPlan {
    /// Builds and validates a plan from explicit rows.
    ///
    /// Every row must be strictly ascending, stay below `n`, contain its own
    /// token index, and hold between 1 and `m` entries.
    pub fn from_rows(n: usize, m: usize, rows: Vec<Vec<u32>>) -> Result<Self, MaskError> {
        if n == 0 {
            return Err(MaskError::ZeroParam("sequence length"));
        }
        if m == 0 {
            return Err(MaskError::ZeroParam("context size"));
        }
        if rows.len() != n {
            return Err(MaskError::InvalidPlan(format!(
                "expected {n} rows, got {}",
                rows.len()
            )));
        }
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut row_starts = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(total);
        row_starts.push(0u32);
        for (i, row) in rows.iter().enumerate() {
            validate_row(i, row, n, m)?;
            indices.extend_from_slice(row);
            row_starts.push(indices.len() as u32);
        }
        Ok(ContextPlan {
            n,
            m,
            row_starts,
            indices,
        })
    }

    /// Sequence length (number of rows).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Nominal context size: no row holds more than this many indices.
    pub fn context_size(&self) -> usize {
        self.m
    }

    /// Attendable key indices for token `i`, strictly ascending.
    pub fn row(&self, i: usize) -> &[u32] {
        let (a, b) = (self.row_starts[i] as usize, self.row_starts[i + 1] as usize);
        &self.indices[a..b]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.n).map(move |i| self.row(i))
    }

    /// Total number of attendable (query, key) pairs.
    pub fn total_entries(&self) -> usize {
        self.indices.len()
    }

    /// Longest row in the plan.
    pub fn max_row_len(&self) -> usize {
        (0..self.n)
            .map(|i| self.row(i).len())
            .max()
            .unwrap_or(0)
    }

    /// True when row `i` is one unbroken index range, which lets attention
    /// kernels slice keys and values directly instead of gathering copies.
    pub fn row_is_contiguous(&self, i: usize) -> bool {
        let row = self.row(i);
        row[row.len() - 1] - row[0] + 1 == row.len() as u32
    }

    // -- binary format ------------------------------------------------------

    /// Serializes to the `CPLN` little-endian binary layout: magic, version,
    /// `n`, `m`, then per row a count followed by that many indices, all u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(16 + 4 * (self.n + self.indices.len()));
        out.extend_from_slice(PLAN_MAGIC);
        out.extend_from_slice(&PLAN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        for row in self.rows() {
            out.extend_from_slice(&(row.len() as u32).to_le_bytes());
            for &j in row {
                out.extend_from_slice(&j.to_le_bytes());
            }
        }
        out
    }

    /// Parses and fully validates the `CPLN` binary layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut cursor = ByteCursor::new(bytes);
        let magic = cursor.take(4)?;
        if magic != PLAN_MAGIC {
            return Err(MaskError::Corrupt("bad magic".into()));
        }
        let version = cursor.u32()?;
        if version != PLAN_VERSION {
            return Err(MaskError::Corrupt(format!(
                "unsupported version {version}"
            )));
        }
        let n = cursor.u32()? as usize;
        let m = cursor.u32()? as usize;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let count = cursor.u32()? as usize;
            let mut row = Vec::with_capacity(count);
            for _ in 0..count {
                row.push(cursor.u32()?);
            }
            rows.push(row);
        }
        if !cursor.at_end() {
            return Err(MaskError::Corrupt("trailing bytes".into()));
        }
        ContextPlan::from_rows(n, m, rows)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<(), MaskError> {
        writer.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self, MaskError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        ContextPlan::from_bytes(&bytes)
    }
}

fn validate_row(i: usize, row: &[u32], n: usize, m: usize) -> Result<(), MaskError> {
    if row.is_empty() {
        return Err(MaskError::InvalidPlan(format!("row {i} is empty")));
    }
    if row.len() > m {
        return Err(MaskError::InvalidPlan(format!(
            "row {i} has {} entries, above context size {m}",
            row.len()
        )));
    }
    for pair in row.windows(2) {
        if pair[0] >= pair[1] {
            return Err(MaskError::InvalidPlan(format!(
                "row {i} is not strictly ascending"
            )));
        }
    }
    if row[row.len() - 1] as usize >= n {
        return Err(MaskError::InvalidPlan(format!(
            "row {i} references token {} outside 0..{n}",
            row[row.len() - 1]
        )));
    }
    if row.binary_search(&(i as u32)).is_err() {
        return Err(MaskError::InvalidPlan(format!(
            "row {i} does not include its own token"
        )));
    }
    Ok(())
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], MaskError> {
        if self.pos + len > self.bytes.len() {
            return Err(MaskError::Corrupt("unexpected end of data".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, MaskError> {
        let bytes = self.take(4)?;
        Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

// ---------------------------------------------------------------------------
// Dense form and PGM rendering
// ---------------------------------------------------------------------------

/// Expands a plan into a dense 0/1 mask, `mask[[i, j]] = 1` iff `j` is in
/// row `i`. Intended for oracles, visualization, and small-scale checks.
pub fn plan_to_dense(plan: &ContextPlan) -> Array2<u8> {
    let n = plan.len();
    let mut mask = Array2::zeros((n, n));
    for (i, row) in plan.rows().enumerate() {
        for &j in row {
            mask[[i, j as usize]] = 1;
        }
    }
    mask
}

/// Renders a dense mask as ASCII PGM (`P2`), attendable cells dark (0) on a
/// light (255) background.
pub fn dense_to_pgm(mask: &Array2<u8>) -> String {
    let (rows, cols) = mask.dim();
    let mut out = String::with_capacity(16 + rows * cols * 4);
    out.push_str(&format!("P2\n{cols} {rows}\n255\n"));
    for i in 0..rows {
        let mut line = String::with_capacity(cols * 4);
        for j in 0..cols {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(if mask[[i, j]] != 0 { "0" } else { "255" });
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Renders a plan directly to PGM.
pub fn plan_to_pgm(plan: &ContextPlan) -> String {
    dense_to_pgm(&plan_to_dense(plan))
}

// ---------------------------------------------------------------------------
// Sliding window
// ---------------------------------------------------------------------------

/// Centered sliding window: row `i` covers `i - (window-1)/2 ..= i +
/// (window-1)/2`, clipped to the sequence. The window must be odd so the
/// center is well defined; [`MaskStrategy`] rounds even requests down
/// before calling this.
pub fn sliding_window_plan(n: usize, window: usize) -> Result<ContextPlan, MaskError> {
    if n == 0 {
        return Err(MaskError::ZeroParam("sequence length"));
    }
    if window == 0 {
        return Err(MaskError::ZeroParam("window"));
    }
    if window % 2 == 0 {
        return Err(MaskError::EvenWindow { window });
    }
    let half = (window - 1) / 2;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        rows.push((lo as u32..=hi as u32).collect());
    }
    ContextPlan::from_rows(n, window, rows)
}

// ---------------------------------------------------------------------------
// Sliding window + random blocks
// ---------------------------------------------------------------------------

/// Block-level structure behind [`block_random_plan`]: which random key
/// blocks each query block was assigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub block_size: usize,
    pub num_blocks: usize,
    /// Random key blocks per query block, ascending, never the query block
    /// itself or either sliding neighbor.
    pub random_targets: Vec<Vec<u32>>,
    pub seed: u64,
}

impl BlockPlan {
    /// Draws `random_blocks` distinct targets per query block, uniformly
    /// from the blocks outside the query block's sliding neighborhood.
    /// Each query block has its own counter-derived random stream, so the
    /// result is independent of evaluation order. Blocks with fewer eligible
    /// candidates than requested simply take what exists.
    pub fn build(
        n: usize,
        block_size: usize,
        random_blocks: usize,
        seed: u64,
    ) -> Result<Self, MaskError> {
        if n == 0 {
            return Err(MaskError::ZeroParam("sequence length"));
        }
        if block_size == 0 {
            return Err(MaskError::ZeroParam("block size"));
        }
        let num_blocks = n.div_ceil(block_size);
        let mut random_targets = Vec::with_capacity(num_blocks);
        for qb in 0..num_blocks {
            let lo = qb.saturating_sub(1);
            let hi = (qb + 1).min(num_blocks - 1);
            let mut candidates: Vec<u32> = (0..num_blocks as u32)
                .filter(|&b| (b as usize) < lo || (b as usize) > hi)
                .collect();
            let take = random_blocks.min(candidates.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(qb as u64);
            for slot in 0..take {
                let pick = rng.gen_range(slot..candidates.len());
                candidates.swap(slot, pick);
            }
            candidates.truncate(take);
            candidates.sort_unstable();
            random_targets.push(candidates);
        }
        Ok(BlockPlan {
            block_size,
            num_blocks,
            random_targets,
            seed,
        })
    }

    /// Token range covered by block `b`, clipped at the sequence end.
    fn block_tokens(&self, b: usize, n: usize) -> std::ops::Range<u32> {
        let start = b * self.block_size;
        let end = ((b + 1) * self.block_size).min(n);
        start as u32..end as u32
    }
}

/// Blocked sliding window plus seeded random blocks: every token in query
/// block `b` attends all tokens in blocks `b-1 ..= b+1` (clipped) and in
/// `b`'s random target blocks.
pub fn block_random_plan(
    n: usize,
    block_size: usize,
    random_blocks: usize,
    seed: u64,
) -> Result<ContextPlan, MaskError> {
    let block_plan = BlockPlan::build(n, block_size, random_blocks, seed)?;
    block_plan_to_context(&block_plan, n)
}

/// Expands a [`BlockPlan`] into token-level rows.
pub fn block_plan_to_context(block_plan: &BlockPlan, n: usize) -> Result<ContextPlan, MaskError> {
    if n == 0 {
        return Err(MaskError::ZeroParam("sequence length"));
    }
    let num_blocks = block_plan.num_blocks;
    let mut block_rows: Vec<Vec<u32>> = Vec::with_capacity(num_blocks);
    for qb in 0..num_blocks {
        let lo = qb.saturating_sub(1);
        let hi = (qb + 1).min(num_blocks - 1);
        let mut blocks: Vec<u32> = (lo as u32..=hi as u32).collect();
        blocks.extend_from_slice(&block_plan.random_targets[qb]);
        blocks.sort_unstable();
        blocks.dedup();
        let mut row = Vec::new();
        for &b in &blocks {
            row.extend(block_plan.block_tokens(b as usize, n));
        }
        block_rows.push(row);
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(block_rows[i / block_plan.block_size].clone());
    }
    let row_cap = block_plan
        .block_size
        .saturating_mul(3 + block_plan.random_targets.iter().map(Vec::len).max().unwrap_or(0));
    ContextPlan::from_rows(n, row_cap.min(n).max(1), rows)
}

// ---------------------------------------------------------------------------
// Spatial distance
// ---------------------------------------------------------------------------

/// Picks row indices from a k-nearest-neighbor row: the `keep` best by
/// `(d2, index)`. The query token always stays in its own row; if a crowd of
/// equal-coordinate duplicates would push it out, the farthest kept
/// neighbor is dropped instead.
fn select_row(knn_row: &[Neighbor], keep: usize, query: u32) -> Vec<u32> {
    let keep = keep.min(knn_row.len()).max(1);
    let mut row: Vec<u32> = knn_row[..keep].iter().map(|nb| nb.index).collect();
    if !row.contains(&query) {
        row[keep - 1] = query;
    }
    row.sort_unstable();
    row
}

/// Spatial-distance plan: row `i` holds the `min(context, n)` tokens whose
/// box centers are nearest to center `i`, sorted by token index.
pub fn distance_plan(centers: &CenterSet, context: usize) -> Result<ContextPlan, MaskError> {
    distance_plan_threads(centers, context, 1)
}

/// [`distance_plan`] with the neighbor queries spread over worker threads.
pub fn distance_plan_threads(
    centers: &CenterSet,
    context: usize,
    threads: usize,
) -> Result<ContextPlan, MaskError> {
    if context == 0 {
        return Err(MaskError::ZeroParam("spatial context"));
    }
    let n = centers.len();
    let k = context.min(n);
    let knn = knn_query_threads(centers, k, threads)?;
    let rows = knn
        .iter()
        .enumerate()
        .map(|(i, row)| select_row(row, k, i as u32))
        .collect();
    ContextPlan::from_rows(n, context, rows)
}

// ---------------------------------------------------------------------------
// Hybrid: spatial keys, sliding-window values
// ---------------------------------------------------------------------------

/// A key plan and a value plan with identical per-row lengths, gathered
/// position for position by the attention kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanPair {
    key_plan: ContextPlan,
    /// Present only when keys and values use different plans.
    value_plan: Option<ContextPlan>,
}

impl PlanPair {
    /// A single plan used for both keys and values.
    pub fn shared(plan: ContextPlan) -> Self {
        PlanPair {
            key_plan: plan,
            value_plan: None,
        }
    }

    /// Distinct key and value plans; rows must pair up length for length.
    pub fn split(key_plan: ContextPlan, value_plan: ContextPlan) -> Result<Self, MaskError> {
        if key_plan.len() != value_plan.len() {
            return Err(MaskError::InvalidPlan(
                "key and value plans differ in sequence length".into(),
            ));
        }
        for i in 0..key_plan.len() {
            if key_plan.row(i).len() != value_plan.row(i).len() {
                return Err(MaskError::InvalidPlan(format!(
                    "key and value rows differ in length at token {i}"
                )));
            }
        }
        Ok(PlanPair {
            key_plan,
            value_plan: Some(value_plan),
        })
    }

    pub fn key(&self) -> &ContextPlan {
        &self.key_plan
    }

    pub fn value(&self) -> &ContextPlan {
        self.value_plan.as_ref().unwrap_or(&self.key_plan)
    }

    /// True when keys and values share one plan.
    pub fn is_shared(&self) -> bool {
        self.value_plan.is_none()
    }
}

/// Hybrid plan pair: spatially nearest keys, sliding-window values.
///
/// The spatial context and the window must match so the gathered key and
/// value tensors share a shape. Near the sequence edges the clipped window
/// rows are shorter than the spatial rows, so the spatial rows drop their
/// farthest neighbors to pair up, which keeps the two plans identical when
/// box centers follow reading order.
pub fn hybrid_plans(
    centers: &CenterSet,
    context: usize,
    window: usize,
) -> Result<PlanPair, MaskError> {
    hybrid_plans_threads(centers, context, window, 1)
}

/// [`hybrid_plans`] with the neighbor queries spread over worker threads.
pub fn hybrid_plans_threads(
    centers: &CenterSet,
    context: usize,
    window: usize,
    threads: usize,
) -> Result<PlanPair, MaskError> {
    if context != window {
        return Err(MaskError::ContextWindowMismatch { context, window });
    }
    if window % 2 == 0 {
        return Err(MaskError::EvenWindow { window });
    }
    let n = centers.len();
    let value_plan = sliding_window_plan(n, window)?;
    let k = context.min(n);
    let knn = knn_query_threads(centers, k, threads)?;
    let rows = knn
        .iter()
        .enumerate()
        .map(|(i, row)| select_row(row, value_plan.row(i).len(), i as u32))
        .collect();
    let key_plan = ContextPlan::from_rows(n, context, rows)?;
    PlanPair::split(key_plan, value_plan)
}

// ---------------------------------------------------------------------------
// Strategy dispatch
// ---------------------------------------------------------------------------

/// The four context regimes, with their parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Centered sliding window of `window` tokens.
    SlidingWindow { window: usize },
    /// Blocked sliding window plus `random_blocks` seeded random blocks.
    SlidingWindowRandom {
        block_size: usize,
        random_blocks: usize,
        seed: u64,
    },
    /// `context` spatially nearest tokens by box center.
    Distance { context: usize },
    /// Spatial keys paired with sliding-window values.
    DistanceSlidingWindow { context: usize, window: usize },
}

impl MaskStrategy {
    /// True for strategies that need box centers.
    pub fn needs_centers(&self) -> bool {
        matches!(
            self,
            MaskStrategy::Distance { .. } | MaskStrategy::DistanceSlidingWindow { .. }
        )
    }

    /// Largest odd window not above the requested one. Even window sizes
    /// are accepted at this level and rounded down so the window can be
    /// centered; `(w - 1) / 2` tokens land on each side either way.
    fn centered(window: usize) -> Result<usize, MaskError> {
        if window == 0 {
            return Err(MaskError::ZeroParam("window"));
        }
        Ok(if window % 2 == 0 { window - 1 } else { window })
    }

    /// Builds the plan pair for a sequence of `n` tokens. Spatial
    /// strategies require `centers` with exactly `n` points.
    pub fn build(&self, n: usize, centers: Option<&CenterSet>) -> Result<PlanPair, MaskError> {
        self.build_threads(n, centers, 1)
    }

    /// [`MaskStrategy::build`] with spatial queries spread over threads.
    pub fn build_threads(
        &self,
        n: usize,
        centers: Option<&CenterSet>,
        threads: usize,
    ) -> Result<PlanPair, MaskError> {
        let centers = |err_if_missing: bool| -> Result<Option<&CenterSet>, MaskError> {
            match centers {
                Some(cs) => {
                    if cs.len() != n {
                        return Err(MaskError::CenterCountMismatch {
                            centers: cs.len(),
                            n,
                        });
                    }
                    Ok(Some(cs))
                }
                None if err_if_missing => Err(MaskError::MissingCenters),
                None => Ok(None),
            }
        };
        match *self {
            MaskStrategy::SlidingWindow { window } => {
                centers(false)?;
                Ok(PlanPair::shared(sliding_window_plan(
                    n,
                    Self::centered(window)?,
                )?))
            }
            MaskStrategy::SlidingWindowRandom {
                block_size,
                random_blocks,
                seed,
            } => {
                centers(false)?;
                Ok(PlanPair::shared(block_random_plan(
                    n,
                    block_size,
                    random_blocks,
                    seed,
                )?))
            }
            MaskStrategy::Distance { context } => {
                let cs = centers(true)?.unwrap();
                Ok(PlanPair::shared(distance_plan_threads(
                    cs, context, threads,
                )?))
            }
            MaskStrategy::DistanceSlidingWindow { context, window } => {
                let cs = centers(true)?.unwrap();
                hybrid_plans_threads(cs, context, Self::centered(window)?, threads)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
