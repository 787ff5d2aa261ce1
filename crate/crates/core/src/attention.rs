//! Scaled dot-product attention, dense and gathered.
//!
//! [`full_attention`] is the quadratic reference: every query scores every
//! key, with an optional 0/1 mask adding a large negative sentinel to
//! blocked scores before the softmax. [`gathered_attention`] is the banded
//! kernel: each query only touches the keys its [`ContextPlan`] row names,
//! so time and memory scale with `n * m * d` instead of `n^2 * d`. A key
//! plan and a value plan may differ per row only in content, never in
//! length; score `j` always weights the value gathered at position `j`.
//!
//! Numeric rules shared by both kernels so their outputs agree bit for bit
//! on identical attendable sets:
//!
//! - dot products, softmax sums, and output accumulations run in `f64`
//!   regardless of the element type, reduced in ascending gathered order;
//! - blocked scores get `-1e9` added rather than true negative infinity;
//! - non-contiguous plan rows are gathered into scratch buffers (one per
//!   worker, `O(m * d)`), while contiguous rows borrow the input directly.
//!
//! The backward pass is hand written; tests check it against central finite
//! differences and against the dense gradient on full-window plans.

use crate::mask::{ContextPlan, PlanPair};
use ndarray::{Array2, NdFloat};
use std::sync::Arc;
use thiserror::Error;

/// Additive sentinel standing in for negative infinity in masked scores.
pub const MASK_SENTINEL: f64 = -1e9;

/// Failures in the attention kernels.
#[derive(Error, Debug)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} masks out every key")]
    AllMasked { row: usize },
    #[error("row {row} contains a non-finite score")]
    NonFinite { row: usize },
    #[error("key and value plans differ in row length at token {row}")]
    PlanLengthMismatch { row: usize },
    #[error("plan covers {plan} tokens but inputs have {input} rows")]
    PlanCoverage { plan: usize, input: usize },
    #[error("backward called without a cached forward pass")]
    MissingCache,
}

/// Head geometry shared by a multi-head attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// Per-head key/query width.
    pub d_k: usize,
    pub num_heads: usize,
}

impl AttentionParams {
    /// Score scale `1 / sqrt(d_k)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d_k as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Shared numeric helpers
// ---------------------------------------------------------------------------

#[inline]
fn f<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 converts to every float width")
}

#[inline]
fn dot_f64<F: NdFloat>(a: &[F], b: &[F]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for t in 0..a.len() {
        acc += a[t].to_f64().unwrap() * b[t].to_f64().unwrap();
    }
    acc
}

/// In-place softmax over finite scores (`-inf` allowed), f64 throughout:
/// subtract the row max, exponentiate, normalize by the ascending-order sum.
/// Returns an error variant marker instead of touching the buffer when the
/// row has no finite entry or a NaN/+inf one.
fn softmax_in_place(scores: &mut [f64]) -> Result<(), SoftmaxFault> {
    let mut max = f64::NEG_INFINITY;
    for &s in scores.iter() {
        if s.is_nan() || s == f64::INFINITY {
            return Err(SoftmaxFault::NonFinite);
        }
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(SoftmaxFault::AllMasked);
    }
    let mut sum = 0.0f64;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    Ok(())
}

enum SoftmaxFault {
    AllMasked,
    NonFinite,
}

impl SoftmaxFault {
    fn at(self, row: usize) -> AttentionError {
        match self {
            SoftmaxFault::AllMasked => AttentionError::AllMasked { row },
            SoftmaxFault::NonFinite => AttentionError::NonFinite { row },
        }
    }
}

/// Softmax of one score row. Entries must be finite or negative infinity,
/// with at least one finite entry; the result sums to one.
pub fn softmax_row<F: NdFloat>(scores: &[F]) -> Result<Vec<F>, AttentionError> {
    let mut buf: Vec<f64> = scores.iter().map(|s| s.to_f64().unwrap()).collect();
    softmax_in_place(&mut buf).map_err(|fault| fault.at(0))?;
    Ok(buf.into_iter().map(f::<F>).collect())
}

fn split_rows(n: usize, threads: usize) -> usize {
    let threads = threads.max(1).min(n.max(1));
    n.div_ceil(threads)
}

// ---------------------------------------------------------------------------
// Dense attention
// ---------------------------------------------------------------------------

/// Dense scaled dot-product attention with an optional 0/1 mask.
///
/// `out[i] = softmax(q[i] . k^T / sqrt(d_k) + sentinel * (1 - mask[i])) . v`.
/// Rows whose mask admits no key are an error, as are non-finite scores.
pub fn full_attention<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    mask: Option<&Array2<u8>>,
) -> Result<Array2<F>, AttentionError> {
    full_attention_threads(q, k, v, mask, 1)
}

/// [`full_attention`] with query rows split across worker threads. Each row
/// is computed independently, so the output is identical for every thread
/// count.
pub fn full_attention_threads<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    mask: Option<&Array2<u8>>,
    threads: usize,
) -> Result<Array2<F>, AttentionError> {
    check_dense_shapes(q, k, v, mask)?;
    let n = q.nrows();
    let d_v = v.ncols();
    let mut out = Array2::<F>::zeros((n, d_v));
    let chunk = split_rows(n, threads);
    let results: Vec<Result<(), AttentionError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (t, out_chunk) in out
            .as_slice_mut()
            .expect("freshly allocated output is standard layout")
            .chunks_mut(chunk * d_v)
            .enumerate()
        {
            handles.push(scope.spawn(move || {
                let base = t * chunk;
                let mut scores = vec![0.0f64; k.nrows()];
                for (local, out_row) in out_chunk.chunks_mut(d_v).enumerate() {
                    dense_row(q, k, v, mask, base + local, &mut scores, out_row)?;
                }
                Ok(())
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(out)
}

fn check_dense_shapes<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    mask: Option<&Array2<u8>>,
) -> Result<(), AttentionError> {
    if q.nrows() == 0 || q.ncols() == 0 {
        return Err(AttentionError::ShapeMismatch("empty query".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(AttentionError::ShapeMismatch(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(AttentionError::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    if q.nrows() != k.nrows() {
        return Err(AttentionError::ShapeMismatch(format!(
            "{} queries vs {} keys",
            q.nrows(),
            k.nrows()
        )));
    }
    if let Some(mask) = mask {
        if mask.dim() != (q.nrows(), k.nrows()) {
            return Err(AttentionError::ShapeMismatch(format!(
                "mask {:?} vs scores ({}, {})",
                mask.dim(),
                q.nrows(),
                k.nrows()
            )));
        }
    }
    Ok(())
}

fn dense_row<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    mask: Option<&Array2<u8>>,
    i: usize,
    scores: &mut [f64],
    out_row: &mut [F],
) -> Result<(), AttentionError> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let q_row = q.row(i);
    let q_slice = q_row.as_slice().expect("row of standard-layout matrix");
    if let Some(mask) = mask {
        if mask.row(i).iter().all(|&bit| bit == 0) {
            return Err(AttentionError::AllMasked { row: i });
        }
    }
    for j in 0..k.nrows() {
        let k_row = k.row(j);
        let mut s = dot_f64(q_slice, k_row.as_slice().unwrap()) * scale;
        if let Some(mask) = mask {
            if mask[[i, j]] == 0 {
                s += MASK_SENTINEL;
            }
        }
        scores[j] = s;
    }
    softmax_in_place(scores).map_err(|fault| fault.at(i))?;
    for d in 0..out_row.len() {
        let mut acc = 0.0f64;
        for j in 0..v.nrows() {
            acc += scores[j] * v[[j, d]].to_f64().unwrap();
        }
        out_row[d] = f(acc);
    }
    Ok(())
}

/// Gradients of [`full_attention`] with respect to queries, keys, and
/// values, given the upstream gradient of the output. Weights are
/// recomputed row by row with the same arithmetic as the forward pass.
pub fn full_attention_grad<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    mask: Option<&Array2<u8>>,
    dout: &Array2<F>,
) -> Result<(Array2<F>, Array2<F>, Array2<F>), AttentionError> {
    check_dense_shapes(q, k, v, mask)?;
    if dout.dim() != (q.nrows(), v.ncols()) {
        return Err(AttentionError::ShapeMismatch(format!(
            "upstream gradient {:?} vs output ({}, {})",
            dout.dim(),
            q.nrows(),
            v.ncols()
        )));
    }
    let (n, d_k) = q.dim();
    let d_v = v.ncols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut dq = Array2::<F>::zeros((n, d_k));
    let mut dk = Array2::<F>::zeros(k.dim());
    let mut dv = Array2::<F>::zeros(v.dim());
    let mut weights = vec![0.0f64; n];
    for i in 0..n {
        let q_row = q.row(i);
        let q_slice = q_row.as_slice().unwrap();
        if let Some(mask) = mask {
            if mask.row(i).iter().all(|&bit| bit == 0) {
                return Err(AttentionError::AllMasked { row: i });
            }
        }
        for j in 0..n {
            let k_row = k.row(j);
            let mut s = dot_f64(q_slice, k_row.as_slice().unwrap()) * scale;
            if let Some(mask) = mask {
                if mask[[i, j]] == 0 {
                    s += MASK_SENTINEL;
                }
            }
            weights[j] = s;
        }
        softmax_in_place(&mut weights).map_err(|fault| fault.at(i))?;

        // dscore_j = w_j * (dw_j - sum_l w_l dw_l), dw_j = dout_i . v_j.
        let mut dw = vec![0.0f64; n];
        let mut inner = 0.0f64;
        for j in 0..n {
            let mut acc = 0.0f64;
            for d in 0..d_v {
                acc += dout[[i, d]].to_f64().unwrap() * v[[j, d]].to_f64().unwrap();
            }
            dw[j] = acc;
            inner += weights[j] * acc;
        }
        for j in 0..n {
            let dscore = weights[j] * (dw[j] - inner);
            for d in 0..d_k {
                let bump = dscore * k[[j, d]].to_f64().unwrap() * scale;
                dq[[i, d]] += f::<F>(bump);
                let bump_k = dscore * q[[i, d]].to_f64().unwrap() * scale;
                dk[[j, d]] += f::<F>(bump_k);
            }
            for d in 0..d_v {
                let bump = weights[j] * dout[[i, d]].to_f64().unwrap();
                dv[[j, d]] += f::<F>(bump);
            }
        }
    }
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Gathered attention
// ---------------------------------------------------------------------------

fn check_gathered_shapes<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_plan: &ContextPlan,
    value_plan: &ContextPlan,
) -> Result<(), AttentionError> {
    if q.nrows() == 0 || q.ncols() == 0 {
        return Err(AttentionError::ShapeMismatch("empty query".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(AttentionError::ShapeMismatch(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() || q.nrows() != k.nrows() {
        return Err(AttentionError::ShapeMismatch(format!(
            "rows: q {} k {} v {}",
            q.nrows(),
            k.nrows(),
            v.nrows()
        )));
    }
    if key_plan.len() != q.nrows() {
        return Err(AttentionError::PlanCoverage {
            plan: key_plan.len(),
            input: q.nrows(),
        });
    }
    if value_plan.len() != key_plan.len() {
        return Err(AttentionError::PlanCoverage {
            plan: value_plan.len(),
            input: key_plan.len(),
        });
    }
    for i in 0..key_plan.len() {
        if key_plan.row(i).len() != value_plan.row(i).len() {
            return Err(AttentionError::PlanLengthMismatch { row: i });
        }
    }
    Ok(())
}

/// Scratch space for one worker: gathered key/value copies plus the score
/// row, all reused across queries.
struct GatherScratch<F> {
    keys: Vec<F>,
    values: Vec<F>,
    scores: Vec<f64>,
}

impl<F: NdFloat> GatherScratch<F> {
    fn new(max_row: usize, d_k: usize, d_v: usize) -> Self {
        GatherScratch {
            keys: vec![F::zero(); max_row * d_k],
            values: vec![F::zero(); max_row * d_v],
            scores: vec![0.0f64; max_row],
        }
    }
}

/// Computes one gathered row: scores against the gathered keys, softmax,
/// then the weighted sum of gathered values. Contiguous plan rows borrow
/// the inputs in place; ragged rows are copied into the scratch buffers
/// first. Either way the arithmetic and its order are identical.
fn gathered_row<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_plan: &ContextPlan,
    value_plan: &ContextPlan,
    i: usize,
    scratch: &mut GatherScratch<F>,
    out_row: &mut [F],
    keep_weights: Option<&mut Vec<f64>>,
) -> Result<(), AttentionError> {
    let d_k = q.ncols();
    let d_v = v.ncols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let key_row = key_plan.row(i);
    let value_row = value_plan.row(i);
    let len = key_row.len();
    let q_row = q.row(i);
    let q_slice = q_row.as_slice().unwrap();

    let k_flat = k.as_slice().expect("standard layout");
    let scores = &mut scratch.scores[..len];
    if key_plan.row_is_contiguous(i) {
        let first = key_row[0] as usize;
        for j in 0..len {
            let kj = (first + j) * d_k;
            scores[j] = dot_f64(q_slice, &k_flat[kj..kj + d_k]) * scale;
        }
    } else {
        let kbuf = &mut scratch.keys[..len * d_k];
        for (j, &kj) in key_row.iter().enumerate() {
            let src = kj as usize * d_k;
            kbuf[j * d_k..(j + 1) * d_k].copy_from_slice(&k_flat[src..src + d_k]);
        }
        for j in 0..len {
            scores[j] = dot_f64(q_slice, &kbuf[j * d_k..(j + 1) * d_k]) * scale;
        }
    }

    softmax_in_place(scores).map_err(|fault| fault.at(i))?;

    let v_flat = v.as_slice().expect("standard layout");
    if value_plan.row_is_contiguous(i) {
        let first = value_row[0] as usize;
        for d in 0..d_v {
            let mut acc = 0.0f64;
            for j in 0..len {
                acc += scores[j] * v_flat[(first + j) * d_v + d].to_f64().unwrap();
            }
            out_row[d] = f(acc);
        }
    } else {
        let vbuf = &mut scratch.values[..len * d_v];
        for (j, &vj) in value_row.iter().enumerate() {
            let src = vj as usize * d_v;
            vbuf[j * d_v..(j + 1) * d_v].copy_from_slice(&v_flat[src..src + d_v]);
        }
        for d in 0..d_v {
            let mut acc = 0.0f64;
            for j in 0..len {
                acc += scores[j] * vbuf[j * d_v + d].to_f64().unwrap();
            }
            out_row[d] = f(acc);
        }
    }
    if let Some(keep) = keep_weights {
        keep.clear();
        keep.extend_from_slice(scores);
    }
    Ok(())
}

/// Banded attention: each query row attends only the keys its plan row
/// names, and score position `j` weights the value at the value plan's
/// position `j`. Time and scratch memory are `O(n * m * d)`.
pub fn gathered_attention<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_plan: &ContextPlan,
    value_plan: &ContextPlan,
) -> Result<Array2<F>, AttentionError> {
    gathered_attention_threads(q, k, v, key_plan, value_plan, 1)
}

/// [`gathered_attention`] with query rows split across worker threads; the
/// output is identical for every thread count.
pub fn gathered_attention_threads<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_plan: &ContextPlan,
    value_plan: &ContextPlan,
    threads: usize,
) -> Result<Array2<F>, AttentionError> {
    check_gathered_shapes(q, k, v, key_plan, value_plan)?;
    let n = q.nrows();
    let d_v = v.ncols();
    let max_row = key_plan.max_row_len();
    let mut out = Array2::<F>::zeros((n, d_v));
    let chunk = split_rows(n, threads);
    let results: Vec<Result<(), AttentionError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (t, out_chunk) in out
            .as_slice_mut()
            .expect("freshly allocated output is standard layout")
            .chunks_mut(chunk * d_v)
            .enumerate()
        {
            handles.push(scope.spawn(move || {
                let base = t * chunk;
                let mut scratch = GatherScratch::new(max_row, q.ncols(), d_v);
                for (local, out_row) in out_chunk.chunks_mut(d_v).enumerate() {
                    gathered_row(
                        q,
                        k,
                        v,
                        key_plan,
                        value_plan,
                        base + local,
                        &mut scratch,
                        out_row,
                        None,
                    )?;
                }
                Ok(())
            }));
        }
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(out)
}

/// Gradients of [`gathered_attention`] given the softmax weights cached by
/// the forward pass. Scatter-adds into `dk`/`dv` run sequentially in row
/// order, so results are deterministic.
pub fn gathered_attention_backward<F: NdFloat>(
    dout: &Array2<F>,
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    key_plan: &ContextPlan,
    value_plan: &ContextPlan,
    weights: &[Vec<f64>],
) -> Result<(Array2<F>, Array2<F>, Array2<F>), AttentionError> {
    check_gathered_shapes(q, k, v, key_plan, value_plan)?;
    if dout.dim() != (q.nrows(), v.ncols()) {
        return Err(AttentionError::ShapeMismatch(format!(
            "upstream gradient {:?} vs output ({}, {})",
            dout.dim(),
            q.nrows(),
            v.ncols()
        )));
    }
    if weights.len() != q.nrows() {
        return Err(AttentionError::ShapeMismatch(format!(
            "{} weight rows vs {} queries",
            weights.len(),
            q.nrows()
        )));
    }
    let (n, d_k) = q.dim();
    let d_v = v.ncols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut dq = Array2::<F>::zeros((n, d_k));
    let mut dk = Array2::<F>::zeros(k.dim());
    let mut dv = Array2::<F>::zeros(v.dim());
    let mut dw = Vec::new();
    for i in 0..n {
        let key_row = key_plan.row(i);
        let value_row = value_plan.row(i);
        let w = &weights[i];
        if w.len() != key_row.len() {
            return Err(AttentionError::ShapeMismatch(format!(
                "cached weights row {i} has {} entries, plan row has {}",
                w.len(),
                key_row.len()
            )));
        }
        dw.clear();
        dw.resize(w.len(), 0.0);
        let mut inner = 0.0f64;
        for (j, &vj) in value_row.iter().enumerate() {
            let mut acc = 0.0f64;
            for d in 0..d_v {
                acc +=
                    dout[[i, d]].to_f64().unwrap() * v[[vj as usize, d]].to_f64().unwrap();
            }
            dw[j] = acc;
            inner += w[j] * acc;
        }
        for (j, (&kj, &vj)) in key_row.iter().zip(value_row).enumerate() {
            let dscore = w[j] * (dw[j] - inner);
            let (kj, vj) = (kj as usize, vj as usize);
            for d in 0..d_k {
                dq[[i, d]] += f::<F>(dscore * k[[kj, d]].to_f64().unwrap() * scale);
                dk[[kj, d]] += f::<F>(dscore * q[[i, d]].to_f64().unwrap() * scale);
            }
            for d in 0..d_v {
                dv[[vj, d]] += f::<F>(w[j] * dout[[i, d]].to_f64().unwrap());
            }
        }
    }
    Ok((dq, dk, dv))
}

// ---------------------------------------------------------------------------
// Stateful wrapper for training
// ---------------------------------------------------------------------------

/// Gathered attention as a train-time operator: `forward` caches what the
/// backward pass needs (inputs, plans, softmax weights); `backward`
/// consumes the cache and fails when none is present.
pub struct GatheredAttention<F: NdFloat> {
    cache: Option<GatherCache<F>>,
}

struct GatherCache<F> {
    plans: Arc<PlanPair>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    weights: Vec<Vec<f64>>,
}

impl<F: NdFloat> Default for GatheredAttention<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: NdFloat> GatheredAttention<F> {
    pub fn new() -> Self {
        GatheredAttention { cache: None }
    }

    /// Forward pass that also caches inputs and softmax weights.
    pub fn forward(
        &mut self,
        q: Array2<F>,
        k: Array2<F>,
        v: Array2<F>,
        plans: &Arc<PlanPair>,
    ) -> Result<Array2<F>, AttentionError> {
        let key_plan = plans.key();
        let value_plan = plans.value();
        check_gathered_shapes(&q, &k, &v, key_plan, value_plan)?;
        let n = q.nrows();
        let d_v = v.ncols();
        let max_row = key_plan.max_row_len();
        let mut out = Array2::<F>::zeros((n, d_v));
        let mut weights = vec![Vec::new(); n];
        let mut scratch = GatherScratch::new(max_row, q.ncols(), d_v);
        {
            let out_slice = out.as_slice_mut().unwrap();
            for i in 0..n {
                gathered_row(
                    &q,
                    &k,
                    &v,
                    key_plan,
                    value_plan,
                    i,
                    &mut scratch,
                    &mut out_slice[i * d_v..(i + 1) * d_v],
                    Some(&mut weights[i]),
                )?;
            }
        }
        self.cache = Some(GatherCache {
            plans: Arc::clone(plans),
            q,
            k,
            v,
            weights,
        });
        Ok(out)
    }

    /// Backward pass through the most recent forward call; consumes the
    /// cache so a second call without a new forward is an error.
    pub fn backward(
        &mut self,
        dout: &Array2<F>,
    ) -> Result<(Array2<F>, Array2<F>, Array2<F>), AttentionError> {
        let cache = self.cache.take().ok_or(AttentionError::MissingCache)?;
        gathered_attention_backward(
            dout,
            &cache.q,
            &cache.k,
            &cache.v,
            cache.plans.key(),
            cache.plans.value(),
            &cache.weights,
        )
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
