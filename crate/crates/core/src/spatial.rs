//! Exact k-nearest-neighbor search over token box centers.
//!
//! Distances are squared Euclidean, ties broken by lower point index, so for
//! every query the neighbor list is sorted by `(d2, index)` and always
//! contains the query point itself (distance zero). Two routes produce that
//! list: [`knn_brute_oracle`], a full pairwise sort kept deliberately plain,
//! and [`knn_query`], a uniform-grid search that must agree with the oracle
//! on every input, duplicates and all. There is no approximate mode.

use crate::ocr::{Document, Stage};
use thiserror::Error;

/// Failures for center extraction and neighbor queries.
#[derive(Error, Debug)]
pub enum SpatialError {
    #[error("document must be normalized before extracting centers")]
    NotNormalized,
    #[error("k = {k} out of range for {n} points (need 1 <= k <= n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("center set is empty")]
    Empty,
    #[error("point {index} has non-finite coordinates")]
    NonFinite { index: usize },
}

/// Token box centers in reading order.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterSet {
    points: Vec<(f64, f64)>,
}

/// One neighbor of a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Index of the neighbor in the center set.
    pub index: u32,
    /// Squared Euclidean distance to the query point.
    pub dist2: f64,
}

impl CenterSet {
    /// Wraps raw points, rejecting empty sets and non-finite coordinates.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::Empty);
        }
        for (index, &(x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(SpatialError::NonFinite { index });
            }
        }
        Ok(CenterSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Extracts normalized box centers from a document, in token order.
pub fn centers_of(doc: &Document) -> Result<CenterSet, SpatialError> {
    if doc.stage != Stage::Normalized {
        return Err(SpatialError::NotNormalized);
    }
    CenterSet::new(doc.normalized_boxes.iter().map(|b| b.center()).collect())
}

#[inline]
fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// `(d2, index)` as a totally ordered key; coordinates are finite by
/// construction so `total_cmp` agrees with the usual order.
#[inline]
fn key_less(a: (f64, u32), b: (f64, u32)) -> bool {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a.1 < b.1,
    }
}

// ---------------------------------------------------------------------------
// Brute-force oracle
// ---------------------------------------------------------------------------

/// Reference k-nearest-neighbor search: full pairwise distances and a sort
/// per query. Quadratic and obvious on purpose; the grid path is checked
/// against this on every test input.
pub fn knn_brute_oracle(centers: &CenterSet, k: usize) -> Result<Vec<Vec<Neighbor>>, SpatialError> {
    let n = centers.len();
    if k < 1 || k > n {
        return Err(SpatialError::KOutOfRange { k, n });
    }
    let points = centers.points();
    let mut result = Vec::with_capacity(n);
    for i in 0..n {
        let mut all: Vec<Neighbor> = (0..n)
            .map(|j| Neighbor {
                index: j as u32,
                dist2: dist2(points[i], points[j]),
            })
            .collect();
        all.sort_by(|a, b| {
            a.dist2
                .total_cmp(&b.dist2)
                .then_with(|| a.index.cmp(&b.index))
        });
        all.truncate(k);
        result.push(all);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Grid-accelerated query
// ---------------------------------------------------------------------------

/// Bounded max-heap keeping the k smallest `(d2, index)` keys.
struct BestK {
    k: usize,
    // Stored as a binary max-heap ordered by key_less.
    heap: Vec<(f64, u32)>,
}

impl BestK {
    fn new(k: usize) -> Self {
        BestK {
            k,
            heap: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> Option<(f64, u32)> {
        if self.heap.len() == self.k {
            Some(self.heap[0])
        } else {
            None
        }
    }

    fn push(&mut self, item: (f64, u32)) {
        if self.heap.len() == self.k {
            if !key_less(item, self.heap[0]) {
                return;
            }
            self.heap[0] = item;
            self.sift_down(0);
        } else {
            self.heap.push(item);
            self.sift_up(self.heap.len() - 1);
        }
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if key_less(self.heap[parent], self.heap[i]) {
                self.heap.swap(parent, i);
                i = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut largest = i;
            if l < self.heap.len() && key_less(self.heap[largest], self.heap[l]) {
                largest = l;
            }
            if r < self.heap.len() && key_less(self.heap[largest], self.heap[r]) {
                largest = r;
            }
            if largest == i {
                break;
            }
            self.heap.swap(i, largest);
            i = largest;
        }
    }

    fn into_sorted(self) -> Vec<Neighbor> {
        let mut items = self.heap;
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        items
            .into_iter()
            .map(|(dist2, index)| Neighbor { index, dist2 })
            .collect()
    }
}

/// Uniform bucket grid over the bounding box of the points.
struct Grid {
    cell: f64,
    min_x: f64,
    min_y: f64,
    cols: usize,
    rows: usize,
    /// CSR buckets: point indices grouped by cell, row-major.
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl Grid {
    fn build(points: &[(f64, f64)]) -> Grid {
        let n = points.len();
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        let extent_x = (max_x - min_x).max(0.0);
        let extent_y = (max_y - min_y).max(0.0);
        // Roughly sqrt(n) cells along the longest side gives about one
        // point per cell on uniform layouts; degenerate extents collapse to
        // a single row or column.
        let side = (n as f64).sqrt().ceil().max(1.0);
        let mut cell = extent_x.max(extent_y) / side;
        if !cell.is_finite() || cell <= 0.0 {
            cell = 1.0;
        }
        let cols = (extent_x / cell).min(side + 2.0) as usize + 1;
        let rows = (extent_y / cell).min(side + 2.0) as usize + 1;

        let mut grid = Grid {
            cell,
            min_x,
            min_y,
            cols,
            rows,
            starts: vec![0; cols * rows + 1],
            items: vec![0; n],
        };
        let mut counts = vec![0u32; cols * rows];
        for &(x, y) in points {
            counts[grid.cell_of(x, y)] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            grid.starts[c + 1] = grid.starts[c] + count;
        }
        let mut cursor = grid.starts.clone();
        for (i, &(x, y)) in points.iter().enumerate() {
            let c = grid.cell_of(x, y);
            grid.items[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        grid
    }

    #[inline]
    fn cell_of(&self, x: f64, y: f64) -> usize {
        let cx = (((x - self.min_x) / self.cell) as usize).min(self.cols - 1);
        let cy = (((y - self.min_y) / self.cell) as usize).min(self.rows - 1);
        cy * self.cols + cx
    }

    #[inline]
    fn bucket(&self, cx: usize, cy: usize) -> &[u32] {
        let c = cy * self.cols + cx;
        let (a, b) = (self.starts[c] as usize, self.starts[c + 1] as usize);
        &self.items[a..b]
    }
}

/// Exact k-nearest neighbors for every point, grid-accelerated.
///
/// Expands square rings of cells around each query until no unvisited ring
/// can hold a closer point than the current k-th best under the strict
/// `(d2, index)` order, which keeps tie handling identical to the oracle.
pub fn knn_query(centers: &CenterSet, k: usize) -> Result<Vec<Vec<Neighbor>>, SpatialError> {
    knn_query_threads(centers, k, 1)
}

/// [`knn_query`] with queries split across `threads` worker threads.
/// Each point's neighbor list is computed independently, so the output is
/// identical for every thread count.
pub fn knn_query_threads(
    centers: &CenterSet,
    k: usize,
    threads: usize,
) -> Result<Vec<Vec<Neighbor>>, SpatialError> {
    let n = centers.len();
    if k < 1 || k > n {
        return Err(SpatialError::KOutOfRange { k, n });
    }
    let points = centers.points();
    let grid = Grid::build(points);

    let mut result: Vec<Vec<Neighbor>> = vec![Vec::new(); n];
    let threads = threads.max(1).min(n);
    if threads == 1 {
        for (i, slot) in result.iter_mut().enumerate() {
            *slot = query_one(&grid, points, i, k);
        }
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slice) in result.chunks_mut(chunk).enumerate() {
                let grid = &grid;
                scope.spawn(move || {
                    for (off, slot) in slice.iter_mut().enumerate() {
                        *slot = query_one(grid, points, t * chunk + off, k);
                    }
                });
            }
        });
    }
    Ok(result)
}

fn query_one(grid: &Grid, points: &[(f64, f64)], i: usize, k: usize) -> Vec<Neighbor> {
    let (px, py) = points[i];
    let cx = (((px - grid.min_x) / grid.cell) as usize).min(grid.cols - 1);
    let cy = (((py - grid.min_y) / grid.cell) as usize).min(grid.rows - 1);
    let mut best = BestK::new(k);
    let max_ring = grid.cols.max(grid.rows);
    for ring in 0..=max_ring {
        // Any point in ring r is at least (r - 1) whole cells away.
        if let Some((worst_d2, _)) = best.worst() {
            if ring >= 2 {
                let lower = (ring - 1) as f64 * grid.cell;
                if lower * lower > worst_d2 {
                    break;
                }
            }
        }
        visit_ring(grid, cx, cy, ring, |j| {
            let d2 = dist2((px, py), points[j as usize]);
            best.push((d2, j));
        });
    }
    best.into_sorted()
}

/// Calls `visit` for every point bucketed in cells at Chebyshev distance
/// exactly `ring` from `(cx, cy)`, clipped to the grid.
fn visit_ring<F: FnMut(u32)>(grid: &Grid, cx: usize, cy: usize, ring: usize, mut visit: F) {
    let x_lo = cx.saturating_sub(ring);
    let x_hi = (cx + ring).min(grid.cols - 1);
    let y_lo = cy.saturating_sub(ring);
    let y_hi = (cy + ring).min(grid.rows - 1);
    if ring == 0 {
        for &j in grid.bucket(cx, cy) {
            visit(j);
        }
        return;
    }
    for y in y_lo..=y_hi {
        let on_horizontal_edge = (cy >= ring && y == cy - ring) || y == cy + ring;
        if on_horizontal_edge {
            for x in x_lo..=x_hi {
                for &j in grid.bucket(x, y) {
                    visit(j);
                }
            }
        } else {
            if cx >= ring && cx - ring >= x_lo {
                for &j in grid.bucket(cx - ring, y) {
                    visit(j);
                }
            }
            if cx + ring <= x_hi {
                for &j in grid.bucket(cx + ring, y) {
                    visit(j);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
