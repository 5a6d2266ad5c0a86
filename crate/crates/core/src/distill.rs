//! Data distillation: a history pool of latents with incrementally maintained
//! local densities, a density-sorted queue, and stride selection over it.
//! Random and hierarchical-k-means selectors are provided as baselines.
//!
//! Local density of a stored sample is the mean L1 distance to its `k_nn`
//! nearest other stored samples (smaller means denser). The incremental
//! update is exact: after every batch each density equals a from-scratch
//! recomputation over the current pool.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};
use crate::gaussian::{check_dims, Vector};
use crate::mixture::{derive_seed, kmeans, sq_dist};

pub const DEFAULT_K_NN: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Cap on the selected representative subset.
    pub capacity: usize,
    /// Minimum stride; at or below it every stored sample is returned.
    pub eps_m: usize,
    /// Batches between full resorts of the queue.
    pub resort_period: u64,
    pub k_nn: usize,
    /// Optional FIFO cap on the stored pool.
    #[serde(default)]
    pub pool_capacity: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            capacity: 4000,
            eps_m: 1,
            resort_period: 5,
            k_nn: DEFAULT_K_NN,
            pool_capacity: None,
        }
    }
}

/// Neighborhood summary of one stored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEntry {
    pub id: u64,
    pub density: f64,
    pub batch_index: u64,
    /// Sorted ascending distances to the nearest stored samples.
    pub knn_cache: Vec<f64>,
    /// Ids matching `knn_cache`.
    pub knn_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalDensity {
    pub density: f64,
    pub knn_cache: Vec<f64>,
    /// Fewer than `k_nn` neighbors were available.
    pub short: bool,
}

#[inline]
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    l1_lanes(a, b, f64::INFINITY).unwrap_or(f64::INFINITY)
}

/// L1 distance, or `None` once it is certain to reach `bound`. When it
/// returns a value it is bit-identical to [`l1`].
#[inline(always)]
fn l1_below(a: &[f64], b: &[f64], bound: f64) -> Option<f64> {
    l1_lanes(a, b, bound)
}

/// Four independent accumulators, combined as `(l0 + l1) + (l2 + l3)`. Lanes
/// only grow, so a partial combination is a lower bound on the final one.
#[inline(always)]
fn l1_lanes<T: Copy + Into<f64>>(a: &[f64], b: &[T], bound: f64) -> Option<f64> {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (n, (x, y)) in ca.zip(cb).enumerate() {
        acc[0] += (x[0] - y[0].into()).abs();
        acc[1] += (x[1] - y[1].into()).abs();
        acc[2] += (x[2] - y[2].into()).abs();
        acc[3] += (x[3] - y[3].into()).abs();
        if n % 2 == 1 && (acc[0] + acc[1]) + (acc[2] + acc[3]) >= bound {
            return None;
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[j] += (x - (*y).into()).abs();
    }
    let s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    (s < bound || bound == f64::INFINITY).then_some(s)
}

/// Single-precision L1, used only to rule pairs out.
#[inline(always)]
fn l1_f32<const AVX2: bool>(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    if AVX2 {
        // SAFETY: only instantiated with `true` under a detected avx2.
        return unsafe { l1_f32_avx2(a, b) };
    }
    l1_f32_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[inline]
unsafe fn l1_f32_avx2(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let sign = _mm256_set1_ps(-0.0);
    let mut acc = _mm256_setzero_ps();
    let mut i = 0;
    while i + 8 <= n {
        let x = _mm256_loadu_ps(a.as_ptr().add(i));
        let y = _mm256_loadu_ps(b.as_ptr().add(i));
        acc = _mm256_add_ps(acc, _mm256_andnot_ps(sign, _mm256_sub_ps(x, y)));
        i += 8;
    }
    let half = _mm_add_ps(_mm256_castps256_ps128(acc), _mm256_extractf128_ps(acc, 1));
    let quad = _mm_add_ps(half, _mm_movehl_ps(half, half));
    let mut s = _mm_cvtss_f32(_mm_add_ss(quad, _mm_movehdup_ps(quad)));
    for j in i..n {
        s += (a[j] - b[j]).abs();
    }
    s
}

#[inline(always)]
fn l1_f32_portable(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += (x[l] - y[l]).abs();
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[j] += (x - y).abs();
    }
    acc.iter().sum()
}

fn mean_of_sorted(cache: &[f64]) -> f64 {
    if cache.is_empty() {
        0.0
    } else {
        cache.iter().sum::<f64>() / cache.len() as f64
    }
}

/// Mean L1 distance from `query` to its `k_nn` nearest members of `points`,
/// skipping index `exclude` (the query itself when it is a member).
pub fn local_density(
    points: &[Vector],
    query: &Vector,
    k_nn: usize,
    exclude: Option<usize>,
) -> LocalDensity {
    let mut dists: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, p)| l1(p.as_slice(), query.as_slice()))
        .collect();
    dists.sort_by(f64::total_cmp);
    let short = dists.len() < k_nn;
    dists.truncate(k_nn);
    LocalDensity {
        density: mean_of_sorted(&dists),
        knn_cache: dists,
        short,
    }
}

/// New-versus-old neighbor search over pivot cells.
struct Scan<'a> {
    feats: &'a [f64],
    dim: usize,
    k: usize,
    first_id: u64,
    new_start: usize,
    pivots: &'a [usize],
    entries: &'a [DensityEntry],
}

impl Scan<'_> {
    fn run(&self, cells: &mut [Cell], fresh: &mut [Knn], old: &mut [Option<Knn>]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { self.run_avx2(cells, fresh, old) };
            return;
        }
        self.run_generic::<false>(cells, fresh, old);
    }

    /// Same search; only the pre-filter kernel differs, and exact
    /// distances are always computed the portable way.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn run_avx2(&self, cells: &mut [Cell], fresh: &mut [Knn], old: &mut [Option<Knn>]) {
        self.run_generic::<true>(cells, fresh, old);
    }

    #[inline(always)]
    fn run_generic<const AVX2: bool>(&self, cells: &mut [Cell], fresh: &mut [Knn], old: &mut [Option<Knn>]) {
        let dim = self.dim;
        let row = |p: usize| &self.feats[p * dim..(p + 1) * dim];
        for (i, q) in (self.new_start..).zip(fresh.iter_mut()) {
            let me = row(i);
            let mut order: Vec<(f64, usize)> = self.pivots.iter().map(|&v| l1(me, row(v))).zip(0..).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let me32: Vec<f32> = me.iter().map(|&v| v as f32).collect();
            let mut bq = q.bound();
            for (dq, c) in order {
                self.scan_cell::<AVX2>(&mut cells[c], q, &mut bq, i, &me32, dq, old);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn scan_cell<const AVX2: bool>(
        &self,
        cell: &mut Cell,
        q: &mut Knn,
        bq: &mut f64,
        i: usize,
        me32: &[f32],
        dq: f64,
        old: &mut [Option<Knn>],
    ) {
        let dim = self.dim;
        let me = &self.feats[i * dim..(i + 1) * dim];
        // Relative error bound of the f32 sum of `dim` non-negative terms.
        let shrink = 1.0 - (dim as f64 + 2.0) * f32::EPSILON as f64;
        let widen = |b: f64| b + PRUNE_SLACK * b.abs().max(1.0);
        let band = widen(bq.max(cell.reach));
        let lo = cell.radii.partition_point(|&r| r <= dq - band);
        let hi = cell.radii.partition_point(|&r| r < dq + band);
        for j in lo..hi {
            let bp = cell.bounds[j];
            let bound = bq.max(bp);
            if (dq - cell.radii[j]).abs() >= widen(bound) {
                continue;
            }
            let other = &cell.rows[j * dim..(j + 1) * dim];
            if bound.is_finite() && l1_f32::<AVX2>(me32, other) as f64 * shrink >= bound {
                continue;
            }
            let Some(d) = l1_lanes(me, other, bound) else {
                continue;
            };
            let p = cell.ids[j];
            if q.offer(d, self.first_id + p as u64) {
                *bq = q.bound();
            }
            if d < bp {
                let knn = old[p].get_or_insert_with(|| Knn::from_entry(self.k, &self.entries[p]));
                knn.offer(d, self.first_id + i as u64);
                cell.bounds[j] = knn.bound();
            }
        }
    }
}

/// Pivots used to prune the new-versus-old scan.
const PIVOTS: usize = 32;
/// Relative slack on pivot bounds so rounding never prunes a true neighbor.
const PRUNE_SLACK: f64 = 1e-9;

/// Old samples sharing a nearest pivot, sorted by distance to it.
struct Cell {
    radii: Vec<f64>,
    /// Current k-th neighbor distance of each member.
    bounds: Vec<f64>,
    ids: Vec<usize>,
    /// Member rows; stored features are exact in f32.
    rows: Vec<f32>,
    /// Largest k-th neighbor distance among the members at scan start.
    reach: f64,
}

/// Bounded sorted neighbor list.
struct Knn {
    k: usize,
    dists: Vec<f64>,
    ids: Vec<u64>,
}

impl Knn {
    fn new(k: usize) -> Self {
        Self {
            k,
            dists: Vec::with_capacity(k + 1),
            ids: Vec::with_capacity(k + 1),
        }
    }

    fn from_entry(k: usize, e: &DensityEntry) -> Self {
        Self {
            k,
            dists: e.knn_cache.clone(),
            ids: e.knn_ids.clone(),
        }
    }

    fn bound(&self) -> f64 {
        if self.dists.len() < self.k {
            f64::INFINITY
        } else {
            self.dists[self.k - 1]
        }
    }

    fn offer(&mut self, dist: f64, id: u64) -> bool {
        if dist >= self.bound() {
            return false;
        }
        let pos = self.dists.partition_point(|&x| x <= dist);
        self.dists.insert(pos, dist);
        self.ids.insert(pos, id);
        if self.dists.len() > self.k {
            self.dists.pop();
            self.ids.pop();
        }
        true
    }
}

/// History pool plus density bookkeeping and the density-sorted queue.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentativeSet {
    pub config: DistillConfig,
    dim: usize,
    track_density: bool,
    /// Row-major features, each value rounded to f32 precision.
    features: Vec<f64>,
    entries: Vec<DensityEntry>,
    first_id: u64,
    /// Ids sorted by ascending (density, id).
    queue: Vec<u64>,
    batches: u64,
}

impl RepresentativeSet {
    pub fn new(dim: usize, config: DistillConfig) -> Self {
        Self::with_density(dim, config, true)
    }

    /// A plain pool when `track_density` is false (baselines that never read
    /// densities).
    pub fn with_density(dim: usize, config: DistillConfig, track_density: bool) -> Self {
        Self {
            config,
            dim,
            track_density,
            features: Vec::new(),
            entries: Vec::new(),
            first_id: 0,
            queue: Vec::new(),
            batches: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tracks_density(&self) -> bool {
        self.track_density
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches
    }

    pub fn first_id(&self) -> u64 {
        self.first_id
    }

    pub fn entries(&self) -> &[DensityEntry] {
        &self.entries
    }

    /// Queue π: ids in ascending density order.
    pub fn queue(&self) -> &[u64] {
        &self.queue
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    fn pos(&self, id: u64) -> usize {
        (id - self.first_id) as usize
    }

    pub fn feature(&self, id: u64) -> &[f64] {
        let p = self.pos(id);
        &self.features[p * self.dim..(p + 1) * self.dim]
    }

    pub fn entry(&self, id: u64) -> &DensityEntry {
        &self.entries[self.pos(id)]
    }

    pub fn vector(&self, id: u64) -> Vector {
        Vector::from_column_slice(self.feature(id))
    }

    /// All stored latents in insertion order.
    pub fn all_vectors(&self) -> Vec<Vector> {
        self.features
            .chunks(self.dim)
            .map(Vector::from_column_slice)
            .collect()
    }

    pub fn vectors(&self, ids: &[u64]) -> Vec<Vector> {
        ids.iter().map(|&id| self.vector(id)).collect()
    }

    /// Adds a batch to the pool and updates every affected density.
    pub fn update_queue(&mut self, new_batch: &[Vector], batch_index: u64) -> Result<()> {
        for x in new_batch {
            check_dims(self.dim, x.len())?;
        }
        let next_id = self.first_id + self.entries.len() as u64;
        let new_ids: Vec<u64> = (next_id..next_id + new_batch.len() as u64).collect();
        for (x, &id) in new_batch.iter().zip(&new_ids) {
            self.features.extend(x.iter().map(|&v| v as f32 as f64));
            self.entries.push(DensityEntry {
                id,
                density: 0.0,
                batch_index,
                knn_cache: Vec::new(),
                knn_ids: Vec::new(),
            });
        }
        let evicted = self.evict();
        self.batches += 1;

        if !self.track_density {
            return Ok(());
        }

        let evicted_set: HashSet<u64> = evicted.into_iter().collect();
        let k = self.config.k_nn;
        let dim = self.dim;
        let first_id = self.first_id;
        let new_start = (next_id.max(first_id) - first_id) as usize;
        let n = self.entries.len();
        let feats = &self.features;
        let row = |p: usize| &feats[p * dim..(p + 1) * dim];

        // Old entries are only materialized once something changes.
        let mut old: Vec<Option<Knn>> = (0..new_start).map(|_| None).collect();
        let mut old_bound: Vec<f64> = Vec::with_capacity(new_start);
        for (p, e) in self.entries[..new_start].iter().enumerate() {
            if e.knn_ids.iter().any(|id| evicted_set.contains(id)) {
                let mut knn = Knn::new(k);
                for q in 0..new_start {
                    if q != p {
                        if let Some(d) = l1_below(row(p), row(q), knn.bound()) {
                            knn.offer(d, first_id + q as u64);
                        }
                    }
                }
                old_bound.push(knn.bound());
                old[p] = Some(knn);
            } else {
                old_bound.push(if e.knn_cache.len() < k { f64::INFINITY } else { e.knn_cache[k - 1] });
            }
        }

        let mut fresh: Vec<Knn> = (new_start..n).map(|_| Knn::new(k)).collect();
        for i in new_start..n {
            for j in i + 1..n {
                let (fi, fj) = (&fresh[i - new_start], &fresh[j - new_start]);
                let bound = fi.bound().max(fj.bound());
                if let Some(d) = l1_below(row(i), row(j), bound) {
                    fresh[i - new_start].offer(d, first_id + j as u64);
                    fresh[j - new_start].offer(d, first_id + i as u64);
                }
            }
        }
        // Old samples are grouped by nearest pivot; the triangle inequality
        // |d(q, c) - d(p, c)| <= d(q, p) rules out most pairs without an L1.
        let n_piv = PIVOTS.min(n);
        let pivots: Vec<usize> = (0..n_piv).map(|j| j * n / n_piv).collect();
        let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n_piv];
        for p in 0..new_start {
            let (c, r) = pivots
                .iter()
                .map(|&v| l1(row(p), row(v)))
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least one pivot");
            members[c].push((r, p));
        }
        // Each cell keeps its rows contiguous in pivot-distance order.
        let mut cells: Vec<Cell> = members
            .into_iter()
            .map(|mut m| {
                m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut rows = Vec::with_capacity(m.len() * dim);
                for &(_, p) in &m {
                    rows.extend(row(p).iter().map(|&v| v as f32));
                }
                let bounds: Vec<f64> = m.iter().map(|&(_, p)| old_bound[p]).collect();
                Cell {
                    reach: bounds.iter().copied().fold(0.0, f64::max),
                    bounds,
                    radii: m.iter().map(|&(r, _)| r).collect(),
                    ids: m.into_iter().map(|(_, p)| p).collect(),
                    rows,
                }
            })
            .collect();
        let scan = Scan {
            feats,
            dim,
            k,
            first_id,
            new_start,
            pivots: &pivots,
            entries: &self.entries,
        };
        scan.run(&mut cells, &mut fresh, &mut old);
        let mut touched: Vec<u64> = Vec::new();
        let updates = old
            .into_iter()
            .enumerate()
            .filter_map(|(p, knn)| knn.map(|knn| (p, knn)))
            .chain(fresh.into_iter().enumerate().map(|(i, knn)| (new_start + i, knn)));
        for (p, knn) in updates {
            let e = &mut self.entries[p];
            e.density = mean_of_sorted(&knn.dists);
            e.knn_cache = knn.dists;
            e.knn_ids = knn.ids;
            touched.push(e.id);
        }

        if self.batches.is_multiple_of(self.config.resort_period.max(1)) {
            self.resort();
        } else {
            let touched_set: HashSet<u64> = touched.iter().copied().collect();
            let first = self.first_id;
            let mut queue = std::mem::take(&mut self.queue);
            queue.retain(|id| *id >= first && !touched_set.contains(id));
            touched.sort_by(|&a, &b| self.density_order(a, b));
            self.queue = merge_sorted(queue, &touched, |&a, &b| self.density_order(a, b));
        }
        Ok(())
    }

    fn density_order(&self, a: u64, b: u64) -> std::cmp::Ordering {
        self.entry(a)
            .density
            .total_cmp(&self.entry(b).density)
            .then(a.cmp(&b))
    }

    /// Full resort of the queue.
    pub fn resort(&mut self) {
        let mut queue: Vec<u64> = self.entries.iter().map(|e| e.id).collect();
        queue.sort_by(|&a, &b| self.density_order(a, b));
        self.queue = queue;
    }

    fn evict(&mut self) -> Vec<u64> {
        let Some(cap) = self.config.pool_capacity else {
            return Vec::new();
        };
        if self.entries.len() <= cap {
            return Vec::new();
        }
        let n = self.entries.len() - cap;
        let ids: Vec<u64> = self.entries.drain(..n).map(|e| e.id).collect();
        self.features.drain(..n * self.dim);
        self.first_id += n as u64;
        ids
    }

    /// Stride selection over the density queue: positions `1, m+1, 2m+1, …`
    /// (1-based) with `m = ⌈N / n_select⌉`; every sample when `m ≤ eps_m`.
    pub fn select_representatives(&self, n_select: usize) -> Vec<u64> {
        let queue: Vec<u64> = if self.track_density {
            self.queue.clone()
        } else {
            self.entries.iter().map(|e| e.id).collect()
        };
        stride_select(&queue, n_select, self.config.eps_m)
    }

    /// From-scratch density of every stored sample, for verification.
    pub fn recompute_densities(&self) -> Vec<f64> {
        let pts = self.all_vectors();
        (0..pts.len())
            .map(|i| local_density(&pts, &pts[i], self.config.k_nn, Some(i)).density)
            .collect()
    }

    pub(crate) fn restore_parts(
        dim: usize,
        config: DistillConfig,
        track_density: bool,
        features: Vec<f64>,
        entries: Vec<DensityEntry>,
        queue: Vec<u64>,
        batches: u64,
    ) -> Result<Self> {
        if features.len() != entries.len() * dim {
            return Err(OcfError::Snapshot(format!(
                "pool holds {} values, expected {} x {dim}",
                features.len(),
                entries.len()
            )));
        }
        let first_id = entries.first().map_or(0, |e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id != first_id + i as u64 {
                return Err(OcfError::Snapshot("pool ids are not contiguous".into()));
            }
        }
        if track_density && queue.len() != entries.len() {
            return Err(OcfError::Snapshot("queue length differs from pool".into()));
        }
        let last = first_id + entries.len() as u64;
        if queue.iter().any(|&id| id < first_id || id >= last) {
            return Err(OcfError::Snapshot("queue references unknown ids".into()));
        }
        Ok(Self {
            config,
            dim,
            track_density,
            features,
            entries,
            first_id,
            queue,
            batches,
        })
    }
}

fn merge_sorted<T: Copy>(a: Vec<T>, b: &[T], cmp: impl Fn(&T, &T) -> std::cmp::Ordering) -> Vec<T> {
    if b.is_empty() {
        return a;
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if cmp(&b[j], &a[i]).is_lt() {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Stride sampling over an ordered sequence (see
/// [`RepresentativeSet::select_representatives`]).
pub fn stride_select<T: Copy>(queue: &[T], n_select: usize, eps_m: usize) -> Vec<T> {
    let n = queue.len();
    if n == 0 || n_select == 0 {
        return Vec::new();
    }
    let m = n.div_ceil(n_select);
    if m <= eps_m {
        return queue.to_vec();
    }
    queue.iter().step_by(m).copied().collect()
}

/// Uniform sample without replacement of `min(n_select, N)` indices.
pub fn random_indices(n: usize, n_select: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, n_select.min(n)).into_vec()
}

pub fn random_sample(points: &[Vector], n_select: usize, seed: u64) -> Vec<Vector> {
    random_indices(points.len(), n_select, seed)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

/// Hierarchical k-means selection: recursive 2-means until leaves hold at most
/// `⌈N / (n_select/2)⌉` points, then each leaf's centre-nearest and farthest
/// members, ordered by leaf size and trimmed or padded to `min(n_select, N)`.
pub fn hkmeans_indices(points: &[Vector], n_select: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let target = n_select.min(n);
    if n <= n_select {
        return (0..n).collect();
    }
    if target == 0 {
        return Vec::new();
    }
    let leaf_max = ((2 * n) as f64 / n_select as f64).ceil().max(1.0) as usize;

    let mut pending: std::collections::VecDeque<Vec<usize>> = std::collections::VecDeque::new();
    pending.push_back((0..n).collect());
    let mut leaves: Vec<Vec<usize>> = Vec::new();
    let mut node = 0u64;
    while let Some(members) = pending.pop_front() {
        if members.len() <= leaf_max {
            leaves.push(members);
            continue;
        }
        node += 1;
        let pts: Vec<Vector> = members.iter().map(|&i| points[i].clone()).collect();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        if let Ok(fit) = kmeans(&pts, 2, derive_seed(seed, node)) {
            for (&i, &l) in members.iter().zip(&fit.labels) {
                if l == 0 {
                    a.push(i);
                } else {
                    b.push(i);
                }
            }
        }
        if a.is_empty() || b.is_empty() {
            let half = members.len() / 2;
            a = members[..half].to_vec();
            b = members[half..].to_vec();
        }
        pending.push_back(a);
        pending.push_back(b);
    }

    // Each leaf's members sorted by distance to its centroid.
    let mut ranked: Vec<Vec<usize>> = leaves
        .iter()
        .map(|leaf| {
            let d = points[leaf[0]].len();
            let mut c = Vector::zeros(d);
            for &i in leaf {
                c += &points[i];
            }
            c /= leaf.len() as f64;
            let mut by_dist: Vec<(f64, usize)> = leaf
                .iter()
                .map(|&i| (sq_dist(points[i].as_slice(), c.as_slice()), i))
                .collect();
            by_dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            by_dist.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&x, &y| ranked[y].len().cmp(&ranked[x].len()).then(x.cmp(&y)));

    let mut picks = Vec::with_capacity(target);
    let mut cursor = vec![(0usize, 0usize); ranked.len()];
    for &l in &order {
        let leaf = &ranked[l];
        picks.push(leaf[0]);
        cursor[l].0 = 1;
        if leaf.len() > 1 {
            picks.push(leaf[leaf.len() - 1]);
            cursor[l].1 = 1;
        }
    }
    if picks.len() >= target {
        picks.truncate(target);
        return picks;
    }
    // Pad with next-nearest members, round robin over leaves by size.
    while picks.len() < target {
        let mut progressed = false;
        for &l in &order {
            let leaf = &mut ranked[l];
            let (front, back) = cursor[l];
            if front + back < leaf.len() {
                picks.push(leaf[front]);
                cursor[l].0 += 1;
                progressed = true;
                if picks.len() == target {
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    picks
}

pub fn hkmeans_sample(points: &[Vector], n_select: usize, seed: u64) -> Vec<Vector> {
    hkmeans_indices(points, n_select, seed)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
        (0..n)
            .map(|_| Vector::from_iterator(d, (0..d).map(|_| rng.random_range(-3.0..3.0))))
            .collect()
    }

    #[test]
    fn density_equidistant_neighbors() {
        let pts = vec![v(&[2.0, 0.0]), v(&[0.0, 2.0]), v(&[-1.0, -1.0]), v(&[1.0, -1.0])];
        let res = local_density(&pts, &v(&[0.0, 0.0]), 4, None);
        assert_eq!(res.density, 2.0);
        assert!(!res.short);
    }

    #[test]
    fn density_coincident_duplicates() {
        let pts = vec![v(&[1.0, 1.0]); 5];
        assert_eq!(local_density(&pts, &v(&[1.0, 1.0]), 3, None).density, 0.0);
    }

    #[test]
    fn density_short_neighborhood_flagged() {
        let pts = vec![v(&[0.0]), v(&[1.0]), v(&[3.0])];
        let res = local_density(&pts, &pts[0], 5, Some(0));
        assert!(res.short);
        assert_eq!(res.knn_cache, vec![1.0, 3.0]);
        assert_eq!(res.density, 2.0);
    }

    #[test]
    fn density_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(200, 5, &mut rng);
        let q = &pts[17];
        let mut all: Vec<f64> = pts
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 17)
            .map(|(_, p)| (p - q).abs().sum())
            .collect();
        all.sort_by(f64::total_cmp);
        let want = all[..10].iter().sum::<f64>() / 10.0;
        let got = local_density(&pts, q, 10, Some(17)).density;
        assert!((got - want).abs() < 1e-12);
    }

    fn store(dim: usize) -> RepresentativeSet {
        RepresentativeSet::new(dim, DistillConfig::default())
    }

    #[test]
    fn far_batch_leaves_existing_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut set = store(3);
        set.update_queue(&random_points(50, 3, &mut rng), 0).unwrap();
        let before: Vec<f64> = set.entries().iter().map(|e| e.density).collect();
        let far: Vec<Vector> = random_points(20, 3, &mut rng)
            .into_iter()
            .map(|p| p.add_scalar(1000.0))
            .collect();
        set.update_queue(&far, 1).unwrap();
        let after: Vec<f64> = set.entries()[..50].iter().map(|e| e.density).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn duplicate_never_raises_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = store(4);
        let pts = random_points(40, 4, &mut rng);
        set.update_queue(&pts, 0).unwrap();
        let before = set.entry(5).density;
        set.update_queue(&[pts[5].clone()], 1).unwrap();
        assert!(set.entry(5).density <= before);
    }

    #[test]
    fn incremental_matches_recompute_with_eviction() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = DistillConfig {
            pool_capacity: Some(150),
            resort_period: 3,
            ..DistillConfig::default()
        };
        let mut set = RepresentativeSet::new(3, cfg);
        for b in 0..8 {
            let n = rng.random_range(1..60);
            set.update_queue(&random_points(n, 3, &mut rng), b).unwrap();
            assert!(set.len() <= 150);
            let want = set.recompute_densities();
            for (e, w) in set.entries().iter().zip(&want) {
                assert!((e.density - w).abs() <= 1e-12, "batch {b}");
            }
            assert_queue_sorted(&set);
        }
    }

    fn assert_queue_sorted(set: &RepresentativeSet) {
        assert_eq!(set.queue().len(), set.len());
        for w in set.queue().windows(2) {
            assert!(set.density_order(w[0], w[1]).is_lt());
        }
    }

    #[test]
    fn stride_positions() {
        let q: Vec<usize> = (1..=10).collect();
        assert_eq!(stride_select(&q, 5, 1), vec![1, 3, 5, 7, 9]);
        let q: Vec<usize> = (1..=4000).collect();
        assert_eq!(stride_select(&q, 4000, 1).len(), 4000);
        let q: Vec<usize> = (1..=12000).collect();
        let s = stride_select(&q, 4000, 1);
        assert_eq!(s.len(), 4000);
        assert_eq!(s[1], 4);
        assert_eq!(*s.last().unwrap(), 11998);
        assert!(stride_select::<usize>(&[], 10, 1).is_empty());
    }

    proptest! {
        #[test]
        fn stride_spans_queue(n in 1usize..5000, n_select in 1usize..2000) {
            let q: Vec<usize> = (0..n).collect();
            let s = stride_select(&q, n_select, 1);
            prop_assert_eq!(s[0], 0);
            prop_assert!(s.len() <= n_select.max(n.min(n_select)).max(1) || n <= n_select);
            let m = n.div_ceil(n_select);
            prop_assert!(*s.last().unwrap() + m >= n);
            prop_assert!(s.windows(2).all(|w| w[1] - w[0] == m.max(1)));
        }

        #[test]
        fn f32_filter_never_overshoots(
            pair in (1usize..40).prop_flat_map(|d| (
                prop::collection::vec(-1e4f32..1e4, d),
                prop::collection::vec(-1e4f32..1e4, d),
            ))
        ) {
            let (a, b) = pair;
            let wide = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<_>>();
            let exact = l1(&wide(&a), &wide(&b));
            let shrink = 1.0 - (a.len() as f64 + 2.0) * f32::EPSILON as f64;
            prop_assert!(l1_f32::<false>(&a, &b) as f64 * shrink <= exact);
            #[cfg(target_arch = "x86_64")]
            if std::is_x86_feature_detected!("avx2") {
                prop_assert!(l1_f32::<true>(&a, &b) as f64 * shrink <= exact);
            }
        }
    }

    #[test]
    fn random_sample_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(30, 2, &mut rng);
        let all = random_sample(&pts, 30, 5);
        assert_eq!(all.len(), 30);
        for p in &pts {
            assert!(all.contains(p));
        }
        assert_eq!(random_sample(&pts, 7, 5), random_sample(&pts, 7, 5));
        assert_eq!(random_sample(&pts, 100, 5).len(), 30);
    }

    #[test]
    fn random_sample_hypergeometric_inclusion() {
        // 95/5 pool, n_select = N/40: P(at least one minority) = 1 - C(950,25)/C(1000,25).
        let n = 1000;
        let minority = 50;
        let k = n / 40;
        let mut p_none = 1.0;
        for i in 0..k {
            p_none *= (n - minority - i) as f64 / (n - i) as f64;
        }
        let p = 1.0 - p_none;
        let trials = 50;
        let hits = (0..trials)
            .filter(|&s| random_indices(n, k, s as u64).iter().any(|&i| i >= n - minority))
            .count();
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!((hits as f64 - trials as f64 * p).abs() <= 3.0 * sd, "hits {hits}, p {p}");
    }

    #[test]
    fn hkmeans_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(120, 3, &mut rng);
        assert_eq!(hkmeans_indices(&pts, 120, 0), (0..120).collect::<Vec<_>>());
        for n_select in [1, 2, 5, 17, 60, 119, 500] {
            let idx = hkmeans_indices(&pts, n_select, 4);
            assert_eq!(idx.len(), n_select.min(120));
            let uniq: HashSet<usize> = idx.iter().copied().collect();
            assert_eq!(uniq.len(), idx.len());
        }
    }

    #[test]
    fn hkmeans_covers_both_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = random_points(100, 2, &mut rng);
        pts.extend(random_points(100, 2, &mut rng).into_iter().map(|p| p.add_scalar(50.0)));
        let idx = hkmeans_indices(&pts, 4, 1);
        assert!(idx.iter().any(|&i| i < 100));
        assert!(idx.iter().any(|&i| i >= 100));
    }
}
