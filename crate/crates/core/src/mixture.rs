//! Fitting and inference: k-means proposals for each batch, EM for split
//! candidates, and count-regularized (Dirichlet-process style) assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};
use crate::gaussian::{
    check_dims, default_regularization, regularize_covariance, sample_moments, weighted_moments,
    GaussianComponent, GaussianDensity, Matrix, Vector, DEFAULT_REG_RELATIVE,
};

pub const KMEANS_MAX_ITER: usize = 100;
/// Relative inertia improvement below which Lloyd stops.
pub const KMEANS_TOL: f64 = 1e-6;
pub const EM_MAX_ITER: usize = 200;
/// Relative log-likelihood gain below which EM stops.
pub const EM_TOL: f64 = 1e-6;
/// Restarts used when the batch clusterer scans k.
pub const BATCH_KMEANS_RESTARTS: u64 = 3;

/// The history-maintained cluster set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub components: Vec<GaussianComponent>,
    /// Concentration of the Dirichlet-process prior.
    pub alpha: f64,
    pub total_count: u64,
}

impl ClusterModel {
    pub fn new(alpha: f64) -> Self {
        Self {
            components: Vec::new(),
            alpha,
            total_count: 0,
        }
    }

    pub fn from_components(components: Vec<GaussianComponent>, alpha: f64) -> Self {
        let total_count = components.iter().map(|c| c.count).sum();
        let mut model = Self {
            components,
            alpha,
            total_count,
        };
        model.renormalize();
        model
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.components.first().map(|c| c.dim())
    }

    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn renormalize(&mut self) {
        let total = self.total_weight();
        if total > 0.0 {
            for c in &mut self.components {
                c.weight /= total;
            }
        }
    }

    /// Checks the model invariants: unit total weight, consistent counts and
    /// SPD covariances.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let w = self.total_weight();
        if (w - 1.0).abs() > 1e-9 {
            return Err(OcfError::InvalidParameter(format!(
                "component weights sum to {w}"
            )));
        }
        let counts: u64 = self.components.iter().map(|c| c.count).sum();
        if counts != self.total_count {
            return Err(OcfError::InvalidParameter(format!(
                "component counts sum to {counts}, model total is {}",
                self.total_count
            )));
        }
        for (i, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(OcfError::InvalidParameter(format!(
                    "component {i} has weight {}",
                    c.weight
                )));
            }
            if c.cov.clone().cholesky().is_none() {
                return Err(OcfError::NotPositiveDefinite(format!("component {i}")));
            }
        }
        Ok(())
    }
}

/// Prior weighting used when turning likelihoods into responsibilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AssignPrior {
    /// `w_k = count_k / (total_count + α)`.
    Dirichlet { alpha: f64 },
    /// Plain mixture weights `φ_k`.
    MaxLikelihood,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    /// Row-major `n × k` responsibilities.
    pub responsibilities: Vec<f64>,
    pub k: usize,
}

impl Assignment {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.responsibilities[i * self.k..(i + 1) * self.k]
    }
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Vec<Vector>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vector]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c.as_slice());
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vector], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_slice(), centroids[0].as_slice()))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (p, dist) in points.iter().zip(d2.iter_mut()) {
            *dist = dist.min(sq_dist(p.as_slice(), c.as_slice()));
        }
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeded Lloyd iterations, deterministic for a given seed.
pub fn kmeans(points: &[Vector], k: usize, seed: u64) -> Result<KMeansFit> {
    validate_points(points)?;
    if k == 0 || k > points.len() {
        return Err(OcfError::InvalidParameter(format!(
            "k-means needs 1 <= k <= n (k={k}, n={})",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(points, k, &mut rng);
    kmeans_from_centroids(points, init)
}

/// Lloyd iterations from explicit initial centroids, alternated with
/// Hartigan single-point moves until neither changes the partition.
pub fn kmeans_from_centroids(points: &[Vector], init: Vec<Vector>) -> Result<KMeansFit> {
    validate_points(points)?;
    let k = init.len();
    if k == 0 || k > points.len() {
        return Err(OcfError::InvalidParameter("bad number of initial centroids".into()));
    }
    let mut centroids = init;
    let mut labels = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..HARTIGAN_ROUNDS {
        iterations += lloyd(points, &mut centroids, &mut labels);
        if !hartigan_sweep(points, &mut centroids, &mut labels) {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, dist) = nearest(p.as_slice(), &centroids);
        labels[i] = j;
        inertia += dist;
    }
    Ok(KMeansFit {
        centroids,
        labels,
        inertia,
        iterations,
    })
}

const HARTIGAN_ROUNDS: usize = 20;

fn lloyd(points: &[Vector], centroids: &mut [Vector], labels: &mut [usize]) -> usize {
    let n = points.len();
    let k = centroids.len();
    let d = points[0].len();
    let mut dists = vec![0.0f64; n];
    let mut iterations = 0;
    let mut prev_inertia = f64::INFINITY;
    for it in 0..KMEANS_MAX_ITER {
        iterations = it + 1;
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let (j, dist) = nearest(p.as_slice(), centroids);
            moved |= labels[i] != j;
            labels[i] = j;
            dists[i] = dist;
        }
        let inertia: f64 = dists.iter().sum();
        if it > 0 && (!moved || prev_inertia - inertia <= KMEANS_TOL * prev_inertia) {
            break;
        }
        prev_inertia = inertia;
        let mut sums = vec![Vector::zeros(d); k];
        let mut sizes = vec![0usize; k];
        for (p, &j) in points.iter().zip(labels.iter()) {
            sums[j] += p;
            sizes[j] += 1;
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            let next = if sizes[j] > 0 {
                &sums[j] / sizes[j] as f64
            } else {
                // Empty cluster: re-seed from the point farthest from its centroid.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                points[far].clone()
            };
            centroids[j] = next;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(p.as_slice(), centroids).0;
    }
    iterations
}

/// One pass of Hartigan moves: relocate a point when doing so lowers the
/// total within-cluster sum of squares. Returns whether anything moved.
fn hartigan_sweep(points: &[Vector], centroids: &mut [Vector], labels: &mut [usize]) -> bool {
    let k = centroids.len();
    let d = points[0].len();
    let mut sums = vec![Vector::zeros(d); k];
    let mut sizes = vec![0usize; k];
    for (p, &j) in points.iter().zip(labels.iter()) {
        sums[j] += p;
        sizes[j] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            centroids[j] = &sums[j] / sizes[j] as f64;
        }
    }
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let a = labels[i];
        if sizes[a] <= 1 {
            continue;
        }
        let na = sizes[a] as f64;
        let remove = na / (na - 1.0) * sq_dist(p.as_slice(), centroids[a].as_slice());
        let mut best = (a, remove);
        for b in 0..k {
            if b == a {
                continue;
            }
            let nb = sizes[b] as f64;
            let add = nb / (nb + 1.0) * sq_dist(p.as_slice(), centroids[b].as_slice());
            if add < best.1 {
                best = (b, add);
            }
        }
        let b = best.0;
        if b != a && best.1 < remove * (1.0 - 1e-12) {
            let nb = sizes[b] as f64;
            centroids[a] = (&centroids[a] * na - p) / (na - 1.0);
            centroids[b] = (&centroids[b] * nb + p) / (nb + 1.0);
            sizes[a] -= 1;
            sizes[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
    moved
}

/// Best of several k-means++ restarts by inertia.
pub fn kmeans_restarts(points: &[Vector], k: usize, seed: u64, restarts: u64) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let fit = kmeans(points, k, derive_seed(seed, r))?;
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Result of scanning the number of batch clusters.
#[derive(Clone, Debug)]
pub struct BatchKScan {
    pub k: usize,
    pub fit: KMeansFit,
    /// BIC per scanned k (index 0 is k=1).
    pub scores: Vec<f64>,
}

/// BIC of a hard k-means partition under spherical Gaussians with a pooled
/// variance.
pub fn spherical_bic(points: &[Vector], fit: &KMeansFit, variance_floor: f64) -> f64 {
    let n = points.len() as f64;
    let d = points[0].len() as f64;
    let k = fit.centroids.len();
    let var = (fit.inertia / (n * d)).max(variance_floor);
    let mut sizes = vec![0usize; k];
    for &l in &fit.labels {
        sizes[l] += 1;
    }
    let mut log_l = -(n * d / 2.0) * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);
    for &s in &sizes {
        if s > 0 {
            log_l += s as f64 * (s as f64 / n).ln();
        }
    }
    let params = (k as f64) * d + 1.0 + (k as f64 - 1.0);
    -2.0 * log_l + params * n.ln()
}

/// Scans `k ∈ [1, k_max]` with k-means and keeps the BIC minimizer.
pub fn scan_batch_k(points: &[Vector], k_max: usize, seed: u64) -> Result<BatchKScan> {
    validate_points(points)?;
    let k_max = k_max.max(1).min(points.len());
    let mut scores = Vec::with_capacity(k_max);
    let mut best: Option<(usize, KMeansFit, f64)> = None;
    let mut floor = 0.0;
    for k in 1..=k_max {
        let fit = kmeans_restarts(points, k, derive_seed(seed, k as u64), BATCH_KMEANS_RESTARTS)?;
        if k == 1 {
            let n = points.len() as f64;
            let d = points[0].len() as f64;
            let base = fit.inertia / (n * d);
            if !(base > 0.0) {
                // All points identical.
                return Ok(BatchKScan {
                    k: 1,
                    fit,
                    scores: vec![f64::NEG_INFINITY],
                });
            }
            floor = base * 1e-12;
        }
        let score = spherical_bic(points, &fit, floor);
        scores.push(score);
        if best.as_ref().map_or(true, |b| score < b.2) {
            best = Some((k, fit, score));
        }
    }
    let (k, fit, _) = best.expect("k_max >= 1");
    Ok(BatchKScan { k, fit, scores })
}

pub fn choose_batch_k(points: &[Vector], k_max: usize, seed: u64) -> Result<usize> {
    scan_batch_k(points, k_max, seed).map(|s| s.k)
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub components: Vec<GaussianComponent>,
    pub log_likelihood: f64,
    /// Total log-likelihood after each E-step.
    pub trace: Vec<f64>,
    /// Argmax component per point under the final parameters.
    pub labels: Vec<usize>,
    /// A degenerate component forced a refit with fewer components.
    pub collapsed: bool,
}

/// EM for a full-covariance Gaussian mixture, initialized from k-means.
pub fn fit_gmm_em(points: &[Vector], k: usize, seed: u64) -> Result<GmmFit> {
    validate_points(points)?;
    if k == 0 || k > points.len() {
        return Err(OcfError::InvalidParameter(format!(
            "EM needs 1 <= k <= n (k={k}, n={})",
            points.len()
        )));
    }
    let labels = if k == 1 {
        vec![0; points.len()]
    } else {
        kmeans(points, k, seed)?.labels
    };
    fit_gmm_em_from_labels(points, &labels, k, seed)
}

/// EM initialized from a hard partition.
pub fn fit_gmm_em_from_labels(
    points: &[Vector],
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<GmmFit> {
    let n = points.len();
    let (_, all_cov, _) = sample_moments(points)?;
    let lambda = default_regularization(&all_cov, DEFAULT_REG_RELATIVE);

    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<&Vector> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == j)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            return collapse(points, k, seed);
        }
        let (mean, cov, m) = sample_moments(members)?;
        let cov = if m < 2 { all_cov.clone() } else { cov };
        components.push(GaussianComponent::new(
            m as f64 / n as f64,
            mean,
            regularize_covariance(&cov, lambda),
            m as u64,
        ));
    }

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut log_likelihood = e_step(points, &components, &mut resp)?;
    trace.push(log_likelihood);
    for _ in 1..EM_MAX_ITER {
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let w: Vec<f64> = (0..n).map(|i| resp[i * k + j]).collect();
            let nk: f64 = w.iter().sum();
            if nk < 1.0 {
                return collapse(points, k, seed);
            }
            let (mean, cov, _) = weighted_moments(points, &w).expect("positive mass");
            next.push(GaussianComponent::new(
                nk / n as f64,
                mean,
                regularize_covariance(&cov, lambda),
                0,
            ));
        }
        let mut next_resp = vec![0.0; n * k];
        let next_ll = e_step(points, &next, &mut next_resp)?;
        // The diagonal jitter can cost a sliver of likelihood near the optimum;
        // keep the previous parameters in that case.
        if next_ll < log_likelihood {
            break;
        }
        let gain = next_ll - log_likelihood;
        components = next;
        resp = next_resp;
        log_likelihood = next_ll;
        trace.push(log_likelihood);
        if gain < EM_TOL * log_likelihood.abs().max(1.0) {
            break;
        }
    }

    let labels: Vec<usize> = (0..n).map(|i| argmax(&resp[i * k..(i + 1) * k])).collect();
    let mut counts = vec![0u64; k];
    for &l in &labels {
        counts[l] += 1;
    }
    for (c, &m) in components.iter_mut().zip(&counts) {
        c.count = m;
    }
    Ok(GmmFit {
        components,
        log_likelihood,
        trace,
        labels,
        collapsed: false,
    })
}

fn collapse(points: &[Vector], k: usize, seed: u64) -> Result<GmmFit> {
    if k <= 1 {
        return Err(OcfError::InvalidParameter(
            "EM degenerated with a single component".into(),
        ));
    }
    let mut fit = fit_gmm_em(points, k - 1, derive_seed(seed, 0x5eed))?;
    fit.collapsed = true;
    Ok(fit)
}

/// Fills `resp` (row-major `n × k`) and returns the total log-likelihood.
fn e_step(points: &[Vector], comps: &[GaussianComponent], resp: &mut [f64]) -> Result<f64> {
    let k = comps.len();
    let densities = comps
        .iter()
        .map(|c| GaussianDensity::new(&c.mean, &c.cov))
        .collect::<Result<Vec<_>>>()?;
    let log_w: Vec<f64> = comps.iter().map(|c| c.weight.ln()).collect();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] = log_w[j] + densities[j].logpdf(p.as_slice());
        }
        total += normalize_log_row(row);
    }
    Ok(total)
}

/// Turns a row of log-weights into probabilities in place; returns the
/// log-normalizer.
fn normalize_log_row(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|r| *r = u);
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        s += *r;
    }
    for r in row.iter_mut() {
        *r /= s;
    }
    max + s.ln()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Total log-likelihood `Σ_i ln Σ_k φ_k N(x_i | μ_k, Σ_k)`.
pub fn mixture_log_likelihood(components: &[GaussianComponent], points: &[Vector]) -> Result<f64> {
    let mut resp = vec![0.0; points.len() * components.len()];
    e_step(points, components, &mut resp)
}

/// Posterior assignment of `points` to the model's components.
pub fn assign(model: &ClusterModel, points: &[Vector], prior: AssignPrior) -> Result<Assignment> {
    if model.is_empty() {
        return Err(OcfError::NotReady);
    }
    let k = model.len();
    let d = model.components[0].dim();
    let densities = model
        .components
        .iter()
        .map(|c| GaussianDensity::new(&c.mean, &c.cov))
        .collect::<Result<Vec<_>>>()?;
    let log_w: Vec<f64> = match prior {
        AssignPrior::Dirichlet { alpha } => {
            let denom = model.total_count as f64 + alpha;
            model
                .components
                .iter()
                .map(|c| (c.count as f64 / denom).ln())
                .collect()
        }
        AssignPrior::MaxLikelihood => model.components.iter().map(|c| c.weight.ln()).collect(),
    };
    let mut resp = vec![0.0; points.len() * k];
    let mut labels = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        check_dims(d, p.len())?;
        let row = &mut resp[i * k..(i + 1) * k];
        for j in 0..k {
            row[j] = log_w[j] + densities[j].logpdf(p.as_slice());
        }
        let label = argmax(row);
        normalize_log_row(row);
        labels.push(label);
    }
    Ok(Assignment {
        labels,
        responsibilities: resp,
        k,
    })
}

/// Count-regularized assignment: `r_ik ∝ count_k / (total + α) · N(x_i | k)`.
pub fn dp_assign(model: &ClusterModel, points: &[Vector]) -> Result<Assignment> {
    assign(model, points, AssignPrior::Dirichlet { alpha: model.alpha })
}

fn validate_points(points: &[Vector]) -> Result<()> {
    let first = points
        .first()
        .ok_or_else(|| OcfError::InvalidParameter("empty point set".into()))?;
    let d = first.len();
    for p in points {
        check_dims(d, p.len())?;
    }
    Ok(())
}

/// SplitMix64-style seed derivation.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Converts a hard partition into components with regularized empirical
/// moments. Weights are member counts; callers normalize. Singleton parts take
/// `fallback_cov`.
pub fn components_from_partition(
    points: &[Vector],
    labels: &[usize],
    k: usize,
    fallback_cov: &Matrix,
    reg_relative: f64,
) -> Result<Vec<GaussianComponent>> {
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<&Vector> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == j)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let (mean, cov, m) = sample_moments(members)?;
        let cov = if m < 2 { fallback_cov.clone() } else { cov };
        let lambda = default_regularization(&cov, reg_relative);
        out.push(GaussianComponent::new(
            m as f64,
            mean,
            regularize_covariance(&cov, lambda),
            m as u64,
        ));
    }
    Ok(out)
}
