//! The online clustering engine: observation buffer, per-batch triggers,
//! the seven method variants behind one interface, and snapshots.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{hkmeans_sample, random_indices, DensityEntry, DistillConfig, RepresentativeSet};
use crate::error::{OcfError, Result};
use crate::gaussian::{check_dims, sample_moments, GaussianComponent, Matrix, Vector, DEFAULT_REG_RELATIVE};
use crate::merge::{merge_pass, MergeConfig};
use crate::mixture::{
    assign, components_from_partition, derive_seed, fit_gmm_em_from_labels, scan_batch_k, AssignPrior,
    ClusterModel,
};
use crate::split::{split_pass, BicSampleSize, SplitConfig, SplitCriterion, SplitMethod};
use crate::stream::Observation;

pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const POOL_FILE: &str = "pool.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    OcDensity,
    OcHkmeans,
    SamDensity,
    SamRandom,
    SamPrincipal,
    OnlyMerging,
    FullHistory,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::OcDensity,
        Variant::OcHkmeans,
        Variant::SamDensity,
        Variant::SamRandom,
        Variant::SamPrincipal,
        Variant::OnlyMerging,
        Variant::FullHistory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::OcDensity => "oc-density",
            Variant::OcHkmeans => "oc-hkmeans",
            Variant::SamDensity => "sam-density",
            Variant::SamRandom => "sam-random",
            Variant::SamPrincipal => "sam-principal",
            Variant::OnlyMerging => "only-merging",
            Variant::FullHistory => "full-history",
        }
    }

    /// Count-regularized (Dirichlet-process) label inference, as opposed to
    /// plain maximum likelihood.
    pub fn uses_dp_prior(self) -> bool {
        !matches!(self, Variant::SamDensity | Variant::SamRandom | Variant::SamPrincipal)
    }

    fn stores_pool(self) -> bool {
        self != Variant::OnlyMerging
    }

    fn tracks_density(self) -> bool {
        matches!(self, Variant::OcDensity | Variant::SamDensity)
    }
}

impl FromStr for Variant {
    type Err = OcfError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| OcfError::InvalidParameter(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Split parameters; `min_points` defaults to `2(d + 1)` once `d` is known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub criterion: SplitCriterion,
    pub min_points: Option<usize>,
    pub max_rounds: usize,
    pub bic_sample_size: BicSampleSize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        let base = SplitConfig::for_dim(0);
        Self {
            criterion: base.criterion,
            min_points: None,
            max_rounds: base.max_rounds,
            bic_sample_size: base.bic_sample_size,
        }
    }
}

impl SplitSettings {
    pub fn resolve(&self, d: usize) -> SplitConfig {
        SplitConfig {
            criterion: self.criterion,
            min_points: self.min_points.unwrap_or(2 * (d + 1)),
            max_rounds: self.max_rounds,
            bic_sample_size: self.bic_sample_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub batch_size: usize,
    /// Representative cap `N_sub`.
    pub n_sub: usize,
    pub merge: MergeConfig,
    pub split: SplitSettings,
    pub alpha: f64,
    /// Largest k tried when clustering a batch.
    pub k_max: usize,
    /// Relative covariance regularization for batch components.
    pub lambda_reg: f64,
    pub seed: u64,
    pub variant: Variant,
    pub eps_m: usize,
    pub resort_period: u64,
    pub k_nn: usize,
    pub pool_capacity: Option<usize>,
    /// Ablation: split representatives before merging.
    pub split_before_merge: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let distill = DistillConfig::default();
        Self {
            batch_size: 1000,
            n_sub: distill.capacity,
            merge: MergeConfig::default(),
            split: SplitSettings::default(),
            alpha: 1.0,
            k_max: 10,
            lambda_reg: DEFAULT_REG_RELATIVE,
            seed: 0,
            variant: Variant::OcDensity,
            eps_m: distill.eps_m,
            resort_period: distill.resort_period,
            k_nn: distill.k_nn,
            pool_capacity: None,
            split_before_merge: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_int = [
            ("batch_size", self.batch_size),
            ("n_sub", self.n_sub),
            ("k_max", self.k_max),
            ("eps_m", self.eps_m),
            ("k_nn", self.k_nn),
            ("resort_period", self.resort_period as usize),
            ("split.max_rounds", self.split.max_rounds),
        ];
        for (name, v) in positive_int {
            if v == 0 {
                return Err(OcfError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        let positive_real = [
            ("alpha", self.alpha),
            ("lambda_reg", self.lambda_reg),
            ("merge.eps_d", self.merge.eps_d),
            ("merge.eps_v", self.merge.eps_v),
        ];
        for (name, v) in positive_real {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OcfError::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pool_capacity == Some(0) {
            return Err(OcfError::InvalidParameter("pool_capacity must be positive".into()));
        }
        Ok(())
    }

    fn distill(&self) -> DistillConfig {
        DistillConfig {
            capacity: self.n_sub,
            eps_m: self.eps_m,
            resort_period: self.resort_period,
            k_nn: self.k_nn,
            pool_capacity: self.pool_capacity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub trigger_index: u64,
    pub cumulative_count: u64,
    pub n_clusters_before: usize,
    pub n_clusters_after: usize,
    pub merged_pairs: usize,
    pub accepted_splits: usize,
    pub wall_time_ms: f64,
    /// Component index per observation of the batch, in arrival order.
    pub labels_emitted: Vec<usize>,
    /// Sub-steps that failed numerically; the model kept its prior state.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Engine {
    config: EngineConfig,
    dim: Option<usize>,
    model: ClusterModel,
    pool: Option<RepresentativeSet>,
    buffer: Vec<Vector>,
    trigger_index: u64,
    rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: ClusterModel::new(config.alpha),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            dim: None,
            pool: None,
            buffer: Vec::new(),
            trigger_index: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &ClusterModel {
        &self.model
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn trigger_index(&self) -> u64 {
        self.trigger_index
    }

    /// Observations waiting for the next trigger.
    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    pub fn pool(&self) -> Option<&RepresentativeSet> {
        self.pool.as_ref()
    }

    pub fn prior(&self) -> AssignPrior {
        if self.config.variant.uses_dp_prior() {
            AssignPrior::Dirichlet {
                alpha: self.config.alpha,
            }
        } else {
            AssignPrior::MaxLikelihood
        }
    }

    pub fn ingest(&mut self, obs: &Observation) -> Result<Option<TriggerEvent>> {
        self.ingest_feature(&obs.feature)
    }

    /// Buffers one feature vector; runs a trigger when the buffer is full.
    pub fn ingest_feature(&mut self, feature: &[f64]) -> Result<Option<TriggerEvent>> {
        match self.dim {
            Some(d) => check_dims(d, feature.len())?,
            None => {
                if feature.is_empty() {
                    return Err(OcfError::InvalidParameter("empty feature vector".into()));
                }
                let d = feature.len();
                if self.config.n_sub < 200 * d {
                    log::warn!("n_sub = {} is below the recommended 200·d = {}", self.config.n_sub, 200 * d);
                }
                self.dim = Some(d);
                if self.config.variant.stores_pool() {
                    self.pool = Some(RepresentativeSet::with_density(
                        d,
                        self.config.distill(),
                        self.config.variant.tracks_density(),
                    ));
                }
            }
        }
        if let Some(j) = feature.iter().position(|v| !v.is_finite()) {
            return Err(OcfError::InvalidParameter(format!("feature {j} is not finite")));
        }
        self.buffer.push(Vector::from_column_slice(feature));
        if self.buffer.len() >= self.config.batch_size {
            Ok(Some(self.process_trigger()))
        } else {
            Ok(None)
        }
    }

    /// Component index for `x` under the current model (read only).
    pub fn infer(&self, x: &[f64]) -> Result<usize> {
        Ok(self.infer_batch(&[Vector::from_column_slice(x)])?[0])
    }

    pub fn infer_batch(&self, points: &[Vector]) -> Result<Vec<usize>> {
        if self.trigger_index == 0 || self.model.is_empty() {
            return Err(OcfError::NotReady);
        }
        Ok(assign(&self.model, points, self.prior())?.labels)
    }

    fn process_trigger(&mut self) -> TriggerEvent {
        let start = Instant::now();
        let batch = std::mem::take(&mut self.buffer);
        self.trigger_index += 1;
        let seed = self.rng.next_u64();
        let n_clusters_before = self.model.len();
        let mut failures = Vec::new();
        let mut merged_pairs = 0;
        let mut accepted_splits = 0;

        if self.config.variant == Variant::FullHistory {
            self.update_pool(&batch, &mut failures);
            match self.refit_full_history(seed) {
                Ok(model) => self.model = model,
                Err(e) => {
                    failures.push(format!("refit: {e}"));
                    self.absorb_fallback(&batch, &mut failures);
                }
            }
        } else {
            match self.batch_components(&batch, seed) {
                Ok(comps) => self.absorb(comps),
                Err(e) => {
                    failures.push(format!("batch clustering: {e}"));
                    self.absorb_fallback(&batch, &mut failures);
                }
            }
            if self.config.split_before_merge {
                self.update_pool(&batch, &mut failures);
                accepted_splits = self.split_step(seed, &mut failures);
                merged_pairs = self.merge_step(&mut failures);
            } else {
                merged_pairs = self.merge_step(&mut failures);
                self.update_pool(&batch, &mut failures);
                accepted_splits = self.split_step(seed, &mut failures);
            }
        }

        if let Err(e) = self.model.validate() {
            failures.push(format!("model check: {e}"));
        }
        let labels_emitted = match assign(&self.model, &batch, self.prior()) {
            Ok(a) => a.labels,
            Err(e) => {
                failures.push(format!("labeling: {e}"));
                vec![0; batch.len()]
            }
        };
        for f in &failures {
            log::warn!("trigger {}: {f}", self.trigger_index);
        }
        TriggerEvent {
            trigger_index: self.trigger_index,
            cumulative_count: self.trigger_index * self.config.batch_size as u64,
            n_clusters_before,
            n_clusters_after: self.model.len(),
            merged_pairs,
            accepted_splits,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            labels_emitted,
            failures,
        }
    }

    /// k-means components of the batch with weights equal to member counts.
    fn batch_components(&self, batch: &[Vector], seed: u64) -> Result<Vec<GaussianComponent>> {
        let scan = scan_batch_k(batch, self.config.k_max.min(batch.len()), derive_seed(seed, 1))?;
        let fallback = batch_fallback_cov(batch)?;
        components_from_partition(batch, &scan.fit.labels, scan.k, &fallback, self.config.lambda_reg)
    }

    /// Adds batch components: history weights shrink by `old/new` total and a
    /// batch cluster of size `s` enters with `s/new` total.
    fn absorb(&mut self, mut comps: Vec<GaussianComponent>) {
        let added: u64 = comps.iter().map(|c| c.count).sum();
        let old_total = self.model.total_count;
        let new_total = old_total + added;
        if new_total == 0 {
            return;
        }
        let shrink = old_total as f64 / new_total as f64;
        for c in &mut self.model.components {
            c.weight *= shrink;
        }
        for c in &mut comps {
            c.weight = c.count as f64 / new_total as f64;
        }
        self.model.components.extend(comps);
        self.model.total_count = new_total;
        self.model.renormalize();
    }

    fn absorb_fallback(&mut self, batch: &[Vector], failures: &mut Vec<String>) {
        let comp = batch_fallback_cov(batch).map(|cov| {
            let n = batch.len();
            let mean = batch.iter().fold(Vector::zeros(cov.nrows()), |acc, x| acc + x) / n as f64;
            let lambda = crate::gaussian::default_regularization(&cov, self.config.lambda_reg);
            GaussianComponent::new(n as f64, mean, crate::gaussian::regularize_covariance(&cov, lambda), n as u64)
        });
        match comp {
            Ok(c) => self.absorb(vec![c]),
            Err(e) => failures.push(format!("fallback absorb: {e}")),
        }
    }

    fn merge_step(&mut self, failures: &mut Vec<String>) -> usize {
        match merge_pass(&self.model, &self.config.merge) {
            Ok(out) => {
                self.model = out.model;
                out.merged_pairs
            }
            Err(e) => {
                failures.push(format!("merge: {e}"));
                0
            }
        }
    }

    fn update_pool(&mut self, batch: &[Vector], failures: &mut Vec<String>) {
        if let Some(pool) = self.pool.as_mut() {
            if let Err(e) = pool.update_queue(batch, self.trigger_index) {
                failures.push(format!("distill: {e}"));
            }
        }
    }

    fn representatives(&self, seed: u64) -> Vec<Vector> {
        let Some(pool) = self.pool.as_ref() else {
            return Vec::new();
        };
        let n_sub = self.config.n_sub;
        match self.config.variant {
            Variant::OcDensity | Variant::SamDensity => pool.vectors(&pool.select_representatives(n_sub)),
            Variant::OcHkmeans => hkmeans_sample(&pool.all_vectors(), n_sub, derive_seed(seed, 4)),
            Variant::SamRandom | Variant::SamPrincipal => random_indices(pool.len(), n_sub, derive_seed(seed, 4))
                .into_iter()
                .map(|i| pool.vector(pool.first_id() + i as u64))
                .collect(),
            Variant::OnlyMerging | Variant::FullHistory => Vec::new(),
        }
    }

    fn split_step(&mut self, seed: u64, failures: &mut Vec<String>) -> usize {
        if matches!(self.config.variant, Variant::OnlyMerging | Variant::FullHistory) || self.model.is_empty() {
            return 0;
        }
        let reps = self.representatives(seed);
        if reps.is_empty() {
            return 0;
        }
        let d = self.dim.unwrap_or(reps[0].len());
        let method = if self.config.variant == Variant::SamPrincipal {
            SplitMethod::PrincipalAxis
        } else {
            SplitMethod::Em
        };
        let result = assign(&self.model, &reps, self.prior()).and_then(|a| {
            split_pass(
                &self.model,
                &reps,
                &a.labels,
                &self.config.split.resolve(d),
                method,
                derive_seed(seed, 5),
            )
        });
        match result {
            Ok(out) => {
                self.model = out.model;
                out.accepted_splits
            }
            Err(e) => {
                failures.push(format!("split: {e}"));
                0
            }
        }
    }

    /// Discards the model and refits on every stored latent.
    fn refit_full_history(&self, seed: u64) -> Result<ClusterModel> {
        let pool = self.pool.as_ref().ok_or(OcfError::NotReady)?;
        let all = pool.all_vectors();
        let scan = scan_batch_k(&all, self.config.k_max.min(all.len()), derive_seed(seed, 2))?;
        let fit = fit_gmm_em_from_labels(&all, &scan.fit.labels, scan.k, derive_seed(seed, 3))?;
        let comps: Vec<GaussianComponent> = fit.components.into_iter().filter(|c| c.weight > 0.0).collect();
        let mut model = ClusterModel::from_components(comps, self.config.alpha);
        // Observations evicted from a capped pool still count toward history.
        let processed = self.trigger_index * self.config.batch_size as u64;
        if model.total_count < processed && model.total_count > 0 {
            let scale = processed as f64 / model.total_count as f64;
            let mut assigned = 0;
            for c in &mut model.components {
                c.count = (c.count as f64 * scale).floor() as u64;
                assigned += c.count;
            }
            if let Some(c) = model.components.iter_mut().max_by_key(|c| c.count) {
                c.count += processed - assigned;
            }
            model.total_count = processed;
        }
        Ok(model)
    }

    /// In-memory snapshot: the JSON document and the raw pool bytes.
    pub fn to_snapshot(&self) -> (Snapshot, Vec<u8>) {
        let components = self
            .model
            .components
            .iter()
            .map(|c| ComponentState {
                weight: c.weight,
                mean: c.mean.as_slice().to_vec(),
                cov: c.cov.transpose().as_slice().to_vec(),
                count: c.count,
            })
            .collect();
        let (pool_state, queue, bytes) = match &self.pool {
            Some(p) => {
                let bytes: Vec<u8> = p.raw_features().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                let state = PoolState {
                    track_density: p.tracks_density(),
                    len: p.len(),
                    entries: p.entries().to_vec(),
                    batches: p.batches_seen(),
                };
                (Some(state), p.queue().to_vec(), bytes)
            }
            None => (None, Vec::new(), Vec::new()),
        };
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            dim: self.dim,
            trigger_index: self.trigger_index,
            total_count: self.model.total_count,
            components,
            pool_ref: pool_state.as_ref().map(|_| POOL_FILE.to_string()),
            pool: pool_state,
            queue,
            buffer: self.buffer.iter().map(|x| x.as_slice().to_vec()).collect(),
            rng_state: self.rng.clone(),
        };
        (snap, bytes)
    }

    pub fn from_snapshot(snap: Snapshot, pool_bytes: &[u8]) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(OcfError::Snapshot(format!(
                "unsupported snapshot version {} (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        snap.config.validate()?;
        let dim_err = |what: &str| OcfError::Snapshot(format!("{what} does not match dimension {:?}", snap.dim));
        let mut components = Vec::with_capacity(snap.components.len());
        for c in &snap.components {
            let d = snap.dim.ok_or_else(|| dim_err("component"))?;
            if c.mean.len() != d || c.cov.len() != d * d {
                return Err(dim_err("component"));
            }
            components.push(GaussianComponent::new(
                c.weight,
                Vector::from_column_slice(&c.mean),
                DMatrix::from_row_slice(d, d, &c.cov),
                c.count,
            ));
        }
        let model = ClusterModel {
            components,
            alpha: snap.config.alpha,
            total_count: snap.total_count,
        };
        model.validate().map_err(|e| OcfError::Snapshot(format!("invalid model: {e}")))?;
        for x in &snap.buffer {
            if Some(x.len()) != snap.dim {
                return Err(dim_err("buffered observation"));
            }
        }
        let pool = match (snap.pool, snap.dim) {
            (Some(state), Some(d)) => {
                if pool_bytes.len() != state.len * d * 4 {
                    return Err(OcfError::Snapshot(format!(
                        "pool file holds {} bytes, expected {} x {d} floats",
                        pool_bytes.len(),
                        state.len
                    )));
                }
                let features: Vec<f64> = pool_bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                Some(RepresentativeSet::restore_parts(
                    d,
                    snap.config.distill(),
                    state.track_density,
                    features,
                    state.entries,
                    snap.queue,
                    state.batches,
                )?)
            }
            (Some(_), None) => return Err(dim_err("pool")),
            (None, _) => None,
        };
        if pool.is_none() && snap.dim.is_some() && snap.config.variant.stores_pool() {
            return Err(OcfError::Snapshot("variant requires a stored pool".into()));
        }
        Ok(Self {
            config: snap.config,
            dim: snap.dim,
            model,
            pool,
            buffer: snap.buffer.iter().map(|x| Vector::from_column_slice(x)).collect(),
            trigger_index: snap.trigger_index,
            rng: snap.rng_state,
        })
    }

    /// Writes `snapshot.json` and `pool.bin` into `dir`, each via a temporary
    /// file and rename.
    pub fn snapshot(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (snap, bytes) = self.to_snapshot();
        let json = serde_json::to_vec(&snap)?;
        let pool_tmp = dir.join(format!("{POOL_FILE}.tmp"));
        let json_tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        std::fs::write(&pool_tmp, &bytes)?;
        std::fs::write(&json_tmp, &json)?;
        std::fs::rename(pool_tmp, dir.join(POOL_FILE))?;
        std::fs::rename(json_tmp, dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    pub fn restore(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let snap: Snapshot = serde_json::from_slice(&std::fs::read(dir.join(SNAPSHOT_FILE))?)?;
        let bytes = match &snap.pool_ref {
            Some(name) => {
                if Path::new(name).components().count() != 1 {
                    return Err(OcfError::Snapshot(format!("pool_ref {name:?} must be a plain file name")));
                }
                std::fs::read(dir.join(name))?
            }
            None => Vec::new(),
        };
        Self::from_snapshot(snap, &bytes)
    }
}

fn batch_fallback_cov(batch: &[Vector]) -> Result<Matrix> {
    let d = batch
        .first()
        .map(|x| x.len())
        .ok_or_else(|| OcfError::InvalidParameter("empty batch".into()))?;
    if batch.len() < 2 {
        return Ok(Matrix::identity(d, d));
    }
    Ok(sample_moments(batch)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentState {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub track_density: bool,
    pub len: usize,
    pub entries: Vec<DensityEntry>,
    pub batches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub config: EngineConfig,
    pub dim: Option<usize>,
    pub trigger_index: u64,
    pub total_count: u64,
    pub components: Vec<ComponentState>,
    /// File holding the pool as little-endian f32, row-major `[N × d]`.
    pub pool_ref: Option<String>,
    pub pool: Option<PoolState>,
    pub queue: Vec<u64>,
    pub buffer: Vec<Vec<f64>>,
    pub rng_state: ChaCha8Rng,
}
