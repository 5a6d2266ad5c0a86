//! Recursive pairwise merging under the distance and volume criteria.

use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};
use crate::gaussian::{
    default_regularization, log_ellipsoid_volume, log_volume_ratio, mahalanobis, merged_moments,
    regularize_covariance, GaussianComponent,
};
use crate::mixture::ClusterModel;

/// Relative jitter applied before retrying a degenerate distance evaluation.
const RETRY_REG_RELATIVE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    /// Mahalanobis threshold; pairs closer than this are merge candidates.
    pub eps_d: f64,
    /// Upper bound on `V_merged / (V_1 + V_2)`.
    pub eps_v: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            eps_d: 5.0,
            eps_v: 1.1,
        }
    }
}

/// Mahalanobis distance between two components, retrying once with
/// regularized covariances when the averaged covariance is degenerate.
pub fn component_distance(c1: &GaussianComponent, c2: &GaussianComponent) -> Result<f64> {
    match mahalanobis(&c1.mean, &c1.cov, &c2.mean, &c2.cov) {
        Err(OcfError::Degenerate { .. }) => {
            let r1 = regularize_covariance(&c1.cov, default_regularization(&c1.cov, RETRY_REG_RELATIVE));
            let r2 = regularize_covariance(&c2.cov, default_regularization(&c2.cov, RETRY_REG_RELATIVE));
            mahalanobis(&c1.mean, &r1, &c2.mean, &r2)
        }
        other => other,
    }
}

/// `V_merged / (V_1 + V_2)` for the moment-matched merge of `c1` and `c2`.
pub fn volume_ratio(c1: &GaussianComponent, c2: &GaussianComponent) -> Result<f64> {
    let merged = merged_moments(c1, c2)?;
    let lv1 = log_ellipsoid_volume(&c1.cov)?;
    let lv2 = log_ellipsoid_volume(&c2.cov)?;
    let lvm = log_ellipsoid_volume(&merged.cov)?;
    Ok(log_volume_ratio(lvm, lv1, lv2).exp())
}

/// Both criteria: distance below `eps_d` and volume ratio at most `eps_v`.
pub fn mergeable(c1: &GaussianComponent, c2: &GaussianComponent, cfg: &MergeConfig) -> Result<bool> {
    if component_distance(c1, c2)? >= cfg.eps_d {
        return Ok(false);
    }
    Ok(volume_ratio(c1, c2)? <= cfg.eps_v)
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub model: ClusterModel,
    pub merged_pairs: usize,
}

struct VolumeCache {
    log_volumes: Vec<Option<f64>>,
}

impl VolumeCache {
    fn get(&mut self, comps: &[GaussianComponent], i: usize) -> Result<f64> {
        if let Some(v) = self.log_volumes[i] {
            return Ok(v);
        }
        let v = log_ellipsoid_volume(&comps[i].cov)?;
        self.log_volumes[i] = Some(v);
        Ok(v)
    }
}

/// Greedy closest-pair merging until no pair satisfies both criteria.
pub fn merge_pass(model: &ClusterModel, cfg: &MergeConfig) -> Result<MergeOutcome> {
    let mut comps = model.components.clone();
    let mut cache = VolumeCache {
        log_volumes: vec![None; comps.len()],
    };
    // Upper-triangular distance table, rows/cols follow `comps`.
    let mut dist: Vec<Vec<f64>> = vec![Vec::new(); comps.len()];
    for i in 0..comps.len() {
        dist[i] = (0..comps.len()).map(|j| pair_distance(&comps, i, j)).collect();
    }
    let mut merged_pairs = 0;

    loop {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..comps.len() {
            for j in (i + 1)..comps.len() {
                if dist[i][j] < cfg.eps_d {
                    candidates.push((dist[i][j], i, j));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut chosen = None;
        for &(_, i, j) in &candidates {
            let merged = merged_moments(&comps[i], &comps[j])?;
            let ratio = match (
                cache.get(&comps, i),
                cache.get(&comps, j),
                log_ellipsoid_volume(&merged.cov),
            ) {
                (Ok(a), Ok(b), Ok(m)) => log_volume_ratio(m, a, b).exp(),
                _ => continue,
            };
            if ratio <= cfg.eps_v {
                chosen = Some((i, j, merged));
                break;
            }
        }
        let Some((i, j, merged)) = chosen else { break };

        comps[i] = merged;
        comps.remove(j);
        cache.log_volumes[i] = None;
        cache.log_volumes.remove(j);
        dist.remove(j);
        for row in dist.iter_mut() {
            row.remove(j);
        }
        for other in 0..comps.len() {
            let d = pair_distance(&comps, i, other);
            dist[i][other] = d;
            dist[other][i] = d;
        }
        merged_pairs += 1;
    }

    if merged_pairs == 0 {
        return Ok(MergeOutcome {
            model: model.clone(),
            merged_pairs,
        });
    }
    let mut out = ClusterModel {
        components: comps,
        alpha: model.alpha,
        total_count: model.total_count,
    };
    out.renormalize();
    Ok(MergeOutcome {
        model: out,
        merged_pairs,
    })
}

fn pair_distance(comps: &[GaussianComponent], i: usize, j: usize) -> f64 {
    if i == j {
        return 0.0;
    }
    match component_distance(&comps[i], &comps[j]) {
        Ok(d) => d,
        Err(e) => {
            log::warn!("merge: distance between components {i} and {j} unavailable: {e}");
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{Matrix, Vector};
    use proptest::prelude::*;

    fn unit(mean: &[f64], weight: f64, count: u64) -> GaussianComponent {
        let d = mean.len();
        GaussianComponent::new(weight, Vector::from_column_slice(mean), Matrix::identity(d, d), count)
    }

    /// Volume ratio via determinants, independent of the eigen/log-space path.
    fn oracle_ratio(c1: &GaussianComponent, c2: &GaussianComponent) -> f64 {
        let w = c1.weight + c2.weight;
        let m = (&c1.mean * c1.weight + &c2.mean * c2.weight) / w;
        let d1 = &c1.mean - &m;
        let d2 = &c2.mean - &m;
        let cov = ((&c1.cov + &d1 * d1.transpose()) * c1.weight
            + (&c2.cov + &d2 * d2.transpose()) * c2.weight)
            / w;
        cov.determinant().sqrt() / (c1.cov.determinant().sqrt() + c2.cov.determinant().sqrt())
    }

    fn oracle_distance(c1: &GaussianComponent, c2: &GaussianComponent) -> f64 {
        let avg = (&c1.cov + &c2.cov) * 0.5;
        let inv = avg.try_inverse().unwrap();
        let diff = &c1.mean - &c2.mean;
        (diff.transpose() * inv * &diff)[(0, 0)].sqrt()
    }

    #[test]
    fn identical_components_merge() {
        let c = unit(&[1.0, 2.0], 0.5, 10);
        assert!((volume_ratio(&c, &c).unwrap() - 0.5).abs() < 1e-12);
        assert!(mergeable(&c, &c, &MergeConfig::default()).unwrap());
        let model = ClusterModel::from_components(vec![c.clone(), c], 1.0);
        let out = merge_pass(&model, &MergeConfig::default()).unwrap();
        assert_eq!(out.model.len(), 1);
        assert_eq!(out.merged_pairs, 1);
        assert!((out.model.components[0].weight - 1.0).abs() < 1e-15);
        assert_eq!(out.model.components[0].count, 20);
    }

    #[test]
    fn distant_components_not_mergeable() {
        let a = unit(&[0.0, 0.0], 0.5, 1);
        let b = unit(&[100.0, 0.0], 0.5, 1);
        assert!(!mergeable(&a, &b, &MergeConfig::default()).unwrap());
        let model = ClusterModel::from_components(vec![a, b], 1.0);
        let out = merge_pass(&model, &MergeConfig::default()).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.merged_pairs, 0);
    }

    #[test]
    fn mergeable_flips_at_volume_crossover() {
        let cfg = MergeConfig::default();
        let mut flips = Vec::new();
        let mut prev = None;
        for step in 0..=600 {
            let s = step as f64 * 0.01;
            let a = unit(&[0.0, 0.0], 0.5, 1);
            let b = unit(&[s, 0.0], 0.5, 1);
            let expected = oracle_distance(&a, &b) < cfg.eps_d && oracle_ratio(&a, &b) <= cfg.eps_v;
            let got = mergeable(&a, &b, &cfg).unwrap();
            assert_eq!(got, expected, "separation {s}");
            if prev.is_some_and(|p| p != got) {
                flips.push(s);
            }
            prev = Some(got);
        }
        // Equal-weight unit Gaussians: ratio = sqrt(1 + s²/4) / 2, crossing 1.1 at s ≈ 3.919.
        assert_eq!(flips.len(), 1);
        assert!((flips[0] - 3.92).abs() < 0.011, "{flips:?}");
    }

    /// Exhaustive reference: at each step evaluate every pair with the
    /// determinant/inverse route and merge the closest eligible one.
    fn oracle_merge(mut comps: Vec<GaussianComponent>, cfg: &MergeConfig) -> Vec<GaussianComponent> {
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..comps.len() {
                for j in (i + 1)..comps.len() {
                    let d = oracle_distance(&comps[i], &comps[j]);
                    if d < cfg.eps_d
                        && oracle_ratio(&comps[i], &comps[j]) <= cfg.eps_v
                        && best.map_or(true, |b| d < b.0)
                    {
                        best = Some((d, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { return comps };
            let (a, b) = (&comps[i], &comps[j]);
            let w = a.weight + b.weight;
            let m = (&a.mean * a.weight + &b.mean * b.weight) / w;
            let da = &a.mean - &m;
            let db = &b.mean - &m;
            let cov = ((&a.cov + &da * da.transpose()) * a.weight
                + (&b.cov + &db * db.transpose()) * b.weight)
                / w;
            let merged = GaussianComponent::new(w, m, cov, a.count + b.count);
            comps[i] = merged;
            comps.remove(j);
        }
    }

    #[test]
    fn chain_of_three_matches_exhaustive_order() {
        let cfg = MergeConfig::default();
        for spacing in [1.0, 1.5, 2.0, 2.5, 3.0, 3.5] {
            let comps = vec![
                unit(&[0.0, 0.0], 1.0 / 3.0, 10),
                unit(&[spacing, 0.0], 1.0 / 3.0, 10),
                unit(&[2.0 * spacing, 0.0], 1.0 / 3.0, 10),
            ];
            let model = ClusterModel::from_components(comps.clone(), 1.0);
            let got = merge_pass(&model, &cfg).unwrap().model;
            let want = oracle_merge(comps, &cfg);
            assert_eq!(got.len(), want.len(), "spacing {spacing}");
            let total: f64 = want.iter().map(|c| c.weight).sum();
            for (g, w) in got.components.iter().zip(&want) {
                assert!((g.weight - w.weight / total).abs() < 1e-12);
                assert!((&g.mean - &w.mean).amax() < 1e-12);
                assert!((&g.cov - &w.cov).amax() < 1e-12);
                assert_eq!(g.count, w.count);
            }
        }
    }

    fn arb_model() -> impl Strategy<Value = ClusterModel> {
        let comp = (
            prop::collection::vec(-6.0f64..6.0, 3),
            prop::collection::vec(0.3f64..2.0, 3),
            -0.4f64..0.4,
            0.05f64..1.0,
            1u64..500,
        )
            .prop_map(|(mean, scales, rho, w, n)| {
                let mut cov = Matrix::from_diagonal(&Vector::from_vec(scales.clone()));
                let off = rho * (scales[0] * scales[1]).sqrt();
                cov[(0, 1)] = off;
                cov[(1, 0)] = off;
                GaussianComponent::new(w, Vector::from_vec(mean), cov, n)
            });
        prop::collection::vec(comp, 1..7).prop_map(|c| ClusterModel::from_components(c, 1.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn merge_pass_invariants(model in arb_model()) {
            let cfg = MergeConfig::default();
            let out = merge_pass(&model, &cfg).unwrap().model;
            prop_assert!(out.len() <= model.len());
            prop_assert!((out.total_weight() - 1.0).abs() < 1e-9);
            prop_assert_eq!(out.total_count, model.total_count);
            prop_assert_eq!(out.components.iter().map(|c| c.count).sum::<u64>(), model.total_count);

            let mean = |m: &ClusterModel| m.components.iter().fold(Vector::zeros(3), |acc, c| acc + &c.mean * c.weight);
            prop_assert!((mean(&out) - mean(&model)).amax() < 1e-9);

            for i in 0..out.len() {
                for j in (i + 1)..out.len() {
                    prop_assert!(!mergeable(&out.components[i], &out.components[j], &cfg).unwrap());
                }
            }
            let again = merge_pass(&out, &cfg).unwrap();
            prop_assert_eq!(again.merged_pairs, 0);
            prop_assert_eq!(again.model.len(), out.len());
        }
    }
}
