//! Recursive binary splitting scored on representative samples with AIC or
//! BIC, plus the principal-axis baseline splitter.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};
use crate::gaussian::{GaussianComponent, Vector};
use crate::mixture::{derive_seed, fit_gmm_em, mixture_log_likelihood, ClusterModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitCriterion {
    Aic,
    Bic,
}

/// Which sample size enters the BIC penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BicSampleSize {
    /// Number of representatives scored (bounded by the representative cap).
    #[default]
    Representatives,
    /// Full history count of the model; ablation only.
    FullHistory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub criterion: SplitCriterion,
    /// Smallest representative count for which a split is attempted.
    pub min_points: usize,
    pub max_rounds: usize,
    #[serde(default)]
    pub bic_sample_size: BicSampleSize,
}

impl SplitConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            criterion: SplitCriterion::Aic,
            min_points: 2 * (d + 1),
            max_rounds: 10,
            bic_sample_size: BicSampleSize::Representatives,
        }
    }
}

/// How split proposals are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMethod {
    /// Two-component EM on the representatives.
    Em,
    /// Threshold along the parent's leading covariance axis.
    PrincipalAxis,
}

pub fn aic(log_likelihood: f64, k_params: usize) -> f64 {
    2.0 * k_params as f64 - 2.0 * log_likelihood
}

pub fn bic(log_likelihood: f64, k_params: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + k_params as f64 * (n as f64).ln()
}

/// Free parameters of a `k`-component full-covariance mixture in `d` dimensions.
pub fn count_params(k: usize, d: usize) -> usize {
    k * (d + d * (d + 1) / 2) + (k - 1)
}

#[derive(Clone, Debug)]
pub struct SplitDecision {
    pub accepted: bool,
    pub parent_index: usize,
    pub children: Option<[GaussianComponent; 2]>,
    /// Criterion value of the single-Gaussian model; NaN when no fit was attempted.
    pub score_parent: f64,
    pub score_split: f64,
    /// Child (0 or 1) of each input point under the two-component model.
    pub child_labels: Option<Vec<usize>>,
}

impl SplitDecision {
    fn rejected(parent_index: usize) -> Self {
        Self {
            accepted: false,
            parent_index,
            children: None,
            score_parent: f64::NAN,
            score_split: f64::NAN,
            child_labels: None,
        }
    }
}

fn score(cfg: &SplitConfig, log_likelihood: f64, k: usize, d: usize, n: usize) -> f64 {
    let params = count_params(k, d);
    match cfg.criterion {
        SplitCriterion::Aic => aic(log_likelihood, params),
        SplitCriterion::Bic => bic(log_likelihood, params, n),
    }
}

/// Splits `count` proportionally, keeping both halves at least 1.
fn split_count(count: u64, frac_first: f64) -> Option<(u64, u64)> {
    if count < 2 {
        return None;
    }
    let first = ((count as f64) * frac_first).round().clamp(1.0, (count - 1) as f64) as u64;
    Some((first, count - first))
}

/// Single Gaussian versus two-component EM on `points`, with children inheriting
/// the parent's weight and count in proportion to the EM mixing weights.
pub fn evaluate_split(
    points: &[Vector],
    parent: &GaussianComponent,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<SplitDecision> {
    evaluate_split_with_n(points, parent, cfg, seed, points.len())
}

/// As [`evaluate_split`] with an explicit BIC sample size.
pub fn evaluate_split_with_n(
    points: &[Vector],
    parent: &GaussianComponent,
    cfg: &SplitConfig,
    seed: u64,
    bic_n: usize,
) -> Result<SplitDecision> {
    if points.len() < cfg.min_points.max(2) || parent.count < 2 {
        return Ok(SplitDecision::rejected(0));
    }
    let d = parent.dim();
    let single = fit_gmm_em(points, 1, seed)?;
    let two = match fit_gmm_em(points, 2, seed) {
        Ok(fit) if !fit.collapsed => fit,
        _ => return Ok(SplitDecision::rejected(0)),
    };
    let score_parent = score(cfg, single.log_likelihood, 1, d, bic_n);
    let score_split = score(cfg, two.log_likelihood, 2, d, bic_n);
    let accepted = score_split < score_parent;
    let mut decision = SplitDecision {
        accepted,
        parent_index: 0,
        children: None,
        score_parent,
        score_split,
        child_labels: None,
    };
    if accepted {
        let [a, b] = [&two.components[0], &two.components[1]];
        let Some((ca, cb)) = split_count(parent.count, a.weight) else {
            decision.accepted = false;
            return Ok(decision);
        };
        decision.children = Some([
            GaussianComponent::new(parent.weight * a.weight, a.mean.clone(), a.cov.clone(), ca),
            GaussianComponent::new(parent.weight * b.weight, b.mean.clone(), b.cov.clone(), cb),
        ]);
        decision.child_labels = Some(two.labels);
    }
    Ok(decision)
}

/// Bipartition along the parent's leading eigenvector, thresholded at the
/// projected mean of `points`. Returns the two children and the side of each point.
pub fn principal_axis_split(
    points: &[Vector],
    parent: &GaussianComponent,
) -> Result<([GaussianComponent; 2], Vec<usize>)> {
    if points.len() < 2 {
        return Err(OcfError::InvalidParameter(
            "principal-axis split needs at least two points".into(),
        ));
    }
    let eigen = SymmetricEigen::new(parent.cov.clone());
    let lead = (0..eigen.eigenvalues.len())
        .max_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]))
        .expect("non-empty covariance");
    let axis = eigen.eigenvectors.column(lead).into_owned();
    let proj: Vec<f64> = points.iter().map(|p| p.dot(&axis)).collect();
    let threshold = proj.iter().sum::<f64>() / proj.len() as f64;
    let sides: Vec<usize> = proj.iter().map(|&t| usize::from(t > threshold)).collect();
    let n_hi = sides.iter().filter(|&&s| s == 1).count();
    if n_hi == 0 || n_hi == points.len() {
        return Err(OcfError::InvalidParameter(
            "all points project onto one side of the split".into(),
        ));
    }
    let frac_lo = (points.len() - n_hi) as f64 / points.len() as f64;
    let (count_lo, count_hi) = split_count(parent.count.max(2), frac_lo).expect("count >= 2");
    let side = |s: usize, frac: f64, count: u64| -> Result<GaussianComponent> {
        let members = points.iter().zip(&sides).filter(|(_, &x)| x == s).map(|(p, _)| p);
        let mut c = GaussianComponent::fit(members, parent.weight * frac)?;
        if c.count < 2 {
            c.cov = parent.cov.clone();
        }
        c.count = count;
        Ok(c)
    };
    let lo = side(0, frac_lo, count_lo)?;
    let hi = side(1, 1.0 - frac_lo, count_hi)?;
    Ok(([lo, hi], sides))
}

/// Scores a principal-axis proposal with the configured criterion.
pub fn evaluate_principal_split(
    points: &[Vector],
    parent: &GaussianComponent,
    cfg: &SplitConfig,
    bic_n: usize,
) -> Result<SplitDecision> {
    if points.len() < cfg.min_points.max(2) || parent.count < 2 {
        return Ok(SplitDecision::rejected(0));
    }
    let d = parent.dim();
    let single = GaussianComponent::fit(points, 1.0)?;
    let ll1 = mixture_log_likelihood(std::slice::from_ref(&single), points)?;
    let Ok((children, sides)) = principal_axis_split(points, parent) else {
        return Ok(SplitDecision::rejected(0));
    };
    let mut normalized = children.clone();
    for c in &mut normalized {
        c.weight /= parent.weight;
    }
    let ll2 = mixture_log_likelihood(&normalized, points)?;
    let score_parent = score(cfg, ll1, 1, d, bic_n);
    let score_split = score(cfg, ll2, 2, d, bic_n);
    let accepted = score_split < score_parent;
    Ok(SplitDecision {
        accepted,
        parent_index: 0,
        children: accepted.then_some(children),
        score_parent,
        score_split,
        child_labels: accepted.then_some(sides),
    })
}

#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub model: ClusterModel,
    pub accepted_splits: usize,
}

/// Tests every component on its representatives and replaces accepted
/// parents by their two children; children are re-tested in later rounds.
///
/// `labels[i]` is the component of `reps[i]` under the incoming model.
pub fn split_pass(
    model: &ClusterModel,
    reps: &[Vector],
    labels: &[usize],
    cfg: &SplitConfig,
    method: SplitMethod,
    seed: u64,
) -> Result<SplitOutcome> {
    if reps.len() != labels.len() {
        return Err(OcfError::InvalidParameter(
            "representatives and labels differ in length".into(),
        ));
    }
    let mut comps = model.components.clone();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l >= comps.len() {
            return Err(OcfError::InvalidParameter(format!("label {l} out of range")));
        }
        members[l].push(i);
    }
    let bic_n_for = |m: usize| match cfg.bic_sample_size {
        BicSampleSize::Representatives => m,
        BicSampleSize::FullHistory => model.total_count.max(1) as usize,
    };

    let mut queue: Vec<usize> = (0..comps.len()).collect();
    let mut accepted_splits = 0;
    for round in 0..cfg.max_rounds {
        if queue.is_empty() {
            break;
        }
        let mut next = Vec::new();
        for &idx in &queue {
            let pts: Vec<Vector> = members[idx].iter().map(|&i| reps[i].clone()).collect();
            let salt = (round as u64) << 32 | idx as u64;
            let decision = match method {
                SplitMethod::Em => {
                    evaluate_split_with_n(&pts, &comps[idx], cfg, derive_seed(seed, salt), bic_n_for(pts.len()))
                }
                SplitMethod::PrincipalAxis => {
                    evaluate_principal_split(&pts, &comps[idx], cfg, bic_n_for(pts.len()))
                }
            };
            let decision = match decision {
                Ok(d) => d,
                Err(e) => {
                    log::warn!("split: component {idx} evaluation failed: {e}");
                    continue;
                }
            };
            if !decision.accepted {
                continue;
            }
            let ([a, b], sides) = (
                decision.children.expect("accepted split has children"),
                decision.child_labels.expect("accepted split has labels"),
            );
            let old = std::mem::take(&mut members[idx]);
            let (mut ma, mut mb) = (Vec::new(), Vec::new());
            for (&i, &s) in old.iter().zip(&sides) {
                if s == 0 {
                    ma.push(i);
                } else {
                    mb.push(i);
                }
            }
            comps[idx] = a;
            members[idx] = ma;
            comps.push(b);
            members.push(mb);
            next.push(idx);
            next.push(comps.len() - 1);
            accepted_splits += 1;
        }
        queue = next;
    }

    let mut out = ClusterModel {
        components: comps,
        alpha: model.alpha,
        total_count: model.total_count,
    };
    out.renormalize();
    Ok(SplitOutcome {
        model: out,
        accepted_splits,
    })
}
