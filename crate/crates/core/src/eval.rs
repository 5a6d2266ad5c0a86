//! Post-hoc evaluation: contingency tables, majority-vote F1, per-cluster
//! entropy, consistency flags, order robustness and CSV reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};

/// Cluster-by-class counts over labeled observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Contingency {
    /// Cluster ids, ascending; row `i` of `counts` belongs to `clusters[i]`.
    pub clusters: Vec<usize>,
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub cluster_sizes: Vec<u64>,
    pub class_sizes: Vec<u64>,
}

impl Contingency {
    /// Unlabeled points are skipped.
    pub fn from_labels(pred: &[usize], truth: &[Option<u32>]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(OcfError::DimensionMismatch {
                expected: pred.len(),
                found: truth.len(),
            });
        }
        let n_classes = truth.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0);
        let mut rows: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (&p, t) in pred.iter().zip(truth) {
            if let Some(t) = t {
                rows.entry(p).or_insert_with(|| vec![0; n_classes])[*t as usize] += 1;
            }
        }
        let clusters: Vec<usize> = rows.keys().copied().collect();
        let counts: Vec<Vec<u64>> = rows.into_values().collect();
        let cluster_sizes = counts.iter().map(|r| r.iter().sum()).collect();
        let mut class_sizes = vec![0; n_classes];
        for r in &counts {
            for (s, v) in class_sizes.iter_mut().zip(r) {
                *s += v;
            }
        }
        Ok(Self {
            clusters,
            n_classes,
            counts,
            cluster_sizes,
            class_sizes,
        })
    }

    pub fn total(&self) -> u64 {
        self.cluster_sizes.iter().sum()
    }
}

/// Each cluster's largest class, ties to the smallest class id. Clusters
/// without labeled members never appear in a contingency, so are unmapped.
pub fn majority_map(c: &Contingency) -> BTreeMap<usize, u32> {
    c.clusters
        .iter()
        .zip(&c.counts)
        .filter(|(_, row)| row.iter().any(|&v| v > 0))
        .map(|(&k, row)| {
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            (k, best as u32)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Macro average over ground-truth classes present.
    pub macro_f1: f64,
    /// Micro average (equals accuracy of the mapped labels).
    pub micro_f1: f64,
    /// Indexed by class id; 0 for ids with no members.
    pub per_class: Vec<f64>,
}

pub fn majority_vote_f1(pred: &[usize], truth: &[Option<u32>]) -> Result<F1Scores> {
    let c = Contingency::from_labels(pred, truth)?;
    f1_from_contingency(&c)
}

pub fn f1_from_contingency(c: &Contingency) -> Result<F1Scores> {
    if c.total() == 0 {
        return Err(OcfError::InvalidParameter("no labeled observations to score".into()));
    }
    let map = majority_map(c);
    let mut tp = vec![0u64; c.n_classes];
    let mut predicted = vec![0u64; c.n_classes];
    for (k, row) in c.clusters.iter().zip(&c.counts) {
        let m = map[k] as usize;
        tp[m] += row[m];
        predicted[m] += row.iter().sum::<u64>();
    }
    let per_class: Vec<f64> = (0..c.n_classes)
        .map(|j| {
            if tp[j] == 0 {
                return 0.0;
            }
            let p = tp[j] as f64 / predicted[j] as f64;
            let r = tp[j] as f64 / c.class_sizes[j] as f64;
            2.0 * p * r / (p + r)
        })
        .collect();
    let present: Vec<usize> = (0..c.n_classes).filter(|&j| c.class_sizes[j] > 0).collect();
    let macro_f1 = present.iter().map(|&j| per_class[j]).sum::<f64>() / present.len() as f64;
    let micro_f1 = tp.iter().sum::<u64>() as f64 / c.total() as f64;
    Ok(F1Scores {
        macro_f1,
        micro_f1,
        per_class,
    })
}

/// Shannon entropy in bits of each cluster's class distribution, aligned with
/// `c.clusters`.
pub fn cluster_entropy(c: &Contingency) -> Vec<f64> {
    c.counts
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                return 0.0;
            }
            let h: f64 = row
                .iter()
                .filter(|&&v| v > 0)
                .map(|&v| {
                    let p = v as f64 / n as f64;
                    -p * p.log2()
                })
                .sum();
            h.max(0.0)
        })
        .collect()
}

/// Whether each point's majority-mapped prediction matches its class;
/// `None` for unlabeled points.
pub fn consistency_flags(pred: &[usize], truth: &[Option<u32>]) -> Result<Vec<Option<bool>>> {
    let c = Contingency::from_labels(pred, truth)?;
    let map = majority_map(&c);
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| t.map(|t| map.get(p) == Some(&t)))
        .collect())
}

/// Mean and population standard deviation of final F1 across orderings.
pub fn order_robustness(f1s: &[f64]) -> Result<(f64, f64)> {
    if f1s.len() < 2 {
        return Err(OcfError::InvalidParameter(
            "order robustness needs at least two runs".into(),
        ));
    }
    let n = f1s.len() as f64;
    let mean = f1s.iter().sum::<f64>() / n;
    let var = f1s.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trigger_index: u64,
    pub cumulative: u64,
    pub n_clusters: usize,
    pub f1: Option<f64>,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub truth: Option<u32>,
    pub pred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` when no point carries a label.
    pub f1: Option<F1Scores>,
    pub contingency: Contingency,
    /// Entropy per cluster id (labeled members only).
    pub cluster_entropy: BTreeMap<usize, f64>,
    /// All points per cluster id, labeled or not.
    pub cluster_sizes: BTreeMap<usize, u64>,
    pub majority_map: BTreeMap<usize, u32>,
    pub consistency: Vec<Option<bool>>,
    pub points: Vec<PointRow>,
    pub timing: Vec<MetricsRow>,
}

impl EvalReport {
    pub fn macro_f1(&self) -> Option<f64> {
        self.f1.as_ref().map(|f| f.macro_f1)
    }
}

pub fn evaluate(points: Vec<PointRow>, timing: Vec<MetricsRow>) -> Result<EvalReport> {
    if points.is_empty() {
        return Err(OcfError::InvalidParameter("no predictions to evaluate".into()));
    }
    let pred: Vec<usize> = points.iter().map(|p| p.pred).collect();
    let truth: Vec<Option<u32>> = points.iter().map(|p| p.truth).collect();
    let contingency = Contingency::from_labels(&pred, &truth)?;
    let f1 = if contingency.total() > 0 {
        Some(f1_from_contingency(&contingency)?)
    } else {
        None
    };
    let cluster_entropy = contingency
        .clusters
        .iter()
        .copied()
        .zip(crate::eval::cluster_entropy(&contingency))
        .collect();
    let mut cluster_sizes = BTreeMap::new();
    for &p in &pred {
        *cluster_sizes.entry(p).or_insert(0) += 1;
    }
    let majority_map = majority_map(&contingency);
    let consistency = pred
        .iter()
        .zip(&truth)
        .map(|(p, t)| t.map(|t| majority_map.get(p) == Some(&t)))
        .collect();
    Ok(EvalReport {
        f1,
        contingency,
        cluster_entropy,
        cluster_sizes,
        majority_map,
        consistency,
        points,
        timing,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics<W: std::io::Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["trigger_index", "cumulative", "n_clusters", "f1", "wall_time_ms"])?;
    for r in rows {
        wtr.write_record([
            r.trigger_index.to_string(),
            r.cumulative.to_string(),
            r.n_clusters.to_string(),
            opt(r.f1),
            r.wall_time_ms.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Writes metrics.csv, contingency.csv, entropy.csv and points.csv.
pub fn emit_reports(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_metrics(std::fs::File::create(dir.join("metrics.csv"))?, &report.timing)?;

    let c = &report.contingency;
    let mut wtr = csv::Writer::from_path(dir.join("contingency.csv"))?;
    let mut header = vec!["cluster_id".to_string()];
    header.extend((0..c.n_classes).map(|j| format!("class_{j}")));
    header.push("total".into());
    wtr.write_record(&header)?;
    for ((k, row), size) in c.clusters.iter().zip(&c.counts).zip(&c.cluster_sizes) {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(size.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;

    let mut wtr = csv::Writer::from_path(dir.join("entropy.csv"))?;
    wtr.write_record(["cluster_id", "entropy", "size"])?;
    for (k, size) in &report.cluster_sizes {
        wtr.write_record([k.to_string(), opt(report.cluster_entropy.get(k)), size.to_string()])?;
    }
    wtr.flush()?;

    write_points(std::fs::File::create(dir.join("points.csv"))?, report)?;
    Ok(())
}

fn write_points<W: std::io::Write>(w: W, report: &EvalReport) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "id",
        "x",
        "y",
        "truth",
        "pred",
        "mapped_pred",
        "consistent",
        "entropy_of_cluster",
    ])?;
    for (p, flag) in report.points.iter().zip(&report.consistency) {
        wtr.write_record([
            p.id.clone(),
            p.x.to_string(),
            p.y.to_string(),
            opt(p.truth),
            p.pred.to_string(),
            opt(report.majority_map.get(&p.pred)),
            opt(*flag),
            opt(report.cluster_entropy.get(&p.pred)),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the id, position, truth and prediction columns of a points.csv.
pub fn read_points<R: std::io::Read>(r: R) -> Result<Vec<PointRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| OcfError::Parse {
            line: 1,
            message: format!("points file lacks column {name}"),
        })
    };
    let (id, x, y, truth, pred) = (col("id")?, col("x")?, col("y")?, col("truth")?, col("pred")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |m: &str| OcfError::Parse {
            line,
            message: m.to_string(),
        };
        out.push(PointRow {
            id: rec[id].to_string(),
            x: rec[x].parse().map_err(|_| err("bad x"))?,
            y: rec[y].parse().map_err(|_| err("bad y"))?,
            truth: match &rec[truth] {
                "" => None,
                s => Some(s.parse().map_err(|_| err("bad truth"))?),
            },
            pred: rec[pred].parse().map_err(|_| err("bad pred"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn some(v: &[u32]) -> Vec<Option<u32>> {
        v.iter().map(|&x| Some(x)).collect()
    }

    #[test]
    fn majority_rules() {
        let pred = vec![0; 10];
        let mut truth = vec![0u32; 9];
        truth.push(1);
        let c = Contingency::from_labels(&pred, &some(&truth)).unwrap();
        assert_eq!(majority_map(&c)[&0], 0);
        let c = Contingency::from_labels(&[0, 0, 0, 0], &some(&[2, 1, 2, 1])).unwrap();
        assert_eq!(majority_map(&c)[&0], 1);
    }

    #[test]
    fn f1_examples() {
        let truth = some(&[0, 0, 1, 1, 2]);
        assert_eq!(majority_vote_f1(&[4, 4, 7, 7, 1], &truth).unwrap().macro_f1, 1.0);
        let one = majority_vote_f1(&[0, 0, 0, 0], &some(&[0, 1, 0, 1])).unwrap();
        assert!((one.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(one.per_class[1], 0.0);
        assert!((one.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(one.micro_f1, 0.5);
        // Pure refinement keeps a perfect score.
        assert_eq!(majority_vote_f1(&[0, 1, 2, 3, 4], &truth).unwrap().macro_f1, 1.0);
        assert!(majority_vote_f1(&[0, 1], &[None, None]).is_err());
    }

    #[test]
    fn f1_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth: Vec<Option<u32>> = (0..300).map(|_| Some(rng.random_range(0..4))).collect();
        let pred: Vec<usize> = (0..300).map(|_| rng.random_range(0..6)).collect();
        let perm = [5usize, 3, 0, 1, 4, 2];
        let permuted: Vec<usize> = pred.iter().map(|&p| perm[p] + 100).collect();
        assert_eq!(
            majority_vote_f1(&pred, &truth).unwrap(),
            majority_vote_f1(&permuted, &truth).unwrap()
        );
    }

    #[test]
    fn entropy_closed_forms() {
        let c = Contingency::from_labels(
            &[0, 0, 1, 1, 2, 2, 2, 2],
            &some(&[3, 3, 0, 1, 0, 0, 1, 2]),
        )
        .unwrap();
        assert_eq!(cluster_entropy(&c), vec![0.0, 1.0, 1.5]);
        let uniform = Contingency::from_labels(&[0; 4], &some(&[0, 1, 2, 3])).unwrap();
        assert!((cluster_entropy(&uniform)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_hand_count() {
        let flags = consistency_flags(&[0, 0, 0, 1, 1], &[Some(0), Some(0), Some(1), Some(1), None]).unwrap();
        assert_eq!(flags, vec![Some(true), Some(true), Some(false), Some(true), None]);
    }

    #[test]
    fn robustness_closed_form() {
        assert_eq!(order_robustness(&[0.5, 0.5, 0.5]).unwrap(), (0.5, 0.0));
        let (m, s) = order_robustness(&[0.6, 0.7, 0.8]).unwrap();
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(order_robustness(&[0.7]).is_err());
    }

    #[test]
    fn random_labeling_near_baseline() {
        // Exactly balanced classes over two random clusters: an excess of class 0
        // in one cluster is a deficit in the other, so the clusters map to
        // different classes and precision and recall both sit near 1/2.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 400;
        let mean: f64 = (0..trials)
            .map(|_| {
                let truth: Vec<Option<u32>> = (0..2000).map(|i| Some((i % 2) as u32)).collect();
                let pred: Vec<usize> = (0..2000).map(|_| rng.random_range(0..2)).collect();
                majority_vote_f1(&pred, &truth).unwrap().macro_f1
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn reports_round_trip() {
        let points: Vec<PointRow> = (0..6)
            .map(|i| PointRow {
                id: format!("p{i}"),
                x: i as f64,
                y: 0.5,
                truth: if i == 5 { None } else { Some((i / 3) as u32) },
                pred: i / 2,
            })
            .collect();
        let timing = vec![MetricsRow {
            trigger_index: 1,
            cumulative: 6,
            n_clusters: 3,
            f1: Some(0.75),
            wall_time_ms: 1.25,
        }];
        let report = evaluate(points.clone(), timing.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&report, dir.path()).unwrap();
        let back = read_points(std::fs::File::open(dir.path().join("points.csv")).unwrap()).unwrap();
        assert_eq!(back, points);
        let metrics = read_metrics(std::fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
        assert_eq!(metrics, timing);
        let entropy = std::fs::read_to_string(dir.path().join("entropy.csv")).unwrap();
        assert_eq!(entropy, "cluster_id,entropy,size\n0,0,2\n1,1,2\n2,0,2\n");
        let cont = std::fs::read_to_string(dir.path().join("contingency.csv")).unwrap();
        assert_eq!(cont, "cluster_id,class_0,class_1,total\n0,2,0,2\n1,1,1,2\n2,0,1,1\n");
    }

    #[test]
    fn unlabeled_report_has_no_f1() {
        let points = vec![PointRow {
            id: "a".into(),
            x: 0.0,
            y: 0.0,
            truth: None,
            pred: 3,
        }];
        let report = evaluate(points, Vec::new()).unwrap();
        assert!(report.f1.is_none());
        assert_eq!(report.cluster_sizes[&3], 1);
        assert!(evaluate(Vec::new(), Vec::new()).is_err());
    }
}
