//! Survey stream simulation: dataset CSV I/O, survey trajectory orderings,
//! and a synthetic spatially patched labeled dataset generator.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{OcfError, Result};

pub const DEFAULT_TRACKS: f64 = 20.0;
pub const DEFAULT_WAYPOINTS: usize = 40;
const MEAN_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: String,
    pub easting: f64,
    pub northing: f64,
    pub label: Option<u32>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering2d {
    We,
    Ns,
    Random,
}

impl Ordering2d {
    pub const ALL: [Ordering2d; 3] = [Ordering2d::We, Ordering2d::Ns, Ordering2d::Random];

    pub fn name(self) -> &'static str {
        match self {
            Ordering2d::We => "we",
            Ordering2d::Ns => "ns",
            Ordering2d::Random => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    We,
    Ns,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file)
}

/// Parses a dataset table with header `id,x,y,label,f0,…,f{d-1}`.
pub fn read_dataset<R: std::io::Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let fixed = ["id", "x", "y", "label"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h.trim() != f) {
        return Err(OcfError::Parse {
            line: 1,
            message: "header must start with id,x,y,label".into(),
        });
    }
    let d = header.len() - fixed.len();
    for (j, h) in header.iter().skip(fixed.len()).enumerate() {
        if h.trim() != format!("f{j}") {
            return Err(OcfError::Parse {
                line: 1,
                message: format!("expected feature column f{j}, found {h:?}"),
            });
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| OcfError::Parse { line, message };
        if rec.len() != header.len() {
            return Err(err(format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> {
            let s = rec[i].trim();
            let v: f64 = s
                .parse()
                .map_err(|_| err(format!("column {}: not a number: {s:?}", header[i].trim())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(format!("column {}: non-finite value", header[i].trim())))
            }
        };
        let label = match rec[3].trim() {
            "" => None,
            s => Some(s.parse::<u32>().map_err(|_| err(format!("bad label {s:?}")))?),
        };
        let feature = (0..d).map(|j| num(4 + j)).collect::<Result<Vec<_>>>()?;
        out.push(Observation {
            id: rec[0].to_string(),
            easting: num(1)?,
            northing: num(2)?,
            label,
            feature,
        });
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, obs: &[Observation]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset(file, obs)
}

pub fn write_dataset<W: std::io::Write>(writer: W, obs: &[Observation]) -> Result<()> {
    let d = obs.first().map_or(0, |o| o.feature.len());
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["id", "x", "y", "label"].iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for o in obs {
        if o.feature.len() != d {
            return Err(OcfError::DimensionMismatch {
                expected: d,
                found: o.feature.len(),
            });
        }
        let mut row = vec![
            o.id.clone(),
            o.easting.to_string(),
            o.northing.to_string(),
            o.label.map(|l| l.to_string()).unwrap_or_default(),
        ];
        row.extend(o.feature.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn bounds(obs: &[Observation]) -> (f64, f64, f64, f64) {
    obs.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(x0, x1, y0, y1), o| (x0.min(o.easting), x1.max(o.easting), y0.min(o.northing), y1.max(o.northing)),
    )
}

/// Default track spacing: cross-axis extent over 20 tracks.
pub fn default_track_spacing(obs: &[Observation], axis: Axis) -> f64 {
    let (x0, x1, y0, y1) = bounds(obs);
    let extent = match axis {
        Axis::We => y1 - y0,
        Axis::Ns => x1 - x0,
    };
    if extent.is_finite() && extent > 0.0 {
        extent / DEFAULT_TRACKS
    } else {
        1.0
    }
}

/// Boustrophedon raster. `We` runs tracks west–east stacked south to north;
/// `Ns` runs them south–north stacked west to east.
pub fn order_lawnmower(obs: &[Observation], axis: Axis, track_spacing: f64) -> Vec<Observation> {
    if obs.is_empty() {
        return Vec::new();
    }
    let spacing = if track_spacing > 0.0 { track_spacing } else { f64::INFINITY };
    let (x0, _, y0, _) = bounds(obs);
    let key = |o: &Observation| match axis {
        Axis::We => (((o.northing - y0) / spacing).floor() as i64, o.easting, o.northing),
        Axis::Ns => (((o.easting - x0) / spacing).floor() as i64, o.northing, o.easting),
    };
    let mut idx: Vec<usize> = (0..obs.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ta, ua, va) = key(&obs[a]);
        let (tb, ub, vb) = key(&obs[b]);
        ta.cmp(&tb).then_with(|| {
            let along = ua.total_cmp(&ub).then(va.total_cmp(&vb)).then(a.cmp(&b));
            if ta % 2 == 0 {
                along
            } else {
                along.reverse()
            }
        })
    });
    idx.into_iter().map(|i| obs[i].clone()).collect()
}

/// Point-to-point transects between seeded uniform waypoints; each point joins
/// its nearest segment and is emitted in along-segment order.
pub fn order_random_waypoints(obs: &[Observation], n_waypoints: usize, seed: u64) -> Vec<Observation> {
    if obs.is_empty() {
        return Vec::new();
    }
    let (x0, x1, y0, y1) = bounds(obs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let wps: Vec<(f64, f64)> = (0..n_waypoints.max(2))
        .map(|_| (uniform(x0, x1), uniform(y0, y1)))
        .collect();
    let mut keyed: Vec<(usize, f64, usize)> = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut best = (f64::INFINITY, 0usize, 0.0);
            for (s, w) in wps.windows(2).enumerate() {
                let (ax, ay) = w[0];
                let (dx, dy) = (w[1].0 - ax, w[1].1 - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((o.easting - ax) * dx + (o.northing - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + t * dx - o.easting, ay + t * dy - o.northing);
                let dist2 = px * px + py * py;
                if dist2 < best.0 {
                    best = (dist2, s, t);
                }
            }
            (best.1, best.2, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    keyed.into_iter().map(|(_, _, i)| obs[i].clone()).collect()
}

/// Applies one of the three survey orderings with default geometry.
pub fn apply_ordering(obs: &[Observation], ordering: Ordering2d, seed: u64) -> Vec<Observation> {
    match ordering {
        Ordering2d::We => order_lawnmower(obs, Axis::We, default_track_spacing(obs, Axis::We)),
        Ordering2d::Ns => order_lawnmower(obs, Axis::Ns, default_track_spacing(obs, Axis::Ns)),
        Ordering2d::Random => order_random_waypoints(obs, DEFAULT_WAYPOINTS, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLayout {
    Grid,
    Voronoi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_points: usize,
    pub class_proportions: Vec<f64>,
    pub patch_layout: PatchLayout,
    /// Minimum inter-class mean distance, in units of `feature_noise`.
    pub feature_separation: f64,
    pub feature_noise: f64,
    pub d: usize,
    pub seed: u64,
    /// Side length of the square survey area in metres.
    #[serde(default = "default_extent")]
    pub extent: f64,
}

fn default_extent() -> f64 {
    1000.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_points: 20_000,
            class_proportions: vec![0.4, 0.25, 0.2, 0.1, 0.05],
            patch_layout: PatchLayout::Grid,
            feature_separation: 8.0,
            feature_noise: 1.0,
            d: 16,
            seed: 0,
            extent: default_extent(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OcfError::InvalidParameter(m.into()));
        if self.n_classes == 0 || self.d == 0 {
            return bad("n_classes and d must be positive");
        }
        if self.class_proportions.len() != self.n_classes {
            return bad("class_proportions must have n_classes entries");
        }
        if self.class_proportions.iter().any(|&p| !(p > 0.0)) {
            return bad("class proportions must be positive");
        }
        let s: f64 = self.class_proportions.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return bad("class proportions must sum to 1");
        }
        if self.n_points < self.n_classes * (self.d + 1) {
            return bad("n_points must be at least n_classes * (d + 1)");
        }
        if !(self.feature_separation > 0.0) || !(self.feature_noise > 0.0) || !(self.extent > 0.0) {
            return bad("feature_separation, feature_noise and extent must be positive");
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `total` units, at least one per class.
fn allocate(props: &[f64], total: usize) -> Vec<usize> {
    let total = total.max(props.len());
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut alloc: Vec<usize> = raw.iter().map(|r| (r.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut i = 0;
    while alloc.iter().sum::<usize>() < total {
        alloc[order[i % order.len()]] += 1;
        i += 1;
    }
    while alloc.iter().sum::<usize>() > total {
        let j = (0..alloc.len()).max_by_key(|&j| (alloc[j], std::cmp::Reverse(j))).unwrap();
        alloc[j] -= 1;
    }
    alloc
}

fn shuffled_owners(alloc: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut owners: Vec<usize> = alloc
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    for i in (1..owners.len()).rev() {
        let j = rng.random_range(0..=i);
        owners.swap(i, j);
    }
    owners
}

fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Class means on a sphere of radius `separation·noise`, rejecting any draw
/// closer than that to an accepted mean.
pub fn class_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let r = cfg.feature_separation * cfg.feature_noise;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    for _ in 0..cfg.n_classes {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let g = gaussian_vec(cfg.d, rng);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let m: Vec<f64> = g.iter().map(|v| v / norm * r).collect();
            let ok = means.iter().all(|o| {
                o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= r
            });
            if ok {
                means.push(m);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(OcfError::InvalidParameter(format!(
                "could not place {} class means at separation {}; lower the separation or raise d",
                cfg.n_classes, cfg.feature_separation
            )));
        }
    }
    Ok(means)
}

/// Draws a labeled dataset with spatial class patches. Class counts are
/// multinomial in `class_proportions`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Observation>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_means(cfg, &mut rng)?;
    let cum: Vec<f64> = cfg
        .class_proportions
        .iter()
        .scan(0.0, |s, p| {
            *s += p;
            Some(*s)
        })
        .collect();
    let labels: Vec<usize> = (0..cfg.n_points)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
            cum.partition_point(|&c| c <= u).min(cfg.n_classes - 1)
        })
        .collect();

    let placer = PatchPlacer::new(cfg, &mut rng);
    let mut out = Vec::with_capacity(cfg.n_points);
    for (i, &c) in labels.iter().enumerate() {
        let (x, y) = placer.place(c, &mut rng);
        let feature = means[c]
            .iter()
            .zip(gaussian_vec(cfg.d, &mut rng))
            .map(|(m, z)| m + cfg.feature_noise * z)
            .collect();
        out.push(Observation {
            id: format!("p{i}"),
            easting: x,
            northing: y,
            label: Some(c as u32),
            feature,
        });
    }
    Ok(out)
}

enum PatchPlacer {
    Grid {
        side: usize,
        cell: f64,
        cells_of: Vec<Vec<usize>>,
    },
    Voronoi {
        extent: f64,
        sites: Vec<(f64, f64)>,
        owner: Vec<usize>,
    },
}

const GRID_SIDE: usize = 10;
const VORONOI_SITES_PER_CLASS: usize = 6;

impl PatchPlacer {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        match cfg.patch_layout {
            PatchLayout::Grid => {
                let side = GRID_SIDE.max((cfg.n_classes as f64).sqrt().ceil() as usize);
                let alloc = allocate(&cfg.class_proportions, side * side);
                let owners = shuffled_owners(&alloc, rng);
                let mut cells_of = vec![Vec::new(); cfg.n_classes];
                for (cell, &c) in owners.iter().enumerate() {
                    cells_of[c].push(cell);
                }
                PatchPlacer::Grid {
                    side,
                    cell: cfg.extent / side as f64,
                    cells_of,
                }
            }
            PatchLayout::Voronoi => {
                let alloc = allocate(&cfg.class_proportions, VORONOI_SITES_PER_CLASS * cfg.n_classes);
                let owner = shuffled_owners(&alloc, rng);
                let sites = (0..owner.len())
                    .map(|_| (rng.random_range(0.0..cfg.extent), rng.random_range(0.0..cfg.extent)))
                    .collect();
                PatchPlacer::Voronoi {
                    extent: cfg.extent,
                    sites,
                    owner,
                }
            }
        }
    }

    fn place(&self, class: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
        match self {
            PatchPlacer::Grid { side, cell, cells_of } => {
                let cells = &cells_of[class];
                let c = cells[rng.random_range(0..cells.len())];
                let (cx, cy) = ((c % side) as f64, (c / side) as f64);
                ((cx + rng.random::<f64>()) * cell, (cy + rng.random::<f64>()) * cell)
            }
            PatchPlacer::Voronoi { extent, sites, owner } => {
                let nearest = |x: f64, y: f64| {
                    sites
                        .iter()
                        .enumerate()
                        .map(|(i, s)| ((s.0 - x).powi(2) + (s.1 - y).powi(2), i))
                        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)))
                        .map(|(_, i)| i)
                        .unwrap()
                };
                for _ in 0..10_000 {
                    let (x, y) = (rng.random_range(0.0..*extent), rng.random_range(0.0..*extent));
                    if owner[nearest(x, y)] == class {
                        return (x, y);
                    }
                }
                // Region too small to hit by rejection: jitter around one of its sites.
                let own: Vec<usize> = (0..owner.len()).filter(|&i| owner[i] == class).collect();
                let s = sites[own[rng.random_range(0..own.len())]];
                (s.0, s.1)
            }
        }
    }
}

/// Turns part of `class` into a separate sub-mode class `new_label`, shifted
/// by `shift·noise` along a random direction. Only observations at stream
/// position ≥ `reveal_at` are converted, so the sub-mode first appears there.
pub fn plant_submode(
    stream: &mut [Observation],
    class: u32,
    new_label: u32,
    fraction: f64,
    shift: f64,
    reveal_at: usize,
    seed: u64,
) {
    let Some(d) = stream.first().map(|o| o.feature.len()) else {
        return;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gaussian_vec(d, &mut rng);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let dir: Vec<f64> = g.iter().map(|v| v / norm * shift).collect();
    for o in stream.iter_mut().skip(reveal_at) {
        if o.label == Some(class) && rng.random::<f64>() < fraction {
            o.label = Some(new_label);
            for (f, s) in o.feature.iter_mut().zip(&dir) {
                *f += s;
            }
        }
    }
}
