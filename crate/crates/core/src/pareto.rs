//! Multi-objective analytics over evaluated policies: dominance filtering,
//! 2-D hypervolume, k-means grouping of the front, the fairness gap and the
//! constrained fairest-policy rule.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::Fuel;

/// Number of quantiles stored per distribution (min, q1, median, q3, max).
pub const QUANTILES: usize = 5;

/// One evaluated policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub omega: f64,
    /// Mean speed over vehicle-steps (m/s, maximized).
    pub obj_speed: f64,
    /// Mean emission rate per petrol vehicle-step (g/s, minimized).
    pub obj_emission: f64,
    /// Mean petrol minus mean electric travel time (s); absent when a fleet
    /// completed no trip.
    pub delta_f: Option<f64>,
    pub crashes: u64,
    /// Quantiles of the per-step mean speed.
    pub speed_quantiles: [f64; QUANTILES],
    /// Quantiles of the per-step mean petrol emission rate.
    pub emission_quantiles: [f64; QUANTILES],
}

impl ParetoPoint {
    /// Objectives in maximization form: `(speed, −emission)`.
    pub fn objectives(&self) -> [f64; 2] {
        [self.obj_speed, -self.obj_emission]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClusterLabel {
    EmissionSaving,
    Balanced,
    PerformanceBased,
}

impl fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterLabel::EmissionSaving => "emission_saving",
            ClusterLabel::Balanced => "balanced",
            ClusterLabel::PerformanceBased => "performance_based",
        })
    }
}

fn oriented(p: &[f64], dirs: &[Direction]) -> Vec<f64> {
    p.iter()
        .zip(dirs)
        .map(|(&x, d)| match d {
            Direction::Maximize => x,
            Direction::Minimize => -x,
        })
        .collect()
}

/// `a` dominates `b` (both already in maximization form).
fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        strict |= x > y;
    }
    strict
}

/// Indices of the non-dominated points, in input order.
///
/// Sort-filter-skyline: after a lexicographic descending sort a point can only
/// be dominated by one that precedes it, so each candidate is compared against
/// the current window of survivors only. Exact duplicates never dominate one
/// another and are all kept.
pub fn pareto_filter(points: &[Vec<f64>], directions: &[Direction]) -> Result<Vec<usize>> {
    let d = directions.len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::ShapeMismatch {
            name: "objective vector".into(),
            expected: vec![d],
            got: vec![p.len()],
        });
    }
    let norm: Vec<Vec<f64>> = points.iter().map(|p| oriented(p, directions)).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        norm[j]
            .iter()
            .zip(&norm[i])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    let mut window: Vec<usize> = Vec::new();
    for i in order {
        if !window.iter().any(|&w| dominates(&norm[w], &norm[i])) {
            window.push(i);
        }
    }
    window.sort_unstable();
    Ok(window)
}

/// Area dominated by `front` relative to `reference`, both in maximization
/// form. Points that do not strictly dominate the reference are ignored.
pub fn hypervolume_2d(front: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = front
        .iter()
        .copied()
        .filter(|p| p[0] > reference[0] && p[1] > reference[1])
        .collect();
    pts.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let mut area = 0.0;
    let mut top = reference[1];
    for [x, y] in pts {
        if y > top {
            area += (x - reference[0]) * (y - top);
            top = y;
        }
    }
    area
}

/// Hypervolume reference for a set of points: zero speed and 1.1 times the
/// worst observed emission, in maximization form.
pub fn reference_point(points: &[ParetoPoint]) -> [f64; 2] {
    let worst = points.iter().map(|p| p.obj_emission).fold(0.0, f64::max);
    [0.0, -1.1 * worst]
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once<R: Rng>(data: &[Vec<f64>], k: usize, rng: &mut R) -> KMeans {
    let n = data.len();
    let mut centroids: Vec<Vec<f64>> = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data[pick].clone());
        for (d, p) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(data) {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .expect("k >= 1");
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = data[0].len();
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = data.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..dim {
                centroid[j] = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = data.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    KMeans {
        labels,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia restart wins.
pub fn kmeans<R: Rng>(data: &[Vec<f64>], k: usize, restarts: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 || data.len() < k {
        return Err(Error::TooFewPoints { need: k.max(1), got: data.len() });
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(data, k, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Rescales every column to `[0, 1]`; constant columns map to zero.
pub fn min_max_normalize(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = data.first() else {
        return Vec::new();
    };
    let dim = first.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in data {
        for j in 0..dim {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    data.iter()
        .map(|p| {
            (0..dim)
                .map(|j| if hi[j] > lo[j] { (p[j] - lo[j]) / (hi[j] - lo[j]) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Groups front points into three labelled clusters. `omegas[i]` belongs to
/// the point at `objectives[i]`.
pub fn cluster_front<R: Rng>(objectives: &[Vec<f64>], omegas: &[f64], rng: &mut R) -> Result<Vec<ClusterLabel>> {
    let km = kmeans(&min_max_normalize(objectives), 3, 10, rng)?;
    let argext = |better: fn(f64, f64) -> bool| {
        (0..omegas.len())
            .reduce(|a, b| if better(omegas[b], omegas[a]) { b } else { a })
            .expect("non-empty")
    };
    let low = km.labels[argext(|x, y| x < y)];
    let high = km.labels[argext(|x, y| x > y)];
    let mut order: [usize; 3] = [0, 1, 2];
    if low != high {
        let mid = 3 - low - high;
        order = [low, mid, high];
    } else {
        let mean = |c: usize| {
            let (s, n) = km
                .labels
                .iter()
                .zip(omegas)
                .filter(|(&l, _)| l == c)
                .fold((0.0, 0usize), |(s, n), (_, &w)| (s + w, n + 1));
            s / n.max(1) as f64
        };
        order.sort_by(|&a, &b| mean(a).total_cmp(&mean(b)));
    }
    Ok(km
        .labels
        .iter()
        .map(|&l| {
            if l == order[0] {
                ClusterLabel::EmissionSaving
            } else if l == order[2] {
                ClusterLabel::PerformanceBased
            } else {
                ClusterLabel::Balanced
            }
        })
        .collect())
}

/// Mean petrol travel time minus mean electric travel time.
pub fn fairness_delta(trips: &[(Fuel, f64)]) -> Option<f64> {
    let mean = |fuel: Fuel| {
        let (s, n) = trips
            .iter()
            .filter(|(f, _)| *f == fuel)
            .fold((0.0, 0usize), |(s, n), (_, t)| (s + t, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    Some(mean(Fuel::Petrol)? - mean(Fuel::Electric)?)
}

/// Index of the fairest feasible point among `candidates` (indices into
/// `points`): minimum `|Δ_F|`, then larger ω, then earlier index.
pub fn select_policy(points: &[ParetoPoint], candidates: &[usize], emission_cap: f64, speed_floor: f64) -> Option<usize> {
    candidates
        .iter()
        .copied()
        .filter(|&i| {
            let p = &points[i];
            p.obj_emission <= emission_cap && p.obj_speed >= speed_floor && p.delta_f.is_some()
        })
        .min_by(|&a, &b| {
            let (pa, pb) = (&points[a], &points[b]);
            let (da, db) = (pa.delta_f.unwrap_or(f64::INFINITY).abs(), pb.delta_f.unwrap_or(f64::INFINITY).abs());
            da.total_cmp(&db).then(pb.omega.total_cmp(&pa.omega)).then(a.cmp(&b))
        })
}

/// Summary of one set of evaluated policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontReport {
    pub points: Vec<ParetoPoint>,
    /// Indices into `points` of the non-dominated subset.
    pub front: Vec<usize>,
    pub reference: [f64; 2],
    pub hypervolume: f64,
    /// `(point index, label)` for every front member; empty when the front
    /// has fewer than three points.
    pub clusters: Vec<(usize, ClusterLabel)>,
    /// Serialized as `null` when unbounded.
    #[serde(with = "unbounded")]
    pub emission_cap: f64,
    pub speed_floor: f64,
    pub selected: Option<usize>,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        x.is_finite().then_some(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl FrontReport {
    pub fn build<R: Rng>(points: Vec<ParetoPoint>, emission_cap: f64, speed_floor: f64, rng: &mut R) -> Result<Self> {
        let objectives: Vec<Vec<f64>> = points.iter().map(|p| p.objectives().to_vec()).collect();
        let front = pareto_filter(&objectives, &[Direction::Maximize, Direction::Maximize])?;
        let reference = reference_point(&points);
        let front_objs: Vec<[f64; 2]> = front.iter().map(|&i| points[i].objectives()).collect();
        let hypervolume = hypervolume_2d(&front_objs, reference);
        let clusters = if front.len() >= 3 {
            let objs: Vec<Vec<f64>> = front.iter().map(|&i| objectives[i].clone()).collect();
            let omegas: Vec<f64> = front.iter().map(|&i| points[i].omega).collect();
            front.iter().copied().zip(cluster_front(&objs, &omegas, rng)?).collect()
        } else {
            Vec::new()
        };
        let selected = select_policy(&points, &front, emission_cap, speed_floor);
        Ok(Self {
            points,
            front,
            reference,
            hypervolume,
            clusters,
            emission_cap,
            speed_floor,
            selected,
        })
    }

    pub fn selected_point(&self) -> Option<&ParetoPoint> {
        self.selected.map(|i| &self.points[i])
    }

    pub fn label_of(&self, index: usize) -> Option<ClusterLabel> {
        self.clusters.iter().find(|(i, _)| *i == index).map(|(_, l)| *l)
    }
}

/// Hypervolume of a set of evaluated policies.
pub fn points_hypervolume(points: &[ParetoPoint]) -> f64 {
    let objs: Vec<[f64; 2]> = points.iter().map(ParetoPoint::objectives).collect();
    hypervolume_2d(&objs, reference_point(points))
}

/// Linear-interpolation quantiles at 0, ¼, ½, ¾ and 1; all zero for no data.
pub fn quantiles(values: &[f64]) -> [f64; QUANTILES] {
    let mut out = [0.0; QUANTILES];
    if values.is_empty() {
        return out;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = (sorted.len() - 1) as f64;
    for (k, q) in out.iter_mut().enumerate() {
        let pos = last * k as f64 / (QUANTILES - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        *q = sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
    }
    out
}
