//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use aim_morl::neural::{GraphNet, Head, Upstream};
use aim_morl::reward::EmissionModel;
use aim_morl::scene_graph::{Edge, EdgeFeature, EdgeRelation, FuelPair, Relation, SceneGraph, VertexFeature};
use aim_morl::world::{Fuel, Point2, RouteGeometry, RouteId, World, WorldConfig};
use rand::Rng;

const TOL: f64 = 1e-9;

fn cross(a: Point2, b: Point2) -> f64 {
    a.x * b.y - a.y * b.x
}

fn sub(a: Point2, b: Point2) -> Point2 {
    Point2::new(a.x - b.x, a.y - b.y)
}

fn dot(a: Point2, b: Point2) -> f64 {
    a.x * b.x + a.y * b.y
}

/// Every touching parameter pair `(t, u)` of two segments, including both
/// ends of a collinear overlap.
fn segment_hits(p0: Point2, p1: Point2, q0: Point2, q1: Point2) -> Vec<(f64, f64)> {
    let r = sub(p1, p0);
    let s = sub(q1, q0);
    let qp = sub(q0, p0);
    let denom = cross(r, s);
    let scale = dot(r, r).sqrt() * dot(s, s).sqrt();
    if denom.abs() > 1e-12 * scale {
        let t = cross(qp, s) / denom;
        let u = cross(qp, r) / denom;
        if (-TOL..=1.0 + TOL).contains(&t) && (-TOL..=1.0 + TOL).contains(&u) {
            return vec![(t.clamp(0.0, 1.0), u.clamp(0.0, 1.0))];
        }
        return Vec::new();
    }
    if cross(qp, r).abs() > TOL * dot(r, r).sqrt() {
        return Vec::new();
    }
    let rr = dot(r, r);
    let t0 = dot(qp, r) / rr;
    let t1 = dot(sub(q1, p0), r) / rr;
    let lo = t0.min(t1).max(0.0);
    let hi = t0.max(t1).min(1.0);
    if lo > hi + TOL {
        return Vec::new();
    }
    let ss = dot(s, s);
    [lo, hi.max(lo)]
        .iter()
        .map(|&t| {
            let p = Point2::new(p0.x + r.x * t, p0.y + r.y * t);
            (t, (dot(sub(p, q0), s) / ss).clamp(0.0, 1.0))
        })
        .collect()
}

fn arc_lengths(route: &RouteGeometry) -> Vec<f64> {
    let mut out = vec![0.0];
    for w in route.polyline.windows(2) {
        let d = sub(w[1], w[0]);
        out.push(out.last().unwrap() + dot(d, d).sqrt());
    }
    out
}

/// Brute-force first intersection of two polylines, earliest along `a`.
pub fn oracle_conflict(a: &RouteGeometry, b: &RouteGeometry) -> Option<(f64, f64)> {
    let ca = arc_lengths(a);
    let cb = arc_lengths(b);
    let mut best: Option<(f64, f64)> = None;
    for i in 0..a.polyline.len() - 1 {
        for j in 0..b.polyline.len() - 1 {
            for (t, u) in segment_hits(a.polyline[i], a.polyline[i + 1], b.polyline[j], b.polyline[j + 1]) {
                let sa = ca[i] + t * (ca[i + 1] - ca[i]);
                let sb = cb[j] + u * (cb[j + 1] - cb[j]);
                if best.is_none_or(|(x, y)| sa < x || (sa == x && sb < y)) {
                    best = Some((sa, sb));
                }
            }
        }
    }
    best
}

/// Arc length along `route` of a point lying on it, if any.
fn project_onto(route: &RouteGeometry, p: Point2) -> Option<f64> {
    let cum = arc_lengths(route);
    let mut best: Option<f64> = None;
    for k in 0..route.polyline.len() - 1 {
        let a = route.polyline[k];
        let d = sub(route.polyline[k + 1], a);
        let t = (dot(sub(p, a), d) / dot(d, d)).clamp(0.0, 1.0);
        let q = Point2::new(a.x + d.x * t, a.y + d.y * t);
        if q.dist(p) < 1e-6 {
            let s = cum[k] + t * (cum[k + 1] - cum[k]);
            if best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        }
    }
    best
}

/// Comparable form of an edge: `(src id, dst id, relation, fuel pair)`.
pub type EdgeKey = (u64, u64, Relation, FuelPair);

/// Re-derives the edge set of a snapshot from geometry alone: a same-lane
/// edge joins a follower to the nearest vehicle ahead whose position lies on
/// the follower's own route; a crossing pair joins vehicles on different
/// routes that are both short of their first shared point.
pub fn oracle_edges(world: &World) -> BTreeSet<EdgeKey> {
    let vs = world.vehicles();
    let mut out = BTreeSet::new();
    for f in vs {
        let fr = world.route(f.route);
        let mut best: Option<(f64, &aim_morl::world::VehicleState)> = None;
        for l in vs {
            if l.id == f.id {
                continue;
            }
            let (p, _) = world.pose(l);
            if let Some(s) = project_onto(fr, p) {
                if s > f.s && best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, l));
                }
            }
        }
        if let Some((_, l)) = best {
            out.insert((l.id, f.id, Relation::SameLane, FuelPair::new(l.fuel, f.fuel)));
        }
    }
    for a in vs {
        for b in vs {
            if a.id == b.id || a.route == b.route {
                continue;
            }
            if let Some((ca, cb)) = oracle_conflict(world.route(a.route), world.route(b.route)) {
                if a.s < ca && b.s < cb {
                    out.insert((a.id, b.id, Relation::Crossing, FuelPair::new(a.fuel, b.fuel)));
                }
            }
        }
    }
    out
}

pub fn graph_edges(g: &SceneGraph) -> BTreeSet<EdgeKey> {
    g.edges
        .iter()
        .map(|e| (g.vertex_ids[e.src], g.vertex_ids[e.dst], e.relation.rel, e.relation.fuel_pair))
        .collect()
}

/// World populated with `n` vehicles at uniformly random positions.
pub fn random_snapshot<R: Rng>(n: usize, rng: &mut R) -> World {
    let mut world = World::new(WorldConfig::default(), EmissionModel::default()).unwrap();
    for _ in 0..n {
        let route = RouteId::from_index(rng.random_range(0..RouteId::COUNT)).unwrap();
        let len = world.route(route).length;
        let fuel = if rng.random_bool(0.5) { Fuel::Electric } else { Fuel::Petrol };
        world
            .insert_vehicle(route, rng.random_range(0.0..len), rng.random_range(0.0..15.0), fuel)
            .unwrap();
    }
    world
}

/// Random graph with `n` vertices and arbitrary typed edges, including
/// several same-relation edges into one vertex.
pub fn random_graph<R: Rng>(n: usize, rng: &mut R) -> SceneGraph {
    let mut g = SceneGraph::empty(rng.random_range(0.0..=1.0));
    for i in 0..n {
        g.vertex_ids.push(i as u64);
        g.vertex_feats.push(VertexFeature {
            s_norm: rng.random_range(0.0..1.0),
            v_norm: rng.random_range(0.0..1.1),
            a_norm: rng.random_range(-1.0..1.0),
            k: f64::from(rng.random_range(0..2u8)),
        });
    }
    for src in 0..n {
        for dst in 0..n {
            if src != dst && rng.random_bool(0.5) {
                g.edges.push(Edge {
                    src,
                    dst,
                    relation: EdgeRelation::from_index(rng.random_range(0..EdgeRelation::COUNT)).unwrap(),
                    feature: EdgeFeature {
                        inv_d: rng.random_range(0.01..2.0),
                        chi: rng.random_range(-PI..PI),
                    },
                });
            }
        }
    }
    g
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose ±eps probes changed some ReLU's on/off state, where
    /// the central difference does not estimate the derivative.
    pub kinked: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel);
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.kinked += other.kinked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Scalar objective (`Σ c_i·a_i` for the actor, `Q` for the critic) and the
/// ReLU pattern of the pass.
fn objective(net: &GraphNet, g: &SceneGraph, actions: &[f64], weights: &[f64]) -> (f64, Vec<bool>) {
    match net.head {
        Head::Actor => {
            let (a, trace) = net.forward(g, None).unwrap();
            (a.iter().zip(weights).map(|(a, c)| a * c).sum(), trace.relu_pattern())
        }
        Head::Critic => {
            let (q, trace) = net.forward(g, Some(actions)).unwrap();
            (q[0], trace.relu_pattern())
        }
    }
}

/// Central finite differences with step `eps` on up to `per_tensor` random
/// coordinates of every parameter tensor, plus the critic's action inputs.
/// Probes that cross a ReLU kink are counted in `kinked` instead of compared.
pub fn check_gradients<R: Rng>(net: &mut GraphNet, g: &SceneGraph, eps: f64, floor: f64, per_tensor: usize, rng: &mut R) -> GradCheck {
    let n = g.num_vertices();
    let actions: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.params.zero_grad();
    let (base, input_grads) = match net.head {
        Head::Actor => {
            let (_, trace) = net.forward(g, None).unwrap();
            let base = trace.relu_pattern();
            (base, net.backward(trace, Upstream::Actions(&weights), true).unwrap())
        }
        Head::Critic => {
            let (_, trace) = net.forward(g, Some(&actions)).unwrap();
            let base = trace.relu_pattern();
            (base, net.backward(trace, Upstream::Value(1.0), true).unwrap())
        }
    };
    let mut report = GradCheck::default();
    let mut compare = |analytic: f64, (up, pu): (f64, Vec<bool>), (down, pd): (f64, Vec<bool>)| {
        if pu == base && pd == base {
            report.record(analytic, (up - down) / (2.0 * eps), floor);
        } else {
            report.kinked += 1;
        }
    };
    for slot in 0..net.params.len() {
        let len = net.params.tensor(slot).len();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for k in coords {
            let analytic = net.params.tensor(slot).grad[k];
            let orig = net.params.tensor(slot).values[k];
            net.params.tensor_mut(slot).values[k] = orig + eps;
            let up = objective(net, g, &actions, &weights);
            net.params.tensor_mut(slot).values[k] = orig - eps;
            let down = objective(net, g, &actions, &weights);
            net.params.tensor_mut(slot).values[k] = orig;
            compare(analytic, up, down);
        }
    }
    if net.head == Head::Critic {
        let analytic = input_grads.actions();
        for i in 0..n {
            let mut a = actions.clone();
            a[i] += eps;
            let up = objective(net, g, &a, &weights);
            a[i] -= 2.0 * eps;
            let down = objective(net, g, &a, &weights);
            compare(analytic[i], up, down);
        }
    }
    report
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// O(n²) dominance filter over maximization objectives.
pub fn oracle_front(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().any(|q| {
                q.iter().zip(&points[i]).all(|(a, b)| a >= b) && q.iter().zip(&points[i]).any(|(a, b)| a > b)
            })
        })
        .collect()
}

/// Monte-Carlo estimate of the area dominated by `front` above `reference`.
pub fn monte_carlo_hypervolume<R: Rng>(front: &[[f64; 2]], reference: [f64; 2], samples: usize, rng: &mut R) -> f64 {
    let hi_x = front.iter().map(|p| p[0]).fold(reference[0], f64::max);
    let hi_y = front.iter().map(|p| p[1]).fold(reference[1], f64::max);
    let area = (hi_x - reference[0]) * (hi_y - reference[1]);
    if area == 0.0 {
        return 0.0;
    }
    let hits = (0..samples)
        .filter(|_| {
            let x = rng.random_range(reference[0]..hi_x);
            let y = rng.random_range(reference[1]..hi_y);
            front.iter().any(|p| p[0] >= x && p[1] >= y)
        })
        .count();
    area * hits as f64 / samples as f64
}
