//! Typed-graph observation of a world snapshot.
//!
//! Every vehicle becomes a vertex with features `[s, v, ã, k]`. Two relation
//! kinds connect vehicles whose motion must be coordinated:
//!
//! * same lane: one edge from a leader to the vehicle directly behind it on
//!   a shared stretch of road;
//! * crossing: a pair of opposite edges between vehicles on different routes
//!   that have not yet passed their common conflict point.
//!
//! Relations are further split by the fuel types of the two endpoints, which
//! gives eight relation types in total.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::world::{first_contact, Fuel, RouteGeometry, RouteId, VehicleState, World};

/// Lower bound on the edge distance measure (m).
pub const MIN_EDGE_DISTANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    SameLane,
    Crossing,
}

/// Fuel types of (source, destination).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FuelPair {
    PP,
    PE,
    EP,
    EE,
}

impl FuelPair {
    pub fn new(src: Fuel, dst: Fuel) -> Self {
        match (src, dst) {
            (Fuel::Petrol, Fuel::Petrol) => FuelPair::PP,
            (Fuel::Petrol, Fuel::Electric) => FuelPair::PE,
            (Fuel::Electric, Fuel::Petrol) => FuelPair::EP,
            (Fuel::Electric, Fuel::Electric) => FuelPair::EE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FuelPair::PP => "pp",
            FuelPair::PE => "pe",
            FuelPair::EP => "ep",
            FuelPair::EE => "ee",
        }
    }

    pub fn src_flag(self) -> u8 {
        matches!(self, FuelPair::EP | FuelPair::EE) as u8
    }

    pub fn dst_flag(self) -> u8 {
        matches!(self, FuelPair::PE | FuelPair::EE) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeRelation {
    pub rel: Relation,
    pub fuel_pair: FuelPair,
}

impl EdgeRelation {
    pub const COUNT: usize = 8;

    /// Dense index in `0..8`.
    pub fn index(self) -> usize {
        self.rel as usize * 4 + self.fuel_pair as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        let rel = match index / 4 {
            0 => Relation::SameLane,
            1 => Relation::Crossing,
            _ => return None,
        };
        let fuel_pair = [FuelPair::PP, FuelPair::PE, FuelPair::EP, FuelPair::EE][index % 4];
        Some(Self { rel, fuel_pair })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexFeature {
    pub s_norm: f64,
    pub v_norm: f64,
    pub a_norm: f64,
    pub k: f64,
}

impl VertexFeature {
    pub fn as_array(&self) -> [f64; 4] {
        [self.s_norm, self.v_norm, self.a_norm, self.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeature {
    pub inv_d: f64,
    /// Bearing of the source as seen from the destination, in `(−π, π]`.
    pub chi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: EdgeRelation,
    pub feature: EdgeFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    /// Vehicle ids in ascending order.
    pub vertex_ids: Vec<u64>,
    pub vertex_feats: Vec<VertexFeature>,
    /// Sorted by `(src, dst, relation)`.
    pub edges: Vec<Edge>,
    pub omega: f64,
}

impl SceneGraph {
    pub fn empty(omega: f64) -> Self {
        Self {
            vertex_ids: Vec::new(),
            vertex_feats: Vec::new(),
            edges: Vec::new(),
            omega,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_ids.len()
    }

    /// Copy with a different ω and everything else unchanged.
    pub fn with_omega(&self, omega: f64) -> Self {
        Self {
            omega,
            ..self.clone()
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        let malformed = |m: String| Err(Error::Graph(m));
        if self.vertex_feats.len() != n {
            return malformed("feature count differs from vertex count".into());
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::OutOfRange { what: "omega", value: self.omega });
        }
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return malformed(format!("edge {}->{} out of range", e.src, e.dst));
            }
            if e.src == e.dst {
                return malformed(format!("self edge on {}", e.src));
            }
            if !(e.feature.inv_d > 0.0 && e.feature.inv_d.is_finite()) {
                return malformed(format!("non-positive inverse distance on {}->{}", e.src, e.dst));
            }
            if !(e.feature.chi > -PI && e.feature.chi <= PI) {
                return malformed(format!("bearing out of range on {}->{}", e.src, e.dst));
            }
        }
        Ok(())
    }

    /// Line-oriented text form: a header `n_vertices n_edges omega`, then
    /// one line per vertex `id s_norm v_norm a_norm k`, then one line per
    /// edge `src dst rel fuel inv_d chi`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.num_vertices(), self.edges.len(), self.omega);
        for (id, f) in self.vertex_ids.iter().zip(&self.vertex_feats) {
            let _ = writeln!(out, "{id} {} {} {} {}", f.s_norm, f.v_norm, f.a_norm, f.k);
        }
        for e in &self.edges {
            let rel = match e.relation.rel {
                Relation::SameLane => "same_lane",
                Relation::Crossing => "crossing",
            };
            let _ = writeln!(
                out,
                "{} {} {rel} {} {} {}",
                e.src,
                e.dst,
                e.relation.fuel_pair.as_str(),
                e.feature.inv_d,
                e.feature.chi
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, m: &str| Error::Csv {
            file: "scene graph".into(),
            line,
            message: m.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(err(1, "header needs 3 fields"));
        }
        let n: usize = h[0].parse().map_err(|_| err(1, "bad vertex count"))?;
        let m: usize = h[1].parse().map_err(|_| err(1, "bad edge count"))?;
        let omega: f64 = h[2].parse().map_err(|_| err(1, "bad omega"))?;
        let mut g = SceneGraph::empty(omega);
        for _ in 0..n {
            let (k, line) = lines.next().ok_or_else(|| err(0, "missing vertex line"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(err(k + 1, "vertex line needs 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(k + 1, "bad number"));
            g.vertex_ids.push(f[0].parse().map_err(|_| err(k + 1, "bad id"))?);
            g.vertex_feats.push(VertexFeature {
                s_norm: num(f[1])?,
                v_norm: num(f[2])?,
                a_norm: num(f[3])?,
                k: num(f[4])?,
            });
        }
        for _ in 0..m {
            let (k, line) = lines.next().ok_or_else(|| err(0, "missing edge line"))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(k + 1, "edge line needs 6 fields"));
            }
            let rel = match f[2] {
                "same_lane" => Relation::SameLane,
                "crossing" => Relation::Crossing,
                _ => return Err(err(k + 1, "unknown relation")),
            };
            let fuel_pair = match f[3] {
                "pp" => FuelPair::PP,
                "pe" => FuelPair::PE,
                "ep" => FuelPair::EP,
                "ee" => FuelPair::EE,
                _ => return Err(err(k + 1, "unknown fuel pair")),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(k + 1, "bad number"));
            g.edges.push(Edge {
                src: f[0].parse().map_err(|_| err(k + 1, "bad src"))?,
                dst: f[1].parse().map_err(|_| err(k + 1, "bad dst"))?,
                relation: EdgeRelation { rel, fuel_pair },
                feature: EdgeFeature {
                    inv_d: num(f[4])?,
                    chi: num(f[5])?,
                },
            });
        }
        g.validate()?;
        Ok(g)
    }
}

/// First intersection of two route polylines, earliest along `route_a`.
pub fn conflict_point(route_a: &RouteGeometry, route_b: &RouteGeometry) -> Option<(f64, f64)> {
    first_contact(route_a, route_b)
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x - TAU * ((x + PI) / TAU).floor();
    if y <= -PI {
        y + TAU
    } else {
        y
    }
}

/// Route geometry plus every pairwise conflict point, computed once.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    routes: Arc<Vec<RouteGeometry>>,
    conflicts: Vec<Option<(f64, f64)>>,
}

impl GraphBuilder {
    pub fn new(routes: Arc<Vec<RouteGeometry>>) -> Self {
        let n = RouteId::COUNT;
        let mut conflicts = vec![None; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    conflicts[a * n + b] = conflict_point(&routes[a], &routes[b]);
                }
            }
        }
        Self { routes, conflicts }
    }

    pub fn for_world(world: &World) -> Self {
        Self::new(Arc::clone(world.routes()))
    }

    /// Cached conflict point; `None` for identical routes.
    pub fn conflict(&self, a: RouteId, b: RouteId) -> Option<(f64, f64)> {
        self.conflicts[a.index() * RouteId::COUNT + b.index()]
    }

    /// Position of `leader` expressed as arc length along `follower_route`,
    /// when the leader currently drives on road shared with that route.
    pub fn projected_position(&self, leader: &VehicleState, follower_route: RouteId) -> Option<f64> {
        let lr = &self.routes[leader.route.index()];
        if leader.route == follower_route {
            return Some(leader.s);
        }
        if leader.route.approach == follower_route.approach && leader.s <= lr.box_entry {
            return Some(leader.s);
        }
        if leader.route.exit_leg() == follower_route.exit_leg() && leader.s >= lr.box_exit {
            let fr = &self.routes[follower_route.index()];
            return Some(fr.length - (lr.length - leader.s));
        }
        None
    }

    pub fn build(&self, world: &World, omega: f64) -> Result<SceneGraph> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::OutOfRange { what: "omega", value: omega });
        }
        let cfg = world.config();
        let vehicles = world.vehicles();
        let n = vehicles.len();
        let mut g = SceneGraph::empty(omega);
        g.vertex_ids = vehicles.iter().map(|v| v.id).collect();
        g.vertex_feats = vehicles
            .iter()
            .map(|v| VertexFeature {
                s_norm: v.s / self.routes[v.route.index()].length,
                v_norm: v.v / cfg.v_lim,
                a_norm: if v.a_meas >= 0.0 {
                    v.a_meas / cfg.a_max
                } else {
                    v.a_meas / cfg.a_min.abs()
                },
                k: f64::from(v.fuel.flag()),
            })
            .collect();
        let poses: Vec<_> = vehicles.iter().map(|v| world.pose(v)).collect();

        let push = |g: &mut SceneGraph, src: usize, dst: usize, rel: Relation, d: f64| {
            let (p_src, _) = poses[src];
            let (p_dst, h_dst) = poses[dst];
            g.edges.push(Edge {
                src,
                dst,
                relation: EdgeRelation {
                    rel,
                    fuel_pair: FuelPair::new(vehicles[src].fuel, vehicles[dst].fuel),
                },
                feature: EdgeFeature {
                    inv_d: 1.0 / d.max(MIN_EDGE_DISTANCE),
                    chi: bearing(p_src, p_dst, h_dst),
                },
            });
        };

        // nearest leader per follower
        for (j, follower) in vehicles.iter().enumerate() {
            let mut best: Option<(f64, usize)> = None;
            for (i, leader) in vehicles.iter().enumerate() {
                if i == j {
                    continue;
                }
                if let Some(p) = self.projected_position(leader, follower.route) {
                    if p > follower.s && best.is_none_or(|(bp, _)| p < bp) {
                        best = Some((p, i));
                    }
                }
            }
            if let Some((p, i)) = best {
                push(&mut g, i, j, Relation::SameLane, p - follower.s);
            }
        }

        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&vehicles[i], &vehicles[j]);
                if a.route == b.route {
                    continue;
                }
                if let Some((ca, cb)) = self.conflict(a.route, b.route) {
                    if a.s < ca && b.s < cb {
                        let d = 0.5 * ((ca - a.s) + (cb - b.s));
                        push(&mut g, i, j, Relation::Crossing, d);
                        push(&mut g, j, i, Relation::Crossing, d);
                    }
                }
            }
        }
        g.edges.sort_by_key(|e| (e.src, e.dst, e.relation));
        Ok(g)
    }

    /// Distance measure for an edge between vehicles `i` and `j` (ids), in
    /// the relation the graph builder would assign. `None` when no edge
    /// links them.
    pub fn edge_distance(&self, world: &World, i: u64, j: u64) -> Result<Option<f64>> {
        let vi = world.vehicle(i).ok_or(Error::UnknownVehicle(i))?;
        let vj = world.vehicle(j).ok_or(Error::UnknownVehicle(j))?;
        if vi.route != vj.route {
            if let Some((ci, cj)) = self.conflict(vi.route, vj.route) {
                if vi.s < ci && vj.s < cj {
                    return Ok(Some(crossing_distance(ci - vi.s, cj - vj.s)));
                }
            }
        }
        for (leader, follower) in [(vi, vj), (vj, vi)] {
            if let Some(p) = self.projected_position(leader, follower.route) {
                if p > follower.s {
                    return Ok(Some((p - follower.s).max(MIN_EDGE_DISTANCE)));
                }
            }
        }
        Ok(None)
    }
}

/// Mean remaining distance to a shared conflict point, floored.
pub fn crossing_distance(remaining_i: f64, remaining_j: f64) -> f64 {
    (0.5 * (remaining_i + remaining_j)).max(MIN_EDGE_DISTANCE)
}

fn bearing(p_i: crate::world::Point2, p_j: crate::world::Point2, heading_j: f64) -> f64 {
    wrap_angle((p_i.y - p_j.y).atan2(p_i.x - p_j.x) - heading_j)
}

/// Direction of vehicle `i` as seen in the heading frame of vehicle `j`.
pub fn bearing_angle(world: &World, i: u64, j: u64) -> Result<f64> {
    let vi = world.vehicle(i).ok_or(Error::UnknownVehicle(i))?;
    let vj = world.vehicle(j).ok_or(Error::UnknownVehicle(j))?;
    let (pi, _) = world.pose(vi);
    let (pj, hj) = world.pose(vj);
    Ok(bearing(pi, pj, hj))
}

/// Convenience wrapper that builds a fresh conflict table.
pub fn build_graph(world: &World, omega: f64) -> Result<SceneGraph> {
    GraphBuilder::for_world(world).build(world, omega)
}
