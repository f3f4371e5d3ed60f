//! Discrete-time simulator of a four-way one-lane unsignalized intersection.
//!
//! Vehicles follow fixed routes and are controlled only through their
//! longitudinal acceleration. Arrivals form a single Bernoulli stream with a
//! uniformly chosen route and a random fuel type.

pub mod geometry;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{emission_rate, EmissionModel};

pub use geometry::{
    build_network, first_contact, polyline_contacts, Approach, Intent, IntersectionLayout, Point2,
    RouteGeometry, RouteId,
};

/// Length of the approach stretch that must be free for a spawn (m).
pub const SPAWN_CLEARANCE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fuel {
    Petrol,
    Electric,
}

impl Fuel {
    /// Binary type flag: 0 for petrol, 1 for electric.
    pub fn flag(self) -> u8 {
        match self {
            Fuel::Petrol => 0,
            Fuel::Electric => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Fuel::Petrol => "petrol",
            Fuel::Electric => "electric",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: u64,
    pub route: RouteId,
    /// Arc length travelled along the route (m).
    pub s: f64,
    pub v: f64,
    /// Acceleration applied during the previous step.
    pub a_meas: f64,
    pub fuel: Fuel,
    pub spawn_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub dt: f64,
    /// Total arrivals per hour over all approaches.
    pub flow_rate: f64,
    pub v_lim: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub electric_fraction: f64,
    pub collision_radius: f64,
    pub standstill_eps: f64,
    pub max_vehicles: usize,
    pub horizon: u64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            flow_rate: 1200.0,
            v_lim: 13.89,
            a_min: -4.5,
            a_max: 3.0,
            electric_fraction: 0.5,
            collision_radius: 2.0,
            standstill_eps: 0.05,
            max_vehicles: 64,
            horizon: 600,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: format!("world.{key}"),
                reason: reason.to_string(),
            })
        };
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", "must be positive");
        }
        if !(self.flow_rate >= 0.0 && self.flow_rate.is_finite()) {
            return bad("flow_rate", "must be non-negative");
        }
        if self.flow_rate * self.dt / 3600.0 > 1.0 {
            return bad("flow_rate", "implies more than one arrival per step");
        }
        if !(self.v_lim > 0.0 && self.v_lim.is_finite()) {
            return bad("v_lim", "must be positive");
        }
        if !(self.a_min < 0.0 && self.a_min.is_finite()) {
            return bad("a_min", "must be negative");
        }
        if !(self.a_max > 0.0 && self.a_max.is_finite()) {
            return bad("a_max", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.electric_fraction) {
            return bad("electric_fraction", "must lie in [0, 1]");
        }
        if !(self.collision_radius > 0.0 && self.collision_radius.is_finite()) {
            return bad("collision_radius", "must be positive");
        }
        if !(self.standstill_eps >= 0.0 && self.standstill_eps.is_finite()) {
            return bad("standstill_eps", "must be non-negative");
        }
        if self.max_vehicles == 0 {
            return bad("max_vehicles", "must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        Ok(())
    }

    /// Per-step arrival probability.
    pub fn spawn_probability(&self) -> f64 {
        self.flow_rate * self.dt / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub id: u64,
    pub travel_time: f64,
    pub fuel: Fuel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    pub collided: bool,
    pub collided_pairs: Vec<(u64, u64)>,
    pub exited: Vec<ExitRecord>,
    pub all_standstill: bool,
    /// CO₂ emitted by petrol vehicles during the step (g).
    pub emissions_g: f64,
}

/// Running totals used for the conservation check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub spawned: u64,
    pub exited: u64,
    pub removed_by_collision: u64,
}

/// A single simulated intersection.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    routes: Arc<Vec<RouteGeometry>>,
    emission: EmissionModel,
    /// Always sorted by ascending id.
    vehicles: Vec<VehicleState>,
    next_id: u64,
    step_count: u64,
    rng: ChaCha8Rng,
    counters: Counters,
    collided_last: Vec<VehicleState>,
}

impl World {
    pub fn new(cfg: WorldConfig, emission: EmissionModel) -> Result<Self> {
        let routes = Arc::new(build_network(&IntersectionLayout::default()));
        Self::with_routes(cfg, emission, routes)
    }

    pub fn with_routes(cfg: WorldConfig, emission: EmissionModel, routes: Arc<Vec<RouteGeometry>>) -> Result<Self> {
        cfg.validate()?;
        emission.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            routes,
            emission,
            vehicles: Vec::new(),
            next_id: 0,
            step_count: 0,
            counters: Counters::default(),
            collided_last: Vec::new(),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn emission_model(&self) -> &EmissionModel {
        &self.emission
    }

    pub fn routes(&self) -> &Arc<Vec<RouteGeometry>> {
        &self.routes
    }

    pub fn route(&self, id: RouteId) -> &RouteGeometry {
        &self.routes[id.index()]
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn vehicle(&self, id: u64) -> Option<&VehicleState> {
        self.vehicles
            .binary_search_by_key(&id, |v| v.id)
            .ok()
            .map(|k| &self.vehicles[k])
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Vehicles removed by the collision of the most recent step.
    pub fn collided_last_step(&self) -> &[VehicleState] {
        &self.collided_last
    }

    /// 2D position and heading of a vehicle.
    pub fn pose(&self, v: &VehicleState) -> (Point2, f64) {
        self.route(v.route)
            .pose_of(v.s.clamp(0.0, self.route(v.route).length))
            .expect("clamped arc length is in range")
    }

    /// Places a vehicle directly. Intended for tests and scripted scenes;
    /// ids must be strictly increasing.
    pub fn insert_vehicle(&mut self, route: RouteId, s: f64, v: f64, fuel: Fuel) -> Result<u64> {
        let len = self.route(route).length;
        if !(0.0..=len).contains(&s) {
            return Err(Error::OutOfRange { what: "arc length", value: s });
        }
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::OutOfRange { what: "speed", value: v });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.vehicles.push(VehicleState {
            id,
            route,
            s,
            v,
            a_meas: 0.0,
            fuel,
            spawn_step: self.step_count,
        });
        self.counters.spawned += 1;
        Ok(id)
    }

    /// Draws this step's arrival. At most one vehicle appears per call.
    pub fn spawn(&mut self) -> Vec<VehicleState> {
        if self.vehicles.len() >= self.cfg.max_vehicles {
            return Vec::new();
        }
        let p = self.cfg.spawn_probability();
        if !self.rng.random_bool(p) {
            return Vec::new();
        }
        let route = RouteId::from_index(self.rng.random_range(0..RouteId::COUNT)).expect("index < 12");
        let fuel = if self.rng.random_bool(self.cfg.electric_fraction) {
            Fuel::Electric
        } else {
            Fuel::Petrol
        };
        let blocked = self
            .vehicles
            .iter()
            .any(|v| v.route.approach == route.approach && v.s < SPAWN_CLEARANCE);
        if blocked {
            return Vec::new();
        }
        let id = self.next_id;
        self.next_id += 1;
        let vehicle = VehicleState {
            id,
            route,
            s: 0.0,
            v: 0.5 * self.cfg.v_lim,
            a_meas: 0.0,
            fuel,
            spawn_step: self.step_count,
        };
        self.vehicles.push(vehicle.clone());
        self.counters.spawned += 1;
        vec![vehicle]
    }

    /// Advances every vehicle by one step.
    ///
    /// Vehicles without an entry in `actions` coast at zero acceleration.
    /// Actions are clamped to `[a_min, a_max]`. An id that is not in the
    /// world rejects the whole step without mutating anything.
    pub fn step(&mut self, actions: &BTreeMap<u64, f64>) -> Result<StepOutcome> {
        if let Some(&id) = actions.keys().find(|&&id| self.vehicle(id).is_none()) {
            return Err(Error::UnknownVehicle(id));
        }
        let dt = self.cfg.dt;
        let mut outcome = StepOutcome::default();
        for veh in &mut self.vehicles {
            let a = actions
                .get(&veh.id)
                .copied()
                .unwrap_or(0.0)
                .clamp(self.cfg.a_min, self.cfg.a_max);
            let (ds, v_next) = integrate(veh.v, a, dt);
            veh.s += ds;
            veh.v = v_next;
            veh.a_meas = a;
            if veh.fuel == Fuel::Petrol {
                outcome.emissions_g += emission_rate(veh.v, a, &self.emission) * dt;
            }
        }
        self.step_count += 1;

        let routes = Arc::clone(&self.routes);
        let step_count = self.step_count;
        let mut kept = Vec::with_capacity(self.vehicles.len());
        for veh in self.vehicles.drain(..) {
            if veh.s >= routes[veh.route.index()].length {
                outcome.exited.push(ExitRecord {
                    id: veh.id,
                    travel_time: (step_count - veh.spawn_step) as f64 * dt,
                    fuel: veh.fuel,
                });
            } else {
                kept.push(veh);
            }
        }
        self.vehicles = kept;
        self.counters.exited += outcome.exited.len() as u64;

        outcome.collided_pairs = self.detect_collisions();
        outcome.collided = !outcome.collided_pairs.is_empty();
        self.collided_last.clear();
        if outcome.collided {
            let hit: std::collections::BTreeSet<u64> =
                outcome.collided_pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
            let (gone, stay): (Vec<_>, Vec<_>) = self.vehicles.drain(..).partition(|v| hit.contains(&v.id));
            self.counters.removed_by_collision += gone.len() as u64;
            self.collided_last = gone;
            self.vehicles = stay;
        }
        outcome.all_standstill =
            !self.vehicles.is_empty() && self.vehicles.iter().all(|v| v.v < self.cfg.standstill_eps);
        Ok(outcome)
    }

    /// Pairs `(i, j)`, `i < j`, whose poses are closer than the collision
    /// radius. Uses a sweep over x; output sorted by `(i, j)`.
    pub fn detect_collisions(&self) -> Vec<(u64, u64)> {
        let r = self.cfg.collision_radius;
        let mut pts: Vec<(Point2, u64)> = self.vehicles.iter().map(|v| (self.pose(v).0, v.id)).collect();
        pts.sort_by(|a, b| a.0.x.total_cmp(&b.0.x).then(a.1.cmp(&b.1)));
        let mut pairs = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                if pts[j].0.x - pts[i].0.x >= r {
                    break;
                }
                if pts[i].0.dist(pts[j].0) < r {
                    let (a, b) = (pts[i].1, pts[j].1);
                    pairs.push((a.min(b), a.max(b)));
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }

    /// Empties the world for a new episode. The arrival stream continues.
    pub fn reset(&mut self) {
        self.vehicles.clear();
        self.collided_last.clear();
        self.step_count = 0;
        self.counters = Counters::default();
    }
}

/// Constant-acceleration update over `dt` that stops at zero speed.
/// Returns `(distance, new speed)`.
pub fn integrate(v: f64, a: f64, dt: f64) -> (f64, f64) {
    let v_next = v + a * dt;
    if v_next < 0.0 {
        // a < 0 here; the vehicle stops part-way through the step
        (v * v / (2.0 * -a), 0.0)
    } else {
        (v * dt + 0.5 * a * dt * dt, v_next)
    }
}

/// Writes a per-vehicle CSV trace of every recorded step.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub const HEADER: &'static str = "step,vehicle_id,route,fuel,s,v,a,collided";

    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    /// Records the state after a step, including vehicles that were removed
    /// by a collision in that step.
    pub fn record(&mut self, world: &World) -> Result<()> {
        let step = world.step_count();
        let mut rows: Vec<(&VehicleState, bool)> = world
            .vehicles()
            .iter()
            .map(|v| (v, false))
            .chain(world.collided_last_step().iter().map(|v| (v, true)))
            .collect();
        rows.sort_by_key(|(v, _)| v.id);
        for (v, collided) in rows {
            writeln!(
                self.out,
                "{step},{},{},{},{},{},{},{}",
                v.id,
                v.route,
                v.fuel.as_str(),
                v.s,
                v.v,
                v.a_meas,
                u8::from(collided)
            )?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
