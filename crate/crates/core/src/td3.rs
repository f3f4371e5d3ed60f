//! ω-conditioned TD3 over scene graphs.
//!
//! One actor and two critics share the relational trunk architecture. Every
//! environment step draws a fresh ω, and the same ω scalarizes the reward and
//! conditions both graphs of the stored transition.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{read_checkpoint, soft_update, write_checkpoint, Adam, GraphNet, Head, NetShape, ParamStore, Tensor, Upstream};
use crate::pareto::{fairness_delta, points_hypervolume, quantiles, ParetoPoint};
use crate::reward::{emission_rate, EmissionModel, RewardVector};
use crate::scene_graph::{GraphBuilder, SceneGraph};
use crate::world::{Fuel, World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub explore_noise_sigma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub eval_every: u64,
    /// Steps per ω for the periodic evaluations during training.
    pub eval_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            tau: 0.005,
            policy_delay: 2,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            explore_noise_sigma: 0.1,
            batch_size: 256,
            buffer_capacity: 100_000,
            warmup_steps: 1_000,
            total_steps: 30_000,
            eval_every: 2_500,
            eval_steps: 3_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: format!("td3.{key}"),
                reason: reason.into(),
            })
        };
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1)");
        }
        for (key, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, "must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay", "must be at least 1");
        }
        for (key, s) in [
            ("target_noise_sigma", self.target_noise_sigma),
            ("target_noise_clip", self.target_noise_clip),
            ("explore_noise_sigma", self.explore_noise_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(key, "must be a finite non-negative number");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity", "must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        Ok(())
    }
}

/// One stored environment step. Both graphs carry the ω used to scalarize
/// `reward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub g: SceneGraph,
    pub actions: Vec<f64>,
    pub reward: f64,
    pub g_next: SceneGraph,
    pub done: bool,
}

/// Fixed-capacity FIFO buffer with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Uniform sample with replacement.
    pub fn sample(&mut self, n: usize) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let len = self.items.len();
        let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..len)).collect();
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Maps a normalized action in `[−1, 1]` to an acceleration.
pub fn to_physical(a: f64, a_min: f64, a_max: f64) -> f64 {
    a_min + (a + 1.0) / 2.0 * (a_max - a_min)
}

/// Actor output for `g`; with `explore`, Gaussian noise is added and the
/// result clipped to `[−1, 1]`.
pub fn select_action<R: Rng>(actor: &GraphNet, g: &SceneGraph, explore: Option<(f64, &mut R)>) -> Result<Vec<f64>> {
    let (mut a, _) = actor.forward(g, None)?;
    if let Some((sigma, rng)) = explore {
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|_| Error::OutOfRange { what: "noise sigma", value: sigma })?;
            for x in &mut a {
                *x = (*x + noise.sample(rng)).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(a)
}

/// Online and target networks with their optimisers.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: GraphNet,
    pub actor_target: GraphNet,
    pub critic1: GraphNet,
    pub critic2: GraphNet,
    pub critic1_target: GraphNet,
    pub critic2_target: GraphNet,
    pub actor_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    pub critic_updates: u64,
}

impl Agent {
    pub fn new<R: Rng>(shape: NetShape, cfg: &TrainConfig, rng: &mut R) -> Self {
        let actor = GraphNet::new(Head::Actor, shape, rng);
        let critic1 = GraphNet::new(Head::Critic, shape, rng);
        let critic2 = GraphNet::new(Head::Critic, shape, rng);
        Self {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor_opt: Adam::new(&actor.params, cfg.actor_lr),
            critic1_opt: Adam::new(&critic1.params, cfg.critic_lr),
            critic2_opt: Adam::new(&critic2.params, cfg.critic_lr),
            actor,
            critic1,
            critic2,
            critic_updates: 0,
        }
    }

    /// Bootstrapped critic target `y` for one transition.
    pub fn target_value<R: Rng>(&self, t: &Transition, cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
        if t.done || cfg.gamma == 0.0 {
            return Ok(t.reward);
        }
        let (mut a, _) = self.actor_target.forward(&t.g_next, None)?;
        if cfg.target_noise_sigma > 0.0 {
            let noise = Normal::new(0.0, cfg.target_noise_sigma).map_err(|_| Error::OutOfRange {
                what: "target noise sigma",
                value: cfg.target_noise_sigma,
            })?;
            let c = cfg.target_noise_clip;
            for x in &mut a {
                *x = (*x + noise.sample(rng).clamp(-c, c)).clamp(-1.0, 1.0);
            }
        }
        let q1 = self.critic1_target.forward(&t.g_next, Some(&a))?.0[0];
        let q2 = self.critic2_target.forward(&t.g_next, Some(&a))?.0[0];
        Ok(t.reward + cfg.gamma * q1.min(q2))
    }

    /// One gradient step on both critics; returns
    /// `mean((Q1 − y)² + (Q2 − y)²)`.
    pub fn critic_update<R: Rng>(&mut self, batch: &[&Transition], cfg: &TrainConfig, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let ys = batch
            .iter()
            .map(|t| self.target_value(t, cfg, rng))
            .collect::<Result<Vec<f64>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (critic, opt) in [(&mut self.critic1, &mut self.critic1_opt), (&mut self.critic2, &mut self.critic2_opt)] {
            critic.params.zero_grad();
            for (t, &y) in batch.iter().zip(&ys) {
                let (q, trace) = critic.forward(&t.g, Some(&t.actions))?;
                let err = q[0] - y;
                loss += err * err * scale;
                critic.backward(trace, Upstream::Value(2.0 * err * scale), true)?;
            }
            opt.step(&mut critic.params);
        }
        self.critic_updates += 1;
        Ok(loss)
    }

    /// One gradient step on the actor against the frozen first critic;
    /// returns `−mean Q1(g, actor(g))`. Targets are not touched.
    pub fn actor_update(&mut self, batch: &[&Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        self.actor.params.zero_grad();
        let mut loss = 0.0;
        for t in batch {
            if t.g.num_vertices() == 0 {
                continue;
            }
            let (a, actor_trace) = self.actor.forward(&t.g, None)?;
            let (q, critic_trace) = self.critic1.forward(&t.g, Some(&a))?;
            loss -= q[0] * scale;
            let grads = self.critic1.backward(critic_trace, Upstream::Value(-scale), false)?;
            self.actor.backward(actor_trace, Upstream::Actions(&grads.actions()), true)?;
        }
        self.actor_opt.step(&mut self.actor.params);
        Ok(loss)
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.actor_target.params, &self.actor.params, tau)?;
        soft_update(&mut self.critic1_target.params, &self.critic1.params, tau)?;
        soft_update(&mut self.critic2_target.params, &self.critic2.params, tau)
    }

    /// Critic step, plus actor step and target update every `policy_delay`
    /// critic steps.
    pub fn update<R: Rng>(&mut self, batch: &[&Transition], cfg: &TrainConfig, rng: &mut R) -> Result<UpdateStats> {
        let critic_loss = self.critic_update(batch, cfg, rng)?;
        let actor_loss = if self.critic_updates % cfg.policy_delay == 0 {
            let l = self.actor_update(batch)?;
            self.soft_update_targets(cfg.tau)?;
            Some(l)
        } else {
            None
        };
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    fn stores(&self) -> [(&'static str, &GraphNet); 6] {
        [
            ("actor", &self.actor),
            ("actor_target", &self.actor_target),
            ("critic1", &self.critic1),
            ("critic2", &self.critic2),
            ("critic1_target", &self.critic1_target),
            ("critic2_target", &self.critic2_target),
        ]
    }

    /// Serialises networks, optimiser state and `env_steps` bit-exactly.
    pub fn to_checkpoint(&self, env_steps: u64) -> Result<String> {
        let mut owned: Vec<(String, ParamStore)> = Vec::new();
        let mut meta = ParamStore::new();
        let counters = [
            env_steps,
            self.critic_updates,
            self.actor_opt.t,
            self.critic1_opt.t,
            self.critic2_opt.t,
            self.actor.shape.hidden as u64,
            self.actor.shape.omega_hidden as u64,
        ];
        meta.push("counters", Tensor::from_values(&[counters.len()], counters.iter().map(|&c| c as f64).collect())?);
        owned.push(("meta".into(), meta));
        for (name, opt, net) in [
            ("actor_opt", &self.actor_opt, &self.actor),
            ("critic1_opt", &self.critic1_opt, &self.critic1),
            ("critic2_opt", &self.critic2_opt, &self.critic2),
        ] {
            let (m, v) = opt.moments(&net.params)?;
            owned.push((format!("{name}.m"), m));
            owned.push((format!("{name}.v"), v));
        }
        let mut stores: Vec<(&str, &ParamStore)> = self.stores().iter().map(|(n, net)| (*n, &net.params)).collect();
        stores.extend(owned.iter().map(|(n, s)| (n.as_str(), s)));
        Ok(write_checkpoint(&stores))
    }

    /// Inverse of [`Agent::to_checkpoint`]; returns the agent and the saved
    /// environment step count.
    pub fn from_checkpoint(text: &str, cfg: &TrainConfig) -> Result<(Self, u64)> {
        let stores: BTreeMap<String, ParamStore> = read_checkpoint(text)?.into_iter().collect();
        let get = |name: &str| stores.get(name).ok_or_else(|| Error::Checkpoint(format!("missing store `{name}`")));
        let counters = get("meta")?
            .get("counters")
            .filter(|t| t.len() == 7)
            .ok_or_else(|| Error::Checkpoint("missing counters".into()))?
            .values
            .iter()
            .map(|&x| x as u64)
            .collect::<Vec<u64>>();
        let shape = NetShape {
            hidden: counters[5] as usize,
            omega_hidden: counters[6] as usize,
        };
        let net = |name: &str, head: Head| -> Result<GraphNet> {
            let mut n = GraphNet::zeros(head, shape);
            n.params
                .copy_from(get(name)?)
                .map_err(|e| Error::Checkpoint(format!("store `{name}`: {e}")))?;
            Ok(n)
        };
        let opt = |name: &str, lr: f64, t: u64| -> Result<Adam> {
            Adam::from_moments(lr, t, get(&format!("{name}.m"))?, get(&format!("{name}.v"))?)
        };
        let agent = Self {
            actor: net("actor", Head::Actor)?,
            actor_target: net("actor_target", Head::Actor)?,
            critic1: net("critic1", Head::Critic)?,
            critic2: net("critic2", Head::Critic)?,
            critic1_target: net("critic1_target", Head::Critic)?,
            critic2_target: net("critic2_target", Head::Critic)?,
            actor_opt: opt("actor_opt", cfg.actor_lr, counters[2])?,
            critic1_opt: opt("critic1_opt", cfg.critic_lr, counters[3])?,
            critic2_opt: opt("critic2_opt", cfg.critic_lr, counters[4])?,
            critic_updates: counters[1],
        };
        Ok((agent, counters[0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
}

/// One row of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub hypervolume: f64,
    /// Collisions summed over the evaluation grid.
    pub crashes: u64,
    /// Means over the evaluation grid.
    pub mean_speed: f64,
    pub mean_emission: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,hypervolume,crashes,mean_speed,mean_emission";

    pub fn from_points(step: u64, points: &[ParetoPoint]) -> Self {
        let n = points.len().max(1) as f64;
        Self {
            step,
            hypervolume: points_hypervolume(points),
            crashes: points.iter().map(|p| p.crashes).sum(),
            mean_speed: points.iter().map(|p| p.obj_speed).sum::<f64>() / n,
            mean_emission: points.iter().map(|p| p.obj_emission).sum::<f64>() / n,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{},{:?},{:?}",
            self.step, self.hypervolume, self.crashes, self.mean_speed, self.mean_emission
        )
    }
}

/// Evaluation protocol shared by the periodic and final sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub omega_grid: Vec<f64>,
    pub steps_per_omega: u64,
    /// World seed of the first grid point; point `i` uses `seed + i`.
    pub seed: u64,
}

/// Everything `train` needs besides the agent state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub world: WorldConfig,
    pub emission: EmissionModel,
    pub shape: NetShape,
    pub td3: TrainConfig,
    pub eval: EvalSpec,
}

/// Independent seeds for the components of one run.
#[derive(Debug, Clone, Copy)]
struct RunSeeds {
    init: u64,
    world: u64,
    noise: u64,
    replay: u64,
}

impl RunSeeds {
    fn new(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: master.random(),
            world: master.random(),
            noise: master.random(),
            replay: master.random(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: u64,
}

/// Initial agent for `setup`, as produced by `train` before its first step.
pub fn initial_agent(setup: &TrainSetup) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(RunSeeds::new(setup.td3.seed).init);
    Agent::new(setup.shape, &setup.td3, &mut rng)
}

/// Runs TD3 for `td3.total_steps` environment steps, evaluating every
/// `eval_every` steps. `resume` continues from a saved agent; its replay
/// buffer starts empty and the random warm-up is skipped, so updates resume
/// once a batch worth of transitions has been collected.
pub fn train(setup: &TrainSetup, resume: Option<(Agent, u64)>, mut on_metric: impl FnMut(&MetricsRow) -> Result<()>) -> Result<TrainOutcome> {
    let cfg = &setup.td3;
    cfg.validate()?;
    setup.world.validate()?;
    setup.shape.validate()?;
    let seeds = RunSeeds::new(cfg.seed);
    let (mut agent, start) = match resume {
        Some((agent, step)) => (agent, step),
        None => (initial_agent(setup), 0),
    };
    let salt = |s: u64| s ^ start.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut world_cfg = setup.world.clone();
    world_cfg.seed = salt(seeds.world);
    let mut world = World::new(world_cfg, setup.emission)?;
    let builder = GraphBuilder::for_world(&world);
    let mut rng = ChaCha8Rng::seed_from_u64(salt(seeds.noise));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, salt(seeds.replay));
    let warmup_end = if start == 0 { cfg.warmup_steps } else { start };
    let horizon = setup.world.horizon;
    let (a_min, a_max) = (setup.world.a_min, setup.world.a_max);

    let mut metrics = Vec::new();
    for step in start..cfg.total_steps {
        let omega: f64 = rng.random();
        world.spawn();
        let g = builder.build(&world, omega)?;
        let actions: Vec<f64> = if step < warmup_end && start == 0 {
            (0..g.num_vertices()).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            select_action(&agent.actor, &g, Some((cfg.explore_noise_sigma, &mut rng)))?
        };
        let phys: BTreeMap<u64, f64> = g
            .vertex_ids
            .iter()
            .zip(&actions)
            .map(|(&id, &a)| (id, to_physical(a, a_min, a_max)))
            .collect();
        let outcome = world.step(&phys)?;
        let reward = RewardVector::from_step(&world, &outcome, omega)?;
        let g_next = builder.build(&world, omega)?;
        let done = outcome.collided;
        buffer.push(Transition {
            g,
            actions,
            reward: reward.r_scalar,
            g_next,
            done,
        });
        if done || world.step_count() >= horizon {
            world.reset();
        }

        if step + 1 >= warmup_end && buffer.len() >= cfg.batch_size.min(cfg.buffer_capacity) {
            let batch: Vec<Transition> = buffer.sample(cfg.batch_size)?.into_iter().cloned().collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            agent.update(&refs, cfg, &mut rng)?;
        }

        if (step + 1) % cfg.eval_every == 0 {
            let points = evaluate(&agent.actor, &setup.world, &setup.emission, &EvalSpec {
                steps_per_omega: cfg.eval_steps,
                ..setup.eval.clone()
            })?;
            let row = MetricsRow::from_points(step + 1, &points);
            on_metric(&row)?;
            metrics.push(row);
        }
    }
    Ok(TrainOutcome {
        agent,
        metrics,
        env_steps: cfg.total_steps.max(start),
    })
}

/// Statistics gathered while running a fixed policy at one ω.
#[derive(Debug, Default)]
struct Rollout {
    speed_sum: f64,
    vehicle_steps: u64,
    emission_sum: f64,
    petrol_steps: u64,
    crashes: u64,
    trips: Vec<(Fuel, f64)>,
    step_speed: Vec<f64>,
    step_emission: Vec<f64>,
}

impl Rollout {
    fn into_point(self, omega: f64) -> ParetoPoint {
        let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
        ParetoPoint {
            omega,
            obj_speed: mean(self.speed_sum, self.vehicle_steps),
            obj_emission: mean(self.emission_sum, self.petrol_steps),
            delta_f: fairness_delta(&self.trips),
            crashes: self.crashes,
            speed_quantiles: quantiles(&self.step_speed),
            emission_quantiles: quantiles(&self.step_emission),
        }
    }
}

/// Runs `policy` for `steps` world steps at a fixed ω, resetting the world
/// after a collision or at the horizon.
fn rollout(
    world: &mut World,
    builder: &GraphBuilder,
    omega: f64,
    steps: u64,
    policy: &mut dyn FnMut(&SceneGraph) -> Result<Vec<f64>>,
) -> Result<Rollout> {
    let cfg = world.config().clone();
    let model = *world.emission_model();
    let mut r = Rollout::default();
    for _ in 0..steps {
        world.spawn();
        let g = builder.build(world, omega)?;
        let actions = policy(&g)?;
        if actions.len() != g.num_vertices() {
            return Err(Error::ActionCount {
                expected: g.num_vertices(),
                got: actions.len(),
            });
        }
        let phys: BTreeMap<u64, f64> = g
            .vertex_ids
            .iter()
            .zip(&actions)
            .map(|(&id, &a)| (id, to_physical(a, cfg.a_min, cfg.a_max)))
            .collect();
        let outcome = world.step(&phys)?;
        r.trips.extend(outcome.exited.iter().map(|e| (e.fuel, e.travel_time)));

        let vehicles = world.vehicles();
        if !vehicles.is_empty() {
            let s: f64 = vehicles.iter().map(|v| v.v).sum();
            r.speed_sum += s;
            r.vehicle_steps += vehicles.len() as u64;
            r.step_speed.push(s / vehicles.len() as f64);
        }
        let (e, n) = vehicles
            .iter()
            .filter(|v| v.fuel == Fuel::Petrol)
            .fold((0.0, 0u64), |(e, n), v| (e + emission_rate(v.v, v.a_meas, &model), n + 1));
        if n > 0 {
            r.emission_sum += e;
            r.petrol_steps += n;
            r.step_emission.push(e / n as f64);
        }

        if outcome.collided {
            r.crashes += 1;
        }
        if outcome.collided || world.step_count() >= cfg.horizon {
            world.reset();
        }
    }
    Ok(r)
}

fn sweep(
    world_cfg: &WorldConfig,
    emission: &EmissionModel,
    spec: &EvalSpec,
    mut policy: impl FnMut(usize, &SceneGraph) -> Result<Vec<f64>>,
) -> Result<Vec<ParetoPoint>> {
    for &w in &spec.omega_grid {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::OutOfRange { what: "omega", value: w });
        }
    }
    let mut points = Vec::with_capacity(spec.omega_grid.len());
    for (i, &omega) in spec.omega_grid.iter().enumerate() {
        let mut cfg = world_cfg.clone();
        cfg.seed = spec.seed.wrapping_add(i as u64);
        let mut world = World::new(cfg, *emission)?;
        let builder = GraphBuilder::for_world(&world);
        let r = rollout(&mut world, &builder, omega, spec.steps_per_omega, &mut |g| policy(i, g))?;
        points.push(r.into_point(omega));
    }
    Ok(points)
}

/// Exploit-only evaluation of `actor`: one point per grid ω.
pub fn evaluate(actor: &GraphNet, world_cfg: &WorldConfig, emission: &EmissionModel, spec: &EvalSpec) -> Result<Vec<ParetoPoint>> {
    sweep(world_cfg, emission, spec, |_, g| actor.forward(g, None).map(|(a, _)| a))
}

/// The same protocol with uniformly random actions; grid point `i` draws from
/// a generator seeded with `seed + i`.
pub fn evaluate_random(world_cfg: &WorldConfig, emission: &EmissionModel, spec: &EvalSpec, seed: u64) -> Result<Vec<ParetoPoint>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..spec.omega_grid.len())
        .map(|i| ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)))
        .collect();
    sweep(world_cfg, emission, spec, |i, g| {
        Ok((0..g.num_vertices()).map(|_| rngs[i].random_range(-1.0..=1.0)).collect())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{Edge, EdgeFeature, EdgeRelation, FuelPair, Relation, VertexFeature};

    fn shape() -> NetShape {
        NetShape { hidden: 8, omega_hidden: 4 }
    }

    fn graph(omega: f64, n: usize) -> SceneGraph {
        let mut g = SceneGraph::empty(omega);
        for i in 0..n {
            g.vertex_ids.push(i as u64);
            g.vertex_feats.push(VertexFeature {
                s_norm: 0.1 * i as f64,
                v_norm: 0.5,
                a_norm: -0.2,
                k: (i % 2) as f64,
            });
        }
        for i in 1..n {
            g.edges.push(Edge {
                src: i - 1,
                dst: i,
                relation: EdgeRelation {
                    rel: Relation::Crossing,
                    fuel_pair: FuelPair::PE,
                },
                feature: EdgeFeature { inv_d: 0.1, chi: 0.5 },
            });
        }
        g
    }

    fn transition(reward: f64, done: bool) -> Transition {
        Transition {
            g: graph(0.3, 3),
            actions: vec![0.1, -0.4, 0.7],
            reward,
            g_next: graph(0.3, 4),
            done,
        }
    }

    fn agent(cfg: &TrainConfig) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Agent::new(shape(), cfg, &mut rng)
    }

    #[test]
    fn physical_mapping() {
        assert_eq!(to_physical(-1.0, -4.5, 3.0), -4.5);
        assert_eq!(to_physical(1.0, -4.5, 3.0), 3.0);
        assert_eq!(to_physical(0.0, -4.5, 3.0), -0.75);
    }

    #[test]
    fn buffer_is_fifo_and_bounded() {
        let mut b = ReplayBuffer::new(3, 0);
        assert!(b.sample(1).is_err());
        for k in 0..5 {
            b.push(transition(k as f64, false));
            assert!(b.len() <= 3);
        }
        let rewards: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn buffer_sampling_reproducible() {
        let fill = |seed| {
            let mut b = ReplayBuffer::new(10, seed);
            for k in 0..10 {
                b.push(transition(k as f64, false));
            }
            b.sample(20).unwrap().iter().map(|t| t.reward).collect::<Vec<_>>()
        };
        assert_eq!(fill(1), fill(1));
        assert_ne!(fill(1), fill(2));
    }

    #[test]
    fn exploit_actions_deterministic_and_noise_clipped() {
        let cfg = TrainConfig::default();
        let a = agent(&cfg);
        let g = graph(0.6, 5);
        let x = select_action::<ChaCha8Rng>(&a.actor, &g, None).unwrap();
        assert_eq!(x, select_action::<ChaCha8Rng>(&a.actor, &g, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = select_action(&a.actor, &g, Some((5.0, &mut rng))).unwrap();
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_ne!(x, y);
    }

    #[test]
    fn terminal_and_myopic_targets() {
        let cfg = TrainConfig::default();
        let a = agent(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.target_value(&transition(-3.5, true), &cfg, &mut rng).unwrap(), -3.5);
        let myopic = TrainConfig { gamma: 0.0, ..cfg.clone() };
        assert_eq!(a.target_value(&transition(1.25, false), &myopic, &mut rng).unwrap(), 1.25);
    }

    #[test]
    fn critic_loss_matches_hand_computation() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        let t = transition(0.5, false);
        let noiseless = TrainConfig {
            target_noise_sigma: 0.0,
            ..cfg.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (na, _) = a.actor_target.forward(&t.g_next, None).unwrap();
        let q1t = a.critic1_target.forward(&t.g_next, Some(&na)).unwrap().0[0];
        let q2t = a.critic2_target.forward(&t.g_next, Some(&na)).unwrap().0[0];
        let y = 0.5 + 0.99 * q1t.min(q2t);
        let q1 = a.critic1.forward(&t.g, Some(&t.actions)).unwrap().0[0];
        let q2 = a.critic2.forward(&t.g, Some(&t.actions)).unwrap().0[0];
        let expect = (q1 - y).powi(2) + (q2 - y).powi(2);
        let loss = a.critic_update(&[&t], &noiseless, &mut rng).unwrap();
        assert!((loss - expect).abs() < 1e-10);
        assert!(a.critic_update(&[], &noiseless, &mut rng).is_err());
    }

    #[test]
    fn critic_step_leaves_targets_and_actor_alone() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        let before = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        a.critic_update(&[&transition(1.0, false)], &cfg, &mut rng).unwrap();
        assert_eq!(a.actor.params, before.actor.params);
        assert_eq!(a.critic1_target.params, before.critic1_target.params);
        assert_ne!(a.critic1.params.tensor(0).values, before.critic1.params.tensor(0).values);
    }

    #[test]
    fn constant_critic_gives_zero_actor_gradient() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        for (i, t) in a.critic1.params.tensors_mut().enumerate() {
            if i < 15 {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        a.critic1.params.tensor_mut(15).values[0] = 2.5;
        let before = a.actor.params.clone();
        let loss = a.actor_update(&[&transition(0.0, false)]).unwrap();
        assert_eq!(loss, -2.5);
        assert!(a.actor.params.iter().all(|(_, t)| t.grad.iter().all(|&g| g == 0.0)));
        for ((_, x), (_, y)) in a.actor.params.iter().zip(before.iter()) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn actor_step_does_not_increase_loss() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        a.actor_opt.lr = 1e-4;
        let batch = [transition(0.0, false), transition(0.0, false)];
        let refs: Vec<&Transition> = batch.iter().collect();
        let eval = |a: &Agent| {
            let a1 = a.actor.forward(&refs[0].g, None).unwrap().0;
            -a.critic1.forward(&refs[0].g, Some(&a1)).unwrap().0[0]
        };
        let before = eval(&a);
        let reported = a.actor_update(&refs).unwrap();
        assert!((reported - before).abs() < 1e-12);
        assert!(eval(&a) <= before);
    }

    #[test]
    fn policy_delay_schedule() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        let t = transition(1.0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 1..=4u64 {
            let before = a.actor.params.clone();
            let stats = a.update(&[&t], &cfg, &mut rng).unwrap();
            let changed = a.actor.params.tensor(0).values != before.tensor(0).values;
            assert_eq!(changed, k % 2 == 0);
            assert_eq!(stats.actor_loss.is_some(), k % 2 == 0);
        }
    }

    #[test]
    fn targets_track_exponential_average() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        let mut expect = a.actor_target.params.tensor(0).values.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            for v in &mut a.actor.params.tensor_mut(0).values {
                *v += rng.random_range(-0.1..0.1);
            }
            a.soft_update_targets(0.25).unwrap();
            for (e, &o) in expect.iter_mut().zip(&a.actor.params.tensor(0).values) {
                *e = 0.25 * o + 0.75 * *e;
            }
        }
        for (x, y) in expect.iter().zip(&a.actor_target.params.tensor(0).values) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn target_network_enters_loss_but_not_gradient() {
        let cfg = TrainConfig {
            target_noise_sigma: 0.0,
            ..TrainConfig::default()
        };
        let base = agent(&cfg);
        let t = transition(0.5, false);
        let run = |a: &Agent| {
            let mut a = a.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let l = a.critic_update(&[&t], &cfg, &mut rng).unwrap();
            (l, a)
        };
        let (l0, a0) = run(&base);
        let mut perturbed = base.clone();
        perturbed.critic1_target.params.tensor_mut(15).values[0] += 1.0;
        perturbed.critic2_target.params.tensor_mut(15).values[0] += 1.0;
        let (l1, a1) = run(&perturbed);
        assert_ne!(l0, l1);
        assert!(a1.critic1_target.params.iter().all(|(_, t)| t.grad.iter().all(|&g| g == 0.0)));
        assert!(a0.critic1_target.params.iter().all(|(_, t)| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = TrainConfig::default();
        let mut a = agent(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            a.update(&[&transition(1.0, false)], &cfg, &mut rng).unwrap();
        }
        let text = a.to_checkpoint(42).unwrap();
        let (b, steps) = Agent::from_checkpoint(&text, &cfg).unwrap();
        assert_eq!(steps, 42);
        assert_eq!(b.critic_updates, 3);
        assert_eq!(b.to_checkpoint(42).unwrap(), text);
        assert!(Agent::from_checkpoint("aim-morl-checkpoint 1\n", &cfg).is_err());
    }

    #[test]
    fn evaluation_grid_cardinality() {
        let mut world = WorldConfig::default();
        world.max_vehicles = 8;
        let a = agent(&TrainConfig::default());
        let spec = |grid: Vec<f64>| EvalSpec {
            omega_grid: grid,
            steps_per_omega: 50,
            seed: 3,
        };
        let em = EmissionModel::default();
        assert!(evaluate(&a.actor, &world, &em, &spec(vec![])).unwrap().is_empty());
        let pts = evaluate(&a.actor, &world, &em, &spec(vec![0.0, 0.5, 1.0])).unwrap();
        assert_eq!(pts.iter().map(|p| p.omega).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        assert!(evaluate(&a.actor, &world, &em, &spec(vec![1.5])).is_err());
    }

    #[test]
    fn zero_policy_evaluation_is_reproducible() {
        let world = WorldConfig::default();
        let zero = GraphNet::zeros(Head::Actor, shape());
        let spec = EvalSpec {
            omega_grid: vec![0.5],
            steps_per_omega: 400,
            seed: 11,
        };
        let em = EmissionModel::default();
        let a = evaluate(&zero, &world, &em, &spec).unwrap();
        assert_eq!(a, evaluate(&zero, &world, &em, &spec).unwrap());
        assert!(a[0].obj_speed > 0.0);
    }
}
