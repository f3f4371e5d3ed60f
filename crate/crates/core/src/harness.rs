//! Experiment orchestration: configuration, multi-seed training, evaluation
//! sweeps, seed aggregation and report files.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.toml              resolved configuration
//! <out>/seed-<n>/checkpoint.txt  latest agent
//! <out>/seed-<n>/metrics.csv     step,hypervolume,crashes,mean_speed,mean_emission
//! <out>/points.csv               one row per (seed, ω)
//! <out>/summary.csv              per-ω means with 95 % half-widths
//! <out>/report.json              front report over the per-ω means
//! <out>/front.csv, fairness.csv, boxstats.csv
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::NetShape;
use crate::pareto::{FrontReport, ParetoPoint, QUANTILES};
use crate::reward::EmissionModel;
use crate::td3::{evaluate, train, Agent, EvalSpec, MetricsRow, TrainConfig, TrainSetup};
use crate::world::WorldConfig;

/// Two-sided 95 % normal quantile.
const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub omega_grid: Vec<f64>,
    pub steps_per_omega: u64,
    /// World seed of the first grid point; point `i` uses `seed + i`.
    pub seed: u64,
    pub emission_cap: f64,
    pub speed_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            omega_grid: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            steps_per_omega: 3_000,
            seed: 10_000,
            emission_cap: f64::INFINITY,
            speed_floor: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::InvalidConfig {
                key: format!("eval.{key}"),
                reason,
            })
        };
        for (i, &w) in self.omega_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return bad("omega_grid", format!("entry {i} = {w} lies outside [0, 1]"));
            }
        }
        if self.omega_grid.windows(2).any(|p| p[0] >= p[1]) {
            return bad("omega_grid", "must be strictly ascending".into());
        }
        if self.steps_per_omega == 0 {
            return bad("steps_per_omega", "must be at least 1".into());
        }
        if self.emission_cap.is_nan() {
            return bad("emission_cap", "must be a number".into());
        }
        if !self.speed_floor.is_finite() {
            return bad("speed_floor", "must be finite".into());
        }
        Ok(())
    }

    pub fn spec(&self) -> EvalSpec {
        EvalSpec {
            omega_grid: self.omega_grid.clone(),
            steps_per_omega: self.steps_per_omega,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub reward: EmissionModel,
    pub neural: NetShape,
    pub td3: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.reward.validate()?;
        self.neural.validate()?;
        self.td3.validate()?;
        self.eval.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig {
                key: "run.seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::InvalidConfig {
                key: "run.seeds".into(),
                reason: "seeds must be distinct".into(),
            });
        }
        Ok(())
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse {
            line: None,
            message: e.to_string(),
        })
    }

    pub fn setup(&self, seed: u64) -> TrainSetup {
        TrainSetup {
            world: self.world.clone(),
            emission: self.reward,
            shape: self.neural,
            td3: TrainConfig {
                seed,
                ..self.td3.clone()
            },
            eval: self.eval.spec(),
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run.out_dir.join(format!("seed-{seed}"))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, e: &toml::de::Error) -> Error {
    Error::ConfigParse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    }
}

/// Parses a `key=value` override; the value is read as a TOML literal and
/// falls back to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let bad = |reason: &str| Error::InvalidConfig {
        key: item.to_string(),
        reason: reason.into(),
    };
    let (key, raw) = item.split_once('=').ok_or_else(|| bad("override must have the form section.key=value"))?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| bad("key must have the form section.key"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(bad("section is not a table"));
    };
    sec.insert(field.to_string(), value);
    Ok(())
}

/// Parses and validates configuration text with optional overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| parse_error(text, &e))?
    } else {
        let merged = toml::to_string(&table).map_err(|e| Error::ConfigParse {
            line: None,
            message: e.to_string(),
        })?;
        toml::from_str(&merged).map_err(|e| Error::ConfigParse {
            line: None,
            message: e.message().trim().to_string(),
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or starts from defaults) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.run.out_dir)?;
    fs::write(cfg.run.out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn csv_error(file: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Csv {
        file: file.display().to_string(),
        line,
        message: e.to_string(),
    }
}

/// Trains every configured seed. With `resume`, each seed continues from its
/// saved checkpoint, which must exist.
pub fn run_train(cfg: &ExperimentConfig, resume: bool, log: &mut dyn Write) -> Result<()> {
    write_resolved(cfg)?;
    for &seed in &cfg.run.seeds {
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir)?;
        let ckpt = dir.join("checkpoint.txt");
        let metrics_path = dir.join("metrics.csv");
        let setup = cfg.setup(seed);
        let state = if resume {
            let text = fs::read_to_string(&ckpt).map_err(|_| Error::MissingCheckpoint(ckpt.clone()))?;
            let (agent, step) = Agent::from_checkpoint(&text, &setup.td3)?;
            truncate_metrics(&metrics_path, step)?;
            Some((agent, step))
        } else {
            let mut f = File::create(&metrics_path)?;
            writeln!(f, "{}", MetricsRow::HEADER)?;
            fs::write(&ckpt, crate::td3::initial_agent(&setup).to_checkpoint(0)?)?;
            None
        };

        let mut metrics_file = OpenOptions::new().append(true).open(&metrics_path)?;
        writeln!(log, "seed {seed}: training to step {}", setup.td3.total_steps)?;
        let outcome = train(&setup, state, |row| {
            writeln!(metrics_file, "{}", row.to_csv())?;
            metrics_file.flush()?;
            writeln!(
                log,
                "seed {seed} step {}: hypervolume {:.4}, crashes {}",
                row.step, row.hypervolume, row.crashes
            )?;
            Ok(())
        })?;
        fs::write(&ckpt, outcome.agent.to_checkpoint(outcome.env_steps)?)?;
    }
    Ok(())
}

/// Drops metrics rows past `step` so a resumed run does not duplicate them.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_else(|_| format!("{}\n", MetricsRow::HEADER));
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Flat CSV form of a [`ParetoPoint`] tagged with its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub seed: u64,
    pub omega: f64,
    pub mean_speed: f64,
    pub mean_emission: f64,
    pub delta_f: Option<f64>,
    pub crashes: u64,
    pub speed_q0: f64,
    pub speed_q1: f64,
    pub speed_q2: f64,
    pub speed_q3: f64,
    pub speed_q4: f64,
    pub emission_q0: f64,
    pub emission_q1: f64,
    pub emission_q2: f64,
    pub emission_q3: f64,
    pub emission_q4: f64,
}

impl PointRecord {
    pub fn new(seed: u64, p: &ParetoPoint) -> Self {
        let [s0, s1, s2, s3, s4] = p.speed_quantiles;
        let [e0, e1, e2, e3, e4] = p.emission_quantiles;
        Self {
            seed,
            omega: p.omega,
            mean_speed: p.obj_speed,
            mean_emission: p.obj_emission,
            delta_f: p.delta_f,
            crashes: p.crashes,
            speed_q0: s0,
            speed_q1: s1,
            speed_q2: s2,
            speed_q3: s3,
            speed_q4: s4,
            emission_q0: e0,
            emission_q1: e1,
            emission_q2: e2,
            emission_q3: e3,
            emission_q4: e4,
        }
    }

    pub fn point(&self) -> ParetoPoint {
        ParetoPoint {
            omega: self.omega,
            obj_speed: self.mean_speed,
            obj_emission: self.mean_emission,
            delta_f: self.delta_f,
            crashes: self.crashes,
            speed_quantiles: [self.speed_q0, self.speed_q1, self.speed_q2, self.speed_q3, self.speed_q4],
            emission_quantiles: [
                self.emission_q0,
                self.emission_q1,
                self.emission_q2,
                self.emission_q3,
                self.emission_q4,
            ],
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Evaluates each seed's checkpoint over the ω grid and writes `points.csv`.
pub fn run_eval(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<Vec<PointRecord>> {
    write_resolved(cfg)?;
    let mut rows = Vec::new();
    for &seed in &cfg.run.seeds {
        let ckpt = cfg.seed_dir(seed).join("checkpoint.txt");
        let text = fs::read_to_string(&ckpt).map_err(|_| Error::MissingCheckpoint(ckpt.clone()))?;
        let (agent, step) = Agent::from_checkpoint(&text, &cfg.td3)?;
        writeln!(log, "seed {seed}: evaluating checkpoint at step {step}")?;
        let points = evaluate(&agent.actor, &cfg.world, &cfg.reward, &cfg.eval.spec())?;
        rows.extend(points.iter().map(|p| PointRecord::new(seed, p)));
    }
    write_csv(&cfg.run.out_dir.join("points.csv"), &rows)?;
    Ok(rows)
}

/// Mean and 95 % normal-approximation half-width.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub omega: f64,
    pub n: usize,
    pub speed_mean: f64,
    pub speed_hw: f64,
    pub emission_mean: f64,
    pub emission_hw: f64,
    pub delta_f_mean: Option<f64>,
    pub delta_f_hw: Option<f64>,
    pub crashes_mean: f64,
    pub crashes_hw: f64,
}

/// Groups records by ω and reduces each group to per-ω means. The returned
/// points carry the mean objectives, the mean Δ_F over seeds where it is
/// present, total crashes and mean quantiles.
pub fn aggregate(records: &[PointRecord]) -> (Vec<ParetoPoint>, Vec<SummaryRecord>) {
    let mut groups: BTreeMap<u64, Vec<&PointRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.omega.to_bits()).or_default().push(r);
    }
    let mut keyed: Vec<(f64, Vec<&PointRecord>)> = groups.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    let mut summary = Vec::new();
    for (omega, group) in keyed {
        let col = |f: fn(&PointRecord) -> f64| group.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (speed_mean, speed_hw) = mean_ci(&col(|r| r.mean_speed));
        let (emission_mean, emission_hw) = mean_ci(&col(|r| r.mean_emission));
        let (crashes_mean, crashes_hw) = mean_ci(&col(|r| r.crashes as f64));
        let dfs: Vec<f64> = group.iter().filter_map(|r| r.delta_f).collect();
        let (df_mean, df_hw) = if dfs.is_empty() {
            (None, None)
        } else {
            let (m, h) = mean_ci(&dfs);
            (Some(m), Some(h))
        };
        let mut sq = [0.0; QUANTILES];
        let mut eq = [0.0; QUANTILES];
        for r in &group {
            let p = r.point();
            for k in 0..QUANTILES {
                sq[k] += p.speed_quantiles[k] / group.len() as f64;
                eq[k] += p.emission_quantiles[k] / group.len() as f64;
            }
        }
        points.push(ParetoPoint {
            omega,
            obj_speed: speed_mean,
            obj_emission: emission_mean,
            delta_f: df_mean,
            crashes: group.iter().map(|r| r.crashes).sum(),
            speed_quantiles: sq,
            emission_quantiles: eq,
        });
        summary.push(SummaryRecord {
            omega,
            n: group.len(),
            speed_mean,
            speed_hw,
            emission_mean,
            emission_hw,
            delta_f_mean: df_mean,
            delta_f_hw: df_hw,
            crashes_mean,
            crashes_hw,
        });
    }
    (points, summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrontRecord {
    omega: f64,
    speed: f64,
    emission: f64,
    cluster: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FairnessRecord {
    omega: f64,
    delta_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BoxRecord {
    omega: f64,
    speed_q0: f64,
    speed_q1: f64,
    speed_q2: f64,
    speed_q3: f64,
    speed_q4: f64,
    emission_q0: f64,
    emission_q1: f64,
    emission_q2: f64,
    emission_q3: f64,
    emission_q4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRecord {
    step: u64,
    n: usize,
    hypervolume_mean: f64,
    hypervolume_hw: f64,
    crashes_mean: f64,
    crashes_hw: f64,
}

/// Builds the front report from `points.csv` and writes the analysis files.
pub fn run_analyze(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<FrontReport> {
    let out = &cfg.run.out_dir;
    let records: Vec<PointRecord> = read_csv(&out.join("points.csv"))?;
    let (points, summary) = aggregate(&records);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seeds[0]);
    let report = FrontReport::build(points, cfg.eval.emission_cap, cfg.eval.speed_floor, &mut rng)?;

    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_csv(&out.join("summary.csv"), &summary)?;
    let front: Vec<FrontRecord> = report
        .front
        .iter()
        .map(|&i| {
            let p = &report.points[i];
            FrontRecord {
                omega: p.omega,
                speed: p.obj_speed,
                emission: p.obj_emission,
                cluster: report.label_of(i).map_or_else(|| "none".to_string(), |l| l.to_string()),
            }
        })
        .collect();
    write_csv(&out.join("front.csv"), &front)?;
    let fairness: Vec<FairnessRecord> = report
        .points
        .iter()
        .map(|p| FairnessRecord {
            omega: p.omega,
            delta_f: p.delta_f,
        })
        .collect();
    write_csv(&out.join("fairness.csv"), &fairness)?;
    let boxes: Vec<BoxRecord> = report
        .points
        .iter()
        .map(|p| {
            let [s0, s1, s2, s3, s4] = p.speed_quantiles;
            let [e0, e1, e2, e3, e4] = p.emission_quantiles;
            BoxRecord {
                omega: p.omega,
                speed_q0: s0,
                speed_q1: s1,
                speed_q2: s2,
                speed_q3: s3,
                speed_q4: s4,
                emission_q0: e0,
                emission_q1: e1,
                emission_q2: e2,
                emission_q3: e3,
                emission_q4: e4,
            }
        })
        .collect();
    write_csv(&out.join("boxstats.csv"), &boxes)?;

    let mut curves: BTreeMap<u64, Vec<MetricsRow>> = BTreeMap::new();
    for &seed in &cfg.run.seeds {
        let path = cfg.seed_dir(seed).join("metrics.csv");
        if path.exists() {
            for row in read_csv::<MetricsRow>(&path)? {
                curves.entry(row.step).or_default().push(row);
            }
        }
    }
    if !curves.is_empty() {
        let rows: Vec<CurveRecord> = curves
            .into_iter()
            .map(|(step, rows)| {
                let (hypervolume_mean, hypervolume_hw) = mean_ci(&rows.iter().map(|r| r.hypervolume).collect::<Vec<_>>());
                let (crashes_mean, crashes_hw) = mean_ci(&rows.iter().map(|r| r.crashes as f64).collect::<Vec<_>>());
                CurveRecord {
                    step,
                    n: rows.len(),
                    hypervolume_mean,
                    hypervolume_hw,
                    crashes_mean,
                    crashes_hw,
                }
            })
            .collect();
        write_csv(&out.join("curves.csv"), &rows)?;
    }

    writeln!(
        log,
        "{} points, {} on the front, hypervolume {:.4}",
        report.points.len(),
        report.front.len(),
        report.hypervolume
    )?;
    Ok(report)
}

/// Applies the selection rule to the saved report using the configured caps.
pub fn run_select(cfg: &ExperimentConfig) -> Result<Option<ParetoPoint>> {
    let text = fs::read_to_string(cfg.run.out_dir.join("report.json"))?;
    let report: FrontReport = serde_json::from_str(&text)?;
    let chosen = crate::pareto::select_policy(&report.points, &report.front, cfg.eval.emission_cap, cfg.eval.speed_floor);
    Ok(chosen.map(|i| report.points[i].clone()))
}
