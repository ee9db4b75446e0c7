//! Repeated-trial experiments and SR / Exec / FSB aggregation.
//!
//! Each trial starts from a fresh world, runs one perception cycle, plans the
//! command, binds the plan to the perceived poses and executes it. Planning
//! and binding failures count against executability, failed motions against
//! feasibility. FSB is measured over executed trials only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::OverrideRegistry;
use crate::executor::{run_program, GoalPredicate, RobotConfig, WorldState};
use crate::perception::{
    detect, filter_confident, load_scene, DetectorConfig, ObjectRegistry, SceneObject,
};
use crate::planner::{
    assemble_program, build_plan, PlanBackend, RemoteBackend, StubBackend, StubTable,
};
use crate::ConfigError;

const PERCEPTION_STREAM: u64 = 1;
const PLANNER_STREAM: u64 = 2;
const PERCEPTION_PERIOD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("a report needs at least one row")]
    EmptyReport,
    #[error("an experiment needs at least one trial")]
    NoTrials,
    #[error("report csv: {0}")]
    Csv(String),
}

/// Planner backend as written in an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Stub {
        /// Table file; the bundled desk table when absent.
        #[serde(default)]
        table: Option<PathBuf>,
        #[serde(default)]
        error_probability: f64,
    },
    Remote(RemoteBackend),
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Stub {
            table: None,
            error_probability: 0.0,
        }
    }
}

impl BackendConfig {
    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<PlanBackend, ConfigError> {
        match self {
            Self::Stub {
                table,
                error_probability,
            } => {
                let table = match table {
                    Some(p) => StubTable::load(&resolve(base_dir, p))?,
                    None => StubTable::builtin(),
                };
                Ok(PlanBackend::Stub(StubBackend::new(
                    table,
                    *error_probability,
                    seed,
                )?))
            }
            Self::Remote(r) => Ok(PlanBackend::Remote(r.clone())),
        }
    }
}

fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// One entry of an experiment suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Row label; the command when absent.
    #[serde(default)]
    pub task: Option<String>,
    pub command: String,
    /// Scene file; the bundled desk scene when absent.
    #[serde(default)]
    pub scene: Option<PathBuf>,
    /// Goal predicate; inferred from the command when absent.
    #[serde(default)]
    pub goal: Option<GoalPredicate>,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub robot: RobotConfig,
    #[serde(default = "one")]
    pub perception_cycles: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub experiments: Vec<ExperimentSpec>,
}

impl Suite {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    /// Loads scenes and tables, resolving relative paths against `base_dir`.
    pub fn prepare(&self, base_dir: &Path) -> Result<Vec<Experiment>, ConfigError> {
        self.experiments
            .iter()
            .map(|e| Experiment::prepare(e, base_dir))
            .collect()
    }
}

pub fn bundled_scene() -> Vec<SceneObject> {
    crate::perception::parse_scene(include_str!("../data/desk_scene.json"))
        .expect("bundled scene is valid")
}

/// A ready-to-run experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: String,
    pub command: String,
    pub scene: Vec<SceneObject>,
    pub goal: GoalPredicate,
    pub n: usize,
    pub seed: u64,
    pub backend: PlanBackend,
    pub detector: DetectorConfig,
    pub robot: RobotConfig,
    pub perception_cycles: usize,
}

impl Experiment {
    pub fn prepare(spec: &ExperimentSpec, base_dir: &Path) -> Result<Self, ConfigError> {
        spec.detector.validate()?;
        let scene = match &spec.scene {
            Some(p) => load_scene(&resolve(base_dir, p))?,
            None => bundled_scene(),
        };
        Ok(Self {
            task: spec.task.clone().unwrap_or_else(|| spec.command.clone()),
            command: spec.command.clone(),
            scene,
            goal: spec
                .goal
                .clone()
                .unwrap_or_else(|| GoalPredicate::infer(&spec.command)),
            n: spec.n,
            seed: spec.seed,
            backend: spec.backend.build(base_dir, spec.seed)?,
            detector: spec.detector.clone(),
            robot: spec.robot.clone(),
            perception_cycles: spec.perception_cycles.max(1),
        })
    }

    /// Experiment on the bundled scene and table with a noiseless detector.
    pub fn desk(
        command: &str,
        n: usize,
        seed: u64,
        error_probability: f64,
    ) -> Result<Self, ConfigError> {
        let spec = ExperimentSpec {
            task: None,
            command: command.to_string(),
            scene: None,
            goal: None,
            n,
            seed,
            backend: BackendConfig::Stub {
                table: None,
                error_probability,
            },
            detector: DetectorConfig::default(),
            robot: RobotConfig::default(),
            perception_cycles: 1,
        };
        Self::prepare(&spec, Path::new("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub executed: bool,
    pub feasible: bool,
    pub success: bool,
    pub functions_used: usize,
    pub seed: u64,
}

/// One full trial: perceive, plan, bind, execute.
pub fn run_trial(experiment: &Experiment, seed: u64, overrides: &OverrideRegistry) -> TrialOutcome {
    let mut world = WorldState::new(&experiment.scene, &experiment.robot);

    let mut perception_rng = ChaCha8Rng::seed_from_u64(seed ^ experiment.detector.seed);
    perception_rng.set_stream(PERCEPTION_STREAM);
    let mut registry = ObjectRegistry::new();
    for cycle in 0..experiment.perception_cycles {
        let t = cycle as f64 * PERCEPTION_PERIOD;
        let detections = detect(&world, &experiment.detector, t, &mut perception_rng);
        registry.ingest(&filter_confident(
            detections,
            experiment.detector.confidence_threshold,
        ));
    }

    let mut planner_rng = ChaCha8Rng::seed_from_u64(seed);
    planner_rng.set_stream(PLANNER_STREAM);
    let failed = TrialOutcome {
        executed: false,
        feasible: false,
        success: false,
        functions_used: 0,
        seed,
    };
    let Ok(plan) = build_plan(&experiment.command, &experiment.backend, &mut planner_rng) else {
        return failed;
    };
    let Ok(program) = assemble_program(&plan, &registry) else {
        return failed;
    };
    let report = run_program(&mut world, &program, overrides, &experiment.goal);
    TrialOutcome {
        executed: report.executed,
        feasible: report.feasible,
        success: report.success,
        functions_used: report.functions_used,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "Task")]
    pub task: String,
    #[serde(rename = "Num")]
    pub num: usize,
    #[serde(rename = "Fns")]
    pub fns: usize,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "Exec")]
    pub exec: f64,
    #[serde(rename = "FSB")]
    pub fsb: f64,
}

/// Smallest most frequent value.
fn mode(values: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

pub fn aggregate(task: &str, outcomes: &[TrialOutcome]) -> Result<MetricsRow, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::NoTrials);
    }
    let num = outcomes.len();
    let executed = outcomes.iter().filter(|o| o.executed).count();
    let feasible = outcomes.iter().filter(|o| o.executed && o.feasible).count();
    let success = outcomes.iter().filter(|o| o.success).count();
    let fns = mode(
        outcomes
            .iter()
            .filter(|o| o.success)
            .map(|o| o.functions_used),
    )
    .or_else(|| mode(outcomes.iter().map(|o| o.functions_used)))
    .unwrap_or(0);
    Ok(MetricsRow {
        task: task.to_string(),
        num,
        fns,
        sr: success as f64 / num as f64,
        exec: executed as f64 / num as f64,
        fsb: if executed == 0 {
            0.0
        } else {
            feasible as f64 / executed as f64
        },
    })
}

/// Trials `base_seed .. base_seed + n` against the current overrides.
pub fn run_trials(
    experiment: &Experiment,
    n: usize,
    base_seed: u64,
    overrides: &OverrideRegistry,
) -> Result<MetricsRow, MetricsError> {
    if n == 0 {
        return Err(MetricsError::NoTrials);
    }
    let outcomes: Vec<TrialOutcome> = (0..n as u64)
        .map(|i| run_trial(experiment, base_seed.wrapping_add(i), overrides))
        .collect();
    aggregate(&experiment.task, &outcomes)
}

/// Runs every experiment with its own trial count and seed.
pub fn run_suite(
    experiments: &[Experiment],
    overrides: &OverrideRegistry,
) -> Result<Vec<MetricsRow>, MetricsError> {
    experiments
        .iter()
        .map(|e| run_trials(e, e.n, e.seed, overrides))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "table" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

const COLUMNS: [&str; 6] = ["Task", "Num", "Fns", "SR", "Exec", "FSB"];

pub fn render_report(rows: &[MetricsRow], format: ReportFormat) -> Result<String, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyReport);
    }
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.num.to_string(),
                r.fns.to_string(),
                format!("{:.2}", r.sr),
                format!("{:.2}", r.exec),
                format!("{:.2}", r.fsb),
            ]
        })
        .collect();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS)
                .map_err(|e| MetricsError::Csv(e.to_string()))?;
            for row in &cells {
                w.write_record(row)
                    .map_err(|e| MetricsError::Csv(e.to_string()))?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| MetricsError::Csv(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv is utf-8"))
        }
        ReportFormat::Text => {
            let mut widths = COLUMNS.map(str::len);
            for row in &cells {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.chars().count());
                }
            }
            let mut out = String::new();
            let line = |out: &mut String, row: &[String]| {
                let mut parts = Vec::with_capacity(6);
                for (i, (c, w)) in row.iter().zip(widths).enumerate() {
                    parts.push(if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    });
                }
                let _ = writeln!(out, "{}", parts.join("  ").trim_end());
            };
            line(&mut out, &COLUMNS.map(String::from));
            let _ = writeln!(
                out,
                "{}",
                widths
                    .iter()
                    .map(|w| "-".repeat(*w))
                    .collect::<Vec<_>>()
                    .join("  ")
            );
            for row in &cells {
                line(&mut out, row);
            }
            Ok(out)
        }
    }
}

/// Reads rows back from [`render_report`] CSV output.
pub fn parse_report_csv(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| MetricsError::Csv(e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(MetricsError::Csv(format!("unexpected header {header:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| MetricsError::Csv(e.to_string())))
        .collect()
}
