//! Hierarchical command planning.
//!
//! A command is sent to a planner backend, which answers either with a list
//! of motion-function calls or with a list of short-horizon subtasks. A
//! command needing more than [`LONG_HORIZON_THRESHOLD`] functions is a
//! first-layer task: it is split into subtasks, each subtask is planned into
//! functions, and the function lists are concatenated in subtask order.
//! Anything else is a second-layer task planned directly.
//!
//! Backend responses are line oriented:
//!
//! ```text
//! move_to(cup)              SUBTASKS:
//! grasp_default(cup)        catch the wiper
//! lift(cup)                 wipe the cabinet top
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::executor::MotionFunction;
use crate::geometry::Pose2;
use crate::perception::ObjectRegistry;
use crate::ConfigError;

/// Plans with more functions than this are first-layer (long-horizon) tasks.
pub const LONG_HORIZON_THRESHOLD: usize = 10;

const SUBTASK_HEADER: &str = "SUBTASKS:";

/// Names a corrupted response may use in place of a catalog function.
const WRONG_NAMES: [&str; 5] = ["grab", "pick_up", "grasp", "move", "wipe_all"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("command is empty")]
    EmptyCommand,
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("malformed response for `{command}`: {reason}")]
    Malformed { command: String, reason: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("plan structure: {0}")]
    Structure(String),
    #[error("`{0}` is not executable in this environment: object not perceived")]
    Unexecutable(String),
}

impl PlanError {
    fn malformed(command: &str, reason: impl Into<String>) -> Self {
        Self::Malformed {
            command: command.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFunctionCall {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub literal_args: Vec<f64>,
}

impl MotionFunctionCall {
    pub fn new(name: &str, target: Option<&str>, literal_args: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            target_label: target.map(str::to_string),
            literal_args,
        }
    }

    pub fn function(&self) -> Option<MotionFunction> {
        MotionFunction::from_name(&self.name)
    }

    /// Catalog membership and the target requirement of object-directed functions.
    pub fn validate(&self) -> Result<MotionFunction, String> {
        let f = self
            .function()
            .ok_or_else(|| format!("unknown motion function `{}`", self.name))?;
        if f.requires_target() && self.target_label.is_none() {
            return Err(format!("`{}` is missing its target", self.name));
        }
        Ok(f)
    }
}

impl fmt::Display for MotionFunctionCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        let mut parts: Vec<String> = self.target_label.iter().cloned().collect();
        parts.extend(self.literal_args.iter().map(|a| a.to_string()));
        write!(f, "{})", parts.join(", "))
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses `name(target, 0.1, 0.2)`. The target, if present, is the first
/// argument; all remaining arguments must be numeric.
pub fn parse_call(line: &str) -> Result<MotionFunctionCall, String> {
    let line = line.trim();
    let open = line
        .find('(')
        .ok_or_else(|| format!("`{line}` is not a function call"))?;
    if !line.ends_with(')') {
        return Err(format!("`{line}` is missing `)`"));
    }
    let name = line[..open].trim();
    if !is_identifier(name) {
        return Err(format!("`{name}` is not a function name"));
    }
    let inner = line[open + 1..line.len() - 1].trim();
    let mut target = None;
    let mut literal_args = Vec::new();
    if !inner.is_empty() {
        for (i, arg) in inner.split(',').map(str::trim).enumerate() {
            if let Ok(v) = arg.parse::<f64>() {
                if !v.is_finite() {
                    return Err(format!("argument `{arg}` is not finite"));
                }
                literal_args.push(v);
            } else if i == 0 && is_identifier(arg) {
                target = Some(arg.to_string());
            } else {
                return Err(format!("cannot parse argument `{arg}`"));
            }
        }
    }
    Ok(MotionFunctionCall {
        name: name.to_string(),
        target_label: target,
        literal_args,
    })
}

/// A parsed backend answer.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendResponse {
    Functions(Vec<MotionFunctionCall>),
    Subtasks(Vec<String>),
}

/// Parses and validates a raw response. Any unparseable line, unknown
/// function or missing target makes the whole response malformed.
pub fn parse_response(command: &str, text: &str) -> Result<BackendResponse, PlanError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();
    let first = *lines
        .peek()
        .ok_or_else(|| PlanError::malformed(command, "empty response"))?;
    if first.eq_ignore_ascii_case(SUBTASK_HEADER) {
        lines.next();
        let subtasks: Vec<String> = lines.map(normalize_command).collect();
        if subtasks.is_empty() {
            return Err(PlanError::malformed(
                command,
                "subtask header without subtasks",
            ));
        }
        return Ok(BackendResponse::Subtasks(subtasks));
    }
    let calls = lines
        .map(|l| {
            let call = parse_call(l).map_err(|e| PlanError::malformed(command, e))?;
            call.validate()
                .map_err(|e| PlanError::malformed(command, e))?;
            Ok(call)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BackendResponse::Functions(calls))
}

/// Renders a response in the wire format [`parse_response`] reads.
pub fn format_response(response: &BackendResponse) -> String {
    match response {
        BackendResponse::Functions(calls) => calls.iter().map(|c| format!("{c}\n")).collect(),
        BackendResponse::Subtasks(tasks) => {
            let mut out = format!("{SUBTASK_HEADER}\n");
            for t in tasks {
                out.push_str(t);
                out.push('\n');
            }
            out
        }
    }
}

/// Lowercase, trimmed, single-spaced.
pub fn normalize_command(command: &str) -> String {
    command
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    /// Ask for the functions (or subtasks) that accomplish the command.
    Functions,
    /// Ask for a split into short-horizon subtasks.
    Decompose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubEntry {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtasks: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct StubTableFile {
    tasks: Vec<StubEntry>,
}

/// Exact-match command table backing the stub backend.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StubTable {
    entries: HashMap<String, StubEntry>,
}

impl StubTable {
    pub fn new(entries: Vec<StubEntry>) -> Result<Self, ConfigError> {
        let mut map = HashMap::new();
        for mut e in entries {
            let key = normalize_command(&e.command);
            if key.is_empty() {
                return Err(ConfigError::Invalid(
                    "stub table entry with empty command".into(),
                ));
            }
            if e.functions.is_none() && e.subtasks.is_none() {
                return Err(ConfigError::Invalid(format!(
                    "`{key}` has neither functions nor subtasks"
                )));
            }
            if let Some(funcs) = &e.functions {
                for f in funcs {
                    parse_call(f).map_err(|err| ConfigError::Invalid(format!("`{key}`: {err}")))?;
                }
            }
            e.command = key.clone();
            if map.insert(key.clone(), e).is_some() {
                return Err(ConfigError::Invalid(format!(
                    "duplicate stub pattern `{key}`"
                )));
            }
        }
        Ok(Self { entries: map })
    }

    /// Parses a table from TOML or JSON text (`{"tasks": [...]}`).
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: StubTableFile = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        Self::new(file.tasks)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    /// The desk task table shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/stub_table.toml")).expect("bundled stub table is valid")
    }

    pub fn get(&self, command: &str) -> Option<&StubEntry> {
        self.entries.get(&normalize_command(command))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_toml(&self) -> String {
        let mut tasks: Vec<StubEntry> = self.entries.values().cloned().collect();
        tasks.sort_by(|a, b| a.command.cmp(&b.command));
        toml::to_string(&StubTableFile { tasks }).expect("table serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubBackend {
    pub table: StubTable,
    pub error_probability: f64,
    pub seed: u64,
}

impl StubBackend {
    pub fn new(table: StubTable, error_probability: f64, seed: u64) -> Result<Self, ConfigError> {
        if !(0.0..=1.0).contains(&error_probability) {
            return Err(ConfigError::Invalid(format!(
                "error_probability must lie in [0, 1], got {error_probability}"
            )));
        }
        Ok(Self {
            table,
            error_probability,
            seed,
        })
    }

    fn respond(&self, command: &str, kind: RequestKind) -> Result<String, PlanError> {
        let entry = self
            .table
            .get(command)
            .ok_or_else(|| PlanError::UnknownCommand(normalize_command(command)))?;
        let body = match (kind, &entry.functions, &entry.subtasks) {
            (RequestKind::Decompose, _, Some(subtasks))
            | (RequestKind::Functions, None, Some(subtasks)) => {
                let mut out = format!("{SUBTASK_HEADER}\n");
                for s in subtasks {
                    out.push_str(s);
                    out.push('\n');
                }
                out
            }
            (_, Some(funcs), _) => funcs.iter().map(|f| format!("{f}\n")).collect(),
            (_, None, None) => unreachable!("validated on construction"),
        };
        Ok(body)
    }

    /// Rewrites a clean response into an incorrect one: a catalog name is
    /// swapped for a wrong one, or an object-directed call loses its target.
    pub fn corrupt<R: Rng + ?Sized>(clean: &str, rng: &mut R) -> String {
        let lines: Vec<&str> = clean.lines().filter(|l| !l.trim().is_empty()).collect();
        let calls: Vec<MotionFunctionCall> =
            lines.iter().filter_map(|l| parse_call(l).ok()).collect();
        let wrong = WRONG_NAMES[rng.random_range(0..WRONG_NAMES.len())];
        if calls.is_empty() || calls.len() != lines.len() {
            // Subtask lists come back as a wrong function call instead.
            return format!("{wrong}()\n");
        }
        let mut calls = calls;
        let idx = rng.random_range(0..calls.len());
        let can_drop = calls[idx]
            .function()
            .is_some_and(MotionFunction::requires_target);
        if can_drop && rng.random_bool(0.5) {
            calls[idx].target_label = None;
        } else {
            calls[idx].name = wrong.to_string();
        }
        format_response(&BackendResponse::Functions(calls))
    }
}

pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "List the motion functions, one per line as function(target), \
that accomplish: {command}";
pub const DEFAULT_DECOMPOSE_TEMPLATE: &str =
    "Split into short-horizon subtasks. Answer `SUBTASKS:` \
followed by one subtask per line: {command}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteBackend {
    pub endpoint: String,
    #[serde(default = "default_prompt")]
    pub prompt_template: String,
    #[serde(default = "default_decompose")]
    pub decompose_template: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_prompt() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

fn default_decompose() -> String {
    DEFAULT_DECOMPOSE_TEMPLATE.to_string()
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: String,
    command: &'a str,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            prompt_template: default_prompt(),
            decompose_template: default_decompose(),
            timeout_ms: default_timeout_ms(),
        }
    }

    fn respond(&self, command: &str, kind: RequestKind) -> Result<String, PlanError> {
        let template = match kind {
            RequestKind::Functions => &self.prompt_template,
            RequestKind::Decompose => &self.decompose_template,
        };
        let body = RemoteRequest {
            prompt: template.replace("{command}", command),
            command,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(self.timeout_ms)))
            .http_status_as_error(true)
            .build()
            .into();
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| PlanError::BackendUnavailable(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| PlanError::BackendUnavailable(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanBackend {
    Stub(StubBackend),
    Remote(RemoteBackend),
}

impl PlanBackend {
    /// Raw response text for one request.
    pub fn complete(&self, command: &str, kind: RequestKind) -> Result<String, PlanError> {
        match self {
            Self::Stub(s) => s.respond(command, kind),
            Self::Remote(r) => r.respond(command, kind),
        }
    }

    /// Probability that a plan built with this backend is deliberately corrupted.
    pub fn error_probability(&self) -> f64 {
        match self {
            Self::Stub(s) => s.error_probability,
            Self::Remote(_) => 0.0,
        }
    }
}

/// One backend request. The stub corrupts the response with its error
/// probability.
pub fn request_functions<R: Rng + ?Sized>(
    command: &str,
    backend: &PlanBackend,
    rng: &mut R,
) -> Result<BackendResponse, PlanError> {
    if command.trim().is_empty() {
        return Err(PlanError::EmptyCommand);
    }
    let mut text = backend.complete(command, RequestKind::Functions)?;
    if rng.random_bool(backend.error_probability()) {
        text = StubBackend::corrupt(&text, rng);
    }
    parse_response(command, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    First,
    Second,
}

impl Layer {
    pub fn classify(total_functions: usize) -> Self {
        if total_functions > LONG_HORIZON_THRESHOLD {
            Layer::First
        } else {
            Layer::Second
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    /// `None` for the single implicit subtask of a second-layer plan.
    pub text: Option<String>,
    pub functions: Vec<MotionFunctionCall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub id: String,
    pub command: String,
    pub layer: Layer,
    pub subtasks: Vec<Subtask>,
    pub total_functions: usize,
}

impl TaskPlan {
    fn from_subtasks(command: &str, subtasks: Vec<Subtask>) -> Self {
        let total_functions = subtasks.iter().map(|s| s.functions.len()).sum();
        let layer = Layer::classify(total_functions);
        let subtasks = if layer == Layer::Second
            && (subtasks.len() > 1 || subtasks.first().is_some_and(|s| s.text.is_some()))
        {
            vec![Subtask {
                text: None,
                functions: subtasks.into_iter().flat_map(|s| s.functions).collect(),
            }]
        } else {
            subtasks
        };
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        for s in &subtasks {
            hasher.update([0u8]);
            hasher.update(s.text.as_deref().unwrap_or("").as_bytes());
            for f in &s.functions {
                hasher.update([1u8]);
                hasher.update(f.to_string().as_bytes());
            }
        }
        let digest = hasher.finalize();
        let id = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        Self {
            id,
            command: command.to_string(),
            layer,
            subtasks,
            total_functions,
        }
    }

    /// Functions in execution order.
    pub fn flattened(&self) -> impl Iterator<Item = &MotionFunctionCall> {
        self.subtasks.iter().flat_map(|s| s.functions.iter())
    }

    /// Checks the layer law and non-empty subtasks.
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.subtasks.is_empty() || self.subtasks.iter().any(|s| s.functions.is_empty()) {
            return Err(PlanError::Structure("empty subtask".into()));
        }
        let total: usize = self.subtasks.iter().map(|s| s.functions.len()).sum();
        if total != self.total_functions {
            return Err(PlanError::Structure(
                "total_functions does not match subtasks".into(),
            ));
        }
        if self.layer != Layer::classify(total) {
            return Err(PlanError::Structure(format!(
                "{total} functions cannot be a {:?}-layer plan",
                self.layer
            )));
        }
        if self.layer == Layer::Second
            && (self.subtasks.len() != 1 || self.subtasks[0].text.is_some())
        {
            return Err(PlanError::Structure(
                "second-layer plans have one unnamed subtask".into(),
            ));
        }
        Ok(())
    }
}

fn functions_for<R: Rng + ?Sized>(
    subtask: &str,
    backend: &PlanBackend,
    corrupt: bool,
    rng: &mut R,
) -> Result<Vec<MotionFunctionCall>, PlanError> {
    let mut text = backend.complete(subtask, RequestKind::Functions)?;
    if corrupt {
        text = StubBackend::corrupt(&text, rng);
    }
    match parse_response(subtask, &text)? {
        BackendResponse::Functions(f) if f.is_empty() => {
            Err(PlanError::malformed(subtask, "no functions"))
        }
        BackendResponse::Functions(f) => Ok(f),
        BackendResponse::Subtasks(_) => Err(PlanError::Structure(format!(
            "subtask `{subtask}` was decomposed again; only one level is allowed"
        ))),
    }
}

/// Builds a validated plan. A plan is corrupted as a whole with the
/// backend's error probability: one of its function-list responses is
/// replaced by an incorrect one, so the plan fails with that probability
/// however many requests it needs.
pub fn build_plan<R: Rng + ?Sized>(
    command: &str,
    backend: &PlanBackend,
    rng: &mut R,
) -> Result<TaskPlan, PlanError> {
    let command = normalize_command(command);
    if command.is_empty() {
        return Err(PlanError::EmptyCommand);
    }
    let corrupt_plan = rng.random_bool(backend.error_probability());

    let top = backend.complete(&command, RequestKind::Functions)?;
    let subtasks = match parse_response(&command, &top)? {
        BackendResponse::Functions(functions) if functions.len() <= LONG_HORIZON_THRESHOLD => {
            let functions = if corrupt_plan {
                match parse_response(&command, &StubBackend::corrupt(&top, rng))? {
                    BackendResponse::Functions(f) => f,
                    BackendResponse::Subtasks(_) => {
                        unreachable!("corruption yields function calls")
                    }
                }
            } else {
                functions
            };
            if functions.is_empty() {
                return Err(PlanError::malformed(&command, "no functions"));
            }
            return Ok(TaskPlan::from_subtasks(
                &command,
                vec![Subtask {
                    text: None,
                    functions,
                }],
            ));
        }
        BackendResponse::Functions(_) => {
            let text = backend.complete(&command, RequestKind::Decompose)?;
            match parse_response(&command, &text)? {
                BackendResponse::Subtasks(s) => s,
                BackendResponse::Functions(f) => {
                    return Err(PlanError::Structure(format!(
                        "`{command}` needs {} functions but the backend did not decompose it",
                        f.len()
                    )))
                }
            }
        }
        BackendResponse::Subtasks(s) => s,
    };

    let victim = corrupt_plan.then(|| rng.random_range(0..subtasks.len()));
    let mut planned = Vec::with_capacity(subtasks.len());
    for (i, text) in subtasks.into_iter().enumerate() {
        let functions = functions_for(&text, backend, victim == Some(i), rng)?;
        planned.push(Subtask {
            text: Some(text),
            functions,
        });
    }
    let plan = TaskPlan::from_subtasks(&command, planned);
    plan.validate()?;
    Ok(plan)
}

/// A plan step bound to a perceived pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundStep {
    pub call: MotionFunctionCall,
    pub target_pose: Option<Pose2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub plan_id: String,
    pub steps: Vec<BoundStep>,
}

/// Binds every targeted call to the registry pose of its label, keeping
/// the plan's function order.
pub fn assemble_program(plan: &TaskPlan, registry: &ObjectRegistry) -> Result<Program, PlanError> {
    let steps = plan
        .flattened()
        .map(|call| {
            let target_pose = match &call.target_label {
                Some(label) => Some(
                    registry
                        .lookup(label)
                        .ok_or_else(|| PlanError::Unexecutable(label.clone()))?,
                ),
                None => None,
            };
            Ok(BoundStep {
                call: call.clone(),
                target_pose,
            })
        })
        .collect::<Result<Vec<_>, PlanError>>()?;
    Ok(Program {
        plan_id: plan.id.clone(),
        steps,
    })
}
