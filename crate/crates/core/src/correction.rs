//! Demonstration-based correction.
//!
//! An operator records a trajectory for a (motion function, object shape)
//! pair that failed. The trajectory is fitted as a DMP and stored as an
//! override; the executor then replays it, goal-shifted to wherever the next
//! object of that shape sits, instead of running the default motion.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmp::{
    fit_dmp, DmpConfig, DmpError, DmpModel, Sample, Trajectory, DEFAULT_STEPS_PER_TAU,
};
use crate::executor::{
    grasp_point, ExecutionReport, MotionFunction, ObjectShape, ShapeKind, StepStatus,
};
use crate::geometry::Pose2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error("a session for {0} is already recording")]
    SessionConflict(OverrideKey),
    #[error("no recorded failure of `{0}` to correct")]
    NoFailure(String),
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("session {0} is closed")]
    SessionClosed(u64),
    #[error("sample at t = {t} s does not follow t = {last} s")]
    RejectedSample { t: f64, last: f64 },
    #[error("sample is not finite")]
    NonFiniteSample,
    #[error("insufficient data: need at least 3 samples, got {0}")]
    InsufficientData(usize),
    #[error("fit failed: {0}")]
    FitFailed(DmpError),
    #[error("override replay failed: {0}")]
    OverrideFailed(DmpError),
    #[error("override store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OverrideKey {
    pub function: MotionFunction,
    pub shape: ShapeKind,
}

impl std::fmt::Display for OverrideKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} x {}", self.function, self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperAction {
    Open,
    Close,
}

/// Gripper event at a fraction of the demonstrated duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub phase: f64,
    pub action: GripperAction,
}

/// Gripper event at a replay time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t: f64,
    pub action: GripperAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionContext {
    pub function: MotionFunction,
    pub target_label: String,
    pub shape: ShapeKind,
}

impl CorrectionContext {
    pub fn key(&self) -> OverrideKey {
        OverrideKey {
            function: self.function,
            shape: self.shape,
        }
    }
}

/// Why a correction session is being opened.
#[derive(Debug, Clone, Copy)]
pub enum CorrectionTrigger<'a> {
    /// A failed execution; it must contain an infeasible step of the context's function.
    Failure(&'a ExecutionReport),
    /// The operator asked for a correction explicitly.
    OperatorRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Recording,
    Finalized,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleopSession {
    pub id: u64,
    pub context: CorrectionContext,
    pub samples: Vec<Sample>,
    pub gripper_events: Vec<TimedEvent>,
    pub state: SessionState,
}

impl TeleopSession {
    /// Appends a planar sample; timestamps must strictly increase.
    pub fn append_sample(
        &mut self,
        pose: (f64, f64),
        t: f64,
        gripper: Option<GripperAction>,
    ) -> Result<(), CorrectionError> {
        if self.state != SessionState::Recording {
            return Err(CorrectionError::SessionClosed(self.id));
        }
        if !(t.is_finite() && pose.0.is_finite() && pose.1.is_finite()) {
            return Err(CorrectionError::NonFiniteSample);
        }
        if let Some(last) = self.samples.last() {
            if t <= last.t {
                return Err(CorrectionError::RejectedSample { t, last: last.t });
            }
        }
        self.samples.push(Sample::new(t, vec![pose.0, pose.1]));
        if let Some(action) = gripper {
            self.gripper_events.push(TimedEvent { t, action });
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// A fitted demonstration registered for one key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpOverride {
    pub model: DmpModel,
    pub gripper_events: Vec<PhaseEvent>,
}

/// Motion produced when an override applies to a step.
#[derive(Debug, Clone, PartialEq)]
pub struct OverrideMotion {
    pub path: Trajectory,
    pub gripper_events: Vec<TimedEvent>,
}

/// Shared override table. Readers get the whole entry for a key, never a
/// partially replaced one.
#[derive(Debug, Clone, Default)]
pub struct OverrideRegistry {
    inner: Arc<RwLock<HashMap<OverrideKey, Arc<DmpOverride>>>>,
}

#[derive(Serialize, Deserialize)]
struct StoredOverride {
    function: MotionFunction,
    shape: ShapeKind,
    model: serde_json::Value,
    gripper_events: Vec<PhaseEvent>,
}

impl OverrideRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `entry`, replacing any previous override for the key.
    pub fn insert(&self, key: OverrideKey, entry: DmpOverride) {
        self.inner
            .write()
            .expect("override lock")
            .insert(key, Arc::new(entry));
    }

    pub fn get(&self, key: &OverrideKey) -> Option<Arc<DmpOverride>> {
        self.inner.read().expect("override lock").get(key).cloned()
    }

    pub fn keys(&self) -> Vec<OverrideKey> {
        let mut keys: Vec<_> = self
            .inner
            .read()
            .expect("override lock")
            .keys()
            .copied()
            .collect();
        keys.sort();
        keys
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("override lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.write().expect("override lock").clear();
    }

    /// Independent copy of the current table.
    pub fn snapshot(&self) -> Self {
        let map = self.inner.read().expect("override lock").clone();
        Self {
            inner: Arc::new(RwLock::new(map)),
        }
    }

    /// Replays the override keyed by `(function, shape.kind)`, if any, from
    /// the current effector pose to the grasp point of `target_pose`.
    pub fn resolve_override(
        &self,
        function: MotionFunction,
        shape: &ObjectShape,
        current_pose: &Pose2,
        target_pose: &Pose2,
    ) -> Option<Result<OverrideMotion, CorrectionError>> {
        let entry = self.get(&OverrideKey {
            function,
            shape: shape.kind,
        })?;
        Some(replay(&entry, shape, current_pose, target_pose))
    }

    pub fn to_json(&self) -> String {
        let map = self.inner.read().expect("override lock");
        let mut stored: Vec<StoredOverride> = map
            .iter()
            .map(|(k, v)| StoredOverride {
                function: k.function,
                shape: k.shape,
                model: serde_json::from_str(&v.model.to_json()).expect("model json"),
                gripper_events: v.gripper_events.clone(),
            })
            .collect();
        stored.sort_by_key(|s| (s.function, s.shape));
        serde_json::to_string_pretty(&stored).expect("overrides serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, CorrectionError> {
        let stored: Vec<StoredOverride> =
            serde_json::from_str(text).map_err(|e| CorrectionError::Store(e.to_string()))?;
        let registry = Self::new();
        for s in stored {
            let model = DmpModel::from_json(&s.model.to_string())
                .map_err(|e| CorrectionError::Store(e.to_string()))?;
            registry.insert(
                OverrideKey {
                    function: s.function,
                    shape: s.shape,
                },
                DmpOverride {
                    model,
                    gripper_events: s.gripper_events,
                },
            );
        }
        Ok(registry)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorrectionError> {
        std::fs::write(path, self.to_json()).map_err(|e| CorrectionError::Store(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CorrectionError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CorrectionError::Store(e.to_string()))?;
        Self::from_json(&text)
    }
}

fn replay(
    entry: &DmpOverride,
    shape: &ObjectShape,
    current_pose: &Pose2,
    target_pose: &Pose2,
) -> Result<OverrideMotion, CorrectionError> {
    let model = &entry.model;
    let goal = grasp_point(shape, target_pose);
    let tau = model.tau;
    let path = model
        .rollout(
            &[current_pose.x, current_pose.y],
            &[goal.x, goal.y],
            tau,
            tau / DEFAULT_STEPS_PER_TAU,
        )
        .map_err(CorrectionError::OverrideFailed)?;
    let gripper_events = entry
        .gripper_events
        .iter()
        .map(|e| TimedEvent {
            t: e.phase * tau,
            action: e.action,
        })
        .collect();
    Ok(OverrideMotion {
        path,
        gripper_events,
    })
}

/// Open recording sessions, at most one per override key.
#[derive(Debug, Default)]
pub struct CorrectionLoop {
    sessions: BTreeMap<u64, TeleopSession>,
    next_id: u64,
}

impl CorrectionLoop {
    pub fn new() -> Self {
        Self {
            sessions: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn begin_session(
        &mut self,
        context: CorrectionContext,
        trigger: CorrectionTrigger<'_>,
    ) -> Result<u64, CorrectionError> {
        if let CorrectionTrigger::Failure(report) = trigger {
            let failed = report.steps.iter().any(|s| {
                s.status == StepStatus::Infeasible && s.function == context.function.name()
            });
            if !failed {
                return Err(CorrectionError::NoFailure(
                    context.function.name().to_string(),
                ));
            }
        }
        let key = context.key();
        if self
            .sessions
            .values()
            .any(|s| s.state == SessionState::Recording && s.context.key() == key)
        {
            return Err(CorrectionError::SessionConflict(key));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.sessions.insert(
            id,
            TeleopSession {
                id,
                context,
                samples: Vec::new(),
                gripper_events: Vec::new(),
                state: SessionState::Recording,
            },
        );
        Ok(id)
    }

    pub fn session(&self, id: u64) -> Option<&TeleopSession> {
        self.sessions.get(&id)
    }

    pub fn append_sample(
        &mut self,
        id: u64,
        pose: (f64, f64),
        t: f64,
        gripper: Option<GripperAction>,
    ) -> Result<(), CorrectionError> {
        self.sessions
            .get_mut(&id)
            .ok_or(CorrectionError::UnknownSession(id))?
            .append_sample(pose, t, gripper)
    }

    pub fn abort(&mut self, id: u64) -> Result<(), CorrectionError> {
        let s = self
            .sessions
            .get_mut(&id)
            .ok_or(CorrectionError::UnknownSession(id))?;
        if s.state != SessionState::Recording {
            return Err(CorrectionError::SessionClosed(id));
        }
        s.state = SessionState::Aborted;
        Ok(())
    }

    /// Fits the recorded demonstration and registers it under the session's
    /// key. A session with too few samples stays open; a failed fit aborts it
    /// and leaves the registry untouched.
    pub fn finalize_and_fit(
        &mut self,
        id: u64,
        config: &DmpConfig,
        registry: &OverrideRegistry,
    ) -> Result<DmpModel, CorrectionError> {
        let session = self
            .sessions
            .get_mut(&id)
            .ok_or(CorrectionError::UnknownSession(id))?;
        if session.state != SessionState::Recording {
            return Err(CorrectionError::SessionClosed(id));
        }
        if session.samples.len() < 3 {
            return Err(CorrectionError::InsufficientData(session.samples.len()));
        }
        match fit_session(session, config) {
            Ok(entry) => {
                let model = entry.model.clone();
                registry.insert(session.context.key(), entry);
                session.state = SessionState::Finalized;
                Ok(model)
            }
            Err(e) => {
                session.state = SessionState::Aborted;
                Err(e)
            }
        }
    }
}

fn fit_session(
    session: &TeleopSession,
    config: &DmpConfig,
) -> Result<DmpOverride, CorrectionError> {
    let demo = Trajectory::new(session.samples.clone()).map_err(CorrectionError::FitFailed)?;
    let model = fit_dmp(&demo, config).map_err(CorrectionError::FitFailed)?;
    let check = model.reproduce().map_err(CorrectionError::FitFailed)?;
    if check
        .samples()
        .iter()
        .any(|s| s.y.iter().any(|v| !v.is_finite()))
    {
        return Err(CorrectionError::FitFailed(DmpError::Divergence(model.tau)));
    }
    let t0 = session.samples[0].t;
    let tau = model.tau;
    let gripper_events = session
        .gripper_events
        .iter()
        .map(|e| PhaseEvent {
            phase: ((e.t - t0) / tau).clamp(0.0, 1.0),
            action: e.action,
        })
        .collect();
    Ok(DmpOverride {
        model,
        gripper_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bowl_ctx() -> CorrectionContext {
        CorrectionContext {
            function: MotionFunction::GraspDefault,
            target_label: "bowl".into(),
            shape: ShapeKind::Bowl,
        }
    }

    fn record_arc(cl: &mut CorrectionLoop, id: u64, n: usize, from: (f64, f64), to: (f64, f64)) {
        for k in 0..n {
            let s = k as f64 / (n - 1) as f64;
            let blend = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
            let bulge = 0.03 * (std::f64::consts::PI * s).sin();
            let x = from.0 + blend * (to.0 - from.0);
            let y = from.1 + blend * (to.1 - from.1) + bulge;
            let grip = (k == n - 1).then_some(GripperAction::Close);
            cl.append_sample(id, (x, y), 1.5 * s, grip).unwrap();
        }
    }

    #[test]
    fn session_conflict_and_explicit_request() {
        let mut cl = CorrectionLoop::new();
        cl.begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        assert!(matches!(
            cl.begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest),
            Err(CorrectionError::SessionConflict(_))
        ));
    }

    #[test]
    fn failure_trigger_requires_matching_infeasible_step() {
        let mut cl = CorrectionLoop::new();
        let report = ExecutionReport {
            steps: vec![],
            executed: true,
            feasible: true,
            success: true,
            functions_used: 0,
        };
        assert!(matches!(
            cl.begin_session(bowl_ctx(), CorrectionTrigger::Failure(&report)),
            Err(CorrectionError::NoFailure(_))
        ));
    }

    #[test]
    fn sample_ordering() {
        let mut cl = CorrectionLoop::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        cl.append_sample(id, (0.0, 0.0), 0.0, None).unwrap();
        assert!(matches!(
            cl.append_sample(id, (0.1, 0.0), 0.0, None),
            Err(CorrectionError::RejectedSample { .. })
        ));
        assert!(matches!(
            cl.append_sample(id, (0.1, 0.0), -1.0, None),
            Err(CorrectionError::RejectedSample { .. })
        ));
    }

    #[test]
    fn sixty_hertz_stream() {
        let mut cl = CorrectionLoop::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        for k in 0..200 {
            cl.append_sample(id, (0.3 + k as f64 * 1e-3, 0.0), k as f64 / 60.0, None)
                .unwrap();
        }
        let s = cl.session(id).unwrap();
        assert_eq!(s.samples.len(), 200);
        assert!((s.duration() - 199.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let mut cl = CorrectionLoop::new();
        let reg = OverrideRegistry::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        cl.append_sample(id, (0.0, 0.0), 0.0, None).unwrap();
        cl.append_sample(id, (0.1, 0.0), 0.1, None).unwrap();
        assert_eq!(
            cl.finalize_and_fit(id, &DmpConfig::default(), &reg),
            Err(CorrectionError::InsufficientData(2))
        );
        assert!(reg.is_empty());
    }

    #[test]
    fn finalize_registers_and_closes() {
        let mut cl = CorrectionLoop::new();
        let reg = OverrideRegistry::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        record_arc(&mut cl, id, 101, (0.5, -0.2), (0.57, -0.2));
        let model = cl
            .finalize_and_fit(id, &DmpConfig::default(), &reg)
            .unwrap();
        assert_eq!(cl.session(id).unwrap().state, SessionState::Finalized);
        let stored = reg.get(&bowl_ctx().key()).unwrap();
        assert_eq!(stored.model, model);
        assert_eq!(
            stored.gripper_events,
            vec![PhaseEvent {
                phase: 1.0,
                action: GripperAction::Close
            }]
        );
        assert!(matches!(
            cl.append_sample(id, (0.0, 0.0), 9.0, None),
            Err(CorrectionError::SessionClosed(_))
        ));
    }

    #[test]
    fn newest_override_wins() {
        let mut cl = CorrectionLoop::new();
        let reg = OverrideRegistry::new();
        let a = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        record_arc(&mut cl, a, 60, (0.5, -0.2), (0.57, -0.2));
        cl.finalize_and_fit(a, &DmpConfig::default(), &reg).unwrap();
        let b = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        record_arc(&mut cl, b, 80, (0.5, -0.2), (0.5, -0.13));
        let second = cl.finalize_and_fit(b, &DmpConfig::default(), &reg).unwrap();
        assert_eq!(reg.len(), 1);
        assert_eq!(reg.get(&bowl_ctx().key()).unwrap().model, second);
    }

    #[test]
    fn replay_generalizes_to_new_bowl_pose() {
        let mut cl = CorrectionLoop::new();
        let reg = OverrideRegistry::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        record_arc(&mut cl, id, 101, (0.5, -0.2), (0.57, -0.2));
        cl.finalize_and_fit(id, &DmpConfig::default(), &reg)
            .unwrap();

        let bowl = Pose2::at(0.3, 0.15);
        let shape = ObjectShape::new(ShapeKind::Bowl, 0.14);
        let motion = reg
            .resolve_override(MotionFunction::GraspDefault, &shape, &bowl, &bowl)
            .unwrap()
            .unwrap();
        let end = motion.path.last().unwrap();
        assert!(
            (end.y[0] - 0.37).abs() < 1e-3 && (end.y[1] - 0.15).abs() < 1e-3,
            "{:?}",
            end.y
        );
        assert_eq!(motion.path.samples()[0].y, vec![0.3, 0.15]);
        assert!((motion.gripper_events[0].t - 1.5).abs() < 1e-12);

        assert!(reg
            .resolve_override(
                MotionFunction::GraspDefault,
                &ObjectShape::new(ShapeKind::Box, 0.04),
                &bowl,
                &bowl
            )
            .is_none());
    }

    #[test]
    fn store_round_trip() {
        let mut cl = CorrectionLoop::new();
        let reg = OverrideRegistry::new();
        let id = cl
            .begin_session(bowl_ctx(), CorrectionTrigger::OperatorRequest)
            .unwrap();
        record_arc(&mut cl, id, 30, (0.5, -0.2), (0.57, -0.2));
        cl.finalize_and_fit(id, &DmpConfig::default(), &reg)
            .unwrap();
        let back = OverrideRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(back.keys(), reg.keys());
        assert_eq!(back.get(&bowl_ctx().key()), reg.get(&bowl_ctx().key()));
    }
}
