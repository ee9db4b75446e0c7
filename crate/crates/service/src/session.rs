//! The single operator session and its mode machine.
//!
//! ```text
//! idle ──command──▶ planning ──ok──▶ awaiting_approval ──approve──▶ executing ──▶ reporting
//!  ▲                   │ plan failed          │ reject                              │
//!  └───────────────────┴──────────────────────┘◀─────────── command / teleop ───────┘
//! idle | reporting ──teleop/begin──▶ teleop ──finish | abort──▶ idle
//! ```
//!
//! Every method either performs a legal transition or returns an error
//! without touching the state.

use std::collections::HashMap;

use hrc_core::correction::{
    CorrectionContext, CorrectionError, CorrectionLoop, CorrectionTrigger, GripperAction,
    OverrideRegistry,
};
use hrc_core::dmp::DmpConfig;
use hrc_core::executor::{
    run_program_observed, ExecutionEvent, ExecutionReport, GoalPredicate, StepResult,
};
use hrc_core::perception::{detect, filter_confident, DetectorConfig, ObjectRegistry, SceneObject};
use hrc_core::planner::{assemble_program, build_plan, PlanBackend, TaskPlan};
use hrc_core::{MotionFunction, Pose2, RobotConfig, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Planning,
    AwaitingApproval,
    Executing,
    Teleop,
    Reporting,
}

/// Everything pushed to `/stream` subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    WorldSnapshot {
        mode: Mode,
        world: WorldState,
    },
    StepResult {
        plan_id: String,
        index: usize,
        result: StepResult,
    },
    PlanReady {
        plan: TaskPlan,
    },
    Report {
        plan_id: String,
        report: ExecutionReport,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
}

fn conflict(action: &str, mode: Mode) -> SessionError {
    SessionError::Conflict(format!(
        "cannot {action} while {}",
        serde_json::to_value(mode).unwrap().as_str().unwrap()
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct TeleopStarted {
    pub session_id: u64,
    pub function: MotionFunction,
    pub target: String,
    pub triggered_by_failure: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FittedSummary {
    pub function: MotionFunction,
    pub shape: hrc_core::ShapeKind,
    pub samples: usize,
    pub tau: f64,
    pub n_basis: usize,
    pub y0: Vec<f64>,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Status {
    pub mode: Mode,
    pub active_plan: Option<String>,
    pub teleop_session: Option<u64>,
    pub clock: f64,
}

pub struct Session {
    mode: Mode,
    scene: Vec<SceneObject>,
    robot: RobotConfig,
    detector: DetectorConfig,
    backend: PlanBackend,
    world: WorldState,
    registry: ObjectRegistry,
    perception_rng: ChaCha8Rng,
    planner_rng: ChaCha8Rng,
    plans: HashMap<String, TaskPlan>,
    pending: Option<String>,
    last_report: Option<ExecutionReport>,
    correction: CorrectionLoop,
    teleop: Option<u64>,
    teleop_clock: f64,
    overrides: OverrideRegistry,
    snapshot_every: usize,
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scene: Vec<SceneObject>,
        robot: RobotConfig,
        detector: DetectorConfig,
        backend: PlanBackend,
        overrides: OverrideRegistry,
        seed: u64,
        snapshot_every: usize,
    ) -> Self {
        let mut perception_rng = ChaCha8Rng::seed_from_u64(seed ^ detector.seed);
        perception_rng.set_stream(1);
        let mut planner_rng = ChaCha8Rng::seed_from_u64(seed);
        planner_rng.set_stream(2);
        let world = WorldState::new(&scene, &robot);
        Self {
            mode: Mode::Idle,
            scene,
            robot,
            detector,
            backend,
            world,
            registry: ObjectRegistry::new(),
            perception_rng,
            planner_rng,
            plans: HashMap::new(),
            pending: None,
            last_report: None,
            correction: CorrectionLoop::new(),
            teleop: None,
            teleop_clock: 0.0,
            overrides,
            snapshot_every: snapshot_every.max(1),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn status(&self) -> Status {
        Status {
            mode: self.mode,
            active_plan: self.pending.clone(),
            teleop_session: self.teleop,
            clock: self.world.clock,
        }
    }

    pub fn snapshot(&self) -> StreamEvent {
        StreamEvent::WorldSnapshot {
            mode: self.mode,
            world: self.world.clone(),
        }
    }

    pub fn registry(&self) -> &ObjectRegistry {
        &self.registry
    }

    pub fn overrides(&self) -> &OverrideRegistry {
        &self.overrides
    }

    pub fn plan(&self, id: &str) -> Option<&TaskPlan> {
        self.plans.get(id)
    }

    pub fn last_report(&self) -> Option<&ExecutionReport> {
        self.last_report.as_ref()
    }

    /// Fresh world for a new command. The clock carries over so the stream
    /// stays monotone across commands.
    fn reset_world(&mut self) {
        let clock = self.world.clock;
        self.world = WorldState::new(&self.scene, &self.robot);
        self.world.clock = clock;
    }

    fn perceive(&mut self) {
        let detections = detect(
            &self.world,
            &self.detector,
            self.world.clock,
            &mut self.perception_rng,
        );
        self.registry.ingest(&filter_confident(
            detections,
            self.detector.confidence_threshold,
        ));
    }

    pub fn submit_command(
        &mut self,
        text: &str,
        emit: &mut dyn FnMut(StreamEvent),
    ) -> Result<TaskPlan, SessionError> {
        if !matches!(self.mode, Mode::Idle | Mode::Reporting) {
            return Err(conflict("accept a command", self.mode));
        }
        self.mode = Mode::Planning;
        self.reset_world();
        self.perceive();
        emit(self.snapshot());
        match build_plan(text, &self.backend, &mut self.planner_rng) {
            Ok(plan) => {
                self.plans.insert(plan.id.clone(), plan.clone());
                self.pending = Some(plan.id.clone());
                self.mode = Mode::AwaitingApproval;
                emit(StreamEvent::PlanReady { plan: plan.clone() });
                Ok(plan)
            }
            Err(e) => {
                self.mode = Mode::Idle;
                let message = format!("plan failed: {e}");
                emit(StreamEvent::Error {
                    message: message.clone(),
                });
                Err(SessionError::Unprocessable(message))
            }
        }
    }

    fn take_pending(&mut self, id: &str) -> Result<TaskPlan, SessionError> {
        if self.mode != Mode::AwaitingApproval || self.pending.as_deref() != Some(id) {
            return Err(SessionError::NotFound(format!(
                "no plan `{id}` awaiting approval"
            )));
        }
        self.pending = None;
        Ok(self.plans[id].clone())
    }

    pub fn reject(&mut self, id: &str) -> Result<(), SessionError> {
        self.take_pending(id)?;
        self.mode = Mode::Idle;
        Ok(())
    }

    /// Executes the approved plan. Step results and the final report are
    /// passed to `emit` as they happen, with world snapshots in between.
    pub fn approve(
        &mut self,
        id: &str,
        emit: &mut dyn FnMut(StreamEvent),
    ) -> Result<ExecutionReport, SessionError> {
        let plan = self.take_pending(id)?;
        self.mode = Mode::Executing;
        let goal = GoalPredicate::infer(&plan.command);
        let report = match assemble_program(&plan, &self.registry) {
            Ok(program) => {
                let every = self.snapshot_every;
                let mut ticks = 0usize;
                let mut index = 0usize;
                let mut observer = |event: ExecutionEvent<'_>| match event {
                    ExecutionEvent::Tick(world) => {
                        ticks += 1;
                        if ticks.is_multiple_of(every) {
                            emit(StreamEvent::WorldSnapshot {
                                mode: Mode::Executing,
                                world: world.clone(),
                            });
                        }
                    }
                    ExecutionEvent::Step(result) => {
                        emit(StreamEvent::StepResult {
                            plan_id: plan.id.clone(),
                            index,
                            result: result.clone(),
                        });
                        index += 1;
                    }
                };
                run_program_observed(
                    &mut self.world,
                    &program,
                    &self.overrides,
                    &goal,
                    Some(&mut observer),
                )
            }
            Err(e) => {
                emit(StreamEvent::Error {
                    message: e.to_string(),
                });
                ExecutionReport {
                    steps: Vec::new(),
                    executed: false,
                    feasible: false,
                    success: false,
                    functions_used: 0,
                }
            }
        };
        self.mode = Mode::Reporting;
        self.last_report = Some(report.clone());
        emit(self.snapshot());
        emit(StreamEvent::Report {
            plan_id: plan.id.clone(),
            report: report.clone(),
        });
        Ok(report)
    }

    pub fn begin_teleop(
        &mut self,
        function: &str,
        target: &str,
    ) -> Result<TeleopStarted, SessionError> {
        if !matches!(self.mode, Mode::Idle | Mode::Reporting) {
            return Err(conflict("start teleoperation", self.mode));
        }
        let function = MotionFunction::from_name(function).ok_or_else(|| {
            SessionError::Unprocessable(format!("unknown motion function `{function}`"))
        })?;
        let shape = self
            .world
            .object(target)
            .map(|o| o.shape.kind)
            .ok_or_else(|| {
                SessionError::Unprocessable(format!("no object `{target}` in the scene"))
            })?;
        let context = CorrectionContext {
            function,
            target_label: target.to_string(),
            shape,
        };
        let failed = self.last_report.as_ref().filter(|r| {
            self.mode == Mode::Reporting
                && r.infeasible_step()
                    .is_some_and(|s| s.function == function.name())
        });
        let trigger = match failed {
            Some(report) => CorrectionTrigger::Failure(report),
            None => CorrectionTrigger::OperatorRequest,
        };
        let triggered_by_failure = matches!(trigger, CorrectionTrigger::Failure(_));
        let id = self
            .correction
            .begin_session(context, trigger)
            .map_err(correction_error)?;
        self.teleop = Some(id);
        self.teleop_clock = self.world.clock;
        self.mode = Mode::Teleop;
        Ok(TeleopStarted {
            session_id: id,
            function,
            target: target.to_string(),
            triggered_by_failure,
        })
    }

    fn active_teleop(&self, action: &str, session_id: Option<u64>) -> Result<u64, SessionError> {
        let Some(id) = self.teleop.filter(|_| self.mode == Mode::Teleop) else {
            return Err(conflict(action, self.mode));
        };
        match session_id {
            Some(s) if s != id => Err(SessionError::NotFound(format!(
                "teleop session {s} is not active"
            ))),
            _ => Ok(id),
        }
    }

    /// Records one operator sample and mirrors it on the simulated arm.
    pub fn teleop_sample(
        &mut self,
        session_id: Option<u64>,
        pose: (f64, f64),
        t: f64,
        gripper: Option<GripperAction>,
        emit: &mut dyn FnMut(StreamEvent),
    ) -> Result<(), SessionError> {
        let id = self.active_teleop("record a teleop sample", session_id)?;
        self.correction
            .append_sample(id, pose, t, gripper)
            .map_err(correction_error)?;
        self.world.robot.end_effector = Pose2::at(pose.0, pose.1);
        self.world.clock = self.world.clock.max(self.teleop_clock + t);
        emit(self.snapshot());
        Ok(())
    }

    pub fn finish_teleop(
        &mut self,
        session_id: Option<u64>,
        config: &DmpConfig,
    ) -> Result<FittedSummary, SessionError> {
        let id = self.active_teleop("finish teleoperation", session_id)?;
        let samples = self.correction.session(id).map_or(0, |s| s.samples.len());
        let key = self
            .correction
            .session(id)
            .expect("active session exists")
            .context
            .key();
        match self
            .correction
            .finalize_and_fit(id, config, &self.overrides)
        {
            Ok(model) => {
                self.teleop = None;
                self.mode = Mode::Idle;
                Ok(FittedSummary {
                    function: key.function,
                    shape: key.shape,
                    samples,
                    tau: model.tau,
                    n_basis: model.n_basis(),
                    y0: model.y0.clone(),
                    g: model.g.clone(),
                })
            }
            // Too few samples keeps the session open for more.
            Err(e @ CorrectionError::InsufficientData(_)) => Err(correction_error(e)),
            Err(e) => {
                self.teleop = None;
                self.mode = Mode::Idle;
                Err(correction_error(e))
            }
        }
    }

    pub fn abort_teleop(&mut self, session_id: Option<u64>) -> Result<(), SessionError> {
        let id = self.active_teleop("abort teleoperation", session_id)?;
        self.correction.abort(id).map_err(correction_error)?;
        self.teleop = None;
        self.mode = Mode::Idle;
        Ok(())
    }
}

fn correction_error(e: CorrectionError) -> SessionError {
    match e {
        CorrectionError::SessionConflict(_) => SessionError::Conflict(e.to_string()),
        CorrectionError::UnknownSession(_) => SessionError::NotFound(e.to_string()),
        _ => SessionError::Unprocessable(e.to_string()),
    }
}
