//! Planar kinematic robot and the motion-function catalog.
//!
//! The end effector floats over a rectangular workspace and moves in
//! straight lines at a fixed speed, or along a DMP rollout when an override
//! is registered for the step. Failures are data: each step reports `ok`,
//! `unexecutable` (the step cannot be dispatched in this environment) or
//! `infeasible` (dispatched, but the motion cannot reach its postcondition).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::correction::{GripperAction, OverrideRegistry};
use crate::geometry::{Pose2, Rect};
use crate::perception::SceneObject;
use crate::planner::{BoundStep, Program};

/// Distance within which the gripper can act on an object, meters.
pub const CONTACT_TOLERANCE: f64 = 0.02;
/// Side of the square swept by one `wipe` call, meters.
pub const WIPE_SQUARE: f64 = 0.10;
/// Radius of the wiper footprint, meters.
pub const WIPER_RADIUS: f64 = 0.015;
const WIPE_LANES: [f64; 5] = [-0.04, -0.02, 0.0, 0.02, 0.04];
const GRIPPER_ACTUATION: f64 = 0.3;
const LIFT_DURATION: f64 = 0.5;
const DOOR_SWING: f64 = 1.0;

/// The closed motion-function catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFunction {
    MoveTo,
    GraspDefault,
    Lift,
    Place,
    Open,
    Wipe,
    Release,
}

impl MotionFunction {
    pub const ALL: [MotionFunction; 7] = [
        Self::MoveTo,
        Self::GraspDefault,
        Self::Lift,
        Self::Place,
        Self::Open,
        Self::Wipe,
        Self::Release,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MoveTo => "move_to",
            Self::GraspDefault => "grasp_default",
            Self::Lift => "lift",
            Self::Place => "place",
            Self::Open => "open",
            Self::Wipe => "wipe",
            Self::Release => "release",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Object-directed functions cannot be dispatched without a target.
    pub fn requires_target(self) -> bool {
        matches!(
            self,
            Self::GraspDefault | Self::Place | Self::Open | Self::Wipe
        )
    }
}

impl fmt::Display for MotionFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Bowl,
    Door,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Box, Self::Cylinder, Self::Bowl, Self::Door];

    pub fn name(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::Cylinder => "cylinder",
            Self::Bowl => "bowl",
            Self::Door => "door",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub kind: ShapeKind,
    pub grasp_width: f64,
    #[serde(default)]
    pub rim_curvature: bool,
}

impl ObjectShape {
    /// Shape with the rim flag implied by its kind.
    pub fn new(kind: ShapeKind, grasp_width: f64) -> Self {
        Self {
            kind,
            grasp_width,
            rim_curvature: kind == ShapeKind::Bowl,
        }
    }
}

/// Whether the default parallel grasp can close on a shape.
pub fn grasp_feasibility(gripper_max_width: f64, shape: &ObjectShape) -> bool {
    shape.grasp_width <= gripper_max_width && !shape.rim_curvature
}

/// Point the gripper closes on: the rim for bowls, the center otherwise.
pub fn grasp_point(shape: &ObjectShape, pose: &Pose2) -> Pose2 {
    if shape.kind == ShapeKind::Bowl {
        let r = shape.grasp_width / 2.0;
        Pose2::new(
            pose.x + r * pose.yaw.cos(),
            pose.y + r * pose.yaw.sin(),
            pose.yaw,
        )
    } else {
        *pose
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "label", rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Closed,
    Holding(String),
}

impl Gripper {
    pub fn held(&self) -> Option<&str> {
        match self {
            Gripper::Holding(l) => Some(l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotConfig {
    pub workspace: Rect,
    pub home: Pose2,
    pub max_grip_width: f64,
    /// End-effector speed, m/s.
    pub speed: f64,
    /// Simulation tick, s.
    pub tick: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            workspace: Rect::new(0.0, -0.4, 0.8, 0.4),
            home: Pose2::at(0.1, 0.0),
            max_grip_width: 0.08,
            speed: 0.25,
            tick: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub end_effector: Pose2,
    pub gripper: Gripper,
    pub workspace: Rect,
    pub max_grip_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub label: String,
    pub shape: ObjectShape,
    pub pose: Pose2,
    pub graspable: bool,
    /// Articulation of door-kind objects, degrees.
    #[serde(default)]
    pub door_angle: f64,
    #[serde(default)]
    pub lifted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub robot: RobotState,
    pub objects: Vec<WorldObject>,
    pub clock: f64,
    #[serde(skip)]
    speed: f64,
    #[serde(skip)]
    tick: f64,
    #[serde(skip)]
    wipe_trace: Vec<(f64, f64)>,
}

impl WorldState {
    pub fn new(scene: &[SceneObject], config: &RobotConfig) -> Self {
        Self {
            robot: RobotState {
                end_effector: config.home,
                gripper: Gripper::Open,
                workspace: config.workspace,
                max_grip_width: config.max_grip_width,
            },
            objects: scene
                .iter()
                .map(|o| WorldObject {
                    label: o.label.clone(),
                    shape: o.shape,
                    pose: o.true_pose,
                    graspable: o.graspable,
                    door_angle: 0.0,
                    lifted: false,
                })
                .collect(),
            clock: 0.0,
            speed: config.speed,
            tick: config.tick,
            wipe_trace: Vec::new(),
        }
    }

    pub fn from_scene(scene: &[SceneObject]) -> Self {
        Self::new(scene, &RobotConfig::default())
    }

    pub fn object(&self, label: &str) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.label == label)
    }

    fn object_mut(&mut self, label: &str) -> Option<&mut WorldObject> {
        self.objects.iter_mut().find(|o| o.label == label)
    }

    pub fn wipe_trace(&self) -> &[(f64, f64)] {
        &self.wipe_trace
    }

    /// Fraction of a square region swept by the wiper, on a 1 cm grid.
    pub fn wipe_coverage(&self, region: &Rect) -> f64 {
        let cell = 0.01;
        let nx = (region.width() / cell).round().max(1.0) as usize;
        let ny = (region.height() / cell).round().max(1.0) as usize;
        let mut covered = vec![false; nx * ny];
        let r2 = WIPER_RADIUS * WIPER_RADIUS;
        for &(px, py) in &self.wipe_trace {
            let i_lo = (((px - WIPER_RADIUS - region.min_x) / cell).floor().max(0.0)) as usize;
            let i_hi =
                (((px + WIPER_RADIUS - region.min_x) / cell).ceil().max(0.0) as usize).min(nx);
            let j_lo = (((py - WIPER_RADIUS - region.min_y) / cell).floor().max(0.0)) as usize;
            let j_hi =
                (((py + WIPER_RADIUS - region.min_y) / cell).ceil().max(0.0) as usize).min(ny);
            for i in i_lo..i_hi {
                let cx = region.min_x + (i as f64 + 0.5) * cell;
                for j in j_lo..j_hi {
                    let cy = region.min_y + (j as f64 + 0.5) * cell;
                    if (cx - px).powi(2) + (cy - py).powi(2) <= r2 {
                        covered[i * ny + j] = true;
                    }
                }
            }
        }
        covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64
    }

    fn slave_held(&mut self) {
        if let Gripper::Holding(label) = &self.robot.gripper {
            let ee = self.robot.end_effector;
            let label = label.clone();
            if let Some(obj) = self.object_mut(&label) {
                obj.pose.x = ee.x;
                obj.pose.y = ee.y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Unexecutable,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub function: String,
    pub status: StepStatus,
    pub detail: String,
    pub end_pose: Pose2,
    pub elapsed: f64,
    #[serde(default)]
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub steps: Vec<StepResult>,
    pub executed: bool,
    pub feasible: bool,
    pub success: bool,
    pub functions_used: usize,
}

impl ExecutionReport {
    /// First infeasible step, if any.
    pub fn infeasible_step(&self) -> Option<&StepResult> {
        self.steps
            .iter()
            .find(|s| s.status == StepStatus::Infeasible)
    }
}

/// Task-level success condition checked after the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalPredicate {
    /// Gripper holds the target.
    Holding { target: String },
    /// Target within 2 cm of the destination and released.
    PlacedAt { target: String, destination: String },
    /// Door-kind target opened at least 85 degrees.
    DoorOpen { target: String },
    /// At least `min_fraction` of a square region around `region` wiped.
    Covered {
        region: String,
        #[serde(default = "default_region_side")]
        side: f64,
        #[serde(default = "default_coverage")]
        min_fraction: f64,
    },
    /// No task-level condition beyond every step succeeding.
    StepsOnly,
}

fn default_region_side() -> f64 {
    0.2
}

fn default_coverage() -> f64 {
    0.95
}

impl GoalPredicate {
    /// Best-effort goal for a free-form command from the supported task families.
    pub fn infer(command: &str) -> Self {
        let words: Vec<String> = command
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .filter(|w| w != "the" && w != "a")
            .collect();
        match words.as_slice() {
            [verb, target] if verb == "catch" => Self::Holding {
                target: target.clone(),
            },
            [verb, target] if verb == "open" => Self::DoorOpen {
                target: target.clone(),
            },
            [verb, target, prep, dest] if verb == "put" && (prep == "on" || prep == "in") => {
                Self::PlacedAt {
                    target: target.clone(),
                    destination: dest.clone(),
                }
            }
            [verb, top, of, region] if verb == "clean" && top == "top" && of == "of" => {
                Self::Covered {
                    region: format!("{region}_top"),
                    side: default_region_side(),
                    min_fraction: default_coverage(),
                }
            }
            _ => Self::StepsOnly,
        }
    }

    pub fn holds(&self, world: &WorldState) -> bool {
        match self {
            Self::Holding { target } => world.robot.gripper.held() == Some(target.as_str()),
            Self::PlacedAt {
                target,
                destination,
            } => match (world.object(target), world.object(destination)) {
                (Some(t), Some(d)) => {
                    t.pose.distance(&d.pose) <= CONTACT_TOLERANCE
                        && world.robot.gripper.held() != Some(target.as_str())
                }
                _ => false,
            },
            Self::DoorOpen { target } => world
                .object(target)
                .is_some_and(|o| o.shape.kind == ShapeKind::Door && o.door_angle >= 85.0),
            Self::Covered {
                region,
                side,
                min_fraction,
            } => world.object(region).is_some_and(|o| {
                world.wipe_coverage(&Rect::centered(&o.pose, *side)) >= *min_fraction
            }),
            Self::StepsOnly => true,
        }
    }
}

/// Execution events for observers (snapshots, streaming).
pub enum ExecutionEvent<'a> {
    Tick(&'a WorldState),
    Step(&'a StepResult),
}

enum Fault {
    Unexecutable(String),
    Infeasible(String),
}

type StepOutcome = Result<String, Fault>;

struct Sim<'w, 'o> {
    world: &'w mut WorldState,
    observer: Option<&'o mut dyn FnMut(ExecutionEvent<'_>)>,
}

impl Sim<'_, '_> {
    fn tick(&mut self, dt: f64) {
        self.world.clock += dt;
        self.world.slave_held();
        if let Some(obs) = self.observer.as_mut() {
            obs(ExecutionEvent::Tick(self.world));
        }
    }

    fn wait(&mut self, seconds: f64) {
        let tick = self.world.tick;
        let n = (seconds / tick).round().max(1.0) as usize;
        for _ in 0..n {
            self.tick(tick);
        }
    }

    /// Straight-line motion at fixed speed. The target must lie inside the
    /// workspace; when `wiping`, every tick position is added to the trace.
    fn move_linear(&mut self, x: f64, y: f64, wiping: bool) {
        let step_len = self.world.speed * self.world.tick;
        loop {
            let ee = self.world.robot.end_effector;
            let (dx, dy) = (x - ee.x, y - ee.y);
            let dist = dx.hypot(dy);
            if dist <= step_len {
                self.world.robot.end_effector.x = x;
                self.world.robot.end_effector.y = y;
            } else {
                self.world.robot.end_effector.x += dx / dist * step_len;
                self.world.robot.end_effector.y += dy / dist * step_len;
            }
            if wiping {
                let p = self.world.robot.end_effector;
                self.world.wipe_trace.push((p.x, p.y));
            }
            let tick = self.world.tick;
            self.tick(tick);
            if dist <= step_len {
                break;
            }
        }
    }

    fn target_point(step: &BoundStep) -> Option<Pose2> {
        let args = &step.call.literal_args;
        match (step.target_pose, args.len()) {
            (Some(p), 0) => Some(p),
            (Some(p), _) if args.len() >= 2 => Some(p.offset(args[0], args[1])),
            (None, n) if n >= 2 => Some(Pose2::at(args[0], args[1])),
            _ => None,
        }
    }

    fn target_object(&self, step: &BoundStep) -> Result<WorldObject, Fault> {
        let label = step
            .call
            .target_label
            .as_deref()
            .ok_or_else(|| Fault::Unexecutable("missing target".into()))?;
        self.world
            .object(label)
            .cloned()
            .ok_or_else(|| Fault::Unexecutable(format!("`{label}` is not in the environment")))
    }

    fn move_to(&mut self, step: &BoundStep) -> StepOutcome {
        let goal = Self::target_point(step)
            .ok_or_else(|| Fault::Unexecutable("move_to needs a pose".into()))?;
        if !self.world.robot.workspace.contains_pose(&goal) {
            return Err(Fault::Unexecutable(format!(
                "({:.3}, {:.3}) is outside the workspace",
                goal.x, goal.y
            )));
        }
        self.move_linear(goal.x, goal.y, false);
        Ok(format!("at ({:.3}, {:.3})", goal.x, goal.y))
    }

    fn grasp_default(&mut self, step: &BoundStep) -> StepOutcome {
        let obj = self.target_object(step)?;
        if let Some(held) = self.world.robot.gripper.held() {
            return Err(Fault::Infeasible(format!("already holding `{held}`")));
        }
        let dist = self.world.robot.end_effector.distance(&obj.pose);
        if dist > CONTACT_TOLERANCE {
            self.world.robot.gripper = Gripper::Closed;
            self.wait(GRIPPER_ACTUATION);
            return Err(Fault::Infeasible(format!(
                "`{}` is {:.3} m away",
                obj.label, dist
            )));
        }
        if !obj.graspable || !grasp_feasibility(self.world.robot.max_grip_width, &obj.shape) {
            self.world.robot.gripper = Gripper::Closed;
            self.wait(GRIPPER_ACTUATION);
            return Err(Fault::Infeasible(format!(
                "default grasp unsuited to `{}` ({}, width {:.3} m)",
                obj.label, obj.shape.kind, obj.shape.grasp_width
            )));
        }
        self.world.robot.gripper = Gripper::Holding(obj.label.clone());
        self.wait(GRIPPER_ACTUATION);
        Ok(format!("holding `{}`", obj.label))
    }

    fn held_target(&self, step: &BoundStep) -> Result<String, Fault> {
        let held = self
            .world
            .robot
            .gripper
            .held()
            .ok_or_else(|| Fault::Infeasible("gripper is not holding anything".into()))?
            .to_string();
        match step.call.target_label.as_deref() {
            Some(label)
                if label != held && self.world.object(label).is_some_and(|o| o.graspable) =>
            {
                Err(Fault::Infeasible(format!(
                    "holding `{held}`, not `{label}`"
                )))
            }
            _ => Ok(held),
        }
    }

    fn lift(&mut self, step: &BoundStep) -> StepOutcome {
        if let Some(label) = &step.call.target_label {
            if self.world.object(label).is_none() {
                return Err(Fault::Unexecutable(format!(
                    "`{label}` is not in the environment"
                )));
            }
        }
        let held = self.held_target(step)?;
        if let Some(obj) = self.world.object_mut(&held) {
            obj.lifted = true;
        }
        self.wait(LIFT_DURATION);
        Ok(format!("lifted `{held}`"))
    }

    fn place(&mut self, step: &BoundStep) -> StepOutcome {
        let goal = Self::target_point(step)
            .ok_or_else(|| Fault::Unexecutable("place needs a destination".into()))?;
        if !self.world.robot.workspace.contains_pose(&goal) {
            return Err(Fault::Unexecutable(
                "destination outside the workspace".into(),
            ));
        }
        let held = self
            .world
            .robot
            .gripper
            .held()
            .ok_or_else(|| Fault::Infeasible("nothing to place".into()))?
            .to_string();
        self.move_linear(goal.x, goal.y, false);
        if let Some(obj) = self.world.object_mut(&held) {
            obj.lifted = false;
        }
        self.wait(LIFT_DURATION);
        Ok(format!("set `{held}` down"))
    }

    fn open(&mut self, step: &BoundStep) -> StepOutcome {
        let obj = self.target_object(step)?;
        if obj.shape.kind != ShapeKind::Door {
            return Err(Fault::Infeasible(format!(
                "`{}` is not articulated",
                obj.label
            )));
        }
        if let Some(held) = self.world.robot.gripper.held() {
            return Err(Fault::Infeasible(format!("hand busy holding `{held}`")));
        }
        let dist = self.world.robot.end_effector.distance(&obj.pose);
        if dist > CONTACT_TOLERANCE {
            return Err(Fault::Infeasible(format!(
                "`{}` handle is {:.3} m away",
                obj.label, dist
            )));
        }
        self.wait(DOOR_SWING);
        let o = self.world.object_mut(&obj.label).expect("checked above");
        o.door_angle = 90.0;
        o.pose.yaw += std::f64::consts::FRAC_PI_2;
        Ok(format!("opened `{}`", obj.label))
    }

    fn wipe(&mut self, step: &BoundStep) -> StepOutcome {
        let center = Self::target_point(step)
            .ok_or_else(|| Fault::Unexecutable("wipe needs a pose".into()))?;
        if self.world.robot.gripper.held().is_none() {
            return Err(Fault::Infeasible("no wiping tool in hand".into()));
        }
        let half = WIPE_SQUARE / 2.0;
        let mut waypoints = Vec::with_capacity(2 * WIPE_LANES.len());
        for (i, dy) in WIPE_LANES.iter().enumerate() {
            let (a, b) = if i % 2 == 0 {
                (-half, half)
            } else {
                (half, -half)
            };
            waypoints.push((center.x + a, center.y + dy));
            waypoints.push((center.x + b, center.y + dy));
        }
        let ws = self.world.robot.workspace;
        if waypoints.iter().any(|&(x, y)| !ws.contains(x, y)) {
            return Err(Fault::Infeasible(
                "wipe pattern leaves the workspace".into(),
            ));
        }
        let (sx, sy) = waypoints[0];
        self.move_linear(sx, sy, false);
        for &(x, y) in &waypoints[1..] {
            self.move_linear(x, y, true);
        }
        Ok(format!("wiped around ({:.3}, {:.3})", center.x, center.y))
    }

    fn release(&mut self) -> StepOutcome {
        let detail = match self.world.robot.gripper.held().map(str::to_string) {
            Some(label) => {
                if let Some(obj) = self.world.object_mut(&label) {
                    obj.lifted = false;
                }
                format!("released `{label}`")
            }
            None => "gripper opened".to_string(),
        };
        self.world.robot.gripper = Gripper::Open;
        self.wait(GRIPPER_ACTUATION);
        Ok(detail)
    }

    fn apply_gripper(&mut self, action: GripperAction, grasp_target: Option<(&str, Pose2)>) {
        match action {
            GripperAction::Open => {
                if let Some(label) = self.world.robot.gripper.held().map(str::to_string) {
                    if let Some(obj) = self.world.object_mut(&label) {
                        obj.lifted = false;
                    }
                }
                self.world.robot.gripper = Gripper::Open;
            }
            GripperAction::Close => {
                if self.world.robot.gripper.held().is_some() {
                    return;
                }
                self.world.robot.gripper = match grasp_target {
                    Some((label, point))
                        if self.world.robot.end_effector.distance(&point) <= CONTACT_TOLERANCE =>
                    {
                        Gripper::Holding(label.to_string())
                    }
                    _ => Gripper::Closed,
                };
            }
        }
    }

    /// Replays a demonstrated motion. Path points outside the workspace are
    /// clamped and the step fails.
    fn follow_override(
        &mut self,
        step: &BoundStep,
        function: MotionFunction,
        motion: crate::correction::OverrideMotion,
    ) -> StepOutcome {
        let obj = self.target_object(step)?;
        let grasp_at = grasp_point(&obj.shape, &obj.pose);
        let is_grasp = function == MotionFunction::GraspDefault;
        if is_grasp {
            if let Some(held) = self.world.robot.gripper.held() {
                return Err(Fault::Infeasible(format!("already holding `{held}`")));
            }
        }
        let target = is_grasp.then_some((obj.label.as_str(), grasp_at));
        let ws = self.world.robot.workspace;
        let mut events = motion.gripper_events.iter().peekable();
        let mut prev_t = 0.0;
        let mut closed = false;
        for s in motion.path.samples() {
            let (x, y) = (s.y[0], s.y[1]);
            let (cx, cy) = ws.clamp(x, y);
            self.world.robot.end_effector.x = cx;
            self.world.robot.end_effector.y = cy;
            self.tick(s.t - prev_t);
            prev_t = s.t;
            if (cx, cy) != (x, y) {
                return Err(Fault::Infeasible(
                    "demonstrated path leaves the workspace".into(),
                ));
            }
            while let Some(ev) = events.next_if(|e| e.t <= s.t) {
                closed |= ev.action == GripperAction::Close;
                self.apply_gripper(ev.action, target);
            }
        }
        for ev in events {
            closed |= ev.action == GripperAction::Close;
            self.apply_gripper(ev.action, target);
        }
        if is_grasp {
            if !closed {
                self.apply_gripper(GripperAction::Close, target);
            }
            self.wait(GRIPPER_ACTUATION);
            return if self.world.robot.gripper.held() == Some(obj.label.as_str()) {
                Ok(format!("holding `{}` via demonstrated grasp", obj.label))
            } else {
                Err(Fault::Infeasible(format!(
                    "demonstrated grasp ended {:.3} m from the grasp point",
                    self.world.robot.end_effector.distance(&grasp_at)
                )))
            };
        }
        self.dispatch_default(step, function)
    }

    fn dispatch_default(&mut self, step: &BoundStep, function: MotionFunction) -> StepOutcome {
        match function {
            MotionFunction::MoveTo => self.move_to(step),
            MotionFunction::GraspDefault => self.grasp_default(step),
            MotionFunction::Lift => self.lift(step),
            MotionFunction::Place => self.place(step),
            MotionFunction::Open => self.open(step),
            MotionFunction::Wipe => self.wipe(step),
            MotionFunction::Release => self.release(),
        }
    }

    fn step(&mut self, step: &BoundStep, overrides: &OverrideRegistry) -> StepResult {
        let start = self.world.clock;
        let mut overridden = false;
        let outcome = match check_dispatchable(step) {
            Err(reason) => Err(Fault::Unexecutable(reason)),
            Ok(function) => {
                let shape = step
                    .call
                    .target_label
                    .as_deref()
                    .and_then(|l| self.world.object(l))
                    .map(|o| o.shape);
                match (shape, step.target_pose) {
                    (Some(shape), Some(target_pose)) => {
                        let current = self.world.robot.end_effector;
                        match overrides.resolve_override(function, &shape, &current, &target_pose) {
                            None => self.dispatch_default(step, function),
                            Some(Err(e)) => {
                                overridden = true;
                                Err(Fault::Infeasible(format!("override failed: {e}")))
                            }
                            Some(Ok(motion)) => {
                                overridden = true;
                                self.follow_override(step, function, motion)
                            }
                        }
                    }
                    _ => self.dispatch_default(step, function),
                }
            }
        };
        let (status, detail) = match outcome {
            Ok(d) => (StepStatus::Ok, d),
            Err(Fault::Unexecutable(d)) => (StepStatus::Unexecutable, d),
            Err(Fault::Infeasible(d)) => (StepStatus::Infeasible, d),
        };
        let result = StepResult {
            function: step.call.name.clone(),
            status,
            detail,
            end_pose: self.world.robot.end_effector,
            elapsed: self.world.clock - start,
            overridden,
        };
        if let Some(obs) = self.observer.as_mut() {
            obs(ExecutionEvent::Step(&result));
        }
        result
    }
}

/// Catalog and binding checks that decide whether a step can be dispatched.
pub fn check_dispatchable(step: &BoundStep) -> Result<MotionFunction, String> {
    let function = MotionFunction::from_name(&step.call.name)
        .ok_or_else(|| format!("unknown motion function `{}`", step.call.name))?;
    if function.requires_target()
        && step.call.target_label.is_none()
        && step.call.literal_args.len() < 2
    {
        return Err(format!("`{function}` needs a target"));
    }
    if let Some(label) = &step.call.target_label {
        if step.target_pose.is_none() {
            return Err(format!("target `{label}` has no resolved pose"));
        }
    }
    Ok(function)
}

/// Executes one bound step, consulting the overrides first.
pub fn step_function(
    world: &mut WorldState,
    step: &BoundStep,
    overrides: &OverrideRegistry,
) -> StepResult {
    Sim {
        world,
        observer: None,
    }
    .step(step, overrides)
}

/// Executes a program in order, stopping at the first step that is not ok.
pub fn run_program(
    world: &mut WorldState,
    program: &Program,
    overrides: &OverrideRegistry,
    goal: &GoalPredicate,
) -> ExecutionReport {
    run_program_observed(world, program, overrides, goal, None)
}

pub fn run_program_observed(
    world: &mut WorldState,
    program: &Program,
    overrides: &OverrideRegistry,
    goal: &GoalPredicate,
    observer: Option<&mut dyn FnMut(ExecutionEvent<'_>)>,
) -> ExecutionReport {
    let all_dispatchable = program.steps.iter().all(|s| check_dispatchable(s).is_ok());
    let mut sim = Sim { world, observer };
    let mut steps = Vec::with_capacity(program.steps.len());
    for step in &program.steps {
        let result = sim.step(step, overrides);
        let stop = result.status != StepStatus::Ok;
        steps.push(result);
        if stop {
            break;
        }
    }
    let executed = all_dispatchable && steps.iter().all(|s| s.status != StepStatus::Unexecutable);
    let feasible =
        steps.iter().all(|s| s.status != StepStatus::Infeasible) && goal.holds(sim.world);
    ExecutionReport {
        functions_used: steps.len(),
        executed,
        feasible,
        success: executed && feasible,
        steps,
    }
}
