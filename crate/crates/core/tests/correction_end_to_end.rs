use hrc_core::correction::{
    CorrectionContext, CorrectionLoop, CorrectionTrigger, GripperAction, OverrideRegistry,
};
use hrc_core::dmp::DmpConfig;
use hrc_core::executor::{
    grasp_point, run_program, GoalPredicate, MotionFunction, ShapeKind, StepStatus, WorldState,
};
use hrc_core::metrics::{bundled_scene, run_trials, Experiment};
use hrc_core::perception::{Detection, ObjectRegistry};
use hrc_core::planner::{assemble_program, build_plan, PlanBackend, StubBackend, StubTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn perceive_all(world: &WorldState) -> ObjectRegistry {
    let mut reg = ObjectRegistry::new();
    let dets: Vec<Detection> = world
        .objects
        .iter()
        .map(|o| Detection {
            label: o.label.clone(),
            measured_pose: o.pose,
            confidence: 1.0,
            timestamp: 0.0,
        })
        .collect();
    reg.ingest(&dets);
    reg
}

/// Operator drags from the bowl centre out to the rim along a slight arc and
/// closes the gripper at the end.
fn demonstrate(cl: &mut CorrectionLoop, id: u64, from: (f64, f64), to: (f64, f64)) {
    let n = 90;
    for k in 0..n {
        let s = k as f64 / (n - 1) as f64;
        let blend = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
        let x = from.0 + blend * (to.0 - from.0);
        let y = from.1 + blend * (to.1 - from.1) + 0.01 * (std::f64::consts::PI * s).sin();
        let grip = (k == n - 1).then_some(GripperAction::Close);
        cl.append_sample(id, (x, y), s * 1.5, grip).unwrap();
    }
}

#[test]
fn bowl_failure_corrected_by_demonstration() {
    let overrides = OverrideRegistry::new();
    let bowl_suite = Experiment::desk("catch the bowl", 20, 0, 0.0).unwrap();
    let before = run_trials(&bowl_suite, 20, 0, &overrides).unwrap();
    assert_eq!((before.fsb, before.sr, before.exec), (0.0, 0.0, 1.0));

    // One failing run gives the correction trigger.
    let scene = bundled_scene();
    let mut world = WorldState::from_scene(&scene);
    let backend = PlanBackend::Stub(StubBackend::new(StubTable::builtin(), 0.0, 0).unwrap());
    let plan = build_plan(
        "catch the bowl",
        &backend,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let program = assemble_program(&plan, &perceive_all(&world)).unwrap();
    let goal = GoalPredicate::infer("catch the bowl");
    let report = run_program(&mut world, &program, &overrides, &goal);
    let failed = report.infeasible_step().unwrap();
    assert_eq!(failed.function, "grasp_default");

    let bowl = world.object("bowl").unwrap().clone();
    let mut cl = CorrectionLoop::new();
    let ctx = CorrectionContext {
        function: MotionFunction::GraspDefault,
        target_label: "bowl".into(),
        shape: ShapeKind::Bowl,
    };
    let id = cl
        .begin_session(ctx, CorrectionTrigger::Failure(&report))
        .unwrap();
    let rim = grasp_point(&bowl.shape, &bowl.pose);
    demonstrate(&mut cl, id, (bowl.pose.x, bowl.pose.y), (rim.x, rim.y));
    cl.finalize_and_fit(id, &DmpConfig::default(), &overrides)
        .unwrap();

    let after = run_trials(&bowl_suite, 20, 0, &overrides).unwrap();
    assert_eq!((after.fsb, after.sr, after.exec), (1.0, 1.0, 1.0));

    // Other objects keep their default motions.
    let cup = run_trials(
        &Experiment::desk("catch the cup", 5, 0, 0.0).unwrap(),
        5,
        0,
        &overrides,
    )
    .unwrap();
    assert_eq!(cup.sr, 1.0);
}

#[test]
fn override_follows_a_moved_bowl() {
    let overrides = OverrideRegistry::new();
    let mut cl = CorrectionLoop::new();
    let ctx = CorrectionContext {
        function: MotionFunction::GraspDefault,
        target_label: "bowl".into(),
        shape: ShapeKind::Bowl,
    };
    let id = cl
        .begin_session(ctx, CorrectionTrigger::OperatorRequest)
        .unwrap();
    demonstrate(&mut cl, id, (0.5, -0.2), (0.57, -0.2));
    cl.finalize_and_fit(id, &DmpConfig::default(), &overrides)
        .unwrap();

    let mut scene = bundled_scene();
    let bowl = scene.iter_mut().find(|o| o.label == "bowl").unwrap();
    bowl.true_pose = hrc_core::Pose2::new(0.35, 0.1, 0.6);
    let mut world = WorldState::from_scene(&scene);
    let backend = PlanBackend::Stub(StubBackend::new(StubTable::builtin(), 0.0, 0).unwrap());
    let plan = build_plan(
        "catch the bowl",
        &backend,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let program = assemble_program(&plan, &perceive_all(&world)).unwrap();
    let report = run_program(
        &mut world,
        &program,
        &overrides,
        &GoalPredicate::infer("catch the bowl"),
    );
    assert!(report.success, "{report:?}");
    assert!(report
        .steps
        .iter()
        .any(|s| s.overridden && s.status == StepStatus::Ok));
}

#[test]
fn unseen_target_is_an_exec_failure() {
    let mut scene = bundled_scene();
    scene.retain(|o| o.label != "cup");
    let world = WorldState::from_scene(&scene);
    let backend = PlanBackend::Stub(StubBackend::new(StubTable::builtin(), 0.0, 0).unwrap());
    let plan = build_plan("catch the cup", &backend, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(assemble_program(&plan, &perceive_all(&world)).is_err());
}
