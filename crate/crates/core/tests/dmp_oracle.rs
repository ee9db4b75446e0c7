//! Fitted primitives checked against an independent fine-step RK4 integrator.

use std::f64::consts::PI;

use hrc_core::dmp::{
    fit_dmp, DmpConfig, DmpModel, Integrator, RolloutSpec, Trajectory, DEFAULT_SETTLE_FACTOR,
};
use proptest::prelude::*;

const ORACLE_DT: f64 = 1e-4;

/// Integrates the transformation system straight from the model parameters.
/// Returns `(t, y)` at every oracle step.
fn oracle(
    model: &DmpModel,
    dof: usize,
    y0: f64,
    goal: f64,
    tau: f64,
    settle: f64,
) -> Vec<(f64, f64)> {
    let fitted_amp = model.g[dof] - model.y0[dof];
    let new_amp = goal - y0;
    let scale = if fitted_amp.abs() < 1e-6 && new_amp.abs() < 1e-6 {
        1.0
    } else {
        new_amp
    };
    let forcing = |x: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for ((c, h), w) in model
            .centers
            .iter()
            .zip(&model.widths)
            .zip(&model.weights[dof])
        {
            let psi = (-h * (x - c) * (x - c)).exp();
            num += psi * w;
            den += psi;
        }
        if den < 1e-300 {
            0.0
        } else {
            num / den * x * scale
        }
    };
    let rhs = |s: [f64; 3]| -> [f64; 3] {
        let [x, y, z] = s;
        [
            -model.alpha_x * x / tau,
            z / tau,
            (model.alpha_z * (model.beta_z * (goal - y) - z) + forcing(x)) / tau,
        ]
    };
    let steps = (settle * tau / ORACLE_DT).round() as usize;
    let mut s = [1.0, y0, 0.0];
    let mut out = vec![(0.0, y0)];
    for k in 1..=steps {
        let add =
            |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
        let k1 = rhs(s);
        let k2 = rhs(add(s, k1, ORACLE_DT / 2.0));
        let k3 = rhs(add(s, k2, ORACLE_DT / 2.0));
        let k4 = rhs(add(s, k3, ORACLE_DT));
        for i in 0..3 {
            s[i] += ORACLE_DT / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push((k as f64 * ORACLE_DT, s[1]));
    }
    out
}

fn at(path: &[(f64, f64)], t: f64) -> f64 {
    let k = ((t / ORACLE_DT).round() as usize).min(path.len() - 1);
    path[k].1
}

fn demo(n: usize, profile: impl Fn(f64) -> f64) -> Trajectory {
    let times: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let values: Vec<f64> = times.iter().map(|&s| profile(s)).collect();
    Trajectory::from_scalar(&times, &values).unwrap()
}

fn min_jerk(s: f64) -> f64 {
    10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5)
}

fn half_cosine(s: f64) -> f64 {
    0.5 * (1.0 - (PI * s).cos())
}

fn rmse(demo: &Trajectory, path: &[(f64, f64)]) -> f64 {
    let sum: f64 = demo
        .samples()
        .iter()
        .map(|s| (at(path, s.t) - s.y[0]).powi(2))
        .sum();
    (sum / demo.len() as f64).sqrt()
}

#[test]
fn reconstruction_against_oracle() {
    for (name, profile) in [
        ("min-jerk", min_jerk as fn(f64) -> f64),
        ("half-cosine", half_cosine),
    ] {
        let d = demo(101, profile);
        let model = fit_dmp(&d, &DmpConfig::default()).unwrap();
        let path = oracle(&model, 0, 0.0, 1.0, model.tau, DEFAULT_SETTLE_FACTOR);
        let err = rmse(&d, &path);
        assert!(err < 0.02, "{name}: rmse {err}");

        // The library integrator at tau/200 tracks the fine-step oracle.
        let lib = model.reproduce().unwrap();
        for s in lib.samples() {
            assert!(
                (s.y[0] - at(&path, s.t)).abs() < 1e-4,
                "{name} at t={}",
                s.t
            );
        }
    }
}

#[test]
fn polynomial_with_offset_reconstructs() {
    let d = demo(201, |s| 0.2 + 0.5 * s * s);
    let model = fit_dmp(&d, &DmpConfig::default()).unwrap();
    let path = oracle(&model, 0, 0.2, 0.7, model.tau, DEFAULT_SETTLE_FACTOR);
    assert!(rmse(&d, &path) < 0.02 * 0.5);
}

#[test]
fn goal_generalization_endpoints() {
    let model = fit_dmp(&demo(101, min_jerk), &DmpConfig::default()).unwrap();
    for goal in [0.5, 2.0, -1.0] {
        let path = oracle(&model, 0, 0.0, goal, model.tau, DEFAULT_SETTLE_FACTOR);
        let end = path.last().unwrap().1;
        assert!(
            (end - goal).abs() < 1e-3,
            "oracle end {end} for goal {goal}"
        );

        let lib = model
            .rollout(&[0.0], &[goal], model.tau, model.tau / 200.0)
            .unwrap();
        let lib_end = lib.last().unwrap().y[0];
        assert!(
            (lib_end - goal).abs() < 1e-3,
            "library end {lib_end} for goal {goal}"
        );
    }
}

#[test]
fn temporal_scaling_equivalence() {
    let model = fit_dmp(&demo(101, half_cosine), &DmpConfig::default()).unwrap();
    let base = oracle(&model, 0, 0.0, 1.0, 1.0, 1.5);
    let slow = oracle(&model, 0, 0.0, 1.0, 2.0, 1.5);
    for k in 0..=150 {
        let t = k as f64 * 0.01;
        assert!((at(&slow, 2.0 * t) - at(&base, t)).abs() < 1e-3, "t={t}");
    }
    let lib_base = model.rollout(&[0.0], &[1.0], 1.0, 1.0 / 200.0).unwrap();
    let lib_slow = model.rollout(&[0.0], &[1.0], 2.0, 2.0 / 200.0).unwrap();
    for s in lib_base.samples() {
        let stretched = lib_slow.position_at(2.0 * s.t).unwrap()[0];
        assert!((stretched - s.y[0]).abs() < 1e-3);
    }
}

fn zero_model(tau: f64) -> DmpModel {
    let mut model = fit_dmp(&demo(51, |_| 0.0), &DmpConfig::default()).unwrap();
    for w in &mut model.weights {
        w.iter_mut().for_each(|v| *v = 0.0);
    }
    model.tau = tau;
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_forcing_is_monotone_without_overshoot(
        y0 in -1.0f64..1.0,
        goal in -1.0f64..1.0,
        tau in 0.3f64..3.0,
    ) {
        let model = zero_model(tau);
        let path = model.rollout(&[y0], &[goal], tau, tau / 200.0).unwrap();
        let dir = (goal - y0).signum();
        let ys: Vec<f64> = path.samples().iter().map(|s| s.y[0]).collect();
        for w in ys.windows(2) {
            prop_assert!(dir * (w[1] - w[0]) >= -1e-12);
        }
        for y in &ys {
            prop_assert!(dir * (y - goal) <= 1e-6);
        }
    }

    #[test]
    fn euler_and_rk4_agree_to_first_order(
        amplitude in prop_oneof![0.05f64..2.0, -2.0f64..-0.05],
        steps_per_tau in 200usize..2000,
    ) {
        let model = fit_dmp(&demo(101, min_jerk), &DmpConfig::default()).unwrap();
        let dt = model.tau / steps_per_tau as f64;
        let spec = |integrator| RolloutSpec {
            y0: vec![0.0],
            goal: vec![amplitude],
            tau: model.tau,
            dt,
            settle_factor: 1.5,
            integrator,
        };
        let euler = model.rollout_with(&spec(Integrator::Euler)).unwrap();
        let rk4 = model.rollout_with(&spec(Integrator::Rk4)).unwrap();
        let worst = euler
            .samples()
            .iter()
            .zip(rk4.samples())
            .map(|(a, b)| (a.y[0] - b.y[0]).abs())
            .fold(0.0, f64::max);
        prop_assert!(worst < 10.0 * dt * amplitude.abs(), "worst {worst}");
    }

    #[test]
    fn rollout_starts_at_requested_start(y0 in -1.0f64..1.0, goal in -1.0f64..1.0) {
        let model = fit_dmp(&demo(101, half_cosine), &DmpConfig::default()).unwrap();
        let path = model.rollout(&[y0], &[goal], model.tau, model.tau / 100.0).unwrap();
        prop_assert_eq!(path.samples()[0].y[0], y0);
    }
}

#[test]
fn two_dof_arc_fits_each_axis() {
    let times: Vec<f64> = (0..121).map(|k| k as f64 / 120.0).collect();
    let samples = times
        .iter()
        .map(|&t| {
            let a = 0.5 * PI * min_jerk(t);
            hrc_core::dmp::Sample::new(t, vec![0.3 * a.cos(), 0.3 * a.sin()])
        })
        .collect();
    let traj = Trajectory::new(samples).unwrap();
    let model = fit_dmp(&traj, &DmpConfig::default()).unwrap();
    for dof in 0..2 {
        let path = oracle(
            &model,
            dof,
            model.y0[dof],
            model.g[dof],
            model.tau,
            DEFAULT_SETTLE_FACTOR,
        );
        assert!((path.last().unwrap().1 - model.g[dof]).abs() < 1e-3);
    }
}
