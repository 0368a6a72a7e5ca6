use mimic_core::physics::{Action, MorphologySpec, SimConfig, SimState, Simulator};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: f64 = 0.002;

fn walker() -> Simulator {
    Simulator::new(MorphologySpec::walker2d(), SimConfig::default()).unwrap()
}

fn free_link() -> Simulator {
    let morph = MorphologySpec::from_json(
        r#"{"name": "brick",
            "links": [{"name": "brick", "length": 0.4, "mass": 2.0, "inertia": 0.03, "half_width": 0.1}],
            "joints": [], "feet": [0], "torso": 0}"#,
    )
    .unwrap();
    Simulator::new(morph, SimConfig::default()).unwrap()
}

fn lifted(sim: &Simulator, seed: u64, height: f64) -> SimState {
    let mut s = sim.reset(seed);
    s.root_pos[1] += height;
    s
}

fn run(sim: &Simulator, mut s: SimState, action: &Action, steps: usize) -> SimState {
    for _ in 0..steps {
        s = sim.step(&s, action, DT).unwrap();
    }
    s
}

#[test]
fn dropped_link_matches_free_fall_velocity() {
    let sim = free_link();
    let s = run(&sim, lifted(&sim, 0, 3.0), &Action::zeros(0), 100);
    let expected = -9.81 * 0.2;
    assert!((s.root_vel[1] - expected).abs() <= 0.01 * expected.abs(), "vy {}", s.root_vel[1]);
    assert!(s.foot_contact.iter().all(|&c| !c));
    assert!((s.foot_air_time[0] - 0.2).abs() < 1e-9);
}

#[test]
fn airborne_walker_com_follows_a_parabola() {
    let sim = walker();
    let mut s = lifted(&sim, 2, 3.0);
    s.root_vel = [1.5, 2.0];
    let c0 = sim.center_of_mass(&s);
    let (vx, vy) = (s.root_vel[0], s.root_vel[1]);
    let steps = 100;
    let s = run(&sim, s, &Action::zeros(6), steps);
    let t = steps as f64 * DT;
    let c = sim.center_of_mass(&s);
    let oracle = [c0[0] + vx * t, c0[1] + vy * t - 0.5 * 9.81 * t * t];
    let travelled = ((oracle[0] - c0[0]).powi(2) + (oracle[1] - c0[1]).powi(2)).sqrt();
    let err = ((c[0] - oracle[0]).powi(2) + (c[1] - oracle[1]).powi(2)).sqrt();
    assert!(err <= 0.01 * travelled, "error {err} over {travelled}");
}

#[test]
fn resting_body_does_not_drift() {
    let sim = walker();
    let s0 = sim.reset(0);
    let s = run(&sim, s0.clone(), &Action::zeros(6), 1000);
    assert!((s.root_pos[1] - s0.root_pos[1]).abs() < 1e-3, "drift {}", s.root_pos[1] - s0.root_pos[1]);
}

#[test]
fn zero_torque_stand_survives_500_steps() {
    for morph in [MorphologySpec::walker2d(), MorphologySpec::hopper2d()] {
        let sim = Simulator::new(morph, SimConfig::default()).unwrap();
        let a = Action::zeros(sim.morphology().num_joints());
        let mut s = sim.reset(7);
        for i in 0..500 {
            s = sim.step(&s, &a, DT).unwrap();
            assert!(!sim.is_fallen(&s), "{} fell at step {i}", sim.morphology().name);
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let sim = walker();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let actions: Vec<Action> = (0..400).map(|_| Action((0..6).map(|_| rng.random_range(-60.0..60.0)).collect())).collect();
    let roll = || {
        let mut s = sim.reset(3);
        let mut trace = Vec::new();
        for a in &actions {
            s = sim.step(&s, a, DT).unwrap();
            trace.push(s.clone());
        }
        trace
    };
    let (a, b) = (roll(), roll());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
        for (p, q) in x.joint_angles.iter().zip(&y.joint_angles) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}

#[test]
fn unpowered_energy_does_not_grow() {
    let sim = walker();
    let mut s = lifted(&sim, 5, 0.3);
    s.joint_vels = vec![1.0, -0.5, 0.5, -1.0, 0.5, -0.5];
    let a = Action::zeros(6);
    let e0 = sim.energy(&s);
    let mut peak = e0;
    for _ in 0..1500 {
        s = sim.step(&s, &a, DT).unwrap();
        peak = peak.max(sim.energy(&s));
    }
    // per-step O(dt^2) fluctuation only
    assert!(peak - e0 < 0.05, "energy rose by {}", peak - e0);
    assert!(sim.energy(&s) < e0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn joint_angles_stay_within_limits(seed in 0u64..1000, scale in 0.2f64..1.0) {
        let sim = walker();
        let limits: Vec<[f64; 2]> = sim.morphology().joints.iter().map(|j| j.limits).collect();
        let torque = sim.morphology().torque_limits();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sim.reset(seed);
        for _ in 0..300 {
            let a = Action(torque.iter().map(|t| scale * t * rng.random_range(-1.0..=1.0)).collect());
            s = sim.step(&s, &a, DT).unwrap();
            for (q, l) in s.joint_angles.iter().zip(&limits) {
                prop_assert!(*q >= l[0] && *q <= l[1], "angle {} outside {:?}", q, l);
            }
            prop_assert!(s.foot_air_time.iter().all(|&t| t >= 0.0));
            for (c, t) in s.foot_contact.iter().zip(&s.foot_air_time) {
                prop_assert!(!c || *t == 0.0);
            }
        }
    }
}
