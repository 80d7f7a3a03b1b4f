use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::render_view;
use super::{
    CameraName, DrivingIntent, EgoState, EgoStateHistory, HazardKind, HazardMeta,
    MultiViewFrameSet, RaterReference, RiskTier, ScenarioRecord, Trajectory, Visibility,
    FUTURE_LEN, HISTORY_LEN, TIMESTEP_S,
};

/// Ground-truth maneuver executed over the future horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    GoStraight,
    TurnLeft,
    TurnRight,
    Stop,
}

impl ManeuverKind {
    pub const ALL: [ManeuverKind; 4] = [
        ManeuverKind::GoStraight,
        ManeuverKind::TurnLeft,
        ManeuverKind::TurnRight,
        ManeuverKind::Stop,
    ];

    /// Route command shown to the planner. Stops happen on straight routes.
    pub fn route_intent(self) -> DrivingIntent {
        match self {
            ManeuverKind::GoStraight | ManeuverKind::Stop => DrivingIntent::GoStraight,
            ManeuverKind::TurnLeft => DrivingIntent::TurnLeft,
            ManeuverKind::TurnRight => DrivingIntent::TurnRight,
        }
    }
}

/// Fraction of the nominal speed kept under each risk tier.
pub(crate) fn tier_speed_factor(tier: RiskTier) -> f64 {
    match tier {
        RiskTier::Low => 1.0,
        RiskTier::Medium => 0.72,
        RiskTier::High => 0.42,
    }
}

/// Multiplier on the time to standstill for stop maneuvers.
pub(crate) fn tier_stop_factor(tier: RiskTier) -> f64 {
    match tier {
        RiskTier::Low => 1.0,
        RiskTier::Medium => 0.8,
        RiskTier::High => 0.6,
    }
}

/// Speed cap while turning, m/s.
pub(crate) const TURN_SPEED_CAP: f64 = 7.0;
/// Time constant of the first-order speed response, s.
pub(crate) const SPEED_TAU_S: f64 = 1.2;
/// Waypoints are stored on a 1/1024 m grid so cumulative sums of differences are exact.
const QUANTUM: f64 = 1.0 / 1024.0;
const SUBSTEPS: usize = 25;
/// Probability that the route command is withheld (intent = unknown).
const UNKNOWN_INTENT_PROB: f64 = 0.15;

/// Seed-only random draws. Kept separate so that changing the maneuver or
/// tier never shifts the random stream.
#[derive(Debug, Clone)]
pub(crate) struct Draws {
    pub speed: f64,
    pub hist_accel: f64,
    pub wobble_amp: f64,
    pub wobble_freq: f64,
    pub hazard: HazardKind,
    pub visibility: Visibility,
    pub hazard_distance: f64,
    pub hazard_camera_pick: f64,
    pub turn_radius: f64,
    pub turn_start: f64,
    pub stop_time: f64,
    pub unknown_intent: bool,
    pub ref_lateral: f64,
    pub ref_score: f64,
    pub ref_slow: Option<f64>,
    pub render_seed: u64,
}

impl Draws {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speed = rng.random_range(4.0..14.0);
        let hist_accel = rng.random_range(-0.5..0.5);
        let wobble_amp = rng.random_range(0.0..0.1);
        let wobble_freq = rng.random_range(0.3..1.0);
        let hazard = HazardKind::ALL[rng.random_range(0..HazardKind::ALL.len())];
        let visibility = Visibility::ALL[rng.random_range(0..Visibility::ALL.len())];
        let hazard_distance = rng.random_range(8.0..40.0);
        let hazard_camera_pick = rng.random_range(0.0..1.0);
        let turn_radius = rng.random_range(8.0..14.0);
        let turn_start = rng.random_range(0.25..1.25);
        let stop_time = rng.random_range(2.0..3.5);
        let unknown_intent = rng.random_bool(UNKNOWN_INTENT_PROB);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let ref_lateral = side * rng.random_range(0.8..2.0);
        let ref_score = rng.random_range(6.5..8.5);
        let ref_slow = rng
            .random_bool(0.5)
            .then(|| rng.random_range(0.7..0.85));
        let render_seed = rng.random();
        Draws {
            speed,
            hist_accel,
            wobble_amp,
            wobble_freq,
            hazard,
            visibility,
            hazard_distance,
            hazard_camera_pick,
            turn_radius,
            turn_start,
            stop_time,
            unknown_intent,
            ref_lateral,
            ref_score,
            ref_slow,
            render_seed,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v / QUANTUM).round() * QUANTUM
}

fn hazard_camera(kind: HazardKind, pick: f64) -> CameraName {
    use CameraName::*;
    let options: &[CameraName] = match kind {
        HazardKind::CrossingVehicle => &[FrontLeft, FrontRight, Front],
        HazardKind::ConstructionZone => &[Front, FrontRight],
        HazardKind::Cyclist => &[SideRight, FrontRight, Front],
        HazardKind::Pedestrian => &[Front, FrontLeft, FrontRight],
        HazardKind::NarrowLane => &[Front],
        HazardKind::DenseTraffic => &[SideLeft, SideRight, RearLeft],
        HazardKind::EmergencyVehicle => &[Rear, RearLeft, RearRight],
        HazardKind::CutInVehicle => &[FrontLeft, FrontRight],
        HazardKind::Animal => &[Front, SideLeft],
        HazardKind::Debris => &[Front],
    };
    let i = ((pick * options.len() as f64) as usize).min(options.len() - 1);
    options[i]
}

/// Ego history at t = -15Δt .. 0: constant longitudinal acceleration plus a
/// small lateral wobble that is zero at t = 0.
pub(crate) fn history_from_draws(d: &Draws) -> EgoStateHistory {
    let states = (0..HISTORY_LEN)
        .map(|k| {
            let t = (k as f64 - (HISTORY_LEN - 1) as f64) * TIMESTEP_S;
            let w = d.wobble_freq;
            EgoState {
                x: d.speed * t + 0.5 * d.hist_accel * t * t,
                y: d.wobble_amp * (1.0 - (w * t).cos()),
                vx: d.speed + d.hist_accel * t,
                vy: d.wobble_amp * w * (w * t).sin(),
                ax: d.hist_accel,
                ay: d.wobble_amp * w * w * (w * t).cos(),
            }
        })
        .collect();
    EgoStateHistory::new(states, TIMESTEP_S).expect("generated history is well-formed")
}

/// Target cruising speed over the future horizon (non-stop maneuvers).
pub(crate) fn target_speed(d: &Draws, kind: ManeuverKind, tier: RiskTier) -> f64 {
    let nominal = match kind {
        ManeuverKind::TurnLeft | ManeuverKind::TurnRight => d.speed.min(TURN_SPEED_CAP),
        _ => d.speed,
    };
    nominal * tier_speed_factor(tier)
}

/// Integrates a unicycle from the current pose (origin, heading +x, speed
/// `d.speed`) and samples it at 4 Hz.
pub(crate) fn future_from_draws(d: &Draws, kind: ManeuverKind, tier: RiskTier) -> Vec<[f64; 2]> {
    let dt = TIMESTEP_S / SUBSTEPS as f64;
    let (mut x, mut y, mut heading, mut v) = (0.0f64, 0.0f64, 0.0f64, d.speed);
    let stop_decel = d.speed / (d.stop_time * tier_stop_factor(tier));
    let v_target = target_speed(d, kind, tier);
    let (turn_sign, heading_goal) = match kind {
        ManeuverKind::TurnLeft => (1.0, std::f64::consts::FRAC_PI_2),
        ManeuverKind::TurnRight => (-1.0, -std::f64::consts::FRAC_PI_2),
        _ => (0.0, 0.0),
    };
    let mut out = Vec::with_capacity(FUTURE_LEN);
    let mut t = 0.0;
    for _ in 0..FUTURE_LEN {
        for _ in 0..SUBSTEPS {
            let accel = match kind {
                ManeuverKind::Stop => {
                    if v > 0.0 {
                        -stop_decel
                    } else {
                        0.0
                    }
                }
                _ => (v_target - v) / SPEED_TAU_S,
            };
            let yaw_rate = if turn_sign != 0.0 && t >= d.turn_start && heading.abs() < heading_goal.abs() {
                turn_sign * v / d.turn_radius
            } else {
                0.0
            };
            // midpoint integration
            let v_mid = (v + 0.5 * accel * dt).max(0.0);
            let h_mid = heading + 0.5 * yaw_rate * dt;
            x += v_mid * h_mid.cos() * dt;
            y += v_mid * h_mid.sin() * dt;
            v = (v + accel * dt).max(0.0);
            heading += yaw_rate * dt;
            if turn_sign != 0.0 && heading.abs() > heading_goal.abs() {
                heading = heading_goal;
            }
            t += dt;
        }
        out.push([quantize(x), quantize(y)]);
    }
    out
}

fn references_from(future: &[[f64; 2]], d: &Draws) -> Vec<RaterReference> {
    let gt = Trajectory::new(future.to_vec()).expect("future is well-formed");
    let mut refs = vec![RaterReference {
        trajectory: gt,
        score: 10.0,
    }];
    let n = future.len() as f64;
    let shifted: Vec<[f64; 2]> = future
        .iter()
        .enumerate()
        .map(|(k, p)| [p[0], quantize(p[1] + d.ref_lateral * (k as f64 + 1.0) / n)])
        .collect();
    refs.push(RaterReference {
        trajectory: Trajectory::new(shifted).expect("shifted reference is well-formed"),
        score: (d.ref_score * 4.0).round() / 4.0,
    });
    if let Some(f) = d.ref_slow {
        let slow: Vec<[f64; 2]> = future.iter().map(|p| [quantize(p[0] * f), quantize(p[1] * f)]).collect();
        refs.push(RaterReference {
            trajectory: Trajectory::new(slow).expect("slowed reference is well-formed"),
            score: 5.0,
        });
    }
    refs
}

/// Deterministic synthetic long-tail scenario.
pub fn generate_scenario(seed: u64, kind: ManeuverKind, tier: RiskTier) -> ScenarioRecord {
    let d = Draws::from_seed(seed);
    let history = history_from_draws(&d);
    let future_pts = future_from_draws(&d, kind, tier);
    let references = references_from(&future_pts, &d);
    let future = Trajectory::new(future_pts).expect("future is well-formed");
    let intent = if d.unknown_intent {
        DrivingIntent::Unknown
    } else {
        kind.route_intent()
    };
    let hazard_meta = HazardMeta {
        kind: d.hazard,
        tier,
        visibility: d.visibility,
        camera: hazard_camera(d.hazard, d.hazard_camera_pick),
        distance_m: (d.hazard_distance * 4.0).round() / 4.0,
        maneuver: kind,
    };
    let views = CameraName::ALL
        .iter()
        .map(|&cam| render_view(cam, &hazard_meta, d.render_seed))
        .collect();
    let frames = MultiViewFrameSet::new(views).expect("eight equally sized views");
    ScenarioRecord {
        id: format!(
            "s{seed:010}-{}-{}",
            match kind {
                ManeuverKind::GoStraight => "straight",
                ManeuverKind::TurnLeft => "left",
                ManeuverKind::TurnRight => "right",
                ManeuverKind::Stop => "stop",
            },
            tier.as_str()
        ),
        frames,
        history,
        intent,
        future,
        references,
        category: d.hazard.category(),
        hazard_meta,
    }
}

/// `count` scenarios with maneuver and tier drawn from `seed`.
pub fn generate_dataset(seed: u64, count: usize) -> Vec<ScenarioRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A_u64);
    (0..count)
        .map(|_| {
            let scenario_seed = rng.random_range(0..10_000_000_000u64);
            let kind = ManeuverKind::ALL[rng.random_range(0..ManeuverKind::ALL.len())];
            let tier = RiskTier::ALL[rng.random_range(0..RiskTier::ALL.len())];
            generate_scenario(scenario_seed, kind, tier)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_speed(t: &Trajectory) -> f64 {
        t.path_length() / super::super::HORIZON_S
    }

    #[test]
    fn deterministic_records() {
        let a = generate_scenario(7, ManeuverKind::GoStraight, RiskTier::Low);
        let b = generate_scenario(7, ManeuverKind::GoStraight, RiskTier::Low);
        assert_eq!(a, b);
    }

    #[test]
    fn left_turn_ends_left() {
        let r = generate_scenario(3, ManeuverKind::TurnLeft, RiskTier::Low);
        assert!(r.future.waypoints()[19][1] > 0.0);
        let r = generate_scenario(3, ManeuverKind::TurnRight, RiskTier::Low);
        assert!(r.future.waypoints()[19][1] < 0.0);
    }

    /// Closed-form mean speed of the first-order speed response
    /// v(t) = vt + (v0 - vt) e^{-t/tau} averaged over five seconds.
    fn analytic_mean_speed(v0: f64, vt: f64) -> f64 {
        let h = super::super::HORIZON_S;
        vt + (v0 - vt) * SPEED_TAU_S * (1.0 - (-h / SPEED_TAU_S).exp()) / h
    }

    #[test]
    fn high_tier_is_slower() {
        let d = Draws::from_seed(3);
        let expect_low = analytic_mean_speed(d.speed, target_speed(&d, ManeuverKind::GoStraight, RiskTier::Low));
        let expect_high = analytic_mean_speed(d.speed, target_speed(&d, ManeuverKind::GoStraight, RiskTier::High));
        assert!(expect_high < expect_low);

        let low = generate_scenario(3, ManeuverKind::GoStraight, RiskTier::Low);
        let high = generate_scenario(3, ManeuverKind::GoStraight, RiskTier::High);
        assert!((mean_speed(&low.future) - expect_low).abs() < 1e-2);
        assert!((mean_speed(&high.future) - expect_high).abs() < 1e-2);
        assert!(mean_speed(&high.future) < mean_speed(&low.future));
    }

    #[test]
    fn continuity_and_stop_property() {
        for seed in 0..50u64 {
            for kind in ManeuverKind::ALL {
                for tier in RiskTier::ALL {
                    let r = generate_scenario(seed, kind, tier);
                    let last = r.history.last();
                    let pred = [last.x + last.vx * TIMESTEP_S, last.y + last.vy * TIMESTEP_S];
                    let p0 = r.future.waypoints()[0];
                    let gap = ((p0[0] - pred[0]).powi(2) + (p0[1] - pred[1]).powi(2)).sqrt();
                    assert!(gap <= 0.5, "seed {seed} {kind:?} gap {gap}");
                    match kind {
                        ManeuverKind::TurnLeft => assert!(r.future.final_point()[1] > 0.0),
                        ManeuverKind::TurnRight => assert!(r.future.final_point()[1] < 0.0),
                        ManeuverKind::Stop => {
                            let w = r.future.waypoints();
                            let tail: f64 = (16..20)
                                .map(|k| ((w[k][0] - w[k - 1][0]).powi(2) + (w[k][1] - w[k - 1][1]).powi(2)).sqrt())
                                .sum();
                            assert!(tail < 1.0, "seed {seed} tail {tail}");
                        }
                        ManeuverKind::GoStraight => {}
                    }
                    r.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn tier_monotone_speed_for_all_kinds() {
        for seed in 0..30u64 {
            for kind in ManeuverKind::ALL {
                let low = generate_scenario(seed, kind, RiskTier::Low);
                let high = generate_scenario(seed, kind, RiskTier::High);
                assert!(mean_speed(&high.future) < mean_speed(&low.future), "seed {seed} {kind:?}");
            }
        }
    }

    #[test]
    fn waypoints_on_grid() {
        let r = generate_scenario(11, ManeuverKind::TurnRight, RiskTier::Medium);
        for p in r.future.waypoints() {
            for v in p {
                assert_eq!((v * 1024.0).fract(), 0.0);
            }
        }
    }

    #[test]
    fn dataset_generation_is_seeded() {
        let a = generate_dataset(1, 5);
        let b = generate_dataset(1, 5);
        assert_eq!(a, b);
        let ids: std::collections::HashSet<_> = a.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), 5);
    }
}
