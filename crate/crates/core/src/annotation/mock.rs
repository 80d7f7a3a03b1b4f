use super::{LongTailAnnotation, PlanIntention, RiskLevel};
use crate::scenario::{
    CameraName, HazardKind, HazardMeta, ManeuverKind, RiskTier, ScenarioRecord, ViewGroup, Visibility,
};

fn risk_of(tier: RiskTier) -> RiskLevel {
    match tier {
        RiskTier::Low => RiskLevel::Low,
        RiskTier::Medium => RiskLevel::Medium,
        RiskTier::High => RiskLevel::High,
    }
}

fn intention_of(kind: ManeuverKind) -> PlanIntention {
    match kind {
        ManeuverKind::GoStraight => PlanIntention::GoStraight,
        ManeuverKind::TurnLeft => PlanIntention::TurnLeft,
        ManeuverKind::TurnRight => PlanIntention::TurnRight,
        ManeuverKind::Stop => PlanIntention::Stop,
    }
}

fn condition_phrase(v: Visibility) -> &'static str {
    match v {
        Visibility::Clear => "clear daylight",
        Visibility::Rain => "rain with wet, reflective pavement",
        Visibility::Fog => "dense fog limiting visibility",
        Visibility::Night => "night-time darkness with limited lighting",
    }
}

fn view_section(group: ViewGroup, meta: &HazardMeta) -> String {
    let (name, base) = match group {
        ViewGroup::Front => ("front", "road ahead with lane markings"),
        ViewGroup::Rear => ("rear", "road behind with following lane"),
        ViewGroup::SideLeft => ("side-left", "adjacent lane and roadside buildings"),
        ViewGroup::SideRight => ("side-right", "curb side and roadside buildings"),
    };
    let mut s = format!("{name}: {base}");
    if group == ViewGroup::Front {
        match meta.maneuver {
            ManeuverKind::TurnLeft => s.push_str(", intersection branching to the left"),
            ManeuverKind::TurnRight => s.push_str(", intersection branching to the right"),
            ManeuverKind::Stop => s.push_str(", stop line across the lane"),
            ManeuverKind::GoStraight => {}
        }
    }
    if meta.camera.group() == group {
        let side = match meta.camera {
            CameraName::FrontLeft | CameraName::RearLeft => " on the left",
            CameraName::FrontRight | CameraName::RearRight => " on the right",
            _ => "",
        };
        s.push_str(&format!(
            ", {}{side} at about {:.0} m",
            meta.kind.noun(),
            meta.distance_m
        ));
        if meta.tier == RiskTier::High {
            s.push_str(" behaving abnormally and close to the ego path");
        }
    } else {
        s.push_str(", no notable hazards");
    }
    s
}

fn plan_text(meta: &HazardMeta) -> String {
    let hazard = meta.kind.noun();
    match (meta.maneuver, meta.tier) {
        (ManeuverKind::Stop, RiskTier::High) => format!("brake firmly and come to a full stop before the {hazard}"),
        (ManeuverKind::Stop, _) => format!("decelerate smoothly and stop at the stop line, watching the {hazard}"),
        (kind, tier) => {
            let speed = match tier {
                RiskTier::Low => "maintain lane and current speed",
                RiskTier::Medium => "reduce speed moderately and be ready to yield",
                RiskTier::High => "slow down substantially and proceed cautiously",
            };
            let turn = match kind {
                ManeuverKind::TurnLeft => " while turning left at the intersection",
                ManeuverKind::TurnRight => " while turning right at the intersection",
                _ => "",
            };
            format!("{speed}{turn}")
        }
    }
}

fn rationale_text(meta: &HazardMeta, record: &ScenarioRecord) -> String {
    let trend = match record.history.last().ax {
        a if a > 0.2 => "accelerating",
        a if a < -0.2 => "decelerating",
        _ => "holding a steady speed",
    };
    let tier_reason = match meta.tier {
        RiskTier::Low => "poses little conflict with the planned path",
        RiskTier::Medium => "may enter the planned path and requires extra margin",
        RiskTier::High => "is close to the planned path and leaves short reaction time",
    };
    let mut s = format!(
        "the {} in the {} view {tier_reason}; the ego vehicle is {trend} under {}",
        meta.kind.noun(),
        meta.camera.as_str().to_ascii_lowercase().replace('_', " "),
        condition_phrase(meta.visibility)
    );
    if matches!(meta.kind, HazardKind::Pedestrian | HazardKind::Cyclist) {
        s.push_str(", and a vulnerable road user is present");
    }
    s
}

/// Rule-based rendering of the ground-truth hazard descriptor into the five
/// annotation fields.
pub fn annotate_mock(record: &ScenarioRecord) -> LongTailAnnotation {
    let meta = &record.hazard_meta;
    let scene = [ViewGroup::Front, ViewGroup::Rear, ViewGroup::SideLeft, ViewGroup::SideRight]
        .iter()
        .map(|g| view_section(*g, meta))
        .collect::<Vec<_>>()
        .join("; ");
    let scene = format!("{scene}; conditions: {}.", condition_phrase(meta.visibility));
    LongTailAnnotation::new(
        scene,
        risk_of(meta.tier),
        intention_of(meta.maneuver),
        plan_text(meta),
        rationale_text(meta, record),
    )
    .expect("mock annotation is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::parse_annotation;
    use crate::scenario::generate_scenario;

    #[test]
    fn follows_hazard_meta() {
        let a = annotate_mock(&generate_scenario(1, ManeuverKind::TurnLeft, RiskTier::High));
        assert_eq!(a.intention, PlanIntention::TurnLeft);
        assert_eq!(a.risk_level, RiskLevel::High);
        let a = annotate_mock(&generate_scenario(1, ManeuverKind::Stop, RiskTier::Low));
        assert_eq!(a.intention, PlanIntention::Stop);
        assert_eq!(a.risk_level, RiskLevel::Low);
    }

    #[test]
    fn scene_has_four_viewpoints() {
        let a = annotate_mock(&generate_scenario(2, ManeuverKind::GoStraight, RiskTier::Medium));
        for v in ["front:", "rear:", "side-left:", "side-right:"] {
            assert!(a.scene_description.contains(v), "{v} missing in {}", a.scene_description);
        }
    }

    #[test]
    fn parse_round_trip_over_seeds() {
        for seed in 0..200u64 {
            let kind = ManeuverKind::ALL[(seed % 4) as usize];
            let tier = RiskTier::ALL[(seed % 3) as usize];
            let r = generate_scenario(seed, kind, tier);
            let a = annotate_mock(&r);
            assert_eq!(parse_annotation(&a.serialize()).unwrap(), a, "seed {seed}");
        }
    }
}
