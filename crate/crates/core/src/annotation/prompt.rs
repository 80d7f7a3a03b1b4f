use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::scenario::{CameraName, RgbImage, ScenarioRecord};

/// Fixed instruction text sent to the annotating model.
pub const SYSTEM_PROMPT: &str = "\
# Input Specification
System Role: You are an autonomous driving planner specializing in safety-critical long-tail scenario analysis. Your task is to identify rare hazardous elements and generate risk-aware planning strategies.
Camera Images: You are given four grouped image inputs with fixed ordering: Image 1 contains FRONT_LEFT, FRONT, and FRONT_RIGHT views; Image 2 contains REAR_LEFT, REAR, and REAR_RIGHT views; Image 3 contains the SIDE_LEFT view; Image 4 contains the SIDE_RIGHT view. The ego-centric coordinate frame follows the convention that the forward direction is positive and the left direction is positive.
Motion States: You are provided with historical ego vehicle motion states expressed in the same ego-centric coordinate frame as the camera inputs, including past positions [x, y], velocities [v_x, v_y], and accelerations [a_x, a_y] over multiple timesteps. A high-level driving intent is also provided as one of {unknown, go straight, turn left, turn right}. Use this information to infer motion trends and detect anomalous behaviors.

# Long-Tail Scene Context
Scene Description: Describe the driving scene using a multi-view structure organized by viewpoint. Report observations separately for the front, rear, side-left, and side-right views. Focus on objective, image-grounded descriptions of the scene. Include basic traffic elements such as road layout, lanes, vehicles, pedestrians, cyclists, obstacles, buildings, and intersections. Pay special attention to long-tail hazards, including occlusions, abnormal agent behaviors, rare objects, adverse environmental conditions, and compound edge cases involving multiple simultaneous risks.

# Long-Tail Planning Context
Risk Level: Assess the overall safety risk of the scenario and classify it as low, medium, or high based on scene complexity, vulnerable road users, collision likelihood, and reaction time.
Intention: Infer the high-level driving maneuver for the ego vehicle. Choose one action from go straight, turn left, turn right, or stop.
High-Level Planning: Provide a concise planning directive describing the intended driving behavior, such as maintaining lane, yielding, braking, or proceeding cautiously.
Planning Rationale: Briefly explain the reasoning behind the selected plan. The explanation should be grounded in observable scene elements or ego vehicle dynamics and should not introduce unobserved information.

# Output Constraint
Output Format: Produce exactly five output fields in the following order: [scene description], [risk level], [trajectory intention], [high-level plan], and [plan rationale]. No additional information should be included beyond these fields.";

/// Everything sent to the annotator for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    /// front triple, rear triple, side-left, side-right
    pub image_groups: [RgbImage; 4],
    pub motion_text: String,
}

fn motion_text(record: &ScenarioRecord) -> String {
    let h = &record.history;
    let n = h.states().len();
    let mut out = String::from("Historical ego motion states (oldest first):\n");
    for (k, s) in h.states().iter().enumerate() {
        let t = (k as f64 - (n - 1) as f64) * h.timestep();
        writeln!(
            out,
            "t={t:+.2}s: [x, y]=[{:.3}, {:.3}], [v_x, v_y]=[{:.3}, {:.3}], [a_x, a_y]=[{:.3}, {:.3}]",
            s.x, s.y, s.vx, s.vy, s.ax, s.ay
        )
        .expect("write to string");
    }
    write!(out, "High-level driving intent: {}", record.intent.label()).expect("write to string");
    out
}

pub fn build_prompt(record: &ScenarioRecord) -> PromptBundle {
    use CameraName::*;
    let f = &record.frames;
    PromptBundle {
        system_text: SYSTEM_PROMPT.to_string(),
        image_groups: [
            RgbImage::hconcat(&[f.view(FrontLeft), f.view(Front), f.view(FrontRight)]),
            RgbImage::hconcat(&[f.view(RearLeft), f.view(Rear), f.view(RearRight)]),
            f.view(SideLeft).clone(),
            f.view(SideRight).clone(),
        ],
        motion_text: motion_text(record),
    }
}

/// SHA-256 over the prompt text and raw pixels, hex encoded.
pub fn prompt_hash(bundle: &PromptBundle) -> String {
    let mut h = Sha256::new();
    h.update(bundle.system_text.as_bytes());
    h.update([0u8]);
    h.update(bundle.motion_text.as_bytes());
    for img in &bundle.image_groups {
        h.update(img.width.to_le_bytes());
        h.update(img.height.to_le_bytes());
        h.update(&img.data);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, DrivingIntent, ManeuverKind, RiskTier, IMAGE_SIZE};

    #[test]
    fn four_groups_in_order() {
        let r = generate_scenario(5, ManeuverKind::TurnLeft, RiskTier::High);
        let p = build_prompt(&r);
        assert_eq!(p.image_groups[0].width, 3 * IMAGE_SIZE);
        assert_eq!(p.image_groups[1].width, 3 * IMAGE_SIZE);
        assert_eq!(p.image_groups[2], *r.frames.view(CameraName::SideLeft));
        assert_eq!(p.image_groups[3], *r.frames.view(CameraName::SideRight));
        // middle tile of group 1 is FRONT
        let front = r.frames.view(CameraName::Front);
        for y in [0, 100, 223] {
            for x in [0, 57, 223] {
                assert_eq!(p.image_groups[0].pixel(IMAGE_SIZE + x, y), front.pixel(x, y));
            }
        }
        assert!(p.system_text.contains("the left direction is positive"));
        assert_eq!(p.motion_text.lines().filter(|l| l.starts_with("t=")).count(), 16);
    }

    #[test]
    fn intent_label_in_motion_text() {
        let mut r = generate_scenario(5, ManeuverKind::TurnLeft, RiskTier::Low);
        r.intent = DrivingIntent::TurnLeft;
        assert!(build_prompt(&r).motion_text.contains("turn left"));
    }

    #[test]
    fn deterministic_bundle_and_hash() {
        let r = generate_scenario(9, ManeuverKind::Stop, RiskTier::Medium);
        let (a, b) = (build_prompt(&r), build_prompt(&r));
        assert_eq!(a, b);
        assert_eq!(prompt_hash(&a), prompt_hash(&b));
        assert_eq!(prompt_hash(&a).len(), 64);
    }
}
