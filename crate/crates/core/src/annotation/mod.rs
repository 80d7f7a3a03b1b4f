//! Structured long-tail annotation: prompt construction, the five-field
//! output format, a deterministic rule-based annotator and an HTTP client for
//! a remote vision-language endpoint.

mod mock;
mod prompt;
mod remote;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use mock::annotate_mock;
pub use prompt::{build_prompt, prompt_hash, PromptBundle, SYSTEM_PROMPT};
pub use remote::{
    annotate_remote_batch, EndpointConfig, HttpResponse, HttpTransport, RemoteAnnotation, RemoteAnnotator,
    RemoteError, UreqTransport,
};
pub use store::{load_annotation, save_annotation, AnnotationSource, StoredAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
        }
    }
}

impl FromStr for RiskLevel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(RiskLevel::Low),
            "medium" => Ok(RiskLevel::Medium),
            "high" => Ok(RiskLevel::High),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanIntention {
    GoStraight,
    TurnLeft,
    TurnRight,
    Stop,
}

impl PlanIntention {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanIntention::GoStraight => "go straight",
            PlanIntention::TurnLeft => "turn left",
            PlanIntention::TurnRight => "turn right",
            PlanIntention::Stop => "stop",
        }
    }
}

impl FromStr for PlanIntention {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "go straight" => Ok(PlanIntention::GoStraight),
            "turn left" => Ok(PlanIntention::TurnLeft),
            "turn right" => Ok(PlanIntention::TurnRight),
            "stop" => Ok(PlanIntention::Stop),
            _ => Err(()),
        }
    }
}

/// The five output fields, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationField {
    SceneDescription,
    RiskLevel,
    TrajectoryIntention,
    HighLevelPlan,
    PlanRationale,
}

impl AnnotationField {
    pub const ORDER: [AnnotationField; 5] = [
        AnnotationField::SceneDescription,
        AnnotationField::RiskLevel,
        AnnotationField::TrajectoryIntention,
        AnnotationField::HighLevelPlan,
        AnnotationField::PlanRationale,
    ];

    pub fn marker(self) -> &'static str {
        match self {
            AnnotationField::SceneDescription => "[scene description]",
            AnnotationField::RiskLevel => "[risk level]",
            AnnotationField::TrajectoryIntention => "[trajectory intention]",
            AnnotationField::HighLevelPlan => "[high-level plan]",
            AnnotationField::PlanRationale => "[plan rationale]",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AnnotationField::SceneDescription => "scene_description",
            AnnotationField::RiskLevel => "risk_level",
            AnnotationField::TrajectoryIntention => "trajectory_intention",
            AnnotationField::HighLevelPlan => "high_level_plan",
            AnnotationField::PlanRationale => "plan_rationale",
        }
    }
}

impl fmt::Display for AnnotationField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing field {0}")]
    MissingField(AnnotationField),
    #[error("unknown value {token:?} for field {field}")]
    UnknownEnumValue { field: AnnotationField, token: String },
    #[error("unexpected content outside the five fields: {0:?}")]
    ExtraContent(String),
}

/// Five-field teacher output. Text fields are trimmed, non-empty and free of
/// field markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongTailAnnotation {
    pub scene_description: String,
    pub risk_level: RiskLevel,
    pub intention: PlanIntention,
    pub high_level_plan: String,
    pub rationale: String,
}

fn contains_marker(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    AnnotationField::ORDER.iter().any(|f| lower.contains(f.marker()))
}

impl LongTailAnnotation {
    pub fn new(
        scene_description: impl Into<String>,
        risk_level: RiskLevel,
        intention: PlanIntention,
        high_level_plan: impl Into<String>,
        rationale: impl Into<String>,
    ) -> Result<Self, ParseError> {
        let a = LongTailAnnotation {
            scene_description: scene_description.into(),
            risk_level,
            intention,
            high_level_plan: high_level_plan.into(),
            rationale: rationale.into(),
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), ParseError> {
        for (field, text) in [
            (AnnotationField::SceneDescription, &self.scene_description),
            (AnnotationField::HighLevelPlan, &self.high_level_plan),
            (AnnotationField::PlanRationale, &self.rationale),
        ] {
            if text.trim().is_empty() || text.trim() != text.as_str() {
                return Err(ParseError::MissingField(field));
            }
            if contains_marker(text) {
                return Err(ParseError::ExtraContent(text.clone()));
            }
        }
        Ok(())
    }

    /// Canonical five-field text form.
    pub fn serialize(&self) -> String {
        format!(
            "{} {}\n{} {}\n{} {}\n{} {}\n{} {}",
            AnnotationField::SceneDescription.marker(),
            self.scene_description,
            AnnotationField::RiskLevel.marker(),
            self.risk_level.as_str(),
            AnnotationField::TrajectoryIntention.marker(),
            self.intention.as_str(),
            AnnotationField::HighLevelPlan.marker(),
            self.high_level_plan,
            AnnotationField::PlanRationale.marker(),
            self.rationale,
        )
    }

    /// Text encoded into the planning embedding.
    pub fn planning_text(&self) -> String {
        format!(
            "risk: {}. intention: {}. plan: {}. rationale: {}.",
            self.risk_level.as_str(),
            self.intention.as_str(),
            self.high_level_plan,
            self.rationale
        )
    }
}

/// Parses the five bracketed fields. Markers match case-insensitively and
/// must appear exactly once each, in order; nothing but whitespace may
/// precede the first one.
pub fn parse_annotation(raw: &str) -> Result<LongTailAnnotation, ParseError> {
    // ASCII lowering keeps byte offsets aligned with `raw`.
    let lower = raw.to_ascii_lowercase();
    let mut starts = Vec::with_capacity(5);
    let mut cursor = 0;
    for field in AnnotationField::ORDER {
        match lower[cursor..].find(field.marker()) {
            Some(off) => {
                let pos = cursor + off;
                starts.push(pos);
                cursor = pos + field.marker().len();
            }
            None => return Err(ParseError::MissingField(field)),
        }
    }
    let preamble = raw[..starts[0]].trim();
    if !preamble.is_empty() {
        return Err(ParseError::ExtraContent(preamble.to_string()));
    }
    let mut values = Vec::with_capacity(5);
    for (i, field) in AnnotationField::ORDER.iter().enumerate() {
        let begin = starts[i] + field.marker().len();
        let end = starts.get(i + 1).copied().unwrap_or(raw.len());
        let value = raw[begin..end].trim();
        if contains_marker(value) {
            return Err(ParseError::ExtraContent(value.to_string()));
        }
        if value.is_empty() {
            return Err(ParseError::MissingField(*field));
        }
        values.push(value.to_string());
    }
    let risk_level = values[1].parse().map_err(|_| ParseError::UnknownEnumValue {
        field: AnnotationField::RiskLevel,
        token: values[1].clone(),
    })?;
    let intention = values[2].parse().map_err(|_| ParseError::UnknownEnumValue {
        field: AnnotationField::TrajectoryIntention,
        token: values[2].clone(),
    })?;
    let mut it = values.into_iter();
    let scene = it.next().unwrap();
    let plan = it.nth(2).unwrap();
    let rationale = it.next().unwrap();
    LongTailAnnotation::new(scene, risk_level, intention, plan, rationale)
}
