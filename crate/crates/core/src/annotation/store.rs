use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LongTailAnnotation, RiskLevel, PlanIntention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Mock,
    Remote,
}

/// On-disk form of one annotation: `annotations/<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub scene_description: String,
    pub risk_level: RiskLevel,
    pub intention: PlanIntention,
    pub high_level_plan: String,
    pub rationale: String,
    pub source: AnnotationSource,
    pub prompt_hash: String,
}

impl StoredAnnotation {
    pub fn new(a: &LongTailAnnotation, source: AnnotationSource, prompt_hash: String) -> Self {
        StoredAnnotation {
            scene_description: a.scene_description.clone(),
            risk_level: a.risk_level,
            intention: a.intention,
            high_level_plan: a.high_level_plan.clone(),
            rationale: a.rationale.clone(),
            source,
            prompt_hash,
        }
    }

    pub fn annotation(&self) -> LongTailAnnotation {
        LongTailAnnotation {
            scene_description: self.scene_description.clone(),
            risk_level: self.risk_level,
            intention: self.intention,
            high_level_plan: self.high_level_plan.clone(),
            rationale: self.rationale.clone(),
        }
    }
}

pub fn annotation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn save_annotation(dir: &Path, id: &str, stored: &StoredAnnotation) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = annotation_path(dir, id);
    let text = serde_json::to_string_pretty(stored).expect("annotation serializes");
    fs::write(&path, text)?;
    Ok(path)
}

pub fn load_annotation(dir: &Path, id: &str) -> std::io::Result<StoredAnnotation> {
    let path = annotation_path(dir, id);
    let text = fs::read_to_string(&path)?;
    let stored: StoredAnnotation = serde_json::from_str(&text)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
    stored
        .annotation()
        .validate()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))?;
    Ok(stored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::annotate_mock;
    use crate::scenario::{generate_scenario, ManeuverKind, RiskTier};

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = generate_scenario(8, ManeuverKind::TurnLeft, RiskTier::Medium);
        let s = StoredAnnotation::new(&annotate_mock(&r), AnnotationSource::Mock, "abc".into());
        let p = save_annotation(dir.path(), &r.id, &s).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        for key in ["scene_description", "risk_level", "intention", "high_level_plan", "rationale", "source", "prompt_hash"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["source"], "mock");
        assert_eq!(load_annotation(dir.path(), &r.id).unwrap(), s);
    }
}
