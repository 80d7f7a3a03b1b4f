//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.jsonl            one JSON object per record
//! <dir>/images/<id>/<CAMERA>.png  8-bit RGB
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CameraName, Category, DrivingIntent, EgoState, EgoStateHistory, HazardMeta, MultiViewFrameSet,
    RaterReference, RgbImage, ScenarioError, ScenarioRecord, Trajectory,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    schema_version: u32,
    id: String,
    category: Category,
    intent: DrivingIntent,
    timestep: f64,
    history: Vec<[f64; 6]>,
    future: Trajectory,
    references: Vec<RaterReference>,
    hazard_meta: HazardMeta,
    images: BTreeMap<CameraName, String>,
}

fn image_rel_path(id: &str, cam: CameraName) -> String {
    format!("images/{id}/{}.png", cam.as_str())
}

/// Writes all records and returns the manifest path. The manifest is written
/// last, through a temporary file, so a crashed save never leaves a manifest
/// that points at missing images.
pub fn save_dataset(records: &[ScenarioRecord], dir: &Path) -> Result<PathBuf, ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| ScenarioError::io(dir, e))?;
    let mut manifest = Vec::new();
    for rec in records {
        rec.validate()?;
        let img_dir = dir.join("images").join(&rec.id);
        fs::create_dir_all(&img_dir).map_err(|e| ScenarioError::io(&img_dir, e))?;
        let mut images = BTreeMap::new();
        for cam in CameraName::ALL {
            let rel = image_rel_path(&rec.id, cam);
            let path = dir.join(&rel);
            fs::write(&path, rec.frames.view(cam).encode_png()).map_err(|e| ScenarioError::io(&path, e))?;
            images.insert(cam, rel);
        }
        let entry = ManifestEntry {
            schema_version: SCHEMA_VERSION,
            id: rec.id.clone(),
            category: rec.category,
            intent: rec.intent,
            timestep: rec.history.timestep(),
            history: rec.history.states().iter().map(EgoState::to_array).collect(),
            future: rec.future.clone(),
            references: rec.references.clone(),
            hazard_meta: rec.hazard_meta.clone(),
            images,
        };
        serde_json::to_writer(&mut manifest, &entry).expect("manifest entry serializes");
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST_FILE);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| ScenarioError::io(dir, e))?;
    tmp.write_all(&manifest).map_err(|e| ScenarioError::io(&path, e))?;
    tmp.persist(&path).map_err(|e| ScenarioError::io(&path, e.error))?;
    Ok(path)
}

fn load_image(dir: &Path, rel: &str) -> Result<RgbImage, ScenarioError> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| ScenarioError::CorruptAsset {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    RgbImage::decode_png(&bytes).map_err(|reason| ScenarioError::CorruptAsset {
        path: path.display().to_string(),
        reason,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ScenarioRecord>, ScenarioError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(ScenarioError::MissingManifest(path.display().to_string()));
    }
    let file = fs::File::open(&path).map_err(|e| ScenarioError::io(&path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ScenarioError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ScenarioError::MalformedManifest { line: i + 1, reason };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| malformed("missing schema_version".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(ScenarioError::SchemaVersion {
                found: found as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let history = EgoStateHistory::new(
            entry.history.into_iter().map(EgoState::from_array).collect(),
            entry.timestep,
        )
        .map_err(malformed)?;
        let mut views = Vec::with_capacity(CameraName::ALL.len());
        for cam in CameraName::ALL {
            let rel = entry
                .images
                .get(&cam)
                .ok_or_else(|| malformed(format!("no image path for camera {cam}")))?;
            views.push(load_image(dir, rel)?);
        }
        let frames = MultiViewFrameSet::new(views).map_err(malformed)?;
        let rec = ScenarioRecord {
            id: entry.id,
            frames,
            history,
            intent: entry.intent,
            future: entry.future,
            references: entry.references,
            category: entry.category,
            hazard_meta: entry.hazard_meta,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}
