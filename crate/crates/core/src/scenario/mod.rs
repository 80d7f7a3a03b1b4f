//! Scenario data model, synthetic long-tail scenario generation, persistence
//! and splitting.

mod generate;
mod render;
mod split;
mod store;

use serde::{Deserialize, Serialize};
use std::fmt;

pub use generate::{generate_dataset, generate_scenario, ManeuverKind};
pub use render::render_view;
pub use split::{
    load_split_ids, partition_by_ids, save_split_ids, split_dataset, split_indices, DatasetSplit, SplitRatios,
    SPLITS_FILE,
};
pub use store::{load_dataset, save_dataset, MANIFEST_FILE, SCHEMA_VERSION};

/// Number of ego-state frames in every history.
pub const HISTORY_LEN: usize = 16;
/// Number of future waypoints in every trajectory.
pub const FUTURE_LEN: usize = 20;
/// Seconds between consecutive history frames and between future waypoints (4 Hz).
pub const TIMESTEP_S: f64 = 0.25;
/// Planning horizon covered by a [`Trajectory`].
pub const HORIZON_S: f64 = 5.0;
/// Side length of every rendered camera image.
pub const IMAGE_SIZE: u32 = 224;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("missing manifest: {0}")]
    MissingManifest(String),
    #[error("corrupt or missing asset {path}: {reason}")]
    CorruptAsset { path: String, reason: String },
    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("cannot split {0} records into three non-empty parts")]
    TooFewRecords(usize),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScenarioError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ScenarioError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl EgoState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        EgoState {
            x: v[0],
            y: v[1],
            vx: v[2],
            vy: v[3],
            ax: v[4],
            ay: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Sixteen chronologically ordered ego states, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoStateHistory {
    states: Vec<EgoState>,
    timestep: f64,
}

impl EgoStateHistory {
    pub fn new(states: Vec<EgoState>, timestep: f64) -> Result<Self, String> {
        if states.len() != HISTORY_LEN {
            return Err(format!(
                "history must have exactly {HISTORY_LEN} frames, got {}",
                states.len()
            ));
        }
        if !states.iter().all(EgoState::is_finite) {
            return Err("history contains non-finite values".into());
        }
        if !(timestep.is_finite() && timestep > 0.0) {
            return Err(format!("invalid history timestep {timestep}"));
        }
        Ok(EgoStateHistory { states, timestep })
    }

    pub fn states(&self) -> &[EgoState] {
        &self.states
    }

    pub fn timestep(&self) -> f64 {
        self.timestep
    }

    /// Most recent frame (t = 0).
    pub fn last(&self) -> &EgoState {
        &self.states[HISTORY_LEN - 1]
    }
}

/// High-level route command given to the planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DrivingIntent {
    Unknown = 0,
    GoStraight = 1,
    TurnLeft = 2,
    TurnRight = 3,
}

impl DrivingIntent {
    pub const ALL: [DrivingIntent; 4] = [
        DrivingIntent::Unknown,
        DrivingIntent::GoStraight,
        DrivingIntent::TurnLeft,
        DrivingIntent::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    /// Human-readable label used in prompts.
    pub fn label(self) -> &'static str {
        match self {
            DrivingIntent::Unknown => "unknown",
            DrivingIntent::GoStraight => "go straight",
            DrivingIntent::TurnLeft => "turn left",
            DrivingIntent::TurnRight => "turn right",
        }
    }
}

impl Serialize for DrivingIntent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for DrivingIntent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        DrivingIntent::from_index(v)
            .ok_or_else(|| serde::de::Error::custom(format!("intent {v} not in 0..=3")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraName {
    FrontLeft,
    Front,
    FrontRight,
    RearLeft,
    Rear,
    RearRight,
    SideLeft,
    SideRight,
}

/// Viewpoint group a camera belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewGroup {
    Front = 0,
    Rear = 1,
    SideLeft = 2,
    SideRight = 3,
}

impl CameraName {
    /// Fixed camera order used everywhere (tokens, prompts, storage).
    pub const ALL: [CameraName; 8] = [
        CameraName::FrontLeft,
        CameraName::Front,
        CameraName::FrontRight,
        CameraName::RearLeft,
        CameraName::Rear,
        CameraName::RearRight,
        CameraName::SideLeft,
        CameraName::SideRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CameraName::FrontLeft => "FRONT_LEFT",
            CameraName::Front => "FRONT",
            CameraName::FrontRight => "FRONT_RIGHT",
            CameraName::RearLeft => "REAR_LEFT",
            CameraName::Rear => "REAR",
            CameraName::RearRight => "REAR_RIGHT",
            CameraName::SideLeft => "SIDE_LEFT",
            CameraName::SideRight => "SIDE_RIGHT",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn group(self) -> ViewGroup {
        match self {
            CameraName::FrontLeft | CameraName::Front | CameraName::FrontRight => ViewGroup::Front,
            CameraName::RearLeft | CameraName::Rear | CameraName::RearRight => ViewGroup::Rear,
            CameraName::SideLeft => ViewGroup::SideLeft,
            CameraName::SideRight => ViewGroup::SideRight,
        }
    }
}

impl fmt::Display for CameraName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Tile images left to right. All inputs must share a height.
    pub fn hconcat(images: &[&RgbImage]) -> RgbImage {
        let height = images.first().map_or(0, |i| i.height);
        let width: u32 = images.iter().map(|i| i.width).sum();
        let mut out = RgbImage::new(width, height);
        let mut x0 = 0;
        for img in images {
            assert_eq!(img.height, height, "hconcat requires equal heights");
            for y in 0..height {
                let src = &img.data[(y * img.width * 3) as usize..((y + 1) * img.width * 3) as usize];
                let dst = ((y * width + x0) * 3) as usize;
                out.data[dst..dst + src.len()].copy_from_slice(src);
            }
            x0 += img.width;
        }
        out
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("png header to memory");
            writer.write_image_data(&self.data).expect("png data to memory");
        }
        buf
    }

    pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, String> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| "image too large".to_string())?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(format!(
                "expected 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            ));
        }
        buf.truncate(info.buffer_size());
        Ok(RgbImage {
            width: info.width,
            height: info.height,
            data: buf,
        })
    }
}

/// The eight surround-view images of one frame, in [`CameraName::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewFrameSet {
    views: Vec<RgbImage>,
}

impl MultiViewFrameSet {
    pub fn new(views: Vec<RgbImage>) -> Result<Self, String> {
        if views.len() != CameraName::ALL.len() {
            return Err(format!("expected 8 camera views, got {}", views.len()));
        }
        let (w, h) = (views[0].width, views[0].height);
        if views.iter().any(|v| v.width != w || v.height != h) {
            return Err("camera views differ in resolution".into());
        }
        Ok(MultiViewFrameSet { views })
    }

    pub fn view(&self, camera: CameraName) -> &RgbImage {
        &self.views[camera.index()]
    }

    pub fn views(&self) -> &[RgbImage] {
        &self.views
    }

    pub fn resolution(&self) -> (u32, u32) {
        (self.views[0].width, self.views[0].height)
    }
}

/// Twenty ego-frame waypoints at 4 Hz covering five seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Result<Self, String> {
        if waypoints.len() != FUTURE_LEN {
            return Err(format!(
                "trajectory must have {FUTURE_LEN} waypoints, got {}",
                waypoints.len()
            ));
        }
        if !waypoints.iter().flatten().all(|v| v.is_finite()) {
            return Err("trajectory contains non-finite coordinates".into());
        }
        Ok(Trajectory { waypoints })
    }

    pub fn waypoints(&self) -> &[[f64; 2]] {
        &self.waypoints
    }

    pub fn final_point(&self) -> [f64; 2] {
        self.waypoints[FUTURE_LEN - 1]
    }

    /// Polyline length starting from the ego origin.
    pub fn path_length(&self) -> f64 {
        let mut prev = [0.0, 0.0];
        let mut total = 0.0;
        for p in &self.waypoints {
            total += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
            prev = *p;
        }
        total
    }
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.waypoints.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = Vec::<[f64; 2]>::deserialize(d)?;
        Trajectory::new(w).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterReference {
    pub trajectory: Trajectory,
    pub score: f64,
}

/// The ten long-tail scenario categories used for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Interaction,
    Construction,
    Cyclists,
    Pedestrian,
    #[serde(rename = "Single-Lane")]
    SingleLane,
    #[serde(rename = "Multi-Lane")]
    MultiLane,
    #[serde(rename = "Special Vehicles")]
    SpecialVehicles,
    #[serde(rename = "Cut-ins")]
    CutIns,
    Others,
    #[serde(rename = "FOD")]
    Fod,
}

impl Category {
    /// Reporting column order.
    pub const ALL: [Category; 10] = [
        Category::Interaction,
        Category::Construction,
        Category::Cyclists,
        Category::Pedestrian,
        Category::SingleLane,
        Category::MultiLane,
        Category::SpecialVehicles,
        Category::CutIns,
        Category::Others,
        Category::Fod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Interaction => "Interaction",
            Category::Construction => "Construction",
            Category::Cyclists => "Cyclists",
            Category::Pedestrian => "Pedestrian",
            Category::SingleLane => "Single-Lane",
            Category::MultiLane => "Multi-Lane",
            Category::SpecialVehicles => "Special Vehicles",
            Category::CutIns => "Cut-ins",
            Category::Others => "Others",
            Category::Fod => "FOD",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardKind {
    /// Oncoming or crossing vehicle forcing negotiation.
    CrossingVehicle,
    ConstructionZone,
    Cyclist,
    Pedestrian,
    /// Lane narrowed to a single usable lane.
    NarrowLane,
    /// Dense traffic across several lanes.
    DenseTraffic,
    EmergencyVehicle,
    CutInVehicle,
    Animal,
    Debris,
}

impl HazardKind {
    pub const ALL: [HazardKind; 10] = [
        HazardKind::CrossingVehicle,
        HazardKind::ConstructionZone,
        HazardKind::Cyclist,
        HazardKind::Pedestrian,
        HazardKind::NarrowLane,
        HazardKind::DenseTraffic,
        HazardKind::EmergencyVehicle,
        HazardKind::CutInVehicle,
        HazardKind::Animal,
        HazardKind::Debris,
    ];

    pub fn category(self) -> Category {
        match self {
            HazardKind::CrossingVehicle => Category::Interaction,
            HazardKind::ConstructionZone => Category::Construction,
            HazardKind::Cyclist => Category::Cyclists,
            HazardKind::Pedestrian => Category::Pedestrian,
            HazardKind::NarrowLane => Category::SingleLane,
            HazardKind::DenseTraffic => Category::MultiLane,
            HazardKind::EmergencyVehicle => Category::SpecialVehicles,
            HazardKind::CutInVehicle => Category::CutIns,
            HazardKind::Animal => Category::Others,
            HazardKind::Debris => Category::Fod,
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            HazardKind::CrossingVehicle => "crossing vehicle",
            HazardKind::ConstructionZone => "construction zone with cones",
            HazardKind::Cyclist => "cyclist",
            HazardKind::Pedestrian => "pedestrian",
            HazardKind::NarrowLane => "lane narrowing to a single lane",
            HazardKind::DenseTraffic => "dense multi-lane traffic",
            HazardKind::EmergencyVehicle => "emergency vehicle",
            HazardKind::CutInVehicle => "vehicle cutting in",
            HazardKind::Animal => "animal on the roadway",
            HazardKind::Debris => "debris on the road",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTier {
    Low,
    Medium,
    High,
}

impl RiskTier {
    pub const ALL: [RiskTier; 3] = [RiskTier::Low, RiskTier::Medium, RiskTier::High];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskTier::Low => "low",
            RiskTier::Medium => "medium",
            RiskTier::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Clear,
    Rain,
    Fog,
    Night,
}

impl Visibility {
    pub const ALL: [Visibility; 4] = [
        Visibility::Clear,
        Visibility::Rain,
        Visibility::Fog,
        Visibility::Night,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Visibility::Clear => "clear",
            Visibility::Rain => "rain",
            Visibility::Fog => "fog",
            Visibility::Night => "night",
        }
    }
}

/// Ground-truth hazard descriptor. Only the generator and the mock annotator
/// read it; it is never a model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardMeta {
    pub kind: HazardKind,
    pub tier: RiskTier,
    pub visibility: Visibility,
    /// Camera in which the hazard glyph is drawn.
    pub camera: CameraName,
    pub distance_m: f64,
    pub maneuver: ManeuverKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub id: String,
    pub frames: MultiViewFrameSet,
    pub history: EgoStateHistory,
    pub intent: DrivingIntent,
    pub future: Trajectory,
    pub references: Vec<RaterReference>,
    pub category: Category,
    pub hazard_meta: HazardMeta,
}

impl ScenarioRecord {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |reason: &str| ScenarioError::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.references.is_empty() {
            return Err(fail("no rater references"));
        }
        if self
            .references
            .iter()
            .any(|r| !(0.0..=10.0).contains(&r.score))
        {
            return Err(fail("rater score outside [0, 10]"));
        }
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(fail("id must be a non-empty path-safe string"));
        }
        Ok(())
    }
}
