use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ade, fde, render_trajectory_plot, rfs, EvalError, RfsParams};
use crate::embedding::{load_embeddings, EmbeddingError, InstructionEmbeddings};
use crate::model::{load_checkpoint, AblationFlags, ModelInput, TriModalNet};
use crate::scenario::{
    load_dataset, load_split_ids, partition_by_ids, split_dataset, Category, DatasetSplit, ScenarioRecord,
    SplitRatios, Trajectory,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const RFS_LABEL: &str = "RFS (surrogate)";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rfs: f64,
    pub ade3: f64,
    pub ade5: f64,
    pub fde3: f64,
    pub fde5: f64,
}

impl Metrics {
    const ZERO: Metrics = Metrics {
        rfs: 0.0,
        ade3: 0.0,
        ade5: 0.0,
        fde3: 0.0,
        fde5: 0.0,
    };

    /// Metric values in table order.
    pub fn values(&self) -> [f64; 5] {
        [self.rfs, self.ade3, self.ade5, self.fde3, self.fde5]
    }

    pub const LABELS: [&'static str; 5] = ["RFS", "ADE@3s", "ADE@5s", "FDE@3s", "FDE@5s"];

    pub fn compute(pred: &[[f64; 2]], record: &ScenarioRecord, params: &RfsParams) -> Result<Metrics, EvalError> {
        let gt = record.future.waypoints();
        Ok(Metrics {
            rfs: rfs(pred, &record.references, params)?,
            ade3: ade(pred, gt, 3.0)?,
            ade5: ade(pred, gt, 5.0)?,
            fde3: fde(pred, gt, 3.0)?,
            fde5: fde(pred, gt, 5.0)?,
        })
    }

    fn add(&mut self, o: &Metrics) {
        self.rfs += o.rfs;
        self.ade3 += o.ade3;
        self.ade5 += o.ade5;
        self.fde3 += o.fde3;
        self.fde5 += o.fde5;
    }

    fn scaled(&self, k: f64) -> Metrics {
        Metrics {
            rfs: self.rfs * k,
            ade3: self.ade3 * k,
            ade5: self.ade5 * k,
            fde3: self.fde3 * k,
            fde5: self.fde5 * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: Category,
    pub count: usize,
    /// `None` when the split holds no record of this category.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordResult {
    pub id: String,
    pub category: Category,
    pub metrics: Metrics,
    pub prediction: Vec<[f64; 2]>,
}

/// Which part of the dataset split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }

    fn take<T>(self, split: DatasetSplit<T>) -> Vec<T> {
        match self {
            EvalSplit::Train => split.train,
            EvalSplit::Val => split.val,
            EvalSplit::Test => split.test,
        }
    }
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rfs_label: String,
    pub rfs_params: RfsParams,
    pub checkpoint: Option<String>,
    pub ablation: Option<String>,
    pub split: Option<EvalSplit>,
    pub count: usize,
    pub global: Metrics,
    /// One entry per category, in [`Category::ALL`] order.
    pub per_category: Vec<CategoryMetrics>,
    /// Sorted by id.
    pub records: Vec<RecordResult>,
}

impl EvalReport {
    /// Aggregates per-record results. Sums are taken in id order within each
    /// category and then in category order, so the result does not depend
    /// on the order of `results`.
    pub fn from_results(mut results: Vec<RecordResult>, rfs_params: RfsParams) -> Result<EvalReport, EvalError> {
        if results.is_empty() {
            return Err(EvalError::EmptySplit);
        }
        results.sort_by(|a, b| a.id.cmp(&b.id));
        let mut total = Metrics::ZERO;
        let mut per_category = Vec::with_capacity(Category::ALL.len());
        for cat in Category::ALL {
            let mut sum = Metrics::ZERO;
            let mut count = 0;
            for r in results.iter().filter(|r| r.category == cat) {
                sum.add(&r.metrics);
                count += 1;
            }
            total.add(&sum);
            per_category.push(CategoryMetrics {
                category: cat,
                count,
                metrics: (count > 0).then(|| sum.scaled(1.0 / count as f64)),
            });
        }
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            rfs_label: RFS_LABEL.into(),
            rfs_params,
            checkpoint: None,
            ablation: None,
            split: None,
            count: results.len(),
            global: total.scaled(1.0 / results.len() as f64),
            per_category,
            records: results,
        })
    }

    pub fn category(&self, cat: Category) -> Option<&CategoryMetrics> {
        self.per_category.iter().find(|c| c.category == cat)
    }

    /// Structural checks applied to reports read from disk.
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Report(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!(
                "schema version {}, expected {REPORT_SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if self.rfs_label != RFS_LABEL {
            return bad(format!("rfs label {:?}, expected {RFS_LABEL:?}", self.rfs_label));
        }
        if self.per_category.len() != Category::ALL.len() {
            return bad(format!("{} categories, expected {}", self.per_category.len(), Category::ALL.len()));
        }
        for (c, want) in self.per_category.iter().zip(Category::ALL) {
            if c.category != want {
                return bad(format!("category {want} missing or out of order (found {})", c.category));
            }
            if (c.count > 0) != c.metrics.is_some() {
                return bad(format!("category {want}: count {} inconsistent with metrics", c.count));
            }
        }
        let counted: usize = self.per_category.iter().map(|c| c.count).sum();
        if counted != self.count || self.records.len() != self.count {
            return bad(format!(
                "count {} but categories sum to {counted} and {} records are listed",
                self.count,
                self.records.len()
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<EvalReport, EvalError> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<EvalReport, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        EvalReport::from_json(&text).map_err(|e| match e {
            EvalError::Report(m) => EvalError::Report(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Plain-text table: metrics as rows, `Global` followed by the ten
    /// categories as columns.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}  split={}  ablation={}  records={}",
            self.rfs_label,
            self.split.map_or("-", |s| s.as_str()),
            self.ablation.as_deref().unwrap_or("-"),
            self.count
        );
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint: {c}");
        }
        let mut header = vec!["Metric".to_string(), "Global".to_string()];
        header.extend(Category::ALL.iter().map(|c| c.name().to_string()));
        let mut rows = vec![header];
        for (k, label) in Metrics::LABELS.iter().enumerate() {
            let mut row = vec![label.to_string(), format!("{:.2}", self.global.values()[k])];
            row.extend(
                self.per_category
                    .iter()
                    .map(|c| c.metrics.map_or("-".into(), |m| format!("{:.2}", m.values()[k]))),
            );
            rows.push(row);
        }
        let mut count_row = vec!["Count".to_string(), self.count.to_string()];
        count_row.extend(self.per_category.iter().map(|c| c.count.to_string()));
        rows.push(count_row);
        out.push_str(&table(&rows));
        out
    }
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
            out.push_str(&"-".repeat(rule));
            out.push('\n');
        }
    }
    out
}

/// One row per labelled report: `Method | RFS | ADE@3s | ADE@5s | FDE@3s | FDE@5s`.
pub fn render_ablation_table(rows: &[(String, &EvalReport)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(Metrics::LABELS.iter().map(|s| s.to_string()));
    let mut out = vec![header];
    for (name, report) in rows {
        let mut row = vec![name.clone()];
        row.extend(report.global.values().iter().map(|v| format!("{v:.2}")));
        out.push(row);
    }
    table(&out)
}

/// Produces a trajectory for a record.
pub trait Planner {
    fn plan(&self, record: &ScenarioRecord) -> Result<Trajectory, EvalError>;
}

/// Returns the ground truth; useful to check the harness itself.
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn plan(&self, record: &ScenarioRecord) -> Result<Trajectory, EvalError> {
        Ok(record.future.clone())
    }
}

pub struct ModelPlanner<'a> {
    pub net: &'a TriModalNet<f32>,
    pub flags: AblationFlags,
    /// Keyed by record id; may be `None` with `no_instruction`.
    pub embeddings: Option<&'a BTreeMap<String, InstructionEmbeddings>>,
}

impl Planner for ModelPlanner<'_> {
    fn plan(&self, record: &ScenarioRecord) -> Result<Trajectory, EvalError> {
        let emb = if self.flags.no_instruction {
            None
        } else {
            let e = self.embeddings.and_then(|m| m.get(&record.id));
            Some(e.ok_or_else(|| EvalError::MissingEmbeddings {
                id: record.id.clone(),
                dir: "<in-memory>".into(),
            })?)
        };
        let input = ModelInput::from_record(record, emb, &self.net.config)?;
        Ok(self.net.predict(&input, self.flags)?)
    }
}

/// Runs `planner` over `records` and aggregates the metrics.
pub fn evaluate(records: &[ScenarioRecord], planner: &dyn Planner, params: &RfsParams) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let results = records
        .iter()
        .map(|r| {
            let pred = planner.plan(r)?;
            let prediction = pred.waypoints().to_vec();
            Ok(RecordResult {
                id: r.id.clone(),
                category: r.category,
                metrics: Metrics::compute(&prediction, r, params)?,
                prediction,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    EvalReport::from_results(results, *params)
}

/// Loads the checkpoint and the requested split, and evaluates it. The
/// ablation flags default to those recorded in the checkpoint. Returns the
/// evaluated records too, for plotting.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset_dir: &Path,
    embeddings_dir: Option<&Path>,
    split: EvalSplit,
    flags: Option<AblationFlags>,
    params: &RfsParams,
) -> Result<(EvalReport, Vec<ScenarioRecord>), EvalError> {
    let (net, meta) = load_checkpoint(checkpoint)?;
    let flags = match flags {
        Some(f) => f,
        None => match meta.get("ablation") {
            Some(name) => AblationFlags::from_name(name)
                .ok_or_else(|| EvalError::Report(format!("checkpoint has unknown ablation {name:?}")))?,
            None => AblationFlags::BASE,
        },
    };
    let records = load_dataset(dataset_dir)?;
    let parts = match load_split_ids(dataset_dir)? {
        Some(ids) => partition_by_ids(records, &ids)?,
        None => {
            let seed = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
            split_dataset(records, SplitRatios::default(), seed)?
        }
    };
    let records = split.take(parts);
    if records.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let embeddings = match (flags.no_instruction, embeddings_dir) {
        (true, _) => None,
        (false, None) => {
            return Err(EvalError::MissingEmbeddings {
                id: records[0].id.clone(),
                dir: "<not given>".into(),
            })
        }
        (false, Some(dir)) => {
            let mut map = BTreeMap::new();
            for r in &records {
                let e = load_embeddings(dir, &r.id).map_err(|e| match e {
                    EmbeddingError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                        EvalError::MissingEmbeddings {
                            id: r.id.clone(),
                            dir: dir.display().to_string(),
                        }
                    }
                    other => EvalError::Embedding(other),
                })?;
                map.insert(r.id.clone(), e);
            }
            Some(map)
        }
    };
    let planner = ModelPlanner {
        net: &net,
        flags,
        embeddings: embeddings.as_ref(),
    };
    let mut report = evaluate(&records, &planner, params)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    report.ablation = Some(flags.name());
    report.split = Some(split);
    Ok((report, records))
}

/// Writes `report.json`, `report.txt` and, when `records` is non-empty, one
/// overlay plot per category under `plots/` (the first record by id).
/// Returns the written paths.
pub fn write_report(report: &EvalReport, records: &[ScenarioRecord], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |e| EvalError::Io { path, source: e }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    let json = out_dir.join(REPORT_JSON);
    fs::write(&json, report.to_json()).map_err(io(&json))?;
    written.push(json);
    let txt = out_dir.join(REPORT_TXT);
    fs::write(&txt, report.render_text()).map_err(io(&txt))?;
    written.push(txt);
    if records.is_empty() {
        return Ok(written);
    }
    let by_id: BTreeMap<&str, &ScenarioRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let plots = out_dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots).map_err(io(&plots))?;
    for cat in Category::ALL {
        let Some(res) = report.records.iter().find(|r| r.category == cat) else {
            continue;
        };
        let Some(rec) = by_id.get(res.id.as_str()) else {
            continue;
        };
        let img = render_trajectory_plot(rec.future.waypoints(), &res.prediction, &rec.references);
        let path = plots.join(format!("{}.png", res.id));
        fs::write(&path, img.encode_png()).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_dataset;
    use proptest::prelude::*;

    struct Shift(f64, f64);

    impl Planner for Shift {
        fn plan(&self, r: &ScenarioRecord) -> Result<Trajectory, EvalError> {
            let w = r.future.waypoints().iter().map(|p| [p[0] + self.0, p[1] + self.1]).collect();
            Ok(Trajectory::new(w).unwrap())
        }
    }

    #[test]
    fn oracle_gives_zero_error_and_best_reference_score() {
        let records = generate_dataset(3, 20);
        let report = evaluate(&records, &OraclePlanner, &RfsParams::default()).unwrap();
        assert_eq!(report.global.ade3, 0.0);
        assert_eq!(report.global.fde5, 0.0);
        for r in &report.records {
            let rec = records.iter().find(|x| x.id == r.id).unwrap();
            let best = rec.references.iter().map(|x| x.score).fold(f64::MIN, f64::max);
            assert_eq!(r.metrics.rfs, best);
            assert_eq!(r.metrics.ade5, 0.0);
        }
        report.validate().unwrap();
    }

    #[test]
    fn constant_offset_report() {
        let records = generate_dataset(4, 12);
        let report = evaluate(&records, &Shift(3.0, 4.0), &RfsParams::default()).unwrap();
        for v in [report.global.ade3, report.global.ade5, report.global.fde3, report.global.fde5] {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_split_is_an_error() {
        assert!(matches!(
            evaluate(&[], &OraclePlanner, &RfsParams::default()),
            Err(EvalError::EmptySplit)
        ));
    }

    #[test]
    fn json_round_trip_and_schema_checks() {
        let records = generate_dataset(5, 10);
        let report = evaluate(&records, &Shift(0.5, 0.0), &RfsParams::default()).unwrap();
        let back = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);

        let mut missing = report.clone();
        missing.per_category.remove(3);
        assert!(matches!(EvalReport::from_json(&missing.to_json()), Err(EvalError::Report(_))));
        let mut version = report.clone();
        version.schema_version = 99;
        assert!(EvalReport::from_json(&version.to_json()).is_err());
        let text = report.to_json().replace("\"Cyclists\"", "\"Bicycles\"");
        assert!(EvalReport::from_json(&text).is_err());
    }

    #[test]
    fn text_table_follows_category_order() {
        let records = generate_dataset(6, 30);
        let report = evaluate(&records, &OraclePlanner, &RfsParams::default()).unwrap();
        let text = report.render_text();
        assert!(text.starts_with(RFS_LABEL));
        let header = text.lines().find(|l| l.starts_with("Metric")).unwrap();
        let mut last = header.find("Global").unwrap();
        for c in Category::ALL {
            let pos = header.find(c.name()).unwrap();
            assert!(pos > last, "{c} out of order");
            last = pos;
        }
        let ablation = render_ablation_table(&[("Base".into(), &report), ("No State".into(), &report)]);
        assert_eq!(ablation.lines().count(), 4);
        assert!(ablation.lines().next().unwrap().starts_with("Method"));
    }

    #[test]
    fn write_report_produces_files() {
        let records = generate_dataset(8, 12);
        let report = evaluate(&records, &Shift(0.0, 1.0), &RfsParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(&report, &records, dir.path()).unwrap();
        let present = report.per_category.iter().filter(|c| c.count > 0).count();
        assert_eq!(paths.len(), 2 + present);
        let back = EvalReport::load(&dir.path().join(REPORT_JSON)).unwrap();
        assert_eq!(back, report);
        let png = fs::read(&paths[2]).unwrap();
        assert!(crate::scenario::RgbImage::decode_png(&png).is_ok());
    }

    fn result(id: usize, cat: usize, m: [f64; 5]) -> RecordResult {
        RecordResult {
            id: format!("r{id:04}"),
            category: Category::ALL[cat],
            metrics: Metrics {
                rfs: m[0],
                ade3: m[1],
                ade5: m[2],
                fde3: m[3],
                fde5: m[4],
            },
            prediction: Vec::new(),
        }
    }

    proptest! {
        #[test]
        fn global_is_count_weighted_category_mean(
            rows in prop::collection::vec((0usize..10, prop::array::uniform5(0.0f64..20.0)), 1..80),
            rot in 0usize..80,
        ) {
            let results: Vec<_> = rows.iter().enumerate().map(|(i, (c, m))| result(i, *c, *m)).collect();
            let report = EvalReport::from_results(results.clone(), RfsParams::default()).unwrap();
            for k in 0..5 {
                let weighted: f64 = report
                    .per_category
                    .iter()
                    .filter_map(|c| c.metrics.map(|m| m.values()[k] * c.count as f64))
                    .sum::<f64>() / report.count as f64;
                prop_assert!((weighted - report.global.values()[k]).abs() <= 1e-9);
            }
            let mut rotated = results;
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            let again = EvalReport::from_results(rotated, RfsParams::default()).unwrap();
            prop_assert_eq!(again, report);
        }
    }
}
