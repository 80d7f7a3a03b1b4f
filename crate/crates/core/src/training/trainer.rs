use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, lr_at, Adam, TrainConfig, TrainError};
use crate::embedding::{load_embeddings, EmbeddingError, InstructionEmbeddings};
use crate::model::{save_checkpoint, AblationFlags, ModelConfig, ModelInput, Params, TriModalNet};
use crate::scenario::{load_dataset, load_split_ids, partition_by_ids, split_dataset, ScenarioRecord, SplitRatios, Trajectory};

pub const STEPS_CSV: &str = "steps.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.safetensors";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.safetensors";
pub const RUN_MANIFEST: &str = "run.json";
const MANIFEST_VERSION: u32 = 1;
/// Preprocessed inputs are kept in memory below this size.
const INPUT_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean of the epoch's step losses.
    pub train_loss: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
    pub steps_per_epoch: usize,
    pub final_net: TriModalNet<f32>,
    /// Parameters after the epoch with the lowest validation MSE (the final
    /// parameters when there is no validation data).
    pub best_net: TriModalNet<f32>,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
}

impl TrainSummary {
    pub fn initial_loss(&self) -> f64 {
        self.steps.first().map_or(f64::NAN, |s| s.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }
}

/// `run.json`: everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub seed: u64,
    pub ablation: String,
    pub git_describe: String,
    pub dataset_dir: String,
    pub embeddings_dir: Option<String>,
    pub train_records: usize,
    pub val_records: usize,
    pub steps_per_epoch: usize,
    pub steps_csv: String,
    pub final_checkpoint: String,
    pub best_checkpoint: String,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub epochs: Vec<EpochSummary>,
}

/// Output of `git describe`, or `"unknown"` outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Per-step displacements whose running sum reproduces `waypoints`; the
/// first displacement is measured from the origin.
pub fn displacements_from_waypoints(waypoints: &Array2<f64>) -> Array2<f64> {
    let mut d = waypoints.clone();
    for t in (1..d.nrows()).rev() {
        for j in 0..d.ncols() {
            d[[t, j]] -= waypoints[[t - 1, j]];
        }
    }
    d
}

fn target(traj: &Trajectory) -> Array2<f32> {
    let w = traj.waypoints();
    Array2::from_shape_fn((w.len(), 2), |(t, j)| w[t][j] as f32)
}

fn load_embedding_map(
    dir: &Path,
    records: &[&ScenarioRecord],
) -> Result<BTreeMap<String, InstructionEmbeddings>, TrainError> {
    let mut out = BTreeMap::new();
    for r in records {
        let e = load_embeddings(dir, &r.id).map_err(|e| match e {
            EmbeddingError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                TrainError::MissingEmbeddings {
                    id: r.id.clone(),
                    dir: dir.display().to_string(),
                }
            }
            other => TrainError::Embedding(other),
        })?;
        out.insert(r.id.clone(), e);
    }
    Ok(out)
}

struct Inputs<'a> {
    records: &'a [ScenarioRecord],
    embeddings: Option<&'a BTreeMap<String, InstructionEmbeddings>>,
    config: &'a ModelConfig,
    cache: Option<Vec<ModelInput<f32>>>,
}

impl<'a> Inputs<'a> {
    fn new(
        records: &'a [ScenarioRecord],
        embeddings: Option<&'a BTreeMap<String, InstructionEmbeddings>>,
        config: &'a ModelConfig,
    ) -> Result<Self, TrainError> {
        let mut inputs = Inputs {
            records,
            embeddings,
            config,
            cache: None,
        };
        let per_record = 4 * config.num_cameras * config.patches_per_camera() * config.patch_dim();
        if per_record * records.len() <= INPUT_CACHE_BYTES {
            let all = (0..records.len()).map(|i| inputs.build(i)).collect::<Result<Vec<_>, _>>()?;
            inputs.cache = Some(all);
        }
        Ok(inputs)
    }

    fn build(&self, i: usize) -> Result<ModelInput<f32>, TrainError> {
        let r = &self.records[i];
        let e = match self.embeddings {
            Some(map) => Some(map.get(&r.id).ok_or_else(|| TrainError::MissingEmbeddings {
                id: r.id.clone(),
                dir: "<in-memory>".into(),
            })?),
            None => None,
        };
        Ok(ModelInput::from_record(r, e, self.config)?)
    }

    fn with<T>(&self, i: usize, f: impl FnOnce(&ModelInput<f32>) -> T) -> Result<T, TrainError> {
        match &self.cache {
            Some(c) => Ok(f(&c[i])),
            None => Ok(f(&self.build(i)?)),
        }
    }
}

/// Mean squared waypoint error of `net` over `records`.
fn mean_mse(
    net: &TriModalNet<f32>,
    inputs: &Inputs,
    flags: AblationFlags,
) -> Result<f64, TrainError> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, r) in inputs.records.iter().enumerate() {
        let pred = inputs.with(i, |inp| net.forward(inp, flags))??;
        let gt = target(&r.future);
        sum += pred.iter().zip(gt.iter()).map(|(&p, &g)| ((p - g) as f64).powi(2)).sum::<f64>();
        count += pred.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains on in-memory records. `embeddings` must cover every record unless
/// the run has `no_instruction` set, in which case it is never consulted.
pub fn train_records(
    train: &[ScenarioRecord],
    val: &[ScenarioRecord],
    embeddings: Option<&BTreeMap<String, InstructionEmbeddings>>,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<TrainSummary, TrainError> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let flags = tcfg.ablation;
    let embeddings = if flags.no_instruction {
        None
    } else {
        Some(embeddings.ok_or_else(|| TrainError::MissingEmbeddings {
            id: train[0].id.clone(),
            dir: "<none>".into(),
        })?)
    };
    let train_inputs = Inputs::new(train, embeddings, mcfg)?;
    let val_inputs = Inputs::new(val, embeddings, mcfg)?;
    let targets: Vec<Array2<f32>> = train.iter().map(|r| target(&r.future)).collect();

    let mut net = TriModalNet::<f32>::new(mcfg, tcfg.seed)?;
    let mut opt = Adam::new(&net, tcfg.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x5eed));
    let steps_per_epoch = tcfg.steps_per_epoch(train.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = Vec::with_capacity(steps_per_epoch * tcfg.epochs);
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, TriModalNet<f32>)> = None;
    let mut step = 0usize;

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut grads = net.zeroed();
            let n_elems = (batch.len() * mcfg.t_future * 2) as f64;
            let g_scale = (2.0 / n_elems) as f32;
            let mut sq = 0.0f64;
            for &i in batch {
                let (pred, cache) = train_inputs.with(i, |inp| net.forward_train(inp, flags))??;
                let diff = &pred - &targets[i];
                sq += diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>();
                let d_pred = diff * g_scale;
                net.backward(&cache, &d_pred.view(), &mut grads);
            }
            let loss = sq / n_elems;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss });
            }
            let clip = clip_gradients(&mut grads, tcfg.clip_norm)?;
            let lr = lr_at(step, steps_per_epoch, tcfg);
            opt.step(&mut net, &grads, lr);
            log::debug!("step {step} epoch {epoch} loss {loss:.6} lr {lr:.3e} |g| {:.4}", clip.norm);
            steps.push(StepLog {
                step,
                epoch,
                loss,
                lr,
                grad_norm: clip.norm,
            });
            epoch_loss += loss;
            step += 1;
        }
        let val_mse = if tcfg.validate_every_epoch && !val.is_empty() {
            let v = mean_mse(&net, &val_inputs, flags)?;
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, net.clone()));
            }
            Some(v)
        } else {
            None
        };
        let train_loss = epoch_loss / steps_per_epoch as f64;
        log::info!(
            "epoch {}/{} train_loss {train_loss:.5} val_mse {}",
            epoch + 1,
            tcfg.epochs,
            val_mse.map_or("-".into(), |v| format!("{v:.5}"))
        );
        epochs.push(EpochSummary {
            epoch,
            train_loss,
            val_mse,
        });
    }
    let (best_val_mse, best_epoch, best_net) = match best {
        Some((v, e, n)) => (Some(v), e, n),
        None => (None, tcfg.epochs - 1, net.clone()),
    };
    Ok(TrainSummary {
        steps,
        epochs,
        steps_per_epoch,
        final_net: net,
        best_net,
        best_epoch,
        best_val_mse,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_steps_csv(path: &Path, steps: &[StepLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    for s in steps {
        w.serialize(s).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Loads the dataset and its split, trains, and writes `steps.csv`, the
/// final and best checkpoints and `run.json` into `out_dir`.
///
/// The split comes from `splits.json` in `dataset_dir` when present,
/// otherwise from a stratified split seeded with `tcfg.seed`. With
/// `no_instruction` set, `embeddings_dir` is never read.
pub fn train(
    dataset_dir: &Path,
    embeddings_dir: Option<&Path>,
    out_dir: &Path,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(TrainSummary, RunManifest), TrainError> {
    tcfg.validate()?;
    mcfg.validate()?;
    let records = load_dataset(dataset_dir)?;
    let split = match load_split_ids(dataset_dir)? {
        Some(ids) => partition_by_ids(records, &ids)?,
        None => split_dataset(records, SplitRatios::default(), tcfg.seed)?,
    };
    let embeddings = if tcfg.ablation.no_instruction {
        None
    } else {
        let dir = embeddings_dir.ok_or_else(|| TrainError::MissingEmbeddings {
            id: split.train.first().map_or_else(String::new, |r| r.id.clone()),
            dir: "<not given>".into(),
        })?;
        let needed: Vec<&ScenarioRecord> = split.train.iter().chain(&split.val).collect();
        Some(load_embedding_map(dir, &needed)?)
    };
    let summary = train_records(&split.train, &split.val, embeddings.as_ref(), tcfg, mcfg)?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let steps_path = out_dir.join(STEPS_CSV);
    write_steps_csv(&steps_path, &summary.steps)?;
    let mut meta = BTreeMap::new();
    meta.insert("ablation".to_string(), tcfg.ablation.name());
    meta.insert("seed".to_string(), tcfg.seed.to_string());
    let mut final_meta = meta.clone();
    final_meta.insert("epoch".to_string(), (tcfg.epochs - 1).to_string());
    save_checkpoint(&out_dir.join(FINAL_CHECKPOINT), &summary.final_net, &final_meta)?;
    let mut best_meta = meta;
    best_meta.insert("epoch".to_string(), summary.best_epoch.to_string());
    save_checkpoint(&out_dir.join(BEST_CHECKPOINT), &summary.best_net, &best_meta)?;

    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        train_config: tcfg.clone(),
        model_config: mcfg.clone(),
        seed: tcfg.seed,
        ablation: tcfg.ablation.name(),
        git_describe: git_describe(),
        dataset_dir: dataset_dir.display().to_string(),
        embeddings_dir: embeddings.as_ref().and(embeddings_dir).map(|p| p.display().to_string()),
        train_records: split.train.len(),
        val_records: split.val.len(),
        steps_per_epoch: summary.steps_per_epoch,
        steps_csv: STEPS_CSV.into(),
        final_checkpoint: FINAL_CHECKPOINT.into(),
        best_checkpoint: BEST_CHECKPOINT.into(),
        best_epoch: summary.best_epoch,
        best_val_mse: summary.best_val_mse,
        initial_train_loss: summary.initial_loss(),
        final_train_loss: summary.final_loss(),
        epochs: summary.epochs.clone(),
    };
    let manifest_path: PathBuf = out_dir.join(RUN_MANIFEST);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(io_err(&manifest_path))?;
    Ok((summary, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_annotation, HashingEncoder};
    use crate::annotation::annotate_mock;
    use crate::model::cumulative_waypoints;
    use crate::scenario::{generate_dataset, save_dataset};

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_text: 64,
            image_downsample: 8,
            patch_size: 14,
            vit_dim: 16,
            vit_layers: 1,
            state_layers: 1,
            decoder_layers: 1,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    fn embeddings_for(records: &[ScenarioRecord], dim: usize) -> BTreeMap<String, InstructionEmbeddings> {
        let enc = HashingEncoder::new(dim);
        records
            .iter()
            .map(|r| (r.id.clone(), embed_annotation(&enc, &annotate_mock(r)).unwrap()))
            .collect()
    }

    #[test]
    fn teacher_forced_loss_is_exactly_zero() {
        for r in generate_dataset(5, 40) {
            let gt = Array2::from_shape_fn((20, 2), |(t, j)| r.future.waypoints()[t][j]);
            let rebuilt = cumulative_waypoints(&displacements_from_waypoints(&gt).view(), 1.0);
            assert_eq!(rebuilt, gt, "{}", r.id);
            let gt32 = target(&r.future);
            let d32 = displacements_from_waypoints(&gt).mapv(|v| v as f32);
            assert_eq!(cumulative_waypoints(&d32.view(), 1.0f32), gt32);
        }
    }

    #[test]
    fn same_seed_gives_identical_curves_and_loss_falls() {
        let records = generate_dataset(11, 8);
        let emb = embeddings_for(&records, 64);
        let tcfg = TrainConfig {
            batch_size: 4,
            epochs: 4,
            base_lr: 3e-3,
            warmup_start_lr: 3e-4,
            min_lr: 1e-4,
            seed: 3,
            ..Default::default()
        };
        let a = train_records(&records[..6], &records[6..], Some(&emb), &tcfg, &micro_config()).unwrap();
        let b = train_records(&records[..6], &records[6..], Some(&emb), &tcfg, &micro_config()).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.final_net, b.final_net);
        assert_eq!(a.steps.len(), 8);
        assert!(a.final_loss() < a.initial_loss());
        assert!(a.epochs.iter().all(|e| e.val_mse.is_some()));
        assert!(a.best_val_mse.unwrap() <= a.epochs.last().unwrap().val_mse.unwrap());
    }

    #[test]
    fn missing_embeddings_are_reported() {
        let records = generate_dataset(12, 3);
        let tcfg = TrainConfig { batch_size: 2, epochs: 1, ..Default::default() };
        let err = train_records(&records, &[], None, &tcfg, &micro_config()).unwrap_err();
        assert!(matches!(err, TrainError::MissingEmbeddings { .. }));
        let flags = AblationFlags { no_instruction: true, ..Default::default() };
        let tcfg = TrainConfig { ablation: flags, ..tcfg };
        train_records(&records, &[], None, &tcfg, &micro_config()).unwrap();
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let records = generate_dataset(13, 2);
        let flags = AblationFlags { no_instruction: true, ..Default::default() };
        let mcfg = ModelConfig { displacement_scale: f64::MAX, ..micro_config() };
        let tcfg = TrainConfig { batch_size: 2, epochs: 1, ablation: flags, ..Default::default() };
        match train_records(&records, &[], None, &tcfg, &mcfg) {
            Err(TrainError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("unexpected {:?}", other.map(|s| s.steps)),
        }
    }

    #[test]
    fn train_writes_artifacts_and_skips_embeddings_without_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("dataset");
        save_dataset(&generate_dataset(14, 6), &data).unwrap();
        let out = dir.path().join("run");
        let flags = AblationFlags { no_instruction: true, ..Default::default() };
        let tcfg = TrainConfig { batch_size: 2, epochs: 2, ablation: flags, ..Default::default() };
        // The embeddings path does not exist; it must not be touched.
        let (summary, manifest) = train(&data, Some(&dir.path().join("absent")), &out, &tcfg, &micro_config()).unwrap();
        assert!(manifest.embeddings_dir.is_none());
        for f in [STEPS_CSV, FINAL_CHECKPOINT, BEST_CHECKPOINT, RUN_MANIFEST] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let csv = fs::read_to_string(out.join(STEPS_CSV)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "step,epoch,loss,lr,grad_norm");
        assert_eq!(csv.lines().count(), summary.steps.len() + 1);
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(out.join(RUN_MANIFEST)).unwrap()).unwrap();
        assert_eq!(back, manifest);

        let base = TrainConfig { ablation: AblationFlags::BASE, ..tcfg };
        let err = train(&data, Some(&dir.path().join("absent")), &dir.path().join("run2"), &base, &micro_config()).unwrap_err();
        assert!(matches!(err, TrainError::MissingEmbeddings { .. }), "{err}");
    }
}
