use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use riskplan_core::annotation::{
    annotate_mock, annotate_remote_batch, build_prompt, load_annotation, prompt_hash, save_annotation,
    AnnotationSource, RemoteAnnotator, StoredAnnotation, UreqTransport,
};
use riskplan_core::embedding::{
    decode_embeddings, embed_annotation, save_embeddings, HashingEncoder, RemoteEncoder, TextEncoder,
};
use riskplan_core::evaluation::{
    evaluate_checkpoint, render_ablation_table, write_report, EvalReport, EvalSplit, Metrics, REPORT_JSON,
};
use riskplan_core::model::{AblationFlags, ModelConfig};
use riskplan_core::scenario::{
    generate_dataset, load_dataset, save_dataset, save_split_ids, split_indices, DatasetSplit, ScenarioRecord,
    SplitRatios, MANIFEST_FILE,
};
use riskplan_core::training::{train, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT};

use crate::config::FileConfig;
use crate::error::{CliError, CliResult, ErrorKind};
use crate::{AblationArgs, Backend, Cli, Command, SplitArg, TrainArgs};

pub const DATASET_DIR: &str = "dataset";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const ANNOTATION_CACHE_DIR: &str = "annotation_cache";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const RUNS_DIR: &str = "runs";
pub const EVAL_DIR: &str = "eval";
pub const ABLATION_DIR: &str = "ablation";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const SUMMARY_TABLE: &str = "summary.txt";

/// The four ablation rows, in table order.
pub const ABLATION_VARIANTS: [(&str, &str, AblationFlags); 4] = [
    ("base", "Base", AblationFlags::BASE),
    (
        "no_instruction",
        "No Instruction",
        AblationFlags {
            no_instruction: true,
            no_intent: false,
            no_state: false,
        },
    ),
    (
        "no_intent",
        "No Intent",
        AblationFlags {
            no_instruction: false,
            no_intent: true,
            no_state: false,
        },
    ),
    (
        "no_state",
        "No State",
        AblationFlags {
            no_instruction: false,
            no_intent: false,
            no_state: true,
        },
    ),
];

struct Ctx<'a> {
    workdir: &'a Path,
    file: FileConfig,
    overwrite: bool,
}

impl Ctx<'_> {
    fn dir(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    fn dataset(&self) -> CliResult<PathBuf> {
        let d = self.dir(DATASET_DIR);
        if !d.join(MANIFEST_FILE).is_file() {
            return Err(CliError::missing(format!(
                "no dataset at {} (run generate-data first)",
                d.display()
            )));
        }
        Ok(d)
    }

    /// Creates `dir`, clearing it first with `--overwrite`; a non-empty
    /// existing directory is an error otherwise.
    fn fresh_output(&self, dir: &Path) -> CliResult<()> {
        let io = |e: std::io::Error| CliError::runtime(format!("{}: {e}", dir.display()));
        if dir.exists() {
            let occupied = !dir.is_dir() || fs::read_dir(dir).map_err(io)?.next().is_some();
            if occupied {
                if !self.overwrite {
                    return Err(CliError::new(
                        ErrorKind::OutputExists,
                        format!("{} already exists (pass --overwrite to replace it)", dir.display()),
                    ));
                }
                if dir.is_dir() {
                    fs::remove_dir_all(dir).map_err(io)?;
                } else {
                    fs::remove_file(dir).map_err(io)?;
                }
            }
        }
        fs::create_dir_all(dir).map_err(io)
    }

    fn train_config(&self, args: &TrainArgs, ablation: Option<AblationFlags>) -> CliResult<TrainConfig> {
        let mut t = self.file.train.clone();
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if let Some(v) = args.epochs {
            t.epochs = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.lr {
            t.base_lr = v;
        }
        if let Some(v) = args.warmup_start_lr {
            t.warmup_start_lr = v;
        }
        if let Some(v) = args.min_lr {
            t.min_lr = v;
        }
        if let Some(a) = ablation {
            t.ablation = a;
        }
        t.validate()?;
        Ok(t)
    }

    fn model_config(&self, args: &TrainArgs) -> CliResult<ModelConfig> {
        let m = self.file.model_config(args.preset);
        m.validate()?;
        Ok(m)
    }

    /// Embeddings directory for a run that needs it, checked against `d_text`.
    fn embeddings_for(&self, flags: AblationFlags, mcfg: &ModelConfig) -> CliResult<Option<PathBuf>> {
        if flags.no_instruction {
            return Ok(None);
        }
        let dir = self.dir(EMBEDDINGS_DIR);
        let first = fs::read_dir(&dir).ok().and_then(|it| {
            it.filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "hemb"))
                .min()
        });
        let Some(first) = first else {
            return Err(CliError::missing(format!(
                "no embeddings in {} (run embed first or pass --no-instruction)",
                dir.display()
            )));
        };
        let bytes = fs::read(&first).map_err(|e| CliError::runtime(format!("{}: {e}", first.display())))?;
        let e = decode_embeddings(&bytes, &first.display().to_string())?;
        if e.dim() != mcfg.d_text {
            return Err(CliError::config(format!(
                "embeddings have width {} but the model expects d_text = {}",
                e.dim(),
                mcfg.d_text
            )));
        }
        Ok(Some(dir))
    }
}

fn split_arg(s: SplitArg) -> EvalSplit {
    match s {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Val => EvalSplit::Val,
        SplitArg::Test => EvalSplit::Test,
    }
}

fn flags_from(a: &AblationArgs) -> Option<AblationFlags> {
    (a.no_instruction || a.no_intent || a.no_state).then_some(AblationFlags {
        no_instruction: a.no_instruction,
        no_intent: a.no_intent,
        no_state: a.no_state,
    })
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let ctx = Ctx {
        workdir: &cli.workdir,
        file: FileConfig::load(cli.config.as_deref())?,
        overwrite: cli.overwrite,
    };
    match &cli.command {
        Command::GenerateData { seed, count } => generate_data(&ctx, *seed, *count),
        Command::Annotate { backend } => annotate(&ctx, *backend),
        Command::Embed { backend, dim } => embed(&ctx, *backend, *dim),
        Command::Train { train, ablation, name } => train_cmd(&ctx, train, ablation, name.as_deref()),
        Command::Eval {
            run,
            checkpoint,
            split,
            out,
        } => eval_cmd(&ctx, run, checkpoint.as_deref(), *split, out.as_deref()),
        Command::Ablate { train, split, out } => ablate(&ctx, train, *split, out.as_deref()),
        Command::Report { input } => report(&ctx, input.as_deref()),
    }
}

fn generate_data(ctx: &Ctx, seed: Option<u64>, count: Option<usize>) -> CliResult<()> {
    let seed = seed.unwrap_or(ctx.file.data.seed);
    let count = count.unwrap_or(ctx.file.data.count);
    let records = generate_dataset(seed, count);
    let cats: Vec<_> = records.iter().map(|r| r.category).collect();
    let idx = split_indices(&cats, SplitRatios::default(), seed)?;
    let ids = |v: &[usize]| v.iter().map(|&i| records[i].id.clone()).collect();
    let split = DatasetSplit {
        train: ids(&idx.train),
        val: ids(&idx.val),
        test: ids(&idx.test),
    };
    let dir = ctx.dir(DATASET_DIR);
    ctx.fresh_output(&dir)?;
    save_dataset(&records, &dir)?;
    save_split_ids(&dir, &split)?;
    println!(
        "wrote {} records to {} (train {}, val {}, test {})",
        records.len(),
        dir.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn annotate(ctx: &Ctx, backend: Backend) -> CliResult<()> {
    let records = load_dataset(&ctx.dataset()?)?;
    let out = ctx.dir(ANNOTATIONS_DIR);
    ctx.fresh_output(&out)?;
    let save = |r: &ScenarioRecord, s: &StoredAnnotation| {
        save_annotation(&out, &r.id, s).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))
    };
    match backend {
        Backend::Mock => {
            for r in &records {
                let a = annotate_mock(r);
                save(r, &StoredAnnotation::new(&a, AnnotationSource::Mock, prompt_hash(&build_prompt(r))))?;
            }
        }
        Backend::Remote => {
            let annotator =
                RemoteAnnotator::new(ctx.file.endpoint.clone(), UreqTransport, ctx.dir(ANNOTATION_CACHE_DIR));
            let results = annotate_remote_batch(&annotator, &records);
            let mut failures = Vec::new();
            for (r, res) in records.iter().zip(results) {
                match res {
                    Ok(a) => {
                        save(r, &StoredAnnotation::new(&a.annotation, AnnotationSource::Remote, a.prompt_hash))?;
                    }
                    Err(e) => failures.push(format!("{}: {e}", r.id)),
                }
            }
            if let Some(first) = failures.first() {
                return Err(CliError::runtime(format!(
                    "{} of {} records failed; first: {first}",
                    failures.len(),
                    records.len()
                )));
            }
        }
    }
    println!("annotated {} records into {}", records.len(), out.display());
    Ok(())
}

fn embed(ctx: &Ctx, backend: Backend, dim: Option<usize>) -> CliResult<()> {
    let records = load_dataset(&ctx.dataset()?)?;
    let ann_dir = ctx.dir(ANNOTATIONS_DIR);
    let encoder: Box<dyn TextEncoder> = match backend {
        Backend::Mock => {
            let d = dim.unwrap_or(ctx.file.embed.dim);
            if d == 0 {
                return Err(CliError::config("embedding width must be positive"));
            }
            Box::new(HashingEncoder::new(d))
        }
        Backend::Remote => Box::new(RemoteEncoder::new(ctx.file.encoder.clone(), UreqTransport)),
    };
    let mut annotations = Vec::with_capacity(records.len());
    for r in &records {
        let a = load_annotation(&ann_dir, &r.id).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::missing(format!(
                    "no annotation for {} in {} (run annotate first)",
                    r.id,
                    ann_dir.display()
                ))
            } else {
                CliError::runtime(e.to_string())
            }
        })?;
        annotations.push(a.annotation());
    }
    let out = ctx.dir(EMBEDDINGS_DIR);
    ctx.fresh_output(&out)?;
    for (r, a) in records.iter().zip(&annotations) {
        let e = embed_annotation(encoder.as_ref(), a)?;
        save_embeddings(&out, &r.id, &e)?;
    }
    println!(
        "embedded {} records (width {}) into {}",
        records.len(),
        encoder.dim(),
        out.display()
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, args: &TrainArgs, ablation: &AblationArgs, name: Option<&str>) -> CliResult<()> {
    let tcfg = ctx.train_config(args, flags_from(ablation))?;
    let mcfg = ctx.model_config(args)?;
    let dataset = ctx.dataset()?;
    let emb = ctx.embeddings_for(tcfg.ablation, &mcfg)?;
    let name = name.map_or_else(|| tcfg.ablation.name(), str::to_string);
    if name.is_empty() || name.contains(['/', '\\']) || name == ".." {
        return Err(CliError::config(format!("invalid run name {name:?}")));
    }
    let out = ctx.dir(RUNS_DIR).join(&name);
    ctx.fresh_output(&out)?;
    info!("training {} into {}", tcfg.ablation.name(), out.display());
    let (summary, manifest) = train(&dataset, emb.as_deref(), &out, &tcfg, &mcfg)?;
    println!(
        "trained {} for {} epochs ({} steps): loss {:.4} -> {:.4}, best val mse {} at epoch {}; artifacts in {}",
        manifest.ablation,
        tcfg.epochs,
        summary.steps.len(),
        summary.initial_loss(),
        summary.final_loss(),
        summary.best_val_mse.map_or("n/a".into(), |v| format!("{v:.4}")),
        summary.best_epoch,
        out.display()
    );
    Ok(())
}

fn eval_cmd(ctx: &Ctx, run: &str, checkpoint: Option<&Path>, split: SplitArg, out: Option<&Path>) -> CliResult<()> {
    let ckpt = checkpoint.map_or_else(|| ctx.dir(RUNS_DIR).join(run).join(BEST_CHECKPOINT), Path::to_path_buf);
    if !ckpt.is_file() {
        return Err(CliError::missing(format!("no checkpoint at {} (run train first)", ckpt.display())));
    }
    let dataset = ctx.dataset()?;
    let label = match checkpoint {
        Some(p) => p.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned()),
        None => run.to_string(),
    };
    let out = out.map_or_else(|| ctx.dir(EVAL_DIR).join(&label), Path::to_path_buf);
    let emb = ctx.dir(EMBEDDINGS_DIR);
    let (report, records) =
        evaluate_checkpoint(&ckpt, &dataset, Some(&emb), split_arg(split), None, &ctx.file.rfs)?;
    ctx.fresh_output(&out)?;
    write_report(&report, &records, &out)?;
    print!("{}", report.render_text());
    println!("report written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    label: String,
    seed: u64,
    split: EvalSplit,
    count: usize,
    global: Metrics,
    best_val_mse: Option<f64>,
}

fn ablate(ctx: &Ctx, args: &TrainArgs, split: SplitArg, out: Option<&Path>) -> CliResult<()> {
    let base_cfg = ctx.train_config(args, None)?;
    let mcfg = ctx.model_config(args)?;
    let dataset = ctx.dataset()?;
    let emb = ctx.embeddings_for(AblationFlags::BASE, &mcfg)?;
    let root = out.map_or_else(|| ctx.dir(ABLATION_DIR), Path::to_path_buf);
    ctx.fresh_output(&root)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (dir_name, label, flags) in ABLATION_VARIANTS {
        let tcfg = TrainConfig {
            ablation: flags,
            ..base_cfg.clone()
        };
        let dir = root.join(dir_name);
        info!("ablation {dir_name}: training");
        let (summary, _) = train(&dataset, emb.as_deref(), &dir, &tcfg, &mcfg)?;
        let (report, records) = evaluate_checkpoint(
            &dir.join(FINAL_CHECKPOINT),
            &dataset,
            emb.as_deref(),
            split_arg(split),
            Some(flags),
            &ctx.file.rfs,
        )?;
        write_report(&report, &records, &dir)?;
        rows.push(AblationRow {
            variant: dir_name.into(),
            label: label.into(),
            seed: tcfg.seed,
            split: split_arg(split),
            count: report.count,
            global: report.global,
            best_val_mse: summary.best_val_mse,
        });
        reports.push((label.to_string(), report));
    }
    let table = render_ablation_table(&reports.iter().map(|(l, r)| (l.clone(), r)).collect::<Vec<_>>());
    let write = |name: &str, text: String| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))
    };
    write(ABLATION_TABLE, table.clone())?;
    write(ABLATION_JSON, serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    print!("{table}");
    println!("ablation written to {}", root.display());
    Ok(())
}

/// Directories under `input` (or `input` itself) that hold a report.
fn report_dirs(input: &Path) -> Vec<PathBuf> {
    if input.join(REPORT_JSON).is_file() {
        return vec![input.to_path_buf()];
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(input)
        .map(|it| {
            it.filter_map(Result::ok)
                .map(|e| e.path())
                .filter(|p| p.join(REPORT_JSON).is_file())
                .collect()
        })
        .unwrap_or_default();
    dirs.sort_by_key(|d| {
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rank = ABLATION_VARIANTS.iter().position(|v| v.0 == name).unwrap_or(ABLATION_VARIANTS.len());
        (rank, name)
    });
    dirs
}

fn report(ctx: &Ctx, input: Option<&Path>) -> CliResult<()> {
    let input = input.map_or_else(|| ctx.dir(EVAL_DIR), Path::to_path_buf);
    let dirs = report_dirs(&input);
    if dirs.is_empty() {
        return Err(CliError::missing(format!("no {REPORT_JSON} found in {}", input.display())));
    }
    let dataset = ctx.dir(DATASET_DIR);
    let records = if dataset.join(MANIFEST_FILE).is_file() {
        load_dataset(&dataset)?
    } else {
        Vec::new()
    };
    let mut loaded = Vec::new();
    for d in &dirs {
        let r = EvalReport::load(&d.join(REPORT_JSON))?;
        write_report(&r, &records, d)?;
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let label = ABLATION_VARIANTS
            .iter()
            .find(|v| v.0 == name)
            .map_or(name, |v| v.1.to_string());
        loaded.push((label, r));
    }
    if let [(_, only)] = loaded.as_slice() {
        print!("{}", only.render_text());
    } else {
        let table = render_ablation_table(&loaded.iter().map(|(l, r)| (l.clone(), r)).collect::<Vec<_>>());
        let p = input.join(SUMMARY_TABLE);
        fs::write(&p, &table).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
        print!("{table}");
    }
    println!("rendered {} report(s) under {}", loaded.len(), input.display());
    Ok(())
}
