use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use blockssl::augment::{make_view_batch, AugmentConfig, AugmentMode};
use blockssl::eval::{self, ProbeConfig, ProbeOutcome, RUNS_HEADER};
use blockssl::imaging::{self, CorpusConfig, DatasetManifest, ImageSample, Rgb8};
use blockssl::losses::{IaVariant, LossConfig, Reduction};
use blockssl::model::{ModelConfig, ModelState, PoolingMode};
use blockssl::scalar::Scalar;
use blockssl::train::{self, Checkpoint, RunMeta, TrainConfig, Trainer};
use blockssl::{Error, Result};
use log::{info, warn};
use serde::Serialize;

use crate::record::{io_err, RunRecord};
use crate::svg::{self, Panel, Series};
use crate::{DumpViewsArgs, GenDataArgs, LinearEvalArgs, PretrainArgs, ReportArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bssl";
pub const LOG_FILE: &str = "log.csv";
pub const META_FILE: &str = "meta.json";
pub const REPORT_FILE: &str = "report.svg";
pub const RUNS_FILE: &str = "runs.csv";

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(config_err(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(config_err(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// A dataset argument may name the manifest or the directory holding it.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

fn load_data(data: &Path) -> Result<(Vec<ImageSample>, usize)> {
    let path = manifest_path(data);
    let manifest = DatasetManifest::read(&path)?;
    let samples = imaging::load_dataset(&path)?;
    Ok((samples, manifest.num_classes()))
}

fn parse_widths(text: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err(format!("--widths must be four comma-separated integers, got {text:?}")))?;
    parts
        .try_into()
        .map_err(|_| config_err(format!("--widths needs exactly four stages, got {text:?}")))
}

// ------------------------------------------------------------------ gen-data

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = CorpusConfig {
        num_images: args.num,
        size: args.size,
        num_classes: args.classes,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        seed: args.seed,
    };
    cfg.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    let manifest = imaging::generate_corpus(&cfg, &args.out)?;
    let mut outputs: Vec<PathBuf> = manifest.entries.iter().map(|e| PathBuf::from(&e.path)).collect();
    outputs.push("manifest.json".into());
    outputs.push(imaging::corpus::LAYOUT_FILE.into());
    let record = RunRecord::new("gen-data", &cfg, &args.out, outputs)?;
    record.write(&args.out)?;
    info!("wrote {} images to {}", manifest.entries.len(), args.out.display());
    println!("{}", record.content_hash);
    Ok(())
}

// ------------------------------------------------------------------ pretrain

pub fn train_config(args: &PretrainArgs) -> Result<TrainConfig> {
    let mode = match args.aug.as_str() {
        "bam" => AugmentMode::Bam,
        "global" => AugmentMode::Global,
        other => return Err(config_err(format!("--aug must be bam or global, got {other:?}"))),
    };
    let variant = match args.loss.as_str() {
        "sim" => IaVariant::None,
        "sim+ia" => IaVariant::ImageAware,
        "sim+sup" => IaVariant::Supervised,
        other => return Err(config_err(format!("--loss must be sim, sim+ia or sim+sup, got {other:?}"))),
    };
    let reduction = match args.ia_reduction.as_str() {
        "sum" => Reduction::Sum,
        "mean" => Reduction::Mean,
        other => return Err(config_err(format!("--ia-reduction must be sum or mean, got {other:?}"))),
    };
    let model = ModelConfig {
        widths: parse_widths(&args.widths)?,
        embed_dim: args.embed_dim,
        view_size: args.view_size,
        pooling: PoolingMode::parse(&args.pool)?,
    };
    let augment = AugmentConfig {
        mode,
        gamma: args.gamma,
        view_size: args.view_size,
        zoom_range: (args.zoom_lo, 1.0),
        ..AugmentConfig::default()
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        base_lr: args.lr,
        seed: args.seed,
        model,
        augment,
        loss: LossConfig {
            tau: args.tau,
            lambda: args.lambda,
            variant,
            reduction,
        },
        stop_at_l_sim: args.stop_at_l_sim,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn series_label(cfg: &TrainConfig) -> String {
    let loss = match cfg.loss.variant {
        IaVariant::None => "sim",
        IaVariant::ImageAware => "sim+ia",
        IaVariant::Supervised => "sim+sup",
    };
    format!("{} {} seed {}", cfg.augment.mode.name(), loss, cfg.seed)
}

fn write_run_outputs<S: Scalar>(trainer: &Trainer<S>, out: &Path, dataset_len: usize) -> Result<RunMeta> {
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(LOG_FILE), &train::log_csv(&trainer.history))?;
    let meta = trainer.meta(dataset_len);
    write_json(&out.join(META_FILE), &meta)?;
    Ok(meta)
}

fn pretrain_typed<S: Scalar>(args: &PretrainArgs, samples: &[ImageSample]) -> Result<()> {
    let mut trainer = if args.resume {
        let ck = Checkpoint::<S>::load(&args.out.join(CHECKPOINT_FILE))?;
        info!("resuming at step {}", ck.meta.step);
        Trainer::from_checkpoint(ck)?
    } else {
        Trainer::<S>::new(train_config(args)?)?
    };
    if trainer.config.loss.variant == IaVariant::Supervised {
        if let Some(s) = samples.iter().find(|s| s.labels.is_empty()) {
            return Err(config_err(format!(
                "--loss sim+sup needs labels, but image {} has none",
                s.id
            )));
        }
    }
    let n = samples.len();
    let spe = trainer.config.steps_per_epoch(n).max(1);
    while !trainer.finished(n) {
        let remaining = spe - trainer.step % spe;
        trainer.run(samples, Some(remaining))?;
        if let Some(e) = trainer.history.last() {
            info!(
                "epoch {:>3}  l_sim {:+.4}  l_ia {:.4}  l_total {:+.4}  z_std {:.4}",
                e.epoch, e.l_sim, e.l_ia, e.l_total, e.z_std
            );
        }
        // checkpoint every epoch so an interrupted run can resume
        write_run_outputs(&trainer, &args.out, n)?;
    }
    let meta = write_run_outputs(&trainer, &args.out, n)?;
    for w in &meta.warnings {
        warn!("{w}");
    }
    let panels = loss_panels(&[(series_label(&trainer.config), trainer.history.clone())]);
    write_text(&args.out.join(REPORT_FILE), &svg::chart(&panels, &[]))?;
    let record = RunRecord::new(
        "pretrain",
        &trainer.config,
        &args.out,
        vec![CHECKPOINT_FILE.into(), LOG_FILE.into(), META_FILE.into(), REPORT_FILE.into()],
    )?;
    record.write(&args.out)?;
    println!("{}", record.run_id);
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    if !args.resume {
        train_config(args)?;
        prepare_out_dir(&args.out, args.force)?;
    }
    let (samples, _) = load_data(&args.data)?;
    match args.dtype.as_str() {
        "f32" => pretrain_typed::<f32>(args, &samples),
        "f64" => pretrain_typed::<f64>(args, &samples),
        other => Err(config_err(format!("--dtype must be f32 or f64, got {other:?}"))),
    }
}

// --------------------------------------------------------------- linear-eval

#[derive(Serialize)]
struct EvalConfig<'a> {
    checkpoint_hash: Option<String>,
    model: &'a ModelConfig,
    random_init: bool,
    probe: &'a ProbeConfig,
    data: String,
    eval_data: Option<String>,
    split_seed: u64,
}

pub fn linear_eval(args: &LinearEvalArgs) -> Result<()> {
    let pooling = PoolingMode::parse(&args.pool)?;
    let probe_cfg = ProbeConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        base_lr: args.lr,
        pooling,
        theta: args.theta,
        seed: args.seed,
        ..ProbeConfig::default()
    };
    probe_cfg.validate()?;
    let metrics_path = args.out.join(format!("metrics-{}.json", pooling.name()));
    refuse_existing(&metrics_path, args.force)?;

    let (state, checkpoint_hash) = match (&args.checkpoint, args.random_init) {
        (Some(path), false) => {
            let bytes = fs::read(path).map_err(|e| Error::Load { path: path.clone(), detail: e.to_string() })?;
            let ck = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| Error::Load {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            (ck.state, Some(crate::record::blob_hash(&bytes)))
        }
        (maybe, true) => {
            let model = match maybe {
                Some(path) => Checkpoint::<f64>::load(path)?.state.config.clone(),
                None => ModelConfig {
                    widths: parse_widths(&args.widths)?,
                    embed_dim: args.embed_dim,
                    view_size: args.view_size,
                    pooling: PoolingMode::Gap,
                },
            };
            (ModelState::<f64>::new(model, args.seed)?, None)
        }
        (None, false) => return Err(config_err("linear-eval needs --checkpoint or --random-init")),
    };

    let (samples, num_classes) = load_data(&args.data)?;
    let (train_set, eval_set) = match &args.eval_data {
        Some(p) => {
            let (ev, k) = load_data(p)?;
            if k != num_classes {
                return Err(config_err(format!("eval data has {k} classes, train data has {num_classes}")));
            }
            (samples, ev)
        }
        None => {
            let (tr, ev) = eval::split_indices(samples.len(), args.seed);
            (
                tr.iter().map(|&i| samples[i].clone()).collect(),
                ev.iter().map(|&i| samples[i].clone()).collect(),
            )
        }
    };
    let outcome: ProbeOutcome = eval::probe_encoder(&state, &train_set, &eval_set, num_classes, &[pooling], &probe_cfg)?
        .pop()
        .expect("one outcome per pooling mode");

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    write_json(&metrics_path, &outcome)?;
    let eval_cfg = EvalConfig {
        checkpoint_hash,
        model: &state.config,
        random_init: args.random_init,
        probe: &probe_cfg,
        data: args.data.display().to_string(),
        eval_data: args.eval_data.as_ref().map(|p| p.display().to_string()),
        split_seed: args.seed,
    };
    let rel = metrics_path.file_name().map(PathBuf::from).unwrap_or_default();
    let record = RunRecord::new("linear-eval", &eval_cfg, &args.out, vec![rel])?;
    let runs = args.out.join(RUNS_FILE);
    let fresh = !runs.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&runs)
        .map_err(|e| io_err(&runs, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(RUNS_HEADER);
        line.push('\n');
    }
    line.push_str(&eval::runs_csv_row(&record.run_id, pooling, &outcome.report));
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| io_err(&runs, e))?;
    let r = &outcome.report;
    info!(
        "{}: mAP {:.4}  OP {:.4} OR {:.4} OF1 {:.4}  CP {:.4} CR {:.4} CF1 {:.4}  (prevalence baseline {:.4})",
        pooling.name(),
        r.map,
        r.op,
        r.or,
        r.of1,
        r.cp,
        r.cr,
        r.cf1,
        outcome.prevalence_baseline
    );
    println!("{}", serde_json::to_string(r)?);
    Ok(())
}

// ---------------------------------------------------------------- dump-views

#[derive(Serialize)]
struct TileProvenance {
    sheet: String,
    row: usize,
    col: usize,
    image_id: u64,
    block_id: u8,
    branch: char,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dump_views(args: &DumpViewsArgs) -> Result<()> {
    let mode = match args.aug.as_str() {
        "bam" => AugmentMode::Bam,
        "global" => AugmentMode::Global,
        other => return Err(config_err(format!("--aug must be bam or global, got {other:?}"))),
    };
    let cfg = AugmentConfig {
        mode,
        gamma: args.gamma,
        view_size: args.view_size,
        zoom_range: (args.zoom_lo, 1.0),
        obfuscate: false,
        ..AugmentConfig::default()
    };
    cfg.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    let (mut samples, _) = load_data(&args.data)?;
    samples.truncate(args.images);
    if samples.is_empty() {
        return Err(config_err("dataset has no images to dump"));
    }
    let batch = make_view_batch(&samples, &cfg, args.seed, args.step)?;
    let s = cfg.view_size;
    let per_image = mode.pairs_per_image();
    let gap = 2;
    let mut provenance = Vec::new();
    let mut outputs = Vec::new();
    for (k, img) in samples.iter().enumerate() {
        // columns are blocks, rows are the two branches
        let (w, h) = (per_image * s + (per_image - 1) * gap, 2 * s + gap);
        let mut sheet = Rgb8 { width: w, height: h, data: vec![255; 3 * w * h] };
        let name = format!("sheet-{:06}.ppm", img.id);
        for col in 0..per_image {
            let j = k * per_image + col;
            for (row, stream) in [&batch.stream_a, &batch.stream_b].into_iter().enumerate() {
                let view = &stream.data()[j * 3 * s * s..(j + 1) * 3 * s * s];
                for y in 0..s {
                    for x in 0..s {
                        let (py, px) = (row * (s + gap) + y, col * (s + gap) + x);
                        for c in 0..3 {
                            sheet.data[(py * w + px) * 3 + c] = to_u8(view[(c * s + y) * s + x]);
                        }
                    }
                }
                provenance.push(TileProvenance {
                    sheet: name.clone(),
                    row,
                    col,
                    image_id: batch.image_id[j],
                    block_id: batch.block_id[j],
                    branch: if row == 0 { 'a' } else { 'b' },
                });
            }
        }
        imaging::ppm::write(&args.out.join(&name), &sheet)?;
        outputs.push(PathBuf::from(name));
    }
    write_json(&args.out.join("provenance.json"), &provenance)?;
    outputs.push("provenance.json".into());
    RunRecord::new("dump-views", &cfg, &args.out, outputs)?.write(&args.out)?;
    info!("wrote {} tiles for {} images", provenance.len(), samples.len());
    Ok(())
}

// -------------------------------------------------------------------- report

pub fn loss_panels(runs: &[(String, Vec<train::EpochLog>)]) -> Vec<Panel> {
    let series = |f: fn(&train::EpochLog) -> f64| {
        runs.iter()
            .map(|(label, h)| Series {
                label: label.clone(),
                points: h.iter().map(|e| (e.epoch as f64, f(e))).collect(),
            })
            .collect()
    };
    vec![
        Panel { title: "L_sim".into(), series: series(|e| e.l_sim) },
        Panel { title: "L_ia".into(), series: series(|e| e.l_ia) },
    ]
}

fn metrics_rows(dir: &Path) -> Result<Vec<Vec<String>>> {
    let path = dir.join(RUNS_FILE);
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .enumerate()
                .map(|(i, c)| match (i, c.parse::<f64>()) {
                    (3.., Ok(v)) => format!("{v:.4}"),
                    _ => c.to_string(),
                })
                .collect()
        })
        .collect())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if args.runs.is_empty() {
        return Err(config_err("report needs at least one run directory"));
    }
    refuse_existing(&args.out, args.force)?;
    let mut runs = Vec::new();
    let mut table: Vec<Vec<String>> = Vec::new();
    for dir in &args.runs {
        let history = train::read_log_csv(&dir.join(LOG_FILE))?;
        let meta_path = dir.join(META_FILE);
        let label = match fs::read_to_string(&meta_path) {
            Ok(text) => {
                let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Error::Load {
                    path: meta_path.clone(),
                    detail: e.to_string(),
                })?;
                series_label(&meta.config)
            }
            Err(_) => dir.display().to_string(),
        };
        runs.push((label, history));
        table.extend(metrics_rows(dir)?);
    }
    for dir in &args.metrics {
        table.extend(metrics_rows(dir)?);
    }
    if !table.is_empty() {
        table.insert(0, RUNS_HEADER.split(',').map(String::from).collect());
    }
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_text(&args.out, &svg::chart(&loss_panels(&runs), &table))?;
    info!("wrote {}", args.out.display());
    Ok(())
}
