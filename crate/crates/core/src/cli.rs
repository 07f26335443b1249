//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::capsule::forward_classify;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{self, PatchRecord};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::mask::LabelMask;
use crate::metrics::{self, SegPair, Summary};
use crate::model::CapsNetParams;
use crate::synth;
use crate::taxonomy::{self, Mode, NUM_CLASSES};
use crate::tensor::Tensor;
use crate::training::{self, classification_metrics, observed_classes};
use crate::wsss;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_IO: i32 = 6;
pub const EXIT_CHECK_FAILED: i32 = 7;

pub const MODEL_FILE: &str = "model.cwss";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const LEGEND_FILE: &str = "legend.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Checkpoint(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_INTERNAL,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cwss",
    version,
    about = "Capsule-network weakly supervised tissue segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Seed for training, synthesis and SmoothGrad noise
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, reproducible reductions
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Class presence threshold on capsule lengths
    #[arg(long, global = true)]
    pub threshold: Option<f32>,
    /// SmoothGrad noise level
    #[arg(long, global = true)]
    pub sigma: Option<f32>,
    /// SmoothGrad sample count
    #[arg(long, global = true)]
    pub samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a procedural dataset with pixel masks
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory (images/, labels.csv)
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score patches
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PNG patches or a single PNG
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Produce per-class maps and label masks
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted masks against ground truth
    Eval {
        /// Predicted masks (`<stem>_mask.png` or `<stem>.png`)
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth masks (`<stem>.png`)
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional scores.csv and labels.csv for patch accuracy
        #[arg(long, requires = "labels")]
        scores: Option<PathBuf>,
        #[arg(long, requires = "scores")]
        labels: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable operation
    Gradcheck {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Loads the config and applies flag overrides (flags win).
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
        cfg.pipeline.smoothgrad.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    if common.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(t) = common.threshold {
        cfg.train.threshold = t;
        cfg.pipeline.threshold = t;
    }
    if let Some(s) = common.sigma {
        cfg.pipeline.smoothgrad.sigma = s;
    }
    if let Some(n) = common.samples {
        cfg.pipeline.smoothgrad.samples = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn image_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let found = data::list_images(path)?;
        if found.is_empty() {
            return Err(Error::Data(format!("no PNG images in {}", path.display())));
        }
        Ok(found)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_image_for(params: &CapsNetParams, path: &Path) -> Result<Tensor> {
    let image = data::read_image(path)?;
    if image.shape() != params.arch.image_shape() {
        return Err(Error::Data(format!(
            "{}: image {:?} but the model expects {:?}",
            path.display(),
            image.shape(),
            params.arch.image_shape()
        )));
    }
    Ok(image)
}

pub fn cmd_synth(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let (train, eval) = synth::generate_synthetic(&cfg.synth)?;
    data::save_dataset_dir(&out_dir.join("train"), &train)?;
    data::save_dataset_dir(&out_dir.join("eval"), &eval)?;
    info!(
        "wrote {} train and {} eval patches to {}",
        train.len(),
        eval.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_train(
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    cfg: &RunConfig,
) -> Result<Vec<training::EpochLog>> {
    let records = data::load_dataset_dir(data_dir)?;
    create_dir(out_dir)?;
    let (mut params, state) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.arch != cfg.arch {
                return Err(Error::Config(format!(
                    "{} was trained with a different architecture than the configuration",
                    path.display()
                )));
            }
            (ckpt.params, ckpt.state)
        }
        None => (CapsNetParams::init(&cfg.arch, cfg.train.seed)?, None),
    };
    let shape = params.arch.image_shape();
    if let Some(r) = records.iter().find(|r| r.image.shape() != shape) {
        return Err(Error::Data(format!(
            "{}: image {:?}, expected {:?}",
            r.name,
            r.image.shape(),
            shape
        )));
    }
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let every = cfg.train.checkpoint_every;
    let epochs = cfg.train.epochs;
    let mut last_state = state.clone();
    let entries = training::train(&records, &mut params, &cfg.train, &cfg.loss, state, |entry, p, st| {
        let line = serde_json::to_string(entry).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{}", line).map_err(|e| Error::io(&log_path, e))?;
        info!(
            "epoch {} loss {:.6} accuracy {:.2}",
            entry.epoch, entry.loss, entry.accuracy
        );
        if every > 0 && st.epoch % every == 0 && st.epoch < epochs {
            let path = out_dir.join(format!("checkpoint_epoch{:04}.cwss", st.epoch));
            save_checkpoint(
                &path,
                &Checkpoint {
                    params: p.clone(),
                    state: Some(st.clone()),
                },
            )?;
        }
        last_state = Some(st.clone());
        Ok(())
    })?;
    save_checkpoint(
        &out_dir.join(MODEL_FILE),
        &Checkpoint {
            params,
            state: last_state,
        },
    )?;
    Ok(entries)
}

pub fn cmd_classify(checkpoint: &Path, images: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(checkpoint)?.params;
    create_dir(out_dir)?;
    let mut body = String::from("filename");
    for c in &taxonomy::CLASSES {
        body.push(',');
        body.push_str(c.code);
    }
    body.push_str(",labels\n");
    for path in image_inputs(images)? {
        let image = load_image_for(&params, &path)?;
        let (scores, _, _) = forward_classify(&image, &params)?;
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        body.push_str(&name);
        let mut present = Vec::new();
        for (j, &s) in scores.data().iter().enumerate() {
            body.push_str(&format!(",{:.6}", s));
            if s >= cfg.pipeline.threshold {
                present.push(taxonomy::CLASSES[j].code);
            }
        }
        body.push(',');
        body.push_str(&present.join(";"));
        body.push('\n');
    }
    write_file(&out_dir.join(SCORES_FILE), &body)
}

pub fn cmd_segment(checkpoint: &Path, images: &Path, mode: Mode, out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    let params = load_checkpoint(checkpoint)?.params;
    create_dir(out_dir)?;
    for path in image_inputs(images)? {
        let image = load_image_for(&params, &path)?;
        let maps = wsss::run_pipeline(&params, &image, mode, &cfg.pipeline)?;
        wsss::write_outputs(out_dir, &stem(&path), &maps)?;
        info!("{}: detected {:?}", path.display(), maps.detected);
    }
    wsss::write_legend(&out_dir.join(LEGEND_FILE), mode)
}

/// Rows of a scores.csv written by `classify`: file name and 27 scores.
pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let head = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let mut cols = Vec::with_capacity(NUM_CLASSES);
    for c in &taxonomy::CLASSES {
        let k = head
            .iter()
            .position(|h| h == c.code)
            .ok_or_else(|| Error::Data(format!("{}: no column {}", path.display(), c.code)))?;
        cols.push(k);
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{} line {}: {}", path.display(), i + 2, e)))?;
        let scores = cols
            .iter()
            .map(|&k| {
                rec.get(k)
                    .and_then(|v| v.parse::<f32>().ok())
                    .ok_or_else(|| Error::Data(format!("{} line {}: bad score", path.display(), i + 2)))
            })
            .collect::<Result<Vec<f32>>>()?;
        out.push((rec[0].to_string(), Tensor::new(vec![NUM_CLASSES], scores)?));
    }
    Ok(out)
}

fn predicted_mask_path(pred: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{}_mask.png", stem), format!("{}.png", stem)]
        .into_iter()
        .map(|n| pred.join(n))
        .find(|p| p.is_file())
}

pub fn cmd_eval(
    pred: &Path,
    truth: &Path,
    mode: Mode,
    out_dir: &Path,
    scores: Option<(&Path, &Path)>,
    cfg: &RunConfig,
) -> Result<Summary> {
    let truth_files = image_inputs(truth)?;
    let mut masks: Vec<(LabelMask, LabelMask)> = Vec::with_capacity(truth_files.len());
    for t in &truth_files {
        let s = stem(t);
        let p = predicted_mask_path(pred, &s)
            .ok_or_else(|| Error::Data(format!("no prediction for {} in {}", s, pred.display())))?;
        masks.push((data::read_mask_png(&p)?, data::read_mask_png(t)?));
    }
    let pairs = masks
        .iter()
        .map(|(p, g)| SegPair::new(p, g))
        .collect::<Result<Vec<_>>>()?;
    let rows = metrics::class_ious(&pairs, &taxonomy::mask_universe(mode));
    let mut summary = Summary::default();
    summary.set_miou(mode, metrics::mean_defined(&rows)?);
    if let Some((scores_csv, labels_csv)) = scores {
        let scores = read_scores_csv(scores_csv)?;
        let labels = data::read_labels_csv(labels_csv)?;
        let mut s_all = Vec::with_capacity(scores.len());
        let mut t_all = Vec::with_capacity(scores.len());
        for (name, s) in scores {
            let (_, flags) = labels
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Data(format!("{} has no ground-truth labels", name)))?;
            s_all.push(s);
            t_all.push(Tensor::from_fn(vec![NUM_CLASSES], |j| flags[j] as u8 as f32));
        }
        let records: Vec<[bool; NUM_CLASSES]> = labels.iter().map(|(_, f)| *f).collect();
        let classes: Vec<usize> = (0..NUM_CLASSES).filter(|&j| records.iter().any(|f| f[j])).collect();
        summary.accuracy = Some(classification_metrics(&s_all, &t_all, cfg.pipeline.threshold, &classes)?.accuracy);
    }
    create_dir(out_dir)?;
    write_file(
        &out_dir.join(METRICS_FILE),
        &metrics::report_csv(&metrics::report_rows(&rows)?),
    )?;
    write_file(&out_dir.join(SUMMARY_FILE), &summary.to_text())?;
    Ok(summary)
}

/// Accuracy of a model over records, as in training.
pub fn patch_accuracy(params: &CapsNetParams, records: &[PatchRecord], threshold: f32) -> Result<f64> {
    let classes = observed_classes(records);
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        scores.push(forward_classify(&r.image, params)?.0);
    }
    let targets: Vec<Tensor> = records.iter().map(PatchRecord::targets).collect();
    Ok(classification_metrics(&scores, &targets, threshold, &classes)?.accuracy)
}

pub fn cmd_gradcheck(out_dir: Option<&Path>) -> Result<bool> {
    let reports = gradcheck::standard_suite()?;
    print!("{}", gradcheck::format_reports(&reports));
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let mut body = String::from("op,checked,skipped,max_rel_error,tolerance,passed\n");
        for r in &reports {
            body.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                r.op_name, r.checked, r.skipped, r.max_rel_error, r.tolerance, r.passed
            ));
        }
        write_file(&dir.join("gradcheck.csv"), &body)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { out_dir, common } => cmd_synth(&out_dir, &resolve_config(&common)?)?,
        Command::Train {
            data,
            out_dir,
            resume,
            common,
        } => {
            cmd_train(&data, &out_dir, resume.as_deref(), &resolve_config(&common)?)?;
        }
        Command::Classify {
            checkpoint,
            images,
            out_dir,
            common,
        } => cmd_classify(&checkpoint, &images, &out_dir, &resolve_config(&common)?)?,
        Command::Segment {
            checkpoint,
            images,
            mode,
            out_dir,
            common,
        } => cmd_segment(&checkpoint, &images, mode, &out_dir, &resolve_config(&common)?)?,
        Command::Eval {
            pred,
            truth,
            mode,
            out_dir,
            scores,
            labels,
            common,
        } => {
            let extra = scores.as_deref().zip(labels.as_deref());
            let summary = cmd_eval(&pred, &truth, mode, &out_dir, extra, &resolve_config(&common)?)?;
            print!("{}", summary.to_text());
        }
        Command::Gradcheck { out_dir, common } => {
            resolve_config(&common)?;
            if !cmd_gradcheck(out_dir.as_deref())? {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}
