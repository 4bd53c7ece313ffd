//! Implementations of the six subcommands.

use crate::config::{DataSource, Precision, RunConfig, ThresholdSpec};
use pdanet::backbone::BackboneConfig;
use pdanet::data::{
    format_manifest, parse_manifest, save_image_file, split, DataSplits, ManifestEntry, Sample,
    SampleInput,
};
use pdanet::error::Error;
use pdanet::eval::{
    format_report_kv, format_report_table, metric_report, upsample_nearest, write_attention_csv,
    write_heatmap_pgm,
};
use pdanet::graph::Graph;
use pdanet::head::HeadMode;
use pdanet::loss::PcrConfig;
use pdanet::model::{model_forward, Model, ModelBinding, ModelConfig, ModelInput};
use pdanet::num::Scalar;
use pdanet::train::{
    checkpoint_from_model, load_checkpoint_file, predict_samples, restore_model,
    save_checkpoint_file, select_lambda, train, Checkpoint, EpochStats, LossKind, TrainSettings,
};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Command failure carrying the process exit code:
/// 2 for configuration/input errors, 3 for numerical failures.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn config(message: impl Into<String>) -> Self {
        CmdError {
            code: 2,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        CmdError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        match e {
            Error::Training { .. } => CmdError::numerical(e.to_string()),
            other => CmdError::config(other.to_string()),
        }
    }
}

type CmdResult = Result<(), CmdError>;

// ── shared helpers ──────────────────────────────────────────────────────

fn is_feature_path(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("pdaf"))
}

fn load_entry_sample(base: &Path, entry: &ManifestEntry) -> Result<Sample, Error> {
    let raw = PathBuf::from(&entry.path);
    let path = if raw.is_absolute() {
        raw
    } else {
        base.join(&raw)
    };
    let input = if is_feature_path(&path) {
        SampleInput::Features(pdanet::backbone::load_feature_map_file(&path)?)
    } else {
        // the backbone is three-channel; grayscale sources are expanded here
        SampleInput::Image(pdanet::data::load_image_file(&path)?.to_rgb())
    };
    Ok(Sample {
        id: entry.path.clone(),
        input,
        label: entry.label,
    })
}

fn load_manifest_samples(manifest: &Path) -> Result<Vec<Sample>, Error> {
    let text = std::fs::read_to_string(manifest)?;
    let entries = parse_manifest(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| load_entry_sample(base, e))
        .collect()
}

fn load_samples(source: &DataSource) -> Result<Vec<Sample>, Error> {
    match source {
        DataSource::Synth {
            count,
            seed,
            image_size,
        } => pdanet::data::synth_generate(*count, *seed, *image_size),
        DataSource::Manifest(path) => load_manifest_samples(path),
        DataSource::FeatureDir(dir) => {
            let manifest = dir.join("manifest.csv");
            load_manifest_samples(&manifest)
        }
    }
}

// the default stage stack, retargeted to the observed input geometry
fn model_config_for(samples: &[Sample]) -> Result<ModelConfig, Error> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    match &first.input {
        SampleInput::Image(img) => {
            let mut cfg = BackboneConfig::default_desk();
            cfg.input_channels = img.channels;
            cfg.input_height = img.height;
            cfg.input_width = img.width;
            cfg.output_dims()?;
            Ok(ModelConfig::WithBackbone(cfg))
        }
        SampleInput::Features(fm) => Ok(ModelConfig::HeadOnly(fm.dims)),
    }
}

/// Median of the pooled training-label components; the data-driven
/// dichotomization option.
fn resolve_threshold(spec: ThresholdSpec, train: &[Sample]) -> Result<f64, Error> {
    match spec {
        ThresholdSpec::Value(v) => Ok(v),
        ThresholdSpec::Median => {
            let mut pool: Vec<f64> = train
                .iter()
                .flat_map(|s| s.label.as_array())
                .collect();
            if pool.is_empty() {
                return Err(Error::Config(
                    "cannot take a label median of an empty training split".into(),
                ));
            }
            pool.sort_by(f64::total_cmp);
            let n = pool.len();
            let median = if n % 2 == 1 {
                pool[n / 2]
            } else {
                0.5 * (pool[n / 2 - 1] + pool[n / 2])
            };
            if !(median > 0.0 && median < 1.0) {
                return Err(Error::Config(format!(
                    "label median {median} is not usable as a threshold in (0, 1)"
                )));
            }
            Ok(median)
        }
    }
}

fn mode_code(mode: HeadMode) -> f64 {
    match mode {
        HeadMode::Spatial => 0.0,
        HeadMode::Channel => 1.0,
        HeadMode::Coupled => 2.0,
    }
}

fn mode_from_code(code: f64) -> Result<HeadMode, Error> {
    match code as i64 {
        0 => Ok(HeadMode::Spatial),
        1 => Ok(HeadMode::Channel),
        2 => Ok(HeadMode::Coupled),
        other => Err(Error::Format {
            what: format!("unknown mode code {other} in checkpoint"),
            offset: None,
        }),
    }
}

fn config_echo(cfg: &RunConfig, threshold: f64) -> Vec<(String, f64)> {
    let precision = match cfg.precision {
        Precision::F32 => 32.0,
        Precision::F64 => 64.0,
    };
    vec![
        ("precision".into(), precision),
        ("mode".into(), mode_code(cfg.mode)),
        (
            "loss".into(),
            if cfg.loss == LossKind::Mse { 0.0 } else { 1.0 },
        ),
        ("pcr_lambda".into(), cfg.pcr_lambda),
        ("pcr_threshold".into(), threshold),
        ("lr_backbone".into(), cfg.lr_backbone),
        ("lr_head".into(), cfg.lr_head),
        ("momentum".into(), cfg.momentum),
        ("weight_decay".into(), cfg.weight_decay),
        ("epochs".into(), cfg.epochs as f64),
        ("drop_factor".into(), cfg.drop_factor),
        ("drop_at_epoch".into(), cfg.drop_at_epoch as f64),
        ("batch_size".into(), cfg.batch_size as f64),
        ("seed".into(), cfg.seed as f64),
        ("split_train".into(), cfg.split_train),
        ("split_val".into(), cfg.split_val),
        ("split_test".into(), cfg.split_test),
        ("split_seed".into(), cfg.split_seed as f64),
    ]
}

fn make_splits(cfg: &RunConfig, samples: Vec<Sample>) -> Result<DataSplits, Error> {
    let spec = pdanet::data::SplitSpec::new(
        cfg.split_train,
        cfg.split_val,
        cfg.split_test,
        cfg.split_seed,
    )?;
    let (train, val, test) = split(&samples, &spec)?;
    Ok(DataSplits { train, val, test })
}

fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<(), Error> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e}\n",
            e.epoch, e.train_loss, e.val_loss
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────

pub fn cmd_synth(out: &Path, count: usize, seed: u64, image_size: usize) -> CmdResult {
    let samples = pdanet::data::synth_generate(count, seed, image_size)?;
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| {
        CmdError::config(format!("cannot create {}: {e}", images_dir.display()))
    })?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let SampleInput::Image(img) = &s.input else {
            unreachable!("synthetic samples are images")
        };
        let rel = format!("images/{}.ppm", s.id);
        save_image_file(img, &out.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: s.label,
        });
    }
    let manifest = format_manifest(&entries);
    std::fs::write(out.join("manifest.csv"), manifest).map_err(Error::from)?;
    println!(
        "wrote {count} samples ({image_size}x{image_size}, seed {seed}) to {}",
        out.display()
    );
    println!("manifest: {}", out.join("manifest.csv").display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub fn cmd_train(config_path: Option<&Path>, overrides: &[String]) -> CmdResult {
    let cfg = RunConfig::load(config_path, overrides)?;
    cfg.validate_paths()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CmdError::config("train requires out_dir=..."))?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CmdError::config(format!("cannot create {}: {e}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.effective.cfg"), cfg.to_kv_string())
        .map_err(Error::from)?;
    match cfg.precision {
        Precision::F64 => train_run::<f64>(&cfg, &out_dir),
        Precision::F32 => train_run::<f32>(&cfg, &out_dir),
    }
}

fn train_run<T: Scalar>(cfg: &RunConfig, out_dir: &Path) -> CmdResult {
    let samples = load_samples(&cfg.data)?;
    let splits = make_splits(cfg, samples)?;
    let threshold = resolve_threshold(cfg.pcr_threshold, &splits.train)?;
    let settings = TrainSettings {
        mode: cfg.mode,
        loss: cfg.loss,
        optim: cfg.optim()?,
        pcr: PcrConfig::new(cfg.pcr_lambda, threshold)?,
    };
    let (mut model, state) = match &cfg.resume {
        Some(path) => {
            let ckpt = load_checkpoint_file(path)?;
            let (model, state) = restore_model::<T>(&ckpt)?;
            (model, Some(state))
        }
        None => {
            let mc = model_config_for(&splits.train)?;
            (Model::<T>::init(&mc, cfg.seed)?, None)
        }
    };

    let (history, state) = train(&mut model, &splits, &settings, state)?;
    write_history_csv(&out_dir.join("history.csv"), &history)?;
    let ckpt = checkpoint_from_model(&model, &state, &config_echo(cfg, threshold));
    save_checkpoint_file(&ckpt, &out_dir.join("checkpoint.pdck"))?;

    let preds = predict_samples(&model, &splits.test, settings.mode)?;
    let gts: Vec<_> = splits.test.iter().map(|s| s.label).collect();
    let report = metric_report(&preds, &gts)?;
    let table = format_report_table(&report);
    print!("{table}");
    std::fs::write(out_dir.join("report.txt"), table).map_err(Error::from)?;
    std::fs::write(out_dir.join("report.kv"), format_report_kv(&report)).map_err(Error::from)?;
    if let Some(last) = history.last() {
        println!(
            "final epoch {}: train_loss={:.6} val_loss={:.6}",
            last.epoch, last.train_loss, last.val_loss
        );
    }
    println!("checkpoint: {}", out_dir.join("checkpoint.pdck").display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> CmdResult {
    let ckpt = load_checkpoint_file(checkpoint)?;
    let precision = ckpt.scalar("cfg/precision").unwrap_or(64.0);
    let out_dir = out
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    if precision == 32.0 {
        eval_run::<f32>(&ckpt, manifest, &out_dir)
    } else {
        eval_run::<f64>(&ckpt, manifest, &out_dir)
    }
}

fn eval_run<T: Scalar>(ckpt: &Checkpoint, manifest: &Path, out_dir: &Path) -> CmdResult {
    let (model, _) = restore_model::<T>(ckpt)?;
    let mode = mode_from_code(ckpt.scalar("cfg/mode").unwrap_or(2.0))?;
    let samples = load_manifest_samples(manifest)?;
    if samples.is_empty() {
        return Err(CmdError::config("manifest names no samples"));
    }
    let preds = predict_samples(&model, &samples, mode)?;
    let gts: Vec<_> = samples.iter().map(|s| s.label).collect();
    let report = metric_report(&preds, &gts)?;
    let table = format_report_table(&report);
    print!("{table}");
    std::fs::create_dir_all(out_dir).map_err(Error::from)?;
    std::fs::write(out_dir.join("eval-report.txt"), &table).map_err(Error::from)?;
    std::fs::write(out_dir.join("eval-report.kv"), format_report_kv(&report))
        .map_err(Error::from)?;
    Ok(())
}

// ── lambda search ───────────────────────────────────────────────────────

pub fn cmd_lambda_search(config_path: Option<&Path>, overrides: &[String]) -> CmdResult {
    let cfg = RunConfig::load(config_path, overrides)?;
    cfg.validate_paths()?;
    match cfg.precision {
        Precision::F64 => lambda_run::<f64>(&cfg),
        Precision::F32 => lambda_run::<f32>(&cfg),
    }
}

fn lambda_run<T: Scalar>(cfg: &RunConfig) -> CmdResult {
    let samples = load_samples(&cfg.data)?;
    let splits = make_splits(cfg, samples)?;
    let threshold = resolve_threshold(cfg.pcr_threshold, &splits.train)?;
    let settings = TrainSettings {
        mode: cfg.mode,
        loss: LossKind::Pcr,
        optim: cfg.optim()?,
        pcr: PcrConfig::new(0.0, threshold)?,
    };
    let mc = model_config_for(&splits.train)?;
    let seed = cfg.seed;
    let factory = || Model::<T>::init(&mc, seed);
    let (best, table) = select_lambda(factory, &splits, &cfg.lambda_grid, &settings)?;

    let mut text = String::from("lambda,val_mse\n");
    for row in &table {
        text.push_str(&format!("{},{:.17e}\n", row.lambda, row.val_mse));
    }
    print!("{text}");
    println!("chosen lambda: {best}");
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        std::fs::write(dir.join("lambda_search.csv"), &text).map_err(Error::from)?;
    }
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

pub fn cmd_gradcheck(seed: u64, inject_fault: Option<&str>) -> CmdResult {
    let results = pdanet::gradcheck::run_suite(seed, inject_fault);
    let mut all_pass = true;
    for r in &results {
        let verdict = if r.pass() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<20} max_rel_err={:.3e}", r.name, r.max_rel_err);
        all_pass &= r.pass();
    }
    if all_pass {
        println!("gradient suite: all {} checks passed", results.len());
        Ok(())
    } else {
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.pass())
            .map(|r| r.name.as_str())
            .collect();
        Err(CmdError::numerical(format!(
            "gradient suite failed: {}",
            failed.join(", ")
        )))
    }
}

// ── export attention ────────────────────────────────────────────────────

pub fn cmd_export_attention(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    upsample: usize,
) -> CmdResult {
    if upsample == 0 {
        return Err(CmdError::config("upsample factor must be at least 1"));
    }
    let ckpt = load_checkpoint_file(checkpoint)?;
    let precision = ckpt.scalar("cfg/precision").unwrap_or(64.0);
    if precision == 32.0 {
        export_run::<f32>(&ckpt, input, out, upsample)
    } else {
        export_run::<f64>(&ckpt, input, out, upsample)
    }
}

fn export_run<T: Scalar>(
    ckpt: &Checkpoint,
    input: &Path,
    out: &Path,
    upsample: usize,
) -> CmdResult {
    let (model, _) = restore_model::<T>(ckpt)?;
    let mode = mode_from_code(ckpt.scalar("cfg/mode").unwrap_or(2.0))?;
    if mode == HeadMode::Channel {
        return Err(CmdError::config(
            "checkpoint was trained in CW mode, which has no spatial attention map",
        ));
    }
    let image;
    let features;
    let model_input = if is_feature_path(input) {
        features = pdanet::backbone::load_feature_map_file(input)?;
        ModelInput::Features(&features)
    } else {
        image = pdanet::data::load_image_file(input)?.to_rgb();
        ModelInput::Image(&image)
    };

    let mut g = Graph::<T>::new();
    let binding = ModelBinding::bind(&mut g, &model);
    let outputs = model_forward(&mut g, &model, &binding, &model_input, mode)?;
    let attention_id = outputs
        .spatial_attention
        .expect("spatial map exists outside CW mode");
    let attention: Vec<f64> = g.values(attention_id).iter().map(|v| v.as_f64()).collect();
    let prediction: Vec<f64> = g
        .values(outputs.prediction)
        .iter()
        .map(|v| v.as_f64())
        .collect();

    std::fs::create_dir_all(out).map_err(Error::from)?;
    let (h, w) = (model.dims.height, model.dims.width);
    {
        let mut pgm = std::io::BufWriter::new(
            std::fs::File::create(out.join("attention.pgm")).map_err(Error::from)?,
        );
        if upsample > 1 {
            let up = upsample_nearest(&attention, h, w, upsample);
            write_heatmap_pgm(&up, h * upsample, w * upsample, &mut pgm)?;
        } else {
            write_heatmap_pgm(&attention, h, w, &mut pgm)?;
        }
    }
    {
        let mut csv = std::io::BufWriter::new(
            std::fs::File::create(out.join("attention.csv")).map_err(Error::from)?,
        );
        write_attention_csv(&attention, h, w, &mut csv)?;
    }
    let line = format!(
        "prediction: v={:.4} a={:.4} d={:.4}",
        prediction[0], prediction[1], prediction[2]
    );
    println!("{line}");
    let mut f =
        std::fs::File::create(out.join("prediction.txt")).map_err(Error::from)?;
    writeln!(f, "{line}").map_err(Error::from)?;
    Ok(())
}
