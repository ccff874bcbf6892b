use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use stact_core::eval::{ablation_run, cross_validate, CrossValConfig, CrossValOutput, MetricSet, MetricsReport, Prediction};
use stact_core::gradcheck::{run_suite, PASS_THRESHOLD};
use stact_core::ingest::{load_dataset, CineClip, CropConfig, SkipReason};
use stact_core::model::Variant;
use stact_core::synth::generate_dataset;
use stact_core::training::{
    embed_clips, load_checkpoint, predict_sequences, resolve_stacks, save_checkpoint, train_pipeline, Checkpoint,
};
use stact_core::{ErrorClass, Exec};

use crate::config::{snapshot, ConfigError, RunConfig};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    pub fn context(self, command: &str) -> Self {
        Self {
            code: self.code,
            message: format!("{command}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.0)
    }
}

impl From<stact_core::Error> for CliError {
    fn from(e: stact_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: 2,
        message: format!("i/o error at {}: {e}", path.display()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn exec(cfg: &RunConfig) -> Exec {
    if cfg.parallel {
        Exec::Parallel
    } else {
        Exec::Serial
    }
}

/// Creates the output directory and writes the resolved-config snapshot.
fn prepare(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))?;
    write(&cfg.out.join(format!("{command}.resolved.cfg")), snapshot(cfg))?;
    Ok(cfg.out.clone())
}

fn load(cfg: &RunConfig) -> Result<Vec<CineClip>> {
    let manifest = cfg.manifest.as_ref().ok_or_else(|| CliError::usage("--manifest is required"))?;
    let clips = load_dataset(manifest)?;
    let malignant = clips.iter().filter(|c| c.label.is_positive()).count();
    info!("loaded {} clips ({malignant} malignant) from {}", clips.len(), manifest.display());
    Ok(clips)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "generate")?;
    let summary = generate_dataset(&cfg.generate, &out, exec(cfg))?;
    println!(
        "generated {} clips ({} malignant, {} benign), {} frames -> {}",
        summary.n_clips,
        summary.n_malignant,
        summary.n_clips - summary.n_malignant,
        summary.total_frames,
        summary.manifest.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let clips = load(cfg)?;
    let out = prepare(cfg, "train")?;
    let model = train_pipeline(&clips, &cfg.train, exec(cfg))?;
    let path = out.join("model.stck");
    save_checkpoint(&Checkpoint::from_model(&model), &path)?;
    write(&out.join("history.json"), to_json(&model.history))?;
    let last = |h: &[stact_core::training::EpochRecord]| h.last().map_or("-".to_string(), |r| format!("{:.4}", r.loss));
    println!(
        "trained: stage-1 seg loss {}, image loss {}, stage-3 loss {}; {} clip(s) skipped -> {}",
        last(&model.history.stage1_seg),
        last(&model.history.stage1_image),
        last(&model.history.stage3),
        model.history.skipped.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation<'a> {
    checkpoint: &'a Path,
    variant: Variant,
    threshold: f64,
    skipped: Vec<SkipReason>,
    nodule: MetricSet,
    predictions: Vec<Prediction>,
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ck_path = cfg.eval.checkpoint.as_ref().ok_or_else(|| CliError::usage("--checkpoint is required"))?;
    let ck = load_checkpoint(ck_path)?;
    let clips = load(cfg)?;
    let out = prepare(cfg, "evaluate")?;
    let crop = CropConfig {
        side: ck.side,
        buffer_px: cfg.train.crop.buffer_px,
    };
    let (stacks, skipped) = resolve_stacks(&clips, &crop)?;
    let data = embed_clips(&stacks, &ck.encoders, cfg.train.image_embeddings.as_ref(), exec(cfg))?;
    let probs = predict_sequences(&ck.decoder, &data, exec(cfg))?;
    let labels: Vec<u8> = data.iter().map(|c| c.label as u8).collect();
    let nodule = MetricSet::compute(&probs, &labels, cfg.eval.threshold)?;
    let predictions = data
        .iter()
        .zip(&probs)
        .map(|(c, &prob)| Prediction {
            clip_id: c.clip_id.clone(),
            label: c.label as u8,
            prob,
        })
        .collect();
    let report = Evaluation {
        checkpoint: ck_path,
        variant: ck.variant,
        threshold: cfg.eval.threshold,
        skipped,
        nodule,
        predictions,
    };
    write(&out.join("evaluation.json"), to_json(&report))?;
    let auroc = nodule.auroc.map_or("undefined".to_string(), |a| format!("{a:.4}"));
    println!(
        "{} on {} clips: accuracy {:.4}, f1 {:.4}, auroc {auroc}",
        ck.variant, nodule.n, nodule.accuracy, nodule.f1
    );
    Ok(())
}

fn crossval_config(cfg: &RunConfig, variants: Vec<Variant>) -> CrossValConfig {
    CrossValConfig {
        k: cfg.eval.k,
        threshold: cfg.eval.threshold,
        variants,
        train: cfg.train.clone(),
    }
}

fn save_fold_checkpoints(out: &Path, result: &CrossValOutput) -> Result<()> {
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    for fold in &result.models {
        for decoder in &fold.decoders {
            let ck = Checkpoint {
                variant: decoder.variant(),
                config: decoder.config(),
                side: fold.encoders.side,
                decoder: decoder.clone(),
                encoders: fold.encoders.clone(),
            };
            save_checkpoint(&ck, &dir.join(format!("fold{}.{}.stck", fold.fold, decoder.variant())))?;
        }
    }
    Ok(())
}

fn print_table(report: &MetricsReport) {
    println!("{:<16} {:>17} {:>17} {:>17}", "row", "auroc", "f1", "accuracy");
    for row in report.variants.iter().chain(&report.backbones) {
        let cell = |m: &str| {
            row.nodule_summary(m)
                .map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.std))
        };
        println!("{:<16} {:>17} {:>17} {:>17}", row.name, cell("auroc"), cell("f1"), cell("accuracy"));
    }
    println!("split {}", report.split_hash);
}

fn finish_crossval(cfg: &RunConfig, out: &Path, stem: &str, result: CrossValOutput) -> Result<()> {
    result.report.write(out, stem)?;
    if cfg.eval.save_checkpoints {
        save_fold_checkpoints(out, &result)?;
    }
    print_table(&result.report);
    Ok(())
}

pub fn crossval(cfg: &RunConfig) -> Result<()> {
    let clips = load(cfg)?;
    let out = prepare(cfg, "crossval")?;
    let result = cross_validate(&clips, &crossval_config(cfg, cfg.eval.variants.clone()), exec(cfg))?;
    finish_crossval(cfg, &out, "crossval", result)
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let clips = load(cfg)?;
    let out = prepare(cfg, "ablate")?;
    let result = ablation_run(&clips, &crossval_config(cfg, Variant::ALL.to_vec()), exec(cfg))?;
    finish_crossval(cfg, &out, "ablation", result)
}

pub fn grad_check(cfg: &RunConfig) -> Result<()> {
    let out = prepare(cfg, "grad-check")?;
    let results = run_suite(cfg.grad_check.seed, cfg.grad_check.samples_per_tensor)?;
    for r in &results {
        println!("{:<28} {:>10.3e}  {}", r.name, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    write(&out.join("grad_check.json"), to_json(&results))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError {
            code: 3,
            message: format!("{failed} of {} checks at or above {PASS_THRESHOLD:e}", results.len()),
        });
    }
    println!("all {} checks below {PASS_THRESHOLD:e}", results.len());
    Ok(())
}
