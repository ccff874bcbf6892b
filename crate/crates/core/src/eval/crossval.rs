use log::info;
use serde::{Deserialize, Serialize};

use super::kfold::{split_hash, stratified_kfold};
use super::metrics::{aggregate_nodule, MetricSet};
use super::report::{FoldResult, MetricsReport, Prediction, ReportRow};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ingest::{CineClip, ClipStacks};
use crate::model::{Decoder, Variant};
use crate::rng::{sub_seed, TAG_FOLD_RUN};
use crate::training::pipeline::{
    embed_clips, fit_embeddings, predict_sequences, resolve_stacks, train_decoder, train_encoders,
};
use crate::training::{EmbeddedClip, TrainConfig, TrainedEncoders};

pub const SEG_BACKBONE: &str = "seg_backbone";
pub const IMAGE_BACKBONE: &str = "image_backbone";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValConfig {
    pub k: usize,
    pub threshold: f64,
    pub variants: Vec<Variant>,
    /// `train.seed` seeds both the split and every fold's training run.
    pub train: TrainConfig,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        Self {
            k: 5,
            threshold: 0.5,
            variants: vec![Variant::Stact],
            train: TrainConfig::default(),
        }
    }
}

/// Trained artifacts of one fold, in the order of the configured variants.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels {
    pub fold: usize,
    pub encoders: TrainedEncoders,
    pub decoders: Vec<Decoder>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValOutput {
    pub report: MetricsReport,
    pub models: Vec<FoldModels>,
}

struct FoldRun {
    models: FoldModels,
    variants: Vec<FoldResult>,
    backbones: Vec<(&'static str, FoldResult)>,
}

fn labels_of(data: &[EmbeddedClip]) -> Vec<u8> {
    data.iter().map(|c| c.label as u8).collect()
}

fn predictions(data: &[EmbeddedClip], probs: &[f64]) -> Vec<Prediction> {
    data.iter()
        .zip(probs)
        .map(|(c, &prob)| Prediction {
            clip_id: c.clip_id.clone(),
            label: c.label as u8,
            prob,
        })
        .collect()
}

/// Stack-level metrics with every stack carrying its clip's label.
fn frame_metrics(data: &[EmbeddedClip], per_clip: &[Vec<f64>], threshold: f64) -> Result<MetricSet> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (c, p) in data.iter().zip(per_clip) {
        probs.extend_from_slice(p);
        labels.extend(std::iter::repeat_n(c.label as u8, p.len()));
    }
    MetricSet::compute(&probs, &labels, threshold)
}

fn backbone_fold(
    fold: usize,
    train_clips: usize,
    test: &[EmbeddedClip],
    per_clip: &[Vec<f64>],
    threshold: f64,
) -> Result<FoldResult> {
    let nodule: Vec<f64> = per_clip.iter().map(|p| aggregate_nodule(p)).collect::<Result<_>>()?;
    Ok(FoldResult {
        fold,
        train_clips,
        test_clips: test.len(),
        nodule: MetricSet::compute(&nodule, &labels_of(test), threshold)?,
        frame: Some(frame_metrics(test, per_clip, threshold)?),
        final_train_loss: None,
        predictions: predictions(test, &nodule),
    })
}

fn run_fold(fold: usize, stacks: &[ClipStacks<'_>], test_idx: &[usize], cfg: &CrossValConfig, exec: Exec) -> Result<FoldRun> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = sub_seed(cfg.train.seed, &[TAG_FOLD_RUN, fold as u64]);
    let is_test = |i: usize| test_idx.binary_search(&i).is_ok();
    let train_stacks: Vec<ClipStacks<'_>> = (0..stacks.len()).filter(|&i| !is_test(i)).map(|i| stacks[i]).collect();
    let test_stacks: Vec<ClipStacks<'_>> = test_idx.iter().map(|&i| stacks[i]).collect();
    info!("fold {fold}: {} train clips, {} test clips", train_stacks.len(), test_stacks.len());

    let (mut encoders, _) = train_encoders(&train_stacks, &train_cfg, exec)?;
    let image_dir = train_cfg.image_embeddings.as_ref();
    let train = fit_embeddings(&train_stacks, &mut encoders, image_dir, exec)?;
    let test = embed_clips(&test_stacks, &encoders, image_dir, exec)?;
    let test_labels = labels_of(&test);

    let mut decoders = Vec::with_capacity(cfg.variants.len());
    let mut results = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let (decoder, history) = train_decoder(variant, &train, &train_cfg)?;
        let probs = predict_sequences(&decoder, &test, exec)?;
        let frame = if variant == Variant::JointFusion {
            let per_clip: Vec<Vec<f64>> = test
                .iter()
                .map(|c| decoder.stack_probs(&c.image, &c.seg).expect("joint fusion scores stacks"))
                .collect();
            Some(frame_metrics(&test, &per_clip, cfg.threshold)?)
        } else {
            None
        };
        results.push(FoldResult {
            fold,
            train_clips: train.len(),
            test_clips: test.len(),
            nodule: MetricSet::compute(&probs, &test_labels, cfg.threshold)?,
            frame,
            final_train_loss: history.last().map(|h| h.loss),
            predictions: predictions(&test, &probs),
        });
        decoders.push(decoder);
    }

    let mut backbones = Vec::new();
    let seg: Vec<Vec<f64>> = test.iter().map(|c| c.seg_stack_probs.clone()).collect();
    backbones.push((SEG_BACKBONE, backbone_fold(fold, train.len(), &test, &seg, cfg.threshold)?));
    if test.iter().all(|c| c.image_stack_probs.is_some()) {
        let img: Vec<Vec<f64>> = test.iter().map(|c| c.image_stack_probs.clone().unwrap()).collect();
        backbones.push((IMAGE_BACKBONE, backbone_fold(fold, train.len(), &test, &img, cfg.threshold)?));
    }

    Ok(FoldRun {
        models: FoldModels {
            fold,
            encoders,
            decoders,
        },
        variants: results,
        backbones,
    })
}

/// Stratified k-fold cross-validation of every configured variant. Within a
/// fold all variants share the split, the encoders and the embeddings.
pub fn cross_validate(clips: &[CineClip], cfg: &CrossValConfig, exec: Exec) -> Result<CrossValOutput> {
    cfg.train.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!("threshold {} is outside [0, 1]", cfg.threshold)));
    }
    let (stacks, skipped) = resolve_stacks(clips, &cfg.train.crop)?;
    let labels: Vec<u8> = stacks.iter().map(|s| s.clip.label as u8).collect();
    let folds = stratified_kfold(&labels, cfg.k, cfg.train.seed)?;
    let fold_ids: Vec<Vec<String>> = folds
        .iter()
        .map(|f| f.iter().map(|&i| stacks[i].clip.clip_id.clone()).collect())
        .collect();

    let runs: Vec<FoldRun> = exec
        .map_range(cfg.k, |f| {
            run_fold(f, &stacks, &folds[f], cfg, exec).map_err(|e| Error::Fold {
                fold: f,
                source: Box::new(e),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let variants = cfg
        .variants
        .iter()
        .enumerate()
        .map(|(vi, v)| ReportRow::new(v.name(), runs.iter().map(|r| r.variants[vi].clone()).collect()))
        .collect();
    let backbone_names: Vec<&str> = runs[0].backbones.iter().map(|(n, _)| *n).collect();
    let backbones = backbone_names
        .iter()
        .enumerate()
        .map(|(bi, name)| ReportRow::new(*name, runs.iter().map(|r| r.backbones[bi].1.clone()).collect()))
        .collect();

    let report = MetricsReport {
        seed: cfg.train.seed,
        k: cfg.k,
        threshold: cfg.threshold,
        split_hash: split_hash(&fold_ids),
        folds: fold_ids,
        skipped,
        train_config: cfg.train.clone(),
        variants,
        backbones,
    };
    Ok(CrossValOutput {
        report,
        models: runs.into_iter().map(|r| r.models).collect(),
    })
}

/// Cross-validates all four decoder variants on identical folds and seeds.
pub fn ablation_run(clips: &[CineClip], cfg: &CrossValConfig, exec: Exec) -> Result<CrossValOutput> {
    let cfg = CrossValConfig {
        variants: Variant::ALL.to_vec(),
        ..cfg.clone()
    };
    cross_validate(clips, &cfg, exec)
}
