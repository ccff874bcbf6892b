//! The three-stage procedure: fine-tune the stack encoders, freeze them and
//! embed every clip, then train a sequence decoder on the embeddings.

use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss_graph, FocalLossConfig};
use super::norm::EmbeddingNorm;
use super::optim::{AdamW, Optimizer, Sgd};
use super::schedule::cosine_lr;
use crate::attention::StactConfig;
use crate::autodiff::{sigmoid, Graph};
use crate::encoders::{encode_stacks, image_embeddings, ConvEncoder, EncoderParams, ImageEmbeddingSource};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ingest::{CineClip, ClipStacks, CropConfig, Label, SkipReason, StackSource};
use crate::model::{Decoder, Variant};
use crate::params::Parameterized;
use crate::rng::{stream, TAG_STAGE1_IMG, TAG_STAGE1_SEG, TAG_STAGE3};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    /// Stacks drawn per clip each epoch; 0 uses every stack.
    pub max_stacks_per_clip: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            lr_min: 0.0,
            max_stacks_per_clip: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Config {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_min: f64,
    /// Longest training window in stacks; longer sequences contribute a
    /// random contiguous window each epoch. 0 disables windowing.
    pub max_seq_len: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_min: 0.0,
            max_seq_len: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct TrainConfig {
    pub seed: u64,
    pub crop: CropConfig,
    pub focal: FocalLossConfig,
    pub stact: StactConfig,
    pub stage1: Stage1Config,
    pub stage3: Stage3Config,
    /// Directory of precomputed `<clip_id>.img.sttf` image embeddings. When
    /// set, stage 1 trains only the segmentation encoder.
    pub image_embeddings: Option<PathBuf>,
}


impl TrainConfig {
    /// A reduced schedule sized for a single CPU: 32-pixel stacks, a few
    /// stacks per clip in stage 1, short decoder windows and fewer epochs at
    /// a higher learning rate.
    pub fn desk() -> Self {
        Self {
            crop: CropConfig {
                side: 32,
                ..CropConfig::default()
            },
            stage1: Stage1Config {
                lr: 0.5,
                epochs: 20,
                batch_size: 16,
                max_stacks_per_clip: 8,
                ..Stage1Config::default()
            },
            stage3: Stage3Config {
                lr: 3e-4,
                epochs: 6,
                max_seq_len: 12,
                ..Stage3Config::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        self.stact.validate()?;
        let s1 = &self.stage1;
        let s3 = &self.stage3;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if s1.epochs == 0 || s3.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(s1.lr > 0.0) || !(s3.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if s1.lr_min < 0.0 || s3.lr_min < 0.0 || s1.lr_min > s1.lr || s3.lr_min > s3.lr {
            return bad("lr_min must lie in [0, lr]");
        }
        if s1.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&s1.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&s3.beta1) || !(0.0..1.0).contains(&s3.beta2) || !(s3.eps > 0.0) || s3.weight_decay < 0.0 {
            return bad("invalid AdamW hyperparameters");
        }
        if self.crop.side < 2 {
            return bad("crop side must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub stage1_seg: Vec<EpochRecord>,
    pub stage1_image: Vec<EpochRecord>,
    pub stage3: Vec<EpochRecord>,
    pub skipped: Vec<SkipReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEncoders {
    pub side: usize,
    pub seg: EncoderParams,
    /// `None` when image embeddings are precomputed.
    pub image: Option<EncoderParams>,
    pub norm: EmbeddingNorm,
}

/// A clip after stage 2: aligned `m×256` sequences plus the frozen encoders'
/// stack-level probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedClip {
    pub clip_id: String,
    pub label: Label,
    pub image: Tensor,
    pub seg: Tensor,
    pub image_stack_probs: Option<Vec<f64>>,
    pub seg_stack_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub encoders: TrainedEncoders,
    pub decoder: Decoder,
    pub history: History,
}

/// Resolves the stackable clips, recording a reason for every skipped one.
pub fn resolve_stacks<'a>(clips: &'a [CineClip], crop: &CropConfig) -> Result<(Vec<ClipStacks<'a>>, Vec<SkipReason>)> {
    let mut ok = Vec::with_capacity(clips.len());
    let mut skipped = Vec::new();
    for c in clips {
        match ClipStacks::new(c, crop)? {
            Ok(s) => ok.push(s),
            Err(r) => skipped.push(r),
        }
    }
    Ok((ok, skipped))
}

fn require_both_classes<I: IntoIterator<Item = Label>>(labels: I) -> Result<()> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for l in labels {
        if l.is_positive() {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Training(format!(
            "training split must contain both classes (benign {neg}, malignant {pos})"
        )));
    }
    Ok(())
}

fn check_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: "training",
            detail: format!("{stage} loss became {loss} at epoch {epoch}"),
        })
    }
}

/// Fine-tunes one stack encoder with momentum SGD on stack instances labeled
/// by their clip.
fn train_encoder(
    clips: &[ClipStacks<'_>],
    source: StackSource,
    cfg: &TrainConfig,
    tag: u64,
    exec: Exec,
) -> Result<(EncoderParams, Vec<EpochRecord>)> {
    let s1 = &cfg.stage1;
    let mut rng = stream(cfg.seed, &[tag]);
    let mut params = EncoderParams::init(&mut rng);
    let encoder = ConvEncoder::new(cfg.crop.side)?;
    let mut opt = Sgd::new(&params.params(), s1.momentum);
    let mut history = Vec::with_capacity(s1.epochs);

    for epoch in 0..s1.epochs {
        let lr = cosine_lr(epoch, s1.epochs, s1.lr, s1.lr_min)?;
        let mut instances: Vec<(usize, usize)> = Vec::new();
        for (ci, c) in clips.iter().enumerate() {
            let mut ks: Vec<usize> = (0..c.count).collect();
            if s1.max_stacks_per_clip > 0 && c.count > s1.max_stacks_per_clip {
                ks.shuffle(&mut rng);
                ks.truncate(s1.max_stacks_per_clip);
                ks.sort_unstable();
            }
            instances.extend(ks.into_iter().map(|k| (ci, k)));
        }
        instances.shuffle(&mut rng);

        let mut total = 0.0;
        for batch in instances.chunks(s1.batch_size) {
            let results = exec.map(batch, |&(ci, k)| -> Result<(f64, Vec<Tensor>)> {
                let stack = clips[ci].encoder_input(k, source);
                let mut g = Graph::new();
                let leaves = params.bind(&mut g, true);
                let x = g.leaf(stack, false);
                let (_, logit) = encoder.forward_graph(&mut g, &leaves, x)?;
                let loss = focal_loss_graph(&mut g, logit, clips[ci].clip.label.as_f64(), &cfg.focal)?;
                g.backward(loss)?;
                Ok((g.value(loss).data()[0], leaves.iter().map(|&v| g.grad_tensor(v)).collect()))
            });
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, gr) = r?;
                total += l;
                match grads.as_mut() {
                    None => grads = Some(gr),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gr) {
                            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= scale));
            opt.step(params.params_mut(), &grads, lr)?;
        }
        let loss = total / instances.len() as f64;
        check_finite(loss, "stage 1", epoch)?;
        debug!("stage 1 {source:?} epoch {epoch}: loss {loss:.6} lr {lr:.3e}");
        history.push(EpochRecord { epoch, lr, loss });
    }
    Ok((params, history))
}

/// Stage 1: trains the segmentation encoder, and the surrogate image encoder
/// unless image embeddings are precomputed.
pub fn train_encoders(clips: &[ClipStacks<'_>], cfg: &TrainConfig, exec: Exec) -> Result<(TrainedEncoders, History)> {
    cfg.validate()?;
    require_both_classes(clips.iter().map(|c| c.clip.label))?;
    let mut history = History::default();
    let (seg, h) = train_encoder(clips, StackSource::Masks, cfg, TAG_STAGE1_SEG, exec)?;
    history.stage1_seg = h;
    let image = if cfg.image_embeddings.is_none() {
        let (p, h) = train_encoder(clips, StackSource::Frames, cfg, TAG_STAGE1_IMG, exec)?;
        history.stage1_image = h;
        Some(p)
    } else {
        None
    };
    Ok((
        TrainedEncoders {
            side: cfg.crop.side,
            seg,
            image,
            norm: EmbeddingNorm::identity(),
        },
        history,
    ))
}

/// Stage 2: embeds every clip with the frozen encoders and standardizes
/// the sequences with `encoders.norm`.
pub fn embed_clips(
    clips: &[ClipStacks<'_>],
    encoders: &TrainedEncoders,
    image_dir: Option<&PathBuf>,
    exec: Exec,
) -> Result<Vec<EmbeddedClip>> {
    let encoder = ConvEncoder::new(encoders.side)?;
    let source = match (image_dir, &encoders.image) {
        (Some(dir), _) => ImageEmbeddingSource::Precomputed(dir.clone()),
        (None, Some(p)) => ImageEmbeddingSource::Surrogate(p.clone()),
        (None, None) => {
            return Err(Error::contract("no image encoder and no precomputed image embeddings"));
        }
    };
    exec.map(clips, |c| {
        let (image, image_logits) = image_embeddings(&source, &encoder, c)?;
        let masks: Vec<Tensor> = (0..c.count).map(|k| c.encoder_input(k, StackSource::Masks)).collect();
        let (seg, seg_logits) = encode_stacks(&encoder, &masks, &encoders.seg)?;
        let mut e = EmbeddedClip {
            clip_id: c.clip.clip_id.clone(),
            label: c.clip.label,
            image,
            seg,
            image_stack_probs: image_logits.map(|l| l.into_iter().map(sigmoid).collect()),
            seg_stack_probs: seg_logits.into_iter().map(sigmoid).collect(),
        };
        encoders.norm.apply(&mut e);
        Ok(e)
    })
    .into_iter()
    .collect()
}

/// Stage 3: trains a decoder of the given variant with AdamW, one sequence
/// per step, in a seeded order each epoch.
pub fn train_decoder(
    variant: Variant,
    data: &[EmbeddedClip],
    cfg: &TrainConfig,
) -> Result<(Decoder, Vec<EpochRecord>)> {
    cfg.validate()?;
    require_both_classes(data.iter().map(|c| c.label))?;
    let s3 = &cfg.stage3;
    let mut rng = stream(cfg.seed, &[TAG_STAGE3, variant as u64]);
    let mut decoder = Decoder::init(variant, cfg.stact, &mut rng)?;
    let mut opt = AdamW::new(&decoder.params(), s3.beta1, s3.beta2, s3.eps, s3.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(s3.epochs);

    for epoch in 0..s3.epochs {
        let lr = cosine_lr(epoch, s3.epochs, s3.lr, s3.lr_min)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let clip = &data[idx];
            let (i, s) = if s3.max_seq_len > 0 && clip.image.rows() > s3.max_seq_len {
                let start = rng.random_range(0..=clip.image.rows() - s3.max_seq_len);
                let rows: Vec<usize> = (start..start + s3.max_seq_len).collect();
                (clip.image.select_rows(&rows)?, clip.seg.select_rows(&rows)?)
            } else {
                (clip.image.clone(), clip.seg.clone())
            };
            let (loss, grads) = {
                let mut g = Graph::new();
                let leaves = decoder.bind(&mut g, true);
                let iv = g.leaf(i, false);
                let sv = g.leaf(s, false);
                let logit = decoder.forward_graph(&mut g, &leaves, iv, sv)?;
                let loss = focal_loss_graph(&mut g, logit, clip.label.as_f64(), &cfg.focal)?;
                g.backward(loss)?;
                let grads: Vec<Tensor> = leaves.iter().map(|&v| g.grad_tensor(v)).collect();
                (g.value(loss).data()[0], grads)
            };
            total += loss;
            opt.step(decoder.params_mut(), &grads, lr)?;
        }
        let loss = total / data.len() as f64;
        check_finite(loss, "stage 3", epoch)?;
        debug!("stage 3 {variant} epoch {epoch}: loss {loss:.6} lr {lr:.3e}");
        history.push(EpochRecord { epoch, lr, loss });
    }
    Ok((decoder, history))
}

/// Stage 2 on a training split: embeds the clips, fits `encoders.norm` on
/// them and returns the standardized sequences.
pub fn fit_embeddings(
    clips: &[ClipStacks<'_>],
    encoders: &mut TrainedEncoders,
    image_dir: Option<&PathBuf>,
    exec: Exec,
) -> Result<Vec<EmbeddedClip>> {
    encoders.norm = EmbeddingNorm::identity();
    let mut data = embed_clips(clips, encoders, image_dir, exec)?;
    encoders.norm = EmbeddingNorm::fit(&data)?;
    data.iter_mut().for_each(|c| encoders.norm.apply(c));
    Ok(data)
}

/// Clip-level probabilities over the full sequences.
pub fn predict_sequences(decoder: &Decoder, data: &[EmbeddedClip], exec: Exec) -> Result<Vec<f64>> {
    exec.map(data, |c| decoder.predict(&c.image, &c.seg)).into_iter().collect()
}

/// Runs all three stages on `clips` and returns the STACT decoder with its
/// frozen encoders.
pub fn train_pipeline(clips: &[CineClip], cfg: &TrainConfig, exec: Exec) -> Result<TrainedModel> {
    cfg.validate()?;
    let (stacks, skipped) = resolve_stacks(clips, &cfg.crop)?;
    for s in &skipped {
        info!("skipping clip {}: {}", s.clip_id, s.reason);
    }
    let (mut encoders, mut history) = train_encoders(&stacks, cfg, exec)?;
    let embedded = fit_embeddings(&stacks, &mut encoders, cfg.image_embeddings.as_ref(), exec)?;
    let (decoder, h3) = train_decoder(Variant::Stact, &embedded, cfg)?;
    history.stage3 = h3;
    history.skipped = skipped;
    Ok(TrainedModel {
        encoders,
        decoder,
        history,
    })
}
