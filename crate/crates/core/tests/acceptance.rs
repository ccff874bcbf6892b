//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stact_core::attention::{attention_block, stact_forward, AttentionParams, StactConfig, StactParams, EMBED_DIM};
use stact_core::encoders::{seg_cnn_forward, EncoderParams};
use stact_core::eval::{ablation_run, auroc, confusion_metrics, cross_validate, CrossValConfig, CrossValOutput};
use stact_core::gradcheck::{run_suite, PASS_THRESHOLD};
use stact_core::ingest::{make_stacks, CineClip};
use stact_core::model::{Decoder, Variant};
use stact_core::synth::{generate_clips, generate_dataset, GenConfig};
use stact_core::training::{
    focal_loss, load_checkpoint, save_checkpoint, AdamW, Checkpoint, FocalLossConfig, Optimizer, Sgd, TrainConfig,
    TrainedModel,
};
use stact_core::{Exec, Tensor};

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GRAD_SAMPLES: usize = 12;
const ORACLE_TOL: f64 = 1e-10;
const ATTN_TOL: f64 = 1e-12;
const STACT_MARGIN: f64 = 0.05;
const COMPLEMENT_IMAGE_BAND: (f64, f64) = (0.4, 0.6);
const COMPLEMENT_STACT_MIN: f64 = 0.75;
const NULL_BAND: (f64, f64) = (0.35, 0.65);
const ABLATION_BUDGET: Duration = Duration::from_secs(30 * 60);
const CHECKPOINT_REL_TOL: f64 = 1e-6;
const TRAIN_SEEDS: u64 = 5;

type Outcome = Result<String, String>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn jitter<P: stact_core::params::Parameterized>(p: &mut P, rng: &mut ChaCha8Rng) {
    for t in p.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let results = run_suite(0, GRAD_SAMPLES).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failing checks: {failed:?}"))?;
    for needed in ["op/", "encoder/", "attention/self/m=5", "attention/cross/m=1", "focal∘stact/m=2"] {
        ensure(results.iter().any(|r| r.name.starts_with(needed)), || format!("missing check {needed}"))?;
    }
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} checks, worst {worst:.2e} < {PASS_THRESHOLD:e}, {:.1}s",
        results.len(),
        elapsed.as_secs_f64()
    ))
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for &m in &[1usize, 3, 6] {
        for cfg in [
            StactConfig::default(),
            StactConfig { use_residual: true, use_scale: false, ..StactConfig::default() },
        ] {
            let mut p = AttentionParams::init(EMBED_DIM, cfg.heads, &mut rng);
            jitter(&mut p, &mut rng);
            let (xq, xkv) = (uniform(&mut rng, &[m, EMBED_DIM], 1.0), uniform(&mut rng, &[m, EMBED_DIM], 1.0));
            let (out, w) = attention_block(&xq, &xkv, &p, &cfg).map_err(|e| e.to_string())?;
            let (ro, rw) = common::attention(&common::mat(&xq), &common::mat(&xkv), &p, &cfg);
            worst = worst.max(common::max_abs(&common::mat(&out), &ro));
            for (a, b) in w.iter().zip(&rw) {
                worst = worst.max(common::max_abs(&common::mat(a), b));
            }
            let mut sp = StactParams::init(cfg, &mut rng);
            jitter(&mut sp, &mut rng);
            let (z, _) = stact_forward(&xq, &xkv, &sp).map_err(|e| e.to_string())?;
            worst = worst.max((z - common::stact_logit(&common::mat(&xq), &common::mat(&xkv), &sp)).abs());
        }
    }
    ensure(worst < ORACLE_TOL, || format!("attention/decoder differ by {worst:e}"))?;

    let mut cnn_worst = 0.0f64;
    for side in [8usize, 13, 32] {
        let mut p = EncoderParams::init(&mut rng);
        jitter(&mut p, &mut rng);
        let stack = uniform(&mut rng, &[3, side, side], 2.0);
        let (e, z) = seg_cnn_forward(&stack, &p).map_err(|e| e.to_string())?;
        let (re, rz) = common::cnn(&stack, &p);
        cnn_worst = e.iter().zip(&re).map(|(a, b)| (a - b).abs()).fold(cnn_worst, f64::max);
        cnn_worst = cnn_worst.max((z - rz).abs());
    }
    ensure(cnn_worst < ORACLE_TOL, || format!("cnn differs by {cnn_worst:e}"))?;

    let mut focal_worst = 0.0f64;
    for _ in 0..500 {
        let cfg = FocalLossConfig { alpha: rng.random_range(0.05..0.95), gamma: rng.random_range(0.0..4.0) };
        let z = rng.random_range(-30.0..30.0);
        let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        focal_worst = focal_worst.max((focal_loss(z, y, &cfg) - common::focal(z, y, cfg.alpha, cfg.gamma)).abs());
    }
    ensure(focal_worst < ORACLE_TOL, || format!("focal differs by {focal_worst:e}"))?;

    let n = 40;
    let init = uniform(&mut rng, &[n], 1.0);
    let (mut sgd_p, mut adam_p) = (init.clone(), init.clone());
    let (mut sgd_r, mut adam_r) = (init.data().to_vec(), init.data().to_vec());
    let mut sgd = Sgd::new(&[&sgd_p], 0.9);
    let mut adam = AdamW::new(&[&adam_p], 0.9, 0.999, 1e-8, 0.01);
    let mut ss = common::SgdState { v: vec![0.0; n] };
    let mut sa = common::AdamState { t: 0, m: vec![0.0; n], v: vec![0.0; n] };
    for step in 0..50 {
        let g = uniform(&mut rng, &[n], 1.0);
        let lr = 1e-2 / (1.0 + step as f64);
        sgd.step(vec![&mut sgd_p], std::slice::from_ref(&g), lr).map_err(|e| e.to_string())?;
        adam.step(vec![&mut adam_p], std::slice::from_ref(&g), lr).map_err(|e| e.to_string())?;
        common::sgd_step(&mut sgd_r, g.data(), &mut ss, lr, 0.9);
        common::adamw_step(&mut adam_r, g.data(), &mut sa, lr, 0.9, 0.999, 1e-8, 0.01);
    }
    let opt_worst = sgd_p
        .data()
        .iter()
        .zip(&sgd_r)
        .chain(adam_p.data().iter().zip(&adam_r))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(opt_worst < ORACLE_TOL, || format!("optimizers differ by {opt_worst:e}"))?;
    Ok(format!(
        "attention {worst:.1e}, cnn {cnn_worst:.1e}, focal {focal_worst:.1e}, optim {opt_worst:.1e} < {ORACLE_TOL:e}"
    ))
}

fn same_auroc(scores: &[f64], labels: &[u8]) -> bool {
    match (auroc(scores, labels), common::auroc_pairs(scores, labels)) {
        (Ok(a), Some(b)) => a == b,
        (Err(_), None) => true,
        _ => false,
    }
}

fn metrics() -> Outcome {
    let mut cases = 0usize;
    // Every label pattern against every weak ordering of the scores.
    for n in 1..=6usize {
        let orderings = n.pow(n as u32);
        for code in 0..orderings {
            let scores: Vec<f64> = (0..n).map(|i| ((code / n.pow(i as u32)) % n) as f64 / n as f64).collect();
            for mask in 0..1u32 << n {
                let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
                ensure(same_auroc(&scores, &labels), || format!("auroc mismatch on {scores:?} {labels:?}"))?;
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 7..=8usize {
        for _ in 0..50_000 {
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..n) as f64 / n as f64).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            ensure(same_auroc(&scores, &labels), || format!("auroc mismatch on {scores:?} {labels:?}"))?;
            cases += 1;
        }
    }
    for case in 0..20 {
        let n = rng.random_range(1..40);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let th = rng.random_range(0.1..0.9);
        let (tp, fp, tn, fn_) = common::confusion(&probs, &labels, th);
        let m = confusion_metrics(&probs, &labels, th).map_err(|e| e.to_string())?;
        let c = m.confusion;
        ensure((c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_), || format!("case {case}: table differs"))?;
        let acc = (tp + tn) as f64 / n as f64;
        let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let rec = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        ensure(close(m.accuracy, acc) && close(m.precision, prec) && close(m.recall, rec) && close(m.f1, f1), || {
            format!("case {case}: derived scores differ")
        })?;
    }
    Ok(format!("{cases} auroc cases exact, 20 confusion tables match"))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = StactConfig { pe_enabled: false, ..StactConfig::default() };
    let mut worst_row = 0.0f64;
    let mut worst_perm = 0.0f64;
    let mut worst_s = 0.0f64;
    for m in 1..=8usize {
        let p = AttentionParams::init(EMBED_DIM, cfg.heads, &mut rng);
        let (x, s) = (uniform(&mut rng, &[m, EMBED_DIM], 3.0), uniform(&mut rng, &[m, EMBED_DIM], 3.0));
        let (_, w) = attention_block(&x, &s, &p, &cfg).map_err(|e| e.to_string())?;
        for h in &w {
            for r in 0..m {
                worst_row = worst_row.max((h.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }

        let mut sp = StactParams::init(cfg, &mut rng);
        jitter(&mut sp, &mut rng);
        let (z, _) = stact_forward(&x, &s, &sp).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..m).collect();
        perm.reverse();
        perm.rotate_left(m / 2);
        let (xp, spm) = (x.select_rows(&perm).unwrap(), s.select_rows(&perm).unwrap());
        let (zp, _) = stact_forward(&xp, &spm, &sp).map_err(|e| e.to_string())?;
        worst_perm = worst_perm.max((z - zp).abs());

        sp.cross_block.w_v = Tensor::zeros(&[EMBED_DIM, EMBED_DIM]);
        let with_pe = StactParams { config: StactConfig::default(), ..sp.clone() };
        for params in [&sp, &with_pe] {
            let (a, _) = stact_forward(&x, &s, params).map_err(|e| e.to_string())?;
            let other = uniform(&mut rng, &[m, EMBED_DIM], 5.0);
            let (b, _) = stact_forward(&x, &other, params).map_err(|e| e.to_string())?;
            worst_s = worst_s.max((a - b).abs());
        }
    }
    ensure(worst_row < ATTN_TOL, || format!("row sums off by {worst_row:e}"))?;
    ensure(worst_perm < ATTN_TOL, || format!("permutation changed logit by {worst_perm:e}"))?;
    ensure(worst_s < ATTN_TOL, || format!("S still moves the logit by {worst_s:e}"))?;
    Ok(format!("rows {worst_row:.1e}, permutation {worst_perm:.1e}, zero W_V {worst_s:.1e}"))
}

fn stacking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut skipped = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=300usize);
        let frames: Vec<usize> = (0..n).collect();
        match make_stacks("c", &frames) {
            Ok(stacks) => {
                ensure(n >= 3 && stacks.len() == n / 3, || format!("n = {n}: {} stacks", stacks.len()))?;
                for (k, s) in stacks.iter().enumerate() {
                    ensure(*s == [3 * k, 3 * k + 1, 3 * k + 2], || format!("n = {n}: stack {k} is {s:?}"))?;
                }
            }
            Err(reason) => {
                ensure(n < 3 && reason.num_frames == n && !reason.reason.is_empty(), || {
                    format!("n = {n} skipped: {}", reason.reason)
                })?;
                skipped += 1;
            }
        }
    }
    Ok(format!("1000 lengths, {skipped} short clips skipped with a reason"))
}

fn reference_clips(complementarity: f64, snr: f64) -> Vec<CineClip> {
    let cfg = GenConfig {
        seed: 0,
        n_clips: 120,
        complementarity,
        texture_snr: snr,
        shape_snr: snr,
        ..GenConfig::default()
    };
    generate_clips(&cfg, Exec::default()).expect("reference data").into_iter().map(|(c, _)| c).collect()
}

fn desk_crossval(seed: u64, variants: &[Variant]) -> CrossValConfig {
    let mut train = TrainConfig::desk();
    train.seed = seed;
    CrossValConfig { k: 5, variants: variants.to_vec(), train, ..CrossValConfig::default() }
}

fn mean_auroc(out: &CrossValOutput, row: &str) -> f64 {
    out.report.row(row).and_then(|r| r.nodule_summary("auroc")).map_or(f64::NAN, |s| s.mean)
}

fn complementarity() -> Outcome {
    let pair = [Variant::ImageSelf, Variant::Stact];
    let clips = reference_clips(0.5, 1.0);
    let (mut img, mut st) = (Vec::new(), Vec::new());
    let mut ablation_time = Duration::ZERO;
    for seed in 0..TRAIN_SEEDS {
        let t0 = Instant::now();
        let out = if seed == 0 {
            ablation_run(&clips, &desk_crossval(seed, &pair), Exec::default())
        } else {
            cross_validate(&clips, &desk_crossval(seed, &pair), Exec::default())
        }
        .map_err(|e| e.to_string())?;
        if seed == 0 {
            ablation_time = t0.elapsed();
        }
        img.push(mean_auroc(&out, Variant::ImageSelf.name()));
        st.push(mean_auroc(&out, Variant::Stact.name()));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (img_mean, st_mean) = (avg(&img), avg(&st));

    let clips = reference_clips(1.0, 1.0);
    let (mut img1, mut st1) = (Vec::new(), Vec::new());
    for seed in 0..TRAIN_SEEDS {
        let out = cross_validate(&clips, &desk_crossval(seed, &pair), Exec::default()).map_err(|e| e.to_string())?;
        img1.push(mean_auroc(&out, Variant::ImageSelf.name()));
        st1.push(mean_auroc(&out, Variant::Stact.name()));
    }
    let (img1_mean, st1_mean) = (avg(&img1), avg(&st1));
    let summary = format!(
        "comp 0.5: stact {st_mean:.3} vs image {img_mean:.3}; comp 1.0: image {img1_mean:.3}, stact {st1_mean:.3}; \
         ablation {:.0}s",
        ablation_time.as_secs_f64()
    );
    ensure(st_mean - img_mean >= STACT_MARGIN, || format!("margin below {STACT_MARGIN}: {summary}"))?;
    ensure((COMPLEMENT_IMAGE_BAND.0..=COMPLEMENT_IMAGE_BAND.1).contains(&img1_mean), || {
        format!("image-only outside {COMPLEMENT_IMAGE_BAND:?}: {summary}")
    })?;
    ensure(st1_mean >= COMPLEMENT_STACT_MIN, || format!("stact below {COMPLEMENT_STACT_MIN}: {summary}"))?;
    ensure(ablation_time < ABLATION_BUDGET, || format!("ablation too slow: {summary}"))?;
    Ok(summary)
}

fn tiny_crossval() -> (Vec<CineClip>, CrossValConfig) {
    let gen = GenConfig { n_clips: 16, malignant_fraction: 0.5, min_frames: 9, max_frames: 15, seed: 3, ..GenConfig::default() };
    let clips = generate_clips(&gen, Exec::default()).unwrap().into_iter().map(|(c, _)| c).collect();
    let mut train = TrainConfig::desk();
    train.crop.side = 16;
    train.stage1.epochs = 2;
    train.stage3.epochs = 2;
    train.seed = 11;
    let cfg = CrossValConfig { k: 2, variants: Variant::ALL.to_vec(), train, ..CrossValConfig::default() };
    (clips, cfg)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let (clips, cfg) = tiny_crossval();
    let a = cross_validate(&clips, &cfg, Exec::Parallel).map_err(|e| e.to_string())?.report.to_json();
    let b = cross_validate(&clips, &cfg, Exec::Parallel).map_err(|e| e.to_string())?.report.to_json();
    let c = cross_validate(&clips, &cfg, Exec::Serial).map_err(|e| e.to_string())?.report.to_json();
    ensure(a == b && a == c, || "crossval JSON differs between runs".into())?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = GenConfig { n_clips: 6, malignant_fraction: 0.5, min_frames: 3, max_frames: 12, seed: 9, ..GenConfig::default() };
    generate_dataset(&gen, &tmp.path().join("a"), Exec::Parallel).map_err(|e| e.to_string())?;
    generate_dataset(&gen, &tmp.path().join("b"), Exec::Serial).map_err(|e| e.to_string())?;
    let (da, db) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    ensure(da == db && da.len() == 2 * 6 + 1, || "regenerated dataset differs".into())?;
    Ok(format!("crossval JSON {} bytes identical x3, {} generated files identical", a.len(), da.len()))
}

fn null_signal() -> Outcome {
    let clips = reference_clips(0.5, 0.0);
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); Variant::ALL.len()];
    for seed in 0..TRAIN_SEEDS {
        let out = ablation_run(&clips, &desk_crossval(seed, &[Variant::Stact]), Exec::default()).map_err(|e| e.to_string())?;
        for (vi, v) in Variant::ALL.iter().enumerate() {
            per_variant[vi].push(mean_auroc(&out, v.name()));
        }
    }
    let means: Vec<(&str, f64)> = Variant::ALL
        .iter()
        .zip(&per_variant)
        .map(|(v, xs)| (v.name(), xs.iter().sum::<f64>() / xs.len() as f64))
        .collect();
    let summary = means.iter().map(|(n, m)| format!("{n} {m:.3}")).collect::<Vec<_>>().join(", ");
    ensure(means.iter().all(|(_, m)| (NULL_BAND.0..=NULL_BAND.1).contains(m)), || format!("outside {NULL_BAND:?}: {summary}"))?;
    Ok(summary)
}

fn checkpoints() -> Outcome {
    let (clips, cfg) = tiny_crossval();
    let out = cross_validate(&clips, &cfg, Exec::default()).map_err(|e| e.to_string())?;
    let fold = &out.models[0];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for decoder in &fold.decoders {
        let model = TrainedModel { encoders: fold.encoders.clone(), decoder: decoder.clone(), history: Default::default() };
        let (p1, p2) = (tmp.path().join("a.stck"), tmp.path().join("b.stck"));
        let ck = Checkpoint::from_model(&model);
        save_checkpoint(&ck, &p1).map_err(|e| e.to_string())?;
        let loaded = load_checkpoint(&p1).map_err(|e| e.to_string())?;
        save_checkpoint(&loaded, &p2).map_err(|e| e.to_string())?;
        ensure(fs::read(&p1).unwrap() == fs::read(&p2).unwrap(), || format!("{} re-save differs", decoder.variant()))?;
        for m in [1usize, 4, 9] {
            let (i, s) = (uniform(&mut rng, &[m, EMBED_DIM], 2.0), uniform(&mut rng, &[m, EMBED_DIM], 2.0));
            let (a, b) = match (&ck.decoder, &loaded.decoder) {
                (Decoder::Stact(x), Decoder::Stact(y)) => {
                    (stact_forward(&i, &s, x).unwrap().0, stact_forward(&i, &s, y).unwrap().0)
                }
                (x, y) => (x.predict(&i, &s).unwrap(), y.predict(&i, &s).unwrap()),
            };
            worst = worst.max((a - b).abs() / a.abs().max(1e-3));
        }
    }
    ensure(worst < CHECKPOINT_REL_TOL, || format!("forward moved by {worst:e} relative"))?;
    Ok(format!("{} variants, worst relative drift {worst:.1e}", fold.decoders.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradients", gradients),
        ("oracle equivalence", oracles),
        ("metrics", metrics),
        ("attention invariants", attention_invariants),
        ("stacking", stacking),
        ("complementarity", complementarity),
        ("determinism", determinism),
        ("null signal", null_signal),
        ("checkpoints", checkpoints),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_deref().is_some_and(|o| o != id.to_string() && !name.contains(o)) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("PASS {id} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id} {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
