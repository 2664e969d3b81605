//! Two-step training: source-only pretraining with the detection loss,
//! then joint fine-tuning on mixed equal-count batches with the full
//! weak+strong objective.

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::backbone::Domain;
use crate::data::{LoadedSample, PixelBox};
use crate::error::{Error, Result};
use crate::matching::{combine_losses, GtBox, LossReport, LossTerms};
use crate::model::{ForwardOpts, Model};
use crate::nn::GradBuffer;
use crate::par;
use crate::tensor::Real;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One training iteration's log record (one JSON object per line in the
/// loss log).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub step: u8,
    pub lr: f64,
    pub report: LossReport,
}

/// A sample converted to model inputs: image values, tags as 0/1 and
/// normalized boxes (empty when the domain provides none for training).
pub struct PrepSample<T> {
    pub chw: Vec<T>,
    pub tags: Vec<f64>,
    pub domain: Domain,
    pub targets: Vec<GtBox>,
}

pub fn normalize_box(b: &PixelBox, image_size: usize) -> GtBox {
    let s = image_size as f64;
    let [x1, y1, x2, y2] = b.xyxy;
    GtBox {
        class: b.class,
        cxcywh: [
            (x1 + x2) / 2.0 / s,
            (y1 + y2) / 2.0 / s,
            (x2 - x1) / s,
            (y2 - y1) / s,
        ],
    }
}

pub fn prep_sample<T: Real>(sample: &LoadedSample, image_size: usize) -> PrepSample<T> {
    let chw: Vec<T> = sample
        .image
        .to_chw_f64()
        .into_iter()
        .map(T::from_f64)
        .collect();
    let targets = sample
        .boxes
        .as_ref()
        .map(|bs| bs.iter().map(|b| normalize_box(b, image_size)).collect())
        .unwrap_or_default();
    PrepSample {
        chw,
        tags: sample.tags.iter().map(|&t| f64::from(u8::from(t))).collect(),
        domain: sample.domain,
        targets,
    }
}

/// Endless deterministic shuffled index stream over one split.
struct IndexStream {
    rng: ChaCha8Rng,
    n: usize,
    queue: Vec<usize>,
}

impl IndexStream {
    fn new(n: usize, seed: u64, tag: &str) -> Self {
        let mut h = seed ^ 0x51afd7ed558ccd12;
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        IndexStream {
            rng: ChaCha8Rng::seed_from_u64(h),
            n,
            queue: Vec::new(),
        }
    }

    fn draw(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.queue.is_empty() {
                let mut fresh: Vec<usize> = (0..self.n).collect();
                fresh.shuffle(&mut self.rng);
                self.queue = fresh;
            }
            out.push(self.queue.pop().expect("refilled above"));
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    SourceOnly,
    Joint,
}

struct ImageOutcome<T> {
    grads: Vec<Option<Vec<T>>>,
    det: Option<f64>,
    cq: Option<f64>,
    fq: Option<f64>,
    bc: Option<f64>,
    dc: Option<f64>,
}

fn image_pass<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    sample: &PrepSample<T>,
    phase: Phase,
) -> Result<ImageOutcome<T>> {
    let toggles = &cfg.model.toggles;
    let opts = match phase {
        Phase::SourceOnly => ForwardOpts {
            class_queries: false,
            foreground: false,
            capture_attention: false,
        },
        Phase::Joint => ForwardOpts::train(toggles),
    };
    let mut pass = model.forward(&sample.chw, opts)?;
    let mut terms = LossTerms::default();
    if phase == Phase::Joint {
        if toggles.cq || toggles.encoder_avgpool {
            terms.cq = Some(model.encoder_presence_loss(&mut pass, &sample.tags)?);
        }
        if toggles.fq {
            terms.fq = Some(model.foreground_loss(&mut pass, &sample.tags)?);
        }
        if toggles.baseline {
            terms.bc = Some(model.backbone_class_loss(&mut pass, &sample.tags)?);
            terms.dc = Some(model.domain_loss(&mut pass, sample.domain, cfg.reversal_strength)?);
        }
    }
    if sample.domain == Domain::Source {
        if sample.targets.is_empty() {
            return Err(Error::contract(
                "source-domain sample without boxes reached training",
            ));
        }
        terms.det = Some(model.detection_loss(
            &mut pass,
            &sample.targets,
            cfg.match_weights,
            cfg.det_weights,
            cfg.aux_loss,
        )?);
    } else if !sample.targets.is_empty() {
        return Err(Error::contract(
            "target-domain sample carries box supervision",
        ));
    }
    let total = combine_losses(&mut pass.cx.tape, &terms, cfg.loss_weights)?;
    pass.cx.tape.backward(total)?;
    let value = |v: Option<crate::tensor::Val>| v.map(|v| pass.cx.tape.value(v).as_f64());
    Ok(ImageOutcome {
        grads: pass.cx.take_grads(),
        det: value(terms.det),
        cq: value(terms.cq),
        fq: value(terms.fq),
        bc: value(terms.bc),
        dc: value(terms.dc),
    })
}

fn batch_step<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    batch: &[&PrepSample<T>],
    phase: Phase,
    grads: &mut GradBuffer<T>,
) -> Result<LossReport> {
    let outcomes: Vec<Result<ImageOutcome<T>>> =
        par::par_map(batch, |s| image_pass(model, cfg, s, phase));
    let b = batch.len() as f64;
    let inv_b = T::from_f64(1.0 / b);
    let mut sums = [0.0f64; 5];
    grads.zero();
    for outcome in outcomes {
        let o = outcome?;
        grads.accumulate(&o.grads, inv_b);
        // Absent components count as zero so the report stays the exact
        // weighted combination of its parts.
        for (acc, v) in sums.iter_mut().zip([o.det, o.cq, o.fq, o.bc, o.dc]) {
            *acc += v.unwrap_or(0.0) / b;
        }
    }
    let mut report = LossReport {
        l_det: sums[0],
        l_cq: sums[1],
        l_fq: sums[2],
        l_bc: sums[3],
        l_dc: sums[4],
        total: 0.0,
        weights: cfg.loss_weights,
    };
    report.total = report.combined();
    Ok(report)
}

fn check_finite(report: &LossReport, iter: usize) -> Result<()> {
    match report.first_non_finite() {
        None => Ok(()),
        Some(component) => Err(Error::NonFinite(format!(
            "loss component {component} at iteration {iter}"
        ))),
    }
}

/// Step 1: source-only detection pretraining.
pub fn pretrain_source<T: Real>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    source_train: &[LoadedSample],
    mut sink: impl FnMut(&IterRecord),
) -> Result<()> {
    cfg.validate()?;
    if source_train.is_empty() {
        return Err(Error::contract("empty source training split"));
    }
    let prepped: Vec<PrepSample<T>> = source_train
        .iter()
        .map(|s| prep_sample(s, cfg.model.image_size))
        .collect();
    let mut stream = IndexStream::new(prepped.len(), cfg.seed, "order/step1");
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut grads = GradBuffer::zeros_like(&model.params);
    let batch_size = 2 * cfg.batch_per_domain;
    for iter in 0..cfg.step1_iters {
        let idx = stream.draw(batch_size);
        let batch: Vec<&PrepSample<T>> = idx.iter().map(|&i| &prepped[i]).collect();
        let report = batch_step(model, cfg, &batch, Phase::SourceOnly, &mut grads)?;
        check_finite(&report, iter)?;
        let lr = cfg.lr_at(iter, cfg.step1_iters);
        opt.step(&mut model.params, &grads, lr);
        sink(&IterRecord {
            iter,
            step: 1,
            lr,
            report,
        });
    }
    Ok(())
}

/// Step 2: joint fine-tuning on mixed batches with equal counts per
/// domain in every batch.
pub fn finetune_joint<T: Real>(
    model: &mut Model<T>,
    cfg: &TrainConfig,
    source_train: &[LoadedSample],
    target_train: &[LoadedSample],
    mut sink: impl FnMut(&IterRecord),
) -> Result<()> {
    cfg.validate()?;
    if source_train.is_empty() || target_train.is_empty() {
        return Err(Error::contract("both training splits must be non-empty"));
    }
    let src: Vec<PrepSample<T>> = source_train
        .iter()
        .map(|s| prep_sample(s, cfg.model.image_size))
        .collect();
    let tgt: Vec<PrepSample<T>> = target_train
        .iter()
        .map(|s| prep_sample(s, cfg.model.image_size))
        .collect();
    let mut src_stream = IndexStream::new(src.len(), cfg.seed, "order/step2-source");
    let mut tgt_stream = IndexStream::new(tgt.len(), cfg.seed, "order/step2-target");
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut grads = GradBuffer::zeros_like(&model.params);
    for iter in 0..cfg.step2_iters {
        let mut batch: Vec<&PrepSample<T>> = Vec::with_capacity(2 * cfg.batch_per_domain);
        for i in src_stream.draw(cfg.batch_per_domain) {
            batch.push(&src[i]);
        }
        for i in tgt_stream.draw(cfg.batch_per_domain) {
            batch.push(&tgt[i]);
        }
        let report = batch_step(model, cfg, &batch, Phase::Joint, &mut grads)?;
        check_finite(&report, iter)?;
        let lr = cfg.lr_at(iter, cfg.step2_iters);
        opt.step(&mut model.params, &grads, lr);
        sink(&IterRecord {
            iter,
            step: 2,
            lr,
            report,
        });
    }
    Ok(())
}

/// Both steps end to end on a fresh model.
pub fn train_full<T: Real>(
    cfg: &TrainConfig,
    source_train: &[LoadedSample],
    target_train: &[LoadedSample],
    mut sink: impl FnMut(&IterRecord),
) -> Result<Model<T>> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    pretrain_source(&mut model, cfg, source_train, &mut sink)?;
    finetune_joint(&mut model, cfg, source_train, target_train, &mut sink)?;
    Ok(model)
}
