//! The assembled detector: backbone, encoder with class queries, decoder
//! with object queries plus the foreground query, and every prediction
//! head. All components are always constructed (initialization is keyed
//! by parameter name, so shared parameters are identical across feature
//! toggles); the toggles decide what a forward pass runs and what the
//! loss assembly supervises.

use crate::backbone::{loss_bc, loss_dc, Backbone, BcHead, DcHead, Domain, FeatureTokens};
use crate::decoder::{
    Decoder, DecoderCapture, DecoderInputs, DecoderOut, ForegroundHead, ForegroundQuery,
    InstanceHeads, InstancePrediction, ObjectQueryBank,
};
use crate::encoder::{
    avgpool_presence, class_presence, AvgPoolHead, ClassQueryBank, Encoder, EncoderCapture,
    PresenceHead,
};
use crate::error::{Error, Result};
use crate::matching::{
    detection_loss, hungarian, match_cost, Assignment, DetLossWeights, GtBox, MatchWeights,
};
use crate::nn::{bce_with_logits_mean, sinusoidal_table, Ctx, ParamSet, PosEmbed};
use crate::tensor::{Real, Val};
use serde::{Deserialize, Serialize};

/// Feature toggles mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Backbone common practices: image-level classification + adversarial
    /// domain alignment.
    pub baseline: bool,
    /// Class queries in the encoder.
    pub cq: bool,
    /// Foreground query in the decoder.
    pub fq: bool,
    /// Ablation: inject a learned position embedding into the foreground
    /// query (normally null).
    pub fq_pos_embed: bool,
    /// Ablation: share decoder weights between foreground and object
    /// queries (the standard configuration) or give the foreground query
    /// a private branch.
    pub fq_weight_sharing: bool,
    /// Ablation: supervise encoder presence through average pooling
    /// instead of class queries.
    pub encoder_avgpool: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            baseline: true,
            cq: true,
            fq: true,
            fq_pos_embed: false,
            fq_weight_sharing: true,
            encoder_avgpool: false,
        }
    }
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if self.fq_pos_embed && !self.fq {
            return Err(Error::config(
                "fq_pos_embed requires the foreground query to be enabled",
            ));
        }
        if !self.fq_weight_sharing && !self.fq {
            return Err(Error::config(
                "disabling fq_weight_sharing requires the foreground query",
            ));
        }
        if self.encoder_avgpool && self.cq {
            return Err(Error::config(
                "encoder_avgpool replaces class queries; enable only one",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub num_queries: usize,
    pub classes: usize,
    pub ffn_hidden: usize,
    pub backbone_channels: Vec<usize>,
    pub image_size: usize,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 8,
            enc_blocks: 3,
            dec_blocks: 3,
            num_queries: 20,
            classes: 5,
            ffn_hidden: 128,
            backbone_channels: vec![16, 32],
            image_size: 64,
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config(format!(
                "dim {} must be divisible by 4 for the 2-d position embedding",
                self.dim
            )));
        }
        if self.num_queries == 0 || self.classes == 0 {
            return Err(Error::config("num_queries and classes must be positive"));
        }
        let stride = 1usize << (self.backbone_channels.len() + 1);
        if self.image_size % stride != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by backbone stride {stride}",
                self.image_size
            )));
        }
        Ok(())
    }
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub class_queries: ClassQueryBank,
    pub presence: PresenceHead,
    pub avgpool_head: AvgPoolHead,
    pub bc_head: BcHead,
    pub dc_head: DcHead,
    pub obj_queries: ObjectQueryBank,
    pub foreground: ForegroundQuery,
    pub decoder: Decoder,
    pub instance: InstanceHeads,
    pub fq_head: ForegroundHead,
}

/// What a forward pass should run.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub class_queries: bool,
    pub foreground: bool,
    pub capture_attention: bool,
}

impl ForwardOpts {
    /// Training-mode forward per the toggles.
    pub fn train(toggles: &Toggles) -> Self {
        ForwardOpts {
            class_queries: toggles.cq,
            foreground: toggles.fq,
            capture_attention: false,
        }
    }

    /// Inference drops the class queries (provably inert for the token
    /// path) and keeps the foreground query in self-attention while
    /// discarding its head.
    pub fn inference(toggles: &Toggles) -> Self {
        ForwardOpts {
            class_queries: false,
            foreground: toggles.fq,
            capture_attention: false,
        }
    }
}

pub struct ForwardPass<'p, T: Real> {
    pub cx: Ctx<'p, T>,
    pub grid: (usize, usize),
    pub backbone_tokens: Val,
    pub enc_tokens: Val,
    pub cq_final: Option<Val>,
    pub decoder_out: DecoderOut,
    pub pred: InstancePrediction,
    pub enc_captures: Vec<EncoderCapture>,
    pub dec_captures: Vec<DecoderCapture>,
}

/// One scored box hypothesis extracted from a pass.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub cxcywh: [f64; 4],
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new(seed);
        let backbone = Backbone::new(&mut params, 3, &cfg.backbone_channels, cfg.dim);
        let encoder = Encoder::new(&mut params, cfg.enc_blocks, cfg.dim, cfg.heads, cfg.ffn_hidden)?;
        let class_queries = ClassQueryBank::new(&mut params, cfg.dim, cfg.classes);
        let presence = PresenceHead::new(&mut params, cfg.dim, cfg.classes);
        let avgpool_head = AvgPoolHead::new(&mut params, cfg.dim, cfg.classes);
        let bc_head = BcHead::new(&mut params, cfg.dim, cfg.classes);
        let dc_head = DcHead::new(&mut params, cfg.dim);
        let obj_queries = ObjectQueryBank::new(&mut params, cfg.dim, cfg.num_queries);
        let foreground = ForegroundQuery::new(&mut params, cfg.dim, cfg.toggles.fq_pos_embed);
        let decoder = Decoder::new(
            &mut params,
            cfg.dec_blocks,
            cfg.dim,
            cfg.heads,
            cfg.ffn_hidden,
            cfg.toggles.fq_weight_sharing,
        )?;
        let instance = InstanceHeads::new(&mut params, cfg.dim, cfg.classes);
        let fq_head = ForegroundHead::new(&mut params, cfg.dim, cfg.classes);
        Ok(Model {
            cfg,
            params,
            backbone,
            encoder,
            class_queries,
            presence,
            avgpool_head,
            bc_head,
            dc_head,
            obj_queries,
            foreground,
            decoder,
            instance,
            fq_head,
        })
    }

    /// Runs the full pipeline on one `[3, H, W]` image in [0, 1].
    pub fn forward(&self, image_chw: &[T], opts: ForwardOpts) -> Result<ForwardPass<'_, T>> {
        let size = self.cfg.image_size;
        let mut cx = Ctx::new(&self.params);
        let image = self.backbone.image_leaf(&mut cx, image_chw, size, size)?;
        let features = self.backbone.forward(&mut cx, image, size, size)?;
        let (h, w) = features.grid;
        let pos_t = PosEmbed::Table(sinusoidal_table(&mut cx.tape, h, w, self.cfg.dim)?);

        let cq0 = opts.class_queries.then(|| cx.p(self.class_queries.queries));
        let mut enc_captures = Vec::new();
        let (enc_tokens, cq_final) = self.encoder.forward(
            &mut cx,
            features.tokens,
            cq0,
            &pos_t,
            opts.capture_attention.then_some(&mut enc_captures),
        )?;

        let obj0 = cx.p(self.obj_queries.content);
        let fq0 = opts.foreground.then(|| cx.p(self.foreground.state));
        let pos_o = PosEmbed::Table(cx.p(self.obj_queries.position));
        let pos_f = match self.foreground.position {
            Some(p) if self.cfg.toggles.fq_pos_embed => PosEmbed::Table(cx.p(p)),
            _ => PosEmbed::Null,
        };
        let inputs = DecoderInputs {
            tokens: enc_tokens,
            token_pos: &pos_t,
            obj_pos: &pos_o,
            fq_pos: &pos_f,
        };
        let mut dec_captures = Vec::new();
        let decoder_out = self.decoder.forward(
            &mut cx,
            obj0,
            fq0,
            &inputs,
            opts.capture_attention.then_some(&mut dec_captures),
        )?;
        let pred = self.instance.forward(&mut cx, decoder_out.obj)?;
        Ok(ForwardPass {
            cx,
            grid: features.grid,
            backbone_tokens: features.tokens,
            enc_tokens,
            cq_final,
            decoder_out,
            pred,
            enc_captures,
            dec_captures,
        })
    }

    /// Encoder presence loss: class queries (Eq-style diagonal pairing) or
    /// the average-pooling ablation, on image-level tags.
    pub fn encoder_presence_loss(&self, pass: &mut ForwardPass<T>, tags: &[f64]) -> Result<Val> {
        if self.cfg.toggles.encoder_avgpool {
            let p = avgpool_presence(&mut pass.cx, pass.enc_tokens, &self.avgpool_head)?;
            bce_with_logits_mean(&mut pass.cx.tape, p.logits, tags)
        } else {
            let qk = pass
                .cq_final
                .ok_or_else(|| Error::contract("class queries were not run in this pass"))?;
            let p = class_presence(&mut pass.cx, qk, &self.presence)?;
            bce_with_logits_mean(&mut pass.cx.tape, p.logits, tags)
        }
    }

    /// Foreground presence loss on image-level tags.
    pub fn foreground_loss(&self, pass: &mut ForwardPass<T>, tags: &[f64]) -> Result<Val> {
        let fq = pass
            .decoder_out
            .fq
            .ok_or_else(|| Error::contract("foreground query was not run in this pass"))?;
        let logits = self.fq_head.logits(&mut pass.cx, fq)?;
        bce_with_logits_mean(&mut pass.cx.tape, logits, tags)
    }

    pub fn backbone_class_loss(&self, pass: &mut ForwardPass<T>, tags: &[f64]) -> Result<Val> {
        let features = FeatureTokens {
            tokens: pass.backbone_tokens,
            grid: pass.grid,
            dim: self.cfg.dim,
        };
        loss_bc(&mut pass.cx, &self.bc_head, &features, tags)
    }

    pub fn domain_loss(
        &self,
        pass: &mut ForwardPass<T>,
        domain: Domain,
        reversal_strength: f64,
    ) -> Result<Val> {
        let features = FeatureTokens {
            tokens: pass.backbone_tokens,
            grid: pass.grid,
            dim: self.cfg.dim,
        };
        loss_dc(&mut pass.cx, &self.dc_head, &features, domain, reversal_strength)
    }

    /// Softmax class probabilities `[N, C+1]` of a prediction, as plain
    /// numbers (no tape growth).
    pub fn class_probs(&self, pass: &ForwardPass<T>, pred: &InstancePrediction) -> Vec<f64> {
        let k = self.cfg.classes + 1;
        let logits = pass.cx.tape.data(pred.class_logits);
        let mut out = vec![0.0f64; logits.len()];
        for q in 0..self.cfg.num_queries {
            let row: Vec<f64> = logits[q * k..(q + 1) * k].iter().map(|&v| v.as_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..k {
                out[q * k + c] = exps[c] / z;
            }
        }
        out
    }

    /// Hungarian matching of one prediction set against the targets.
    /// Matching reads detached values only; gradients never flow through
    /// the assignment.
    pub fn match_targets(
        &self,
        pass: &ForwardPass<T>,
        pred: &InstancePrediction,
        targets: &[GtBox],
        weights: MatchWeights,
    ) -> Result<Assignment> {
        let probs = self.class_probs(pass, pred);
        let boxes: Vec<f64> = pass
            .cx
            .tape
            .data(pred.boxes)
            .iter()
            .map(|&v| v.as_f64())
            .collect();
        if targets.len() > self.cfg.num_queries {
            return Err(Error::contract(format!(
                "{} targets exceed {} object queries",
                targets.len(),
                self.cfg.num_queries
            )));
        }
        let cost = match_cost(
            &probs,
            &boxes,
            self.cfg.num_queries,
            self.cfg.classes,
            targets,
            weights,
        )?;
        hungarian(&cost)
    }

    /// Detection loss on the final decoder block, plus per-block auxiliary
    /// losses when `aux` is set (each block matched independently).
    pub fn detection_loss(
        &self,
        pass: &mut ForwardPass<T>,
        targets: &[GtBox],
        match_weights: MatchWeights,
        det_weights: DetLossWeights,
        aux: bool,
    ) -> Result<Val> {
        let final_pred = InstancePrediction {
            class_logits: pass.pred.class_logits,
            boxes: pass.pred.boxes,
        };
        let assignment = self.match_targets(pass, &final_pred, targets, match_weights)?;
        let mut total = detection_loss(
            &mut pass.cx.tape,
            final_pred.class_logits,
            final_pred.boxes,
            targets,
            &assignment,
            self.cfg.classes,
            det_weights,
        )?;
        if aux {
            let intermediate: Vec<Val> = pass.decoder_out.block_obj
                [..self.cfg.dec_blocks.saturating_sub(1)]
                .to_vec();
            for state in intermediate {
                let pred = self.instance.forward(&mut pass.cx, state)?;
                let assignment = self.match_targets(pass, &pred, targets, match_weights)?;
                let aux_loss = detection_loss(
                    &mut pass.cx.tape,
                    pred.class_logits,
                    pred.boxes,
                    targets,
                    &assignment,
                    self.cfg.classes,
                    det_weights,
                )?;
                total = pass.cx.tape.add(total, aux_loss)?;
            }
        }
        Ok(total)
    }

    /// Scored boxes for evaluation: every (query, class) pair with its
    /// softmax probability, boxes in normalized center-size form.
    pub fn detections(&self, pass: &ForwardPass<T>) -> Vec<Detection> {
        let k = self.cfg.classes + 1;
        let probs = self.class_probs(pass, &InstancePrediction {
            class_logits: pass.pred.class_logits,
            boxes: pass.pred.boxes,
        });
        let boxes = pass.cx.tape.data(pass.pred.boxes);
        let mut out = Vec::with_capacity(self.cfg.num_queries * self.cfg.classes);
        for q in 0..self.cfg.num_queries {
            let b = [
                boxes[q * 4].as_f64(),
                boxes[q * 4 + 1].as_f64(),
                boxes[q * 4 + 2].as_f64(),
                boxes[q * 4 + 3].as_f64(),
            ];
            for c in 0..self.cfg.classes {
                out.push(Detection {
                    class: c,
                    score: probs[q * k + c],
                    cxcywh: b,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            dim: 16,
            heads: 2,
            enc_blocks: 2,
            dec_blocks: 2,
            num_queries: 6,
            classes: 3,
            ffn_hidden: 32,
            backbone_channels: vec![4, 8],
            image_size: 32,
            toggles: Toggles::default(),
        }
    }

    fn image(cfg: &ModelConfig) -> Vec<f64> {
        let n = 3 * cfg.image_size * cfg.image_size;
        (0..n).map(|i| (i % 255) as f64 / 255.0).collect()
    }

    #[test]
    fn toggle_validation() {
        let mut t = Toggles::default();
        t.fq = false;
        t.fq_pos_embed = true;
        assert!(t.validate().is_err());
        let mut t = Toggles::default();
        t.encoder_avgpool = true;
        assert!(t.validate().is_err());
        t.cq = false;
        assert!(t.validate().is_ok());
    }

    #[test]
    fn forward_shapes_and_losses() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let img = image(&cfg);
        let mut pass = model
            .forward(&img, ForwardOpts::train(&cfg.toggles))
            .unwrap();
        assert_eq!(pass.grid, (4, 4));
        assert_eq!(
            pass.cx.tape.shape(pass.pred.class_logits),
            &[cfg.num_queries, cfg.classes + 1]
        );
        assert_eq!(pass.cx.tape.shape(pass.pred.boxes), &[cfg.num_queries, 4]);

        let tags = vec![1.0, 0.0, 1.0];
        let cq = model.encoder_presence_loss(&mut pass, &tags).unwrap();
        let fq = model.foreground_loss(&mut pass, &tags).unwrap();
        let bc = model.backbone_class_loss(&mut pass, &tags).unwrap();
        let dc = model.domain_loss(&mut pass, Domain::Source, 0.5).unwrap();
        let targets = vec![GtBox {
            class: 1,
            cxcywh: [0.4, 0.5, 0.3, 0.2],
        }];
        let det = model
            .detection_loss(
                &mut pass,
                &targets,
                MatchWeights::default(),
                DetLossWeights::default(),
                false,
            )
            .unwrap();
        for v in [cq, fq, bc, dc, det] {
            assert!(pass.cx.tape.value(v).is_finite());
        }
        let dets = model.detections(&pass);
        assert_eq!(dets.len(), cfg.num_queries * cfg.classes);
        assert!(dets.iter().all(|d| d.score.is_finite() && d.score >= 0.0));
    }

    #[test]
    fn aux_loss_adds_block_terms() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let img = image(&cfg);
        let targets = vec![GtBox {
            class: 0,
            cxcywh: [0.5, 0.5, 0.4, 0.4],
        }];
        let loss_of = |aux: bool| -> f64 {
            let mut pass = model
                .forward(&img, ForwardOpts::train(&cfg.toggles))
                .unwrap();
            let det = model
                .detection_loss(
                    &mut pass,
                    &targets,
                    MatchWeights::default(),
                    DetLossWeights::default(),
                    aux,
                )
                .unwrap();
            pass.cx.tape.value(det)
        };
        assert!(loss_of(true) > loss_of(false));
    }

    #[test]
    fn inference_drops_class_queries_keeps_detections_identical() {
        // The non-interference invariant surfaced end to end: detections
        // with and without class queries attached are bit-identical.
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(cfg.clone(), 9).unwrap();
        let img: Vec<f32> = image(&cfg).into_iter().map(|v| v as f32).collect();
        let with_cq = model
            .forward(
                &img,
                ForwardOpts {
                    class_queries: true,
                    foreground: true,
                    capture_attention: false,
                },
            )
            .unwrap();
        let without = model
            .forward(&img, ForwardOpts::inference(&cfg.toggles))
            .unwrap();
        assert_eq!(
            with_cq.cx.tape.data(with_cq.pred.class_logits),
            without.cx.tape.data(without.pred.class_logits)
        );
        assert_eq!(
            with_cq.cx.tape.data(with_cq.pred.boxes),
            without.cx.tape.data(without.pred.boxes)
        );
    }

    #[test]
    fn too_many_targets_is_contract_error() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let img = image(&cfg);
        let mut pass = model
            .forward(&img, ForwardOpts::train(&cfg.toggles))
            .unwrap();
        let targets: Vec<GtBox> = (0..cfg.num_queries + 1)
            .map(|i| GtBox {
                class: i % cfg.classes,
                cxcywh: [0.5, 0.5, 0.1, 0.1],
            })
            .collect();
        assert!(matches!(
            model.detection_loss(
                &mut pass,
                &targets,
                MatchWeights::default(),
                DetLossWeights::default(),
                false
            ),
            Err(Error::Contract(_))
        ));
    }
}
