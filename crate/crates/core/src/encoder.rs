//! Transformer encoder that updates feature tokens by self-attention and,
//! in parallel, C class queries by cross-attention to the same tokens.
//! The token path never reads the class queries, so encoder outputs are
//! bit-identical with or without them.

use crate::error::{Error, Result};
use crate::nn::{
    entangle, residual_norm, AttnWeights, Ctx, FfnBlock, Init, KvProj, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamSet, PosEmbed,
};
use crate::tensor::{Real, Val};

/// One learnable query row per class; row i stays bound to class i.
pub struct ClassQueryBank {
    pub queries: ParamId,
    pub class_count: usize,
}

impl ClassQueryBank {
    pub fn new<T: Real>(params: &mut ParamSet<T>, dim: usize, class_count: usize) -> Self {
        ClassQueryBank {
            queries: params.add("class_queries", vec![class_count, dim], Init::Uniform(1.0)),
            class_count,
        }
    }
}

/// Per-class presence weights, paired row-for-row with the class queries.
pub struct PresenceHead {
    pub weights: ParamId,
    pub class_count: usize,
}

impl PresenceHead {
    pub fn new<T: Real>(params: &mut ParamSet<T>, dim: usize, class_count: usize) -> Self {
        PresenceHead {
            weights: params.add("presence_head.w", vec![class_count, dim], Init::Xavier),
            class_count,
        }
    }
}

/// Presence prediction: logits for the loss, probabilities for reporting.
pub struct Presence {
    pub logits: Val,
    pub probs: Val,
}

/// Diagonal pairing of Eq-style per-class prediction: p_i uses only row i
/// of the query state and row i of the head, never a full linear map.
pub fn class_presence<T: Real>(
    cx: &mut Ctx<T>,
    final_queries: Val,
    head: &PresenceHead,
) -> Result<Presence> {
    let w = cx.p(head.weights);
    if cx.tape.shape(final_queries) != cx.tape.shape(w) {
        return Err(Error::Shape {
            op: "class_presence",
            lhs: cx.tape.shape(final_queries).to_vec(),
            rhs: cx.tape.shape(w).to_vec(),
        });
    }
    let logits = cx.tape.row_dot(final_queries, w)?;
    let probs = cx.tape.sigmoid(logits);
    Ok(Presence { logits, probs })
}

/// The ablation alternative: mean pooling over tokens followed by a full
/// linear classifier.
pub struct AvgPoolHead {
    lin: Linear,
}

impl AvgPoolHead {
    pub fn new<T: Real>(params: &mut ParamSet<T>, dim: usize, classes: usize) -> Self {
        AvgPoolHead {
            lin: Linear::new(params, "avgpool_head", dim, classes),
        }
    }
}

pub fn avgpool_presence<T: Real>(
    cx: &mut Ctx<T>,
    tokens: Val,
    head: &AvgPoolHead,
) -> Result<Presence> {
    let pooled = cx.tape.mean_rows(tokens)?;
    let logits = head.lin.forward(cx, pooled)?;
    let probs = cx.tape.sigmoid(logits);
    Ok(Presence { logits, probs })
}

/// Attention weights captured from one encoder block's class-query
/// cross-attention: per head, a `[C, h*w]` row-stochastic matrix.
pub struct EncoderCapture {
    pub block: usize,
    pub class_query_attn: AttnWeights,
}

pub struct EncoderBlock {
    attn: MultiHeadAttention,
    tok_norm: LayerNorm,
    tok_ffn: FfnBlock,
    cq_norm: LayerNorm,
    cq_ffn: FfnBlock,
}

impl EncoderBlock {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, heads)?,
            tok_norm: LayerNorm::new(params, &format!("{name}.tok_norm"), dim),
            tok_ffn: FfnBlock::new(params, &format!("{name}.tok_ffn"), dim, ffn_hidden),
            cq_norm: LayerNorm::new(params, &format!("{name}.cq_norm"), dim),
            cq_ffn: FfnBlock::new(params, &format!("{name}.cq_ffn"), dim, ffn_hidden),
        })
    }

    /// Token update: T + attn(T+P, T+P, T), then layernorm + FFN.
    /// Class-query update: Q + attn(Q, T+P, T) through the same attention
    /// layer but a separate layernorm + FFN. The token path is computed
    /// first and never reads Q.
    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        tokens: Val,
        class_queries: Option<Val>,
        pos: &PosEmbed,
    ) -> Result<(Val, Option<Val>, Option<AttnWeights>)> {
        let keyed = entangle(&mut cx.tape, tokens, pos)?;
        let kv: KvProj = self.attn.project_kv(cx, keyed, tokens)?;

        let (tok_attn, _) = self.attn.forward_kv(cx, keyed, &kv)?;
        let tok_mid = residual_norm(cx, &self.tok_norm, tokens, tok_attn)?;
        let tok_ffn = self.tok_ffn.forward(cx, tok_mid)?;
        let tok_out = cx.tape.add(tok_mid, tok_ffn)?;

        let (cq_out, cq_attn) = match class_queries {
            None => (None, None),
            Some(q) => {
                let (q_attn, weights) = self.attn.forward_kv(cx, q, &kv)?;
                let q_mid = residual_norm(cx, &self.cq_norm, q, q_attn)?;
                let q_ffn = self.cq_ffn.forward(cx, q_mid)?;
                let q_out = cx.tape.add(q_mid, q_ffn)?;
                (Some(q_out), Some(weights))
            }
        };
        Ok((tok_out, cq_out, cq_attn))
    }
}

pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        depth: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|k| EncoderBlock::new(params, &format!("encoder.block{k}"), dim, heads, ffn_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { blocks })
    }

    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        tokens: Val,
        class_queries: Option<Val>,
        pos: &PosEmbed,
        captures: Option<&mut Vec<EncoderCapture>>,
    ) -> Result<(Val, Option<Val>)> {
        let mut t = tokens;
        let mut q = class_queries;
        let mut captures = captures;
        for (k, block) in self.blocks.iter().enumerate() {
            let (t_next, q_next, attn) = block.forward(cx, t, q, pos)?;
            t = t_next;
            q = q_next;
            if let (Some(caps), Some(weights)) = (captures.as_deref_mut(), attn) {
                caps.push(EncoderCapture {
                    block: k,
                    class_query_attn: weights,
                });
            }
        }
        Ok((t, q))
    }
}
