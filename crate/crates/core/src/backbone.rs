//! Toy strided convolutional feature extractor and the two backbone-level
//! alignment losses: image-level classification and adversarial domain
//! alignment through gradient reversal.

use crate::error::{Error, Result};
use crate::nn::{bce_with_logits_mean, Ctx, Init, Linear, ParamId, ParamSet};
use crate::tensor::{Real, Val};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Domain-classifier label: source 0, target 1.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

/// Flattened feature map: `h*w` tokens of `dim` channels, row-major over
/// the grid.
pub struct FeatureTokens {
    pub tokens: Val,
    pub grid: (usize, usize),
    pub dim: usize,
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = params.add(
            &format!("{name}.w"),
            vec![cin * kernel * kernel, cout],
            Init::Xavier,
        );
        let b = params.add(&format!("{name}.b"), vec![cout], Init::Zeros);
        ConvLayer {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    /// im2col index map from `[h*w, cin]` token layout into
    /// `[oh*ow, cin*k*k]` patches; -1 marks padding.
    fn im2col_map(&self, h: usize, w: usize) -> (Vec<i64>, usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let k = self.kernel;
        let mut map = Vec::with_capacity(oh * ow * self.cin * k * k);
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..self.cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                map.push(-1);
                            } else {
                                map.push((iy * w as i64 + ix) * self.cin as i64 + c as i64);
                            }
                        }
                    }
                }
            }
        }
        (map, oh, ow)
    }

    fn forward<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        tokens: Val,
        grid: (usize, usize),
    ) -> Result<(Val, (usize, usize))> {
        let (h, w) = grid;
        let (map, oh, ow) = self.im2col_map(h, w);
        let patches = cx
            .tape
            .gather(tokens, map, vec![oh * ow, self.cin * self.kernel * self.kernel])?;
        let wv = cx.p(self.w);
        let bv = cx.p(self.b);
        let out = cx.tape.matmul(patches, wv)?;
        let out = cx.tape.add_row(out, bv)?;
        let _ = self.cout;
        Ok((out, (oh, ow)))
    }
}

/// Strided conv stack mapping a `[channels, H, W]` image to feature
/// tokens. Three stages of stride 2 give the default total stride of 8.
pub struct Backbone {
    stages: Vec<ConvLayer>,
    pub dim: usize,
    pub total_stride: usize,
    in_channels: usize,
}

impl Backbone {
    /// `channels` are the intermediate stage widths; `dim` is the output
    /// token dimension.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        in_channels: usize,
        channels: &[usize],
        dim: usize,
    ) -> Self {
        let mut widths = vec![in_channels];
        widths.extend_from_slice(channels);
        widths.push(dim);
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                ConvLayer::new::<T>(
                    params,
                    &format!("backbone.stage{i}"),
                    pair[0],
                    pair[1],
                    3,
                    2,
                    1,
                )
            })
            .collect::<Vec<_>>();
        let total_stride = 1usize << stages.len();
        Backbone {
            stages,
            dim,
            total_stride,
            in_channels,
        }
    }

    /// Puts a `[channels, H, W]` image on the tape as an untracked leaf in
    /// token layout `[H*W, channels]`.
    pub fn image_leaf<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        image: &[T],
        height: usize,
        width: usize,
    ) -> Result<Val> {
        let c = self.in_channels;
        if image.len() != c * height * width {
            return Err(Error::contract(format!(
                "image has {} values, expected {}x{}x{}",
                image.len(),
                c,
                height,
                width
            )));
        }
        let mut tokens = vec![T::zero(); image.len()];
        for ch in 0..c {
            for p in 0..height * width {
                tokens[p * c + ch] = image[ch * height * width + p];
            }
        }
        cx.tape.constant(tokens, vec![height * width, c])
    }

    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        image_tokens: Val,
        height: usize,
        width: usize,
    ) -> Result<FeatureTokens> {
        if height % self.total_stride != 0 || width % self.total_stride != 0 {
            return Err(Error::config(format!(
                "image extents {height}x{width} not divisible by total stride {}",
                self.total_stride
            )));
        }
        let mut tokens = image_tokens;
        let mut grid = (height, width);
        for stage in &self.stages {
            let (out, g) = stage.forward(cx, tokens, grid)?;
            tokens = cx.tape.gelu(out);
            grid = g;
        }
        Ok(FeatureTokens {
            tokens,
            grid,
            dim: self.dim,
        })
    }
}

/// Linear image-level classifier over mean-pooled tokens.
pub struct BcHead {
    lin: Linear,
}

impl BcHead {
    pub fn new<T: Real>(params: &mut ParamSet<T>, dim: usize, classes: usize) -> Self {
        BcHead {
            lin: Linear::new(params, "bc_head", dim, classes),
        }
    }

    pub fn logits<T: Real>(&self, cx: &mut Ctx<T>, features: &FeatureTokens) -> Result<Val> {
        let pooled = cx.tape.mean_rows(features.tokens)?;
        self.lin.forward(cx, pooled)
    }
}

/// Mean-pool -> linear classifier -> per-class BCE against the image tags.
pub fn loss_bc<T: Real>(
    cx: &mut Ctx<T>,
    head: &BcHead,
    features: &FeatureTokens,
    tags: &[f64],
) -> Result<Val> {
    if tags.len() != head.lin.out_dim {
        return Err(Error::contract(format!(
            "loss_bc: {} tags for {} classes",
            tags.len(),
            head.lin.out_dim
        )));
    }
    let logits = head.logits(cx, features)?;
    bce_with_logits_mean(&mut cx.tape, logits, tags)
}

/// Two-layer binary domain classifier fed through gradient reversal.
pub struct DcHead {
    lin1: Linear,
    lin2: Linear,
}

impl DcHead {
    pub fn new<T: Real>(params: &mut ParamSet<T>, dim: usize) -> Self {
        DcHead {
            lin1: Linear::new(params, "dc_head.lin1", dim, dim),
            lin2: Linear::new(params, "dc_head.lin2", dim, 1),
        }
    }

    pub fn logit<T: Real>(
        &self,
        cx: &mut Ctx<T>,
        features: &FeatureTokens,
        reversal_strength: f64,
    ) -> Result<Val> {
        let pooled = cx.tape.mean_rows(features.tokens)?;
        let reversed = cx.tape.grad_reverse(pooled, T::from_f64(reversal_strength));
        let h = self.lin1.forward(cx, reversed)?;
        let h = cx.tape.gelu(h);
        self.lin2.forward(cx, h)
    }
}

/// Adversarial domain-alignment loss: forward is plain BCE of the domain
/// classifier; backward hands the backbone the negated, scaled gradient.
pub fn loss_dc<T: Real>(
    cx: &mut Ctx<T>,
    head: &DcHead,
    features: &FeatureTokens,
    domain: Domain,
    reversal_strength: f64,
) -> Result<Val> {
    if reversal_strength < 0.0 {
        return Err(Error::contract(format!(
            "reversal strength must be nonnegative, got {reversal_strength}"
        )));
    }
    let logit = head.logit(cx, features, reversal_strength)?;
    bce_with_logits_mean(&mut cx.tape, logit, &[domain.label()])
}
