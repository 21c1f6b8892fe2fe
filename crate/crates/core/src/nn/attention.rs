//! Attention-augmented convolution.
//!
//! Every spatial position of a feature map attends over all positions with
//! `n_heads` independent scaled dot-product heads. The per-head outputs are
//! concatenated, mixed by a pointwise projection, and concatenated channel-wise
//! with an ordinary convolution of the same input. No positional encoding is
//! added.

use anomgan_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::conv::{Activation, ConvBlock, ConvSpec, Resample, Upsampling};
use super::params::{Bound, Builder, ParamId};
use crate::error::{Error, Result};

/// Head count and per-head depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub n_heads: usize,
    pub key_depth: usize,
    pub value_depth: usize,
}

impl HeadSpec {
    /// Output channels of the fused query/key/value projection.
    pub fn qkv_channels(&self) -> usize {
        self.n_heads * (2 * self.key_depth + self.value_depth)
    }

    /// Channels contributed by the attention branch.
    pub fn attention_channels(&self) -> usize {
        self.n_heads * self.value_depth
    }

    fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.key_depth == 0 || self.value_depth == 0 {
            return Err(Error::Config(format!(
                "attention heads and depths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Result of one attention pass over an `(N, C, H, W)` map.
pub struct AttentionOutput<'g> {
    /// `(N, n_heads * value_depth, H, W)`, after output mixing.
    pub output: Var<'g>,
    /// Softmax weights, `(N * n_heads, H*W, H*W)`; each row sums to one.
    pub weights: Var<'g>,
}

/// Multi-head self-attention over spatial positions.
///
/// `w_qkv` is a pointwise kernel `(qkv_channels, C, 1, 1)` whose output
/// channels are queries, then keys, then values, each laid out head-major.
/// `w_out` is `(attention_channels, attention_channels, 1, 1)`.
pub fn self_attention<'g>(x: Var<'g>, w_qkv: Var<'g>, w_out: Var<'g>, heads: HeadSpec) -> AttentionOutput<'g> {
    let shape = x.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let positions = h * w;
    let nh = heads.n_heads;
    let (dk, dv) = (heads.key_depth, heads.value_depth);

    let qkv = x.conv2d(w_qkv, None, 1, 0);
    let q = qkv
        .slice_channels(0, nh * dk)
        .reshape([n * nh, dk, positions])
        .transpose_last2();
    let k = qkv.slice_channels(nh * dk, nh * dk).reshape([n * nh, dk, positions]);
    let v = qkv
        .slice_channels(2 * nh * dk, nh * dv)
        .reshape([n * nh, dv, positions])
        .transpose_last2();

    let logits = q.batch_matmul(k).scale(1.0 / (dk as f64).sqrt());
    let weights = logits.softmax_last();
    let heads_out = weights
        .batch_matmul(v)
        .transpose_last2()
        .reshape([n, nh * dv, h, w]);
    let output = heads_out.conv2d(w_out, None, 1, 0);
    AttentionOutput { output, weights }
}

/// Projection matrices in row-vector convention: `q = x · wq` for a
/// position's feature row `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    /// `(F, n_heads * key_depth)`
    pub wq: Tensor,
    /// `(F, n_heads * key_depth)`
    pub wk: Tensor,
    /// `(F, n_heads * value_depth)`
    pub wv: Tensor,
    /// `(n_heads * value_depth, n_heads * value_depth)`
    pub wo: Tensor,
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.dim(0), t.dim(1));
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_vec([c, r], out)
}

/// Matrix form of [`self_attention`]: `x` is `(H*W, F)` with one row per
/// spatial position. Returns the `(H*W, n_heads * value_depth)` output and the
/// `(n_heads, H*W, H*W)` attention weights.
pub fn multi_head_self_attention(
    x: &Tensor,
    proj: &AttentionProjections,
    heads: HeadSpec,
) -> Result<(Tensor, Tensor)> {
    heads.validate()?;
    if x.ndim() != 2 {
        return Err(Error::Shape(format!("expected (positions, features), got {:?}", x.shape())));
    }
    let (positions, features) = (x.dim(0), x.dim(1));
    let expect = [
        ("wq", &proj.wq, [features, heads.n_heads * heads.key_depth]),
        ("wk", &proj.wk, [features, heads.n_heads * heads.key_depth]),
        ("wv", &proj.wv, [features, heads.attention_channels()]),
        ("wo", &proj.wo, [heads.attention_channels(), heads.attention_channels()]),
    ];
    for (name, t, dims) in expect {
        if t.shape() != dims {
            return Err(Error::Shape(format!("{name} must be {dims:?}, got {:?}", t.shape())));
        }
    }
    // Row-vector projections become pointwise conv kernels (out, in, 1, 1).
    let mut qkv = transpose2(&proj.wq).into_data();
    qkv.extend(transpose2(&proj.wk).into_data());
    qkv.extend(transpose2(&proj.wv).into_data());
    let w_qkv = Tensor::from_vec([heads.qkv_channels(), features, 1, 1], qkv);
    let a = heads.attention_channels();
    let w_out = transpose2(&proj.wo).reshape([a, a, 1, 1]);
    let image = transpose2(x).reshape([1, features, positions, 1]);

    let g = Graph::new();
    let out = self_attention(g.constant(image), g.constant(w_qkv), g.constant(w_out), heads);
    let output = transpose2(&(*out.output.value()).clone().reshape([a, positions]));
    let weights = (*out.weights.value()).clone();
    Ok((output, weights))
}

/// Convolution branch plus attention branch, concatenated channel-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: HeadSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ConvBlock,
    pub qkv: ParamId,
    pub out: ParamId,
}

impl AttentionParams {
    /// Channel accounting is validated here, never at forward time.
    pub fn build(
        builder: &mut Builder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        heads: HeadSpec,
    ) -> Result<Self> {
        heads.validate()?;
        let attn = heads.attention_channels();
        if attn >= out_channels {
            return Err(Error::Config(format!(
                "{name}: attention channels {attn} leave no room for the convolution branch of a \
                 {out_channels}-channel layer"
            )));
        }
        let conv = ConvBlock::build(
            builder,
            &format!("{name}.conv"),
            ConvSpec::new(in_channels, out_channels - attn, Resample::Keep, Activation::Identity),
            Upsampling::Nearest,
        )?;
        let qkv = builder.weight(&format!("{name}.qkv"), &[heads.qkv_channels(), in_channels, 1, 1])?;
        let out = builder.weight(&format!("{name}.mix"), &[attn, attn, 1, 1])?;
        Ok(Self {
            heads,
            in_channels,
            out_channels,
            conv,
            qkv,
            out,
        })
    }

    pub fn conv_channels(&self) -> usize {
        self.out_channels - self.heads.attention_channels()
    }

    /// `(N, C_in, H, W) -> (N, C_out, H, W)`, conv channels first.
    pub fn forward<'g>(&self, params: &Bound<'g, '_>, x: Var<'g>) -> AttentionOutput<'g> {
        let conv = self.conv.forward(params, x);
        let attn = self_attention(x, params.weight(self.qkv), params.weight(self.out), self.heads);
        AttentionOutput {
            output: Var::concat(&[conv, attn.output]),
            weights: attn.weights,
        }
    }
}

/// Convenience wrapper for a single `(C_in, H, W)` map.
pub fn attention_augmented_conv(x: &Tensor, params: &AttentionParams, store: &super::ParamStore) -> Result<Tensor> {
    if x.ndim() != 3 || x.dim(0) != params.in_channels {
        return Err(Error::Shape(format!(
            "expected ({}, H, W), got {:?}",
            params.in_channels,
            x.shape()
        )));
    }
    let g = Graph::new();
    let bound = store.bind(&g, false);
    let input = g.constant((*x).clone().reshape([1, x.dim(0), x.dim(1), x.dim(2)]));
    let out = params.forward(&bound, input).output.value();
    let shape = out.shape()[1..].to_vec();
    Ok((*out).clone().reshape(shape))
}
