//! Attention head: spatial attention, channel-wise attention, their coupled
//! update, and the final regression projection.
//!
//! The feature map enters as an `n×m` matrix (`n` channels, `m = h·w`
//! locations); column `j` is the feature vector of location `j`. All paths
//! are built on [`Graph`] ops and are differentiable end to end.

use crate::error::{Error, Result};
use crate::graph::{Graph, PoolAxis, PoolKind, TensorId};
use crate::num::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Spatial extent and channel count of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "feature dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(FeatureDims {
            height,
            width,
            channels,
        })
    }

    /// Number of spatial locations, m = h·w.
    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// A materialized feature map, stored channel-major (channel, row, column).
///
/// Stored single-precision regardless of compute precision; this is the
/// interchange type behind the feature-map file format.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dims: FeatureDims,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(dims: FeatureDims, values: Vec<f32>) -> Result<Self> {
        let expect = dims.channels * dims.locations();
        if values.len() != expect {
            return Err(Error::Contract(format!(
                "feature map {}x{}x{} expects {expect} values, got {}",
                dims.height,
                dims.width,
                dims.channels,
                values.len()
            )));
        }
        Ok(FeatureMap { dims, values })
    }

    /// Record the map as a constant `n×m` leaf.
    pub fn leaf<T: Scalar>(&self, g: &mut Graph<T>) -> TensorId {
        let values: Vec<T> = self.values.iter().map(|&v| T::of_f64(v as f64)).collect();
        g.leaf(Tensor {
            shape: vec![self.dims.channels, self.dims.locations()],
            values,
            requires_grad: false,
            grad: None,
        })
    }
}

/// Which attention branches feed the regression layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Spatial attention only.
    Spatial,
    /// Channel-wise attention only.
    Channel,
    /// Channel-wise attention plus the channel-conditioned spatial update.
    Coupled,
}

impl HeadMode {
    pub fn token(&self) -> &'static str {
        match self {
            HeadMode::Spatial => "S",
            HeadMode::Channel => "CW",
            HeadMode::Coupled => "S+CW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(HeadMode::Spatial),
            "CW" => Ok(HeadMode::Channel),
            "S+CW" | "S_CW" => Ok(HeadMode::Coupled),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected S, CW, or S+CW)"
            ))),
        }
    }
}

/// Learnable weights of the attention head.
///
/// The hidden size equals the channel count: the channel attention vector is
/// applied row-wise to the hidden projection, and the shapes only agree when
/// the two match.
#[derive(Debug, Clone, PartialEq)]
pub struct PdanetParams<T> {
    /// k×n projection of the feature map into the hidden space.
    pub spatial_proj: Tensor<T>,
    /// k-vector added to each column of the hidden projection.
    pub spatial_bias: Tensor<T>,
    /// 1×k row that turns hidden columns into per-location scores.
    pub spatial_score: Tensor<T>,
    /// m×m transform behind the channel attention.
    pub channel_proj: Tensor<T>,
    /// m-vector bias of the channel transform.
    pub channel_bias: Tensor<T>,
    /// k×n layer mapping the channel attention into the hidden space.
    pub coupling_weight: Tensor<T>,
    /// k-vector bias of the coupling layer.
    pub coupling_bias: Tensor<T>,
    /// n_outputs×2k regression layer over the aggregated semantic vector.
    pub output_weight: Tensor<T>,
    /// n_outputs-vector regression bias.
    pub output_bias: Tensor<T>,
    /// Hidden size k; pinned to the channel count.
    pub hidden_size: usize,
    /// Number of regression outputs (3: valence, arousal, dominance).
    pub n_outputs: usize,
}

/// Number of emotion dimensions the head regresses.
pub const EMOTION_DIMS: usize = 3;

fn uniform_init<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let scale = (1.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let values = (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            T::of_f64((2.0 * u - 1.0) * scale)
        })
        .collect();
    Tensor {
        shape,
        values,
        requires_grad: true,
        grad: None,
    }
}

impl<T: Scalar> PdanetParams<T> {
    /// Fresh parameters: weights uniform in ±sqrt(1/fan_in), biases zero.
    pub fn init(dims: FeatureDims, n_outputs: usize, rng: &mut impl Rng) -> Self {
        let n = dims.channels;
        let k = n;
        let m = dims.locations();
        PdanetParams {
            spatial_proj: uniform_init(vec![k, n], n, rng),
            spatial_bias: Tensor::zeros(vec![k]).with_grad(),
            spatial_score: uniform_init(vec![1, k], k, rng),
            channel_proj: uniform_init(vec![m, m], m, rng),
            channel_bias: Tensor::zeros(vec![m]).with_grad(),
            coupling_weight: uniform_init(vec![k, n], n, rng),
            coupling_bias: Tensor::zeros(vec![k]).with_grad(),
            output_weight: uniform_init(vec![n_outputs, 2 * k], 2 * k, rng),
            output_bias: Tensor::zeros(vec![n_outputs]).with_grad(),
            hidden_size: k,
            n_outputs,
        }
    }

    /// Check that every weight shape is consistent with `dims`.
    pub fn validate(&self, dims: FeatureDims) -> Result<()> {
        let n = dims.channels;
        let k = self.hidden_size;
        let m = dims.locations();
        if k != n {
            return Err(Error::Config(format!(
                "hidden size {k} must equal channel count {n}"
            )));
        }
        let checks: [(&str, &Tensor<T>, Vec<usize>); 9] = [
            ("spatial_proj", &self.spatial_proj, vec![k, n]),
            ("spatial_bias", &self.spatial_bias, vec![k]),
            ("spatial_score", &self.spatial_score, vec![1, k]),
            ("channel_proj", &self.channel_proj, vec![m, m]),
            ("channel_bias", &self.channel_bias, vec![m]),
            ("coupling_weight", &self.coupling_weight, vec![k, n]),
            ("coupling_bias", &self.coupling_bias, vec![k]),
            (
                "output_weight",
                &self.output_weight,
                vec![self.n_outputs, 2 * k],
            ),
            ("output_bias", &self.output_bias, vec![self.n_outputs]),
        ];
        for (name, t, want) in checks {
            if t.shape != want {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }

    /// Stable-order view of every parameter tensor.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("head.spatial_proj", &self.spatial_proj),
            ("head.spatial_bias", &self.spatial_bias),
            ("head.spatial_score", &self.spatial_score),
            ("head.channel_proj", &self.channel_proj),
            ("head.channel_bias", &self.channel_bias),
            ("head.coupling_weight", &self.coupling_weight),
            ("head.coupling_bias", &self.coupling_bias),
            ("head.output_weight", &self.output_weight),
            ("head.output_bias", &self.output_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("head.spatial_proj", &mut self.spatial_proj),
            ("head.spatial_bias", &mut self.spatial_bias),
            ("head.spatial_score", &mut self.spatial_score),
            ("head.channel_proj", &mut self.channel_proj),
            ("head.channel_bias", &mut self.channel_bias),
            ("head.coupling_weight", &mut self.coupling_weight),
            ("head.coupling_bias", &mut self.coupling_bias),
            ("head.output_weight", &mut self.output_weight),
            ("head.output_bias", &mut self.output_bias),
        ]
    }
}

/// Parameter tensors recorded on a graph for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadBinding {
    pub spatial_proj: TensorId,
    pub spatial_bias: TensorId,
    pub spatial_score: TensorId,
    pub channel_proj: TensorId,
    pub channel_bias: TensorId,
    pub coupling_weight: TensorId,
    pub coupling_bias: TensorId,
    pub output_weight: TensorId,
    pub output_bias: TensorId,
}

impl HeadBinding {
    /// Leaf every parameter into the graph, in `named()` order.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &PdanetParams<T>) -> Self {
        HeadBinding {
            spatial_proj: g.param(&p.spatial_proj),
            spatial_bias: g.param(&p.spatial_bias),
            spatial_score: g.param(&p.spatial_score),
            channel_proj: g.param(&p.channel_proj),
            channel_bias: g.param(&p.channel_bias),
            coupling_weight: g.param(&p.coupling_weight),
            coupling_bias: g.param(&p.coupling_bias),
            output_weight: g.param(&p.output_weight),
            output_bias: g.param(&p.output_bias),
        }
    }

    /// Ids in the same stable order as [`PdanetParams::named`].
    pub fn named(&self) -> Vec<(&'static str, TensorId)> {
        vec![
            ("head.spatial_proj", self.spatial_proj),
            ("head.spatial_bias", self.spatial_bias),
            ("head.spatial_score", self.spatial_score),
            ("head.channel_proj", self.channel_proj),
            ("head.channel_bias", self.channel_bias),
            ("head.coupling_weight", self.coupling_weight),
            ("head.coupling_bias", self.coupling_bias),
            ("head.output_weight", self.output_weight),
            ("head.output_bias", self.output_bias),
        ]
    }
}

/// Everything one head pass produces. Branch fields are present only when
/// the mode computes them.
#[derive(Debug, Clone)]
pub struct AttentionOutputs {
    /// Per-location attention; sums to 1.
    pub spatial_attention: Option<TensorId>,
    /// Per-channel attention; entries strictly in (0,1).
    pub channel_attention: Option<TensorId>,
    pub spatial_feature: Option<TensorId>,
    pub channel_feature: Option<TensorId>,
    /// Concatenation of the two branch vectors (2k).
    pub aggregate_feature: TensorId,
    /// Regression output (n_outputs values).
    pub prediction: TensorId,
}

fn check_feature_shape<T: Scalar>(g: &Graph<T>, f: TensorId, dims: FeatureDims) -> Result<()> {
    let want = [dims.channels, dims.locations()];
    if g.shape(f) != want {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            left: g.shape(f).to_vec(),
            right: want.to_vec(),
        });
    }
    Ok(())
}

/// Hidden projection of the feature map: k×m matrix of per-location columns.
fn hidden_projection<T: Scalar>(
    g: &mut Graph<T>,
    f: TensorId,
    b: &HeadBinding,
) -> Result<TensorId> {
    let proj = g.matmul(b.spatial_proj, f)?;
    g.broadcast_add_cols(proj, b.spatial_bias)
}

fn attention_from_hidden<T: Scalar>(
    g: &mut Graph<T>,
    scored: TensorId,
    b: &HeadBinding,
) -> Result<TensorId> {
    let activated = g.tanh(scored);
    let scores = g.matmul(b.spatial_score, activated)?;
    let m = g.shape(scores)[1];
    let flat = g.reshape(scores, vec![m])?;
    g.softmax(flat)
}

/// Per-location attention and the attended semantic vector.
pub fn spatial_attention<T: Scalar>(
    g: &mut Graph<T>,
    f: TensorId,
    dims: FeatureDims,
    b: &HeadBinding,
) -> Result<(TensorId, TensorId)> {
    check_feature_shape(g, f, dims)?;
    let hidden = hidden_projection(g, f, b)?;
    let attention = attention_from_hidden(g, hidden, b)?;
    let weighted = g.scale_cols(hidden, attention)?;
    let feature = g.pool(weighted, PoolAxis::Cols, PoolKind::Sum)?;
    Ok((attention, feature))
}

/// Per-channel attention and the attended semantic vector.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    f: TensorId,
    dims: FeatureDims,
    b: &HeadBinding,
) -> Result<(TensorId, TensorId)> {
    check_feature_shape(g, f, dims)?;
    let channels_as_cols = g.transpose(f)?; // m×n
    let transformed = g.matmul(b.channel_proj, channels_as_cols)?;
    let biased = g.broadcast_add_cols(transformed, b.channel_bias)?;
    let gated = g.sigmoid(biased);
    let attention = g.pool(gated, PoolAxis::Rows, PoolKind::Avg)?; // n
    let hidden = hidden_projection(g, f, b)?;
    let weighted = g.scale_rows(hidden, attention)?;
    let feature = g.pool(weighted, PoolAxis::Cols, PoolKind::Avg)?;
    Ok((attention, feature))
}

/// Spatial attention conditioned on the channel attention. The attended
/// vector is pooled from the unconditioned hidden projection, weighted by
/// the updated attention.
pub fn coupled_spatial_attention<T: Scalar>(
    g: &mut Graph<T>,
    f: TensorId,
    dims: FeatureDims,
    channel_attention: TensorId,
    b: &HeadBinding,
) -> Result<(TensorId, TensorId)> {
    check_feature_shape(g, f, dims)?;
    let hidden = hidden_projection(g, f, b)?;
    let n = dims.channels;
    let as_col = g.reshape(channel_attention, vec![n, 1])?;
    let mapped = g.matmul(b.coupling_weight, as_col)?;
    let k = g.shape(mapped)[0];
    let mapped_vec = g.reshape(mapped, vec![k])?;
    let shift = g.add_elem(mapped_vec, b.coupling_bias)?;
    let conditioned = g.broadcast_add_cols(hidden, shift)?;
    let attention = attention_from_hidden(g, conditioned, b)?;
    let weighted = g.scale_cols(hidden, attention)?;
    let feature = g.pool(weighted, PoolAxis::Cols, PoolKind::Sum)?;
    Ok((attention, feature))
}

fn project_output<T: Scalar>(
    g: &mut Graph<T>,
    aggregate: TensorId,
    b: &HeadBinding,
) -> Result<TensorId> {
    let len = g.values(aggregate).len();
    let as_col = g.reshape(aggregate, vec![len, 1])?;
    let projected = g.matmul(b.output_weight, as_col)?;
    let n_out = g.shape(projected)[0];
    let flat = g.reshape(projected, vec![n_out])?;
    g.add_elem(flat, b.output_bias)
}

/// Run the head in the given mode. Single-branch modes duplicate their one
/// semantic vector so the regression layer keeps a fixed 2k input.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    f: TensorId,
    dims: FeatureDims,
    b: &HeadBinding,
    mode: HeadMode,
) -> Result<AttentionOutputs> {
    check_feature_shape(g, f, dims)?;
    match mode {
        HeadMode::Spatial => {
            let (attention, feature) = spatial_attention(g, f, dims, b)?;
            let aggregate = g.concat(feature, feature)?;
            let prediction = project_output(g, aggregate, b)?;
            Ok(AttentionOutputs {
                spatial_attention: Some(attention),
                channel_attention: None,
                spatial_feature: Some(feature),
                channel_feature: None,
                aggregate_feature: aggregate,
                prediction,
            })
        }
        HeadMode::Channel => {
            let (attention, feature) = channel_attention(g, f, dims, b)?;
            let aggregate = g.concat(feature, feature)?;
            let prediction = project_output(g, aggregate, b)?;
            Ok(AttentionOutputs {
                spatial_attention: None,
                channel_attention: Some(attention),
                spatial_feature: None,
                channel_feature: Some(feature),
                aggregate_feature: aggregate,
                prediction,
            })
        }
        HeadMode::Coupled => {
            let (chan_attention, chan_feature) = channel_attention(g, f, dims, b)?;
            let (attention, feature) =
                coupled_spatial_attention(g, f, dims, chan_attention, b)?;
            let aggregate = g.concat(feature, chan_feature)?;
            let prediction = project_output(g, aggregate, b)?;
            Ok(AttentionOutputs {
                spatial_attention: Some(attention),
                channel_attention: Some(chan_attention),
                spatial_feature: Some(feature),
                channel_feature: Some(chan_feature),
                aggregate_feature: aggregate,
                prediction,
            })
        }
    }
}
