//! Independent dense-algebra reimplementation of the attention head, written
//! directly over `Vec<f64>` with no graph engine. Used as the oracle the
//! taped implementation is checked against.

// shared across test targets; each target uses a different subset
#![allow(dead_code)]

/// Plain row-major matrix product: a (p×q) · b (q×r).
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..q {
                acc += a[i * q + k] * b[k * r + j];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

pub fn add_col_vector(m: &[f64], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = m[i * cols + j] + v[i];
        }
    }
    out
}

pub fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Oracle parameters, all plain slices.
pub struct OracleParams {
    pub spatial_proj: Vec<f64>,    // k×n
    pub spatial_bias: Vec<f64>,    // k
    pub spatial_score: Vec<f64>,   // 1×k
    pub channel_proj: Vec<f64>,    // m×m
    pub channel_bias: Vec<f64>,    // m
    pub coupling_weight: Vec<f64>, // k×n
    pub coupling_bias: Vec<f64>,   // k
    pub output_weight: Vec<f64>,   // 3×2k
    pub output_bias: Vec<f64>,     // 3
    pub k: usize,
    pub n: usize,
    pub m: usize,
}

pub struct OracleOutputs {
    pub spatial_attention: Option<Vec<f64>>,
    pub channel_attention: Option<Vec<f64>>,
    pub spatial_feature: Option<Vec<f64>>,
    pub channel_feature: Option<Vec<f64>>,
    pub prediction: Vec<f64>,
}

impl OracleParams {
    /// Hidden projection of the feature map (k×m).
    fn hidden(&self, feature: &[f64]) -> Vec<f64> {
        let proj = matmul(&self.spatial_proj, feature, self.k, self.n, self.m);
        add_col_vector(&proj, &self.spatial_bias, self.k, self.m)
    }

    fn attention_over(&self, scored: &[f64]) -> Vec<f64> {
        let activated: Vec<f64> = scored.iter().map(|&v| v.tanh()).collect();
        let logits = matmul(&self.spatial_score, &activated, 1, self.k, self.m);
        softmax(&logits)
    }

    /// Spatial branch: attention over locations plus the sum-pooled vector.
    pub fn spatial(&self, feature: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = self.hidden(feature);
        let attention = self.attention_over(&hidden);
        let mut pooled = vec![0.0; self.k];
        for i in 0..self.k {
            for j in 0..self.m {
                pooled[i] += attention[j] * hidden[i * self.m + j];
            }
        }
        (attention, pooled)
    }

    /// Channel branch: per-channel gate plus the average-pooled vector.
    pub fn channel(&self, feature: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = transpose(feature, self.n, self.m); // m×n
        let t = matmul(&self.channel_proj, &g, self.m, self.m, self.n);
        let biased = add_col_vector(&t, &self.channel_bias, self.m, self.n);
        let gated: Vec<f64> = biased.iter().map(|&v| sigmoid(v)).collect();
        let mut attention = vec![0.0; self.n];
        for j in 0..self.n {
            for i in 0..self.m {
                attention[j] += gated[i * self.n + j];
            }
            attention[j] /= self.m as f64;
        }
        let hidden = self.hidden(feature);
        let mut pooled = vec![0.0; self.k];
        for i in 0..self.k {
            for j in 0..self.m {
                pooled[i] += attention[i] * hidden[i * self.m + j];
            }
            pooled[i] /= self.m as f64;
        }
        (attention, pooled)
    }

    /// Spatial attention conditioned on the channel attention; the pooled
    /// vector weights the unconditioned hidden projection.
    pub fn coupled(&self, feature: &[f64], channel_attention: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = self.hidden(feature);
        let mapped = matmul(&self.coupling_weight, channel_attention, self.k, self.n, 1);
        let shift: Vec<f64> = mapped
            .iter()
            .zip(self.coupling_bias.iter())
            .map(|(a, b)| a + b)
            .collect();
        let conditioned = add_col_vector(&hidden, &shift, self.k, self.m);
        let attention = self.attention_over(&conditioned);
        let mut pooled = vec![0.0; self.k];
        for i in 0..self.k {
            for j in 0..self.m {
                pooled[i] += attention[j] * hidden[i * self.m + j];
            }
        }
        (attention, pooled)
    }

    fn project(&self, aggregate: &[f64]) -> Vec<f64> {
        let raw = matmul(&self.output_weight, aggregate, 3, 2 * self.k, 1);
        raw.iter()
            .zip(self.output_bias.iter())
            .map(|(a, b)| a + b)
            .collect()
    }

    /// Full head pass in any of the three modes.
    pub fn forward(&self, feature: &[f64], mode: &str) -> OracleOutputs {
        match mode {
            "S" => {
                let (attention, pooled) = self.spatial(feature);
                let aggregate: Vec<f64> =
                    pooled.iter().chain(pooled.iter()).cloned().collect();
                OracleOutputs {
                    spatial_attention: Some(attention),
                    channel_attention: None,
                    spatial_feature: Some(pooled.clone()),
                    channel_feature: None,
                    prediction: self.project(&aggregate),
                }
            }
            "CW" => {
                let (attention, pooled) = self.channel(feature);
                let aggregate: Vec<f64> =
                    pooled.iter().chain(pooled.iter()).cloned().collect();
                OracleOutputs {
                    spatial_attention: None,
                    channel_attention: Some(attention),
                    spatial_feature: None,
                    channel_feature: Some(pooled.clone()),
                    prediction: self.project(&aggregate),
                }
            }
            _ => {
                let (chan_attention, chan_pooled) = self.channel(feature);
                let (attention, pooled) = self.coupled(feature, &chan_attention);
                let aggregate: Vec<f64> =
                    pooled.iter().chain(chan_pooled.iter()).cloned().collect();
                OracleOutputs {
                    spatial_attention: Some(attention),
                    channel_attention: Some(chan_attention),
                    spatial_feature: Some(pooled.clone()),
                    channel_feature: Some(chan_pooled.clone()),
                    prediction: self.project(&aggregate),
                }
            }
        }
    }
}

/// Convert engine parameters into oracle form.
pub fn oracle_from_params(
    params: &pdanet::head::PdanetParams<f64>,
    dims: pdanet::head::FeatureDims,
) -> OracleParams {
    OracleParams {
        spatial_proj: params.spatial_proj.values.clone(),
        spatial_bias: params.spatial_bias.values.clone(),
        spatial_score: params.spatial_score.values.clone(),
        channel_proj: params.channel_proj.values.clone(),
        channel_bias: params.channel_bias.values.clone(),
        coupling_weight: params.coupling_weight.values.clone(),
        coupling_bias: params.coupling_bias.values.clone(),
        output_weight: params.output_weight.values.clone(),
        output_bias: params.output_bias.values.clone(),
        k: params.hidden_size,
        n: dims.channels,
        m: dims.locations(),
    }
}

/// Relative difference with a floor that only matters for vanishing values.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
