//! Small trainable convolutional backbone and feature-map interchange.
//!
//! The backbone stands in for a large pretrained network at desk scale: a
//! short stack of strided convolutions whose stride composition must map the
//! configured input size exactly onto the feature grid. Feature maps can also
//! be imported from and exported to a compact binary format, so features
//! computed by external tools can drive the head directly.

use crate::error::{Error, Result};
use crate::graph::{conv_out_extent, Activation, Graph, TensorId};
use crate::head::{FeatureDims, FeatureMap};
use crate::num::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{Read, Write};

/// An image in [0,1], stored channel-major (channel, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Contract(format!(
                "image {channels}x{height}x{width} expects {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(
                "image values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            values,
        })
    }

    /// Expand a grayscale image to three identical channels.
    pub fn to_rgb(&self) -> ImageTensor {
        if self.channels == 3 {
            return self.clone();
        }
        let mut values = Vec::with_capacity(3 * self.values.len());
        for _ in 0..3 {
            values.extend_from_slice(&self.values);
        }
        ImageTensor {
            channels: 3,
            height: self.height,
            width: self.width,
            values,
        }
    }

    /// Record the image as a constant leaf of shape `[c, h, w]`.
    pub fn leaf<T: Scalar>(&self, g: &mut Graph<T>) -> TensorId {
        let values: Vec<T> = self.values.iter().map(|&v| T::of_f64(v)).collect();
        g.leaf(Tensor {
            shape: vec![self.channels, self.height, self.width],
            values,
            requires_grad: false,
            grad: None,
        })
    }
}

/// Static description of one convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
}

/// Backbone architecture: input geometry plus the stage stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<StageSpec>,
}

impl BackboneConfig {
    /// Default desk-scale backbone: four tanh stages, 4x4 kernels with
    /// stride 2 and pad 1 (exact halving), 3->8->16->32->32 channels,
    /// mapping 64x64 inputs onto a 4x4x32 feature grid.
    pub fn default_desk() -> Self {
        let stage = |out_channels| StageSpec {
            out_channels,
            kernel: 4,
            stride: 2,
            pad: 1,
            activation: Activation::Tanh,
        };
        BackboneConfig {
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            stages: vec![stage(8), stage(16), stage(32), stage(32)],
        }
    }

    /// Feature dimensions this configuration produces; errors when any stage
    /// has a fractional output size.
    pub fn output_dims(&self) -> Result<FeatureDims> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut channels = self.input_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 {
                return Err(Error::Config(format!("stage {i} has zero stride")));
            }
            h = conv_out_extent(h, s.kernel, s.stride, s.pad).map_err(|e| {
                Error::Config(format!("stage {i} height: {e}"))
            })?;
            w = conv_out_extent(w, s.kernel, s.stride, s.pad).map_err(|e| {
                Error::Config(format!("stage {i} width: {e}"))
            })?;
            channels = s.out_channels;
        }
        FeatureDims::new(h, w, channels)
    }
}

/// One stage's learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T> {
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: StageSpec,
}

/// Learnable weights of the whole backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyBackboneParams<T> {
    pub config: BackboneConfig,
    pub stages: Vec<ConvStage<T>>,
}

impl<T: Scalar> TinyBackboneParams<T> {
    /// Fresh parameters: kernels uniform in ±sqrt(3/fan_in) (unit forward
    /// variance gain, so features keep their scale through the stack),
    /// biases zero.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.output_dims()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut c_in = config.input_channels;
        for spec in &config.stages {
            let fan_in = c_in * spec.kernel * spec.kernel;
            let scale = (3.0 / fan_in as f64).sqrt();
            let len = spec.out_channels * c_in * spec.kernel * spec.kernel;
            let values = (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    T::of_f64((2.0 * u - 1.0) * scale)
                })
                .collect();
            stages.push(ConvStage {
                kernels: Tensor {
                    shape: vec![spec.out_channels, c_in, spec.kernel, spec.kernel],
                    values,
                    requires_grad: true,
                    grad: None,
                },
                bias: Tensor::zeros(vec![spec.out_channels]).with_grad(),
                spec: *spec,
            });
            c_in = spec.out_channels;
        }
        Ok(TinyBackboneParams { config, stages })
    }

    pub fn output_dims(&self) -> Result<FeatureDims> {
        self.config.output_dims()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(self.stages.len() * 2);
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.kernels"), &s.kernels));
            out.push((format!("backbone.stage{i}.bias"), &s.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(self.stages.len() * 2);
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.stage{i}.kernels"), &mut s.kernels));
            out.push((format!("backbone.stage{i}.bias"), &mut s.bias));
        }
        out
    }
}

/// Per-pass graph ids of the backbone parameters.
#[derive(Debug, Clone)]
pub struct BackboneBinding {
    pub stages: Vec<(TensorId, TensorId)>,
}

impl BackboneBinding {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, p: &TinyBackboneParams<T>) -> Self {
        let stages = p
            .stages
            .iter()
            .map(|s| (g.param(&s.kernels), g.param(&s.bias)))
            .collect();
        BackboneBinding { stages }
    }

    pub fn named(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::with_capacity(self.stages.len() * 2);
        for (i, (k, b)) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.kernels"), *k));
            out.push((format!("backbone.stage{i}.bias"), *b));
        }
        out
    }
}

/// Run the backbone on an already-recorded image leaf, producing the feature
/// map as an `n×m` graph tensor so the head can continue the same graph.
pub fn backbone_graph_forward<T: Scalar>(
    g: &mut Graph<T>,
    image: TensorId,
    params: &TinyBackboneParams<T>,
    binding: &BackboneBinding,
) -> Result<(TensorId, FeatureDims)> {
    let cfg = &params.config;
    let want = [cfg.input_channels, cfg.input_height, cfg.input_width];
    if g.shape(image) != want {
        return Err(Error::Config(format!(
            "backbone expects input {want:?}, got {:?}",
            g.shape(image)
        )));
    }
    let mut current = image;
    for (stage, (kernels, bias)) in params.stages.iter().zip(binding.stages.iter()) {
        let conv = g.conv2d(current, *kernels, stage.spec.stride, stage.spec.pad)?;
        let shape = g.shape(conv).to_vec();
        let (c, oh, ow) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(conv, vec![c, oh * ow])?;
        let biased = g.broadcast_add_cols(flat, *bias)?;
        let activated = g.activation(biased, stage.spec.activation);
        current = g.reshape(activated, vec![c, oh, ow])?;
    }
    let shape = g.shape(current).to_vec();
    let dims = FeatureDims::new(shape[1], shape[2], shape[0])?;
    let feature = g.reshape(current, vec![dims.channels, dims.locations()])?;
    Ok((feature, dims))
}

/// Convenience wrapper: run the backbone outside any larger graph and
/// materialize the result.
pub fn backbone_forward<T: Scalar>(
    image: &ImageTensor,
    params: &TinyBackboneParams<T>,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let img = image.leaf(&mut g);
    let binding = BackboneBinding::bind(&mut g, params);
    let (feature, dims) = backbone_graph_forward(&mut g, img, params, &binding)?;
    let values = g
        .values(feature)
        .iter()
        .map(|&v| v.as_f64() as f32)
        .collect();
    FeatureMap::new(dims, values)
}

// ── feature-map file format ─────────────────────────────────────────────
//
// magic "PDAF", then little-endian u32 h, w, n, then h·w·n little-endian
// f32 values in channel-major (channel, row, column) order.

const FEATURE_MAGIC: &[u8; 4] = b"PDAF";
/// Upper bound on h·w·n accepted by the reader.
const MAX_FEATURE_VALUES: u64 = 1 << 28;

pub fn save_feature_map(fm: &FeatureMap, sink: &mut impl Write) -> Result<()> {
    sink.write_all(FEATURE_MAGIC)?;
    sink.write_all(&(fm.dims.height as u32).to_le_bytes())?;
    sink.write_all(&(fm.dims.width as u32).to_le_bytes())?;
    sink.write_all(&(fm.dims.channels as u32).to_le_bytes())?;
    for v in &fm.values {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_feature_map(source: &mut impl Read) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    source.read_exact(&mut magic).map_err(|_| Error::Format {
        what: "stream too short for magic bytes".into(),
        offset: Some(0),
    })?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            what: format!("bad magic bytes {magic:?}, expected \"PDAF\""),
            offset: Some(0),
        });
    }
    let mut dims = [0u32; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut buf = [0u8; 4];
        source.read_exact(&mut buf).map_err(|_| Error::Format {
            what: "truncated header".into(),
            offset: Some(4 + 4 * i as u64),
        })?;
        *d = u32::from_le_bytes(buf);
    }
    let (h, w, n) = (dims[0] as u64, dims[1] as u64, dims[2] as u64);
    if h == 0 || w == 0 || n == 0 {
        return Err(Error::Format {
            what: format!("dimensions must be positive, got {h}x{w}x{n}"),
            offset: Some(4),
        });
    }
    let count = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(n))
        .filter(|&p| p <= MAX_FEATURE_VALUES)
        .ok_or(Error::Format {
            what: format!("dimension overflow: {h}x{w}x{n}"),
            offset: Some(4),
        })? as usize;
    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    let want = count * 4;
    if payload.len() != want {
        let end = 16 + payload.len().min(want) as u64;
        let what = if payload.len() < want {
            format!(
                "truncated payload: header promises {count} floats, got {} bytes of {want}",
                payload.len()
            )
        } else {
            format!("trailing data after {count} floats", count = count)
        };
        return Err(Error::Format {
            what,
            offset: Some(end),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMap::new(
        FeatureDims::new(h as usize, w as usize, n as usize)?,
        values,
    )
}

pub fn save_feature_map_file(fm: &FeatureMap, path: &std::path::Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_feature_map(fm, &mut file)?;
    Ok(())
}

pub fn load_feature_map_file(path: &std::path::Path) -> Result<FeatureMap> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    load_feature_map(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_maps_64_to_4x4x32() {
        let dims = BackboneConfig::default_desk().output_dims().unwrap();
        assert_eq!(
            dims,
            FeatureDims {
                height: 4,
                width: 4,
                channels: 32
            }
        );
    }

    #[test]
    fn default_forward_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params =
            TinyBackboneParams::<f64>::init(BackboneConfig::default_desk(), &mut rng).unwrap();
        let img = ImageTensor::new(3, 64, 64, vec![0.5; 3 * 64 * 64]).unwrap();
        let fm = backbone_forward(&img, &params).unwrap();
        assert_eq!(fm.dims.height, 4);
        assert_eq!(fm.dims.width, 4);
        assert_eq!(fm.dims.channels, 32);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = BackboneConfig {
            input_channels: 3,
            input_height: 8,
            input_width: 8,
            stages: vec![
                StageSpec {
                    out_channels: 4,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Tanh,
                },
                StageSpec {
                    out_channels: 5,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Tanh,
                },
            ],
        };
        let params = TinyBackboneParams::<f64>::init(cfg, &mut rng).unwrap();
        let img = ImageTensor::new(3, 8, 8, vec![0.0; 3 * 64]).unwrap();
        let fm = backbone_forward(&img, &params).unwrap();
        assert!(fm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params =
            TinyBackboneParams::<f64>::init(BackboneConfig::default_desk(), &mut rng).unwrap();
        let img = ImageTensor::new(3, 32, 32, vec![0.0; 3 * 32 * 32]).unwrap();
        match backbone_forward(&img, &params) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn fractional_stage_output_is_rejected() {
        let cfg = BackboneConfig {
            input_channels: 3,
            input_height: 64,
            input_width: 64,
            stages: vec![StageSpec {
                out_channels: 8,
                kernel: 3,
                stride: 2,
                pad: 1,
                activation: Activation::Tanh,
            }],
        };
        assert!(cfg.output_dims().is_err());
    }

    #[test]
    fn backbone_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params =
            TinyBackboneParams::<f64>::init(BackboneConfig::default_desk(), &mut rng).unwrap();
        let values: Vec<f64> = (0..3 * 64 * 64).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageTensor::new(3, 64, 64, values).unwrap();
        let a = backbone_forward(&img, &params).unwrap();
        let b = backbone_forward(&img, &params).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn feature_map_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = FeatureDims::new(4, 4, 32).unwrap();
        let values: Vec<f32> = (0..dims.channels * dims.locations())
            .map(|_| rand::Rng::gen::<f32>(&mut rng) * 2.0 - 1.0)
            .collect();
        let fm = FeatureMap::new(dims, values).unwrap();
        let mut buf = Vec::new();
        save_feature_map(&fm, &mut buf).unwrap();
        let loaded = load_feature_map(&mut buf.as_slice()).unwrap();
        assert_eq!(fm, loaded);
    }

    #[test]
    fn round_trip_identity_over_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let h = rand::Rng::gen_range(&mut rng, 1..6);
            let w = rand::Rng::gen_range(&mut rng, 1..6);
            let n = rand::Rng::gen_range(&mut rng, 1..9);
            let dims = FeatureDims::new(h, w, n).unwrap();
            let values: Vec<f32> = (0..h * w * n)
                .map(|_| rand::Rng::gen::<f32>(&mut rng))
                .collect();
            let fm = FeatureMap::new(dims, values).unwrap();
            let mut buf = Vec::new();
            save_feature_map(&fm, &mut buf).unwrap();
            assert_eq!(load_feature_map(&mut buf.as_slice()).unwrap(), fm);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut buf = b"PDAX".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        match load_feature_map(&mut buf.as_slice()) {
            Err(Error::Format { offset: Some(0), .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut buf = b"PDAF".to_vec();
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        // header promises 12 floats; provide 11
        for i in 0..11 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        match load_feature_map(&mut buf.as_slice()) {
            Err(Error::Format {
                offset: Some(off), ..
            }) => assert_eq!(off, 16 + 44),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_dimensions_are_rejected() {
        let mut buf = b"PDAF".to_vec();
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        match load_feature_map(&mut buf.as_slice()) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
