//! The full regression model: optional backbone plus attention head, with a
//! stable parameter ordering shared by the optimizer and the checkpoint
//! format.

use crate::backbone::{
    backbone_graph_forward, BackboneBinding, BackboneConfig, ImageTensor, TinyBackboneParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::head::{
    head_forward, AttentionOutputs, FeatureDims, HeadBinding, HeadMode, PdanetParams,
    EMOTION_DIMS,
};
use crate::num::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How a model is constructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelConfig {
    /// Backbone followed by the head; trains end to end on images.
    WithBackbone(BackboneConfig),
    /// Head only, consuming externally computed feature maps.
    HeadOnly(FeatureDims),
}

impl ModelConfig {
    pub fn feature_dims(&self) -> Result<FeatureDims> {
        match self {
            ModelConfig::WithBackbone(cfg) => cfg.output_dims(),
            ModelConfig::HeadOnly(dims) => Ok(*dims),
        }
    }
}

/// Model parameters plus the geometry they were built for.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub backbone: Option<TinyBackboneParams<T>>,
    pub head: PdanetParams<T>,
    pub dims: FeatureDims,
}

impl<T: Scalar> Model<T> {
    /// Initialize all parameters from one seeded stream: backbone stages
    /// first, then the head.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.feature_dims()?;
        let backbone = match config {
            ModelConfig::WithBackbone(cfg) => {
                Some(TinyBackboneParams::init(cfg.clone(), &mut rng)?)
            }
            ModelConfig::HeadOnly(_) => None,
        };
        let head = PdanetParams::init(dims, EMOTION_DIMS, &mut rng);
        head.validate(dims)?;
        Ok(Model {
            backbone,
            head,
            dims,
        })
    }

    /// Every parameter tensor in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            out.extend(b.named());
        }
        out.extend(
            self.head
                .named()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        if let Some(b) = &mut self.backbone {
            out.extend(b.named_mut());
        }
        out.extend(
            self.head
                .named_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t)),
        );
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph ids of every bound parameter, aligned with [`Model::named`].
pub struct ModelBinding {
    pub backbone: Option<BackboneBinding>,
    pub head: HeadBinding,
}

impl ModelBinding {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, model: &Model<T>) -> Self {
        let backbone = model
            .backbone
            .as_ref()
            .map(|b| BackboneBinding::bind(g, b));
        let head = HeadBinding::bind(g, &model.head);
        ModelBinding { backbone, head }
    }

    pub fn named(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::new();
        if let Some(b) = &self.backbone {
            out.extend(b.named());
        }
        out.extend(
            self.head
                .named()
                .into_iter()
                .map(|(n, id)| (n.to_string(), id)),
        );
        out
    }
}

/// One model input: an image for backbone models, or a feature map.
pub enum ModelInput<'a> {
    Image(&'a ImageTensor),
    Features(&'a crate::head::FeatureMap),
}

/// Produce the feature tensor for one input on an open graph.
pub fn input_features<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    binding: &ModelBinding,
    input: &ModelInput<'_>,
) -> Result<TensorId> {
    match input {
        ModelInput::Image(img) => {
            let backbone = model.backbone.as_ref().ok_or_else(|| {
                Error::Config("model has no backbone; feed feature maps instead".into())
            })?;
            let bb = binding
                .backbone
                .as_ref()
                .expect("binding matches model structure");
            let leaf = img.leaf(g);
            let (feature, dims) = backbone_graph_forward(g, leaf, backbone, bb)?;
            debug_assert_eq!(dims, model.dims);
            Ok(feature)
        }
        ModelInput::Features(fm) => {
            if fm.dims != model.dims {
                return Err(Error::Config(format!(
                    "feature map {}x{}x{} does not match model {}x{}x{}",
                    fm.dims.height,
                    fm.dims.width,
                    fm.dims.channels,
                    model.dims.height,
                    model.dims.width,
                    model.dims.channels
                )));
            }
            Ok(fm.leaf(g))
        }
    }
}

/// Forward one input through backbone and head on an open graph.
pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    binding: &ModelBinding,
    input: &ModelInput<'_>,
    mode: HeadMode,
) -> Result<AttentionOutputs> {
    let feature = input_features(g, model, binding, input)?;
    head_forward(g, feature, model.dims, &binding.head, mode)
}

/// Standalone prediction for one input; returns the VAD triple.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    input: &ModelInput<'_>,
    mode: HeadMode,
) -> Result<[f64; 3]> {
    let mut g = Graph::new();
    let binding = ModelBinding::bind(&mut g, model);
    let out = model_forward(&mut g, model, &binding, input, mode)?;
    let v = g.values(out.prediction);
    Ok([v[0].as_f64(), v[1].as_f64(), v[2].as_f64()])
}
