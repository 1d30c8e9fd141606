//! Multimodal encoder backends.
//!
//! A backend provides a text embedding `g`, an image embedding `f` and the
//! intermediate layers of `f`, each image-side output paired with a
//! vector-Jacobian product back to pixel space.

mod augment;
pub mod sidecar;
pub mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use augment::{AugmentConfig, Warp};
pub use sidecar::SidecarBackend;
pub use toy::ToyBackend;

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    /// Normalizes `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVec) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::contract(format!("embedding dimensions differ: {} vs {}", self.dim(), other.dim())));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }
}

/// Row-major tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!("tensor shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }
}

/// Feature tensors keyed by layer id, in ascending id order.
pub type FeatureMaps = BTreeMap<usize, Tensor>;

/// Pixel-space vector-Jacobian product of one forward evaluation.
pub trait Vjp: Send + Sync {
    /// `upstream` is the gradient with respect to the forward output: the
    /// embedding, or the requested feature maps concatenated in ascending
    /// layer order. Returns a gradient shaped like the input image.
    fn apply(&self, upstream: &[f64]) -> Result<Vec<f64>>;
}

pub struct ImageEmbedding {
    pub embedding: EmbeddingVec,
    pub vjp: Box<dyn Vjp>,
}

pub struct Features {
    pub maps: FeatureMaps,
    pub vjp: Box<dyn Vjp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: usize,
    /// Shape `[channels, height, width]` at the backend's nominal resolution.
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub embedding_dim: usize,
    pub layers: Vec<LayerInfo>,
    pub deterministic: bool,
    pub augmentation: bool,
    /// Input resolution the backend resizes to internally, if any.
    #[serde(default)]
    pub input_resolution: Option<[usize; 2]>,
    /// Smallest accepted image side.
    pub min_resolution: usize,
}

impl BackendDescriptor {
    pub fn has_layer(&self, id: usize) -> bool {
        self.layers.iter().any(|l| l.id == id)
    }
}

pub trait EncoderBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn embed_text(&self, prompt: &str) -> Result<EmbeddingVec>;

    fn embed_image(&self, image: &RasterImage) -> Result<ImageEmbedding>;

    /// Intermediate activations for each id in `layer_ids` (duplicates are
    /// collapsed). An empty set yields an empty map.
    fn features(&self, image: &RasterImage, layer_ids: &[usize]) -> Result<Features>;
}

pub(crate) fn check_layers(desc: &BackendDescriptor, layer_ids: &[usize]) -> Result<()> {
    match layer_ids.iter().find(|id| !desc.has_layer(**id)) {
        Some(id) => Err(Error::contract(format!(
            "layer {id} is not exposed by backend `{}` (available: {:?})",
            desc.name,
            desc.layers.iter().map(|l| l.id).collect::<Vec<_>>()
        ))),
        None => Ok(()),
    }
}

pub(crate) fn check_image(desc: &BackendDescriptor, image: &RasterImage) -> Result<()> {
    if image.width() < desc.min_resolution || image.height() < desc.min_resolution {
        return Err(Error::contract(format!(
            "backend `{}` needs images of at least {m}×{m}, got {}×{}",
            desc.name,
            image.width(),
            image.height(),
            m = desc.min_resolution
        )));
    }
    Ok(())
}

/// Parses a backend spec: `toy` or `remote:<host:port>`.
pub fn backend_from_spec(spec: &str) -> Result<std::sync::Arc<dyn EncoderBackend>> {
    match spec {
        "toy" => Ok(std::sync::Arc::new(ToyBackend::new())),
        s if s.starts_with("remote:") => Ok(std::sync::Arc::new(SidecarBackend::connect(&s["remote:".len()..])?)),
        other => Err(Error::Input(format!("unknown backend `{other}` (expected `toy` or `remote:<addr>`)"))),
    }
}
