//! Model assembly: feature extractors, feature mixer, and per-label heads.
//!
//! An assembly is built from an [`AssemblySpec`]: an MLP consumes the
//! tabular block, a small CNN consumes the image block, their feature
//! vectors are concatenated (image features first) when both are present,
//! and one fully connected head per label maps the mixed features to that
//! label's outputs. Parameters live in a named registry whose order is
//! fixed (CNN blocks, then MLP layers, then heads) so optimizers and
//! checkpoints see a stable enumeration.

pub mod checkpoint;

use std::f64::consts::PI;
use std::io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::task::{LabelKind, LabelSpec, Task};
use crate::tensor::{ops, Mode, Tape, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("label declaration invalid: {0}")]
    Labels(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    TensorMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint does not match the requested model: {0}")]
    SpecMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which input blocks the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Tabular,
    Image,
    Both,
}

impl Modality {
    pub fn wants_tabular(self) -> bool {
        matches!(self, Modality::Tabular | Modality::Both)
    }

    pub fn wants_images(self) -> bool {
        matches!(self, Modality::Image | Modality::Both)
    }
}

/// Tabular extractor: a stack of linear → relu → dropout layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub dropout: f32,
}

impl MlpSpec {
    pub fn new(input_width: usize) -> MlpSpec {
        MlpSpec { input_width, hidden: vec![256, 256], dropout: 0.2 }
    }

    pub fn feature_width(&self) -> usize {
        *self.hidden.last().expect("validated non-empty")
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.input_width == 0 {
            return Err(ModelError::Spec("mlp input width must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(ModelError::Spec("mlp hidden widths must be a non-empty positive list".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Spec(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Image extractor: `depth` blocks of conv3x3 (pad 1) → relu → max-pool 2x2
/// with channels doubling per block, finished by global average pooling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl CnnSpec {
    pub fn new(in_channels: usize) -> CnnSpec {
        CnnSpec { in_channels, depth: 3, base_channels: 16 }
    }

    pub fn feature_width(&self) -> usize {
        self.base_channels << (self.depth - 1)
    }

    fn block_channels(&self, block: usize) -> usize {
        self.base_channels << block
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(ModelError::Spec(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(ModelError::Spec("cnn depth and base channels must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model: task, labels, and extractor specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblySpec {
    pub task: Task,
    pub label_specs: Vec<LabelSpec>,
    pub modality: Modality,
    pub mlp: Option<MlpSpec>,
    pub cnn: Option<CnnSpec>,
}

impl AssemblySpec {
    fn validate(&self) -> Result<(), ModelError> {
        if self.label_specs.is_empty() {
            return Err(ModelError::Labels("at least one label is required".into()));
        }
        for spec in &self.label_specs {
            let ok = match spec.kind {
                LabelKind::Classification => {
                    self.task == Task::Classification && spec.class_count >= 2
                }
                LabelKind::Regression => self.task == Task::Regression && spec.class_count == 1,
                LabelKind::Survival => self.task == Task::Deepsurv && spec.class_count == 1,
            };
            if !ok {
                return Err(ModelError::Labels(format!(
                    "label `{}` ({:?}, {} classes) does not fit task {}",
                    spec.name, spec.kind, spec.class_count, self.task
                )));
            }
        }
        if self.task == Task::Deepsurv && self.label_specs.len() != 1 {
            return Err(ModelError::Labels(format!(
                "survival task takes exactly one label, got {}",
                self.label_specs.len()
            )));
        }
        match self.modality {
            Modality::Tabular if self.mlp.is_none() => {
                return Err(ModelError::Spec("tabular modality needs an mlp spec".into()));
            }
            Modality::Image if self.cnn.is_none() => {
                return Err(ModelError::Spec("image modality needs a cnn spec".into()));
            }
            Modality::Both if self.mlp.is_none() || self.cnn.is_none() => {
                return Err(ModelError::Spec("both modalities need mlp and cnn specs".into()));
            }
            _ => {}
        }
        if !self.modality.wants_tabular() && self.mlp.is_some() {
            return Err(ModelError::Spec("mlp spec given but modality has no tabular input".into()));
        }
        if !self.modality.wants_images() && self.cnn.is_some() {
            return Err(ModelError::Spec("cnn spec given but modality has no image input".into()));
        }
        if let Some(mlp) = &self.mlp {
            mlp.validate()?;
        }
        if let Some(cnn) = &self.cnn {
            cnn.validate()?;
        }
        Ok(())
    }

    /// Width of the mixed feature vector feeding every head.
    pub fn feature_width(&self) -> usize {
        self.cnn.as_ref().map(|c| c.feature_width()).unwrap_or(0)
            + self.mlp.as_ref().map(|m| m.feature_width()).unwrap_or(0)
    }
}

#[derive(Debug)]
struct Layer {
    weight: Tensor,
    bias: Tensor,
}

/// A built model: extractors, mixer wiring, and per-label heads.
#[derive(Debug)]
pub struct ModelAssembly {
    spec: AssemblySpec,
    cnn_blocks: Vec<Layer>,
    mlp_layers: Vec<Layer>,
    heads: Vec<Layer>,
}

/// Standard normal via Box-Muller; draw count per element is fixed at two
/// uniforms so initialization is reproducible from the seed alone.
fn normal<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()) as f32
}

fn init_tensor<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| (normal(rng) as f64 * std) as f32).collect();
    Tensor::new(shape, values, true).expect("finite init values")
}

/// Builds and initializes an assembly. Layers feeding relu use He scaling
/// (std sqrt(2/fan_in)), heads use std sqrt(1/fan_in), biases start at zero.
pub fn build_model<R: Rng>(spec: &AssemblySpec, rng: &mut R) -> Result<ModelAssembly, ModelError> {
    spec.validate()?;
    let mut cnn_blocks = Vec::new();
    if let Some(cnn) = &spec.cnn {
        let mut c_in = cnn.in_channels;
        for block in 0..cnn.depth {
            let c_out = cnn.block_channels(block);
            let fan_in = (c_in * 9) as f64;
            cnn_blocks.push(Layer {
                weight: init_tensor(&[c_out, c_in, 3, 3], (2.0 / fan_in).sqrt(), rng),
                bias: Tensor::zeros(&[c_out], true),
            });
            c_in = c_out;
        }
    }
    let mut mlp_layers = Vec::new();
    if let Some(mlp) = &spec.mlp {
        let mut w_in = mlp.input_width;
        for &w_out in &mlp.hidden {
            mlp_layers.push(Layer {
                weight: init_tensor(&[w_in, w_out], (2.0 / w_in as f64).sqrt(), rng),
                bias: Tensor::zeros(&[w_out], true),
            });
            w_in = w_out;
        }
    }
    let feature_width = spec.feature_width();
    let heads = spec
        .label_specs
        .iter()
        .map(|label| {
            let outputs = match label.kind {
                LabelKind::Classification => label.class_count,
                LabelKind::Regression | LabelKind::Survival => 1,
            };
            Layer {
                weight: init_tensor(&[feature_width, outputs], (1.0 / feature_width as f64).sqrt(), rng),
                bias: Tensor::zeros(&[outputs], true),
            }
        })
        .collect();
    Ok(ModelAssembly { spec: spec.clone(), cnn_blocks, mlp_layers, heads })
}

impl ModelAssembly {
    pub fn spec(&self) -> &AssemblySpec {
        &self.spec
    }

    pub fn label_specs(&self) -> &[LabelSpec] {
        &self.spec.label_specs
    }

    /// Named parameter handles in registry order: CNN blocks, MLP layers,
    /// then heads. Handles share storage with the assembly.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.cnn_blocks.iter().enumerate() {
            out.push((format!("cnn.block{i}.weight"), layer.weight.clone()));
            out.push((format!("cnn.block{i}.bias"), layer.bias.clone()));
        }
        for (i, layer) in self.mlp_layers.iter().enumerate() {
            out.push((format!("mlp.layer{i}.weight"), layer.weight.clone()));
            out.push((format!("mlp.layer{i}.bias"), layer.bias.clone()));
        }
        for (label, layer) in self.spec.label_specs.iter().zip(&self.heads) {
            out.push((format!("head.{}.weight", label.name), layer.weight.clone()));
            out.push((format!("head.{}.bias", label.name), layer.bias.clone()));
        }
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn mlp_forward<R: Rng>(
        &self,
        tabular: &Tensor,
        mode: Mode,
        rng: &mut R,
        tape: Option<&Tape>,
    ) -> Result<Tensor, ModelError> {
        let mlp = self.spec.mlp.as_ref().expect("mlp layers exist");
        if tabular.shape().len() != 2 || tabular.shape()[1] != mlp.input_width {
            return Err(ModelError::Input(format!(
                "tabular block {:?} does not match mlp input width {}",
                tabular.shape(),
                mlp.input_width
            )));
        }
        let mut x = tabular.clone();
        for layer in &self.mlp_layers {
            x = ops::linear(&x, &layer.weight, &layer.bias, tape)?;
            x = ops::relu(&x, tape)?;
            x = ops::dropout(&x, mlp.dropout, mode, rng, tape)?;
        }
        Ok(x)
    }

    fn cnn_forward(&self, images: &Tensor, tape: Option<&Tape>) -> Result<Tensor, ModelError> {
        let cnn = self.spec.cnn.as_ref().expect("cnn blocks exist");
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != cnn.in_channels {
            return Err(ModelError::Input(format!(
                "image block {:?} does not match cnn input channels {}",
                shape, cnn.in_channels
            )));
        }
        let min_side = 1usize << cnn.depth;
        if shape[2] < min_side || shape[3] < min_side {
            return Err(ModelError::Input(format!(
                "{}x{} images are too small for {} pooling stages (need at least {min_side})",
                shape[2], shape[3], cnn.depth
            )));
        }
        let mut x = images.clone();
        for layer in &self.cnn_blocks {
            x = ops::conv2d(&x, &layer.weight, &layer.bias, 1, 1, tape)?;
            x = ops::relu(&x, tape)?;
            x = ops::max_pool2d(&x, tape)?;
        }
        Ok(ops::global_avg_pool(&x, tape)?)
    }

    /// Runs extractors, mixes features (image first), and applies every
    /// head. Returns per-label output blocks in label order. The generator
    /// drives dropout and is only consumed in train mode.
    pub fn forward<R: Rng>(
        &self,
        images: Option<&Tensor>,
        tabular: Option<&Tensor>,
        mode: Mode,
        rng: &mut R,
        tape: Option<&Tape>,
    ) -> Result<Vec<Tensor>, ModelError> {
        let image_features = match (&self.spec.cnn, images) {
            (Some(_), Some(images)) => Some(self.cnn_forward(images, tape)?),
            (Some(_), None) => return Err(ModelError::Input("model expects an image block".into())),
            (None, _) => None,
        };
        let tabular_features = match (&self.spec.mlp, tabular) {
            (Some(_), Some(tabular)) => Some(self.mlp_forward(tabular, mode, rng, tape)?),
            (Some(_), None) => return Err(ModelError::Input("model expects a tabular block".into())),
            (None, _) => None,
        };
        // The mixer: concatenation when both extractors ran, bypass otherwise.
        let mixed = match (image_features, tabular_features) {
            (Some(img), Some(tab)) => ops::concat_features(&img, &tab, tape)?,
            (Some(img), None) => img,
            (None, Some(tab)) => tab,
            (None, None) => unreachable!("validated: at least one extractor"),
        };
        let mut outputs = Vec::with_capacity(self.heads.len());
        for layer in &self.heads {
            outputs.push(ops::linear(&mixed, &layer.weight, &layer.bias, tape)?);
        }
        Ok(outputs)
    }

    pub(crate) fn set_param(&self, name: &str, values: &[f32]) -> Result<(), ModelError> {
        for (n, t) in self.params() {
            if n == name {
                t.set_data(values)?;
                return Ok(());
            }
        }
        Err(ModelError::Format(format!("unknown parameter `{name}`")))
    }
}

/// Collapses a 3-input-channel convolution kernel to 1 channel by summing
/// the channel slices, so responses to grayscale images replicated into RGB
/// are preserved.
pub fn adapt_first_layer(weights: &Tensor) -> Result<Tensor, ModelError> {
    let shape = weights.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(ModelError::Spec(format!(
            "first-layer adaptation needs [C_out, 3, k, k] weights, got {shape:?}"
        )));
    }
    let (c_out, k) = (shape[0], shape[2]);
    let plane = k * shape[3];
    let data = weights.data();
    let mut out = vec![0f32; c_out * plane];
    for co in 0..c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        for c in 0..3 {
            let src = &data[co * 3 * plane + c * plane..co * 3 * plane + (c + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    drop(data);
    Ok(Tensor::new(&[c_out, 1, k, k], out, weights.grad_enabled())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, ops};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn binary(name: &str) -> LabelSpec {
        LabelSpec::classification(name, 2)
    }

    fn tabular_spec() -> AssemblySpec {
        AssemblySpec {
            task: Task::Classification,
            label_specs: vec![binary("y")],
            modality: Modality::Tabular,
            mlp: Some(MlpSpec { input_width: 4, hidden: vec![8, 8], dropout: 0.0 }),
            cnn: None,
        }
    }

    fn multimodal_spec() -> AssemblySpec {
        AssemblySpec {
            task: Task::Classification,
            label_specs: vec![binary("a"), binary("b")],
            modality: Modality::Both,
            mlp: Some(MlpSpec { input_width: 2, hidden: vec![4], dropout: 0.0 }),
            cnn: Some(CnnSpec { in_channels: 1, depth: 2, base_channels: 4 }),
        }
    }

    #[test]
    fn feature_widths_compose() {
        assert_eq!(CnnSpec { in_channels: 1, depth: 3, base_channels: 16 }.feature_width(), 64);
        assert_eq!(multimodal_spec().feature_width(), 8 + 4);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = multimodal_spec();
        let model = build_model(&spec, &mut rng()).unwrap();
        // cnn: [4,1,3,3]+4, [8,4,3,3]+8; mlp: [2,4]+4; heads: 2 x ([12,2]+2)
        let expected = (4 * 9 + 4) + (8 * 4 * 9 + 8) + (2 * 4 + 4) + 2 * (12 * 2 + 2);
        assert_eq!(model.param_count(), expected);
        assert_eq!(model.params().len(), 2 * 2 + 1 * 2 + 2 * 2);
    }

    #[test]
    fn registry_order_is_cnn_mlp_heads() {
        let model = build_model(&multimodal_spec(), &mut rng()).unwrap();
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec![
                "cnn.block0.weight",
                "cnn.block0.bias",
                "cnn.block1.weight",
                "cnn.block1.bias",
                "mlp.layer0.weight",
                "mlp.layer0.bias",
                "head.a.weight",
                "head.a.bias",
                "head.b.weight",
                "head.b.bias",
            ]
        );
    }

    #[test]
    fn zero_mlp_weights_give_zero_features() {
        let spec = tabular_spec();
        let model = build_model(&spec, &mut rng()).unwrap();
        for (name, p) in model.params() {
            if name.starts_with("mlp") {
                p.set_data(&vec![0.0; p.numel()]).unwrap();
            }
        }
        let x = Tensor::new(&[3, 4], vec![0.5; 12], false).unwrap();
        let feat = model.mlp_forward(&x, Mode::Eval, &mut rng(), None).unwrap();
        assert!(feat.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_despite_dropout_config() {
        let mut spec = tabular_spec();
        spec.mlp.as_mut().unwrap().dropout = 0.5;
        let model = build_model(&spec, &mut rng()).unwrap();
        let x = Tensor::new(&[2, 4], vec![0.3; 8], false).unwrap();
        let a = model.forward(None, Some(&x), Mode::Eval, &mut rng(), None).unwrap();
        let b = model
            .forward(None, Some(&x), Mode::Eval, &mut ChaCha8Rng::seed_from_u64(999), None)
            .unwrap();
        assert_eq!(a[0].to_vec(), b[0].to_vec());
    }

    #[test]
    fn cnn_shape_walk() {
        let spec = AssemblySpec {
            task: Task::Classification,
            label_specs: vec![binary("y")],
            modality: Modality::Image,
            mlp: None,
            cnn: Some(CnnSpec { in_channels: 1, depth: 3, base_channels: 16 }),
        };
        let model = build_model(&spec, &mut rng()).unwrap();
        let images = Tensor::new(&[2, 1, 16, 16], vec![0.1; 2 * 256], false).unwrap();
        let feat = model.cnn_forward(&images, None).unwrap();
        // 16 -> 8 -> 4 -> 2 spatially, then pooled to the 64-wide feature
        assert_eq!(feat.shape(), &[2, 64]);
    }

    #[test]
    fn cnn_rejects_undersized_images() {
        let spec = AssemblySpec {
            task: Task::Classification,
            label_specs: vec![binary("y")],
            modality: Modality::Image,
            mlp: None,
            cnn: Some(CnnSpec { in_channels: 1, depth: 3, base_channels: 4 }),
        };
        let model = build_model(&spec, &mut rng()).unwrap();
        let images = Tensor::new(&[1, 1, 4, 4], vec![0.1; 16], false).unwrap();
        assert!(matches!(model.cnn_forward(&images, None), Err(ModelError::Input(_))));
    }

    #[test]
    fn multimodal_forward_shapes_and_head_count() {
        let model = build_model(&multimodal_spec(), &mut rng()).unwrap();
        let images = Tensor::new(&[5, 1, 8, 8], vec![0.2; 5 * 64], false).unwrap();
        let tabular = Tensor::new(&[5, 2], vec![0.1; 10], false).unwrap();
        let out = model
            .forward(Some(&images), Some(&tabular), Mode::Eval, &mut rng(), None)
            .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), &[5, 2]);
        assert_eq!(out[1].shape(), &[5, 2]);
    }

    #[test]
    fn missing_block_is_an_input_error() {
        let model = build_model(&multimodal_spec(), &mut rng()).unwrap();
        let tabular = Tensor::new(&[5, 2], vec![0.1; 10], false).unwrap();
        let err = model.forward(None, Some(&tabular), Mode::Eval, &mut rng(), None).unwrap_err();
        assert!(matches!(err, ModelError::Input(_)));
    }

    #[test]
    fn head_independence_is_bit_exact() {
        let model = build_model(&multimodal_spec(), &mut rng()).unwrap();
        let images = Tensor::new(&[3, 1, 8, 8], vec![0.4; 3 * 64], false).unwrap();
        let tabular = Tensor::new(&[3, 2], vec![0.6; 6], false).unwrap();
        let before = model
            .forward(Some(&images), Some(&tabular), Mode::Eval, &mut rng(), None)
            .unwrap();
        for (name, p) in model.params() {
            if name.starts_with("head.a") {
                p.set_data(&vec![0.0; p.numel()]).unwrap();
            }
        }
        let after = model
            .forward(Some(&images), Some(&tabular), Mode::Eval, &mut rng(), None)
            .unwrap();
        assert!(after[0].to_vec().iter().all(|&v| v == 0.0));
        for (x, y) in before[1].to_vec().iter().zip(after[1].to_vec().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn survival_head_emits_one_risk_per_sample() {
        let spec = AssemblySpec {
            task: Task::Deepsurv,
            label_specs: vec![LabelSpec::survival("event")],
            modality: Modality::Tabular,
            mlp: Some(MlpSpec { input_width: 3, hidden: vec![8], dropout: 0.0 }),
            cnn: None,
        };
        let model = build_model(&spec, &mut rng()).unwrap();
        let x = Tensor::new(&[4, 3], vec![0.25; 12], false).unwrap();
        let out = model.forward(None, Some(&x), Mode::Eval, &mut rng(), None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), &[4, 1]);
    }

    #[test]
    fn gradients_reach_both_branches_through_the_mixer() {
        let model = build_model(&multimodal_spec(), &mut rng()).unwrap();
        let images = Tensor::new(&[2, 1, 8, 8], vec![0.3; 2 * 64], false).unwrap();
        let tabular = Tensor::new(&[2, 2], vec![0.7, -0.2, 0.1, 0.4], false).unwrap();
        let tape = Tape::new();
        let out = model
            .forward(Some(&images), Some(&tabular), Mode::Train, &mut rng(), Some(&tape))
            .unwrap();
        let mut total = ops::sum(&out[0], Some(&tape)).unwrap();
        let s1 = ops::sum(&out[1], Some(&tape)).unwrap();
        total = ops::add(&total, &s1, Some(&tape)).unwrap();
        backward(&total, &tape).unwrap();
        for (name, p) in model.params() {
            assert!(p.grad().is_some(), "no gradient on {name}");
        }
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = tabular_spec();
        spec.label_specs.clear();
        assert!(matches!(build_model(&spec, &mut rng()), Err(ModelError::Labels(_))));

        let mut spec = tabular_spec();
        spec.mlp = None;
        assert!(matches!(build_model(&spec, &mut rng()), Err(ModelError::Spec(_))));

        let mut spec = tabular_spec();
        spec.mlp.as_mut().unwrap().dropout = 1.0;
        assert!(matches!(build_model(&spec, &mut rng()), Err(ModelError::Spec(_))));

        let mut spec = multimodal_spec();
        spec.cnn.as_mut().unwrap().in_channels = 2;
        assert!(matches!(build_model(&spec, &mut rng()), Err(ModelError::Spec(_))));

        let mut spec = tabular_spec();
        spec.task = Task::Deepsurv;
        assert!(matches!(build_model(&spec, &mut rng()), Err(ModelError::Labels(_))));
    }

    #[test]
    fn adapt_first_layer_sums_channel_slices() {
        let w = Tensor::new(&[1, 3, 1, 1], vec![0.2, 0.3, 0.5], true).unwrap();
        let adapted = adapt_first_layer(&w).unwrap();
        assert_eq!(adapted.shape(), &[1, 1, 1, 1]);
        assert!((adapted.item() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn adapt_first_layer_zero_stays_zero() {
        let w = Tensor::zeros(&[2, 3, 3, 3], true);
        let adapted = adapt_first_layer(&w).unwrap();
        assert!(adapted.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(adapted.shape(), &[2, 1, 3, 3]);
    }

    #[test]
    fn adapt_first_layer_rejects_non_rgb() {
        let w = Tensor::zeros(&[2, 1, 3, 3], true);
        assert!(matches!(adapt_first_layer(&w), Err(ModelError::Spec(_))));
    }

    #[test]
    fn adaptation_preserves_grayscale_responses() {
        let mut r = rng();
        for _ in 0..5 {
            let w_vals: Vec<f32> = (0..2 * 3 * 9).map(|_| normal(&mut r) * 0.5).collect();
            let w = Tensor::new(&[2, 3, 3, 3], w_vals, false).unwrap();
            let g_vals: Vec<f32> = (0..36).map(|_| (normal(&mut r) * 0.25).clamp(-1.0, 1.0)).collect();
            let g = Tensor::new(&[1, 1, 6, 6], g_vals.clone(), false).unwrap();
            let mut replicated = g_vals.clone();
            replicated.extend_from_slice(&g_vals);
            replicated.extend_from_slice(&g_vals);
            let g3 = Tensor::new(&[1, 3, 6, 6], replicated, false).unwrap();
            let b = Tensor::zeros(&[2], false);
            let via_rgb = ops::conv2d(&g3, &w, &b, 1, 1, None).unwrap();
            let adapted = adapt_first_layer(&w).unwrap();
            let via_gray = ops::conv2d(&g, &adapted, &b, 1, 1, None).unwrap();
            for (a, c) in via_rgb.to_vec().iter().zip(via_gray.to_vec().iter()) {
                assert!((a - c).abs() < 1e-5, "{a} vs {c}");
            }
        }
    }
}
