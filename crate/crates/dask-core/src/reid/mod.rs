//! The toy re-identification model (conv feature extractor plus a per-step
//! classifier head), feature extraction, and model fusion.

mod losses;

pub use losses::{
    cross_entropy_loss, reid_loss, similarity_matrix, similarity_matrix_var, skd_loss,
    skd_loss_var, total_loss, triplet_loss, SimilarityMatrix,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, Image, CHANNELS};
use crate::tensor::conv_stack_gap;
use crate::tensor::{Conv2d, Linear, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the similarity distillation terms.
    pub alpha: f64,
    /// Weight of the rehearsed-stream loss group.
    pub beta: f64,
    /// Old-model weight in the per-epoch parameter fusion.
    pub lambda_ema: f64,
    pub margin: f64,
    /// Softmax temperature applied to similarity rows before the KL.
    pub tau: f64,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub identities_per_batch: usize,
    pub instances_per_identity: usize,
    /// Identity-balanced sampler rounds per epoch.
    pub passes_per_epoch: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 4.5,
            lambda_ema: 0.5,
            margin: 0.3,
            tau: 1.0,
            epochs_first: 80,
            epochs_later: 60,
            identities_per_batch: 4,
            instances_per_identity: 4,
            passes_per_epoch: 2,
            learning_rate: 3e-4,
            embed_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ema) {
            return Err(Error::Config(format!(
                "lambda_ema {} outside [0,1]",
                self.lambda_ema
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.identities_per_batch == 0 || self.instances_per_identity == 0 {
            return Err(Error::Config("batch composition must be positive".into()));
        }
        if self.passes_per_epoch == 0 {
            return Err(Error::Config("passes_per_epoch must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

const EXTRACTOR_WIDTHS: [usize; 5] = [CHANNELS, 16, 32, 64, 64];

/// Four stride-2 conv blocks, global average pooling, and a linear embedding.
pub struct ReidExtractor {
    pub blocks: Vec<Conv2d>,
    pub embed: Linear,
}

impl ReidExtractor {
    pub fn new(embed_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..4)
            .map(|i| Conv2d::new(EXTRACTOR_WIDTHS[i], EXTRACTOR_WIDTHS[i + 1], 3, 2, rng))
            .collect();
        let embed = Linear::new(*EXTRACTOR_WIDTHS.last().unwrap(), embed_dim, rng);
        ReidExtractor { blocks, embed }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.weight.shape()[1]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mut bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let pooled = conv_stack_gap(&self.blocks, tape, x, bind.as_deref_mut())?;
        self.embed.forward(tape, pooled, bind)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.embed.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        p.extend(self.embed.params_mut());
        p
    }

    pub fn clone_params(&self) -> ReidExtractor {
        ReidExtractor {
            blocks: self
                .blocks
                .iter()
                .map(|b| Conv2d {
                    weight: b.weight.clone(),
                    bias: b.bias.clone(),
                    stride: b.stride,
                })
                .collect(),
            embed: Linear {
                weight: self.embed.weight.clone(),
                bias: self.embed.bias.clone(),
            },
        }
    }
}

/// Tape handles for one bound extractor; binding once lets several forward
/// passes (real and rehearsed streams) share tracked parameters so their
/// gradients accumulate.
pub struct BoundExtractor {
    convs: Vec<(Var, Var, usize)>,
    embed: (Var, Var),
}

impl BoundExtractor {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b, stride) in &self.convs {
            h = tape.conv2d(h, w, b, stride)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        tape.linear(pooled, self.embed.0, self.embed.1)
    }
}

/// Bound extractor plus classifier handles.
pub struct BoundReid {
    pub extractor: BoundExtractor,
    classifier: (Var, Var),
}

impl BoundReid {
    pub fn logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.linear(features, self.classifier.0, self.classifier.1)
    }
}

/// Extractor plus the current training step's classifier head. Inference is
/// feature matching only; the head exists for the classification loss.
pub struct ReidModel {
    pub extractor: ReidExtractor,
    pub classifier: Linear,
}

impl ReidModel {
    pub fn new(embed_dim: usize, n_ids: usize, rng: &mut ChaCha8Rng) -> Self {
        let extractor = ReidExtractor::new(embed_dim, rng);
        let classifier = Linear::new(embed_dim, n_ids, rng);
        ReidModel {
            extractor,
            classifier,
        }
    }

    /// Carries the extractor into a new step with a freshly sized head.
    pub fn with_fresh_classifier(&self, n_ids: usize, rng: &mut ChaCha8Rng) -> ReidModel {
        ReidModel {
            extractor: self.extractor.clone_params(),
            classifier: Linear::new(self.extractor.embed_dim(), n_ids, rng),
        }
    }

    pub fn clone_params(&self) -> ReidModel {
        ReidModel {
            extractor: self.extractor.clone_params(),
            classifier: Linear {
                weight: self.classifier.weight.clone(),
                bias: self.classifier.bias.clone(),
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.extractor.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.params().iter().all(|t| t.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("reid model parameters".into()))
        }
    }

    /// Records every parameter as a tracked leaf, appending handles to `bind`
    /// in `params_mut` order.
    pub fn bind(&self, tape: &mut Tape, bind: &mut Vec<Var>) -> BoundReid {
        let pair = |w: &Tensor, b: &Tensor, tape: &mut Tape, bind: &mut Vec<Var>| {
            let wv = tape.param(w.clone());
            let bv = tape.param(b.clone());
            bind.push(wv);
            bind.push(bv);
            (wv, bv)
        };
        let convs = self
            .extractor
            .blocks
            .iter()
            .map(|blk| {
                let (w, b) = pair(&blk.weight, &blk.bias, tape, bind);
                (w, b, blk.stride)
            })
            .collect();
        let embed = pair(&self.extractor.embed.weight, &self.extractor.embed.bias, tape, bind);
        let classifier = pair(&self.classifier.weight, &self.classifier.bias, tape, bind);
        BoundReid {
            extractor: BoundExtractor { convs, embed },
            classifier,
        }
    }
}

/// A batch of d-dimensional features with identity labels.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    features: Vec<f64>,
    batch: usize,
    dim: usize,
    labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.is_empty() {
            return Err(Error::EmptyInput("empty feature batch".into()));
        }
        if features.len() % dim != 0 || features.len() / dim != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} features of dim {dim} with {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature batch".into()));
        }
        Ok(FeatureBatch {
            batch: features.len() / dim,
            features,
            dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Runs the extractor over a batch of images (clipped to [0,1]) and pairs the
/// rows with the given labels.
pub fn extract_features(
    model: &ReidModel,
    images: &[&Image],
    labels: &[usize],
) -> Result<FeatureBatch> {
    if images.is_empty() {
        return Err(Error::EmptyInput("empty image batch".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(batch_to_tensor(images, true)?);
    let feats = model.extractor.forward(&mut tape, x, None)?;
    FeatureBatch::new(
        tape.value(feats).data().to_vec(),
        model.extractor.embed_dim(),
        labels.to_vec(),
    )
}

/// Parameter-wise convex blend of two extractors: `lambda * old + (1-lambda) * new`.
/// Classifier heads are excluded (their shapes differ across steps); the
/// returned model keeps the new model's head.
pub fn ema_fuse(old: &ReidModel, new: &ReidModel, lambda_ema: f64) -> Result<ReidModel> {
    if !(0.0..=1.0).contains(&lambda_ema) {
        return Err(Error::InvalidArgument(format!(
            "lambda_ema {lambda_ema} outside [0,1]"
        )));
    }
    let mut fused = new.clone_params();
    let old_params = old.extractor.params();
    let mut fused_params = fused.extractor.params_mut();
    if old_params.len() != fused_params.len() {
        return Err(Error::ShapeMismatch(
            "extractor parameter lists differ".into(),
        ));
    }
    for (o, f) in old_params.iter().zip(fused_params.iter_mut()) {
        if o.shape() != f.shape() {
            return Err(Error::ShapeMismatch(format!(
                "extractor parameter {:?} vs {:?}",
                o.shape(),
                f.shape()
            )));
        }
        for (fv, &ov) in f.data_mut().iter_mut().zip(o.data()) {
            *fv = lambda_ema * ov + (1.0 - lambda_ema) * *fv;
        }
    }
    Ok(fused)
}
