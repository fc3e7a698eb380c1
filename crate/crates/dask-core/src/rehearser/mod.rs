//! The style rehearser: a small CNN that predicts a per-image distribution
//! transfer kernel, trained by self-supervised reconstruction (augment an
//! image's color/texture statistics, then learn to undo it). Also hosts the
//! two reduced transform families used as ablation baselines.

mod train;
mod variants;

pub use train::{
    perturb_for_reconstruction, train_rehearser, train_shared_kernel, train_stats_predictor,
};
pub use variants::{SharedKernel, StatsPredictor};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{apply_transfer_kernel, AugmentForm, Image, TransferKernel, CHANNELS};
use crate::tensor::{conv_stack_gap, Conv2d, Linear, Tape, Tensor, Var};

/// Reconstruction distance; mean absolute error by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionNorm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RehearserConfig {
    pub kernel_size: usize,
    pub kernels_per_image: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_form: AugmentForm,
    /// Per-image probability of adding blur to the augmented input.
    pub blur_probability: f64,
    pub blur_sigma_max: f64,
    pub reconstruction_norm: ReconstructionNorm,
    /// Color/blur augmentation of the reconstruction input; disabling it makes
    /// the identity transform the exact optimum.
    pub augment: bool,
}

impl Default for RehearserConfig {
    fn default() -> Self {
        RehearserConfig {
            kernel_size: 3,
            kernels_per_image: 1,
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            augment_form: AugmentForm::default(),
            blur_probability: 0.5,
            blur_sigma_max: 1.5,
            reconstruction_norm: ReconstructionNorm::default(),
            augment: true,
        }
    }
}

impl RehearserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.kernels_per_image == 0 {
            return Err(Error::Config("kernels_per_image must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(Error::Config("blur_probability must be in [0,1]".into()));
        }
        if self.blur_sigma_max < 0.0 {
            return Err(Error::Config("blur_sigma_max must be >= 0".into()));
        }
        Ok(())
    }
}

/// Minimum spatial extent accepted by the three stride-2 backbone blocks.
pub const MIN_INPUT_SIDE: usize = 8;

/// Predicts one or more transfer kernels per image: three stride-2 conv
/// blocks, global average pooling, and a linear head whose bias is set to the
/// identity-kernel encoding so a fresh net starts at (almost) the identity
/// transform.
pub struct KernelPredictor {
    pub blocks: Vec<Conv2d>,
    pub head: Linear,
    pub kernel_size: usize,
    pub kernels_per_image: usize,
}

pub(crate) const BACKBONE_WIDTHS: [usize; 4] = [CHANNELS, 8, 16, 32];

// Pooled backbone activations reach ~2, so a 3e-4 weight scale keeps fresh
// predictions within 1e-2 of the identity kernel.
const HEAD_WEIGHT_STD: f64 = 3e-4;

pub(crate) fn backbone(rng: &mut ChaCha8Rng) -> Vec<Conv2d> {
    (0..3)
        .map(|i| Conv2d::new(BACKBONE_WIDTHS[i], BACKBONE_WIDTHS[i + 1], 3, 2, rng))
        .collect()
}

impl KernelPredictor {
    pub fn new(kernel_size: usize, kernels_per_image: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size {kernel_size} must be odd"
            )));
        }
        if kernels_per_image == 0 {
            return Err(Error::InvalidArgument(
                "kernels_per_image must be >= 1".into(),
            ));
        }
        let blocks = backbone(rng);
        let slot = TransferKernel::param_count(kernel_size);
        let out = kernels_per_image * slot;
        let identity = TransferKernel::identity(kernel_size);
        let mut bias = Vec::with_capacity(out);
        for _ in 0..kernels_per_image {
            bias.extend_from_slice(&identity.weights);
            bias.extend_from_slice(&identity.bias);
        }
        let head = Linear::new_offset_head(
            *BACKBONE_WIDTHS.last().unwrap(),
            out,
            HEAD_WEIGHT_STD,
            bias,
            rng,
        );
        Ok(KernelPredictor {
            blocks,
            head,
            kernel_size,
            kernels_per_image,
        })
    }

    pub fn head_output_len(&self) -> usize {
        self.kernels_per_image * TransferKernel::param_count(self.kernel_size)
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        if img.height() < MIN_INPUT_SIDE || img.width() < MIN_INPUT_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} below the {}x{} minimum",
                img.height(),
                img.width(),
                MIN_INPUT_SIDE,
                MIN_INPUT_SIDE
            )));
        }
        Ok(())
    }

    /// Head rows [B, head_output_len] for a batch already on the tape.
    pub(crate) fn forward_rows(
        &self,
        tape: &mut Tape,
        x: Var,
        mut bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let pooled = conv_stack_gap(&self.blocks, tape, x, bind.as_deref_mut())?;
        self.head.forward(tape, pooled, bind)
    }

    /// Predicts the per-image transfer kernels.
    pub fn predict_kernels(&self, img: &Image) -> Result<Vec<TransferKernel>> {
        self.check_input(img)?;
        let mut tape = Tape::new();
        let x = tape.leaf(img.to_tensor());
        let rows = self.forward_rows(&mut tape, x, None)?;
        let row = tape.value(rows).data();
        let slot = TransferKernel::param_count(self.kernel_size);
        let kk = CHANNELS * CHANNELS * self.kernel_size * self.kernel_size;
        let mut kernels = Vec::with_capacity(self.kernels_per_image);
        for j in 0..self.kernels_per_image {
            let base = j * slot;
            let weights = row[base..base + kk].to_vec();
            let bias = [row[base + kk], row[base + kk + 1], row[base + kk + 2]];
            kernels.push(TransferKernel::new(weights, bias, self.kernel_size)?);
        }
        Ok(kernels)
    }

    /// Applies the predicted kernels in sequence. The output keeps raw values;
    /// callers clip when persisting or feeding an extractor.
    pub fn transfer(&self, img: &Image) -> Result<Image> {
        let kernels = self.predict_kernels(img)?;
        let mut out = img.clone();
        for k in &kernels {
            out = apply_transfer_kernel(&out, k)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        p.extend(self.head.params_mut());
        p
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.params().iter().all(|t| t.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("kernel predictor parameters".into()))
        }
    }
}

/// One retained style model; which family depends on the training variant.
pub enum Rehearser {
    Kernel(KernelPredictor),
    Shared(SharedKernel),
    Stats(StatsPredictor),
}

impl Rehearser {
    pub fn transfer(&self, img: &Image) -> Result<Image> {
        match self {
            Rehearser::Kernel(net) => net.transfer(img),
            Rehearser::Shared(sk) => sk.transfer(img),
            Rehearser::Stats(sp) => sp.transfer(img),
        }
    }
}

/// Mean elementwise distance between two same-shape images.
pub fn reconstruction_loss(
    original: &Image,
    reconstructed: &Image,
    norm: ReconstructionNorm,
) -> Result<f64> {
    if original.height() != reconstructed.height() || original.width() != reconstructed.width() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction loss between {}x{} and {}x{}",
            original.height(),
            original.width(),
            reconstructed.height(),
            reconstructed.width()
        )));
    }
    let n = original.pixels().len() as f64;
    let total: f64 = original
        .pixels()
        .iter()
        .zip(reconstructed.pixels())
        .map(|(a, b)| match norm {
            ReconstructionNorm::L1 => (a - b).abs(),
            ReconstructionNorm::L2 => (a - b) * (a - b),
        })
        .sum();
    Ok(total / n)
}
