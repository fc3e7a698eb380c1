//! Reduced style-transfer families for the input-data ablation: one shared
//! convolution kernel per domain, and a statistics head that predicts only a
//! per-channel scale and shift.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{apply_transfer_kernel, cop_transfer, Image, TransferKernel, CHANNELS};
use crate::rehearser::{backbone, MIN_INPUT_SIDE};
use crate::tensor::conv_stack_gap;
use crate::tensor::{Conv2d, Linear, Tape, Tensor, Var};

/// A single trainable transfer kernel shared by every image of the domain.
pub struct SharedKernel {
    pub weights: Tensor,
    pub bias: Tensor,
    pub kernel_size: usize,
}

impl SharedKernel {
    pub fn new(kernel_size: usize) -> Result<Self> {
        let id = TransferKernel::identity(kernel_size);
        Ok(SharedKernel {
            weights: Tensor::new(
                vec![CHANNELS, CHANNELS, kernel_size, kernel_size],
                id.weights,
            )?,
            bias: Tensor::new(vec![CHANNELS], id.bias.to_vec())?,
            kernel_size,
        })
    }

    pub fn kernel(&self) -> TransferKernel {
        TransferKernel::new(
            self.weights.data().to_vec(),
            [self.bias.data()[0], self.bias.data()[1], self.bias.data()[2]],
            self.kernel_size,
        )
        .expect("stored kernel is always consistent")
    }

    pub fn transfer(&self, img: &Image) -> Result<Image> {
        apply_transfer_kernel(img, &self.kernel())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.weights.is_finite() && self.bias.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("shared kernel parameters".into()))
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape, bind: &mut Vec<Var>) -> (Var, Var) {
        let w = tape.param(self.weights.clone());
        let b = tape.param(self.bias.clone());
        bind.push(w);
        bind.push(b);
        (w, b)
    }
}

/// Predicts a per-channel scale and shift for each image; the same backbone as
/// the kernel predictor with a six-way head starting at the identity affine.
pub struct StatsPredictor {
    pub blocks: Vec<Conv2d>,
    pub head: Linear,
}

impl StatsPredictor {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let blocks = backbone(rng);
        let head = Linear::new_offset_head(
            32,
            2 * CHANNELS,
            3e-4,
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            rng,
        );
        StatsPredictor { blocks, head }
    }

    pub(crate) fn forward_rows(
        &self,
        tape: &mut Tape,
        x: Var,
        mut bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let pooled = conv_stack_gap(&self.blocks, tape, x, bind.as_deref_mut())?;
        self.head.forward(tape, pooled, bind)
    }

    pub fn predict(&self, img: &Image) -> Result<([f64; 3], [f64; 3])> {
        if img.height() < MIN_INPUT_SIDE || img.width() < MIN_INPUT_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} below the {}x{} minimum",
                img.height(),
                img.width(),
                MIN_INPUT_SIDE,
                MIN_INPUT_SIDE
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(img.to_tensor());
        let rows = self.forward_rows(&mut tape, x, None)?;
        let row = tape.value(rows).data();
        Ok(([row[0], row[1], row[2]], [row[3], row[4], row[5]]))
    }

    pub fn transfer(&self, img: &Image) -> Result<Image> {
        let (scale, shift) = self.predict(img)?;
        Ok(cop_transfer(img, scale, shift))
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
            Err(Error::NonFinite("stats predictor parameters".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fresh_shared_kernel_is_identity() {
        let sk = SharedKernel::new(3).unwrap();
        let mut rng = crate::rng::stream(101, "shared", 0);
        let img = Image::new(
            6,
            6,
            (0..6 * 6 * CHANNELS).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let out = sk.transfer(&img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn fresh_stats_predictor_is_near_identity() {
        let mut rng = crate::rng::stream(102, "stats", 0);
        let sp = StatsPredictor::new(&mut rng);
        let img = Image::new(
            16,
            8,
            (0..16 * 8 * CHANNELS).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let (scale, shift) = sp.predict(&img).unwrap();
        for c in 0..3 {
            assert!((scale[c] - 1.0).abs() < 1e-2);
            assert!(shift[c].abs() < 1e-2);
        }
    }
}
