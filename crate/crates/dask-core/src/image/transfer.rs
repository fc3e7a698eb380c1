//! Applying distribution transfer kernels and the statistics-prediction
//! (per-channel affine) baseline transform.

use crate::error::Result;
use crate::image::{Image, TransferKernel, CHANNELS};
use crate::tensor::{Tape, Tensor};

/// Convolves the image with a transfer kernel, treating it as a 1xCxHxW
/// tensor. The result keeps raw (unclipped) values; reconstruction losses
/// need to see them.
pub fn apply_transfer_kernel(img: &Image, tk: &TransferKernel) -> Result<Image> {
    let mut tape = Tape::new();
    let x = tape.leaf(img.to_tensor());
    let w = tape.leaf(Tensor::new(
        vec![CHANNELS, CHANNELS, tk.k, tk.k],
        tk.weights.clone(),
    )?);
    let b = tape.leaf(Tensor::new(vec![CHANNELS], tk.bias.to_vec())?);
    let y = tape.conv2d(x, w, b, 1)?;
    Image::from_tensor_data(img.height(), img.width(), tape.value(y).data())
}

/// Per-channel affine restyling: `out_c = scale_c * x_c + shift_c`. The
/// realization of a statistics-predicting transfer; equal to
/// [`apply_transfer_kernel`] with the matching center-tap diagonal kernel.
pub fn cop_transfer(img: &Image, scale: [f64; 3], shift: [f64; 3]) -> Image {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for v in out.channel_mut(c) {
            *v = scale[c] * *v + shift[c];
        }
    }
    out
}
