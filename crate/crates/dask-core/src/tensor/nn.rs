//! Parameterized layers: plain tensors plus forward helpers that record onto
//! a [`Tape`]. When a bind list is supplied the parameters are tracked and
//! their handles are appended in declaration order, matching `params_mut`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    /// He-style initialization scaled by fan-in.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = Tensor::new(
            vec![cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect(),
        )
        .unwrap();
        let bias = Tensor::zeros(vec![cout]);
        Conv2d {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mut bind: Option<&mut Vec<Var>>) -> Result<Var> {
        let tracked = bind.is_some();
        let w = if tracked {
            tape.param(self.weight.clone())
        } else {
            tape.leaf(self.weight.clone())
        };
        let b = if tracked {
            tape.param(self.bias.clone())
        } else {
            tape.leaf(self.bias.clone())
        };
        if let Some(vars) = bind.as_deref_mut() {
            vars.push(w);
            vars.push(b);
        }
        tape.conv2d(x, w, b, self.stride)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub struct Linear {
    /// [in, out]
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Linear {
            weight: Tensor::new(
                vec![input, output],
                (0..input * output).map(|_| normal.sample(rng)).collect(),
            )
            .unwrap(),
            bias: Tensor::zeros(vec![output]),
        }
    }

    /// Tiny random weights plus a fixed bias vector; used by kernel-predicting
    /// heads that must start at an identity transform.
    pub fn new_offset_head(
        input: usize,
        output: usize,
        weight_std: f64,
        bias: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(bias.len(), output);
        let normal = Normal::new(0.0, weight_std).unwrap();
        Linear {
            weight: Tensor::new(
                vec![input, output],
                (0..input * output).map(|_| normal.sample(rng)).collect(),
            )
            .unwrap(),
            bias: Tensor::new(vec![output], bias).unwrap(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mut bind: Option<&mut Vec<Var>>) -> Result<Var> {
        let tracked = bind.is_some();
        let w = if tracked {
            tape.param(self.weight.clone())
        } else {
            tape.leaf(self.weight.clone())
        };
        let b = if tracked {
            tape.param(self.bias.clone())
        } else {
            tape.leaf(self.bias.clone())
        };
        if let Some(vars) = bind.as_deref_mut() {
            vars.push(w);
            vars.push(b);
        }
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Conv blocks with relu after each, then global average pooling: the shared
/// backbone shape of every network here.
pub fn conv_stack_gap(
    blocks: &[Conv2d],
    tape: &mut Tape,
    x: Var,
    mut bind: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut h = x;
    for blk in blocks {
        h = blk.forward(tape, h, bind.as_deref_mut())?;
        h = tape.relu(h)?;
    }
    tape.global_avg_pool(h)
}

/// Copies tape gradients back into parameter tensors, in bind order.
pub fn pull_grads(tape: &Tape, vars: &[Var], params: &mut [&mut Tensor]) -> Result<()> {
    assert_eq!(vars.len(), params.len(), "bind order out of sync");
    for (var, param) in vars.iter().zip(params.iter_mut()) {
        if let Some(g) = tape.grad(*var) {
            param.accumulate_grad(g)?;
        }
    }
    Ok(())
}

