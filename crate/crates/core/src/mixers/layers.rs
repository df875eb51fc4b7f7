use serde::{Deserialize, Serialize};

use crate::error::{bail_shape, Result};
use crate::tensor_core::{matmul_bt_into, relu, silu, softplus, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    #[default]
    Identity,
    Relu,
    Silu,
    Softplus,
}

impl Act {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Act::Identity => x,
            Act::Relu => relu(x),
            Act::Silu => silu(x),
            Act::Softplus => softplus(x),
        }
    }
}

/// Affine map `y = x Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            bail_shape!("linear weight must be [out, in]");
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                bail_shape!(
                    "bias {:?} does not match {} outputs",
                    b.shape(),
                    weight.shape()[0]
                );
            }
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize, with_bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[out, inp]),
            bias: with_bias.then(|| Tensor::zeros(&[out])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    /// Applies the map to each row of `x` (`rows × in`).
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        debug_assert_eq!(x.len(), rows * i);
        let mut out = vec![0.0; rows * o];
        if let Some(b) = &self.bias {
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(b.data());
            }
        }
        if self.weight.data().iter().any(|&w| w != 0.0) {
            matmul_bt_into(x, self.weight.data(), &mut out, rows, i, o);
        }
        out
    }
}

/// Causal depthwise convolution with left zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub width: usize,
    /// `[width, channels]`; row `w` multiplies `x_{t-width+1+w}`.
    pub c: Tensor,
    /// Subtracted before the nonlinearity.
    pub bias: Tensor,
    pub act: Act,
}

impl ConvKernel {
    pub fn new(c: Tensor, bias: Tensor, act: Act) -> Result<Self> {
        if c.shape().len() != 2 || c.shape()[0] == 0 {
            bail_shape!("kernel must be [width>=1, channels]");
        }
        if bias.shape() != [c.shape()[1]] {
            bail_shape!("bias must have one entry per channel");
        }
        Ok(ConvKernel {
            width: c.shape()[0],
            c,
            bias,
            act,
        })
    }

    pub fn identity(ch: usize) -> Self {
        let mut c = Tensor::zeros(&[2, ch]);
        c.data_mut()[ch..].fill(1.0);
        ConvKernel {
            width: 2,
            c,
            bias: Tensor::zeros(&[ch]),
            act: Act::Identity,
        }
    }

    /// x̂_t = x_{t-1}
    pub fn shift_right(ch: usize) -> Self {
        let mut c = Tensor::zeros(&[2, ch]);
        c.data_mut()[..ch].fill(1.0);
        ConvKernel {
            width: 2,
            c,
            bias: Tensor::zeros(&[ch]),
            act: Act::Identity,
        }
    }

    /// Size-2 kernel with the same scalars on every channel.
    pub fn size2(ch: usize, c0: f64, c1: f64, b: f64, act: Act) -> Self {
        let mut c = Tensor::zeros(&[2, ch]);
        c.data_mut()[..ch].fill(c0);
        c.data_mut()[ch..].fill(c1);
        ConvKernel {
            width: 2,
            c,
            bias: Tensor::full(&[ch], b),
            act,
        }
    }

    pub fn channels(&self) -> usize {
        self.c.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.c.len() + self.bias.len()
    }

    /// Pre-activation output `Σ_w c_w ⊙ x_{t-width+1+w} - bias` for a `t × ch` input.
    pub fn preact(&self, x: &[f64], t_len: usize) -> Vec<f64> {
        let ch = self.channels();
        let mut out = Vec::with_capacity(t_len * ch);
        for t in 0..t_len {
            out.extend(self.bias.data().iter().map(|b| -b));
            let row = &mut out[t * ch..];
            for w in 0..self.width {
                let src = t as isize - (self.width - 1 - w) as isize;
                if src < 0 {
                    continue;
                }
                let xs = &x[src as usize * ch..(src as usize + 1) * ch];
                let cw = &self.c.data()[w * ch..(w + 1) * ch];
                for ((o, &xv), &cv) in row.iter_mut().zip(xs).zip(cw) {
                    *o += cv * xv;
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64], t_len: usize) -> Vec<f64> {
        let mut out = self.preact(x, t_len);
        if self.act != Act::Identity {
            out.iter_mut().for_each(|v| *v = self.act.apply(*v));
        }
        out
    }
}

/// Tensor-level short convolution over a `[T, ch]` sequence.
pub fn short_conv(kernel: &ConvKernel, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[1] != kernel.channels() {
        bail_shape!(
            "input {:?} does not match {} channels",
            x.shape(),
            kernel.channels()
        );
    }
    let t = x.shape()[0];
    Tensor::new(vec![t, kernel.channels()], kernel.forward(x.data(), t))
}

/// Output gate `ỹ = σ(W_g x + b_g) ⊙ y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub linear: Linear,
    pub act: Act,
}

impl Gate {
    pub fn num_params(&self) -> usize {
        self.linear.num_params()
    }

    pub fn apply_rows(&self, x: &[f64], y: &mut [f64], rows: usize) {
        let g = self.linear.forward(x, rows);
        for (yv, gv) in y.iter_mut().zip(g) {
            *yv *= self.act.apply(gv);
        }
    }
}

/// Tensor-level gate over `[T, d]` sequences.
pub fn gate(g: &Gate, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2
        || x.shape()[1] != g.linear.in_dim()
        || y.shape() != [x.shape()[0], g.linear.out_dim()]
    {
        bail_shape!(
            "gate operands {:?} / {:?} do not fit the gate weights",
            x.shape(),
            y.shape()
        );
    }
    let mut out = y.clone();
    g.apply_rows(x.data(), out.data_mut(), x.shape()[0]);
    Ok(out)
}
