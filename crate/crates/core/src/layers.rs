//! Parameterized layers bound to a [`ParamStore`] and the forward context they run in.

use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Whether train-mode normalization updates running statistics.
    pub update_stats: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            update_stats: mode == Mode::Train,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "{name}: conv needs positive channels/kernel/stride"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_param(
            &format!("{name}.weight"),
            [out_channels, in_channels, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = if with_bias {
            Some(store.add_param(
                &format!("{name}.bias"),
                [1, out_channels, 1, 1],
                Init::Constant(0.0),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        conv_param_count(self.in_channels, self.out_channels, self.kernel, self.bias.is_some())
    }
}

pub fn conv_param_count(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_out * c_in * k * k + if bias { c_out } else { 0 }
}

/// Transposed convolution restricted to configurations that exactly double
/// the spatial extent: `(h − 1)·s − 2p + k = 2h` for every `h`.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
    ) -> Result<Self> {
        if stride != 2 || kernel != stride + 2 * pad {
            return Err(Error::Config(format!(
                "{name}: deconv kernel {kernel} stride {stride} pad {pad} does not exactly double"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: deconv needs positive channels")));
        }
        // fan-in of the equivalent forward pass: each output sees c_in·(k/s)² taps
        let fan_in = in_channels * (kernel / stride) * (kernel / stride);
        let weight = store.add_param(
            &format!("{name}.weight"),
            [in_channels, out_channels, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = if with_bias {
            Some(store.add_param(
                &format!("{name}.bias"),
                [1, out_channels, 1, 1],
                Init::Constant(0.0),
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.deconv2d(x, w, b, self.stride, self.pad)
    }

    pub fn num_params(&self) -> usize {
        conv_param_count(self.in_channels, self.out_channels, self.kernel, self.bias.is_some())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = store.add_param(
            &format!("{name}.weight"),
            [out_features, in_features, 1, 1],
            Init::Kaiming {
                fan_in: in_features,
            },
        )?;
        let bias = store.add_param(
            &format!("{name}.bias"),
            [1, out_features, 1, 1],
            Init::Constant(0.0),
        )?;
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if ctx.tape.value(x).channels() != self.in_features {
            return Err(shape_err(
                "linear",
                format!(
                    "head expects {} features, got {}",
                    self.in_features,
                    ctx.tape.value(x).channels()
                ),
            ));
        }
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.out_features * self.in_features + self.out_features
    }
}
