//! Hourglass attention module producing a single-channel sigmoid map at twice
//! the input resolution.
//!
//! Layer plans, with `c` the input channel count:
//!
//! | variant | trans  | down (3×3, /2) | up (4×4 deconv, ×2)  | out    |
//! |---------|--------|----------------|----------------------|--------|
//! | 3       | 1×1 c/8 | –             | c/32                 | 1×1, 1 |
//! | 5       | 1×1 c/4 | c/8           | c/16, c/32           | 1×1, 1 |
//! | 7       | 1×1 c/4 | c/8, c/8      | c/16, c/16, c/32     | 1×1, 1 |
//!
//! Every conv/deconv except the last is followed by MFBN and ReLU; the last
//! 1×1 is followed by a sigmoid only. Skip convs (1×1 with bias) add a
//! down-path activation onto the up-path block of equal resolution, after its
//! normalization and before its ReLU. With `interpolation_upsample` the single
//! deconv of variant 3 becomes parameter-free nearest-neighbour doubling.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv2d, Ctx, Deconv2d};
use crate::mfbn::Mfbn;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnarVariant {
    Three,
    Five,
    Seven,
}

impl AnarVariant {
    pub fn from_layers(n: usize) -> Result<Self> {
        match n {
            3 => Ok(Self::Three),
            5 => Ok(Self::Five),
            7 => Ok(Self::Seven),
            other => Err(Error::Config(format!(
                "attention variant must be 3, 5 or 7, got {other}"
            ))),
        }
    }

    pub fn layers(self) -> usize {
        match self {
            Self::Three => 3,
            Self::Five => 5,
            Self::Seven => 7,
        }
    }

    pub fn num_down(self) -> usize {
        match self {
            Self::Three => 0,
            Self::Five => 1,
            Self::Seven => 2,
        }
    }
}

impl fmt::Display for AnarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ANAR-{}", self.layers())
    }
}

/// Factor applied to the Kaiming draw of the final 1×1 conv.
pub const OUT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnarConfig {
    pub variant: AnarVariant,
    pub in_channels: usize,
    pub interpolation_upsample: bool,
}

impl AnarConfig {
    pub fn new(variant: AnarVariant, in_channels: usize) -> Self {
        Self {
            variant,
            in_channels,
            interpolation_upsample: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels % 32 != 0 {
            return Err(Error::Config(format!(
                "attention input channels must be a positive multiple of 32, got {}",
                self.in_channels
            )));
        }
        if self.interpolation_upsample && self.variant != AnarVariant::Three {
            return Err(Error::Config(
                "interpolation upsampling is only defined for the 3-layer variant".into(),
            ));
        }
        Ok(())
    }

    fn trans_channels(&self) -> usize {
        match self.variant {
            AnarVariant::Three => self.in_channels / 8,
            _ => self.in_channels / 4,
        }
    }

    fn down_channels(&self) -> Vec<usize> {
        vec![self.in_channels / 8; self.variant.num_down()]
    }

    fn up_channels(&self) -> Vec<usize> {
        let c = self.in_channels;
        match (self.variant, self.interpolation_upsample) {
            (AnarVariant::Three, true) => vec![],
            (AnarVariant::Three, false) => vec![c / 32],
            (AnarVariant::Five, _) => vec![c / 16, c / 32],
            (AnarVariant::Seven, _) => vec![c / 16, c / 16, c / 32],
        }
    }

    /// Output channel count of every layer in order, ending with the single map channel.
    pub fn channel_sequence(&self) -> Vec<usize> {
        let mut seq = vec![self.trans_channels()];
        seq.extend(self.down_channels());
        seq.extend(self.up_channels());
        seq.push(1);
        seq
    }

    /// Skip pairs `(down-path point, up block)`, where point 0 is the trans
    /// output and point `i > 0` is the `i`-th down block output.
    fn skip_pairs(&self) -> &'static [(usize, usize)] {
        match self.variant {
            AnarVariant::Three => &[],
            AnarVariant::Five => &[(0, 0)],
            AnarVariant::Seven => &[(0, 1), (1, 0)],
        }
    }
}

/// Closed-form learnable parameter count of an attention module.
pub fn anar_param_count(config: &AnarConfig) -> usize {
    let c = config.in_channels;
    // bias-free conv + MFBN affine
    let block = |cin: usize, cout: usize, k: usize| cout * cin * k * k + 2 * cout;
    let skip = |cin: usize, cout: usize| cin * cout + cout;
    let head = |cin: usize| cin + 1;
    match (config.variant, config.interpolation_upsample) {
        (AnarVariant::Three, true) => block(c, c / 8, 1) + head(c / 8),
        (AnarVariant::Three, false) => block(c, c / 8, 1) + block(c / 8, c / 32, 4) + head(c / 32),
        (AnarVariant::Five, _) => {
            block(c, c / 4, 1)
                + block(c / 4, c / 8, 3)
                + block(c / 8, c / 16, 4)
                + block(c / 16, c / 32, 4)
                + skip(c / 4, c / 16)
                + head(c / 32)
        }
        (AnarVariant::Seven, _) => {
            block(c, c / 4, 1)
                + block(c / 4, c / 8, 3)
                + block(c / 8, c / 8, 3)
                + block(c / 8, c / 16, 4)
                + block(c / 16, c / 16, 4)
                + block(c / 16, c / 32, 4)
                + skip(c / 4, c / 16)
                + skip(c / 8, c / 16)
                + head(c / 32)
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: Mfbn,
}

#[derive(Clone, Debug)]
struct UpBlock {
    deconv: Deconv2d,
    norm: Mfbn,
}

#[derive(Clone, Debug)]
struct Skip {
    from: usize,
    to: usize,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct AnarModule {
    config: AnarConfig,
    name: String,
    trans: ConvBlock,
    downs: Vec<ConvBlock>,
    ups: Vec<UpBlock>,
    skips: Vec<Skip>,
    out: Conv2d,
}

impl AnarModule {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: AnarConfig,
        num_flows: usize,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.in_channels;
        let t = config.trans_channels();
        let trans = ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.trans.conv"), c, t, 1, 1, 0, false)?,
            norm: Mfbn::new(store, &format!("{name}.trans.norm"), t, num_flows)?,
        };
        let mut point_channels = vec![t];
        let mut downs = Vec::new();
        let mut prev = t;
        for (i, d) in config.down_channels().into_iter().enumerate() {
            downs.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}.down{i}.conv"), prev, d, 3, 2, 1, false)?,
                norm: Mfbn::new(store, &format!("{name}.down{i}.norm"), d, num_flows)?,
            });
            point_channels.push(d);
            prev = d;
        }
        let mut ups = Vec::new();
        for (i, u) in config.up_channels().into_iter().enumerate() {
            ups.push(UpBlock {
                deconv: Deconv2d::new(store, &format!("{name}.up{i}.deconv"), prev, u, 4, 2, 1, false)?,
                norm: Mfbn::new(store, &format!("{name}.up{i}.norm"), u, num_flows)?,
            });
            prev = u;
        }
        let mut skips = Vec::new();
        for (i, &(from, to)) in config.skip_pairs().iter().enumerate() {
            let cout = ups[to].deconv.out_channels;
            skips.push(Skip {
                from,
                to,
                conv: Conv2d::new(
                    store,
                    &format!("{name}.skip{i}.conv"),
                    point_channels[from],
                    cout,
                    1,
                    1,
                    0,
                    true,
                )?,
            });
        }
        let out = Conv2d::new(store, &format!("{name}.out.conv"), prev, 1, 1, 1, 0, true)?;
        // near-uniform maps at initialization
        let scale = T::from_f64_lossy(OUT_INIT_SCALE);
        store.param_mut(out.weight).value.data_mut().iter_mut().for_each(|w| *w *= scale);
        Ok(Self {
            config,
            name: name.to_string(),
            trans,
            downs,
            ups,
            skips,
            out,
        })
    }

    pub fn config(&self) -> &AnarConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of stride-2 down blocks and of ×2 up blocks (deconv or interpolation).
    pub fn scale_steps(&self) -> (usize, usize) {
        let ups = if self.config.interpolation_upsample {
            1
        } else {
            self.ups.len()
        };
        (self.downs.len(), ups)
    }

    /// Parameters counted from the constructed layers.
    pub fn num_params(&self) -> usize {
        let block = |conv: usize, norm: &Mfbn| conv + norm.num_params();
        block(self.trans.conv.num_params(), &self.trans.norm)
            + self
                .downs
                .iter()
                .map(|d| block(d.conv.num_params(), &d.norm))
                .sum::<usize>()
            + self
                .ups
                .iter()
                .map(|u| block(u.deconv.num_params(), &u.norm))
                .sum::<usize>()
            + self.skips.iter().map(|s| s.conv.num_params()).sum::<usize>()
            + self.out.num_params()
    }

    pub fn out_conv(&self) -> &Conv2d {
        &self.out
    }

    /// Maps `(N, c, H, W)` features to a `(N, 1, 2H, 2W)` attention map in (0, 1).
    /// Normalization layers use the statistics slot `flow`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, flow: usize) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).dims();
        if c != self.config.in_channels {
            return Err(shape_err(
                "anar",
                format!("{}: expects {} channels, got {c}", self.name, self.config.in_channels),
            ));
        }
        let div = 1usize << self.downs.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                divisor: div,
            });
        }
        let block = |ctx: &mut Ctx<'_, T>, b: &ConvBlock, v: Var| -> Result<Var> {
            let y = b.conv.forward(ctx, v)?;
            let y = b.norm.forward(ctx, y, flow)?;
            Ok(ctx.tape.relu(y))
        };
        let mut points = vec![block(ctx, &self.trans, x)?];
        for d in &self.downs {
            let prev = *points.last().unwrap();
            points.push(block(ctx, d, prev)?);
        }
        let mut cur = *points.last().unwrap();
        if self.config.interpolation_upsample {
            cur = ctx.tape.upsample2(cur);
        }
        for (i, u) in self.ups.iter().enumerate() {
            let mut y = u.deconv.forward(ctx, cur)?;
            y = u.norm.forward(ctx, y, flow)?;
            for s in self.skips.iter().filter(|s| s.to == i) {
                let side = s.conv.forward(ctx, points[s.from])?;
                y = ctx.tape.add(y, side)?;
            }
            cur = ctx.tape.relu(y);
        }
        let logits = self.out.forward(ctx, cur)?;
        Ok(ctx.tape.sigmoid(logits))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn forward(
        variant: AnarVariant,
        c: usize,
        interp: bool,
        dims: [usize; 4],
    ) -> Result<Tensor<f32>> {
        let mut store = ParamStore::new(3);
        let cfg = AnarConfig {
            variant,
            in_channels: c,
            interpolation_upsample: interp,
        };
        let m = AnarModule::build(&mut store, "g", cfg, 2)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = ctx.tape.constant(Tensor::from_fn(dims, |i| ((i * 37 % 101) as f32) / 50.0 - 1.0));
        let y = m.forward(&mut ctx, x, 0)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn channel_sequences() {
        let five = AnarConfig::new(AnarVariant::Five, 256);
        assert_eq!(five.channel_sequence(), vec![64, 32, 16, 8, 1]);
        let three = AnarConfig::new(AnarVariant::Three, 32);
        assert_eq!(three.channel_sequence(), vec![4, 1, 1]);
        let seven = AnarConfig::new(AnarVariant::Seven, 64);
        assert_eq!(seven.down_channels().len(), 2);
        assert_eq!(seven.up_channels().len(), 3);
    }

    #[test]
    fn variant_three_doubles() {
        let y = forward(AnarVariant::Three, 32, false, [2, 32, 4, 4]).unwrap();
        assert_eq!(y.dims(), [2, 1, 8, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn interpolation_matches_deconv_shape() {
        let a = forward(AnarVariant::Three, 64, true, [1, 64, 6, 6]).unwrap();
        let b = forward(AnarVariant::Three, 64, false, [1, 64, 6, 6]).unwrap();
        assert_eq!(a.dims(), b.dims());
        let interp = AnarConfig {
            interpolation_upsample: true,
            ..AnarConfig::new(AnarVariant::Three, 64)
        };
        assert!(anar_param_count(&interp) < anar_param_count(&AnarConfig::new(AnarVariant::Three, 64)));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut store = ParamStore::<f32>::new(0);
        assert!(AnarModule::build(&mut store, "a", AnarConfig::new(AnarVariant::Three, 48), 1).is_err());
        let bad = AnarConfig {
            interpolation_upsample: true,
            ..AnarConfig::new(AnarVariant::Five, 64)
        };
        assert!(AnarModule::build(&mut store, "b", bad, 1).is_err());
        assert!(AnarVariant::from_layers(4).is_err());
    }

    #[test]
    fn divisibility_checked() {
        let err = forward(AnarVariant::Seven, 32, false, [2, 32, 6, 6]).unwrap_err();
        assert_eq!(
            err,
            Error::Divisibility {
                height: 6,
                width: 6,
                divisor: 4
            }
        );
    }

    #[test]
    fn zero_head_gives_half() {
        let mut store = ParamStore::<f32>::new(1);
        let m = AnarModule::build(&mut store, "g", AnarConfig::new(AnarVariant::Five, 32), 1).unwrap();
        let w = m.out_conv().weight;
        store.param_mut(w).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let x = ctx.tape.constant(Tensor::from_fn([2, 32, 4, 4], |i| (i % 7) as f32));
        let y = m.forward(&mut ctx, x, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.5));
    }
}
