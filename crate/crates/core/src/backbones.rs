//! Desk-scale stage factories and the classifier head.
//!
//! A stage is the unit between two ×2 spatial reductions. Stage `l` reads
//! `stage_channels[l-1]` inputs' worth of features from its predecessor (the
//! image for `l = 1`) and always ends with exactly one halving.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{conv_param_count, Conv2d, Ctx, Linear, Mode};
use crate::mfbn::Mfbn;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const DEFAULT_STAGE_CHANNELS: [usize; 4] = [32, 64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    TinyVgg,
    TinyResnet,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny_vgg" => Ok(Self::TinyVgg),
            "tiny_resnet" => Ok(Self::TinyResnet),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TinyVgg => "tiny_vgg",
            Self::TinyResnet => "tiny_resnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub stage_channels: Vec<usize>,
    pub num_stages: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Nominal square input extent used for feasibility checks.
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, num_stages: usize, num_classes: usize) -> Self {
        Self {
            kind,
            stage_channels: DEFAULT_STAGE_CHANNELS.iter().copied().take(num_stages).collect(),
            num_stages,
            num_classes,
            in_channels: 3,
            input_size: 32,
        }
    }

    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.stage_channels = channels.to_vec();
        self
    }

    pub fn final_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stage_channels.len() != self.num_stages {
            return Err(Error::Config(format!(
                "{} stage channel entries for {} stages",
                self.stage_channels.len(),
                self.num_stages
            )));
        }
        if let Some(c) = self.stage_channels.iter().find(|&&c| c == 0 || c % 32 != 0) {
            return Err(Error::Config(format!(
                "stage channels must be positive multiples of 32, got {c}"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        let div = 1usize << self.num_stages;
        if self.input_size % div != 0 || self.input_size / div < 2 {
            return Err(Error::Config(format!(
                "{} stages cannot reduce a {}x{} input to at least 2x2",
                self.num_stages, self.input_size, self.input_size
            )));
        }
        Ok(())
    }
}

/// Static description of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    /// 1-based stage index.
    pub index: usize,
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial reduction factor of this stage.
    pub stride: usize,
    /// Product of strides through this stage.
    pub cumulative_stride: usize,
}

impl StageSpec {
    /// Layer-by-layer description.
    pub fn op_stack(&self) -> Vec<String> {
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            BackboneKind::TinyVgg => vec![
                format!("conv3x3 {i}->{o}"),
                "mfbn".into(),
                "relu".into(),
                format!("conv3x3 {o}->{o}"),
                "mfbn".into(),
                "relu".into(),
                "maxpool2x2".into(),
            ],
            BackboneKind::TinyResnet => vec![
                format!("conv3x3/{} {i}->{o}", self.stride),
                "mfbn".into(),
                "relu".into(),
                format!("conv3x3 {o}->{o}"),
                "mfbn".into(),
                format!("+ conv1x1/{} {i}->{o}", self.stride),
                "relu".into(),
            ],
        }
    }

    /// Spatial extent after this stage for an input extent `n`.
    pub fn out_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (i, o) = (self.in_channels, self.out_channels);
        let normalized = |cin, k| conv_param_count(cin, o, k, false) + 2 * o;
        match self.kind {
            BackboneKind::TinyVgg => normalized(i, 3) + normalized(o, 3),
            BackboneKind::TinyResnet => {
                normalized(i, 3) + normalized(o, 3) + conv_param_count(i, o, 1, true)
            }
        }
    }
}

fn make_stages(spec: &BackboneSpec, kind: BackboneKind) -> Result<Vec<StageSpec>> {
    spec.validate()?;
    let mut prev = spec.in_channels;
    let mut cumulative = 1;
    Ok(spec
        .stage_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            cumulative *= 2;
            let s = StageSpec {
                index: i + 1,
                kind,
                in_channels: prev,
                out_channels: c,
                stride: 2,
                cumulative_stride: cumulative,
            };
            prev = c;
            s
        })
        .collect())
}

/// Stage `l`: `[3×3 conv → MFBN → ReLU] × 2 → 2×2 max-pool`.
pub fn make_tiny_vgg(spec: &BackboneSpec) -> Result<Vec<StageSpec>> {
    make_stages(spec, BackboneKind::TinyVgg)
}

/// Stage `l`: one residual block `3×3/2 conv → MFBN → ReLU → 3×3 conv → MFBN`
/// plus a `1×1/2` projection shortcut, then ReLU.
pub fn make_tiny_resnet(spec: &BackboneSpec) -> Result<Vec<StageSpec>> {
    make_stages(spec, BackboneKind::TinyResnet)
}

pub fn make_stage_specs(spec: &BackboneSpec) -> Result<Vec<StageSpec>> {
    match spec.kind {
        BackboneKind::TinyVgg => make_tiny_vgg(spec),
        BackboneKind::TinyResnet => make_tiny_resnet(spec),
    }
}

#[derive(Clone, Debug)]
struct NormConv {
    conv: Conv2d,
    norm: Mfbn,
}

impl NormConv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        flows: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, false)?,
            norm: Mfbn::new(store, &format!("{name}.norm"), cout, flows)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, flow: usize) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y, flow)
    }
}

/// A built stage `h_l` holding its parameter ids.
#[derive(Clone, Debug)]
pub struct Stage {
    pub spec: StageSpec,
    pub name: String,
    first: NormConv,
    second: NormConv,
    shortcut: Option<Conv2d>,
}

impl Stage {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &StageSpec,
        num_flows: usize,
    ) -> Result<Self> {
        if spec.stride != 2 {
            return Err(Error::Config(format!(
                "{name}: only stride-2 stages can be built, got {}",
                spec.stride
            )));
        }
        let (i, o) = (spec.in_channels, spec.out_channels);
        let (first, second, shortcut) = match spec.kind {
            BackboneKind::TinyVgg => (
                NormConv::new(store, &format!("{name}.block0"), i, o, 1, num_flows)?,
                NormConv::new(store, &format!("{name}.block1"), o, o, 1, num_flows)?,
                None,
            ),
            BackboneKind::TinyResnet => (
                NormConv::new(store, &format!("{name}.block0"), i, o, 2, num_flows)?,
                NormConv::new(store, &format!("{name}.block1"), o, o, 1, num_flows)?,
                Some(Conv2d::new(store, &format!("{name}.proj"), i, o, 1, 2, 0, true)?),
            ),
        };
        Ok(Self {
            spec: spec.clone(),
            name: name.to_string(),
            first,
            second,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, flow: usize) -> Result<Var> {
        let y = self.first.forward(ctx, x, flow)?;
        let y = ctx.tape.relu(y);
        let y = self.second.forward(ctx, y, flow)?;
        match &self.shortcut {
            None => {
                let y = ctx.tape.relu(y);
                ctx.tape.max_pool2(y)
            }
            Some(proj) => {
                let s = proj.forward(ctx, x)?;
                let y = ctx.tape.add(y, s)?;
                Ok(ctx.tape.relu(y))
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.first.conv.num_params()
            + self.first.norm.num_params()
            + self.second.conv.num_params()
            + self.second.norm.num_params()
            + self.shortcut.as_ref().map_or(0, |c| c.num_params())
    }

    /// The last convolution of the main branch (zeroing it makes a residual
    /// stage pass the projected input through).
    pub fn last_conv(&self) -> &Conv2d {
        &self.second.conv
    }

    pub fn norms(&self) -> [&Mfbn; 2] {
        [&self.first.norm, &self.second.norm]
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.fc"), in_channels, num_classes)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(features);
        self.linear.forward(ctx, pooled)
    }

    pub fn num_params(&self) -> usize {
        self.linear.num_params()
    }
}

/// Plain single-flow network: stages `h_1..h_L` followed by the head.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub store: ParamStore<T>,
    pub spec: BackboneSpec,
    pub stages: Vec<Stage>,
    pub head: Head,
}

impl<T: Scalar> Backbone<T> {
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let stages = make_stage_specs(spec)?
            .iter()
            .map(|s| Stage::build(&mut store, &format!("stage{}", s.index), s, 1))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::build(&mut store, "head", spec.final_channels(), spec.num_classes)?;
        Ok(Self {
            store,
            spec: spec.clone(),
            stages,
            head,
        })
    }

    /// Returns `(features, logits)`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let mut cur = x;
        for s in &self.stages {
            cur = s.forward(&mut ctx, cur, 0)?;
        }
        let logits = self.head.forward(&mut ctx, cur)?;
        Ok((cur, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn resnet_stride_and_counts() {
        let spec = BackboneSpec::new(BackboneKind::TinyResnet, 4, 10);
        let stages = make_tiny_resnet(&spec).unwrap();
        assert_eq!(stages.last().unwrap().cumulative_stride, 16);
        let mut store = ParamStore::<f32>::new(0);
        for s in &stages {
            let built = Stage::build(&mut store, &format!("s{}", s.index), s, 3).unwrap();
            assert_eq!(built.num_params(), s.param_count());
        }
        assert_eq!(
            store.num_params(),
            stages.iter().map(|s| s.param_count()).sum::<usize>()
        );
    }

    #[test]
    fn vgg_channels_feed_attention() {
        let spec = BackboneSpec::new(BackboneKind::TinyVgg, 4, 10);
        let stages = make_tiny_vgg(&spec).unwrap();
        let outs: Vec<_> = stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(&outs[..3], &[32, 64, 128]);
        assert_eq!(stages[0].op_stack().last().unwrap(), "maxpool2x2");
    }

    #[test]
    fn infeasible_depth_rejected() {
        let mut spec = BackboneSpec::new(BackboneKind::TinyVgg, 4, 10);
        spec.stage_channels.push(256);
        spec.num_stages = 5;
        assert!(make_tiny_vgg(&spec).is_err());
        let bad = BackboneSpec::new(BackboneKind::TinyResnet, 2, 10).with_channels(&[32, 48]);
        assert!(make_tiny_resnet(&bad).is_err());
    }

    #[test]
    fn zero_second_conv_passes_projection() {
        let spec = BackboneSpec::new(BackboneKind::TinyResnet, 1, 10);
        let s = &make_tiny_resnet(&spec).unwrap()[0];
        let mut store = ParamStore::<f64>::new(4);
        let stage = Stage::build(&mut store, "s", s, 1).unwrap();
        store.param_mut(stage.last_conv().weight).value.data_mut().fill(0.0);
        let x = Tensor::from_fn([2, 3, 8, 8], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        let xv = ctx.tape.constant(x);
        let y = stage.forward(&mut ctx, xv, 0).unwrap();
        let proj = stage.shortcut.as_ref().unwrap().forward(&mut ctx, xv).unwrap();
        let p = ctx.tape.relu(proj);
        assert_eq!(tape.value(y), tape.value(p));
    }

    #[test]
    fn head_zero_weights_uniform_logits() {
        let mut store = ParamStore::<f64>::new(0);
        let head = Head::build(&mut store, "head", 32, 10).unwrap();
        store.param_mut(head.linear.weight).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        let f = ctx.tape.constant(Tensor::from_fn([3, 32, 2, 2], |i| i as f64));
        let logits = head.forward(&mut ctx, f).unwrap();
        assert_eq!(ctx.tape.value(logits).dims(), [3, 10, 1, 1]);
        let loss = ctx.tape.softmax_cross_entropy(logits, &[0, 5, 9]).unwrap();
        assert!((tape.value(loss).item() - 10f64.ln()).abs() < 1e-12);
    }
}
