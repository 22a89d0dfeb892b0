//! Recursive dual-directional nested structure.
//!
//! The input is turned into an `N`-level pyramid (coarsest first). Flow `n`
//! (1-based) runs the shared stages `h_1..h_{S(n)}` with `S(n) = L − (N − n)`
//! over pyramid level `n`. At stage `l` of flow `n > 1`, provided flow `n − 1`
//! reached stage `l`, the stage output is gated by the shared attention module
//! `g_l` applied to flow `n − 1`'s output of the same stage:
//!
//! ```text
//! x_{l+1}^{(n)} = h_l[x_l^{(n)}] ⊙ (g_l[x_{l+1}^{(n-1)}] + η)
//! ```
//!
//! Every other stage output passes through unchanged. Only the last flow's
//! final features reach the classifier head.

use std::fmt;
use std::str::FromStr;

use crate::anar::{AnarConfig, AnarModule, AnarVariant};
use crate::backbones::{make_stage_specs, BackboneSpec, Head, Stage, StageSpec};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Stage counts per flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowPlan {
    num_stages: usize,
    num_flows: usize,
}

impl FlowPlan {
    pub fn new(num_stages: usize, num_flows: usize) -> Result<Self> {
        if num_flows == 0 || num_stages == 0 {
            return Err(Error::Config("flows and stages must be positive".into()));
        }
        if num_flows > num_stages {
            return Err(Error::Config(format!(
                "{num_flows} flows exceed {num_stages} stages"
            )));
        }
        Ok(Self {
            num_stages,
            num_flows,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn num_flows(&self) -> usize {
        self.num_flows
    }

    /// `S(n) = L − (N − n)` for 1-based flow `n`.
    pub fn stage_count(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.num_flows {
            return Err(Error::Invalid(format!(
                "flow {n} outside 1..={}",
                self.num_flows
            )));
        }
        Ok(self.num_stages - (self.num_flows - n))
    }

    pub fn stage_counts(&self) -> Vec<usize> {
        (1..=self.num_flows)
            .map(|n| self.num_stages - (self.num_flows - n))
            .collect()
    }

    /// Every `(flow, stage)` pair (1-based) where an attention junction exists.
    pub fn junctions(&self) -> Vec<(usize, usize)> {
        let counts = self.stage_counts();
        let mut out = Vec::new();
        for n in 2..=self.num_flows {
            for l in 1..=counts[n - 2] {
                out.push((n, l));
            }
        }
        out
    }

    pub fn num_attention_maps(&self) -> usize {
        self.stage_counts()[..self.num_flows - 1].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Attention,
    MultiscaleConcat,
    Baseline,
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "multiscale_concat" => Ok(Self::MultiscaleConcat),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown model mode '{other}'"))),
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::MultiscaleConcat => "multiscale_concat",
            Self::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct R2dnsConfig {
    pub backbone: BackboneSpec,
    pub anar_variant: AnarVariant,
    pub interpolation_upsample: bool,
    pub num_flows: usize,
    pub eta: f64,
    pub mode: ModelMode,
}

impl R2dnsConfig {
    pub fn new(backbone: BackboneSpec, num_flows: usize, anar_variant: AnarVariant) -> Self {
        Self {
            backbone,
            anar_variant,
            interpolation_upsample: false,
            num_flows,
            eta: 0.5,
            mode: ModelMode::Attention,
        }
    }

    pub fn has_attention(&self) -> bool {
        self.mode == ModelMode::Attention && self.num_flows > 1
    }

    /// Spatial divisor every input extent must satisfy.
    pub fn required_divisor(&self) -> usize {
        let stages = 1usize << self.backbone.num_stages;
        match self.mode {
            ModelMode::Baseline => stages,
            ModelMode::MultiscaleConcat => stages << (self.num_flows - 1),
            ModelMode::Attention if self.num_flows > 1 => stages << self.anar_variant.num_down(),
            ModelMode::Attention => stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        FlowPlan::new(self.backbone.num_stages, self.num_flows)?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.mode == ModelMode::Baseline && self.num_flows != 1 {
            return Err(Error::Config("baseline mode runs exactly one flow".into()));
        }
        if self.interpolation_upsample && self.anar_variant != AnarVariant::Three {
            return Err(Error::Config(
                "interpolation upsampling is only defined for the 3-layer attention variant".into(),
            ));
        }
        Ok(())
    }
}

/// Input pyramid, coarsest first: level `n` has extent `H / 2^(N − n)`; the
/// last level is `x` itself. Levels are produced by repeated 2×2 averaging.
pub fn build_input_pyramid<T: Scalar>(tape: &mut Tape<T>, x: Var, num_flows: usize) -> Result<Vec<Var>> {
    if num_flows == 0 {
        return Err(Error::Config("at least one flow required".into()));
    }
    let [_, _, h, w] = tape.value(x).dims();
    let div = 1usize << (num_flows - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            divisor: div,
        });
    }
    let mut levels = vec![x];
    for _ in 1..num_flows {
        let finer = *levels.last().unwrap();
        levels.push(tape.avg_pool2(finer)?);
    }
    levels.reverse();
    Ok(levels)
}

/// Extents computed by [`junction_alignment_check`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JunctionShape {
    pub flow: usize,
    pub stage: usize,
    /// Extent of `x_{l+1}^{(n-1)}` fed to the attention module.
    pub attention_input: (usize, usize),
    /// Extent of `h_l[x_l^{(n)}]` the attention map multiplies.
    pub target: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentReport {
    /// Per flow, the extent entering each stage plus the final extent.
    pub flow_extents: Vec<Vec<(usize, usize)>>,
    pub junctions: Vec<JunctionShape>,
}

/// Propagates extents for an `(h, w)` input through every flow and checks that
/// each attention input is exactly half the extent of the stage output it gates.
pub fn junction_alignment_check(
    stages: &[StageSpec],
    plan: &FlowPlan,
    mode: ModelMode,
    attention_downsamples: usize,
    input: (usize, usize),
) -> Result<AlignmentReport> {
    if stages.len() != plan.num_stages() {
        return Err(Error::Config(format!(
            "{} stage specs for a {}-stage plan",
            stages.len(),
            plan.num_stages()
        )));
    }
    if let Some(s) = stages.iter().find(|s| !s.stride.is_power_of_two() || s.stride < 2) {
        return Err(Error::Config(format!(
            "stage {} has stride {}; only power-of-two reductions align with the pyramid",
            s.index, s.stride
        )));
    }
    let n_flows = plan.num_flows();
    let runs: Vec<usize> = match mode {
        ModelMode::MultiscaleConcat => vec![plan.num_stages(); n_flows],
        _ => plan.stage_counts(),
    };
    let mut flow_extents = Vec::with_capacity(n_flows);
    for (i, &count) in runs.iter().enumerate() {
        let n = i + 1;
        let div = 1usize << (n_flows - n);
        let (h, w) = input;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                divisor: div,
            });
        }
        let mut ext = vec![(h / div, w / div)];
        for s in &stages[..count] {
            let (eh, ew) = *ext.last().unwrap();
            if eh % s.stride != 0 || ew % s.stride != 0 || eh < s.stride || ew < s.stride {
                return Err(Error::Junction {
                    flow: n,
                    stage: s.index,
                    detail: format!("extent {eh}x{ew} not divisible by stride {}", s.stride),
                });
            }
            ext.push((s.out_extent(eh), s.out_extent(ew)));
        }
        flow_extents.push(ext);
    }
    let mut junctions = Vec::new();
    if mode == ModelMode::Attention {
        let attn_div = 1usize << attention_downsamples;
        for (n, l) in plan.junctions() {
            let src = flow_extents[n - 2][l];
            let target = flow_extents[n - 1][l];
            if src.0 % attn_div != 0 || src.1 % attn_div != 0 {
                return Err(Error::Junction {
                    flow: n,
                    stage: l,
                    detail: format!(
                        "attention input {}x{} not divisible by {attn_div}",
                        src.0, src.1
                    ),
                });
            }
            if (2 * src.0, 2 * src.1) != target {
                return Err(Error::Junction {
                    flow: n,
                    stage: l,
                    detail: format!(
                        "attention input {}x{} cannot double onto {}x{}",
                        src.0, src.1, target.0, target.1
                    ),
                });
            }
            junctions.push(JunctionShape {
                flow: n,
                stage: l,
                attention_input: src,
                target,
            });
        }
    }
    Ok(AlignmentReport {
        flow_extents,
        junctions,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub flow: usize,
    pub stage: usize,
    pub map: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct JunctionRecord {
    pub flow: usize,
    pub stage: usize,
    /// Stage output before gating.
    pub features: Var,
    pub output: Var,
}

pub struct ModelOutput {
    /// Last flow's final features (attention/baseline) or the concatenated
    /// pooled features of all flows (multi-scale concat).
    pub features: Var,
    pub logits: Var,
    /// Maps in computation order, tagged with 1-based `(flow, stage)`.
    pub attention_maps: Vec<AttentionMap>,
    pub junctions: Vec<JunctionRecord>,
}

#[derive(Clone, Debug)]
struct Network {
    config: R2dnsConfig,
    plan: FlowPlan,
    stage_specs: Vec<StageSpec>,
    stages: Vec<Stage>,
    attentions: Vec<AnarModule>,
    head: Head,
    /// Per-flow private copies of the stages, `[flow − 1][stage − 1]`.
    untied: Option<Vec<Vec<Stage>>>,
}

impl Network {
    fn stage(&self, l: usize, n: usize) -> &Stage {
        match &self.untied {
            Some(copies) => &copies[n - 1][l - 1],
            None => &self.stages[l - 1],
        }
    }

    fn check_input<T: Scalar>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let [_, c, h, w] = tape.value(x).dims();
        if c != self.config.backbone.in_channels {
            return Err(Error::Shape {
                op: "r2dns",
                detail: format!(
                    "input has {c} channels, backbone expects {}",
                    self.config.backbone.in_channels
                ),
            });
        }
        let div = self.config.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Divisibility {
                height: h,
                width: w,
                divisor: div,
            });
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ModelOutput> {
        self.check_input(ctx.tape, x)?;
        match self.config.mode {
            ModelMode::Attention => self.recursive_forward(ctx, x),
            ModelMode::MultiscaleConcat => self.concat_forward(ctx, x),
            ModelMode::Baseline => {
                let mut cur = x;
                for l in 1..=self.plan.num_stages() {
                    cur = self.stage(l, 1).forward(ctx, cur, 0)?;
                }
                let logits = self.head.forward(ctx, cur)?;
                Ok(ModelOutput {
                    features: cur,
                    logits,
                    attention_maps: Vec::new(),
                    junctions: Vec::new(),
                })
            }
        }
    }

    /// Stage-synchronous schedule: all flows' `h_l` first (mutually
    /// independent), then the attention junctions of stage `l` in flow order.
    fn recursive_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ModelOutput> {
        let n_flows = self.plan.num_flows();
        let counts = self.plan.stage_counts();
        let eta = T::from_f64_lossy(self.config.eta);
        let mut cur = build_input_pyramid(ctx.tape, x, n_flows)?;
        let mut maps = Vec::new();
        let mut junctions = Vec::new();
        for l in 1..=self.plan.num_stages() {
            let mut stage_out = vec![None; n_flows];
            for n in 1..=n_flows {
                if counts[n - 1] >= l {
                    stage_out[n - 1] = Some(self.stage(l, n).forward(ctx, cur[n - 1], n - 1)?);
                }
            }
            for n in 1..=n_flows {
                let Some(a) = stage_out[n - 1] else {
                    continue;
                };
                cur[n - 1] = if n > 1 && l <= counts[n - 2] {
                    // cur[n − 2] already holds x_{l+1}^{(n−1)}.
                    let m = self.attentions[l - 1].forward(ctx, cur[n - 2], n - 2)?;
                    maps.push(AttentionMap {
                        flow: n,
                        stage: l,
                        map: m,
                    });
                    let out = ctx.tape.junction(a, m, eta).map_err(|e| Error::Junction {
                        flow: n,
                        stage: l,
                        detail: e.to_string(),
                    })?;
                    junctions.push(JunctionRecord {
                        flow: n,
                        stage: l,
                        features: a,
                        output: out,
                    });
                    out
                } else {
                    a
                };
            }
        }
        let features = cur[n_flows - 1];
        let logits = self.head.forward(ctx, features)?;
        Ok(ModelOutput {
            features,
            logits,
            attention_maps: maps,
            junctions,
        })
    }

    /// Standalone flows without junctions; each runs the full stage stack and
    /// the pooled final features of all flows are concatenated.
    fn concat_forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ModelOutput> {
        let n_flows = self.plan.num_flows();
        let mut cur = build_input_pyramid(ctx.tape, x, n_flows)?;
        for l in 1..=self.plan.num_stages() {
            for n in 1..=n_flows {
                cur[n - 1] = self.stage(l, n).forward(ctx, cur[n - 1], n - 1)?;
            }
        }
        let pooled: Vec<Var> = cur.iter().map(|&v| ctx.tape.global_avg_pool(v)).collect();
        let features = ctx.tape.concat_channels(&pooled)?;
        let logits = self.head.linear.forward(ctx, features)?;
        Ok(ModelOutput {
            features,
            logits,
            attention_maps: Vec::new(),
            junctions: Vec::new(),
        })
    }
}

/// The full model: shared stages, shared attention modules, classifier head.
#[derive(Clone, Debug)]
pub struct R2dnsModel<T> {
    pub store: ParamStore<T>,
    net: Network,
}

impl<T: Scalar> R2dnsModel<T> {
    pub fn build(config: &R2dnsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let plan = FlowPlan::new(config.backbone.num_stages, config.num_flows)?;
        let stage_specs = make_stage_specs(&config.backbone)?;
        let nominal = config.backbone.input_size;
        junction_alignment_check(
            &stage_specs,
            &plan,
            config.mode,
            config.anar_variant.num_down(),
            (nominal, nominal),
        )?;
        if nominal % config.required_divisor() != 0 {
            return Err(Error::Config(format!(
                "input size {nominal} not divisible by {} required by this configuration",
                config.required_divisor()
            )));
        }
        let mut store = ParamStore::new(seed);
        let n_flows = config.num_flows;
        let stages = stage_specs
            .iter()
            .map(|s| Stage::build(&mut store, &format!("stage{}", s.index), s, n_flows))
            .collect::<Result<Vec<_>>>()?;
        let head_in = match config.mode {
            ModelMode::MultiscaleConcat => n_flows * config.backbone.final_channels(),
            _ => config.backbone.final_channels(),
        };
        let head = Head::build(&mut store, "head", head_in, config.backbone.num_classes)?;
        let mut attentions = Vec::new();
        if config.has_attention() {
            for s in &stage_specs[..stage_specs.len() - 1] {
                let cfg = AnarConfig {
                    variant: config.anar_variant,
                    in_channels: s.out_channels,
                    interpolation_upsample: config.interpolation_upsample,
                };
                attentions.push(AnarModule::build(
                    &mut store,
                    &format!("attn{}", s.index),
                    cfg,
                    n_flows,
                )?);
            }
        }
        Ok(Self {
            store,
            net: Network {
                config: config.clone(),
                plan,
                stage_specs,
                stages,
                attentions,
                head,
                untied: None,
            },
        })
    }

    pub fn config(&self) -> &R2dnsConfig {
        &self.net.config
    }

    pub fn plan(&self) -> &FlowPlan {
        &self.net.plan
    }

    pub fn stage_specs(&self) -> &[StageSpec] {
        &self.net.stage_specs
    }

    pub fn stages(&self) -> &[Stage] {
        &self.net.stages
    }

    pub fn attentions(&self) -> &[AnarModule] {
        &self.net.attentions
    }

    pub fn head(&self) -> &Head {
        &self.net.head
    }

    pub fn set_eta(&mut self, eta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
        }
        self.net.config.eta = eta;
        Ok(())
    }

    pub fn stage_param_count(&self) -> usize {
        self.net.stages.iter().map(Stage::num_params).sum()
    }

    pub fn attention_param_count(&self) -> usize {
        self.net.attentions.iter().map(AnarModule::num_params).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.net.head.num_params()
    }

    /// Re-runs the static shape propagation for an `(h, w)` input.
    pub fn alignment_report(&self, input: (usize, usize)) -> Result<AlignmentReport> {
        junction_alignment_check(
            &self.net.stage_specs,
            &self.net.plan,
            self.net.config.mode,
            self.net.config.anar_variant.num_down(),
            input,
        )
    }

    /// Forward pass; train mode updates running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ModelOutput> {
        self.forward_opts(tape, x, mode, mode == Mode::Train)
    }

    pub fn forward_opts(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        update_stats: bool,
    ) -> Result<ModelOutput> {
        let mut ctx = Ctx {
            tape,
            store: &mut self.store,
            mode,
            update_stats,
        };
        self.net.forward(&mut ctx, x)
    }

    /// Multi-scale concat forward; rejected for any other mode.
    pub fn ablation_forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ModelOutput> {
        if self.net.config.mode != ModelMode::MultiscaleConcat {
            return Err(Error::Config(format!(
                "ablation forward requires multiscale_concat mode, model is in {} mode",
                self.net.config.mode
            )));
        }
        self.forward(tape, x, mode)
    }

    /// Forward plus mean cross-entropy; returns `(loss, output)`.
    pub fn loss(
        &mut self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Var, ModelOutput)> {
        let x = tape.constant(images.clone());
        let out = self.forward(tape, x, mode)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }

    /// Resets the running statistics of every normalization layer.
    pub fn reset_running_stats(&mut self) {
        for b in self.store.buffers().iter().map(|b| b.name.clone()).collect::<Vec<_>>() {
            let id = self.store.find_buffer(&b).unwrap();
            let fill = if b.contains(".running_var.") { T::one() } else { T::zero() };
            self.store.buffer_mut(id).data_mut().fill(fill);
        }
    }

    /// Gives every flow its own copy of each stage it runs, initialized from
    /// the shared values. Used as the oracle for shared-gradient accumulation.
    pub fn untie_stages(&mut self) -> Result<()> {
        if self.net.untied.is_some() {
            return Ok(());
        }
        let n_flows = self.net.plan.num_flows();
        let runs = match self.net.config.mode {
            ModelMode::MultiscaleConcat => vec![self.net.plan.num_stages(); n_flows],
            _ => self.net.plan.stage_counts(),
        };
        let mut copies = Vec::with_capacity(n_flows);
        for (i, &count) in runs.iter().enumerate() {
            let mut flow_stages = Vec::with_capacity(count);
            for spec in &self.net.stage_specs[..count] {
                let shared = format!("stage{}.", spec.index);
                let private = format!("untied.flow{}.stage{}", i + 1, spec.index);
                let stage = Stage::build(&mut self.store, &private, spec, n_flows)?;
                let values: Vec<(String, Tensor<T>)> = self
                    .store
                    .named_tensors()
                    .filter(|(name, _)| name.starts_with(&shared))
                    .map(|(name, t)| (format!("{private}.{}", &name[shared.len()..]), t.clone()))
                    .collect();
                for (name, t) in values {
                    self.store.set_named(&name, t)?;
                }
                flow_stages.push(stage);
            }
            copies.push(flow_stages);
        }
        self.net.untied = Some(copies);
        Ok(())
    }

    /// For each shared stage parameter, the sum of its untied copies' gradients.
    pub fn untied_grad_sums(&self) -> Result<Vec<(String, Tensor<T>)>> {
        if self.net.untied.is_none() {
            return Err(Error::Invalid("stages are not untied".into()));
        }
        let mut out = Vec::new();
        for p in self.store.params() {
            let Some(rest) = p.name.strip_prefix("stage") else {
                continue;
            };
            let mut total: Option<Tensor<T>> = None;
            for n in 1..=self.net.plan.num_flows() {
                let name = format!("untied.flow{n}.stage{rest}");
                if let Some(id) = self.store.find_param(&name) {
                    if let Some(g) = &self.store.param(id).grad {
                        match &mut total {
                            Some(t) => t
                                .data_mut()
                                .iter_mut()
                                .zip(g.data())
                                .for_each(|(a, &b)| *a += b),
                            None => total = Some(g.clone()),
                        }
                    }
                }
            }
            if let Some(t) = total {
                out.push((p.name.clone(), t));
            }
        }
        Ok(out)
    }
}
