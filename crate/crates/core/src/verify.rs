//! Model-level equivalence and invariant checks shared by tests and tooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rand_distr::{Distribution, Normal};

use crate::anar::{anar_param_count, AnarConfig, AnarModule, AnarVariant};
use crate::backbones::{Backbone, BackboneKind, BackboneSpec};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::mfbn::Mfbn;
use crate::params::ParamStore;
use crate::optim::{Sgd, SgdConfig};
use crate::r2dns::{R2dnsConfig, R2dnsModel};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub steps: usize,
    pub model_losses: Vec<f32>,
    pub reference_losses: Vec<f32>,
    /// First `(step, tensor)` whose bits differ after an update, if any.
    pub first_param_mismatch: Option<(usize, String)>,
}

impl EquivalenceReport {
    pub fn losses_identical(&self) -> bool {
        self.model_losses.len() == self.reference_losses.len()
            && self
                .model_losses
                .iter()
                .zip(&self.reference_losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn passed(&self) -> bool {
        self.losses_identical() && self.first_param_mismatch.is_none()
    }
}

/// Trains a single-flow model and the bare backbone side by side with SGD
/// and compares losses and every named tensor bit for bit after each step.
pub fn baseline_equivalence(spec: &BackboneSpec, seed: u64, steps: usize, batch: usize) -> Result<EquivalenceReport> {
    let cfg = R2dnsConfig::new(spec.clone(), 1, AnarVariant::Three);
    let mut model = R2dnsModel::<f32>::build(&cfg, seed)?;
    let mut reference = Backbone::<f32>::build(spec, seed)?;
    let sgd = SgdConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    let mut opt_m = Sgd::new(sgd);
    let mut opt_r = Sgd::new(sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let size = spec.input_size;
    let mut report = EquivalenceReport {
        steps,
        model_losses: Vec::new(),
        reference_losses: Vec::new(),
        first_param_mismatch: None,
    };
    for step in 0..steps {
        let x = Tensor::<f32>::from_fn([batch, spec.in_channels, size, size], |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes)).collect();

        let mut tape = Tape::new();
        let (loss, _) = model.loss(&mut tape, &x, &labels, Mode::Train)?;
        report.model_losses.push(tape.value(loss).item());
        tape.backward(loss)?.accumulate_into(&mut model.store);
        opt_m.step(&mut model.store, sgd.lr)?;

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (_, logits) = reference.forward(&mut tape, xv, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        report.reference_losses.push(tape.value(loss).item());
        tape.backward(loss)?.accumulate_into(&mut reference.store);
        opt_r.step(&mut reference.store, sgd.lr)?;

        if report.first_param_mismatch.is_none() {
            report.first_param_mismatch = first_mismatch(&model.store, &reference.store).map(|n| (step, n));
        }
    }
    Ok(report)
}

fn first_mismatch(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Option<String> {
    let names_a: Vec<&str> = a.named_tensors().map(|(n, _)| n).collect();
    let names_b: Vec<&str> = b.named_tensors().map(|(n, _)| n).collect();
    if names_a != names_b {
        return Some(format!("tensor sets differ: {} vs {} entries", names_a.len(), names_b.len()));
    }
    a.named_tensors()
        .zip(b.named_tensors())
        .find(|((_, x), (_, y))| {
            x.dims() != y.dims() || x.data().iter().zip(y.data()).any(|(p, q)| p.to_bits() != q.to_bits())
        })
        .map(|((n, _), _)| n.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharingReport {
    /// Shared stage tensors compared.
    pub compared: usize,
    /// Largest `max|shared − summed| / max|summed|` over tensors.
    pub max_rel_diff: f64,
    pub worst: String,
}

/// Compares the gradient of every shared stage parameter with the sum of the
/// gradients of per-flow private copies, on an `L = 2`, `N = 2` model.
pub fn weight_sharing_oracle(kind: BackboneKind, seed: u64) -> Result<SharingReport> {
    let mut spec = BackboneSpec::new(kind, 2, 4).with_channels(&[32, 32]);
    spec.input_size = 8;
    let cfg = R2dnsConfig::new(spec, 2, AnarVariant::Three);
    let mut shared = R2dnsModel::<f64>::build(&cfg, seed)?;
    let mut untied = shared.clone();
    untied.untie_stages()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ed);
    let x = Tensor::<f64>::from_fn([4, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
    let labels = [3usize, 1, 0, 2];
    for m in [&mut shared, &mut untied] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = m.forward_opts(&mut tape, xv, Mode::Train, false)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        tape.backward(loss)?.accumulate_into(&mut m.store);
    }
    let sums = untied.untied_grad_sums()?;
    let mut report = SharingReport {
        compared: 0,
        max_rel_diff: 0.0,
        worst: String::new(),
    };
    for (name, summed) in &sums {
        let id = shared
            .store
            .find_param(name)
            .ok_or_else(|| Error::Invalid(format!("missing shared tensor {name}")))?;
        let g = shared
            .store
            .param(id)
            .grad
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("no gradient for {name}")))?;
        let scale = summed.max_abs().max(f64::MIN_POSITIVE);
        let diff = g
            .data()
            .iter()
            .zip(summed.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let rel = diff / scale;
        report.compared += 1;
        if rel >= report.max_rel_diff {
            report.max_rel_diff = rel;
            report.worst = name.clone();
        }
    }
    let expected = shared.store.params().iter().filter(|p| p.name.starts_with("stage")).count();
    if report.compared != expected {
        return Err(Error::Invalid(format!(
            "compared {} shared tensors, model has {expected}",
            report.compared
        )));
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JunctionBoundReport {
    pub inputs: usize,
    pub junction_elements: usize,
    /// Elements whose pre-junction feature was exactly zero.
    pub zero_features: usize,
    pub violations: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

/// Feeds random inputs through `model` and checks every junction output
/// against the open band `(η, 1 + η)·|a|` (exactly zero where `a = 0`).
pub fn junction_bound_sweep<T: Scalar>(
    model: &mut R2dnsModel<T>,
    num_inputs: usize,
    batch: usize,
    seed: u64,
) -> Result<JunctionBoundReport> {
    let eta = model.config().eta;
    let (lo, hi) = (eta, 1.0 + eta);
    let size = model.config().backbone.input_size;
    let channels = model.config().backbone.in_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = JunctionBoundReport {
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut done = 0;
    while done < num_inputs {
        let n = batch.min(num_inputs - done).max(2);
        let scale = [0.1, 1.0, 10.0][(done / batch) % 3];
        let x = Tensor::<T>::from_fn([n, channels, size, size], |_| {
            T::from_f64_lossy(rng.random_range(-scale..scale))
        });
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward_opts(&mut tape, xv, Mode::Train, false)?;
        for j in &out.junctions {
            let a = tape.value(j.features);
            let y = tape.value(j.output);
            for (&a, &y) in a.data().iter().zip(y.data()) {
                let (a, y) = (a.as_f64(), y.as_f64());
                report.junction_elements += 1;
                if a == 0.0 {
                    report.zero_features += 1;
                    if y != 0.0 {
                        report.violations += 1;
                    }
                    continue;
                }
                let ratio = y / a;
                report.min_ratio = report.min_ratio.min(ratio);
                report.max_ratio = report.max_ratio.max(ratio);
                let inside = y.abs() > lo * a.abs() && y.abs() < hi * a.abs() && y.signum() == a.signum();
                if !inside {
                    report.violations += 1;
                }
            }
        }
        done += n;
    }
    report.inputs = done;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnarContractReport {
    pub variant: AnarVariant,
    pub channels: usize,
    pub input_dims: [usize; 4],
    pub output_dims: [usize; 4],
    pub min_value: f64,
    pub max_value: f64,
    pub analytic_params: usize,
    /// Counted from the tensors registered under the module's name.
    pub constructed_params: usize,
}

impl AnarContractReport {
    pub fn passed(&self) -> bool {
        let [n, _, h, w] = self.input_dims;
        self.output_dims == [n, 1, 2 * h, 2 * w]
            && self.min_value > 0.0
            && self.max_value < 1.0
            && self.analytic_params == self.constructed_params
    }
}

/// Builds an attention module, runs it on random non-negative features and
/// records output shape, value range and parameter counts.
pub fn anar_contract(variant: AnarVariant, channels: usize, extent: usize, seed: u64) -> Result<AnarContractReport> {
    let config = AnarConfig::new(variant, channels);
    let mut store = ParamStore::<f32>::new(seed);
    let module = AnarModule::build(&mut store, "attn", config, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dims = [4, channels, extent, extent];
    let x = Tensor::<f32>::from_fn(input_dims, |_| rng.random_range(0.0..3.0));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = {
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        module.forward(&mut ctx, xv, 1)?
    };
    let out = tape.value(y);
    let (min_value, max_value) = out
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    Ok(AnarContractReport {
        variant,
        channels,
        input_dims,
        output_dims: out.dims(),
        min_value,
        max_value,
        analytic_params: anar_param_count(&config),
        constructed_params: store.num_params_with_prefix("attn."),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationReport {
    pub max_abs_mean: f64,
    pub max_var_deviation: f64,
}

/// Train-mode output statistics of a normalization layer (unit scale, zero
/// shift) on inputs with channel-specific mean and spread.
pub fn mfbn_output_stats(channels: usize, seed: u64) -> Result<NormalizationReport> {
    let mut store = ParamStore::<f32>::new(seed);
    let layer = Mfbn::new(&mut store, "bn", channels, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<(f64, f64)> = (0..channels)
        .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.5..3.0)))
        .collect();
    let dims = [16, channels, 8, 8];
    let plane = 64;
    let x = Tensor::<f32>::from_fn(dims, |i| {
        let (m, s) = params[(i / plane) % channels];
        Normal::new(m, s).expect("positive spread").sample(&mut rng) as f32
    });
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = {
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
        layer.forward(&mut ctx, xv, 1)?
    };
    let out = tape.value(y);
    let mut report = NormalizationReport {
        max_abs_mean: 0.0,
        max_var_deviation: 0.0,
    };
    for c in 0..channels {
        let vals: Vec<f64> = (0..dims[0])
            .flat_map(|n| (0..plane).map(move |p| (n, p)))
            .map(|(n, p)| out.data()[(n * channels + c) * plane + p] as f64)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        report.max_abs_mean = report.max_abs_mean.max(mean.abs());
        report.max_var_deviation = report.max_var_deviation.max((var - 1.0).abs());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeparationReport {
    /// Per flow, the per-channel running means after training.
    pub running_means: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Affine tensor names registered by the layer.
    pub affine_names: Vec<String>,
}

impl FlowSeparationReport {
    pub fn max_error(&self) -> f64 {
        self.running_means
            .iter()
            .zip(&self.targets)
            .flat_map(|(m, t)| m.iter().map(move |v| (v - t).abs()))
            .fold(0.0, f64::max)
    }

    /// One scale and one shift tensor serve every flow.
    pub fn affine_shared(&self) -> bool {
        self.affine_names == ["bn.gamma", "bn.alpha"]
    }
}

/// Feeds flow 0 samples from N(0, 1) and flow 1 samples from N(5, 1) for
/// `steps` train-mode steps each and reports the running means.
pub fn mfbn_flow_separation(channels: usize, steps: usize, seed: u64) -> Result<FlowSeparationReport> {
    let mut store = ParamStore::<f32>::new(seed);
    let layer = Mfbn::new(&mut store, "bn", channels, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = vec![0.0, 5.0];
    for _ in 0..steps {
        for (flow, &mu) in targets.iter().enumerate() {
            let dist = Normal::new(mu, 1.0).expect("unit spread");
            let x = Tensor::<f32>::from_fn([8, channels, 4, 4], |_| dist.sample(&mut rng) as f32);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Train);
            layer.forward(&mut ctx, xv, flow)?;
        }
    }
    Ok(FlowSeparationReport {
        running_means: (0..2)
            .map(|f| layer.running_mean(&store, f).data().iter().map(|&v| v as f64).collect())
            .collect(),
        targets,
        affine_names: store.params().iter().map(|p| p.name.clone()).collect(),
    })
}
