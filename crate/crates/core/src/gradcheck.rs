//! Central finite-difference verification of tape gradients (double precision).

use std::fmt;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Use the fourth-order five-point central stencil instead of the
    /// two-point one.
    pub five_point: bool,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; larger tensors are subsampled with a
    /// fixed stride so the choice is deterministic.
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            five_point: true,
            floor: 1e-6,
            tolerance: 1e-6,
            max_entries: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub block: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSummary {
    pub block: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockSummary>,
    pub worst: Option<EntryCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn failing_blocks(&self) -> Vec<&BlockSummary> {
        self.blocks
            .iter()
            .filter(|b| !(b.max_rel_err < self.tolerance))
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked={} blocks={} max_rel_err={:.3e} tol={:.0e}",
            self.checked(),
            self.blocks.len(),
            self.max_rel_err(),
            self.tolerance
        )?;
        if let Some(w) = &self.worst {
            write!(f, " worst={}[{}]", w.block, w.index)?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` at 0. The five-point form also compares its
/// two embedded two-point estimates; when they disagree the stencil straddles
/// a kink (ReLU, max-pool switch) and the step is shrunk, up to three times.
fn central_difference(
    f: &mut impl FnMut(f64) -> Result<f64>,
    h: f64,
    five_point: bool,
    floor: f64,
) -> Result<f64> {
    if !five_point {
        return Ok((f(h)? - f(-h)?) / (2.0 * h));
    }
    let mut step = h;
    for attempt in 0..4 {
        let near = (f(step)? - f(-step)?) / (2.0 * step);
        let far = (f(2.0 * step)? - f(-2.0 * step)?) / (4.0 * step);
        let smooth = (near - far).abs() <= KINK_TOLERANCE * near.abs().max(far.abs()).max(floor);
        if smooth || attempt == 3 {
            return Ok((4.0 * near - far) / 3.0);
        }
        step /= 10.0;
    }
    unreachable!()
}

const KINK_TOLERANCE: f64 = 1e-5;

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // spread evenly, always including the first and last entries
    (0..max).map(|i| i * (len - 1) / (max - 1)).collect()
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `store` and every tensor in `inputs`.
///
/// `loss_fn` receives a fresh tape, the store, and one tracked input var per
/// entry of `inputs`; it must be a pure function of those values (run
/// normalization without updating running statistics).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    inputs: &[(String, Tensor<f64>)],
    mut loss_fn: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (param_grads, input_grads) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = current.iter().map(|t| tape.input(t.clone())).collect();
        let loss = loss_fn(&mut tape, store, &vars)?;
        let grads = tape.backward(loss)?;
        let pg: Vec<Option<Tensor<f64>>> = store
            .param_ids()
            .map(|id| grads.param(id).cloned())
            .collect();
        let ig: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.input(v).cloned()).collect();
        (pg, ig)
    };

    let mut eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = loss_fn(&mut tape, store, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let h = config.step;
    let mut blocks = Vec::new();
    let mut worst: Option<EntryCheck> = None;
    let mut record = |block: &str, index: usize, analytic: f64, numeric: f64, summary: &mut BlockSummary| {
        let rel_err = if analytic.is_finite() && numeric.is_finite() {
            relative_error(analytic, numeric, config.floor)
        } else {
            f64::INFINITY
        };
        summary.checked += 1;
        summary.max_rel_err = summary.max_rel_err.max(rel_err);
        if worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
            worst = Some(EntryCheck {
                block: block.to_string(),
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    };

    let ids: Vec<_> = store.param_ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = store.param(id).name.clone();
        let len = store.param(id).value.numel();
        let mut summary = BlockSummary {
            block: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
        };
        for i in sample_indices(len, config.max_entries) {
            let orig = store.param(id).value.data()[i];
            let mut at = |delta: f64| {
                store.param_mut(id).value.data_mut()[i] = orig + delta;
                let v = eval(store, &current);
                store.param_mut(id).value.data_mut()[i] = orig;
                v
            };
            let numeric = central_difference(&mut at, h, config.five_point, config.floor)?;
            let analytic = param_grads[k].as_ref().map_or(0.0, |g| g.data()[i]);
            record(&name, i, analytic, numeric, &mut summary);
        }
        blocks.push(summary);
    }

    for (j, (name, _)) in inputs.iter().enumerate() {
        let block = format!("input:{name}");
        let len = current[j].numel();
        let mut summary = BlockSummary {
            block: block.clone(),
            checked: 0,
            max_rel_err: 0.0,
        };
        for i in sample_indices(len, config.max_entries) {
            let orig = current[j].data()[i];
            let mut at = |delta: f64| {
                current[j].data_mut()[i] = orig + delta;
                let v = eval(store, &current);
                current[j].data_mut()[i] = orig;
                v
            };
            let numeric = central_difference(&mut at, h, config.five_point, config.floor)?;
            let analytic = input_grads[j].as_ref().map_or(0.0, |g| g.data()[i]);
            record(&block, i, analytic, numeric, &mut summary);
        }
        blocks.push(summary);
    }

    Ok(GradCheckReport {
        blocks,
        worst,
        tolerance: config.tolerance,
    })
}
