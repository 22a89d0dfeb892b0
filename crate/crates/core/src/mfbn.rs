//! Multi-flow batch normalization: one affine pair shared by every flow,
//! separate batch/running statistics per flow.

use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode};
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Mfbn {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub alpha: ParamId,
    running_mean: Vec<BufferId>,
    running_var: Vec<BufferId>,
    pub momentum: f64,
    pub eps: f64,
}

impl Mfbn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        num_flows: usize,
    ) -> Result<Self> {
        if num_flows == 0 {
            return Err(Error::Config(format!("{name}: at least one flow required")));
        }
        let gamma = store.add_param(&format!("{name}.gamma"), [1, channels, 1, 1], Init::Constant(1.0))?;
        let alpha = store.add_param(&format!("{name}.alpha"), [1, channels, 1, 1], Init::Constant(0.0))?;
        let mut running_mean = Vec::with_capacity(num_flows);
        let mut running_var = Vec::with_capacity(num_flows);
        for k in 0..num_flows {
            running_mean.push(store.add_buffer(
                &format!("{name}.running_mean.flow{k}"),
                Tensor::zeros([1, channels, 1, 1]),
            )?);
            running_var.push(store.add_buffer(
                &format!("{name}.running_var.flow{k}"),
                Tensor::full([1, channels, 1, 1], T::one()),
            )?);
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma,
            alpha,
            running_mean,
            running_var,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        })
    }

    pub fn num_flows(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean<'s, T: Scalar>(&self, store: &'s ParamStore<T>, flow: usize) -> &'s Tensor<T> {
        store.buffer(self.running_mean[flow])
    }

    pub fn running_var<'s, T: Scalar>(&self, store: &'s ParamStore<T>, flow: usize) -> &'s Tensor<T> {
        store.buffer(self.running_var[flow])
    }

    /// Normalizes `x` as flow `flow`. Train mode uses batch statistics and
    /// (if `ctx.update_stats`) folds them into this flow's running estimates;
    /// eval mode uses this flow's running estimates.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, flow: usize) -> Result<Var> {
        if flow >= self.num_flows() {
            return Err(Error::FlowOutOfRange {
                flow,
                num_flows: self.num_flows(),
            });
        }
        let gamma = ctx.param(self.gamma);
        let alpha = ctx.param(self.alpha);
        let eps = T::from_f64_lossy(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.normalize(x, gamma, alpha, None, eps)?;
                let stats = stats.expect("batch statistics computed in train mode");
                if ctx.update_stats {
                    let m = T::from_f64_lossy(self.momentum);
                    let keep = T::one() - m;
                    let count = T::from_usize(stats.count).unwrap();
                    let unbias = count / (count - T::one());
                    let mean = ctx.store.buffer_mut(self.running_mean[flow]);
                    for (r, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * b;
                    }
                    let var = ctx.store.buffer_mut(self.running_var[flow]);
                    for (r, &b) in var.data_mut().iter_mut().zip(&stats.var) {
                        *r = keep * *r + m * b * unbias;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.buffer(self.running_mean[flow]).data().to_vec();
                let var = ctx.store.buffer(self.running_var[flow]).data().to_vec();
                let (y, _) = ctx.tape.normalize(x, gamma, alpha, Some((&mean, &var)), eps)?;
                Ok(y)
            }
        }
    }

    /// Running mean ← 0, running variance ← 1 for every flow.
    pub fn reset_stats<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for (&m, &v) in self.running_mean.iter().zip(&self.running_var) {
            store.buffer_mut(m).data_mut().fill(T::zero());
            store.buffer_mut(v).data_mut().fill(T::one());
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn layer(c: usize, flows: usize) -> (ParamStore<f64>, Mfbn) {
        let mut s = ParamStore::new(0);
        let l = Mfbn::new(&mut s, "bn", c, flows).unwrap();
        (s, l)
    }

    fn run(store: &mut ParamStore<f64>, l: &Mfbn, x: Tensor<f64>, flow: usize, mode: Mode) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, mode);
        let xv = ctx.tape.constant(x);
        let y = l.forward(&mut ctx, xv, flow)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn constant_input_maps_to_shift() {
        let (mut s, l) = layer(2, 1);
        s.params_mut()[1].value = Tensor::new([1, 2, 1, 1], vec![0.3, -0.7]).unwrap();
        let y = run(&mut s, &l, Tensor::full([2, 2, 3, 3], 4.0), 0, Mode::Train).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                assert_eq!(y.at(n, 0, h, 1), 0.3);
                assert_eq!(y.at(n, 1, h, 2), -0.7);
            }
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let (mut s, l) = layer(1, 1);
        let x = Tensor::new([1, 1, 2, 2], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = run(&mut s, &l, x.clone(), 0, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_out_of_range_rejected() {
        let (mut s, l) = layer(1, 2);
        let err = run(&mut s, &l, Tensor::zeros([2, 1, 2, 2]), 2, Mode::Train).unwrap_err();
        assert_eq!(err, Error::FlowOutOfRange { flow: 2, num_flows: 2 });
    }

    #[test]
    fn single_value_batch_rejected() {
        let (mut s, l) = layer(3, 1);
        assert!(run(&mut s, &l, Tensor::zeros([1, 3, 1, 1]), 0, Mode::Train).is_err());
        // eval mode is fine
        assert!(run(&mut s, &l, Tensor::zeros([1, 3, 1, 1]), 0, Mode::Eval).is_ok());
    }

    #[test]
    fn reset_then_eval_is_scaled_identity() {
        let (mut s, l) = layer(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn([3, 2, 2, 2], |_| rng.random_range(-2.0..2.0));
        run(&mut s, &l, x.clone(), 1, Mode::Train).unwrap();
        s.params_mut()[0].value = Tensor::new([1, 2, 1, 1], vec![2.0, 0.5]).unwrap();
        s.params_mut()[1].value = Tensor::new([1, 2, 1, 1], vec![0.1, 0.2]).unwrap();
        let (g, a) = (s.params()[0].value.clone(), s.params()[1].value.clone());
        l.reset_stats(&mut s);
        l.reset_stats(&mut s);
        assert_eq!(s.params()[0].value, g);
        assert_eq!(s.params()[1].value, a);
        let y = run(&mut s, &l, x.clone(), 1, Mode::Eval).unwrap();
        for i in 0..x.numel() {
            let c = (i / 4) % 2;
            let expect = x.data()[i] * g.data()[c] / (1.0f64 + 1e-5).sqrt() + a.data()[c];
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn flows_keep_separate_running_means() {
        let (mut s, l) = layer(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n0 = Normal::new(0.0, 1.0).unwrap();
        let n1 = Normal::new(5.0, 1.0).unwrap();
        for _ in 0..100 {
            let a = Tensor::from_fn([8, 3, 4, 4], |_| n0.sample(&mut rng));
            let b = Tensor::from_fn([8, 3, 4, 4], |_| n1.sample(&mut rng));
            run(&mut s, &l, a, 0, Mode::Train).unwrap();
            run(&mut s, &l, b, 1, Mode::Train).unwrap();
        }
        for c in 0..3 {
            assert!(l.running_mean(&s, 0).data()[c].abs() < 0.2);
            assert!((l.running_mean(&s, 1).data()[c] - 5.0).abs() < 0.2);
            assert!((l.running_var(&s, 1).data()[c] - 1.0).abs() < 0.3);
        }
    }

    #[test]
    fn other_flow_stats_do_not_affect_eval() {
        let (mut s, l) = layer(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for flow in 0..2 {
            let x = Tensor::from_fn([4, 2, 2, 2], |_| rng.random_range(-1.0..3.0));
            run(&mut s, &l, x, flow, Mode::Train).unwrap();
        }
        let probe = Tensor::from_fn([2, 2, 2, 2], |i| i as f64 * 0.1);
        let before = run(&mut s, &l, probe.clone(), 0, Mode::Eval).unwrap();
        let m1 = s.find_buffer("bn.running_mean.flow1").unwrap();
        let v1 = s.find_buffer("bn.running_var.flow1").unwrap();
        s.buffer_mut(m1).data_mut().fill(0.0);
        s.buffer_mut(v1).data_mut().fill(0.0);
        let after = run(&mut s, &l, probe, 0, Mode::Eval).unwrap();
        assert_eq!(before, after);
    }
}
