//! Finite-difference checks for every differentiable op and the composed model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anar::{AnarConfig, AnarModule, AnarVariant};
use crate::backbones::{BackboneKind, BackboneSpec};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::layers::{Ctx, Mode};
use crate::mfbn::Mfbn;
use crate::params::{Init, ParamStore};
use crate::r2dns::{R2dnsConfig, R2dnsModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSED_TOLERANCE: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

fn op_config() -> GradCheckConfig {
    GradCheckConfig {
        tolerance: OP_TOLERANCE,
        ..GradCheckConfig::default()
    }
}

/// Checks `f` projected onto a fixed random direction.
fn check_op<F>(
    seed: u64,
    store: &mut ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    out_dims: [usize; 4],
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = random(&mut rng, out_dims, -1.0, 1.0);
    let named: Vec<(String, Tensor<f64>)> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("x{i}"), t))
        .collect();
    check_gradients(
        store,
        &named,
        |tape, store, vars| {
            let y = f(tape, store, vars)?;
            tape.dot_const(y, proj.clone())
        },
        &op_config(),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_case(seed: u64, ci: usize, co: usize, k: usize, s: usize, p: usize, bias: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new(seed);
    let w = store.add_param("w", [co, ci, k, k], Init::Kaiming { fan_in: ci * k * k })?;
    let b = if bias {
        Some(store.add_param("b", [1, co, 1, 1], Init::Constant(0.1))?)
    } else {
        None
    };
    let x = random(&mut rng, [2, ci, 6, 5], -1.0, 1.0);
    let oh = (6 + 2 * p - k) / s + 1;
    let ow = (5 + 2 * p - k) / s + 1;
    check_op(seed, &mut store, vec![x], [2, co, oh, ow], |tape, st, v| {
        let wv = tape.param(st, w);
        let bv = b.map(|b| tape.param(st, b));
        tape.conv2d(v[0], wv, bv, s, p)
    })
}

/// One report per op configuration at [`OP_TOLERANCE`], followed by the
/// attention modules (composites) at [`COMPOSED_TOLERANCE`].
pub fn op_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    for (seed, (ci, co, k, s, p, bias)) in [
        (3, 4, 3, 1, 1, true),
        (2, 3, 3, 2, 1, false),
        (4, 2, 1, 1, 0, true),
        (3, 2, 1, 2, 0, true),
    ]
    .into_iter()
    .enumerate()
    {
        out.push((format!("conv2d k{k} s{s} p{p}"), conv_case(seed as u64 + 1, ci, co, k, s, p, bias)?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new(5);
    let w = store.add_param("w", [3, 2, 4, 4], Init::Kaiming { fan_in: 12 })?;
    let b = store.add_param("b", [1, 2, 1, 1], Init::Constant(-0.2))?;
    let x = random(&mut rng, [2, 3, 3, 2], -1.0, 1.0);
    out.push((
        "deconv2d k4 s2 p1".into(),
        check_op(5, &mut store, vec![x], [2, 2, 6, 4], |tape, st, v| {
            let (wv, bv) = (tape.param(st, w), tape.param(st, b));
            tape.deconv2d(v[0], wv, Some(bv), 2, 1)
        })?,
    ));

    let mut none = ParamStore::<f64>::new(0);
    let d = [2, 3, 4, 4];
    let a = random(&mut rng, d, -1.0, 1.0);
    let b2 = random(&mut rng, d, -1.0, 1.0);
    out.push(("relu".into(), check_op(6, &mut none, vec![a.clone()], d, |t, _, v| Ok(t.relu(v[0])))?));
    out.push(("sigmoid".into(), check_op(7, &mut none, vec![a.clone()], d, |t, _, v| Ok(t.sigmoid(v[0])))?));
    out.push(("add".into(), check_op(8, &mut none, vec![a.clone(), b2], d, |t, _, v| t.add(v[0], v[1]))?));
    out.push(("scale".into(), check_op(9, &mut none, vec![a.clone()], d, |t, _, v| Ok(t.scale(v[0], -1.7)))?));
    let attn = random(&mut rng, [2, 1, 4, 4], 0.0, 1.0);
    out.push((
        "junction".into(),
        check_op(10, &mut none, vec![a.clone(), attn], d, |t, _, v| t.junction(v[0], v[1], 0.5))?,
    ));

    let x = random(&mut rng, [2, 3, 4, 6], -1.0, 1.0);
    out.push(("avg_pool2".into(), check_op(12, &mut none, vec![x.clone()], [2, 3, 2, 3], |t, _, v| t.avg_pool2(v[0]))?));
    out.push(("max_pool2".into(), check_op(13, &mut none, vec![x.clone()], [2, 3, 2, 3], |t, _, v| t.max_pool2(v[0]))?));
    out.push((
        "upsample2".into(),
        check_op(14, &mut none, vec![x.clone()], [2, 3, 8, 12], |t, _, v| Ok(t.upsample2(v[0])))?,
    ));
    out.push((
        "global_avg_pool".into(),
        check_op(15, &mut none, vec![x], [2, 3, 1, 1], |t, _, v| Ok(t.global_avg_pool(v[0])))?,
    ));

    let mut store = ParamStore::<f64>::new(16);
    let w = store.add_param("fc.weight", [5, 7, 1, 1], Init::Kaiming { fan_in: 7 })?;
    let b = store.add_param("fc.bias", [1, 5, 1, 1], Init::Constant(0.3))?;
    let x = random(&mut rng, [3, 7, 1, 1], -1.0, 1.0);
    out.push((
        "linear".into(),
        check_op(16, &mut store, vec![x.clone()], [3, 5, 1, 1], |t, st, v| {
            let (wv, bv) = (t.param(st, w), t.param(st, b));
            t.linear(v[0], wv, bv)
        })?,
    ));
    let y = random(&mut rng, [3, 2, 1, 1], -1.0, 1.0);
    out.push((
        "concat_channels".into(),
        check_op(17, &mut none, vec![x, y], [3, 9, 1, 1], |t, _, v| t.concat_channels(&[v[0], v[1]]))?,
    ));
    let logits = random(&mut rng, [4, 5, 1, 1], -2.0, 2.0);
    out.push((
        "softmax_cross_entropy".into(),
        check_gradients(
            &mut none,
            &[("logits".into(), logits)],
            |t, _, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]),
            &op_config(),
        )?,
    ));

    let mut store = ParamStore::<f64>::new(18);
    let layer = Mfbn::new(&mut store, "bn", 3, 2)?;
    let gamma = store.find_param("bn.gamma").expect("gamma registered");
    let alpha = store.find_param("bn.alpha").expect("alpha registered");
    store.param_mut(gamma).value = Tensor::new([1, 3, 1, 1], vec![0.7, 1.3, -0.4])?;
    store.param_mut(alpha).value = Tensor::new([1, 3, 1, 1], vec![0.1, -0.2, 0.5])?;
    let x = random(&mut rng, [3, 3, 3, 2], -1.0, 2.0);
    for (flow, mode) in [(0, Mode::Train), (1, Mode::Train), (1, Mode::Eval)] {
        let r = check_op(19, &mut store, vec![x.clone()], [3, 3, 3, 2], |tape, st, v| {
            let mut ctx = Ctx {
                tape,
                store: st,
                mode,
                update_stats: false,
            };
            layer.forward(&mut ctx, v[0], flow)
        })?;
        out.push((format!("mfbn flow{flow} {mode:?}"), r));
    }

    for variant in [AnarVariant::Three, AnarVariant::Five, AnarVariant::Seven] {
        let mut store = ParamStore::<f64>::new(20);
        let m = AnarModule::build(&mut store, "attn", AnarConfig::new(variant, 32), 2)?;
        let x = random(&mut rng, [2, 32, 4, 4], 0.0, 1.0);
        let mut rng_p = ChaCha8Rng::seed_from_u64(21);
        let proj = random(&mut rng_p, [2, 1, 8, 8], -1.0, 1.0);
        let config = GradCheckConfig {
            tolerance: COMPOSED_TOLERANCE,
            ..GradCheckConfig::default()
        };
        let r = check_gradients(
            &mut store,
            &[("x0".into(), x)],
            |tape, st, v| {
                let mut ctx = Ctx {
                    tape,
                    store: st,
                    mode: Mode::Train,
                    update_stats: false,
                };
                let y = m.forward(&mut ctx, v[0], 1)?;
                ctx.tape.dot_const(y, proj.clone())
            },
            &config,
        )?;
        out.push((variant.to_string(), r));
    }
    Ok(out)
}

/// Full model with `L = 2`, `N = 2`, 32 channels and ANAR-3 on 8×8 inputs;
/// cross-entropy loss, train-mode normalization without statistic updates.
pub fn composed_check(kind: BackboneKind, seed: u64) -> Result<GradCheckReport> {
    let mut spec = BackboneSpec::new(kind, 2, 4).with_channels(&[32, 32]);
    spec.input_size = 8;
    let cfg = R2dnsConfig::new(spec, 2, AnarVariant::Three);
    let mut model = R2dnsModel::<f64>::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let x = random(&mut rng, [4, 3, 8, 8], -1.0, 1.0);
    let labels = [0usize, 1, 2, 3];
    let mut store = std::mem::replace(&mut model.store, ParamStore::new(0));
    let config = GradCheckConfig {
        tolerance: COMPOSED_TOLERANCE,
        max_entries: 12,
        ..GradCheckConfig::default()
    };
    check_gradients(
        &mut store,
        &[("image".into(), x)],
        |tape, st, v| {
            std::mem::swap(&mut model.store, st);
            let out = model.forward_opts(tape, v[0], Mode::Train, false);
            std::mem::swap(&mut model.store, st);
            tape.softmax_cross_entropy(out?.logits, &labels)
        },
        &config,
    )
}
