//! Named gradient-check suites: tape gradients of each block against
//! central finite differences, all in f64.

use std::collections::HashMap;

use irdet_tensor::{
    batch_norm, bilinear_upsample2, central_difference_conv2d, conv2d, fd_gradient, fd_partial, max_pool2,
    relative_error, ConvGeometry, RunningStats, Tape, Tensor, Var,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ddc::{DdcBlock, DdcBranches};
use crate::error::Result;
use crate::lsff::LsffBlock;
use crate::net::{Model, NetConfig};
use crate::params::{ParamBuilder, ParamId, ParamStore, Session};
use crate::registry::Registry;
use crate::serank::SeRankBlock;
use crate::train::{multi_head_loss, soft_iou_loss};

pub const LEAF_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const NET_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// The whole network has thousands of relu, pooling and selection switch
/// points; a smaller step keeps the differences from straddling them.
const NET_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

pub type SuiteFn = fn(u64) -> Result<Vec<CheckResult>>;

pub fn gradient_suites() -> Registry<SuiteFn> {
    let mut r: Registry<SuiteFn> = Registry::new("gradient suite");
    r.register("ops", ops_suite);
    r.register("ddc", ddc_suite);
    r.register("serank", serank_suite);
    r.register("lsff", lsff_suite);
    r.register("net", net_suite);
    r
}

/// Runs one suite, or every suite for `all`.
pub fn run_gradcheck(name: &str, seed: u64) -> Result<Vec<CheckResult>> {
    let suites = gradient_suites();
    if name == "all" {
        let mut out = Vec::new();
        for n in suites.names() {
            out.extend(suites.get(n)?(seed)?);
        }
        return Ok(out);
    }
    suites.get(name)?(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Finite-difference error where any non-finite value counts as a failure.
fn compare(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.iter().chain(numeric).all(|v| v.is_finite()) {
        relative_error(analytic, numeric)
    } else {
        f64::INFINITY
    }
}

/// What to compare besides the input gradient.
enum Params {
    /// Every parameter tensor, one result each.
    All,
    /// This many randomly chosen scalars, one combined result.
    Sample(usize),
}

/// Checks `Σ forward(x) ⊙ probe` for a random probe, differentiating with
/// respect to `x` (when `check_input`) and the store's parameters.
#[allow(clippy::too_many_arguments)]
fn check<F>(
    suite: &'static str,
    label: &str,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    check_input: bool,
    params: Params,
    tolerance: f64,
    step: f64,
    rng: &mut ChaCha8Rng,
    forward: F,
) -> Result<Vec<CheckResult>>
where
    F: for<'t> Fn(&Session<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let s = Session::training(&tape, store);
    let xv = tape.leaf(x.clone());
    let out = forward(&s, xv)?;
    let probe = random(&out.shape(), rng);
    let loss = out.mul(tape.constant(probe.clone()))?.sum_all();
    let mut grads = tape.backward(loss)?;
    let gx = grads.get(xv);
    let pgrads: HashMap<ParamId, Tensor<f64>> = s.gradients(&mut grads).into_iter().collect();

    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let s = Session::new(&tape, store, true, false);
        match forward(&s, tape.constant(x.clone())) {
            Ok(out) => out.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };

    let mut results = Vec::new();
    let result = |name: String, rel_error: f64| CheckResult {
        suite,
        name,
        rel_error,
        tolerance,
    };
    if check_input {
        let numeric = fd_gradient(|x| eval(store, x), x, step);
        results.push(result(format!("{label}: input"), compare(gx.data(), numeric.data())));
    }

    let trainable: Vec<ParamId> = store.trainable().collect();
    let numeric_partial = |id: ParamId, index: usize| -> f64 {
        let mut local = store.clone();
        let mut value = store.get(id).clone();
        fd_partial(
            |v| {
                local.set(id, v.clone()).expect("same shape");
                eval(&local, x)
            },
            &mut value,
            index,
            step,
        )
    };
    let analytic = |id: ParamId| pgrads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
    match params {
        Params::All => {
            for id in trainable {
                let a = analytic(id);
                let n: Vec<f64> = (0..a.numel()).map(|i| numeric_partial(id, i)).collect();
                results.push(result(format!("{label}: {}", store.name(id)), compare(a.data(), &n)));
            }
        }
        Params::Sample(count) => {
            let flat: Vec<(ParamId, usize)> = trainable
                .iter()
                .flat_map(|&id| (0..store.get(id).numel()).map(move |i| (id, i)))
                .collect();
            let picks = sample(rng, flat.len(), count.min(flat.len()));
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for p in picks {
                let (id, i) = flat[p];
                a.push(analytic(id).data()[i]);
                n.push(numeric_partial(id, i));
            }
            results.push(result(format!("{label}: {} sampled parameters", a.len()), compare(&a, &n)));
        }
    }
    Ok(results)
}

/// Leaf kernels, each with input and weight gradients.
fn ops_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = store.insert("weight", random(&[3, 2, 3, 3], &mut rng), true)?;
    let b = store.insert("bias", random(&[3], &mut rng), true)?;
    let gamma = store.insert("gamma", random(&[2], &mut rng).map(|v| v + 1.5), true)?;
    let beta = store.insert("beta", random(&[2], &mut rng), true)?;
    let x = random(&[2, 2, 6, 6], &mut rng);
    let mut out = Vec::new();

    for geom in [ConvGeometry::same(3, 1), ConvGeometry { stride: 2, padding: 2, dilation: 2 }] {
        let only_conv = only(&store, &[w, b]);
        out.extend(check("ops", &format!("conv2d {geom:?}"), &only_conv, &x, true, Params::All, LEAF_TOLERANCE, STEP, &mut rng, |s, x| {
            Ok(conv2d(x, s.param(w), Some(s.param(b)), geom)?)
        })?);
    }
    let only_conv = only(&store, &[w, b]);
    out.extend(check("ops", "central difference conv", &only_conv, &x, true, Params::All, LEAF_TOLERANCE, STEP, &mut rng, |s, x| {
        Ok(central_difference_conv2d(x, s.param(w), Some(s.param(b)), ConvGeometry::same(3, 1))?)
    })?);
    let empty = only(&store, &[]);
    out.extend(check("ops", "max_pool2", &empty, &x, true, Params::All, LEAF_TOLERANCE, STEP, &mut rng, |_, x| {
        Ok(max_pool2(x)?)
    })?);
    out.extend(check("ops", "bilinear_upsample2", &empty, &x, true, Params::All, LEAF_TOLERANCE, STEP, &mut rng, |_, x| {
        Ok(bilinear_upsample2(x)?)
    })?);
    let only_norm = only(&store, &[gamma, beta]);
    for training in [true, false] {
        let running = RunningStats {
            mean: random(&[2], &mut rng),
            var: random(&[2], &mut rng).map(|v| v.abs() + 0.5),
        };
        out.extend(check("ops", &format!("batch_norm training={training}"), &only_norm, &x, true, Params::All, LEAF_TOLERANCE, STEP, &mut rng, move |s, x| {
            Ok(batch_norm(x, s.param(gamma), s.param(beta), &running, training, 1e-5)?.0)
        })?);
    }
    let target = Tensor::from_fn(x.shape(), |i| if i % 7 == 0 { 1.0 } else { 0.0 });
    out.extend(check("ops", "soft_iou_loss", &empty, &x.map(|v| 3.0 * v), true, Params::All, 1e-6, STEP, &mut rng, move |s, x| {
        soft_iou_loss(x, s.tape().constant(target.clone()))
    })?);
    Ok(out)
}

/// Store holding only the given entries of `store`, with the same ids.
fn only(store: &ParamStore<f64>, keep: &[ParamId]) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for id in store.ids() {
        out.insert(store.name(id), store.get(id).clone(), keep.contains(&id))
            .expect("unique names");
    }
    out
}

/// Moves norm parameters away from their initial values so the check does
/// not sit on a special point.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.trainable().collect();
    for id in ids {
        let mut t = store.get(id).clone();
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        store.set(id, t).expect("same shape");
    }
}

fn ddc_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = DdcBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 2, 3, [2, 4, 2], DdcBranches::FULL)?;
    jitter(&mut store, &mut rng);
    let x = random(&[2, 2, 9, 9], &mut rng);
    check("ddc", "ddc block", &store, &x, true, Params::All, BLOCK_TOLERANCE, STEP, &mut rng, |s, x| block.forward(s, x))
}

fn serank_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for positional in [true, false] {
        let mut store = ParamStore::new();
        // C = 6, o = 0, stage 1 gives K = 4 out of 30 positions.
        let block = SeRankBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 6, 0, 1, positional)?;
        let x = random(&[2, 6, 5, 6], &mut rng);
        let label = if positional { "serank" } else { "serank without positions" };
        out.extend(check("serank", label, &store, &x, true, Params::All, BLOCK_TOLERANCE, STEP, &mut rng, |s, x| {
            block.forward(s, x)
        })?);
    }
    // Fewer positions than K: the projections are truncated.
    let mut store = ParamStore::new();
    let block = SeRankBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 4, 3, 1, true)?;
    let x = random(&[1, 4, 2, 3], &mut rng);
    out.extend(check("serank", "serank with clamped K", &store, &x, true, Params::All, BLOCK_TOLERANCE, STEP, &mut rng, |s, x| {
        block.forward(s, x)
    })?);
    Ok(out)
}

fn lsff_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = LsffBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 7)?;
    // Encoder and decoder features stacked along channels.
    let x = random(&[2, 6, 8, 8], &mut rng);
    check("lsff", "lsff", &store, &x, true, Params::All, BLOCK_TOLERANCE, STEP, &mut rng, |s, x| {
        block.forward(s, x.slice(1, 0, 3)?, x.slice(1, 3, 6)?)
    })
}

/// Micro network, 32×32 input, deep-supervision loss.
fn net_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::build(NetConfig::with_channels(&[4, 8, 16, 32, 64]), seed)?;
    let x = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.random_range(0.0..1.0));
    let target = Tensor::from_fn(&[2, 1, 32, 32], |_| if rng.random_bool(0.05) { 1.0 } else { 0.0 });
    check("net", "micro network", model.store(), &x, false, Params::Sample(50), NET_TOLERANCE, NET_STEP, &mut rng, |s, x| {
        let out = model.forward(s, x)?;
        multi_head_loss(&out.logits, s.tape().constant(target.clone()))
    })
}
