//! Soft-IoU loss, AdamW, polynomial decay and the training loop.

use irdet_tensor::{Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::net::Model;
use crate::params::{ParamId, ParamStore, Session};

pub const SOFT_IOU_SMOOTH: f64 = 1.0;

/// `1 − (Σp·y + s)/(Σp + Σy − Σp·y + s)` with `p = sigmoid(logits)`.
pub fn soft_iou_loss<'t, T: Real>(logits: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if logits.shape() != target.shape() {
        return Err(invalid(
            "soft_iou_loss",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let s = T::of(SOFT_IOU_SMOOTH);
    let p = logits.sigmoid();
    let inter = p.mul(target)?.sum_all();
    let union = p.sum_all().add(target.sum_all())?.sub(inter)?;
    let ratio = inter.add_scalar(s).div(union.add_scalar(s))?;
    Ok(ratio.scalar_mul(-T::one()).add_scalar(T::one()))
}

/// Mean Soft-IoU over all heads.
pub fn multi_head_loss<'t, T: Real>(heads: &[Var<'t, T>], target: Var<'t, T>) -> Result<Var<'t, T>> {
    let mut total = soft_iou_loss(heads[0], target)?;
    for &h in &heads[1..] {
        total = total.add(soft_iou_loss(h, target)?)?;
    }
    Ok(total.scalar_mul(T::one() / T::of(heads.len() as f64)))
}

pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base_lr;
    }
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    base_lr * (1.0 - frac).powf(power)
}

#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Indexed by parameter id.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let lr_t = T::of(lr);
        let shrink = one - T::of(lr * self.weight_decay);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let p = store.get_mut(*id);
            let data = p.data_mut();
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for i in 0..data.len() {
                let gi = g.data()[i];
                data[i] = data[i] * shrink;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub resolution: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub power: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 1e-4,
            batch: 4,
            resolution: 512,
            seed: 0,
            weight_decay: 1e-2,
            power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Global optimizer step, counting any resumed steps.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{:e},{}\n", s.step, s.epoch, s.lr, s.loss));
        }
        out
    }
}

/// Forward, mean head loss, backward and AdamW on one batch. Returns the loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    images: Tensor<T>,
    masks: Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let tape = Tape::new();
        let s = Session::training(&tape, model.store());
        let out = model.forward(&s, tape.constant(images))?;
        let loss = multi_head_loss(&out.logits, tape.constant(masks))?;
        let mut g = tape.backward(loss)?;
        (loss.value().item().as_f64(), s.gradients(&mut g), s.take_stat_updates())
    };
    opt.step(model.store_mut(), &grads, lr);
    model.store_mut().apply_stat_updates(stats);
    Ok(loss)
}

/// Trains for `hp.epochs` epochs over shuffled mini-batches. The learning
/// rate decays polynomially over this run's steps, continuing from
/// `opt.step` when resuming.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    hp: &TrainParams,
    opt: &mut AdamW<T>,
) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(invalid("train", "dataset is empty"));
    }
    if hp.resolution == 0 || !hp.resolution.is_multiple_of(16) {
        return Err(invalid(
            "train",
            format!("resolution {} is not a positive multiple of 16", hp.resolution),
        ));
    }
    let (h, w) = data.size()?;
    if (h, w) != (hp.resolution, hp.resolution) {
        return Err(invalid(
            "train",
            format!("resolution {} does not match dataset frames {h}×{w}", hp.resolution),
        ));
    }
    if hp.batch == 0 {
        return Err(invalid("train", "batch size is zero"));
    }
    let per_epoch = data.len().div_ceil(hp.batch);
    let start = opt.step;
    let max_iter = start as usize + hp.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(start);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(hp.batch) {
            let lr = poly_lr(hp.lr, opt.step as usize, max_iter, hp.power);
            let (images, masks) = data.batch::<T>(chunk)?;
            let loss = train_step(model, opt, images, masks, lr)?;
            total += loss;
            trace.steps.push(StepRecord {
                step: opt.step,
                epoch,
                lr,
                loss,
            });
        }
        trace.epoch_losses.push(total / per_epoch as f64);
    }
    Ok(trace)
}
