//! Scaled-IoU supervision, the soft-label cross-entropy loss and Adam.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::GroundingExample;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::model::Cbln;
use crate::params::{Mode, ParamGrads, ParameterStore, Session};
use crate::seeds::{self, Stream};
use crate::segment::Segment;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Discrete IoU of two inclusive frame intervals. An inverted candidate
/// scores 0; an inverted ground truth is rejected.
pub fn compute_iou(p: Segment, gt: Segment) -> Result<f64> {
    if !gt.is_valid() {
        return Err(Error::Data(format!("ground truth {gt} has start after end")));
    }
    if !p.is_valid() {
        return Ok(0.0);
    }
    let lo = p.start.max(gt.start);
    let hi = p.end.min(gt.end);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = p.len() + gt.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Unscaled `T×T` IoU map; cell `(s, e)` holds `IoU((s, e), gt)`.
pub fn iou_map(gt: Segment, t: usize) -> Result<Tensor> {
    if !gt.fits(t) {
        return Err(Error::Data(format!(
            "ground truth {gt} outside a video of {t} frames"
        )));
    }
    let mut data = vec![0.0; t * t];
    for s in 0..t {
        for e in s..t {
            data[s * t + e] = compute_iou(Segment::new(s, e), gt)?;
        }
    }
    Tensor::matrix(t, t, data)
}

/// Divides every entry by the maximum entry.
pub fn scale_by_max(raw: &Tensor) -> Result<Tensor> {
    let max = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Supervision(format!(
            "IoU map maximum is {max}, cannot scale"
        )));
    }
    Ok(raw.map(|v| v / max))
}

/// Soft targets for one ground truth: the IoU map scaled to a maximum of 1.
pub fn build_supervision(gt: Segment, t: usize) -> Result<Tensor> {
    scale_by_max(&iou_map(gt, t)?)
}

/// Row-major mask of the `s ≤ e` cells of a `T×T` map.
pub fn valid_cells(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i / t <= i % t).collect()
}

/// Mean binary cross entropy between the score map `m` and soft targets.
/// With `mask_invalid` the `s > e` cells are left out of the mean.
pub fn bce_loss(tape: &mut Tape, m: Var, targets: &Tensor, mask_invalid: bool, eps: f64) -> Result<Var> {
    let shape = tape.value(m).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("bce_loss", &shape, targets.shape()));
    }
    if mask_invalid {
        let mask = valid_cells(shape[0]);
        tape.bce(m, targets, Some(&mask), eps)
    } else {
        tape.bce(m, targets, None, eps)
    }
}

/// Loss node for one example.
pub fn example_loss(
    model: &Cbln,
    sess: &mut Session,
    ex: &GroundingExample,
    cfg: &TrainConfig,
) -> Result<Var> {
    let m = model.forward(sess, &ex.features, &ex.tokens)?;
    let targets = build_supervision(ex.gt, ex.frames())?;
    bce_loss(sess.tape, m, &targets, cfg.mask_invalid, cfg.log_eps)
}

/// Loss value and parameter gradients for one example.
pub fn example_gradients(
    model: &Cbln,
    store: &ParameterStore,
    ex: &GroundingExample,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, store, mode);
    let loss = example_loss(model, &mut sess, ex, cfg)?;
    let mut grads = sess.tape.backward(loss)?;
    let value = sess.tape.value(loss).data()[0];
    Ok((value, sess.param_grads(&mut grads)))
}

/// Finite-difference check of the full loss with respect to parameter `name`.
pub fn loss_gradcheck(
    model: &Cbln,
    store: &ParameterStore,
    ex: &GroundingExample,
    cfg: &TrainConfig,
    name: &str,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let x = store.get(name)?.clone();
    finite_diff_check(
        |tape, v| {
            let mut sess = Session::new(tape, store, Mode::Eval);
            sess.bind(name, v)?;
            example_loss(model, &mut sess, ex, cfg)
        },
        &x,
        h,
        tol,
    )
}

/// One bias-corrected Adam update of every parameter.
///
/// All gradients are validated before any parameter changes, so a rejected
/// step leaves the store untouched.
pub fn adam_step(store: &mut ParameterStore, grads: &ParamGrads, cfg: &TrainConfig) -> Result<()> {
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
        let p = store.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for name in &names {
        let g = grads[name].data();
        let p = store.parameter_mut(name).expect("validated above");
        let st = &mut p.adam;
        st.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(st.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(st.step as i32);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
            st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    /// Mean batch loss after each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean example loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainTrace {
    /// `step,loss` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }
}

/// Trains `store` in place for `cfg.epochs` epochs.
///
/// Each epoch visits the examples in an order drawn from `seed`; every
/// example in a batch gets its own dropout stream keyed by step and batch
/// position, so results do not depend on how the batch is scheduled.
/// `on_epoch` receives the epoch index and its mean loss.
pub fn train(
    model: &Cbln,
    store: &mut ParameterStore,
    data: &[GroundingExample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut trace = TrainTrace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeds::rng(seed, Stream::Shuffle, epoch as u64, 0));
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let shared: &ParameterStore = store;
            let results: Vec<Result<(f64, ParamGrads)>> = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let rng = seeds::rng(seed, Stream::Dropout, step, pos as u64);
                    example_gradients(model, shared, &data[i], cfg, Mode::Train { rng })
                })
                .collect();
            let mut total_loss = 0.0;
            let mut sum: Option<ParamGrads> = None;
            for r in results {
                let (loss, grads) = r?;
                total_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            acc.get_mut(&name).expect("same parameter set").add_assign(&g);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut mean = sum.expect("nonempty batch");
            for g in mean.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam_step(store, &mean, cfg)?;
            step += 1;
            epoch_total += total_loss;
            trace.step_losses.push(total_loss * inv);
        }
        let epoch_loss = epoch_total / data.len() as f64;
        trace.epoch_losses.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
    }
    Ok(trace)
}
