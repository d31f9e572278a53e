use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::student::{bind_base, bind_motion, student_eps, BaseVars, MotionVars};
use super::{cond_indices, BaseParams, Condition, MotionParams, NetDims, BASE_PREFIX, MOTION_PREFIX};
use crate::autodiff::{Tape, Var};
use crate::clip::ClipBatch;
use crate::datagen::ClipDataset;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, tag, Rng};
use crate::schedule::{add_noise_batch, NoiseSchedule};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last iteration as a fraction of `lr`; the rate
    /// decays along a half cosine.
    pub final_lr_fraction: f64,
    /// Probability of replacing a condition with the null token.
    pub cond_dropout: f64,
    /// Clips in the fixed held-out batch used for the start/end loss.
    pub eval_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 64,
            lr: 3e-3,
            final_lr_fraction: 0.05,
            cond_dropout: 0.1,
            eval_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Held-out loss before the first update.
    pub initial_loss: f64,
    /// Held-out loss after the last update.
    pub final_loss: f64,
    /// Training loss per iteration.
    pub losses: Vec<f64>,
}

/// Noised inputs for one denoising-loss evaluation.
#[derive(Clone, Debug)]
pub struct DenoisingBatch {
    pub x_t: ClipBatch,
    pub eps: ClipBatch,
    pub ts: Vec<i64>,
    pub conds: Vec<usize>,
}

impl DenoisingBatch {
    pub fn draw(
        ds: &ClipDataset,
        size: usize,
        dropout: f64,
        dims: &NetDims,
        sched: &NoiseSchedule,
        r: &mut Rng,
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..size).map(|_| r.gen_range(0..ds.len())).collect();
        let (x0, conds) = ds.batch(&idx)?;
        let conds: Vec<Condition> = conds
            .into_iter()
            .map(|c| if r.gen::<f64>() < dropout { Condition::Null } else { c })
            .collect();
        let ts: Vec<i64> = (0..size)
            .map(|_| r.gen_range(0..sched.num_timesteps() as i64))
            .collect();
        let n = x0.values().rows() * x0.dim();
        let eps = ClipBatch::from_matrix(
            x0.frames(),
            Matrix::from_vec(x0.values().rows(), x0.dim(), rng::normals(r, n))?,
        )?;
        let x_t = add_noise_batch(&x0, &eps, &ts, sched)?;
        Ok(Self {
            x_t,
            eps,
            ts,
            conds: cond_indices(&conds, dims.vocab)?,
        })
    }
}

/// Mean squared ε-prediction error over every element of the batch.
pub fn denoising_loss(
    tape: &mut Tape,
    base: &BaseVars,
    motion: Option<&MotionVars>,
    batch: &DenoisingBatch,
    dims: &NetDims,
) -> Result<Var> {
    let x = tape.constant(batch.x_t.values().clone());
    let eps_hat = student_eps(tape, base, motion, x, batch.x_t.frames(), &batch.ts, &batch.conds, dims)?;
    let target = tape.constant(batch.eps.values().clone());
    let diff = tape.sub(eps_hat, target);
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

enum Trainee<'a> {
    Base(&'a mut BaseParams),
    Motion {
        base: &'a BaseParams,
        motion: &'a mut MotionParams,
    },
}

fn loss_on(trainee: &Trainee<'_>, batch: &DenoisingBatch, dims: &NetDims, train: bool) -> Result<(f64, Option<crate::autodiff::Gradients>)> {
    let mut tape = Tape::new();
    let loss = match trainee {
        Trainee::Base(b) => {
            let bv = bind_base(&mut tape, &b.params, BASE_PREFIX, train)?;
            denoising_loss(&mut tape, &bv, None, batch, dims)?
        }
        Trainee::Motion { base, motion } => {
            let bv = bind_base(&mut tape, &base.params, BASE_PREFIX, false)?;
            let mv = bind_motion(&mut tape, &motion.params, MOTION_PREFIX, train)?;
            denoising_loss(&mut tape, &bv, Some(&mv), batch, dims)?
        }
    };
    let value = tape.value(loss).get(0, 0);
    let grads = if train { Some(tape.backward(loss)?) } else { None };
    Ok((value, grads))
}

fn train_loop(
    mut trainee: Trainee<'_>,
    ds: &ClipDataset,
    cfg: &PretrainConfig,
    dims: &NetDims,
    sched: &NoiseSchedule,
    stream: &[u64],
    seed: u64,
) -> Result<PretrainReport> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mut eval_path = stream.to_vec();
    eval_path.push(u64::MAX);
    let eval = DenoisingBatch::draw(
        ds,
        cfg.eval_size.max(1),
        0.0,
        dims,
        sched,
        &mut rng::stream(seed, &eval_path),
    )?;
    let initial_loss = loss_on(&trainee, &eval, dims, false)?.0;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut path = stream.to_vec();
        path.push(it as u64);
        let mut r = rng::stream(seed, &path);
        let batch = DenoisingBatch::draw(ds, cfg.batch_size, cfg.cond_dropout, dims, sched, &mut r)?;
        let (loss, grads) = loss_on(&trainee, &batch, dims, true)?;
        opt.set_lr(cosine_lr(cfg.lr, cfg.final_lr_fraction, it, cfg.iterations));
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: 0,
                iteration: it,
                detail: "pretraining loss".into(),
                dump: None,
            });
        }
        let grads = grads.expect("train mode");
        match &mut trainee {
            Trainee::Base(b) => opt.update(&mut b.params, &grads)?,
            Trainee::Motion { motion, .. } => opt.update(&mut motion.params, &grads)?,
        }
        losses.push(loss);
        if it % 250 == 0 {
            log::debug!("pretrain iteration {it}: loss {loss:.5}");
        }
    }
    let final_loss = loss_on(&trainee, &eval, dims, false)?.0;
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        losses,
    })
}

/// Half-cosine decay from `lr` to `lr·final_fraction` over `total` steps.
pub fn cosine_lr(lr: f64, final_fraction: f64, it: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let p = it as f64 / (total - 1) as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    lr * (final_fraction + (1.0 - final_fraction) * w)
}

/// Train a per-frame base denoiser on `ds`, starting from `init` if given.
pub fn pretrain_base(
    ds: &ClipDataset,
    style_id: usize,
    init: Option<&BaseParams>,
    cfg: &PretrainConfig,
    dims: &NetDims,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(BaseParams, PretrainReport)> {
    let mut base = match init {
        Some(b) => {
            b.validate(dims)?;
            BaseParams {
                style_id,
                params: b.params.clone(),
            }
        }
        None => BaseParams::init(
            style_id,
            dims,
            &mut rng::stream(seed, &[tag::INIT, tag::PRETRAIN_BASE, style_id as u64]),
        ),
    };
    let report = train_loop(
        Trainee::Base(&mut base),
        ds,
        cfg,
        dims,
        sched,
        &[tag::PRETRAIN_BASE, style_id as u64],
        seed,
    )?;
    Ok((base, report))
}

/// Train only the motion module on top of a frozen base.
pub fn pretrain_motion(
    base: &BaseParams,
    ds: &ClipDataset,
    init: Option<&MotionParams>,
    cfg: &PretrainConfig,
    dims: &NetDims,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(MotionParams, PretrainReport)> {
    base.validate(dims)?;
    let mut motion = match init {
        Some(m) => {
            m.validate(dims)?;
            m.clone()
        }
        None => MotionParams::zero_residual(
            dims,
            &mut rng::stream(seed, &[tag::INIT, tag::PRETRAIN_MOTION]),
        ),
    };
    let report = train_loop(
        Trainee::Motion {
            base,
            motion: &mut motion,
        },
        ds,
        cfg,
        dims,
        sched,
        &[tag::PRETRAIN_MOTION],
        seed,
    )?;
    Ok((motion, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_ground_truth, StyleGroup, StyleSpec};
    use crate::tensor::params_bit_identical;

    fn small() -> (NetDims, NoiseSchedule, ClipDataset) {
        let dims = NetDims {
            hidden: 8,
            frames: 4,
            time_dim: 4,
            ..NetDims::default()
        };
        let sched = NoiseSchedule::linear(64, 0.00085, 0.012).unwrap();
        let style = StyleSpec::mixture(0, "d", StyleGroup::Default, [1.0, 1.0], 0.0, 0.8);
        let ds = sample_ground_truth(&style, 64, 4, 2, 8, 1).unwrap();
        (dims, sched, ds)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (dims, sched, ds) = small();
        let cfg = PretrainConfig {
            iterations: 3,
            batch_size: 8,
            lr: 0.0,
            eval_size: 8,
            ..PretrainConfig::default()
        };
        let init = BaseParams::init(0, &dims, &mut rng::stream(1, &[]));
        let (b, _) = pretrain_base(&ds, 0, Some(&init), &cfg, &dims, &sched, 2).unwrap();
        assert!(params_bit_identical(&b.params, &init.params));
        let (m, _) = pretrain_motion(&b, &ds, None, &cfg, &dims, &sched, 2).unwrap();
        let m0 = MotionParams::zero_residual(&dims, &mut rng::stream(2, &[tag::INIT, tag::PRETRAIN_MOTION]));
        assert!(params_bit_identical(&m.params, &m0.params));
    }

    #[test]
    fn empty_dataset_rejected() {
        let (dims, sched, mut ds) = small();
        ds.clips.clear();
        ds.conditions.clear();
        let cfg = PretrainConfig::default();
        assert!(matches!(
            pretrain_base(&ds, 0, None, &cfg, &dims, &sched, 1),
            Err(Error::Dataset(_))
        ));
    }
}
