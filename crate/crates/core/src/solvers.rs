//! Deterministic samplers over ε-predictors.
//!
//! All solvers work on batches with one timestep per clip. Single-clip
//! wrappers exist for the common call shapes.

use serde::{Deserialize, Serialize};

use crate::clip::{Clip, ClipBatch};
use crate::error::{Error, Result};
use crate::nets::Condition;
use crate::rng;
use crate::schedule::{check_per_clip, NoiseSchedule, CLEAN};
use crate::tensor::Matrix;

/// Anything that predicts the noise component of `x_t`.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &ClipBatch, ts: &[i64], conds: &[Condition]) -> Result<ClipBatch>;
}

impl<P: EpsPredictor + ?Sized> EpsPredictor for &P {
    fn predict_eps(&self, x_t: &ClipBatch, ts: &[i64], conds: &[Condition]) -> Result<ClipBatch> {
        (**self).predict_eps(x_t, ts, conds)
    }
}

/// Exact ε-prediction for data with i.i.d. `N(μ, σ²)` coordinates.
///
/// `ε*(x_t, t) = √(1−ᾱ)·(x_t − √ᾱ·μ) / (ᾱ·σ² + 1 − ᾱ)`, independent of the
/// condition.
#[derive(Clone, Debug)]
pub struct AnalyticGaussian {
    pub mean: f64,
    pub var: f64,
    pub schedule: NoiseSchedule,
}

impl AnalyticGaussian {
    pub fn eps_star(&self, x: f64, t: i64) -> f64 {
        let a = self.schedule.alpha_bar(t);
        (1.0 - a).sqrt() * (x - a.sqrt() * self.mean) / (a * self.var + 1.0 - a)
    }
}

impl EpsPredictor for AnalyticGaussian {
    fn predict_eps(&self, x_t: &ClipBatch, ts: &[i64], conds: &[Condition]) -> Result<ClipBatch> {
        check_per_clip(x_t, ts)?;
        if conds.len() != ts.len() {
            return Err(Error::shape(
                format!("{} conditions", ts.len()),
                format!("{}", conds.len()),
            ));
        }
        let mut out = x_t.clone();
        for (i, &t) in ts.iter().enumerate() {
            self.schedule.check_timestep(t)?;
            for v in out.clip_slice_mut(i) {
                *v = self.eps_star(*v, t);
            }
        }
        Ok(out)
    }
}

/// `eps_uncond + w·(eps_cond − eps_uncond)`; exact at `w = 0` and `w = 1`.
pub fn cfg_combine(eps_cond: &Clip, eps_uncond: &Clip, w: f64) -> Result<Clip> {
    if eps_cond.frames() != eps_uncond.frames() || eps_cond.dim() != eps_uncond.dim() {
        return Err(Error::shape(
            format!("{}x{}", eps_cond.frames(), eps_cond.dim()),
            format!("{}x{}", eps_uncond.frames(), eps_uncond.dim()),
        ));
    }
    Ok(eps_cond.zip_map(eps_uncond, |c, u| cfg_value(c, u, w)))
}

fn cfg_value(c: f64, u: f64, w: f64) -> f64 {
    if w == 1.0 {
        c
    } else {
        u + w * (c - u)
    }
}

pub fn cfg_combine_batch(eps_cond: &ClipBatch, eps_uncond: &ClipBatch, w: f64) -> Result<ClipBatch> {
    eps_cond.check_same_layout(eps_uncond)?;
    Ok(eps_cond.zip_map(eps_uncond, |c, u| cfg_value(c, u, w)))
}

/// ε̂ with guidance: one batched pass over conditional and null inputs when
/// `w > 0`, a plain conditional pass otherwise.
pub fn guided_eps<P: EpsPredictor + ?Sized>(
    f: &P,
    x_t: &ClipBatch,
    ts: &[i64],
    conds: &[Condition],
    w: f64,
) -> Result<ClipBatch> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::InvalidArgument(format!("guidance scale must be finite and >= 0, got {w}")));
    }
    if w == 0.0 {
        return f.predict_eps(x_t, ts, conds);
    }
    let n = x_t.len();
    let mut stacked = x_t.values().data().to_vec();
    stacked.extend_from_slice(x_t.values().data());
    let stacked = ClipBatch::from_matrix(
        x_t.frames(),
        Matrix::from_vec(2 * x_t.values().rows(), x_t.dim(), stacked)?,
    )?;
    let mut ts2 = ts.to_vec();
    ts2.extend_from_slice(ts);
    let mut c2 = conds.to_vec();
    c2.extend(std::iter::repeat_n(Condition::Null, conds.len()));
    let both = f.predict_eps(&stacked, &ts2, &c2)?;
    let half = n * x_t.frames() * x_t.dim();
    let data = both.values().data();
    let cond = Matrix::from_vec(x_t.values().rows(), x_t.dim(), data[..half].to_vec())?;
    let uncond = Matrix::from_vec(x_t.values().rows(), x_t.dim(), data[half..].to_vec())?;
    cfg_combine_batch(
        &ClipBatch::from_matrix(x_t.frames(), cond)?,
        &ClipBatch::from_matrix(x_t.frames(), uncond)?,
        w,
    )
}

/// Per-step DDIM coefficients `(σ_t, 1/α_t, α_next, σ_next)`.
pub(crate) fn ddim_coeffs(t: i64, t_next: i64, sched: &NoiseSchedule) -> Result<[f64; 4]> {
    let (a, s) = sched.signal_noise(t);
    if a == 0.0 {
        return Err(Error::SingularConversion(t));
    }
    let (an, sn) = sched.signal_noise(t_next);
    Ok([s, 1.0 / a, an, sn])
}

/// Move from `x_t` to `x_{t_next}` along the predicted clean sample:
/// `x0̂ = (x_t − σ_t·ε̂)·(1/α_t)`, then `α_next·x0̂ + σ_next·ε̂`.
///
/// The distillation student reproduces exactly this arithmetic on the tape.
pub fn ddim_update(
    x_t: &ClipBatch,
    eps_hat: &ClipBatch,
    ts: &[i64],
    ts_next: &[i64],
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    x_t.check_same_layout(eps_hat)?;
    check_per_clip(x_t, ts)?;
    check_per_clip(x_t, ts_next)?;
    let mut out = x_t.clone();
    for i in 0..ts.len() {
        let [s, inv_a, an, sn] = ddim_coeffs(ts[i], ts_next[i], sched)?;
        let e = eps_hat.clip_slice(i);
        for (v, &ev) in out.clip_slice_mut(i).iter_mut().zip(e) {
            let x0 = (*v - ev * s) * inv_a;
            *v = x0 * an + ev * sn;
        }
    }
    Ok(out)
}

/// `(x_t − σ_t·ε̂)·(1/α_t)` per clip, the same arithmetic as [`ddim_update`].
pub fn predict_x0(x_t: &ClipBatch, eps_hat: &ClipBatch, ts: &[i64], sched: &NoiseSchedule) -> Result<ClipBatch> {
    x_t.check_same_layout(eps_hat)?;
    check_per_clip(x_t, ts)?;
    let mut out = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let [s, inv_a, _, _] = ddim_coeffs(t, CLEAN, sched)?;
        let e = eps_hat.clip_slice(i);
        for (v, &ev) in out.clip_slice_mut(i).iter_mut().zip(e) {
            *v = (*v - ev * s) * inv_a;
        }
    }
    Ok(out)
}

fn check_steps(ts: &[i64], ts_next: &[i64], sched: &NoiseSchedule) -> Result<()> {
    if ts.len() != ts_next.len() {
        return Err(Error::shape(
            format!("{} target timesteps", ts.len()),
            format!("{}", ts_next.len()),
        ));
    }
    for (&t, &tn) in ts.iter().zip(ts_next) {
        sched.check_timestep(t)?;
        sched.check_endpoint(tn)?;
        if tn >= t {
            return Err(Error::InvalidArgument(format!(
                "solver step must decrease time, got {t} -> {tn}"
            )));
        }
    }
    Ok(())
}

/// One Euler (DDIM) step per clip from `ts[i]` to `ts_next[i]`.
pub fn euler_step_batch<P: EpsPredictor + ?Sized>(
    f: &P,
    x_t: &ClipBatch,
    ts: &[i64],
    ts_next: &[i64],
    conds: &[Condition],
    w: f64,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    check_per_clip(x_t, ts)?;
    check_steps(ts, ts_next, sched)?;
    let eps = guided_eps(f, x_t, ts, conds, w)?;
    ddim_update(x_t, &eps, ts, ts_next, sched)
}

/// `n` Euler steps of stride `s` starting at each clip's own `ts[i]`.
#[allow(clippy::too_many_arguments)]
pub fn euler_solve_batch<P: EpsPredictor + ?Sized>(
    f: &P,
    x_t: &ClipBatch,
    ts: &[i64],
    conds: &[Condition],
    n: usize,
    s: i64,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    check_per_clip(x_t, ts)?;
    if s < 1 {
        return Err(Error::InvalidArgument(format!("stride must be >= 1, got {s}")));
    }
    for &t in ts {
        sched.check_timestep(t)?;
        if n as i64 * s > t + 1 {
            return Err(Error::InvalidArgument(format!(
                "{n} steps of stride {s} overrun t=0 from t={t}"
            )));
        }
    }
    let mut x = x_t.clone();
    let mut cur = ts.to_vec();
    for _ in 0..n {
        let next: Vec<i64> = cur.iter().map(|&t| t - s).collect();
        x = euler_step_batch(f, &x, &cur, &next, conds, w, sched)?;
        cur = next;
    }
    Ok(x)
}

/// Euler steps along an explicit, strictly decreasing timestep grid shared by
/// the whole batch.
pub fn euler_grid_batch<P: EpsPredictor + ?Sized>(
    f: &P,
    x: &ClipBatch,
    grid: &[i64],
    conds: &[Condition],
    w: f64,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    let mut x = x.clone();
    for pair in grid.windows(2) {
        let ts = vec![pair[0]; x.len()];
        let tn = vec![pair[1]; x.len()];
        x = euler_step_batch(f, &x, &ts, &tn, conds, w, sched)?;
    }
    Ok(x)
}

/// Second-order multistep solver in data (x0) parameterization over the
/// trailing `steps`-point grid, first-order on the first and final steps.
pub fn multistep_solve_batch<P: EpsPredictor + ?Sized>(
    f: &P,
    x_start: &ClipBatch,
    steps: usize,
    conds: &[Condition],
    w: f64,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    let grid = sched.trailing_grid(steps)?;
    let lambda = |t: i64| {
        let (a, s) = sched.signal_noise(t);
        (a / s).ln()
    };
    let mut x = x_start.clone();
    let mut prev: Option<(ClipBatch, f64)> = None;
    for pair in grid.windows(2) {
        let (t, tn) = (pair[0], pair[1]);
        let ts = vec![t; x.len()];
        let eps = guided_eps(f, &x, &ts, conds, w)?;
        let x0 = predict_x0(&x, &eps, &ts, sched)?;
        if tn == CLEAN {
            return Ok(x0);
        }
        let (_, sigma_t) = sched.signal_noise(t);
        let (alpha_n, sigma_n) = sched.signal_noise(tn);
        let h = lambda(tn) - lambda(t);
        let d = match &prev {
            None => x0.clone(),
            Some((x0_prev, h_prev)) => {
                let r = h_prev / h;
                let k = 1.0 / (2.0 * r);
                x0.zip_map(x0_prev, |a, b| (1.0 + k) * a - k * b)
            }
        };
        let ratio = sigma_n / sigma_t;
        let coef = alpha_n * ((-h).exp_m1());
        x = x.zip_map(&d, |xv, dv| ratio * xv - coef * dv);
        prev = Some((x0, h));
    }
    Ok(x)
}

/// Which deterministic sampler to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Multistep,
}

/// Sample from standard-normal noise at `T−1` with `steps` solver steps.
pub fn solve_from_noise<P: EpsPredictor + ?Sized>(
    f: &P,
    noise: &ClipBatch,
    steps: usize,
    conds: &[Condition],
    w: f64,
    solver: SolverKind,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    match solver {
        SolverKind::Euler => {
            let grid = sched.trailing_grid(steps)?;
            euler_grid_batch(f, noise, &grid, conds, w, sched)
        }
        SolverKind::Multistep => multistep_solve_batch(f, noise, steps, conds, w, sched),
    }
}

/// Initial noise for one clip, drawn from its own seed.
pub fn noise_clip(seed: u64, frames: usize, dim: usize) -> Clip {
    let mut r = rng::stream(seed, &[rng::tag::SAMPLE]);
    Clip::new(frames, dim, rng::normals(&mut r, frames * dim)).expect("finite normals")
}

/// One clip per `(seed, condition)` pair. Each clip's noise depends only on
/// its own seed, so batching never changes results.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<P: EpsPredictor + ?Sized>(
    f: &P,
    frames: usize,
    dim: usize,
    steps: usize,
    conds: &[Condition],
    seeds: &[u64],
    w: f64,
    solver: SolverKind,
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    if conds.len() != seeds.len() {
        return Err(Error::shape(format!("{} conditions", seeds.len()), conds.len()));
    }
    let noise: Vec<Clip> = seeds.iter().map(|&s| noise_clip(s, frames, dim)).collect();
    let noise = ClipBatch::from_clips(&noise)?;
    solve_from_noise(f, &noise, steps, conds, w, solver, sched)
}

pub fn euler_step<P: EpsPredictor + ?Sized>(
    f: &P,
    x_t: &Clip,
    t: i64,
    t_next: i64,
    c: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Clip> {
    let x = ClipBatch::from_clips(std::slice::from_ref(x_t))?;
    Ok(euler_step_batch(f, &x, &[t], &[t_next], &[c], w, sched)?.clip(0))
}

#[allow(clippy::too_many_arguments)]
pub fn euler_solve<P: EpsPredictor + ?Sized>(
    f: &P,
    x_t: &Clip,
    t: i64,
    c: Condition,
    n: usize,
    s: i64,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Clip> {
    let x = ClipBatch::from_clips(std::slice::from_ref(x_t))?;
    Ok(euler_solve_batch(f, &x, &[t], &[c], n, s, w, sched)?.clip(0))
}

pub fn multistep_solve<P: EpsPredictor + ?Sized>(
    f: &P,
    x_start: &Clip,
    steps: usize,
    c: Condition,
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Clip> {
    let x = ClipBatch::from_clips(std::slice::from_ref(x_start))?;
    Ok(multistep_solve_batch(f, &x, steps, &[c], w, sched)?.clip(0))
}

/// Euler sampling of a student from seeded noise.
pub fn sample(
    model: &crate::nets::StudentBundle,
    steps: usize,
    c: Condition,
    w: f64,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Clip> {
    let d = &model.dims;
    let out = sample_batch(
        model,
        d.frames,
        d.frame_dim,
        steps,
        &[c],
        &[seed],
        w,
        SolverKind::Euler,
        sched,
    )?;
    Ok(out.clip(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1024, 0.00085, 0.012).unwrap()
    }

    fn analytic() -> AnalyticGaussian {
        AnalyticGaussian {
            mean: 0.25,
            var: 4.0,
            schedule: sched(),
        }
    }

    fn clip(seed: u64) -> Clip {
        noise_clip(seed, 4, 2)
    }

    #[test]
    fn cfg_identities() {
        let a = clip(1);
        let b = clip(2);
        assert_eq!(cfg_combine(&a, &b, 1.0).unwrap(), a);
        assert_eq!(cfg_combine(&a, &b, 0.0).unwrap(), b);
        assert_eq!(cfg_combine(&a, &a, 7.5).unwrap(), a);
        let u = Clip::from_fn(4, 2, |f, d| (f * 2 + d) as f64 - 3.0);
        let got = cfg_combine(&u, &Clip::zeros(4, 2), 7.5).unwrap();
        assert_eq!(got, u.map(|v| 7.5 * v));
        assert!(cfg_combine(&a, &Clip::zeros(3, 2), 1.0).is_err());
    }

    #[test]
    fn n_zero_is_identity() {
        let s = sched();
        let x = clip(3);
        let out = euler_solve(&analytic(), &x, 500, Condition::Null, 0, 8, 0.0, &s).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn overrun_rejected() {
        let s = sched();
        let x = clip(3);
        assert!(euler_solve(&analytic(), &x, 100, Condition::Null, 2, 51, 0.0, &s).is_err());
        assert!(euler_solve(&analytic(), &x, 100, Condition::Null, 1, 101, 0.0, &s).is_ok());
    }

    #[test]
    fn step_must_decrease_time() {
        let s = sched();
        assert!(euler_step(&analytic(), &clip(4), 10, 10, Condition::Null, 0.0, &s).is_err());
    }

    #[test]
    fn multistep_single_step_matches_euler_to_clean() {
        let s = sched();
        let x = clip(5);
        let a = multistep_solve(&analytic(), &x, 1, Condition::Null, 0.0, &s).unwrap();
        let b = euler_step(&analytic(), &x, 1023, CLEAN, Condition::Null, 0.0, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn guided_eps_matches_separate_passes() {
        let s = sched();
        let g = analytic();
        let x = ClipBatch::from_clips(&[clip(6), clip(7)]).unwrap();
        let conds = [Condition::Token(1), Condition::Token(2)];
        let ts = [400, 90];
        let got = guided_eps(&g, &x, &ts, &conds, 3.0).unwrap();
        let c = g.predict_eps(&x, &ts, &conds).unwrap();
        let u = g.predict_eps(&x, &ts, &[Condition::Null; 2]).unwrap();
        assert_eq!(got, cfg_combine_batch(&c, &u, 3.0).unwrap());
        let _ = s;
    }
}
