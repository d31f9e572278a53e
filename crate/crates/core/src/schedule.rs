//! Discrete variance-preserving noise schedule and the forward process.
//!
//! Timesteps are `i64` indices in `[0, T)`. Solvers additionally use the
//! endpoint [`CLEAN`] (`-1`), where the signal level is exactly one and the
//! state *is* the clean sample.

use crate::clip::{Clip, ClipBatch};
use crate::error::{Error, Result};

/// Solver endpoint past timestep 0: `ᾱ = 1`.
pub const CLEAN: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`, inclusive.
    pub fn linear(num_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_timesteps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 timesteps, got {num_timesteps}"
            )));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidArgument("betas must be finite".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let last = (num_timesteps - 1) as f64;
        let betas: Vec<f64> = (0..num_timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
            .collect();
        let mut alpha_bars = Vec::with_capacity(num_timesteps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn last_timestep(&self) -> i64 {
        self.betas.len() as i64 - 1
    }

    pub fn check_timestep(&self, t: i64) -> Result<()> {
        if t < 0 || t as usize >= self.betas.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                num_timesteps: self.betas.len(),
            });
        }
        Ok(())
    }

    /// Like [`check_timestep`](Self::check_timestep) but also admits [`CLEAN`].
    pub fn check_endpoint(&self, t: i64) -> Result<()> {
        if t == CLEAN {
            Ok(())
        } else {
            self.check_timestep(t)
        }
    }

    /// `ᾱ_t`, with `ᾱ = 1` at [`CLEAN`].
    pub fn alpha_bar(&self, t: i64) -> f64 {
        if t < 0 {
            1.0
        } else {
            self.alpha_bars[t as usize]
        }
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn signal_noise(&self, t: i64) -> (f64, f64) {
        let a = self.alpha_bar(t);
        (a.sqrt(), (1.0 - a).sqrt())
    }

    /// Trailing-uniform grid for `steps` sampling steps.
    ///
    /// Returns `steps + 1` points starting at `T−1` and ending at [`CLEAN`]:
    /// `t_j = round(T·(steps−j)/steps) − 1`. Grids nest: when `k` divides `n`,
    /// every point of the `k`-step grid lies on the `n`-step grid.
    pub fn trailing_grid(&self, steps: usize) -> Result<Vec<i64>> {
        let t = self.betas.len() as u64;
        if steps == 0 || steps as u64 > t {
            return Err(Error::InvalidArgument(format!(
                "step count must be in 1..={t}, got {steps}"
            )));
        }
        let k = steps as u64;
        Ok((0..=k)
            .map(|j| ((2 * t * (k - j) + k) / (2 * k)) as i64 - 1)
            .collect())
    }

    /// Integer stride for `steps` uniformly spaced steps, if `T` divides evenly.
    pub fn stride_for(&self, steps: usize) -> Result<i64> {
        let t = self.betas.len();
        if steps == 0 || !t.is_multiple_of(steps) {
            return Err(Error::Plan(format!(
                "{steps} steps do not evenly divide {t} timesteps"
            )));
        }
        Ok((t / steps) as i64)
    }
}

fn check_same_shape(a: &Clip, b: &Clip) -> Result<()> {
    if a.frames() != b.frames() || a.dim() != b.dim() {
        return Err(Error::shape(
            format!("{}x{}", a.frames(), a.dim()),
            format!("{}x{}", b.frames(), b.dim()),
        ));
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn add_noise(x0: &Clip, eps: &Clip, t: i64, sched: &NoiseSchedule) -> Result<Clip> {
    check_same_shape(x0, eps)?;
    sched.check_timestep(t)?;
    let (a, s) = sched.signal_noise(t);
    Ok(x0.zip_map(eps, |x, e| a * x + s * e))
}

/// `(x_t − √(1−ᾱ_t)·eps_hat) / √ᾱ_t`.
pub fn eps_to_x0(x_t: &Clip, eps_hat: &Clip, t: i64, sched: &NoiseSchedule) -> Result<Clip> {
    check_same_shape(x_t, eps_hat)?;
    sched.check_endpoint(t)?;
    let (a, s) = sched.signal_noise(t);
    if a == 0.0 {
        return Err(Error::SingularConversion(t));
    }
    Ok(x_t.zip_map(eps_hat, |x, e| (x - s * e) / a))
}

/// Pure noise replaces the model input at the last timestep.
pub fn substitute_terminal_noise(x_t: &Clip, eps: &Clip, t: i64, sched: &NoiseSchedule) -> Clip {
    if t == sched.last_timestep() {
        eps.clone()
    } else {
        x_t.clone()
    }
}

/// Batched [`add_noise`] with one timestep per clip.
pub fn add_noise_batch(
    x0: &ClipBatch,
    eps: &ClipBatch,
    ts: &[i64],
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    x0.check_same_layout(eps)?;
    check_per_clip(x0, ts)?;
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        sched.check_timestep(t)?;
        let (a, s) = sched.signal_noise(t);
        let e = eps.clip_slice(i);
        for (o, &ev) in out.clip_slice_mut(i).iter_mut().zip(e) {
            *o = a * *o + s * ev;
        }
    }
    Ok(out)
}

/// Batched [`eps_to_x0`] with one timestep per clip.
pub fn eps_to_x0_batch(
    x_t: &ClipBatch,
    eps_hat: &ClipBatch,
    ts: &[i64],
    sched: &NoiseSchedule,
) -> Result<ClipBatch> {
    x_t.check_same_layout(eps_hat)?;
    check_per_clip(x_t, ts)?;
    let mut out = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        sched.check_endpoint(t)?;
        let (a, s) = sched.signal_noise(t);
        if a == 0.0 {
            return Err(Error::SingularConversion(t));
        }
        let e = eps_hat.clip_slice(i);
        for (o, &ev) in out.clip_slice_mut(i).iter_mut().zip(e) {
            *o = (*o - s * ev) / a;
        }
    }
    Ok(out)
}

/// Batched [`substitute_terminal_noise`].
pub fn substitute_terminal_noise_batch(
    x_t: &mut ClipBatch,
    eps: &ClipBatch,
    ts: &[i64],
    sched: &NoiseSchedule,
) {
    let last = sched.last_timestep();
    for (i, &t) in ts.iter().enumerate() {
        if t == last {
            x_t.clip_slice_mut(i).copy_from_slice(eps.clip_slice(i));
        }
    }
}

pub(crate) fn check_per_clip(batch: &ClipBatch, ts: &[i64]) -> Result<()> {
    if ts.len() != batch.len() {
        return Err(Error::shape(
            format!("{} timesteps", batch.len()),
            format!("{} timesteps", ts.len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap()
    }

    #[test]
    fn endpoints_match_config() {
        let s = sched();
        assert_eq!(s.betas()[0], 0.00085);
        assert!((s.betas()[999] - 0.012).abs() < 1e-18);
        assert!((s.alpha_bars()[0] - 0.99915).abs() < 1e-15);
    }

    #[test]
    fn two_step_product() {
        let b = 0.3;
        let s = NoiseSchedule::linear(2, b, b).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0 - b, (1.0 - b) * (1.0 - b)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, f64::NAN, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn alpha_bars_recompute_exactly() {
        let s = sched();
        let mut acc = 1.0;
        for (i, b) in s.betas().iter().enumerate() {
            acc *= 1.0 - b;
            assert_eq!(acc.to_bits(), s.alpha_bars()[i].to_bits());
            if i > 0 {
                assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
                assert!(s.betas()[i] > s.betas()[i - 1]);
            }
        }
    }

    #[test]
    fn trailing_grid_nests() {
        let s = NoiseSchedule::linear(1000, 0.00085, 0.012).unwrap();
        let g128 = s.trailing_grid(128).unwrap();
        let g32 = s.trailing_grid(32).unwrap();
        assert_eq!(g32[0], 999);
        assert_eq!(*g32.last().unwrap(), CLEAN);
        for (j, t) in g32.iter().enumerate() {
            assert_eq!(*t, g128[4 * j]);
        }
        let s = NoiseSchedule::linear(1024, 0.00085, 0.012).unwrap();
        assert_eq!(s.trailing_grid(4).unwrap(), vec![1023, 767, 511, 255, -1]);
    }

    #[test]
    fn forward_process_extremes() {
        let x0 = Clip::from_fn(2, 3, |f, d| (f * 3 + d) as f64);
        let eps = Clip::from_fn(2, 3, |f, d| -((f + d) as f64));
        let s = sched();
        // t = CLEAN is not a valid noising timestep but has ᾱ = 1.
        assert!(add_noise(&x0, &eps, CLEAN, &s).is_err());
        assert_eq!(eps_to_x0(&x0, &Clip::zeros(2, 3), CLEAN, &s).unwrap(), x0);
    }

    #[test]
    fn terminal_substitution() {
        let s = sched();
        let x = Clip::from_fn(2, 2, |f, d| (f + d) as f64 + 0.5);
        let e = Clip::from_fn(2, 2, |f, d| (f * d) as f64 - 3.0);
        assert_eq!(substitute_terminal_noise(&x, &e, 999, &s), e);
        assert_eq!(substitute_terminal_noise(&x, &e, 0, &s), x);
        assert_eq!(substitute_terminal_noise(&x, &e, 998, &s), x);
    }
}
