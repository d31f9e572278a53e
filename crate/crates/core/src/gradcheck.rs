//! Central finite-difference checks of every training loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::clip::ClipBatch;
use crate::datagen::{sample_ground_truth, StyleGroup, StyleSpec};
use crate::distill::{adversarial_step, mse_distill_step, DistillBatch, Side, StageConfig};
use crate::error::Result;
use crate::nets::{
    bind_base, bind_motion, denoising_loss, BaseParams, DenoisingBatch, DiscPhase,
    DiscriminatorParams, MotionParams, NetDims, StudentBundle, BASE_PREFIX, MOTION_PREFIX,
};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Matrix, ParamSet};
use crate::Condition;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare `loss`'s analytic gradient against central differences for every
/// coordinate of every parameter in `params`. Parameters absent from the
/// returned gradients are taken to have zero gradient.
pub fn check(
    name: &str,
    params: &ParamSet,
    loss: impl Fn(&ParamSet) -> Result<(f64, Gradients)>,
) -> Result<CheckResult> {
    let (_, grads) = loss(params)?;
    let mut out = CheckResult {
        name: name.to_string(),
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = params.clone();
    for (pname, t) in params {
        for i in 0..t.data.len() {
            let orig = t.data[i];
            probe.get_mut(pname).expect("same keys").data[i] = orig + STEP;
            let (up, _) = loss(&probe)?;
            probe.get_mut(pname).expect("same keys").data[i] = orig - STEP;
            let (down, _) = loss(&probe)?;
            probe.get_mut(pname).expect("same keys").data[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(pname).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            out.coordinates += 1;
            if err > out.max_rel_error || err.is_nan() {
                out.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                out.worst = Some((pname.clone(), i));
            }
        }
    }
    Ok(out)
}

/// Small sizes so every coordinate can be probed quickly.
pub fn small_dims() -> NetDims {
    NetDims {
        frame_dim: 2,
        frames: 3,
        hidden: 5,
        time_dim: 4,
        vocab: 3,
        head_hidden: 4,
        num_timesteps: 64,
    }
}

fn jitter(set: &mut ParamSet, std: f64, r: &mut Rng) {
    for t in set.values_mut() {
        for v in t.data.iter_mut() {
            *v += std * rng::normal(r);
        }
    }
}

struct Fixture {
    dims: NetDims,
    sched: NoiseSchedule,
    teacher: StudentBundle,
    student: StudentBundle,
    disc: DiscriminatorParams,
    denoise: DenoisingBatch,
    mse_batch: DistillBatch,
    adv_batch: DistillBatch,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let dims = small_dims();
    let sched = NoiseSchedule::linear(dims.num_timesteps, 0.00085, 0.012)?;
    let mut r = rng::stream(seed, &[]);
    let base = BaseParams::init(0, &dims, &mut r);
    let teacher = StudentBundle::new(dims, base.clone(), MotionParams::init(&dims, &mut r))?;
    let mut motion = teacher.motion.clone();
    jitter(&mut motion.params, 0.05, &mut r);
    let student = StudentBundle::new(dims, base.clone(), motion)?;
    let mut disc = DiscriminatorParams::from_student(&base, &teacher.motion, 2, &dims, &mut r)?;
    // Zero-initialized output layers would hide every head gradient but one.
    jitter(&mut disc.params, 0.3, &mut r);
    let style = StyleSpec::mixture(0, "g", StyleGroup::Default, [1.0, 1.0], 0.0, 0.8);
    let ds = sample_ground_truth(&style, 6, dims.frames, dims.frame_dim, dims.vocab, seed)?;
    let denoise = DenoisingBatch::draw(&ds, 4, 0.3, &dims, &sched, &mut r)?;
    let (x0, _) = ds.batch(&[0, 1, 2])?;
    let eps = ClipBatch::from_matrix(
        dims.frames,
        Matrix::from_vec(3 * dims.frames, dims.frame_dim, rng::normals(&mut r, 3 * dims.frames * dims.frame_dim))?,
    )?;
    let conds = vec![Condition::Token(0), Condition::Null, Condition::Token(2)];
    let mse_stage = StageConfig::mse(8, 4);
    let mse_batch = DistillBatch::prepare(&teacher, &x0, &eps, &conds, &[63, 31, 47], &mse_stage, &sched)?;
    let adv_stage = StageConfig::adversarial(4, 2);
    let adv_batch = DistillBatch::prepare(&teacher, &x0, &eps, &conds, &[63, 31, 63], &adv_stage, &sched)?;
    Ok(Fixture {
        dims,
        sched,
        teacher,
        student,
        disc,
        denoise,
        mse_batch,
        adv_batch,
    })
}

fn with_motion(s: &StudentBundle, params: &ParamSet) -> StudentBundle {
    StudentBundle {
        motion: MotionParams {
            params: params.clone(),
        },
        ..s.clone()
    }
}

fn with_disc(d: &DiscriminatorParams, params: &ParamSet) -> DiscriminatorParams {
    DiscriminatorParams {
        params: params.clone(),
        ..d.clone()
    }
}

/// Run every check on a fixed small fixture.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let fx = fixture(seed)?;
    let mut out = Vec::new();
    let dims = fx.dims;

    let base = fx.teacher.base.params.clone();
    out.push(check("pretrain base", &base, |p| {
        let mut tape = Tape::new();
        let b = bind_base(&mut tape, p, BASE_PREFIX, true)?;
        let l = denoising_loss(&mut tape, &b, None, &fx.denoise, &dims)?;
        Ok((tape.value(l).get(0, 0), tape.backward(l)?))
    })?);

    let motion = fx.student.motion.params.clone();
    out.push(check("pretrain motion", &motion, |p| {
        let mut tape = Tape::new();
        let b = bind_base(&mut tape, &base, BASE_PREFIX, false)?;
        let m = bind_motion(&mut tape, p, MOTION_PREFIX, true)?;
        let l = denoising_loss(&mut tape, &b, Some(&m), &fx.denoise, &dims)?;
        Ok((tape.value(l).get(0, 0), tape.backward(l)?))
    })?);

    out.push(check("student mse", &motion, |p| {
        mse_distill_step(&with_motion(&fx.student, p), &fx.mse_batch, &fx.sched)
    })?);

    for (phase, label) in [
        (DiscPhase::TrajectoryConditional, "conditional"),
        (DiscPhase::Relaxed, "relaxed"),
    ] {
        out.push(check(&format!("discriminator {label}"), &fx.disc.params, |p| {
            let o = adversarial_step(&fx.student, &with_disc(&fx.disc, p), &fx.adv_batch, phase, 1, Side::Discriminator, &fx.sched)?;
            Ok((o.loss, o.grads))
        })?);
        out.push(check(&format!("generator {label}"), &motion, |p| {
            let o = adversarial_step(&with_motion(&fx.student, p), &fx.disc, &fx.adv_batch, phase, 1, Side::Generator, &fx.sched)?;
            Ok((o.loss, o.grads))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }

    #[test]
    fn quadratic_passes() {
        let mut p = ParamSet::new();
        p.insert("x".into(), Tensor::new(vec![2], vec![0.3, -1.2]).unwrap());
        let r = check("q", &p, |s| {
            let x = &s["x"].data;
            let mut g = Gradients::new();
            g.insert("x".into(), Matrix::from_vec(1, 2, vec![2.0 * x[0], 2.0 * x[1]]).unwrap());
            Ok((x[0] * x[0] + x[1] * x[1], g))
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.coordinates, 2);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut p = ParamSet::new();
        p.insert("x".into(), Tensor::new(vec![1], vec![0.5]).unwrap());
        let r = check("bad", &p, |s| {
            let x = s["x"].data[0];
            let mut g = Gradients::new();
            g.insert("x".into(), Matrix::scalar(x));
            Ok((x * x, g))
        })
        .unwrap();
        assert!(!r.passed());
    }
}
