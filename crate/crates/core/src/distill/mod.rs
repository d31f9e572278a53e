//! Distillation losses and the progressive stage machine.
//!
//! A stage distills a `from_steps` teacher into a `to_steps` student. The
//! teacher walks `n = from/to` Euler steps of stride `s = T/from`; the student
//! covers the same span in one step of stride `n·s`.

mod run;

pub use run::{
    rank_micro_step, run_progressive, run_stage, stage_checkpoint_name, Contribution,
    DistillContext, IterationLog, MicroStep, PhaseKind, ProgressiveOutcome, RankState,
    StageOutcome,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::clip::ClipBatch;
use crate::error::{Error, Result};
use crate::nets::{
    adversarial_probabilities, cond_indices, student_eps, Condition, DiscInputs, DiscPhase,
    DiscriminatorParams, StudentBundle,
};
use crate::rng::{self, Rng};
use crate::schedule::{add_noise_batch, substitute_terminal_noise_batch, NoiseSchedule};
use crate::solvers::{ddim_coeffs, euler_solve_batch};
use crate::tensor::Matrix;

/// Probabilities are clamped into `[P_CLAMP, 1 − P_CLAMP]` before logarithms.
pub const P_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MseCfg,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub from_steps: usize,
    pub to_steps: usize,
    pub loss_kind: LossKind,
    /// Updates in the MSE stage, or in the trajectory-conditional phase.
    pub iterations: usize,
    /// Updates in the relaxed phase of an adversarial stage.
    #[serde(default)]
    pub relaxed_iterations: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub lr_student: f64,
    pub lr_disc: f64,
    /// Guidance scale inside the teacher.
    pub teacher_cfg: f64,
    /// Required for one-step students.
    #[serde(default)]
    pub experimental: bool,
}

impl StageConfig {
    pub fn mse(from_steps: usize, to_steps: usize) -> Self {
        Self {
            from_steps,
            to_steps,
            loss_kind: LossKind::MseCfg,
            iterations: 2000,
            relaxed_iterations: 0,
            micro_batch: 16,
            grad_accum: 4,
            lr_student: 1e-3,
            lr_disc: 0.0,
            teacher_cfg: 7.5,
            experimental: false,
        }
    }

    pub fn adversarial(from_steps: usize, to_steps: usize) -> Self {
        Self {
            loss_kind: LossKind::Adversarial,
            relaxed_iterations: 2000,
            lr_student: 2e-4,
            lr_disc: 2e-4,
            teacher_cfg: 0.0,
            ..Self::mse(from_steps, to_steps)
        }
    }

    /// Teacher steps per student step.
    pub fn n(&self) -> usize {
        self.from_steps / self.to_steps
    }

    /// Samples behind one optimizer update.
    pub fn effective_batch(&self, ranks: usize) -> usize {
        ranks * self.micro_batch * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_steps == 0 || self.from_steps <= self.to_steps {
            return Err(Error::Plan(format!(
                "stage {}->{}: from_steps must exceed to_steps >= 1",
                self.from_steps, self.to_steps
            )));
        }
        if !self.from_steps.is_multiple_of(self.to_steps) {
            return Err(Error::Plan(format!(
                "stage {}->{}: from_steps must be divisible by to_steps",
                self.from_steps, self.to_steps
            )));
        }
        if self.to_steps == 1 && !self.experimental {
            return Err(Error::Plan(
                "one-step distillation is experimental; set `experimental = true`".into(),
            ));
        }
        if self.micro_batch == 0 || self.grad_accum == 0 {
            return Err(Error::Plan("micro_batch and grad_accum must be >= 1".into()));
        }
        if !(self.teacher_cfg >= 0.0 && self.teacher_cfg.is_finite()) {
            return Err(Error::Plan("teacher_cfg must be finite and >= 0".into()));
        }
        for lr in [self.lr_student, self.lr_disc] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Plan("learning rates must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    /// `(n, s)` for the teacher under `sched`.
    pub fn teacher_steps(&self, sched: &NoiseSchedule) -> Result<(usize, i64)> {
        Ok((self.n(), sched.stride_for(self.from_steps)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    pub stages: Vec<StageConfig>,
}

impl DistillPlan {
    /// `128→32` with MSE and guidance, then adversarial `32→8→4→2`.
    pub fn standard() -> Self {
        Self {
            stages: vec![
                StageConfig::mse(128, 32),
                StageConfig::adversarial(32, 8),
                StageConfig::adversarial(8, 4),
                StageConfig::adversarial(4, 2),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Plan("empty stage plan".into()));
        }
        for (k, st) in self.stages.iter().enumerate() {
            st.validate()?;
            if st.iterations == 0 {
                return Err(Error::Plan(format!("stage {k} has zero iterations")));
            }
        }
        for w in self.stages.windows(2) {
            if w[0].to_steps != w[1].from_steps {
                return Err(Error::Plan(format!(
                    "broken chain: {}->{} is followed by {}->{}",
                    w[0].from_steps, w[0].to_steps, w[1].from_steps, w[1].to_steps
                )));
            }
        }
        Ok(())
    }

    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        for st in &self.stages {
            sched.stride_for(st.from_steps)?;
        }
        Ok(())
    }
}

/// Source-grid timesteps from which the student's stride stays in range.
pub fn valid_start_timesteps(stage: &StageConfig, sched: &NoiseSchedule) -> Result<Vec<i64>> {
    let (n, s) = stage.teacher_steps(sched)?;
    let span = n as i64 * s;
    Ok(sched
        .trailing_grid(stage.from_steps)?
        .into_iter()
        .filter(|&t| t >= 0 && t - span >= -1)
        .collect())
}

/// Fail unless every `t` lies on the stage's source grid with room for one
/// student step.
pub fn check_aligned(ts: &[i64], stage: &StageConfig, sched: &NoiseSchedule) -> Result<()> {
    let (n, s) = stage.teacher_steps(sched)?;
    for &t in ts {
        sched.check_timestep(t)?;
        if (t + 1) % s != 0 || t - n as i64 * s < -1 {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} is not on the {}-step grid with room for a {}-step stride",
                stage.from_steps,
                n as i64 * s
            )));
        }
    }
    Ok(())
}

/// Noised inputs, student targets, and timesteps for one micro-batch.
#[derive(Clone, Debug)]
pub struct DistillBatch {
    pub x_t: ClipBatch,
    pub ts: Vec<i64>,
    pub ts_next: Vec<i64>,
    pub conds: Vec<Condition>,
    /// Teacher landing points, detached from any tape.
    pub target: ClipBatch,
}

impl DistillBatch {
    /// Noise `x0` at `ts` (pure noise at the last timestep) and run the
    /// teacher `n` steps of stride `s`.
    #[allow(clippy::too_many_arguments)]
    pub fn prepare(
        teacher: &StudentBundle,
        x0: &ClipBatch,
        eps: &ClipBatch,
        conds: &[Condition],
        ts: &[i64],
        stage: &StageConfig,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        check_aligned(ts, stage, sched)?;
        let (n, s) = stage.teacher_steps(sched)?;
        let mut x_t = add_noise_batch(x0, eps, ts, sched)?;
        substitute_terminal_noise_batch(&mut x_t, eps, ts, sched);
        let target = euler_solve_batch(teacher, &x_t, ts, conds, n, s, stage.teacher_cfg, sched)?;
        let ts_next = ts.iter().map(|&t| t - n as i64 * s).collect();
        Ok(Self {
            x_t,
            ts: ts.to_vec(),
            ts_next,
            conds: conds.to_vec(),
            target,
        })
    }

    /// Draw clips, noise, and source-grid timesteps for one micro-batch.
    pub fn draw(
        teacher: &StudentBundle,
        ds: &crate::datagen::ClipDataset,
        stage: &StageConfig,
        sched: &NoiseSchedule,
        r: &mut Rng,
    ) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Dataset("cannot distill on an empty dataset".into()));
        }
        let grid = valid_start_timesteps(stage, sched)?;
        let b = stage.micro_batch;
        let idx: Vec<usize> = (0..b).map(|_| r.gen_range(0..ds.len())).collect();
        let ts: Vec<i64> = (0..b).map(|_| grid[r.gen_range(0..grid.len())]).collect();
        let (x0, conds) = ds.batch(&idx)?;
        let rows = x0.values().rows();
        let eps = ClipBatch::from_matrix(
            x0.frames(),
            Matrix::from_vec(rows, x0.dim(), rng::normals(r, rows * x0.dim()))?,
        )?;
        Self::prepare(teacher, &x0, &eps, &conds, &ts, stage, sched)
    }
}

/// The student's one-step landing point `x̂_{t−ns}` on the tape, computed
/// with the same arithmetic as the solver's Euler step.
pub fn student_one_step(
    tape: &mut Tape,
    student: &StudentBundle,
    train_motion: bool,
    batch: &DistillBatch,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let dims = &student.dims;
    let frames = batch.x_t.frames();
    let idx = cond_indices(&batch.conds, dims.vocab)?;
    let (b, m) = student.bind(tape, train_motion)?;
    let x = tape.constant(batch.x_t.values().clone());
    let eps = student_eps(tape, &b, Some(&m), x, frames, &batch.ts, &idx, dims)?;
    let mut sig = Vec::new();
    let mut inv_a = Vec::new();
    let mut a_n = Vec::new();
    let mut s_n = Vec::new();
    for (&t, &tn) in batch.ts.iter().zip(&batch.ts_next) {
        let [s, ia, an, sn] = ddim_coeffs(t, tn, sched)?;
        for _ in 0..frames {
            sig.push(s);
            inv_a.push(ia);
            a_n.push(an);
            s_n.push(sn);
        }
    }
    let se = tape.scale_rows(eps, sig);
    let d = tape.sub(x, se);
    let x0 = tape.scale_rows(d, inv_a);
    let p1 = tape.scale_rows(x0, a_n);
    let p2 = tape.scale_rows(eps, s_n);
    Ok(tape.add(p1, p2))
}

/// `mean((x̂ − x_target)²)` and gradients for the student's motion module.
pub fn mse_distill_step(
    student: &StudentBundle,
    batch: &DistillBatch,
    sched: &NoiseSchedule,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let pred = student_one_step(&mut tape, student, true, batch, sched)?;
    let target = tape.constant(batch.target.values().clone());
    let diff = tape.sub(pred, target);
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let value = tape.value(loss).get(0, 0);
    Ok((value, tape.backward(loss)?))
}

/// Which side an adversarial iteration updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Discriminator,
    Generator,
}

impl Side {
    /// Discriminator on even iterations, student on odd ones.
    pub fn for_iteration(it: usize) -> Self {
        if it.is_multiple_of(2) {
            Side::Discriminator
        } else {
            Side::Generator
        }
    }
}

/// `−mean(log p)` with `p` clamped away from 0 and 1.
fn neg_log_mean(tape: &mut Tape, p: Var) -> Var {
    let p = tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
    let l = tape.log(p);
    let m = tape.mean(l);
    tape.scale_shift(m, -1.0, 0.0)
}

/// `L_D = −mean log p − mean log(1 − p̂)` on real (teacher) and fake
/// (student) landing points.
pub fn disc_loss(tape: &mut Tape, p_real: Var, p_fake: Var) -> Var {
    let real = neg_log_mean(tape, p_real);
    let one_minus = tape.scale_shift(p_fake, -1.0, 1.0);
    let fake = neg_log_mean(tape, one_minus);
    tape.add(real, fake)
}

/// Non-saturating `L_G = −mean log p̂`.
pub fn gen_loss(tape: &mut Tape, p_fake: Var) -> Var {
    neg_log_mean(tape, p_fake)
}

/// Loss value and gradients for one adversarial micro-step.
#[derive(Clone, Debug)]
pub struct AdversarialOutcome {
    pub side: Side,
    pub loss: f64,
    pub grads: Gradients,
}

/// One side of the alternating update. On the discriminator side the student
/// output is a constant; on the generator side the discriminator is.
pub fn adversarial_step(
    student: &StudentBundle,
    disc: &DiscriminatorParams,
    batch: &DistillBatch,
    phase: DiscPhase,
    flow: usize,
    side: Side,
    sched: &NoiseSchedule,
) -> Result<AdversarialOutcome> {
    disc.check_flow(flow)?;
    let dims = &disc.dims;
    let idx = cond_indices(&batch.conds, dims.vocab)?;
    let flows = vec![flow; batch.ts.len()];
    let mut tape = Tape::new();
    let fake = student_one_step(&mut tape, student, side == Side::Generator, batch, sched)?;
    let v = disc.bind(&mut tape, side == Side::Discriminator)?;
    let x_t = tape.constant(batch.x_t.values().clone());
    let fake_in = DiscInputs {
        x_t,
        ts: &batch.ts,
        x_next: fake,
        ts_next: &batch.ts_next,
        conds: &idx,
        flows: &flows,
    };
    let p_fake = adversarial_probabilities(&mut tape, &v, phase, &fake_in, dims)?;
    let loss = match side {
        Side::Discriminator => {
            let real = tape.constant(batch.target.values().clone());
            let real_in = DiscInputs {
                x_next: real,
                ..fake_in
            };
            let p_real = adversarial_probabilities(&mut tape, &v, phase, &real_in, dims)?;
            disc_loss(&mut tape, p_real, p_fake)
        }
        Side::Generator => gen_loss(&mut tape, p_fake),
    };
    let value = tape.value(loss).get(0, 0);
    Ok(AdversarialOutcome {
        side,
        loss: value,
        grads: tape.backward(loss)?,
    })
}
