use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    adversarial_step, mse_distill_step, DistillBatch, DistillPlan, LossKind, Side, StageConfig,
};
use crate::autodiff::Gradients;
use crate::cross_rank::{
    accumulate_and_update, all_reduce_shared, check_batch_provenance, Executor, GradAccumulator,
    RankAssignment, ReductionSpec,
};
use crate::datagen::{ClipDataset, StyleGroup};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nets::{
    checkpoint_save, BaseParams, Checkpoint, DiscPhase, DiscriminatorParams, MotionParams, NetDims,
    StudentBundle,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;

/// One rank: its assignment, frozen base, and dataset.
#[derive(Clone, Debug)]
pub struct RankState {
    pub assignment: RankAssignment,
    pub base: Arc<BaseParams>,
    pub base_group: StyleGroup,
    pub dataset: Arc<ClipDataset>,
}

/// Everything a distillation run reads but never writes.
#[derive(Clone, Debug)]
pub struct DistillContext {
    pub dims: NetDims,
    pub sched: NoiseSchedule,
    pub ranks: Vec<RankState>,
    /// Backbone source for fresh discriminators.
    pub disc_base: Arc<BaseParams>,
    pub disc_motion: Arc<MotionParams>,
    /// Rows of the discriminator's flow table.
    pub num_flows: usize,
    pub seed: u64,
    pub executor: Executor,
    /// Where to write diagnostic state when a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl DistillContext {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() {
            return Err(Error::Config("no ranks".into()));
        }
        for (i, r) in self.ranks.iter().enumerate() {
            if i > 0 && self.ranks[i - 1].assignment.rank >= r.assignment.rank {
                return Err(Error::Config("ranks must be sorted by ascending id without duplicates".into()));
            }
            r.base.validate(&self.dims)?;
            if r.base.style_id != r.assignment.style {
                return Err(Error::FlowMismatch {
                    rank: r.assignment.rank,
                    base: r.assignment.style,
                    batch: format!("base parameters of style {}", r.base.style_id),
                });
            }
            if r.assignment.style >= self.num_flows {
                return Err(Error::UnregisteredFlow {
                    index: r.assignment.style,
                    registered: self.num_flows,
                });
            }
            check_batch_provenance(&r.assignment, r.base_group, &r.dataset)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Mse,
    TrajectoryConditional,
    Relaxed,
}

impl PhaseKind {
    fn code(self) -> u64 {
        match self {
            PhaseKind::Mse => 0,
            PhaseKind::TrajectoryConditional => 1,
            PhaseKind::Relaxed => 2,
        }
    }

    fn disc_phase(self) -> Option<DiscPhase> {
        match self {
            PhaseKind::Mse => None,
            PhaseKind::TrajectoryConditional => Some(DiscPhase::TrajectoryConditional),
            PhaseKind::Relaxed => Some(DiscPhase::Relaxed),
        }
    }
}

/// Mean loss over ranks and micro-steps for one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub stage: usize,
    pub phase: PhaseKind,
    pub iteration: usize,
    pub side: Side,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub motion: MotionParams,
    pub disc: Option<DiscriminatorParams>,
    pub log: Vec<IterationLog>,
}

#[derive(Clone, Debug)]
pub struct ProgressiveOutcome {
    pub motion: MotionParams,
    pub stages: Vec<StageOutcome>,
    pub checkpoints: Vec<PathBuf>,
}

/// Identifies one micro-step within a run.
#[derive(Clone, Copy, Debug)]
pub struct MicroStep<'a> {
    pub stage_index: usize,
    pub stage: &'a StageConfig,
    pub phase: PhaseKind,
    pub side: Side,
    pub iteration: usize,
    pub micro: usize,
}

/// A rank's gradient contribution and local loss.
#[derive(Clone, Debug)]
pub struct Contribution {
    pub rank: usize,
    pub loss: f64,
    pub grads: Gradients,
}

/// One rank's micro-step: draw a batch from its dataset, run its teacher, and
/// differentiate the stage loss with respect to the side being trained.
pub fn rank_micro_step(
    ctx: &DistillContext,
    rank: &RankState,
    teacher: &StudentBundle,
    motion: &MotionParams,
    disc: Option<&DiscriminatorParams>,
    step: &MicroStep<'_>,
) -> Result<Contribution> {
    let a = &rank.assignment;
    check_batch_provenance(a, rank.base_group, &rank.dataset)?;
    if teacher.base.style_id != a.style {
        return Err(Error::FlowMismatch {
            rank: a.rank,
            base: a.style,
            batch: format!("teacher built on style {}", teacher.base.style_id),
        });
    }
    let mut r = rng::stream(
        ctx.seed,
        &[
            tag::DISTILL,
            step.stage_index as u64,
            step.phase.code(),
            step.iteration as u64,
            step.micro as u64,
            a.rank as u64,
        ],
    );
    let batch = DistillBatch::draw(teacher, &rank.dataset, step.stage, &ctx.sched, &mut r)?;
    let student = StudentBundle {
        dims: ctx.dims,
        base: (*rank.base).clone(),
        motion: motion.clone(),
    };
    let (loss, grads) = match step.phase.disc_phase() {
        None => mse_distill_step(&student, &batch, &ctx.sched)?,
        Some(phase) => {
            let disc = disc.ok_or_else(|| {
                Error::InvalidArgument("adversarial step without a discriminator".into())
            })?;
            let out = adversarial_step(&student, disc, &batch, phase, a.style, step.side, &ctx.sched)?;
            (out.loss, out.grads)
        }
    };
    Ok(Contribution {
        rank: a.rank,
        loss,
        grads,
    })
}

/// Per-rank replicas of the shared trainable state.
struct Replicas {
    motion: Vec<MotionParams>,
    motion_opt: Vec<Adam>,
    disc: Vec<DiscriminatorParams>,
    disc_opt: Vec<Adam>,
}

fn dump_state(
    ctx: &DistillContext,
    step: &MicroStep<'_>,
    contributions: &[Contribution],
    motion: &MotionParams,
) -> Option<PathBuf> {
    let dir = ctx.dump_dir.as_ref()?;
    let stem = format!("nonfinite_stage{}_iter{}", step.stage_index, step.iteration);
    let losses: Vec<(usize, f64)> = contributions.iter().map(|c| (c.rank, c.loss)).collect();
    let report = serde_json::json!({
        "stage": step.stage_index,
        "from_steps": step.stage.from_steps,
        "to_steps": step.stage.to_steps,
        "phase": step.phase,
        "side": step.side,
        "iteration": step.iteration,
        "micro": step.micro,
        "rank_losses": losses.iter().map(|(r, l)| serde_json::json!({"rank": r, "loss": l.to_string()})).collect::<Vec<_>>(),
    });
    let json = dir.join(format!("{stem}.json"));
    let ok = write_atomic(&json, serde_json::to_string_pretty(&report).ok()?.as_bytes()).is_ok()
        && checkpoint_save(
            &Checkpoint::new("motion", motion.params.clone()),
            &dir.join(format!("{stem}_motion.ckpt")),
        )
        .is_ok();
    ok.then_some(json)
}

fn run_phase(
    ctx: &DistillContext,
    stage_index: usize,
    stage: &StageConfig,
    phase: PhaseKind,
    iterations: usize,
    teachers: &[StudentBundle],
    reps: &mut Replicas,
    log: &mut Vec<IterationLog>,
) -> Result<()> {
    let motion_spec = ReductionSpec::for_shared(
        &reps.motion[0].params,
        &ctx.ranks[0].base,
        &ctx.ranks.iter().map(|r| r.assignment.clone()).collect::<Vec<_>>(),
    )?;
    let disc_spec = reps
        .disc
        .first()
        .map(|d| {
            ReductionSpec::for_shared(
                &d.params,
                &ctx.ranks[0].base,
                &ctx.ranks.iter().map(|r| r.assignment.clone()).collect::<Vec<_>>(),
            )
        })
        .transpose()?;
    let rank_ids: Vec<usize> = (0..ctx.ranks.len()).collect();
    for it in 0..iterations {
        let side = match phase {
            PhaseKind::Mse => Side::Generator,
            _ => Side::for_iteration(it),
        };
        let mut acc = GradAccumulator::new(stage.grad_accum)?;
        let mut loss_sum = 0.0;
        for micro in 0..stage.grad_accum {
            let step = MicroStep {
                stage_index,
                stage,
                phase,
                side,
                iteration: it,
                micro,
            };
            let contributions = ctx.executor.map(&rank_ids, |&i| {
                rank_micro_step(
                    ctx,
                    &ctx.ranks[i],
                    &teachers[i],
                    &reps.motion[i],
                    reps.disc.get(i),
                    &step,
                )
            })?;
            if let Some(bad) = contributions.iter().find(|c| !c.loss.is_finite()) {
                let dump = dump_state(ctx, &step, &contributions, &reps.motion[0]);
                return Err(Error::NonFiniteLoss {
                    stage: stage_index,
                    iteration: it,
                    detail: format!("rank {} {:?} loss is {}", bad.rank, side, bad.loss),
                    dump,
                });
            }
            loss_sum += contributions.iter().map(|c| c.loss).sum::<f64>();
            let pairs: Vec<(usize, Gradients)> =
                contributions.into_iter().map(|c| (c.rank, c.grads)).collect();
            let spec = match side {
                Side::Generator => &motion_spec,
                Side::Discriminator => disc_spec.as_ref().expect("adversarial phase"),
            };
            acc.push(all_reduce_shared(&pairs, spec)?)?;
        }
        match side {
            Side::Generator => {
                let mut views: Vec<_> = reps
                    .motion_opt
                    .iter_mut()
                    .zip(reps.motion.iter_mut())
                    .map(|(o, m)| (o, &mut m.params))
                    .collect();
                accumulate_and_update(&mut acc, &mut views)?;
            }
            Side::Discriminator => {
                let mut views: Vec<_> = reps
                    .disc_opt
                    .iter_mut()
                    .zip(reps.disc.iter_mut())
                    .map(|(o, d)| (o, &mut d.params))
                    .collect();
                accumulate_and_update(&mut acc, &mut views)?;
            }
        }
        let loss = loss_sum / (stage.grad_accum * ctx.ranks.len()) as f64;
        if it % 50 == 0 || it + 1 == iterations {
            log::info!(
                "stage {stage_index} ({}->{}) {phase:?} iter {it}: {side:?} loss {loss:.5}",
                stage.from_steps,
                stage.to_steps
            );
        }
        log.push(IterationLog {
            stage: stage_index,
            phase,
            iteration: it,
            side,
            loss,
        });
    }
    Ok(())
}

/// Distill one stage. The student starts from the teacher's motion module.
pub fn run_stage(
    ctx: &DistillContext,
    stage_index: usize,
    stage: &StageConfig,
    teacher: &MotionParams,
) -> Result<StageOutcome> {
    ctx.validate()?;
    stage.validate()?;
    stage.teacher_steps(&ctx.sched)?;
    teacher.validate(&ctx.dims)?;
    let teachers: Vec<StudentBundle> = ctx
        .ranks
        .iter()
        .map(|r| StudentBundle::new(ctx.dims, (*r.base).clone(), teacher.clone()))
        .collect::<Result<_>>()?;
    let nr = ctx.ranks.len();
    let mut reps = Replicas {
        motion: vec![teacher.clone(); nr],
        motion_opt: vec![Adam::new(AdamConfig::with_lr(stage.lr_student)); nr],
        disc: Vec::new(),
        disc_opt: Vec::new(),
    };
    let mut log = Vec::new();
    match stage.loss_kind {
        LossKind::MseCfg => {
            run_phase(ctx, stage_index, stage, PhaseKind::Mse, stage.iterations, &teachers, &mut reps, &mut log)?;
        }
        LossKind::Adversarial => {
            let disc = DiscriminatorParams::from_student(
                &ctx.disc_base,
                &ctx.disc_motion,
                ctx.num_flows,
                &ctx.dims,
                &mut rng::stream(ctx.seed, &[tag::DISC_INIT, stage_index as u64]),
            )?;
            reps.disc = vec![disc; nr];
            reps.disc_opt = vec![Adam::new(AdamConfig::with_lr(stage.lr_disc)); nr];
            run_phase(
                ctx,
                stage_index,
                stage,
                PhaseKind::TrajectoryConditional,
                stage.iterations,
                &teachers,
                &mut reps,
                &mut log,
            )?;
            for d in &mut reps.disc {
                d.reset_relaxed_head(&mut rng::stream(
                    ctx.seed,
                    &[tag::DISC_INIT, stage_index as u64, PhaseKind::Relaxed.code()],
                ));
            }
            reps.motion_opt = vec![Adam::new(AdamConfig::with_lr(stage.lr_student)); nr];
            reps.disc_opt = vec![Adam::new(AdamConfig::with_lr(stage.lr_disc)); nr];
            run_phase(
                ctx,
                stage_index,
                stage,
                PhaseKind::Relaxed,
                stage.relaxed_iterations,
                &teachers,
                &mut reps,
                &mut log,
            )?;
        }
    }
    Ok(StageOutcome {
        motion: reps.motion.swap_remove(0),
        disc: (!reps.disc.is_empty()).then(|| reps.disc.swap_remove(0)),
        log,
    })
}

/// File name of the checkpoint written after `stage`.
pub fn stage_checkpoint_name(index: usize, stage: &StageConfig) -> String {
    format!("stage{index}_{}to{}.ckpt", stage.from_steps, stage.to_steps)
}

/// Run every stage in order, promoting each student to teacher. Checkpoints
/// are written to `out_dir` when given.
pub fn run_progressive(
    ctx: &DistillContext,
    plan: &DistillPlan,
    initial: &MotionParams,
    out_dir: Option<&Path>,
    config_hash: Option<&str>,
) -> Result<ProgressiveOutcome> {
    plan.validate()?;
    plan.check_schedule(&ctx.sched)?;
    let mut teacher = initial.clone();
    let mut stages = Vec::with_capacity(plan.stages.len());
    let mut checkpoints = Vec::new();
    for (k, stage) in plan.stages.iter().enumerate() {
        log::info!("stage {k}: {}->{} {:?}", stage.from_steps, stage.to_steps, stage.loss_kind);
        let out = run_stage(ctx, k, stage, &teacher)?;
        if let Some(dir) = out_dir {
            let mut ckpt = Checkpoint::new("motion", out.motion.params.clone())
                .with_meta("stage", k)
                .with_meta("from_steps", stage.from_steps)
                .with_meta("to_steps", stage.to_steps)
                .with_meta("ranks", ctx.ranks.len());
            if let Some(h) = config_hash {
                ckpt = ckpt.with_hash(h);
            }
            let path = dir.join(stage_checkpoint_name(k, stage));
            checkpoint_save(&ckpt, &path)?;
            checkpoints.push(path);
        }
        teacher = out.motion.clone();
        stages.push(out);
    }
    Ok(ProgressiveOutcome {
        motion: teacher,
        stages,
        checkpoints,
    })
}
