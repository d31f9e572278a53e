//! End-to-end experiment steps over a run directory.
//!
//! ```text
//! <run>/manifest.json          config hash of the run
//! <run>/config.toml            the config the run was created with
//! <run>/bases/style<i>.ckpt    frozen per-frame bases
//! <run>/motion/initial.ckpt    pretrained motion module
//! <run>/data/<id>.clips        distillation datasets
//! <run>/distill/<arm>/*.ckpt   one checkpoint per stage
//! <run>/reports/*              CSV, JSON and plot data
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clip::{Clip, ClipBatch};
use crate::config::{DatasetSource, RunConfig};
use crate::cross_rank::{build_assignment, AssignmentConfig};
use crate::datagen::{
    dataset_load, dataset_save, draw_conditions, flip_augment, generate_distill_dataset,
    pool_by_group, sample_ground_truth, ClipDataset,
};
use crate::distill::{run_progressive, stage_checkpoint_name, DistillContext, IterationLog, RankState};
use crate::error::{Error, Result};
use crate::eval::{energy_distance, energy_distance_marginal, EvalReport, ReportRow};
use crate::fsutil::write_atomic;
use crate::nets::{
    checkpoint_load, checkpoint_save, pretrain_base, pretrain_motion, BaseParams, Checkpoint,
    Condition, MotionParams, PretrainReport, StudentBundle,
};
use crate::rng::{self, tag};
use crate::solvers::{sample_batch, EpsPredictor, SolverKind};

/// Which rank table a distillation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The full rank table.
    Cross,
    /// One rank on the default base.
    Single,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Cross => "cross",
            Arm::Single => "single",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
}

/// A run directory bound to one config.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    hash: String,
}

impl Run {
    /// Open `root`, creating it if needed. An existing run made with a
    /// different config is refused.
    pub fn open(cfg: RunConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let manifest = root.join("manifest.json");
        if manifest.exists() {
            let text = std::fs::read_to_string(&manifest)?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
                path: manifest.clone(),
                reason: e.to_string(),
            })?;
            if m.config_hash != hash {
                return Err(Error::ConfigHashMismatch {
                    artifact: manifest,
                    expected: hash,
                    found: m.config_hash,
                });
            }
        } else {
            std::fs::create_dir_all(root)?;
            write_atomic(&root.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            let body = serde_json::to_string_pretty(&RunManifest {
                config_hash: hash.clone(),
            })
            .expect("manifest serializes");
            write_atomic(&manifest, body.as_bytes())?;
        }
        Ok(Self {
            cfg,
            root: root.to_path_buf(),
            hash,
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn base_path(&self, style: usize) -> PathBuf {
        self.root.join("bases").join(format!("style{style}.ckpt"))
    }

    pub fn motion_path(&self) -> PathBuf {
        self.root.join("motion").join("initial.ckpt")
    }

    pub fn dataset_path(&self, id: &str) -> PathBuf {
        self.root.join("data").join(format!("{id}.clips"))
    }

    pub fn distill_dir(&self, arm: Arm) -> PathBuf {
        self.root.join("distill").join(arm.name())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Config whose hash the checkpoints of `arm` carry.
    pub fn arm_config(&self, arm: Arm) -> Result<RunConfig> {
        match arm {
            Arm::Cross => Ok(self.cfg.clone()),
            Arm::Single => self.cfg.single_model(),
        }
    }

    fn load_checked(&self, path: &Path, kind: &str, hash: &str) -> Result<Checkpoint> {
        let ckpt = checkpoint_load(path)?;
        if ckpt.kind != kind {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected a `{kind}` checkpoint, found `{}`", ckpt.kind),
            });
        }
        ckpt.require_hash(hash, path)?;
        Ok(ckpt)
    }

    pub fn load_base(&self, style: usize) -> Result<BaseParams> {
        let path = self.base_path(style);
        let ckpt = self.load_checked(&path, "base", &self.hash)?;
        let base = BaseParams {
            style_id: style,
            params: ckpt.params,
        };
        base.validate(&self.cfg.nets)?;
        Ok(base)
    }

    pub fn load_initial_motion(&self) -> Result<MotionParams> {
        let ckpt = self.load_checked(&self.motion_path(), "motion", &self.hash)?;
        let m = MotionParams { params: ckpt.params };
        m.validate(&self.cfg.nets)?;
        Ok(m)
    }

    pub fn load_dataset(&self, id: &str) -> Result<ClipDataset> {
        self.cfg.dataset(id)?;
        dataset_load(&self.dataset_path(id))
    }

    /// Stage checkpoints of `arm`, keyed by the student's step count.
    pub fn load_distilled(&self, arm: Arm) -> Result<BTreeMap<usize, (String, MotionParams)>> {
        let hash = self.arm_config(arm)?.hash();
        let dir = self.distill_dir(arm);
        let mut out = BTreeMap::new();
        for (k, st) in self.cfg.plan.stages.iter().enumerate() {
            let name = stage_checkpoint_name(k, st);
            let ckpt = self.load_checked(&dir.join(&name), "motion", &hash)?;
            let m = MotionParams { params: ckpt.params };
            m.validate(&self.cfg.nets)?;
            out.insert(st.to_steps, (format!("{}/{name}", arm.name()), m));
        }
        Ok(out)
    }

    fn ground_truth(&self, style: usize, n: usize) -> Result<ClipDataset> {
        let d = &self.cfg.nets;
        sample_ground_truth(self.cfg.style(style)?, n, d.frames, d.frame_dim, d.vocab, self.cfg.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub bases: BTreeMap<usize, PretrainReport>,
    pub motion: PretrainReport,
}

/// Train every base (the default style from scratch, the rest fine-tuned
/// from it), then the motion module on the default base.
pub fn pretrain(run: &Run) -> Result<PretrainSummary> {
    let cfg = &run.cfg;
    let sched = cfg.schedule()?;
    let p = &cfg.pretrain;
    let save_base = |b: &BaseParams| {
        checkpoint_save(
            &Checkpoint::new("base", b.params.clone())
                .with_hash(run.hash())
                .with_meta("style", b.style_id),
            &run.base_path(b.style_id),
        )
    };
    let mut bases = BTreeMap::new();
    let default_ds = run.ground_truth(p.default_style, p.clips_per_style)?;
    log::info!("pretraining base {}", p.default_style);
    let (default_base, report) =
        pretrain_base(&default_ds, p.default_style, None, &p.base, &cfg.nets, &sched, cfg.seed)?;
    save_base(&default_base)?;
    bases.insert(p.default_style, report);
    for s in &cfg.styles {
        if s.style_id == p.default_style {
            continue;
        }
        log::info!("fine-tuning base {}", s.style_id);
        let ds = run.ground_truth(s.style_id, p.clips_per_style)?;
        let (b, report) = pretrain_base(
            &ds,
            s.style_id,
            Some(&default_base),
            &p.finetune,
            &cfg.nets,
            &sched,
            cfg.seed,
        )?;
        save_base(&b)?;
        bases.insert(s.style_id, report);
    }
    log::info!("pretraining motion module");
    let (motion, motion_report) =
        pretrain_motion(&default_base, &default_ds, None, &p.motion, &cfg.nets, &sched, cfg.seed)?;
    checkpoint_save(
        &Checkpoint::new("motion", motion.params).with_hash(run.hash()),
        &run.motion_path(),
    )?;
    let summary = PretrainSummary {
        bases,
        motion: motion_report,
    };
    let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&run.reports_dir().join("pretrain.json"), body.as_bytes())?;
    Ok(summary)
}

/// The pretrained teacher `f_i ∘ m₀` for a style.
pub fn teacher(run: &Run, style: usize) -> Result<StudentBundle> {
    StudentBundle::new(run.cfg.nets, run.load_base(style)?, run.load_initial_motion()?)
}

/// Build every dataset of the config: ground truth drawn directly, generated
/// sets sampled from each style's teacher. Condition tokens are shared across
/// styles.
pub fn gen_data(run: &Run) -> Result<BTreeMap<String, usize>> {
    let cfg = &run.cfg;
    let sched = cfg.schedule()?;
    let d = &cfg.nets;
    let mut sizes = BTreeMap::new();
    for spec in &cfg.datasets {
        let mut parts = Vec::new();
        for &s in &spec.styles {
            let part = match spec.source {
                DatasetSource::GroundTruth => run.ground_truth(s, spec.clips_per_style)?,
                DatasetSource::Generated => {
                    log::info!("generating {} clips for style {s}", spec.clips_per_style);
                    let conds = draw_conditions(
                        spec.clips_per_style,
                        d.vocab,
                        rng::derive_seed(cfg.seed, &[tag::GENERATE]),
                    );
                    generate_distill_dataset(
                        &teacher(run, s)?,
                        cfg.style(s)?,
                        &conds,
                        d.frames,
                        d.frame_dim,
                        &cfg.generation,
                        cfg.seed,
                        &sched,
                    )?
                }
            };
            parts.push(part);
        }
        let mut ds = pool_by_group(&parts)?;
        if spec.flip {
            ds = flip_augment(&ds);
        }
        dataset_save(&ds, &run.dataset_path(&spec.id))?;
        sizes.insert(spec.id.clone(), ds.len());
    }
    Ok(sizes)
}

/// Assemble the read-only state of a distillation run for `arm`.
pub fn distill_context(run: &Run, arm: Arm) -> Result<DistillContext> {
    let cfg = run.arm_config(arm)?;
    let groups = cfg.style_groups();
    let ranks = build_assignment(
        &AssignmentConfig {
            ranks: cfg.ranks.clone(),
        },
        &groups,
        &cfg.dataset_groups()?,
    )?;
    let mut bases = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    let mut states = Vec::with_capacity(ranks.len());
    for r in ranks {
        if let std::collections::btree_map::Entry::Vacant(e) = bases.entry(r.style) {
            e.insert(Arc::new(run.load_base(r.style)?));
        }
        if !datasets.contains_key(&r.dataset) {
            datasets.insert(r.dataset.clone(), Arc::new(run.load_dataset(&r.dataset)?));
        }
        states.push(RankState {
            base: bases[&r.style].clone(),
            base_group: groups[&r.style],
            dataset: datasets[&r.dataset].clone(),
            assignment: r,
        });
    }
    let ctx = DistillContext {
        dims: cfg.nets,
        sched: cfg.schedule()?,
        ranks: states,
        disc_base: Arc::new(run.load_base(cfg.pretrain.default_style)?),
        disc_motion: Arc::new(run.load_initial_motion()?),
        num_flows: cfg.num_flows(),
        seed: cfg.seed,
        executor: cfg.executor,
        dump_dir: Some(run.distill_dir(arm)),
    };
    ctx.validate()?;
    Ok(ctx)
}

/// Run the stage plan for `arm`, writing one checkpoint per stage and the
/// loss log.
pub fn distill(run: &Run, arm: Arm) -> Result<Vec<IterationLog>> {
    let ctx = distill_context(run, arm)?;
    let hash = run.arm_config(arm)?.hash();
    let dir = run.distill_dir(arm);
    std::fs::create_dir_all(&dir)?;
    let initial = run.load_initial_motion()?;
    let out = run_progressive(&ctx, &run.cfg.plan, &initial, Some(&dir), Some(&hash))?;
    let log: Vec<IterationLog> = out.stages.into_iter().flat_map(|s| s.log).collect();
    let mut csv = String::from("stage,phase,iteration,side,loss\n");
    for l in &log {
        csv.push_str(&format!(
            "{},{:?},{},{:?},{}\n",
            l.stage, l.phase, l.iteration, l.side, l.loss
        ));
    }
    write_atomic(&dir.join("losses.csv"), csv.as_bytes())?;
    Ok(log)
}

/// Evaluation conditions and noise seeds, shared by every arm and style.
pub fn eval_inputs(cfg: &RunConfig) -> (Vec<Condition>, Vec<u64>) {
    let e = &cfg.eval;
    let tokens = draw_conditions(e.conditions, cfg.nets.vocab, rng::derive_seed(cfg.seed, &[tag::EVAL]));
    let mut conds = Vec::with_capacity(e.samples());
    let mut seeds = Vec::with_capacity(e.samples());
    for (j, &c) in tokens.iter().enumerate() {
        for k in 0..e.samples_per_condition {
            conds.push(c);
            seeds.push(rng::derive_seed(cfg.seed, &[tag::EVAL, j as u64, k as u64]));
        }
    }
    (conds, seeds)
}

fn draw(
    run: &Run,
    model: &dyn EpsPredictor,
    steps: usize,
    w: f64,
    solver: SolverKind,
) -> Result<Vec<Clip>> {
    let (conds, seeds) = eval_inputs(&run.cfg);
    let d = &run.cfg.nets;
    let out: ClipBatch = sample_batch(model, d.frames, d.frame_dim, steps, &conds, &seeds, w, solver, &run.cfg.schedule()?)?;
    Ok(out.to_clips())
}

/// The 32-step guided teacher sample set a style is scored against.
pub fn reference_set(run: &Run, style: usize) -> Result<Vec<Clip>> {
    let e = &run.cfg.eval;
    draw(run, &teacher(run, style)?, e.reference_steps, e.reference_cfg, e.reference_solver)
}

/// Unguided Euler samples of `f_style ∘ motion`.
pub fn student_set(run: &Run, style: usize, motion: &MotionParams, steps: usize) -> Result<Vec<Clip>> {
    let model = StudentBundle::new(run.cfg.nets, run.load_base(style)?, motion.clone())?;
    draw(run, &model, steps, 0.0, SolverKind::Euler)
}

/// Distilled checkpoint used for `steps`: the most distilled stage whose
/// student step count is at least `steps`.
pub fn checkpoint_for(
    ckpts: &BTreeMap<usize, (String, MotionParams)>,
    steps: usize,
) -> Result<&(String, MotionParams)> {
    ckpts
        .range(steps..)
        .next()
        .map(|(_, v)| v)
        .ok_or_else(|| Error::InvalidArgument(format!("no distilled checkpoint serves {steps} steps")))
}

/// Both metric variants for one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportPair {
    pub flat: EvalReport,
    pub marginal: EvalReport,
}

impl ReportPair {
    fn new(run: &Run, arm: &str, reference: &str, checkpoints: BTreeMap<usize, String>) -> Self {
        let report = |metric: &str| EvalReport {
            arm: arm.into(),
            metric: metric.into(),
            seed: run.cfg.seed,
            config_hash: run.hash().to_string(),
            checkpoints: checkpoints.clone(),
            reference: reference.into(),
            rows: Vec::new(),
        };
        Self {
            flat: report("energy_distance"),
            marginal: report("energy_distance_marginal"),
        }
    }

    fn push(&mut self, style: usize, steps: usize, seed: u64, a: &[Clip], reference: &[Clip]) -> Result<()> {
        let n = a.len();
        let row = |metric: f64| ReportRow {
            style,
            steps,
            metric: metric.max(0.0),
            n,
            seed,
        };
        self.flat.rows.push(row(energy_distance(a, reference)?));
        self.marginal.rows.push(row(energy_distance_marginal(a, reference)?));
        Ok(())
    }

    fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        self.flat.write(dir, stem)?;
        self.marginal.write(dir, &format!("{stem}_marginal"))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MainComparison {
    /// Distilled student per `(style, steps)`.
    pub distilled: ReportPair,
    /// Undistilled `f_i ∘ m₀` at the baseline step count.
    pub undistilled: ReportPair,
    /// The same at the reference guidance scale.
    pub undistilled_guided: ReportPair,
}

fn reference_name(run: &Run) -> String {
    let e = &run.cfg.eval;
    format!("teacher {:?} {} steps, cfg {}", e.reference_solver, e.reference_steps, e.reference_cfg)
}

/// Score the cross-model checkpoints on `styles` against each style's
/// teacher reference. Reports are written only after every cell is computed.
pub fn run_main_comparison(run: &Run, styles: &[usize], write: bool) -> Result<MainComparison> {
    let e = &run.cfg.eval;
    let ckpts = run.load_distilled(Arm::Cross)?;
    let mut used = BTreeMap::new();
    for &k in &e.steps {
        used.insert(k, checkpoint_for(&ckpts, k)?.0.clone());
    }
    let reference = reference_name(run);
    let mut distilled = ReportPair::new(run, "distilled", &reference, used);
    let initial_ckpt = BTreeMap::from([(e.baseline_steps, "motion/initial.ckpt".to_string())]);
    let mut undistilled = ReportPair::new(
        run,
        &format!("undistilled euler cfg {}", e.baseline_cfg),
        &reference,
        initial_ckpt.clone(),
    );
    let mut undistilled_guided = ReportPair::new(
        run,
        &format!("undistilled euler cfg {}", e.reference_cfg),
        &reference,
        initial_ckpt,
    );
    for &style in styles {
        log::info!("evaluating style {style}");
        let refs = reference_set(run, style)?;
        for &k in &e.steps {
            let (_, m) = checkpoint_for(&ckpts, k)?;
            let set = student_set(run, style, m, k)?;
            distilled.push(style, k, run.cfg.seed, &set, &refs)?;
        }
        let t = teacher(run, style)?;
        let base = draw(run, &t, e.baseline_steps, e.baseline_cfg, SolverKind::Euler)?;
        undistilled.push(style, e.baseline_steps, run.cfg.seed, &base, &refs)?;
        let guided = draw(run, &t, e.baseline_steps, e.reference_cfg, SolverKind::Euler)?;
        undistilled_guided.push(style, e.baseline_steps, run.cfg.seed, &guided, &refs)?;
    }
    if write {
        let dir = run.reports_dir();
        distilled.write(&dir, "main")?;
        undistilled.write(&dir, "baseline")?;
        undistilled_guided.write(&dir, "baseline_guided")?;
    }
    Ok(MainComparison {
        distilled,
        undistilled,
        undistilled_guided,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAblation {
    pub cross: ReportPair,
    pub single: ReportPair,
}

/// Score the cross-model and single-model motion modules at the ablation
/// step count on every ablation style.
pub fn run_cross_ablation(run: &Run, write: bool) -> Result<CrossAblation> {
    let e = &run.cfg.eval;
    let cross_cfg = run.arm_config(Arm::Cross)?;
    let single_cfg = run.arm_config(Arm::Single)?;
    let mut check = single_cfg.clone();
    check.ranks = cross_cfg.ranks.clone();
    if check != cross_cfg {
        return Err(Error::Config("ablation arms differ outside the rank table".into()));
    }
    let cross_ckpts = run.load_distilled(Arm::Cross)?;
    let single_ckpts = run.load_distilled(Arm::Single)?;
    let k = e.ablation_steps;
    let (cross_id, cross_m) = checkpoint_for(&cross_ckpts, k)?;
    let (single_id, single_m) = checkpoint_for(&single_ckpts, k)?;
    let reference = reference_name(run);
    let mut cross = ReportPair::new(run, "cross", &reference, BTreeMap::from([(k, cross_id.clone())]));
    let mut single = ReportPair::new(run, "single", &reference, BTreeMap::from([(k, single_id.clone())]));
    for &style in &e.ablation_styles {
        log::info!("ablation on style {style}");
        let refs = reference_set(run, style)?;
        cross.push(style, k, run.cfg.seed, &student_set(run, style, cross_m, k)?, &refs)?;
        single.push(style, k, run.cfg.seed, &student_set(run, style, single_m, k)?, &refs)?;
    }
    if write {
        let dir = run.reports_dir();
        cross.write(&dir, "ablation_cross")?;
        single.write(&dir, "ablation_single")?;
    }
    Ok(CrossAblation { cross, single })
}

/// Sample `count` clips from the distilled cross-model student.
pub fn sample_clips(run: &Run, style: usize, steps: usize, count: usize) -> Result<Vec<Clip>> {
    let ckpts = run.load_distilled(Arm::Cross)?;
    let (_, m) = checkpoint_for(&ckpts, steps)?;
    let model = StudentBundle::new(run.cfg.nets, run.load_base(style)?, m.clone())?;
    let conds = draw_conditions(count, run.cfg.nets.vocab, rng::derive_seed(run.cfg.seed, &[tag::SAMPLE]));
    let seeds: Vec<u64> = (0..count)
        .map(|j| rng::derive_seed(run.cfg.seed, &[tag::SAMPLE, j as u64]))
        .collect();
    let d = &run.cfg.nets;
    let out = sample_batch(&model, d.frames, d.frame_dim, steps, &conds, &seeds, 0.0, SolverKind::Euler, &run.cfg.schedule()?)?;
    Ok(out.to_clips())
}
