//! Run configuration, stored as TOML.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cross_rank::{build_assignment, AssignmentConfig, Executor, RankAssignment};
use crate::datagen::{GenerationSettings, StyleGroup, StyleSpec};
use crate::distill::{DistillPlan, LossKind, StageConfig};
use crate::error::{Error, Result};
use crate::nets::{NetDims, PretrainConfig};
use crate::schedule::NoiseSchedule;
use crate::solvers::SolverKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1024,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Style whose base is trained from scratch; every other base is
    /// fine-tuned from it.
    pub default_style: usize,
    /// Ground-truth clips drawn per style for pretraining.
    pub clips_per_style: usize,
    pub base: PretrainConfig,
    pub finetune: PretrainConfig,
    pub motion: PretrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    GroundTruth,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub source: DatasetSource,
    /// Styles pooled into this dataset; all must share a group.
    pub styles: Vec<usize>,
    pub clips_per_style: usize,
    /// Double the set with mirrored copies.
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Styles in the main comparison.
    pub styles: Vec<usize>,
    pub steps: Vec<usize>,
    /// Condition tokens per arm.
    pub conditions: usize,
    /// Noise seeds per condition.
    pub samples_per_condition: usize,
    pub reference_steps: usize,
    pub reference_cfg: f64,
    pub reference_solver: SolverKind,
    /// Step count of the undistilled baseline (Euler).
    pub baseline_steps: usize,
    /// Guidance of the baseline; 0 samples it like the distilled arms. A
    /// second baseline at `reference_cfg` is always reported as well.
    pub baseline_cfg: f64,
    /// Styles compared in the cross-model ablation.
    pub ablation_styles: Vec<usize>,
    pub ablation_steps: usize,
}

impl EvalConfig {
    pub fn samples(&self) -> usize {
        self.conditions * self.samples_per_condition
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub executor: Executor,
    pub schedule: ScheduleConfig,
    pub nets: NetDims,
    pub pretrain: PretrainSection,
    pub generation: GenerationSettings,
    pub styles: Vec<StyleSpec>,
    pub datasets: Vec<DatasetSpec>,
    pub plan: DistillPlan,
    pub ranks: Vec<RankAssignment>,
    pub eval: EvalConfig,
}

fn desk_stage(mut st: StageConfig, iterations: usize, relaxed: usize) -> StageConfig {
    st.iterations = iterations;
    st.relaxed_iterations = relaxed;
    if st.loss_kind == LossKind::Adversarial {
        st.lr_student = 5e-5;
    }
    st
}

impl Default for RunConfig {
    fn default() -> Self {
        use StyleGroup::*;
        let styles = vec![
            StyleSpec::mixture(0, "default", Default, [1.0, 1.0], 0.0, 0.8),
            StyleSpec::mixture(1, "realistic_a", RealisticAnalog, [1.2, 0.9], 0.3, 0.8),
            StyleSpec::mixture(2, "realistic_b", RealisticAnalog, [0.85, 1.15], -0.25, 0.75),
            StyleSpec::mixture(3, "anime_a", AnimeAnalog, [1.8, 0.6], 1.0, 0.6),
            StyleSpec::mixture(4, "anime_b", AnimeAnalog, [0.6, 1.7], -0.9, 0.9),
            StyleSpec::mixture(5, "anime_c", AnimeAnalog, [1.5, 1.5], 1.2, 0.5),
            StyleSpec::mixture(6, "unseen_near", Unseen, [1.1, 1.05], 0.15, 0.8),
            StyleSpec::mixture(7, "unseen_far", Unseen, [1.7, 0.7], -1.1, 0.55),
            StyleSpec::gaussian(8, "analytic", Unseen, 0.25, 2.0),
        ];
        let datasets = vec![
            DatasetSpec {
                id: "real".into(),
                source: DatasetSource::GroundTruth,
                styles: vec![0],
                clips_per_style: 20_000,
                flip: false,
            },
            DatasetSpec {
                id: "realistic".into(),
                source: DatasetSource::Generated,
                styles: vec![1, 2],
                clips_per_style: 10_000,
                flip: true,
            },
            DatasetSpec {
                id: "anime".into(),
                source: DatasetSource::Generated,
                styles: vec![3, 4, 5],
                clips_per_style: 6_667,
                flip: true,
            },
        ];
        let rank = |rank, style, dataset: &str| RankAssignment {
            rank,
            style,
            dataset: dataset.into(),
        };
        let ranks = vec![
            rank(0, 0, "real"),
            rank(1, 0, "real"),
            rank(2, 1, "realistic"),
            rank(3, 2, "realistic"),
            rank(4, 3, "anime"),
            rank(5, 3, "anime"),
            rank(6, 4, "anime"),
            rank(7, 5, "anime"),
        ];
        let plan = DistillPlan {
            stages: vec![
                desk_stage(StageConfig::mse(128, 32), 400, 0),
                desk_stage(StageConfig::adversarial(32, 8), 300, 100),
                desk_stage(StageConfig::adversarial(8, 4), 300, 100),
                desk_stage(StageConfig::adversarial(4, 2), 300, 100),
            ],
        };
        Self {
            seed: 0,
            executor: Executor::Sequential,
            schedule: ScheduleConfig::default(),
            nets: NetDims::default(),
            pretrain: PretrainSection {
                default_style: 0,
                clips_per_style: 20_000,
                base: PretrainConfig::default(),
                finetune: PretrainConfig {
                    iterations: 600,
                    ..PretrainConfig::default()
                },
                motion: PretrainConfig::default(),
            },
            generation: GenerationSettings::default(),
            styles,
            datasets,
            plan,
            ranks,
            eval: EvalConfig {
                styles: vec![1, 3, 6, 7],
                steps: vec![1, 2, 4, 8],
                conditions: 100,
                samples_per_condition: 4,
                reference_steps: 32,
                reference_cfg: 7.5,
                reference_solver: SolverKind::Euler,
                baseline_steps: 4,
                baseline_cfg: 0.0,
                ablation_styles: (0..8).collect(),
                ablation_steps: 4,
            },
        }
    }
}

impl RunConfig {
    /// The default layout at toy sizes: every step of the pipeline runs in
    /// seconds. Useful for tests and wiring checks, not for results.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.nets.frames = 3;
        cfg.nets.hidden = 8;
        cfg.nets.time_dim = 6;
        cfg.nets.head_hidden = 6;
        cfg.nets.vocab = 4;
        cfg.pretrain.clips_per_style = 64;
        for p in [&mut cfg.pretrain.base, &mut cfg.pretrain.finetune, &mut cfg.pretrain.motion] {
            p.iterations = 4;
            p.batch_size = 8;
            p.eval_size = 8;
        }
        cfg.generation.chunk = 16;
        for d in &mut cfg.datasets {
            d.clips_per_style = 12;
        }
        for st in &mut cfg.plan.stages {
            st.iterations = 2;
            st.relaxed_iterations = st.relaxed_iterations.min(2);
            st.micro_batch = 3;
            st.grad_accum = 2;
        }
        cfg.eval.conditions = 3;
        cfg.eval.samples_per_condition = 2;
        cfg.eval.reference_steps = 8;
        cfg.eval.ablation_styles = vec![0, 1, 6];
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a file, or a built-in preset when `path` is `default` or
    /// `smoke`.
    pub fn load(path: &Path) -> Result<Self> {
        if path.as_os_str() == "default" {
            return Ok(Self::default());
        }
        if path.as_os_str() == "smoke" {
            return Ok(Self::smoke());
        }
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn style(&self, id: usize) -> Result<&StyleSpec> {
        self.styles
            .iter()
            .find(|s| s.style_id == id)
            .ok_or_else(|| Error::Config(format!("unknown style {id}")))
    }

    pub fn dataset(&self, id: &str) -> Result<&DatasetSpec> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Config(format!("unknown dataset `{id}`")))
    }

    pub fn style_groups(&self) -> BTreeMap<usize, StyleGroup> {
        self.styles.iter().map(|s| (s.style_id, s.group)).collect()
    }

    /// Group of the data each dataset holds.
    pub fn dataset_groups(&self) -> Result<BTreeMap<String, StyleGroup>> {
        self.datasets
            .iter()
            .map(|d| Ok((d.id.clone(), self.style(d.styles[0])?.group)))
            .collect()
    }

    /// Discriminator flow-table rows: one per style id.
    pub fn num_flows(&self) -> usize {
        self.styles.iter().map(|s| s.style_id + 1).max().unwrap_or(0)
    }

    /// The single-model arm: the first rank on a default-group style.
    pub fn single_model(&self) -> Result<Self> {
        let groups = self.style_groups();
        let r = self
            .ranks
            .iter()
            .filter(|r| groups.get(&r.style) == Some(&StyleGroup::Default))
            .min_by_key(|r| r.rank)
            .ok_or_else(|| Error::Config("no rank runs a default-group style".into()))?;
        let mut cfg = self.clone();
        cfg.ranks = vec![RankAssignment {
            rank: 0,
            ..r.clone()
        }];
        Ok(cfg)
    }

    /// Resize the rank table to `n` workers by repeating it: rank `r` takes
    /// the assignment of row `r mod len`.
    pub fn with_rank_count(&self, n: usize) -> Result<Self> {
        if n == 0 || self.ranks.is_empty() {
            return Err(Error::Config("rank count must be >= 1".into()));
        }
        let mut rows = self.ranks.clone();
        rows.sort_by_key(|r| r.rank);
        let mut cfg = self.clone();
        cfg.ranks = (0..n)
            .map(|r| RankAssignment {
                rank: r,
                ..rows[r % rows.len()].clone()
            })
            .collect();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.nets.validate()?;
        let sched = self.schedule()?;
        if self.nets.num_timesteps != sched.num_timesteps() {
            return Err(Error::Config(format!(
                "nets.num_timesteps = {} but the schedule has {} steps",
                self.nets.num_timesteps,
                sched.num_timesteps()
            )));
        }
        let mut ids = BTreeSet::new();
        for s in &self.styles {
            if !ids.insert(s.style_id) {
                return Err(Error::Config(format!("duplicate style id {}", s.style_id)));
            }
            s.validate(self.nets.frame_dim)?;
        }
        let default = self.style(self.pretrain.default_style)?;
        if default.group != StyleGroup::Default {
            return Err(Error::Config(format!(
                "pretrain.default_style {} is not in the default group",
                default.style_id
            )));
        }
        if self.pretrain.clips_per_style == 0 {
            return Err(Error::Config("pretrain.clips_per_style must be >= 1".into()));
        }
        let mut ds_ids = BTreeSet::new();
        for d in &self.datasets {
            if !ds_ids.insert(d.id.as_str()) {
                return Err(Error::Config(format!("duplicate dataset id `{}`", d.id)));
            }
            if d.styles.is_empty() || d.clips_per_style == 0 {
                return Err(Error::Config(format!("dataset `{}` is empty", d.id)));
            }
            let group = self.style(d.styles[0])?.group;
            for &s in &d.styles {
                let st = self.style(s)?;
                if st.group == StyleGroup::Unseen {
                    return Err(Error::Config(format!(
                        "dataset `{}` uses held-out style {s}",
                        d.id
                    )));
                }
                if st.group != group {
                    return Err(Error::Config(format!(
                        "dataset `{}` mixes {:?} and {:?} styles",
                        d.id, group, st.group
                    )));
                }
            }
        }
        self.plan.validate()?;
        self.plan.check_schedule(&sched)?;
        build_assignment(
            &AssignmentConfig {
                ranks: self.ranks.clone(),
            },
            &self.style_groups(),
            &self.dataset_groups()?,
        )?;
        if self.generation.steps == 0 || !(self.generation.cfg_scale >= 0.0) {
            return Err(Error::Config("generation needs steps >= 1 and cfg_scale >= 0".into()));
        }
        let e = &self.eval;
        if e.samples() < 2 {
            return Err(Error::Config("eval needs at least 2 samples per arm".into()));
        }
        if e.steps.is_empty() || e.steps.contains(&0) || e.reference_steps == 0 || e.baseline_steps == 0 {
            return Err(Error::Config("eval step counts must be >= 1".into()));
        }
        for &s in e.styles.iter().chain(&e.ablation_styles) {
            self.style(s)?;
        }
        Ok(())
    }
}
