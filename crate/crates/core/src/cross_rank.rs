//! Simulated data-parallel ranks sharing one motion module.
//!
//! Each rank holds its own frozen base, its own dataset, and a replica of the
//! shared trainable state. Gradients of the shared parameters are averaged
//! in ascending rank order, so the result does not depend on whether ranks
//! run sequentially or on threads. Base parameters never take part in a
//! reduction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use crate::distill::{rank_micro_step, Contribution, MicroStep, RankState};

use crate::autodiff::Gradients;
use crate::datagen::{ClipDataset, StyleGroup};
use crate::error::{Error, Result};
use crate::nets::{BaseParams, BASE_PREFIX};
use crate::optim::Adam;
use crate::tensor::{Matrix, ParamSet};

/// One row of the rank table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankAssignment {
    pub rank: usize,
    /// Base style id; also the discriminator flow index.
    pub style: usize,
    /// Dataset id.
    pub dataset: String,
}

/// Which parameter names are averaged across ranks and which never are.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionSpec {
    pub reduce_set: BTreeSet<String>,
    pub exclude_set: BTreeSet<String>,
    pub order: Vec<usize>,
}

impl ReductionSpec {
    pub fn new(
        reduce_set: BTreeSet<String>,
        exclude_set: BTreeSet<String>,
        order: Vec<usize>,
    ) -> Result<Self> {
        if let Some(name) = reduce_set.intersection(&exclude_set).next() {
            return Err(Error::Reduction(format!("`{name}` is both reduced and excluded")));
        }
        let mut sorted = order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != order.len() || order.is_empty() {
            return Err(Error::Reduction("rank order must be nonempty without duplicates".into()));
        }
        Ok(Self {
            reduce_set,
            exclude_set,
            order,
        })
    }

    /// Reduce the names of `shared`, exclude every base parameter name.
    pub fn for_shared(shared: &ParamSet, base: &BaseParams, ranks: &[RankAssignment]) -> Result<Self> {
        let mut order: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
        order.sort_unstable();
        Self::new(
            shared.keys().cloned().collect(),
            base.params
                .keys()
                .filter(|k| k.starts_with(BASE_PREFIX))
                .cloned()
                .collect(),
            order,
        )
    }
}

/// Rank table and dataset registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentConfig {
    pub ranks: Vec<RankAssignment>,
}

/// Check the rank table against registered styles and datasets.
///
/// `styles` maps style id to its group; `datasets` maps dataset id to the
/// group of data it holds.
pub fn build_assignment(
    cfg: &AssignmentConfig,
    styles: &BTreeMap<usize, StyleGroup>,
    datasets: &BTreeMap<String, StyleGroup>,
) -> Result<Vec<RankAssignment>> {
    if cfg.ranks.is_empty() {
        return Err(Error::Config("rank table is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for r in &cfg.ranks {
        if !seen.insert(r.rank) {
            return Err(Error::Config(format!("duplicate rank id {}", r.rank)));
        }
        let group = styles
            .get(&r.style)
            .ok_or_else(|| Error::Config(format!("rank {}: unknown style {}", r.rank, r.style)))?;
        if *group == StyleGroup::Unseen {
            return Err(Error::Config(format!(
                "rank {}: style {} is held out for evaluation",
                r.rank, r.style
            )));
        }
        let ds_group = datasets.get(&r.dataset).ok_or_else(|| {
            Error::Config(format!("rank {}: unknown dataset `{}`", r.rank, r.dataset))
        })?;
        if ds_group != group {
            return Err(Error::Config(format!(
                "rank {}: style {} is {:?} but dataset `{}` holds {:?} data",
                r.rank, r.style, group, r.dataset, ds_group
            )));
        }
    }
    let mut out = cfg.ranks.clone();
    out.sort_by_key(|r| r.rank);
    Ok(out)
}

/// Fail unless a batch from `ds` may be used by a rank running `base_style`.
pub fn check_batch_provenance(
    rank: &RankAssignment,
    base_group: StyleGroup,
    ds: &ClipDataset,
) -> Result<()> {
    let ok = ds.group == base_group && ds.style_id.is_none_or(|s| s == rank.style);
    if !ok {
        return Err(Error::FlowMismatch {
            rank: rank.rank,
            base: rank.style,
            batch: format!("{:?} data of style {:?}", ds.group, ds.style_id),
        });
    }
    Ok(())
}

/// Elementwise mean of per-rank gradients, summed in `spec.order`.
///
/// `contributions` pairs rank ids with gradients; every contribution must
/// name the same parameters, all inside the reduce set.
pub fn all_reduce_shared(contributions: &[(usize, Gradients)], spec: &ReductionSpec) -> Result<Gradients> {
    let by_rank: BTreeMap<usize, &Gradients> = contributions.iter().map(|(r, g)| (*r, g)).collect();
    if by_rank.len() != contributions.len() {
        return Err(Error::Reduction("duplicate rank in contributions".into()));
    }
    if by_rank.len() != spec.order.len() || spec.order.iter().any(|r| !by_rank.contains_key(r)) {
        return Err(Error::Reduction(format!(
            "expected contributions from ranks {:?}, got {:?}",
            spec.order,
            by_rank.keys().collect::<Vec<_>>()
        )));
    }
    let first = by_rank[&spec.order[0]];
    for (rank, g) in &by_rank {
        for name in g.keys() {
            if spec.exclude_set.contains(name) {
                return Err(Error::Reduction(format!(
                    "rank {rank} emitted a gradient for excluded `{name}`"
                )));
            }
            if !spec.reduce_set.contains(name) {
                return Err(Error::Reduction(format!("rank {rank}: unexpected `{name}`")));
            }
        }
        if g.len() != first.len() || g.keys().zip(first.keys()).any(|(a, b)| a != b) {
            return Err(Error::Reduction(format!("rank {rank} covers different parameters")));
        }
    }
    let mut out = Gradients::new();
    for (name, g0) in first {
        let mut acc = Matrix::zeros(g0.rows(), g0.cols());
        for r in &spec.order {
            acc.add_assign(&by_rank[r][name]);
        }
        acc.scale_assign(1.0 / spec.order.len() as f64);
        out.insert(name.clone(), acc);
    }
    Ok(out)
}

/// Collects `A` reduced gradients before one optimizer update.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    steps: usize,
    parts: Vec<Gradients>,
}

impl GradAccumulator {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("accumulation needs at least one micro-step".into()));
        }
        Ok(Self {
            steps,
            parts: Vec::with_capacity(steps),
        })
    }

    pub fn push(&mut self, g: Gradients) -> Result<()> {
        if self.parts.len() == self.steps {
            return Err(Error::Reduction("accumulator is full; apply the update first".into()));
        }
        self.parts.push(g);
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.parts.len() == self.steps
    }

    pub fn pending(&self) -> usize {
        self.parts.len()
    }

    /// Mean of the accumulated gradients; empties the accumulator.
    pub fn take_mean(&mut self) -> Result<Gradients> {
        if !self.is_ready() {
            return Err(Error::Reduction(format!(
                "update attempted after {} of {} micro-steps",
                self.parts.len(),
                self.steps
            )));
        }
        let mean = crate::optim::mean_gradients(&self.parts)?;
        self.parts.clear();
        Ok(mean)
    }
}

/// Apply the accumulated mean gradient once to every replica's copy of the
/// shared parameters, each with its own optimizer state, then confirm the
/// replicas agree bit for bit.
pub fn accumulate_and_update(
    acc: &mut GradAccumulator,
    replicas: &mut [(&mut Adam, &mut ParamSet)],
) -> Result<()> {
    let g = acc.take_mean()?;
    for (opt, params) in replicas.iter_mut() {
        opt.update(params, &g)?;
    }
    if let Some(((_, first), rest)) = replicas.split_first() {
        for (i, (_, p)) in rest.iter().enumerate() {
            if !crate::tensor::params_bit_identical(first, p) {
                return Err(Error::Reduction(format!(
                    "replica {} diverged from replica 0 after an update",
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

/// How per-rank micro-steps are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Executor {
    #[default]
    Sequential,
    Threads,
}

impl Executor {
    /// Run `f` once per item; results come back in item order either way.
    pub fn map<T: Sync, R: Send>(
        self,
        items: &[T],
        f: impl Fn(&T) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        match self {
            Executor::Sequential => items.iter().map(&f).collect(),
            Executor::Threads => std::thread::scope(|scope| {
                let handles: Vec<_> = items
                    .iter()
                    .map(|item| {
                        let f = &f;
                        scope.spawn(move || f(item))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("rank worker panicked"))
                    .collect()
            }),
        }
    }
}
