use std::collections::{BTreeMap, BTreeSet};

use flowdistill::autodiff::Gradients;
use flowdistill::cross_rank::{
    accumulate_and_update, all_reduce_shared, build_assignment, AssignmentConfig, GradAccumulator,
    RankAssignment, ReductionSpec,
};
use flowdistill::optim::{Adam, AdamConfig};
use flowdistill::tensor::{Matrix, ParamSet, Tensor};
use flowdistill::{Error, RunConfig};

fn table(cfg: &RunConfig) -> flowdistill::Result<Vec<RankAssignment>> {
    build_assignment(
        &AssignmentConfig {
            ranks: cfg.ranks.clone(),
        },
        &cfg.style_groups(),
        &cfg.dataset_groups()?,
    )
}

#[test]
fn default_table_has_eight_ranks() {
    let cfg = RunConfig::default();
    let ranks = table(&cfg).unwrap();
    let styles: Vec<usize> = ranks.iter().map(|r| r.style).collect();
    assert_eq!(styles, vec![0, 0, 1, 2, 3, 3, 4, 5]);
    let datasets: Vec<&str> = ranks.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(datasets, vec!["real", "real", "realistic", "realistic", "anime", "anime", "anime", "anime"]);
}

#[test]
fn one_rank_degenerates_to_the_single_model_arm() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.with_rank_count(1).unwrap(), cfg.single_model().unwrap());
    let sixteen = cfg.with_rank_count(16).unwrap();
    assert_eq!(table(&sixteen).unwrap().len(), 16);
    assert_eq!(sixteen.ranks[9].style, cfg.ranks[1].style);
    assert!(cfg.with_rank_count(0).is_err());
}

#[test]
fn invalid_tables_are_rejected() {
    let mut dup = RunConfig::default();
    dup.ranks[3].rank = 2;
    assert!(matches!(table(&dup), Err(Error::Config(_))));

    let mut unseen = RunConfig::default();
    unseen.ranks[0].style = 6;
    assert!(table(&unseen).is_err());

    let mut wrong_data = RunConfig::default();
    wrong_data.ranks[2].dataset = "anime".into();
    assert!(table(&wrong_data).is_err());
}

fn grads(vals: &[(&str, f64)]) -> Gradients {
    vals.iter()
        .map(|(k, v)| (k.to_string(), Matrix::from_vec(1, 2, vec![*v, -*v]).unwrap()))
        .collect()
}

#[test]
fn reduction_is_a_mean_in_rank_order() {
    let spec = ReductionSpec::new(
        BTreeSet::from(["motion.a".to_string()]),
        BTreeSet::from(["base.w".to_string()]),
        vec![0, 1, 2],
    )
    .unwrap();
    let parts = vec![
        (2, grads(&[("motion.a", 0.3)])),
        (0, grads(&[("motion.a", 0.1)])),
        (1, grads(&[("motion.a", 0.2)])),
    ];
    let g = all_reduce_shared(&parts, &spec).unwrap();
    let want = (((0.0 + 0.1) + 0.2) + 0.3) * (1.0 / 3.0);
    assert_eq!(g["motion.a"].data(), &[want, -want]);
    let leaked = vec![(0, grads(&[("motion.a", 0.1), ("base.w", 1.0)]))];
    assert!(all_reduce_shared(&leaked, &spec).is_err());
}

#[test]
fn replicas_stay_identical_after_updates() {
    let mut params: ParamSet = BTreeMap::new();
    params.insert("motion.a".into(), Tensor::new(vec![2], vec![0.5, -0.25]).unwrap());
    let mut reps = [params.clone(), params.clone(), params];
    let mut opts = vec![Adam::new(AdamConfig::with_lr(1e-2)); 3];
    for step in 0..5 {
        let mut acc = GradAccumulator::new(2).unwrap();
        acc.push(grads(&[("motion.a", 0.1 * step as f64)])).unwrap();
        acc.push(grads(&[("motion.a", 0.7)])).unwrap();
        let mut views: Vec<_> = opts.iter_mut().zip(reps.iter_mut()).collect();
        accumulate_and_update(&mut acc, &mut views).unwrap();
        assert!(reps.iter().all(|r| r == &reps[0]));
    }
    assert_ne!(reps[0]["motion.a"].data, vec![0.5, -0.25]);
}
