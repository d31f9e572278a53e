use std::sync::OnceLock;

use flowdistill::eval::EvalReport;
use flowdistill::pipeline::{self, Arm, Run};
use flowdistill::{Error, RunConfig};
use tempfile::TempDir;

/// One smoke run through distillation, shared by the tests below.
fn smoke() -> &'static Run {
    static RUN: OnceLock<(TempDir, Run)> = OnceLock::new();
    &RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(RunConfig::smoke(), dir.path()).unwrap();
        pipeline::pretrain(&run).unwrap();
        pipeline::gen_data(&run).unwrap();
        pipeline::distill(&run, Arm::Cross).unwrap();
        pipeline::distill(&run, Arm::Single).unwrap();
        (dir, run)
    })
    .1
}

#[test]
fn main_report_has_every_cell_and_regenerates_identically() {
    let run = smoke();
    let styles = &run.cfg.eval.styles;
    let a = pipeline::run_main_comparison(run, styles, false).unwrap();
    assert_eq!(a.distilled.flat.styles(), vec![1, 3, 6, 7]);
    assert_eq!(a.distilled.flat.step_counts(), vec![1, 2, 4, 8]);
    assert_eq!(a.distilled.flat.rows.len(), 16);
    assert_eq!(a.distilled.marginal.rows.len(), 16);
    assert_eq!(a.undistilled.flat.rows.len(), 4);
    for r in a.distilled.flat.rows.iter().chain(&a.undistilled.flat.rows) {
        assert!(r.metric >= 0.0 && r.metric.is_finite());
        assert_eq!(r.n, run.cfg.eval.samples());
    }
    let b = pipeline::run_main_comparison(run, styles, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn written_reports_load_back() {
    let run = smoke();
    let got = pipeline::run_main_comparison(run, &[1, 3], true).unwrap();
    let back = EvalReport::load(&run.reports_dir().join("main.json")).unwrap();
    assert_eq!(back, got.distilled.flat);
    let csv = std::fs::read_to_string(run.reports_dir().join("main.csv")).unwrap();
    assert_eq!(csv, got.distilled.flat.to_csv());
}

#[test]
fn ablation_scores_both_arms_on_the_same_styles() {
    let run = smoke();
    let ab = pipeline::run_cross_ablation(run, false).unwrap();
    assert_eq!(ab.cross.flat.styles(), run.cfg.eval.ablation_styles);
    assert_eq!(ab.single.flat.styles(), run.cfg.eval.ablation_styles);
    assert_eq!(ab.cross.flat.step_counts(), vec![run.cfg.eval.ablation_steps]);
    let k = run.cfg.eval.ablation_steps;
    assert!(ab.cross.flat.checkpoints[&k].starts_with("cross/"));
    assert!(ab.single.flat.checkpoints[&k].starts_with("single/"));
}

#[test]
fn checkpoints_carry_their_arm_hash() {
    let run = smoke();
    let cross = run.load_distilled(Arm::Cross).unwrap();
    let single = run.load_distilled(Arm::Single).unwrap();
    assert_eq!(cross.keys().copied().collect::<Vec<_>>(), vec![2, 4, 8, 32]);
    assert_ne!(cross[&4].1, single[&4].1);
    // The single arm's checkpoints were written under its own config hash.
    let path = run.distill_dir(Arm::Single).join("stage2_8to4.ckpt");
    let ckpt = flowdistill::nets::checkpoint_load(&path).unwrap();
    assert!(ckpt.require_hash(run.hash(), &path).is_err());
}

#[test]
fn missing_checkpoint_fails_before_any_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(RunConfig::smoke(), dir.path()).unwrap();
    pipeline::pretrain(&run).unwrap();
    pipeline::gen_data(&run).unwrap();
    pipeline::distill(&run, Arm::Cross).unwrap();
    std::fs::remove_file(run.distill_dir(Arm::Cross).join("stage1_32to8.ckpt")).unwrap();
    let err = pipeline::run_main_comparison(&run, &run.cfg.eval.styles, true).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(ref p) if p.ends_with("stage1_32to8.ckpt")), "{err:?}");
    let reports = run.reports_dir();
    let written = std::fs::read_dir(&reports)
        .map(|d| d.filter_map(|e| e.ok()).filter(|e| e.file_name() != "pretrain.json").count())
        .unwrap_or(0);
    assert_eq!(written, 0);
}

#[test]
fn teacher_is_the_base_with_the_initial_motion_module() {
    let run = smoke();
    let t = pipeline::teacher(run, 3).unwrap();
    assert_eq!(t.base.style_id, 3);
    assert_eq!(t.motion, run.load_initial_motion().unwrap());
}

#[test]
fn sampling_is_reproducible() {
    let run = smoke();
    let a = pipeline::sample_clips(run, 1, 4, 5).unwrap();
    assert_eq!(a.len(), 5);
    assert_eq!(a, pipeline::sample_clips(run, 1, 4, 5).unwrap());
}
