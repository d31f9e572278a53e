use flowdistill::datagen::{
    flip_augment, flip_clip, generate_distill_dataset, pool_by_group, sample_ground_truth,
    ClipDataset, GenerationSettings, Provenance, StyleGroup, StyleSpec,
};
use flowdistill::nets::{BaseParams, MotionParams, StudentBundle};
use flowdistill::{rng, Condition, NetDims, RunConfig};

#[test]
fn gaussian_marginal_mean_within_three_standard_errors() {
    let (mean, std) = (0.25, 2.0);
    let style = StyleSpec::gaussian(0, "g", StyleGroup::Default, mean, std);
    let n = 10_000;
    let ds = sample_ground_truth(&style, n, 3, 2, 4, 17).unwrap();
    let se = std / (n as f64).sqrt();
    for f in 0..3 {
        for d in 0..2 {
            let m = ds.clips.iter().map(|c| c.get(f, d)).sum::<f64>() / n as f64;
            assert!((m - mean).abs() < 3.0 * se, "frame {f} coord {d}: {m}");
        }
    }
}

#[test]
fn generation_defaults_match_the_teacher_recipe() {
    let g = GenerationSettings::default();
    assert_eq!((g.steps, g.cfg_scale), (32, 7.5));
}

fn toy_teacher() -> (NetDims, StudentBundle) {
    let d = RunConfig::smoke().nets;
    let mut r = rng::stream(3, &[]);
    let base = BaseParams::init(1, &d, &mut r);
    let motion = MotionParams::init(&d, &mut r);
    (d, StudentBundle::new(d, base, motion).unwrap())
}

#[test]
fn generation_is_seeded_and_chunk_invariant() {
    let cfg = RunConfig::smoke();
    let sched = cfg.schedule().unwrap();
    let (d, teacher) = toy_teacher();
    let style = cfg.style(1).unwrap();
    let conds: Vec<Condition> = (0..7).map(|i| Condition::Token(i % d.vocab as u32)).collect();
    let gen = |chunk, seed| {
        let settings = GenerationSettings {
            steps: 4,
            chunk,
            ..GenerationSettings::default()
        };
        generate_distill_dataset(&teacher, style, &conds, d.frames, d.frame_dim, &settings, seed, &sched).unwrap()
    };
    let a = gen(3, 9);
    assert_eq!(a.len(), 7);
    assert_eq!(a.provenance, Provenance::TeacherGenerated);
    assert_eq!(a.style_id, Some(1));
    assert_eq!(a.conditions, conds);
    assert_eq!(a, gen(3, 9));
    assert_eq!(a, gen(100, 9));
    assert_ne!(a, gen(3, 10));
}

#[test]
fn flip_doubles_and_negates_one_coordinate() {
    let cfg = RunConfig::smoke();
    let d = cfg.nets;
    let ds = sample_ground_truth(cfg.style(3).unwrap(), 5, d.frames, d.frame_dim, d.vocab, 2).unwrap();
    let f = flip_augment(&ds);
    assert_eq!(f.len(), 10);
    assert_eq!(&f.clips[..5], &ds.clips[..]);
    for (orig, flipped) in ds.clips.iter().zip(&f.clips[5..]) {
        for fr in 0..d.frames {
            assert_eq!(flipped.get(fr, 0), -orig.get(fr, 0));
            assert_eq!(flipped.get(fr, 1), orig.get(fr, 1));
        }
        assert_eq!(&flip_clip(flipped), orig);
    }
    assert_eq!(&f.conditions[5..], &ds.conditions[..]);

    let empty = ClipDataset::new(Vec::new(), Vec::new(), Provenance::GroundTruth, StyleGroup::Default, Some(0)).unwrap();
    assert!(flip_augment(&empty).is_empty());
}

#[test]
fn pooling_keeps_a_group_together() {
    let cfg = RunConfig::smoke();
    let d = cfg.nets;
    let gt = |s| sample_ground_truth(cfg.style(s).unwrap(), 4, d.frames, d.frame_dim, d.vocab, 5).unwrap();
    let pooled = pool_by_group(&[gt(3), gt(4), gt(5)]).unwrap();
    assert_eq!(pooled.len(), 12);
    assert_eq!(pooled.group, StyleGroup::AnimeAnalog);
    assert_eq!(pooled.style_id, None);
    assert_eq!(pool_by_group(&[gt(1), gt(1)]).unwrap().style_id, Some(1));
    assert!(pool_by_group(&[gt(1), gt(3)]).is_err());
    assert!(pool_by_group(&[]).is_err());
}
