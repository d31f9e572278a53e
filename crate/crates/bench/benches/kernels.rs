use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use flowdistill::autodiff::Tape;
use flowdistill::datagen::sample_ground_truth;
use flowdistill::eval::energy_distance;
use flowdistill::nets::{denoising_loss, BaseParams, DenoisingBatch, MotionParams, StudentBundle};
use flowdistill::solvers::{multistep_solve_batch, EpsPredictor};
use flowdistill::tensor::Matrix;
use flowdistill::{rng, ClipBatch, Condition, RunConfig};

fn bundle(cfg: &RunConfig) -> StudentBundle {
    let d = cfg.nets;
    let mut r = rng::stream(1, &[]);
    let base = BaseParams::init(1, &d, &mut r);
    let motion = MotionParams::init(&d, &mut r);
    StudentBundle::new(d, base, motion).unwrap()
}

fn noise(cfg: &RunConfig, n: usize) -> ClipBatch {
    let d = cfg.nets;
    let rows = n * d.frames;
    let mut r = rng::stream(2, &[]);
    let values = Matrix::from_vec(rows, d.frame_dim, rng::normals(&mut r, rows * d.frame_dim)).unwrap();
    ClipBatch::from_matrix(d.frames, values).unwrap()
}

fn student(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let s = bundle(&cfg);
    let x = noise(&cfg, 64);
    let ts = vec![500; 64];
    let conds: Vec<Condition> = (0..64).map(|i| Condition::Token(i % cfg.nets.vocab as u32)).collect();
    c.bench_function("student_forward_64", |b| {
        b.iter(|| s.predict_eps(black_box(&x), &ts, &conds).unwrap())
    });
    let sched = cfg.schedule().unwrap();
    c.bench_function("student_4step_sample_64", |b| {
        b.iter(|| multistep_solve_batch(&s, black_box(&x), 4, &conds, 0.0, &sched).unwrap())
    });
}

fn backward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let s = bundle(&cfg);
    let d = cfg.nets;
    let sched = cfg.schedule().unwrap();
    let ds = sample_ground_truth(cfg.style(1).unwrap(), 256, d.frames, d.frame_dim, d.vocab, 3).unwrap();
    let mut r = rng::stream(4, &[]);
    let batch = DenoisingBatch::draw(&ds, 64, 0.1, &d, &sched, &mut r).unwrap();
    c.bench_function("denoising_loss_backward_64", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let (bv, mv) = s.bind(&mut tape, true).unwrap();
                let loss = denoising_loss(&mut tape, &bv, Some(&mv), &batch, &d).unwrap();
                tape.backward(loss).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn energy(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let d = cfg.nets;
    let a = sample_ground_truth(cfg.style(1).unwrap(), 400, d.frames, d.frame_dim, d.vocab, 5).unwrap();
    let b = sample_ground_truth(cfg.style(1).unwrap(), 400, d.frames, d.frame_dim, d.vocab, 6).unwrap();
    c.bench_function("energy_distance_400x400", |bench| {
        bench.iter(|| energy_distance(black_box(&a.clips), black_box(&b.clips)).unwrap())
    });
}

criterion_group!(benches, student, backward, energy);
criterion_main!(benches);
