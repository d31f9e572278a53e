use flowdistill::clip::{Clip, ClipBatch};
use flowdistill::nets::{BaseParams, MotionParams, StudentBundle};
use flowdistill::rng;
use flowdistill::schedule::{add_noise, CLEAN};
use flowdistill::solvers::{
    cfg_combine, euler_solve, euler_step, multistep_solve, multistep_solve_batch, noise_clip,
    predict_x0, sample, AnalyticGaussian, EpsPredictor,
};
use flowdistill::tensor::Matrix;
use flowdistill::{Condition, NetDims, NoiseSchedule, Result};

const MEAN: f64 = 0.25;
const STD: f64 = 2.0;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1024, 0.00085, 0.012).unwrap()
}

fn analytic() -> AnalyticGaussian {
    AnalyticGaussian {
        mean: MEAN,
        var: STD * STD,
        schedule: sched(),
    }
}

/// Always predicts the same noise clip.
struct FixedEps(Clip);

impl EpsPredictor for FixedEps {
    fn predict_eps(&self, x_t: &ClipBatch, _: &[i64], _: &[Condition]) -> Result<ClipBatch> {
        ClipBatch::from_clips(&vec![self.0.clone(); x_t.len()])
    }
}

fn bundle(seed: u64) -> StudentBundle {
    let dims = NetDims {
        frames: 4,
        hidden: 8,
        ..NetDims::default()
    };
    let mut r = rng::stream(seed, &[]);
    let base = BaseParams::init(0, &dims, &mut r);
    let motion = MotionParams::init(&dims, &mut r);
    StudentBundle::new(dims, base, motion).unwrap()
}

#[test]
fn cfg_worked_example() {
    let u = Clip::from_fn(2, 2, |f, d| 0.5 + f as f64 - 2.0 * d as f64);
    let out = cfg_combine(&u, &Clip::zeros(2, 2), 7.5).unwrap();
    assert_eq!(out, u.map(|v| 7.5 * v));
}

#[test]
fn consistent_eps_lands_on_forward_process() {
    let s = sched();
    let x0 = Clip::from_fn(4, 2, |f, d| 0.3 * f as f64 - 0.7 * d as f64);
    let eps = noise_clip(9, 4, 2);
    let f = FixedEps(eps.clone());
    for (t, tn) in [(1000, 700), (500, 499), (64, 0), (300, CLEAN)] {
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        let got = euler_step(&f, &xt, t, tn, Condition::Null, 0.0, &s).unwrap();
        let want = if tn == CLEAN { x0.clone() } else { add_noise(&x0, &eps, tn, &s).unwrap() };
        assert!(got.max_abs_diff(&want) < 1e-12, "{t}->{tn}");
    }
}

#[test]
fn step_to_clean_returns_x0_hat() {
    let s = sched();
    let b = bundle(1);
    let x = noise_clip(2, 4, 2);
    let c = Condition::Token(3);
    let got = euler_step(&b, &x, 600, CLEAN, c, 0.0, &s).unwrap();
    let xb = ClipBatch::from_clips(std::slice::from_ref(&x)).unwrap();
    let eps = b.predict_eps(&xb, &[600], &[c]).unwrap();
    assert_eq!(got, predict_x0(&xb, &eps, &[600], &s).unwrap().clip(0));
}

#[test]
fn analytic_step_matches_scalar_formula() {
    let s = sched();
    let x = noise_clip(4, 4, 2);
    let (t, tn) = (767i64, 511i64);
    let got = euler_step(&analytic(), &x, t, tn, Condition::Null, 0.0, &s).unwrap();
    // Independent evaluation from the cumulative product of the betas.
    let abar = |t: i64| s.betas()[..=t as usize].iter().map(|b| 1.0 - b).product::<f64>();
    let (a, an) = (abar(t), abar(tn));
    for (&xv, &g) in x.data().iter().zip(got.data()) {
        let e = (1.0 - a).sqrt() * (xv - a.sqrt() * MEAN) / (a * STD * STD + 1.0 - a);
        let x0 = (xv - (1.0 - a).sqrt() * e) / a.sqrt();
        let want = an.sqrt() * x0 + (1.0 - an).sqrt() * e;
        assert!((g - want).abs() < 1e-12, "{g} vs {want}");
    }
}

#[test]
fn euler_composition_is_bit_exact() {
    let s = sched();
    let b = bundle(5);
    let x = noise_clip(6, 4, 2);
    for (t, n, st) in [(1023i64, 4usize, 8i64), (1023, 3, 32), (511, 8, 64), (127, 2, 1)] {
        for w in [0.0, 7.5] {
            let c = Condition::Token(1);
            let whole = euler_solve(&b, &x, t, c, n, st, w, &s).unwrap();
            let first = euler_solve(&b, &x, t, c, 1, st, w, &s).unwrap();
            let rest = euler_solve(&b, &first, t - st, c, n - 1, st, w, &s).unwrap();
            assert_eq!(whole, rest, "t={t} n={n} s={st} w={w}");
        }
    }
    assert_eq!(euler_solve(&b, &x, 700, Condition::Null, 0, 8, 0.0, &s).unwrap(), x);
}

#[test]
fn student_teacher_gap_is_nonzero_before_distillation() {
    let s = sched();
    let b = bundle(7);
    let x = noise_clip(8, 4, 2);
    let c = Condition::Token(2);
    let teacher = euler_solve(&b, &x, 1023, c, 4, 8, 0.0, &s).unwrap();
    let student = euler_solve(&b, &x, 1023, c, 1, 32, 0.0, &s).unwrap();
    assert!(teacher.max_abs_diff(&student) > 1e-6);
}

#[test]
fn multistep_one_step_is_first_order() {
    let s = sched();
    let b = bundle(9);
    let x = noise_clip(10, 4, 2);
    let c = Condition::Token(0);
    let a = multistep_solve(&b, &x, 1, c, 2.0, &s).unwrap();
    let e = euler_step(&b, &x, 1023, CLEAN, c, 2.0, &s).unwrap();
    assert_eq!(a, e);
    assert_eq!(multistep_solve(&b, &x, 6, c, 2.0, &s).unwrap(), multistep_solve(&b, &x, 6, c, 2.0, &s).unwrap());
}

#[test]
fn multistep_samples_the_analytic_gaussian() {
    let s = sched();
    let n = 10_000;
    let mut r = rng::stream(2024, &[]);
    let noise = ClipBatch::from_matrix(1, Matrix::from_vec(n, 1, rng::normals(&mut r, n)).unwrap()).unwrap();
    let out = multistep_solve_batch(&analytic(), &noise, 32, &vec![Condition::Null; n], 0.0, &s).unwrap();
    let v = out.values().data();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let se_mean = STD / (n as f64).sqrt();
    let se_var = STD * STD * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - MEAN).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - STD * STD).abs() < 3.0 * se_var, "var {var}");
}

#[test]
fn sampling_is_seeded() {
    let s = sched();
    let b = bundle(11);
    let a = sample(&b, 4, Condition::Token(1), 7.5, 42, &s).unwrap();
    assert_eq!(a, sample(&b, 4, Condition::Token(1), 7.5, 42, &s).unwrap());
    assert_ne!(a, sample(&b, 4, Condition::Token(1), 7.5, 43, &s).unwrap());
}

#[test]
fn unguided_null_sample_is_the_unconditional_path() {
    let s = sched();
    let b = bundle(12);
    let got = sample(&b, 4, Condition::Null, 0.0, 5, &s).unwrap();
    let mut x = noise_clip(5, 4, 2);
    for pair in s.trailing_grid(4).unwrap().windows(2) {
        let xb = ClipBatch::from_clips(std::slice::from_ref(&x)).unwrap();
        let eps = b.predict_eps(&xb, &[pair[0]], &[Condition::Null]).unwrap();
        x = flowdistill::solvers::ddim_update(&xb, &eps, &[pair[0]], &[pair[1]], &s).unwrap().clip(0);
    }
    assert_eq!(got, x);
}
