use serde::{Deserialize, Serialize};

use super::{cond_indices, normal_tensor, param_matrix, time_embeddings, Condition, NetDims};
use crate::autodiff::{Tape, Var};
use crate::clip::{Clip, ClipBatch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::check_per_clip;
use crate::solvers::EpsPredictor;
use crate::tensor::{ParamSet, Tensor};

pub const BASE_PREFIX: &str = "base.";
pub const MOTION_PREFIX: &str = "motion.";

/// Per-frame denoiser `f_i`. Frozen during distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub style_id: usize,
    pub params: ParamSet,
}

/// Shared temporal module `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub params: ParamSet,
}

pub(crate) fn base_shapes(dims: &NetDims) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h, e) = (dims.frame_dim, dims.hidden, dims.time_dim);
    vec![
        ("in.weight", vec![h, d]),
        ("in.bias", vec![h]),
        ("time.weight", vec![h, e]),
        ("cond.embedding", vec![dims.cond_rows(), h]),
        ("mid.weight", vec![h, h]),
        ("mid.bias", vec![h]),
        ("out.weight", vec![d, h]),
        ("out.bias", vec![d]),
    ]
}

pub(crate) fn motion_shapes(dims: &NetDims) -> Vec<(&'static str, Vec<usize>)> {
    let (f, h) = (dims.frames, dims.hidden);
    vec![
        ("mix.weight", vec![h, f, f]),
        ("mix.bias", vec![h]),
        ("proj.weight", vec![h, h]),
        ("proj.bias", vec![h]),
    ]
}

pub(crate) fn init_base_params(prefix: &str, dims: &NetDims, rng: &mut Rng) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, shape) in base_shapes(dims) {
        let t = match name {
            "in.weight" => normal_tensor(rng, shape, 1.0 / (dims.frame_dim as f64).sqrt()),
            "time.weight" => normal_tensor(rng, shape, 1.0 / (dims.time_dim as f64).sqrt()),
            "cond.embedding" => normal_tensor(rng, shape, 0.5),
            "mid.weight" => normal_tensor(rng, shape, 1.0 / (dims.hidden as f64).sqrt()),
            "out.weight" => normal_tensor(rng, shape, 0.3 / (dims.hidden as f64).sqrt()),
            _ => Tensor::zeros(shape),
        };
        set.insert(format!("{prefix}{name}"), t);
    }
    set
}

pub(crate) fn init_motion_params(prefix: &str, dims: &NetDims, rng: &mut Rng) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, shape) in motion_shapes(dims) {
        let t = match name {
            "mix.weight" => normal_tensor(rng, shape, 0.5 / (dims.frames as f64).sqrt()),
            "proj.weight" => normal_tensor(rng, shape, 0.1 / (dims.hidden as f64).sqrt()),
            _ => Tensor::zeros(shape),
        };
        set.insert(format!("{prefix}{name}"), t);
    }
    set
}

impl BaseParams {
    pub fn init(style_id: usize, dims: &NetDims, rng: &mut Rng) -> Self {
        Self {
            style_id,
            params: init_base_params(BASE_PREFIX, dims, rng),
        }
    }

    pub fn validate(&self, dims: &NetDims) -> Result<()> {
        check_shapes(&self.params, BASE_PREFIX, &base_shapes(dims))
    }
}

impl MotionParams {
    pub fn init(dims: &NetDims, rng: &mut Rng) -> Self {
        Self {
            params: init_motion_params(MOTION_PREFIX, dims, rng),
        }
    }

    /// A module whose residual branch is identically zero.
    pub fn zero_residual(dims: &NetDims, rng: &mut Rng) -> Self {
        let mut m = Self::init(dims, rng);
        for name in ["proj.weight", "proj.bias"] {
            let t = m
                .params
                .get_mut(&format!("{MOTION_PREFIX}{name}"))
                .expect("initialized above");
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    pub fn validate(&self, dims: &NetDims) -> Result<()> {
        check_shapes(&self.params, MOTION_PREFIX, &motion_shapes(dims))
    }
}

pub(crate) fn check_shapes(
    set: &ParamSet,
    prefix: &str,
    shapes: &[(&'static str, Vec<usize>)],
) -> Result<()> {
    for (name, shape) in shapes {
        let full = format!("{prefix}{name}");
        let t = set
            .get(&full)
            .ok_or_else(|| Error::MissingEntry(full.clone()))?;
        if &t.shape != shape {
            return Err(Error::shape(
                format!("{full} {shape:?}"),
                format!("{:?}", t.shape),
            ));
        }
    }
    let expected = shapes.len();
    let found = set.keys().filter(|k| k.starts_with(prefix)).count();
    if found != expected {
        return Err(Error::ParameterMismatch(format!(
            "expected {expected} entries under `{prefix}`, found {found}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BaseVars {
    pub in_w: Var,
    pub in_b: Var,
    pub time_w: Var,
    pub cond: Var,
    pub mid_w: Var,
    pub mid_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MotionVars {
    pub mix_w: Var,
    pub mix_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

pub(crate) fn bind_one(
    tape: &mut Tape,
    set: &ParamSet,
    name: &str,
    trainable: bool,
) -> Result<Var> {
    let m = param_matrix(set, name)?;
    Ok(if trainable {
        tape.param(name, m)
    } else {
        tape.constant(m)
    })
}

pub fn bind_base(tape: &mut Tape, set: &ParamSet, prefix: &str, trainable: bool) -> Result<BaseVars> {
    let mut b = |n: &str| bind_one(tape, set, &format!("{prefix}{n}"), trainable);
    Ok(BaseVars {
        in_w: b("in.weight")?,
        in_b: b("in.bias")?,
        time_w: b("time.weight")?,
        cond: b("cond.embedding")?,
        mid_w: b("mid.weight")?,
        mid_b: b("mid.bias")?,
        out_w: b("out.weight")?,
        out_b: b("out.bias")?,
    })
}

pub fn bind_motion(
    tape: &mut Tape,
    set: &ParamSet,
    prefix: &str,
    trainable: bool,
) -> Result<MotionVars> {
    let mut b = |n: &str| bind_one(tape, set, &format!("{prefix}{n}"), trainable);
    Ok(MotionVars {
        mix_w: b("mix.weight")?,
        mix_b: b("mix.bias")?,
        proj_w: b("proj.weight")?,
        proj_b: b("proj.bias")?,
    })
}

/// Shared trunk up to `h2`. `x` is `(clips·frames)×D`; `flow` (if any) is a
/// `clips×E` embedding added to the time embedding.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    base: &BaseVars,
    motion: Option<&MotionVars>,
    x: Var,
    frames: usize,
    ts: &[i64],
    conds: &[usize],
    flow: Option<Var>,
    dims: &NetDims,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    if frames == 0 || rows != ts.len() * frames || conds.len() != ts.len() {
        return Err(Error::shape(
            format!("{} rows for {} clips of {frames} frames", ts.len() * frames, ts.len()),
            format!("{rows} rows, {} conditions", conds.len()),
        ));
    }
    if motion.is_some() && frames != dims.frames {
        return Err(Error::shape(
            format!("{} frames", dims.frames),
            format!("{frames} frames"),
        ));
    }
    let mut temb = tape.constant(time_embeddings(ts, dims));
    if let Some(flow) = flow {
        temb = tape.add(temb, flow);
    }
    let time_h = tape.affine(temb, base.time_w, None);
    let cond_h = tape.gather(base.cond, conds.to_vec());
    let ctx = tape.add(time_h, cond_h);
    let ctx = tape.repeat_rows(ctx, frames);
    let pre = tape.affine(x, base.in_w, Some(base.in_b));
    let pre = tape.add(pre, ctx);
    let mut h1 = tape.silu(pre);
    if let Some(m) = motion {
        let mixed = tape.temporal_mix(h1, m.mix_w, frames);
        let mixed = tape.add_row(mixed, m.mix_b);
        let act = tape.silu(mixed);
        let residual = tape.affine(act, m.proj_w, Some(m.proj_b));
        h1 = tape.add(h1, residual);
    }
    let mid = tape.affine(h1, base.mid_w, Some(base.mid_b));
    Ok(tape.silu(mid))
}

/// Student ε-prediction `(clips·frames)×D`.
#[allow(clippy::too_many_arguments)]
pub fn student_eps(
    tape: &mut Tape,
    base: &BaseVars,
    motion: Option<&MotionVars>,
    x: Var,
    frames: usize,
    ts: &[i64],
    conds: &[usize],
    dims: &NetDims,
) -> Result<Var> {
    let h2 = encode(tape, base, motion, x, frames, ts, conds, None, dims)?;
    Ok(tape.affine(h2, base.out_w, Some(base.out_b)))
}

/// `F_i = f_i ∘ m`: a frozen base with a motion module.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBundle {
    pub dims: NetDims,
    pub base: BaseParams,
    pub motion: MotionParams,
}

impl StudentBundle {
    pub fn new(dims: NetDims, base: BaseParams, motion: MotionParams) -> Result<Self> {
        base.validate(&dims)?;
        motion.validate(&dims)?;
        Ok(Self { dims, base, motion })
    }

    /// Bind onto a tape. The base is always bound as constants (frozen).
    pub fn bind(&self, tape: &mut Tape, train_motion: bool) -> Result<(BaseVars, MotionVars)> {
        let b = bind_base(tape, &self.base.params, BASE_PREFIX, false)?;
        let m = bind_motion(tape, &self.motion.params, MOTION_PREFIX, train_motion)?;
        Ok((b, m))
    }
}

impl EpsPredictor for StudentBundle {
    fn predict_eps(&self, x_t: &ClipBatch, ts: &[i64], conds: &[Condition]) -> Result<ClipBatch> {
        check_per_clip(x_t, ts)?;
        let idx = cond_indices(conds, self.dims.vocab)?;
        let mut tape = Tape::new();
        let (b, m) = self.bind(&mut tape, false)?;
        let x = tape.constant(x_t.values().clone());
        let eps = student_eps(&mut tape, &b, Some(&m), x, x_t.frames(), ts, &idx, &self.dims)?;
        ClipBatch::from_matrix(x_t.frames(), tape.value(eps).clone())
    }
}

/// The base alone, applied frame by frame.
#[derive(Clone, Copy, Debug)]
pub struct BaseOnly<'a> {
    pub dims: &'a NetDims,
    pub base: &'a BaseParams,
}

impl EpsPredictor for BaseOnly<'_> {
    fn predict_eps(&self, x_t: &ClipBatch, ts: &[i64], conds: &[Condition]) -> Result<ClipBatch> {
        check_per_clip(x_t, ts)?;
        let idx = cond_indices(conds, self.dims.vocab)?;
        let mut tape = Tape::new();
        let b = bind_base(&mut tape, &self.base.params, BASE_PREFIX, false)?;
        let x = tape.constant(x_t.values().clone());
        let eps = student_eps(&mut tape, &b, None, x, x_t.frames(), ts, &idx, self.dims)?;
        ClipBatch::from_matrix(x_t.frames(), tape.value(eps).clone())
    }
}

/// Single-clip ε-prediction of a bundle.
pub fn forward_student(bundle: &StudentBundle, x_t: &Clip, t: i64, c: Condition) -> Result<Clip> {
    let batch = ClipBatch::from_clips(std::slice::from_ref(x_t))?;
    Ok(bundle.predict_eps(&batch, &[t], &[c])?.clip(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup() -> (NetDims, StudentBundle, ClipBatch) {
        let dims = NetDims {
            hidden: 8,
            frames: 4,
            ..NetDims::default()
        };
        let mut r = rng::stream(3, &[]);
        let base = BaseParams::init(0, &dims, &mut r);
        let motion = MotionParams::zero_residual(&dims, &mut r);
        let bundle = StudentBundle::new(dims, base, motion).unwrap();
        let x = ClipBatch::from_matrix(
            4,
            crate::tensor::Matrix::from_vec(8, 2, rng::normals(&mut r, 16)).unwrap(),
        )
        .unwrap();
        (dims, bundle, x)
    }

    #[test]
    fn zero_residual_reduces_to_base() {
        let (dims, bundle, x) = setup();
        let ts = [100, 700];
        let cs = [Condition::Token(1), Condition::Null];
        let full = bundle.predict_eps(&x, &ts, &cs).unwrap();
        let base = BaseOnly {
            dims: &dims,
            base: &bundle.base,
        }
        .predict_eps(&x, &ts, &cs)
        .unwrap();
        for (a, b) in full.values().data().iter().zip(base.values().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deterministic() {
        let (_, bundle, x) = setup();
        let a = bundle.predict_eps(&x, &[5, 6], &[Condition::Token(0); 2]).unwrap();
        let b = bundle.predict_eps(&x, &[5, 6], &[Condition::Token(0); 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_condition_rejected() {
        let (_, bundle, x) = setup();
        let err = bundle
            .predict_eps(&x, &[5, 6], &[Condition::Token(0), Condition::Token(99)])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownCondition { token: 99, .. }));
    }

    #[test]
    fn validate_catches_missing_entry() {
        let (dims, mut bundle, _) = setup();
        bundle.motion.params.remove("motion.mix.bias");
        assert!(matches!(
            bundle.motion.validate(&dims),
            Err(Error::MissingEntry(name)) if name == "motion.mix.bias"
        ));
    }
}
