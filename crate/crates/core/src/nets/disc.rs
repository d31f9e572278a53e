use serde::{Deserialize, Serialize};

use super::student::{
    base_shapes, bind_base, bind_motion, bind_one, check_shapes, encode, motion_shapes, BaseVars,
    MotionVars, BASE_PREFIX, MOTION_PREFIX,
};
use super::{cond_indices, normal_tensor, BaseParams, Condition, MotionParams, NetDims};
use crate::autodiff::{Tape, Var};
use crate::clip::{Clip, ClipBatch};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParamSet, Tensor};

pub const DISC_BASE: &str = "disc.base.";
pub const DISC_MOTION: &str = "disc.motion.";
pub const FLOW_EMBEDDING: &str = "disc.flow.embedding";
pub const HEAD_COND: &str = "disc.head_cond.";
pub const HEAD_RELAXED: &str = "disc.head_relaxed.";

/// Which discriminator head critiques the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscPhase {
    /// `D(x_t, x_next, ...)`: sees where the step started.
    TrajectoryConditional,
    /// `D'(x_next, ...)`: judges the landing point alone.
    Relaxed,
}

/// Shared backbone `d`, per-flow embedding table, and the two heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub dims: NetDims,
    pub num_flows: usize,
    pub params: ParamSet,
}

fn head_shapes(inputs: usize, hidden: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("hidden.weight", vec![hidden, inputs]),
        ("hidden.bias", vec![hidden]),
        ("out.weight", vec![1, hidden]),
        ("out.bias", vec![1]),
    ]
}

fn init_head(set: &mut ParamSet, prefix: &str, inputs: usize, hidden: usize, rng: &mut Rng) {
    for (name, shape) in head_shapes(inputs, hidden) {
        // The output layer starts at zero so fresh heads score exactly 0.
        let t = match name {
            "hidden.weight" => normal_tensor(rng, shape, 1.0 / (inputs as f64).sqrt()),
            _ => Tensor::zeros(shape),
        };
        set.insert(format!("{prefix}{name}"), t);
    }
}

impl DiscriminatorParams {
    /// Backbone copied from a pretrained student; fresh flow table and heads.
    pub fn from_student(
        base: &BaseParams,
        motion: &MotionParams,
        num_flows: usize,
        dims: &NetDims,
        rng: &mut Rng,
    ) -> Result<Self> {
        base.validate(dims)?;
        motion.validate(dims)?;
        if num_flows == 0 {
            return Err(Error::InvalidArgument("discriminator needs at least one flow".into()));
        }
        let mut params = ParamSet::new();
        for (k, v) in &base.params {
            let rest = k.strip_prefix(BASE_PREFIX).expect("validated");
            params.insert(format!("{DISC_BASE}{rest}"), v.clone());
        }
        for (k, v) in &motion.params {
            let rest = k.strip_prefix(MOTION_PREFIX).expect("validated");
            params.insert(format!("{DISC_MOTION}{rest}"), v.clone());
        }
        params.insert(
            FLOW_EMBEDDING.to_string(),
            normal_tensor(rng, vec![num_flows, dims.time_dim], 0.5),
        );
        let feat = dims.frames * dims.hidden;
        init_head(&mut params, HEAD_COND, 2 * feat, dims.head_hidden, rng);
        init_head(&mut params, HEAD_RELAXED, feat, dims.head_hidden, rng);
        Ok(Self {
            dims: *dims,
            num_flows,
            params,
        })
    }

    /// Fresh relaxed head; the backbone and flow table are kept.
    pub fn reset_relaxed_head(&mut self, rng: &mut Rng) {
        let feat = self.dims.frames * self.dims.hidden;
        init_head(&mut self.params, HEAD_RELAXED, feat, self.dims.head_hidden, rng);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        check_shapes(&self.params, DISC_BASE, &base_shapes(d))?;
        check_shapes(&self.params, DISC_MOTION, &motion_shapes(d))?;
        let feat = d.frames * d.hidden;
        check_shapes(&self.params, HEAD_COND, &head_shapes(2 * feat, d.head_hidden))?;
        check_shapes(&self.params, HEAD_RELAXED, &head_shapes(feat, d.head_hidden))?;
        let flow = self
            .params
            .get(FLOW_EMBEDDING)
            .ok_or_else(|| Error::MissingEntry(FLOW_EMBEDDING.into()))?;
        if flow.shape != vec![self.num_flows, d.time_dim] {
            return Err(Error::shape(
                format!("{FLOW_EMBEDDING} [{}, {}]", self.num_flows, d.time_dim),
                format!("{:?}", flow.shape),
            ));
        }
        Ok(())
    }

    pub fn check_flow(&self, i: usize) -> Result<()> {
        if i >= self.num_flows {
            return Err(Error::UnregisteredFlow {
                index: i,
                registered: self.num_flows,
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<DiscVars> {
        Ok(DiscVars {
            base: bind_base(tape, &self.params, DISC_BASE, trainable)?,
            motion: bind_motion(tape, &self.params, DISC_MOTION, trainable)?,
            flow: bind_one(tape, &self.params, FLOW_EMBEDDING, trainable)?,
            head_cond: bind_head(tape, &self.params, HEAD_COND, trainable)?,
            head_relaxed: bind_head(tape, &self.params, HEAD_RELAXED, trainable)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    hidden_w: Var,
    hidden_b: Var,
    out_w: Var,
    out_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub base: BaseVars,
    pub motion: MotionVars,
    pub flow: Var,
    pub head_cond: HeadVars,
    pub head_relaxed: HeadVars,
}

fn bind_head(tape: &mut Tape, set: &ParamSet, prefix: &str, trainable: bool) -> Result<HeadVars> {
    let mut b = |n: &str| bind_one(tape, set, &format!("{prefix}{n}"), trainable);
    Ok(HeadVars {
        hidden_w: b("hidden.weight")?,
        hidden_b: b("hidden.bias")?,
        out_w: b("out.weight")?,
        out_b: b("out.bias")?,
    })
}

fn head(tape: &mut Tape, h: &HeadVars, feats: Var) -> Var {
    let z = tape.affine(feats, h.hidden_w, Some(h.hidden_b));
    let z = tape.silu(z);
    tape.affine(z, h.out_w, Some(h.out_b))
}

/// Backbone features `d(x, t, c, i)`, flattened per clip to `clips × (F·H)`.
pub fn disc_features(
    tape: &mut Tape,
    v: &DiscVars,
    x: Var,
    ts: &[i64],
    conds: &[usize],
    flows: &[usize],
    dims: &NetDims,
) -> Result<Var> {
    let flow = tape.gather(v.flow, flows.to_vec());
    let h2 = encode(
        tape,
        &v.base,
        Some(&v.motion),
        x,
        dims.frames,
        ts,
        conds,
        Some(flow),
        dims,
    )?;
    tape.reshape(h2, ts.len(), dims.frames * dims.hidden)
}

/// Inputs for one discriminator evaluation over a batch of clips.
#[derive(Clone, Copy, Debug)]
pub struct DiscInputs<'a> {
    pub x_t: Var,
    pub ts: &'a [i64],
    pub x_next: Var,
    pub ts_next: &'a [i64],
    pub conds: &'a [usize],
    pub flows: &'a [usize],
}

/// Pre-sigmoid scores, `clips × 1`.
pub fn disc_logits(
    tape: &mut Tape,
    v: &DiscVars,
    phase: DiscPhase,
    inp: &DiscInputs<'_>,
    dims: &NetDims,
) -> Result<Var> {
    let next = disc_features(tape, v, inp.x_next, inp.ts_next, inp.conds, inp.flows, dims)?;
    Ok(match phase {
        DiscPhase::TrajectoryConditional => {
            let cur = disc_features(tape, v, inp.x_t, inp.ts, inp.conds, inp.flows, dims)?;
            let both = tape.concat_cols(next, cur);
            head(tape, &v.head_cond, both)
        }
        DiscPhase::Relaxed => head(tape, &v.head_relaxed, next),
    })
}

/// Probabilities that the landing points came from the teacher.
pub fn adversarial_probabilities(
    tape: &mut Tape,
    v: &DiscVars,
    phase: DiscPhase,
    inp: &DiscInputs<'_>,
    dims: &NetDims,
) -> Result<Var> {
    let logits = disc_logits(tape, v, phase, inp, dims)?;
    Ok(tape.sigmoid(logits))
}

fn single_clip_score(
    disc: &DiscriminatorParams,
    phase: DiscPhase,
    x_t: Option<(&Clip, i64)>,
    x_next: &Clip,
    t_next: i64,
    c: Condition,
    i: usize,
) -> Result<(f64, f64)> {
    disc.check_flow(i)?;
    let dims = &disc.dims;
    let idx = cond_indices(&[c], dims.vocab)?;
    let mut tape = Tape::new();
    let v = disc.bind(&mut tape, false)?;
    let xn = tape.constant(ClipBatch::from_clips(std::slice::from_ref(x_next))?.into_values());
    let (xt, t) = match x_t {
        Some((clip, t)) => (
            tape.constant(ClipBatch::from_clips(std::slice::from_ref(clip))?.into_values()),
            t,
        ),
        None => (xn, t_next),
    };
    let inp = DiscInputs {
        x_t: xt,
        ts: &[t],
        x_next: xn,
        ts_next: &[t_next],
        conds: &idx,
        flows: &[i],
    };
    let logit = disc_logits(&mut tape, &v, phase, &inp, dims)?;
    let s = tape.value(logit).get(0, 0);
    Ok((s, crate::autodiff::sigmoid(s)))
}

/// `σ(head(d(x_next, t_next, c, i), d(x_t, t, c, i)))`; returns `(score, probability)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_disc_conditional(
    disc: &DiscriminatorParams,
    x_t: &Clip,
    x_next: &Clip,
    t: i64,
    t_next: i64,
    c: Condition,
    i: usize,
) -> Result<(f64, f64)> {
    if t_next >= t {
        return Err(Error::InvalidArgument(format!(
            "t_next ({t_next}) must precede t ({t})"
        )));
    }
    single_clip_score(
        disc,
        DiscPhase::TrajectoryConditional,
        Some((x_t, t)),
        x_next,
        t_next,
        c,
        i,
    )
}

/// `σ(head'(d(x_next, t_next, c, i)))`; returns `(score, probability)`.
pub fn forward_disc_relaxed(
    disc: &DiscriminatorParams,
    x_next: &Clip,
    t_next: i64,
    c: Condition,
    i: usize,
) -> Result<(f64, f64)> {
    single_clip_score(disc, DiscPhase::Relaxed, None, x_next, t_next, c, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn disc() -> DiscriminatorParams {
        let dims = NetDims {
            hidden: 6,
            frames: 3,
            head_hidden: 5,
            ..NetDims::default()
        };
        let mut r = rng::stream(11, &[]);
        let base = BaseParams::init(0, &dims, &mut r);
        let motion = MotionParams::init(&dims, &mut r);
        DiscriminatorParams::from_student(&base, &motion, 3, &dims, &mut r).unwrap()
    }

    fn clip(seed: u64) -> Clip {
        let mut r = rng::stream(seed, &[]);
        Clip::new(3, 2, rng::normals(&mut r, 6)).unwrap()
    }

    #[test]
    fn fresh_heads_score_half() {
        let d = disc();
        d.validate().unwrap();
        let (s, p) =
            forward_disc_conditional(&d, &clip(1), &clip(2), 500, 250, Condition::Token(2), 1)
                .unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(p, 0.5);
        let (s, p) = forward_disc_relaxed(&d, &clip(2), 250, Condition::Null, 0).unwrap();
        assert_eq!((s, p), (0.0, 0.5));
    }

    #[test]
    fn unregistered_flow_rejected() {
        let d = disc();
        assert!(matches!(
            forward_disc_relaxed(&d, &clip(2), 250, Condition::Null, 3),
            Err(Error::UnregisteredFlow { index: 3, registered: 3 })
        ));
        assert!(forward_disc_conditional(&d, &clip(1), &clip(2), 250, 250, Condition::Null, 0)
            .is_err());
    }

    #[test]
    fn relaxed_reset_keeps_backbone() {
        let mut d = disc();
        let before = d.params.clone();
        d.params
            .get_mut("disc.head_relaxed.out.bias")
            .unwrap()
            .data[0] = 3.0;
        d.reset_relaxed_head(&mut rng::stream(5, &[]));
        assert_eq!(d.params["disc.head_relaxed.out.bias"].data[0], 0.0);
        for (k, v) in &before {
            if !k.starts_with(HEAD_RELAXED) {
                assert_eq!(&d.params[k], v);
            }
        }
    }
}
