//! Small differentiable networks: frozen per-frame base denoisers, the shared
//! temporal motion module, their composition, and the flow-conditional
//! discriminator.
//!
//! Layer layout (per frame, `H` hidden channels):
//!
//! ```text
//! h1  = silu(W_in·x + b_in + W_time·(τ(t) [+ flow_i]) + cond[c])
//! h1' = h1 + W_proj·silu(mix(h1) + b_mix) + b_proj          (motion module)
//! h2  = silu(W_mid·h1' + b_mid)
//! ε̂   = W_out·h2 + b_out
//! ```
//!
//! `mix` is a full `F×F` matrix per channel applied across the frames of a
//! clip. The discriminator backbone stops at `h2`.

mod checkpoint;
mod disc;
mod pretrain;
mod student;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, ManifestEntry};
pub use disc::{
    adversarial_probabilities, disc_features, disc_logits, forward_disc_conditional,
    forward_disc_relaxed, DiscInputs, DiscPhase, DiscVars, DiscriminatorParams,
};
pub use pretrain::{
    denoising_loss, pretrain_base, pretrain_motion, DenoisingBatch, PretrainConfig, PretrainReport,
};
pub use student::{
    bind_base, bind_motion, encode, forward_student, student_eps, BaseOnly, BaseParams,
    BaseVars, MotionParams, MotionVars, StudentBundle, BASE_PREFIX, MOTION_PREFIX,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamSet, Tensor};

/// Network sizes shared by every model in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDims {
    /// Values per frame (`D`).
    pub frame_dim: usize,
    /// Frames per clip (`F`).
    pub frames: usize,
    /// Hidden channels (`H`).
    pub hidden: usize,
    /// Sinusoidal time-embedding width (`E`); flow embeddings share it.
    pub time_dim: usize,
    /// Condition vocabulary size (`V`), excluding the null token.
    pub vocab: usize,
    /// Hidden width of the discriminator heads.
    pub head_hidden: usize,
    /// Schedule length the time embedding is normalized to.
    pub num_timesteps: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        Self {
            frame_dim: 2,
            frames: 8,
            hidden: 32,
            time_dim: 16,
            vocab: 8,
            head_hidden: 32,
            num_timesteps: 1024,
        }
    }
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0
            || self.frames == 0
            || self.hidden == 0
            || self.vocab == 0
            || self.head_hidden == 0
            || self.num_timesteps < 2
        {
            return Err(Error::Config(format!("degenerate network sizes: {self:?}")));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_dim must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    /// Row count of the condition table: `V` tokens plus null.
    pub fn cond_rows(&self) -> usize {
        self.vocab + 1
    }
}

/// Caption stand-in. `Null` drives the unconditional branch of guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Token(u32),
    Null,
}

impl Condition {
    pub fn index(self, vocab: usize) -> Result<usize> {
        match self {
            Condition::Token(t) if (t as usize) < vocab => Ok(t as usize),
            Condition::Token(t) => Err(Error::UnknownCondition { token: t, vocab }),
            Condition::Null => Ok(vocab),
        }
    }

    /// On-disk encoding: the token value, or `u32::MAX` for null.
    pub fn to_raw(self) -> u32 {
        match self {
            Condition::Token(t) => t,
            Condition::Null => u32::MAX,
        }
    }

    pub fn from_raw(raw: u32) -> Self {
        if raw == u32::MAX {
            Condition::Null
        } else {
            Condition::Token(raw)
        }
    }
}

pub fn cond_indices(conds: &[Condition], vocab: usize) -> Result<Vec<usize>> {
    conds.iter().map(|c| c.index(vocab)).collect()
}

/// Sinusoidal embedding of a timestep (the clean endpoint `-1` maps to 0).
pub fn time_embedding(t: i64, dims: &NetDims) -> Vec<f64> {
    let half = dims.time_dim / 2;
    let u = (t + 1) as f64 / dims.num_timesteps as f64;
    let mut out = Vec::with_capacity(dims.time_dim);
    for j in 0..half {
        let w = std::f64::consts::PI * 2f64.powf(5.0 * j as f64 / (half.max(2) - 1) as f64);
        out.push((w * u).sin());
    }
    for j in 0..half {
        let w = std::f64::consts::PI * 2f64.powf(5.0 * j as f64 / (half.max(2) - 1) as f64);
        out.push((w * u).cos());
    }
    out
}

pub(crate) fn time_embeddings(ts: &[i64], dims: &NetDims) -> Matrix {
    let mut data = Vec::with_capacity(ts.len() * dims.time_dim);
    for &t in ts {
        data.extend(time_embedding(t, dims));
    }
    Matrix::from_vec(ts.len(), dims.time_dim, data).expect("sized above")
}

/// Matrix view of a named parameter: 1-D arrays become row vectors.
pub(crate) fn param_matrix(set: &ParamSet, name: &str) -> Result<Matrix> {
    let t = set
        .get(name)
        .ok_or_else(|| Error::MissingEntry(name.to_string()))?;
    Ok(tensor_matrix(t))
}

pub(crate) fn tensor_matrix(t: &Tensor) -> Matrix {
    if t.shape.len() == 1 {
        Matrix::from_vec(1, t.shape[0], t.data.clone()).expect("shape checked")
    } else {
        t.to_matrix()
    }
}

pub(crate) fn normal_tensor(rng: &mut crate::rng::Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = crate::rng::normals(rng, n)
        .into_iter()
        .map(|v| crate::tensor::round_to_storage(v * std))
        .collect();
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_index() {
        assert_eq!(Condition::Token(3).index(8).unwrap(), 3);
        assert_eq!(Condition::Null.index(8).unwrap(), 8);
        assert!(matches!(
            Condition::Token(8).index(8),
            Err(Error::UnknownCondition { token: 8, vocab: 8 })
        ));
        assert_eq!(Condition::from_raw(Condition::Null.to_raw()), Condition::Null);
        assert_eq!(Condition::from_raw(5), Condition::Token(5));
    }

    #[test]
    fn time_embedding_is_bounded() {
        let dims = NetDims::default();
        for t in [-1, 0, 511, 1023] {
            let e = time_embedding(t, &dims);
            assert_eq!(e.len(), dims.time_dim);
            assert!(e.iter().all(|v| v.abs() <= 1.0));
        }
        assert_ne!(time_embedding(10, &dims), time_embedding(11, &dims));
    }
}
