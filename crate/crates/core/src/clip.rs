//! Synthetic video clips: `frames × dim` arrays of latent values.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Clip {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "clip needs at least one frame and one dimension, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::shape(
                format!("{} values", frames * dim),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("clip entries must be finite".into()));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_fn(frames: usize, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(frames * dim);
        for fr in 0..frames {
            for d in 0..dim {
                data.push(f(fr, d));
            }
        }
        Self { frames, dim, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Frame-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }

    pub fn get(&self, f: usize, d: usize) -> f64 {
        self.data[f * self.dim + d]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Clip {
        Clip {
            frames: self.frames,
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Clip, f: impl Fn(f64, f64) -> f64) -> Clip {
        Clip {
            frames: self.frames,
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Clip) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A batch of equally shaped clips stored as one `(clips·frames) × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    frames: usize,
    dim: usize,
    values: Matrix,
}

impl ClipBatch {
    pub fn zeros(clips: usize, frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            values: Matrix::zeros(clips * frames, dim),
        }
    }

    pub fn from_matrix(frames: usize, values: Matrix) -> Result<Self> {
        if frames == 0 || !values.rows().is_multiple_of(frames) {
            return Err(Error::shape(
                format!("a multiple of {frames} rows"),
                format!("{} rows", values.rows()),
            ));
        }
        Ok(Self {
            frames,
            dim: values.cols(),
            values,
        })
    }

    pub fn from_clips(clips: &[Clip]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty clip batch".into()))?;
        let (frames, dim) = (first.frames, first.dim);
        let mut data = Vec::with_capacity(clips.len() * frames * dim);
        for c in clips {
            if c.frames != frames || c.dim != dim {
                return Err(Error::shape(
                    format!("{frames}x{dim}"),
                    format!("{}x{}", c.frames, c.dim),
                ));
            }
            data.extend_from_slice(&c.data);
        }
        Ok(Self {
            frames,
            dim,
            values: Matrix::from_vec(clips.len() * frames, dim, data)?,
        })
    }

    pub fn from_clip_refs(clips: &[&Clip]) -> Result<Self> {
        let owned: Vec<Clip> = clips.iter().map(|c| (*c).clone()).collect();
        Self::from_clips(&owned)
    }

    pub fn len(&self) -> usize {
        self.values.rows() / self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn clip_slice(&self, i: usize) -> &[f64] {
        let n = self.frames * self.dim;
        &self.values.data()[i * n..(i + 1) * n]
    }

    pub fn clip_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frames * self.dim;
        &mut self.values.data_mut()[i * n..(i + 1) * n]
    }

    pub fn clip(&self, i: usize) -> Clip {
        Clip {
            frames: self.frames,
            dim: self.dim,
            data: self.clip_slice(i).to_vec(),
        }
    }

    pub fn to_clips(&self) -> Vec<Clip> {
        (0..self.len()).map(|i| self.clip(i)).collect()
    }

    pub fn check_same_layout(&self, other: &ClipBatch) -> Result<()> {
        if self.frames != other.frames || self.values.shape() != other.values.shape() {
            return Err(Error::shape(
                format!("{} clips of {}x{}", self.len(), self.frames, self.dim),
                format!("{} clips of {}x{}", other.len(), other.frames, other.dim),
            ));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &ClipBatch, f: impl Fn(f64, f64) -> f64) -> ClipBatch {
        ClipBatch {
            frames: self.frames,
            dim: self.dim,
            values: self.values.zip_map(&other.values, f),
        }
    }

    pub fn max_abs_diff(&self, other: &ClipBatch) -> f64 {
        self.values.max_abs_diff(&other.values)
    }
}
