//! Synthetic style universe and clip datasets.
//!
//! Every mixture style shares one condition-indexed base distribution over
//! clips and differs by a diagonal affine transform and its temporal
//! correlation. For condition `c` a clip is drawn from one of two components
//! mirrored in coordinate 0:
//!
//! ```text
//! x_f = m_{c,k} + v_{c,k}·(f − (F−1)/2)/F + z_f,   z_f = ρ·z_{f−1} + √(1−ρ²)·s·ξ_f
//! y_f = A·x_f + b
//! ```
//!
//! `A` is diagonal and `b` has no component on coordinate 0, so negating that
//! coordinate maps every style onto itself.

mod format;

pub use format::{dataset_load, dataset_save};

use serde::{Deserialize, Serialize};

use crate::clip::{Clip, ClipBatch};
use crate::error::{Error, Result};
use crate::nets::Condition;
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;
use crate::solvers::{sample_batch, EpsPredictor, SolverKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleGroup {
    Default,
    RealisticAnalog,
    AnimeAnalog,
    Unseen,
}

impl StyleGroup {
    pub fn code(self) -> u8 {
        match self {
            StyleGroup::Default => 0,
            StyleGroup::RealisticAnalog => 1,
            StyleGroup::AnimeAnalog => 2,
            StyleGroup::Unseen => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => StyleGroup::Default,
            1 => StyleGroup::RealisticAnalog,
            2 => StyleGroup::AnimeAnalog,
            3 => StyleGroup::Unseen,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleKind {
    /// The shared condition-indexed mixture under a diagonal affine map.
    Mixture {
        /// Diagonal of `A`, one entry per frame coordinate.
        scale: Vec<f64>,
        /// Offset `b`; entry 0 must be zero.
        offset: Vec<f64>,
        /// Frame-to-frame correlation `ρ` of the residual.
        rho: f64,
    },
    /// Every coordinate i.i.d. `N(mean, std²)`, ignoring the condition.
    Gaussian { mean: f64, std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub style_id: usize,
    pub name: String,
    pub group: StyleGroup,
    #[serde(flatten)]
    pub kind: StyleKind,
}

/// Per-frame residual scale of the base mixture.
pub const RESIDUAL_STD: f64 = 0.35;

impl StyleSpec {
    pub fn mixture(
        style_id: usize,
        name: &str,
        group: StyleGroup,
        scale: [f64; 2],
        offset1: f64,
        rho: f64,
    ) -> Self {
        Self {
            style_id,
            name: name.into(),
            group,
            kind: StyleKind::Mixture {
                scale: scale.to_vec(),
                offset: vec![0.0, offset1],
                rho,
            },
        }
    }

    pub fn gaussian(style_id: usize, name: &str, group: StyleGroup, mean: f64, std: f64) -> Self {
        Self {
            style_id,
            name: name.into(),
            group,
            kind: StyleKind::Gaussian { mean, std },
        }
    }

    pub fn validate(&self, frame_dim: usize) -> Result<()> {
        match &self.kind {
            StyleKind::Mixture { scale, offset, rho } => {
                if scale.len() != frame_dim || offset.len() != frame_dim {
                    return Err(Error::Config(format!(
                        "style `{}`: transform must have {frame_dim} entries",
                        self.name
                    )));
                }
                if scale.iter().any(|s| !s.is_finite() || *s == 0.0) {
                    return Err(Error::Config(format!(
                        "style `{}`: transform is not invertible",
                        self.name
                    )));
                }
                if offset[0] != 0.0 || offset.iter().any(|o| !o.is_finite()) {
                    return Err(Error::Config(format!(
                        "style `{}`: offset must be finite with a zero flip coordinate",
                        self.name
                    )));
                }
                if !(rho.abs() < 1.0) {
                    return Err(Error::Config(format!(
                        "style `{}`: |rho| must be < 1",
                        self.name
                    )));
                }
            }
            StyleKind::Gaussian { mean, std } => {
                if !mean.is_finite() || !(std.is_finite() && *std > 0.0) {
                    return Err(Error::Config(format!(
                        "style `{}`: invalid Gaussian parameters",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map a base-distribution clip through the style transform.
    pub fn apply_transform(&self, x: &Clip) -> Clip {
        match &self.kind {
            StyleKind::Mixture { scale, offset, .. } => {
                Clip::from_fn(x.frames(), x.dim(), |f, d| scale[d] * x.get(f, d) + offset[d])
            }
            StyleKind::Gaussian { .. } => x.clone(),
        }
    }

    pub fn invert_transform(&self, y: &Clip) -> Clip {
        match &self.kind {
            StyleKind::Mixture { scale, offset, .. } => {
                Clip::from_fn(y.frames(), y.dim(), |f, d| (y.get(f, d) - offset[d]) / scale[d])
            }
            StyleKind::Gaussian { .. } => y.clone(),
        }
    }
}

/// Component centre and drift of the base mixture for `(condition, k)`.
pub fn component(c: usize, k: usize, vocab: usize) -> ([f64; 2], [f64; 2]) {
    let theta = std::f64::consts::PI * (c as f64 + 0.5) / vocab as f64;
    let r = 1.0 + 0.5 * (c % 3) as f64 / 2.0;
    let centre = [r * theta.cos().abs() + 0.4, r * theta.sin() - 0.6];
    let drift = [0.8 * (1.7 * theta).sin(), 0.6 * (2.3 * theta).cos()];
    if k == 0 {
        (centre, drift)
    } else {
        ([-centre[0], centre[1]], [-drift[0], drift[1]])
    }
}

fn draw_base_clip(c: usize, rho: f64, frames: usize, dim: usize, vocab: usize, r: &mut rng::Rng) -> Clip {
    use rand::Rng as _;
    let k = usize::from(r.gen::<bool>());
    let (centre, drift) = component(c, k, vocab);
    let innov = (1.0 - rho * rho).sqrt();
    let mut z = vec![0.0; dim];
    let mut data = Vec::with_capacity(frames * dim);
    let mid = (frames as f64 - 1.0) / 2.0;
    for f in 0..frames {
        for (d, zd) in z.iter_mut().enumerate() {
            let xi = rng::normal(r);
            *zd = if f == 0 {
                RESIDUAL_STD * xi
            } else {
                rho * *zd + innov * RESIDUAL_STD * xi
            };
            let base = centre.get(d).copied().unwrap_or(0.0) + drift.get(d).copied().unwrap_or(0.0) * (f as f64 - mid) / frames as f64;
            data.push(base + *zd);
        }
    }
    Clip::new(frames, dim, data).expect("finite draws")
}

/// Where a dataset's clips came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    TeacherGenerated,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::GroundTruth => 0,
            Provenance::TeacherGenerated => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Provenance::GroundTruth),
            1 => Some(Provenance::TeacherGenerated),
            _ => None,
        }
    }
}

/// Clips with parallel conditions. `style_id` is `None` for pooled sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub clips: Vec<Clip>,
    pub conditions: Vec<Condition>,
    pub provenance: Provenance,
    pub group: StyleGroup,
    pub style_id: Option<usize>,
}

impl ClipDataset {
    pub fn new(
        clips: Vec<Clip>,
        conditions: Vec<Condition>,
        provenance: Provenance,
        group: StyleGroup,
        style_id: Option<usize>,
    ) -> Result<Self> {
        let ds = Self {
            clips,
            conditions,
            provenance,
            group,
            style_id,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips.len() != self.conditions.len() {
            return Err(Error::Dataset(format!(
                "{} clips but {} conditions",
                self.clips.len(),
                self.conditions.len()
            )));
        }
        if let Some(first) = self.clips.first() {
            if self
                .clips
                .iter()
                .any(|c| c.frames() != first.frames() || c.dim() != first.dim())
            {
                return Err(Error::Dataset("clips differ in shape".into()));
            }
        }
        if self.clips.iter().any(|c| c.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Dataset("non-finite clip value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Clips and conditions at `indices` as a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(ClipBatch, Vec<Condition>)> {
        let clips: Vec<&Clip> = indices.iter().map(|&i| &self.clips[i]).collect();
        let conds = indices.iter().map(|&i| self.conditions[i]).collect();
        Ok((ClipBatch::from_clip_refs(&clips)?, conds))
    }
}

/// Conditions drawn uniformly from the vocabulary, one stream per index.
pub fn draw_conditions(n: usize, vocab: usize, seed: u64) -> Vec<Condition> {
    use rand::Rng as _;
    (0..n)
        .map(|j| {
            let mut r = rng::stream(seed, &[tag::CONDITIONS, j as u64]);
            Condition::Token(r.gen_range(0..vocab as u32))
        })
        .collect()
}

/// Draw `n` clips of a style with uniformly drawn condition tokens.
pub fn sample_ground_truth(
    style: &StyleSpec,
    n: usize,
    frames: usize,
    dim: usize,
    vocab: usize,
    seed: u64,
) -> Result<ClipDataset> {
    if n == 0 {
        return Err(Error::Dataset("ground-truth sample count must be >= 1".into()));
    }
    style.validate(dim)?;
    let conditions = draw_conditions(n, vocab, rng::derive_seed(seed, &[style.style_id as u64]));
    let clips = conditions
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let mut r = rng::stream(seed, &[tag::GROUND_TRUTH, style.style_id as u64, j as u64]);
            match &style.kind {
                StyleKind::Mixture { rho, .. } => {
                    let token = c.index(vocab).expect("drawn in range");
                    let x = draw_base_clip(token, *rho, frames, dim, vocab, &mut r);
                    style.apply_transform(&x)
                }
                StyleKind::Gaussian { mean, std } => {
                    let data = rng::normals(&mut r, frames * dim)
                        .into_iter()
                        .map(|z| mean + std * z)
                        .collect();
                    Clip::new(frames, dim, data).expect("finite draws")
                }
            }
        })
        .map(|c| c.map(crate::tensor::round_to_storage))
        .collect();
    ClipDataset::new(
        clips,
        conditions,
        Provenance::GroundTruth,
        style.group,
        Some(style.style_id),
    )
}

/// Teacher sampling settings for dataset generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub steps: usize,
    pub cfg_scale: f64,
    pub chunk: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            steps: 32,
            cfg_scale: 7.5,
            chunk: 512,
        }
    }
}

/// Generate one clip per condition with the multistep solver.
///
/// Clip `j` starts from noise seeded by `(seed, style, j)`, so chunking does
/// not affect the output.
#[allow(clippy::too_many_arguments)]
pub fn generate_distill_dataset<P: EpsPredictor + ?Sized>(
    teacher: &P,
    style: &StyleSpec,
    conditions: &[Condition],
    frames: usize,
    dim: usize,
    settings: &GenerationSettings,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<ClipDataset> {
    if conditions.is_empty() {
        return Err(Error::Dataset("no conditions to generate from".into()));
    }
    let chunk = settings.chunk.max(1);
    let mut clips = Vec::with_capacity(conditions.len());
    for start in (0..conditions.len()).step_by(chunk) {
        let end = (start + chunk).min(conditions.len());
        let seeds: Vec<u64> = (start..end)
            .map(|j| rng::derive_seed(seed, &[tag::GENERATE, style.style_id as u64, j as u64]))
            .collect();
        let out = sample_batch(
            teacher,
            frames,
            dim,
            settings.steps,
            &conditions[start..end],
            &seeds,
            settings.cfg_scale,
            SolverKind::Multistep,
            sched,
        )?;
        clips.extend(out.to_clips().into_iter().map(|c| c.map(crate::tensor::round_to_storage)));
    }
    ClipDataset::new(
        clips,
        conditions.to_vec(),
        Provenance::TeacherGenerated,
        style.group,
        Some(style.style_id),
    )
}

/// Negate frame coordinate 0 of every frame.
pub fn flip_clip(c: &Clip) -> Clip {
    Clip::from_fn(c.frames(), c.dim(), |f, d| if d == 0 { -c.get(f, d) } else { c.get(f, d) })
}

/// The originals followed by their flipped copies.
pub fn flip_augment(ds: &ClipDataset) -> ClipDataset {
    let mut out = ds.clone();
    out.clips.extend(ds.clips.iter().map(flip_clip));
    out.conditions.extend_from_slice(&ds.conditions);
    out
}

/// Concatenate datasets of one group. The result keeps a style id only when
/// every input shares it.
pub fn pool_by_group(datasets: &[ClipDataset]) -> Result<ClipDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Dataset("nothing to pool".into()))?;
    let mut out = first.clone();
    for ds in &datasets[1..] {
        if ds.group != first.group {
            return Err(Error::Dataset(format!(
                "cannot pool {:?} data with {:?} data",
                first.group, ds.group
            )));
        }
        if ds.provenance != first.provenance {
            return Err(Error::Dataset("cannot pool mixed provenance".into()));
        }
        if ds.style_id != out.style_id {
            out.style_id = None;
        }
        out.clips.extend_from_slice(&ds.clips);
        out.conditions.extend_from_slice(&ds.conditions);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn style() -> StyleSpec {
        StyleSpec::mixture(1, "r1", StyleGroup::RealisticAnalog, [1.2, 0.9], 0.3, 0.8)
    }

    #[test]
    fn ground_truth_is_seed_deterministic() {
        let a = sample_ground_truth(&style(), 20, 8, 2, 8, 5).unwrap();
        let b = sample_ground_truth(&style(), 20, 8, 2, 8, 5).unwrap();
        let c = sample_ground_truth(&style(), 20, 8, 2, 8, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample_ground_truth(&style(), 0, 8, 2, 8, 5).is_err());
    }

    #[test]
    fn flip_doubles_and_is_an_involution() {
        let ds = sample_ground_truth(&style(), 10, 8, 2, 8, 1).unwrap();
        let f = flip_augment(&ds);
        assert_eq!(f.len(), 20);
        for (orig, flipped) in ds.clips.iter().zip(&f.clips[10..]) {
            assert_eq!(&flip_clip(flipped), orig);
        }
        let empty = ClipDataset::new(vec![], vec![], Provenance::GroundTruth, StyleGroup::Default, Some(0)).unwrap();
        assert!(flip_augment(&empty).is_empty());
    }

    #[test]
    fn pooling_rules() {
        let a = sample_ground_truth(&style(), 3, 8, 2, 8, 1).unwrap();
        let mut b_style = style();
        b_style.style_id = 2;
        let b = sample_ground_truth(&b_style, 4, 8, 2, 8, 1).unwrap();
        let p = pool_by_group(&[a.clone(), b]).unwrap();
        assert_eq!(p.len(), 7);
        assert_eq!(p.style_id, None);
        assert_eq!(pool_by_group(std::slice::from_ref(&a)).unwrap(), a);
        let anime = StyleSpec::mixture(3, "a1", StyleGroup::AnimeAnalog, [1.8, 0.6], 1.0, 0.6);
        let c = sample_ground_truth(&anime, 2, 8, 2, 8, 1).unwrap();
        assert!(pool_by_group(&[a, c]).is_err());
    }

    #[test]
    fn transform_round_trip() {
        let s = style();
        let x = Clip::from_fn(3, 2, |f, d| f as f64 - d as f64 * 0.5);
        assert!(s.invert_transform(&s.apply_transform(&x)).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn invalid_styles_rejected() {
        let mut s = style();
        s.kind = StyleKind::Mixture {
            scale: vec![0.0, 1.0],
            offset: vec![0.0, 0.0],
            rho: 0.5,
        };
        assert!(s.validate(2).is_err());
        s.kind = StyleKind::Mixture {
            scale: vec![1.0, 1.0],
            offset: vec![0.1, 0.0],
            rho: 0.5,
        };
        assert!(s.validate(2).is_err());
    }
}
