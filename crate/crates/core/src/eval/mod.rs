//! Sample-set distances and evaluation reports.

mod report;

use std::cmp::Ordering;

use crate::clip::Clip;
use crate::error::{Error, Result};

pub use report::{EvalReport, ReportRow};

/// Euclidean distance between two equally long slices.
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance over ordered pairs `(i, j)`, skipping `i == j` when
/// `matched` is set.
fn mean_pair_distance(a: &[&[f64]], b: &[&[f64]], matched: bool) -> f64 {
    let mut sum = 0.0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if matched && i == j {
                continue;
            }
            sum += dist(x, y);
        }
    }
    let pairs = if matched {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    sum / pairs as f64
}

fn cmp_sets(a: &[&[f64]], b: &[&[f64]]) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.iter()
            .flat_map(|s| s.iter())
            .map(|v| v.to_bits())
            .cmp(b.iter().flat_map(|s| s.iter()).map(|v| v.to_bits()))
    })
}

/// Energy distance between two sets of equally sized vectors.
///
/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖`, each term an unbiased U-statistic. When
/// the sets have equal size the cross term also skips the diagonal pairs
/// `(a_i, b_i)`; with independent sets this stays unbiased and makes
/// `d(A, A)` exactly zero. The sets are put in a canonical order first, so
/// `d(A, B)` and `d(B, A)` are bit-identical.
pub fn energy_distance_vectors(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "energy distance needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let width = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != width) {
        return Err(Error::shape(format!("vectors of length {width}"), "ragged sets"));
    }
    let (a, b) = if cmp_sets(a, b) == Ordering::Greater { (b, a) } else { (a, b) };
    let cross = mean_pair_distance(a, b, a.len() == b.len());
    let within_a = mean_pair_distance(a, a, true);
    let within_b = mean_pair_distance(b, b, true);
    Ok(2.0 * cross - within_a - within_b)
}

fn check_clips(a: &[Clip], b: &[Clip]) -> Result<()> {
    if let (Some(x), Some(y)) = (a.first(), b.first()) {
        if a.iter().chain(b).any(|c| c.frames() != x.frames() || c.dim() != x.dim()) || x.frames() != y.frames() {
            return Err(Error::shape(
                format!("clips of {}x{}", x.frames(), x.dim()),
                "mixed clip shapes",
            ));
        }
    }
    Ok(())
}

/// Energy distance between clip sets, each clip flattened to `F·D` values.
pub fn energy_distance(a: &[Clip], b: &[Clip]) -> Result<f64> {
    check_clips(a, b)?;
    let a: Vec<&[f64]> = a.iter().map(|c| c.data()).collect();
    let b: Vec<&[f64]> = b.iter().map(|c| c.data()).collect();
    energy_distance_vectors(&a, &b)
}

/// Energy distance between the per-frame marginals: every frame of every
/// clip counts as one `D`-dimensional sample.
pub fn energy_distance_marginal(a: &[Clip], b: &[Clip]) -> Result<f64> {
    check_clips(a, b)?;
    let frames = |s: &[Clip]| -> Vec<Vec<f64>> {
        s.iter()
            .flat_map(|c| (0..c.frames()).map(move |f| c.frame(f).to_vec()))
            .collect()
    };
    let (fa, fb) = (frames(a), frames(b));
    let a: Vec<&[f64]> = fa.iter().map(|v| v.as_slice()).collect();
    let b: Vec<&[f64]> = fb.iter().map(|v| v.as_slice()).collect();
    energy_distance_vectors(&a, &b)
}
