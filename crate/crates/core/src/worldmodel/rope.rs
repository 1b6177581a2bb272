//! Factorized 3D rotary embeddings over (time, height, width).
//!
//! Head channels are split 2:1:1 between the axes. Each axis rotates its
//! channel pairs by `coordinate × θ_i` with `θ_i = 10000^(-i/P)` for
//! `i < P` pairs, so every frequency is strictly positive.

use crate::autodiff::Rotation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

/// Channel pairs per axis for a head dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisSplit {
    pub t_pairs: usize,
    pub h_pairs: usize,
    pub w_pairs: usize,
}

impl AxisSplit {
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 8 != 0 {
            return Err(Error::invalid(format!(
                "head_dim {head_dim} cannot be split 2:1:1 into even channel counts"
            )));
        }
        Ok(Self {
            t_pairs: head_dim / 4,
            h_pairs: head_dim / 8,
            w_pairs: head_dim / 8,
        })
    }

    pub fn frequencies(&self) -> Vec<(usize, f64)> {
        let axis = |axis: usize, pairs: usize| {
            (0..pairs).map(move |i| (axis, ROPE_BASE.powf(-(i as f64) / pairs as f64)))
        };
        axis(0, self.t_pairs)
            .chain(axis(1, self.h_pairs))
            .chain(axis(2, self.w_pairs))
            .collect()
    }
}

/// Rotation tables for arbitrary token coordinates `(t, y, x)`.
pub fn rope_for_coords(coords: &[[f64; 3]], head_dim: usize) -> Result<Rotation> {
    let freqs = AxisSplit::for_head_dim(head_dim)?.frequencies();
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(coords.len() * half);
    let mut sin = Vec::with_capacity(coords.len() * half);
    for c in coords {
        for &(axis, f) in &freqs {
            let a = c[axis] * f;
            cos.push(a.cos());
            sin.push(a.sin());
        }
    }
    Ok(Rotation {
        cos: Tensor::new(vec![coords.len(), half], cos)?,
        sin: Tensor::new(vec![coords.len(), half], sin)?,
    })
}

/// Grid coordinates in token order (time-major, then rows, then columns).
/// With `frames_per_view`, the temporal coordinate restarts for each view.
pub fn grid_coords(axis_sizes: (usize, usize, usize), frames_per_view: Option<usize>) -> Vec<[f64; 3]> {
    let (t, h, w) = axis_sizes;
    let period = frames_per_view.unwrap_or(t).max(1);
    let mut out = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                out.push([(f % period) as f64, y as f64, x as f64]);
            }
        }
    }
    out
}

pub fn rope_phases(axis_sizes: (usize, usize, usize), head_dim: usize) -> Result<Rotation> {
    rope_for_coords(&grid_coords(axis_sizes, None), head_dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_two_one_one() {
        let s = AxisSplit::for_head_dim(32).unwrap();
        assert_eq!((s.t_pairs, s.h_pairs, s.w_pairs), (8, 4, 4));
        assert!(AxisSplit::for_head_dim(12).is_err());
        assert!(s.frequencies().iter().all(|&(_, f)| f > 0.0));
    }

    #[test]
    fn identical_coordinates_identical_rotations() {
        let r = rope_for_coords(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 2.0, 3.0]], 16).unwrap();
        assert_eq!(r.cos.frame(0), r.cos.frame(1));
        assert_eq!(r.sin.frame(0), r.sin.frame(1));
        assert_ne!(r.cos.frame(0), r.cos.frame(2));
    }

    #[test]
    fn views_restart_time() {
        let c = grid_coords((4, 1, 1), Some(2));
        assert_eq!(c.iter().map(|p| p[0]).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
