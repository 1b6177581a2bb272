//! Exact space-to-depth stand-in for the causal video VAE.
//!
//! Compression is 4×8×8 over (time, height, width). The first pixel frame is
//! encoded on its own (replicated across the four temporal slots) and every
//! following group of four frames becomes one latent frame, so 93 pixel
//! frames map to 24 latent frames. Decoding is the exact inverse.

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Tensor, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalTokenizer {
    pub temporal: usize,
    pub spatial: usize,
}

impl Default for CausalTokenizer {
    fn default() -> Self {
        Self {
            temporal: 4,
            spatial: 8,
        }
    }
}

/// Latent frames covering the first `pixel_frames` pixel frames.
pub fn latent_frames_covering(pixel_frames: usize) -> usize {
    if pixel_frames == 0 {
        0
    } else {
        1 + (pixel_frames - 1).div_ceil(4)
    }
}

impl CausalTokenizer {
    pub fn latent_channels(&self, pixel_channels: usize) -> usize {
        pixel_channels * self.temporal * self.spatial * self.spatial
    }

    pub fn latent_frames(&self, pixel_frames: usize) -> Result<usize> {
        if pixel_frames == 0 || (pixel_frames - 1) % self.temporal != 0 {
            return Err(Error::shape(format!(
                "pixel frame count {pixel_frames} is not 1 + {}k",
                self.temporal
            )));
        }
        Ok(1 + (pixel_frames - 1) / self.temporal)
    }

    pub fn pixel_frames(&self, latent_frames: usize) -> usize {
        1 + self.temporal * latent_frames.saturating_sub(1)
    }

    pub fn latent_shape(&self, video_shape: &[usize]) -> Result<[usize; 4]> {
        let [t, c, h, w] = four(video_shape)?;
        if h % self.spatial != 0 || w % self.spatial != 0 {
            return Err(Error::shape(format!(
                "frame {h}x{w} not divisible by {}",
                self.spatial
            )));
        }
        Ok([
            self.latent_frames(t)?,
            self.latent_channels(c),
            h / self.spatial,
            w / self.spatial,
        ])
    }

    /// Pixel frame feeding temporal slot `dt` of latent frame `k`.
    fn source_frame(&self, k: usize, dt: usize) -> usize {
        if k == 0 {
            0
        } else {
            1 + (k - 1) * self.temporal + dt
        }
    }

    pub fn encode(&self, video: &VideoTensor) -> Result<LatentTensor> {
        let [t, c, h, w] = four(video.shape())?;
        let [tl, cl, lh, lw] = self.latent_shape(video.shape())?;
        let (tt, s) = (self.temporal, self.spatial);
        let vd = video.data();
        let mut out = vec![0.0; tl * cl * lh * lw];
        for k in 0..tl {
            for ci in 0..c {
                for dt in 0..tt {
                    let f = self.source_frame(k, dt);
                    debug_assert!(f < t);
                    for dy in 0..s {
                        for dx in 0..s {
                            let ch = ((ci * tt + dt) * s + dy) * s + dx;
                            for i in 0..lh {
                                for j in 0..lw {
                                    let src = ((f * c + ci) * h + i * s + dy) * w + j * s + dx;
                                    out[((k * cl + ch) * lh + i) * lw + j] = vd[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![tl, cl, lh, lw], out)
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        let [tl, cl, lh, lw] = four(latent.shape())?;
        let (tt, s) = (self.temporal, self.spatial);
        let group = tt * s * s;
        if cl % group != 0 {
            return Err(Error::shape(format!(
                "latent channels {cl} not divisible by {group}"
            )));
        }
        let c = cl / group;
        let (t, h, w) = (self.pixel_frames(tl), lh * s, lw * s);
        let ld = latent.data();
        let mut out = vec![0.0; t * c * h * w];
        for k in 0..tl {
            let slots = if k == 0 { 1 } else { tt };
            for ci in 0..c {
                for dt in 0..slots {
                    let f = self.source_frame(k, dt);
                    for dy in 0..s {
                        for dx in 0..s {
                            let ch = ((ci * tt + dt) * s + dy) * s + dx;
                            for i in 0..lh {
                                for j in 0..lw {
                                    let dst = ((f * c + ci) * h + i * s + dy) * w + j * s + dx;
                                    out[dst] = ld[((k * cl + ch) * lh + i) * lw + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![t, c, h, w], out)
    }
}

pub(crate) fn four(shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(format!("expected a [T, C, H, W] tensor, got {shape:?}")))
}
