//! 1×2×2 patchification and multiview latent packing.

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Tensor};
use crate::worldmodel::tokenizer::four;

pub const PATCH: usize = 2;

/// `[T, C, h, w]` → tokens `[T·(h/2)·(w/2), C·4]`, token order time-major.
/// Feature `(c·2 + dy)·2 + dx` holds channel `c` at patch offset `(dy, dx)`.
pub fn patchify(x: &LatentTensor) -> Result<Tensor> {
    let [t, c, h, w] = four(x.shape())?;
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::shape(format!("latent {h}x{w} not divisible by the 2x2 patch")));
    }
    let (ph, pw) = (h / PATCH, w / PATCH);
    let feat = c * PATCH * PATCH;
    let xd = x.data();
    let mut out = vec![0.0; t * ph * pw * feat];
    for f in 0..t {
        for i in 0..ph {
            for j in 0..pw {
                let tok = (f * ph + i) * pw + j;
                for ci in 0..c {
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            let src = ((f * c + ci) * h + i * PATCH + dy) * w + j * PATCH + dx;
                            out[tok * feat + (ci * PATCH + dy) * PATCH + dx] = xd[src];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * ph * pw, feat], out)
}

/// Inverse of [`patchify`] for a latent of shape `[t, c, h, w]`.
pub fn unpatchify(tokens: &Tensor, shape: [usize; 4]) -> Result<LatentTensor> {
    let [t, c, h, w] = shape;
    let (ph, pw) = (h / PATCH, w / PATCH);
    let feat = c * PATCH * PATCH;
    if tokens.rows() != t * ph * pw || tokens.cols() != feat || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::shape(format!(
            "tokens {:?} do not unpatchify to {shape:?}",
            tokens.shape()
        )));
    }
    let td = tokens.data();
    let mut out = vec![0.0; t * c * h * w];
    for f in 0..t {
        for i in 0..ph {
            for j in 0..pw {
                let tok = (f * ph + i) * pw + j;
                for ci in 0..c {
                    for dy in 0..PATCH {
                        for dx in 0..PATCH {
                            let dst = ((f * c + ci) * h + i * PATCH + dy) * w + j * PATCH + dx;
                            out[dst] = td[tok * feat + (ci * PATCH + dy) * PATCH + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, c, h, w], out)
}

/// Latent frame index of every token for a `[t, _, h, w]` latent.
pub fn token_frames(t: usize, h: usize, w: usize) -> Vec<usize> {
    let per = (h / PATCH) * (w / PATCH);
    (0..t * per).map(|i| i / per).collect()
}

/// Concatenate views along time and append each view's embedding as
/// spatially constant extra channels: `[V·T, C + E, h, w]`.
pub fn pack_multiview(views: &[LatentTensor], view_emb: &Tensor) -> Result<LatentTensor> {
    let first = views.first().ok_or_else(|| Error::invalid("no views to pack"))?;
    let [t, c, h, w] = four(first.shape())?;
    if views.iter().any(|v| v.shape() != first.shape()) {
        return Err(Error::shape("all views must share one latent shape"));
    }
    if view_emb.rows() < views.len() {
        return Err(Error::shape(format!(
            "view embedding table has {} rows for {} views",
            view_emb.rows(),
            views.len()
        )));
    }
    let e = view_emb.cols();
    let plane = h * w;
    let mut out = Vec::with_capacity(views.len() * t * (c + e) * plane);
    for (vi, v) in views.iter().enumerate() {
        let emb = &view_emb.data()[vi * e..(vi + 1) * e];
        for f in 0..t {
            out.extend_from_slice(v.frame(f));
            for &val in emb {
                out.extend(std::iter::repeat_n(val, plane));
            }
        }
    }
    Tensor::new(vec![views.len() * t, c + e, h, w], out)
}

/// Split a packed latent back into its views, dropping the embedding channels.
pub fn unpack_multiview(packed: &LatentTensor, num_views: usize, emb_dim: usize) -> Result<Vec<LatentTensor>> {
    let [vt, ce, h, w] = four(packed.shape())?;
    if num_views == 0 || vt % num_views != 0 || ce < emb_dim {
        return Err(Error::shape(format!(
            "cannot unpack {:?} into {num_views} views",
            packed.shape()
        )));
    }
    let (t, c) = (vt / num_views, ce - emb_dim);
    let plane = h * w;
    (0..num_views)
        .map(|vi| {
            let mut data = Vec::with_capacity(t * c * plane);
            for f in 0..t {
                data.extend_from_slice(&packed.frame(vi * t + f)[..c * plane]);
            }
            Tensor::new(vec![t, c, h, w], data)
        })
        .collect()
}
