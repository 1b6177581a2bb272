//! Evaluation metrics: RNDS curves, PSNR, SSIM, latent L2, an FVD-style
//! Fréchet distance on latent statistics, win rates, and the action-variant
//! comparison harness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, VideoTensor};
use crate::worldmodel::tokenizer::four;

pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RndsCurve {
    /// `values[0]` is chunk 1 and always equals 1.
    pub values: Vec<f64>,
    pub scorer_id: String,
}

impl RndsCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("chunk,rnds\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{},{v}\n", i + 1));
        }
        s
    }
}

/// `RNDS[i] = (gen[i]/gt[i]) / (gen[1]/gt[1])`.
pub fn rnds(gen: &[f64], gt: &[f64], scorer_id: &str) -> Result<RndsCurve> {
    if gen.is_empty() || gen.len() != gt.len() {
        return Err(Error::invalid(format!(
            "RNDS needs equal non-empty score lists, got {} and {}",
            gen.len(),
            gt.len()
        )));
    }
    if gt.iter().any(|g| !(*g > 0.0)) || !(gen[0] > 0.0) {
        return Err(Error::invalid("RNDS needs positive ground-truth scores and first generated score"));
    }
    let base = gen[0] / gt[0];
    let mut values: Vec<f64> = gen.iter().zip(gt).map(|(g, t)| (g / t) / base).collect();
    values[0] = 1.0;
    Ok(RndsCurve {
        values,
        scorer_id: scorer_id.to_string(),
    })
}

/// Quality scorer filling the role of a learned video-quality model.
pub trait QualityScorer {
    fn id(&self) -> &str;
    fn score(&self, clip: &VideoTensor) -> Result<f64>;
}

/// Mean standard deviation over non-overlapping `window`×`window` patches,
/// averaged over frames and channels.
#[derive(Clone, Copy, Debug)]
pub struct LocalContrastScorer {
    pub window: usize,
}

impl Default for LocalContrastScorer {
    fn default() -> Self {
        Self { window: 4 }
    }
}

impl QualityScorer for LocalContrastScorer {
    fn id(&self) -> &str {
        "local-contrast"
    }

    fn score(&self, clip: &VideoTensor) -> Result<f64> {
        let [t, c, h, w] = four(clip.shape())?;
        let k = self.window.max(1);
        if k > h || k > w {
            return Err(Error::shape(format!("window {k} larger than {h}x{w} frame")));
        }
        let (mut total, mut count) = (0.0, 0usize);
        let d = clip.data();
        for plane in 0..t * c {
            let off = plane * h * w;
            for by in (0..=h - k).step_by(k) {
                for bx in (0..=w - k).step_by(k) {
                    let (mut s, mut s2) = (0.0, 0.0);
                    for y in by..by + k {
                        for x in bx..bx + k {
                            let v = d[off + y * w + x];
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let n = (k * k) as f64;
                    let var = (s2 / n - (s / n) * (s / n)).max(0.0);
                    total += var.sqrt();
                    count += 1;
                }
            }
        }
        Ok(total / count as f64)
    }
}

/// RNDS of per-chunk scores from `scorer` on generated vs ground-truth chunks.
pub fn rnds_from_chunks(scorer: &dyn QualityScorer, gen: &[VideoTensor], gt: &[VideoTensor]) -> Result<RndsCurve> {
    let g = gen.iter().map(|c| scorer.score(c)).collect::<Result<Vec<_>>>()?;
    let r = gt.iter().map(|c| scorer.score(c)).collect::<Result<Vec<_>>>()?;
    rnds(&g, &r, scorer.id())
}

/// `10·log10(peak²/MSE)`, capped at 99 dB.
pub fn psnr(a: &VideoTensor, b: &VideoTensor, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::invalid("peak must be positive"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 8;

/// Single-scale SSIM averaged over every 8×8 window of every frame and
/// channel, with `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²`.
pub fn ssim(a: &VideoTensor, b: &VideoTensor, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let [t, c, h, w] = four(a.shape())?;
    let k = SSIM_WINDOW;
    if k > h || k > w {
        return Err(Error::shape(format!("SSIM window {k} larger than {h}x{w} frame")));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (k * k) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for plane in 0..t * c {
        let off = plane * h * w;
        let (pa, pb) = (&a.data()[off..off + h * w], &b.data()[off..off + h * w]);
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let (va, vb) = (pa[y * w + x], pb[y * w + x]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean Euclidean distance between corresponding latent frames.
pub fn latent_l2(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    a.ensure_same_shape(b, "latent_l2")?;
    let t = a.len0();
    if t == 0 {
        return Err(Error::shape("latent has no frames"));
    }
    let total: f64 = (0..t)
        .map(|f| {
            a.frame(f)
                .iter()
                .zip(b.frame(f))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / t as f64)
}

/// Per-frame features for the Fréchet proxy: each latent channel averaged
/// over the spatial grid.
pub fn latent_frame_features(latents: &[LatentTensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for l in latents {
        let [t, c, h, w] = four(l.shape())?;
        for f in 0..t {
            let frame = l.frame(f);
            out.push((0..c).map(|ch| frame[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect());
        }
    }
    Ok(out)
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    let d = feats.first().map(Vec::len).ok_or_else(|| Error::invalid("no features"))?;
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::shape("feature vectors differ in length"));
    }
    let mut mean = DVector::zeros(d);
    for f in feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_column_slice(f) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)` between two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = moments(a)?;
    let (m2, s2) = moments(b)?;
    if m1.len() != m2.len() {
        return Err(Error::shape("feature sets differ in dimension"));
    }
    let r1 = psd_sqrt(&s1);
    let inner = psd_sqrt(&(&r1 * &s2 * &r1));
    let d = (&m1 - &m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * inner.trace();
    Ok(d.max(0.0))
}

/// Fréchet distance between latent-frame channel statistics.
pub fn fvd_proxy(gen: &[LatentTensor], reference: &[LatentTensor]) -> Result<f64> {
    frechet_distance(&latent_frame_features(gen)?, &latent_frame_features(reference)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vote {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "b")]
    B,
    #[serde(rename = "tie", alias = "Tie")]
    Tie,
}

/// `wins_A / (wins_A + wins_B)`; ties do not count.
pub fn win_rate(votes: &[Vote]) -> Result<f64> {
    if votes.is_empty() {
        return Err(Error::invalid("no votes"));
    }
    let a = votes.iter().filter(|v| **v == Vote::A).count();
    let b = votes.iter().filter(|v| **v == Vote::B).count();
    if a + b == 0 {
        return Err(Error::invalid("every vote is a tie"));
    }
    Ok(a as f64 / (a + b) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub latent_l2: f64,
}

/// Per-variant averages reported by [`ablation_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub latent_l2: f64,
    pub fvd_proxy: f64,
}

/// Average metrics of each variant's predictions against shared references.
/// `predictions[v][i]` is variant `v`'s latent for reference clip `i`.
pub fn ablation_report(
    names: &[String],
    predictions: &[Vec<LatentTensor>],
    references: &[LatentTensor],
    decode: &dyn Fn(&LatentTensor) -> Result<VideoTensor>,
    peak: f64,
) -> Result<Vec<VariantReport>> {
    if names.len() != predictions.len() {
        return Err(Error::invalid("one prediction set per variant name required"));
    }
    let ref_px = references.iter().map(decode).collect::<Result<Vec<_>>>()?;
    names
        .iter()
        .zip(predictions)
        .map(|(name, preds)| {
            if preds.len() != references.len() {
                return Err(Error::invalid(format!("variant `{name}` has {} predictions for {} references", preds.len(), references.len())));
            }
            let (mut p, mut s, mut l) = (0.0, 0.0, 0.0);
            for ((pred, r), rp) in preds.iter().zip(references).zip(&ref_px) {
                let px = decode(pred)?;
                p += psnr(&px, rp, peak)?;
                s += ssim(&px, rp, peak)?;
                l += latent_l2(pred, r)?;
            }
            let n = preds.len().max(1) as f64;
            Ok(VariantReport {
                variant: name.clone(),
                psnr: p / n,
                ssim: s / n,
                latent_l2: l / n,
                fvd_proxy: fvd_proxy(preds, references)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rnds_examples() {
        let c = rnds(&[0.8, 0.6], &[0.8, 0.8], "x").unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!((c.values[1] - 0.75).abs() < 1e-12);
        assert!(rnds(&[0.0, 1.0], &[1.0, 1.0], "x").is_err());
        assert!(rnds(&[1.0], &[1.0, 1.0], "x").is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::full(&[1, 1, 2, 2], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn win_rate_examples() {
        use Vote::*;
        assert!((win_rate(&[A, A, B]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(win_rate(&[A, B]).unwrap(), 0.5);
        assert!((win_rate(&[A, Tie, B, A]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(win_rate(&[Tie]).is_err());
        assert!(win_rate(&[]).is_err());
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let f: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert!(frechet_distance(&f, &f).unwrap() < 1e-8);
    }
}
