//! Checkpoint merging: weighted soup, TIES, DARE-Linear and DARE-TIES over
//! task vectors, plus a grid search that scores every merge candidate.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::worldmodel::ParamSet;

fn check_compatible(a: &ParamSet, b: &ParamSet) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::invalid("checkpoints have different parameter names"));
    }
    for (name, t) in a {
        t.ensure_same_shape(&b[name], name)?;
    }
    Ok(())
}

/// Per-tensor weighted average; weights are normalized to sum to 1.
pub fn soup(checkpoints: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::invalid("soup needs at least one checkpoint"))?;
    if weights.len() != checkpoints.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} checkpoints",
            weights.len(),
            checkpoints.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::invalid("soup weights must be non-negative with a positive sum"));
    }
    for c in &checkpoints[1..] {
        check_compatible(first, c)?;
    }
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    Ok(first
        .iter()
        .map(|(name, t0)| {
            let mut out = vec![0.0; t0.numel()];
            for (c, &wi) in checkpoints.iter().zip(&w) {
                if wi == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(c[name].data()) {
                    *o += wi * x;
                }
            }
            // weights summing to one in floating point can still perturb a
            // shared value; keep coordinates on which every input agrees
            for (i, o) in out.iter_mut().enumerate() {
                let v = t0.data()[i];
                if checkpoints.iter().zip(&w).all(|(c, &wi)| wi == 0.0 || c[name].data()[i] == v) {
                    *o = v;
                }
            }
            (name.clone(), Tensor::new(t0.shape().to_vec(), out).expect("same shape"))
        })
        .collect())
}

/// `τ = θ_ft − θ_base`.
pub fn task_vector(base: &ParamSet, finetuned: &ParamSet) -> Result<ParamSet> {
    check_compatible(base, finetuned)?;
    Ok(base
        .iter()
        .map(|(name, b)| (name.clone(), finetuned[name].zip_map(b, |f, b| f - b)))
        .collect())
}

/// Keep the `density` fraction of largest-magnitude entries, zero the rest.
pub fn trim(t: &Tensor, density: f64) -> Tensor {
    let n = t.numel();
    let k = ((density * n as f64).ceil() as usize).min(n);
    if k == n {
        return t.clone();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        t.data()[b]
            .abs()
            .total_cmp(&t.data()[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = Tensor::zeros(t.shape());
    for &i in &idx[..k] {
        out.data_mut()[i] = t.data()[i];
    }
    out
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} must lie in (0, 1]")));
    }
    Ok(())
}

/// TIES over task vectors: trim each to its top `density` fraction, elect
/// the sign of the summed trimmed values, average the agreeing entries.
/// Coordinates with no elected mass stay at the base value.
///
/// With `finetuned` given, the agreeing average is taken over the finetuned
/// values themselves, `(1 − λ)·θ_base + λ·mean(θ_i)`, which is the same merge
/// but reproduces a lone finetuned model bit-exactly at `λ = 1`.
fn ties_impl(base: &ParamSet, taus: &[ParamSet], finetuned: Option<&[&ParamSet]>, density: f64, lambda: f64) -> Result<ParamSet> {
    check_density(density)?;
    if taus.is_empty() {
        return Err(Error::invalid("TIES needs at least one finetuned checkpoint"));
    }
    let mut out = ParamSet::new();
    for (name, b) in base {
        let trimmed: Vec<Tensor> = taus.iter().map(|tau| trim(&tau[name], density)).collect();
        let mut merged = b.data().to_vec();
        for (i, m) in merged.iter_mut().enumerate() {
            let total: f64 = trimmed.iter().map(|t| t.data()[i]).sum();
            if total == 0.0 {
                continue;
            }
            let sign = total.signum();
            let (mut s, mut c) = (0.0, 0usize);
            for (k, t) in trimmed.iter().enumerate() {
                let v = t.data()[i];
                if v != 0.0 && v.signum() == sign {
                    s += match finetuned {
                        Some(f) => f[k][name].data()[i],
                        None => v,
                    };
                    c += 1;
                }
            }
            let mean = s / c as f64;
            *m = match finetuned {
                Some(_) => (1.0 - lambda) * *m + lambda * mean,
                None => *m + lambda * mean,
            };
        }
        out.insert(name.clone(), Tensor::new(b.shape().to_vec(), merged)?);
    }
    Ok(out)
}

/// `θ_base + λ·TIES(τ_1..τ_n)` for precomputed task vectors.
pub fn ties_from_task_vectors(base: &ParamSet, taus: &[ParamSet], density: f64, lambda: f64) -> Result<ParamSet> {
    for t in taus {
        check_compatible(base, t)?;
    }
    ties_impl(base, taus, None, density, lambda)
}

pub fn ties(base: &ParamSet, finetuned: &[&ParamSet], density: f64, lambda: f64) -> Result<ParamSet> {
    let taus = finetuned
        .iter()
        .map(|f| task_vector(base, f))
        .collect::<Result<Vec<_>>>()?;
    ties_impl(base, &taus, Some(finetuned), density, lambda)
}

fn check_drop(drop_p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::invalid(format!("drop_p {drop_p} must lie in [0, 1)")));
    }
    Ok(())
}

/// Drop each coordinate with probability `drop_p`, rescale survivors by `1/(1−drop_p)`.
pub fn dare_drop(tau: &ParamSet, drop_p: f64, rng: &mut impl Rng) -> Result<ParamSet> {
    check_drop(drop_p)?;
    if drop_p == 0.0 {
        return Ok(tau.clone());
    }
    let keep = 1.0 / (1.0 - drop_p);
    Ok(tau
        .iter()
        .map(|(name, t)| {
            let mut d = t.clone();
            for v in d.data_mut() {
                *v = if rng.random::<f64>() < drop_p { 0.0 } else { *v * keep };
            }
            (name.clone(), d)
        })
        .collect())
}

/// Dropped-and-rescaled task vectors of every finetuned checkpoint, drawn
/// from one stream seeded by `seed`.
pub fn dare_task_vectors(base: &ParamSet, finetuned: &[&ParamSet], drop_p: f64, seed: u64) -> Result<Vec<ParamSet>> {
    check_drop(drop_p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    finetuned
        .iter()
        .map(|f| dare_drop(&task_vector(base, f)?, drop_p, &mut rng))
        .collect()
}

/// `θ = θ_base + Σ w_i · DARE(τ_i)`.
pub fn dare_linear(base: &ParamSet, finetuned: &[&ParamSet], drop_p: f64, weights: &[f64], seed: u64) -> Result<ParamSet> {
    if finetuned.is_empty() {
        return Err(Error::invalid("DARE needs at least one finetuned checkpoint"));
    }
    if weights.len() != finetuned.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} checkpoints",
            weights.len(),
            finetuned.len()
        )));
    }
    let taus = dare_task_vectors(base, finetuned, drop_p, seed)?;
    let mut out = base.clone();
    for (tau, &w) in taus.iter().zip(weights) {
        for (name, t) in out.iter_mut() {
            for (o, d) in t.data_mut().iter_mut().zip(tau[name].data()) {
                *o += w * d;
            }
        }
    }
    Ok(out)
}

/// DARE drop-and-rescale of every task vector, then TIES. With `drop_p = 0`
/// the drop is the identity and this is exactly [`ties`].
pub fn dare_ties(base: &ParamSet, finetuned: &[&ParamSet], drop_p: f64, density: f64, lambda: f64, seed: u64) -> Result<ParamSet> {
    check_density(density)?;
    check_drop(drop_p)?;
    if drop_p == 0.0 {
        return ties(base, finetuned, density, lambda);
    }
    let taus = dare_task_vectors(base, finetuned, drop_p, seed)?;
    ties_impl(base, &taus, None, density, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeMethod {
    /// `(1 − α)·base + α·mean(finetuned)`.
    Soup { alpha: f64 },
    Ties { density: f64, lambda: f64 },
    /// Each task vector weighted `λ / n`.
    DareLinear { drop_p: f64, lambda: f64 },
    DareTies { drop_p: f64, density: f64, lambda: f64 },
}

impl MergeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::Soup { .. } => "soup",
            MergeMethod::Ties { .. } => "ties",
            MergeMethod::DareLinear { .. } => "dare_linear",
            MergeMethod::DareTies { .. } => "dare_ties",
        }
    }

    fn hyper(&self) -> Vec<f64> {
        match *self {
            MergeMethod::Soup { alpha } => vec![alpha],
            MergeMethod::Ties { density, lambda } => vec![density, lambda],
            MergeMethod::DareLinear { drop_p, lambda } => vec![drop_p, lambda],
            MergeMethod::DareTies { drop_p, density, lambda } => vec![drop_p, density, lambda],
        }
    }

    /// Lexicographic order on (method name, hyperparameters).
    pub fn cmp_hyper(&self, other: &MergeMethod) -> Ordering {
        self.name().cmp(other.name()).then_with(|| {
            self.hyper()
                .iter()
                .zip(other.hyper().iter())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }

    pub fn apply(&self, base: &ParamSet, finetuned: &[&ParamSet], seed: u64) -> Result<ParamSet> {
        let n = finetuned.len();
        if n == 0 {
            return Err(Error::invalid("merging needs at least one finetuned checkpoint"));
        }
        match *self {
            MergeMethod::Soup { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid(format!("soup alpha {alpha} must lie in [0, 1]")));
                }
                let mut cks = vec![base];
                cks.extend_from_slice(finetuned);
                let mut w = vec![1.0 - alpha];
                w.extend(std::iter::repeat_n(alpha / n as f64, n));
                soup(&cks, &w)
            }
            MergeMethod::Ties { density, lambda } => ties(base, finetuned, density, lambda),
            MergeMethod::DareLinear { drop_p, lambda } => {
                dare_linear(base, finetuned, drop_p, &vec![lambda / n as f64; n], seed)
            }
            MergeMethod::DareTies { drop_p, density, lambda } => {
                dare_ties(base, finetuned, drop_p, density, lambda, seed)
            }
        }
    }
}

/// 24 points, six per method.
pub fn default_grid() -> Vec<MergeMethod> {
    let mut g = Vec::new();
    for alpha in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
        g.push(MergeMethod::Soup { alpha });
    }
    for density in [0.1, 0.3, 0.5] {
        for lambda in [0.5, 1.0] {
            g.push(MergeMethod::Ties { density, lambda });
        }
    }
    for drop_p in [0.5, 0.9] {
        for lambda in [0.5, 0.75, 1.0] {
            g.push(MergeMethod::DareLinear { drop_p, lambda });
        }
    }
    for drop_p in [0.5, 0.9] {
        for density in [0.1, 0.3, 0.5] {
            g.push(MergeMethod::DareTies { drop_p, density, lambda: 1.0 });
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub method: MergeMethod,
    pub score: f64,
}

/// Score every grid point, best first; equal scores fall back to
/// lexicographic hyperparameter order. Points are evaluated on up to
/// `threads` workers.
pub fn grid_search(
    base: &ParamSet,
    finetuned: &[&ParamSet],
    grid: &[MergeMethod],
    eval_fn: &(dyn Fn(&ParamSet) -> Result<f64> + Sync),
    seed: u64,
    threads: usize,
) -> Result<Vec<Candidate>> {
    if grid.is_empty() {
        return Err(Error::invalid("merge grid is empty"));
    }
    let threads = threads.clamp(1, grid.len());
    let chunk = grid.len().div_ceil(threads);
    let scored: Vec<Result<Vec<Candidate>>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|m| {
                            let merged = m.apply(base, finetuned, seed)?;
                            Ok(Candidate {
                                method: *m,
                                score: eval_fn(&merged)?,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("merge worker panicked"))))
            .collect()
    });
    let mut out = Vec::with_capacity(grid.len());
    for part in scored {
        out.extend(part?);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.method.cmp_hyper(&b.method)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(v: &[f64]) -> ParamSet {
        [("w".to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap())].into()
    }

    #[test]
    fn soup_weighted_mean() {
        let a = ps(&[2.0, 2.0]);
        let b = ps(&[4.0, 4.0]);
        assert_eq!(soup(&[&a, &b], &[0.25, 0.75]).unwrap(), ps(&[3.5, 3.5]));
        assert_eq!(soup(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        let c: ParamSet = [("v".to_string(), Tensor::zeros(&[2]))].into();
        assert!(soup(&[&a, &c], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ties_sign_election() {
        let base = ps(&[0.0]);
        let merged = ties(&base, &[&ps(&[3.0]), &ps(&[-1.0])], 1.0, 1.0).unwrap();
        assert_eq!(merged, ps(&[3.0]));
        assert!(ties(&base, &[&ps(&[1.0])], 0.0, 1.0).is_err());
    }

    #[test]
    fn trim_keeps_top_fraction() {
        let t = Tensor::new(vec![4], vec![0.1, -5.0, 2.0, -0.5]).unwrap();
        assert_eq!(trim(&t, 0.5).data(), &[0.0, -5.0, 2.0, 0.0]);
    }

    #[test]
    fn grid_shape_and_order() {
        let g = default_grid();
        assert_eq!(g.len(), 24);
        let base = ps(&[0.0, 1.0]);
        let ft = ps(&[1.0, 0.0]);
        let c = grid_search(&base, &[&ft], &g, &|_| Ok(1.0), 0, 3).unwrap();
        let mut sorted = g.clone();
        sorted.sort_by(|a, b| a.cmp_hyper(b));
        assert_eq!(c.iter().map(|x| x.method).collect::<Vec<_>>(), sorted);
        assert!(grid_search(&base, &[&ft], &[], &|_| Ok(1.0), 0, 1).is_err());
    }
}
