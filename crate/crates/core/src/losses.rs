//! Contrastive and segmentation objectives, and the clipped joint loss.
//!
//! All losses are built from differentiable graph ops and work for any
//! [`Scalar`] element type.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::IGNORE_LABEL;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Norm floor below which an embedding counts as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// Clamp applied to the normalized similarity inside [`cl_loss`].
pub const CL_CLAMP: f64 = 1e-6;

/// Identifies one contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermKey {
    pub stage: usize,
    pub class: u8,
}

/// Scalar values of one joint-loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_ce: f64,
    pub seg_dice: f64,
    pub contrastive_raw: f64,
    pub contrastive_clipped: f64,
    pub total: f64,
    /// Value of each contributing contrastive term.
    #[serde(with = "term_list")]
    pub terms: BTreeMap<TermKey, f64>,
}

/// JSON object keys must be strings, so terms travel as a list of records.
mod term_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::TermKey;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        stage: usize,
        class: u8,
        value: f64,
    }

    pub fn serialize<S: Serializer>(
        terms: &BTreeMap<TermKey, f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let list: Vec<Entry> = terms
            .iter()
            .map(|(k, &value)| Entry {
                stage: k.stage,
                class: k.class,
                value,
            })
            .collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<TermKey, f64>, D::Error> {
        let list = Vec::<Entry>::deserialize(d)?;
        Ok(list
            .into_iter()
            .map(|e| {
                let key = TermKey {
                    stage: e.stage,
                    class: e.class,
                };
                (key, e.value)
            })
            .collect())
    }
}

/// Plain cosine similarity; zero vectors give 0.
pub fn cosine(u: &[f32], v: &[f32]) -> f32 {
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let denom = nu.sqrt() * nv.sqrt();
    if nu.sqrt() <= ZERO_NORM || nv.sqrt() <= ZERO_NORM {
        0.0
    } else {
        (dot / denom) as f32
    }
}

/// True when a vector is too small to define a direction.
pub fn is_zero_vector(u: &[f32]) -> bool {
    u.iter()
        .map(|&a| f64::from(a) * f64::from(a))
        .sum::<f64>()
        .sqrt()
        <= ZERO_NORM
}

/// Row-wise cosine similarity of `[P,n]` inputs, giving `[P]`.
pub fn cosine_similarity<T: Scalar>(g: &mut Graph<T>, u: Var, v: Var) -> Result<Var> {
    if g.shape(u) != g.shape(v) || g.shape(u).len() != 2 {
        return Err(Error::shape("cosine_similarity", g.shape(u), g.shape(v)));
    }
    let un = g.normalize_rows(u, T::of(ZERO_NORM))?;
    let vn = g.normalize_rows(v, T::of(ZERO_NORM))?;
    let prod = g.mul(un, vn)?;
    g.sum_axis(prod, 1)
}

/// InfoNCE averaged over anchor rows.
///
/// `anchors` and `positives` are `[P,n]`, `negatives` is `[M,n]` and shared by
/// every anchor. Returns `None` (skip) when there are no anchors or no negatives.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: Var,
    negatives: Var,
    temperature: T,
) -> Result<Option<Var>> {
    if temperature <= T::zero() {
        return Err(Error::op("info_nce", "temperature must be positive"));
    }
    let (sa, sn) = (g.shape(anchors).to_vec(), g.shape(negatives).to_vec());
    if sn.len() != 2 || sa.len() != 2 || sn[1] != sa[1] {
        return Err(Error::shape("info_nce", &sa, &sn));
    }
    if sa[0] == 0 || sn[0] == 0 {
        return Ok(None);
    }
    let pos = cosine_similarity(g, anchors, positives)?;
    let pos = g.reshape(pos, &[sa[0], 1])?;
    let an = g.normalize_rows(anchors, T::of(ZERO_NORM))?;
    let nn = g.normalize_rows(negatives, T::of(ZERO_NORM))?;
    let nt = g.transpose(nn)?;
    let neg = g.matmul(an, nt)?;
    let logits = g.concat(&[pos, neg], 1)?;
    let logits = g.scale(logits, T::one() / temperature);
    let logp = g.log_softmax(logits, 1)?;
    let first = g.narrow(logp, 1, 0, 1)?;
    let mean = g.mean(first);
    Ok(Some(g.scale(mean, -T::one())))
}

/// Binary soft cross-entropy over similarities mapped to `[0,1]`.
///
/// `u`, `v` are `[P,n]`; `targets[i]` is 1 for same-class pairs and 0
/// otherwise. Returns `None` (skip) for an empty pair list.
pub fn cl_loss<T: Scalar>(
    g: &mut Graph<T>,
    u: Var,
    v: Var,
    targets: &[bool],
    smoothing: T,
) -> Result<Option<Var>> {
    if smoothing < T::zero() || smoothing >= T::one() {
        return Err(Error::op(
            "cl_loss",
            format!("smoothing {smoothing} outside [0, 1)"),
        ));
    }
    let p = g.shape(u).first().copied().unwrap_or(0);
    if p != targets.len() {
        return Err(Error::shape("cl_loss", g.shape(u), &[targets.len()]));
    }
    if p == 0 {
        return Ok(None);
    }
    let half = T::of(0.5);
    let sim = cosine_similarity(g, u, v)?;
    let shifted = g.add_scalar(sim, T::one());
    let unit = g.scale(shifted, half);
    let eps = T::of(CL_CLAMP);
    let s_hat = g.clamp(unit, eps, T::one() - eps);
    let smoothed: Vec<T> = targets
        .iter()
        .map(|&t| {
            let t = if t { T::one() } else { T::zero() };
            t * (T::one() - smoothing) + smoothing * half
        })
        .collect();
    let complement: Vec<T> = smoothed.iter().map(|&t| T::one() - t).collect();
    let t_pos = g.constant(Tensor::from_vec(smoothed));
    let t_neg = g.constant(Tensor::from_vec(complement));
    let log_s = g.log(s_hat);
    let flipped = g.scale(s_hat, -T::one());
    let one_minus = g.add_scalar(flipped, T::one());
    let log_1ms = g.log(one_minus);
    let a = g.mul(t_pos, log_s)?;
    let b = g.mul(t_neg, log_1ms)?;
    let ll = g.add(a, b)?;
    let mean = g.mean(ll);
    Ok(Some(g.scale(mean, -T::one())))
}

/// Flattens `[..., K]` logits to `[N, K]` and keeps the non-ignored rows.
fn valid_rows<T: Scalar>(
    g: &mut Graph<T>,
    op: &'static str,
    x: Var,
    labels: &[u8],
) -> Result<(Var, Vec<u8>, usize)> {
    let shape = g.shape(x).to_vec();
    let k = *shape.last().ok_or_else(|| Error::op(op, "scalar input"))?;
    let n = shape.iter().product::<usize>() / k.max(1);
    if n != labels.len() {
        return Err(Error::shape(op, &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&c| c != IGNORE_LABEL && c as usize >= k)
    {
        return Err(Error::op(
            op,
            format!("class id {bad} out of range for {k} classes"),
        ));
    }
    let flat = g.reshape(x, &[n, k])?;
    let keep: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    let kept_labels = keep.iter().map(|&i| labels[i]).collect();
    let rows = if keep.len() == n {
        flat
    } else {
        g.gather(flat, &keep)?
    };
    Ok((rows, kept_labels, k))
}

/// Mean cross-entropy against label-smoothed one-hot targets: the true class
/// gets `1 - smoothing + smoothing/K`, every other class `smoothing/K`.
/// Returns `None` (skip) when every pixel is ignored.
pub fn soft_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    smoothing: T,
) -> Result<Option<Var>> {
    let (rows, labels, k) = valid_rows(g, "soft_cross_entropy", logits, labels)?;
    if labels.is_empty() {
        return Ok(None);
    }
    let off = smoothing / T::of(k as f64);
    let on = T::one() - smoothing + off;
    let mut target = vec![off; labels.len() * k];
    for (i, &c) in labels.iter().enumerate() {
        target[i * k + c as usize] = on;
    }
    let target = g.constant(Tensor::new(vec![labels.len(), k], target)?);
    let logp = g.log_softmax(rows, 1)?;
    let weighted = g.mul(logp, target)?;
    let total = g.sum(weighted);
    Ok(Some(g.scale(total, -T::one() / T::of(labels.len() as f64))))
}

/// `1 - mean_c (2·Σp·y + 1) / (Σp + Σy + 1)` over classes present in `labels`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (rows, labels, k) = valid_rows(g, "dice_loss", probs, labels)?;
    let mut onehot = vec![T::zero(); labels.len() * k];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        onehot[i * k + c as usize] = T::one();
        counts[c as usize] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let y = g.constant(Tensor::new(vec![labels.len(), k], onehot)?);
    let py = g.mul(rows, y)?;
    let inter = g.sum_axis(py, 0)?;
    let psum = g.sum_axis(rows, 0)?;
    let num = g.scale(inter, T::of(2.0));
    let num = g.add_scalar(num, T::one());
    let ysum = g.constant(Tensor::from_vec(
        counts.iter().map(|&c| T::of(c as f64 + 1.0)).collect(),
    ));
    let den = g.add(psum, ysum)?;
    let ratio = g.div(num, den)?;
    let ratio = g.gather(ratio, &present)?;
    let mean = g.mean(ratio);
    let neg = g.scale(mean, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Output of [`joint_loss`].
pub struct JointLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `ce + dice + min(mean(terms), clip)`.
///
/// The contrastive mean passes no gradient while the clip is active. With no
/// contributing terms the contrastive part is exactly zero.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    ce: Option<Var>,
    dice: Var,
    terms: &[(TermKey, Var)],
    clip: T,
) -> Result<JointLoss> {
    let scalar = |g: &Graph<T>, v: Var| g.value(v).item().as_f64();
    let mut breakdown = LossBreakdown {
        seg_dice: scalar(g, dice),
        ..LossBreakdown::default()
    };
    let mut total = dice;
    if let Some(ce) = ce {
        breakdown.seg_ce = scalar(g, ce);
        total = g.add(ce, dice)?;
    }
    if !terms.is_empty() {
        let mut acc = terms[0].1;
        for &(_, v) in &terms[1..] {
            acc = g.add(acc, v)?;
        }
        let raw = g.scale(acc, T::one() / T::of(terms.len() as f64));
        let clipped = g.clamp(raw, T::neg_infinity(), clip);
        breakdown.contrastive_raw = scalar(g, raw);
        breakdown.contrastive_clipped = scalar(g, clipped);
        for &(key, v) in terms {
            breakdown.terms.insert(key, scalar(g, v));
        }
        total = g.add(total, clipped)?;
    }
    breakdown.total = scalar(g, total);
    Ok(JointLoss { total, breakdown })
}

#[cfg(test)]
mod tests;
