//! Motion extraction, motion intensity, and mask sampling over the
//! `T_e × V` token grid.
//!
//! Motion-aware masking turns per-segment motion intensity into a softmax
//! distribution and draws the masked set with Gumbel-top-K: perturb each
//! log-probability with independent Gumbel noise and keep the K largest.
//! This samples K tokens without replacement with probability proportional
//! to the distribution at each successive draw.

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

const GUMBEL_EPS: f64 = 1e-12;

/// How the first `stride` frames of a motion sequence are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zeros,
    Replicate,
}

/// Temporal difference of a skeleton sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub values: DenseArray,
    pub stride: usize,
    pub padding: Padding,
}

/// `M[i] = S[i] − S[i−m]` for `i ≥ m`; the first `m` frames are zero or copy
/// frames `m..2m`.
pub fn extract_motion(seq: &DenseArray, stride: usize, padding: Padding) -> Result<MotionSequence> {
    let &[t, v, c] = seq.shape() else {
        return Err(Error::Shape(format!("expected T×V×C, got {:?}", seq.shape())));
    };
    if stride == 0 || stride >= t {
        return Err(Error::Contract(format!("motion stride {stride} must lie in 1..{t}")));
    }
    if padding == Padding::Replicate && 2 * stride > t {
        return Err(Error::Contract(format!(
            "replicate padding needs at least {} frames for stride {stride}, got {t}",
            2 * stride
        )));
    }
    let w = v * c;
    let s = seq.data();
    let mut out = vec![0.0; t * w];
    for i in stride..t {
        for j in 0..w {
            out[i * w + j] = s[i * w + j] - s[(i - stride) * w + j];
        }
    }
    if padding == Padding::Replicate {
        out.copy_within(stride * w..2 * stride * w, 0);
    }
    Ok(MotionSequence {
        values: DenseArray::new(vec![t, v, c], out)?,
        stride,
        padding,
    })
}

/// Sum of absolute motion over each segment's `l` frames and all channels:
/// a `T_e × V` intensity map.
pub fn motion_intensity(motion: &DenseArray, segment_len: usize) -> Result<DenseArray> {
    let &[t, v, c] = motion.shape() else {
        return Err(Error::Shape(format!("expected T×V×C, got {:?}", motion.shape())));
    };
    if segment_len == 0 || t % segment_len != 0 {
        return Err(Error::Contract(format!("{t} frames not divisible into segments of {segment_len}")));
    }
    let t_e = t / segment_len;
    let mut out = vec![0.0; t_e * v];
    for seg in 0..t_e {
        for joint in 0..v {
            let mut acc = 0.0;
            for f in seg * segment_len..(seg + 1) * segment_len {
                for ch in 0..c {
                    acc += motion.data()[(f * v + joint) * c + ch].abs();
                }
            }
            out[seg * v + joint] = acc;
        }
    }
    DenseArray::new(vec![t_e, v], out)
}

/// `softmax(I / τ)` over the whole flattened grid.
pub fn masking_probabilities(intensity: &DenseArray, temperature: f64) -> Result<DenseArray> {
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature {temperature} must be positive")));
    }
    let max = intensity.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = intensity.data().iter().map(|x| ((x - max) / temperature).exp()).collect();
    let total: f64 = exp.iter().sum();
    DenseArray::new(intensity.shape().to_vec(), exp.into_iter().map(|e| e / total).collect())
}

/// Partition of the flattened token grid into masked and visible tokens.
/// Both index lists are ascending flat (t-major) indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskPlan {
    pub fn from_masked(mut masked: Vec<usize>, tokens: usize, mask_ratio: f64) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= tokens) {
            return Err(Error::Contract(format!("masked index beyond {tokens} tokens")));
        }
        let mut is_masked = vec![false; tokens];
        for &m in &masked {
            is_masked[m] = true;
        }
        let unmasked = (0..tokens).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            masked,
            unmasked,
            mask_ratio,
        })
    }

    /// Plan with nothing masked.
    pub fn none(tokens: usize) -> Self {
        Self {
            masked: Vec::new(),
            unmasked: (0..tokens).collect(),
            mask_ratio: 0.0,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    /// For each grid position, its row in the visible-token matrix, or `None`
    /// when masked.
    pub fn visible_rows(&self) -> Vec<Option<usize>> {
        let mut rows = vec![None; self.num_tokens()];
        for (k, &u) in self.unmasked.iter().enumerate() {
            rows[u] = Some(k);
        }
        rows
    }
}

/// `round(ratio · tokens)` with halves rounded away from zero.
pub fn masked_count(mask_ratio: f64, tokens: usize) -> usize {
    ((mask_ratio * tokens as f64).round() as usize).min(tokens)
}

fn check_ratio(mask_ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::Contract(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Gumbel-top-K mask sampling from the distribution `probs`.
pub fn sample_mask(probs: &DenseArray, mask_ratio: f64, rng: &mut dyn RngCore) -> Result<MaskPlan> {
    check_ratio(mask_ratio)?;
    let n = probs.len();
    let k = masked_count(mask_ratio, n);
    let mut keys: Vec<(f64, usize)> = probs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let eps: f64 = rng.random::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            let gumbel = -(-eps.ln()).ln();
            (p.ln() + gumbel, i)
        })
        .collect();
    // Descending key; equal keys resolve to the lower flat index.
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    MaskPlan::from_masked(keys[..k].iter().map(|&(_, i)| i).collect(), n, mask_ratio)
}

/// Uniformly random masked set of the same size rule.
pub fn sample_mask_random(tokens: usize, mask_ratio: f64, rng: &mut dyn RngCore) -> Result<MaskPlan> {
    check_ratio(mask_ratio)?;
    let k = masked_count(mask_ratio, tokens);
    let masked = index::sample(rng, tokens, k).into_vec();
    MaskPlan::from_masked(masked, tokens, mask_ratio)
}
