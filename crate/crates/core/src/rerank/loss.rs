//! Joint training objective: Plackett-Luce cross-entropy over the target
//! identifier sequence plus a pairwise hinge term that ties min-max scaled
//! logits to the first-stage score order.
//!
//! ```text
//! L      = L_CE + λ · L_rank
//! L_rank = C / K² · Σ_{s*_i < s*_j} max(0, p_i − p_j),   C = 100
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verbalizer::check_permutation;

/// Min-max scaled values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledProbs(pub Vec<f64>);

impl ScaledProbs {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(s − min) / (max − min)`; an all-equal input maps to 0.5 everywhere.
pub fn minmax_scale(scores: &[f64]) -> ScaledProbs {
    let (lo, hi) = min_max(scores);
    if hi > lo {
        ScaledProbs(scores.iter().map(|s| (s - lo) / (hi - lo)).collect())
    } else {
        ScaledProbs(vec![0.5; scores.len()])
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Backpropagates `grad_p` (w.r.t. the scaled values) through [`minmax_scale`].
/// At ties for min or max the first index carries the derivative.
pub fn minmax_scale_backward(scores: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(scores);
    let mut g = vec![0.0; scores.len()];
    if hi <= lo {
        return g;
    }
    let span = hi - lo;
    let argmin = scores.iter().position(|&s| s == lo).unwrap();
    let argmax = scores.iter().position(|&s| s == hi).unwrap();
    let mut sum_g = 0.0;
    let mut sum_gp = 0.0;
    for (i, (&s, &gp)) in scores.iter().zip(grad_p).enumerate() {
        g[i] += gp / span;
        sum_g += gp;
        sum_gp += gp * (s - lo);
    }
    let d_span = -sum_gp / (span * span);
    g[argmin] += -sum_g / span - d_span;
    g[argmax] += d_span;
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the ranking term, in `[0, 1]`.
    pub lambda: f64,
    /// Numerator of the `C / K²` scaling term.
    pub c: f64,
}

impl LossConfig {
    pub const C: f64 = 100.0;

    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(LossConfig { lambda, c: Self::C })
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.c / (k * k) as f64
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            c: Self::C,
        }
    }
}

pub fn ranking_loss(p: &ScaledProbs, s_star: &ScaledProbs, cfg: &LossConfig) -> f64 {
    ranking_loss_raw(p.values(), s_star.values(), cfg)
}

fn ranking_loss_raw(p: &[f64], s: &[f64], cfg: &LossConfig) -> f64 {
    assert_eq!(p.len(), s.len(), "prediction and target lengths differ");
    let k = p.len();
    if k == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            if s[i] < s[j] {
                sum += (p[i] - p[j]).max(0.0);
            }
        }
    }
    cfg.scale(k) * sum
}

/// Gradient of the ranking loss w.r.t. `p` (subgradient 0 at the hinge).
fn ranking_loss_grad(p: &[f64], s: &[f64], cfg: &LossConfig) -> Vec<f64> {
    let k = p.len();
    let scale = cfg.scale(k.max(1));
    let mut g = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            if s[i] < s[j] && p[i] > p[j] {
                g[i] += scale;
                g[j] -= scale;
            }
        }
    }
    g
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_logits(z: &[f64]) -> Result<()> {
    if let Some(i) = z.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} = {}", z[i])));
    }
    Ok(())
}

/// Plackett-Luce negative log-likelihood of `target` (1-based positions in
/// ranked order): at each slot, a softmax over identifiers not yet emitted.
pub fn ce_loss(z: &[f64], target: &[usize]) -> Result<f64> {
    Ok(ce_loss_grad(z, target)?.0)
}

/// [`ce_loss`] and its gradient w.r.t. `z`.
pub fn ce_loss_grad(z: &[f64], target: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_logits(z)?;
    check_permutation(target)?;
    if target.len() != z.len() {
        return Err(Error::invalid(format!(
            "target has {} entries for {} logits",
            target.len(),
            z.len()
        )));
    }
    let k = z.len();
    let mut remaining = vec![true; k];
    let mut loss = 0.0;
    let mut grad = vec![0.0; k];
    for &pos in target {
        let chosen = pos - 1;
        let live = (0..k).filter(|&i| remaining[i]);
        let lse = log_sum_exp(live.clone().map(|i| z[i]));
        loss += lse - z[chosen];
        for i in live {
            grad[i] += (z[i] - lse).exp();
        }
        grad[chosen] -= 1.0;
        remaining[chosen] = false;
    }
    Ok((loss.max(0.0), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub rank: f64,
    pub total: f64,
}

/// `ce_loss(z) + λ · ranking_loss(minmax(z), minmax(kge_scores))`.
pub fn total_loss(
    z: &[f64],
    kge_scores: &[f64],
    target: &[usize],
    cfg: &LossConfig,
) -> Result<LossParts> {
    Ok(total_loss_grad(z, kge_scores, target, cfg)?.0)
}

pub fn total_loss_grad(
    z: &[f64],
    kge_scores: &[f64],
    target: &[usize],
    cfg: &LossConfig,
) -> Result<(LossParts, Vec<f64>)> {
    if kge_scores.len() != z.len() {
        return Err(Error::invalid("KGE scores and logits differ in length"));
    }
    let (ce, mut grad) = ce_loss_grad(z, target)?;
    let p = minmax_scale(z);
    let s = minmax_scale(kge_scores);
    let rank = ranking_loss(&p, &s, cfg);
    if cfg.lambda != 0.0 {
        let gp: Vec<f64> = ranking_loss_grad(p.values(), s.values(), cfg)
            .into_iter()
            .map(|g| g * cfg.lambda)
            .collect();
        for (g, d) in grad.iter_mut().zip(minmax_scale_backward(z, &gp)) {
            *g += d;
        }
    }
    Ok((
        LossParts {
            ce,
            rank,
            total: ce + cfg.lambda * rank,
        },
        grad,
    ))
}
