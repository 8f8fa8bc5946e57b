use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};

use super::loss::{LossConfig, LossParts, total_loss, total_loss_grad};
use super::model::{EncodedInput, RerankerModel, RerankerParams, Vocabulary};
use super::samples::RerankSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub token_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for RerankTrainConfig {
    fn default() -> Self {
        RerankTrainConfig {
            epochs: 3,
            batch: 16,
            lr: 1e-4,
            lambda: 0.1,
            token_dim: 32,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Per-epoch means, one JSON line each in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub rank_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RerankTraining {
    pub model: RerankerModel,
    pub log: Vec<EpochLog>,
}

/// Mean loss parts of `model` over encoded samples.
pub fn mean_loss(
    model: &RerankerModel,
    samples: &[RerankSample],
    encoded: &[EncodedInput],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let parts = samples
        .par_iter()
        .zip(encoded)
        .map(|(s, x)| total_loss(&model.logits(x), &s.kge_scores, &s.target, cfg))
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len().max(1) as f64;
    let sum = parts.iter().fold((0.0, 0.0, 0.0), |acc, p| {
        (acc.0 + p.ce, acc.1 + p.rank, acc.2 + p.total)
    });
    Ok(LossParts {
        ce: sum.0 / n,
        rank: sum.1 / n,
        total: sum.2 / n,
    })
}

/// Gradient of the mean total loss over `batch`, summed in batch order.
pub fn batch_gradient(
    model: &RerankerModel,
    batch: &[(&RerankSample, &EncodedInput)],
    cfg: &LossConfig,
) -> Result<(LossParts, RerankerParams)> {
    let per_sample = batch
        .par_iter()
        .map(|(s, x)| {
            let mut parts = None;
            let grad = model.logits_and_backward(x, |z| {
                let (p, dz) = total_loss_grad(z, &s.kge_scores, &s.target, cfg)?;
                parts = Some(p);
                Ok(dz)
            })?;
            Ok((parts.unwrap(), grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = model.zero_grad();
    let mut sum = LossParts {
        ce: 0.0,
        rank: 0.0,
        total: 0.0,
    };
    let inv = 1.0 / batch.len().max(1) as f64;
    for (p, g) in &per_sample {
        grad.add_scaled(g, inv);
        sum.ce += p.ce * inv;
        sum.rank += p.rank * inv;
        sum.total += p.total * inv;
    }
    Ok((sum, grad))
}

/// Mini-batch gradient descent on the joint objective.
pub fn train_reranker(
    samples: &[RerankSample],
    vocab: Vocabulary,
    cfg: &RerankTrainConfig,
) -> Result<RerankTraining> {
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let loss_cfg = LossConfig::new(cfg.lambda)?;
    let mut model = RerankerModel::init(vocab, cfg.token_dim, cfg.hidden, cfg.seed)?;
    let encoded: Vec<EncodedInput> = samples.iter().map(|s| s.encode(&model.vocab)).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7272_5f73_6875_6666);
    let batch_size = cfg.batch.max(1);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = (0.0, 0.0, 0.0);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&samples[i], &encoded[i])).collect();
            let (parts, grad) = batch_gradient(&model, &batch, &loss_cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "re-ranker loss diverged in epoch {epoch}"
                )));
            }
            let w = chunk.len() as f64;
            acc.0 += parts.ce * w;
            acc.1 += parts.rank * w;
            acc.2 += parts.total * w;
            model.params.add_scaled(&grad, -cfg.lr);
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "re-ranker parameters after epoch {epoch}"
            )));
        }
        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            ce: acc.0 / n,
            rank_loss: acc.1 / n,
            total: acc.2 / n,
        };
        debug!(?entry, "re-ranker epoch");
        log.push(entry);
    }
    Ok(RerankTraining { model, log })
}
