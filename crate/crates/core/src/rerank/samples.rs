use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::kge::{Direction, KgeModel, Query};
use crate::verbalizer::{
    PromptBundle, QueryText, candidate_texts, check_permutation, join_options, make_query_sequence,
};

use super::model::{EncodedInput, Vocabulary};

/// One re-ranking training example: shuffled top-K candidates and the target
/// identifier order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankSample {
    pub query_id: u64,
    pub query: Query,
    pub gold: usize,
    /// Candidate entities in presentation (shuffled) order.
    pub candidates: Vec<usize>,
    /// First-stage scores aligned with `candidates`.
    pub kge_scores: Vec<f64>,
    /// 1-based candidate positions in target rank order.
    pub target: Vec<usize>,
    pub query_text: QueryText,
    pub candidate_texts: Vec<String>,
    pub bundle: PromptBundle,
}

impl RerankSample {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn gold_position(&self) -> Option<usize> {
        self.candidates.iter().position(|&e| e == self.gold)
    }

    pub fn encode(&self, vocab: &Vocabulary) -> EncodedInput {
        EncodedInput {
            query: vocab.encode(&self.query_text.to_string()),
            candidates: self
                .candidate_texts
                .iter()
                .map(|t| vocab.encode(t))
                .collect(),
            evidence: vec![0.0; self.k()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub k: usize,
    pub seed: u64,
    pub qci: bool,
    pub dp: bool,
    /// Promote the gold entity to rank 1 in the target when it is a candidate.
    pub gold_first: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<RerankSample>,
    /// Samples whose gold entity is not among the candidates.
    pub gold_missing: usize,
}

/// Shuffle seed for one query, independent of the order queries are visited.
pub(crate) fn query_seed(seed: u64, query: &Query) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write_u64(query.entity as u64);
    h.write_u64(query.rel as u64);
    h.write_u8(matches!(query.direction, Direction::Head) as u8);
    h.finish()
}

/// Target order over shuffled candidates: descending first-stage score, ties by
/// ascending entity index. Returns 1-based positions.
pub fn target_order(candidates: &[usize], scores: &[f64], gold: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    if let Some(g) = gold.and_then(|g| candidates.iter().position(|&e| e == g)) {
        let at = order.iter().position(|&p| p == g).unwrap();
        let p = order.remove(at);
        order.insert(0, p);
    }
    order.into_iter().map(|p| p + 1).collect()
}

fn make_sample(
    kg: &KnowledgeGraph,
    kge: &KgeModel,
    query: Query,
    gold: usize,
    query_id: u64,
    cfg: &SampleConfig,
) -> Result<RerankSample> {
    let top = kge.topk_candidates(&query, cfg.k, true)?;
    let mut order: Vec<usize> = (0..top.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(cfg.seed, &query));
    order.shuffle(&mut rng);
    let candidates: Vec<usize> = order.iter().map(|&i| top.entities[i]).collect();
    let kge_scores: Vec<f64> = order.iter().map(|&i| top.scores[i]).collect();
    let target = target_order(&candidates, &kge_scores, cfg.gold_first.then_some(gold));
    debug_assert!(check_permutation(&target).is_ok());

    let query_text = make_query_sequence(kg, &query, cfg.dp)?;
    let labels: Vec<&str> = candidates.iter().map(|&e| kg.entity_label(e)).collect();
    let texts = candidate_texts(&query_text, &labels, cfg.qci);
    let bundle = PromptBundle {
        x_q: query_text.to_string(),
        x_c: join_options(&texts),
        x_k_q: None,
        x_k_c: None,
    };
    Ok(RerankSample {
        query_id,
        query,
        gold,
        candidates,
        kge_scores,
        target,
        query_text,
        candidate_texts: texts,
        bundle,
    })
}

/// Two samples per training triple: the tail query and the head query.
pub fn build_training_samples(
    kg: &KnowledgeGraph,
    kge: &KgeModel,
    cfg: &SampleConfig,
) -> Result<SampleSet> {
    let samples = kg
        .train
        .par_iter()
        .enumerate()
        .map(|(i, t)| -> Result<[RerankSample; 2]> {
            let id = 2 * i as u64;
            Ok([
                make_sample(kg, kge, Query::tail(t.head, t.rel), t.tail, id, cfg)?,
                make_sample(kg, kge, Query::head(t.tail, t.rel), t.head, id + 1, cfg)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let gold_missing = samples
        .iter()
        .filter(|s| s.gold_position().is_none())
        .count();
    if !samples.is_empty() {
        info!(
            samples = samples.len(),
            gold_missing_fraction = gold_missing as f64 / samples.len() as f64,
            "built re-ranking samples"
        );
    }
    Ok(SampleSet {
        samples,
        gold_missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_sorts_by_score() {
        // candidates scored [9, 5, 7] shuffled to positions [2nd, 3rd, 1st]:
        // presentation order is (7, 9, 5)
        let cands = [30, 10, 20];
        let scores = [7.0, 9.0, 5.0];
        assert_eq!(target_order(&cands, &scores, None), vec![2, 1, 3]);
        assert_eq!(target_order(&cands, &scores, Some(20)), vec![3, 2, 1]);
        // gold absent: unchanged
        assert_eq!(target_order(&cands, &scores, Some(99)), vec![2, 1, 3]);
        assert_eq!(target_order(&[4], &[0.0], None), vec![1]);
    }

    #[test]
    fn score_ties_break_by_entity() {
        assert_eq!(
            target_order(&[8, 3, 5], &[1.0, 1.0, 2.0], None),
            vec![3, 2, 1]
        );
    }

    #[test]
    fn query_seed_depends_on_query_not_order() {
        let a = query_seed(7, &Query::tail(1, 2));
        assert_eq!(a, query_seed(7, &Query::tail(1, 2)));
        assert_ne!(a, query_seed(7, &Query::head(1, 2)));
        assert_ne!(a, query_seed(8, &Query::tail(1, 2)));
    }
}
