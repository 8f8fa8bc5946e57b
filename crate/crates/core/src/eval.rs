//! Filtered link-prediction metrics, merging of re-ranked candidates into the
//! first-stage ordering, and cluster-level ranks for open KGs.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{
    GenerationAdapter, ParseDiagnosis, ParseOutcome, constrained_greedy_decode, external_generate,
    parse_ranking, unconstrained_greedy_decode,
};
use crate::error::{Error, Result};
use crate::kg::{FilterIndex, GoldClusters, KgKind, KnowledgeGraph, Split};
use crate::kge::{KgeModel, Query, rank_order};
use crate::rerank::{EncodedInput, RerankerModel};
use crate::retriever::{TrainingTextIndex, candidate_supporting_prompt, query_related_prompt};
use crate::verbalizer::{
    OptionAlphabet, PromptBundle, QueryText, assemble_input, candidate_texts, join_options,
    make_query_sequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len();
        if n == 0 {
            return RankingMetrics {
                mr: 0.0,
                mrr: 0.0,
                hits1: 0.0,
                hits3: 0.0,
                hits10: 0.0,
                n_queries: 0,
            };
        }
        let nf = n as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / nf;
        RankingMetrics {
            mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / nf,
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / nf,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            n_queries: n,
        }
    }

    /// Fraction of ranks within `k`.
    pub fn hits_at(ranks: &[usize], k: usize) -> f64 {
        if ranks.is_empty() {
            return 0.0;
        }
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>9} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "run", "MR", "MRR", "H@1", "H@3", "H@10", "queries"
        )
    }

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<24} {:>9.2} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>9}",
            name, self.mr, self.mrr, self.hits1, self.hits3, self.hits10, self.n_queries
        )
    }
}

impl fmt::Display for RankingMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row("metrics"))
    }
}

/// Re-ranked candidates first (`permutation` holds 1-based positions into
/// `candidates`), then every other entity in first-stage order.
pub fn rerank_merge(
    first_stage: &[usize],
    candidates: &[usize],
    permutation: &[usize],
) -> Vec<usize> {
    let mut is_candidate = vec![false; first_stage.len()];
    for &c in candidates {
        is_candidate[c] = true;
    }
    permutation
        .iter()
        .map(|&p| candidates[p - 1])
        .chain(first_stage.iter().copied().filter(|&e| !is_candidate[e]))
        .collect()
}

/// Merge for an incomplete ranking: the distinct candidates that were produced
/// come first, then the non-candidates, then candidates the output omitted.
pub fn merge_partial(first_stage: &[usize], candidates: &[usize], ranked: &[usize]) -> Vec<usize> {
    let mut is_candidate = vec![false; first_stage.len()];
    for &c in candidates {
        is_candidate[c] = true;
    }
    let mut produced = vec![false; first_stage.len()];
    let mut out: Vec<usize> = Vec::with_capacity(first_stage.len());
    for &p in ranked {
        let e = candidates[p - 1];
        if !produced[e] {
            produced[e] = true;
            out.push(e);
        }
    }
    out.extend(first_stage.iter().copied().filter(|&e| !is_candidate[e]));
    out.extend(
        first_stage
            .iter()
            .copied()
            .filter(|&e| is_candidate[e] && !produced[e]),
    );
    out
}

/// 1-based rank of `gold` after removing the other known-true entities.
pub fn filtered_rank(ordering: &[usize], gold: usize, filter_set: &[usize]) -> Result<usize> {
    let mut rank = 1;
    for &e in ordering {
        if e == gold {
            return Ok(rank);
        }
        if !filter_set.contains(&e) {
            rank += 1;
        }
    }
    Err(Error::invalid(format!(
        "gold entity {gold} not in ordering"
    )))
}

/// Best filtered rank over the members of the gold entity's cluster.
pub fn cluster_rank(
    ordering: &[usize],
    gold: usize,
    clusters: &GoldClusters,
    filter_set: &[usize],
) -> Result<usize> {
    let cluster = clusters.cluster_of(gold);
    // One pass: filtered rank of the entity at position i is
    // i + 1 − (filtered entities before it, other than itself).
    let mut best = None;
    let mut removed = 0usize;
    for (i, &e) in ordering.iter().enumerate() {
        if clusters.cluster_of(e) == cluster {
            let r = i + 1 - removed;
            best = Some(best.map_or(r, |b: usize| b.min(r)));
        }
        if filter_set.contains(&e) {
            removed += 1;
        }
    }
    best.ok_or_else(|| Error::invalid(format!("no member of cluster {cluster} in ordering")))
}

/// Component switches for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// Candidates rendered as filled-in query sentences.
    pub qci: bool,
    /// Ranking loss on (λ as configured) vs off (λ = 0).
    pub cci: bool,
    /// Query-related retrieved prompt at inference.
    pub qp: bool,
    /// Candidate-supporting retrieved prompt at inference.
    pub cp: bool,
    /// Constrained option generation.
    pub cg: bool,
    /// Entity definitions appended to the query.
    pub dp: bool,
    #[serde(default)]
    pub gold_first: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        qci: true,
        cci: true,
        qp: true,
        cp: true,
        cg: true,
        dp: true,
        gold_first: false,
    };

    pub const ALL_OFF: Toggles = Toggles {
        qci: false,
        cci: false,
        qp: false,
        cp: false,
        cg: false,
        dp: false,
        gold_first: false,
    };

    /// Bitmap over `qci cci qp cp cg dp`, e.g. `"111010"`.
    pub fn key(&self) -> String {
        [self.qci, self.cci, self.qp, self.cp, self.cg, self.dp]
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

#[allow(clippy::derivable_impls)]
impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            dp: false,
            ..Toggles::ALL_ON
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub k_q: usize,
    pub k_c: usize,
    pub theta: f64,
    pub toggles: Toggles,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            k_q: 3,
            k_c: 3,
            theta: 0.8,
            toggles: Toggles::default(),
            split: Split::Test,
        }
    }
}

/// Text and features of one query's candidates, as seen by a re-ranker.
#[derive(Debug, Clone)]
pub struct RerankInput {
    pub query: Query,
    pub candidates: Vec<usize>,
    pub kge_scores: Vec<f64>,
    pub query_text: QueryText,
    pub candidate_texts: Vec<String>,
    /// Retrieved query-related prompt, when enabled.
    pub query_knowledge: Option<String>,
    /// Best candidate-support similarity per candidate; zeros when disabled.
    pub evidence: Vec<f64>,
    pub bundle: PromptBundle,
}

/// Anything that produces one first-slot logit per candidate.
pub trait CandidateScorer: Sync {
    fn logits(&self, input: &RerankInput) -> Result<Vec<f64>>;
}

impl CandidateScorer for RerankerModel {
    fn logits(&self, input: &RerankInput) -> Result<Vec<f64>> {
        let mut query = input.query_text.to_string();
        if let Some(k) = &input.query_knowledge {
            query.push(' ');
            query.push_str(k);
        }
        let encoded = EncodedInput {
            query: self.vocab.encode(&query),
            candidates: input
                .candidate_texts
                .iter()
                .map(|t| self.vocab.encode(t))
                .collect(),
            evidence: input.evidence.clone(),
        };
        Ok(RerankerModel::logits(self, &encoded))
    }
}

/// Uses the first-stage scores as logits; reproduces the first-stage ranking.
#[derive(Debug, Clone, Copy, Default)]
pub struct KgeIdentityScorer;

impl CandidateScorer for KgeIdentityScorer {
    fn logits(&self, input: &RerankInput) -> Result<Vec<f64>> {
        Ok(input.kge_scores.clone())
    }
}

#[derive(Clone, Copy)]
pub enum Reranker<'a> {
    /// First-stage ranking only.
    Base,
    Scorer(&'a dyn CandidateScorer),
    External(&'a dyn GenerationAdapter),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub query: Query,
    pub gold: usize,
    pub rank: usize,
    pub outcome: Option<ParseOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: RankingMetrics,
    /// Counts of decoded-output diagnoses, by outcome.
    pub outcomes: BTreeMap<String, usize>,
    pub ranks: Vec<QueryRank>,
}

pub struct Evaluator<'a> {
    pub kg: &'a KnowledgeGraph,
    pub filter: &'a FilterIndex,
    pub kge: &'a KgeModel,
    pub index: Option<&'a TrainingTextIndex>,
}

impl<'a> Evaluator<'a> {
    /// `(query, gold, known answers)` for both directions of every triple in `split`.
    pub fn queries(&self, split: Split) -> Vec<(Query, usize, &'a [usize])> {
        let filter = self.filter;
        self.kg
            .split(split)
            .iter()
            .flat_map(|t| {
                [
                    (
                        Query::tail(t.head, t.rel),
                        t.tail,
                        filter.tails_of(t.head, t.rel),
                    ),
                    (
                        Query::head(t.tail, t.rel),
                        t.head,
                        filter.heads_of(t.tail, t.rel),
                    ),
                ]
            })
            .collect()
    }

    pub fn rerank_input(
        &self,
        query: Query,
        ordering: &[usize],
        scores: &[f64],
        cfg: &EvalConfig,
    ) -> Result<RerankInput> {
        let t = cfg.toggles;
        let k = cfg.k.min(ordering.len());
        let candidates = ordering[..k].to_vec();
        let kge_scores: Vec<f64> = candidates.iter().map(|&e| scores[e]).collect();
        let query_text = make_query_sequence(self.kg, &query, t.dp)?;
        let labels: Vec<&str> = candidates
            .iter()
            .map(|&e| self.kg.entity_label(e))
            .collect();
        let texts = candidate_texts(&query_text, &labels, t.qci);

        let index = || {
            self.index.ok_or_else(|| {
                Error::invalid("retrieval prompts enabled but no training-text index given")
            })
        };
        let query_knowledge = if t.qp {
            Some(query_related_prompt(
                index()?,
                &query_text.to_string(),
                cfg.k_q,
            )?)
        } else {
            None
        };
        let (candidate_knowledge, evidence) = if t.cp {
            let triples: Vec<String> = labels.iter().map(|l| query_text.fill(l)).collect();
            let sup = candidate_supporting_prompt(index()?, &triples, cfg.k_c, cfg.theta)?;
            (Some(sup.prompt), sup.max_similarity)
        } else {
            (None, vec![0.0; k])
        };
        let knowledge = t.qp || t.cp;
        let bundle = PromptBundle {
            x_q: query_text.to_string(),
            x_c: join_options(&texts),
            x_k_q: knowledge.then(|| query_knowledge.clone().unwrap_or_default()),
            x_k_c: knowledge.then(|| candidate_knowledge.unwrap_or_default()),
        };
        Ok(RerankInput {
            query,
            candidates,
            kge_scores,
            query_text,
            candidate_texts: texts,
            query_knowledge,
            evidence,
            bundle,
        })
    }

    /// Final entity ordering for `query`, with the diagnosis of the re-ranker output.
    pub fn final_ordering(
        &self,
        query: Query,
        reranker: Reranker<'_>,
        cfg: &EvalConfig,
    ) -> Result<(Vec<usize>, Option<ParseDiagnosis>)> {
        let scores = self.kge.score_all(&query)?;
        let ordering = rank_order(&scores);
        if matches!(reranker, Reranker::Base) {
            return Ok((ordering, None));
        }
        let input = self.rerank_input(query, &ordering, &scores, cfg)?;
        let k = input.candidates.len();
        let alphabet = OptionAlphabet::new(k);
        let diagnosis = match reranker {
            Reranker::Base => unreachable!(),
            Reranker::Scorer(scorer) => {
                let z = scorer.logits(&input)?;
                let positions = if cfg.toggles.cg {
                    constrained_greedy_decode(|_| z.clone(), k)?
                } else {
                    unconstrained_greedy_decode(|_| z.clone(), k)?
                };
                let text: Vec<&str> = positions.iter().map(|&p| alphabet.symbol(p - 1)).collect();
                parse_ranking(&text.join(" "), &alphabet)
            }
            Reranker::External(adapter) => {
                let prompt = assemble_input(&input.bundle, input.bundle.x_k_q.is_some());
                external_generate(adapter, &prompt, &alphabet, cfg.toggles.cg)?
            }
        };
        let merged = match &diagnosis.permutation {
            Some(perm) => rerank_merge(&ordering, &input.candidates, perm),
            None => merge_partial(&ordering, &input.candidates, &diagnosis.ranked),
        };
        Ok((merged, Some(diagnosis)))
    }

    fn rank_of(&self, ordering: &[usize], gold: usize, known: &[usize]) -> Result<usize> {
        match (&self.kg.clusters, self.kg.kind) {
            (Some(clusters), KgKind::Open) => cluster_rank(ordering, gold, clusters, known),
            _ => filtered_rank(ordering, gold, known),
        }
    }

    pub fn evaluate(&self, reranker: Reranker<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
        if cfg.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        let queries = self.queries(cfg.split);
        let ranks = queries
            .par_iter()
            .map(|&(query, gold, known)| {
                let (ordering, diag) = self.final_ordering(query, reranker, cfg)?;
                Ok(QueryRank {
                    query,
                    gold,
                    rank: self.rank_of(&ordering, gold, known)?,
                    outcome: diag.map(|d| d.outcome),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outcomes = BTreeMap::new();
        for r in &ranks {
            if let Some(o) = r.outcome {
                let key = serde_json::to_value(o)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                *outcomes.entry(key).or_insert(0) += 1;
            }
        }
        let flat: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
        Ok(EvalReport {
            metrics: RankingMetrics::from_ranks(&flat),
            outcomes,
            ranks,
        })
    }
}
