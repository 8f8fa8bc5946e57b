//! First-stage bilinear (Tucker-style) embedding model.
//!
//! A triple is scored as the full contraction of a `d × d × d` core tensor
//! with the head, relation and tail embeddings:
//!
//! ```text
//! score(h, r, t) = Σ_ijk W[i][j][k] · h_i · r_j · t_k
//! ```
//!
//! Tail queries `(h, r, ?)` contract the first two modes and take a dot product
//! with every entity; head queries `(?, r, t)` contract the last two. Training
//! uses 1-N scoring: binary cross-entropy against every entity at once, for
//! both query directions of each training triple.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(entity, rel, ?)`
    Tail,
    /// `(?, rel, entity)`
    Head,
}

/// A link-prediction query. `entity` is the known side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub entity: usize,
    pub rel: usize,
    pub direction: Direction,
}

impl Query {
    pub fn tail(head: usize, rel: usize) -> Self {
        Query {
            entity: head,
            rel,
            direction: Direction::Tail,
        }
    }

    pub fn head(tail: usize, rel: usize) -> Self {
        Query {
            entity: tail,
            rel,
            direction: Direction::Head,
        }
    }
}

/// Top-K first-stage candidates with their raw scores, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query: Query,
    pub entities: Vec<usize>,
    pub scores: Vec<f64>,
}

impl CandidateList {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    dim: usize,
    entity_count: usize,
    relation_count: usize,
    /// Row-major `entity_count × dim`.
    pub entity_emb: Vec<f64>,
    /// Row-major `relation_count × dim`.
    pub relation_emb: Vec<f64>,
    /// `core[(i * dim + j) * dim + k]` multiplies head_i, rel_j, tail_k.
    pub core: Vec<f64>,
}

impl KgeModel {
    /// Seeded initialization, every parameter uniform in `[-0.1, 0.1]`.
    pub fn init(entity_count: usize, relation_count: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect() };
        let entity_emb = draw(entity_count * dim);
        let relation_emb = draw(relation_count * dim);
        let core = draw(dim * dim * dim);
        Ok(KgeModel {
            dim,
            entity_count,
            relation_count,
            entity_emb,
            relation_emb,
            core,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn entity(&self, e: usize) -> &[f64] {
        &self.entity_emb[e * self.dim..(e + 1) * self.dim]
    }

    pub fn relation(&self, r: usize) -> &[f64] {
        &self.relation_emb[r * self.dim..(r + 1) * self.dim]
    }

    fn check_query(&self, q: &Query) -> Result<()> {
        if q.entity >= self.entity_count {
            return Err(Error::IndexOutOfRange {
                what: "entity",
                index: q.entity,
                bound: self.entity_count,
            });
        }
        if q.rel >= self.relation_count {
            return Err(Error::IndexOutOfRange {
                what: "relation",
                index: q.rel,
                bound: self.relation_count,
            });
        }
        Ok(())
    }

    /// The query vector whose dot product with an entity embedding gives its score.
    fn query_vector(&self, q: &Query) -> Vec<f64> {
        let d = self.dim;
        let known = self.entity(q.entity);
        let rel = self.relation(q.rel);
        let mut out = vec![0.0; d];
        match q.direction {
            Direction::Tail => {
                // out_k = Σ_ij W_ijk h_i r_j
                for (i, &h) in known.iter().enumerate() {
                    for (j, &r) in rel.iter().enumerate() {
                        let w = h * r;
                        let row = &self.core[(i * d + j) * d..(i * d + j + 1) * d];
                        for (o, &c) in out.iter_mut().zip(row) {
                            *o += w * c;
                        }
                    }
                }
            }
            Direction::Head => {
                // out_i = Σ_jk W_ijk r_j t_k
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &r) in rel.iter().enumerate() {
                        let row = &self.core[(i * d + j) * d..(i * d + j + 1) * d];
                        acc += r * dot(row, known);
                    }
                    *o = acc;
                }
            }
        }
        out
    }

    /// Raw score of every entity as the answer to `q`.
    pub fn score_all(&self, q: &Query) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let v = self.query_vector(q);
        Ok((0..self.entity_count)
            .map(|e| dot(self.entity(e), &v))
            .collect())
    }

    pub fn topk_candidates(&self, q: &Query, k: usize, clamp: bool) -> Result<CandidateList> {
        let scores = self.score_all(q)?;
        let k = resolve_k(k, scores.len(), clamp)?;
        let entities = top_k_indices(&scores, k);
        let scores = entities.iter().map(|&e| scores[e]).collect();
        Ok(CandidateList {
            query: *q,
            entities,
            scores,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.entity_emb
            .iter()
            .chain(&self.relation_emb)
            .chain(&self.core)
            .all(|x| x.is_finite())
    }
}

pub fn score_all(model: &KgeModel, q: &Query) -> Result<Vec<f64>> {
    model.score_all(q)
}

pub fn topk_candidates(
    model: &KgeModel,
    q: &Query,
    k: usize,
    clamp: bool,
) -> Result<CandidateList> {
    model.topk_candidates(q, k, clamp)
}

fn resolve_k(k: usize, n: usize, clamp: bool) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k > n {
        if clamp {
            return Ok(n);
        }
        return Err(Error::invalid(format!("K = {k} exceeds entity count {n}")));
    }
    Ok(k)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orders indices by descending score, ties by ascending index.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// First `k` entries of [`rank_order`], without sorting the whole list.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgeTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for KgeTrainConfig {
    fn default() -> Self {
        KgeTrainConfig {
            dim: 256,
            epochs: 100,
            lr: 0.005,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// One 1-N training query with its known answers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainQuery {
    pub query: Query,
    pub answers: Vec<usize>,
}

/// Groups training triples into tail and head queries, in a deterministic order.
pub fn training_queries(kg: &KnowledgeGraph) -> Vec<TrainQuery> {
    let mut grouped: BTreeMap<Query, Vec<usize>> = BTreeMap::new();
    for t in &kg.train {
        grouped
            .entry(Query::tail(t.head, t.rel))
            .or_default()
            .push(t.tail);
        grouped
            .entry(Query::head(t.tail, t.rel))
            .or_default()
            .push(t.head);
    }
    grouped
        .into_iter()
        .map(|(query, mut answers)| {
            answers.sort_unstable();
            answers.dedup();
            TrainQuery { query, answers }
        })
        .collect()
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeGrad {
    pub entity_emb: Vec<f64>,
    pub relation_emb: Vec<f64>,
    pub core: Vec<f64>,
}

impl KgeGrad {
    fn zeros_like(m: &KgeModel) -> Self {
        KgeGrad {
            entity_emb: vec![0.0; m.entity_emb.len()],
            relation_emb: vec![0.0; m.relation_emb.len()],
            core: vec![0.0; m.core.len()],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-[y ln σ(s) + (1-y) ln(1-σ(s))]`.
fn bce_with_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

impl KgeModel {
    /// Mean (over queries) of the per-entity mean BCE, with its gradient.
    pub fn batch_loss_grad(&self, batch: &[TrainQuery]) -> (f64, KgeGrad) {
        let d = self.dim;
        let n = self.entity_count;
        let mut grad = KgeGrad::zeros_like(self);
        let mut total = 0.0;
        let scale = 1.0 / (batch.len().max(1) as f64 * n as f64);
        let mut targets = vec![0.0; n];

        for tq in batch {
            let q = &tq.query;
            let v = self.query_vector(q);
            for &a in &tq.answers {
                targets[a] = 1.0;
            }
            let mut dv = vec![0.0; d];
            for e in 0..n {
                let emb = self.entity(e);
                let s = dot(emb, &v);
                total += bce_with_logit(s, targets[e]) * scale;
                let gs = (sigmoid(s) - targets[e]) * scale;
                let ge = &mut grad.entity_emb[e * d..(e + 1) * d];
                for k in 0..d {
                    ge[k] += gs * v[k];
                    dv[k] += gs * emb[k];
                }
            }
            for &a in &tq.answers {
                targets[a] = 0.0;
            }

            let known = q.entity;
            let rel = q.rel;
            let kv = self.entity(known).to_vec();
            let rv = self.relation(rel).to_vec();
            let mut dk = vec![0.0; d];
            let mut dr = vec![0.0; d];
            match q.direction {
                Direction::Tail => {
                    // v_k = Σ_ij W_ijk h_i r_j
                    for i in 0..d {
                        for j in 0..d {
                            let base = (i * d + j) * d;
                            let row = &self.core[base..base + d];
                            let hr = kv[i] * rv[j];
                            let w_dv = dot(row, &dv);
                            dk[i] += rv[j] * w_dv;
                            dr[j] += kv[i] * w_dv;
                            let gc = &mut grad.core[base..base + d];
                            for k in 0..d {
                                gc[k] += hr * dv[k];
                            }
                        }
                    }
                }
                Direction::Head => {
                    // v_i = Σ_jk W_ijk r_j t_k
                    for i in 0..d {
                        for j in 0..d {
                            let base = (i * d + j) * d;
                            let row = &self.core[base..base + d];
                            let w_t = dot(row, &kv);
                            dr[j] += dv[i] * w_t;
                            let c = dv[i] * rv[j];
                            let gc = &mut grad.core[base..base + d];
                            for k in 0..d {
                                dk[k] += c * row[k];
                                gc[k] += c * kv[k];
                            }
                        }
                    }
                }
            }
            for k in 0..d {
                grad.entity_emb[known * d + k] += dk[k];
                grad.relation_emb[rel * d + k] += dr[k];
            }
        }
        (total, grad)
    }

    /// Mean BCE over a set of queries, without gradients.
    pub fn loss(&self, queries: &[TrainQuery]) -> f64 {
        let n = self.entity_count;
        let mut total = 0.0;
        for tq in queries {
            let v = self.query_vector(&tq.query);
            let mut ans = tq.answers.iter().peekable();
            for e in 0..n {
                let y = if ans.peek() == Some(&&e) {
                    ans.next();
                    1.0
                } else {
                    0.0
                };
                total += bce_with_logit(dot(self.entity(e), &v), y);
            }
        }
        total / (queries.len().max(1) as f64 * n as f64)
    }
}

/// Adam state over one flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct KgeTraining {
    pub model: KgeModel,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_kge(kg: &KnowledgeGraph, cfg: &KgeTrainConfig) -> Result<KgeTraining> {
    if cfg.dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    if kg.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut model = KgeModel::init(kg.entity_count(), kg.relation_count(), cfg.dim, cfg.seed)?;
    let mut queries = training_queries(kg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b67_655f_7368_7566);
    let mut opt_e = Adam::new(model.entity_emb.len());
    let mut opt_r = Adam::new(model.relation_emb.len());
    let mut opt_c = Adam::new(model.core.len());
    let batch_size = cfg.batch_size.max(1);
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        queries.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in queries.chunks(batch_size) {
            let (loss, grad) = model.batch_loss_grad(batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "KGE loss diverged at epoch {epoch}, step {step}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            opt_e.step(&mut model.entity_emb, &grad.entity_emb, cfg.lr, step);
            opt_r.step(&mut model.relation_emb, &grad.relation_emb, cfg.lr, step);
            opt_c.step(&mut model.core, &grad.core, cfg.lr, step);
        }
        let mean = epoch_loss / queries.len() as f64;
        debug!(epoch, loss = mean, "kge epoch");
        epoch_losses.push(mean);
    }
    if !model.all_finite() {
        return Err(Error::NonFinite("KGE parameters after training".into()));
    }
    Ok(KgeTraining {
        model,
        epoch_losses,
    })
}

const KGE_MAGIC: &[u8; 8] = b"KGRKGE\0\0";
const KGE_VERSION: u32 = 1;

pub(crate) fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Sequential little-endian reader over a checkpoint buffer.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl KgeModel {
    /// Header (magic, version, d, entity count, relation count) then the
    /// entity, relation and core blocks as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            36 + 8 * (self.entity_emb.len() + self.relation_emb.len() + self.core.len()),
        );
        out.extend_from_slice(KGE_MAGIC);
        out.extend_from_slice(&KGE_VERSION.to_le_bytes());
        for n in [self.dim, self.entity_count, self.relation_count] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        write_f64s(&mut out, &self.entity_emb);
        write_f64s(&mut out, &self.relation_emb);
        write_f64s(&mut out, &self.core);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        if c.take(8)? != KGE_MAGIC {
            return Err(Error::Checkpoint("not a KGE checkpoint".into()));
        }
        let version = c.u32()?;
        if version != KGE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dim = c.usize()?;
        let entity_count = c.usize()?;
        let relation_count = c.usize()?;
        if dim == 0 {
            return Err(Error::Checkpoint("zero dimension".into()));
        }
        let entity_emb = c.f64s(entity_count * dim)?;
        let relation_emb = c.f64s(relation_count * dim)?;
        let core = c.f64s(dim * dim * dim)?;
        c.finish()?;
        Ok(KgeModel {
            dim,
            entity_count,
            relation_count,
            entity_emb,
            relation_emb,
            core,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
