//! Compact re-ranker: bag-of-tokens encoders for the query and each
//! candidate, a bilinear head producing one logit per option identifier.
//!
//! ```text
//! q   = tanh(Wq · mean(emb(query tokens))     + bq)
//! c_i = tanh(Wc · mean(emb(candidate_i tokens)) + bc)
//! z_i = qᵀ B c_i + u · c_i + w_e · evidence_i
//! ```
//!
//! The logits are the first-slot identifier scores; sequential emission over
//! them without repetition is a Plackett-Luce model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::kge::{Cursor, write_f64s};
use crate::text::tokenize;

pub const UNK: &str = "<unk>";

/// Token vocabulary; index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: vec![UNK.to_string()],
            index: HashMap::from([(UNK.to_string(), 0)]),
        };
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Every token of every label, template, and definition, in first-seen order.
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let mut texts: Vec<&str> = Vec::new();
        texts.extend(kg.entity_labels.iter().map(String::as_str));
        texts.extend(kg.relation_labels.iter().map(String::as_str));
        if let Some(t) = &kg.relation_templates {
            texts.extend(t.iter().flatten().map(String::as_str));
        }
        if let Some(d) = &kg.definitions {
            texts.extend(d.iter().flatten().map(String::as_str));
        }
        Vocabulary::new(texts.into_iter().flat_map(tokenize))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(0))
            .collect()
    }
}

/// Encoded model input for one query and its K candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub query: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    /// Per-candidate evidence feature; zeros when retrieval is disabled.
    pub evidence: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab: usize,
    pub token_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    pub token_emb: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
    pub bilinear: Vec<f64>,
    pub u: Vec<f64>,
    pub w_evidence: Vec<f64>,
}

impl RerankerParams {
    fn zeros(s: &ModelShape) -> Self {
        RerankerParams {
            token_emb: vec![0.0; s.vocab * s.token_dim],
            wq: vec![0.0; s.hidden * s.token_dim],
            bq: vec![0.0; s.hidden],
            wc: vec![0.0; s.hidden * s.token_dim],
            bc: vec![0.0; s.hidden],
            bilinear: vec![0.0; s.hidden * s.hidden],
            u: vec![0.0; s.hidden],
            w_evidence: vec![0.0; 1],
        }
    }

    pub fn blocks(&self) -> [&Vec<f64>; 8] {
        [
            &self.token_emb,
            &self.wq,
            &self.bq,
            &self.wc,
            &self.bc,
            &self.bilinear,
            &self.u,
            &self.w_evidence,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.token_emb,
            &mut self.wq,
            &mut self.bq,
            &mut self.wc,
            &mut self.bc,
            &mut self.bilinear,
            &mut self.u,
            &mut self.w_evidence,
        ]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &RerankerParams, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel {
    pub vocab: Vocabulary,
    pub shape: ModelShape,
    pub params: RerankerParams,
}

/// Activations kept for the backward pass.
struct Forward {
    mq: Vec<f64>,
    q: Vec<f64>,
    g: Vec<f64>,
    mc: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    z: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            bias[r]
                + w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

impl RerankerModel {
    pub fn init(vocab: Vocabulary, token_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if token_dim == 0 || hidden == 0 {
            return Err(Error::invalid("re-ranker dimensions must be positive"));
        }
        let shape = ModelShape {
            vocab: vocab.len(),
            token_dim,
            hidden,
        };
        let mut params = RerankerParams::zeros(&shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill =
            |xs: &mut [f64], a: f64| xs.iter_mut().for_each(|x| *x = rng.random_range(-a..=a));
        let enc = (6.0 / (token_dim + hidden) as f64).sqrt();
        let bil = (3.0 / hidden as f64).sqrt();
        fill(&mut params.token_emb, 1.0);
        fill(&mut params.wq, enc);
        fill(&mut params.wc, enc);
        fill(&mut params.bilinear, bil);
        // Evidence is zero during training, so its weight keeps this prior.
        params.w_evidence[0] = 1.0;
        Ok(RerankerModel {
            vocab,
            shape,
            params,
        })
    }

    fn mean_embedding(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.shape.token_dim;
        let mut m = vec![0.0; d];
        if tokens.is_empty() {
            return m;
        }
        for &t in tokens {
            for (a, b) in m.iter_mut().zip(&self.params.token_emb[t * d..(t + 1) * d]) {
                *a += b;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        m.iter_mut().for_each(|x| *x *= inv);
        m
    }

    fn run(&self, input: &EncodedInput) -> Forward {
        let ModelShape {
            token_dim: d,
            hidden: h,
            ..
        } = self.shape;
        let p = &self.params;
        let mq = self.mean_embedding(&input.query);
        let q: Vec<f64> = matvec(&p.wq, &mq, h, d, &p.bq)
            .into_iter()
            .map(f64::tanh)
            .collect();
        // g = Bᵀ q
        let mut g = vec![0.0; h];
        for (m, &qm) in q.iter().enumerate() {
            for (l, gl) in g.iter_mut().enumerate() {
                *gl += qm * p.bilinear[m * h + l];
            }
        }
        let mut mc = Vec::with_capacity(input.candidates.len());
        let mut c = Vec::with_capacity(input.candidates.len());
        let mut z = Vec::with_capacity(input.candidates.len());
        for (i, toks) in input.candidates.iter().enumerate() {
            let m = self.mean_embedding(toks);
            let ci: Vec<f64> = matvec(&p.wc, &m, h, d, &p.bc)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let ev = input.evidence.get(i).copied().unwrap_or(0.0);
            let zi = ci
                .iter()
                .zip(&g)
                .zip(&p.u)
                .map(|((c, g), u)| c * (g + u))
                .sum::<f64>()
                + p.w_evidence[0] * ev;
            mc.push(m);
            c.push(ci);
            z.push(zi);
        }
        Forward { mq, q, g, mc, c, z }
    }

    /// One logit per candidate, in candidate order.
    pub fn logits(&self, input: &EncodedInput) -> Vec<f64> {
        self.run(input).z
    }

    /// Runs the forward pass, asks `dz_of` for the gradient w.r.t. the logits and
    /// returns the parameter gradient.
    pub fn logits_and_backward(
        &self,
        input: &EncodedInput,
        dz_of: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<RerankerParams> {
        let fw = self.run(input);
        let dz = dz_of(&fw.z)?;
        Ok(self.backward(input, &fw, &dz))
    }

    fn backward(&self, input: &EncodedInput, fw: &Forward, dz: &[f64]) -> RerankerParams {
        let ModelShape {
            token_dim: d,
            hidden: h,
            ..
        } = self.shape;
        let p = &self.params;
        let mut grad = RerankerParams::zeros(&self.shape);
        let mut dg = vec![0.0; h];

        for (i, &dzi) in dz.iter().enumerate() {
            if dzi == 0.0 {
                continue;
            }
            let ci = &fw.c[i];
            let ev = input.evidence.get(i).copied().unwrap_or(0.0);
            grad.w_evidence[0] += dzi * ev;
            let mut dac = vec![0.0; h];
            for l in 0..h {
                dg[l] += dzi * ci[l];
                grad.u[l] += dzi * ci[l];
                dac[l] = dzi * (fw.g[l] + p.u[l]) * (1.0 - ci[l] * ci[l]);
            }
            accumulate_encoder(
                &mut grad.wc,
                &mut grad.bc,
                &mut grad.token_emb,
                &p.wc,
                &dac,
                &fw.mc[i],
                &input.candidates[i],
                d,
            );
        }

        // g = Bᵀ q
        let mut daq = vec![0.0; h];
        for m in 0..h {
            let mut dq = 0.0;
            for l in 0..h {
                grad.bilinear[m * h + l] += fw.q[m] * dg[l];
                dq += p.bilinear[m * h + l] * dg[l];
            }
            daq[m] = dq * (1.0 - fw.q[m] * fw.q[m]);
        }
        accumulate_encoder(
            &mut grad.wq,
            &mut grad.bq,
            &mut grad.token_emb,
            &p.wq,
            &daq,
            &fw.mq,
            &input.query,
            d,
        );
        grad
    }

    pub fn zero_grad(&self) -> RerankerParams {
        RerankerParams::zeros(&self.shape)
    }
}

/// Gradient of `a = W · mean(emb(tokens)) + b` given `da`.
#[allow(clippy::too_many_arguments)]
fn accumulate_encoder(
    gw: &mut [f64],
    gb: &mut [f64],
    gemb: &mut [f64],
    w: &[f64],
    da: &[f64],
    mean: &[f64],
    tokens: &[usize],
    d: usize,
) {
    let mut dmean = vec![0.0; d];
    for (r, &dar) in da.iter().enumerate() {
        if dar == 0.0 {
            continue;
        }
        gb[r] += dar;
        let row = &w[r * d..(r + 1) * d];
        let grow = &mut gw[r * d..(r + 1) * d];
        for k in 0..d {
            grow[k] += dar * mean[k];
            dmean[k] += dar * row[k];
        }
    }
    if tokens.is_empty() {
        return;
    }
    let inv = 1.0 / tokens.len() as f64;
    for &t in tokens {
        for (g, dm) in gemb[t * d..(t + 1) * d].iter_mut().zip(&dmean) {
            *g += dm * inv;
        }
    }
}

const RR_MAGIC: &[u8; 8] = b"KGRRRK\0\0";
const RR_VERSION: u32 = 1;

impl RerankerModel {
    /// Header (magic, version, vocab size, token dim, hidden), the vocabulary as
    /// length-prefixed UTF-8, then each parameter block as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RR_MAGIC);
        out.extend_from_slice(&RR_VERSION.to_le_bytes());
        for n in [self.shape.vocab, self.shape.token_dim, self.shape.hidden] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for t in self.vocab.tokens() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        for block in self.params.blocks() {
            write_f64s(&mut out, block);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        if c.take(8)? != RR_MAGIC {
            return Err(Error::Checkpoint("not a re-ranker checkpoint".into()));
        }
        let version = c.u32()?;
        if version != RR_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let shape = ModelShape {
            vocab: c.usize()?,
            token_dim: c.usize()?,
            hidden: c.usize()?,
        };
        let mut tokens = Vec::with_capacity(shape.vocab);
        for _ in 0..shape.vocab {
            let n = c.u32()? as usize;
            let s = std::str::from_utf8(c.take(n)?)
                .map_err(|_| Error::Checkpoint("vocabulary is not UTF-8".into()))?;
            tokens.push(s.to_string());
        }
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint(
                "vocabulary must start with the unknown token".into(),
            ));
        }
        let vocab = Vocabulary::new(tokens.into_iter().skip(1));
        if vocab.len() != shape.vocab {
            return Err(Error::Checkpoint("duplicate vocabulary entries".into()));
        }
        let mut params = RerankerParams::zeros(&shape);
        for block in params.blocks_mut() {
            let n = block.len();
            *block = c.f64s(n)?;
        }
        c.finish()?;
        Ok(RerankerModel {
            vocab,
            shape,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> RerankerModel {
        let vocab = Vocabulary::new(["jackie", "chan", "ip", "man", "police", "story"]);
        RerankerModel::init(vocab, 4, 3, 5).unwrap()
    }

    fn input(m: &RerankerModel) -> EncodedInput {
        EncodedInput {
            query: m.vocab.encode("Jackie Chan ____"),
            candidates: vec![
                m.vocab.encode("Ip Man"),
                m.vocab.encode("Police Story"),
                m.vocab.encode("unknown words"),
            ],
            evidence: vec![0.2, 0.0, 0.9],
        }
    }

    #[test]
    fn vocabulary_encoding() {
        let v = Vocabulary::new(["a", "b", "a"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.encode("A b zzz"), vec![1, 2, 0]);
    }

    #[test]
    fn one_logit_per_candidate() {
        let m = model();
        assert_eq!(m.logits(&input(&m)).len(), 3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = model();
        let x = input(&m);
        let w = [0.3, -1.1, 0.7];
        let f =
            |m: &RerankerModel| -> f64 { m.logits(&x).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let grad = m.logits_and_backward(&x, |_| Ok(w.to_vec())).unwrap();
        let eps = 1e-6;
        for (b, gblock) in grad.blocks().iter().enumerate() {
            for i in 0..gblock.len() {
                let mut plus = m.clone();
                plus.params.blocks_mut()[b][i] += eps;
                let mut minus = m.clone();
                minus.params.blocks_mut()[b][i] -= eps;
                let num = (f(&plus) - f(&minus)) / (2.0 * eps);
                assert!(
                    (num - gblock[i]).abs() < 1e-7,
                    "block {b} idx {i}: {num} vs {}",
                    gblock[i]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let bytes = m.to_bytes();
        let back = RerankerModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(RerankerModel::from_bytes(&bytes[..20]).is_err());
    }
}
