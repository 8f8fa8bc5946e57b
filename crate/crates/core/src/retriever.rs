//! Nearest-neighbour retrieval over training-triple sequences, used to build
//! the query-related and candidate-supporting prompts.

use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::kge::top_k_indices;
use crate::text::tokenize;
use crate::verbalizer::{option_identifier, triple_sequence};

/// Maps text to a unit-norm vector of fixed width (zero for empty text).
pub trait TextEmbedder: Send + Sync {
    fn width(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    // rows are unit-norm or zero
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Feature-hashed unigrams and bigrams of [`tokenize`]d text.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    buckets: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_BUCKETS: usize = 512;

    pub fn new(buckets: usize) -> Self {
        assert!(buckets > 0, "bucket count must be positive");
        HashingEmbedder { buckets }
    }

    fn bucket(&self, feature: &[&str]) -> usize {
        let mut h = FnvHasher::default();
        for (i, part) in feature.iter().enumerate() {
            if i > 0 {
                h.write_u8(0x1f);
            }
            h.write(part.as_bytes());
        }
        h.write_u8(feature.len() as u8);
        (h.finish() % self.buckets as u64) as usize
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(Self::DEFAULT_BUCKETS)
    }
}

impl TextEmbedder for HashingEmbedder {
    fn width(&self) -> usize {
        self.buckets
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.buckets];
        for t in &tokens {
            v[self.bucket(&[t])] += 1.0;
        }
        for pair in tokens.windows(2) {
            v[self.bucket(&[&pair[0], &pair[1]])] += 1.0;
        }
        Ok(normalize(v))
    }
}

/// External embedder speaking a line protocol over a child process: one text
/// line in, one line of whitespace-separated floats out.
pub struct ProcessEmbedder {
    io: Mutex<(ChildStdin, BufReader<ChildStdout>)>,
    child: Mutex<Child>,
    width: usize,
}

impl ProcessEmbedder {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Adapter(format!("spawn {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut emb = ProcessEmbedder {
            io: Mutex::new((stdin, stdout)),
            child: Mutex::new(child),
            width: 0,
        };
        emb.width = emb.request("width probe")?.len();
        if emb.width == 0 {
            return Err(Error::Adapter("embedder returned an empty vector".into()));
        }
        Ok(emb)
    }

    fn request(&self, text: &str) -> Result<Vec<f64>> {
        let mut guard = self.io.lock().expect("embedder lock poisoned");
        let (stdin, stdout) = &mut *guard;
        let line = text.replace(['\n', '\r'], " ");
        writeln!(stdin, "{line}")
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Adapter(format!("write to embedder: {e}")))?;
        let mut reply = String::new();
        let n = stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Adapter(format!("read from embedder: {e}")))?;
        if n == 0 {
            return Err(Error::Adapter("embedder closed its output".into()));
        }
        reply
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Adapter(format!("bad float {f:?} from embedder")))
            })
            .collect()
    }
}

impl TextEmbedder for ProcessEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if tokenize(text).is_empty() {
            return Ok(vec![0.0; self.width]);
        }
        let v = self.request(text)?;
        if v.len() != self.width {
            return Err(Error::Adapter(format!(
                "embedder returned width {}, expected {}",
                v.len(),
                self.width
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("external embedding".into()));
        }
        Ok(normalize(v))
    }
}

impl Drop for ProcessEmbedder {
    fn drop(&mut self) {
        if let Ok(mut c) = self.child.lock() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub row: usize,
    pub sequence: String,
    pub similarity: f64,
}

/// Embedded training-triple sequences, one row per training triple in file order.
pub struct TrainingTextIndex {
    embedder: Arc<dyn TextEmbedder>,
    sequences: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl TrainingTextIndex {
    pub fn from_sequences(embedder: Arc<dyn TextEmbedder>, sequences: Vec<String>) -> Result<Self> {
        let embeddings = sequences
            .par_iter()
            .map(|s| embedder.embed(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingTextIndex {
            embedder,
            sequences,
            embeddings,
        })
    }

    pub fn build(kg: &KnowledgeGraph, embedder: Arc<dyn TextEmbedder>) -> Result<Self> {
        let sequences = kg
            .train
            .iter()
            .map(|t| triple_sequence(kg, t.head, t.rel, t.tail))
            .collect::<Result<Vec<_>>>()?;
        Self::from_sequences(embedder, sequences)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[String] {
        &self.sequences
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    pub fn embedder(&self) -> &dyn TextEmbedder {
        self.embedder.as_ref()
    }

    /// Top-`k` rows by cosine similarity (ties by row), dropping any below `theta`.
    pub fn retrieve(
        &self,
        query_text: &str,
        k: usize,
        theta: Option<f64>,
    ) -> Result<Vec<Retrieved>> {
        if k == 0 {
            return Err(Error::invalid("retrieval k must be at least 1"));
        }
        if let Some(t) = theta
            && !(0.0..=1.0).contains(&t)
        {
            return Err(Error::invalid(format!("theta {t} outside [0, 1]")));
        }
        let q = self.embedder.embed(query_text)?;
        let sims: Vec<f64> = self.embeddings.iter().map(|row| cosine(&q, row)).collect();
        Ok(top_k_indices(&sims, k)
            .into_iter()
            .filter(|&i| theta.is_none_or(|t| sims[i] >= t))
            .map(|i| Retrieved {
                row: i,
                sequence: self.sequences[i].clone(),
                similarity: sims[i],
            })
            .collect())
    }
}

pub fn build_index(
    kg: &KnowledgeGraph,
    embedder: Arc<dyn TextEmbedder>,
) -> Result<TrainingTextIndex> {
    TrainingTextIndex::build(kg, embedder)
}

fn join_sequences(hits: &[Retrieved]) -> String {
    hits.iter()
        .map(|h| h.sequence.as_str())
        .collect::<Vec<_>>()
        .join(". ")
}

/// Top-`k_q` training sequences for the query, joined by `". "`.
pub fn query_related_prompt(index: &TrainingTextIndex, x_q: &str, k_q: usize) -> Result<String> {
    if index.is_empty() {
        return Ok(String::new());
    }
    Ok(join_sequences(&index.retrieve(x_q, k_q, None)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSupport {
    /// Blocks `"<id>: seq. seq"` for candidates with support, space-joined.
    pub prompt: String,
    /// Best similarity that passed the threshold per candidate, 0 if none.
    pub max_similarity: Vec<f64>,
}

pub fn candidate_supporting_prompt(
    index: &TrainingTextIndex,
    candidate_sequences: &[String],
    k_c: usize,
    theta: f64,
) -> Result<CandidateSupport> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid(format!("theta {theta} outside [0, 1]")));
    }
    let mut blocks = Vec::new();
    let mut max_similarity = Vec::with_capacity(candidate_sequences.len());
    for (i, seq) in candidate_sequences.iter().enumerate() {
        let hits = if index.is_empty() {
            Vec::new()
        } else {
            index.retrieve(seq, k_c, Some(theta))?
        };
        max_similarity.push(hits.first().map_or(0.0, |h| h.similarity));
        if !hits.is_empty() {
            blocks.push(format!(
                "{}: {}",
                option_identifier(i),
                join_sequences(&hits)
            ));
        }
    }
    Ok(CandidateSupport {
        prompt: blocks.join(" "),
        max_similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(seqs: &[&str]) -> TrainingTextIndex {
        TrainingTextIndex::from_sequences(
            Arc::new(HashingEmbedder::default()),
            seqs.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_stable() {
        let e = HashingEmbedder::default();
        let a = e.embed("Jackie Chan played in movie Ip Man?").unwrap();
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(a, e.embed("Jackie Chan played in movie Ip Man?").unwrap());
        assert!(e.embed("?!").unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cardinality_and_duplicates() {
        let idx = index(&["a b c", "a b c", "d e"]);
        assert_eq!(idx.len(), 3);
        for i in 0..idx.len() {
            assert!((cosine(idx.row(i), idx.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn self_match_comes_first() {
        let idx = index(&[
            "x y z",
            "jackie chan born in hong kong",
            "ip man is a movie",
        ]);
        let hits = idx
            .retrieve("jackie chan born in hong kong", 2, None)
            .unwrap();
        assert_eq!(hits[0].row, 1);
        assert!((hits[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn theta_domain_and_filter() {
        let idx = index(&["a b", "c d"]);
        assert!(idx.retrieve("a", 1, Some(1.0 + 1e-9)).is_err());
        assert!(idx.retrieve("a", 0, None).is_err());
        assert!(idx.retrieve("zzz", 2, Some(0.5)).unwrap().is_empty());
        assert_eq!(idx.retrieve("q", 2, Some(0.0)).unwrap().len(), 2);
    }

    #[test]
    fn prompts() {
        let idx = index(&[
            "jackie chan born in hong kong",
            "ip man directed by wilson yip",
        ]);
        assert_eq!(
            query_related_prompt(&idx, "jackie chan born in ____", 1).unwrap(),
            "jackie chan born in hong kong"
        );
        let empty = index(&[]);
        assert_eq!(query_related_prompt(&empty, "anything", 3).unwrap(), "");

        let cands = vec![
            "qqq".to_string(),
            "ip man directed by wilson yip".to_string(),
        ];
        let sup = candidate_supporting_prompt(&idx, &cands, 3, 0.8).unwrap();
        assert_eq!(sup.prompt, "B: ip man directed by wilson yip");
        assert_eq!(sup.max_similarity[0], 0.0);
        assert!((sup.max_similarity[1] - 1.0).abs() < 1e-12);

        let none = candidate_supporting_prompt(&idx, &["qqq".to_string()], 3, 0.8).unwrap();
        assert!(none.prompt.is_empty());
    }
}
