//! Permutation decoding over option identifiers, and diagnosis of free-text
//! rankings returned by external generators.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::verbalizer::OptionAlphabet;

/// Identifiers emitted so far and those still available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    remaining: Vec<bool>,
    emitted: Vec<usize>,
}

impl DecodeState {
    pub fn new(k: usize) -> Self {
        DecodeState {
            remaining: vec![true; k],
            emitted: Vec::with_capacity(k),
        }
    }

    /// 0-based positions emitted, in order.
    pub fn emitted(&self) -> &[usize] {
        &self.emitted
    }

    pub fn is_remaining(&self, position: usize) -> bool {
        self.remaining[position]
    }

    pub fn step(&self) -> usize {
        self.emitted.len()
    }

    fn emit(&mut self, position: usize) {
        self.remaining[position] = false;
        self.emitted.push(position);
    }
}

fn checked_logits(logits: Vec<f64>, k: usize) -> Result<Vec<f64>> {
    if logits.len() != k {
        return Err(Error::invalid(format!(
            "logit provider returned {} values for {k} identifiers",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "identifier logit {i} = {}",
            logits[i]
        )));
    }
    Ok(logits)
}

/// Greedy decoding where each slot may only emit an identifier not yet used.
/// Returns 1-based positions in emission order; always a permutation.
pub fn constrained_greedy_decode<F>(mut logit_provider: F, k: usize) -> Result<Vec<usize>>
where
    F: FnMut(&DecodeState) -> Vec<f64>,
{
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut state = DecodeState::new(k);
    for _ in 0..k {
        let logits = checked_logits(logit_provider(&state), k)?;
        let mut best: Option<usize> = None;
        for (i, &z) in logits.iter().enumerate() {
            if state.remaining[i] && best.is_none_or(|b| z > logits[b]) {
                best = Some(i);
            }
        }
        state.emit(best.expect("at least one identifier remains"));
    }
    Ok(state.emitted.iter().map(|p| p + 1).collect())
}

/// Greedy decoding with no constraint: each of the K slots takes the overall
/// argmax, so identifiers may repeat. Returns 1-based positions.
pub fn unconstrained_greedy_decode<F>(mut logit_provider: F, k: usize) -> Result<Vec<usize>>
where
    F: FnMut(&DecodeState) -> Vec<f64>,
{
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut state = DecodeState::new(k);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let logits = checked_logits(logit_provider(&state), k)?;
        let best = (0..k).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        out.push(best + 1);
        state.emitted.push(best);
        state.remaining[best] = false;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseOutcome {
    Ok,
    /// Output names something that is not an option identifier.
    Mismatch,
    /// Some identifiers never appear.
    Omission,
    /// Some identifier appears more than once.
    Duplication,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnosis {
    pub outcome: ParseOutcome,
    /// Full 1-based permutation, present iff `outcome` is `Ok`.
    pub permutation: Option<Vec<usize>>,
    /// Distinct identifiers recognised, as 1-based positions in first-seen order.
    pub ranked: Vec<usize>,
    pub unknown: Vec<String>,
    pub duplicated: Vec<String>,
    pub missing: Vec<String>,
}

const REFUSAL_MARKERS: &[&[&str]] = &[
    &["sorry"],
    &["cannot"],
    &["can", "t"],
    &["unable"],
    &["don", "t", "have"],
    &["do", "not", "have"],
    &["don", "t", "know"],
    &["not", "enough", "information"],
];

/// A response that declines to rank anything.
fn is_refusal(text: &str) -> bool {
    let toks = tokenize(text);
    REFUSAL_MARKERS.iter().any(|m| {
        toks.windows(m.len())
            .any(|w| w.iter().zip(*m).all(|(a, b)| a == b))
    })
}

/// Classifies whitespace-separated output against the identifier alphabet.
///
/// A refusal that does not spell out a full ranking omits every candidate; any
/// identifier-like words in it (a pronoun "I" once K > 8) are ignored.
/// Otherwise unknown symbols make a mismatch, repeated symbols a duplication and
/// absent symbols an omission.
pub fn parse_ranking(text: &str, alphabet: &OptionAlphabet) -> ParseDiagnosis {
    let k = alphabet.len();
    let mut seen = vec![false; k];
    let mut ranked = Vec::new();
    let mut unknown = Vec::new();
    let mut duplicated = Vec::new();
    for raw in text.split_whitespace() {
        let sym = raw.trim_matches(|c: char| matches!(c, ',' | '.' | ';' | ':' | '(' | ')' | '"'));
        match alphabet.position(sym) {
            Some(p) if seen[p] => {
                if !duplicated.iter().any(|d| d == sym) {
                    duplicated.push(sym.to_string());
                }
            }
            Some(p) => {
                seen[p] = true;
                ranked.push(p + 1);
            }
            None => unknown.push(raw.to_string()),
        }
    }
    let complete = unknown.is_empty() && duplicated.is_empty() && ranked.len() == k;
    if !complete && is_refusal(text) {
        seen.fill(false);
        ranked.clear();
        duplicated.clear();
        unknown.clear();
    }
    let missing: Vec<String> = (0..k)
        .filter(|&p| !seen[p])
        .map(|p| alphabet.symbol(p).to_string())
        .collect();

    let outcome = if !unknown.is_empty() {
        ParseOutcome::Mismatch
    } else if !duplicated.is_empty() {
        ParseOutcome::Duplication
    } else if !missing.is_empty() {
        ParseOutcome::Omission
    } else {
        ParseOutcome::Ok
    };
    ParseDiagnosis {
        outcome,
        permutation: (outcome == ParseOutcome::Ok).then(|| ranked.clone()),
        ranked,
        unknown,
        duplicated,
        missing,
    }
}

/// Reply from a text-generation endpoint. `steps`, when present, holds one
/// identifier → logit map per output slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default)]
    pub steps: Option<Vec<HashMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub identifiers: &'a [String],
}

pub trait GenerationAdapter: Send + Sync {
    fn generate(&self, prompt: &str, identifiers: &[String]) -> Result<GenerationResponse>;
}

/// Runs a command per request: the JSON request is written to its stdin,
/// a JSON [`GenerationResponse`] is read from its stdout.
#[derive(Debug, Clone)]
pub struct SubprocessAdapter {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl SubprocessAdapter {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        SubprocessAdapter {
            program: program.into(),
            args,
            timeout,
        }
    }
}

impl GenerationAdapter for SubprocessAdapter {
    fn generate(&self, prompt: &str, identifiers: &[String]) -> Result<GenerationResponse> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Adapter(format!("spawn {}: {e}", self.program)))?;
        let request = serde_json::to_string(&GenerationRequest {
            prompt,
            identifiers,
        })?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // a generator that exits without reading is reported by its reply
            let _ = stdin
                .write_all(request.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"));
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut buf = String::new();
            let res = stdout.read_to_string(&mut buf).map(|_| buf);
            let _ = tx.send(res);
        });
        let reply = match rx.recv_timeout(self.timeout) {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Adapter(format!("read from generator: {e}")));
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Adapter(format!(
                    "generator timed out after {:?}",
                    self.timeout
                )));
            }
        };
        let status = child
            .wait()
            .map_err(|e| Error::Adapter(format!("wait for generator: {e}")))?;
        if !status.success() {
            return Err(Error::Adapter(format!("generator exited with {status}")));
        }
        serde_json::from_str(reply.trim())
            .map_err(|e| Error::Adapter(format!("malformed generator reply: {e}")))
    }
}

/// Logits for slot `step` from per-step maps; identifiers absent from a map
/// get the lowest finite logit. Steps past the end reuse the last map.
fn step_logits(steps: &[HashMap<String, f64>], step: usize, alphabet: &OptionAlphabet) -> Vec<f64> {
    let map = &steps[step.min(steps.len() - 1)];
    alphabet
        .symbols()
        .iter()
        .map(|s| map.get(s).copied().unwrap_or(f64::MIN))
        .collect()
}

/// Generates a ranking through an external model. With per-step logits the
/// output is decoded under the permutation constraint (or plain greedy when
/// `constrained` is false); otherwise the raw text is parsed.
pub fn external_generate(
    adapter: &dyn GenerationAdapter,
    prompt: &str,
    alphabet: &OptionAlphabet,
    constrained: bool,
) -> Result<ParseDiagnosis> {
    let reply = adapter.generate(prompt, alphabet.symbols())?;
    match reply.steps.as_deref() {
        Some(steps) if !steps.is_empty() => {
            let provider = |s: &DecodeState| step_logits(steps, s.step(), alphabet);
            let positions = if constrained {
                constrained_greedy_decode(provider, alphabet.len())?
            } else {
                unconstrained_greedy_decode(provider, alphabet.len())?
            };
            let text = positions
                .iter()
                .map(|&p| alphabet.symbol(p - 1))
                .collect::<Vec<_>>()
                .join(" ");
            Ok(parse_ranking(&text, alphabet))
        }
        _ => Ok(parse_ranking(&reply.text, alphabet)),
    }
}
