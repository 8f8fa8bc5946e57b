//! Text rendering of queries, candidates and instruction inputs.
//!
//! Candidates are bound to option identifiers `A, B, …, Z, AA, AB, …`
//! (bijective base-26), and the generation target is the identifier order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::kge::{Direction, Query};

/// Marker for the missing entity in a query sequence.
pub const BLANK: &str = "____";

const HEAD_SLOT: &str = "[H]";
const TAIL_SLOT: &str = "[T]";

const TEMPLATE_PLAIN: &str = include_str!("../assets/t_in.txt");
const TEMPLATE_KNOWLEDGE: &str = include_str!("../assets/t_in_k.txt");

/// The identifier for 0-based candidate position `i`.
pub fn option_identifier(i: usize) -> String {
    let mut n = i + 1;
    let mut out = Vec::new();
    while n > 0 {
        n -= 1;
        out.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionAlphabet {
    identifiers: Vec<String>,
}

impl OptionAlphabet {
    pub fn new(k: usize) -> Self {
        OptionAlphabet {
            identifiers: (0..k).map(option_identifier).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.identifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }

    pub fn symbol(&self, position: usize) -> &str {
        &self.identifiers[position]
    }

    pub fn symbols(&self) -> &[String] {
        &self.identifiers
    }

    /// 0-based position bound to `symbol`.
    pub fn position(&self, symbol: &str) -> Option<usize> {
        self.identifiers.iter().position(|s| s == symbol)
    }
}

/// A query sentence split around its blank, so that candidates can be
/// substituted without re-scanning rendered text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryText {
    pub before: String,
    pub after: String,
}

impl QueryText {
    /// The sentence with `label` in place of the blank, i.e. a triple sequence.
    pub fn fill(&self, label: &str) -> String {
        format!("{}{}{}", self.before, label, self.after)
    }
}

impl fmt::Display for QueryText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.before, BLANK, self.after)
    }
}

/// Splits a relation pattern into `(before [H], between, after [T])` pieces,
/// in whichever slot order the pattern uses.
fn split_pattern(pattern: &str) -> Result<(Vec<&str>, [char; 2])> {
    let h = pattern.find(HEAD_SLOT);
    let t = pattern.find(TAIL_SLOT);
    let (Some(h), Some(t)) = (h, t) else {
        return Err(Error::Template(format!(
            "pattern {pattern:?} must contain both {HEAD_SLOT} and {TAIL_SLOT}"
        )));
    };
    if pattern.matches(HEAD_SLOT).count() != 1 || pattern.matches(TAIL_SLOT).count() != 1 {
        return Err(Error::Template(format!(
            "pattern {pattern:?} must contain each placeholder exactly once"
        )));
    }
    let (first, second, order) = if h < t {
        (h, t, ['H', 'T'])
    } else {
        (t, h, ['T', 'H'])
    };
    Ok((
        vec![
            &pattern[..first],
            &pattern[first + 3..second],
            &pattern[second + 3..],
        ],
        order,
    ))
}

/// Fills a `[H]`/`[T]` pattern. Exactly one of the slots may be `None`,
/// which becomes the blank.
fn fill_pattern(pattern: &str, head: Option<&str>, tail: Option<&str>) -> Result<QueryText> {
    let (pieces, order) = split_pattern(pattern)?;
    let slot = |c: char| if c == 'H' { head } else { tail };
    let (a, b) = (slot(order[0]), slot(order[1]));
    match (a, b) {
        (None, Some(b)) => Ok(QueryText {
            before: pieces[0].to_string(),
            after: format!("{}{}{}", pieces[1], b, pieces[2]),
        }),
        (Some(a), None) => Ok(QueryText {
            before: format!("{}{}{}", pieces[0], a, pieces[1]),
            after: pieces[2].to_string(),
        }),
        _ => Err(Error::invalid("exactly one slot must be left blank")),
    }
}

/// The pattern for relation `rel`: its template, or plain concatenation of
/// head, relation label and tail.
pub fn relation_pattern(kg: &KnowledgeGraph, rel: usize) -> String {
    match kg.relation_template(rel) {
        Some(t) => t.to_string(),
        None => format!("{HEAD_SLOT} {} {TAIL_SLOT}?", kg.relation_label(rel)),
    }
}

/// Query sequence for `query`. With `with_definition`, the known entity's
/// definition (if loaded) is appended in parentheses.
pub fn make_query_sequence(
    kg: &KnowledgeGraph,
    query: &Query,
    with_definition: bool,
) -> Result<QueryText> {
    let pattern = relation_pattern(kg, query.rel);
    let known = kg.entity_label(query.entity);
    let mut text = match query.direction {
        Direction::Tail => fill_pattern(&pattern, Some(known), None)?,
        Direction::Head => fill_pattern(&pattern, None, Some(known))?,
    };
    if with_definition && let Some(def) = kg.definition(query.entity) {
        text.after.push_str(&format!(" ({def})"));
    }
    Ok(text)
}

/// The triple sequence of a known fact, as used for the retrieval corpus.
pub fn triple_sequence(
    kg: &KnowledgeGraph,
    head: usize,
    rel: usize,
    tail: usize,
) -> Result<String> {
    let pattern = relation_pattern(kg, rel);
    let q = fill_pattern(&pattern, Some(kg.entity_label(head)), None)?;
    Ok(q.fill(kg.entity_label(tail)))
}

/// Per-candidate text: the bare label, or with `qci` the query sentence with
/// the candidate filled in.
pub fn candidate_texts(x_q: &QueryText, labels: &[&str], qci: bool) -> Vec<String> {
    labels
        .iter()
        .map(|l| if qci { x_q.fill(l) } else { l.to_string() })
        .collect()
}

/// `"A. <text> B. <text> …"`.
pub fn make_candidate_sequence(x_q: &QueryText, labels: &[&str], qci: bool) -> String {
    join_options(&candidate_texts(x_q, labels, qci))
}

pub fn join_options(texts: &[String]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", option_identifier(i), t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub x_q: String,
    pub x_c: String,
    pub x_k_q: Option<String>,
    pub x_k_c: Option<String>,
}

fn unescape_template(raw: &str) -> String {
    raw.trim_end_matches(['\n', '\r']).replace("\\n", "\n")
}

/// The instruction template with newlines resolved. `knowledge` selects the
/// variant carrying retrieved prompts.
pub fn instruction_template(knowledge: bool) -> String {
    unescape_template(if knowledge {
        TEMPLATE_KNOWLEDGE
    } else {
        TEMPLATE_PLAIN
    })
}

/// Single-pass placeholder substitution: text inserted for one placeholder is
/// never rescanned for others.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'scan: while !rest.is_empty() {
        if rest.starts_with('{') {
            for (key, value) in values {
                if rest.starts_with(key) {
                    out.push_str(value);
                    rest = &rest[key.len()..];
                    continue 'scan;
                }
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn assemble_input(bundle: &PromptBundle, knowledge_mode: bool) -> String {
    let template = instruction_template(knowledge_mode);
    let kq = bundle.x_k_q.as_deref().unwrap_or("");
    let kc = bundle.x_k_c.as_deref().unwrap_or("");
    substitute(
        &template,
        &[
            ("{x_q}", &bundle.x_q),
            ("{x_c}", &bundle.x_c),
            ("{x_k_q}", kq),
            ("{x_k_c}", kc),
        ],
    )
}

/// Checks that `permutation` (1-based positions) is a bijection on `1..=K`.
pub fn check_permutation(permutation: &[usize]) -> Result<()> {
    let k = permutation.len();
    let mut seen = vec![false; k];
    for &p in permutation {
        if p == 0 || p > k || seen[p - 1] {
            return Err(Error::invalid(format!(
                "{permutation:?} is not a permutation of 1..={k}"
            )));
        }
        seen[p - 1] = true;
    }
    Ok(())
}

/// Identifiers in ranked order, separated by single spaces. `permutation[t]`
/// is the 1-based position of the candidate ranked `t`-th.
pub fn make_target(permutation: &[usize]) -> Result<String> {
    check_permutation(permutation)?;
    Ok(permutation
        .iter()
        .map(|&p| option_identifier(p - 1))
        .collect::<Vec<_>>()
        .join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KgKind, Triple};

    fn movie_kg() -> KnowledgeGraph {
        KnowledgeGraph {
            kind: KgKind::Curated,
            entity_labels: ["Jackie Chan", "Ip Man", "King of Comedy", "Police Story"]
                .map(String::from)
                .to_vec(),
            relation_labels: vec!["played in movie".into(), "acted with".into()],
            train: vec![Triple::new(0, 0, 1)],
            valid: vec![],
            test: vec![],
            definitions: Some(vec![Some("Hong Kong actor".into()), None, None, None]),
            relation_templates: Some(vec![Some("[H] played in movie [T]?".into()), None]),
            clusters: None,
        }
    }

    #[test]
    fn alphabet_is_bijective_base26() {
        assert_eq!(option_identifier(0), "A");
        assert_eq!(option_identifier(25), "Z");
        assert_eq!(option_identifier(26), "AA");
        assert_eq!(option_identifier(27), "AB");
        assert_eq!(option_identifier(29), "AD");
        assert_eq!(option_identifier(26 * 27), "AAA");
        let a = OptionAlphabet::new(30);
        let set: std::collections::HashSet<_> = a.symbols().iter().collect();
        assert_eq!(set.len(), 30);
        assert_eq!(a.position("AD"), Some(29));
        assert_eq!(a.position("AE"), None);
    }

    #[test]
    fn query_sequence_with_template() {
        let kg = movie_kg();
        let q = make_query_sequence(&kg, &Query::tail(0, 0), false).unwrap();
        assert_eq!(q.to_string(), "Jackie Chan played in movie ____?");
        let h = make_query_sequence(&kg, &Query::head(1, 0), false).unwrap();
        assert_eq!(h.to_string(), "____ played in movie Ip Man?");
    }

    #[test]
    fn query_sequence_without_template_concatenates() {
        let kg = movie_kg();
        let q = make_query_sequence(&kg, &Query::tail(0, 1), false).unwrap();
        assert_eq!(q.to_string(), "Jackie Chan acted with ____?");
        let h = make_query_sequence(&kg, &Query::head(3, 1), false).unwrap();
        assert_eq!(h.to_string(), "____ acted with Police Story?");
    }

    #[test]
    fn definition_is_appended_when_enabled() {
        let kg = movie_kg();
        let q = make_query_sequence(&kg, &Query::tail(0, 0), true).unwrap();
        assert_eq!(
            q.to_string(),
            "Jackie Chan played in movie ____? (Hong Kong actor)"
        );
        // no definition for entity 1
        let h = make_query_sequence(&kg, &Query::head(1, 0), true).unwrap();
        assert_eq!(h.to_string(), "____ played in movie Ip Man?");
    }

    #[test]
    fn malformed_template_is_rejected() {
        let mut kg = movie_kg();
        kg.relation_templates = Some(vec![Some("[H] played in movie".into()), None]);
        assert!(matches!(
            make_query_sequence(&kg, &Query::tail(0, 0), false),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn reversed_slot_order() {
        let mut kg = movie_kg();
        kg.relation_templates = Some(vec![Some("[T] starred [H].".into()), None]);
        let q = make_query_sequence(&kg, &Query::tail(0, 0), false).unwrap();
        assert_eq!(q.to_string(), "____ starred Jackie Chan.");
        assert_eq!(q.fill("Ip Man"), "Ip Man starred Jackie Chan.");
    }

    #[test]
    fn candidate_sequences() {
        let kg = movie_kg();
        let q = make_query_sequence(&kg, &Query::tail(0, 0), false).unwrap();
        let labels = ["Ip Man", "King of Comedy", "Police Story"];
        assert_eq!(
            make_candidate_sequence(&q, &labels, false),
            "A. Ip Man B. King of Comedy C. Police Story"
        );
        assert_eq!(
            make_candidate_sequence(&q, &labels, true),
            "A. Jackie Chan played in movie Ip Man? B. Jackie Chan played in movie King of Comedy? C. Jackie Chan played in movie Police Story?"
        );
        assert_eq!(
            make_candidate_sequence(&q, &labels[..1], false),
            "A. Ip Man"
        );
    }

    #[test]
    fn plain_template_shape() {
        let bundle = PromptBundle {
            x_q: "Q".into(),
            x_c: "A. x".into(),
            x_k_q: None,
            x_k_c: None,
        };
        let s = assemble_input(&bundle, false);
        assert!(s.starts_with("Below is an instruction that describes a task"));
        assert!(s.ends_with("### Response: "));
        assert!(s.contains("### Question: Q\n\nA. x\n\n"));
    }

    #[test]
    fn knowledge_template_with_empty_candidate_knowledge() {
        let bundle = PromptBundle {
            x_q: "Q".into(),
            x_c: "A. x".into(),
            x_k_q: Some("K".into()),
            x_k_c: Some(String::new()),
        };
        let s = assemble_input(&bundle, true);
        assert!(s.contains("### Supporting information: K\n\n### Candidate supporting knowledge: \n\n### Question: Q"));
    }

    #[test]
    fn substitution_does_not_rescan_values() {
        let bundle = PromptBundle {
            x_q: "{x_c}".into(),
            x_c: "C".into(),
            x_k_q: None,
            x_k_c: None,
        };
        let s = assemble_input(&bundle, false);
        assert!(s.contains("### Question: {x_c}\n\nC"));
    }

    #[test]
    fn targets() {
        assert_eq!(make_target(&[3, 1, 2]).unwrap(), "C A B");
        assert_eq!(make_target(&[1, 2]).unwrap(), "A B");
        assert!(make_target(&[1, 1]).is_err());
        assert!(make_target(&[0, 1]).is_err());
        assert!(make_target(&[1, 3]).is_err());
    }
}
