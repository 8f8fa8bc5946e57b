//! Knowledge-graph storage: vocabularies, labels, splits, filter index and
//! optional canonical clusters.
//!
//! A dataset directory holds tab-separated files:
//!
//! ```text
//! entities.tsv       idx<TAB>label
//! relations.tsv      idx<TAB>label
//! train.tsv          head<TAB>rel<TAB>tail
//! valid.tsv          head<TAB>rel<TAB>tail
//! test.tsv           head<TAB>rel<TAB>tail
//! definitions.tsv    entity_idx<TAB>definition      (optional)
//! clusters.tsv       entity_idx<TAB>cluster_idx     (optional)
//! rel_templates.tsv  rel_idx<TAB>pattern with [H] and [T]  (optional)
//! ```
//!
//! Indices are 0-based and dense; the label files define them in file order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Triple { head, rel, tail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KgKind {
    #[default]
    Curated,
    Open,
}

impl FromStr for KgKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curated" => Ok(KgKind::Curated),
            "open" => Ok(KgKind::Open),
            other => Err(Error::invalid(format!(
                "unknown dataset kind {other:?} (expected curated|open)"
            ))),
        }
    }
}

impl fmt::Display for KgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KgKind::Curated => "curated",
            KgKind::Open => "open",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

/// Gold canonical clusters of entity mentions (open KGs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldClusters {
    cluster_of: Vec<usize>,
    cluster_count: usize,
}

impl GoldClusters {
    /// Builds clusters from a total entity → cluster map. Cluster indices
    /// must be dense over `0..max+1`.
    pub fn new(cluster_of: Vec<usize>) -> Result<Self> {
        let cluster_count = cluster_of.iter().map(|&c| c + 1).max().unwrap_or(0);
        let mut seen = vec![false; cluster_count];
        for &c in &cluster_of {
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!(
                "cluster indices are not dense: cluster {missing} has no members"
            )));
        }
        Ok(GoldClusters {
            cluster_of,
            cluster_count,
        })
    }

    pub fn cluster_of(&self, entity: usize) -> usize {
        self.cluster_of[entity]
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == cluster)
            .map(|(e, _)| e)
            .collect()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.cluster_of
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub kind: KgKind,
    pub entity_labels: Vec<String>,
    pub relation_labels: Vec<String>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// One optional definition per entity, present only if `definitions.tsv` was loaded.
    pub definitions: Option<Vec<Option<String>>>,
    /// One optional `[H]`/`[T]` pattern per relation.
    pub relation_templates: Option<Vec<Option<String>>>,
    pub clusters: Option<GoldClusters>,
}

impl KnowledgeGraph {
    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_label(&self, e: usize) -> &str {
        &self.entity_labels[e]
    }

    pub fn relation_label(&self, r: usize) -> &str {
        &self.relation_labels[r]
    }

    pub fn definition(&self, e: usize) -> Option<&str> {
        self.definitions.as_ref()?.get(e)?.as_deref()
    }

    pub fn relation_template(&self, r: usize) -> Option<&str> {
        self.relation_templates.as_ref()?.get(r)?.as_deref()
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Checks index bounds and label non-emptiness.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.entity_labels.iter().position(|l| l.is_empty()) {
            return Err(Error::invalid(format!("entity {i} has an empty label")));
        }
        if let Some(i) = self.relation_labels.iter().position(|l| l.is_empty()) {
            return Err(Error::invalid(format!("relation {i} has an empty label")));
        }
        for t in self.all_triples() {
            check_triple(t, self.entity_count(), self.relation_count())?;
        }
        if let Some(c) = &self.clusters
            && c.as_slice().len() != self.entity_count()
        {
            return Err(Error::invalid(format!(
                "clusters cover {} entities, graph has {}",
                c.as_slice().len(),
                self.entity_count()
            )));
        }
        Ok(())
    }

    /// Number of (h,r,t) triples shared between two different splits.
    pub fn split_overlap(&self) -> usize {
        let train: HashSet<&Triple> = self.train.iter().collect();
        let valid: HashSet<&Triple> = self.valid.iter().collect();
        let test: HashSet<&Triple> = self.test.iter().collect();
        train.intersection(&valid).count()
            + train.intersection(&test).count()
            + valid.intersection(&test).count()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            kind: self.kind,
            entities: self.entity_count(),
            relations: self.relation_count(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            has_definitions: self.definitions.is_some(),
            has_templates: self.relation_templates.is_some(),
            has_clusters: self.clusters.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub kind: KgKind,
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub has_definitions: bool,
    pub has_templates: bool,
    pub has_clusters: bool,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "kind", "entities", "relations", "train", "valid", "test"
        )?;
        write!(
            f,
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            self.kind.to_string(),
            self.entities,
            self.relations,
            self.train,
            self.valid,
            self.test
        )
    }
}

fn check_triple(t: &Triple, n_ent: usize, n_rel: usize) -> Result<()> {
    if t.head >= n_ent {
        return Err(Error::IndexOutOfRange {
            what: "entity",
            index: t.head,
            bound: n_ent,
        });
    }
    if t.tail >= n_ent {
        return Err(Error::IndexOutOfRange {
            what: "entity",
            index: t.tail,
            bound: n_ent,
        });
    }
    if t.rel >= n_rel {
        return Err(Error::IndexOutOfRange {
            what: "relation",
            index: t.rel,
            bound: n_rel,
        });
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Yields `(1-based line number, line)` for non-blank lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_index(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what}: expected a non-negative integer, got {field:?}"),
    })
}

/// `idx<TAB>text` rows where idx must count up from 0 in file order.
fn read_label_file(path: &Path) -> Result<Vec<String>> {
    let text = read_file(path)?;
    let mut labels = Vec::new();
    for (line, row) in content_lines(&text) {
        let (idx, label) = row.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "expected idx<TAB>label".into(),
        })?;
        let idx = parse_index(path, line, idx, "index")?;
        if idx != labels.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("index {idx} is not dense (expected {})", labels.len()),
            });
        }
        if label.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "empty label".into(),
            });
        }
        labels.push(label.to_string());
    }
    Ok(labels)
}

/// Sparse `idx<TAB>text` rows keyed by an existing index space.
fn read_keyed_text(path: &Path, bound: usize, what: &'static str) -> Result<Vec<Option<String>>> {
    let text = read_file(path)?;
    let mut out = vec![None; bound];
    for (line, row) in content_lines(&text) {
        let (idx, value) = row.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {what}_idx<TAB>text"),
        })?;
        let idx = parse_index(path, line, idx, what)?;
        if idx >= bound {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("{what} index {idx} out of range (size {bound})"),
            });
        }
        out[idx] = Some(value.to_string());
    }
    Ok(out)
}

fn read_triples(path: &Path, n_ent: usize, n_rel: usize) -> Result<Vec<Triple>> {
    let text = read_file(path)?;
    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    let mut duplicates = 0usize;
    for (line, row) in content_lines(&text) {
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let t = Triple::new(
            parse_index(path, line, fields[0], "head")?,
            parse_index(path, line, fields[1], "relation")?,
            parse_index(path, line, fields[2], "tail")?,
        );
        check_triple(&t, n_ent, n_rel).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if !seen.insert(t) {
            duplicates += 1;
        }
        triples.push(t);
    }
    if duplicates > 0 {
        warn!(path = %path.display(), duplicates, "duplicate triples kept");
    }
    Ok(triples)
}

fn optional(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.is_file().then_some(p)
}

pub fn load_dataset(dir: impl AsRef<Path>, kind: KgKind) -> Result<KnowledgeGraph> {
    let dir = dir.as_ref();
    let entity_labels = read_label_file(&dir.join("entities.tsv"))?;
    let relation_labels = read_label_file(&dir.join("relations.tsv"))?;
    let (n_ent, n_rel) = (entity_labels.len(), relation_labels.len());

    let train = read_triples(&dir.join(Split::Train.file_name()), n_ent, n_rel)?;
    let valid = read_triples(&dir.join(Split::Valid.file_name()), n_ent, n_rel)?;
    let test = read_triples(&dir.join(Split::Test.file_name()), n_ent, n_rel)?;

    let definitions = optional(dir, "definitions.tsv")
        .map(|p| read_keyed_text(&p, n_ent, "entity"))
        .transpose()?;
    let relation_templates = optional(dir, "rel_templates.tsv")
        .map(|p| read_keyed_text(&p, n_rel, "relation"))
        .transpose()?;
    let clusters = optional(dir, "clusters.tsv")
        .map(|p| read_clusters(&p, n_ent))
        .transpose()?;

    let kg = KnowledgeGraph {
        kind,
        entity_labels,
        relation_labels,
        train,
        valid,
        test,
        definitions,
        relation_templates,
        clusters,
    };
    let overlap = kg.split_overlap();
    if overlap > 0 {
        warn!(overlap, "triples shared between splits");
    }
    Ok(kg)
}

fn read_clusters(path: &Path, n_ent: usize) -> Result<GoldClusters> {
    let text = read_file(path)?;
    let mut cluster_of = vec![None; n_ent];
    for (line, row) in content_lines(&text) {
        let (e, c) = row.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: "expected entity_idx<TAB>cluster_idx".into(),
        })?;
        let e = parse_index(path, line, e, "entity")?;
        let c = parse_index(path, line, c, "cluster")?;
        if e >= n_ent {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("entity index {e} out of range (size {n_ent})"),
            });
        }
        cluster_of[e] = Some(c);
    }
    let cluster_of = cluster_of
        .into_iter()
        .enumerate()
        .map(|(e, c)| {
            c.ok_or_else(|| {
                Error::invalid(format!("{}: entity {e} has no cluster", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GoldClusters::new(cluster_of)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the graph in the directory layout [`load_dataset`] reads.
pub fn write_dataset(kg: &KnowledgeGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let labels = |ls: &[String]| {
        ls.iter()
            .enumerate()
            .map(|(i, l)| format!("{i}\t{l}\n"))
            .collect::<String>()
    };
    write_file(&dir.join("entities.tsv"), &labels(&kg.entity_labels))?;
    write_file(&dir.join("relations.tsv"), &labels(&kg.relation_labels))?;
    for split in Split::ALL {
        let body: String = kg
            .split(split)
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.rel, t.tail))
            .collect();
        write_file(&dir.join(split.file_name()), &body)?;
    }
    let keyed = |xs: &[Option<String>]| {
        xs.iter()
            .enumerate()
            .filter_map(|(i, x)| x.as_ref().map(|x| format!("{i}\t{x}\n")))
            .collect::<String>()
    };
    if let Some(defs) = &kg.definitions {
        write_file(&dir.join("definitions.tsv"), &keyed(defs))?;
    }
    if let Some(tpl) = &kg.relation_templates {
        write_file(&dir.join("rel_templates.tsv"), &keyed(tpl))?;
    }
    if let Some(c) = &kg.clusters {
        let body: String = c
            .as_slice()
            .iter()
            .enumerate()
            .map(|(e, c)| format!("{e}\t{c}\n"))
            .collect();
        write_file(&dir.join("clusters.tsv"), &body)?;
    }
    Ok(())
}

/// Known-true answers over every split, for the filtered ranking protocol.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails_of: HashMap<(usize, usize), Vec<usize>>,
    heads_of: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        Self::from_triples(kg.all_triples())
    }

    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut tails_of: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut heads_of: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in triples {
            tails_of.entry((t.head, t.rel)).or_default().push(t.tail);
            heads_of.entry((t.tail, t.rel)).or_default().push(t.head);
        }
        for v in tails_of.values_mut().chain(heads_of.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { tails_of, heads_of }
    }

    /// Sorted true tails of `(head, rel, ?)`.
    pub fn tails_of(&self, head: usize, rel: usize) -> &[usize] {
        self.tails_of
            .get(&(head, rel))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Sorted true heads of `(?, rel, tail)`.
    pub fn heads_of(&self, tail: usize, rel: usize) -> &[usize] {
        self.heads_of
            .get(&(tail, rel))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn tail_keys(&self) -> usize {
        self.tails_of.len()
    }
}

pub fn build_filter_index(kg: &KnowledgeGraph) -> FilterIndex {
    FilterIndex::build(kg)
}
