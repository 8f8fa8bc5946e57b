//! Seeded synthetic knowledge graph with planted regularities.
//!
//! Entities are `families × roles`, labelled "<family> <role>". Relation `r`
//! links each entity whose role is in a source set `A_r` to the member of the
//! same family holding the target role `b_r`. Both the family match and the
//! relation-to-target-role mapping are visible in entity labels, so a
//! text-reading re-ranker can generalise them from a sparse training split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KgKind, KnowledgeGraph, Triple};

const FAMILY_WORDS: &[&str] = &[
    "amber", "birch", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "kestrel", "lagoon", "marble", "nectar", "onyx", "pepper", "quartz", "raven", "saffron",
    "tundra", "umber", "velvet", "willow", "xenon", "yarrow", "zephyr", "alder", "basalt",
    "cobalt", "dune",
];

const ROLE_WORDS: &[&str] = &[
    "smith", "baker", "tailor", "mason", "weaver", "potter", "cooper", "fletcher", "miller",
    "tanner", "carver", "glazier", "joiner", "roper", "saddler",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub families: usize,
    pub roles: usize,
    pub relations: usize,
    /// Size of each relation's source-role set.
    pub sources_per_relation: usize,
    /// Uniformly random extra facts.
    pub noise_facts: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            families: 20,
            roles: 10,
            relations: 20,
            sources_per_relation: 3,
            noise_facts: 0,
            train_fraction: 0.7,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

/// The planted rule of one relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRule {
    pub sources: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticKg {
    pub kg: KnowledgeGraph,
    pub rules: Vec<RelationRule>,
}

pub fn entity_id(cfg: &SyntheticConfig, family: usize, role: usize) -> usize {
    family * cfg.roles + role
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticKg> {
    if cfg.families == 0 || cfg.families > FAMILY_WORDS.len() {
        return Err(Error::invalid(format!(
            "families must be in 1..={}",
            FAMILY_WORDS.len()
        )));
    }
    if cfg.roles < 2 || cfg.roles > ROLE_WORDS.len() {
        return Err(Error::invalid(format!(
            "roles must be in 2..={}",
            ROLE_WORDS.len()
        )));
    }
    if cfg.relations == 0 || cfg.sources_per_relation == 0 || cfg.sources_per_relation >= cfg.roles
    {
        return Err(Error::invalid(
            "need relations ≥ 1 and 1 ≤ sources_per_relation < roles",
        ));
    }
    let (tf, vf) = (cfg.train_fraction, cfg.valid_fraction);
    if !(tf > 0.0 && vf >= 0.0 && tf + vf < 1.0) {
        return Err(Error::invalid(
            "split fractions must satisfy 0 < train, 0 ≤ valid, train + valid < 1",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rules: Vec<RelationRule> = (0..cfg.relations)
        .map(|_| {
            let mut roles: Vec<usize> = (0..cfg.roles).collect();
            roles.shuffle(&mut rng);
            let mut sources = roles[1..=cfg.sources_per_relation].to_vec();
            sources.sort_unstable();
            RelationRule {
                sources,
                target: roles[0],
            }
        })
        .collect();

    let mut facts = BTreeSet::new();
    for (r, rule) in rules.iter().enumerate() {
        for f in 0..cfg.families {
            for &a in &rule.sources {
                facts.insert(Triple::new(
                    entity_id(cfg, f, a),
                    r,
                    entity_id(cfg, f, rule.target),
                ));
            }
        }
    }
    let n_ent = cfg.families * cfg.roles;
    let mut added = 0;
    while added < cfg.noise_facts {
        let t = Triple::new(
            rng.random_range(0..n_ent),
            rng.random_range(0..cfg.relations),
            rng.random_range(0..n_ent),
        );
        if t.head != t.tail && facts.insert(t) {
            added += 1;
        }
    }

    let mut triples: Vec<Triple> = facts.into_iter().collect();
    triples.shuffle(&mut rng);
    let n = triples.len();
    let n_train = (n as f64 * tf).round() as usize;
    let n_valid = (n as f64 * vf).round() as usize;
    let test = triples.split_off(n_train + n_valid);
    let valid = triples.split_off(n_train);

    let entity_labels = (0..n_ent)
        .map(|e| {
            format!(
                "{} {}",
                FAMILY_WORDS[e / cfg.roles],
                ROLE_WORDS[e % cfg.roles]
            )
        })
        .collect();
    let definitions = (0..n_ent)
        .map(|e| {
            Some(format!(
                "a {} of the {} house",
                ROLE_WORDS[e % cfg.roles],
                FAMILY_WORDS[e / cfg.roles]
            ))
        })
        .collect();
    let kg = KnowledgeGraph {
        kind: KgKind::Curated,
        entity_labels,
        relation_labels: (0..cfg.relations)
            .map(|r| format!("relation {r}"))
            .collect(),
        train: triples,
        valid,
        test,
        definitions: Some(definitions),
        relation_templates: None,
        clusters: None,
    };
    kg.validate()?;
    Ok(SyntheticKg { kg, rules })
}
