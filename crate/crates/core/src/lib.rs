//! Two-stage link prediction over knowledge graphs: a tensor-factorisation
//! first stage proposes top-K candidates, and a re-ranker reorders them from
//! their textual verbalisations.

pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kg;
pub mod kge;
pub mod pipeline;
pub mod rerank;
pub mod retriever;
pub mod synthetic;
pub mod text;
pub mod verbalizer;

pub use config::{ConfigFile, RunConfig};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport, Evaluator, RankingMetrics, Reranker, Toggles};
pub use kg::{FilterIndex, KgKind, KnowledgeGraph, Split, Triple, load_dataset};
pub use kge::{KgeModel, KgeTrainConfig, Query, train_kge};
