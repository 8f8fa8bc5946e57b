//! Pipeline stages over an output directory of artifacts.
//!
//! | file | written by |
//! |---|---|
//! | `config.json` | every command |
//! | `kge.ckpt`, `kge_log.jsonl` | train-kge |
//! | `samples.jsonl` | build-samples |
//! | `reranker.ckpt`, `rerank_log.jsonl` | train-rerank |
//! | `metrics.json`, `metrics_base.json`, `metrics.txt` | eval |
//! | `ablation.jsonl` | ablate |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::RunConfig;
use crate::decode::SubprocessAdapter;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Evaluator, RankingMetrics, Reranker, Toggles};
use crate::kg::{DatasetSummary, FilterIndex, KnowledgeGraph, Split, load_dataset};
use crate::kge::{KgeModel, train_kge};
use crate::rerank::{
    EpochLog, RerankSample, RerankerModel, SampleSet, Vocabulary, build_training_samples,
    train_reranker,
};
use crate::retriever::{HashingEmbedder, ProcessEmbedder, TextEmbedder, TrainingTextIndex};
use crate::verbalizer::{assemble_input, make_target};

pub const CONFIG_FILE: &str = "config.json";
pub const KGE_CKPT: &str = "kge.ckpt";
pub const KGE_LOG: &str = "kge_log.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const RERANKER_CKPT: &str = "reranker.ckpt";
pub const RERANK_LOG: &str = "rerank_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_BASE_FILE: &str = "metrics_base.json";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.jsonl";

const GENERATOR_TIMEOUT: Duration = Duration::from_secs(600);

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

/// Writes `config.json` into the output directory.
pub fn write_config(cfg: &RunConfig) -> Result<()> {
    write_file(&out_path(cfg, CONFIG_FILE), &cfg.to_json()?)
}

/// Does any component differ from plain first-stage ranking?
pub fn reranks(t: &Toggles) -> bool {
    t.qci || t.cci || t.qp || t.cp || t.cg || t.dp
}

pub fn ingest(cfg: &RunConfig) -> Result<(KnowledgeGraph, DatasetSummary)> {
    let kg = load_dataset(&cfg.dataset_dir, cfg.kind).map_err(|e| e.in_stage("ingest"))?;
    let summary = kg.summary();
    Ok((kg, summary))
}

pub fn train_kge_stage(cfg: &RunConfig, kg: &KnowledgeGraph) -> Result<KgeModel> {
    let run = || -> Result<KgeModel> {
        let training = train_kge(kg, &cfg.kge_train())?;
        ensure_out_dir(cfg)?;
        training.model.save(out_path(cfg, KGE_CKPT))?;
        #[derive(Serialize)]
        struct Line {
            epoch: usize,
            loss: f64,
        }
        let lines: Vec<Line> = training
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| Line { epoch, loss })
            .collect();
        write_file(&out_path(cfg, KGE_LOG), &jsonl(&lines)?)?;
        info!(
            final_loss = training.epoch_losses.last().copied().unwrap_or(f64::NAN),
            "trained KGE"
        );
        Ok(training.model)
    };
    run().map_err(|e| e.in_stage("train-kge"))
}

pub fn load_kge(cfg: &RunConfig, kg: &KnowledgeGraph) -> Result<KgeModel> {
    let path = out_path(cfg, KGE_CKPT);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing {}; run train-kge first",
            path.display()
        )));
    }
    let model = KgeModel::load(&path)?;
    if model.entity_count() != kg.entity_count() || model.relation_count() != kg.relation_count() {
        return Err(Error::Checkpoint(format!(
            "{} was trained on a different graph ({} entities, {} relations)",
            path.display(),
            model.entity_count(),
            model.relation_count()
        )));
    }
    Ok(model)
}

/// One line of `samples.jsonl`: the sample plus its rendered prompt and target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(flatten)]
    pub sample: RerankSample,
    pub input: String,
    pub output: String,
}

pub fn build_samples_stage(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    kge: &KgeModel,
) -> Result<SampleSet> {
    let run = || -> Result<SampleSet> {
        let set = build_training_samples(kg, kge, &cfg.samples())?;
        let records = set
            .samples
            .iter()
            .map(|s| {
                Ok(SampleRecord {
                    sample: s.clone(),
                    input: assemble_input(&s.bundle, false),
                    output: make_target(&s.target)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_file(&out_path(cfg, SAMPLES_FILE), &jsonl(&records)?)?;
        Ok(set)
    };
    run().map_err(|e| e.in_stage("build-samples"))
}

pub fn load_samples(cfg: &RunConfig) -> Result<Vec<RerankSample>> {
    let path = out_path(cfg, SAMPLES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<SampleRecord>(l)
                .map(|r| r.sample)
                .map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

/// Trains without touching the output directory.
pub fn fit_reranker(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    samples: &[RerankSample],
) -> Result<(RerankerModel, Vec<EpochLog>)> {
    let training = train_reranker(samples, Vocabulary::from_kg(kg), &cfg.rerank_train())?;
    Ok((training.model, training.log))
}

pub fn train_rerank_stage(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    samples: &[RerankSample],
) -> Result<RerankerModel> {
    let run = || -> Result<RerankerModel> {
        let (model, log) = fit_reranker(cfg, kg, samples)?;
        ensure_out_dir(cfg)?;
        model.save(out_path(cfg, RERANKER_CKPT))?;
        write_file(&out_path(cfg, RERANK_LOG), &jsonl(&log)?)?;
        Ok(model)
    };
    run().map_err(|e| e.in_stage("train-rerank"))
}

pub fn load_reranker(cfg: &RunConfig) -> Result<RerankerModel> {
    let path = out_path(cfg, RERANKER_CKPT);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing {}; run train-rerank first",
            path.display()
        )));
    }
    RerankerModel::load(&path)
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Arc<dyn TextEmbedder>> {
    Ok(match &cfg.embedder_cmd {
        Some(cmd) if !cmd.is_empty() => Arc::new(ProcessEmbedder::spawn(&cmd[0], &cmd[1..])?),
        _ => Arc::new(HashingEmbedder::new(cfg.embed_buckets)),
    })
}

/// Shared read-only state for evaluating many configurations.
pub struct EvalContext<'a> {
    pub kg: &'a KnowledgeGraph,
    pub kge: &'a KgeModel,
    pub filter: FilterIndex,
    pub index: Option<TrainingTextIndex>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        cfg: &RunConfig,
        kg: &'a KnowledgeGraph,
        kge: &'a KgeModel,
        with_index: bool,
    ) -> Result<Self> {
        let index = if with_index {
            Some(TrainingTextIndex::build(kg, make_embedder(cfg)?)?)
        } else {
            None
        };
        Ok(EvalContext {
            kg,
            kge,
            filter: FilterIndex::build(kg),
            index,
        })
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            kg: self.kg,
            filter: &self.filter,
            kge: self.kge,
            index: self.index.as_ref(),
        }
    }

    pub fn base(&self, cfg: &RunConfig) -> Result<EvalReport> {
        self.evaluator()
            .evaluate(Reranker::Base, &cfg.eval(Split::Test))
    }

    /// Re-ranked evaluation; the external generator, when configured, replaces `model`.
    pub fn rerank(&self, cfg: &RunConfig, model: Option<&RerankerModel>) -> Result<EvalReport> {
        let eval_cfg = cfg.eval(Split::Test);
        if !reranks(&cfg.toggles) {
            return self.base(cfg);
        }
        match (&cfg.generator_cmd, model) {
            (Some(cmd), _) if !cmd.is_empty() => {
                let adapter =
                    SubprocessAdapter::new(cmd[0].clone(), cmd[1..].to_vec(), GENERATOR_TIMEOUT);
                self.evaluator()
                    .evaluate(Reranker::External(&adapter), &eval_cfg)
            }
            (_, Some(m)) => self.evaluator().evaluate(Reranker::Scorer(m), &eval_cfg),
            _ => Err(Error::invalid(
                "re-ranking enabled but no re-ranker available",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub base: RankingMetrics,
    pub reranked: RankingMetrics,
    pub outcomes: BTreeMap<String, usize>,
}

pub fn metrics_text(summary: &EvalSummary, toggles: &Toggles) -> String {
    let mut out = String::new();
    out.push_str(&RankingMetrics::table_header());
    out.push('\n');
    out.push_str(&summary.base.table_row("base"));
    out.push('\n');
    out.push_str(
        &summary
            .reranked
            .table_row(&format!("rerank {}", toggles.key())),
    );
    out.push('\n');
    for (k, v) in &summary.outcomes {
        out.push_str(&format!("outcome {k:<12} {v}\n"));
    }
    out
}

pub fn eval_stage(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    kge: &KgeModel,
    model: Option<&RerankerModel>,
) -> Result<EvalSummary> {
    let run = || -> Result<EvalSummary> {
        let ctx = EvalContext::new(cfg, kg, kge, cfg.toggles.qp || cfg.toggles.cp)?;
        let base = ctx.base(cfg)?;
        let reranked = ctx.rerank(cfg, model)?;
        let summary = EvalSummary {
            base: base.metrics,
            reranked: reranked.metrics,
            outcomes: reranked.outcomes,
        };
        write_file(
            &out_path(cfg, METRICS_FILE),
            &(serde_json::to_string_pretty(&summary.reranked)? + "\n"),
        )?;
        write_file(
            &out_path(cfg, METRICS_BASE_FILE),
            &(serde_json::to_string_pretty(&summary.base)? + "\n"),
        )?;
        write_file(
            &out_path(cfg, METRICS_TEXT),
            &metrics_text(&summary, &cfg.toggles),
        )?;
        Ok(summary)
    };
    run().map_err(|e| e.in_stage("eval"))
}

/// ingest → train-kge → build-samples → train-rerank → eval.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalSummary> {
    write_config(cfg).map_err(|e| e.in_stage("pipeline"))?;
    let (kg, summary) = ingest(cfg)?;
    info!(
        entities = summary.entities,
        relations = summary.relations,
        train = summary.train,
        "loaded dataset"
    );
    let kge = train_kge_stage(cfg, &kg)?;
    let needs_model =
        reranks(&cfg.toggles) && cfg.generator_cmd.as_ref().is_none_or(|c| c.is_empty());
    let set = build_samples_stage(cfg, &kg, &kge)?;
    let model = if needs_model {
        Some(train_rerank_stage(cfg, &kg, &set.samples)?)
    } else {
        None
    };
    eval_stage(cfg, &kg, &kge, model.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGrid {
    /// Component toggle combinations.
    Components,
    /// λ ∈ {0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0} with the configured toggles.
    Lambda,
    /// Train at K = 10, evaluate at K ∈ {10, 20, 30}.
    K,
}

impl std::str::FromStr for AblationGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationGrid::Components),
            "lambda" => Ok(AblationGrid::Lambda),
            "k" => Ok(AblationGrid::K),
            other => Err(Error::invalid(format!(
                "unknown grid {other:?} (expected components|lambda|k)"
            ))),
        }
    }
}

pub const LAMBDA_SWEEP: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const K_SWEEP: [usize; 3] = [10, 20, 30];

/// Rows of the component grid, in report order.
pub fn component_grid(dp: bool) -> Vec<Toggles> {
    let t = |qci, cci, qp, cp, cg| Toggles {
        qci,
        cci,
        qp,
        cp,
        cg,
        dp,
        gold_first: false,
    };
    vec![
        Toggles {
            dp: false,
            ..Toggles::ALL_OFF
        },
        t(true, false, false, false, false),
        t(true, false, false, false, true),
        t(false, true, false, false, false),
        t(false, true, false, false, true),
        t(true, true, false, false, false),
        t(true, true, false, false, true),
        t(true, true, true, false, true),
        t(true, true, false, true, true),
        t(true, true, true, true, true),
    ]
}

/// One configuration's result, one JSON line in `ablation.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: String,
    pub toggles: Toggles,
    pub train_k: usize,
    pub eval_k: usize,
    pub lambda: f64,
    pub metrics: RankingMetrics,
    pub outcomes: BTreeMap<String, usize>,
}

/// The run configurations a grid expands to, as `(training config, eval K)`.
pub fn expand_grid(cfg: &RunConfig, grid: AblationGrid) -> Vec<(RunConfig, usize)> {
    match grid {
        AblationGrid::Components => component_grid(cfg.toggles.dp)
            .into_iter()
            .map(|toggles| {
                (
                    RunConfig {
                        toggles,
                        ..cfg.clone()
                    },
                    cfg.k,
                )
            })
            .collect(),
        AblationGrid::Lambda => LAMBDA_SWEEP
            .iter()
            .map(|&lambda| {
                (
                    RunConfig {
                        lambda,
                        ..cfg.clone()
                    },
                    cfg.k,
                )
            })
            .collect(),
        AblationGrid::K => K_SWEEP
            .iter()
            .map(|&k| {
                (
                    RunConfig {
                        k: 10,
                        ..cfg.clone()
                    },
                    k,
                )
            })
            .collect(),
    }
}

/// What determines a trained re-ranker: sample construction and the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct TrainKey {
    k: usize,
    qci: bool,
    dp: bool,
    gold_first: bool,
    lambda_bits: u64,
}

impl TrainKey {
    fn of(cfg: &RunConfig) -> Self {
        TrainKey {
            k: cfg.k,
            qci: cfg.toggles.qci,
            dp: cfg.toggles.dp,
            gold_first: cfg.toggles.gold_first,
            lambda_bits: cfg.effective_lambda().to_bits(),
        }
    }
}

pub fn ablate(cfg: &RunConfig, grid: AblationGrid) -> Result<Vec<AblationRow>> {
    ablate_points(cfg, expand_grid(cfg, grid))
}

/// Evaluates each `(training config, eval K)` point against the trained KGE in
/// `out_dir`, retraining the re-ranker only when a training-side setting changes.
pub fn ablate_points(cfg: &RunConfig, points: Vec<(RunConfig, usize)>) -> Result<Vec<AblationRow>> {
    let run = || -> Result<Vec<AblationRow>> {
        write_config(cfg)?;
        let kg = load_dataset(&cfg.dataset_dir, cfg.kind)?;
        let kge = load_kge(cfg, &kg)?;
        let with_index = points.iter().any(|(c, _)| c.toggles.qp || c.toggles.cp);
        let ctx = EvalContext::new(cfg, &kg, &kge, with_index)?;
        let mut models: HashMap<TrainKey, RerankerModel> = HashMap::new();
        let mut rows = Vec::with_capacity(points.len());
        for (train_cfg, eval_k) in points {
            let needs_model = reranks(&train_cfg.toggles)
                && train_cfg
                    .generator_cmd
                    .as_ref()
                    .is_none_or(|c| c.is_empty());
            let key = TrainKey::of(&train_cfg);
            if needs_model && !models.contains_key(&key) {
                let set = build_training_samples(&kg, &kge, &train_cfg.samples())?;
                let (model, _) = fit_reranker(&train_cfg, &kg, &set.samples)?;
                models.insert(key, model);
            }
            let eval_cfg = RunConfig {
                k: eval_k,
                ..train_cfg.clone()
            };
            let report = ctx.rerank(&eval_cfg, models.get(&key))?;
            info!(key = %train_cfg.toggles.key(), eval_k, mrr = report.metrics.mrr, "ablation point");
            rows.push(AblationRow {
                key: train_cfg.toggles.key(),
                toggles: train_cfg.toggles,
                train_k: train_cfg.k,
                eval_k,
                lambda: train_cfg.effective_lambda(),
                metrics: report.metrics,
                outcomes: report.outcomes,
            });
        }
        write_file(&out_path(cfg, ABLATION_FILE), &jsonl(&rows)?)?;
        Ok(rows)
    };
    run().map_err(|e| e.in_stage("ablate"))
}
