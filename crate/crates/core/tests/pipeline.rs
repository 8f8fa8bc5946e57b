use std::path::Path;

use kgrerank::config::{ConfigFile, RunConfig, ToggleOverrides};
use kgrerank::kg::write_dataset;
use kgrerank::pipeline::{self, AblationGrid};
use kgrerank::synthetic::{SyntheticConfig, generate};
use kgrerank::{Toggles, load_dataset};

fn small_config(root: &Path, toggles: ToggleOverrides) -> RunConfig {
    let data = root.join("synthetic");
    if !data.exists() {
        write_dataset(&generate(&SyntheticConfig::default()).unwrap().kg, &data).unwrap();
    }
    ConfigFile {
        dataset_dir: Some(data),
        out_dir: Some(root.join("out")),
        k: Some(10),
        d: Some(8),
        kge_epochs: Some(10),
        rr_epochs: Some(1),
        lr_rr: Some(0.01),
        toggles: Some(toggles),
        ..ConfigFile::default()
    }
    .resolve()
    .unwrap()
}

fn all_off() -> ToggleOverrides {
    ToggleOverrides {
        qci: Some(false),
        cci: Some(false),
        qp: Some(false),
        cp: Some(false),
        cg: Some(false),
        dp: Some(false),
        gold_first: None,
    }
}

#[test]
fn toggles_off_reduce_to_base() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path(), all_off());
    let summary = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(summary.base, summary.reranked);
    assert!(!cfg.out_dir.join(pipeline::RERANKER_CKPT).exists());
    assert!(summary.outcomes.is_empty());
}

#[test]
fn stages_write_reloadable_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(
        root.path(),
        ToggleOverrides {
            qp: Some(true),
            cp: Some(true),
            ..ToggleOverrides::default()
        },
    );
    let summary = pipeline::run_pipeline(&cfg).unwrap();
    for f in [
        pipeline::CONFIG_FILE,
        pipeline::KGE_CKPT,
        pipeline::KGE_LOG,
        pipeline::SAMPLES_FILE,
        pipeline::RERANKER_CKPT,
        pipeline::RERANK_LOG,
        pipeline::METRICS_FILE,
        pipeline::METRICS_BASE_FILE,
        pipeline::METRICS_TEXT,
    ] {
        assert!(cfg.out_dir.join(f).exists(), "{f} missing");
    }

    let echoed = ConfigFile::read(cfg.out_dir.join(pipeline::CONFIG_FILE))
        .unwrap()
        .resolve()
        .unwrap();
    assert_eq!(echoed, cfg);

    let kg = load_dataset(&cfg.dataset_dir, cfg.kind).unwrap();
    let samples = pipeline::load_samples(&cfg).unwrap();
    assert_eq!(samples.len(), 2 * kg.train.len());

    // evaluating from checkpoints reproduces the pipeline's numbers
    let kge = pipeline::load_kge(&cfg, &kg).unwrap();
    let model = pipeline::load_reranker(&cfg).unwrap();
    let again = pipeline::eval_stage(&cfg, &kg, &kge, Some(&model)).unwrap();
    assert_eq!(again, summary);
    assert_eq!(summary.outcomes.get("ok"), Some(&(2 * kg.test.len())));
}

#[test]
fn ablation_reuses_kge_and_reports_rows() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(
        root.path(),
        ToggleOverrides {
            qp: Some(false),
            cp: Some(false),
            ..Default::default()
        },
    );

    let err = pipeline::ablate(&cfg, AblationGrid::Lambda).unwrap_err();
    assert_eq!(err.stage(), Some("ablate"));

    pipeline::run_pipeline(&cfg).unwrap();
    let points: Vec<(RunConfig, usize)> = [true, false]
        .iter()
        .map(|&cci| {
            let toggles = Toggles { cci, ..cfg.toggles };
            (
                RunConfig {
                    toggles,
                    ..cfg.clone()
                },
                cfg.k,
            )
        })
        .collect();
    let rows = pipeline::ablate_points(&cfg, points).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].key, "110010");
    assert_eq!(rows[1].key, "100010");
    assert_eq!(rows[1].lambda, 0.0);

    let k_rows = pipeline::ablate(&cfg, AblationGrid::K).unwrap();
    assert_eq!(
        k_rows
            .iter()
            .map(|r| (r.train_k, r.eval_k))
            .collect::<Vec<_>>(),
        vec![(10, 10), (10, 20), (10, 30)]
    );
    let lines = std::fs::read_to_string(cfg.out_dir.join(pipeline::ABLATION_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn external_generator_refusal_counts_as_omission() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small_config(
        root.path(),
        ToggleOverrides {
            qp: Some(false),
            cp: Some(false),
            ..Default::default()
        },
    );
    let kg = load_dataset(&cfg.dataset_dir, cfg.kind).unwrap();
    let kge = pipeline::train_kge_stage(&cfg, &kg).unwrap();
    cfg.generator_cmd = Some(vec![
        "sh".into(),
        "-c".into(),
        r#"cat > /dev/null; echo '{"text": "I am sorry, but I do not have enough information"}'"#
            .into(),
    ]);
    let mut small = kg.clone();
    small.test.truncate(3);
    let summary = pipeline::eval_stage(&cfg, &small, &kge, None).unwrap();
    assert_eq!(summary.outcomes.get("omission"), Some(&6));
}
