//! Run configuration: a JSON file of optional keys resolved against
//! per-dataset defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Toggles};
use crate::kg::{KgKind, Split};
use crate::kge::KgeTrainConfig;
use crate::rerank::{RerankTrainConfig, SampleConfig};

/// Fully resolved configuration, echoed to `config.json` by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub kind: KgKind,
    pub out_dir: PathBuf,
    pub k: usize,
    pub lambda: f64,
    pub k_q: usize,
    pub k_c: usize,
    pub theta: f64,
    pub d: usize,
    pub d_r: usize,
    pub hidden: usize,
    pub kge_epochs: usize,
    pub kge_batch: usize,
    pub rr_epochs: usize,
    pub batch: usize,
    pub lr_kge: f64,
    pub lr_rr: f64,
    pub seed: u64,
    pub embed_buckets: usize,
    pub toggles: Toggles,
    /// Command line of an external embedding process, replacing the hashed embedder.
    pub embedder_cmd: Option<Vec<String>>,
    /// Command line of an external generation process, replacing the built-in re-ranker at eval.
    pub generator_cmd: Option<Vec<String>>,
}

/// Toggle overrides; absent keys keep the default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleOverrides {
    pub qci: Option<bool>,
    pub cci: Option<bool>,
    pub qp: Option<bool>,
    pub cp: Option<bool>,
    pub cg: Option<bool>,
    pub dp: Option<bool>,
    pub gold_first: Option<bool>,
}

impl ToggleOverrides {
    pub fn apply(&self, t: &mut Toggles) {
        let set = |dst: &mut bool, src: Option<bool>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        set(&mut t.qci, self.qci);
        set(&mut t.cci, self.cci);
        set(&mut t.qp, self.qp);
        set(&mut t.cp, self.cp);
        set(&mut t.cg, self.cg);
        set(&mut t.dp, self.dp);
        set(&mut t.gold_first, self.gold_first);
    }
}

/// Partial configuration as read from a file or built from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset_dir: Option<PathBuf>,
    pub kind: Option<KgKind>,
    pub out_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub k_q: Option<usize>,
    pub k_c: Option<usize>,
    pub theta: Option<f64>,
    pub d: Option<usize>,
    pub d_r: Option<usize>,
    pub hidden: Option<usize>,
    pub kge_epochs: Option<usize>,
    pub kge_batch: Option<usize>,
    pub rr_epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr_kge: Option<f64>,
    pub lr_rr: Option<f64>,
    pub seed: Option<u64>,
    pub embed_buckets: Option<usize>,
    pub toggles: Option<ToggleOverrides>,
    pub embedder_cmd: Option<Vec<String>>,
    pub generator_cmd: Option<Vec<String>>,
}

impl ConfigFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Keys set in `other` win.
    pub fn merge(self, other: ConfigFile) -> ConfigFile {
        let toggles = match (self.toggles, other.toggles) {
            (Some(a), Some(b)) => Some(ToggleOverrides {
                qci: b.qci.or(a.qci),
                cci: b.cci.or(a.cci),
                qp: b.qp.or(a.qp),
                cp: b.cp.or(a.cp),
                cg: b.cg.or(a.cg),
                dp: b.dp.or(a.dp),
                gold_first: b.gold_first.or(a.gold_first),
            }),
            (a, b) => b.or(a),
        };
        ConfigFile {
            dataset_dir: other.dataset_dir.or(self.dataset_dir),
            kind: other.kind.or(self.kind),
            out_dir: other.out_dir.or(self.out_dir),
            k: other.k.or(self.k),
            lambda: other.lambda.or(self.lambda),
            k_q: other.k_q.or(self.k_q),
            k_c: other.k_c.or(self.k_c),
            theta: other.theta.or(self.theta),
            d: other.d.or(self.d),
            d_r: other.d_r.or(self.d_r),
            hidden: other.hidden.or(self.hidden),
            kge_epochs: other.kge_epochs.or(self.kge_epochs),
            kge_batch: other.kge_batch.or(self.kge_batch),
            rr_epochs: other.rr_epochs.or(self.rr_epochs),
            batch: other.batch.or(self.batch),
            lr_kge: other.lr_kge.or(self.lr_kge),
            lr_rr: other.lr_rr.or(self.lr_rr),
            seed: other.seed.or(self.seed),
            embed_buckets: other.embed_buckets.or(self.embed_buckets),
            toggles,
            embedder_cmd: other.embedder_cmd.or(self.embedder_cmd),
            generator_cmd: other.generator_cmd.or(self.generator_cmd),
        }
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let dataset_dir = self
            .dataset_dir
            .ok_or_else(|| Error::invalid("dataset_dir is required"))?;
        let out_dir = self.out_dir.unwrap_or_else(|| PathBuf::from("out"));
        let defaults = dataset_defaults(&dataset_dir);
        let kind = self.kind.unwrap_or(defaults.kind);
        let mut toggles = Toggles::default();
        if let Some(t) = self.toggles {
            t.apply(&mut toggles);
        }
        let cfg = RunConfig {
            dataset_dir,
            kind,
            out_dir,
            k: self.k.unwrap_or(defaults.k),
            lambda: self.lambda.unwrap_or(defaults.lambda),
            k_q: self.k_q.unwrap_or(3),
            k_c: self.k_c.unwrap_or(3),
            theta: self.theta.unwrap_or(0.8),
            d: self.d.unwrap_or(256),
            d_r: self.d_r.unwrap_or(32),
            hidden: self.hidden.unwrap_or(32),
            kge_epochs: self.kge_epochs.unwrap_or(100),
            kge_batch: self.kge_batch.unwrap_or(128),
            rr_epochs: self.rr_epochs.unwrap_or(3),
            batch: self.batch.unwrap_or(16),
            lr_kge: self.lr_kge.unwrap_or(0.005),
            lr_rr: self.lr_rr.unwrap_or(1e-4),
            seed: self.seed.unwrap_or(0),
            embed_buckets: self.embed_buckets.unwrap_or(512),
            toggles,
            embedder_cmd: self.embedder_cmd,
            generator_cmd: self.generator_cmd,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-dataset K, λ and graph kind, keyed on the dataset directory name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetDefaults {
    pub kind: KgKind,
    pub k: usize,
    pub lambda: f64,
}

pub fn dataset_defaults(dataset_dir: &Path) -> DatasetDefaults {
    let name = dataset_dir
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    // wiki27k and fb15k-237-n share the fallback
    let (kind, k, lambda) = if name.contains("reverb20k") {
        (KgKind::Open, 30, 0.3)
    } else if name.contains("reverb45k") {
        (KgKind::Open, 30, 1.0)
    } else {
        (KgKind::Curated, 20, 0.1)
    };
    DatasetDefaults { kind, k, lambda }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!(
                "theta must be in [0, 1], got {}",
                self.theta
            )));
        }
        for (name, v) in [
            ("k", self.k),
            ("k_q", self.k_q),
            ("k_c", self.k_c),
            ("d", self.d),
            ("d_r", self.d_r),
            ("hidden", self.hidden),
            ("kge_batch", self.kge_batch),
            ("batch", self.batch),
            ("embed_buckets", self.embed_buckets),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr_kge", self.lr_kge), ("lr_rr", self.lr_rr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if ![10, 20, 30].contains(&self.k) {
            warn!(k = self.k, "K outside the usual {{10, 20, 30}}");
        }
        Ok(())
    }

    /// λ actually used in training: zero when the ranking loss is toggled off.
    pub fn effective_lambda(&self) -> f64 {
        if self.toggles.cci { self.lambda } else { 0.0 }
    }

    pub fn kge_train(&self) -> KgeTrainConfig {
        KgeTrainConfig {
            dim: self.d,
            epochs: self.kge_epochs,
            lr: self.lr_kge,
            batch_size: self.kge_batch,
            seed: self.seed,
        }
    }

    pub fn samples(&self) -> SampleConfig {
        SampleConfig {
            k: self.k,
            seed: self.seed,
            qci: self.toggles.qci,
            dp: self.toggles.dp,
            gold_first: self.toggles.gold_first,
        }
    }

    pub fn rerank_train(&self) -> RerankTrainConfig {
        RerankTrainConfig {
            epochs: self.rr_epochs,
            batch: self.batch,
            lr: self.lr_rr,
            lambda: self.effective_lambda(),
            token_dim: self.d_r,
            hidden: self.hidden,
            seed: self.seed,
        }
    }

    pub fn eval(&self, split: Split) -> EvalConfig {
        EvalConfig {
            k: self.k,
            k_q: self.k_q,
            k_c: self.k_c,
            theta: self.theta,
            toggles: self.toggles,
            split,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ConfigFile {
        ConfigFile {
            dataset_dir: Some("data/ReVerb45K".into()),
            out_dir: Some("out".into()),
            ..ConfigFile::default()
        }
    }

    #[test]
    fn dataset_defaults_apply() {
        let cfg = base().resolve().unwrap();
        assert_eq!((cfg.k, cfg.lambda, cfg.kind), (30, 1.0, KgKind::Open));
        assert_eq!(
            (
                cfg.k_q,
                cfg.k_c,
                cfg.theta,
                cfg.rr_epochs,
                cfg.batch,
                cfg.lr_rr
            ),
            (3, 3, 0.8, 3, 16, 1e-4)
        );
        let wiki = ConfigFile {
            dataset_dir: Some("x/wiki27k".into()),
            ..base()
        };
        let cfg = wiki.resolve().unwrap();
        assert_eq!((cfg.k, cfg.lambda, cfg.kind), (20, 0.1, KgKind::Curated));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ConfigFile>(r#"{"k": 10, "bogus": 1}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<ConfigFile>(r#"{"toggles": {"qcix": true}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn flags_win() {
        let file = ConfigFile {
            k: Some(10),
            toggles: Some(ToggleOverrides {
                cg: Some(false),
                qp: Some(false),
                ..Default::default()
            }),
            ..base()
        };
        let flags = ConfigFile {
            k: Some(20),
            toggles: Some(ToggleOverrides {
                cg: Some(true),
                ..Default::default()
            }),
            ..Default::default()
        };
        let cfg = file.merge(flags).resolve().unwrap();
        assert_eq!(cfg.k, 20);
        assert!(cfg.toggles.cg);
        assert!(!cfg.toggles.qp);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = base().resolve().unwrap();
        let json = cfg.to_json().unwrap();
        let again: ConfigFile = serde_json::from_str(&json).unwrap();
        assert_eq!(again.resolve().unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(
            ConfigFile {
                lambda: Some(1.5),
                ..base()
            }
            .resolve()
            .is_err()
        );
        assert!(
            ConfigFile {
                theta: Some(-0.1),
                ..base()
            }
            .resolve()
            .is_err()
        );
        assert!(
            ConfigFile {
                k: Some(0),
                ..base()
            }
            .resolve()
            .is_err()
        );
        assert!(
            ConfigFile {
                dataset_dir: None,
                ..base()
            }
            .resolve()
            .is_err()
        );
    }

    #[test]
    fn cci_off_zeroes_lambda() {
        let cfg = ConfigFile {
            toggles: Some(ToggleOverrides {
                cci: Some(false),
                ..Default::default()
            }),
            ..base()
        }
        .resolve()
        .unwrap();
        assert_eq!(cfg.effective_lambda(), 0.0);
    }
}
