//! The experiment matrix: every non-empty encoder combination times every
//! seed, run as independent jobs with manifest-guarded idempotent resume.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{mean_std, SeedStats};
use crate::encoders::VeKind;
use crate::model::{save_checkpoint, CheckpointMeta};
use crate::Result;

use super::config::ExperimentConfig;
use super::corpus::{Corpus, EncodedCorpus};
use super::eval::EvalMetrics;
use super::{model_config_for, train_single};

/// One matrix cell: an encoder combination and a seed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub ves: Vec<VeKind>,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        let combo: Vec<&str> = self.ves.iter().map(|v| v.as_str()).collect();
        format!("{}_seed{}", combo.join("+"), self.seed)
    }
}

/// Written next to each cell's checkpoint; its presence (with a matching
/// config hash) marks the cell complete for `--resume`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellManifest {
    pub key: CellKey,
    pub config_hash: String,
    pub metrics: EvalMetrics,
    pub best_val_accuracy: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRow {
    pub ves: Vec<VeKind>,
    /// Per-seed headline metrics (accuracy, or R@1 for matching).
    pub per_seed: Vec<(u64, Option<EvalMetrics>)>,
    pub headline: Option<SeedStats>,
    pub accuracy: Option<SeedStats>,
    pub failed: bool,
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub rows: Vec<MatrixRow>,
    /// Cells actually trained this invocation (not resumed).
    pub executed: Vec<CellKey>,
    /// Cells skipped because a valid manifest already existed.
    pub skipped: Vec<CellKey>,
}

/// All non-empty subsets of `ves`, ordered singles first, then pairs,
/// then larger, preserving the configured encoder order inside each.
pub fn combinations(ves: &[VeKind]) -> Vec<Vec<VeKind>> {
    let n = ves.len();
    let mut combos: Vec<Vec<VeKind>> = Vec::new();
    for mask in 1u32..(1 << n) {
        let combo: Vec<VeKind> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ves[i]).collect();
        combos.push(combo);
    }
    combos.sort_by_key(|c| c.len());
    combos
}

fn manifest_path(out_dir: &Path, key: &CellKey) -> PathBuf {
    out_dir.join("cells").join(key.dir_name()).join("manifest.json")
}

pub fn cell_checkpoint_base(out_dir: &Path, key: &CellKey) -> PathBuf {
    out_dir.join("cells").join(key.dir_name()).join("checkpoint")
}

enum CellOutcome {
    Trained(CellManifest),
    Resumed(CellManifest),
    Failed(String),
}

fn run_cell(
    cfg: &ExperimentConfig,
    key: &CellKey,
    corpus: &Corpus,
    encoded: &EncodedCorpus,
    out_dir: &Path,
    resume: bool,
) -> CellOutcome {
    let m_path = manifest_path(out_dir, key);
    let hash = cfg.config_hash();
    if resume && m_path.exists() {
        match fs::read_to_string(&m_path)
            .map_err(crate::CoreError::from)
            .and_then(|s| serde_json::from_str::<CellManifest>(&s).map_err(Into::into))
        {
            Ok(manifest) if manifest.config_hash == hash => {
                return CellOutcome::Resumed(manifest);
            }
            _ => {} // stale or unreadable manifest: retrain
        }
    }

    let result = (|| -> Result<CellManifest> {
        let outcome = train_single(cfg, &key.ves, key.seed, corpus, encoded)?;
        let base = cell_checkpoint_base(out_dir, key);
        let meta = CheckpointMeta {
            model: model_config_for(cfg, &key.ves, corpus.vocab.len()),
            ve_config: cfg.ve_config.clone(),
            task: cfg.task,
            seed: key.seed,
            config_hash: hash.clone(),
        };
        save_checkpoint(&base, &outcome.model, &meta)?;
        let manifest = CellManifest {
            key: key.clone(),
            config_hash: hash.clone(),
            metrics: outcome.test,
            best_val_accuracy: outcome.best_val_accuracy,
            checkpoint: base,
        };
        if let Some(dir) = m_path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&m_path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    })();
    match result {
        Ok(m) => CellOutcome::Trained(m),
        Err(e) => {
            let msg = e.to_string();
            if let Some(dir) = m_path.parent() {
                let _ = fs::create_dir_all(dir);
                let _ = fs::write(dir.join("error.txt"), &msg);
            }
            CellOutcome::Failed(msg)
        }
    }
}

/// Train and evaluate every encoder combination over every seed. Cells run
/// as independent parallel jobs; a failed cell marks its row failed and
/// the run continues.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    encoded: &EncodedCorpus,
    out_dir: &Path,
    resume: bool,
) -> Result<MatrixOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let combos = combinations(&cfg.ves);
    let cells: Vec<CellKey> = combos
        .iter()
        .flat_map(|combo| {
            cfg.seeds.iter().map(|&seed| CellKey { ves: combo.clone(), seed })
        })
        .collect();

    let outcomes: Vec<(CellKey, CellOutcome)> = cells
        .par_iter()
        .map(|key| (key.clone(), run_cell(cfg, key, corpus, encoded, out_dir, resume)))
        .collect();

    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut rows = Vec::new();
    for combo in &combos {
        let mut per_seed = Vec::new();
        let mut failed = false;
        for &seed in &cfg.seeds {
            let key = CellKey { ves: combo.clone(), seed };
            let outcome = outcomes
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, o)| o)
                .expect("every cell ran");
            match outcome {
                CellOutcome::Trained(m) => {
                    executed.push(key.clone());
                    per_seed.push((seed, Some(m.metrics)));
                }
                CellOutcome::Resumed(m) => {
                    skipped.push(key.clone());
                    per_seed.push((seed, Some(m.metrics)));
                }
                CellOutcome::Failed(msg) => {
                    eprintln!("cell {} failed: {msg}", key.dir_name());
                    failed = true;
                    per_seed.push((seed, None));
                }
            }
        }
        let headlines: Vec<f64> = per_seed
            .iter()
            .filter_map(|(_, m)| m.map(|m| m.headline()))
            .collect();
        let accuracies: Vec<f64> = per_seed
            .iter()
            .filter_map(|(_, m)| m.map(|m| m.accuracy))
            .collect();
        rows.push(MatrixRow {
            ves: combo.clone(),
            per_seed,
            headline: (!headlines.is_empty()).then(|| mean_std(&headlines)),
            accuracy: (!accuracies.is_empty()).then(|| mean_std(&accuracies)),
            failed,
        });
    }

    let outcome = MatrixOutcome { rows, executed, skipped };
    write_results_tables(out_dir, cfg, &outcome)?;
    Ok(outcome)
}

/// Results table in CSV and aligned-text forms (mean ± std per row).
fn write_results_tables(out_dir: &Path, cfg: &ExperimentConfig, outcome: &MatrixOutcome) -> Result<()> {
    let metric_name = match cfg.task {
        crate::scene::TaskKind::Matching => "r_at_1",
        crate::scene::TaskKind::Qa => "accuracy",
    };
    let mut csv = String::from("ves,metric,mean,std,n,failed\n");
    for row in &outcome.rows {
        let combo: Vec<&str> = row.ves.iter().map(|v| v.as_str()).collect();
        let (mean, std, n) = row
            .headline
            .map(|s| (format!("{:.6}", s.mean), format!("{:.6}", s.std), s.n))
            .unwrap_or_else(|| ("".into(), "".into(), 0));
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            combo.join("+"),
            metric_name,
            mean,
            std,
            n,
            row.failed
        ));
    }
    fs::write(out_dir.join("results.csv"), &csv)?;

    let mut txt = format!("{:<24} {:>18} {:>8}\n", "encoders", metric_name, "status");
    for row in &outcome.rows {
        let combo: Vec<&str> = row.ves.iter().map(|v| v.as_str()).collect();
        let stat = row
            .headline
            .map(|s| format!("{:.4} ± {:.4}", s.mean, s.std))
            .unwrap_or_else(|| "-".into());
        let status = if row.failed { "FAILED" } else { "ok" };
        txt.push_str(&format!("{:<24} {:>18} {:>8}\n", combo.join("+"), stat, status));
    }
    fs::write(out_dir.join("results.txt"), &txt)?;
    Ok(())
}
