//! Subcommand implementations: thin sequential drivers over the core
//! library; all heavy lifting (and parallelism) lives there.

use std::path::{Path, PathBuf};

use vefusion_core::encoders::{FrozenEncoders, VeKind};
use vefusion_core::model::load_checkpoint;
use vefusion_core::report::{analyze as run_analysis, write_bundle, write_svg_files, AnalyzeOptions, AnalysisReport, DropChoice, LayerMode};
use vefusion_core::train::{
    load_config, load_corpus, run_matrix, save_corpus, train_single, Corpus, EncodedCorpus,
    ExperimentConfig,
};
use vefusion_core::{CoreError, Result};

use crate::OUT_ENV;

fn resolve_out(out: Option<PathBuf>, default_leaf: &str) -> Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) => Ok(PathBuf::from(root).join(default_leaf)),
        None => Err(CoreError::Config(format!(
            "no --out given and ${OUT_ENV} is not set"
        ))),
    }
}

fn parse_ves(spec: &str) -> Result<Vec<VeKind>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(VeKind::parse)
        .collect()
}

fn encoded_for(cfg: &ExperimentConfig, corpus: &Corpus, kinds: &[VeKind]) -> Result<EncodedCorpus> {
    let encoders = FrozenEncoders::new(cfg.scene.attributes, cfg.ve_config.clone())?;
    EncodedCorpus::build(corpus, &encoders, kinds)
}

pub fn generate(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = resolve_out(out, "corpus")?;
    let corpus = Corpus::generate(&cfg)?;
    let manifest = save_corpus(&out, &corpus, &cfg.config_hash())?;
    println!(
        "wrote corpus to {}: {} train / {} val / {} test examples, {} scenes",
        out.display(),
        manifest.train_examples,
        manifest.val_examples,
        manifest.test_examples,
        manifest.scene_count
    );
    Ok(())
}

pub fn train(
    config: &Path,
    corpus_dir: &Path,
    out: Option<PathBuf>,
    ves: Option<&str>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let out = resolve_out(out, "train")?;
    let corpus = load_corpus(corpus_dir)?;
    if corpus.task != cfg.task {
        return Err(CoreError::Incompatible(format!(
            "corpus task {:?} does not match config task {:?}",
            corpus.task, cfg.task
        )));
    }
    let combo = match ves {
        Some(spec) => parse_ves(spec)?,
        None => cfg.ves.clone(),
    };
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let encoded = encoded_for(&cfg, &corpus, &combo)?;

    let outcome = train_single(&cfg, &combo, seed, &corpus, &encoded)?;
    let base = out.join("checkpoint");
    let meta = vefusion_core::model::CheckpointMeta {
        model: vefusion_core::train::model_config_for(&cfg, &combo, corpus.vocab.len()),
        ve_config: cfg.ve_config.clone(),
        task: cfg.task,
        seed,
        config_hash: cfg.config_hash(),
    };
    vefusion_core::model::save_checkpoint(&base, &outcome.model, &meta)?;
    std::fs::write(
        out.join("train_log.json"),
        serde_json_string(&outcome.log)?,
    )?;
    println!(
        "seed {seed} [{}] best val acc {:.4}; test acc {:.4}{}; checkpoint at {}",
        combo.iter().map(|v| v.as_str()).collect::<Vec<_>>().join("+"),
        outcome.best_val_accuracy,
        outcome.test.accuracy,
        outcome
            .test
            .r_at_1
            .map(|r| format!(", R@1 {r:.4}"))
            .unwrap_or_default(),
        base.display()
    );
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(CoreError::from)
}

pub fn train_matrix(
    config: &Path,
    corpus_dir: &Path,
    out: Option<PathBuf>,
    ves: Option<&str>,
    seeds: Option<&str>,
    resume: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(spec) = ves {
        cfg.ves = parse_ves(spec)?;
    }
    if let Some(spec) = seeds {
        cfg.seeds = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CoreError::Config(format!("bad seed `{s}`")))
            })
            .collect::<Result<_>>()?;
    }
    cfg.validate()?;
    let out = resolve_out(out, "matrix")?;
    let corpus = load_corpus(corpus_dir)?;
    if corpus.task != cfg.task {
        return Err(CoreError::Incompatible(
            "corpus task does not match config task".into(),
        ));
    }
    let encoded = encoded_for(&cfg, &corpus, &cfg.ves.clone())?;

    let outcome = run_matrix(&cfg, &corpus, &encoded, &out, resume)?;
    println!(
        "matrix complete: {} cells trained, {} resumed",
        outcome.executed.len(),
        outcome.skipped.len()
    );
    print!("{}", std::fs::read_to_string(out.join("results.txt"))?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn analyze(
    checkpoint: &Path,
    corpus_dir: &Path,
    out: Option<PathBuf>,
    sample: usize,
    layer: &str,
    drop_ve: Option<&str>,
    dump_attention: usize,
) -> Result<()> {
    let out = resolve_out(out, "analysis")?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(corpus_dir)?;
    if corpus.task != meta.task {
        return Err(CoreError::Incompatible(format!(
            "checkpoint was trained for task {:?}, corpus holds {:?}",
            meta.task, corpus.task
        )));
    }
    if corpus.vocab.len() != model.config.vocab_size {
        return Err(CoreError::Incompatible(
            "checkpoint vocabulary size does not match the corpus".into(),
        ));
    }
    let layer_mode = match layer {
        "last" => LayerMode::Last,
        "all" => LayerMode::All,
        other => {
            return Err(CoreError::Config(format!(
                "unknown layer mode `{other}` (expected last|all)"
            )))
        }
    };
    let drop_choice = match drop_ve {
        None => None,
        Some("first") => Some(DropChoice::First),
        Some("second") => Some(DropChoice::Second),
        Some(other) => {
            return Err(CoreError::Config(format!(
                "unknown drop target `{other}` (expected first|second)"
            )))
        }
    };

    let encoders = FrozenEncoders::new(
        vefusion_core::scene::AttributeSpace::default(),
        meta.ve_config.clone(),
    )?;
    let encoded = EncodedCorpus::build(&corpus, &encoders, &model.config.active_ves)?;
    let opts = AnalyzeOptions {
        sample,
        layer_mode,
        drop_ve: drop_choice,
        dump_attention,
        ..AnalyzeOptions::default()
    };
    let report = run_analysis(
        &model,
        &corpus,
        &encoded,
        corpus.split(vefusion_core::train::Split::Test),
        &opts,
        &meta.config_hash,
        meta.seed,
        Some(&out.join("attention_dumps")),
    )?;
    write_bundle(&out, &report)?;
    println!(
        "analysis over {} examples written to {} (layer mode: {})",
        report.provenance.n_examples,
        out.display(),
        layer_mode.label()
    );
    Ok(())
}

pub fn report(analysis_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let summary = analysis_dir.join("summary.json");
    if !summary.exists() {
        return Err(CoreError::MissingInput(format!("{}", summary.display())));
    }
    let report: AnalysisReport = serde_json::from_str(&std::fs::read_to_string(summary)?)?;
    let out = out.unwrap_or_else(|| analysis_dir.to_path_buf());
    std::fs::create_dir_all(&out)?;
    write_svg_files(&out, &report)?;
    println!("re-rendered charts into {}", out.display());
    Ok(())
}
