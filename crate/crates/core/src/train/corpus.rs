//! Corpus generation and line-delimited JSON serialization.
//!
//! Scenes for the train/val/test splits come from disjoint seed streams;
//! rasters are never stored, they re-render from the scene on load. See
//! `docs/data_format.md` for the record schema.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenEncoders, VeKind, VisualTokenSet};
use crate::rng::Rng;
use crate::scene::{
    generate_scene, is_resample_signal, make_matching_example, make_qa_example, render, Scene,
    TaskExample, TaskKind, Vocabulary,
};
use crate::train::config::ExperimentConfig;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn stream_offset(&self) -> u64 {
        match self {
            Split::Train => 0x1000_0000,
            Split::Val => 0x2000_0000,
            Split::Test => 0x3000_0000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub task: TaskKind,
    pub vocab: Vocabulary,
    pub scenes: BTreeMap<u64, Scene>,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[TaskExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn scene(&self, id: u64) -> Result<&Scene> {
        self.scenes
            .get(&id)
            .ok_or_else(|| CoreError::Data(format!("scene {id} missing from corpus")))
    }

    /// Generate a full corpus from the experiment config; deterministic.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Corpus> {
        cfg.validate()?;
        let vocab = Vocabulary::new();
        let mut scenes = BTreeMap::new();
        let mut splits: BTreeMap<Split, Vec<TaskExample>> = BTreeMap::new();

        let sizes = [
            (Split::Train, cfg.train_examples),
            (Split::Val, cfg.val_examples),
            (Split::Test, cfg.test_examples),
        ];
        let mut example_id = 0u64;
        for (split, size) in sizes {
            let mut split_scenes = Vec::with_capacity(size);
            let mut attempt = 0u64;
            // One scene per example; QA scenes that admit no unambiguous
            // question are resampled from the same stream.
            let mut pending: Vec<Scene> = Vec::with_capacity(size);
            while pending.len() < size {
                let scene_seed = cfg
                    .corpus_seed
                    .wrapping_mul(0x9e37_79b9)
                    .wrapping_add(split.stream_offset())
                    .wrapping_add(attempt);
                attempt += 1;
                let scene = generate_scene(scene_seed, &cfg.scene)?;
                pending.push(scene);
            }

            let mut rng = Rng::new(cfg.corpus_seed).child(split.stream_offset());
            let mut examples = Vec::with_capacity(size);
            match cfg.task {
                TaskKind::Qa => {
                    let mut i = 0;
                    while examples.len() < size {
                        let scene = &pending[i.min(pending.len() - 1)];
                        match make_qa_example(example_id, scene, &vocab, &mut rng) {
                            Ok(ex) => {
                                examples.push(ex);
                                split_scenes.push(scene.clone());
                                example_id += 1;
                                i += 1;
                            }
                            Err(e) if is_resample_signal(&e) => {
                                // replace this scene from the stream
                                let scene_seed = cfg
                                    .corpus_seed
                                    .wrapping_mul(0x9e37_79b9)
                                    .wrapping_add(split.stream_offset())
                                    .wrapping_add(attempt);
                                attempt += 1;
                                let slot = i.min(pending.len() - 1);
                                pending[slot] = generate_scene(scene_seed, &cfg.scene)?;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                TaskKind::Matching => {
                    for scene in &pending {
                        let ex = make_matching_example(example_id, scene, &pending, &vocab, &mut rng)?;
                        examples.push(ex);
                        example_id += 1;
                    }
                    split_scenes = pending;
                }
            }
            for s in &split_scenes {
                scenes.insert(s.scene_id, s.clone());
            }
            splits.insert(split, examples);
        }

        Ok(Corpus {
            task: cfg.task,
            vocab,
            scenes,
            train: splits.remove(&Split::Train).unwrap_or_default(),
            val: splits.remove(&Split::Val).unwrap_or_default(),
            test: splits.remove(&Split::Test).unwrap_or_default(),
        })
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusRecord {
    Meta { task: TaskKind, vocab: Vec<String> },
    Scene { scene: Scene },
    Example { split: Split, example: TaskExample },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub task: TaskKind,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub scene_count: usize,
    pub vocab_size: usize,
    pub config_hash: String,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_MANIFEST: &str = "manifest.json";

pub fn save_corpus(dir: &Path, corpus: &Corpus, config_hash: &str) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(CORPUS_FILE))?;
    let mut write = |rec: &CorpusRecord| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    };
    write(&CorpusRecord::Meta {
        task: corpus.task,
        vocab: (0..corpus.vocab.len()).map(|i| corpus.vocab.word(i).to_string()).collect(),
    })?;
    for scene in corpus.scenes.values() {
        write(&CorpusRecord::Scene { scene: scene.clone() })?;
    }
    for (split, examples) in [
        (Split::Train, &corpus.train),
        (Split::Val, &corpus.val),
        (Split::Test, &corpus.test),
    ] {
        for ex in examples {
            write(&CorpusRecord::Example { split, example: ex.clone() })?;
        }
    }
    let manifest = CorpusManifest {
        task: corpus.task,
        train_examples: corpus.train.len(),
        val_examples: corpus.val.len(),
        test_examples: corpus.test.len(),
        scene_count: corpus.scenes.len(),
        vocab_size: corpus.vocab.len(),
        config_hash: config_hash.to_string(),
    };
    fs::write(
        dir.join(CORPUS_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(CORPUS_FILE);
    if !path.exists() {
        return Err(CoreError::MissingInput(format!("corpus file {}", path.display())));
    }
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut task = None;
    let mut vocab = Vocabulary::new();
    let mut scenes = BTreeMap::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusRecord>(&line)? {
            CorpusRecord::Meta { task: t, vocab: words } => {
                task = Some(t);
                let fresh = Vocabulary::new();
                let expected: Vec<String> =
                    (0..fresh.len()).map(|i| fresh.word(i).to_string()).collect();
                if words != expected {
                    return Err(CoreError::Incompatible(
                        "corpus vocabulary disagrees with this build".into(),
                    ));
                }
                vocab = fresh;
            }
            CorpusRecord::Scene { scene } => {
                scenes.insert(scene.scene_id, scene);
            }
            CorpusRecord::Example { split, example } => match split {
                Split::Train => train.push(example),
                Split::Val => val.push(example),
                Split::Test => test.push(example),
            },
        }
    }
    vocab.reindex();
    Ok(Corpus {
        task: task.ok_or_else(|| CoreError::Data("corpus missing meta record".into()))?,
        vocab,
        scenes,
        train,
        val,
        test,
    })
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(CORPUS_MANIFEST);
    if !path.exists() {
        return Err(CoreError::MissingInput(format!("corpus manifest {}", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Encoded corpus: frozen token sets per scene, shared across runs
// ---------------------------------------------------------------------------

/// Frozen-encoder outputs for every corpus scene and requested kind.
#[derive(Debug, Clone, Default)]
pub struct EncodedCorpus {
    sets: BTreeMap<(u64, VeKind), VisualTokenSet>,
}

impl EncodedCorpus {
    pub fn build(corpus: &Corpus, encoders: &FrozenEncoders, kinds: &[VeKind]) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for scene in corpus.scenes.values() {
            let raster = render(scene);
            for &kind in kinds {
                let set = encoders.encode(kind, &raster, scene)?;
                sets.insert((scene.scene_id, kind), set);
            }
        }
        Ok(EncodedCorpus { sets })
    }

    pub fn get(&self, scene_id: u64, kind: VeKind) -> Result<&VisualTokenSet> {
        self.sets.get(&(scene_id, kind)).ok_or_else(|| {
            CoreError::Data(format!("no encoded {kind} tokens for scene {scene_id}"))
        })
    }

    /// Token sets for one example's image, in the model's encoder order.
    pub fn sets_for<'a>(
        &'a self,
        scene_id: u64,
        kinds: &[VeKind],
    ) -> Result<Vec<(VeKind, &'a VisualTokenSet)>> {
        kinds
            .iter()
            .map(|&k| self.get(scene_id, k).map(|s| (k, s)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            train_examples: 12,
            val_examples: 4,
            test_examples: 6,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_config();
        let a = Corpus::generate(&cfg).unwrap();
        let b = Corpus::generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.scenes.len(), b.scenes.len());
    }

    #[test]
    fn corpus_roundtrips_through_jsonl() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("vef-corpus-{}", std::process::id()));
        let manifest = save_corpus(&dir, &corpus, &cfg.config_hash()).unwrap();
        assert_eq!(manifest.train_examples, 12);
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(corpus.train, loaded.train);
        assert_eq!(corpus.val, loaded.val);
        assert_eq!(corpus.test, loaded.test);
        assert_eq!(corpus.scenes, loaded.scenes);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn matching_split_scenes_are_disjoint() {
        let cfg = ExperimentConfig {
            task: TaskKind::Matching,
            ..tiny_config()
        };
        let corpus = Corpus::generate(&cfg).unwrap();
        let train_ids: Vec<u64> = corpus.train.iter().map(|e| e.caption_scene_id).collect();
        let test_ids: Vec<u64> = corpus.test.iter().map(|e| e.caption_scene_id).collect();
        for id in &test_ids {
            assert!(!train_ids.contains(id), "scene {id} leaks across splits");
        }
    }

    #[test]
    fn text_stays_within_max_sequence() {
        let cfg = ExperimentConfig { task: TaskKind::Matching, ..tiny_config() };
        let corpus = Corpus::generate(&cfg).unwrap();
        for ex in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            assert!(ex.text.len() <= cfg.max_text_len);
            assert!(ex.text.iter().all(|&t| t < corpus.vocab.len()));
        }
    }
}
