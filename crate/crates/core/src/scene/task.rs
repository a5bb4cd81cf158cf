//! Task examples: image-caption matching and attribute QA, both carrying
//! grounded phrase spans (phrase -> gold object box).

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::rng::Rng;
use crate::{CoreError, Result};

use super::{Scene, Vocabulary, COLOR_NAMES, SHAPE_NAMES, SIZE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Matching,
    Qa,
}

impl TaskKind {
    pub fn label_count(&self, colors: usize) -> usize {
        match self {
            TaskKind::Matching => 2,
            TaskKind::Qa => colors,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Matching => "matching",
            TaskKind::Qa => "qa",
        }
    }
}

/// A grounded phrase: the span's last token (index within the text
/// segment) plus the gold box of the object the phrase denotes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub last_token_index: usize,
    pub object_id: usize,
    pub gold_box: BBox<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub example_id: u64,
    pub kind: TaskKind,
    pub text: Vec<usize>,
    /// Scene shown to the model.
    pub image_scene_id: u64,
    /// Scene the text describes (differs from `image_scene_id` only for
    /// matching negatives).
    pub caption_scene_id: u64,
    pub label: usize,
    /// Grounded spans; empty for matching negatives, whose caption does
    /// not describe the shown image.
    pub phrases: Vec<PhraseSpan>,
}

fn mention_tokens(vocab: &Vocabulary, obj: &super::SceneObject) -> Result<Vec<usize>> {
    Ok(vec![
        vocab.id("a")?,
        vocab.id(SIZE_NAMES[obj.size])?,
        vocab.id(COLOR_NAMES[obj.color])?,
        vocab.id(SHAPE_NAMES[obj.shape])?,
    ])
}

/// Caption enumerating every scene object:
/// `a scene with a small red circle and a large blue square ...`.
/// Returns the token ids and one span per object (last token = shape word).
pub fn caption_with_spans(
    scene: &Scene,
    vocab: &Vocabulary,
) -> Result<(Vec<usize>, Vec<PhraseSpan>)> {
    let mut text = vec![vocab.id("a")?, vocab.id("scene")?, vocab.id("with")?];
    let mut spans = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        if i > 0 {
            text.push(vocab.id("and")?);
        }
        text.extend(mention_tokens(vocab, obj)?);
        spans.push(PhraseSpan {
            last_token_index: text.len() - 1,
            object_id: obj.object_id,
            gold_box: obj.bbox,
        });
    }
    Ok((text, spans))
}

/// Image-caption matching example. With probability one half the shown
/// image is swapped for a different scene from the corpus and the label
/// flips to 0.
pub fn make_matching_example(
    example_id: u64,
    scene: &Scene,
    corpus: &[Scene],
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<TaskExample> {
    if corpus.len() < 2 {
        return Err(CoreError::Data(format!(
            "matching needs at least 2 corpus scenes, got {}",
            corpus.len()
        )));
    }
    let (text, spans) = caption_with_spans(scene, vocab)?;
    let positive = rng.bernoulli(0.5);
    if positive {
        Ok(TaskExample {
            example_id,
            kind: TaskKind::Matching,
            text,
            image_scene_id: scene.scene_id,
            caption_scene_id: scene.scene_id,
            label: 1,
            phrases: spans,
        })
    } else {
        let other = loop {
            let cand = rng.choose(corpus);
            if cand.scene_id != scene.scene_id {
                break cand;
            }
        };
        Ok(TaskExample {
            example_id,
            kind: TaskKind::Matching,
            text,
            image_scene_id: other.scene_id,
            caption_scene_id: scene.scene_id,
            label: 0,
            phrases: Vec::new(),
        })
    }
}

/// Force a specific branch of the matching generator (used by tests).
pub fn make_matching_example_forced(
    example_id: u64,
    scene: &Scene,
    corpus: &[Scene],
    vocab: &Vocabulary,
    rng: &mut Rng,
    force_positive: bool,
) -> Result<TaskExample> {
    // Draw until the bernoulli lands on the requested branch so the rest
    // of the stream stays exercised.
    loop {
        let mut probe = rng.clone();
        if probe.bernoulli(0.5) == force_positive {
            return make_matching_example(example_id, scene, corpus, vocab, rng);
        }
        rng.next_u64();
    }
}

/// Raised when a scene admits no unambiguous question; callers resample.
pub fn is_resample_signal(err: &CoreError) -> bool {
    matches!(err, CoreError::Generation(msg) if msg.contains("resample"))
}

/// Attribute-QA example: `what color is the <shape> ?` (optionally with a
/// size qualifier). The chosen descriptor matches exactly one scene
/// object, so the answer is unique and the span grounds to that object.
pub fn make_qa_example(
    example_id: u64,
    scene: &Scene,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<TaskExample> {
    if scene.objects.is_empty() {
        return Err(CoreError::Data("qa over an empty scene".into()));
    }

    // Candidate descriptors: (object, with_size). Valid when the
    // descriptor matches exactly one object in the scene.
    let mut candidates = Vec::new();
    for obj in &scene.objects {
        let same_shape =
            scene.objects.iter().filter(|o| o.shape == obj.shape).count();
        if same_shape == 1 {
            candidates.push((obj.object_id, false));
        }
        let same_shape_size = scene
            .objects
            .iter()
            .filter(|o| o.shape == obj.shape && o.size == obj.size)
            .count();
        if same_shape_size == 1 {
            candidates.push((obj.object_id, true));
        }
    }
    if candidates.is_empty() {
        return Err(CoreError::Generation(
            "no unambiguous question constructible; resample the scene".into(),
        ));
    }

    let &(object_id, with_size) = rng.choose(&candidates);
    let obj = scene.object(object_id).expect("candidate object exists");

    let mut text = vec![vocab.id("what")?, vocab.id("color")?, vocab.id("is")?, vocab.id("the")?];
    if with_size {
        text.push(vocab.id(SIZE_NAMES[obj.size])?);
    }
    text.push(vocab.id(SHAPE_NAMES[obj.shape])?);
    let last_token_index = text.len() - 1;
    text.push(vocab.id("?")?);

    Ok(TaskExample {
        example_id,
        kind: TaskKind::Qa,
        text,
        image_scene_id: scene.scene_id,
        caption_scene_id: scene.scene_id,
        label: obj.color,
        phrases: vec![PhraseSpan { last_token_index, object_id, gold_box: obj.bbox }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn fixtures(n: usize) -> (Vec<Scene>, Vocabulary) {
        let config = SceneConfig::default();
        let scenes = (0..n as u64)
            .map(|s| generate_scene(s, &config).unwrap())
            .collect();
        (scenes, Vocabulary::new())
    }

    #[test]
    fn forced_positive_keeps_pair_and_spans() {
        let (scenes, vocab) = fixtures(8);
        let mut rng = Rng::new(5);
        let ex =
            make_matching_example_forced(0, &scenes[0], &scenes, &vocab, &mut rng, true).unwrap();
        assert_eq!(ex.label, 1);
        assert_eq!(ex.image_scene_id, scenes[0].scene_id);
        assert_eq!(ex.phrases.len(), scenes[0].objects.len());
    }

    #[test]
    fn forced_negative_swaps_image() {
        let (scenes, vocab) = fixtures(8);
        let mut rng = Rng::new(6);
        let ex =
            make_matching_example_forced(0, &scenes[0], &scenes, &vocab, &mut rng, false).unwrap();
        assert_eq!(ex.label, 0);
        assert_ne!(ex.image_scene_id, scenes[0].scene_id);
    }

    #[test]
    fn matching_positive_rate_is_half() {
        let (scenes, vocab) = fixtures(32);
        let mut rng = Rng::new(7);
        let n = 10_000;
        let mut positives = 0;
        for i in 0..n {
            let scene = &scenes[i % scenes.len()];
            let ex = make_matching_example(i as u64, scene, &scenes, &vocab, &mut rng).unwrap();
            positives += ex.label;
        }
        let frac = positives as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "positive fraction {frac}");
    }

    #[test]
    fn matching_needs_two_scenes() {
        let (scenes, vocab) = fixtures(1);
        let mut rng = Rng::new(8);
        assert!(matches!(
            make_matching_example(0, &scenes[0], &scenes, &vocab, &mut rng),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn qa_single_object_scene() {
        let config = SceneConfig { min_objects: 1, max_objects: 1, ..SceneConfig::default() };
        let vocab = Vocabulary::new();
        let scene = generate_scene(11, &config).unwrap();
        let mut rng = Rng::new(1);
        let ex = make_qa_example(0, &scene, &vocab, &mut rng).unwrap();
        assert_eq!(ex.label, scene.objects[0].color);
        assert_eq!(ex.phrases.len(), 1);
        assert_eq!(ex.phrases[0].gold_box, scene.objects[0].bbox);
        // span's last token is the shape word
        assert_eq!(
            vocab.word(ex.text[ex.phrases[0].last_token_index]),
            SHAPE_NAMES[scene.objects[0].shape]
        );
    }

    #[test]
    fn qa_is_deterministic_given_seed() {
        let (scenes, vocab) = fixtures(4);
        let a = make_qa_example(0, &scenes[1], &vocab, &mut Rng::new(77)).unwrap();
        let b = make_qa_example(0, &scenes[1], &vocab, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    /// Oracle: re-answer the question by direct scene inspection.
    fn reanswer(scene: &Scene, vocab: &Vocabulary, text: &[usize]) -> Option<usize> {
        let words: Vec<&str> = text.iter().map(|&t| vocab.word(t)).collect();
        // template: what color is the [size] shape ?
        let shape_word = words[words.len() - 2];
        let shape = SHAPE_NAMES.iter().position(|&s| s == shape_word)?;
        let size = if words.len() == 7 {
            SIZE_NAMES.iter().position(|&s| s == words[4])
        } else {
            None
        };
        let matches: Vec<_> = scene
            .objects
            .iter()
            .filter(|o| o.shape == shape && size.is_none_or(|s| o.size == s))
            .collect();
        if matches.len() == 1 {
            Some(matches[0].color)
        } else {
            None
        }
    }

    #[test]
    fn thousand_questions_survive_scene_inspection_oracle() {
        let config = SceneConfig::default();
        let vocab = Vocabulary::new();
        let mut made = 0;
        let mut seed = 0u64;
        while made < 1000 {
            let scene = generate_scene(seed, &config).unwrap();
            seed += 1;
            let mut rng = Rng::new(seed ^ 0xabcd);
            match make_qa_example(made, &scene, &vocab, &mut rng) {
                Ok(ex) => {
                    let oracle = reanswer(&scene, &vocab, &ex.text)
                        .expect("descriptor must be unambiguous");
                    assert_eq!(oracle, ex.label, "seed {seed}");
                    // the gold box must belong to the object the oracle found
                    let obj = scene.object(ex.phrases[0].object_id).unwrap();
                    assert_eq!(obj.bbox, ex.phrases[0].gold_box);
                    made += 1;
                }
                Err(e) if is_resample_signal(&e) => continue,
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn qa_answers_are_roughly_balanced() {
        let config = SceneConfig::default();
        let vocab = Vocabulary::new();
        let mut counts = vec![0usize; COLOR_NAMES.len()];
        let mut made = 0;
        let mut seed = 50_000u64;
        while made < 10_000 {
            let scene = generate_scene(seed, &config).unwrap();
            seed += 1;
            let mut rng = Rng::new(seed);
            if let Ok(ex) = make_qa_example(made, &scene, &vocab, &mut rng) {
                counts[ex.label] += 1;
                made += 1;
            }
        }
        let uniform = 10_000.0 / COLOR_NAMES.len() as f64;
        for (color, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - uniform).abs() / uniform;
            assert!(dev < 0.2, "answer class {color} off uniform by {dev:.3}");
        }
    }
}
