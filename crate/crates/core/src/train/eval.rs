//! Evaluation: task accuracy/loss for both tasks, and recall@1 over
//! candidate pools for matching (caption->image and image->caption
//! directions, averaged).

use serde::{Deserialize, Serialize};

use crate::model::{ForwardOptions, FusionModel};
use crate::scene::{TaskExample, TaskKind};
use crate::tensor::Graph;
use crate::{CoreError, Result};

use super::corpus::{Corpus, EncodedCorpus};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    /// Recall@1 averaged over both retrieval directions; matching only.
    pub r_at_1: Option<f64>,
}

impl EvalMetrics {
    /// Headline metric: R@1 for matching (retrieval convention), accuracy
    /// otherwise.
    pub fn headline(&self) -> f64 {
        self.r_at_1.unwrap_or(self.accuracy)
    }
}

/// Caption->image and image->caption recall@1 for one pool; `scores[i][j]`
/// scores caption `i` against image `j` and the true pairs sit on the
/// diagonal. Argmax ties break toward the lowest index.
pub fn pool_recall_at_1(scores: &[Vec<f64>]) -> (f64, f64) {
    let n = scores.len();
    assert!(n >= 2, "pool of {n} is not rankable");
    let mut c2i = 0usize;
    for (i, row) in scores.iter().enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        c2i += (best == i) as usize;
    }
    let mut i2c = 0usize;
    for j in 0..n {
        let mut best = 0;
        for (i, row) in scores.iter().enumerate() {
            if row[j] > scores[best][j] {
                best = i;
            }
        }
        i2c += (best == j) as usize;
    }
    (c2i as f64 / n as f64, i2c as f64 / n as f64)
}

/// Forward one example and return (loss, predicted label, match score).
fn score_example(
    model: &FusionModel,
    encoded: &EncodedCorpus,
    text: &[usize],
    image_scene_id: u64,
    label: usize,
    drop_ve: Option<crate::encoders::VeKind>,
) -> Result<(f64, usize, f64)> {
    let sets = encoded.sets_for(image_scene_id, &model.config.active_ves)?;
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        text,
        &sets,
        ForwardOptions { drop_ve, ..ForwardOptions::default() },
    )?;
    let loss = model.task_loss(&mut g, out.logits, label)?;
    let logits = g.data(out.logits);
    let match_score = if logits.len() == 2 { logits[1] - logits[0] } else { 0.0 };
    let predicted = model.predict(&g, out.logits);
    Ok((g.data(loss)[0], predicted, match_score))
}

/// Accuracy + mean loss on `examples`; for matching additionally R@1 over
/// pools of `pool_size` built from the split's positive caption-image
/// pairs. `drop_ve` evaluates with one encoder's segment removed.
pub fn evaluate(
    model: &FusionModel,
    corpus: &Corpus,
    encoded: &EncodedCorpus,
    examples: &[TaskExample],
    task: TaskKind,
    pool_size: usize,
    drop_ve: Option<crate::encoders::VeKind>,
) -> Result<EvalMetrics> {
    if pool_size < 2 {
        return Err(CoreError::Config(format!("pool size {pool_size} below 2")));
    }
    if examples.is_empty() {
        return Err(CoreError::Data("evaluation over an empty example set".into()));
    }

    use rayon::prelude::*;
    let results: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            score_example(model, encoded, &ex.text, ex.image_scene_id, ex.label, drop_ve)
                .map(|(loss, pred, _)| (loss, (pred == ex.label) as usize))
        })
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|(l, _)| l).sum::<f64>() / examples.len() as f64;
    let accuracy = results.iter().map(|(_, c)| *c).sum::<usize>() as f64 / examples.len() as f64;

    let r_at_1 = match task {
        TaskKind::Qa => None,
        TaskKind::Matching => {
            // Rank over caption/scene pairs; every example's caption
            // describes caption_scene_id regardless of its match label.
            let pairs: Vec<(&[usize], u64)> = examples
                .iter()
                .map(|e| (e.text.as_slice(), e.caption_scene_id))
                .collect();
            let mut both_dirs = Vec::new();
            for pool in pairs.chunks(pool_size) {
                if pool.len() < 2 {
                    continue;
                }
                let scores: Vec<Vec<f64>> = pool
                    .par_iter()
                    .map(|(text, _)| {
                        pool.iter()
                            .map(|(_, image_id)| {
                                score_example(model, encoded, text, *image_id, 0, drop_ve)
                                    .map(|(_, _, s)| s)
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?;
                let (c2i, i2c) = pool_recall_at_1(&scores);
                both_dirs.push((c2i + i2c) / 2.0);
            }
            if both_dirs.is_empty() {
                None
            } else {
                Some(both_dirs.iter().sum::<f64>() / both_dirs.len() as f64)
            }
        }
    };
    let _ = corpus;
    Ok(EvalMetrics { accuracy, loss, r_at_1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scorer_reaches_one() {
        // identity-dominant score matrix
        let n = 4;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 5.0 } else { -1.0 }).collect())
            .collect();
        assert_eq!(pool_recall_at_1(&scores), (1.0, 1.0));
    }

    #[test]
    fn random_scorer_is_near_chance_over_many_pools() {
        let mut rng = crate::rng::Rng::new(99);
        let pool = 32;
        let pools = 400;
        let mut hits = 0.0;
        for _ in 0..pools {
            let scores: Vec<Vec<f64>> = (0..pool)
                .map(|_| (0..pool).map(|_| rng.normal()).collect())
                .collect();
            let (a, b) = pool_recall_at_1(&scores);
            hits += (a + b) / 2.0;
        }
        let mean = hits / pools as f64;
        let chance = 1.0 / pool as f64;
        assert!((mean - chance).abs() < 0.01, "mean {mean} vs chance {chance}");
    }

    #[test]
    fn hand_ranked_three_pool_fixture() {
        // caption 0 prefers image 2, caption 1 prefers image 1,
        // caption 2 prefers image 1: only caption 1 is correct in c->i.
        let scores = vec![
            vec![0.1, 0.5, 0.9],
            vec![0.2, 0.8, 0.1],
            vec![0.3, 0.7, 0.2],
        ];
        let (c2i, i2c) = pool_recall_at_1(&scores);
        assert!((c2i - 1.0 / 3.0).abs() < 1e-12);
        // image 0: best caption = 2 (0.3); image 1: caption 1 (0.8);
        // image 2: caption 0 (0.9) -> captions 1 and... image 2 matched by
        // caption 2? no: argmax over column 2 is caption 0 (0.9) != 2.
        // correct: image 1 only.
        assert!((i2c - 1.0 / 3.0).abs() < 1e-12);
    }
}
