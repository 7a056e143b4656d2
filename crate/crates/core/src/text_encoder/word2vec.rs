//! Skip-gram with negative sampling, used to warm-start the word embedding table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipGramConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub window: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    /// Half-width of the uniform initialisation when pretraining is disabled.
    pub init_scale: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 5,
            window: 3,
            negatives: 5,
            learning_rate: 0.025,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddingTable<T> {
    /// `vocab_size × w`; the padding row is all zeros.
    pub matrix: Matrix<T>,
    pub trainable: bool,
}

/// Trains input vectors with skip-gram and negative sampling over `corpus`
/// (one id sequence per sentence). Padding ids are skipped.
pub fn pretrain_word_embeddings<T: Scalar>(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    width: usize,
    cfg: &SkipGramConfig,
    seed: u64,
) -> Result<WordEmbeddingTable<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !cfg.enabled {
        let mut matrix = Matrix::random_uniform(vocab_size, width, cfg.init_scale, &mut rng);
        matrix.row_mut(PAD_ID).fill(T::zero());
        return Ok(WordEmbeddingTable {
            matrix,
            trainable: true,
        });
    }
    let total_tokens: usize = corpus
        .iter()
        .map(|s| s.iter().filter(|&&t| t != PAD_ID).count())
        .sum();
    if total_tokens == 0 {
        return Err(Error::Empty("skip-gram corpus has no tokens".into()));
    }
    if let Some(&id) = corpus.iter().flatten().find(|&&t| t >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: vocab_size,
        });
    }

    // unigram^0.75 cumulative distribution for negatives
    let mut counts = vec![0f64; vocab_size];
    for &t in corpus.iter().flatten() {
        if t != PAD_ID {
            counts[t] += 1.0;
        }
    }
    let mut cdf: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    for i in 1..cdf.len() {
        cdf[i] += cdf[i - 1];
    }
    let mass = *cdf.last().expect("non-empty vocabulary");

    let mut input = Matrix::<f64>::random_uniform(vocab_size, width, 0.5 / width as f64, &mut rng);
    let mut output = Matrix::<f64>::zeros(vocab_size, width);
    let steps_total = (cfg.epochs * total_tokens).max(1) as f64;
    let mut step = 0usize;
    let mut grad_in = vec![0.0; width];

    for _ in 0..cfg.epochs {
        for sentence in corpus {
            let words: Vec<usize> = sentence.iter().copied().filter(|&t| t != PAD_ID).collect();
            for (i, &center) in words.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - step as f64 / steps_total).max(1e-4);
                step += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(words.len() - 1);
                for (j, &context) in words.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad_in.fill(0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let u = rng.random::<f64>() * mass;
                            let neg = cdf.partition_point(|&c| c <= u).min(vocab_size - 1);
                            if neg == context {
                                continue;
                            }
                            (neg, 0.0)
                        };
                        let score = sigmoid(dot(input.row(center), output.row(target)));
                        let gscale = lr * (label - score);
                        for d in 0..width {
                            grad_in[d] += gscale * output[(target, d)];
                            output[(target, d)] += gscale * input[(center, d)];
                        }
                    }
                    for (v, &gi) in input.row_mut(center).iter_mut().zip(&grad_in) {
                        *v += gi;
                    }
                }
            }
        }
    }
    input.row_mut(PAD_ID).fill(0.0);
    Ok(WordEmbeddingTable {
        matrix: input.cast(),
        trainable: true,
    })
}
