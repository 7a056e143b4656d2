use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Pair,
    Triplet,
}

/// One training example, as indices into the training recipes.
///
/// The image of recipe `i` is the feature referenced by recipe `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Pair {
        recipe: usize,
        image: usize,
        label: i32,
    },
    /// Text anchor `query`; its own image is the positive.
    Triplet {
        query: usize,
        negative: usize,
        semantic_positive: usize,
        semantic_negative: usize,
    },
}

/// Draws pairs or triplets over a fixed set of class-labelled items.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    classes: Vec<usize>,
    by_class: BTreeMap<usize, Vec<usize>>,
    mode: SampleMode,
    positive_fraction: f64,
}

impl BatchSampler {
    pub fn new(classes: Vec<usize>, mode: SampleMode, positive_fraction: f64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 training recipes, have {}",
                classes.len()
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        if mode == SampleMode::Triplet {
            if by_class.len() < 2 {
                return Err(Error::Sampling("triplets need at least 2 classes".into()));
            }
            if let Some((c, _)) = by_class.iter().find(|(_, m)| m.len() < 2) {
                return Err(Error::Sampling(format!(
                    "class {c} has fewer than 2 members"
                )));
            }
        }
        Ok(Self {
            classes,
            by_class,
            mode,
            positive_fraction,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Uniform index in `0..n` other than `skip`.
    fn other<R: Rng + ?Sized>(rng: &mut R, n: usize, skip: usize) -> usize {
        let j = rng.random_range(0..n - 1);
        if j >= skip {
            j + 1
        } else {
            j
        }
    }

    fn draw_one<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> Draw {
        let n = self.classes.len();
        match self.mode {
            SampleMode::Pair => {
                if rng.random::<f64>() < self.positive_fraction {
                    Draw::Pair {
                        recipe: anchor,
                        image: anchor,
                        label: 1,
                    }
                } else {
                    Draw::Pair {
                        recipe: anchor,
                        image: Self::other(rng, n, anchor),
                        label: -1,
                    }
                }
            }
            SampleMode::Triplet => {
                let class = self.classes[anchor];
                let same = &self.by_class[&class];
                let own = same
                    .iter()
                    .position(|&i| i == anchor)
                    .expect("anchor indexed");
                let semantic_positive = same[Self::other(rng, same.len(), own)];
                let outside = n - same.len();
                let mut k = rng.random_range(0..outside);
                let mut semantic_negative = 0;
                for (&c, members) in &self.by_class {
                    if c == class {
                        continue;
                    }
                    if k < members.len() {
                        semantic_negative = members[k];
                        break;
                    }
                    k -= members.len();
                }
                Draw::Triplet {
                    query: anchor,
                    negative: Self::other(rng, n, anchor),
                    semantic_positive,
                    semantic_negative,
                }
            }
        }
    }

    /// One draw per anchor, in order.
    pub fn sample_batch<R: Rng + ?Sized>(&self, anchors: &[usize], rng: &mut R) -> Vec<Draw> {
        anchors.iter().map(|&a| self.draw_one(a, rng)).collect()
    }

    /// Shuffled anchor order for one epoch, cut into batches.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<Draw>> {
        let mut order: Vec<usize> = (0..self.classes.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| self.sample_batch(chunk, rng))
            .collect()
    }
}
