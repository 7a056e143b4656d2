use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::clean::{filter_noisy_instructions, tokenize};
use super::Recipe;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary with the reserved entries followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()],
            ids: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if !v.ids.contains_key(&t) && t != PAD_TOKEN && t != UNK_TOKEN {
                v.ids.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One `token<TAB>id` line per entry, reserved entries included.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{id}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let malformed = |field: &str, message: String| Error::Malformed {
                path: path.to_path_buf(),
                line: n + 1,
                field: field.to_owned(),
                message,
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| malformed("line", "expected token<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|e| malformed("id", format!("{e}")))?;
            entries.push((id, tok.to_owned()));
        }
        entries.sort();
        for (expected, (id, _)) in entries.iter().enumerate() {
            if *id != expected {
                return Err(Error::Malformed {
                    path: path.to_path_buf(),
                    line: 0,
                    field: "id".into(),
                    message: format!("ids are not contiguous: expected {expected}, found {id}"),
                });
            }
        }
        if entries.len() < 2 || entries[PAD_ID].1 != PAD_TOKEN || entries[UNK_ID].1 != UNK_TOKEN {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: 1,
                field: "token".into(),
                message: "ids 0 and 1 must be the reserved <pad> and <unk> entries".into(),
            });
        }
        Ok(Self::from_tokens(
            entries.into_iter().skip(2).map(|(_, t)| t),
        ))
    }
}

/// Counts word tokens across cleaned recipes and keeps those seen at least
/// `min_freq` times, ordered by frequency (descending) then lexicographically.
pub fn build_vocabulary(corpus: &[Recipe], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("vocabulary corpus has no recipes".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for recipe in corpus {
        let Some(clean) = filter_noisy_instructions(recipe).kept() else {
            continue;
        };
        for line in clean.ingredients.iter().chain(&clean.instructions) {
            for tok in tokenize(line) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    Ok(vocabulary_from_counts(counts, min_freq))
}

pub(crate) fn vocabulary_from_counts(
    counts: HashMap<String, usize>,
    min_freq: usize,
) -> Vocabulary {
    let mut kept: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect()
    }

    #[test]
    fn threshold_sends_rare_tokens_to_unknown() {
        let v = vocabulary_from_counts(counts(&[("mix", 5), ("stir", 5), ("zest", 1)]), 2);
        assert!(v.contains("mix") && v.contains("stir"));
        assert_eq!(v.id_of("zest"), UNK_ID);
        // equal frequency falls back to lexicographic order
        assert_eq!(v.id_of("mix"), 2);
        assert_eq!(v.id_of("stir"), 3);
    }

    #[test]
    fn min_freq_one_keeps_everything() {
        let v = vocabulary_from_counts(counts(&[("mix", 5), ("stir", 5), ("zest", 1)]), 1);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn build_is_deterministic() {
        let r = Recipe {
            id: "a".into(),
            title: "a".into(),
            ingredients: vec!["1 cup sugar".into(), "2 eggs".into()],
            instructions: vec!["Beat the eggs.".into(), "Add sugar, beat again.".into()],
            class_id: 0,
            image_feature_ref: "a".into(),
        };
        let corpus = vec![r.clone(), r];
        assert_eq!(
            build_vocabulary(&corpus, 1).unwrap(),
            build_vocabulary(&corpus, 1).unwrap()
        );
        assert!(build_vocabulary(&[], 1).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = Vocabulary::from_tokens(["b", "a", "c"]);
        v.write(&path).unwrap();
        assert_eq!(Vocabulary::read(&path).unwrap(), v);
    }
}
