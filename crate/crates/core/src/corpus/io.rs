use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

use super::{Recipe, TokenizedRecipe};

/// One rejected line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub recipes: Vec<Recipe>,
    pub errors: Vec<RecordError>,
}

/// Reads a JSON-lines recipe corpus. Malformed lines are collected, not dropped silently.
pub fn load_corpus(path: &Path) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(r) => report.recipes.push(r),
            Err((field, message)) => report.errors.push(RecordError {
                line: n + 1,
                field,
                message,
            }),
        }
    }
    Ok(report)
}

fn parse_record(line: &str) -> std::result::Result<Recipe, (String, String)> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| ("record".to_owned(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ("record".to_owned(), "expected a JSON object".to_owned()))?;
    let field = |name: &str| {
        obj.get(name)
            .ok_or_else(|| (name.to_owned(), "missing field".to_owned()))
    };
    let string = |name: &str| -> std::result::Result<String, (String, String)> {
        field(name)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| (name.to_owned(), "expected a string".to_owned()))
    };
    let strings = |name: &str| -> std::result::Result<Vec<String>, (String, String)> {
        field(name)?
            .as_array()
            .ok_or_else(|| (name.to_owned(), "expected an array of strings".to_owned()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| (name.to_owned(), "expected an array of strings".to_owned()))
            })
            .collect()
    };
    let class_id = field("class_id")?.as_u64().ok_or_else(|| {
        (
            "class_id".to_owned(),
            "expected a non-negative integer".to_owned(),
        )
    })?;
    Ok(Recipe {
        id: string("id")?,
        title: string("title")?,
        ingredients: strings("ingredients")?,
        instructions: strings("instructions")?,
        class_id: class_id as usize,
        image_feature_ref: string("image_feature_ref")?,
    })
}

pub fn write_corpus(path: &Path, recipes: &[Recipe]) -> Result<()> {
    write_lines(path, recipes)
}

pub fn write_tokenized(path: &Path, recipes: &[TokenizedRecipe]) -> Result<()> {
    write_lines(path, recipes)
}

pub fn load_tokenized(path: &Path) -> Result<Vec<TokenizedRecipe>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            field: "record".into(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_lines<S: serde::Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = r#"{"id":"a","title":"Soup","ingredients":["1 leek"],"instructions":["Boil."],"class_id":3,"image_feature_ref":"a"}"#;

    fn write(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn three_valid_lines() {
        let (_d, p) = write(&format!("{GOOD}\n{GOOD}\n{GOOD}\n"));
        let rep = load_corpus(&p).unwrap();
        assert_eq!(rep.recipes.len(), 3);
        assert!(rep.errors.is_empty());
    }

    #[test]
    fn truncated_line_is_reported_with_line_number() {
        let truncated = &GOOD[..40];
        let (_d, p) = write(&format!("{GOOD}\n{truncated}\n{GOOD}\n"));
        let rep = load_corpus(&p).unwrap();
        assert_eq!(rep.recipes.len(), 2);
        assert_eq!(rep.errors.len(), 1);
        assert_eq!(rep.errors[0].line, 2);
    }

    #[test]
    fn wrong_field_type_names_the_field() {
        let bad = GOOD.replace("\"class_id\":3", "\"class_id\":\"three\"");
        let (_d, p) = write(&bad);
        let rep = load_corpus(&p).unwrap();
        assert_eq!(rep.errors[0].field, "class_id");
    }

    #[test]
    fn empty_file() {
        let (_d, p) = write("");
        assert_eq!(load_corpus(&p).unwrap(), LoadReport::default());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/corpus.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn write_then_load_round_trips(
            titles in prop::collection::vec("[ -~]{0,12}", 1..5),
            lines in prop::collection::vec("[ -~é\"\\\\]{1,16}", 1..4),
        ) {
            let recipes: Vec<Recipe> = titles
                .iter()
                .enumerate()
                .map(|(i, t)| Recipe {
                    id: format!("r{i}"),
                    title: t.clone(),
                    ingredients: lines.clone(),
                    instructions: lines.iter().rev().cloned().collect(),
                    class_id: i,
                    image_feature_ref: format!("img{i}"),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&path, &recipes).unwrap();
            let rep = load_corpus(&path).unwrap();
            prop_assert!(rep.errors.is_empty());
            prop_assert_eq!(rep.recipes, recipes);
        }
    }
}
