use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

/// Word embeddings for a tag vocabulary. All vectors share `dim` and none is
/// all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

fn multi_word_parts(tag: &str) -> impl Iterator<Item = &str> {
    tag.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|w| !w.is_empty())
}

/// Requested vocabulary for `tags`, including the component words of
/// multi-word tags so the averaging fallback in [`WordVectorTable::resolve`]
/// has something to work with.
pub fn expand_vocabulary<'a>(tags: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for t in tags {
        out.insert(t.to_string());
        let parts: Vec<&str> = multi_word_parts(t).collect();
        if parts.len() > 1 {
            out.extend(parts.into_iter().map(str::to_owned));
        }
    }
    out
}

impl WordVectorTable {
    pub fn new(dim: usize, entries: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dim must be >= 1".into()));
        }
        for (w, v) in &entries {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for {w:?} has {} coordinates, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::ZeroNorm(format!("word vector for {w:?}")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.entries
    }

    /// Exact lookup, falling back to the mean of the available per-word
    /// vectors of a multi-word tag. `None` if nothing usable is found.
    pub fn resolve(&self, tag: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.entries.get(tag) {
            return Some(v.clone());
        }
        let parts: Vec<&[f64]> = multi_word_parts(tag).filter_map(|w| self.get(w)).collect();
        if parts.is_empty() {
            return None;
        }
        let mut mean = vec![0.0; self.dim];
        for p in &parts {
            for (m, x) in mean.iter_mut().zip(p.iter()) {
                *m += x;
            }
        }
        let n = parts.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        if mean.iter().all(|x| *x == 0.0) {
            None
        } else {
            Some(mean)
        }
    }
}

/// Loads a word2vec text export, keeping only words in `vocabulary`.
/// File words are lowercased before matching; the first occurrence wins.
/// Returns the table and the requested words that had no vector.
pub fn load_word_vectors(
    path: impl AsRef<Path>,
    vocabulary: &BTreeSet<String>,
) -> Result<(WordVectorTable, BTreeSet<String>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing \"N D\" header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut fields = header.split_whitespace();
    let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(n), Some(d), None) => (
            n.parse::<usize>()
                .map_err(|e| parse_err(1, format!("bad word count: {e}")))?,
            d.parse::<usize>()
                .map_err(|e| parse_err(1, format!("bad dimension: {e}")))?,
        ),
        _ => return Err(parse_err(1, format!("expected \"N D\" header, got {header:?}"))),
    };
    if dim == 0 {
        return Err(parse_err(1, "dimension must be >= 1".into()));
    }

    let mut entries = BTreeMap::new();
    let mut seen = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let mut fields = line.split_whitespace();
        let word = fields.next().unwrap_or_default().to_lowercase();
        let coords: Vec<&str> = fields.collect();
        if coords.len() != dim {
            return Err(parse_err(
                lineno,
                format!("{} coordinates, header declares {dim}", coords.len()),
            ));
        }
        if !vocabulary.contains(&word) || entries.contains_key(&word) {
            continue;
        }
        let v = coords
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, format!("unparsable number: {e}")))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(lineno, "non-finite coordinate".into()));
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroNorm(format!("word vector for {word:?}")));
        }
        entries.insert(word, v);
    }
    if seen != count {
        return Err(parse_err(
            1,
            format!("header declares {count} words, file holds {seen}"),
        ));
    }
    let missing = vocabulary
        .iter()
        .filter(|w| !entries.contains_key(*w))
        .cloned()
        .collect();
    Ok((WordVectorTable::new(dim, entries)?, missing))
}

/// Writes the table in word2vec text format. Coordinates use the shortest
/// representation that parses back to the same `f64`.
pub fn write_word_vectors(table: &WordVectorTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{} {}\n", table.len(), table.dim());
    for (w, v) in &table.entries {
        out.push_str(w);
        for x in v {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
