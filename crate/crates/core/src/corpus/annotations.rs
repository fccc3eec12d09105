use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bidirectional tag/image incidence. Tags are kept in sorted order; each
/// tag's image list and each image's tag list are sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationIndex {
    num_images: usize,
    tags: Vec<String>,
    tag_to_images: Vec<Vec<usize>>,
    image_to_tags: Vec<Vec<usize>>,
    lookup: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    image_id: String,
    tags: Vec<String>,
}

/// Tags are compared case-insensitively and with surrounding whitespace
/// stripped.
pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase()
}

impl AnnotationIndex {
    /// Builds the index from per-image tag lists (`per_image.len()` images).
    /// Tags are normalized; duplicates on one image collapse.
    pub fn from_image_tags<S: AsRef<str>>(per_image: &[Vec<S>]) -> Result<Self> {
        let mut normalized: Vec<BTreeSet<String>> = Vec::with_capacity(per_image.len());
        for (i, tags) in per_image.iter().enumerate() {
            let mut set = BTreeSet::new();
            for t in tags {
                let t = normalize_tag(t.as_ref());
                if t.is_empty() {
                    return Err(Error::EmptyTag(i.to_string()));
                }
                set.insert(t);
            }
            normalized.push(set);
        }
        Ok(Self::from_normalized(normalized))
    }

    fn from_normalized(per_image: Vec<BTreeSet<String>>) -> Self {
        let vocab: BTreeSet<&String> = per_image.iter().flatten().collect();
        let tags: Vec<String> = vocab.into_iter().cloned().collect();
        let lookup: HashMap<String, usize> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut tag_to_images = vec![Vec::new(); tags.len()];
        let mut image_to_tags = Vec::with_capacity(per_image.len());
        for (img, set) in per_image.iter().enumerate() {
            let ids: Vec<usize> = set.iter().map(|t| lookup[t]).collect();
            for &t in &ids {
                tag_to_images[t].push(img);
            }
            image_to_tags.push(ids);
        }
        Self {
            num_images: per_image.len(),
            tags,
            tag_to_images,
            image_to_tags,
            lookup,
        }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn tag_name(&self, tag: usize) -> &str {
        &self.tags[tag]
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.lookup.get(tag).copied()
    }

    /// Images carrying `tag`, ascending.
    pub fn images_of(&self, tag: usize) -> &[usize] {
        &self.tag_to_images[tag]
    }

    /// Tag indices carried by `image`, ascending.
    pub fn tags_of(&self, image: usize) -> &[usize] {
        &self.image_to_tags[image]
    }

    pub fn tag_names_of(&self, image: usize) -> impl Iterator<Item = &str> {
        self.image_to_tags[image].iter().map(|&t| self.tags[t].as_str())
    }

    pub fn has_tag(&self, image: usize, tag: usize) -> bool {
        self.image_to_tags[image].binary_search(&tag).is_ok()
    }

    pub fn has_tag_named(&self, image: usize, tag: &str) -> bool {
        self.tag_index(tag).is_some_and(|t| self.has_tag(image, t))
    }

    /// Sub-corpus over the given images, renumbered in the given order.
    /// Tags that lose all their images disappear from the vocabulary.
    pub fn select_images(&self, indices: &[usize]) -> Result<Self> {
        let mut per_image = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.num_images {
                return Err(Error::Shape(format!(
                    "image {i} out of range for {} images",
                    self.num_images
                )));
            }
            per_image.push(self.tag_names_of(i).map(str::to_owned).collect());
        }
        Ok(Self::from_normalized(per_image))
    }
}

/// Reads a JSON-lines annotation file. `image_ids` is the canonical row
/// order of the bound feature matrix; images without a line carry no tags.
/// Repeated lines for one image are merged.
pub fn load_annotations(path: impl AsRef<Path>, image_ids: &[String]) -> Result<AnnotationIndex> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let position: HashMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut per_image = vec![BTreeSet::new(); image_ids.len()];
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let &img = position
            .get(parsed.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(parsed.image_id.clone()))?;
        for t in &parsed.tags {
            let t = normalize_tag(t);
            if t.is_empty() {
                return Err(Error::EmptyTag(parsed.image_id.clone()));
            }
            per_image[img].insert(t);
        }
    }
    Ok(AnnotationIndex::from_normalized(per_image))
}

/// Writes one line per image that carries at least one tag.
pub fn write_annotations(
    index: &AnnotationIndex,
    image_ids: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if image_ids.len() != index.num_images() {
        return Err(Error::Shape(format!(
            "{} ids for {} annotated images",
            image_ids.len(),
            index.num_images()
        )));
    }
    let mut out = Vec::new();
    for (img, id) in image_ids.iter().enumerate() {
        if index.tags_of(img).is_empty() {
            continue;
        }
        let line = AnnotationLine {
            image_id: id.clone(),
            tags: index.tag_names_of(img).map(str::to_owned).collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
