//! Tag-to-tag similarity. Visual similarity compares the feature point sets
//! of two tags' images with a modified Hausdorff distance; semantic
//! similarity is the cosine of their word vectors; the two are fused by a
//! convex weight.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_raw_matrix, write_raw_matrix, AnnotationIndex, FeatureMatrix, WordVectorTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    VisualDistance,
    Visual,
    Semantic,
    Joint,
}

impl MatrixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::VisualDistance => "visual-distance",
            MatrixKind::Visual => "visual",
            MatrixKind::Semantic => "semantic",
            MatrixKind::Joint => "joint",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "visual-distance" => MatrixKind::VisualDistance,
            "visual" => MatrixKind::Visual,
            "semantic" => MatrixKind::Semantic,
            "joint" => MatrixKind::Joint,
            _ => return None,
        })
    }
}

/// Dense symmetric tag-by-tag matrix. Similarity kinds live in `[0, 1]`
/// with a unit diagonal; the distance kind is nonnegative with a zero
/// diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    tags: Vec<String>,
    values: Vec<f64>,
    kind: MatrixKind,
}

impl SimilarityMatrix {
    pub fn new(tags: Vec<String>, values: Vec<f64>, kind: MatrixKind) -> Result<Self> {
        let m = Self { tags, values, kind };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tags.len();
        if self.values.len() != n * n {
            return Err(Error::Shape(format!(
                "{} values for {n} tags",
                self.values.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.get(i, j);
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                if v != self.get(j, i) {
                    return Err(Error::Shape(format!("asymmetric at ({i}, {j})")));
                }
            }
            let d = self.get(i, i);
            match self.kind {
                MatrixKind::VisualDistance => {
                    if d != 0.0 {
                        return Err(Error::Shape(format!("distance diagonal {d} at {i}")));
                    }
                }
                _ => {
                    if d != 1.0 {
                        return Err(Error::Shape(format!("similarity diagonal {d} at {i}")));
                    }
                }
            }
        }
        let in_range = |v: &f64| match self.kind {
            MatrixKind::VisualDistance => *v >= 0.0,
            _ => (0.0..=1.0).contains(v),
        };
        if let Some(p) = self.values.iter().position(|v| !in_range(v)) {
            return Err(Error::Shape(format!(
                "entry {} at ({}, {}) out of range for {} matrix",
                self.values[p],
                p / n,
                p % n,
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.tags.len() + j]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    /// Writes the matrix in the feature-file layout, with the tag order and
    /// kind recorded in the manifest. Values are stored as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.tags.len();
        write_raw_matrix(
            path.as_ref(),
            n,
            n,
            &self.values,
            None,
            Some(self.tags.clone()),
            Some(self.kind.as_str().to_string()),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (manifest, values) = read_raw_matrix(path)?;
        let tags = manifest
            .tags
            .ok_or_else(|| Error::Shape(format!("{} has no tag order", path.display())))?;
        if manifest.num_images != tags.len() || manifest.num_dims != tags.len() {
            return Err(Error::Shape(format!(
                "{}x{} matrix for {} tags",
                manifest.num_images,
                manifest.num_dims,
                tags.len()
            )));
        }
        let kind = manifest
            .kind
            .as_deref()
            .and_then(MatrixKind::parse)
            .ok_or_else(|| Error::Shape(format!("{} has no valid kind", path.display())))?;
        Self::new(tags, values, kind)
    }
}

/// Builds a symmetric matrix from an upper-triangle function, evaluated in
/// parallel.
fn symmetric_from<F>(n: usize, diagonal: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let upper: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| f(i, j))
        .collect::<Result<_>>()?;
    let mut values = vec![diagonal; n * n];
    for (&(i, j), v) in pairs.iter().zip(upper) {
        values[i * n + j] = v;
        values[j * n + i] = v;
    }
    Ok(values)
}

/// The feature rows of one tag's images.
#[derive(Debug, Clone)]
pub struct TagPointSet<'a> {
    pub tag: usize,
    pub points: Vec<&'a [f64]>,
}

impl<'a> TagPointSet<'a> {
    pub fn for_tag(features: &'a FeatureMatrix, annotations: &AnnotationIndex, tag: usize) -> Self {
        Self {
            tag,
            points: annotations
                .images_of(tag)
                .iter()
                .map(|&i| features.row(i))
                .collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.points.is_empty() {
            Err(Error::EmptyPointSet(self.tag.to_string()))
        } else {
            Ok(())
        }
    }
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn nearest_distances(a: &TagPointSet, b: &TagPointSet) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| {
            b.points
                .iter()
                .map(|q| euclidean(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Classical directed Hausdorff distance: max over `a` of the distance to
/// the nearest point of `b`. Kept as a reference kernel.
pub fn directed_hausdorff(a: &TagPointSet, b: &TagPointSet) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(nearest_distances(a, b).into_iter().fold(0.0, f64::max))
}

fn mean_nonzero(minima: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = minima
        .filter(|m| *m != 0.0)
        .fold((0.0, 0usize), |(s, c), m| (s + m, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean nearest-point distance from `a` to `b`, averaged only over points
/// of `a` that do not coincide with a point of `b` (so images shared by both
/// tags do not drag the distance to zero). Zero when every point coincides.
pub fn directed_modified_hausdorff(a: &TagPointSet, b: &TagPointSet) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(mean_nonzero(nearest_distances(a, b).into_iter()))
}

/// Symmetrized modified Hausdorff distance (max of both directions). Both
/// directions come from one pass over the pairwise distance grid.
pub fn tag_visual_distance(a: &TagPointSet, b: &TagPointSet) -> Result<f64> {
    a.check()?;
    b.check()?;
    let mut row_min = vec![f64::INFINITY; a.points.len()];
    let mut col_min = vec![f64::INFINITY; b.points.len()];
    for (i, p) in a.points.iter().enumerate() {
        for (j, q) in b.points.iter().enumerate() {
            let d = euclidean(p, q);
            row_min[i] = row_min[i].min(d);
            col_min[j] = col_min[j].min(d);
        }
    }
    Ok(mean_nonzero(row_min.into_iter()).max(mean_nonzero(col_min.into_iter())))
}

fn resolve_tags(annotations: &AnnotationIndex, tags: &[String]) -> Result<Vec<usize>> {
    tags.iter()
        .map(|t| {
            annotations
                .tag_index(t)
                .ok_or_else(|| Error::UnknownTag(t.clone()))
        })
        .collect()
}

/// Pairwise visual distances between the given tags.
pub fn visual_distance_matrix(
    tags: &[String],
    features: &FeatureMatrix,
    annotations: &AnnotationIndex,
) -> Result<SimilarityMatrix> {
    let ids = resolve_tags(annotations, tags)?;
    let sets: Vec<TagPointSet> = ids
        .iter()
        .map(|&t| TagPointSet::for_tag(features, annotations, t))
        .collect();
    let values = symmetric_from(tags.len(), 0.0, |i, j| tag_visual_distance(&sets[i], &sets[j]))?;
    SimilarityMatrix::new(tags.to_vec(), values, MatrixKind::VisualDistance)
}

/// Min-max rescales the off-diagonal distances to `[0, 1]` and returns
/// `1 - rescaled`, with the diagonal pinned to 1. If every off-diagonal
/// distance is equal, all similarities are 0.5.
pub fn distances_to_similarity(dist: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    if dist.kind() != MatrixKind::VisualDistance {
        return Err(Error::InvalidParameter(format!(
            "expected a visual-distance matrix, got {}",
            dist.kind().as_str()
        )));
    }
    let n = dist.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "visual similarity needs at least two tags".into(),
        ));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(dist.get(i, j));
                hi = hi.max(dist.get(i, j));
            }
        }
    }
    let span = hi - lo;
    if span == 0.0 {
        log::warn!("all {n}x{n} off-diagonal tag distances are equal; visual similarity set to 0.5");
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = if i == j {
                1.0
            } else if span == 0.0 {
                0.5
            } else {
                (1.0 - (dist.get(i, j) - lo) / span).clamp(0.0, 1.0)
            };
        }
    }
    SimilarityMatrix::new(dist.tags().to_vec(), values, MatrixKind::Visual)
}

pub fn visual_similarity_matrix(
    tags: &[String],
    features: &FeatureMatrix,
    annotations: &AnnotationIndex,
) -> Result<SimilarityMatrix> {
    if tags.len() < 2 {
        return Err(Error::InvalidParameter(
            "visual similarity needs at least two tags".into(),
        ));
    }
    distances_to_similarity(&visual_distance_matrix(tags, features, annotations)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Cosine similarity of word vectors, clamped to `[0, 1]`. Tags without a
/// vector get similarity 0 to every other tag; they are returned in the
/// second slot so the caller can warn.
pub fn semantic_similarity_matrix(
    tags: &[String],
    vectors: &WordVectorTable,
) -> Result<(SimilarityMatrix, Vec<String>)> {
    let resolved: Vec<Option<Vec<f64>>> = tags.iter().map(|t| vectors.resolve(t)).collect();
    for (t, v) in tags.iter().zip(&resolved) {
        if let Some(v) = v {
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::ZeroNorm(format!("word vector for {t:?}")));
            }
        }
    }
    let missing: Vec<String> = tags
        .iter()
        .zip(&resolved)
        .filter(|(_, v)| v.is_none())
        .map(|(t, _)| t.clone())
        .collect();
    if !missing.is_empty() {
        log::warn!(
            "{} tag(s) have no word vector and get zero semantic similarity: {:?}",
            missing.len(),
            missing
        );
    }
    let values = symmetric_from(tags.len(), 1.0, |i, j| {
        Ok(match (&resolved[i], &resolved[j]) {
            (Some(a), Some(b)) => cosine(a, b).clamp(0.0, 1.0),
            _ => 0.0,
        })
    })?;
    Ok((
        SimilarityMatrix::new(tags.to_vec(), values, MatrixKind::Semantic)?,
        missing,
    ))
}

/// `alpha * visual + (1 - alpha) * semantic`, entrywise.
pub fn merge_similarity(
    visual: &SimilarityMatrix,
    semantic: &SimilarityMatrix,
    alpha: f64,
) -> Result<SimilarityMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if visual.tags() != semantic.tags() {
        return Err(Error::TagOrderMismatch);
    }
    let n = visual.len();
    // clamp absorbs rounding of alpha + (1 - alpha) around 1
    let values = visual
        .values()
        .iter()
        .zip(semantic.values())
        .enumerate()
        .map(|(p, (v, s))| {
            if p / n == p % n {
                1.0
            } else {
                (alpha * v + (1.0 - alpha) * s).clamp(0.0, 1.0)
            }
        })
        .collect();
    SimilarityMatrix::new(visual.tags().to_vec(), values, MatrixKind::Joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn set(points: &[Vec<f64>]) -> TagPointSet<'_> {
        TagPointSet {
            tag: 0,
            points: points.iter().map(Vec::as_slice).collect(),
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn single_point_distance() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0]];
        assert_eq!(directed_modified_hausdorff(&set(&a), &set(&b)).unwrap(), 5.0);
        assert_eq!(tag_visual_distance(&set(&a), &set(&b)).unwrap(), 5.0);
    }

    #[test]
    fn identical_sets_are_zero() {
        let a = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        assert_eq!(directed_modified_hausdorff(&set(&a), &set(&a)).unwrap(), 0.0);
        assert_eq!(tag_visual_distance(&set(&a), &set(&a)).unwrap(), 0.0);
    }

    #[test]
    fn shared_points_excluded_from_mean() {
        // a0 coincides with b0; a1 is 2 away from b0. Plain mean would be 1.
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![0.0]];
        assert_eq!(directed_modified_hausdorff(&set(&a), &set(&b)).unwrap(), 2.0);
    }

    #[test]
    fn symmetric_distance_takes_max() {
        // h(A,B) = 1, h(B,A) = mean(1, 7) = 4
        let a = vec![vec![0.0]];
        let b = vec![vec![1.0], vec![7.0]];
        assert_eq!(directed_modified_hausdorff(&set(&a), &set(&b)).unwrap(), 1.0);
        assert_eq!(directed_modified_hausdorff(&set(&b), &set(&a)).unwrap(), 4.0);
        assert_eq!(tag_visual_distance(&set(&a), &set(&b)).unwrap(), 4.0);
    }

    #[test]
    fn empty_set_errors() {
        let a = vec![vec![0.0]];
        assert!(matches!(
            directed_modified_hausdorff(&set(&a), &set(&[])),
            Err(Error::EmptyPointSet(_))
        ));
        assert!(tag_visual_distance(&set(&[]), &set(&a)).is_err());
    }

    #[test]
    fn rescale_three_tags() {
        let d = SimilarityMatrix::new(
            names(3),
            vec![0.0, 0.0, 10.0, 0.0, 0.0, 5.0, 10.0, 5.0, 0.0],
            MatrixKind::VisualDistance,
        )
        .unwrap();
        let s = distances_to_similarity(&d).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(1, 2), 0.5);
        assert_eq!(s.get(2, 2), 1.0);
    }

    #[test]
    fn degenerate_rescale_is_half() {
        let d = SimilarityMatrix::new(
            names(3),
            vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0],
            MatrixKind::VisualDistance,
        )
        .unwrap();
        let s = distances_to_similarity(&d).unwrap();
        assert_eq!(s.get(0, 1), 0.5);
        assert_eq!(s.get(1, 1), 1.0);
    }

    fn table(vs: &[(&str, Vec<f64>)]) -> WordVectorTable {
        let e: BTreeMap<String, Vec<f64>> = vs.iter().map(|(w, v)| (w.to_string(), v.clone())).collect();
        WordVectorTable::new(vs[0].1.len(), e).unwrap()
    }

    #[test]
    fn semantic_cases() {
        let t = table(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 0.0]),
            ("c", vec![0.0, 1.0]),
            ("d", vec![-1.0, 0.0]),
        ]);
        let tags: Vec<String> = ["a", "b", "c", "d", "zz"].iter().map(|s| s.to_string()).collect();
        let (m, missing) = semantic_similarity_matrix(&tags, &t).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.get(0, 3), 0.0);
        assert_eq!(m.get(4, 0), 0.0);
        assert_eq!(m.get(4, 4), 1.0);
        assert_eq!(missing, ["zz"]);
    }

    #[test]
    fn merge_cases() {
        let v = SimilarityMatrix::new(names(2), vec![1.0, 0.2, 0.2, 1.0], MatrixKind::Visual).unwrap();
        let s = SimilarityMatrix::new(names(2), vec![1.0, 0.6, 0.6, 1.0], MatrixKind::Semantic).unwrap();
        assert_eq!(merge_similarity(&v, &s, 0.0).unwrap().values(), s.values());
        assert_eq!(merge_similarity(&v, &s, 1.0).unwrap().values(), v.values());
        assert!((merge_similarity(&v, &s, 0.5).unwrap().get(0, 1) - 0.4).abs() < 1e-15);
        assert!(merge_similarity(&v, &s, 1.5).is_err());
        let other = SimilarityMatrix::new(
            vec!["x".into(), "y".into()],
            vec![1.0, 0.6, 0.6, 1.0],
            MatrixKind::Semantic,
        )
        .unwrap();
        assert!(matches!(merge_similarity(&v, &other, 0.5), Err(Error::TagOrderMismatch)));
    }

    #[test]
    fn synthetic_within_cluster_more_similar() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            num_clusters: 2,
            images_per_cluster: 20,
            dims: 6,
            tags_per_cluster: 3,
            noise_sigma: 0.5,
            seed: 5,
        })
        .unwrap();
        let tags = c.annotations.tags().to_vec();
        let m = visual_similarity_matrix(&tags, &c.features, &c.annotations).unwrap();
        let (mut within, mut across) = (Vec::new(), Vec::new());
        for i in 0..tags.len() {
            for j in i + 1..tags.len() {
                let same = c.tag_cluster[&tags[i]] == c.tag_cluster[&tags[j]];
                if same { within.push(m.get(i, j)) } else { across.push(m.get(i, j)) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) > mean(&across));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = SimilarityMatrix::new(names(2), vec![1.0, 0.25, 0.25, 1.0], MatrixKind::Joint).unwrap();
        let p = dir.path().join("joint.json");
        m.save(&p).unwrap();
        assert_eq!(SimilarityMatrix::load(&p).unwrap(), m);
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), 1..n)
    }

    proptest! {
        #[test]
        fn modified_below_classical_when_no_coincidence(a in points(12, 3), b in points(12, 3)) {
            let (sa, sb) = (set(&a), set(&b));
            let minima = nearest_distances(&sa, &sb);
            prop_assume!(minima.iter().all(|m| *m != 0.0));
            prop_assert!(directed_modified_hausdorff(&sa, &sb).unwrap() <= directed_hausdorff(&sa, &sb).unwrap() + 1e-12);
        }

        #[test]
        fn distance_symmetric_nonnegative(a in points(10, 4), b in points(10, 4)) {
            let ab = tag_visual_distance(&set(&a), &set(&b)).unwrap();
            let ba = tag_visual_distance(&set(&b), &set(&a)).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn merge_monotone_in_alpha(v in 0.0f64..1.0, s in 0.0f64..1.0, a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
            prop_assume!(v > s);
            let mv = SimilarityMatrix::new(names(2), vec![1.0, v, v, 1.0], MatrixKind::Visual).unwrap();
            let ms = SimilarityMatrix::new(names(2), vec![1.0, s, s, 1.0], MatrixKind::Semantic).unwrap();
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let jl = merge_similarity(&mv, &ms, lo).unwrap();
            let jh = merge_similarity(&mv, &ms, hi).unwrap();
            prop_assert!(jh.get(0, 1) >= jl.get(0, 1));
            jh.validate().unwrap();
        }
    }
}
