//! Weighted K-nearest measure: how strongly a tag's images cluster together
//! in feature space, and the per-tag median of that score (VCDL) used to
//! filter out weakly visual tags.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationIndex, FeatureMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 10;

/// Nearest images to `query_image` by cosine distance, nearest first.
/// The query itself is never in the list.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_image: usize,
    pub neighbors: Vec<(usize, f64)>,
}

impl NeighborList {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }
}

/// Exact cosine k-NN over a feature matrix with row norms precomputed.
pub struct CosineKnn<'a> {
    features: &'a FeatureMatrix,
    norms: Vec<f64>,
}

impl<'a> CosineKnn<'a> {
    pub fn new(features: &'a FeatureMatrix) -> Result<Self> {
        let norms: Vec<f64> = features
            .rows()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        if let Some(i) = norms.iter().position(|n| *n == 0.0) {
            return Err(Error::ZeroNorm(format!("feature row {i}")));
        }
        Ok(Self { features, norms })
    }

    pub fn cosine_distance(&self, a: usize, b: usize) -> f64 {
        let dot: f64 = self
            .features
            .row(a)
            .iter()
            .zip(self.features.row(b))
            .map(|(x, y)| x * y)
            .sum();
        1.0 - dot / (self.norms[a] * self.norms[b])
    }

    /// `min(k, n - 1)` nearest neighbours of `query`; equal distances are
    /// ordered by ascending image index.
    pub fn query(&self, query: usize, k: usize) -> Result<NeighborList> {
        let n = self.features.num_images();
        if query >= n {
            return Err(Error::InvalidParameter(format!(
                "query image {query} out of range for {n} images"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidParameter("K must be >= 1".into()));
        }
        if n < 2 {
            return Err(Error::InvalidParameter(
                "k-NN needs at least two images".into(),
            ));
        }
        let mut cand: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != query)
            .map(|j| (j, self.cosine_distance(query, j)))
            .collect();
        let k = k.min(cand.len());
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        Ok(NeighborList {
            query_image: query,
            neighbors: cand,
        })
    }
}

pub fn knn_images(features: &FeatureMatrix, query: usize, k: usize) -> Result<NeighborList> {
    CosineKnn::new(features)?.query(query, k)
}

/// Rank-weighted count of neighbours that share `tag` with `image`:
/// the neighbour at 1-based rank r contributes `1 - (r - 1) / K`, where K is
/// the neighbour-list length. Bounded by `(K + 1) / 2`.
pub fn image_tag_score(
    annotations: &AnnotationIndex,
    tag: usize,
    image: usize,
    neighbors: &NeighborList,
) -> Result<f64> {
    if !annotations.has_tag(image, tag) {
        return Err(Error::NotAnnotated {
            tag: annotations.tag_name(tag).to_string(),
            image,
        });
    }
    let k = neighbors.k() as f64;
    Ok(neighbors
        .neighbors
        .iter()
        .enumerate()
        .filter(|(_, (img, _))| annotations.has_tag(*img, tag))
        .map(|(rank, _)| 1.0 - rank as f64 / k)
        .sum())
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// VCDL of a single tag: the median score over the tag's images.
pub fn vcdl(
    tag: usize,
    features: &FeatureMatrix,
    annotations: &AnnotationIndex,
    k: usize,
) -> Result<f64> {
    let images = annotations.images_of(tag);
    if images.is_empty() {
        return Err(Error::EmptyPointSet(annotations.tag_name(tag).to_string()));
    }
    let knn = CosineKnn::new(features)?;
    let scores = images
        .iter()
        .map(|&img| image_tag_score(annotations, tag, img, &knn.query(img, k)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&scores).expect("nonempty"))
}

/// Per-tag VCDL for the whole vocabulary. `k` is the neighbour count
/// actually used (`min(K, n - 1)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcdlReport {
    pub k: usize,
    pub vcdl: BTreeMap<String, f64>,
}

impl VcdlReport {
    pub fn get(&self, tag: &str) -> Option<f64> {
        self.vcdl.get(tag).copied()
    }
}

pub fn vcdl_report(
    features: &FeatureMatrix,
    annotations: &AnnotationIndex,
    k: usize,
) -> Result<VcdlReport> {
    if annotations.num_images() != features.num_images() {
        return Err(Error::Shape(format!(
            "{} annotated images vs {} feature rows",
            annotations.num_images(),
            features.num_images()
        )));
    }
    let knn = CosineKnn::new(features)?;
    let lists: Vec<Option<NeighborList>> = (0..features.num_images())
        .into_par_iter()
        .map(|img| {
            if annotations.tags_of(img).is_empty() {
                Ok(None)
            } else {
                knn.query(img, k).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let k_used = k.min(features.num_images() - 1);

    let per_tag: Vec<(String, f64)> = (0..annotations.num_tags())
        .into_par_iter()
        .map(|t| {
            let scores = annotations
                .images_of(t)
                .iter()
                .map(|&img| {
                    let list = lists[img].as_ref().expect("annotated image has a list");
                    image_tag_score(annotations, t, img, list)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((annotations.tag_name(t).to_string(), median(&scores).expect("nonempty")))
        })
        .collect::<Result<_>>()?;

    Ok(VcdlReport {
        k: k_used,
        vcdl: per_tag.into_iter().collect(),
    })
}

/// Outcome of thresholding a [`VcdlReport`]. `removed` keeps the scores for
/// auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagFilter {
    pub threshold: f64,
    pub retained: Vec<String>,
    pub removed: BTreeMap<String, f64>,
}

pub fn filter_tags(report: &VcdlReport, threshold: f64) -> TagFilter {
    let mut retained = Vec::new();
    let mut removed = BTreeMap::new();
    for (tag, &score) in &report.vcdl {
        if score >= threshold {
            retained.push(tag.clone());
        } else {
            removed.insert(tag.clone(), score);
        }
    }
    TagFilter {
        threshold,
        retained,
        removed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(n, d, data).unwrap()
    }

    /// Brute-force oracle: full sort of all cosine distances, computed
    /// without the precomputed-norm path.
    fn oracle_knn(m: &FeatureMatrix, q: usize, k: usize) -> Vec<(usize, f64)> {
        let cos = |a: &[f64], b: &[f64]| {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..a.len() {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            1.0 - dot / (na.sqrt() * nb.sqrt())
        };
        let mut all: Vec<(usize, f64)> = (0..m.num_images())
            .filter(|&j| j != q)
            .map(|j| (j, cos(m.row(q), m.row(j))))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn hand_computed_cosines() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let l = knn_images(&m, 0, 2).unwrap();
        assert_eq!(l.neighbors[0].0, 2);
        assert!((l.neighbors[0].1 - (1.0 - 2f64.sqrt() / 2.0)).abs() < 1e-15);
        assert_eq!(l.neighbors[1], (1, 1.0));
    }

    #[test]
    fn k_truncated_to_corpus() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(knn_images(&m, 0, 50).unwrap().k(), 2);
    }

    #[test]
    fn zero_row_rejected() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(knn_images(&m, 0, 1), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn ties_break_by_index() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 1.0], vec![0.0, 3.0]])
            .unwrap();
        let l = knn_images(&m, 0, 3).unwrap();
        assert_eq!(l.neighbors.iter().map(|p| p.0).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn matches_exhaustive_sort_200() {
        let m = random_matrix(200, 16, 11);
        let knn = CosineKnn::new(&m).unwrap();
        for q in 0..200 {
            let got = knn.query(q, 10).unwrap();
            let want = oracle_knn(&m, q, 10);
            assert_eq!(
                got.neighbors.iter().map(|p| p.0).collect::<Vec<_>>(),
                want.iter().map(|p| p.0).collect::<Vec<_>>()
            );
            for (g, w) in got.neighbors.iter().zip(&want) {
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    fn list(neighbors: &[usize]) -> NeighborList {
        NeighborList {
            query_image: 0,
            neighbors: neighbors.iter().map(|&i| (i, 0.0)).collect(),
        }
    }

    fn tagged(n: usize, with_tag: &[usize]) -> AnnotationIndex {
        let per_image: Vec<Vec<&str>> = (0..n)
            .map(|i| if i == 0 || with_tag.contains(&i) { vec!["t", "x"] } else { vec!["x"] })
            .collect();
        AnnotationIndex::from_image_tags(&per_image).unwrap()
    }

    #[test]
    fn score_all_neighbors_is_max() {
        let a = tagged(5, &[1, 2, 3, 4]);
        let t = a.tag_index("t").unwrap();
        assert_eq!(image_tag_score(&a, t, 0, &list(&[1, 2, 3, 4])).unwrap(), 2.5);
    }

    #[test]
    fn score_no_neighbor_is_zero() {
        let a = tagged(5, &[]);
        let t = a.tag_index("t").unwrap();
        assert_eq!(image_tag_score(&a, t, 0, &list(&[1, 2, 3, 4])).unwrap(), 0.0);
    }

    #[test]
    fn score_ranks_one_and_three() {
        let a = tagged(11, &[1, 3]);
        let t = a.tag_index("t").unwrap();
        let s = image_tag_score(&a, t, 0, &list(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])).unwrap();
        assert!((s - 1.8).abs() < 1e-15);
    }

    #[test]
    fn score_requires_annotation() {
        let a = tagged(3, &[]);
        let t = a.tag_index("t").unwrap();
        assert!(matches!(
            image_tag_score(&a, t, 1, &list(&[0, 2])),
            Err(Error::NotAnnotated { .. })
        ));
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[2.5, 2.5, 2.5]), Some(2.5));
        assert_eq!(median(&[3.0, 0.0, 2.0, 1.0]), Some(1.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn filter_threshold_zero_keeps_all() {
        let report = VcdlReport {
            k: 10,
            vcdl: [("a".to_string(), 0.0), ("b".to_string(), 3.0)].into_iter().collect(),
        };
        assert_eq!(filter_tags(&report, 0.0).retained.len(), 2);
        let f = filter_tags(&report, 1.5);
        assert_eq!(f.retained, ["b"]);
        assert_eq!(f.removed.get("a"), Some(&0.0));
    }

    #[test]
    fn cluster_pure_tag_beats_mixed_tag() {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            num_clusters: 2,
            images_per_cluster: 30,
            dims: 8,
            tags_per_cluster: 1,
            noise_sigma: 0.01,
            seed: 3,
        })
        .unwrap();
        let per_image: Vec<Vec<String>> = (0..60)
            .map(|i| {
                let mut tags: Vec<String> =
                    corpus.annotations.tag_names_of(i).map(str::to_owned).collect();
                if i % 3 == 0 {
                    tags.push("mixed".into());
                }
                tags
            })
            .collect();
        let ann = AnnotationIndex::from_image_tags(&per_image).unwrap();
        let k = 10;
        let pure = vcdl(ann.tag_index("c0t0").unwrap(), &corpus.features, &ann, k).unwrap();
        let mixed = vcdl(ann.tag_index("mixed").unwrap(), &corpus.features, &ann, k).unwrap();
        assert!(pure >= 0.9 * (k as f64 + 1.0) / 2.0, "pure = {pure}");
        assert!(mixed < pure, "mixed = {mixed}, pure = {pure}");

        let report = vcdl_report(&corpus.features, &ann, k).unwrap();
        assert_eq!(report.get("c0t0"), Some(pure));
        assert_eq!(report.get("mixed"), Some(mixed));
    }

    proptest! {
        #[test]
        fn score_bounded_and_max_iff_all(k in 1usize..15, mask in proptest::collection::vec(any::<bool>(), 15)) {
            let with: Vec<usize> = (1..=k).filter(|&i| mask[i - 1]).collect();
            let a = tagged(k + 1, &with);
            let t = a.tag_index("t").unwrap();
            let nbrs: Vec<usize> = (1..=k).collect();
            let s = image_tag_score(&a, t, 0, &list(&nbrs)).unwrap();
            let max = (k as f64 + 1.0) / 2.0;
            prop_assert!(s >= 0.0 && s <= max + 1e-12);
            prop_assert_eq!((s - max).abs() < 1e-12, with.len() == k);
        }

        #[test]
        fn score_monotone_in_annotation(k in 2usize..15, mask in proptest::collection::vec(any::<bool>(), 15), extra in 1usize..15) {
            let extra = 1 + (extra - 1) % k;
            let with: Vec<usize> = (1..=k).filter(|&i| mask[i - 1]).collect();
            let mut more = with.clone();
            more.push(extra);
            let nbrs: Vec<usize> = (1..=k).collect();
            let a = tagged(k + 1, &with);
            let b = tagged(k + 1, &more);
            let sa = image_tag_score(&a, a.tag_index("t").unwrap(), 0, &list(&nbrs)).unwrap();
            let sb = image_tag_score(&b, b.tag_index("t").unwrap(), 0, &list(&nbrs)).unwrap();
            prop_assert!(sb >= sa);
        }

        #[test]
        fn median_permutation_invariant(mut v in proptest::collection::vec(0.0f64..10.0, 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let m = median(&v);
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(m, median(&v));
        }

        #[test]
        fn filter_threshold_monotone(scores in proptest::collection::vec(0.0f64..5.5, 1..40), t1 in 0.0f64..6.0, dt in 0.0f64..3.0) {
            let report = VcdlReport {
                k: 10,
                vcdl: scores.iter().enumerate().map(|(i, s)| (format!("t{i}"), *s)).collect(),
            };
            let lo = filter_tags(&report, t1);
            let hi = filter_tags(&report, t1 + dt);
            prop_assert!(hi.retained.iter().all(|t| lo.retained.contains(t)));
        }
    }
}
