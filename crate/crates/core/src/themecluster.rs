//! Spectral clustering of tags into visual themes, and projection of a tag
//! corpus into theme space.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotationIndex;
use crate::error::{Error, Result};
use crate::tagsim::{MatrixKind, SimilarityMatrix};

const DEGREE_FLOOR: f64 = 1e-12;
const KMEANS_MAX_ITER: usize = 300;
const RESIDUAL_TOL: f64 = 1e-8;

/// A partition of tags into themes. Theme ids are dense `0..num_themes`,
/// numbered by first appearance in the clustered matrix's tag order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThemeAssignment {
    theme_to_tags: Vec<Vec<String>>,
    tag_to_theme: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ThemeFile {
    num_themes: usize,
    themes: BTreeMap<usize, Vec<String>>,
}

impl ThemeAssignment {
    pub fn from_groups(theme_to_tags: Vec<Vec<String>>) -> Result<Self> {
        let mut tag_to_theme = BTreeMap::new();
        for (theme, tags) in theme_to_tags.iter().enumerate() {
            if tags.is_empty() {
                return Err(Error::InvalidParameter(format!("theme {theme} is empty")));
            }
            for t in tags {
                if tag_to_theme.insert(t.clone(), theme).is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "tag {t:?} appears in more than one theme"
                    )));
                }
            }
        }
        Ok(Self {
            theme_to_tags,
            tag_to_theme,
        })
    }

    pub fn num_themes(&self) -> usize {
        self.theme_to_tags.len()
    }

    pub fn tags_of(&self, theme: usize) -> &[String] {
        &self.theme_to_tags[theme]
    }

    pub fn theme_of(&self, tag: &str) -> Option<usize> {
        self.tag_to_theme.get(tag).copied()
    }

    pub fn themes(&self) -> &[Vec<String>] {
        &self.theme_to_tags
    }

    pub fn tag_to_theme(&self) -> &BTreeMap<String, usize> {
        &self.tag_to_theme
    }

    /// The partition as a set of tag sets, independent of theme numbering.
    pub fn as_partition(&self) -> BTreeSet<BTreeSet<String>> {
        self.theme_to_tags
            .iter()
            .map(|g| g.iter().cloned().collect())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ThemeFile {
            num_themes: self.num_themes(),
            themes: self.theme_to_tags.iter().cloned().enumerate().collect(),
        };
        serde_json::to_string_pretty(&file).expect("theme file serializes") + "\n"
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: ThemeFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if file.themes.len() != file.num_themes
            || file.themes.keys().enumerate().any(|(i, k)| i != *k)
        {
            return Err(format!(
                "themes must be numbered 0..{} without gaps",
                file.num_themes
            ));
        }
        Self::from_groups(file.themes.into_values().collect()).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message,
        })
    }
}

/// Eigen-decomposition of the symmetric normalized Laplacian
/// `I - D^-1/2 W D^-1/2`, with `W` the affinity with its diagonal zeroed.
/// Eigenpairs are returned sorted by ascending eigenvalue.
struct LaplacianSpectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
}

fn laplacian_spectrum(m: &SimilarityMatrix) -> Result<LaplacianSpectrum> {
    if m.kind() == MatrixKind::VisualDistance {
        return Err(Error::InvalidParameter(
            "spectral clustering needs an affinity, not a distance matrix".into(),
        ));
    }
    let n = m.len();
    let mut degree = vec![0.0; n];
    for (i, d) in degree.iter_mut().enumerate() {
        *d = (0..n).filter(|&j| j != i).map(|j| m.get(i, j)).sum();
    }
    let isolated = degree.iter().filter(|d| **d < DEGREE_FLOOR).count();
    if isolated > 0 {
        log::warn!("{isolated} tag(s) have zero affinity to every other tag");
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|d| 1.0 / d.max(DEGREE_FLOOR).sqrt())
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            -m.get(i, j) * inv_sqrt[i] * inv_sqrt[j]
        }
    });

    let max_iter = 1000 * n.max(1);
    let eig = SymmetricEigen::try_new(lap.clone(), f64::EPSILON, max_iter).ok_or_else(|| {
        Error::EigenSolver {
            message: format!("no convergence within {max_iter} iterations"),
            residual: None,
        }
    })?;
    let residual = (&lap * &eig.eigenvectors
        - &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues))
        .amax();
    let scale = 1.0 + lap.amax();
    if residual.is_nan() || residual > RESIDUAL_TOL * scale {
        return Err(Error::EigenSolver {
            message: format!("eigen-decomposition residual {residual:e} too large"),
            residual: Some(residual),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(LaplacianSpectrum { values, vectors })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn centroids_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

/// Fills empty clusters by moving the member of the largest cluster that is
/// farthest from its centroid. Requires `k <= points.len()`.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
        let centroid = &centroids[largest];
        let mut far = usize::MAX;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = sq_dist(p, centroid);
                if d > far_d {
                    far = i;
                    far_d = d;
                }
            }
        }
        labels[far] = empty;
        centroids[empty] = points[far].clone();
        let updated = centroids_of(points, labels, k);
        centroids[largest] = updated[largest].clone();
    }
}

/// Lloyd's k-means with greedy farthest-point seeding. The first centroid
/// is drawn from `seed`; later ones are the points farthest from their
/// nearest chosen centroid. Equidistant points go to the lowest centroid.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..n {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        chosen.push(far);
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[far]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        repair_empty(points, &mut labels, &mut centroids);
        centroids = centroids_of(points, &labels, k);
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(points, &mut labels, &mut centroids);
    labels
}

/// Clusters the tags of an affinity matrix into `num_themes` themes.
pub fn spectral_cluster(m: &SimilarityMatrix, num_themes: usize, seed: u64) -> Result<ThemeAssignment> {
    let n = m.len();
    if num_themes < 2 || num_themes > n {
        return Err(Error::InvalidParameter(format!(
            "num_themes must be in [2, {n}], got {num_themes}"
        )));
    }
    let spectrum = laplacian_spectrum(m)?;
    let embedding: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row: Vec<f64> = (0..num_themes).map(|c| spectrum.vectors[(r, c)]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.into_iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let labels = kmeans(&embedding, num_themes, seed);

    let mut renumber: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for (tag, &l) in m.tags().iter().zip(&labels) {
        let id = *renumber.entry(l).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[id].push(tag.clone());
    }
    ThemeAssignment::from_groups(groups)
}

/// Advisory theme count: the `k` in `2..=max_themes` with the largest gap
/// between the k-th and (k+1)-th smallest Laplacian eigenvalues.
pub fn eigengap_suggestion(m: &SimilarityMatrix, max_themes: usize) -> Result<usize> {
    let spectrum = laplacian_spectrum(m)?;
    let upper = max_themes.min(m.len().saturating_sub(1));
    if upper < 2 {
        return Err(Error::InvalidParameter(
            "eigengap needs at least three tags and max_themes >= 2".into(),
        ));
    }
    let v = &spectrum.values;
    Ok((2..=upper)
        .fold((2, f64::NEG_INFINITY), |(best, gap), k| {
            let g = v[k] - v[k - 1];
            if g > gap {
                (k, g)
            } else {
                (best, gap)
            }
        })
        .0)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(n);
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// A corpus re-expressed in theme space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThemeCorpus {
    /// Sorted theme ids per image.
    pub image_to_themes: Vec<Vec<usize>>,
    /// Number of images carrying each retained theme.
    pub theme_frequencies: BTreeMap<usize, usize>,
    pub num_themes: usize,
}

impl ThemeCorpus {
    pub fn themes_of(&self, image: usize) -> &[usize] {
        &self.image_to_themes[image]
    }

    pub fn has_theme(&self, image: usize, theme: usize) -> bool {
        self.image_to_themes[image].binary_search(&theme).is_ok()
    }

    pub fn retained_themes(&self) -> impl Iterator<Item = usize> + '_ {
        self.theme_frequencies.keys().copied()
    }
}

/// Replaces each image's tags with the themes of those tags. Themes carried
/// by fewer than `min_frequency` images are dropped. Tags outside the
/// assignment are ignored.
pub fn relabel_corpus(
    annotations: &AnnotationIndex,
    themes: &ThemeAssignment,
    min_frequency: usize,
) -> ThemeCorpus {
    let tag_theme: Vec<Option<usize>> = annotations
        .tags()
        .iter()
        .map(|t| themes.theme_of(t))
        .collect();
    let mut image_to_themes: Vec<Vec<usize>> = (0..annotations.num_images())
        .map(|img| {
            let set: BTreeSet<usize> = annotations
                .tags_of(img)
                .iter()
                .filter_map(|&t| tag_theme[t])
                .collect();
            set.into_iter().collect()
        })
        .collect();
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for set in &image_to_themes {
        for &t in set {
            *freq.entry(t).or_default() += 1;
        }
    }
    freq.retain(|_, c| *c >= min_frequency);
    for set in &mut image_to_themes {
        set.retain(|t| freq.contains_key(t));
    }
    ThemeCorpus {
        image_to_themes,
        theme_frequencies: freq,
        num_themes: themes.num_themes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i:03}")).collect()
    }

    fn block_matrix(labels: &[usize], within: impl Fn(usize, usize) -> f64, across: impl Fn(usize, usize) -> f64) -> SimilarityMatrix {
        let n = labels.len();
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = if i == j {
                    1.0
                } else if labels[i] == labels[j] {
                    within(i.min(j), i.max(j))
                } else {
                    across(i.min(j), i.max(j))
                };
            }
        }
        SimilarityMatrix::new(names(n), v, MatrixKind::Joint).unwrap()
    }

    fn labels_of(a: &ThemeAssignment, tags: &[String]) -> Vec<usize> {
        tags.iter().map(|t| a.theme_of(t).unwrap()).collect()
    }

    #[test]
    fn recovers_two_blocks_exactly() {
        let planted = [0, 1, 0, 1, 1, 0, 0, 1];
        let m = block_matrix(&planted, |_, _| 1.0, |_, _| 0.0);
        let a = spectral_cluster(&m, 2, 1).unwrap();
        let got = labels_of(&a, m.tags());
        assert_eq!(adjusted_rand_index(&got, &planted), 1.0);
    }

    #[test]
    fn k_components_give_k_themes() {
        let planted: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let m = block_matrix(&planted, |i, j| 0.5 + 0.01 * ((i + j) % 7) as f64, |_, _| 0.0);
        let a = spectral_cluster(&m, 5, 9).unwrap();
        assert_eq!(a.num_themes(), 5);
        assert_eq!(adjusted_rand_index(&labels_of(&a, m.tags()), &planted), 1.0);
    }

    fn noisy_four_blocks(seed: u64) -> (SimilarityMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let planted: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let noise: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let m = block_matrix(
            &planted,
            |i, j| 0.9 + noise[i * n + j],
            |i, j| (0.05 + noise[i * n + j]).max(0.0),
        );
        (m, planted)
    }

    #[test]
    fn noisy_planted_blocks_ari() {
        let (m, planted) = noisy_four_blocks(21);
        let a = spectral_cluster(&m, 4, 0).unwrap();
        let ari = adjusted_rand_index(&labels_of(&a, m.tags()), &planted);
        assert!(ari >= 0.95, "ARI = {ari}");
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let (m, _) = noisy_four_blocks(4);
        let a = spectral_cluster(&m, 4, 17).unwrap();
        assert_eq!(a, spectral_cluster(&m, 4, 17).unwrap());

        let n = m.len();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let tags: Vec<String> = perm.iter().map(|&p| m.tags()[p].clone()).collect();
        let values: Vec<f64> = (0..n * n).map(|x| m.get(perm[x / n], perm[x % n])).collect();
        let pm = SimilarityMatrix::new(tags, values, MatrixKind::Joint).unwrap();
        let b = spectral_cluster(&pm, 4, 17).unwrap();
        assert_eq!(a.as_partition(), b.as_partition());
    }

    #[test]
    fn partition_is_complete_even_with_isolated_tags() {
        let n = 6;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v[1] = 0.8;
        v[n] = 0.8;
        let m = SimilarityMatrix::new(names(n), v, MatrixKind::Joint).unwrap();
        let a = spectral_cluster(&m, 4, 3).unwrap();
        assert_eq!(a.num_themes(), 4);
        assert_eq!(a.tag_to_theme().len(), n);
        assert!(a.themes().iter().all(|g| !g.is_empty()));
    }

    #[test]
    fn rejects_bad_theme_counts() {
        let m = block_matrix(&[0, 1, 0], |_, _| 1.0, |_, _| 0.0);
        assert!(spectral_cluster(&m, 1, 0).is_err());
        assert!(spectral_cluster(&m, 4, 0).is_err());
    }

    #[test]
    fn eigengap_finds_block_count() {
        let planted: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let m = block_matrix(&planted, |_, _| 1.0, |_, _| 0.01);
        assert_eq!(eigengap_suggestion(&m, 10).unwrap(), 3);
    }

    #[test]
    fn ari_reference_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        // sklearn: adjusted_rand_score([0,0,1,1],[0,0,1,2]) = 0.5714285714285714
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]);
        assert!((v - 0.571_428_571_428_571_5).abs() < 1e-12);
    }

    #[test]
    fn theme_json_round_trip() {
        let a = ThemeAssignment::from_groups(vec![
            vec!["sunrise".into(), "sunset".into()],
            vec!["jet".into(), "plane".into()],
        ])
        .unwrap();
        let json = a.to_json();
        assert!(json.contains("\"num_themes\": 2"));
        assert!(json.contains("\"0\": ["));
        assert_eq!(ThemeAssignment::from_json(&json).unwrap(), a);
        assert!(ThemeAssignment::from_groups(vec![vec!["a".into()], vec!["a".into()]]).is_err());
    }

    fn relabel_fixture() -> (AnnotationIndex, ThemeAssignment) {
        let ann = AnnotationIndex::from_image_tags(&[
            vec!["jet", "plane"],
            vec!["jet", "sky"],
            vec!["sky"],
            vec!["plane", "orphan"],
        ])
        .unwrap();
        let themes = ThemeAssignment::from_groups(vec![
            vec!["jet".into(), "plane".into()],
            vec!["sky".into()],
        ])
        .unwrap();
        (ann, themes)
    }

    #[test]
    fn relabel_collapses_and_filters() {
        let (ann, themes) = relabel_fixture();
        let tc = relabel_corpus(&ann, &themes, 0);
        assert_eq!(tc.image_to_themes, vec![vec![0], vec![0, 1], vec![1], vec![0]]);
        assert_eq!(tc.theme_frequencies, [(0, 3), (1, 2)].into_iter().collect());

        let tc = relabel_corpus(&ann, &themes, 3);
        assert_eq!(tc.image_to_themes, vec![vec![0], vec![0], vec![], vec![0]]);
        assert!(tc.retained_themes().eq([0]));
        for img in 0..ann.num_images() {
            assert!(tc.themes_of(img).len() <= ann.tags_of(img).len());
        }
    }
}
