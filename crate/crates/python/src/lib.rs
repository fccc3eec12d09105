//! Python bindings (`import pyvtheme`).

use std::collections::{BTreeMap, BTreeSet};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vtheme::corpus::{self, SyntheticSpec};
use vtheme::pipeline::{self, PipelineConfig};
use vtheme::tagsim::{self, TagPointSet};
use vtheme::tasks::{self, RankedResult};
use vtheme::themecluster::{self, ThemeCorpus};
use vtheme::themeforest::{self, ForestParams, HybridNeighborSet};
use vtheme::wknm;

fn py_err(e: vtheme::Error) -> PyErr {
    match e {
        vtheme::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for vtheme::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "FeatureMatrix", module = "pyvtheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFeatureMatrix(corpus::FeatureMatrix);

#[pymethods]
impl PyFeatureMatrix {
    #[new]
    #[pyo3(signature = (rows, image_ids=None))]
    fn new(rows: Vec<Vec<f64>>, image_ids: Option<Vec<String>>) -> PyResult<Self> {
        let m = corpus::FeatureMatrix::from_rows(&rows).py()?;
        match image_ids {
            None => Ok(Self(m)),
            Some(ids) => corpus::FeatureMatrix::with_ids(m.num_images(), m.num_dims(), m.data().to_vec(), ids)
                .py()
                .map(Self),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::load_feature_matrix(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::write_feature_matrix(&self.0, path).py()
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.0.num_images()
    }

    #[getter]
    fn num_dims(&self) -> usize {
        self.0.num_dims()
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.0.image_ids().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.num_images() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.0.row(i).to_vec())
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.0.num_images()
    }
}

#[pyclass(name = "AnnotationIndex", module = "pyvtheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAnnotationIndex(corpus::AnnotationIndex);

#[pymethods]
impl PyAnnotationIndex {
    #[new]
    fn new(per_image: Vec<Vec<String>>) -> PyResult<Self> {
        corpus::AnnotationIndex::from_image_tags(&per_image).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str, image_ids: Vec<String>) -> PyResult<Self> {
        corpus::load_annotations(path, &image_ids).py().map(Self)
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.0.num_images()
    }

    #[getter]
    fn tags(&self) -> Vec<String> {
        self.0.tags().to_vec()
    }

    fn tags_of(&self, image: usize) -> Vec<String> {
        self.0.tag_names_of(image).map(str::to_owned).collect()
    }

    fn images_of(&self, tag: &str) -> PyResult<Vec<usize>> {
        let t = self
            .0
            .tag_index(tag)
            .ok_or_else(|| PyValueError::new_err(format!("unknown tag {tag:?}")))?;
        Ok(self.0.images_of(t).to_vec())
    }
}

#[pyclass(name = "WordVectors", module = "pyvtheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWordVectors(corpus::WordVectorTable);

#[pymethods]
impl PyWordVectors {
    #[new]
    fn new(dim: usize, entries: BTreeMap<String, Vec<f64>>) -> PyResult<Self> {
        corpus::WordVectorTable::new(dim, entries).py().map(Self)
    }

    /// Returns `(table, missing)` restricted to the words of `tags`.
    #[staticmethod]
    fn load(path: &str, tags: Vec<String>) -> PyResult<(Self, Vec<String>)> {
        let vocab = corpus::expand_vocabulary(tags.iter().map(String::as_str));
        let (t, missing) = corpus::load_word_vectors(path, &vocab).py()?;
        Ok((Self(t), missing.into_iter().collect()))
    }

    fn resolve(&self, tag: &str) -> Option<Vec<f64>> {
        self.0.resolve(tag)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "SyntheticCorpus", module = "pyvtheme", frozen)]
struct PySyntheticCorpus(corpus::SyntheticCorpus);

#[pymethods]
impl PySyntheticCorpus {
    #[new]
    #[pyo3(signature = (num_clusters, images_per_cluster, dims, tags_per_cluster, noise_sigma=0.5, seed=0))]
    fn new(
        num_clusters: usize,
        images_per_cluster: usize,
        dims: usize,
        tags_per_cluster: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        corpus::generate_synthetic_corpus(&SyntheticSpec {
            num_clusters,
            images_per_cluster,
            dims,
            tags_per_cluster,
            noise_sigma,
            seed,
        })
        .py()
        .map(Self)
    }

    #[getter]
    fn features(&self) -> PyFeatureMatrix {
        PyFeatureMatrix(self.0.features.clone())
    }

    #[getter]
    fn annotations(&self) -> PyAnnotationIndex {
        PyAnnotationIndex(self.0.annotations.clone())
    }

    #[getter]
    fn vectors(&self) -> PyWordVectors {
        PyWordVectors(self.0.vectors.clone())
    }

    #[getter]
    fn image_cluster(&self) -> Vec<usize> {
        self.0.image_cluster.clone()
    }

    #[getter]
    fn tag_cluster(&self) -> BTreeMap<String, usize> {
        self.0.tag_cluster.clone()
    }

    /// Writes the corpus files; returns `{"features", "annotations", "word_vectors"}` paths.
    fn write(&self, dir: &str) -> PyResult<BTreeMap<String, String>> {
        let p = self.0.write(dir).py()?;
        Ok([
            ("features", p.features),
            ("annotations", p.annotations),
            ("word_vectors", p.word_vectors),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.display().to_string()))
        .collect())
    }
}

#[pyclass(name = "SimilarityMatrix", module = "pyvtheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySimilarityMatrix(tagsim::SimilarityMatrix);

#[pymethods]
impl PySimilarityMatrix {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        tagsim::SimilarityMatrix::load(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn tags(&self) -> Vec<String> {
        self.0.tags().to_vec()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().as_str()
    }

    fn get(&self, i: usize, j: usize) -> PyResult<f64> {
        let n = self.0.len();
        if i >= n || j >= n {
            return Err(PyValueError::new_err(format!("index out of range for {n} tags")));
        }
        Ok(self.0.get(i, j))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        self.0.values().chunks(self.0.len().max(1)).map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "ThemeAssignment", module = "pyvtheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyThemeAssignment(themecluster::ThemeAssignment);

#[pymethods]
impl PyThemeAssignment {
    #[new]
    fn new(themes: Vec<Vec<String>>) -> PyResult<Self> {
        themecluster::ThemeAssignment::from_groups(themes).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        themecluster::ThemeAssignment::load(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn num_themes(&self) -> usize {
        self.0.num_themes()
    }

    #[getter]
    fn themes(&self) -> Vec<Vec<String>> {
        self.0.themes().to_vec()
    }

    fn theme_of(&self, tag: &str) -> Option<usize> {
        self.0.theme_of(tag)
    }

    fn resolve_keyword(&self, keyword: &str) -> PyResult<usize> {
        tasks::resolve_keyword(&self.0, keyword).py()
    }

    /// Sorted theme ids per image, dropping themes on fewer than
    /// `min_frequency` images.
    #[pyo3(signature = (annotations, min_frequency=1))]
    fn relabel(&self, annotations: &PyAnnotationIndex, min_frequency: usize) -> Vec<Vec<usize>> {
        themecluster::relabel_corpus(&annotations.0, &self.0, min_frequency).image_to_themes
    }
}

#[pyclass(name = "ThemeForest", module = "pyvtheme", frozen)]
struct PyThemeForest(themeforest::ThemeForest);

#[pymethods]
impl PyThemeForest {
    #[staticmethod]
    #[pyo3(signature = (features, annotations, themes, num_trees=400, max_depth=20, min_leaf=5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        features: &PyFeatureMatrix,
        annotations: &PyAnnotationIndex,
        themes: &PyThemeAssignment,
        num_trees: usize,
        max_depth: usize,
        min_leaf: usize,
        seed: u64,
        py: Python<'_>,
    ) -> PyResult<Self> {
        let corpus = themecluster::relabel_corpus(&annotations.0, &themes.0, 0);
        let params = ForestParams {
            num_trees,
            max_depth,
            min_leaf,
            seed,
            ..ForestParams::default()
        };
        py.detach(|| themeforest::build_forest(&features.0, &corpus, &params))
            .py()
            .map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        themeforest::ThemeForest::load(path).py().map(Self)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn num_trees(&self) -> usize {
        self.0.trees.len()
    }

    /// Hybrid neighbour votes `{training_image: votes}`.
    fn query(&self, row: Vec<f64>) -> PyResult<BTreeMap<usize, u32>> {
        Ok(themeforest::query_forest(&self.0, &row).py()?.votes)
    }

    #[pyo3(signature = (row, top_k=10))]
    fn example_search(&self, row: Vec<f64>, top_k: usize) -> PyResult<Vec<(usize, f64)>> {
        Ok(tasks::example_search(&self.0, "", &row, top_k).py()?.ranked)
    }

    /// Ranks the rows of `test` for `keyword`; `annotations` are the
    /// training annotations.
    #[pyo3(signature = (keyword, themes, annotations, test))]
    fn keyword_search(
        &self,
        keyword: &str,
        themes: &PyThemeAssignment,
        annotations: &PyAnnotationIndex,
        test: &PyFeatureMatrix,
        py: Python<'_>,
    ) -> PyResult<Vec<(usize, f64)>> {
        let train = themecluster::relabel_corpus(&annotations.0, &themes.0, 0);
        let r = py.detach(|| tasks::keyword_search(&self.0, keyword, &themes.0, &test.0, &train));
        Ok(r.py()?.ranked)
    }

    /// `[(tag, vcdl)]` for one query row.
    #[pyo3(signature = (row, annotations, vcdl, top_m=3, max_tags=5))]
    fn label(
        &self,
        row: Vec<f64>,
        annotations: &PyAnnotationIndex,
        vcdl: BTreeMap<String, f64>,
        top_m: usize,
        max_tags: usize,
    ) -> PyResult<Vec<(String, f64)>> {
        let report = wknm::VcdlReport { k: 0, vcdl };
        let l = tasks::label_image(&self.0, 0, &row, &annotations.0, &report, top_m, max_tags).py()?;
        Ok(l.predicted_tags)
    }
}

fn point_set(points: &[Vec<f64>]) -> PyResult<corpus::FeatureMatrix> {
    corpus::FeatureMatrix::from_rows(points).py()
}

fn with_sets<T>(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    f: impl FnOnce(&TagPointSet, &TagPointSet) -> vtheme::Result<T>,
) -> PyResult<T> {
    let (fa, fb) = (point_set(&a)?, point_set(&b)?);
    let ann = |n: usize| corpus::AnnotationIndex::from_image_tags(&vec![vec!["s"]; n]).py();
    let (aa, ab) = (ann(a.len())?, ann(b.len())?);
    f(&TagPointSet::for_tag(&fa, &aa, 0), &TagPointSet::for_tag(&fb, &ab, 0)).py()
}

#[pyfunction]
fn directed_modified_hausdorff(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    with_sets(a, b, tagsim::directed_modified_hausdorff)
}

#[pyfunction]
fn tag_visual_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    with_sets(a, b, tagsim::tag_visual_distance)
}

/// `[(neighbour, cosine_distance)]` for row `query`.
#[pyfunction]
#[pyo3(signature = (features, query, k=10))]
fn knn_images(features: &PyFeatureMatrix, query: usize, k: usize) -> PyResult<Vec<(usize, f64)>> {
    Ok(wknm::knn_images(&features.0, query, k).py()?.neighbors)
}

#[pyfunction]
#[pyo3(signature = (features, annotations, k=10))]
fn vcdl_report(
    features: &PyFeatureMatrix,
    annotations: &PyAnnotationIndex,
    k: usize,
    py: Python<'_>,
) -> PyResult<BTreeMap<String, f64>> {
    Ok(py.detach(|| wknm::vcdl_report(&features.0, &annotations.0, k)).py()?.vcdl)
}

/// `(retained, removed)` for a `{tag: vcdl}` mapping.
#[pyfunction]
fn filter_tags(vcdl: BTreeMap<String, f64>, threshold: f64) -> (Vec<String>, BTreeMap<String, f64>) {
    let f = wknm::filter_tags(&wknm::VcdlReport { k: 0, vcdl }, threshold);
    (f.retained, f.removed)
}

#[pyfunction]
fn visual_similarity_matrix(
    tags: Vec<String>,
    features: &PyFeatureMatrix,
    annotations: &PyAnnotationIndex,
    py: Python<'_>,
) -> PyResult<PySimilarityMatrix> {
    py.detach(|| tagsim::visual_similarity_matrix(&tags, &features.0, &annotations.0))
        .py()
        .map(PySimilarityMatrix)
}

/// `(matrix, tags_without_vectors)`.
#[pyfunction]
fn semantic_similarity_matrix(
    tags: Vec<String>,
    vectors: &PyWordVectors,
) -> PyResult<(PySimilarityMatrix, Vec<String>)> {
    let (m, missing) = tagsim::semantic_similarity_matrix(&tags, &vectors.0).py()?;
    Ok((PySimilarityMatrix(m), missing))
}

#[pyfunction]
fn merge_similarity(
    visual: &PySimilarityMatrix,
    semantic: &PySimilarityMatrix,
    alpha: f64,
) -> PyResult<PySimilarityMatrix> {
    tagsim::merge_similarity(&visual.0, &semantic.0, alpha)
        .py()
        .map(PySimilarityMatrix)
}

#[pyfunction]
#[pyo3(signature = (matrix, num_themes, seed=0))]
fn spectral_cluster(matrix: &PySimilarityMatrix, num_themes: usize, seed: u64) -> PyResult<PyThemeAssignment> {
    themecluster::spectral_cluster(&matrix.0, num_themes, seed)
        .py()
        .map(PyThemeAssignment)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("label vectors differ in length"));
    }
    Ok(themecluster::adjusted_rand_index(&a, &b))
}

/// Vote-weighted share of neighbours carrying `theme`; `image_themes[i]`
/// lists the themes of training image `i`.
#[pyfunction]
fn theme_proximity(votes: BTreeMap<usize, u32>, theme: usize, image_themes: Vec<Vec<usize>>) -> PyResult<f64> {
    if let Some(&img) = votes.keys().find(|&&i| i >= image_themes.len()) {
        return Err(PyValueError::new_err(format!("image {img} has no theme list")));
    }
    let corpus = ThemeCorpus {
        image_to_themes: image_themes
            .into_iter()
            .map(|t| t.into_iter().collect::<BTreeSet<_>>().into_iter().collect())
            .collect(),
        theme_frequencies: BTreeMap::new(),
        num_themes: theme + 1,
    };
    tasks::theme_proximity(&HybridNeighborSet { votes }, theme, &corpus).py()
}

#[pyfunction]
fn average_precision(ranking: Vec<usize>, relevant: BTreeSet<usize>) -> f64 {
    let r = RankedResult {
        query: String::new(),
        ranked: ranking.into_iter().map(|i| (i, 0.0)).collect(),
    };
    tasks::average_precision(&r, &relevant)
}

type PerTagScores = BTreeMap<String, (f64, f64)>;

/// `{tag: (precision, recall)}` plus the means, from per-image predictions.
#[pyfunction]
fn precision_recall(
    predictions: Vec<Vec<String>>,
    ground_truth: &PyAnnotationIndex,
) -> PyResult<(PerTagScores, f64, f64)> {
    let labels: Vec<tasks::LabelResult> = predictions
        .into_iter()
        .enumerate()
        .map(|(image, tags)| tasks::LabelResult {
            image,
            predicted_tags: tags.into_iter().map(|t| (t, 0.0)).collect(),
        })
        .collect();
    let r = tasks::precision_recall(&labels, &ground_truth.0).py()?;
    let per_tag = r
        .per_query
        .iter()
        .map(|q| (q.id.clone(), (q.values[0], q.values[1])))
        .collect();
    Ok((per_tag, r.aggregate["mean_precision"], r.aggregate["mean_recall"]))
}

/// Runs the pipeline from a JSON config string; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, overrides=Vec::new()))]
fn run_pipeline(config_json: &str, overrides: Vec<String>, py: Python<'_>) -> PyResult<String> {
    let mut cfg = PipelineConfig::from_json_str(config_json).py()?;
    cfg.apply_overrides(&overrides).py()?;
    let manifest = py
        .detach(|| pipeline::run_pipeline(&cfg))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(manifest.to_json())
}

#[pymodule]
fn pyvtheme(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMatrix>()?;
    m.add_class::<PyAnnotationIndex>()?;
    m.add_class::<PyWordVectors>()?;
    m.add_class::<PySyntheticCorpus>()?;
    m.add_class::<PySimilarityMatrix>()?;
    m.add_class::<PyThemeAssignment>()?;
    m.add_class::<PyThemeForest>()?;
    m.add_function(wrap_pyfunction!(directed_modified_hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(tag_visual_distance, m)?)?;
    m.add_function(wrap_pyfunction!(knn_images, m)?)?;
    m.add_function(wrap_pyfunction!(vcdl_report, m)?)?;
    m.add_function(wrap_pyfunction!(filter_tags, m)?)?;
    m.add_function(wrap_pyfunction!(visual_similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(semantic_similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(merge_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_cluster, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(theme_proximity, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
