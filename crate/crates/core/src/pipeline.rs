//! End-to-end orchestration: filter → similarity → cluster → forest → tasks.
//!
//! Every stage persists its artifacts under the output directory and later
//! stages read them back from disk, so a cached stage and a freshly run one
//! feed identical bytes downstream. `manifest.json` records parameters,
//! seeds and SHA-256 hashes of every input and artifact; a stage whose key
//! (stage name, input hashes, parameters) matches the previous manifest and
//! whose artifacts still verify is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::{
    expand_vocabulary, load_annotations, load_feature_matrix, load_word_vectors, AnnotationIndex,
    FeatureMatrix, MatrixManifest,
};
use crate::error::{Error, Result};
use crate::tagsim::{
    distances_to_similarity, merge_similarity, semantic_similarity_matrix, visual_distance_matrix,
    SimilarityMatrix,
};
use crate::tasks::{
    knsm, label_image, mean_average_precision, precision_recall, query_all, rank_by_theme,
    rank_neighbors, LabelResult, RankedResult,
};
use crate::themecluster::{relabel_corpus, spectral_cluster, ThemeAssignment};
use crate::themeforest::{build_forest, ForestParams, ThemeForest, FOREST_FORMAT_VERSION};
use crate::wknm::{filter_tags, vcdl_report, TagFilter, VcdlReport, DEFAULT_K};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub word_vectors: PathBuf,
    pub output_dir: PathBuf,
    /// Separate evaluation corpus; when absent the training corpus is split.
    #[serde(default)]
    pub test_features: Option<PathBuf>,
    #[serde(default)]
    pub test_annotations: Option<PathBuf>,
}

/// Image `i` is held out for evaluation when `i % holdout_every ==
/// holdout_every - 1`. Ignored when test paths are given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub holdout_every: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { holdout_every: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WknmConfig {
    pub k: usize,
    pub vcdl_threshold: f64,
}

impl Default for WknmConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            vcdl_threshold: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingEmbeddings {
    /// Keep the tag with zero semantic similarity to every other tag.
    Zero,
    /// Remove the tag before building the matrices.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    pub alpha: f64,
    pub missing_embeddings: MissingEmbeddings,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            missing_embeddings: MissingEmbeddings::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub num_themes: usize,
    /// Themes on fewer evaluation images than this are left out of keyword
    /// evaluation.
    pub min_frequency: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_themes: 100,
            min_frequency: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasksConfig {
    pub top_k: usize,
    pub k_max: usize,
    pub top_m: usize,
    pub max_tags: usize,
}

impl Default for TasksConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            k_max: 10,
            top_m: 3,
            max_tags: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub wknm: WknmConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub forest: ForestParams,
    #[serde(default)]
    pub tasks: TasksConfig,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Applies `section.key=value` overrides. The value is parsed as JSON
    /// and falls back to a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.trim().split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        *self = serde_json::from_value(doc).map_err(|e| invalid(format!("override: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        if p.test_features.is_some() != p.test_annotations.is_some() {
            return Err(invalid("test_features and test_annotations must be given together"));
        }
        if p.test_features.is_none() && self.split.holdout_every < 2 {
            return Err(invalid("split.holdout_every must be >= 2 without a test corpus"));
        }
        if self.wknm.k == 0 {
            return Err(invalid("wknm.k must be >= 1"));
        }
        if !self.wknm.vcdl_threshold.is_finite() {
            return Err(invalid("wknm.vcdl_threshold must be finite"));
        }
        if !(0.0..=1.0).contains(&self.similarity.alpha) {
            return Err(invalid("similarity.alpha must lie in [0, 1]"));
        }
        if self.cluster.num_themes < 2 {
            return Err(invalid("cluster.num_themes must be >= 2"));
        }
        self.forest.validate()?;
        let t = &self.tasks;
        if t.top_k == 0 || t.k_max == 0 || t.top_m == 0 || t.max_tags == 0 {
            return Err(invalid("tasks counts must all be >= 1"));
        }
        Ok(())
    }

    /// The config as recorded in the manifest: everything but the output
    /// directory, so runs into different directories compare equal.
    fn recorded(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["paths"]
            .as_object_mut()
            .expect("paths is an object")
            .remove("output_dir");
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Filter,
    Similarity,
    Cluster,
    Forest,
    Tasks,
    Manifest,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Filter,
        Stage::Similarity,
        Stage::Cluster,
        Stage::Forest,
        Stage::Tasks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Filter => "filter",
            Stage::Similarity => "similarity",
            Stage::Cluster => "cluster",
            Stage::Forest => "forest",
            Stage::Tasks => "tasks",
            Stage::Manifest => "manifest",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Filter => 10,
            Stage::Similarity => 11,
            Stage::Cluster => 12,
            Stage::Forest => 13,
            Stage::Tasks => 14,
            Stage::Manifest => 15,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.stage.exit_code()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub key: String,
    pub cache_hit: bool,
    pub params: Value,
    /// Input name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the output directory to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub forest_format: u32,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    /// The exact text written to `manifest.json`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Re-hashes every artifact; returns the relative paths that are
    /// missing or differ.
    pub fn verify(&self, output_dir: impl AsRef<Path>) -> Vec<String> {
        let dir = output_dir.as_ref();
        self.stages
            .iter()
            .flat_map(|s| &s.artifacts)
            .filter(|(rel, hash)| sha256_file(&dir.join(rel)).ok().as_ref() != Some(*hash))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Manifest path plus its binary payload.
fn matrix_files(path: &Path) -> Result<Vec<PathBuf>> {
    let manifest: MatrixManifest = read_json(path)?;
    let bin = path.parent().unwrap_or(Path::new("")).join(manifest.data);
    Ok(vec![path.to_path_buf(), bin])
}

struct Split {
    train_features: FeatureMatrix,
    train_annotations: AnnotationIndex,
    test_features: FeatureMatrix,
    test_annotations: AnnotationIndex,
}

fn load_split(cfg: &PipelineConfig) -> Result<Split> {
    let p = &cfg.paths;
    let features = load_feature_matrix(&p.features)?;
    let annotations = load_annotations(&p.annotations, features.image_ids())?;
    if let (Some(tf), Some(ta)) = (&p.test_features, &p.test_annotations) {
        let test_features = load_feature_matrix(tf)?;
        if test_features.num_dims() != features.num_dims() {
            return Err(Error::DimensionMismatch {
                expected: features.num_dims(),
                got: test_features.num_dims(),
            });
        }
        let test_annotations = load_annotations(ta, test_features.image_ids())?;
        return Ok(Split {
            train_features: features,
            train_annotations: annotations,
            test_features,
            test_annotations,
        });
    }
    let h = cfg.split.holdout_every;
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..features.num_images()).partition(|i| i % h == h - 1);
    if test.is_empty() || train.is_empty() {
        return Err(invalid(format!(
            "holdout_every = {h} leaves an empty split of {} images",
            features.num_images()
        )));
    }
    Ok(Split {
        train_features: features.select_rows(&train)?,
        train_annotations: annotations.select_images(&train)?,
        test_features: features.select_rows(&test)?,
        test_annotations: annotations.select_images(&test)?,
    })
}

/// Hashes of the source files a stage reads.
fn source_inputs(cfg: &PipelineConfig, word_vectors: bool) -> Result<BTreeMap<String, String>> {
    let p = &cfg.paths;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for (name, path) in [("features", &p.features)]
        .into_iter()
        .chain(p.test_features.as_ref().map(|t| ("test_features", t)))
    {
        let parts = matrix_files(path)?;
        files.push((name.to_string(), parts[0].clone()));
        files.push((format!("{name}.payload"), parts[1].clone()));
    }
    files.push(("annotations".into(), p.annotations.clone()));
    if let Some(ta) = &p.test_annotations {
        files.push(("test_annotations".into(), ta.clone()));
    }
    if word_vectors {
        files.push(("word_vectors".into(), p.word_vectors.clone()));
    }
    files
        .into_iter()
        .map(|(name, path)| Ok((name, sha256_file(&path)?)))
        .collect()
}

struct Runner {
    out: PathBuf,
    previous: Option<RunManifest>,
    records: Vec<StageRecord>,
}

impl Runner {
    fn upstream(&self, stage: Stage, inputs: &mut BTreeMap<String, String>) {
        let rec = self.records.iter().find(|r| r.stage == stage).expect("upstream ran");
        inputs.insert(format!("{stage}.key"), rec.key.clone());
        for (rel, hash) in &rec.artifacts {
            inputs.insert(rel.clone(), hash.clone());
        }
    }

    fn cached(&self, stage: Stage, key: &str) -> Option<StageRecord> {
        let prev = self.previous.as_ref()?.stage(stage)?;
        let intact = prev.key == key
            && prev
                .artifacts
                .iter()
                .all(|(rel, h)| sha256_file(&self.out.join(rel)).ok().as_ref() == Some(h));
        intact.then(|| StageRecord {
            cache_hit: true,
            ..prev.clone()
        })
    }

    /// Runs `body` unless the stage is cached. `body` returns the artifact
    /// paths it wrote.
    fn stage(
        &mut self,
        stage: Stage,
        params: Value,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let key_doc = serde_json::json!({"stage": stage, "inputs": inputs, "params": params});
        let key = hex::encode(Sha256::digest(key_doc.to_string().as_bytes()));
        if let Some(rec) = self.cached(stage, &key) {
            log::info!("{stage}: cache hit");
            self.records.push(rec);
            return Ok(());
        }
        log::info!("{stage}: running");
        let dir = self.out.join(stage.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let written = body(&dir)?;
        let artifacts = written
            .iter()
            .map(|p| {
                let rel = p
                    .strip_prefix(&self.out)
                    .expect("artifact inside output dir")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                Ok((rel, sha256_file(p)?))
            })
            .collect::<Result<_>>()?;
        self.records.push(StageRecord {
            stage,
            key,
            cache_hit: false,
            params,
            inputs,
            artifacts,
        });
        Ok(())
    }
}

fn param_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("params serialize")
}

fn filter_stage(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let split = load_split(cfg)?;
    let report = vcdl_report(&split.train_features, &split.train_annotations, cfg.wknm.k)?;
    let filter = filter_tags(&report, cfg.wknm.vcdl_threshold);
    log::info!(
        "filter: kept {} of {} tags (threshold {})",
        filter.retained.len(),
        report.vcdl.len(),
        cfg.wknm.vcdl_threshold
    );
    let vcdl_path = dir.join("vcdl.json");
    let tags_path = dir.join("tags.json");
    write_json(&vcdl_path, &report)?;
    write_json(&tags_path, &filter)?;
    Ok(vec![vcdl_path, tags_path])
}

fn similarity_stage(cfg: &PipelineConfig, out: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let split = load_split(cfg)?;
    let filter: TagFilter = read_json(&out.join("filter/tags.json"))?;
    let vocab = expand_vocabulary(filter.retained.iter().map(String::as_str));
    let (vectors, _) = load_word_vectors(&cfg.paths.word_vectors, &vocab)?;
    let mut tags = filter.retained;
    if cfg.similarity.missing_embeddings == MissingEmbeddings::Drop {
        let before = tags.len();
        tags.retain(|t| vectors.resolve(t).is_some());
        if tags.len() < before {
            log::warn!("similarity: dropped {} tag(s) without word vectors", before - tags.len());
        }
    }
    let vdist = visual_distance_matrix(&tags, &split.train_features, &split.train_annotations)?;
    let vsim = distances_to_similarity(&vdist)?;
    let (ssim, _) = semantic_similarity_matrix(&tags, &vectors)?;
    let joint = merge_similarity(&vsim, &ssim, cfg.similarity.alpha)?;
    let mut written = Vec::new();
    for (name, m) in [("vdist", &vdist), ("vsim", &vsim), ("ssim", &ssim), ("joint", &joint)] {
        let p = dir.join(format!("{name}.json"));
        m.save(&p)?;
        written.extend(matrix_files(&p)?);
    }
    Ok(written)
}

fn cluster_stage(cfg: &PipelineConfig, out: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let joint = SimilarityMatrix::load(out.join("similarity/joint.json"))?;
    let themes = spectral_cluster(&joint, cfg.cluster.num_themes, cfg.cluster.seed)?;
    let p = dir.join("themes.json");
    themes.save(&p)?;
    Ok(vec![p])
}

fn forest_stage(cfg: &PipelineConfig, out: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let split = load_split(cfg)?;
    let themes = ThemeAssignment::load(out.join("cluster/themes.json"))?;
    let corpus = relabel_corpus(&split.train_annotations, &themes, 0);
    let forest = build_forest(&split.train_features, &corpus, &cfg.forest)?;
    let p = dir.join("forest.json");
    forest.save(&p)?;
    Ok(vec![p])
}

fn tasks_stage(cfg: &PipelineConfig, out: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let t = &cfg.tasks;
    let split = load_split(cfg)?;
    let forest = ThemeForest::load(out.join("forest/forest.json"))?;
    let themes = ThemeAssignment::load(out.join("cluster/themes.json"))?;
    let vcdl: VcdlReport = read_json(&out.join("filter/vcdl.json"))?;
    let train_themes = relabel_corpus(&split.train_annotations, &themes, 0);
    let test_themes = relabel_corpus(&split.test_annotations, &themes, cfg.cluster.min_frequency);
    let test = &split.test_features;
    let ids = test.image_ids();
    let sets = query_all(&forest, test)?;
    let mut written = Vec::new();

    let depth = t.top_k.max(t.k_max);
    let rankings: Vec<RankedResult> = sets
        .iter()
        .zip(ids)
        .map(|(hns, id)| rank_neighbors(id.as_str(), hns, depth))
        .collect();
    let query_tags: Vec<Vec<String>> = (0..test.num_images())
        .map(|i| split.test_annotations.tag_names_of(i).map(str::to_owned).collect())
        .collect();
    let report = knsm(&query_tags, &rankings, &split.train_annotations, t.k_max)?;
    report.save(dir.join("knsm"))?;
    written.extend([dir.join("knsm.json"), dir.join("knsm.csv")]);
    let examples: Vec<RankedResult> = rankings
        .into_iter()
        .map(|mut r| {
            r.ranked.truncate(t.top_k);
            r
        })
        .collect();
    let p = dir.join("example_search.json");
    write_json(&p, &examples)?;
    written.push(p);

    let mut keyword_rankings = Vec::new();
    let mut relevance = Vec::new();
    for theme in test_themes.retained_themes() {
        let members: BTreeSet<&str> = themes.tags_of(theme).iter().map(String::as_str).collect();
        relevance.push(
            (0..test.num_images())
                .filter(|&i| split.test_annotations.tag_names_of(i).any(|t| members.contains(t)))
                .collect::<BTreeSet<usize>>(),
        );
        keyword_rankings.push(rank_by_theme(format!("theme:{theme}"), &sets, theme, &train_themes)?);
    }
    let report = mean_average_precision(&keyword_rankings, &relevance)?;
    report.save(dir.join("map"))?;
    written.extend([dir.join("map.json"), dir.join("map.csv")]);
    let p = dir.join("keyword_search.json");
    let top: Vec<RankedResult> = keyword_rankings
        .into_iter()
        .map(|mut r| {
            r.ranked.truncate(t.top_k);
            r
        })
        .collect();
    write_json(&p, &top)?;
    written.push(p);

    let labels: Vec<LabelResult> = (0..test.num_images())
        .map(|i| {
            label_image(
                &forest,
                i,
                test.row(i),
                &split.train_annotations,
                &vcdl,
                t.top_m,
                t.max_tags,
            )
        })
        .collect::<Result<_>>()?;
    let p = dir.join("labels.json");
    write_json(&p, &labels)?;
    written.push(p);
    let report = precision_recall(&labels, &split.test_annotations)?;
    report.save(dir.join("pr"))?;
    written.extend([dir.join("pr.json"), dir.join("pr.csv")]);
    Ok(written)
}

/// Validates `cfg`, runs or reuses each stage, and writes `manifest.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunManifest, StageError> {
    let fail = |stage| move |source| StageError { stage, source };
    cfg.validate().map_err(fail(Stage::Config))?;
    let out = cfg.paths.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| fail(Stage::Config)(Error::io(&out, e)))?;
    let previous = RunManifest::load(out.join(MANIFEST_FILE)).ok();
    let mut r = Runner {
        out: out.clone(),
        previous,
        records: Vec::new(),
    };

    let split_params = if cfg.paths.test_features.is_some() {
        Value::Null
    } else {
        param_value(&cfg.split)
    };

    let s = Stage::Filter;
    let inputs = source_inputs(cfg, false).map_err(fail(s))?;
    let params = serde_json::json!({"split": split_params, "wknm": param_value(&cfg.wknm)});
    r.stage(s, params, inputs, |dir| filter_stage(cfg, dir)).map_err(fail(s))?;

    let s = Stage::Similarity;
    let mut inputs = source_inputs(cfg, true).map_err(fail(s))?;
    r.upstream(Stage::Filter, &mut inputs);
    let params = serde_json::json!({"split": split_params, "similarity": param_value(&cfg.similarity)});
    r.stage(s, params, inputs, |dir| similarity_stage(cfg, &out, dir)).map_err(fail(s))?;

    let s = Stage::Cluster;
    let mut inputs = BTreeMap::new();
    r.upstream(Stage::Similarity, &mut inputs);
    let params = serde_json::json!({"num_themes": cfg.cluster.num_themes, "seed": cfg.cluster.seed});
    r.stage(s, params, inputs, |dir| cluster_stage(cfg, &out, dir)).map_err(fail(s))?;

    let s = Stage::Forest;
    let mut inputs = source_inputs(cfg, false).map_err(fail(s))?;
    r.upstream(Stage::Cluster, &mut inputs);
    let params = serde_json::json!({
        "split": split_params,
        "forest": param_value(&cfg.forest),
    });
    r.stage(s, params, inputs, |dir| forest_stage(cfg, &out, dir)).map_err(fail(s))?;

    let s = Stage::Tasks;
    let mut inputs = source_inputs(cfg, false).map_err(fail(s))?;
    r.upstream(Stage::Filter, &mut inputs);
    r.upstream(Stage::Forest, &mut inputs);
    let params = serde_json::json!({
        "split": split_params,
        "min_frequency": cfg.cluster.min_frequency,
        "tasks": param_value(&cfg.tasks),
    });
    r.stage(s, params, inputs, |dir| tasks_stage(cfg, &out, dir)).map_err(fail(s))?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        forest_format: FOREST_FORMAT_VERSION,
        config: cfg.recorded(),
        seeds: [
            ("cluster".to_string(), cfg.cluster.seed),
            ("forest".to_string(), cfg.forest.seed),
        ]
        .into_iter()
        .collect(),
        stages: r.records,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json())
        .map_err(|e| fail(Stage::Manifest)(Error::io(&path, e)))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    fn config(dir: &Path) -> PipelineConfig {
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            num_clusters: 3,
            images_per_cluster: 20,
            dims: 6,
            tags_per_cluster: 2,
            noise_sigma: 0.5,
            seed: 3,
        })
        .unwrap();
        let p = corpus.write(dir.join("data")).unwrap();
        let mut cfg = PipelineConfig::from_json_str(&format!(
            r#"{{"paths": {{"features": {:?}, "annotations": {:?}, "word_vectors": {:?}, "output_dir": {:?}}}}}"#,
            p.features,
            p.annotations,
            p.word_vectors,
            dir.join("out")
        ))
        .unwrap();
        cfg.apply_overrides(&["cluster.num_themes=3", "forest.num_trees=10", "wknm.k=5"])
            .unwrap();
        cfg
    }

    #[test]
    fn defaults_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        assert_eq!(cfg.similarity.alpha, 0.15);
        assert_eq!(cfg.tasks.top_m, 3);
        assert_eq!(cfg.forest.num_trees, 10);
        cfg.apply_overrides(&["similarity.missing_embeddings=drop", "similarity.alpha=0.5"])
            .unwrap();
        assert_eq!(cfg.similarity.missing_embeddings, MissingEmbeddings::Drop);
        assert_eq!(cfg.similarity.alpha, 0.5);
        assert!(cfg.apply_overrides(&["nope.alpha=1"]).is_err());
        assert!(cfg.apply_overrides(&["similarity.alpha"]).is_err());
        assert!(cfg.apply_overrides(&["similarity.alpha=\"x\""]).is_err());
        let partial = PipelineConfig::from_json_str(
            r#"{"paths": {"features": "f", "annotations": "a", "word_vectors": "w", "output_dir": "o"},
                "forest": {"num_trees": 50}}"#,
        )
        .unwrap();
        assert_eq!(partial.forest.num_trees, 50);
        assert_eq!(partial.forest.min_leaf, 5);
    }

    #[test]
    fn validation_names_config_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.similarity.alpha = 1.5;
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_input_fails_in_filter() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.paths.annotations = dir.path().join("absent.jsonl");
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.stage, Stage::Filter);
        assert_eq!(err.exit_code(), 10);
    }

    #[test]
    fn too_many_themes_fails_in_cluster() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.cluster.num_themes = 50;
        assert_eq!(run_pipeline(&cfg).unwrap_err().stage, Stage::Cluster);
    }

    #[test]
    fn cache_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        let first = run_pipeline(&cfg).unwrap();
        assert_eq!(first.stages.len(), 5);
        assert!(first.stages.iter().all(|s| !s.cache_hit));
        assert!(first.verify(&cfg.paths.output_dir).is_empty());

        let second = run_pipeline(&cfg).unwrap();
        assert!(second.stages.iter().all(|s| s.cache_hit));

        cfg.similarity.alpha = 0.6;
        let third = run_pipeline(&cfg).unwrap();
        let hits: Vec<bool> = third.stages.iter().map(|s| s.cache_hit).collect();
        assert_eq!(hits, vec![true, false, false, false, false]);

        let tampered = cfg.paths.output_dir.join("cluster/themes.json");
        fs::write(&tampered, "{}").unwrap();
        assert_eq!(third.verify(&cfg.paths.output_dir), vec!["cluster/themes.json".to_string()]);
        let fourth = run_pipeline(&cfg).unwrap();
        assert!(!fourth.stage(Stage::Cluster).unwrap().cache_hit);
        assert!(fourth.verify(&cfg.paths.output_dir).is_empty());
    }
}
