//! Applications on top of a theme forest (example search, keyword search,
//! labelling) and the metrics used to evaluate them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_tag, AnnotationIndex, FeatureMatrix};
use crate::error::{Error, Result};
use crate::themecluster::{ThemeAssignment, ThemeCorpus};
use crate::themeforest::{query_forest, HybridNeighborSet, ThemeForest};
use crate::wknm::VcdlReport;

/// Images ranked by descending score, ties by ascending image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: String,
    pub ranked: Vec<(usize, f64)>,
}

impl RankedResult {
    pub fn from_scores(query: impl Into<String>, mut scored: Vec<(usize, f64)>) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            query: query.into(),
            ranked: scored,
        }
    }

    pub fn images(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranked.iter().map(|(i, _)| *i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub image: usize,
    /// `(tag, vcdl)`, VCDL descending.
    pub predicted_tags: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

impl Aggregation {
    fn prefix(self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub values: Vec<f64>,
}

/// Per-query metric rows plus aggregates that are a pure function of them
/// (`<sum|mean>_<column>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub parameters: BTreeMap<String, f64>,
    pub aggregation: Aggregation,
    pub columns: Vec<String>,
    pub per_query: Vec<QueryMetrics>,
    pub aggregate: BTreeMap<String, f64>,
    /// Queries left out of the aggregate, with the reason.
    pub excluded: Vec<String>,
}

impl MetricsReport {
    fn build(
        task: &str,
        parameters: BTreeMap<String, f64>,
        aggregation: Aggregation,
        columns: Vec<String>,
        per_query: Vec<QueryMetrics>,
        excluded: Vec<String>,
    ) -> Self {
        let mut r = Self {
            task: task.to_string(),
            parameters,
            aggregation,
            columns,
            per_query,
            aggregate: BTreeMap::new(),
            excluded,
        };
        r.aggregate = r.recompute_aggregate();
        r
    }

    pub fn recompute_aggregate(&self) -> BTreeMap<String, f64> {
        let n = self.per_query.len();
        self.columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let sum: f64 = self.per_query.iter().map(|q| q.values[c]).sum();
                let v = match self.aggregation {
                    Aggregation::Sum => sum,
                    Aggregation::Mean if n == 0 => 0.0,
                    Aggregation::Mean => sum / n as f64,
                };
                (format!("{}_{name}", self.aggregation.prefix()), v)
            })
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.aggregate.get(key).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per query, then one `aggregate` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for q in &self.per_query {
            let mut row = vec![q.id.clone()];
            row.extend(q.values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        let mut row = vec!["aggregate".to_string()];
        for c in &self.columns {
            let key = format!("{}_{c}", self.aggregation.prefix());
            row.push(self.aggregate[&key].to_string());
        }
        w.write_record(&row)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Csv(csv::Error::from(e.into_error())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<prefix>.json` and `<prefix>.csv`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let json = prefix.as_ref().with_extension("json");
        let csv = prefix.as_ref().with_extension("csv");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

/// Ranks hybrid neighbours by vote and keeps the first `top_k`.
pub fn rank_neighbors(query: impl Into<String>, hns: &HybridNeighborSet, top_k: usize) -> RankedResult {
    let mut r = RankedResult::from_scores(
        query,
        hns.votes.iter().map(|(&i, &v)| (i, v as f64)).collect(),
    );
    r.ranked.truncate(top_k);
    r
}

pub fn example_search(
    forest: &ThemeForest,
    query_id: &str,
    query: &[f64],
    top_k: usize,
) -> Result<RankedResult> {
    if top_k == 0 {
        return Err(Error::InvalidParameter("top_k must be >= 1".into()));
    }
    Ok(rank_neighbors(query_id, &query_forest(forest, query)?, top_k))
}

/// Hybrid neighbour sets of every row of `queries`, in row order.
pub fn query_all(forest: &ThemeForest, queries: &FeatureMatrix) -> Result<Vec<HybridNeighborSet>> {
    (0..queries.num_images())
        .into_par_iter()
        .map(|i| query_forest(forest, queries.row(i)))
        .collect()
}

/// Cumulative count of query tags found among the top-K results, for
/// K = 1..=k_max. `query_tags[q]` are the tags of query `q`; result images
/// index `train`. Shorter rankings contribute only what they have.
pub fn knsm(
    query_tags: &[Vec<String>],
    results: &[RankedResult],
    train: &AnnotationIndex,
    k_max: usize,
) -> Result<MetricsReport> {
    if query_tags.len() != results.len() {
        return Err(Error::Shape(format!(
            "{} queries but {} result lists",
            query_tags.len(),
            results.len()
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("k_max must be >= 1".into()));
    }
    let per_query = query_tags
        .iter()
        .zip(results)
        .map(|(tags, result)| {
            let tag_ids: Vec<Option<usize>> = tags.iter().map(|t| train.tag_index(t)).collect();
            let mut running = 0.0;
            let mut values = Vec::with_capacity(k_max);
            for k in 0..k_max {
                if let Some(&(img, _)) = result.ranked.get(k) {
                    running += tag_ids
                        .iter()
                        .flatten()
                        .filter(|&&t| train.has_tag(img, t))
                        .count() as f64;
                }
                values.push(running);
            }
            QueryMetrics {
                id: result.query.clone(),
                values,
            }
        })
        .collect();
    Ok(MetricsReport::build(
        "knsm",
        [("k_max".to_string(), k_max as f64)].into_iter().collect(),
        Aggregation::Sum,
        (1..=k_max).map(|k| format!("knsm@{k}")).collect(),
        per_query,
        Vec::new(),
    ))
}

/// Vote-weighted share of hybrid neighbours carrying `theme`.
pub fn theme_proximity(hns: &HybridNeighborSet, theme: usize, themes: &ThemeCorpus) -> Result<f64> {
    let total = hns.total_votes();
    if total == 0 {
        return Err(Error::EmptyNeighborSet);
    }
    let hit: u64 = hns
        .votes
        .iter()
        .filter(|(&img, _)| themes.has_theme(img, theme))
        .map(|(_, &v)| v as u64)
        .sum();
    Ok(hit as f64 / total as f64)
}

/// Theme id for a keyword: a member tag of some theme, or a theme number.
pub fn resolve_keyword(themes: &ThemeAssignment, keyword: &str) -> Result<usize> {
    let k = normalize_tag(keyword);
    if let Some(t) = themes.theme_of(&k) {
        return Ok(t);
    }
    match k.parse::<usize>() {
        Ok(t) if t < themes.num_themes() => Ok(t),
        _ => Err(Error::UnknownKeyword(keyword.to_string())),
    }
}

/// Scores every query image by its proximity to `theme` given precomputed
/// hybrid neighbour sets.
pub fn rank_by_theme(
    query: impl Into<String>,
    neighbor_sets: &[HybridNeighborSet],
    theme: usize,
    train_themes: &ThemeCorpus,
) -> Result<RankedResult> {
    let scored = neighbor_sets
        .iter()
        .enumerate()
        .map(|(i, hns)| Ok((i, theme_proximity(hns, theme, train_themes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedResult::from_scores(query, scored))
}

/// Ranks the rows of `test_features` for a keyword. Every member tag of a
/// theme yields the same ranking.
pub fn keyword_search(
    forest: &ThemeForest,
    keyword: &str,
    themes: &ThemeAssignment,
    test_features: &FeatureMatrix,
    train_themes: &ThemeCorpus,
) -> Result<RankedResult> {
    let theme = resolve_keyword(themes, keyword)?;
    let sets = query_all(forest, test_features)?;
    rank_by_theme(format!("theme:{theme}"), &sets, theme, train_themes)
}

/// Average precision of one ranking against its relevant set.
pub fn average_precision(ranking: &RankedResult, relevant: &BTreeSet<usize>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, img) in ranking.images().enumerate() {
        if relevant.contains(&img) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// MAP over keywords. Keywords with no relevant item are excluded from the
/// mean and listed in `excluded`.
pub fn mean_average_precision(
    rankings: &[RankedResult],
    relevance: &[BTreeSet<usize>],
) -> Result<MetricsReport> {
    if rankings.len() != relevance.len() {
        return Err(Error::Shape(format!(
            "{} rankings but {} relevance sets",
            rankings.len(),
            relevance.len()
        )));
    }
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (r, rel) in rankings.iter().zip(relevance) {
        if rel.is_empty() {
            excluded.push(format!("{}: no relevant items", r.query));
        } else {
            per_query.push(QueryMetrics {
                id: r.query.clone(),
                values: vec![average_precision(r, rel)],
            });
        }
    }
    Ok(MetricsReport::build(
        "map",
        BTreeMap::new(),
        Aggregation::Mean,
        vec!["ap".to_string()],
        per_query,
        excluded,
    ))
}

/// Labels a query image: pool the tags of the `m` best-voted hybrid
/// neighbours and keep the `n` with the highest VCDL (ties lexicographic).
pub fn label_image(
    forest: &ThemeForest,
    query_image: usize,
    query: &[f64],
    train: &AnnotationIndex,
    vcdl: &VcdlReport,
    m: usize,
    n: usize,
) -> Result<LabelResult> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter("m and n must be >= 1".into()));
    }
    let hns = query_forest(forest, query)?;
    let pooled: BTreeSet<&str> = hns
        .ranked()
        .into_iter()
        .take(m)
        .flat_map(|(img, _)| train.tag_names_of(img))
        .collect();
    let mut tags = pooled
        .into_iter()
        .map(|t| {
            vcdl.get(t)
                .map(|v| (t.to_string(), v))
                .ok_or_else(|| Error::MissingVcdl(t.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    tags.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    tags.truncate(n);
    Ok(LabelResult {
        image: query_image,
        predicted_tags: tags,
    })
}

/// Per-tag precision and recall over every ground-truth tag, with their
/// means as aggregates. `prediction.image` indexes `ground_truth`.
pub fn precision_recall(predictions: &[LabelResult], ground_truth: &AnnotationIndex) -> Result<MetricsReport> {
    let nt = ground_truth.num_tags();
    let mut predicted = vec![0usize; nt];
    let mut correct = vec![0usize; nt];
    let mut outside = BTreeSet::new();
    for p in predictions {
        if p.image >= ground_truth.num_images() {
            return Err(Error::Shape(format!(
                "prediction for image {} but ground truth has {}",
                p.image,
                ground_truth.num_images()
            )));
        }
        for (tag, _) in &p.predicted_tags {
            match ground_truth.tag_index(tag) {
                Some(t) => {
                    predicted[t] += 1;
                    if ground_truth.has_tag(p.image, t) {
                        correct[t] += 1;
                    }
                }
                None => {
                    outside.insert(tag.clone());
                }
            }
        }
    }
    let per_query = (0..nt)
        .map(|t| {
            let occurrences = ground_truth.images_of(t).len();
            let precision = if predicted[t] == 0 {
                0.0
            } else {
                correct[t] as f64 / predicted[t] as f64
            };
            QueryMetrics {
                id: ground_truth.tag_name(t).to_string(),
                values: vec![precision, correct[t] as f64 / occurrences as f64],
            }
        })
        .collect();
    Ok(MetricsReport::build(
        "pr",
        BTreeMap::new(),
        Aggregation::Mean,
        vec!["precision".to_string(), "recall".to_string()],
        per_query,
        outside
            .into_iter()
            .map(|t| format!("{t}: predicted but absent from ground truth"))
            .collect(),
    ))
}
