//! Randomized binary forest over image features. Splits maximize the
//! information gain of theme histograms; leaves keep the training images
//! that reach them. A query's hybrid neighbours are the training images
//! sharing a leaf with it, voted once per tree.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::themecluster::ThemeCorpus;

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    /// Samples with `x[feature_dim] <= threshold` go left.
    Internal {
        feature_dim: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { training_images: Vec<usize> },
}

/// Node arena; `nodes[0]` is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf node `x` falls into.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Internal {
                    feature_dim,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature_dim] <= *threshold { *left } else { *right },
                TreeNode::Leaf { .. } => return at,
            }
        }
    }

    pub fn leaf(&self, x: &[f64]) -> &[usize] {
        match &self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { training_images } => training_images,
            TreeNode::Internal { .. } => unreachable!("leaf_index stops at leaves"),
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { training_images } => Some(training_images.as_slice()),
            TreeNode::Internal { .. } => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Feature dims sampled per node; `None` means `ceil(sqrt(D))`.
    pub mtry: Option<usize>,
    pub thresholds_per_dim: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 400,
            max_depth: 20,
            min_leaf: 5,
            mtry: None,
            thresholds_per_dim: 8,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::InvalidParameter("num_trees must be >= 1".into()));
        }
        if self.thresholds_per_dim == 0 {
            return Err(Error::InvalidParameter("thresholds_per_dim must be >= 1".into()));
        }
        if self.mtry == Some(0) {
            return Err(Error::InvalidParameter("mtry must be >= 1".into()));
        }
        Ok(())
    }

    fn mtry_for(&self, dims: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (dims as f64).sqrt().ceil() as usize)
            .clamp(1, dims)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeForest {
    pub version: u32,
    pub params: ForestParams,
    pub num_dims: usize,
    /// Ids of the training rows; leaf entries index into this list.
    pub image_ids: Vec<String>,
    /// Training rows left out because they carry no theme.
    pub excluded: Vec<usize>,
    pub trees: Vec<Tree>,
}

impl ThemeForest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let forest: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if forest.version != FOREST_FORMAT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("unsupported forest version {}", forest.version),
            });
        }
        Ok(forest)
    }
}

/// Training-image votes: how many trees put each image in the query's leaf.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HybridNeighborSet {
    pub votes: BTreeMap<usize, u32>,
}

impl HybridNeighborSet {
    pub fn len(&self) -> usize {
        self.votes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.votes.is_empty()
    }

    pub fn total_votes(&self) -> u64 {
        self.votes.values().map(|&v| v as u64).sum()
    }

    /// Images by descending vote, ties by ascending index.
    pub fn ranked(&self) -> Vec<(usize, u32)> {
        let mut v: Vec<(usize, u32)> = self.votes.iter().map(|(&i, &c)| (i, c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

/// Mixes the master seed with a tree index (splitmix64 finalizer).
pub fn child_seed(master: u64, tree: usize) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tree as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shannon entropy (bits) of a count histogram.
pub fn entropy(counts: &[u32]) -> f64 {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

fn histogram(samples: &[usize], themes: &ThemeCorpus) -> Vec<u32> {
    let mut h = vec![0u32; themes.num_themes];
    for &s in samples {
        for &t in themes.themes_of(s) {
            h[t] += 1;
        }
    }
    h
}

fn gain_from(parent: &[u32], left: &[u32], n_left: usize, n: usize) -> f64 {
    let right: Vec<u32> = parent.iter().zip(left).map(|(p, l)| p - l).collect();
    let wl = n_left as f64 / n as f64;
    let wr = (n - n_left) as f64 / n as f64;
    entropy(parent) - wl * entropy(left) - wr * entropy(&right)
}

/// Information gain of splitting `samples` at `x[feature_dim] <= threshold`.
/// Each image contributes one count per theme it carries; child entropies
/// are weighted by image counts. Returns `-inf` if either side is empty.
pub fn split_gain(
    samples: &[usize],
    features: &FeatureMatrix,
    themes: &ThemeCorpus,
    feature_dim: usize,
    threshold: f64,
) -> f64 {
    let (left, right): (Vec<usize>, Vec<usize>) = samples
        .iter()
        .partition(|&&s| features.row(s)[feature_dim] <= threshold);
    if left.is_empty() || right.is_empty() {
        return f64::NEG_INFINITY;
    }
    gain_from(
        &histogram(samples, themes),
        &histogram(&left, themes),
        left.len(),
        samples.len(),
    )
}

struct Builder<'a> {
    features: &'a FeatureMatrix,
    themes: &'a ThemeCorpus,
    params: ForestParams,
    mtry: usize,
}

struct Split {
    dim: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    /// Best candidate split of a node. For each sampled dim the thresholds
    /// are sorted and every sample is bucketed once, so all thresholds of
    /// the dim are scored in a single pass.
    fn best_split(&self, samples: &[usize], parent: &[u32], rng: &mut ChaCha8Rng) -> Option<Split> {
        let d = self.features.num_dims();
        let k = self.themes.num_themes;
        let mut best: Option<Split> = None;
        for dim in sample(rng, d, self.mtry).into_iter() {
            let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
                let x = self.features.row(s)[dim];
                (lo.min(x), hi.max(x))
            });
            if lo >= hi {
                continue;
            }
            let mut thresholds: Vec<f64> = (0..self.params.thresholds_per_dim)
                .map(|_| rng.random_range(lo..hi))
                .collect();
            thresholds.sort_by(f64::total_cmp);

            // bucket b holds samples with thresholds[b-1] < x <= thresholds[b]
            let nb = thresholds.len() + 1;
            let mut bucket_hist = vec![0u32; nb * k];
            let mut bucket_n = vec![0usize; nb];
            for &s in samples {
                let x = self.features.row(s)[dim];
                let b = thresholds.partition_point(|t| *t < x);
                bucket_n[b] += 1;
                for &t in self.themes.themes_of(s) {
                    bucket_hist[b * k + t] += 1;
                }
            }
            let mut left = vec![0u32; k];
            let mut n_left = 0;
            for (i, &threshold) in thresholds.iter().enumerate() {
                n_left += bucket_n[i];
                for (l, h) in left.iter_mut().zip(&bucket_hist[i * k..(i + 1) * k]) {
                    *l += h;
                }
                if n_left == 0 || n_left == samples.len() {
                    continue;
                }
                let gain = gain_from(parent, &left, n_left, samples.len());
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Split { dim, threshold, gain });
                }
            }
        }
        best
    }

    fn grow(&self, samples: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>) -> usize {
        let at = nodes.len();
        nodes.push(TreeNode::Leaf {
            training_images: Vec::new(),
        });
        let parent = histogram(&samples, self.themes);
        let split = if depth >= self.params.max_depth
            || samples.len() <= self.params.min_leaf
            || entropy(&parent) == 0.0
        {
            None
        } else {
            self.best_split(&samples, &parent, rng).filter(|s| s.gain > 0.0)
        };
        match split {
            None => {
                nodes[at] = TreeNode::Leaf {
                    training_images: samples,
                };
            }
            Some(Split { dim, threshold, .. }) => {
                let (l, r): (Vec<usize>, Vec<usize>) = samples
                    .into_iter()
                    .partition(|&s| self.features.row(s)[dim] <= threshold);
                let left = self.grow(l, depth + 1, rng, nodes);
                let right = self.grow(r, depth + 1, rng, nodes);
                nodes[at] = TreeNode::Internal {
                    feature_dim: dim,
                    threshold,
                    left,
                    right,
                };
            }
        }
        at
    }
}

/// Grows `params.num_trees` trees in parallel. Every tree sees the full
/// training set (no bootstrap); tree `t` draws from `child_seed(seed, t)`.
pub fn build_forest(
    features: &FeatureMatrix,
    themes: &ThemeCorpus,
    params: &ForestParams,
) -> Result<ThemeForest> {
    params.validate()?;
    if themes.image_to_themes.len() != features.num_images() {
        return Err(Error::Shape(format!(
            "{} theme-labelled images vs {} feature rows",
            themes.image_to_themes.len(),
            features.num_images()
        )));
    }
    let (training, excluded): (Vec<usize>, Vec<usize>) =
        (0..features.num_images()).partition(|&i| !themes.themes_of(i).is_empty());
    if training.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} training image(s) carry no theme and are left out of the forest",
            excluded.len()
        );
    }
    let builder = Builder {
        features,
        themes,
        params: *params,
        mtry: params.mtry_for(features.num_dims()),
    };
    let trees = (0..params.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(params.seed, t));
            let mut nodes = Vec::new();
            builder.grow(training.clone(), 0, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect();
    Ok(ThemeForest {
        version: FOREST_FORMAT_VERSION,
        params: *params,
        num_dims: features.num_dims(),
        image_ids: features.image_ids().to_vec(),
        excluded,
        trees,
    })
}

/// Routes `query` down every tree and counts, per training image, the trees
/// whose leaf holds it.
pub fn query_forest(forest: &ThemeForest, query: &[f64]) -> Result<HybridNeighborSet> {
    if query.len() != forest.num_dims {
        return Err(Error::DimensionMismatch {
            expected: forest.num_dims,
            got: query.len(),
        });
    }
    let leaves: Vec<&[usize]> = forest.trees.par_iter().map(|t| t.leaf(query)).collect();
    let mut hns = HybridNeighborSet::default();
    for leaf in leaves {
        for &img in leaf {
            *hns.votes.entry(img).or_default() += 1;
        }
    }
    Ok(hns)
}
