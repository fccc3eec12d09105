//! Seeded planted-structure corpora for tests and demos.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    write_annotations, write_feature_matrix, write_word_vectors, AnnotationIndex, FeatureMatrix,
    WordVectorTable,
};
use crate::error::{Error, Result};

const CENTER_SCALE: f64 = 10.0;
const EMBEDDING_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_clusters: usize,
    pub images_per_cluster: usize,
    pub dims: usize,
    pub tags_per_cluster: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0
            || self.images_per_cluster == 0
            || self.dims == 0
            || self.tags_per_cluster == 0
        {
            return Err(Error::InvalidParameter(
                "synthetic spec counts must all be >= 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A generated corpus plus its planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub features: FeatureMatrix,
    pub annotations: AnnotationIndex,
    pub vectors: WordVectorTable,
    /// Planted cluster of each image, in canonical row order.
    pub image_cluster: Vec<usize>,
    /// Planted cluster of each tag.
    pub tag_cluster: BTreeMap<String, usize>,
}

/// Locations of a corpus written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub features: PathBuf,
    pub annotations: PathBuf,
    pub word_vectors: PathBuf,
}

impl SyntheticCorpus {
    /// Writes `features.json`/`features.bin`, `annotations.jsonl` and
    /// `vectors.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<CorpusPaths> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = CorpusPaths {
            features: dir.join("features.json"),
            annotations: dir.join("annotations.jsonl"),
            word_vectors: dir.join("vectors.txt"),
        };
        write_feature_matrix(&self.features, &paths.features)?;
        write_annotations(&self.annotations, self.features.image_ids(), &paths.annotations)?;
        write_word_vectors(&self.vectors, &paths.word_vectors)?;
        Ok(paths)
    }
}

pub fn synthetic_tag_name(cluster: usize, j: usize) -> String {
    format!("c{cluster}t{j}")
}

fn cluster_center(c: usize, spec: &SyntheticSpec) -> Vec<f64> {
    let mut center = vec![0.0; spec.dims];
    if spec.dims >= spec.num_clusters {
        center[c] = CENTER_SCALE;
    } else if spec.dims >= 2 {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / spec.num_clusters as f64;
        center[0] = CENTER_SCALE * angle.cos();
        center[1] = CENTER_SCALE * angle.sin();
    } else {
        center[0] = CENTER_SCALE * (c + 1) as f64;
    }
    center
}

/// Image `i` belongs to cluster `i % num_clusters`. Every tag of cluster `c`
/// annotates every image of cluster `c` and nothing else. Word vectors of a
/// cluster's tags are jittered copies of a cluster-specific axis.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = spec.num_clusters * spec.images_per_cluster;
    let centers: Vec<Vec<f64>> = (0..spec.num_clusters)
        .map(|c| cluster_center(c, spec))
        .collect();

    let mut data = Vec::with_capacity(n * spec.dims);
    let mut image_cluster = Vec::with_capacity(n);
    let mut per_image = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_clusters;
        image_cluster.push(c);
        for &x in &centers[c] {
            let v = if spec.noise_sigma > 0.0 {
                x + noise.sample(&mut rng)
            } else {
                x
            };
            data.push(v);
        }
        per_image.push(
            (0..spec.tags_per_cluster)
                .map(|j| synthetic_tag_name(c, j))
                .collect::<Vec<_>>(),
        );
    }
    let ids = (0..n).map(|i| format!("img{i:05}")).collect();
    let features = FeatureMatrix::with_ids(n, spec.dims, data, ids)?;
    let annotations = AnnotationIndex::from_image_tags(&per_image)?;

    let emb_dim = spec.num_clusters + 4;
    let jitter = Normal::new(0.0, EMBEDDING_JITTER).expect("constant sigma");
    let mut entries = BTreeMap::new();
    let mut tag_cluster = BTreeMap::new();
    for c in 0..spec.num_clusters {
        for j in 0..spec.tags_per_cluster {
            let mut v: Vec<f64> = (0..emb_dim).map(|_| jitter.sample(&mut rng)).collect();
            v[c] += 1.0;
            let name = synthetic_tag_name(c, j);
            tag_cluster.insert(name.clone(), c);
            entries.insert(name, v);
        }
    }
    let vectors = WordVectorTable::new(emb_dim, entries)?;

    Ok(SyntheticCorpus {
        features,
        annotations,
        vectors,
        image_cluster,
        tag_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_clusters: 2,
            images_per_cluster: 3,
            dims: 2,
            tags_per_cluster: 2,
            noise_sigma: sigma,
            seed: 7,
        }
    }

    #[test]
    fn shape_of_small_spec() {
        let c = generate_synthetic_corpus(&small(0.0)).unwrap();
        assert_eq!(c.features.num_images(), 6);
        assert_eq!(c.annotations.num_tags(), 4);
        for t in 0..4 {
            assert_eq!(c.annotations.images_of(t).len(), 3);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_corpus(&small(0.3)).unwrap();
        let b = generate_synthetic_corpus(&small(0.3)).unwrap();
        assert_eq!(a, b);
        let bits = |m: &FeatureMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
    }

    #[test]
    fn written_files_load_back() {
        let c = generate_synthetic_corpus(&small(0.3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = c.write(dir.path()).unwrap();
        let f = crate::corpus::load_feature_matrix(&p.features).unwrap();
        assert_eq!(f.image_ids(), c.features.image_ids());
        let a = crate::corpus::load_annotations(&p.annotations, f.image_ids()).unwrap();
        assert_eq!(a, c.annotations);
        let vocab = crate::corpus::expand_vocabulary(a.tags().iter().map(String::as_str));
        let (v, missing) = crate::corpus::load_word_vectors(&p.word_vectors, &vocab).unwrap();
        assert!(missing.is_empty());
        assert_eq!(v, c.vectors);
    }

    #[test]
    fn rejects_zero_counts() {
        let mut s = small(0.0);
        s.dims = 0;
        assert!(generate_synthetic_corpus(&s).is_err());
        let mut s = small(0.0);
        s.noise_sigma = -1.0;
        assert!(generate_synthetic_corpus(&s).is_err());
    }
}
