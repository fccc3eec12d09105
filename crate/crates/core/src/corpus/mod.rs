//! Data model and file I/O: feature matrices, tag annotations, word
//! vectors, plus the seeded synthetic corpus generator.

mod annotations;
mod features;
mod synthetic;
mod wordvec;

pub use annotations::{load_annotations, normalize_tag, write_annotations, AnnotationIndex};
pub use features::{load_feature_matrix, write_feature_matrix, FeatureMatrix, MatrixManifest};
pub(crate) use features::{read_raw_matrix, write_raw_matrix};
pub use synthetic::{
    generate_synthetic_corpus, CorpusPaths, synthetic_tag_name, SyntheticCorpus, SyntheticSpec,
};
pub use wordvec::{expand_vocabulary, load_word_vectors, write_word_vectors, WordVectorTable};
