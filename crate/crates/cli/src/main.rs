use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vtheme::corpus::{
    expand_vocabulary, generate_synthetic_corpus, load_annotations, load_feature_matrix,
    load_word_vectors, AnnotationIndex, FeatureMatrix, SyntheticSpec,
};
use vtheme::pipeline::{run_pipeline, PipelineConfig, Stage};
use vtheme::tagsim::{
    distances_to_similarity, merge_similarity, semantic_similarity_matrix, visual_distance_matrix,
    SimilarityMatrix,
};
use vtheme::tasks::{
    example_search, knsm, label_image, mean_average_precision, precision_recall, query_all,
    rank_by_theme, rank_neighbors, resolve_keyword, LabelResult, RankedResult,
};
use vtheme::themecluster::{relabel_corpus, spectral_cluster, ThemeAssignment};
use vtheme::themeforest::{build_forest, ForestParams, ThemeForest};
use vtheme::wknm::{filter_tags, vcdl_report, TagFilter, VcdlReport, DEFAULT_K};

#[derive(Parser)]
#[command(name = "vtheme", version, about = "Visual theme discovery and theme-forest search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Knsm,
    Map,
    Pr,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (features, annotations, word vectors).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 100)]
        images_per_cluster: usize,
        #[arg(long, default_value_t = 16)]
        dims: usize,
        #[arg(long, default_value_t = 10)]
        tags_per_cluster: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute per-tag VCDL and drop tags below the threshold.
    Filter {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long = "k-neighbors", default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long = "vcdl-threshold", default_value_t = 1.5)]
        threshold: f64,
        /// Directory for vcdl.json and tags.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build visual, semantic and joint tag similarity matrices.
    Similarity {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        word_vectors: PathBuf,
        /// tags.json from `filter`; all annotated tags when omitted.
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        alpha: f64,
        /// Writes <P>_vdist.json, <P>_vsim.json, <P>_ssim.json, <P>_joint.json.
        #[arg(long)]
        out_prefix: String,
    },
    /// Spectral clustering of a similarity matrix into themes.
    Cluster {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        num_themes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a theme forest on theme-relabelled images.
    BuildForest {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        themes: PathBuf,
        #[arg(long = "trees", default_value_t = 400)]
        num_trees: usize,
        #[arg(long, default_value_t = 20)]
        max_depth: usize,
        #[arg(long, default_value_t = 5)]
        min_leaf: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank training images for query rows by forest votes.
    SearchExample {
        #[arg(long)]
        forest: PathBuf,
        /// Feature file holding the queries.
        #[arg(long)]
        features: PathBuf,
        /// Query a single row; all rows when omitted.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Rank test images by proximity to the theme of a keyword.
    SearchKeyword {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        themes: PathBuf,
        /// Annotations of the forest's training images.
        #[arg(long)]
        train_annotations: PathBuf,
        /// Feature file of the images to rank.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        keyword: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Predict tags for every row of a feature file.
    Label {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        train_annotations: PathBuf,
        /// vcdl.json from `filter`.
        #[arg(long)]
        vcdl: PathBuf,
        #[arg(long, default_value_t = 3)]
        top_m: usize,
        #[arg(long, default_value_t = 5)]
        max_tags: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an evaluation report (writes <out>.json and <out>.csv).
    Evaluate {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        forest: Option<PathBuf>,
        #[arg(long)]
        themes: Option<PathBuf>,
        #[arg(long)]
        train_annotations: Option<PathBuf>,
        /// Themes on fewer test images are not evaluated (map task).
        #[arg(long, default_value_t = 3)]
        min_frequency: usize,
        /// Test feature file (image ids and queries).
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        test_annotations: PathBuf,
        /// labels.json from `label` (pr task).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, applied after the file.
        #[arg(long = "override")]
        overrides: Vec<String>,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_corpus(features: &Path, annotations: &Path) -> Result<(FeatureMatrix, AnnotationIndex)> {
    let f = load_feature_matrix(features)?;
    let a = load_annotations(annotations, f.image_ids())?;
    Ok((f, a))
}

fn forest_annotations(forest: &ThemeForest, path: &Path) -> Result<AnnotationIndex> {
    Ok(load_annotations(path, &forest.image_ids)?)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, task: &str) -> Result<&'a Path> {
    match v {
        Some(p) => Ok(p),
        None => bail!("--{flag} is required for --task {task}"),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            clusters,
            images_per_cluster,
            dims,
            tags_per_cluster,
            sigma,
            seed,
        } => {
            let corpus = generate_synthetic_corpus(&SyntheticSpec {
                num_clusters: clusters,
                images_per_cluster,
                dims,
                tags_per_cluster,
                noise_sigma: sigma,
                seed,
            })?;
            let p = corpus.write(&out)?;
            write_json(&out.join("planted_tags.json"), &corpus.tag_cluster)?;
            log::info!("wrote {}", p.features.display());
        }
        Command::Filter {
            features,
            annotations,
            k,
            threshold,
            out,
        } => {
            let (f, a) = load_corpus(&features, &annotations)?;
            let report = vcdl_report(&f, &a, k)?;
            let filter = filter_tags(&report, threshold);
            write_json(&out.join("vcdl.json"), &report)?;
            write_json(&out.join("tags.json"), &filter)?;
            println!("kept {} of {} tags", filter.retained.len(), report.vcdl.len());
        }
        Command::Similarity {
            features,
            annotations,
            word_vectors,
            tags,
            alpha,
            out_prefix,
        } => {
            let (f, a) = load_corpus(&features, &annotations)?;
            let tags = match tags {
                Some(p) => read_json::<TagFilter>(&p)?.retained,
                None => a.tags().to_vec(),
            };
            let vocab = expand_vocabulary(tags.iter().map(String::as_str));
            let (vectors, _) = load_word_vectors(&word_vectors, &vocab)?;
            let vdist = visual_distance_matrix(&tags, &f, &a)?;
            let vsim = distances_to_similarity(&vdist)?;
            let (ssim, _) = semantic_similarity_matrix(&tags, &vectors)?;
            let joint = merge_similarity(&vsim, &ssim, alpha)?;
            for (name, m) in [("vdist", &vdist), ("vsim", &vsim), ("ssim", &ssim), ("joint", &joint)] {
                m.save(format!("{out_prefix}_{name}.json"))?;
            }
        }
        Command::Cluster {
            matrix,
            num_themes,
            seed,
            out,
        } => {
            let m = SimilarityMatrix::load(&matrix)?;
            let themes = spectral_cluster(&m, num_themes, seed)?;
            themes.save(&out)?;
            println!("{} tags in {} themes", m.len(), themes.num_themes());
        }
        Command::BuildForest {
            features,
            annotations,
            themes,
            num_trees,
            max_depth,
            min_leaf,
            seed,
            out,
        } => {
            let (f, a) = load_corpus(&features, &annotations)?;
            let themes = ThemeAssignment::load(&themes)?;
            let corpus = relabel_corpus(&a, &themes, 0);
            let params = ForestParams {
                num_trees,
                max_depth,
                min_leaf,
                seed,
                ..ForestParams::default()
            };
            build_forest(&f, &corpus, &params)?.save(&out)?;
        }
        Command::SearchExample {
            forest,
            features,
            index,
            top_k,
        } => {
            let forest = ThemeForest::load(&forest)?;
            let q = load_feature_matrix(&features)?;
            let rows: Vec<usize> = match index {
                Some(i) if i < q.num_images() => vec![i],
                Some(i) => bail!("--index {i} out of range for {} rows", q.num_images()),
                None => (0..q.num_images()).collect(),
            };
            let results = rows
                .into_iter()
                .map(|i| example_search(&forest, &q.image_ids()[i], q.row(i), top_k))
                .collect::<vtheme::Result<Vec<RankedResult>>>()?;
            print_json(&results)?;
        }
        Command::SearchKeyword {
            forest,
            themes,
            train_annotations,
            features,
            keyword,
            top_k,
        } => {
            let forest = ThemeForest::load(&forest)?;
            let themes = ThemeAssignment::load(&themes)?;
            let train = forest_annotations(&forest, &train_annotations)?;
            let train_themes = relabel_corpus(&train, &themes, 0);
            let test = load_feature_matrix(&features)?;
            let theme = resolve_keyword(&themes, &keyword)?;
            let sets = query_all(&forest, &test)?;
            let mut r = rank_by_theme(keyword.as_str(), &sets, theme, &train_themes)?;
            r.ranked.truncate(top_k);
            print_json(&r)?;
        }
        Command::Label {
            forest,
            features,
            train_annotations,
            vcdl,
            top_m,
            max_tags,
            out,
        } => {
            let forest = ThemeForest::load(&forest)?;
            let train = forest_annotations(&forest, &train_annotations)?;
            let vcdl: VcdlReport = read_json(&vcdl)?;
            let q = load_feature_matrix(&features)?;
            let labels = (0..q.num_images())
                .map(|i| label_image(&forest, i, q.row(i), &train, &vcdl, top_m, max_tags))
                .collect::<vtheme::Result<Vec<LabelResult>>>()?;
            write_json(&out, &labels)?;
        }
        Command::Evaluate {
            task,
            forest,
            themes,
            train_annotations,
            min_frequency,
            features,
            test_annotations,
            labels,
            k_max,
            out,
        } => {
            let (test, test_ann) = load_corpus(&features, &test_annotations)?;
            let report = match task {
                Task::Knsm => {
                    let forest = ThemeForest::load(required(&forest, "forest", "knsm")?)?;
                    let train = forest_annotations(
                        &forest,
                        required(&train_annotations, "train-annotations", "knsm")?,
                    )?;
                    let rankings: Vec<RankedResult> = query_all(&forest, &test)?
                        .iter()
                        .zip(test.image_ids())
                        .map(|(h, id)| rank_neighbors(id.as_str(), h, k_max))
                        .collect();
                    let tags: Vec<Vec<String>> = (0..test.num_images())
                        .map(|i| test_ann.tag_names_of(i).map(str::to_owned).collect())
                        .collect();
                    knsm(&tags, &rankings, &train, k_max)?
                }
                Task::Map => {
                    let forest = ThemeForest::load(required(&forest, "forest", "map")?)?;
                    let themes = ThemeAssignment::load(required(&themes, "themes", "map")?)?;
                    let train = forest_annotations(
                        &forest,
                        required(&train_annotations, "train-annotations", "map")?,
                    )?;
                    let train_themes = relabel_corpus(&train, &themes, 0);
                    let test_themes = relabel_corpus(&test_ann, &themes, min_frequency);
                    let sets = query_all(&forest, &test)?;
                    let mut rankings = Vec::new();
                    let mut relevance = Vec::new();
                    for theme in test_themes.retained_themes() {
                        let members: BTreeSet<&str> =
                            themes.tags_of(theme).iter().map(String::as_str).collect();
                        relevance.push(
                            (0..test.num_images())
                                .filter(|&i| test_ann.tag_names_of(i).any(|t| members.contains(t)))
                                .collect(),
                        );
                        rankings.push(rank_by_theme(
                            format!("theme:{theme}"),
                            &sets,
                            theme,
                            &train_themes,
                        )?);
                    }
                    mean_average_precision(&rankings, &relevance)?
                }
                Task::Pr => {
                    let labels: Vec<LabelResult> = read_json(required(&labels, "labels", "pr")?)?;
                    precision_recall(&labels, &test_ann)?
                }
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            report.save(&out)?;
            let summary: BTreeMap<&String, f64> = report.aggregate.iter().map(|(k, v)| (k, *v)).collect();
            print_json(&summary)?;
        }
        Command::Pipeline { .. } => unreachable!("handled in main"),
    }
    Ok(())
}

fn pipeline(config: &Path, overrides: &[String]) -> ExitCode {
    let cfg = PipelineConfig::load(config).and_then(|mut c| c.apply_overrides(overrides).map(|_| c));
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    match run_pipeline(&cfg) {
        Ok(manifest) => {
            for s in &manifest.stages {
                println!("{:<10} {}", s.stage.as_str(), if s.cache_hit { "cached" } else { "ran" });
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Pipeline { config, overrides } = &cli.command {
        return pipeline(config, overrides);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
