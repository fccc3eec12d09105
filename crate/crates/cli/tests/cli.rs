use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vtheme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtheme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vtheme(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--out", s(dir), "--clusters", "3", "--images-per-cluster", "30", "--dims", "6",
        "--tags-per-cluster", "3", "--sigma", "0.5", "--seed", "4",
    ]);
}

#[test]
fn stepwise_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let features = d.join("features.json");
    let ann = d.join("annotations.jsonl");
    let stdout = ok(&[
        "filter", "--features", s(&features), "--annotations", s(&ann), "--k-neighbors", "5", "--out", s(&d.join("f")),
    ]);
    assert!(stdout.contains("kept 9 of 9 tags"), "{stdout}");

    let prefix = d.join("sim/m");
    fs::create_dir_all(d.join("sim")).unwrap();
    ok(&[
        "similarity", "--features", s(&features), "--annotations", s(&ann),
        "--word-vectors", s(&d.join("vectors.txt")), "--tags", s(&d.join("f/tags.json")),
        "--alpha", "0.5", "--out-prefix", s(&prefix),
    ]);
    for name in ["vdist", "vsim", "ssim", "joint"] {
        assert!(d.join(format!("sim/m_{name}.json")).exists());
        assert!(d.join(format!("sim/m_{name}.bin")).exists());
    }

    let themes = d.join("themes.json");
    ok(&["cluster", "--matrix", s(&d.join("sim/m_joint.json")), "--num-themes", "3", "--out", s(&themes)]);
    let themes_doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&themes).unwrap()).unwrap();
    assert_eq!(themes_doc["num_themes"], 3);

    let forest = d.join("forest.json");
    ok(&[
        "build-forest", "--features", s(&features), "--annotations", s(&ann), "--themes", s(&themes),
        "--trees", "20", "--out", s(&forest),
    ]);

    let out = ok(&["search-example", "--forest", s(&forest), "--features", s(&features), "--index", "0", "--top-k", "3"]);
    let results: serde_json::Value = serde_json::from_str(&out).unwrap();
    let ranked = results[0]["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    for r in ranked {
        assert_eq!(r[0].as_u64().unwrap() % 3, 0, "neighbour outside the query's cluster");
    }

    let by_tag = |kw: &str| {
        ok(&[
            "search-keyword", "--forest", s(&forest), "--themes", s(&themes), "--train-annotations", s(&ann),
            "--features", s(&features), "--keyword", kw, "--top-k", "5",
        ])
    };
    let a: serde_json::Value = serde_json::from_str(&by_tag("c1t0")).unwrap();
    let b: serde_json::Value = serde_json::from_str(&by_tag("c1t2")).unwrap();
    assert_eq!(a["ranked"], b["ranked"]);
    assert!(!vtheme(&[
        "search-keyword", "--forest", s(&forest), "--themes", s(&themes), "--train-annotations", s(&ann),
        "--features", s(&features), "--keyword", "xyzzy",
    ])
    .status
    .success());

    let labels = d.join("labels.json");
    ok(&[
        "label", "--forest", s(&forest), "--features", s(&features), "--train-annotations", s(&ann),
        "--vcdl", s(&d.join("f/vcdl.json")), "--out", s(&labels),
    ]);
    let pr = ok(&[
        "evaluate", "--task", "pr", "--features", s(&features), "--test-annotations", s(&ann),
        "--labels", s(&labels), "--out", s(&d.join("eval/pr")),
    ]);
    let pr: serde_json::Value = serde_json::from_str(&pr).unwrap();
    assert!(pr["mean_precision"].as_f64().unwrap() > 0.9);
    assert!(d.join("eval/pr.csv").exists());

    let k = ok(&[
        "evaluate", "--task", "knsm", "--forest", s(&forest), "--train-annotations", s(&ann),
        "--features", s(&features), "--test-annotations", s(&ann), "--k-max", "4", "--out", s(&d.join("eval/knsm")),
    ]);
    let k: serde_json::Value = serde_json::from_str(&k).unwrap();
    assert!(k["sum_knsm@4"].as_f64().unwrap() >= k["sum_knsm@1"].as_f64().unwrap());

    let m = ok(&[
        "evaluate", "--task", "map", "--forest", s(&forest), "--themes", s(&themes), "--train-annotations", s(&ann),
        "--features", s(&features), "--test-annotations", s(&ann), "--out", s(&d.join("eval/map")),
    ]);
    let m: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert!(m["mean_ap"].as_f64().unwrap() > 0.9);

    let missing = vtheme(&[
        "evaluate", "--task", "map", "--features", s(&features), "--test-annotations", s(&ann), "--out", s(&d.join("x")),
    ]);
    assert!(!missing.status.success());
}

fn write_config(d: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "paths": {
            "features": d.join("features.json"),
            "annotations": d.join("annotations.jsonl"),
            "word_vectors": d.join("vectors.txt"),
            "output_dir": d.join("run"),
        },
        "wknm": {"k": 5},
        "cluster": {"num_themes": 3},
        "forest": {"num_trees": 20},
    });
    let p = d.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn pipeline_exit_codes_and_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let cfg = write_config(d);
    let first = ok(&["pipeline", "--config", s(&cfg)]);
    assert_eq!(first.matches(" ran").count(), 5, "{first}");
    let second = ok(&["pipeline", "--config", s(&cfg)]);
    assert_eq!(second.matches("cached").count(), 5, "{second}");
    let third = ok(&["pipeline", "--config", s(&cfg), "--override", "similarity.alpha=0.9"]);
    assert!(third.starts_with("filter     cached"), "{third}");
    assert_eq!(third.matches(" ran").count(), 4);

    let code = |extra: &[&str]| {
        let mut args = vec!["pipeline", "--config", s(&cfg)];
        args.extend_from_slice(extra);
        vtheme(&args).status.code()
    };
    assert_eq!(code(&["--override", "similarity.alpha=2"]), Some(2));
    assert_eq!(code(&["--override", "bogus=1"]), Some(2));
    assert_eq!(code(&["--override", "cluster.num_themes=40"]), Some(12));
    assert_eq!(code(&["--override", "paths.word_vectors=\"/nonexistent\""]), Some(11));
    assert_eq!(vtheme(&["pipeline", "--config", "/nonexistent.json"]).status.code(), Some(2));
}
