//! In-process smoke tests of the command-line surface: each subcommand is
//! driven through `main_entry` against a tiny generated corpus, and exit
//! codes are checked for the usage and runtime failure paths.

use std::path::Path;

use indret::cli::main_entry;
use indret::formats::{report, runfile, tensorfile};

fn run(args: &[&str]) -> i32 {
    main_entry(std::iter::once("indret").chain(args.iter().copied()))
}

fn make_corpus(dir: &Path) {
    let code = run(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        "3",
        "--relevant",
        "2",
        "--distractors",
        "3",
        "--grid",
        "4x4",
        "--side",
        "32",
        "--seed",
        "7",
    ]);
    assert_eq!(code, 0, "synth failed");
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    make_corpus(root);
    let manifest = root.join("manifest.json");
    assert!(manifest.is_file());
    assert!(root.join("annotations.json").is_file());
    assert!(root.join("images/q00_query.png").is_file());
    let mstr = manifest.to_str().unwrap();

    // Self-pair tensor: the mean-centered correlation of a patch with
    // itself is exactly 1 along the diagonal.
    let mtf = root.join("self.mtf");
    let code = run(&[
        "tensor",
        "--manifest",
        mstr,
        "--target",
        "q00_query",
        "--query",
        "q00_query",
        "--metrics",
        "cosine",
        "--out",
        mtf.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "tensor failed");
    let t = tensorfile::load(&mtf).unwrap();
    assert_eq!(t.spatial_shape(), &[4, 4, 4, 4]);
    for i in 0..4 {
        for j in 0..4 {
            let v = t.views[0].values.at(&[i, j, i, j]);
            assert!((v - 1.0).abs() < 1e-12, "diagonal {i},{j} = {v}");
        }
    }

    let ckpt = root.join("model.ckpt");
    let code = run(&[
        "train",
        "--manifest",
        mstr,
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "4",
        "--seed",
        "7",
    ]);
    assert_eq!(code, 0, "train failed");
    assert!(ckpt.is_file());

    let run_path = root.join("base.run");
    let code = run(&[
        "rank",
        "--manifest",
        mstr,
        "--model",
        ckpt.to_str().unwrap(),
        "--out",
        run_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "rank failed");
    let runs = runfile::load(&run_path).unwrap();
    assert_eq!(runs.len(), 3);
    // 12 images per corpus, one excluded as the query's own.
    assert!(runs.iter().all(|r| r.entries().len() == 11));

    let report_path = root.join("report.json");
    let code = run(&[
        "eval",
        "--manifest",
        mstr,
        "--run",
        run_path.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "eval failed");
    let rep = report::load(&report_path).unwrap();
    for name in ["map", "map@5", "map@10", "map@20"] {
        let agg = rep.aggregate.get(name).expect(name);
        assert!((0.0..=1.0).contains(&agg.mean), "{name} = {}", agg.mean);
    }

    let explain_dir = root.join("explain");
    let code = run(&[
        "explain",
        "--manifest",
        mstr,
        "--model",
        ckpt.to_str().unwrap(),
        "--target",
        "q00_rel00",
        "--query",
        "q00_query",
        "--out",
        explain_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "explain failed");
    for suffix in ["target.csv", "query.csv", "target.png", "query.png"] {
        let p = explain_dir.join(format!("q00_rel00_vs_q00_query_{suffix}"));
        assert!(p.is_file(), "missing {}", p.display());
    }

    let prf_path = root.join("prf.run");
    let code = run(&[
        "prf",
        "--manifest",
        mstr,
        "--model",
        ckpt.to_str().unwrap(),
        "--run",
        run_path.to_str().unwrap(),
        "--out",
        prf_path.to_str().unwrap(),
        "--prf-depth",
        "3",
    ]);
    assert_eq!(code, 0, "prf failed");
    let reranked = runfile::load(&prf_path).unwrap();
    assert_eq!(reranked.len(), runs.len());
    for (a, b) in runs.iter().zip(&reranked) {
        let mut ids: Vec<_> = a.entries().iter().map(|e| e.target_id.clone()).collect();
        let mut rids: Vec<_> = b.entries().iter().map(|e| e.target_id.clone()).collect();
        ids.sort();
        rids.sort();
        assert_eq!(ids, rids, "feedback must permute, not drop, candidates");
    }
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--cases", "10", "--seed", "3"]), 0);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["rank", "--manifest"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Missing manifest.
    assert_eq!(
        run(&[
            "rank",
            "--manifest",
            root.join("absent.json").to_str().unwrap(),
            "--model",
            root.join("absent.ckpt").to_str().unwrap(),
            "--out",
            root.join("out.run").to_str().unwrap(),
        ]),
        1
    );
    make_corpus(root);
    let mstr = root.join("manifest.json");
    // Unknown query id.
    assert_eq!(
        run(&[
            "tensor",
            "--manifest",
            mstr.to_str().unwrap(),
            "--target",
            "q00_query",
            "--query",
            "bogus",
            "--out",
            root.join("x.mtf").to_str().unwrap(),
        ]),
        1
    );
    // Eval needs exactly one of --run / --kfold.
    assert_eq!(run(&["eval", "--manifest", mstr.to_str().unwrap()]), 1);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, "seed = 7\ngrid_rows = 4\ngrid_cols = 4\nresolution = 32\n").unwrap();
    let code = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "synth",
        "--out",
        root.to_str().unwrap(),
        "--classes",
        "2",
        "--relevant",
        "1",
        "--distractors",
        "2",
    ]);
    assert_eq!(code, 0);
    let manifest = indret::formats::manifest::load_manifest(&root.join("manifest.json")).unwrap();
    assert_eq!((manifest.grid.rows, manifest.grid.cols), (4, 4));
    assert_eq!(manifest.resolution, 32);

    std::fs::write(root.join("bad.toml"), "sprocket = 1\n").unwrap();
    assert_eq!(
        run(&[
            "--config",
            root.join("bad.toml").to_str().unwrap(),
            "gradcheck",
            "--cases",
            "1",
        ]),
        1
    );
}
