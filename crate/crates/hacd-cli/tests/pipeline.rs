//! End-to-end pipeline checks through the dispatch entry point.

use std::fs;
use std::path::PathBuf;

use hacd_cli::dispatch;

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hacd_cli_{}_{}", std::process::id(), name));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> i32 {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    dispatch(&owned)
}

fn path_str(p: &PathBuf) -> String {
    p.to_str().unwrap().to_string()
}

/// Small fast scene for pipeline runs.
fn write_scene_config(dir: &PathBuf) -> PathBuf {
    let cfg = dir.join("scene.cfg");
    fs::write(
        &cfg,
        "height = 32\nwidth = 32\nbands = 8\nanomaly_count = 3\nanomaly_radius = 1\nseed = 11\n\
         c1 = 2\nc2 = 4\nproj_dims = 8,8,4\npred_dims = 2,4\ncbam_reduction = 2\npatch_size = 7\n\
         epochs = 2\nbatch_size = 8\n",
    )
    .unwrap();
    cfg
}

#[test]
fn synth_detect_evaluate_pipeline() {
    let dir = temp_dir("pipeline");
    let cfg = write_scene_config(&dir);
    let out = dir.join("scene");
    assert_eq!(
        run(&[
            "synth",
            "--out",
            &path_str(&out),
            "--config",
            &path_str(&cfg)
        ]),
        0
    );
    for file in ["t1.bin", "t1.bin.hdr", "t2.bin", "t2.bin.hdr", "mask.csv"] {
        assert!(out.join(file).exists(), "missing {}", file);
    }

    let det = dir.join("det");
    assert_eq!(
        run(&[
            "detect",
            "--t1",
            &path_str(&out.join("t1.bin")),
            "--t2",
            &path_str(&out.join("t2.bin")),
            "--method",
            "diff_rx",
            "--out",
            &path_str(&det),
        ]),
        0
    );
    assert!(det.join("diff_rx.pgm").exists());
    assert!(det.join("diff_rx.csv").exists());

    let eval = dir.join("eval");
    assert_eq!(
        run(&[
            "evaluate",
            "--map",
            &path_str(&det.join("diff_rx.csv")),
            "--mask",
            &path_str(&out.join("mask.csv")),
            "--method",
            "diff_rx",
            "--out",
            &path_str(&eval),
        ]),
        0
    );
    let metrics = fs::read_to_string(eval.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"auc\""), "{}", metrics);
    assert!(metrics.contains("\"method\": \"diff_rx\""), "{}", metrics);
    assert!(eval.join("roc.csv").exists());
    let roc = fs::read_to_string(eval.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n"));
}

#[test]
fn unknown_method_is_usage_error_listing_methods() {
    let dir = temp_dir("badmethod");
    let status = run(&[
        "detect",
        "--t1",
        "a.bin",
        "--t2",
        "b.bin",
        "--method",
        "nosuch",
        "--out",
        &path_str(&dir),
    ]);
    assert_eq!(status, 2);
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["synth", "--frazzle", "3"]), 2);
    assert_eq!(run(&[]), 2);
}

#[test]
fn module_errors_exit_one() {
    let dir = temp_dir("moderr");
    // Nonexistent cube file.
    assert_eq!(
        run(&[
            "detect",
            "--t1",
            &path_str(&dir.join("missing.bin")),
            "--t2",
            &path_str(&dir.join("missing.bin")),
            "--method",
            "cc",
            "--out",
            &path_str(&dir),
        ]),
        1
    );
}

#[test]
fn synth_reruns_are_byte_identical() {
    let dir = temp_dir("determinism");
    let cfg = write_scene_config(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        assert_eq!(
            run(&[
                "synth",
                "--out",
                &path_str(out),
                "--config",
                &path_str(&cfg)
            ]),
            0
        );
    }
    for file in ["t1.bin", "t1.bin.hdr", "t2.bin", "t2.bin.hdr", "mask.csv"] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", file);
    }
}

#[test]
fn train_then_bench_lists_all_seven_methods() {
    let dir = temp_dir("bench7");
    let cfg = write_scene_config(&dir);
    let scene = dir.join("scene");
    assert_eq!(
        run(&[
            "synth",
            "--out",
            &path_str(&scene),
            "--config",
            &path_str(&cfg)
        ]),
        0
    );

    let t1 = path_str(&scene.join("t1.bin"));
    let t2 = path_str(&scene.join("t2.bin"));
    let trained = dir.join("trained");
    assert_eq!(
        run(&[
            "train",
            "--t1",
            &t1,
            "--t2",
            &t2,
            "--out",
            &path_str(&trained),
            "--config",
            &path_str(&cfg),
        ]),
        0
    );
    assert!(trained.join("model.ckpt").exists());
    assert!(trained.join("model.ckpt.meta").exists());
    let history = fs::read_to_string(trained.join("loss_history.csv")).unwrap();
    assert!(history.starts_with("epoch,mean_loss\n"));
    assert_eq!(history.lines().count(), 3, "header + 2 epochs");

    // Without a checkpoint: six classical rows.
    let bench6 = dir.join("bench6");
    assert_eq!(
        run(&[
            "bench",
            "--t1",
            &t1,
            "--t2",
            &t2,
            "--mask",
            &path_str(&scene.join("mask.csv")),
            "--out",
            &path_str(&bench6),
            "--config",
            &path_str(&cfg),
        ]),
        0
    );
    let table = fs::read_to_string(bench6.join("bench.csv")).unwrap();
    assert_eq!(table.lines().count(), 7, "header + 6 methods: {}", table);

    // With the checkpoint: all seven methods.
    let bench7 = dir.join("bench7");
    assert_eq!(
        run(&[
            "bench",
            "--t1",
            &t1,
            "--t2",
            &t2,
            "--mask",
            &path_str(&scene.join("mask.csv")),
            "--out",
            &path_str(&bench7),
            "--checkpoint",
            &path_str(&trained.join("model.ckpt")),
            "--config",
            &path_str(&cfg),
        ]),
        0
    );
    let table = fs::read_to_string(bench7.join("bench.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,auc");
    assert_eq!(lines.len(), 8, "header + 7 methods: {}", table);
    for (line, method) in lines[1..]
        .iter()
        .zip(["cc", "ce", "usfa", "diff_rx", "sacd", "sdhacd", "mtcnet"])
    {
        assert!(line.starts_with(&format!("{},", method)), "row {:?}", line);
        let auc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn failed_detect_leaves_no_partial_outputs() {
    let dir = temp_dir("nopartial");
    let cfg = write_scene_config(&dir);
    let scene_a = dir.join("a");
    assert_eq!(
        run(&[
            "synth",
            "--out",
            &path_str(&scene_a),
            "--config",
            &path_str(&cfg)
        ]),
        0
    );
    // A second scene with a different band count.
    let cfg_b = dir.join("b.cfg");
    fs::write(
        &cfg_b,
        "height = 32\nwidth = 32\nbands = 5\nanomaly_count = 2\nanomaly_radius = 1\n",
    )
    .unwrap();
    let scene_b = dir.join("b");
    assert_eq!(
        run(&[
            "synth",
            "--out",
            &path_str(&scene_b),
            "--config",
            &path_str(&cfg_b)
        ]),
        0
    );

    let out = dir.join("out");
    let status = run(&[
        "detect",
        "--t1",
        &path_str(&scene_a.join("t1.bin")),
        "--t2",
        &path_str(&scene_b.join("t2.bin")),
        "--method",
        "cc",
        "--out",
        &path_str(&out),
    ]);
    assert_eq!(status, 1, "mismatched cubes must fail");
    assert!(!out.join("cc.pgm").exists());
    assert!(!out.join("cc.csv").exists());
}

#[test]
fn config_type_error_names_key_and_exits_one() {
    let dir = temp_dir("cfgerr");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "epochs = soon\n").unwrap();
    let status = run(&[
        "synth",
        "--out",
        &path_str(&dir.join("o")),
        "--config",
        &path_str(&cfg),
    ]);
    assert_eq!(status, 1);
}

#[test]
fn no_align_flag_changes_detect_output() {
    let dir = temp_dir("align");
    let cfg = write_scene_config(&dir);
    let scene = dir.join("scene");
    assert_eq!(
        run(&[
            "synth",
            "--out",
            &path_str(&scene),
            "--config",
            &path_str(&cfg)
        ]),
        0
    );
    let t1 = path_str(&scene.join("t1.bin"));
    let t2 = path_str(&scene.join("t2.bin"));
    let with_align = dir.join("with");
    let without_align = dir.join("without");
    for (out, flag) in [(&with_align, "--align"), (&without_align, "--no-align")] {
        assert_eq!(
            run(&[
                "detect",
                "--t1",
                &t1,
                "--t2",
                &t2,
                "--method",
                "cc",
                "--out",
                &path_str(out),
                flag
            ]),
            0
        );
    }
    let a = fs::read(with_align.join("cc.csv")).unwrap();
    let b = fs::read(without_align.join("cc.csv")).unwrap();
    assert_ne!(a, b, "alignment must affect the score map");
}
