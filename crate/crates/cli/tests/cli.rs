//! End-to-end checks of the command line surface: exit codes, error
//! wording, seed resolution, and rerun determinism.

mod common;

use common::*;

use nssl_core::dataio::write_embeddings;
use nssl_core::tensor::Tensor;

#[test]
fn flops_reports_the_preset_total() {
    let out = nssl(&["flops"]);
    assert_ok(&out);
    let text = stdout(&out);
    let total: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total\t"))
        .expect("total line")
        .parse()
        .expect("numeric total");
    assert_eq!(total, 560_148_480);
    assert!(text.contains("GFLOPs"), "{text}");
}

#[test]
fn unknown_preset_is_an_input_error() {
    let out = nssl(&["flops", "--preset", "vitg14"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("vits8"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = nssl(&["flops", "--bogus"]);
    assert_code(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("--bogus"), "{err}");
}

#[test]
fn help_prints_and_exits_0() {
    let out = nssl(&["--help"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("train"));
}

#[test]
fn missing_subcommand_exits_1() {
    let out = nssl(&[]);
    assert_code(&out, 1);
}

#[test]
fn config_type_mismatch_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "epochs = \"ten\"\n").unwrap();
    let manifest = gen_dataset(dir.path(), 8, 1, 0);
    let out = nssl(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("epochs"), "{err}");
    assert!(err.contains("invalid type"), "{err}");
}

#[test]
fn unknown_config_key_suggests_the_nearest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "lr_scheduel = \"warmup_cosine\"\n").unwrap();
    let manifest = gen_dataset(dir.path(), 8, 1, 0);
    let out = nssl(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    assert!(
        stderr(&out).contains("did you mean `lr_schedule`?"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn workers_zero_is_rejected() {
    let out = nssl(&["--workers", "0", "flops"]);
    assert_code(&out, 1);
}

#[test]
fn train_embed_probe_round_trip_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 32, 1, 0);
    let cfg = tiny_train_config(dir.path());

    let train = |out_dir: &str| {
        nssl(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "3",
            "--seed",
            "7",
            "--out",
            out_dir,
        ])
    };
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    assert_ok(&train(run_a.to_str().unwrap()));
    assert_ok(&train(run_b.to_str().unwrap()));

    for name in ["checkpoint.nssl", "train_log.tsv", "exclusions.tsv"] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let log = std::fs::read_to_string(run_a.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4, "header plus three steps:\n{log}");

    let emb_dir = dir.path().join("emb");
    let out = nssl(&[
        "embed",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        run_a.join("checkpoint.nssl").to_str().unwrap(),
        "--out",
        emb_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);

    let probe_dir = dir.path().join("probe");
    let out = nssl(&[
        "probe",
        "--embeddings",
        emb_dir.join("embeddings.lemb").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--folds",
        "4",
        "--seed",
        "1",
        "--out",
        probe_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("balanced accuracy"));
    let report = std::fs::read_to_string(probe_dir.join("probe_report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["cells"], 32);
    assert_eq!(v["classes"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_resolution_prefers_flag_over_env() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(dir.path(), 8, 1, 0);
    let cfg = tiny_train_config(dir.path());
    let seed_of = |out_dir: &std::path::Path| -> u64 {
        let text = std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["seed"].as_u64().unwrap()
    };

    let env_run = dir.path().join("env");
    let out = nssl_env(
        &[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "1",
            "--out",
            env_run.to_str().unwrap(),
        ],
        "NSSL_SEED",
        "9",
    );
    assert_ok(&out);
    assert_eq!(seed_of(&env_run), 9);

    let flag_run = dir.path().join("flag");
    let out = nssl_env(
        &[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "1",
            "--seed",
            "3",
            "--out",
            flag_run.to_str().unwrap(),
        ],
        "NSSL_SEED",
        "9",
    );
    assert_ok(&out);
    assert_eq!(seed_of(&flag_run), 3);

    let bad = nssl_env(&["flops"], "NSSL_SEED", "not-a-number");
    // flops never resolves a seed, so a broken env var is still fine here.
    assert_ok(&bad);
}

#[test]
fn probe_names_the_missing_class() {
    let dir = tempfile::tempdir().unwrap();
    // Slide s1 has both classes, slide s2 only alpha; leave-one-slide-out
    // training on s2 alone cannot see beta.
    let mut manifest = String::from("cell_id,image_path,centroid_x,centroid_y,slide_id,organ,label\n");
    let mut ids = Vec::new();
    for i in 0..12 {
        let (slide, label) = if i < 8 {
            ("s1", if i % 2 == 0 { "alpha" } else { "beta" })
        } else {
            ("s2", "alpha")
        };
        let id = format!("c{i:02}");
        manifest.push_str(&format!("{id},img.png,0,0,{slide},breast,{label}\n"));
        ids.push(id);
    }
    let manifest_path = dir.path().join("cells.csv");
    std::fs::write(&manifest_path, manifest).unwrap();

    let data: Vec<f64> = (0..12 * 3).map(|i| (i % 7) as f64).collect();
    let emb_path = dir.path().join("e.lemb");
    write_embeddings(
        &emb_path,
        &ids,
        &Tensor::from_vec(&[12, 3], data).unwrap(),
    )
    .unwrap();

    let out = nssl(&[
        "probe",
        "--embeddings",
        emb_path.to_str().unwrap(),
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--loso",
        "--out",
        dir.path().join("p").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("`beta`"), "{err}");
    assert!(err.contains("s1"), "{err}");
}

#[test]
fn out_dir_cannot_be_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("occupied");
    std::fs::write(&blocker, b"x").unwrap();
    let out = nssl(&["flops", "--out", blocker.to_str().unwrap()]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("not a directory"), "{}", stderr(&out));
}
