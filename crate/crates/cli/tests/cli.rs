mod common;

use common::{path_str, request_json, run, trained};
use sketchfill::codec::{parse_score, ScoreFormat};
use sketchfill::dataset::{CORPUS_FILE, MANIFEST_FILE};
use sketchfill::pipeline::GenerateResponse;

#[test]
fn preprocess_writes_corpus_and_manifest() {
    let t = trained();
    assert!(t.data.join(CORPUS_FILE).is_file());
    assert!(t.data.join(MANIFEST_FILE).is_file());
    for stage in ["vae", "inpainter", "connector"] {
        assert!(t.models.join(stage).join("model.safetensors").is_file());
        assert!(t.models.join(stage).join("runlog.jsonl").is_file());
    }
}

#[test]
fn generate_round_trips_through_files() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.json");
    let resp = dir.path().join("resp.json");
    std::fs::write(&req, request_json(5, true)).unwrap();
    let args = ["generate", "--in", path_str(&req), "--out", path_str(&resp), "--checkpoints", path_str(&t.models)];
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first: GenerateResponse = serde_json::from_str(&std::fs::read_to_string(&resp).unwrap()).unwrap();
    assert_eq!(first.missing.len(), 4);
    assert_eq!(first.seed, 5);
    assert_eq!(first.adherence.iter().map(|a| a.index).collect::<Vec<_>>(), vec![6, 8]);

    assert!(run(&args).status.success());
    let second: GenerateResponse = serde_json::from_str(&std::fs::read_to_string(&resp).unwrap()).unwrap();
    assert_eq!(first, second);

    let midi = dir.path().join("out.mid");
    let out = run(&["export-midi", "--in", path_str(&resp), "--out", path_str(&midi), "--tempo", "96"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed = parse_score(&std::fs::read(&midi).unwrap(), ScoreFormat::Midi).unwrap();
    assert!((parsed.meta.tempo - 96.0).abs() < 1e-3);
}

#[test]
fn checkpoint_directory_comes_from_the_environment() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.json");
    let resp = dir.path().join("resp.json");
    std::fs::write(&req, request_json(1, false)).unwrap();
    let out = common::bin()
        .args(["generate", "--in", path_str(&req), "--out", path_str(&resp)])
        .env(sketchfill_cli::CHECKPOINT_ENV, &t.models)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_emits_table_and_json() {
    let t = trained();
    let json = t.root.join("eval.json");
    let out = run(&[
        "eval", "--data", path_str(&t.data), "--checkpoints", path_str(&t.models), "--control-pairs", "12", "--json",
        path_str(&json),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("inpainter") && table.contains("connector") && table.contains("Test"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
    assert_eq!(v["control"]["pairs"], 12);
}

#[test]
fn exit_codes_separate_bad_input_from_internal_failures() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let req = dir.path().join("req.json");
    let resp = dir.path().join("resp.json");

    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--stage", "decoder", "--data", "d", "--out", "o"]).status.code(), Some(1));

    std::fs::write(&req, r#"{"past": [[60]], "future": []}"#).unwrap();
    let bad = ["generate", "--in", path_str(&req), "--out", path_str(&resp), "--checkpoints", path_str(&t.models)];
    assert_eq!(run(&bad).status.code(), Some(1));

    let broken = dir.path().join("models");
    for stage in ["vae", "inpainter", "connector"] {
        std::fs::create_dir_all(broken.join(stage)).unwrap();
        for file in ["meta.json", "model.safetensors"] {
            std::fs::copy(t.models.join(stage).join(file), broken.join(stage).join(file)).unwrap();
        }
    }
    std::fs::write(broken.join("vae").join("model.safetensors"), b"not a tensor file").unwrap();
    std::fs::write(&req, request_json(1, false)).unwrap();
    let out = run(&["generate", "--in", path_str(&req), "--out", path_str(&resp), "--checkpoints", path_str(&broken)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
