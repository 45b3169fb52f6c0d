use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcss::commands::load_supernet_checkpoint;
use dcss::tensors::save_store;
use dcss_core::correlation::CorrelationReport;
use dcss_core::decode::DecodedArchitecture;
use dcss_core::supernet::{ArchParams, Supernet, SupernetSpec};
use dcss_core::ParamStore;
use serde_json::{json, Value};

const TINY: &str = r#"{
  "dataset": { "splits": { "train_a": 16, "train_b": 8, "val": 6 } },
  "supernet": { "layers": 1 },
  "search": { "epochs": 2 },
  "train": { "epochs": 1 },
  "correlation": { "n_trials": 2 }
}"#;

fn dcss(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcss"))
        .args(args)
        .current_dir(dir)
        .env_remove("DCSS_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), config).unwrap();
    dir
}

fn with_data(config: &str) -> tempfile::TempDir {
    let dir = workspace(config);
    let o = dcss(&["gen-data", "--config", "c.json", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_splits_and_refuses_to_clobber() {
    let dir = workspace("{}");
    let o = dcss(&["gen-data", "--config", "c.json", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = read_json(&dir.path().join("data/manifest.json"));
    let counts: Vec<u64> = m["splits"].as_array().unwrap().iter().map(|s| s["count"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![200, 100, 50]);
    for f in ["trainA.bin", "trainB.bin", "val.bin", "config.json"] {
        assert!(dir.path().join("data").join(f).is_file(), "{f}");
    }

    let again = dcss(&["gen-data", "--config", "c.json", "--out", "data"], dir.path());
    assert_eq!(code(&again), 4);
    assert!(stderr(&again).contains("--force"));
    let forced = dcss(&["gen-data", "--config", "c.json", "--out", "data", "--force"], dir.path());
    assert_eq!(code(&forced), 0);
    assert_eq!(read_json(&dir.path().join("data/manifest.json")), m);
}

#[test]
fn split_hashes_are_stable() {
    let a = with_data(TINY);
    let b = with_data(TINY);
    let ma = read_json(&a.path().join("data/manifest.json"));
    assert_eq!(ma, read_json(&b.path().join("data/manifest.json")));
    // Anchors recorded from the first run; any platform must reproduce them.
    let hashes: Vec<&str> = ma["splits"].as_array().unwrap().iter().map(|s| s["sha256"].as_str().unwrap()).collect();
    assert_eq!(
        hashes,
        [
            "ae4bcd3c0603b418b7803589a71841f1bee2ead414aba4ba4d3a3f14ad58cb97",
            "26704b3a85fddc7f8c35df8b1f91b72ba14fc74416669408ef75e882a63fc403",
            "4e2972f752f58ee4ea6b8c28de035be739ab21446f9ab236207f2ee5a5402f47",
        ]
    );
}

#[test]
fn bad_config_exits_2_with_a_position() {
    let dir = workspace("{\n  \"search\": {\n    \"epochs\": 1,\n    \"bogus\": 3\n  }\n}");
    let o = dcss(&["gen-data", "--config", "c.json", "--out", "data"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert!(!dir.path().join("data").exists());

    let dir = workspace(r#"{"search": {"crop_size": 40}}"#);
    assert_eq!(code(&dcss(&["search", "--config", "c.json", "--out", "s"], dir.path())), 2);
    assert_eq!(code(&dcss(&["search", "--config", "missing.json", "--out", "s"], dir.path())), 2);
}

#[test]
fn search_with_zero_epochs_emits_a_checkpoint() {
    let dir = with_data(&TINY.replace("\"epochs\": 2", "\"epochs\": 0"));
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "s"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (store, spec) = load_supernet_checkpoint(&dir.path().join("s/best.ckpt")).unwrap();
    assert_eq!(spec.layers, 1);
    ArchParams::from_store(&store, 1).unwrap();
    let csv = fs::read_to_string(dir.path().join("s/metrics.csv")).unwrap();
    assert_eq!(csv, "epoch,trainA_ce,trainB_ce,L_alpha,L_beta,L_con,tau,val_miou\n");
    let index = read_json(&dir.path().join("s/arch_index.json"));
    assert_eq!(index["L"], 1);
    assert_eq!(index["operators"].as_array().unwrap().len(), 6);
}

#[test]
fn metrics_have_one_row_per_epoch() {
    let dir = with_data(&TINY.replace("\"epochs\": 2", "\"epochs\": 3"));
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "s"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("s/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        let fields: Vec<f64> = r.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[0], i as f64);
        assert!((0.0..=1.0).contains(&fields[7]));
    }
}

#[test]
fn resumed_search_matches_an_uninterrupted_one() {
    let dir = with_data(&TINY.replace("\"epochs\": 2", "\"epochs\": 3"));
    let p = dir.path();
    assert_eq!(code(&dcss(&["search", "--config", "c.json", "--data", "data", "--out", "full"], p)), 0);
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "part", "--stop-after", "1"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&p.join("part/search_state.json"))["epochs_done"], 1);
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "part", "--resume", "--stop-after", "1"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "part", "--resume"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "optim.ckpt", "search_state.json", "metrics.csv", "config.json", "arch_index.json"] {
        assert_eq!(fs::read(p.join("full").join(f)).unwrap(), fs::read(p.join("part").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = with_data(TINY);
    let p = dir.path();
    assert_eq!(code(&dcss(&["search", "--config", "c.json", "--data", "data", "--out", "s", "--stop-after", "1"], p)), 0);
    fs::write(p.join("c.json"), TINY.replace("\"layers\": 1", "\"layers\": 2")).unwrap();
    assert_eq!(code(&dcss(&["search", "--config", "c.json", "--data", "data", "--out", "s", "--resume"], p)), 2);
}

#[test]
fn non_finite_search_exits_3_with_diagnostics() {
    let dir = with_data(&TINY.replace("\"epochs\": 2", "\"epochs\": 2, \"lr_w\": 1e200"));
    let o = dcss(&["search", "--config", "c.json", "--data", "data", "--out", "s"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nan_diagnostics.json"));
    let diag = read_json(&dir.path().join("s/nan_diagnostics.json"));
    assert!(diag["error"].as_str().unwrap().contains("epoch 0"));
}

/// Writes a freshly initialised L=2 supernet checkpoint with every β set to `beta`.
fn checkpoint_with_beta(dir: &Path, beta: f64) -> SupernetSpec {
    checkpoint_with(dir, beta, 0.25)
}

fn checkpoint_with(dir: &Path, beta: f64, channel_ratio: f64) -> SupernetSpec {
    let spec = SupernetSpec { layers: 2, channel_ratio, ..SupernetSpec::default() };
    let mut store = ParamStore::new(3);
    let mut net = Supernet::new(&spec, &mut store).unwrap();
    net.materialize_alignments(&mut store);
    let mut arch = ArchParams::from_store(&store, 2).unwrap();
    for node in spec.nodes() {
        arch.beta_mut(node).iter_mut().for_each(|b| *b = beta);
    }
    arch.write_to(&mut store);
    save_store(&dir.join("ck.ckpt"), &store, json!({ "spec": spec })).unwrap();
    spec
}

#[test]
fn decode_positive_betas_keeps_the_full_graph() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint_with_beta(dir.path(), 0.5);
    let o = dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json", "--dot"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("arch.json")).unwrap();
    let arch: DecodedArchitecture = serde_json::from_str(&text).unwrap();
    assert_eq!(arch.edges.len(), 8 * 2 * 3);
    assert_eq!(arch.nodes.len(), 8);
    assert!(arch.provenance.starts_with("sha256:"));
    arch.validate().unwrap();
    assert!(fs::read_to_string(dir.path().join("arch.dot")).unwrap().starts_with("digraph"));
}

#[test]
fn strict_decode_of_negative_betas_is_empty_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint_with_beta(dir.path(), -0.5);
    let o = dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json", "--strict"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let arch: DecodedArchitecture = serde_json::from_str(&fs::read_to_string(dir.path().join("arch.json")).unwrap()).unwrap();
    assert!(arch.edges.is_empty());

    let o = dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "fb.json"], dir.path());
    assert_eq!(code(&o), 0);
    let fb: DecodedArchitecture = serde_json::from_str(&fs::read_to_string(dir.path().join("fb.json")).unwrap()).unwrap();
    fb.validate().unwrap();
    assert!(fb.nodes.iter().all(|n| fb.in_degree(n.id) == 1));
}

#[test]
fn decoded_json_validates_against_the_published_schema() {
    let schema: Value = serde_json::from_str(include_str!("../schema/arch.schema.json")).unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let dir = tempfile::tempdir().unwrap();
    for (beta, strict) in [(0.5, false), (-0.5, true), (-0.5, false)] {
        checkpoint_with_beta(dir.path(), beta);
        let mut args = vec!["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json"];
        if strict {
            args.push("--strict");
        }
        assert_eq!(code(&dcss(&args, dir.path())), 0);
        let doc = read_json(&dir.path().join("arch.json"));
        assert!(validator.is_valid(&doc), "beta {beta} strict {strict}");
    }
    let mut broken = read_json(&dir.path().join("arch.json"));
    broken["nodes"][0]["op"] = json!("k9e9");
    assert!(!validator.is_valid(&broken));
}

#[test]
fn decode_of_a_missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dcss(&["decode", "--checkpoint", "nope.ckpt", "--out", "a.json"], dir.path())), 4);
}

#[test]
fn train_with_zero_epochs_smoke() {
    let dir = with_data(&TINY.replace("\"train\": { \"epochs\": 1 }", "\"train\": { \"epochs\": 0 }"));
    let p = dir.path();
    let spec = checkpoint_with_beta(p, 0.5);
    assert_eq!(spec.num_classes, 5);
    assert_eq!(code(&dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json"], p)), 0);
    let o = dcss(&["train", "--arch", "arch.json", "--data", "data", "--out", "t", "--config", "c.json"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let result = read_json(&p.join("t/result.json"));
    let t = result["t_miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&t));
    assert_eq!(result["history"].as_array().unwrap().len(), 0);
    assert!(p.join("t/model.ckpt").is_file());
}

#[test]
fn inherit_without_a_checkpoint_is_a_config_error() {
    let dir = with_data(&TINY.replace("\"train\": { \"epochs\": 1 }", "\"train\": { \"epochs\": 0, \"init\": \"inherit\" }"));
    let p = dir.path();
    checkpoint_with_beta(p, 0.5);
    assert_eq!(code(&dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json"], p)), 0);
    let o = dcss(&["train", "--arch", "arch.json", "--data", "data", "--out", "t", "--config", "c.json"], p);
    assert_eq!(code(&o), 2);
    // Partial channels change the operator widths, so inheriting needs r = 1.
    let o = dcss(&["train", "--arch", "arch.json", "--data", "data", "--out", "t", "--config", "c.json", "--checkpoint", "ck.ckpt"], p);
    assert_eq!(code(&o), 2);
    checkpoint_with(p, 0.5, 1.0);
    assert_eq!(code(&dcss(&["decode", "--checkpoint", "ck.ckpt", "--out", "arch.json"], p)), 0);
    let o = dcss(&["train", "--arch", "arch.json", "--data", "data", "--out", "t", "--config", "c.json", "--checkpoint", "ck.ckpt"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn correlate_with_identical_seeds_reports_a_degenerate_sample() {
    let cfg = TINY
        .replace("\"epochs\": 2", "\"epochs\": 1")
        .replace("\"n_trials\": 2", "\"n_trials\": 2, \"seeds\": [4, 4]");
    let dir = with_data(&cfg);
    let p = dir.path();
    let o = dcss(&["correlate", "--config", "c.json", "--data", "data", "--out", "corr", "--jobs", "2"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: CorrelationReport = serde_json::from_str(&fs::read_to_string(p.join("corr/report.json")).unwrap()).unwrap();
    assert_eq!(report.n, 2);
    assert_eq!(report.records[0].s_miou, report.records[1].s_miou);
    assert_eq!(report.records[0].t_miou, report.records[1].t_miou);
    assert!(report.rho.is_none() && report.rho_note.is_some());
    // Tau-a stays defined on a fully tied sample; the tie is reported.
    assert_eq!((report.tau, report.ties), (Some(0.0), 1));
    let scatter = fs::read_to_string(p.join("corr/scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 3);
    assert!(p.join("corr/trials/arch_1.json").is_file());

    let o = dcss(&["report", "--in", "corr"], p);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("undefined"));
}

#[test]
fn report_on_a_missing_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dcss(&["report", "--in", "nowhere"], dir.path())), 2);
}

#[test]
fn seed_env_changes_the_search() {
    let dir = with_data(&TINY.replace("\"epochs\": 2", "\"epochs\": 1"));
    let p = dir.path();
    assert_eq!(code(&dcss(&["search", "--config", "c.json", "--data", "data", "--out", "a"], p)), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_dcss"))
        .args(["search", "--config", "c.json", "--data", "data", "--out", "b"])
        .current_dir(p)
        .env("DCSS_SEED", "9")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&p.join("b/config.json"))["search"]["seed"], 9);
    assert_ne!(fs::read(p.join("a/last.ckpt")).unwrap(), fs::read(p.join("b/last.ckpt")).unwrap());
}
