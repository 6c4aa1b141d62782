use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualrec")).args(args).env_remove("DUALREC_API_KEY").output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn write_config(dir: &Path, raw: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let body = format!(
        "[dataset]\nraw_dir = {raw:?}\n\n[corpus]\nn_train = 30\nn_test = 20\n\n[simulate]\nn_users = 5\nsteps_per_user = 2\n\n[eval]\nn_users = 10\nrankers = [{{ kind = \"oracle\" }}, {{ kind = \"popularity\" }}, {{ kind = \"agent\" }}]\n\n{extra}"
    );
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn fixture(dir: &Path) -> String {
    let raw = dir.join("raw");
    let raw_s = raw.to_string_lossy().into_owned();
    ok(&dualrec(&[
        "make-fixture",
        "--dir",
        &raw_s,
        "--users",
        "90",
        "--items",
        "200",
        "--min-per-user",
        "15",
        "--seed",
        "4",
    ]));
    raw_s
}

#[test]
fn end_to_end_ingest_simulate_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = fixture(tmp.path());
    let cfg = write_config(tmp.path(), Path::new(&raw), "");
    let out = tmp.path().join("out");
    let out_s = out.to_string_lossy().into_owned();

    let stdout = ok(&dualrec(&["ingest", "--config", &cfg, "--out", &out_s]));
    assert!(stdout.contains("train: 30 users"), "{stdout}");
    let stats = fs::read_to_string(out.join("corpus").join("stats.txt")).unwrap();
    assert!(stats.contains("sparsity"), "{stats}");
    assert!(out.join("corpus").join("stats.csv").exists());

    let stdout = ok(&dualrec(&["simulate", "--config", &cfg, "--out", &out_s]));
    assert!(stdout.contains("5 users, 10 cycles"), "{stdout}");
    assert!(!out.join("simulate").join("INCOMPLETE").exists());

    let stdout = ok(&dualrec(&["eval", "--config", &cfg, "--out", &out_s]));
    assert!(stdout.contains("oracle"), "{stdout}");
    let eval = out.join("eval");
    for f in ["records.jsonl", "metrics_table.csv", "activity_groups.csv", "best_of_n.csv", "run.json"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    assert!(!eval.join("INCOMPLETE").exists());
    let table = fs::read_to_string(eval.join("metrics_table.csv")).unwrap();
    let oracle = table.lines().find(|l| l.starts_with("oracle,")).unwrap();
    assert!(oracle.ends_with("100.00,100.00,100.00,100.00"), "{oracle}");
    assert!(table.contains("# config_digest: "));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
    assert!(manifest["files"]["records.jsonl"].as_str().unwrap().len() == 64);

    let records = eval.join("records.jsonl").to_string_lossy().into_owned();
    ok(&dualrec(&["report", "--config", &cfg, "--out", &out_s, &records]));
    assert_eq!(
        fs::read_to_string(out.join("report").join("metrics_table.csv")).unwrap(),
        table,
        "reshaping the stored records reproduces the eval table"
    );
}

#[test]
fn empty_report_is_marked_incomplete() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("records.jsonl");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("out");
    ok(&dualrec(&["report", "--out", &out.to_string_lossy(), &empty.to_string_lossy()]));
    let dir = out.join("report");
    assert!(dir.join("INCOMPLETE").exists());
    let csv = fs::read_to_string(dir.join("metrics_table.csv")).unwrap();
    assert!(csv.starts_with("ranker,users,failures,NDCG@1"), "{csv}");
    assert!(csv.contains("# seeds: "));
}

#[test]
fn failed_command_leaves_marker_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing-here.jsonl");
    let out = tmp.path().join("out");
    let res = dualrec(&["report", "--out", &out.to_string_lossy(), &missing.to_string_lossy()]);
    assert_eq!(res.status.code(), Some(2));
    let marker = fs::read_to_string(out.join("report").join("INCOMPLETE")).unwrap();
    assert!(marker.contains("report failed"), "{marker}");
}

#[test]
fn invalid_config_names_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[corpus]\nmin_len = 0\n\n[protocol]\nn_negatives = 0\n").unwrap();
    let res = dualrec(&["ingest", "--config", &cfg.to_string_lossy()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("corpus.min_len") && err.contains("protocol.n_negatives"), "{err}");

    fs::write(&cfg, "[corpus]\nmax_length = 40\n").unwrap();
    let res = dualrec(&["ingest", "--config", &cfg.to_string_lossy()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("max_length"));
}

#[test]
fn api_key_in_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("key.toml");
    fs::write(&cfg, "[agent.backend]\nkind = \"http\"\napi_key = \"sk-123\"\n").unwrap();
    let res = dualrec(&["ingest", "--config", &cfg.to_string_lossy()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn sft_gen_and_toy_train_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = fixture(tmp.path());
    let extra =
        "[sft]\nscenarios = 6\n\n[grpo]\nseeds = [0]\nfd_probes = 30\n\n[grpo.experiment.options]\nsteps = 20\n";
    let cfg = write_config(tmp.path(), Path::new(&raw), extra);
    let out = tmp.path().join("out");
    let out_s = out.to_string_lossy().into_owned();
    ok(&dualrec(&["ingest", "--config", &cfg, "--out", &out_s]));

    let stdout = ok(&dualrec(&["sft-gen", "--config", &cfg, "--out", &out_s]));
    assert!(stdout.contains("samples"), "{stdout}");
    let sft = out.join("sft");
    let first = fs::read(sft.join("sft_corpus.jsonl")).unwrap();
    ok(&dualrec(&["sft-gen", "--config", &cfg, "--out", &out_s]));
    assert_eq!(fs::read(sft.join("sft_corpus.jsonl")).unwrap(), first);

    let stdout = ok(&dualrec(&["toy-train", "--config", &cfg, "--out", &out_s]));
    assert!(stdout.contains("finite-difference"), "{stdout}");
    let toy = out.join("toy");
    let curves = fs::read_to_string(toy.join("curves.csv")).unwrap();
    assert!(curves.lines().next().unwrap().starts_with("variant,seed,step"), "{curves}");
    assert!(toy.join("fd_report.txt").exists() && toy.join("summary.json").exists());
}
