//! End-to-end checks of the `mirror` binary under mock backends.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use base64::Engine as _;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use mirror_core::dataset::{
    ChainStage, DatasetSample, DialogueRecord, DialogueTurn, Domain, FailReason, FailedRecord, PipelineItem,
    ReflectiveChain, SourceSample,
};
use mirror_core::render::encode_png;

fn mirror(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirror"))
        .args(args)
        .env_remove("MIRROR_CONFIG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scene_png() -> Vec<u8> {
    encode_png(&RgbImage::from_fn(200, 100, |x, y| Rgb([(x % 50) as u8 + 100, (y % 40) as u8 + 100, 120]))).unwrap()
}

fn call(flag: bool, anchor: &str, color: &str, shape: &str) -> String {
    format!(
        r#"<tool_call>{{"name":"Visual Prompt Generator","flag":{flag},"anchor":"{anchor}","args":{{"color":"{color}","shape":"{shape}"}}}}</tool_call>"#
    )
}

fn turn(answer: &str, flag: bool) -> String {
    format!("{answer} <reflection>Checking the marked region.</reflection> {}", call(flag, if flag { "green cylinder" } else { "" }, "blue", "circle"))
}

/// A mock config whose chat model replies with `script`.
fn mock_config(dir: &Path, name: &str, script: &[String], extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "[endpoints]\nmode = \"mock\"\n\n{extra}\n\n[mock]\nchat_script = {}\ngrounder = {{ \"green cylinder\" = [[0.7, 0.4]] }}\n",
        serde_json::to_string(script).unwrap()
    );
    fs::write(&path, text).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) {
    let text: String = items.iter().map(|i| serde_json::to_string(i).unwrap() + "\n").collect();
    fs::write(path, text).unwrap();
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("scene.png");
    fs::write(&image, scene_png()).unwrap();
    (dir, image)
}

#[test]
fn run_with_mock_config() {
    let (dir, image) = setup();
    let cfg = mock_config(dir.path(), "c.toml", &[turn("There are 2.", true), turn("There are 3.", false)], "");
    let out = dir.path().join("out");
    let o = mirror(&["run", "--image", p(&image), "--question", "How many cylinders?", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("termination: validated"));

    let doc = read_json(&out.join("trajectory.json"));
    assert_eq!(doc["termination"], "validated");
    assert_eq!(doc["rounds"], 2);
    assert_eq!(doc["final_answer"], "There are 3.");
    assert!(out.join("round_0.png").is_file() && out.join("round_1.png").is_file());

    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config"]["endpoints"]["mode"], "mock");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn run_missing_image_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let o = mirror(&["run", "--image", p(&missing), "--question", "q", "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--image"), "{}", stderr(&o));

    let o = mirror(&["run", "--question", "q"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_unreachable_backend_persists_partial_trajectory() {
    let (dir, image) = setup();
    let cfg = dir.path().join("http.toml");
    fs::write(
        &cfg,
        "[endpoints]\nmode = \"http\"\nchat_url = \"http://127.0.0.1:9/v1/chat\"\ngrounder_url = \"http://127.0.0.1:9\"\nsegmenter_url = \"http://127.0.0.1:9\"\njudge_url = \"http://127.0.0.1:9\"\ntimeout_ms = 500\nmax_retries = 0\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mirror(&["run", "--image", p(&image), "--question", "q", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let doc = read_json(&out.join("trajectory.json"));
    assert_eq!(doc["termination"], "backend_error");
    assert!(doc["error"].is_string());
    assert_eq!(read_json(&out.join("run_manifest.json"))["exit_code"], 2);
}

fn source(id: &str) -> SourceSample {
    SourceSample {
        id: id.into(),
        image: "scene.png".into(),
        question: "How many cylinders?".into(),
        ground_truth: "3".into(),
        domain: Domain::GeneralQa,
    }
}

fn record(id: &str, scores: &[u8], gt_aligned: bool) -> DialogueRecord {
    DialogueRecord {
        source: source(id),
        turns: scores
            .iter()
            .map(|&s| DialogueTurn {
                student_response: if s == 10 { "3".into() } else { "2".into() },
                teacher_feedback: if s == 10 { String::new() } else { "Look behind the cube.".into() },
                score: s,
            })
            .collect(),
        gt_aligned,
        incomplete: false,
        error: None,
    }
}

#[test]
fn filter_keeps_one_of_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dialogues.jsonl");
    write_jsonl(&input, &[record("keep", &[4, 10], true), record("flat", &[5, 5, 10], true), record("off", &[4, 10], false)]);
    let out = dir.path().join("out");
    let o = mirror(&["pipeline", "filter", "--in", p(&input), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let kept = read_lines(&out.join("filter.jsonl"));
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0]["source"]["id"], "keep");
    let funnel = &read_json(&out.join("run_manifest.json"))["funnel"];
    assert_eq!(funnel["stages"][0]["count"], 3);
    assert_eq!(funnel["stages"].as_array().unwrap().last().unwrap()["count"], 1);
    assert_eq!(funnel["rejections"]["not_strictly_ascending"], 1);
    assert_eq!(funnel["rejections"]["not_gt_aligned"], 1);
}

#[test]
fn adapt_splits_by_rho() {
    let dir = tempfile::tempdir().unwrap();
    let mut items = Vec::new();
    for i in 0..8 {
        let r = record(&format!("v{i}"), &[4, 10], true);
        items.push(PipelineItem::Chain(ReflectiveChain {
            source: r.source,
            rounds: vec![],
            final_answer: "3".into(),
            stage: ChainStage::Verified,
        }));
    }
    for i in 0..2 {
        items.push(PipelineItem::Failed(FailedRecord { record: record(&format!("f{i}"), &[10], true), reason: FailReason::SingleTurn }));
    }
    let input = dir.path().join("verify.jsonl");
    write_jsonl(&input, &items);
    let cfg = mock_config(dir.path(), "c.toml", &[], "[pipeline]\nrho = 0.75\nseed = 3");
    let out = dir.path().join("out");
    let o = mirror(&["pipeline", "adapt", "--in", p(&input), "--out", p(&out), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let samples: Vec<DatasetSample> =
        read_lines(&out.join("adapt.jsonl")).into_iter().map(|v| serde_json::from_value(v).unwrap()).collect();
    assert_eq!(samples.len(), 10);
    // floor(0.75 * 10) = 7 chains stay multi-turn.
    assert_eq!(samples.iter().filter(|s| s.kind() == "reflective_chain").count(), 7);
    assert_eq!(samples.iter().filter(|s| s.kind() == "truncated_qa").count(), 3);
    assert_eq!(read_json(&out.join("run_manifest.json"))["seed"], 3);

    // Same seed, same split.
    let again = dir.path().join("again");
    mirror(&["pipeline", "adapt", "--in", p(&input), "--out", p(&again), "--config", p(&cfg)]);
    assert_eq!(fs::read(out.join("adapt.jsonl")).unwrap(), fs::read(again.join("adapt.jsonl")).unwrap());
}

#[test]
fn malformed_line_is_cited() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dialogues.jsonl");
    let mut text: String = (0..6).map(|i| serde_json::to_string(&record(&format!("r{i}"), &[4, 10], true)).unwrap() + "\n").collect();
    text.push_str("{\"source\": oops}\n");
    fs::write(&input, text).unwrap();
    let o = mirror(&["pipeline", "filter", "--in", p(&input), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 7"), "{}", stderr(&o));
}

#[test]
fn stages_compose_into_an_export() {
    let (dir, _) = setup();
    let d = dir.path();
    write_jsonl(&d.join("sources.jsonl"), &[source("s1")]);
    let grounder = "[pipeline]\nrho = 1.0";
    let steps: [(&str, Vec<&str>, &str); 7] = [
        ("simulate", vec!["2", "Look behind the cube.", "3"], "judge_scores = [5, 10]"),
        ("filter", vec![], ""),
        ("ground", vec!["green cylinder", "green cylinder"], ""),
        ("convert", vec!["I missed the cylinder behind the cube."], ""),
        ("verify", vec![], ""),
        ("adapt", vec![], ""),
        ("export", vec![], ""),
    ];
    let mut input = d.join("sources.jsonl");
    for (stage, script, mock_extra) in steps {
        let cfg = d.join(format!("{stage}.toml"));
        fs::write(
            &cfg,
            format!(
                "{grounder}\n\n[endpoints]\nmode = \"mock\"\n\n[mock]\nchat_script = {}\ngrounder = {{ \"green cylinder\" = [[0.25, 0.5]] }}\n{mock_extra}\n",
                serde_json::to_string(&script).unwrap()
            ),
        )
        .unwrap();
        let out = d.join(stage);
        let o = mirror(&["pipeline", stage, "--in", p(&input), "--out", p(&out), "--config", p(&cfg), "--jobs", "2"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(out.join("run_manifest.json").is_file());
        input = out.join(format!("{stage}.jsonl"));
        if stage != "export" {
            assert_eq!(read_lines(&input).len(), 1, "{stage}");
        }
    }
    let verified = read_lines(&d.join("verify/verify.jsonl"));
    assert_eq!(verified[0]["kind"], "chain");
    assert_eq!(verified[0]["stage"], "verified");

    let sft = read_lines(&d.join("export/sft.jsonl"));
    assert_eq!(sft.len(), 1);
    let conv = sft[0]["conversations"].as_array().unwrap();
    assert_eq!(conv.len(), 4);
    assert_eq!(sft[0]["images"].as_array().unwrap().len(), 2);
    for image in sft[0]["images"].as_array().unwrap() {
        assert!(d.join("export").join(image.as_str().unwrap()).is_file());
    }
    assert_eq!(read_json(&d.join("export/manifest.json"))["records"], 1);
}

#[test]
fn stats_rounds_over_four_trajectories() {
    let (dir, image) = setup();
    let scripts = [
        vec![turn("3.", false)],
        vec![turn("3.", false)],
        vec![turn("2.", true), turn("3.", false)],
        vec![turn("1.", true), turn("2.", true), turn("3.", false)],
    ];
    let runs = dir.path().join("runs");
    for (i, script) in scripts.iter().enumerate() {
        let cfg = mock_config(dir.path(), &format!("c{i}.toml"), script, "");
        let out = runs.join(format!("t{i}"));
        let o = mirror(&["run", "--image", p(&image), "--question", "q", "--config", p(&cfg), "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = mirror(&["stats", "rounds", "--in", p(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("50.0%") && table.contains("25.0%"), "{table}");

    let report = dir.path().join("report");
    let o = mirror(&["stats", "rounds", "--in", p(&runs), "--json", "--out", p(&report)]);
    assert!(o.status.success());
    let hist: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(hist["counts"], json!([2, 1, 1]));
    assert!(report.join("rounds.json").is_file() && report.join("run_manifest.json").is_file());

    let o = mirror(&["stats", "rounds", "--in", p(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stats_funnel_and_quality() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dialogues.jsonl");
    write_jsonl(&input, &[record("a", &[4, 10], true), record("b", &[4, 3], true)]);
    let o = mirror(&["stats", "funnel", "--in", p(&input), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let f: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(f["stages"][0]["count"], 2);

    fs::write(dir.path().join("scene.png"), scene_png()).unwrap();
    let qa = DatasetSample::TruncatedQa {
        payload: mirror_core::dataset::TruncatedQa {
            image: "scene.png".into(),
            question: "How many?".into(),
            answer: "3".into(),
            domain: Domain::GeneralQa,
        },
        provenance: mirror_core::dataset::Provenance { record_id: "a".into(), decisions: vec![] },
    };
    let subset = dir.path().join("qa.jsonl");
    write_jsonl(&subset, &[qa]);
    let cfg = mock_config(dir.path(), "c.toml", &[], "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap() + "quality = [{ needle = \"How many\", logic = 4, visual = 5 }]\n").unwrap();
    let subset_arg = format!("qa={}", p(&subset));
    let o = mirror(&["stats", "quality", "--subset", &subset_arg, "--config", p(&cfg), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(q["rows"][0]["logic"], 4.0);
    assert_eq!(q["rows"][0]["visual"], 5.0);

    let o = mirror(&["stats", "quality", "--subset", "nameonly"]);
    assert_eq!(o.status.code(), Some(1));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_health_and_reflect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(dir.path(), "c.toml", &[turn("There are 2.", true), turn("There are 3.", false)], "");
    let mut child = Command::new(env!("CARGO_BIN_EXE_mirror"))
        .args(["serve", "--bind", "127.0.0.1:0", "--config", p(&cfg)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _guard = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let health: Value = ureq::get(&format!("{base}/healthz")).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["version"], env!("CARGO_PKG_VERSION"));

    let image = base64::engine::general_purpose::STANDARD.encode(scene_png());
    let body = json!({ "image": image, "question": "How many cylinders?" });
    let doc: Value = ureq::post(&format!("{base}/v1/reflect")).send_json(&body).unwrap().body_mut().read_json().unwrap();
    assert_eq!(doc["termination"], "validated");
    assert_eq!(doc["final_answer"], "There are 3.");
    assert_eq!(doc["contexts"].as_array().unwrap().len(), 2);

    let bad = ureq::post(&format!("{base}/v1/reflect")).send_json(json!({ "image": "!!", "question": "q" }));
    assert!(matches!(bad, Err(ureq::Error::StatusCode(400))));
}

#[test]
fn serve_bind_failure_exits_2() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap().to_string();
    let o = mirror(&["serve", "--bind", &addr]);
    assert_eq!(o.status.code(), Some(2));
}
