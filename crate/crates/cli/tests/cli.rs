use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SCHEMA: &str = r#"{
  "name": "toy",
  "types": {
    "Event": [{"name": "name"}, {"name": "description", "required": false}],
    "Product": [{"name": "name"}, {"name": "description", "required": false}]
  }
}"#;

const NEEDLES: &str = r#"[
  {"type": "Event", "name": "Lantern Vigil",
   "paragraph": "Every autumn the harbour town holds the Lantern Vigil, a night walk along the sea wall where each family carries a paper lantern painted with the name of a lost boat.",
   "description": "Autumn night walk along the harbour sea wall with painted paper lanterns.",
   "keywords": ["lantern", "harbour", "autumn", "boat"]},
  {"type": "Product", "name": "Quillstone Kettle",
   "paragraph": "The Quillstone Kettle is a cast iron kettle with a soapstone handle, sold only at the winter market and prized for keeping tea warm through long evenings.",
   "description": "Cast iron kettle with a soapstone handle sold at the winter market.",
   "keywords": ["kettle", "soapstone", "iron", "market"]}
]"#;

fn document(topic: &str) -> String {
    (1..=8)
        .map(|i| {
            format!(
                "Part {i} of the {topic} report covers routine matters. The committee reviewed budgets, staffing and the \
                 maintenance schedule, and agreed to revisit the open items at the next meeting."
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: TempDir::new().unwrap() };
        ws.write("schema.json", SCHEMA);
        ws.write("offline.json", r#"{"criteria": ["n", "ns", "k0.5"]}"#);
        ws.write("needles.json", NEEDLES);
        ws.write("alpha.txt", &document("harbour"));
        ws.write("beta.txt", &document("orchard"));
        fs::create_dir(ws.path("empty")).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, contents: &str) {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, contents).unwrap();
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&self.read(rel)).unwrap()
    }

    /// Replay directory answering every call with `replies` in order.
    fn replay(&self, name: &str, replies: &[&str]) -> PathBuf {
        for (i, r) in replies.iter().enumerate() {
            self.write(&format!("{name}/{i:04}.json"), &serde_json::to_string(r).unwrap());
        }
        fs::create_dir_all(self.path(name)).unwrap();
        self.path(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_needlegauge"))
            .current_dir(self.dir.path())
            .env_remove("NEEDLEGAUGE_API_KEY")
            .args(args)
            .output()
            .unwrap();
        if !out.status.success() {
            eprintln!("{}", String::from_utf8_lossy(&out.stderr));
        }
        out
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed");
    }

    fn infuse(&self, out: &str, seed: &str) {
        self.ok(&["--replay", "empty", "--seed", seed, "infuse", "alpha.txt", "--needles", "needles.json", "--schema", "schema.json", "--out", out]);
    }
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BOTH: &str = r#"[{"type": "Event", "name": "Lantern Vigil", "description": "night walk with lanterns"},
 {"type": "Product", "name": "Quillstone Kettle", "description": "soapstone kettle"}]"#;
const EVENT_ONLY: &str = r#"[{"type": "Event", "name": "Lantern Vigil"}]"#;

#[test]
fn perfect_extraction_scores_one_and_ranks_first() {
    let ws = Workspace::new();
    ws.infuse("inf", "7");
    let manifest = ws.json("inf/alpha.infused.json");
    assert_eq!(manifest["needles"].as_array().unwrap().len(), 2);
    let enriched = manifest["enriched_text"].as_str().unwrap();
    assert!(enriched.contains("Lantern Vigil") && enriched.contains("Quillstone Kettle"));
    assert_eq!(ws.read("inf/alpha.enriched.txt"), enriched);

    let perfect = ws.replay("perfect", &[BOTH]);
    let partial = ws.replay("partial", &[EVENT_ONLY]);
    for (replay, out) in [(&perfect, "good"), (&partial, "weak")] {
        ws.ok(&["--replay", arg(replay), "--iterations", "0", "extract", "inf/alpha.infused.json", "--schema", "schema.json", "--out", out]);
        let run = ws.json(&format!("{out}/alpha.run.json"));
        assert_eq!(run["meta"]["fingerprint"], manifest["meta"]["fingerprint"]);
        assert_eq!(run["calls"], 1);
        ws.ok(&[
            "--config", "offline.json", "--label", out, "evaluate", "--run", &format!("{out}/alpha.run.json"), "--infused", "inf/alpha.infused.json",
            "--schema", "schema.json", "--out", &format!("{out}/eval"),
        ]);
    }
    let good = ws.json("good/eval/evaluation.json");
    assert_eq!(good["minea"]["overall"], 1.0);
    assert_eq!(good["minea"]["needles"], 2);
    assert!(good["scores"][0]["with_needles"].is_object());
    let weak = ws.json("weak/eval/evaluation.json");
    assert_eq!(weak["minea"]["overall"], 0.5);
    assert!(ws.read("good/eval/minea.csv").starts_with("type,criterion,ratio,needles\n"));

    ws.ok(&["compare", "weak/eval/evaluation.json", "good/eval/evaluation.json", "--out", "cmp"]);
    assert_eq!(ws.read("cmp/comparison.csv"), "model,minea\ngood,1.000000\nweak,0.500000\n");
}

#[test]
fn infusion_is_reproducible_per_seed() {
    let ws = Workspace::new();
    ws.infuse("a", "11");
    ws.infuse("b", "11");
    for f in ["alpha.infused.json", "alpha.needles.json", "alpha.enriched.txt"] {
        assert_eq!(ws.read(&format!("a/{f}")), ws.read(&format!("b/{f}")), "{f}");
    }
    let offsets = |dir: &str| ws.json(&format!("{dir}/alpha.infused.json"))["placements"].clone();
    let differs = (12..20).any(|s| {
        let dir = format!("s{s}");
        ws.infuse(&dir, &s.to_string());
        offsets(&dir) != offsets("a")
    });
    assert!(differs, "seed has no effect on placement");
}

#[test]
fn failing_document_does_not_stop_others() {
    let ws = Workspace::new();
    let replay = ws.replay("r", &[BOTH]);
    fs::write(ws.path("broken.txt"), [0xff, 0xfe, 0x00]).unwrap();
    let out = ws.run(&["--replay", arg(&replay), "--iterations", "0", "--jobs", "2", "extract", "alpha.txt", "missing.txt", "broken.txt", "--schema", "schema.json", "--out", "o"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.txt") && stderr.contains("broken.txt"), "{stderr}");
    let run = ws.json("o/alpha.run.json");
    assert_eq!(run["entities"].as_array().unwrap().len(), 2);
    assert_eq!(run["meta"]["fingerprint"], Value::Null);
    assert_eq!(ws.read("o/alpha.transcript.jsonl").lines().count(), 1);
}

#[test]
fn study_writes_one_column_per_iteration() {
    let ws = Workspace::new();
    let first = r#"[{"type": "Event", "name": "committee meeting", "description": "reviewed budgets"}]"#;
    let second = r#"[{"type": "Product", "name": "maintenance schedule"}]"#;
    let replay = ws.replay("r", &[first, second]);
    ws.ok(&["--replay", arg(&replay), "--iterations", "1", "extract", "alpha.txt", "--schema", "schema.json", "--out", "o", "--study"]);
    let csv = ws.read("o/alpha.iterations.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("score,0,1"));
    let incompleteness = csv.lines().find(|l| l.starts_with("incompleteness")).expect("incompleteness row");
    assert_eq!(incompleteness.split(',').count(), 3);
    assert_eq!(ws.json("o/alpha.run.json")["calls"], 2);
}

#[test]
fn evaluation_rejects_run_of_other_infusion() {
    let ws = Workspace::new();
    ws.infuse("inf", "3");
    ws.ok(&["--replay", "empty", "--seed", "3", "infuse", "beta.txt", "--needles", "needles.json", "--out", "inf"]);
    let replay = ws.replay("r", &[BOTH]);
    ws.ok(&["--replay", arg(&replay), "--iterations", "0", "extract", "inf/beta.infused.json", "--schema", "schema.json", "--out", "o"]);
    let out = ws.run(&["evaluate", "--run", "o/beta.run.json", "--infused", "inf/alpha.infused.json", "--out", "e"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not extracted from the infusion"));
    assert!(!ws.path("e/evaluation.json").exists());

    // a plain-text run carries no fingerprint at all
    ws.ok(&["--replay", arg(&replay), "--iterations", "0", "extract", "alpha.txt", "--schema", "schema.json", "--out", "plain"]);
    assert!(!ws.run(&["evaluate", "--run", "plain/alpha.run.json", "--infused", "inf/alpha.infused.json", "--out", "e"]).status.success());
}

#[test]
fn criterion_table_reproduces_type_maxima() {
    let ws = Workspace::new();
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/criterion_table.json");
    ws.ok(&["evaluate", "--criterion-table", arg(&table), "--out", "t"]);
    let report = ws.json("t/evaluation.json")["minea"].clone();
    let minea = |t: &str| {
        report["types"].as_array().unwrap().iter().find(|r| r["type"] == t).unwrap()["minea"].as_f64().unwrap()
    };
    // ratios are stored as exact counts over needles, published to 3 places
    assert!((minea("Person") - 0.884).abs() < 5e-4);
    assert!((minea("Event") - 0.915).abs() < 5e-4);
    assert!((minea("Legislation") - 0.942).abs() < 5e-4);
    assert!(ws.read("t/minea.csv").contains("\nPerson,minea,0.8841,69\n"));
}

#[test]
fn tampered_manifest_is_rejected() {
    let ws = Workspace::new();
    ws.infuse("inf", "5");
    let raw = ws.read("inf/alpha.infused.json").replace("Lantern Vigil, a night walk", "Lantern Vigil, a day walk");
    ws.write("inf/alpha.infused.json", &raw);
    let out = ws.run(&["--replay", "empty", "extract", "inf/alpha.infused.json", "--schema", "schema.json", "--out", "o"]);
    assert!(!out.status.success());
}

#[test]
fn litm_probe_writes_profile() {
    let ws = Workspace::new();
    let thing = |n: &str| format!(r#"[{{"type": "Event", "name": "{n}"}}]"#);
    // base pass over three pieces, then one duplicate per position
    let replies = [thing("a"), thing("b"), thing("c"), thing("a"), thing("x"), thing("c")];
    let replay = ws.replay("r", &replies.iter().map(String::as_str).collect::<Vec<_>>());
    ws.ok(&["--replay", arg(&replay), "--iterations", "0", "probe-litm", "alpha.txt", "--schema", "schema.json", "--pieces", "3", "--out", "l"]);
    assert_eq!(ws.read("l/litm.csv"), "document,1,2,3\nalpha,1.0000,0.0000,1.0000\nmean,1.0000,0.0000,1.0000\n");
    let json = ws.json("l/litm.json");
    assert_eq!(json["mean"], serde_json::json!([1.0, 0.0, 1.0]));

    let out = ws.run(&["--replay", arg(&replay), "probe-litm", "alpha.txt", "--schema", "schema.json", "--pieces", "3", "--positions", "4", "--out", "bad"]);
    assert!(!out.status.success());
}
