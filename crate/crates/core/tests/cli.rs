use std::fs;
use std::path::Path;
use std::process::Command;

use diffcap::checkpoint::Checkpoint;
use diffcap::cli::{self, load_dataset, CAPTIONS_FILE, CURVE_FILE, DATASET_FILE, EXAMPLES_FILE, GEN_MANIFEST_FILE, METRICS_FILE};
use serde_json::Value;

const TINY: &str = "\
n_shapes = 16
gen_views = 4
embed_dim = 8
d_model = 16
n_layers = 1
n_heads = 2
ff_mult = 2
diffusion_steps = 20
batch_size = 4
train_steps = 12
warmup_steps = 3
checkpoint_every = 5
views = 2
samples = 2
inference_steps = 10
";

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("diffcap").chain(args.iter().copied()))
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
        Self { dir }
    }

    fn out(&self) -> &str {
        self.dir.path().to_str().unwrap()
    }

    fn conf(&self) -> String {
        self.dir.path().join("tiny.conf").to_str().unwrap().to_owned()
    }

    fn data(&self) -> String {
        self.dir.path().join(DATASET_FILE).to_str().unwrap().to_owned()
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `cmd` with the tiny config, output dir and dataset.
    fn cmd(&self, cmd: &str, extra: &[&str]) -> i32 {
        let (conf, data) = (self.conf(), self.data());
        let mut args = vec![cmd, "--config", &conf, "--out", self.out()];
        if cmd != "gen-data" && cmd != "inspect-schedule" {
            args.extend(["--dataset", &data]);
        }
        args.extend(extra);
        run(&args)
    }

    fn trained() -> Self {
        let f = Self::new();
        assert_eq!(f.cmd("gen-data", &["--seed", "3"]), 0);
        assert_eq!(f.cmd("train", &[]), 0);
        f
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_outputs_and_errors() {
    let f = Fixture::new();
    assert_eq!(f.cmd("gen-data", &["--seed", "3"]), 0);
    let manifest = read_json(&f.path(GEN_MANIFEST_FILE));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["n_shapes"], 16);
    assert_eq!(manifest["view_records"], 64);
    assert!(manifest["grammar_hash"].as_str().is_some_and(|h| !h.is_empty()));
    assert!(manifest["config_hash"].is_string());
    let first = fs::read(f.path(DATASET_FILE)).unwrap();
    assert_eq!(load_dataset(&f.path(DATASET_FILE)).unwrap().records.len(), 16);

    // Same seed, same bytes.
    assert_eq!(f.cmd("gen-data", &["--seed", "3"]), 0);
    assert_eq!(fs::read(f.path(DATASET_FILE)).unwrap(), first);

    assert_eq!(f.cmd("gen-data", &["--n-shapes", "0"]), 2);
    let missing = f.path("missing");
    assert_eq!(run(&["gen-data", "--out", missing.to_str().unwrap()]), 1);
    assert_eq!(run(&["gen-data", "--bogus"]), 2);
    assert_eq!(run(&["gen-data", "--out", f.out(), "--set", "nope=1"]), 2);
}

#[test]
fn train_writes_curve_and_resumes_exactly() {
    let f = Fixture::trained();
    let curve = fs::read_to_string(f.path(CURVE_FILE)).unwrap();
    let mut lines = curve.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(lines.next().unwrap().starts_with("step,anchor_term,sum_term,reg_term,ce_term,total"));
    assert_eq!(lines.count(), 12);
    let straight = Checkpoint::load(&f.path("checkpoint")).unwrap();
    assert_eq!(straight.state.step, 12);

    // Stop at 5, then resume to 12.
    let g = Fixture::new();
    assert_eq!(g.cmd("gen-data", &["--seed", "3"]), 0);
    assert_eq!(g.cmd("train", &["--stop-at", "5"]), 0);
    assert_eq!(Checkpoint::load(&g.path("checkpoint")).unwrap().state.step, 5);
    assert_eq!(g.cmd("train", &["--resume"]), 0);
    let resumed = Checkpoint::load(&g.path("checkpoint")).unwrap();
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.params_hash(), straight.params_hash());
    let body = |s: &str| s.lines().skip(2).map(str::to_owned).collect::<Vec<_>>();
    assert_eq!(body(&fs::read_to_string(g.path(CURVE_FILE)).unwrap()), body(&curve));

    assert_eq!(g.cmd("train", &["--set", "learning_rate=-1"]), 2);
}

#[test]
fn non_finite_training_exits_3_with_the_step() {
    let f = Fixture::new();
    assert_eq!(f.cmd("gen-data", &[]), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_diffcap"))
        .args(["train", "--config", &f.conf(), "--out", f.out(), "--dataset", &f.data()])
        .args(["--set", "learning_rate=1e200", "--set", "grad_clip=0", "--set", "warmup_steps=0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite value at step"), "{err}");
}

#[test]
fn caption_json_and_view_edits() {
    let f = Fixture::trained();
    let ds = load_dataset(&f.path(DATASET_FILE)).unwrap();
    let (a, b) = (&ds.records[0].shape_id, &ds.records[1].shape_id);
    assert_eq!(f.cmd("caption", &["--shape-id", a]), 0);
    let json = read_json(&f.path(CAPTIONS_FILE));
    assert!(json["config_hash"].is_string());
    assert!(json["checkpoint_hash"].is_string());
    let rec = &json["records"][0];
    assert_eq!(rec["shape_id"], a.as_str());
    let views = rec["views"].as_array().unwrap();
    assert_eq!(views.len(), 2);
    for v in views {
        let cands = v["candidates"].as_array().unwrap();
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c["risk"].is_f64() && c["caption"].is_string()));
        assert!(v["selected"].as_u64().unwrap() < 2);
    }
    assert!(rec["final_caption"].is_string());
    assert!(rec["timings_ms"]["total"].as_f64().unwrap() >= rec["timings_ms"]["decode"].as_f64().unwrap());

    // Deterministic for a fixed seed.
    let first = fs::read(f.path(CAPTIONS_FILE)).unwrap();
    assert_eq!(f.cmd("caption", &["--shape-id", a]), 0);
    let strip = |v: Value| {
        let mut v = v;
        for r in v["records"].as_array_mut().unwrap() {
            r.as_object_mut().unwrap().remove("timings_ms");
        }
        v
    };
    assert_eq!(strip(serde_json::from_slice(&first).unwrap()), strip(read_json(&f.path(CAPTIONS_FILE))));

    assert_eq!(f.cmd("caption", &["--shape-id", a, "--drop-part", "leg"]), 0);
    assert_eq!(f.cmd("caption", &["--shape-id", a, "--mix-with", b, "--mix-part", "seat"]), 0);
    assert_eq!(f.cmd("caption", &["--split", "test", "--limit", "2"]), 0);
    assert_eq!(f.cmd("caption", &["--shape-id", "no-such-shape"]), 2);
    assert_eq!(f.cmd("caption", &["--shape-id", a, "--mix-with", "no-such-shape", "--mix-part", "seat"]), 2);
    assert_eq!(f.cmd("caption", &["--shape-id", a, "--drop-part", "tentacle"]), 2);
    assert_eq!(f.cmd("caption", &["--shape-id", a, "--views", "9"]), 2);
}

#[test]
fn eval_reports_and_oracle() {
    let f = Fixture::trained();
    assert_eq!(f.cmd("eval", &["--split", "train", "--limit", "3"]), 0);
    let metrics = read_json(&f.path(METRICS_FILE));
    assert!(metrics["checkpoint_hash"].is_string());
    assert!((0.0..=1.0).contains(&metrics["bleu4"].as_f64().unwrap()));
    let csv = fs::read_to_string(f.path(EXAMPLES_FILE)).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().count(), 2 + 3);

    assert_eq!(f.cmd("eval", &["--oracle"]), 0);
    let metrics = read_json(&f.path(METRICS_FILE));
    assert_eq!(metrics["oracle"], true);
    assert!((metrics["bleu4"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((metrics["exact_match"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    // A dataset whose test split is empty.
    let mut ds = load_dataset(&f.path(DATASET_FILE)).unwrap();
    ds.records.retain(|r| r.split == diffcap::synthdata::Split::Train);
    let only_train = f.path("train_only.jsonl");
    fs::write(&only_train, ds.to_jsonl()).unwrap();
    assert_eq!(run(&["eval", "--config", &f.conf(), "--out", f.out(), "--dataset", only_train.to_str().unwrap(), "--oracle"]), 2);
    assert_eq!(f.cmd("eval", &["--split", "validation"]), 2);
    let missing = f.path("nope.jsonl");
    assert_eq!(run(&["eval", "--out", f.out(), "--dataset", missing.to_str().unwrap(), "--oracle"]), 1);
}

#[test]
fn ablate_reuses_one_checkpoint() {
    let f = Fixture::trained();
    assert_eq!(f.cmd("ablate", &["--axis", "samples", "--values", "1,3,5", "--limit", "2"]), 0);
    let csv = fs::read_to_string(f.path("ablate_samples.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    let hashes: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));

    assert_eq!(f.cmd("ablate", &["--axis", "views,samples", "--values", "1"]), 2);
    assert_eq!(f.cmd("ablate", &["--axis", "colour", "--values", "1"]), 2);
    assert_eq!(f.cmd("ablate", &["--axis", "pooling", "--values", "max,median"]), 2);
}

#[test]
fn inspect_schedule_tables() {
    let f = Fixture::new();
    assert_eq!(run(&["inspect-schedule", "--kind", "sqrt", "--steps", "2000", "--out", f.out()]), 0);
    let text = fs::read_to_string(f.path("schedule.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2001);
    assert!(rows[0].starts_with("t,beta,"));

    assert_eq!(run(&["inspect-schedule", "--kind", "sqrt", "--steps", "2000", "--respace", "200", "--out", f.out()]), 0);
    let text = fs::read_to_string(f.path("schedule.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 201);
    assert!(rows[0].starts_with("t,timestep_map,"));
    assert!(rows[200].starts_with("200,2000,"));

    assert_eq!(run(&["inspect-schedule", "--kind", "quadratic", "--steps", "10"]), 2);
    assert_eq!(run(&["inspect-schedule", "--kind", "sqrt", "--steps", "10", "--respace", "11"]), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_diffcap")).args(["inspect-schedule", "--steps", "5"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
}
