use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use topicsel::checkpoint::Checkpoint;
use topicsel::corpus::{load_corpus, split_corpus};
use topicsel::nn::optim::Adam;
use topicsel::personasel::SelectionTrace;
use topicsel::training::{build_model, ModelState, TrainConfig};
use topicsel_cli::{cmd_chat, cmd_eval, Common, SplitName};

const WORLD: &str = "\
n_users = 12
n_personas_global = 10
personas_per_user = 3
n_topics = 20
topics_per_persona_affinity = 3
n_dialogues = 60
dialogue_length_min = 3
dialogue_length_max = 5
";

const MODEL: &str = "\
d = 8
layers = 1
heads = 2
ffn_width = 16
decoder_layers = 1
max_response_len = 10
k = 3
lr = 0.01
batch = 16
max_epochs = 2
patience = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_topicsel"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("world.conf"), WORLD).unwrap();
        fs::write(dir.path().join("model.conf"), MODEL).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn s(&self, p: &str) -> String {
        self.path(p).to_string_lossy().into_owned()
    }

    fn gen(&self, out: &str, seed: &str) -> PathBuf {
        let o = run(&[
            "gen-data",
            "--config",
            &self.s("world.conf"),
            "--out",
            &self.s(out),
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        self.path(out).join("corpus.jsonl")
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.s("model.conf"), data.to_string_lossy().into_owned(), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_data_writes_loadable_corpus_with_spec_counts() {
    let f = Fixture::new();
    let corpus = f.gen("a", "1");
    assert!(f.path("a/ground_truth.json").exists());
    let (c, _) = load_corpus(&corpus).unwrap();
    assert_eq!(c.dialogues.len(), 60);
    assert_eq!(c.users.len(), 12);
    assert_eq!(c.topics.len(), 20);
    assert_eq!(c.personas.len(), 10);
    assert!(c.users.iter().all(|u| u.persona_ids.len() == 3));
    assert!(c.dialogues.iter().all(|d| (3..=5).contains(&d.turns.len())));

    let again = f.gen("b", "1");
    assert_eq!(fs::read(&corpus).unwrap(), fs::read(&again).unwrap());
    let other = f.gen("c", "2");
    assert_ne!(fs::read(&corpus).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn train_then_eval_reproduces_best_validation_metrics() {
    let f = Fixture::new();
    let data = f.gen("data", "3");
    let o = f.train(&data, "run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = f.path("run/train_log.csv");
    assert_eq!(
        fs::read_to_string(&log).unwrap().lines().next().unwrap(),
        "epoch,loss,l_c,l_t,l_r,val_hit1,val_hit3,val_hit5,val_bleu1"
    );
    assert_eq!(line_count(&log), 3);
    assert!(f.path("run/topic_sets.csv").exists());
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("run/valid_metrics.json")).unwrap()).unwrap();

    let o = run(&[
        "eval",
        "--checkpoint",
        &f.s("run/model.ckpt"),
        "--data",
        &data.to_string_lossy(),
        "--split",
        "valid",
        "--out",
        &f.s("eval"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("eval/metrics.json")).unwrap()).unwrap();
    for key in ["hit1", "hit3", "hit5", "bleu1"] {
        assert_eq!(got[key], best[key], "{key}");
    }
    let gens = fs::read_to_string(f.path("eval/generations.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(gens.lines().next().unwrap()).unwrap();
    for key in ["example_id", "predicted_topic", "response_tokens", "copy_fraction"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn untrained_model_hits_at_chance() {
    // A fresh model's ranking is unrelated to the targets, so hit@1 ≈ 1/|T|.
    let f = Fixture::new();
    let o = run(&[
        "gen-data",
        "--config",
        &f.s("world.conf"),
        "--set",
        "n_dialogues=400",
        "--out",
        &f.s("data"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = f.path("data/corpus.jsonl");
    let (corpus, _) = load_corpus(&data).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.apply(&topicsel::config::KeyValues::parse(MODEL).unwrap()).unwrap();
    let splits = split_corpus(&corpus, cfg.train_frac, cfg.valid_frac, cfg.seed).unwrap();
    let mut total = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        cfg.seed = seed;
        let model = build_model(&splits, &cfg).unwrap();
        let optimizer = Adam::new(&model.store, cfg.lr, cfg.l2);
        let ckpt = Checkpoint {
            train: TrainConfig { seed: 0, ..cfg.clone() },
            state: ModelState {
                model,
                optimizer,
                epoch: 0,
                best: None,
            },
        };
        let path = f.path(&format!("fresh{seed}.ckpt"));
        ckpt.save(&path).unwrap();
        let common = Common {
            out: f.path("eval"),
            ..Default::default()
        };
        let report = cmd_eval(&common, &path, &data, SplitName::Train).unwrap();
        total += report.hit1;
    }
    let mean = total / seeds as f64;
    let chance = 1.0 / 20.0;
    assert!((mean - chance).abs() < 0.04, "mean hit@1 {mean} vs chance {chance}");
}

#[test]
fn ablate_all_emits_nine_rows_and_single_cell_sweep_one() {
    let f = Fixture::new();
    let data = f.gen("data", "4");
    let data = data.to_string_lossy().into_owned();
    let o = run(&[
        "ablate",
        "--config",
        &f.s("model.conf"),
        "--set",
        "max_epochs=1",
        "--set",
        "patience=1",
        "--data",
        &data,
        "--out",
        &f.s("abl"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(f.path("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("full,"));
    assert!(rows.iter().any(|r| r.starts_with("w_random_persona_selection,")));

    let o = run(&[
        "sweep",
        "--config",
        &f.s("model.conf"),
        "--set",
        "max_epochs=1",
        "--set",
        "patience=1",
        "--data",
        &data,
        "--grid",
        "history=4",
        "--out",
        &f.s("sweep"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(f.path("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("history,4,"));
}

#[test]
fn chat_session_contract() {
    let f = Fixture::new();
    let data = f.gen("data", "5");
    let o = f.train(&data, "run", &["--set", "max_epochs=1", "--set", "patience=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = f.path("run/model.ckpt");
    let (corpus, _) = load_corpus(&data).unwrap();
    let topic = corpus.topics[2].name.clone();

    // :quit immediately leaves an empty transcript.
    let common = Common {
        out: f.path("chat0"),
        ..Default::default()
    };
    let path = cmd_chat(
        &common,
        &ckpt,
        Some(&data),
        1,
        Cursor::new(":quit\nignored\n"),
        Vec::new(),
    )
    .unwrap();
    assert_eq!(fs::read_to_string(path).unwrap(), "");

    let script = format!("hello there\nlet's talk about {topic}\nand more\n:quit\n");
    let mut replies = Vec::new();
    for i in 0..2 {
        let common = Common {
            out: f.path(&format!("chat{}", i + 1)),
            seed: Some(9),
            ..Default::default()
        };
        let mut out = Vec::new();
        let path = cmd_chat(&common, &ckpt, None, 1, Cursor::new(script.clone()), &mut out).unwrap();
        replies.push((String::from_utf8(out).unwrap(), fs::read_to_string(path).unwrap()));
    }
    assert_eq!(replies[0], replies[1], "greedy replies are deterministic");
    let (screen, transcript) = &replies[0];
    assert!(screen.starts_with("note: no topic recognized"));
    assert_eq!(transcript.lines().count(), 2);
    assert_eq!(screen.matches("system [").count(), 2);

    // The displayed positive set agrees with the trace line.
    let lines: Vec<&str> = screen.lines().collect();
    let mut checked = 0;
    for (i, l) in lines.iter().enumerate() {
        if let Some(json) = l.strip_prefix("trace: ") {
            let trace: SelectionTrace = serde_json::from_str(json).unwrap();
            let shown: Vec<usize> = lines[i - 1]
                .trim_start_matches("personas: ")
                .split(' ')
                .filter(|p| p.starts_with('+'))
                .map(|p| p[1..p.find('(').unwrap()].parse().unwrap())
                .collect();
            assert_eq!(shown, trace.positive);
            let record: serde_json::Value = serde_json::from_str(transcript.lines().nth(checked).unwrap()).unwrap();
            assert_eq!(record["selection"]["positive"], serde_json::json!(trace.positive));
            checked += 1;
        }
    }
    assert_eq!(checked, 2);
}

#[test]
fn chat_rejects_mismatched_corpus() {
    let f = Fixture::new();
    let data = f.gen("data", "6");
    let o = f.train(&data, "run", &["--set", "max_epochs=1", "--set", "patience=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&[
        "gen-data",
        "--config",
        &f.s("world.conf"),
        "--set",
        "n_topics=25",
        "--out",
        &f.s("other"),
    ]);
    assert!(o.status.success());
    let o = bin()
        .args([
            "chat",
            "--checkpoint",
            &f.s("run/model.ckpt"),
            "--data",
            &f.s("other/corpus.jsonl"),
            "--out",
            &f.s("chat"),
        ])
        .stdin(std::process::Stdio::null())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("topics do not match"));
}

#[test]
fn exit_codes_and_single_line_reasons() {
    let f = Fixture::new();
    let cases: Vec<(Vec<String>, i32)> = vec![
        (vec!["train".into(), "--bogus".into()], 1),
        (vec!["frobnicate".into()], 1),
        (
            vec![
                "train".into(),
                "--data".into(),
                f.s("missing.jsonl"),
                "--out".into(),
                f.s("o"),
            ],
            2,
        ),
        (
            vec![
                "gen-data".into(),
                "--set".into(),
                "no_such_key=1".into(),
                "--out".into(),
                f.s("o"),
            ],
            1,
        ),
    ];
    for (args, code) in cases {
        let o = run(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(code), "{args:?}: {}", stderr(&o));
        let err = stderr(&o);
        let reason: Vec<&str> = err.lines().filter(|l| l.starts_with("error: ")).collect();
        assert_eq!(reason.len(), 1, "{err}");
    }

    let data = f.gen("data", "7");
    let o = f.train(&data, "boom", &["--set", "lr=1e12"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error: numeric failure")));

    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}
