//! End-to-end tests of the `fgl` binary: every command runs against a tiny
//! corpus and a one-layer model in a temporary directory, exactly as a user
//! would drive it.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use fgl_core::corpus::load_dialogue_corpus;
use fgl_core::training::read_trace;

const WORDS: [&str; 10] = [
    "ba", "ko", "mi", "ra", "tu", "sen", "lo", "vi", "da", "pe",
];

fn sentence(salt: usize, i: usize, j: usize) -> String {
    (0..4)
        .map(|k| WORDS[(salt * 13 + i * 7 + j * 3 + k) % WORDS.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Documents of `sents` sentences each, blank-line separated.
fn document_corpus(salt: usize, docs: usize, sents: usize) -> String {
    let mut text = String::new();
    for d in 0..docs {
        for s in 0..sents {
            text.push_str(&sentence(salt, d, s));
            text.push('\n');
        }
        text.push('\n');
    }
    text
}

/// Dialogue JSONL with four utterances per dialogue.
fn dialogue_corpus(salt: usize, dialogues: usize) -> String {
    let mut text = String::new();
    for d in 0..dialogues {
        let utterances: Vec<String> = (0..4).map(|u| sentence(salt, d, u)).collect();
        text.push_str(&serde_json::json!({ "utterances": utterances }).to_string());
        text.push('\n');
    }
    text
}

const BASE_CONFIG: &str = r#"
seed = 7
out_dir = "out"

[corpus]
pretrain_train = "pretrain-train.txt"
pretrain_valid = "pretrain-valid.txt"
dialogue_train = "dialogue-train.jsonl"
dialogue_valid = "dialogue-valid.jsonl"
dialogue_test = "dialogue-test.jsonl"

[tokenizer]
num_merges = 30

[model]
num_layers = 1
num_heads = 2
d_model = 16
d_ff = 32
max_positions = 64

[pretrain]
max_epochs = 2
warmup = 10

[finetune]
max_epochs = 2
patience = 2

[decoder]
max_len = 8

[probe]
eval_split = "dialogue-test"
diversity_contexts = 6
samples_per_trigger = 2
"#;

/// A workspace directory with corpora and a config file written into it.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: String| std::fs::write(dir.path().join(name), text).unwrap();
    write("pretrain-train.txt", document_corpus(1, 12, 5));
    write("pretrain-valid.txt", document_corpus(2, 3, 5));
    write("dialogue-train.jsonl", dialogue_corpus(3, 10));
    write("dialogue-valid.jsonl", dialogue_corpus(4, 4));
    write("dialogue-test.jsonl", dialogue_corpus(5, 4));
    write("config.toml", BASE_CONFIG.to_string());
    write(
        "terms.jsonl",
        [
            r#"{"term": "ba ko", "description": "ba ko mi ra"}"#,
            r#"{"term": "sen lo", "description": "sen lo vi da"}"#,
        ]
        .join("\n")
            + "\n",
    );
    dir
}

fn fgl(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fgl"));
    cmd.current_dir(dir).env_remove("FGL_OUT");
    cmd
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(cmd: &mut Command, code: i32) -> String {
    let out = cmd.output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn out_path(dir: &Path, tail: &str) -> PathBuf {
    dir.join("out").join(tail)
}

#[test]
fn prepare_writes_artifacts_and_a_clean_rerun_is_a_noop() {
    let ws = workspace();
    let dir = ws.path();
    let stdout = run_ok(fgl(dir).args(["prepare", "--config", "config.toml"]));
    assert!(stdout.contains("prepared"), "{stdout}");

    for name in [
        "prepared/manifest.json",
        "prepared/merges.txt",
        "prepared/vocab.txt",
        "prepared/config.toml",
        "prepared/pairs-pretrain-train.jsonl",
        "prepared/pairs-pretrain-valid.jsonl",
        "prepared/pairs-dialogue-train.jsonl",
        "prepared/pairs-dialogue-valid.jsonl",
        "prepared/pairs-dialogue-test.jsonl",
        "prepared/sentences-pretrain-train.txt",
        "prepared/sentences-pretrain-valid.txt",
    ] {
        assert!(out_path(dir, name).exists(), "missing {name}");
    }

    let manifest_before = std::fs::read(out_path(dir, "prepared/manifest.json")).unwrap();
    let stdout = run_ok(fgl(dir).args(["prepare", "--config", "config.toml"]));
    assert!(stdout.contains("up to date"), "{stdout}");
    let manifest_after = std::fs::read(out_path(dir, "prepared/manifest.json")).unwrap();
    assert_eq!(manifest_before, manifest_after);

    // Touching a corpus invalidates the manifest and triggers a rebuild.
    let corpus = dir.join("pretrain-train.txt");
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    text.push_str("ba ko mi ra\ntu sen lo vi\n\n");
    std::fs::write(&corpus, text).unwrap();
    let stdout = run_ok(fgl(dir).args(["prepare", "--config", "config.toml"]));
    assert!(stdout.contains("prepared"), "{stdout}");
    assert!(!stdout.contains("up to date"), "{stdout}");
}

#[test]
fn prepare_reports_bad_configs_and_missing_corpora() {
    let ws = workspace();
    let dir = ws.path();

    // No corpora configured at all: a usage error.
    std::fs::write(dir.join("empty.toml"), "seed = 1\n").unwrap();
    let stderr = run_err(fgl(dir).args(["prepare", "--config", "empty.toml"]), 1);
    assert!(stderr.contains("no corpora"), "{stderr}");

    // An unknown key anywhere in the file: a usage error naming it.
    std::fs::write(dir.join("typo.toml"), "sede = 5\n").unwrap();
    let stderr = run_err(fgl(dir).args(["prepare", "--config", "typo.toml"]), 1);
    assert!(stderr.contains("sede"), "{stderr}");
    std::fs::write(dir.join("typo2.toml"), "[model]\nwidth = 4\n").unwrap();
    let stderr = run_err(fgl(dir).args(["prepare", "--config", "typo2.toml"]), 1);
    assert!(stderr.contains("width"), "{stderr}");

    // A configured corpus file that does not exist: a runtime failure that
    // names the offending key.
    std::fs::remove_file(dir.join("pretrain-valid.txt")).unwrap();
    let stderr = run_err(fgl(dir).args(["prepare", "--config", "config.toml"]), 2);
    assert!(stderr.contains("pretrain_valid"), "{stderr}");
}

#[test]
fn train_probe_export_flow_produces_consistent_artifacts() {
    let ws = workspace();
    let dir = ws.path();
    run_ok(fgl(dir).args(["prepare", "--config", "config.toml"]));

    // Pretrain, then warm-started finetunes in each strategy family.
    run_ok(fgl(dir).args(["pretrain", "--config", "config.toml"]));
    let pretrain_dir = out_path(dir, "runs/pretrain-ns-s7");
    for name in ["trace.jsonl", "best.ckpt", "last.ckpt", "config.toml"] {
        assert!(pretrain_dir.join(name).exists(), "missing {name}");
    }
    let trace = read_trace(&pretrain_dir.join("trace.jsonl")).unwrap();
    assert_eq!(trace.len(), 3); // pre-training row + two epochs
    assert!(trace.iter().all(|row| row.splits.contains_key("valid")));

    let ck = pretrain_dir.to_str().unwrap();
    run_ok(fgl(dir).args(["finetune", "--config", "config.toml", "--checkpoint", ck]));
    run_ok(fgl(dir).args([
        "finetune",
        "--config",
        "config.toml",
        "--checkpoint",
        ck,
        "--strategy",
        "mix-review",
        "--mix-ratio",
        "4",
        "--mix-decay",
        "0.7",
    ]));
    run_ok(fgl(dir).args([
        "finetune",
        "--config",
        "config.toml",
        "--checkpoint",
        ck,
        "--strategy",
        "wd-pre",
        "--lambda",
        "0.1",
    ]));

    // Finetune traces track the pretraining split, and wd-pre records its
    // penalty term.
    let standard = out_path(dir, "runs/standard-finetune-s7");
    let trace = read_trace(&standard.join("trace.jsonl")).unwrap();
    assert!(trace.iter().all(|row| row.splits.contains_key("pretrain-valid")));
    let trace = read_trace(&out_path(dir, "runs/wd-pre-s7/trace.jsonl")).unwrap();
    assert!(trace.iter().skip(1).all(|row| row.penalty.is_some()));

    // Warm-start strategies refuse to run without a starting checkpoint.
    let stderr = run_err(fgl(dir).args(["finetune", "--config", "config.toml"]), 1);
    assert!(stderr.contains("--checkpoint"), "{stderr}");

    // Probes: without a terms file the knowledge probe records its error
    // and everything else still runs.
    let standard_best = standard.join("best.ckpt");
    run_ok(fgl(dir).args([
        "probe",
        "--config",
        "config.toml",
        "--checkpoint",
        standard_best.to_str().unwrap(),
        "--checkpoint",
        ck,
    ]));
    let report_path = out_path(dir, "probes/standard-finetune-s7-best.json");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["errors"]["knowledge"].as_str().unwrap().contains("probe.terms"));
    let ppl = report["perplexity"]["dialogue-test"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    assert!(report["sensitivity"]["clean_ppl"].as_f64().is_some());
    assert!(report["diversity"]["bigram_entropy"].as_f64().is_some());
    let projection: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_path(dir, "probes/projection.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(projection["points"].as_array().unwrap().len(), 2);

    // With terms configured the knowledge probe produces BLEU scores, and
    // an identical invocation reproduces the reports byte for byte.
    let with_terms = BASE_CONFIG.replace("[probe]", "[probe]\nterms = \"terms.jsonl\"");
    std::fs::write(dir.join("terms.toml"), with_terms).unwrap();
    let probe_args = [
        "probe",
        "--config",
        "terms.toml",
        "--checkpoint",
        standard_best.to_str().unwrap(),
        "--checkpoint",
        ck,
    ];
    run_ok(fgl(dir).args(probe_args));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["knowledge"]["bleu2"].as_f64().unwrap().is_finite());
    assert!(report.get("errors").is_none());
    let first = std::fs::read(&report_path).unwrap();
    let first_projection =
        std::fs::read(out_path(dir, "probes/projection.json")).unwrap();
    run_ok(fgl(dir).args(probe_args));
    assert_eq!(std::fs::read(&report_path).unwrap(), first);
    assert_eq!(
        std::fs::read(out_path(dir, "probes/projection.json")).unwrap(),
        first_projection
    );

    // Export renders the trace and the reports.
    run_ok(fgl(dir).args([
        "export",
        "--config",
        "config.toml",
        "--trace",
        standard.join("trace.jsonl").to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]));
    let svg = std::fs::read_to_string(out_path(dir, "export/trace-nll.svg")).unwrap();
    assert!(svg.contains("<polyline"));
    assert!(svg.contains("pretrain-valid"));
    let csv = std::fs::read_to_string(out_path(dir, "export/trace-ppl.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,"));
    let probes_csv = std::fs::read_to_string(out_path(dir, "export/probes.csv")).unwrap();
    assert!(probes_csv.contains("sensitivity"));
    assert!(probes_csv.contains('%'), "{probes_csv}");
}

#[test]
fn resume_reproduces_the_uninterrupted_trace() {
    let ws = workspace();
    let dir = ws.path();
    let four_epochs = BASE_CONFIG.replace(
        "max_epochs = 2\nwarmup = 10",
        "max_epochs = 4\npatience = 10\nwarmup = 10",
    );
    std::fs::write(dir.join("four.toml"), &four_epochs).unwrap();

    // Reference: one uninterrupted four-epoch run.
    run_ok(fgl(dir).args(["prepare", "--config", "four.toml", "--out", "full"]));
    run_ok(fgl(dir).args(["pretrain", "--config", "four.toml", "--out", "full"]));
    let full = read_trace(&dir.join("full/runs/pretrain-ns-s7/trace.jsonl")).unwrap();
    assert_eq!(full.len(), 5);

    // The same run stopped after two epochs, then resumed to four.
    run_ok(fgl(dir).args(["prepare", "--config", "config.toml", "--out", "half"]));
    run_ok(fgl(dir).args(["pretrain", "--config", "config.toml", "--out", "half"]));
    let run_dir = dir.join("half/runs/pretrain-ns-s7");
    run_ok(fgl(dir).args([
        "pretrain",
        "--config",
        "four.toml",
        "--out",
        "half",
        "--resume",
        run_dir.to_str().unwrap(),
    ]));
    let resumed = read_trace(&run_dir.join("trace.jsonl")).unwrap();

    assert_eq!(resumed.len(), full.len());
    for (a, b) in full.iter().zip(&resumed) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.train_nll, b.train_nll);
    }
}

#[test]
fn chat_saves_a_transcript_that_reloads_as_a_dialogue_corpus() {
    let ws = workspace();
    let dir = ws.path();
    let one_epoch = BASE_CONFIG.replace("max_epochs = 2\nwarmup = 10", "max_epochs = 1\nwarmup = 10");
    std::fs::write(dir.join("one.toml"), one_epoch).unwrap();
    run_ok(fgl(dir).args(["prepare", "--config", "one.toml"]));
    run_ok(fgl(dir).args(["pretrain", "--config", "one.toml"]));

    let script = "ba ko mi\n:k 1\nsen lo vi\n:seed 3\nra tu da\n:reset\npe ba ko\nmi ra tu\n:quit\n";
    let chat = |out: &mut Vec<u8>| {
        let mut child = fgl(dir)
            .args([
                "chat",
                "--config",
                "one.toml",
                "--checkpoint",
                "out/runs/pretrain-ns-s7",
                "--k",
                "1",
            ])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child
            .stdin
            .take()
            .unwrap()
            .write_all(script.as_bytes())
            .unwrap();
        let Output { status, stdout, .. } = child.wait_with_output().unwrap();
        assert_eq!(status.code(), Some(0));
        *out = stdout;
    };
    let mut stdout = Vec::new();
    chat(&mut stdout);
    let text = String::from_utf8_lossy(&stdout);
    assert!(text.contains("bot>"), "{text}");
    assert!(text.contains("(context cleared)"), "{text}");

    let transcript = out_path(dir, "chat/transcript.jsonl");
    let corpus = load_dialogue_corpus(&transcript).unwrap();
    assert_eq!(corpus.dialogues.len(), 2); // one before :reset, one after
    assert_eq!(corpus.dialogues[0][0], "ba ko mi");
    assert!(corpus.dialogues[0].len() >= 2);

    // Under :k 1 decoding is greedy, so a rerun of the same script writes
    // the same transcript.
    let first = std::fs::read(&transcript).unwrap();
    chat(&mut stdout);
    assert_eq!(std::fs::read(&transcript).unwrap(), first);
}

#[test]
fn export_validates_inputs_before_writing_anything() {
    let ws = workspace();
    let dir = ws.path();

    // No inputs at all: usage error.
    let stderr = run_err(fgl(dir).args(["export", "--config", "config.toml"]), 1);
    assert!(stderr.contains("--trace"), "{stderr}");

    // An empty trace: runtime error, and no export directory appears.
    std::fs::write(dir.join("empty-trace.jsonl"), "").unwrap();
    let stderr = run_err(
        fgl(dir).args([
            "export",
            "--config",
            "config.toml",
            "--trace",
            "empty-trace.jsonl",
        ]),
        2,
    );
    assert!(stderr.contains("empty"), "{stderr}");
    assert!(!out_path(dir, "export").exists());
}

#[test]
fn lock_file_rejects_concurrent_commands() {
    let ws = workspace();
    let dir = ws.path();
    std::fs::create_dir_all(out_path(dir, "")).unwrap();
    std::fs::write(out_path(dir, ".lock"), "12345\n").unwrap();
    let stderr = run_err(fgl(dir).args(["prepare", "--config", "config.toml"]), 2);
    assert!(stderr.contains("locked"), "{stderr}");
    assert!(stderr.contains("12345"), "{stderr}");

    std::fs::remove_file(out_path(dir, ".lock")).unwrap();
    run_ok(fgl(dir).args(["prepare", "--config", "config.toml"]));
    // The lock is released afterwards.
    assert!(!out_path(dir, ".lock").exists());
}

#[test]
fn fgl_out_sets_the_default_output_root() {
    let ws = workspace();
    let dir = ws.path();
    // Strip the out_dir line so the environment variable is the default.
    let config = BASE_CONFIG.replace("out_dir = \"out\"\n", "");
    std::fs::write(dir.join("envcfg.toml"), config).unwrap();

    run_ok(
        fgl(dir)
            .args(["prepare", "--config", "envcfg.toml"])
            .env("FGL_OUT", "from-env"),
    );
    assert!(dir.join("from-env/prepared/manifest.json").exists());

    // An explicit --out still wins over the environment.
    run_ok(
        fgl(dir)
            .args(["prepare", "--config", "envcfg.toml", "--out", "flagged"])
            .env("FGL_OUT", "ignored-env"),
    );
    assert!(dir.join("flagged/prepared/manifest.json").exists());
    assert!(!dir.join("ignored-env").exists());
}

#[test]
fn usage_errors_exit_with_code_one() {
    let ws = workspace();
    let dir = ws.path();
    // Unknown subcommand and missing required flags come from the parser.
    run_err(fgl(dir).arg("bogus"), 1);
    run_err(fgl(dir).arg("probe"), 1);
    // Help and version are not errors.
    run_ok(fgl(dir).arg("--help"));
    run_ok(fgl(dir).arg("--version"));
    // Unknown strategy and unknown probe names are caught after parsing,
    // before any real work starts.
    let stderr = run_err(
        fgl(dir).args(["pretrain", "--config", "config.toml", "--strategy", "nope"]),
        1,
    );
    assert!(stderr.contains("unknown strategy"), "{stderr}");
    let stderr = run_err(
        fgl(dir).args([
            "probe",
            "--config",
            "config.toml",
            "--checkpoint",
            "missing.ckpt",
            "--probes",
            "ppl,entropy",
        ]),
        1,
    );
    assert!(stderr.contains("unknown probe"), "{stderr}");
    // A finetune strategy handed to pretrain is caught the same way.
    let stderr = run_err(
        fgl(dir).args([
            "pretrain",
            "--config",
            "config.toml",
            "--strategy",
            "mix-review",
        ]),
        1,
    );
    assert!(stderr.contains("finetune"), "{stderr}");
}
