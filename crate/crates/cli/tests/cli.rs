use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sensemap::embedding::{EmbeddingKind, EmbeddingTable};

const DIM: usize = 12;

fn axis(i: usize, tilt: f64) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v[(i + 1) % DIM] = tilt;
    v
}

/// One lemma with a dictionary sense on axis 0 and two novel senses on
/// axes 4 and 8; each sense has its own vocabulary.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut words = EmbeddingTable::new(EmbeddingKind::Word, DIM).unwrap();
        let mut usages = EmbeddingTable::new(EmbeddingKind::Usage, DIM).unwrap();
        let mut glosses = EmbeddingTable::new(EmbeddingKind::Gloss, DIM).unwrap();
        let mut tsv = String::from("usage_id\tword\ttext\tperiod\tgloss_id\tdefinition\tlanguage\n");
        for (blob, base) in [0usize, 4, 8].into_iter().enumerate() {
            for j in 0..6 {
                words.insert(format!("w{blob}_{j}"), &axis(base, 0.02 * j as f64)).unwrap();
            }
            let gloss = format!("kupari_{blob}");
            let old = if blob == 0 { 3 } else { 0 };
            for (period, n) in [("old", old), ("new", 3)] {
                for i in 0..n {
                    let id = format!("u{blob}_{period}{i}");
                    tsv.push_str(&format!(
                        "{id}\tkupari\tkupari w{blob}_{i} teksti\t{period}\t{gloss}\tmerkitys {blob}\tfi\n"
                    ));
                    usages.insert(id, &axis(base, 0.05 * i as f64)).unwrap();
                }
            }
            if blob == 0 {
                glosses.insert(gloss, &axis(0, 0.3)).unwrap();
            }
        }
        std::fs::write(root.join("dataset.tsv"), tsv).unwrap();
        words.save_binary(&root.join("words.emb")).unwrap();
        usages.save_binary(&root.join("usages.emb")).unwrap();
        glosses.save_jsonl(&root.join("glosses.jsonl")).unwrap();
        std::fs::write(
            root.join("config.toml"),
            "dataset = \"dataset.tsv\"\nword_embeddings = \"words.emb\"\nusage_embeddings = \"usages.emb\"\n\
             gloss_embeddings = \"glosses.jsonl\"\noutput_dir = \"out\"\n\n[clustering]\nt_sc = 0.5\n",
        )
        .unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn sensemap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sensemap"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SENSEMAP_API_KEY")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn help_lists_subcommands() {
    let out = sensemap(&["--help"], Path::new("."));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["cluster", "graph", "map", "generate", "evaluate", "pipeline"] {
        assert!(text.contains(sub), "missing {sub} in\n{text}");
    }
}

#[test]
fn pipeline_writes_all_outputs() {
    let fx = Fixture::new();
    let out = sensemap(&["-q", "pipeline", "--config", "config.toml"], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["clusters.json", "predictions.tsv", "mapping.json", "graphs.json", "definitions.jsonl"] {
        assert!(fx.path("out").join(f).is_file(), "{f} missing");
    }
    let preds = lines(&fx.path("out/predictions.tsv"));
    assert_eq!(preds.len(), 1 + 9);
    assert!(preds[1..].iter().filter(|l| l.contains("\tkupari_0\t")).count() == 3);
    assert_eq!(lines(&fx.path("out/definitions.jsonl")).len(), 2);
}

#[test]
fn missing_embedding_file_is_input_error() {
    let fx = Fixture::new();
    std::fs::remove_file(fx.path("usages.emb")).unwrap();
    let out = sensemap(&["-q", "pipeline", "--config", "config.toml"], &fx.root);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usages.emb"));
    assert!(!fx.path("out/predictions.tsv").exists());
}

#[test]
fn missing_threshold_is_input_error() {
    let fx = Fixture::new();
    let out = sensemap(
        &["-q", "cluster", "--dataset", "dataset.tsv", "--word-embeddings", "words.emb", "--usage-embeddings", "usages.emb", "--output-dir", "out"],
        &fx.root,
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--t-sc"));

    std::fs::write(fx.path("bad.toml"), "dataset = \"dataset.tsv\"\nword_embeddings = \"words.emb\"\nusage_embeddings = \"usages.emb\"\ngloss_embeddings = \"glosses.jsonl\"\noutput_dir = \"out\"\n[clustering]\nk = 5\n").unwrap();
    let out = sensemap(&["-q", "pipeline", "--config", "bad.toml"], &fx.root);
    assert_eq!(code(&out), 1);
}

#[test]
fn stepwise_commands_match_pipeline() {
    let fx = Fixture::new();
    let step = |args: &[&str]| {
        let out = sensemap(args, &fx.root);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    step(&["-q", "cluster", "--config", "config.toml", "--output-dir", "steps"]);
    step(&["-q", "map", "--config", "config.toml", "--output-dir", "steps"]);
    step(&["-q", "graph", "--config", "config.toml", "--output-dir", "steps"]);
    step(&["-q", "pipeline", "--config", "config.toml", "--skip-generate"]);
    assert_eq!(
        std::fs::read(fx.path("steps/predictions.tsv")).unwrap(),
        std::fs::read(fx.path("out/predictions.tsv")).unwrap()
    );
    assert!(fx.path("steps/graphs.json").is_file());
    assert!(!fx.path("out/definitions.jsonl").exists());
}

#[test]
fn evaluate_reports_bleu_only_with_definitions() {
    let fx = Fixture::new();
    assert_eq!(code(&sensemap(&["-q", "pipeline", "--config", "config.toml"], &fx.root)), 0);
    let out = sensemap(&["-q", "evaluate", "--predictions", "out/predictions.tsv", "--gold", "dataset.tsv"], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let overall = &report["overall"];
    assert_eq!(overall["macro_f1"], 1.0);
    assert!(overall.get("bleu_mean").is_none());

    let out = sensemap(
        &["-q", "evaluate", "--predictions", "out/predictions.tsv", "--gold", "dataset.tsv", "--definitions", "out/definitions.jsonl", "--out", "report.json"],
        &fx.root,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fx.path("report.json")).unwrap()).unwrap();
    let bleu = report["overall"]["bleu_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&bleu));
    assert_eq!(report["overall"]["definitions"], 2);
}

#[test]
fn generate_resumes_only_missing_definitions() {
    let fx = Fixture::new();
    assert_eq!(code(&sensemap(&["-q", "pipeline", "--config", "config.toml", "--skip-generate"], &fx.root)), 0);
    let gen = ["generate", "--config", "config.toml", "--graphs", "out/graphs.json"];
    let out = sensemap(&gen, &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let defs = fx.path("out/definitions.jsonl");
    let first = lines(&defs);
    assert_eq!(first.len(), 2);
    for l in &first {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["definition"].as_str().unwrap().split_whitespace().count() <= 10);
        assert_eq!(v["model"], "stub");
    }

    std::fs::write(&defs, format!("{}\n", first[0])).unwrap();
    let out = sensemap(&gen, &fx.root);
    assert_eq!(code(&out), 0);
    let log = String::from_utf8_lossy(&out.stderr);
    assert!(log.contains("1 definitions generated, 1 reused"), "{log}");
    assert_eq!(lines(&defs), first);
}

#[test]
fn http_backend_without_key_fails_at_runtime() {
    let fx = Fixture::new();
    assert_eq!(code(&sensemap(&["-q", "pipeline", "--config", "config.toml", "--skip-generate"], &fx.root)), 0);
    let out = sensemap(
        &["-q", "generate", "--config", "config.toml", "--backend", "http", "--api-key-env", "SENSEMAP_TEST_UNSET_KEY"],
        &fx.root,
    );
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SENSEMAP_TEST_UNSET_KEY"));
}

#[test]
fn no_novel_senses_gives_empty_definitions() {
    let fx = Fixture::new();
    // a very low threshold maps every cluster to the single gloss
    let out = sensemap(&["-q", "pipeline", "--config", "config.toml", "--sim-threshold=-1"], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(lines(&fx.path("out/predictions.tsv"))[1..].iter().all(|l| l.contains("\tfalse\t")));
    assert_eq!(std::fs::read_to_string(fx.path("out/definitions.jsonl")).unwrap(), "");
}
